//! Command-line front end: ingest pooled biomarker data, calibrate, fit the
//! outcome model with propagated uncertainty, and run simulation scenarios.
//!
//! Anything that affects numerics lives in a JSON config (or a named preset);
//! flags cover I/O, seeding, and thread caps only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use poolcalib::calibration::{calibrate_dataset, compute_icc, IccConvention};
use poolcalib::data::{load_dataset, summarize_dataset, ColumnSchema, PooledDataset};
use poolcalib::error::{Error, Result};
use poolcalib::lmm::fit_lmm;
use poolcalib::minque::MinqueOptions;
use poolcalib::simulation::{
    run_coverage_sweep, run_scenario, CoverageReport, ScenarioConfig, ScenarioReport,
};
use poolcalib::uncertainty::{fit_with_uncertainty, CombineRule, FitOptions};

#[derive(Parser)]
#[command(name = "poolcalib", version, about = "Biomarker calibration for pooled studies")]
struct Cli {
    /// Cap worker threads (1 reproduces parallel results exactly).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the calibrated outcome model with propagated uncertainty.
    Fit(FitArgs),
    /// Fit the measurement model and write per-subject calibrated values.
    Calibrate(CalibrateArgs),
    /// Run a Monte Carlo scenario (config file or named preset).
    Simulate(SimulateArgs),
    /// Render a scenario or coverage report JSON as a delimited table.
    Report(ReportArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV of subject records.
    #[arg(long)]
    data: PathBuf,
    /// JSON fit config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path for the FitResult JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional diagnostic JSON dump (theta, xi, sigma2, convergence).
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV: subject_id, x_tilde, conditional_variance, subject_kind.
    #[arg(long)]
    out: PathBuf,
    /// Output path for the parameter JSON (theta, xi, sigma2, ICCs).
    #[arg(long)]
    params_out: Option<PathBuf>,
    /// ICC formula variant.
    #[arg(long, value_enum)]
    icc_convention: Option<IccFlag>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config JSON (mutually exclusive with presets).
    #[arg(long, conflicts_with_all = ["table1", "table2", "fig1", "fig2"])]
    config: Option<PathBuf>,
    /// Operating characteristics grid: 4 methods x 6 odds ratios.
    #[arg(long)]
    table1: bool,
    /// Coverage over pseudo-dataset counts I in {5,10,20,50}.
    #[arg(long)]
    table2: bool,
    /// Calibration-subset sweep: 5%, 8%, 15% of each study.
    #[arg(long)]
    fig1: bool,
    /// Study-count sweep: m in {2,4,8}.
    #[arg(long)]
    fig2: bool,
    /// Target outcome prevalence for presets.
    #[arg(long, default_value_t = 0.10)]
    prevalence: f64,
    /// Master seed; all randomness flows from it.
    #[arg(long)]
    seed: u64,
    /// Override the preset replicate count (presets default to 1000).
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// ScenarioReport or CoverageReport JSON.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV table; stdout also gets an aligned rendering.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum IccFlag {
    Paper,
    Conventional,
}

impl From<IccFlag> for IccConvention {
    fn from(f: IccFlag) -> Self {
        match f {
            IccFlag::Paper => IccConvention::Paper,
            IccFlag::Conventional => IccConvention::Conventional,
        }
    }
}

/// Fit/calibrate config document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitConfig {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    #[serde(default = "default_pseudo")]
    pseudo_datasets: usize,
    #[serde(default)]
    rule: CombineRule,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    minque_iterations: Option<usize>,
    #[serde(default)]
    icc_convention: Option<IccConventionConfig>,
    #[serde(default)]
    columns: Option<ColumnSchema>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum IccConventionConfig {
    Paper,
    Conventional,
}

fn default_schema_version() -> u32 {
    1
}

fn default_pseudo() -> usize {
    20
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            pseudo_datasets: 20,
            rule: CombineRule::Standard,
            seed: 0,
            minque_iterations: None,
            icc_convention: None,
            columns: None,
        }
    }
}

impl FitConfig {
    fn options(&self) -> FitOptions {
        FitOptions {
            pseudo_datasets: self.pseudo_datasets,
            rule: self.rule,
            seed: self.seed,
            minque_iterations: self.minque_iterations,
            icc_convention: match self.icc_convention {
                Some(IccConventionConfig::Conventional) => IccConvention::Conventional,
                _ => IccConvention::Paper,
            },
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    config_sha256: Option<String>,
    seed: u64,
    tool_version: String,
    started_at_unix: u64,
    finished_at_unix: u64,
    warnings: Vec<String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn read_fit_config(path: &Option<PathBuf>) -> Result<(FitConfig, Option<String>)> {
    match path {
        None => Ok((FitConfig::default(), None)),
        Some(p) => {
            let bytes = fs::read(p)?;
            let cfg: FitConfig = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Validation(format!("config parse failure: {e}")))?;
            if cfg.schema_version != 1 {
                return Err(Error::Validation(format!(
                    "unsupported schema_version {}",
                    cfg.schema_version
                )));
            }
            Ok((cfg, Some(sha256_hex(&bytes))))
        }
    }
}

fn load_data(path: &Path, cfg: &FitConfig) -> Result<PooledDataset> {
    let schema = cfg.columns.clone().unwrap_or_default();
    load_dataset(path, &schema)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serialization failure: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config_path: Option<&Path>,
    config_sha256: Option<String>,
    seed: u64,
    started: u64,
    warnings: Vec<String>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: config_path.map(|p| p.display().to_string()),
        config_sha256,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at_unix: started,
        finished_at_unix: unix_now(),
        warnings,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let started = unix_now();
    let (cfg, config_hash) = read_fit_config(&args.config)?;
    let ds = load_data(&args.data, &cfg)?;
    let result = fit_with_uncertainty(&ds, &cfg.options())?;

    write_json(&args.out, &result)?;
    if let Some(diag) = &args.diagnostics {
        write_json(
            diag,
            &serde_json::json!({
                "theta": result.theta,
                "xi": result.xi,
                "sigma2": result.sigma2,
                "converged": result.converged,
                "iterations": result.iterations,
                "pseudo_redraws": result.pseudo_redraws,
                "warnings": result.warnings,
            }),
        )?;
    }

    let summary = summarize_dataset(&ds);
    println!(
        "fit: {} subjects in {} studies ({} calibration)",
        summary.n_total, summary.m, summary.n_calibration
    );
    println!(
        "beta_x = {:.4} (SE {:.4}); OR = {:.3} (95% CI {:.3}, {:.3})",
        result.beta_x, result.se_beta_x, result.odds_ratio, result.or_ci_low, result.or_ci_high
    );
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }

    let dir = args.out.parent().unwrap_or_else(|| Path::new("."));
    write_manifest(
        dir,
        "fit",
        args.config.as_deref(),
        config_hash,
        cfg.seed,
        started,
        result.warnings.clone(),
    )
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let started = unix_now();
    let (cfg, config_hash) = read_fit_config(&args.config)?;
    let ds = load_data(&args.data, &cfg)?;
    let minque_options = MinqueOptions {
        max_iterations: cfg.minque_iterations.unwrap_or(1),
        ..Default::default()
    };
    let lmm = fit_lmm(&ds, &minque_options)?;
    let calibrated = calibrate_dataset(&ds, &lmm.params)?;

    let mut out = fs::File::create(&args.out)?;
    writeln!(out, "subject_id,x_tilde,conditional_variance,subject_kind")?;
    for (rec, cal) in ds.subjects.iter().zip(&calibrated) {
        let kind = match cal.subject_kind {
            poolcalib::calibration::SubjectKind::Calibration => "calibration",
            poolcalib::calibration::SubjectKind::Noncalibration => "noncalibration",
        };
        writeln!(
            out,
            "{},{},{},{}",
            rec.subject_id, cal.x_tilde, cal.conditional_variance, kind
        )?;
    }

    let convention = args
        .icc_convention
        .map(IccConvention::from)
        .unwrap_or(IccConvention::Paper);
    let icc = compute_icc(&lmm.params.sigma2, lmm.params.labs(), convention);
    if let Some(params_out) = &args.params_out {
        write_json(
            params_out,
            &serde_json::json!({
                "theta": lmm.params.theta,
                "xi": lmm.params.xi,
                "sigma2": lmm.params.sigma2,
                "icc": icc,
                "minque_floored": lmm.minque_floored,
                "minque_iterations": lmm.minque_iterations,
                "warnings": lmm.warnings,
            }),
        )?;
    }
    println!("calibrate: wrote {} rows to {}", calibrated.len(), args.out.display());
    for w in &lmm.warnings {
        eprintln!("warning: {w}");
    }

    let dir = args.out.parent().unwrap_or_else(|| Path::new("."));
    write_manifest(
        dir,
        "calibrate",
        args.config.as_deref(),
        config_hash,
        cfg.seed,
        started,
        lmm.warnings.clone(),
    )
}

fn preset_base(args: &SimulateArgs) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::base(args.prevalence);
    cfg.seed = args.seed;
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    cfg
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let started = unix_now();
    fs::create_dir_all(&args.out_dir)?;
    let presets = [args.table1, args.table2, args.fig1, args.fig2];
    if presets.iter().filter(|p| **p).count() > 1 {
        return Err(Error::Validation("choose at most one preset".into()));
    }

    let mut warnings = Vec::new();
    let mut config_hash = None;

    if args.table2 {
        let cfg = preset_base(args);
        let report = run_coverage_sweep(&cfg, &[5, 10, 20, 50])?;
        write_json(&args.out_dir.join("coverage.json"), &report)?;
        write_json(&args.out_dir.join("scenario_config.json"), &cfg)?;
        print_coverage(&report);
    } else {
        let (reports, label): (Vec<(String, ScenarioConfig)>, &str) = if args.table1 {
            (vec![("table1".into(), preset_base(args))], "table1")
        } else if args.fig1 {
            let mut variants = Vec::new();
            for frac in [0.05, 0.08, 0.15] {
                let mut cfg = preset_base(args);
                cfg.n_calibration_per_study =
                    (frac * cfg.n_per_study as f64).round() as usize;
                variants.push((format!("fig1_cal{:02}", (frac * 100.0) as u32), cfg));
            }
            (variants, "fig1")
        } else if args.fig2 {
            let mut variants = Vec::new();
            for m in [2usize, 4, 8] {
                let cfg = preset_base(args).with_study_count(m);
                variants.push((format!("fig2_m{m}"), cfg));
            }
            (variants, "fig2")
        } else {
            let path = args.config.as_ref().ok_or_else(|| {
                Error::Validation("simulate requires --config or a preset".into())
            })?;
            let bytes = fs::read(path)?;
            config_hash = Some(sha256_hex(&bytes));
            let mut cfg: ScenarioConfig = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Validation(format!("config parse failure: {e}")))?;
            cfg.seed = args.seed;
            (vec![("scenario".into(), cfg)], "scenario")
        };
        let _ = label;
        for (name, cfg) in reports {
            let report = run_scenario(&cfg)?;
            warnings.extend(report.warnings.clone());
            write_json(&args.out_dir.join(format!("{name}.json")), &report)?;
            write_json(&args.out_dir.join(format!("{name}_config.json")), &cfg)?;
            println!("== {name} ==");
            print_scenario(&report);
        }
    }

    write_manifest(
        &args.out_dir,
        "simulate",
        args.config.as_deref(),
        config_hash,
        args.seed,
        started,
        warnings,
    )
}

fn print_scenario(report: &ScenarioReport) {
    println!(
        "{:<14} {:>6} {:>10} {:>9} {:>9} {:>9} {:>5}",
        "method", "OR", "bias(%)", "emp.SE", "MSE", "cover95", "excl"
    );
    for row in &report.rows {
        println!(
            "{:<14} {:>6.2} {:>10.2} {:>9.4} {:>9.4} {:>9.3} {:>5}",
            row.method,
            row.odds_ratio,
            row.percent_bias,
            row.empirical_se,
            row.mse,
            row.coverage_95,
            row.replicates_excluded
        );
    }
}

fn print_coverage(report: &CoverageReport) {
    println!("{:<6} {:>6} {:>9}", "I", "OR", "cover95");
    for row in &report.rows {
        println!(
            "{:<6} {:>6.2} {:>9.3}",
            row.pseudo_datasets, row.odds_ratio, row.coverage_95
        );
    }
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let bytes = fs::read(&args.input)?;
    let mut out = fs::File::create(&args.out)?;
    if let Ok(report) = serde_json::from_slice::<ScenarioReport>(&bytes) {
        writeln!(
            out,
            "method,odds_ratio,beta_x_true,percent_bias,empirical_se,mse,coverage_95,replicates_used,replicates_excluded"
        )?;
        for r in &report.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.method,
                r.odds_ratio,
                r.beta_x_true,
                r.percent_bias,
                r.empirical_se,
                r.mse,
                r.coverage_95,
                r.replicates_used,
                r.replicates_excluded
            )?;
        }
        print_scenario(&report);
        return Ok(());
    }
    if let Ok(report) = serde_json::from_slice::<CoverageReport>(&bytes) {
        writeln!(out, "pseudo_datasets,odds_ratio,coverage_95")?;
        for r in &report.rows {
            writeln!(out, "{},{},{}", r.pseudo_datasets, r.odds_ratio, r.coverage_95)?;
        }
        print_coverage(&report);
        return Ok(());
    }
    Err(Error::Validation(
        "input is neither a scenario report nor a coverage report".into(),
    ))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool setup failure: {e}")))?;
    }
    match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
