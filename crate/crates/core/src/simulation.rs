//! Synthetic multi-study data generation and Monte Carlo operating
//! characteristics for the four analysis methods (naive, true values, known
//! parameters, repeated measures).

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::calibrate_dataset;
use crate::data::{ParameterSet, PooledDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::lmm::fit_lmm;
use crate::logistic::fit_logistic;
use crate::minque::MinqueOptions;
use crate::uncertainty::{
    child_seed, combine_variance, fit_with_uncertainty_from_lmm, run_pseudo_fits, CombineRule,
    FitOptions,
};

const WALD_Z: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    #[default]
    Normal,
    /// Uniform scaled to the target variance.
    Uniform,
    /// Uniform with half-width sqrt(sigma2_x); variance sigma2_x / 3.
    UniformPrintedBounds,
    /// Skew normal with shape 1, scaled to mean 0 and the target variance.
    SkewNormal,
}

impl ErrorFamily {
    /// Draw one biomarker-model error with mean 0; variance is `sigma2_x`
    /// except for the printed-bounds uniform.
    pub fn sample(&self, sigma2_x: f64, rng: &mut impl Rng) -> f64 {
        match self {
            ErrorFamily::Normal => sigma2_x.sqrt() * rng.sample::<f64, _>(StandardNormal),
            ErrorFamily::Uniform => {
                let half = (3.0 * sigma2_x).sqrt();
                rng.gen_range(-half..half)
            }
            ErrorFamily::UniformPrintedBounds => {
                let half = sigma2_x.sqrt();
                rng.gen_range(-half..half)
            }
            ErrorFamily::SkewNormal => {
                // Shape alpha = 1: delta = 1/sqrt(2); solve scale/location for
                // mean 0, variance sigma2_x.
                let delta = 1.0 / 2.0f64.sqrt();
                let omega = (sigma2_x / (1.0 - 2.0 * delta * delta / std::f64::consts::PI)).sqrt();
                let location = -omega * delta * (2.0 / std::f64::consts::PI).sqrt();
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                let sn = delta * z0.abs() + (1.0 - delta * delta).sqrt() * z1;
                location + omega * sn
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    TrueValues,
    KnownParams,
    Repeated,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Naive,
        Method::TrueValues,
        Method::KnownParams,
        Method::Repeated,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::TrueValues => "true_values",
            Method::KnownParams => "known_params",
            Method::Repeated => "repeated",
        }
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_schema_version() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub m: usize,
    pub n_per_study: usize,
    pub n_calibration_per_study: usize,
    /// Biomarker-model study intercepts, length m.
    pub alpha0: Vec<f64>,
    /// Biomarker-model covariate effects, length p.
    pub tau: Vec<f64>,
    pub sigma2_x: f64,
    /// Lab measurement variances, length m+1 with the central lab first.
    pub sigma2_d: Vec<f64>,
    pub sigma2_xi: f64,
    /// Log odds ratios to sweep.
    pub beta_x_grid: Vec<f64>,
    /// Outcome-model covariate effects, length q.
    pub beta_z: Vec<f64>,
    pub target_prevalence: f64,
    #[serde(default)]
    pub error_family: ErrorFamily,
    /// Cluster mean of the lab random effects (0 in the base setting).
    #[serde(default)]
    pub xi_mean: f64,
    pub replicates: usize,
    /// Pseudo datasets per repeated-measures fit.
    pub pseudo_datasets: usize,
    #[serde(default)]
    pub rule: CombineRule,
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

impl ScenarioConfig {
    /// Base simulation setting (five studies, 500 subjects each) at a given prevalence.
    pub fn base(target_prevalence: f64) -> Self {
        Self {
            schema_version: 1,
            m: 5,
            n_per_study: 500,
            n_calibration_per_study: 50,
            alpha0: vec![-0.1, -0.2, -0.3, -0.4, -0.5],
            tau: vec![1.0],
            sigma2_x: 5.0,
            sigma2_d: vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            sigma2_xi: 3.0,
            beta_x_grid: [0.5f64, 0.67, 0.8, 1.25, 1.5, 2.0]
                .iter()
                .map(|or| or.ln())
                .collect(),
            beta_z: vec![1.25f64.ln()],
            target_prevalence,
            error_family: ErrorFamily::Normal,
            xi_mean: 0.0,
            replicates: 1000,
            pseudo_datasets: 20,
            rule: CombineRule::Standard,
            seed: 0,
            methods: default_methods(),
        }
    }

    /// Base setting with a different study count; intercepts and lab
    /// variances follow the base pattern.
    pub fn with_study_count(mut self, m: usize) -> Self {
        self.m = m;
        self.alpha0 = (1..=m).map(|j| -0.1 * j as f64).collect();
        self.sigma2_d = (0..=m).map(|d| 2.0 + d as f64).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Validation(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.m < 2 {
            return Err(Error::Validation("m must be >= 2".into()));
        }
        if self.alpha0.len() != self.m {
            return Err(Error::Validation("alpha0 must have length m".into()));
        }
        if self.sigma2_d.len() != self.m + 1 {
            return Err(Error::Validation("sigma2_d must have length m+1".into()));
        }
        if self.n_calibration_per_study == 0 || self.n_calibration_per_study > self.n_per_study {
            return Err(Error::Validation(
                "n_calibration_per_study must be in 1..=n_per_study".into(),
            ));
        }
        if self.beta_x_grid.is_empty() {
            return Err(Error::Validation("beta_x grid is empty".into()));
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return Err(Error::Validation("target_prevalence must be in (0,1)".into()));
        }
        if self.pseudo_datasets < 2 && self.methods.contains(&Method::Repeated) {
            return Err(Error::Validation("pseudo_datasets must be >= 2".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Validation("replicates must be positive".into()));
        }
        Ok(())
    }

    fn truth_sigma2(&self) -> Vec<f64> {
        let mut sigma2 = self.sigma2_d.clone();
        sigma2.push(self.sigma2_xi);
        sigma2.push(self.sigma2_x);
        sigma2
    }

    fn truth_theta(&self) -> Vec<f64> {
        let mut theta = self.alpha0.clone();
        theta.extend_from_slice(&self.tau);
        theta
    }
}

/// Monte Carlo intercept search: per study, find beta_0j so that the average
/// outcome probability hits the target prevalence.
pub fn solve_intercepts_for_prevalence(
    cfg: &ScenarioConfig,
    beta_x: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let draws = 200_000;
    let mut intercepts = Vec::with_capacity(cfg.m);
    for j in 0..cfg.m {
        // Fixed (X, Z) pool per study; bisection over the intercept is then
        // monotone and deterministic.
        let lp_rest: Vec<f64> = (0..draws)
            .map(|_| {
                let w: f64 = rng.sample(StandardNormal);
                let eps = cfg.error_family.sample(cfg.sigma2_x, rng);
                let x = cfg.alpha0[j] + cfg.tau[0] * w + eps;
                beta_x * x + cfg.beta_z[0] * w
            })
            .collect();
        let prevalence = |b0: f64| -> f64 {
            lp_rest
                .iter()
                .map(|lp| 1.0 / (1.0 + (-(b0 + lp)).exp()))
                .sum::<f64>()
                / draws as f64
        };
        let (mut lo, mut hi) = (-60.0, 60.0);
        if prevalence(lo) > cfg.target_prevalence || prevalence(hi) < cfg.target_prevalence {
            return Err(Error::numerical(
                "simulation",
                "prevalence bisection bracket failure",
            ));
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if prevalence(mid) < cfg.target_prevalence {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b0 = 0.5 * (lo + hi);
        if (prevalence(b0) - cfg.target_prevalence).abs() > 0.002 {
            return Err(Error::numerical(
                "simulation",
                "prevalence bisection did not reach the target",
            ));
        }
        intercepts.push(b0);
    }
    Ok(intercepts)
}

/// One simulated dataset plus the per-replicate truth.
pub struct GeneratedDataset {
    pub ds: PooledDataset,
    /// Drawn lab random effects, central lab first.
    pub xi: Vec<f64>,
}

pub fn generate_dataset(
    cfg: &ScenarioConfig,
    beta_x: f64,
    beta_0j: &[f64],
    rng: &mut impl Rng,
) -> GeneratedDataset {
    let labs = cfg.m + 1;
    let xi: Vec<f64> = (0..labs)
        .map(|_| cfg.xi_mean + cfg.sigma2_xi.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut subjects = Vec::with_capacity(cfg.m * cfg.n_per_study);
    for j in 0..cfg.m {
        // Seeded shuffle selects the calibration subset.
        let mut order: Vec<usize> = (0..cfg.n_per_study).collect();
        order.shuffle(rng);
        let mut in_subset = vec![false; cfg.n_per_study];
        for &k in order.iter().take(cfg.n_calibration_per_study) {
            in_subset[k] = true;
        }
        for k in 0..cfg.n_per_study {
            let w: f64 = rng.sample(StandardNormal);
            let eps = cfg.error_family.sample(cfg.sigma2_x, rng);
            let x = cfg.alpha0[j] + cfg.tau[0] * w + eps;
            let local =
                x + xi[j + 1] + cfg.sigma2_d[j + 1].sqrt() * rng.sample::<f64, _>(StandardNormal);
            let central = if in_subset[k] {
                Some(x + xi[0] + cfg.sigma2_d[0].sqrt() * rng.sample::<f64, _>(StandardNormal))
            } else {
                None
            };
            let lp = beta_0j[j] + beta_x * x + cfg.beta_z[0] * w;
            let y = if rng.gen::<f64>() < 1.0 / (1.0 + (-lp).exp()) {
                1
            } else {
                0
            };
            subjects.push(SubjectRecord {
                subject_id: format!("s{}_{}", j + 1, k + 1),
                study: j,
                outcome: y,
                covariates_z: vec![w],
                covariates_w: vec![w],
                local_measurement: local,
                central_measurement: central,
                true_value: Some(x),
            });
        }
    }
    let ds = PooledDataset::new(subjects, (1..=cfg.m).collect())
        .expect("generated dataset is structurally valid");
    GeneratedDataset { ds, xi }
}

#[derive(Debug, Clone, Copy)]
pub struct MethodOutcome {
    pub beta_x: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

fn wald(beta: f64, se: f64) -> MethodOutcome {
    MethodOutcome {
        beta_x: beta,
        se,
        ci: (beta - WALD_Z * se, beta + WALD_Z * se),
    }
}

fn logistic_on(gen: &GeneratedDataset, x: &[f64]) -> Result<MethodOutcome> {
    let ds = &gen.ds;
    let z: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.covariates_z.clone()).collect();
    let y: Vec<u8> = ds.subjects.iter().map(|s| s.outcome).collect();
    let study: Vec<usize> = ds.subjects.iter().map(|s| s.study).collect();
    let fit = fit_logistic(x, &z, &y, &study, ds.m)?;
    Ok(wald(fit.beta_x(), fit.naive_var_beta_x().sqrt()))
}

/// Run one analysis method on a generated dataset. `true_values` and
/// `known_params` consume retained truth and are simulation-only.
pub fn run_method(
    method: Method,
    gen: &GeneratedDataset,
    truth: &ParameterSet,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<MethodOutcome> {
    match method {
        Method::Naive => {
            let x: Vec<f64> = gen.ds.subjects.iter().map(|s| s.local_measurement).collect();
            logistic_on(gen, &x)
        }
        Method::TrueValues => {
            let x: Vec<f64> = gen
                .ds
                .subjects
                .iter()
                .map(|s| s.true_value.expect("simulated data retains X"))
                .collect();
            logistic_on(gen, &x)
        }
        Method::KnownParams => {
            // Calibrate with the true parameters; the fit then conditions on
            // known calibration, so the naive SE applies.
            let calibrated = calibrate_dataset(&gen.ds, truth)?;
            let x: Vec<f64> = calibrated.iter().map(|c| c.x_tilde).collect();
            logistic_on(gen, &x)
        }
        Method::Repeated => {
            let options = FitOptions {
                pseudo_datasets: cfg.pseudo_datasets,
                rule: cfg.rule,
                seed,
                minque_iterations: None,
                ..Default::default()
            };
            let lmm = fit_lmm(&gen.ds, &MinqueOptions::default())?;
            let fit = fit_with_uncertainty_from_lmm(&gen.ds, &lmm, &options)?;
            Ok(MethodOutcome {
                beta_x: fit.beta_x,
                se: fit.se_beta_x,
                ci: (fit.ci_low, fit.ci_high),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub beta_x_true: f64,
    pub odds_ratio: f64,
    pub percent_bias: f64,
    pub empirical_se: f64,
    pub mse: f64,
    pub coverage_95: f64,
    pub replicates_used: usize,
    pub replicates_excluded: usize,
}

fn metrics_from(
    method: Method,
    beta_true: f64,
    outcomes: &[MethodOutcome],
    excluded: usize,
) -> MetricsRow {
    let n = outcomes.len() as f64;
    let mean = outcomes.iter().map(|o| o.beta_x).sum::<f64>() / n;
    let var = outcomes.iter().map(|o| (o.beta_x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mse = outcomes
        .iter()
        .map(|o| (o.beta_x - beta_true).powi(2))
        .sum::<f64>()
        / n;
    let coverage = outcomes
        .iter()
        .filter(|o| o.ci.0 <= beta_true && beta_true <= o.ci.1)
        .count() as f64
        / n;
    MetricsRow {
        method: method.label().to_string(),
        beta_x_true: beta_true,
        odds_ratio: beta_true.exp(),
        percent_bias: 100.0 * (mean - beta_true) / beta_true,
        empirical_se: var.sqrt(),
        mse,
        coverage_95: coverage,
        replicates_used: outcomes.len(),
        replicates_excluded: excluded,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub rows: Vec<MetricsRow>,
    pub seed: u64,
    pub replicates: usize,
    pub runtime_secs: f64,
    pub warnings: Vec<String>,
}

/// Run the full grid: methods x log-OR grid x replicates.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();

    for (bi, &beta_x) in cfg.beta_x_grid.iter().enumerate() {
        let mut intercept_rng =
            ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, bi as u64, 0x1c));
        let beta_0j = solve_intercepts_for_prevalence(cfg, beta_x, &mut intercept_rng)?;
        let truth = ParameterSet::new(
            cfg.truth_theta(),
            vec![0.0; cfg.m + 1], // replaced per replicate by the drawn xi
            cfg.truth_sigma2(),
            cfg.m,
            cfg.tau.len(),
        )?;

        // Per-replicate results per method; None marks a separation exclusion.
        let replicate_results: Vec<Result<Vec<Option<MethodOutcome>>>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let rep_seed = child_seed(cfg.seed, (bi * cfg.replicates + r) as u64, 0x5e);
                let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
                let gen = generate_dataset(cfg, beta_x, &beta_0j, &mut rng);
                let truth_rep = ParameterSet::new(
                    truth.theta.clone(),
                    gen.xi.clone(),
                    truth.sigma2.clone(),
                    truth.m,
                    truth.p,
                )?;
                cfg.methods
                    .iter()
                    .map(|&method| {
                        match run_method(method, &gen, &truth_rep, cfg, child_seed(rep_seed, 0, 0x9)) {
                            Ok(o) => Ok(Some(o)),
                            Err(Error::Separation(_)) => Ok(None),
                            Err(e) => Err(e),
                        }
                    })
                    .collect()
            })
            .collect();

        for (mi, &method) in cfg.methods.iter().enumerate() {
            let mut outcomes = Vec::with_capacity(cfg.replicates);
            let mut excluded = 0usize;
            for rep in &replicate_results {
                match rep {
                    Ok(per_method) => match per_method[mi] {
                        Some(o) => outcomes.push(o),
                        None => excluded += 1,
                    },
                    Err(e) => return Err(Error::numerical("simulation", e.to_string())),
                }
            }
            if excluded as f64 > 0.01 * cfg.replicates as f64 {
                return Err(Error::numerical(
                    "simulation",
                    format!(
                        "{} of {} replicates excluded for {} at OR {:.2}; exceeds 1%",
                        excluded,
                        cfg.replicates,
                        method.label(),
                        beta_x.exp()
                    ),
                ));
            }
            if excluded > 0 {
                warnings.push(format!(
                    "{} replicate(s) excluded for {} at OR {:.2}",
                    excluded,
                    method.label(),
                    beta_x.exp()
                ));
            }
            rows.push(metrics_from(method, beta_x, &outcomes, excluded));
        }
    }

    Ok(ScenarioReport {
        rows,
        seed: cfg.seed,
        replicates: cfg.replicates,
        runtime_secs: start.elapsed().as_secs_f64(),
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageRow {
    pub pseudo_datasets: usize,
    pub odds_ratio: f64,
    pub coverage_95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
    pub seed: u64,
    pub replicates: usize,
    pub runtime_secs: f64,
}

/// Coverage sweep over pseudo-dataset counts. Each replicate reuses one fit
/// and one pool of `max(i_grid)` pseudo draws; coverage at smaller I uses the
/// leading draws.
pub fn run_coverage_sweep(cfg: &ScenarioConfig, i_grid: &[usize]) -> Result<CoverageReport> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let i_max = *i_grid.iter().max().ok_or_else(|| {
        Error::Validation("coverage sweep requires a non-empty I grid".into())
    })?;
    let mut rows = Vec::new();

    for (bi, &beta_x) in cfg.beta_x_grid.iter().enumerate() {
        let mut intercept_rng =
            ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, bi as u64, 0x1c));
        let beta_0j = solve_intercepts_for_prevalence(cfg, beta_x, &mut intercept_rng)?;

        let per_replicate: Vec<Option<Vec<bool>>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let rep_seed = child_seed(cfg.seed, (bi * cfg.replicates + r) as u64, 0x5e);
                let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
                let gen = generate_dataset(cfg, beta_x, &beta_0j, &mut rng);
                let lmm = match fit_lmm(&gen.ds, &MinqueOptions::default()) {
                    Ok(l) => l,
                    Err(_) => return None,
                };
                let calibrated = match calibrate_dataset(&gen.ds, &lmm.params) {
                    Ok(c) => c,
                    Err(_) => return None,
                };
                let x: Vec<f64> = calibrated.iter().map(|c| c.x_tilde).collect();
                let point = match logistic_on_raw(&gen.ds, &x) {
                    Ok(p) => p,
                    Err(_) => return None,
                };
                let pseudo =
                    match run_pseudo_fits(&gen.ds, &lmm, i_max, child_seed(rep_seed, 0, 0x9)) {
                        Ok((fits, _, _)) => fits,
                        Err(_) => return None,
                    };
                let draws: Vec<DVector<f64>> = pseudo
                    .iter()
                    .map(|f| DVector::from_column_slice(&f.beta))
                    .collect();
                let covs: Vec<_> = pseudo.iter().map(|f| f.naive_cov_matrix()).collect();
                let xidx = point.1;
                let covered: Vec<bool> = i_grid
                    .iter()
                    .map(|&i| {
                        let combined =
                            combine_variance(&draws[..i], &covs[..i], cfg.rule).unwrap();
                        let se = combined.total[(xidx, xidx)].sqrt();
                        (point.0 - WALD_Z * se) <= beta_x && beta_x <= (point.0 + WALD_Z * se)
                    })
                    .collect();
                Some(covered)
            })
            .collect();

        for (ii, &i) in i_grid.iter().enumerate() {
            let usable: Vec<&Vec<bool>> = per_replicate.iter().flatten().collect();
            let coverage = usable.iter().filter(|c| c[ii]).count() as f64 / usable.len() as f64;
            rows.push(CoverageRow {
                pseudo_datasets: i,
                odds_ratio: beta_x.exp(),
                coverage_95: coverage,
            });
        }
    }

    Ok(CoverageReport {
        rows,
        seed: cfg.seed,
        replicates: cfg.replicates,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

fn logistic_on_raw(ds: &PooledDataset, x: &[f64]) -> Result<(f64, usize)> {
    let z: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.covariates_z.clone()).collect();
    let y: Vec<u8> = ds.subjects.iter().map(|s| s.outcome).collect();
    let study: Vec<usize> = ds.subjects.iter().map(|s| s.study).collect();
    let fit = fit_logistic(x, &z, &y, &study, ds.m)?;
    Ok((fit.beta_x(), fit.x_index))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Mean percent bias of each theta component.
    pub theta_percent_bias: Vec<f64>,
    /// Mean percent bias of each sigma2 component.
    pub sigma2_percent_bias: Vec<f64>,
    /// Mean of (xi - xi_hat) pooled over labs and replicates.
    pub mean_xi_diff: f64,
    pub replicates: usize,
}

/// LMM parameter-recovery study: mean bias of theta-hat and sigma2-hat and
/// the mean residual of the BLUP across replicates.
pub fn run_parameter_recovery(cfg: &ScenarioConfig, beta_x: f64) -> Result<RecoveryReport> {
    cfg.validate()?;
    let mut intercept_rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, 0, 0x1c));
    let beta_0j = solve_intercepts_for_prevalence(cfg, beta_x, &mut intercept_rng)?;
    let theta_truth = cfg.truth_theta();
    let sigma2_truth = cfg.truth_sigma2();

    let results: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..cfg.replicates)
        .into_par_iter()
        .filter_map(|r| {
            let rep_seed = child_seed(cfg.seed, r as u64, 0x5e);
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            let gen = generate_dataset(cfg, beta_x, &beta_0j, &mut rng);
            let lmm = fit_lmm(&gen.ds, &MinqueOptions::default()).ok()?;
            let xi_diff = gen
                .xi
                .iter()
                .zip(&lmm.params.xi)
                .map(|(t, e)| t - e)
                .sum::<f64>()
                / gen.xi.len() as f64;
            Some((lmm.params.theta.clone(), lmm.params.sigma2.clone(), xi_diff))
        })
        .collect();

    let used = results.len();
    if used == 0 {
        return Err(Error::numerical("simulation", "no replicate succeeded"));
    }
    let k_theta = theta_truth.len();
    let k_sigma = sigma2_truth.len();
    let mut theta_mean = vec![0.0; k_theta];
    let mut sigma_mean = vec![0.0; k_sigma];
    let mut xi_mean = 0.0;
    for (theta, sigma2, xd) in &results {
        for (s, v) in theta_mean.iter_mut().zip(theta) {
            *s += v;
        }
        for (s, v) in sigma_mean.iter_mut().zip(sigma2) {
            *s += v;
        }
        xi_mean += xd;
    }
    let n = used as f64;
    Ok(RecoveryReport {
        theta_percent_bias: theta_mean
            .iter()
            .zip(&theta_truth)
            .map(|(s, t)| 100.0 * (s / n - t) / t)
            .collect(),
        sigma2_percent_bias: sigma_mean
            .iter()
            .zip(&sigma2_truth)
            .map(|(s, t)| 100.0 * (s / n - t) / t)
            .collect(),
        mean_xi_diff: xi_mean / n,
        replicates: used,
    })
}
