//! Acceptance gate: one pass/fail line per criterion, checked against the
//! reference operating characteristics the method was designed to reproduce.
//! Monte Carlo criteria use R = 1000 replicates and fixed seeds; tolerances
//! are pinned alongside each target.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use poolcalib::calibration::{calibrate_subject, SubjectKind};
use poolcalib::data::ParameterSet;
use poolcalib::design::assemble_design;
use poolcalib::minque::{minque_variance_components, MinqueOptions};
use poolcalib::simulation::{
    generate_dataset, run_coverage_sweep, run_parameter_recovery, run_scenario, ErrorFamily,
    Method, MetricsRow, ScenarioConfig, ScenarioReport,
};
use poolcalib::solver::CovarianceStructure;
use poolcalib::uncertainty::{combine_variance, fit_with_uncertainty, CombineRule, FitOptions};

const SEED: u64 = 0x5eed_2024;

/// Pinned at 1000 replicates; ACCEPTANCE_REPLICATES exists only to smoke-test
/// the harness quickly and must not be set when gating.
fn replicates() -> usize {
    std::env::var("ACCEPTANCE_REPLICATES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1000)
}

struct Criterion {
    id: usize,
    label: &'static str,
    pass: bool,
    details: Vec<String>,
}

fn check(details: &mut Vec<String>, pass: bool, msg: String) -> bool {
    details.push(format!("[{}] {msg}", if pass { "ok" } else { "FAIL" }));
    pass
}

fn row<'a>(report: &'a ScenarioReport, method: &str, or: f64) -> &'a MetricsRow {
    report
        .rows
        .iter()
        .find(|r| r.method == method && (r.odds_ratio - or).abs() < 1e-9)
        .unwrap_or_else(|| panic!("missing row {method} at OR {or}"))
}

fn base_config(prevalence: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::base(prevalence);
    cfg.replicates = replicates();
    cfg.seed = SEED;
    cfg
}

/// Reference grid at 10% prevalence, repeated-measures method:
/// (OR, percent bias, empirical SE, MSE, coverage).
const GRID_10: [(f64, f64, f64, f64, f64); 6] = [
    (0.50, -5.0, 0.111, 0.0135, 0.93),
    (0.67, 5.3, 0.085, 0.0077, 0.96),
    (0.80, 11.2, 0.074, 0.0061, 0.97),
    (1.25, 10.7, 0.073, 0.0060, 0.97),
    (1.50, 5.5, 0.087, 0.0081, 0.96),
    (2.00, -4.1, 0.111, 0.0130, 0.94),
];

const BIAS_TOL_PP: f64 = 3.0;
const SE_TOL_REL: f64 = 0.15;
const MSE_TOL_REL: f64 = 0.30;
const COVERAGE_TOL: f64 = 0.02;
const RUNTIME_LIMIT_SECS: f64 = 30.0 * 60.0;

fn criterion_1(base_report: &ScenarioReport) -> Criterion {
    let mut details = Vec::new();
    let mut pass = true;
    for &(or, bias, se, mse, cover) in &GRID_10 {
        let r = row(base_report, "repeated", or);
        pass &= check(
            &mut details,
            (r.percent_bias - bias).abs() <= BIAS_TOL_PP,
            format!("OR {or}: repeated bias {:.1} vs {bias} (+-{BIAS_TOL_PP}pp)", r.percent_bias),
        );
        pass &= check(
            &mut details,
            (r.empirical_se - se).abs() <= SE_TOL_REL * se,
            format!("OR {or}: repeated SE {:.4} vs {se} (+-15%)", r.empirical_se),
        );
        pass &= check(
            &mut details,
            (r.mse - mse).abs() <= MSE_TOL_REL * mse,
            format!("OR {or}: repeated MSE {:.4} vs {mse} (+-30%)", r.mse),
        );
        pass &= check(
            &mut details,
            (r.coverage_95 - cover).abs() <= COVERAGE_TOL,
            format!("OR {or}: repeated coverage {:.3} vs {cover} (+-2pp)", r.coverage_95),
        );
    }
    let naive = row(base_report, "naive", 1.25);
    pass &= check(
        &mut details,
        (naive.percent_bias - (-51.4)).abs() <= BIAS_TOL_PP,
        format!("OR 1.25: naive bias {:.1} vs -51.4 (+-3pp)", naive.percent_bias),
    );
    pass &= check(
        &mut details,
        base_report.runtime_secs < RUNTIME_LIMIT_SECS,
        format!("grid runtime {:.0}s < {RUNTIME_LIMIT_SECS:.0}s", base_report.runtime_secs),
    );
    Criterion { id: 1, label: "10%-prevalence grid reproduction", pass, details }
}

fn criterion_2() -> Criterion {
    let mut details = Vec::new();
    let or2 = 2.0f64.ln();
    let mut biases = Vec::new();
    for (prevalence, target) in [(0.05, -2.4), (0.25, -6.9)] {
        let mut cfg = base_config(prevalence);
        cfg.beta_x_grid = vec![or2];
        cfg.methods = vec![Method::Repeated];
        let report = run_scenario(&cfg).expect("prevalence sweep");
        let r = row(&report, "repeated", 2.0);
        biases.push(r.percent_bias);
        check(
            &mut details,
            (r.percent_bias - target).abs() <= BIAS_TOL_PP,
            format!(
                "prevalence {prevalence}: repeated bias {:.1} vs {target} (+-3pp)",
                r.percent_bias
            ),
        );
    }
    let trend = biases[1] < biases[0];
    check(
        &mut details,
        trend,
        format!("bias more negative at 25% ({:.1}) than at 5% ({:.1})", biases[1], biases[0]),
    );
    let pass = details.iter().all(|d| d.starts_with("[ok]"));
    Criterion { id: 2, label: "prevalence sweep downward-bias trend", pass, details }
}

fn criterion_3() -> Criterion {
    let mut details = Vec::new();
    let mut cfg = base_config(0.10);
    cfg.beta_x_grid = vec![0.5f64.ln(), 1.25f64.ln()];
    cfg.pseudo_datasets = 50;
    let report = run_coverage_sweep(&cfg, &[5, 10, 20, 50]).expect("coverage sweep");
    // (I, OR, coverage target in percent)
    let targets = [
        (5, 0.50, 90.2),
        (10, 0.50, 91.2),
        (20, 0.50, 91.4),
        (50, 0.50, 92.5),
        (5, 1.25, 96.7),
        (10, 1.25, 96.5),
        (20, 1.25, 96.6),
        (50, 1.25, 96.4),
    ];
    let mut pass = true;
    for (i, or, target) in targets {
        let r = report
            .rows
            .iter()
            .find(|r| r.pseudo_datasets == i && (r.odds_ratio - or).abs() < 1e-9)
            .expect("coverage cell");
        let observed = 100.0 * r.coverage_95;
        pass &= check(
            &mut details,
            (observed - target).abs() <= 2.0,
            format!("I={i} OR {or}: coverage {observed:.1} vs {target} (+-2pp)"),
        );
    }
    Criterion { id: 3, label: "coverage over pseudo-dataset counts", pass, details }
}

fn criterion_4() -> Criterion {
    let mut details = Vec::new();
    let mut pass = true;
    let ors = vec![0.5f64.ln(), 2.0f64.ln()];

    // Calibration-fraction sweep: MSE(repeated) falls as the subset grows.
    let mut mse_by_fraction = Vec::new();
    for n_cal in [25usize, 75] {
        let mut cfg = base_config(0.10);
        cfg.n_calibration_per_study = n_cal;
        cfg.beta_x_grid = ors.clone();
        cfg.methods = vec![Method::Repeated];
        let report = run_scenario(&cfg).expect("calibration-fraction sweep");
        mse_by_fraction
            .push((n_cal, row(&report, "repeated", 0.5).mse, row(&report, "repeated", 2.0).mse));
    }
    for k in [1usize, 2] {
        let lo = if k == 1 { mse_by_fraction[0].1 } else { mse_by_fraction[0].2 };
        let hi = if k == 1 { mse_by_fraction[1].1 } else { mse_by_fraction[1].2 };
        let or = if k == 1 { 0.5 } else { 2.0 };
        pass &= check(
            &mut details,
            hi < lo,
            format!("OR {or}: MSE falls from {lo:.4} (5% subset) to {hi:.4} (15% subset)"),
        );
    }

    // Study-count sweep: MSE(repeated)/MSE(known-params) shrinks toward 1.
    let mut ratios = Vec::new();
    for m in [2usize, 8] {
        let mut cfg = base_config(0.10).with_study_count(m);
        cfg.beta_x_grid = ors.clone();
        cfg.methods = vec![Method::KnownParams, Method::Repeated];
        let report = run_scenario(&cfg).expect("study-count sweep");
        let ratio_05 = row(&report, "repeated", 0.5).mse / row(&report, "known_params", 0.5).mse;
        let ratio_20 = row(&report, "repeated", 2.0).mse / row(&report, "known_params", 2.0).mse;
        ratios.push((m, ratio_05, ratio_20));
    }
    for k in [1usize, 2] {
        let (r2, r8) = if k == 1 { (ratios[0].1, ratios[1].1) } else { (ratios[0].2, ratios[1].2) };
        let or = if k == 1 { 0.5 } else { 2.0 };
        pass &= check(
            &mut details,
            (2.0..=8.0).contains(&r2),
            format!("OR {or}: MSE ratio {r2:.2} at m=2, target ~4 within factor 2"),
        );
        pass &= check(
            &mut details,
            r8 < r2,
            format!("OR {or}: MSE ratio shrinks from {r2:.2} (m=2) to {r8:.2} (m=8)"),
        );
    }
    Criterion { id: 4, label: "calibration-fraction and study-count trends", pass, details }
}

fn criterion_5() -> Criterion {
    let mut details = Vec::new();
    let cfg = base_config(0.10);
    let report = run_parameter_recovery(&cfg, 1.25f64.ln()).expect("parameter recovery");
    let mut pass = true;
    for (i, b) in report.theta_percent_bias.iter().enumerate() {
        pass &= check(
            &mut details,
            b.abs() < 3.0,
            format!("theta[{i}] mean bias {b:.2}% (< 3%)"),
        );
    }
    for (i, b) in report.sigma2_percent_bias.iter().enumerate() {
        pass &= check(
            &mut details,
            b.abs() < 3.0,
            format!("sigma2[{i}] mean bias {b:.2}% (< 3%)"),
        );
    }
    pass &= check(
        &mut details,
        report.mean_xi_diff.abs() < 0.05,
        format!("|mean(xi - xi_hat)| = {:.4} (< 0.05)", report.mean_xi_diff.abs()),
    );
    Criterion { id: 5, label: "mixed-model parameter recovery", pass, details }
}

fn small_dataset(seed: u64) -> poolcalib::simulation::GeneratedDataset {
    let mut cfg = ScenarioConfig::base(0.15).with_study_count(2);
    cfg.n_per_study = 40;
    cfg.n_calibration_per_study = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_dataset(&cfg, 0.3, &[-1.9, -1.8], &mut rng)
}

fn dense_v(design: &poolcalib::design::DesignSystem, sigma2: &[f64]) -> DMatrix<f64> {
    let n = design.n_rows();
    let labs = design.labs;
    let s2x = sigma2[labs + 1];
    let s2xi = sigma2[labs];
    let mut v = DMatrix::zeros(n, n);
    for r in 0..n {
        v[(r, r)] = s2x + sigma2[design.lab_of_row[r]];
    }
    for &(a, b) in &design.pair_index {
        v[(a, b)] = s2x;
        v[(b, a)] = s2x;
    }
    let u = design.dense_u();
    v + u.clone() * u.transpose() * s2xi
}

fn criterion_6() -> Criterion {
    let mut details = Vec::new();
    let mut pass = true;
    let gen = small_dataset(31);
    let design = assemble_design(&gen.ds);
    let sigma2 = vec![2.0, 3.0, 4.0, 3.0, 5.0];

    // Woodbury solver vs dense solve.
    let cov = CovarianceStructure::new(&design, &sigma2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = DMatrix::from_fn(design.n_rows(), 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let dense = dense_v(&design, &sigma2);
    let expected = dense.clone().lu().solve(&x).unwrap();
    let got = cov.solve(&x);
    let err = (&got - &expected).abs().max();
    pass &= check(&mut details, err < 1e-8, format!("Woodbury vs dense solve: max err {err:.2e}"));

    // Calibration formulas vs joint-Gaussian conditioning.
    let params = ParameterSet::new(
        vec![-0.2, -0.4, 0.8],
        vec![0.3, -0.5, 0.7],
        sigma2.clone(),
        2,
        1,
    )
    .unwrap();
    let mut max_err = 0.0f64;
    for rec in gen.ds.subjects.iter().take(30) {
        let got = calibrate_subject(rec, &params, &gen.ds.lab_of_study).unwrap();
        let j = rec.study;
        let lab = gen.ds.lab_of_study[j];
        let mu = params.alpha0(j) + params.tau()[0] * rec.covariates_w[0];
        let s2 = params.sigma2_x();
        let (mean, var) = match got.subject_kind {
            SubjectKind::Calibration => {
                // Condition [X] on [H_0 - xi_0, H_j - xi_j] jointly.
                let s0 = params.sigma2_lab(0);
                let sj = params.sigma2_lab(lab);
                let sig = DMatrix::from_row_slice(2, 2, &[s2 + s0, s2, s2, s2 + sj]);
                let h = DVector::from_column_slice(&[
                    rec.central_measurement.unwrap() - params.xi[0],
                    rec.local_measurement - params.xi[lab],
                ]);
                let c = DVector::from_column_slice(&[s2, s2]);
                let w = sig.clone().lu().solve(&c).unwrap();
                (mu + w.dot(&(h - DVector::from_element(2, mu))), s2 - w.dot(&c))
            }
            SubjectKind::Noncalibration => {
                let sj = params.sigma2_lab(lab);
                let w = s2 / (s2 + sj);
                (mu + w * (rec.local_measurement - params.xi[lab] - mu), s2 - w * s2)
            }
        };
        max_err = max_err
            .max((got.x_tilde - mean).abs())
            .max((got.conditional_variance - var).abs());
    }
    pass &= check(
        &mut details,
        max_err < 1e-10,
        format!("calibration vs conditioning oracle: max err {max_err:.2e}"),
    );

    // Structured MINQUE vs a dense identity-prior computation.
    let result = minque_variance_components(&design, &MinqueOptions::default()).unwrap();
    let n = design.n_rows();
    let labs = design.labs;
    let k = labs + 2;
    let mut components: Vec<DMatrix<f64>> = Vec::with_capacity(k);
    for lab in 0..labs {
        let mut d = DMatrix::zeros(n, n);
        for r in 0..n {
            if design.lab_of_row[r] == lab {
                d[(r, r)] = 1.0;
            }
        }
        components.push(d);
    }
    let u = design.dense_u();
    components.push(&u * u.transpose());
    let mut ss = DMatrix::zeros(n, n);
    for block in &design.blocks {
        for a in block.rows() {
            for b in block.rows() {
                ss[(a, b)] = 1.0;
            }
        }
    }
    components.push(ss);
    let c = &design.c;
    let q = DMatrix::identity(n, n)
        - c * (c.transpose() * c).try_inverse().unwrap() * c.transpose();
    let qv: Vec<DMatrix<f64>> = components.iter().map(|v| &q * v).collect();
    let mut s_mat = DMatrix::zeros(k, k);
    let mut q_vec = DVector::zeros(k);
    let qh = &q * &design.h;
    for a in 0..k {
        for b in 0..k {
            s_mat[(a, b)] = (&qv[a] * &qv[b]).trace();
        }
        q_vec[a] = (qh.transpose() * &components[a] * &qh)[(0, 0)];
    }
    let dense_sigma2 = s_mat.lu().solve(&q_vec).unwrap();
    let minque_err = result
        .sigma2
        .iter()
        .zip(dense_sigma2.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    pass &= check(
        &mut details,
        minque_err < 1e-8 && !result.floored,
        format!("structured MINQUE vs dense oracle: max err {minque_err:.2e}"),
    );

    // IRLS vs an independent coordinate-wise Newton MLE.
    let x: Vec<f64> = gen.ds.subjects.iter().map(|s| s.local_measurement).collect();
    let z: Vec<Vec<f64>> = gen.ds.subjects.iter().map(|s| s.covariates_z.clone()).collect();
    let y: Vec<u8> = gen.ds.subjects.iter().map(|s| s.outcome).collect();
    let study: Vec<usize> = gen.ds.subjects.iter().map(|s| s.study).collect();
    let fit = poolcalib::logistic::fit_logistic(&x, &z, &y, &study, gen.ds.m).unwrap();
    let ncol = gen.ds.m + 1 + 1;
    let design_row = |i: usize, c: usize| -> f64 {
        if c < gen.ds.m {
            if study[i] == c { 1.0 } else { 0.0 }
        } else if c == gen.ds.m {
            x[i]
        } else {
            z[i][c - gen.ds.m - 1]
        }
    };
    let mut beta = vec![0.0; ncol];
    for _ in 0..5000 {
        let mut moved = 0.0f64;
        for c in 0..ncol {
            let mut score = 0.0;
            let mut info = 0.0;
            for i in 0..y.len() {
                let lp: f64 = (0..ncol).map(|cc| design_row(i, cc) * beta[cc]).sum();
                let p = 1.0 / (1.0 + (-lp).exp());
                score += design_row(i, c) * (y[i] as f64 - p);
                info += design_row(i, c) * design_row(i, c) * p * (1.0 - p);
            }
            let step = score / info;
            beta[c] += step;
            moved = moved.max(step.abs());
        }
        if moved < 1e-12 {
            break;
        }
    }
    let irls_err = (fit.beta_x() - beta[gen.ds.m]).abs();
    pass &= check(
        &mut details,
        irls_err < 1e-6,
        format!("IRLS vs coordinate-wise MLE oracle: |diff| {irls_err:.2e}"),
    );

    // Variance combination hand case: within 1, between 2.
    let draws = vec![DVector::from_column_slice(&[4.0]), DVector::from_column_slice(&[6.0])];
    let covs = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)];
    let std = combine_variance(&draws, &covs, CombineRule::Standard).unwrap();
    let inf = combine_variance(&draws, &covs, CombineRule::Inflated).unwrap();
    let hand_ok = (std.total[(0, 0)] - 3.0).abs() < 1e-12 && (inf.total[(0, 0)] - 4.0).abs() < 1e-12;
    pass &= check(
        &mut details,
        hand_ok,
        format!(
            "variance combination hand case: standard {} (=3), inflated {} (=4)",
            std.total[(0, 0)],
            inf.total[(0, 0)]
        ),
    );

    Criterion { id: 6, label: "deterministic oracle equivalence", pass, details }
}

fn criterion_7(base_report: &ScenarioReport) -> Criterion {
    let mut details = Vec::new();
    let mut pass = true;
    let variants: [(&str, ErrorFamily, f64); 3] = [
        ("uniform errors", ErrorFamily::Uniform, 0.0),
        ("skew-normal errors", ErrorFamily::SkewNormal, 0.0),
        ("cluster mean a=5", ErrorFamily::Normal, 5.0),
    ];
    for (name, family, xi_mean) in variants {
        let mut cfg = base_config(0.10);
        cfg.error_family = family;
        cfg.xi_mean = xi_mean;
        cfg.methods = vec![Method::Repeated];
        let report = run_scenario(&cfg).expect("robustness variant");
        for &(or, ..) in &GRID_10 {
            let base = row(base_report, "repeated", or).percent_bias;
            let variant = row(&report, "repeated", or).percent_bias;
            pass &= check(
                &mut details,
                (variant - base).abs() < 3.0,
                format!("{name}, OR {or}: bias shift {:.2}pp (< 3pp)", variant - base),
            );
        }
    }
    Criterion { id: 7, label: "error-family and cluster-mean robustness", pass, details }
}

fn criterion_8() -> Criterion {
    let mut details = Vec::new();
    let mut cfg = ScenarioConfig::base(0.15).with_study_count(3);
    cfg.n_per_study = 150;
    cfg.n_calibration_per_study = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let b0 = vec![-1.9, -1.8, -1.7];
    let gen = generate_dataset(&cfg, 0.2, &b0, &mut rng);
    let options = FitOptions { pseudo_datasets: 5, seed: 82, ..Default::default() };
    let result = fit_with_uncertainty(&gen.ds, &options).expect("fit");
    let json = serde_json::to_value(&result).unwrap();
    let mut pass = true;
    for field in [
        "beta_x",
        "se_beta_x",
        "ci_low",
        "ci_high",
        "odds_ratio",
        "or_ci_low",
        "or_ci_high",
        "naive_se_beta_x",
    ] {
        pass &= check(
            &mut details,
            json.get(field).is_some(),
            format!("result JSON has field {field}"),
        );
    }
    pass &= check(
        &mut details,
        result.ci_low < result.beta_x && result.beta_x < result.ci_high,
        "point estimate inside its interval".to_string(),
    );
    // Presentation format: "beta (SE)" and "OR (low, high)".
    let line = format!(
        "{:.3} ({:.3}) / {:.3} ({:.3}, {:.3})",
        result.beta_x, result.se_beta_x, result.odds_ratio, result.or_ci_low, result.or_ci_high
    );
    let shape_ok = line.matches('(').count() == 2
        && line.contains(") / ")
        && line.split(&['(', ')', ',', '/'][..]).filter(|t| !t.trim().is_empty()).count() == 5;
    pass &= check(&mut details, shape_ok, format!("summary line renders as \"{line}\""));
    Criterion { id: 8, label: "fit output format", pass, details }
}

#[test]
fn acceptance() {
    // Shared base grid: criterion 1 checks it, criterion 7 diffs against it.
    let base_report = run_scenario(&base_config(0.10)).expect("base grid");

    let criteria = vec![
        criterion_1(&base_report),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(&base_report),
        criterion_8(),
    ];

    let mut failed = Vec::new();
    for c in &criteria {
        println!(
            "criterion {} ({}): {}",
            c.id,
            c.label,
            if c.pass { "PASS" } else { "FAIL" }
        );
        for d in &c.details {
            println!("    {d}");
        }
        if !c.pass {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
