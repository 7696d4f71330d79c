//! Logistic regression with study-specific intercepts, fit by iteratively
//! reweighted least squares with step-halving.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SCORE_TOL: f64 = 1e-8;
const DEVIANCE_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 50;
const SEPARATION_BETA: f64 = 30.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticFit {
    /// `[beta_01..beta_0m, beta_x, beta_z...]`.
    pub beta: Vec<f64>,
    /// Inverse observed information at the optimum.
    pub naive_cov: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
    /// Column index of the biomarker coefficient.
    pub x_index: usize,
}

impl LogisticFit {
    pub fn beta_x(&self) -> f64 {
        self.beta[self.x_index]
    }

    pub fn naive_var_beta_x(&self) -> f64 {
        self.naive_cov[self.x_index][self.x_index]
    }

    pub fn naive_cov_matrix(&self) -> DMatrix<f64> {
        let k = self.beta.len();
        DMatrix::from_fn(k, k, |i, j| self.naive_cov[i][j])
    }
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Build the design `[study indicators | x | Z]`.
fn build_design(
    x: &[f64],
    z: &[Vec<f64>],
    study: &[usize],
    m: usize,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    if study.len() != n || z.len() != n {
        return Err(Error::Contract("logistic design lengths disagree".into()));
    }
    let q = z.first().map(|r| r.len()).unwrap_or(0);
    let k = m + 1 + q;
    let mut design = DMatrix::zeros(n, k);
    let mut seen = vec![false; m];
    for i in 0..n {
        if study[i] >= m {
            return Err(Error::Contract(format!("row {i} references study {}", study[i])));
        }
        seen[study[i]] = true;
        design[(i, study[i])] = 1.0;
        design[(i, m)] = x[i];
        for (c, &v) in z[i].iter().enumerate() {
            design[(i, m + 1 + c)] = v;
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::Contract(format!("study {} has no observations", j + 1)));
    }
    Ok(design)
}

fn deviance(design: &DMatrix<f64>, y: &[u8], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    let mut dev = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let e = eta[i];
        // -2 [ y*eta - log(1+exp(eta)) ], stable log1p form.
        let log1pe = if e > 35.0 { e } else { (1.0 + e.exp()).ln() };
        dev += -2.0 * (yi as f64 * e - log1pe);
    }
    dev
}

/// Maximize the logistic likelihood of `Y` on `[study indicators | x | Z]`.
pub fn fit_logistic(x: &[f64], z: &[Vec<f64>], y: &[u8], study: &[usize], m: usize) -> Result<LogisticFit> {
    let design = build_design(x, z, study, m)?;
    // A single-class study forces its intercept to diverge: the score
    // equation sum(y - mu) = 0 over that study has no finite solution.
    let mut class_counts = vec![[0usize; 2]; m];
    for (i, &j) in study.iter().enumerate() {
        class_counts[j][y[i] as usize] += 1;
    }
    if let Some(j) = class_counts.iter().position(|c| c[0] == 0 || c[1] == 0) {
        return Err(Error::Separation(format!(
            "study {} has a single outcome class; its intercept diverges",
            j + 1
        )));
    }
    fit_logistic_design(&design, y, m)
}

pub fn fit_logistic_design(design: &DMatrix<f64>, y: &[u8], x_index: usize) -> Result<LogisticFit> {
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n {
        return Err(Error::Contract("outcome length disagrees with design".into()));
    }

    let mut beta = DVector::zeros(k);
    let mut dev = deviance(design, y, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut max_abs_score = f64::INFINITY;

    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        let eta = design * &beta;
        let mu: DVector<f64> = eta.map(expit);
        let resid = DVector::from_fn(n, |i, _| y[i] as f64 - mu[i]);
        let score = design.transpose() * &resid;
        max_abs_score = score.amax();
        if max_abs_score < SCORE_TOL {
            converged = true;
            break;
        }

        // Observed information X^T W X.
        let mut info = DMatrix::zeros(k, k);
        for i in 0..n {
            let w = mu[i] * (1.0 - mu[i]);
            let row = design.row(i);
            for a in 0..k {
                let ra = row[a] * w;
                for b in a..k {
                    info[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }

        let chol = Cholesky::new(info).ok_or_else(|| {
            Error::Separation(
                "observed information is singular (weight collapse); data may be separated".into(),
            )
        })?;
        let step = chol.solve(&score);

        // Step-halving keeps the deviance non-increasing.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &step * scale;
            let new_dev = deviance(design, y, &candidate);
            if new_dev <= dev + 1e-12 {
                let rel_change = (dev - new_dev).abs() / dev.abs().max(1.0);
                beta = candidate;
                dev = new_dev;
                accepted = true;
                if rel_change < DEVIANCE_TOL {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta.amax() > SEPARATION_BETA {
            return Err(Error::Separation(format!(
                "coefficient magnitude {:.1} exceeds {SEPARATION_BETA}; complete or quasi-complete separation",
                beta.amax()
            )));
        }
        if converged {
            // Refresh the score at the accepted point.
            let eta = design * &beta;
            let mu: DVector<f64> = eta.map(expit);
            let resid = DVector::from_fn(n, |i, _| y[i] as f64 - mu[i]);
            max_abs_score = (design.transpose() * resid).amax();
            break;
        }
    }

    // Covariance from the observed information at the optimum.
    let eta = design * &beta;
    let mu: DVector<f64> = eta.map(expit);
    let mut info = DMatrix::zeros(k, k);
    for i in 0..n {
        let w = mu[i] * (1.0 - mu[i]);
        let row = design.row(i);
        for a in 0..k {
            let ra = row[a] * w;
            for b in a..k {
                info[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    let cov = Cholesky::new(info)
        .ok_or_else(|| Error::Separation("information singular at optimum".into()))?
        .inverse();

    Ok(LogisticFit {
        beta: beta.as_slice().to_vec(),
        naive_cov: (0..k)
            .map(|i| (0..k).map(|j| cov[(i, j)]).collect())
            .collect(),
        converged,
        iterations,
        max_abs_score,
        x_index,
    })
}
