//! Calibration-uncertainty propagation by pseudo-dataset resampling.
//!
//! New fixed and random effects are drawn around the fitted values, the
//! calibrated measurements are recomputed with frozen variance components,
//! and the logistic model is refit; the final covariance combines the mean
//! naive covariance with the empirical covariance of the pseudo estimates.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_dataset, compute_icc, IccConvention};
use crate::data::{ParameterSet, PooledDataset};
use crate::error::{Error, Result};
use crate::lmm::{fit_lmm, LmmFit};
use crate::logistic::{fit_logistic, LogisticFit};
use crate::minque::MinqueOptions;

/// Deterministic child-stream seed derivation (splitmix64 over master ^ salt ^ index).
pub fn child_seed(master: u64, index: u64, salt: u64) -> u64 {
    let mut z = master
        .wrapping_add(salt.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Multivariate-normal sampler with eigenvalue clipping for PSD repair.
pub struct MvnSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    pub repaired: bool,
}

impl MvnSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if cov.nrows() != k || cov.ncols() != k {
            return Err(Error::Contract("covariance dimension mismatch".into()));
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max_eig = eig.eigenvalues.amax();
        let mut repaired = false;
        let mut factor = eig.eigenvectors.clone();
        for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda < -1e-8 * max_eig.max(1e-300) {
                repaired = true;
            }
            let s = lambda.max(0.0).sqrt();
            for r in 0..k {
                factor[(r, c)] *= s;
            }
        }
        Ok(Self {
            mean,
            factor,
            repaired,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }
}

#[derive(Debug, Clone)]
pub struct PseudoDraw {
    pub theta_tilde: DVector<f64>,
    pub xi_tilde: DVector<f64>,
    pub draw_index: usize,
}

/// Draw `theta_tilde ~ N(theta_hat, var_theta)` and, independently,
/// `xi_tilde ~ N(xi_hat, var_xi)`.
pub fn draw_pseudo_parameters(
    theta_sampler: &MvnSampler,
    xi_sampler: &MvnSampler,
    draw_index: usize,
    rng: &mut impl Rng,
) -> PseudoDraw {
    PseudoDraw {
        theta_tilde: theta_sampler.sample(rng),
        xi_tilde: xi_sampler.sample(rng),
        draw_index,
    }
}

/// Refit the logistic model with calibrated values recomputed from a draw;
/// the variance components (and hence the calibration weights) stay frozen.
pub fn pseudo_fit(
    ds: &PooledDataset,
    params_hat: &ParameterSet,
    draw: &PseudoDraw,
) -> Result<LogisticFit> {
    let params = ParameterSet::new(
        draw.theta_tilde.as_slice().to_vec(),
        draw.xi_tilde.as_slice().to_vec(),
        params_hat.sigma2.clone(),
        params_hat.m,
        params_hat.p,
    )?;
    let calibrated = calibrate_dataset(ds, &params)?;
    let x: Vec<f64> = calibrated.iter().map(|c| c.x_tilde).collect();
    let z: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.covariates_z.clone()).collect();
    let y: Vec<u8> = ds.subjects.iter().map(|s| s.outcome).collect();
    let study: Vec<usize> = ds.subjects.iter().map(|s| s.study).collect();
    fit_logistic(&x, &z, &y, &study, ds.m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    #[default]
    Standard,
    /// Inflates the between term by (I+1)/I.
    Inflated,
}

#[derive(Debug, Clone)]
pub struct CombinedVariance {
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub total: DMatrix<f64>,
    pub rule: CombineRule,
}

/// Combine `I` pseudo estimates: mean naive covariance plus the empirical
/// covariance of the estimates (optionally inflated by (I+1)/I).
pub fn combine_variance(
    beta_draws: &[DVector<f64>],
    naive_covs: &[DMatrix<f64>],
    rule: CombineRule,
) -> Result<CombinedVariance> {
    let i_count = beta_draws.len();
    if i_count < 2 {
        return Err(Error::Contract(format!(
            "variance combination requires I >= 2 pseudo datasets, got {i_count}"
        )));
    }
    if naive_covs.len() != i_count {
        return Err(Error::Contract("covariance/estimate count mismatch".into()));
    }
    let k = beta_draws[0].len();
    let mut within = DMatrix::zeros(k, k);
    for cov in naive_covs {
        within += cov;
    }
    within /= i_count as f64;

    let mut mean = DVector::zeros(k);
    for b in beta_draws {
        mean += b;
    }
    mean /= i_count as f64;
    let mut between = DMatrix::zeros(k, k);
    for b in beta_draws {
        let d = b - &mean;
        between += &d * d.transpose();
    }
    between /= (i_count - 1) as f64;

    let factor = match rule {
        CombineRule::Standard => 1.0,
        CombineRule::Inflated => (i_count as f64 + 1.0) / i_count as f64,
    };
    let total = &within + &between * factor;
    Ok(CombinedVariance {
        within,
        between,
        total,
        rule,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub pseudo_datasets: usize,
    pub rule: CombineRule,
    pub seed: u64,
    #[serde(default)]
    pub minque_iterations: Option<usize>,
    #[serde(default = "default_icc")]
    pub icc_convention: IccConvention,
}

fn default_icc() -> IccConvention {
    IccConvention::Paper
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            pseudo_datasets: 20,
            rule: CombineRule::Standard,
            seed: 0,
            minque_iterations: None,
            icc_convention: IccConvention::Paper,
        }
    }
}

/// Full fit output, serializable as the tool's JSON result document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub beta_x: f64,
    pub se_beta_x: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub odds_ratio: f64,
    pub or_ci_low: f64,
    pub or_ci_high: f64,
    pub naive_se_beta_x: f64,
    pub within_beta_x: f64,
    pub between_beta_x: f64,
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub icc: Vec<f64>,
    pub icc_convention: IccConvention,
    pub pseudo_datasets: usize,
    pub rule: CombineRule,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub pseudo_redraws: usize,
    pub warnings: Vec<String>,
}

const WALD_Z: f64 = 1.96;

/// End-to-end pipeline: MINQUE -> GLS -> EBLUP -> calibration -> logistic ->
/// I pseudo fits -> combined variance.
pub fn fit_with_uncertainty(ds: &PooledDataset, options: &FitOptions) -> Result<FitResult> {
    if options.pseudo_datasets < 2 {
        return Err(Error::Contract(format!(
            "pseudo_datasets must be >= 2, got {}",
            options.pseudo_datasets
        )));
    }
    let minque_options = MinqueOptions {
        max_iterations: options.minque_iterations.unwrap_or(1),
        ..Default::default()
    };
    let lmm = fit_lmm(ds, &minque_options)?;
    fit_with_uncertainty_from_lmm(ds, &lmm, options)
}

/// Draw and refit `i_count` pseudo datasets from an LMM fit. Returns the
/// fits, the number of post-separation redraws, and whether either sampling
/// covariance needed eigenvalue repair.
pub fn run_pseudo_fits(
    ds: &PooledDataset,
    lmm: &LmmFit,
    i_count: usize,
    seed: u64,
) -> Result<(Vec<LogisticFit>, usize, bool)> {
    let theta_sampler = MvnSampler::new(
        DVector::from_column_slice(&lmm.params.theta),
        &lmm.var_theta,
    )?;
    let xi_sampler = MvnSampler::new(DVector::from_column_slice(&lmm.params.xi), &lmm.var_xi)?;
    let repaired = theta_sampler.repaired || xi_sampler.repaired;

    let results: Vec<Result<(LogisticFit, bool)>> = (0..i_count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, i as u64, 0x70));
            let draw = draw_pseudo_parameters(&theta_sampler, &xi_sampler, i + 1, &mut rng);
            match pseudo_fit(ds, &lmm.params, &draw) {
                Ok(fit) => Ok((fit, false)),
                Err(Error::Separation(_)) => {
                    // One redraw keeps I fixed; a second failure is fatal.
                    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, i as u64, 0x71));
                    let draw = draw_pseudo_parameters(&theta_sampler, &xi_sampler, i + 1, &mut rng);
                    pseudo_fit(ds, &lmm.params, &draw).map(|f| (f, true))
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut fits = Vec::with_capacity(i_count);
    let mut redraws = 0;
    for r in results {
        let (fit, redrawn) = r?;
        if redrawn {
            redraws += 1;
        }
        fits.push(fit);
    }
    Ok((fits, redraws, repaired))
}

pub fn fit_with_uncertainty_from_lmm(
    ds: &PooledDataset,
    lmm: &LmmFit,
    options: &FitOptions,
) -> Result<FitResult> {
    let mut warnings = lmm.warnings.clone();

    let calibrated = calibrate_dataset(ds, &lmm.params)?;
    let x: Vec<f64> = calibrated.iter().map(|c| c.x_tilde).collect();
    let z: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.covariates_z.clone()).collect();
    let y: Vec<u8> = ds.subjects.iter().map(|s| s.outcome).collect();
    let study: Vec<usize> = ds.subjects.iter().map(|s| s.study).collect();
    let point_fit = fit_logistic(&x, &z, &y, &study, ds.m)?;
    if !point_fit.converged {
        warnings.push("logistic fit did not converge".into());
    }

    // Taylor-approximation validity guard.
    let max_cond_sd = calibrated
        .iter()
        .map(|c| c.conditional_variance.sqrt())
        .fold(0.0f64, f64::max);
    if point_fit.beta_x().abs() * max_cond_sd > 1.0 {
        warnings.push(format!(
            "approximation guard: |beta_x| * max conditional SD = {:.3} > 1; \
             plug-in approximation may be biased",
            point_fit.beta_x().abs() * max_cond_sd
        ));
    }

    let i_count = options.pseudo_datasets;
    let (fits, redraws, repaired) = run_pseudo_fits(ds, lmm, i_count, options.seed)?;
    if repaired {
        warnings.push("covariance repaired by eigenvalue clipping".into());
    }
    let beta_draws: Vec<DVector<f64>> = fits
        .iter()
        .map(|f| DVector::from_column_slice(&f.beta))
        .collect();
    let naive_covs: Vec<DMatrix<f64>> = fits.iter().map(|f| f.naive_cov_matrix()).collect();
    if redraws > 0 {
        warnings.push(format!("{redraws} pseudo fit(s) required a redraw after separation"));
    }

    let combined = combine_variance(&beta_draws, &naive_covs, options.rule)?;
    let xi_idx = point_fit.x_index;
    let beta_x = point_fit.beta_x();
    let se = combined.total[(xi_idx, xi_idx)].sqrt();
    let ci_low = beta_x - WALD_Z * se;
    let ci_high = beta_x + WALD_Z * se;

    let icc = compute_icc(&lmm.params.sigma2, lmm.params.labs(), options.icc_convention);

    Ok(FitResult {
        beta: point_fit.beta.clone(),
        beta_x,
        se_beta_x: se,
        ci_low,
        ci_high,
        odds_ratio: beta_x.exp(),
        or_ci_low: ci_low.exp(),
        or_ci_high: ci_high.exp(),
        naive_se_beta_x: point_fit.naive_var_beta_x().sqrt(),
        within_beta_x: combined.within[(xi_idx, xi_idx)],
        between_beta_x: combined.between[(xi_idx, xi_idx)],
        theta: lmm.params.theta.clone(),
        xi: lmm.params.xi.clone(),
        sigma2: lmm.params.sigma2.clone(),
        icc,
        icc_convention: options.icc_convention,
        pseudo_datasets: i_count,
        rule: options.rule,
        seed: options.seed,
        converged: point_fit.converged,
        iterations: point_fit.iterations,
        pseudo_redraws: redraws,
        warnings,
    })
}
