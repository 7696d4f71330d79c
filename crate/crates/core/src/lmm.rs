//! GLS fixed effects and empirical BLUP of the lab random effects, plus the
//! three-step fit (MINQUE -> GLS -> EBLUP) over a pooled dataset.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::{ParameterSet, PooledDataset};
use crate::design::{assemble_design, DesignSystem};
use crate::error::{Error, Result};
use crate::minque::{minque_variance_components, MinqueOptions};
use crate::solver::CovarianceStructure;

/// `theta_hat = (C^T V^{-1} C)^{-1} C^T V^{-1} H` with plug-in covariance
/// `(C^T V^{-1} C)^{-1}`.
pub fn gls_fixed_effects(
    design: &DesignSystem,
    sigma2: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cov = CovarianceStructure::new(design, sigma2)?;
    let vinv_c = cov.solve(&design.c);
    let a = design.c.transpose() * &vinv_c;
    let chol = Cholesky::new(a).ok_or_else(|| {
        Error::Identifiability(
            "C^T V^{-1} C is rank deficient: study-intercept or W columns are collinear".into(),
        )
    })?;
    let cth = vinv_c.transpose() * &design.h;
    let theta = chol.solve(&cth);
    let var_theta = chol.inverse();
    Ok((theta, var_theta))
}

/// `xi_hat = G U^T V^{-1} (H - C theta_hat)` with covariance
/// `G U^T P U G`, `P = V^{-1} - V^{-1} C (C^T V^{-1} C)^{-1} C^T V^{-1}`.
pub fn eblup_random_effects(
    design: &DesignSystem,
    sigma2: &[f64],
    theta_hat: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cov = CovarianceStructure::new(design, sigma2)?;
    let sigma2_xi = cov.sigma2_xi();
    let labs = design.labs;

    let resid = &design.h - &design.c * theta_hat;
    let vinv_resid = cov.solve_vec(&resid);
    let mut xi = DVector::zeros(labs);
    for (row, &d) in design.lab_of_row.iter().enumerate() {
        xi[d] += vinv_resid[row];
    }
    xi *= sigma2_xi;

    // U^T P U with thin products only.
    let u = design.dense_u();
    let vinv_u = cov.solve(&u);
    let ut_vinv_u = u.transpose() * &vinv_u;
    let vinv_c = cov.solve(&design.c);
    let a = design.c.transpose() * &vinv_c;
    let chol = Cholesky::new(a).ok_or_else(|| {
        Error::Identifiability("C^T V^{-1} C is rank deficient".into())
    })?;
    let ctv_u = design.c.transpose() * &vinv_u; // r x labs
    let correction = ctv_u.transpose() * chol.solve(&ctv_u);
    let var_xi = (ut_vinv_u - correction) * (sigma2_xi * sigma2_xi);

    Ok((xi, var_xi))
}

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub params: ParameterSet,
    pub var_theta: DMatrix<f64>,
    pub var_xi: DMatrix<f64>,
    pub minque_floored: bool,
    pub minque_iterations: usize,
    pub warnings: Vec<String>,
}

/// Full three-step estimation over a dataset.
pub fn fit_lmm(ds: &PooledDataset, minque_options: &MinqueOptions) -> Result<LmmFit> {
    ds.validate_for_fit()?;
    let design = assemble_design(ds);
    fit_lmm_design(ds, &design, minque_options)
}

pub fn fit_lmm_design(
    ds: &PooledDataset,
    design: &DesignSystem,
    minque_options: &MinqueOptions,
) -> Result<LmmFit> {
    let mut warnings = Vec::new();
    let mq = minque_variance_components(design, minque_options)?;
    if mq.floored {
        warnings.push("MINQUE returned negative variance components; floored".into());
    }
    let (theta, var_theta) = gls_fixed_effects(design, &mq.sigma2)?;
    let (xi, var_xi) = eblup_random_effects(design, &mq.sigma2, &theta)?;
    let params = ParameterSet::new(
        theta.as_slice().to_vec(),
        xi.as_slice().to_vec(),
        mq.sigma2.clone(),
        ds.m,
        ds.p,
    )?;
    Ok(LmmFit {
        params,
        var_theta,
        var_xi,
        minque_floored: mq.floored,
        minque_iterations: mq.iterations,
        warnings,
    })
}
