//! Calibrated biomarker values: conditional means and variances of the true
//! value given the available lab measurements and covariates, plus lab ICCs.

use serde::{Deserialize, Serialize};

use crate::data::{ParameterSet, PooledDataset, SubjectRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKind {
    Calibration,
    Noncalibration,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibratedValue {
    pub x_tilde: f64,
    pub conditional_variance: f64,
    pub subject_kind: SubjectKind,
}

/// `w_j = sigma2_x / (sigma2_x + sigma2_j sigma2_0 / (sigma2_j + sigma2_0))`.
pub fn calibration_weight(sigma2_x: f64, sigma2_j: f64, sigma2_0: f64) -> Result<f64> {
    if !(sigma2_x > 0.0 && sigma2_j > 0.0 && sigma2_0 > 0.0) {
        return Err(Error::Contract(format!(
            "calibration_weight requires positive variances, got ({sigma2_x}, {sigma2_j}, {sigma2_0})"
        )));
    }
    Ok(sigma2_x / (sigma2_x + sigma2_j * sigma2_0 / (sigma2_j + sigma2_0)))
}

fn linear_predictor(rec: &SubjectRecord, params: &ParameterSet) -> f64 {
    params.alpha0(rec.study)
        + params
            .tau()
            .iter()
            .zip(&rec.covariates_w)
            .map(|(t, w)| t * w)
            .sum::<f64>()
}

/// Conditional mean and variance of the true value given this subject's
/// measurements, covariates, and the fitted parameters.
pub fn calibrate_subject(
    rec: &SubjectRecord,
    params: &ParameterSet,
    lab_of_study: &[usize],
) -> Result<CalibratedValue> {
    let lab = lab_of_study[rec.study];
    let sigma2_x = params.sigma2_x();
    let sigma2_j = params.sigma2_lab(lab);
    let sigma2_0 = params.sigma2_lab(0);
    let mu = linear_predictor(rec, params);
    let xi_j = params.xi[lab];
    let local = rec.local_measurements_checked()?;

    match rec.central_measurement {
        Some(central) => {
            let w = calibration_weight(sigma2_x, sigma2_j, sigma2_0)?;
            let denom = sigma2_0 + sigma2_j;
            let pooled = (sigma2_0 / denom) * (local - xi_j)
                + (sigma2_j / denom) * (central - params.xi[0]);
            Ok(CalibratedValue {
                x_tilde: w * pooled + (1.0 - w) * mu,
                conditional_variance: sigma2_x * (1.0 - w),
                subject_kind: SubjectKind::Calibration,
            })
        }
        None => {
            let denom = sigma2_x + sigma2_j;
            Ok(CalibratedValue {
                x_tilde: (sigma2_x / denom) * (local - xi_j) + (sigma2_j / denom) * mu,
                conditional_variance: sigma2_x * sigma2_j / denom,
                subject_kind: SubjectKind::Noncalibration,
            })
        }
    }
}

impl SubjectRecord {
    fn local_measurements_checked(&self) -> Result<f64> {
        if self.local_measurement.is_finite() {
            Ok(self.local_measurement)
        } else {
            Err(Error::Contract(format!(
                "subject {} has a non-finite local measurement",
                self.subject_id
            )))
        }
    }
}

/// Elementwise calibration in dataset order.
pub fn calibrate_dataset(ds: &PooledDataset, params: &ParameterSet) -> Result<Vec<CalibratedValue>> {
    ds.subjects
        .iter()
        .map(|rec| calibrate_subject(rec, params, &ds.lab_of_study))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IccConvention {
    /// `sigma2_d / (sigma2_xi + sigma2_d)` as printed in the source analysis.
    /// Note this inverts the conventional intraclass correlation.
    Paper,
    /// `sigma2_xi / (sigma2_xi + sigma2_d)`.
    Conventional,
}

/// Per-lab intra-lab correlation coefficients, d = 0..labs.
pub fn compute_icc(sigma2: &[f64], labs: usize, convention: IccConvention) -> Vec<f64> {
    let sigma2_xi = sigma2[labs];
    (0..labs)
        .map(|d| match convention {
            IccConvention::Paper => sigma2[d] / (sigma2_xi + sigma2[d]),
            IccConvention::Conventional => sigma2_xi / (sigma2_xi + sigma2[d]),
        })
        .collect()
}
