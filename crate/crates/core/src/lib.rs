//! Repeated-measures calibration for biomarker data pooled across studies.
//!
//! The pipeline: assemble a measurement-level linear mixed model over local
//! and central laboratory assays, estimate variance components by MINQUE,
//! fixed effects by GLS, and lab random effects by empirical BLUP; compute
//! calibrated biomarker values as conditional expectations; fit the logistic
//! outcome model on the calibrated values; and propagate calibration
//! uncertainty into the effect-estimate variance via pseudo-dataset
//! resampling.

pub mod calibration;
pub mod data;
pub mod design;
pub mod error;
pub mod lmm;
pub mod logistic;
pub mod minque;
pub mod simulation;
pub mod solver;
pub mod uncertainty;

pub use data::{ColumnSchema, ParameterSet, PooledDataset, SubjectRecord};
pub use error::{Error, Result};
