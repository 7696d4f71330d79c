//! Domain types and dataset ingestion for pooled multi-study biomarker data.
//!
//! A dataset holds one row per participant. Every participant has a local
//! laboratory measurement; participants in the calibration subset additionally
//! carry a central laboratory re-assay. The central laboratory is always lab
//! index 0; local labs are indexed from 1, and several studies may share one
//! local lab.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pooled-analysis participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// Study index, 0-based internally.
    pub study: usize,
    /// Binary disease outcome.
    pub outcome: u8,
    /// Covariates of the outcome model.
    pub covariates_z: Vec<f64>,
    /// Covariates of the biomarker model (may overlap Z).
    pub covariates_w: Vec<f64>,
    /// Local laboratory measurement, always present.
    pub local_measurement: f64,
    /// Central laboratory measurement; present iff the subject is in the
    /// calibration subset.
    pub central_measurement: Option<f64>,
    /// True biomarker value, retained in simulated data only.
    pub true_value: Option<f64>,
}

impl SubjectRecord {
    pub fn is_calibration(&self) -> bool {
        self.central_measurement.is_some()
    }
}

/// Pooled dataset across `m` studies with an explicit study -> local-lab map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledDataset {
    pub subjects: Vec<SubjectRecord>,
    /// Number of studies.
    pub m: usize,
    /// Local lab index (1-based; 0 is the central lab) for each study.
    pub lab_of_study: Vec<usize>,
    /// Dimension of W.
    pub p: usize,
    /// Dimension of Z.
    pub q: usize,
}

impl PooledDataset {
    pub fn new(subjects: Vec<SubjectRecord>, lab_of_study: Vec<usize>) -> Result<Self> {
        let m = lab_of_study.len();
        if m < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 studies, got {m}"
            )));
        }
        let mut labs_seen: Vec<usize> = lab_of_study.clone();
        labs_seen.sort_unstable();
        labs_seen.dedup();
        if labs_seen.len() < 2 {
            return Err(Error::Validation(
                "at least two distinct local laboratories are required".into(),
            ));
        }
        for (d, &lab) in lab_of_study.iter().enumerate() {
            if lab == 0 {
                return Err(Error::Validation(format!(
                    "study {} maps to lab 0, which is reserved for the central lab",
                    d + 1
                )));
            }
        }
        let ds = Self {
            subjects,
            m,
            lab_of_study,
            p: 0,
            q: 0,
        }
        .with_covariate_dims()?;
        Ok(ds)
    }

    fn with_covariate_dims(mut self) -> Result<Self> {
        let first = self
            .subjects
            .first()
            .ok_or_else(|| Error::Validation("dataset has no subjects".into()))?;
        self.p = first.covariates_w.len();
        self.q = first.covariates_z.len();
        for (i, s) in self.subjects.iter().enumerate() {
            if s.covariates_w.len() != self.p || s.covariates_z.len() != self.q {
                return Err(Error::Validation(format!(
                    "subject {} ({}) has inconsistent covariate dimensions",
                    i, s.subject_id
                )));
            }
            if s.outcome > 1 {
                return Err(Error::Validation(format!(
                    "subject {} ({}) has outcome {} outside {{0,1}}",
                    i, s.subject_id, s.outcome
                )));
            }
            if s.study >= self.m {
                return Err(Error::Validation(format!(
                    "subject {} ({}) references unknown study {}",
                    i, s.subject_id, s.study
                )));
            }
        }
        Ok(self)
    }

    /// Number of distinct labs including the central lab (index 0).
    pub fn lab_count(&self) -> usize {
        self.lab_of_study.iter().copied().max().unwrap_or(0) + 1
    }

    pub fn lab_of(&self, study: usize) -> usize {
        self.lab_of_study[study]
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_calibration(&self) -> usize {
        self.subjects.iter().filter(|s| s.is_calibration()).count()
    }

    /// Fit-time check: calibration formulas are unidentified for a study with
    /// no re-assayed subjects.
    pub fn validate_for_fit(&self) -> Result<()> {
        let mut cal_per_study = vec![0usize; self.m];
        for s in &self.subjects {
            if s.is_calibration() {
                cal_per_study[s.study] += 1;
            }
        }
        for (j, &c) in cal_per_study.iter().enumerate() {
            if c == 0 {
                return Err(Error::Validation(format!(
                    "study {} has no calibration subjects; its lab variance is unidentified",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

/// Fixed effects, random effects and variance components of the LMM.
///
/// Layout mirrors the estimation output: `theta = [alpha_01..alpha_0m, tau]`,
/// `xi = [xi_0..xi_L]` with lab 0 the central lab, and
/// `sigma2 = [sigma2_0..sigma2_L, sigma2_xi, sigma2_x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub m: usize,
    pub p: usize,
}

impl ParameterSet {
    pub fn new(theta: Vec<f64>, xi: Vec<f64>, sigma2: Vec<f64>, m: usize, p: usize) -> Result<Self> {
        let labs = xi.len();
        if theta.len() != m + p {
            return Err(Error::Contract(format!(
                "theta has length {}, expected m+p={}",
                theta.len(),
                m + p
            )));
        }
        if sigma2.len() != labs + 2 {
            return Err(Error::Contract(format!(
                "sigma2 has length {}, expected labs+2={}",
                sigma2.len(),
                labs + 2
            )));
        }
        if sigma2.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Contract(
                "all variance components must be strictly positive".into(),
            ));
        }
        Ok(Self { theta, xi, sigma2, m, p })
    }

    pub fn labs(&self) -> usize {
        self.xi.len()
    }

    pub fn alpha0(&self, study: usize) -> f64 {
        self.theta[study]
    }

    pub fn tau(&self) -> &[f64] {
        &self.theta[self.m..]
    }

    pub fn sigma2_lab(&self, d: usize) -> f64 {
        self.sigma2[d]
    }

    pub fn sigma2_xi(&self) -> f64 {
        self.sigma2[self.labs()]
    }

    pub fn sigma2_x(&self) -> f64 {
        self.sigma2[self.labs() + 1]
    }
}

/// Column-name map for delimited ingestion. Defaults follow the documented
/// header; `w_columns`/`z_columns` may name the same column to declare shared
/// covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub subject_id: String,
    pub study: String,
    pub local_lab: String,
    pub local_measurement: String,
    pub central_measurement: String,
    pub outcome: String,
    /// Explicit W columns; when empty, all `w_*` headers are used.
    #[serde(default)]
    pub w_columns: Vec<String>,
    /// Explicit Z columns; when empty, all `z_*` headers are used.
    #[serde(default)]
    pub z_columns: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            subject_id: "subject_id".into(),
            study: "study".into(),
            local_lab: "local_lab".into(),
            local_measurement: "local_measurement".into(),
            central_measurement: "central_measurement".into(),
            outcome: "outcome".into(),
            w_columns: Vec::new(),
            z_columns: Vec::new(),
            delimiter: ',',
        }
    }
}

fn parse_f64(field: &str, line: usize, col: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse '{field}' in column '{col}' as a number"),
    })
}

/// Load a delimited dataset. Row order is preserved; an empty
/// `central_measurement` cell denotes a subject outside the calibration subset.
pub fn load_dataset(path: &Path, schema: &ColumnSchema) -> Result<PooledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing required column '{name}'")))
    };

    let c_id = col(&schema.subject_id)?;
    let c_study = col(&schema.study)?;
    let c_lab = col(&schema.local_lab)?;
    let c_local = col(&schema.local_measurement)?;
    let c_central = col(&schema.central_measurement)?;
    let c_outcome = col(&schema.outcome)?;

    let named_cols = |names: &[String], prefix: &str| -> Result<Vec<usize>> {
        if names.is_empty() {
            Ok(headers
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix))
                .map(|(i, _)| i)
                .collect())
        } else {
            names.iter().map(|n| col(n)).collect()
        }
    };
    let w_cols = named_cols(&schema.w_columns, "w_")?;
    let z_cols = named_cols(&schema.z_columns, "z_")?;

    let mut subjects = Vec::new();
    let mut study_labels: Vec<String> = Vec::new();
    let mut lab_labels: Vec<String> = Vec::new();
    let mut lab_of_study: Vec<usize> = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            record.get(c).ok_or_else(|| Error::Parse {
                line,
                message: format!("row has only {} fields", record.len()),
            })
        };

        let study_label = field(c_study)?.to_string();
        let study = match study_labels.iter().position(|s| *s == study_label) {
            Some(j) => j,
            None => {
                study_labels.push(study_label);
                lab_of_study.push(0);
                study_labels.len() - 1
            }
        };
        let lab_label = field(c_lab)?.to_string();
        let lab = match lab_labels.iter().position(|l| *l == lab_label) {
            Some(d) => d + 1,
            None => {
                lab_labels.push(lab_label);
                lab_labels.len()
            }
        };
        if lab_of_study[study] == 0 {
            lab_of_study[study] = lab;
        } else if lab_of_study[study] != lab {
            return Err(Error::Parse {
                line,
                message: format!(
                    "study '{}' maps to multiple local labs",
                    study_labels[study]
                ),
            });
        }

        let outcome_raw = field(c_outcome)?;
        let outcome: u8 = match outcome_raw.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Validation(format!(
                    "line {line}: outcome '{other}' outside {{0,1}}"
                )))
            }
        };

        let central_raw = field(c_central)?;
        let central_measurement = if central_raw.trim().is_empty() {
            None
        } else {
            Some(parse_f64(central_raw, line, &schema.central_measurement)?)
        };

        let covariates_w = w_cols
            .iter()
            .map(|&c| field(c).and_then(|f| parse_f64(f, line, &headers[c])))
            .collect::<Result<Vec<f64>>>()?;
        let covariates_z = z_cols
            .iter()
            .map(|&c| field(c).and_then(|f| parse_f64(f, line, &headers[c])))
            .collect::<Result<Vec<f64>>>()?;

        subjects.push(SubjectRecord {
            subject_id: field(c_id)?.to_string(),
            study,
            outcome,
            covariates_z,
            covariates_w,
            local_measurement: parse_f64(field(c_local)?, line, &schema.local_measurement)?,
            central_measurement,
            true_value: None,
        });
    }

    PooledDataset::new(subjects, lab_of_study)
}

/// Write a dataset back out in the documented delimited format.
pub fn write_dataset<W: Write>(ds: &PooledDataset, out: &mut W) -> Result<()> {
    let mut header = vec![
        "subject_id".to_string(),
        "study".to_string(),
        "local_lab".to_string(),
        "local_measurement".to_string(),
        "central_measurement".to_string(),
        "outcome".to_string(),
    ];
    for i in 0..ds.p {
        header.push(format!("w_{}", i + 1));
    }
    for i in 0..ds.q {
        header.push(format!("z_{}", i + 1));
    }
    writeln!(out, "{}", header.join(","))?;
    for s in &ds.subjects {
        let mut fields = vec![
            s.subject_id.clone(),
            format!("{}", s.study + 1),
            format!("{}", ds.lab_of(s.study)),
            format_f64(s.local_measurement),
            s.central_measurement.map(format_f64).unwrap_or_default(),
            format!("{}", s.outcome),
        ];
        fields.extend(s.covariates_w.iter().copied().map(format_f64));
        fields.extend(s.covariates_z.iter().copied().map(format_f64));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

fn format_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Per-study (plus central-lab) summary of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub label: String,
    pub lab: usize,
    pub n: usize,
    pub n_calibration: usize,
    pub prevalence: f64,
    pub measurement_mean: f64,
    pub measurement_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub m: usize,
    pub labs: usize,
    pub n_total: usize,
    pub n_calibration: usize,
    pub per_study: Vec<StudySummary>,
    /// Mean/SD of the pooled central-lab re-assays.
    pub central: Option<StudySummary>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize_dataset(ds: &PooledDataset) -> DatasetSummary {
    let mut per_study = Vec::with_capacity(ds.m);
    for j in 0..ds.m {
        let subj: Vec<&SubjectRecord> = ds.subjects.iter().filter(|s| s.study == j).collect();
        let locals: Vec<f64> = subj.iter().map(|s| s.local_measurement).collect();
        let (mean, sd) = mean_sd(&locals);
        per_study.push(StudySummary {
            label: format!("study {}", j + 1),
            lab: ds.lab_of(j),
            n: subj.len(),
            n_calibration: subj.iter().filter(|s| s.is_calibration()).count(),
            prevalence: if subj.is_empty() {
                f64::NAN
            } else {
                subj.iter().map(|s| s.outcome as f64).sum::<f64>() / subj.len() as f64
            },
            measurement_mean: mean,
            measurement_sd: sd,
        });
    }
    let centrals: Vec<f64> = ds
        .subjects
        .iter()
        .filter_map(|s| s.central_measurement)
        .collect();
    let central = if centrals.is_empty() {
        None
    } else {
        let (mean, sd) = mean_sd(&centrals);
        Some(StudySummary {
            label: "central lab".into(),
            lab: 0,
            n: centrals.len(),
            n_calibration: centrals.len(),
            prevalence: f64::NAN,
            measurement_mean: mean,
            measurement_sd: sd,
        })
    };
    DatasetSummary {
        m: ds.m,
        labs: ds.lab_count(),
        n_total: ds.n_subjects(),
        n_calibration: ds.n_calibration(),
        per_study,
        central,
    }
}

/// Stable map from study index to the number of calibration subjects, used by
/// diagnostics and error messages.
pub fn calibration_counts(ds: &PooledDataset) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for j in 0..ds.m {
        counts.insert(j, 0);
    }
    for s in &ds.subjects {
        if s.is_calibration() {
            *counts.get_mut(&s.study).unwrap() += 1;
        }
    }
    counts
}
