//! Measurement-level design assembly.
//!
//! Each noncalibration subject contributes one row (its local lab); each
//! calibration subject contributes two rows, central lab first. Row order
//! follows dataset order, so assembly is deterministic.

use nalgebra::{DMatrix, DVector};

use crate::data::PooledDataset;

/// Rows belonging to one subject: one row, or a (central, local) pair.
#[derive(Debug, Clone, Copy)]
pub struct SubjectBlock {
    pub subject: usize,
    pub first_row: usize,
    pub n_rows: usize,
}

impl SubjectBlock {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.first_row..self.first_row + self.n_rows
    }
}

/// Assembled `H = C theta + U xi + delta` system.
#[derive(Debug, Clone)]
pub struct DesignSystem {
    /// All measurements, length N.
    pub h: DVector<f64>,
    /// Fixed-effects design: study-intercept indicators followed by W.
    pub c: DMatrix<f64>,
    /// Lab index per row (0 = central).
    pub lab_of_row: Vec<usize>,
    /// Subject index per row.
    pub subject_of_row: Vec<usize>,
    /// Per-subject row blocks, in dataset order.
    pub blocks: Vec<SubjectBlock>,
    /// For each calibration subject block: (central row, local row).
    pub pair_index: Vec<(usize, usize)>,
    pub m: usize,
    pub p: usize,
    pub labs: usize,
    pub n_subjects: usize,
}

impl DesignSystem {
    pub fn n_rows(&self) -> usize {
        self.h.len()
    }

    /// Dense lab-membership indicator matrix, N x labs.
    pub fn dense_u(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        let mut u = DMatrix::zeros(n, self.labs);
        for (row, &d) in self.lab_of_row.iter().enumerate() {
            u[(row, d)] = 1.0;
        }
        u
    }

    /// Number of rows at each lab.
    pub fn lab_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.labs];
        for &d in &self.lab_of_row {
            counts[d] += 1;
        }
        counts
    }
}

pub fn assemble_design(ds: &PooledDataset) -> DesignSystem {
    let n_cal = ds.n_calibration();
    let n = ds.n_subjects() + n_cal;
    let r = ds.m + ds.p;
    let labs = ds.lab_count();

    let mut h = DVector::zeros(n);
    let mut c = DMatrix::zeros(n, r);
    let mut lab_of_row = Vec::with_capacity(n);
    let mut subject_of_row = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(ds.n_subjects());
    let mut pair_index = Vec::with_capacity(n_cal);

    let mut row = 0usize;
    for (k, s) in ds.subjects.iter().enumerate() {
        let first_row = row;
        let local_lab = ds.lab_of(s.study);
        let mut push_row = |value: f64, lab: usize, row: &mut usize| {
            h[*row] = value;
            c[(*row, s.study)] = 1.0;
            for (i, &w) in s.covariates_w.iter().enumerate() {
                c[(*row, ds.m + i)] = w;
            }
            lab_of_row.push(lab);
            subject_of_row.push(k);
            *row += 1;
        };
        if let Some(central) = s.central_measurement {
            push_row(central, 0, &mut row);
            push_row(s.local_measurement, local_lab, &mut row);
            pair_index.push((first_row, first_row + 1));
        } else {
            push_row(s.local_measurement, local_lab, &mut row);
        }
        blocks.push(SubjectBlock {
            subject: k,
            first_row,
            n_rows: row - first_row,
        });
    }
    debug_assert_eq!(row, n);

    DesignSystem {
        h,
        c,
        lab_of_row,
        subject_of_row,
        blocks,
        pair_index,
        m: ds.m,
        p: ds.p,
        labs,
        n_subjects: ds.n_subjects(),
    }
}
