//! Structured solves with the marginal covariance `V = U G U^T + R`.
//!
//! `R` is block diagonal over subjects (1x1 for solo rows, 2x2 for
//! calibration pairs with off-diagonal `sigma2_x`), and `G = sigma2_xi I` is
//! tiny, so `V^{-1}` is applied through
//! `R^{-1} - R^{-1} U (G^{-1} + U^T R^{-1} U)^{-1} U^T R^{-1}`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::DesignSystem;
use crate::error::{Error, Result};

/// Inverse of one R block.
#[derive(Debug, Clone, Copy)]
pub enum RInvBlock {
    Solo(f64),
    Pair([[f64; 2]; 2]),
}

/// Covariance structure of the assembled system at a fixed sigma2, exposing
/// `V^{-1} rhs` products.
pub struct CovarianceStructure<'a> {
    pub design: &'a DesignSystem,
    pub sigma2: Vec<f64>,
    rinv_blocks: Vec<RInvBlock>,
    /// Cholesky of `G^{-1} + U^T R^{-1} U`; absent when sigma2_xi = 0.
    core: Option<Cholesky<f64, Dyn>>,
}

impl<'a> CovarianceStructure<'a> {
    /// `sigma2` is `[sigma2_0..sigma2_L, sigma2_xi, sigma2_x]`. All lab
    /// variances and sigma2_x must be positive; sigma2_xi may be zero (the
    /// random effect then drops out).
    pub fn new(design: &'a DesignSystem, sigma2: &[f64]) -> Result<Self> {
        let labs = design.labs;
        if sigma2.len() != labs + 2 {
            return Err(Error::Contract(format!(
                "sigma2 has length {}, expected {}",
                sigma2.len(),
                labs + 2
            )));
        }
        for (i, &v) in sigma2.iter().enumerate() {
            let is_xi = i == labs;
            if !(v > 0.0 || (is_xi && v == 0.0)) {
                return Err(Error::numerical(
                    "solver",
                    format!("non-positive variance component at index {i}: {v}"),
                ));
            }
        }
        let sigma2_xi = sigma2[labs];
        let sigma2_x = sigma2[labs + 1];

        let mut rinv_blocks = Vec::with_capacity(design.blocks.len());
        for block in &design.blocks {
            match block.n_rows {
                1 => {
                    let d = design.lab_of_row[block.first_row];
                    rinv_blocks.push(RInvBlock::Solo(1.0 / (sigma2_x + sigma2[d])));
                }
                2 => {
                    let d0 = design.lab_of_row[block.first_row];
                    let d1 = design.lab_of_row[block.first_row + 1];
                    let a = sigma2_x + sigma2[d0];
                    let b = sigma2_x + sigma2[d1];
                    let det = a * b - sigma2_x * sigma2_x;
                    if det <= 0.0 {
                        return Err(Error::numerical(
                            "solver",
                            format!("R block for subject {} is not positive definite", block.subject),
                        ));
                    }
                    rinv_blocks.push(RInvBlock::Pair([
                        [b / det, -sigma2_x / det],
                        [-sigma2_x / det, a / det],
                    ]));
                }
                other => {
                    return Err(Error::Contract(format!(
                        "subject block with {other} rows is unsupported"
                    )));
                }
            }
        }

        let core = if sigma2_xi > 0.0 {
            // M = G^{-1} + U^T R^{-1} U, labs x labs.
            let mut m = DMatrix::zeros(labs, labs);
            for d in 0..labs {
                m[(d, d)] = 1.0 / sigma2_xi;
            }
            for (block, rinv) in design.blocks.iter().zip(&rinv_blocks) {
                match rinv {
                    RInvBlock::Solo(v) => {
                        let d = design.lab_of_row[block.first_row];
                        m[(d, d)] += v;
                    }
                    RInvBlock::Pair(b) => {
                        let d0 = design.lab_of_row[block.first_row];
                        let d1 = design.lab_of_row[block.first_row + 1];
                        m[(d0, d0)] += b[0][0];
                        m[(d1, d1)] += b[1][1];
                        m[(d0, d1)] += b[0][1];
                        m[(d1, d0)] += b[1][0];
                    }
                }
            }
            Some(Cholesky::new(m).ok_or_else(|| {
                Error::numerical("solver", "Woodbury core matrix is not positive definite")
            })?)
        } else {
            None
        };

        Ok(Self {
            design,
            sigma2: sigma2.to_vec(),
            rinv_blocks,
            core,
        })
    }

    pub fn rinv_blocks(&self) -> &[RInvBlock] {
        &self.rinv_blocks
    }

    /// `R^{-1} X`.
    pub fn apply_rinv(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (block, rinv) in self.design.blocks.iter().zip(&self.rinv_blocks) {
            let r0 = block.first_row;
            match rinv {
                RInvBlock::Solo(v) => {
                    for c in 0..x.ncols() {
                        out[(r0, c)] = v * x[(r0, c)];
                    }
                }
                RInvBlock::Pair(b) => {
                    for c in 0..x.ncols() {
                        let x0 = x[(r0, c)];
                        let x1 = x[(r0 + 1, c)];
                        out[(r0, c)] = b[0][0] * x0 + b[0][1] * x1;
                        out[(r0 + 1, c)] = b[1][0] * x0 + b[1][1] * x1;
                    }
                }
            }
        }
        out
    }

    /// `U^T X`, labs x k.
    pub fn ut_times(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.design.labs, x.ncols());
        for (row, &d) in self.design.lab_of_row.iter().enumerate() {
            for c in 0..x.ncols() {
                out[(d, c)] += x[(row, c)];
            }
        }
        out
    }

    /// `U Y`, N x k from labs x k.
    pub fn u_times(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.design.n_rows();
        let mut out = DMatrix::zeros(n, y.ncols());
        for (row, &d) in self.design.lab_of_row.iter().enumerate() {
            for c in 0..y.ncols() {
                out[(row, c)] = y[(d, c)];
            }
        }
        out
    }

    /// `V^{-1} X` for one or more column vectors.
    pub fn solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let rinv_x = self.apply_rinv(x);
        match &self.core {
            None => rinv_x,
            Some(core) => {
                let ut_rinv_x = self.ut_times(&rinv_x);
                let mut inner = ut_rinv_x;
                core.solve_mut(&mut inner);
                let correction = self.apply_rinv(&self.u_times(&inner));
                rinv_x - correction
            }
        }
    }

    pub fn solve_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    pub fn sigma2_xi(&self) -> f64 {
        self.sigma2[self.design.labs]
    }

    pub fn sigma2_x(&self) -> f64 {
        self.sigma2[self.design.labs + 1]
    }
}
