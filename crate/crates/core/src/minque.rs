//! MINQUE variance-component estimation.
//!
//! Solves `S sigma2 = q` with `S_ab = tr(Q V_a Q V_b)`, `q_a = H^T Q V_a Q H`,
//! and `Q = V0^{-1} - V0^{-1} C (C^T V0^{-1} C)^{-1} C^T V0^{-1}`. The
//! component design matrices are the per-lab diagonal indicators (sigma2_d),
//! `U U^T` (sigma2_xi) and the subject-block matrix linking the rows of each
//! subject (sigma2_x).
//!
//! The default prior is the identity (MINQUE(1)); iterated refinement rebuilds
//! `V0` from the previous estimates. All traces exploit the subject-block
//! structure of `R` plus the thin lab-indicator factor, so nothing dense in N
//! is ever formed.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::design::DesignSystem;
use crate::error::{Error, Result};
use crate::solver::{CovarianceStructure, RInvBlock};

#[derive(Debug, Clone)]
pub struct MinqueOptions {
    /// Total passes; 1 = plain MINQUE(1) with identity prior.
    pub max_iterations: usize,
    /// Relative-change stopping rule for iterated refinement.
    pub rel_tol: f64,
}

impl Default for MinqueOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinqueResult {
    /// `[sigma2_0..sigma2_L, sigma2_xi, sigma2_x]`.
    pub sigma2: Vec<f64>,
    /// True when any negative solution was clipped to the floor.
    pub floored: bool,
    pub iterations: usize,
}

/// Component index space: labs diagonals, then xi, then x.
fn n_components(design: &DesignSystem) -> usize {
    design.labs + 2
}

fn is_xi(design: &DesignSystem, a: usize) -> bool {
    a == design.labs
}

fn is_x(design: &DesignSystem, a: usize) -> bool {
    a == design.labs + 1
}

/// `V_a X` for a thin X.
fn apply_component(design: &DesignSystem, a: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    if is_xi(design, a) {
        // U U^T X: per-lab column sums, broadcast back.
        let mut lab_sums = DMatrix::zeros(design.labs, x.ncols());
        for (row, &d) in design.lab_of_row.iter().enumerate() {
            for c in 0..x.ncols() {
                lab_sums[(d, c)] += x[(row, c)];
            }
        }
        for (row, &d) in design.lab_of_row.iter().enumerate() {
            for c in 0..x.ncols() {
                out[(row, c)] = lab_sums[(d, c)];
            }
        }
    } else if is_x(design, a) {
        // Subject-block all-ones: within-block row sums, broadcast.
        for block in &design.blocks {
            for c in 0..x.ncols() {
                let s: f64 = block.rows().map(|r| x[(r, c)]).sum();
                for r in block.rows() {
                    out[(r, c)] = s;
                }
            }
        }
    } else {
        for (row, &d) in design.lab_of_row.iter().enumerate() {
            if d == a {
                for c in 0..x.ncols() {
                    out[(row, c)] = x[(row, c)];
                }
            }
        }
    }
    out
}

/// Prior-precision operator `V0^{-1} = B - T T^T` with `B` block diagonal
/// over subjects and `T` the thin lab factor (absent for the identity prior
/// or when the prior sigma2_xi is zero).
struct PriorPrecision {
    /// Per-subject blocks of `B`; `None` means identity.
    blocks: Option<Vec<RInvBlock>>,
    /// N x labs.
    t: Option<DMatrix<f64>>,
}

impl PriorPrecision {
    fn identity() -> Self {
        Self {
            blocks: None,
            t: None,
        }
    }

    fn from_sigma2(design: &DesignSystem, sigma2: &[f64]) -> Result<Self> {
        let cov = CovarianceStructure::new(design, sigma2)?;
        let blocks = cov.rinv_blocks().to_vec();
        let t = if cov.sigma2_xi() > 0.0 {
            // T = R0^{-1} U L^{-T} where M = G^{-1} + U^T R0^{-1} U = L L^T,
            // so that T T^T = R0^{-1} U M^{-1} U^T R0^{-1}.
            let rinv_u = cov.apply_rinv(&design.dense_u());
            let mut m = DMatrix::zeros(design.labs, design.labs);
            for d in 0..design.labs {
                m[(d, d)] = 1.0 / cov.sigma2_xi();
            }
            m += cov.ut_times(&rinv_u);
            let chol = Cholesky::new(m)
                .ok_or_else(|| Error::numerical("minque", "prior core not positive definite"))?;
            let t_t = chol
                .l()
                .solve_lower_triangular(&rinv_u.transpose())
                .ok_or_else(|| Error::numerical("minque", "triangular solve failed"))?;
            Some(t_t.transpose())
        } else {
            None
        };
        Ok(Self {
            blocks: Some(blocks),
            t,
        })
    }

    fn apply_b(&self, design: &DesignSystem, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.blocks {
            None => x.clone(),
            Some(blocks) => {
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                for (block, rinv) in design.blocks.iter().zip(blocks) {
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
        }
    }

    /// `V0^{-1} X`.
    fn apply(&self, design: &DesignSystem, x: &DMatrix<f64>) -> DMatrix<f64> {
        let bx = self.apply_b(design, x);
        match &self.t {
            None => bx,
            Some(t) => {
                let ttx = t.transpose() * x;
                bx - t * ttx
            }
        }
    }

    /// One subject block of `B` as a 2x2 (padded for solo blocks).
    fn block_of(&self, idx: usize, n_rows: usize) -> [[f64; 2]; 2] {
        match &self.blocks {
            None => {
                let mut b = [[0.0; 2]; 2];
                for i in 0..n_rows {
                    b[i][i] = 1.0;
                }
                b
            }
            Some(blocks) => match blocks[idx] {
                RInvBlock::Solo(v) => [[v, 0.0], [0.0, 0.0]],
                RInvBlock::Pair(b) => b,
            },
        }
    }
}

/// Restriction of a block-structured component (lab diagonal or subject
/// all-ones) to one subject block, padded to 2x2.
fn component_block(design: &DesignSystem, a: usize, block_idx: usize) -> [[f64; 2]; 2] {
    let block = &design.blocks[block_idx];
    let mut out = [[0.0; 2]; 2];
    if is_x(design, a) {
        for i in 0..block.n_rows {
            for j in 0..block.n_rows {
                out[i][j] = 1.0;
            }
        }
    } else {
        for i in 0..block.n_rows {
            if design.lab_of_row[block.first_row + i] == a {
                out[i][i] = 1.0;
            }
        }
    }
    out
}

fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mat2_trace_prod(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[1][0] + a[1][0] * b[0][1] + a[1][1] * b[1][1]
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `tr(B V_a B V_b)` where both components share the subject-block structure.
fn trace_b_block(design: &DesignSystem, prior: &PriorPrecision, a: usize, b: usize) -> f64 {
    let mut total = 0.0;
    for idx in 0..design.blocks.len() {
        let bk = prior.block_of(idx, design.blocks[idx].n_rows);
        let ak = component_block(design, a, idx);
        let ck = component_block(design, b, idx);
        let m1 = mat2_mul(&bk, &ak);
        let m2 = mat2_mul(&bk, &ck);
        total += mat2_trace_prod(&m1, &m2);
    }
    total
}

struct MinqueSystem {
    s: DMatrix<f64>,
    q: DVector<f64>,
}

/// Build the MINQUE normal equations for a given prior.
fn build_system(
    design: &DesignSystem,
    prior: &PriorPrecision,
) -> Result<MinqueSystem> {
    let nc = n_components(design);
    let r = design.c.ncols();

    // K = V0^{-1} C Lc^{-T} with (C^T V0^{-1} C) = Lc Lc^T.
    let w0c = prior.apply(design, &design.c);
    let mc = design.c.transpose() * &w0c;
    let chol = Cholesky::new(mc).ok_or_else(|| {
        Error::Identifiability("C^T V0^{-1} C is singular: collinear fixed-effect columns".into())
    })?;
    let k_t = chol
        .l()
        .solve_lower_triangular(&w0c.transpose())
        .ok_or_else(|| Error::numerical("minque", "triangular solve failed"))?;
    let k = k_t.transpose(); // N x r

    // y = Q H.
    let h_mat = DMatrix::from_column_slice(design.h.len(), 1, design.h.as_slice());
    let w0h = prior.apply(design, &h_mat);
    let kth = &k.transpose() * &h_mat;
    let y = w0h - &k * kth;

    // Per-component thin products.
    let v_k: Vec<DMatrix<f64>> = (0..nc).map(|a| apply_component(design, a, &k)).collect();
    let w0_v_k: Vec<DMatrix<f64>> = v_k.iter().map(|vk| prior.apply(design, vk)).collect();
    let f: Vec<DMatrix<f64>> = v_k.iter().map(|vk| k.transpose() * vk).collect();

    let u = design.dense_u();
    let bu = prior.apply_b(design, &u);
    let v_bu: Vec<DMatrix<f64>> = (0..nc).map(|a| apply_component(design, a, &bu)).collect();

    let (v_t, e_t): (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) = match &prior.t {
        Some(t) => {
            let vt: Vec<DMatrix<f64>> = (0..nc).map(|a| apply_component(design, a, t)).collect();
            let et: Vec<DMatrix<f64>> = vt.iter().map(|v| t.transpose() * v).collect();
            (vt, et)
        }
        None => (Vec::new(), Vec::new()),
    };

    let mut s = DMatrix::zeros(nc, nc);
    let mut q = DVector::zeros(nc);

    for a in 0..nc {
        // q_a = y^T V_a y.
        let vy = apply_component(design, a, &y);
        q[a] = frob_dot(&y, &vy);

        for b in a..nc {
            // tr(B V_a B V_b): block path unless a or b is the xi component.
            let t1_core = if is_xi(design, a) {
                frob_dot(&bu, &apply_component(design, b, &bu))
            } else if is_xi(design, b) {
                frob_dot(&bu, &v_bu[a])
            } else {
                trace_b_block(design, prior, a, b)
            };

            let mut t1 = t1_core;
            if prior.t.is_some() {
                let cross = frob_dot(&v_t[a], &prior.apply_b(design, &v_t[b]));
                t1 += -2.0 * cross + (&e_t[a] * &e_t[b]).trace();
            }

            let k_cross = frob_dot(&v_k[a], &w0_v_k[b]);
            let k_quad = (&f[a] * &f[b]).trace();
            let val = t1 - 2.0 * k_cross + k_quad;
            s[(a, b)] = val;
            s[(b, a)] = val;
        }
    }
    let _ = r;
    Ok(MinqueSystem { s, q })
}

fn variance_floor(design: &DesignSystem) -> f64 {
    let n = design.h.len() as f64;
    let mean = design.h.sum() / n;
    let var = design.h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (1e-6 * var).max(1e-8)
}

fn solve_system(design: &DesignSystem, sys: &MinqueSystem) -> Result<(Vec<f64>, bool)> {
    let lu = sys.s.clone().lu();
    let sol = lu.solve(&sys.q).ok_or_else(|| {
        Error::Identifiability(
            "MINQUE system is singular; variance components are confounded (check that every \
             study has calibration pairs and at least two labs are present)"
                .into(),
        )
    })?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Identifiability(
            "MINQUE solution is not finite; components are confounded".into(),
        ));
    }
    let floor = variance_floor(design);
    let mut floored = false;
    let sigma2: Vec<f64> = sol
        .iter()
        .map(|&v| {
            if v < floor {
                floored = true;
                floor
            } else {
                v
            }
        })
        .collect();
    Ok((sigma2, floored))
}

/// Estimate `[sigma2_0..sigma2_L, sigma2_xi, sigma2_x]`.
pub fn minque_variance_components(
    design: &DesignSystem,
    options: &MinqueOptions,
) -> Result<MinqueResult> {
    if design.labs < 2 {
        return Err(Error::Identifiability(
            "at least two laboratories are required".into(),
        ));
    }
    if design.pair_index.is_empty() {
        return Err(Error::Identifiability(
            "no calibration pairs: sigma2_x is confounded with the lab variances".into(),
        ));
    }

    let mut prior = PriorPrecision::identity();
    let mut current: Option<Vec<f64>> = None;
    let mut floored = false;
    let mut iterations = 0;

    for _ in 0..options.max_iterations.max(1) {
        let sys = build_system(design, &prior)?;
        let (sigma2, f) = solve_system(design, &sys)?;
        floored = f;
        iterations += 1;
        let converged = match &current {
            Some(prev) => prev
                .iter()
                .zip(&sigma2)
                .all(|(p, c)| (p - c).abs() <= options.rel_tol * p.abs().max(1e-12)),
            None => false,
        };
        current = Some(sigma2.clone());
        if converged || iterations >= options.max_iterations {
            break;
        }
        prior = PriorPrecision::from_sigma2(design, &sigma2)?;
    }

    Ok(MinqueResult {
        sigma2: current.unwrap(),
        floored,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PooledDataset, SubjectRecord};
    use crate::design::assemble_design;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn subject(id: usize, study: usize, w: f64, local: f64, central: Option<f64>) -> SubjectRecord {
        SubjectRecord {
            subject_id: format!("s{id}"),
            study,
            outcome: 0,
            covariates_z: vec![],
            covariates_w: vec![w],
            local_measurement: local,
            central_measurement: central,
            true_value: None,
        }
    }

    fn small_dataset() -> PooledDataset {
        PooledDataset::new(
            vec![
                subject(0, 0, 0.3, 4.0, Some(3.5)),
                subject(1, 0, -0.2, 5.0, None),
                subject(2, 0, 1.1, 4.5, None),
                subject(3, 1, 0.7, 6.0, Some(5.5)),
                subject(4, 1, -0.9, 7.0, None),
                subject(5, 1, 0.1, 6.5, None),
            ],
            vec![1, 2],
        )
        .unwrap()
    }

    /// Dense component matrices, independent of the structured trace code.
    fn dense_component(design: &crate::design::DesignSystem, a: usize) -> DMatrix<f64> {
        let n = design.n_rows();
        let mut v = DMatrix::zeros(n, n);
        if a == design.labs {
            for i in 0..n {
                for j in 0..n {
                    if design.lab_of_row[i] == design.lab_of_row[j] {
                        v[(i, j)] = 1.0;
                    }
                }
            }
        } else if a == design.labs + 1 {
            for i in 0..n {
                for j in 0..n {
                    if design.subject_of_row[i] == design.subject_of_row[j] {
                        v[(i, j)] = 1.0;
                    }
                }
            }
        } else {
            for i in 0..n {
                if design.lab_of_row[i] == a {
                    v[(i, i)] = 1.0;
                }
            }
        }
        v
    }

    fn dense_system(
        design: &crate::design::DesignSystem,
        v0: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n = design.n_rows();
        let nc = design.labs + 2;
        let v0_inv = v0.clone().try_inverse().unwrap();
        let c = &design.c;
        let ctv0c_inv = (c.transpose() * &v0_inv * c).try_inverse().unwrap();
        let q_mat: DMatrix<f64> =
            &v0_inv - &v0_inv * c * ctv0c_inv * c.transpose() * &v0_inv;
        let comps: Vec<DMatrix<f64>> = (0..nc).map(|a| dense_component(design, a)).collect();
        let mut s = DMatrix::zeros(nc, nc);
        let mut q = DVector::zeros(nc);
        let h = DMatrix::from_column_slice(n, 1, design.h.as_slice());
        for a in 0..nc {
            let qa = &q_mat * &comps[a] * &q_mat;
            q[a] = (h.transpose() * &qa * &h)[(0, 0)];
            for b in 0..nc {
                s[(a, b)] = (&qa * &comps[b]).trace();
            }
        }
        (s, q)
    }

    #[test]
    fn system_matches_dense_oracle_identity_prior() {
        let ds = small_dataset();
        let design = assemble_design(&ds);
        let prior = PriorPrecision::identity();
        let sys = build_system(&design, &prior).unwrap();
        let v0 = DMatrix::identity(design.n_rows(), design.n_rows());
        let (s_expected, q_expected) = dense_system(&design, &v0);
        assert_relative_eq!(sys.s, s_expected, max_relative = 1e-8);
        assert_relative_eq!(sys.q, q_expected, max_relative = 1e-8);
    }

    #[test]
    fn system_matches_dense_oracle_structured_prior() {
        let ds = small_dataset();
        let design = assemble_design(&ds);
        let sigma2 = vec![2.0, 3.0, 4.0, 3.0, 5.0];
        let prior = PriorPrecision::from_sigma2(&design, &sigma2).unwrap();
        let sys = build_system(&design, &prior).unwrap();

        // Dense V0 from the definition.
        let n = design.n_rows();
        let mut v0 = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if design.lab_of_row[i] == design.lab_of_row[j] {
                    v0[(i, j)] += sigma2[design.labs];
                }
                if design.subject_of_row[i] == design.subject_of_row[j] {
                    v0[(i, j)] += sigma2[design.labs + 1];
                }
            }
            v0[(i, i)] += sigma2[design.lab_of_row[i]];
        }
        let (s_expected, q_expected) = dense_system(&design, &v0);
        assert_relative_eq!(sys.s, s_expected, max_relative = 1e-8);
        assert_relative_eq!(sys.q, q_expected, max_relative = 1e-8);
    }

    #[test]
    fn degenerate_constant_data_floors_all_components() {
        let mut ds = small_dataset();
        for s in &mut ds.subjects {
            s.local_measurement = 3.0;
            if s.central_measurement.is_some() {
                s.central_measurement = Some(3.0);
            }
            s.covariates_w = vec![0.0];
        }
        let design = assemble_design(&ds);
        let res = minque_variance_components(&design, &MinqueOptions::default());
        match res {
            Ok(r) => {
                assert!(r.floored);
                let floor = variance_floor(&design);
                assert!(r.sigma2.iter().all(|&v| v == floor));
            }
            // Constant data can also surface as a singular system.
            Err(Error::Identifiability(_)) => {}
            Err(e) => panic!("unexpected error: {e}"),
        }
    }

    /// Simulate from the model and check mean recovery across replicates.
    #[test]
    fn recovers_variance_components_on_average() {
        let truth: [f64; 5] = [2.0, 3.0, 4.0, 3.0, 5.0]; // sigma2_0, sigma2_1, sigma2_2, xi, x
        let m = 2;
        let n_per = 120;
        let n_cal = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reps = 60;
        let mut sums = vec![0.0; truth.len()];
        for _ in 0..reps {
            let xi: Vec<f64> = (0..3)
                .map(|_| truth[3].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut subjects = Vec::new();
            for j in 0..m {
                for k in 0..n_per {
                    let w: f64 = rng.sample(StandardNormal);
                    let x = 0.5 + 1.0 * w + truth[4].sqrt() * rng.sample::<f64, _>(StandardNormal);
                    let local = x
                        + xi[j + 1]
                        + truth[j + 1].sqrt() * rng.sample::<f64, _>(StandardNormal);
                    let central = if k < n_cal {
                        Some(x + xi[0] + truth[0].sqrt() * rng.sample::<f64, _>(StandardNormal))
                    } else {
                        None
                    };
                    subjects.push(subject(j * n_per + k, j, w, local, central));
                }
            }
            let ds = PooledDataset::new(subjects, vec![1, 2]).unwrap();
            let design = assemble_design(&ds);
            let res = minque_variance_components(&design, &MinqueOptions::default()).unwrap();
            for (s, v) in sums.iter_mut().zip(&res.sigma2) {
                *s += v;
            }
        }
        for (i, (&t, s)) in truth.iter().zip(&sums).enumerate() {
            let mean = s / reps as f64;
            assert!(
                (mean - t).abs() / t < 0.25,
                "component {i}: mean {mean} vs truth {t}"
            );
        }
    }

    #[test]
    fn iterated_refinement_stays_close_to_single_pass() {
        let ds = small_dataset();
        let design = assemble_design(&ds);
        let one = minque_variance_components(&design, &MinqueOptions::default());
        let iter = minque_variance_components(
            &design,
            &MinqueOptions {
                max_iterations: 3,
                rel_tol: 1e-6,
            },
        );
        // Both must run; with 6 subjects estimates are noisy so only sanity
        // check positivity.
        for r in [one, iter] {
            let r = r.unwrap();
            assert!(r.sigma2.iter().all(|&v| v > 0.0));
        }
    }
}
