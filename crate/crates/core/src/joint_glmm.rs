//! Joint penalized GLMM with spline fixed effects and one independent random
//! slope per eigenfunction.
//!
//! The linear predictor is
//! `η_i(s_k) = Σ_r x_ir Σ_m β_rm B_m(s_k) + Σ_l ξ_il φ_l(s_k)` with
//! difference penalties `τ_r β_rᵀ P β_r` on the fixed curves and
//! `ξ_il ~ N(0, λ_l)`. Newton systems are solved by eliminating each
//! subject's `L x L` score block, so the only dense system ever formed is the
//! `(p+1)M` Schur complement
//! `Σ_i x_i x_iᵀ ⊗ (G_i - F_i P_i⁻¹ F_iᵀ) + blockdiag(τ_r P)`, where
//! `G_i = Σ_k w B_k B_kᵀ`, `F_i = Σ_k w B_k φ_kᵀ` and
//! `P_i = Σ_k w φ_k φ_kᵀ + Λ⁻¹`.

use std::collections::HashMap;
use std::ops::Range;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{SparseRow, SplineBasis};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::fpca::{evaluate_eigenfunctions, EigenSystem};
use crate::ingest::LongDataset;

/// Number of fixed tiles used for every reduction over subjects. Keeping the
/// tiling independent of the thread count makes sums bit-stable.
const TILES: usize = 16;
const TAU_MIN: f64 = 1e-8;
const TAU_MAX: f64 = 1e12;
/// Variance components below this fraction of the largest are held at it.
const LAMBDA_FLOOR: f64 = 1e-8;
/// Penalized degrees of freedom below which a smoothing parameter counts as
/// settled at its upper boundary.
const SETTLED_PENALIZED_EDF: f64 = 1e-2;

/// Sparse description of the joint design.
#[derive(Debug, Clone)]
pub struct JointDesign {
    pub subjects: Vec<String>,
    pub grid: Vec<f64>,
    /// Names of the fixed-effect terms, starting with `intercept`.
    pub term_names: Vec<String>,
    /// `I x (p+1)` with a leading column of ones.
    pub covariates: DMatrix<f64>,
    pub outcomes: DMatrix<f64>,
    pub observed: DMatrix<bool>,
    pub fixed_basis: SplineBasis,
    /// Non-zero fixed basis values at each grid point.
    pub fixed_rows: Vec<SparseRow>,
    /// `K x L`.
    pub eigenfunctions: DMatrix<f64>,
    pub eigensystem: EigenSystem,
}

impl JointDesign {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    /// `p + 1`.
    pub fn n_terms(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_basis(&self) -> usize {
        self.fixed_basis.n_basis()
    }

    /// `(p + 1) M`.
    pub fn n_fixed(&self) -> usize {
        self.n_terms() * self.n_basis()
    }

    pub fn n_components(&self) -> usize {
        self.eigenfunctions.ncols()
    }

    /// Entries `(row, column, value)` of the `IK x (p+1)M` fixed block, with
    /// row `i K + k` and column `r M + m`.
    pub fn fixed_block_triplets(&self) -> Vec<(usize, usize, f64)> {
        let (n_k, m) = (self.n_grid(), self.n_basis());
        let mut out = Vec::new();
        for i in 0..self.n_subjects() {
            for (k, row) in self.fixed_rows.iter().enumerate() {
                for r in 0..self.n_terms() {
                    let x = self.covariates[(i, r)];
                    for &(b, v) in row {
                        out.push((i * n_k + k, r * m + b, x * v));
                    }
                }
            }
        }
        out
    }

    /// Entries of the block-diagonal `IK x IL` random block, with column
    /// `i L + l`.
    pub fn random_block_triplets(&self) -> Vec<(usize, usize, f64)> {
        let (n_k, n_l) = (self.n_grid(), self.n_components());
        let mut out = Vec::with_capacity(self.random_block_nnz());
        for i in 0..self.n_subjects() {
            for k in 0..n_k {
                for l in 0..n_l {
                    out.push((i * n_k + k, i * n_l + l, self.eigenfunctions[(k, l)]));
                }
            }
        }
        out
    }

    pub fn random_block_nnz(&self) -> usize {
        self.n_subjects() * self.n_grid() * self.n_components()
    }
}

/// Builds the joint design from a dataset, a fixed-effect basis and the
/// estimated eigensystem.
pub fn assemble_joint_design(data: &LongDataset, fixed_basis: &SplineBasis, es: &EigenSystem) -> Result<JointDesign> {
    let n_k = data.n_grid();
    if es.grid.len() != n_k {
        return Err(Error::argument(format!(
            "eigensystem grid has {} points, data grid has {n_k}",
            es.grid.len()
        )));
    }
    let scale = data.grid.iter().fold(1.0f64, |a, &s| a.max(s.abs()));
    if let Some(k) = (0..n_k).find(|&k| (es.grid[k] - data.grid[k]).abs() > 1e-10 * scale) {
        return Err(Error::argument(format!(
            "grid mismatch at index {k}: data {} vs eigensystem {}",
            data.grid[k], es.grid[k]
        )));
    }
    let fixed_rows = data.grid.iter().map(|&s| fixed_basis.eval_sparse(s)).collect::<Result<Vec<_>>>()?;
    let n_i = data.n_subjects();
    let covariates = DMatrix::from_fn(n_i, data.n_covariates() + 1, |i, r| {
        if r == 0 {
            1.0
        } else {
            data.covariates[(i, r - 1)]
        }
    });
    let mut term_names = vec!["intercept".to_string()];
    term_names.extend(data.covariate_names.iter().cloned());
    Ok(JointDesign {
        subjects: data.subjects.clone(),
        grid: data.grid.clone(),
        term_names,
        covariates,
        outcomes: data.outcomes.clone(),
        observed: data.observed.clone(),
        fixed_basis: fixed_basis.clone(),
        fixed_rows,
        eigenfunctions: es.eigenfunctions.clone(),
        eigensystem: es.clone(),
    })
}

/// Parameters of the penalized likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    /// Length `(p+1)M`, term-major.
    pub beta: DVector<f64>,
    /// `I x L`.
    pub scores: DMatrix<f64>,
}

impl JointState {
    pub fn zeros(design: &JointDesign) -> Self {
        JointState {
            beta: DVector::zeros(design.n_fixed()),
            scores: DMatrix::zeros(design.n_subjects(), design.n_components()),
        }
    }

    fn step(&self, dir: &JointState, t: f64) -> JointState {
        JointState { beta: &self.beta + t * &dir.beta, scores: &self.scores + t * &dir.scores }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Score variances `λ_l`.
    pub lambda: Vec<f64>,
    /// Smoothing parameters `τ_r`.
    pub tau: Vec<f64>,
    /// Residual variance for the Gaussian family, 1 otherwise.
    pub dispersion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointControls {
    pub max_outer: usize,
    /// Relative change in the variance components that ends the outer loop.
    pub outer_tol: f64,
    pub max_inner: usize,
    /// Relative objective change that ends the Newton iterations.
    pub inner_tol: f64,
    pub penalty_order: usize,
    pub initial_tau: f64,
    pub estimate_lambda: bool,
    pub estimate_smoothing: bool,
    pub estimate_dispersion: bool,
    /// Relative decrease of the restricted likelihood that counts as a
    /// divergent outer step.
    pub divergence_tol: f64,
}

impl Default for JointControls {
    fn default() -> Self {
        JointControls {
            max_outer: 50,
            outer_tol: 1e-4,
            max_inner: 100,
            inner_tol: 1e-10,
            penalty_order: 2,
            initial_tau: 1.0,
            estimate_lambda: true,
            estimate_smoothing: true,
            estimate_dispersion: true,
            divergence_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcFpcaFit {
    pub family: Family,
    pub fixed_basis: SplineBasis,
    pub term_names: Vec<String>,
    pub subjects: Vec<String>,
    /// `I x (p+1)` with a leading column of ones.
    pub covariates: DMatrix<f64>,
    /// `(p+1) x M`.
    pub beta_coefs: DMatrix<f64>,
    /// Fixed-effect block of the inverse penalized information.
    pub coef_cov: DMatrix<f64>,
    pub lambda: Vec<f64>,
    /// `I x L`.
    pub scores: DMatrix<f64>,
    pub eigensystem: EigenSystem,
    /// `τ_r`, one per term.
    pub smoothing: Vec<f64>,
    pub dispersion: f64,
    pub converged: bool,
    /// Conditional log-likelihood at the estimates.
    pub log_likelihood: f64,
    pub penalized_objective: f64,
    /// Restricted (Laplace) likelihood after each outer iteration, up to a
    /// constant.
    pub laml_trace: Vec<f64>,
    pub effective_df: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    /// Components whose variance was held at the lower boundary.
    pub boundary_components: Vec<usize>,
}

impl GcFpcaFit {
    pub fn n_components(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_terms(&self) -> usize {
        self.beta_coefs.nrows()
    }

    /// Covariance block of term `r`.
    pub fn term_cov(&self, r: usize) -> DMatrix<f64> {
        let m = self.fixed_basis.n_basis();
        self.coef_cov.view((r * m, r * m), (m, m)).into_owned()
    }
}

struct SubjectBlock {
    g: DMatrix<f64>,
    f: DMatrix<f64>,
    p: DMatrix<f64>,
    h: DVector<f64>,
    gxi: DVector<f64>,
}

struct Problem<'a> {
    design: &'a JointDesign,
    family: Family,
    penalty: DMatrix<f64>,
    rank: usize,
    /// Subjects sorted by id; every reduction visits them in this order so
    /// results do not depend on the input order.
    order: Vec<usize>,
}

/// Result of a Newton solve at a point.
struct Solved {
    dir: JointState,
    schur_chol: Cholesky<f64, Dyn>,
    /// Filled on request: posterior variances of the scores and `log|H|`.
    posterior: Option<(DMatrix<f64>, f64)>,
}

fn tiles(n: usize) -> Vec<Range<usize>> {
    let t = n.clamp(1, TILES);
    let size = n.div_ceil(t).max(1);
    (0..t).map(|j| (j * size).min(n)..((j + 1) * size).min(n)).filter(|r| !r.is_empty()).collect()
}

impl<'a> Problem<'a> {
    fn new(design: &'a JointDesign, family: &Family, penalty_order: usize) -> Result<Self> {
        let pen = design.fixed_basis.penalty(penalty_order)?;
        let mut order: Vec<usize> = (0..design.n_subjects()).collect();
        order.sort_by(|&a, &b| design.subjects[a].cmp(&design.subjects[b]));
        Ok(Problem { design, family: *family, rank: pen.rank(), penalty: pen.matrix, order })
    }

    fn family(&self, var: &VarianceComponents) -> Family {
        self.family.with_dispersion(var.dispersion)
    }

    fn check(&self, state: &JointState, var: &VarianceComponents) -> Result<()> {
        let d = self.design;
        if state.beta.len() != d.n_fixed() || state.scores.shape() != (d.n_subjects(), d.n_components()) {
            return Err(Error::argument("state dimensions do not match the design"));
        }
        if var.lambda.len() != d.n_components() || var.tau.len() != d.n_terms() {
            return Err(Error::argument("variance components do not match the design"));
        }
        if var.lambda.iter().any(|&l| !(l > 0.0)) || var.tau.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::argument("variances must be positive and smoothing parameters non-negative"));
        }
        if !(var.dispersion > 0.0) {
            return Err(Error::argument("dispersion must be positive"));
        }
        Ok(())
    }

    /// `K x (p+1)` values of the fixed curves on the grid.
    fn fixed_curves(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let d = self.design;
        let m = d.n_basis();
        DMatrix::from_fn(d.n_grid(), d.n_terms(), |k, r| {
            d.fixed_rows[k].iter().map(|&(b, v)| v * beta[r * m + b]).sum()
        })
    }

    fn eta_row(&self, fc: &DMatrix<f64>, scores: &DMatrix<f64>, i: usize, out: &mut [f64]) {
        let d = self.design;
        for (k, e) in out.iter_mut().enumerate() {
            let mut v = 0.0;
            for r in 0..d.n_terms() {
                v += d.covariates[(i, r)] * fc[(k, r)];
            }
            for l in 0..d.n_components() {
                v += scores[(i, l)] * d.eigenfunctions[(k, l)];
            }
            *e = v;
        }
    }

    fn fixed_penalty(&self, beta: &DVector<f64>, tau: &[f64]) -> f64 {
        let m = self.design.n_basis();
        tau.iter()
            .enumerate()
            .map(|(r, &t)| {
                let b = beta.rows(r * m, m);
                t * (b.transpose() * &self.penalty * b)[(0, 0)]
            })
            .sum()
    }

    fn objective(&self, state: &JointState, var: &VarianceComponents) -> f64 {
        let d = self.design;
        let fam = self.family(var);
        let fc = self.fixed_curves(&state.beta);
        let parts: Vec<f64> = tiles(d.n_subjects())
            .into_par_iter()
            .map(|range| {
                let mut eta = vec![0.0; d.n_grid()];
                let mut acc = 0.0;
                for &i in &self.order[range] {
                    self.eta_row(&fc, &state.scores, i, &mut eta);
                    for (k, &e) in eta.iter().enumerate() {
                        if d.observed[(i, k)] {
                            acc += fam.log_density(d.outcomes[(i, k)], e);
                        }
                    }
                    for (l, &lam) in var.lambda.iter().enumerate() {
                        acc -= 0.5 * state.scores[(i, l)].powi(2) / lam;
                    }
                }
                acc
            })
            .collect();
        parts.iter().sum::<f64>() - 0.5 * self.fixed_penalty(&state.beta, &var.tau)
    }

    fn log_likelihood(&self, state: &JointState, var: &VarianceComponents) -> f64 {
        let no_slopes = VarianceComponents { lambda: vec![f64::INFINITY; var.lambda.len()], ..var.clone() };
        let zero_tau = VarianceComponents { tau: vec![0.0; var.tau.len()], ..no_slopes };
        self.objective(state, &zero_tau)
    }

    fn gradient(&self, state: &JointState, var: &VarianceComponents) -> JointState {
        let d = self.design;
        let (m, n_l) = (d.n_basis(), d.n_components());
        let fam = self.family(var);
        let fc = self.fixed_curves(&state.beta);
        let parts: Vec<(DVector<f64>, Vec<(usize, DVector<f64>)>)> = tiles(d.n_subjects())
            .into_par_iter()
            .map(|range| {
                let mut eta = vec![0.0; d.n_grid()];
                let mut gb = DVector::zeros(d.n_fixed());
                let mut rows = Vec::new();
                for &i in &self.order[range] {
                    self.eta_row(&fc, &state.scores, i, &mut eta);
                    let mut h = DVector::zeros(m);
                    let mut gxi = DVector::zeros(n_l);
                    for (k, &e) in eta.iter().enumerate() {
                        if !d.observed[(i, k)] {
                            continue;
                        }
                        let res = (d.outcomes[(i, k)] - fam.mean(e)) / fam.phi();
                        for &(b, v) in &d.fixed_rows[k] {
                            h[b] += v * res;
                        }
                        for l in 0..n_l {
                            gxi[l] += d.eigenfunctions[(k, l)] * res;
                        }
                    }
                    for r in 0..d.n_terms() {
                        let x = d.covariates[(i, r)];
                        gb.rows_mut(r * m, m).axpy(x, &h, 1.0);
                    }
                    for l in 0..n_l {
                        gxi[l] -= state.scores[(i, l)] / var.lambda[l];
                    }
                    rows.push((i, gxi));
                }
                (gb, rows)
            })
            .collect();
        let mut out = JointState::zeros(d);
        for (gb, rows) in parts {
            out.beta += gb;
            for (i, g) in rows {
                out.scores.row_mut(i).copy_from(&g.transpose());
            }
        }
        for r in 0..d.n_terms() {
            let pb = &self.penalty * state.beta.rows(r * m, m);
            out.beta.rows_mut(r * m, m).axpy(-var.tau[r], &pb, 1.0);
        }
        out
    }

    fn subject_block(
        &self,
        fam: &Family,
        fc: &DMatrix<f64>,
        state: &JointState,
        var: &VarianceComponents,
        i: usize,
        eta: &mut [f64],
    ) -> SubjectBlock {
        let d = self.design;
        let (m, n_l) = (d.n_basis(), d.n_components());
        self.eta_row(fc, &state.scores, i, eta);
        let mut blk = SubjectBlock {
            g: DMatrix::zeros(m, m),
            f: DMatrix::zeros(m, n_l),
            p: DMatrix::zeros(n_l, n_l),
            h: DVector::zeros(m),
            gxi: DVector::zeros(n_l),
        };
        let phi = fam.phi();
        for (k, &e) in eta.iter().enumerate() {
            if !d.observed[(i, k)] {
                continue;
            }
            let w = fam.variance(e) / phi;
            let res = (d.outcomes[(i, k)] - fam.mean(e)) / phi;
            let row = &d.fixed_rows[k];
            for &(a, va) in row {
                blk.h[a] += va * res;
                for &(b, vb) in row {
                    blk.g[(a, b)] += w * va * vb;
                }
                for l in 0..n_l {
                    blk.f[(a, l)] += w * va * d.eigenfunctions[(k, l)];
                }
            }
            for l in 0..n_l {
                let fl = d.eigenfunctions[(k, l)];
                blk.gxi[l] += fl * res;
                for l2 in 0..n_l {
                    blk.p[(l, l2)] += w * fl * d.eigenfunctions[(k, l2)];
                }
            }
        }
        for l in 0..n_l {
            blk.p[(l, l)] += 1.0 / var.lambda[l];
            blk.gxi[l] -= state.scores[(i, l)] / var.lambda[l];
        }
        blk
    }

    fn chol(p: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(p).ok_or_else(|| Error::fit(format!("{what} is not positive definite")))
    }

    /// Solves `H d = g` by per-subject elimination. With `posterior` set the
    /// score posterior variances `diag(H⁻¹)` and `log|H|` are also returned.
    fn solve(&self, state: &JointState, var: &VarianceComponents, posterior: bool) -> Result<Solved> {
        let d = self.design;
        let (m, n_l, terms, q) = (d.n_basis(), d.n_components(), d.n_terms(), d.n_fixed());
        let fam = self.family(var);
        let fc = self.fixed_curves(&state.beta);
        let ranges = tiles(d.n_subjects());

        // Pass 1: accumulate the Schur complement and reduced right-hand side.
        let parts: Vec<Result<(DMatrix<f64>, DVector<f64>)>> = ranges
            .par_iter()
            .map(|range| {
                let mut eta = vec![0.0; d.n_grid()];
                let mut s = DMatrix::zeros(q, q);
                let mut rhs = DVector::zeros(q);
                for &i in &self.order[range.clone()] {
                    let blk = self.subject_block(&fam, &fc, state, var, i, &mut eta);
                    let (red, rhs_i) = if n_l == 0 {
                        (blk.g, blk.h)
                    } else {
                        let pc = Self::chol(blk.p, "score block")?;
                        let pinv_ft = pc.solve(&blk.f.transpose());
                        let pinv_g = pc.solve(&blk.gxi);
                        (&blk.g - &blk.f * pinv_ft, &blk.h - &blk.f * pinv_g)
                    };
                    for r in 0..terms {
                        let xr = d.covariates[(i, r)];
                        rhs.rows_mut(r * m, m).axpy(xr, &rhs_i, 1.0);
                        for r2 in 0..terms {
                            let x = xr * d.covariates[(i, r2)];
                            s.view_mut((r * m, r2 * m), (m, m)).zip_apply(&red, |a, b| *a += x * b);
                        }
                    }
                }
                Ok((s, rhs))
            })
            .collect();
        let mut schur = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for part in parts {
            let (s, r) = part?;
            schur += s;
            rhs += r;
        }
        for r in 0..terms {
            let t = var.tau[r];
            schur.view_mut((r * m, r * m), (m, m)).zip_apply(&self.penalty, |a, b| *a += t * b);
            let pb = &self.penalty * state.beta.rows(r * m, m);
            rhs.rows_mut(r * m, m).axpy(-t, &pb, 1.0);
        }
        let schur = 0.5 * (&schur + schur.transpose());
        let schur_chol = Self::chol(schur, "fixed-effect Schur complement")?;
        let dbeta = schur_chol.solve(&rhs);
        let schur_inv = posterior.then(|| schur_chol.inverse());

        // Pass 2: back-substitute the scores, recomputing each block.
        let parts: Vec<Result<Vec<(usize, DVector<f64>, DVector<f64>, f64)>>> = ranges
            .par_iter()
            .map(|range| {
                let mut eta = vec![0.0; d.n_grid()];
                let mut out = Vec::with_capacity(range.len());
                for &i in &self.order[range.clone()] {
                    if n_l == 0 {
                        out.push((i, DVector::zeros(0), DVector::zeros(0), 0.0));
                        continue;
                    }
                    let blk = self.subject_block(&fam, &fc, state, var, i, &mut eta);
                    let mut xb = DVector::zeros(m);
                    for r in 0..terms {
                        xb.axpy(d.covariates[(i, r)], &dbeta.rows(r * m, m), 1.0);
                    }
                    let pc = Self::chol(blk.p, "score block")?;
                    let dxi = pc.solve(&(&blk.gxi - blk.f.transpose() * xb));
                    let (vdiag, logdet) = match &schur_inv {
                        Some(sinv) => {
                            let mut e = DMatrix::zeros(q, n_l);
                            for r in 0..terms {
                                let x = d.covariates[(i, r)];
                                e.view_mut((r * m, 0), (m, n_l)).zip_apply(&blk.f, |a, b| *a = x * b);
                            }
                            let pinv = pc.inverse();
                            let ep = e * &pinv;
                            let v = &pinv + ep.transpose() * sinv * &ep;
                            let logdet = 2.0 * pc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                            (v.diagonal(), logdet)
                        }
                        None => (DVector::zeros(n_l), 0.0),
                    };
                    out.push((i, dxi, vdiag, logdet));
                }
                Ok(out)
            })
            .collect();
        let mut dscores = DMatrix::zeros(d.n_subjects(), n_l);
        let mut vdiag = DMatrix::zeros(d.n_subjects(), n_l);
        let mut logdet = 2.0 * schur_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        for part in parts {
            for (i, dxi, v, ld) in part? {
                dscores.row_mut(i).copy_from(&dxi.transpose());
                vdiag.row_mut(i).copy_from(&v.transpose());
                logdet += ld;
            }
        }
        Ok(Solved {
            dir: JointState { beta: dbeta, scores: dscores },
            schur_chol,
            posterior: posterior.then_some((vdiag, logdet)),
        })
    }

    /// Newton iterations with step halving; the objective never decreases.
    fn maximize(
        &self,
        mut state: JointState,
        var: &VarianceComponents,
        controls: &JointControls,
    ) -> Result<(JointState, f64, usize, Vec<f64>)> {
        let mut obj = self.objective(&state, var);
        if !obj.is_finite() {
            return Err(Error::fit("penalized objective is not finite at the starting values"));
        }
        let mut trace = vec![obj];
        let mut iters = 0;
        while iters < controls.max_inner {
            iters += 1;
            let dir = self.solve(&state, var, false)?.dir;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let cand = state.step(&dir, t);
                let val = self.objective(&cand, var);
                if val.is_finite() && val >= obj {
                    accepted = Some((cand, val));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, val)) = accepted else { break };
            let gain = val - obj;
            state = cand;
            obj = val;
            trace.push(obj);
            if gain <= controls.inner_tol * (obj.abs() + 1.0) {
                break;
            }
        }
        Ok((state, obj, iters, trace))
    }
}

/// Penalized log-likelihood
/// `Σ log f(y | η) - ½ Σ_r τ_r β_rᵀ P β_r - ½ Σ_il ξ_il² / λ_l`.
pub fn penalized_objective(
    design: &JointDesign,
    family: &Family,
    state: &JointState,
    var: &VarianceComponents,
    penalty_order: usize,
) -> Result<f64> {
    let prob = Problem::new(design, family, penalty_order)?;
    prob.check(state, var)?;
    Ok(prob.objective(state, var))
}

/// Gradient of [`penalized_objective`] in the same layout as the state.
pub fn penalized_gradient(
    design: &JointDesign,
    family: &Family,
    state: &JointState,
    var: &VarianceComponents,
    penalty_order: usize,
) -> Result<JointState> {
    let prob = Problem::new(design, family, penalty_order)?;
    prob.check(state, var)?;
    Ok(prob.gradient(state, var))
}

/// Full Newton direction `H⁻¹ g` of the penalized objective, computed by
/// per-subject Schur elimination.
pub fn newton_direction(
    design: &JointDesign,
    family: &Family,
    state: &JointState,
    var: &VarianceComponents,
    penalty_order: usize,
) -> Result<JointState> {
    let prob = Problem::new(design, family, penalty_order)?;
    prob.check(state, var)?;
    Ok(prob.solve(state, var, false)?.dir)
}

/// Maximizes the penalized objective at fixed variance components.
pub fn maximize_penalized(
    design: &JointDesign,
    family: &Family,
    start: JointState,
    var: &VarianceComponents,
    controls: &JointControls,
) -> Result<(JointState, Vec<f64>)> {
    let prob = Problem::new(design, family, controls.penalty_order)?;
    prob.check(&start, var)?;
    let (state, _, _, trace) = prob.maximize(start, var, controls)?;
    Ok((state, trace))
}

fn initial_state(design: &JointDesign, family: &Family) -> JointState {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (y, &obs) in design.outcomes.iter().zip(design.observed.iter()) {
        if obs {
            sum += y;
            n += 1;
        }
    }
    let mut state = JointState::zeros(design);
    let start = family.link(sum / n.max(1) as f64);
    state.beta.rows_mut(0, design.n_basis()).fill(start);
    state
}

fn observed_variance(design: &JointDesign) -> f64 {
    let vals: Vec<f64> =
        design.outcomes.iter().zip(design.observed.iter()).filter(|(_, &o)| o).map(|(&y, _)| y).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).max(1e-8)
}

fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(&a, &b)| if a == b { 0.0 } else { (b - a).abs() / a.abs().max(1e-300) })
        .fold(0.0, f64::max)
}

/// Everything the outer loop needs at one setting of the variance components.
struct OuterEval {
    state: JointState,
    objective: f64,
    iterations: usize,
    laml: f64,
    schur_inv: DMatrix<f64>,
    /// Per-subject posterior variances of the scores, `I x L`.
    post_var: DMatrix<f64>,
}

impl Problem<'_> {
    fn ordered_sum(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.order.iter().map(|&i| f(i)).sum()
    }

    /// Maximizes at `var` from `start` and evaluates the Laplace-approximate
    /// restricted likelihood, up to an additive constant.
    fn evaluate(&self, start: JointState, var: &VarianceComponents, controls: &JointControls) -> Result<OuterEval> {
        let (state, objective, iterations, _) = self.maximize(start, var, controls)?;
        let solved = self.solve(&state, var, true)?;
        let (post_var, logdet_h) = solved.posterior.expect("posterior requested");
        let mut laml = objective - 0.5 * logdet_h;
        for &t in &var.tau {
            if t > 0.0 {
                laml += 0.5 * self.rank as f64 * t.ln();
            }
        }
        laml -= 0.5 * self.design.n_subjects() as f64 * var.lambda.iter().map(|l| l.ln()).sum::<f64>();
        Ok(OuterEval { state, objective, iterations, laml, schur_inv: solved.schur_chol.inverse(), post_var })
    }

    /// `tr(V_rr P)` for each term.
    fn trace_vp(&self, schur_inv: &DMatrix<f64>) -> Vec<f64> {
        let m = self.design.n_basis();
        (0..self.design.n_terms())
            .map(|r| schur_inv.view((r * m, r * m), (m, m)).component_mul(&self.penalty).sum())
            .collect()
    }

    fn effective_df(&self, ev: &OuterEval, var: &VarianceComponents) -> f64 {
        let d = self.design;
        let mut edf = (d.n_fixed() + d.n_subjects() * d.n_components()) as f64;
        for (r, tr) in self.trace_vp(&ev.schur_inv).into_iter().enumerate() {
            edf -= var.tau[r] * tr;
        }
        for l in 0..d.n_components() {
            edf -= self.ordered_sum(|i| ev.post_var[(i, l)]) / var.lambda[l];
        }
        edf
    }

    fn residual_sum_of_squares(&self, state: &JointState) -> f64 {
        let d = self.design;
        let fc = self.fixed_curves(&state.beta);
        let mut eta = vec![0.0; d.n_grid()];
        let mut rss = 0.0;
        for &i in &self.order {
            self.eta_row(&fc, &state.scores, i, &mut eta);
            for (k, &e) in eta.iter().enumerate() {
                if d.observed[(i, k)] {
                    rss += (d.outcomes[(i, k)] - e).powi(2);
                }
            }
        }
        rss
    }
}

/// Fits the joint model, alternating penalized Newton maximization with
/// updates of the variance components. Score variances follow the EM update
/// `λ_l = Σ_i (ξ̂_il² + V_i,ll) / I`, smoothing parameters the Fellner–Schall
/// update, and the Gaussian dispersion `RSS / (n - edf)`. The step from the
/// current components to the update is taken in log scale and doubled while
/// the restricted likelihood keeps improving.
pub fn fit_joint(design: &JointDesign, family: &Family, controls: &JointControls) -> Result<GcFpcaFit> {
    let n_l = design.n_components();
    let terms = design.n_terms();
    let m = design.n_basis();
    let n_i = design.n_subjects();
    if n_i == 0 || design.observed.iter().all(|&o| !o) {
        return Err(Error::argument("design has no observations"));
    }
    for (y, &obs) in design.outcomes.iter().zip(design.observed.iter()) {
        if obs && !family.validate_outcome(*y) {
            return Err(Error::validation(format!("outcome {y} is outside the support of the {} family", family.kind)));
        }
    }
    let prob = Problem::new(design, family, controls.penalty_order)?;
    let estimate_dispersion = family.is_gaussian() && controls.estimate_dispersion;
    let lambda_scale = design.eigensystem.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let lambda_floor = LAMBDA_FLOOR * lambda_scale;
    let mut var = VarianceComponents {
        lambda: design.eigensystem.eigenvalues.iter().map(|&l| l.max(lambda_floor)).collect(),
        tau: vec![controls.initial_tau; terms],
        dispersion: if estimate_dispersion { observed_variance(design) } else { family.phi() },
    };
    let start = initial_state(design, family);
    prob.check(&start, &var)?;
    let n_obs = design.observed.iter().filter(|&&o| o).count() as f64;

    let mut cur = prob.evaluate(start, &var, controls)?;
    let mut n_inner = cur.iterations;
    let mut laml_trace = vec![cur.laml];
    let mut decreases = 0;
    let mut converged = false;
    let mut n_outer = 1;
    loop {
        debug!("outer {n_outer}: laml {:.8} lambda {:?} tau {:?} phi {}", cur.laml, var.lambda, var.tau, var.dispersion);
        let trace_vp = prob.trace_vp(&cur.schur_inv);
        let mut next = var.clone();
        if controls.estimate_lambda {
            for l in 0..n_l {
                let v = (prob.ordered_sum(|i| cur.state.scores[(i, l)].powi(2))
                    + prob.ordered_sum(|i| cur.post_var[(i, l)]))
                    / n_i as f64;
                next.lambda[l] = v.max(lambda_floor);
            }
        }
        // Terms whose penalized part has essentially no degrees of freedom
        // left sit at the τ → ∞ boundary and do not hold up convergence.
        let mut active_tau = Vec::with_capacity(terms);
        if controls.estimate_smoothing {
            for r in 0..terms {
                let b = cur.state.beta.rows(r * m, m);
                let bpb = (b.transpose() * &prob.penalty * b)[(0, 0)];
                let num = prob.rank as f64 - var.tau[r] * trace_vp[r];
                next.tau[r] = if bpb > 0.0 && num > 0.0 { (num / bpb).clamp(TAU_MIN, TAU_MAX) } else { TAU_MAX };
                if num >= SETTLED_PENALIZED_EDF {
                    active_tau.push(r);
                }
            }
        }
        if estimate_dispersion {
            let edf = prob.effective_df(&cur, &var);
            next.dispersion = (prob.residual_sum_of_squares(&cur.state) / (n_obs - edf).max(1.0)).max(1e-12);
        }
        let pick = |v: &[f64]| active_tau.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let change = relative_change(&var.lambda, &next.lambda)
            .max(relative_change(&pick(&var.tau), &pick(&next.tau)))
            .max(relative_change(&[var.dispersion], &[next.dispersion]));
        if change < controls.outer_tol {
            converged = true;
            break;
        }
        if n_outer >= controls.max_outer {
            break;
        }
        n_outer += 1;

        let mut best_var = next.clone();
        let mut best = prob.evaluate(cur.state.clone(), &next, controls)?;
        n_inner += best.iterations;
        if best.laml > cur.laml {
            let scaled = |a: f64, b: f64, alpha: f64| a * (b / a).powf(alpha);
            let mut alpha = 2.0;
            while alpha <= 16.0 {
                let trial = VarianceComponents {
                    lambda: (0..n_l).map(|l| scaled(var.lambda[l], next.lambda[l], alpha).max(lambda_floor)).collect(),
                    tau: (0..terms).map(|r| scaled(var.tau[r], next.tau[r], alpha).clamp(TAU_MIN, TAU_MAX)).collect(),
                    dispersion: scaled(var.dispersion, next.dispersion, alpha),
                };
                if trial.tau.iter().zip(&var.tau).any(|(t, v)| !(*t >= 0.0) || (*v == 0.0 && *t != 0.0)) {
                    break;
                }
                let ev = prob.evaluate(best.state.clone(), &trial, controls)?;
                n_inner += ev.iterations;
                if ev.laml <= best.laml {
                    break;
                }
                best = ev;
                best_var = trial;
                alpha *= 2.0;
            }
        }

        if best.laml <= cur.laml {
            // The update overshoots; back off toward the current components.
            let mut alpha = 0.5;
            let mut improved = false;
            while alpha >= 0.125 {
                let scaled = |a: f64, b: f64| a * (b / a).powf(alpha);
                let trial = VarianceComponents {
                    lambda: (0..n_l).map(|l| scaled(var.lambda[l], next.lambda[l]).max(lambda_floor)).collect(),
                    tau: (0..terms).map(|r| scaled(var.tau[r], next.tau[r]).clamp(TAU_MIN, TAU_MAX)).collect(),
                    dispersion: scaled(var.dispersion, next.dispersion),
                };
                let ev = prob.evaluate(cur.state.clone(), &trial, controls)?;
                n_inner += ev.iterations;
                if ev.laml > cur.laml {
                    best = ev;
                    best_var = trial;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !improved && (cur.laml - best.laml) / cur.laml.abs().max(1.0) < 1e-3 {
                // No gain along the update direction: a stationary point of
                // the restricted likelihood.
                debug!("outer {n_outer}: no restricted-likelihood gain along the update");
                converged = true;
                break;
            }
        }
        if (cur.laml - best.laml) / cur.laml.abs().max(1.0) > controls.divergence_tol {
            decreases += 1;
        } else {
            decreases = 0;
        }
        laml_trace.push(best.laml);
        if decreases >= 2 {
            return Err(Error::Convergence {
                message: format!("restricted likelihood decreased in two consecutive outer steps ({n_outer})"),
                trace: laml_trace,
            });
        }
        var = best_var;
        cur = best;
    }
    if !converged {
        warn!("joint fit stopped after {n_outer} outer iterations without converging");
    }
    let boundary_components: Vec<usize> = (0..n_l).filter(|&l| var.lambda[l] <= lambda_floor).collect();
    if !boundary_components.is_empty() {
        warn!("score variances at the lower boundary for components {boundary_components:?}");
    }
    let edf = prob.effective_df(&cur, &var);
    let state = cur.state;
    let beta_coefs = DMatrix::from_fn(terms, m, |r, j| state.beta[r * m + j]);
    let coef_cov = 0.5 * (&cur.schur_inv + cur.schur_inv.transpose());
    Ok(GcFpcaFit {
        family: prob.family(&var),
        fixed_basis: design.fixed_basis.clone(),
        term_names: design.term_names.clone(),
        subjects: design.subjects.clone(),
        covariates: design.covariates.clone(),
        beta_coefs,
        coef_cov,
        lambda: var.lambda.clone(),
        log_likelihood: prob.log_likelihood(&state, &var),
        scores: state.scores,
        eigensystem: design.eigensystem.clone(),
        smoothing: var.tau.clone(),
        dispersion: var.dispersion,
        converged,
        penalized_objective: cur.objective,
        laml_trace,
        effective_df: edf,
        n_outer,
        n_inner,
        boundary_components,
    })
}

/// Pointwise Wald band for one fixed-effect curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectCurve {
    pub term: String,
    pub points: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn check_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::argument(format!("confidence level must be in (0, 1), got {level}")));
    }
    Ok(Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 * (1.0 + level)))
}

/// `sqrt(b_jᵀ V b_j)` for every row `b_j` of `rows`.
pub fn pointwise_se(rows: &DMatrix<f64>, cov: &DMatrix<f64>) -> Vec<f64> {
    let bv = rows * cov;
    (0..rows.nrows()).map(|j| bv.row(j).dot(&rows.row(j)).max(0.0).sqrt()).collect()
}

fn term_curve(fit: &GcFpcaFit, r: usize, points: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    if r >= fit.n_terms() {
        return Err(Error::argument(format!("term index {r} out of range (p + 1 = {})", fit.n_terms())));
    }
    let b = fit.fixed_basis.evaluate(points)?;
    let est = (&b * fit.beta_coefs.row(r).transpose()).iter().copied().collect();
    let se = pointwise_se(&b, &fit.term_cov(r));
    Ok((b, est, se))
}

/// Estimates and pointwise Wald intervals for every fixed-effect curve.
pub fn fixed_effect_curves(fit: &GcFpcaFit, points: &[f64], level: f64) -> Result<Vec<FixedEffectCurve>> {
    let z = check_level(level)?;
    (0..fit.n_terms())
        .map(|r| {
            let (_, estimate, se) = term_curve(fit, r, points)?;
            let lower = estimate.iter().zip(&se).map(|(e, s)| e - z * s).collect();
            let upper = estimate.iter().zip(&se).map(|(e, s)| e + z * s).collect();
            Ok(FixedEffectCurve { term: fit.term_names[r].clone(), points: points.to_vec(), estimate, se, lower, upper })
        })
        .collect()
}

/// Simultaneous band from the max-statistic quantile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaBand {
    pub term: String,
    pub points: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Multiplier applied to `se`.
    pub quantile: f64,
    pub pointwise_quantile: f64,
}

/// Square root `R` with `R Rᵀ = cov`, falling back to the eigen square root
/// when `cov` is singular.
fn cov_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return ch.l();
    }
    warn!("coefficient covariance is singular, using its eigen square root");
    let eig = cov.clone().symmetric_eigen();
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sq)
}

/// Level-quantile of `max_j |b_jᵀ u| / se_j` for `u ~ N(0, cov)`, floored at
/// the pointwise normal quantile. Rows with zero standard error are ignored.
/// Draw `d` uses the ChaCha stream `d` of `seed`, so the result does not
/// depend on scheduling.
pub fn simultaneous_quantile(
    rows: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    level: f64,
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    let z = check_level(level)?;
    if n_draws < 1000 {
        return Err(Error::argument(format!("need at least 1000 draws, got {n_draws}")));
    }
    if rows.ncols() != cov.nrows() || !cov.is_square() {
        return Err(Error::argument("basis rows and covariance dimensions differ"));
    }
    let se = pointwise_se(rows, cov);
    let scale = se.iter().cloned().fold(0.0, f64::max);
    let active: Vec<usize> = (0..se.len()).filter(|&j| se[j] > 1e-12 * scale.max(1e-300) && se[j] > 0.0).collect();
    if active.is_empty() {
        return Ok(z);
    }
    let sqrt = cov_sqrt(cov);
    let dim = cov.nrows();
    let mut maxima: Vec<f64> = (0..n_draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            let u = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw = &sqrt * u;
            let vals = rows * draw;
            active.iter().map(|&j| vals[j].abs() / se[j]).fold(0.0, f64::max)
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let idx = ((level * n_draws as f64).ceil() as usize).clamp(1, n_draws) - 1;
    Ok(maxima[idx].max(z))
}

/// Correlation- and multiplicity-adjusted band for term `r`.
pub fn cma_bands(fit: &GcFpcaFit, r: usize, points: &[f64], level: f64, n_draws: usize, seed: u64) -> Result<CmaBand> {
    let z = check_level(level)?;
    let (b, estimate, se) = term_curve(fit, r, points)?;
    let q = simultaneous_quantile(&b, &fit.term_cov(r), level, n_draws, seed)?;
    let lower = estimate.iter().zip(&se).map(|(e, s)| e - q * s).collect();
    let upper = estimate.iter().zip(&se).map(|(e, s)| e + q * s).collect();
    Ok(CmaBand {
        term: fit.term_names[r].clone(),
        points: points.to_vec(),
        estimate,
        se,
        lower,
        upper,
        quantile: q,
        pointwise_quantile: z,
    })
}

/// `η̂_i(s)` for the requested subjects, one row each.
pub fn predict_linear_predictor<S: AsRef<str>>(fit: &GcFpcaFit, subjects: &[S], points: &[f64]) -> Result<DMatrix<f64>> {
    let index: HashMap<&str, usize> = fit.subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let rows = subjects
        .iter()
        .map(|s| {
            index
                .get(s.as_ref())
                .copied()
                .ok_or_else(|| Error::argument(format!("unknown subject '{}'", s.as_ref())))
        })
        .collect::<Result<Vec<_>>>()?;
    let curves = fit.fixed_basis.evaluate(points)? * fit.beta_coefs.transpose();
    let phi = if fit.n_components() > 0 {
        evaluate_eigenfunctions(&fit.eigensystem, points)?
    } else {
        DMatrix::zeros(points.len(), 0)
    };
    let x = DMatrix::from_fn(rows.len(), fit.n_terms(), |j, r| fit.covariates[(rows[j], r)]);
    let xi = DMatrix::from_fn(rows.len(), fit.n_components(), |j, l| fit.scores[(rows[j], l)]);
    Ok(x * curves.transpose() + xi * phi.transpose())
}

/// `μ̂_i(s) = g⁻¹(η̂_i(s))`.
pub fn predict_mean<S: AsRef<str>>(fit: &GcFpcaFit, subjects: &[S], points: &[f64]) -> Result<DMatrix<f64>> {
    Ok(predict_linear_predictor(fit, subjects, points)?.map(|e| fit.family.mean(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpca::{estimate_eigensystem, FpcaOptions, Truncation};
    use crate::local_glmm::RandomEffectMatrix;
    use approx::assert_abs_diff_eq;

    fn grid(k: usize) -> Vec<f64> {
        (1..=k).map(|j| j as f64 / k as f64).collect()
    }

    fn toy_eigensystem(k: usize, l: usize) -> EigenSystem {
        let g = grid(k);
        let y = DMatrix::from_fn(12, k, |i, j| {
            let a = ((i * 7 + 3) % 11) as f64 - 5.0;
            let b = ((i * 5 + 1) % 7) as f64 - 3.0;
            a * (std::f64::consts::PI * g[j]).sin() + 0.4 * b * (3.0 * g[j]).cos()
        });
        let opts = FpcaOptions { truncation: Truncation::FixedL(l), n_smooth_basis: Some(k.min(6)), ..Default::default() };
        estimate_eigensystem(&RandomEffectMatrix::unmasked(y), &g, &opts).unwrap()
    }

    fn toy_dataset(n_i: usize, k: usize) -> LongDataset {
        let outcomes = DMatrix::from_fn(n_i, k, |i, j| ((i + 2 * j) % 3 == 0) as u8 as f64);
        let cov = DMatrix::from_fn(n_i, 1, |i, _| (i % 2) as f64);
        LongDataset::new((0..n_i).map(|i| format!("s{i}")).collect(), grid(k), outcomes, cov).unwrap()
    }

    #[test]
    fn random_block_structure() {
        let mut es = hand_fit().eigensystem;
        es.grid = grid(3);
        es.eigenfunctions = DMatrix::from_column_slice(3, 1, &[1.0, -0.5, 0.25]);
        let data = toy_dataset(2, 3);
        let basis = SplineBasis::clamped(grid(3)[0], 1.0, 4, 3).unwrap();
        let design = assemble_joint_design(&data, &basis, &es).unwrap();
        let trip = design.random_block_triplets();
        assert_eq!(trip.len(), 6);
        assert_eq!(design.random_block_nnz(), 6);
        let cols: std::collections::BTreeSet<usize> = trip.iter().map(|t| t.1).collect();
        assert_eq!(cols.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        for &(row, col, _) in &trip {
            assert_eq!(row / 3, col);
        }
    }

    #[test]
    fn constant_basis_gives_column_of_ones() {
        let es = toy_eigensystem(5, 1);
        let data = toy_dataset(3, 5);
        let data = LongDataset::new(data.subjects.clone(), data.grid.clone(), data.outcomes.clone(), DMatrix::zeros(3, 0))
            .unwrap();
        let basis = SplineBasis::clamped(0.0, 1.0, 1, 0).unwrap();
        let design = assemble_joint_design(&data, &basis, &es).unwrap();
        let trip = design.fixed_block_triplets();
        assert_eq!(trip.len(), 15);
        assert!(trip.iter().all(|&(_, c, v)| c == 0 && v == 1.0));
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let es = toy_eigensystem(6, 1);
        let data = toy_dataset(3, 5);
        let basis = SplineBasis::clamped(0.0, 1.0, 4, 3).unwrap();
        assert!(matches!(assemble_joint_design(&data, &basis, &es), Err(Error::Argument(_))));
    }

    fn hand_fit() -> GcFpcaFit {
        // M = 2 linear basis on [0, 1], one subject, L = 1.
        let basis = SplineBasis::clamped(0.0, 1.0, 2, 1).unwrap();
        let es = EigenSystem {
            grid: vec![0.0, 1.0],
            eigenfunctions: DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            spline_coefs: DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            eigenvalues: vec![0.5],
            all_eigenvalues: vec![0.5],
            pve: 1.0,
            n_smooth_basis: 2,
            smoothing_parameter: 0.0,
            basis: basis.clone(),
        };
        GcFpcaFit {
            family: Family::bernoulli(),
            fixed_basis: basis,
            term_names: vec!["intercept".into(), "x".into()],
            subjects: vec!["a".into()],
            covariates: DMatrix::from_row_slice(1, 2, &[1.0, 3.0]),
            beta_coefs: DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.25, 0.75]),
            coef_cov: DMatrix::zeros(4, 4),
            lambda: vec![0.5],
            scores: DMatrix::from_element(1, 1, -0.4),
            eigensystem: es,
            smoothing: vec![1.0, 1.0],
            dispersion: 1.0,
            converged: true,
            log_likelihood: 0.0,
            penalized_objective: 0.0,
            laml_trace: vec![],
            effective_df: 0.0,
            n_outer: 0,
            n_inner: 0,
            boundary_components: vec![],
        }
    }

    #[test]
    fn prediction_matches_hand_arithmetic() {
        let fit = hand_fit();
        let eta = predict_linear_predictor(&fit, &["a"], &[0.0, 0.25, 1.0]).unwrap();
        // s = 0.25: B = (0.75, 0.25); β0 = 0.125, β1 = 0.375; φ = 1.25.
        let expect = [0.5 + 3.0 * 0.25 - 0.4, 0.125 + 3.0 * 0.375 - 0.4 * 1.25, -1.0 + 3.0 * 0.75 - 0.8];
        for (j, e) in expect.iter().enumerate() {
            assert_abs_diff_eq!(eta[(0, j)], *e, epsilon = 1e-12);
        }
        let mu = predict_mean(&fit, &["a"], &[0.25]).unwrap();
        assert_abs_diff_eq!(mu[(0, 0)], 1.0 / (1.0 + (-expect[1]).exp()), epsilon = 1e-12);
        assert!(predict_linear_predictor(&fit, &["b"], &[0.5]).is_err());

        let mut zero = fit.clone();
        zero.scores.fill(0.0);
        let eta0 = predict_linear_predictor(&zero, &["a"], &[0.25]).unwrap();
        assert_abs_diff_eq!(eta0[(0, 0)], 0.125 + 3.0 * 0.375, epsilon = 1e-12);
    }

    #[test]
    fn zero_covariance_collapses_the_bands() {
        let fit = hand_fit();
        let pts = [0.0, 0.3, 0.9];
        let curves = fixed_effect_curves(&fit, &pts, 0.95).unwrap();
        for c in &curves {
            assert_eq!(c.lower, c.estimate);
            assert_eq!(c.upper, c.estimate);
        }
        let band = cma_bands(&fit, 1, &pts, 0.95, 1000, 1).unwrap();
        assert_eq!(band.lower, band.estimate);
    }

    #[test]
    fn unit_se_gives_normal_half_width() {
        let mut fit = hand_fit();
        fit.coef_cov = DMatrix::identity(4, 4);
        let curves = fixed_effect_curves(&fit, &[0.0, 1.0], 0.95).unwrap();
        for c in &curves {
            for j in 0..2 {
                assert_abs_diff_eq!(c.se[j], 1.0, epsilon = 1e-15);
                assert_abs_diff_eq!(c.upper[j] - c.estimate[j], 1.959964, epsilon = 1e-6);
            }
        }
        assert!(fixed_effect_curves(&fit, &[0.5], 1.0).is_err());
    }

    #[test]
    fn sidak_quantile_for_two_independent_points() {
        let rows = DMatrix::identity(2, 2);
        let q = simultaneous_quantile(&rows, &DMatrix::identity(2, 2), 0.95, 100_000, 7).unwrap();
        // P(max(|Z1|, |Z2|) ≤ q) = 0.95 gives q = Φ⁻¹((1 + sqrt(0.95)) / 2).
        let exact = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 * (1.0 + 0.95f64.sqrt()));
        assert!((q - exact).abs() < 0.02, "q = {q}, exact = {exact}");
        let one = simultaneous_quantile(&DMatrix::identity(1, 1), &DMatrix::identity(1, 1), 0.95, 20_000, 3).unwrap();
        assert!((one - 1.959964).abs() < 0.03);
        assert!(one >= 1.959_963_9);
        assert!(simultaneous_quantile(&rows, &DMatrix::identity(2, 2), 0.95, 999, 7).is_err());
    }

    #[test]
    fn singular_covariance_uses_eigen_root() {
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let q = simultaneous_quantile(&rows, &cov, 0.95, 2000, 5).unwrap();
        // All three statistics equal |Z| up to scale, so q is the pointwise quantile.
        assert!((q - 1.959964).abs() < 0.1);
    }
}
