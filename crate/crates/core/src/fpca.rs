//! Smoothed covariance of the subject-level random effects and its
//! eigendecomposition.
//!
//! The empirical covariance `C` of the demeaned BLUP matrix is smoothed as
//! `S C S` with the penalized-spline row smoother
//! `S = B (BᵀB + λP)⁻¹ Bᵀ`. Writing `BᵀB = RRᵀ` and diagonalizing
//! `R⁻¹ P R⁻ᵀ = V diag(d) Vᵀ` gives `S = A diag(1 / (1 + λ d)) Aᵀ` with
//! orthonormal `A = B R⁻ᵀ V`, so the whole smoother, its GCV score and the
//! eigenproblem live in the `c`-dimensional coefficient space and cost
//! `O(IKc)` to assemble.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use crate::local_glmm::RandomEffectMatrix;
use crate::optim::brent_max;

/// Largest fraction of masked entries tolerated in a partially observed
/// column.
pub const MAX_MASKED_FRACTION: f64 = 0.2;

pub const DEFAULT_PVE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Pve(f64),
    FixedL(usize),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Pve(DEFAULT_PVE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Smoothing parameter chosen by GCV on the covariance entries.
    Gcv,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpcaOptions {
    /// Smoother basis dimension `c`; defaults to `min(35, ⌈K/4⌉)`.
    pub n_smooth_basis: Option<usize>,
    pub truncation: Truncation,
    pub smoothing: Smoothing,
}

impl Default for FpcaOptions {
    fn default() -> Self {
        FpcaOptions { n_smooth_basis: None, truncation: Truncation::default(), smoothing: Smoothing::Gcv }
    }
}

pub fn default_smooth_basis(n_grid: usize) -> usize {
    35.min(n_grid.div_ceil(4)).max(4).min(n_grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub grid: Vec<f64>,
    /// `K x L`, normalized so that `(1/K) Σ_k φ_l(s_k) φ_m(s_k) = δ_lm`.
    pub eigenfunctions: DMatrix<f64>,
    /// `c x L` coefficients on `basis`.
    pub spline_coefs: DMatrix<f64>,
    /// Retained eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Every non-negative eigenvalue of the smoothed covariance operator.
    pub all_eigenvalues: Vec<f64>,
    /// Fraction of variance captured by the retained components.
    pub pve: f64,
    pub n_smooth_basis: usize,
    pub smoothing_parameter: f64,
    pub basis: SplineBasis,
}

impl EigenSystem {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Keeps the leading `l` components.
    pub fn truncated(&self, l: usize) -> Result<EigenSystem> {
        if l > self.n_components() {
            return Err(Error::argument(format!("cannot keep {l} of {} components", self.n_components())));
        }
        let mut out = self.clone();
        out.eigenfunctions = self.eigenfunctions.columns(0, l).into_owned();
        out.spline_coefs = self.spline_coefs.columns(0, l).into_owned();
        out.eigenvalues.truncate(l);
        let total: f64 = self.all_eigenvalues.iter().sum();
        out.pve = if total > 0.0 { out.eigenvalues.iter().sum::<f64>() / total } else { 0.0 };
        Ok(out)
    }

    /// `Σ_l λ_l φ_l(u) φ_l(v)` on the grid.
    pub fn covariance(&self) -> DMatrix<f64> {
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        &self.eigenfunctions * lam * self.eigenfunctions.transpose()
    }
}

/// Fills masked entries: failed-bin columns are interpolated linearly from
/// the nearest fitted columns, other masked entries take the column mean.
fn impute(bhat: &RandomEffectMatrix) -> Result<DMatrix<f64>> {
    let (n_i, n_k) = bhat.values.shape();
    let mut out = bhat.values.clone();
    let mut full_cols = Vec::new();
    for k in 0..n_k {
        let masked = (0..n_i).filter(|&i| bhat.mask[(i, k)]).count();
        if masked == n_i {
            full_cols.push(k);
            continue;
        }
        if masked as f64 > MAX_MASKED_FRACTION * n_i as f64 {
            return Err(Error::argument(format!(
                "column {k} has {masked} of {n_i} entries masked (limit {MAX_MASKED_FRACTION})"
            )));
        }
        if masked > 0 {
            let mean = (0..n_i).filter(|&i| !bhat.mask[(i, k)]).map(|i| out[(i, k)]).sum::<f64>()
                / (n_i - masked) as f64;
            for i in 0..n_i {
                if bhat.mask[(i, k)] {
                    out[(i, k)] = mean;
                }
            }
        }
    }
    if full_cols.len() == n_k {
        return Err(Error::NoVariation);
    }
    let valid: Vec<usize> = (0..n_k).filter(|k| !full_cols.contains(k)).collect();
    for &k in &full_cols {
        let left = valid.iter().rev().find(|&&v| v < k).copied();
        let right = valid.iter().find(|&&v| v > k).copied();
        for i in 0..n_i {
            out[(i, k)] = match (left, right) {
                (Some(l), Some(r)) => {
                    let t = (k - l) as f64 / (r - l) as f64;
                    (1.0 - t) * out[(i, l)] + t * out[(i, r)]
                }
                (Some(l), None) => out[(i, l)],
                (None, Some(r)) => out[(i, r)],
                (None, None) => unreachable!(),
            };
        }
    }
    Ok(out)
}

/// Smoother in Demmler–Reinsch form.
struct DemmlerReinsch {
    /// `K x c` with orthonormal columns.
    a: DMatrix<f64>,
    /// Penalty eigenvalues `d_j >= 0`.
    d: Vec<f64>,
    /// Maps coordinates in `A` to spline coefficients: `R⁻ᵀ V`.
    to_coefs: DMatrix<f64>,
}

impl DemmlerReinsch {
    fn new(basis: &SplineBasis, grid: &[f64]) -> Result<Self> {
        let b = basis.evaluate(grid)?;
        let btb = b.transpose() * &b;
        let chol = btb.cholesky().ok_or_else(|| {
            Error::argument("smoothing basis is rank deficient on the grid (reduce c)")
        })?;
        let r = chol.l();
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::argument("smoothing basis Gram matrix is singular"))?;
        let p = basis.penalty(2)?.matrix;
        let m = &r_inv * p * r_inv.transpose();
        let m = 0.5 * (&m + m.transpose());
        let eig = m.symmetric_eigen();
        let to_coefs = r_inv.transpose() * &eig.eigenvectors;
        let a = &b * &to_coefs;
        let d = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
        Ok(DemmlerReinsch { a, d, to_coefs })
    }
}

/// GCV score of the sandwich smoother applied to the covariance entries.
struct CovarianceGcv<'a> {
    /// `Aᵀ C A`.
    proj: &'a DMatrix<f64>,
    /// `‖C‖²_F − ‖Aᵀ C A‖²_F`, the part no smoother in the span can fit.
    outside: f64,
    d: &'a [f64],
    n_entries: f64,
}

impl CovarianceGcv<'_> {
    fn score(&self, lambda: f64) -> f64 {
        let s: Vec<f64> = self.d.iter().map(|&d| 1.0 / (1.0 + lambda * d)).collect();
        let c = s.len();
        let mut rss = self.outside;
        for j in 0..c {
            for k in 0..c {
                let r = self.proj[(j, k)] * (1.0 - s[j] * s[k]);
                rss += r * r;
            }
        }
        let tr: f64 = s.iter().sum::<f64>().powi(2);
        let denom = 1.0 - tr / self.n_entries;
        rss / self.n_entries / (denom * denom)
    }
}

/// Estimates eigenfunctions and eigenvalues of the random-effect covariance.
pub fn estimate_eigensystem(
    bhat: &RandomEffectMatrix,
    grid: &[f64],
    options: &FpcaOptions,
) -> Result<EigenSystem> {
    let (n_i, n_k) = bhat.values.shape();
    if n_i < 2 {
        return Err(Error::argument("need at least two subjects"));
    }
    if grid.len() != n_k {
        return Err(Error::argument(format!("grid has {} points, matrix has {n_k} columns", grid.len())));
    }
    let c = options.n_smooth_basis.unwrap_or_else(|| default_smooth_basis(n_k));
    if c > n_k {
        return Err(Error::argument(format!("smoothing basis dimension {c} exceeds K = {n_k}")));
    }
    if c < 4 {
        return Err(Error::argument("smoothing basis needs at least 4 cubic functions"));
    }

    let mut y = impute(bhat)?;
    for k in 0..n_k {
        let mean = y.column(k).mean();
        y.column_mut(k).add_scalar_mut(-mean);
    }
    let scale = y.amax();
    if !(scale > 1e-14) {
        return Err(Error::NoVariation);
    }

    let basis = SplineBasis::clamped(grid[0], grid[n_k - 1], c, 3)?;
    let dr = DemmlerReinsch::new(&basis, grid)?;
    let denom = (n_i - 1) as f64;

    // Aᵀ C A = (Y A)ᵀ (Y A) / (I - 1), never forming the K x K covariance.
    let ya = &y * &dr.a;
    let proj = ya.transpose() * &ya / denom;
    let total_sq = if n_i <= n_k {
        let g = &y * y.transpose();
        g.norm_squared()
    } else {
        let g = y.transpose() * &y;
        g.norm_squared()
    } / (denom * denom);
    let outside = (total_sq - proj.norm_squared()).max(0.0);

    let lambda = match options.smoothing {
        Smoothing::Fixed(l) => {
            if !(l >= 0.0) {
                return Err(Error::argument("smoothing parameter must be non-negative"));
            }
            l
        }
        Smoothing::Gcv => {
            let gcv = CovarianceGcv { proj: &proj, outside, d: &dr.d, n_entries: (n_k * n_k) as f64 };
            let f = |log_l: f64| -gcv.score(10f64.powf(log_l)).ln();
            let grid_l: Vec<f64> = (0..=64).map(|j| -8.0 + 0.25 * j as f64).collect();
            let best = grid_l
                .iter()
                .map(|&l| f(l))
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            let lo = grid_l[best.saturating_sub(1)];
            let hi = grid_l[(best + 1).min(grid_l.len() - 1)];
            10f64.powf(brent_max(f, lo, hi, 1e-8, 100).x)
        }
    };

    let shrink = DVector::from_iterator(c, dr.d.iter().map(|&d| 1.0 / (1.0 + lambda * d)));
    let smoothed = DMatrix::from_fn(c, c, |j, k| shrink[j] * proj[(j, k)] * shrink[k]);
    let smoothed = 0.5 * (&smoothed + smoothed.transpose());
    let eig = smoothed.symmetric_eigen();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let all_eigenvalues: Vec<f64> =
        order.iter().map(|&j| (eig.eigenvalues[j] / n_k as f64).max(0.0)).collect();
    let total: f64 = all_eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NoVariation);
    }

    let n_comp = match options.truncation {
        Truncation::Pve(thr) => {
            if !(thr > 0.0 && thr <= 1.0) {
                return Err(Error::argument(format!("PVE threshold must be in (0, 1], got {thr}")));
            }
            select_by_pve(&all_eigenvalues, thr)
        }
        Truncation::FixedL(l) => {
            if l == 0 || l > c {
                return Err(Error::argument(format!("fixed L = {l} must be in 1..={c}")));
            }
            l
        }
    };
    let eigenvalues = all_eigenvalues[..n_comp].to_vec();
    let pve = eigenvalues.iter().sum::<f64>() / total;

    let sqrt_k = (n_k as f64).sqrt();
    let mut w = DMatrix::zeros(c, n_comp);
    for (l, &j) in order.iter().take(n_comp).enumerate() {
        w.set_column(l, &eig.eigenvectors.column(j));
    }
    let mut eigenfunctions = (&dr.a * &w) * sqrt_k;
    let mut spline_coefs = (&dr.to_coefs * &w) * sqrt_k;
    for l in 0..n_comp {
        if canonical_sign(eigenfunctions.column(l).as_slice()) < 0.0 {
            eigenfunctions.column_mut(l).neg_mut();
            spline_coefs.column_mut(l).neg_mut();
        }
    }

    Ok(EigenSystem {
        grid: grid.to_vec(),
        eigenfunctions,
        spline_coefs,
        eigenvalues,
        all_eigenvalues,
        pve,
        n_smooth_basis: c,
        smoothing_parameter: lambda,
        basis,
    })
}

/// Smallest `L` whose cumulative share of `eigenvalues` reaches `threshold`.
pub fn select_by_pve(eigenvalues: &[f64], threshold: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    let mut cum = 0.0;
    for (l, &v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum >= threshold * total * (1.0 - 1e-12) {
            return l + 1;
        }
    }
    eigenvalues.len()
}

/// `+1` or `-1`: the sign making the column's sum non-negative, falling back
/// to its first clearly non-zero entry.
fn canonical_sign(column: &[f64]) -> f64 {
    let mean = column.iter().sum::<f64>() / column.len() as f64;
    if mean.abs() >= 1e-8 {
        return mean.signum();
    }
    column.iter().find(|v| v.abs() > 1e-8).map_or(1.0, |v| v.signum())
}

/// Evaluates the eigenfunctions anywhere in the grid's range.
pub fn evaluate_eigenfunctions(es: &EigenSystem, points: &[f64]) -> Result<DMatrix<f64>> {
    Ok(es.basis.evaluate(points)? * &es.spline_coefs)
}

/// Flips each eigenfunction to have a non-negative inner product with the
/// matching column of `reference`.
pub fn align_sign(estimated: &EigenSystem, reference: &DMatrix<f64>) -> Result<EigenSystem> {
    let mut out = estimated.clone();
    let flips = sign_flips(&estimated.eigenfunctions, reference)?;
    for (l, flip) in flips.into_iter().enumerate() {
        if flip {
            out.eigenfunctions.column_mut(l).neg_mut();
            out.spline_coefs.column_mut(l).neg_mut();
        }
    }
    Ok(out)
}

/// Columns of `estimated` whose inner product with `reference` is negative.
pub fn sign_flips(estimated: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Vec<bool>> {
    if estimated.nrows() != reference.nrows() || reference.ncols() < estimated.ncols() {
        return Err(Error::argument(format!(
            "reference is {}x{}, estimate is {}x{}",
            reference.nrows(),
            reference.ncols(),
            estimated.nrows(),
            estimated.ncols()
        )));
    }
    Ok((0..estimated.ncols())
        .map(|l| estimated.column(l).dot(&reference.column(l)) < 0.0)
        .collect())
}
