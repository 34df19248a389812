//! Per-bin random-intercept GLMMs.
//!
//! Inside a bin the linear predictor `x_iᵀβ* + b*_i` is constant for every
//! observation of subject `i`, so a subject enters the likelihood only
//! through its count `n_i` and outcome sum `Σ_j y_ij`. Non-Gaussian bins are
//! fitted by maximizing the Laplace approximation to the marginal likelihood
//! (quasi-Newton outer loop, scalar Newton solves for each posterior mode).
//! Gaussian bins use the exact profiled REML criterion.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::BinPlan;
use crate::error::{Error, Result};
use crate::family::Family;
use crate::ingest::LongDataset;
use crate::optim::{brent_max, bfgs_minimize, BfgsOptions};

/// Fraction of bins that may fail before [`fit_all_bins`] gives up.
pub const MAX_FAILED_BIN_FRACTION: f64 = 0.2;

/// Sufficient statistics of one subject inside one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectStats {
    /// Intercept followed by the subject's covariates.
    pub design: Vec<f64>,
    pub n: f64,
    pub sum_y: f64,
    pub sum_y2: f64,
    /// `Σ_j log(y_ij!)`, needed only for the Poisson normalizing constant.
    pub sum_log_factorial: f64,
}

impl SubjectStats {
    pub fn from_outcomes(design: Vec<f64>, ys: &[f64]) -> Self {
        SubjectStats {
            design,
            n: ys.len() as f64,
            sum_y: ys.iter().sum(),
            sum_y2: ys.iter().map(|y| y * y).sum(),
            sum_log_factorial: ys
                .iter()
                .map(|&y| statrs::function::gamma::ln_gamma(y.max(0.0) + 1.0))
                .sum(),
        }
    }

    /// `Σ_j c(y_ij, φ)`.
    fn log_base(&self, family: &Family) -> f64 {
        use crate::family::FamilyKind::*;
        match family.kind {
            BernoulliLogit => 0.0,
            PoissonLog => -self.sum_log_factorial,
            GaussianIdentity => {
                let phi = family.dispersion;
                -0.5 * self.n * (2.0 * std::f64::consts::PI * phi).ln() - 0.5 * self.sum_y2 / phi
            }
        }
    }

    /// Log-likelihood of the subject's observations at a common η.
    fn log_lik(&self, family: &Family, eta: f64) -> f64 {
        (self.sum_y * eta - self.n * family.cumulant(eta)) / family.phi() + self.log_base(family)
    }
}

/// Data of one bin: one entry per subject, `None` for subjects with no
/// observation in the bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinData {
    pub center: usize,
    pub subjects: Vec<Option<SubjectStats>>,
    n_fixed: usize,
}

impl BinData {
    pub fn new(center: usize, subjects: Vec<Option<SubjectStats>>) -> Result<Self> {
        let n_fixed = subjects
            .iter()
            .flatten()
            .map(|s| s.design.len())
            .next()
            .ok_or_else(|| Error::fit("bin has no observations"))?;
        if subjects.iter().flatten().any(|s| s.design.len() != n_fixed) {
            return Err(Error::argument("subjects disagree on the number of covariates"));
        }
        Ok(BinData { center, subjects, n_fixed })
    }

    /// Slices the bin centred on `center` out of a dataset.
    pub fn from_dataset(data: &LongDataset, center: usize, members: &[usize]) -> Result<Self> {
        let mut ys = Vec::with_capacity(members.len());
        let subjects = (0..data.n_subjects())
            .map(|i| {
                ys.clear();
                ys.extend(
                    members
                        .iter()
                        .filter(|&&k| data.observed[(i, k)])
                        .map(|&k| data.outcomes[(i, k)]),
                );
                (!ys.is_empty()).then(|| SubjectStats::from_outcomes(data.design_row(i), &ys))
            })
            .collect();
        Self::new(center, subjects)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    fn present(&self) -> impl Iterator<Item = &SubjectStats> {
        self.subjects.iter().flatten()
    }

    fn n_obs(&self) -> f64 {
        self.present().map(|s| s.n).sum()
    }
}

/// Stopping rules for a local fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalControls {
    pub max_iter: usize,
    /// Relative objective change that ends the outer optimization.
    pub rel_tol: f64,
    /// Parameter change that ends the outer optimization.
    pub param_tol: f64,
    /// Fit the pooled GLM only (σ² held at 0).
    pub constrain_sigma_zero: bool,
}

impl Default for LocalControls {
    fn default() -> Self {
        LocalControls { max_iter: 200, rel_tol: 1e-8, param_tol: 1e-6, constrain_sigma_zero: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFit {
    pub bin_center: usize,
    /// Intercept and covariate effects β*(s_k).
    pub beta_star: Vec<f64>,
    /// Random-intercept variance σ²_k.
    pub sigma2: f64,
    /// Residual variance (Gaussian bins; 1 otherwise).
    pub dispersion: f64,
    /// Posterior modes b̂*_i(s_k); 0 for subjects absent from the bin.
    pub blups: Vec<f64>,
    pub present: Vec<bool>,
    pub converged: bool,
    pub n_iter: usize,
    /// Maximized objective (Laplace log marginal likelihood or REML).
    pub objective: f64,
    /// Objective after every accepted outer iteration.
    pub trace: Vec<f64>,
}

/// Posterior mode of the standardized random effect `u` (b = σu) for one
/// subject with offset `a = xᵀβ`: maximizes
/// `h(u) = log f(y | a + σu) − u²/2` by safeguarded Newton.
fn posterior_mode(
    stats: &SubjectStats,
    family: &Family,
    offset: f64,
    sigma: f64,
    start: f64,
    mut trace: Option<&mut Vec<f64>>,
) -> f64 {
    let phi = family.phi();
    let h = |u: f64| {
        let eta = offset + sigma * u;
        (stats.sum_y * eta - stats.n * family.cumulant(eta)) / phi - 0.5 * u * u
    };
    if sigma == 0.0 {
        return 0.0;
    }
    let mut u = start;
    let mut hu = h(u);
    if let Some(t) = trace.as_deref_mut() {
        t.push(hu);
    }
    for _ in 0..100 {
        let eta = offset + sigma * u;
        let grad = sigma * (stats.sum_y - stats.n * family.mean(eta)) / phi - u;
        let curv = sigma * sigma * stats.n * family.variance(eta) / phi + 1.0;
        let mut step = grad / curv;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = u + step;
            let hc = h(cand);
            if hc >= hu - 1e-14 * hu.abs().max(1.0) {
                u = cand;
                hu = hc.max(hu);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(hu);
        }
        if !accepted || step.abs() < 1e-12 * (1.0 + u.abs()) {
            break;
        }
    }
    u
}

/// Laplace approximation of the bin's log marginal likelihood together with
/// its exact gradient in `(β, σ)` and the per-subject posterior modes.
#[derive(Debug, Clone)]
pub struct LaplaceEval {
    pub value: f64,
    /// Gradient with respect to `(β_0..β_p, σ)`.
    pub gradient: Vec<f64>,
    /// Standardized modes `û_i` (0 for absent subjects).
    pub modes: Vec<f64>,
}

pub fn laplace_objective(
    bin: &BinData,
    family: &Family,
    beta: &[f64],
    sigma: f64,
    warm: Option<&[f64]>,
) -> LaplaceEval {
    let q = bin.n_fixed;
    let phi = family.phi();
    let mut value = 0.0;
    let mut gradient = vec![0.0; q + 1];
    let mut modes = vec![0.0; bin.n_subjects()];
    for (i, stats) in bin.subjects.iter().enumerate() {
        let Some(st) = stats else { continue };
        let a: f64 = st.design.iter().zip(beta).map(|(x, b)| x * b).sum();
        let start = warm.map_or(0.0, |w| w[i]);
        let u = posterior_mode(st, family, a, sigma, start, None);
        modes[i] = u;
        let eta = a + sigma * u;
        let r = (st.sum_y - st.n * family.mean(eta)) / phi;
        let w = st.n * family.variance(eta) / phi;
        let wd = st.n * family.variance_deriv(eta) / phi;
        let hess = 1.0 + sigma * sigma * w;
        value += st.log_lik(family, eta) - 0.5 * u * u - 0.5 * hess.ln();

        // dû/dσ and dû/dβ_r follow from differentiating h'(û) = 0.
        let s2 = sigma * sigma;
        let s3 = s2 * sigma;
        for (g, &x) in gradient.iter_mut().zip(&st.design) {
            let du = -sigma * w * x / hess;
            *g += r * x - (s2 * wd * x + s3 * wd * du) / (2.0 * hess);
        }
        let du_sigma = (r - sigma * w * u) / hess;
        gradient[q] += r * u - (2.0 * sigma * w + s2 * wd * u + s3 * wd * du_sigma) / (2.0 * hess);
    }
    LaplaceEval { value, gradient, modes }
}

/// Laplace log marginal likelihood at `(β, σ)`.
pub fn laplace_log_marginal(bin: &BinData, family: &Family, beta: &[f64], sigma: f64) -> f64 {
    laplace_objective(bin, family, beta, sigma, None).value
}

/// Pooled GLM fit (σ² = 0) by Newton–IRLS on the subject sufficient
/// statistics. Returns `(β, log-likelihood, converged)`.
pub fn pooled_glm(bin: &BinData, family: &Family, max_iter: usize) -> Result<(Vec<f64>, f64, bool)> {
    let q = bin.n_fixed;
    let loglik = |beta: &[f64]| -> f64 {
        bin.present()
            .map(|s| {
                let eta: f64 = s.design.iter().zip(beta).map(|(x, b)| x * b).sum();
                s.log_lik(family, eta)
            })
            .sum()
    };
    let n_obs = bin.n_obs();
    let ybar = bin.present().map(|s| s.sum_y).sum::<f64>() / n_obs;
    let mut beta = vec![0.0; q];
    beta[0] = family.link(ybar);
    let mut ll = loglik(&beta);
    let mut converged = false;
    for _ in 0..max_iter {
        let mut info = DMatrix::<f64>::zeros(q, q);
        let mut score = DVector::<f64>::zeros(q);
        for s in bin.present() {
            let eta: f64 = s.design.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let r = (s.sum_y - s.n * family.mean(eta)) / family.phi();
            let w = s.n * family.variance(eta) / family.phi();
            for a in 0..q {
                score[a] += r * s.design[a];
                for b in 0..q {
                    info[(a, b)] += w * s.design[a] * s.design[b];
                }
            }
        }
        let chol = info.cholesky().ok_or_else(|| {
            Error::fit("covariate matrix is rank deficient (information not positive definite)")
        })?;
        let step = chol.solve(&score);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, d)| b + t * d).collect();
            let lc = loglik(&cand);
            if lc.is_finite() && lc >= ll - 1e-12 * ll.abs().max(1.0) {
                let change = step.amax() * t;
                beta = cand;
                let rel = (lc - ll).abs() / ll.abs().max(1.0);
                ll = lc;
                moved = true;
                if rel < 1e-12 || change < 1e-10 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !moved || converged {
            converged = converged || score.amax() < 1e-8 * n_obs.max(1.0);
            break;
        }
        if beta.iter().any(|b| b.abs() > 50.0) {
            // Quasi-separation: estimates run off to infinity.
            break;
        }
    }
    Ok((beta, ll, converged))
}

fn check_rank(bin: &BinData) -> Result<()> {
    let q = bin.n_fixed;
    let mut xtx = DMatrix::<f64>::zeros(q, q);
    for s in bin.present() {
        for a in 0..q {
            for b in 0..q {
                xtx[(a, b)] += s.n * s.design[a] * s.design[b];
            }
        }
    }
    let ev = xtx.symmetric_eigen().eigenvalues;
    let max = ev.iter().cloned().fold(0.0, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-10 * max) {
        return Err(Error::fit(format!(
            "rank-deficient covariates in bin {} (eigenvalue ratio {:.3e})",
            bin.center,
            min / max
        )));
    }
    Ok(())
}

fn check_degenerate(bin: &BinData) -> Result<()> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in bin.present() {
        // Per-subject mean bounds the spread; equal extremes mean constant outcomes.
        let m = s.sum_y / s.n;
        let var = (s.sum_y2 / s.n - m * m).max(0.0);
        if var > 1e-12 * (1.0 + m * m) {
            return Ok(());
        }
        lo = lo.min(m);
        hi = hi.max(m);
    }
    if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
        return Err(Error::fit(format!("degenerate bin {}: all outcomes identical", bin.center)));
    }
    Ok(())
}

/// Fits the random-intercept model of one bin.
pub fn fit_local_glmm(bin: &BinData, family: &Family, controls: &LocalControls) -> Result<LocalFit> {
    check_degenerate(bin)?;
    check_rank(bin)?;
    if family.is_gaussian() {
        fit_gaussian_reml(bin, controls)
    } else {
        fit_laplace(bin, family, controls)
    }
}

fn pinned_fit(bin: &BinData, beta: Vec<f64>, objective: f64, dispersion: f64, converged: bool, n_iter: usize, trace: Vec<f64>) -> LocalFit {
    LocalFit {
        bin_center: bin.center,
        beta_star: beta,
        sigma2: 0.0,
        dispersion,
        blups: vec![0.0; bin.n_subjects()],
        present: bin.subjects.iter().map(Option::is_some).collect(),
        converged,
        n_iter,
        objective,
        trace,
    }
}

fn fit_laplace(bin: &BinData, family: &Family, controls: &LocalControls) -> Result<LocalFit> {
    let q = bin.n_fixed;
    let (beta_glm, ll_glm, glm_converged) = pooled_glm(bin, family, controls.max_iter)?;
    if controls.constrain_sigma_zero {
        return Ok(pinned_fit(bin, beta_glm, ll_glm, 1.0, glm_converged, 0, vec![ll_glm]));
    }

    // σ² starts at a tenth of the variance of the GLM working residuals.
    let mut ss = 0.0;
    let mut n = 0.0;
    let mut sum = 0.0;
    for s in bin.present() {
        let eta: f64 = s.design.iter().zip(&beta_glm).map(|(x, b)| x * b).sum();
        let mu = family.mean(eta);
        let v = family.variance(eta).max(1e-8);
        let sq = (s.sum_y2 - 2.0 * mu * s.sum_y + s.n * mu * mu) / (v * v);
        ss += sq;
        sum += (s.sum_y - s.n * mu) / v;
        n += s.n;
    }
    let var_wr = (ss / n - (sum / n).powi(2)).max(1e-6);
    let sigma0 = (0.1 * var_wr).sqrt();

    let mut theta0 = beta_glm.clone();
    theta0.push(sigma0);
    let warm = std::cell::RefCell::new(vec![0.0; bin.n_subjects()]);
    let objective = |theta: &[f64]| -> (f64, Vec<f64>) {
        let mut w = warm.borrow_mut();
        let ev = laplace_objective(bin, family, &theta[..q], theta[q], Some(&w));
        *w = ev.modes;
        (-ev.value, ev.gradient.into_iter().map(|g| -g).collect())
    };
    let opts = BfgsOptions {
        max_iter: controls.max_iter,
        rel_tol: controls.rel_tol,
        param_tol: controls.param_tol,
        grad_tol: 1e-8,
    };
    let res = bfgs_minimize(objective, &theta0, &opts);
    let beta = res.x[..q].to_vec();
    let sigma = res.x[q].abs();
    let value = -res.value;
    let trace: Vec<f64> = res.trace.iter().map(|f| -f).collect();

    if !value.is_finite() || sigma * sigma < 1e-10 || value <= ll_glm + 1e-10 {
        return Ok(pinned_fit(bin, beta_glm, ll_glm, 1.0, res.converged || glm_converged, res.iterations, trace));
    }
    let ev = laplace_objective(bin, family, &beta, sigma, None);
    Ok(LocalFit {
        bin_center: bin.center,
        beta_star: beta,
        sigma2: sigma * sigma,
        dispersion: 1.0,
        blups: ev.modes.iter().map(|u| sigma * u).collect(),
        present: bin.subjects.iter().map(Option::is_some).collect(),
        converged: res.converged,
        n_iter: res.iterations,
        objective: value,
        trace,
    })
}

/// Profiled REML criterion for the Gaussian random-intercept model as a
/// function of the variance ratio γ = σ²_b / σ²_e.
struct GaussianReml<'a> {
    bin: &'a BinData,
    within_ss: f64,
    n_total: f64,
}

struct RemlPoint {
    value: f64,
    beta: Vec<f64>,
    sigma2_e: f64,
}

impl<'a> GaussianReml<'a> {
    fn new(bin: &'a BinData) -> Self {
        let within_ss = bin.present().map(|s| (s.sum_y2 - s.sum_y * s.sum_y / s.n).max(0.0)).sum();
        GaussianReml { bin, within_ss, n_total: bin.n_obs() }
    }

    fn eval(&self, gamma: f64) -> Option<RemlPoint> {
        let q = self.bin.n_fixed;
        let mut xtvx = DMatrix::<f64>::zeros(q, q);
        let mut xtvy = DVector::<f64>::zeros(q);
        let mut log_v = 0.0;
        for s in self.bin.present() {
            let v = gamma + 1.0 / s.n;
            let ybar = s.sum_y / s.n;
            log_v += v.ln();
            for a in 0..q {
                xtvy[a] += s.design[a] * ybar / v;
                for b in 0..q {
                    xtvx[(a, b)] += s.design[a] * s.design[b] / v;
                }
            }
        }
        let chol = xtvx.clone().cholesky()?;
        let beta = chol.solve(&xtvy);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut quad = self.within_ss;
        for s in self.bin.present() {
            let v = gamma + 1.0 / s.n;
            let fit: f64 = s.design.iter().zip(beta.iter()).map(|(x, b)| x * b).sum();
            quad += (s.sum_y / s.n - fit).powi(2) / v;
        }
        let dof = self.n_total - q as f64;
        let sigma2_e = quad / dof;
        if !(sigma2_e > 0.0) {
            return None;
        }
        // The log(n_i) terms of |V_i| are constant in γ and dropped.
        let value = -0.5 * (dof * sigma2_e.ln() + log_v + log_det + dof);
        Some(RemlPoint { value, beta: beta.iter().copied().collect(), sigma2_e })
    }
}

fn fit_gaussian_reml(bin: &BinData, controls: &LocalControls) -> Result<LocalFit> {
    let reml = GaussianReml::new(bin);
    let dof = reml.n_total - bin.n_fixed as f64;
    if dof <= 0.0 {
        return Err(Error::fit(format!("bin {} has no residual degrees of freedom", bin.center)));
    }
    let at_zero = reml
        .eval(0.0)
        .ok_or_else(|| Error::fit(format!("bin {}: REML undefined at the boundary", bin.center)))?;
    if controls.constrain_sigma_zero {
        return Ok(pinned_fit(bin, at_zero.beta, at_zero.value, at_zero.sigma2_e, true, 0, vec![at_zero.value]));
    }

    // Coarse scan on log γ, then Brent refinement around the best cell.
    let f = |lg: f64| reml.eval(lg.exp()).map_or(f64::NEG_INFINITY, |p| p.value);
    let grid: Vec<f64> = (0..=36).map(|j| -12.0 + 0.5 * j as f64).collect();
    let (best_j, _) = grid
        .iter()
        .map(|&lg| f(lg))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
    let lo = grid[best_j.saturating_sub(1)];
    let hi = grid[(best_j + 1).min(grid.len() - 1)];
    let opt = brent_max(f, lo, hi, 1e-10, controls.max_iter);
    let best = reml
        .eval(opt.x.exp())
        .ok_or_else(|| Error::fit(format!("bin {}: REML evaluation failed", bin.center)))?;

    if at_zero.value >= best.value || opt.x <= grid[0] + 1e-6 {
        return Ok(pinned_fit(bin, at_zero.beta, at_zero.value, at_zero.sigma2_e, true, opt.iterations, opt.trace));
    }
    let gamma = opt.x.exp();
    let sigma2_b = gamma * best.sigma2_e;
    let blups = bin
        .subjects
        .iter()
        .map(|s| match s {
            Some(s) => {
                let fit: f64 = s.design.iter().zip(&best.beta).map(|(x, b)| x * b).sum();
                let shrink = sigma2_b / (sigma2_b + best.sigma2_e / s.n);
                shrink * (s.sum_y / s.n - fit)
            }
            None => 0.0,
        })
        .collect();
    Ok(LocalFit {
        bin_center: bin.center,
        beta_star: best.beta,
        sigma2: sigma2_b,
        dispersion: best.sigma2_e,
        blups,
        present: bin.subjects.iter().map(Option::is_some).collect(),
        converged: opt.converged,
        n_iter: opt.iterations,
        objective: best.value,
        trace: opt.trace,
    })
}

/// Record of a bin whose local fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinFailure {
    pub bin_center: usize,
    pub message: String,
}

pub type BinResult = std::result::Result<LocalFit, BinFailure>;

/// Fits every bin of `plan`. Bins are independent; the output order follows
/// the bin centres whatever the scheduling.
pub fn fit_all_bins(
    data: &LongDataset,
    plan: &BinPlan,
    family: &Family,
    controls: &LocalControls,
) -> Result<Vec<BinResult>> {
    if plan.n_grid != data.n_grid() {
        return Err(Error::argument(format!(
            "bin plan is for {} grid points but the data have {}",
            plan.n_grid,
            data.n_grid()
        )));
    }
    let results: Vec<BinResult> = plan
        .members
        .par_iter()
        .enumerate()
        .map(|(k, members)| {
            BinData::from_dataset(data, k, members)
                .and_then(|bin| fit_local_glmm(&bin, family, controls))
                .map_err(|e| BinFailure { bin_center: k, message: e.to_string() })
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed as f64 > MAX_FAILED_BIN_FRACTION * plan.n_bins() as f64 {
        let first = results.iter().find_map(|r| r.as_ref().err()).map(|f| f.message.clone());
        return Err(Error::fit(format!(
            "{failed} of {} local fits failed (first: {})",
            plan.n_bins(),
            first.unwrap_or_default()
        )));
    }
    for f in results.iter().filter_map(|r| r.as_ref().err()) {
        log::warn!("bin {} failed: {}", f.bin_center, f.message);
    }
    Ok(results)
}

/// `I x K` matrix of BLUPs with a mask of entries that carry no estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectMatrix {
    pub values: DMatrix<f64>,
    /// `true` where the entry is missing (subject absent or bin failed).
    pub mask: DMatrix<bool>,
    pub failed_bins: Vec<usize>,
}

impl RandomEffectMatrix {
    pub fn unmasked(values: DMatrix<f64>) -> Self {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), false);
        RandomEffectMatrix { values, mask, failed_bins: Vec::new() }
    }
}

pub fn assemble_random_effect_matrix(
    fits: &[BinResult],
    n_subjects: usize,
    n_grid: usize,
) -> Result<RandomEffectMatrix> {
    let mut values = DMatrix::zeros(n_subjects, n_grid);
    let mut mask = DMatrix::from_element(n_subjects, n_grid, true);
    let mut covered = vec![false; n_grid];
    let mut failed_bins = Vec::new();
    for r in fits {
        match r {
            Ok(fit) => {
                let k = fit.bin_center;
                if k >= n_grid || fit.blups.len() != n_subjects {
                    return Err(Error::argument(format!(
                        "local fit for bin {k} does not match an {n_subjects}x{n_grid} layout"
                    )));
                }
                covered[k] = true;
                for i in 0..n_subjects {
                    if fit.present[i] {
                        values[(i, k)] = fit.blups[i];
                        mask[(i, k)] = false;
                    }
                }
            }
            Err(f) => {
                if f.bin_center < n_grid {
                    covered[f.bin_center] = true;
                    failed_bins.push(f.bin_center);
                }
            }
        }
    }
    if let Some(k) = covered.iter().position(|c| !c) {
        return Err(Error::argument(format!("no local fit covers bin {k}")));
    }
    failed_bins.sort_unstable();
    Ok(RandomEffectMatrix { values, mask, failed_bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn toy_bin(family: &Family, n_sub: usize, n_obs: usize, sigma: f64, seed: u64) -> BinData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let subjects = (0..n_sub)
            .map(|i| {
                let x = if i % 2 == 0 { 0.0 } else { 1.0 };
                let b = sigma * normal.sample(&mut rng);
                let eta = -0.2 + 0.5 * x + b;
                let ys: Vec<f64> = (0..n_obs)
                    .map(|_| match family.kind {
                        crate::family::FamilyKind::BernoulliLogit => {
                            (rng.random::<f64>() < family.mean(eta)) as u8 as f64
                        }
                        crate::family::FamilyKind::PoissonLog => {
                            rand_distr::Poisson::new(family.mean(eta)).unwrap().sample(&mut rng)
                        }
                        crate::family::FamilyKind::GaussianIdentity => eta + normal.sample(&mut rng),
                    })
                    .collect();
                Some(SubjectStats::from_outcomes(vec![1.0, x], &ys))
            })
            .collect();
        BinData::new(0, subjects).unwrap()
    }

    #[test]
    fn laplace_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for family in [Family::bernoulli(), Family::poisson(), Family::gaussian(0.7)] {
            let bin = toy_bin(&family, 5, 4, 0.8, 3);
            for _ in 0..20 {
                let beta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let sigma = rng.random_range(0.1..1.5);
                let ev = laplace_objective(&bin, &family, &beta, sigma, None);
                let h = 1e-5;
                let mut theta = vec![beta[0], beta[1], sigma];
                for j in 0..3 {
                    let orig = theta[j];
                    theta[j] = orig + h;
                    let fp = laplace_log_marginal(&bin, &family, &theta[..2], theta[2]);
                    theta[j] = orig - h;
                    let fm = laplace_log_marginal(&bin, &family, &theta[..2], theta[2]);
                    theta[j] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let rel = (fd - ev.gradient[j]).abs() / fd.abs().max(1e-3);
                    assert!(rel < 1e-4, "{:?} param {j}: fd {fd} analytic {}", family.kind, ev.gradient[j]);
                }
            }
        }
    }

    #[test]
    fn inner_newton_is_monotone() {
        let family = Family::bernoulli();
        let st = SubjectStats::from_outcomes(vec![1.0], &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let mut trace = Vec::new();
        posterior_mode(&st, &family, -1.0, 2.5, -3.0, Some(&mut trace));
        assert!(trace.len() > 2);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "{trace:?}");
        }
    }

    #[test]
    fn outer_objective_is_monotone() {
        for family in [Family::bernoulli(), Family::poisson()] {
            let bin = toy_bin(&family, 40, 7, 1.0, 5);
            let fit = fit_local_glmm(&bin, &family, &LocalControls::default()).unwrap();
            assert!(fit.trace.len() >= 2);
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10);
            }
        }
    }

    #[test]
    fn sigma_zero_matches_pooled_logistic_regression() {
        let family = Family::bernoulli();
        let bin = toy_bin(&family, 30, 7, 1.0, 9);
        let controls = LocalControls { constrain_sigma_zero: true, ..Default::default() };
        let fit = fit_local_glmm(&bin, &family, &controls).unwrap();
        assert_eq!(fit.sigma2, 0.0);
        assert!(fit.blups.iter().all(|&b| b == 0.0));

        // Independent oracle: textbook IRLS on the expanded 0/1 observations.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in bin.subjects.iter().flatten() {
            let ones = s.sum_y as usize;
            for j in 0..s.n as usize {
                xs.push(s.design.clone());
                ys.push(if j < ones { 1.0 } else { 0.0 });
            }
        }
        let mut beta = DVector::<f64>::zeros(2);
        for _ in 0..50 {
            let mut xtwx = DMatrix::<f64>::zeros(2, 2);
            let mut xtwz = DVector::<f64>::zeros(2);
            for (x, &y) in xs.iter().zip(&ys) {
                let eta = x[0] * beta[0] + x[1] * beta[1];
                let mu = 1.0 / (1.0 + (-eta).exp());
                let w = mu * (1.0 - mu);
                let z = eta + (y - mu) / w;
                for a in 0..2 {
                    xtwz[a] += w * x[a] * z;
                    for b in 0..2 {
                        xtwx[(a, b)] += w * x[a] * x[b];
                    }
                }
            }
            beta = xtwx.lu().solve(&xtwz).unwrap();
        }
        for a in 0..2 {
            assert!((fit.beta_star[a] - beta[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_balanced_blups_have_closed_form() {
        let family = Family::gaussian(1.0);
        let w = 7;
        let bin = toy_bin(&family, 30, w, 1.0, 21);
        let subjects: Vec<SubjectStats> = bin
            .subjects
            .iter()
            .flatten()
            .map(|s| SubjectStats { design: vec![1.0], ..s.clone() })
            .collect();
        let bin = BinData::new(0, subjects.into_iter().map(Some).collect()).unwrap();
        let fit = fit_local_glmm(&bin, &family, &LocalControls::default()).unwrap();
        assert!(fit.sigma2 > 0.0);
        let means: Vec<f64> = bin.subjects.iter().flatten().map(|s| s.sum_y / s.n).collect();
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let shrink = fit.sigma2 / (fit.sigma2 + fit.dispersion / w as f64);
        for (b, m) in fit.blups.iter().zip(&means) {
            assert!((b - shrink * (m - grand)).abs() < 1e-10);
            assert!(b.abs() <= (m - fit.beta_star[0]).abs() + 1e-12);
        }
        let max = fit.blups.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let mean = fit.blups.iter().sum::<f64>() / fit.blups.len() as f64;
        assert!(mean.abs() < 1e-6 * (1.0 + max));
    }

    #[test]
    fn gaussian_reml_matches_anova_estimates() {
        // Balanced one-way random effects: REML = ANOVA estimates when positive.
        let family = Family::gaussian(1.0);
        let bin = toy_bin(&family, 25, 6, 1.2, 77);
        let subjects: Vec<Option<SubjectStats>> = bin
            .subjects
            .iter()
            .flatten()
            .map(|s| Some(SubjectStats { design: vec![1.0], ..s.clone() }))
            .collect();
        let bin = BinData::new(0, subjects).unwrap();
        let fit = fit_local_glmm(&bin, &family, &LocalControls::default()).unwrap();
        let n = 6.0;
        let a = 25.0;
        let means: Vec<f64> = bin.subjects.iter().flatten().map(|s| s.sum_y / s.n).collect();
        let grand = means.iter().sum::<f64>() / a;
        let ssb: f64 = means.iter().map(|m| n * (m - grand).powi(2)).sum();
        let ssw: f64 = bin.subjects.iter().flatten().map(|s| s.sum_y2 - s.sum_y * s.sum_y / s.n).sum();
        let msb = ssb / (a - 1.0);
        let msw = ssw / (a * (n - 1.0));
        assert!((fit.dispersion - msw).abs() < 1e-6 * msw);
        assert!((fit.sigma2 - (msb - msw) / n).abs() < 1e-6 * fit.sigma2);
    }

    #[test]
    fn all_zero_subject_gets_finite_shrunken_blup() {
        let family = Family::bernoulli();
        let mut bin = toy_bin(&family, 30, 7, 1.0, 13);
        bin.subjects[0] = Some(SubjectStats::from_outcomes(vec![1.0, 0.0], &[0.0; 7]));
        let fit = fit_local_glmm(&bin, &family, &LocalControls::default()).unwrap();
        assert!(fit.sigma2 > 0.0);
        assert!(fit.blups[0].is_finite());
        assert!(fit.blups[0] < 0.0);
        assert!(fit.blups[0].abs() < 10.0 * fit.sigma2.sqrt());
    }

    #[test]
    fn degenerate_and_rank_deficient_bins_fail() {
        let family = Family::bernoulli();
        let zeros: Vec<Option<SubjectStats>> =
            (0..5).map(|_| Some(SubjectStats::from_outcomes(vec![1.0], &[0.0; 3]))).collect();
        let bin = BinData::new(0, zeros).unwrap();
        assert!(matches!(fit_local_glmm(&bin, &family, &LocalControls::default()), Err(Error::Fit(_))));

        let collinear: Vec<Option<SubjectStats>> = (0..6)
            .map(|i| Some(SubjectStats::from_outcomes(vec![1.0, 2.0], &[(i % 2) as f64, 1.0])))
            .collect();
        let bin = BinData::new(0, collinear).unwrap();
        assert!(matches!(fit_local_glmm(&bin, &family, &LocalControls::default()), Err(Error::Fit(_))));
    }

    #[test]
    fn assembly_places_blups_and_masks_failures() {
        let mk = |k: usize, blups: Vec<f64>| LocalFit {
            bin_center: k,
            beta_star: vec![0.0],
            sigma2: 1.0,
            dispersion: 1.0,
            present: vec![true; blups.len()],
            blups,
            converged: true,
            n_iter: 1,
            objective: 0.0,
            trace: vec![],
        };
        let fits = vec![
            Ok(mk(0, vec![1.0, 2.0])),
            Err(BinFailure { bin_center: 1, message: "x".into() }),
            Ok(mk(2, vec![5.0, 6.0])),
        ];
        let m = assemble_random_effect_matrix(&fits, 2, 3).unwrap();
        assert_eq!(m.values, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 5.0, 2.0, 0.0, 6.0]));
        assert_eq!(m.failed_bins, vec![1]);
        assert!(m.mask[(0, 1)] && m.mask[(1, 1)] && !m.mask[(0, 0)]);

        let zero = vec![Ok(LocalFit { sigma2: 0.0, ..mk(0, vec![0.0, 0.0]) })];
        assert_eq!(assemble_random_effect_matrix(&zero, 2, 1).unwrap().values, DMatrix::zeros(2, 1));
        assert!(assemble_random_effect_matrix(&zero, 2, 2).is_err());
    }
}
