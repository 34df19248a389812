//! Simulation scenarios, evaluation metrics and replication summaries.

use std::io::Write;
use std::time::Instant;

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{ClosedFormBasis, ClosedFormKind, SplineBasis};
use crate::error::{Error, Result};
use crate::family::{Family, FamilyKind};
use crate::fpca::{sign_flips, Truncation};
use crate::ingest::LongDataset;
use crate::joint_glmm::{fixed_effect_curves, predict_linear_predictor, GcFpcaFit};
use crate::pipeline::{run_pipeline, PipelineConfig};

/// Dimension of the cubic spline carrying the true fixed-effect curves.
pub const TRUTH_BASIS: usize = 14;
pub const N_TRUE_COMPONENTS: usize = 4;

/// Default truth coefficients `(β_0m, β_1m)` on the clamped 14-function
/// cubic basis over `[0, 1]`. Standard normal draws (numpy `default_rng(1847)`)
/// with `β_0` shifted by -0.1605 so that about half of the binary outcomes are
/// ones under the default eigenvalues.
pub const DEFAULT_TRUTH_COEFS: [[f64; TRUTH_BASIS]; 2] = [
    [
        0.2038, 1.3186, -0.0560, 0.2597, 2.8438, -2.3559, -1.1829, 1.4749, -0.2454, -1.1116, 1.0606, 0.5245,
        -0.8826, 0.4370,
    ],
    [
        0.8653, 0.1600, -0.8336, 1.7774, -1.2026, -1.7583, 1.5203, -0.1774, -1.8178, -0.0285, -1.3983, -0.2431,
        0.6835, -0.0185,
    ],
];

pub const DEFAULT_TRUE_LAMBDA: [f64; N_TRUE_COMPONENTS] = [1.0, 0.5, 0.25, 0.125];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    #[default]
    BernoulliHalf,
    StandardNormal,
}

fn default_id() -> String {
    "scenario".into()
}
fn default_eigenbasis() -> ClosedFormKind {
    ClosedFormKind::Fourier
}
fn default_lambda() -> Vec<f64> {
    DEFAULT_TRUE_LAMBDA.to_vec()
}
fn default_bin_fraction() -> f64 {
    0.05
}
fn default_sd() -> f64 {
    1.0
}
fn default_fit_components() -> Option<usize> {
    Some(4)
}
fn default_fit_basis() -> usize {
    TRUTH_BASIS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(rename = "I")]
    pub n_subjects: usize,
    #[serde(rename = "K")]
    pub n_grid: usize,
    pub family: FamilyKind,
    #[serde(default = "default_eigenbasis")]
    pub eigenbasis: ClosedFormKind,
    #[serde(default)]
    pub covariate_kind: CovariateKind,
    #[serde(default = "default_lambda")]
    pub true_lambda: Vec<f64>,
    /// Two rows of 14 coefficients; the built-in matrix when absent.
    #[serde(default)]
    pub truth_coefs: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_bin_fraction")]
    pub bin_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Residual standard deviation of the Gaussian family.
    #[serde(default = "default_sd")]
    pub gaussian_sd: f64,
    /// Number of components kept in the fit; `None` selects by 95% PVE.
    #[serde(default = "default_fit_components")]
    pub fit_components: Option<usize>,
    /// Fixed-effect spline dimension used by the fit.
    #[serde(default = "default_fit_basis")]
    pub fit_basis: usize,
}

impl SimScenario {
    pub fn new(n_subjects: usize, n_grid: usize, family: FamilyKind) -> Self {
        SimScenario {
            id: default_id(),
            n_subjects,
            n_grid,
            family,
            eigenbasis: default_eigenbasis(),
            covariate_kind: CovariateKind::default(),
            true_lambda: default_lambda(),
            truth_coefs: None,
            bin_fraction: default_bin_fraction(),
            seed: 0,
            gaussian_sd: default_sd(),
            fit_components: default_fit_components(),
            fit_basis: default_fit_basis(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sc: SimScenario = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 || self.n_grid < 4 {
            return Err(Error::validation("scenario needs I >= 2 and K >= 4"));
        }
        if self.true_lambda.len() != N_TRUE_COMPONENTS || self.true_lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::validation("true_lambda must hold 4 non-negative values"));
        }
        if !(self.gaussian_sd >= 0.0) {
            return Err(Error::validation("gaussian_sd must be non-negative"));
        }
        if !(self.bin_fraction > 0.0 && self.bin_fraction <= 1.0) {
            return Err(Error::validation("bin_fraction must be in (0, 1]"));
        }
        if let Some(rows) = &self.truth_coefs {
            if rows.len() != 2 || rows.iter().any(|r| r.len() != TRUTH_BASIS || r.iter().any(|v| !v.is_finite())) {
                return Err(Error::validation(format!("truth_coefs must be 2 rows of {TRUTH_BASIS} finite values")));
            }
        }
        Ok(())
    }

    /// Grid `s_k = k / K`, `k = 1..K`.
    pub fn grid(&self) -> Vec<f64> {
        (1..=self.n_grid).map(|k| k as f64 / self.n_grid as f64).collect()
    }

    /// `2 x 14` truth coefficients.
    pub fn truth_coefs(&self) -> DMatrix<f64> {
        match &self.truth_coefs {
            Some(rows) => DMatrix::from_fn(2, TRUTH_BASIS, |r, m| rows[r][m]),
            None => DMatrix::from_fn(2, TRUTH_BASIS, |r, m| DEFAULT_TRUTH_COEFS[r][m]),
        }
    }

    pub fn family(&self) -> Family {
        match self.family {
            FamilyKind::GaussianIdentity => Family::gaussian(self.gaussian_sd.powi(2).max(1e-8)),
            k => Family::from_kind(k),
        }
    }

    /// Fit settings matching the scenario.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut config = PipelineConfig { bin_fraction: self.bin_fraction, n_fixed_basis: self.fit_basis, ..Default::default() };
        if let Some(l) = self.fit_components {
            config.fpca.truncation = Truncation::FixedL(l);
        }
        config
    }
}

/// True quantities behind a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// `I x K`.
    pub eta: DMatrix<f64>,
    /// `K x 2`: `β_0(s_k)` and `β_1(s_k)`.
    pub beta: DMatrix<f64>,
    /// `K x 4`.
    pub phi: DMatrix<f64>,
    /// `I x 4`.
    pub scores: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: LongDataset,
    pub truth: Truth,
}

/// Dataset for the scenario's own seed.
pub fn generate_dataset(sc: &SimScenario) -> Result<SimDataset> {
    generate_with_rng(sc, ChaCha8Rng::seed_from_u64(sc.seed))
}

/// Dataset for replicate `rep`: stream `rep` of the scenario seed.
pub fn generate_replicate(sc: &SimScenario, rep: u64) -> Result<SimDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    rng.set_stream(rep);
    generate_with_rng(sc, rng)
}

fn generate_with_rng(sc: &SimScenario, mut rng: ChaCha8Rng) -> Result<SimDataset> {
    sc.validate()?;
    let (n_i, n_k) = (sc.n_subjects, sc.n_grid);
    let grid = sc.grid();
    let truth_basis = SplineBasis::clamped(0.0, 1.0, TRUTH_BASIS, 3)?;
    let beta = truth_basis.evaluate(&grid)? * sc.truth_coefs().transpose();
    let phi = ClosedFormBasis::new(sc.eigenbasis, N_TRUE_COMPONENTS)?.evaluate(&grid)?;

    let x: Vec<f64> = (0..n_i)
        .map(|_| match sc.covariate_kind {
            CovariateKind::BernoulliHalf => f64::from(u8::from(rng.random::<bool>())),
            CovariateKind::StandardNormal => rng.sample(StandardNormal),
        })
        .collect();
    let sd: Vec<f64> = sc.true_lambda.iter().map(|l| l.sqrt()).collect();
    let scores = DMatrix::from_fn(n_i, N_TRUE_COMPONENTS, |_, _| 0.0);
    let mut scores = scores;
    for i in 0..n_i {
        for l in 0..N_TRUE_COMPONENTS {
            scores[(i, l)] = sd[l] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let random = &scores * phi.transpose();
    let eta = DMatrix::from_fn(n_i, n_k, |i, k| beta[(k, 0)] + x[i] * beta[(k, 1)] + random[(i, k)]);

    let family = sc.family();
    let mut outcomes = DMatrix::zeros(n_i, n_k);
    for i in 0..n_i {
        for k in 0..n_k {
            let e = eta[(i, k)];
            outcomes[(i, k)] = match family.kind {
                FamilyKind::BernoulliLogit => f64::from(u8::from(rng.random::<f64>() < family.mean(e))),
                FamilyKind::PoissonLog => {
                    let mu = family.mean(e);
                    if mu > 0.0 {
                        Poisson::new(mu).map_err(|err| Error::fit(err.to_string()))?.sample(&mut rng)
                    } else {
                        0.0
                    }
                }
                FamilyKind::GaussianIdentity => e + sc.gaussian_sd * rng.sample::<f64, _>(StandardNormal),
            };
        }
    }
    let subjects = (1..=n_i).map(|i| format!("id{i:05}")).collect();
    let data = LongDataset::new(subjects, grid, outcomes, DMatrix::from_column_slice(n_i, 1, &x))?
        .with_covariate_names(vec!["x1".into()])?
        .with_family_hint(sc.family);
    Ok(SimDataset { data, truth: Truth { eta, beta, phi, scores } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mise_eta: f64,
    pub ise_beta: Vec<f64>,
    pub ac_beta: Vec<f64>,
    pub mise_phi: f64,
    pub lambda_hat: Vec<f64>,
    /// Pearson correlation of true and predicted scores per component, after
    /// sign alignment.
    pub score_correlation: Vec<f64>,
    pub wall_time_seconds: f64,
}

/// Estimated quantities on the simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    /// `I x K`.
    pub eta: DMatrix<f64>,
    /// `K x (p+1)` curve estimates with pointwise bounds.
    pub beta: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    /// `K x L` eigenfunctions on the grid.
    pub phi: DMatrix<f64>,
    /// `I x L`.
    pub scores: DMatrix<f64>,
    pub lambda: Vec<f64>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        0.0
    }
}

/// Metrics from estimates already evaluated on the grid. Eigenfunctions
/// are sign-aligned to the truth first; components beyond the estimate
/// count as a zero estimate.
pub fn score_estimates(est: &Estimates, truth: &Truth) -> Result<MetricsReport> {
    let (n_i, n_k) = truth.eta.shape();
    if est.eta.shape() != (n_i, n_k) || est.beta.nrows() != n_k || est.phi.nrows() != n_k {
        return Err(Error::argument("estimates and truth are on different grids"));
    }
    if est.beta.shape() != est.lower.shape() || est.beta.shape() != est.upper.shape() {
        return Err(Error::argument("interval bounds do not match the curve estimates"));
    }
    let terms = est.beta.ncols().min(truth.beta.ncols());
    let kf = n_k as f64;
    let mise_eta = (&est.eta - &truth.eta).norm_squared() / (n_i as f64 * kf);
    let ise_beta = (0..terms).map(|r| (est.beta.column(r) - truth.beta.column(r)).norm_squared() / kf).collect();
    let ac_beta = (0..terms)
        .map(|r| {
            (0..n_k).filter(|&k| est.lower[(k, r)] <= truth.beta[(k, r)] && truth.beta[(k, r)] <= est.upper[(k, r)]).count()
                as f64
                / kf
        })
        .collect();

    let n_l = est.phi.ncols().min(truth.phi.ncols());
    let flips = sign_flips(&est.phi.columns(0, n_l).into_owned(), &truth.phi)?;
    let mut mise_phi = 0.0;
    let mut score_correlation = Vec::with_capacity(n_l);
    for l in 0..truth.phi.ncols() {
        if l < n_l {
            let sign = if flips[l] { -1.0 } else { 1.0 };
            mise_phi += (sign * est.phi.column(l) - truth.phi.column(l)).norm_squared() / kf;
            if est.scores.ncols() > l && est.scores.nrows() == truth.scores.nrows() {
                let s: Vec<f64> = est.scores.column(l).iter().map(|v| sign * v).collect();
                let t: Vec<f64> = truth.scores.column(l).iter().copied().collect();
                score_correlation.push(pearson(&s, &t));
            }
        } else {
            mise_phi += truth.phi.column(l).norm_squared() / kf;
        }
    }
    mise_phi /= truth.phi.ncols() as f64;
    Ok(MetricsReport {
        mise_eta,
        ise_beta,
        ac_beta,
        mise_phi,
        lambda_hat: est.lambda.clone(),
        score_correlation,
        wall_time_seconds: 0.0,
    })
}

/// Evaluates a fit on the truth grid and scores it.
pub fn compute_metrics(fit: &GcFpcaFit, truth: &Truth, level: f64) -> Result<MetricsReport> {
    let grid = &fit.eigensystem.grid;
    if grid.len() != truth.eta.ncols() {
        return Err(Error::argument(format!(
            "fit grid has {} points, truth has {}",
            grid.len(),
            truth.eta.ncols()
        )));
    }
    let eta = predict_linear_predictor(fit, &fit.subjects, grid)?;
    let curves = fixed_effect_curves(fit, grid, level)?;
    let col = |f: &dyn Fn(usize, usize) -> f64| DMatrix::from_fn(grid.len(), curves.len(), |k, r| f(k, r));
    let est = Estimates {
        eta,
        beta: col(&|k, r| curves[r].estimate[k]),
        lower: col(&|k, r| curves[r].lower[k]),
        upper: col(&|k, r| curves[r].upper[k]),
        phi: fit.eigensystem.eigenfunctions.clone(),
        scores: fit.scores.clone(),
        lambda: fit.lambda.clone(),
    };
    score_estimates(&est, truth)
}

/// Simulates one replicate, fits it and scores the fit.
pub fn run_replicate(sc: &SimScenario, rep: u64, config: &PipelineConfig, level: f64) -> Result<MetricsReport> {
    let sim = generate_replicate(sc, rep)?;
    let start = Instant::now();
    let out = run_pipeline(&sim.data, &sc.family(), config)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut report = compute_metrics(&out.fit, &sim.truth, level)?;
    report.wall_time_seconds = elapsed;
    Ok(report)
}

/// Median and quartiles of one metric over successful replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        Spread { median: quantile(values, 0.5), q25: quantile(values, 0.25), q75: quantile(values, 0.75) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub scenario: SimScenario,
    pub n_reps: usize,
    pub n_failed: usize,
    pub failures: Vec<(u64, String)>,
    pub replicates: Vec<(u64, MetricsReport)>,
    pub mise_eta: Spread,
    pub ise_beta: Vec<Spread>,
    pub ac_beta: Vec<Spread>,
    /// Coverage averaged over replicates as well as grid points.
    pub ac_beta_mean: Vec<f64>,
    pub mise_phi: Spread,
    pub wall_time: Spread,
}

impl ReplicationSummary {
    pub fn success_fraction(&self) -> f64 {
        (self.n_reps - self.n_failed) as f64 / self.n_reps as f64
    }
}

/// Runs `n_reps` replicates in parallel on the current rayon pool. Replicate
/// `r` draws from stream `r` of the scenario seed, so every metric except
/// the wall time is independent of scheduling.
pub fn run_replications(
    sc: &SimScenario,
    n_reps: usize,
    config: &PipelineConfig,
    level: f64,
) -> Result<ReplicationSummary> {
    sc.validate()?;
    if n_reps == 0 {
        return Err(Error::argument("need at least one replicate"));
    }
    let results: Vec<(u64, Result<MetricsReport>)> = (0..n_reps as u64)
        .into_par_iter()
        .map(|rep| (rep, run_replicate(sc, rep, config, level)))
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results {
        match r {
            Ok(m) => replicates.push((rep, m)),
            Err(e) => {
                warn!("replicate {rep} failed: {e}");
                failures.push((rep, e.to_string()));
            }
        }
    }
    let spread = |f: &dyn Fn(&MetricsReport) -> f64| Spread::of(&replicates.iter().map(|(_, m)| f(m)).collect::<Vec<_>>());
    let terms = replicates.first().map_or(0, |(_, m)| m.ise_beta.len());
    Ok(ReplicationSummary {
        scenario: sc.clone(),
        n_reps,
        n_failed: failures.len(),
        mise_eta: spread(&|m| m.mise_eta),
        ise_beta: (0..terms).map(|r| spread(&|m| m.ise_beta[r])).collect(),
        ac_beta: (0..terms).map(|r| spread(&|m| m.ac_beta[r])).collect(),
        ac_beta_mean: (0..terms)
            .map(|r| replicates.iter().map(|(_, m)| m.ac_beta[r]).sum::<f64>() / replicates.len().max(1) as f64)
            .collect(),
        mise_phi: spread(&|m| m.mise_phi),
        wall_time: spread(&|m| m.wall_time_seconds),
        failures,
        replicates,
    })
}

const TABLE_HEADER: [&str; 8] = [
    "scenario",
    "time",
    "mise_eta_x10",
    "ise_beta0_x100",
    "ac_beta0",
    "ise_beta1_x100",
    "ac_beta1",
    "mise_phi_x10",
];

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Table row of medians: time, MISE(η)×10, ISE(β_0)×10², AC(β_0),
/// ISE(β_1)×10², AC(β_1), MISE(φ)×10.
pub fn table_row(id: &str, time: f64, mise_eta: f64, ise: &[f64], ac: &[f64], mise_phi: f64) -> Vec<String> {
    let get = |v: &[f64], r: usize| v.get(r).copied().unwrap_or(f64::NAN);
    vec![
        id.to_string(),
        fmt(time),
        fmt(10.0 * mise_eta),
        fmt(100.0 * get(ise, 0)),
        fmt(get(ac, 0)),
        fmt(100.0 * get(ise, 1)),
        fmt(get(ac, 1)),
        fmt(10.0 * mise_phi),
    ]
}

/// One median row per summary in the table layout.
pub fn write_table<W: Write>(summaries: &[ReplicationSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TABLE_HEADER)?;
    for s in summaries {
        let med = |v: &[Spread]| v.iter().map(|x| x.median).collect::<Vec<_>>();
        w.write_record(table_row(
            &s.scenario.id,
            s.wall_time.median,
            s.mise_eta.median,
            &med(&s.ise_beta),
            &med(&s.ac_beta),
            s.mise_phi.median,
        ))?;
    }
    w.flush()?;
    Ok(())
}

/// One row per successful replicate followed by a `median` row, all in the
/// table layout.
pub fn write_replicates<W: Write>(summary: &ReplicationSummary, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["replicate"];
    header.extend_from_slice(&TABLE_HEADER[1..]);
    w.write_record(&header)?;
    for (rep, m) in &summary.replicates {
        let mut row = table_row(&rep.to_string(), m.wall_time_seconds, m.mise_eta, &m.ise_beta, &m.ac_beta, m.mise_phi);
        row[0] = rep.to_string();
        w.write_record(&row)?;
    }
    let med = |v: &[Spread]| v.iter().map(|x| x.median).collect::<Vec<_>>();
    w.write_record(table_row(
        "median",
        summary.wall_time.median,
        summary.mise_eta.median,
        &med(&summary.ise_beta),
        &med(&summary.ac_beta),
        summary.mise_phi.median,
    ))?;
    w.flush()?;
    Ok(())
}
