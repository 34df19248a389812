//! The four-step fitting pipeline: binning, local GLMMs, FPCA of the
//! random effects and the joint GLMM.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::binning::make_bins;
use crate::error::{Error, Result};
use crate::family::Family;
use crate::fpca::{estimate_eigensystem, EigenSystem, FpcaOptions};
use crate::ingest::LongDataset;
use crate::joint_glmm::{assemble_joint_design, fit_joint, GcFpcaFit, JointControls};
use crate::local_glmm::{assemble_random_effect_matrix, fit_all_bins, LocalControls};

pub const DEFAULT_BIN_FRACTION: f64 = 0.05;
pub const DEFAULT_FIXED_BASIS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bin_fraction: f64,
    /// Let bins wrap around the ends of the domain.
    pub cyclic: bool,
    /// Cubic B-spline dimension `M` for the fixed-effect curves.
    pub n_fixed_basis: usize,
    pub fpca: FpcaOptions,
    pub local: LocalControls,
    pub joint: JointControls,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bin_fraction: DEFAULT_BIN_FRACTION,
            cyclic: false,
            n_fixed_basis: DEFAULT_FIXED_BASIS,
            fpca: FpcaOptions::default(),
            local: LocalControls::default(),
            joint: JointControls::default(),
        }
    }
}

/// Wall time of each step in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub binning: f64,
    pub local_fits: f64,
    pub fpca: f64,
    pub joint: f64,
}

impl StepTimings {
    pub fn total(&self) -> f64 {
        self.binning + self.local_fits + self.fpca + self.joint
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSummary {
    pub n_bins: usize,
    pub bin_width: usize,
    pub failed_bins: Vec<usize>,
    pub nonconverged_bins: Vec<usize>,
    pub zero_variance_bins: Vec<usize>,
    pub max_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct EigenStage {
    pub eigensystem: EigenSystem,
    pub local: LocalSummary,
    pub timings: StepTimings,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fit: GcFpcaFit,
    pub local: LocalSummary,
    pub timings: StepTimings,
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Steps 1 to 3: local fits and the eigensystem of their random effects.
pub fn estimate_eigen_stage(data: &LongDataset, family: &Family, config: &PipelineConfig) -> Result<EigenStage> {
    data.validate_family(family)?;
    let mut timings = StepTimings::default();

    let t = Instant::now();
    let plan = make_bins(data.n_grid(), config.bin_fraction, config.cyclic)?;
    timings.binning = seconds(t);

    let t = Instant::now();
    let fits = fit_all_bins(data, &plan, family, &config.local)?;
    let bhat = assemble_random_effect_matrix(&fits, data.n_subjects(), data.n_grid())?;
    timings.local_fits = seconds(t);
    let ok = || fits.iter().filter_map(|r| r.as_ref().ok());
    let local = LocalSummary {
        n_bins: plan.n_bins(),
        bin_width: plan.width,
        failed_bins: bhat.failed_bins.clone(),
        nonconverged_bins: ok().filter(|f| !f.converged).map(|f| f.bin_center).collect(),
        zero_variance_bins: ok().filter(|f| f.sigma2 == 0.0).map(|f| f.bin_center).collect(),
        max_iterations: ok().map(|f| f.n_iter).max().unwrap_or(0),
    };
    info!(
        "local fits: {} bins, {} failed, {} at zero variance ({:.2}s)",
        local.n_bins,
        local.failed_bins.len(),
        local.zero_variance_bins.len(),
        timings.local_fits
    );

    let t = Instant::now();
    let eigensystem = estimate_eigensystem(&bhat, &data.grid, &config.fpca)?;
    timings.fpca = seconds(t);
    info!("eigensystem: L = {}, PVE = {:.4} ({:.2}s)", eigensystem.n_components(), eigensystem.pve, timings.fpca);
    Ok(EigenStage { eigensystem, local, timings })
}

/// Cubic basis for the fixed-effect curves spanning the data grid.
pub fn fixed_effect_basis(grid: &[f64], n_basis: usize) -> Result<SplineBasis> {
    let (Some(&lo), Some(&hi)) = (grid.first(), grid.last()) else {
        return Err(Error::argument("empty grid"));
    };
    SplineBasis::clamped(lo, hi, n_basis, 3)
}

/// Runs all four steps.
pub fn run_pipeline(data: &LongDataset, family: &Family, config: &PipelineConfig) -> Result<PipelineOutput> {
    let stage = estimate_eigen_stage(data, family, config)?;
    let mut timings = stage.timings;
    let t = Instant::now();
    let basis = fixed_effect_basis(&data.grid, config.n_fixed_basis)?;
    let design = assemble_joint_design(data, &basis, &stage.eigensystem)?;
    let fit = fit_joint(&design, family, &config.joint)?;
    timings.joint = seconds(t);
    info!(
        "joint fit: {} outer / {} inner iterations, converged = {} ({:.2}s)",
        fit.n_outer, fit.n_inner, fit.converged, timings.joint
    );
    Ok(PipelineOutput { fit, local: stage.local, timings })
}
