//! Local windows along the functional domain.
//!
//! Grid indices are 0-based. Bin `k` is centred on grid point `k` and holds
//! the indices `k - h ..= k + h` with `h = ⌈w/2⌉`, wrapped modulo `K` for
//! cyclic domains and truncated at the ends otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinPlan {
    pub n_grid: usize,
    /// Window width `w` in grid points.
    pub width: usize,
    pub half_width: usize,
    pub cyclic: bool,
    /// `members[k]` are the grid indices of bin `k`, in increasing offset
    /// order from `k - h` to `k + h`.
    pub members: Vec<Vec<usize>>,
}

impl BinPlan {
    pub fn n_bins(&self) -> usize {
        self.members.len()
    }

    pub fn centers(&self) -> impl Iterator<Item = usize> {
        0..self.n_grid
    }
}

/// Bins with width `round(w_fraction * K)`.
pub fn make_bins(n_grid: usize, w_fraction: f64, cyclic: bool) -> Result<BinPlan> {
    if !(w_fraction > 0.0 && w_fraction <= 1.0) {
        return Err(Error::argument(format!("bin fraction must be in (0, 1], got {w_fraction}")));
    }
    let width = (w_fraction * n_grid as f64).round() as usize;
    make_bins_with_width(n_grid, width, cyclic)
}

/// Bins with an absolute width `w` in grid points.
pub fn make_bins_with_width(n_grid: usize, width: usize, cyclic: bool) -> Result<BinPlan> {
    if n_grid < 2 {
        return Err(Error::argument(format!("need at least 2 grid points, got {n_grid}")));
    }
    if width < 1 {
        return Err(Error::argument("bin width rounds to zero grid points"));
    }
    if width >= n_grid {
        return Err(Error::argument(format!(
            "bin width {width} covers the whole grid of {n_grid} points"
        )));
    }
    let half = width.div_ceil(2);
    if cyclic && 2 * half + 1 > n_grid {
        return Err(Error::argument(format!(
            "cyclic bins of {} points would wrap onto themselves on a grid of {n_grid}",
            2 * half + 1
        )));
    }
    let k_i = n_grid as isize;
    let h_i = half as isize;
    let members = (0..k_i)
        .map(|k| {
            (k - h_i..=k + h_i)
                .filter_map(|j| {
                    if cyclic {
                        Some(j.rem_euclid(k_i) as usize)
                    } else if (0..k_i).contains(&j) {
                        Some(j as usize)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(BinPlan { n_grid, width, half_width: half, cyclic, members })
}
