mod common;
use common::*;

use gcfpca::fpca::{estimate_eigensystem, evaluate_eigenfunctions, FpcaOptions, Truncation};
use gcfpca::local_glmm::RandomEffectMatrix;
use nalgebra::DMatrix;

#[test]
fn unsmoothed_full_basis_matches_dense_eigensolver() {
    let diff = eigen_vs_dense();
    assert!(diff < 1e-8, "max difference {diff:e}");
}

#[test]
fn eigenfunctions_are_orthonormal_on_the_grid() {
    let k = 60;
    let y = random_curves(80, k, 7);
    let opts = FpcaOptions { truncation: Truncation::FixedL(4), ..FpcaOptions::default() };
    let es = estimate_eigensystem(&RandomEffectMatrix::unmasked(y), &grid(k), &opts).unwrap();
    assert!(orthonormality_error() < 1e-8);
    assert!(es.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    assert!(es.all_eigenvalues.iter().all(|&v| v >= 0.0));
    let on_grid = evaluate_eigenfunctions(&es, &es.grid).unwrap();
    assert!((on_grid - &es.eigenfunctions).amax() < 1e-8);
}

#[test]
fn dense_evaluation_stays_nearly_orthonormal() {
    let k = 50;
    let y = random_curves(60, k, 11);
    let opts = FpcaOptions { truncation: Truncation::FixedL(3), ..FpcaOptions::default() };
    let es = estimate_eigensystem(&RandomEffectMatrix::unmasked(y), &grid(k), &opts).unwrap();
    let (lo, hi) = (es.grid[0], es.grid[k - 1]);
    let n = 10 * k;
    let pts: Vec<f64> = (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect();
    let phi = evaluate_eigenfunctions(&es, &pts).unwrap();
    // Grid normalization is a Riemann sum over (lo - 1/K, hi]; rescale to the dense interval.
    let width = hi - lo + 1.0 / k as f64;
    let gram = phi.transpose() * &phi * ((hi - lo) / (n - 1) as f64) / width;
    let err = (gram - DMatrix::identity(3, 3)).amax();
    assert!(err < 5e-2, "dense gram error {err}");
}
