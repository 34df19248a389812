//! Fixtures and oracle measurements shared by the integration tests.
#![allow(dead_code)]

use gcfpca::basis::{difference_penalty, SplineBasis};
use gcfpca::fpca::{estimate_eigensystem, EigenSystem, FpcaOptions, Smoothing, Truncation};
use gcfpca::ingest::LongDataset;
use gcfpca::joint_glmm::*;
use gcfpca::local_glmm::RandomEffectMatrix;
use gcfpca::{Family, FamilyKind};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

pub const M: usize = 5;

pub fn grid(k: usize) -> Vec<f64> {
    (1..=k).map(|j| j as f64 / k as f64).collect()
}

pub fn eigensystem(k: usize, l: usize, seed: u64) -> EigenSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid(k);
    let y = DMatrix::from_fn(40, k, |_, j| {
        let s = g[j];
        rng.sample::<f64, _>(StandardNormal) * (6.0 * s).sin()
            + 0.7 * rng.sample::<f64, _>(StandardNormal) * (3.0 * s).cos()
            + 0.3 * rng.sample::<f64, _>(StandardNormal) * s
    });
    let opts = FpcaOptions {
        n_smooth_basis: Some(k.min(8)),
        truncation: Truncation::FixedL(l.max(1)),
        smoothing: Smoothing::Fixed(1e-3),
    };
    let es = estimate_eigensystem(&RandomEffectMatrix::unmasked(y), &g, &opts).unwrap();
    es.truncated(l).unwrap()
}

pub fn dataset(kind: FamilyKind, n_i: usize, k: usize, es: &EigenSystem, missing: f64, seed: u64) -> LongDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid(k);
    let x: Vec<f64> = (0..n_i).map(|_| rng.sample(StandardNormal)).collect();
    let mut y = DMatrix::zeros(n_i, k);
    let mut obs = DMatrix::from_element(n_i, k, true);
    for i in 0..n_i {
        let xi: Vec<f64> = (0..es.n_components()).map(|_| 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..k {
            let mut eta = -0.3 + (3.0 * g[j]).sin() + 0.5 * x[i] * g[j];
            for (l, v) in xi.iter().enumerate() {
                eta += v * es.eigenfunctions[(j, l)];
            }
            y[(i, j)] = match kind {
                FamilyKind::BernoulliLogit => f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()))),
                FamilyKind::PoissonLog => Poisson::new(eta.exp()).unwrap().sample(&mut rng),
                FamilyKind::GaussianIdentity => eta + 0.5 * rng.sample::<f64, _>(StandardNormal),
            };
            if rng.random::<f64>() < missing {
                obs[(i, j)] = false;
                y[(i, j)] = f64::NAN;
            }
        }
    }
    let ids = (0..n_i).map(|i| format!("s{i}")).collect();
    LongDataset::with_mask(ids, g, y, obs, DMatrix::from_column_slice(n_i, 1, &x)).unwrap()
}

pub fn design(kind: FamilyKind, n_i: usize, k: usize, l: usize, missing: f64, seed: u64) -> JointDesign {
    let es = eigensystem(k, l, seed);
    let data = dataset(kind, n_i, k, &es, missing, seed + 100);
    let basis = SplineBasis::clamped(grid(k)[0], 1.0, M, 3).unwrap();
    assemble_joint_design(&data, &basis, &es).unwrap()
}

pub fn family(kind: FamilyKind) -> Family {
    match kind {
        FamilyKind::GaussianIdentity => Family::gaussian(0.3),
        k => Family::from_kind(k),
    }
}

pub fn random_state(d: &JointDesign, seed: u64, scale: f64) -> JointState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = JointState::zeros(d);
    s.beta = DVector::from_fn(d.n_fixed(), |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    s.scores = DMatrix::from_fn(d.n_subjects(), d.n_components(), |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    s
}

pub fn var(d: &JointDesign, phi: f64) -> VarianceComponents {
    VarianceComponents {
        lambda: (0..d.n_components()).map(|l| 0.9 / (l + 1) as f64).collect(),
        tau: (0..d.n_terms()).map(|r| 0.5 + r as f64).collect(),
        dispersion: phi,
    }
}

/// Dense `[fixed | random]` design restricted to observed cells.
pub fn dense_design(d: &JointDesign) -> (DMatrix<f64>, Vec<f64>) {
    let (n_k, q) = (d.n_grid(), d.n_fixed());
    let cols = q + d.n_subjects() * d.n_components();
    let mut full = DMatrix::zeros(d.n_subjects() * n_k, cols);
    for (r, c, v) in d.fixed_block_triplets() {
        full[(r, c)] += v;
    }
    for (r, c, v) in d.random_block_triplets() {
        full[(r, q + c)] += v;
    }
    let keep: Vec<usize> = (0..d.n_subjects() * n_k).filter(|&row| d.observed[(row / n_k, row % n_k)]).collect();
    let x = DMatrix::from_fn(keep.len(), cols, |a, b| full[(keep[a], b)]);
    let y = keep.iter().map(|&row| d.outcomes[(row / n_k, row % n_k)]).collect();
    (x, y)
}

pub fn dense_penalty(d: &JointDesign, v: &VarianceComponents) -> DMatrix<f64> {
    let q = d.n_fixed();
    let n = q + d.n_subjects() * d.n_components();
    let p = difference_penalty(M, 2).unwrap().matrix;
    let mut out = DMatrix::zeros(n, n);
    for r in 0..d.n_terms() {
        out.view_mut((r * M, r * M), (M, M)).copy_from(&(v.tau[r] * &p));
    }
    for i in 0..d.n_subjects() {
        for l in 0..d.n_components() {
            let j = q + i * d.n_components() + l;
            out[(j, j)] = 1.0 / v.lambda[l];
        }
    }
    out
}

pub fn flatten(d: &JointDesign, s: &JointState) -> DVector<f64> {
    let mut v = s.beta.iter().copied().collect::<Vec<_>>();
    for i in 0..d.n_subjects() {
        v.extend(s.scores.row(i).iter());
    }
    DVector::from_vec(v)
}

pub fn random_curves(n_i: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = grid(k);
    DMatrix::from_fn(n_i, k, |_, j| {
        let a: f64 = rng.sample(StandardNormal);
        let t = s[j];
        a * (2.0 * std::f64::consts::PI * t).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn dense_reference(y: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n_i, k) = y.shape();
    let mut yc = y.clone();
    for j in 0..k {
        let m = yc.column(j).mean();
        yc.column_mut(j).add_scalar_mut(-m);
    }
    let mut cov = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut acc = 0.0;
            for i in 0..n_i {
                acc += yc[(i, a)] * yc[(i, b)];
            }
            cov[(a, b)] = acc / (n_i - 1) as f64 / k as f64;
        }
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let mut vecs = DMatrix::zeros(k, k);
    for (l, &j) in order.iter().enumerate() {
        vecs.set_column(l, &(eig.eigenvectors.column(j) * (k as f64).sqrt()));
    }
    (vals, vecs)
}

/// Largest gap between the block-eliminated Newton step and a dense solve,
/// over instances with `I·L ≤ 50`.
pub fn schur_vs_dense() -> f64 {
    let mut worst: f64 = 0.0;
    for (kind, n_i, l, seed) in [
        (FamilyKind::BernoulliLogit, 10, 2, 1),
        (FamilyKind::PoissonLog, 12, 3, 2),
        (FamilyKind::GaussianIdentity, 25, 2, 3),
        (FamilyKind::BernoulliLogit, 50, 1, 4),
    ] {
        let d = design(kind, n_i, 12, l, 0.1, seed);
        assert!(d.n_subjects() * d.n_components() <= 50);
        let fam = family(kind);
        let v = var(&d, fam.phi());
        let state = random_state(&d, seed, 0.3);
        let dir = newton_direction(&d, &fam, &state, &v, 2).unwrap();

        let (x, y) = dense_design(&d);
        let theta = flatten(&d, &state);
        let eta = &x * &theta;
        let w = DVector::from_fn(eta.len(), |j, _| fam.variance(eta[j]) / fam.phi());
        let res = DVector::from_fn(eta.len(), |j, _| (y[j] - fam.mean(eta[j])) / fam.phi());
        let pen = dense_penalty(&d, &v);
        let h = x.transpose() * DMatrix::from_diagonal(&w) * &x + &pen;
        let g = x.transpose() * res - &pen * &theta;
        let dense = h.lu().solve(&g).unwrap();
        worst = worst.max((flatten(&d, &dir) - dense).amax());
    }
    worst
}

/// Largest relative gap between the analytic penalized gradient and central
/// differences, over all three families.
pub fn gradient_vs_central_differences() -> f64 {
    let mut worst: f64 = 0.0;
    for kind in [FamilyKind::BernoulliLogit, FamilyKind::PoissonLog, FamilyKind::GaussianIdentity] {
        let d = design(kind, 5, 10, 2, 0.0, 9);
        let fam = family(kind);
        let v = var(&d, fam.phi());
        let state = random_state(&d, 17, 0.4);
        let g = flatten(&d, &penalized_gradient(&d, &fam, &state, &v, 2).unwrap());
        let f = |s: &JointState| penalized_objective(&d, &fam, s, &v, 2).unwrap();
        let n_l = d.n_components();
        for j in 0..g.len() {
            let h = 1e-5;
            let (mut up, mut dn) = (state.clone(), state.clone());
            if j < d.n_fixed() {
                up.beta[j] += h;
                dn.beta[j] -= h;
            } else {
                let (i, l) = ((j - d.n_fixed()) / n_l, (j - d.n_fixed()) % n_l);
                up.scores[(i, l)] += h;
                dn.scores[(i, l)] -= h;
            }
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
    }
    worst
}

/// Largest gap between the unsmoothed full-basis eigensystem and a dense
/// eigensolver, over eigenvalues and sign-matched eigenvectors.
pub fn eigen_vs_dense() -> f64 {
    let mut worst: f64 = 0.0;
    for (k, seed) in [(8, 1), (12, 2), (20, 3)] {
        let y = random_curves(30, k, seed);
        let opts = FpcaOptions {
            n_smooth_basis: Some(k),
            truncation: Truncation::FixedL(3),
            smoothing: Smoothing::Fixed(0.0),
        };
        let es = estimate_eigensystem(&RandomEffectMatrix::unmasked(y.clone()), &grid(k), &opts).unwrap();
        let (vals, vecs) = dense_reference(&y);
        for l in 0..3 {
            worst = worst.max((es.eigenvalues[l] - vals[l]).abs());
            let sign = es.eigenfunctions.column(l).dot(&vecs.column(l)).signum();
            worst = worst.max((es.eigenfunctions.column(l) - sign * vecs.column(l)).amax());
        }
    }
    worst
}

/// `max |(1/K) ΦᵀΦ − I|` for a smoothed eigensystem.
pub fn orthonormality_error() -> f64 {
    let k = 60;
    let y = random_curves(80, k, 7);
    let opts = FpcaOptions { truncation: Truncation::FixedL(4), ..FpcaOptions::default() };
    let es = estimate_eigensystem(&RandomEffectMatrix::unmasked(y), &grid(k), &opts).unwrap();
    let gram = es.eigenfunctions.transpose() * &es.eigenfunctions / k as f64;
    (gram - DMatrix::identity(4, 4)).amax()
}
