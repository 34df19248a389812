mod common;
use common::*;

use gcfpca::joint_glmm::*;
use gcfpca::{Family, FamilyKind};
use nalgebra::{DMatrix, DVector};

#[test]
fn schur_solver_matches_dense_solver() {
    let diff = schur_vs_dense();
    assert!(diff < 1e-8, "max difference {diff:e}");
}

#[test]
fn gradient_matches_central_differences() {
    let rel = gradient_vs_central_differences();
    assert!(rel < 1e-4, "max relative error {rel:e}");
}

#[test]
fn unpenalized_gaussian_fit_is_least_squares() {
    let d = design(FamilyKind::GaussianIdentity, 30, 15, 1, 0.05, 21);
    let es0 = d.eigensystem.truncated(0).unwrap();
    let mut d0 = d.clone();
    d0.eigenfunctions = es0.eigenfunctions.clone();
    d0.eigensystem = es0;
    let controls = JointControls { estimate_smoothing: false, initial_tau: 0.0, ..Default::default() };
    let fit = fit_joint(&d0, &Family::gaussian(1.0), &controls).unwrap();
    let (x, y) = dense_design(&d0);
    let xtx = x.transpose() * &x;
    let ols = xtx.cholesky().unwrap().solve(&(x.transpose() * DVector::from_vec(y)));
    let beta = DVector::from_iterator(d0.n_fixed(), fit.beta_coefs.transpose().iter().copied());
    let diff = (beta - ols).amax();
    assert!(diff < 1e-8, "max difference {diff:e}");
}

/// Independent maximizer: Newton with a finite-difference Hessian of
/// finite-difference gradients of the objective alone.
fn fd_newton(f: &dyn Fn(&DVector<f64>) -> f64, x0: DVector<f64>) -> (DVector<f64>, f64) {
    let n = x0.len();
    let mut x = x0;
    let h = 1e-4;
    let grad = |x: &DVector<f64>| {
        DVector::from_fn(n, |j, _| {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
    };
    for _ in 0..50 {
        let g = grad(&x);
        let mut hess = DMatrix::zeros(n, n);
        for j in 0..n {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[j] += h;
            b[j] -= h;
            hess.set_column(j, &((grad(&a) - grad(&b)) / (2.0 * h)));
        }
        let hess = 0.5 * (&hess + hess.transpose());
        let step = (-hess).cholesky().map(|c| c.solve(&g)).unwrap_or_else(|| g.clone() * 0.1);
        let fx = f(&x);
        let mut t = 1.0;
        while f(&(&x + t * &step)) < fx && t > 1e-8 {
            t *= 0.5;
        }
        x += t * &step;
        if g.amax() < 1e-9 {
            break;
        }
    }
    let fx = f(&x);
    (x, fx)
}

#[test]
fn bernoulli_optimum_matches_independent_optimizer() {
    let d = design(FamilyKind::BernoulliLogit, 5, 10, 1, 0.0, 31);
    let fam = Family::bernoulli();
    let v = var(&d, 1.0);
    let controls = JointControls::default();
    let (state, trace) = maximize_penalized(&d, &fam, JointState::zeros(&d), &v, &controls).unwrap();
    let ours = penalized_objective(&d, &fam, &state, &v, 2).unwrap();
    assert_eq!(*trace.last().unwrap(), ours);

    let q = d.n_fixed();
    let unflatten = |x: &DVector<f64>| JointState {
        beta: x.rows(0, q).into_owned(),
        scores: DMatrix::from_fn(d.n_subjects(), 1, |i, _| x[q + i]),
    };
    let f = |x: &DVector<f64>| penalized_objective(&d, &fam, &unflatten(x), &v, 2).unwrap();
    let (_, best) = fd_newton(&f, DVector::zeros(q + d.n_subjects()));
    assert!((ours - best).abs() < 1e-3, "ours {ours}, oracle {best}");
    assert!(ours >= best - 1e-6);
}

#[test]
fn newton_iterations_never_decrease_the_objective() {
    for kind in [FamilyKind::BernoulliLogit, FamilyKind::PoissonLog, FamilyKind::GaussianIdentity] {
        let d = design(kind, 40, 20, 3, 0.1, 41);
        let fam = family(kind);
        let v = var(&d, fam.phi());
        let (_, trace) = maximize_penalized(&d, &fam, random_state(&d, 3, 0.5), &v, &JointControls::default()).unwrap();
        assert!(trace.len() > 1);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs(), "{kind}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn permuting_subjects_permutes_scores_only() {
    let d = design(FamilyKind::BernoulliLogit, 60, 30, 2, 0.0, 51);
    let fam = Family::bernoulli();
    let fit = fit_joint(&d, &fam, &JointControls::default()).unwrap();
    let n = d.n_subjects();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let mut p = d.clone();
    p.subjects = perm.iter().map(|&i| d.subjects[i].clone()).collect();
    p.covariates = DMatrix::from_fn(n, d.n_terms(), |i, r| d.covariates[(perm[i], r)]);
    p.outcomes = DMatrix::from_fn(n, d.n_grid(), |i, k| d.outcomes[(perm[i], k)]);
    p.observed = DMatrix::from_fn(n, d.n_grid(), |i, k| d.observed[(perm[i], k)]);
    let fit_p = fit_joint(&p, &fam, &JointControls::default()).unwrap();
    let diff = (&fit.beta_coefs - &fit_p.beta_coefs).amax();
    assert!(diff < 1e-10, "beta difference {diff:e} ({} vs {} outer)", fit.n_outer, fit_p.n_outer);
    for i in 0..n {
        for l in 0..d.n_components() {
            assert!((fit_p.scores[(i, l)] - fit.scores[(perm[i], l)]).abs() < 1e-10);
        }
    }
}

#[test]
fn fitted_model_satisfies_its_invariants() {
    for kind in [FamilyKind::BernoulliLogit, FamilyKind::PoissonLog, FamilyKind::GaussianIdentity] {
        let d = design(kind, 80, 25, 2, 0.05, 61);
        let fit = fit_joint(&d, &family(kind), &JointControls::default()).unwrap();
        assert!(fit.converged, "{kind} did not converge: {:?} {:?} {:?}", fit.lambda, fit.smoothing, fit.laml_trace);
        let c = &fit.coef_cov;
        assert!((c - c.transpose()).amax() == 0.0);
        assert!(c.diagonal().iter().all(|&v| v >= 0.0));
        let n = d.n_subjects() as f64;
        for l in 0..fit.n_components() {
            assert!(fit.lambda[l] > 0.0);
            let mean = fit.scores.column(l).mean();
            assert!(mean.abs() <= 3.0 * (fit.lambda[l] / n).sqrt(), "{kind} component {l}: mean {mean}");
        }
        let band = cma_bands(&fit, 1, &d.grid, 0.95, 2000, 9).unwrap();
        let point = &fixed_effect_curves(&fit, &d.grid, 0.95).unwrap()[1];
        assert!(band.quantile >= band.pointwise_quantile);
        for k in 0..d.n_grid() {
            assert!(band.lower[k] <= point.lower[k] && band.upper[k] >= point.upper[k]);
        }
    }
}
