//! Small dense optimizers used by the local fits.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub param_tol: f64,
    pub grad_tol: f64,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Quasi-Newton minimization with Armijo backtracking. The inverse Hessian
/// is seeded from a forward-difference Hessian of the gradient at `x0`.
pub fn bfgs_minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g) = f(x.as_slice());
    let mut g = DVector::from_vec(g);
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return BfgsResult { x: x0.to_vec(), value: fx, converged: false, iterations: 0, trace };
    }
    let mut hinv = initial_inverse_hessian(&mut f, &x, &g);
    let mut converged = g.amax() < opts.grad_tol;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            // Lost descent: restart from steepest descent.
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + t * &dir;
            let (fc, gc) = f(cand.as_slice());
            if fc.is_finite() && fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc, DVector::from_vec(gc)));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            converged = g.amax() < opts.grad_tol.sqrt();
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let rel = (fx - f_new).abs() / fx.abs().max(1.0);
        let step = s.amax();
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (rho * rho * yhy + rho) * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        if rel < opts.rel_tol || step < opts.param_tol || g.amax() < opts.grad_tol {
            converged = true;
        }
    }
    BfgsResult { x: x.iter().copied().collect(), value: fx, converged, iterations, trace }
}

fn initial_inverse_hessian<F>(f: &mut F, x: &DVector<f64>, g: &DVector<f64>) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-5 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        xp[j] += step;
        let (_, gp) = f(xp.as_slice());
        for i in 0..n {
            h[(i, j)] = (gp[i] - g[i]) / step;
        }
    }
    let h = 0.5 * (&h + h.transpose());
    let eig = h.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 && min.is_finite() {
        if let Some(inv) = h.try_inverse() {
            return inv;
        }
    }
    DMatrix::identity(n, n)
}

#[derive(Debug, Clone)]
pub struct BrentResult {
    pub x: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Best objective found after each iteration.
    pub trace: Vec<f64>,
}

/// Brent's parabolic/golden-section maximization on `[lo, hi]`.
pub fn brent_max<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> BrentResult {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = -f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut trace = vec![-fx];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            converged = true;
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = -f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
        trace.push(-fx);
    }
    BrentResult { x, converged, iterations, trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let opts = BfgsOptions { max_iter: 500, rel_tol: 0.0, param_tol: 0.0, grad_tol: 1e-10 };
        let r = bfgs_minimize(f, &[-1.2, 1.0], &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn brent_finds_parabola_peak() {
        let r = brent_max(|x| -(x - 0.3).powi(2) + 2.0, -1.0, 2.0, 1e-10, 100);
        assert!(r.converged);
        assert!((r.x - 0.3).abs() < 1e-8);
    }
}
