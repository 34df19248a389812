//! B-spline bases, difference penalties and the closed-form eigenbases used
//! by the simulation generator.
//!
//! Basis functions are evaluated with the Cox–de Boor triangular scheme, so
//! each point produces only its `degree + 1` non-zero values. Dense
//! evaluation is built on top of the sparse row.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Slack allowed when checking that a point lies inside the domain.
const DOMAIN_EPS: f64 = 1e-12;

/// A univariate B-spline basis on a closed interval.
///
/// For non-cyclic bases `knots` is the full (clamped or open) knot vector and
/// `n_basis == knots.len() - degree - 1`. Cyclic bases store the periodically
/// extended knot vector; the extended functions are wrapped modulo
/// `n_basis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
    degree: usize,
    n_basis: usize,
    domain: (f64, f64),
    cyclic: bool,
}

/// Non-zero basis values at one point: `(basis index, value)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

impl SplineBasis {
    /// Builds a basis from an explicit knot vector. The domain is
    /// `[knots[degree], knots[n_basis]]`.
    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < 2 * (degree + 1) {
            return Err(Error::Construction(format!(
                "{} knots cannot support a degree-{degree} basis",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Construction("knots must be finite".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Construction("knot vector must be non-decreasing".into()));
        }
        let n_basis = knots.len() - degree - 1;
        let (a, b) = (knots[degree], knots[n_basis]);
        if b <= a {
            return Err(Error::Construction("knot vector spans an empty domain".into()));
        }
        // No knot may repeat more than degree + 1 times.
        let mut run = 1;
        for w in knots.windows(2) {
            run = if w[0] == w[1] { run + 1 } else { 1 };
            if run > degree + 1 {
                return Err(Error::Construction(format!(
                    "knot {} has multiplicity above degree + 1",
                    w[0]
                )));
            }
        }
        Ok(SplineBasis { knots, degree, n_basis, domain: (a, b), cyclic: false })
    }

    /// Clamped basis with `n_basis` functions and equally spaced interior knots.
    pub fn clamped(lower: f64, upper: f64, n_basis: usize, degree: usize) -> Result<Self> {
        if !(upper > lower) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::Construction(format!("invalid domain [{lower}, {upper}]")));
        }
        if n_basis < degree + 1 {
            return Err(Error::Construction(format!(
                "a clamped degree-{degree} basis needs at least {} functions",
                degree + 1
            )));
        }
        let n_interior = n_basis - degree - 1;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|j| lower + (upper - lower) * j as f64 / (n_interior + 1) as f64)
            .collect();
        Self::clamped_with_interior(lower, upper, &interior, degree)
    }

    /// Clamped basis with the given interior knots; boundary knots get
    /// multiplicity `degree + 1`.
    pub fn clamped_with_interior(
        lower: f64,
        upper: f64,
        interior: &[f64],
        degree: usize,
    ) -> Result<Self> {
        if interior.iter().any(|&k| k <= lower || k >= upper) {
            return Err(Error::Construction("interior knots must lie strictly inside the domain".into()));
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(lower, degree + 1));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Self::from_knots(knots, degree)
    }

    /// Periodic basis with `n_basis` functions on equally spaced knots.
    pub fn cyclic(lower: f64, upper: f64, n_basis: usize, degree: usize) -> Result<Self> {
        if !(upper > lower) {
            return Err(Error::Construction(format!("invalid domain [{lower}, {upper}]")));
        }
        if n_basis < degree + 1 {
            return Err(Error::Construction(format!(
                "a cyclic degree-{degree} basis needs at least {} functions",
                degree + 1
            )));
        }
        let h = (upper - lower) / n_basis as f64;
        let knots: Vec<f64> = (0..=(n_basis + 2 * degree))
            .map(|j| lower + (j as f64 - degree as f64) * h)
            .collect();
        Ok(SplineBasis { knots, degree, n_basis, domain: (lower, upper), cyclic: true })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn is_cyclic(&self) -> bool {
        self.cyclic
    }

    fn check_point(&self, x: f64) -> Result<f64> {
        let (a, b) = self.domain;
        let tol = DOMAIN_EPS * (1.0 + a.abs().max(b.abs()));
        if !x.is_finite() || x < a - tol || x > b + tol {
            return Err(Error::Domain { point: x, lower: a, upper: b });
        }
        Ok(x.clamp(a, b))
    }

    /// Index `mu` with `knots[mu] <= x < knots[mu + 1]`, restricted to the
    /// spans that carry the domain.
    fn find_span(&self, x: f64) -> usize {
        let d = self.degree;
        let n_ext = self.knots.len() - d - 1;
        let (lo, hi) = (d, n_ext - 1);
        if x >= self.knots[hi + 1] {
            // Right end of the domain: use the last non-empty span.
            let mut mu = hi;
            while mu > lo && self.knots[mu] == self.knots[mu + 1] {
                mu -= 1;
            }
            return mu;
        }
        // upper_bound over knots[lo..=hi+1]
        let slice = &self.knots[lo..=hi + 1];
        let pos = slice.partition_point(|&k| k <= x);
        (lo + pos.saturating_sub(1)).clamp(lo, hi)
    }

    /// Non-zero basis values at `x`.
    pub fn eval_sparse(&self, x: f64) -> Result<SparseRow> {
        let x = self.check_point(x)?;
        let d = self.degree;
        let mu = self.find_span(x);
        let t = &self.knots;

        // Triangular Cox–de Boor recursion (values of N_{mu-d..=mu, d}).
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }

        let first = mu - d;
        let row = n
            .into_iter()
            .enumerate()
            .map(|(r, v)| {
                let idx = first + r;
                let idx = if self.cyclic { idx % self.n_basis } else { idx };
                (idx, v)
            })
            .collect();
        Ok(row)
    }

    /// Dense evaluation: row `j` holds `B_1(x_j) .. B_M(x_j)`.
    pub fn evaluate(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(points.len(), self.n_basis);
        for (j, &x) in points.iter().enumerate() {
            for (m, v) in self.eval_sparse(x)? {
                out[(j, m)] += v;
            }
        }
        Ok(out)
    }

    /// Difference penalty matching this basis (cyclic differences when the
    /// basis is cyclic).
    pub fn penalty(&self, order: usize) -> Result<PenaltyMatrix> {
        if self.cyclic {
            cyclic_difference_penalty(self.n_basis, order)
        } else {
            difference_penalty(self.n_basis, order)
        }
    }
}

/// `DᵀD` for an order-`order` difference operator `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub order: usize,
    pub matrix: DMatrix<f64>,
    /// Dimension of the penalty null space.
    pub null_dim: usize,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.dim() - self.null_dim
    }

    pub fn quadratic_form(&self, coefs: &[f64]) -> f64 {
        let m = self.dim();
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                acc += coefs[i] * self.matrix[(i, j)] * coefs[j];
            }
        }
        acc
    }
}

/// Order-`order` difference matrix, `(M - order) x M`.
pub fn difference_operator(m: usize, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || m <= order {
        return Err(Error::argument(format!(
            "difference penalty needs M > order (M = {m}, order = {order})"
        )));
    }
    let mut d = DMatrix::<f64>::identity(m, m);
    for _ in 0..order {
        let rows = d.nrows();
        let mut next = DMatrix::zeros(rows - 1, m);
        for r in 0..rows - 1 {
            for c in 0..m {
                next[(r, c)] = d[(r + 1, c)] - d[(r, c)];
            }
        }
        d = next;
    }
    Ok(d)
}

pub fn difference_penalty(m: usize, order: usize) -> Result<PenaltyMatrix> {
    let d = difference_operator(m, order)?;
    Ok(PenaltyMatrix { order, matrix: d.transpose() * d, null_dim: order })
}

/// Wrapped difference penalty for periodic coefficient vectors; only
/// constants are unpenalized.
pub fn cyclic_difference_penalty(m: usize, order: usize) -> Result<PenaltyMatrix> {
    if order == 0 || m <= order {
        return Err(Error::argument(format!(
            "difference penalty needs M > order (M = {m}, order = {order})"
        )));
    }
    // Binomial coefficients of the forward difference of the given order.
    let mut coef = vec![1.0f64];
    for _ in 0..order {
        let mut next = vec![0.0; coef.len() + 1];
        for (i, c) in coef.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= c;
        }
        coef = next;
    }
    let mut d = DMatrix::<f64>::zeros(m, m);
    for r in 0..m {
        for (j, c) in coef.iter().enumerate() {
            d[(r, (r + j) % m)] += c;
        }
    }
    Ok(PenaltyMatrix { order, matrix: d.transpose() * d, null_dim: 1 })
}

/// Analytic eigenbases used to generate simulation truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormKind {
    Fourier,
    OrthogonalPolynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedFormBasis {
    pub kind: ClosedFormKind,
    pub n_functions: usize,
}

impl ClosedFormBasis {
    pub const MAX_FUNCTIONS: usize = 4;

    pub fn new(kind: ClosedFormKind, n_functions: usize) -> Result<Self> {
        if n_functions == 0 || n_functions > Self::MAX_FUNCTIONS {
            return Err(Error::argument(format!(
                "closed-form bases provide 1..={} functions, requested {n_functions}",
                Self::MAX_FUNCTIONS
            )));
        }
        Ok(ClosedFormBasis { kind, n_functions })
    }

    /// Value of function `l` (0-based) at `s`.
    pub fn value(&self, l: usize, s: f64) -> f64 {
        let r2 = std::f64::consts::SQRT_2;
        match (self.kind, l) {
            (ClosedFormKind::Fourier, 0) => r2 * (2.0 * PI * s).sin(),
            (ClosedFormKind::Fourier, 1) => r2 * (2.0 * PI * s).cos(),
            (ClosedFormKind::Fourier, 2) => r2 * (4.0 * PI * s).sin(),
            (ClosedFormKind::Fourier, 3) => r2 * (4.0 * PI * s).cos(),
            (ClosedFormKind::OrthogonalPolynomial, 0) => 1.0,
            (ClosedFormKind::OrthogonalPolynomial, 1) => 3f64.sqrt() * (2.0 * s - 1.0),
            (ClosedFormKind::OrthogonalPolynomial, 2) => {
                5f64.sqrt() * (6.0 * s * s - 6.0 * s + 1.0)
            }
            (ClosedFormKind::OrthogonalPolynomial, 3) => {
                7f64.sqrt() * (20.0 * s.powi(3) - 30.0 * s * s + 12.0 * s - 1.0)
            }
            _ => unreachable!("closed-form basis index out of range"),
        }
    }

    /// `n_points x L` matrix of function values.
    pub fn evaluate(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(points.len(), self.n_functions);
        for (j, &s) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain { point: s, lower: 0.0, upper: 1.0 });
            }
            for l in 0..self.n_functions {
                out[(j, l)] = self.value(l, s);
            }
        }
        Ok(out)
    }
}

pub fn evaluate_closed_form_basis(
    kind: ClosedFormKind,
    n_functions: usize,
    points: &[f64],
) -> Result<DMatrix<f64>> {
    ClosedFormBasis::new(kind, n_functions)?.evaluate(points)
}
