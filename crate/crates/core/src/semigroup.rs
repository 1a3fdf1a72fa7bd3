//! Positive matrices acting on the positive part of the unit sphere.
//!
//! Everything here is deterministic: the Hilbert cross-ratio metric, the
//! projective action `g·x = gx/|gx|`, the functionals `‖g‖`, `ι(g)`,
//! `N(g)`, Perron–Frobenius spectral radius by power iteration with a
//! Collatz–Wielandt stopping bracket, and per-matrix condition checks.

use std::fmt;

use thiserror::Error;

/// Slack accepted on `|x| = 1` before a point is renormalized instead of rejected.
pub const UNIT_NORM_RENORMALIZE: f64 = 1e-6;
/// Unit-norm tolerance guaranteed after construction.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Default bracket tolerance of [`spectral_radius_pf`].
pub const PF_DEFAULT_TOL: f64 = 1e-12;
/// Iteration cap of [`spectral_radius_pf`].
pub const PF_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemigroupError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("expected {expected} entries, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("entry {index} is negative or not finite: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("vector norm {0} is too far from 1")]
    NotUnitNorm(f64),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("degenerate action: |gx| = 0")]
    DegenerateAction,
    #[error("power iteration did not converge after {iterations} steps (bracket [{lower}, {upper}])")]
    NotConverged {
        lower: f64,
        upper: f64,
        iterations: usize,
    },
    #[error("point must have strictly positive coordinates")]
    NonPositiveCoordinate,
    #[error("empty matrix set")]
    EmptySet,
    #[error("argument out of range: {0}")]
    OutOfRange(String),
}

pub type Result<T> = std::result::Result<T, SemigroupError>;

/// A `d × d` matrix with non-negative entries, stored row-major.
///
/// Allowability is checked on demand, not at construction.
#[derive(Clone, PartialEq)]
pub struct PositiveMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl PositiveMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(SemigroupError::InvalidDimension(dim));
        }
        if entries.len() != dim * dim {
            return Err(SemigroupError::WrongLength {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        if let Some((index, &value)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(SemigroupError::InvalidEntry { index, value });
        }
        Ok(Self { dim, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(SemigroupError::WrongLength {
                    expected: dim,
                    got: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::new(dim, entries)
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self::new(dim, entries)
    }

    /// The all-ones matrix `J` scaled by `a`.
    pub fn scaled_ones(dim: usize, a: f64) -> Result<Self> {
        Self::new(dim, vec![a; dim * dim])
    }

    pub(crate) fn from_raw(dim: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), dim * dim);
        Self { dim, entries }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, j)).collect()
    }

    pub fn is_allowable(&self) -> bool {
        let d = self.dim;
        let rows_ok = (0..d).all(|i| (0..d).any(|j| self.get(i, j) > 0.0));
        let cols_ok = (0..d).all(|j| (0..d).any(|i| self.get(i, j) > 0.0));
        rows_ok && cols_ok
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.entries.iter().all(|&v| v > 0.0)
    }

    /// Matrix product `self · rhs`.
    pub fn mul(&self, rhs: &PositiveMatrix) -> Result<PositiveMatrix> {
        check_dims(self.dim, rhs.dim)?;
        let mut out = vec![0.0; self.dim * self.dim];
        mul_into(&self.entries, &rhs.entries, &mut out, self.dim);
        Ok(Self::from_raw(self.dim, out))
    }

    pub fn scale(&self, factor: f64) -> Result<PositiveMatrix> {
        Self::new(self.dim, self.entries.iter().map(|v| v * factor).collect())
    }

    /// `g x` for a raw coordinate slice.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        apply_into(&self.entries, x, &mut out, self.dim);
        out
    }
}

impl fmt::Debug for PositiveMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.chunks(self.dim)).finish()
    }
}

/// `out = a · b` for row-major `d × d` slices.
#[inline]
pub(crate) fn mul_into(a: &[f64], b: &[f64], out: &mut [f64], d: usize) {
    if d == 2 {
        out[0] = a[0] * b[0] + a[1] * b[2];
        out[1] = a[0] * b[1] + a[1] * b[3];
        out[2] = a[2] * b[0] + a[3] * b[2];
        out[3] = a[2] * b[1] + a[3] * b[3];
        return;
    }
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
}

#[inline]
pub(crate) fn apply_into(g: &[f64], x: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        let row = &g[i * d..(i + 1) * d];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

#[inline]
pub(crate) fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(SemigroupError::DimensionMismatch { left: a, right: b })
    } else {
        Ok(())
    }
}

/// A point of `S₊^{d-1}`: a unit vector with non-negative coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjPoint {
    coords: Vec<f64>,
}

impl ProjPoint {
    /// Accepts coordinates whose norm is within `1e-6` of one and renormalizes them.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(SemigroupError::InvalidDimension(coords.len()));
        }
        if let Some((index, &value)) = coords
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(SemigroupError::InvalidEntry { index, value });
        }
        let norm = euclid(&coords);
        if (norm - 1.0).abs() > UNIT_NORM_RENORMALIZE {
            return Err(SemigroupError::NotUnitNorm(norm));
        }
        Ok(Self::normalized_unchecked(coords, norm))
    }

    /// Direction of an arbitrary non-zero, non-negative vector.
    pub fn from_direction(v: Vec<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(SemigroupError::InvalidDimension(v.len()));
        }
        if let Some((index, &value)) = v
            .iter()
            .enumerate()
            .find(|(_, x)| !(x.is_finite() && **x >= 0.0))
        {
            return Err(SemigroupError::InvalidEntry { index, value });
        }
        let norm = euclid(&v);
        if norm == 0.0 {
            return Err(SemigroupError::ZeroVector);
        }
        Ok(Self::normalized_unchecked(v, norm))
    }

    pub(crate) fn normalized_unchecked(mut v: Vec<f64>, norm: f64) -> Self {
        for c in v.iter_mut() {
            *c /= norm;
        }
        Self { coords: v }
    }

    /// Canonical basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Result<Self> {
        if dim < 2 {
            return Err(SemigroupError::InvalidDimension(dim));
        }
        if i >= dim {
            return Err(SemigroupError::OutOfRange(format!("basis index {i} >= {dim}")));
        }
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Ok(Self { coords: v })
    }

    /// `(1, …, 1)/√d`.
    pub fn uniform(dim: usize) -> Result<Self> {
        Self::from_direction(vec![1.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dot(&self, other: &ProjPoint) -> f64 {
        self.coords.iter().zip(&other.coords).map(|(a, b)| a * b).sum()
    }

    pub fn min_coord(&self) -> f64 {
        self.coords.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Membership in `S₊,ε`: every coordinate at least `eps`.
    pub fn in_interior(&self, eps: f64) -> bool {
        self.min_coord() >= eps
    }

    pub fn euclid_dist(&self, other: &ProjPoint) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `sup{α > 0 : α y ≤ x}`, skipping indices where both coordinates vanish.
fn max_ratio(x: &[f64], y: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    for (&xi, &yi) in x.iter().zip(y) {
        if yi > 0.0 {
            if xi == 0.0 {
                return 0.0;
            }
            m = m.min(xi / yi);
        }
    }
    m
}

/// Hilbert cross-ratio distance `(1 − m(x,y)m(y,x)) / (1 + m(x,y)m(y,x))`, in `[0, 1]`.
pub fn hilbert_distance(x: &ProjPoint, y: &ProjPoint) -> Result<f64> {
    check_dims(x.dim(), y.dim())?;
    let prod = max_ratio(x.coords(), y.coords()) * max_ratio(y.coords(), x.coords());
    if !prod.is_finite() {
        // Both points vanish everywhere: impossible for unit vectors.
        return Err(SemigroupError::ZeroVector);
    }
    Ok(((1.0 - prod) / (1.0 + prod)).clamp(0.0, 1.0))
}

/// Projective action: returns `(g·x, log|gx|)`.
pub fn project_act(g: &PositiveMatrix, x: &ProjPoint) -> Result<(ProjPoint, f64)> {
    check_dims(g.dim(), x.dim())?;
    let gx = g.apply(x.coords());
    let norm = euclid(&gx);
    if !(norm > 0.0) {
        return Err(SemigroupError::DegenerateAction);
    }
    Ok((ProjPoint::normalized_unchecked(gx, norm), norm.ln()))
}

/// `‖g‖`, `ι(g)` and `N(g) = max{‖g‖, ι(g)⁻¹}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixFunctionals {
    pub op_norm: f64,
    pub iota: f64,
    pub big_n: f64,
    /// `ι(g) = 0`: some column vanishes and `g` is not allowable.
    pub degenerate: bool,
}

/// Operator norm restricted to the positive quadrant.
///
/// For a non-negative matrix the supremum over `S₊^{d-1}` equals the largest
/// singular value. `d = 2` uses the closed form on the quarter circle,
/// `|gx|² = A + B cos 2θ + C sin 2θ` with `C ≥ 0`; larger `d` iterates
/// `gᵀg` from a strictly positive start.
pub fn op_norm(g: &PositiveMatrix) -> f64 {
    op_norm_raw(g.entries(), g.dim())
}

#[inline]
pub(crate) fn op_norm_raw(e: &[f64], d: usize) -> f64 {
    if d == 2 {
        return op_norm_2x2(e);
    }
    // Gram matrix Q = gᵀg, non-negative and symmetric.
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += e[k * d + i] * e[k * d + j];
            }
            q[i * d + j] = acc;
            q[j * d + i] = acc;
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut w = vec![0.0; d];
    let mut lambda = 0.0;
    for _ in 0..PF_MAX_ITER {
        apply_into(&q, &v, &mut w, d);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let norm = euclid(&w);
        if norm == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if (next - lambda).abs() <= 1e-15 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Final Rayleigh quotient on the converged vector.
    apply_into(&q, &v, &mut w, d);
    let rq: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    rq.max(lambda).sqrt()
}

#[inline]
pub(crate) fn op_norm_2x2(e: &[f64]) -> f64 {
    let c1 = e[0] * e[0] + e[2] * e[2];
    let c2 = e[1] * e[1] + e[3] * e[3];
    let cross = e[0] * e[1] + e[2] * e[3];
    let a = 0.5 * (c1 + c2);
    let b = 0.5 * (c1 - c2);
    (a + b.hypot(cross)).sqrt()
}

/// `ι(g) = inf_{x ∈ S₊} |gx|`.
///
/// With `Q = gᵀg ≥ 0` entrywise, `xᵀQx ≥ Σ Q_ii x_i² ≥ min_i Q_ii` on the
/// positive sphere, with equality at a basis vector, so `ι(g)` is the
/// smallest column norm in every dimension.
pub fn iota(g: &PositiveMatrix) -> f64 {
    (0..g.dim())
        .map(|j| euclid(&g.column(j)))
        .fold(f64::INFINITY, f64::min)
}

pub fn matrix_functionals(g: &PositiveMatrix) -> MatrixFunctionals {
    let op = op_norm(g);
    let io = iota(g);
    let degenerate = io == 0.0;
    let big_n = if degenerate {
        f64::INFINITY
    } else {
        op.max(1.0 / io)
    };
    MatrixFunctionals {
        op_norm: op,
        iota: io,
        big_n,
        degenerate,
    }
}

/// Collatz–Wielandt bracket `(min_i (gx)_i/x_i, max_i (gx)_i/x_i)` for `x > 0`.
pub fn collatz_wielandt_bounds(g: &PositiveMatrix, x: &ProjPoint) -> Result<(f64, f64)> {
    check_dims(g.dim(), x.dim())?;
    if x.coords().iter().any(|&v| v <= 0.0) {
        return Err(SemigroupError::NonPositiveCoordinate);
    }
    let gx = g.apply(x.coords());
    Ok(cw_bracket(&gx, x.coords()))
}

/// Bracket over the support of `x`; an index with `x_i = 0 < (gx)_i` makes the upper end infinite.
#[inline]
pub(crate) fn cw_bracket(gx: &[f64], x: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for (&a, &b) in gx.iter().zip(x) {
        if b > 0.0 {
            let r = a / b;
            lo = lo.min(r);
            hi = hi.max(r);
        } else if a > 0.0 {
            hi = f64::INFINITY;
        }
    }
    (lo, hi)
}

/// Perron root and vector by normalized power iteration.
///
/// Stops once the Collatz–Wielandt bracket satisfies `upper − lower ≤ tol · upper`
/// and returns its midpoint together with the current iterate.
pub fn spectral_radius_pf(g: &PositiveMatrix, tol: f64) -> Result<(f64, ProjPoint)> {
    let d = g.dim();
    let start = vec![1.0 / (d as f64).sqrt(); d];
    let (rho, v) = power_iterate(g.entries(), d, start, tol, PF_MAX_ITER)?;
    Ok((rho, ProjPoint { coords: v }))
}

pub(crate) fn power_iterate(
    e: &[f64],
    d: usize,
    mut x: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut y = vec![0.0; d];
    let mut bracket = (0.0, f64::INFINITY);
    for _ in 0..max_iter {
        apply_into(e, &x, &mut y, d);
        bracket = cw_bracket(&y, &x);
        let norm = euclid(&y);
        if norm == 0.0 {
            return Err(SemigroupError::DegenerateAction);
        }
        let (lo, hi) = bracket;
        if hi.is_finite() && hi - lo <= tol * hi {
            for v in y.iter_mut() {
                *v /= norm;
            }
            return Ok((0.5 * (lo + hi), y));
        }
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
    }
    Err(SemigroupError::NotConverged {
        lower: bracket.0,
        upper: bracket.1,
        iterations: max_iter,
    })
}

/// Per-matrix report for the allowability, positivity and column-comparability conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionReportMatrix {
    pub allowable: bool,
    pub strictly_positive: bool,
    /// `max_j max_i g^{i,j} / min_i g^{i,j}`, present only for strictly positive `g`.
    pub column_constant: Option<f64>,
}

pub fn check_conditions_matrix(g: &PositiveMatrix) -> ConditionReportMatrix {
    let strictly_positive = g.is_strictly_positive();
    let column_constant = strictly_positive.then(|| column_constant(g));
    ConditionReportMatrix {
        allowable: g.is_allowable(),
        strictly_positive,
        column_constant,
    }
}

fn column_constant(g: &PositiveMatrix) -> f64 {
    (0..g.dim())
        .map(|j| {
            let col = g.column(j);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            hi / lo
        })
        .fold(1.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConversionDirection {
    /// Column constant `C` to the interior margin `ε = 1/(Cd)`.
    CToEpsilon,
    /// Interior margin `ε` to the column constant `C = √((1/ε² − 1)/(d − 1))`.
    EpsilonToC,
}

/// Converts between the column constant and the interior margin.
///
/// Each direction is only a sufficient bound; composing the two does not
/// return the input.
pub fn epsilon_c_convert(direction: ConversionDirection, value: f64, d: usize) -> Result<f64> {
    if d < 2 {
        return Err(SemigroupError::InvalidDimension(d));
    }
    match direction {
        ConversionDirection::CToEpsilon => {
            if !(value >= 1.0 && value.is_finite()) {
                return Err(SemigroupError::OutOfRange(format!("C = {value} must be >= 1")));
            }
            Ok(1.0 / (value * d as f64))
        }
        ConversionDirection::EpsilonToC => {
            let max_eps = std::f64::consts::FRAC_1_SQRT_2;
            if !(value > 0.0 && value < max_eps) {
                return Err(SemigroupError::OutOfRange(format!(
                    "eps = {value} must lie in (0, sqrt(2)/2)"
                )));
            }
            Ok(((1.0 / (value * value) - 1.0) / (d as f64 - 1.0)).sqrt())
        }
    }
}

/// `min_g |gx| / ‖g‖` over a finite set: an upper estimate of `τ(x)`.
pub fn tau_over_set(gs: &[PositiveMatrix], x: &ProjPoint) -> Result<f64> {
    if gs.is_empty() {
        return Err(SemigroupError::EmptySet);
    }
    if x.coords().iter().any(|&v| v <= 0.0) {
        return Err(SemigroupError::NonPositiveCoordinate);
    }
    let mut tau = f64::INFINITY;
    for g in gs {
        check_dims(g.dim(), x.dim())?;
        let gx = euclid(&g.apply(x.coords()));
        tau = tau.min(gx / op_norm(g));
    }
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[[f64; 2]; 2]) -> PositiveMatrix {
        PositiveMatrix::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap()
    }

    fn p(v: &[f64]) -> ProjPoint {
        ProjPoint::from_direction(v.to_vec()).unwrap()
    }

    #[test]
    fn hilbert_examples() {
        let u = p(&[1.0, 1.0]);
        assert_eq!(hilbert_distance(&u, &u).unwrap(), 0.0);
        let e1 = ProjPoint::basis(2, 0).unwrap();
        let e2 = ProjPoint::basis(2, 1).unwrap();
        assert_eq!(hilbert_distance(&e1, &e2).unwrap(), 1.0);
        let y = p(&[2.0, 1.0]);
        assert!((hilbert_distance(&u, &y).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            hilbert_distance(&u, &ProjPoint::uniform(3).unwrap()),
            Err(SemigroupError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hilbert_shared_zero_coordinate_is_skipped() {
        let a = p(&[1.0, 1.0, 0.0]);
        let b = p(&[1.0, 2.0, 0.0]);
        // Restricted to the first two coordinates: m(a,b)m(b,a) = (1/2)(1) · …
        let d = hilbert_distance(&a, &b).unwrap();
        assert!(d > 0.0 && d < 1.0);
        assert_eq!(hilbert_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn action_examples() {
        let g = m(&[[2.0, 1.0], [1.0, 2.0]]);
        let e1 = ProjPoint::basis(2, 0).unwrap();
        let (x, l) = project_act(&g, &e1).unwrap();
        assert!((x.coords()[0] - 2.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((x.coords()[1] - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((l - 5f64.sqrt().ln()).abs() < 1e-14);

        let u = p(&[1.0, 1.0]);
        let (x, l) = project_act(&g, &u).unwrap();
        assert!(x.euclid_dist(&u) < 1e-15);
        assert!((l - 3f64.ln()).abs() < 1e-14);

        let id = PositiveMatrix::identity(2).unwrap();
        let y = p(&[0.3, 0.7]);
        let (x, l) = project_act(&id, &y).unwrap();
        assert_eq!(x, y);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn degenerate_action_is_reported() {
        let g = m(&[[1.0, 0.0], [0.0, 0.0]]);
        let e2 = ProjPoint::basis(2, 1).unwrap();
        assert_eq!(project_act(&g, &e2).unwrap_err(), SemigroupError::DegenerateAction);
    }

    #[test]
    fn functionals_examples() {
        let f = matrix_functionals(&m(&[[2.0, 1.0], [1.0, 2.0]]));
        assert!((f.op_norm - 3.0).abs() < 1e-14);
        assert!((f.iota - 5f64.sqrt()).abs() < 1e-14);
        assert!((f.big_n - 3.0).abs() < 1e-14);

        let f = matrix_functionals(&PositiveMatrix::identity(2).unwrap());
        assert_eq!((f.op_norm, f.iota, f.big_n), (1.0, 1.0, 1.0));

        let f = matrix_functionals(&m(&[[1.0, 2.0], [3.0, 1.0]]));
        let expect = (7.5 + 31.25f64.sqrt()).sqrt();
        assert!((f.op_norm - expect).abs() < 1e-10 * expect);

        let f = matrix_functionals(&m(&[[1.0, 0.0], [1.0, 0.0]]));
        assert!(f.degenerate);
        assert_eq!(f.big_n, f64::INFINITY);
    }

    #[test]
    fn functionals_brute_force_arc() {
        // Dense scan of the quarter circle as an independent check.
        let g = m(&[[0.3, 1.7], [2.2, 0.4]]);
        let (mut hi, mut lo) = (0.0f64, f64::INFINITY);
        for k in 0..=200_000 {
            let t = std::f64::consts::FRAC_PI_2 * k as f64 / 200_000.0;
            let v = euclid(&g.apply(&[t.cos(), t.sin()]));
            hi = hi.max(v);
            lo = lo.min(v);
        }
        let f = matrix_functionals(&g);
        assert!((f.op_norm - hi).abs() < 1e-9);
        assert!((f.iota - lo).abs() < 1e-12);
    }

    #[test]
    fn op_norm_three_dims_matches_largest_singular_value() {
        let g = PositiveMatrix::new(3, vec![1.0, 2.0, 0.5, 0.1, 3.0, 1.0, 2.0, 0.2, 1.5]).unwrap();
        let svd = nalgebra::DMatrix::from_row_slice(3, 3, g.entries()).svd(false, false);
        let top = svd.singular_values.max();
        assert!((op_norm(&g) - top).abs() < 1e-12 * top);
    }

    #[test]
    fn pf_examples() {
        let (rho, v) = spectral_radius_pf(&m(&[[2.0, 1.0], [1.0, 2.0]]), PF_DEFAULT_TOL).unwrap();
        assert!((rho - 3.0).abs() < 1e-12);
        assert!(v.euclid_dist(&p(&[1.0, 1.0])) < 1e-12);

        let (rho, v) = spectral_radius_pf(&PositiveMatrix::identity(3).unwrap(), 1e-12).unwrap();
        assert_eq!(rho, 1.0);
        assert!(v.euclid_dist(&ProjPoint::uniform(3).unwrap()) < 1e-15);

        let (rho, _) = spectral_radius_pf(&m(&[[1.0, 2.0], [3.0, 1.0]]), PF_DEFAULT_TOL).unwrap();
        assert!((rho - (1.0 + 6f64.sqrt())).abs() < 1e-11);
    }

    #[test]
    fn pf_jordan_block_does_not_converge() {
        let g = m(&[[1.0, 1.0], [0.0, 1.0]]);
        match spectral_radius_pf(&g, PF_DEFAULT_TOL) {
            Err(SemigroupError::NotConverged { lower, upper, .. }) => {
                assert!(lower <= 1.0 + 1e-12 && upper >= 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collatz_wielandt_examples() {
        let g = m(&[[2.0, 1.0], [1.0, 2.0]]);
        let (lo, hi) = collatz_wielandt_bounds(&g, &p(&[1.0, 1.0])).unwrap();
        assert!((lo - 3.0).abs() < 1e-14 && (hi - 3.0).abs() < 1e-14);
        let (lo, hi) = collatz_wielandt_bounds(&g, &p(&[1.0, 2.0])).unwrap();
        assert!((lo - 2.5).abs() < 1e-14 && (hi - 4.0).abs() < 1e-14);
        let id = PositiveMatrix::identity(2).unwrap();
        assert_eq!(collatz_wielandt_bounds(&id, &p(&[0.2, 0.9])).unwrap(), (1.0, 1.0));
        assert_eq!(
            collatz_wielandt_bounds(&g, &ProjPoint::basis(2, 0).unwrap()).unwrap_err(),
            SemigroupError::NonPositiveCoordinate
        );
    }

    #[test]
    fn condition_examples() {
        let r = check_conditions_matrix(&m(&[[2.0, 1.0], [1.0, 2.0]]));
        assert!(r.allowable && r.strictly_positive);
        assert_eq!(r.column_constant, Some(2.0));
        let r = check_conditions_matrix(&m(&[[1.0, 2.0], [3.0, 1.0]]));
        assert_eq!(r.column_constant, Some(3.0));
        let r = check_conditions_matrix(&PositiveMatrix::identity(2).unwrap());
        assert!(r.allowable && !r.strictly_positive);
        assert_eq!(r.column_constant, None);
        let r = check_conditions_matrix(&m(&[[1.0, 1.0], [0.0, 0.0]]));
        assert!(!r.allowable);
    }

    #[test]
    fn epsilon_c_examples() {
        use ConversionDirection::*;
        assert!((epsilon_c_convert(CToEpsilon, 3.0, 2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!((epsilon_c_convert(EpsilonToC, 1.0 / 6.0, 2).unwrap() - 35f64.sqrt()).abs() < 1e-12);
        assert_eq!(epsilon_c_convert(CToEpsilon, 1.0, 2).unwrap(), 0.5);
        assert!(epsilon_c_convert(CToEpsilon, 0.5, 2).is_err());
        assert!(epsilon_c_convert(EpsilonToC, 0.8, 2).is_err());
        assert!(epsilon_c_convert(EpsilonToC, 0.0, 2).is_err());
    }

    #[test]
    fn tau_examples() {
        let a = m(&[[2.0, 1.0], [1.0, 2.0]]);
        let u = p(&[1.0, 1.0]);
        assert!((tau_over_set(std::slice::from_ref(&a), &u).unwrap() - 1.0).abs() < 1e-14);
        let id = PositiveMatrix::identity(2).unwrap();
        assert!((tau_over_set(&[id], &p(&[0.4, 0.6])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(tau_over_set(&[], &u).unwrap_err(), SemigroupError::EmptySet);
        // At the boundary point e₁ the ratio is √5/3.
        let near_e1 = ProjPoint::from_direction(vec![1.0, 1e-300]).unwrap();
        let t = tau_over_set(&[a], &near_e1).unwrap();
        assert!((t - 5f64.sqrt() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn proj_point_construction() {
        assert!(ProjPoint::new(vec![1.0, 0.0]).is_ok());
        let q = ProjPoint::new(vec![1.0 + 5e-7, 0.0]).unwrap();
        assert!((euclid(q.coords()) - 1.0).abs() < UNIT_NORM_TOL);
        assert!(matches!(ProjPoint::new(vec![1.1, 0.0]), Err(SemigroupError::NotUnitNorm(_))));
        assert!(matches!(ProjPoint::new(vec![-0.1, 1.0]), Err(SemigroupError::InvalidEntry { .. })));
        assert_eq!(ProjPoint::from_direction(vec![0.0, 0.0]).unwrap_err(), SemigroupError::ZeroVector);
    }

    #[test]
    fn matrix_construction_errors() {
        assert!(matches!(PositiveMatrix::new(1, vec![1.0]), Err(SemigroupError::InvalidDimension(1))));
        assert!(matches!(PositiveMatrix::new(2, vec![1.0; 3]), Err(SemigroupError::WrongLength { .. })));
        assert!(matches!(
            PositiveMatrix::new(2, vec![1.0, -1.0, 0.0, 1.0]),
            Err(SemigroupError::InvalidEntry { index: 1, .. })
        ));
    }
}
