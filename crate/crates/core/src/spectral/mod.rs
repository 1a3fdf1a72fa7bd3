//! Discretized transfer operators `P_s φ(x) = E[|g x|^s φ(g·x)]` on a grid
//! of `S₊^{d-1}`, their leading eigen-triples, and everything derived from
//! the pressure `Λ(s) = log κ(s)`.

mod grid;
mod pressure;

pub use grid::{build_grid, ProjGrid, Stencil, MIN_RESOLUTION};
pub use pressure::{
    chebyshev_s_grid, cramer_zeta, cumulants_from_pressure, legendre_transform, pressure_curve,
    CramerSeries, CumulantSet, PressureCurve, SpectralSummary, DEFAULT_RESOLUTION, DEFAULT_S_MAX,
    DEFAULT_S_POINTS, DEGENERATE_VARIANCE,
};

use rayon::prelude::*;
use thiserror::Error;

use crate::law::MatrixLaw;
use crate::semigroup::{apply_into, euclid, SemigroupError};

pub const SOLVER_TOL: f64 = 1e-12;
pub const SOLVER_MAX_ITER: usize = 100_000;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("law dimension {law} does not match grid dimension {grid}")]
    Dimension { law: usize, grid: usize },
    #[error("degenerate action at grid point {row}")]
    DegenerateAction { row: usize },
    #[error("power iteration did not converge after {iterations} iterations (kappa in [{lower}, {upper}])")]
    NotConverged {
        iterations: usize,
        lower: f64,
        upper: f64,
        last: Vec<f64>,
    },
    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),
    #[error("degenerate law: variance {0} is not positive")]
    DegenerateVariance(f64),
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Matrix(#[from] SemigroupError),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Non-negative sparse operator on grid values, stored row-compressed.
#[derive(Debug, Clone)]
pub struct TransferOperator {
    s: f64,
    size: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Assembles `P_s` on `grid`. Row `i` holds `Σ_k w_k |g_k x_i|^s` spread over
/// the interpolation stencil of `g_k·x_i`.
pub fn assemble_transfer(law: &MatrixLaw, s: f64, grid: &ProjGrid) -> Result<TransferOperator> {
    let d = grid.dim();
    if law.dim() != d {
        return Err(SpectralError::Dimension {
            law: law.dim(),
            grid: d,
        });
    }
    let rows: Vec<Result<Vec<(usize, f64)>>> = grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(row, x)| {
            let mut gx = vec![0.0; d];
            let mut entries: Vec<(usize, f64)> = Vec::new();
            for (g, &w) in law.atoms().iter().zip(law.weights()) {
                apply_into(g.entries(), x.coords(), &mut gx, d);
                let norm = euclid(&gx);
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(SpectralError::DegenerateAction { row });
                }
                let scale = w * norm.powf(s);
                for v in gx.iter_mut() {
                    *v /= norm;
                }
                for (j, sw) in grid.stencil(&gx) {
                    entries.push((j, scale * sw));
                }
            }
            entries.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for (j, v) in entries {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += v,
                    _ => merged.push((j, v)),
                }
            }
            Ok(merged)
        })
        .collect();
    let mut row_ptr = Vec::with_capacity(grid.len() + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for row in rows {
        for (j, v) in row? {
            cols.push(j);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    }
    Ok(TransferOperator {
        s,
        size: grid.len(),
        row_ptr,
        cols,
        vals,
    })
}

impl TransferOperator {
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Non-zero entries `(col, value)` of `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// `P φ`.
    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        self.apply_into(phi, &mut out);
        out
    }

    fn apply_into(&self, phi: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, v)| v * phi[j]).sum();
        }
    }

    /// `ν P`, the adjoint acting on measures given as grid weights.
    pub fn apply_adjoint(&self, nu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        self.apply_adjoint_into(nu, &mut out);
        out
    }

    fn apply_adjoint_into(&self, nu: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &m) in nu.iter().enumerate() {
            if m != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += m * v;
                }
            }
        }
    }
}

/// Leading eigenvalue with right eigenfunction `r` and left eigenmeasure `ν`.
#[derive(Debug, Clone)]
pub struct SpectralTriple {
    pub s: f64,
    pub kappa: f64,
    /// Positive eigenfunction on the grid, normalized by `ν(r) = 1`.
    pub r: Vec<f64>,
    /// Probability weights on the grid.
    pub nu: Vec<f64>,
    /// `‖P r − κ r‖∞ / (κ ‖r‖∞)`.
    pub residual: f64,
    pub iterations: usize,
}

/// Power iteration for `r` bracketed by Collatz–Wielandt ratios, then for
/// `ν` on the adjoint.
pub fn leading_triple(op: &TransferOperator, tol: f64) -> Result<SpectralTriple> {
    if !(tol > 0.0) {
        return Err(SpectralError::Input(format!("tolerance {tol} must be positive")));
    }
    if op.vals.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(SpectralError::Input("operator has negative or non-finite entries".into()));
    }
    let n = op.size;
    let mut r = vec![1.0; n];
    let mut next = vec![0.0; n];
    let (mut lower, mut upper) = (0.0, f64::INFINITY);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < SOLVER_MAX_ITER {
        iterations += 1;
        op.apply_into(&r, &mut next);
        lower = f64::INFINITY;
        upper = 0.0;
        for (y, x) in next.iter().zip(&r) {
            let q = y / x;
            lower = f64::min(lower, q);
            upper = f64::max(upper, q);
        }
        if !(lower > 0.0) || !upper.is_finite() {
            return Err(SpectralError::NotConverged {
                iterations,
                lower,
                upper,
                last: r,
            });
        }
        let scale = next.iter().cloned().fold(0.0, f64::max);
        for (x, y) in r.iter_mut().zip(&next) {
            *x = y / scale;
        }
        if upper - lower <= tol * upper {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SpectralError::NotConverged {
            iterations,
            lower,
            upper,
            last: r,
        });
    }
    let kappa = 0.5 * (lower + upper);

    let mut nu = vec![1.0 / n as f64; n];
    let mut nu_next = vec![0.0; n];
    let mut nu_done = false;
    for _ in 0..SOLVER_MAX_ITER {
        op.apply_adjoint_into(&nu, &mut nu_next);
        let mass: f64 = nu_next.iter().sum();
        let mut change = 0.0;
        for (a, b) in nu.iter_mut().zip(&nu_next) {
            let v = b / mass;
            change += (v - *a).abs();
            *a = v;
        }
        if change <= tol {
            nu_done = true;
            break;
        }
    }
    if !nu_done {
        return Err(SpectralError::NotConverged {
            iterations: SOLVER_MAX_ITER,
            lower,
            upper,
            last: nu,
        });
    }

    op.apply_into(&r, &mut next);
    let rmax = r.iter().cloned().fold(0.0, f64::max);
    let residual = next
        .iter()
        .zip(&r)
        .map(|(y, x)| (y - kappa * x).abs())
        .fold(0.0, f64::max)
        / (kappa * rmax);
    let pairing: f64 = nu.iter().zip(&r).map(|(a, b)| a * b).sum();
    for x in r.iter_mut() {
        *x /= pairing;
    }
    Ok(SpectralTriple {
        s: op.s,
        kappa,
        r,
        nu,
        residual,
        iterations,
    })
}

impl SpectralTriple {
    /// `π_s(φ) = ν(φ r)/ν(r)` for grid values `φ`.
    pub fn pi(&self, phi: &[f64]) -> f64 {
        let num: f64 = self.nu.iter().zip(&self.r).zip(phi).map(|((n, r), p)| n * r * p).sum();
        let den: f64 = self.nu.iter().zip(&self.r).map(|(n, r)| n * r).sum();
        num / den
    }

    /// Grid weights of `π_s`.
    pub fn pi_weights(&self) -> Vec<f64> {
        let den: f64 = self.nu.iter().zip(&self.r).map(|(n, r)| n * r).sum();
        self.nu.iter().zip(&self.r).map(|(n, r)| n * r / den).collect()
    }

    /// `r_s` interpolated at an arbitrary point.
    pub fn r_at(&self, grid: &ProjGrid, x: &[f64]) -> f64 {
        grid.interpolate(&self.r, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::{make_law, LawRecipe};
    use crate::semigroup::PositiveMatrix;
    use rand::{Rng, SeedableRng};

    fn identity_law() -> MatrixLaw {
        MatrixLaw::new(vec![PositiveMatrix::identity(2).unwrap()], vec![1.0]).unwrap()
    }

    #[test]
    fn markov_rows_at_zero() {
        let grid = build_grid(2, 64).unwrap();
        for recipe in [LawRecipe::point_mass_a(), LawRecipe::two_atom_ab(), LawRecipe::rank_one_rademacher()] {
            let op = assemble_transfer(&make_law(&recipe).unwrap(), 0.0, &grid).unwrap();
            for s in op.row_sums() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_law_gives_identity_operator() {
        let grid = build_grid(2, 32).unwrap();
        let op = assemble_transfer(&identity_law(), 1.7, &grid).unwrap();
        for i in 0..grid.len() {
            let row: Vec<_> = op.row(i).collect();
            assert_eq!(row.len(), 1);
            assert_eq!(row[0].0, i);
            assert!((row[0].1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_rows_concentrate_on_diagonal_direction() {
        let grid = build_grid(2, 64).unwrap();
        let op = assemble_transfer(&make_law(&LawRecipe::rank_one_rademacher()).unwrap(), 1.0, &grid).unwrap();
        let mid = 32;
        let ones = op.apply(&vec![1.0; grid.len()]);
        for (i, x) in grid.points().iter().enumerate() {
            let cols: Vec<_> = op.row(i).map(|(j, _)| j).collect();
            assert_eq!(cols, vec![mid]);
            // J is the all-ones matrix, so |Jx| = √2 (x₁ + x₂).
            let jx = std::f64::consts::SQRT_2 * (x.coords()[0] + x.coords()[1]);
            assert!((ones[i] - 1f64.cosh() * jx).abs() < 1e-12);
        }
    }

    #[test]
    fn kappa_at_zero_is_one() {
        let grid = build_grid(2, 128).unwrap();
        let law = make_law(&LawRecipe::two_atom_ab()).unwrap();
        let t = leading_triple(&assemble_transfer(&law, 0.0, &grid).unwrap(), SOLVER_TOL).unwrap();
        assert!((t.kappa - 1.0).abs() < 1e-10);
        assert!((t.nu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pairing: f64 = t.nu.iter().zip(&t.r).map(|(a, b)| a * b).sum();
        assert!((pairing - 1.0).abs() < 1e-12);
        assert!(t.r.iter().all(|&v| v > 0.0));
        assert!(t.residual <= SOLVER_TOL * 10.0);
    }

    #[test]
    fn point_mass_kappa() {
        let grid = build_grid(2, 512).unwrap();
        let law = make_law(&LawRecipe::point_mass_a()).unwrap();
        let t = leading_triple(&assemble_transfer(&law, 2.0, &grid).unwrap(), SOLVER_TOL).unwrap();
        assert!((t.kappa - 9.0).abs() < 1e-6, "{}", t.kappa);
    }

    #[test]
    fn rank_one_kappa() {
        let grid = build_grid(2, 512).unwrap();
        let law = make_law(&LawRecipe::rank_one_rademacher()).unwrap();
        let t = leading_triple(&assemble_transfer(&law, 1.0, &grid).unwrap(), SOLVER_TOL).unwrap();
        assert!((t.kappa - 2.0 * 1f64.cosh()).abs() < 1e-6, "{}", t.kappa);
    }

    #[test]
    fn adjoint_eigen_equation_and_stationarity() {
        let grid = build_grid(2, 256).unwrap();
        let law = make_law(&LawRecipe::two_atom_ab()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for s in [0.0, 0.4] {
            let op = assemble_transfer(&law, s, &grid).unwrap();
            let t = leading_triple(&op, SOLVER_TOL).unwrap();
            for _ in 0..20 {
                let phi: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lhs: f64 = t.nu.iter().zip(op.apply(&phi)).map(|(a, b)| a * b).sum();
                let rhs: f64 = t.kappa * t.nu.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }
        let op = assemble_transfer(&law, 0.0, &grid).unwrap();
        let t = leading_triple(&op, SOLVER_TOL).unwrap();
        let pi = t.pi_weights();
        let moved = op.apply_adjoint(&pi);
        let err: f64 = moved.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        assert!(err < 1e-10);
    }

    #[test]
    fn refinement_converges() {
        let law = make_law(&LawRecipe::two_atom_ab()).unwrap();
        let kappa = |res| {
            let grid = build_grid(2, res).unwrap();
            leading_triple(&assemble_transfer(&law, 0.5, &grid).unwrap(), SOLVER_TOL).unwrap().kappa
        };
        let (k1, k2, k3) = (kappa(32), kappa(64), kappa(128));
        assert!((k2 - k3).abs() * 2.0 <= (k1 - k2).abs() + 1e-13, "{k1} {k2} {k3}");
    }

    #[test]
    fn three_dimensional_rank_one() {
        // Rank-one law with J the 3×3 all-ones matrix: κ(s) = 3^s E[a^s].
        let atoms = [(-1.0f64).exp(), 1f64.exp()]
            .iter()
            .map(|&a| PositiveMatrix::scaled_ones(3, a).unwrap())
            .collect();
        let law = MatrixLaw::new(atoms, vec![0.5, 0.5]).unwrap();
        let grid = build_grid(3, 24).unwrap();
        let t = leading_triple(&assemble_transfer(&law, 0.5, &grid).unwrap(), SOLVER_TOL).unwrap();
        let expect = 3f64.powf(0.5) * 0.5f64.cosh();
        assert!((t.kappa - expect).abs() < 1e-9, "{} vs {expect}", t.kappa);
    }

    #[test]
    fn dimension_mismatch() {
        let grid = build_grid(3, 8).unwrap();
        assert!(assemble_transfer(&identity_law(), 0.0, &grid).is_err());
    }
}
