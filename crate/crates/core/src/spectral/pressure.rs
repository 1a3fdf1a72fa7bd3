//! Pressure curve `Λ(s)`, cumulants, the Cramér series and the Legendre transform.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::law::MatrixLaw;

use super::{assemble_transfer, build_grid, leading_triple, ProjGrid, Result, SpectralError, MIN_RESOLUTION};

pub const DEFAULT_RESOLUTION: usize = 512;
pub const DEFAULT_S_MAX: f64 = 0.5;
pub const DEFAULT_S_POINTS: usize = 21;
pub const FIT_DEGREE: usize = 6;
pub const MIN_FIT_POINTS: usize = 13;
/// Condition number of the unscaled Vandermonde system above which the fit is refused.
pub const MAX_FIT_CONDITION: f64 = 1e12;
/// `γ₂` at or below this is treated as zero variance.
pub const DEGENERATE_VARIANCE: f64 = 1e-10;
const SADDLE_TOL: f64 = 1e-8;

/// `Λ(s) = log κ(s)` sampled on an increasing `s` grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PressureCurve {
    pub resolution: usize,
    pub s_grid: Vec<f64>,
    pub lambda_vals: Vec<f64>,
    pub kappa: Vec<f64>,
    pub residual: Vec<f64>,
    /// `|Λ_res(s) − Λ_{res/2}(s)|`; empty when the coarse grid would be too small.
    pub richardson_delta: Vec<f64>,
}

/// Symmetric Chebyshev–Lobatto points on `[−s_max, s_max]`.
pub fn chebyshev_s_grid(s_max: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![0.0; count];
    }
    let m = count - 1;
    let mut out = vec![0.0; count];
    for j in 0..count / 2 {
        let v = s_max * (std::f64::consts::PI * j as f64 / m as f64).cos();
        out[j] = -v;
        out[m - j] = v;
    }
    out
}

fn solve_curve(law: &MatrixLaw, s_grid: &[f64], grid: &ProjGrid, tol: f64) -> Result<Vec<(f64, f64)>> {
    s_grid
        .par_iter()
        .map(|&s| {
            let op = assemble_transfer(law, s, grid)?;
            let t = leading_triple(&op, tol)?;
            Ok((t.kappa, t.residual))
        })
        .collect()
}

/// Solves for `κ(s)` at every `s` in `s_grid`, plus the same on a grid of half
/// the resolution for a refinement check.
pub fn pressure_curve(law: &MatrixLaw, s_grid: &[f64], grid: &ProjGrid, tol: f64) -> Result<PressureCurve> {
    if s_grid.is_empty() || s_grid.iter().any(|s| !s.is_finite()) {
        return Err(SpectralError::Input("s grid must be non-empty and finite".into()));
    }
    if s_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SpectralError::Input("s grid must be strictly increasing".into()));
    }
    let fine = solve_curve(law, s_grid, grid, tol)?;
    let kappa: Vec<f64> = fine.iter().map(|p| p.0).collect();
    let lambda_vals: Vec<f64> = kappa.iter().map(|k| k.ln()).collect();
    let residual = fine.iter().map(|p| p.1).collect();
    let half = grid.resolution() / 2;
    let richardson_delta = if half >= MIN_RESOLUTION {
        let coarse_grid = build_grid(grid.dim(), half)?;
        solve_curve(law, s_grid, &coarse_grid, tol)?
            .iter()
            .zip(&lambda_vals)
            .map(|(c, l)| (c.0.ln() - l).abs())
            .collect()
    } else {
        Vec::new()
    };
    Ok(PressureCurve {
        resolution: grid.resolution(),
        s_grid: s_grid.to_vec(),
        lambda_vals,
        kappa,
        residual,
        richardson_delta,
    })
}

impl PressureCurve {
    /// Smallest difference of consecutive slopes; non-negative for a convex curve.
    pub fn min_second_difference(&self) -> f64 {
        let s = &self.s_grid;
        let l = &self.lambda_vals;
        (1..s.len().saturating_sub(1))
            .map(|k| (l[k + 1] - l[k]) / (s[k + 1] - s[k]) - (l[k] - l[k - 1]) / (s[k] - s[k - 1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_discretely_convex(&self, tol: f64) -> bool {
        self.min_second_difference() >= -tol
    }

    /// `Λ′` at both ends from the quadratic through the three end points.
    pub fn derivative_range(&self) -> Result<(f64, f64)> {
        let s = &self.s_grid;
        let l = &self.lambda_vals;
        let n = s.len();
        if n < 3 {
            return Err(SpectralError::Input("need at least three s points".into()));
        }
        let lo = quad_derivative([s[0], s[1], s[2]], [l[0], l[1], l[2]], s[0]);
        let hi = quad_derivative(
            [s[n - 3], s[n - 2], s[n - 1]],
            [l[n - 3], l[n - 2], l[n - 1]],
            s[n - 1],
        );
        Ok((lo, hi))
    }

    pub fn max_residual(&self) -> f64 {
        self.residual.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_richardson_delta(&self) -> Option<f64> {
        if self.richardson_delta.is_empty() {
            None
        } else {
            Some(self.richardson_delta.iter().cloned().fold(0.0, f64::max))
        }
    }

    /// CSV with columns `s,lambda,kappa,residual,richardson_delta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,lambda,kappa,residual,richardson_delta\n");
        for i in 0..self.s_grid.len() {
            let delta = self
                .richardson_delta
                .get(i)
                .map(|d| format!("{d:?}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:?},{:?},{:?},{:?},{}\n",
                self.s_grid[i], self.lambda_vals[i], self.kappa[i], self.residual[i], delta
            ));
        }
        out
    }
}

fn quad_derivative(x: [f64; 3], y: [f64; 3], at: f64) -> f64 {
    let [x0, x1, x2] = x;
    let [y0, y1, y2] = y;
    y0 * ((at - x1) + (at - x2)) / ((x0 - x1) * (x0 - x2))
        + y1 * ((at - x0) + (at - x2)) / ((x1 - x0) * (x1 - x2))
        + y2 * ((at - x0) + (at - x1)) / ((x2 - x0) * (x2 - x1))
}

/// Cumulants `γ_k = Λ^{(k)}(0)` from a polynomial fit of the pressure near 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CumulantSet {
    /// `γ₁..γ₅`.
    pub gamma: [f64; 5],
    pub sigma2: f64,
    pub lambda_lyap: f64,
    /// Fitted `Λ(s) ≈ Σ c_k s^k`, `k = 0..=6`.
    pub coeffs: Vec<f64>,
    pub s_max: f64,
    /// Root-mean-square fit residual.
    pub fit_residual: f64,
    pub condition: f64,
}

/// Least-squares degree-6 fit of `Λ` over the points with `|s| ≤ s_max`.
pub fn cumulants_from_pressure(curve: &PressureCurve, s_max: f64) -> Result<CumulantSet> {
    if !(s_max > 0.0 && s_max.is_finite()) {
        return Err(SpectralError::Input(format!("s_max {s_max} must be positive")));
    }
    let slack = 1e-12 * s_max;
    let pts: Vec<(f64, f64)> = curve
        .s_grid
        .iter()
        .zip(&curve.lambda_vals)
        .filter(|(s, _)| s.abs() <= s_max + slack)
        .map(|(&s, &l)| (s, l))
        .collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(SpectralError::Input(format!(
            "{} points with |s| <= {s_max}; need {MIN_FIT_POINTS}",
            pts.len()
        )));
    }
    let sym_tol = 1e-9 * s_max;
    if !pts.iter().all(|(s, _)| pts.iter().any(|(t, _)| (s + t).abs() <= sym_tol)) {
        return Err(SpectralError::Input("s grid is not symmetric about 0".into()));
    }
    let n = pts.len();
    let cols = FIT_DEGREE + 1;
    let vander = |scale: f64| DMatrix::from_fn(n, cols, |i, k| (pts[i].0 / scale).powi(k as i32));
    let raw = vander(1.0).singular_values();
    let condition = raw.max() / raw.min();
    if !(condition <= MAX_FIT_CONDITION) {
        return Err(SpectralError::IllConditioned(format!(
            "condition number {condition:e} at s_max = {s_max}"
        )));
    }
    let a = vander(s_max);
    let b = DVector::from_iterator(n, pts.iter().map(|p| p.1));
    let svd = a.clone().svd(true, true);
    let u_coeffs = svd
        .solve(&b, 1e-14)
        .map_err(|e| SpectralError::IllConditioned(e.to_string()))?;
    let fitted = &a * &u_coeffs;
    let fit_residual = ((&fitted - &b).norm_squared() / n as f64).sqrt();
    let coeffs: Vec<f64> = (0..cols).map(|k| u_coeffs[k] / s_max.powi(k as i32)).collect();
    let mut gamma = [0.0; 5];
    let mut fact = 1.0;
    for k in 1..=5 {
        fact *= k as f64;
        gamma[k - 1] = fact * coeffs[k];
    }
    let sigma2 = gamma[1].max(0.0);
    Ok(CumulantSet {
        gamma,
        sigma2,
        lambda_lyap: gamma[0],
        coeffs,
        s_max,
        fit_residual,
        condition,
    })
}

impl CumulantSet {
    /// Fitted `Λ(s)`.
    pub fn lambda_fit(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    /// Fitted `Λ′(s)`.
    pub fn dlambda(&self, s: f64) -> f64 {
        (1..self.coeffs.len())
            .rev()
            .fold(0.0, |acc, k| acc * s + k as f64 * self.coeffs[k])
    }

    /// Fitted `Λ″(s)`.
    pub fn d2lambda(&self, s: f64) -> f64 {
        (2..self.coeffs.len())
            .rev()
            .fold(0.0, |acc, k| acc * s + (k * (k - 1)) as f64 * self.coeffs[k])
    }

    /// `σ_t = √Λ″(t)`, taking the fitted curvature as the tilted variance.
    pub fn sigma_t(&self, t: f64) -> f64 {
        self.d2lambda(t).max(0.0).sqrt()
    }

    pub fn is_degenerate(&self) -> bool {
        self.gamma[1] <= DEGENERATE_VARIANCE
    }

    /// Solves `Λ′(s) = q` on `[−s_max, s_max]` by bisection.
    pub fn saddle_point(&self, q: f64) -> Result<f64> {
        let (mut lo, mut hi) = (-self.s_max, self.s_max);
        let (dlo, dhi) = (self.dlambda(lo), self.dlambda(hi));
        if self.is_degenerate() || !(q >= dlo && q <= dhi) {
            return Err(SpectralError::OutOfRange {
                what: "Λ′ target",
                value: q,
                lo: dlo,
                hi: dhi,
            });
        }
        while hi - lo > SADDLE_TOL {
            let mid = 0.5 * (lo + hi);
            if self.dlambda(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Coefficients of `ζ(t) = c0 + c1 t + c2 t²`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CramerSeries {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub radius_hint: f64,
}

impl CramerSeries {
    pub fn new(cum: &CumulantSet) -> Result<Self> {
        let [_, g2, g3, g4, g5] = cum.gamma;
        if cum.is_degenerate() {
            return Err(SpectralError::DegenerateVariance(g2));
        }
        Ok(CramerSeries {
            c0: g3 / (6.0 * g2.powf(1.5)),
            c1: (g4 * g2 - 3.0 * g3 * g3) / (24.0 * g2.powi(3)),
            c2: (g5 * g2 * g2 - 10.0 * g4 * g3 * g2 + 15.0 * g3.powi(3)) / (120.0 * g2.powf(4.5)),
            radius_hint: cum.s_max / 2.0,
        })
    }

    pub fn zeta(&self, t: f64) -> Result<f64> {
        if !(t.abs() <= self.radius_hint) {
            return Err(SpectralError::OutOfRange {
                what: "t",
                value: t,
                lo: -self.radius_hint,
                hi: self.radius_hint,
            });
        }
        Ok(self.c0 + t * (self.c1 + t * self.c2))
    }
}

pub fn cramer_zeta(cum: &CumulantSet, t: f64) -> Result<f64> {
    CramerSeries::new(cum)?.zeta(t)
}

/// `Λ*(q) = sup_s (s q − Λ(s))` over the curve, refined by a local parabola.
pub fn legendre_transform(curve: &PressureCurve, q: f64) -> Result<f64> {
    let (dlo, dhi) = curve.derivative_range()?;
    let slack = 1e-8 * (1.0 + q.abs());
    if !(q >= dlo - slack && q <= dhi + slack) {
        return Err(SpectralError::OutOfRange {
            what: "q",
            value: q,
            lo: dlo,
            hi: dhi,
        });
    }
    let s = &curve.s_grid;
    let h: Vec<f64> = s.iter().zip(&curve.lambda_vals).map(|(s, l)| s * q - l).collect();
    let n = h.len();
    let k = (0..n).max_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap_or(0);
    let c = k.clamp(1, n - 2);
    let (x0, x1, x2) = (s[c - 1], s[c], s[c + 1]);
    let (y0, y1, y2) = (h[c - 1], h[c], h[c + 1]);
    // Parabola y = a(x − x1)² + b(x − x1) + y1.
    let d0 = x0 - x1;
    let d2 = x2 - x1;
    let a = ((y0 - y1) / d0 - (y2 - y1) / d2) / (d0 - d2);
    let b = (y0 - y1) / d0 - a * d0;
    let mut best = h[k];
    if a < 0.0 {
        let v = -b / (2.0 * a);
        if v >= d0 && v <= d2 {
            best = best.max(y1 - b * b / (4.0 * a));
        }
    }
    Ok(best)
}

/// JSON summary of one spectral run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub resolution: usize,
    pub s_max: f64,
    pub cumulants: CumulantSet,
    pub zeta: Option<CramerSeries>,
    pub max_residual: f64,
    pub max_richardson_delta: Option<f64>,
    pub convex: bool,
}

impl SpectralSummary {
    pub fn new(curve: &PressureCurve, cumulants: CumulantSet) -> Self {
        SpectralSummary {
            resolution: curve.resolution,
            s_max: cumulants.s_max,
            zeta: CramerSeries::new(&cumulants).ok(),
            cumulants,
            max_residual: curve.max_residual(),
            max_richardson_delta: curve.max_richardson_delta(),
            convex: curve.is_discretely_convex(1e-8),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::SOLVER_TOL;
    use super::*;
    use crate::law::{make_law, LawRecipe};
    use crate::semigroup::PositiveMatrix;

    fn rank_one_pressure(s: f64) -> f64 {
        s * 2f64.ln() + s.cosh().ln()
    }

    fn curve_for(recipe: LawRecipe, s_grid: &[f64]) -> PressureCurve {
        let law = make_law(&recipe).unwrap();
        let grid = build_grid(2, DEFAULT_RESOLUTION).unwrap();
        pressure_curve(&law, s_grid, &grid, SOLVER_TOL).unwrap()
    }

    #[test]
    fn chebyshev_grid_is_symmetric() {
        let g = chebyshev_s_grid(0.5, 21);
        assert_eq!(g.len(), 21);
        assert_eq!(g[10], 0.0);
        assert_eq!(g[0], -0.5);
        for j in 0..21 {
            assert_eq!(g[j], -g[20 - j]);
        }
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rank_one_pressure_and_cumulants() {
        let s_grid = chebyshev_s_grid(DEFAULT_S_MAX, DEFAULT_S_POINTS);
        let curve = curve_for(LawRecipe::rank_one_rademacher(), &s_grid);
        for (s, l) in curve.s_grid.iter().zip(&curve.lambda_vals) {
            assert!((l - rank_one_pressure(*s)).abs() < 1e-4, "s={s}: {l}");
        }
        assert!((curve.lambda_vals[20] - 0.46668).abs() < 1e-4);
        assert!(curve.is_discretely_convex(1e-8));
        let cum = cumulants_from_pressure(&curve, DEFAULT_S_MAX).unwrap();
        let expect = [2f64.ln(), 1.0, 0.0, -2.0, 0.0];
        let tol = [1e-6, 1e-4, 1e-3, 0.02, 0.2];
        for k in 0..5 {
            assert!((cum.gamma[k] - expect[k]).abs() < tol[k], "gamma{}: {}", k + 1, cum.gamma[k]);
        }
        let z = CramerSeries::new(&cum).unwrap();
        assert!(z.zeta(0.0).unwrap().abs() < 1e-3);
        assert!((z.zeta(0.1).unwrap() + 0.1 / 12.0).abs() < 2e-3);
        assert_eq!(z.radius_hint, 0.25);
        assert!(z.zeta(0.3).is_err());
    }

    #[test]
    fn point_mass_pressure_is_linear() {
        let s_grid = chebyshev_s_grid(DEFAULT_S_MAX, DEFAULT_S_POINTS);
        let curve = curve_for(LawRecipe::point_mass_a(), &s_grid);
        for (s, l) in curve.s_grid.iter().zip(&curve.lambda_vals) {
            assert!((l - s * 3f64.ln()).abs() < 1e-10);
        }
        assert!(curve.min_second_difference().abs() < 1e-8);
        let cum = cumulants_from_pressure(&curve, DEFAULT_S_MAX).unwrap();
        assert!((cum.gamma[0] - 3f64.ln()).abs() < 1e-9);
        for k in 1..5 {
            assert!(cum.gamma[k].abs() < 1e-6, "gamma{}: {}", k + 1, cum.gamma[k]);
        }
        assert!(matches!(cramer_zeta(&cum, 0.0), Err(SpectralError::DegenerateVariance(_))));
        assert!(legendre_transform(&curve, 3f64.ln()).unwrap().abs() < 1e-9);
        assert!(matches!(legendre_transform(&curve, 1.2), Err(SpectralError::OutOfRange { .. })));
    }

    #[test]
    fn identity_law_has_zero_cumulants() {
        let law = MatrixLaw::new(vec![PositiveMatrix::identity(2).unwrap()], vec![1.0]).unwrap();
        let grid = build_grid(2, 64).unwrap();
        let s_grid = chebyshev_s_grid(DEFAULT_S_MAX, DEFAULT_S_POINTS);
        let curve = pressure_curve(&law, &s_grid, &grid, SOLVER_TOL).unwrap();
        let cum = cumulants_from_pressure(&curve, DEFAULT_S_MAX).unwrap();
        assert!(cum.gamma.iter().all(|g| g.abs() < 1e-9));
        assert!(curve.lambda_vals[10].abs() < 1e-12);
    }

    #[test]
    fn rank_one_legendre() {
        let s_grid: Vec<f64> = (0..=60).map(|i| -1.5 + 0.05 * i as f64).collect();
        let curve = curve_for(LawRecipe::rank_one_rademacher(), &s_grid);
        let q = 2f64.ln() + 1f64.tanh();
        let v = legendre_transform(&curve, q).unwrap();
        assert!((v - (1f64.tanh() - 1f64.cosh().ln())).abs() < 1e-4, "{v}");
        assert!((v - 0.32781).abs() < 1e-4);
        assert!(legendre_transform(&curve, 2f64.ln()).unwrap().abs() < 1e-6);
        assert!(legendre_transform(&curve, 3.0).is_err());
    }

    #[test]
    fn fit_refuses_tiny_window_and_asymmetry() {
        let s_grid = chebyshev_s_grid(1e-3, DEFAULT_S_POINTS);
        let law = make_law(&LawRecipe::rank_one_rademacher()).unwrap();
        let grid = build_grid(2, 16).unwrap();
        let curve = pressure_curve(&law, &s_grid, &grid, SOLVER_TOL).unwrap();
        assert!(matches!(
            cumulants_from_pressure(&curve, 1e-3),
            Err(SpectralError::IllConditioned(_))
        ));
        let lopsided: Vec<f64> = (0..15).map(|i| -0.2 + 0.05 * i as f64).collect();
        let curve = pressure_curve(&law, &lopsided, &grid, SOLVER_TOL).unwrap();
        assert!(cumulants_from_pressure(&curve, 0.5).is_err());
    }

    #[test]
    fn saddle_point_inverts_derivative() {
        let s_grid = chebyshev_s_grid(DEFAULT_S_MAX, DEFAULT_S_POINTS);
        let curve = curve_for(LawRecipe::rank_one_rademacher(), &s_grid);
        let cum = cumulants_from_pressure(&curve, DEFAULT_S_MAX).unwrap();
        let q = 2f64.ln() + 0.3f64.tanh();
        let s = cum.saddle_point(q).unwrap();
        assert!((s - 0.3).abs() < 1e-4, "{s}");
        assert!(cum.saddle_point(5.0).is_err());
    }

    #[test]
    fn richardson_delta_is_reported() {
        let s_grid = chebyshev_s_grid(DEFAULT_S_MAX, 13);
        let curve = curve_for(LawRecipe::two_atom_ab(), &s_grid);
        let delta = curve.max_richardson_delta().unwrap();
        assert!(delta.is_finite() && delta < 1e-3);
        assert!(curve.to_csv().starts_with("s,lambda,kappa,residual,richardson_delta\n"));
    }
}
