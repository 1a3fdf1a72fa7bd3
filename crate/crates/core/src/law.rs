//! Finite-support laws over positive matrices, samplers and condition reports.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::semigroup::{
    check_conditions_matrix, matrix_functionals, spectral_radius_pf, PositiveMatrix,
    SemigroupError,
};

/// Tolerance on `Σ weights = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Default product length explored by [`arithmeticity_heuristic`].
pub const ARITHMETIC_DEPTH: usize = 4;
/// Tolerance of the real-gcd lattice test.
pub const LATTICE_TOL: f64 = 1e-9;
const LATTICE_MAX_DENOMINATOR: u64 = 10_000;
const MAX_PRODUCTS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LawError {
    #[error("law has no atoms")]
    Empty,
    #[error("{atoms} atoms but {weights} weights")]
    LengthMismatch { atoms: usize, weights: usize },
    #[error("weight {index} = {value} is not strictly positive")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("weights sum to {0}, not 1")]
    WeightSum(f64),
    #[error("atom {index} has dimension {got}, expected {expected}")]
    AtomDimension {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error("no strictly positive product up to depth {0}; arithmeticity inconclusive")]
    ArithmeticityInconclusive(usize),
    #[error(transparent)]
    Matrix(#[from] SemigroupError),
    #[error("recipe (de)serialization failed: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, LawError>;

/// Declarative description of a law, serializable as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawRecipe {
    /// Atoms given as row-major row lists.
    Explicit {
        atoms: Vec<Vec<Vec<f64>>>,
        weights: Vec<f64>,
    },
    /// Atoms `a·J`, `J` the all-ones matrix, with `a` drawn from a finite scalar law.
    RankOne {
        dim: usize,
        scalars: Vec<f64>,
        weights: Vec<f64>,
    },
    /// `count` random atoms whose column ratios are bounded by `c`, equal weights.
    RandomA3 {
        dim: usize,
        count: usize,
        c: f64,
        seed: u64,
    },
}

impl LawRecipe {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LawError::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LawError::Serde(e.to_string()))
    }

    /// `δ_{[[2,1],[1,2]]}`.
    pub fn point_mass_a() -> Self {
        Self::Explicit {
            atoms: vec![vec![vec![2.0, 1.0], vec![1.0, 2.0]]],
            weights: vec![1.0],
        }
    }

    /// `½δ_{[[2,1],[1,2]]} + ½δ_{[[1,2],[3,1]]}`.
    pub fn two_atom_ab() -> Self {
        Self::Explicit {
            atoms: vec![
                vec![vec![2.0, 1.0], vec![1.0, 2.0]],
                vec![vec![1.0, 2.0], vec![3.0, 1.0]],
            ],
            weights: vec![0.5, 0.5],
        }
    }

    /// Rank-one law with scalars `{e⁻¹, e}` at equal weights, `d = 2`.
    pub fn rank_one_rademacher() -> Self {
        Self::RankOne {
            dim: 2,
            scalars: vec![(-1f64).exp(), 1f64.exp()],
            weights: vec![0.5, 0.5],
        }
    }
}

/// A validated finite-support law `μ = Σ wᵢ δ_{gᵢ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLaw {
    dim: usize,
    atoms: Vec<PositiveMatrix>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl MatrixLaw {
    pub fn new(atoms: Vec<PositiveMatrix>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(LawError::Empty);
        }
        if atoms.len() != weights.len() {
            return Err(LawError::LengthMismatch {
                atoms: atoms.len(),
                weights: weights.len(),
            });
        }
        let dim = atoms[0].dim();
        for (index, a) in atoms.iter().enumerate() {
            if a.dim() != dim {
                return Err(LawError::AtomDimension {
                    index,
                    expected: dim,
                    got: a.dim(),
                });
            }
        }
        for (index, &value) in weights.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(LawError::NonPositiveWeight { index, value });
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(LawError::WeightSum(total));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            dim,
            atoms,
            weights,
            cumulative,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[PositiveMatrix] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Inverse-CDF lookup: the first atom whose weight prefix sum exceeds `u`.
    pub fn index_for_uniform(&self, u: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.atoms.len() - 1)
    }

    #[inline]
    pub fn sample_index(&self, rng: &mut Stream) -> usize {
        if self.atoms.len() == 1 {
            return 0;
        }
        self.index_for_uniform(rng.random::<f64>())
    }

    /// SHA-256 over the shortest round-trip decimal form of every atom entry and weight.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("d={};", self.dim));
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            for v in a.entries() {
                h.update(format!("{v:?},"));
            }
            h.update(format!("w={w:?};"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Any source of i.i.d. matrices the simulator can draw from.
pub trait MatrixSource: Sync {
    fn dim(&self) -> usize;
    /// Writes the entries of the next draw into `out` (row-major).
    fn sample_into(&self, rng: &mut Stream, out: &mut [f64]);
}

impl MatrixSource for MatrixLaw {
    fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn sample_into(&self, rng: &mut Stream, out: &mut [f64]) {
        let i = self.sample_index(rng);
        out.copy_from_slice(self.atoms[i].entries());
    }
}

/// A law given only by a generator, for infinite-support Monte Carlo.
pub struct CallbackLaw<F> {
    dim: usize,
    generator: F,
}

impl<F> CallbackLaw<F>
where
    F: Fn(&mut Stream) -> PositiveMatrix + Sync,
{
    pub fn new(dim: usize, generator: F) -> Self {
        Self { dim, generator }
    }
}

impl<F> MatrixSource for CallbackLaw<F>
where
    F: Fn(&mut Stream) -> PositiveMatrix + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_into(&self, rng: &mut Stream, out: &mut [f64]) {
        let g = (self.generator)(rng);
        out.copy_from_slice(g.entries());
    }
}

pub fn make_law(recipe: &LawRecipe) -> Result<MatrixLaw> {
    match recipe {
        LawRecipe::Explicit { atoms, weights } => {
            let atoms = atoms
                .iter()
                .enumerate()
                .map(|(index, rows)| {
                    let d = rows.len();
                    if rows.iter().any(|r| r.len() != d) {
                        return Err(LawError::Recipe(format!("atom {index} is not square")));
                    }
                    Ok(PositiveMatrix::from_rows(rows)?)
                })
                .collect::<Result<Vec<_>>>()?;
            MatrixLaw::new(atoms, weights.clone())
        }
        LawRecipe::RankOne {
            dim,
            scalars,
            weights,
        } => {
            if scalars.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(LawError::Recipe("rank-one scalars must be positive".into()));
            }
            let atoms = scalars
                .iter()
                .map(|&a| PositiveMatrix::scaled_ones(*dim, a))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            MatrixLaw::new(atoms, weights.clone())
        }
        LawRecipe::RandomA3 {
            dim,
            count,
            c,
            seed,
        } => {
            if *count == 0 {
                return Err(LawError::Empty);
            }
            if !(*c >= 1.0 && c.is_finite()) {
                return Err(LawError::Recipe(format!("column constant {c} must be >= 1")));
            }
            let d = *dim;
            let mut stream = rng::split(*seed, 0);
            let mut atoms = Vec::with_capacity(*count);
            for _ in 0..*count {
                let mut e = vec![0.0; d * d];
                for j in 0..d {
                    let base: f64 = stream.random_range(0.5..2.0);
                    for i in 0..d {
                        let ratio = if *c > 1.0 {
                            stream.random_range(1.0..*c)
                        } else {
                            1.0
                        };
                        e[i * d + j] = base * ratio;
                    }
                }
                atoms.push(PositiveMatrix::new(d, e)?);
            }
            let w = 1.0 / *count as f64;
            let mut weights = vec![w; *count];
            // Exact unit sum regardless of rounding in 1/count.
            let head: f64 = weights[..*count - 1].iter().sum();
            weights[*count - 1] = 1.0 - head;
            MatrixLaw::new(atoms, weights)
        }
    }
}

pub fn sample_matrix(law: &MatrixLaw, rng: &mut Stream) -> PositiveMatrix {
    law.atoms[law.sample_index(rng)].clone()
}

/// Aggregated moment, allowability, column-comparability, harmonic-moment and
/// lattice reports for a law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawConditionReport {
    /// Largest tested `η ≤ 1` with finite `E[N(g)^η]`; 1 for finite support.
    pub eta_estimate: Option<f64>,
    pub all_atoms_allowable: bool,
    /// Some product of atoms up to [`ARITHMETIC_DEPTH`] is strictly positive.
    pub positive_product_found: bool,
    /// Max of the atom column constants, present iff every atom is strictly positive.
    pub a3_constant: Option<f64>,
    pub harmonic_ok: bool,
    pub harmonic_delta: Option<f64>,
    pub arithmetic_warning: bool,
    pub arithmetic_inconclusive: bool,
    /// Report built from samples of a generator rather than exact atoms.
    pub approximate: bool,
}

pub fn law_condition_report(law: &MatrixLaw) -> LawConditionReport {
    let reports: Vec<_> = law.atoms.iter().map(check_conditions_matrix).collect();
    let a3_constant = reports
        .iter()
        .map(|r| r.column_constant)
        .collect::<Option<Vec<f64>>>()
        .map(|cs| cs.into_iter().fold(1.0, f64::max));
    let harmonic_ok = reports.iter().all(|r| r.strictly_positive);
    let arithmetic = arithmeticity_heuristic(law, ARITHMETIC_DEPTH);
    LawConditionReport {
        eta_estimate: Some(1.0),
        all_atoms_allowable: reports.iter().all(|r| r.allowable),
        positive_product_found: arithmetic.is_ok(),
        a3_constant,
        harmonic_ok,
        harmonic_delta: harmonic_ok.then_some(1.0),
        arithmetic_warning: arithmetic.clone().unwrap_or(true),
        arithmetic_inconclusive: arithmetic.is_err(),
        approximate: false,
    }
}

/// Condition report for a generator-only law, built from `samples` draws.
///
/// `η` comes from a Hill tail-index fit of `N(g)` and is halved so that
/// `N(g)^η` keeps a finite second moment; the lattice check is skipped.
pub fn sampled_condition_report<S: MatrixSource>(
    source: &S,
    samples: usize,
    rng: &mut Stream,
) -> Result<LawConditionReport> {
    let d = source.dim();
    let mut buf = vec![0.0; d * d];
    let mut big_n = Vec::with_capacity(samples);
    let mut allowable = true;
    let mut positive = true;
    let mut a3: f64 = 1.0;
    for _ in 0..samples {
        source.sample_into(rng, &mut buf);
        let g = PositiveMatrix::new(d, buf.clone())?;
        let r = check_conditions_matrix(&g);
        allowable &= r.allowable;
        positive &= r.strictly_positive;
        if let Some(c) = r.column_constant {
            a3 = a3.max(c);
        }
        big_n.push(matrix_functionals(&g).big_n);
    }
    let tail_index = hill_tail_index(&big_n);
    Ok(LawConditionReport {
        eta_estimate: tail_index.map(|a| (0.5 * a).min(1.0)),
        all_atoms_allowable: allowable,
        positive_product_found: positive,
        a3_constant: positive.then_some(a3),
        harmonic_ok: positive,
        harmonic_delta: None,
        arithmetic_warning: false,
        arithmetic_inconclusive: true,
        approximate: true,
    })
}

/// Hill estimator on the top `√m` order statistics; `None` if the sample is
/// degenerate. An infinite value means no detectable tail.
fn hill_tail_index(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 16 {
        return None;
    }
    v.sort_by(|a, b| b.total_cmp(a));
    let k = (v.len() as f64).sqrt() as usize;
    let threshold = v[k];
    if !(threshold > 0.0) {
        return None;
    }
    let mean_log: f64 = v[..k].iter().map(|x| (x / threshold).ln()).sum::<f64>() / k as f64;
    Some(if mean_log > 0.0 { 1.0 / mean_log } else { f64::INFINITY })
}

/// Lattice heuristic on `{log ρ(g)}` over strictly positive products of at most
/// `depth` atoms.
///
/// Returns `true` (warning) when every pairwise difference lies within
/// [`LATTICE_TOL`] of an integer multiple of one spacing, found by a real gcd
/// built from continued-fraction convergents. A `false` does not prove
/// non-arithmeticity: elements beyond `depth` are never inspected.
pub fn arithmeticity_heuristic(law: &MatrixLaw, depth: usize) -> Result<bool> {
    if depth == 0 {
        return Err(LawError::Recipe("depth must be >= 1".into()));
    }
    let mut values = log_spectral_radii(law, depth)?;
    if values.is_empty() {
        return Err(LawError::ArithmeticityInconclusive(depth));
    }
    values.sort_by(f64::total_cmp);
    values.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    Ok(common_spacing(&values, LATTICE_TOL).is_some())
}

fn log_spectral_radii(law: &MatrixLaw, depth: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut layer: Vec<PositiveMatrix> = law.atoms.clone();
    for len in 1..=depth {
        for g in &layer {
            if g.is_strictly_positive() {
                let (rho, _) = spectral_radius_pf(g, 1e-14)?;
                out.push(rho.ln());
            }
        }
        if len == depth || layer.len() * law.len() > MAX_PRODUCTS {
            break;
        }
        let mut next = Vec::with_capacity(layer.len() * law.len());
        for g in &layer {
            for a in &law.atoms {
                next.push(a.mul(g)?);
            }
        }
        layer = next;
    }
    Ok(out)
}

/// Spacing `h` with every `vᵢ − v₀` within `tol` of a multiple of `h`, if one
/// exists with bounded denominators.
pub(crate) fn common_spacing(values: &[f64], tol: f64) -> Option<f64> {
    let diffs: Vec<f64> = values
        .iter()
        .map(|v| (v - values[0]).abs())
        .filter(|d| *d > tol)
        .collect();
    let Some(base) = diffs.iter().copied().reduce(f64::min) else {
        // A single value generates a lattice.
        return Some(values.first().map_or(0.0, |v| v.abs()));
    };
    let mut denom: u64 = 1;
    for &d in &diffs {
        let (_, q) = rational_multiple(d, base, tol)?;
        denom = lcm(denom, q);
        if denom > LATTICE_MAX_DENOMINATOR {
            return None;
        }
    }
    let h = base / denom as f64;
    diffs
        .iter()
        .all(|d| (d - (d / h).round() * h).abs() <= tol)
        .then_some(h)
}

/// Smallest-denominator convergent `p/q` of `x/base` with `|x − (p/q)·base| ≤ tol`.
fn rational_multiple(x: f64, base: f64, tol: f64) -> Option<(u64, u64)> {
    let r = x / base;
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut frac = r;
    for _ in 0..64 {
        let a = frac.floor();
        if a > 1e12 {
            return None;
        }
        let a_int = a as u64;
        let h2 = a_int.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a_int.checked_mul(k1)?.checked_add(k0)?;
        if k2 > LATTICE_MAX_DENOMINATOR {
            return None;
        }
        if (x - (h2 as f64 / k2 as f64) * base).abs() <= tol {
            return Some((h2, k2));
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let rem = frac - a;
        if rem <= f64::EPSILON {
            return None;
        }
        frac = 1.0 / rem;
    }
    None
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}
