//! Overflow-safe simulation of `G_n = g_n ⋯ g_1`.
//!
//! The product is carried as `M_k = G_k / ‖G_k‖` together with
//! `L_k = log ‖G_k‖`, renormalizing after every step, so entries stay
//! bounded however fast `G_n` grows. The projective chain `X_k = G_k·x`
//! is advanced separately by the projective action.

use rayon::prelude::*;
use thiserror::Error;

use crate::law::{MatrixLaw, MatrixSource};
use crate::rng::{self, Stream};
use crate::semigroup::{
    apply_into, euclid, mul_into, op_norm_raw, power_iterate, ProjPoint, SemigroupError,
};

/// Bracket tolerance for `ρ(M_n)`.
pub const SPEC_RAD_TOL: f64 = 1e-10;
const SPEC_RAD_MAX_ITER: usize = 10_000;
/// Default margin `δ_K` of the compact interior set `K = S₊,δ_K`.
pub const DEFAULT_K_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("degenerate action at step {step}")]
    DegenerateAction { step: usize },
    #[error("dimension mismatch: law has d = {law}, point has d = {point}")]
    Dimension { law: usize, point: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Matrix(#[from] SemigroupError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// One realization of the four log-observables and the final chain state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub x0: ProjPoint,
    pub f: ProjPoint,
    /// `log |G_n x|`
    pub log_vec_norm: f64,
    /// `log ‖G_n‖`
    pub log_op_norm: f64,
    /// `log ⟨f, G_n x⟩`; `-∞` when the scalar product vanishes.
    pub log_entry: f64,
    /// `log ρ(G_n)`
    pub log_spec_rad: f64,
    pub x_final: ProjPoint,
    pub per_step_log_gains: Option<Vec<f64>>,
    /// `⟨f, G_n x⟩` underflowed to zero.
    pub entry_flagged: bool,
    /// Width of the Collatz–Wielandt bracket when power iteration on `M_n`
    /// did not converge and the midpoint was used; zero otherwise.
    pub spec_rad_bracket: f64,
}

/// The four observables in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    VecNorm,
    OpNorm,
    Entry,
    SpecRad,
}

impl Observable {
    pub const ALL: [Observable; 4] = [
        Observable::VecNorm,
        Observable::OpNorm,
        Observable::Entry,
        Observable::SpecRad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Observable::VecNorm => "log_vec_norm",
            Observable::OpNorm => "log_op_norm",
            Observable::Entry => "log_entry",
            Observable::SpecRad => "log_spec_rad",
        }
    }
}

impl Trajectory {
    pub fn observable(&self, which: Observable) -> f64 {
        match which {
            Observable::VecNorm => self.log_vec_norm,
            Observable::OpNorm => self.log_op_norm,
            Observable::Entry => self.log_entry,
            Observable::SpecRad => self.log_spec_rad,
        }
    }

    pub fn observables(&self) -> [f64; 4] {
        [
            self.log_vec_norm,
            self.log_op_norm,
            self.log_entry,
            self.log_spec_rad,
        ]
    }
}

/// Binary exponent window outside which the running product is rescaled.
const RESCALE_EXP: i64 = 32;

/// Runs one path with matrices supplied by `next`, which fills a row-major
/// buffer. When `track_state` is set, `next` also sees the current chain
/// state `X_k`; otherwise it sees `x0`.
pub(crate) fn simulate_path(
    dim: usize,
    x0: &ProjPoint,
    f: &ProjPoint,
    n: usize,
    keep_gains: bool,
    track_state: bool,
    mut next: impl FnMut(&[f64], &mut [f64]) -> Result<()>,
) -> Result<Trajectory> {
    if x0.dim() != dim || f.dim() != dim {
        return Err(SimError::Dimension {
            law: dim,
            point: if x0.dim() != dim { x0.dim() } else { f.dim() },
        });
    }
    let d = dim;
    let track_state = track_state || keep_gains;
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    let mut tmp = vec![0.0; d * d];
    let mut g = vec![0.0; d * d];
    let mut x = x0.coords().to_vec();
    let mut y = vec![0.0; d];
    // `G_k = 2^scale_exp · m`; rescaling by powers of two is exact.
    let mut scale_exp: i64 = 0;
    let mut gains = keep_gains.then(|| Vec::with_capacity(n));

    for step in 0..n {
        next(&x, &mut g)?;
        mul_into(&g, &m, &mut tmp, d);
        std::mem::swap(&mut m, &mut tmp);
        let mut top = 0.0;
        for &v in m.iter() {
            if v > top {
                top = v;
            }
        }
        if !(top > 0.0 && top.is_finite()) {
            return Err(SimError::DegenerateAction { step });
        }
        let e = binary_exponent(top).clamp(-1022, 1022);
        if e.abs() > RESCALE_EXP {
            let factor = pow2(-e);
            for v in m.iter_mut() {
                *v *= factor;
            }
            scale_exp += e;
        }

        if track_state {
            apply_into(&g, &x, &mut y, d);
            let gain = euclid(&y);
            if !(gain > 0.0) {
                return Err(SimError::DegenerateAction { step });
            }
            let inv = 1.0 / gain;
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi = yi * inv;
            }
            if let Some(gs) = gains.as_mut() {
                gs.push(gain.ln());
            }
        }
    }

    let norm = op_norm_raw(&m, d);
    if !(norm > 0.0) {
        return Err(SimError::DegenerateAction { step: n });
    }
    let inv = 1.0 / norm;
    for v in m.iter_mut() {
        *v *= inv;
    }
    let log_norm = scale_exp as f64 * std::f64::consts::LN_2 + norm.ln();

    let mut mx = vec![0.0; d];
    apply_into(&m, x0.coords(), &mut mx, d);
    let vec_norm = euclid(&mx);
    if !(vec_norm > 0.0) {
        return Err(SimError::DegenerateAction { step: n });
    }
    let entry: f64 = mx.iter().zip(f.coords()).map(|(a, b)| a * b).sum();
    let entry_flagged = !(entry > 0.0);
    let log_entry = if entry_flagged {
        f64::NEG_INFINITY
    } else {
        entry.ln() + log_norm
    };

    let start = vec![1.0 / (d as f64).sqrt(); d];
    let (rho, spec_rad_bracket) =
        match power_iterate(&m, d, start, SPEC_RAD_TOL, SPEC_RAD_MAX_ITER) {
            Ok((rho, _)) => (rho, 0.0),
            Err(SemigroupError::NotConverged { lower, upper, .. }) if upper.is_finite() => {
                (0.5 * (lower + upper), upper - lower)
            }
            Err(SemigroupError::NotConverged { lower, .. }) => (lower, f64::INFINITY),
            Err(e) => return Err(e.into()),
        };

    Ok(Trajectory {
        n,
        x0: x0.clone(),
        f: f.clone(),
        log_vec_norm: vec_norm.ln() + log_norm,
        log_op_norm: log_norm,
        log_entry,
        log_spec_rad: rho.ln() + log_norm,
        x_final: ProjPoint::normalized_unchecked(mx, vec_norm),
        per_step_log_gains: gains,
        entry_flagged,
        spec_rad_bracket,
    })
}

/// Unbiased binary exponent of a positive normal float.
#[inline]
fn binary_exponent(v: f64) -> i64 {
    ((v.to_bits() >> 52) & 0x7ff) as i64 - 1023
}

#[inline]
fn pow2(e: i64) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// One trajectory of length `n` drawing i.i.d. matrices from `law`.
pub fn run_trajectory<S: MatrixSource + ?Sized>(
    law: &S,
    x0: &ProjPoint,
    f: &ProjPoint,
    n: usize,
    rng: &mut Stream,
) -> Result<Trajectory> {
    run_trajectory_opts(law, x0, f, n, false, rng)
}

pub fn run_trajectory_opts<S: MatrixSource + ?Sized>(
    law: &S,
    x0: &ProjPoint,
    f: &ProjPoint,
    n: usize,
    keep_gains: bool,
    rng: &mut Stream,
) -> Result<Trajectory> {
    if n == 0 {
        return Err(SimError::Config("n must be >= 1".into()));
    }
    simulate_path(law.dim(), x0, f, n, keep_gains, false, |_, g| {
        law.sample_into(rng, g);
        Ok(())
    })
}

/// Trajectory along a prescribed sequence of atom indices.
pub fn run_trajectory_with_atoms(
    law: &MatrixLaw,
    x0: &ProjPoint,
    f: &ProjPoint,
    atoms: &[usize],
) -> Result<Trajectory> {
    if let Some(&bad) = atoms.iter().find(|&&i| i >= law.len()) {
        return Err(SimError::Config(format!("atom index {bad} out of range")));
    }
    let mut it = atoms.iter();
    simulate_path(law.dim(), x0, f, atoms.len(), true, false, |_, g| {
        let i = *it.next().expect("length checked");
        g.copy_from_slice(law.atoms()[i].entries());
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub replicates: usize,
    pub x0: ProjPoint,
    pub f: ProjPoint,
    pub seed: u64,
    pub keep_gains: bool,
}

impl SimConfig {
    pub fn new(n: usize, replicates: usize, x0: ProjPoint, f: ProjPoint, seed: u64) -> Self {
        Self {
            n,
            replicates,
            x0,
            f,
            seed,
            keep_gains: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.replicates == 0 {
            return Err(SimError::Config("n and replicates must be >= 1".into()));
        }
        match (self.n as u128).checked_mul(self.replicates as u128) {
            Some(total) if total < (1u128 << 63) => Ok(()),
            _ => Err(SimError::Config("replicates * n exceeds 2^63".into())),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutput {
    /// Successful replicates in replicate order.
    pub trajectories: Vec<(u64, Trajectory)>,
    pub failures: Vec<(u64, SimError)>,
}

/// Replicate `i` uses `rng::split(cfg.seed, i)`; output order is replicate order.
pub fn run_batch<S: MatrixSource + ?Sized>(law: &S, cfg: &SimConfig) -> Result<BatchOutput> {
    let results = run_batch_map(law, cfg, |i, r| (i, r))?;
    let mut out = BatchOutput::default();
    for (i, r) in results {
        match r {
            Ok(t) => out.trajectories.push((i, t)),
            Err(e) => out.failures.push((i, e)),
        }
    }
    Ok(out)
}

/// Runs every replicate and maps it through `map` without retaining full trajectories.
pub fn run_batch_map<S, T, F>(law: &S, cfg: &SimConfig, map: F) -> Result<Vec<T>>
where
    S: MatrixSource + ?Sized,
    T: Send,
    F: Fn(u64, Result<Trajectory>) -> T + Sync,
{
    cfg.validate()?;
    Ok((0..cfg.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng::split(cfg.seed, i);
            let r = run_trajectory_opts(law, &cfg.x0, &cfg.f, cfg.n, cfg.keep_gains, &mut stream);
            map(i, r)
        })
        .collect())
}

/// States of the projective chain after `burn_in` steps, spaced by `stride`.
pub fn stationary_sample<S: MatrixSource + ?Sized>(
    law: &S,
    burn_in: usize,
    count: usize,
    stride: usize,
    rng: &mut Stream,
) -> Result<Vec<ProjPoint>> {
    if burn_in == 0 || stride == 0 {
        return Err(SimError::Config("burn_in and stride must be >= 1".into()));
    }
    let d = law.dim();
    let mut g = vec![0.0; d * d];
    let mut x = vec![1.0 / (d as f64).sqrt(); d];
    let mut y = vec![0.0; d];
    let mut step = 0usize;
    let mut advance = |x: &mut Vec<f64>, rng: &mut Stream| -> Result<()> {
        law.sample_into(rng, &mut g);
        apply_into(&g, x, &mut y, d);
        let norm = euclid(&y);
        if !(norm > 0.0) {
            return Err(SimError::DegenerateAction { step });
        }
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
        step += 1;
        Ok(())
    };
    for _ in 0..burn_in {
        advance(&mut x, rng)?;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(ProjPoint::normalized_unchecked(x.clone(), 1.0));
        for _ in 0..stride {
            advance(&mut x, rng)?;
        }
    }
    Ok(out)
}

/// Running mean and second central moment, mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Moments { count, mean, m2 }
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean; `NaN` below two samples.
    pub fn se(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Per-observable moments over a batch, excluding flagged (`-∞`) rows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchSummary {
    pub moments: [Moments; 4],
    pub excluded: [u64; 4],
}

/// Moments built by a balanced pairwise merge over replicate order.
pub fn summarize(trajectories: &[(u64, Trajectory)]) -> BatchSummary {
    fn reduce(ts: &[(u64, Trajectory)]) -> ([Moments; 4], [u64; 4]) {
        if ts.len() <= 64 {
            let mut m = [Moments::default(); 4];
            let mut ex = [0u64; 4];
            for (_, t) in ts {
                for (k, v) in t.observables().into_iter().enumerate() {
                    if v.is_finite() {
                        m[k].push(v);
                    } else {
                        ex[k] += 1;
                    }
                }
            }
            return (m, ex);
        }
        let (a, b) = ts.split_at(ts.len() / 2);
        let (ma, ea) = reduce(a);
        let (mb, eb) = reduce(b);
        let mut m = [Moments::default(); 4];
        let mut ex = [0u64; 4];
        for k in 0..4 {
            m[k] = ma[k].merge(&mb[k]);
            ex[k] = ea[k] + eb[k];
        }
        (m, ex)
    }
    let (moments, excluded) = reduce(trajectories);
    BatchSummary { moments, excluded }
}
