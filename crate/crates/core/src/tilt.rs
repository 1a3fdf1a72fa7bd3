//! Exponentially tilted path measures and rare-event estimation for
//! `log |G_n x|`.
//!
//! Steps are drawn from `p_i(x) ∝ w_i |g_i x|^s r_s(g_i·x)`. The importance
//! weight of a path is the exact likelihood ratio `Π w_i / p_i(X_{k-1})`
//! of the original law against the implemented kernel, so estimates stay
//! unbiased whatever the discretization error in `r_s`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::law::MatrixLaw;
use crate::rng::{self, Stream};
use crate::semigroup::{apply_into, euclid, ProjPoint};
use crate::simulate::{simulate_path, Moments, SimError, Trajectory};
use crate::spectral::{assemble_transfer, leading_triple, CumulantSet, ProjGrid, SpectralError, SpectralTriple, SOLVER_TOL};

/// Smallest admissible interpolated `r_s(x)`.
pub const MIN_EIGENFUNCTION: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum TiltError {
    #[error("eigenfunction r_s({value}) below {MIN_EIGENFUNCTION} at the current state")]
    EigenfunctionUnderflow { value: f64 },
    #[error("triple does not match the grid: {0}")]
    Mismatch(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

pub type Result<T> = std::result::Result<T, TiltError>;

/// Tilted law of the next atom from a fixed state.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedStepDistribution {
    pub probs: Vec<f64>,
    /// `Σ_i w_i |g_i x|^s r_s(g_i·x) / (κ r_s(x)) − 1`, before renormalization.
    pub defect: f64,
}

/// The law, grid and eigen-triple that define `Q_s`.
#[derive(Debug, Clone, Copy)]
pub struct TiltedKernel<'a> {
    law: &'a MatrixLaw,
    grid: &'a ProjGrid,
    triple: &'a SpectralTriple,
}

impl<'a> TiltedKernel<'a> {
    pub fn new(law: &'a MatrixLaw, grid: &'a ProjGrid, triple: &'a SpectralTriple) -> Result<Self> {
        if law.dim() != grid.dim() {
            return Err(TiltError::Mismatch(format!(
                "law d = {}, grid d = {}",
                law.dim(),
                grid.dim()
            )));
        }
        if triple.r.len() != grid.len() {
            return Err(TiltError::Mismatch(format!(
                "{} eigenfunction values for {} grid points",
                triple.r.len(),
                grid.len()
            )));
        }
        Ok(Self { law, grid, triple })
    }

    pub fn s(&self) -> f64 {
        self.triple.s
    }

    fn r_at(&self, x: &[f64]) -> Result<f64> {
        let v = self.grid.interpolate(&self.triple.r, x);
        if !(v >= MIN_EIGENFUNCTION) {
            return Err(TiltError::EigenfunctionUnderflow { value: v });
        }
        Ok(v)
    }

    /// Unnormalized tilted masses `w_i |g_i x|^s r_s(g_i·x)` written into `raw`.
    fn raw_masses(&self, x: &[f64], buf: &mut [f64], raw: &mut [f64]) -> Result<()> {
        let d = self.law.dim();
        let s = self.triple.s;
        for (k, (g, &w)) in self.law.atoms().iter().zip(self.law.weights()).enumerate() {
            if s == 0.0 {
                raw[k] = w;
                continue;
            }
            apply_into(g.entries(), x, buf, d);
            let norm = euclid(buf);
            if !(norm > 0.0) {
                return Err(SimError::DegenerateAction { step: 0 }.into());
            }
            // Stencils are scale invariant, so `g x` need not be normalized.
            raw[k] = w * norm.powf(s) * self.r_at(buf)?;
        }
        Ok(())
    }

    pub fn step_distribution(&self, x: &ProjPoint) -> Result<TiltedStepDistribution> {
        if x.dim() != self.law.dim() {
            return Err(TiltError::Input("state dimension does not match the law".into()));
        }
        let mut buf = vec![0.0; self.law.dim()];
        let mut raw = vec![0.0; self.law.len()];
        self.raw_masses(x.coords(), &mut buf, &mut raw)?;
        let total: f64 = raw.iter().sum();
        let defect = if self.triple.s == 0.0 {
            0.0
        } else {
            total / (self.triple.kappa * self.r_at(x.coords())?) - 1.0
        };
        Ok(TiltedStepDistribution {
            probs: raw.iter().map(|m| m / total).collect(),
            defect,
        })
    }

    /// One tilted path of length `n` with its importance weight.
    pub fn run(&self, x0: &ProjPoint, f: &ProjPoint, n: usize, rng: &mut Stream) -> Result<TiltedPath> {
        if n == 0 {
            return Err(TiltError::Input("n must be >= 1".into()));
        }
        let d = self.law.dim();
        let atoms = self.law.atoms();
        let weights = self.law.weights();
        let mut buf = vec![0.0; d];
        let mut raw = vec![0.0; self.law.len()];
        let mut log_weight = 0.0;
        let mut failure: Option<TiltError> = None;
        let traj = simulate_path(d, x0, f, n, false, true, |x, g| {
            if let Err(e) = self.raw_masses(x, &mut buf, &mut raw) {
                failure = Some(e);
                return Err(SimError::Config("tilted step failed".into()));
            }
            let total: f64 = raw.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = raw.len() - 1;
            for (k, m) in raw.iter().enumerate() {
                acc += m;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            if self.triple.s != 0.0 {
                log_weight += (weights[pick] * total / raw[pick]).ln();
            }
            g.copy_from_slice(atoms[pick].entries());
            Ok(())
        });
        let trajectory = match (traj, failure) {
            (_, Some(e)) => return Err(e),
            (r, None) => r?,
        };
        let s = self.triple.s;
        let analytic_log_weight = if s == 0.0 {
            0.0
        } else {
            n as f64 * self.triple.kappa.ln() + self.r_at(x0.coords())?.ln()
                - self.r_at(trajectory.x_final.coords())?.ln()
                - s * trajectory.log_vec_norm
        };
        Ok(TiltedPath {
            weight: log_weight.exp(),
            log_weight,
            analytic_log_weight,
            trajectory,
        })
    }
}

/// Tilted path plus the likelihood ratio `dP/dQ_s` along it.
#[derive(Debug, Clone)]
pub struct TiltedPath {
    pub trajectory: Trajectory,
    pub weight: f64,
    pub log_weight: f64,
    /// `log(κⁿ r_s(x)/r_s(X_n) |G_n x|^{-s})`, the weight of the exact kernel;
    /// differs from `log_weight` by the accumulated step defects.
    pub analytic_log_weight: f64,
}

pub fn tilt_step_distribution(
    law: &MatrixLaw,
    grid: &ProjGrid,
    triple: &SpectralTriple,
    x: &ProjPoint,
) -> Result<TiltedStepDistribution> {
    TiltedKernel::new(law, grid, triple)?.step_distribution(x)
}

pub fn run_tilted_trajectory(
    law: &MatrixLaw,
    grid: &ProjGrid,
    triple: &SpectralTriple,
    x0: &ProjPoint,
    n: usize,
    rng: &mut Stream,
) -> Result<(Trajectory, f64)> {
    let path = TiltedKernel::new(law, grid, triple)?.run(x0, x0, n, rng)?;
    Ok((path.trajectory, path.weight))
}

/// Direction of a tail event for `log |G_n x|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// `log |G_n x| ≥ threshold`
    Upper,
    /// `log |G_n x| ≤ threshold`
    Lower,
}

impl Tail {
    pub fn hit(self, value: f64, threshold: f64) -> bool {
        match self {
            Tail::Upper => value >= threshold,
            Tail::Lower => value <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub p: f64,
    pub se: f64,
    pub n: usize,
    pub y: f64,
    pub threshold: f64,
    pub tail: Tail,
    pub s_star: f64,
    pub mean_weight: f64,
    pub mean_weight_se: f64,
    /// Mean of `log |G_n x| / n` under the tilted measure.
    pub tilted_drift: f64,
    pub tilted_drift_se: f64,
    pub events: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl TailEstimate {
    /// `p ± 3 se` clamped to `[0, 1]`.
    pub fn interval3(&self) -> (f64, f64) {
        (
            (self.p - 3.0 * self.se).clamp(0.0, 1.0),
            (self.p + 3.0 * self.se).clamp(0.0, 1.0),
        )
    }
}

/// Tilted replicates at a fixed `s` for the event `tail(log |G_n x|, threshold)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_tail_at(
    law: &MatrixLaw,
    grid: &ProjGrid,
    triple: &SpectralTriple,
    x0: &ProjPoint,
    n: usize,
    threshold: f64,
    tail: Tail,
    replicates: usize,
    seed: u64,
) -> Result<TailEstimate> {
    if replicates < 2 {
        return Err(TiltError::Input("need at least two replicates".into()));
    }
    let kernel = TiltedKernel::new(law, grid, triple)?;
    let rows: Vec<Result<(f64, f64, f64, bool)>> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng::split(seed, i);
            let path = kernel.run(x0, x0, n, &mut stream)?;
            let v = path.trajectory.log_vec_norm;
            let hit = tail.hit(v, threshold);
            Ok((if hit { path.weight } else { 0.0 }, path.weight, v / n as f64, hit))
        })
        .collect();
    let mut est = Moments::default();
    let mut wts = Moments::default();
    let mut drift = Moments::default();
    let mut events = 0;
    for row in rows {
        let (a, w, q, hit) = row?;
        est.push(a);
        wts.push(w);
        drift.push(q);
        events += hit as usize;
    }
    Ok(TailEstimate {
        p: est.mean,
        se: est.se(),
        n,
        y: f64::NAN,
        threshold,
        tail,
        s_star: triple.s,
        mean_weight: wts.mean,
        mean_weight_se: wts.se(),
        tilted_drift: drift.mean,
        tilted_drift_se: drift.se(),
        events,
        replicates,
        seed,
    })
}

/// Estimates the event `tail(log |G_n x|, threshold)` with the tilt `s*`
/// solving `Λ′(s*) = threshold / n` on the fitted pressure.
#[allow(clippy::too_many_arguments)]
pub fn estimate_tail_threshold(
    law: &MatrixLaw,
    grid: &ProjGrid,
    cumulants: &CumulantSet,
    x0: &ProjPoint,
    n: usize,
    threshold: f64,
    tail: Tail,
    replicates: usize,
    seed: u64,
) -> Result<TailEstimate> {
    if n == 0 {
        return Err(TiltError::Input("n must be >= 1".into()));
    }
    let s_star = cumulants.saddle_point(threshold / n as f64)?;
    let op = assemble_transfer(law, s_star, grid)?;
    let triple = leading_triple(&op, SOLVER_TOL)?;
    estimate_tail_at(law, grid, &triple, x0, n, threshold, tail, replicates, seed)
}

/// `P(log |G_n x| ≥ nλ + σ√n y)` by tilting to the saddle point.
#[allow(clippy::too_many_arguments)]
pub fn estimate_tail_probability(
    law: &MatrixLaw,
    grid: &ProjGrid,
    cumulants: &CumulantSet,
    x0: &ProjPoint,
    n: usize,
    y: f64,
    replicates: usize,
    seed: u64,
) -> Result<TailEstimate> {
    if !(y >= 0.0) {
        return Err(TiltError::Input(format!("y = {y} must be >= 0")));
    }
    let nf = n as f64;
    let threshold = nf * cumulants.lambda_lyap + cumulants.sigma2.sqrt() * nf.sqrt() * y;
    let mut est = estimate_tail_threshold(law, grid, cumulants, x0, n, threshold, Tail::Upper, replicates, seed)?;
    est.y = y;
    Ok(est)
}
