//! Batch experiment runner: configuration, manifests and one function per subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use posmat::law::{law_condition_report, make_law, LawRecipe, MatrixLaw};
use posmat::rng;
use posmat::semigroup::{ProjPoint, PF_DEFAULT_TOL};
use posmat::simulate::{run_batch, summarize, Observable, SimConfig, SPEC_RAD_TOL, DEFAULT_K_DELTA};
use posmat::spectral::{
    build_grid, chebyshev_s_grid, cumulants_from_pressure, pressure_curve, CumulantSet, ProjGrid,
    SpectralSummary, DEFAULT_RESOLUTION, DEFAULT_S_MAX, DEFAULT_S_POINTS, SOLVER_TOL,
};
use posmat::stats::{
    berry_esseen_rate_fit, log_spaced, mdp_rate_check, moderate_deviation_ratio, regularity_exponent,
    variance_triple, BerryEsseenConfig, Centering, MdpConfig, MdrConfig, MdrMode, VarianceCenter,
    DEFAULT_MDP_EXPONENT,
};
use posmat::tilt::estimate_tail_probability;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Prefix of the environment variables that override flags.
pub const ENV_PREFIX: &str = "POSMAT_";

/// Exit status of a failed run.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn numeric<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numeric(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Which centering `variance` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceCentering {
    /// `nλ` with `λ` from the spectral pipeline.
    Spectral,
    SampleMean,
}

/// Every parameter of every subcommand; each field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    /// Horizon for `simulate`, `mdr`, `variance` and `tilt`.
    pub n: usize,
    /// Horizons for `berry-esseen` and `mdp`.
    pub n_ladder: Vec<usize>,
    pub replicates: usize,
    /// Standardized levels for `mdr` and `tilt`.
    pub ys: Vec<f64>,
    /// Starting direction; the uniform direction when absent.
    pub x0: Option<Vec<f64>>,
    /// Test direction; the uniform direction when absent (`e₁` for `regularity`).
    pub f: Option<Vec<f64>>,
    /// `x0` must satisfy `min_i x0_i ≥ k_delta`.
    pub k_delta: f64,
    pub resolution: usize,
    pub s_max: f64,
    pub s_points: usize,
    pub mdp_exponent: f64,
    pub mdp_y0: f64,
    /// `mdr` estimates `log |G_n x|` tails with the tilted sampler.
    pub tilted: bool,
    pub variance_center: VarianceCentering,
    pub burn_in: usize,
    pub samples: usize,
    pub stride: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub t_points: usize,
    pub law: LawRecipe,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: "out".into(),
            n: 256,
            n_ladder: vec![64, 128, 256, 512, 1024],
            replicates: 10_000,
            ys: vec![0.5, 1.0, 1.5, 2.0],
            x0: None,
            f: None,
            k_delta: DEFAULT_K_DELTA,
            resolution: DEFAULT_RESOLUTION,
            s_max: DEFAULT_S_MAX,
            s_points: DEFAULT_S_POINTS,
            mdp_exponent: DEFAULT_MDP_EXPONENT,
            mdp_y0: 1.0,
            tilted: false,
            variance_center: VarianceCentering::Spectral,
            burn_in: 200,
            samples: 10_000,
            stride: 1,
            t_min: 1e-4,
            t_max: 0.5,
            t_points: 20,
            law: LawRecipe::two_atom_ab(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text)
    }
}

/// Subcommands of the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Spectral,
    BerryEsseen,
    Mdr,
    Mdp,
    Variance,
    Regularity,
    Tilt,
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Spectral => "spectral",
            Command::BerryEsseen => "berry-esseen",
            Command::Mdr => "mdr",
            Command::Mdp => "mdp",
            Command::Variance => "variance",
            Command::Regularity => "regularity",
            Command::Tilt => "tilt",
            Command::Check => "check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub solver: f64,
    pub spectral_radius: f64,
    pub perron_frobenius: f64,
}

/// Written before any computation; contains no thread count or timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub law_hash: String,
    pub seed: u64,
    pub replicates: usize,
    pub resolution: usize,
    pub tolerances: Tolerances,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: Command, cfg: &ExperimentConfig, law: &MatrixLaw) -> Self {
        Manifest {
            tool: "posmat".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            law_hash: law.content_hash(),
            seed: cfg.seed,
            replicates: cfg.replicates,
            resolution: cfg.resolution,
            tolerances: Tolerances {
                solver: SOLVER_TOL,
                spectral_radius: SPEC_RAD_TOL,
                perron_frobenius: PF_DEFAULT_TOL,
            },
            config: cfg.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Files written by one run, manifest first.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// One-line human summary.
    pub summary: String,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    law: MatrixLaw,
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(numeric)?;
        s.push('\n');
        self.write(name, &s)
    }

    fn point(&self, v: &Option<Vec<f64>>, fallback: ProjPoint, what: &str) -> Result<ProjPoint> {
        let p = match v {
            Some(v) => ProjPoint::from_direction(v.clone()).map_err(|e| CliError::Config(format!("{what}: {e}")))?,
            None => fallback,
        };
        if p.dim() != self.law.dim() {
            return Err(CliError::Config(format!(
                "{what} has dimension {}, law has {}",
                p.dim(),
                self.law.dim()
            )));
        }
        Ok(p)
    }

    fn uniform(&self) -> ProjPoint {
        ProjPoint::uniform(self.law.dim()).expect("law dimension >= 2")
    }

    fn x0(&self) -> Result<ProjPoint> {
        let x0 = self.point(&self.cfg.x0, self.uniform(), "x0")?;
        if !x0.in_interior(self.cfg.k_delta) {
            return Err(CliError::Config(format!(
                "x0 min coordinate {} is below k_delta = {}",
                x0.min_coord(),
                self.cfg.k_delta
            )));
        }
        Ok(x0)
    }

    fn f(&self) -> Result<ProjPoint> {
        self.point(&self.cfg.f, self.uniform(), "f")
    }

    fn grid(&self) -> Result<ProjGrid> {
        build_grid(self.law.dim(), self.cfg.resolution).map_err(|e| CliError::Config(e.to_string()))
    }

    fn spectral(&self, grid: &ProjGrid) -> Result<(posmat::spectral::PressureCurve, CumulantSet)> {
        let s_grid = chebyshev_s_grid(self.cfg.s_max, self.cfg.s_points);
        let curve = pressure_curve(&self.law, &s_grid, grid, SOLVER_TOL).map_err(numeric)?;
        let cum = cumulants_from_pressure(&curve, self.cfg.s_max).map_err(numeric)?;
        Ok((curve, cum))
    }

    fn centering(&self) -> Result<(ProjGrid, CumulantSet, Centering)> {
        let grid = self.grid()?;
        let (_, cum) = self.spectral(&grid)?;
        let c = Centering::from_cumulants(&cum);
        Ok((grid, cum, c))
    }
}

/// Runs one subcommand: writes the manifest, then the artifacts, into `cfg.output_dir`.
pub fn run_experiment(command: Command, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let law = make_law(&cfg.law).map_err(|e| CliError::Config(format!("law: {e}")))?;
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut ctx = Ctx {
        cfg,
        law,
        dir,
        files: Vec::new(),
    };
    let manifest = Manifest::new(command, cfg, &ctx.law);
    ctx.write(MANIFEST_FILE, &manifest.to_json())?;
    let summary = match command {
        Command::Simulate => simulate(&mut ctx)?,
        Command::Spectral => spectral(&mut ctx)?,
        Command::BerryEsseen => berry_esseen(&mut ctx)?,
        Command::Mdr => mdr(&mut ctx)?,
        Command::Mdp => mdp(&mut ctx)?,
        Command::Variance => variance(&mut ctx)?,
        Command::Regularity => regularity(&mut ctx)?,
        Command::Tilt => tilt(&mut ctx)?,
        Command::Check => check(&mut ctx)?,
    };
    Ok(RunOutcome {
        files: ctx.files,
        summary,
    })
}

fn simulate(ctx: &mut Ctx) -> Result<String> {
    let sim = SimConfig::new(ctx.cfg.n, ctx.cfg.replicates, ctx.x0()?, ctx.f()?, ctx.cfg.seed);
    let out = run_batch(&ctx.law, &sim).map_err(|e| CliError::Config(e.to_string()))?;
    let d = ctx.law.dim();
    let mut csv = String::from("replicate,log_vec_norm,log_op_norm,log_entry,log_spec_rad");
    for i in 0..d {
        write!(csv, ",x_final_{i}").unwrap();
    }
    csv.push('\n');
    for (i, t) in &out.trajectories {
        write!(csv, "{i}").unwrap();
        for v in t.observables() {
            write!(csv, ",{v:?}").unwrap();
        }
        for v in t.x_final.coords() {
            write!(csv, ",{v:?}").unwrap();
        }
        csv.push('\n');
    }
    ctx.write("trajectories.csv", &csv)?;
    let summary = summarize(&out.trajectories);
    let failures: Vec<_> = out.failures.iter().map(|(i, e)| (*i, e.to_string())).collect();
    ctx.write_json(
        "summary.json",
        &serde_json::json!({
            "n": ctx.cfg.n,
            "observables": Observable::ALL.map(Observable::name),
            "summary": summary,
            "failures": failures,
        }),
    )?;
    let m = summary.moments[0];
    Ok(format!(
        "simulate: {} trajectories, mean log|G_n x|/n = {:.6}",
        out.trajectories.len(),
        m.mean / ctx.cfg.n as f64
    ))
}

fn spectral(ctx: &mut Ctx) -> Result<String> {
    let grid = ctx.grid()?;
    let (curve, cum) = ctx.spectral(&grid)?;
    ctx.write("pressure.csv", &curve.to_csv())?;
    let summary = SpectralSummary::new(&curve, cum);
    ctx.write_json("cumulants.json", &summary)?;
    Ok(format!(
        "spectral: lambda = {:.6}, sigma2 = {:.6}",
        summary.cumulants.lambda_lyap, summary.cumulants.sigma2
    ))
}

fn berry_esseen(ctx: &mut Ctx) -> Result<String> {
    let (_, _, centering) = ctx.centering()?;
    let be = BerryEsseenConfig {
        n_ladder: ctx.cfg.n_ladder.clone(),
        replicates: ctx.cfg.replicates,
        x0: ctx.x0()?,
        f: ctx.f()?,
        seed: ctx.cfg.seed,
    };
    let reports = berry_esseen_rate_fit(&ctx.law, &be, &Observable::ALL, centering).map_err(numeric)?;
    let mut csv = String::new();
    let mut fits = String::from("observable,c,beta\n");
    for (k, r) in reports.iter().enumerate() {
        let body = r.to_csv();
        // Keep one header row across observables.
        csv.push_str(if k == 0 { &body } else { body.split_once('\n').map_or("", |(_, b)| b) });
        writeln!(fits, "{},{:?},{:?}", r.observable.name(), r.c, r.beta).unwrap();
    }
    ctx.write("berry_esseen.csv", &csv)?;
    ctx.write("berry_esseen_fit.csv", &fits)?;
    Ok(format!(
        "berry-esseen: beta = {}",
        reports
            .iter()
            .map(|r| format!("{}:{:.3}", r.observable.name(), r.beta))
            .collect::<Vec<_>>()
            .join(" ")
    ))
}

fn mdr(ctx: &mut Ctx) -> Result<String> {
    let (grid, cum, _) = ctx.centering()?;
    let mc = MdrConfig {
        n: ctx.cfg.n,
        ys: ctx.cfg.ys.clone(),
        replicates: ctx.cfg.replicates,
        x0: ctx.x0()?,
        f: ctx.f()?,
        seed: ctx.cfg.seed,
    };
    let mode = if ctx.cfg.tilted {
        MdrMode::Tilted { grid: &grid }
    } else {
        MdrMode::Plain
    };
    let report = moderate_deviation_ratio(&ctx.law, &mc, &cum, mode).map_err(numeric)?;
    ctx.write("mdr.csv", &report.to_csv())?;
    let flagged = report.rows.iter().filter(|r| r.flagged).count();
    Ok(format!("mdr: {} rows, {flagged} flagged", report.rows.len()))
}

fn mdp(ctx: &mut Ctx) -> Result<String> {
    let (grid, cum, _) = ctx.centering()?;
    let mc = MdpConfig {
        exponent: ctx.cfg.mdp_exponent,
        y0: ctx.cfg.mdp_y0,
        n_ladder: ctx.cfg.n_ladder.clone(),
        replicates: ctx.cfg.replicates,
        x0: ctx.x0()?,
        seed: ctx.cfg.seed,
    };
    let report = mdp_rate_check(&ctx.law, &grid, &cum, &mc).map_err(numeric)?;
    ctx.write("mdp.csv", &report.to_csv())?;
    let last = report.rows.last().map_or(f64::NAN, |r| r.rate);
    Ok(format!("mdp: rate at largest n = {last:.4}, target {:.4}", report.target))
}

fn variance(ctx: &mut Ctx) -> Result<String> {
    let center = match ctx.cfg.variance_center {
        VarianceCentering::Spectral => VarianceCenter::Lyapunov(ctx.centering()?.1.lambda_lyap),
        VarianceCentering::SampleMean => VarianceCenter::SampleMean,
    };
    let sim = SimConfig::new(ctx.cfg.n, ctx.cfg.replicates, ctx.x0()?, ctx.f()?, ctx.cfg.seed);
    let triple = variance_triple(&ctx.law, &sim, center).map_err(numeric)?;
    ctx.write("variance.csv", &triple.to_csv())?;
    Ok(format!("variance: {:?}, max pairwise z = {:.3}", triple.values, triple.max_pairwise_z()))
}

fn regularity(ctx: &mut Ctx) -> Result<String> {
    let e1 = ProjPoint::basis(ctx.law.dim(), 0).expect("law dimension >= 2");
    let f = ctx.point(&ctx.cfg.f, e1, "f")?;
    let mut stream = rng::split(ctx.cfg.seed, 0);
    let samples = posmat::simulate::stationary_sample(
        &ctx.law,
        ctx.cfg.burn_in,
        ctx.cfg.samples,
        ctx.cfg.stride,
        &mut stream,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let t_grid = log_spaced(ctx.cfg.t_min, ctx.cfg.t_max, ctx.cfg.t_points);
    let report = regularity_exponent(&samples, &f, &t_grid).map_err(numeric)?;
    ctx.write("regularity.csv", &report.to_csv())?;
    Ok(format!("regularity: alpha = {:?}, gap = {:.6}", report.alpha_hat, report.gap))
}

fn tilt(ctx: &mut Ctx) -> Result<String> {
    let (grid, cum, _) = ctx.centering()?;
    let x0 = ctx.x0()?;
    let mut csv = String::from(
        "y,threshold,s_star,p,se,mean_weight,mean_weight_se,tilted_drift,tilted_drift_se,events,replicates\n",
    );
    for (k, &y) in ctx.cfg.ys.iter().enumerate() {
        let seed = rng::stage_seed(ctx.cfg.seed, k as u64);
        let e = estimate_tail_probability(&ctx.law, &grid, &cum, &x0, ctx.cfg.n, y, ctx.cfg.replicates, seed)
            .map_err(numeric)?;
        writeln!(
            csv,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            e.y,
            e.threshold,
            e.s_star,
            e.p,
            e.se,
            e.mean_weight,
            e.mean_weight_se,
            e.tilted_drift,
            e.tilted_drift_se,
            e.events,
            e.replicates
        )
        .unwrap();
    }
    ctx.write("tilt.csv", &csv)?;
    Ok(format!("tilt: {} levels", ctx.cfg.ys.len()))
}

fn check(ctx: &mut Ctx) -> Result<String> {
    let report = law_condition_report(&ctx.law);
    ctx.write_json("condition.json", &report)?;
    Ok(format!(
        "check: allowable = {}, arithmetic_warning = {}",
        report.all_atoms_allowable, report.arithmetic_warning
    ))
}
