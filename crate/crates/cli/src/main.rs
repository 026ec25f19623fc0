use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgo_core::dtn::{add_noise, NoiseModel, NoiseTarget};
use cgo_core::io::{export_slices, load_dtn, save_dtn, Plane, Volume};
use cgo_core::pipeline::{
    compute_forward, run_noise_sweep, run_reconstruction, EpsilonRule, ExperimentConfig, ForwardSolver, NoiseConfig,
    PhantomSource, SweepPlan, TruncationConfig,
};
use cgo_core::sphere::QuadratureGrid;
use cgo_core::CgoError;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Regularized CGO reconstruction for 3D electrical impedance tomography.
#[derive(Parser, Debug)]
#[command(name = "cgo", version)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the DtN map of the configured phantom.
    Forward {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Destination of the DtN matrix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb a stored DtN map and print the noise accounting as JSON.
    Noise {
        /// Clean DtN matrix.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Target noise level ‖ℰ‖_Y.
        #[arg(long, conflicts_with = "delta", required_unless_present = "delta")]
        epsilon: Option<f64>,
        /// Scale of the standardized perturbation.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Model::Iid)]
        model: Model,
    },
    /// Full pipeline: forward data, noise, scattering, inversion, conductivity.
    Reconstruct {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Reconstructions over noise levels, seeds, and truncation radii.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
        /// Truncation radii; empty uses the configured truncation.
        #[arg(long, value_delimiter = ',')]
        radii: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
    },
    /// Export planar slices of a stored volume as CSV and PNG.
    Slice {
        /// Volume file (`.vol`).
        #[arg(short, long)]
        input: PathBuf,
        /// Plane such as `x3=0` or `y=-0.6`; repeatable.
        #[arg(short, long = "plane", required = true)]
        planes: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
        /// File-name prefix; defaults to the input file stem.
        #[arg(long)]
        stem: Option<String>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Model {
    Iid,
    ElectrodeCorrelated,
}

impl From<Model> for NoiseModel {
    fn from(m: Model) -> Self {
        match m {
            Model::Iid => NoiseModel::Iid,
            Model::ElectrodeCorrelated => NoiseModel::ElectrodeCorrelated,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Solver {
    Auto,
    Analytic,
    Numerical,
}

/// Config file plus per-field overrides.
#[derive(Args, Debug)]
struct ExperimentArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Builtin phantom: heart-lungs, layered-ball, homogeneous.
    #[arg(long, conflicts_with = "phantom_file")]
    phantom: Option<String>,
    #[arg(long)]
    phantom_file: Option<PathBuf>,
    /// Ball radius for layered-ball.
    #[arg(long)]
    ball_radius: Option<f64>,
    /// Ball conductivity for layered-ball.
    #[arg(long)]
    ball_contrast: Option<f64>,
    /// Spherical-harmonic degree N.
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<Solver>,
    /// Mesh cells per unit length of the forward solver.
    #[arg(long)]
    forward_resolution: Option<usize>,
    /// Read the DtN map from a file instead of computing it.
    #[arg(long)]
    dtn: Option<PathBuf>,
    /// Truncation radius M.
    #[arg(long, conflicts_with_all = ["alpha", "epsilon_rule"])]
    radius: Option<f64>,
    /// α = 1/M.
    #[arg(long, conflicts_with = "epsilon_rule")]
    alpha: Option<f64>,
    /// Choose M from the realized noise level with exponent p.
    #[arg(long, value_name = "P")]
    epsilon_rule: Option<f64>,
    /// Lattice points per axis K.
    #[arg(long)]
    lattice: Option<usize>,
    #[arg(long, conflicts_with = "delta")]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mesh cells per unit length of the conductivity solve.
    #[arg(long)]
    sigma_resolution: Option<usize>,
    /// Faddeev table cache file.
    #[arg(long)]
    faddeev_cache: Option<PathBuf>,
    /// Slice plane for the exported images; repeatable.
    #[arg(long = "slice")]
    slices: Vec<String>,
    /// Output directory for artifacts and the manifest.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl ExperimentArgs {
    fn resolve(&self) -> cgo_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(name) = &self.phantom {
            cfg.phantom = PhantomSource { builtin: Some(name.clone()), file: None, radius: None, contrast: None };
        }
        if let Some(file) = &self.phantom_file {
            cfg.phantom = PhantomSource { builtin: None, file: Some(file.clone()), radius: None, contrast: None };
        }
        if self.ball_radius.is_some() {
            cfg.phantom.radius = self.ball_radius;
        }
        if self.ball_contrast.is_some() {
            cfg.phantom.contrast = self.ball_contrast;
        }
        if let Some(n) = self.degree {
            cfg.forward.degree = n;
        }
        if let Some(s) = self.solver {
            cfg.forward.solver = match s {
                Solver::Auto => ForwardSolver::Auto,
                Solver::Analytic => ForwardSolver::Analytic,
                Solver::Numerical => ForwardSolver::Numerical,
            };
        }
        if let Some(r) = self.forward_resolution {
            cfg.forward.resolution = r;
        }
        if self.dtn.is_some() {
            cfg.forward.dtn = self.dtn.clone();
        }
        let lattice = self.lattice.unwrap_or(cfg.truncation.lattice);
        if let Some(m) = self.radius {
            cfg.truncation = TruncationConfig::with_radius(m, lattice);
        } else if let Some(a) = self.alpha {
            cfg.truncation = TruncationConfig { radius: None, alpha: Some(a), epsilon_rule: None, lattice };
        } else if let Some(p) = self.epsilon_rule {
            let rule = EpsilonRule { p, ..cfg.truncation.epsilon_rule.unwrap_or_default() };
            cfg.truncation = TruncationConfig { radius: None, alpha: None, epsilon_rule: Some(rule), lattice };
        }
        cfg.truncation.lattice = lattice;
        if let Some(e) = self.epsilon {
            cfg.noise = NoiseConfig { epsilon: Some(e), delta: None, ..cfg.noise };
        }
        if let Some(d) = self.delta {
            cfg.noise = NoiseConfig { epsilon: None, delta: Some(d), ..cfg.noise };
        }
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
        }
        if let Some(r) = self.sigma_resolution {
            cfg.sigma.resolution = r;
        }
        if self.faddeev_cache.is_some() {
            cfg.faddeev.cache = self.faddeev_cache.clone();
        }
        if !self.slices.is_empty() {
            cfg.slices = self.slices.clone();
        }
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &CgoError) -> u8 {
    if e.is_parameter_error() {
        2
    } else if matches!(e.root(), CgoError::Numerical(_)) {
        3
    } else {
        1
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> cgo_core::Result<()> {
    match cli.command {
        Command::Forward { exp, out } => {
            let cfg = exp.resolve()?;
            let prep = compute_forward(&cfg)?;
            save_dtn(&prep.dtn, &out)?;
            log::info!("forward map ({}) in {:.2}s", prep.summary.source, prep.seconds);
            print_json(&prep.summary);
        }
        Command::Noise { input, out, epsilon, delta, seed, model } => {
            let q = load_dtn(&input)?;
            let grid = QuadratureGrid::new(q.degree)?;
            let target = match (epsilon, delta) {
                (Some(e), _) => NoiseTarget::Epsilon(e),
                (None, Some(d)) => NoiseTarget::Delta(d),
                (None, None) => unreachable!("clap requires one of --epsilon, --delta"),
            };
            let r = add_noise(&q, target, seed, model.into(), &grid)?;
            save_dtn(&r.noisy, &out)?;
            let snr = if r.snr.is_finite() { serde_json::json!(r.snr) } else { serde_json::Value::Null };
            print_json(&serde_json::json!({
                "seed": seed,
                "model": NoiseModel::from(model),
                "delta": r.delta,
                "epsilon": r.epsilon,
                "snr": snr,
                "relative_noise": r.relative_noise,
            }));
        }
        Command::Reconstruct { exp } => {
            let cfg = exp.resolve()?;
            let run = run_reconstruction(&cfg)?;
            if let Some(d) = &cfg.output {
                log::info!("artifacts in {}", d.display());
            }
            print_json(&run.manifest.metrics);
        }
        Command::Sweep { exp, epsilons, radii, seeds } => {
            let cfg = exp.resolve()?;
            let report = run_noise_sweep(&cfg, &SweepPlan { epsilons, radii, seeds })?;
            print!("{}", report.to_csv());
        }
        Command::Slice { input, planes, out, stem } => {
            let volume = Volume::load(&input)?;
            let planes = planes.iter().map(|p| p.parse::<Plane>()).collect::<cgo_core::Result<Vec<_>>>()?;
            let stem = stem.unwrap_or_else(|| file_stem(&input));
            for path in export_slices(&volume, &planes, &out, &stem)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
