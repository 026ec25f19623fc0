//! End-to-end reconstruction runs: configuration, forward data, noise,
//! scattering sweep, FFT inversion, conductivity solve, metrics, and the run
//! manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cgo::{zeta_magnitude, FloorConstants, ZetaRule};
use crate::dtn::{add_noise, DtnKind, DtnMatrix, NoiseModel, NoiseRealization, NoiseTarget};
use crate::error::{CgoError, Result};
use crate::faddeev::FaddeevTable;
use crate::forward::{layered_ball_dtn, numerical_dtn, ForwardOptions};
use crate::io::{export_slices, load_dtn, save_dtn, Plane, Volume};
use crate::mesh::BallGrid;
use crate::phantom::Phantom;
use crate::scattering::{invert_to_potential, scattering_transform, x_extent, ScatterDiagnostics, ScatteringGrid, VolumeGrid};
use crate::sigma::{alpha_rule, solve_sigma, SigmaDiagnostics, SigmaField, SigmaOptions};
use crate::sphere::QuadratureGrid;

/// Serde helper: non-finite floats as `null`, read back as `+∞`.
mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSource {
    /// `heart-lungs`, `layered-ball`, or `homogeneous`.
    pub builtin: Option<String>,
    /// Phantom TOML file.
    pub file: Option<PathBuf>,
    /// Ball radius and conductivity, for `layered-ball` only.
    pub radius: Option<f64>,
    pub contrast: Option<f64>,
}

impl Default for PhantomSource {
    fn default() -> Self {
        Self {
            builtin: Some("heart-lungs".into()),
            file: None,
            radius: None,
            contrast: None,
        }
    }
}

impl PhantomSource {
    pub fn layered(radius: f64, contrast: f64) -> Self {
        Self {
            builtin: Some("layered-ball".into()),
            file: None,
            radius: Some(radius),
            contrast: Some(contrast),
        }
    }

    pub fn resolve(&self) -> Result<Phantom> {
        match (&self.builtin, &self.file) {
            (Some(_), Some(_)) => Err(CgoError::param("give either a builtin phantom or a phantom file, not both")),
            (None, None) => Err(CgoError::param("no phantom given")),
            (None, Some(path)) => {
                if self.radius.is_some() || self.contrast.is_some() {
                    return Err(CgoError::param("radius/contrast apply to the layered-ball builtin only"));
                }
                Phantom::load(path)
            }
            (Some(name), None) => {
                let layered = matches!(name.as_str(), "layered-ball" | "layered_ball");
                if !layered && (self.radius.is_some() || self.contrast.is_some()) {
                    return Err(CgoError::param("radius/contrast apply to the layered-ball builtin only"));
                }
                if layered {
                    return Phantom::centered_ball(self.radius.unwrap_or(0.5), self.contrast.unwrap_or(2.0));
                }
                Phantom::builtin(name).ok_or_else(|| {
                    CgoError::param(format!("unknown builtin phantom `{name}`; try heart-lungs, layered-ball, homogeneous"))
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardSolver {
    /// Closed form for a centred ball, mesh solver otherwise.
    #[default]
    Auto,
    Analytic,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    /// Spherical-harmonic degree `N`.
    pub degree: usize,
    pub solver: ForwardSolver,
    pub resolution: usize,
    pub tolerance: f64,
    /// Load the DtN map from this file instead of computing it.
    pub dtn: Option<PathBuf>,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            degree: 8,
            solver: ForwardSolver::Auto,
            resolution: 24,
            tolerance: 1e-10,
            dtn: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonRule {
    pub p: f64,
    pub epsilon0: f64,
}

impl Default for EpsilonRule {
    fn default() -> Self {
        Self { p: 1.5, epsilon0: 1e-3 }
    }
}

fn default_lattice() -> usize {
    9
}

/// A missing `[truncation]` section means `M = 6`; a present one must name
/// its own choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    /// Truncation radius `M`.
    #[serde(default)]
    pub radius: Option<f64>,
    /// `α = 1/M`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// `M = 1/α(ε)` from the realized noise level.
    #[serde(default)]
    pub epsilon_rule: Option<EpsilonRule>,
    /// Lattice points per axis, `K`.
    #[serde(default = "default_lattice")]
    pub lattice: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            radius: Some(6.0),
            alpha: None,
            epsilon_rule: None,
            lattice: default_lattice(),
        }
    }
}

impl TruncationConfig {
    pub fn with_radius(radius: f64, lattice: usize) -> Self {
        Self {
            radius: Some(radius),
            alpha: None,
            epsilon_rule: None,
            lattice,
        }
    }

    fn check(&self) -> Result<()> {
        let given = self.radius.is_some() as u8 + self.alpha.is_some() as u8 + self.epsilon_rule.is_some() as u8;
        if given != 1 {
            return Err(CgoError::param(
                "exactly one of truncation.radius, truncation.alpha, truncation.epsilon_rule must be set",
            ));
        }
        if self.lattice < 2 {
            return Err(CgoError::param(format!("lattice size K must be at least 2, got {}", self.lattice)));
        }
        Ok(())
    }

    /// `M` given the realized noise level.
    pub fn radius_for(&self, epsilon: f64) -> Result<f64> {
        self.check()?;
        let m = if let Some(m) = self.radius {
            m
        } else if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(CgoError::param(format!("alpha must be positive, got {a}")));
            }
            1.0 / a
        } else {
            let rule = self.epsilon_rule.unwrap_or_default();
            if !(epsilon > 0.0) {
                return Err(CgoError::param("the epsilon rule needs a positive noise level"));
            }
            1.0 / alpha_rule(epsilon, rule.p, rule.epsilon0)?
        };
        if !(m > 0.0) || !m.is_finite() {
            return Err(CgoError::param(format!("truncation radius must be positive, got {m}")));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Target `‖ℰ‖_Y`.
    pub epsilon: Option<f64>,
    /// Fixed scale of the standardized perturbation.
    pub delta: Option<f64>,
    pub seed: u64,
    pub model: NoiseModel,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            delta: None,
            seed: 0,
            model: NoiseModel::Iid,
        }
    }
}

impl NoiseConfig {
    pub fn epsilon(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon: Some(epsilon),
            seed,
            ..Default::default()
        }
    }

    pub fn target(&self) -> Result<Option<NoiseTarget>> {
        match (self.epsilon, self.delta) {
            (Some(_), Some(_)) => Err(CgoError::param("give noise.epsilon or noise.delta, not both")),
            (Some(e), None) => Ok(Some(NoiseTarget::Epsilon(e))),
            (None, Some(d)) => Ok(Some(NoiseTarget::Delta(d))),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaConfig {
    pub resolution: usize,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        Self { resolution: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constants {
    pub c2: f64,
    pub c4: f64,
    /// Exponent in the boundary-side floor `r_1(α)`.
    pub p: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { c2: 1.0, c4: 1.0, p: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaddeevConfig {
    pub cache: Option<PathBuf>,
    pub spacing: f64,
}

impl Default for FaddeevConfig {
    fn default() -> Self {
        Self { cache: None, spacing: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomSource,
    pub forward: ForwardConfig,
    pub truncation: TruncationConfig,
    pub zeta: ZetaRule,
    pub noise: NoiseConfig,
    pub sigma: SigmaConfig,
    pub constants: Constants,
    pub faddeev: FaddeevConfig,
    /// Slice planes exported with each run, such as `x3=0`.
    pub slices: Vec<String>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSource::default(),
            forward: ForwardConfig::default(),
            truncation: TruncationConfig::default(),
            zeta: ZetaRule::PerXi { floor: 1.0 },
            noise: NoiseConfig::default(),
            sigma: SigmaConfig::default(),
            constants: Constants::default(),
            faddeev: FaddeevConfig::default(),
            slices: vec!["x3=0".into()],
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CgoError::Format {
            what: "config file",
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CgoError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.resolve()?;
        if self.forward.degree == 0 {
            return Err(CgoError::param("degree N must be at least 1"));
        }
        self.truncation.check()?;
        self.noise.target()?;
        if self.sigma.resolution < 2 {
            return Err(CgoError::param("sigma.resolution must be at least 2"));
        }
        if !(self.constants.c2 > 0.0 && self.constants.c4 > 0.0 && self.constants.p > 0.0) {
            return Err(CgoError::param("constants c2, c4, p must be positive"));
        }
        if !(self.faddeev.spacing > 0.0) {
            return Err(CgoError::param("faddeev.spacing must be positive"));
        }
        self.planes()?;
        Ok(())
    }

    pub fn planes(&self) -> Result<Vec<Plane>> {
        self.slices.iter().map(|s| s.parse()).collect()
    }

    fn floor(&self) -> FloorConstants {
        FloorConstants {
            c2: self.constants.c2,
            p: self.constants.p,
        }
    }

    fn sigma_options(&self) -> SigmaOptions {
        SigmaOptions {
            resolution: self.sigma.resolution,
            c4: self.constants.c4,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSummary {
    /// `analytic`, `numerical`, or `file`.
    pub source: String,
    pub degree: usize,
    pub unknowns: Option<usize>,
    pub max_iterations: Option<usize>,
    pub max_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub seed: u64,
    pub model: NoiseModel,
    pub delta: f64,
    pub epsilon: f64,
    #[serde(with = "finite_or_null")]
    pub snr: f64,
    pub relative_noise: f64,
}

impl NoiseSummary {
    fn of(r: &NoiseRealization, cfg: &NoiseConfig) -> Self {
        Self {
            seed: cfg.seed,
            model: cfg.model,
            delta: r.delta,
            epsilon: r.epsilon,
            snr: r.snr,
            relative_noise: r.relative_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub radius: f64,
    pub alpha: f64,
    pub lattice: usize,
    pub x_max: f64,
    /// Largest `|ζ|` used.
    pub zeta_max: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub table_kappa_max: f64,
    /// `M(ε)` of the parameter rule with default constants, when `ε > 0`.
    pub theory_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `‖γ - γ_true‖ / ‖γ_true‖` over the interior mesh nodes.
    pub relative_l2: f64,
    /// `max |γ - γ_true| / max |γ_true|`.
    pub relative_linf: f64,
    /// Relative L² error of the constant guess `γ ≡ 1`.
    pub baseline_l2: f64,
    /// `γ = 1` at every mesh node that is not an unknown.
    pub boundary_exact: bool,
    pub imaginary_ratio: f64,
    pub floor_active_points: usize,
    pub sigma_floor_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub forward: Option<ForwardSummary>,
    pub noise: Option<NoiseSummary>,
    pub derived: Option<Derived>,
    pub scattering: Option<ScatterDiagnostics>,
    pub sigma: Option<SigmaDiagnostics>,
    pub metrics: Option<Metrics>,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
    pub error: Option<String>,
}

impl Manifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            forward: None,
            noise: None,
            derived: None,
            scattering: None,
            sigma: None,
            metrics: None,
            timings: BTreeMap::new(),
            artifacts: Vec::new(),
            error: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CgoError::Format {
            what: "manifest",
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CgoError::io(path, e))?;
        Self::from_json(&text)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.to_json()).map_err(|e| CgoError::io(&path, e))
    }
}

/// Forward data shared by every reconstruction of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: QuadratureGrid,
    pub phantom: Phantom,
    pub dtn: DtnMatrix,
    pub summary: ForwardSummary,
    pub seconds: f64,
}

pub fn compute_forward(cfg: &ExperimentConfig) -> Result<Prepared> {
    let start = Instant::now();
    let phantom = cfg.phantom.resolve()?;
    let grid = QuadratureGrid::new(cfg.forward.degree)?;
    let (dtn, summary) = if let Some(path) = &cfg.forward.dtn {
        let q = load_dtn(path)?;
        if q.degree != cfg.forward.degree || q.kind != DtnKind::Map {
            return Err(CgoError::param(format!(
                "{} holds a degree-{} {:?} matrix; expected a degree-{} map",
                path.display(),
                q.degree,
                q.kind,
                cfg.forward.degree
            )));
        }
        (q, ForwardSummary { source: "file".into(), degree: cfg.forward.degree, unknowns: None, max_iterations: None, max_residual: None })
    } else {
        let ball = phantom.as_centered_ball();
        let analytic = match cfg.forward.solver {
            ForwardSolver::Auto => ball.is_some() || phantom.inclusions.is_empty(),
            ForwardSolver::Analytic => {
                if ball.is_none() && !phantom.inclusions.is_empty() {
                    return Err(CgoError::param("the analytic forward map needs a single centred ball"));
                }
                true
            }
            ForwardSolver::Numerical => false,
        };
        if analytic {
            let (r0, c) = ball.unwrap_or((0.5, 1.0));
            let q = layered_ball_dtn(r0, c, &grid)?;
            (q, ForwardSummary { source: "analytic".into(), degree: cfg.forward.degree, unknowns: None, max_iterations: None, max_residual: None })
        } else {
            let opts = ForwardOptions {
                resolution: cfg.forward.resolution,
                tolerance: cfg.forward.tolerance,
                ..Default::default()
            };
            let (q, rep) = numerical_dtn(&phantom, &grid, &opts)?;
            (
                q,
                ForwardSummary {
                    source: "numerical".into(),
                    degree: cfg.forward.degree,
                    unknowns: Some(rep.unknowns),
                    max_iterations: Some(rep.max_iterations),
                    max_residual: Some(rep.max_residual),
                },
            )
        }
    };
    Ok(Prepared {
        grid,
        phantom,
        dtn,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Noisy data for a noise configuration; `None` target gives the clean map
/// with zero noise accounting.
pub fn apply_noise(prep: &Prepared, noise: &NoiseConfig) -> Result<NoiseRealization> {
    let target = noise.target()?.unwrap_or(NoiseTarget::Delta(0.0));
    add_noise(&prep.dtn, target, noise.seed, noise.model, &prep.grid)
}

/// Faddeev table covering every `|ζ|` used up to radius `m`.
pub fn table_for(cfg: &ExperimentConfig, m: f64) -> Result<FaddeevTable> {
    let kappa = zeta_magnitude(m, &cfg.zeta)? / 2f64.sqrt();
    let kappa = (kappa * 1.0001).max(0.5);
    match &cfg.faddeev.cache {
        Some(path) => FaddeevTable::load_or_build(path, kappa, cfg.faddeev.spacing),
        None => FaddeevTable::build(kappa, cfg.faddeev.spacing),
    }
}

/// Result of one reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub noise: NoiseSummary,
    pub noisy: DtnMatrix,
    pub derived: Derived,
    pub t: ScatteringGrid,
    pub scatter: ScatterDiagnostics,
    pub q: VolumeGrid,
    pub sigma: SigmaField,
    pub metrics: Metrics,
    pub timings: BTreeMap<String, f64>,
}

/// Error metrics of `γ` against the phantom on the mesh.
pub fn conductivity_metrics(field: &SigmaField, phantom: &Phantom) -> Metrics {
    let truth = phantom.evaluate(&field.grid.points());
    let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = field.gamma.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let base = truth.iter().map(|b| (1.0 - b) * (1.0 - b)).sum::<f64>().sqrt();
    let max_true = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_err = field.gamma.iter().zip(&truth).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let lattice = field.gamma_lattice();
    let g = &field.grid;
    let side = g.side();
    let mut boundary_exact = true;
    for a in 0..side {
        for b in 0..side {
            for c in 0..side {
                if g.interior_index([a, b, c]).is_none() && lattice[g.cube_index([a, b, c])] != 1.0 {
                    boundary_exact = false;
                }
            }
        }
    }
    Metrics {
        relative_l2: err / norm,
        relative_linf: max_err / max_true,
        baseline_l2: base / norm,
        boundary_exact,
        imaginary_ratio: field.diagnostics.imaginary_ratio,
        floor_active_points: 0,
        sigma_floor_active: field.diagnostics.floor_active,
    }
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    timings.insert(stage.into(), start.elapsed().as_secs_f64());
    out
}

/// Noise, scattering, inversion, and conductivity for prepared forward data.
/// A supplied table must cover the `|ζ|` range of the resolved radius.
pub fn reconstruct(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    table: Option<&FaddeevTable>,
) -> Result<Reconstruction> {
    let mut timings = BTreeMap::new();
    let realization = timed(&mut timings, "noise", || apply_noise(prep, &cfg.noise))?;
    let noise = NoiseSummary::of(&realization, &cfg.noise);
    let m = cfg.truncation.radius_for(noise.epsilon).map_err(|e| e.in_stage("truncation"))?;
    let k = cfg.truncation.lattice;
    let owned;
    let table = match table {
        Some(t) => t,
        None => {
            owned = timed(&mut timings, "faddeev", || table_for(cfg, m))?;
            &owned
        }
    };
    let alpha = 1.0 / m;
    let opts = cfg.sigma_options();
    let theory_radius = if noise.epsilon > 0.0 && noise.epsilon < 1.0 {
        let rule = cfg.truncation.epsilon_rule.unwrap_or_default();
        Some((-noise.epsilon.ln() / 11.0).powf(1.0 / rule.p))
    } else {
        None
    };
    let derived = Derived {
        radius: m,
        alpha,
        lattice: k,
        x_max: x_extent(m, k),
        zeta_max: zeta_magnitude(m, &cfg.zeta).map_err(|e| e.in_stage("truncation"))?,
        kappa1: cfg.floor().kappa1(alpha),
        kappa2: opts.kappa2(),
        table_kappa_max: table.kappa_max(),
        theory_radius,
    };
    if derived.x_max < 1.0 {
        return Err(CgoError::param(format!(
            "x_max = {:.4} < 1 for M = {m}, K = {k}: the x-lattice does not cover the unit ball; increase K",
            derived.x_max
        ))
        .in_stage("truncation"));
    }
    let (t, scatter) = timed(&mut timings, "scattering", || {
        scattering_transform(&realization.noisy, m, k, cfg.zeta, &prep.grid, table, derived.kappa1)
    })?;
    let q = timed(&mut timings, "inversion", || invert_to_potential(&t))?;
    let sigma = timed(&mut timings, "sigma", || solve_sigma(&q, &opts))?;
    let mut metrics = conductivity_metrics(&sigma, &prep.phantom);
    metrics.floor_active_points = scatter.floor_active_points;
    Ok(Reconstruction {
        noise,
        noisy: realization.noisy,
        derived,
        t,
        scatter,
        q,
        sigma,
        metrics,
        timings,
    })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub prepared: Prepared,
    pub reconstruction: Reconstruction,
    pub manifest: Manifest,
}

fn record(manifest: &mut Manifest, dir: Option<&Path>, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = dir {
        let path = dir.join(name);
        write(&path)?;
        manifest.artifacts.push(path);
    }
    Ok(())
}

/// Full pipeline. With an output directory, artifacts are written as soon as
/// their stage finishes and the manifest is written even when a stage fails.
pub fn run_reconstruction(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = cfg.output.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| CgoError::io(d, e))?;
    }
    let mut manifest = Manifest::new(cfg);
    let result = run_into(cfg, dir.as_deref(), &mut manifest);
    if let Err(e) = &result {
        manifest.error = Some(e.to_string());
    }
    if let Some(d) = &dir {
        manifest.save(d)?;
    }
    let (prepared, reconstruction) = result?;
    Ok(RunOutput {
        prepared,
        reconstruction,
        manifest,
    })
}

fn run_into(cfg: &ExperimentConfig, dir: Option<&Path>, manifest: &mut Manifest) -> Result<(Prepared, Reconstruction)> {
    let prep = compute_forward(cfg).map_err(|e| e.in_stage("forward"))?;
    manifest.timings.insert("forward".into(), prep.seconds);
    manifest.forward = Some(prep.summary.clone());
    record(manifest, dir, "dtn.bin", |p| save_dtn(&prep.dtn, p))?;
    record(manifest, dir, "phantom.toml", |p| {
        std::fs::write(p, prep.phantom.to_toml_string()).map_err(|e| CgoError::io(p, e))
    })?;

    let rec = reconstruct(&prep, cfg, None)?;
    manifest.timings.extend(rec.timings.clone());
    manifest.noise = Some(rec.noise.clone());
    manifest.derived = Some(rec.derived.clone());
    manifest.scattering = Some(rec.scatter.clone());
    manifest.sigma = Some(rec.sigma.diagnostics.clone());
    manifest.metrics = Some(rec.metrics.clone());
    if rec.noise.delta > 0.0 {
        record(manifest, dir, "noisy_dtn.bin", |p| save_dtn(&rec.noisy, p))?;
    }
    record(manifest, dir, "t.vol", |p| Volume::from_scattering(&rec.t).save(p))?;
    record(manifest, dir, "q.vol", |p| Volume::from_potential(&rec.q).save(p))?;
    let gamma = Volume::from_conductivity(&rec.sigma);
    record(manifest, dir, "gamma.vol", |p| gamma.save(p))?;
    let truth = phantom_volume(&prep.phantom, &rec.sigma.grid);
    record(manifest, dir, "phantom.vol", |p| truth.save(p))?;
    if let Some(d) = dir {
        let planes = cfg.planes()?;
        let slices = d.join("slices");
        manifest.artifacts.extend(export_slices(&gamma, &planes, &slices, "gamma")?);
        manifest.artifacts.extend(export_slices(&truth, &planes, &slices, "phantom")?);
    }
    Ok((prep, rec))
}

/// Phantom conductivity on the full mesh lattice.
pub fn phantom_volume(phantom: &Phantom, grid: &BallGrid) -> Volume {
    let side = grid.side();
    let h = grid.spacing();
    let mut values = Vec::with_capacity(side * side * side);
    for a in 0..side {
        for b in 0..side {
            for c in 0..side {
                values.push(phantom.conductivity(grid.lattice_point([a, b, c])));
            }
        }
    }
    Volume {
        dims: [side; 3],
        spacing: [h; 3],
        origin: [-1.0; 3],
        data: crate::io::VolumeData::Real(values),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon_target: f64,
    pub seed: u64,
    pub radius: f64,
    pub epsilon: f64,
    #[serde(with = "finite_or_null")]
    pub snr: f64,
    pub relative_noise: f64,
    pub theory_radius: Option<f64>,
    pub relative_l2: f64,
    pub relative_linf: f64,
    pub baseline_l2: f64,
    pub floor_active_points: usize,
    pub sigma_floor_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Error-minimizing row per `(ε, seed)`.
    pub best: Vec<SweepRow>,
}

impl SweepReport {
    pub fn best_for(&self, epsilon: f64, seed: u64) -> Option<&SweepRow> {
        self.best.iter().find(|r| r.epsilon_target == epsilon && r.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epsilon_target,seed,radius,epsilon,snr,relative_noise,theory_radius,relative_l2,relative_linf,baseline_l2,floor_active_points,sigma_floor_active\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epsilon_target,
                r.seed,
                r.radius,
                r.epsilon,
                r.snr,
                r.relative_noise,
                r.theory_radius.map_or(String::new(), |v| v.to_string()),
                r.relative_l2,
                r.relative_linf,
                r.baseline_l2,
                r.floor_active_points,
                r.sigma_floor_active
            ));
        }
        out
    }
}

/// What a sweep varies. An empty `radii` list uses the configured truncation
/// for every entry (a fixed radius, `α`, or the `ε` rule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub epsilons: Vec<f64>,
    pub radii: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One reconstruction per `(ε, seed, M)` on shared forward data.
pub fn run_noise_sweep(cfg: &ExperimentConfig, plan: &SweepPlan) -> Result<SweepReport> {
    cfg.validate()?;
    if plan.epsilons.is_empty() || plan.seeds.is_empty() {
        return Err(CgoError::param("a sweep needs at least one noise level and one seed"));
    }
    if plan.epsilons.iter().any(|e| !(*e >= 0.0)) {
        return Err(CgoError::param("noise levels must be non-negative"));
    }
    let prep = compute_forward(cfg).map_err(|e| e.in_stage("forward"))?;
    let mut table: Option<FaddeevTable> = None;
    let mut rows = Vec::new();
    let mut best: Vec<SweepRow> = Vec::new();
    for &eps in &plan.epsilons {
        for &seed in &plan.seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.noise = NoiseConfig {
                epsilon: Some(eps),
                delta: None,
                seed,
                model: cfg.noise.model,
            };
            let truncations: Vec<TruncationConfig> = if plan.radii.is_empty() {
                vec![cfg.truncation.clone()]
            } else {
                plan.radii.iter().map(|m| TruncationConfig::with_radius(*m, cfg.truncation.lattice)).collect()
            };
            let mut best_here: Option<SweepRow> = None;
            for tr in truncations {
                run_cfg.truncation = tr;
                // realized ε equals the target up to rounding, so resolve M from the target
                let m = run_cfg.truncation.radius_for(eps)?;
                let need = zeta_magnitude(m, &run_cfg.zeta)? / 2f64.sqrt();
                if table.as_ref().is_none_or(|t| t.kappa_max() < need) {
                    table = Some(table_for(&run_cfg, m)?);
                }
                let rec = reconstruct(&prep, &run_cfg, table.as_ref())?;
                log::info!(
                    "sweep ε = {eps:e}, seed {seed}, M = {:.4}: relative L² error {:.4}",
                    rec.derived.radius,
                    rec.metrics.relative_l2
                );
                let row = SweepRow {
                    epsilon_target: eps,
                    seed,
                    radius: rec.derived.radius,
                    epsilon: rec.noise.epsilon,
                    snr: rec.noise.snr,
                    relative_noise: rec.noise.relative_noise,
                    theory_radius: rec.derived.theory_radius,
                    relative_l2: rec.metrics.relative_l2,
                    relative_linf: rec.metrics.relative_linf,
                    baseline_l2: rec.metrics.baseline_l2,
                    floor_active_points: rec.metrics.floor_active_points,
                    sigma_floor_active: rec.metrics.sigma_floor_active,
                };
                if best_here.as_ref().is_none_or(|b| row.relative_l2 < b.relative_l2) {
                    best_here = Some(row.clone());
                }
                rows.push(row);
            }
            best.extend(best_here);
        }
    }
    let report = SweepReport { rows, best };
    if let Some(d) = &cfg.output {
        std::fs::create_dir_all(d).map_err(|e| CgoError::io(d, e))?;
        let csv = d.join("sweep.csv");
        std::fs::write(&csv, report.to_csv()).map_err(|e| CgoError::io(&csv, e))?;
        let json = d.join("sweep.json");
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&json, text).map_err(|e| CgoError::io(&json, e))?;
    }
    Ok(report)
}
