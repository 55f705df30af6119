//! Pipeline configuration: a TOML file of `key = value` sections with
//! defaults for every field, plus a stable hash for provenance records.

use anyhow::Context;
use cardiotraj::optim::OptimConfig;
use cardiotraj::shooting::{IntegratorConfig, Scheme};
use cardiotraj::util::fnv1a64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub deformation: DeformationSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub ladder: LadderSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub atlas: AtlasSection,
    #[serde(default)]
    pub optim: OptimSections,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default = "d_sigma")]
    pub sigma: f64,
}

fn d_sigma() -> f64 {
    15.0
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection { sigma: d_sigma() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationSection {
    #[serde(default = "d_n_control_points")]
    pub n_control_points: usize,
    /// Absolute regularization weight; when absent it defaults to
    /// `alpha_scale` times the atlas diameter.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "d_alpha_scale")]
    pub alpha_scale: f64,
}

fn d_n_control_points() -> usize {
    60
}

fn d_alpha_scale() -> f64 {
    0.1
}

impl Default for DeformationSection {
    fn default() -> Self {
        DeformationSection {
            n_control_points: d_n_control_points(),
            alpha: None,
            alpha_scale: d_alpha_scale(),
        }
    }
}

impl DeformationSection {
    pub fn effective_alpha(&self, shape_diameter: f64) -> f64 {
        self.alpha.unwrap_or(self.alpha_scale * shape_diameter)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    /// `"rk4"` or `"euler"`.
    #[serde(default = "d_scheme")]
    pub scheme: String,
    #[serde(default = "d_n_steps")]
    pub n_steps: usize,
}

fn d_scheme() -> String {
    "rk4".into()
}

fn d_n_steps() -> usize {
    10
}

impl Default for IntegratorSection {
    fn default() -> Self {
        IntegratorSection {
            scheme: d_scheme(),
            n_steps: d_n_steps(),
        }
    }
}

impl IntegratorSection {
    pub fn to_config(&self) -> anyhow::Result<IntegratorConfig> {
        let scheme = match self.scheme.to_ascii_lowercase().as_str() {
            "rk4" => Scheme::Rk4,
            "euler" => Scheme::Euler,
            other => anyhow::bail!("unknown integrator scheme {other:?} (use rk4 or euler)"),
        };
        Ok(IntegratorConfig::new(self.n_steps, scheme)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    #[serde(default = "d_n_rungs")]
    pub n_rungs: usize,
    #[serde(default = "d_rung_scale")]
    pub rung_scale: f64,
    /// Regularization of the ladder's inner registrations; defaults to the
    /// effective alpha divided by 100.
    #[serde(default)]
    pub inner_alpha: Option<f64>,
}

fn d_n_rungs() -> usize {
    5
}

fn d_rung_scale() -> f64 {
    1.0
}

impl Default for LadderSection {
    fn default() -> Self {
        LadderSection {
            n_rungs: d_n_rungs(),
            rung_scale: d_rung_scale(),
            inner_alpha: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    #[serde(default = "d_ef_tolerance")]
    pub ef_tolerance: f64,
}

fn d_ef_tolerance() -> f64 {
    0.005
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            ef_tolerance: d_ef_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AtlasSection {
    #[serde(default = "d_outer_iters")]
    pub outer_iters: usize,
    /// Optional precomputed atlas mesh; estimation is skipped when given.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

fn d_outer_iters() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_initial_step")]
    pub initial_step: f64,
    #[serde(default = "d_backtrack")]
    pub backtrack: f64,
    #[serde(default = "d_cost_rel_tol")]
    pub cost_rel_tol: f64,
    #[serde(default = "d_grad_tol")]
    pub grad_tol: f64,
}

fn d_max_iters() -> usize {
    300
}

fn d_initial_step() -> f64 {
    1.0
}

fn d_backtrack() -> f64 {
    0.5
}

fn d_cost_rel_tol() -> f64 {
    1e-12
}

fn d_grad_tol() -> f64 {
    1e-9
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection::with_iters(d_max_iters())
    }
}

impl OptimSection {
    fn with_iters(max_iters: usize) -> Self {
        OptimSection {
            max_iters,
            initial_step: d_initial_step(),
            backtrack: d_backtrack(),
            cost_rel_tol: d_cost_rel_tol(),
            grad_tol: d_grad_tol(),
        }
    }

    pub fn to_config(&self) -> OptimConfig {
        OptimConfig {
            max_iters: self.max_iters,
            initial_step: self.initial_step,
            backtrack: self.backtrack,
            cost_rel_tol: self.cost_rel_tol,
            grad_tol: self.grad_tol,
            max_halvings: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSections {
    #[serde(default)]
    pub registration: OptimSection,
    #[serde(default = "d_optim_atlas")]
    pub atlas: OptimSection,
    #[serde(default = "d_optim_control_points")]
    pub control_points: OptimSection,
    #[serde(default = "d_optim_spline")]
    pub spline: OptimSection,
    #[serde(default)]
    pub ladder_inner: OptimSection,
}

fn d_optim_atlas() -> OptimSection {
    OptimSection::with_iters(200)
}

fn d_optim_control_points() -> OptimSection {
    OptimSection::with_iters(150)
}

fn d_optim_spline() -> OptimSection {
    OptimSection::with_iters(500)
}

impl Default for OptimSections {
    fn default() -> Self {
        OptimSections {
            registration: OptimSection::default(),
            atlas: d_optim_atlas(),
            control_points: d_optim_control_points(),
            spline: d_optim_spline(),
            ladder_inner: OptimSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "d_significance")]
    pub significance: f64,
    #[serde(default = "d_control_group")]
    pub control_group: String,
}

fn d_significance() -> f64 {
    0.05
}

fn d_control_group() -> String {
    "Control".into()
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            significance: d_significance(),
            control_group: d_control_group(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: Option<u64>,
    /// 0 uses the available parallelism.
    #[serde(default)]
    pub workers: usize,
}

// ---------------------------------------------------------------------------
// synthetic cohort section

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Frames per subject, end-diastole first, end-systole last.
    #[serde(default = "d_frames")]
    pub frames: usize,
    /// Latitudinal rings of the ventricle meshes.
    #[serde(default = "d_rings")]
    pub rings: usize,
    /// Longitudinal segments of the ventricle meshes.
    #[serde(default = "d_segments")]
    pub segments: usize,
    /// Base semi-axes of the half-ellipsoid (mm).
    #[serde(default = "d_semi_axes")]
    pub semi_axes: [f64; 3],
    /// Per-subject target ejection fraction range.
    #[serde(default = "d_ef_range")]
    pub ef_range: [f64; 2],
    /// Per-subject ED volume range, relative to the base shape volume.
    #[serde(default = "d_volume_range")]
    pub volume_range: [f64; 2],
    /// Relative jitter applied to each semi-axis per subject.
    #[serde(default = "d_shape_jitter")]
    pub shape_jitter: f64,
    /// Largest rigid misalignment: rotation angle (radians).
    #[serde(default = "d_pose_rotation")]
    pub pose_rotation: f64,
    /// Largest rigid misalignment: translation relative to shape size.
    #[serde(default = "d_pose_translation")]
    pub pose_translation: f64,
    /// Control points of the generator deformation.
    #[serde(default = "d_gen_control_points")]
    pub gen_control_points: usize,
    /// Tangential noise on generator momenta, relative to the radial field.
    #[serde(default = "d_momentum_jitter")]
    pub momentum_jitter: f64,
    /// Amplitude of the generator forces, relative to the radial field.
    #[serde(default = "d_force_amplitude")]
    pub force_amplitude: f64,
    #[serde(default = "d_groups")]
    pub groups: Vec<SynthGroup>,
}

fn d_frames() -> usize {
    4
}

fn d_rings() -> usize {
    6
}

fn d_segments() -> usize {
    10
}

fn d_semi_axes() -> [f64; 3] {
    [25.0, 20.0, 45.0]
}

fn d_ef_range() -> [f64; 2] {
    [0.35, 0.5]
}

fn d_volume_range() -> [f64; 2] {
    [0.5, 2.0]
}

fn d_shape_jitter() -> f64 {
    0.08
}

fn d_pose_rotation() -> f64 {
    0.25
}

fn d_pose_translation() -> f64 {
    0.15
}

fn d_gen_control_points() -> usize {
    8
}

fn d_momentum_jitter() -> f64 {
    0.15
}

fn d_force_amplitude() -> f64 {
    0.3
}

fn d_groups() -> Vec<SynthGroup> {
    vec![
        SynthGroup {
            name: "Control".into(),
            count: 12,
            momentum_offset: 0.0,
            planted_points: Vec::new(),
            force_scale: 1.0,
        },
        SynthGroup {
            name: "A".into(),
            count: 12,
            momentum_offset: 0.0,
            planted_points: Vec::new(),
            force_scale: 1.0,
        },
        SynthGroup {
            name: "B".into(),
            count: 12,
            momentum_offset: 0.6,
            planted_points: vec![0, 2, 5],
            force_scale: 1.4,
        },
    ]
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            frames: d_frames(),
            rings: d_rings(),
            segments: d_segments(),
            semi_axes: d_semi_axes(),
            ef_range: d_ef_range(),
            volume_range: d_volume_range(),
            shape_jitter: d_shape_jitter(),
            pose_rotation: d_pose_rotation(),
            pose_translation: d_pose_translation(),
            gen_control_points: d_gen_control_points(),
            momentum_jitter: d_momentum_jitter(),
            force_amplitude: d_force_amplitude(),
            groups: d_groups(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGroup {
    pub name: String,
    pub count: usize,
    /// Momentum offset added at the planted control points, relative to the
    /// radial field strength.
    #[serde(default)]
    pub momentum_offset: f64,
    /// Generator control points receiving the offset.
    #[serde(default)]
    pub planted_points: Vec<usize>,
    /// Multiplier on the generator force amplitude for this group.
    #[serde(default = "d_force_scale")]
    pub force_scale: f64,
}

fn d_force_scale() -> f64 {
    1.0
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.kernel.sigma > 0.0, "kernel.sigma must be positive");
        anyhow::ensure!(
            self.deformation.n_control_points >= 1,
            "deformation.n_control_points must be at least 1"
        );
        anyhow::ensure!(
            self.deformation.alpha.is_none_or(|a| a > 0.0) && self.deformation.alpha_scale > 0.0,
            "deformation.alpha must be positive"
        );
        anyhow::ensure!(
            self.integrator.n_steps >= 1,
            "integrator.n_steps must be at least 1"
        );
        self.integrator.to_config()?;
        anyhow::ensure!(self.ladder.n_rungs >= 1, "ladder.n_rungs must be at least 1");
        anyhow::ensure!(
            self.ladder.rung_scale > 0.0 && self.ladder.rung_scale <= 1.0,
            "ladder.rung_scale must lie in (0, 1]"
        );
        anyhow::ensure!(
            self.transport.ef_tolerance > 0.0,
            "transport.ef_tolerance must be positive"
        );
        anyhow::ensure!(
            self.stats.significance > 0.0 && self.stats.significance < 1.0,
            "stats.significance must lie in (0, 1)"
        );
        anyhow::ensure!(self.synth.frames >= 2, "synth.frames must be at least 2");
        anyhow::ensure!(
            self.synth.ef_range[0] > 0.0
                && self.synth.ef_range[0] <= self.synth.ef_range[1]
                && self.synth.ef_range[1] < 1.0,
            "synth.ef_range must satisfy 0 < lo <= hi < 1"
        );
        anyhow::ensure!(
            self.synth.volume_range[0] > 0.0
                && self.synth.volume_range[0] <= self.synth.volume_range[1],
            "synth.volume_range must be positive and ordered"
        );
        for optim in [
            &self.optim.registration,
            &self.optim.atlas,
            &self.optim.control_points,
            &self.optim.spline,
            &self.optim.ladder_inner,
        ] {
            optim.to_config().validate()?;
        }
        Ok(())
    }

    /// Seed actually used for a run: CLI override, then config, then 0.
    pub fn effective_seed(&self, cli_seed: Option<u64>) -> u64 {
        cli_seed.or(self.run.seed).unwrap_or(0)
    }

    /// Stable hash of the effective configuration (with the seed applied),
    /// recorded in provenance files.
    pub fn config_hash(&self, seed: u64) -> anyhow::Result<u64> {
        let mut effective = self.clone();
        effective.run.seed = Some(seed);
        let canonical = toml::to_string(&effective).context("serializing config for hashing")?;
        Ok(fnv1a64(canonical.as_bytes()))
    }
}
