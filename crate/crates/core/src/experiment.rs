//! Config-driven experiment pipeline: train, diagnose, recover time,
//! validate against oracles and write every artifact to a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{FreeEnergySpec, InternalEnergySpec, KernelSpec, PotentialSpec};
use crate::error::{Error, Result};
use crate::flow::{Activation, BaseDistribution, CouplingKind, FlowArch, FlowModel, PathBatch};
use crate::losses::{
    physical_time_loss_per_segment, GeometricConfig, ParametrizationPenalty, PhysicalTimeConfig,
};
use crate::oracles::{
    euler_maruyama_1d, fit_annulus, fitted_gaussian, gaussian_w2, ou_exact, steady_state_check, w1_1d,
    w2_nearest_time, EulerMaruyamaConfig, GaussianState, SteadyStateSpec,
};
use crate::tensor::Mat;
use crate::timeline::{export_mesh, recover_time, RecoveredTimeline};
use crate::trainer::{loss_csv, train, TrainConfig, TrainMode};
use crate::velocity::{diagnose, diagnostics_csv, fmt17, path_velocities, PathDiagnostics};

pub const CONFIG_VERSION: u32 = 1;

pub const PRESETS: &[&str] = &[
    "ou2d-isotropic",
    "ou2d-anisotropic",
    "ou10d-block",
    "styblinski10d",
    "aggregation",
    "aggregation-drift",
    "aggregation-diffusion",
    "zero-energy",
    "styblinski4d",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Particles in the evaluation batch.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
    /// Particles per layer written to the scatter file.
    #[serde(default = "default_scatter")]
    pub scatter: usize,
    /// Points per axis of the density grids (d ≤ 2).
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_eval_samples() -> usize {
    5000
}

fn default_eval_seed() -> u64 {
    12345
}

fn default_scatter() -> usize {
    500
}

fn default_grid() -> usize {
    64
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            samples: default_eval_samples(),
            seed: default_eval_seed(),
            scatter: default_scatter(),
            grid: default_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareMeshesConfig {
    /// Training iterations of each physical-time run (defaults to `train.epochs`).
    #[serde(default)]
    pub epochs: Option<usize>,
}

/// Oracle checks run after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Validation {
    /// Fitted terminal mean within `mean_tol` (Euclidean) and covariance within
    /// `covariance_tol` (Frobenius).
    TerminalGaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
        mean_tol: f64,
        covariance_tol: f64,
    },
    /// Mean of the defined cosine alignments is at least `min_mean`.
    CosineAlignment { min_mean: f64 },
    /// Coefficient of variation of the segment lengths.
    SegmentUniformity { max_cv: f64 },
    /// Layer times against the W2-nearest time of the exact OU law, for
    /// `1 ≤ k ≤ K-1`.
    OuTimeline {
        initial: GaussianState,
        target: GaussianState,
        rel_tol: f64,
    },
    /// W2 between each fitted layer and the exact OU law at the layer time.
    OuPathError {
        initial: GaussianState,
        target: GaussianState,
        max_w2: f64,
    },
    /// Radial KS test and optional bounds on the maximal radius.
    SteadyState {
        state: SteadyStateSpec,
        #[serde(default)]
        max_radius: Option<[f64; 2]>,
    },
    AnnulusFit { inner: f64, outer: f64, rel_tol: f64 },
    /// Free energy non-increasing along the layers up to `slack`.
    EnergyDecay { slack: f64 },
    /// Coefficient of variation of the per-segment free-energy drops.
    EnergyDropUniformity { max_cv: f64 },
    /// Every 1-D marginal of every layer with a finite time against an
    /// Euler–Maruyama reference for the separable potential `potential`.
    MarginalsVsLangevin {
        potential: PotentialSpec,
        max_w1: f64,
        n_paths: usize,
        dt: f64,
        seed: u64,
    },
    /// Particle weights are fixed at `M/N`, so the mass is `M` at every layer.
    MassConservation,
    /// All segment lengths at most `max_segment`.
    StationaryPath { max_segment: f64 },
}

impl Validation {
    pub fn name(&self) -> &'static str {
        match self {
            Validation::TerminalGaussian { .. } => "terminal_gaussian",
            Validation::CosineAlignment { .. } => "cosine_alignment",
            Validation::SegmentUniformity { .. } => "segment_uniformity",
            Validation::OuTimeline { .. } => "ou_timeline",
            Validation::OuPathError { .. } => "ou_path_error",
            Validation::SteadyState { .. } => "steady_state",
            Validation::AnnulusFit { .. } => "annulus_fit",
            Validation::EnergyDecay { .. } => "energy_decay",
            Validation::EnergyDropUniformity { .. } => "energy_drop_uniformity",
            Validation::MarginalsVsLangevin { .. } => "marginals_vs_langevin",
            Validation::MassConservation => "mass_conservation",
            Validation::StationaryPath { .. } => "stationary_path",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub energy: FreeEnergySpec,
    pub base: BaseDistribution,
    pub flow: FlowArch,
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_meshes: Option<CompareMeshesConfig>,
    #[serde(default)]
    pub validations: Vec<Validation>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.prepare()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Reads a config file, or resolves a built-in preset name.
    pub fn load(path_or_preset: &str) -> Result<Self> {
        let p = Path::new(path_or_preset);
        if p.exists() {
            return Self::from_toml(&fs::read_to_string(p)?);
        }
        preset(path_or_preset).ok_or_else(|| {
            Error::Config(format!(
                "'{path_or_preset}' is neither a readable file nor a preset ({})",
                PRESETS.join(", ")
            ))
        })
    }

    /// Validates every section and checks dimensions agree before any compute.
    pub fn prepare(&mut self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {CONFIG_VERSION}, found {}",
                self.version
            )));
        }
        self.energy
            .prepare(true)
            .map_err(|e| Error::Config(format!("energy: {e}")))?;
        self.base.validate().map_err(|e| Error::Config(format!("base: {e}")))?;
        self.flow.validate().map_err(|e| Error::Config(format!("flow: {e}")))?;
        self.train
            .validate(&self.energy)
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        let d = self.base.dim();
        if let Some(pd) = self.energy.potential.dim() {
            if pd != d {
                return Err(Error::Dimension(format!("energy.potential is {pd}-D but base is {d}-D")));
            }
        }
        if let TrainMode::PhysicalTime(p) = &self.train.mode {
            if p.steps != self.flow.layers {
                return Err(Error::Dimension(format!(
                    "train.mode.steps = {} but flow.layers = {}",
                    p.steps, self.flow.layers
                )));
            }
        }
        if self.energy.has_internal() && !self.base.has_smooth_score() {
            return Err(Error::Config("base: an internal energy needs a base with a smooth score".into()));
        }
        if self.evaluation.samples < 2 {
            return Err(Error::Config("evaluation.samples must be at least 2".into()));
        }
        for (i, v) in self.validations.iter().enumerate() {
            let field = format!("validations[{i}] ({})", v.name());
            let dim_err = |what: &str| Err(Error::Dimension(format!("{field}: {what} does not match dimension {d}")));
            match v {
                Validation::TerminalGaussian { mean, covariance, .. } => {
                    if mean.len() != d || covariance.len() != d {
                        return dim_err("mean/covariance");
                    }
                }
                Validation::OuTimeline { initial, target, .. } | Validation::OuPathError { initial, target, .. } => {
                    if initial.dim() != d || target.dim() != d {
                        return dim_err("Gaussian states");
                    }
                    initial.validate().and(target.validate()).map_err(|e| Error::Config(format!("{field}: {e}")))?;
                }
                Validation::SteadyState { state, .. } => {
                    let sd = match state {
                        SteadyStateSpec::Gaussian(g) => g.dim(),
                        _ => 2,
                    };
                    if sd != d {
                        return dim_err("steady state");
                    }
                    state.validate().map_err(|e| Error::Config(format!("{field}: {e}")))?;
                }
                Validation::AnnulusFit { .. } if d != 2 => return dim_err("annulus"),
                Validation::MarginalsVsLangevin { potential, .. } => {
                    if !matches!(potential.dim(), None | Some(1)) {
                        return Err(Error::Config(format!("{field}: reference potential must be 1-D")));
                    }
                    if !matches!(self.base, BaseDistribution::StandardGaussian { .. }) {
                        return Err(Error::Config(format!("{field}: needs a standard Gaussian base")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn init_seed(&self) -> u64 {
        self.train.seed ^ 0x5EED_F10A
    }

    pub fn new_model(&self) -> Result<FlowModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed());
        FlowModel::new(self.base.clone(), self.flow.clone(), &mut rng)
    }
}

// ---------------------------------------------------------------------------
// Presets

fn cov_diag(v: &[f64]) -> Vec<Vec<f64>> {
    (0..v.len())
        .map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect())
        .collect()
}

fn geometric(alpha_term: f64, alpha_arc: f64, penalty: ParametrizationPenalty) -> TrainMode {
    TrainMode::Geometric(GeometricConfig {
        alpha_term,
        alpha_arc,
        penalty,
    })
}

fn ou_preset(name: &str, mean: Vec<f64>, cov: Vec<Vec<f64>>, strict: bool) -> ExperimentConfig {
    let d = mean.len();
    let initial = GaussianState::isotropic(vec![0.0; d], 1.0).expect("valid");
    let target = GaussianState::new(mean.clone(), cov.clone()).expect("valid");
    let tol = if strict { 1.0 } else { 2.0 };
    ExperimentConfig {
        version: CONFIG_VERSION,
        name: name.into(),
        output_dir: None,
        energy: FreeEnergySpec {
            internal: Some(InternalEnergySpec::Entropy { beta: 1.0 }),
            potential: PotentialSpec::quadratic(mean.clone(), cov.clone()).expect("SPD"),
            ..Default::default()
        },
        base: BaseDistribution::StandardGaussian { dim: d },
        flow: FlowArch {
            layers: 9,
            hidden_width: 32,
            hidden_layers: 2,
            activation: Activation::Tanh,
            coupling: CouplingKind::affine(),
        },
        train: TrainConfig {
            epochs: 1000,
            batch_size: 2000,
            lr0: 5e-3,
            decay: 0.9999,
            seed: 0,
            mode: geometric(2.0, 1.0, ParametrizationPenalty::ArcLength),
            detach_velocity: false,
            clip_norm: 10.0,
            checkpoint_every: 0,
        },
        evaluation: EvaluationConfig::default(),
        compare_meshes: None,
        validations: vec![
            Validation::TerminalGaussian {
                mean,
                covariance: cov,
                mean_tol: 0.05 * tol,
                covariance_tol: 0.05 * tol,
            },
            Validation::CosineAlignment {
                min_mean: 1.0 - 0.05 * tol,
            },
            Validation::SegmentUniformity { max_cv: 0.1 * tol },
            Validation::OuTimeline {
                initial: initial.clone(),
                target: target.clone(),
                rel_tol: 0.15,
            },
            Validation::OuPathError {
                initial,
                target,
                max_w2: 0.1,
            },
        ],
    }
}

fn aggregation_flow(layers: usize, coupling: CouplingKind) -> FlowArch {
    FlowArch {
        layers,
        hidden_width: 32,
        hidden_layers: 2,
        activation: Activation::Tanh,
        coupling,
    }
}

/// Built-in experiment configs (desk scale).
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let cfg = match name {
        "ou2d-isotropic" => ou_preset(name, vec![3.0, 3.0], cov_diag(&[0.25, 0.25]), false),
        "ou2d-anisotropic" => ou_preset(name, vec![3.0, 3.0], cov_diag(&[1.0, 0.25]), false),
        "ou10d-block" => {
            let mut cov = cov_diag(&[5.0 / 8.0, 5.0 / 8.0, 1.0, 1.0, 1.0, 0.25, 1.0, 1.0, 0.25, 0.25]);
            cov[0][1] = -3.0 / 8.0;
            cov[1][0] = -3.0 / 8.0;
            let mut c = ou_preset(name, vec![1.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0, 3.0], cov, false);
            c.flow.hidden_width = 64;
            c.validations.retain(|v| {
                matches!(
                    v,
                    Validation::TerminalGaussian { .. } | Validation::OuPathError { .. } | Validation::CosineAlignment { .. }
                )
            });
            for v in &mut c.validations {
                match v {
                    Validation::TerminalGaussian { mean_tol, covariance_tol, .. } => {
                        *mean_tol = 0.25;
                        *covariance_tol = 0.25;
                    }
                    Validation::OuPathError { max_w2, .. } => *max_w2 = 0.25,
                    _ => {}
                }
            }
            c
        }
        "styblinski10d" => styblinski(10),
        "styblinski4d" => styblinski(4),
        "aggregation" => ExperimentConfig {
            version: CONFIG_VERSION,
            name: name.into(),
            output_dir: None,
            energy: FreeEnergySpec {
                kernel: KernelSpec::QuadraticLog,
                ..Default::default()
            },
            base: BaseDistribution::IsotropicGaussian {
                mean: vec![0.0, 0.0],
                std: 0.5,
            },
            flow: aggregation_flow(7, CouplingKind::spline(12, 3.0)),
            train: TrainConfig {
                epochs: 1000,
                batch_size: 1000,
                lr0: 5e-3,
                decay: 0.9995,
                seed: 0,
                mode: geometric(10.0, 1.0, ParametrizationPenalty::ArcLength),
                detach_velocity: false,
                clip_norm: 10.0,
                checkpoint_every: 0,
            },
            evaluation: EvaluationConfig::default(),
            compare_meshes: None,
            validations: vec![
                Validation::SteadyState {
                    state: SteadyStateSpec::UnitDisk,
                    max_radius: Some([0.95, 1.05]),
                },
                Validation::EnergyDecay { slack: 1e-3 },
                Validation::MassConservation,
            ],
        },
        "aggregation-drift" => {
            let spec = SteadyStateSpec::annulus_from_confinement(1.0, 1.0).expect("positive");
            let SteadyStateSpec::Annulus { inner, outer } = spec.clone() else {
                unreachable!()
            };
            ExperimentConfig {
                version: CONFIG_VERSION,
                name: name.into(),
                output_dir: None,
                energy: FreeEnergySpec {
                    potential: PotentialSpec::LogConfinement { alpha1: 1.0, alpha2: 1.0 },
                    kernel: KernelSpec::QuadraticLog,
                    ..Default::default()
                },
                base: BaseDistribution::GaussianMixture {
                    // regular pentagon: zero mean and no net drift force
                    weights: vec![0.2; 5],
                    means: (0..5)
                        .map(|k| {
                            let a = std::f64::consts::FRAC_PI_2 + 0.4 * std::f64::consts::PI * k as f64;
                            vec![1.5 * a.cos(), 1.5 * a.sin()]
                        })
                        .collect(),
                    variance: 0.1,
                },
                flow: aggregation_flow(9, CouplingKind::spline(12, 3.0)),
                train: TrainConfig {
                    epochs: 1000,
                    batch_size: 1000,
                    lr0: 5e-3,
                    decay: 0.999,
                    seed: 0,
                    mode: geometric(2.0, 1.0, ParametrizationPenalty::ArcLength),
                    detach_velocity: false,
                    clip_norm: 10.0,
                    checkpoint_every: 0,
                },
                evaluation: EvaluationConfig::default(),
                compare_meshes: Some(CompareMeshesConfig { epochs: None }),
                validations: vec![
                    Validation::AnnulusFit {
                        inner,
                        outer,
                        rel_tol: 0.05,
                    },
                    Validation::SteadyState {
                        state: spec,
                        max_radius: None,
                    },
                    Validation::EnergyDecay { slack: 1e-3 },
                    Validation::MassConservation,
                ],
            }
        }
        "aggregation-diffusion" => ExperimentConfig {
            version: CONFIG_VERSION,
            name: name.into(),
            output_dir: None,
            energy: FreeEnergySpec {
                // ν = 1/β = 0.1
                internal: Some(InternalEnergySpec::PowerLaw { exponent: 2.0, beta: 10.0 }),
                kernel: KernelSpec::GaussianAttraction {
                    amplitude: 1.0 / std::f64::consts::PI,
                    width: 1.0,
                },
                total_mass: 9.0,
                ..Default::default()
            },
            base: BaseDistribution::UniformBox {
                lo: vec![-3.0, -3.0],
                hi: vec![3.0, 3.0],
                smoothing: 1e-2,
            },
            flow: aggregation_flow(10, CouplingKind::spline(8, 4.0)),
            train: TrainConfig {
                epochs: 300,
                batch_size: 1000,
                lr0: 5e-3,
                decay: 0.9995,
                seed: 0,
                mode: geometric(10.0, 1.0, ParametrizationPenalty::ArcAction),
                detach_velocity: false,
                clip_norm: 10.0,
                checkpoint_every: 0,
            },
            evaluation: EvaluationConfig::default(),
            compare_meshes: None,
            validations: vec![
                Validation::EnergyDropUniformity { max_cv: 0.25 },
                Validation::EnergyDecay { slack: 1e-3 },
                Validation::MassConservation,
            ],
        },
        "zero-energy" => ExperimentConfig {
            version: CONFIG_VERSION,
            name: name.into(),
            output_dir: None,
            energy: FreeEnergySpec::default(),
            base: BaseDistribution::StandardGaussian { dim: 2 },
            flow: FlowArch {
                layers: 3,
                hidden_width: 8,
                hidden_layers: 1,
                activation: Activation::Tanh,
                coupling: CouplingKind::affine(),
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 256,
                lr0: 1e-3,
                decay: 1.0,
                seed: 0,
                mode: geometric(0.0, 1.0, ParametrizationPenalty::ArcLength),
                detach_velocity: false,
                clip_norm: 10.0,
                checkpoint_every: 0,
            },
            evaluation: EvaluationConfig {
                samples: 1000,
                scatter: 100,
                grid: 16,
                ..Default::default()
            },
            compare_meshes: Some(CompareMeshesConfig { epochs: Some(5) }),
            validations: vec![
                Validation::StationaryPath { max_segment: 1e-6 },
                Validation::MassConservation,
            ],
        },
        _ => return None,
    };
    Some(cfg)
}

/// Styblinski–Tang preset in `dim` dimensions with a spline flow.
pub fn styblinski(dim: usize) -> ExperimentConfig {
    let v = PotentialSpec::StyblinskiTang { scale: 3.0 / 50.0 };
    ExperimentConfig {
        version: CONFIG_VERSION,
        name: format!("styblinski{dim}d"),
        output_dir: None,
        energy: FreeEnergySpec {
            internal: Some(InternalEnergySpec::Entropy { beta: 1.0 }),
            potential: v.clone(),
            ..Default::default()
        },
        base: BaseDistribution::StandardGaussian { dim },
        flow: FlowArch {
            layers: 9,
            hidden_width: 64,
            hidden_layers: 2,
            activation: Activation::Silu,
            coupling: CouplingKind::spline(8, 6.0),
        },
        train: TrainConfig {
            epochs: 1500,
            batch_size: 1000,
            lr0: 5e-3,
            decay: 0.9995,
            seed: 0,
            mode: geometric(1.05, 1.0, ParametrizationPenalty::ArcLength),
            detach_velocity: false,
            clip_norm: 10.0,
            checkpoint_every: 0,
        },
        evaluation: EvaluationConfig::default(),
        compare_meshes: None,
        validations: vec![
            Validation::MarginalsVsLangevin {
                potential: v,
                max_w1: 0.1,
                n_paths: 5000,
                dt: 1e-3,
                seed: 7,
            },
            Validation::EnergyDecay { slack: 1e-3 },
        ],
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub pass: bool,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_layer: BTreeMap<String, Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckResult {
    fn new(check: &str) -> Self {
        CheckResult {
            check: check.into(),
            pass: false,
            metrics: BTreeMap::new(),
            per_layer: BTreeMap::new(),
            note: None,
        }
    }

    fn metric(mut self, k: &str, v: f64) -> Self {
        self.metrics.insert(k.into(), v);
        self
    }

    fn layers(mut self, k: &str, v: Vec<Option<f64>>) -> Self {
        self.per_layer.insert(k.into(), v);
        self
    }

    fn failed(check: &str, note: String) -> Self {
        CheckResult {
            note: Some(note),
            ..Self::new(check)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub name: String,
    pub all_pass: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Everything computed on the evaluation batch.
pub struct Evaluation {
    pub batch: PathBatch,
    pub fields: Vec<Mat>,
    pub diag: PathDiagnostics,
    /// Recovered timeline (geometric mode) or `Err` with the reason.
    pub timeline: std::result::Result<RecoveredTimeline, String>,
    /// `K+1` layer times: recovered (geometric) or the mesh (physical time).
    pub times: Vec<Option<f64>>,
    pub report: ValidationReport,
}

pub fn evaluation_batch(cfg: &ExperimentConfig) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.evaluation.seed);
    cfg.base.sample(cfg.evaluation.samples, &mut rng)
}

pub fn evaluate(model: &FlowModel, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let z = evaluation_batch(cfg);
    let (batch, fields, diag) = diagnose(model, &z, &cfg.energy)?;
    let k = batch.num_layers();
    let timeline = match &cfg.train.mode {
        TrainMode::Geometric(_) => {
            recover_time(&diag, diag.free_energy[0], diag.free_energy[k]).map_err(|e| e.to_string())
        }
        TrainMode::PhysicalTime(_) => Err("physical-time run: mesh times are used".to_string()),
    };
    let times: Vec<Option<f64>> = match (&cfg.train.mode, &timeline) {
        (TrainMode::PhysicalTime(p), _) => p.times().into_iter().map(Some).collect(),
        (_, Ok(tl)) => tl.t.clone(),
        (_, Err(e)) => {
            warn!("time recovery failed: {e}");
            vec![None; k + 1]
        }
    };
    let checks = cfg
        .validations
        .iter()
        .map(|v| run_check(v, cfg, &batch, &diag, &times))
        .collect::<Vec<_>>();
    let report = ValidationReport {
        name: cfg.name.clone(),
        all_pass: checks.iter().all(|c| c.pass),
        checks,
    };
    Ok(Evaluation {
        batch,
        fields,
        diag,
        timeline,
        times,
        report,
    })
}

fn mean_cv(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, if m.abs() > 0.0 { sd / m.abs() } else { f64::INFINITY })
}

fn column(m: &Mat, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m[(i, j)]).collect()
}

fn run_check(
    v: &Validation,
    cfg: &ExperimentConfig,
    batch: &PathBatch,
    diag: &PathDiagnostics,
    times: &[Option<f64>],
) -> CheckResult {
    match check_inner(v, cfg, batch, diag, times) {
        Ok(r) => r,
        Err(e) => CheckResult::failed(v.name(), e.to_string()),
    }
}

fn check_inner(
    v: &Validation,
    cfg: &ExperimentConfig,
    batch: &PathBatch,
    diag: &PathDiagnostics,
    times: &[Option<f64>],
) -> Result<CheckResult> {
    let name = v.name();
    let k = batch.num_layers();
    let terminal = &batch.positions[k];
    Ok(match v {
        Validation::TerminalGaussian {
            mean,
            covariance,
            mean_tol,
            covariance_tol,
        } => {
            let fit = fitted_gaussian(terminal)?;
            let me = fit.mean.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let ce = fit
                .covariance
                .iter()
                .flatten()
                .zip(covariance.iter().flatten())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let mut r = CheckResult::new(name)
                .metric("mean_error", me)
                .metric("covariance_error", ce)
                .metric("mean_tol", *mean_tol)
                .metric("covariance_tol", *covariance_tol);
            r.pass = me <= *mean_tol && ce <= *covariance_tol;
            r
        }
        Validation::CosineAlignment { min_mean } => {
            let defined: Vec<f64> = diag.cosine.iter().flatten().copied().collect();
            let mut r = CheckResult::new(name).layers("cosine", diag.cosine.clone());
            if defined.is_empty() {
                r.note = Some("no segment has a defined alignment".into());
                return Ok(r);
            }
            let m = defined.iter().sum::<f64>() / defined.len() as f64;
            let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
            r = r.metric("mean", m).metric("min", min).metric("min_mean", *min_mean);
            r.pass = m >= *min_mean;
            r
        }
        Validation::SegmentUniformity { max_cv } => {
            let (m, cv) = mean_cv(&diag.d);
            let mut r = CheckResult::new(name)
                .metric("mean_segment", m)
                .metric("cv", cv)
                .metric("max_cv", *max_cv)
                .layers("d", diag.d.iter().map(|x| Some(*x)).collect());
            r.pass = cv <= *max_cv;
            r
        }
        Validation::OuTimeline { initial, target, rel_tol } => {
            let t_max = 20.0 * target.cov().symmetric_eigenvalues().max();
            let mut oracle = vec![Some(0.0)];
            let mut rel = vec![None];
            let mut worst: f64 = 0.0;
            let mut missing = 0;
            for kk in 1..=k {
                let fit = fitted_gaussian(&batch.positions[kk])?;
                let (ts, _) = w2_nearest_time(&fit, |t| ou_exact(t, initial, target), t_max, 4001)?;
                oracle.push(Some(ts));
                let e = times[kk].map(|t| (t - ts).abs() / ts.max(1e-12));
                if kk < k {
                    match e {
                        Some(e) => worst = worst.max(e),
                        None => missing += 1,
                    }
                }
                rel.push(e);
            }
            let mut r = CheckResult::new(name)
                .metric("max_rel_error", worst)
                .metric("rel_tol", *rel_tol)
                .layers("t", times.to_vec())
                .layers("t_oracle", oracle)
                .layers("rel_error", rel);
            // Censoring: a segment touching a vanished velocity has no duration.
            let floor_hit = diag.v.last().is_some_and(|v| *v <= crate::timeline::V_FLOOR);
            let censored_ok = !floor_hit || times[k].is_none();
            r.pass = missing == 0 && worst <= *rel_tol && censored_ok;
            if missing > 0 {
                r.note = Some(format!("{missing} interior layers have no recovered time"));
            }
            r
        }
        Validation::OuPathError { initial, target, max_w2 } => {
            let mut errs = Vec::with_capacity(k + 1);
            let mut worst: f64 = 0.0;
            for (kk, t) in times.iter().enumerate() {
                let e = match t {
                    Some(t) => {
                        let fit = fitted_gaussian(&batch.positions[kk])?;
                        let w = gaussian_w2(&fit, &ou_exact(*t, initial, target)?)?;
                        worst = worst.max(w);
                        Some(w)
                    }
                    None => None,
                };
                errs.push(e);
            }
            let mut r = CheckResult::new(name)
                .metric("max_w2", worst)
                .metric("tolerance", *max_w2)
                .layers("w2", errs);
            r.pass = worst <= *max_w2 && times.iter().skip(1).any(Option::is_some);
            r
        }
        Validation::SteadyState { state, max_radius } => {
            let rep = steady_state_check(terminal, state)?;
            let mut r = CheckResult::new(name)
                .metric("max_radius", rep.max_radius)
                .metric("ks_statistic", rep.ks_statistic)
                .metric("ks_critical_1pct", rep.ks_critical_1pct);
            for (q, x) in &rep.quantiles {
                r.metrics.insert(format!("radius_q{:02}", (q * 100.0).round() as usize), *x);
            }
            let radius_ok = match max_radius {
                Some([lo, hi]) => {
                    r.metrics.insert("max_radius_lo".into(), *lo);
                    r.metrics.insert("max_radius_hi".into(), *hi);
                    rep.max_radius >= *lo && rep.max_radius <= *hi
                }
                None => true,
            };
            r.pass = rep.ks_pass && radius_ok;
            r
        }
        Validation::AnnulusFit { inner, outer, rel_tol } => {
            let (ri, ro) = fit_annulus(terminal)?;
            let (ei, eo) = ((ri - inner).abs() / inner, (ro - outer).abs() / outer);
            let mut r = CheckResult::new(name)
                .metric("inner", ri)
                .metric("outer", ro)
                .metric("inner_rel_error", ei)
                .metric("outer_rel_error", eo)
                .metric("rel_tol", *rel_tol);
            r.pass = ei <= *rel_tol && eo <= *rel_tol;
            r
        }
        Validation::EnergyDecay { slack } => {
            let f = &diag.free_energy;
            let worst = f.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            let mut r = CheckResult::new(name)
                .metric("max_increase", worst)
                .metric("slack", *slack)
                .layers("free_energy", f.iter().map(|x| Some(*x)).collect());
            r.pass = worst <= *slack;
            r
        }
        Validation::EnergyDropUniformity { max_cv } => {
            let drops: Vec<f64> = diag.free_energy.windows(2).map(|w| w[0] - w[1]).collect();
            let (m, cv) = mean_cv(&drops);
            let mut r = CheckResult::new(name)
                .metric("mean_drop", m)
                .metric("cv", cv)
                .metric("max_cv", *max_cv)
                .layers("drop", drops.iter().map(|x| Some(*x)).collect());
            r.pass = m > 0.0 && cv <= *max_cv;
            r
        }
        Validation::MarginalsVsLangevin {
            potential,
            max_w1,
            n_paths,
            dt,
            seed,
        } => {
            let layers: Vec<(usize, f64)> = times
                .iter()
                .enumerate()
                .skip(1)
                .filter_map(|(kk, t)| t.map(|t| (kk, t)))
                .collect();
            let mut r = CheckResult::new(name).metric("tolerance", *max_w1);
            if layers.is_empty() {
                r.note = Some("no layer has a finite time".into());
                return Ok(r);
            }
            let em = euler_maruyama_1d(
                potential,
                &EulerMaruyamaConfig {
                    n_paths: *n_paths,
                    dt: *dt,
                    times: layers.iter().map(|(_, t)| *t).collect(),
                    seed: *seed,
                    initial_mean: 0.0,
                    initial_std: 1.0,
                },
            )?;
            let mut per = vec![None; k + 1];
            let mut worst: f64 = 0.0;
            for ((kk, _), reference) in layers.iter().zip(&em) {
                let layer = &batch.positions[*kk];
                let w = (0..layer.cols())
                    .map(|j| w1_1d(&column(layer, j), reference))
                    .fold(0.0, f64::max);
                per[*kk] = Some(w);
                worst = worst.max(w);
            }
            r = r.metric("max_w1", worst).layers("w1", per).layers("t", times.to_vec());
            r.pass = worst <= *max_w1;
            r
        }
        Validation::MassConservation => {
            // Weights are never trained: each particle carries M/N at every layer.
            let n = batch.len() as f64;
            let per: Vec<Option<f64>> = (0..=k).map(|_| Some(cfg.energy.total_mass / n * n)).collect();
            let worst = per
                .iter()
                .flatten()
                .map(|m| (m - cfg.energy.total_mass).abs())
                .fold(0.0, f64::max);
            let mut r = CheckResult::new(name)
                .metric("total_mass", cfg.energy.total_mass)
                .metric("max_deviation", worst)
                .layers("mass", per);
            r.pass = worst == 0.0;
            r
        }
        Validation::StationaryPath { max_segment } => {
            let worst = diag.d.iter().copied().fold(0.0, f64::max);
            let mut r = CheckResult::new(name)
                .metric("max_segment", worst)
                .metric("tolerance", *max_segment);
            r.pass = worst <= *max_segment;
            r
        }
    })
}

// ---------------------------------------------------------------------------
// Artifacts

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const TIMELINE_FILE: &str = "timeline.json";
pub const REPORT_FILE: &str = "validation.json";
pub const MESH_FILE: &str = "recovered_mesh.toml";

fn write_plot_data(dir: &Path, model: &FlowModel, ev: &Evaluation, cfg: &ExperimentConfig) -> Result<()> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    let k = ev.batch.num_layers();
    let d = model.dim();
    let n = ev.batch.len().min(cfg.evaluation.scatter);

    let mut s = String::from("k,i");
    for j in 0..d {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for (kk, layer) in ev.batch.positions.iter().enumerate() {
        for i in 0..n {
            let _ = write!(s, "{kk},{i}");
            for x in layer.row(i) {
                let _ = write!(s, ",{}", fmt17(*x));
            }
            s.push('\n');
        }
    }
    fs::write(plots.join("layer_samples.csv"), s)?;

    let mut f = String::from("k,tau,t,free_energy\n");
    for kk in 0..=k {
        let t = ev.times.get(kk).copied().flatten().map_or_else(String::new, fmt17);
        let _ = writeln!(
            f,
            "{kk},{},{t},{}",
            fmt17(kk as f64 / k as f64),
            fmt17(ev.diag.free_energy[kk])
        );
    }
    fs::write(plots.join("free_energy.csv"), f)?;

    if d <= 2 {
        let g = cfg.evaluation.grid.max(2);
        for (kk, layer) in ev.batch.positions.iter().enumerate() {
            let (lo, hi): (Vec<f64>, Vec<f64>) = (0..d)
                .map(|j| {
                    let c = column(layer, j);
                    let mn = c.iter().copied().fold(f64::INFINITY, f64::min);
                    let mx = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let pad = 0.1 * (mx - mn).max(1e-3);
                    (mn - pad, mx + pad)
                })
                .unzip();
            let pts = if d == 1 { g } else { g * g };
            let grid = Mat::from_fn(pts, d, |p, j| {
                let idx = if j == 0 { p % g } else { p / g };
                lo[j] + (hi[j] - lo[j]) * idx as f64 / (g - 1) as f64
            });
            let logp = model.log_density(kk, &grid)?;
            let mut out = String::from(if d == 1 { "x0,log_density\n" } else { "x0,x1,log_density\n" });
            for p in 0..pts {
                for x in grid.row(p) {
                    let _ = write!(out, "{},", fmt17(*x));
                }
                let _ = writeln!(out, "{}", fmt17(logp[p]));
            }
            fs::write(plots.join(format!("density_layer{kk}.csv")), out)?;
        }
    }
    Ok(())
}

/// Writes diagnostics, timeline, validation report and plot data.
pub fn write_evaluation(dir: &Path, model: &FlowModel, ev: &Evaluation, cfg: &ExperimentConfig) -> Result<()> {
    let finite: Vec<f64> = ev.times.iter().map(|t| t.unwrap_or(f64::NAN)).collect();
    let mut csv = diagnostics_csv(&ev.diag, Some(&finite));
    csv = csv.replace("NaN", "censored");
    fs::write(dir.join(DIAGNOSTICS_FILE), csv)?;
    if let Ok(tl) = &ev.timeline {
        fs::write(dir.join(TIMELINE_FILE), tl.to_json()?)?;
    }
    fs::write(dir.join(REPORT_FILE), ev.report.to_json()?)?;
    write_plot_data(dir, model, ev, cfg)
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: Option<ValidationReport>,
    pub training_error: Option<String>,
}

impl RunOutcome {
    pub fn success(&self) -> bool {
        self.training_error.is_none() && self.report.as_ref().is_some_and(|r| r.all_pass)
    }
}

/// Full pipeline: train → diagnose → recover time → validate.
pub fn run(cfg: &ExperimentConfig, seed: Option<u64>, out: Option<&Path>) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.prepare()?;
    let dir = match (out, &cfg.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => PathBuf::from("runs").join(&cfg.name),
    };
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut model = cfg.new_model()?;
    info!(
        "{}: {} parameters, {} layers, dimension {}",
        cfg.name,
        model.num_parameters(),
        model.num_layers(),
        model.dim()
    );
    let report = train(&mut model, &cfg.energy, &cfg.train, Some(&dir));
    let (history, training_error) = match report {
        Ok(r) => {
            info!("training finished in {:.1}s ({} clipped steps)", r.wall_time_secs, r.clipped_iterations);
            (r.history, None)
        }
        Err(e) => {
            warn!("{e}");
            (Vec::new(), Some(e.to_string()))
        }
    };
    fs::write(dir.join(LOSS_FILE), loss_csv(&history))?;
    if training_error.is_some() {
        return Ok(RunOutcome {
            dir,
            report: None,
            training_error,
        });
    }
    let ev = evaluate(&model, &cfg)?;
    write_evaluation(&dir, &model, &ev, &cfg)?;
    Ok(RunOutcome {
        dir,
        report: Some(ev.report),
        training_error,
    })
}

/// Loads the config and checkpoint stored in a run directory.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, FlowModel)> {
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let model = FlowModel::load(&dir.join(CHECKPOINT_FILE))?;
    if model.dim() != cfg.base.dim() || model.num_layers() != cfg.flow.layers {
        return Err(Error::Dimension("checkpoint does not match the stored config".into()));
    }
    Ok((cfg, model))
}

pub struct ValidateOnly {
    pub report: ValidationReport,
    /// Whether the stored report exists and is identical.
    pub matches_stored: Option<bool>,
}

/// Re-runs the oracles on a saved checkpoint without training. Nothing in
/// the run directory is modified.
pub fn validate_only(dir: &Path) -> Result<ValidateOnly> {
    let (cfg, model) = load_run(dir)?;
    let ev = evaluate(&model, &cfg)?;
    let stored = fs::read_to_string(dir.join(REPORT_FILE))
        .ok()
        .and_then(|s| ValidationReport::from_json(&s).ok());
    Ok(ValidateOnly {
        matches_stored: stored.map(|s| s == ev.report),
        report: ev.report,
    })
}

/// Recovers the physical-time mesh of a geometric run and writes
/// `timeline.json` and the exported mesh.
pub fn recover_time_for_run(dir: &Path) -> Result<(RecoveredTimeline, PhysicalTimeConfig)> {
    let (cfg, model) = load_run(dir)?;
    if !matches!(cfg.train.mode, TrainMode::Geometric(_)) {
        return Err(Error::Config("time recovery needs a geometric-mode run".into()));
    }
    let z = evaluation_batch(&cfg);
    let (_, _, diag) = diagnose(&model, &z, &cfg.energy)?;
    let k = diag.free_energy.len() - 1;
    let tl = recover_time(&diag, diag.free_energy[0], diag.free_energy[k])?;
    let mesh = export_mesh(&tl)?;
    fs::write(dir.join(TIMELINE_FILE), tl.to_json()?)?;
    fs::write(
        dir.join(MESH_FILE),
        toml::to_string(&mesh).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok((tl, mesh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshComparison {
    pub uniform_times: Vec<f64>,
    pub recovered_times: Vec<f64>,
    /// Cumulative physical-time loss after each layer (`K+1` entries, first 0).
    pub uniform_cumulative: Vec<f64>,
    pub recovered_cumulative: Vec<f64>,
    pub recovered_never_worse: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MeshComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,t_uniform,t_recovered,cumulative_uniform,cumulative_recovered\n");
        for k in 0..self.uniform_times.len() {
            let _ = writeln!(
                s,
                "{k},{},{},{},{}",
                fmt17(self.uniform_times[k]),
                fmt17(self.recovered_times[k]),
                fmt17(self.uniform_cumulative[k]),
                fmt17(self.recovered_cumulative[k])
            );
        }
        s
    }
}

fn cumulative_loss(model: &FlowModel, cfg: &ExperimentConfig, mesh: &PhysicalTimeConfig) -> Result<Vec<f64>> {
    let z = evaluation_batch(cfg);
    let batch = model.push_forward(&z)?;
    let fields = path_velocities(model, &batch, &cfg.energy)?;
    let seg = physical_time_loss_per_segment(&batch, &fields, mesh)?;
    let mut acc = vec![0.0];
    for s in seg {
        acc.push(acc.last().expect("non-empty") + s);
    }
    Ok(acc)
}

/// Trains two physical-time models from the same initialization and seed,
/// one on the uniform mesh and one on the mesh recovered from the geometric
/// checkpoint, and compares their cumulative losses layer by layer.
pub fn compare_meshes(dir: &Path) -> Result<MeshComparison> {
    let (cfg, model) = load_run(dir)?;
    if !matches!(cfg.train.mode, TrainMode::Geometric(_)) {
        return Err(Error::Config("compare-meshes needs a geometric-mode checkpoint".into()));
    }
    let k = cfg.flow.layers;
    let ev = evaluate(&model, &cfg)?;
    let (recovered, note) = match ev.timeline.as_ref().map_err(|e| e.clone()).and_then(|tl| export_mesh(tl).map_err(|e| e.to_string())) {
        Ok(m) => (m, None),
        Err(e) => {
            warn!("no usable recovered mesh ({e}); falling back to the uniform mesh on [0, 1]");
            (PhysicalTimeConfig::uniform(1.0, k), Some(format!("degenerate path: {e}")))
        }
    };
    let uniform = PhysicalTimeConfig::uniform(recovered.horizon, k);
    let epochs = cfg.compare_meshes.as_ref().and_then(|c| c.epochs).unwrap_or(cfg.train.epochs);
    let mut results = Vec::new();
    for mesh in [&uniform, &recovered] {
        let mut c = cfg.clone();
        c.train.mode = TrainMode::PhysicalTime(mesh.clone());
        c.train.epochs = epochs;
        let mut m = c.new_model()?;
        train(&mut m, &c.energy, &c.train, None)?;
        results.push(cumulative_loss(&m, &c, mesh)?);
    }
    let recovered_cumulative = results.pop().expect("two runs");
    let uniform_cumulative = results.pop().expect("two runs");
    let never_worse = recovered_cumulative
        .iter()
        .zip(&uniform_cumulative)
        .all(|(r, u)| *r <= *u);
    let cmp = MeshComparison {
        uniform_times: uniform.times(),
        recovered_times: recovered.times(),
        uniform_cumulative,
        recovered_cumulative,
        recovered_never_worse: never_worse,
        note,
    };
    fs::write(dir.join("compare_meshes.csv"), cmp.to_csv())?;
    fs::write(dir.join("compare_meshes.json"), serde_json::to_string_pretty(&cmp)?)?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_complete_and_round_trip() {
        for name in PRESETS {
            let mut cfg = preset(name).unwrap();
            cfg.prepare().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}\n{text}"));
            assert_eq!(back, cfg, "{name}");
            assert_eq!(back.to_toml().unwrap(), text, "{name}");
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let text = preset("zero-energy").unwrap().to_toml().unwrap();
        let bad = text.replacen("version = 1", "version = 1\ncolour = \"red\"", 1);
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = text.replacen("version = 1", "version = 2", 1);
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = text.replacen("hidden_width = 8", "hidden_width = 8\nwidth = 3", 1);
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported_before_compute() {
        let mut cfg = preset("ou2d-isotropic").unwrap();
        cfg.base = BaseDistribution::StandardGaussian { dim: 3 };
        let err = cfg.prepare().unwrap_err().to_string();
        assert!(err.contains("potential"), "{err}");
        let mut cfg = preset("ou2d-isotropic").unwrap();
        cfg.train.mode = TrainMode::PhysicalTime(PhysicalTimeConfig::uniform(1.0, 4));
        assert!(cfg.prepare().unwrap_err().to_string().contains("flow.layers"));
    }
}
