//! Stochastic training of the flow parameters with Adam.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::energy::FreeEnergySpec;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::losses::{
    free_energy_node, geometric_loss_node, physical_time_loss_node, GeometricConfig, ParametrizationPenalty,
    PhysicalTimeConfig,
};
use crate::tensor::Mat;
use crate::velocity::{fmt17, path_velocities, velocity_field};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum TrainMode {
    PhysicalTime(PhysicalTimeConfig),
    Geometric(GeometricConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default)]
    pub seed: u64,
    pub mode: TrainMode,
    #[serde(default)]
    pub detach_velocity: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Write a checkpoint every this many iterations (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_decay() -> f64 {
    1.0
}

fn default_clip() -> f64 {
    10.0
}

impl TrainConfig {
    pub fn validate(&self, energy: &FreeEnergySpec) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || (energy.has_kernel() && self.batch_size < 2) {
            return Err(Error::Config("batch size must be >= 2 with an interaction kernel".into()));
        }
        if !(self.lr0 > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("need lr0 > 0 and decay in (0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        match &self.mode {
            TrainMode::PhysicalTime(p) => {
                p.steps_dt()?;
                p.omega()?;
            }
            TrainMode::Geometric(g) => g.validate()?,
        }
        Ok(())
    }
}

/// Loss parts of one iteration. Geometric parts are `None` in physical-time
/// mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub j: Option<f64>,
    pub terminal: Option<f64>,
    pub penalty: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt17);
    let mut out = String::from("iter,J,F_terminal,arc_penalty,total\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            opt(r.j),
            opt(r.terminal),
            opt(r.penalty),
            fmt17(r.total)
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    pub wall_time_secs: f64,
    pub clipped_iterations: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &[Mat]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Records the training loss for the batch `z` on `tape`. Returns the loss
/// node, the parameter leaves and the loss parts. With `detach_velocity` the
/// velocity fields enter as constants.
pub fn record_loss(
    tape: &mut Tape,
    model: &FlowModel,
    energy: &FreeEnergySpec,
    mode: &TrainMode,
    detach_velocity: bool,
    z: &Mat,
) -> Result<(Var, Vec<Var>, LossRecord)> {
    let fixed = if detach_velocity {
        let batch = model.push_forward(z)?;
        Some(path_velocities(model, &batch, energy)?)
    } else {
        None
    };
    record_loss_with(tape, model, energy, mode, fixed, z)
}

/// Like [`record_loss`]; `fixed_fields`, when given, replaces the velocity
/// of every layer by a constant.
pub fn record_loss_with(
    tape: &mut Tape,
    model: &FlowModel,
    energy: &FreeEnergySpec,
    mode: &TrainMode,
    fixed_fields: Option<Vec<Mat>>,
    z: &Mat,
) -> Result<(Var, Vec<Var>, LossRecord)> {
    let need_scores = energy.has_internal() && fixed_fields.is_none();
    let path = model.record(tape, z, need_scores)?;
    let k = model.num_layers();
    let fields: Vec<Var> = match fixed_fields {
        Some(f) => {
            if f.len() != k + 1 {
                return Err(Error::Dimension("one fixed velocity field per layer required".into()));
            }
            f.into_iter().map(|m| tape.leaf(m)).collect()
        }
        None => (0..=k)
            .map(|l| {
                let s = path.scores.as_ref().map(|s| s[l]);
                velocity_field(tape, energy, &path.positions[l], &path.log_densities[l], s.as_ref())
            })
            .collect::<Result<_>>()?,
    };
    for (l, f) in fields.iter().enumerate() {
        let v = tape.val(*f);
        if let Some(i) = (0..v.rows()).find(|&i| v.row(i).iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                what: "velocity",
                layer: l,
                particle: i,
            });
        }
    }
    let (loss, record) = match mode {
        TrainMode::PhysicalTime(cfg) => {
            let l = physical_time_loss_node(tape, &path.positions, &fields, cfg)?;
            let total = tape.val(l).item();
            (
                l,
                LossRecord {
                    iter: 0,
                    j: None,
                    terminal: None,
                    penalty: None,
                    total,
                    grad_norm: 0.0,
                },
            )
        }
        TrainMode::Geometric(cfg) => {
            let all = cfg.alpha_arc != 0.0 && cfg.penalty == ParametrizationPenalty::ArcAction;
            let mut energies: Vec<Option<Var>> = vec![None; k + 1];
            for (l, e) in energies.iter_mut().enumerate() {
                if all || (l == k && cfg.alpha_term != 0.0) {
                    *e = Some(free_energy_node(tape, energy, &path.positions[l], &path.log_densities[l])?);
                }
            }
            let parts = geometric_loss_node(tape, &path.positions, &fields, &energies, cfg)?;
            let rec = LossRecord {
                iter: 0,
                j: Some(tape.val(parts.j).item()),
                terminal: energies[k].map(|e| tape.val(e).item()),
                penalty: Some(tape.val(parts.penalty).item()),
                total: tape.val(parts.total).item(),
                grad_norm: 0.0,
            };
            (parts.total, rec)
        }
    };
    Ok((loss, path.params, record))
}

/// Loss and exact parameter gradient for one batch.
pub fn loss_and_gradient(
    model: &FlowModel,
    energy: &FreeEnergySpec,
    mode: &TrainMode,
    detach_velocity: bool,
    z: &Mat,
) -> Result<(LossRecord, Vec<Mat>)> {
    let mut tape = Tape::new();
    let (loss, params, rec) = record_loss(&mut tape, model, energy, mode, detach_velocity, z)?;
    let grads = tape.grad_values(loss, &params);
    Ok((rec, grads))
}

/// Loss value only (no gradient).
pub fn loss_value(
    model: &FlowModel,
    energy: &FreeEnergySpec,
    mode: &TrainMode,
    detach_velocity: bool,
    z: &Mat,
) -> Result<LossRecord> {
    let mut tape = Tape::new();
    Ok(record_loss(&mut tape, model, energy, mode, detach_velocity, z)?.2)
}

/// Loss value with every velocity field held at `fields`.
pub fn loss_with_fixed_velocities(
    model: &FlowModel,
    energy: &FreeEnergySpec,
    mode: &TrainMode,
    fields: &[Mat],
    z: &Mat,
) -> Result<LossRecord> {
    let mut tape = Tape::new();
    Ok(record_loss_with(&mut tape, model, energy, mode, Some(fields.to_vec()), z)?.2)
}

fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Runs `cfg.epochs` Adam iterations with a fresh batch each. When
/// `out_dir` is given, checkpoints are written there.
pub fn train(
    model: &mut FlowModel,
    energy: &FreeEnergySpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate(energy)?;
    if let Some(d) = energy.potential.dim() {
        if d != model.dim() {
            return Err(Error::Dimension(format!("potential is {d}-D, flow is {}-D", model.dim())));
        }
    }
    if let TrainMode::PhysicalTime(p) = &cfg.mode {
        if p.steps != model.num_layers() {
            return Err(Error::Dimension("mesh steps differ from the number of flow layers".into()));
        }
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut clipped = 0;
    let ckpt_path = out_dir.map(|d| d.join("checkpoint.json"));
    let mut last_good: Vec<Mat> = model.params().to_vec();
    for iter in 0..cfg.epochs {
        let z = model.base().sample(cfg.batch_size, &mut rng);
        let step = loss_and_gradient(model, energy, &cfg.mode, cfg.detach_velocity, &z);
        let (mut rec, mut grads) = match step {
            Ok(v) => v,
            Err(e) => return abort(model, &last_good, ckpt_path.as_deref(), iter, e.to_string()),
        };
        let norm = global_norm(&grads);
        if !rec.total.is_finite() || !norm.is_finite() {
            let reason = format!("non-finite loss ({}) or gradient norm ({norm})", rec.total);
            return abort(model, &last_good, ckpt_path.as_deref(), iter, reason);
        }
        if norm > cfg.clip_norm {
            clipped += 1;
            warn!("iteration {iter}: gradient norm {norm:.3e} clipped to {}", cfg.clip_norm);
            let s = cfg.clip_norm / norm;
            for g in &mut grads {
                *g = g.scale(s);
            }
        }
        last_good.clone_from_slice(model.params());
        let lr = cfg.lr0 * cfg.decay.powi(iter as i32);
        adam.step(model.params_mut(), &grads, lr);
        rec.iter = iter;
        rec.grad_norm = norm;
        if iter % 50 == 0 || iter + 1 == cfg.epochs {
            info!("iter {iter}: loss {:.6e} |g| {norm:.3e}", rec.total);
        }
        history.push(rec);
        if let Some(p) = &ckpt_path {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                model.save(p)?;
            }
        }
    }
    if let Some(p) = &ckpt_path {
        model.save(p)?;
    }
    Ok(TrainReport {
        history,
        wall_time_secs: start.elapsed().as_secs_f64(),
        clipped_iterations: clipped,
        checkpoint: ckpt_path,
    })
}

fn abort(model: &mut FlowModel, good: &[Mat], ckpt: Option<&Path>, iteration: usize, reason: String) -> Result<TrainReport> {
    model.params_mut().clone_from_slice(good);
    if let Some(p) = ckpt {
        model.save(p)?;
    }
    Err(Error::TrainingAborted { iteration, reason })
}
