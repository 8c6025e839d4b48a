//! Training objectives: the Crank–Nicolson physical-time loss and the
//! geometric action with its terminal and parametrization penalties.
//!
//! Every loss exists twice: as a plain function of diagnostics (used for
//! reporting and tests) and as a generic graph builder over [`Ops`] (used for
//! training, where it must be differentiable in the flow parameters).

use std::rc::Rc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Ops;
use crate::energy::{FreeEnergySpec, InternalEnergySpec, PairEnergyOp, PotentialValueOp};
use crate::error::{Error, Result};
use crate::flow::PathBatch;
use crate::tensor::Mat;
use crate::velocity::PathDiagnostics;

/// Added under square roots so that `d_k`, `v_k` stay differentiable at 0.
const SQRT_FLOOR: f64 = 1e-24;

/// Below this mean segment length (or energy drop) the path is treated as
/// degenerate and the parametrization penalty is 0.
const DEGENERATE: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Mesh {
    Uniform,
    Explicit { times: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalTimeConfig {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "uniform_mesh")]
    pub mesh: Mesh,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

fn uniform_mesh() -> Mesh {
    Mesh::Uniform
}

impl PhysicalTimeConfig {
    pub fn uniform(horizon: f64, steps: usize) -> Self {
        Self {
            horizon,
            steps,
            mesh: Mesh::Uniform,
            weights: None,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        match &self.mesh {
            Mesh::Uniform => (0..=self.steps)
                .map(|k| self.horizon * k as f64 / self.steps as f64)
                .collect(),
            Mesh::Explicit { times } => times.clone(),
        }
    }

    /// Validated step sizes `Δt_k`.
    pub fn steps_dt(&self) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(Error::Config("physical-time mesh needs at least one step".into()));
        }
        let t = self.times();
        if t.len() != self.steps + 1 {
            return Err(Error::Config(format!("mesh has {} points for {} steps", t.len(), self.steps)));
        }
        if t[0] != 0.0 {
            return Err(Error::Config("mesh must start at t = 0".into()));
        }
        let dt: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(k) = dt.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Config(format!("mesh step {} is not positive", k + 1)));
        }
        if matches!(self.mesh, Mesh::Uniform) && !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(dt)
    }

    pub fn omega(&self) -> Result<Vec<f64>> {
        match &self.weights {
            None => Ok(vec![1.0; self.steps]),
            Some(w) if w.len() == self.steps && w.iter().all(|v| *v > 0.0) => Ok(w.clone()),
            Some(_) => Err(Error::Config("one positive weight per step required".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParametrizationPenalty {
    ArcLength,
    ArcAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricConfig {
    pub alpha_term: f64,
    pub alpha_arc: f64,
    #[serde(default = "default_penalty")]
    pub penalty: ParametrizationPenalty,
}

fn default_penalty() -> ParametrizationPenalty {
    ParametrizationPenalty::ArcLength
}

impl GeometricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_term >= 0.0 && self.alpha_arc >= 0.0) {
            return Err(Error::Config("penalty weights must be nonnegative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Plain-value losses

/// `Σ_k ω_k Δt_k mean_i ‖Δx_i/Δt_k - (𝒱_k + 𝒱_{k-1})/2‖²`.
pub fn physical_time_loss(batch: &PathBatch, fields: &[Mat], cfg: &PhysicalTimeConfig) -> Result<f64> {
    Ok(physical_time_loss_per_segment(batch, fields, cfg)?.iter().sum())
}

/// The summands of [`physical_time_loss`], one per segment.
pub fn physical_time_loss_per_segment(batch: &PathBatch, fields: &[Mat], cfg: &PhysicalTimeConfig) -> Result<Vec<f64>> {
    let dt = cfg.steps_dt()?;
    let w = cfg.omega()?;
    let k = batch.num_layers();
    if k != cfg.steps || fields.len() != k + 1 {
        return Err(Error::Dimension(format!(
            "{k} layers, {} fields, mesh with {} steps",
            fields.len(),
            cfg.steps
        )));
    }
    let n = batch.len() as f64;
    Ok((1..=k)
        .map(|s| {
            let h = dt[s - 1];
            let x1 = batch.positions[s].as_slice();
            let x0 = batch.positions[s - 1].as_slice();
            let v1 = fields[s].as_slice();
            let v0 = fields[s - 1].as_slice();
            let mut acc = 0.0;
            for i in 0..x1.len() {
                let r = (x1[i] - x0[i]) / h - 0.5 * (v1[i] + v0[i]);
                acc += r * r;
            }
            w[s - 1] * h * acc / n
        })
        .collect())
}

/// `Σ_k d_k (v_{k-1} + v_k)/2`.
pub fn geometric_loss(diag: &PathDiagnostics) -> f64 {
    diag.d
        .iter()
        .enumerate()
        .map(|(k, d)| d * 0.5 * (diag.v[k] + diag.v[k + 1]))
        .sum()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    (m, v)
}

/// Population variance of the segment lengths over their mean.
pub fn arc_length_penalty(diag: &PathDiagnostics) -> f64 {
    if diag.d.is_empty() {
        return 0.0;
    }
    let (m, v) = mean_var(&diag.d);
    if m <= DEGENERATE {
        warn!("arc-length penalty on a degenerate path (mean segment length {m:e})");
        return 0.0;
    }
    v / m
}

/// `Var(ΔF_k) / |Mean(ΔF_k)|` over the per-segment energy changes.
pub fn arc_action_penalty(free_energy: &[f64]) -> f64 {
    if free_energy.len() < 2 {
        return 0.0;
    }
    let drops: Vec<f64> = free_energy.windows(2).map(|w| w[1] - w[0]).collect();
    let (m, v) = mean_var(&drops);
    if m.abs() <= DEGENERATE {
        warn!("arc-action penalty on a flat energy profile");
        return 0.0;
    }
    v / m.abs()
}

pub fn parametrization_penalty(diag: &PathDiagnostics, cfg: &GeometricConfig) -> f64 {
    match cfg.penalty {
        ParametrizationPenalty::ArcLength => arc_length_penalty(diag),
        ParametrizationPenalty::ArcAction => arc_action_penalty(&diag.free_energy),
    }
}

/// `Ĵ + α_term 𝓕(p_K) + α_arc · penalty`.
pub fn total_geometric_loss(diag: &PathDiagnostics, terminal_energy: f64, cfg: &GeometricConfig) -> f64 {
    let mut total = geometric_loss(diag);
    if cfg.alpha_term != 0.0 {
        total += cfg.alpha_term * terminal_energy;
    }
    if cfg.alpha_arc != 0.0 {
        total += cfg.alpha_arc * parametrization_penalty(diag, cfg);
    }
    total
}

// ---------------------------------------------------------------------------
// Graph builders

/// `sqrt(mean_i ‖row_i‖²)` as a `1 x 1` node.
pub fn rms_node<O: Ops>(o: &mut O, m: &O::V) -> O::V {
    let n = o.value(m).rows() as f64;
    let s = o.square(m);
    let s = o.sum_all(&s);
    let s = o.scale(&s, 1.0 / n);
    let s = o.add_scalar(&s, SQRT_FLOOR);
    o.sqrt(&s)
}

/// Free-energy estimate of one layer as a `1 x 1` node.
pub fn free_energy_node<O: Ops>(o: &mut O, spec: &FreeEnergySpec, x: &O::V, log_q: &O::V) -> Result<O::V> {
    let n = o.value(x).rows();
    let m = spec.total_mass;
    let mut local: Option<O::V> = None;
    if let Some(internal) = &spec.internal {
        let lp = o.add_scalar(log_q, spec.log_mass());
        let e = match internal {
            InternalEnergySpec::Entropy { beta } => o.scale(&lp, 1.0 / beta),
            InternalEnergySpec::PowerLaw { exponent, beta } => {
                let a = o.scale(&lp, exponent - 1.0);
                let a = o.exp(&a);
                o.scale(&a, 1.0 / ((exponent - 1.0) * beta))
            }
        };
        local = Some(e);
    }
    if !spec.potential.is_none() {
        let v = o.custom(Rc::new(PotentialValueOp(spec.potential.clone())), &[x]);
        local = Some(match local {
            Some(p) => o.add(&p, &v),
            None => v,
        });
    }
    let mut total = match local {
        Some(l) => {
            let mean = o.mean_all(&l);
            Some(o.scale(&mean, m))
        }
        None => None,
    };
    if spec.has_kernel() {
        if n < 2 {
            return Err(Error::Config("interaction energy needs at least two particles".into()));
        }
        let w = o.custom(Rc::new(PairEnergyOp(spec.kernel.clone())), &[x]);
        let w = o.scale(&w, 0.5 * m * m);
        total = Some(match total {
            Some(p) => o.add(&p, &w),
            None => w,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => o.constant(Mat::scalar(0.0)),
    })
}

/// Graph form of [`physical_time_loss`].
pub fn physical_time_loss_node<O: Ops>(
    o: &mut O,
    positions: &[O::V],
    fields: &[O::V],
    cfg: &PhysicalTimeConfig,
) -> Result<O::V> {
    let dt = cfg.steps_dt()?;
    let w = cfg.omega()?;
    let k = positions.len() - 1;
    if k != cfg.steps || fields.len() != k + 1 {
        return Err(Error::Dimension("path and mesh lengths differ".into()));
    }
    let n = o.value(&positions[0]).rows() as f64;
    let mut total: Option<O::V> = None;
    for s in 1..=k {
        let h = dt[s - 1];
        let dx = o.sub(&positions[s], &positions[s - 1]);
        let dx = o.scale(&dx, 1.0 / h);
        let vb = o.add(&fields[s], &fields[s - 1]);
        let vb = o.scale(&vb, 0.5);
        let r = o.sub(&dx, &vb);
        let r = o.square(&r);
        let r = o.sum_all(&r);
        let term = o.scale(&r, w[s - 1] * h / n);
        total = Some(match total {
            Some(p) => o.add(&p, &term),
            None => term,
        });
    }
    Ok(total.expect("at least one step"))
}

/// Nodes for the parts of the total geometric loss.
pub struct GeometricParts<V> {
    pub j: V,
    pub terminal: V,
    pub penalty: V,
    pub total: V,
    pub d: Vec<V>,
    pub v: Vec<V>,
}

fn mean_var_nodes<O: Ops>(o: &mut O, xs: &[O::V]) -> (O::V, O::V) {
    let n = xs.len() as f64;
    let mut s = xs[0].clone();
    for x in &xs[1..] {
        s = o.add(&s, x);
    }
    let mean = o.scale(&s, 1.0 / n);
    let mut var: Option<O::V> = None;
    for x in xs {
        let dev = o.sub(x, &mean);
        let sq = o.square(&dev);
        var = Some(match var {
            Some(p) => o.add(&p, &sq),
            None => sq,
        });
    }
    let var = o.scale(&var.expect("non-empty"), 1.0 / n);
    (mean, var)
}

/// Graph form of [`total_geometric_loss`]. `energies` must hold every
/// layer's free energy when the arc-action penalty is active and at least
/// the terminal one otherwise (`None` entries are skipped).
pub fn geometric_loss_node<O: Ops>(
    o: &mut O,
    positions: &[O::V],
    fields: &[O::V],
    energies: &[Option<O::V>],
    cfg: &GeometricConfig,
) -> Result<GeometricParts<O::V>> {
    let k = positions.len() - 1;
    let d: Vec<O::V> = (1..=k)
        .map(|s| {
            let dx = o.sub(&positions[s], &positions[s - 1]);
            rms_node(o, &dx)
        })
        .collect();
    let v: Vec<O::V> = fields.iter().map(|f| rms_node(o, f)).collect();
    let mut j: Option<O::V> = None;
    for s in 1..=k {
        let vb = o.add(&v[s - 1], &v[s]);
        let vb = o.scale(&vb, 0.5);
        let t = o.mul(&d[s - 1], &vb);
        j = Some(match j {
            Some(p) => o.add(&p, &t),
            None => t,
        });
    }
    let j = j.expect("at least one segment");
    let zero = o.constant(Mat::scalar(0.0));
    let terminal = match energies.get(k).and_then(|e| e.clone()) {
        Some(e) => e,
        None if cfg.alpha_term != 0.0 => {
            return Err(Error::Config("terminal energy missing".into()));
        }
        None => zero.clone(),
    };
    let penalty = if cfg.alpha_arc == 0.0 || k < 2 {
        zero.clone()
    } else {
        match cfg.penalty {
            ParametrizationPenalty::ArcLength => {
                let (mean, var) = mean_var_nodes(o, &d);
                if o.value(&mean).item() <= DEGENERATE {
                    zero.clone()
                } else {
                    o.div(&var, &mean)
                }
            }
            ParametrizationPenalty::ArcAction => {
                let es: Option<Vec<O::V>> = energies.iter().cloned().collect();
                let es = es.ok_or_else(|| Error::Config("arc-action penalty needs every layer energy".into()))?;
                let drops: Vec<O::V> = es.windows(2).map(|w| o.sub(&w[1], &w[0])).collect();
                let (mean, var) = mean_var_nodes(o, &drops);
                if o.value(&mean).item().abs() <= DEGENERATE {
                    zero.clone()
                } else {
                    let am = o.abs(&mean);
                    o.div(&var, &am)
                }
            }
        }
    };
    let mut total = j.clone();
    if cfg.alpha_term != 0.0 {
        let t = o.scale(&terminal, cfg.alpha_term);
        total = o.add(&total, &t);
    }
    if cfg.alpha_arc != 0.0 {
        let p = o.scale(&penalty, cfg.alpha_arc);
        total = o.add(&total, &p);
    }
    Ok(GeometricParts {
        j,
        terminal,
        penalty,
        total,
        d,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(d: Vec<f64>, v: Vec<f64>) -> PathDiagnostics {
        PathDiagnostics {
            cosine: vec![None; d.len()],
            d,
            v,
            free_energy: vec![],
        }
    }

    #[test]
    fn arithmetic_examples() {
        assert_eq!(geometric_loss(&diag(vec![1.0, 1.0], vec![2.0, 2.0, 2.0])), 4.0);
        assert_eq!(geometric_loss(&diag(vec![0.0, 0.0], vec![2.0, 1.0, 3.0])), 0.0);
        assert_eq!(arc_length_penalty(&diag(vec![1.0, 3.0], vec![0.0; 3])), 0.5);
        assert_eq!(arc_length_penalty(&diag(vec![0.7; 5], vec![0.0; 6])), 0.0);
        let p = arc_action_penalty(&[3.0, 1.0, 0.0]);
        assert!((p - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(arc_action_penalty(&[3.0, 2.0, 1.0, 0.0]), 0.0);
    }

    #[test]
    fn total_loss_combines_parts() {
        let mut dg = diag(vec![1.0, 3.0], vec![1.0, 2.0, 0.5]);
        dg.free_energy = vec![2.0, 0.0, -1.0];
        let cfg0 = GeometricConfig { alpha_term: 0.0, alpha_arc: 0.0, penalty: ParametrizationPenalty::ArcLength };
        assert_eq!(total_geometric_loss(&dg, -1.0, &cfg0), geometric_loss(&dg));
        let cfg = GeometricConfig { alpha_term: 2.0, alpha_arc: 0.5, penalty: ParametrizationPenalty::ArcAction };
        let expect = geometric_loss(&dg) + 2.0 * -1.0 + 0.5 * arc_action_penalty(&dg.free_energy);
        assert_eq!(total_geometric_loss(&dg, -1.0, &cfg), expect);
    }

    #[test]
    fn physical_time_loss_vanishes_for_exact_translation() {
        let c = 0.7;
        let cfg = PhysicalTimeConfig::uniform(1.0, 4);
        let z = Mat::column(&[0.0, 1.0, -2.0]);
        let positions: Vec<Mat> = (0..=4).map(|k| z.map(|v| v + c * k as f64 * 0.25)).collect();
        let batch = PathBatch {
            z: z.clone(),
            log_densities: vec![vec![0.0; 3]; 5],
            layer_logdets: vec![vec![0.0; 3]; 4],
            positions,
        };
        let fields: Vec<Mat> = (0..=4).map(|_| Mat::filled(3, 1, c)).collect();
        assert!(physical_time_loss(&batch, &fields, &cfg).unwrap().abs() < 1e-28);
        let bad = PhysicalTimeConfig {
            mesh: Mesh::Explicit { times: vec![0.0, 0.5, 0.5, 0.8, 1.0] },
            ..cfg
        };
        assert!(physical_time_loss(&batch, &fields, &bad).is_err());
    }
}
