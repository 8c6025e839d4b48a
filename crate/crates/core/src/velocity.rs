//! Empirical driving force `𝒱_N[p_k]` and the per-layer path diagnostics.

use std::fmt::Write as _;
use std::rc::Rc;

use crate::autodiff::{Eager, Ops};
use crate::energy::{
    free_energy_estimate, FreeEnergySpec, InternalEnergySpec, PairForceOp, PotentialGradOp,
};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, PathBatch};
use crate::tensor::Mat;

/// Velocity of every particle of one layer, generic over the execution mode.
///
/// `log_q` is the `N x 1` column of probability log-densities; the physical
/// density is `M q`. `score` is required when an internal energy is present.
pub fn velocity_field<O: Ops>(
    o: &mut O,
    spec: &FreeEnergySpec,
    x: &O::V,
    log_q: &O::V,
    score: Option<&O::V>,
) -> Result<O::V> {
    let (n, d) = o.value(x).shape();
    let mut v: Option<O::V> = None;
    let mut acc = |o: &mut O, term: O::V| {
        v = Some(match v.take() {
            Some(p) => o.add(&p, &term),
            None => term,
        });
    };
    if let Some(internal) = &spec.internal {
        let s = score.ok_or_else(|| Error::Config("internal energy needs the spatial score".into()))?;
        let term = match internal {
            InternalEnergySpec::Entropy { beta } => o.scale(s, -1.0 / beta),
            InternalEnergySpec::PowerLaw { exponent: m, beta } => {
                // -(m/β) p^{m-1} ∇log p with p^{m-1} = exp((m-1)(log M + log q))
                let lp = o.add_scalar(log_q, spec.log_mass());
                let e = o.scale(&lp, m - 1.0);
                let c = o.exp(&e);
                let c = o.scale(&c, -m / beta);
                o.mul_col(s, &c)
            }
        };
        acc(o, term);
    }
    if !spec.potential.is_none() {
        let g = o.custom(Rc::new(PotentialGradOp(spec.potential.clone())), &[x]);
        let term = o.neg(&g);
        acc(o, term);
    }
    if spec.has_kernel() {
        if n < 2 {
            return Err(Error::Config("interaction term needs at least two particles".into()));
        }
        let op = PairForceOp {
            kernel: spec.kernel.clone(),
            weight: -spec.total_mass / n as f64,
        };
        let term = o.custom(Rc::new(op), &[x]);
        acc(o, term);
    }
    Ok(match v {
        Some(v) => v,
        None => o.constant(Mat::zeros(n, d)),
    })
}

fn check_finite(m: &Mat, what: &'static str, layer: usize) -> Result<()> {
    match (0..m.rows()).find(|&i| m.row(i).iter().any(|v| !v.is_finite())) {
        Some(particle) => Err(Error::NonFinite { what, layer, particle }),
        None => Ok(()),
    }
}

/// `𝒱_N[p_k](x_k^{(i)})` for every particle of layer `k`.
pub fn empirical_velocity(
    batch: &PathBatch,
    scores: Option<&[Mat]>,
    spec: &FreeEnergySpec,
    k: usize,
) -> Result<Mat> {
    let mut o = Eager;
    let x = Rc::new(batch.positions[k].clone());
    let lq = Rc::new(Mat::column(&batch.log_densities[k]));
    let s = scores.map(|s| Rc::new(s[k].clone()));
    if spec.internal.is_some() {
        if let Some(s) = &s {
            check_finite(s, "score", k)?;
        }
        check_finite(&lq, "log density", k)?;
    }
    let v = velocity_field(&mut o, spec, &x, &lq, s.as_ref())?;
    check_finite(&v, "velocity", k)?;
    Ok(Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone()))
}

/// Velocity fields of every layer; scores are computed when needed.
pub fn path_velocities(model: &FlowModel, batch: &PathBatch, spec: &FreeEnergySpec) -> Result<Vec<Mat>> {
    let scores = if spec.has_internal() {
        Some(model.scores(&batch.z)?)
    } else {
        None
    };
    (0..=batch.num_layers())
        .map(|k| empirical_velocity(batch, scores.as_deref(), spec, k))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathDiagnostics {
    /// `K` segment lengths.
    pub d: Vec<f64>,
    /// `K+1` velocity norms.
    pub v: Vec<f64>,
    /// `K` alignments; `None` when a segment or its velocity vanishes.
    pub cosine: Vec<Option<f64>>,
    /// `K+1` free-energy estimates (empty when not evaluated).
    pub free_energy: Vec<f64>,
}

fn rms_rows(m: &Mat) -> f64 {
    (m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.rows() as f64).sqrt()
}

/// Batch estimators `d_k`, `v_k` and the cosine alignment of each segment
/// against the average of its two endpoint velocity fields.
pub fn segment_and_velocity_norms(batch: &PathBatch, fields: &[Mat]) -> Result<PathDiagnostics> {
    let k = batch.num_layers();
    if fields.len() != k + 1 {
        return Err(Error::Dimension(format!("{} velocity fields for {} layers", fields.len(), k + 1)));
    }
    let n = batch.len() as f64;
    let v: Vec<f64> = fields.iter().map(rms_rows).collect();
    let mut d = Vec::with_capacity(k);
    let mut cosine = Vec::with_capacity(k);
    for s in 1..=k {
        let dx = batch.positions[s].sub(&batch.positions[s - 1]);
        let vbar = fields[s].add(&fields[s - 1]).scale(0.5);
        let dk = rms_rows(&dx);
        let vb = rms_rows(&vbar);
        d.push(dk);
        let dot = dx.as_slice().iter().zip(vbar.as_slice()).map(|(a, b)| a * b).sum::<f64>() / n;
        cosine.push(if dk > 0.0 && vb > 0.0 {
            Some((dot / (dk * vb)).clamp(-1.0, 1.0))
        } else {
            None
        });
    }
    Ok(PathDiagnostics {
        d,
        v,
        cosine,
        free_energy: Vec::new(),
    })
}

/// Free energy of every layer of `batch`.
pub fn layer_free_energies(batch: &PathBatch, spec: &FreeEnergySpec) -> Result<Vec<f64>> {
    (0..=batch.num_layers())
        .map(|k| free_energy_estimate(&batch.positions[k], &batch.log_densities[k], spec))
        .collect()
}

/// Pushes `z` forward and evaluates every diagnostic.
pub fn diagnose(model: &FlowModel, z: &Mat, spec: &FreeEnergySpec) -> Result<(PathBatch, Vec<Mat>, PathDiagnostics)> {
    let batch = model.push_forward(z)?;
    let fields = path_velocities(model, &batch, spec)?;
    let mut diag = segment_and_velocity_norms(&batch, &fields)?;
    diag.free_energy = layer_free_energies(&batch, spec)?;
    Ok((batch, fields, diag))
}

/// Full-precision number formatting shared by every text artifact.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per layer: `k, d_k, v_k, cosine_k, free_energy_k, t_k`. Layer 0
/// has no segment, so its `d` and `cosine` fields are empty.
pub fn diagnostics_csv(diag: &PathDiagnostics, times: Option<&[f64]>) -> String {
    let mut out = String::from("k,d,v,cosine,free_energy,t\n");
    for k in 0..diag.v.len() {
        let d = if k == 0 { String::new() } else { fmt17(diag.d[k - 1]) };
        let c = if k == 0 {
            String::new()
        } else {
            diag.cosine[k - 1].map_or_else(|| "undefined".to_string(), fmt17)
        };
        let f = diag.free_energy.get(k).map_or_else(String::new, |v| fmt17(*v));
        let t = times.and_then(|t| t.get(k)).map_or_else(String::new, |v| fmt17(*v));
        let _ = writeln!(out, "{k},{d},{},{c},{f},{t}", fmt17(diag.v[k]));
    }
    out
}
