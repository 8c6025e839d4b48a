//! Stacked coupling flow `Φ_K = Ψ_K ∘ … ∘ Ψ_1`. Each path layer `Ψ_k` is two
//! coupling sub-blocks with complementary masks, so the prefix compositions
//! give the discrete path images `p_k = (Φ_k)_# ρ₀`.

mod base;
pub mod coupling;

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Ops, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use base::BaseDistribution;
pub use coupling::{Activation, CouplingKind};
use coupling::Coupling;

/// Rows per tape when scores are evaluated outside training.
const SCORE_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowArch {
    /// Number of path layers `K`.
    pub layers: usize,
    pub hidden_width: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "CouplingKind::affine")]
    pub coupling: CouplingKind,
}

fn default_hidden_layers() -> usize {
    2
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl FlowArch {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("flow needs at least one path layer".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if let CouplingKind::Spline { bins, bound, min_bin, min_derivative } = &self.coupling {
            if *bins < 2 || !(*bound > 0.0) {
                return Err(Error::Config("spline needs bins >= 2 and bound > 0".into()));
            }
            if !(*min_bin > 0.0 && min_bin * (*bins as f64) < 1.0) || !(*min_derivative > 0.0 && *min_derivative < 1.0) {
                return Err(Error::Config("spline minimum bin/derivative out of range".into()));
            }
        }
        if let CouplingKind::Affine { scale_amplitude } = &self.coupling {
            if !(*scale_amplitude > 0.0) {
                return Err(Error::Config("scale amplitude must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One sampled batch pushed through every prefix map.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub z: Mat,
    /// `K+1` layers of `N x d` positions; `positions[0] = z`.
    pub positions: Vec<Mat>,
    /// `K+1` layers of per-particle `log p_k(x_k)`.
    pub log_densities: Vec<Vec<f64>>,
    /// `K` layers of per-particle `log |det ∂Ψ_k|`.
    pub layer_logdets: Vec<Vec<f64>>,
}

impl PathBatch {
    pub fn num_layers(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }
}

/// A batch recorded on a tape, differentiable in the flow parameters.
pub struct TapePath {
    pub params: Vec<Var>,
    pub positions: Vec<Var>,
    /// `N x 1` columns.
    pub log_densities: Vec<Var>,
    /// Spatial scores `∇ log p_k` per layer when requested.
    pub scores: Option<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    dim: usize,
    base: BaseDistribution,
    arch: FlowArch,
    couplings: Vec<Coupling>,
    params: Vec<Mat>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    dim: usize,
    arch: FlowArch,
    base: BaseDistribution,
    params: Vec<Vec<f64>>,
}

const CHECKPOINT_FORMAT: &str = "wgpath-flow";
const CHECKPOINT_VERSION: u32 = 1;

impl FlowModel {
    /// Builds a model whose every layer is the identity map: hidden weights
    /// are random, the output layer of every conditioner is zero.
    pub fn new<R: Rng + ?Sized>(base: BaseDistribution, arch: FlowArch, rng: &mut R) -> Result<Self> {
        base.validate()?;
        arch.validate()?;
        let dim = base.dim();
        let couplings = Self::masks(dim, arch.layers);
        let mut params = Vec::new();
        for c in &couplings {
            let mut fan_in = c.a.len();
            for l in 0..=arch.hidden_layers {
                let last = l == arch.hidden_layers;
                let fan_out = if last {
                    c.b.len() * arch.coupling.outputs_per_coordinate()
                } else {
                    arch.hidden_width
                };
                let w = if last {
                    Mat::zeros(fan_in, fan_out)
                } else {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
                };
                params.push(w);
                params.push(Mat::zeros(1, fan_out));
                fan_in = fan_out;
            }
        }
        Ok(Self {
            dim,
            base,
            arch,
            couplings,
            params,
        })
    }

    fn masks(dim: usize, layers: usize) -> Vec<Coupling> {
        let even: Vec<usize> = (0..dim).step_by(2).collect();
        let odd: Vec<usize> = (1..dim).step_by(2).collect();
        let mut out = Vec::with_capacity(2 * layers);
        for _ in 0..layers {
            if dim == 1 {
                // Nothing to condition on: both sub-blocks act on the single
                // coordinate with a learned constant map.
                out.push(Coupling::new(1, vec![], vec![0]));
                out.push(Coupling::new(1, vec![], vec![0]));
            } else {
                out.push(Coupling::new(dim, even.clone(), odd.clone()));
                out.push(Coupling::new(dim, odd.clone(), even.clone()));
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.arch.layers
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    fn params_per_coupling(&self) -> usize {
        2 * (self.arch.hidden_layers + 1)
    }

    /// Adds `N(0, scale²)` noise to every parameter (tests and ablations).
    pub fn perturb<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for p in &mut self.params {
            for v in p.as_mut_slice() {
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                *v += scale * e;
            }
        }
    }

    fn forward_all<O: Ops>(&self, o: &mut O, params: &[O::V], z: &O::V) -> Vec<coupling::BlockTrace<O::V>> {
        let per = self.params_per_coupling();
        let mut u = z.clone();
        let mut traces = Vec::with_capacity(self.couplings.len());
        for (i, c) in self.couplings.iter().enumerate() {
            let p = &params[i * per..(i + 1) * per];
            let t = coupling::forward(o, &self.arch.coupling, self.arch.activation, c, p, &u);
            u = t.y.clone();
            traces.push(t);
        }
        traces
    }

    fn check_input(&self, z: &Mat) -> Result<()> {
        if z.cols() != self.dim {
            return Err(Error::Dimension(format!("expected {} columns, got {}", self.dim, z.cols())));
        }
        if let Some(i) = (0..z.rows()).find(|&i| z.row(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: "base sample",
                layer: 0,
                particle: i,
            });
        }
        Ok(())
    }

    /// Pushes base samples through every prefix map `Φ_k`.
    pub fn push_forward(&self, z: &Mat) -> Result<PathBatch> {
        self.check_input(z)?;
        let mut o = Eager;
        let params: Vec<Rc<Mat>> = self.params.iter().map(|p| Rc::new(p.clone())).collect();
        let traces = self.forward_all(&mut o, &params, &Rc::new(z.clone()));
        let mut positions = vec![z.clone()];
        let mut log_densities = vec![self.base.log_density_batch(z)];
        let mut layer_logdets = Vec::with_capacity(self.num_layers());
        for k in 0..self.num_layers() {
            let mut ld = vec![0.0; z.rows()];
            for t in &traces[2 * k..2 * k + 2] {
                for (i, s) in t.ell.sum_cols().as_slice().iter().enumerate() {
                    ld[i] += s;
                }
            }
            let x = (*traces[2 * k + 1].y).clone();
            if let Some(i) = (0..x.rows()).find(|&i| !ld[i].is_finite() || x.row(i).iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    what: "flow output",
                    layer: k + 1,
                    particle: i,
                });
            }
            let prev = log_densities.last().expect("base layer present");
            let lp: Vec<f64> = prev.iter().zip(&ld).map(|(a, b)| a - b).collect();
            positions.push(x);
            log_densities.push(lp);
            layer_logdets.push(ld);
        }
        Ok(PathBatch {
            z: z.clone(),
            positions,
            log_densities,
            layer_logdets,
        })
    }

    /// `Φ_k^{-1}(x)`.
    pub fn inverse(&self, k: usize, x: &Mat) -> Result<Mat> {
        if k > self.num_layers() {
            return Err(Error::Dimension(format!("layer {k} exceeds K = {}", self.num_layers())));
        }
        self.check_input(x)?;
        let per = self.params_per_coupling();
        let mut y = x.clone();
        for i in (0..2 * k).rev() {
            let p: Vec<Rc<Mat>> = self.params[i * per..(i + 1) * per].iter().map(|m| Rc::new(m.clone())).collect();
            y = coupling::inverse(&self.arch.coupling, self.arch.activation, &self.couplings[i], &p, &y);
        }
        Ok(y)
    }

    /// `log p_k(x)` at arbitrary points, through the inverse map.
    pub fn log_density(&self, k: usize, x: &Mat) -> Result<Vec<f64>> {
        let z = self.inverse(k, x)?;
        let batch = self.push_forward(&z)?;
        Ok(batch.log_densities[k].clone())
    }

    /// Records the path for `z` on `tape`. With `with_scores` the spatial
    /// scores of every layer are also recorded, as differentiable functions
    /// of the parameters.
    pub fn record(&self, tape: &mut Tape, z: &Mat, with_scores: bool) -> Result<TapePath> {
        self.check_input(z)?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        self.record_with(tape, params, z, with_scores)
    }

    /// Like [`FlowModel::record`] with parameters already on the tape.
    pub fn record_with(&self, tape: &mut Tape, params: Vec<Var>, z: &Mat, with_scores: bool) -> Result<TapePath> {
        let base_score = if with_scores {
            if !self.base.has_smooth_score() {
                return Err(Error::Unsupported(
                    "scores requested for a base distribution without a smooth score".into(),
                ));
            }
            Some(self.base.score_batch(z)?)
        } else {
            None
        };
        let zv = tape.leaf(z.clone());
        let traces = self.forward_all(tape, &params, &zv);
        let lq0 = tape.leaf(Mat::column(&self.base.log_density_batch(z)));
        let mut positions = vec![zv];
        let mut log_densities = vec![lq0];
        let mut lq = lq0;
        for k in 0..self.num_layers() {
            for t in &traces[2 * k..2 * k + 2] {
                let s = tape.sum_cols(&t.ell);
                lq = tape.sub(&lq, &s);
            }
            positions.push(traces[2 * k + 1].y);
            log_densities.push(lq);
        }
        let scores = match base_score {
            None => None,
            Some(s0) => {
                let mut g = tape.leaf(s0);
                let mut out = vec![g];
                for (i, t) in traces.iter().enumerate() {
                    g = score_step(tape, &self.couplings[i], t, g);
                    if i % 2 == 1 {
                        out.push(g);
                    }
                }
                Some(out)
            }
        };
        Ok(TapePath {
            params,
            positions,
            log_densities,
            scores,
        })
    }

    /// Spatial scores `∇ log p_k(x_k)` of every layer, evaluated in chunks.
    pub fn scores(&self, z: &Mat) -> Result<Vec<Mat>> {
        let n = z.rows();
        let k = self.num_layers();
        let mut out: Vec<Mat> = (0..=k).map(|_| Mat::zeros(n, self.dim)).collect();
        let mut start = 0;
        while start < n {
            let len = SCORE_CHUNK.min(n - start);
            let zc = z.slice_rows(start, len);
            let mut tape = Tape::new();
            let path = self.record(&mut tape, &zc, true)?;
            for (layer, s) in path.scores.expect("scores requested").iter().enumerate() {
                let v = tape.val(*s);
                for r in 0..len {
                    out[layer].row_mut(start + r).copy_from_slice(v.row(r));
                }
            }
            start += len;
        }
        for (layer, s) in out.iter().enumerate() {
            if let Some(i) = (0..n).find(|&i| s.row(i).iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    what: "score",
                    layer,
                    particle: i,
                });
            }
        }
        Ok(out)
    }

    /// Score of layer `k` at `x` by central differences of `log p_k`.
    pub fn score_fd(&self, k: usize, x: &Mat, h: f64) -> Result<Mat> {
        let mut out = Mat::zeros(x.rows(), x.cols());
        for c in 0..x.cols() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            for r in 0..x.rows() {
                xp[(r, c)] += h;
                xm[(r, c)] -= h;
            }
            let lp = self.log_density(k, &xp)?;
            let lm = self.log_density(k, &xm)?;
            for r in 0..x.rows() {
                out[(r, c)] = (lp[r] - lm[r]) / (2.0 * h);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dim: self.dim,
            arch: self.arch.clone(),
            base: self.base.clone(),
            params: self.params.iter().map(|p| p.as_slice().to_vec()).collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::new(ck.base, ck.arch, &mut rng)?;
        if model.dim != ck.dim || model.params.len() != ck.params.len() {
            return Err(Error::Config("checkpoint layout does not match its architecture".into()));
        }
        for (p, v) in model.params.iter_mut().zip(ck.params) {
            if v.len() != p.len() {
                return Err(Error::Config("checkpoint parameter size mismatch".into()));
            }
            p.as_mut_slice().copy_from_slice(&v);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Transports the score through one sub-block `u ↦ y`:
/// `h_b = (g_b - ∂_b Σℓ) e^{-ℓ}`, `h_a = g_a - ∂_a Σℓ - (∂y_b/∂u_a)ᵀ h_b`.
fn score_step(tape: &mut Tape, c: &Coupling, t: &coupling::BlockTrace<Var>, g: Var) -> Var {
    let ones = tape.leaf(Mat::filled(tape.val(t.ell).rows(), tape.val(t.ell).cols(), 1.0));
    let g1 = tape.grad_graph(&[t.ell], &[ones], &[t.ua, t.ub]);
    let pa = tape.leaf(c.pa.clone());
    let pb = tape.leaf(c.pb.clone());
    let ga = tape.matmul(&g, &pa);
    let gb = tape.matmul(&g, &pb);
    let rb = tape.sub(&gb, &g1[1]);
    let nl = tape.neg(&t.ell);
    let e = tape.exp(&nl);
    let hb = tape.mul(&rb, &e);
    let g2 = tape.grad_graph(&[t.yb], &[hb], &[t.ua]);
    let ha = tape.sub(&ga, &g1[0]);
    let ha = tape.sub(&ha, &g2[0]);
    let a = tape.matmul_t(&ha, false, &pa, true);
    let b = tape.matmul_t(&hb, false, &pb, true);
    tape.add(&a, &b)
}
