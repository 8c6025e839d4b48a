//! Coupling sub-blocks. A sub-block splits coordinates into a conditioning
//! part `a` (left unchanged) and a transformed part `b`; an MLP of `u_a`
//! parametrizes an elementwise monotone map of `u_b`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Ops};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Silu,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum CouplingKind {
    /// `y_b = u_b · exp(s) + t` with `s = A tanh(raw / A)`.
    Affine {
        #[serde(default = "default_scale_amplitude")]
        scale_amplitude: f64,
    },
    /// Monotone rational-quadratic spline on `[-bound, bound]`, identity
    /// outside.
    Spline {
        #[serde(default = "default_bins")]
        bins: usize,
        #[serde(default = "default_bound")]
        bound: f64,
        #[serde(default = "default_min")]
        min_bin: f64,
        #[serde(default = "default_min")]
        min_derivative: f64,
    },
}

fn default_scale_amplitude() -> f64 {
    3.0
}
fn default_bins() -> usize {
    8
}
fn default_bound() -> f64 {
    6.0
}
fn default_min() -> f64 {
    1e-3
}

impl CouplingKind {
    pub fn affine() -> Self {
        Self::Affine {
            scale_amplitude: default_scale_amplitude(),
        }
    }

    pub fn spline(bins: usize, bound: f64) -> Self {
        Self::Spline {
            bins,
            bound,
            min_bin: default_min(),
            min_derivative: default_min(),
        }
    }

    /// Conditioner outputs per transformed coordinate.
    pub fn outputs_per_coordinate(&self) -> usize {
        match self {
            Self::Affine { .. } => 2,
            Self::Spline { bins, .. } => 3 * bins - 1,
        }
    }
}

pub fn activate<O: Ops>(o: &mut O, act: Activation, x: &O::V) -> O::V {
    match act {
        Activation::Tanh => o.tanh(x),
        Activation::Silu => {
            let s = o.sigmoid(x);
            o.mul(x, &s)
        }
        Activation::LeakyRelu => o.leaky_relu(x, LEAKY_SLOPE),
    }
}

/// MLP with parameters `[W₀, b₀, W₁, b₁, …]`; no activation after the last
/// affine map.
pub fn mlp<O: Ops>(o: &mut O, act: Activation, params: &[O::V], x: &O::V) -> O::V {
    let layers = params.len() / 2;
    let mut h = x.clone();
    for l in 0..layers {
        let z = o.matmul(&h, &params[2 * l]);
        h = o.add_row(&z, &params[2 * l + 1]);
        if l + 1 < layers {
            h = activate(o, act, &h);
        }
    }
    h
}

/// Static description of one coupling sub-block.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    /// Selection matrices `d x |a|` and `d x |b|`.
    pub pa: Mat,
    pub pb: Mat,
}

impl Coupling {
    pub fn new(dim: usize, a: Vec<usize>, b: Vec<usize>) -> Self {
        let sel = |idx: &[usize]| {
            let mut m = Mat::zeros(dim, idx.len());
            for (c, &i) in idx.iter().enumerate() {
                m[(i, c)] = 1.0;
            }
            m
        };
        Self {
            pa: sel(&a),
            pb: sel(&b),
            a,
            b,
        }
    }
}

/// Tensors produced by one sub-block in the forward direction.
pub struct BlockTrace<V> {
    pub ua: V,
    pub ub: V,
    pub yb: V,
    /// Per-coordinate log-derivatives, `N x |b|`.
    pub ell: V,
    pub y: V,
}

pub fn forward<O: Ops>(
    o: &mut O,
    kind: &CouplingKind,
    act: Activation,
    c: &Coupling,
    params: &[O::V],
    u: &O::V,
) -> BlockTrace<O::V> {
    let pa = o.constant(c.pa.clone());
    let pb = o.constant(c.pb.clone());
    let ua = o.matmul(u, &pa);
    let ub = o.matmul(u, &pb);
    let raw = mlp(o, act, params, &ua);
    let nb = c.b.len();
    let (yb, ell) = match kind {
        CouplingKind::Affine { scale_amplitude } => {
            let sr = o.slice_cols(&raw, 0, nb);
            let sr = o.scale(&sr, 1.0 / scale_amplitude);
            let s = o.tanh(&sr);
            let s = o.scale(&s, *scale_amplitude);
            let t = o.slice_cols(&raw, nb, nb);
            let es = o.exp(&s);
            let m = o.mul(&ub, &es);
            (o.add(&m, &t), s)
        }
        CouplingKind::Spline { .. } => {
            let per = kind.outputs_per_coordinate();
            let mut yb: Option<O::V> = None;
            let mut ell: Option<O::V> = None;
            for j in 0..nb {
                let rj = o.slice_cols(&raw, j * per, per);
                let xj = o.slice_cols(&ub, j, 1);
                let (kx, ky, kd) = rq_knots(o, kind, &rj);
                let (yj, lj) = rq_forward(o, kind, &xj, &kx, &ky, &kd);
                let yj = o.pad_cols(&yj, j, nb);
                let lj = o.pad_cols(&lj, j, nb);
                yb = Some(match yb {
                    Some(p) => o.add(&p, &yj),
                    None => yj,
                });
                ell = Some(match ell {
                    Some(p) => o.add(&p, &lj),
                    None => lj,
                });
            }
            (yb.expect("non-empty transformed part"), ell.expect("non-empty"))
        }
    };
    let ya = o.matmul_t(&ua, false, &pa, true);
    let yb_full = o.matmul_t(&yb, false, &pb, true);
    let y = o.add(&ya, &yb_full);
    BlockTrace { ua, ub, yb, ell, y }
}

/// Row-wise softmax.
fn softmax<O: Ops>(o: &mut O, x: &O::V) -> O::V {
    let xv = o.value(x);
    let (n, k) = xv.shape();
    let mx = Mat::from_fn(n, 1, |r, _| xv.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let mx = o.constant(mx);
    let mxb = o.bcast_cols(&mx, k);
    let sh = o.sub(x, &mxb);
    let e = o.exp(&sh);
    let s = o.sum_cols(&e);
    let sb = o.bcast_cols(&s, k);
    o.div(&e, &sb)
}

/// Knot positions, knot values and knot derivatives, each `N x (K+1)`.
pub fn rq_knots<O: Ops>(o: &mut O, kind: &CouplingKind, raw: &O::V) -> (O::V, O::V, O::V) {
    let CouplingKind::Spline { bins, bound, min_bin, min_derivative } = *kind else {
        unreachable!("spline knots requested for a non-spline coupling")
    };
    let n = o.value(raw).rows();
    let knots = |o: &mut O, start: usize| {
        let r = o.slice_cols(raw, start, bins);
        let sm = softmax(o, &r);
        let w = o.scale(&sm, 1.0 - min_bin * bins as f64);
        let w = o.add_scalar(&w, min_bin);
        let c = o.cumsum(&w);
        let c = o.pad_cols(&c, 1, bins + 1);
        let c = o.scale(&c, 2.0 * bound);
        o.add_scalar(&c, -bound)
    };
    let kx = knots(o, 0);
    let ky = knots(o, bins);
    let shift = ((1.0 - min_derivative).exp() - 1.0).ln();
    let dr = o.slice_cols(raw, 2 * bins, bins - 1);
    let dr = o.add_scalar(&dr, shift);
    let di = o.softplus(&dr);
    let di = o.add_scalar(&di, min_derivative);
    let di = o.pad_cols(&di, 1, bins + 1);
    let edges = o.constant(Mat::from_fn(n, bins + 1, |_, c| if c == 0 || c == bins { 1.0 } else { 0.0 }));
    let kd = o.add(&di, &edges);
    (kx, ky, kd)
}

/// Index of the bin containing `v` given ascending knots.
fn find_bin(knots: &[f64], v: f64) -> usize {
    let bins = knots.len() - 1;
    let mut k = knots.partition_point(|&t| t <= v);
    k = k.saturating_sub(1);
    k.min(bins - 1)
}

fn rq_forward<O: Ops>(
    o: &mut O,
    kind: &CouplingKind,
    x: &O::V,
    kx: &O::V,
    ky: &O::V,
    kd: &O::V,
) -> (O::V, O::V) {
    let CouplingKind::Spline { bound, .. } = *kind else { unreachable!() };
    let (inside, lo) = {
        let xv = o.value(x);
        let inside: Vec<f64> = xv
            .as_slice()
            .iter()
            .map(|&v| if (-bound..bound).contains(&v) { 1.0 } else { 0.0 })
            .collect();
        let kxv = o.value(kx);
        let lo: Vec<usize> = (0..xv.rows())
            .map(|i| find_bin(kxv.row(i), xv[(i, 0)] * inside[i]))
            .collect();
        (inside, lo)
    };
    let idx_lo: Rc<[usize]> = lo.clone().into();
    let idx_hi: Rc<[usize]> = lo.iter().map(|&k| k + 1).collect::<Vec<_>>().into();
    let m = o.constant(Mat::column(&inside));
    let not_m = o.constant(Mat::column(&inside.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));

    let xin = o.mul(x, &m);
    let x_lo = o.gather(kx, idx_lo.clone());
    let x_hi = o.gather(kx, idx_hi.clone());
    let y_lo = o.gather(ky, idx_lo.clone());
    let y_hi = o.gather(ky, idx_hi.clone());
    let d_lo = o.gather(kd, idx_lo);
    let d_hi = o.gather(kd, idx_hi);

    let w = o.sub(&x_hi, &x_lo);
    let h = o.sub(&y_hi, &y_lo);
    let s = o.div(&h, &w);
    let dx = o.sub(&xin, &x_lo);
    let xi = o.div(&dx, &w);
    let xi2 = o.square(&xi);
    let xi1 = o.sub(&xi, &xi2);
    let one_m = o.neg(&xi);
    let one_m = o.add_scalar(&one_m, 1.0);
    let one_m2 = o.square(&one_m);

    let dsum = o.add(&d_hi, &d_lo);
    let two_s = o.scale(&s, 2.0);
    let curv = o.sub(&dsum, &two_s);
    let cx = o.mul(&curv, &xi1);
    let den = o.add(&s, &cx);

    let sx2 = o.mul(&s, &xi2);
    let dx1 = o.mul(&d_lo, &xi1);
    let inner = o.add(&sx2, &dx1);
    let num = o.mul(&h, &inner);
    let frac = o.div(&num, &den);
    let y_in = o.add(&y_lo, &frac);

    let a1 = o.mul(&d_hi, &xi2);
    let a2 = o.mul(&s, &xi1);
    let a2 = o.scale(&a2, 2.0);
    let a3 = o.mul(&d_lo, &one_m2);
    let t = o.add(&a1, &a2);
    let t = o.add(&t, &a3);
    let s2 = o.square(&s);
    let dnum = o.mul(&s2, &t);
    let ldn = o.log(&dnum);
    let lden = o.log(&den);
    let lden2 = o.scale(&lden, 2.0);
    let ell_in = o.sub(&ldn, &lden2);

    let y1 = o.mul(&y_in, &m);
    let y2 = o.mul(x, &not_m);
    let y = o.add(&y1, &y2);
    let ell = o.mul(&ell_in, &m);
    (y, ell)
}

/// Inverse of one sub-block; `params` are the conditioner parameters.
pub fn inverse(kind: &CouplingKind, act: Activation, c: &Coupling, params: &[Rc<Mat>], y: &Mat) -> Mat {
    let mut o = Eager;
    let ya = Rc::new(Mat::matmul(y, false, &c.pa, false));
    let yb = Mat::matmul(y, false, &c.pb, false);
    let raw = mlp(&mut o, act, params, &ya);
    let nb = c.b.len();
    let n = y.rows();
    let ub = match kind {
        CouplingKind::Affine { scale_amplitude } => {
            let a = *scale_amplitude;
            Mat::from_fn(n, nb, |i, j| {
                let s = a * (raw[(i, j)] / a).tanh();
                (yb[(i, j)] - raw[(i, nb + j)]) * (-s).exp()
            })
        }
        CouplingKind::Spline { bound, .. } => {
            let per = kind.outputs_per_coordinate();
            let mut ub = Mat::zeros(n, nb);
            for j in 0..nb {
                let rj = Rc::new(raw.slice_cols(j * per, per));
                let (kx, ky, kd) = rq_knots(&mut o, kind, &rj);
                for i in 0..n {
                    ub[(i, j)] = rq_inverse_scalar(yb[(i, j)], kx.row(i), ky.row(i), kd.row(i), *bound);
                }
            }
            ub
        }
    };
    let mut u = Mat::matmul(&ya, false, &c.pa, true);
    u.add_assign(&Mat::matmul(&ub, false, &c.pb, true));
    u
}

fn rq_inverse_scalar(y: f64, kx: &[f64], ky: &[f64], kd: &[f64], bound: f64) -> f64 {
    if !(-bound..bound).contains(&y) {
        return y;
    }
    let k = find_bin(ky, y);
    let (x0, x1, y0, y1) = (kx[k], kx[k + 1], ky[k], ky[k + 1]);
    let (d0, d1) = (kd[k], kd[k + 1]);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let dy = y - y0;
    let curv = d1 + d0 - 2.0 * s;
    let a = h * (s - d0) + dy * curv;
    let b = h * d0 - dy * curv;
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = 2.0 * c / (-b - disc.sqrt());
    x0 + xi * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spline_zero_raw_is_identity() {
        let kind = CouplingKind::spline(5, 3.0);
        let mut o = Eager;
        let raw = Rc::new(Mat::zeros(4, kind.outputs_per_coordinate()));
        let (kx, ky, kd) = rq_knots(&mut o, &kind, &raw);
        let x = Rc::new(Mat::column(&[-3.5, -1.2, 0.3, 2.9]));
        let (y, ell) = rq_forward(&mut o, &kind, &x, &kx, &ky, &kd);
        assert!(y.sub(&x).max_abs() < 1e-12);
        assert!(ell.max_abs() < 1e-12);
    }

    #[test]
    fn spline_inverse_and_derivative() {
        let kind = CouplingKind::spline(6, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let raw = Rc::new(Mat::from_fn(n, kind.outputs_per_coordinate(), |_, _| rng.gen_range(-2.0..2.0)));
        let mut o = Eager;
        let (kx, ky, kd) = rq_knots(&mut o, &kind, &raw);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let x = Rc::new(Mat::column(&xs));
        let (y, ell) = rq_forward(&mut o, &kind, &x, &kx, &ky, &kd);
        for i in 0..n {
            let back = rq_inverse_scalar(y[(i, 0)], kx.row(i), ky.row(i), kd.row(i), 2.0);
            assert!((back - xs[i]).abs() < 1e-10, "{back} vs {}", xs[i]);
            let h = 1e-6;
            let f = |v: f64| {
                let mut o = Eager;
                let r = Rc::new(raw.slice_rows(i, 1));
                let (a, b, c) = rq_knots(&mut o, &kind, &r);
                let (yy, _) = rq_forward(&mut o, &kind, &Rc::new(Mat::scalar(v)), &a, &b, &c);
                yy.item()
            };
            let fd = (f(xs[i] + h) - f(xs[i] - h)) / (2.0 * h);
            assert!((fd.ln() - ell[(i, 0)]).abs() < 1e-5, "log-derivative mismatch at {}", xs[i]);
        }
    }
}
