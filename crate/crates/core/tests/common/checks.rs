//! Measurements shared by the property tests and the acceptance suite.

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};
use wgpath::energy::{free_energy_estimate, FreeEnergySpec, InternalEnergySpec, PotentialSpec};
use wgpath::flow::{Activation, BaseDistribution, CouplingKind, FlowArch, FlowModel, PathBatch};
use wgpath::losses::{geometric_loss, physical_time_loss, PhysicalTimeConfig};
use wgpath::velocity::{empirical_velocity, segment_and_velocity_norms};
use wgpath::Mat;

use super::rng;

pub fn flow_model(dim: usize, layers: usize, coupling: CouplingKind, seed: u64) -> FlowModel {
    let mut r = rng(seed);
    let arch = FlowArch {
        layers,
        hidden_width: 8,
        hidden_layers: 2,
        activation: Activation::Tanh,
        coupling,
    };
    let mut m = FlowModel::new(BaseDistribution::StandardGaussian { dim }, arch, &mut r).unwrap();
    m.perturb(0.3, &mut r);
    m
}

/// Perturbed models covering d ∈ {1, 2, 3} and both coupling families.
pub fn flow_zoo() -> Vec<(String, FlowModel)> {
    let mut out = Vec::new();
    for d in 1..=3 {
        for (name, kind) in [("affine", CouplingKind::affine()), ("spline", CouplingKind::spline(6, 4.0))] {
            out.push((format!("{name} d={d}"), flow_model(d, 3, kind, 10 + d as u64)));
        }
    }
    out
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FlowErrors {
    pub round_trip: f64,
    pub logdet_rel: f64,
    pub score_rel: f64,
    pub mass_error: f64,
}

pub fn round_trip_error(m: &FlowModel, z: &Mat) -> f64 {
    let b = m.push_forward(z).unwrap();
    (0..=m.num_layers())
        .map(|k| m.inverse(k, &b.positions[k]).unwrap().sub(z).max_abs())
        .fold(0.0, f64::max)
}

/// Prefix log-determinants against `log |det J|` of a central-difference
/// Jacobian of the forward map.
pub fn logdet_error(m: &FlowModel, z: &Mat, h: f64) -> f64 {
    let d = m.dim();
    let b = m.push_forward(z).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..z.rows() {
        let mut jac = vec![DMatrix::<f64>::zeros(d, d); m.num_layers() + 1];
        for j in 0..d {
            let shifted = |s: f64| {
                let mut p = Mat::from_vec(1, d, z.row(i).to_vec());
                p.as_mut_slice()[j] += s;
                m.push_forward(&p).unwrap()
            };
            let (bp, bm) = (shifted(h), shifted(-h));
            for (k, jk) in jac.iter_mut().enumerate() {
                for r in 0..d {
                    jk[(r, j)] = (bp.positions[k][(0, r)] - bm.positions[k][(0, r)]) / (2.0 * h);
                }
            }
        }
        for (k, jk) in jac.iter().enumerate().skip(1) {
            let fd = jk.determinant().abs().ln();
            let exact = b.log_densities[0][i] - b.log_densities[k][i];
            let summed: f64 = b.layer_logdets[..k].iter().map(|l| l[i]).sum();
            let e = (fd - exact).abs().max((summed - exact).abs()) / exact.abs().max(1e-2);
            worst = worst.max(e);
        }
    }
    worst
}

/// Flow scores against central differences of the layer log-density.
pub fn score_error(m: &FlowModel, z: &Mat, h: f64) -> f64 {
    let d = m.dim();
    let b = m.push_forward(z).unwrap();
    let scores = m.scores(z).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..=m.num_layers() {
        let x = &b.positions[k];
        let mut fd = Mat::zeros(x.rows(), d);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            for i in 0..x.rows() {
                xp[(i, j)] += h;
                xm[(i, j)] -= h;
            }
            let lp = m.log_density(k, &xp).unwrap();
            let lm = m.log_density(k, &xm).unwrap();
            for i in 0..x.rows() {
                fd[(i, j)] = (lp[i] - lm[i]) / (2.0 * h);
            }
        }
        for i in 0..x.rows() {
            let num: f64 = (0..d).map(|j| (scores[k][(i, j)] - fd[(i, j)]).powi(2)).sum::<f64>().sqrt();
            let den: f64 = (0..d).map(|j| fd[(i, j)].powi(2)).sum::<f64>().sqrt();
            worst = worst.max(num / den.max(1e-2));
        }
    }
    worst
}

/// `|∫ p_K - 1|` by the trapezoidal rule on `[-L, L]^d` (d ≤ 2).
pub fn mass_error(m: &FlowModel, half_width: f64, points: usize) -> f64 {
    let d = m.dim();
    assert!(d <= 2);
    let h = 2.0 * half_width / (points - 1) as f64;
    let node = |i: usize| -half_width + i as f64 * h;
    let weight = |i: usize| if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
    let k = m.num_layers();
    let total = if d == 1 {
        let grid = Mat::from_fn(points, 1, |i, _| node(i));
        let lp = m.log_density(k, &grid).unwrap();
        (0..points).map(|i| weight(i) * lp[i].exp()).sum::<f64>() * h
    } else {
        let mut acc = 0.0;
        for a in 0..points {
            let grid = Mat::from_fn(points, 2, |b, j| if j == 0 { node(a) } else { node(b) });
            let lp = m.log_density(k, &grid).unwrap();
            acc += weight(a) * (0..points).map(|b| weight(b) * lp[b].exp()).sum::<f64>();
        }
        acc * h * h
    };
    (total - 1.0).abs()
}

pub fn flow_suite() -> Vec<(String, FlowErrors)> {
    flow_zoo()
        .into_iter()
        .map(|(name, m)| {
            let z = m.base().sample(64, &mut rng(99));
            let zs = z.slice_rows(0, 16);
            let e = FlowErrors {
                round_trip: round_trip_error(&m, &z),
                logdet_rel: logdet_error(&m, &zs, 1e-5),
                score_rel: score_error(&m, &zs, 1e-5),
                mass_error: match (m.dim(), name.starts_with("spline")) {
                    (d, _) if d > 2 => 0.0,
                    // Spline tails are the identity, but narrow bins need a fine grid.
                    (1, true) => mass_error(&m, 10.0, 4001),
                    (_, true) => mass_error(&m, 10.0, 801),
                    // Affine layers spread mass far out.
                    (1, false) => mass_error(&m, 40.0, 4001),
                    (_, false) => mass_error(&m, 40.0, 801),
                },
            };
            (name, e)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Convergence orders

/// `n` standard normal quantile nodes, a deterministic stand-in for a sample.
pub fn normal_nodes(n: usize) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).unwrap();
    let raw: Vec<f64> = (0..n).map(|i| std.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
    let m = raw.iter().sum::<f64>() / n as f64;
    let s = (raw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    raw.iter().map(|x| (x - m) / s).collect()
}

/// Entropy plus `(x - 3)²` so the velocity of `N(m, 1)` is `6 - 2m - z`.
pub fn slide_energy() -> FreeEnergySpec {
    slide_energy_with_variance(0.5)
}

/// Entropy plus the quadratic with equilibrium `N(3, var)`.
pub fn slide_energy_with_variance(var: f64) -> FreeEnergySpec {
    FreeEnergySpec {
        internal: Some(InternalEnergySpec::Entropy { beta: 1.0 }),
        potential: PotentialSpec::quadratic(vec![3.0], vec![vec![var]]).unwrap(),
        ..Default::default()
    }
}

/// Layers of the unit-variance Gaussian whose mean slides along `means`.
fn gaussian_layers(z: &[f64], means: &[f64]) -> (PathBatch, Vec<Mat>) {
    let zm = Mat::column(z);
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let positions: Vec<Mat> = means.iter().map(|m| zm.map(|v| v + m)).collect();
    let log_densities = vec![z.iter().map(|v| log_norm - 0.5 * v * v).collect::<Vec<_>>(); means.len()];
    let scores = vec![zm.scale(-1.0); means.len()];
    let batch = PathBatch {
        z: zm.clone(),
        positions,
        log_densities,
        layer_logdets: vec![vec![0.0; z.len()]; means.len() - 1],
    };
    (batch, scores)
}

/// Discrete geometric loss of the slide `m(τ) = 3 g(τ)` at `τ_k = k/K`.
pub fn slide_discrete_loss(z: &[f64], k: usize, g: impl Fn(f64) -> f64) -> f64 {
    slide_discrete_loss_for(z, k, g, &slide_energy())
}

pub fn slide_discrete_loss_for(z: &[f64], k: usize, g: impl Fn(f64) -> f64, spec: &FreeEnergySpec) -> f64 {
    let means: Vec<f64> = (0..=k).map(|i| 3.0 * g(i as f64 / k as f64)).collect();
    let (batch, scores) = gaussian_layers(z, &means);
    let fields: Vec<Mat> = (0..=k)
        .map(|i| empirical_velocity(&batch, Some(&scores), spec, i).unwrap())
        .collect();
    geometric_loss(&segment_and_velocity_norms(&batch, &fields).unwrap())
}

/// `∫₀¹ ‖∂_τ x‖ ‖V‖ dτ` for the linear slide by composite Simpson on `n` panels.
pub fn slide_continuous_loss(z: &[f64], n: usize) -> f64 {
    let v = |tau: f64| {
        let m = 3.0 * tau;
        let ms = z.iter().map(|zi| (6.0 - 2.0 * m - zi).powi(2)).sum::<f64>() / z.len() as f64;
        3.0 * ms.sqrt()
    };
    let h = 1.0 / n as f64;
    let mut s = v(0.0) + v(1.0);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * v(i as f64 * h);
    }
    s * h / 3.0
}

pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// `(K, |Ĵ_K - J|)` for the linear slide.
pub fn geometric_order_errors(ks: &[usize]) -> Vec<(usize, f64)> {
    let z = normal_nodes(2000);
    let exact = slide_continuous_loss(&z, 10_000);
    ks.iter()
        .map(|&k| (k, (slide_discrete_loss(&z, k, |t| t) - exact).abs()))
        .collect()
}

/// Physical-time loss of the exact OU trajectory `x(t) = z e^{-t}` on `[0, 1]`
/// with the exact field `-x`.
pub fn ou_cn_loss(z: &[f64], k: usize) -> f64 {
    let zm = Mat::column(z);
    let positions: Vec<Mat> = (0..=k).map(|i| zm.scale((-(i as f64) / k as f64).exp())).collect();
    let fields: Vec<Mat> = positions.iter().map(|p| p.scale(-1.0)).collect();
    let n = z.len();
    let batch = PathBatch {
        z: zm,
        positions,
        log_densities: vec![vec![0.0; n]; k + 1],
        layer_logdets: vec![vec![0.0; n]; k],
    };
    physical_time_loss(&batch, &fields, &PhysicalTimeConfig::uniform(1.0, k)).unwrap()
}

/// The same loss evaluated by a scalar formula: the CN defect of `e^{-t}`
/// scales every particle by `z`.
pub fn ou_cn_loss_scalar(z: &[f64], k: usize) -> f64 {
    let dt = 1.0 / k as f64;
    let m2 = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
    (1..=k)
        .map(|i| {
            let (a, b) = ((-((i - 1) as f64) * dt).exp(), (-(i as f64) * dt).exp());
            let eps = (b - a) / dt + 0.5 * (a + b);
            dt * eps * eps * m2
        })
        .sum()
}

pub fn cn_order_losses(ks: &[usize], n: usize) -> Vec<(usize, f64)> {
    let z = rng_normal(n, 2024);
    ks.iter().map(|&k| (k, ou_cn_loss(&z, k))).collect()
}

pub fn rng_normal(n: usize, seed: u64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Free energy of a unit-variance Gaussian layer.
pub fn slide_free_energy(z: &[f64], mean: f64, spec: &FreeEnergySpec) -> f64 {
    let (batch, _) = gaussian_layers(z, &[mean]);
    free_energy_estimate(&batch.positions[0], &batch.log_densities[0], spec).unwrap()
}

// ---------------------------------------------------------------------------
// Oracle self-checks

/// Weak error of the Euler–Maruyama mean for OU from `x0 = 1` at `t = 1`
/// (exact `e^{-1}`) for `dt ∈ {0.2, 0.1, 0.05}`, and the log-log slope.
pub fn em_weak_order() -> (Vec<f64>, f64) {
    use wgpath::oracles::{euler_maruyama_1d, EulerMaruyamaConfig};
    let v = PotentialSpec::quadratic(vec![0.0], vec![vec![1.0]]).unwrap();
    let dts = [0.2, 0.1, 0.05];
    let errs: Vec<f64> = dts
        .iter()
        .map(|&dt| {
            let cfg = EulerMaruyamaConfig {
                n_paths: 400_000,
                dt,
                times: vec![1.0],
                seed: 9,
                initial_mean: 1.0,
                initial_std: 0.0,
            };
            let x = &euler_maruyama_1d(&v, &cfg).unwrap()[0];
            (x.iter().sum::<f64>() / x.len() as f64 - (-1.0f64).exp()).abs()
        })
        .collect();
    let slope = loglog_slope(&dts, &errs);
    (errs, slope)
}

fn random_gaussian(d: usize, r: &mut impl rand::Rng) -> wgpath::oracles::GaussianState {
    use rand_distr::{Distribution, StandardNormal};
    let mean: Vec<f64> = (0..d).map(|_| { let s: f64 = StandardNormal.sample(r); 2.0 * s }).collect();
    let b = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(r));
    let c = &b * b.transpose() + DMatrix::identity(d, d) * 0.05;
    let cov = (0..d).map(|i| (0..d).map(|j| c[(i, j)]).collect()).collect();
    wgpath::oracles::GaussianState::new(mean, cov).unwrap()
}

/// Largest violation of the triangle inequality and of symmetry of the
/// Gaussian W2 over random triples in dimensions 1 to 4.
pub fn bures_triangle_worst(trials: usize, seed: u64) -> (f64, f64) {
    use wgpath::oracles::gaussian_w2;
    let mut r = rng(seed);
    let (mut tri, mut sym): (f64, f64) = (f64::NEG_INFINITY, 0.0);
    for t in 0..trials {
        let d = 1 + t % 4;
        let g: Vec<_> = (0..3).map(|_| random_gaussian(d, &mut r)).collect();
        let w = |a: usize, b: usize| gaussian_w2(&g[a], &g[b]).unwrap();
        tri = tri.max(w(0, 2) - w(0, 1) - w(1, 2));
        sym = sym.max((w(0, 1) - w(1, 0)).abs());
    }
    (tri, sym)
}

/// Largest relative gap between the exact assignment W2 and the sorted
/// coupling for random 1-D samples.
pub fn assignment_vs_sorted_worst(trials: usize, seed: u64) -> f64 {
    use rand::Rng;
    use wgpath::oracles::empirical_w2_exact;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = r.gen_range(1..200);
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..15.0)).collect();
        let exact = empirical_w2_exact(&Mat::column(&a), &Mat::column(&b)).unwrap();
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let sorted = (sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst = worst.max((exact - sorted).abs() / sorted.max(1e-12));
    }
    worst
}
