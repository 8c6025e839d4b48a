use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Reference density `ρ₀` of the flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum BaseDistribution {
    StandardGaussian { dim: usize },
    /// `N(mean, std² I)`.
    IsotropicGaussian { mean: Vec<f64>, std: f64 },
    /// Uniform law on the box `[lo, hi]`, convolved with `N(0, smoothing² I)`.
    /// `smoothing = 0` gives the sharp box, which has no usable score.
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default)]
        smoothing: f64,
    },
    /// Mixture of isotropic Gaussians sharing one variance.
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variance: f64,
    },
}

fn log_ndtr_diff(a: f64, b: f64) -> f64 {
    // log(Φ(b) - Φ(a)) for a < b, stable in both tails.
    if a > 0.0 {
        return log_ndtr_diff(-b, -a);
    }
    let pa = 0.5 * libm::erfc(-a / std::f64::consts::SQRT_2);
    let pb = 0.5 * libm::erfc(-b / std::f64::consts::SQRT_2);
    if b <= 0.0 {
        return (pb - pa).ln();
    }
    // a ≤ 0 < b: Φ(b) - Φ(a) = 1 - Q(b) - Φ(a)
    let qb = 0.5 * libm::erfc(b / std::f64::consts::SQRT_2);
    (1.0 - qb - pa).ln()
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

impl BaseDistribution {
    pub fn dim(&self) -> usize {
        match self {
            Self::StandardGaussian { dim } => *dim,
            Self::IsotropicGaussian { mean, .. } => mean.len(),
            Self::UniformBox { lo, .. } => lo.len(),
            Self::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("base distribution: {m}")));
        if self.dim() == 0 {
            return bad("dimension must be positive");
        }
        match self {
            Self::IsotropicGaussian { std, .. } if !(*std > 0.0) => bad("std must be positive"),
            Self::UniformBox { lo, hi, smoothing } => {
                if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return bad("box needs lo < hi in every coordinate");
                }
                if !(*smoothing >= 0.0) {
                    return bad("smoothing must be nonnegative");
                }
                Ok(())
            }
            Self::GaussianMixture { weights, means, variance } => {
                if weights.len() != means.len() || weights.is_empty() {
                    return bad("one weight per mixture component");
                }
                if weights.iter().any(|w| !(*w > 0.0)) || !(*variance > 0.0) {
                    return bad("weights and variance must be positive");
                }
                let d = self.dim();
                if means.iter().any(|m| m.len() != d) {
                    return bad("component means differ in dimension");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether `∇ log ρ₀` exists everywhere.
    pub fn has_smooth_score(&self) -> bool {
        !matches!(self, Self::UniformBox { smoothing, .. } if *smoothing <= 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Mat {
        let d = self.dim();
        match self {
            Self::StandardGaussian { .. } => Mat::from_fn(n, d, |_, _| StandardNormal.sample(rng)),
            Self::IsotropicGaussian { mean, std } => Mat::from_fn(n, d, |_, c| {
                let e: f64 = StandardNormal.sample(rng);
                mean[c] + std * e
            }),
            Self::UniformBox { lo, hi, smoothing } => {
                let mut out = Mat::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        let u: f64 = rng.gen();
                        let e: f64 = StandardNormal.sample(rng);
                        out[(r, c)] = lo[c] + (hi[c] - lo[c]) * u + smoothing * e;
                    }
                }
                out
            }
            Self::GaussianMixture { weights, means, variance } => {
                let pick = WeightedIndex::new(weights).expect("validated weights");
                let sd = variance.sqrt();
                let mut out = Mat::zeros(n, d);
                for r in 0..n {
                    let comp = pick.sample(rng);
                    for c in 0..d {
                        let e: f64 = StandardNormal.sample(rng);
                        out[(r, c)] = means[comp][c] + sd * e;
                    }
                }
                out
            }
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        match self {
            Self::StandardGaussian { .. } => {
                -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * PI).ln()
            }
            Self::IsotropicGaussian { mean, std } => {
                let q: f64 = x.iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum();
                -0.5 * q / (std * std) - d * (std * (2.0 * PI).sqrt()).ln()
            }
            Self::UniformBox { lo, hi, smoothing } => {
                let mut s = 0.0;
                for c in 0..x.len() {
                    let width = hi[c] - lo[c];
                    if *smoothing > 0.0 {
                        let a = (x[c] - hi[c]) / smoothing;
                        let b = (x[c] - lo[c]) / smoothing;
                        s += log_ndtr_diff(a, b) - width.ln();
                    } else if x[c] < lo[c] || x[c] > hi[c] {
                        return f64::NEG_INFINITY;
                    } else {
                        s -= width.ln();
                    }
                }
                s
            }
            Self::GaussianMixture { weights, means, variance } => {
                let total: f64 = weights.iter().sum();
                let norm = -0.5 * d * (2.0 * PI * variance).ln();
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .map(|(w, m)| {
                        let q: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                        (w / total).ln() - 0.5 * q / variance + norm
                    })
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }

    /// `∇ log ρ₀(x)`.
    pub fn score(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Self::StandardGaussian { .. } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -v;
                }
            }
            Self::IsotropicGaussian { mean, std } => {
                for ((o, v), m) in out.iter_mut().zip(x).zip(mean) {
                    *o = -(v - m) / (std * std);
                }
            }
            Self::UniformBox { lo, hi, smoothing } => {
                if *smoothing <= 0.0 {
                    return Err(Error::Unsupported(
                        "the sharp uniform box has no smooth score; set a positive smoothing".into(),
                    ));
                }
                for c in 0..x.len() {
                    let a = (x[c] - hi[c]) / smoothing;
                    let b = (x[c] - lo[c]) / smoothing;
                    // d/dx log(Φ(b) - Φ(a)) = (φ(b) - φ(a)) / (σ (Φ(b) - Φ(a)))
                    let log_mass = log_ndtr_diff(a, b);
                    let diff = std_normal_pdf(b) - std_normal_pdf(a);
                    out[c] = diff / smoothing * (-log_mass).exp();
                }
            }
            Self::GaussianMixture { weights, means, variance } => {
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .map(|(w, m)| {
                        let q: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                        w.ln() - 0.5 * q / variance
                    })
                    .collect();
                let lse = log_sum_exp(&terms);
                out.fill(0.0);
                for (t, m) in terms.iter().zip(means) {
                    let r = (t - lse).exp();
                    for ((o, v), mu) in out.iter_mut().zip(x).zip(m) {
                        *o -= r * (v - mu) / variance;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn log_density_batch(&self, x: &Mat) -> Vec<f64> {
        (0..x.rows()).map(|i| self.log_density(x.row(i))).collect()
    }

    pub fn score_batch(&self, x: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros(x.rows(), x.cols());
        let mut buf = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            self.score(x.row(i), &mut buf)?;
            out.row_mut(i).copy_from_slice(&buf);
        }
        Ok(out)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
