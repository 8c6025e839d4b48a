//! Free-energy functionals: internal energy, external potential and pairwise
//! interaction, together with the analytic gradients that drive the
//! Lagrangian velocity field.
//!
//! Densities handled here are *probability* densities `q`; the physical
//! density is `p = M q` with `M` the total mass.

mod ops;

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use ops::{PairEnergyOp, PairForceOp, PotentialGradOp, PotentialValueOp};

/// Radius below which singular `log‖x‖` terms are clamped.
pub const R_SING: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum InternalEnergySpec {
    /// `U(ρ) = ρ log ρ`.
    Entropy { beta: f64 },
    /// `U(ρ) = ρ^m / (m - 1)`.
    PowerLaw { exponent: f64, beta: f64 },
}

impl InternalEnergySpec {
    pub fn beta(&self) -> f64 {
        match self {
            Self::Entropy { beta } | Self::PowerLaw { beta, .. } => *beta,
        }
    }

    /// Exponent `m`; entropy corresponds to `m = 1`.
    pub fn exponent(&self) -> f64 {
        match self {
            Self::Entropy { .. } => 1.0,
            Self::PowerLaw { exponent, .. } => *exponent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta = self.beta();
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("inverse temperature must be positive, got {beta}")));
        }
        if let Self::PowerLaw { exponent, .. } = self {
            if !(*exponent > 0.0) || *exponent == 1.0 || !exponent.is_finite() {
                return Err(Error::Config(format!(
                    "power-law exponent must be positive and != 1, got {exponent}"
                )));
            }
        }
        Ok(())
    }

    /// Coefficient `c(p)` such that the internal velocity is `-c(p) ∇log p`.
    pub fn score_coefficient(&self, log_p: f64) -> f64 {
        match self {
            Self::Entropy { beta } => 1.0 / beta,
            Self::PowerLaw { exponent: m, beta } => m / beta * ((m - 1.0) * log_p).exp(),
        }
    }

    /// `U(p) / p` evaluated from `log p`.
    pub fn energy_per_mass(&self, log_p: f64) -> f64 {
        match self {
            Self::Entropy { beta } => log_p / beta,
            Self::PowerLaw { exponent: m, beta } => ((m - 1.0) * log_p).exp() / ((m - 1.0) * beta),
        }
    }
}

/// User-supplied field given by closures over a point (or displacement).
pub struct CustomField {
    pub value: Box<dyn Fn(&[f64]) -> f64>,
    pub gradient: Box<dyn Fn(&[f64], &mut [f64])>,
    /// Hessian-vector product; when absent it is approximated by central
    /// differences of `gradient`.
    pub hvp: Option<Box<dyn Fn(&[f64], &[f64], &mut [f64])>>,
}

impl fmt::Debug for CustomField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomField")
            .field("hvp", &self.hvp.is_some())
            .finish_non_exhaustive()
    }
}

impl CustomField {
    fn hvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        if let Some(h) = &self.hvp {
            return h(x, v, out);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            out.fill(0.0);
            return;
        }
        let h = 1e-5 / norm;
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let mut gp = vec![0.0; x.len()];
        let mut gm = vec![0.0; x.len()];
        (self.gradient)(&xp, &mut gp);
        (self.gradient)(&xm, &mut gm);
        for ((o, p), m) in out.iter_mut().zip(&gp).zip(&gm) {
            *o = (p - m) / (2.0 * h);
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum PotentialSpec {
    #[default]
    None,
    /// `V(x) = ½ (x-μ)ᵀ Σ⁻¹ (x-μ)`.
    QuadraticGaussianTarget {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
        #[serde(skip)]
        precision: Option<Vec<Vec<f64>>>,
    },
    /// `V(x) = scale · Σᵢ (xᵢ⁴ - 16 xᵢ² + 5 xᵢ)`.
    StyblinskiTang { scale: f64 },
    /// `V(x) = -(α₁/α₂) log‖x‖`.
    LogConfinement { alpha1: f64, alpha2: f64 },
    #[serde(skip)]
    Custom(Rc<CustomField>),
}

impl PartialEq for PotentialSpec {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::None, Self::None) => true,
            (
                Self::QuadraticGaussianTarget { mean: a, covariance: ca, .. },
                Self::QuadraticGaussianTarget { mean: b, covariance: cb, .. },
            ) => a == b && ca == cb,
            (Self::StyblinskiTang { scale: a }, Self::StyblinskiTang { scale: b }) => a == b,
            (
                Self::LogConfinement { alpha1: a1, alpha2: a2 },
                Self::LogConfinement { alpha1: b1, alpha2: b2 },
            ) => a1 == b1 && a2 == b2,
            (Self::Custom(a), Self::Custom(b)) => Rc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
fn spd_inverse(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        if a[i].len() != n {
            return None;
        }
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                return None;
            }
        }
    }
    let mut inv = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k][i] * x[k];
            }
            x[i] = s / l[i][i];
        }
        for i in 0..n {
            inv[i][col] = x[i];
        }
    }
    Some(inv)
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

impl PotentialSpec {
    pub fn quadratic(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let mut spec = Self::QuadraticGaussianTarget {
            mean,
            covariance,
            precision: None,
        };
        spec.prepare()?;
        Ok(spec)
    }

    pub fn custom(field: CustomField) -> Self {
        Self::Custom(Rc::new(field))
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    /// Validates parameters and caches derived quantities.
    pub fn prepare(&mut self) -> Result<()> {
        match self {
            Self::QuadraticGaussianTarget { mean, covariance, precision } => {
                if covariance.len() != mean.len() {
                    return Err(Error::Dimension(format!(
                        "covariance is {}x?, mean has length {}",
                        covariance.len(),
                        mean.len()
                    )));
                }
                let inv = spd_inverse(covariance).ok_or_else(|| {
                    Error::Config("covariance must be symmetric positive definite".into())
                })?;
                *precision = Some(inv);
            }
            Self::LogConfinement { alpha1, alpha2 } => {
                if !(*alpha1 > 0.0 && *alpha2 > 0.0) {
                    return Err(Error::Config("log confinement needs alpha1, alpha2 > 0".into()));
                }
            }
            Self::StyblinskiTang { scale } if !scale.is_finite() => {
                return Err(Error::Config("Styblinski-Tang scale must be finite".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Dimension fixed by the spec, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::QuadraticGaussianTarget { mean, .. } => Some(mean.len()),
            _ => None,
        }
    }

    fn precision(&self) -> &[Vec<f64>] {
        match self {
            Self::QuadraticGaussianTarget { precision: Some(p), .. } => p,
            _ => panic!("quadratic potential used before prepare()"),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::None => 0.0,
            Self::QuadraticGaussianTarget { mean, .. } => {
                let p = self.precision();
                let d: Vec<f64> = x.iter().zip(mean).map(|(a, m)| a - m).collect();
                let mut s = 0.0;
                for i in 0..d.len() {
                    for j in 0..d.len() {
                        s += d[i] * p[i][j] * d[j];
                    }
                }
                0.5 * s
            }
            Self::StyblinskiTang { scale } => {
                scale * x.iter().map(|&v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>()
            }
            Self::LogConfinement { alpha1, alpha2 } => {
                -(alpha1 / alpha2) * norm_sq(x).sqrt().max(R_SING).ln()
            }
            Self::Custom(c) => (c.value)(x),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::None => out.fill(0.0),
            Self::QuadraticGaussianTarget { mean, .. } => {
                let p = self.precision();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..x.len()).map(|j| p[i][j] * (x[j] - mean[j])).sum();
                }
            }
            Self::StyblinskiTang { scale } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = scale * (4.0 * v * v * v - 32.0 * v + 5.0);
                }
            }
            Self::LogConfinement { alpha1, alpha2 } => {
                let c = alpha1 / alpha2;
                let r2 = norm_sq(x).max(R_SING * R_SING);
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = -c * v / r2;
                }
            }
            Self::Custom(c) => (c.gradient)(x, out),
        }
    }

    /// Hessian-vector product `∇²V(x) v`.
    pub fn hvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            Self::None => out.fill(0.0),
            Self::QuadraticGaussianTarget { .. } => {
                let p = self.precision();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..v.len()).map(|j| p[i][j] * v[j]).sum();
                }
            }
            Self::StyblinskiTang { scale } => {
                for ((o, &xi), &vi) in out.iter_mut().zip(x).zip(v) {
                    *o = scale * (12.0 * xi * xi - 32.0) * vi;
                }
            }
            Self::LogConfinement { alpha1, alpha2 } => {
                let c = alpha1 / alpha2;
                log_norm_hvp(x, v, -c, out);
            }
            Self::Custom(c) => c.hvp(x, v, out),
        }
    }
}

/// Hessian-vector product of `coef · log‖x‖` with the clamping convention.
fn log_norm_hvp(x: &[f64], v: &[f64], coef: f64, out: &mut [f64]) {
    let r2 = norm_sq(x);
    if r2 < R_SING * R_SING {
        let inv = 1.0 / (R_SING * R_SING);
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = coef * vi * inv;
        }
        return;
    }
    let xv: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
    for ((o, &xi), &vi) in out.iter_mut().zip(x).zip(v) {
        *o = coef * (vi / r2 - 2.0 * xi * xv / (r2 * r2));
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum KernelSpec {
    #[default]
    None,
    /// `W(x) = ½‖x‖² - log‖x‖`.
    QuadraticLog,
    /// `W(x) = -amplitude · exp(-‖x‖² / width)`.
    GaussianAttraction { amplitude: f64, width: f64 },
    #[serde(skip)]
    Custom(Rc<CustomField>),
}

impl PartialEq for KernelSpec {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::None, Self::None) | (Self::QuadraticLog, Self::QuadraticLog) => true,
            (
                Self::GaussianAttraction { amplitude: a, width: w },
                Self::GaussianAttraction { amplitude: b, width: v },
            ) => a == b && w == v,
            (Self::Custom(a), Self::Custom(b)) => Rc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl KernelSpec {
    pub fn custom(field: CustomField) -> Self {
        Self::Custom(Rc::new(field))
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::GaussianAttraction { amplitude, width } = self {
            if !(*width > 0.0) || !amplitude.is_finite() {
                return Err(Error::Config("Gaussian kernel needs width > 0".into()));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::None => 0.0,
            Self::QuadraticLog => {
                let r2 = norm_sq(x);
                0.5 * r2 - r2.sqrt().max(R_SING).ln()
            }
            Self::GaussianAttraction { amplitude, width } => -amplitude * (-norm_sq(x) / width).exp(),
            Self::Custom(c) => (c.value)(x),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::None => out.fill(0.0),
            Self::QuadraticLog => {
                let r2 = norm_sq(x).max(R_SING * R_SING);
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = v - v / r2;
                }
            }
            Self::GaussianAttraction { amplitude, width } => {
                let c = 2.0 * amplitude / width * (-norm_sq(x) / width).exp();
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = c * v;
                }
            }
            Self::Custom(c) => (c.gradient)(x, out),
        }
    }

    pub fn hvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            Self::None => out.fill(0.0),
            Self::QuadraticLog => {
                log_norm_hvp(x, v, -1.0, out);
                for (o, &vi) in out.iter_mut().zip(v) {
                    *o += vi;
                }
            }
            Self::GaussianAttraction { amplitude, width } => {
                let c = 2.0 * amplitude / width * (-norm_sq(x) / width).exp();
                let xv: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
                for ((o, &xi), &vi) in out.iter_mut().zip(x).zip(v) {
                    *o = c * (vi - 2.0 / width * xi * xv);
                }
            }
            Self::Custom(c) => c.hvp(x, v, out),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeEnergySpec {
    #[serde(default)]
    pub internal: Option<InternalEnergySpec>,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default = "default_mass")]
    pub total_mass: f64,
}

fn default_mass() -> f64 {
    1.0
}

impl Default for FreeEnergySpec {
    fn default() -> Self {
        Self {
            internal: None,
            potential: PotentialSpec::None,
            kernel: KernelSpec::None,
            total_mass: 1.0,
        }
    }
}

impl FreeEnergySpec {
    pub fn has_internal(&self) -> bool {
        self.internal.is_some()
    }

    pub fn has_kernel(&self) -> bool {
        !self.kernel.is_none()
    }

    /// True when no term is configured (`𝓕 ≡ 0`).
    pub fn is_trivial(&self) -> bool {
        self.internal.is_none() && self.potential.is_none() && self.kernel.is_none()
    }

    /// Checks invariants and caches derived data. A trivial spec is accepted
    /// only when `allow_trivial` is set (used by smoke tests).
    pub fn prepare(&mut self, allow_trivial: bool) -> Result<()> {
        if let Some(internal) = &self.internal {
            internal.validate()?;
        }
        self.potential.prepare()?;
        self.kernel.validate()?;
        if !(self.total_mass > 0.0 && self.total_mass.is_finite()) {
            return Err(Error::Config(format!("total mass must be positive, got {}", self.total_mass)));
        }
        if self.is_trivial() && !allow_trivial {
            return Err(Error::Config("free energy has no active term".into()));
        }
        Ok(())
    }

    /// `log p = log M + log q`.
    pub fn log_mass(&self) -> f64 {
        self.total_mass.ln()
    }
}

/// Internal-energy contribution `-β⁻¹ ∇U'(p)` to the velocity, written as
/// `-c(p) · score`. Returns zeros when `spec` is `None`.
pub fn internal_velocity_term(
    log_p: f64,
    score: &[f64],
    spec: Option<&InternalEnergySpec>,
) -> Result<Vec<f64>> {
    let Some(spec) = spec else {
        return Ok(vec![0.0; score.len()]);
    };
    if !log_p.is_finite() || score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "internal velocity input",
            layer: 0,
            particle: 0,
        });
    }
    let c = spec.score_coefficient(log_p);
    Ok(score.iter().map(|s| -c * s).collect())
}

pub fn potential_gradient(x: &[f64], spec: &PotentialSpec) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    spec.gradient(x, &mut out);
    out
}

pub fn kernel_gradient(x: &[f64], spec: &KernelSpec) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    spec.gradient(x, &mut out);
    out
}

/// Mean of `W(xᵢ - xⱼ)` over ordered pairs `i ≠ j`.
pub fn pair_energy_mean(positions: &Mat, kernel: &KernelSpec) -> f64 {
    let (n, d) = positions.shape();
    if n < 2 || kernel.is_none() {
        return 0.0;
    }
    let mut diff = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..n {
        let xi = positions.row(i);
        for j in i + 1..n {
            let xj = positions.row(j);
            for k in 0..d {
                diff[k] = xi[k] - xj[k];
            }
            total += kernel.value(&diff);
        }
    }
    2.0 * total / (n * (n - 1)) as f64
}

/// Plug-in Monte Carlo estimate of the free energy of the density whose
/// samples are `positions` (rows) with probability log-densities
/// `log_densities`:
/// `M·mean[β⁻¹U(p)/p + V] + (M²/2)·mean_{i≠j} W(xᵢ - xⱼ)`.
pub fn free_energy_estimate(positions: &Mat, log_densities: &[f64], spec: &FreeEnergySpec) -> Result<f64> {
    let (n, _) = positions.shape();
    if log_densities.len() != n {
        return Err(Error::Dimension(format!(
            "{} positions but {} log-densities",
            n,
            log_densities.len()
        )));
    }
    if n == 0 {
        return Err(Error::Config("empty particle batch".into()));
    }
    if spec.has_kernel() && n < 2 {
        return Err(Error::Config("interaction energy needs at least two particles".into()));
    }
    let m = spec.total_mass;
    let log_m = spec.log_mass();
    let mut local = 0.0;
    for (i, &lq) in log_densities.iter().enumerate() {
        let mut e = spec.potential.value(positions.row(i));
        if let Some(internal) = &spec.internal {
            e += internal.energy_per_mass(log_m + lq);
        }
        if !e.is_finite() {
            return Err(Error::NonFinite {
                what: "free-energy integrand",
                layer: 0,
                particle: i,
            });
        }
        local += e;
    }
    let mut total = m * local / n as f64;
    if spec.has_kernel() {
        total += 0.5 * m * m * pair_energy_mean(positions, &spec.kernel);
    }
    Ok(total)
}
