//! Reference solutions and metrics used for validation only.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::energy::PotentialSpec;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const EIGEN_FLOOR: f64 = 1e-12;
pub const EXACT_ASSIGNMENT_MAX: usize = 2000;
pub const DEFAULT_PROJECTIONS: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianState {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let s = GaussianState { mean, covariance };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { variance } else { 0.0 }).collect())
            .collect();
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension(format!("Gaussian state of dimension {d} needs a {d}x{d} covariance")));
        }
        let c = self.cov();
        let scale = c.amax().max(1.0);
        if (&c - c.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Numerical("covariance is not symmetric".into()));
        }
        let min = SymmetricEigen::new(c).eigenvalues.min();
        if !(min > EIGEN_FLOOR) {
            return Err(Error::Numerical(format!("covariance is not positive definite (min eigenvalue {min:e})")));
        }
        Ok(())
    }

    pub fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.covariance[i][j])
    }

    fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let d = mean.len();
        let sym = (&cov + cov.transpose()) * 0.5;
        GaussianState {
            mean: mean.iter().copied().collect(),
            covariance: (0..d).map(|i| (0..d).map(|j| sym[(i, j)]).collect()).collect(),
        }
    }
}

/// Symmetric matrix function through the eigendecomposition, eigenvalues
/// clamped below at [`EIGEN_FLOOR`].
fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigendecomposition produced non-finite eigenvalues".into()));
    }
    let lam = eig.eigenvalues.map(|v| f(v.max(EIGEN_FLOOR)));
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&lam) * q.transpose())
}

pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_apply(m, f64::sqrt)
}

fn check_pair(initial: &GaussianState, target: &GaussianState, t: f64) -> Result<()> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("time must be non-negative, got {t}")));
    }
    initial.validate()?;
    target.validate()?;
    if initial.dim() != target.dim() {
        return Err(Error::Dimension("initial and target states differ in dimension".into()));
    }
    Ok(())
}

/// OU law at time `t` for `dX = -Σ⁻¹(X - μ)dt + √2 dW`, through the dense
/// matrix exponential of `-Σ⁻¹t`.
pub fn ou_exact_general(t: f64, initial: &GaussianState, target: &GaussianState) -> Result<GaussianState> {
    check_pair(initial, target, t)?;
    let sigma = target.cov();
    let a = sigma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("target covariance is singular".into()))?;
    let e = (a * -t).exp();
    let mu = target.mean_vec();
    let mean = &mu - &e * (&mu - initial.mean_vec());
    // Σ(t) = EΣ₀E + Σ - EΣE, valid because E commutes with Σ.
    let cov = &e * initial.cov() * &e + &sigma - &e * &sigma * &e;
    Ok(GaussianState::from_parts(mean, cov))
}

/// Groups of coordinates coupled by a nonzero entry of either covariance.
pub fn coupled_blocks(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let d = a.nrows();
    let mut label: Vec<usize> = (0..d).collect();
    fn root(label: &mut [usize], mut i: usize) -> usize {
        while label[i] != i {
            label[i] = label[label[i]];
            i = label[i];
        }
        i
    }
    for i in 0..d {
        for j in i + 1..d {
            if a[(i, j)] != 0.0 || b[(i, j)] != 0.0 {
                let (ri, rj) = (root(&mut label, i), root(&mut label, j));
                label[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut index_of = vec![usize::MAX; d];
    for i in 0..d {
        let r = root(&mut label, i);
        if index_of[r] == usize::MAX {
            index_of[r] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[index_of[r]].push(i);
    }
    blocks
}

/// Same law computed block by block from the eigenpairs of each target
/// block: along an eigenvector with eigenvalue `λ` the mean relaxes as
/// `e^{-t/λ}` and the variance as `e^{-2t/λ}`.
pub fn ou_exact_blockwise(t: f64, initial: &GaussianState, target: &GaussianState) -> Result<GaussianState> {
    check_pair(initial, target, t)?;
    let d = target.dim();
    let (s0, s) = (initial.cov(), target.cov());
    let (m0, m) = (initial.mean_vec(), target.mean_vec());
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for block in coupled_blocks(&s0, &s) {
        let b = block.len();
        let sb = DMatrix::from_fn(b, b, |i, j| s[(block[i], block[j])]);
        let s0b = DMatrix::from_fn(b, b, |i, j| s0[(block[i], block[j])]);
        let eig = SymmetricEigen::new(sb.clone());
        let q = &eig.eigenvectors;
        let decay = eig.eigenvalues.map(|l| (-t / l).exp());
        let e = q * DMatrix::from_diagonal(&decay) * q.transpose();
        let dm = DVector::from_fn(b, |i, _| m[block[i]] - m0[block[i]]);
        let mb = -(&e * dm);
        let cb = &e * s0b * &e + q * DMatrix::from_diagonal(&eig.eigenvalues.zip_map(&decay, |l, r| l * (1.0 - r * r))) * q.transpose();
        for (i, &gi) in block.iter().enumerate() {
            mean[gi] = m[gi] + mb[i];
            for (j, &gj) in block.iter().enumerate() {
                cov[(gi, gj)] = cb[(i, j)];
            }
        }
    }
    Ok(GaussianState::from_parts(mean, cov))
}

/// Exact OU law at time `t`. When the covariances split into independent
/// blocks the per-block route is used and cross-checked against the dense
/// matrix exponential.
pub fn ou_exact(t: f64, initial: &GaussianState, target: &GaussianState) -> Result<GaussianState> {
    let general = ou_exact_general(t, initial, target)?;
    if coupled_blocks(&initial.cov(), &target.cov()).len() == 1 {
        return Ok(general);
    }
    let blocks = ou_exact_blockwise(t, initial, target)?;
    let gap = (blocks.mean_vec() - general.mean_vec())
        .amax()
        .max((blocks.cov() - general.cov()).amax());
    if gap > 1e-9 {
        return Err(Error::Numerical(format!("block and dense OU solutions disagree by {gap:e}")));
    }
    Ok(blocks)
}

/// Bures–Wasserstein distance between two Gaussian laws.
pub fn gaussian_w2(a: &GaussianState, b: &GaussianState) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::Dimension("Gaussian states differ in dimension".into()));
    }
    let (sa, sb) = (a.cov(), b.cov());
    let rb = sym_sqrt(&sb)?;
    let cross = sym_sqrt(&(&rb * &sa * &rb))?;
    let tr = (sa.trace() + sb.trace() - 2.0 * cross.trace()).max(0.0);
    Ok(((a.mean_vec() - b.mean_vec()).norm_squared() + tr).sqrt())
}

/// Sample mean and covariance (denominator `n - 1`, no shrinkage).
pub fn fitted_gaussian(particles: &Mat) -> Result<GaussianState> {
    let (n, d) = particles.shape();
    if n < 2 {
        return Err(Error::Dimension("need at least two particles to fit a Gaussian".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(particles.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        let r = particles.row(i);
        for a in 0..d {
            for b in a..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= (n - 1) as f64;
            cov[b][a] = cov[a][b];
        }
    }
    GaussianState::new(mean, cov)
}

/// Time on `[0, t_max]` whose law is W2-closest to `state`: dense grid
/// search followed by golden-section refinement of the best bracket.
pub fn w2_nearest_time(
    state: &GaussianState,
    law: impl Fn(f64) -> Result<GaussianState>,
    t_max: f64,
    grid: usize,
) -> Result<(f64, f64)> {
    let grid = grid.max(2);
    let h = t_max / (grid - 1) as f64;
    let dist = |t: f64| -> Result<f64> { gaussian_w2(state, &law(t)?) };
    let mut best = (0.0, f64::INFINITY);
    for i in 0..grid {
        let t = i as f64 * h;
        let w = dist(t)?;
        if w < best.1 {
            best = (t, w);
        }
    }
    let (mut lo, mut hi) = ((best.0 - h).max(0.0), (best.0 + h).min(t_max));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let (x1, x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if dist(x1)? < dist(x2)? {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let t = 0.5 * (lo + hi);
    let w = dist(t)?;
    Ok(if w < best.1 { (t, w) } else { best })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    Exact,
    Sliced { projections: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W2Estimate {
    pub value: f64,
    pub method: W2Method,
}

/// Minimum-cost perfect matching on an `n x n` cost given as a closure
/// (shortest augmenting paths with potentials, `O(n³)`). Returns the column
/// assigned to each row.
pub fn solve_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact empirical W2 by optimal assignment on squared Euclidean cost.
pub fn empirical_w2_exact(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "exact assignment needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Dimension("empty particle set".into()));
    }
    if n > EXACT_ASSIGNMENT_MAX {
        return Err(Error::Unsupported(format!("exact assignment is capped at n = {EXACT_ASSIGNMENT_MAX}")));
    }
    let assign = solve_assignment(n, |i, j| sq_dist(a.row(i), b.row(j)));
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| sq_dist(a.row(i), b.row(j))).sum();
    Ok((total / n as f64).sqrt())
}

/// `∫₀¹ |F⁻¹(u) - G⁻¹(u)|^p du` between two 1-D empirical measures.
pub fn quantile_coupling_cost(a: &[f64], b: &[f64], p: f64) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut u, mut acc) = (0, 0, 0.0, 0.0);
    while i < n && j < m {
        let (ni, nj) = ((i + 1) * m, (j + 1) * n);
        let next = ni.min(nj) as f64 / (n * m) as f64;
        acc += (next - u) * (a[i] - b[j]).abs().powf(p);
        u = next;
        if ni <= nj {
            i += 1;
        }
        if nj <= ni {
            j += 1;
        }
    }
    acc
}

pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    quantile_coupling_cost(a, b, 1.0)
}

pub fn w2_1d(a: &[f64], b: &[f64]) -> f64 {
    quantile_coupling_cost(a, b, 2.0).sqrt()
}

/// Sliced W2: root mean of 1-D squared W2 over random unit directions.
pub fn sliced_w2(a: &Mat, b: &Mat, projections: usize, seed: u64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension("particle sets differ in dimension".into()));
    }
    let d = a.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let project = |m: &Mat, dir: &[f64]| -> Vec<f64> {
        (0..m.rows()).map(|i| m.row(i).iter().zip(dir).map(|(x, w)| x * w).sum()).collect()
    };
    let mut acc = 0.0;
    for _ in 0..projections.max(1) {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        acc += quantile_coupling_cost(&project(a, &dir), &project(b, &dir), 2.0);
    }
    Ok((acc / projections.max(1) as f64).sqrt())
}

/// Exact assignment when the sets have equal size `n ≤ 2000`, otherwise the
/// sliced estimate, labelled as such.
pub fn empirical_w2(a: &Mat, b: &Mat, projections: usize, seed: u64) -> Result<W2Estimate> {
    if a.rows() == b.rows() && a.rows() <= EXACT_ASSIGNMENT_MAX {
        Ok(W2Estimate {
            value: empirical_w2_exact(a, b)?,
            method: W2Method::Exact,
        })
    } else {
        Ok(W2Estimate {
            value: sliced_w2(a, b, projections, seed)?,
            method: W2Method::Sliced { projections },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerMaruyamaConfig {
    pub n_paths: usize,
    pub dt: f64,
    /// Marginals are returned at these times (snapped to the step grid).
    pub times: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub initial_mean: f64,
    #[serde(default = "one")]
    pub initial_std: f64,
}

fn one() -> f64 {
    1.0
}

/// `X_{j+1} = X_j - V'(X_j) dt + √(2dt) ξ_j` for a 1-D potential; one
/// marginal per requested time.
pub fn euler_maruyama_1d(potential: &PotentialSpec, cfg: &EulerMaruyamaConfig) -> Result<Vec<Vec<f64>>> {
    if !matches!(potential.dim(), None | Some(1)) {
        return Err(Error::Dimension("Euler-Maruyama reference needs a 1-D potential".into()));
    }
    if !(cfg.dt > 0.0) || cfg.times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::Config("dt must be positive and times non-negative".into()));
    }
    let steps: Vec<usize> = cfg.times.iter().map(|t| (t / cfg.dt).round() as usize).collect();
    let last = steps.iter().copied().max().unwrap_or(0);
    let mut order: Vec<usize> = (0..steps.len()).collect();
    order.sort_by_key(|&i| steps[i]);
    let mut out = vec![Vec::with_capacity(cfg.n_paths); steps.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amp = (2.0 * cfg.dt).sqrt();
    let mut g = [0.0];
    for path in 0..cfg.n_paths {
        let z: f64 = StandardNormal.sample(&mut rng);
        let mut x = cfg.initial_mean + cfg.initial_std * z;
        let mut next = 0;
        for step in 0..=last {
            while next < order.len() && steps[order[next]] == step {
                out[order[next]].push(x);
                next += 1;
            }
            if step == last {
                break;
            }
            potential.gradient(&[x], &mut g);
            if !g[0].is_finite() {
                return Err(Error::NonFinite {
                    what: "drift",
                    layer: step,
                    particle: path,
                });
            }
            let xi: f64 = StandardNormal.sample(&mut rng);
            x += -g[0] * cfg.dt + amp * xi;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SteadyStateSpec {
    UnitDisk,
    Annulus { inner: f64, outer: f64 },
    Gaussian(GaussianState),
}

impl SteadyStateSpec {
    /// Annulus radii for the log-confinement drift: `R_i = √(α1/α2)`, `R_o = √(R_i² + 1)`.
    pub fn annulus_from_confinement(alpha1: f64, alpha2: f64) -> Result<Self> {
        if !(alpha1 > 0.0 && alpha2 > 0.0) {
            return Err(Error::Config("confinement coefficients must be positive".into()));
        }
        let inner = (alpha1 / alpha2).sqrt();
        Ok(SteadyStateSpec::Annulus {
            inner,
            outer: (inner * inner + 1.0).sqrt(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SteadyStateSpec::Annulus { inner, outer } if !(*inner > 0.0 && inner < outer) => {
                Err(Error::Config(format!("annulus needs 0 < inner < outer, got {inner}, {outer}")))
            }
            SteadyStateSpec::Gaussian(g) => g.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateReport {
    pub n: usize,
    pub max_radius: f64,
    /// `(level, radius)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    pub ks_statistic: f64,
    pub ks_critical_1pct: f64,
    pub ks_pass: bool,
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_62 / (n as f64).sqrt()
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

fn radii(particles: &Mat) -> Vec<f64> {
    (0..particles.rows())
        .map(|i| particles.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Radial statistics of 2-D particles against an exact steady state. For a
/// Gaussian state the radius is the Mahalanobis one and its square is tested
/// against the χ² law.
pub fn steady_state_check(particles: &Mat, spec: &SteadyStateSpec) -> Result<SteadyStateReport> {
    spec.validate()?;
    let n = particles.rows();
    if n == 0 {
        return Err(Error::Dimension("empty particle set".into()));
    }
    let (r, ks) = match spec {
        SteadyStateSpec::UnitDisk | SteadyStateSpec::Annulus { .. } => {
            if particles.cols() != 2 {
                return Err(Error::Dimension("radial checks need 2-D particles".into()));
            }
            let r = radii(particles);
            let ks = match *spec {
                SteadyStateSpec::Annulus { inner, outer } => {
                    let (a, b) = (inner * inner, outer * outer);
                    ks_statistic(&r, |x| ((x * x - a) / (b - a)).clamp(0.0, 1.0))
                }
                _ => ks_statistic(&r, |x| (x * x).min(1.0)),
            };
            (r, ks)
        }
        SteadyStateSpec::Gaussian(g) => {
            if particles.cols() != g.dim() {
                return Err(Error::Dimension("particles and Gaussian state differ in dimension".into()));
            }
            let prec = sym_apply(&g.cov(), |v| 1.0 / v)?;
            let mu = g.mean_vec();
            let r: Vec<f64> = (0..n)
                .map(|i| {
                    let x = DVector::from_column_slice(particles.row(i)) - &mu;
                    x.dot(&(&prec * &x)).sqrt()
                })
                .collect();
            let chi = ChiSquared::new(g.dim() as f64).map_err(|e| Error::Numerical(e.to_string()))?;
            let ks = ks_statistic(&r, |x| chi.cdf(x * x));
            (r, ks)
        }
    };
    let mut sorted = r.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = [0.1, 0.25, 0.5, 0.75, 0.9, 0.99]
        .iter()
        .map(|&q| (q, sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)]))
        .collect();
    let crit = ks_critical_1pct(n);
    Ok(SteadyStateReport {
        n,
        max_radius: sorted[n - 1],
        quantiles,
        ks_statistic: ks,
        ks_critical_1pct: crit,
        ks_pass: ks < crit,
    })
}

/// Moment fit of a uniform annulus: `r²` is uniform on `[R_i², R_o²]`, so
/// `R_{i,o}² = m ∓ √(3v)` with `m`, `v` the mean and variance of `r²`.
pub fn fit_annulus(particles: &Mat) -> Result<(f64, f64)> {
    let r2: Vec<f64> = radii(particles).iter().map(|r| r * r).collect();
    let n = r2.len() as f64;
    if r2.len() < 2 {
        return Err(Error::Dimension("need at least two particles".into()));
    }
    let m = r2.iter().sum::<f64>() / n;
    let v = r2.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let half = (3.0 * v).sqrt();
    if m - half <= 0.0 {
        return Err(Error::Numerical("fitted inner radius is not positive".into()));
    }
    Ok(((m - half).sqrt(), (m + half).sqrt()))
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
