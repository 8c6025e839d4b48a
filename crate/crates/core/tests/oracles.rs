mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use wgpath::energy::PotentialSpec;
use wgpath::oracles::*;
use wgpath::Mat;

fn block_target() -> GaussianState {
    let mut cov = vec![vec![0.0; 10]; 10];
    cov[0][0] = 5.0 / 8.0;
    cov[1][1] = 5.0 / 8.0;
    cov[0][1] = -3.0 / 8.0;
    cov[1][0] = -3.0 / 8.0;
    let d = [1.0, 1.0, 1.0, 0.25, 1.0, 1.0, 0.25, 0.25];
    for (i, v) in d.iter().enumerate() {
        cov[i + 2][i + 2] = *v;
    }
    GaussianState::new(vec![1.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0, 3.0], cov).unwrap()
}

/// Hand-derived law of the 10-D block problem from N(0, I). The first block
/// has eigenvalue 1/4 along (1,1) and 1 along (1,-1), so only the (1,1)
/// component relaxes, with mean rate 4 and variance rate 8.
fn block_closed_form(t: f64) -> GaussianState {
    let e4 = (-4.0 * t).exp();
    let e8 = (-8.0 * t).exp();
    let e1 = (-t).exp();
    let mut cov = vec![vec![0.0; 10]; 10];
    cov[0][0] = (5.0 + 3.0 * e8) / 8.0;
    cov[1][1] = cov[0][0];
    cov[0][1] = -(3.0 - 3.0 * e8) / 8.0;
    cov[1][0] = cov[0][1];
    let q = (1.0 + 3.0 * e8) / 4.0;
    for (i, v) in [1.0, 1.0, 1.0, q, 1.0, 1.0, q, q].iter().enumerate() {
        cov[i + 2][i + 2] = *v;
    }
    let mean = vec![
        1.0 - e4,
        1.0 - e4,
        0.0,
        0.0,
        1.0 - e1,
        2.0 * (1.0 - e4),
        0.0,
        0.0,
        2.0 * (1.0 - e4),
        3.0 * (1.0 - e4),
    ];
    GaussianState { mean, covariance: cov }
}

fn max_gap(a: &GaussianState, b: &GaussianState) -> f64 {
    (a.mean_vec() - b.mean_vec()).amax().max((a.cov() - b.cov()).amax())
}

#[test]
fn ou_block_routes_agree_with_each_other_and_the_closed_form() {
    let init = GaussianState::isotropic(vec![0.0; 10], 1.0).unwrap();
    let target = block_target();
    for &t in &[0.0, 0.01, 0.1, 0.37, 1.0, 2.5, 8.0] {
        let g = ou_exact_general(t, &init, &target).unwrap();
        let b = ou_exact_blockwise(t, &init, &target).unwrap();
        assert!(max_gap(&g, &b) <= 1e-12, "t = {t}: routes differ by {:e}", max_gap(&g, &b));
        let exact = block_closed_form(t);
        assert!(max_gap(&b, &exact) <= 1e-12, "t = {t}: closed form differs by {:e}", max_gap(&b, &exact));
        assert!(max_gap(&ou_exact(t, &init, &target).unwrap(), &exact) <= 1e-12);
    }
}

#[test]
fn ou_exact_matches_a_fine_moment_integration() {
    // Independent check with a coupled, non-commuting initial covariance:
    // RK4 on dμ/dt = -A(μ - m), dΣ/dt = -AΣ - ΣA + 2I.
    let init = GaussianState::new(vec![0.5, -1.0], vec![vec![2.0, 0.6], vec![0.6, 0.5]]).unwrap();
    let target = GaussianState::new(vec![3.0, 1.0], vec![vec![0.8, 0.3], vec![0.3, 0.4]]).unwrap();
    let a = target.cov().try_inverse().unwrap();
    let m = target.mean_vec();
    let rhs = |mu: &nalgebra::DVector<f64>, s: &DMatrix<f64>| {
        (-(&a * (mu - &m)), -(&a * s) - s * &a + DMatrix::identity(2, 2) * 2.0)
    };
    let (mut mu, mut s) = (init.mean_vec(), init.cov());
    let h = 1e-4;
    for _ in 0..7000 {
        let (k1m, k1s) = rhs(&mu, &s);
        let (k2m, k2s) = rhs(&(&mu + &k1m * (h / 2.0)), &(&s + &k1s * (h / 2.0)));
        let (k3m, k3s) = rhs(&(&mu + &k2m * (h / 2.0)), &(&s + &k2s * (h / 2.0)));
        let (k4m, k4s) = rhs(&(&mu + &k3m * h), &(&s + &k3s * h));
        mu += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
        s += (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (h / 6.0);
    }
    let g = ou_exact(0.7, &init, &target).unwrap();
    assert!((g.mean_vec() - mu).amax() < 1e-10);
    assert!((g.cov() - s).amax() < 1e-10);
}

#[test]
fn one_dimensional_w2_matches_quantile_quadrature() {
    let a = GaussianState::new(vec![0.0], vec![vec![1.0]]).unwrap();
    let b = GaussianState::new(vec![0.0], vec![vec![0.25]]).unwrap();
    let (na, nb) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(0.0, 0.5).unwrap());
    let m = 200_000;
    let quad: f64 = (0..m)
        .map(|i| {
            let u = (i as f64 + 0.5) / m as f64;
            (na.inverse_cdf(u) - nb.inverse_cdf(u)).powi(2)
        })
        .sum::<f64>()
        / m as f64;
    let w = gaussian_w2(&a, &b).unwrap();
    assert!((w - 0.5).abs() < 1e-12);
    assert!((w - quad.sqrt()).abs() < 1e-3);
}

fn sample_gaussian(g: &GaussianState, n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let l = g.cov().cholesky().unwrap().l();
    let d = g.dim();
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let z = nalgebra::DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let x = &l * z;
        for j in 0..d {
            out[(i, j)] = g.mean[j] + x[j];
        }
    }
    out
}

#[test]
fn exact_empirical_w2_is_consistent_with_bures_wasserstein() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = GaussianState::new(vec![0.0, 0.0], vec![vec![1.0, 0.3], vec![0.3, 0.6]]).unwrap();
    let b = GaussianState::new(vec![1.0, -0.5], vec![vec![0.5, 0.0], vec![0.0, 1.2]]).unwrap();
    let n = 1000;
    let (xa, xb) = (sample_gaussian(&a, n, &mut rng), sample_gaussian(&b, n, &mut rng));
    let w = empirical_w2_exact(&xa, &xb).unwrap();
    // Finite-sample bound from the triangle inequality, each sampling error
    // estimated by the distance between two independent draws of one law.
    let bias = empirical_w2_exact(&xa, &sample_gaussian(&a, n, &mut rng)).unwrap()
        + empirical_w2_exact(&xb, &sample_gaussian(&b, n, &mut rng)).unwrap();
    let reps = 8;
    let boots: Vec<f64> = (0..reps)
        .map(|_| {
            let ia: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let ib: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            empirical_w2_exact(&xa.select_rows(&ia), &xb.select_rows(&ib)).unwrap()
        })
        .collect();
    let mb = boots.iter().sum::<f64>() / reps as f64;
    let se = (boots.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let truth = gaussian_w2(&a, &b).unwrap();
    assert!((w - truth).abs() <= 3.0 * se + bias, "empirical {w}, exact {truth}, se {se}, bias {bias}");
}

#[test]
fn sliced_estimate_is_close_for_isotropic_shift() {
    // For a pure translation every projection sees the projected shift, so
    // the sliced value is ‖δ‖/√d.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = sample_gaussian(&GaussianState::isotropic(vec![0.0, 0.0], 1.0).unwrap(), 3000, &mut rng);
    let b = a.map(|x| x + 1.0);
    let e = empirical_w2(&a, &b, DEFAULT_PROJECTIONS, 1).unwrap();
    assert_eq!(e.method, W2Method::Sliced { projections: DEFAULT_PROJECTIONS });
    assert!((e.value - 1.0).abs() < 0.1, "{}", e.value);
}

#[test]
fn euler_maruyama_brownian_variance() {
    let cfg = EulerMaruyamaConfig {
        n_paths: 20_000,
        dt: 1e-3,
        times: vec![0.5, 1.0],
        seed: 1,
        initial_mean: 0.0,
        initial_std: 0.0,
    };
    let m = euler_maruyama_1d(&PotentialSpec::None, &cfg).unwrap();
    for (x, t) in m.iter().zip(&cfg.times) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = 2.0 * t * (2.0 / (n - 1.0)).sqrt();
        assert!((var - 2.0 * t).abs() < 3.0 * se, "t = {t}: var {var}");
    }
}

#[test]
fn euler_maruyama_quadratic_stationary_variance() {
    let v = PotentialSpec::quadratic(vec![0.0], vec![vec![1.0]]).unwrap();
    let cfg = EulerMaruyamaConfig {
        n_paths: 5000,
        dt: 1e-3,
        times: vec![10.0],
        seed: 2,
        initial_mean: 0.0,
        initial_std: 1.0,
    };
    let x = &euler_maruyama_1d(&v, &cfg).unwrap()[0];
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1.0)).sqrt(), "var {var}");
}

#[test]
fn euler_maruyama_reaches_styblinski_tang_gibbs_law() {
    let v = PotentialSpec::StyblinskiTang { scale: 3.0 / 50.0 };
    // Gibbs CDF of e^{-V} by trapezoid quadrature.
    let (lo, hi, m) = (-8.0, 8.0, 160_001);
    let h = (hi - lo) / (m - 1) as f64;
    let dens: Vec<f64> = (0..m).map(|i| (-v.value(&[lo + i as f64 * h])).exp()).collect();
    let mut cdf = vec![0.0; m];
    for i in 1..m {
        cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
    }
    let z = cdf[m - 1];
    cdf.iter_mut().for_each(|c| *c /= z);
    // With 5000 paths the Monte-Carlo W1 floor alone is about 0.03 (95th
    // percentile 0.065), so more paths are used; relaxation time is about 47.
    let cfg = EulerMaruyamaConfig {
        n_paths: 40_000,
        dt: 1e-2,
        times: vec![250.0],
        seed: 4,
        initial_mean: 0.0,
        initial_std: 1.0,
    };
    let mut x = euler_maruyama_1d(&v, &cfg).unwrap().remove(0);
    x.sort_by(f64::total_cmp);
    // W1 = ∫|F_n - F|.
    let n = x.len() as f64;
    let mut j = 0;
    let mut w1 = 0.0;
    for i in 0..m - 1 {
        let s = lo + (i as f64 + 0.5) * h;
        while j < x.len() && x[j] <= s {
            j += 1;
        }
        w1 += h * (j as f64 / n - 0.5 * (cdf[i] + cdf[i + 1])).abs();
    }
    assert!(w1 <= 0.05, "W1 to Gibbs law = {w1}");
}

#[test]
fn euler_maruyama_weak_order_one() {
    let (errs, slope) = common::checks::em_weak_order();
    assert!((slope - 1.0).abs() < 0.3, "errors {errs:?}, slope {slope}");
}

#[test]
fn random_gaussian_triples_obey_the_triangle_inequality() {
    let (tri, sym) = common::checks::bures_triangle_worst(400, 5);
    assert!(tri <= 1e-10 && sym <= 1e-10, "{tri} {sym}");
}

#[test]
fn assignment_matches_sorted_coupling_on_larger_samples() {
    assert!(common::checks::assignment_vs_sorted_worst(30, 6) <= 1e-9);
}

#[test]
fn euler_maruyama_rejects_bad_input() {
    let cfg = EulerMaruyamaConfig {
        n_paths: 1,
        dt: 0.0,
        times: vec![1.0],
        seed: 0,
        initial_mean: 0.0,
        initial_std: 1.0,
    };
    assert!(euler_maruyama_1d(&PotentialSpec::None, &cfg).is_err());
    let two_d = PotentialSpec::quadratic(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(euler_maruyama_1d(&two_d, &EulerMaruyamaConfig { dt: 0.1, ..cfg }).is_err());
}

fn disk_samples(n: usize, inner: f64, outer: f64, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(n, 2);
    for i in 0..n {
        let u: f64 = rng.gen();
        let r = (inner * inner + u * (outer * outer - inner * inner)).sqrt();
        let th = rng.gen::<f64>() * std::f64::consts::TAU;
        m[(i, 0)] = r * th.cos();
        m[(i, 1)] = r * th.sin();
    }
    m
}

#[test]
fn steady_state_null_and_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let disk = disk_samples(5000, 0.0, 1.0, &mut rng);
    let rep = steady_state_check(&disk, &SteadyStateSpec::UnitDisk).unwrap();
    assert!(rep.ks_pass, "{rep:?}");
    assert!(rep.max_radius <= 1.0 && rep.max_radius > 0.99);

    let spec = SteadyStateSpec::annulus_from_confinement(1.0, 1.0).unwrap();
    let ann = disk_samples(5000, 1.0, 2f64.sqrt(), &mut rng);
    assert!(steady_state_check(&ann, &spec).unwrap().ks_pass);
    let (ri, ro) = fit_annulus(&ann).unwrap();
    assert!((ri - 1.0).abs() < 0.02 && (ro - 2f64.sqrt()).abs() < 0.02);
    let shrunk = ann.map(|x| 0.9 * x);
    assert!(!steady_state_check(&shrunk, &spec).unwrap().ks_pass);

    let g = GaussianState::new(vec![1.0, -1.0], vec![vec![0.5, 0.2], vec![0.2, 0.3]]).unwrap();
    let xg = sample_gaussian(&g, 5000, &mut rng);
    assert!(steady_state_check(&xg, &SteadyStateSpec::Gaussian(g)).unwrap().ks_pass);
}

#[test]
fn nearest_time_recovers_the_sampling_time() {
    let init = GaussianState::isotropic(vec![0.0, 0.0], 1.0).unwrap();
    let target = GaussianState::isotropic(vec![3.0, 3.0], 0.25).unwrap();
    let law = |t: f64| ou_exact(t, &init, &target);
    let (t, w) = w2_nearest_time(&law(0.3).unwrap(), law, 2.0, 2001).unwrap();
    assert!((t - 0.3).abs() < 1e-6 && w < 1e-6);
}

fn spd(seed: &[f64]) -> Vec<Vec<f64>> {
    let b = DMatrix::from_row_slice(2, 2, seed);
    let m = &b * b.transpose() + DMatrix::identity(2, 2) * 0.05;
    (0..2).map(|i| (0..2).map(|j| m[(i, j)]).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bures_wasserstein_triangle_inequality(
        m in prop::collection::vec(-3.0f64..3.0, 6),
        c in prop::collection::vec(-2.0f64..2.0, 12),
    ) {
        let g: Vec<GaussianState> = (0..3)
            .map(|k| GaussianState::new(m[2 * k..2 * k + 2].to_vec(), spd(&c[4 * k..4 * k + 4])).unwrap())
            .collect();
        let d = |a: usize, b: usize| gaussian_w2(&g[a], &g[b]).unwrap();
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-10);
        prop_assert!((d(0, 1) - d(1, 0)).abs() <= 1e-10);
    }

    #[test]
    fn exact_assignment_in_one_dimension_is_the_sorted_coupling(
        a in prop::collection::vec(-10.0f64..10.0, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-10.0..10.0)).collect();
        let exact = empirical_w2_exact(&Mat::column(&a), &Mat::column(&b)).unwrap();
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let sorted = (sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        prop_assert!((exact - sorted).abs() <= 1e-9 * sorted.max(1.0));
        prop_assert!((w2_1d(&a, &b) - sorted).abs() <= 1e-9 * sorted.max(1.0));
    }
}
