#![allow(dead_code)]

pub mod checks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wgpath::energy::{FreeEnergySpec, InternalEnergySpec, PotentialSpec};
use wgpath::flow::{Activation, BaseDistribution, CouplingKind, FlowArch, FlowModel};
use wgpath::losses::{GeometricConfig, ParametrizationPenalty, PhysicalTimeConfig};
use wgpath::trainer::{loss_and_gradient, loss_value, loss_with_fixed_velocities, TrainMode};
use wgpath::velocity::path_velocities;
use wgpath::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// d = 1, K = 2, width 4, with perturbed parameters.
pub fn tiny_model(coupling: CouplingKind, seed: u64) -> FlowModel {
    let mut r = rng(seed);
    let arch = FlowArch {
        layers: 2,
        hidden_width: 4,
        hidden_layers: 2,
        activation: Activation::Tanh,
        coupling,
    };
    let mut m = FlowModel::new(BaseDistribution::StandardGaussian { dim: 1 }, arch, &mut r).unwrap();
    m.perturb(0.3, &mut r);
    m
}

pub fn entropy_quadratic_1d() -> FreeEnergySpec {
    FreeEnergySpec {
        internal: Some(InternalEnergySpec::Entropy { beta: 1.0 }),
        potential: PotentialSpec::quadratic(vec![1.5], vec![vec![0.5]]).unwrap(),
        ..Default::default()
    }
}

pub fn power_law_quadratic_1d() -> FreeEnergySpec {
    FreeEnergySpec {
        internal: Some(InternalEnergySpec::PowerLaw { exponent: 2.0, beta: 2.0 }),
        potential: PotentialSpec::quadratic(vec![0.5], vec![vec![1.0]]).unwrap(),
        total_mass: 1.5,
        ..Default::default()
    }
}

pub fn modes() -> Vec<(&'static str, TrainMode)> {
    vec![
        ("physical-time", TrainMode::PhysicalTime(PhysicalTimeConfig::uniform(0.5, 2))),
        (
            "geometric/arc-length",
            TrainMode::Geometric(GeometricConfig {
                alpha_term: 0.7,
                alpha_arc: 0.3,
                penalty: ParametrizationPenalty::ArcLength,
            }),
        ),
        (
            "geometric/arc-action",
            TrainMode::Geometric(GeometricConfig {
                alpha_term: 0.7,
                alpha_arc: 0.3,
                penalty: ParametrizationPenalty::ArcAction,
            }),
        ),
    ]
}

/// Largest relative discrepancy between the tape gradient and central
/// differences (step `h`) over every parameter entry. In detached mode the
/// differenced loss keeps the velocity fields of the unperturbed model. Entries are compared
/// relative to `max(|fd|, |g|, 1e-3 · ‖g‖_∞)`.
pub fn gradient_check(
    model: &FlowModel,
    energy: &FreeEnergySpec,
    mode: &TrainMode,
    detach: bool,
    z: &Mat,
    h: f64,
) -> f64 {
    let (_, grads) = loss_and_gradient(model, energy, mode, detach, z).unwrap();
    let gmax = grads.iter().map(|g| g.max_abs()).fold(0.0, f64::max);
    let fixed = detach.then(|| {
        let batch = model.push_forward(z).unwrap();
        path_velocities(model, &batch, energy).unwrap()
    });
    let eval = |m: &FlowModel| match &fixed {
        Some(f) => loss_with_fixed_velocities(m, energy, mode, f, z).unwrap().total,
        None => loss_value(m, energy, mode, false, z).unwrap().total,
    };
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    for p in 0..grads.len() {
        for i in 0..grads[p].len() {
            let orig = m.params()[p].as_slice()[i];
            m.params_mut()[p].as_mut_slice()[i] = orig + h;
            let fp = eval(&m);
            m.params_mut()[p].as_mut_slice()[i] = orig - h;
            let fm = eval(&m);
            m.params_mut()[p].as_mut_slice()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let g = grads[p].as_slice()[i];
            let scale = fd.abs().max(g.abs()).max(1e-3 * gmax);
            worst = worst.max((fd - g).abs() / scale);
        }
    }
    worst
}
