mod common;

use common::checks::*;
use wgpath::losses::{arc_action_penalty, arc_length_penalty, geometric_loss};
use wgpath::velocity::PathDiagnostics;

fn diag(d: Vec<f64>, v: Vec<f64>) -> PathDiagnostics {
    PathDiagnostics {
        cosine: vec![None; d.len()],
        d,
        v,
        free_energy: Vec::new(),
    }
}

#[test]
fn penalties_match_direct_recomputation() {
    let d: Vec<f64> = rng_normal(7, 5).iter().map(|x| x.abs() + 0.1).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let p = arc_length_penalty(&diag(d.clone(), vec![1.0; d.len() + 1]));
    assert!((p - var / mean).abs() < 1e-14);
    assert!((arc_action_penalty(&[0.0, -2.0, -3.0]) - 1.0 / 6.0).abs() < 1e-15);
    assert!((geometric_loss(&diag(vec![1.0, 1.0], vec![2.0; 3])) - 4.0).abs() < 1e-15);
}

#[test]
fn geometric_loss_is_second_order_in_layers() {
    let errs = geometric_order_errors(&[4, 8, 16, 32]);
    let (k, e): (Vec<f64>, Vec<f64>) = errs.iter().map(|(k, e)| (*k as f64, *e)).unzip();
    let slope = loglog_slope(&k, &e);
    println!("errors {errs:?} slope {slope}");
    assert!((slope + 2.0).abs() <= 0.3, "slope {slope}");
}

#[test]
fn crank_nicolson_defect_is_fourth_order() {
    let z = rng_normal(2000, 3);
    for k in [4, 8, 16] {
        let (a, b) = (ou_cn_loss(&z, k), ou_cn_loss_scalar(&z, k));
        assert!((a - b).abs() <= 1e-12 * b, "K={k}: {a} vs {b}");
    }
    let losses = cn_order_losses(&[4, 8, 16], 100_000);
    let (k, l): (Vec<f64>, Vec<f64>) = losses.iter().map(|(k, e)| (*k as f64, *e)).unzip();
    let slope = loglog_slope(&k, &l);
    println!("losses {losses:?} slope {slope}");
    assert!((slope + 4.0).abs() <= 0.5, "slope {slope}");
}

#[test]
fn geometric_loss_is_nearly_reparametrization_invariant() {
    let z = normal_nodes(2000);
    let a = slide_discrete_loss(&z, 64, |t| t);
    let b = slide_discrete_loss(&z, 64, |t| t * t);
    let c = slide_discrete_loss(&z, 64, |t| 0.5 * (1.0 - (std::f64::consts::PI * t).cos()));
    println!("{a} {b} {c}");
    assert!((a - b).abs() <= 0.02 * a);
    assert!((a - c).abs() <= 0.02 * a);
}

#[test]
fn geometric_loss_bounds_the_energy_drop() {
    // Target variance 1/2: the velocity 6 - 2m - z is aligned with the slide
    // only on average, so the loss strictly exceeds the drop.
    let z = normal_nodes(4000);
    let spec = slide_energy();
    let loss = slide_discrete_loss_for(&z, 64, |t| t, &spec);
    let drop = slide_free_energy(&z, 0.0, &spec) - slide_free_energy(&z, 3.0, &spec);
    println!("misaligned: loss {loss} drop {drop}");
    assert!(drop > 0.0 && loss > drop);

    // Target variance 1: the velocity 3 - m is exactly the slide direction.
    let spec = slide_energy_with_variance(1.0);
    let loss = slide_discrete_loss_for(&z, 64, |t| t, &spec);
    let drop = slide_free_energy(&z, 0.0, &spec) - slide_free_energy(&z, 3.0, &spec);
    println!("aligned: loss {loss} drop {drop}");
    assert!((loss - drop).abs() <= 1e-9 * drop);
    assert!((drop - 4.5).abs() < 1e-9);
}
