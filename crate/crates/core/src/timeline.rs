//! Physical-time recovery for a geometric path.
//!
//! With `Δτ = 1/K`, the path-length constant is
//! `c = (F₀ - F_K) / Σ_k (v_{k-1} + v_k)/2 · Δτ` and each segment lasts
//! `Δt_k = (c Δτ / 2)(1/v_{k-1} + 1/v_k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Mesh, PhysicalTimeConfig};
use crate::velocity::PathDiagnostics;

/// Velocity norms at or below this value mark an equilibrium-reached segment.
pub const V_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredTimeline {
    pub c: f64,
    /// `K+1` timestamps; `None` from the first censored segment on.
    pub t: Vec<Option<f64>>,
    /// `K` durations; `None` for right-censored segments.
    pub dt: Vec<Option<f64>>,
    pub censored: bool,
    #[serde(rename = "F0")]
    pub f0: f64,
    #[serde(rename = "FK")]
    pub fk: f64,
}

impl RecoveredTimeline {
    /// Finite timestamps (up to the first censored segment).
    pub fn finite_times(&self) -> Vec<f64> {
        self.t.iter().map_while(|t| *t).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn recover_time(diag: &PathDiagnostics, f0: f64, fk: f64) -> Result<RecoveredTimeline> {
    recover_time_from_norms(&diag.v, f0, fk)
}

/// [`recover_time`] from the `K+1` velocity norms alone.
pub fn recover_time_from_norms(v: &[f64], f0: f64, fk: f64) -> Result<RecoveredTimeline> {
    if v.len() < 2 {
        return Err(Error::Dimension("need at least one segment".into()));
    }
    if !(f0 > fk) {
        return Err(Error::Numerical(format!(
            "free energy does not decrease along the path (F0 = {f0}, FK = {fk})"
        )));
    }
    if let Some(k) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NonFinite {
            what: "velocity norm",
            layer: k,
            particle: 0,
        });
    }
    let k = v.len() - 1;
    let dtau = 1.0 / k as f64;
    let denom: f64 = v.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dtau).sum();
    let c = (f0 - fk) / denom;
    let dt: Vec<Option<f64>> = v
        .windows(2)
        .map(|w| {
            if w[0] <= V_FLOOR || w[1] <= V_FLOOR {
                None
            } else {
                Some(0.5 * c * dtau * (1.0 / w[0] + 1.0 / w[1]))
            }
        })
        .collect();
    let mut t = Vec::with_capacity(k + 1);
    let mut acc = Some(0.0);
    t.push(acc);
    for d in &dt {
        acc = match (acc, d) {
            (Some(a), Some(d)) => Some(a + d),
            _ => None,
        };
        t.push(acc);
    }
    Ok(RecoveredTimeline {
        c,
        censored: dt.iter().any(Option::is_none),
        t,
        dt,
        f0,
        fk,
    })
}

/// Explicit physical-time mesh from a recovered timeline. Censored segments
/// reuse the last finite step, so a censored terminal segment ends at
/// `t_{K-1} + Δt_{K-1}`.
pub fn export_mesh(tl: &RecoveredTimeline) -> Result<PhysicalTimeConfig> {
    let mut times = vec![0.0];
    let mut last: Option<f64> = None;
    for d in &tl.dt {
        let step = match (d, last) {
            (Some(d), _) => *d,
            (None, Some(l)) => l,
            (None, None) => {
                return Err(Error::Numerical("first segment is censored; no finite step to reuse".into()));
            }
        };
        last = Some(step);
        times.push(times.last().expect("non-empty") + step);
    }
    let horizon = *times.last().expect("non-empty");
    Ok(PhysicalTimeConfig {
        horizon,
        steps: tl.dt.len(),
        mesh: Mesh::Explicit { times },
        weights: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_speed_closed_form() {
        let (v, k, df) = (0.8, 5, 3.0);
        let tl = recover_time_from_norms(&vec![v; k + 1], df, 0.0).unwrap();
        assert!((tl.c - df / v).abs() < 1e-12);
        for d in &tl.dt {
            assert!((d.unwrap() - df / (k as f64 * v * v)).abs() < 1e-12);
        }
        assert!((tl.t[k].unwrap() - df / (v * v)).abs() < 1e-12);
        let mesh = export_mesh(&tl).unwrap();
        let Mesh::Explicit { times } = &mesh.mesh else { panic!() };
        for (i, t) in times.iter().enumerate() {
            assert!((t - i as f64 * df / (k as f64 * v * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_example() {
        let tl = recover_time_from_norms(&[2.0, 1.0], 3.0, 0.0).unwrap();
        assert!((tl.c - 2.0).abs() < 1e-15);
        assert!((tl.dt[0].unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn censoring_and_errors() {
        let tl = recover_time_from_norms(&[2.0, 1.0, 0.5, 0.0], 3.0, 0.0).unwrap();
        assert!(tl.censored);
        assert_eq!(tl.dt[2], None);
        assert_eq!(tl.t[3], None);
        assert_eq!(tl.finite_times().len(), 3);
        let mesh = export_mesh(&tl).unwrap();
        let Mesh::Explicit { times } = &mesh.mesh else { panic!() };
        assert!((times[3] - times[2] - tl.dt[1].unwrap()).abs() < 1e-14);
        assert!(recover_time_from_norms(&[1.0, 1.0], 0.0, 0.0).is_err());
        assert!(recover_time_from_norms(&[1.0, 1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let tl = recover_time_from_norms(&[0.3, 0.71, 0.123456789, 1e-9], 2.0 / 3.0, -0.1).unwrap();
        let back = RecoveredTimeline::from_json(&tl.to_json().unwrap()).unwrap();
        assert_eq!(tl, back);
        let json = tl.to_json().unwrap();
        assert!(json.contains("\"censored\": true") && json.contains("null"));
    }

    proptest! {
        #[test]
        fn scaling_speeds_divides_final_time_by_lambda_squared(
            v in prop::collection::vec(0.01f64..10.0, 2..12),
            lambda in 0.1f64..10.0,
            df in 0.01f64..10.0,
        ) {
            let a = recover_time_from_norms(&v, df, 0.0).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * lambda).collect();
            let b = recover_time_from_norms(&scaled, df, 0.0).unwrap();
            let ta = a.t.last().unwrap().unwrap();
            let tb = b.t.last().unwrap().unwrap();
            prop_assert!((tb - ta / (lambda * lambda)).abs() <= 1e-10 * ta.max(1.0));
            prop_assert!((b.c - a.c / lambda).abs() <= 1e-10 * a.c.max(1.0));
        }

        #[test]
        fn timestamps_increase(v in prop::collection::vec(1e-6f64..10.0, 2..12), df in 1e-3f64..5.0) {
            let tl = recover_time_from_norms(&v, df, 0.0).unwrap();
            prop_assert!(tl.c > 0.0);
            prop_assert_eq!(tl.t[0], Some(0.0));
            for w in tl.t.windows(2) {
                prop_assert!(w[1].unwrap() > w[0].unwrap());
            }
        }

        #[test]
        fn slowing_an_interior_layer_lengthens_its_segments(
            v in prop::collection::vec(0.05f64..5.0, 3..10),
            idx in 0usize..100,
            shrink in 0.1f64..0.99,
        ) {
            // With ΔF fixed, c also changes; the segment touching the slowed
            // layer still lengthens because 1/v grows faster than c shrinks.
            let i = 1 + idx % (v.len() - 2);
            let a = recover_time_from_norms(&v, 1.0, 0.0).unwrap();
            let mut w = v.clone();
            w[i] *= shrink;
            let b = recover_time_from_norms(&w, 1.0, 0.0).unwrap();
            prop_assert!(b.dt[i].unwrap() > a.dt[i].unwrap());
        }
    }
}
