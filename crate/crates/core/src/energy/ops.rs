//! Tape operations for the potential and interaction terms. Their backward
//! rules use the analytic Hessian-vector products of the specs.

use std::rc::Rc;

use crate::autodiff::CustomOp;
use crate::tensor::Mat;

use super::{KernelSpec, PotentialSpec};

/// `x (N x d) -> ∇V(xᵢ)` row by row.
pub struct PotentialGradOp(pub PotentialSpec);

/// `[x, g] -> ∇²V(xᵢ) gᵢ`.
struct PotentialHvpOp(PotentialSpec);

/// `x (N x d) -> V(xᵢ)` as an `N x 1` column.
pub struct PotentialValueOp(pub PotentialSpec);

/// `[x, g] -> gᵢ ∇V(xᵢ)` with `g` an `N x 1` column.
struct PotentialValueVjp(PotentialSpec);

/// `x (N x d) -> w Σ_{j≠i} ∇W(xᵢ - xⱼ)`.
pub struct PairForceOp {
    pub kernel: KernelSpec,
    pub weight: f64,
}

/// `[x, g] -> w Σ_{j≠k} ∇²W(x_k - xⱼ)(g_k - gⱼ)`.
struct PairForceVjp {
    kernel: KernelSpec,
    weight: f64,
}

/// `x (N x d) -> mean_{i≠j} W(xᵢ - xⱼ)` as a `1 x 1` matrix.
pub struct PairEnergyOp(pub KernelSpec);

/// `[x, g] -> g · 2/(N(N-1)) Σ_{j≠i} ∇W(xᵢ - xⱼ)`.
struct PairEnergyVjp(KernelSpec);

impl CustomOp for PotentialGradOp {
    fn name(&self) -> &str {
        "potential_grad"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let x = inputs[0];
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.0.gradient(x.row(i), out.row_mut(i));
        }
        out
    }

    fn vjp_op(&self, input: usize) -> Option<Rc<dyn CustomOp>> {
        (input == 0).then(|| Rc::new(PotentialHvpOp(self.0.clone())) as Rc<dyn CustomOp>)
    }
}

impl CustomOp for PotentialHvpOp {
    fn name(&self) -> &str {
        "potential_hvp"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let (x, g) = (inputs[0], inputs[1]);
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.0.hvp(x.row(i), g.row(i), out.row_mut(i));
        }
        out
    }

    fn vjp_op(&self, _input: usize) -> Option<Rc<dyn CustomOp>> {
        None
    }
}

impl CustomOp for PotentialValueOp {
    fn name(&self) -> &str {
        "potential_value"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let x = inputs[0];
        Mat::from_fn(x.rows(), 1, |i, _| self.0.value(x.row(i)))
    }

    fn vjp_op(&self, input: usize) -> Option<Rc<dyn CustomOp>> {
        (input == 0).then(|| Rc::new(PotentialValueVjp(self.0.clone())) as Rc<dyn CustomOp>)
    }
}

impl CustomOp for PotentialValueVjp {
    fn name(&self) -> &str {
        "potential_value_vjp"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let (x, g) = (inputs[0], inputs[1]);
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.0.gradient(x.row(i), out.row_mut(i));
            let gi = g[(i, 0)];
            for v in out.row_mut(i) {
                *v *= gi;
            }
        }
        out
    }

    fn vjp_op(&self, _input: usize) -> Option<Rc<dyn CustomOp>> {
        None
    }
}

/// Visits every unordered pair `i < j` with the displacement `xᵢ - xⱼ`.
fn for_each_pair(x: &Mat, mut f: impl FnMut(usize, usize, &[f64])) {
    let (n, d) = x.shape();
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let xi = x.row(i);
        for j in i + 1..n {
            let xj = x.row(j);
            for k in 0..d {
                diff[k] = xi[k] - xj[k];
            }
            f(i, j, &diff);
        }
    }
}

// Kernels are even, so ∇W is odd and ∇²W is even; each unordered pair is
// evaluated once.

impl CustomOp for PairForceOp {
    fn name(&self) -> &str {
        "pair_force"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let x = inputs[0];
        let d = x.cols();
        let mut out = Mat::zeros(x.rows(), d);
        let mut g = vec![0.0; d];
        for_each_pair(x, |i, j, diff| {
            self.kernel.gradient(diff, &mut g);
            for k in 0..d {
                out[(i, k)] += self.weight * g[k];
                out[(j, k)] -= self.weight * g[k];
            }
        });
        out
    }

    fn vjp_op(&self, input: usize) -> Option<Rc<dyn CustomOp>> {
        (input == 0).then(|| {
            Rc::new(PairForceVjp {
                kernel: self.kernel.clone(),
                weight: self.weight,
            }) as Rc<dyn CustomOp>
        })
    }
}

impl CustomOp for PairForceVjp {
    fn name(&self) -> &str {
        "pair_force_vjp"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let (x, g) = (inputs[0], inputs[1]);
        let d = x.cols();
        let mut out = Mat::zeros(x.rows(), d);
        let mut dg = vec![0.0; d];
        let mut h = vec![0.0; d];
        for_each_pair(x, |i, j, diff| {
            for k in 0..d {
                dg[k] = g[(i, k)] - g[(j, k)];
            }
            self.kernel.hvp(diff, &dg, &mut h);
            for k in 0..d {
                out[(i, k)] += self.weight * h[k];
                out[(j, k)] -= self.weight * h[k];
            }
        });
        out
    }

    fn vjp_op(&self, _input: usize) -> Option<Rc<dyn CustomOp>> {
        None
    }
}

impl CustomOp for PairEnergyOp {
    fn name(&self) -> &str {
        "pair_energy"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        Mat::scalar(super::pair_energy_mean(inputs[0], &self.0))
    }

    fn vjp_op(&self, input: usize) -> Option<Rc<dyn CustomOp>> {
        (input == 0).then(|| Rc::new(PairEnergyVjp(self.0.clone())) as Rc<dyn CustomOp>)
    }
}

impl CustomOp for PairEnergyVjp {
    fn name(&self) -> &str {
        "pair_energy_vjp"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let (x, g) = (inputs[0], inputs[1].item());
        let (n, d) = x.shape();
        let mut out = Mat::zeros(n, d);
        if n < 2 {
            return out;
        }
        let c = 2.0 * g / (n * (n - 1)) as f64;
        let mut gw = vec![0.0; d];
        for_each_pair(x, |i, j, diff| {
            self.0.gradient(diff, &mut gw);
            for k in 0..d {
                out[(i, k)] += c * gw[k];
                out[(j, k)] -= c * gw[k];
            }
        });
        out
    }

    fn vjp_op(&self, _input: usize) -> Option<Rc<dyn CustomOp>> {
        None
    }
}
