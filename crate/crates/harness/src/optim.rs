//! First-order optimizers over the flat list of model tensors.

use jamba_core::numerics::{Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// Optimizer state; moments are kept in f64 whatever the parameter type.
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<T: Real>(kind: OptimizerKind, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Optimizer { kind, step: 0, m, v }
    }

    /// Applies one update in place. `grads[i]` must match `params[i]`.
    pub fn update<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        let step = lr * d.f64();
                        if step != 0.0 {
                            *w = T::c(w.f64() - step);
                        }
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d.f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
                        let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        // a zero step leaves the stored value untouched, signed zeros included
                        if step != 0.0 {
                            *w = T::c(w.f64() - step);
                        }
                    }
                }
            }
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|&x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = T::c(x.f64() * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = Tensor::<f64>::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, -3.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::default(), &[&w]);
        opt.update(std::slice::from_mut(&mut w), &[g], 0.1);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_step() {
        let mut w = Tensor::<f64>::new(&[1], vec![1.0]).unwrap();
        let g = Tensor::new(&[1], vec![4.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &[&w]);
        opt.update(std::slice::from_mut(&mut w), &[g], 0.25);
        assert_eq!(w.data()[0], 0.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::<f64>::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::<f64>::new(&[2], vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }
}
