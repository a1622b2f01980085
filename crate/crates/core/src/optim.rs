//! SGD and Adam over a fixed set of leaf tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    // per-parameter first/second moment buffers (Adam only)
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor]) -> Optimizer {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (
                params.iter().map(|p| vec![0.0; p.numel()]).collect(),
                params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            ),
        };
        Optimizer {
            kind,
            lr,
            step_count: 0,
            m,
            v,
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Tensor]) {
        self.step_count += 1;
        for (i, p) in params.iter().enumerate() {
            let Some(grad) = p.grad_vec() else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.lr;
                    p.with_data_mut(|data| {
                        for (w, g) in data.iter_mut().zip(&grad) {
                            *w -= lr * g;
                        }
                    });
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.step_count as i32;
                    let bc1 = 1.0 - pow(beta1, t);
                    let bc2 = 1.0 - pow(beta2, t);
                    let lr = self.lr;
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    p.with_data_mut(|data| {
                        for k in 0..data.len() {
                            let g = grad[k];
                            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                            let mh = m[k] / bc1;
                            let vh = v[k] / bc2;
                            data[k] -= lr * mh / (libm::sqrt(vh) + eps);
                        }
                    });
                }
            }
            p.zero_grad();
        }
    }
}

fn pow(base: f64, exp: i32) -> f64 {
    let mut out = 1.0;
    for _ in 0..exp {
        out *= base;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_minimizes_quadratic() {
        let x = Tensor::param(alloc::vec![5.0], &[1]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, std::slice::from_ref(&x));
        for _ in 0..100 {
            let loss = x.mul(&x).sum_all();
            loss.backward().unwrap();
            opt.step(std::slice::from_ref(&x));
        }
        assert!(x.to_vec()[0].abs() < 1e-4);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let x = Tensor::param(alloc::vec![5.0, -3.0], &[2]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.1, std::slice::from_ref(&x));
        for _ in 0..400 {
            let loss = x.mul(&x).sum_all();
            loss.backward().unwrap();
            opt.step(std::slice::from_ref(&x));
        }
        for v in x.to_vec() {
            assert!(v.abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let x = Tensor::param(alloc::vec![1.0, 2.0], &[2]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.0, std::slice::from_ref(&x));
        let loss = x.mul(&x).sum_all();
        loss.backward().unwrap();
        opt.step(std::slice::from_ref(&x));
        assert_eq!(x.to_vec(), alloc::vec![1.0, 2.0]);
    }
}
