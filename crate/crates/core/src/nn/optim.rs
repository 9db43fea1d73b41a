use serde::{Deserialize, Serialize};

use super::{Param, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state, keyed by position in the parameter list.
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update with learning rate `lr` and clears the gradients.
    pub fn step<F: Scalar>(&mut self, params: &mut [&mut Param<F>], lr: f64) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for (p, vel) in params.iter_mut().zip(self.first.iter_mut()) {
                    for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                        *v = momentum * *v + g.as_f64();
                        *w -= F::of(lr * *v);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), s) in params
                    .iter_mut()
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for (((w, g), mi), si) in p
                        .value
                        .iter_mut()
                        .zip(&p.grad)
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        let g = g.as_f64();
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *si = beta2 * *si + (1.0 - beta2) * g * g;
                        let update = lr * (*mi / c1) / ((*si / c2).sqrt() + eps);
                        *w -= F::of(update);
                    }
                }
            }
        }
        params.iter_mut().for_each(|p| p.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = Param::<f64>::zeros("w", vec![1]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 });
        p.grad[0] = 1.0;
        opt.step(&mut [&mut p], 0.1);
        assert!((p.value[0] + 0.1).abs() < 1e-15);
        assert_eq!(p.grad[0], 0.0);
        p.grad[0] = 1.0;
        opt.step(&mut [&mut p], 0.1);
        // velocity 1.9
        assert!((p.value[0] + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::<f64>::filled("w", vec![2], 3.0);
        let mut opt = Optimizer::new(OptimizerKind::adam());
        for _ in 0..2000 {
            let grads: Vec<f64> = p.value.iter().map(|w| 2.0 * (w - 1.0)).collect();
            p.grad.copy_from_slice(&grads);
            opt.step(&mut [&mut p], 0.01);
        }
        assert!(p.value.iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
