use crate::encoder::EncoderParams;
use crate::real::Real;

use super::OptimizerKind;

/// Plain or momentum SGD over every parameter tensor.
pub struct Optimizer<F> {
    kind: OptimizerKind,
    learning_rate: F,
    momentum: F,
    velocity: Option<EncoderParams<F>>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, momentum: f64) -> Self {
        Optimizer {
            kind,
            learning_rate: F::from_f64(learning_rate),
            momentum: F::from_f64(momentum),
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams<F>, grads: &EncoderParams<F>) {
        let lr = self.learning_rate;
        let grad_tensors = grads.tensors();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, (_, _, g)) in params.tensors_mut().into_iter().zip(&grad_tensors) {
                    for (pv, &gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Momentum => {
                let mu = self.momentum;
                let velocity = self.velocity.get_or_insert_with(|| grads.zeros_like());
                for ((p, v), (_, _, g)) in
                    params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(&grad_tensors)
                {
                    for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                        *vv = mu * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::fixtures;
    use crate::serving::tests_support;

    fn filled(value: f64) -> EncoderParams<f64> {
        let mut p = tests_support::similarity_params(&fixtures::catalog()).cast::<f64>();
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = value);
        }
        p
    }

    #[test]
    fn sgd_subtracts_scaled_gradient() {
        let mut p = filled(1.0);
        let g = filled(2.0);
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.25, 0.0);
        opt.step(&mut p, &g);
        assert!(p.tensors().iter().all(|(_, _, t)| t.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // v1 = 2, p1 = 1 - 0.1*2 = 0.8; v2 = 0.5*2 + 4 = 5, p2 = 0.8 - 0.1*5 = 0.3.
        let mut p = filled(1.0);
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Momentum, 0.1, 0.5);
        opt.step(&mut p, &filled(2.0));
        assert!(p.tensors().iter().all(|(_, _, t)| t.iter().all(|&v| (v - 0.8).abs() < 1e-12)));
        opt.step(&mut p, &filled(4.0));
        assert!(p.tensors().iter().all(|(_, _, t)| t.iter().all(|&v| (v - 0.3).abs() < 1e-12)));
    }
}
