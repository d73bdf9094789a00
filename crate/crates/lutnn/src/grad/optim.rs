//! Parameter update rules. Adam with standard defaults is the pipeline
//! default; plain SGD is selectable. Masked entries have gradient and value
//! forced to zero on every step, and scale parameters are projected onto
//! their positive floor.

use serde::{Deserialize, Serialize};

use super::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    /// First/second moment buffers, one pair per parameter in visit order.
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, net: &mut Network) {
        self.step_count += 1;
        let t = self.step_count;
        let (kind, lr, b1, b2, eps) = (self.kind, self.lr, self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        let mut slot_idx = 0usize;
        net.visit_params(&mut |view| {
            if slots.len() == slot_idx {
                slots.push((vec![0.0; view.data.len()], vec![0.0; view.data.len()]));
            }
            let (m, v) = &mut slots[slot_idx];
            debug_assert_eq!(m.len(), view.data.len());
            slot_idx += 1;
            for i in 0..view.data.len() {
                let masked = view.mask.map(|k| !k[i]).unwrap_or(false);
                let g = if masked { 0.0 } else { view.grad[i] };
                match kind {
                    OptimizerKind::Sgd => {
                        view.data[i] -= lr * g;
                    }
                    OptimizerKind::Adam => {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let mhat = m[i] / (1.0 - b1.powi(t as i32));
                        let vhat = v[i] / (1.0 - b2.powi(t as i32));
                        view.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                if masked {
                    view.data[i] = 0.0;
                    view.grad[i] = 0.0;
                }
                if let Some(floor) = view.floor {
                    if view.data[i] < floor {
                        view.data[i] = floor;
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Ctx, Dense, Layer, Value};
    use crate::tensor::Tensor;

    fn scalar_net(w: f64) -> Network {
        let dense = Dense::from_weight(Tensor::from_vec(&[1, 1], vec![w]).unwrap(), 1.0).unwrap();
        Network::new(vec![Layer::Dense(dense)])
    }

    fn run_step(net: &mut Network, opt: &mut Optimizer, grad: f64) {
        // drive a forward/backward producing exactly `grad` on the weight
        let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        net.forward(Value::Real(x), &Ctx::train()).unwrap();
        let dy = Tensor::from_vec(&[1, 1], vec![grad]).unwrap();
        net.backward(crate::grad::GradFlow::Real(dy)).unwrap();
        opt.step(net);
        net.zero_grads();
    }

    fn weight(net: &Network) -> f64 {
        match &net.layers[0] {
            Layer::Dense(d) => d.weight.data()[0],
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        run_step(&mut net, &mut opt, 1.0);
        assert!((weight(&net) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = scalar_net(0.5);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        run_step(&mut net, &mut opt, 0.0);
        assert_eq!(weight(&net), 0.5);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // single-step closed form: m_hat = g, v_hat = g^2,
        // delta = lr * g / (|g| + eps)
        let g = 3.0f64;
        let lr = 0.01;
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr);
        run_step(&mut net, &mut opt, g);
        let expected = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!(
            (weight(&net) - expected).abs() < 1e-12,
            "got {}, expected {}",
            weight(&net),
            expected
        );
    }

    #[test]
    fn masked_weights_stay_zero() {
        let mut net = scalar_net(0.7);
        if let Layer::Dense(d) = &mut net.layers[0] {
            d.mask = Some(crate::prune::PruneMask {
                keep: vec![false],
                threshold: 1.0,
            });
            d.weight.data_mut()[0] = 0.0;
        }
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        for _ in 0..3 {
            run_step(&mut net, &mut opt, 1.0);
            assert_eq!(weight(&net), 0.0);
        }
    }
}
