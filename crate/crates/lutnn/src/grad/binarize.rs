//! Binarizing activation layers. One level gives the plain sign activation
//! with a clipped straight-through gradient; two levels give the residual
//! binarizer whose bit-planes and scales feed downstream layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{ste_gate, ste_surrogate, ResidualBinarizer, RESIDUAL_LEVELS};
use crate::tensor::Tensor;

use super::dense::SCALE_FLOOR;
use super::{BinActs, Ctx, GradFlow, ParamView, Value};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Binarize {
    /// 1 = plain sign activation, 2 = residual binarization.
    pub levels: usize,
    pub binarizer: ResidualBinarizer,
    #[serde(skip)]
    pub ggamma: [f64; RESIDUAL_LEVELS],
    #[serde(skip)]
    cache: Option<BinCache>,
}

#[derive(Debug, Clone)]
struct BinCache {
    /// Residual inputs to each level (eps_1 = x, eps_2 = x - g1*b1).
    residuals: [Tensor; RESIDUAL_LEVELS],
    /// Level outputs as produced in the active forward mode.
    outputs: [Tensor; RESIDUAL_LEVELS],
    gamma: [f64; RESIDUAL_LEVELS],
}

impl Binarize {
    pub fn sign() -> Self {
        Binarize {
            levels: 1,
            binarizer: ResidualBinarizer::new(),
            ggamma: [0.0; RESIDUAL_LEVELS],
            cache: None,
        }
    }

    pub fn residual() -> Self {
        Binarize {
            levels: RESIDUAL_LEVELS,
            binarizer: ResidualBinarizer::new(),
            ggamma: [0.0; RESIDUAL_LEVELS],
            cache: None,
        }
    }

    pub fn forward(&mut self, input: Value, ctx: &Ctx) -> Result<Value> {
        let x = input.expect_real("binarize")?;
        let act = |v: f64| {
            if ctx.surrogate {
                ste_surrogate(v)
            } else {
                crate::quant::sign_pm1(v)
            }
        };
        if self.levels == 1 {
            let y = x.map(act);
            let zeros = Tensor::zeros(x.shape());
            self.cache = Some(BinCache {
                residuals: [x, zeros.clone()],
                outputs: [y.clone(), zeros],
                gamma: [1.0, 0.0],
            });
            return Ok(Value::Real(y));
        }
        if !self.binarizer.initialized {
            self.binarizer.init_from(&x);
        }
        let g = self.binarizer.gamma;
        let n = x.len();
        let mut b0 = vec![0.0; n];
        let mut b1 = vec![0.0; n];
        let mut e1 = vec![0.0; n];
        for (i, &v) in x.data().iter().enumerate() {
            let w0 = act(v);
            let r1 = v - g[0] * w0;
            b0[i] = w0;
            b1[i] = act(r1);
            e1[i] = r1;
        }
        let shape = x.shape().to_vec();
        let planes = [
            Tensor::from_vec(&shape, b0).expect("sized"),
            Tensor::from_vec(&shape, b1).expect("sized"),
        ];
        self.cache = Some(BinCache {
            residuals: [x, Tensor::from_vec(&shape, e1).expect("sized")],
            outputs: planes.clone(),
            gamma: g,
        });
        Ok(Value::Planes(BinActs { planes, gamma: g }))
    }

    pub fn backward(&mut self, upstream: GradFlow) -> Result<GradFlow> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::internal("binarize backward without recorded forward"))?;
        match upstream {
            GradFlow::Real(dy) => {
                if self.levels != 1 {
                    return Err(Error::internal(
                        "residual binarizer received a real gradient",
                    ));
                }
                let dx: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(cache.residuals[0].data())
                    .map(|(&d, &x)| d * ste_gate(x))
                    .collect();
                Ok(GradFlow::Real(
                    Tensor::from_vec(dy.shape(), dx).expect("sized"),
                ))
            }
            GradFlow::Planes { dplanes, dgamma } => {
                if self.levels != RESIDUAL_LEVELS {
                    return Err(Error::internal("sign activation received plane gradients"));
                }
                let g = cache.gamma;
                let e1 = cache.residuals[0].data();
                let e2 = cache.residuals[1].data();
                let w1 = cache.outputs[0].data();
                let d1 = dplanes[0].data();
                let d2 = dplanes[1].data();
                let n = e1.len();
                let mut dx = vec![0.0; n];
                let mut dg0 = dgamma[0];
                let dg1 = dgamma[1];
                for i in 0..n {
                    let s1 = ste_gate(e1[i]);
                    let s2 = ste_gate(e2[i]);
                    dx[i] = d1[i] * s1 + d2[i] * s2 * (1.0 - g[0] * s1);
                    dg0 += d2[i] * s2 * (-w1[i]);
                }
                self.ggamma[0] += dg0;
                self.ggamma[1] += dg1;
                Ok(GradFlow::Real(
                    Tensor::from_vec(cache.residuals[0].shape(), dx).expect("sized"),
                ))
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.ggamma = [0.0; RESIDUAL_LEVELS];
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView)) {
        if self.levels == RESIDUAL_LEVELS {
            f(ParamView {
                data: &mut self.binarizer.gamma,
                grad: &mut self.ggamma,
                mask: None,
                floor: Some(SCALE_FLOOR),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_activation_outputs_pm_one() {
        let mut b = Binarize::sign();
        let x = Tensor::from_vec(&[1, 3], vec![-0.3, 0.0, 2.5]).unwrap();
        let y = b
            .forward(Value::Real(x), &Ctx::train())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn sign_gradient_is_clipped_passthrough() {
        let mut b = Binarize::sign();
        let x = Tensor::from_vec(&[1, 2], vec![0.5, 1.5]).unwrap();
        b.forward(Value::Real(x), &Ctx::train()).unwrap();
        let dy = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let dx = b
            .backward(GradFlow::Real(dy))
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0]);
    }

    #[test]
    fn residual_forward_emits_planes_with_gamma() {
        let mut b = Binarize::residual();
        b.binarizer.gamma = [1.0, 0.5];
        b.binarizer.initialized = true;
        let x = Tensor::from_vec(&[1, 1], vec![0.9]).unwrap();
        match b.forward(Value::Real(x), &Ctx::train()).unwrap() {
            Value::Planes(acts) => {
                assert_eq!(acts.planes[0].data(), &[1.0]);
                assert_eq!(acts.planes[1].data(), &[-1.0]);
                assert_eq!(acts.gamma, [1.0, 0.5]);
            }
            _ => panic!("expected planes"),
        }
    }

    #[test]
    fn gamma_initializes_on_first_call() {
        let mut b = Binarize::residual();
        let x = Tensor::from_vec(&[1, 4], vec![1.0, -1.0, 3.0, -3.0]).unwrap();
        b.forward(Value::Real(x), &Ctx::train()).unwrap();
        assert!(b.binarizer.initialized);
        assert!((b.binarizer.gamma[0] - 2.0).abs() < 1e-12); // mean |x|
    }
}
