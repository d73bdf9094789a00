//! Fully connected layer with a trainable layer scale. Consumes real
//! activations (high-precision phase) or bit-planes (binarized phases);
//! plane sums are kept separate and recombined with the level scales so
//! the arithmetic structure matches the eventual hardware exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::quant::RESIDUAL_LEVELS;
use crate::tensor::Tensor;

use super::{BinActs, Ctx, GradFlow, ParamView, Value};

pub(crate) const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    /// [out, in], row-major.
    pub weight: Tensor,
    pub alpha: f64,
    pub mask: Option<PruneMask>,
    #[serde(skip)]
    pub gweight: Vec<f64>,
    #[serde(skip)]
    pub galpha: f64,
    #[serde(skip)]
    cache: Option<DenseCache>,
}

#[derive(Debug, Clone)]
enum DenseCache {
    Real {
        input: Tensor,
        sums: Tensor,
    },
    Planes {
        input: BinActs,
        plane_sums: [Tensor; RESIDUAL_LEVELS],
    },
}

impl Dense {
    pub fn new(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Dense {
            out_dim,
            in_dim,
            weight: Tensor::from_vec(&[out_dim, in_dim], data).expect("sized"),
            alpha: 1.0,
            mask: None,
            gweight: vec![0.0; out_dim * in_dim],
            galpha: 0.0,
            cache: None,
        }
    }

    pub fn from_weight(weight: Tensor, alpha: f64) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::config("dense weight must be 2-d [out, in]"));
        }
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        let n = weight.len();
        Ok(Dense {
            out_dim,
            in_dim,
            weight,
            alpha,
            mask: None,
            gweight: vec![0.0; n],
            galpha: 0.0,
            cache: None,
        })
    }

    /// Ensure skip-serialized buffers exist after deserialization.
    pub fn restore(&mut self) {
        if self.gweight.len() != self.weight.len() {
            self.gweight = vec![0.0; self.weight.len()];
        }
    }

    /// Batch size for a conforming input; higher-rank inputs flatten when
    /// their per-sample element count matches.
    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let per_sample: usize = shape[1..].iter().product();
        if shape.len() < 2 || per_sample != self.in_dim {
            return Err(Error::config(format!(
                "dense layer expects [batch, {}], got {:?}",
                self.in_dim, shape
            )));
        }
        Ok(shape[0])
    }

    /// y[b,o] = sum_i w[o,i] * x[b,i], without the layer scale.
    fn matvec_batch(&self, x: &Tensor, batch: usize) -> Tensor {
        let w = self.weight.data();
        let xs = x.data();
        let mut out = vec![0.0; batch * self.out_dim];
        for b in 0..batch {
            let xrow = &xs[b * self.in_dim..(b + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let wrow = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = 0.0;
                for i in 0..self.in_dim {
                    acc += wrow[i] * xrow[i];
                }
                out[b * self.out_dim + o] = acc;
            }
        }
        Tensor::from_vec(&[batch, self.out_dim], out).expect("sized")
    }

    pub fn forward(&mut self, input: Value, _ctx: &Ctx) -> Result<Value> {
        match input {
            Value::Real(x) => {
                let batch = self.check_input(x.shape())?;
                let sums = self.matvec_batch(&x, batch);
                let y = sums.map(|v| self.alpha * v);
                self.cache = Some(DenseCache::Real { input: x, sums });
                Ok(Value::Real(y))
            }
            Value::Planes(acts) => {
                let batch = self.check_input(acts.planes[0].shape())?;
                let s0 = self.matvec_batch(&acts.planes[0], batch);
                let s1 = self.matvec_batch(&acts.planes[1], batch);
                let g = acts.gamma;
                let mut y = vec![0.0; batch * self.out_dim];
                for (i, v) in y.iter_mut().enumerate() {
                    *v = self.alpha * (g[0] * s0.data()[i] + g[1] * s1.data()[i]);
                }
                let y = Tensor::from_vec(&[batch, self.out_dim], y).expect("sized");
                self.cache = Some(DenseCache::Planes {
                    input: acts,
                    plane_sums: [s0, s1],
                });
                Ok(Value::Real(y))
            }
        }
    }

    pub fn backward(&mut self, upstream: GradFlow) -> Result<GradFlow> {
        let dy = upstream.expect_real("dense")?;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::internal("dense backward without recorded forward"))?;
        let batch = dy.shape()[0];
        match cache {
            DenseCache::Real { input, sums } => {
                let mut dx = vec![0.0; batch * self.in_dim];
                let w = self.weight.data();
                let dys = dy.data();
                for b in 0..batch {
                    let xrow = &input.data()[b * self.in_dim..(b + 1) * self.in_dim];
                    for o in 0..self.out_dim {
                        let up = dys[b * self.out_dim + o];
                        if up == 0.0 {
                            continue;
                        }
                        let scaled = self.alpha * up;
                        self.galpha += up * sums.data()[b * self.out_dim + o];
                        let grow = &mut self.gweight[o * self.in_dim..(o + 1) * self.in_dim];
                        let wrow = &w[o * self.in_dim..(o + 1) * self.in_dim];
                        for i in 0..self.in_dim {
                            grow[i] += scaled * xrow[i];
                            dx[b * self.in_dim + i] += scaled * wrow[i];
                        }
                    }
                }
                Ok(GradFlow::Real(
                    Tensor::from_vec(input.shape(), dx).expect("sized"),
                ))
            }
            DenseCache::Planes { input, plane_sums } => {
                let g = input.gamma;
                let w = self.weight.data();
                let dys = dy.data();
                let mut dp0 = vec![0.0; batch * self.in_dim];
                let mut dp1 = vec![0.0; batch * self.in_dim];
                let mut dgamma = [0.0; RESIDUAL_LEVELS];
                for b in 0..batch {
                    let p0 = &input.planes[0].data()[b * self.in_dim..(b + 1) * self.in_dim];
                    let p1 = &input.planes[1].data()[b * self.in_dim..(b + 1) * self.in_dim];
                    for o in 0..self.out_dim {
                        let up = dys[b * self.out_dim + o];
                        if up == 0.0 {
                            continue;
                        }
                        let s0 = plane_sums[0].data()[b * self.out_dim + o];
                        let s1 = plane_sums[1].data()[b * self.out_dim + o];
                        self.galpha += up * (g[0] * s0 + g[1] * s1);
                        dgamma[0] += up * self.alpha * s0;
                        dgamma[1] += up * self.alpha * s1;
                        let scaled = self.alpha * up;
                        let grow = &mut self.gweight[o * self.in_dim..(o + 1) * self.in_dim];
                        let wrow = &w[o * self.in_dim..(o + 1) * self.in_dim];
                        for i in 0..self.in_dim {
                            grow[i] += scaled * (g[0] * p0[i] + g[1] * p1[i]);
                            dp0[b * self.in_dim + i] += scaled * g[0] * wrow[i];
                            dp1[b * self.in_dim + i] += scaled * g[1] * wrow[i];
                        }
                    }
                }
                let shape = input.planes[0].shape();
                Ok(GradFlow::Planes {
                    dplanes: [
                        Tensor::from_vec(shape, dp0).expect("sized"),
                        Tensor::from_vec(shape, dp1).expect("sized"),
                    ],
                    dgamma,
                })
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.gweight.iter_mut().for_each(|g| *g = 0.0);
        self.galpha = 0.0;
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView)) {
        f(ParamView {
            data: self.weight.data_mut(),
            grad: &mut self.gweight,
            mask: self.mask.as_ref().map(|m| m.keep.as_slice()),
            floor: None,
        });
        f(ParamView {
            data: std::slice::from_mut(&mut self.alpha),
            grad: std::slice::from_mut(&mut self.galpha),
            mask: None,
            floor: Some(SCALE_FLOOR),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_with(w: Vec<f64>, out: usize, inp: usize) -> Dense {
        Dense::from_weight(Tensor::from_vec(&[out, inp], w).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn identity_matrix_passes_through() {
        let mut d = dense_with(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let y = d
            .forward(Value::Real(x), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn cancellation() {
        let mut d = dense_with(vec![1.0, 1.0], 1, 2);
        let x = Tensor::from_vec(&[1, 2], vec![2.0, -2.0]).unwrap();
        let y = d
            .forward(Value::Real(x), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn hand_evaluated_dot_products() {
        let mut d = dense_with(vec![0.5, -0.25, 1.0, 2.0], 2, 2);
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 4.0]).unwrap();
        let y = d
            .forward(Value::Real(x), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.data(), &[0.0, 10.0]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut d = dense_with(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(d.forward(Value::Real(x), &Ctx::eval()).is_err());
    }

    #[test]
    fn plane_input_recombines_with_gamma() {
        let mut d = dense_with(vec![1.0, -1.0], 1, 2);
        let acts = BinActs {
            planes: [
                Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap(),
                Tensor::from_vec(&[1, 2], vec![-1.0, -1.0]).unwrap(),
            ],
            gamma: [0.75, 0.25],
        };
        let y = d
            .forward(Value::Planes(acts), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        // plane sums: s0 = 1 - (-1) = 2, s1 = -1 - (-1) = 0
        assert_eq!(y.data(), &[0.75 * 2.0]);
    }
}
