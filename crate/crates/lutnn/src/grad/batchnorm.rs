//! Batch normalization with trainable shift/scale and running statistics.
//! Normalizes per feature for [batch, features] inputs and per channel for
//! [batch, channels, h, w] inputs. At hardening the affine folds into
//! per-neuron integer thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Ctx, GradFlow, ParamView, Value};

pub const BN_EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub features: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    #[serde(skip)]
    pub gscale: Vec<f64>,
    #[serde(skip)]
    pub gshift: Vec<f64>,
    #[serde(skip)]
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// Samples per feature in the normalization.
    group: usize,
    train: bool,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            features,
            scale: vec![1.0; features],
            shift: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            gscale: vec![0.0; features],
            gshift: vec![0.0; features],
            cache: None,
        }
    }

    pub fn restore(&mut self) {
        if self.gscale.len() != self.features {
            self.gscale = vec![0.0; self.features];
            self.gshift = vec![0.0; self.features];
        }
    }

    /// Effective affine at inference: y = fold_scale * x + fold_shift.
    pub fn fold_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut s = Vec::with_capacity(self.features);
        let mut t = Vec::with_capacity(self.features);
        for f in 0..self.features {
            let inv = 1.0 / (self.running_var[f] + BN_EPS).sqrt();
            let a = self.scale[f] * inv;
            s.push(a);
            t.push(self.shift[f] - a * self.running_mean[f]);
        }
        (s, t)
    }

    /// (feature index, flat index) iteration order for a given layout.
    fn layout(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        // returns (batch, spatial, features) with data layout [b, f, spatial]
        match shape.len() {
            2 if shape[1] == self.features => Ok((shape[0], 1, self.features)),
            4 if shape[1] == self.features => Ok((shape[0], shape[2] * shape[3], self.features)),
            _ => Err(Error::config(format!(
                "batchnorm over {} features cannot normalize shape {:?}",
                self.features, shape
            ))),
        }
    }

    pub fn forward(&mut self, input: Value, ctx: &Ctx) -> Result<Value> {
        let x = input.expect_real("batchnorm")?;
        let (batch, spatial, features) = self.layout(x.shape())?;
        let group = batch * spatial;
        let xs = x.data();
        let mut mean = vec![0.0; features];
        let mut var = vec![0.0; features];
        if ctx.train {
            for b in 0..batch {
                for f in 0..features {
                    let base = (b * features + f) * spatial;
                    for s in 0..spatial {
                        mean[f] += xs[base + s];
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= group as f64);
            for b in 0..batch {
                for f in 0..features {
                    let base = (b * features + f) * spatial;
                    for s in 0..spatial {
                        let d = xs[base + s] - mean[f];
                        var[f] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= group as f64);
            for f in 0..features {
                self.running_mean[f] = (1.0 - MOMENTUM) * self.running_mean[f] + MOMENTUM * mean[f];
                self.running_var[f] = (1.0 - MOMENTUM) * self.running_var[f] + MOMENTUM * var[f];
            }
        } else {
            mean.copy_from_slice(&self.running_mean);
            var.copy_from_slice(&self.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for b in 0..batch {
            for f in 0..features {
                let base = (b * features + f) * spatial;
                for s in 0..spatial {
                    let h = (xs[base + s] - mean[f]) * inv_std[f];
                    xhat[base + s] = h;
                    y[base + s] = self.scale[f] * h + self.shift[f];
                }
            }
        }
        self.cache = Some(BnCache {
            xhat: Tensor::from_vec(x.shape(), xhat).expect("sized"),
            inv_std,
            group,
            train: ctx.train,
        });
        Ok(Value::Real(Tensor::from_vec(x.shape(), y).expect("sized")))
    }

    pub fn backward(&mut self, upstream: GradFlow) -> Result<GradFlow> {
        let dy = upstream.expect_real("batchnorm")?;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::internal("batchnorm backward without recorded forward"))?;
        let (batch, spatial, features) = self.layout(dy.shape())?;
        let group = cache.group as f64;
        let dys = dy.data();
        let xh = cache.xhat.data();
        let mut sum_dy = vec![0.0; features];
        let mut sum_dy_xhat = vec![0.0; features];
        for b in 0..batch {
            for f in 0..features {
                let base = (b * features + f) * spatial;
                for s in 0..spatial {
                    sum_dy[f] += dys[base + s];
                    sum_dy_xhat[f] += dys[base + s] * xh[base + s];
                }
            }
        }
        for f in 0..features {
            self.gshift[f] += sum_dy[f];
            self.gscale[f] += sum_dy_xhat[f];
        }
        let mut dx = vec![0.0; dys.len()];
        for b in 0..batch {
            for f in 0..features {
                let base = (b * features + f) * spatial;
                let a = self.scale[f] * cache.inv_std[f];
                for s in 0..spatial {
                    dx[base + s] = if cache.train {
                        a * (dys[base + s]
                            - sum_dy[f] / group
                            - xh[base + s] * sum_dy_xhat[f] / group)
                    } else {
                        a * dys[base + s]
                    };
                }
            }
        }
        Ok(GradFlow::Real(
            Tensor::from_vec(dy.shape(), dx).expect("sized"),
        ))
    }

    pub fn zero_grads(&mut self) {
        self.gscale.iter_mut().for_each(|g| *g = 0.0);
        self.gshift.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView)) {
        f(ParamView {
            data: &mut self.scale,
            grad: &mut self.gscale,
            mask: None,
            floor: None,
        });
        f(ParamView {
            data: &mut self.shift,
            grad: &mut self.gshift,
            mask: None,
            floor: None,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_batch_statistics() {
        let mut bn = BatchNorm::new(2);
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let y = bn
            .forward(Value::Real(x), &Ctx::train())
            .unwrap()
            .expect_real("t")
            .unwrap();
        // each feature column should have ~zero mean, ~unit variance
        for f in 0..2 {
            let col: Vec<f64> = (0..4).map(|b| y.data()[b * 2 + f]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        let x = Tensor::from_vec(&[1, 1], vec![4.0]).unwrap();
        let y = bn
            .forward(Value::Real(x), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert!((y.data()[0] - 2.0 / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
    }
}
