//! Minimal reverse-mode training engine: dense, 2-D convolution, max-pool,
//! batch normalization, binarizing activations, softmax cross-entropy, and
//! optimizers. Just enough to train the desk-scale networks this toolchain
//! targets.
//!
//! Layers exchange [`Value`]s: either a real tensor or a pair of binary
//! bit-planes with their level scales. Every layer records what it needs
//! during `forward` and returns input gradients from `backward`. Model
//! state has a single writer (the training loop); evaluation is pure.

mod batchnorm;
mod binarize;
mod conv;
mod dense;
mod loss;
mod optim;

pub use batchnorm::BatchNorm;
pub use binarize::Binarize;
pub use conv::{Conv2d, MaxPool2d, Padding};
pub use dense::Dense;
pub use loss::{softmax_cross_entropy, LossOutput};
pub use optim::{Optimizer, OptimizerKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lut::LutLayer;
use crate::quant::RESIDUAL_LEVELS;
use crate::tensor::Tensor;

/// Activations flowing between layers.
#[derive(Debug, Clone)]
pub enum Value {
    Real(Tensor),
    /// Residual-binarized activations: bit-planes plus their level scales.
    Planes(BinActs),
}

#[derive(Debug, Clone)]
pub struct BinActs {
    pub planes: [Tensor; RESIDUAL_LEVELS],
    pub gamma: [f64; RESIDUAL_LEVELS],
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Planes(b) => b.planes[0].shape(),
        }
    }

    pub fn expect_real(self, who: &str) -> Result<Tensor> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Planes(_) => Err(Error::config(format!(
                "{who} expects real activations, got binarized planes"
            ))),
        }
    }

    pub fn expect_planes(self, who: &str) -> Result<BinActs> {
        match self {
            Value::Planes(b) => Ok(b),
            Value::Real(_) => Err(Error::config(format!(
                "{who} expects residual-binarized activations, got a real tensor"
            ))),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            Value::Real(t) => t.all_finite(),
            Value::Planes(b) => b.planes.iter().all(|p| p.all_finite()),
        }
    }
}

/// Gradients flowing backward between layers; mirrors [`Value`].
#[derive(Debug, Clone)]
pub enum GradFlow {
    Real(Tensor),
    Planes {
        dplanes: [Tensor; RESIDUAL_LEVELS],
        dgamma: [f64; RESIDUAL_LEVELS],
    },
}

impl GradFlow {
    pub fn expect_real(self, who: &str) -> Result<Tensor> {
        match self {
            GradFlow::Real(t) => Ok(t),
            GradFlow::Planes { .. } => Err(Error::internal(format!(
                "{who} produced real activations but received plane gradients"
            ))),
        }
    }
}

/// Forward-pass context.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    /// Batch statistics and scale calibration happen only when training.
    pub train: bool,
    /// Replace sign with its clipped-linear surrogate so the whole network
    /// becomes differentiable; used by finite-difference verification.
    pub surrogate: bool,
}

impl Ctx {
    pub fn train() -> Self {
        Ctx {
            train: true,
            surrogate: false,
        }
    }

    pub fn eval() -> Self {
        Ctx {
            train: false,
            surrogate: false,
        }
    }

    pub fn surrogate() -> Self {
        Ctx {
            train: true,
            surrogate: true,
        }
    }
}

/// Mutable view of one parameter tensor for the optimizer.
pub struct ParamView<'a> {
    pub data: &'a mut [f64],
    pub grad: &'a mut [f64],
    /// Keep flags; pruned entries have value and gradient forced to zero.
    pub mask: Option<&'a [bool]>,
    /// Lower bound projected after each step (scale positivity).
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    BatchNorm(BatchNorm),
    Binarize(Binarize),
    Lut(LutLayer),
}

impl Layer {
    pub fn forward(&mut self, input: Value, ctx: &Ctx) -> Result<Value> {
        match self {
            Layer::Dense(l) => l.forward(input, ctx),
            Layer::Conv2d(l) => l.forward(input, ctx),
            Layer::MaxPool2d(l) => l.forward(input, ctx),
            Layer::BatchNorm(l) => l.forward(input, ctx),
            Layer::Binarize(l) => l.forward(input, ctx),
            Layer::Lut(l) => l.forward(input, ctx),
        }
    }

    pub fn backward(&mut self, upstream: GradFlow) -> Result<GradFlow> {
        match self {
            Layer::Dense(l) => l.backward(upstream),
            Layer::Conv2d(l) => l.backward(upstream),
            Layer::MaxPool2d(l) => l.backward(upstream),
            Layer::BatchNorm(l) => l.backward(upstream),
            Layer::Binarize(l) => l.backward(upstream),
            Layer::Lut(l) => l.backward(upstream),
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Layer::Dense(l) => l.zero_grads(),
            Layer::Conv2d(l) => l.zero_grads(),
            Layer::MaxPool2d(_) => {}
            Layer::BatchNorm(l) => l.zero_grads(),
            Layer::Binarize(l) => l.zero_grads(),
            Layer::Lut(l) => l.zero_grads(),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView)) {
        match self {
            Layer::Dense(l) => l.visit_params(f),
            Layer::Conv2d(l) => l.visit_params(f),
            Layer::MaxPool2d(_) => {}
            Layer::BatchNorm(l) => l.visit_params(f),
            Layer::Binarize(l) => l.visit_params(f),
            Layer::Lut(l) => l.visit_params(f),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Binarize(_) => "binarize",
            Layer::Lut(_) => "lut",
        }
    }
}

/// An ordered stack of layers; the forward output of the last layer feeds
/// the loss head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    /// Run all layers, rejecting non-finite activations at each boundary.
    pub fn forward(&mut self, input: Value, ctx: &Ctx) -> Result<Value> {
        let mut v = input;
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            v = layer.forward(v, ctx)?;
            if !v.all_finite() {
                return Err(Error::internal(format!(
                    "non-finite activations leaving layer {idx} ({})",
                    layer.name()
                )));
            }
        }
        Ok(v)
    }

    pub fn backward(&mut self, dloss: GradFlow) -> Result<GradFlow> {
        let mut g = dloss;
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(g)?;
        }
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    /// Weight slices of every prunable layer, in network order.
    pub fn prunable_weights(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(d.weight.data()),
                Layer::Conv2d(c) => Some(c.weight.data()),
                _ => None,
            })
            .collect()
    }
}
