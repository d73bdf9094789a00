//! 2-D convolution (cross-correlation) and max-pooling over [batch,
//! channels, height, width] tensors, in both real and bit-plane form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::quant::RESIDUAL_LEVELS;
use crate::tensor::Tensor;

use super::dense::SCALE_FLOOR;
use super::{BinActs, Ctx, GradFlow, ParamView, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    /// [out, in, kh, kw], row-major.
    pub weight: Tensor,
    pub alpha: f64,
    pub mask: Option<PruneMask>,
    #[serde(skip)]
    pub gweight: Vec<f64>,
    #[serde(skip)]
    pub galpha: f64,
    #[serde(skip)]
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
enum ConvCache {
    Real { input: Tensor, sums: Tensor },
    Planes { input: BinActs, plane_sums: [Tensor; RESIDUAL_LEVELS] },
}

/// Output extent and leading pad for one spatial axis.
fn conv_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::config("convolution stride must be >= 1"));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(Error::config(format!(
                    "kernel {kernel} larger than input extent {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let need = (out - 1) * stride + kernel;
            let pad_total = need.saturating_sub(input);
            Ok((out, pad_total / 2))
        }
    }
}

impl Conv2d {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / (fan_in + out_channels) as f64).sqrt();
        let n = out_channels * fan_in;
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Conv2d {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::from_vec(&[out_channels, in_channels, kernel, kernel], data)
                .expect("sized"),
            alpha: 1.0,
            mask: None,
            gweight: vec![0.0; n],
            galpha: 0.0,
            cache: None,
        }
    }

    pub fn restore(&mut self) {
        if self.gweight.len() != self.weight.len() {
            self.gweight = vec![0.0; self.weight.len()];
        }
    }

    fn geometry(&self, shape: &[usize]) -> Result<ConvGeom> {
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::config(format!(
                "conv2d expects [batch, {}, h, w], got {:?}",
                self.in_channels, shape
            )));
        }
        let (oh, pad_h) = conv_extent(shape[2], self.kernel, self.stride, self.padding)?;
        let (ow, pad_w) = conv_extent(shape[3], self.kernel, self.stride, self.padding)?;
        Ok(ConvGeom {
            batch: shape[0],
            h: shape[2],
            w: shape[3],
            oh,
            ow,
            pad_h,
            pad_w,
        })
    }

    /// Cross-correlation sums without the layer scale.
    fn correlate(&self, x: &Tensor, g: &ConvGeom) -> Tensor {
        let k = self.kernel;
        let (ci, co) = (self.in_channels, self.out_channels);
        let xs = x.data();
        let ws = self.weight.data();
        let mut out = vec![0.0; g.batch * co * g.oh * g.ow];
        for b in 0..g.batch {
            for o in 0..co {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - g.pad_h as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - g.pad_w as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xi = ((b * ci + c) * g.h + iy as usize) * g.w + ix as usize;
                                    let wi = ((o * ci + c) * k + ky) * k + kx;
                                    acc += ws[wi] * xs[xi];
                                }
                            }
                        }
                        out[((b * co + o) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[g.batch, co, g.oh, g.ow], out).expect("sized")
    }

    /// Accumulate weight gradients and input gradients for one plane.
    fn correlate_backward(
        &mut self,
        x: &Tensor,
        dy_scaled: &[f64],
        g: &ConvGeom,
        dx: &mut [f64],
    ) {
        let k = self.kernel;
        let (ci, co) = (self.in_channels, self.out_channels);
        let xs = x.data();
        let ws = self.weight.data().to_vec();
        for b in 0..g.batch {
            for o in 0..co {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let up = dy_scaled[((b * co + o) * g.oh + oy) * g.ow + ox];
                        if up == 0.0 {
                            continue;
                        }
                        for c in 0..ci {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - g.pad_h as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - g.pad_w as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xi = ((b * ci + c) * g.h + iy as usize) * g.w + ix as usize;
                                    let wi = ((o * ci + c) * k + ky) * k + kx;
                                    self.gweight[wi] += up * xs[xi];
                                    dx[xi] += up * ws[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, input: Value, _ctx: &Ctx) -> Result<Value> {
        match input {
            Value::Real(x) => {
                let g = self.geometry(x.shape())?;
                let sums = self.correlate(&x, &g);
                let y = sums.map(|v| self.alpha * v);
                self.cache = Some(ConvCache::Real { input: x, sums });
                Ok(Value::Real(y))
            }
            Value::Planes(acts) => {
                let g = self.geometry(acts.planes[0].shape())?;
                let s0 = self.correlate(&acts.planes[0], &g);
                let s1 = self.correlate(&acts.planes[1], &g);
                let gm = acts.gamma;
                let mut y = vec![0.0; s0.len()];
                for (i, v) in y.iter_mut().enumerate() {
                    *v = self.alpha * (gm[0] * s0.data()[i] + gm[1] * s1.data()[i]);
                }
                let y = Tensor::from_vec(s0.shape(), y).expect("sized");
                self.cache = Some(ConvCache::Planes {
                    input: acts,
                    plane_sums: [s0, s1],
                });
                Ok(Value::Real(y))
            }
        }
    }

    pub fn backward(&mut self, upstream: GradFlow) -> Result<GradFlow> {
        let dy = upstream.expect_real("conv2d")?;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::internal("conv2d backward without recorded forward"))?;
        match cache {
            ConvCache::Real { input, sums } => {
                let g = self.geometry(input.shape())?;
                for (u, s) in dy.data().iter().zip(sums.data()) {
                    self.galpha += u * s;
                }
                let scaled: Vec<f64> = dy.data().iter().map(|u| self.alpha * u).collect();
                let mut dx = vec![0.0; input.len()];
                self.correlate_backward(&input, &scaled, &g, &mut dx);
                Ok(GradFlow::Real(
                    Tensor::from_vec(input.shape(), dx).expect("sized"),
                ))
            }
            ConvCache::Planes { input, plane_sums } => {
                let g = self.geometry(input.planes[0].shape())?;
                let gm = input.gamma;
                let mut dgamma = [0.0; RESIDUAL_LEVELS];
                for ((u, s0), s1) in dy
                    .data()
                    .iter()
                    .zip(plane_sums[0].data())
                    .zip(plane_sums[1].data())
                {
                    self.galpha += u * (gm[0] * s0 + gm[1] * s1);
                    dgamma[0] += u * self.alpha * s0;
                    dgamma[1] += u * self.alpha * s1;
                }
                let shape = input.planes[0].shape().to_vec();
                let mut dplanes_out = Vec::with_capacity(RESIDUAL_LEVELS);
                for (p, plane) in input.planes.iter().enumerate() {
                    let scaled: Vec<f64> =
                        dy.data().iter().map(|u| self.alpha * gm[p] * u).collect();
                    let mut dx = vec![0.0; plane.len()];
                    self.correlate_backward(plane, &scaled, &g, &mut dx);
                    dplanes_out.push(Tensor::from_vec(&shape, dx).expect("sized"));
                }
                let d1 = dplanes_out.pop().expect("two planes");
                let d0 = dplanes_out.pop().expect("two planes");
                Ok(GradFlow::Planes {
                    dplanes: [d0, d1],
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

struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
}

/// Non-overlapping max-pool; window equals stride. Binary activations pool
/// by their reconstructed value; ties go to the first element in window
/// order so results are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxPool2d {
    pub window: usize,
    #[serde(skip)]
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    input_shape: Vec<usize>,
    winners: Vec<usize>,
    planes: bool,
}

impl MaxPool2d {
    pub fn new(window: usize) -> Self {
        MaxPool2d {
            window,
            cache: None,
        }
    }

    fn geometry(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
        if shape.len() != 4 {
            return Err(Error::config(format!(
                "maxpool2d expects [batch, c, h, w], got {:?}",
                shape
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::config(format!(
                "maxpool2d window {} does not divide spatial extent {}x{}",
                self.window, h, w
            )));
        }
        Ok((b, c, h, w, h / self.window, w / self.window))
    }

    fn pool_by(
        &self,
        shape: &[usize],
        score: impl Fn(usize) -> f64,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let (b, c, h, w, oh, ow) = self.geometry(shape)?;
        let mut winners = Vec::with_capacity(b * c * oh * ow);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = 0;
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..self.window {
                            for kx in 0..self.window {
                                let iy = oy * self.window + ky;
                                let ix = ox * self.window + kx;
                                let idx = ((bi * c + ci) * h + iy) * w + ix;
                                let v = score(idx);
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        winners.push(best_idx);
                    }
                }
            }
        }
        Ok((winners, vec![b, c, oh, ow]))
    }

    pub fn forward(&mut self, input: Value, _ctx: &Ctx) -> Result<Value> {
        match input {
            Value::Real(x) => {
                let (winners, out_shape) = self.pool_by(x.shape(), |i| x.data()[i])?;
                let data: Vec<f64> = winners.iter().map(|&i| x.data()[i]).collect();
                self.cache = Some(PoolCache {
                    input_shape: x.shape().to_vec(),
                    winners,
                    planes: false,
                });
                Ok(Value::Real(Tensor::from_vec(&out_shape, data).expect("sized")))
            }
            Value::Planes(acts) => {
                let g = acts.gamma;
                let p0 = acts.planes[0].data();
                let p1 = acts.planes[1].data();
                let (winners, out_shape) =
                    self.pool_by(acts.planes[0].shape(), |i| g[0] * p0[i] + g[1] * p1[i])?;
                let o0: Vec<f64> = winners.iter().map(|&i| p0[i]).collect();
                let o1: Vec<f64> = winners.iter().map(|&i| p1[i]).collect();
                self.cache = Some(PoolCache {
                    input_shape: acts.planes[0].shape().to_vec(),
                    winners,
                    planes: true,
                });
                Ok(Value::Planes(BinActs {
                    planes: [
                        Tensor::from_vec(&out_shape, o0).expect("sized"),
                        Tensor::from_vec(&out_shape, o1).expect("sized"),
                    ],
                    gamma: g,
                }))
            }
        }
    }

    pub fn backward(&mut self, upstream: GradFlow) -> Result<GradFlow> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::internal("maxpool backward without recorded forward"))?;
        match upstream {
            GradFlow::Real(dy) => {
                if cache.planes {
                    return Err(Error::internal("pool cache/gradient kind mismatch"));
                }
                let mut dx = vec![0.0; cache.input_shape.iter().product()];
                for (&win, &u) in cache.winners.iter().zip(dy.data()) {
                    dx[win] += u;
                }
                Ok(GradFlow::Real(
                    Tensor::from_vec(&cache.input_shape, dx).expect("sized"),
                ))
            }
            GradFlow::Planes { dplanes, dgamma } => {
                if !cache.planes {
                    return Err(Error::internal("pool cache/gradient kind mismatch"));
                }
                let n: usize = cache.input_shape.iter().product();
                let mut d0 = vec![0.0; n];
                let mut d1 = vec![0.0; n];
                for (k, &win) in cache.winners.iter().enumerate() {
                    d0[win] += dplanes[0].data()[k];
                    d1[win] += dplanes[1].data()[k];
                }
                Ok(GradFlow::Planes {
                    dplanes: [
                        Tensor::from_vec(&cache.input_shape, d0).expect("sized"),
                        Tensor::from_vec(&cache.input_shape, d1).expect("sized"),
                    ],
                    dgamma,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn conv_with(weight: Vec<f64>, o: usize, c: usize, k: usize, stride: usize) -> Conv2d {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(o, c, k, stride, Padding::Valid, &mut rng);
        conv.weight = Tensor::from_vec(&[o, c, k, k], weight).unwrap();
        conv
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut conv = conv_with(vec![1.0], 1, 1, 1, 1);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv
            .forward(Value::Real(x.clone()), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let mut conv = conv_with(vec![1.0; 4], 1, 1, 2, 1);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv
            .forward(Value::Real(x), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn stride_shape_arithmetic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(1, 1, 3, 2, Padding::Valid, &mut rng);
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let y = conv
            .forward(Value::Real(x), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn oversized_kernel_is_config_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(1, 1, 4, 1, Padding::Valid, &mut rng);
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv.forward(Value::Real(x), &Ctx::eval()).is_err());
    }

    #[test]
    fn maxpool_selects_window_maximum() {
        let mut pool = MaxPool2d::new(2);
        let x = Tensor::from_vec(
            &[1, 1, 2, 4],
            vec![1.0, 5.0, 2.0, 0.0, -1.0, 3.0, 2.0, 2.0],
        )
        .unwrap();
        let y = pool
            .forward(Value::Real(x), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 2.0]);
    }

    #[test]
    fn maxpool_on_planes_keeps_winner_bits() {
        let mut pool = MaxPool2d::new(2);
        let p0 = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -1.0, -1.0, -1.0]).unwrap();
        let p1 = Tensor::from_vec(&[1, 1, 2, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let acts = BinActs {
            planes: [p0, p1],
            gamma: [1.0, 0.25],
        };
        match pool.forward(Value::Planes(acts), &Ctx::eval()).unwrap() {
            Value::Planes(out) => {
                // values: 0.75, -0.75, -0.75, -1.25 -> winner is (+1, -1)
                assert_eq!(out.planes[0].data(), &[1.0]);
                assert_eq!(out.planes[1].data(), &[-1.0]);
            }
            _ => panic!("expected planes"),
        }
    }
}
