//! LUT inference operators: (k, p) feasibility, logic expansion of pruned
//! layers into LUT nodes, interpolating-polynomial evaluation with
//! gradients, coefficient-matching initialization, and tiled forward
//! propagation.

pub mod expand;
pub mod init;
pub mod lagrange;

pub use expand::{expand_conv, expand_layer, ExpandSpec, Expansion, ReconnectWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{BinActs, Ctx, GradFlow, ParamView, Value};
use crate::quant::RESIDUAL_LEVELS;
use crate::tensor::Tensor;

/// Device LUT width ceiling for current-generation parts.
pub const MAX_K: usize = 6;

/// Split an overall tiling factor into (t_i, t_o) against a layer's
/// channel grid. Output-wise tiling degrades accuracy less than
/// input-wise tiling (input-wise sharing thins whole output channels
/// under pruning), so t_o takes as much of the factor as the grid allows.
pub fn suggest_tiling(t: usize, in_channels: usize, out_channels: usize) -> Result<(usize, usize)> {
    if t == 0 {
        return Err(Error::config("tiling factor must be positive"));
    }
    let mut best: Option<(usize, usize)> = None;
    for t_o in (1..=t).rev() {
        if t % t_o != 0 || out_channels % t_o != 0 {
            continue;
        }
        let t_i = t / t_o;
        if in_channels % t_i == 0 {
            best = Some((t_i, t_o));
            break;
        }
    }
    best.ok_or_else(|| {
        Error::config(format!(
            "no (t_i, t_o) split of {t} divides a {in_channels}x{out_channels} channel grid"
        ))
    })
}

/// Is a (k, p) microarchitecture realizable? Requires that the number of
/// expressible (k-p)-input functions covers the 2^p selectable ones:
/// 2^(2^(k-p)) >= 2^p. Tiling additionally requires p > 0; that rule is
/// enforced at expansion, not here.
pub fn feasible(k: usize, p: usize) -> Result<bool> {
    if !(1..=MAX_K).contains(&k) {
        return Err(Error::config(format!(
            "k must be within 1..={MAX_K} (device LUT width), got {k}"
        )));
    }
    if p >= k {
        return Ok(false);
    }
    // compare exponents of 2^(2^(k-p)) >= 2^p
    Ok((1u32 << (k - p)) as usize >= p)
}

/// One inference operator: a k-input node with p parameter inputs, its
/// input selection per input tile, and 2^k polynomial coefficients shared
/// across every tile that reuses it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LutNode {
    /// Total inputs; may be below the configured k when the candidate pool
    /// was too small to saturate the node.
    pub k: usize,
    pub p: usize,
    /// Output position within an output group.
    pub row: usize,
    /// First-input slot within an input group; preserves the original
    /// connection of the pruned layer.
    pub col: usize,
    /// Input slots per input tile; `selections[b][0] == col`, all distinct.
    pub selections: Vec<Vec<usize>>,
    /// 2^k coefficients, vertex-indexed (bit j set means d_j = +1).
    pub coeffs: Vec<f64>,
    /// One p-wide parameter word per logical operation, indexed
    /// `a * t_i + b` over output tile a and input tile b.
    pub p_words: Vec<Vec<f64>>,
    #[serde(skip)]
    pub gcoeffs: Vec<f64>,
    #[serde(skip)]
    pub gp_words: Vec<Vec<f64>>,
}

impl LutNode {
    pub fn restore(&mut self) {
        if self.gcoeffs.len() != self.coeffs.len() {
            self.gcoeffs = vec![0.0; self.coeffs.len()];
        }
        if self.gp_words.len() != self.p_words.len() {
            self.gp_words = self.p_words.iter().map(|w| vec![0.0; w.len()]).collect();
        }
    }

    pub fn inputs(&self) -> usize {
        self.k - self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LutGeometry {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    /// Valid-padding convolution; nodes select within one kernel window.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
}

impl LutGeometry {
    /// Input slots available to one node's selections, per input tile.
    pub fn slots_per_group(&self, t_i: usize) -> usize {
        match *self {
            LutGeometry::Dense { in_dim, .. } => in_dim / t_i,
            LutGeometry::Conv {
                in_channels,
                kernel,
                ..
            } => (in_channels / t_i) * kernel * kernel,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LutGeometry::Dense { out_dim, .. } => out_dim,
            LutGeometry::Conv { out_channels, .. } => out_channels,
        }
    }
}

/// A layer of LUT nodes with input/output channel tiling. Physical nodes
/// are reused `t_i * t_o` times per output computation, each logical use
/// carrying its own parameter word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LutLayer {
    pub geometry: LutGeometry,
    pub t_i: usize,
    pub t_o: usize,
    /// Configured node size; individual nodes may be narrower.
    pub k: usize,
    pub p: usize,
    pub alpha: f64,
    /// Physical nodes sorted by (row, col); the accumulation order over a
    /// channel matches the ascending-input order of the dense layer the
    /// nodes came from.
    pub nodes: Vec<LutNode>,
    #[serde(skip)]
    pub galpha: f64,
    #[serde(skip)]
    cache: Option<LutCache>,
}

#[derive(Debug, Clone)]
struct LutCache {
    input: BinActs,
    plane_sums: [Tensor; RESIDUAL_LEVELS],
    surrogate: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::expand::{expand_layer, ExpandSpec, ReconnectWeights};
    use crate::prune::PruneMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiling_suggestion_prefers_output_side() {
        assert_eq!(suggest_tiling(64, 256, 256).unwrap(), (1, 64));
        assert_eq!(suggest_tiling(64, 256, 32).unwrap(), (2, 32));
        assert_eq!(suggest_tiling(8, 4, 2).unwrap(), (4, 2));
        assert!(suggest_tiling(7, 4, 4).is_err());
        assert!(suggest_tiling(0, 4, 4).is_err());
    }

    #[test]
    fn feasibility_frontier() {
        assert!(feasible(3, 1).unwrap());
        assert!(feasible(6, 4).unwrap());
        assert!(!feasible(6, 5).unwrap());
        assert!(!feasible(3, 3).unwrap());
        assert!(feasible(1, 0).unwrap());
        assert!(feasible(3, 2).unwrap());
        assert!(feasible(5, 3).unwrap());
        assert!(!feasible(4, 3).unwrap());
        assert!(feasible(7, 0).is_err());
        assert!(feasible(0, 0).is_err());
    }

    fn random_planes(rng: &mut ChaCha8Rng, shape: &[usize], gamma: [f64; 2]) -> BinActs {
        let n: usize = shape.iter().product();
        let mut plane = || {
            Tensor::from_vec(
                shape,
                (0..n)
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                    .collect(),
            )
            .unwrap()
        };
        BinActs {
            planes: [plane(), plane()],
            gamma,
        }
    }

    #[test]
    fn tiled_output_is_sum_of_tile_partials() {
        // t_i = 2 layer output equals the sequential accumulation of the
        // two tile partial sums computed by hand
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let w = Tensor::from_vec(&[2, 8], (0..16).map(|i| 0.1 * (i + 1) as f64).collect()).unwrap();
        let spec = ExpandSpec {
            k: 2,
            p: 1,
            t_i: 2,
            t_o: 1,
            reconnect: ReconnectWeights::Original,
        };
        let exp = expand_layer(&w, &PruneMask::keep_all(16), &w, 1.0, &spec, &mut rng).unwrap();
        let mut layer = exp.layer.clone();
        let acts = random_planes(&mut rng, &[1, 8], [1.0, 0.5]);
        let y = layer
            .forward(Value::Planes(acts.clone()), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();

        // by-hand accumulation over tiles via the vertex evaluator
        let mut manual = vec![0.0; 2];
        for pl in 0..2 {
            for node in &exp.layer.nodes {
                for b in 0..2 {
                    let sel = &node.selections[b];
                    let xb: Vec<f64> = sel
                        .iter()
                        .map(|&s| acts.planes[pl].data()[b * 4 + s])
                        .collect();
                    let g = lagrange::eval_at_bits(
                        &node.coeffs,
                        node.k,
                        node.p,
                        &xb,
                        &node.p_words[b],
                    );
                    manual[node.row] += acts.gamma[pl] * g;
                }
            }
        }
        for o in 0..2 {
            assert!((y.data()[o] - manual[o]).abs() < 1e-9);
        }
    }

    #[test]
    fn binary_fast_path_matches_per_sample_oracle() {
        // forward and backward of the sample-contiguous kernel against a
        // plain per-sample loop over the verified node evaluator
        for (k, p, t_i, t_o) in [(4usize, 0usize, 1usize, 1usize), (3, 2, 2, 2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + k as u64);
            let (out_dim, in_dim, batch) = (4usize, 8usize, 5usize);
            let w = Tensor::from_vec(
                &[out_dim, in_dim],
                (0..32).map(|_| rng.gen_range(-0.6..0.6)).collect(),
            )
            .unwrap();
            let spec = ExpandSpec {
                k,
                p,
                t_i,
                t_o,
                reconnect: ReconnectWeights::Original,
            };
            let exp =
                expand_layer(&w, &PruneMask::keep_all(32), &w, 1.3, &spec, &mut rng).unwrap();
            let mut layer = exp.layer.clone();
            let acts = random_planes(&mut rng, &[batch, in_dim], [0.9, 0.4]);
            let y = layer
                .forward(Value::Planes(acts.clone()), &Ctx::eval())
                .unwrap()
                .expect_real("t")
                .unwrap();

            // oracle forward
            let rows = out_dim / t_o;
            let cols = in_dim / t_i;
            let mut want = vec![0.0; batch * out_dim];
            for node in &exp.layer.nodes {
                for a in 0..t_o {
                    let o = a * rows + node.row;
                    for b in 0..t_i {
                        for pl in 0..2 {
                            for bi in 0..batch {
                                let xb: Vec<f64> = node.selections[b]
                                    .iter()
                                    .map(|&s| acts.planes[pl].data()[bi * in_dim + b * cols + s])
                                    .collect();
                                let g = lagrange::eval_at_bits(
                                    &node.coeffs,
                                    node.k,
                                    node.p,
                                    &xb,
                                    &node.p_words[a * t_i + b],
                                );
                                want[bi * out_dim + o] += 1.3 * acts.gamma[pl] * g;
                            }
                        }
                    }
                }
            }
            for (have, want) in y.data().iter().zip(&want) {
                assert!((have - want).abs() < 1e-12, "k={k} p={p}");
            }

            // backward against the same oracle structure
            let dy = Tensor::from_vec(
                &[batch, out_dim],
                (0..batch * out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let flow = layer.backward(GradFlow::Planes {
                dplanes: [Tensor::zeros(&[1]), Tensor::zeros(&[1])],
                dgamma: [0.0, 0.0],
            });
            assert!(flow.is_err(), "lut backward must reject plane gradients");
            layer
                .forward(Value::Planes(acts.clone()), &Ctx::eval())
                .unwrap();
            let flow = layer.backward(GradFlow::Real(dy.clone())).unwrap();
            let (dp_fast, dg_fast) = match flow {
                GradFlow::Planes { dplanes, dgamma } => (dplanes, dgamma),
                _ => panic!("expected plane gradients"),
            };

            let mut want_dp = [vec![0.0; batch * in_dim], vec![0.0; batch * in_dim]];
            let mut want_dc: Vec<Vec<f64>> =
                exp.layer.nodes.iter().map(|n| vec![0.0; n.coeffs.len()]).collect();
            let mut want_dg = [0.0f64; 2];
            for (ni, node) in exp.layer.nodes.iter().enumerate() {
                let kx = node.inputs();
                for a in 0..t_o {
                    let o = a * rows + node.row;
                    for b in 0..t_i {
                        for pl in 0..2 {
                            for bi in 0..batch {
                                let u = dy.data()[bi * out_dim + o] * 1.3 * acts.gamma[pl];
                                let xb: Vec<f64> = node.selections[b]
                                    .iter()
                                    .map(|&s| acts.planes[pl].data()[bi * in_dim + b * cols + s])
                                    .collect();
                                let mut dx = vec![0.0; kx];
                                let mut dpw = vec![0.0; p];
                                lagrange::grad_at_bits(
                                    &node.coeffs,
                                    node.k,
                                    node.p,
                                    &xb,
                                    &node.p_words[a * t_i + b],
                                    u,
                                    &mut want_dc[ni],
                                    &mut dx,
                                    &mut dpw,
                                );
                                for (j, &s) in node.selections[b].iter().enumerate() {
                                    want_dp[pl][bi * in_dim + b * cols + s] += dx[j];
                                }
                            }
                        }
                    }
                }
            }
            for pl in 0..2 {
                for bi in 0..batch {
                    for oi in 0..out_dim {
                        let s = {
                            // recompute plane sums for the gamma gradient
                            let mut acc = 0.0;
                            for node in &exp.layer.nodes {
                                for a in 0..t_o {
                                    if a * rows + node.row != oi {
                                        continue;
                                    }
                                    for b in 0..t_i {
                                        let xb: Vec<f64> = node.selections[b]
                                            .iter()
                                            .map(|&s| {
                                                acts.planes[pl].data()[bi * in_dim + b * cols + s]
                                            })
                                            .collect();
                                        acc += lagrange::eval_at_bits(
                                            &node.coeffs,
                                            node.k,
                                            node.p,
                                            &xb,
                                            &node.p_words[a * t_i + b],
                                        );
                                    }
                                }
                            }
                            acc
                        };
                        want_dg[pl] += dy.data()[bi * out_dim + oi] * 1.3 * s;
                    }
                }
            }
            for pl in 0..2 {
                for (have, want) in dp_fast[pl].data().iter().zip(&want_dp[pl]) {
                    assert!((have - want).abs() < 1e-12, "dplane k={k} p={p}");
                }
                assert!((dg_fast[pl] - want_dg[pl]).abs() < 1e-9, "dgamma k={k} p={p}");
            }
            for (node, want) in layer.nodes.iter().zip(&want_dc) {
                for (have, want) in node.gcoeffs.iter().zip(want) {
                    assert!((have - want).abs() < 1e-12, "dcoeffs k={k} p={p}");
                }
            }
        }
    }

    #[test]
    fn empty_channel_outputs_zero() {
        // a fully pruned output row contributes f(0)
        let w = Tensor::from_vec(&[2, 4], vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = crate::prune::prune_threshold(&w, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let spec = ExpandSpec {
            k: 2,
            p: 0,
            t_i: 1,
            t_o: 1,
            reconnect: ReconnectWeights::Original,
        };
        let exp = expand_layer(&w, &mask, &w, 1.0, &spec, &mut rng).unwrap();
        let mut layer = exp.layer;
        let acts = random_planes(&mut rng, &[3, 4], [1.0, 0.5]);
        let y = layer
            .forward(Value::Planes(acts), &Ctx::eval())
            .unwrap()
            .expect_real("t")
            .unwrap();
        for b in 0..3 {
            assert_eq!(y.data()[b * 2 + 1], 0.0);
        }
    }
}

impl LutLayer {
    pub fn restore(&mut self) {
        for n in &mut self.nodes {
            n.restore();
        }
    }

    /// Surviving logical operations (physical nodes times reuse factor).
    pub fn logical_ops(&self) -> usize {
        self.nodes.len() * self.t_i * self.t_o
    }

    fn dense_dims(&self) -> Result<(usize, usize)> {
        match self.geometry {
            LutGeometry::Dense { in_dim, out_dim } => Ok((in_dim, out_dim)),
            _ => Err(Error::internal("dense path on conv geometry")),
        }
    }

    pub fn forward(&mut self, input: Value, ctx: &Ctx) -> Result<Value> {
        let acts = input.expect_planes("lut layer")?;
        let (plane_sums, out_shape) = match self.geometry {
            LutGeometry::Dense { .. } => self.forward_dense(&acts, ctx)?,
            LutGeometry::Conv { .. } => self.forward_conv(&acts, ctx)?,
        };
        let g = acts.gamma;
        let mut y = vec![0.0; plane_sums[0].len()];
        for (i, v) in y.iter_mut().enumerate() {
            *v = self.alpha * (g[0] * plane_sums[0].data()[i] + g[1] * plane_sums[1].data()[i]);
        }
        let y = Tensor::from_vec(&out_shape, y).expect("sized");
        self.cache = Some(LutCache {
            input: acts,
            plane_sums,
            surrogate: ctx.surrogate,
        });
        Ok(Value::Real(y))
    }

    fn forward_dense(
        &mut self,
        acts: &BinActs,
        ctx: &Ctx,
    ) -> Result<([Tensor; RESIDUAL_LEVELS], Vec<usize>)> {
        let (in_dim, out_dim) = self.dense_dims()?;
        let shape = acts.planes[0].shape();
        if shape.len() != 2 || shape[1] != in_dim {
            return Err(Error::config(format!(
                "lut layer expects [batch, {in_dim}], got {shape:?}"
            )));
        }
        if !ctx.surrogate {
            return self.forward_dense_binary(acts);
        }
        let batch = shape[0];
        let rows = out_dim / self.t_o;
        let cols = in_dim / self.t_i;
        let mut sums =
            [vec![0.0; batch * out_dim], vec![0.0; batch * out_dim]];
        let mut zbuf = Vec::new();
        for node in &self.nodes {
            let kx = node.inputs();
            for a in 0..self.t_o {
                let out_idx = a * rows + node.row;
                for b in 0..self.t_i {
                    let sel = &node.selections[b];
                    let word = &node.p_words[a * self.t_i + b];
                    for (pl, sum) in sums.iter_mut().enumerate() {
                        let plane = acts.planes[pl].data();
                        for bi in 0..batch {
                            let base = bi * in_dim + b * cols;
                            zbuf.clear();
                            for j in 0..kx {
                                zbuf.push(plane[base + sel[j]]);
                            }
                            let g = if ctx.surrogate {
                                zbuf.extend_from_slice(word);
                                lagrange::eval_general(&node.coeffs, &zbuf)
                            } else {
                                lagrange::eval_at_bits(&node.coeffs, node.k, node.p, &zbuf, word)
                            };
                            sum[bi * out_dim + out_idx] += g;
                        }
                    }
                }
            }
        }
        let shape = vec![batch, out_dim];
        let [s0, s1] = sums;
        Ok((
            [
                Tensor::from_vec(&shape, s0).expect("sized"),
                Tensor::from_vec(&shape, s1).expect("sized"),
            ],
            shape,
        ))
    }

    /// Binary-mode dense forward over sample-contiguous planes. Transposing
    /// to [input, batch] makes each node read and write contiguous runs;
    /// accumulation order per output cell matches the general path, so the
    /// results are bit-identical.
    fn forward_dense_binary(
        &mut self,
        acts: &BinActs,
    ) -> Result<([Tensor; RESIDUAL_LEVELS], Vec<usize>)> {
        let (in_dim, out_dim) = self.dense_dims()?;
        let batch = acts.planes[0].shape()[0];
        let rows = out_dim / self.t_o;
        let cols = in_dim / self.t_i;
        let mut xt = [vec![0.0; in_dim * batch], vec![0.0; in_dim * batch]];
        for (pl, t) in xt.iter_mut().enumerate() {
            let plane = acts.planes[pl].data();
            for bi in 0..batch {
                for i in 0..in_dim {
                    t[i * batch + bi] = plane[bi * in_dim + i];
                }
            }
        }
        let mut sums_t = [vec![0.0; out_dim * batch], vec![0.0; out_dim * batch]];
        let mut xbuf = [0.0f64; MAX_K];
        for node in &self.nodes {
            let kx = node.inputs();
            let scale0 = (1u64 << kx) as f64;
            for a in 0..self.t_o {
                let out_idx = a * rows + node.row;
                for b in 0..self.t_i {
                    let sel = &node.selections[b];
                    let word = &node.p_words[a * self.t_i + b];
                    for pl in 0..RESIDUAL_LEVELS {
                        let t = &xt[pl];
                        let dst = &mut sums_t[pl][out_idx * batch..(out_idx + 1) * batch];
                        if node.p == 0 {
                            for (bi, d) in dst.iter_mut().enumerate() {
                                let mut base = 0usize;
                                let mut sign = 1.0f64;
                                for (j, &s) in sel.iter().enumerate() {
                                    let x = t[(b * cols + s) * batch + bi];
                                    if x < 0.0 {
                                        base |= 1 << j;
                                    }
                                    sign *= x;
                                }
                                *d += node.coeffs[base] * (scale0 * sign);
                            }
                        } else {
                            for (bi, d) in dst.iter_mut().enumerate() {
                                for (j, &s) in sel.iter().enumerate() {
                                    xbuf[j] = t[(b * cols + s) * batch + bi];
                                }
                                *d += lagrange::eval_at_bits(
                                    &node.coeffs,
                                    node.k,
                                    node.p,
                                    &xbuf[..kx],
                                    word,
                                );
                            }
                        }
                    }
                }
            }
        }
        let shape = vec![batch, out_dim];
        let mut out = [vec![0.0; batch * out_dim], vec![0.0; batch * out_dim]];
        for (pl, o) in out.iter_mut().enumerate() {
            let t = &sums_t[pl];
            for oi in 0..out_dim {
                for bi in 0..batch {
                    o[bi * out_dim + oi] = t[oi * batch + bi];
                }
            }
        }
        let [s0, s1] = out;
        Ok((
            [
                Tensor::from_vec(&shape, s0).expect("sized"),
                Tensor::from_vec(&shape, s1).expect("sized"),
            ],
            shape,
        ))
    }

    /// Binary-mode dense backward mirroring [`Self::forward_dense_binary`].
    fn backward_dense_binary(&mut self, dy: &Tensor, cache: &LutCache) -> Result<[Tensor; 2]> {
        let (in_dim, out_dim) = self.dense_dims()?;
        let batch = dy.shape()[0];
        let rows = out_dim / self.t_o;
        let cols = in_dim / self.t_i;
        let gam = cache.input.gamma;
        let mut xt = [vec![0.0; in_dim * batch], vec![0.0; in_dim * batch]];
        for (pl, t) in xt.iter_mut().enumerate() {
            let plane = cache.input.planes[pl].data();
            for bi in 0..batch {
                for i in 0..in_dim {
                    t[i * batch + bi] = plane[bi * in_dim + i];
                }
            }
        }
        let mut dyt = vec![0.0; out_dim * batch];
        for bi in 0..batch {
            for oi in 0..out_dim {
                dyt[oi * batch + bi] = dy.data()[bi * out_dim + oi];
            }
        }
        let mut dxt = [vec![0.0; in_dim * batch], vec![0.0; in_dim * batch]];
        let mut xbuf = [0.0f64; MAX_K];
        let mut dbuf = [0.0f64; MAX_K];
        for node in &mut self.nodes {
            let kx = node.inputs();
            let scale0 = (1u64 << kx) as f64;
            let half = scale0 * 0.5;
            for a in 0..self.t_o {
                let out_idx = a * rows + node.row;
                for b in 0..self.t_i {
                    let widx = a * self.t_i + b;
                    for pl in 0..RESIDUAL_LEVELS {
                        let ag = self.alpha * gam[pl];
                        let t = &xt[pl];
                        let dxp = &mut dxt[pl];
                        let urow = &dyt[out_idx * batch..(out_idx + 1) * batch];
                        if node.p == 0 {
                            for (bi, &u0) in urow.iter().enumerate() {
                                let u = u0 * ag;
                                if u == 0.0 {
                                    continue;
                                }
                                let mut base = 0usize;
                                let mut sign = 1.0f64;
                                for (j, &s) in node.selections[b].iter().enumerate() {
                                    let x = t[(b * cols + s) * batch + bi];
                                    xbuf[j] = x;
                                    if x < 0.0 {
                                        base |= 1 << j;
                                    }
                                    sign *= x;
                                }
                                node.gcoeffs[base] += u * scale0 * sign;
                                let hs = u * half * sign;
                                for (j, &s) in node.selections[b].iter().enumerate() {
                                    let pair =
                                        node.coeffs[base] + node.coeffs[base ^ (1 << j)];
                                    dxp[(b * cols + s) * batch + bi] += hs * xbuf[j] * pair;
                                }
                            }
                        } else {
                            for (bi, &u0) in urow.iter().enumerate() {
                                let u = u0 * ag;
                                if u == 0.0 {
                                    continue;
                                }
                                for (j, &s) in node.selections[b].iter().enumerate() {
                                    xbuf[j] = t[(b * cols + s) * batch + bi];
                                }
                                dbuf[..node.k].iter_mut().for_each(|v| *v = 0.0);
                                let (dx, dp) = dbuf[..node.k].split_at_mut(kx);
                                lagrange::grad_at_bits(
                                    &node.coeffs,
                                    node.k,
                                    node.p,
                                    &xbuf[..kx],
                                    &node.p_words[widx],
                                    u,
                                    &mut node.gcoeffs,
                                    dx,
                                    dp,
                                );
                                for (j, &s) in node.selections[b].iter().enumerate() {
                                    dxp[(b * cols + s) * batch + bi] += dbuf[j];
                                }
                                for j in 0..node.p {
                                    node.gp_words[widx][j] += dbuf[kx + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = [batch, in_dim];
        let mut out = [vec![0.0; batch * in_dim], vec![0.0; batch * in_dim]];
        for (pl, o) in out.iter_mut().enumerate() {
            let t = &dxt[pl];
            for i in 0..in_dim {
                for bi in 0..batch {
                    o[bi * in_dim + i] = t[i * batch + bi];
                }
            }
        }
        let [d0, d1] = out;
        Ok([
            Tensor::from_vec(&shape, d0).expect("sized"),
            Tensor::from_vec(&shape, d1).expect("sized"),
        ])
    }

    fn conv_dims(&self) -> (usize, usize, usize, usize) {
        match self.geometry {
            LutGeometry::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => (in_channels, out_channels, kernel, stride),
            _ => unreachable!(),
        }
    }

    fn forward_conv(
        &mut self,
        acts: &BinActs,
        ctx: &Ctx,
    ) -> Result<([Tensor; RESIDUAL_LEVELS], Vec<usize>)> {
        let (cin, cout, kernel, stride) = self.conv_dims();
        let shape = acts.planes[0].shape();
        if shape.len() != 4 || shape[1] != cin {
            return Err(Error::config(format!(
                "lut conv layer expects [batch, {cin}, h, w], got {shape:?}"
            )));
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        if kernel > h || kernel > w {
            return Err(Error::config("kernel larger than input"));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let rows = cout / self.t_o;
        let cl = cin / self.t_i;
        let ksq = kernel * kernel;
        let out_len = batch * cout * oh * ow;
        let mut sums = [vec![0.0; out_len], vec![0.0; out_len]];
        let mut zbuf = Vec::new();
        for node in &self.nodes {
            let kx = node.inputs();
            for a in 0..self.t_o {
                let oc = a * rows + node.row;
                for b in 0..self.t_i {
                    let sel = &node.selections[b];
                    let word = &node.p_words[a * self.t_i + b];
                    for (pl, sum) in sums.iter_mut().enumerate() {
                        let plane = acts.planes[pl].data();
                        for bi in 0..batch {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    zbuf.clear();
                                    for j in 0..kx {
                                        let q = sel[j];
                                        let c = b * cl + q / ksq;
                                        let rem = q % ksq;
                                        let iy = oy * stride + rem / kernel;
                                        let ix = ox * stride + rem % kernel;
                                        zbuf.push(plane[((bi * cin + c) * h + iy) * w + ix]);
                                    }
                                    let g = if ctx.surrogate {
                                        zbuf.extend_from_slice(word);
                                        lagrange::eval_general(&node.coeffs, &zbuf)
                                    } else {
                                        lagrange::eval_at_bits(
                                            &node.coeffs,
                                            node.k,
                                            node.p,
                                            &zbuf,
                                            word,
                                        )
                                    };
                                    sum[((bi * cout + oc) * oh + oy) * ow + ox] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = vec![batch, cout, oh, ow];
        let [s0, s1] = sums;
        Ok((
            [
                Tensor::from_vec(&shape, s0).expect("sized"),
                Tensor::from_vec(&shape, s1).expect("sized"),
            ],
            shape,
        ))
    }

    pub fn backward(&mut self, upstream: GradFlow) -> Result<GradFlow> {
        let dy = upstream.expect_real("lut layer")?;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::internal("lut backward without recorded forward"))?;
        let g = cache.input.gamma;
        let mut dgamma = [0.0; RESIDUAL_LEVELS];
        for ((u, s0), s1) in dy
            .data()
            .iter()
            .zip(cache.plane_sums[0].data())
            .zip(cache.plane_sums[1].data())
        {
            self.galpha += u * (g[0] * s0 + g[1] * s1);
            dgamma[0] += u * self.alpha * s0;
            dgamma[1] += u * self.alpha * s1;
        }
        let dplanes = match self.geometry {
            LutGeometry::Dense { .. } => self.backward_dense(&dy, &cache)?,
            LutGeometry::Conv { .. } => self.backward_conv(&dy, &cache)?,
        };
        Ok(GradFlow::Planes { dplanes, dgamma })
    }

    fn backward_dense(&mut self, dy: &Tensor, cache: &LutCache) -> Result<[Tensor; 2]> {
        if !cache.surrogate {
            return self.backward_dense_binary(dy, cache);
        }
        let (in_dim, out_dim) = self.dense_dims()?;
        let batch = dy.shape()[0];
        let rows = out_dim / self.t_o;
        let cols = in_dim / self.t_i;
        let gam = cache.input.gamma;
        let mut dplanes = [vec![0.0; batch * in_dim], vec![0.0; batch * in_dim]];
        let mut zbuf = Vec::new();
        let mut dxbuf = Vec::new();
        for node in &mut self.nodes {
            let kx = node.inputs();
            for a in 0..self.t_o {
                let out_idx = a * rows + node.row;
                for b in 0..self.t_i {
                    let sel = &node.selections[b];
                    let widx = a * self.t_i + b;
                    for pl in 0..RESIDUAL_LEVELS {
                        let plane = cache.input.planes[pl].data();
                        let dplane = &mut dplanes[pl];
                        for bi in 0..batch {
                            let up = dy.data()[bi * out_dim + out_idx] * self.alpha * gam[pl];
                            if up == 0.0 {
                                continue;
                            }
                            let base = bi * in_dim + b * cols;
                            zbuf.clear();
                            for j in 0..kx {
                                zbuf.push(plane[base + sel[j]]);
                            }
                            dxbuf.clear();
                            dxbuf.resize(node.k, 0.0);
                            if cache.surrogate {
                                zbuf.extend_from_slice(&node.p_words[widx]);
                                lagrange::grad_general(
                                    &node.coeffs,
                                    &zbuf,
                                    up,
                                    &mut node.gcoeffs,
                                    &mut dxbuf,
                                );
                            } else {
                                let (dx, dp) = dxbuf.split_at_mut(kx);
                                lagrange::grad_at_bits(
                                    &node.coeffs,
                                    node.k,
                                    node.p,
                                    &zbuf,
                                    &node.p_words[widx],
                                    up,
                                    &mut node.gcoeffs,
                                    dx,
                                    dp,
                                );
                            }
                            for j in 0..kx {
                                dplane[base + sel[j]] += dxbuf[j];
                            }
                            for j in 0..node.p {
                                node.gp_words[widx][j] += dxbuf[kx + j];
                            }
                        }
                    }
                }
            }
        }
        let shape = [batch, in_dim];
        let [d0, d1] = dplanes;
        Ok([
            Tensor::from_vec(&shape, d0).expect("sized"),
            Tensor::from_vec(&shape, d1).expect("sized"),
        ])
    }

    fn backward_conv(&mut self, dy: &Tensor, cache: &LutCache) -> Result<[Tensor; 2]> {
        let (cin, cout, kernel, stride) = self.conv_dims();
        let in_shape = cache.input.planes[0].shape().to_vec();
        let (batch, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
        let oh = dy.shape()[2];
        let ow = dy.shape()[3];
        let rows = cout / self.t_o;
        let cl = cin / self.t_i;
        let ksq = kernel * kernel;
        let gam = cache.input.gamma;
        let n_in = batch * cin * h * w;
        let mut dplanes = [vec![0.0; n_in], vec![0.0; n_in]];
        let mut zbuf = Vec::new();
        let mut dxbuf = Vec::new();
        let mut idxbuf: Vec<usize> = Vec::new();
        for node in &mut self.nodes {
            let kx = node.inputs();
            for a in 0..self.t_o {
                let oc = a * rows + node.row;
                for b in 0..self.t_i {
                    let sel = &node.selections[b];
                    let widx = a * self.t_i + b;
                    for pl in 0..RESIDUAL_LEVELS {
                        let plane = cache.input.planes[pl].data();
                        let dplane = &mut dplanes[pl];
                        for bi in 0..batch {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let up = dy.data()[((bi * cout + oc) * oh + oy) * ow + ox]
                                        * self.alpha
                                        * gam[pl];
                                    if up == 0.0 {
                                        continue;
                                    }
                                    zbuf.clear();
                                    idxbuf.clear();
                                    for j in 0..kx {
                                        let q = sel[j];
                                        let c = b * cl + q / ksq;
                                        let rem = q % ksq;
                                        let iy = oy * stride + rem / kernel;
                                        let ix = ox * stride + rem % kernel;
                                        let idx = ((bi * cin + c) * h + iy) * w + ix;
                                        idxbuf.push(idx);
                                        zbuf.push(plane[idx]);
                                    }
                                    dxbuf.clear();
                                    dxbuf.resize(node.k, 0.0);
                                    if cache.surrogate {
                                        zbuf.extend_from_slice(&node.p_words[widx]);
                                        lagrange::grad_general(
                                            &node.coeffs,
                                            &zbuf,
                                            up,
                                            &mut node.gcoeffs,
                                            &mut dxbuf,
                                        );
                                    } else {
                                        let (dx, dp) = dxbuf.split_at_mut(kx);
                                        lagrange::grad_at_bits(
                                            &node.coeffs,
                                            node.k,
                                            node.p,
                                            &zbuf,
                                            &node.p_words[widx],
                                            up,
                                            &mut node.gcoeffs,
                                            dx,
                                            dp,
                                        );
                                    }
                                    for j in 0..kx {
                                        dplane[idxbuf[j]] += dxbuf[j];
                                    }
                                    for j in 0..node.p {
                                        node.gp_words[widx][j] += dxbuf[kx + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let [d0, d1] = dplanes;
        Ok([
            Tensor::from_vec(&in_shape, d0).expect("sized"),
            Tensor::from_vec(&in_shape, d1).expect("sized"),
        ])
    }

    pub fn zero_grads(&mut self) {
        self.galpha = 0.0;
        for node in &mut self.nodes {
            node.gcoeffs.iter_mut().for_each(|g| *g = 0.0);
            for w in &mut node.gp_words {
                w.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView)) {
        f(ParamView {
            data: std::slice::from_mut(&mut self.alpha),
            grad: std::slice::from_mut(&mut self.galpha),
            mask: None,
            floor: Some(1e-6),
        });
        for node in &mut self.nodes {
            f(ParamView {
                data: &mut node.coeffs,
                grad: &mut node.gcoeffs,
                mask: None,
                floor: None,
            });
            for (w, g) in node.p_words.iter_mut().zip(&mut node.gp_words) {
                f(ParamView {
                    data: w,
                    grad: g,
                    mask: None,
                    floor: None,
                });
            }
        }
    }
}
