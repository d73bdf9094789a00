//! Hardening: freeze trained coefficients to sign values interpreted as
//! LUT configuration masks and ROM contents, fold batch normalization and
//! the level scales into per-neuron integer thresholds, simplify away
//! don't-care inputs, and reprune nodes whose hardened table is constant.
//!
//! Two independent executions of the hardened network exist: the netlist
//! simulator over [`HardNetlist`] (integer arithmetic over extracted
//! masks), and [`trainer_hardened_forward`], which re-runs the trainer's
//! own arithmetic with every parameter replaced by its hardened value.
//! Their outputs must agree bit-exactly; that equivalence is the flagship
//! verification of this module.

use crate::error::{Error, Result};
use crate::grad::{BatchNorm, Binarize, Conv2d, Dense, Layer, MaxPool2d, Network, Padding};
use crate::lut::{lagrange, LutLayer};
use crate::quant::{sign_pm1, RESIDUAL_LEVELS};

use super::simplify::simplify;
use super::{
    quantize_fold, Fold, HardConv, HardDense, HardLut, HardLutArray, HardNetlist, HardNode,
    HardPool, HardStage, NodeInput, NETLIST_FORMAT_VERSION,
};

/// One compute block of a binarized network: compute, normalization, and
/// (except at the head) the next binarizer, optionally followed by pooling.
struct Block<'a> {
    compute: &'a Layer,
    bn: &'a BatchNorm,
    next_bin: Option<&'a Binarize>,
    pool: Option<&'a MaxPool2d>,
}

/// Group a trained network into hardening blocks. The network must start
/// with a two-level input binarizer and follow the compute/batchnorm/
/// binarize pattern throughout.
fn blocks(net: &Network) -> Result<([f64; RESIDUAL_LEVELS], Vec<Block<'_>>)> {
    let layers = &net.layers;
    let input_gamma = match layers.first() {
        Some(Layer::Binarize(b)) if b.levels == RESIDUAL_LEVELS => {
            if !b.binarizer.initialized {
                return Err(Error::config("input binarizer has no calibrated scales"));
            }
            b.binarizer.gamma
        }
        _ => {
            return Err(Error::config(
                "hardening expects a residual-binarized network (input binarizer first)",
            ))
        }
    };
    let mut out = Vec::new();
    let mut i = 1usize;
    while i < layers.len() {
        let compute = match &layers[i] {
            l @ (Layer::Dense(_) | Layer::Conv2d(_) | Layer::Lut(_)) => l,
            other => {
                return Err(Error::config(format!(
                    "hardening expects a compute layer, found {}",
                    other.name()
                )))
            }
        };
        i += 1;
        let bn = match layers.get(i) {
            Some(Layer::BatchNorm(bn)) => bn,
            _ => {
                return Err(Error::config(
                    "hardening expects batch normalization after each compute layer",
                ))
            }
        };
        i += 1;
        let next_bin = match layers.get(i) {
            Some(Layer::Binarize(b)) if b.levels == RESIDUAL_LEVELS => {
                i += 1;
                Some(b)
            }
            _ => None,
        };
        let pool = if next_bin.is_some() {
            match layers.get(i) {
                Some(Layer::MaxPool2d(p)) => {
                    i += 1;
                    Some(p)
                }
                _ => None,
            }
        } else {
            None
        };
        out.push(Block {
            compute,
            bn,
            next_bin,
            pool,
        });
    }
    Ok((input_gamma, out))
}

/// Extract the hardened truth table of one node: mask bit at vertex v is
/// the sign of the polynomial at v with sign-hardened coefficients, which
/// collapses to sign(c_{-v}) * prod(v).
fn hardened_mask(coeffs: &[f64], k: usize) -> u64 {
    let n = 1usize << k;
    let mut mask = 0u64;
    for v in 0..n {
        let copp = sign_pm1(coeffs[(!v) & (n - 1)]);
        let parity = if (k - (v as u64).count_ones() as usize).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
        if copp * parity > 0.0 {
            mask |= 1 << v;
        }
    }
    mask
}

fn make_fold(
    bn: &BatchNorm,
    alpha: f64,
    in_gamma: [f64; RESIDUAL_LEVELS],
    next_gamma: Option<f64>,
) -> Fold {
    let (s, t) = bn.fold_affine();
    let mut qa0 = Vec::with_capacity(s.len());
    let mut qa1 = Vec::with_capacity(s.len());
    let mut qt = Vec::with_capacity(s.len());
    for o in 0..s.len() {
        qa0.push(quantize_fold(s[o] * alpha * in_gamma[0]));
        qa1.push(quantize_fold(s[o] * alpha * in_gamma[1]));
        qt.push(quantize_fold(t[o]));
    }
    Fold {
        qa: [qa0, qa1],
        qt,
        next_gamma_q: next_gamma.map(quantize_fold),
    }
}

fn harden_dense(dense: &Dense, fold: Fold) -> HardDense {
    let keep = dense.mask.as_ref();
    let weights = dense
        .weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if keep.map(|m| !m.keep[i]).unwrap_or(false) {
                0
            } else {
                sign_pm1(w) as i8
            }
        })
        .collect();
    HardDense {
        out_dim: dense.out_dim,
        in_dim: dense.in_dim,
        weights,
        fold,
    }
}

fn harden_conv(conv: &Conv2d, fold: Fold) -> Result<HardConv> {
    if conv.padding != Padding::Valid {
        return Err(Error::config(
            "hardening supports valid-padding convolutions only",
        ));
    }
    let keep = conv.mask.as_ref();
    let weights = conv
        .weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if keep.map(|m| !m.keep[i]).unwrap_or(false) {
                0
            } else {
                sign_pm1(w) as i8
            }
        })
        .collect();
    Ok(HardConv {
        out_channels: conv.out_channels,
        in_channels: conv.in_channels,
        kernel: conv.kernel,
        stride: conv.stride,
        weights,
        fold,
    })
}

fn harden_lut(layer: &LutLayer, mut fold: Fold) -> HardLutArray {
    let rows = layer.geometry.out_dim() / layer.t_o;
    let mut nodes = Vec::new();
    let mut repruned = 0usize;
    for node in &layer.nodes {
        let kx = node.inputs();
        let raw = HardLut {
            k_eff: node.k,
            mask: hardened_mask(&node.coeffs, node.k),
            inputs: (0..node.k)
                .map(|j| {
                    if j < kx {
                        NodeInput::Activation(j)
                    } else {
                        NodeInput::Param(j - kx)
                    }
                })
                .collect(),
        };
        let lut = simplify(&raw);
        if let Some(c) = lut.constant() {
            // The constant feeds every logical use of this node: fold
            // t_i copies per output unit into the thresholds, per plane.
            repruned += 1;
            let c = c as i64 * layer.t_i as i64;
            for a in 0..layer.t_o {
                let o = a * rows + node.row;
                fold.qt[o] += (fold.qa[0][o] + fold.qa[1][o]) * c;
            }
            continue;
        }
        let p_rom = node
            .p_words
            .iter()
            .map(|w| w.iter().map(|&v| sign_pm1(v) as i8).collect())
            .collect();
        nodes.push(HardNode {
            row: node.row,
            lut,
            selections: node.selections.clone(),
            p_rom,
        });
    }
    HardLutArray {
        geometry: layer.geometry,
        t_i: layer.t_i,
        t_o: layer.t_o,
        nodes,
        repruned_constants: repruned,
        fold,
    }
}

/// Harden a trained network into its netlist form.
pub fn harden(net: &Network, input_shape: &[usize]) -> Result<HardNetlist> {
    let (input_gamma, blocks) = blocks(net)?;
    let mut cur_gamma = input_gamma;
    let mut stages = Vec::new();
    for block in blocks {
        for g in cur_gamma {
            if g <= 0.0 {
                return Err(Error::config("level scales must be positive at hardening"));
            }
        }
        let next_gamma_first = block.next_bin.map(|b| b.binarizer.gamma[0]);
        let alpha = match block.compute {
            Layer::Dense(d) => d.alpha,
            Layer::Conv2d(c) => c.alpha,
            Layer::Lut(l) => l.alpha,
            _ => unreachable!(),
        };
        if alpha <= 0.0 {
            return Err(Error::config("layer scale must be positive at hardening"));
        }
        let fold = make_fold(block.bn, alpha, cur_gamma, next_gamma_first);
        let stage = match block.compute {
            Layer::Dense(d) => HardStage::Dense(harden_dense(d, fold)),
            Layer::Conv2d(c) => HardStage::Conv(harden_conv(c, fold)?),
            Layer::Lut(l) => HardStage::LutArray(harden_lut(l, fold)),
            _ => unreachable!(),
        };
        stages.push(stage);
        if let Some(bin) = block.next_bin {
            if !bin.binarizer.initialized {
                return Err(Error::config("binarizer has no calibrated scales"));
            }
            cur_gamma = bin.binarizer.gamma;
            if let Some(pool) = block.pool {
                stages.push(HardStage::MaxPool(HardPool {
                    window: pool.window,
                    qgamma: [quantize_fold(cur_gamma[0]), quantize_fold(cur_gamma[1])],
                }));
            }
        }
    }
    Ok(HardNetlist {
        version: NETLIST_FORMAT_VERSION,
        input_shape: input_shape.to_vec(),
        input_gamma,
        stages,
    })
}

/// Run one sample through the trainer's arithmetic with hardened
/// parameters: sign weights, sign coefficients and ROM bits, and the
/// quantized threshold constants from `hard`. All intermediate values are
/// integer-valued and exactly representable, so the result is bit-exact
/// against the netlist simulator by construction of the semantics, not of
/// the code paths.
pub fn trainer_hardened_forward(
    net: &Network,
    hard: &HardNetlist,
    planes: &[Vec<i8>; RESIDUAL_LEVELS],
) -> Result<Vec<i64>> {
    let (_, blocks) = blocks(net)?;
    let mut shape = hard.input_shape.clone();
    let mut cur: [Vec<f64>; 2] = [
        planes[0].iter().map(|&b| b as f64).collect(),
        planes[1].iter().map(|&b| b as f64).collect(),
    ];
    let mut stage_idx = 0usize;
    for block in blocks {
        let fold = match hard.stages.get(stage_idx) {
            Some(HardStage::Dense(d)) => &d.fold,
            Some(HardStage::Conv(c)) => &c.fold,
            Some(HardStage::LutArray(l)) => &l.fold,
            other => {
                return Err(Error::internal(format!(
                    "netlist/network structure mismatch at stage {stage_idx}: {other:?}"
                )))
            }
        };
        stage_idx += 1;
        // Plane sums with hardened parameters, trainer-side arithmetic.
        let (sums, out_shape): ([Vec<f64>; 2], Vec<usize>) = match block.compute {
            Layer::Dense(d) => {
                let mut out = [vec![0.0; d.out_dim], vec![0.0; d.out_dim]];
                for (pl, sums) in out.iter_mut().enumerate() {
                    for o in 0..d.out_dim {
                        let mut acc = 0.0;
                        for i in 0..d.in_dim {
                            let w = d.weight.data()[o * d.in_dim + i];
                            let pruned =
                                d.mask.as_ref().map(|m| !m.keep[o * d.in_dim + i]).unwrap_or(false);
                            if !pruned {
                                acc += sign_pm1(w) * cur[pl][i];
                            }
                        }
                        sums[o] = acc;
                    }
                }
                (out, vec![d.out_dim])
            }
            Layer::Conv2d(c) => {
                let (h, w) = (shape[1], shape[2]);
                let oh = (h - c.kernel) / c.stride + 1;
                let ow = (w - c.kernel) / c.stride + 1;
                let mut out = [
                    vec![0.0; c.out_channels * oh * ow],
                    vec![0.0; c.out_channels * oh * ow],
                ];
                for (pl, sums) in out.iter_mut().enumerate() {
                    for o in 0..c.out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = 0.0;
                                for ci in 0..c.in_channels {
                                    for ky in 0..c.kernel {
                                        for kx in 0..c.kernel {
                                            let wi = ((o * c.in_channels + ci) * c.kernel + ky)
                                                * c.kernel
                                                + kx;
                                            let pruned = c
                                                .mask
                                                .as_ref()
                                                .map(|m| !m.keep[wi])
                                                .unwrap_or(false);
                                            if pruned {
                                                continue;
                                            }
                                            let iy = oy * c.stride + ky;
                                            let ix = ox * c.stride + kx;
                                            acc += sign_pm1(c.weight.data()[wi])
                                                * cur[pl][(ci * h + iy) * w + ix];
                                        }
                                    }
                                }
                                sums[(o * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                (out, vec![c.out_channels, oh, ow])
            }
            Layer::Lut(l) => lut_hardened_sums(l, &cur, &shape)?,
            _ => unreachable!(),
        };
        // Quantized threshold fold, evaluated exactly in f64.
        let units: usize = out_shape[0];
        let spatial: usize = out_shape.iter().skip(1).product();
        let n = units * spatial;
        match fold.next_gamma_q {
            Some(qg) => {
                let mut p0 = vec![0.0; n];
                let mut p1 = vec![0.0; n];
                for o in 0..units {
                    for s in 0..spatial {
                        let i = o * spatial + s;
                        let acc = fold.qa[0][o] as f64 * sums[0][i]
                            + fold.qa[1][o] as f64 * sums[1][i]
                            + fold.qt[o] as f64;
                        let b0 = if acc >= 0.0 { 1.0 } else { -1.0 };
                        let acc2 = acc - qg as f64 * b0;
                        p0[i] = b0;
                        p1[i] = if acc2 >= 0.0 { 1.0 } else { -1.0 };
                    }
                }
                cur = [p0, p1];
                shape = out_shape;
            }
            None => {
                let mut scores = Vec::with_capacity(n);
                for o in 0..units {
                    for s in 0..spatial {
                        let i = o * spatial + s;
                        let acc = fold.qa[0][o] as f64 * sums[0][i]
                            + fold.qa[1][o] as f64 * sums[1][i]
                            + fold.qt[o] as f64;
                        scores.push(acc as i64);
                    }
                }
                return Ok(scores);
            }
        }
        if block.pool.is_some() {
            let pool = match hard.stages.get(stage_idx) {
                Some(HardStage::MaxPool(p)) => p,
                _ => return Err(Error::internal("expected pool stage in netlist")),
            };
            stage_idx += 1;
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (oh, ow) = (h / pool.window, w / pool.window);
            let mut p0 = vec![0.0; c * oh * ow];
            let mut p1 = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = i64::MIN;
                        let mut bits = (0.0, 0.0);
                        for ky in 0..pool.window {
                            for kx in 0..pool.window {
                                let idx =
                                    (ch * h + oy * pool.window + ky) * w + ox * pool.window + kx;
                                let v = pool.qgamma[0] * cur[0][idx] as i64
                                    + pool.qgamma[1] * cur[1][idx] as i64;
                                if v > best {
                                    best = v;
                                    bits = (cur[0][idx], cur[1][idx]);
                                }
                            }
                        }
                        p0[(ch * oh + oy) * ow + ox] = bits.0;
                        p1[(ch * oh + oy) * ow + ox] = bits.1;
                    }
                }
            }
            cur = [p0, p1];
            shape = vec![c, oh, ow];
        }
    }
    Err(Error::internal(
        "hardened network produced no output stage (missing head block)",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::lagrange::{eval_general, vertex_coord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_node_hardens_to_buffer() {
        // k = 1, c = (0.5, 0.5): mask maps -1 -> -1, +1 -> +1
        let mask = hardened_mask(&[0.5, 0.5], 1);
        assert_eq!(mask, 0b10);
    }

    #[test]
    fn negated_node_hardens_to_inverter() {
        let mask = hardened_mask(&[-0.5, -0.5], 1);
        assert_eq!(mask, 0b01);
    }

    #[test]
    fn all_positive_coefficients_give_xnor() {
        // k = 2: mask[v] = sign(prod v) = XNOR of the two inputs
        let mask = hardened_mask(&[0.3, 0.7, 0.2, 0.9], 2);
        assert_eq!(mask, 0b1001);
    }

    #[test]
    fn mask_matches_sign_of_polynomial_at_every_vertex() {
        // exhaustive for k <= 6 with random sign-hardened coefficients
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        for k in 1..=6usize {
            let coeffs: Vec<f64> = (0..1usize << k)
                .map(|_| rng.gen_range(-1.0f64..1.0))
                .collect();
            let hard: Vec<f64> = coeffs.iter().map(|&c| sign_pm1(c)).collect();
            let mask = hardened_mask(&coeffs, k);
            for v in 0..1usize << k {
                let z: Vec<f64> = (0..k).map(|j| vertex_coord(v, j)).collect();
                let g = eval_general(&hard, &z);
                let want = sign_pm1(g) > 0.0;
                assert_eq!((mask >> v) & 1 == 1, want, "k={k} v={v}");
            }
        }
    }
}

/// Plane sums of a LUT layer with sign-hardened coefficients and ROM bits,
/// evaluated through the trainer's polynomial path.
fn lut_hardened_sums(
    layer: &LutLayer,
    cur: &[Vec<f64>; 2],
    shape: &[usize],
) -> Result<([Vec<f64>; 2], Vec<usize>)> {
    use crate::lut::LutGeometry;
    match layer.geometry {
        LutGeometry::Dense { in_dim, out_dim } => {
            if shape != [in_dim] {
                return Err(Error::config(format!(
                    "lut layer expects input shape [{in_dim}], got {shape:?}"
                )));
            }
            let rows = out_dim / layer.t_o;
            let cols = in_dim / layer.t_i;
            let mut out = [vec![0.0; out_dim], vec![0.0; out_dim]];
            let mut zbuf = Vec::new();
            for node in &layer.nodes {
                let kx = node.inputs();
                let csign: Vec<f64> = node.coeffs.iter().map(|&c| sign_pm1(c)).collect();
                for a in 0..layer.t_o {
                    let o = a * rows + node.row;
                    for b in 0..layer.t_i {
                        let word: Vec<f64> = node.p_words[a * layer.t_i + b]
                            .iter()
                            .map(|&v| sign_pm1(v))
                            .collect();
                        for (pl, sums) in out.iter_mut().enumerate() {
                            zbuf.clear();
                            for j in 0..kx {
                                zbuf.push(cur[pl][b * cols + node.selections[b][j]]);
                            }
                            let g =
                                lagrange::eval_at_bits(&csign, node.k, node.p, &zbuf, &word);
                            sums[o] += sign_pm1(g);
                        }
                    }
                }
            }
            Ok((out, vec![out_dim]))
        }
        LutGeometry::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (h, w) = (shape[1], shape[2]);
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            let rows = out_channels / layer.t_o;
            let cl = in_channels / layer.t_i;
            let ksq = kernel * kernel;
            let n = out_channels * oh * ow;
            let mut out = [vec![0.0; n], vec![0.0; n]];
            let mut zbuf = Vec::new();
            for node in &layer.nodes {
                let kx = node.inputs();
                let csign: Vec<f64> = node.coeffs.iter().map(|&c| sign_pm1(c)).collect();
                for a in 0..layer.t_o {
                    let oc = a * rows + node.row;
                    for b in 0..layer.t_i {
                        let word: Vec<f64> = node.p_words[a * layer.t_i + b]
                            .iter()
                            .map(|&v| sign_pm1(v))
                            .collect();
                        for (pl, sums) in out.iter_mut().enumerate() {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    zbuf.clear();
                                    for j in 0..kx {
                                        let q = node.selections[b][j];
                                        let c = b * cl + q / ksq;
                                        let iy = oy * stride + (q % ksq) / kernel;
                                        let ix = ox * stride + q % kernel;
                                        zbuf.push(cur[pl][(c * h + iy) * w + ix]);
                                    }
                                    let g = lagrange::eval_at_bits(
                                        &csign, node.k, node.p, &zbuf, &word,
                                    );
                                    sums[(oc * oh + oy) * ow + ox] += sign_pm1(g);
                                }
                            }
                        }
                    }
                }
            }
            Ok((out, vec![out_channels, oh, ow]))
        }
    }
}
