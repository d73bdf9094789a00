//! Bit-exact simulator of a hardened netlist: LUT lookups, integer
//! popcounts, and integer threshold comparisons only. Stands in for FPGA
//! execution during verification.

use crate::error::{Error, Result};
use crate::quant::{sign_pm1, RESIDUAL_LEVELS};

use super::{Fold, HardLutArray, HardNetlist, HardStage, NodeInput};

/// Residual-binarize one real input sample into two sign planes with the
/// network's input scales.
pub fn input_planes(x: &[f64], gamma: [f64; RESIDUAL_LEVELS]) -> [Vec<i8>; RESIDUAL_LEVELS] {
    let mut p0 = Vec::with_capacity(x.len());
    let mut p1 = Vec::with_capacity(x.len());
    for &v in x {
        let b0 = sign_pm1(v);
        let b1 = sign_pm1(v - gamma[0] * b0);
        p0.push(b0 as i8);
        p1.push(b1 as i8);
    }
    [p0, p1]
}

enum FoldOut {
    Planes([Vec<i8>; RESIDUAL_LEVELS]),
    Scores(Vec<i64>),
}

fn apply_fold(fold: &Fold, sums: &[Vec<i64>; RESIDUAL_LEVELS], units: usize, spatial: usize) -> FoldOut {
    match fold.next_gamma_q {
        Some(qg) => {
            let n = units * spatial;
            let mut p0 = vec![0i8; n];
            let mut p1 = vec![0i8; n];
            for o in 0..units {
                for s in 0..spatial {
                    let i = o * spatial + s;
                    let acc = fold.qa[0][o] * sums[0][i] + fold.qa[1][o] * sums[1][i] + fold.qt[o];
                    let b0: i8 = if acc >= 0 { 1 } else { -1 };
                    let acc2 = acc - qg * b0 as i64;
                    p0[i] = b0;
                    p1[i] = if acc2 >= 0 { 1 } else { -1 };
                }
            }
            FoldOut::Planes([p0, p1])
        }
        None => {
            let mut scores = Vec::with_capacity(units * spatial);
            for o in 0..units {
                for s in 0..spatial {
                    let i = o * spatial + s;
                    scores.push(
                        fold.qa[0][o] * sums[0][i] + fold.qa[1][o] * sums[1][i] + fold.qt[o],
                    );
                }
            }
            FoldOut::Scores(scores)
        }
    }
}

fn lut_array_sums(
    layer: &HardLutArray,
    planes: &[Vec<i8>; RESIDUAL_LEVELS],
    shape: &[usize],
) -> Result<([Vec<i64>; RESIDUAL_LEVELS], Vec<usize>, usize)> {
    use crate::lut::LutGeometry;
    let mut bits = Vec::new();
    match layer.geometry {
        LutGeometry::Dense { in_dim, out_dim } => {
            if shape != [in_dim] {
                return Err(Error::config(format!(
                    "netlist lut stage expects [{in_dim}], got {shape:?}"
                )));
            }
            let rows = out_dim / layer.t_o;
            let cols = in_dim / layer.t_i;
            let mut sums = [vec![0i64; out_dim], vec![0i64; out_dim]];
            for node in &layer.nodes {
                for a in 0..layer.t_o {
                    let o = a * rows + node.row;
                    for b in 0..layer.t_i {
                        let rom = &node.p_rom[a * layer.t_i + b];
                        for (pl, sum) in sums.iter_mut().enumerate() {
                            bits.clear();
                            for input in &node.lut.inputs {
                                bits.push(match input {
                                    NodeInput::Activation(j) => {
                                        planes[pl][b * cols + node.selections[b][*j]]
                                    }
                                    NodeInput::Param(j) => rom[*j],
                                });
                            }
                            sum[o] += node.lut.eval(&bits) as i64;
                        }
                    }
                }
            }
            Ok((sums, vec![out_dim], out_dim))
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
            let mut sums = [vec![0i64; n], vec![0i64; n]];
            for node in &layer.nodes {
                for a in 0..layer.t_o {
                    let oc = a * rows + node.row;
                    for b in 0..layer.t_i {
                        let rom = &node.p_rom[a * layer.t_i + b];
                        for (pl, sum) in sums.iter_mut().enumerate() {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    bits.clear();
                                    for input in &node.lut.inputs {
                                        bits.push(match input {
                                            NodeInput::Activation(j) => {
                                                let q = node.selections[b][*j];
                                                let c = b * cl + q / ksq;
                                                let iy = oy * stride + (q % ksq) / kernel;
                                                let ix = ox * stride + q % kernel;
                                                planes[pl][(c * h + iy) * w + ix]
                                            }
                                            NodeInput::Param(j) => rom[*j],
                                        });
                                    }
                                    sum[(oc * oh + oy) * ow + ox] += node.lut.eval(&bits) as i64;
                                }
                            }
                        }
                    }
                }
            }
            Ok((sums, vec![out_channels, oh, ow], out_channels))
        }
    }
}

/// Simulate one sample (already residual-binarized into sign planes);
/// returns the integer class scores.
pub fn simulate(hard: &HardNetlist, input: &[Vec<i8>; RESIDUAL_LEVELS]) -> Result<Vec<i64>> {
    let mut shape = hard.input_shape.clone();
    let expect: usize = shape.iter().product();
    if input[0].len() != expect || input[1].len() != expect {
        return Err(Error::config(format!(
            "input planes have {} values, netlist expects {expect}",
            input[0].len()
        )));
    }
    let mut planes = input.clone();
    for stage in &hard.stages {
        let folded = match stage {
            HardStage::Dense(d) => {
                if shape != [d.in_dim] {
                    return Err(Error::config(format!(
                        "netlist dense stage expects [{}], got {shape:?}",
                        d.in_dim
                    )));
                }
                let mut sums = [vec![0i64; d.out_dim], vec![0i64; d.out_dim]];
                for (pl, sum) in sums.iter_mut().enumerate() {
                    for o in 0..d.out_dim {
                        let mut acc = 0i64;
                        let row = &d.weights[o * d.in_dim..(o + 1) * d.in_dim];
                        for i in 0..d.in_dim {
                            acc += row[i] as i64 * planes[pl][i] as i64;
                        }
                        sum[o] = acc;
                    }
                }
                shape = vec![d.out_dim];
                apply_fold(&d.fold, &sums, d.out_dim, 1)
            }
            HardStage::Conv(c) => {
                let (h, w) = (shape[1], shape[2]);
                let oh = (h - c.kernel) / c.stride + 1;
                let ow = (w - c.kernel) / c.stride + 1;
                let n = c.out_channels * oh * ow;
                let mut sums = [vec![0i64; n], vec![0i64; n]];
                for (pl, sum) in sums.iter_mut().enumerate() {
                    for o in 0..c.out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = 0i64;
                                for ci in 0..c.in_channels {
                                    for ky in 0..c.kernel {
                                        for kx in 0..c.kernel {
                                            let wv = c.weights[((o * c.in_channels + ci)
                                                * c.kernel
                                                + ky)
                                                * c.kernel
                                                + kx];
                                            if wv == 0 {
                                                continue;
                                            }
                                            let iy = oy * c.stride + ky;
                                            let ix = ox * c.stride + kx;
                                            acc += wv as i64
                                                * planes[pl][(ci * h + iy) * w + ix] as i64;
                                        }
                                    }
                                }
                                sum[(o * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                shape = vec![c.out_channels, oh, ow];
                apply_fold(&c.fold, &sums, c.out_channels, oh * ow)
            }
            HardStage::LutArray(l) => {
                let (sums, out_shape, units) = lut_array_sums(l, &planes, &shape)?;
                let spatial: usize = out_shape.iter().skip(1).product();
                shape = out_shape;
                apply_fold(&l.fold, &sums, units, spatial)
            }
            HardStage::MaxPool(p) => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / p.window, w / p.window);
                let mut p0 = vec![0i8; c * oh * ow];
                let mut p1 = vec![0i8; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = i64::MIN;
                            let mut bits = (0i8, 0i8);
                            for ky in 0..p.window {
                                for kx in 0..p.window {
                                    let idx = (ch * h + oy * p.window + ky) * w
                                        + ox * p.window
                                        + kx;
                                    let v = p.qgamma[0] * planes[0][idx] as i64
                                        + p.qgamma[1] * planes[1][idx] as i64;
                                    if v > best {
                                        best = v;
                                        bits = (planes[0][idx], planes[1][idx]);
                                    }
                                }
                            }
                            p0[(ch * oh + oy) * ow + ox] = bits.0;
                            p1[(ch * oh + oy) * ow + ox] = bits.1;
                        }
                    }
                }
                shape = vec![c, oh, ow];
                FoldOut::Planes([p0, p1])
            }
        };
        match folded {
            FoldOut::Planes(p) => planes = p,
            FoldOut::Scores(s) => return Ok(s),
        }
    }
    Err(Error::config(
        "netlist has no output stage; nothing to score",
    ))
}
