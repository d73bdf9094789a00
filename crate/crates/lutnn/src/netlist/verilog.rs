//! Deterministic Verilog emission of a hardened netlist.
//!
//! Two styles: `Generic` emits truth tables as localparam masks indexed by
//! the input vector; `Primitive` instantiates 6-input LUT primitives with
//! 64-bit INIT masks (don't-care-filled by replication). Popcounts are
//! emitted as balanced structural adder trees and folded thresholds as
//! 64-bit signed constant arithmetic. Unrolled stages are combinational
//! with both residual planes instantiated in parallel; tiled stages emit a
//! parameter ROM, tile counter, and accumulator and take one sample every
//! `t_i * t_o` cycles.
//!
//! Output is byte-identical across runs for the same netlist.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lut::LutGeometry;

use super::{Fold, HardLutArray, HardNetlist, HardStage, NodeInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerilogStyle {
    Generic,
    Primitive,
}

/// Signed 64-bit Verilog literal.
fn sd(v: i64) -> String {
    if v < 0 {
        format!("-64'sd{}", v.unsigned_abs())
    } else {
        format!("64'sd{v}")
    }
}

/// Replicate a k-input mask into the 64-bit INIT word of a 6-input LUT;
/// unused inputs become don't-cares.
pub fn init64(mask: u64, k_eff: usize) -> u64 {
    debug_assert!(k_eff <= 6);
    if k_eff == 6 {
        return mask;
    }
    let chunk = 1usize << k_eff;
    let low = mask & ((1u64 << chunk) - 1);
    let mut out = 0u64;
    for c in 0..(64 / chunk) {
        out |= low << (c * chunk);
    }
    out
}

struct Emitter {
    text: String,
    style: VerilogStyle,
}

impl Emitter {
    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    /// Balanced adder tree over one-bit operands; returns the expression of
    /// the final count and its width.
    fn popcount(&mut self, prefix: &str, bits: &[String]) -> (String, usize) {
        if bits.is_empty() {
            return ("64'd0".to_string(), 64);
        }
        let mut level = 0usize;
        let mut operands: Vec<(String, usize)> =
            bits.iter().map(|b| (b.clone(), 1usize)).collect();
        while operands.len() > 1 {
            let mut next = Vec::with_capacity(operands.len() / 2 + 1);
            let width_in = operands[0].1;
            let width_out = width_in + 1;
            let pairs = operands.len() / 2;
            for i in 0..pairs {
                let name = format!("{prefix}_l{level}_{i}");
                let (a, wa) = &operands[2 * i];
                let (b, wb) = &operands[2 * i + 1];
                self.line(format!(
                    "  wire [{}:0] {name} = {{{}'b0, {a}}} + {{{}'b0, {b}}};",
                    width_out - 1,
                    width_out - wa,
                    width_out - wb
                ));
                next.push((name, width_out));
            }
            if operands.len() % 2 == 1 {
                next.push(operands.last().expect("odd leftover").clone());
            }
            operands = next;
            level += 1;
        }
        operands.pop().expect("nonempty")
    }

    /// Emit one LUT evaluation producing wire `out` from `inputs`
    /// (expressions, vertex-bit order).
    fn lut_instance(&mut self, name: &str, mask: u64, inputs: &[String], out: &str) {
        let k = inputs.len();
        match self.style {
            VerilogStyle::Generic => {
                let width = 1usize << k;
                if k == 0 {
                    self.line(format!("  assign {out} = 1'b{};", mask & 1));
                    return;
                }
                let mut sel = String::new();
                for (i, expr) in inputs.iter().enumerate().rev() {
                    if i != k - 1 {
                        sel.push_str(", ");
                    }
                    sel.push_str(expr);
                }
                self.line(format!(
                    "  localparam [{}:0] {}_MASK = {}'h{:x};",
                    width - 1,
                    name.to_uppercase(),
                    width,
                    mask
                ));
                self.line(format!(
                    "  assign {out} = {}_MASK[{{{sel}}}];",
                    name.to_uppercase()
                ));
            }
            VerilogStyle::Primitive => {
                let init = init64(mask, k);
                let mut ports = String::new();
                for i in 0..6 {
                    let expr = inputs.get(i).cloned().unwrap_or_else(|| "1'b0".to_string());
                    write!(ports, ".I{i}({expr}), ").expect("string write");
                }
                self.line(format!(
                    "  LUT6 #(.INIT(64'h{init:016x})) {name} ({ports}.O({out}));"
                ));
            }
        }
    }

    /// Threshold fold for one output unit; `cnt` are the ones-counts of the
    /// two planes and `n_ops` the summed operand count (S = 2*count - n).
    fn fold_unit(
        &mut self,
        prefix: &str,
        fold: &Fold,
        unit: usize,
        cnt: &[(String, usize); 2],
        n_ops: usize,
        out_bits: Option<(String, String)>,
        score: Option<String>,
    ) {
        let qa0 = fold.qa[0][unit];
        let qa1 = fold.qa[1][unit];
        let bias = fold.qt[unit] - (qa0 + qa1) * n_ops as i64;
        let acc = format!("{prefix}_acc");
        self.line(format!(
            "  wire signed [63:0] {acc} = {} * $signed({{1'b0, {}}}) + {} * $signed({{1'b0, {}}}) + {};",
            sd(2 * qa0),
            cnt[0].0,
            sd(2 * qa1),
            cnt[1].0,
            sd(bias)
        ));
        if let Some((b0, b1)) = out_bits {
            let qg = fold.next_gamma_q.expect("threshold fold has next scale");
            self.line(format!("  assign {b0} = ~{acc}[63];"));
            self.line(format!(
                "  wire signed [63:0] {acc}2 = {acc} - ({b0} ? {} : {});",
                sd(qg),
                sd(-qg)
            ));
            self.line(format!("  assign {b1} = ~{acc}2[63];"));
        }
        if let Some(s) = score {
            self.line(format!("  assign {s} = {acc};"));
        }
    }
}

/// Emit the hardened netlist as a single flat Verilog module.
pub fn emit_verilog(hard: &HardNetlist, style: VerilogStyle) -> Result<String> {
    let mut e = Emitter {
        text: String::new(),
        style,
    };
    let in_len: usize = hard.input_shape.iter().product();
    let (scores, score_units) = match hard.stages.last() {
        Some(HardStage::Dense(d)) if d.fold.next_gamma_q.is_none() => (true, d.out_dim),
        Some(HardStage::Conv(c)) if c.fold.next_gamma_q.is_none() => (true, c.out_channels),
        Some(HardStage::LutArray(l)) if l.fold.next_gamma_q.is_none() => {
            (true, l.geometry.out_dim())
        }
        _ => (false, 0),
    };
    if !scores {
        return Err(Error::config(
            "verilog emission expects a score-producing head stage",
        ));
    }
    let needs_clk = hard
        .stages
        .iter()
        .any(|s| matches!(s, HardStage::LutArray(l) if l.t_i * l.t_o > 1));

    e.line("// Generated LUT-array inference netlist.");
    e.line("// Bit convention: plane bit 1 encodes +1, 0 encodes -1.");
    e.line(format!(
        "// Style: {}.",
        match style {
            VerilogStyle::Generic => "generic truth tables",
            VerilogStyle::Primitive => "LUT6 primitives",
        }
    ));
    if needs_clk {
        e.line("// Tiled stages accept one sample every t_i*t_o clock cycles.");
    }
    e.line("module lutnn_top (");
    if needs_clk {
        e.line("  input wire clk,");
    }
    e.line(format!("  input wire [{}:0] in_p0,", in_len - 1));
    e.line(format!("  input wire [{}:0] in_p1,", in_len - 1));
    for u in 0..score_units {
        let comma = if u + 1 == score_units { "" } else { "," };
        e.line(format!("  output wire signed [63:0] score_{u}{comma}"));
    }
    e.line(");");

    let mut shape = hard.input_shape.clone();
    let mut cur = ("in_p0".to_string(), "in_p1".to_string());
    for (si, stage) in hard.stages.iter().enumerate() {
        e.line(String::new());
        match stage {
            HardStage::Dense(d) => {
                e.line(format!(
                    "  // stage {si}: binary dense {} -> {}",
                    d.in_dim, d.out_dim
                ));
                let last = d.fold.next_gamma_q.is_none();
                if !last {
                    e.line(format!("  wire [{}:0] s{si}_p0, s{si}_p1;", d.out_dim - 1));
                }
                for o in 0..d.out_dim {
                    let mut cnts = Vec::new();
                    let mut n_ops = 0usize;
                    for (pl, plane) in [&cur.0, &cur.1].iter().enumerate() {
                        let bits: Vec<String> = (0..d.in_dim)
                            .filter_map(|i| match d.weights[o * d.in_dim + i] {
                                1 => Some(format!("{plane}[{i}]")),
                                -1 => Some(format!("~{plane}[{i}]")),
                                _ => None,
                            })
                            .collect();
                        n_ops = bits.len();
                        let cnt = e.popcount(&format!("s{si}_o{o}_p{pl}"), &bits);
                        cnts.push(cnt);
                    }
                    let cnt: [(String, usize); 2] =
                        [cnts[0].clone(), cnts[1].clone()];
                    if last {
                        e.fold_unit(
                            &format!("s{si}_o{o}"),
                            &d.fold,
                            o,
                            &cnt,
                            n_ops,
                            None,
                            Some(format!("score_{o}")),
                        );
                    } else {
                        e.fold_unit(
                            &format!("s{si}_o{o}"),
                            &d.fold,
                            o,
                            &cnt,
                            n_ops,
                            Some((format!("s{si}_p0[{o}]"), format!("s{si}_p1[{o}]"))),
                            None,
                        );
                    }
                }
                shape = vec![d.out_dim];
                cur = (format!("s{si}_p0"), format!("s{si}_p1"));
            }
            HardStage::LutArray(l) => {
                emit_lut_array(&mut e, si, l, &mut shape, &mut cur)?;
            }
            HardStage::Conv(c) => {
                let (h, w) = (shape[1], shape[2]);
                let oh = (h - c.kernel) / c.stride + 1;
                let ow = (w - c.kernel) / c.stride + 1;
                let units = c.out_channels * oh * ow;
                e.line(format!(
                    "  // stage {si}: binary conv {}x{}x{} -> {}x{}x{}",
                    c.in_channels, h, w, c.out_channels, oh, ow
                ));
                let last = c.fold.next_gamma_q.is_none();
                if !last {
                    e.line(format!("  wire [{}:0] s{si}_p0, s{si}_p1;", units - 1));
                }
                for o in 0..c.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut cnts = Vec::new();
                            let mut n_ops = 0usize;
                            for (pl, plane) in [&cur.0, &cur.1].iter().enumerate() {
                                let mut bits = Vec::new();
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
                                            let idx = (ci * h + iy) * w + ix;
                                            bits.push(if wv > 0 {
                                                format!("{plane}[{idx}]")
                                            } else {
                                                format!("~{plane}[{idx}]")
                                            });
                                        }
                                    }
                                }
                                n_ops = bits.len();
                                let name = format!("s{si}_o{o}_{oy}_{ox}_p{pl}");
                                cnts.push(e.popcount(&name, &bits));
                            }
                            let cnt: [(String, usize); 2] = [cnts[0].clone(), cnts[1].clone()];
                            let unit_idx = (o * oh + oy) * ow + ox;
                            let prefix = format!("s{si}_o{o}_{oy}_{ox}");
                            if last {
                                e.fold_unit(
                                    &prefix,
                                    &c.fold,
                                    o,
                                    &cnt,
                                    n_ops,
                                    None,
                                    Some(format!("score_{unit_idx}")),
                                );
                            } else {
                                e.fold_unit(
                                    &prefix,
                                    &c.fold,
                                    o,
                                    &cnt,
                                    n_ops,
                                    Some((
                                        format!("s{si}_p0[{unit_idx}]"),
                                        format!("s{si}_p1[{unit_idx}]"),
                                    )),
                                    None,
                                );
                            }
                        }
                    }
                }
                shape = vec![c.out_channels, oh, ow];
                cur = (format!("s{si}_p0"), format!("s{si}_p1"));
            }
            HardStage::MaxPool(p) => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / p.window, w / p.window);
                let units = c * oh * ow;
                e.line(format!(
                    "  // stage {si}: maxpool {}x{} over value-ordered plane pairs",
                    p.window, p.window
                ));
                e.line(format!("  wire [{}:0] s{si}_p0, s{si}_p1;", units - 1));
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut elems = Vec::new();
                            for ky in 0..p.window {
                                for kx in 0..p.window {
                                    let idx =
                                        (ch * h + oy * p.window + ky) * w + ox * p.window + kx;
                                    elems.push(idx);
                                }
                            }
                            let unit = (ch * oh + oy) * ow + ox;
                            let prefix = format!("s{si}_u{unit}");
                            for (n, idx) in elems.iter().enumerate() {
                                e.line(format!(
                                    "  wire signed [63:0] {prefix}_v{n} = ({}[{idx}] ? {} : {}) + ({}[{idx}] ? {} : {});",
                                    cur.0, sd(p.qgamma[0]), sd(-p.qgamma[0]),
                                    cur.1, sd(p.qgamma[1]), sd(-p.qgamma[1]),
                                ));
                            }
                            // running maximum; first element wins ties
                            let mut best_v = format!("{prefix}_v0");
                            let mut best0 = format!("{}[{}]", cur.0, elems[0]);
                            let mut best1 = format!("{}[{}]", cur.1, elems[0]);
                            for (n, idx) in elems.iter().enumerate().skip(1) {
                                let take = format!("({prefix}_v{n} > {best_v})");
                                let nv = format!("{prefix}_m{n}");
                                e.line(format!(
                                    "  wire signed [63:0] {nv} = {take} ? {prefix}_v{n} : {best_v};"
                                ));
                                best0 = format!("({take} ? {}[{idx}] : {best0})", cur.0);
                                best1 = format!("({take} ? {}[{idx}] : {best1})", cur.1);
                                best_v = nv;
                            }
                            e.line(format!("  assign s{si}_p0[{unit}] = {best0};"));
                            e.line(format!("  assign s{si}_p1[{unit}] = {best1};"));
                        }
                    }
                }
                shape = vec![c, oh, ow];
                cur = (format!("s{si}_p0"), format!("s{si}_p1"));
            }
        }
    }
    e.line("endmodule");
    Ok(e.text)
}

fn emit_lut_array(
    e: &mut Emitter,
    si: usize,
    l: &HardLutArray,
    shape: &mut Vec<usize>,
    cur: &mut (String, String),
) -> Result<()> {
    let tiles = l.t_i * l.t_o;
    if tiles > 1 {
        return emit_tiled_lut_array(e, si, l, shape, cur);
    }
    match l.geometry {
        LutGeometry::Dense { in_dim, out_dim } => {
            e.line(format!(
                "  // stage {si}: lut array {} nodes, {} -> {}",
                l.nodes.len(),
                in_dim,
                out_dim
            ));
            let last = l.fold.next_gamma_q.is_none();
            if !last && out_dim > 0 {
                e.line(format!("  wire [{}:0] s{si}_p0, s{si}_p1;", out_dim - 1));
            }
            // node outputs per plane
            for (ni, node) in l.nodes.iter().enumerate() {
                for pl in 0..2 {
                    let plane = if pl == 0 { &cur.0 } else { &cur.1 };
                    let inputs: Vec<String> = node
                        .lut
                        .inputs
                        .iter()
                        .map(|inp| match inp {
                            NodeInput::Activation(j) => {
                                format!("{plane}[{}]", node.selections[0][*j])
                            }
                            NodeInput::Param(j) => {
                                format!("1'b{}", if node.p_rom[0][*j] > 0 { 1 } else { 0 })
                            }
                        })
                        .collect();
                    let out = format!("s{si}_n{ni}_p{pl}");
                    e.line(format!("  wire {out};"));
                    e.lut_instance(&format!("s{si}_lut{ni}_p{pl}"), node.lut.mask, &inputs, &out);
                }
            }
            for o in 0..out_dim {
                let members: Vec<usize> = l
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| n.row == o)
                    .map(|(i, _)| i)
                    .collect();
                let mut cnts = Vec::new();
                for pl in 0..2 {
                    let bits: Vec<String> = members
                        .iter()
                        .map(|ni| format!("s{si}_n{ni}_p{pl}"))
                        .collect();
                    cnts.push(e.popcount(&format!("s{si}_o{o}_p{pl}"), &bits));
                }
                let cnt: [(String, usize); 2] = [cnts[0].clone(), cnts[1].clone()];
                let prefix = format!("s{si}_o{o}");
                if last {
                    e.fold_unit(
                        &prefix,
                        &l.fold,
                        o,
                        &cnt,
                        members.len(),
                        None,
                        Some(format!("score_{o}")),
                    );
                } else {
                    e.fold_unit(
                        &prefix,
                        &l.fold,
                        o,
                        &cnt,
                        members.len(),
                        Some((format!("s{si}_p0[{o}]"), format!("s{si}_p1[{o}]"))),
                        None,
                    );
                }
            }
            *shape = vec![out_dim];
            *cur = (format!("s{si}_p0"), format!("s{si}_p1"));
            Ok(())
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
            let units = out_channels * oh * ow;
            let ksq = kernel * kernel;
            e.line(format!(
                "  // stage {si}: lut conv array {} nodes, {}x{}x{} -> {}x{}x{}",
                l.nodes.len(),
                in_channels,
                h,
                w,
                out_channels,
                oh,
                ow
            ));
            let last = l.fold.next_gamma_q.is_none();
            if !last {
                e.line(format!("  wire [{}:0] s{si}_p0, s{si}_p1;", units - 1));
            }
            for o in 0..out_channels {
                let members: Vec<usize> = l
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| n.row == o)
                    .map(|(i, _)| i)
                    .collect();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut cnts = Vec::new();
                        for pl in 0..2 {
                            let plane = if pl == 0 { &cur.0 } else { &cur.1 };
                            let mut bits = Vec::new();
                            for &ni in &members {
                                let node = &l.nodes[ni];
                                let inputs: Vec<String> = node
                                    .lut
                                    .inputs
                                    .iter()
                                    .map(|inp| match inp {
                                        NodeInput::Activation(j) => {
                                            let q = node.selections[0][*j];
                                            let c = q / ksq;
                                            let iy = oy * stride + (q % ksq) / kernel;
                                            let ix = ox * stride + q % kernel;
                                            format!("{plane}[{}]", (c * h + iy) * w + ix)
                                        }
                                        NodeInput::Param(j) => format!(
                                            "1'b{}",
                                            if node.p_rom[0][*j] > 0 { 1 } else { 0 }
                                        ),
                                    })
                                    .collect();
                                let out = format!("s{si}_n{ni}_{oy}_{ox}_p{pl}");
                                e.line(format!("  wire {out};"));
                                e.lut_instance(
                                    &format!("s{si}_lut{ni}_{oy}_{ox}_p{pl}"),
                                    node.lut.mask,
                                    &inputs,
                                    &out,
                                );
                                bits.push(out);
                            }
                            cnts.push(
                                e.popcount(&format!("s{si}_o{o}_{oy}_{ox}_p{pl}"), &bits),
                            );
                        }
                        let cnt: [(String, usize); 2] = [cnts[0].clone(), cnts[1].clone()];
                        let unit = (o * oh + oy) * ow + ox;
                        let prefix = format!("s{si}_o{o}_{oy}_{ox}");
                        if last {
                            e.fold_unit(
                                &prefix,
                                &l.fold,
                                o,
                                &cnt,
                                members.len(),
                                None,
                                Some(format!("score_{unit}")),
                            );
                        } else {
                            e.fold_unit(
                                &prefix,
                                &l.fold,
                                o,
                                &cnt,
                                members.len(),
                                Some((
                                    format!("s{si}_p0[{unit}]"),
                                    format!("s{si}_p1[{unit}]"),
                                )),
                                None,
                            );
                        }
                    }
                }
            }
            *shape = vec![out_channels, oh, ow];
            *cur = (format!("s{si}_p0"), format!("s{si}_p1"));
            Ok(())
        }
    }
}


/// Tiled (time-multiplexed) LUT array: parameter ROM, tile counter, and
/// per-row accumulators. One sample enters every t_i*t_o cycles.
fn emit_tiled_lut_array(
    e: &mut Emitter,
    si: usize,
    l: &HardLutArray,
    shape: &mut Vec<usize>,
    cur: &mut (String, String),
) -> Result<()> {
    let (in_dim, out_dim) = match l.geometry {
        LutGeometry::Dense { in_dim, out_dim } => (in_dim, out_dim),
        LutGeometry::Conv { .. } => {
            return Err(Error::config(
                "tiled verilog emission supports dense lut arrays",
            ))
        }
    };
    let tiles = l.t_i * l.t_o;
    let rows = out_dim / l.t_o;
    let cols = in_dim / l.t_i;
    let tbits = usize::BITS as usize - (tiles - 1).leading_zeros() as usize;
    e.line(format!(
        "  // stage {si}: tiled lut array, {} physical nodes, t_i={} t_o={}",
        l.nodes.len(),
        l.t_i,
        l.t_o
    ));
    e.line(format!("  reg [{}:0] s{si}_t = 0;", tbits - 1));
    e.line(format!(
        "  always @(posedge clk) s{si}_t <= (s{si}_t == {}) ? 0 : s{si}_t + 1;",
        tiles - 1
    ));
    e.line(format!(
        "  wire [{}:0] s{si}_ti = s{si}_t % {};",
        tbits - 1,
        l.t_i
    ));
    e.line(format!("  wire [{}:0] s{si}_p0, s{si}_p1;", out_dim - 1));
    e.line(format!("  reg signed [63:0] s{si}_acc0 [0:{}];", out_dim - 1));
    e.line(format!("  reg signed [63:0] s{si}_acc1 [0:{}];", out_dim - 1));
    for (ni, node) in l.nodes.iter().enumerate() {
        // parameter ROM: one word per logical operation, tile-major
        if !node.p_rom[0].is_empty() {
            let p = node.p_rom[0].len();
            let mut packed = String::new();
            for t in (0..tiles).rev() {
                for j in (0..p).rev() {
                    packed.push(if node.p_rom[t][j] > 0 { '1' } else { '0' });
                }
            }
            e.line(format!(
                "  localparam [{}:0] S{si}_N{ni}_ROM = {}'b{packed};",
                tiles * p - 1,
                tiles * p
            ));
        }
        for pl in 0..2 {
            let plane = if pl == 0 { &cur.0 } else { &cur.1 };
            let inputs: Vec<String> = node
                .lut
                .inputs
                .iter()
                .map(|inp| match inp {
                    NodeInput::Activation(j) => {
                        // input-tile mux over per-tile selections
                        let mut expr = format!(
                            "{plane}[{}]",
                            (l.t_i - 1) * cols + node.selections[l.t_i - 1][*j]
                        );
                        for b in (0..l.t_i - 1).rev() {
                            expr = format!(
                                "(s{si}_ti == {b}) ? {plane}[{}] : ({expr})",
                                b * cols + node.selections[b][*j]
                            );
                        }
                        expr
                    }
                    NodeInput::Param(j) => {
                        let p = node.p_rom[0].len();
                        format!("S{si}_N{ni}_ROM[s{si}_t * {p} + {j}]")
                    }
                })
                .collect();
            let out = format!("s{si}_n{ni}_p{pl}");
            e.line(format!("  wire {out};"));
            e.lut_instance(&format!("s{si}_lut{ni}_p{pl}"), node.lut.mask, &inputs, &out);
        }
    }
    // Per-row partial popcounts, accumulated across input tiles with one
    // accumulator per plane so the fold can weight planes independently.
    // Output group a = tile / t_i owns rows [a*rows, (a+1)*rows); its
    // accumulators are valid one cycle after the group's last input tile.
    for r in 0..rows {
        let members: Vec<usize> = l
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.row == r)
            .map(|(i, _)| i)
            .collect();
        for pl in 0..2 {
            let bits: Vec<String> = members
                .iter()
                .map(|ni| format!("s{si}_n{ni}_p{pl}"))
                .collect();
            let (cnt, _) = e.popcount(&format!("s{si}_r{r}_p{pl}"), &bits);
            e.line(format!(
                "  wire signed [63:0] s{si}_r{r}_part{pl} = $signed({{1'b0, {cnt}}}) * 2 - {};",
                members.len()
            ));
        }
    }
    e.line("  always @(posedge clk) begin");
    for r in 0..rows {
        for pl in 0..2 {
            let slot = format!("s{si}_acc{pl}[(s{si}_t / {}) * {rows} + {r}]", l.t_i);
            e.line(format!(
                "    if (s{si}_ti == 0) {slot} <= s{si}_r{r}_part{pl};"
            ));
            e.line(format!(
                "    else {slot} <= {slot} + s{si}_r{r}_part{pl};"
            ));
        }
    }
    e.line("  end");
    for o in 0..out_dim {
        e.line(format!(
            "  wire signed [63:0] s{si}_facc_{o} = {} * s{si}_acc0[{o}] + {} * s{si}_acc1[{o}] + {};",
            sd(l.fold.qa[0][o]),
            sd(l.fold.qa[1][o]),
            sd(l.fold.qt[o])
        ));
        let qg = l.fold.next_gamma_q.unwrap_or(0);
        e.line(format!("  assign s{si}_p0[{o}] = ~s{si}_facc_{o}[63];"));
        e.line(format!(
            "  wire signed [63:0] s{si}_facc2_{o} = s{si}_facc_{o} - (s{si}_p0[{o}] ? {} : {});",
            sd(qg),
            sd(-qg)
        ));
        e.line(format!("  assign s{si}_p1[{o}] = ~s{si}_facc2_{o}[63];"));
    }
    *shape = vec![out_dim];
    *cur = (format!("s{si}_p0"), format!("s{si}_p1"));
    Ok(())
}
