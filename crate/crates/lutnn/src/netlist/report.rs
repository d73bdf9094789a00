//! Area accounting over a hardened netlist: logical and packed-physical
//! LUT counts for the inference operators, popcount cost, and parameter
//! bit counts. Unrolled XNOR layers cost no inference LUTs (buffers and
//! inverters fold into the adder logic); LUT-array layers are packed with
//! the greedy estimator.

use std::collections::BTreeMap;

use super::pack::{pack_estimate, LogicalLut};
use super::popcount::build_popcount;
use super::{AreaReport, HardLutArray, HardNetlist, HardStage, LayerArea, NodeInput};

/// Distinct-signal ids for each node of a LUT array layer. An activation
/// input's identity is its full per-tile slot tuple (time-multiplexed
/// wiring shares a physical route only when every tile agrees); parameter
/// inputs are private to their node.
fn layer_signals(layer: &HardLutArray) -> Vec<LogicalLut> {
    let mut interner: BTreeMap<(usize, Vec<usize>), u64> = BTreeMap::new();
    let mut next_id = 0u64;
    let mut unique = || {
        next_id += 1;
        next_id - 1
    };
    let mut out = Vec::with_capacity(layer.nodes.len());
    // reserve id space: activation routes interned, params always fresh
    let mut param_id = 1u64 << 32;
    for node in &layer.nodes {
        let mut ids = Vec::with_capacity(node.lut.k_eff);
        for input in &node.lut.inputs {
            match input {
                NodeInput::Activation(j) => {
                    let route: Vec<usize> =
                        (0..layer.t_i).map(|b| node.selections[b][*j]).collect();
                    let id = *interner.entry((0, route)).or_insert_with(&mut unique);
                    ids.push(id);
                }
                NodeInput::Param(_) => {
                    ids.push(param_id);
                    param_id += 1;
                }
            }
        }
        out.push(LogicalLut::new(ids));
    }
    out
}

/// Popcount LUT cost of one layer: one balanced tree per physical output
/// row, sized by that row's surviving node count.
fn popcount_cost(rows: usize, node_rows: impl Iterator<Item = usize>) -> usize {
    let mut per_row = vec![0usize; rows];
    for r in node_rows {
        per_row[r] += 1;
    }
    per_row.iter().map(|&n| build_popcount(n).lut_cost).sum()
}

pub fn area_report(hard: &HardNetlist) -> AreaReport {
    let mut layers = Vec::new();
    for (si, stage) in hard.stages.iter().enumerate() {
        match stage {
            HardStage::Dense(d) => {
                let surviving = d.weights.iter().filter(|&&w| w != 0).count();
                let popcount = popcount_cost(
                    d.out_dim,
                    d.weights
                        .chunks(d.in_dim)
                        .enumerate()
                        .flat_map(|(o, row)| {
                            row.iter().filter(|&&w| w != 0).map(move |_| o)
                        }),
                );
                layers.push(LayerArea {
                    name: format!("s{si}_dense"),
                    logical_luts: surviving,
                    physical_nodes: 0,
                    packed_luts: 0,
                    popcount_luts: popcount,
                    mask_bits: 0,
                    rom_bits: 0,
                });
            }
            HardStage::Conv(c) => {
                let surviving = c.weights.iter().filter(|&&w| w != 0).count();
                let k2 = c.kernel * c.kernel;
                let popcount = popcount_cost(
                    c.out_channels,
                    c.weights
                        .chunks(c.in_channels * k2)
                        .enumerate()
                        .flat_map(|(o, row)| {
                            row.iter().filter(|&&w| w != 0).map(move |_| o)
                        }),
                );
                layers.push(LayerArea {
                    name: format!("s{si}_conv"),
                    logical_luts: surviving,
                    physical_nodes: 0,
                    packed_luts: 0,
                    popcount_luts: popcount,
                    mask_bits: 0,
                    rom_bits: 0,
                });
            }
            HardStage::LutArray(l) => {
                let tiles = l.t_i * l.t_o;
                let signals = layer_signals(l);
                let packing = pack_estimate(&signals);
                let rows = l.geometry.out_dim() / l.t_o;
                let popcount = popcount_cost(rows, l.nodes.iter().map(|n| n.row));
                let mask_bits: u64 = l
                    .nodes
                    .iter()
                    .map(|n| 1u64 << n.lut.k_eff)
                    .sum();
                let rom_bits: u64 = l
                    .nodes
                    .iter()
                    .map(|n| {
                        let p_eff = n
                            .lut
                            .inputs
                            .iter()
                            .filter(|i| matches!(i, NodeInput::Param(_)))
                            .count();
                        (p_eff * tiles) as u64
                    })
                    .sum();
                layers.push(LayerArea {
                    name: format!("s{si}_lut_array"),
                    logical_luts: l.nodes.len() * tiles,
                    physical_nodes: l.nodes.len(),
                    packed_luts: packing.physical_luts,
                    popcount_luts: popcount,
                    mask_bits,
                    rom_bits,
                });
            }
            HardStage::MaxPool(_) => {
                layers.push(LayerArea {
                    name: format!("s{si}_maxpool"),
                    logical_luts: 0,
                    physical_nodes: 0,
                    packed_luts: 0,
                    popcount_luts: 0,
                    mask_bits: 0,
                    rom_bits: 0,
                });
            }
        }
    }
    let totals = |f: &dyn Fn(&LayerArea) -> u64| layers.iter().map(f).sum::<u64>();
    AreaReport {
        total_logical_luts: totals(&|l| l.logical_luts as u64) as usize,
        total_physical_luts: totals(&|l| l.packed_luts as u64) as usize,
        total_popcount_luts: totals(&|l| l.popcount_luts as u64) as usize,
        total_mask_bits: totals(&|l| l.mask_bits),
        total_rom_bits: totals(&|l| l.rom_bits),
        layers,
        notes: vec![
            "Inference operators assume plane reuse across residual levels; \
             one device LUT per packed operator."
                .to_string(),
            "Tile-multiplexing logic is not counted; it appears only in the \
             emitted netlist."
                .to_string(),
            "Popcount cost model: balanced tree, one LUT per produced sum \
             bit per level."
                .to_string(),
        ],
    }
}
