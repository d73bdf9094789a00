//! Hardening and netlist emission: truth-table extraction from trained
//! nodes, don't-care simplification, logical-to-physical LUT packing
//! estimation, popcount construction, parameter counting, deterministic
//! Verilog emission, and a bit-exact integer simulator of the hardened
//! network.

pub mod harden;
pub mod pack;
pub mod params;
pub mod popcount;
pub mod report;
pub mod sim;
pub mod simplify;
pub mod verilog;

pub use harden::{harden, trainer_hardened_forward};
pub use pack::{pack_estimate, PackAudit, Packing};
pub use params::{parameter_count, ParameterCount};
pub use popcount::{build_popcount, PopcountTree};
pub use report::area_report;
pub use sim::{input_planes, simulate};
pub use simplify::simplify;
pub use verilog::{emit_verilog, VerilogStyle};

use serde::{Deserialize, Serialize};

use crate::lut::LutGeometry;

/// Fixed-point fractional bits for folded thresholds. Keeps every product
/// `q * popcount` exactly representable in both i64 and f64 at desk scale.
pub const FOLD_FRAC_BITS: u32 = 20;

pub fn quantize_fold(v: f64) -> i64 {
    (v * (1u64 << FOLD_FRAC_BITS) as f64).round() as i64
}

/// A hardened truth table over its effective inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardLut {
    /// Effective input count after don't-care removal.
    pub k_eff: usize,
    /// 2^k_eff bits; bit v set means output +1 at vertex v (input j is
    /// vertex bit j, set when that input is +1).
    pub mask: u64,
    /// Surviving inputs in vertex-bit order.
    pub inputs: Vec<NodeInput>,
}

impl HardLut {
    /// Output (+1/-1) for the given input bits, one per effective input.
    pub fn eval(&self, bits: &[i8]) -> i8 {
        debug_assert_eq!(bits.len(), self.k_eff);
        let mut v = 0usize;
        for (j, &b) in bits.iter().enumerate() {
            if b > 0 {
                v |= 1 << j;
            }
        }
        if (self.mask >> v) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Constant nodes carry no information and leave the popcount.
    pub fn constant(&self) -> Option<i8> {
        if self.k_eff == 0 {
            Some(if self.mask & 1 == 1 { 1 } else { -1 })
        } else {
            None
        }
    }
}

/// Where a hardened LUT input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeInput {
    /// j-th activation input of the original node; resolves through the
    /// node's per-tile selections.
    Activation(usize),
    /// j-th bit of the node's parameter word.
    Param(usize),
}

/// One hardened physical node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardNode {
    pub row: usize,
    pub lut: HardLut,
    /// Activation slot selections per input tile (original, unsimplified).
    pub selections: Vec<Vec<usize>>,
    /// Parameter ROM: one word of sign bits per logical operation.
    pub p_rom: Vec<Vec<i8>>,
}

/// Folded batch-norm thresholds: the quantized affine applied to the two
/// plane popcounts of each output unit. When `next_gamma_q` is present the
/// result re-binarizes into two planes; otherwise it is the class score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fold {
    pub qa: [Vec<i64>; 2],
    pub qt: Vec<i64>,
    pub next_gamma_q: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardDense {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Sign weights; 0 marks a pruned connection.
    pub weights: Vec<i8>,
    pub fold: Fold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardConv {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<i8>,
    pub fold: Fold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardLutArray {
    pub geometry: LutGeometry,
    pub t_i: usize,
    pub t_o: usize,
    pub nodes: Vec<HardNode>,
    /// Nodes whose hardened table was constant; dropped from the popcount
    /// with their contribution folded into `fold.qt`.
    pub repruned_constants: usize,
    pub fold: Fold,
}

/// Pooling over plane pairs by quantized reconstruction value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardPool {
    pub window: usize,
    pub qgamma: [i64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum HardStage {
    Dense(HardDense),
    Conv(HardConv),
    LutArray(HardLutArray),
    MaxPool(HardPool),
}

/// The emission and simulation target: hardened truth tables, parameter
/// ROM contents, folded thresholds, and the tiling schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardNetlist {
    pub version: u32,
    /// Shape of one input sample (without the batch axis).
    pub input_shape: Vec<usize>,
    /// Level scales the input planes were produced with.
    pub input_gamma: [f64; 2],
    pub stages: Vec<HardStage>,
}

pub const NETLIST_FORMAT_VERSION: u32 = 1;

/// Area summary per the hardened netlist, plus totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaReport {
    pub layers: Vec<LayerArea>,
    pub total_logical_luts: usize,
    pub total_physical_luts: usize,
    pub total_popcount_luts: usize,
    pub total_mask_bits: u64,
    pub total_rom_bits: u64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerArea {
    pub name: String,
    /// Logical inference operations (physical nodes times reuse factor).
    pub logical_luts: usize,
    /// Physical nodes surviving simplification and constant repruning.
    pub physical_nodes: usize,
    /// Greedy packing estimate of device LUTs for the inference operators.
    pub packed_luts: usize,
    pub popcount_luts: usize,
    pub mask_bits: u64,
    pub rom_bits: u64,
}
