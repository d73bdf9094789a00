//! Balanced popcount adder trees and their LUT cost model.
//!
//! The model charges one LUT per produced sum bit per tree level; it is an
//! estimate anchored to the balanced-tree structure, not a vendor figure.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopcountTree {
    /// Summed operand count.
    pub inputs: usize,
    /// Reported result width; 0 for a passthrough or empty tree.
    pub output_width: usize,
    pub levels: Vec<PopcountLevel>,
    pub lut_cost: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopcountLevel {
    /// Pairwise adders at this level.
    pub adders: usize,
    /// Output bits per adder.
    pub width: usize,
}

/// Build the balanced adder tree over `n` one-bit operands.
pub fn build_popcount(n: usize) -> PopcountTree {
    if n <= 1 {
        return PopcountTree {
            inputs: n,
            output_width: 0,
            levels: Vec::new(),
            lut_cost: 0,
        };
    }
    let mut levels = Vec::new();
    let mut cost = 0usize;
    let mut count = n; // operands remaining
    let mut width = 1; // operand width entering the level
    while count > 1 {
        let adders = count / 2;
        let out_width = width + 1;
        cost += adders * out_width;
        levels.push(PopcountLevel {
            adders,
            width: out_width,
        });
        // odd operand passes through to the next level
        count = adders + (count % 2);
        width = out_width;
    }
    PopcountTree {
        inputs: n,
        output_width: (usize::BITS - (n - 1).leading_zeros()) as usize,
        levels,
        lut_cost: cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_operand_is_passthrough() {
        let t = build_popcount(1);
        assert_eq!(t.lut_cost, 0);
        assert!(t.levels.is_empty());
    }

    #[test]
    fn empty_tree_costs_nothing() {
        let t = build_popcount(0);
        assert_eq!(t.lut_cost, 0);
        assert_eq!(t.output_width, 0);
    }

    #[test]
    fn four_inputs_report_two_output_bits() {
        assert_eq!(build_popcount(4).output_width, 2);
        assert_eq!(build_popcount(512).output_width, 9);
        assert_eq!(build_popcount(513).output_width, 10);
    }

    #[test]
    fn thinning_scales_near_linearly() {
        // halving the operand count more than halves cost / 1.9
        let big = build_popcount(1024).lut_cost;
        let half = build_popcount(512).lut_cost;
        assert!(
            (half as f64) < (big as f64) / 1.9,
            "cost(512) = {half}, cost(1024) = {big}"
        );
    }

    #[test]
    fn level_structure_is_balanced() {
        let t = build_popcount(8);
        // 8 -> 4 adders(2b) -> 2 adders(3b) -> 1 adder(4b)
        assert_eq!(t.levels.len(), 3);
        assert_eq!(t.levels[0], PopcountLevel { adders: 4, width: 2 });
        assert_eq!(t.levels[1], PopcountLevel { adders: 2, width: 3 });
        assert_eq!(t.levels[2], PopcountLevel { adders: 1, width: 4 });
        assert_eq!(t.lut_cost, 4 * 2 + 2 * 3 + 4);
    }
}
