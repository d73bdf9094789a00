//! Logical-to-physical LUT packing estimate.
//!
//! A device 6-LUT implements one logical 6-LUT, or two logical LUTs whose
//! combined distinct inputs fit in five: two 5-LUTs sharing at least five
//! inputs, 4-LUTs sharing at least three, 3-LUTs sharing at least one, and
//! 1-/2-LUTs unconditionally. Pairing is greedy: nodes sorted widest
//! first, each taking the remaining partner with the most shared inputs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Input identity of one logical LUT: opaque signal ids; two LUTs share an
/// input when the ids are equal.
#[derive(Debug, Clone)]
pub struct LogicalLut {
    pub signals: BTreeSet<u64>,
}

impl LogicalLut {
    pub fn new(signals: impl IntoIterator<Item = u64>) -> Self {
        LogicalLut {
            signals: signals.into_iter().collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.signals.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Packing {
    /// Index pairs packed into one device LUT.
    pub pairs: Vec<(usize, usize)>,
    /// Indices left unpaired (one device LUT each).
    pub singles: Vec<usize>,
    pub physical_luts: usize,
}

const DEVICE_INPUTS: usize = 6;
const PAIR_INPUT_BUDGET: usize = DEVICE_INPUTS - 1;

fn can_pair(a: &LogicalLut, b: &LogicalLut) -> bool {
    if a.width() >= DEVICE_INPUTS || b.width() >= DEVICE_INPUTS {
        return false;
    }
    a.signals.union(&b.signals).count() <= PAIR_INPUT_BUDGET
}

/// Partner-search bound for large layers; small inputs scan exhaustively.
const SEARCH_WINDOW: usize = 128;
const EXHAUSTIVE_LIMIT: usize = 2048;

/// Greedy pairing under the shared-input rules: nodes sorted widest first,
/// each pairing with the compatible remaining partner sharing the most
/// inputs. Beyond a few thousand nodes the partner search is bounded to a
/// window over the sorted order.
pub fn pack_estimate(luts: &[LogicalLut]) -> Packing {
    // widest first; stable order keeps the estimate deterministic
    let mut order: Vec<usize> = (0..luts.len()).collect();
    order.sort_by(|&a, &b| luts[b].width().cmp(&luts[a].width()).then(a.cmp(&b)));
    let window = if luts.len() <= EXHAUSTIVE_LIMIT {
        luts.len()
    } else {
        SEARCH_WINDOW
    };
    let mut used = vec![false; luts.len()];
    let mut pairs = Vec::new();
    let mut singles = Vec::new();
    for pos in 0..order.len() {
        let i = order[pos];
        if used[i] {
            continue;
        }
        used[i] = true;
        let mut best: Option<(usize, usize)> = None; // (shared, index)
        let mut seen = 0usize;
        for &j in order.iter().skip(pos + 1) {
            if used[j] {
                continue;
            }
            seen += 1;
            if seen > window {
                break;
            }
            if !can_pair(&luts[i], &luts[j]) {
                continue;
            }
            let shared = luts[i].signals.intersection(&luts[j].signals).count();
            if best.map(|(s, _)| shared > s).unwrap_or(true) {
                best = Some((shared, j));
            }
        }
        match best {
            Some((_, j)) => {
                used[j] = true;
                pairs.push((i, j));
            }
            None => singles.push(i),
        }
    }
    let physical = pairs.len() + singles.len();
    Packing {
        pairs,
        singles,
        physical_luts: physical,
    }
}

/// Audit of one pairing decision, for verification of the estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackAudit {
    pub width_a: usize,
    pub width_b: usize,
    pub shared: usize,
    pub distinct_total: usize,
}

impl Packing {
    /// Per-pair sharing facts; callers check them against the device rule.
    pub fn audit(&self, luts: &[LogicalLut]) -> Vec<PackAudit> {
        self.pairs
            .iter()
            .map(|&(a, b)| PackAudit {
                width_a: luts[a].width(),
                width_b: luts[b].width(),
                shared: luts[a].signals.intersection(&luts[b].signals).count(),
                distinct_total: luts[a].signals.union(&luts[b].signals).count(),
            })
            .collect()
    }
}

/// Minimum shared inputs for two equal-width logical LUTs to share a
/// device LUT: 5 for 5-LUTs, 3 for 4-LUTs, 1 for 3-LUTs, none below.
pub fn required_sharing(width: usize) -> Option<usize> {
    match width {
        6.. => None,
        w => Some((2 * w).saturating_sub(PAIR_INPUT_BUDGET)),
    }
}
