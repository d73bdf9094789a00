//! Don't-care removal: inputs on which a hardened truth table does not
//! depend are dropped, shrinking the table to its minimal support.

use super::HardLut;

/// True when the two cofactors of `mask` (with k inputs) along input j are
/// identical, i.e. the function ignores input j.
fn ignores_input(mask: u64, k: usize, j: usize) -> bool {
    for v in 0..(1u64 << k) {
        if v >> j & 1 == 0 {
            let hi = v | (1 << j);
            if ((mask >> v) & 1) != ((mask >> hi) & 1) {
                return false;
            }
        }
    }
    true
}

/// Drop input j from the table, keeping the j=0 cofactor rows.
fn drop_input(mask: u64, k: usize, j: usize) -> u64 {
    let mut out = 0u64;
    let mut idx = 0;
    for v in 0..(1u64 << k) {
        if v >> j & 1 == 0 {
            out |= ((mask >> v) & 1) << idx;
            idx += 1;
        }
    }
    out
}

/// Remove every input whose cofactors coincide. Idempotent; the surviving
/// input set is the table's unique minimal support.
pub fn simplify(lut: &HardLut) -> HardLut {
    let mut k = lut.k_eff;
    let mut mask = lut.mask;
    let mut inputs = lut.inputs.clone();
    let mut j = 0;
    while j < k {
        if ignores_input(mask, k, j) {
            mask = drop_input(mask, k, j);
            inputs.remove(j);
            k -= 1;
        } else {
            j += 1;
        }
    }
    HardLut {
        k_eff: k,
        mask,
        inputs,
    }
}
