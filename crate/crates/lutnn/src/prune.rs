//! Fine-grained magnitude pruning: threshold application, density
//! accounting, and threshold search for a target density.
//!
//! A weight survives when its magnitude is strictly greater than the
//! threshold; boundary weights are pruned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-weight keep flags for one weight tensor, plus the threshold that
/// produced them. Pruned weights stay exactly zero through later phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: Vec<bool>,
    pub threshold: f64,
}

impl PruneMask {
    /// A mask keeping every weight (pre-pruning default).
    pub fn keep_all(len: usize) -> Self {
        PruneMask {
            keep: vec![true; len],
            threshold: 0.0,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Zero out masked weights in-place.
    pub fn apply(&self, weights: &mut [f64]) {
        for (w, &k) in weights.iter_mut().zip(&self.keep) {
            if !k {
                *w = 0.0;
            }
        }
    }
}

/// Build a mask keeping weights with |w| > threshold.
pub fn prune_threshold(weights: &Tensor, threshold: f64) -> PruneMask {
    PruneMask {
        keep: weights.data().iter().map(|w| w.abs() > threshold).collect(),
        threshold,
    }
}

/// Proportion of remaining pre-pruning parameters across a mask set.
pub fn density<'a>(masks: impl IntoIterator<Item = &'a PruneMask>) -> f64 {
    let mut kept = 0usize;
    let mut total = 0usize;
    for m in masks {
        kept += m.kept();
        total += m.len();
    }
    if total == 0 {
        0.0
    } else {
        kept as f64 / total as f64
    }
}

/// Threshold whose strict-inequality keep rule yields a density within one
/// weight of the target. Ties at the cut magnitude break toward keeping
/// fewer weights. A target of 1 returns 0 so that only exact zeros prune.
pub fn threshold_for_density<'a>(
    weights: impl IntoIterator<Item = &'a [f64]>,
    target: f64,
) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::config(format!(
            "target density must be in (0, 1], got {target}"
        )));
    }
    let mut mags: Vec<f64> = weights
        .into_iter()
        .flat_map(|w| w.iter().map(|v| v.abs()))
        .collect();
    if mags.is_empty() {
        return Err(Error::config("threshold search over an empty weight set"));
    }
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let n = mags.len();
    let keep_target = ((target * n as f64).round() as usize).min(n);
    if keep_target >= n {
        return Ok(0.0);
    }
    // Largest pruned magnitude: the (n - keep_target)-th smallest.
    Ok(mags[n - keep_target - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_weight_is_pruned() {
        // |w| not > theta at the boundary
        let w = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let m = prune_threshold(&w, 0.5);
        assert_eq!(m.keep, vec![false]);
    }

    #[test]
    fn zero_threshold_prunes_only_exact_zeros() {
        let w = Tensor::from_vec(&[3], vec![0.0, 1e-300, -2.0]).unwrap();
        let m = prune_threshold(&w, 0.0);
        assert_eq!(m.keep, vec![false, true, true]);
    }

    #[test]
    fn elementwise_rule() {
        let w = Tensor::from_vec(&[3], vec![-0.9, 0.1, 0.6]).unwrap();
        let m = prune_threshold(&w, 0.5);
        assert_eq!(m.keep, vec![true, false, true]);
    }

    #[test]
    fn density_arithmetic() {
        let mut all = PruneMask::keep_all(8);
        assert_eq!(density([&all]), 1.0);
        all.keep.iter_mut().for_each(|k| *k = false);
        assert_eq!(density([&all]), 0.0);
        for i in 0..3 {
            all.keep[i] = true;
        }
        assert_eq!(density([&all]), 0.375);
    }

    /// Independent sort-and-cut oracle: keep the k largest magnitudes.
    fn quantile_oracle(mags: &[f64], target: f64) -> usize {
        let mut sorted: Vec<f64> = mags.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        (target * mags.len() as f64).round() as usize
    }

    #[test]
    fn threshold_search_hand_cases() {
        // |w| = {1,2,3,4}, target 0.5 -> theta = 2, keep {3, 4}
        let w = [1.0, -2.0, 3.0, -4.0];
        let theta = threshold_for_density([&w[..]], 0.5).unwrap();
        assert_eq!(theta, 2.0);
        let t = Tensor::from_vec(&[4], w.to_vec()).unwrap();
        let m = prune_threshold(&t, theta);
        assert_eq!(m.keep, vec![false, false, true, true]);

        // target 0.25 on 8 distinct magnitudes -> exactly 2 kept
        let w8 = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let theta = threshold_for_density([&w8[..]], 0.25).unwrap();
        let t8 = Tensor::from_vec(&[8], w8.to_vec()).unwrap();
        assert_eq!(prune_threshold(&t8, theta).kept(), 2);
        assert_eq!(quantile_oracle(&w8, 0.25), 2);

        // target 1 -> theta 0; all nonzero kept
        let theta = threshold_for_density([&w8[..]], 1.0).unwrap();
        assert_eq!(theta, 0.0);
        assert_eq!(prune_threshold(&t8, theta).kept(), 8);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(threshold_for_density([&[1.0][..]], 0.0).is_err());
        assert!(threshold_for_density([&[1.0][..]], 1.5).is_err());
        let empty: [&[f64]; 0] = [];
        assert!(threshold_for_density(empty, 0.5).is_err());
    }

    #[test]
    fn mask_application_zeroes_pruned() {
        let t = Tensor::from_vec(&[4], vec![0.4, -0.6, 0.1, 0.9]).unwrap();
        let m = prune_threshold(&t, 0.5);
        let mut w = t.data().to_vec();
        m.apply(&mut w);
        assert_eq!(w, vec![0.0, -0.6, 0.0, 0.9]);
    }

    proptest! {
        /// Monotonicity: raising the threshold can only shrink the keep set.
        #[test]
        fn keep_set_shrinks_with_threshold(
            ws in proptest::collection::vec(-5.0f64..5.0, 1..64),
            t1 in 0.0f64..3.0,
            dt in 0.0f64..2.0,
        ) {
            let t2 = t1 + dt;
            let tensor = Tensor::from_vec(&[ws.len()], ws.clone()).unwrap();
            let m1 = prune_threshold(&tensor, t1);
            let m2 = prune_threshold(&tensor, t2);
            for (a, b) in m1.keep.iter().zip(&m2.keep) {
                // keep under t2 implies keep under t1
                prop_assert!(!*b || *a);
            }
        }

        /// Achieved density lands within one weight of the target for
        /// distinct magnitudes.
        #[test]
        fn achieved_density_near_target(
            seed in 0u64..1000,
            n in 4usize..128,
            target in 0.05f64..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut ws: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..10.0)).collect();
            ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ws.dedup();
            let n = ws.len();
            let theta = threshold_for_density([ws.as_slice()], target).unwrap();
            let t = Tensor::from_vec(&[n], ws.clone()).unwrap();
            let m = prune_threshold(&t, theta);
            let achieved = density([&m]);
            prop_assert!((achieved - target).abs() <= 1.0 / n as f64 + 1e-12);
        }
    }
}
