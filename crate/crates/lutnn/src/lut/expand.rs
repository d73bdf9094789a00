//! Logic expansion: convert each surviving connection of a pruned layer
//! into a LUT node. The node's first input preserves the original
//! connection; remaining activation inputs are drawn uniformly without
//! replacement from the node's candidate pool (the full input vector for
//! dense layers, the kernel window for convolutions). Selection is
//! deterministic given the seed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::tensor::Tensor;

use super::init::{init_param_word, solve_identity_coeffs};
use super::{feasible, LutGeometry, LutLayer, LutNode};

/// Where remade (previously pruned) connections get their starting weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconnectWeights {
    /// Pre-pruning values: the remade connection resumes from where
    /// training left it, giving retraining a richer starting point.
    Original,
    /// Zero: the expanded layer initially computes exactly what the pruned
    /// layer computed.
    Zero,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpandSpec {
    pub k: usize,
    pub p: usize,
    pub t_i: usize,
    pub t_o: usize,
    pub reconnect: ReconnectWeights,
}

/// An expanded layer plus the effective linear map its initialization
/// encodes; the pipeline checks the layer's forward against this reference
/// before any retraining step.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub layer: LutLayer,
    /// [out_units, total_slots]; for convolutions the slot axis is the
    /// flattened kernel window.
    pub reference_weight: Tensor,
}

/// Expand a pruned dense layer.
pub fn expand_layer(
    weight: &Tensor,
    mask: &PruneMask,
    pre_prune: &Tensor,
    alpha: f64,
    spec: &ExpandSpec,
    rng: &mut impl Rng,
) -> Result<Expansion> {
    if weight.shape().len() != 2 {
        return Err(Error::config("dense expansion expects a 2-d weight"));
    }
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    expand_matrix(
        weight,
        mask,
        pre_prune,
        out_dim,
        in_dim,
        LutGeometry::Dense { in_dim, out_dim },
        alpha,
        spec,
        rng,
    )
}

/// Expand a pruned valid-padding convolution layer.
pub fn expand_conv(
    weight: &Tensor,
    mask: &PruneMask,
    pre_prune: &Tensor,
    alpha: f64,
    stride: usize,
    spec: &ExpandSpec,
    rng: &mut impl Rng,
) -> Result<Expansion> {
    if weight.shape().len() != 4 || weight.shape()[2] != weight.shape()[3] {
        return Err(Error::config(
            "conv expansion expects a [out, in, k, k] weight",
        ));
    }
    let (cout, cin, kernel) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    expand_matrix(
        weight,
        mask,
        pre_prune,
        cout,
        cin * kernel * kernel,
        LutGeometry::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
        },
        alpha,
        spec,
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn expand_matrix(
    weight: &Tensor,
    mask: &PruneMask,
    pre_prune: &Tensor,
    out_units: usize,
    total_slots: usize,
    geometry: LutGeometry,
    alpha: f64,
    spec: &ExpandSpec,
    rng: &mut impl Rng,
) -> Result<Expansion> {
    if !feasible(spec.k, spec.p)? {
        return Err(Error::config(format!(
            "infeasible node configuration k={} p={}",
            spec.k, spec.p
        )));
    }
    let tiles = spec.t_i * spec.t_o;
    if spec.p == 0 && tiles > 1 {
        return Err(Error::config(
            "nodes without parameter inputs must be unrolled (t_i = t_o = 1)",
        ));
    }
    if !out_units.is_multiple_of(spec.t_o) {
        return Err(Error::config(format!(
            "t_o = {} does not divide {out_units} output channels",
            spec.t_o
        )));
    }
    let group_slots = geometry.slots_per_group(spec.t_i);
    let divides = match geometry {
        LutGeometry::Dense { in_dim, .. } => in_dim % spec.t_i == 0,
        LutGeometry::Conv { in_channels, .. } => in_channels % spec.t_i == 0,
    };
    if !divides {
        return Err(Error::config(format!(
            "t_i = {} does not divide the input channel grid",
            spec.t_i
        )));
    }
    if mask.len() != weight.len() || pre_prune.len() != weight.len() {
        return Err(Error::config("mask/weight length mismatch at expansion"));
    }

    let rows = out_units / spec.t_o;
    let w = weight.data();
    let pre = pre_prune.data();
    let keep = &mask.keep;
    let flat = |o: usize, s: usize| o * total_slots + s;
    // Starting weight of input slot `j` wired to (out, s). The first slot
    // carries the surviving connection; extras start from their
    // pre-pruning value or from zero, depending on policy. An extra keeps
    // no live weight even when its connection survived elsewhere — the
    // surviving copy is already owned by that connection's own node.
    let value_at = |o: usize, s: usize, j: usize| -> f64 {
        let i = flat(o, s);
        if j == 0 {
            w[i]
        } else {
            match spec.reconnect {
                ReconnectWeights::Original => {
                    if keep[i] {
                        w[i]
                    } else {
                        pre[i]
                    }
                }
                ReconnectWeights::Zero => 0.0,
            }
        }
    };

    let mut nodes = Vec::new();
    let mut reference = vec![0.0; out_units * total_slots];
    for row in 0..rows {
        for col in 0..group_slots {
            // A position survives only if every tile keeps it; ragged masks
            // cannot share one physical node.
            let mut kept_any = false;
            let mut kept_all = true;
            for a in 0..spec.t_o {
                for b in 0..spec.t_i {
                    let k = keep[flat(a * rows + row, b * group_slots + col)];
                    kept_any |= k;
                    kept_all &= k;
                }
            }
            if !kept_any {
                continue;
            }
            if !kept_all {
                return Err(Error::config(format!(
                    "prune mask is not tile-uniform at node position ({row}, {col}); \
                     tiled expansion requires per-position pruning"
                )));
            }

            // Shrink the node if the pool cannot saturate it.
            let pool = group_slots - 1;
            let kx = (spec.k - spec.p).min(pool + 1);
            let k_eff = kx + spec.p;

            // Per-input-tile selections: first entry preserves the original
            // connection, extras drawn without replacement from the window.
            let mut selections = Vec::with_capacity(spec.t_i);
            for _b in 0..spec.t_i {
                let mut sel = Vec::with_capacity(kx);
                sel.push(col);
                if kx > 1 {
                    let mut candidates: Vec<usize> =
                        (0..group_slots).filter(|&s| s != col).collect();
                    candidates.shuffle(rng);
                    sel.extend_from_slice(&candidates[..kx - 1]);
                }
                selections.push(sel);
            }

            // Base weights: per slot, the mean across tiles of the remade
            // connection values on that tile's wiring.
            let mut base_w = vec![0.0; kx];
            for (j, bw) in base_w.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..spec.t_o {
                    for b in 0..spec.t_i {
                        acc += value_at(a * rows + row, b * group_slots + selections[b][j], j);
                    }
                }
                *bw = acc / tiles as f64;
            }
            let coeffs = solve_identity_coeffs(k_eff, spec.p, &base_w)?;

            // Per-logical-operation parameter words seeded from that tile's
            // own weights.
            let mut p_words = Vec::with_capacity(tiles);
            for a in 0..spec.t_o {
                for b in 0..spec.t_i {
                    let tile_w: Vec<f64> = (0..kx)
                        .map(|j| value_at(a * rows + row, b * group_slots + selections[b][j], j))
                        .collect();
                    p_words.push(init_param_word(k_eff, spec.p, &tile_w, rng));
                }
            }

            for (j, &bw) in base_w.iter().enumerate() {
                for a in 0..spec.t_o {
                    for b in 0..spec.t_i {
                        reference[flat(a * rows + row, b * group_slots + selections[b][j])] += bw;
                    }
                }
            }

            let gcoeffs = vec![0.0; coeffs.len()];
            let gp_words = p_words.iter().map(|w| vec![0.0; w.len()]).collect();
            nodes.push(LutNode {
                k: k_eff,
                p: spec.p,
                row,
                col,
                selections,
                coeffs,
                p_words,
                gcoeffs,
                gp_words,
            });
        }
    }

    Ok(Expansion {
        layer: LutLayer {
            geometry,
            t_i: spec.t_i,
            t_o: spec.t_o,
            k: spec.k,
            p: spec.p,
            alpha,
            nodes,
            galpha: 0.0,
            cache: None,
        },
        reference_weight: Tensor::from_vec(&[out_units, total_slots], reference).expect("sized"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prune::prune_threshold;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unrolled(k: usize, p: usize) -> ExpandSpec {
        ExpandSpec {
            k,
            p,
            t_i: 1,
            t_o: 1,
            reconnect: ReconnectWeights::Original,
        }
    }

    #[test]
    fn k1_preserves_pruned_structure() {
        let w = Tensor::from_vec(&[2, 3], vec![0.8, 0.0, -0.5, 0.0, 0.3, 0.0]).unwrap();
        let mask = prune_threshold(&w, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exp = expand_layer(&w, &mask, &w, 1.0, &unrolled(1, 0), &mut rng).unwrap();
        assert_eq!(exp.layer.nodes.len(), 3);
        for node in &exp.layer.nodes {
            assert_eq!(node.k, 1);
            assert_eq!(node.selections[0], vec![node.col]);
        }
        // reference equals the masked weight matrix exactly
        for (r, (orig, keep)) in exp
            .reference_weight
            .data()
            .iter()
            .zip(w.data().iter().zip(&mask.keep))
            .map(|(r, wk)| (r, wk))
        {
            assert_eq!(*r, if *keep { *orig } else { 0.0 });
        }
    }

    #[test]
    fn extras_are_distinct_and_in_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 16;
        let w = Tensor::from_vec(&[1, n], (1..=n).map(|v| v as f64).collect()).unwrap();
        let mask = prune_threshold(&w, 0.0);
        let exp = expand_layer(&w, &mask, &w, 1.0, &unrolled(4, 0), &mut rng).unwrap();
        for node in &exp.layer.nodes {
            assert_eq!(node.k, 4);
            let sel = &node.selections[0];
            assert_eq!(sel[0], node.col);
            let mut sorted = sel.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), sel.len(), "duplicate selections");
            assert!(sel.iter().all(|&s| s < n));
        }
    }

    #[test]
    fn conv_extras_stay_within_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (o, c, k) = (2usize, 3usize, 3usize);
        let n = o * c * k * k;
        let w = Tensor::from_vec(&[o, c, k, k], (0..n).map(|v| 0.1 + v as f64 * 0.01).collect())
            .unwrap();
        let mask = prune_threshold(&w, 0.0);
        let exp = expand_conv(&w, &mask, &w, 1.0, 1, &unrolled(4, 0), &mut rng).unwrap();
        let window = c * k * k;
        for node in &exp.layer.nodes {
            assert_eq!(node.selections[0].len(), 4);
            assert!(node.selections[0].iter().all(|&s| s < window));
        }
    }

    #[test]
    fn pool_exhaustion_shrinks_node() {
        // dense layer with 2-wide input, k = 6, p = 0 -> effective k = 2
        let w = Tensor::from_vec(&[1, 2], vec![0.5, -0.5]).unwrap();
        let mask = prune_threshold(&w, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let exp = expand_layer(&w, &mask, &w, 1.0, &unrolled(6, 0), &mut rng).unwrap();
        for node in &exp.layer.nodes {
            assert_eq!(node.k, 2);
        }
    }

    #[test]
    fn infeasible_and_tiling_violations_are_config_errors() {
        let w = Tensor::from_vec(&[2, 4], vec![0.5; 8]).unwrap();
        let mask = prune_threshold(&w, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(expand_layer(&w, &mask, &w, 1.0, &unrolled(6, 5), &mut rng).is_err());
        // p = 0 with tiling
        let spec = ExpandSpec {
            k: 3,
            p: 0,
            t_i: 2,
            t_o: 1,
            reconnect: ReconnectWeights::Original,
        };
        assert!(expand_layer(&w, &mask, &w, 1.0, &spec, &mut rng).is_err());
        // t_o does not divide outputs
        let spec = ExpandSpec {
            k: 3,
            p: 1,
            t_i: 1,
            t_o: 3,
            reconnect: ReconnectWeights::Original,
        };
        assert!(expand_layer(&w, &mask, &w, 1.0, &spec, &mut rng).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_selections_bit_for_bit() {
        let w = Tensor::from_vec(&[4, 8], (0..32).map(|v| 0.05 * (v + 1) as f64).collect()).unwrap();
        let mask = prune_threshold(&w, 0.4);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            expand_layer(&w, &mask, &w, 1.0, &unrolled(4, 1), &mut rng).unwrap()
        };
        let a = run(42);
        let b = run(42);
        let c = run(43);
        let sels =
            |e: &Expansion| e.layer.nodes.iter().map(|n| n.selections.clone()).collect::<Vec<_>>();
        assert_eq!(sels(&a), sels(&b));
        assert_ne!(sels(&a), sels(&c));
        let words = |e: &Expansion| e.layer.nodes.iter().map(|n| n.p_words.clone()).collect::<Vec<_>>();
        assert_eq!(words(&a), words(&b));
    }

    #[test]
    fn ragged_mask_rejected_for_tiled_expansion() {
        let mut keep = vec![true; 4 * 4];
        keep[0] = false; // position (0,0) pruned in tile (0,0) only
        let mask = PruneMask {
            keep,
            threshold: 0.0,
        };
        let w = Tensor::from_vec(&[4, 4], vec![0.5; 16]).unwrap();
        let spec = ExpandSpec {
            k: 2,
            p: 1,
            t_i: 2,
            t_o: 2,
            reconnect: ReconnectWeights::Original,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert!(expand_layer(&w, &mask, &w, 1.0, &spec, &mut rng).is_err());
    }
}
