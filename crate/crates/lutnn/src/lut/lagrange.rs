//! Multilinear interpolating-polynomial evaluation for LUT nodes, with
//! gradients.
//!
//! A node with k total inputs carries 2^k coefficients c_d indexed by the
//! vertices d of {-1,1}^k and computes
//! `g(z) = sum_d c_d * prod_j (z_j - d_j)`.
//!
//! At a binary point z only the d = -z term survives, so
//! g(z) = c_{-z} * 2^k * prod_j z_j. Training exploits this: activations
//! arrive as exact bit-planes, so evaluation and gradients reduce from
//! O(k 2^k) to O(2^p) work per node.
//!
//! Coefficient indexing: bit j of the index is 1 when d_j = +1; input j = 0
//! is the lowest bit. Activation inputs occupy coordinates 0..k-p and
//! parameter inputs k-p..k.

/// d_j for coefficient index `idx` at coordinate `j`.
#[inline]
pub fn vertex_coord(idx: usize, j: usize) -> f64 {
    if (idx >> j) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Coefficient index of the vertex -z for binary z (bit j = 1 when z_j = -1).
#[inline]
pub fn opposite_index(zbits: &[f64]) -> usize {
    let mut idx = 0usize;
    for (j, &z) in zbits.iter().enumerate() {
        if z < 0.0 {
            idx |= 1 << j;
        }
    }
    idx
}

/// Evaluate g at an arbitrary real point z (length = node's k).
pub fn eval_general(coeffs: &[f64], z: &[f64]) -> f64 {
    let k = z.len();
    debug_assert_eq!(coeffs.len(), 1 << k);
    let mut acc = 0.0;
    for (idx, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let mut prod = c;
        for (j, &zj) in z.iter().enumerate() {
            prod *= zj - vertex_coord(idx, j);
        }
        acc += prod;
    }
    acc
}

/// Accumulate gradients at an arbitrary real point:
/// dc_d += u * prod_j (z_j - d_j); dz_j += u * sum_d c_d prod_{i != j}.
pub fn grad_general(coeffs: &[f64], z: &[f64], upstream: f64, dcoeffs: &mut [f64], dz: &mut [f64]) {
    let k = z.len();
    debug_assert_eq!(coeffs.len(), 1 << k);
    debug_assert_eq!(dcoeffs.len(), 1 << k);
    debug_assert_eq!(dz.len(), k);
    if upstream == 0.0 {
        return;
    }
    let mut prefix = vec![0.0; k + 1];
    let mut suffix = vec![0.0; k + 1];
    for (idx, &c) in coeffs.iter().enumerate() {
        // prefix[j] = prod_{i < j} (z_i - d_i), suffix[j] = prod_{i >= j}
        prefix[0] = 1.0;
        for j in 0..k {
            prefix[j + 1] = prefix[j] * (z[j] - vertex_coord(idx, j));
        }
        suffix[k] = 1.0;
        for j in (0..k).rev() {
            suffix[j] = suffix[j + 1] * (z[j] - vertex_coord(idx, j));
        }
        dcoeffs[idx] += upstream * prefix[k];
        if c != 0.0 {
            for j in 0..k {
                dz[j] += upstream * c * prefix[j] * suffix[j + 1];
            }
        }
    }
}

/// Evaluate g where the first k-p coordinates are exact binary values and
/// the trailing p coordinates are real parameter values.
pub fn eval_at_bits(coeffs: &[f64], k: usize, p: usize, xbits: &[f64], pvals: &[f64]) -> f64 {
    debug_assert_eq!(xbits.len(), k - p);
    debug_assert_eq!(pvals.len(), p);
    let base = opposite_index(xbits);
    let mut sign = 1.0;
    for &x in xbits {
        sign *= x;
    }
    let scale = (1u64 << (k - p)) as f64 * sign;
    if p == 0 {
        return coeffs[base] * scale;
    }
    let mut acc = 0.0;
    for dp in 0..(1usize << p) {
        let idx = base | (dp << (k - p));
        let c = coeffs[idx];
        if c == 0.0 {
            continue;
        }
        let mut prod = c;
        for (j, &pv) in pvals.iter().enumerate() {
            prod *= pv - vertex_coord(dp, j);
        }
        acc += prod;
    }
    acc * scale
}

/// Gradients of [`eval_at_bits`]. `dx` receives activation-input gradients,
/// `dp` parameter-input gradients, `dcoeffs` coefficient gradients.
pub fn grad_at_bits(
    coeffs: &[f64],
    k: usize,
    p: usize,
    xbits: &[f64],
    pvals: &[f64],
    upstream: f64,
    dcoeffs: &mut [f64],
    dx: &mut [f64],
    dp: &mut [f64],
) {
    if upstream == 0.0 {
        return;
    }
    let kx = k - p;
    let base = opposite_index(xbits);
    let mut sign = 1.0;
    for &x in xbits {
        sign *= x;
    }
    let scale = (1u64 << kx) as f64 * sign;
    let np = 1usize << p;

    // Parameter-branch products over the p coordinates. Feasibility caps
    // p at 4, so a stack buffer covers every branch; this sits in the
    // training hot loop and must not allocate.
    debug_assert!(np <= 16);
    let mut pprod = [1.0f64; 16];
    for (dp_idx, prod_out) in pprod.iter_mut().enumerate().take(np) {
        let mut prod = 1.0;
        for (j, &pv) in pvals.iter().enumerate() {
            prod *= pv - vertex_coord(dp_idx, j);
        }
        *prod_out = prod;
        dcoeffs[base | (dp_idx << kx)] += upstream * scale * prod;
    }

    // dp_j: drop coordinate j from the parameter product.
    for j in 0..p {
        let mut acc = 0.0;
        for dp_idx in 0..np {
            let idx = base | (dp_idx << kx);
            let c = coeffs[idx];
            if c == 0.0 {
                continue;
            }
            let mut prod = 1.0;
            for (jj, &pv) in pvals.iter().enumerate() {
                if jj != j {
                    prod *= pv - vertex_coord(dp_idx, jj);
                }
            }
            acc += c * prod;
        }
        dp[j] += upstream * scale * acc;
    }

    // dx_j: coordinate j leaves the product; both d_j branches survive.
    // prod over remaining x coordinates is 2^(kx-1) * sign / x_j, and the
    // flipped-d_j branch shares the parameter products computed above.
    for j in 0..kx {
        let other_scale = (1u64 << (kx - 1)) as f64 * sign * xbits[j];
        let flipped = base ^ (1 << j);
        let mut acc_same = 0.0;
        let mut acc_flip = 0.0;
        for (dp_idx, &prod) in pprod.iter().enumerate().take(np) {
            let shift = dp_idx << kx;
            acc_same += coeffs[base | shift] * prod;
            acc_flip += coeffs[flipped | shift] * prod;
        }
        dx[j] += upstream * other_scale * (acc_same + acc_flip);
    }
}
