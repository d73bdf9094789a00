//! Coefficient-matching initialization: choose node coefficients so the
//! interpolating polynomial reproduces the weighted sum of its activation
//! inputs at every binary point.
//!
//! With no parameter inputs the 2^k vertex constraints pin all 2^k
//! coefficients uniquely. With parameter inputs the identity is imposed on
//! every binary assignment of the parameter coordinates (the base solution
//! replicated across parameter branches with per-branch sign correction),
//! which makes the initialized node independent of its parameter values by
//! multilinearity.

use rand::Rng;

use crate::error::{Error, Result};

use super::lagrange::{eval_general, vertex_coord};

const INIT_VERIFY_TOL: f64 = 1e-9;

/// Solve for the 2^k coefficients such that g(x, p) = sum_i x_i w_i for all
/// binary x and p. `weights` has length k - p. Verifies the identity at
/// every vertex before returning.
pub fn solve_identity_coeffs(k: usize, p: usize, weights: &[f64]) -> Result<Vec<f64>> {
    let kx = k
        .checked_sub(p)
        .filter(|kx| *kx >= 1)
        .ok_or_else(|| Error::config(format!("node needs k - p >= 1, got k={k} p={p}")))?;
    if weights.len() != kx {
        return Err(Error::config(format!(
            "expected {kx} weights for a (k={k}, p={p}) node, got {}",
            weights.len()
        )));
    }
    let n = 1usize << k;
    let scale = (1u64 << k) as f64;
    let mut coeffs = vec![0.0; n];
    // At vertex v only c_{-v} contributes: c_{-v} = target(v) / (2^k prod v).
    for v in 0..n {
        let mut target = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            target += vertex_coord(v, j) * w;
        }
        let mut sign = 1.0;
        for j in 0..k {
            sign *= vertex_coord(v, j);
        }
        coeffs[(!v) & (n - 1)] = target / (scale * sign);
    }
    // Independent check through the general evaluator.
    for v in 0..n {
        let z: Vec<f64> = (0..k).map(|j| vertex_coord(v, j)).collect();
        let mut target = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            target += z[j] * w;
        }
        let got = eval_general(&coeffs, &z);
        if (got - target).abs() > INIT_VERIFY_TOL {
            return Err(Error::internal(format!(
                "coefficient initialization residual {} at vertex {v} (k={k}, p={p})",
                (got - target).abs()
            )));
        }
    }
    Ok(coeffs)
}

/// Initial parameter-input values: the first min(p, k/2) take weight
/// values (capped by how many weights exist); the rest are random signs.
pub fn init_param_word(k: usize, p: usize, weights: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let from_weights = p.min(k / 2).min(weights.len());
    let mut word = Vec::with_capacity(p);
    for &w in weights.iter().take(from_weights) {
        word.push(w);
    }
    while word.len() < p {
        word.push(if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    }
    word
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::lagrange::eval_at_bits;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: match multilinear monomial coefficients by
    /// solving the dense 2^k x 2^k linear system with Gaussian elimination.
    /// Row m = monomial prod_{j in m} z_j; column d = coefficient c_d.
    /// Expanding prod_j (z_j - d_j) over subsets S gives, for monomial set
    /// m, the entry prod_{j not in m} (-d_j).
    fn monomial_solve_oracle(k: usize, weights: &[f64]) -> Vec<f64> {
        let n = 1usize << k;
        let mut a = vec![vec![0.0f64; n]; n];
        let mut b = vec![0.0f64; n];
        for m in 0..n {
            for d in 0..n {
                let mut entry = 1.0;
                for j in 0..k {
                    if m & (1 << j) == 0 {
                        entry *= -vertex_coord(d, j);
                    }
                }
                a[m][d] = entry;
            }
        }
        // target polynomial sum_i z_i w_i: coefficient w_i on singleton {i}
        for (i, &w) in weights.iter().enumerate() {
            b[1 << i] = w;
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let pv = a[col][col];
            assert!(pv.abs() > 1e-12, "singular system");
            for row in 0..n {
                if row == col {
                    continue;
                }
                let f = a[row][col] / pv;
                if f == 0.0 {
                    continue;
                }
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
        (0..n).map(|i| b[i] / a[i][i]).collect()
    }

    #[test]
    fn k1_matches_hand_solution() {
        // w = 1 -> c = (0.5, 0.5)
        let c = solve_identity_coeffs(1, 0, &[1.0]).unwrap();
        assert_eq!(c, vec![0.5, 0.5]);
    }

    #[test]
    fn k2_matches_linear_solve_oracle() {
        let c = solve_identity_coeffs(2, 0, &[1.0, 1.0]).unwrap();
        let oracle = monomial_solve_oracle(2, &[1.0, 1.0]);
        for (a, b) in c.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{c:?} vs {oracle:?}");
        }
        // frozen values: c_(-1,-1) = 0.5, c_(1,1) = -0.5, cross terms 0
        assert!((c[0b00] - 0.5).abs() < 1e-12);
        assert!((c[0b11] + 0.5).abs() < 1e-12);
        assert!(c[0b01].abs() < 1e-12);
        assert!(c[0b10].abs() < 1e-12);
    }

    #[test]
    fn oracle_agreement_across_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for k in 1..=5usize {
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ours = solve_identity_coeffs(k, 0, &w).unwrap();
            let oracle = monomial_solve_oracle(k, &w);
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "k={k}");
            }
        }
    }

    #[test]
    fn k2_p1_branch_replication() {
        // w1 = 1 -> c_(d1,d2) = -d2/4; both parameter branches compute x
        let c = solve_identity_coeffs(2, 1, &[1.0]).unwrap();
        for idx in 0..4usize {
            let d2 = vertex_coord(idx, 1);
            assert!((c[idx] - (-d2 / 4.0)).abs() < 1e-12, "c = {c:?}");
        }
        for pbit in [-1.0, 1.0] {
            for x in [-1.0, 1.0] {
                let g = eval_at_bits(&c, 2, 1, &[x], &[pbit]);
                assert!((g - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_holds_for_any_real_parameter_values() {
        // multilinearity: constant across each parameter coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let w = [0.7, -1.3];
        let c = solve_identity_coeffs(4, 2, &w).unwrap();
        for _ in 0..30 {
            let x: Vec<f64> = (0..2)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let p: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let target = x[0] * w[0] + x[1] * w[1];
            let g = eval_at_bits(&c, 4, 2, &x, &p);
            assert!((g - target).abs() < 1e-9);
        }
    }

    #[test]
    fn param_word_takes_leading_weights_then_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        // p <= k/2: take all p values from weights
        let word = init_param_word(4, 2, &[0.3, -0.8], &mut rng);
        assert_eq!(word, vec![0.3, -0.8]);
        // p > k/2: cap at k/2 and at the number of weights
        let word = init_param_word(6, 4, &[0.5, 0.25], &mut rng);
        assert_eq!(&word[..2], &[0.5, 0.25]);
        assert_eq!(word.len(), 4);
        for &v in &word[2..] {
            assert!(v == 1.0 || v == -1.0);
        }
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(solve_identity_coeffs(3, 3, &[]).is_err());
        assert!(solve_identity_coeffs(2, 0, &[1.0]).is_err());
    }
}
