//! Binarization machinery: sign with straight-through gradients, two-level
//! residual binarization with trainable level scales, and the l2
//! sparsification regularizer added to the training loss.
//!
//! Convention used everywhere in this crate (training, hardening, mask
//! extraction): sign(0) = +1.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Number of residual binarization levels. Fixed at two; accuracy returns
/// diminish beyond that.
pub const RESIDUAL_LEVELS: usize = 2;

/// Sign into {-1, +1} with sign(0) = +1.
#[inline]
pub fn sign_pm1(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Straight-through gradient gate: passes gradient where |x| <= 1.
#[inline]
pub fn ste_gate(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Clipped-linear surrogate whose a.e. derivative is `ste_gate`.
#[inline]
pub fn ste_surrogate(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Elementwise sign into {-1, +1}.
pub fn sign_ste(x: &Tensor) -> Tensor {
    x.map(sign_pm1)
}

/// Result of a two-level residual binarization pass.
#[derive(Debug, Clone)]
pub struct ResidualBits {
    /// Binary bit-planes, one per level, each in {-1, +1}.
    pub bits: [Tensor; RESIDUAL_LEVELS],
    /// Residual input to each level: eps_1 = x, eps_2 = x - g_1 * bits_1.
    pub residuals: [Tensor; RESIDUAL_LEVELS],
    /// Reconstruction sum_b g_b * bits_b.
    pub approx: Tensor,
}

/// Residual-binarize `x`: each level encodes the sign of the previous
/// level's residual error, weighted by its scale.
pub fn residual_binarize(x: &Tensor, gamma: [f64; RESIDUAL_LEVELS]) -> ResidualBits {
    let n = x.len();
    let shape = x.shape().to_vec();
    let mut bits0 = vec![0.0; n];
    let mut bits1 = vec![0.0; n];
    let mut eps1 = vec![0.0; n];
    let mut approx = vec![0.0; n];
    for (i, &v) in x.data().iter().enumerate() {
        let w0 = sign_pm1(v);
        let e1 = v - gamma[0] * w0;
        let w1 = sign_pm1(e1);
        bits0[i] = w0;
        bits1[i] = w1;
        eps1[i] = e1;
        approx[i] = gamma[0] * w0 + gamma[1] * w1;
    }
    ResidualBits {
        bits: [
            Tensor::from_vec(&shape, bits0).expect("shape fixed"),
            Tensor::from_vec(&shape, bits1).expect("shape fixed"),
        ],
        residuals: [
            x.clone(),
            Tensor::from_vec(&shape, eps1).expect("shape fixed"),
        ],
        approx: Tensor::from_vec(&shape, approx).expect("shape fixed"),
    }
}

/// Trainable per-layer residual binarizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualBinarizer {
    pub gamma: [f64; RESIDUAL_LEVELS],
    /// Scales are initialized from data on the first forward pass.
    pub initialized: bool,
}

impl ResidualBinarizer {
    pub fn new() -> Self {
        ResidualBinarizer {
            gamma: [1.0; RESIDUAL_LEVELS],
            initialized: false,
        }
    }

    /// Initialize each level scale to the mean absolute value of that
    /// level's residual, minimizing per-level reconstruction error.
    pub fn init_from(&mut self, x: &Tensor) {
        let n = x.len().max(1) as f64;
        let g0 = x.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        let g0 = if g0 > 0.0 { g0 } else { 1.0 };
        let g1 = x
            .data()
            .iter()
            .map(|&v| (v - g0 * sign_pm1(v)).abs())
            .sum::<f64>()
            / n;
        let g1 = if g1 > 0.0 { g1 } else { g0 * 0.5 };
        self.gamma = [g0, g1];
        self.initialized = true;
    }

    pub fn binarize(&self, x: &Tensor) -> ResidualBits {
        residual_binarize(x, self.gamma)
    }
}

impl Default for ResidualBinarizer {
    fn default() -> Self {
        Self::new()
    }
}

/// l2 sparsification regularizer over a set of weight tensors:
/// lambda * sqrt(sum of squared elements). Returns (omega, sum_of_squares);
/// the gradient of omega w.r.t. weight w is lambda * w / sqrt(sum).
pub fn sparsity_regularizer<'a>(
    weights: impl IntoIterator<Item = &'a [f64]>,
    lambda: f64,
) -> (f64, f64) {
    let mut sum_sq = 0.0;
    for w in weights {
        for &v in w {
            sum_sq += v * v;
        }
    }
    (lambda * sum_sq.sqrt(), sum_sq)
}

/// Accumulate d(omega)/dw into `grad` given the regularizer state.
pub fn accumulate_regularizer_grad(weights: &[f64], grad: &mut [f64], lambda: f64, sum_sq: f64) {
    if lambda == 0.0 || sum_sq == 0.0 {
        return;
    }
    let scale = lambda / sum_sq.sqrt();
    for (g, &w) in grad.iter_mut().zip(weights) {
        *g += scale * w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention_and_codomain() {
        let x = Tensor::from_vec(&[3], vec![-0.3, 0.0, 2.5]).unwrap();
        let s = sign_ste(&x);
        assert_eq!(s.data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn ste_gate_clips_outside_unit_interval() {
        // gradient at x = 0.5 with upstream 1 -> 1; at x = 1.5 -> 0
        assert_eq!(ste_gate(0.5), 1.0);
        assert_eq!(ste_gate(1.5), 0.0);
        assert_eq!(ste_gate(-1.0), 1.0);
    }

    #[test]
    fn sign_is_idempotent() {
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.1, 0.0, 3.0]).unwrap();
        let once = sign_ste(&x);
        let twice = sign_ste(&once);
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn residual_binarize_hand_example() {
        // x = 0.9, gamma = (1, 0.5): w1 = +1, eps2 = -0.1, w2 = -1, approx = 0.5
        let x = Tensor::from_vec(&[1], vec![0.9]).unwrap();
        let r = residual_binarize(&x, [1.0, 0.5]);
        assert_eq!(r.bits[0].data(), &[1.0]);
        assert_eq!(r.bits[1].data(), &[-1.0]);
        assert!((r.residuals[1].data()[0] + 0.1).abs() < 1e-12);
        assert!((r.approx.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn residual_binarize_zero_input() {
        // x = 0, gamma = (1, 1): bits (+1, -1), approx = 0
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let r = residual_binarize(&x, [1.0, 1.0]);
        assert_eq!(r.bits[0].data(), &[1.0]);
        assert_eq!(r.bits[1].data(), &[-1.0]);
        assert_eq!(r.approx.data(), &[0.0]);
    }

    #[test]
    fn residual_binarize_exact_representation() {
        // x = g1 + g2 exactly -> approx = x, zero final residual
        let g = [0.75, 0.25];
        let x = Tensor::from_vec(&[1], vec![g[0] + g[1]]).unwrap();
        let r = residual_binarize(&x, g);
        assert_eq!(r.approx.data()[0], x.data()[0]);
        let final_residual = x.data()[0] - r.approx.data()[0];
        assert_eq!(final_residual, 0.0);
    }

    #[test]
    fn gamma_init_reduces_residual_magnitude() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..512).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[512], data).unwrap();
        let mut b = ResidualBinarizer::new();
        b.init_from(&x);
        let r = b.binarize(&x);
        let mean_abs = |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64;
        // residual magnitude non-increasing across levels for trained gamma
        let lvl1 = mean_abs(&r.residuals[1]);
        let lvl0 = mean_abs(&r.residuals[0]);
        assert!(lvl1 <= lvl0);
        // reconstruction error bounded by input magnitude on average
        let err: f64 = x
            .data()
            .iter()
            .zip(r.approx.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / x.len() as f64;
        assert!(err <= mean_abs(&x));
    }

    #[test]
    fn regularizer_examples() {
        // single weight vector [3, 4], lambda = 1 -> 5
        let (omega, _) = sparsity_regularizer([&[3.0, 4.0][..]], 1.0);
        assert!((omega - 5.0).abs() < 1e-12);
        // lambda = 0 -> 0 regardless of weights
        let (omega, _) = sparsity_regularizer([&[3.0, 4.0][..]], 0.0);
        assert_eq!(omega, 0.0);
        // all-zero weights -> 0
        let (omega, _) = sparsity_regularizer([&[0.0, 0.0][..]], 1.0);
        assert_eq!(omega, 0.0);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let w = vec![0.5, -1.25, 2.0, 0.1];
        let lambda = 0.3;
        let (_, sum_sq) = sparsity_regularizer([w.as_slice()], lambda);
        let mut grad = vec![0.0; w.len()];
        accumulate_regularizer_grad(&w, &mut grad, lambda, sum_sq);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let (op, _) = sparsity_regularizer([wp.as_slice()], lambda);
            let (om, _) = sparsity_regularizer([wm.as_slice()], lambda);
            let fd = (op - om) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() / fd.abs().max(1e-9) < 1e-5,
                "component {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn regularizer_scale_equivariance() {
        let w = vec![0.2, -0.7, 1.1];
        let (omega, _) = sparsity_regularizer([w.as_slice()], 1.0);
        for k in [0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = w.iter().map(|v| v * k).collect();
            let (os, _) = sparsity_regularizer([scaled.as_slice()], 1.0);
            assert!((os - k * omega).abs() < 1e-9 * k.max(1.0));
        }
    }
}
