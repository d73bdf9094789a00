//! Softmax cross-entropy head over class logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct LossOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient w.r.t. the logits (already divided by batch size).
    pub dlogits: Tensor,
    /// Correctly classified samples in the batch.
    pub correct: usize,
}

/// Numerically stable softmax cross-entropy with integer class labels.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::config(format!(
            "loss expects [batch, classes] logits matching {} labels, got {:?}",
            labels.len(),
            shape
        )));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut dl = vec![0.0; batch * classes];
    for b in 0..batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let label = labels[b];
        if label >= classes {
            return Err(Error::config(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += -(row[label] - max - log_denom);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            dl[b * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(LossOutput {
        loss: loss / batch as f64,
        dlogits: Tensor::from_vec(shape, dl).expect("sized"),
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_loss_equals_neg_log_prob() {
        let logits = Tensor::from_vec(&[1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        let out = softmax_cross_entropy(&logits, &[2]).unwrap();
        let denom: f64 = logits.data().iter().map(|v| v.exp()).sum();
        let p = (0.5f64).exp() / denom;
        assert!((out.loss - (-p.ln())).abs() < 1e-12);
    }

    #[test]
    fn gradient_sums_to_zero_per_sample() {
        let logits = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, -1.0, 2.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = softmax_cross_entropy(&logits, &[3, 0]).unwrap();
        for b in 0..2 {
            let s: f64 = out.dlogits.data()[b * 4..(b + 1) * 4].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn counts_correct_predictions() {
        let logits =
            Tensor::from_vec(&[2, 2], vec![3.0, 1.0, 0.0, 2.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[0, 0]).unwrap();
        assert_eq!(out.correct, 1);
    }
}
