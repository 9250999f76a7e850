use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / B` with respect to `logits (B, P)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, p) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= p) {
        return Err(Error::arg(format!("label {bad} out of range for {p} classes")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * p);
    for (row, &label) in logits.data().chunks_exact(p).zip(labels) {
        let (top, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        // log-sum-exp as max + ln(1 + rest) keeps confident rows precise
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let log_z = max + rest.ln_1p();
        loss += (max - row[label]) + rest.ln_1p();
        for (j, v) in row.iter().enumerate() {
            let prob = (v - log_z).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push((prob - target) / b as f64);
        }
    }
    Ok((loss / b as f64, Tensor::from_vec(&[b, p], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::full(&[3, 7], 0.3).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits() {
        let logits = Tensor::from_vec(&[1, 2], vec![10.0, -10.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        // ln(1 + e^-20)
        assert!((loss - 2.061_153_620_314_381e-9).abs() < 1e-20);
    }

    #[test]
    fn grad_rows_sum_to_zero_and_large_logits_are_stable() {
        let logits = Tensor::from_vec(&[2, 3], vec![1000.0, 999.0, -5.0, 0.1, 0.2, 0.3]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1, 2]).unwrap();
        assert!(loss.is_finite());
        for row in grad.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn bad_labels() {
        let logits = Tensor::zeros(&[2, 3]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }
}
