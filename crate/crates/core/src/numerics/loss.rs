use crate::error::{Error, Result};

use super::Matrix;

/// Mean softmax cross-entropy over the batch together with its gradient
/// with respect to the logits, `(softmax - onehot) / batch`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::DimensionMismatch {
            context: "softmax_xent labels",
            expected: batch,
            found: labels.len(),
        });
    }
    if batch == 0 {
        return Err(Error::invalid("softmax_xent on an empty batch"));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax_xent logits".into()));
    }
    let mut grad = Matrix::zeros(batch, classes);
    let mut total = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        // -log softmax[y] = log Σ exp(z - max) - (z_y - max)
        total += log_denom - (row[y] - max);
        let g = grad.row_mut(i);
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp() / denom * inv_batch;
        }
        g[y] -= inv_batch;
    }
    Ok((total * inv_batch, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, Rng};

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Matrix::from_rows(&[vec![0.7; 4]]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn dominant_target_does_not_overflow() {
        let logits = Matrix::from_rows(&[vec![1e3, 0.0, 0.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-300);
        assert!(grad.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(9, 0);
        let logits = rng.normal_matrix(3, 5, 2.0);
        let labels = [4, 0, 2];
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let m = Matrix::from_vec(3, 5, x.to_vec()).unwrap();
                softmax_xent(&m, &labels).unwrap().0
            },
            logits.data(),
            1e-5,
        )
        .unwrap();
        let rel = crate::numerics::relative_error(grad.data(), &fd);
        assert!(rel < 1e-7, "relative error {rel}");
    }

    #[test]
    fn shift_invariance_and_zero_row_sums() {
        let mut rng = Rng::new(10, 0);
        for _ in 0..20 {
            let logits = rng.normal_matrix(4, 6, 3.0);
            let labels = [0, 5, 3, 3];
            let (l0, g) = softmax_xent(&logits, &labels).unwrap();
            let mut shifted = logits.clone();
            for r in 0..4 {
                let c = 10.0 * rng.normal();
                for v in shifted.row_mut(r) {
                    *v += c;
                }
            }
            let (l1, _) = softmax_xent(&shifted, &labels).unwrap();
            assert!((l0 - l1).abs() < 1e-12);
            for r in 0..4 {
                assert!(g.row(r).iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let logits = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(
            softmax_xent(&logits, &[0]),
            Err(Error::NonFinite(_))
        ));
    }
}
