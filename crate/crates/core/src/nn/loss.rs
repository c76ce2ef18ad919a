use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Mean over rows of `-log softmax(scores)[label]`, with its gradient
/// `(softmax - onehot) / n`.
pub fn softmax_cross_entropy(scores: ArrayView2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    let (n, m) = scores.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} score rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Shape("no score rows".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= m) {
        return Err(Error::LabelOutOfRange { label, classes: m });
    }
    let mut grad = Array2::zeros((n, m));
    let mut total = 0.0;
    for (i, row) in scores.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&s| (s - max).exp()).sum();
        let log_z = max + sum.ln();
        let y = labels[i] as usize;
        total += log_z - row[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let s = array![[0.0, 800.0, 0.0], [-800.0, -800.0, 0.0]];
        let (loss, grad) = softmax_cross_entropy(s.view(), &[1, 2]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn uniform_scores_give_ln_m() {
        let s = Array2::from_elem((4, 7), 1.5);
        let (loss, grad) = softmax_cross_entropy(s.view(), &[0, 3, 6, 2]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-14);
        assert!((grad[[1, 3]] - (1.0 / 7.0 - 1.0) / 4.0).abs() < 1e-15);
        assert!((grad[[1, 0]] - 1.0 / 28.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_labels() {
        let s = Array2::zeros((2, 3));
        assert!(matches!(
            softmax_cross_entropy(s.view(), &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(softmax_cross_entropy(s.view(), &[0]).is_err());
    }
}
