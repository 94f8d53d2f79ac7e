use crate::autodiff::{log_softmax_row, Value};
use crate::error::{shape_err, Error, Result};

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Value, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(shape_err("cross_entropy", logits.rows(), labels.len()));
    }
    let k = logits.cols();
    let mut s = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        s -= log_softmax_row(logits.row(i)).nth(y).expect("y < k");
    }
    Ok(s / logits.rows() as f64)
}

/// Softmax entropy of every row.
pub fn entropy_per_row(logits: &Value) -> Vec<f64> {
    (0..logits.rows()).map(|i| -log_softmax_row(logits.row(i)).map(|lp| lp.exp() * lp).sum::<f64>()).collect()
}

/// Mean softmax entropy over rows, in `[0, ln K]`.
pub fn entropy(logits: &Value) -> f64 {
    let h = entropy_per_row(logits);
    h.iter().sum::<f64>() / h.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error, Graph};
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let z = Value::zeros(vec![3, 10]);
        let ln10 = 10f64.ln();
        assert!((cross_entropy(&z, &[0, 4, 9]).unwrap() - ln10).abs() < 1e-12);
        assert!((entropy(&z) - ln10).abs() < 1e-12);
        // the documented value, to six places
        assert_eq!(format!("{ln10:.6}"), "2.302585");
    }

    #[test]
    fn confident_correct_prediction() {
        let mut row = vec![0.0; 5];
        row[2] = 20.0;
        let z = Value::from_rows(&[row]).unwrap();
        assert!(cross_entropy(&z, &[2]).unwrap() < 1e-8);
        let mut row = vec![0.0; 5];
        row[0] = 30.0;
        assert!(entropy(&Value::from_rows(&[row]).unwrap()) < 1e-8);
    }

    #[test]
    fn label_out_of_range() {
        let z = Value::zeros(vec![1, 3]);
        assert!(matches!(cross_entropy(&z, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    }

    #[test]
    fn cross_entropy_graph_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.1, 0.5, -0.4];
        let labels = vec![2, 0];
        let mut g = Graph::new();
        let z = g.param(Value::matrix(2, 3, logits.clone()).unwrap());
        g.cross_entropy(z, labels.clone());
        g.forward().unwrap();
        let analytic = g.backward().unwrap().into_flat();
        let fd =
            finite_diff_grad(|p| cross_entropy(&Value::matrix(2, 3, p.to_vec())?, &labels), &logits, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn entropy_graph_matches_closed_form() {
        let logits = Value::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.1, 0.5, -0.4]).unwrap();
        let mut g = Graph::new();
        let z = g.input(logits.clone());
        g.entropy(z);
        let v = g.forward().unwrap().item();
        assert!((v - entropy(&logits)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn entropy_within_bounds(k in 2usize..8, data in prop::collection::vec(-40.0f64..40.0, 32)) {
            let rows = 32 / k;
            let z = Value::matrix(rows, k, data[..rows * k].to_vec()).unwrap();
            let h = entropy(&z);
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (k as f64).ln() + 1e-12);
            let labels: Vec<usize> = (0..rows).map(|i| i % k).collect();
            prop_assert!(cross_entropy(&z, &labels).unwrap() >= 0.0);
        }
    }
}
