use crate::error::{config_err, Error, Result};
use crate::tensor::Matrix;

/// Mean softmax cross-entropy over the batch (columns of `logits`) and its
/// gradient `(softmax − onehot)/B`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (classes, batch) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape {
            op: "softmax_xent",
            lhs: logits.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(config_err(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = Matrix::zeros(classes, batch);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, &label) in labels.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(logits[(c, b)]);
        }
        let mut denom = 0.0;
        for c in 0..classes {
            let e = (logits[(c, b)] - max).exp();
            grad[(c, b)] = e;
            denom += e;
        }
        loss += denom.ln() - (logits[(label, b)] - max);
        for c in 0..classes {
            grad[(c, b)] = grad[(c, b)] / denom * inv_b;
        }
        grad[(label, b)] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest logit per column (first on ties).
pub fn argmax_columns(logits: &Matrix) -> Vec<usize> {
    (0..logits.cols())
        .map(|b| {
            let mut best = 0;
            for c in 1..logits.rows() {
                if logits[(c, b)] > logits[(best, b)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
