use super::tensor::Tensor;
use crate::error::{MudaError, Result};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Fused softmax + cross-entropy gradient w.r.t. the pre-softmax logits, `(pred − y)/N`.
    pub grad_logits: Tensor,
}

/// Mean cross-entropy of softmax scores against one-hot labels.
pub fn cross_entropy(pred: &Tensor, labels: &Tensor) -> Result<CrossEntropy> {
    pred.ensure_matrix("cross entropy scores")?;
    pred.ensure_same_shape(labels, "cross entropy scores vs labels")?;
    for r in 0..labels.rows() {
        let row = labels.row_slice(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(MudaError::Validation(format!("label row {r} is not one-hot")));
        }
    }
    let n = pred.rows() as f64;
    let loss = -pred
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(_, &y)| y == 1.0)
        .map(|(&p, _)| p.clamp(PROB_FLOOR, 1.0).ln())
        .sum::<f64>()
        / n;
    let grad_logits = pred.zip_map(labels, |p, y| (p - y) / n)?;
    Ok(CrossEntropy { loss, grad_logits })
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), num_classes]);
    if labels.is_empty() {
        return Err(MudaError::Validation("no labels to encode".into()));
    }
    for (r, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(MudaError::Validation(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        t.row_slice_mut(r)[l] = 1.0;
    }
    Ok(t)
}
