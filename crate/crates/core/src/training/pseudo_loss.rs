//! Losses of the soft pseudo-label targets. Targets are constants: gradients
//! flow only into the detector's logits.

use crate::detector::{sigmoid, softmax, PROB_FLOOR};

/// `KL(target || p) = sum_k target_k ln(target_k / p_k)` with `0 ln 0 = 0`
/// and `p_k` floored.
pub fn loss_pseudo_class(target: &[f64], p: &[f64]) -> f64 {
    target
        .iter()
        .zip(p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * (t.ln() - q.max(PROB_FLOOR).ln()))
        .sum()
}

/// Soft-target binary cross-entropy `-[t ln p + (1 - t) ln(1 - p)]`, floored.
pub fn loss_pseudo_object(target: f64, p: f64) -> f64 {
    crate::detector::bce(target, p)
}

/// [`loss_pseudo_class`] on softmax logits and its gradient with respect to them.
pub fn loss_pseudo_class_grad(target: &[f64], logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = loss_pseudo_class(target, &p);
    let mut grad = vec![0.0; logits.len()];
    for (k, &t) in target.iter().enumerate() {
        if t > 0.0 {
            crate::detector::softmax_nll_grad(&p, k, t, &mut grad);
        }
    }
    (loss, grad)
}

/// [`loss_pseudo_object`] on a sigmoid logit and its derivative.
pub fn loss_pseudo_object_grad(target: f64, logit: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    (loss_pseudo_object(target, p), crate::detector::bce_logit_grad(target, p))
}
