//! Listwise softmax cross-entropy over one query group.
//!
//! For task t over a group's items: `L_t = -sum_i y_i * log softmax(s)_i`,
//! computed with max-subtracted log-softmax. The multi-task objective is
//! the plain unweighted sum of per-task losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Numeric listwise loss for one task over one group. Groups with zero
/// positive labels contribute exactly 0 (dense auxiliary labels are not
/// guaranteed in synthetic data).
pub fn listwise_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "listwise_loss: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().all(|&y| y == 0) {
        return Ok(0.0);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
    let mut loss = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        if y != 0 {
            loss -= s - lse;
        }
    }
    Ok(loss)
}

/// Unweighted sum over tasks.
pub fn total_loss(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::contract("total_loss over zero tasks"));
    }
    Ok(per_task.iter().sum())
}

/// Graph version for training: `scores` is `[1 x n]`, labels are 0/1.
/// Returns a scalar loss node (zero-positive groups yield a constant 0).
pub fn listwise_loss_graph(g: &mut Graph, scores: Var, labels: &[u8]) -> Result<Var> {
    let n = g.value(scores).numel();
    if n != labels.len() {
        return Err(Error::contract(format!(
            "listwise_loss: {n} scores vs {} labels",
            labels.len()
        )));
    }
    if labels.iter().all(|&y| y == 0) {
        return Ok(g.constant(crate::tensor::Tensor::scalar(0.0)));
    }
    let ls = g.log_softmax_rows(scores)?;
    let y = g.constant(crate::tensor::Tensor::row(
        labels.iter().map(|&y| y as f64).collect(),
    ));
    let picked = g.mul(ls, y)?;
    let s = g.sum_all(picked);
    Ok(g.scale_const(s, -1.0))
}
