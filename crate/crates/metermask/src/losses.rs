//! Training losses and the directed-information surrogate.
//!
//! All entropies and cross-entropies are in nats. Probabilities are clamped
//! to `[1e-7, 1 - 1e-7]` before any logarithm, so saturated network outputs
//! never hit the log domain error.
//!
//! The graph builders are the single source of truth; the plain evaluation
//! wrappers run the same builders on a scratch graph.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Tensor, TensorError};

pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;

pub const LN_2: f64 = std::f64::consts::LN_2;

/// Per-iteration loss record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub utility: f64,
    pub adversary: f64,
    pub releaser: f64,
    pub entropy_sum: f64,
    pub lambda: f64,
    pub di_upper_bound: f64,
}

/// Mean squared reconstruction error over all `B*T` entries.
pub fn utility_loss_node(g: &mut Graph, y: NodeId, y_hat: NodeId) -> Result<NodeId, TensorError> {
    let diff = g.sub(y, y_hat)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Probability assigned to the true label at each step: `[B x T]` node built
/// from per-step binary distributions `[B x 2]` and the label matrix.
fn true_class_prob_node(
    g: &mut Graph,
    probs_steps: &[NodeId],
    labels: &Tensor,
) -> Result<NodeId, TensorError> {
    let batch = labels.rows();
    let t_len = labels.cols();
    assert_eq!(probs_steps.len(), t_len, "steps vs label columns");
    let mut per_step = Vec::with_capacity(t_len);
    for (t, &p) in probs_steps.iter().enumerate() {
        let mut x_t = Tensor::zeros(vec![batch, 1]);
        let mut not_x_t = Tensor::zeros(vec![batch, 1]);
        for b in 0..batch {
            let v = labels.get2(b, t);
            x_t.values_mut()[b] = v;
            not_x_t.values_mut()[b] = 1.0 - v;
        }
        let x_node = g.constant_owned(x_t);
        let nx_node = g.constant_owned(not_x_t);
        let p0 = g.slice_cols(p, 0, 1)?;
        let p1 = g.slice_cols(p, 1, 1)?;
        let on_true = g.mul(p1, x_node)?;
        let on_false = g.mul(p0, nx_node)?;
        per_step.push(g.add(on_true, on_false)?);
    }
    g.concat_cols(&per_step)
}

/// Cross-entropy of the per-step predictive distributions against the true
/// binary labels, averaged over batch and time.
pub fn adversary_loss_node(
    g: &mut Graph,
    probs_steps: &[NodeId],
    labels: &Tensor,
) -> Result<NodeId, TensorError> {
    let p_true = true_class_prob_node(g, probs_steps, labels)?;
    let clamped = g.clamp(p_true, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let logp = g.log(clamped)?;
    let m = g.mean(logp);
    Ok(g.mul_scalar(m, -1.0))
}

/// Shannon entropy of the per-step predictive distributions, averaged over
/// the batch and summed over time, in nats.
pub fn entropy_sum_node(g: &mut Graph, probs_steps: &[NodeId]) -> Result<NodeId, TensorError> {
    let batch = g.value(probs_steps[0]).rows();
    let mut cols = Vec::with_capacity(probs_steps.len());
    for &p in probs_steps {
        cols.push(g.slice_cols(p, 1, 1)?);
    }
    let p1 = g.concat_cols(&cols)?;
    let p = g.clamp(p1, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let log_p = g.log(p)?;
    let neg_p = g.mul_scalar(p, -1.0);
    let q = g.add_scalar(neg_p, 1.0); // 1 - p, inside (0,1) after clamping
    let log_q = g.log(q)?;
    let t1 = g.mul(p, log_p)?;
    let t2 = g.mul(q, log_q)?;
    let s = g.add(t1, t2)?;
    let total = g.sum(s);
    Ok(g.mul_scalar(total, -1.0 / batch as f64))
}

/// Releaser objective: reconstruction error minus `lambda / T` times the
/// adversary's predictive entropy sum. Minimizing it trades distortion
/// against adversary uncertainty.
pub fn releaser_loss_node(
    g: &mut Graph,
    y: NodeId,
    y_hat: NodeId,
    probs_steps: &[NodeId],
    lambda: f64,
) -> Result<NodeId, TensorError> {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let l_u = utility_loss_node(g, y, y_hat)?;
    let ent = entropy_sum_node(g, probs_steps)?;
    let t_len = probs_steps.len() as f64;
    let weighted = g.mul_scalar(ent, -lambda / t_len);
    g.add(l_u, weighted)
}

/// Upper bound on the directed information toward the adversary's estimates
/// for a binary attribute: `T ln 2 - entropy_sum`, in nats.
pub fn di_upper_bound_from_entropy(t_len: usize, entropy_sum: f64) -> f64 {
    t_len as f64 * LN_2 - entropy_sum
}

// ---- plain evaluation wrappers ----------------------------------------

fn probs_to_step_nodes(g: &mut Graph, probs: &Tensor) -> Vec<NodeId> {
    let shape = probs.shape();
    assert_eq!(shape.len(), 3, "probs must be [B x T x 2], got {shape:?}");
    assert_eq!(shape[2], 2, "binary distributions expected");
    let (batch, t_len) = (shape[0], shape[1]);
    (0..t_len)
        .map(|t| {
            let mut step = Tensor::zeros(vec![batch, 2]);
            for b in 0..batch {
                let base = (b * t_len + t) * 2;
                step.values_mut()[2 * b] = probs.values()[base];
                step.values_mut()[2 * b + 1] = probs.values()[base + 1];
            }
            g.constant_owned(step)
        })
        .collect()
}

fn check_labels(labels: &Tensor) -> Result<(), TensorError> {
    if let Some((index, &value)) = labels
        .values()
        .iter()
        .enumerate()
        .find(|(_, v)| **v != 0.0 && **v != 1.0)
    {
        return Err(TensorError::NonFinite {
            op: "labels (must be 0 or 1)",
            value,
            index,
        });
    }
    Ok(())
}

/// Mean squared error between `[B x T]` tensors.
pub fn utility_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let yn = g.constant(y);
    let yh = g.constant(y_hat);
    let l = utility_loss_node(&mut g, yn, yh)?;
    Ok(g.value(l).values()[0])
}

/// Cross-entropy of `[B x T x 2]` predictions against `[B x T]` binary labels.
pub fn adversary_loss(probs: &Tensor, labels: &Tensor) -> Result<f64, TensorError> {
    check_labels(labels)?;
    let mut g = Graph::new();
    let steps = probs_to_step_nodes(&mut g, probs);
    let l = adversary_loss_node(&mut g, &steps, labels)?;
    Ok(g.value(l).values()[0])
}

/// Batch-averaged predictive entropy summed over time, nats.
pub fn entropy_sum(probs: &Tensor) -> f64 {
    let mut g = Graph::new();
    let steps = probs_to_step_nodes(&mut g, probs);
    let l = entropy_sum_node(&mut g, &steps).expect("entropy graph");
    g.value(l).values()[0]
}

/// `T ln 2 - entropy_sum(probs)`, nats.
pub fn di_upper_bound(probs: &Tensor) -> f64 {
    let t_len = probs.shape()[1];
    di_upper_bound_from_entropy(t_len, entropy_sum(probs))
}

/// Plain evaluation of the releaser objective.
pub fn releaser_loss(
    y: &Tensor,
    y_hat: &Tensor,
    probs: &Tensor,
    lambda: f64,
) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let yn = g.constant(y);
    let yh = g.constant(y_hat);
    let steps = probs_to_step_nodes(&mut g, probs);
    let l = releaser_loss_node(&mut g, yn, yh, &steps, lambda)?;
    Ok(g.value(l).values()[0])
}
