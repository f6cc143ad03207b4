//! The release mechanism: soft masking during training, and the test-time
//! conversions of the learned soft mask into sparse released sequences.
//!
//! Every mode obeys `z = y ∘ mask` exactly. Training applies the soft mask
//! itself (so gradients are exact); at test time the soft mask is either
//! binarized (`hard`), kept where it clears a threshold (`multiplicative`,
//! i.e. down-sampling plus multiplicative distortion), or sampled per step
//! (`stochastic`), matching the definition of the mechanism as a per-step
//! chance of releasing the sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("soft mask value {value} at flat index {index} outside [0,1]")]
    MaskRange { value: f64, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a released sequence was produced from the soft mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseMode {
    /// Training mode: mask equals the soft mask itself.
    SoftTrain,
    /// 0-1 mask: release iff `q >= tau`.
    Hard,
    /// Zero / non-zero mask: keep `q` itself where `q >= tau`, else 0.
    Multiplicative,
    /// Bernoulli release with per-step probability `q`.
    Stochastic,
}

/// A released batch: soft mask `q`, the post-threshold multipliers `mask`,
/// and the released data `z = y ∘ mask`, all `[B x T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseOutput {
    pub q: Tensor,
    pub mask: Tensor,
    pub z: Tensor,
    pub mode: ReleaseMode,
}

const MASK_TOL: f64 = 1e-9;

fn check_q(y: &Tensor, q: &Tensor) -> Result<(), MechanismError> {
    if y.shape() != q.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "release",
            lhs: y.shape().to_vec(),
            rhs: q.shape().to_vec(),
        }
        .into());
    }
    if let Some((index, &value)) = q
        .values()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < -MASK_TOL || **v > 1.0 + MASK_TOL)
    {
        return Err(MechanismError::MaskRange { value, index });
    }
    Ok(())
}

fn masked(y: &Tensor, mask: Tensor, q: &Tensor, mode: ReleaseMode) -> ReleaseOutput {
    let values = y
        .values()
        .iter()
        .zip(mask.values())
        .map(|(yv, mv)| yv * mv)
        .collect();
    let z = Tensor::new(y.shape().to_vec(), values).expect("mask shape checked");
    ReleaseOutput {
        q: q.clone(),
        mask,
        z,
        mode,
    }
}

/// Training-time release: the mask is the soft mask itself.
pub fn soft_mask_apply(y: &Tensor, q: &Tensor) -> Result<ReleaseOutput, MechanismError> {
    check_q(y, q)?;
    Ok(masked(y, q.clone(), q, ReleaseMode::SoftTrain))
}

/// Graph form of [`soft_mask_apply`]: the Hadamard product node, through
/// which gradients flow into both the data path and the mask path.
pub fn soft_mask_node(g: &mut Graph, y: NodeId, q: NodeId) -> Result<NodeId, TensorError> {
    g.mul(y, q)
}

/// 0-1 thresholding of the soft mask; a tie `q == tau` releases the sample.
pub fn hard_threshold(y: &Tensor, q: &Tensor, tau: f64) -> Result<ReleaseOutput, MechanismError> {
    check_q(y, q)?;
    let mask = Tensor::new(
        q.shape().to_vec(),
        q.values().iter().map(|&v| f64::from(v >= tau)).collect(),
    )?;
    Ok(masked(y, mask, q, ReleaseMode::Hard))
}

/// Zero / non-zero thresholding: keep the soft value where it clears `tau`,
/// zero elsewhere (down-sampling plus multiplicative distortion).
pub fn soft_nonzero_threshold(
    y: &Tensor,
    q: &Tensor,
    tau: f64,
) -> Result<ReleaseOutput, MechanismError> {
    check_q(y, q)?;
    let mask = Tensor::new(
        q.shape().to_vec(),
        q.values()
            .iter()
            .map(|&v| if v >= tau { v } else { 0.0 })
            .collect(),
    )?;
    Ok(masked(y, mask, q, ReleaseMode::Multiplicative))
}

/// Per-step Bernoulli release with probability `q_t`; deterministic for a
/// given RNG state.
pub fn stochastic_release(
    y: &Tensor,
    q: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<ReleaseOutput, MechanismError> {
    check_q(y, q)?;
    let mask = Tensor::new(
        q.shape().to_vec(),
        q.values()
            .iter()
            .map(|&v| f64::from(rng.gen::<f64>() < v))
            .collect(),
    )?;
    Ok(masked(y, mask, q, ReleaseMode::Stochastic))
}

/// Average number of non-zero mask entries per sequence of a `[B x T]` mask.
pub fn released_rate(mask: &Tensor) -> f64 {
    let rows = mask.rows();
    let nonzero = mask.values().iter().filter(|&&v| v != 0.0).count();
    nonzero as f64 / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t2(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn identity_and_zero_masks() {
        let y = t2(1, 3, vec![2.0, -4.0, 7.0]);
        let ones = t2(1, 3, vec![1.0, 1.0, 1.0]);
        let zeros = t2(1, 3, vec![0.0, 0.0, 0.0]);
        assert_eq!(soft_mask_apply(&y, &ones).unwrap().z, y);
        assert!(soft_mask_apply(&y, &zeros)
            .unwrap()
            .z
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn soft_mask_hand_case() {
        let y = t2(1, 2, vec![2.0, 4.0]);
        let q = t2(1, 2, vec![0.5, 0.25]);
        let out = soft_mask_apply(&y, &q).unwrap();
        assert_eq!(out.z.values(), &[1.0, 1.0]);
        assert_eq!(out.mask, q);
    }

    #[test]
    fn out_of_range_mask_rejected() {
        let y = t2(1, 2, vec![1.0, 1.0]);
        let q = t2(1, 2, vec![0.5, 1.1]);
        assert!(matches!(
            soft_mask_apply(&y, &q),
            Err(MechanismError::MaskRange { index: 1, .. })
        ));
        // within tolerance is fine
        let q_ok = t2(1, 2, vec![0.5, 1.0 + 0.5e-9]);
        assert!(soft_mask_apply(&y, &q_ok).is_ok());
    }

    #[test]
    fn hard_threshold_cases() {
        let y = t2(1, 3, vec![10.0, 10.0, 10.0]);
        let q = t2(1, 3, vec![0.7, 0.3, 0.5]);
        let out = hard_threshold(&y, &q, 0.5).unwrap();
        assert_eq!(out.mask.values(), &[1.0, 0.0, 1.0]); // tie releases
        assert_eq!(out.z.values(), &[10.0, 0.0, 10.0]);
    }

    #[test]
    fn multiplicative_threshold_hand_case() {
        let y = t2(1, 2, vec![10.0, 10.0]);
        let q = t2(1, 2, vec![0.9, 0.2]);
        let out = soft_nonzero_threshold(&y, &q, 0.5).unwrap();
        assert_eq!(out.z.values(), &[9.0, 0.0]);
    }

    #[test]
    fn multiplicative_with_zero_tau_is_pure_soft() {
        let y = t2(1, 3, vec![1.0, 2.0, 3.0]);
        let q = t2(1, 3, vec![0.1, 0.6, 0.9]);
        let out = soft_nonzero_threshold(&y, &q, 0.0).unwrap();
        let soft = soft_mask_apply(&y, &q).unwrap();
        assert_eq!(out.z, soft.z);
    }

    #[test]
    fn saturated_mask_matches_hard() {
        let y = t2(1, 3, vec![5.0, 6.0, 7.0]);
        let q = t2(1, 3, vec![1.0, 1.0, 1.0]);
        let a = soft_nonzero_threshold(&y, &q, 0.5).unwrap();
        let b = hard_threshold(&y, &q, 0.5).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn stochastic_extremes_are_deterministic() {
        let y = t2(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = stochastic_release(&y, &t2(1, 4, vec![1.0; 4]), &mut rng).unwrap();
        assert_eq!(all.z, y);
        let none = stochastic_release(&y, &t2(1, 4, vec![0.0; 4]), &mut rng).unwrap();
        assert!(none.z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stochastic_mean_count_matches_binomial() {
        // q = 0.5, T = 24, 1e4 trials: mean released count within 12 +- 0.15
        let y = t2(1, 24, vec![1.0; 24]);
        let q = t2(1, 24, vec![0.5; 24]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut total = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            let out = stochastic_release(&y, &q, &mut rng).unwrap();
            total += out.mask.values().iter().filter(|&&m| m != 0.0).count();
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 12.0).abs() < 0.15, "mean = {mean}");
    }

    #[test]
    fn released_rate_counts_per_sequence() {
        let ones = t2(3, 24, vec![1.0; 72]);
        assert_eq!(released_rate(&ones), 24.0);
        let mut six = Tensor::zeros(vec![2, 24]);
        for r in 0..2 {
            for t in 0..6 {
                six.set2(r, 4 * t, 1.0);
            }
        }
        assert_eq!(released_rate(&six), 6.0);
    }
}
