//! Evaluation metrics: balanced accuracy, normalized reconstruction error,
//! and a k-nearest-neighbour mutual-information estimate.
//!
//! The MI estimator is the digamma-based k-NN form with max-norm joint
//! distances and strict marginal counts. Each coordinate is rank-transformed
//! (average ranks, scaled into (0,1)) before the neighbour search, which
//! makes the estimate exactly invariant under strictly monotone
//! coordinate-wise transforms while leaving its value on continuous data
//! unchanged up to estimator noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::digamma;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("class {0} absent from labels; balanced accuracy undefined")]
    ClassAbsent(u8),
    #[error("reference sequences are all zero; normalized error undefined")]
    AllZeroReference,
    #[error("predictions and labels must both be binary")]
    NonBinary,
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("need more samples than neighbours: n = {n}, k = {k}")]
    TooFewSamples { n: usize, k: usize },
    #[error("duplicate joint points (e.g. samples {i} and {j}); add jitter to discrete coordinates")]
    DuplicatePoints { i: usize, j: usize },
}

/// Fractions of pooled samples per (true class, predicted class) cell.
/// Class 1 is label `1`, class 2 is label `0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionMatrix {
    pub c11: f64,
    pub c12: f64,
    pub c21: f64,
    pub c22: f64,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        predictions: &Tensor,
        labels: &Tensor,
    ) -> Result<Self, MetricsError> {
        if predictions.shape() != labels.shape() {
            return Err(MetricsError::Shape {
                lhs: predictions.shape().to_vec(),
                rhs: labels.shape().to_vec(),
            });
        }
        let mut counts = [0usize; 4]; // [11, 12, 21, 22]
        for (&p, &l) in predictions.values().iter().zip(labels.values()) {
            if (p != 0.0 && p != 1.0) || (l != 0.0 && l != 1.0) {
                return Err(MetricsError::NonBinary);
            }
            match (l == 1.0, p == 1.0) {
                (true, true) => counts[0] += 1,
                (true, false) => counts[1] += 1,
                (false, true) => counts[2] += 1,
                (false, false) => counts[3] += 1,
            }
        }
        if counts[0] + counts[1] == 0 {
            return Err(MetricsError::ClassAbsent(1));
        }
        if counts[2] + counts[3] == 0 {
            return Err(MetricsError::ClassAbsent(0));
        }
        let total = predictions.numel() as f64;
        Ok(Self {
            c11: counts[0] as f64 / total,
            c12: counts[1] as f64 / total,
            c21: counts[2] as f64 / total,
            c22: counts[3] as f64 / total,
        })
    }

    /// Mean of the two per-class recalls.
    pub fn balanced_accuracy(&self) -> f64 {
        0.5 * (self.c11 / (self.c11 + self.c12) + self.c22 / (self.c22 + self.c21))
    }
}

/// Balanced accuracy over all pooled steps of `[N x T]` binary arrays.
pub fn balanced_accuracy(predictions: &Tensor, labels: &Tensor) -> Result<f64, MetricsError> {
    Ok(ConfusionMatrix::from_predictions(predictions, labels)?.balanced_accuracy())
}

/// Normalized reconstruction error: the ratio of the summed per-sequence
/// euclidean error norms to the summed reference norms.
pub fn ne2(y: &Tensor, y_hat: &Tensor) -> Result<f64, MetricsError> {
    if y.shape() != y_hat.shape() {
        return Err(MetricsError::Shape {
            lhs: y.shape().to_vec(),
            rhs: y_hat.shape().to_vec(),
        });
    }
    let t_len = y.cols();
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..y.rows() {
        let ys = &y.values()[r * t_len..(r + 1) * t_len];
        let yh = &y_hat.values()[r * t_len..(r + 1) * t_len];
        num += ys
            .iter()
            .zip(yh)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        den += ys.iter().map(|a| a * a).sum::<f64>().sqrt();
    }
    if den == 0.0 {
        return Err(MetricsError::AllZeroReference);
    }
    Ok(num / den)
}

/// Average ranks per coordinate, scaled into (0,1). Ties share their mean
/// rank, so any strictly monotone transform of a coordinate leaves the
/// output unchanged (up to rank reversal, which preserves distances).
fn rank_transform(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples.len();
    let dims = samples[0].len();
    let mut out = vec![vec![0.0; dims]; n];
    let mut idx: Vec<usize> = (0..n).collect();
    for d in 0..dims {
        idx.sort_by(|&a, &b| samples[a][d].partial_cmp(&samples[b][d]).unwrap());
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && samples[idx[j + 1]][d] == samples[idx[i]][d] {
                j += 1;
            }
            let avg_rank = (i + j) as f64 / 2.0 + 1.0;
            for &s in &idx[i..=j] {
                out[s][d] = avg_rank / (n as f64 + 1.0);
            }
            i = j + 1;
        }
    }
    out
}

fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// k-NN mutual information estimate between paired samples, in nats,
/// clamped below at zero:
/// `psi(k) + psi(N) - < psi(n_x + 1) + psi(n_z + 1) >`,
/// with the k-th-neighbour radius taken in max-norm on the joint space and
/// the marginal counts strictly inside that radius.
pub fn ksg_mi(x: &[Vec<f64>], z: &[Vec<f64>], k: usize) -> Result<f64, MetricsError> {
    let n = x.len();
    assert_eq!(n, z.len(), "paired samples required");
    if k == 0 || n <= k {
        return Err(MetricsError::TooFewSamples { n, k });
    }
    let xr = rank_transform(x);
    let zr = rank_transform(z);

    let mut dx = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut joint = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut psi_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            dx[j] = max_norm(&xr[i], &xr[j]);
            dz[j] = max_norm(&zr[i], &zr[j]);
            joint[j] = dx[j].max(dz[j]);
        }
        joint[i] = f64::INFINITY;
        if let Some(j) = joint.iter().position(|&d| d == 0.0) {
            return Err(MetricsError::DuplicatePoints { i, j });
        }
        scratch.copy_from_slice(&joint);
        let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let eps = *kth;
        // counts include the self-distance 0, subtract it
        let n_x = dx.iter().filter(|&&d| d < eps).count() - 1;
        let n_z = dz.iter().filter(|&&d| d < eps).count() - 1;
        psi_sum += digamma((n_x + 1) as f64) + digamma((n_z + 1) as f64);
    }
    let mi = digamma(k as f64) + digamma(n as f64) - psi_sum / n as f64;
    Ok(mi.max(0.0))
}

const LABEL_JITTER: f64 = 1e-6;

/// Mutual information between binary label sequences and released sequences,
/// treating each pair of rows as one point in the product space. The
/// discrete label coordinates receive `Uniform(0, 1e-6)` jitter and both
/// spaces are standardized per coordinate before estimation; `k = 4`.
pub fn leakage_estimate(
    x_seqs: &Tensor,
    z_seqs: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<f64, MetricsError> {
    leakage_estimate_k(x_seqs, z_seqs, 4, rng)
}

/// [`leakage_estimate`] with an explicit neighbour count.
pub fn leakage_estimate_k(
    x_seqs: &Tensor,
    z_seqs: &Tensor,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, MetricsError> {
    if x_seqs.shape() != z_seqs.shape() {
        return Err(MetricsError::Shape {
            lhs: x_seqs.shape().to_vec(),
            rhs: z_seqs.shape().to_vec(),
        });
    }
    let (n, t_len) = (x_seqs.rows(), x_seqs.cols());
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..t_len)
                .map(|t| x_seqs.get2(r, t) + rng.gen::<f64>() * LABEL_JITTER)
                .collect()
        })
        .collect();
    let mut z: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..t_len).map(|t| z_seqs.get2(r, t)).collect())
        .collect();
    standardize_columns(&mut x);
    standardize_columns(&mut z);
    ksg_mi(&x, &z, k)
}

fn standardize_columns(samples: &mut [Vec<f64>]) {
    let n = samples.len();
    let dims = samples[0].len();
    for d in 0..dims {
        let mean = samples.iter().map(|s| s[d]).sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s[d] - mean) * (s[d] - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std > 0.0 {
            for s in samples.iter_mut() {
                s[d] = (s[d] - mean) / std;
            }
        } else {
            for s in samples.iter_mut() {
                s[d] = 0.0;
            }
        }
    }
}
