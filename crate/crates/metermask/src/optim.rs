//! RMSprop parameter updates and ridge regularization.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Tensor, TensorError};

/// Per-parameter RMSprop state: a running average of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    s: Vec<f64>,
    pub rho: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
}

/// Paper-silent optimizer constants; standard values for this optimizer family.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

impl RmspropState {
    pub fn new(numel: usize) -> Self {
        Self::with_config(numel, DEFAULT_LEARNING_RATE, DEFAULT_RHO, DEFAULT_EPSILON)
    }

    pub fn with_config(numel: usize, learning_rate: f64, rho: f64, epsilon: f64) -> Self {
        assert!(rho > 0.0 && rho < 1.0, "rho must lie in (0,1)");
        assert!(learning_rate > 0.0 && epsilon > 0.0);
        Self {
            s: vec![0.0; numel],
            rho,
            learning_rate,
            epsilon,
        }
    }

    /// Running squared-gradient average; non-negative elementwise.
    pub fn sq_avg(&self) -> &[f64] {
        &self.s
    }
}

/// One RMSprop step:
/// `s <- rho*s + (1-rho)*g^2`, `p <- p - lr * g / (sqrt(s) + eps)`.
///
/// The gradient buffer is left untouched; callers zero it between steps.
pub fn rmsprop_step(param: &mut Tensor, state: &mut RmspropState) -> Result<(), TensorError> {
    let n = param.numel();
    assert_eq!(state.s.len(), n, "optimizer state shape mismatch");
    let (rho, lr, eps) = (state.rho, state.learning_rate, state.epsilon);
    let grad = param.grad().ok_or(TensorError::MissingGrad)?.to_vec();
    for ((p, s), g) in param
        .values_mut()
        .iter_mut()
        .zip(state.s.iter_mut())
        .zip(&grad)
    {
        *s = rho * *s + (1.0 - rho) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
    Ok(())
}

/// Ridge penalty as a graph node:
/// `beta * sum_i ||param_i||^2 / (2 * N_total)` with `N_total` the total
/// number of scalar parameters, so the per-weight gradient is
/// `beta * w / N_total` regardless of network size.
pub fn l2_penalty(g: &mut Graph, params: &[NodeId], beta: f64) -> NodeId {
    assert!(beta >= 0.0, "beta must be non-negative");
    let n_total: usize = params.iter().map(|&p| g.value(p).numel()).sum();
    let mut acc: Option<NodeId> = None;
    for &p in params {
        let sq = g.square(p);
        let s = g.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s).expect("scalar add"),
        });
    }
    match acc {
        None => g.constant_owned(Tensor::scalar(0.0)),
        Some(a) => g.mul_scalar(a, beta / (2.0 * n_total as f64)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad();
        let mut st = RmspropState::with_config(2, 0.01, 0.9, 1e-8);
        st.s = vec![0.5, 0.25];
        rmsprop_step(&mut p, &mut st).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
        // s decays by rho
        assert!((st.s[0] - 0.45).abs() < 1e-15);
        assert!((st.s[1] - 0.225).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_first_step() {
        // fresh state, g=1, lr=0.01, rho=0.9, eps=1e-8:
        // s = 0.1, delta = -0.01/(sqrt(0.1)+1e-8) ~= -0.0316228
        let mut p = Tensor::scalar(0.0).with_grad();
        p.accumulate_grad(&[1.0]);
        let mut st = RmspropState::with_config(1, 0.01, 0.9, 1e-8);
        rmsprop_step(&mut p, &mut st).unwrap();
        assert!((st.s[0] - 0.1).abs() < 1e-15);
        assert!((p.values()[0] - (-0.031622776)).abs() < 1e-6);
    }

    #[test]
    fn hand_evaluated_second_step() {
        // two identical steps g=1: s2 = 0.9*0.1 + 0.1 = 0.19,
        // delta2 ~= -0.01/sqrt(0.19) ~= -0.022942
        let mut p = Tensor::scalar(0.0).with_grad();
        p.accumulate_grad(&[1.0]);
        let mut st = RmspropState::with_config(1, 0.01, 0.9, 1e-8);
        rmsprop_step(&mut p, &mut st).unwrap();
        let after_first = p.values()[0];
        rmsprop_step(&mut p, &mut st).unwrap();
        assert!((st.s[0] - 0.19).abs() < 1e-15);
        let delta2 = p.values()[0] - after_first;
        assert!((delta2 - (-0.022941573)).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::scalar(0.0);
        let mut st = RmspropState::new(1);
        assert!(matches!(
            rmsprop_step(&mut p, &mut st),
            Err(TensorError::MissingGrad)
        ));
    }

    #[test]
    fn sq_avg_stays_non_negative() {
        let mut p = Tensor::scalar(0.3).with_grad();
        let mut st = RmspropState::new(1);
        let grads = [3.0, -5.0, 0.0, 1e-9, -7.3, 100.0];
        for g in grads {
            p.zero_grad();
            p.accumulate_grad(&[g]);
            rmsprop_step(&mut p, &mut st).unwrap();
            assert!(st.s[0] >= 0.0);
        }
    }

    #[test]
    fn l2_penalty_hand_case() {
        // single param [2,-2], beta=1.5 -> 1.5*8/(2*2) = 3.0
        let mut g = Graph::new();
        let p = g.leaf(&Tensor::new(vec![2], vec![2.0, -2.0]).unwrap());
        let pen = l2_penalty(&mut g, &[p], 1.5);
        assert!((g.value(pen).values()[0] - 3.0).abs() < 1e-12);
        // gradient is beta*w/N = 1.5*2/2 = 1.5
        g.backward(pen).unwrap();
        assert!((g.adjoint(p).unwrap()[0] - 1.5).abs() < 1e-12);
        assert!((g.adjoint(p).unwrap()[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn l2_penalty_zero_beta() {
        let mut g = Graph::new();
        let p = g.leaf(&Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let pen = l2_penalty(&mut g, &[p], 0.0);
        assert_eq!(g.value(pen).values()[0], 0.0);
    }
}
