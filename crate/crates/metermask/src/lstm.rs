//! Stacked LSTM networks with per-step output heads.
//!
//! Four concrete configurations are used by the sanitizer: a releaser
//! (sigmoid head emitting release probabilities), an adversary and an
//! attacker (binary softmax heads), and a utility network (linear head).
//! All state flows strictly forward in time: the output at step `t` is a
//! function of inputs `1..=t` only.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::optim::{rmsprop_step, RmspropState};
use crate::tensor::{Tensor, TensorError};

/// Output head applied to the top hidden vector at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One output in (0,1) through a logistic unit.
    SigmoidScalar,
    /// One unbounded output.
    LinearScalar,
    /// Two non-negative outputs summing to one.
    BinarySoftmax,
}

impl HeadKind {
    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::SigmoidScalar | HeadKind::LinearScalar => 1,
            HeadKind::BinarySoftmax => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmStackConfig {
    pub num_layers: usize,
    pub cells_per_layer: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub head: HeadKind,
}

impl LstmStackConfig {
    pub fn new(num_layers: usize, cells_per_layer: usize, input_dim: usize, head: HeadKind) -> Self {
        assert!(num_layers > 0 && cells_per_layer > 0 && input_dim > 0);
        Self {
            num_layers,
            cells_per_layer,
            input_dim,
            output_dim: head.output_dim(),
            head,
        }
    }

    /// Releaser preset: 4 layers x 64 cells, sigmoid head; the input at each
    /// step is (private bit, consumption, seed noise), hence `2 + noise_dim`.
    pub fn releaser(noise_dim: usize) -> Self {
        Self::new(4, 64, 2 + noise_dim, HeadKind::SigmoidScalar)
    }

    /// Adversary preset: 2 layers x 32 cells, binary softmax over the
    /// released value at each step.
    pub fn adversary() -> Self {
        Self::new(2, 32, 1, HeadKind::BinarySoftmax)
    }

    /// Utility preset: 3 layers x 48 cells, linear reconstruction head.
    pub fn utility() -> Self {
        Self::new(3, 48, 1, HeadKind::LinearScalar)
    }

    /// Attacker preset: 3 layers x 32 cells, binary softmax.
    pub fn attacker() -> Self {
        Self::new(3, 32, 1, HeadKind::BinarySoftmax)
    }

    /// Same stack with a different cell count (e.g. reduced-width runs).
    pub fn with_cells(mut self, cells: usize) -> Self {
        assert!(cells > 0);
        self.cells_per_layer = cells;
        self
    }

    /// Total number of scalar parameters implied by the shapes.
    pub fn param_count(&self) -> usize {
        let h = self.cells_per_layer;
        let mut n = 0;
        for l in 0..self.num_layers {
            let d = if l == 0 { self.input_dim } else { h };
            n += d * 4 * h + h * 4 * h + 4 * h;
        }
        n + h * self.output_dim + self.output_dim
    }
}

/// One named parameter tensor with its optimizer state.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub state: RmspropState,
}

/// All parameters of one stacked-LSTM network, in a fixed order:
/// `layer{l}/w_x`, `layer{l}/w_h`, `layer{l}/bias` for each layer, then
/// `head/w`, `head/b`. Gate blocks inside the `4H` axis are ordered
/// (input, forget, output, candidate).
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: LstmStackConfig,
    pub tensors: Vec<ParamTensor>,
}

/// Handles of one network's parameters inside a specific graph.
pub struct BoundParams {
    ids: Vec<NodeId>,
    trainable: bool,
}

impl BoundParams {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Wrap externally created node handles in parameter-binding order.
    pub fn from_ids(ids: &[NodeId]) -> Self {
        Self {
            ids: ids.to_vec(),
            trainable: true,
        }
    }
}

/// Glorot-uniform bound for a weight block of the given fan-in/fan-out.
fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], values).expect("glorot shape")
}

/// Deterministically initialize a parameter set for `config` from `seed`.
///
/// Weights are Glorot-uniform per gate block; the forget-gate bias starts at
/// 1.0, all other biases at 0.
pub fn init_params(config: &LstmStackConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.cells_per_layer;
    let mut tensors = Vec::new();
    for l in 0..config.num_layers {
        let d = if l == 0 { config.input_dim } else { h };
        let w_x = glorot(&mut rng, d, 4 * h, d, h);
        let w_h = glorot(&mut rng, h, 4 * h, h, h);
        let mut bias = Tensor::zeros(vec![4 * h]);
        bias.values_mut()[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        for (suffix, value) in [("w_x", w_x), ("w_h", w_h), ("bias", bias)] {
            tensors.push(ParamTensor {
                name: format!("layer{l}/{suffix}"),
                state: RmspropState::new(value.numel()),
                value: value.with_grad(),
            });
        }
    }
    let head_w = glorot(&mut rng, h, config.output_dim, h, config.output_dim);
    let head_b = Tensor::zeros(vec![config.output_dim]);
    tensors.push(ParamTensor {
        name: "head/w".into(),
        state: RmspropState::new(head_w.numel()),
        value: head_w.with_grad(),
    });
    tensors.push(ParamTensor {
        name: "head/b".into(),
        state: RmspropState::new(head_b.numel()),
        value: head_b.with_grad(),
    });
    ModelParams { config: config.clone(), tensors }
}

impl ModelParams {
    /// Insert every tensor into `g`; trainable networks become tracked
    /// leaves, frozen ones untracked constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(&t.value)
                } else {
                    g.constant(&t.value)
                }
            })
            .collect();
        BoundParams { ids, trainable }
    }

    /// Accumulate graph adjoints into each tensor's gradient buffer.
    pub fn harvest(&mut self, g: &Graph, bound: &BoundParams) {
        assert!(bound.trainable, "harvest from a frozen binding");
        for (t, &id) in self.tensors.iter_mut().zip(&bound.ids) {
            g.harvest_into(id, &mut t.value);
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.value.zero_grad();
        }
    }

    /// Apply one RMSprop update to every tensor from its accumulated grad.
    pub fn step(&mut self) -> Result<(), TensorError> {
        for t in &mut self.tensors {
            rmsprop_step(&mut t.value, &mut t.state)?;
        }
        Ok(())
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for t in &mut self.tensors {
            t.state.learning_rate = lr;
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.numel()).sum()
    }

    /// Order-sensitive hash of all parameter values; used to assert that
    /// frozen networks stay bit-identical through a training phase.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in &self.tensors {
            t.name.hash(&mut h);
            for v in t.value.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }
}

/// Recurrent state: one (hidden, cell) node pair per layer.
pub struct LstmState {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl LstmState {
    /// Zero state for a batch of `batch` sequences.
    pub fn zeros(g: &mut Graph, config: &LstmStackConfig, batch: usize) -> Self {
        let h = config.cells_per_layer;
        let layers = (0..config.num_layers)
            .map(|_| {
                let zh = g.constant_owned(Tensor::zeros(vec![batch, h]));
                let zc = g.constant_owned(Tensor::zeros(vec![batch, h]));
                (zh, zc)
            })
            .collect();
        Self { layers }
    }
}

/// One LSTM recurrence for a single layer:
/// `i,f,o = sigmoid(affine)`, `g = tanh(affine)`, `c' = f.c + i.g`,
/// `h' = o.tanh(c')`. Returns the new `(h, c)` nodes.
pub fn lstm_cell_step(
    g: &mut Graph,
    x: NodeId,
    state: (NodeId, NodeId),
    w_x: NodeId,
    w_h: NodeId,
    bias: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let (h_prev, c_prev) = state;
    let cells = g.value(w_h).rows();
    let xp = g.matmul(x, w_x)?;
    let hp = g.matmul(h_prev, w_h)?;
    let lin = g.add(xp, hp)?;
    let pre = g.add(lin, bias)?;
    let i_pre = g.slice_cols(pre, 0, cells)?;
    let f_pre = g.slice_cols(pre, cells, cells)?;
    let o_pre = g.slice_cols(pre, 2 * cells, cells)?;
    let g_pre = g.slice_cols(pre, 3 * cells, cells)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.tanh(g_pre);
    let fc = g.mul(f, c_prev)?;
    let ig = g.mul(i, cand)?;
    let c = g.add(fc, ig)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Run the whole stack over a sequence of per-step inputs `[B x input_dim]`,
/// returning per-step head outputs `[B x output_dim]`.
pub fn stack_forward(
    g: &mut Graph,
    bound: &BoundParams,
    config: &LstmStackConfig,
    inputs: &[NodeId],
) -> Result<Vec<NodeId>, TensorError> {
    assert!(!inputs.is_empty(), "empty input sequence");
    for &x in inputs {
        if let Some((index, &value)) = g
            .value(x)
            .values()
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(TensorError::NonFinite {
                op: "stack_forward",
                value,
                index,
            });
        }
    }
    let batch = g.value(inputs[0]).rows();
    let mut state = LstmState::zeros(g, config, batch);
    let head_w = bound.ids[bound.ids.len() - 2];
    let head_b = bound.ids[bound.ids.len() - 1];
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x_t in inputs {
        let mut x = x_t;
        for l in 0..config.num_layers {
            let w_x = bound.ids[3 * l];
            let w_h = bound.ids[3 * l + 1];
            let bias = bound.ids[3 * l + 2];
            let (h, c) = lstm_cell_step(g, x, state.layers[l], w_x, w_h, bias)?;
            state.layers[l] = (h, c);
            x = h;
        }
        let lin = g.matmul(x, head_w)?;
        let pre = g.add(lin, head_b)?;
        let out = match config.head {
            HeadKind::LinearScalar => pre,
            HeadKind::SigmoidScalar => g.sigmoid(pre),
            HeadKind::BinarySoftmax => {
                // softmax over two logits via the exact logistic identity:
                // p0 = sigmoid(l0 - l1), p1 = sigmoid(l1 - l0), p0 + p1 = 1.
                let l0 = g.slice_cols(pre, 0, 1)?;
                let l1 = g.slice_cols(pre, 1, 1)?;
                let d0 = g.sub(l0, l1)?;
                let d1 = g.sub(l1, l0)?;
                let p0 = g.sigmoid(d0);
                let p1 = g.sigmoid(d1);
                g.concat_cols(&[p0, p1])?
            }
        };
        outputs.push(out);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> LstmStackConfig {
        LstmStackConfig::new(2, 3, 2, HeadKind::BinarySoftmax)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = LstmStackConfig::releaser(8);
        let a = init_params(&cfg, 7);
        let b = init_params(&cfg, 7);
        let c = init_params(&cfg, 8);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert!(a.is_finite());
    }

    #[test]
    fn releaser_param_count_matches_shapes() {
        let cfg = LstmStackConfig::releaser(8);
        let p = init_params(&cfg, 1);
        assert_eq!(p.param_count(), cfg.param_count());
        // 4 layers x 64 cells, input 10:
        // layer0: 10*256 + 64*256 + 256; layers1-3: 64*256*2 + 256; head: 64+1
        let expected = (10 * 256 + 64 * 256 + 256) + 3 * (64 * 256 * 2 + 256) + 65;
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 3);
        let bias = &p.tensors[2].value; // layer0/bias
        assert_eq!(p.tensors[2].name, "layer0/bias");
        let h = cfg.cells_per_layer;
        assert!(bias.values()[0..h].iter().all(|&b| b == 0.0));
        assert!(bias.values()[h..2 * h].iter().all(|&b| b == 1.0));
        assert!(bias.values()[2 * h..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_params_zero_state_give_zero_hidden() {
        let cfg = LstmStackConfig::new(1, 3, 2, HeadKind::LinearScalar);
        let mut p = init_params(&cfg, 0);
        for t in &mut p.tensors {
            t.value.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant_owned(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let state = LstmState::zeros(&mut g, &cfg, 1);
        let (h, _) =
            lstm_cell_step(&mut g, x, state.layers[0], bound.ids[0], bound.ids[1], bound.ids[2])
                .unwrap();
        assert!(g.value(h).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_carry_cell_state_through() {
        // With i,f,o biased to +50 and the candidate pre-activation at 0,
        // c' ~= c and h ~= tanh(c).
        let cfg = LstmStackConfig::new(1, 1, 1, HeadKind::LinearScalar);
        let mut p = init_params(&cfg, 0);
        for t in &mut p.tensors {
            t.value.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.tensors[2].value.values_mut()[0] = 50.0; // input gate bias
        p.tensors[2].value.values_mut()[1] = 50.0; // forget gate bias
        p.tensors[2].value.values_mut()[2] = 50.0; // output gate bias
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant_owned(Tensor::matrix(1, 1, vec![0.3]).unwrap());
        let c0 = 0.8;
        let h0 = g.constant_owned(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let c0n = g.constant_owned(Tensor::matrix(1, 1, vec![c0]).unwrap());
        let (h, c) =
            lstm_cell_step(&mut g, x, (h0, c0n), bound.ids[0], bound.ids[1], bound.ids[2]).unwrap();
        assert!((g.value(c).values()[0] - c0).abs() < 1e-12);
        assert!((g.value(h).values()[0] - c0.tanh()).abs() < 1e-12);
    }

    #[test]
    fn single_cell_matches_scalar_oracle() {
        // Hand-set scalar weights; compare one step against direct scalar math.
        let cfg = LstmStackConfig::new(1, 1, 1, HeadKind::LinearScalar);
        let mut p = init_params(&cfg, 0);
        let (wi, wf, wo, wg) = (0.5, -0.3, 0.8, 1.1);
        let (ui, uf, uo, ug) = (-0.2, 0.4, 0.1, -0.7);
        let (bi, bf, bo, bg) = (0.05, 1.0, -0.15, 0.2);
        p.tensors[0].value.values_mut().copy_from_slice(&[wi, wf, wo, wg]);
        p.tensors[1].value.values_mut().copy_from_slice(&[ui, uf, uo, ug]);
        p.tensors[2].value.values_mut().copy_from_slice(&[bi, bf, bo, bg]);
        let (x, h0, c0) = (0.7, -0.4, 0.6);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(wi * x + ui * h0 + bi);
        let f = sig(wf * x + uf * h0 + bf);
        let o = sig(wo * x + uo * h0 + bo);
        let cand = (wg * x + ug * h0 + bg).tanh();
        let c_exp = f * c0 + i * cand;
        let h_exp = o * c_exp.tanh();

        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let xn = g.constant_owned(Tensor::matrix(1, 1, vec![x]).unwrap());
        let hn = g.constant_owned(Tensor::matrix(1, 1, vec![h0]).unwrap());
        let cn = g.constant_owned(Tensor::matrix(1, 1, vec![c0]).unwrap());
        let (h, c) =
            lstm_cell_step(&mut g, xn, (hn, cn), bound.ids[0], bound.ids[1], bound.ids[2]).unwrap();
        assert!((g.value(c).values()[0] - c_exp).abs() < 1e-12);
        assert!((g.value(h).values()[0] - h_exp).abs() < 1e-12);
    }

    fn forward_values(p: &ModelParams, seq: &[Tensor]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let ids: Vec<NodeId> = seq.iter().map(|t| g.constant(t)).collect();
        let outs = stack_forward(&mut g, &bound, &p.config, &ids).unwrap();
        outs.iter().map(|&o| g.value(o).values().to_vec()).collect()
    }

    #[test]
    fn outputs_are_causal() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 11);
        let t_len = 5;
        let base: Vec<Tensor> = (0..t_len)
            .map(|t| Tensor::matrix(2, 2, vec![0.1 * t as f64, -0.2, 0.3, 0.05 * t as f64]).unwrap())
            .collect();
        let out_base = forward_values(&p, &base);
        // Perturb step 3; steps 0..3 must be bit-identical.
        let mut perturbed = base.clone();
        perturbed[3] = Tensor::matrix(2, 2, vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let out_pert = forward_values(&p, &perturbed);
        for t in 0..3 {
            assert_eq!(out_base[t], out_pert[t], "step {t} changed");
        }
        assert_ne!(out_base[3], out_pert[3]);
    }

    #[test]
    fn softmax_head_rows_sum_to_one() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 5);
        let seq: Vec<Tensor> = (0..4)
            .map(|t| Tensor::matrix(3, 2, vec![0.3, -1.0, 2.0, 0.7, -0.2, 0.1 * t as f64]).unwrap())
            .collect();
        for step in forward_values(&p, &seq) {
            for row in step.chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
                assert!(row[0] > 0.0 && row[1] > 0.0);
            }
        }
    }

    #[test]
    fn sigmoid_head_stays_in_open_interval() {
        let cfg = LstmStackConfig::new(1, 4, 1, HeadKind::SigmoidScalar);
        let p = init_params(&cfg, 2);
        let seq: Vec<Tensor> = (0..6)
            .map(|t| Tensor::matrix(2, 1, vec![t as f64, -(t as f64)]).unwrap())
            .collect();
        for step in forward_values(&p, &seq) {
            for &v in &step {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn single_step_stack_equals_manual_cell_composition() {
        let cfg = LstmStackConfig::new(2, 3, 2, HeadKind::LinearScalar);
        let p = init_params(&cfg, 21);
        let x = Tensor::matrix(2, 2, vec![0.4, -0.6, 1.2, 0.0]).unwrap();

        let stack_out = forward_values(&p, std::slice::from_ref(&x));

        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let xn = g.constant(&x);
        let state = LstmState::zeros(&mut g, &cfg, 2);
        let (h0, _) =
            lstm_cell_step(&mut g, xn, state.layers[0], bound.ids[0], bound.ids[1], bound.ids[2])
                .unwrap();
        let (h1, _) =
            lstm_cell_step(&mut g, h0, state.layers[1], bound.ids[3], bound.ids[4], bound.ids[5])
                .unwrap();
        let head_w = bound.ids[6];
        let head_b = bound.ids[7];
        let lin = g.matmul(h1, head_w).unwrap();
        let out = g.add(lin, head_b).unwrap();
        assert_eq!(stack_out[0], g.value(out).values());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 1);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let bad = g.constant_owned(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            stack_forward(&mut g, &bound, &cfg, &[bad]),
            Err(TensorError::NonFinite { .. })
        ));
    }
}
