//! Alternating adversarial training of the sanitizer, plus the independent
//! attacker used for evaluation.
//!
//! Each outer iteration first takes `k` adversary steps (fresh minibatches,
//! releaser frozen), then one utility step and one releaser step on a shared
//! minibatch. Each phase updates exactly one network; the others are bound
//! into the graph as untracked constants, so they are bit-unchanged by
//! construction and gradients still flow through their operations where
//! needed. Everything is deterministic given the trainer seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Split, WindowedDataset};
use crate::graph::{Graph, NodeId};
use crate::losses::{
    adversary_loss_node, entropy_sum_node, releaser_loss_node, utility_loss_node,
};
use crate::lstm::{init_params, stack_forward, HeadKind, LstmStackConfig, ModelParams};
use crate::optim::l2_penalty;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },
    #[error("batch size {batch} exceeds population {population}")]
    BatchTooLarge { batch: usize, population: usize },
    #[error("dataset has no split tags; run split first")]
    NoSplit,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Sanitizer variants. The two smart modes share a training procedure and
/// differ only in how the learned soft mask is thresholded at test time;
/// the additive variant emits a perturbation added to the consumption
/// instead of a mask, and trains without a utility network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SanitizerMode {
    Smart,
    SmartMultiplicative,
    Additive,
}

impl SanitizerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SanitizerMode::Smart => "smart",
            SanitizerMode::SmartMultiplicative => "smart-multiplicative",
            SanitizerMode::Additive => "additive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smart" => Some(SanitizerMode::Smart),
            "smart-multiplicative" => Some(SanitizerMode::SmartMultiplicative),
            "additive" => Some(SanitizerMode::Additive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    /// Minibatch size `B`.
    pub batch_size: usize,
    /// Adversary steps `k` per outer iteration.
    pub adversary_steps: usize,
    /// Seed-noise dimension `m`.
    pub noise_dim: usize,
    /// Ridge weight on the releaser parameters.
    pub beta: f64,
    /// Privacy-utility trade-off weight.
    pub lambda: f64,
    /// Outer iterations.
    pub iterations: usize,
    pub seed: u64,
    /// Test-time threshold on the soft mask.
    pub tau: f64,
    pub mode: SanitizerMode,
    pub learning_rate: f64,
    /// Stop when validation releaser loss has not improved by more than
    /// 1e-4 for this many iterations; `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub releaser: LstmStackConfig,
    pub adversary: LstmStackConfig,
    pub utility: LstmStackConfig,
    pub attacker: LstmStackConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let noise_dim = 8;
        Self {
            batch_size: 128,
            adversary_steps: 4,
            noise_dim,
            beta: 1.5,
            lambda: 1.0,
            iterations: 3000,
            seed: 0,
            tau: 0.5,
            mode: SanitizerMode::Smart,
            learning_rate: crate::optim::DEFAULT_LEARNING_RATE,
            early_stop_patience: Some(200),
            releaser: LstmStackConfig::releaser(noise_dim),
            adversary: LstmStackConfig::adversary(),
            utility: LstmStackConfig::utility(),
            attacker: LstmStackConfig::attacker(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch size must be at least 1".into());
        }
        if self.adversary_steps == 0 {
            return Err("adversary steps must be at least 1".into());
        }
        if self.noise_dim == 0 {
            return Err("noise dimension must be at least 1".into());
        }
        if self.beta < 0.0 {
            return Err("beta must be non-negative".into());
        }
        if self.lambda < 0.0 {
            return Err("lambda must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err("tau must lie in [0, 1]".into());
        }
        if self.releaser.input_dim != 2 + self.noise_dim {
            return Err(format!(
                "releaser input dim {} does not match 2 + noise_dim {}",
                self.releaser.input_dim,
                2 + self.noise_dim
            ));
        }
        Ok(())
    }

    /// Scale all four networks to a fraction of their configured widths.
    pub fn scale_cells(mut self, num: usize, den: usize) -> Self {
        let f = |c: usize| (c * num / den).max(1);
        self.releaser = self.releaser.clone().with_cells(f(self.releaser.cells_per_layer));
        self.adversary = self.adversary.clone().with_cells(f(self.adversary.cells_per_layer));
        self.utility = self.utility.clone().with_cells(f(self.utility.cells_per_layer));
        self.attacker = self.attacker.clone().with_cells(f(self.attacker.cells_per_layer));
        self
    }

    /// Releaser architecture for the active mode: the additive variant
    /// emits an unbounded perturbation instead of a probability.
    pub fn releaser_for_mode(&self) -> LstmStackConfig {
        let mut cfg = self.releaser.clone();
        if self.mode == SanitizerMode::Additive {
            cfg.head = HeadKind::LinearScalar;
            cfg.output_dim = 1;
        }
        cfg
    }
}

/// One iteration of recorded losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub utility_loss: f64,
    pub adversary_loss: f64,
    pub releaser_loss: f64,
    pub entropy_sum: f64,
}

/// A trained sanitizer: releaser, adversary, utility (absent for the
/// additive variant), optional post-hoc attacker, and the loss history.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub releaser: ModelParams,
    pub adversary: ModelParams,
    pub utility: Option<ModelParams>,
    pub attacker: Option<ModelParams>,
    pub history: Vec<IterationRecord>,
    pub config: TrainerConfig,
}

/// One minibatch: consumption, labels, and fresh per-step seed noise.
pub struct SequenceBatch {
    pub y: Tensor,
    pub x: Tensor,
    /// Per step: `[B x m]` uniform noise in [0,1).
    pub noise: Vec<Tensor>,
}

/// Epoch-shuffled without-replacement sampler over a set of row indices.
pub struct MinibatchSampler {
    population: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl MinibatchSampler {
    pub fn new(population: Vec<usize>, batch: usize, seed: u64) -> Result<Self, TrainError> {
        if batch > population.len() {
            return Err(TrainError::BatchTooLarge {
                batch,
                population: population.len(),
            });
        }
        let mut s = Self {
            order: population.clone(),
            population,
            cursor: 0,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.copy_from_slice(&self.population);
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    /// Next `batch` indices from the current epoch shuffle; a new epoch
    /// starts (and the short remainder is dropped) when fewer remain.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }

    /// Draw a minibatch with fresh i.i.d. Uniform[0,1) seed noise.
    pub fn sample(
        &mut self,
        dataset: &WindowedDataset,
        noise_dim: usize,
    ) -> SequenceBatch {
        let indices = self.next_indices();
        let (y, x) = dataset.gather(&indices);
        let noise = fresh_noise(y.rows(), y.cols(), noise_dim, &mut self.rng);
        SequenceBatch { y, x, noise }
    }
}

pub fn fresh_noise(
    batch: usize,
    t_len: usize,
    noise_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    (0..t_len)
        .map(|_| {
            let v = (0..batch * noise_dim).map(|_| rng.gen::<f64>()).collect();
            Tensor::matrix(batch, noise_dim, v).expect("noise shape")
        })
        .collect()
}

/// Column `t` of a `[B x T]` tensor as a `[B x 1]` tensor.
fn column(t: &Tensor, col: usize) -> Tensor {
    let rows = t.rows();
    let v = (0..rows).map(|r| t.get2(r, col)).collect();
    Tensor::matrix(rows, 1, v).expect("column shape")
}

/// Releaser forward pass inside `g`: builds per-step inputs (x, y, u),
/// runs the stack, and forms the released sequence. Returns the bound
/// parameters, the per-step released values, and the `[B x T]`
/// concatenations of the released sequence and of the raw head outputs.
pub fn release_forward(
    g: &mut Graph,
    releaser: &ModelParams,
    batch: &SequenceBatch,
    mode: SanitizerMode,
    trainable: bool,
) -> Result<(crate::lstm::BoundParams, Vec<NodeId>, NodeId, NodeId), TrainError> {
    let t_len = batch.y.cols();
    let bound = releaser.bind(g, trainable);
    let mut inputs = Vec::with_capacity(t_len);
    let mut y_steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = g.constant_owned(column(&batch.x, t));
        let y_t = g.constant_owned(column(&batch.y, t));
        let u_t = g.constant(&batch.noise[t]);
        inputs.push(g.concat_cols(&[x_t, y_t, u_t])?);
        y_steps.push(y_t);
    }
    let head_out = stack_forward(g, &bound, &releaser.config, &inputs)?;
    let mut z_steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let z_t = match mode {
            SanitizerMode::Smart | SanitizerMode::SmartMultiplicative => {
                crate::mechanism::soft_mask_node(g, y_steps[t], head_out[t])?
            }
            SanitizerMode::Additive => g.add(y_steps[t], head_out[t])?,
        };
        z_steps.push(z_t);
    }
    let z_cat = g.concat_cols(&z_steps)?;
    let head_cat = g.concat_cols(&head_out)?;
    Ok((bound, z_steps, z_cat, head_cat))
}

fn check_finite(what: &str, v: f64, iteration: usize) -> Result<f64, TrainError> {
    if !v.is_finite() || v.abs() > 1e6 {
        return Err(TrainError::Diverged {
            iteration,
            what: format!("{what} = {v}"),
        });
    }
    Ok(v)
}

/// `k` adversary updates on fresh minibatches with the releaser frozen.
/// Returns the last minibatch cross-entropy.
pub fn adversary_inner_steps(
    releaser: &ModelParams,
    adversary: &mut ModelParams,
    dataset: &WindowedDataset,
    sampler: &mut MinibatchSampler,
    config: &TrainerConfig,
    iteration: usize,
) -> Result<f64, TrainError> {
    let mut last = f64::NAN;
    for _ in 0..config.adversary_steps {
        let batch = sampler.sample(dataset, config.noise_dim);
        let mut g = Graph::new();
        let (_, z_steps, _, _) = release_forward(&mut g, releaser, &batch, config.mode, false)?;
        let bound = adversary.bind(&mut g, true);
        let probs = stack_forward(&mut g, &bound, &adversary.config, &z_steps)?;
        let loss = adversary_loss_node(&mut g, &probs, &batch.x)?;
        last = check_finite("adversary loss", g.value(loss).values()[0], iteration)?;
        g.backward(loss)?;
        adversary.zero_grads();
        adversary.harvest(&g, &bound);
        adversary.step()?;
    }
    Ok(last)
}

/// One utility step and one releaser step on a shared minibatch. The utility
/// updates first on the reconstruction loss; the releaser then updates on
/// the full objective (plus ridge penalty) with utility and adversary
/// frozen. Returns `(L_U, L_R, entropy_sum)` as recorded for the history.
pub fn outer_step(
    releaser: &mut ModelParams,
    adversary: &ModelParams,
    utility: &mut Option<ModelParams>,
    dataset: &WindowedDataset,
    sampler: &mut MinibatchSampler,
    config: &TrainerConfig,
    iteration: usize,
) -> Result<(f64, f64, f64), TrainError> {
    let batch = sampler.sample(dataset, config.noise_dim);

    // utility update on the frozen releaser's output
    let l_u = if let Some(util) = utility.as_mut() {
        let mut g = Graph::new();
        let (_, z_steps, _, _) = release_forward(&mut g, releaser, &batch, config.mode, false)?;
        let bound = util.bind(&mut g, true);
        let y_hat_steps = stack_forward(&mut g, &bound, &util.config, &z_steps)?;
        let y_hat = g.concat_cols(&y_hat_steps)?;
        let y = g.constant(&batch.y);
        let loss = utility_loss_node(&mut g, y, y_hat)?;
        let value = check_finite("utility loss", g.value(loss).values()[0], iteration)?;
        g.backward(loss)?;
        util.zero_grads();
        util.harvest(&g, &bound);
        util.step()?;
        value
    } else {
        f64::NAN // additive mode: reconstruction is the released signal itself
    };

    // releaser update with everything else frozen
    let mut g = Graph::new();
    let (bound, z_steps, z_cat, _) =
        release_forward(&mut g, releaser, &batch, config.mode, true)?;
    let y_hat = match utility.as_ref() {
        Some(util) => {
            let ub = util.bind(&mut g, false);
            let steps = stack_forward(&mut g, &ub, &util.config, &z_steps)?;
            g.concat_cols(&steps)?
        }
        None => z_cat,
    };
    let ab = adversary.bind(&mut g, false);
    let probs = stack_forward(&mut g, &ab, &adversary.config, &z_steps)?;
    let y = g.constant(&batch.y);
    let l_r_node = releaser_loss_node(&mut g, y, y_hat, &probs, config.lambda)?;
    let ent_node = entropy_sum_node(&mut g, &probs)?;
    let penalty = l2_penalty(&mut g, bound.ids(), config.beta);
    let objective = g.add(l_r_node, penalty)?;
    let l_r = check_finite("releaser loss", g.value(l_r_node).values()[0], iteration)?;
    let ent = g.value(ent_node).values()[0];
    g.backward(objective)?;
    releaser.zero_grads();
    releaser.harvest(&g, &bound);
    releaser.step()?;

    let l_u = if utility.is_some() {
        l_u
    } else {
        // additive: distortion between y and z, already inside L_R
        l_r + config.lambda / batch.y.cols() as f64 * ent
    };
    Ok((l_u, l_r, ent))
}

/// Forward-only releaser objective on the validation split, used for early
/// stopping. Fresh seeded noise each call keeps it deterministic.
fn validation_releaser_loss(
    releaser: &ModelParams,
    adversary: &ModelParams,
    utility: &Option<ModelParams>,
    dataset: &WindowedDataset,
    config: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let idx = dataset.indices_of(Split::Validation);
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let (y, x) = dataset.gather(&idx);
    let noise = fresh_noise(y.rows(), y.cols(), config.noise_dim, rng);
    let batch = SequenceBatch { y, x, noise };
    let mut g = Graph::new();
    let (_, z_steps, z_cat, _) = release_forward(&mut g, releaser, &batch, config.mode, false)?;
    let y_hat = match utility.as_ref() {
        Some(util) => {
            let ub = util.bind(&mut g, false);
            let steps = stack_forward(&mut g, &ub, &util.config, &z_steps)?;
            g.concat_cols(&steps)?
        }
        None => z_cat,
    };
    let ab = adversary.bind(&mut g, false);
    let probs = stack_forward(&mut g, &ab, &adversary.config, &z_steps)?;
    let y_node = g.constant(&batch.y);
    let l_r = releaser_loss_node(&mut g, y_node, y_hat, &probs, config.lambda)?;
    Ok(g.value(l_r).values()[0])
}

fn sub_seed(master: u64, tag: u64) -> u64 {
    master ^ (tag.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const VALIDATION_EVERY: usize = 10;
const EARLY_STOP_MIN_DELTA: f64 = 1e-4;

/// Run the full alternating scheme on the training split of a normalized,
/// split dataset.
pub fn train(dataset: &WindowedDataset, config: &TrainerConfig) -> Result<TrainedSystem, TrainError> {
    config.validate().map_err(|what| TrainError::Diverged {
        iteration: 0,
        what,
    })?;
    if dataset.splits.is_none() {
        return Err(TrainError::NoSplit);
    }
    let train_idx = dataset.indices_of(Split::Train);
    let mut sampler = MinibatchSampler::new(
        train_idx,
        config.batch_size,
        sub_seed(config.seed, 1),
    )?;
    let mut releaser = init_params(&config.releaser_for_mode(), sub_seed(config.seed, 2));
    let mut adversary = init_params(&config.adversary, sub_seed(config.seed, 3));
    let mut utility = match config.mode {
        SanitizerMode::Additive => None,
        _ => Some(init_params(&config.utility, sub_seed(config.seed, 4))),
    };
    releaser.set_learning_rate(config.learning_rate);
    adversary.set_learning_rate(config.learning_rate);
    if let Some(u) = utility.as_mut() {
        u.set_learning_rate(config.learning_rate);
    }
    let mut val_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 5));

    let mut history = Vec::with_capacity(config.iterations);
    let mut best_val = f64::INFINITY;
    let mut best_iteration = 0usize;
    for iteration in 0..config.iterations {
        let l_a = adversary_inner_steps(
            &releaser,
            &mut adversary,
            dataset,
            &mut sampler,
            config,
            iteration,
        )?;
        let (l_u, l_r, ent) = outer_step(
            &mut releaser,
            &adversary,
            &mut utility,
            dataset,
            &mut sampler,
            config,
            iteration,
        )?;
        history.push(IterationRecord {
            iteration,
            utility_loss: l_u,
            adversary_loss: l_a,
            releaser_loss: l_r,
            entropy_sum: ent,
        });
        if let Some(patience) = config.early_stop_patience {
            if (iteration + 1) % VALIDATION_EVERY == 0 {
                let val = validation_releaser_loss(
                    &releaser, &adversary, &utility, dataset, config, &mut val_rng,
                )?;
                if val.is_finite() && val < best_val - EARLY_STOP_MIN_DELTA {
                    best_val = val;
                    best_iteration = iteration;
                } else if iteration - best_iteration >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainedSystem {
        releaser,
        adversary,
        utility,
        attacker: None,
        history,
        config: config.clone(),
    })
}

/// Release-time forward pass of a frozen releaser over whole datasets:
/// returns the raw head output per sequence (`q` for the smart modes, the
/// perturbation for the additive mode) as an `[N x T]` tensor, using fresh
/// seeded noise.
pub fn releaser_head_output(
    releaser: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    noise_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, TrainError> {
    let noise = fresh_noise(y.rows(), y.cols(), noise_dim, rng);
    let batch = SequenceBatch {
        y: y.clone(),
        x: x.clone(),
        noise,
    };
    let mut g = Graph::new();
    let (_, _, _, head_cat) =
        release_forward(&mut g, releaser, &batch, SanitizerMode::Smart, false)?;
    Ok(g.value(head_cat).clone())
}

/// Per-step probability of class 1 from a binary-softmax network run over
/// `[N x T]` released sequences.
pub fn forward_class1_probs(
    net: &ModelParams,
    z: &Tensor,
) -> Result<Tensor, TrainError> {
    let t_len = z.cols();
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let inputs: Vec<NodeId> = (0..t_len)
        .map(|t| g.constant_owned(column(z, t)))
        .collect();
    let probs = stack_forward(&mut g, &bound, &net.config, &inputs)?;
    let mut cols = Vec::with_capacity(t_len);
    for p in probs {
        cols.push(g.slice_cols(p, 1, 1)?);
    }
    let cat = g.concat_cols(&cols)?;
    Ok(g.value(cat).clone())
}

/// Hard binary predictions (`p1 >= 0.5`) of a classifier over sequences.
pub fn predict_binary(net: &ModelParams, z: &Tensor) -> Result<Tensor, TrainError> {
    let p = forward_class1_probs(net, z)?;
    Ok(Tensor::new(
        p.shape().to_vec(),
        p.values().iter().map(|&v| f64::from(v >= 0.5)).collect(),
    )
    .expect("same shape"))
}

/// Reconstruction of consumption from released sequences by a linear-head
/// network, `[N x T]`.
pub fn reconstruct(utility: &ModelParams, z: &Tensor) -> Result<Tensor, TrainError> {
    let t_len = z.cols();
    let mut g = Graph::new();
    let bound = utility.bind(&mut g, false);
    let inputs: Vec<NodeId> = (0..t_len)
        .map(|t| g.constant_owned(column(z, t)))
        .collect();
    let outs = stack_forward(&mut g, &bound, &utility.config, &inputs)?;
    let cat = g.concat_cols(&outs)?;
    Ok(g.value(cat).clone())
}

/// Configuration for supervised attacker (or standalone utility) training.
#[derive(Debug, Clone)]
pub struct SupervisedConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Early-stopping patience in iterations; `None` trains to the budget.
    pub patience: Option<usize>,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 1000,
            seed: 0,
            learning_rate: crate::optim::DEFAULT_LEARNING_RATE,
            patience: Some(200),
        }
    }
}

/// Train a fresh classifier on released training sequences to infer the
/// private attribute, early-stopping on validation balanced accuracy and
/// returning the best snapshot. Never touches the sanitizer.
pub fn train_attacker(
    z_train: &Tensor,
    x_train: &Tensor,
    z_val: &Tensor,
    x_val: &Tensor,
    arch: &LstmStackConfig,
    cfg: &SupervisedConfig,
) -> Result<ModelParams, TrainError> {
    let mut attacker = init_params(arch, sub_seed(cfg.seed, 11));
    attacker.set_learning_rate(cfg.learning_rate);
    let mut sampler = MinibatchSampler::new(
        (0..z_train.rows()).collect(),
        cfg.batch_size.min(z_train.rows()),
        sub_seed(cfg.seed, 12),
    )?;
    let t_len = z_train.cols();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut best_iteration = 0usize;
    for iteration in 0..cfg.iterations {
        let idx = sampler.next_indices();
        let mut g = Graph::new();
        let bound = attacker.bind(&mut g, true);
        let mut zb = Vec::with_capacity(idx.len() * t_len);
        let mut xb = Vec::with_capacity(idx.len() * t_len);
        for &i in &idx {
            zb.extend_from_slice(&z_train.values()[i * t_len..(i + 1) * t_len]);
            xb.extend_from_slice(&x_train.values()[i * t_len..(i + 1) * t_len]);
        }
        let zt = Tensor::matrix(idx.len(), t_len, zb).expect("batch shape");
        let xt = Tensor::matrix(idx.len(), t_len, xb).expect("batch shape");
        let inputs: Vec<NodeId> = (0..t_len)
            .map(|t| g.constant_owned(column(&zt, t)))
            .collect();
        let probs = stack_forward(&mut g, &bound, arch, &inputs)?;
        let loss = adversary_loss_node(&mut g, &probs, &xt)?;
        check_finite("attacker loss", g.value(loss).values()[0], iteration)?;
        g.backward(loss)?;
        attacker.zero_grads();
        attacker.harvest(&g, &bound);
        attacker.step()?;

        if let Some(patience) = cfg.patience {
            if (iteration + 1) % VALIDATION_EVERY == 0 {
                let preds = predict_binary(&attacker, z_val)?;
                // constant predictors make balanced accuracy well-defined
                // only when both classes appear; fall back to 0.5
                let ba = crate::metrics::balanced_accuracy(&preds, x_val).unwrap_or(0.5);
                let improved = best.as_ref().map_or(true, |(b, _)| ba > *b);
                if improved {
                    best = Some((ba, attacker.clone()));
                    best_iteration = iteration;
                } else if iteration - best_iteration >= patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((_, params)) => params,
        None => attacker,
    })
}

/// Train a fresh utility network on (released, original) pairs; used for
/// the non-learned baselines whose releases do not depend on it. Early
/// stops on validation reconstruction error.
pub fn train_utility_on(
    z_train: &Tensor,
    y_train: &Tensor,
    z_val: &Tensor,
    y_val: &Tensor,
    arch: &LstmStackConfig,
    cfg: &SupervisedConfig,
) -> Result<ModelParams, TrainError> {
    let mut utility = init_params(arch, sub_seed(cfg.seed, 21));
    utility.set_learning_rate(cfg.learning_rate);
    let mut sampler = MinibatchSampler::new(
        (0..z_train.rows()).collect(),
        cfg.batch_size.min(z_train.rows()),
        sub_seed(cfg.seed, 22),
    )?;
    let t_len = z_train.cols();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut best_iteration = 0usize;
    for iteration in 0..cfg.iterations {
        let idx = sampler.next_indices();
        let mut g = Graph::new();
        let bound = utility.bind(&mut g, true);
        let mut zb = Vec::with_capacity(idx.len() * t_len);
        let mut yb = Vec::with_capacity(idx.len() * t_len);
        for &i in &idx {
            zb.extend_from_slice(&z_train.values()[i * t_len..(i + 1) * t_len]);
            yb.extend_from_slice(&y_train.values()[i * t_len..(i + 1) * t_len]);
        }
        let zt = Tensor::matrix(idx.len(), t_len, zb).expect("batch shape");
        let yt = Tensor::matrix(idx.len(), t_len, yb).expect("batch shape");
        let inputs: Vec<NodeId> = (0..t_len)
            .map(|t| g.constant_owned(column(&zt, t)))
            .collect();
        let outs = stack_forward(&mut g, &bound, arch, &inputs)?;
        let y_hat = g.concat_cols(&outs)?;
        let y_node = g.constant(&yt);
        let loss = utility_loss_node(&mut g, y_node, y_hat)?;
        check_finite("utility loss", g.value(loss).values()[0], iteration)?;
        g.backward(loss)?;
        utility.zero_grads();
        utility.harvest(&g, &bound);
        utility.step()?;

        if let Some(patience) = cfg.patience {
            if (iteration + 1) % VALIDATION_EVERY == 0 {
                let y_hat_val = reconstruct(&utility, z_val)?;
                let mse = crate::losses::utility_loss(y_val, &y_hat_val)?;
                let improved = best.as_ref().map_or(true, |(b, _)| mse < *b - 1e-6);
                if improved {
                    best = Some((mse, utility.clone()));
                    best_iteration = iteration;
                } else if iteration - best_iteration >= patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((_, params)) => params,
        None => utility,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, split, synthesize_dataset};

    fn tiny_config(seed: u64) -> TrainerConfig {
        let cfg = TrainerConfig {
            batch_size: 8,
            iterations: 3,
            seed,
            early_stop_patience: None,
            ..TrainerConfig::default()
        };
        let mut cfg = cfg.scale_cells(1, 8); // 8 cells releaser, 4 adversary...
        cfg.releaser = LstmStackConfig::new(1, 6, 10, HeadKind::SigmoidScalar);
        cfg.adversary = LstmStackConfig::new(1, 4, 1, HeadKind::BinarySoftmax);
        cfg.utility = LstmStackConfig::new(1, 5, 1, HeadKind::LinearScalar);
        cfg.attacker = LstmStackConfig::new(1, 4, 1, HeadKind::BinarySoftmax);
        cfg
    }

    fn tiny_dataset(seed: u64) -> WindowedDataset {
        let mut ds = synthesize_dataset(60, seed).unwrap();
        split(&mut ds, seed);
        normalize(&mut ds).unwrap();
        ds
    }

    #[test]
    fn defaults_match_expected_architecture() {
        let cfg = TrainerConfig::default();
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.adversary_steps, 4);
        assert_eq!(cfg.noise_dim, 8);
        assert_eq!(cfg.beta, 1.5);
        assert_eq!(cfg.releaser.num_layers, 4);
        assert_eq!(cfg.releaser.cells_per_layer, 64);
        assert_eq!(cfg.adversary.num_layers, 2);
        assert_eq!(cfg.adversary.cells_per_layer, 32);
        assert_eq!(cfg.utility.num_layers, 3);
        assert_eq!(cfg.utility.cells_per_layer, 48);
        assert_eq!(cfg.attacker.num_layers, 3);
        assert_eq!(cfg.attacker.cells_per_layer, 32);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sampler_is_deterministic_and_respects_population() {
        let mut a = MinibatchSampler::new((0..20).collect(), 6, 5).unwrap();
        let mut b = MinibatchSampler::new((0..20).collect(), 6, 5).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
        assert!(matches!(
            MinibatchSampler::new((0..4).collect(), 6, 0),
            Err(TrainError::BatchTooLarge { .. })
        ));
    }

    #[test]
    fn epoch_has_no_repeats() {
        let mut s = MinibatchSampler::new((0..12).collect(), 4, 9).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..3 {
            for i in s.next_indices() {
                assert!(seen.insert(i), "index {i} repeated within epoch");
            }
        }
    }

    #[test]
    fn noise_mean_matches_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = fresh_noise(50, 20, 100, &mut rng); // 1e5 draws
        let (mut sum, mut n) = (0.0, 0usize);
        for t in noise {
            sum += t.values().iter().sum::<f64>();
            n += t.numel();
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn inner_steps_freeze_releaser_and_utility() {
        let ds = tiny_dataset(1);
        let cfg = tiny_config(1);
        let releaser = init_params(&cfg.releaser_for_mode(), 2);
        let mut adversary = init_params(&cfg.adversary, 3);
        let utility = init_params(&cfg.utility, 4);
        let mut sampler = MinibatchSampler::new(ds.indices_of(Split::Train), 8, 5).unwrap();
        let rel_sum = releaser.checksum();
        let util_sum = utility.checksum();
        let adv_sum = adversary.checksum();
        adversary_inner_steps(&releaser, &mut adversary, &ds, &mut sampler, &cfg, 0).unwrap();
        assert_eq!(releaser.checksum(), rel_sum);
        assert_eq!(utility.checksum(), util_sum);
        assert_ne!(adversary.checksum(), adv_sum);
    }

    #[test]
    fn outer_step_freezes_adversary() {
        let ds = tiny_dataset(2);
        let cfg = tiny_config(2);
        let mut releaser = init_params(&cfg.releaser_for_mode(), 2);
        let adversary = init_params(&cfg.adversary, 3);
        let mut utility = Some(init_params(&cfg.utility, 4));
        let mut sampler = MinibatchSampler::new(ds.indices_of(Split::Train), 8, 5).unwrap();
        let adv_sum = adversary.checksum();
        let rel_sum = releaser.checksum();
        let util_sum = utility.as_ref().unwrap().checksum();
        outer_step(
            &mut releaser,
            &adversary,
            &mut utility,
            &ds,
            &mut sampler,
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(adversary.checksum(), adv_sum);
        assert_ne!(releaser.checksum(), rel_sum);
        assert_ne!(utility.as_ref().unwrap().checksum(), util_sum);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = tiny_dataset(3);
        let cfg = tiny_config(7);
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.releaser.checksum(), b.releaser.checksum());
        assert_eq!(a.adversary.checksum(), b.adversary.checksum());
        assert_eq!(
            a.utility.as_ref().unwrap().checksum(),
            b.utility.as_ref().unwrap().checksum()
        );
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn history_has_one_record_per_iteration() {
        let ds = tiny_dataset(4);
        let cfg = tiny_config(8);
        let sys = train(&ds, &cfg).unwrap();
        assert_eq!(sys.history.len(), cfg.iterations);
        for (i, rec) in sys.history.iter().enumerate() {
            assert_eq!(rec.iteration, i);
            assert!(rec.utility_loss.is_finite());
            assert!(rec.adversary_loss.is_finite());
            assert!(rec.releaser_loss.is_finite());
            assert!(rec.entropy_sum.is_finite());
        }
    }

    #[test]
    fn additive_mode_trains_without_utility() {
        let ds = tiny_dataset(5);
        let mut cfg = tiny_config(9);
        cfg.mode = SanitizerMode::Additive;
        let sys = train(&ds, &cfg).unwrap();
        assert!(sys.utility.is_none());
        assert_eq!(sys.releaser.config.head, HeadKind::LinearScalar);
        assert!(sys.history.iter().all(|r| r.utility_loss.is_finite()));
    }

    #[test]
    fn attacker_training_never_mutates_inputs_nets() {
        let ds = tiny_dataset(6);
        let cfg = tiny_config(10);
        let releaser = init_params(&cfg.releaser_for_mode(), 1);
        let rel_sum = releaser.checksum();
        let (y, x) = ds.subset(Split::Train);
        let (yv, xv) = ds.subset(Split::Validation);
        let sup = SupervisedConfig {
            batch_size: 8,
            iterations: 5,
            seed: 2,
            patience: None,
            ..SupervisedConfig::default()
        };
        let attacker = train_attacker(&y, &x, &yv, &xv, &cfg.attacker, &sup).unwrap();
        assert_eq!(releaser.checksum(), rel_sum);
        assert!(attacker.is_finite());
    }

    #[test]
    fn adversary_on_suppressed_release_approaches_marginal_entropy() {
        // With z identically zero the best the adversary can do is the label
        // marginal; its cross-entropy converges toward the marginal entropy.
        let mut ds = tiny_dataset(11);
        // suppress all consumption so the releaser input is constant
        let n = ds.y.numel();
        ds.y.values_mut()[..n].iter_mut().for_each(|v| *v = 0.0);
        let (x_train, _) = {
            let (y, x) = ds.subset(Split::Train);
            (x, y)
        };
        let p1 = x_train.values().iter().sum::<f64>() / x_train.numel() as f64;
        let marginal_entropy = -(p1 * p1.ln() + (1.0 - p1) * (1.0 - p1).ln());

        let arch = LstmStackConfig::new(1, 4, 1, HeadKind::BinarySoftmax);
        let zeros_train = Tensor::zeros(vec![x_train.rows(), x_train.cols()]);
        let (_, x_val) = ds.subset(Split::Validation);
        let zeros_val = Tensor::zeros(vec![x_val.rows(), x_val.cols()]);
        let sup = SupervisedConfig {
            batch_size: 16,
            iterations: 400,
            seed: 3,
            patience: None,
            ..SupervisedConfig::default()
        };
        let net = train_attacker(&zeros_train, &x_train, &zeros_val, &x_val, &arch, &sup).unwrap();
        let probs = forward_class1_probs(&net, &zeros_train).unwrap();
        // cross-entropy of the trained net against train labels
        let mut v = Vec::new();
        for &p in probs.values() {
            v.push(1.0 - p);
            v.push(p);
        }
        let probs3 =
            Tensor::new(vec![x_train.rows(), x_train.cols(), 2], v).unwrap();
        let ce = crate::losses::adversary_loss(&probs3, &x_train).unwrap();
        assert!(
            (ce - marginal_entropy).abs() < 0.05,
            "ce {ce} vs marginal {marginal_entropy}"
        );
    }
}
