//! Trade-off evaluation: release test data through a trained sanitizer or a
//! baseline, train the post-hoc attacker (and, for baselines, a fresh
//! utility network), and measure reconstruction error, attacker balanced
//! accuracy, released-sample rate, and estimated leakage.
//!
//! Reconstruction error and leakage are reported in original units: released
//! sequences keep zeros at suppressed slots and carry watts at released
//! slots, which is exactly what a utility provider would receive. The
//! networks themselves always consume the standardized encoding (zeros at
//! suppressed slots, standardized values elsewhere).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{random_downsample, uniform_downsample, BaselineError};
use crate::data::{NormStats, Split, WindowedDataset};
use crate::lstm::ModelParams;
use crate::mechanism::{
    hard_threshold, released_rate, soft_nonzero_threshold, stochastic_release, MechanismError,
    ReleaseMode,
};
use crate::metrics::{balanced_accuracy, leakage_estimate, ne2, MetricsError};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::{
    predict_binary, reconstruct, releaser_head_output, train, train_attacker, train_utility_on,
    SanitizerMode, SupervisedConfig, TrainedSystem, TrainerConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("dataset is not normalized; run normalize first")]
    NotNormalized,
    #[error("split {0} is empty")]
    EmptySplit(Split),
}

/// Released data for one split, in both encodings.
#[derive(Debug, Clone)]
pub struct ReleasedSplit {
    pub z_norm: Tensor,
    pub z_raw: Tensor,
    pub x: Tensor,
    pub y_norm: Tensor,
    pub y_raw: Tensor,
    /// Average released samples per sequence.
    pub rate: f64,
}

/// Releases for the three splits of a dataset.
#[derive(Debug, Clone)]
pub struct ReleasedDataset {
    pub train: ReleasedSplit,
    pub validation: ReleasedSplit,
    pub test: ReleasedSplit,
}

impl ReleasedDataset {
    fn from_fn(
        dataset: &WindowedDataset,
        mut f: impl FnMut(Split, &Tensor, &Tensor) -> Result<ReleasedSplit, EvalError>,
    ) -> Result<Self, EvalError> {
        let mut parts = Vec::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let (y, x) = dataset.subset(split);
            if y.rows() == 0 {
                return Err(EvalError::EmptySplit(split));
            }
            parts.push(f(split, &y, &x)?);
        }
        let mut it = parts.into_iter();
        Ok(Self {
            train: it.next().unwrap(),
            validation: it.next().unwrap(),
            test: it.next().unwrap(),
        })
    }
}

fn norm_stats(dataset: &WindowedDataset) -> Result<NormStats, EvalError> {
    dataset.norm.ok_or(EvalError::NotNormalized)
}

/// Test-time release through a trained sanitizer. The smart modes threshold
/// the learned soft mask (`Hard` or `Multiplicative`, or `Stochastic`
/// sampling); the additive sanitizer adds its perturbation. Fresh seeded
/// noise drives the releaser.
pub fn release_system(
    system: &TrainedSystem,
    dataset: &WindowedDataset,
    release: ReleaseMode,
    tau: f64,
    seed: u64,
) -> Result<ReleasedDataset, EvalError> {
    let stats = norm_stats(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ReleasedDataset::from_fn(dataset, |_, y_norm, x| {
        let head = releaser_head_output(
            &system.releaser,
            x,
            y_norm,
            system.config.noise_dim,
            &mut rng,
        )?;
        let y_raw = stats.denormalize(y_norm);
        if system.config.mode == SanitizerMode::Additive {
            let z_values = y_norm
                .values()
                .iter()
                .zip(head.values())
                .map(|(y, n)| y + n)
                .collect();
            let z_norm = Tensor::new(y_norm.shape().to_vec(), z_values).expect("shape");
            let z_raw = stats.denormalize(&z_norm);
            return Ok(ReleasedSplit {
                z_raw,
                x: x.clone(),
                y_raw,
                y_norm: y_norm.clone(),
                z_norm,
                rate: y_norm.cols() as f64,
            });
        }
        let out = match release {
            ReleaseMode::Hard | ReleaseMode::SoftTrain => hard_threshold(y_norm, &head, tau)?,
            ReleaseMode::Multiplicative => soft_nonzero_threshold(y_norm, &head, tau)?,
            ReleaseMode::Stochastic => stochastic_release(y_norm, &head, &mut rng)?,
        };
        let z_raw_values = y_raw
            .values()
            .iter()
            .zip(out.mask.values())
            .map(|(y, m)| y * m)
            .collect();
        Ok(ReleasedSplit {
            rate: released_rate(&out.mask),
            z_norm: out.z,
            z_raw: Tensor::new(y_raw.shape().to_vec(), z_raw_values).expect("shape"),
            x: x.clone(),
            y_norm: y_norm.clone(),
            y_raw,
        })
    })
}

/// Which baseline produces the release.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// FIR-filtered decimation by `d`.
    Uniform { d: usize },
    /// Random slot retention at `rate`.
    Random { rate: f64 },
}

/// Release raw consumption through a baseline, independent of any network.
pub fn release_baseline(
    dataset: &WindowedDataset,
    baseline: Baseline,
    seed: u64,
) -> Result<ReleasedDataset, EvalError> {
    let stats = norm_stats(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ReleasedDataset::from_fn(dataset, |_, y_norm, x| {
        let y_raw = stats.denormalize(y_norm);
        let t_len = y_raw.cols();
        let mut z_raw = Vec::with_capacity(y_raw.numel());
        for r in 0..y_raw.rows() {
            let row = &y_raw.values()[r * t_len..(r + 1) * t_len];
            let zr = match baseline {
                Baseline::Uniform { d } => uniform_downsample(row, d)?,
                Baseline::Random { rate } => random_downsample(row, rate, &mut rng)?,
            };
            z_raw.extend(zr);
        }
        // structural kept-slot mask; zero slots are suppressed by design
        let kept: Vec<bool> = match baseline {
            Baseline::Uniform { d } => (0..y_raw.numel())
                .map(|i| (i % t_len) % d == 0)
                .collect(),
            Baseline::Random { .. } => z_raw.iter().map(|&v| v != 0.0).collect(),
        };
        let z_norm = Tensor::new(
            y_raw.shape().to_vec(),
            z_raw
                .iter()
                .zip(&kept)
                .map(|(&v, &k)| if k { stats.normalize_value(v) } else { 0.0 })
                .collect(),
        )
        .expect("shape");
        let rate = kept.iter().filter(|&&k| k).count() as f64 / y_raw.rows() as f64;
        Ok(ReleasedSplit {
            z_norm,
            z_raw: Tensor::new(y_raw.shape().to_vec(), z_raw).expect("shape"),
            x: x.clone(),
            y_norm: y_norm.clone(),
            y_raw,
            rate,
        })
    })
}

/// Where the reconstruction network comes from.
pub enum UtilitySource<'a> {
    /// Use the sanitizer's jointly trained utility network.
    Trained(&'a ModelParams),
    /// Train a fresh utility network on the released training split.
    TrainFresh,
    /// The released sequence is itself the reconstruction (additive mode).
    Identity,
}

/// The four evaluation metrics for one released dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub ne2: f64,
    pub balanced_accuracy: f64,
    pub avg_samples_per_day: f64,
    pub ksg_mi_nats: f64,
    /// Per-step mean squared reconstruction error in original units.
    pub achieved_mse: f64,
}

/// Train the attacker (and utility where required) on the released training
/// data and measure everything on the released test data.
pub fn evaluate_released(
    dataset: &WindowedDataset,
    released: &ReleasedDataset,
    utility: UtilitySource<'_>,
    trainer_cfg: &TrainerConfig,
    supervised: &SupervisedConfig,
    eval_seed: u64,
) -> Result<EvalOutcome, EvalError> {
    let stats = norm_stats(dataset)?;
    let y_hat_norm = match utility {
        UtilitySource::Identity => released.test.z_norm.clone(),
        UtilitySource::Trained(params) => reconstruct(params, &released.test.z_norm)?,
        UtilitySource::TrainFresh => {
            let fresh = train_utility_on(
                &released.train.z_norm,
                &released.train.y_norm,
                &released.validation.z_norm,
                &released.validation.y_norm,
                &trainer_cfg.utility,
                supervised,
            )?;
            reconstruct(&fresh, &released.test.z_norm)?
        }
    };
    let y_hat_raw = stats.denormalize(&y_hat_norm);
    let ne2_value = ne2(&released.test.y_raw, &y_hat_raw)?;
    let achieved_mse = crate::losses::utility_loss(&released.test.y_raw, &y_hat_raw)?;

    let attacker = train_attacker(
        &released.train.z_norm,
        &released.train.x,
        &released.validation.z_norm,
        &released.validation.x,
        &trainer_cfg.attacker,
        supervised,
    )?;
    let predictions = predict_binary(&attacker, &released.test.z_norm)?;
    let ba = balanced_accuracy(&predictions, &released.test.x)?;

    let mut mi_rng = ChaCha8Rng::seed_from_u64(eval_seed ^ 0xA5A5_5A5A_1234_5678);
    let mi = leakage_estimate(&released.test.x, &released.test.z_raw, &mut mi_rng)?;

    Ok(EvalOutcome {
        ne2: ne2_value,
        balanced_accuracy: ba,
        avg_samples_per_day: released.test.rate,
        ksg_mi_nats: mi,
        achieved_mse,
    })
}

/// One sweep result row.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    /// Trade-off weight for the learned modes; NaN for baselines.
    pub lambda: f64,
    pub ne2: f64,
    pub balanced_accuracy: f64,
    pub avg_samples_per_day: f64,
    pub ksg_mi_nats: f64,
    pub achieved_mse: f64,
    pub mode: String,
    pub seed: u64,
    pub status: String,
    /// Sweep parameter: lambda, the decimation factor, or the random rate.
    pub param: f64,
}

impl TradeoffPoint {
    fn failed(mode: String, lambda: f64, param: f64, seed: u64, err: &EvalError) -> Self {
        Self {
            lambda,
            ne2: f64::NAN,
            balanced_accuracy: f64::NAN,
            avg_samples_per_day: f64::NAN,
            ksg_mi_nats: f64::NAN,
            achieved_mse: f64::NAN,
            mode,
            seed,
            status: format!("failed: {}", err.to_string().replace(',', ";")),
            param,
        }
    }

    fn ok(mode: String, lambda: f64, param: f64, seed: u64, o: &EvalOutcome) -> Self {
        Self {
            lambda,
            ne2: o.ne2,
            balanced_accuracy: o.balanced_accuracy,
            avg_samples_per_day: o.avg_samples_per_day,
            ksg_mi_nats: o.ksg_mi_nats,
            achieved_mse: o.achieved_mse,
            mode,
            seed,
            status: "ok".into(),
            param,
        }
    }
}

/// Test-time release mode implied by a sanitizer variant.
pub fn release_mode_for(mode: SanitizerMode) -> ReleaseMode {
    match mode {
        SanitizerMode::Smart => ReleaseMode::Hard,
        SanitizerMode::SmartMultiplicative => ReleaseMode::Multiplicative,
        SanitizerMode::Additive => ReleaseMode::Hard, // unused; additive bypasses the mask
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub trainer: TrainerConfig,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Decimation factors for the uniform baseline rows.
    pub uniform_factors: Vec<usize>,
    /// Retention rates for the random baseline rows.
    pub random_rates: Vec<f64>,
    /// Random baseline repetitions averaged into each row.
    pub random_repeats: usize,
    pub supervised: SupervisedConfig,
    pub eval_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerConfig::default(),
            lambdas: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            seeds: vec![1],
            uniform_factors: Vec::new(),
            random_rates: Vec::new(),
            random_repeats: 5,
            supervised: SupervisedConfig::default(),
            eval_seed: 9000,
        }
    }
}

/// Train and evaluate one learned sanitizer point.
pub fn run_smart_point(
    dataset: &WindowedDataset,
    trainer_cfg: &TrainerConfig,
    supervised: &SupervisedConfig,
    eval_seed: u64,
) -> Result<(TrainedSystem, EvalOutcome), EvalError> {
    let system = train(dataset, trainer_cfg)?;
    let released = release_system(
        &system,
        dataset,
        release_mode_for(trainer_cfg.mode),
        trainer_cfg.tau,
        eval_seed,
    )?;
    let source = match system.utility.as_ref() {
        Some(u) => UtilitySource::Trained(u),
        None => UtilitySource::Identity,
    };
    let outcome = evaluate_released(dataset, &released, source, trainer_cfg, supervised, eval_seed)?;
    Ok((system, outcome))
}

/// Evaluate one baseline configuration.
pub fn run_baseline_point(
    dataset: &WindowedDataset,
    baseline: Baseline,
    trainer_cfg: &TrainerConfig,
    supervised: &SupervisedConfig,
    eval_seed: u64,
) -> Result<EvalOutcome, EvalError> {
    let released = release_baseline(dataset, baseline, eval_seed)?;
    evaluate_released(
        dataset,
        &released,
        UtilitySource::TrainFresh,
        trainer_cfg,
        supervised,
        eval_seed,
    )
}

fn mean_outcome(outcomes: &[EvalOutcome]) -> EvalOutcome {
    let n = outcomes.len() as f64;
    EvalOutcome {
        ne2: outcomes.iter().map(|o| o.ne2).sum::<f64>() / n,
        balanced_accuracy: outcomes.iter().map(|o| o.balanced_accuracy).sum::<f64>() / n,
        avg_samples_per_day: outcomes.iter().map(|o| o.avg_samples_per_day).sum::<f64>() / n,
        ksg_mi_nats: outcomes.iter().map(|o| o.ksg_mi_nats).sum::<f64>() / n,
        achieved_mse: outcomes.iter().map(|o| o.achieved_mse).sum::<f64>() / n,
    }
}

enum Job {
    Smart { lambda: f64, seed: u64 },
    Uniform { d: usize },
    Random { rate: f64 },
}

/// Run the full trade-off sweep. Points run as isolated parallel jobs;
/// failures are flagged in the row status and do not stop the sweep. The
/// random baseline row at each rate averages `random_repeats` releases.
/// Rows come back in a deterministic order.
pub fn tradeoff_sweep(dataset: &WindowedDataset, cfg: &SweepConfig) -> Vec<TradeoffPoint> {
    let mut jobs = Vec::new();
    for &lambda in &cfg.lambdas {
        for &seed in &cfg.seeds {
            jobs.push(Job::Smart { lambda, seed });
        }
    }
    for &d in &cfg.uniform_factors {
        jobs.push(Job::Uniform { d });
    }
    for &rate in &cfg.random_rates {
        jobs.push(Job::Random { rate });
    }

    let mode_name = cfg.trainer.mode.as_str().to_string();
    let mut points: Vec<TradeoffPoint> = jobs
        .par_iter()
        .enumerate()
        .map(|(job_idx, job)| {
            let eval_seed = cfg
                .eval_seed
                .wrapping_add((job_idx as u64).wrapping_mul(0x9E37_79B9));
            match job {
                Job::Smart { lambda, seed } => {
                    let mut tc = cfg.trainer.clone();
                    tc.lambda = *lambda;
                    tc.seed = *seed;
                    match run_smart_point(dataset, &tc, &cfg.supervised, eval_seed) {
                        Ok((_, o)) => {
                            TradeoffPoint::ok(mode_name.clone(), *lambda, *lambda, *seed, &o)
                        }
                        Err(e) => {
                            TradeoffPoint::failed(mode_name.clone(), *lambda, *lambda, *seed, &e)
                        }
                    }
                }
                Job::Uniform { d } => {
                    let mode = format!("uniform-d{d}");
                    match run_baseline_point(
                        dataset,
                        Baseline::Uniform { d: *d },
                        &cfg.trainer,
                        &cfg.supervised,
                        eval_seed,
                    ) {
                        Ok(o) => TradeoffPoint::ok(mode, f64::NAN, *d as f64, cfg.eval_seed, &o),
                        Err(e) => TradeoffPoint::failed(mode, f64::NAN, *d as f64, cfg.eval_seed, &e),
                    }
                }
                Job::Random { rate } => {
                    let mode = format!("random-r{rate:.4}");
                    let mut outcomes = Vec::new();
                    for rep in 0..cfg.random_repeats {
                        match run_baseline_point(
                            dataset,
                            Baseline::Random { rate: *rate },
                            &cfg.trainer,
                            &cfg.supervised,
                            eval_seed.wrapping_add(rep as u64),
                        ) {
                            Ok(o) => outcomes.push(o),
                            Err(e) => {
                                return TradeoffPoint::failed(
                                    mode,
                                    f64::NAN,
                                    *rate,
                                    cfg.eval_seed,
                                    &e,
                                )
                            }
                        }
                    }
                    TradeoffPoint::ok(mode, f64::NAN, *rate, cfg.eval_seed, &mean_outcome(&outcomes))
                }
            }
        })
        .collect();

    points.sort_by(|a, b| {
        (mode_rank(&a.mode), a.param, a.seed)
            .partial_cmp(&(mode_rank(&b.mode), b.param, b.seed))
            .unwrap()
    });
    points
}

fn mode_rank(mode: &str) -> u8 {
    if mode.starts_with("uniform") {
        1
    } else if mode.starts_with("random") {
        2
    } else {
        0
    }
}

const RESULTS_HEADER: &str =
    "lambda,ne2,balanced_accuracy,avg_samples_per_day,ksg_mi_nats,achieved_mse,mode,seed,status";

/// Serialize sweep rows; the emitted bytes are identical for identical rows.
pub fn results_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.lambda,
            p.ne2,
            p.balanced_accuracy,
            p.avg_samples_per_day,
            p.ksg_mi_nats,
            p.achieved_mse,
            p.mode,
            p.seed,
            p.status
        ));
    }
    out
}

/// Plot-ready projections of the sweep: the trade-off curve, the released
/// rate curve, and the leakage curve, each keyed by mode and parameter.
pub fn plotdata_csvs(points: &[TradeoffPoint]) -> [(String, String); 3] {
    let ok: Vec<&TradeoffPoint> = points.iter().filter(|p| p.status == "ok").collect();
    let mut tradeoff = String::from("mode,param,ne2,balanced_accuracy\n");
    let mut rate = String::from("mode,param,ne2,avg_samples_per_day\n");
    let mut mi = String::from("mode,param,ne2,ksg_mi_nats\n");
    for p in ok {
        tradeoff.push_str(&format!(
            "{},{},{},{}\n",
            p.mode, p.param, p.ne2, p.balanced_accuracy
        ));
        rate.push_str(&format!(
            "{},{},{},{}\n",
            p.mode, p.param, p.ne2, p.avg_samples_per_day
        ));
        mi.push_str(&format!("{},{},{},{}\n", p.mode, p.param, p.ne2, p.ksg_mi_nats));
    }
    [
        ("plotdata_tradeoff.csv".into(), tradeoff),
        ("plotdata_rate.csv".into(), rate),
        ("plotdata_mi.csv".into(), mi),
    ]
}

/// Training-history CSV with the exact header
/// `iteration,L_U,L_A,L_R,entropy_sum`.
pub fn history_csv(history: &[crate::trainer::IterationRecord]) -> String {
    let mut out = String::from("iteration,L_U,L_A,L_R,entropy_sum\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.utility_loss, r.adversary_loss, r.releaser_loss, r.entropy_sum
        ));
    }
    out
}
