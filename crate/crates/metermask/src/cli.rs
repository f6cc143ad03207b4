//! Batch command-line interface.
//!
//! Subcommands: `train`, `sweep`, `eval`, `baseline`, `mi`, `synth-data`.
//! Every command is deterministic given its full flag set (seeds included)
//! and writes only below its `--out` directory. Exit codes: 0 success,
//! 1 usage or data error, 2 numeric divergence during training.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointNetwork};
use crate::config::ConfigFile;
use crate::data::{self, WindowedDataset};
use crate::mechanism::ReleaseMode;
use crate::sweep::{
    self, history_csv, plotdata_csvs, results_csv, EvalError, SweepConfig,
    UtilitySource,
};
use crate::trainer::{SanitizerMode, SupervisedConfig, TrainedSystem, TrainerConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "metermask",
    version,
    about = "Privacy-preserving sparse release of smart-meter load profiles"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sanitizer and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Sweep the privacy-utility trade-off over lambda values and baselines.
    Sweep(SweepArgs),
    /// Evaluate a trained checkpoint: attacker accuracy, reconstruction
    /// error, released rate, and estimated leakage on the test split.
    Eval(EvalArgs),
    /// Evaluate a non-learned down-sampling baseline.
    Baseline(BaselineArgs),
    /// Estimate the mutual information between the private labels and the
    /// (optionally sanitized) released test data.
    Mi(MiArgs),
    /// Generate a synthetic ingestion CSV.
    #[command(name = "synth-data")]
    SynthData(SynthArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Data source: `synth` or a path to an ingestion CSV (or a directory
    /// of per-household CSVs).
    #[arg(long, default_value = "synth")]
    data: String,
    /// Output directory; all files are written below it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed for data splitting, initialization, and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Days of synthetic data when `--data synth`.
    #[arg(long)]
    n_days: Option<usize>,
    /// Apply the 85:15 split within each household instead of pooled.
    #[arg(long, default_value_t = false)]
    split_per_household: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Privacy-utility trade-off weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Outer training iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Minibatch size B [default: 128].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adversary steps k per iteration [default: 4].
    #[arg(short = 'k', long)]
    adversary_steps: Option<usize>,
    /// Seed-noise dimension m [default: 8].
    #[arg(short = 'm', long)]
    noise_dim: Option<usize>,
    /// Releaser ridge regularization weight [default: 1.5].
    #[arg(long)]
    beta: Option<f64>,
    /// Test-time soft-mask threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Sanitizer variant: smart | smart-multiplicative | additive.
    #[arg(long)]
    mode: Option<String>,
    /// RMSprop learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Early-stop patience in iterations; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Scale network widths, e.g. `1/2` for half Table-width cells.
    #[arg(long)]
    scale_cells: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated training seeds (one sanitizer per lambda x seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Baselines to include: any of `uniform`, `random`.
    #[arg(long, value_delimiter = ',')]
    baselines: Vec<String>,
    /// Decimation factors for the uniform baseline.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,6,8,12")]
    uniform_factors: Vec<usize>,
    /// Retention rates for the random baseline.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.3333333333333333,0.25,0.16666666666666666,0.125,0.08333333333333333")]
    random_rates: Vec<f64>,
    /// Random-baseline repetitions averaged per row [default: 5].
    #[arg(long)]
    random_repeats: Option<usize>,
    /// Parallel jobs for sweep points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write one checkpoint per trained sweep point.
    #[arg(long, default_value_t = false)]
    checkpoints: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Iteration budget for attacker / baseline-utility training.
    #[arg(long)]
    attacker_iterations: Option<usize>,
    #[arg(long)]
    scale_cells: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Release mode: hard | multiplicative | stochastic | additive.
    #[arg(long, default_value = "hard")]
    mode: String,
    /// Soft-mask threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Seed-noise dimension m of the checkpointed releaser.
    #[arg(short = 'm', long)]
    noise_dim: Option<usize>,
    #[arg(long)]
    attacker_iterations: Option<usize>,
    #[arg(long)]
    scale_cells: Option<String>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Baseline kind: uniform | random.
    #[arg(long)]
    kind: String,
    /// Decimation factor for the uniform baseline.
    #[arg(short = 'd', long)]
    decimation: Option<usize>,
    /// Retention rate for the random baseline.
    #[arg(long)]
    rate: Option<f64>,
    /// Repetitions averaged for the random baseline [default: 5].
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    attacker_iterations: Option<usize>,
    #[arg(long)]
    scale_cells: Option<String>,
}

#[derive(Args)]
struct MiArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Optional checkpoint; without it the leakage of the raw data is
    /// estimated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Release mode when a checkpoint is given.
    #[arg(long, default_value = "hard")]
    mode: String,
    #[arg(long)]
    tau: Option<f64>,
    /// Neighbour count of the MI estimator.
    #[arg(short = 'k', long, default_value_t = 4)]
    neighbors: usize,
    #[arg(short = 'm', long)]
    noise_dim: Option<usize>,
    #[arg(long)]
    scale_cells: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of synthetic days (at least 20).
    #[arg(long)]
    n_days: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// File name below --out.
    #[arg(long, default_value = "synthetic.csv")]
    file_name: String,
    /// Readings per hour in the emitted CSV.
    #[arg(long)]
    samples_per_hour: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Top-level error of a command run.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::Diverged { .. }) => 2,
            CliError::Eval(EvalError::Train(TrainError::Diverged { .. })) => 2,
            _ => 1,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Run the CLI against the process arguments; returns the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Mi(args) => cmd_mi(args),
        Command::SynthData(args) => cmd_synth_data(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile, CliError> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => Ok(ConfigFile::load(p)?),
    }
}

fn parse_scale(s: &str) -> Result<(usize, usize), CliError> {
    let (num, den) = s
        .split_once('/')
        .ok_or_else(|| CliError::Usage(format!("--scale-cells expects `num/den`, got {s:?}")))?;
    let num = num
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad scale numerator in {s:?}")))?;
    let den = den
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad scale denominator in {s:?}")))?;
    Ok((num, den))
}

/// Layered trainer configuration: defaults, then config file, then flags.
#[allow(clippy::too_many_arguments)]
fn build_trainer_config(
    file: &ConfigFile,
    seed: Option<u64>,
    lambda: Option<f64>,
    iterations: Option<usize>,
    batch_size: Option<usize>,
    adversary_steps: Option<usize>,
    noise_dim: Option<usize>,
    beta: Option<f64>,
    tau: Option<f64>,
    mode: Option<String>,
    learning_rate: Option<f64>,
    patience: Option<usize>,
    scale_cells: Option<String>,
) -> Result<TrainerConfig, CliError> {
    let mut cfg = TrainerConfig::default();
    if let Some(v) = file.get::<usize>("batch_size", "usize")? {
        cfg.batch_size = v;
    }
    if let Some(v) = file.get::<usize>("adversary_steps", "usize")? {
        cfg.adversary_steps = v;
    }
    if let Some(v) = file.get::<usize>("noise_dim", "usize")? {
        cfg.noise_dim = v;
    }
    if let Some(v) = file.get::<f64>("beta", "f64")? {
        cfg.beta = v;
    }
    if let Some(v) = file.get::<f64>("lambda", "f64")? {
        cfg.lambda = v;
    }
    if let Some(v) = file.get::<usize>("iterations", "usize")? {
        cfg.iterations = v;
    }
    if let Some(v) = file.get::<u64>("seed", "u64")? {
        cfg.seed = v;
    }
    if let Some(v) = file.get::<f64>("tau", "f64")? {
        cfg.tau = v;
    }
    if let Some(v) = file.get::<String>("mode", "string")? {
        cfg.mode = SanitizerMode::parse(&v)
            .ok_or_else(|| CliError::Usage(format!("unknown mode {v:?}")))?;
    }
    if let Some(v) = file.get::<f64>("learning_rate", "f64")? {
        cfg.learning_rate = v;
    }
    if let Some(v) = file.get::<usize>("patience", "usize")? {
        cfg.early_stop_patience = if v == 0 { None } else { Some(v) };
    }
    let file_scale = file.get::<String>("scale_cells", "num/den")?;

    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = adversary_steps {
        cfg.adversary_steps = v;
    }
    if let Some(v) = noise_dim {
        cfg.noise_dim = v;
    }
    if let Some(v) = beta {
        cfg.beta = v;
    }
    if let Some(v) = lambda {
        cfg.lambda = v;
    }
    if let Some(v) = iterations {
        cfg.iterations = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = tau {
        cfg.tau = v;
    }
    if let Some(v) = mode {
        cfg.mode = SanitizerMode::parse(&v)
            .ok_or_else(|| CliError::Usage(format!("unknown mode {v:?}")))?;
    }
    if let Some(v) = learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = patience {
        cfg.early_stop_patience = if v == 0 { None } else { Some(v) };
    }
    // the releaser input width follows the noise dimension
    cfg.releaser = crate::lstm::LstmStackConfig::releaser(cfg.noise_dim)
        .with_cells(cfg.releaser.cells_per_layer);
    if let Some(s) = scale_cells.or(file_scale) {
        let (num, den) = parse_scale(&s)?;
        cfg = cfg.scale_cells(num, den);
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn resolve_n_days(common: &CommonArgs, file: &ConfigFile) -> Result<usize, CliError> {
    Ok(common
        .n_days
        .or(file.get::<usize>("n_days", "usize")?)
        .unwrap_or(1000))
}

fn load_dataset(common: &CommonArgs, file: &ConfigFile, seed: u64) -> Result<WindowedDataset, CliError> {
    let mut ds = if common.data == "synth" {
        let n_days = resolve_n_days(common, file)?;
        data::synthesize_dataset(n_days, seed)?
    } else {
        let path = Path::new(&common.data);
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|source| CliError::Io {
                    path: path.display().to_string(),
                    source,
                })?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Usage(format!(
                    "no .csv files in {}",
                    path.display()
                )));
            }
            let mut parts = Vec::new();
            for f in files {
                let (raw, dropped) = data::load_csv(&f)?;
                if dropped > 0 {
                    eprintln!("{}: dropped {dropped} rows with missing power", f.display());
                }
                parts.push(data::window_daily(&data::resample_hourly(&raw)?)?);
            }
            data::concat_datasets(&parts)?
        } else {
            let (raw, dropped) = data::load_csv(path)?;
            if dropped > 0 {
                eprintln!("dropped {dropped} rows with missing power");
            }
            data::window_daily(&data::resample_hourly(&raw)?)?
        }
    };
    if common.split_per_household {
        data::split_per_household(&mut ds, seed);
    } else {
        data::split(&mut ds, seed);
    }
    data::normalize(&mut ds)?;
    Ok(ds)
}

fn resolve_seed(common: &CommonArgs, file: &ConfigFile) -> Result<u64, CliError> {
    Ok(common.seed.or(file.get::<u64>("seed", "u64")?).unwrap_or(0))
}

fn system_checkpoint(system: &TrainedSystem) -> Vec<CheckpointNetwork> {
    let mut nets = vec![
        CheckpointNetwork::from_params("releaser", &system.releaser),
        CheckpointNetwork::from_params("adversary", &system.adversary),
    ];
    if let Some(u) = system.utility.as_ref() {
        nets.push(CheckpointNetwork::from_params("utility", u));
    }
    if let Some(a) = system.attacker.as_ref() {
        nets.push(CheckpointNetwork::from_params("attacker", a));
    }
    nets
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = load_config(&args.common.config)?;
    let seed = resolve_seed(&args.common, &file)?;
    let cfg = build_trainer_config(
        &file,
        Some(seed),
        args.lambda,
        args.iterations,
        args.batch_size,
        args.adversary_steps,
        args.noise_dim,
        args.beta,
        args.tau,
        args.mode,
        args.learning_rate,
        args.patience,
        args.scale_cells,
    )?;
    let dataset = load_dataset(&args.common, &file, seed)?;
    let system = crate::trainer::train(&dataset, &cfg)?;
    write_file(
        &args.common.out.join("checkpoint.bin"),
        &checkpoint::encode(&system_checkpoint(&system)),
    )?;
    write_file(
        &args.common.out.join("history.csv"),
        history_csv(&system.history).as_bytes(),
    )?;
    let last = system.history.last().expect("non-empty history");
    println!(
        "final L_U = {:.6}  L_A = {:.6}  entropy_sum = {:.6} nats ({} iterations)",
        last.utility_loss,
        last.adversary_loss,
        last.entropy_sum,
        system.history.len()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let file = load_config(&args.common.config)?;
    let seed = resolve_seed(&args.common, &file)?;
    let trainer = build_trainer_config(
        &file,
        Some(seed),
        None,
        args.iterations,
        args.batch_size,
        None,
        None,
        None,
        args.tau,
        args.mode,
        None,
        args.patience,
        args.scale_cells,
    )?;
    let lambdas = args
        .lambdas
        .or(file.get_list::<f64>("lambdas", "f64")?)
        .unwrap_or_else(|| vec![0.0, 0.5, 1.0, 2.0, 5.0]);
    if lambdas.is_empty() {
        return Err(CliError::Usage("lambda list must be non-empty".into()));
    }
    let seeds = args
        .seeds
        .or(file.get_list::<u64>("seeds", "u64")?)
        .unwrap_or_else(|| vec![seed]);
    let mut supervised = SupervisedConfig {
        seed,
        ..SupervisedConfig::default()
    };
    if let Some(v) = args
        .attacker_iterations
        .or(file.get::<usize>("attacker_iterations", "usize")?)
    {
        supervised.iterations = v;
    }
    let sweep_cfg = SweepConfig {
        trainer,
        lambdas,
        seeds,
        uniform_factors: if args.baselines.iter().any(|b| b == "uniform") {
            args.uniform_factors.clone()
        } else {
            Vec::new()
        },
        random_rates: if args.baselines.iter().any(|b| b == "random") {
            args.random_rates.clone()
        } else {
            Vec::new()
        },
        random_repeats: args
            .random_repeats
            .or(file.get::<usize>("random_repeats", "usize")?)
            .unwrap_or(5),
        supervised,
        eval_seed: seed ^ 0x5EED_CAFE,
    };
    let dataset = load_dataset(&args.common, &file, seed)?;

    let jobs = args
        .jobs
        .max(file.get::<usize>("jobs", "usize")?.unwrap_or(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let points = pool.install(|| sweep::tradeoff_sweep(&dataset, &sweep_cfg));

    write_file(
        &args.common.out.join("results.csv"),
        results_csv(&points).as_bytes(),
    )?;
    for (name, content) in plotdata_csvs(&points) {
        write_file(&args.common.out.join(name), content.as_bytes())?;
    }
    if args.checkpoints {
        for &lambda in &sweep_cfg.lambdas {
            for &s in &sweep_cfg.seeds {
                let mut tc = sweep_cfg.trainer.clone();
                tc.lambda = lambda;
                tc.seed = s;
                let system = crate::trainer::train(&dataset, &tc)?;
                let name = format!("checkpoint_lambda{lambda}_seed{s}.bin");
                write_file(
                    &args.common.out.join("checkpoints").join(name),
                    &checkpoint::encode(&system_checkpoint(&system)),
                )?;
            }
        }
    }
    let ok = points.iter().filter(|p| p.status == "ok").count();
    println!("{ok}/{} points succeeded -> {}", points.len(), args.common.out.display());
    if ok == 0 {
        return Err(CliError::Usage("every sweep point failed".into()));
    }
    Ok(())
}

fn parse_release_mode(s: &str) -> Result<ReleaseMode, CliError> {
    match s {
        "hard" => Ok(ReleaseMode::Hard),
        "multiplicative" => Ok(ReleaseMode::Multiplicative),
        "stochastic" => Ok(ReleaseMode::Stochastic),
        other => Err(CliError::Usage(format!(
            "unknown release mode {other:?} (expected hard | multiplicative | stochastic | additive)"
        ))),
    }
}

/// Rebuild a trained system from a checkpoint, validating shapes against the
/// architecture implied by the flags.
fn load_system(
    path: &Path,
    trainer: &TrainerConfig,
    additive: bool,
) -> Result<TrainedSystem, CliError> {
    let nets = checkpoint::load(path)?;
    let mut cfg = trainer.clone();
    cfg.mode = if additive {
        SanitizerMode::Additive
    } else {
        cfg.mode
    };
    let releaser =
        checkpoint::params_from_network(&cfg.releaser_for_mode(), checkpoint::find(&nets, "releaser")?)?;
    let adversary =
        checkpoint::params_from_network(&cfg.adversary, checkpoint::find(&nets, "adversary")?)?;
    let utility = match checkpoint::find(&nets, "utility") {
        Ok(n) => Some(checkpoint::params_from_network(&cfg.utility, n)?),
        Err(_) => None,
    };
    let attacker = match checkpoint::find(&nets, "attacker") {
        Ok(n) => Some(checkpoint::params_from_network(&cfg.attacker, n)?),
        Err(_) => None,
    };
    Ok(TrainedSystem {
        releaser,
        adversary,
        utility,
        attacker,
        history: Vec::new(),
        config: cfg,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = load_config(&args.common.config)?;
    let seed = resolve_seed(&args.common, &file)?;
    let trainer = build_trainer_config(
        &file,
        Some(seed),
        None,
        None,
        None,
        None,
        args.noise_dim,
        None,
        args.tau,
        None,
        None,
        None,
        args.scale_cells,
    )?;
    let additive = args.mode == "additive";
    let release = if additive {
        ReleaseMode::Hard // ignored by the additive path
    } else {
        parse_release_mode(&args.mode)?
    };
    let dataset = load_dataset(&args.common, &file, seed)?;
    let system = load_system(&args.checkpoint, &trainer, additive)?;
    let released = sweep::release_system(&system, &dataset, release, trainer.tau, seed ^ 0xE7A1)?;
    let mut supervised = SupervisedConfig {
        seed,
        ..SupervisedConfig::default()
    };
    if let Some(v) = args.attacker_iterations {
        supervised.iterations = v;
    }
    let source = match system.utility.as_ref() {
        Some(u) => UtilitySource::Trained(u),
        None if additive => UtilitySource::Identity,
        None => UtilitySource::TrainFresh,
    };
    let outcome = sweep::evaluate_released(
        &dataset,
        &released,
        source,
        &system.config,
        &supervised,
        seed ^ 0xE7A1,
    )?;
    let json = format!(
        "{{\n  \"ne2\": {},\n  \"balanced_accuracy\": {},\n  \"avg_samples_per_day\": {},\n  \"ksg_mi_nats\": {},\n  \"achieved_mse\": {}\n}}\n",
        outcome.ne2,
        outcome.balanced_accuracy,
        outcome.avg_samples_per_day,
        outcome.ksg_mi_nats,
        outcome.achieved_mse
    );
    write_file(&args.common.out.join("metrics.txt"), json.as_bytes())?;
    println!(
        "ne2 = {:.6}\nbalanced_accuracy = {:.6}\navg_samples_per_day = {:.4}\nksg_mi_nats = {:.6}\nachieved_mse = {:.6}",
        outcome.ne2,
        outcome.balanced_accuracy,
        outcome.avg_samples_per_day,
        outcome.ksg_mi_nats,
        outcome.achieved_mse
    );
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), CliError> {
    let file = load_config(&args.common.config)?;
    let seed = resolve_seed(&args.common, &file)?;
    let trainer = build_trainer_config(
        &file,
        Some(seed),
        None,
        None,
        None,
        None,
        None,
        None,
        None,
        None,
        None,
        None,
        args.scale_cells,
    )?;
    let dataset = load_dataset(&args.common, &file, seed)?;
    let mut supervised = SupervisedConfig {
        seed,
        ..SupervisedConfig::default()
    };
    if let Some(v) = args.attacker_iterations {
        supervised.iterations = v;
    }
    let sweep_cfg = SweepConfig {
        trainer,
        lambdas: Vec::new(),
        seeds: Vec::new(),
        uniform_factors: Vec::new(),
        random_rates: Vec::new(),
        random_repeats: args.repeats.unwrap_or(5),
        supervised,
        eval_seed: seed ^ 0x5EED_CAFE,
    };
    let cfg = match args.kind.as_str() {
        "uniform" => {
            let d = args.decimation.ok_or_else(|| {
                CliError::Usage("--kind uniform requires --decimation".into())
            })?;
            SweepConfig {
                uniform_factors: vec![d],
                ..sweep_cfg
            }
        }
        "random" => {
            let rate = args
                .rate
                .ok_or_else(|| CliError::Usage("--kind random requires --rate".into()))?;
            SweepConfig {
                random_rates: vec![rate],
                ..sweep_cfg
            }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown baseline kind {other:?} (expected uniform | random)"
            )))
        }
    };
    let points = sweep::tradeoff_sweep(&dataset, &cfg);
    write_file(
        &args.common.out.join("results.csv"),
        results_csv(&points).as_bytes(),
    )?;
    for p in &points {
        println!(
            "{}: ne2 = {:.6}, balanced_accuracy = {:.6}, samples/day = {:.4}, mi = {:.6} [{}]",
            p.mode, p.ne2, p.balanced_accuracy, p.avg_samples_per_day, p.ksg_mi_nats, p.status
        );
    }
    if points.iter().all(|p| p.status != "ok") {
        return Err(CliError::Usage("baseline evaluation failed".into()));
    }
    Ok(())
}

fn cmd_mi(args: MiArgs) -> Result<(), CliError> {
    let file = load_config(&args.common.config)?;
    let seed = resolve_seed(&args.common, &file)?;
    let dataset = load_dataset(&args.common, &file, seed)?;
    let stats = dataset.norm.expect("normalized by load_dataset");
    let (z_raw, x, label) = match &args.checkpoint {
        None => {
            let (y, x) = dataset.subset(crate::data::Split::Test);
            (stats.denormalize(&y), x, "raw data".to_string())
        }
        Some(path) => {
            let trainer = build_trainer_config(
                &file,
                Some(seed),
                None,
                None,
                None,
                None,
                args.noise_dim,
                None,
                args.tau,
                None,
                None,
                None,
                args.scale_cells.clone(),
            )?;
            let additive = args.mode == "additive";
            let release = if additive {
                ReleaseMode::Hard
            } else {
                parse_release_mode(&args.mode)?
            };
            let system = load_system(path, &trainer, additive)?;
            let released =
                sweep::release_system(&system, &dataset, release, trainer.tau, seed ^ 0xE7A1)?;
            (
                released.test.z_raw,
                released.test.x,
                format!("{} release", args.mode),
            )
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234_5678);
    let mi = crate::metrics::leakage_estimate_k(&x, &z_raw, args.neighbors, &mut rng)?;
    write_file(
        &args.common.out.join("mi.txt"),
        format!("{{\n  \"ksg_mi_nats\": {mi},\n  \"k\": {}\n}}\n", args.neighbors).as_bytes(),
    )?;
    println!("leakage of {label}: {mi:.6} nats (k = {})", args.neighbors);
    Ok(())
}

fn cmd_synth_data(args: SynthArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let n_days = args
        .n_days
        .or(file.get::<usize>("n_days", "usize")?)
        .unwrap_or(1000);
    let seed = args.seed.or(file.get::<u64>("seed", "u64")?).unwrap_or(0);
    let samples_per_hour = args
        .samples_per_hour
        .or(file.get::<usize>("samples_per_hour", "usize")?)
        .unwrap_or(1);
    let ds = data::synthesize_dataset(n_days, seed)?;
    let raw = data::to_raw_series(&ds, samples_per_hour);
    let path = args.out.join(&args.file_name);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    data::write_csv(&raw, &path)?;
    println!(
        "wrote {} days ({} rows) to {}",
        n_days,
        raw.len(),
        path.display()
    );
    Ok(())
}
