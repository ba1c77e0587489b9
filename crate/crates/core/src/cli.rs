//! Command-line pipeline: dataset generation, training, evaluation.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::io;
use crate::policy::MlpPolicy;
use crate::scenarios::{self, Dataset};
use crate::trainer;

pub const TRAIN_FILE: &str = "train.csv";
pub const DEV_FILE: &str = "dev.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ncgmm";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const METRICS_JSON: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "ncgmm", version, about = "Train and evaluate a neural glucose controller by differentiable predictive control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and dev scenario datasets.
    GenData(GenDataArgs),
    /// Train a policy on generated datasets.
    Train(TrainArgs),
    /// Simulate a trained policy and write trajectory, figure and metrics.
    Eval(EvalArgs),
    /// Generate data, train and evaluate in one go with a shared seed.
    RunAll(RunAllArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed overriding the config file's `seed`.
    #[arg(long, env = "NCGMM_SEED", value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for train.csv and dev.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding train.csv and dev.csv.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory for the checkpoint and history.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads for batch rollouts. Results do not depend on this.
    #[arg(long, default_value_t = 1, value_name = "N")]
    pub threads: usize,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Output directory for trajectory, figure and metrics.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Simulation steps per run (config `eval.steps` when omitted).
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// Number of independent runs; metrics are pooled across runs.
    #[arg(long, default_value_t = 1, value_name = "M")]
    pub scenarios: usize,
}

#[derive(Debug, Args)]
pub struct RunAllArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for every artifact.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads for batch rollouts. Results do not depend on this.
    #[arg(long, default_value_t = 1, value_name = "N")]
    pub threads: usize,
    /// Simulation steps for the evaluation stage.
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

fn load_config(common: &Common) -> Result<(Config, u64)> {
    let cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

fn pool(threads: usize) -> Result<Option<ThreadPool>> {
    match threads {
        0 => Err(Error::invalid("--threads", "must be >= 1")),
        1 => Ok(None),
        n => ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Error::invalid("--threads", e.to_string())),
    }
}

/// Seed of the evaluation run `i`, kept apart from the data stream.
pub fn eval_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(0xE7A1_0000 + i as u64)
}

pub fn gen_data(cfg: &Config, seed: u64, out: &Path) -> Result<(Dataset, Dataset)> {
    let (train, dev) = scenarios::generate(&cfg.scenarios, cfg.dims()?, seed)?;
    io::create_dir(out)?;
    train.save(&out.join(TRAIN_FILE))?;
    dev.save(&out.join(DEV_FILE))?;
    Ok((train, dev))
}

fn check_dataset(cfg: &Config, data: &Dataset, name: &str) -> Result<()> {
    let dims = cfg.dims()?;
    if (data.nx, data.ny, data.nd) != (dims.nx, dims.ny, dims.nd) {
        return Err(Error::invalid(
            name,
            format!(
                "dimensions (nx={}, ny={}, nd={}) do not match the plant (nx={}, ny={}, nd={})",
                data.nx, data.ny, data.nd, dims.nx, dims.ny, dims.nd
            ),
        ));
    }
    Ok(())
}

pub fn train(
    cfg: &Config,
    seed: u64,
    train_set: &Dataset,
    dev_set: &Dataset,
    out: &Path,
    threads: usize,
    quiet: bool,
) -> Result<(Checkpoint, trainer::TrainHistory)> {
    check_dataset(cfg, train_set, TRAIN_FILE)?;
    check_dataset(cfg, dev_set, DEV_FILE)?;
    let plant = cfg.plant()?;
    let pool = pool(threads)?;
    let policy = MlpPolicy::init(seed, cfg.policy_shape()?, plant.u_min().to_vec(), plant.u_max().to_vec())?;
    io::create_dir(out)?;
    let (ck, history) =
        trainer::train(&plant, policy, train_set, dev_set, &cfg.train, &cfg.loss, seed, pool.as_ref(), |r| {
            if !quiet {
                eprintln!("epoch {:>3}  train {:.6}  dev {:.6}  ({:.2}s)", r.epoch, r.train_loss, r.dev_loss, r.wall_secs);
            }
        })?;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    history.save(&out.join(HISTORY_FILE))?;
    Ok((ck, history))
}

#[derive(Debug, Serialize)]
struct MetricsReport<'a> {
    seed: u64,
    runs: usize,
    band_dwell: usize,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

pub fn evaluate(cfg: &Config, seed: u64, ck: &Checkpoint, out: &Path, runs: usize) -> Result<Metrics> {
    ck.expect_shape(&cfg.policy_shape()?)?;
    if runs == 0 {
        return Err(Error::invalid("--scenarios", "must be >= 1"));
    }
    let plant = cfg.plant()?;
    io::create_dir(out)?;
    let mut all = Vec::with_capacity(runs);
    for i in 0..runs {
        let traj = eval::simulate(&plant, &ck.policy, &cfg.scenarios, &cfg.eval, eval_seed(seed, i))?;
        let stem = if runs == 1 { "trajectory".to_string() } else { format!("trajectory_{i:04}") };
        eval::export_csv(&traj, &out.join(format!("{stem}.csv")))?;
        eval::render_svg(&traj, &out.join(format!("{stem}.svg")))?;
        let transient = cfg.eval.transient.min(traj.len() - 1);
        all.push(eval::metrics(&traj, transient, Some((ck.policy.u_min(), ck.policy.u_max())))?);
    }
    let pooled = Metrics::pooled(&all)?;
    let mut text = format!("seed={seed}\nruns={runs}\nband_dwell={}\n", cfg.eval.band_dwell);
    text.push_str(&pooled.to_key_value());
    io::write_atomic(&out.join(METRICS_TXT), text.as_bytes())?;
    let report = MetricsReport { seed, runs, band_dwell: cfg.eval.band_dwell, metrics: &pooled };
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| Error::invalid("metrics", e.to_string()))?;
    json.push('\n');
    io::write_atomic(&out.join(METRICS_JSON), json.as_bytes())?;
    Ok(pooled)
}

fn with_steps(mut cfg: Config, steps: Option<usize>) -> Result<Config> {
    if let Some(s) = steps {
        cfg.eval.steps = s;
        cfg.eval.validate()?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let (cfg, seed) = load_config(&a.common)?;
            let (train, dev) = gen_data(&cfg, seed, &a.out)?;
            println!("wrote {} train and {} dev scenarios to {}", train.len(), dev.len(), a.out.display());
        }
        Command::Train(a) => {
            let (cfg, seed) = load_config(&a.common)?;
            let train_set = Dataset::load(&a.data.join(TRAIN_FILE))?;
            let dev_set = Dataset::load(&a.data.join(DEV_FILE))?;
            let (ck, history) = train(&cfg, seed, &train_set, &dev_set, &a.out, a.threads, a.quiet)?;
            print_training_summary(&ck, &history);
        }
        Command::Eval(a) => {
            let (cfg, seed) = load_config(&a.common)?;
            let cfg = with_steps(cfg, a.steps)?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let m = evaluate(&cfg, seed, &ck, &a.out, a.scenarios)?;
            print!("{}", m.to_key_value());
        }
        Command::RunAll(a) => {
            let (cfg, seed) = load_config(&a.common)?;
            let cfg = with_steps(cfg, a.steps)?;
            io::create_dir(&a.out)?;
            let resolved = Config { seed, ..cfg.clone() };
            io::write_atomic(&a.out.join("config.toml"), resolved.to_toml().as_bytes())?;
            let (train_set, dev_set) = gen_data(&cfg, seed, &a.out.join("data"))?;
            let (ck, history) = train(&cfg, seed, &train_set, &dev_set, &a.out, a.threads, a.quiet)?;
            print_training_summary(&ck, &history);
            let m = evaluate(&cfg, seed, &ck, &a.out, 1)?;
            print!("{}", m.to_key_value());
        }
    }
    Ok(())
}

fn print_training_summary(ck: &Checkpoint, history: &trainer::TrainHistory) {
    println!(
        "epochs run: {}, stop reason: {}, best epoch: {}",
        history.epochs.len(),
        history.stop_reason.as_str(),
        ck.meta.epoch.map_or("-".to_string(), |e| e.to_string())
    );
    match ck.meta.dev_loss {
        Some(l) => println!("final dev loss: {l:?}"),
        None => println!("final dev loss: n/a"),
    }
}
