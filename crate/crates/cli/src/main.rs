use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use transrec::config::ExperimentConfig;
use transrec::corpus::{self, SplitDataset};
use transrec::encoder::checkpoint;
use transrec::eval::{self, EvalConfig, MetricsFile, Stage};
use transrec::experiment::{self, tag_csv};
use transrec::gradcheck;
use transrec::synthetic::{self, SyntheticConfig};
use transrec::trainer::TrajectoryLog;

const THREADS_ENV: &str = "TRANSREC_THREADS";

/// Train and evaluate sequential recommenders with transitive ranking losses.
#[derive(Debug, Parser)]
#[command(name = "transrec", version)]
struct Cli {
    /// Worker threads for evaluation (falls back to TRANSREC_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter a `user<TAB>item<TAB>timestamp` file and write a leave-one-out split.
    Prepare(PrepareArgs),
    /// Write a synthetic interaction file with a planted popularity hierarchy.
    Synth(SynthArgs),
    /// Train one model and evaluate its best checkpoint on the test stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Score buckets, loss-term trajectories and gradient checks.
    Analyze {
        #[command(subcommand)]
        kind: Analyze,
    },
    /// Print the effective config and its digest.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Interaction file.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the split.
    #[arg(long)]
    out: PathBuf,
    /// Minimum interactions per user and per item.
    #[arg(long, default_value_t = 5)]
    k_core: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ConfigSource {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `key=value` or `--key=value`, applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Split directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, trajectory and metrics.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Valid,
    Test,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Valid => Stage::Valid,
            StageArg::Test => Stage::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file or run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::Test)]
    stage: StageArg,
    #[arg(long, default_value_t = eval::DEFAULT_K)]
    k: usize,
    /// Remove the user's history items from the ranking pool.
    #[arg(long)]
    exclude_history: bool,
    /// Write the metrics JSON here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Analyze {
    /// Mean score of five popularity buckets over all users.
    Buckets {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Final preference-term level and slope per trajectory log.
    Terms {
        /// `name=path` pairs; a bare path uses its parent directory name.
        #[arg(long = "log", required = true)]
        logs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every loss, the graph ops and a tiny encoder.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report CSV here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads(cli.threads)?;
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Analyze { kind } => analyze(kind),
        Command::Config(a) => {
            let cfg = a.source.load()?;
            print!("# config_digest={}\n{}", cfg.digest(), cfg.to_text());
            Ok(())
        }
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn prepare(a: &PrepareArgs) -> Result<()> {
    let raw = corpus::parse_tsv(&a.input)?;
    let filtered = corpus::k_core_filter(&raw, a.k_core);
    let log = corpus::build_log(&filtered).with_context(|| format!("after {}-core filtering", a.k_core))?;
    let stats = log.stats();
    let (split, warnings) = corpus::leave_one_out(&log);
    ensure!(split.num_users() > 0, "no user has the three interactions a split needs");
    split.write_dir(&a.out)?;
    let stats_path = a.out.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n")
        .with_context(|| format!("writing {}", stats_path.display()))?;
    println!("interactions\t{}", stats.interactions);
    println!("users\t{}", stats.users);
    println!("items\t{}", stats.items);
    println!("density\t{:.6}", stats.density);
    if warnings.dropped_users > 0 {
        eprintln!("warning: {} users with fewer than 3 events left out of the split", warnings.dropped_users);
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        users: a.users,
        items: a.items,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let seqs = synthetic::generate(&cfg)?;
    fs::write(&a.out, synthetic::to_tsv(&seqs)).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.source.load()?;
    let split = SplitDataset::read_dir(&a.data)?;
    cfg.validate(split.num_items)?;
    let s = experiment::run(&cfg, &split, Some(&a.out))?;
    if let Some(v) = &s.valid {
        println!("valid\tepoch {}\thr@{} {:.6}\tndcg@{} {:.6}", s.best_epoch, v.k, v.hr, v.k, v.ndcg);
    }
    println!("test\thr@{} {:.6}\tndcg@{} {:.6}", s.test.k, s.test.hr, s.test.k, s.test.ndcg);
    if s.skipped_steps > 0 {
        eprintln!("warning: {} steps skipped for non-finite values", s.skipped_steps);
    }
    println!("digest\t{}", s.digest);
    Ok(())
}

fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        experiment::checkpoint_path(path)
    } else {
        path.to_path_buf()
    }
}

/// Loads parameters at 64-bit precision along with the stored digest.
fn load_checkpoint(path: &Path) -> Result<(transrec::encoder::EncoderParameters<f64>, String)> {
    let path = resolve_checkpoint(path);
    let bytes = fs::read(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let digest = checkpoint::digest_of(&bytes)?.unwrap_or_default();
    let params = checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((params, digest))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let split = SplitDataset::read_dir(&a.data)?;
    let (params, digest) = load_checkpoint(&a.checkpoint)?;
    ensure!(
        params.config.num_items == split.num_items,
        "checkpoint has {} items, split has {}",
        params.config.num_items,
        split.num_items
    );
    ensure!(a.k >= 1, "k must be at least 1");
    let cfg = EvalConfig {
        k: a.k,
        exclude_history: a.exclude_history,
        ..EvalConfig::default()
    };
    let m = eval::evaluate(&params, &split, a.stage.into(), &cfg)?;
    let file = MetricsFile::new(a.stage.into(), &m, digest);
    println!("{}", serde_json::to_string_pretty(&file)?);
    if let Some(out) = &a.out {
        file.write(out)?;
    }
    Ok(())
}

fn analyze(kind: Analyze) -> Result<()> {
    match kind {
        Analyze::Buckets { data, checkpoint, out } => {
            let split = SplitDataset::read_dir(&data)?;
            let (params, digest) = load_checkpoint(&checkpoint)?;
            ensure!(params.config.num_items == split.num_items, "checkpoint and split disagree on the catalog size");
            let report = eval::bucket_scores(&params, &split, EvalConfig::default().chunk_size)?;
            let csv = eval::buckets_csv(&report);
            print!("{csv}");
            fs::write(&out, tag_csv(&digest, &csv)).with_context(|| format!("writing {}", out.display()))?;
        }
        Analyze::Terms { logs, out } => {
            let mut named = Vec::new();
            let mut digests = Vec::new();
            for spec in &logs {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(spec);
                        let n = p
                            .parent()
                            .and_then(Path::file_name)
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| spec.clone());
                        (n, p)
                    }
                };
                let path = if path.is_dir() {
                    path.join(experiment::TRAJECTORY_FILE)
                } else {
                    path
                };
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                if let Some(d) = text.lines().next().and_then(|l| l.strip_prefix("# config_digest=")) {
                    digests.push(format!("{name}:{d}"));
                }
                named.push((name, TrajectoryLog::from_csv(&text, &path)?));
            }
            let rows = eval::compare_trajectories(&named)?;
            let csv = eval::trajectory_summary_csv(&rows);
            print!("{csv}");
            fs::write(&out, tag_csv(&digests.join(","), &csv)).with_context(|| format!("writing {}", out.display()))?;
        }
        Analyze::Gradcheck { seed, out } => {
            let entries = gradcheck::suite(seed)?;
            let mut csv = String::from("check,max_rel_err,tolerance,checked,passed\n");
            for e in &entries {
                csv += &format!("{},{:e},{:e},{},{}\n", e.name, e.max_rel_err, e.tolerance, e.checked, e.passed);
            }
            print!("{csv}");
            if let Some(out) = out {
                fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            }
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
            if !failed.is_empty() {
                bail!("gradient check failed: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}
