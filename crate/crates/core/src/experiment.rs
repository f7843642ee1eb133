//! A full training run driven by an [`ExperimentConfig`]: train, reload the
//! best checkpoint, evaluate on the test stage and write the run directory.
//!
//! Run directory contents:
//!
//! | file | contents |
//! |---|---|
//! | `config.txt` | canonical config, digest on the first line |
//! | `best.ckpt` | best-validation parameters |
//! | `final.ckpt` | parameters after the last step |
//! | `trajectory.csv` | per-step loss terms |
//! | `valid_metrics.json` | best validation metrics (when validation ran) |
//! | `metrics.json` | test metrics of the best checkpoint |

use std::fs;
use std::path::Path;

use crate::config::{ExperimentConfig, Precision};
use crate::corpus::SplitDataset;
use crate::encoder::{self, checkpoint};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, MetricsFile, Stage};
use crate::tensor::Real;
use crate::trainer::{self, TrainOutcome, TrajectoryLog, BEST_CHECKPOINT};

pub const CONFIG_FILE: &str = "config.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const VALID_METRICS_FILE: &str = "valid_metrics.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Prefixes CSV text with a `# config_digest=` comment line.
pub fn tag_csv(digest: &str, csv: &str) -> String {
    format!("# config_digest={digest}\n{csv}")
}

#[derive(Debug, Clone)]
pub struct Run<T> {
    pub digest: String,
    pub outcome: TrainOutcome<T>,
    /// Test metrics of the best parameters.
    pub test: MetricReport,
}

/// Precision-independent part of a [`Run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub digest: String,
    pub valid: Option<MetricReport>,
    pub test: MetricReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub skipped_steps: usize,
    pub log: TrajectoryLog,
}

impl<T> Run<T> {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            digest: self.digest.clone(),
            valid: self.outcome.best_valid.clone(),
            test: self.test.clone(),
            best_epoch: self.outcome.best_epoch,
            epochs_run: self.outcome.epochs_run,
            skipped_steps: self.outcome.skipped_steps,
            log: self.outcome.log.clone(),
        }
    }
}

/// Trains in element type `T` regardless of the `precision` key. With
/// `out_dir` set, every output is written there and test metrics come from
/// the reloaded checkpoint.
pub fn run_typed<T: Real>(cfg: &ExperimentConfig, split: &SplitDataset, out_dir: Option<&Path>) -> Result<Run<T>> {
    cfg.validate(split.num_items)?;
    let digest = cfg.digest();
    let mut train_cfg = cfg.train.clone();
    train_cfg.config_digest = Some(digest.clone());
    train_cfg.checkpoint_dir = out_dir.map(Path::to_path_buf);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(CONFIG_FILE), &format!("# config_digest={digest}\n{}", cfg.to_text()))?;
    }
    let params = encoder::init::<T>(&cfg.encoder_config(split.num_items), trainer::init_seed(train_cfg.seed))?;
    let outcome = trainer::train_from(split, params, &train_cfg, &cfg.sampler_config(), &cfg.loss)?;

    let best = match &outcome.best_checkpoint {
        Some(path) => checkpoint::load::<T>(path)?,
        None => outcome.best_params.clone(),
    };
    let test = eval::evaluate(&best, split, Stage::Test, &cfg.train.eval)?;
    if let Some(dir) = out_dir {
        write(&dir.join(TRAJECTORY_FILE), &tag_csv(&digest, &outcome.log.to_csv()))?;
        checkpoint::save_tagged(&dir.join(FINAL_CHECKPOINT), &outcome.final_params, Some(&digest))?;
        if let Some(v) = &outcome.best_valid {
            MetricsFile::new(Stage::Valid, v, &digest).write(&dir.join(VALID_METRICS_FILE))?;
        }
        MetricsFile::new(Stage::Test, &test, &digest).write(&dir.join(METRICS_FILE))?;
    }
    Ok(Run { digest, outcome, test })
}

/// Trains at the configured precision.
pub fn run(cfg: &ExperimentConfig, split: &SplitDataset, out_dir: Option<&Path>) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, split, out_dir).map(|r| r.summary()),
        Precision::F64 => run_typed::<f64>(cfg, split, out_dir).map(|r| r.summary()),
    }
}

/// Path of the checkpoint inside a run directory.
pub fn checkpoint_path(run_dir: &Path) -> std::path::PathBuf {
    run_dir.join(BEST_CHECKPOINT)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{self, SyntheticConfig};

    fn tiny_split() -> SplitDataset {
        synthetic::split(&SyntheticConfig {
            users: 12,
            items: 20,
            min_len: 5,
            max_len: 9,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&[
            "encoder.dim=8",
            "encoder.max_len=6",
            "train.epochs=3",
            "train.batch_size=4",
            "sampler.n_j=3",
            "sampler.n_k=3",
            "precision=f64",
        ])
        .unwrap();
        c
    }

    #[test]
    fn run_directory_is_complete_and_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let split = tiny_split();
        let s = run(&cfg, &split, Some(dir.path())).unwrap();
        let d = cfg.digest();
        assert_eq!(s.digest, d);
        for f in [CONFIG_FILE, TRAJECTORY_FILE, METRICS_FILE, VALID_METRICS_FILE] {
            let text = fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.contains(&d), "{f} lacks the digest");
        }
        for ckpt in [checkpoint_path(dir.path()), dir.path().join(FINAL_CHECKPOINT)] {
            let bytes = fs::read(ckpt).unwrap();
            assert_eq!(checkpoint::digest_of(&bytes).unwrap(), Some(d.clone()));
        }
        let m = MetricsFile::read(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(m.stage, Stage::Test);
        assert_eq!(m.ndcg, s.test.ndcg);
        let log = TrajectoryLog::read_csv(&dir.path().join(TRAJECTORY_FILE)).unwrap();
        assert_eq!(log, s.log);
        let text = fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(ExperimentConfig::parse_str(&text, "config.txt").unwrap(), cfg);
    }

    #[test]
    fn every_loss_runs_end_to_end() {
        let split = tiny_split();
        for kind in crate::losses::LossKind::ALL {
            let cfg = tiny_cfg().with("loss.name", kind).unwrap().with("train.epochs", 1).unwrap();
            let s = run(&cfg, &split, None).unwrap();
            assert!(s.log.rows().iter().all(|r| r.total.is_finite()), "{kind}");
            assert_eq!(s.log.rows()[0].preference.is_some(), kind.is_transitive());
        }
    }

    #[test]
    fn incompatible_config_fails_before_training() {
        let cfg = tiny_cfg().with("loss.name", "ssm").unwrap().with("sampler.kind", "quad").unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run(&cfg, &tiny_split(), Some(dir.path())), Err(Error::Config(_))));
        assert!(!dir.path().join(CONFIG_FILE).exists());
    }
}
