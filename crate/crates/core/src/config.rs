//! Flat `key = value` experiment configuration.
//!
//! Every key has a default, so an empty file is a complete config. Files use
//! one assignment per line with `#` comments; overrides use the same
//! `key=value` syntax. The digest hashes the canonical rendering of all keys
//! in sorted order, so it ignores key order, comments and number spelling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::sampling::{BatchKind, Mode, SamplerConfig, Transitivity};
use crate::trainer::{check_compatibility, Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

/// Every accepted key, sorted.
pub const KEYS: &[&str] = &[
    "encoder.dim",
    "encoder.dropout",
    "encoder.heads",
    "encoder.layers",
    "encoder.max_len",
    "eval.chunk_size",
    "eval.exclude_history",
    "eval.k",
    "loss.gamma",
    "loss.name",
    "precision",
    "sampler.alpha",
    "sampler.exclude_history",
    "sampler.kind",
    "sampler.max_retries",
    "sampler.mode",
    "sampler.n_j",
    "sampler.n_k",
    "sampler.seed",
    "sampler.transitivity",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.epochs",
    "train.eps",
    "train.eval_every",
    "train.learning_rate",
    "train.max_steps",
    "train.optimizer",
    "train.patience",
    "train.seed",
    "train.weight_decay",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub loss: LossConfig,
    /// `None` picks set batches for setwise losses and quads otherwise.
    pub sampler_kind: Option<BatchKind>,
    pub sampler: SamplerConfig,
    /// `num_items` is filled in from the split by [`Self::encoder_config`].
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            loss: LossConfig {
                kind: LossKind::TransBpr,
                gamma: 1.0,
            },
            sampler_kind: None,
            sampler: SamplerConfig::default(),
            encoder: EncoderConfig::new(0),
            train: TrainConfig::default(),
            precision: Precision::F32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn render_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl ExperimentConfig {
    /// Assigns one key. Enum values are checked here, ranges in [`Self::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "loss.name" => self.loss.kind = v.parse()?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "sampler.kind" => {
                self.sampler_kind = if v == "auto" { None } else { Some(v.parse()?) };
            }
            "sampler.mode" => self.sampler.mode = v.parse()?,
            "sampler.transitivity" => self.sampler.transitivity = v.parse()?,
            "sampler.alpha" => self.sampler.alpha = parse(key, v)?,
            "sampler.n_j" => self.sampler.n_j = parse(key, v)?,
            "sampler.n_k" => self.sampler.n_k = parse(key, v)?,
            "sampler.exclude_history" => self.sampler.exclude_history = parse(key, v)?,
            "sampler.max_retries" => self.sampler.max_retries = parse(key, v)?,
            "sampler.seed" => self.sampler.seed = parse_opt(key, v)?,
            "encoder.max_len" => self.encoder.max_len = parse(key, v)?,
            "encoder.dim" => self.encoder.dim = parse(key, v)?,
            "encoder.layers" => self.encoder.layers = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.dropout" => self.encoder.dropout = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.max_steps" => self.train.max_steps = parse_opt(key, v)?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "eval.k" => self.train.eval.k = parse(key, v)?,
            "eval.exclude_history" => self.train.eval.exclude_history = parse(key, v)?,
            "eval.chunk_size" => self.train.eval.chunk_size = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical value of `key`.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = match key {
            "loss.name" => self.loss.kind.to_string(),
            "loss.gamma" => self.loss.gamma.to_string(),
            "sampler.kind" => self.sampler_kind.map_or_else(|| "auto".to_string(), |k| k.to_string()),
            "sampler.mode" => self.sampler.mode.to_string(),
            "sampler.transitivity" => self.sampler.transitivity.to_string(),
            "sampler.alpha" => self.sampler.alpha.to_string(),
            "sampler.n_j" => self.sampler.n_j.to_string(),
            "sampler.n_k" => self.sampler.n_k.to_string(),
            "sampler.exclude_history" => self.sampler.exclude_history.to_string(),
            "sampler.max_retries" => self.sampler.max_retries.to_string(),
            "sampler.seed" => render_opt(&self.sampler.seed),
            "encoder.max_len" => self.encoder.max_len.to_string(),
            "encoder.dim" => self.encoder.dim.to_string(),
            "encoder.layers" => self.encoder.layers.to_string(),
            "encoder.heads" => self.encoder.heads.to_string(),
            "encoder.dropout" => self.encoder.dropout.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.eps" => self.train.eps.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.eval_every" => self.train.eval_every.to_string(),
            "train.patience" => self.train.patience.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.max_steps" => render_opt(&self.train.max_steps),
            "train.optimizer" => match self.train.optimizer {
                Optimizer::Adam => "adam".to_string(),
                Optimizer::Sgd => "sgd".to_string(),
            },
            "eval.k" => self.train.eval.k.to_string(),
            "eval.exclude_history" => self.train.eval.exclude_history.to_string(),
            "eval.chunk_size" => self.train.eval.chunk_size.to_string(),
            "precision" => self.precision.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        };
        Ok(s)
    }

    /// All keys with their canonical values.
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        KEYS.iter()
            .map(|&k| (k, self.get(k).expect("every listed key renders")))
            .collect()
    }

    /// Parses config text. A key may appear at most once.
    pub fn parse_str(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        let origin = origin.as_ref();
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), n + 1) {
                return Err(err(format!("{key} already set on line {prev}")));
            }
            cfg.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Applies `key=value` overrides in order. A leading `--` is accepted.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let body = o.strip_prefix("--").unwrap_or(o);
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn batch_kind(&self) -> BatchKind {
        self.sampler_kind.unwrap_or(if self.loss.kind.uses_sets() {
            BatchKind::Set
        } else {
            BatchKind::Quad
        })
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.batch_kind(),
            ..self.sampler.clone()
        }
    }

    pub fn encoder_config(&self, num_items: usize) -> EncoderConfig {
        EncoderConfig {
            num_items,
            ..self.encoder.clone()
        }
    }

    /// Checks every range and the loss/sampler pairing for a catalog of
    /// `num_items` items.
    pub fn validate(&self, num_items: usize) -> Result<()> {
        LossConfig::new(self.loss.kind, self.loss.gamma)?;
        self.encoder_config(num_items).validate()?;
        self.train.validate()?;
        if !(self.sampler.alpha > 0.0 && self.sampler.alpha.is_finite()) {
            return Err(Error::Config("sampler.alpha must be positive".into()));
        }
        if self.train.eval.chunk_size == 0 {
            return Err(Error::Config("eval.chunk_size must be >= 1".into()));
        }
        check_compatibility(&self.loss, &self.sampler_config(), num_items)
    }

    /// Shorthand used by experiment drivers.
    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Result<Self> {
        self.set(key, &value.to_string())?;
        Ok(self)
    }
}

/// Loss and sampler values that identify a scheme, e.g. `trans_bpr_pop`.
pub fn scheme_name(loss: LossKind, mode: Mode, transitivity: Transitivity) -> String {
    if loss.is_transitive() {
        format!("{loss}_{mode}_{transitivity}")
    } else {
        loss.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_all_render() {
        let mut sorted = KEYS.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted, KEYS);
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.pairs().len(), KEYS.len());
    }

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.get("train.batch_size").unwrap(), "256");
        assert_eq!(c.get("train.learning_rate").unwrap(), "0.0003");
        assert_eq!(c.get("train.epochs").unwrap(), "200");
        assert_eq!(c.get("train.patience").unwrap(), "20");
        assert_eq!(c.get("eval.k").unwrap(), "10");
        assert_eq!(c.get("sampler.kind").unwrap(), "auto");
        assert_eq!(c.get("sampler.n_j").unwrap(), "50");
        assert_eq!(c.get("train.max_steps").unwrap(), "none");
        assert_eq!(ExperimentConfig::parse_str("", "x").unwrap(), c);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["loss.name=trans_ssm", "--loss.gamma=1.5", "sampler.seed=7", "precision=f64"])
            .unwrap();
        let back = ExperimentConfig::parse_str(&c.to_text(), "x").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn every_key_round_trips_through_set() {
        let c = ExperimentConfig::default();
        for k in KEYS {
            let mut d = c.clone();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.set("loss.nmae", "bpr"), Err(Error::Config(_))));
        assert!(c.set("train.epochs", "many").is_err());
        assert!(c.set("sampler.mode", "trendy").is_err());
        assert!(c.apply_overrides(&["train.epochs"]).is_err());
        let e = ExperimentConfig::parse_str("loss.name = bpr\nbogus = 1\n", "c.cfg").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(ExperimentConfig::parse_str("eval.k = 5\neval.k = 6\n", "c.cfg").is_err());
        assert!(ExperimentConfig::parse_str("just words\n", "c.cfg").is_err());
    }

    #[test]
    fn digest_ignores_order_comments_and_spelling() {
        let a = ExperimentConfig::parse_str("loss.gamma = 1.50\n# note\nloss.name = trans_bce\n", "a").unwrap();
        let b = ExperimentConfig::parse_str("loss.name=trans_bce   # same\nloss.gamma=1.5\n", "b").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let c = a.clone().with("train.seed", 1).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn sampler_kind_follows_loss() {
        let c = ExperimentConfig::default().with("loss.name", "ssm").unwrap();
        assert_eq!(c.batch_kind(), BatchKind::Set);
        assert!(c.validate(200).is_ok());
        let quad = c.clone().with("sampler.kind", "quad").unwrap();
        assert!(matches!(quad.validate(200), Err(Error::Config(_))));
        let bpr = ExperimentConfig::default().with("loss.name", "bpr").unwrap();
        assert_eq!(bpr.batch_kind(), BatchKind::Quad);
    }

    #[test]
    fn validate_checks_ranges() {
        let c = ExperimentConfig::default();
        assert!(c.validate(100).is_ok());
        assert!(c.clone().with("loss.gamma", -1).unwrap().validate(100).is_err());
        assert!(c.clone().with("encoder.heads", 3).unwrap().validate(100).is_err());
        assert!(c.clone().with("train.learning_rate", 0).unwrap().validate(100).is_err());
        assert!(c.clone().with("sampler.alpha", 0).unwrap().validate(100).is_err());
        assert!(c.validate(2).is_err());
    }

    #[test]
    fn scheme_names() {
        assert_eq!(scheme_name(LossKind::TransBpr, Mode::Pop, Transitivity::Strict), "trans_bpr_pop_strict");
        assert_eq!(scheme_name(LossKind::Bpr, Mode::Pop, Transitivity::Strict), "bpr");
    }
}
