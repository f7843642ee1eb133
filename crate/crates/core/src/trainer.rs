//! Training loop: windows of each user's train sequence, fresh negatives
//! every step, loss at every non-padded position, Adam updates, per-step
//! loss-term logging, validation-based checkpointing and early stopping.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitDataset;
use crate::encoder::{self, checkpoint, BoundEncoder, EncoderConfig, EncoderParameters, PaddedBatch};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, MetricReport, Stage};
use crate::losses::{self, LossConfig, LossVars};
use crate::sampling::{check_set_sizes, BatchKind, NegativeSampler, PopularityDist, SamplerConfig, Transitivity};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Sequence windows per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Optional cap on optimization steps.
    pub max_steps: Option<usize>,
    /// Where the best checkpoint is written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stamped into saved checkpoints.
    pub config_digest: Option<String>,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 3e-4,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            eval_every: 1,
            patience: 20,
            seed: 42,
            optimizer: Optimizer::Adam,
            max_steps: None,
            checkpoint_dir: None,
            config_digest: None,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.eval.k == 0 {
            return bad("eval k must be >= 1");
        }
        Ok(())
    }
}

/// Independent random streams derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sampler = 2,
    Dropout = 3,
    Shuffle = 4,
}

pub fn stream_rng(root: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng
}

/// Seed for parameter initialization under `root`.
pub fn init_seed(root: u64) -> u64 {
    stream_rng(root, Stream::Init).next_u64()
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Completed steps.
    pub t: usize,
    /// Steps skipped for non-finite gradients.
    pub skipped: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            skipped: 0,
        }
    }

    pub fn for_params(params: &EncoderParameters<T>) -> Self {
        let shapes: Vec<&[usize]> = params.tensors().into_iter().map(|t| t.shape()).collect();
        Self::new(&shapes)
    }
}

fn check_grads<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<bool> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    Ok(grads.iter().all(|g| g.all_finite()))
}

/// Bias-corrected Adam with L2 weight decay folded into the gradient.
/// Returns false, leaving everything but the skip counter untouched, when a
/// gradient is non-finite.
pub fn adam_update<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<bool> {
    if state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    if !check_grads(params, grads)? {
        state.skipped += 1;
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, wd, eps) = (T::one(), T::of(cfg.weight_decay), T::of(cfg.eps));
    let step = T::of(cfg.learning_rate);
    let c1 = T::of(1.0 - cfg.beta1.powf(t));
    let c2 = T::of(1.0 - cfg.beta2.powf(t));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = p.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i] + wd * p[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / c1;
            let vhat = vi / c2;
            p[i] = p[i] - step * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(true)
}

pub fn sgd_update<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64, weight_decay: f64) -> Result<bool> {
    if !check_grads(params, grads)? {
        return Ok(false);
    }
    let (lr, wd) = (T::of(lr), T::of(weight_decay));
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
            *x = *x - lr * (gi + wd * *x);
        }
    }
    Ok(true)
}

/// Adam on encoder parameters; the padding row is re-zeroed afterwards.
pub fn adam_step<T: Real>(
    params: &mut EncoderParameters<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<bool> {
    let applied = adam_update(&mut params.tensors_mut(), grads, state, cfg)?;
    params.zero_padding_row();
    Ok(applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub total: f64,
    pub original: f64,
    pub preference: Option<f64>,
}

/// One row per optimization step. Wall-clock times are kept alongside but
/// excluded from equality and from the CSV, so logs of identical runs
/// compare equal.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    rows: Vec<TrajectoryRow>,
    elapsed_secs: Vec<f64>,
}

impl PartialEq for TrajectoryLog {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
    }
}

impl TrajectoryLog {
    pub fn push(&mut self, row: TrajectoryRow) {
        self.push_timed(row, 0.0);
    }

    pub fn push_timed(&mut self, row: TrajectoryRow, elapsed_secs: f64) {
        self.rows.push(row);
        self.elapsed_secs.push(elapsed_secs);
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    /// Seconds since training started, per row.
    pub fn elapsed_secs(&self) -> &[f64] {
        &self.elapsed_secs
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `step,total,original,preference`; the preference cell is empty for
    /// base losses.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,original,preference\n");
        for r in &self.rows {
            let pref = r.preference.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.step, r.total, r.original, pref);
        }
        s
    }

    /// Parses [`Self::to_csv`] output. Lines starting with `#` are skipped.
    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
        match lines.next() {
            Some((_, h)) if h.trim() == "step,total,original,preference" => {}
            _ => {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: 1,
                    message: "expected header step,total,original,preference".into(),
                })
            }
        }
        let mut log = TrajectoryLog::default();
        for (i, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            log.push(TrajectoryRow {
                step: f[0].trim().parse().map_err(|e| err(format!("step {:?}: {e}", f[0])))?,
                total: num(f[1])?,
                original: num(f[2])?,
                preference: if f[3].trim().is_empty() { None } else { Some(num(f[3])?) },
            });
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// A contiguous slice of one user's train sequence: inputs
/// `train[start..end]`, next-item targets `train[start+1..=end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub user: usize,
    pub start: usize,
    pub end: usize,
}

/// Windows of at most `max_len` inputs. The first ends at the last input
/// and later ones step back `max_len` at a time, so every target is covered
/// exactly once.
pub fn training_windows(split: &SplitDataset, max_len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (u, s) in split.users.iter().enumerate() {
        let mut end = s.train.len().saturating_sub(1);
        while end > 0 {
            let start = end.saturating_sub(max_len);
            out.push(Window { user: u, start, end });
            end = start;
        }
    }
    out
}

/// Padded inputs of a batch plus the flat rows that carry a loss.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub batch: PaddedBatch,
    /// Row `b·len + t` of the encoder output for every real position.
    pub rows: Vec<usize>,
    pub positives: Vec<usize>,
    /// Index into `split.users` for every loss row.
    pub users: Vec<usize>,
}

pub fn prepare_batch(split: &SplitDataset, windows: &[Window], max_len: usize) -> PreparedBatch {
    let inputs: Vec<&[usize]> = windows
        .iter()
        .map(|w| &split.users[w.user].train[w.start..w.end])
        .collect();
    let batch = PaddedBatch::left_pad(&inputs, max_len);
    let (mut rows, mut positives, mut users) = (Vec::new(), Vec::new(), Vec::new());
    for (b, w) in windows.iter().enumerate() {
        let n = w.end - w.start;
        let train = &split.users[w.user].train;
        for t in 0..n {
            rows.push(b * batch.len + batch.len - n + t);
            positives.push(train[w.start + t + 1]);
            users.push(w.user);
        }
    }
    PreparedBatch {
        batch,
        rows,
        positives,
        users,
    }
}

/// Sampled negatives for every loss row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Negatives {
    Pairs { j: Vec<usize>, k: Vec<usize> },
    /// Row-major `[P × n_j]` and `[P × n_k]`.
    Sets { n_j: Vec<usize>, n_k: Vec<usize>, size_j: usize, size_k: usize },
}

pub fn draw_negatives<R: rand::Rng + ?Sized>(
    split: &SplitDataset,
    prepared: &PreparedBatch,
    sampler: &NegativeSampler<'_>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Negatives> {
    let mut seen: Vec<usize> = Vec::new();
    let mut seen_user = usize::MAX;
    let p = prepared.positives.len();
    match cfg.kind {
        BatchKind::Quad => {
            let (mut j, mut k) = (Vec::with_capacity(p), Vec::with_capacity(p));
            for (&pos, &u) in prepared.positives.iter().zip(&prepared.users) {
                if cfg.exclude_history && u != seen_user {
                    seen = split.users[u].train.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    seen_user = u;
                }
                let excl = |x: usize| cfg.exclude_history && seen.binary_search(&x).is_ok();
                let (a, b) = sampler.draw_pair(pos, &excl, rng)?;
                j.push(a);
                k.push(b);
            }
            Ok(Negatives::Pairs { j, k })
        }
        BatchKind::Set => {
            let (mut nj, mut nk) = (Vec::with_capacity(p * cfg.n_j), Vec::with_capacity(p * cfg.n_k));
            for (&pos, &u) in prepared.positives.iter().zip(&prepared.users) {
                if cfg.exclude_history && u != seen_user {
                    seen = split.users[u].train.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    seen_user = u;
                }
                let excl = |x: usize| cfg.exclude_history && seen.binary_search(&x).is_ok();
                let (a, b) = sampler.draw_sets(pos, &excl, cfg.n_j, cfg.n_k, rng)?;
                nj.extend(a);
                nk.extend(b);
            }
            Ok(Negatives::Sets {
                n_j: nj,
                n_k: nk,
                size_j: cfg.n_j,
                size_k: cfg.n_k,
            })
        }
    }
}

fn columns<T: Real>(g: &mut Graph<T>, scores: Var, p: usize, width: usize, cols: std::ops::Range<usize>) -> Result<Var> {
    let c = cols.len();
    let index = (0..p).flat_map(|r| cols.clone().map(move |k| r * width + k)).collect();
    if c == 1 {
        g.take(scores, index, &[p])
    } else {
        g.take(scores, index, &[p, c])
    }
}

/// Forward pass of the configured loss on one prepared batch.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    enc: &BoundEncoder,
    prepared: &PreparedBatch,
    negatives: &Negatives,
    loss: &LossConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<LossVars> {
    let p = prepared.rows.len();
    if p == 0 {
        return Err(Error::EmptyInput("batch has no targets"));
    }
    let h = encoder::encode(g, enc, &prepared.batch, dropout_rng)?;
    let h = g.gather_rows(h, &prepared.rows)?;
    match negatives {
        Negatives::Pairs { j, k } => {
            let mut ids = Vec::with_capacity(3 * p);
            for r in 0..p {
                ids.extend([prepared.positives[r], j[r], k[r]]);
            }
            let s = encoder::score(g, h, enc.item_emb, &ids)?;
            let si = columns(g, s, p, 3, 0..1)?;
            let sj = columns(g, s, p, 3, 1..2)?;
            let sk = columns(g, s, p, 3, 2..3)?;
            losses::build(g, loss, si, sj, Some(sk))
        }
        Negatives::Sets {
            n_j,
            n_k,
            size_j,
            size_k,
        } => {
            let (cj, ck) = (*size_j, *size_k);
            let width = 1 + cj + ck;
            let mut ids = Vec::with_capacity(width * p);
            for r in 0..p {
                ids.push(prepared.positives[r]);
                ids.extend_from_slice(&n_j[r * cj..(r + 1) * cj]);
                ids.extend_from_slice(&n_k[r * ck..(r + 1) * ck]);
            }
            let s = encoder::score(g, h, enc.item_emb, &ids)?;
            let si = columns(g, s, p, width, 0..1)?;
            if loss.kind.is_transitive() {
                let sj = columns(g, s, p, width, 1..1 + cj)?;
                let sk = columns(g, s, p, width, 1 + cj..width)?;
                losses::build(g, loss, si, sj, Some(sk))
            } else {
                // the base softmax loss contrasts against both sets
                let all = columns(g, s, p, width, 1..width)?;
                losses::build(g, loss, si, all, None)
            }
        }
    }
}

/// Rejects loss and sampler combinations that cannot be trained.
pub fn check_compatibility(loss: &LossConfig, sampler: &SamplerConfig, num_items: usize) -> Result<()> {
    match (loss.kind.uses_sets(), sampler.kind) {
        (true, BatchKind::Quad) => {
            return Err(Error::Config(format!("loss {} needs set batches, got quad", loss.kind)));
        }
        (false, BatchKind::Set) => {
            return Err(Error::Config(format!("loss {} needs quad batches, got set", loss.kind)));
        }
        _ => {}
    }
    if sampler.kind == BatchKind::Set {
        if sampler.transitivity != Transitivity::Weak {
            return Err(Error::Config(format!(
                "set batches support weak transitivity only, got {}",
                sampler.transitivity
            )));
        }
        check_set_sizes(num_items, sampler.n_j, sampler.n_k)?;
    } else if num_items < 3 {
        return Err(Error::CatalogTooSmall {
            needed: 3,
            available: num_items,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub final_params: EncoderParameters<T>,
    /// Parameters with the best validation NDCG (the final ones when
    /// validation is off).
    pub best_params: EncoderParameters<T>,
    pub best_valid: Option<MetricReport>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub log: TrajectoryLog,
    pub best_checkpoint: Option<PathBuf>,
    pub skipped_steps: usize,
}

/// Trains from a fresh initialization seeded by `train.seed`.
pub fn train<T: Real>(
    split: &SplitDataset,
    enc_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome<T>> {
    let params = encoder::init::<T>(enc_cfg, init_seed(train_cfg.seed))?;
    train_from(split, params, train_cfg, sampler_cfg, loss_cfg)
}

pub fn train_from<T: Real>(
    split: &SplitDataset,
    mut params: EncoderParameters<T>,
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome<T>> {
    let enc_cfg = params.config.clone();
    enc_cfg.validate()?;
    train_cfg.validate()?;
    let loss_cfg = LossConfig::new(loss_cfg.kind, loss_cfg.gamma)?;
    if enc_cfg.num_items != split.num_items {
        return Err(Error::Config(format!(
            "encoder has {} items, split has {}",
            enc_cfg.num_items, split.num_items
        )));
    }
    check_compatibility(&loss_cfg, sampler_cfg, split.num_items)?;
    let windows = training_windows(split, enc_cfg.max_len);
    if windows.is_empty() {
        return Err(Error::EmptyInput("split has no training targets"));
    }
    let pop = PopularityDist::from_split(split, sampler_cfg.alpha)?;
    let sampler = NegativeSampler::new(&pop, sampler_cfg.mode, sampler_cfg.transitivity, sampler_cfg.max_retries)?;

    let mut sample_rng = match sampler_cfg.seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => stream_rng(train_cfg.seed, Stream::Sampler),
    };
    let mut dropout_rng = stream_rng(train_cfg.seed, Stream::Dropout);
    let mut shuffle_rng = stream_rng(train_cfg.seed, Stream::Shuffle);

    let mut adam = AdamState::for_params(&params);
    let mut log = TrajectoryLog::default();
    let started = Instant::now();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut step = 0usize;
    let mut skipped = 0usize;
    let mut best: Option<(MetricReport, EncoderParameters<T>, usize)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    let mut best_checkpoint = None;
    let out_of_steps = |s: usize| train_cfg.max_steps.is_some_and(|m| s >= m);

    'epochs: for epoch in 1..=train_cfg.epochs {
        epochs_run = epoch;
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            if out_of_steps(step) {
                break;
            }
            let batch_windows: Vec<Window> = chunk.iter().map(|&w| windows[w]).collect();
            let prepared = prepare_batch(split, &batch_windows, enc_cfg.max_len);
            let negatives = draw_negatives(split, &prepared, &sampler, sampler_cfg, &mut sample_rng)?;

            let mut g = Graph::<T>::new();
            let bound = encoder::bind(&mut g, &params, true);
            let vars = batch_loss(&mut g, &bound, &prepared, &negatives, &loss_cfg, Some(&mut dropout_rng))?;
            let report = vars.report(&g);
            g.backward(vars.total)?;
            let grads: Vec<Tensor<T>> = bound
                .vars
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            drop(g);

            let applied = if !report.total.is_finite() {
                false
            } else {
                match train_cfg.optimizer {
                    Optimizer::Adam => adam_step(&mut params, &grads, &mut adam, train_cfg)?,
                    Optimizer::Sgd => {
                        let ok = sgd_update(&mut params.tensors_mut(), &grads, train_cfg.learning_rate, train_cfg.weight_decay)?;
                        params.zero_padding_row();
                        ok
                    }
                }
            };
            if !applied {
                skipped += 1;
            }
            step += 1;
            log.push_timed(
                TrajectoryRow {
                    step,
                    total: report.total,
                    original: report.original,
                    preference: report.preference,
                },
                started.elapsed().as_secs_f64(),
            );
        }

        let last = epoch == train_cfg.epochs || out_of_steps(step);
        let validate = train_cfg.eval_every > 0 && (epoch % train_cfg.eval_every == 0 || last);
        if validate {
            let m = eval::evaluate(&params, split, Stage::Valid, &train_cfg.eval)?;
            let improved = best.as_ref().is_none_or(|(b, _, _)| m.ndcg > b.ndcg);
            if improved {
                if let Some(dir) = &train_cfg.checkpoint_dir {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let path = dir.join(BEST_CHECKPOINT);
                    checkpoint::save_tagged(&path, &params, train_cfg.config_digest.as_deref())?;
                    best_checkpoint = Some(path);
                }
                best = Some((m, params.clone(), epoch));
                stale = 0;
            } else {
                stale += 1;
                if stale >= train_cfg.patience.max(1) {
                    break 'epochs;
                }
            }
        }
        if last {
            break;
        }
    }

    let (best_valid, best_params, best_epoch) = match best {
        Some((m, p, e)) => (Some(m), p, e),
        None => {
            if let Some(dir) = &train_cfg.checkpoint_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(BEST_CHECKPOINT);
                checkpoint::save_tagged(&path, &params, train_cfg.config_digest.as_deref())?;
                best_checkpoint = Some(path);
            }
            (None, params.clone(), epochs_run)
        }
    };
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_valid,
        best_epoch,
        epochs_run,
        log,
        best_checkpoint,
        skipped_steps: skipped,
    })
}
