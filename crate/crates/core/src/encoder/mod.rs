//! Causal self-attention sequence encoder.
//!
//! Histories are left-padded with item 0. Each block runs masked
//! self-attention, a residual connection and layer norm, then a ReLU
//! feed-forward layer with another residual and norm; a final layer norm
//! produces the per-position user representation. Scores are inner products
//! against the same item table used for the input embeddings.

pub mod checkpoint;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{SplitDataset, PAD_ITEM};
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, Graph, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of real items; the vocabulary is `num_items + 1`.
    pub num_items: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults (`dim = 64`).
    pub fn new(num_items: usize) -> Self {
        EncoderConfig {
            num_items,
            max_len: 50,
            dim: 64,
            layers: 2,
            heads: 1,
            dropout: 0.2,
        }
    }

    /// Two layers, one head, 256 dimensions, sequences of 50.
    pub fn full_scale(num_items: usize) -> Self {
        EncoderConfig {
            dim: 256,
            ..Self::new(num_items)
        }
    }

    pub fn vocab(&self) -> usize {
        self.num_items + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_items == 0 {
            return bad("encoder needs at least one item".into());
        }
        if self.max_len == 0 || self.dim == 0 || self.heads == 0 {
            return bad("max_len, dim and heads must be >= 1".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParameters<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

const BLOCK_NAMES: [&str; 12] = [
    "wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "ln2_gain", "ln2_bias",
];

impl<T: Real> BlockParameters<T> {
    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParameters<T> {
    pub config: EncoderConfig,
    /// `[(N+1) × d]`; row 0 is padding and stays zero.
    pub item_emb: Tensor<T>,
    /// `[max_len × d]`.
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockParameters<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

impl<T: Real> EncoderParameters<T> {
    /// Parameter names in manifest order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["item_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.blocks.len() {
            names.extend(BLOCK_NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        names.push("final_gain".into());
        names.push("final_bias".into());
        names
    }

    /// All tensors in manifest order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.item_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_gain);
        out.push(&self.final_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.item_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn zero_padding_row(&mut self) {
        for v in self.item_emb.row_mut(PAD_ITEM) {
            *v = T::zero();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderParameters<U> {
        let mut out = EncoderParameters::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Shapes for every parameter with zero data (gains included).
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.dim;
        let block = || BlockParameters {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ffn_w1: Tensor::zeros(&[d, d]),
            ffn_b1: Tensor::zeros(&[d]),
            ffn_w2: Tensor::zeros(&[d, d]),
            ffn_b2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        };
        EncoderParameters {
            config: config.clone(),
            item_emb: Tensor::zeros(&[config.vocab(), d]),
            pos_emb: Tensor::zeros(&[config.max_len, d]),
            blocks: (0..config.layers).map(|_| block()).collect(),
            final_gain: Tensor::zeros(&[d]),
            final_bias: Tensor::zeros(&[d]),
        }
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Weight matrices and embeddings ~ N(0, 0.02²) truncated at ±2σ; gains one,
/// biases zero, padding row zero.
pub fn init<T: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderParameters<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParameters::<T>::zeros(config);
    let names = params.names();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf.ends_with("gain") {
            t.data_mut().iter_mut().for_each(|v| *v = T::one());
        } else if t.shape().len() == 2 {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = T::of(truncated_normal(&mut rng, INIT_STD)));
        }
    }
    params.zero_padding_row();
    Ok(params)
}

/// Left-padded id matrix. Positions run over the last `len` slots of
/// `max_len`, so the most recent item always sits at position `max_len - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl PaddedBatch {
    /// Keeps the most recent `max_len` items of each history and pads every
    /// row to the longest one.
    pub fn left_pad<H: AsRef<[usize]>>(histories: &[H], max_len: usize) -> Self {
        let len = histories
            .iter()
            .map(|h| h.as_ref().len().min(max_len))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut ids = vec![PAD_ITEM; histories.len() * len];
        for (b, h) in histories.iter().enumerate() {
            let h = h.as_ref();
            let kept = &h[h.len().saturating_sub(max_len)..];
            let start = b * len + len - kept.len();
            ids[start..start + kept.len()].copy_from_slice(kept);
        }
        PaddedBatch {
            batch: histories.len(),
            len,
            ids,
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Encoder parameters registered as leaves on a graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub item_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: Var,
    pub final_bias: Var,
    /// Manifest order, matching [`EncoderParameters::tensors`].
    pub vars: Vec<Var>,
}

/// Puts every parameter on `g`; `trainable` controls whether they receive
/// gradients.
pub fn bind<T: Real>(g: &mut Graph<T>, params: &EncoderParameters<T>, trainable: bool) -> BoundEncoder {
    let vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let blocks = vars[2..2 + 12 * params.blocks.len()]
        .chunks(12)
        .map(|v| BoundBlock {
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            ln1_gain: v[4],
            ln1_bias: v[5],
            ffn_w1: v[6],
            ffn_b1: v[7],
            ffn_w2: v[8],
            ffn_b2: v[9],
            ln2_gain: v[10],
            ln2_bias: v[11],
        })
        .collect();
    let n = vars.len();
    BoundEncoder {
        config: params.config.clone(),
        item_emb: vars[0],
        pos_emb: vars[1],
        blocks,
        final_gain: vars[n - 2],
        final_bias: vars[n - 1],
        vars,
    }
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
    let Some(rng) = rng.as_mut() else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mask = g.constant(Tensor::new(&shape, mask)?);
    g.mul(x, mask)
}

/// Runs the encoder. Returns `[batch·len × d]` where row `b·len + t` is the
/// representation after position `t` of history `b`. Dropout is applied only
/// when `train_rng` is given.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    enc: &BoundEncoder,
    batch: &PaddedBatch,
    mut train_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let cfg = &enc.config;
    let (b, len, d) = (batch.batch, batch.len, cfg.dim);
    if len > cfg.max_len {
        return Err(Error::Shape(format!("batch length {len} exceeds max_len {}", cfg.max_len)));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&i| i > cfg.num_items) {
        return Err(Error::OutOfRange {
            what: "item ids",
            index: bad,
            size: cfg.vocab(),
        });
    }
    let rows = b * len;
    let items = g.gather_rows(enc.item_emb, &batch.ids)?;
    let offset = cfg.max_len - len;
    let pos_ids: Vec<usize> = (0..rows).map(|r| offset + r % len).collect();
    let pos = g.gather_rows(enc.pos_emb, &pos_ids)?;
    let mut x = g.add(items, pos)?;
    x = dropout(g, x, cfg.dropout, &mut train_rng)?;

    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let mut mask = Vec::with_capacity(b * heads * len * len);
    for s in 0..b {
        let row = batch.row(s);
        for _ in 0..heads {
            for q in 0..len {
                mask.extend((0..len).map(|k| k <= q && row[k] != PAD_ITEM));
            }
        }
    }
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

    let split_heads = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        if heads == 1 {
            return g.reshape(v, &[b, len, dh]);
        }
        let v = g.reshape(v, &[b, len, heads, dh])?;
        let v = g.swap_middle(v)?;
        g.reshape(v, &[b * heads, len, dh])
    };

    for blk in &enc.blocks {
        let q = g.matmul(x, blk.wq)?;
        let k = g.matmul(x, blk.wk)?;
        let v = g.matmul(x, blk.wv)?;
        let (q, k, v) = (split_heads(g, q)?, split_heads(g, k)?, split_heads(g, v)?);
        let att = g.batch_matmul(q, k, false, true)?;
        let att = g.scale(att, inv_sqrt);
        let att = g.masked_softmax(att, Some(&mask))?;
        let ctx = g.batch_matmul(att, v, false, false)?;
        let ctx = if heads == 1 {
            g.reshape(ctx, &[rows, d])?
        } else {
            let c = g.reshape(ctx, &[b, heads, len, dh])?;
            let c = g.swap_middle(c)?;
            g.reshape(c, &[rows, d])?
        };
        let a = g.matmul(ctx, blk.wo)?;
        let a = dropout(g, a, cfg.dropout, &mut train_rng)?;
        let h = g.add(x, a)?;
        x = g.layer_norm(h, blk.ln1_gain, blk.ln1_bias)?;

        let f = g.matmul(x, blk.ffn_w1)?;
        let f = g.add(f, blk.ffn_b1)?;
        let f = g.relu(f);
        let f = dropout(g, f, cfg.dropout, &mut train_rng)?;
        let f = g.matmul(f, blk.ffn_w2)?;
        let f = g.add(f, blk.ffn_b2)?;
        let f = dropout(g, f, cfg.dropout, &mut train_rng)?;
        let h = g.add(x, f)?;
        x = g.layer_norm(h, blk.ln2_gain, blk.ln2_bias)?;
    }
    g.layer_norm(x, enc.final_gain, enc.final_bias)
}

/// `ŝ[p, c] = ⟨user_repr[p], item_emb[ids[p·C + c]]⟩`.
pub fn score<T: Real>(g: &mut Graph<T>, user_repr: Var, item_emb: Var, ids: &[usize]) -> Result<Var> {
    g.gather_dot(user_repr, item_emb, ids)
}

/// Final-position representation of each history, `[histories × d]`,
/// evaluated without dropout.
pub fn represent<T: Real, H: AsRef<[usize]>>(params: &EncoderParameters<T>, histories: &[H]) -> Result<Tensor<T>> {
    if histories.is_empty() {
        return Ok(Tensor::zeros(&[0, params.config.dim]));
    }
    let mut g = Graph::new();
    let enc = bind(&mut g, params, false);
    let batch = PaddedBatch::left_pad(histories, params.config.max_len);
    let out = encode(&mut g, &enc, &batch, None)?;
    let d = params.config.dim;
    let all = g.value(out);
    let mut data = Vec::with_capacity(batch.batch * d);
    for b in 0..batch.batch {
        data.extend_from_slice(all.row(b * batch.len + batch.len - 1));
    }
    Tensor::new(&[batch.batch, d], data)
}

/// Scores of every vocabulary entry (`[histories × (N+1)]`, column 0 is the
/// padding item) for each history.
pub fn score_all<T: Real, H: AsRef<[usize]>>(params: &EncoderParameters<T>, histories: &[H]) -> Result<Tensor<T>> {
    let reps = represent(params, histories)?;
    let (u, d, v) = (reps.shape()[0], params.config.dim, params.config.vocab());
    Tensor::new(&[u, v], matmul_nt(reps.data(), params.item_emb.data(), u, d, v))
}

/// Every `(prefix, next item)` pair of each train sequence, prefixes cut to
/// the most recent `max_len` items.
pub fn training_targets(split: &SplitDataset, max_len: usize) -> Vec<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    for u in &split.users {
        for t in 1..u.train.len() {
            let prefix = &u.train[t.saturating_sub(max_len)..t];
            out.push((prefix.to_vec(), u.train[t]));
        }
    }
    out
}
