//! Central finite-difference gradient checks.
//!
//! [`check`] compares the tape's gradients against
//! `(f(x + h) − f(x − h)) / 2h` for every element of every input, rebuilding
//! the graph from scratch for each perturbation. [`suite`] runs the standard
//! set of checks over the graph ops, all losses and a tiny encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{self, EncoderConfig, EncoderParameters, PaddedBatch};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossKind};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so gradients near zero are judged
/// on absolute error instead.
pub const DEFAULT_FLOOR: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const ENCODER_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Input and flat element index of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Checks `∂build/∂inputs`. `build` receives one leaf per input and must
/// return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, floor: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| if grads { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = build(&mut g, &vars)?;
        let value = g.value(out).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let gs = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for t in 0..inputs.len() {
        for e in 0..inputs[t].len() {
            let x = inputs[t].data()[e];
            work[t].data_mut()[e] = x + step;
            let (up, _) = eval(&work, false)?;
            work[t].data_mut()[e] = x - step;
            let (down, _) = eval(&work, false)?;
            work[t].data_mut()[e] = x;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t].data()[e];
            let err = relative_error(a, numeric, floor);
            if !err.is_finite() {
                return Err(Error::InvalidValue(format!("non-finite gradient at input {t}[{e}]")));
            }
            if err >= report.max_rel_err {
                report = GradCheck {
                    max_rel_err: err,
                    worst: (t, e),
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Outcome of one named check in [`suite`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Inputs for a loss check: `[P]` vectors or `[P×C]` sets in `[−5, 5]`.
pub fn loss_inputs(kind: LossKind, p: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    if kind.uses_sets() {
        vec![
            uniform(rng, &[p], -5.0, 5.0),
            uniform(rng, &[p, 3], -5.0, 5.0),
            uniform(rng, &[p, 4], -5.0, 5.0),
        ]
    } else {
        (0..3).map(|_| uniform(rng, &[p], -5.0, 5.0)).collect()
    }
}

pub fn check_loss(kind: LossKind, gamma: f64, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::new(kind, gamma)?;
    let inputs = loss_inputs(kind, 4, &mut rng);
    check(&inputs, DEFAULT_STEP, DEFAULT_FLOOR, |g, v| {
        Ok(losses::build(g, &cfg, v[0], v[1], Some(v[2]))?.total)
    })
}

/// Tiny encoder used by the end-to-end check.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        num_items: 6,
        max_len: 4,
        dim: 4,
        layers: 1,
        heads: 1,
        dropout: 0.0,
    }
}

/// Random parameters with a larger spread than the initializer, so every
/// path through the network carries a gradient well above rounding noise.
pub fn spread_parameters(config: &EncoderConfig, std: f64, seed: u64) -> Result<EncoderParameters<f64>> {
    let mut p = encoder::init::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-std..std) * 3f64.sqrt();
        }
    }
    p.zero_padding_row();
    Ok(p)
}

/// Encoder forward on two histories (one padded), scores against targets and
/// sampled negatives, then a transitive BPR loss.
pub fn check_encoder(config: &EncoderConfig, seed: u64) -> Result<GradCheck> {
    let params = spread_parameters(config, 0.3, seed)?;
    let names = params.names();
    let inputs: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let histories = [vec![1, 2, 3, 4], vec![5, 6]];
    let batch = PaddedBatch::left_pad(&histories, config.max_len);
    let rows = batch.batch * batch.len;
    let targets: Vec<usize> = (0..rows).map(|r| 1 + (r * 5 + 2) % config.num_items).collect();
    let neg_j: Vec<usize> = (0..rows).map(|r| 1 + (r * 3 + 1) % config.num_items).collect();
    let neg_k: Vec<usize> = (0..rows).map(|r| 1 + (r * 7 + 4) % config.num_items).collect();
    let cfg = LossConfig::new(LossKind::TransBpr, 1.0)?;
    let shape_of = |name: &str| inputs[names.iter().position(|n| n == name).expect("name")].shape().to_vec();
    debug_assert_eq!(shape_of("item_emb"), vec![config.vocab(), config.dim]);

    check(&inputs, DEFAULT_STEP, DEFAULT_FLOOR, |g, vars| {
        let mut bound = encoder::bind(g, &params, false);
        remap(&mut bound, vars);
        let h = encoder::encode(g, &bound, &batch, None)?;
        let si = encoder::score(g, h, bound.item_emb, &targets)?;
        let sj = encoder::score(g, h, bound.item_emb, &neg_j)?;
        let sk = encoder::score(g, h, bound.item_emb, &neg_k)?;
        let (si, sj, sk) = (g.reshape(si, &[rows])?, g.reshape(sj, &[rows])?, g.reshape(sk, &[rows])?);
        Ok(losses::build(g, &cfg, si, sj, sk.into())?.total)
    })
}

/// Points a bound encoder at externally created leaves (manifest order).
fn remap(bound: &mut encoder::BoundEncoder, vars: &[Var]) {
    bound.item_emb = vars[0];
    bound.pos_emb = vars[1];
    for (l, b) in bound.blocks.iter_mut().enumerate() {
        let v = &vars[2 + 12 * l..2 + 12 * (l + 1)];
        b.wq = v[0];
        b.wk = v[1];
        b.wv = v[2];
        b.wo = v[3];
        b.ln1_gain = v[4];
        b.ln1_bias = v[5];
        b.ffn_w1 = v[6];
        b.ffn_b1 = v[7];
        b.ffn_w2 = v[8];
        b.ffn_b2 = v[9];
        b.ln2_gain = v[10];
        b.ln2_bias = v[11];
    }
    let n = vars.len();
    bound.final_gain = vars[n - 2];
    bound.final_bias = vars[n - 1];
    bound.vars = vars.to_vec();
}

fn op_checks(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, fl) = (DEFAULT_STEP, DEFAULT_FLOOR);
    let mut out = Vec::new();
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2], -1.0, 1.0);
    out.push((
        "matmul".into(),
        check(&[a.clone(), b, w.clone()], h, fl, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let m = g.mul(m, v[2])?;
            Ok(g.sum(m))
        })?,
    ));
    let gain = uniform(&mut rng, &[4], 0.5, 1.5);
    let bias = uniform(&mut rng, &[4], -0.5, 0.5);
    let wl = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    out.push((
        "layer_norm".into(),
        check(&[a.clone(), gain, bias, wl.clone()], h, fl, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            let y = g.mul(y, v[3])?;
            Ok(g.sum(y))
        })?,
    ));
    out.push((
        "softmax_ce".into(),
        check(std::slice::from_ref(&a), h, fl, |g, v| {
            let y = g.softmax_ce(v[0])?;
            g.mean(y)
        })?,
    ));
    out.push((
        "logsumexp".into(),
        check(std::slice::from_ref(&a), h, fl, |g, v| {
            let y = g.logsumexp(v[0])?;
            g.mean(y)
        })?,
    ));
    let causal: Vec<bool> = (0..3).flat_map(|q| (0..4).map(move |k| k <= q + 1)).collect();
    out.push((
        "masked_softmax".into(),
        check(&[a.clone(), wl], h, fl, |g, v| {
            let y = g.masked_softmax(v[0], Some(&causal))?;
            let y = g.mul(y, v[1])?;
            Ok(g.sum(y))
        })?,
    ));
    let user = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    let table = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    let cw = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    out.push((
        "gather_dot".into(),
        check(&[user, table, cw], h, fl, |g, v| {
            let s = g.gather_dot(v[0], v[1], &[1, 4, 1, 0, 2, 3])?;
            let s = g.mul(s, v[2])?;
            Ok(g.sum(s))
        })?,
    ));
    out.push((
        "gather_rows".into(),
        check(&[a, w], h, fl, |g, v| {
            let r = g.gather_rows(v[0], &[2, 0, 2])?;
            let r = g.sigmoid(r);
            Ok(g.sum(r))
        })?,
    ));
    Ok(out)
}

/// Every standard check with its tolerance.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let entry = |name: String, c: GradCheck, tol: f64| SuiteEntry {
        name,
        max_rel_err: c.max_rel_err,
        tolerance: tol,
        checked: c.checked,
        passed: c.max_rel_err <= tol,
    };
    let mut out = Vec::new();
    for (name, c) in op_checks(seed)? {
        out.push(entry(format!("op/{name}"), c, OP_TOLERANCE));
    }
    for kind in LossKind::ALL {
        let c = check_loss(kind, 1.0, seed)?;
        out.push(entry(format!("loss/{kind}"), c, LOSS_TOLERANCE));
    }
    let c = check_encoder(&tiny_encoder_config(), seed)?;
    out.push(entry("encoder/tiny".into(), c, ENCODER_TOLERANCE));
    Ok(out)
}
