//! Ranking losses and their transitive extensions.
//!
//! Every loss is a per-example quantity averaged over the batch. The
//! transitive variants add `γ ·` a preference term that ranks the first
//! negative `j` above the second negative `k`; the two parts are reported
//! separately so training can log them.
//!
//! Softmax terms use `−log softmax([a, S])₀ = softplus(logsumexp(S) − a)`,
//! which keeps the set-based preference term linear in `|N_j| + |N_k|`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Default search grid for `γ`.
pub const GAMMA_GRID: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bpr,
    Bce,
    Ssm,
    TransBpr,
    TransBce,
    TransSsm,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Bpr,
        LossKind::Bce,
        LossKind::Ssm,
        LossKind::TransBpr,
        LossKind::TransBce,
        LossKind::TransSsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bpr => "bpr",
            LossKind::Bce => "bce",
            LossKind::Ssm => "ssm",
            LossKind::TransBpr => "trans_bpr",
            LossKind::TransBce => "trans_bce",
            LossKind::TransSsm => "trans_ssm",
        }
    }

    pub fn is_transitive(self) -> bool {
        matches!(self, LossKind::TransBpr | LossKind::TransBce | LossKind::TransSsm)
    }

    /// The loss a transitive variant extends (itself for base losses).
    pub fn base(self) -> LossKind {
        match self {
            LossKind::TransBpr => LossKind::Bpr,
            LossKind::TransBce => LossKind::Bce,
            LossKind::TransSsm => LossKind::Ssm,
            other => other,
        }
    }

    /// Softmax losses score negative sets rather than single negatives.
    pub fn uses_sets(self) -> bool {
        matches!(self.base(), LossKind::Ssm)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        Ok(LossConfig { kind, gamma })
    }
}

/// Batch-mean loss values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub original: f64,
    /// Absent for base losses.
    pub preference: Option<f64>,
    /// Number of examples averaged.
    pub count: usize,
}

/// Loss nodes on a graph. `total` is the scalar to differentiate.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub original: Var,
    pub preference: Option<Var>,
    pub count: usize,
}

impl LossVars {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let scalar = |v: Var| g.value(v).data()[0].as_f64();
        LossReport {
            total: scalar(self.total),
            original: scalar(self.original),
            preference: self.preference.map(scalar),
            count: self.count,
        }
    }
}

/// `−log σ(a − b)` per element.
fn neg_log_sigmoid_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let l = g.log_sigmoid(d);
    Ok(g.neg(l))
}

/// `−log σ(a) − log(1 − σ(b))` per element.
fn binary_ce<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let la = g.log_sigmoid(a);
    let nb = g.neg(b);
    let lb = g.log_sigmoid(nb);
    let s = g.add(la, lb)?;
    Ok(g.neg(s))
}

/// Row logsumexp of `set` `[P×C]` repeated `reps` times per row, `[P×reps]`.
fn expanded_lse<T: Real>(g: &mut Graph<T>, set: Var, reps: usize) -> Result<Var> {
    let lse = g.logsumexp(set)?;
    let p = g.shape(lse)[0];
    if reps == 1 {
        return g.reshape(lse, &[p, 1]);
    }
    let index = (0..p).flat_map(|r| std::iter::repeat_n(r, reps)).collect();
    g.take(lse, index, &[p, reps])
}

fn check_vector<T: Real>(g: &Graph<T>, v: Var, what: &str, p: Option<usize>) -> Result<usize> {
    let shape = g.shape(v);
    if shape.len() != 1 {
        return Err(Error::Shape(format!("{what} must be a vector, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(Error::EmptyInput("loss batch"));
    }
    match p {
        Some(p) if p != shape[0] => Err(Error::Shape(format!("{what} has {} scores, expected {p}", shape[0]))),
        _ => Ok(shape[0]),
    }
}

fn check_set<T: Real>(g: &Graph<T>, v: Var, what: &str, p: usize) -> Result<usize> {
    let shape = g.shape(v);
    if shape.len() != 2 || shape[0] != p {
        return Err(Error::Shape(format!("{what} must be [{p} × C], got {shape:?}")));
    }
    if shape[1] == 0 {
        return Err(Error::EmptyInput("negative set"));
    }
    Ok(shape[1])
}

/// Builds the configured loss.
///
/// Pairwise losses take `s_i`, `s_j`, `s_k` as `[P]` vectors. Softmax losses
/// take `s_i` as `[P]` and the negative sets `s_j`, `s_k` as `[P×J]` and
/// `[P×K]`. Base losses ignore `s_k`; transitive ones require it.
pub fn build<T: Real>(g: &mut Graph<T>, cfg: &LossConfig, s_i: Var, s_j: Var, s_k: Option<Var>) -> Result<LossVars> {
    let p = check_vector(g, s_i, "s_i", None)?;
    let s_k = if cfg.kind.is_transitive() {
        Some(s_k.ok_or_else(|| Error::Config(format!("{} needs scores for k", cfg.kind)))?)
    } else {
        None
    };

    let (per_orig, per_pref) = if cfg.kind.uses_sets() {
        let nj = check_set(g, s_j, "S_j", p)?;
        let lse_j = expanded_lse(g, s_j, 1)?;
        let si = g.reshape(s_i, &[p, 1])?;
        let orig = neg_log_sigmoid_diff(g, si, lse_j)?;
        let pref = match s_k {
            Some(s_k) => {
                check_set(g, s_k, "S_k", p)?;
                let lse_k = expanded_lse(g, s_k, nj)?;
                Some(neg_log_sigmoid_diff(g, s_j, lse_k)?)
            }
            None => None,
        };
        (orig, pref)
    } else {
        check_vector(g, s_j, "s_j", Some(p))?;
        if let Some(s_k) = s_k {
            check_vector(g, s_k, "s_k", Some(p))?;
        }
        match cfg.kind.base() {
            LossKind::Bpr => (
                neg_log_sigmoid_diff(g, s_i, s_j)?,
                s_k.map(|s_k| neg_log_sigmoid_diff(g, s_j, s_k)).transpose()?,
            ),
            _ => (
                binary_ce(g, s_i, s_j)?,
                s_k.map(|s_k| binary_ce(g, s_j, s_k)).transpose()?,
            ),
        }
    };

    let original = g.mean(per_orig)?;
    let (total, preference) = match per_pref {
        Some(pp) => {
            let pref = g.mean(pp)?;
            let weighted = g.scale(pref, T::of(cfg.gamma));
            (g.add(original, weighted)?, Some(pref))
        }
        None => (original, None),
    };
    Ok(LossVars {
        total,
        original,
        preference,
        count: p,
    })
}

/// Scores for [`evaluate`]. See [`build`] for the expected shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInput {
    pub s_i: Tensor<f64>,
    pub s_j: Tensor<f64>,
    pub s_k: Option<Tensor<f64>>,
}

/// Loss value and its gradient with respect to each score input.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: LossReport,
    pub grad_i: Tensor<f64>,
    pub grad_j: Tensor<f64>,
    pub grad_k: Option<Tensor<f64>>,
}

pub fn evaluate(cfg: &LossConfig, input: &ScoreInput) -> Result<Evaluation> {
    let mut g = Graph::<f64>::new();
    let si = g.param(input.s_i.clone());
    let sj = g.param(input.s_j.clone());
    let sk = input.s_k.clone().map(|t| g.param(t));
    let vars = build(&mut g, cfg, si, sj, sk)?;
    g.backward(vars.total)?;
    let grad = |g: &Graph<f64>, v: Var| {
        g.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
    };
    Ok(Evaluation {
        report: vars.report(&g),
        grad_i: grad(&g, si),
        grad_j: grad(&g, sj),
        grad_k: sk.map(|v| grad(&g, v)),
    })
}

fn vector(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[v.len()], v).expect("vector shape")
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let c = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("ragged negative sets".into()));
    }
    let data: Vec<f64> = rows.concat();
    Tensor::from_f64(&[rows.len(), c], &data)
}

fn run(kind: LossKind, gamma: f64, s_i: Tensor<f64>, s_j: Tensor<f64>, s_k: Option<Tensor<f64>>) -> Result<LossReport> {
    let cfg = LossConfig::new(kind, gamma)?;
    Ok(evaluate(&cfg, &ScoreInput { s_i, s_j, s_k })?.report)
}

pub fn bpr(s_i: &[f64], s_j: &[f64]) -> Result<LossReport> {
    run(LossKind::Bpr, 0.0, vector(s_i), vector(s_j), None)
}

pub fn bce(s_i: &[f64], s_j: &[f64]) -> Result<LossReport> {
    run(LossKind::Bce, 0.0, vector(s_i), vector(s_j), None)
}

/// `s_neg[p]` holds the scores of example `p`'s negative set.
pub fn ssm(s_i: &[f64], s_neg: &[Vec<f64>]) -> Result<LossReport> {
    run(LossKind::Ssm, 0.0, vector(s_i), matrix(s_neg)?, None)
}

pub fn trans_bpr(s_i: &[f64], s_j: &[f64], s_k: &[f64], gamma: f64) -> Result<LossReport> {
    run(LossKind::TransBpr, gamma, vector(s_i), vector(s_j), Some(vector(s_k)))
}

pub fn trans_bce(s_i: &[f64], s_j: &[f64], s_k: &[f64], gamma: f64) -> Result<LossReport> {
    run(LossKind::TransBce, gamma, vector(s_i), vector(s_j), Some(vector(s_k)))
}

pub fn trans_ssm(s_i: &[f64], s_nj: &[Vec<f64>], s_nk: &[Vec<f64>], gamma: f64) -> Result<LossReport> {
    run(LossKind::TransSsm, gamma, vector(s_i), matrix(s_nj)?, Some(matrix(s_nk)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    // Independent scalar oracles: direct formulas, no stabilization tricks.
    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("gbpr".parse::<LossKind>().is_err());
        assert!(LossConfig::new(LossKind::Bpr, -0.1).is_err());
    }

    #[test]
    fn bpr_examples() {
        close(bpr(&[0.3], &[0.3]).unwrap().total, LN2, 1e-12);
        assert!(bpr(&[50.0], &[0.0]).unwrap().total < 1e-20);
        close(bpr(&[1.0], &[0.0]).unwrap().total, softplus(-1.0), 1e-12);
        close(softplus(-1.0), 0.313262, 1e-6);
        assert!(bpr(&[1.0, 2.0], &[0.0]).is_err());
        assert!(bpr(&[], &[]).is_err());
    }

    #[test]
    fn bce_examples() {
        close(bce(&[0.0], &[0.0]).unwrap().total, 2.0 * LN2, 1e-12);
        assert!(bce(&[50.0], &[-50.0]).unwrap().total < 1e-20);
        close(bce(&[1.0], &[1.0]).unwrap().total, softplus(-1.0) + softplus(1.0), 1e-12);
        close(softplus(-1.0) + softplus(1.0), 1.626523, 1e-6);
    }

    #[test]
    fn ssm_examples() {
        let r = ssm(&[0.7], &[vec![0.7; 100]]).unwrap();
        close(r.total, 101f64.ln(), 1e-12);
        close(101f64.ln(), 4.615121, 1e-6);
        assert!(ssm(&[50.0], &[vec![0.0; 3]]).unwrap().total < 1e-20);
        let direct = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        close(ssm(&[1.0], &[vec![0.0, 0.0]]).unwrap().total, direct, 1e-12);
        close(direct, 0.551444, 1e-6);
        assert!(matches!(ssm(&[1.0], &[vec![]]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn trans_bpr_examples() {
        close(trans_bpr(&[0.0], &[0.0], &[0.0], 1.0).unwrap().total, 2.0 * LN2, 1e-12);
        close(trans_bpr(&[0.0], &[0.0], &[0.0], 0.5).unwrap().total, 1.5 * LN2, 1e-12);
        let r = trans_bpr(&[0.0], &[0.0], &[0.0], 1.0).unwrap();
        close(r.original, LN2, 1e-12);
        close(r.preference.unwrap(), LN2, 1e-12);
    }

    #[test]
    fn trans_bce_examples() {
        close(trans_bce(&[0.0], &[0.0], &[0.0], 1.0).unwrap().total, 4.0 * LN2, 1e-12);
        close(trans_bce(&[50.0], &[0.0], &[-50.0], 1.0).unwrap().total, 2.0 * LN2, 1e-12);
    }

    #[test]
    fn trans_ssm_examples() {
        let r = trans_ssm(&[0.2], &[vec![0.2; 50]], &[vec![0.2; 50]], 1.0).unwrap();
        close(r.total, 2.0 * 51f64.ln(), 1e-12);
        close(2.0 * 51f64.ln(), 7.863651, 1e-6);
        let e = 1f64.exp();
        let direct = ((e + 1.0).ln() - 1.0) + (1.0 + (-1f64).exp()).ln();
        close(trans_ssm(&[1.0], &[vec![0.0]], &[vec![-1.0]], 1.0).unwrap().total, direct, 1e-12);
        close(direct, 0.626523, 1e-6);
        assert!(trans_ssm(&[1.0], &[vec![0.0]], &[vec![]], 1.0).is_err());
    }

    #[test]
    fn trans_ssm_against_direct_softmax_sums() {
        // per-example oracle written straight from the definition
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 3;
        let si: Vec<f64> = (0..p).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let nj: Vec<Vec<f64>> = (0..p).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let nk: Vec<Vec<f64>> = (0..p).map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let gamma = 1.5;
        let mut want = 0.0;
        for e in 0..p {
            let zj: f64 = nj[e].iter().map(|s| s.exp()).sum();
            let orig = -(si[e].exp() / (si[e].exp() + zj)).ln();
            let zk: f64 = nk[e].iter().map(|s| s.exp()).sum();
            let pref: f64 = nj[e].iter().map(|s| -(s.exp() / (s.exp() + zk)).ln()).sum::<f64>() / 4.0;
            want += orig + gamma * pref;
        }
        want /= p as f64;
        close(trans_ssm(&si, &nj, &nk, gamma).unwrap().total, want, 1e-12);
    }

    fn random_input(rng: &mut ChaCha8Rng, kind: LossKind, p: usize) -> ScoreInput {
        let mut vals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect() };
        if kind.uses_sets() {
            ScoreInput {
                s_i: vector(&vals(p)),
                s_j: Tensor::from_f64(&[p, 3], &vals(3 * p)).unwrap(),
                s_k: Some(Tensor::from_f64(&[p, 4], &vals(4 * p)).unwrap()),
            }
        } else {
            ScoreInput {
                s_i: vector(&vals(p)),
                s_j: vector(&vals(p)),
                s_k: Some(vector(&vals(p))),
            }
        }
    }

    #[test]
    fn gamma_zero_reduces_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in [LossKind::TransBpr, LossKind::TransBce, LossKind::TransSsm] {
            for _ in 0..1000 {
                let p = rng.gen_range(1..4);
                let input = random_input(&mut rng, kind, p);
                let trans = evaluate(&LossConfig::new(kind, 0.0).unwrap(), &input).unwrap();
                let base = evaluate(&LossConfig::new(kind.base(), 0.0).unwrap(), &input).unwrap();
                assert_eq!(trans.report.total, base.report.total);
                assert_eq!(trans.grad_i, base.grad_i);
            }
        }
    }

    #[test]
    fn decomposition_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [LossKind::TransBpr, LossKind::TransBce, LossKind::TransSsm] {
            for gamma in GAMMA_GRID {
                let input = random_input(&mut rng, kind, 6);
                let r = evaluate(&LossConfig::new(kind, gamma).unwrap(), &input).unwrap().report;
                close(r.total, r.original + gamma * r.preference.unwrap(), 1e-9);
                assert_eq!(r.count, 6);
            }
        }
        let base = bpr(&[1.0], &[0.0]).unwrap();
        assert_eq!(base.preference, None);
        assert_eq!(base.total, base.original);
    }

    #[test]
    fn gradient_signs_at_equal_scores() {
        let cfg = LossConfig::new(LossKind::TransBpr, 1.0).unwrap();
        let input = ScoreInput {
            s_i: vector(&[0.4]),
            s_j: vector(&[0.4]),
            s_k: Some(vector(&[0.4])),
        };
        let ev = evaluate(&cfg, &input).unwrap();
        assert_eq!(ev.grad_j.data()[0], 0.0);
        close(ev.grad_i.data()[0], -0.5, 1e-15);
        close(ev.grad_k.unwrap().data()[0], 0.5, 1e-15);
    }

    #[test]
    fn transitive_needs_k() {
        let mut g = Graph::<f64>::new();
        let a = g.param(vector(&[0.0]));
        let b = g.param(vector(&[0.0]));
        let cfg = LossConfig::new(LossKind::TransBpr, 1.0).unwrap();
        assert!(matches!(build(&mut g, &cfg, a, b, None), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn bpr_family_gradient_signs(si in -5.0..5.0f64, sj in -5.0..5.0f64, sk in -5.0..5.0f64, gamma in 0.01..2.0f64) {
            let cfg = LossConfig::new(LossKind::TransBpr, gamma).unwrap();
            let input = ScoreInput { s_i: vector(&[si]), s_j: vector(&[sj]), s_k: Some(vector(&[sk])) };
            let ev = evaluate(&cfg, &input).unwrap();
            prop_assert!(ev.grad_i.data()[0] < 0.0);
            prop_assert!(ev.grad_k.unwrap().data()[0] > 0.0);
        }

        #[test]
        fn trans_bpr_monotone(si in -5.0..5.0f64, sj in -5.0..5.0f64, sk in -5.0..5.0f64, d in 0.01..1.0f64) {
            let at = |a: f64, c: f64| trans_bpr(&[a], &[sj], &[c], 1.0).unwrap().total;
            prop_assert!(at(si + d, sk) < at(si, sk));
            prop_assert!(at(si, sk + d) > at(si, sk));
        }

        #[test]
        fn translation_invariance(seed in 0u64..1000, c in -10.0..10.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for kind in [LossKind::Bpr, LossKind::Ssm, LossKind::TransBpr, LossKind::TransSsm] {
                let input = random_input(&mut rng, kind, 2);
                let shift = |t: &Tensor<f64>| Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect()).unwrap();
                let moved = ScoreInput {
                    s_i: shift(&input.s_i),
                    s_j: shift(&input.s_j),
                    s_k: input.s_k.as_ref().map(shift),
                };
                let cfg = LossConfig::new(kind, 1.0).unwrap();
                let a = evaluate(&cfg, &input).unwrap().report.total;
                let b = evaluate(&cfg, &moved).unwrap().report.total;
                prop_assert!((a - b).abs() <= 1e-9, "{kind}: {a} vs {b}");
            }
        }

        #[test]
        fn finite_for_bounded_scores(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for kind in LossKind::ALL {
                let p = 3;
                let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-50.0..=50.0)).collect() };
                let input = if kind.uses_sets() {
                    ScoreInput { s_i: vector(&v(p)), s_j: Tensor::from_f64(&[p, 2], &v(2 * p)).unwrap(), s_k: Some(Tensor::from_f64(&[p, 2], &v(2 * p)).unwrap()) }
                } else {
                    ScoreInput { s_i: vector(&v(p)), s_j: vector(&v(p)), s_k: Some(vector(&v(p))) }
                };
                let ev = evaluate(&LossConfig::new(kind, 1.5).unwrap(), &input).unwrap();
                prop_assert!(ev.report.total.is_finite());
                prop_assert!(ev.grad_i.all_finite() && ev.grad_j.all_finite());
            }
        }
    }

    #[test]
    fn bce_is_not_translation_invariant() {
        let a = bce(&[1.0], &[0.0]).unwrap().total;
        let b = bce(&[2.0], &[1.0]).unwrap().total;
        assert!((a - b).abs() > 1e-3);
    }
}
