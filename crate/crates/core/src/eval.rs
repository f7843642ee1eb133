//! Full-pool ranking metrics and popularity analyses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{SplitDataset, UserSplit};
use crate::encoder::{score_all, EncoderParameters};
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::trainer::TrajectoryLog;

pub const DEFAULT_K: usize = 10;
pub const NUM_BUCKETS: usize = 5;

/// 1-indexed rank of `target` among items `1..scores.len()`.
///
/// `scores[i]` is the score of item `i` (slot 0 is padding and ignored).
/// Items with a higher score, or an equal score and a smaller id, rank
/// ahead. Items for which `excluded` returns true leave the pool, except the
/// target itself. A non-finite target score ranks last.
pub fn rank_from_scores<T: Real>(scores: &[T], target: usize, excluded: &dyn Fn(usize) -> bool) -> Result<usize> {
    if target == 0 || target >= scores.len() {
        return Err(Error::OutOfRange {
            what: "target item",
            index: target,
            size: scores.len(),
        });
    }
    let st = scores[target];
    let pool = (1..scores.len()).filter(|&i| i == target || !excluded(i));
    if !st.is_finite() {
        return Ok(pool.count());
    }
    let ahead = pool
        .filter(|&i| i != target)
        .filter(|&i| {
            let s = scores[i];
            s > st || (s == st && i < target)
        })
        .count();
    Ok(1 + ahead)
}

/// Rank of `target` given a user's history, scored over the full pool.
pub fn rank_of_target<T: Real>(
    params: &EncoderParameters<T>,
    history: &[usize],
    target: usize,
    exclude: Option<&[usize]>,
) -> Result<usize> {
    let scores = score_all(params, &[history])?;
    let excluded = |i: usize| exclude.is_some_and(|e| e.contains(&i));
    rank_from_scores(scores.data(), target, &excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub n_users: usize,
}

/// HR@k and NDCG@k for one relevant item per user.
pub fn metrics(ranks: &[usize], k: usize) -> Result<MetricReport> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("ranks"));
    }
    if k == 0 {
        return Err(Error::InvalidValue("k must be >= 1".into()));
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::InvalidValue(format!("rank {bad} is not 1-indexed")));
    }
    let n = ranks.len() as f64;
    let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(MetricReport {
        k,
        hr: hits / n,
        ndcg: gain / n,
        n_users: ranks.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Valid,
    Test,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Valid => "valid",
            Stage::Test => "test",
        }
    }
}

/// History and held-out target for a user at a stage. The test history
/// includes the validation item.
pub fn stage_input(user: &UserSplit, stage: Stage) -> (Vec<usize>, usize) {
    match stage {
        Stage::Valid => (user.train.clone(), user.valid),
        Stage::Test => {
            let mut h = user.train.clone();
            h.push(user.valid);
            (h, user.test)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    /// Drop the user's history items from the ranking pool.
    pub exclude_history: bool,
    /// Users scored per forward pass.
    pub chunk_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: DEFAULT_K,
            exclude_history: false,
            chunk_size: 256,
        }
    }
}

/// Target rank of every user, in split order. Chunks are scored in
/// parallel; results do not depend on the thread count.
pub fn user_ranks<T: Real>(
    params: &EncoderParameters<T>,
    split: &SplitDataset,
    stage: Stage,
    cfg: &EvalConfig,
) -> Result<Vec<usize>> {
    let chunk = cfg.chunk_size.max(1);
    let per_chunk: Vec<Vec<usize>> = split
        .users
        .par_chunks(chunk)
        .map(|users| -> Result<Vec<usize>> {
            let inputs: Vec<(Vec<usize>, usize)> = users.iter().map(|u| stage_input(u, stage)).collect();
            let histories: Vec<&[usize]> = inputs.iter().map(|(h, _)| h.as_slice()).collect();
            let scores = score_all(params, &histories)?;
            inputs
                .iter()
                .enumerate()
                .map(|(r, (h, target))| {
                    let excluded = |i: usize| cfg.exclude_history && h.contains(&i);
                    rank_from_scores(scores.row(r), *target, &excluded)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.concat())
}

pub fn evaluate<T: Real>(
    params: &EncoderParameters<T>,
    split: &SplitDataset,
    stage: Stage,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    metrics(&user_ranks(params, split, stage, cfg)?, cfg.k)
}

/// Items `1..=N` ordered by train count descending (ties by id), cut into
/// `n` contiguous buckets whose sizes differ by at most one.
pub fn popularity_buckets(item_counts: &[usize], n: usize) -> Result<Vec<Vec<usize>>> {
    let num_items = item_counts.len().saturating_sub(1);
    if n == 0 || num_items < n {
        return Err(Error::CatalogTooSmall {
            needed: n.max(1),
            available: num_items,
        });
    }
    let mut items: Vec<usize> = (1..=num_items).collect();
    items.sort_by(|&a, &b| item_counts[b].cmp(&item_counts[a]).then(a.cmp(&b)));
    let (base, extra) = (num_items / n, num_items % n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for b in 0..n {
        let len = base + usize::from(b < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub index: usize,
    pub items: Vec<usize>,
    /// Mean score over users and the bucket's items.
    pub mean_score: f64,
    /// Standard error of `mean_score`, with per-item means (averaged over
    /// users) as the sample.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub buckets: Vec<Bucket>,
    pub n_users: usize,
}

impl BucketReport {
    pub fn means(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.mean_score).collect()
    }
}

/// Mean score of every item over all users, using test-time histories.
pub fn item_mean_scores<T: Real>(params: &EncoderParameters<T>, split: &SplitDataset, chunk: usize) -> Result<Vec<f64>> {
    if split.users.is_empty() {
        return Err(Error::EmptyInput("split has no users"));
    }
    let vocab = params.config.vocab();
    let sums: Vec<Vec<f64>> = split
        .users
        .par_chunks(chunk.max(1))
        .map(|users| -> Result<Vec<f64>> {
            let histories: Vec<Vec<usize>> = users.iter().map(|u| stage_input(u, Stage::Test).0).collect();
            let scores = score_all(params, &histories)?;
            let mut acc = vec![0.0; vocab];
            for r in 0..users.len() {
                for (a, s) in acc.iter_mut().zip(scores.row(r)) {
                    *a += s.as_f64();
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let n = split.users.len() as f64;
    let mut means = vec![0.0; vocab];
    for part in &sums {
        for (m, s) in means.iter_mut().zip(part) {
            *m += s;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    Ok(means)
}

/// Average recommendation score of each popularity quintile.
pub fn bucket_scores<T: Real>(params: &EncoderParameters<T>, split: &SplitDataset, chunk: usize) -> Result<BucketReport> {
    let groups = popularity_buckets(&split.item_counts, NUM_BUCKETS)?;
    let means = item_mean_scores(params, split, chunk)?;
    let buckets = groups
        .into_iter()
        .enumerate()
        .map(|(index, items)| {
            let vals: Vec<f64> = items.iter().map(|&i| means[i]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Bucket {
                index,
                items,
                mean_score: mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect();
    Ok(BucketReport {
        buckets,
        n_users: split.users.len(),
    })
}

pub fn is_non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] >= w[1])
}

pub fn is_non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// Fraction of users whose mean score over top-half popular items exceeds
/// their mean over bottom-half items. Items the user interacted with are
/// left out of both halves.
pub fn top_half_preference_rate<T: Real>(params: &EncoderParameters<T>, split: &SplitDataset) -> Result<f64> {
    let all = popularity_buckets(&split.item_counts, 2)?;
    let (top, bottom) = (&all[0], &all[1]);
    let inputs: Vec<(Vec<usize>, usize)> = split.users.iter().map(|u| stage_input(u, Stage::Test)).collect();
    let histories: Vec<&[usize]> = inputs.iter().map(|(h, _)| h.as_slice()).collect();
    let scores = score_all(params, &histories)?;
    let mut wins = 0usize;
    for (r, (h, t)) in inputs.iter().enumerate() {
        let row = scores.row(r);
        let mean = |items: &[usize]| {
            let kept: Vec<f64> = items
                .iter()
                .filter(|&&i| i != *t && !h.contains(&i))
                .map(|&i| row[i].as_f64())
                .collect();
            kept.iter().sum::<f64>() / kept.len().max(1) as f64
        };
        if mean(top) > mean(bottom) {
            wins += 1;
        }
    }
    Ok(wins as f64 / split.users.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub scheme: String,
    pub steps: usize,
    /// Mean preference term over the final 10% of steps.
    pub final_preference: f64,
    /// Least-squares slope of the preference term against step.
    pub slope: f64,
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Summarizes the preference term of each named log. All logs must cover
/// the same steps.
pub fn compare_trajectories(logs: &[(String, TrajectoryLog)]) -> Result<Vec<TrajectorySummary>> {
    let Some((_, first)) = logs.first() else {
        return Err(Error::EmptyInput("trajectory logs"));
    };
    let steps: Vec<usize> = first.rows().iter().map(|r| r.step).collect();
    if steps.is_empty() {
        return Err(Error::EmptyInput("trajectory log"));
    }
    logs.iter()
        .map(|(name, log)| {
            let own: Vec<usize> = log.rows().iter().map(|r| r.step).collect();
            if own != steps {
                return Err(Error::InvalidValue(format!(
                    "log {name:?} covers steps {}..={} ({} rows), expected {}..={} ({} rows)",
                    own.first().copied().unwrap_or(0),
                    own.last().copied().unwrap_or(0),
                    own.len(),
                    steps[0],
                    steps[steps.len() - 1],
                    steps.len()
                )));
            }
            let pref: Vec<f64> = log
                .rows()
                .iter()
                .map(|r| r.preference)
                .collect::<Option<_>>()
                .ok_or_else(|| Error::InvalidValue(format!("log {name:?} has no preference term")))?;
            let tail = steps.len().div_ceil(10);
            let final_preference = pref[pref.len() - tail..].iter().sum::<f64>() / tail as f64;
            let x: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
            Ok(TrajectorySummary {
                scheme: name.clone(),
                steps: steps.len(),
                final_preference,
                slope: ols_slope(&x, &pref),
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn trajectory_summary_csv(rows: &[TrajectorySummary]) -> String {
    let mut s = String::from("scheme,steps,final_preference,slope\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.scheme, r.steps, r.final_preference, r.slope);
    }
    s
}

pub fn write_trajectory_summary(path: &Path, rows: &[TrajectorySummary]) -> Result<()> {
    write_text(path, &trajectory_summary_csv(rows))
}

pub fn buckets_csv(report: &BucketReport) -> String {
    let mut s = String::from("bucket_index,item_count,mean_score,std_error\n");
    for b in &report.buckets {
        let _ = writeln!(s, "{},{},{},{}", b.index, b.items.len(), b.mean_score, b.std_error);
    }
    s
}

pub fn write_buckets(path: &Path, report: &BucketReport) -> Result<()> {
    write_text(path, &buckets_csv(report))
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub stage: Stage,
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub n_users: usize,
    pub config_digest: String,
}

impl MetricsFile {
    pub fn new(stage: Stage, report: &MetricReport, config_digest: impl Into<String>) -> Self {
        MetricsFile {
            stage,
            k: report.k,
            hr: report.hr,
            ndcg: report.ndcg,
            n_users: report.n_users,
            config_digest: config_digest.into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_text(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init, EncoderConfig};
    use crate::trainer::TrajectoryRow;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sort every item by (score desc, id asc) and find the target.
    fn brute_force_rank(scores: &[f64], target: usize, excluded: &[usize]) -> usize {
        let mut items: Vec<usize> = (1..scores.len())
            .filter(|i| *i == target || !excluded.contains(i))
            .collect();
        items.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        items.iter().position(|&i| i == target).unwrap() + 1
    }

    #[test]
    fn rank_examples() {
        let none = |_: usize| false;
        assert_eq!(rank_from_scores(&[0.0, 0.1, 0.9, 0.3], 2, &none).unwrap(), 1);
        let flat = [0.0f64; 6];
        assert_eq!(rank_from_scores(&flat, 1, &none).unwrap(), 1);
        assert_eq!(rank_from_scores(&flat, 5, &none).unwrap(), 5);
        assert!(rank_from_scores(&flat, 0, &none).is_err());
        assert!(rank_from_scores(&flat, 6, &none).is_err());
        // exclusion removes items ahead of the target but never the target
        let s = [0.0, 0.9, 0.8, 0.1];
        assert_eq!(rank_from_scores(&s, 3, &|i| i == 1 || i == 3).unwrap(), 2);
        assert_eq!(rank_from_scores(&[0.0, 1.0, f64::NAN], 2, &none).unwrap(), 2);
    }

    #[test]
    fn ranks_match_full_sort_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.gen_range(1..=1000);
            // coarse grid so ties are common
            let scores: Vec<f64> = (0..=n).map(|_| (rng.gen_range(0..20) as f64) * 0.25).collect();
            let target = rng.gen_range(1..=n);
            let excluded: Vec<usize> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(1..=n)).collect();
            let got = rank_from_scores(&scores, target, &|i| excluded.contains(&i)).unwrap();
            assert_eq!(got, brute_force_rank(&scores, target, &excluded));
        }
    }

    #[test]
    fn rank_of_target_with_hand_set_embeddings() {
        let cfg = EncoderConfig {
            num_items: 5,
            max_len: 3,
            dim: 2,
            layers: 0,
            heads: 1,
            dropout: 0.0,
        };
        let mut p = init::<f64>(&cfg, 0).unwrap();
        p.item_emb
            .data_mut()
            .copy_from_slice(&[0.0, 0.0, 1.0, 0.0, 0.5, 0.5, -1.0, 0.2, 0.3, -0.4, 0.9, 0.1]);
        p.final_gain.data_mut().copy_from_slice(&[1.0, 1.0]);
        let history = [2, 4];
        let scores = score_all(&p, &[&history[..]]).unwrap();
        for target in 1..=5 {
            let want = brute_force_rank(scores.data(), target, &[]);
            assert_eq!(rank_of_target(&p, &history, target, None).unwrap(), want);
            let want = brute_force_rank(scores.data(), target, &history);
            assert_eq!(rank_of_target(&p, &history, target, Some(&history)).unwrap(), want);
        }
    }

    #[test]
    fn metric_closed_forms() {
        let m = metrics(&[1, 1, 1], 10).unwrap();
        assert_eq!((m.hr, m.ndcg, m.n_users), (1.0, 1.0, 3));
        let m = metrics(&[2], 10).unwrap();
        assert_eq!(m.hr, 1.0);
        assert!((m.ndcg - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((m.ndcg - 0.630930).abs() < 1e-6);
        let m = metrics(&[11], 10).unwrap();
        assert_eq!((m.hr, m.ndcg), (0.0, 0.0));
        assert!(matches!(metrics(&[], 10), Err(Error::EmptyInput(_))));
        assert!(metrics(&[0], 10).is_err());
    }

    proptest! {
        #[test]
        fn ndcg_bounded_by_hr_and_monotone_in_k(ranks in prop::collection::vec(1usize..40, 1..50), k in 1usize..30) {
            let a = metrics(&ranks, k).unwrap();
            let b = metrics(&ranks, k + 1).unwrap();
            prop_assert!(a.ndcg <= a.hr + 1e-15);
            prop_assert!((0.0..=1.0).contains(&a.hr) && (0.0..=1.0).contains(&a.ndcg));
            prop_assert!(b.hr >= a.hr && b.ndcg >= a.ndcg);
        }

        #[test]
        fn buckets_cover_every_item_once(counts in prop::collection::vec(0usize..30, 5..200)) {
            let mut c = vec![0];
            c.extend(counts);
            let n = c.len() - 1;
            let groups = popularity_buckets(&c, NUM_BUCKETS).unwrap();
            let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = groups.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (1..=n).collect::<Vec<_>>());
            // descending popularity across bucket boundaries
            for w in groups.windows(2) {
                let lo = w[0].iter().map(|&i| c[i]).min().unwrap();
                let hi = w[1].iter().map(|&i| c[i]).max().unwrap();
                prop_assert!(lo >= hi);
            }
        }
    }

    #[test]
    fn buckets_need_five_items() {
        assert!(popularity_buckets(&[0, 1, 2, 3, 4], 5).is_err());
        let g = popularity_buckets(&[0, 5, 5, 9, 1, 0, 2, 2], 5).unwrap();
        assert_eq!(g, vec![vec![3, 1], vec![2, 6], vec![7], vec![4], vec![5]]);
    }

    fn log(values: &[(usize, f64)]) -> TrajectoryLog {
        let mut l = TrajectoryLog::default();
        for &(step, p) in values {
            l.push(TrajectoryRow {
                step,
                total: 2.0 * p,
                original: p,
                preference: Some(p),
            });
        }
        l
    }

    #[test]
    fn planted_slopes_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<(usize, f64)> = (1..=500).map(|s| (s, 100.0 - s as f64 + rng.gen_range(-0.5..0.5))).collect();
        let b: Vec<(usize, f64)> = (1..=500).map(|s| (s, 100.0 - 2.0 * s as f64 + rng.gen_range(-0.5..0.5))).collect();
        let out = compare_trajectories(&[("weak".into(), log(&a)), ("strict".into(), log(&b))]).unwrap();
        assert!((out[0].slope + 1.0).abs() < 0.05);
        assert!((out[1].slope + 2.0).abs() < 0.1);
        assert!(out[1].final_preference < out[0].final_preference);
        let csv = trajectory_summary_csv(&out);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn identical_logs_identical_summaries_and_mismatch_errors() {
        let a = log(&[(1, 3.0), (2, 2.0), (3, 1.0)]);
        let out = compare_trajectories(&[("x".into(), a.clone()), ("y".into(), a.clone())]).unwrap();
        assert_eq!(out[0].final_preference, out[1].final_preference);
        assert_eq!(out[0].slope, out[1].slope);
        assert_eq!(out[0].final_preference, 1.0);
        let short = log(&[(1, 3.0), (2, 2.0)]);
        assert!(compare_trajectories(&[("x".into(), a.clone()), ("y".into(), short)]).is_err());
        let mut base = TrajectoryLog::default();
        base.push(TrajectoryRow {
            step: 1,
            total: 1.0,
            original: 1.0,
            preference: None,
        });
        assert!(compare_trajectories(&[("b".into(), base)]).is_err());
        assert!(compare_trajectories(&[]).is_err());
    }

    #[test]
    fn metrics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        let m = MetricsFile::new(Stage::Test, &metrics(&[1, 3, 20], 10).unwrap(), "abc");
        m.write(&path).unwrap();
        assert_eq!(MetricsFile::read(&path).unwrap(), m);
    }
}
