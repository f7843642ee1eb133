use transrec::corpus::SplitDataset;
use transrec::encoder::{self, checkpoint, EncoderConfig};
use transrec::eval::{self, EvalConfig, Stage};
use transrec::losses::{self, LossConfig, LossKind};
use transrec::sampling::{BatchKind, SamplerConfig, Transitivity};
use transrec::synthetic::{self, SyntheticConfig};
use transrec::trainer::{train, TrainConfig, TrajectoryLog, BEST_CHECKPOINT};

fn small_split() -> SplitDataset {
    synthetic::split(&SyntheticConfig {
        users: 5,
        items: 12,
        min_len: 6,
        max_len: 8,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn tiny(num_items: usize) -> EncoderConfig {
    EncoderConfig {
        num_items,
        max_len: 8,
        dim: 16,
        layers: 1,
        heads: 1,
        dropout: 0.0,
    }
}

fn sampler_for(kind: LossKind, transitivity: Transitivity) -> SamplerConfig {
    SamplerConfig {
        kind: if kind.uses_sets() { BatchKind::Set } else { BatchKind::Quad },
        transitivity,
        n_j: 4,
        n_k: 4,
        ..SamplerConfig::default()
    }
}

fn fixed_steps(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 0.003,
        epochs: steps,
        max_steps: Some(steps),
        eval_every: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn overfit(kind: LossKind, gamma: f64, transitivity: Transitivity) -> f64 {
    let split = small_split();
    let out = train::<f64>(
        &split,
        &tiny(split.num_items),
        &fixed_steps(2000, 11),
        &sampler_for(kind, transitivity),
        &LossConfig::new(kind, gamma).unwrap(),
    )
    .unwrap();
    final_ratio(&out.log)
}

/// Mean objective over the last 50 steps relative to the first step.
fn final_ratio(log: &TrajectoryLog) -> f64 {
    let rows = log.rows();
    let tail = &rows[rows.len() - 50..];
    tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64 / rows[0].total
}

#[test]
fn base_losses_overfit_a_tiny_corpus() {
    for kind in [LossKind::Bpr, LossKind::Bce, LossKind::Ssm] {
        let r = overfit(kind, 1.0, Transitivity::Weak);
        assert!(r < 0.1, "{kind}: final/initial = {r}");
    }
}

#[test]
fn trans_bpr_overfits_under_strict_sampling() {
    let r = overfit(LossKind::TransBpr, 1.0, Transitivity::Strict);
    assert!(r < 0.1, "ratio {r}");
}

// Under weak sampling some (j, k) pairs arrive in both orders, which puts a
// floor under the preference term; a small weight keeps it out of the way.
#[test]
fn transitive_losses_overfit_with_light_preference_weight() {
    for kind in [LossKind::TransBpr, LossKind::TransBce, LossKind::TransSsm] {
        let r = overfit(kind, 0.01, Transitivity::Weak);
        assert!(r < 0.1, "{kind}: final/initial = {r}");
    }
}

#[test]
fn trans_bce_has_a_positive_floor() {
    // s_j enters as a negative and as a positive; the best it can do is
    // sigma(s_j) = gamma / (1 + gamma).
    for gamma in [0.5, 1.0, 1.5] {
        let q: f64 = gamma / (1.0 + gamma);
        let floor = -(1.0 - q).ln() - gamma * q.ln();
        let s_j = (q / (1.0 - q)).ln();
        let at_best = losses::trans_bce(&[60.0], &[s_j], &[-60.0], gamma).unwrap();
        assert!((at_best.total - floor).abs() < 1e-9);
        for dj in [-0.5, -0.1, 0.1, 0.5] {
            let off = losses::trans_bce(&[60.0], &[s_j + dj], &[-60.0], gamma).unwrap();
            assert!(off.total > floor);
        }
        let start = losses::trans_bce(&[0.0], &[0.0], &[0.0], gamma).unwrap();
        assert!(floor / start.total > 0.1, "gamma {gamma}");
    }
}

#[test]
fn single_user_trans_bpr_halves_its_loss() {
    let (split, _) = SplitDataset::from_sequences(3, &[vec![1, 2, 1, 2, 1, 3, 1]]).unwrap();
    let enc = EncoderConfig {
        num_items: 3,
        max_len: 4,
        dim: 8,
        layers: 1,
        heads: 1,
        dropout: 0.0,
    };
    let out = train::<f64>(
        &split,
        &enc,
        &fixed_steps(200, 5),
        &sampler_for(LossKind::TransBpr, Transitivity::Weak),
        &LossConfig::new(LossKind::TransBpr, 1.0).unwrap(),
    )
    .unwrap();
    let rows = out.log.rows();
    assert_eq!(rows.len(), 200);
    let first = rows[0].total;
    let last = rows[rows.len() - 1].total;
    assert!(last <= 0.5 * first, "first {first} last {last}");
}

#[test]
fn fixed_seed_gives_identical_trajectories() {
    let split = small_split();
    let run = |seed| {
        let tc = TrainConfig {
            eval_every: 2,
            ..fixed_steps(30, seed)
        };
        let enc = EncoderConfig {
            dropout: 0.2,
            ..tiny(split.num_items)
        };
        train::<f64>(
            &split,
            &enc,
            &tc,
            &sampler_for(LossKind::TransBpr, Transitivity::Weak),
            &LossConfig::new(LossKind::TransBpr, 1.0).unwrap(),
        )
        .unwrap()
    };
    let (a, b) = (run(9), run(9));
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.best_valid, b.best_valid);
    assert_eq!(a.final_params, b.final_params);
    assert_ne!(a.log, run(10).log);
}

#[test]
fn best_checkpoint_reproduces_validation_metrics() {
    let split = small_split();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        eval_every: 5,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..fixed_steps(60, 2)
    };
    let out = train::<f64>(
        &split,
        &tiny(split.num_items),
        &tc,
        &sampler_for(LossKind::Bpr, Transitivity::Weak),
        &LossConfig::new(LossKind::Bpr, 1.0).unwrap(),
    )
    .unwrap();
    let path = out.best_checkpoint.clone().unwrap();
    assert_eq!(path, dir.path().join(BEST_CHECKPOINT));
    let loaded = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(loaded, out.best_params);
    let again = eval::evaluate(&loaded, &split, Stage::Valid, &EvalConfig::default()).unwrap();
    let best = out.best_valid.unwrap();
    assert_eq!(again.ndcg.to_bits(), best.ndcg.to_bits());
    assert_eq!(again.hr.to_bits(), best.hr.to_bits());
}

#[test]
fn untrained_buckets_are_flat() {
    let split = synthetic::split(&SyntheticConfig::default()).unwrap();
    let params = encoder::init::<f64>(&EncoderConfig::new(split.num_items), 4).unwrap();
    let report = eval::bucket_scores(&params, &split, 128).unwrap();
    for a in &report.buckets {
        for b in &report.buckets {
            let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
            assert!(
                (a.mean_score - b.mean_score).abs() < 3.0 * se,
                "buckets {} and {} differ by {} (se {se})",
                a.index,
                b.index,
                (a.mean_score - b.mean_score).abs()
            );
        }
    }
}

#[test]
fn trans_bpr_pop_orders_popular_negatives_first() {
    let split = synthetic::split(&SyntheticConfig::default()).unwrap();
    let enc = EncoderConfig {
        dim: 32,
        max_len: 30,
        layers: 2,
        ..EncoderConfig::new(split.num_items)
    };
    let tc = TrainConfig {
        batch_size: 128,
        learning_rate: 1e-3,
        epochs: 50,
        eval_every: 0,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = train::<f32>(
        &split,
        &enc,
        &tc,
        &sampler_for(LossKind::TransBpr, Transitivity::Weak),
        &LossConfig::new(LossKind::TransBpr, 1.0).unwrap(),
    )
    .unwrap();
    let rate = eval::top_half_preference_rate(&out.final_params, &split).unwrap();
    assert!(rate >= 0.9, "rate {rate}");
}
