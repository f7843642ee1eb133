//! Synthetic interaction corpora with a planted popularity hierarchy.
//!
//! Item `i` has Zipf weight `1 / i^s`, so id order is popularity order. Each
//! item also has a fixed successor drawn from the same distribution. A user
//! sequence starts from a popular item and then either follows the
//! successor of the previous item or draws a fresh one.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RawInteraction, SplitDataset};
use crate::error::{Error, Result};
use crate::sampling::AliasTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    /// Probability of moving to the previous item's successor.
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 500,
            items: 200,
            min_len: 8,
            max_len: 30,
            zipf_exponent: 1.0,
            follow_prob: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items < 2 {
            return Err(Error::Config("synthetic corpus needs users and at least 2 items".into()));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sequence lengths must satisfy 3 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.follow_prob) || !(self.zipf_exponent >= 0.0) {
            return Err(Error::Config("follow_prob must lie in [0, 1] and zipf_exponent be >= 0".into()));
        }
        Ok(())
    }
}

/// Item sequences (ids `1..=items`), one per user.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = (1..=cfg.items).map(|i| (i as f64).powf(-cfg.zipf_exponent)).collect();
    let table = AliasTable::new(&weights)?;
    let draw = |rng: &mut ChaCha8Rng| table.draw(rng) + 1;
    let successor: Vec<usize> = (0..=cfg.items)
        .map(|i| loop {
            let s = draw(&mut rng);
            if s != i {
                break s;
            }
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.users);
    for _ in 0..cfg.users {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut seq = Vec::with_capacity(len);
        let mut cur = draw(&mut rng);
        seq.push(cur);
        while seq.len() < len {
            cur = if rng.gen_bool(cfg.follow_prob) {
                successor[cur]
            } else {
                draw(&mut rng)
            };
            seq.push(cur);
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn split(cfg: &SyntheticConfig) -> Result<SplitDataset> {
    Ok(SplitDataset::from_sequences(cfg.items, &generate(cfg)?)?.0)
}

/// Raw `(user, item, time)` records for the sequences, timestamps counting
/// up within each user.
pub fn interactions(sequences: &[Vec<usize>]) -> Vec<RawInteraction> {
    sequences
        .iter()
        .enumerate()
        .flat_map(|(u, seq)| {
            seq.iter()
                .enumerate()
                .map(move |(t, &i)| RawInteraction::new(format!("u{u}"), format!("i{i}"), t as i64))
        })
        .collect()
}

/// Tab-separated `user\titem\ttimestamp` lines.
pub fn to_tsv(sequences: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for r in interactions(sequences) {
        let _ = writeln!(s, "{}\t{}\t{}", r.user_key, r.item_key, r.timestamp);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_log, parse_tsv_str};

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|s| (8..=30).contains(&s.len())));
        assert!(a.iter().flatten().all(|&i| (1..=200).contains(&i)));
        let other = generate(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn popularity_follows_id_order() {
        let s = split(&SyntheticConfig::default()).unwrap();
        let c = &s.item_counts;
        let head: usize = c[1..=20].iter().sum();
        let tail: usize = c[181..=200].iter().sum();
        assert!(head > 5 * tail, "head {head} tail {tail}");
        assert!(c[1] > c[50]);
    }

    #[test]
    fn tsv_round_trips_through_the_parser() {
        let seqs = generate(&SyntheticConfig {
            users: 4,
            items: 10,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let parsed = parse_tsv_str(&to_tsv(&seqs), "synthetic.tsv").unwrap();
        let log = build_log(&parsed).unwrap();
        assert_eq!(log.num_users(), 4);
        assert_eq!(log.num_events(), seqs.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn bad_configs_rejected() {
        let cfg = SyntheticConfig::default();
        assert!(generate(&SyntheticConfig { min_len: 2, ..cfg.clone() }).is_err());
        assert!(generate(&SyntheticConfig { follow_prob: 1.5, ..cfg.clone() }).is_err());
        assert!(generate(&SyntheticConfig { items: 1, ..cfg }).is_err());
    }
}
