//! Interaction logs: TSV ingestion, k-core filtering, dense id assignment
//! and leave-one-out splitting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item id 0 never names a real item; encoders use it for left padding.
pub const PAD_ITEM: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

impl RawInteraction {
    pub fn new(user_key: impl Into<String>, item_key: impl Into<String>, timestamp: i64) -> Self {
        RawInteraction {
            user_key: user_key.into(),
            item_key: item_key.into(),
            timestamp,
        }
    }
}

pub fn parse_tsv(path: impl AsRef<Path>) -> Result<Vec<RawInteraction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv_str(&text, path)
}

/// Parses `user<TAB>item<TAB>timestamp` lines. Blank lines and lines starting
/// with `#` are skipped; extra columns are ignored.
pub fn parse_tsv_str(text: &str, origin: impl AsRef<Path>) -> Result<Vec<RawInteraction>> {
    let origin = origin.as_ref();
    let fail = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(user), Some(item), Some(ts)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(fail(line_no, "expected user<TAB>item<TAB>timestamp".into()));
        };
        if user.is_empty() || item.is_empty() {
            return Err(fail(line_no, "empty user or item key".into()));
        }
        let timestamp = ts
            .trim()
            .parse::<i64>()
            .map_err(|e| fail(line_no, format!("bad timestamp {ts:?}: {e}")))?;
        out.push(RawInteraction::new(user, item, timestamp));
    }
    Ok(out)
}

/// Drops users and items with fewer than `k` interactions, repeating until
/// nothing changes. Input order is preserved.
pub fn k_core_filter(events: &[RawInteraction], k: usize) -> Vec<RawInteraction> {
    let mut keep = vec![true; events.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (e, _) in events.iter().zip(&keep).filter(|(_, &k)| k) {
            *users.entry(&e.user_key).or_default() += 1;
            *items.entry(&e.item_key).or_default() += 1;
        }
        let mut changed = false;
        for (e, kept) in events.iter().zip(keep.iter_mut()) {
            if *kept && (users[e.user_key.as_str()] < k || items[e.item_key.as_str()] < k) {
                *kept = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    events
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect()
}

/// Dense-id interaction log. Users are `0..M`, items `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub user_keys: Vec<String>,
    /// `item_keys[id - 1]` is the original key of item `id`.
    pub item_keys: Vec<String>,
    /// Per-user `(item, timestamp)` in ascending time, ties in input order.
    pub sequences: Vec<Vec<(usize, i64)>>,
    /// Indexed by item id; slot 0 stays zero.
    pub item_counts: Vec<usize>,
}

impl InteractionLog {
    pub fn num_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn events(&self) -> impl Iterator<Item = (usize, usize, i64)> + '_ {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(u, seq)| seq.iter().map(move |&(i, t)| (u, i, t)))
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::new(self.num_events(), self.num_users(), self.num_items())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetStats {
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    pub density: f64,
}

impl DatasetStats {
    pub fn new(interactions: usize, users: usize, items: usize) -> Self {
        let cells = users as f64 * items as f64;
        DatasetStats {
            interactions,
            users,
            items,
            density: if cells > 0.0 { interactions as f64 / cells } else { 0.0 },
        }
    }
}

pub fn build_log(events: &[RawInteraction]) -> Result<InteractionLog> {
    if events.is_empty() {
        return Err(Error::EmptyInput("no interactions to build a log from"));
    }
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut sequences: Vec<Vec<(usize, i64)>> = Vec::new();
    let mut item_counts = vec![0];
    for e in events {
        let u = *user_ids.entry(&e.user_key).or_insert_with(|| {
            user_keys.push(e.user_key.clone());
            sequences.push(Vec::new());
            user_keys.len() - 1
        });
        let i = *item_ids.entry(&e.item_key).or_insert_with(|| {
            item_keys.push(e.item_key.clone());
            item_counts.push(0);
            item_keys.len()
        });
        sequences[u].push((i, e.timestamp));
        item_counts[i] += 1;
    }
    for seq in &mut sequences {
        seq.sort_by_key(|&(_, t)| t);
    }
    Ok(InteractionLog {
        user_keys,
        item_keys,
        sequences,
        item_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    /// Dense user id in the originating log.
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub num_items: usize,
    pub users: Vec<UserSplit>,
    /// Train-split occurrence counts indexed by item id (slot 0 unused).
    pub item_counts: Vec<usize>,
    #[serde(skip)]
    pub ids: IdMaps,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitWarnings {
    /// Users with fewer than three events, left out of the split.
    pub dropped_users: usize,
}

impl SplitDataset {
    /// Builds a split directly from per-user item sequences (items `1..=N`).
    /// Used for synthetic data and tests.
    pub fn from_sequences(num_items: usize, sequences: &[Vec<usize>]) -> Result<(Self, SplitWarnings)> {
        let mut users = Vec::new();
        let mut dropped = 0;
        for (u, seq) in sequences.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&i| i == PAD_ITEM || i > num_items) {
                return Err(Error::OutOfRange {
                    what: "item ids",
                    index: bad,
                    size: num_items + 1,
                });
            }
            if seq.len() < 3 {
                dropped += 1;
                continue;
            }
            let n = seq.len();
            users.push(UserSplit {
                user: u,
                train: seq[..n - 2].to_vec(),
                valid: seq[n - 2],
                test: seq[n - 1],
            });
        }
        let mut item_counts = vec![0; num_items + 1];
        for u in &users {
            for &i in &u.train {
                item_counts[i] += 1;
            }
        }
        let split = SplitDataset {
            num_items,
            users,
            item_counts,
            ids: IdMaps::default(),
        };
        Ok((
            split,
            SplitWarnings {
                dropped_users: dropped,
            },
        ))
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_train_events(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }

    /// Writes `split.json`, `users.tsv` and `items.tsv` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string(self)?;
        write_file(&dir.join(SPLIT_FILE), json.as_bytes())?;
        write_file(&dir.join(USERS_FILE), id_map_tsv(&self.ids.users, 0).as_bytes())?;
        write_file(&dir.join(ITEMS_FILE), id_map_tsv(&self.ids.items, 1).as_bytes())?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(SPLIT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut split: SplitDataset = serde_json::from_str(&text)?;
        if split.item_counts.len() != split.num_items + 1 {
            return Err(Error::Parse {
                path,
                line: 0,
                message: "item_counts length does not match num_items".into(),
            });
        }
        split.ids.users = read_id_map(&dir.join(USERS_FILE))?;
        split.ids.items = read_id_map(&dir.join(ITEMS_FILE))?;
        Ok(split)
    }
}

pub const SPLIT_FILE: &str = "split.json";
pub const USERS_FILE: &str = "users.tsv";
pub const ITEMS_FILE: &str = "items.tsv";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn id_map_tsv(keys: &[String], first_id: usize) -> String {
    let mut out = String::new();
    for (i, key) in keys.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}", i + first_id, key);
    }
    out
}

fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut keys = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let Some((_, key)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "expected dense_id<TAB>key".into(),
            });
        };
        keys.push(key.to_string());
    }
    Ok(keys)
}

/// Last event → test, second-to-last → validation, the rest → train.
/// Users with fewer than three events are dropped and counted.
pub fn leave_one_out(log: &InteractionLog) -> (SplitDataset, SplitWarnings) {
    let sequences: Vec<Vec<usize>> = log
        .sequences
        .iter()
        .map(|s| s.iter().map(|&(i, _)| i).collect())
        .collect();
    let (mut split, warnings) = SplitDataset::from_sequences(log.num_items(), &sequences)
        .expect("log item ids are dense and non-zero");
    split.ids = IdMaps {
        users: log.user_keys.clone(),
        items: log.item_keys.clone(),
    };
    (split, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(u: &str, i: &str, t: i64) -> RawInteraction {
        RawInteraction::new(u, i, t)
    }

    #[test]
    fn parse_single_line_and_empty() {
        assert_eq!(
            parse_tsv_str("u1\ti9\t100\n", "x").unwrap(),
            vec![ev("u1", "i9", 100)]
        );
        assert!(parse_tsv_str("", "x").unwrap().is_empty());
    }

    #[test]
    fn parse_skips_header_and_reports_line() {
        let text = "# user\titem\tts\nu1\ti1\t5\n\nu2\ti2\tabc\n";
        match parse_tsv_str(text, "data.tsv") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(path, Path::new("data.tsv"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_tsv_str("u1\ti9\tabc\n", "x"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_tsv_str("u1\ti9\n", "x"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn parse_missing_file_is_io_error() {
        assert!(matches!(
            parse_tsv("/definitely/not/here.tsv"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn k_core_one_is_noop() {
        let events = vec![ev("a", "x", 1), ev("b", "y", 2), ev("a", "y", 3)];
        assert_eq!(k_core_filter(&events, 1), events);
    }

    #[test]
    fn k_core_removes_lonely_user() {
        let events = vec![ev("a", "x", 1), ev("a", "y", 2), ev("a", "z", 3)];
        assert!(k_core_filter(&events, 2).is_empty());
    }

    #[test]
    fn k_core_keeps_dense_block() {
        let mut events = Vec::new();
        for u in ["a", "b"] {
            for (t, i) in ["p", "q", "r", "s", "t"].iter().enumerate() {
                events.push(ev(u, i, t as i64));
            }
        }
        assert_eq!(k_core_filter(&events, 2).len(), 10);
    }

    #[test]
    fn k_core_cascades() {
        // Removing item "w" (1 event) drops user "c" below 2, which then
        // drops item "v".
        let events = vec![
            ev("a", "x", 1),
            ev("a", "y", 2),
            ev("b", "x", 3),
            ev("b", "y", 4),
            ev("c", "v", 5),
            ev("c", "w", 6),
            ev("a", "v", 7),
        ];
        let kept = k_core_filter(&events, 2);
        assert_eq!(kept, events[..4].to_vec());
    }

    #[test]
    fn build_log_single_event() {
        let log = build_log(&[ev("u1", "i9", 100)]).unwrap();
        assert_eq!(log.num_users(), 1);
        assert_eq!(log.num_items(), 1);
        assert_eq!(log.events().collect::<Vec<_>>(), vec![(0, 1, 100)]);
        assert_eq!(log.item_counts, vec![0, 1]);
    }

    #[test]
    fn build_log_sorts_stably() {
        let log = build_log(&[
            ev("u", "c", 30),
            ev("u", "a", 10),
            ev("u", "b", 10),
            ev("v", "a", 1),
        ])
        .unwrap();
        // ids by first appearance: c=1, a=2, b=3
        assert_eq!(log.sequences[0], vec![(2, 10), (3, 10), (1, 30)]);
        assert_eq!(log.item_counts, vec![0, 1, 2, 1]);
        assert!(build_log(&[]).is_err());
    }

    #[test]
    fn leave_one_out_definition() {
        let (split, warn) =
            SplitDataset::from_sequences(4, &[vec![1, 2, 3, 4], vec![1, 2, 3], vec![1, 2]]).unwrap();
        assert_eq!(warn.dropped_users, 1);
        assert_eq!(split.users.len(), 2);
        assert_eq!(split.users[0].train, vec![1, 2]);
        assert_eq!((split.users[0].valid, split.users[0].test), (3, 4));
        assert_eq!(split.users[1].train, vec![1]);
        assert_eq!((split.users[1].valid, split.users[1].test), (2, 3));
        // counts from train only
        assert_eq!(split.item_counts, vec![0, 2, 1, 0, 0]);
    }

    #[test]
    fn density_matches_table_style_stats() {
        let s = DatasetStats::new(198_502, 22_363, 12_101);
        assert!((s.density - 0.00073).abs() < 5e-6);
    }

    #[test]
    fn prepared_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = build_log(&[
            ev("u", "a", 1),
            ev("u", "b", 2),
            ev("u", "c", 3),
            ev("w", "c", 1),
            ev("w", "a", 2),
            ev("w", "b", 3),
        ])
        .unwrap();
        let (split, _) = leave_one_out(&log);
        split.write_dir(dir.path()).unwrap();
        let back = SplitDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, split);
        assert_eq!(back.ids.items, vec!["a", "b", "c"]);
    }
}
