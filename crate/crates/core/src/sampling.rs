//! Negative sampling.
//!
//! Two base distributions exist: popularity (`count^α`, train split only)
//! and uniform over the catalog. A [`NegativeSampler`] combines them into
//! preference-ordered negatives: for every positive it yields a "more
//! preferred" negative `j` and a "less preferred" negative `k` (or sets of
//! them). Which distribution feeds which side depends on [`Mode`]; how hard
//! the ordering is enforced depends on [`Transitivity`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::corpus::SplitDataset;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_RETRIES: usize = 100;

/// Walker/Vose alias table over indices `0..n`.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::EmptyInput("alias table needs at least one weight"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidValue("alias weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidValue("alias weights sum to zero".into()));
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut alias: Vec<usize> = (0..n).collect();
        let mut prob = vec![1.0; n];
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
            alias[i] = i;
        }
        Ok(AliasTable { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.gen_range(0..self.prob.len());
        if rng.gen::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// Probability distribution over a subset of item ids.
#[derive(Debug, Clone)]
pub struct ItemDist {
    items: Vec<usize>,
    probs: Vec<f64>,
    table: AliasTable,
}

impl ItemDist {
    pub fn weighted(items: Vec<usize>, weights: &[f64]) -> Result<Self> {
        if items.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} items with {} weights",
                items.len(),
                weights.len()
            )));
        }
        let table = AliasTable::new(weights)?;
        let total: f64 = weights.iter().sum();
        let probs = weights.iter().map(|w| w / total).collect();
        Ok(ItemDist { items, probs, table })
    }

    pub fn uniform(items: Vec<usize>) -> Result<Self> {
        let w = vec![1.0; items.len()];
        Self::weighted(items, &w)
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    /// `(item, probability)` pairs in construction order.
    pub fn probabilities(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.items.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn prob(&self, item: usize) -> f64 {
        self.items
            .iter()
            .position(|&i| i == item)
            .map_or(0.0, |p| self.probs[p])
    }

    /// Draws an item not rejected by `exclude`. Rejection sampling runs for
    /// `max_retries` attempts; after that the draw falls back to an exact scan
    /// of the remaining mass, so the result always follows the distribution
    /// conditioned on `!exclude`. Errors when no admissible item has mass.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        exclude: &dyn Fn(usize) -> bool,
        max_retries: usize,
    ) -> Result<usize> {
        for _ in 0..max_retries {
            let item = self.items[self.table.draw(rng)];
            if !exclude(item) {
                return Ok(item);
            }
        }
        let mass: f64 = self
            .probabilities()
            .filter(|&(i, p)| p > 0.0 && !exclude(i))
            .map(|(_, p)| p)
            .sum();
        if mass <= 0.0 {
            return Err(Error::SupportExhausted);
        }
        let mut u = rng.gen::<f64>() * mass;
        let mut last = None;
        for (i, p) in self.probabilities() {
            if p <= 0.0 || exclude(i) {
                continue;
            }
            last = Some(i);
            if u < p {
                return Ok(i);
            }
            u -= p;
        }
        last.ok_or(Error::SupportExhausted)
    }
}

/// Popularity distribution with `weight(i) ∝ count(i)^α`. Items with zero
/// train count always get weight zero.
#[derive(Debug, Clone)]
pub struct PopularityDist {
    /// Indexed by item id; slot 0 unused.
    counts: Vec<usize>,
    alpha: f64,
    dist: ItemDist,
}

/// `counts[i]` is the train count of item `i + 1`.
pub fn build_popularity(counts: &[usize], alpha: f64) -> Result<PopularityDist> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidValue(format!("popularity exponent {alpha}")));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::InvalidValue("all popularity counts are zero".into()));
    }
    let weights: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(alpha) })
        .collect();
    let items = (1..=counts.len()).collect();
    let mut indexed = Vec::with_capacity(counts.len() + 1);
    indexed.push(0);
    indexed.extend_from_slice(counts);
    Ok(PopularityDist {
        counts: indexed,
        alpha,
        dist: ItemDist::weighted(items, &weights)?,
    })
}

impl PopularityDist {
    pub fn from_split(split: &SplitDataset, alpha: f64) -> Result<Self> {
        build_popularity(&split.item_counts[1..], alpha)
    }

    pub fn num_items(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Preference measure: train count of `item`.
    pub fn f(&self, item: usize) -> usize {
        self.counts.get(item).copied().unwrap_or(0)
    }

    /// Probabilities of items `1..=N`.
    pub fn weights(&self) -> Vec<f64> {
        self.dist.probs.clone()
    }

    pub fn dist(&self) -> &ItemDist {
        &self.dist
    }

    /// Items ordered by count descending, ties by ascending id.
    pub fn ranked_items(&self) -> Vec<usize> {
        let mut items: Vec<usize> = (1..=self.num_items()).collect();
        items.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        items
    }

    /// Top and bottom halves of [`Self::ranked_items`]; the top half holds
    /// `⌊N/2⌋` items.
    pub fn halves(&self) -> (Vec<usize>, Vec<usize>) {
        let mut ranked = self.ranked_items();
        let bottom = ranked.split_off(self.num_items() / 2);
        (ranked, bottom)
    }
}

pub fn uniform_dist(num_items: usize) -> Result<ItemDist> {
    ItemDist::uniform((1..=num_items).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Popular negatives are preferred: `j ~ p_pop`, `k ~ p_unif`.
    Pop,
    /// Niche negatives are preferred: `j ~ p_unif`, `k ~ p_pop`.
    Niche,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transitivity {
    Weak,
    Strict,
    Disjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    /// One `(j, k)` pair per positive.
    Quad,
    /// Negative sets `N_j`, `N_k` per positive.
    Set,
}

macro_rules! str_enum {
    ($ty:ident { $($name:literal => $var:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$var),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $name,)+ })
            }
        }
    };
}

str_enum!(Mode { "pop" => Pop, "niche" => Niche });
str_enum!(Transitivity { "weak" => Weak, "strict" => Strict, "disjoint" => Disjoint });
str_enum!(BatchKind { "quad" => Quad, "set" => Set });

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: BatchKind,
    pub mode: Mode,
    pub transitivity: Transitivity,
    pub alpha: f64,
    pub n_j: usize,
    pub n_k: usize,
    pub exclude_history: bool,
    /// Overrides the sampler stream seed derived from the root seed.
    pub seed: Option<u64>,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: BatchKind::Quad,
            mode: Mode::Pop,
            transitivity: Transitivity::Weak,
            alpha: 1.0,
            n_j: 50,
            n_k: 50,
            exclude_history: false,
            seed: None,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

/// Draws preference-ordered negatives for one positive at a time.
#[derive(Debug, Clone)]
pub struct NegativeSampler<'a> {
    pop: &'a PopularityDist,
    mode: Mode,
    transitivity: Transitivity,
    max_retries: usize,
    j_dist: ItemDist,
    k_dist: ItemDist,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(
        pop: &'a PopularityDist,
        mode: Mode,
        transitivity: Transitivity,
        max_retries: usize,
    ) -> Result<Self> {
        let n = pop.num_items();
        let (preferred_pop, other_unif) = match transitivity {
            Transitivity::Weak | Transitivity::Strict => (pop.dist.clone(), uniform_dist(n)?),
            Transitivity::Disjoint => {
                if n < 2 {
                    return Err(Error::CatalogTooSmall {
                        needed: 2,
                        available: n,
                    });
                }
                let (top, bottom) = pop.halves();
                let weights: Vec<f64> = top.iter().map(|&i| pop.dist.prob(i)).collect();
                (ItemDist::weighted(top, &weights)?, ItemDist::uniform(bottom)?)
            }
        };
        let (j_dist, k_dist) = match mode {
            Mode::Pop => (preferred_pop, other_unif),
            Mode::Niche => (other_unif, preferred_pop),
        };
        let sampler = NegativeSampler {
            pop,
            mode,
            transitivity,
            max_retries: max_retries.max(1),
            j_dist,
            k_dist,
        };
        if transitivity != Transitivity::Weak && !sampler.ordering_satisfiable() {
            return Err(Error::Unsatisfiable(format!(
                "no {mode} pair with strictly ordered popularity under {transitivity} sampling"
            )));
        }
        Ok(sampler)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn transitivity(&self) -> Transitivity {
        self.transitivity
    }

    pub fn j_dist(&self) -> &ItemDist {
        &self.j_dist
    }

    pub fn k_dist(&self) -> &ItemDist {
        &self.k_dist
    }

    /// Whether `j` is strictly more preferred than `k` under the mode.
    pub fn ordered(&self, j: usize, k: usize) -> bool {
        let (fj, fk) = (self.pop.f(j), self.pop.f(k));
        match self.mode {
            Mode::Pop => fj > fk,
            Mode::Niche => fj < fk,
        }
    }

    fn ordering_satisfiable(&self) -> bool {
        let js = self.j_dist.probabilities().filter(|&(_, p)| p > 0.0);
        let ks: Vec<usize> = self
            .k_dist
            .probabilities()
            .filter(|&(_, p)| p > 0.0)
            .map(|(i, _)| i)
            .collect();
        js.into_iter()
            .any(|(j, _)| ks.iter().any(|&k| k != j && self.ordered(j, k)))
    }

    fn weak_pair<R: Rng + ?Sized>(
        &self,
        positive: usize,
        exclude: &dyn Fn(usize) -> bool,
        rng: &mut R,
    ) -> Result<(usize, usize)> {
        let j = self
            .j_dist
            .sample(rng, &|x| x == positive || exclude(x), self.max_retries)?;
        let k = self
            .k_dist
            .sample(rng, &|x| x == positive || x == j || exclude(x), self.max_retries)?;
        Ok((j, k))
    }

    /// One `(j, k)` pair for `positive`, all three pairwise distinct and none
    /// rejected by `exclude`.
    pub fn draw_pair<R: Rng + ?Sized>(
        &self,
        positive: usize,
        exclude: &dyn Fn(usize) -> bool,
        rng: &mut R,
    ) -> Result<(usize, usize)> {
        if self.transitivity == Transitivity::Weak {
            return self.weak_pair(positive, exclude, rng);
        }
        for _ in 0..self.max_retries {
            let mut last = None;
            for _ in 0..self.max_retries {
                let (j, k) = self.weak_pair(positive, exclude, rng)?;
                if self.ordered(j, k) {
                    return Ok((j, k));
                }
                last = Some((j, k));
            }
            if let Some((j, k)) = last {
                if self.ordered(k, j) {
                    return Ok((k, j));
                }
            }
        }
        Err(Error::Unsatisfiable(format!(
            "no ordered pair found for positive {positive}"
        )))
    }

    /// Negative sets without replacement: `N_j` first, then `N_k` disjoint
    /// from it. Neither contains `positive` or an excluded item.
    pub fn draw_sets<R: Rng + ?Sized>(
        &self,
        positive: usize,
        exclude: &dyn Fn(usize) -> bool,
        n_j: usize,
        n_k: usize,
        rng: &mut R,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut n_j_set: Vec<usize> = Vec::with_capacity(n_j);
        for _ in 0..n_j {
            let item = self.j_dist.sample(
                rng,
                &|x| x == positive || n_j_set.contains(&x) || exclude(x),
                self.max_retries,
            )?;
            n_j_set.push(item);
        }
        let mut n_k_set: Vec<usize> = Vec::with_capacity(n_k);
        for _ in 0..n_k {
            let item = self.k_dist.sample(
                rng,
                &|x| x == positive || n_j_set.contains(&x) || n_k_set.contains(&x) || exclude(x),
                self.max_retries,
            )?;
            n_k_set.push(item);
        }
        Ok((n_j_set, n_k_set))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadRow {
    pub user: usize,
    pub history: Vec<usize>,
    pub positive: usize,
    /// More-preferred negative.
    pub j: usize,
    /// Less-preferred negative.
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuadBatch {
    pub rows: Vec<QuadRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetRow {
    pub user: usize,
    pub history: Vec<usize>,
    pub positive: usize,
    pub n_j: Vec<usize>,
    pub n_k: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SetBatch {
    pub rows: Vec<SetRow>,
}

/// `(user, prefix length)` of every next-item target in the train split.
fn targets(split: &SplitDataset) -> Vec<(usize, usize)> {
    split
        .users
        .iter()
        .enumerate()
        .flat_map(|(u, s)| (1..s.train.len()).map(move |t| (u, t)))
        .collect()
}

fn pick_targets<R: Rng + ?Sized>(
    split: &SplitDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(usize, Vec<usize>, usize)>> {
    if batch_size == 0 {
        return Err(Error::InvalidValue("batch_size must be >= 1".into()));
    }
    let all = targets(split);
    if all.is_empty() {
        return Err(Error::EmptyInput("split has no training targets"));
    }
    Ok((0..batch_size)
        .map(|_| {
            let (u, t) = all[rng.gen_range(0..all.len())];
            let train = &split.users[u].train;
            (split.users[u].user, train[..t].to_vec(), train[t])
        })
        .collect())
}

fn quad_batch<R: Rng + ?Sized>(
    split: &SplitDataset,
    pop: &PopularityDist,
    mode: Mode,
    transitivity: Transitivity,
    batch_size: usize,
    rng: &mut R,
) -> Result<QuadBatch> {
    let sampler = NegativeSampler::new(pop, mode, transitivity, DEFAULT_MAX_RETRIES)?;
    let rows = pick_targets(split, batch_size, rng)?
        .into_iter()
        .map(|(user, history, positive)| {
            let (j, k) = sampler.draw_pair(positive, &|_| false, rng)?;
            Ok(QuadRow {
                user,
                history,
                positive,
                j,
                k,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QuadBatch { rows })
}

/// Weak transitive quads: the mode picks which base distribution feeds `j`.
pub fn quad_weak<R: Rng + ?Sized>(
    split: &SplitDataset,
    pop: &PopularityDist,
    mode: Mode,
    batch_size: usize,
    rng: &mut R,
) -> Result<QuadBatch> {
    quad_batch(split, pop, mode, Transitivity::Weak, batch_size, rng)
}

/// As [`quad_weak`], but every row satisfies the popularity ordering.
pub fn quad_strict<R: Rng + ?Sized>(
    split: &SplitDataset,
    pop: &PopularityDist,
    mode: Mode,
    batch_size: usize,
    rng: &mut R,
) -> Result<QuadBatch> {
    quad_batch(split, pop, mode, Transitivity::Strict, batch_size, rng)
}

/// Preferred and other negatives come from opposite popularity halves.
pub fn quad_disjoint<R: Rng + ?Sized>(
    split: &SplitDataset,
    pop: &PopularityDist,
    mode: Mode,
    batch_size: usize,
    rng: &mut R,
) -> Result<QuadBatch> {
    quad_batch(split, pop, mode, Transitivity::Disjoint, batch_size, rng)
}

pub fn set_weak<R: Rng + ?Sized>(
    split: &SplitDataset,
    pop: &PopularityDist,
    mode: Mode,
    batch_size: usize,
    n_j: usize,
    n_k: usize,
    rng: &mut R,
) -> Result<SetBatch> {
    check_set_sizes(pop.num_items(), n_j, n_k)?;
    let sampler = NegativeSampler::new(pop, mode, Transitivity::Weak, DEFAULT_MAX_RETRIES)?;
    let rows = pick_targets(split, batch_size, rng)?
        .into_iter()
        .map(|(user, history, positive)| {
            let (nj, nk) = sampler.draw_sets(positive, &|_| false, n_j, n_k, rng)?;
            Ok(SetRow {
                user,
                history,
                positive,
                n_j: nj,
                n_k: nk,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SetBatch { rows })
}

pub fn check_set_sizes(num_items: usize, n_j: usize, n_k: usize) -> Result<()> {
    if n_j == 0 || n_k == 0 {
        return Err(Error::InvalidValue("negative set sizes must be >= 1".into()));
    }
    if n_j + n_k + 1 > num_items {
        return Err(Error::CatalogTooSmall {
            needed: n_j + n_k + 1,
            available: num_items,
        });
    }
    Ok(())
}
