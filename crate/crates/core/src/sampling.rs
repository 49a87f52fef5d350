//! Subset schemes for long-tailed training data and class-uniform mini-batches.
//!
//! All schemes operate on a *pool* of dataset indices (usually the train split)
//! and return sorted index subsets of that pool.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::index;
use rand::Rng as _;

use crate::datagen::round_half_up;
use crate::dataset::{Dataset, BACKGROUND};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Positives subsampled globally at ratio `r`; negatives untouched.
    RandPos { r: f64 },
    /// Positives and negatives independently subsampled at ratio `r`.
    RandAll { r: f64 },
    /// Every class capped at `n_max` positives; negatives untouched.
    PseudoUniform { n_max: usize },
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::RandPos { r } => write!(f, "rand-pos(r={r})"),
            Scheme::RandAll { r } => write!(f, "rand-all(r={r})"),
            Scheme::PseudoUniform { n_max } => write!(f, "pseudo-uniform(n_max={n_max})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSubset {
    pub scheme: Scheme,
    pub seed: u64,
    /// Sorted dataset indices.
    pub kept: Vec<usize>,
    /// Kept positives divided by pool positives.
    pub positive_ratio: f64,
}

impl SampleSubset {
    pub fn kept_ids<'a>(&self, dataset: &'a Dataset) -> Vec<&'a str> {
        self.kept.iter().map(|&i| dataset.sample(i).id.as_str()).collect()
    }

    /// One kept id per line.
    pub fn write_ids<W: Write>(&self, dataset: &Dataset, mut w: W) -> std::io::Result<()> {
        for id in self.kept_ids(dataset) {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("ratio r={r} must lie in (0, 1]")))
    }
}

fn partition(dataset: &Dataset, pool: &[usize]) -> (Vec<usize>, Vec<usize>) {
    pool.iter().partition(|&&i| dataset.sample(i).is_positive())
}

/// Draw `round(r·n)` elements of `items` uniformly without replacement.
fn draw(rng: &mut seed::Rng, items: &[usize], k: usize) -> Vec<usize> {
    index::sample(rng, items.len(), k.min(items.len()))
        .into_iter()
        .map(|i| items[i])
        .collect()
}

fn finish(scheme: Scheme, seed: u64, mut kept: Vec<usize>, kept_pos: usize, total_pos: usize) -> SampleSubset {
    kept.sort_unstable();
    SampleSubset {
        scheme,
        seed,
        kept,
        positive_ratio: if total_pos == 0 { 1.0 } else { kept_pos as f64 / total_pos as f64 },
    }
}

pub fn rand_pos(dataset: &Dataset, pool: &[usize], r: f64, seed: u64) -> Result<SampleSubset> {
    check_ratio(r)?;
    let (pos, neg) = partition(dataset, pool);
    if pos.is_empty() {
        return Err(Error::invalid("pool has no positive samples"));
    }
    let mut rng = seed::rng(seed);
    let k = round_half_up(r * pos.len() as f64);
    let mut kept = draw(&mut rng, &pos, k);
    let kept_pos = kept.len();
    kept.extend(neg);
    Ok(finish(Scheme::RandPos { r }, seed, kept, kept_pos, pos.len()))
}

pub fn rand_all(dataset: &Dataset, pool: &[usize], r: f64, seed: u64) -> Result<SampleSubset> {
    check_ratio(r)?;
    let (pos, neg) = partition(dataset, pool);
    if pos.is_empty() {
        return Err(Error::invalid("pool has no positive samples"));
    }
    let mut rng = seed::rng(seed);
    let mut kept = draw(&mut rng, &pos, round_half_up(r * pos.len() as f64));
    let kept_pos = kept.len();
    kept.extend(draw(&mut rng, &neg, round_half_up(r * neg.len() as f64)));
    Ok(finish(Scheme::RandAll { r }, seed, kept, kept_pos, pos.len()))
}

pub fn pseudo_uniform(dataset: &Dataset, pool: &[usize], n_max: usize, seed: u64) -> Result<SampleSubset> {
    if n_max < 1 {
        return Err(Error::config("n_max must be at least 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut kept = Vec::new();
    for &i in pool {
        match dataset.sample(i).label {
            BACKGROUND => kept.push(i),
            c => by_class.entry(c).or_default().push(i),
        }
    }
    let mut rng = seed::rng(seed);
    let total_pos: usize = by_class.values().map(Vec::len).sum();
    let mut kept_pos = 0;
    for members in by_class.values() {
        let chosen = if members.len() > n_max {
            draw(&mut rng, members, n_max)
        } else {
            members.clone()
        };
        kept_pos += chosen.len();
        kept.extend(chosen);
    }
    Ok(finish(Scheme::PseudoUniform { n_max }, seed, kept, kept_pos, total_pos))
}

fn capped_total(counts: &[usize], cap: usize) -> usize {
    counts.iter().map(|&n| n.min(cap)).sum()
}

/// Smallest cap whose capped positive total reaches ratio `r` of all positives.
/// `counts` are per positive class; zero entries are ignored.
pub fn nmax_for_ratio(counts: &[usize], r: f64) -> Result<usize> {
    check_ratio(r)?;
    let active: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
    let total: usize = active.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no positive samples"));
    }
    let min_ratio = active.len() as f64 / total as f64;
    if r < min_ratio {
        return Err(Error::config(format!(
            "ratio {r} is below the achievable minimum {min_ratio}"
        )));
    }
    let reaches = |cap: usize| capped_total(&active, cap) as f64 >= r * total as f64;
    let (mut lo, mut hi) = (1usize, *active.iter().max().expect("non-empty"));
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if reaches(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// Infinite stream of class-balanced mini-batches over a labelled pool.
///
/// `targets[i]` is the target of pool position `i` (0 = background). Each batch
/// holds `round(pos_fraction · batch_size)` positives spread as evenly as
/// possible over targets `1..num_targets` (the remainder slots go to distinct
/// classes drawn uniformly), each drawn uniformly with replacement from its
/// class; the rest are background drawn uniformly with replacement. Batches are
/// vectors of pool positions.
#[derive(Debug, Clone)]
pub struct UniformBatches {
    by_target: Vec<Vec<usize>>,
    batch_size: usize,
    n_pos: usize,
    rng: seed::Rng,
}

impl UniformBatches {
    pub fn new(
        targets: &[usize],
        num_targets: usize,
        batch_size: usize,
        pos_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(pos_fraction > 0.0 && pos_fraction < 1.0) {
            return Err(Error::config("pos_fraction must lie in (0, 1)"));
        }
        if num_targets < 2 {
            return Err(Error::config("need at least one positive target"));
        }
        let mut by_target = vec![Vec::new(); num_targets];
        for (pos, &t) in targets.iter().enumerate() {
            if t >= num_targets {
                return Err(Error::invalid(format!("target {t} out of range")));
            }
            by_target[t].push(pos);
        }
        if let Some(t) = (1..num_targets).find(|&t| by_target[t].is_empty()) {
            return Err(Error::invalid(format!("positive target {t} has no samples")));
        }
        let n_pos = round_half_up(pos_fraction * batch_size as f64).clamp(1, batch_size);
        let n_pos = if by_target[0].is_empty() { batch_size } else { n_pos };
        Ok(UniformBatches {
            by_target,
            batch_size,
            n_pos,
            rng: seed::rng(seed),
        })
    }

    pub fn positives_per_batch(&self) -> usize {
        self.n_pos
    }
}

impl Iterator for UniformBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let classes = self.by_target.len() - 1;
        let (per_class, extra) = (self.n_pos / classes, self.n_pos % classes);
        let mut batch = Vec::with_capacity(self.batch_size);
        let take = |rng: &mut seed::Rng, t: usize, batch: &mut Vec<usize>| {
            let members = &self.by_target[t];
            batch.push(members[rng.random_range(0..members.len())]);
        };
        for t in 1..=classes {
            for _ in 0..per_class {
                take(&mut self.rng, t, &mut batch);
            }
        }
        let mut bonus: Vec<usize> = index::sample(&mut self.rng, classes, extra).into_vec();
        bonus.sort_unstable();
        for k in bonus {
            take(&mut self.rng, k + 1, &mut batch);
        }
        while batch.len() < self.batch_size {
            take(&mut self.rng, 0, &mut batch);
        }
        Some(batch)
    }
}

/// Class-uniform batches over a dataset pool, yielding dataset indices.
pub fn uniform_batches(
    dataset: &Dataset,
    pool: &[usize],
    batch_size: usize,
    pos_fraction: f64,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    let targets: Vec<usize> = pool.iter().map(|&i| dataset.sample(i).label).collect();
    let pool = pool.to_vec();
    let inner = UniformBatches::new(&targets, dataset.num_classes() + 1, batch_size, pos_fraction, seed)?;
    Ok(inner.map(move |b| b.into_iter().map(|p| pool[p]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Sample, Split};
    use std::collections::HashSet;

    /// `counts[c-1]` positives of class c plus `neg` background samples.
    pub(crate) fn toy(counts: &[usize], neg: usize) -> Dataset {
        let mut samples = Vec::new();
        let mut push = |label: usize| {
            let n = samples.len();
            samples.push(Sample {
                id: format!("t{n:05}"),
                split: Split::Train,
                label,
                features: vec![n as f64],
            });
        };
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                push(c + 1);
            }
        }
        for _ in 0..neg {
            push(0);
        }
        Dataset::new(samples, counts.len(), 1).unwrap()
    }

    #[test]
    fn rand_pos_counts_and_identity() {
        let ds = toy(&[100, 60], 40);
        let pool = ds.all_indices();
        let s = rand_pos(&ds, &pool, 0.5, 1).unwrap();
        let counts = ds.class_counts(&s.kept);
        assert_eq!(counts[1] + counts[2], 80);
        assert_eq!(counts[0], 40);
        assert_eq!(rand_pos(&ds, &pool, 1.0, 9).unwrap().kept, pool);
        assert!(rand_pos(&ds, &pool, 0.0, 1).is_err());
        assert!(rand_pos(&ds, &pool, 1.5, 1).is_err());
    }

    #[test]
    fn rand_all_counts() {
        let ds = toy(&[100], 300);
        let s = rand_all(&ds, &ds.all_indices(), 0.1, 4).unwrap();
        let counts = ds.class_counts(&s.kept);
        assert_eq!(counts, vec![30, 10]);
        assert_eq!(rand_all(&ds, &ds.all_indices(), 1.0, 4).unwrap().kept, ds.all_indices());
    }

    #[test]
    fn pseudo_uniform_caps() {
        let ds = toy(&[100, 50, 10], 5);
        let pool = ds.all_indices();
        let s = pseudo_uniform(&ds, &pool, 50, 2).unwrap();
        assert_eq!(ds.class_counts(&s.kept), vec![5, 50, 50, 10]);
        assert_eq!(s.positive_ratio, 0.6875);
        let id = pseudo_uniform(&ds, &pool, 100, 2).unwrap();
        assert_eq!(id.kept, pool);
        assert_eq!(id.positive_ratio, 1.0);
        assert!(pseudo_uniform(&ds, &pool, 0, 2).is_err());
    }

    #[test]
    fn nmax_examples() {
        assert_eq!(nmax_for_ratio(&[100, 50, 10], 0.6875).unwrap(), 50);
        assert_eq!(nmax_for_ratio(&[100, 50, 10], 1.0).unwrap(), 100);
        assert_eq!(nmax_for_ratio(&[10, 10], 0.5).unwrap(), 5);
        assert!(nmax_for_ratio(&[10, 10], 0.05).is_err());
        assert_eq!(nmax_for_ratio(&[10, 10], 0.1).unwrap(), 1);
    }

    #[test]
    fn uniform_batch_composition() {
        let ds = toy(&[90, 10], 100);
        let mut it = uniform_batches(&ds, &ds.all_indices(), 8, 0.25, 5).unwrap();
        for _ in 0..50 {
            let b = it.next().unwrap();
            assert_eq!(b.len(), 8);
            let c = ds.class_counts(&b);
            assert_eq!(c, vec![6, 1, 1]);
        }
    }

    #[test]
    fn uniform_batch_frequencies_are_flat() {
        // Heavily skewed pool, 3 positives per batch over 4 classes.
        let ds = toy(&[500, 100, 20, 5], 200);
        let it = uniform_batches(&ds, &ds.all_indices(), 12, 0.25, 17).unwrap();
        let mut freq = [0usize; 5];
        for b in it.take(10_000) {
            let c = ds.class_counts(&b);
            let pos = &c[1..];
            assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
            for k in 0..5 {
                freq[k] += c[k];
            }
        }
        let expected = 10_000.0 * 3.0 / 4.0;
        for k in 1..5 {
            let dev = (freq[k] as f64 - expected).abs() / expected;
            assert!(dev < 0.05, "class {k}: {} vs {expected}", freq[k]);
        }
    }

    #[test]
    fn uniform_batches_reject_empty_class() {
        let ds = toy(&[5, 0], 5);
        assert!(uniform_batches(&ds, &ds.all_indices(), 8, 0.25, 0).is_err());
        assert!(uniform_batches(&ds, &ds.all_indices(), 1, 0.25, 0).is_err());
    }

    #[test]
    fn subsets_are_deterministic_and_within_pool() {
        let ds = toy(&[40, 20, 7], 30);
        let pool: Vec<usize> = (0..ds.len()).step_by(2).collect();
        let a = rand_all(&ds, &pool, 0.3, 8).unwrap();
        let b = rand_all(&ds, &pool, 0.3, 8).unwrap();
        assert_eq!(a, b);
        let set: HashSet<usize> = pool.iter().copied().collect();
        assert!(a.kept.iter().all(|i| set.contains(i)));
        let mut out = Vec::new();
        a.write_ids(&ds, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), a.kept.len());
    }
}
