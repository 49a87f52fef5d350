//! Synthetic long-tailed datasets with a planted two-level class structure.
//!
//! Group means are drawn around the origin with spread `between_sigma`, class
//! means around their group mean with spread `within_sigma`, and samples around
//! their class mean with isotropic noise `noise_scale * within_sigma`. Background
//! samples come from a broad zero-mean Gaussian. Per-class counts follow a Zipf
//! law and every class is split across pretrain/train/val/test in fixed
//! proportions.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, Sample, Split, BACKGROUND};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    pub dim: usize,
    pub zipf_s: f64,
    /// Positive sample budget across all classes.
    pub n_total: usize,
    pub groups: usize,
    pub within_sigma: f64,
    pub between_sigma: f64,
    /// Sample noise relative to `within_sigma`.
    pub noise_scale: f64,
    /// Spread of the background distribution.
    pub background_sigma: f64,
    /// Background samples per positive sample.
    pub background_ratio: f64,
    /// pretrain / train / val / test.
    pub split_fractions: [f64; 4],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 40,
            dim: 16,
            zipf_s: 1.0,
            n_total: 4000,
            groups: 4,
            within_sigma: 0.3,
            between_sigma: 1.0,
            noise_scale: 1.0,
            background_sigma: 1.0,
            background_ratio: 3.0,
            split_fractions: [0.25, 0.35, 0.15, 0.25],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(Error::config("classes and dim must be at least 1"));
        }
        if self.groups == 0 || self.groups > self.classes {
            return Err(Error::config("groups must be in 1..=classes"));
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return Err(Error::config("zipf_s must be a finite value >= 0"));
        }
        if self.n_total < self.classes {
            return Err(Error::config("n_total must be at least the class count"));
        }
        for (name, v) in [
            ("within_sigma", self.within_sigma),
            ("between_sigma", self.between_sigma),
            ("noise_scale", self.noise_scale),
            ("background_sigma", self.background_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0")));
            }
        }
        if !(self.background_ratio >= 0.0 && self.background_ratio.is_finite()) {
            return Err(Error::config("background_ratio must be >= 0"));
        }
        if self.split_fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::config("split fractions must be >= 0"));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Ground truth recorded alongside a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// `group_of[c - 1]` is the 1-based planted group of class `c`.
    pub group_of: Vec<usize>,
    pub counts: Vec<usize>,
}

impl PlantedTruth {
    /// Planted groups as sorted class-ID lists, ordered by group number.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let g = self.group_of.iter().copied().max().unwrap_or(0);
        let mut out = vec![Vec::new(); g];
        for (i, &grp) in self.group_of.iter().enumerate() {
            out[grp - 1].push(i + 1);
        }
        out
    }

    /// Sidecar text: one `<class> <group> <count>` line per class.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# class group count\n");
        for (i, (&g, &n)) in self.group_of.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(s, "{} {} {}", i + 1, g, n);
        }
        s
    }
}

/// Round half up, tolerant of representation error just below the tie.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Integer counts proportional to `k^-s` for `k = 1..=classes`, summing exactly
/// to `n_total` (largest remainder, ties to the smaller class), every class ≥ 1.
pub fn zipf_counts(classes: usize, s: f64, n_total: usize) -> Result<Vec<usize>> {
    if classes == 0 {
        return Err(Error::config("class count must be at least 1"));
    }
    if n_total < classes {
        return Err(Error::config(format!(
            "n_total {n_total} is smaller than the class count {classes}"
        )));
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::config("zipf exponent must be finite and >= 0"));
    }
    let weights: Vec<f64> = (1..=classes).map(|k| (k as f64).powf(-s)).collect();
    let total_w: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w * n_total as f64 / total_w).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n_total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    // Lift empty classes by borrowing from the largest one.
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..classes)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("classes >= 1");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

/// Split `n` items into per-split counts by cumulative round-half-up boundaries.
fn split_counts(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let mut out = [0; 4];
    let mut cum = 0.0;
    let mut prev = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let bound = if i == 3 { n } else { round_half_up(cum * n as f64).min(n) };
        out[i] = bound.saturating_sub(prev);
        prev = bound.max(prev);
    }
    out
}

fn gaussian(rng: &mut seed::Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sigma * z
        })
        .collect()
}

/// Generate a dataset and its planted truth. Same config ⇒ identical output.
pub fn generate_synthetic(config: &GenConfig) -> Result<(Dataset, PlantedTruth)> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let counts = zipf_counts(config.classes, config.zipf_s, config.n_total)?;

    // Balanced class→group assignment over a shuffled class order.
    let mut class_order: Vec<usize> = (0..config.classes).collect();
    class_order.shuffle(&mut rng);
    let mut group_of = vec![0; config.classes];
    for (pos, &c) in class_order.iter().enumerate() {
        group_of[c] = pos % config.groups + 1;
    }

    let origin = vec![0.0; config.dim];
    let group_means: Vec<Vec<f64>> = (0..config.groups)
        .map(|_| gaussian(&mut rng, &origin, config.between_sigma))
        .collect();
    let class_means: Vec<Vec<f64>> = (0..config.classes)
        .map(|c| gaussian(&mut rng, &group_means[group_of[c] - 1], config.within_sigma))
        .collect();

    let noise = config.noise_scale * config.within_sigma;
    let mut raw: Vec<(Split, usize, Vec<f64>)> = Vec::new();
    let mut push_block = |rng: &mut seed::Rng, label: usize, n: usize, center: &[f64], sigma: f64| {
        let per_split = split_counts(n, &config.split_fractions);
        for (split, &k) in Split::ALL.iter().zip(&per_split) {
            for _ in 0..k {
                raw.push((*split, label, gaussian(rng, center, sigma)));
            }
        }
    };
    for c in 0..config.classes {
        push_block(&mut rng, c + 1, counts[c], &class_means[c], noise);
    }
    let n_background = round_half_up(config.background_ratio * config.n_total as f64);
    push_block(&mut rng, BACKGROUND, n_background, &origin, config.background_sigma);

    raw.shuffle(&mut rng);
    let width = raw.len().to_string().len();
    let samples = raw
        .into_iter()
        .enumerate()
        .map(|(i, (split, label, features))| Sample {
            id: format!("s{i:0width$}"),
            split,
            label,
            features,
        })
        .collect();
    let dataset = Dataset::new(samples, config.classes, config.dim)?;
    Ok((dataset, PlantedTruth { group_of, counts }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::profile;

    #[test]
    fn zipf_examples() {
        assert_eq!(zipf_counts(3, 1.0, 110).unwrap(), vec![60, 30, 20]);
        assert_eq!(zipf_counts(4, 0.0, 100).unwrap(), vec![25, 25, 25, 25]);
        assert_eq!(zipf_counts(2, 2.0, 10).unwrap(), vec![8, 2]);
    }

    #[test]
    fn zipf_rejects_small_budget_and_keeps_every_class() {
        assert!(zipf_counts(5, 1.0, 4).is_err());
        let c = zipf_counts(10, 3.0, 12).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 12);
        assert!(c.iter().all(|&x| x >= 1));
    }

    #[test]
    fn split_counts_cover_everything() {
        let c = split_counts(23, &[0.25, 0.35, 0.15, 0.25]);
        assert_eq!(c.iter().sum::<usize>(), 23);
        assert_eq!(split_counts(0, &[0.25, 0.25, 0.25, 0.25]), [0; 4]);
    }

    #[test]
    fn generation_is_deterministic_and_matches_counts() {
        let cfg = GenConfig {
            classes: 6,
            n_total: 120,
            groups: 2,
            dim: 3,
            seed: 11,
            ..GenConfig::default()
        };
        let (a, truth) = generate_synthetic(&cfg).unwrap();
        let (b, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let p = profile(&a);
        let counts: Vec<usize> = (1..=6).map(|c| p.count(c)).collect();
        assert_eq!(counts, zipf_counts(6, 1.0, 120).unwrap());
        assert_eq!(truth.groups().len(), 2);
        assert_eq!(a.class_counts(&a.all_indices())[0], 360);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = GenConfig {
            groups: 50,
            ..GenConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = GenConfig {
            split_fractions: [0.5, 0.5, 0.5, 0.0],
            ..GenConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = GenConfig {
            within_sigma: 0.0,
            ..GenConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn tiny_within_spread_makes_nearest_mean_exact() {
        let cfg = GenConfig {
            classes: 5,
            groups: 5,
            n_total: 200,
            within_sigma: 1e-4,
            background_ratio: 0.0,
            seed: 3,
            ..GenConfig::default()
        };
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        let mut means = vec![vec![0.0; ds.dim()]; 6];
        let counts = ds.class_counts(&ds.all_indices());
        for s in ds.samples() {
            for (m, v) in means[s.label].iter_mut().zip(&s.features) {
                *m += v / counts[s.label] as f64;
            }
        }
        let correct = ds
            .samples()
            .iter()
            .filter(|s| {
                let best = (1..=5)
                    .min_by(|&a, &b| {
                        let da: f64 = means[a].iter().zip(&s.features).map(|(m, x)| (m - x).powi(2)).sum();
                        let db: f64 = means[b].iter().zip(&s.features).map(|(m, x)| (m - x).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == s.label
            })
            .count();
        assert_eq!(correct, ds.len());
    }
}
