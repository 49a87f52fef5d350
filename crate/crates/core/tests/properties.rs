//! Property tests for sampling, clustering, mining, ranking and file formats.

use std::collections::{BTreeMap, BTreeSet};

use ltcascade::cascade::recall_quantile;
use ltcascade::clustering::{agglomerative, random_hierarchy, visual_similarity, HierarchyTree, SimilarityMatrix};
use ltcascade::dataset::{Dataset, Sample, Split};
use ltcascade::eval::average_precision;
use ltcascade::hier_train::mine_negatives;
use ltcascade::sampling::{pseudo_uniform, rand_all, rand_pos, UniformBatches};
use proptest::prelude::*;

/// One training sample per entry of `labels` (0 = background).
fn dataset_from_labels(labels: &[usize], num_classes: usize) -> Dataset {
    let samples = labels
        .iter()
        .enumerate()
        .map(|(n, &label)| Sample {
            id: format!("p{n:05}"),
            split: Split::Train,
            label,
            features: vec![n as f64, -(n as f64) / 7.0],
        })
        .collect();
    Dataset::new(samples, num_classes, 2).expect("dataset")
}

fn labels_strategy() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1usize..8).prop_flat_map(|c| (prop::collection::vec(0..=c, 1..200), Just(c)))
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

fn is_sorted_unique(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn symmetric_matrix(n: usize, raw: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let mut k = 0;
    for a in 0..n {
        for b in a..n {
            m[a * n + b] = raw[k];
            m[b * n + a] = raw[k];
            k += 1;
        }
    }
    m
}

fn matrix_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| (Just(n), prop::collection::vec(-1.0f64..1.0, n * (n + 1) / 2)))
}

fn counts_for(n: usize, pick: usize) -> Vec<usize> {
    let mut counts = vec![1];
    let mut j = 1;
    for step in [pick % n + 1, n] {
        if step > j {
            counts.push(step);
            j = step;
        }
    }
    counts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rand_pos_keeps_negatives_and_a_rounded_share_of_positives(
        (labels, c) in labels_strategy(), r in 0.01f64..=1.0, seed in any::<u64>()
    ) {
        let ds = dataset_from_labels(&labels, c);
        let pool = ds.all_indices();
        let positives = labels.iter().filter(|&&l| l != 0).count();
        prop_assume!(positives > 0);
        let sub = rand_pos(&ds, &pool, r, seed).unwrap();
        prop_assert!(is_sorted_unique(&sub.kept));
        let kept_pos = sub.kept.iter().filter(|&&i| labels[i] != 0).count();
        let kept_neg = sub.kept.len() - kept_pos;
        prop_assert_eq!(kept_pos, round_half_up(r * positives as f64).min(positives));
        prop_assert_eq!(kept_neg, labels.len() - positives);
        prop_assert_eq!(rand_pos(&ds, &pool, r, seed).unwrap(), sub);
    }

    #[test]
    fn rand_all_subsamples_both_sides((labels, c) in labels_strategy(), r in 0.01f64..=1.0, seed in any::<u64>()) {
        let ds = dataset_from_labels(&labels, c);
        let positives = labels.iter().filter(|&&l| l != 0).count();
        prop_assume!(positives > 0);
        let sub = rand_all(&ds, &ds.all_indices(), r, seed).unwrap();
        let kept_pos = sub.kept.iter().filter(|&&i| labels[i] != 0).count();
        let negatives = labels.len() - positives;
        prop_assert_eq!(kept_pos, round_half_up(r * positives as f64).min(positives));
        prop_assert_eq!(sub.kept.len() - kept_pos, round_half_up(r * negatives as f64).min(negatives));
    }

    #[test]
    fn pseudo_uniform_caps_every_class((labels, c) in labels_strategy(), n_max in 1usize..40, seed in any::<u64>()) {
        let ds = dataset_from_labels(&labels, c);
        let sub = pseudo_uniform(&ds, &ds.all_indices(), n_max, seed).unwrap();
        prop_assert!(is_sorted_unique(&sub.kept));
        for class in 0..=c {
            let before = labels.iter().filter(|&&l| l == class).count();
            let after = sub.kept.iter().filter(|&&i| labels[i] == class).count();
            let expected = if class == 0 { before } else { before.min(n_max) };
            prop_assert_eq!(after, expected, "class {}", class);
        }
    }

    #[test]
    fn uniform_batches_spread_positives_evenly(
        counts in prop::collection::vec(1usize..6, 1..6), neg in 1usize..6,
        batch in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()
    ) {
        let mut targets = vec![0; neg];
        for (t, &n) in counts.iter().enumerate() {
            targets.extend(std::iter::repeat_n(t + 1, n));
        }
        let classes = counts.len();
        let mut it = UniformBatches::new(&targets, classes + 1, batch, frac, seed).unwrap();
        let n_pos = it.positives_per_batch();
        for _ in 0..5 {
            let b = it.next().unwrap();
            prop_assert_eq!(b.len(), batch);
            let mut per = vec![0usize; classes + 1];
            for &p in &b {
                per[targets[p]] += 1;
            }
            prop_assert_eq!(per[1..].iter().sum::<usize>(), n_pos);
            let (lo, hi) = (per[1..].iter().min().unwrap(), per[1..].iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }

    #[test]
    fn agglomerative_yields_nested_partitions_with_requested_counts(
        (n, raw) in matrix_strategy(), pick in any::<usize>()
    ) {
        let classes: Vec<usize> = (1..=n).collect();
        let sim = SimilarityMatrix::new(classes.clone(), symmetric_matrix(n, &raw), "test").unwrap();
        let counts = counts_for(n, pick);
        let tree = agglomerative(&sim, &counts).unwrap();
        prop_assert_eq!(tree.group_counts(), counts);
        prop_assert_eq!(tree.classes(), classes.as_slice());
        // Re-validating through the constructor checks partition and nesting.
        let levels: Vec<Vec<Vec<usize>>> =
            tree.levels().iter().map(|lv| lv.iter().map(|g| g.classes.clone()).collect()).collect();
        prop_assert_eq!(HierarchyTree::from_levels(levels).unwrap(), tree);
    }

    #[test]
    fn agglomerative_is_equivariant_under_relabeling(
        (n, raw) in matrix_strategy(), pick in any::<usize>(), shuffle_seed in any::<u64>()
    ) {
        // Distinct values so that no tie-break depends on class IDs.
        let distinct: BTreeSet<u64> = raw.iter().map(|v| v.to_bits()).collect();
        prop_assume!(distinct.len() == raw.len());
        let classes: Vec<usize> = (1..=n).collect();
        let sim = SimilarityMatrix::new(classes.clone(), symmetric_matrix(n, &raw), "test").unwrap();
        let counts = counts_for(n, pick);
        // relabel[old position] = new class ID.
        let mut relabel: Vec<usize> = classes.clone();
        let mut s = shuffle_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            relabel.swap(i, (s >> 33) as usize % (i + 1));
        }
        // New position k holds new class k + 1, which was old position perm[k].
        let mut perm = vec![0; n];
        for (old, &new) in relabel.iter().enumerate() {
            perm[new - 1] = old;
        }
        let relabeled = sim.permuted(&perm, classes.clone());
        let a = agglomerative(&sim, &counts).unwrap();
        let b = agglomerative(&relabeled, &counts).unwrap();
        for l in 0..counts.len() {
            let mapped: BTreeSet<Vec<usize>> = a.level(l).iter().map(|g| {
                let mut v: Vec<usize> = g.classes.iter().map(|&c| relabel[c - 1]).collect();
                v.sort_unstable();
                v
            }).collect();
            let got: BTreeSet<Vec<usize>> = b.level(l).iter().map(|g| g.classes.clone()).collect();
            prop_assert_eq!(mapped, got);
        }
    }

    #[test]
    fn random_hierarchy_is_valid(n in 1usize..30, pick in any::<usize>(), seed in any::<u64>()) {
        let classes: Vec<usize> = (1..=n).collect();
        let counts = counts_for(n, pick);
        let tree = random_hierarchy(&classes, &counts, seed).unwrap();
        prop_assert_eq!(tree.group_counts(), counts);
        prop_assert_eq!(HierarchyTree::parse(&tree.to_text(), Some(&classes)).unwrap(), tree);
    }

    #[test]
    fn mining_matches_a_brute_force_filter(
        scores in prop::collection::vec(-5.0f64..5.0, 0..80), t in -6.0f64..6.0, floor in 0usize..10
    ) {
        let candidates: Vec<usize> = (0..scores.len()).map(|i| i * 3 + 1).collect();
        let (kept, kept_scores, floor_applied) = mine_negatives(&candidates, &scores, t, floor);
        let expected: Vec<usize> = candidates.iter().zip(&scores).filter(|(_, &s)| s > t).map(|(&c, _)| c).collect();
        if expected.is_empty() && !candidates.is_empty() {
            prop_assert!(floor_applied);
            prop_assert_eq!(kept.len(), floor.min(candidates.len()));
            // The floor keeps the hardest negatives.
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mut got = kept_scores.clone();
            got.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(got, sorted[..kept.len()].to_vec());
        } else {
            prop_assert!(!floor_applied);
            prop_assert_eq!(&kept, &expected);
            prop_assert!(kept_scores.iter().all(|&s| s > t));
        }
        prop_assert!(is_sorted_unique(&kept));
    }

    #[test]
    fn recall_quantile_keeps_the_requested_share(values in prop::collection::vec(-3.0f64..3.0, 1..60), r in 0.01f64..=1.0) {
        let mut v = values.clone();
        let q = recall_quantile(&mut v, r);
        let kept = values.iter().filter(|&&x| x >= q).count();
        prop_assert!(kept as f64 >= r * values.len() as f64 - 1e-9);
        prop_assert!(values.contains(&q));
    }

    #[test]
    fn average_precision_is_bounded_and_perfect_when_positives_lead(
        scores in prop::collection::vec(-1.0f64..1.0, 1..30), mask in any::<u64>()
    ) {
        let n = scores.len();
        let mut labels: Vec<bool> = (0..n).map(|i| mask >> (i % 64) & 1 == 1).collect();
        labels[0] = true;
        let owned: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let ids: Vec<&str> = owned.iter().map(String::as_str).collect();
        let ap = average_precision(&scores, &labels, &ids).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let separated: Vec<f64> = labels.iter().zip(&scores).map(|(&l, s)| if l { 2.0 + s } else { *s }).collect();
        prop_assert_eq!(average_precision(&separated, &labels, &ids).unwrap(), 1.0);
    }

    #[test]
    fn dataset_text_round_trips(
        rows in prop::collection::vec((0usize..5, prop::collection::vec(-1e6f64..1e6, 3), 0usize..4), 1..40)
    ) {
        let samples: Vec<Sample> = rows.iter().enumerate().map(|(n, (label, f, split))| Sample {
            id: format!("r{n}"),
            split: Split::ALL[*split],
            label: *label,
            features: f.clone(),
        }).collect();
        let ds = Dataset::new(samples, 4, 3).unwrap();
        prop_assert_eq!(Dataset::parse(&ds.to_text()).unwrap(), ds);
    }

    #[test]
    fn class_mean_similarity_equals_mean_pairwise_inner_product(
        groups in prop::collection::vec(prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..6), 2..5)
    ) {
        let by_class: BTreeMap<usize, Vec<Vec<f64>>> =
            groups.iter().enumerate().map(|(c, rows)| (c + 1, rows.clone())).collect();
        let sim = visual_similarity(&by_class).unwrap();
        for (a, ra) in groups.iter().enumerate() {
            for (b, rb) in groups.iter().enumerate() {
                let mut total = 0.0;
                for x in ra {
                    for y in rb {
                        total += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
                let pairwise = total / (ra.len() * rb.len()) as f64;
                prop_assert!((sim.get(a, b) - pairwise).abs() <= 1e-9 * (1.0 + pairwise.abs()));
            }
        }
    }
}
