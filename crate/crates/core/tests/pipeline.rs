//! Cross-module checks on small trained ensembles.

use std::sync::OnceLock;

use ltcascade::cascade::{parse_scores, scores_to_text, CascadeEnsemble};
use ltcascade::clustering::HierarchyTree;
use ltcascade::config::PipelineConfig;
use ltcascade::dataset::Split;
use ltcascade::eval::{build_tree, flat_run, prepare, run_hierarchy, ClusterMethod, FlatVariant, Prepared};
use ltcascade::hier_train::{train_hierarchy, HierConfig, MiningThresholds, StrategyPath};
use ltcascade::models::{self, TrainConfig};
use ltcascade::{seed, SENTINEL};

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(5);
    cfg.gen.classes = 12;
    cfg.gen.groups = 3;
    cfg.gen.n_total = 900;
    cfg.gen.background_ratio = 1.0;
    cfg.hidden = vec![16, 8];
    cfg.pretrain.epochs = 4;
    cfg.finetune.epochs = 4;
    cfg.min_node_epochs = 1;
    cfg.svm.iterations = 150;
    cfg.group_counts = vec![1, 3];
    cfg
}

fn fixture() -> &'static (PipelineConfig, Prepared) {
    static FIXTURE: OnceLock<(PipelineConfig, Prepared)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = small_config();
        let prep = prepare(&cfg, None).expect("prepare");
        (cfg, prep)
    })
}

fn three_level_tree(prep: &Prepared) -> HierarchyTree {
    let planted = prep.truth.as_ref().expect("generated").groups();
    // Split every planted group in two for a third level.
    let finer: Vec<Vec<usize>> = planted
        .iter()
        .flat_map(|g| {
            let (a, b) = g.split_at(g.len() / 2);
            [a.to_vec(), b.to_vec()]
        })
        .collect();
    HierarchyTree::from_levels(vec![vec![prep.dataset.classes()], planted, finer]).expect("tree")
}

fn trained_ensemble() -> &'static CascadeEnsemble {
    static ENSEMBLE: OnceLock<CascadeEnsemble> = OnceLock::new();
    ENSEMBLE.get_or_init(|| {
        let (cfg, prep) = fixture();
        let tree = three_level_tree(prep);
        let mut ens = train_hierarchy(&tree, &prep.dataset, &prep.base, &StrategyPath::full(3), &HierConfig::from_pipeline(cfg))
            .expect("train")
            .ensemble;
        let val = prep.dataset.split_indices(Split::Val);
        ens.thresholds = ens.calibrate(&prep.dataset, &val, 0.9).expect("calibrate");
        ens
    })
}

/// Independent cascade walk: a node is visited iff its parent was visited and
/// the parent's best score over the node's classes clears the level threshold.
fn brute_force_score(ens: &CascadeEnsemble, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let tree = &ens.tree;
    let mut open = vec![vec![true]];
    for l in 1..tree.depth() {
        let level: Vec<bool> = tree
            .level(l)
            .iter()
            .map(|g| {
                let p = g.parent.expect("non-root");
                if !open[l - 1][p] {
                    return false;
                }
                let parent = &ens.nodes[l - 1][p];
                let out = parent.evaluate(x, ens.normalize, ens.gate).expect("evaluate");
                let best = g
                    .classes
                    .iter()
                    .map(|&c| out.svm[parent.svm.position(c).expect("parent scores child classes")])
                    .fold(f64::NEG_INFINITY, f64::max);
                best >= ens.thresholds[l - 1]
            })
            .collect();
        open.push(level);
    }
    let leaf = tree.depth() - 1;
    let scores = ens
        .classes()
        .iter()
        .map(|&c| {
            let j = tree.group_of(leaf, c).expect("class");
            if !open[leaf][j] {
                return SENTINEL;
            }
            let node = &ens.nodes[leaf][j];
            let f = node.model.extract_features(x, ens.normalize).expect("features");
            node.svm.scores(&f).expect("svm")[node.svm.position(c).expect("class")]
        })
        .collect();
    (scores, open.iter().map(|lv| lv.iter().filter(|&&o| o).count()).collect())
}

#[test]
fn cascade_matches_brute_force_walker() {
    let (_, prep) = fixture();
    let ens = trained_ensemble();
    for i in prep.dataset.split_indices(Split::Test) {
        let x = &prep.dataset.sample(i).features;
        let (scores, evals) = ens.score(x).expect("score");
        let (want, want_evals) = brute_force_score(ens, x);
        assert_eq!(evals, want_evals, "sample {i}");
        assert_eq!(
            scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|s| s.to_bits()).collect::<Vec<_>>(),
            "sample {i}"
        );
    }
}

#[test]
fn raising_a_threshold_only_rejects_more() {
    let (_, prep) = fixture();
    let base = trained_ensemble();
    let test = prep.dataset.split_indices(Split::Test);
    let (before, _) = base.score_batch(&prep.dataset, &test).expect("score");
    for l in 0..base.thresholds.len() {
        let mut raised = base.clone();
        raised.thresholds[l] += 0.25;
        let (after, _) = raised.score_batch(&prep.dataset, &test).expect("score");
        for (b, a) in before.iter().zip(&after) {
            for (x, y) in b.iter().zip(a) {
                // A rejected class stays rejected; a surviving score is unchanged.
                assert!(*y == SENTINEL || y.to_bits() == x.to_bits());
                if *x == SENTINEL {
                    assert_eq!(*y, SENTINEL);
                }
            }
        }
    }
}

#[test]
fn cost_stats_are_consistent() {
    let (_, prep) = fixture();
    let ens = trained_ensemble();
    let test = prep.dataset.split_indices(Split::Test);
    let (_, cost) = ens.score_batch(&prep.dataset, &test).expect("score");
    let mut per_level = vec![0usize; ens.depth()];
    for &i in &test {
        let (_, evals) = ens.score(&prep.dataset.sample(i).features).expect("score");
        per_level.iter_mut().zip(evals).for_each(|(a, e)| *a += e);
    }
    assert_eq!(cost.samples, test.len());
    assert_eq!(cost.evaluations, per_level);
    assert_eq!(cost.evaluations[0], test.len());
    assert_eq!(cost.total_evaluations, per_level.iter().sum::<usize>());
    for (l, &j) in cost.models_per_level.iter().enumerate() {
        assert_eq!(cost.avg_samples_per_model[l], per_level[l] as f64 / j as f64);
    }
    let mut open = ens.clone();
    open.thresholds.iter_mut().for_each(|t| *t = f64::NEG_INFINITY);
    let (_, all) = open.score_batch(&prep.dataset, &test).expect("score");
    assert_eq!(all.evaluations, ens.tree.group_counts().iter().map(|j| j * test.len()).collect::<Vec<_>>());
}

#[test]
fn calibrated_thresholds_meet_the_recall_target_on_their_split() {
    let (_, prep) = fixture();
    let ens = trained_ensemble();
    let val = prep.dataset.split_indices(Split::Val);
    // Calibration guarantees each gate's recall with its ancestors open.
    for l in 0..ens.thresholds.len() {
        let mut only = ens.clone();
        for (k, t) in only.thresholds.iter_mut().enumerate() {
            if k != l {
                *t = f64::NEG_INFINITY;
            }
        }
        let recall = ltcascade::eval::group_recall(&only, &prep.dataset, &val).expect("recall");
        for &r in &recall[l] {
            assert!(r >= 0.9, "level {} group recall {r}", l + 2);
        }
    }
}

#[test]
fn ensemble_and_score_files_round_trip() {
    let (_, prep) = fixture();
    let ens = trained_ensemble();
    let dir = tempfile::tempdir().expect("tempdir");
    ens.save(dir.path()).expect("save");
    let loaded = CascadeEnsemble::load(dir.path()).expect("load");
    assert_eq!(&loaded, ens);
    let test = prep.dataset.split_indices(Split::Test);
    let (rows, _) = ens.score_batch(&prep.dataset, &test).expect("score");
    let text = scores_to_text(&prep.dataset, &test, ens.classes(), &rows);
    let parsed = parse_scores(&text, prep.dataset.num_classes()).expect("parse");
    for ((id, row), (&i, want)) in parsed.iter().zip(test.iter().zip(&rows)) {
        assert_eq!(id, &prep.dataset.sample(i).id);
        assert_eq!(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), want.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn skipped_level_spawns_from_the_nearest_trained_ancestor_bit_exactly() {
    let (cfg, prep) = fixture();
    let mut frozen_lr = HierConfig::from_pipeline(cfg);
    frozen_lr.train.learning_rate = 0.0;
    let tree = three_level_tree(prep);
    let strategy = StrategyPath::parse("0,1,3").expect("strategy");
    let out = train_hierarchy(&tree, &prep.dataset, &prep.base, &strategy, &frozen_lr).expect("train");
    let ens = &out.ensemble;
    for (j, g) in tree.level(1).iter().enumerate() {
        let parent = &ens.nodes[0][g.parent.expect("parent")];
        assert!(!ens.nodes[1][j].trained);
        assert_eq!(ens.nodes[1][j].model, parent.model, "pass-through node copies its parent");
    }
    let root_hidden = &ens.nodes[0][0].model.layers()[..cfg.hidden.len()];
    for node in &ens.nodes[2] {
        assert!(node.trained);
        assert_eq!(&node.model.layers()[..cfg.hidden.len()], root_hidden);
    }
    // Pass-through nodes still own an SVM bank over their group.
    for (j, g) in tree.level(1).iter().enumerate() {
        assert_eq!(ens.nodes[1][j].svm.class_set(), g.classes.as_slice());
    }
}

#[test]
fn one_group_chain_with_open_gates_matches_flat_training() {
    let (cfg, prep) = fixture();
    let ds = &prep.dataset;
    let classes = ds.classes();
    let tree = HierarchyTree::from_levels(vec![vec![classes.clone()], vec![classes.clone()]]).expect("tree");
    let mut hc = HierConfig::from_pipeline(cfg);
    hc.mining = MiningThresholds::Fixed(vec![f64::NEG_INFINITY]);
    let out = train_hierarchy(&tree, ds, &prep.base, &StrategyPath::full(2), &hc).expect("train");
    let root = &out.ensemble.nodes[0][0].model;
    assert_eq!(out.states[1][0].negatives, out.states[0][0].negatives);
    assert_eq!(out.states[1][0].epochs, cfg.finetune.epochs);

    // Flat training of the root model with the leaf's seed and schedule.
    let node_seed = seed::derive(cfg.seed, &[2, 1]);
    let child = root.spawn_child(classes, cfg.init_scale, node_seed).expect("spawn");
    let pool = ds.splits_indices(&cfg.finetune_splits);
    let tc = TrainConfig {
        seed: seed::derive(node_seed, &[1]),
        ..cfg.finetune.clone()
    };
    let (flat, _) = models::train(&child, ds, &pool, &tc).expect("train");
    assert_eq!(out.ensemble.nodes[1][0].model, flat);
}

#[test]
fn one_level_hierarchy_equals_the_flat_baseline() {
    let (cfg, prep) = fixture();
    let tree = HierarchyTree::flat(&prep.dataset.classes()).expect("tree");
    let (_, hier) = run_hierarchy(prep, &tree, Some(&StrategyPath::full(1)), cfg).expect("hierarchy");
    let flat = flat_run(prep, &FlatVariant::standard(&prep.dataset, cfg), cfg).expect("flat");
    assert_eq!(hier, flat);
}

#[test]
fn node_states_respect_mining_invariants() {
    let (cfg, prep) = fixture();
    let tree = build_tree(prep, &ClusterMethod::Visual, &cfg.group_counts, cfg).expect("tree");
    let out = train_hierarchy(&tree, &prep.dataset, &prep.base, &StrategyPath::full(2), &HierConfig::from_pipeline(cfg))
        .expect("train");
    for (l, level) in out.states.iter().enumerate() {
        for (j, st) in level.iter().enumerate() {
            let group = tree.group((l, j));
            assert!(!st.positives.is_empty());
            for &i in &st.positives {
                assert!(group.classes.contains(&prep.dataset.sample(i).label));
            }
            if let (Some(p), Some(t)) = (group.parent, st.threshold) {
                let parent = &out.states[l - 1][p].negatives;
                assert!(st.negatives.iter().all(|i| parent.contains(i)));
                if !st.floor_applied {
                    assert!(st.negative_scores.iter().all(|&s| s > t));
                }
            }
        }
    }
}

#[test]
fn threshold_above_every_score_engages_the_negative_floor() {
    let (cfg, prep) = fixture();
    let tree = HierarchyTree::from_levels(vec![
        vec![prep.dataset.classes()],
        prep.truth.as_ref().expect("truth").groups(),
    ])
    .expect("tree");
    let mut hc = HierConfig::from_pipeline(cfg);
    hc.mining = MiningThresholds::Fixed(vec![f64::INFINITY]);
    hc.negative_floor = 7;
    let out = train_hierarchy(&tree, &prep.dataset, &prep.base, &StrategyPath::full(2), &hc).expect("train");
    for st in &out.states[1] {
        assert!(st.floor_applied);
        assert_eq!(st.negatives.len(), 7);
    }
}
