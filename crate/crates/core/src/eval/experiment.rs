//! End-to-end pipeline runs and the sweep families built on them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{mean_ap, ClassAp, EvalReport, MetricSummary, SweepRow, SweepTable};
use crate::cascade::{CascadeEnsemble, CostStats, NodeModel};
use crate::clustering::{
    agglomerative, confusion_similarity, features_by_class, random_hierarchy, scalar_similarity, visual_similarity,
    HierarchyTree,
};
use crate::config::PipelineConfig;
use crate::datagen::{generate_synthetic, PlantedTruth};
use crate::dataset::{Dataset, Split, BACKGROUND};
use crate::error::{Error, Result};
use crate::hier_train::{pretrain_base, train_hierarchy, HierConfig, HierOutcome, StrategyPath};
use crate::models::{self, per_class_accuracy, train_ovr_svm, BatchSource, MlpModel, TrainConfig};
use crate::sampling::{nmax_for_ratio, pseudo_uniform, rand_all, rand_pos};
use crate::seed;

/// Dataset plus pretrained base for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub truth: Option<PlantedTruth>,
    pub base: MlpModel,
}

/// Generate data from `cfg.gen` unless a dataset is supplied, then pretrain the base.
pub fn prepare(cfg: &PipelineConfig, dataset: Option<&Dataset>) -> Result<Prepared> {
    let (dataset, truth) = match dataset {
        Some(d) => (d.clone(), None),
        None => {
            let (d, t) = generate_synthetic(&cfg.gen)?;
            (d, Some(t))
        }
    };
    let base = pretrain_base(&dataset, cfg)?;
    Ok(Prepared { dataset, truth, base })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub map: f64,
    /// mAP over the less populous half of the classes.
    pub tail_map: f64,
    pub per_class: Vec<ClassAp>,
    pub cost: CostStats,
    pub thresholds: Vec<f64>,
}

impl RunOutcome {
    fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::from([
            ("map".to_string(), self.map),
            ("tail_map".to_string(), self.tail_map),
            ("evaluations".to_string(), self.cost.total_evaluations as f64),
        ]);
        for (l, nb) in self.cost.avg_samples_per_model.iter().enumerate() {
            m.insert(format!("nb_l{}", l + 1), *nb);
        }
        m
    }
}

/// The `⌊n/2⌋` least populous of `classes` over the whole dataset (ties go to the larger ID).
pub fn tail_classes(dataset: &Dataset, classes: &[usize]) -> Vec<usize> {
    let counts = dataset.class_counts(&dataset.all_indices());
    let mut order = classes.to_vec();
    order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
    order.truncate(classes.len() / 2);
    order.sort_unstable();
    order
}

/// Calibrate thresholds on the calibration split (multi-level ensembles only),
/// then score and evaluate the evaluation split.
pub fn evaluate_ensemble(ensemble: &mut CascadeEnsemble, dataset: &Dataset, cfg: &PipelineConfig) -> Result<RunOutcome> {
    if ensemble.depth() > 1 {
        let calib = dataset.split_indices(cfg.calibration_split);
        ensemble.thresholds = ensemble.calibrate(dataset, &calib, cfg.recall_target)?;
    }
    let eval = dataset.split_indices(cfg.eval_split);
    let (rows, cost) = ensemble.score_batch(dataset, &eval)?;
    let labels: Vec<usize> = eval.iter().map(|&i| dataset.sample(i).label).collect();
    let ids: Vec<&str> = eval.iter().map(|&i| dataset.sample(i).id.as_str()).collect();
    let (map, per_class) = mean_ap(ensemble.classes(), &labels, &rows, &ids)?;
    let tail = tail_classes(dataset, ensemble.classes());
    let tail_aps: Vec<f64> = per_class.iter().filter(|c| tail.contains(&c.class)).map(|c| c.ap).collect();
    let tail_map = if tail_aps.is_empty() {
        map
    } else {
        tail_aps.iter().sum::<f64>() / tail_aps.len() as f64
    };
    Ok(RunOutcome {
        map,
        tail_map,
        per_class,
        cost,
        thresholds: ensemble.thresholds.clone(),
    })
}

/// Fraction of each non-root group's positives in `indices` that reach the
/// group's node (`recall[l][j]` for tree level `l + 1`).
pub fn group_recall(ensemble: &CascadeEnsemble, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let reached = crate::exec::map(indices, |&i| ensemble.reached(&dataset.sample(i).features))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for l in 1..ensemble.depth() {
        let mut level = Vec::new();
        for (j, group) in ensemble.tree.level(l).iter().enumerate() {
            let (mut hit, mut total) = (0usize, 0usize);
            for (k, &i) in indices.iter().enumerate() {
                if group.classes.binary_search(&dataset.sample(i).label).is_ok() {
                    total += 1;
                    hit += usize::from(reached[k][l][j]);
                }
            }
            level.push(if total == 0 { f64::NAN } else { hit as f64 / total as f64 });
        }
        out.push(level);
    }
    Ok(out)
}

/// How a class hierarchy is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum ClusterMethod {
    /// Class-mean feature similarity under the base model.
    Visual,
    /// Symmetrized validation confusion of the base model.
    Confusion,
    /// Training accuracy of the base model as a scalar descriptor.
    Accuracy,
    /// Training sample count as a scalar descriptor.
    Count,
    Random,
    /// User-supplied per-class scalar descriptor.
    Scalar(BTreeMap<usize, f64>),
    /// Fixed tree (taxonomy file).
    Taxonomy(HierarchyTree),
    /// Generator ground truth: one level of planted groups under the root.
    Planted,
}

impl FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "visual" => ClusterMethod::Visual,
            "confusion" => ClusterMethod::Confusion,
            "accuracy" => ClusterMethod::Accuracy,
            "count" => ClusterMethod::Count,
            "random" => ClusterMethod::Random,
            "planted" => ClusterMethod::Planted,
            _ => return Err(Error::config(format!("unknown cluster method '{s}'"))),
        })
    }
}

/// Build a tree over every dataset class with the given group counts.
pub fn build_tree(prep: &Prepared, method: &ClusterMethod, group_counts: &[usize], cfg: &PipelineConfig) -> Result<HierarchyTree> {
    let ds = &prep.dataset;
    let classes = ds.classes();
    let train = ds.splits_indices(&cfg.finetune_splits);
    let sim = match method {
        ClusterMethod::Visual => visual_similarity(&features_by_class(&prep.base, ds, &train, cfg.normalize)?)?,
        ClusterMethod::Confusion => confusion_similarity(&prep.base, ds, &ds.split_indices(cfg.calibration_split))?,
        ClusterMethod::Accuracy => {
            let acc = per_class_accuracy(&prep.base, ds, &train)?;
            let values = acc
                .iter()
                .zip(&classes)
                .map(|(a, c)| a.ok_or_else(|| Error::invalid(format!("class {c} has no training samples"))))
                .collect::<Result<Vec<f64>>>()?;
            scalar_similarity(&classes, &values, "accuracy")?
        }
        ClusterMethod::Count => {
            let counts = ds.class_counts(&train);
            let values: Vec<f64> = classes.iter().map(|&c| counts[c] as f64).collect();
            scalar_similarity(&classes, &values, "count")?
        }
        ClusterMethod::Scalar(map) => {
            let values = classes
                .iter()
                .map(|c| map.get(c).copied().ok_or_else(|| Error::invalid(format!("no descriptor for class {c}"))))
                .collect::<Result<Vec<f64>>>()?;
            scalar_similarity(&classes, &values, "scalar")?
        }
        ClusterMethod::Random => {
            return random_hierarchy(&classes, group_counts, seed::derive(cfg.seed, &[7]));
        }
        ClusterMethod::Taxonomy(tree) => {
            if tree.classes() != classes.as_slice() {
                return Err(Error::invalid("taxonomy classes differ from the dataset classes"));
            }
            return Ok(tree.clone());
        }
        ClusterMethod::Planted => {
            let truth = prep
                .truth
                .as_ref()
                .ok_or_else(|| Error::config("planted groups need a generated dataset"))?;
            return HierarchyTree::from_levels(vec![vec![classes], truth.groups()]);
        }
    };
    agglomerative(&sim, group_counts)
}

/// Train the hierarchy on `tree` and evaluate it.
pub fn run_hierarchy(
    prep: &Prepared,
    tree: &HierarchyTree,
    strategy: Option<&StrategyPath>,
    cfg: &PipelineConfig,
) -> Result<(HierOutcome, RunOutcome)> {
    let full = StrategyPath::full(tree.depth());
    let strategy = strategy.unwrap_or(&full);
    let mut base = prep.base.clone();
    base.freeze_lowest(cfg.freeze);
    let mut outcome = train_hierarchy(tree, &prep.dataset, &base, strategy, &HierConfig::from_pipeline(cfg))?;
    let run = evaluate_ensemble(&mut outcome.ensemble, &prep.dataset, cfg)?;
    Ok((outcome, run))
}

/// A single-level run with a custom finetuning set.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVariant {
    /// Finetuning samples (labels outside `head_classes` are dropped).
    pub pool: Vec<usize>,
    /// Classes of the finetuned softmax head.
    pub head_classes: Vec<usize>,
    /// Samples the SVMs are trained on.
    pub svm_pool: Vec<usize>,
    pub freeze: usize,
    pub batch_source: BatchSource,
}

impl FlatVariant {
    /// Finetune on every class of the configured finetuning splits.
    pub fn standard(dataset: &Dataset, cfg: &PipelineConfig) -> Self {
        let pool = dataset.splits_indices(&cfg.finetune_splits);
        FlatVariant {
            svm_pool: pool.clone(),
            pool,
            head_classes: dataset.classes(),
            freeze: cfg.freeze,
            batch_source: cfg.finetune.batch_source,
        }
    }
}

/// Finetune a root model from the base, train SVMs for every class, evaluate.
///
/// Seeds match the root node of [`crate::hier_train::train_hierarchy`], so the
/// standard variant reproduces a one-level hierarchy.
pub fn flat_run(prep: &Prepared, variant: &FlatVariant, cfg: &PipelineConfig) -> Result<RunOutcome> {
    let ds = &prep.dataset;
    let node_seed = seed::derive(cfg.seed, &[1, 1]);
    let mut model = prep.base.spawn_child(variant.head_classes.clone(), cfg.init_scale, node_seed)?;
    model.freeze_lowest(variant.freeze);
    let pool: Vec<usize> = variant
        .pool
        .iter()
        .copied()
        .filter(|&i| {
            let l = ds.sample(i).label;
            l == BACKGROUND || variant.head_classes.binary_search(&l).is_ok()
        })
        .collect();
    let tc = TrainConfig {
        seed: seed::derive(node_seed, &[1]),
        batch_source: variant.batch_source,
        ..cfg.finetune.clone()
    };
    let (model, _) = models::train(&model, ds, &pool, &tc)?;
    let features = models::extract_features(&model, ds, &variant.svm_pool, cfg.normalize)?;
    let labels: Vec<usize> = variant.svm_pool.iter().map(|&i| ds.sample(i).label).collect();
    let classes = ds.classes();
    let svm = train_ovr_svm(&features, &labels, &classes, &cfg.svm)?;
    let mut ensemble = CascadeEnsemble {
        tree: HierarchyTree::flat(&classes)?,
        nodes: vec![vec![NodeModel {
            model,
            svm,
            trained: true,
        }]],
        thresholds: Vec::new(),
        strategy: StrategyPath::full(1),
        seed: cfg.seed,
        normalize: cfg.normalize,
        gate: cfg.gate,
    };
    evaluate_ensemble(&mut ensemble, ds, cfg)
}

/// Sweep families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Subset schemes at matched positive ratios, plus class-uniform batches.
    Sampling,
    /// Number of lowest layers frozen during finetuning.
    Freeze,
    /// Finetune on a selected subset of classes, evaluate all classes.
    ClassSubset,
    /// Hierarchy construction methods.
    Clustering,
    /// Hierarchy depth.
    LevelSweep,
    /// Finetuning strategy paths.
    Strategy,
    /// Which splits provide the finetuning data.
    SplitRole,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Sampling,
        Family::Freeze,
        Family::ClassSubset,
        Family::Clustering,
        Family::LevelSweep,
        Family::Strategy,
        Family::SplitRole,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sampling => "sampling",
            Family::Freeze => "freeze",
            Family::ClassSubset => "class-subset",
            Family::Clustering => "clustering",
            Family::LevelSweep => "level-sweep",
            Family::Strategy => "strategy",
            Family::SplitRole => "split-role",
        }
    }

    pub fn default_grid(self, cfg: &PipelineConfig) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match self {
            Family::Sampling => {
                let mut g = vec!["full".to_string(), "uniform-batches".to_string()];
                for k in 1..=5 {
                    let r = 0.5f64.powi(k);
                    for scheme in ["rand-pos", "rand-all", "pseudo-uniform"] {
                        g.push(format!("{scheme}:{r}"));
                    }
                }
                g
            }
            Family::Freeze => (0..=cfg.hidden.len() + 1).map(|k| k.to_string()).collect(),
            Family::ClassSubset => {
                let c = cfg.gen.classes;
                let mut g = vec!["all".to_string()];
                for k in [c / 4, c / 2] {
                    for sel in ["count-top", "count-bottom", "accuracy-top", "accuracy-bottom"] {
                        g.push(format!("{sel}:{k}"));
                    }
                }
                g
            }
            Family::Clustering => s(&["visual", "confusion", "accuracy", "count", "random", "planted"]),
            Family::LevelSweep => (1..=cfg.level_counts.len()).map(|l| format!("L={l}")).collect(),
            Family::Strategy => s(&["0,1", "0,2", "0,1,2"]),
            Family::SplitRole => s(&["train", "train+val", "pretrain+train", "pretrain+train+val"]),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment family '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub family: Family,
    /// Grid points; empty means the family default.
    pub grid: Vec<String>,
    pub seeds: Vec<u64>,
    pub config: PipelineConfig,
    /// Fixed dataset; when absent data is generated per seed.
    pub dataset: Option<Dataset>,
}

fn parse_ratio(point: &str, text: &str) -> Result<f64> {
    text.parse::<f64>()
        .map_err(|_| Error::config(format!("bad ratio in grid point '{point}'")))
}

fn sampling_point(prep: &Prepared, point: &str, cfg: &PipelineConfig) -> Result<BTreeMap<String, f64>> {
    let ds = &prep.dataset;
    let mut variant = FlatVariant::standard(ds, cfg);
    let subset_seed = seed::derive(cfg.seed, &[11]);
    let ratio = match point.split_once(':') {
        None if point == "full" => 1.0,
        None if point == "uniform-batches" => {
            variant.batch_source = BatchSource::ClassUniform {
                pos_fraction: match cfg.finetune.batch_source {
                    BatchSource::ClassUniform { pos_fraction } => pos_fraction,
                    BatchSource::Shuffled => 0.25,
                },
            };
            1.0
        }
        Some((scheme, r)) => {
            let r = parse_ratio(point, r)?;
            let subset = match scheme {
                "rand-pos" => rand_pos(ds, &variant.pool, r, subset_seed)?,
                "rand-all" => rand_all(ds, &variant.pool, r, subset_seed)?,
                "pseudo-uniform" => {
                    let counts = ds.class_counts(&variant.pool);
                    let n_max = nmax_for_ratio(&counts[1..], r)?;
                    pseudo_uniform(ds, &variant.pool, n_max, subset_seed)?
                }
                _ => return Err(Error::config(format!("unknown sampling scheme '{scheme}'"))),
            };
            variant.pool = subset.kept;
            subset.positive_ratio
        }
        None => return Err(Error::config(format!("unknown sampling grid point '{point}'"))),
    };
    let mut m = flat_run(prep, &variant, cfg)?.metrics();
    m.insert("positive_ratio".into(), ratio);
    Ok(m)
}

fn class_subset_point(prep: &Prepared, point: &str, cfg: &PipelineConfig) -> Result<BTreeMap<String, f64>> {
    let ds = &prep.dataset;
    let mut variant = FlatVariant::standard(ds, cfg);
    if point != "all" {
        let (sel, k) = point
            .split_once(':')
            .ok_or_else(|| Error::config(format!("bad class-subset grid point '{point}'")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::config(format!("bad class count in '{point}'")))?;
        if k == 0 || k > variant.head_classes.len() {
            return Err(Error::config(format!("cannot select {k} classes")));
        }
        let (key, top) = match sel {
            "count-top" => ("count", true),
            "count-bottom" => ("count", false),
            "accuracy-top" => ("accuracy", true),
            "accuracy-bottom" => ("accuracy", false),
            _ => return Err(Error::config(format!("unknown class selection '{sel}'"))),
        };
        let values: Vec<f64> = if key == "count" {
            let counts = ds.class_counts(&variant.pool);
            variant.head_classes.iter().map(|&c| counts[c] as f64).collect()
        } else {
            per_class_accuracy(&prep.base, ds, &variant.pool)?
                .into_iter()
                .map(|a| a.unwrap_or(0.0))
                .collect()
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        // Stable order: by value, ties by class ID.
        order.sort_by(|&a, &b| {
            let ord = values[a].total_cmp(&values[b]);
            (if top { ord.reverse() } else { ord }).then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order[..k].iter().map(|&i| variant.head_classes[i]).collect();
        chosen.sort_unstable();
        variant.head_classes = chosen;
    }
    flat_run(prep, &variant, cfg).map(|r| r.metrics())
}

fn split_role_point(prep: &Prepared, point: &str, cfg: &PipelineConfig) -> Result<BTreeMap<String, f64>> {
    let splits = point
        .split('+')
        .map(|s| s.parse::<Split>().map_err(Error::config))
        .collect::<Result<Vec<_>>>()?;
    if splits.contains(&cfg.eval_split) {
        return Err(Error::config(format!("'{point}' trains on the evaluation split")));
    }
    let mut variant = FlatVariant::standard(&prep.dataset, cfg);
    variant.pool = prep.dataset.splits_indices(&splits);
    variant.svm_pool = variant.pool.clone();
    flat_run(prep, &variant, cfg).map(|r| r.metrics())
}

fn run_point(family: Family, prep: &Prepared, point: &str, cfg: &PipelineConfig) -> Result<BTreeMap<String, f64>> {
    match family {
        Family::Sampling => sampling_point(prep, point, cfg),
        Family::Freeze => {
            let k: usize = point
                .parse()
                .map_err(|_| Error::config(format!("bad freeze depth '{point}'")))?;
            let mut variant = FlatVariant::standard(&prep.dataset, cfg);
            variant.freeze = k;
            flat_run(prep, &variant, cfg).map(|r| r.metrics())
        }
        Family::ClassSubset => class_subset_point(prep, point, cfg),
        Family::SplitRole => split_role_point(prep, point, cfg),
        Family::Clustering => {
            let method: ClusterMethod = point.parse()?;
            let tree = build_tree(prep, &method, &cfg.group_counts, cfg)?;
            let mut m = run_hierarchy(prep, &tree, None, cfg)?.1.metrics();
            if let Some(truth) = &prep.truth {
                let planted = HierarchyTree::from_levels(vec![vec![prep.dataset.classes()], truth.groups()])?;
                let matched = tree.depth() >= 2 && tree.level(1) == planted.level(1);
                m.insert("planted_match".into(), f64::from(u8::from(matched)));
            }
            Ok(m)
        }
        Family::LevelSweep => {
            let depth: usize = point
                .strip_prefix("L=")
                .unwrap_or(point)
                .parse()
                .map_err(|_| Error::config(format!("bad level count '{point}'")))?;
            if depth == 0 || depth > cfg.level_counts.len() {
                return Err(Error::config(format!("no group counts for {depth} levels")));
            }
            let method: ClusterMethod = cfg.cluster_method.parse()?;
            let tree = build_tree(prep, &method, &cfg.level_counts[..depth], cfg)?;
            run_hierarchy(prep, &tree, None, cfg).map(|r| r.1.metrics())
        }
        Family::Strategy => {
            let strategy = StrategyPath::parse(point)?;
            let method: ClusterMethod = cfg.cluster_method.parse()?;
            let tree = build_tree(prep, &method, &cfg.group_counts, cfg)?;
            run_hierarchy(prep, &tree, Some(&strategy), cfg).map(|r| r.1.metrics())
        }
    }
}

/// Run every grid point for every seed and aggregate per point.
///
/// Failing points are recorded in their row and the sweep continues.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<EvalReport> {
    if spec.seeds.is_empty() {
        return Err(Error::config("experiment needs at least one seed"));
    }
    let grid = if spec.grid.is_empty() {
        spec.family.default_grid(&spec.config)
    } else {
        spec.grid.clone()
    };
    let mut values: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); grid.len()];
    let mut errors: Vec<Vec<String>> = vec![Vec::new(); grid.len()];
    for &s in &spec.seeds {
        let cfg = spec.config.with_seed(s);
        let prep = match prepare(&cfg, spec.dataset.as_ref()) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("seed {s}: {e}");
                errors.iter_mut().for_each(|v| v.push(format!("seed {s}: {e}")));
                continue;
            }
        };
        for (k, point) in grid.iter().enumerate() {
            match run_point(spec.family, &prep, point, &cfg) {
                Ok(m) => {
                    for (name, v) in m {
                        values[k].entry(name).or_default().push(v);
                    }
                }
                Err(e) => {
                    log::warn!("{} '{point}', seed {s}: {e}", spec.family);
                    errors[k].push(format!("seed {s}: {e}"));
                }
            }
        }
    }
    let rows = grid
        .into_iter()
        .zip(values)
        .zip(errors)
        .map(|((condition, vals), errors)| SweepRow {
            condition,
            seeds: spec.seeds.clone(),
            metrics: vals.into_iter().map(|(k, v)| (k, MetricSummary::from_values(v))).collect(),
            errors,
        })
        .collect();
    let mut report = EvalReport::new("experiment", &spec.config);
    report.inputs.insert("family".into(), spec.family.to_string());
    report.inputs.insert(
        "seeds".into(),
        spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    report.tables.push(SweepTable {
        family: spec.family.to_string(),
        rows,
    });
    Ok(report)
}
