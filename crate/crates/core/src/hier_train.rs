//! Parent-initialized training of one model per tree node with cascaded
//! negative mining.
//!
//! Levels are processed top-down. A node on a level named in the strategy path
//! starts from its parent's model (fresh output head over its group) and is
//! finetuned on its group's positives plus the parent's negatives that the
//! parent still scores above the level threshold. Nodes on levels the strategy
//! skips reuse the parent model unchanged. Every node gets its own SVM bank.

use std::fmt;

use crate::cascade::{recall_quantile, CascadeEnsemble, NodeModel};
use crate::clustering::{HierarchyTree, NodeId};
use crate::config::{Gate, PipelineConfig};
use crate::datagen::round_half_up;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{self, train_ovr_svm, MlpModel, SvmConfig, TrainConfig};
use crate::seed;

/// Ordered levels through which models are successively finetuned; 0 is the pretrained base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyPath(Vec<usize>);

impl StrategyPath {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.first() != Some(&0) {
            return Err(Error::config("strategy path must start at 0"));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("strategy path must be strictly increasing"));
        }
        Ok(StrategyPath(levels))
    }

    /// Every level of a `depth`-level tree.
    pub fn full(depth: usize) -> Self {
        StrategyPath((0..=depth).collect())
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    /// Whether tree level `level` (1-based) is finetuned.
    pub fn trains(&self, level: usize) -> bool {
        self.0.contains(&level)
    }

    pub fn check_depth(&self, depth: usize) -> Result<()> {
        match self.0.last() {
            Some(&l) if l > depth => Err(Error::config(format!(
                "strategy names level {l} but the tree has {depth} levels"
            ))),
            _ => Ok(()),
        }
    }

    /// Accepts `0 1 2`, `0,1,2` or `0=>1=>2`.
    pub fn parse(text: &str) -> Result<Self> {
        let levels = text
            .split(|c: char| c == ',' || c == '=' || c == '>' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| Error::config(format!("bad strategy level '{t}'"))))
            .collect::<Result<Vec<usize>>>()?;
        Self::new(levels)
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for StrategyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&s.join("=>"))
    }
}

/// How negative-mining thresholds between levels are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum MiningThresholds {
    /// One value per level transition.
    Fixed(Vec<f64>),
    /// Per level, keep at least this recall of each child group's training positives.
    Recall(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierConfig {
    pub train: TrainConfig,
    pub svm: SvmConfig,
    pub init_scale: f64,
    pub normalize: bool,
    pub gate: Gate,
    pub mining: MiningThresholds,
    pub min_node_epochs: usize,
    pub negative_floor: usize,
    /// Splits providing finetuning and SVM samples.
    pub pool_splits: Vec<Split>,
    pub seed: u64,
}

impl HierConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        HierConfig {
            train: cfg.finetune.clone(),
            svm: cfg.svm.clone(),
            init_scale: cfg.init_scale,
            normalize: cfg.normalize,
            gate: cfg.gate,
            mining: if cfg.mining_thresholds.is_empty() {
                MiningThresholds::Recall(cfg.mining_recall)
            } else {
                MiningThresholds::Fixed(cfg.mining_thresholds.clone())
            },
            min_node_epochs: cfg.min_node_epochs,
            negative_floor: cfg.negative_floor,
            pool_splits: cfg.finetune_splits.clone(),
            seed: cfg.seed,
        }
    }
}

/// What a node was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTrainState {
    pub node: NodeId,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Parent gate value of each negative (empty at the root).
    pub negative_scores: Vec<f64>,
    /// Threshold the negatives were mined with (`None` at the root).
    pub threshold: Option<f64>,
    /// The threshold rejected every candidate and the hardest ones were kept instead.
    pub floor_applied: bool,
    pub epochs: usize,
    pub trained: bool,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HierOutcome {
    pub ensemble: CascadeEnsemble,
    /// `states[l][j]` mirrors the tree.
    pub states: Vec<Vec<NodeTrainState>>,
}

/// Base model trained on every class of the pretrain split.
pub fn pretrain_base(dataset: &Dataset, cfg: &PipelineConfig) -> Result<MlpModel> {
    let pool = dataset.split_indices(Split::Pretrain);
    if pool.is_empty() {
        return Err(Error::invalid("pretrain split is empty"));
    }
    let model = MlpModel::with_hidden(
        dataset.dim(),
        &cfg.hidden,
        dataset.classes(),
        cfg.init_scale,
        seed::derive(cfg.seed, &[0, 0]),
    )?;
    let train_cfg = TrainConfig {
        seed: seed::derive(cfg.seed, &[0, 1]),
        ..cfg.pretrain.clone()
    };
    Ok(models::train(&model, dataset, &pool, &train_cfg)?.0)
}

/// Keep candidates whose score exceeds `threshold`; if none do, keep the
/// `floor` highest-scoring ones. Returns `(kept, their scores, floor applied)`.
pub fn mine_negatives(candidates: &[usize], scores: &[f64], threshold: f64, floor: usize) -> (Vec<usize>, Vec<f64>, bool) {
    let kept: Vec<(usize, f64)> = candidates
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s > threshold)
        .map(|(&i, &s)| (i, s))
        .collect();
    if !kept.is_empty() || candidates.is_empty() {
        let (i, s) = kept.into_iter().unzip();
        return (i, s, false);
    }
    log::warn!(
        "threshold {threshold} rejects all {} negatives, keeping the {floor} hardest",
        candidates.len()
    );
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
    order.truncate(floor);
    order.sort_by_key(|&k| candidates[k]);
    (order.iter().map(|&k| candidates[k]).collect(), order.iter().map(|&k| scores[k]).collect(), true)
}

fn gate_values(node: &NodeModel, dataset: &Dataset, indices: &[usize], classes: &[usize], cfg: &HierConfig) -> Result<Vec<f64>> {
    exec::map(indices, |&i| {
        node.evaluate(&dataset.sample(i).features, cfg.normalize, cfg.gate)
            .map(|out| node.group_max(&out, classes))
    })
    .into_iter()
    .collect()
}

/// Epochs for a node holding `node_pos` of `total_pos` positives.
///
/// The node's share of the root's sample visits (`epochs * root_size`) is
/// `node_pos / total_pos`; spread over its own `node_size` samples, with a floor.
/// A node holding the root's whole training set gets exactly `epochs`.
pub fn node_epochs(
    epochs: usize,
    node_pos: usize,
    total_pos: usize,
    node_size: usize,
    root_size: usize,
    min_epochs: usize,
) -> usize {
    if epochs == 0 || node_size == 0 || total_pos == 0 {
        return 0;
    }
    if node_pos == total_pos && node_size == root_size {
        return epochs;
    }
    let visits = epochs as f64 * root_size as f64 * node_pos as f64 / total_pos as f64;
    round_half_up(visits / node_size as f64).max(min_epochs)
}

fn in_group(dataset: &Dataset, indices: &[usize], classes: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .copied()
        .filter(|&i| classes.binary_search(&dataset.sample(i).label).is_ok())
        .collect()
}

/// Train a model and SVM bank for every node of `tree`.
pub fn train_hierarchy(
    tree: &HierarchyTree,
    dataset: &Dataset,
    base: &MlpModel,
    strategy: &StrategyPath,
    cfg: &HierConfig,
) -> Result<HierOutcome> {
    strategy.check_depth(tree.depth())?;
    if let Some(&c) = tree.classes().iter().find(|&&c| base.target_of(c).is_none()) {
        return Err(Error::config(format!("base model does not score class {c}")));
    }
    let pool = dataset.splits_indices(&cfg.pool_splits);
    let background: Vec<usize> = pool.iter().copied().filter(|&i| !dataset.sample(i).is_positive()).collect();
    let total_pos = in_group(dataset, &pool, tree.classes()).len();
    let pool_labels: Vec<usize> = pool.iter().map(|&i| dataset.sample(i).label).collect();

    let mut nodes: Vec<Vec<NodeModel>> = Vec::with_capacity(tree.depth());
    let mut states: Vec<Vec<NodeTrainState>> = Vec::with_capacity(tree.depth());
    let mut thresholds = Vec::with_capacity(tree.depth().saturating_sub(1));
    for l in 0..tree.depth() {
        let groups = tree.level(l);
        let positives: Vec<Vec<usize>> = groups.iter().map(|g| in_group(dataset, &pool, &g.classes)).collect();
        if let Some(j) = positives.iter().position(Vec::is_empty) {
            return Err(Error::config(format!("group {} {} has no training positives", l + 1, j + 1)));
        }
        let threshold = if l == 0 {
            None
        } else {
            let t = match &cfg.mining {
                MiningThresholds::Fixed(v) => *v.get(l - 1).ok_or_else(|| {
                    Error::config(format!("no mining threshold for level {} of {}", l, tree.depth()))
                })?,
                MiningThresholds::Recall(r) => {
                    if !(*r > 0.0 && *r <= 1.0) {
                        return Err(Error::config(format!("mining recall {r} outside (0, 1]")));
                    }
                    let mut level_t = f64::INFINITY;
                    for (g, pos) in groups.iter().zip(&positives) {
                        let parent = &nodes[l - 1][g.parent.expect("non-root")];
                        let mut v = gate_values(parent, dataset, pos, &g.classes, cfg)?;
                        level_t = level_t.min(recall_quantile(&mut v, *r));
                    }
                    level_t.next_down()
                }
            };
            thresholds.push(t);
            Some(t)
        };
        let level_no = l + 1;
        let trained = exec::try_map_range(groups.len(), |j| -> Result<(NodeModel, NodeTrainState)> {
            let group = &groups[j];
            let (negatives, negative_scores, floor_applied) = match (threshold, group.parent) {
                (Some(t), Some(p)) => {
                    let candidates = &states[l - 1][p].negatives;
                    let scores = gate_values(&nodes[l - 1][p], dataset, candidates, &group.classes, cfg)?;
                    mine_negatives(candidates, &scores, t, cfg.negative_floor)
                }
                _ => (background.clone(), Vec::new(), false),
            };
            let ancestor = match group.parent {
                Some(p) => &nodes[l - 1][p].model,
                None => base,
            };
            let node_seed = seed::derive(cfg.seed, &[level_no as u64, j as u64 + 1]);
            let is_trained = strategy.trains(level_no);
            let (model, epochs, loss_trace) = if is_trained {
                let child = ancestor.spawn_child(group.classes.clone(), cfg.init_scale, node_seed)?;
                let mut samples: Vec<usize> = positives[j].iter().chain(&negatives).copied().collect();
                samples.sort_unstable();
                let epochs = node_epochs(
                    cfg.train.epochs,
                    positives[j].len(),
                    total_pos,
                    samples.len(),
                    total_pos + background.len(),
                    cfg.min_node_epochs,
                );
                let tc = TrainConfig {
                    epochs,
                    seed: seed::derive(node_seed, &[1]),
                    ..cfg.train.clone()
                };
                let (m, trace) = models::train(&child, dataset, &samples, &tc)?;
                (m, epochs, trace)
            } else {
                (ancestor.clone(), 0, Vec::new())
            };
            let features = models::extract_features(&model, dataset, &pool, cfg.normalize)?;
            let svm = train_ovr_svm(&features, &pool_labels, &group.classes, &cfg.svm)?;
            let state = NodeTrainState {
                node: (l, j),
                positives: positives[j].clone(),
                negatives,
                negative_scores,
                threshold,
                floor_applied,
                epochs,
                trained: is_trained,
                loss_trace,
            };
            Ok((
                NodeModel {
                    model,
                    svm,
                    trained: is_trained,
                },
                state,
            ))
        })?;
        let (level_nodes, level_states) = trained.into_iter().unzip();
        nodes.push(level_nodes);
        states.push(level_states);
    }
    let ensemble = CascadeEnsemble {
        tree: tree.clone(),
        nodes,
        thresholds,
        strategy: strategy.clone(),
        seed: cfg.seed,
        normalize: cfg.normalize,
        gate: cfg.gate,
    };
    ensemble.validate()?;
    check_states(tree, dataset, &states)?;
    Ok(HierOutcome { ensemble, states })
}

/// Positive labels inside the group, negatives drawn from the parent's
/// negatives, and every mined negative above the threshold (unless the floor rule applied).
pub fn check_states(tree: &HierarchyTree, dataset: &Dataset, states: &[Vec<NodeTrainState>]) -> Result<()> {
    for (l, level) in states.iter().enumerate() {
        for (j, st) in level.iter().enumerate() {
            let group = &tree.level(l)[j];
            let fail = |what: &str| Err(Error::invalid(format!("node {} {}: {what}", l + 1, j + 1)));
            if st.positives.iter().any(|&i| group.classes.binary_search(&dataset.sample(i).label).is_err()) {
                return fail("positive outside its group");
            }
            if st.negatives.iter().any(|&i| dataset.sample(i).is_positive()) {
                return fail("negative carries a positive label");
            }
            if let Some(p) = group.parent {
                let parent = &states[l - 1][p].negatives;
                if st.negatives.iter().any(|i| parent.binary_search(i).is_err()) {
                    return fail("negative not among the parent's negatives");
                }
                let t = st.threshold.expect("non-root threshold");
                if !st.floor_applied && st.negative_scores.iter().any(|&s| s <= t) {
                    return fail("mined negative at or below the threshold");
                }
            }
        }
    }
    Ok(())
}
