//! Threshold-gated hierarchical inference, threshold calibration and cost accounting.
//!
//! A sample enters at the root. Each evaluated node scores the classes of its
//! group; a child node is evaluated only when the best of those scores over
//! the child's classes reaches the level threshold. Leaf scores of classes
//! whose leaf was never reached are the sentinel.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::clustering::HierarchyTree;
use crate::config::Gate;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::hier_train::StrategyPath;
use crate::models::{l2_normalize, softmax_xent, MlpModel, SvmBank};
use crate::SENTINEL;

/// Model and SVM bank of one tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    pub model: MlpModel,
    pub svm: SvmBank,
    /// False for pass-through nodes that reuse an ancestor's model unchanged.
    pub trained: bool,
}

/// Scores produced by one node evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutput {
    /// SVM scores in the bank's class order.
    pub svm: Vec<f64>,
    /// Softmax probabilities over the model's output slots (softmax gating only).
    pub probs: Option<Vec<f64>>,
}

impl NodeModel {
    pub fn evaluate(&self, features: &[f64], normalize: bool, gate: Gate) -> Result<NodeOutput> {
        let fwd = self.model.forward(features)?;
        let mut hidden = fwd.hidden;
        if normalize {
            l2_normalize(&mut hidden);
        }
        let svm = self.svm.scores(&hidden)?;
        let probs = match gate {
            Gate::Svm => None,
            Gate::Softmax => Some(softmax_xent(&fwd.logits, 0)?.1),
        };
        Ok(NodeOutput { svm, probs })
    }

    /// Gate value for a child group: the best score over `classes`.
    pub fn group_max(&self, out: &NodeOutput, classes: &[usize]) -> f64 {
        classes
            .iter()
            .map(|&c| match &out.probs {
                Some(p) => self.model.target_of(c).map_or(SENTINEL, |t| p[t]),
                None => self.svm.position(c).map_or(SENTINEL, |k| out.svm[k]),
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeEnsemble {
    pub tree: HierarchyTree,
    /// `nodes[l][j]` mirrors `tree.level(l)[j]`.
    pub nodes: Vec<Vec<NodeModel>>,
    /// Gate thresholds between consecutive levels (`depth − 1` values).
    pub thresholds: Vec<f64>,
    pub strategy: StrategyPath,
    pub seed: u64,
    pub normalize: bool,
    pub gate: Gate,
}

/// Per-level evaluation counts of a batch run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostStats {
    pub samples: usize,
    /// Models per level.
    pub models_per_level: Vec<usize>,
    /// Node evaluations per level.
    pub evaluations: Vec<usize>,
    /// Average samples evaluated per model at each level.
    pub avg_samples_per_model: Vec<f64>,
    pub total_evaluations: usize,
}

impl CostStats {
    fn from_counts(samples: usize, models_per_level: Vec<usize>, evaluations: Vec<usize>) -> Self {
        let avg = evaluations
            .iter()
            .zip(&models_per_level)
            .map(|(&e, &j)| e as f64 / j as f64)
            .collect();
        CostStats {
            samples,
            total_evaluations: evaluations.iter().sum(),
            models_per_level,
            evaluations,
            avg_samples_per_model: avg,
        }
    }
}

impl CascadeEnsemble {
    pub fn validate(&self) -> Result<()> {
        let counts = self.tree.group_counts();
        if self.nodes.len() != counts.len() || self.nodes.iter().zip(&counts).any(|(n, &j)| n.len() != j) {
            return Err(Error::invalid("ensemble needs exactly one model per tree node"));
        }
        if self.thresholds.len() + 1 != counts.len() {
            return Err(Error::invalid(format!(
                "a {}-level ensemble needs {} thresholds, got {}",
                counts.len(),
                counts.len() - 1,
                self.thresholds.len()
            )));
        }
        if self.thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::invalid("threshold is NaN"));
        }
        let dim = self.nodes[0][0].model.input_dim();
        for (l, level) in self.nodes.iter().enumerate() {
            for (j, node) in level.iter().enumerate() {
                if node.model.input_dim() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: node.model.input_dim(),
                    });
                }
                if node.svm.class_set() != self.tree.level(l)[j].classes.as_slice() {
                    return Err(Error::invalid(format!("SVM classes of node {} {} differ from its group", l + 1, j + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn input_dim(&self) -> usize {
        self.nodes[0][0].model.input_dim()
    }

    /// Output class order of [`CascadeEnsemble::score`].
    pub fn classes(&self) -> &[usize] {
        self.tree.classes()
    }

    fn eval_node(&self, l: usize, j: usize, features: &[f64]) -> Result<NodeOutput> {
        self.nodes[l][j].evaluate(features, self.normalize, self.gate)
    }

    /// Walk the tree for one sample: which nodes were evaluated (`flags[l][j]`)
    /// and the outputs of evaluated leaf nodes.
    fn walk(&self, features: &[f64]) -> Result<(Vec<Vec<bool>>, Vec<Option<NodeOutput>>)> {
        if features.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        let depth = self.depth();
        let mut flags: Vec<Vec<bool>> = self.tree.levels().iter().map(|lv| vec![false; lv.len()]).collect();
        flags[0][0] = true;
        let mut leaves = vec![None; self.tree.level(depth - 1).len()];
        for l in 0..depth {
            for (j, group) in self.tree.level(l).iter().enumerate() {
                if !flags[l][j] {
                    continue;
                }
                let out = self.eval_node(l, j, features)?;
                for &child in &group.children {
                    let classes = &self.tree.level(l + 1)[child].classes;
                    if self.nodes[l][j].group_max(&out, classes) >= self.thresholds[l] {
                        flags[l + 1][child] = true;
                    }
                }
                if l + 1 == depth {
                    leaves[j] = Some(out);
                }
            }
        }
        Ok((flags, leaves))
    }

    /// Which nodes a sample reaches: `reached[l][j]` is true when every gate on
    /// the path from the root to node `(l, j)` passed.
    pub fn reached(&self, features: &[f64]) -> Result<Vec<Vec<bool>>> {
        Ok(self.walk(features)?.0)
    }

    /// Score one sample; returns scores in [`CascadeEnsemble::classes`] order and
    /// the number of node evaluations per level.
    pub fn score(&self, features: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        let (flags, leaves) = self.walk(features)?;
        let evals = flags.iter().map(|lv| lv.iter().filter(|&&f| f).count()).collect();
        let classes = self.classes();
        let mut scores = vec![SENTINEL; classes.len()];
        let last = self.depth() - 1;
        for (j, out) in leaves.iter().enumerate() {
            let Some(out) = out else { continue };
            for (k, &c) in self.nodes[last][j].svm.class_set().iter().enumerate() {
                let pos = classes.binary_search(&c).expect("leaf classes partition the root");
                scores[pos] = out.svm[k];
            }
        }
        Ok((scores, evals))
    }

    /// Score every sample in `indices` (in parallel); rows follow `indices`.
    pub fn score_batch(&self, dataset: &Dataset, indices: &[usize]) -> Result<(Vec<Vec<f64>>, CostStats)> {
        if indices.is_empty() {
            return Err(Error::invalid("nothing to score: empty split"));
        }
        let results = exec::map(indices, |&i| self.score(&dataset.sample(i).features));
        let mut evaluations = vec![0usize; self.depth()];
        let mut rows = Vec::with_capacity(indices.len());
        for r in results {
            let (row, evals) = r?;
            for (a, e) in evaluations.iter_mut().zip(evals) {
                *a += e;
            }
            rows.push(row);
        }
        Ok((rows, CostStats::from_counts(indices.len(), self.tree.group_counts(), evaluations)))
    }

    /// Per-level thresholds keeping at least `recall_target` of each child
    /// group's positives in `indices` through its gate, with ancestors open.
    ///
    /// For every group the threshold is the `ceil(recall · n)`-th largest gate
    /// value of its positives; a level takes the minimum over its groups and
    /// steps one ulp down so the gate stays strictly below it.
    pub fn calibrate(&self, dataset: &Dataset, indices: &[usize], recall_target: f64) -> Result<Vec<f64>> {
        if !(recall_target > 0.0 && recall_target <= 1.0) {
            return Err(Error::config(format!("recall target {recall_target} outside (0, 1]")));
        }
        let mut thresholds = Vec::with_capacity(self.depth().saturating_sub(1));
        for l in 0..self.depth().saturating_sub(1) {
            let mut level_t = f64::INFINITY;
            for (child, group) in self.tree.level(l + 1).iter().enumerate() {
                let parent = group.parent.expect("non-root group");
                let positives: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|&i| group.classes.binary_search(&dataset.sample(i).label).is_ok())
                    .collect();
                if positives.is_empty() {
                    return Err(Error::invalid(format!(
                        "group {} {} has no positives for calibration",
                        l + 2,
                        child + 1
                    )));
                }
                let node = &self.nodes[l][parent];
                let mut values = exec::map(&positives, |&i| {
                    self.eval_node(l, parent, &dataset.sample(i).features)
                        .map(|out| node.group_max(&out, &group.classes))
                })
                .into_iter()
                .collect::<Result<Vec<f64>>>()?;
                level_t = level_t.min(recall_quantile(&mut values, recall_target));
            }
            thresholds.push(level_t.next_down());
        }
        Ok(thresholds)
    }

    pub fn manifest(&self) -> String {
        let fmt_list = |v: &[f64]| v.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>().join(" ");
        let mut s = String::from("ENS1\n");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "normalize {}", self.normalize);
        let _ = writeln!(s, "gate {}", self.gate);
        let _ = writeln!(s, "strategy {}", self.strategy.to_text());
        let _ = writeln!(s, "thresholds {}", fmt_list(&self.thresholds));
        for (l, level) in self.nodes.iter().enumerate() {
            for (j, node) in level.iter().enumerate() {
                let kind = if node.trained { "trained" } else { "copied" };
                let _ = writeln!(s, "node {} {} {kind}", l + 1, j + 1);
            }
        }
        s.push_str("tree\n");
        s.push_str(&self.tree.to_text());
        s
    }

    /// Write `manifest.txt` plus `node_<l>_<j>.mlp` / `.svm` files into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (l, level) in self.nodes.iter().enumerate() {
            for (j, node) in level.iter().enumerate() {
                node.model.save(dir.join(format!("node_{}_{}.mlp", l + 1, j + 1)))?;
                node.svm.save(dir.join(format!("node_{}_{}.svm", l + 1, j + 1)))?;
            }
        }
        std::fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "ENS1")) => {}
            _ => return Err(Error::parse(1, "expected header 'ENS1'")),
        }
        let (mut seed, mut normalize, mut gate, mut strategy, mut thresholds) = (None, None, None, None, None);
        let mut kinds = Vec::new();
        let mut tree_text = None;
        for (i, line) in lines.by_ref() {
            let ln = i + 1;
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let bad = |what: &str| Error::parse(ln, format!("malformed {what}"));
            match key {
                "seed" => seed = Some(rest.parse::<u64>().map_err(|_| bad("seed"))?),
                "normalize" => normalize = Some(rest.parse::<bool>().map_err(|_| bad("normalize flag"))?),
                "gate" => gate = Some(rest.parse::<Gate>().map_err(|_| bad("gate"))?),
                "strategy" => strategy = Some(StrategyPath::parse(rest).map_err(|_| bad("strategy"))?),
                "thresholds" => {
                    thresholds = Some(
                        rest.split_whitespace()
                            .map(|t| t.parse::<f64>().map_err(|_| bad("threshold")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "node" => kinds.push(rest.ends_with("trained")),
                "tree" => {
                    let body: Vec<&str> = text.lines().skip(ln).collect();
                    tree_text = Some(body.join("\n"));
                    break;
                }
                _ => return Err(Error::parse(ln, format!("unknown manifest key '{key}'"))),
            }
        }
        let missing = |k: &str| Error::invalid(format!("manifest lacks '{k}'"));
        let tree = HierarchyTree::parse(&tree_text.ok_or_else(|| missing("tree"))?, None)?;
        let mut kinds = kinds.into_iter();
        let mut nodes = Vec::with_capacity(tree.depth());
        for (l, level) in tree.levels().iter().enumerate() {
            let mut row = Vec::with_capacity(level.len());
            for j in 0..level.len() {
                row.push(NodeModel {
                    model: MlpModel::load(dir.join(format!("node_{}_{}.mlp", l + 1, j + 1)))?,
                    svm: SvmBank::load(dir.join(format!("node_{}_{}.svm", l + 1, j + 1)))?,
                    trained: kinds.next().unwrap_or(true),
                });
            }
            nodes.push(row);
        }
        let ens = CascadeEnsemble {
            tree,
            nodes,
            thresholds: thresholds.ok_or_else(|| missing("thresholds"))?,
            strategy: strategy.ok_or_else(|| missing("strategy"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            normalize: normalize.ok_or_else(|| missing("normalize"))?,
            gate: gate.ok_or_else(|| missing("gate"))?,
        };
        ens.validate()?;
        Ok(ens)
    }
}

/// The `ceil(recall · n)`-th largest value (sorts `values` in place).
pub fn recall_quantile(values: &mut [f64], recall: f64) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    let k = ((recall * values.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    values[k.min(values.len()) - 1]
}

/// Score file text: `<id> <y_1> .. <y_C>` per sample; classes the ensemble does
/// not score and sentinel scores are written as `-inf`.
pub fn scores_to_text(
    dataset: &Dataset,
    indices: &[usize],
    classes: &[usize],
    rows: &[Vec<f64>],
) -> String {
    let mut s = String::new();
    for (&i, row) in indices.iter().zip(rows) {
        s.push_str(&dataset.sample(i).id);
        for c in 1..=dataset.num_classes() {
            match classes.binary_search(&c) {
                Ok(k) if row[k] != SENTINEL => {
                    let _ = write!(s, " {:?}", row[k]);
                }
                _ => s.push_str(" -inf"),
            }
        }
        s.push('\n');
    }
    s
}

/// Parse a score file into `(id, scores over classes 1..=C)`; `-inf` reads as the sentinel.
pub fn parse_scores(text: &str, num_classes: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id = tok.next().expect("non-empty line").to_string();
        let vals = tok
            .map(|t| match t {
                "-inf" => Ok(SENTINEL),
                _ => t
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(i + 1, format!("malformed score '{t}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != num_classes {
            return Err(Error::parse(
                i + 1,
                format!("dimension mismatch: expected {num_classes} scores, got {}", vals.len()),
            ));
        }
        out.push((id, vals));
    }
    Ok(out)
}
