//! Ranking average precision, mAP, run reports and experiment sweeps.

mod experiment;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::cascade::CostStats;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};

pub use experiment::{
    build_tree, evaluate_ensemble, flat_run, group_recall, prepare, run_experiment, run_hierarchy, tail_classes,
    ClusterMethod, ExperimentSpec, Family, FlatVariant, Prepared, RunOutcome,
};

/// Average precision of one binary ranking.
///
/// Samples are sorted by score (descending, ties by id ascending); AP is the
/// mean over positives of the precision at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool], ids: &[&str]) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() != ids.len() {
        return Err(Error::invalid("scores, labels and ids differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("no positives to rank"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Per-class AP of a score matrix (`scores[sample][k]` for `classes[k]`) and their mean.
pub fn mean_ap(classes: &[usize], labels: &[usize], scores: &[Vec<f64>], ids: &[&str]) -> Result<(f64, Vec<ClassAp>)> {
    if classes.is_empty() {
        return Err(Error::invalid("no classes to evaluate"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes.len()) {
        return Err(Error::Dimension {
            expected: classes.len(),
            got: row.len(),
        });
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for (k, &c) in classes.iter().enumerate() {
        let column: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !truth.contains(&true) {
            return Err(Error::invalid(format!("class {c} has no positives in the evaluation split")));
        }
        per_class.push(ClassAp {
            class: c,
            ap: average_precision(&column, &truth, ids)?,
        });
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok((map, per_class))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        MetricSummary {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            values,
        }
    }
}

/// One grid point of a sweep, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub condition: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Seeds whose run failed, with the reason.
    pub errors: Vec<String>,
}

impl SweepRow {
    /// Per-seed values of `metric` (empty when the metric is missing).
    pub fn values(&self, metric: &str) -> &[f64] {
        self.metrics.get(metric).map_or(&[], |m| m.values.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub family: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, condition: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    /// Flat CSV: `condition`, then `<metric>_mean,_min,_max` for every metric, then `errors`.
    pub fn to_csv(&self) -> String {
        let mut metrics: Vec<&String> = self.rows.iter().flat_map(|r| r.metrics.keys()).collect();
        metrics.sort();
        metrics.dedup();
        let mut s = String::from("condition");
        for m in &metrics {
            let _ = write!(s, ",{m}_mean,{m}_min,{m}_max");
        }
        s.push_str(",errors\n");
        for row in &self.rows {
            s.push_str(&csv_field(&row.condition));
            for m in &metrics {
                match row.metrics.get(*m) {
                    Some(v) => {
                        let _ = write!(s, ",{},{},{}", v.mean, v.min, v.max);
                    }
                    None => s.push_str(",,,"),
                }
            }
            let _ = writeln!(s, ",{}", row.errors.len());
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Machine-readable record of one command or experiment run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_map: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_class_ap: Vec<ClassAp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostStats>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tables: Vec<SweepTable>,
}

impl EvalReport {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        EvalReport {
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.entries().into_iter().collect(),
            inputs: BTreeMap::new(),
            map: None,
            tail_map: None,
            per_class_ap: Vec::new(),
            cost: None,
            thresholds: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    fn ap(scores: &[f64], labels: &[bool]) -> f64 {
        let owned = ids(scores.len());
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        average_precision(scores, labels, &refs).unwrap()
    }

    #[test]
    fn ap_examples() {
        let v = ap(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(ap(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
        assert!(average_precision(&[0.1], &[false], &["a"]).is_err());
    }

    #[test]
    fn ties_break_by_id_and_sentinel_ranks_last() {
        // Equal scores: "s00" (negative) ranks before "s01" (positive).
        assert_eq!(ap(&[0.5, 0.5], &[false, true]), 0.5);
        let v = ap(&[crate::SENTINEL, -1e300], &[true, false]);
        assert_eq!(v, 0.5);
    }

    #[test]
    fn map_is_mean_of_class_aps() {
        let owned = ids(4);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.1, 0.7], vec![0.2, 0.9]];
        let (m, per) = mean_ap(&[1, 2], &[1, 0, 2, 1], &scores, &refs).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(m, (per[0].ap + per[1].ap) / 2.0);
        assert!(mean_ap(&[1, 3], &[1, 0, 2, 1], &scores, &refs).is_err());
    }

    #[test]
    fn csv_has_one_row_per_condition() {
        let row = |c: &str, v: f64| SweepRow {
            condition: c.into(),
            seeds: vec![1, 2],
            metrics: BTreeMap::from([("map".to_string(), MetricSummary::from_values(vec![v, v + 0.5]))]),
            errors: vec![],
        };
        let t = SweepTable {
            family: "x".into(),
            rows: vec![row("L=1", 0.25), row("a,b", 0.0)],
        };
        let csv = t.to_csv();
        assert_eq!(csv.lines().next(), Some("condition,map_mean,map_min,map_max,errors"));
        assert_eq!(csv.lines().nth(1), Some("L=1,0.5,0.25,0.75,0"));
        assert!(csv.contains("\"a,b\""));
    }
}
