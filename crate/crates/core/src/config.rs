//! Flat `key = value` pipeline configuration.
//!
//! Every key has a default, so an empty file is a valid configuration. Lists are
//! comma separated. Unknown keys are rejected to catch typos early.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::GenConfig;
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::models::{BatchSource, SvmConfig, TrainConfig};

/// Which score drives the cascade gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Svm,
    Softmax,
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gate::Svm => "svm",
            Gate::Softmax => "softmax",
        })
    }
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm" => Ok(Gate::Svm),
            "softmax" => Ok(Gate::Softmax),
            _ => Err(Error::config(format!("unknown gate '{s}' (svm|softmax)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub hidden: Vec<usize>,
    pub init_scale: f64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub svm: SvmConfig,
    /// L2-normalize extracted features before similarity and SVMs.
    pub normalize: bool,
    pub group_counts: Vec<usize>,
    /// Group counts of the deepest tree used by the level sweep (prefixes give shallower trees).
    pub level_counts: Vec<usize>,
    /// Strategy path; empty means every level of the tree.
    pub strategy: Vec<usize>,
    pub cluster_method: String,
    /// Recall kept on training positives when choosing negative-mining thresholds.
    pub mining_recall: f64,
    /// Fixed mining thresholds per level; overrides `mining_recall` when set.
    pub mining_thresholds: Vec<f64>,
    pub recall_target: f64,
    pub gate: Gate,
    pub min_node_epochs: usize,
    pub negative_floor: usize,
    pub finetune_splits: Vec<Split>,
    pub calibration_split: Split,
    pub eval_split: Split,
    /// Number of lowest layers frozen during finetuning.
    pub freeze: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            gen: GenConfig::default(),
            hidden: vec![64, 32],
            init_scale: 1.0,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            svm: SvmConfig::default(),
            normalize: true,
            group_counts: vec![1, 4],
            level_counts: vec![1, 4, 10, 20],
            strategy: Vec::new(),
            cluster_method: "visual".into(),
            mining_recall: 0.99,
            mining_thresholds: Vec::new(),
            recall_target: 0.99,
            gate: Gate::Svm,
            min_node_epochs: 5,
            negative_floor: 100,
            finetune_splits: vec![Split::Train],
            calibration_split: Split::Val,
            eval_split: Split::Test,
            freeze: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn set_train(cfg: &mut TrainConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "lr" => cfg.learning_rate = parse_value(key, value)?,
        "momentum" => cfg.momentum = parse_value(key, value)?,
        "weight_decay" => cfg.weight_decay = parse_value(key, value)?,
        "epochs" => cfg.epochs = parse_value(key, value)?,
        "batch_size" => cfg.batch_size = parse_value(key, value)?,
        "batching" => {
            cfg.batch_source = match value {
                "shuffled" => BatchSource::Shuffled,
                "uniform" => BatchSource::ClassUniform {
                    pos_fraction: match cfg.batch_source {
                        BatchSource::ClassUniform { pos_fraction } => pos_fraction,
                        BatchSource::Shuffled => 0.25,
                    },
                },
                _ => return Err(Error::config(format!("bad value '{value}' for key '{key}' (shuffled|uniform)"))),
            }
        }
        "pos_fraction" => {
            let p: f64 = parse_value(key, value)?;
            if let BatchSource::ClassUniform { pos_fraction } = &mut cfg.batch_source {
                *pos_fraction = p;
            } else if p != 0.25 {
                return Err(Error::config(format!("'{key}' needs batching = uniform set first")));
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(prefix: &str, cfg: &TrainConfig, out: &mut Vec<(String, String)>) {
    let (batching, pos) = match cfg.batch_source {
        BatchSource::Shuffled => ("shuffled", 0.25),
        BatchSource::ClassUniform { pos_fraction } => ("uniform", pos_fraction),
    };
    for (k, v) in [
        ("lr", cfg.learning_rate.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("batching", batching.to_string()),
        ("pos_fraction", pos.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

impl PipelineConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if let Some(field) = key.strip_prefix("pretrain.") {
            if set_train(&mut self.pretrain, field, key, value)? {
                return Ok(());
            }
        }
        if let Some(field) = key.strip_prefix("finetune.") {
            if set_train(&mut self.finetune, field, key, value)? {
                return Ok(());
            }
        }
        match key {
            "seed" => {
                self.seed = parse_value(key, value)?;
                self.gen.seed = self.seed;
            }
            "gen.classes" => self.gen.classes = parse_value(key, value)?,
            "gen.dim" => self.gen.dim = parse_value(key, value)?,
            "gen.zipf_s" => self.gen.zipf_s = parse_value(key, value)?,
            "gen.n_total" => self.gen.n_total = parse_value(key, value)?,
            "gen.groups" => self.gen.groups = parse_value(key, value)?,
            "gen.within_sigma" => self.gen.within_sigma = parse_value(key, value)?,
            "gen.between_sigma" => self.gen.between_sigma = parse_value(key, value)?,
            "gen.noise_scale" => self.gen.noise_scale = parse_value(key, value)?,
            "gen.background_sigma" => self.gen.background_sigma = parse_value(key, value)?,
            "gen.background_ratio" => self.gen.background_ratio = parse_value(key, value)?,
            "gen.split_fractions" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.gen.split_fractions = v
                    .try_into()
                    .map_err(|_| Error::config("gen.split_fractions needs four values"))?;
            }
            "model.hidden" => self.hidden = parse_list(key, value)?,
            "model.init_scale" => self.init_scale = parse_value(key, value)?,
            "model.normalize" => self.normalize = parse_value(key, value)?,
            "svm.lambda" => self.svm.lambda = parse_value(key, value)?,
            "svm.iterations" => self.svm.iterations = parse_value(key, value)?,
            "svm.balanced" => self.svm.balanced = parse_value(key, value)?,
            "hier.group_counts" => self.group_counts = parse_list(key, value)?,
            "hier.level_counts" => self.level_counts = parse_list(key, value)?,
            "hier.strategy" => self.strategy = parse_list(key, value)?,
            "hier.cluster_method" => self.cluster_method = value.to_string(),
            "hier.mining_recall" => self.mining_recall = parse_value(key, value)?,
            "hier.mining_thresholds" => self.mining_thresholds = parse_list(key, value)?,
            "hier.min_node_epochs" => self.min_node_epochs = parse_value(key, value)?,
            "hier.negative_floor" => self.negative_floor = parse_value(key, value)?,
            "hier.freeze" => self.freeze = parse_value(key, value)?,
            "hier.finetune_splits" => self.finetune_splits = parse_list(key, value)?,
            "cascade.recall_target" => self.recall_target = parse_value(key, value)?,
            "cascade.gate" => self.gate = value.parse()?,
            "cascade.calibration_split" => self.calibration_split = parse_value(key, value)?,
            "cascade.eval_split" => self.eval_split = parse_value(key, value)?,
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected 'key = value'"))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::parse(i + 1, msg),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let g = &self.gen;
        let mut out: Vec<(String, String)> = [
            ("seed", self.seed.to_string()),
            ("gen.classes", g.classes.to_string()),
            ("gen.dim", g.dim.to_string()),
            ("gen.zipf_s", g.zipf_s.to_string()),
            ("gen.n_total", g.n_total.to_string()),
            ("gen.groups", g.groups.to_string()),
            ("gen.within_sigma", g.within_sigma.to_string()),
            ("gen.between_sigma", g.between_sigma.to_string()),
            ("gen.noise_scale", g.noise_scale.to_string()),
            ("gen.background_sigma", g.background_sigma.to_string()),
            ("gen.background_ratio", g.background_ratio.to_string()),
            ("gen.split_fractions", join(&g.split_fractions)),
            ("model.hidden", join(&self.hidden)),
            ("model.init_scale", self.init_scale.to_string()),
            ("model.normalize", self.normalize.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        train_entries("pretrain", &self.pretrain, &mut out);
        train_entries("finetune", &self.finetune, &mut out);
        for (k, v) in [
            ("svm.lambda", self.svm.lambda.to_string()),
            ("svm.iterations", self.svm.iterations.to_string()),
            ("svm.balanced", self.svm.balanced.to_string()),
            ("hier.group_counts", join(&self.group_counts)),
            ("hier.level_counts", join(&self.level_counts)),
            ("hier.strategy", join(&self.strategy)),
            ("hier.cluster_method", self.cluster_method.clone()),
            ("hier.mining_recall", self.mining_recall.to_string()),
            ("hier.mining_thresholds", join(&self.mining_thresholds)),
            ("hier.min_node_epochs", self.min_node_epochs.to_string()),
            ("hier.negative_floor", self.negative_floor.to_string()),
            ("hier.freeze", self.freeze.to_string()),
            ("hier.finetune_splits", join(&self.finetune_splits)),
            ("cascade.recall_target", self.recall_target.to_string()),
            ("cascade.gate", self.gate.to_string()),
            ("cascade.calibration_split", self.calibration_split.to_string()),
            ("cascade.eval_split", self.eval_split.to_string()),
        ] {
            out.push((k.to_string(), v));
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Seeded copy: the generator, pretraining and finetuning all follow `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.gen.seed = seed;
        cfg
    }
}
