//! Command-line front end.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cascade::{parse_scores, scores_to_text, CascadeEnsemble};
use crate::clustering::{parse_scalar_file, HierarchyTree};
use crate::config::PipelineConfig;
use crate::datagen::generate_synthetic;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    build_tree, mean_ap, run_experiment, tail_classes, ClusterMethod, EvalReport, ExperimentSpec, Family, Prepared,
};
use crate::exec;
use crate::hier_train::{pretrain_base, train_hierarchy, HierConfig, StrategyPath};
use crate::models::MlpModel;

#[derive(Debug, Parser)]
#[command(name = "ltcascade", version, about = "Long-tail feature learning and cascaded hierarchical classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for generation and training (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset and its planted-group sidecar.
    Datagen,
    /// Train the base model on the pretrain split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Build a class hierarchy.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        /// Model whose features or predictions drive similarity.
        #[arg(long)]
        model: Option<PathBuf>,
        /// visual | confusion | accuracy | count | scalar-file | random | taxonomy-file
        #[arg(long, default_value = "visual")]
        method: String,
        /// Per-class descriptor file for `scalar-file`, tree file for `taxonomy-file`.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Group counts per level, e.g. `1,4,10`.
        #[arg(long, value_delimiter = ',')]
        groups: Option<Vec<usize>>,
    },
    /// Train one model and SVM bank per tree node.
    TrainHier {
        #[arg(long)]
        data: PathBuf,
        /// Base model; pretrained from the data when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Tree file; built with the configured cluster method when absent.
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Strategy path, e.g. `0,1,2`.
        #[arg(long)]
        strategy: Option<String>,
        /// Fixed negative-mining thresholds per level transition.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        thresholds: Option<Vec<f64>>,
    },
    /// Calibrate gate thresholds on a split for a recall target.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        recall: Option<f64>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Score a split through the cascade.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Per-class AP and mAP of a score file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Run a sweep family over seeds.
    Experiment {
        #[arg(long)]
        family: Family,
        /// Grid points separated by `;` (family default when absent).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Fixed dataset; generated per seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(out.join(format!("{}_report.json", report.command.replace('-', "_"))), report.to_json()?)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    if g.deterministic {
        exec::set_sequential(true);
    }
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg = cfg.with_seed(s);
    }
    let out = g.out.as_path();
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::Datagen => {
            let (ds, truth) = generate_synthetic(&cfg.gen)?;
            ds.save(out.join("data.ltf"))?;
            std::fs::write(out.join("truth.txt"), truth.to_text())?;
            let mut report = EvalReport::new("datagen", &cfg);
            report.inputs.insert("samples".into(), ds.len().to_string());
            write_report(out, &report)
        }
        Command::Pretrain { data } => {
            let ds = Dataset::load(&data)?;
            let base = pretrain_base(&ds, &cfg)?;
            base.save(out.join("base.mlp"))?;
            let mut report = EvalReport::new("pretrain", &cfg);
            report.inputs.insert("data".into(), path_str(&data));
            write_report(out, &report)
        }
        Command::Cluster {
            data,
            model,
            method,
            file,
            groups,
        } => {
            let ds = Dataset::load(&data)?;
            let counts = groups.unwrap_or_else(|| cfg.group_counts.clone());
            let need_file = || file.as_ref().ok_or_else(|| Error::config(format!("method '{method}' needs --file")));
            let method_value = match method.as_str() {
                "scalar-file" => ClusterMethod::Scalar(parse_scalar_file(&std::fs::read_to_string(need_file()?)?)?),
                "taxonomy-file" => ClusterMethod::Taxonomy(HierarchyTree::parse(
                    &std::fs::read_to_string(need_file()?)?,
                    Some(&ds.classes()),
                )?),
                other => other.parse()?,
            };
            let base = match &model {
                Some(p) => MlpModel::load(p)?,
                None => pretrain_base(&ds, &cfg)?,
            };
            let prep = Prepared {
                dataset: ds,
                truth: None,
                base,
            };
            let tree = build_tree(&prep, &method_value, &counts, &cfg)?;
            std::fs::write(out.join("tree.txt"), tree.to_text())?;
            let mut report = EvalReport::new("cluster", &cfg);
            report.inputs.insert("data".into(), path_str(&data));
            report.inputs.insert("method".into(), method);
            if let Some(m) = model {
                report.inputs.insert("model".into(), path_str(&m));
            }
            if let Some(f) = file {
                report.inputs.insert("file".into(), path_str(&f));
            }
            write_report(out, &report)
        }
        Command::TrainHier {
            data,
            base,
            tree,
            strategy,
            thresholds,
        } => {
            let ds = Dataset::load(&data)?;
            let mut report = EvalReport::new("train-hier", &cfg);
            report.inputs.insert("data".into(), path_str(&data));
            let base_model = match &base {
                Some(p) => {
                    report.inputs.insert("base".into(), path_str(p));
                    MlpModel::load(p)?
                }
                None => pretrain_base(&ds, &cfg)?,
            };
            let tree = match &tree {
                Some(p) => {
                    report.inputs.insert("tree".into(), path_str(p));
                    HierarchyTree::parse(&std::fs::read_to_string(p)?, Some(&ds.classes()))?
                }
                None => {
                    let prep = Prepared {
                        dataset: ds.clone(),
                        truth: None,
                        base: base_model.clone(),
                    };
                    build_tree(&prep, &cfg.cluster_method.parse()?, &cfg.group_counts, &cfg)?
                }
            };
            let strategy = match strategy {
                Some(s) => StrategyPath::parse(&s)?,
                None if cfg.strategy.is_empty() => StrategyPath::full(tree.depth()),
                None => StrategyPath::new(cfg.strategy.clone())?,
            };
            if let Some(t) = thresholds {
                cfg.mining_thresholds = t;
                report = EvalReport {
                    config: cfg.entries().into_iter().collect(),
                    ..report
                };
            }
            let mut base_model = base_model;
            base_model.freeze_lowest(cfg.freeze);
            let outcome = train_hierarchy(&tree, &ds, &base_model, &strategy, &HierConfig::from_pipeline(&cfg))?;
            outcome.ensemble.save(out.join("ensemble"))?;
            report.inputs.insert("strategy".into(), strategy.to_string());
            report.thresholds = outcome.ensemble.thresholds.clone();
            write_report(out, &report)
        }
        Command::Calibrate {
            data,
            ensemble,
            recall,
            split,
        } => {
            let ds = Dataset::load(&data)?;
            let mut ens = CascadeEnsemble::load(&ensemble)?;
            let recall = recall.unwrap_or(cfg.recall_target);
            cfg.recall_target = recall;
            let split = split.unwrap_or(cfg.calibration_split);
            cfg.calibration_split = split;
            ens.thresholds = ens.calibrate(&ds, &ds.split_indices(split), recall)?;
            ens.save(out.join("ensemble"))?;
            let mut report = EvalReport::new("calibrate", &cfg);
            report.inputs.insert("data".into(), path_str(&data));
            report.inputs.insert("ensemble".into(), path_str(&ensemble));
            report.thresholds = ens.thresholds.clone();
            write_report(out, &report)
        }
        Command::Infer { data, ensemble, split } => {
            let ds = Dataset::load(&data)?;
            let ens = CascadeEnsemble::load(&ensemble)?;
            let split = split.unwrap_or(cfg.eval_split);
            cfg.eval_split = split;
            let indices = ds.split_indices(split);
            let (rows, cost) = ens.score_batch(&ds, &indices)?;
            std::fs::write(out.join("scores.txt"), scores_to_text(&ds, &indices, ens.classes(), &rows))?;
            let mut report = EvalReport::new("infer", &cfg);
            report.inputs.insert("data".into(), path_str(&data));
            report.inputs.insert("ensemble".into(), path_str(&ensemble));
            report.cost = Some(cost);
            report.thresholds = ens.thresholds.clone();
            write_report(out, &report)
        }
        Command::Eval { data, scores, split } => {
            let ds = Dataset::load(&data)?;
            let split = split.unwrap_or(cfg.eval_split);
            cfg.eval_split = split;
            let parsed = parse_scores(&std::fs::read_to_string(&scores)?, ds.num_classes())?;
            let by_id: std::collections::HashMap<&str, usize> =
                ds.samples().iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
            let mut labels = Vec::with_capacity(parsed.len());
            for (id, _) in &parsed {
                let i = *by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::invalid(format!("scored sample '{id}' is not in the dataset")))?;
                if ds.sample(i).split != split {
                    return Err(Error::invalid(format!("scored sample '{id}' is not in split {split}")));
                }
                labels.push(ds.sample(i).label);
            }
            let classes = ds.classes();
            let rows: Vec<Vec<f64>> = parsed.iter().map(|(_, r)| r.clone()).collect();
            let ids: Vec<&str> = parsed.iter().map(|(id, _)| id.as_str()).collect();
            let (map, per_class) = mean_ap(&classes, &labels, &rows, &ids)?;
            let tail = tail_classes(&ds, &classes);
            let tail_aps: Vec<f64> = per_class.iter().filter(|c| tail.contains(&c.class)).map(|c| c.ap).collect();
            let mut report = EvalReport::new("eval", &cfg);
            report.inputs.insert("data".into(), path_str(&data));
            report.inputs.insert("scores".into(), path_str(&scores));
            report.map = Some(map);
            if !tail_aps.is_empty() {
                report.tail_map = Some(tail_aps.iter().sum::<f64>() / tail_aps.len() as f64);
            }
            report.per_class_ap = per_class;
            write_report(out, &report)
        }
        Command::Experiment {
            family,
            grid,
            seeds,
            data,
        } => {
            let dataset = data.as_ref().map(Dataset::load).transpose()?;
            let grid = grid
                .map(|g| g.split(';').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect())
                .unwrap_or_default();
            let spec = ExperimentSpec {
                family,
                grid,
                seeds,
                config: cfg,
                dataset,
            };
            let mut report = run_experiment(&spec)?;
            if let Some(d) = data {
                report.inputs.insert("data".into(), path_str(&d));
            }
            std::fs::write(out.join(format!("{family}.csv")), report.tables[0].to_csv())?;
            write_report(out, &report)
        }
    }
}
