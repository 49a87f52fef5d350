//! One-vs-rest linear SVMs trained by full-batch subgradient descent.
//!
//! Per class the objective is `λ/2·‖w‖² + Σ_i a_i·max(0, 1 − y_i(w·x_i + b))`
//! with weights `a_i` summing to one (uniform, or split half/half between the
//! positive and negative side when `balanced`). The bias is folded in as an
//! extra constant input. Step `t` uses `η = 1/(λt)` followed by projection onto
//! the ball of radius `1/√λ`; the iterate with the smallest objective (the zero
//! vector included) is kept.

use std::fmt::Write as _;
use std::path::Path;

use super::mlp::{parse_counted, parse_floats};
use crate::error::{Error, Result};
use crate::exec;
use crate::SENTINEL;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub balanced: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            iterations: 1000,
            balanced: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmBank {
    class_set: Vec<usize>,
    dim: usize,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
    /// Classes lacking positives or negatives at training time; always scored at the sentinel.
    degenerate: Vec<bool>,
}

/// Weighted hinge objective and its subgradient step for a single class.
struct BinaryProblem<'a> {
    features: &'a [Vec<f64>],
    signs: Vec<f64>,
    sample_weight: Vec<f64>,
}

impl BinaryProblem<'_> {
    fn margins(&self, w: &[f64], b: f64) -> Vec<f64> {
        self.features
            .iter()
            .zip(&self.signs)
            .map(|(x, y)| y * (dot(w, x) + b))
            .collect()
    }

    fn objective(&self, lambda: f64, w: &[f64], b: f64, margins: &[f64]) -> f64 {
        let reg = 0.5 * lambda * (dot(w, w) + b * b);
        let hinge: f64 = margins
            .iter()
            .zip(&self.sample_weight)
            .map(|(m, a)| a * (1.0 - m).max(0.0))
            .sum();
        reg + hinge
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(w, b, objective_at_zero, best_objective)`.
fn train_binary(problem: &BinaryProblem<'_>, dim: usize, config: &SvmConfig) -> (Vec<f64>, f64, f64, f64) {
    let lambda = config.lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut margins = problem.margins(&w, b);
    let zero_obj = problem.objective(lambda, &w, b, &margins);
    let (mut best_w, mut best_b, mut best_obj) = (w.clone(), b, zero_obj);
    for t in 1..=config.iterations {
        let eta = 1.0 / (lambda * t as f64);
        let mut sub_w = vec![0.0; dim];
        let mut sub_b = 0.0;
        for ((x, (m, y)), a) in problem
            .features
            .iter()
            .zip(margins.iter().zip(&problem.signs))
            .zip(&problem.sample_weight)
        {
            if *m < 1.0 {
                let c = a * y;
                for (s, v) in sub_w.iter_mut().zip(x) {
                    *s += c * v;
                }
                sub_b += c;
            }
        }
        let shrink = 1.0 - eta * lambda;
        for (wi, si) in w.iter_mut().zip(&sub_w) {
            *wi = shrink * *wi + eta * si;
        }
        b = shrink * b + eta * sub_b;
        let norm = (dot(&w, &w) + b * b).sqrt();
        if norm > radius {
            let s = radius / norm;
            w.iter_mut().for_each(|v| *v *= s);
            b *= s;
        }
        margins = problem.margins(&w, b);
        let obj = problem.objective(lambda, &w, b, &margins);
        if obj < best_obj {
            best_obj = obj;
            best_w.clone_from(&w);
            best_b = b;
        }
    }
    (best_w, best_b, zero_obj, best_obj)
}

/// Train one binary SVM per class in `class_set` (label == class vs everything else).
/// Classes run in parallel; each is an independent deterministic computation.
pub fn train_ovr_svm(features: &[Vec<f64>], labels: &[usize], class_set: &[usize], config: &SvmConfig) -> Result<SvmBank> {
    if features.is_empty() {
        return Err(Error::invalid("empty feature set"));
    }
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    if !(config.lambda > 0.0 && config.lambda.is_finite()) {
        return Err(Error::config("svm lambda must be > 0"));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: bad.len(),
        });
    }
    let trained = exec::map(class_set, |&class| {
        let n_pos = labels.iter().filter(|&&l| l == class).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            log::warn!("class {class}: {n_pos} positives / {n_neg} negatives, scored at the sentinel");
            return (vec![0.0; dim], 0.0, true);
        }
        let (signs, sample_weight) = labels
            .iter()
            .map(|&l| {
                let pos = l == class;
                let a = match (config.balanced, pos) {
                    (true, true) => 0.5 / n_pos as f64,
                    (true, false) => 0.5 / n_neg as f64,
                    (false, _) => 1.0 / labels.len() as f64,
                };
                (if pos { 1.0 } else { -1.0 }, a)
            })
            .unzip();
        let problem = BinaryProblem {
            features,
            signs,
            sample_weight,
        };
        let (w, b, _, _) = train_binary(&problem, dim, config);
        (w, b, false)
    });
    let mut bank = SvmBank {
        class_set: class_set.to_vec(),
        dim,
        weights: Vec::with_capacity(class_set.len()),
        biases: Vec::with_capacity(class_set.len()),
        degenerate: Vec::with_capacity(class_set.len()),
    };
    for (w, b, d) in trained {
        bank.weights.push(w);
        bank.biases.push(b);
        bank.degenerate.push(d);
    }
    Ok(bank)
}

/// Objective values `(at zero, at returned iterate)` for a single class; exposed for tests.
pub fn svm_objectives(features: &[Vec<f64>], labels: &[usize], class: usize, config: &SvmConfig) -> (f64, f64) {
    let n_pos = labels.iter().filter(|&&l| l == class).count().max(1);
    let n_neg = (labels.len() - n_pos).max(1);
    let (signs, sample_weight) = labels
        .iter()
        .map(|&l| {
            let pos = l == class;
            let a = match (config.balanced, pos) {
                (true, true) => 0.5 / n_pos as f64,
                (true, false) => 0.5 / n_neg as f64,
                (false, _) => 1.0 / labels.len() as f64,
            };
            (if pos { 1.0 } else { -1.0 }, a)
        })
        .unzip();
    let problem = BinaryProblem {
        features,
        signs,
        sample_weight,
    };
    let (_, _, zero, best) = train_binary(&problem, features[0].len(), config);
    (zero, best)
}

impl SvmBank {
    pub fn class_set(&self) -> &[usize] {
        &self.class_set
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_degenerate(&self, position: usize) -> bool {
        self.degenerate[position]
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.class_set.iter().position(|&c| c == class)
    }

    /// `w·x + b` per class, in class-set order.
    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: features.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .zip(&self.degenerate)
            .map(|((w, b), &d)| if d { SENTINEL } else { dot(w, features) + b })
            .collect())
    }

    /// Score matrix, one row per input.
    pub fn score_matrix(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        features.iter().map(|f| self.scores(f)).collect()
    }

    /// `SVM1` text serialization: header, class set, dim, then one line per
    /// class `<class> <degenerate> <bias> <w1> .. <wd>`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("SVM1\n");
        let classes: Vec<String> = self.class_set.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "class_set {} {}", classes.len(), classes.join(" "));
        let _ = writeln!(s, "dim {}", self.dim);
        for (i, c) in self.class_set.iter().enumerate() {
            let _ = write!(s, "{c} {} {:?}", u8::from(self.degenerate[i]), self.biases[i]);
            for v in &self.weights[i] {
                let _ = write!(s, " {v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let mut next = || lines.next().ok_or_else(|| Error::parse(0, "unexpected end of SVM file"));
        let (ln, magic) = next()?;
        if magic != "SVM1" {
            return Err(Error::parse(ln, "expected SVM1 header"));
        }
        let class_set = parse_counted::<usize>(next()?, "class_set")?;
        let (dl, dim_line) = next()?;
        let dim: usize = dim_line
            .strip_prefix("dim")
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| Error::parse(dl, "expected 'dim <d>'"))?;
        let mut bank = SvmBank {
            class_set: class_set.clone(),
            dim,
            weights: Vec::new(),
            biases: Vec::new(),
            degenerate: Vec::new(),
        };
        for &c in &class_set {
            let (rl, row) = next()?;
            let mut tok = row.splitn(3, char::is_whitespace);
            let class: usize = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| Error::parse(rl, "malformed class"))?;
            if class != c {
                return Err(Error::parse(rl, format!("expected class {c}, found {class}")));
            }
            let degenerate = tok.next() == Some("1");
            let vals = parse_floats(rl, tok.next().unwrap_or(""))?;
            if vals.len() != dim + 1 {
                return Err(Error::parse(rl, "dimension mismatch"));
            }
            bank.biases.push(vals[0]);
            bank.weights.push(vals[1..].to_vec());
            bank.degenerate.push(degenerate);
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
