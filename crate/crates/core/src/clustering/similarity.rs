//! Class-by-class similarity matrices.

use std::collections::BTreeMap;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::models::MlpModel;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    classes: Vec<usize>,
    values: Vec<f64>,
    method: String,
}

impl SimilarityMatrix {
    /// `values` is `n × n` row-major over `classes`.
    pub fn new(classes: Vec<usize>, values: Vec<f64>, method: impl Into<String>) -> Result<Self> {
        let n = classes.len();
        if values.len() != n * n {
            return Err(Error::invalid("similarity matrix is not square over its classes"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("similarity matrix has non-finite entries"));
        }
        Ok(SimilarityMatrix {
            classes,
            values,
            method: method.into(),
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Entry by position.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.classes.len() + j]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Reorder rows and columns by `perm` (new position `k` takes old position `perm[k]`).
    pub fn permuted(&self, perm: &[usize], classes: Vec<usize>) -> Self {
        let n = self.len();
        let mut values = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                values[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        SimilarityMatrix {
            classes,
            values,
            method: self.method.clone(),
        }
    }
}

/// Mean inner product over all cross pairs of class feature vectors, computed
/// as the inner product of class means.
pub fn visual_similarity(features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<SimilarityMatrix> {
    let classes: Vec<usize> = features_by_class.keys().copied().collect();
    let means: Vec<Vec<f64>> = features_by_class
        .iter()
        .map(|(&c, rows)| {
            let first = rows.first().ok_or_else(|| Error::invalid(format!("class {c} has no samples")))?;
            let mut mean = vec![0.0; first.len()];
            for r in rows {
                if r.len() != mean.len() {
                    return Err(Error::Dimension {
                        expected: mean.len(),
                        got: r.len(),
                    });
                }
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            let n = rows.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(mean)
        })
        .collect::<Result<_>>()?;
    if let Some(d) = means.first().map(Vec::len) {
        if let Some(bad) = means.iter().find(|m| m.len() != d) {
            return Err(Error::Dimension { expected: d, got: bad.len() });
        }
    }
    let n = classes.len();
    let rows = exec::map_range(n, |a| {
        (0..n)
            .map(|b| means[a].iter().zip(&means[b]).map(|(x, y)| x * y).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    // Fill the lower triangle from the upper so the matrix is exactly symmetric.
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            values[a * n + b] = rows[a][b];
            values[b * n + a] = rows[a][b];
        }
    }
    SimilarityMatrix::new(classes, values, "visual")
}

/// Group `model` features of the given samples by label (positive classes only).
pub fn features_by_class(
    model: &MlpModel,
    dataset: &Dataset,
    indices: &[usize],
    normalize: bool,
) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let positives: Vec<usize> = indices.iter().copied().filter(|&i| dataset.sample(i).is_positive()).collect();
    let feats = crate::models::extract_features(model, dataset, &positives, normalize)?;
    let mut out: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, f) in positives.iter().zip(feats) {
        out.entry(dataset.sample(*i).label).or_default().push(f);
    }
    Ok(out)
}

/// Confusion-based similarity from a score matrix over `classes`.
///
/// `M(a,b)` is the fraction of class-`a` samples whose top-scoring class is `b`;
/// the result is `(M + Mᵀ)/2` with a zero diagonal.
pub fn confusion_from_scores(classes: &[usize], labels: &[usize], scores: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let n = classes.len();
    let pos = |label: usize| classes.iter().position(|&c| c == label);
    let mut confusion = vec![0.0; n * n];
    let mut totals = vec![0usize; n];
    for (label, row) in labels.iter().zip(scores) {
        let Some(a) = pos(*label) else { continue };
        if row.len() != n {
            return Err(Error::Dimension { expected: n, got: row.len() });
        }
        let b = (0..n)
            .max_by(|&x, &y| row[x].total_cmp(&row[y]).then(y.cmp(&x)))
            .expect("non-empty class list");
        confusion[a * n + b] += 1.0;
        totals[a] += 1;
    }
    if let Some(k) = totals.iter().position(|&t| t == 0) {
        return Err(Error::invalid(format!("class {} has no validation samples", classes[k])));
    }
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let m_ab = confusion[a * n + b] / totals[a] as f64;
                let m_ba = confusion[b * n + a] / totals[b] as f64;
                values[a * n + b] = 0.5 * (m_ab + m_ba);
            }
        }
    }
    SimilarityMatrix::new(classes.to_vec(), values, "confusion")
}

/// Confusion similarity of `model` on the positive samples in `indices`; the top
/// class is taken over the model's positive output slots.
pub fn confusion_similarity(model: &MlpModel, dataset: &Dataset, indices: &[usize]) -> Result<SimilarityMatrix> {
    let positives: Vec<usize> = indices.iter().copied().filter(|&i| dataset.sample(i).is_positive()).collect();
    let rows = exec::map(&positives, |&i| model.forward(&dataset.sample(i).features).map(|f| f.logits[1..].to_vec()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = positives.iter().map(|&i| dataset.sample(i).label).collect();
    confusion_from_scores(model.class_set(), &labels, &rows)
}

/// `Sim(a,b) = −|v_a − v_b|` for a per-class scalar descriptor.
pub fn scalar_similarity(classes: &[usize], values: &[f64], method: &str) -> Result<SimilarityMatrix> {
    if classes.len() != values.len() {
        return Err(Error::invalid("one descriptor value per class required"));
    }
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite descriptor for class {}", classes[k])));
    }
    let n = classes.len();
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            out[a * n + b] = -(values[a] - values[b]).abs();
        }
    }
    SimilarityMatrix::new(classes.to_vec(), out, method)
}

/// Parse `<class> <value>` lines (blank lines and `#` comments skipped).
pub fn parse_scalar_file(text: &str) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let class = tok.next().and_then(|t| t.parse::<usize>().ok());
        let value = tok.next().and_then(|t| t.parse::<f64>().ok());
        match (class, value, tok.next()) {
            (Some(c), Some(v), None) if v.is_finite() => {
                if out.insert(c, v).is_some() {
                    return Err(Error::parse(i + 1, format!("duplicate class {c}")));
                }
            }
            _ => return Err(Error::parse(i + 1, "expected '<class> <value>'")),
        }
    }
    Ok(out)
}
