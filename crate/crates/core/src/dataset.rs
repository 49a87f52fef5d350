//! Labeled feature-vector datasets, the `LTFV1` text format, and long-tail profiling.
//!
//! File layout:
//!
//! ```text
//! LTFV1 <num_samples> <dim> <num_classes>
//! <id> <split> <label> <f1> ... <fd>
//! ...
//! ```
//!
//! Label 0 is background; positive classes are `1..=num_classes`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const BACKGROUND: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub features: Vec<f64>,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.label != BACKGROUND
    }
}

/// An immutable, validated collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    /// Validate and wrap samples. Errors carry the 1-based position the sample
    /// would occupy in an `LTFV1` file (header is line 1).
    pub fn new(samples: Vec<Sample>, num_classes: usize, dim: usize) -> Result<Self> {
        let mut ids = HashSet::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let line = i + 2;
            if s.features.len() != dim {
                return Err(Error::parse(line, "dimension mismatch"));
            }
            if s.label > num_classes {
                return Err(Error::parse(line, "label out of range"));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(line, "non-finite feature value"));
            }
            if s.id.is_empty() || s.id.chars().any(char::is_whitespace) {
                return Err(Error::parse(line, "sample id must be non-empty without whitespace"));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::parse(line, format!("duplicate id '{}'", s.id)));
            }
        }
        Ok(Dataset {
            samples,
            num_classes,
            dim,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "LTFV1" {
            return Err(Error::parse(1, "malformed header (expected 'LTFV1 <n> <dim> <classes>')"));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(1, format!("malformed header field '{s}'")))
        };
        let (n, dim, num_classes) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);

        let mut samples = Vec::with_capacity(n);
        let mut ids = HashSet::with_capacity(n);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let mut tok = line.split_whitespace();
            let id = tok.next().ok_or_else(|| Error::parse(line_no, "missing id"))?;
            let split: Split = tok
                .next()
                .ok_or_else(|| Error::parse(line_no, "missing split"))?
                .parse()
                .map_err(|e: String| Error::parse(line_no, e))?;
            let label: usize = tok
                .next()
                .ok_or_else(|| Error::parse(line_no, "missing label"))?
                .parse()
                .map_err(|_| Error::parse(line_no, "malformed label"))?;
            let features = tok
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(line_no, format!("malformed feature '{t}'")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if features.len() != dim {
                return Err(Error::parse(line_no, "dimension mismatch"));
            }
            if label > num_classes {
                return Err(Error::parse(line_no, "label out of range"));
            }
            if !ids.insert(id.to_string()) {
                return Err(Error::parse(line_no, format!("duplicate id '{id}'")));
            }
            samples.push(Sample {
                id: id.to_string(),
                split,
                label,
                features,
            });
        }
        if samples.len() != n {
            return Err(Error::parse(
                1,
                format!("header declares {n} samples, file has {}", samples.len()),
            ));
        }
        Ok(Dataset {
            samples,
            num_classes,
            dim,
        })
    }

    /// Write in `LTFV1` format. Values use the shortest representation that
    /// parses back to the identical `f64`.
    pub fn write_to<W: Write>(&self, w: W) -> io::Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "LTFV1 {} {} {}", self.samples.len(), self.dim, self.num_classes)?;
        for s in &self.samples {
            write!(w, "{} {} {}", s.id, s.split, s.label)?;
            for v in &s.features {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        self.write_to(file)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("LTFV1 output is ASCII")
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Positive class IDs `1..=C`.
    pub fn classes(&self) -> Vec<usize> {
        (1..=self.num_classes).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).collect()
    }

    /// Indices of the samples in `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.indices_where(|s| s.split == split)
    }

    /// Indices of the samples in any of `splits`, in file order.
    pub fn splits_indices(&self, splits: &[Split]) -> Vec<usize> {
        self.indices_where(|s| splits.contains(&s.split))
    }

    pub fn indices_where(&self, pred: impl Fn(&Sample) -> bool) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| pred(s))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-label counts over `indices`; entry 0 is background.
    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes + 1];
        for &i in indices {
            counts[self.samples[i].label] += 1;
        }
        counts
    }
}

/// Class-frequency statistics over positive samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailProfile {
    per_class_count: BTreeMap<usize, usize>,
    sorted_counts: Vec<usize>,
}

impl LongTailProfile {
    /// Build from a class→count table; background entries (class 0) are ignored.
    pub fn from_counts(counts: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let per_class_count: BTreeMap<usize, usize> =
            counts.into_iter().filter(|&(c, _)| c != BACKGROUND).collect();
        let mut sorted_counts: Vec<usize> = per_class_count.values().copied().collect();
        sorted_counts.sort_unstable_by(|a, b| b.cmp(a));
        LongTailProfile {
            per_class_count,
            sorted_counts,
        }
    }

    pub fn per_class_count(&self) -> &BTreeMap<usize, usize> {
        &self.per_class_count
    }

    pub fn count(&self, class: usize) -> usize {
        self.per_class_count.get(&class).copied().unwrap_or(0)
    }

    /// Counts in non-increasing order.
    pub fn sorted_counts(&self) -> &[usize] {
        &self.sorted_counts
    }

    pub fn total_positives(&self) -> usize {
        self.sorted_counts.iter().sum()
    }

    /// Fraction of positives held by the `k` most populous classes (0 when there are none).
    pub fn head_mass(&self, k: usize) -> f64 {
        let total = self.total_positives();
        if total == 0 {
            return 0.0;
        }
        let head: usize = self.sorted_counts.iter().take(k).sum();
        head as f64 / total as f64
    }

    /// The `k` most populous classes; ties go to the smaller class ID.
    pub fn largest_classes(&self, k: usize) -> Vec<(usize, usize)> {
        let mut entries: Vec<(usize, usize)> =
            self.per_class_count.iter().map(|(&c, &n)| (c, n)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.truncate(k);
        entries
    }

    /// Classes ordered from most to least populous (ties by class ID).
    pub fn classes_by_count(&self) -> Vec<usize> {
        self.largest_classes(usize::MAX).into_iter().map(|(c, _)| c).collect()
    }
}

/// Profile every sample in the dataset.
pub fn profile(dataset: &Dataset) -> LongTailProfile {
    profile_indices(dataset, &dataset.all_indices())
}

/// Profile a subset of samples. Every class `1..=C` gets an entry, possibly zero.
pub fn profile_indices(dataset: &Dataset, indices: &[usize]) -> LongTailProfile {
    let counts = dataset.class_counts(indices);
    LongTailProfile::from_counts(counts.into_iter().enumerate().skip(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "LTFV1 2 3 2\na train 1 0.5 1 -2\nb test 0 0 0 0.25\n";

    #[test]
    fn loads_well_formed_file() {
        let ds = Dataset::parse(SMALL).unwrap();
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample(0).features, vec![0.5, 1.0, -2.0]);
        assert_eq!(ds.sample(1).split, Split::Test);
    }

    #[test]
    fn short_row_reports_line() {
        let err = Dataset::parse("LTFV1 2 3 2\na train 1 0 0 0\nb train 1 0 0\n").unwrap_err();
        assert_eq!(err.to_string(), "dimension mismatch, line 3");
    }

    #[test]
    fn label_out_of_range() {
        let text = "LTFV1 3 1 2\na train 0 1\nb train 1 1\nc train 5 1\n";
        let err = Dataset::parse(text).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn duplicate_id_and_bad_header() {
        let err = Dataset::parse("LTFV1 2 1 1\na train 0 1\na val 1 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate id"));
        assert!(Dataset::parse("LTFV2 1 1 1\na train 0 1\n").is_err());
        assert!(Dataset::parse("LTFV1 2 1 1\na train 0 1\n").is_err());
        assert!(Dataset::parse("LTFV1 1 1 1\na holdout 0 1\n").is_err());
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let ds = Dataset::new(
            vec![Sample {
                id: "x".into(),
                split: Split::Val,
                label: 1,
                features: vec![0.1, 1.0 / 3.0, -1e-300, 6.02e23],
            }],
            1,
            4,
        )
        .unwrap();
        assert_eq!(Dataset::parse(&ds.to_text()).unwrap(), ds);
    }

    #[test]
    fn head_mass_from_counts() {
        let p = LongTailProfile::from_counts([(1, 10), (2, 10)]);
        assert_eq!(p.head_mass(1), 0.5);
        let p = LongTailProfile::from_counts([(1, 100), (2, 50), (3, 10)]);
        assert_eq!(p.head_mass(2), 0.9375);
        assert_eq!(p.sorted_counts(), &[100, 50, 10]);
    }

    #[test]
    fn largest_classes_match_reported_head() {
        // person, dog, bird and the three rarest classes from the long-tail figure.
        let p = LongTailProfile::from_counts([
            (1, 16),
            (2, 2142),
            (3, 19),
            (4, 6007),
            (5, 19),
            (6, 1643),
        ]);
        assert_eq!(p.largest_classes(3), vec![(4, 6007), (2, 2142), (6, 1643)]);
    }

    #[test]
    fn background_only_profile_is_zero() {
        let ds = Dataset::parse("LTFV1 1 1 2\na train 0 1\n").unwrap();
        let p = profile(&ds);
        assert_eq!(p.total_positives(), 0);
        assert_eq!(p.head_mass(1), 0.0);
        assert_eq!(p.sorted_counts(), &[0, 0]);
    }
}
