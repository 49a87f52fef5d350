//! Nested class-group hierarchies.
//!
//! Level indices and group indices are 0-based in the API and 1-based in the
//! text format (`"<level> <group>: <class> <class> ..."`, one line per group).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::similarity::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroup {
    /// Sorted class IDs.
    pub classes: Vec<usize>,
    /// Index of the parent group on the previous level (`None` at the root).
    pub parent: Option<usize>,
    /// Indices of the child groups on the next level.
    pub children: Vec<usize>,
}

/// Address of a group: `(level, group)`, both 0-based.
pub type NodeId = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyTree {
    levels: Vec<Vec<ClassGroup>>,
}

impl HierarchyTree {
    /// Build and validate from per-level partitions. Groups are re-ordered by
    /// their smallest class ID; the first level must be a single group.
    pub fn from_levels(levels: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("hierarchy needs at least one level"));
        }
        if levels[0].len() != 1 {
            return Err(Error::invalid("the first level must hold exactly one group"));
        }
        let mut norm: Vec<Vec<Vec<usize>>> = Vec::with_capacity(levels.len());
        for (l, groups) in levels.into_iter().enumerate() {
            let mut groups: Vec<Vec<usize>> = groups
                .into_iter()
                .map(|mut g| {
                    g.sort_unstable();
                    g
                })
                .collect();
            if groups.iter().any(Vec::is_empty) {
                return Err(Error::invalid(format!("level {} has an empty group", l + 1)));
            }
            groups.sort_by_key(|g| g[0]);
            norm.push(groups);
        }
        let all: Vec<usize> = norm[0][0].clone();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("root group lists a class twice"));
        }
        for (l, groups) in norm.iter().enumerate() {
            let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
            seen.sort_unstable();
            if seen != all {
                return Err(Error::invalid(format!(
                    "level {} is not a partition of the root classes",
                    l + 1
                )));
            }
        }
        let mut levels: Vec<Vec<ClassGroup>> = norm
            .iter()
            .map(|groups| {
                groups
                    .iter()
                    .map(|g| ClassGroup {
                        classes: g.clone(),
                        parent: None,
                        children: Vec::new(),
                    })
                    .collect()
            })
            .collect();
        for l in 1..levels.len() {
            let owner: BTreeMap<usize, usize> = levels[l - 1]
                .iter()
                .enumerate()
                .flat_map(|(j, g)| g.classes.iter().map(move |&c| (c, j)))
                .collect();
            for j in 0..levels[l].len() {
                let parent = owner[&levels[l][j].classes[0]];
                if levels[l][j].classes.iter().any(|c| owner[c] != parent) {
                    return Err(Error::invalid(format!(
                        "group {} {} is not nested in a single parent",
                        l + 1,
                        j + 1
                    )));
                }
                levels[l][j].parent = Some(parent);
                levels[l - 1][parent].children.push(j);
            }
        }
        Ok(HierarchyTree { levels })
    }

    /// Single-level tree over `classes`.
    pub fn flat(classes: &[usize]) -> Result<Self> {
        Self::from_levels(vec![vec![classes.to_vec()]])
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Vec<ClassGroup>] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> &[ClassGroup] {
        &self.levels[level]
    }

    pub fn group(&self, (level, group): NodeId) -> &ClassGroup {
        &self.levels[level][group]
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn classes(&self) -> &[usize] {
        &self.levels[0][0].classes
    }

    /// Group holding `class` on `level`.
    pub fn group_of(&self, level: usize, class: usize) -> Option<usize> {
        self.levels[level].iter().position(|g| g.classes.binary_search(&class).is_ok())
    }

    /// Keep only the first `depth` levels.
    pub fn truncated(&self, depth: usize) -> Result<Self> {
        if depth == 0 || depth > self.depth() {
            return Err(Error::config(format!("cannot truncate a {}-level tree to {depth}", self.depth())));
        }
        Self::from_levels(
            self.levels[..depth]
                .iter()
                .map(|lv| lv.iter().map(|g| g.classes.clone()).collect())
                .collect(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, groups) in self.levels.iter().enumerate() {
            for (j, g) in groups.iter().enumerate() {
                let ids: Vec<String> = g.classes.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(s, "{} {}: {}", l + 1, j + 1, ids.join(" "));
            }
        }
        s
    }

    /// Parse the taxonomy format. A missing level 1 is synthesized as the union
    /// of the deepest level; when `classes` is given the root must equal it.
    pub fn parse(text: &str, classes: Option<&[usize]>) -> Result<Self> {
        let mut table: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ln = i + 1;
            let (head, ids) = line
                .split_once(':')
                .ok_or_else(|| Error::parse(ln, "expected '<level> <group>: <ids>'"))?;
            let nums: Vec<usize> = head
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("malformed index '{t}'"))))
                .collect::<Result<_>>()?;
            let [l, j] = nums[..] else {
                return Err(Error::parse(ln, "expected '<level> <group>'"));
            };
            if l == 0 || j == 0 {
                return Err(Error::parse(ln, "levels and groups are 1-based"));
            }
            let members: Vec<usize> = ids
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("malformed class '{t}'"))))
                .collect::<Result<_>>()?;
            if table.entry(l).or_default().insert(j, members).is_some() {
                return Err(Error::parse(ln, format!("group {l} {j} defined twice")));
            }
        }
        let Some(&deepest) = table.keys().next_back() else {
            return Err(Error::invalid("taxonomy file defines no groups"));
        };
        if !table.contains_key(&1) {
            let union: BTreeSet<usize> = table[&deepest].values().flatten().copied().collect();
            table.insert(1, BTreeMap::from([(1, union.into_iter().collect())]));
        }
        let mut levels = Vec::new();
        for l in 1..=deepest {
            let groups = table
                .remove(&l)
                .ok_or_else(|| Error::invalid(format!("taxonomy skips level {l}")))?;
            levels.push(groups.into_values().collect());
        }
        let tree = Self::from_levels(levels)?;
        if let Some(expected) = classes {
            let mut expected = expected.to_vec();
            expected.sort_unstable();
            if tree.classes() != expected.as_slice() {
                return Err(Error::invalid("taxonomy classes differ from the dataset classes"));
            }
        }
        Ok(tree)
    }
}

/// Check `J_1 = 1`, non-decreasing counts, and `J_L <= classes`.
pub fn validate_group_counts(group_counts: &[usize], classes: usize) -> Result<()> {
    match group_counts.first() {
        Some(1) => {}
        _ => return Err(Error::config("group counts must start with 1")),
    }
    if group_counts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("group counts must be non-decreasing"));
    }
    if *group_counts.last().expect("non-empty") > classes {
        return Err(Error::config(format!(
            "cannot form {} groups from {classes} classes",
            group_counts.last().expect("non-empty")
        )));
    }
    Ok(())
}

/// Average-linkage agglomeration on `1 − normalized similarity`.
///
/// Off-diagonal similarities are rescaled to `[0, 1]` (a constant matrix maps
/// to all zeros). Clusters are merged until `J_L` remain (deepest level), then
/// merging continues down to each coarser count, so levels nest by
/// construction. Equal distances go to the pair with the smallest
/// `(min class ID, min class ID)`.
pub fn agglomerative(sim: &SimilarityMatrix, group_counts: &[usize]) -> Result<HierarchyTree> {
    let n = sim.len();
    if n == 0 {
        return Err(Error::invalid("similarity matrix is empty"));
    }
    validate_group_counts(group_counts, n)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for a in 0..n {
        for b in 0..n {
            if a != b {
                lo = lo.min(sim.get(a, b));
                hi = hi.max(sim.get(a, b));
            }
        }
    }
    let span = hi - lo;
    let normalized = |a: usize, b: usize| {
        if span > 0.0 {
            (sim.get(a, b) - lo) / span
        } else {
            0.0
        }
    };
    let mut dist: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| 1.0 - normalized(a, b)).collect()).collect();
    let classes = sim.classes();
    // Active clusters: members (positions) and their smallest class ID.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|a| Some(vec![a])).collect();
    let min_id = |m: &[usize]| m.iter().map(|&p| classes[p]).min().expect("non-empty cluster");

    let snapshot = |members: &[Option<Vec<usize>>]| -> Vec<Vec<usize>> {
        members.iter().flatten().map(|m| m.iter().map(|&p| classes[p]).collect()).collect()
    };
    let mut by_level: Vec<Option<Vec<Vec<usize>>>> = vec![None; group_counts.len()];
    let mut active = n;
    loop {
        for (l, &target) in group_counts.iter().enumerate() {
            if target == active && by_level[l].is_none() {
                by_level[l] = Some(snapshot(&members));
            }
        }
        if active == 1 {
            break;
        }
        let mut order: Vec<usize> = (0..n).filter(|&a| members[a].is_some()).collect();
        order.sort_by_key(|&a| min_id(members[a].as_deref().expect("active")));
        let mut best: Option<(usize, usize, f64)> = None;
        for (x, &a) in order.iter().enumerate() {
            for &b in &order[x + 1..] {
                let d = dist[a][b];
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, _) = best.expect("at least two active clusters");
        let na = members[a].as_ref().expect("active").len() as f64;
        let nb = members[b].as_ref().expect("active").len() as f64;
        for k in 0..n {
            if k != a && k != b && members[k].is_some() {
                let d = (na * dist[a][k] + nb * dist[b][k]) / (na + nb);
                dist[a][k] = d;
                dist[k][a] = d;
            }
        }
        let moved = members[b].take().expect("active");
        members[a].as_mut().expect("active").extend(moved);
        active -= 1;
    }
    HierarchyTree::from_levels(by_level.into_iter().map(|l| l.expect("every count reached")).collect())
}

/// Seeded random nested partition: each level refines the previous one by
/// splitting randomly chosen groups (weighted by size) into near-equal random parts.
pub fn random_hierarchy(classes: &[usize], group_counts: &[usize], seed: u64) -> Result<HierarchyTree> {
    validate_group_counts(group_counts, classes.len())?;
    let mut rng = seed::rng(seed);
    let mut levels: Vec<Vec<Vec<usize>>> = vec![vec![classes.to_vec()]];
    for &target in &group_counts[1..] {
        let parents = levels.last().expect("root level").clone();
        let mut parts = vec![1usize; parents.len()];
        for _ in parents.len()..target {
            let weights: Vec<usize> = parents
                .iter()
                .zip(&parts)
                .map(|(g, &k)| if g.len() > k { g.len() } else { 0 })
                .collect();
            let total: usize = weights.iter().sum();
            let mut pick = rng.random_range(0..total);
            let chosen = weights
                .iter()
                .position(|&w| {
                    if pick < w {
                        true
                    } else {
                        pick -= w;
                        false
                    }
                })
                .expect("pick < total");
            parts[chosen] += 1;
        }
        let mut next = Vec::with_capacity(target);
        for (g, &k) in parents.iter().zip(&parts) {
            let mut shuffled = g.clone();
            shuffled.shuffle(&mut rng);
            let (q, r) = (shuffled.len() / k, shuffled.len() % k);
            let mut start = 0;
            for i in 0..k {
                let len = q + usize::from(i < r);
                next.push(shuffled[start..start + len].to_vec());
                start += len;
            }
        }
        levels.push(next);
    }
    HierarchyTree::from_levels(levels)
}
