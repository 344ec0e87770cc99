//! Greedy bottom-up merging of ambiguous classes into super categories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::confusion::SimilarityMatrix;
use crate::error::{invalid, shape, Result};
use crate::io::write_atomic;

/// A partition of the original class indices into super categories.
///
/// Groups are kept canonical: members ascending, groups ordered by their
/// smallest member. A group's index is its super-category label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub tau: f64,
    pub num_original: usize,
    pub groups: Vec<Vec<usize>>,
    pub source_confusion: Option<String>,
}

impl Partition {
    /// Every class alone. `tau` is 1, above any attainable similarity.
    pub fn identity(n: usize) -> Self {
        Self {
            tau: 1.0,
            num_original: n,
            groups: (0..n).map(|i| vec![i]).collect(),
            source_confusion: None,
        }
    }

    pub fn from_groups(num_original: usize, mut groups: Vec<Vec<usize>>, tau: f64) -> Result<Self> {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort_by_key(|g| g.first().copied());
        let p = Self {
            tau,
            num_original,
            groups,
            source_confusion: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_original];
        for g in &self.groups {
            if g.is_empty() {
                return Err(invalid("partition has an empty group"));
            }
            if g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("partition group members must be ascending"));
            }
            for &c in g {
                if c >= self.num_original || std::mem::replace(&mut seen[c], true) {
                    return Err(invalid(format!("class {c} is out of range or appears twice")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("partition does not cover every class"));
        }
        if self.groups.windows(2).any(|w| w[0][0] >= w[1][0]) {
            return Err(invalid("partition groups must be ordered by smallest member"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Super-category index of every original class.
    pub fn group_of(&self) -> Vec<usize> {
        let mut map = vec![0; self.num_original];
        for (g, members) in self.groups.iter().enumerate() {
            for &c in members {
                map[c] = g;
            }
        }
        map
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s.into_bytes())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let p: Self = serde_json::from_slice(bytes)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_file(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MergeOptions {
    /// Average merged rows by group size instead of the plain half-sum.
    pub size_weighted: bool,
}

/// One merge: the two groups joined and the similarity that selected them.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeStep {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeOutcome {
    pub partition: Partition,
    pub steps: Vec<MergeStep>,
}

/// Merges with the default (unweighted row average) update.
pub fn merge_categories(s: &SimilarityMatrix, tau: f64) -> Result<Partition> {
    Ok(merge_with(s, tau, MergeOptions::default())?.partition)
}

/// Repeatedly joins the most similar pair of groups while the largest
/// off-diagonal similarity exceeds `tau`. The joined row and column become
/// the average of the two old ones.
///
/// Ties go to the lexicographically smallest pair `(i, j)`, `i < j`, where
/// groups are indexed in order of their smallest member.
pub fn merge_with(s: &SimilarityMatrix, tau: f64, opts: MergeOptions) -> Result<MergeOutcome> {
    if !(tau >= 0.0) {
        return Err(invalid("tau must be non-negative"));
    }
    let n = s.len();
    if n == 0 {
        return Err(shape("empty similarity matrix"));
    }
    let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| s.get(i, j)).collect()).collect();
    let mut steps = Vec::new();

    while groups.len() > 1 {
        let k = groups.len();
        let (mut bi, mut bj, mut best) = (0, 1, f64::NEG_INFINITY);
        for i in 0..k {
            for j in i + 1..k {
                if m[i][j] > best {
                    (bi, bj, best) = (i, j, m[i][j]);
                }
            }
        }
        if best <= tau {
            break;
        }
        let (wi, wj) = if opts.size_weighted {
            let (a, b) = (groups[bi].len() as f64, groups[bj].len() as f64);
            (a / (a + b), b / (a + b))
        } else {
            (0.5, 0.5)
        };
        let merged_row: Vec<f64> = (0..k)
            .map(|c| {
                if c == bi || c == bj {
                    wi * m[bi][bi] + wj * m[bj][bj]
                } else {
                    wi * m[bi][c] + wj * m[bj][c]
                }
            })
            .collect();
        steps.push(MergeStep {
            first: groups[bi].clone(),
            second: groups[bj].clone(),
            similarity: best,
        });

        // The merged group keeps slot bi: its smallest member is groups[bi][0].
        let second = groups.remove(bj);
        groups[bi].extend(second);
        groups[bi].sort_unstable();
        for c in 0..k {
            m[bi][c] = merged_row[c];
            m[c][bi] = merged_row[c];
        }
        m.remove(bj);
        for row in &mut m {
            row.remove(bj);
        }
    }

    let mut partition = Partition::from_groups(n, groups, tau)?;
    partition.tau = tau;
    Ok(MergeOutcome { partition, steps })
}

/// Maps original labels to super-category labels.
pub fn relabel(labels: &[usize], partition: &Partition) -> Result<Vec<usize>> {
    let map = partition.group_of();
    labels
        .iter()
        .map(|&y| {
            map.get(y)
                .copied()
                .ok_or_else(|| invalid(format!("label {y} is outside the partition")))
        })
        .collect()
}

/// Spreads each super category's probability equally over its members.
pub fn redistribute(super_scores: &[f64], partition: &Partition) -> Result<Vec<f64>> {
    if super_scores.len() != partition.len() {
        return Err(shape(format!(
            "{} super-category scores for {} groups",
            super_scores.len(),
            partition.len()
        )));
    }
    let mut out = vec![0.0; partition.num_original];
    for (g, members) in partition.groups.iter().enumerate() {
        let share = super_scores[g] / members.len() as f64;
        for &c in members {
            out[c] = share;
        }
    }
    Ok(out)
}
