//! Covariance classes.
//!
//! Every covariance `cov(Y_ij, Y_ik)` of every subject is assigned to a class
//! `(j, k, l)` with `j <= k`. Subjects sharing a class share the covariance
//! value; the set of subjects in class `(j, k, l)` is `I(j, k, l)`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dataset::LongitudinalDataset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroupingError {
    #[error("no label for subject `{subject}` at pair ({j}, {k})")]
    MissingLabel { subject: String, j: usize, k: usize },
    #[error("label references unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("subject `{subject}` does not observe pair ({j}, {k})")]
    UnobservedPair { subject: String, j: usize, k: usize },
    #[error("conflicting labels for subject `{subject}` at pair ({j}, {k})")]
    ConflictingLabel { subject: String, j: usize, k: usize },
    #[error("covariate column {column} is out of range")]
    ColumnOutOfRange { column: usize },
    #[error("subject `{subject}`: covariate column {column} is not integer-valued")]
    NonIntegerCovariate { subject: String, column: usize },
    #[error("subject `{subject}`: covariate column {column} varies over visits")]
    TimeVaryingCovariate { subject: String, column: usize },
}

/// Key of one distinct covariance parameter, canonicalized to `j <= k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassKey {
    pub j: usize,
    pub k: usize,
    #[cfg_attr(feature = "serde", serde(rename = "l"))]
    pub label: i64,
}

impl ClassKey {
    pub fn new(j: usize, k: usize, label: i64) -> Self {
        let (j, k) = if j <= k { (j, k) } else { (k, j) };
        Self { j, k, label }
    }

    pub fn is_variance(&self) -> bool {
        self.j == self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitLabel {
    pub subject: String,
    pub j: usize,
    pub k: usize,
    pub label: i64,
}

/// How subjects are assigned to covariance classes.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupingSpec {
    /// One class per visit pair; covariances depend on the time pair only.
    PairOnly,
    /// The class label is the (integer, time-constant) value of a covariate
    /// column, 0-based.
    ByCovariate { column: usize },
    /// Labels supplied for every `(subject, j, k)`.
    Explicit { labels: Vec<ExplicitLabel> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceGrouping {
    classes: Vec<ClassKey>,
    members: Vec<Vec<usize>>,
    /// Per subject, row-major `|J_i| x |J_i|` class indices.
    assignment: Vec<Vec<usize>>,
    visits: Vec<Vec<usize>>,
}

impl CovarianceGrouping {
    pub fn build(ds: &LongitudinalDataset, spec: &GroupingSpec) -> Result<Self, GroupingError> {
        let labels: Vec<Vec<i64>> = match spec {
            GroupingSpec::PairOnly => ds
                .subjects()
                .iter()
                .map(|s| vec![1; s.len() * s.len()])
                .collect(),
            GroupingSpec::ByCovariate { column } => {
                let column = *column;
                if column >= ds.coefficient_count() {
                    return Err(GroupingError::ColumnOutOfRange { column });
                }
                let mut out = Vec::with_capacity(ds.len());
                for s in ds.subjects() {
                    let col = s.covariates.column(column);
                    let value = col[0];
                    if libm::trunc(value) != value || value.abs() > i64::MAX as f64 {
                        return Err(GroupingError::NonIntegerCovariate {
                            subject: s.id.clone(),
                            column,
                        });
                    }
                    if col.iter().any(|&x| x != value) {
                        return Err(GroupingError::TimeVaryingCovariate {
                            subject: s.id.clone(),
                            column,
                        });
                    }
                    out.push(vec![value as i64; s.len() * s.len()]);
                }
                out
            }
            GroupingSpec::Explicit { labels } => explicit_labels(ds, labels)?,
        };

        let mut by_class: BTreeMap<ClassKey, Vec<usize>> = BTreeMap::new();
        for (i, s) in ds.subjects().iter().enumerate() {
            let d = s.len();
            for a in 0..d {
                for b in a..d {
                    let key = ClassKey::new(s.visits[a], s.visits[b], labels[i][a * d + b]);
                    by_class.entry(key).or_default().push(i);
                }
            }
        }
        // Classes are registered from observed data, so every n(j,k,l) >= 1.
        let classes: Vec<ClassKey> = by_class.keys().copied().collect();
        let members: Vec<Vec<usize>> = by_class.into_values().collect();

        let assignment = ds
            .subjects()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d = s.len();
                let mut idx = vec![0; d * d];
                for a in 0..d {
                    for b in a..d {
                        let key = ClassKey::new(s.visits[a], s.visits[b], labels[i][a * d + b]);
                        let r = classes.binary_search(&key).unwrap();
                        idx[a * d + b] = r;
                        idx[b * d + a] = r;
                    }
                }
                idx
            })
            .collect();

        Ok(Self {
            classes,
            members,
            assignment,
            visits: ds.subjects().iter().map(|s| s.visits.clone()).collect(),
        })
    }

    /// Distinct covariance parameters in canonical `(j, k, l)` order.
    pub fn classes(&self) -> &[ClassKey] {
        &self.classes
    }

    /// `R`, the number of distinct covariance parameters.
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, key: &ClassKey) -> Option<usize> {
        self.classes.binary_search(key).ok()
    }

    /// Subject indices `I(j, k, l)` of class `r`, ascending.
    pub fn members(&self, r: usize) -> &[usize] {
        &self.members[r]
    }

    /// `n(j, k, l)` of class `r`.
    pub fn count(&self, r: usize) -> usize {
        self.members[r].len()
    }

    pub fn index_set(&self, key: &ClassKey) -> Option<&[usize]> {
        self.class_index(key).map(|r| self.members(r))
    }

    /// The pair set `D`, upper-triangular.
    pub fn pairs(&self) -> BTreeSet<(usize, usize)> {
        self.classes.iter().map(|c| (c.j, c.k)).collect()
    }

    /// `L_jk`, the number of labels registered for a pair.
    pub fn labels_per_pair(&self, j: usize, k: usize) -> usize {
        let key = ClassKey::new(j, k, 0);
        self.classes
            .iter()
            .filter(|c| c.j == key.j && c.k == key.k)
            .count()
    }

    /// Label assigned to subject `subject` at visit pair `(j, k)`.
    pub fn label(&self, subject: usize, j: usize, k: usize) -> Option<i64> {
        let visits = self.visits.get(subject)?;
        let a = visits.binary_search(&j).ok()?;
        let b = visits.binary_search(&k).ok()?;
        let d = visits.len();
        Some(self.classes[self.assignment[subject][a * d + b]].label)
    }

    /// Class index for positions `(a, b)` within subject `subject`'s visit set.
    pub fn class_at(&self, subject: usize, a: usize, b: usize) -> usize {
        let d = self.visits[subject].len();
        self.assignment[subject][a * d + b]
    }

    pub fn subject_count(&self) -> usize {
        self.visits.len()
    }

    pub fn subject_visits(&self, subject: usize) -> &[usize] {
        &self.visits[subject]
    }

    /// Start vector for the iteration: 1 for variances, 0 for covariances,
    /// so every assembled matrix is the identity.
    pub fn identity_vector(&self) -> Vec<f64> {
        self.classes
            .iter()
            .map(|c| if c.is_variance() { 1.0 } else { 0.0 })
            .collect()
    }

    /// Assembles subject `subject`'s matrix from a class vector.
    pub fn assemble(&self, v: &[f64], subject: usize) -> DMatrix<f64> {
        let d = self.visits[subject].len();
        let idx = &self.assignment[subject];
        DMatrix::from_fn(d, d, |a, b| v[idx[a * d + b]])
    }

    /// Whether this grouping was built for `ds`'s visit structure.
    pub fn covers(&self, ds: &LongitudinalDataset) -> Result<(), (usize, usize, usize)> {
        for (i, s) in ds.subjects().iter().enumerate() {
            match self.visits.get(i) {
                Some(v) if *v == s.visits => {}
                _ => {
                    let j = s.visits[0];
                    let k = *s.visits.last().unwrap();
                    return Err((i, j, k));
                }
            }
        }
        if self.visits.len() != ds.len() {
            return Err((ds.len(), 0, 0));
        }
        Ok(())
    }
}

fn explicit_labels(
    ds: &LongitudinalDataset,
    labels: &[ExplicitLabel],
) -> Result<Vec<Vec<i64>>, GroupingError> {
    let mut given: Vec<Vec<Option<i64>>> = ds
        .subjects()
        .iter()
        .map(|s| vec![None; s.len() * s.len()])
        .collect();
    for entry in labels {
        let i = ds
            .index_of(&entry.subject)
            .ok_or_else(|| GroupingError::UnknownSubject(entry.subject.clone()))?;
        let s = ds.subject(i);
        let unobserved = || GroupingError::UnobservedPair {
            subject: entry.subject.clone(),
            j: entry.j,
            k: entry.k,
        };
        let a = s.position(entry.j).ok_or_else(unobserved)?;
        let b = s.position(entry.k).ok_or_else(unobserved)?;
        let d = s.len();
        for slot in [a * d + b, b * d + a] {
            match given[i][slot] {
                Some(prev) if prev != entry.label => {
                    return Err(GroupingError::ConflictingLabel {
                        subject: entry.subject.clone(),
                        j: entry.j,
                        k: entry.k,
                    })
                }
                _ => given[i][slot] = Some(entry.label),
            }
        }
    }
    ds.subjects()
        .iter()
        .zip(given)
        .map(|(s, g)| {
            let d = s.len();
            g.iter()
                .enumerate()
                .map(|(slot, l)| {
                    l.ok_or_else(|| GroupingError::MissingLabel {
                        subject: s.id.clone(),
                        j: s.visits[(slot / d).min(slot % d)],
                        k: s.visits[(slot / d).max(slot % d)],
                    })
                })
                .collect()
        })
        .collect()
}

/// Disjoint visit-set blocks such that every subject observes exactly one
/// whole block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionDesign {
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
}

impl PartitionDesign {
    /// Returns `None` when two distinct observed visit sets overlap.
    pub fn detect(ds: &LongitudinalDataset) -> Option<Self> {
        let patterns = Self::by_visit_pattern(ds);
        patterns.is_disjoint().then_some(patterns)
    }

    /// Groups subjects by identical visit sets. The blocks need not be
    /// disjoint, so the result is a partition only when
    /// [`is_disjoint`](Self::is_disjoint) holds.
    pub fn by_visit_pattern(ds: &LongitudinalDataset) -> Self {
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut block_of = Vec::with_capacity(ds.len());
        for s in ds.subjects() {
            let b = match blocks.iter().position(|blk| *blk == s.visits) {
                Some(b) => b,
                None => {
                    blocks.push(s.visits.clone());
                    blocks.len() - 1
                }
            };
            block_of.push(b);
        }
        Self { blocks, block_of }
    }

    pub fn is_disjoint(&self) -> bool {
        self.blocks.iter().enumerate().all(|(a, x)| {
            self.blocks[a + 1..]
                .iter()
                .all(|y| x.iter().all(|j| y.binary_search(j).is_err()))
        })
    }

    /// Blocks in order of first appearance.
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_of(&self, subject: usize) -> usize {
        self.block_of[subject]
    }

    /// Subjects in block `b`, ascending.
    pub fn block_members(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        self.block_of
            .iter()
            .enumerate()
            .filter(move |(_, &x)| x == b)
            .map(|(i, _)| i)
    }
}
