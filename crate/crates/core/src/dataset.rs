//! Unbalanced longitudinal data.
//!
//! Each subject is observed at a subset `J_i` of the prespecified visit
//! indices `1..=b`. Visit indices are 1-based throughout the crate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("no subjects")]
    NoSubjects,
    #[error("row {row}: duplicate visit {visit} for subject `{subject}`")]
    DuplicateVisit {
        row: usize,
        subject: String,
        visit: usize,
    },
    #[error("row {row}: expected {expected} covariates, found {found}")]
    CovariateArity {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: non-finite {field}")]
    NonFinite { row: usize, field: &'static str },
    #[error("row {row}: visit index must be >= 1, got {visit}")]
    InvalidVisit { row: usize, visit: usize },
    #[error("subject `{subject}`: {reason}")]
    InvalidSubject {
        subject: String,
        reason: &'static str,
    },
    #[error("duplicate subject `{0}`")]
    DuplicateSubject(String),
    #[error("subject `{subject}`: first covariate column is not an intercept")]
    MissingIntercept { subject: String },
}

/// One `(subject, visit)` observation as read from a flat table.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub subject: String,
    pub visit: usize,
    pub response: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Sorted, duplicate-free visit indices (`J_i`).
    pub visits: Vec<usize>,
    pub responses: DVector<f64>,
    /// `|J_i| x p`, row `a` belongs to `visits[a]`.
    pub covariates: DMatrix<f64>,
}

impl SubjectRecord {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// Position of visit `j` within this subject's visit set.
    pub fn position(&self, visit: usize) -> Option<usize> {
        self.visits.binary_search(&visit).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    visit_count: usize,
    coefficient_count: usize,
}

impl LongitudinalDataset {
    /// Validates already-grouped subject records. `b` is the largest visit
    /// index observed.
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self, DatasetError> {
        let first = subjects.first().ok_or(DatasetError::NoSubjects)?;
        let p = first.covariates.ncols();
        let mut seen = BTreeMap::new();
        let mut b = 0;
        for s in &subjects {
            let bad = |reason| DatasetError::InvalidSubject {
                subject: s.id.clone(),
                reason,
            };
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(DatasetError::DuplicateSubject(s.id.clone()));
            }
            if s.visits.is_empty() {
                return Err(bad("empty visit set"));
            }
            if s.visits[0] == 0 {
                return Err(bad("visit indices start at 1"));
            }
            if s.visits.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("visit indices must be strictly increasing"));
            }
            if s.responses.len() != s.visits.len() || s.covariates.nrows() != s.visits.len() {
                return Err(bad("response/covariate length differs from visit count"));
            }
            if s.covariates.ncols() != p {
                return Err(bad("covariate column count differs from other subjects"));
            }
            if !s
                .responses
                .iter()
                .chain(s.covariates.iter())
                .all(|v| v.is_finite())
            {
                return Err(bad("non-finite value"));
            }
            b = b.max(*s.visits.last().unwrap());
        }
        Ok(Self {
            subjects,
            visit_count: b,
            coefficient_count: p,
        })
    }

    /// Groups flat rows by subject (first-appearance order) and sorts each
    /// subject's rows by visit. Errors carry the 0-based row position.
    pub fn from_rows(rows: &[RawRow]) -> Result<Self, DatasetError> {
        let first = rows.first().ok_or(DatasetError::NoSubjects)?;
        let p = first.covariates.len();
        let mut order: Vec<&str> = Vec::new();
        let mut grouped: BTreeMap<&str, Vec<(usize, &RawRow)>> = BTreeMap::new();
        for (row, r) in rows.iter().enumerate() {
            if r.covariates.len() != p {
                return Err(DatasetError::CovariateArity {
                    row,
                    expected: p,
                    found: r.covariates.len(),
                });
            }
            if r.visit == 0 {
                return Err(DatasetError::InvalidVisit {
                    row,
                    visit: r.visit,
                });
            }
            if !r.response.is_finite() {
                return Err(DatasetError::NonFinite {
                    row,
                    field: "response",
                });
            }
            if !r.covariates.iter().all(|v| v.is_finite()) {
                return Err(DatasetError::NonFinite {
                    row,
                    field: "covariate",
                });
            }
            let entry = grouped.entry(r.subject.as_str()).or_insert_with(|| {
                order.push(r.subject.as_str());
                Vec::new()
            });
            if entry.iter().any(|(_, prev)| prev.visit == r.visit) {
                return Err(DatasetError::DuplicateVisit {
                    row,
                    subject: r.subject.clone(),
                    visit: r.visit,
                });
            }
            entry.push((row, r));
        }

        let subjects = order
            .into_iter()
            .map(|id| {
                let mut obs = grouped.remove(id).unwrap();
                obs.sort_by_key(|(_, r)| r.visit);
                let d = obs.len();
                SubjectRecord {
                    id: String::from(id),
                    visits: obs.iter().map(|(_, r)| r.visit).collect(),
                    responses: DVector::from_iterator(d, obs.iter().map(|(_, r)| r.response)),
                    covariates: DMatrix::from_fn(d, p, |a, c| obs[a].1.covariates[c]),
                }
            })
            .collect();
        Self::new(subjects)
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn subject(&self, index: usize) -> &SubjectRecord {
        &self.subjects[index]
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Number of prespecified visit times `b`.
    pub fn visit_count(&self) -> usize {
        self.visit_count
    }

    /// Number of regression coefficients `p`.
    pub fn coefficient_count(&self) -> usize {
        self.coefficient_count
    }

    pub fn observation_count(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    /// Checks that the first covariate column is identically one.
    pub fn check_intercept(&self) -> Result<(), DatasetError> {
        for s in &self.subjects {
            if s.covariates.ncols() == 0 || s.covariates.column(0).iter().any(|&v| v != 1.0) {
                return Err(DatasetError::MissingIntercept {
                    subject: s.id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Same design with responses replaced, subject by subject.
    pub fn with_responses(&self, responses: Vec<DVector<f64>>) -> Result<Self, DatasetError> {
        let subjects = self
            .subjects
            .iter()
            .zip(responses)
            .map(|(s, y)| SubjectRecord {
                responses: y,
                ..s.clone()
            })
            .collect();
        Self::new(subjects)
    }

    /// Same design with every response multiplied by `c`.
    pub fn scaled_responses(&self, c: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.subjects {
            s.responses *= c;
        }
        out
    }
}
