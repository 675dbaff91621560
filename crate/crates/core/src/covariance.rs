//! Method-of-moments covariance estimation.
//!
//! Componentwise: `v(j,k,l) = n(j,k,l)^-1 sum_{i in I(j,k,l)} r_ij r_ik` with
//! residuals `r = Y - mu(beta)`. Matrix-wise (partition designs only): one
//! averaged residual outer product per visit-set block.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::dataset::LongitudinalDataset;
use crate::gee::CovarianceSet;
use crate::grouping::{ClassKey, CovarianceGrouping, PartitionDesign};
use crate::mean_model::{MeanModel, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomError {
    #[error("grouping has no class for subject {subject} at pair ({j}, {k})")]
    MissingGroup { subject: usize, j: usize, k: usize },
    #[error("estimated covariance{} is indefinite (smallest eigenvalue {min_eigenvalue:e})",
        match .subject { Some(s) => alloc::format!(" of subject {s}"), None => alloc::string::String::new() })]
    IndefiniteCovariance {
        subject: Option<usize>,
        min_eigenvalue: f64,
    },
    #[error("visit sets do not form a partition")]
    NoPartition,
    #[error("pd_floor must lie in [0, 1)")]
    InvalidPolicy,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RepairMode {
    ErrorOnIndefinite,
    ClipEigenvalues,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RepairPolicy {
    /// Relative eigenvalue floor: eigenvalues below
    /// `pd_floor * max(lambda_max, 1)` are indefinite.
    pub pd_floor: f64,
    pub mode: RepairMode,
}

impl Default for RepairPolicy {
    fn default() -> Self {
        Self {
            pd_floor: 1e-8,
            mode: RepairMode::ClipEigenvalues,
        }
    }
}

impl RepairPolicy {
    pub fn validate(&self) -> Result<(), MomError> {
        if (0.0..1.0).contains(&self.pd_floor) {
            Ok(())
        } else {
            Err(MomError::InvalidPolicy)
        }
    }
}

/// Returns `v` unchanged when its eigenvalues clear the floor, otherwise
/// clips (or rejects, per policy). The flag reports whether clipping
/// happened.
pub fn repair_pd(
    v: &DMatrix<f64>,
    policy: &RepairPolicy,
) -> Result<(DMatrix<f64>, bool), MomError> {
    policy.validate()?;
    let eig = SymmetricEigen::new(v.clone());
    let lambda_max = eig.eigenvalues.max();
    let lambda_min = eig.eigenvalues.min();
    let floor = policy.pd_floor * lambda_max.max(1.0);
    if lambda_min > 0.0 && lambda_min >= floor {
        return Ok((v.clone(), false));
    }
    match policy.mode {
        RepairMode::ErrorOnIndefinite => Err(MomError::IndefiniteCovariance {
            subject: None,
            min_eigenvalue: lambda_min,
        }),
        RepairMode::ClipEigenvalues => {
            let clipped = eig.eigenvalues.map(|l| l.max(floor));
            let q = &eig.eigenvectors;
            let full = q * DMatrix::from_diagonal(&clipped) * q.transpose();
            let d = full.nrows();
            Ok((
                DMatrix::from_fn(d, d, |a, b| full[(a.min(b), a.max(b))]),
                true,
            ))
        }
    }
}

/// Moment estimate of the distinct covariances plus the assembled,
/// possibly repaired, per-subject matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    /// Parameter keys, aligned with `v`.
    pub keys: Vec<ClassKey>,
    pub v: Vec<f64>,
    /// Number of subjects contributing to each entry of `v`.
    pub counts: Vec<usize>,
    pub assembled: CovarianceSet,
    /// Per subject: whether its assembled matrix was clipped.
    pub repaired: Vec<bool>,
}

impl CovarianceEstimate {
    /// Assembles and repairs the subject matrices for a given class vector.
    pub fn from_vector(
        grouping: &CovarianceGrouping,
        v: Vec<f64>,
        policy: &RepairPolicy,
    ) -> Result<Self, MomError> {
        let n = grouping.subject_count();
        let mut matrices = Vec::with_capacity(n);
        let mut repaired = Vec::with_capacity(n);
        for i in 0..n {
            let (m, fixed) =
                repair_pd(&grouping.assemble(&v, i), policy).map_err(|e| with_subject(e, i))?;
            matrices.push(m);
            repaired.push(fixed);
        }
        Ok(Self {
            keys: grouping.classes().to_vec(),
            counts: (0..grouping.class_count())
                .map(|r| grouping.count(r))
                .collect(),
            v,
            assembled: CovarianceSet::new(matrices),
            repaired,
        })
    }

    pub fn any_repaired(&self) -> bool {
        self.repaired.iter().any(|&r| r)
    }
}

fn with_subject(e: MomError, subject: usize) -> MomError {
    match e {
        MomError::IndefiniteCovariance { min_eigenvalue, .. } => MomError::IndefiniteCovariance {
            subject: Some(subject),
            min_eigenvalue,
        },
        other => other,
    }
}

fn residuals(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    beta: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, MomError> {
    ds.subjects()
        .iter()
        .map(|s| Ok(&s.responses - model.mean(s, beta)?))
        .collect()
}

/// Componentwise moment vector, unrepaired, in the grouping's class order.
pub fn moment_vector(
    ds: &LongitudinalDataset,
    grouping: &CovarianceGrouping,
    model: &MeanModel,
    beta: &DVector<f64>,
) -> Result<Vec<f64>, MomError> {
    grouping
        .covers(ds)
        .map_err(|(subject, j, k)| MomError::MissingGroup { subject, j, k })?;
    let resid = residuals(ds, model, beta)?;
    Ok(moments_from_residuals(grouping, &resid))
}

pub(crate) fn moments_from_residuals(
    grouping: &CovarianceGrouping,
    resid: &[DVector<f64>],
) -> Vec<f64> {
    let mut sums = vec![0.0; grouping.class_count()];
    for (i, r) in resid.iter().enumerate() {
        let d = r.len();
        for a in 0..d {
            for b in a..d {
                sums[grouping.class_at(i, a, b)] += r[a] * r[b];
            }
        }
    }
    sums.iter()
        .enumerate()
        .map(|(c, s)| s / grouping.count(c) as f64)
        .collect()
}

/// Componentwise moment estimator with assembly and repair.
pub fn estimate_componentwise(
    ds: &LongitudinalDataset,
    grouping: &CovarianceGrouping,
    model: &MeanModel,
    beta: &DVector<f64>,
    policy: &RepairPolicy,
) -> Result<CovarianceEstimate, MomError> {
    let v = moment_vector(ds, grouping, model, beta)?;
    CovarianceEstimate::from_vector(grouping, v, policy)
}

/// Matrix-wise moment estimator on a partition design. Keys are
/// `(j, k, block + 1)` over each block's upper triangle.
pub fn estimate_matrixwise(
    ds: &LongitudinalDataset,
    partition: &PartitionDesign,
    model: &MeanModel,
    beta: &DVector<f64>,
    policy: &RepairPolicy,
) -> Result<CovarianceEstimate, MomError> {
    if PartitionDesign::detect(ds).as_ref() != Some(partition) {
        return Err(MomError::NoPartition);
    }
    blockwise(ds, partition, model, beta, policy)
}

/// Matrix-wise averages over subjects sharing a visit set, on any design.
/// On overlapping designs this differs from the componentwise estimator:
/// entries shared by several visit sets are estimated once per set rather
/// than pooled.
pub fn estimate_matrixwise_by_pattern(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    beta: &DVector<f64>,
    policy: &RepairPolicy,
) -> Result<CovarianceEstimate, MomError> {
    blockwise(
        ds,
        &PartitionDesign::by_visit_pattern(ds),
        model,
        beta,
        policy,
    )
}

fn blockwise(
    ds: &LongitudinalDataset,
    partition: &PartitionDesign,
    model: &MeanModel,
    beta: &DVector<f64>,
    policy: &RepairPolicy,
) -> Result<CovarianceEstimate, MomError> {
    let resid = residuals(ds, model, beta)?;
    let mut keys = Vec::new();
    let mut v = Vec::new();
    let mut counts = Vec::new();
    let mut block_means = Vec::with_capacity(partition.blocks().len());
    for (b, visits) in partition.blocks().iter().enumerate() {
        let d = visits.len();
        let members: Vec<usize> = partition.block_members(b).collect();
        let mut sum = DMatrix::<f64>::zeros(d, d);
        for &i in &members {
            let r = &resid[i];
            for a in 0..d {
                for c in a..d {
                    sum[(a, c)] += r[a] * r[c];
                }
            }
        }
        let n = members.len() as f64;
        let mean = DMatrix::from_fn(d, d, |a, c| sum[(a.min(c), a.max(c))] / n);
        for a in 0..d {
            for c in a..d {
                keys.push(ClassKey::new(visits[a], visits[c], b as i64 + 1));
                v.push(mean[(a, c)]);
                counts.push(members.len());
            }
        }
        block_means.push(repair_pd(&mean, policy));
    }
    let mut matrices = Vec::with_capacity(ds.len());
    let mut repaired = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        match &block_means[partition.block_of(i)] {
            Ok((m, fixed)) => {
                matrices.push(m.clone());
                repaired.push(*fixed);
            }
            Err(e) => return Err(with_subject(e.clone(), i)),
        }
    }
    Ok(CovarianceEstimate {
        keys,
        v,
        counts,
        assembled: CovarianceSet::new(matrices),
        repaired,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SubjectRecord;
    use crate::grouping::GroupingSpec;
    use alloc::format;
    use proptest::prelude::*;

    fn dataset(sets: &[(&[usize], &[f64])]) -> LongitudinalDataset {
        let subjects = sets
            .iter()
            .enumerate()
            .map(|(i, (v, y))| SubjectRecord {
                id: format!("s{i}"),
                visits: v.to_vec(),
                responses: DVector::from_column_slice(y),
                covariates: DMatrix::from_element(v.len(), 1, 1.0),
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    fn zero() -> DVector<f64> {
        DVector::zeros(1)
    }

    #[test]
    fn repair_noop_is_bit_identical() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let (out, fixed) = repair_pd(&m, &RepairPolicy::default()).unwrap();
        assert!(!fixed);
        assert_eq!(out, m);
    }

    #[test]
    fn repair_clips_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (out, fixed) = repair_pd(&m, &RepairPolicy::default()).unwrap();
        assert!(fixed);
        assert_eq!(out, out.transpose());
        let eig = SymmetricEigen::new(out).eigenvalues;
        assert!((eig.min() - 3e-8).abs() < 1e-14, "{}", eig.min());
        assert!((eig.max() - 3.0).abs() < 1e-14);

        let strict = RepairPolicy {
            mode: RepairMode::ErrorOnIndefinite,
            ..RepairPolicy::default()
        };
        assert!(matches!(
            repair_pd(&m, &strict),
            Err(MomError::IndefiniteCovariance { .. })
        ));
    }

    #[test]
    fn repair_zero_matrix() {
        let (out, fixed) = repair_pd(&DMatrix::zeros(3, 3), &RepairPolicy::default()).unwrap();
        assert!(fixed);
        assert!((out - DMatrix::identity(3, 3) * 1e-8).amax() < 1e-22);
        let bad = RepairPolicy {
            pd_floor: 1.0,
            ..RepairPolicy::default()
        };
        assert_eq!(
            repair_pd(&DMatrix::zeros(1, 1), &bad),
            Err(MomError::InvalidPolicy)
        );
    }

    #[test]
    fn zero_residuals() {
        let ds = dataset(&[(&[1, 2], &[0.0, 0.0]), (&[1], &[0.0])]);
        let g = CovarianceGrouping::build(&ds, &GroupingSpec::PairOnly).unwrap();
        let est = estimate_componentwise(
            &ds,
            &g,
            &MeanModel::Linear,
            &zero(),
            &RepairPolicy::default(),
        )
        .unwrap();
        assert!(est.v.iter().all(|&x| x == 0.0));
        assert!(est.repaired.iter().all(|&r| r));
        let strict = RepairPolicy {
            mode: RepairMode::ErrorOnIndefinite,
            ..RepairPolicy::default()
        };
        assert!(matches!(
            estimate_componentwise(&ds, &g, &MeanModel::Linear, &zero(), &strict),
            Err(MomError::IndefiniteCovariance {
                subject: Some(0),
                ..
            })
        ));
    }

    #[test]
    fn balanced_matches_pooled_outer_product() {
        let ys: [&[f64]; 4] = [
            &[1.0, -2.0, 0.5],
            &[0.3, 0.9, -1.1],
            &[2.0, 1.0, 0.0],
            &[-0.4, 0.2, 1.7],
        ];
        let sets: Vec<(&[usize], &[f64])> = ys.iter().map(|y| (&[1usize, 2, 3][..], *y)).collect();
        let ds = dataset(&sets);
        let g = CovarianceGrouping::build(&ds, &GroupingSpec::PairOnly).unwrap();
        let est = estimate_componentwise(
            &ds,
            &g,
            &MeanModel::Linear,
            &zero(),
            &RepairPolicy::default(),
        )
        .unwrap();
        let mut pooled = DMatrix::zeros(3, 3);
        for y in ys {
            let r = DVector::from_column_slice(y);
            pooled += &r * r.transpose();
        }
        pooled /= 4.0;
        for (key, v) in est.keys.iter().zip(&est.v) {
            assert!((pooled[(key.j - 1, key.k - 1)] - v).abs() < 1e-15);
        }
    }

    #[test]
    fn brute_force_oracle() {
        let ds = dataset(&[
            (&[1, 2, 3], &[0.5, -1.0, 2.0]),
            (&[1, 3], &[1.5, 0.25]),
            (&[2, 3], &[-0.75, 3.0]),
        ]);
        let beta = DVector::from_element(1, 0.1);
        let g = CovarianceGrouping::build(&ds, &GroupingSpec::PairOnly).unwrap();
        let est =
            estimate_componentwise(&ds, &g, &MeanModel::Linear, &beta, &RepairPolicy::default())
                .unwrap();
        for (r, key) in est.keys.iter().enumerate() {
            let mut total = 0.0;
            let mut n = 0;
            for s in ds.subjects() {
                let pj = s.visits.iter().position(|&v| v == key.j);
                let pk = s.visits.iter().position(|&v| v == key.k);
                if let (Some(a), Some(b)) = (pj, pk) {
                    total += (s.responses[a] - 0.1) * (s.responses[b] - 0.1);
                    n += 1;
                }
            }
            assert!((est.v[r] - total / n as f64).abs() < 1e-14);
            assert_eq!(est.counts[r], n);
        }
    }

    #[test]
    fn matrixwise_blocks() {
        let ds = dataset(&[
            (&[1, 3, 5], &[1.0, 2.0, 3.0]),
            (&[2, 4], &[0.5, -0.5]),
            (&[1, 3, 5], &[-1.0, 0.0, 1.0]),
        ]);
        let part = PartitionDesign::detect(&ds).unwrap();
        let est = estimate_matrixwise(
            &ds,
            &part,
            &MeanModel::Linear,
            &zero(),
            &RepairPolicy::default(),
        )
        .unwrap();
        // block 2 has a single subject: rank-one outer product
        let r = DVector::from_column_slice(&[0.5, -0.5]);
        let outer = &r * r.transpose();
        assert_eq!(est.keys.iter().filter(|k| k.label == 2).count(), 3);
        let i = est
            .keys
            .iter()
            .position(|k| *k == ClassKey::new(2, 4, 2))
            .unwrap();
        assert_eq!(est.v[i], outer[(0, 1)]);
        let i = est
            .keys
            .iter()
            .position(|k| *k == ClassKey::new(1, 5, 1))
            .unwrap();
        assert_eq!(est.v[i], (3.0 - 1.0) / 2.0);

        let other = dataset(&[(&[1, 2], &[1.0, 2.0]), (&[1, 3], &[0.0, 1.0])]);
        assert_eq!(
            estimate_matrixwise(
                &other,
                &part,
                &MeanModel::Linear,
                &zero(),
                &RepairPolicy::default()
            ),
            Err(MomError::NoPartition)
        );
    }

    #[test]
    fn overlapping_patterns_split_shared_entry() {
        let ds = dataset(&[
            (&[1, 2], &[1.0, 2.0]),
            (&[1, 2], &[3.0, 0.0]),
            (&[1, 3], &[-2.0, 1.0]),
            (&[1, 3], &[4.0, 1.0]),
        ]);
        assert_eq!(
            estimate_matrixwise(
                &ds,
                &PartitionDesign::by_visit_pattern(&ds),
                &MeanModel::Linear,
                &zero(),
                &RepairPolicy::default()
            ),
            Err(MomError::NoPartition)
        );
        let g = CovarianceGrouping::build(&ds, &GroupingSpec::PairOnly).unwrap();
        let comp = estimate_componentwise(
            &ds,
            &g,
            &MeanModel::Linear,
            &zero(),
            &RepairPolicy::default(),
        )
        .unwrap();
        let mat = estimate_matrixwise_by_pattern(
            &ds,
            &MeanModel::Linear,
            &zero(),
            &RepairPolicy::default(),
        )
        .unwrap();
        let at = |e: &CovarianceEstimate, key| e.v[e.keys.iter().position(|k| *k == key).unwrap()];
        assert_eq!(
            at(&comp, ClassKey::new(1, 1, 1)),
            (1.0 + 9.0 + 4.0 + 16.0) / 4.0
        );
        assert_eq!(at(&mat, ClassKey::new(1, 1, 1)), 5.0);
        assert_eq!(at(&mat, ClassKey::new(1, 1, 2)), 10.0);
        assert_eq!(
            at(&comp, ClassKey::new(1, 2, 1)),
            at(&mat, ClassKey::new(1, 2, 1))
        );
        assert_eq!(
            at(&comp, ClassKey::new(3, 3, 1)),
            at(&mat, ClassKey::new(3, 3, 2))
        );
    }

    #[test]
    fn mismatched_grouping() {
        let ds = dataset(&[(&[1, 2], &[1.0, 2.0])]);
        let other = dataset(&[(&[1, 3], &[1.0, 2.0])]);
        let g = CovarianceGrouping::build(&other, &GroupingSpec::PairOnly).unwrap();
        assert!(matches!(
            moment_vector(&ds, &g, &MeanModel::Linear, &zero()),
            Err(MomError::MissingGroup { subject: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn quadratic_scaling_symmetry_and_nonnegative_variances(
            ys in proptest::collection::vec(-5.0f64..5.0, 12),
            c in -4.0f64..4.0,
        ) {
            let sets: Vec<(&[usize], &[f64])> = vec![
                (&[1, 2, 3], &ys[0..3]), (&[1, 3], &ys[3..5]), (&[2, 3], &ys[5..7]),
                (&[1, 2], &ys[7..9]), (&[1, 2, 3], &ys[9..12]),
            ];
            let ds = dataset(&sets);
            let g = CovarianceGrouping::build(&ds, &GroupingSpec::PairOnly).unwrap();
            let v = moment_vector(&ds, &g, &MeanModel::Linear, &zero()).unwrap();
            let vc = moment_vector(&ds.scaled_responses(c), &g, &MeanModel::Linear, &zero()).unwrap();
            for (a, b) in v.iter().zip(&vc) {
                prop_assert!((b - c * c * a).abs() <= 1e-12 * (1.0 + a.abs()) * c * c);
            }
            for (key, x) in g.classes().iter().zip(&v) {
                if key.is_variance() {
                    prop_assert!(*x >= 0.0);
                }
            }
            let est = CovarianceEstimate::from_vector(&g, v, &RepairPolicy::default()).unwrap();
            for m in est.assembled.matrices() {
                prop_assert_eq!(m, &m.transpose());
                let eig = SymmetricEigen::new(m.clone()).eigenvalues;
                prop_assert!(eig.min() > 0.0);
            }
        }

        #[test]
        fn partition_designs_agree_exactly(ys in proptest::collection::vec(-5.0f64..5.0, 13)) {
            let sets: Vec<(&[usize], &[f64])> = vec![
                (&[1, 3, 5], &ys[0..3]), (&[2, 4], &ys[3..5]), (&[1, 3, 5], &ys[5..8]),
                (&[2, 4], &ys[8..10]), (&[1, 3, 5], &ys[10..13]),
            ];
            let ds = dataset(&sets);
            let part = PartitionDesign::detect(&ds).unwrap();
            let g = CovarianceGrouping::build(&ds, &GroupingSpec::PairOnly).unwrap();
            let policy = RepairPolicy::default();
            let a = estimate_componentwise(&ds, &g, &MeanModel::Linear, &zero(), &policy).unwrap();
            let b = estimate_matrixwise(&ds, &part, &MeanModel::Linear, &zero(), &policy).unwrap();
            for (x, y) in a.assembled.matrices().iter().zip(b.assembled.matrices()) {
                prop_assert!((x - y).amax() <= 1e-14);
            }
        }
    }
}
