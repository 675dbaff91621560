//! Generalized estimating equations with given working covariances.
//!
//! Solves `sum_i mu_dot_i' V_i^{-1} (Y_i - mu_i) = 0` by Fisher scoring. The
//! update only uses first derivatives, so the system matrix
//! `sum_i mu_dot_i' V_i^{-1} mu_dot_i` is symmetric positive semidefinite and a
//! linear mean is solved in a single step.

use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::dataset::LongitudinalDataset;
use crate::mean_model::{MeanModel, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeeError {
    #[error("working covariance of subject {subject} is not positive definite")]
    NotPositiveDefinite { subject: usize },
    #[error("working covariance set does not match the dataset (subject {subject})")]
    CovarianceShape { subject: usize },
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("information matrix became singular during scoring")]
    NewtonSingular { last: Vec<f64> },
    #[error("scoring did not converge within {iterations} iterations")]
    NewtonDiverged { iterations: usize, last: Vec<f64> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-subject working covariance matrices, indexed like the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet {
    matrices: Vec<DMatrix<f64>>,
}

impl CovarianceSet {
    pub fn new(matrices: Vec<DMatrix<f64>>) -> Self {
        Self { matrices }
    }

    pub fn identity(ds: &LongitudinalDataset) -> Self {
        Self::new(
            ds.subjects()
                .iter()
                .map(|s| DMatrix::identity(s.len(), s.len()))
                .collect(),
        )
    }

    pub fn get(&self, subject: usize) -> &DMatrix<f64> {
        &self.matrices[subject]
    }

    /// Matrix of the subject with identifier `id`.
    pub fn by_id<'a>(&'a self, ds: &LongitudinalDataset, id: &str) -> Option<&'a DMatrix<f64>> {
        ds.index_of(id).and_then(|i| self.matrices.get(i))
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.matrices.iter().map(|m| m * c).collect())
    }

    fn factor(&self, ds: &LongitudinalDataset) -> Result<Vec<Cholesky<f64, Dyn>>, GeeError> {
        if self.matrices.len() != ds.len() {
            return Err(GeeError::CovarianceShape {
                subject: self.matrices.len().min(ds.len()),
            });
        }
        ds.subjects()
            .iter()
            .zip(&self.matrices)
            .enumerate()
            .map(|(i, (s, v))| {
                if v.nrows() != s.len() || v.ncols() != s.len() {
                    return Err(GeeError::CovarianceShape { subject: i });
                }
                Cholesky::new(v.clone()).ok_or(GeeError::NotPositiveDefinite { subject: i })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GeeOptions {
    pub max_newton_iters: usize,
    /// Stop once the largest coefficient update is below this.
    pub beta_tol: f64,
    /// Added to the diagonal of the information matrix only when it fails to
    /// factor.
    pub ridge: f64,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            max_newton_iters: 50,
            beta_tol: 1e-10,
            ridge: 0.0,
        }
    }
}

/// Information matrix `sum mu_dot' V^-1 mu_dot` and score
/// `sum mu_dot' V^-1 (Y - mu)` at `beta`.
fn score_and_information(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    factors: &[Cholesky<f64, Dyn>],
    beta: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>), ModelError> {
    let p = ds.coefficient_count();
    let mut info = DMatrix::zeros(p, p);
    let mut score = DVector::zeros(p);
    for (s, chol) in ds.subjects().iter().zip(factors) {
        let mu = model.mean(s, beta)?;
        let jac = model.jacobian(s, beta)?;
        let weighted = chol.solve(&jac);
        info.gemm_tr(1.0, &jac, &weighted, 1.0);
        let resid = &s.responses - mu;
        score.gemv_tr(1.0, &weighted, &resid, 1.0);
    }
    Ok((symmetrize(info), score))
}

/// The estimating function `sum_i mu_dot_i' V_i^{-1} (Y_i - mu_i)` at `beta`.
pub fn estimating_function(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    cov: &CovarianceSet,
    beta: &DVector<f64>,
) -> Result<DVector<f64>, GeeError> {
    let factors = cov.factor(ds)?;
    Ok(score_and_information(ds, model, &factors, beta)?.1)
}

/// Solves the estimating equation from `beta0` by Fisher scoring.
pub fn solve_gee(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    cov: &CovarianceSet,
    beta0: &DVector<f64>,
    opts: &GeeOptions,
) -> Result<DVector<f64>, GeeError> {
    let factors = cov.factor(ds)?;
    let mut beta = beta0.clone();
    for _ in 0..opts.max_newton_iters.max(1) {
        let (info, score) = score_and_information(ds, model, &factors, &beta)?;
        let step = match factor_information(info.clone()) {
            Some(c) => c.solve(&score),
            None if opts.ridge > 0.0 => {
                let p = info.nrows();
                match factor_information(info + DMatrix::identity(p, p) * opts.ridge) {
                    Some(c) => c.solve(&score),
                    None => {
                        return Err(GeeError::NewtonSingular {
                            last: beta.as_slice().to_vec(),
                        })
                    }
                }
            }
            None => {
                return Err(GeeError::NewtonSingular {
                    last: beta.as_slice().to_vec(),
                })
            }
        };
        beta += &step;
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(GeeError::NewtonDiverged {
                iterations: opts.max_newton_iters,
                last: beta.as_slice().to_vec(),
            });
        }
        // A linear mean is solved exactly by the first step.
        if model.is_linear() || step.amax() < opts.beta_tol {
            return Ok(beta);
        }
    }
    Err(GeeError::NewtonDiverged {
        iterations: opts.max_newton_iters,
        last: beta.as_slice().to_vec(),
    })
}

/// Weighted least squares `(sum X'V^-1 X)^-1 sum X'V^-1 Y`.
pub fn blue_linear(
    ds: &LongitudinalDataset,
    cov: &CovarianceSet,
) -> Result<DVector<f64>, GeeError> {
    let factors = cov.factor(ds)?;
    let p = ds.coefficient_count();
    let mut info = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (s, chol) in ds.subjects().iter().zip(&factors) {
        let weighted = chol.solve(&s.covariates);
        info.gemm_tr(1.0, &s.covariates, &weighted, 1.0);
        rhs.gemv_tr(1.0, &weighted, &s.responses, 1.0);
    }
    factor_information(symmetrize(info))
        .map(|c| c.solve(&rhs))
        .ok_or(GeeError::SingularInformation)
}

/// Ordinary least squares: [`blue_linear`] with identity covariances.
pub fn ols_linear(ds: &LongitudinalDataset) -> Result<DVector<f64>, GeeError> {
    blue_linear(ds, &CovarianceSet::identity(ds))
}

/// `(sum mu_dot' V^-1 mu_dot)^-1` at `beta`; its diagonal square roots are
/// the model-based standard errors.
pub fn model_based_covariance(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    beta: &DVector<f64>,
    cov: &CovarianceSet,
) -> Result<DMatrix<f64>, GeeError> {
    let factors = cov.factor(ds)?;
    let (info, _) = score_and_information(ds, model, &factors, beta)?;
    let p = info.nrows();
    factor_information(info)
        .map(|c| symmetrize(c.solve(&DMatrix::identity(p, p))))
        .ok_or(GeeError::SingularInformation)
}

/// Cholesky factor of an information matrix. A pivot that is negligible
/// relative to its own diagonal entry counts as singular, which keeps the
/// test invariant under column scaling.
fn factor_information(info: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let diag = info.diagonal();
    if !diag.iter().all(|d| *d > 0.0 && d.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(info)?;
    chol.l_dirty()
        .diagonal()
        .iter()
        .zip(diag.iter())
        .all(|(l, a)| l * l > 1e-13 * a)
        .then_some(chol)
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SubjectRecord;
    use alloc::format;
    use alloc::vec;
    use proptest::prelude::*;

    pub(crate) type Subject<'a> = (&'a [usize], &'a [f64], &'a [&'a [f64]]);

    pub(crate) fn dataset(subjects: &[Subject]) -> LongitudinalDataset {
        let subjects = subjects
            .iter()
            .enumerate()
            .map(|(i, (visits, y, x))| SubjectRecord {
                id: format!("s{i}"),
                visits: visits.to_vec(),
                responses: DVector::from_column_slice(y),
                covariates: DMatrix::from_fn(x.len(), x[0].len(), |a, c| x[a][c]),
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    #[test]
    fn scalar_blue() {
        let ds = dataset(&[(&[1], &[3.0], &[&[1.0]])]);
        let cov = CovarianceSet::new(vec![DMatrix::from_element(1, 1, 2.0)]);
        assert_eq!(blue_linear(&ds, &cov).unwrap()[0], 3.0);
    }

    #[test]
    fn two_subject_hand_inversion() {
        let ds = dataset(&[
            (&[1, 2], &[1.0, 2.5], &[&[1.0, 0.5], &[1.0, -1.0]]),
            (&[1, 2], &[0.3, -0.7], &[&[1.0, 2.0], &[1.0, 1.5]]),
        ]);
        let v1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v2 = DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 3.0]);
        let inv2 = |m: &DMatrix<f64>| {
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            DMatrix::from_row_slice(2, 2, &[m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]]) / det
        };
        let mut a = DMatrix::zeros(2, 2);
        let mut r = DVector::zeros(2);
        for (s, v) in ds.subjects().iter().zip([&v1, &v2]) {
            let w = inv2(v);
            a += s.covariates.transpose() * &w * &s.covariates;
            r += s.covariates.transpose() * &w * &s.responses;
        }
        let want = inv2(&a) * r;
        let got = blue_linear(&ds, &CovarianceSet::new(vec![v1, v2])).unwrap();
        assert!((got - want).amax() < 1e-12);
    }

    #[test]
    fn ols_cases() {
        let ds = dataset(&[
            (&[1, 2], &[1.0, 4.0], &[&[1.0], &[1.0]]),
            (&[1], &[2.5], &[&[1.0]]),
        ]);
        let b = ols_linear(&ds).unwrap();
        assert!((b[0] - 2.5).abs() < 1e-15);
        assert_eq!(b, blue_linear(&ds, &CovarianceSet::identity(&ds)).unwrap());

        // Stacked least squares through the pseudoinverse.
        let ds = dataset(&[
            (&[1, 2], &[1.0, 2.0], &[&[1.0, 0.3], &[1.0, 1.1]]),
            (&[2, 3], &[0.5, 3.0], &[&[1.0, -0.4], &[1.0, 2.2]]),
            (&[1], &[1.7], &[&[1.0, 0.9]]),
        ]);
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, 1.1, 1.0, -0.4, 1.0, 2.2, 1.0, 0.9]);
        let y = DVector::from_column_slice(&[1.0, 2.0, 0.5, 3.0, 1.7]);
        let want = x.pseudo_inverse(1e-14).unwrap() * y;
        assert!((ols_linear(&ds).unwrap() - want).amax() < 1e-12);
    }

    #[test]
    fn singular_information() {
        let ds = dataset(&[(&[1], &[1.0], &[&[1.0, 2.0]])]);
        assert_eq!(ols_linear(&ds), Err(GeeError::SingularInformation));
        let beta0 = DVector::zeros(2);
        assert!(matches!(
            solve_gee(
                &ds,
                &MeanModel::Linear,
                &CovarianceSet::identity(&ds),
                &beta0,
                &GeeOptions::default()
            ),
            Err(GeeError::NewtonSingular { .. })
        ));
        let ridged = GeeOptions {
            ridge: 1e-6,
            ..GeeOptions::default()
        };
        assert!(solve_gee(
            &ds,
            &MeanModel::Linear,
            &CovarianceSet::identity(&ds),
            &beta0,
            &ridged
        )
        .is_ok());
    }

    #[test]
    fn indefinite_working_covariance() {
        let ds = dataset(&[(&[1, 2], &[1.0, 2.0], &[&[1.0], &[1.0]])]);
        let cov = CovarianceSet::new(vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])]);
        assert_eq!(
            blue_linear(&ds, &cov),
            Err(GeeError::NotPositiveDefinite { subject: 0 })
        );
    }

    #[test]
    fn classical_ols_covariance() {
        let ds = dataset(&[
            (&[1, 2], &[0.0, 0.0], &[&[1.0, 0.5], &[1.0, 1.5]]),
            (&[1, 2], &[0.0, 0.0], &[&[1.0, -0.5], &[1.0, 2.0]]),
            (&[1, 2], &[0.0, 0.0], &[&[1.0, 0.1], &[1.0, -1.0]]),
        ]);
        let sigma2 = 2.5;
        let cov = CovarianceSet::identity(&ds).scaled(sigma2);
        let got =
            model_based_covariance(&ds, &MeanModel::Linear, &DVector::zeros(2), &cov).unwrap();
        let mut xtx = DMatrix::zeros(2, 2);
        for s in ds.subjects() {
            xtx += s.covariates.transpose() * &s.covariates;
        }
        let want = xtx.try_inverse().unwrap() * sigma2;
        assert!((got - want).amax() < 1e-12);
    }

    fn random_case(seed: &[f64], n: usize, p: usize) -> (LongitudinalDataset, CovarianceSet) {
        let mut k = 0;
        let mut next = || {
            k += 1;
            seed[k % seed.len()] * (1.0 + libm::sin(k as f64 * 0.37))
        };
        let mut subjects = Vec::new();
        let mut covs = Vec::new();
        for i in 0..n {
            let d = 1 + i % 3;
            let x = DMatrix::from_fn(d, p, |_, c| if c == 0 { 1.0 } else { next() });
            let y = DVector::from_fn(d, |_, _| next());
            let a = DMatrix::from_fn(d, d, |_, _| next());
            covs.push(&a * a.transpose() + DMatrix::identity(d, d) * 0.5);
            subjects.push(SubjectRecord {
                id: format!("s{i}"),
                visits: (1..=d).collect(),
                responses: y,
                covariates: x,
            });
        }
        (
            LongitudinalDataset::new(subjects).unwrap(),
            CovarianceSet::new(covs),
        )
    }

    proptest! {
        #[test]
        fn linear_gee_equals_blue(
            seed in proptest::collection::vec(-2.0f64..2.0, 7..13),
            start in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let (ds, cov) = random_case(&seed, 9, 3);
            let Ok(blue) = blue_linear(&ds, &cov) else { return Ok(()) };
            let gee = solve_gee(&ds, &MeanModel::Linear, &cov, &DVector::from_vec(start), &GeeOptions::default()).unwrap();
            prop_assert!((gee - &blue).amax() <= 1e-12 * blue.amax().max(1.0));
        }

        #[test]
        fn linear_scale_and_weight_invariance(
            seed in proptest::collection::vec(-2.0f64..2.0, 7..13),
            c in 0.1f64..10.0,
        ) {
            let (ds, cov) = random_case(&seed, 8, 2);
            let Ok(blue) = blue_linear(&ds, &cov) else { return Ok(()) };
            let scaled_y = blue_linear(&ds.scaled_responses(c), &cov).unwrap();
            prop_assert!((scaled_y - &blue * c).amax() <= 1e-12 * blue.amax().max(1.0) * c);
            let ols = ols_linear(&ds).unwrap();
            let ols_scaled = ols_linear(&ds.scaled_responses(c)).unwrap();
            prop_assert!((ols_scaled - &ols * c).amax() <= 1e-12 * ols.amax().max(1.0) * c);
            let reweighted = blue_linear(&ds, &cov.scaled(c)).unwrap();
            prop_assert!((reweighted - &blue).amax() <= 1e-14 * blue.amax().max(1.0));
        }

        #[test]
        fn model_based_covariance_is_spd(seed in proptest::collection::vec(-2.0f64..2.0, 7..13)) {
            let (ds, cov) = random_case(&seed, 10, 2);
            if let Ok(m) = model_based_covariance(&ds, &MeanModel::Linear, &DVector::zeros(2), &cov) {
                prop_assert_eq!(&m, &m.transpose());
                let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
                prop_assert!(eig.iter().all(|&l| l >= 0.0));
            }
        }
    }
}
