//! Mean functions `g_j(X_i, beta)` and their derivatives in `beta`.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataset::SubjectRecord;
use crate::quadrature::GaussHermite;

pub const DEFAULT_QUADRATURE_ORDER: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("subject `{subject}`, visit {visit}: non-finite mean or derivative")]
    NonFinite {
        subject: alloc::string::String,
        visit: usize,
    },
    #[error("coefficient vector has length {found}, model needs {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid model parameter: {0}")]
    InvalidParameter(&'static str),
}

/// A user-supplied mean family.
pub trait MeanFunction: Send + Sync {
    /// `g_j(X_i, beta)` for `j = subject.visits[row]`.
    fn mean(&self, subject: &SubjectRecord, row: usize, beta: &DVector<f64>) -> f64;

    /// `d g_j / d beta`, when available in closed form.
    fn gradient(
        &self,
        _subject: &SubjectRecord,
        _row: usize,
        _beta: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        None
    }
}

pub type VisitMean = Box<dyn Fn(&SubjectRecord, &DVector<f64>) -> f64 + Send + Sync>;
pub type VisitGradient = Box<dyn Fn(&SubjectRecord, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// One evaluator per visit index; `means[j - 1]` is `g_j`.
pub struct PerVisitMean {
    means: Vec<VisitMean>,
    gradients: Option<Vec<VisitGradient>>,
}

impl PerVisitMean {
    pub fn new(means: Vec<VisitMean>) -> Self {
        Self {
            means,
            gradients: None,
        }
    }

    pub fn with_gradients(mut self, gradients: Vec<VisitGradient>) -> Self {
        assert_eq!(gradients.len(), self.means.len());
        self.gradients = Some(gradients);
        self
    }
}

impl MeanFunction for PerVisitMean {
    fn mean(&self, subject: &SubjectRecord, row: usize, beta: &DVector<f64>) -> f64 {
        (self.means[subject.visits[row] - 1])(subject, beta)
    }

    fn gradient(
        &self,
        subject: &SubjectRecord,
        row: usize,
        beta: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let g = self.gradients.as_ref()?;
        Some((g[subject.visits[row] - 1])(subject, beta))
    }
}

/// Marginal mean of a logistic model with a normal random intercept:
/// `E h(x_ij' beta + sigma Z)`, `h` the logistic function.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRandomIntercept {
    sigma: f64,
    rule: GaussHermite,
}

impl LogisticRandomIntercept {
    pub fn new(sigma: f64, quadrature_order: usize) -> Result<Self, ModelError> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(ModelError::InvalidParameter(
                "sigma must be finite and >= 0",
            ));
        }
        if quadrature_order == 0 {
            return Err(ModelError::InvalidParameter(
                "quadrature order must be >= 1",
            ));
        }
        Ok(Self {
            sigma,
            rule: GaussHermite::new(quadrature_order),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn quadrature_order(&self) -> usize {
        self.rule.order()
    }

    /// Marginal mean at linear predictor `eta`.
    pub fn mean_at(&self, eta: f64) -> f64 {
        if self.sigma == 0.0 {
            return logistic(eta);
        }
        self.rule.expect(|z| logistic(eta + self.sigma * z))
    }

    /// Derivative of [`Self::mean_at`] in `eta`.
    pub fn slope_at(&self, eta: f64) -> f64 {
        if self.sigma == 0.0 {
            return logistic_slope(eta);
        }
        self.rule.expect(|z| logistic_slope(eta + self.sigma * z))
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn logistic_slope(x: f64) -> f64 {
    let h = logistic(x);
    h * (1.0 - h)
}

#[derive(Clone)]
pub enum MeanModel {
    /// `mu_i = X_i beta`.
    Linear,
    LogisticRandomIntercept(LogisticRandomIntercept),
    Custom(Arc<dyn MeanFunction>),
}

impl fmt::Debug for MeanModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear => f.write_str("Linear"),
            Self::LogisticRandomIntercept(m) => {
                f.debug_tuple("LogisticRandomIntercept").field(m).finish()
            }
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl MeanModel {
    pub fn logistic_random_intercept(sigma: f64) -> Result<Self, ModelError> {
        LogisticRandomIntercept::new(sigma, DEFAULT_QUADRATURE_ORDER)
            .map(Self::LogisticRandomIntercept)
    }

    pub fn custom(f: impl MeanFunction + 'static) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Self::Linear)
    }

    /// `mu_i = (g_j(X_i, beta))_{j in J_i}`.
    pub fn mean(
        &self,
        subject: &SubjectRecord,
        beta: &DVector<f64>,
    ) -> Result<DVector<f64>, ModelError> {
        check_dim(subject, beta)?;
        let mu = match self {
            Self::Linear => &subject.covariates * beta,
            Self::LogisticRandomIntercept(m) => {
                let eta = &subject.covariates * beta;
                eta.map(|e| m.mean_at(e))
            }
            Self::Custom(f) => DVector::from_fn(subject.len(), |row, _| f.mean(subject, row, beta)),
        };
        finite(subject, mu.as_slice())?;
        Ok(mu)
    }

    /// `|J_i| x p` matrix of `d mu_ij / d beta_l`.
    pub fn jacobian(
        &self,
        subject: &SubjectRecord,
        beta: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        check_dim(subject, beta)?;
        let x = &subject.covariates;
        let jac = match self {
            Self::Linear => x.clone(),
            Self::LogisticRandomIntercept(m) => {
                let eta = x * beta;
                let mut jac = x.clone();
                for (row, e) in eta.iter().enumerate() {
                    let slope = m.slope_at(*e);
                    jac.row_mut(row).scale_mut(slope);
                }
                jac
            }
            Self::Custom(f) => {
                let p = beta.len();
                let mut jac = DMatrix::zeros(subject.len(), p);
                for row in 0..subject.len() {
                    let grad = match f.gradient(subject, row, beta) {
                        Some(g) => g,
                        None => central_difference(|b| f.mean(subject, row, b), beta),
                    };
                    jac.row_mut(row).copy_from(&grad.transpose());
                }
                jac
            }
        };
        finite(subject, jac.as_slice())?;
        Ok(jac)
    }
}

/// Central-difference gradient with step `eps^(1/3) * max(1, |beta_l|)`.
pub fn central_difference(
    mut f: impl FnMut(&DVector<f64>) -> f64,
    beta: &DVector<f64>,
) -> DVector<f64> {
    let base = libm::cbrt(f64::EPSILON);
    let mut probe = beta.clone();
    DVector::from_fn(beta.len(), |l, _| {
        let h = base * beta[l].abs().max(1.0);
        probe[l] = beta[l] + h;
        let up = f(&probe);
        probe[l] = beta[l] - h;
        let down = f(&probe);
        probe[l] = beta[l];
        (up - down) / (2.0 * h)
    })
}

fn check_dim(subject: &SubjectRecord, beta: &DVector<f64>) -> Result<(), ModelError> {
    let p = subject.covariates.ncols();
    if beta.len() != p {
        return Err(ModelError::Dimension {
            expected: p,
            found: beta.len(),
        });
    }
    Ok(())
}

fn finite(subject: &SubjectRecord, values: &[f64]) -> Result<(), ModelError> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => Err(ModelError::NonFinite {
            subject: subject.id.clone(),
            visit: subject.visits[pos % subject.len()],
        }),
    }
}
