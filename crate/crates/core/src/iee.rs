//! Iterative estimating equations.
//!
//! Starting from identity working covariances, each outer step solves the
//! estimating equation for `beta` given the current covariances and then
//! re-estimates the covariance classes by moments given the new `beta`.
//! Iteration stops once
//! `max|beta(m) - beta(m-1)| + max|v(m) - v(m-1)| < conv_tol`.
//!
//! Trace entry `m` holds `beta(m) = beta(v(m-1))` and `v(m) = v(beta(m))`;
//! entry 0 is the start (`beta = 0`, identity covariances). An outer step is
//! one `(beta, v)` pair.

use alloc::boxed::Box;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::covariance::{estimate_componentwise, CovarianceEstimate, MomError, RepairPolicy};
use crate::dataset::LongitudinalDataset;
use crate::gee::{model_based_covariance, solve_gee, CovarianceSet, GeeError, GeeOptions};
use crate::grouping::{ClassKey, CovarianceGrouping};
use crate::mean_model::MeanModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IeeError {
    #[error("no convergence within {} outer steps", .0.outer_steps)]
    NotConverged(Box<FitResult>),
    #[error("outer step {iteration}: {source}")]
    Gee { iteration: usize, source: GeeError },
    #[error("outer step {iteration}: {source}")]
    Mom { iteration: usize, source: MomError },
    #[error("invalid options: {0}")]
    InvalidOptions(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct IeeOptions {
    pub conv_tol: f64,
    pub max_outer_iters: usize,
    pub one_step_only: bool,
    pub gee: GeeOptions,
    pub repair: RepairPolicy,
}

impl Default for IeeOptions {
    fn default() -> Self {
        Self {
            conv_tol: 1e-4,
            max_outer_iters: 100,
            one_step_only: false,
            gee: GeeOptions::default(),
            repair: RepairPolicy::default(),
        }
    }
}

impl IeeOptions {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), IeeError> {
        if !(self.conv_tol > 0.0) {
            return Err(IeeError::InvalidOptions("conv_tol must be positive"));
        }
        if self.max_outer_iters == 0 {
            return Err(IeeError::InvalidOptions("max_outer_iters must be >= 1"));
        }
        if self.gee.max_newton_iters == 0 || !(self.gee.beta_tol > 0.0) || !(self.gee.ridge >= 0.0)
        {
            return Err(IeeError::InvalidOptions("invalid scoring options"));
        }
        self.repair
            .validate()
            .map_err(|_| IeeError::InvalidOptions("pd_floor must lie in [0, 1)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceEntry {
    pub iteration: usize,
    pub beta: Vec<f64>,
    pub v: Vec<f64>,
    /// Convergence criterion against the previous entry.
    pub criterion: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FitKind {
    Iterated,
    OneStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kind: FitKind,
    pub beta_hat: DVector<f64>,
    pub keys: Vec<ClassKey>,
    /// `n(j, k, l)` aligned with `keys`.
    pub counts: Vec<usize>,
    pub v_hat: Vec<f64>,
    pub covariance_set: CovarianceSet,
    /// Model-based covariance of `beta_hat`.
    pub beta_cov: DMatrix<f64>,
    pub trace: Vec<TraceEntry>,
    /// Outer steps to convergence; `None` for a one-step fit or when the
    /// budget ran out.
    pub steps_to_converge: Option<usize>,
    pub outer_steps: usize,
    pub rate_estimate: Option<f64>,
    /// Subjects whose final covariance matrix needed a definiteness repair.
    pub repaired_subjects: usize,
}

impl FitResult {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.beta_cov
            .diagonal()
            .iter()
            .map(|v| libm::sqrt(*v))
            .collect()
    }

    pub fn converged(&self) -> bool {
        self.steps_to_converge.is_some()
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One outer step: `beta = beta(V)` then `v = v(beta)`.
pub fn outer_step(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    grouping: &CovarianceGrouping,
    cov: &CovarianceSet,
    beta_start: &DVector<f64>,
    opts: &IeeOptions,
    iteration: usize,
) -> Result<(DVector<f64>, CovarianceEstimate), IeeError> {
    // Linear means are solved exactly from any start; a fixed zero start
    // makes the first step coincide with ordinary least squares bit for bit.
    let start = if model.is_linear() {
        DVector::zeros(beta_start.len())
    } else {
        beta_start.clone()
    };
    let beta = solve_gee(ds, model, cov, &start, &opts.gee)
        .map_err(|source| IeeError::Gee { iteration, source })?;
    let est = estimate_componentwise(ds, grouping, model, &beta, &opts.repair)
        .map_err(|source| IeeError::Mom { iteration, source })?;
    Ok((beta, est))
}

struct Driver<'a> {
    ds: &'a LongitudinalDataset,
    model: &'a MeanModel,
    grouping: &'a CovarianceGrouping,
    opts: &'a IeeOptions,
}

impl Driver<'_> {
    fn start(&self) -> Result<(DVector<f64>, CovarianceEstimate), IeeError> {
        self.opts.validate()?;
        let v0 = self.grouping.identity_vector();
        let est = CovarianceEstimate::from_vector(self.grouping, v0, &self.opts.repair).map_err(
            |source| IeeError::Mom {
                iteration: 0,
                source,
            },
        )?;
        self.grouping
            .covers(self.ds)
            .map_err(|(subject, j, k)| IeeError::Mom {
                iteration: 0,
                source: MomError::MissingGroup { subject, j, k },
            })?;
        Ok((DVector::zeros(self.ds.coefficient_count()), est))
    }

    fn finish(
        &self,
        kind: FitKind,
        beta: DVector<f64>,
        est: CovarianceEstimate,
        trace: Vec<TraceEntry>,
        converged: bool,
    ) -> Result<FitResult, IeeError> {
        let outer_steps = trace.len() - 1;
        let beta_cov = model_based_covariance(self.ds, self.model, &beta, &est.assembled).map_err(
            |source| IeeError::Gee {
                iteration: outer_steps,
                source,
            },
        )?;
        Ok(FitResult {
            kind,
            repaired_subjects: est.repaired.iter().filter(|r| **r).count(),
            beta_hat: beta,
            keys: est.keys,
            counts: est.counts,
            v_hat: est.v,
            covariance_set: est.assembled,
            beta_cov,
            rate_estimate: convergence_rate_diagnostic(&trace),
            trace,
            steps_to_converge: converged.then_some(outer_steps),
            outer_steps,
        })
    }
}

/// Runs the iteration to convergence. Exhausting the budget returns
/// [`IeeError::NotConverged`] carrying the partial fit and its trace.
pub fn fit_iee(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    grouping: &CovarianceGrouping,
    opts: &IeeOptions,
) -> Result<FitResult, IeeError> {
    if opts.one_step_only {
        return one_step_fit(ds, model, grouping, opts);
    }
    let driver = Driver {
        ds,
        model,
        grouping,
        opts,
    };
    let (mut beta, mut est) = driver.start()?;
    let mut trace = alloc::vec![TraceEntry {
        iteration: 0,
        beta: beta.as_slice().to_vec(),
        v: est.v.clone(),
        criterion: None,
    }];
    for m in 1..=opts.max_outer_iters {
        let (next_beta, next_est) =
            outer_step(ds, model, grouping, &est.assembled, &beta, opts, m)?;
        let criterion =
            max_abs_diff(next_beta.as_slice(), beta.as_slice()) + max_abs_diff(&next_est.v, &est.v);
        trace.push(TraceEntry {
            iteration: m,
            beta: next_beta.as_slice().to_vec(),
            v: next_est.v.clone(),
            criterion: Some(criterion),
        });
        beta = next_beta;
        est = next_est;
        if criterion < opts.conv_tol {
            return driver.finish(FitKind::Iterated, beta, est, trace, true);
        }
    }
    let partial = driver.finish(FitKind::Iterated, beta, est, trace, false)?;
    Err(IeeError::NotConverged(Box::new(partial)))
}

/// Identity-weight fit, one covariance update, one re-fit. The returned
/// covariances are the ones used for the re-fit.
pub fn one_step_fit(
    ds: &LongitudinalDataset,
    model: &MeanModel,
    grouping: &CovarianceGrouping,
    opts: &IeeOptions,
) -> Result<FitResult, IeeError> {
    let driver = Driver {
        ds,
        model,
        grouping,
        opts,
    };
    let (beta0, est0) = driver.start()?;
    let (beta1, est1) = outer_step(ds, model, grouping, &est0.assembled, &beta0, opts, 1)?;
    let start = if model.is_linear() {
        DVector::zeros(beta1.len())
    } else {
        beta1.clone()
    };
    let beta2 = solve_gee(ds, model, &est1.assembled, &start, &opts.gee).map_err(|source| {
        IeeError::Gee {
            iteration: 2,
            source,
        }
    })?;
    let trace = alloc::vec![
        TraceEntry {
            iteration: 0,
            beta: beta0.as_slice().to_vec(),
            v: est0.v.clone(),
            criterion: None,
        },
        TraceEntry {
            iteration: 1,
            beta: beta1.as_slice().to_vec(),
            v: est1.v.clone(),
            criterion: Some(
                max_abs_diff(beta1.as_slice(), beta0.as_slice()) + max_abs_diff(&est1.v, &est0.v)
            ),
        },
        TraceEntry {
            iteration: 2,
            beta: beta2.as_slice().to_vec(),
            v: est1.v.clone(),
            criterion: Some(max_abs_diff(beta2.as_slice(), beta1.as_slice())),
        },
    ];
    driver.finish(FitKind::OneStep, beta2, est1, trace, false)
}

/// Geometric mean of the last (up to three) ratios of successive
/// coefficient changes `|beta(m+1) - beta(m)|_inf / |beta(m) - beta(m-1)|_inf`,
/// over outer steps `m >= 1`. `None` with fewer than four outer steps or when
/// no ratio has a nonzero denominator.
pub fn convergence_rate_diagnostic(trace: &[TraceEntry]) -> Option<f64> {
    let betas: Vec<&[f64]> = trace
        .iter()
        .filter(|e| e.iteration >= 1)
        .map(|e| e.beta.as_slice())
        .collect();
    if betas.len() < 4 {
        return None;
    }
    let diffs: Vec<f64> = betas.windows(2).map(|w| max_abs_diff(w[1], w[0])).collect();
    let ratios: Vec<f64> = diffs
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    let last = &ratios[ratios.len().saturating_sub(3)..];
    if last.is_empty() {
        return None;
    }
    if last.contains(&0.0) {
        return Some(0.0);
    }
    let mean_log = last.iter().map(|r| libm::log(*r)).sum::<f64>() / last.len() as f64;
    Some(libm::exp(mean_log))
}

/// Successive coefficient-change norms `|beta(m+1) - beta(m)|_inf`, `m >= 1`.
pub fn beta_step_norms(trace: &[TraceEntry]) -> Vec<f64> {
    let betas: Vec<&[f64]> = trace
        .iter()
        .filter(|e| e.iteration >= 1)
        .map(|e| e.beta.as_slice())
        .collect();
    betas.windows(2).map(|w| max_abs_diff(w[1], w[0])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SubjectRecord;
    use crate::gee::ols_linear;
    use crate::grouping::GroupingSpec;
    use alloc::format;
    use alloc::vec;

    fn entry(iteration: usize, beta: Vec<f64>) -> TraceEntry {
        TraceEntry {
            iteration,
            beta,
            v: Vec::new(),
            criterion: None,
        }
    }

    #[test]
    fn geometric_rate() {
        let mut trace = vec![entry(0, vec![0.0, 0.0])];
        for m in 1..=8 {
            let e = libm::pow(0.3, m as f64);
            trace.push(entry(m, vec![1.0 + e, 2.0 - 0.5 * e]));
        }
        let rate = convergence_rate_diagnostic(&trace).unwrap();
        assert!((rate - 0.3).abs() < 1e-12, "{rate}");
    }

    #[test]
    fn short_or_flat_traces() {
        let two = vec![
            entry(0, vec![0.0]),
            entry(1, vec![1.0]),
            entry(2, vec![1.5]),
        ];
        assert_eq!(convergence_rate_diagnostic(&two), None);
        let flat: Vec<_> = (0..6).map(|m| entry(m, vec![1.0])).collect();
        assert_eq!(convergence_rate_diagnostic(&flat), None);
    }

    fn toy() -> (LongitudinalDataset, CovarianceGrouping) {
        let ys: [[f64; 3]; 6] = [
            [1.0, 2.1, 2.9],
            [0.2, 0.8, 1.9],
            [2.2, 3.5, 3.7],
            [-0.5, 0.3, 1.2],
            [1.4, 1.9, 3.3],
            [0.9, 2.4, 2.2],
        ];
        let subjects = ys
            .iter()
            .enumerate()
            .map(|(i, y)| SubjectRecord {
                id: format!("s{i}"),
                visits: vec![1, 2, 3],
                responses: DVector::from_column_slice(y),
                covariates: DMatrix::from_fn(3, 2, |a, c| {
                    if c == 0 {
                        1.0
                    } else {
                        a as f64 + 0.1 * i as f64
                    }
                }),
            })
            .collect();
        let ds = LongitudinalDataset::new(subjects).unwrap();
        let g = CovarianceGrouping::build(&ds, &GroupingSpec::PairOnly).unwrap();
        (ds, g)
    }

    #[test]
    fn first_step_is_ols_and_one_step_is_prefix() {
        let (ds, g) = toy();
        let opts = IeeOptions {
            conv_tol: 1e-12,
            ..IeeOptions::default()
        };
        let fit = fit_iee(&ds, &MeanModel::Linear, &g, &opts).unwrap();
        assert_eq!(fit.trace[1].beta, ols_linear(&ds).unwrap().as_slice());
        assert_eq!(fit.trace.len(), fit.outer_steps + 1);
        assert!(fit.trace.last().unwrap().criterion.unwrap() < opts.conv_tol);
        let one = one_step_fit(&ds, &MeanModel::Linear, &g, &opts).unwrap();
        assert_eq!(one.kind, FitKind::OneStep);
        assert_eq!(one.beta_hat.as_slice(), fit.trace[2].beta.as_slice());
        assert_eq!(one.trace.len(), 3);
    }

    #[test]
    fn budget_exhaustion_is_explicit() {
        let (ds, g) = toy();
        let opts = IeeOptions {
            conv_tol: 1e-300,
            max_outer_iters: 3,
            ..IeeOptions::default()
        };
        match fit_iee(&ds, &MeanModel::Linear, &g, &opts) {
            Err(IeeError::NotConverged(partial)) => {
                assert_eq!(partial.trace.len(), 4);
                assert_eq!(partial.steps_to_converge, None);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_options() {
        let (ds, g) = toy();
        let bad = IeeOptions {
            conv_tol: 0.0,
            ..IeeOptions::default()
        };
        assert!(matches!(
            fit_iee(&ds, &MeanModel::Linear, &g, &bad),
            Err(IeeError::InvalidOptions(_))
        ));
    }

    #[test]
    fn fixed_point_and_determinism() {
        let (ds, g) = toy();
        let opts = IeeOptions::default();
        let fit = fit_iee(&ds, &MeanModel::Linear, &g, &opts).unwrap();
        let again = fit_iee(&ds, &MeanModel::Linear, &g, &opts).unwrap();
        assert_eq!(fit, again);
        let (beta, est) = outer_step(
            &ds,
            &MeanModel::Linear,
            &g,
            &fit.covariance_set,
            &fit.beta_hat,
            &opts,
            0,
        )
        .unwrap();
        assert!(max_abs_diff(beta.as_slice(), fit.beta_hat.as_slice()) < opts.conv_tol);
        assert!(max_abs_diff(&est.v, &fit.v_hat) < opts.conv_tol);
    }

    #[test]
    fn scale_equivariance() {
        let (ds, g) = toy();
        let opts = IeeOptions {
            conv_tol: 1e-300,
            max_outer_iters: 6,
            ..IeeOptions::default()
        };
        let trace = |ds: &LongitudinalDataset| match fit_iee(ds, &MeanModel::Linear, &g, &opts) {
            Err(IeeError::NotConverged(p)) => p,
            other => panic!("{other:?}"),
        };
        let base = trace(&ds);
        for c in [2.0, -0.5, 3.7] {
            let scaled = trace(&ds.scaled_responses(c));
            for (a, b) in base.trace.iter().zip(&scaled.trace).skip(1) {
                for (x, y) in a.beta.iter().zip(&b.beta) {
                    assert!((y - c * x).abs() <= 1e-9 * (1.0 + x.abs()), "beta {x} {y}");
                }
                for (x, y) in a.v.iter().zip(&b.v) {
                    assert!((y - c * c * x).abs() <= 1e-9 * (1.0 + x.abs()), "v {x} {y}");
                }
            }
            let signs = |b: &DVector<f64>| b.iter().map(|x| (x * c).signum()).collect::<Vec<_>>();
            assert_eq!(
                signs(&base.beta_hat),
                scaled
                    .beta_hat
                    .iter()
                    .map(|x| x.signum())
                    .collect::<Vec<_>>()
            );
        }
        // Powers of two scale exactly.
        let doubled = trace(&ds.scaled_responses(2.0));
        for (a, b) in base.trace.iter().zip(&doubled.trace) {
            assert!(a.beta.iter().zip(&b.beta).all(|(x, y)| *y == 2.0 * x));
            assert!(a
                .v
                .iter()
                .zip(&b.v)
                .all(|(x, y)| a.iteration == 0 || *y == 4.0 * x));
        }
    }
}
