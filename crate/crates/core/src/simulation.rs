//! Seeded simulation designs and a Monte Carlo harness.
//!
//! Covariates are drawn once per master seed and held fixed; replication `r`
//! redraws only the noise, from its own stream. Every estimator sees the same
//! data within a replication.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Exp1, StandardNormal};
use thiserror::Error;

use crate::dataset::{DatasetError, LongitudinalDataset, SubjectRecord};
use crate::gee::{ols_linear, symmetrize, CovarianceSet, GeeError};
use crate::grouping::{CovarianceGrouping, GroupingError, GroupingSpec};
use crate::iee::{fit_iee, one_step_fit, IeeError, IeeOptions};
use crate::mean_model::MeanModel;
use crate::rng::{child_rng, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(&'static str),
    #[error("replication count must be at least 1")]
    NoReplications,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
}

/// Visit layout and covariate law.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Design {
    /// Leading `ceil(fraction_135 * n)` subjects visit at {1, 3, 5}, the rest
    /// at {2, 4}. Covariates `x_ij ~ N(0, 1)`.
    Example2Split {
        #[cfg_attr(feature = "serde", serde(default = "default_fraction"))]
        fraction_135: f64,
    },
    /// Leading `ceil(n / 2)` subjects at {1, 2}, the rest at {1, 3}.
    /// Covariates `x_ij ~ N(0, 1)`.
    Example5Baseline,
    /// Two visits per subject, subject-level `x_i ~ Uniform[0, 1]`,
    /// independent errors with visit-specific scales.
    SmallHetero,
}

#[cfg(feature = "serde")]
fn default_fraction() -> f64 {
    0.4
}

/// Distribution of the noise components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "u8", into = "u8"))]
pub enum NoiseScenario {
    /// Normal random effect, AR(1) serial process.
    NormalAr1,
    /// Centered exponential random effect, AR(1) serial process.
    ExponentialAr1,
    /// Centered exponential random effect, MA(1) serial process.
    ExponentialMa1,
}

impl TryFrom<u8> for NoiseScenario {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Self::NormalAr1),
            2 => Ok(Self::ExponentialAr1),
            3 => Ok(Self::ExponentialMa1),
            _ => Err(format!("scenario must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<NoiseScenario> for u8 {
    fn from(s: NoiseScenario) -> u8 {
        match s {
            NoiseScenario::NormalAr1 => 1,
            NoiseScenario::ExponentialAr1 => 2,
            NoiseScenario::ExponentialMa1 => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged, deny_unknown_fields))]
pub enum CaseParams {
    Correlated {
        sigma_u2: f64,
        sigma_w2: f64,
        sigma_e2: f64,
        phi: f64,
    },
    Heteroscedastic {
        sigma_1: f64,
        sigma_2: f64,
    },
}

impl CaseParams {
    pub const CASE_1: Self = Self::Correlated {
        sigma_u2: 1.0,
        sigma_w2: 9.0,
        sigma_e2: 1.0,
        phi: 0.9,
    };
    pub const CASE_2: Self = Self::Correlated {
        sigma_u2: 9.0,
        sigma_w2: 25.0,
        sigma_e2: 1.0,
        phi: 0.99,
    };
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ScenarioSpec {
    pub design: Design,
    #[cfg_attr(feature = "serde", serde(default = "default_scenario"))]
    pub scenario: NoiseScenario,
    pub case_params: CaseParams,
    pub beta_true: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    /// MA(1) coefficient for the third scenario.
    #[cfg_attr(feature = "serde", serde(default = "default_theta"))]
    pub ma_theta: f64,
}

#[cfg(feature = "serde")]
fn default_scenario() -> NoiseScenario {
    NoiseScenario::NormalAr1
}

#[cfg(feature = "serde")]
fn default_theta() -> f64 {
    1.0
}

impl ScenarioSpec {
    /// Unbalanced AR(1) study: `n = 100`, `beta = (0.5, 1.0)`.
    pub fn example2(scenario: NoiseScenario, case_params: CaseParams, seed: u64) -> Self {
        Self {
            design: Design::Example2Split { fraction_135: 0.4 },
            scenario,
            case_params,
            beta_true: alloc::vec![0.5, 1.0],
            n: 100,
            seed,
            ma_theta: 1.0,
        }
    }

    /// Small heteroscedastic study: `n = 10`, `beta = (0.2, 0.1)`,
    /// `sigma = (1, 4)`.
    pub fn small_hetero(seed: u64) -> Self {
        Self {
            design: Design::SmallHetero,
            scenario: NoiseScenario::NormalAr1,
            case_params: CaseParams::Heteroscedastic {
                sigma_1: 1.0,
                sigma_2: 4.0,
            },
            beta_true: alloc::vec![0.2, 0.1],
            n: 10,
            seed,
            ma_theta: 1.0,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = SimError::InvalidSpec;
        if self.n == 0 {
            return Err(bad("n must be at least 1"));
        }
        if self.beta_true.len() != 2 || self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(bad("beta_true must hold two finite values"));
        }
        if !self.ma_theta.is_finite() {
            return Err(bad("ma_theta must be finite"));
        }
        let ok_var = |v: f64| v.is_finite() && v >= 0.0;
        match (self.design, self.case_params) {
            (Design::SmallHetero, CaseParams::Heteroscedastic { sigma_1, sigma_2 }) => {
                if !ok_var(sigma_1) || !ok_var(sigma_2) {
                    return Err(bad("sigma_1 and sigma_2 must be finite and nonnegative"));
                }
            }
            (Design::SmallHetero, _) => {
                return Err(bad("small_hetero design takes sigma_1 and sigma_2"))
            }
            (_, CaseParams::Heteroscedastic { .. }) => {
                return Err(bad("sigma_1/sigma_2 apply only to the small_hetero design"))
            }
            (
                design,
                CaseParams::Correlated {
                    sigma_u2,
                    sigma_w2,
                    sigma_e2,
                    phi,
                },
            ) => {
                if !(ok_var(sigma_u2) && ok_var(sigma_w2) && ok_var(sigma_e2)) {
                    return Err(bad("variances must be finite and nonnegative"));
                }
                if !(phi.abs() < 1.0) {
                    return Err(bad("phi must satisfy |phi| < 1"));
                }
                if let Design::Example2Split { fraction_135 } = design {
                    if !(0.0..=1.0).contains(&fraction_135) {
                        return Err(bad("fraction_135 must lie in [0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Serial correlation at lag `h`.
    fn serial_correlation(&self, h: usize) -> f64 {
        let CaseParams::Correlated { phi, .. } = self.case_params else {
            return if h == 0 { 1.0 } else { 0.0 };
        };
        match (self.scenario, h) {
            (_, 0) => 1.0,
            (NoiseScenario::ExponentialMa1, 1) => {
                self.ma_theta / (1.0 + self.ma_theta * self.ma_theta)
            }
            (NoiseScenario::ExponentialMa1, _) => 0.0,
            _ => libm::pow(phi, h as f64),
        }
    }

    /// True `Cov(Y_ij, Y_ik)` for visits `j`, `k`.
    pub fn true_covariance(&self, j: usize, k: usize) -> f64 {
        match self.case_params {
            CaseParams::Correlated {
                sigma_u2,
                sigma_w2,
                sigma_e2,
                ..
            } => {
                let h = j.abs_diff(k);
                sigma_u2
                    + sigma_w2 * self.serial_correlation(h)
                    + if h == 0 { sigma_e2 } else { 0.0 }
            }
            CaseParams::Heteroscedastic { sigma_1, sigma_2 } => match (j, k) {
                (1, 1) => sigma_1 * sigma_1,
                (2, 2) => sigma_2 * sigma_2,
                _ => 0.0,
            },
        }
    }

    fn visit_set(&self, i: usize) -> &'static [usize] {
        match self.design {
            Design::Example2Split { fraction_135 } => {
                let lead = libm::ceil(fraction_135 * self.n as f64) as usize;
                if i < lead {
                    &[1, 3, 5]
                } else {
                    &[2, 4]
                }
            }
            Design::Example5Baseline => {
                if i < self.n.div_ceil(2) {
                    &[1, 2]
                } else {
                    &[1, 3]
                }
            }
            Design::SmallHetero => &[1, 2],
        }
    }
}

/// The fixed part of a study: visit sets, covariates, true covariances and
/// the pair-only covariance grouping.
#[derive(Debug, Clone)]
pub struct SimulationDesign {
    spec: ScenarioSpec,
    skeleton: LongitudinalDataset,
    true_cov: CovarianceSet,
    grouping: CovarianceGrouping,
}

impl SimulationDesign {
    pub fn new(spec: &ScenarioSpec) -> Result<Self, SimError> {
        spec.validate()?;
        let mut rng = child_rng(spec.seed, Stream::Covariates, 0);
        let (b0, b1) = (spec.beta_true[0], spec.beta_true[1]);
        let mut subjects = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            let visits = spec.visit_set(i);
            let x: Vec<f64> = match spec.design {
                Design::SmallHetero => {
                    let xi: f64 = rng.random();
                    alloc::vec![xi; visits.len()]
                }
                _ => visits.iter().map(|_| rng.sample(StandardNormal)).collect(),
            };
            let covariates =
                DMatrix::from_fn(visits.len(), 2, |a, c| if c == 0 { 1.0 } else { x[a] });
            let responses = DVector::from_iterator(visits.len(), x.iter().map(|x| b0 + b1 * x));
            subjects.push(SubjectRecord {
                id: format!("{}", i + 1),
                visits: visits.to_vec(),
                responses,
                covariates,
            });
        }
        let skeleton = LongitudinalDataset::new(subjects)?;
        let true_cov = CovarianceSet::new(
            skeleton
                .subjects()
                .iter()
                .map(|s| {
                    DMatrix::from_fn(s.len(), s.len(), |a, b| {
                        spec.true_covariance(s.visits[a], s.visits[b])
                    })
                })
                .collect(),
        );
        let grouping = CovarianceGrouping::build(&skeleton, &GroupingSpec::PairOnly)?;
        Ok(Self {
            spec: spec.clone(),
            skeleton,
            true_cov,
            grouping,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    /// Noise-free dataset: responses equal the true means.
    pub fn skeleton(&self) -> &LongitudinalDataset {
        &self.skeleton
    }

    pub fn true_covariance(&self) -> &CovarianceSet {
        &self.true_cov
    }

    pub fn grouping(&self) -> &CovarianceGrouping {
        &self.grouping
    }

    /// Dataset for replication `r`.
    pub fn replicate(&self, r: u64) -> LongitudinalDataset {
        let mut rng = child_rng(self.spec.seed, Stream::Replication, r);
        let responses = self
            .skeleton
            .subjects()
            .iter()
            .map(|s| &s.responses + self.draw_noise(&mut rng, &s.visits))
            .collect();
        self.skeleton
            .with_responses(responses)
            .expect("noise preserves subject shapes")
    }

    fn draw_noise(&self, rng: &mut ChaCha20Rng, visits: &[usize]) -> DVector<f64> {
        let spec = &self.spec;
        match spec.case_params {
            CaseParams::Heteroscedastic { sigma_1, sigma_2 } => DVector::from_iterator(
                visits.len(),
                visits.iter().map(|&j| {
                    let z: f64 = rng.sample(StandardNormal);
                    if j == 1 {
                        sigma_1 * z
                    } else {
                        sigma_2 * z
                    }
                }),
            ),
            CaseParams::Correlated {
                sigma_u2,
                sigma_w2,
                sigma_e2,
                phi,
            } => {
                let sigma_u = libm::sqrt(sigma_u2);
                let sigma_w = libm::sqrt(sigma_w2);
                let sigma_e = libm::sqrt(sigma_e2);
                let u = match spec.scenario {
                    NoiseScenario::NormalAr1 => sigma_u * rng.sample::<f64, _>(StandardNormal),
                    _ => centered_exponential(rng, sigma_u),
                };
                let horizon = visits.iter().copied().max().unwrap_or(0);
                let w = match spec.scenario {
                    NoiseScenario::ExponentialMa1 => ma1_path(rng, horizon, sigma_w, spec.ma_theta),
                    _ => ar1_path(rng, horizon, sigma_w, phi),
                };
                DVector::from_iterator(
                    visits.len(),
                    visits.iter().map(|&j| {
                        let e: f64 = rng.sample(StandardNormal);
                        u + w[j - 1] + sigma_e * e
                    }),
                )
            }
        }
    }
}

/// `sigma * (xi - 1)` with `xi ~ Exp(1)`.
pub(crate) fn centered_exponential(rng: &mut impl Rng, sigma: f64) -> f64 {
    let xi: f64 = rng.sample(Exp1);
    sigma * (xi - 1.0)
}

/// Stationary AR(1) path of length `len` with marginal standard deviation
/// `sigma`.
pub(crate) fn ar1_path(rng: &mut impl Rng, len: usize, sigma: f64, phi: f64) -> Vec<f64> {
    let innovation = sigma * libm::sqrt(1.0 - phi * phi);
    let mut path = Vec::with_capacity(len);
    for t in 0..len {
        let z: f64 = rng.sample(StandardNormal);
        let w = if t == 0 {
            sigma * z
        } else {
            phi * path[t - 1] + innovation * z
        };
        path.push(w);
    }
    path
}

/// MA(1) path `sigma (z_t + theta z_{t-1}) / sqrt(1 + theta^2)`.
pub(crate) fn ma1_path(rng: &mut impl Rng, len: usize, sigma: f64, theta: f64) -> Vec<f64> {
    let scale = sigma / libm::sqrt(1.0 + theta * theta);
    let mut prev: f64 = rng.sample(StandardNormal);
    (0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let w = scale * (z + theta * prev);
            prev = z;
            w
        })
        .collect()
}

/// Dataset for replication 0 together with the true covariances.
pub fn generate(spec: &ScenarioSpec) -> Result<(LongitudinalDataset, CovarianceSet), SimError> {
    let design = SimulationDesign::new(spec)?;
    Ok((design.replicate(0), design.true_cov))
}

/// `(sum X_i' V_i^{-1} X_i)^{-1}` by explicit LU inversion.
pub fn exact_blue_covariance(
    ds: &LongitudinalDataset,
    true_cov: &CovarianceSet,
) -> Result<DMatrix<f64>, GeeError> {
    let p = ds.coefficient_count();
    let mut info = DMatrix::zeros(p, p);
    for (i, s) in ds.subjects().iter().enumerate() {
        if i >= true_cov.len() {
            return Err(GeeError::CovarianceShape { subject: i });
        }
        let v = true_cov.get(i);
        if v.nrows() != s.len() || v.ncols() != s.len() {
            return Err(GeeError::CovarianceShape { subject: i });
        }
        let v_inv = v
            .clone()
            .try_inverse()
            .filter(|m| m.iter().all(|x| x.is_finite()))
            .ok_or(GeeError::NotPositiveDefinite { subject: i })?;
        info += s.covariates.transpose() * v_inv * &s.covariates;
    }
    let cov = info
        .try_inverse()
        .filter(|m| m.iter().all(|x| x.is_finite()))
        .ok_or(GeeError::SingularInformation)?;
    Ok(symmetrize(cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Estimator {
    Ols,
    Irls,
    OneStep,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Ols, Estimator::Irls, Estimator::OneStep];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Ols => "OLS",
            Estimator::Irls => "IRLS",
            Estimator::OneStep => "OneStep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    NotConverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRun {
    pub status: RunStatus,
    pub beta: Option<Vec<f64>>,
    /// Outer steps to convergence (IRLS only).
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub index: u64,
    /// Aligned with the requested estimators.
    pub runs: Vec<EstimatorRun>,
}

fn run_estimator(
    design: &SimulationDesign,
    ds: &LongitudinalDataset,
    est: Estimator,
    opts: &IeeOptions,
) -> EstimatorRun {
    let ok = |beta: &DVector<f64>, steps| EstimatorRun {
        status: RunStatus::Ok,
        beta: Some(beta.as_slice().to_vec()),
        steps,
    };
    let failed = |status| EstimatorRun {
        status,
        beta: None,
        steps: None,
    };
    let model = MeanModel::Linear;
    match est {
        Estimator::Ols => ols_linear(ds).map_or(failed(RunStatus::Failed), |b| ok(&b, None)),
        Estimator::Irls => {
            let opts = IeeOptions {
                one_step_only: false,
                ..*opts
            };
            match fit_iee(ds, &model, &design.grouping, &opts) {
                Ok(fit) => ok(&fit.beta_hat, fit.steps_to_converge),
                Err(IeeError::NotConverged(_)) => failed(RunStatus::NotConverged),
                Err(_) => failed(RunStatus::Failed),
            }
        }
        Estimator::OneStep => one_step_fit(ds, &model, &design.grouping, opts)
            .map_or(failed(RunStatus::Failed), |f| ok(&f.beta_hat, None)),
    }
}

/// Fits each estimator to replication `r`.
pub fn run_replication(
    design: &SimulationDesign,
    r: u64,
    estimators: &[Estimator],
    opts: &IeeOptions,
) -> ReplicationOutcome {
    let ds = design.replicate(r);
    ReplicationOutcome {
        index: r,
        runs: estimators
            .iter()
            .map(|&e| run_estimator(design, &ds, e, opts))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub ok: usize,
    pub not_converged: usize,
    pub failed: usize,
    /// Absent with fewer than two usable runs.
    pub mean: Option<Vec<f64>>,
    /// Divisor `ok - 1`; absent with fewer than two usable runs.
    pub covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepCount {
    pub steps: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct McSummary {
    pub spec: ScenarioSpec,
    pub n_rep: usize,
    pub estimators: Vec<EstimatorSummary>,
    /// Converged IRLS runs by outer steps; empty when IRLS was not run.
    pub step_histogram: Vec<StepCount>,
    /// Exact BLUE covariance for the fixed covariates; absent when the
    /// true covariances are singular.
    pub blue_covariance: Option<Vec<Vec<f64>>>,
}

impl McSummary {
    /// Summarizes outcomes, which must be ordered by replication index.
    pub fn from_outcomes(
        design: &SimulationDesign,
        estimators: &[Estimator],
        outcomes: &[ReplicationOutcome],
    ) -> Self {
        let mut summaries = Vec::with_capacity(estimators.len());
        let mut histogram: Vec<StepCount> = Vec::new();
        for (e, &estimator) in estimators.iter().enumerate() {
            let runs = outcomes.iter().map(|o| &o.runs[e]);
            let count = |s: RunStatus| runs.clone().filter(|r| r.status == s).count();
            let betas: Vec<&[f64]> = runs.clone().filter_map(|r| r.beta.as_deref()).collect();
            let (mean, covariance) = moments(&betas);
            summaries.push(EstimatorSummary {
                estimator,
                ok: count(RunStatus::Ok),
                not_converged: count(RunStatus::NotConverged),
                failed: count(RunStatus::Failed),
                mean,
                covariance,
            });
            if estimator == Estimator::Irls && histogram.is_empty() {
                for steps in runs.filter_map(|r| r.steps) {
                    match histogram.binary_search_by_key(&steps, |c| c.steps) {
                        Ok(pos) => histogram[pos].count += 1,
                        Err(pos) => histogram.insert(pos, StepCount { steps, count: 1 }),
                    }
                }
            }
        }
        let blue = exact_blue_covariance(&design.skeleton, &design.true_cov).ok();
        Self {
            spec: design.spec.clone(),
            n_rep: outcomes.len(),
            estimators: summaries,
            step_histogram: histogram,
            blue_covariance: blue.map(|m| rows(&m)),
        }
    }

    pub fn summary(&self, estimator: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == estimator)
    }

    pub fn converged_runs(&self) -> usize {
        self.step_histogram.iter().map(|c| c.count).sum()
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn moments(betas: &[&[f64]]) -> (Option<Vec<f64>>, Option<Vec<Vec<f64>>>) {
    if betas.len() < 2 {
        return (None, None);
    }
    let p = betas[0].len();
    let k = betas.len() as f64;
    let mean: Vec<f64> = (0..p)
        .map(|a| betas.iter().map(|b| b[a]).sum::<f64>() / k)
        .collect();
    let mut cov = alloc::vec![alloc::vec![0.0; p]; p];
    for b in betas {
        for a in 0..p {
            for c in 0..p {
                cov[a][c] += (b[a] - mean[a]) * (b[c] - mean[c]);
            }
        }
    }
    for row in &mut cov {
        for x in row.iter_mut() {
            *x /= k - 1.0;
        }
    }
    (Some(mean), Some(cov))
}

/// Sequential Monte Carlo over replications `0..n_rep`.
pub fn monte_carlo(
    spec: &ScenarioSpec,
    n_rep: usize,
    estimators: &[Estimator],
    opts: &IeeOptions,
) -> Result<McSummary, SimError> {
    if n_rep == 0 {
        return Err(SimError::NoReplications);
    }
    let design = SimulationDesign::new(spec)?;
    let outcomes: Vec<_> = (0..n_rep as u64)
        .map(|r| run_replication(&design, r, estimators, opts))
        .collect();
    Ok(McSummary::from_outcomes(&design, estimators, &outcomes))
}
