//! JSON reports and their aligned text rendering.

use std::fmt::Write as _;

use iee_core::iee::{FitKind, FitResult, IeeOptions, TraceEntry};
use iee_core::simulation::{EstimatorSummary, McSummary, ScenarioSpec, StepCount};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelInfo {
    Linear,
    LogisticRi { sigma: f64, quadrature_order: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassValue {
    pub j: usize,
    pub k: usize,
    pub l: i64,
    pub n: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub model: ModelInfo,
    pub fit_kind: FitKind,
    pub converged: bool,
    pub steps: Option<usize>,
    pub outer_steps: usize,
    pub options: IeeOptions,
    pub subjects: usize,
    pub observations: usize,
    pub coefficients: Vec<Coefficient>,
    pub coefficient_covariance: Vec<Vec<f64>>,
    pub covariance_classes: Vec<ClassValue>,
    pub repaired_subjects: usize,
    pub rate_estimate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEntry>>,
}

impl FitReport {
    pub fn new(
        fit: &FitResult,
        model: ModelInfo,
        options: IeeOptions,
        names: &[String],
        subjects: usize,
        observations: usize,
        with_trace: bool,
    ) -> Self {
        let se = fit.standard_errors();
        Self {
            model,
            fit_kind: fit.kind,
            converged: fit.converged(),
            steps: fit.steps_to_converge,
            outer_steps: fit.outer_steps,
            options,
            subjects,
            observations,
            coefficients: names
                .iter()
                .zip(fit.beta_hat.iter())
                .zip(se)
                .map(|((name, &estimate), std_error)| Coefficient {
                    name: name.clone(),
                    estimate,
                    std_error,
                })
                .collect(),
            coefficient_covariance: fit
                .beta_cov
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            covariance_classes: fit
                .keys
                .iter()
                .zip(&fit.counts)
                .zip(&fit.v_hat)
                .map(|((key, &n), &value)| ClassValue {
                    j: key.j,
                    k: key.k,
                    l: key.label,
                    n,
                    value,
                })
                .collect(),
            repaired_subjects: fit.repaired_subjects,
            rate_estimate: fit.rate_estimate,
            trace: with_trace.then(|| fit.trace.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationReport {
    pub spec: ScenarioSpec,
    pub n_rep: usize,
    pub options: IeeOptions,
    pub estimators: Vec<EstimatorSummary>,
    pub step_histogram: Vec<StepCount>,
    pub blue_covariance: Option<Vec<Vec<f64>>>,
}

impl SimulationReport {
    pub fn new(summary: McSummary, options: IeeOptions) -> Self {
        Self {
            spec: summary.spec,
            n_rep: summary.n_rep,
            options,
            estimators: summary.estimators,
            step_histogram: summary.step_histogram,
            blue_covariance: summary.blue_covariance,
        }
    }
}

/// Any report this tool writes, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Fit(FitReport),
    Simulation(SimulationReport),
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, name: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Input(format!("{name}: schema error: {e}")))
    }

    pub fn render(&self) -> String {
        match self {
            Report::Fit(r) => render_fit(r),
            Report::Simulation(r) => render_simulation(r),
        }
    }
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "NA".into()
    }
}

fn render_fit(r: &FitReport) -> String {
    let mut out = String::new();
    let model = match &r.model {
        ModelInfo::Linear => "linear".to_string(),
        ModelInfo::LogisticRi { sigma, .. } => {
            format!("logistic random intercept, sigma = {sigma}")
        }
    };
    let _ = writeln!(out, "Model: {model}");
    let _ = writeln!(
        out,
        "Subjects: {}, observations: {}",
        r.subjects, r.observations
    );
    let width = r
        .coefficients
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(0)
        .max(11);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<width$} {:>12} {:>12}",
        "Coefficient", "Estimate", "Std. error"
    );
    for c in &r.coefficients {
        let _ = writeln!(
            out,
            "{:<width$} {:>12} {:>12}",
            c.name,
            num(c.estimate),
            num(c.std_error)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Covariance classes");
    let _ = writeln!(
        out,
        "{:>4} {:>4} {:>6} {:>6} {:>12}",
        "j", "k", "l", "n", "v"
    );
    for c in &r.covariance_classes {
        let _ = writeln!(
            out,
            "{:>4} {:>4} {:>6} {:>6} {:>12}",
            c.j,
            c.k,
            c.l,
            c.n,
            num(c.value)
        );
    }
    let _ = writeln!(out);
    let status = match (r.fit_kind, r.steps) {
        (FitKind::OneStep, _) => "One-step estimate (two fits, one covariance update)".to_string(),
        (_, Some(s)) => format!("Converged in {s} steps"),
        (_, None) => format!("Did not converge within {} steps", r.outer_steps),
    };
    let rate = r.rate_estimate.map_or("NA".into(), |q| format!("{q:.4}"));
    let _ = writeln!(out, "{status}; rate estimate {rate}");
    if r.repaired_subjects > 0 {
        let _ = writeln!(
            out,
            "Covariance repaired for {} subjects",
            r.repaired_subjects
        );
    }
    if let Some(trace) = &r.trace {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>5} {:>12}  beta", "step", "criterion");
        for e in trace {
            let crit = e.criterion.map_or("".into(), |c| format!("{c:.3e}"));
            let beta: Vec<String> = e.beta.iter().map(|b| num(*b)).collect();
            let _ = writeln!(out, "{:>5} {:>12}  {}", e.iteration, crit, beta.join(" "));
        }
    }
    out
}

fn render_simulation(r: &SimulationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Replications: {}, subjects: {}, seed: {}",
        r.n_rep, r.spec.n, r.spec.seed
    );

    if !r.step_histogram.is_empty() {
        let converged: usize = r.step_histogram.iter().map(|c| c.count).sum();
        let _ = writeln!(out);
        let _ = writeln!(out, "Steps to converge (% of {} runs)", r.n_rep);
        let mut steps = format!("{:<8}", "Steps");
        let mut pct = format!("{:<8}", "%");
        for c in &r.step_histogram {
            let _ = write!(steps, "{:>6}", c.steps);
            let _ = write!(pct, "{:>6.1}", 100.0 * c.count as f64 / r.n_rep as f64);
        }
        let _ = writeln!(out, "{steps}\n{pct}");
        let _ = writeln!(out, "Converged: {converged} of {}", r.n_rep);
    }

    if r.estimators.iter().all(|e| e.mean.is_none()) {
        let _ = writeln!(out);
        let _ = writeln!(out, "Moments omitted: fewer than two usable replications");
    } else {
        render_moments(&mut out, r);
    }
    let _ = writeln!(out);
    for e in &r.estimators {
        let _ = writeln!(
            out,
            "{}: {} usable, {} not converged, {} failed",
            e.estimator.label(),
            e.ok,
            e.not_converged,
            e.failed
        );
    }
    out
}

fn render_moments(out: &mut String, r: &SimulationReport) {
    let p = r.spec.beta_true.len();
    let _ = writeln!(out);
    let _ = writeln!(out, "Simulated means");
    let mut head = format!("{:<8}", "");
    for e in &r.estimators {
        let _ = write!(head, "{:>12}", e.estimator.label());
    }
    let _ = writeln!(out, "{head}{:>12}", "True");
    for c in 0..p {
        let mut line = format!("{:<8}", format!("beta{c}"));
        for e in &r.estimators {
            let cell = e.mean.as_ref().map_or("-".into(), |m| num(m[c]));
            let _ = write!(line, "{cell:>12}");
        }
        let _ = writeln!(out, "{line}{:>12}", num(r.spec.beta_true[c]));
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "Simulated covariance matrices");
    let block = 10 * p + 2;
    let mut head = String::new();
    for e in &r.estimators {
        let _ = write!(head, "{:<block$}", e.estimator.label());
    }
    let _ = write!(head, "{:<block$}", "BLUE");
    let _ = writeln!(out, "{}", head.trim_end());
    for a in 0..p {
        let mut line = String::new();
        let mut cells = |m: Option<&Vec<Vec<f64>>>| {
            let mut s = String::new();
            for c in 0..p {
                let cell = m.map_or("-".into(), |m| num(m[a][c]));
                let _ = write!(s, "{cell:>10}");
            }
            let _ = write!(line, "{s}  ");
        };
        for e in &r.estimators {
            cells(e.covariance.as_ref());
        }
        cells(r.blue_covariance.as_ref());
        let _ = writeln!(out, "{}", line.trim_end());
    }
}
