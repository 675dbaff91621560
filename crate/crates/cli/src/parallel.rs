//! Parallel Monte Carlo with an ordered merge.

use iee_core::iee::IeeOptions;
use iee_core::simulation::{
    run_replication, Estimator, McSummary, ScenarioSpec, SimError, SimulationDesign,
};
use rayon::prelude::*;

/// Same result as [`iee_core::simulation::monte_carlo`], bit for bit, with
/// replications spread over the rayon pool.
pub fn monte_carlo_parallel(
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
        .into_par_iter()
        .map(|r| run_replication(&design, r, estimators, opts))
        .collect();
    Ok(McSummary::from_outcomes(&design, estimators, &outcomes))
}
