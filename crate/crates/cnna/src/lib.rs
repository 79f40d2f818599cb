//! File formats and command line for the CNN accelerator model in
//! [`cnna_core`].

pub mod cli;
pub mod error;
pub mod formats;
pub mod tables;

pub use cnna_core as core;
pub use error::{Error, Result};

use cnna_core::dse::{estimate_cost, mark_pareto, BetaConfig, CostModel, DeviceProfile, DseError, SweepRow, Workload};
use rayon::prelude::*;

/// [`cnna_core::dse::sweep`] across threads; rows keep grid order.
pub fn sweep_parallel(
    grid: &[BetaConfig],
    device: &DeviceProfile,
    model: &CostModel,
    workload: &Workload,
    feasible_front: bool,
) -> Result<Vec<SweepRow>, DseError> {
    if grid.is_empty() {
        return Err(DseError::EmptyGrid);
    }
    let est = grid
        .par_iter()
        .map(|b| estimate_cost(b, device, model, workload))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mark_pareto(est, feasible_front))
}
