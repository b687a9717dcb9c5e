//! Parallel runs over a matrix of defense configurations and secrets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lrbs::{run_lrbs, ExperimentResult, LrbsScenario};
use crate::cpu::SpdmKind;
use crate::defense::{DefenseConfig, DefenseId};
use crate::error::{Result, SimError};
use crate::system::SystemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub defense: DefenseConfig,
    pub secret: bool,
}

/// Every defense crossed with every model in `spdms` and both secrets.
pub fn full_matrix(spdms: &[SpdmKind], dsrm_optimized: bool) -> Vec<MatrixCell> {
    let mut cells = Vec::new();
    for &spdm in spdms {
        for id in DefenseId::ALL {
            for secret in [false, true] {
                cells.push(MatrixCell {
                    defense: DefenseConfig::new(id, spdm).with_dsrm_optimized(dsrm_optimized),
                    secret,
                });
            }
        }
    }
    cells
}

/// Run each cell with `runs` measurements on a pool of `jobs` threads.
/// Results come back in cell order whatever the thread count.
pub fn run_matrix(
    base: SystemConfig,
    cells: &[MatrixCell],
    runs: usize,
    jobs: usize,
) -> Result<Vec<ExperimentResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SimError::config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let system = SystemConfig {
                    defense: cell.defense,
                    ..base
                };
                run_lrbs(&LrbsScenario::new(system, cell.secret).with_runs(runs))
            })
            .collect()
    })
}
