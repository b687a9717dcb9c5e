//! Experiment drivers built on [`System`](crate::System).

pub mod covert;
pub mod lrbs;
pub mod property;
pub mod sweep;
pub mod trace;

pub use covert::{run_covert_channel, ChannelRun};
pub use lrbs::{check_pattern, run_lrbs, ExperimentResult, LrbsScenario, PatternCheck};
pub use property::{check_security_property, PropertyReport, SecurityPropertyCase};
pub use sweep::{full_matrix, run_matrix, MatrixCell};
pub use trace::{run_trace_workload, Trace, TraceOp, TraceStats};

/// Lower median: the element at index `(n - 1) / 2` of the sorted values.
pub fn median(values: &[u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn lower_median() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[5]), Some(5));
        assert_eq!(median(&[9, 1, 5]), Some(5));
        assert_eq!(median(&[4, 1, 3, 2]), Some(2));
    }
}
