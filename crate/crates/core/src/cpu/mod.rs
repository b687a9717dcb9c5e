//! Simplified out-of-order core: a reorder buffer, per-PC branch predictor,
//! speculative load issue tagged with a speculation-protection flag, fences,
//! cycle timers, and redo of loads that received a REMOTE_EM response.

mod pipeline;
pub mod predictor;
pub mod program;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::hierarchy::CacheEvent;
use crate::protocol::{LineAddr, ResponseKind};

pub use pipeline::Core;
pub use predictor::BranchPredictor;
pub use program::{AluOp, BranchCond, Instruction, Program, Reg};

/// How a load issued out of order is judged speculative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpdmKind {
    /// Protected while an older branch is unresolved.
    #[default]
    BranchShadow,
    /// Protected unless the load is at the ROB head when it issues.
    RobHead,
}

impl SpdmKind {
    pub const ALL: [SpdmKind; 2] = [SpdmKind::BranchShadow, SpdmKind::RobHead];

    pub fn as_str(self) -> &'static str {
        match self {
            SpdmKind::BranchShadow => "branch-shadow",
            SpdmKind::RobHead => "rob-head",
        }
    }
}

impl fmt::Display for SpdmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpdmKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "branch-shadow" | "branchshadow" => Ok(SpdmKind::BranchShadow),
            "rob-head" | "robhead" => Ok(SpdmKind::RobHead),
            other => Err(SimError::config(format!(
                "unknown speculation model `{other}` (expected branch-shadow or rob-head)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobStatus {
    Dispatched,
    Issued,
    AwaitingRedo,
    Executed,
    Committed,
    Squashed,
}

impl RobStatus {
    pub fn is_complete(self) -> bool {
        matches!(self, RobStatus::Executed | RobStatus::Committed)
    }
}

/// One dynamic instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobEntry {
    pub seq: usize,
    pub pc: usize,
    pub instruction: Instruction,
    pub status: RobStatus,
    pub dispatch_cycle: u64,
    pub issue_cycle: Option<u64>,
    pub complete_cycle: Option<u64>,
    pub commit_cycle: Option<u64>,
    /// Load only: the protection flag computed at first issue.
    pub spec_flag: Option<bool>,
    /// Load only: line accessed.
    pub address: Option<LineAddr>,
    /// Load only: kind of the first response.
    pub response: Option<ResponseKind>,
    pub redo_issue_cycle: Option<u64>,
    /// Branch only: direction predicted at dispatch.
    pub predicted_taken: Option<bool>,
    pub value: Option<u64>,
}

impl RobEntry {
    fn is_unresolved_branch(&self) -> bool {
        self.instruction.is_branch() && !self.status.is_complete()
    }
}

/// Protection flag for a load about to issue, given the entries older than it
/// that are still in the ROB (oldest first).
pub fn spdm_flag(older: &[&RobEntry], model: SpdmKind) -> bool {
    match model {
        SpdmKind::BranchShadow => older.iter().any(|e| e.is_unresolved_branch()),
        SpdmKind::RobHead => !older.is_empty(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoreConfig {
    pub rob_size: usize,
    pub lq_size: usize,
    pub width: usize,
    /// Cycles from a branch's condition becoming ready to its resolution.
    pub branch_resolve_latency: u64,
    pub alu_latency: u64,
    /// Abort a single execution after this many cycles.
    pub max_cycles: u64,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            rob_size: 192,
            lq_size: 32,
            width: 8,
            branch_resolve_latency: 1,
            alu_latency: 1,
            max_cycles: 50_000_000,
        }
    }
}

impl CoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rob_size == 0 || self.lq_size == 0 || self.width == 0 {
            return Err(SimError::config(
                "rob_size, lq_size and width must be positive",
            ));
        }
        if self.branch_resolve_latency == 0 || self.alu_latency == 0 {
            return Err(SimError::config(
                "branch and ALU latencies must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedoEvent {
    pub seq: usize,
    pub pc: usize,
    pub address: LineAddr,
    pub first_issue: u64,
    /// Cycle the REMOTE_EM response arrived.
    pub remote_em_cycle: u64,
    pub redo_cycle: u64,
    /// Shaped latency of the redo request.
    pub latency: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerRead {
    pub pc: usize,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub core: usize,
    pub start_cycle: u64,
    pub end_cycle: u64,
    /// Every dynamic instruction, squashed ones included, in dispatch order.
    pub records: Vec<RobEntry>,
    /// Cache events logged while this program ran.
    pub events: Vec<CacheEvent>,
    pub redos: Vec<RedoEvent>,
    /// Committed timer reads in program order.
    pub timer_reads: Vec<TimerRead>,
    pub registers: [u64; program::NUM_REGS],
}

impl ExecutionTrace {
    /// Difference between the last and first committed timer reads.
    pub fn delta(&self) -> Option<u64> {
        match (self.timer_reads.first(), self.timer_reads.last()) {
            (Some(a), Some(b)) if self.timer_reads.len() >= 2 => Some(b.value - a.value),
            _ => None,
        }
    }

    /// Differences between consecutive pairs of timer reads: (t1-t0, t3-t2, ...).
    pub fn paired_deltas(&self) -> Vec<u64> {
        self.timer_reads
            .chunks_exact(2)
            .map(|p| p[1].value - p[0].value)
            .collect()
    }

    pub fn remote_em_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.response == Some(ResponseKind::RemoteEm))
            .count()
    }

    pub fn squashed(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.status == RobStatus::Squashed)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(instruction: Instruction, status: RobStatus) -> RobEntry {
        RobEntry {
            seq: 0,
            pc: 0,
            instruction,
            status,
            dispatch_cycle: 0,
            issue_cycle: None,
            complete_cycle: None,
            commit_cycle: None,
            spec_flag: None,
            address: None,
            response: None,
            redo_issue_cycle: None,
            predicted_taken: None,
            value: None,
        }
    }

    fn branch() -> Instruction {
        Instruction::Branch {
            cond: Reg::new(1).unwrap(),
            when: BranchCond::Zero,
            target: 0,
        }
    }

    #[test]
    fn spdm_flag_cases() {
        let alu = entry(
            Instruction::Alu {
                dest: Reg::new(2).unwrap(),
                op: AluOp::Imm(1),
            },
            RobStatus::Issued,
        );
        let pending = entry(branch(), RobStatus::Issued);
        let resolved = entry(branch(), RobStatus::Executed);

        assert!(!spdm_flag(&[], SpdmKind::BranchShadow));
        assert!(!spdm_flag(&[&alu, &resolved], SpdmKind::BranchShadow));
        assert!(spdm_flag(&[&alu, &pending], SpdmKind::BranchShadow));
        assert!(!spdm_flag(&[], SpdmKind::RobHead));
        assert!(spdm_flag(&[&alu], SpdmKind::RobHead));
    }

    #[test]
    fn spdm_parse() {
        assert_eq!("rob-head".parse::<SpdmKind>().unwrap(), SpdmKind::RobHead);
        assert_eq!(
            "Branch_Shadow".parse::<SpdmKind>().unwrap(),
            SpdmKind::BranchShadow
        );
        assert!("rob".parse::<SpdmKind>().is_err());
        assert_eq!(SpdmKind::RobHead.to_string(), "rob-head");
    }
}
