//! Receiver-total constancy: a receiver that speculatively loads every line
//! of an address set must take the same total time whatever subset of the
//! set a transmitter touched beforehand.

use serde::{Deserialize, Serialize};

use crate::cpu::{Program, Reg};
use crate::defense::DefenseId;
use crate::error::{Result, SimError};
use crate::protocol::CoreId;
use crate::system::{System, SystemConfig};

pub const MAX_PROPERTY_N: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityPropertyCase {
    pub system: SystemConfig,
    pub addresses: Vec<u64>,
    pub lbb_address: u64,
    pub receiver_core: CoreId,
    pub transmitter_core: CoreId,
}

impl SecurityPropertyCase {
    /// `n` lines in consecutive LLC sets, so they always fit together.
    pub fn new(system: SystemConfig, n: usize) -> Self {
        let ls = system.hierarchy.line_size;
        let base = 0x0040_0000;
        Self {
            system,
            addresses: (0..n as u64).map(|i| base + i * ls).collect(),
            lbb_address: 0x0080_0000 + 100 * ls,
            receiver_core: 0,
            transmitter_core: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.addresses.len();
        if n == 0 || n > MAX_PROPERTY_N {
            return Err(SimError::config(format!(
                "address set size {n} must be in 1..={MAX_PROPERTY_N}"
            )));
        }
        if self.receiver_core == self.transmitter_core {
            return Err(SimError::config(
                "receiver and transmitter must be different cores",
            ));
        }
        let h = &self.system.hierarchy;
        let mut lines: Vec<_> = self.addresses.iter().map(|&a| h.line(a)).collect();
        lines.push(h.line(self.lbb_address));
        let mut sets: Vec<u64> = lines
            .iter()
            .map(|l| l.number(h.line_size) % h.llc.num_sets(h.line_size).unwrap_or(1) as u64)
            .collect();
        lines.sort_unstable();
        lines.dedup();
        if lines.len() != n + 1 {
            return Err(SimError::config(
                "addresses and the receiver's LBB line must be distinct lines",
            ));
        }
        sets.sort_unstable();
        sets.dedup();
        if sets.len() != n + 1 {
            return Err(SimError::config("addresses must map to distinct LLC sets"));
        }
        Ok(())
    }
}

/// Receiver program: warm the LBB line, then for each target a timed
/// LBB/branch/LAB step. Ends by flushing everything it touched.
pub fn receiver_program(targets: &[u64]) -> Result<Program> {
    let mut src = String::from(".in r2\n    load r12, [r2]\n    lfence\n");
    for (i, a) in targets.iter().enumerate() {
        src.push_str(&format!(
            "    li r3, {a:#x}\n    lfence\n    rdtsc r10\n    lfence\n    load r12, [r2]\n    beqz r12, skip{i}\n    load r11, [r3]\nskip{i}:\n    lfence\n    rdtsc r13\n"
        ));
    }
    for a in targets {
        src.push_str(&format!("    li r3, {a:#x}\n    clflush [r3]\n"));
    }
    src.push_str("    clflush [r2]\n");
    Program::parse(&src)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetTiming {
    /// Bit i set iff the transmitter touched address i.
    pub subset: u32,
    pub total: u64,
    pub per_access: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub n: usize,
    pub config: String,
    pub rows: Vec<SubsetTiming>,
    pub constant: bool,
    /// Core-observed LLC hit and miss times.
    pub t_c: u64,
    pub t_m: u64,
    /// Fixed per-step cost of the timed region beyond the probed load.
    pub overhead: u64,
    /// Analytic per-step load latency, where the configuration has one.
    pub expected_per_access: Option<u64>,
    pub expected_total: Option<u64>,
    pub pass: bool,
}

fn receiver_run(case: &SecurityPropertyCase, subset: u32, targets: &[u64]) -> Result<Vec<u64>> {
    let mut sys = System::new(case.system)?;
    let prog = receiver_program(targets)?;
    let inputs = [(Reg::new(2)?, case.lbb_address)];
    sys.execute(case.receiver_core, &prog, &inputs)?;
    for (i, &a) in case.addresses.iter().enumerate() {
        if subset & (1 << i) != 0 {
            sys.load(case.transmitter_core, a)?;
        }
    }
    Ok(sys
        .execute(case.receiver_core, &prog, &inputs)?
        .paired_deltas())
}

/// Per-step overhead: time of one step whose LAB hits the receiver's own
/// L1-resident line, minus the L1 latency.
pub fn step_overhead(case: &SecurityPropertyCase) -> Result<u64> {
    let d = receiver_run(case, 0, &[case.lbb_address])?;
    Ok(d[0] - case.system.hierarchy.timing.l1_hit())
}

pub fn check_security_property(case: &SecurityPropertyCase) -> Result<PropertyReport> {
    case.validate()?;
    let n = case.addresses.len();
    let timing = case.system.hierarchy.timing;
    let (t_c, t_m) = (timing.llc_hit(), timing.miss());
    let d = case.system.defense;
    let expected_per_access = match d.id {
        DefenseId::C2Torc | DefenseId::C5TorcDsrcSsMesi => Some(t_m),
        DefenseId::C4TorcDsrm if d.dsrm_optimized => Some(t_c + t_m),
        DefenseId::C4TorcDsrm => Some(2 * t_m),
        DefenseId::C1Insecure | DefenseId::C3TorcDsrc => None,
    };
    let overhead = step_overhead(case)?;
    let mut rows = Vec::with_capacity(1 << n);
    for subset in 0..(1u32 << n) {
        let per_access = receiver_run(case, subset, &case.addresses)?;
        rows.push(SubsetTiming {
            subset,
            total: per_access.iter().sum(),
            per_access,
        });
    }
    let constant = rows.windows(2).all(|w| w[0].total == w[1].total);
    let expected_total = expected_per_access.map(|e| (e + overhead) * n as u64);
    let pass = constant && expected_total.is_none_or(|e| rows[0].total == e);
    Ok(PropertyReport {
        n,
        config: d.describe(),
        rows,
        constant,
        t_c,
        t_m,
        overhead,
        expected_per_access,
        expected_total,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::SpdmKind;
    use crate::defense::DefenseConfig;

    fn case(id: DefenseId, n: usize) -> SecurityPropertyCase {
        SecurityPropertyCase::new(
            SystemConfig::new(DefenseConfig::new(id, SpdmKind::BranchShadow)),
            n,
        )
    }

    #[test]
    fn receiver_has_two_timers_per_target() {
        let p = receiver_program(&[0x40, 0x80]).unwrap();
        let timers = p
            .instructions()
            .iter()
            .filter(|i| matches!(i, crate::cpu::Instruction::ReadTimer { .. }))
            .count();
        assert_eq!(timers, 4);
    }

    #[test]
    fn c3_leaks_at_one_address() {
        let r = check_security_property(&case(DefenseId::C3TorcDsrc, 1)).unwrap();
        assert!(!r.constant);
        assert!(!r.pass);
    }

    #[test]
    fn c5_small_case() {
        let r = check_security_property(&case(DefenseId::C5TorcDsrcSsMesi, 2)).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.rows.len(), 4);
    }

    #[test]
    fn bad_sizes_rejected() {
        assert!(check_security_property(&case(DefenseId::C5TorcDsrcSsMesi, 0)).is_err());
        assert!(check_security_property(&case(DefenseId::C5TorcDsrcSsMesi, 9)).is_err());
    }
}
