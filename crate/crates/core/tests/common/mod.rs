#![allow(dead_code)]

use cohsim::hierarchy::{CacheLevelConfig, Hierarchy, HierarchyConfig};
use cohsim::protocol::{CacheRequest, CoherenceState, LineAddr, ResponseKind};
use cohsim::DefenseConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(cores: usize) -> HierarchyConfig {
    HierarchyConfig {
        cores,
        ..HierarchyConfig::default()
    }
}

/// Structural invariants checked straight from the directory and the
/// private caches. With `exact`, sharer bits must equal the private holders.
pub fn check_lines(h: &Hierarchy, lines: &[LineAddr], exact: bool) -> Result<(), String> {
    for &line in lines {
        let holders = h.holders(line);
        let Some(e) = h.directory_entry(line) else {
            if !holders.is_empty() {
                return Err(format!(
                    "{line}: held privately by {holders:?} but absent from the LLC"
                ));
            }
            continue;
        };
        let sharers = e.sharers;
        if holders.bits() & !sharers.bits() != 0 {
            return Err(format!(
                "{line}: holders {holders:?} not covered by sharers {sharers:?}"
            ));
        }
        if exact && holders != sharers {
            return Err(format!(
                "{line}: holders {holders:?} != sharers {sharers:?}"
            ));
        }
        match e.state {
            CoherenceState::Modified | CoherenceState::Exclusive => {
                if sharers.count() != 1 {
                    return Err(format!("{line}: {:?} with sharers {sharers:?}", e.state));
                }
                if holders.count() > 1 {
                    return Err(format!(
                        "{line}: single-writer violated, holders {holders:?}"
                    ));
                }
            }
            CoherenceState::Shared => {
                if sharers.is_empty() {
                    return Err(format!("{line}: S with no sharers"));
                }
            }
            CoherenceState::Invalid => return Err(format!("{line}: resident entry in I")),
        }
    }
    Ok(())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub ops: usize,
    pub remote_em: usize,
    pub e_observed: usize,
}

/// Random GETS / REDO / GETX / FLUSH traffic, invariants checked after
/// every operation. REMOTE_EM responses must leave the directory untouched.
pub fn fuzz(
    defense: DefenseConfig,
    cores: usize,
    nlines: u64,
    ops: usize,
    seed: u64,
    load_only: bool,
) -> Result<FuzzStats, String> {
    // Small shared levels keep full directory snapshots cheap; the fuzzed
    // lines still all fit, so sharer bits must track holders exactly.
    let cfg = HierarchyConfig {
        l2: CacheLevelConfig::new(64 * 1024, 8),
        llc: CacheLevelConfig::new(64 * 1024, 16),
        ..config(cores)
    };
    let mut h = Hierarchy::new(cfg, defense).map_err(|e| e.to_string())?;
    let lines: Vec<LineAddr> = (0..nlines).map(|i| LineAddr(i * cfg.line_size)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FuzzStats::default();
    for i in 0..ops {
        let line = lines[rng.gen_range(0..lines.len())];
        let core = rng.gen_range(0..cores);
        let roll = rng.gen_range(0..100);
        let req = if roll < 45 {
            CacheRequest::gets(line, core, rng.gen())
        } else if roll < 60 {
            CacheRequest::redo(line, core)
        } else if roll < 85 && !load_only {
            CacheRequest::getx(line, core)
        } else if roll < 85 {
            CacheRequest::gets(line, core, true)
        } else {
            CacheRequest::flush(line, core)
        };
        let before = h.directory_snapshot();
        let out = h.access(&req, i as u64).map_err(|e| e.to_string())?;
        if out.response.kind() == ResponseKind::RemoteEm {
            stats.remote_em += 1;
            if h.directory_snapshot() != before {
                return Err(format!("op {i}: REMOTE_EM changed the directory"));
            }
            if out.response.token().is_some() {
                return Err(format!("op {i}: REMOTE_EM carried data"));
            }
        }
        check_lines(&h, &lines, true).map_err(|e| format!("op {i} {req:?}: {e}"))?;
        stats.e_observed += lines
            .iter()
            .filter(|&&l| {
                h.directory_entry(l)
                    .is_some_and(|e| e.state == CoherenceState::Exclusive)
            })
            .count();
        stats.ops += 1;
    }
    Ok(stats)
}
