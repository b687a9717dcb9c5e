//! Synthetic access traces and the defense-overhead statistics over them.
//!
//! ```text
//! # core op address
//! 0 L 0x1000      load
//! 1 S 4096        store
//! 0 B 0x400       branch: the next `shadow_len` memory ops of core 0 are
//!                 issued in its shadow
//! ```
//!
//! Ops replay in file order, each core advancing its own clock by the
//! latency of its ops. A load that gets REMOTE_EM is redone immediately
//! after the response, as if its shadow had just resolved.

use serde::{Deserialize, Serialize};

use crate::cpu::SpdmKind;
use crate::error::{Result, SimError};
use crate::hierarchy::HitLevel;
use crate::protocol::{CacheRequest, CoreId, ResponseKind, UpgradeClass};
use crate::system::{System, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    Load,
    Store,
    Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOp {
    /// 1-based source line.
    pub line: usize,
    pub core: CoreId,
    pub kind: TraceKind,
    pub address: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub ops: Vec<TraceOp>,
}

fn parse_u64(tok: &str) -> Option<u64> {
    match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => tok.parse().ok(),
    }
}

impl Trace {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ops = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let toks: Vec<&str> = body.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(SimError::parse(
                    line,
                    format!("expected `core op address`, found `{body}`"),
                ));
            }
            let core = toks[0]
                .parse()
                .map_err(|_| SimError::parse(line, format!("invalid core id `{}`", toks[0])))?;
            let kind = match toks[1] {
                "L" | "l" => TraceKind::Load,
                "S" | "s" => TraceKind::Store,
                "B" | "b" => TraceKind::Branch,
                other => {
                    return Err(SimError::parse(
                        line,
                        format!("unknown op `{other}` (expected L, S or B)"),
                    ))
                }
            };
            let address = parse_u64(toks[2])
                .ok_or_else(|| SimError::parse(line, format!("invalid address `{}`", toks[2])))?;
            ops.push(TraceOp {
                line,
                core,
                kind,
                address,
            });
        }
        Ok(Self { ops })
    }

    pub fn to_text(&self) -> String {
        self.ops
            .iter()
            .map(|o| {
                let k = match o.kind {
                    TraceKind::Load => 'L',
                    TraceKind::Store => 'S',
                    TraceKind::Branch => 'B',
                };
                format!("{} {k} {:#x}\n", o.core, o.address)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub config: String,
    pub demand_accesses: u64,
    pub llc_accesses: u64,
    pub speculative_llc_accesses: u64,
    pub redos: u64,
    pub upgrades: u64,
    pub torc_delay_cycles: u64,
    pub redo_cycles: u64,
    pub total_cycles: u64,
    pub llc_fraction: f64,
    pub redo_fraction: f64,
    pub upgrade_fraction: f64,
    pub overhead_ratio: f64,
    /// Trace line of every load that was redone.
    pub redo_lines: Vec<usize>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub const DEFAULT_SHADOW_LEN: usize = 4;

pub fn run_trace_workload(
    trace: &Trace,
    config: SystemConfig,
    shadow_len: usize,
) -> Result<TraceStats> {
    let mut sys = System::new(config)?;
    let cores = config.hierarchy.cores;
    let spdm = config.defense.spdm;
    let mut clock = vec![0u64; cores];
    let mut shadow = vec![0usize; cores];
    let mut prev_l1_miss = vec![false; cores];
    let mut s = TraceStats {
        config: config.defense.describe(),
        ..TraceStats::default()
    };
    for op in &trace.ops {
        let c = op.core;
        if c >= cores {
            return Err(SimError::parse(
                op.line,
                format!("core {c} does not exist ({cores} cores)"),
            ));
        }
        let h = sys.hierarchy_mut();
        let line = h.line(op.address);
        let now = clock[c];
        let level = match op.kind {
            TraceKind::Branch => {
                shadow[c] = shadow_len;
                clock[c] += 1;
                continue;
            }
            TraceKind::Load => {
                let flag = match spdm {
                    SpdmKind::BranchShadow => shadow[c] > 0,
                    SpdmKind::RobHead => shadow[c] > 0 || prev_l1_miss[c],
                };
                let out = h.access(&CacheRequest::gets(line, c, flag), now)?;
                let mut latency = out.total_latency;
                s.torc_delay_cycles += out.torc_delay;
                if out.hit_level.reached_llc() && flag {
                    s.speculative_llc_accesses += 1;
                }
                if out.response.kind() == ResponseKind::RemoteEm {
                    let redo = h.access(&CacheRequest::redo(line, c), now + latency)?;
                    s.redos += 1;
                    s.redo_lines.push(op.line);
                    s.torc_delay_cycles += redo.torc_delay;
                    s.redo_cycles += redo.total_latency - redo.torc_delay;
                    latency += redo.total_latency;
                }
                clock[c] += latency;
                out.hit_level
            }
            TraceKind::Store => {
                let out = h.store(c, line, now)?;
                if out.class == UpgradeClass::Broadcast {
                    s.upgrades += 1;
                }
                clock[c] += out.total_latency;
                out.hit_level
            }
        };
        s.demand_accesses += 1;
        if level.reached_llc() {
            s.llc_accesses += 1;
        }
        prev_l1_miss[c] = level != HitLevel::L1;
        shadow[c] = shadow[c].saturating_sub(1);
    }
    s.total_cycles = clock.iter().sum();
    let overhead = s.torc_delay_cycles + s.redo_cycles;
    s.llc_fraction = ratio(s.llc_accesses, s.demand_accesses);
    s.redo_fraction = ratio(s.redos, s.llc_accesses);
    s.upgrade_fraction = ratio(s.upgrades, s.demand_accesses);
    s.overhead_ratio = ratio(overhead, s.total_cycles.saturating_sub(overhead).max(1));
    Ok(s)
}

/// A seeded random trace: `ops` operations over `lines` distinct lines.
pub fn random_trace(
    seed: u64,
    ops: usize,
    cores: usize,
    lines: u64,
    store_pct: u32,
    branch_pct: u32,
) -> Trace {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ops = (0..ops)
        .map(|i| {
            let roll = rng.gen_range(0..100);
            let kind = if roll < branch_pct {
                TraceKind::Branch
            } else if roll < branch_pct + store_pct {
                TraceKind::Store
            } else {
                TraceKind::Load
            };
            TraceOp {
                line: i + 1,
                core: rng.gen_range(0..cores),
                kind,
                address: rng.gen_range(0..lines) * 64,
            }
        })
        .collect();
    Trace { ops }
}
