//! Three-level inclusive hierarchy: private L1/L2 per core, a shared LLC that
//! doubles as the coherence directory, and flat main memory.
//!
//! Lookups are sequential: a request pays every traversed level in full.
//! Private caches drop clean and dirty lines silently on capacity eviction, so
//! a core's sharer bit survives until an LLC-side transaction clears it. The
//! bit therefore records "inserted by", which is what decides local vs.
//! remote.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defense::{
    feedback_policy, torc_shape, DefenseConfig, RawLlcResult, TorcBuffer, TorcEntry,
};
use crate::error::{Result, SimError};
use crate::plru::SetAssoc;
use crate::protocol::{
    handle_gets, handle_getx, is_remote, CacheRequest, CacheResponse, CoherenceState, CoreId,
    DataToken, DirectoryEntry, LineAddr, RequestKind, ResponseKind, SharerVector, UpgradeClass,
    MAX_CORES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingModel {
    pub t_l1: u64,
    pub t_l2: u64,
    /// LLC access time.
    pub t_llc: u64,
    /// Main memory access time.
    pub t_mem: u64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            t_l1: 2,
            t_l2: 16,
            t_llc: 40,
            t_mem: 140,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        if self.t_l1 == 0 {
            return Err(SimError::config("t_l1 must be positive"));
        }
        if !(self.t_mem > self.t_llc && self.t_llc > self.t_l2 && self.t_l2 > self.t_l1) {
            return Err(SimError::config(format!(
                "latencies must satisfy t_mem > t_llc > t_l2 > t_l1, got {}/{}/{}/{}",
                self.t_mem, self.t_llc, self.t_l2, self.t_l1
            )));
        }
        Ok(())
    }

    pub fn l1_hit(&self) -> u64 {
        self.t_l1
    }

    pub fn l2_hit(&self) -> u64 {
        self.t_l1 + self.t_l2
    }

    /// Core-observed latency of an access satisfied by the LLC.
    pub fn llc_hit(&self) -> u64 {
        self.t_l1 + self.t_l2 + self.t_llc
    }

    /// Core-observed latency of an access satisfied by memory.
    pub fn miss(&self) -> u64 {
        self.llc_hit() + self.t_mem
    }

    /// Extra store latency for an upgrade of the given class.
    pub fn upgrade_extra(&self, class: UpgradeClass, invalidations: u32) -> u64 {
        match class {
            UpgradeClass::Silent => 0,
            UpgradeClass::Broadcast | UpgradeClass::Fill => {
                let ack = if invalidations > 0 { self.t_llc } else { 0 };
                self.t_llc + ack
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheLevelConfig {
    pub size: u64,
    pub associativity: usize,
}

impl CacheLevelConfig {
    pub fn new(size: u64, associativity: usize) -> Self {
        Self {
            size,
            associativity,
        }
    }

    pub fn num_sets(&self, line_size: u64) -> Result<usize> {
        let way_bytes = self.associativity as u64 * line_size;
        if self.associativity == 0
            || !self.associativity.is_power_of_two()
            || self.associativity > 64
        {
            return Err(SimError::config(format!(
                "associativity {} must be a power of two in 1..=64",
                self.associativity
            )));
        }
        if self.size == 0 || !self.size.is_multiple_of(way_bytes) {
            return Err(SimError::config(format!(
                "cache size {} is not divisible by associativity x line size ({way_bytes})",
                self.size
            )));
        }
        Ok((self.size / way_bytes) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub cores: usize,
    pub line_size: u64,
    pub l1: CacheLevelConfig,
    pub l2: CacheLevelConfig,
    pub llc: CacheLevelConfig,
    /// Bytes of physical address space; requests at or above this fail.
    pub address_space: u64,
    pub torc_entries: usize,
    pub timing: TimingModel,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            cores: 8,
            line_size: 64,
            l1: CacheLevelConfig::new(32 * 1024, 8),
            l2: CacheLevelConfig::new(256 * 1024, 8),
            llc: CacheLevelConfig::new(2 * 1024 * 1024, 16),
            address_space: 1 << 32,
            torc_entries: crate::defense::TORC_BUFFER_ENTRIES,
            timing: TimingModel::default(),
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cores == 0 || self.cores > MAX_CORES {
            return Err(SimError::config(format!(
                "core count {} must be in 1..={MAX_CORES}",
                self.cores
            )));
        }
        if self.line_size == 0 || !self.line_size.is_power_of_two() {
            return Err(SimError::config("line size must be a power of two"));
        }
        if self.torc_entries == 0 {
            return Err(SimError::config("the TORC buffer needs at least one entry"));
        }
        for level in [self.l1, self.l2, self.llc] {
            level.num_sets(self.line_size)?;
        }
        self.timing.validate()
    }

    pub fn line(&self, byte_addr: u64) -> LineAddr {
        LineAddr::containing(byte_addr, self.line_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HitLevel {
    L1,
    L2,
    Llc,
    Memory,
}

impl HitLevel {
    pub fn reached_llc(self) -> bool {
        matches!(self, HitLevel::Llc | HitLevel::Memory)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessOutcome {
    pub hit_level: HitLevel,
    pub response: CacheResponse,
    pub total_latency: u64,
    /// Cycles added by TORC (including buffer backpressure).
    pub torc_delay: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreOutcome {
    pub hit_level: HitLevel,
    pub class: UpgradeClass,
    pub invalidations: u32,
    pub total_latency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CacheEvent {
    Access {
        cycle: u64,
        core: CoreId,
        address: LineAddr,
        kind: RequestKind,
        spec_flag: bool,
        hit_level: HitLevel,
        response: ResponseKind,
        latency: u64,
        torc_delay: u64,
    },
    Store {
        cycle: u64,
        core: CoreId,
        address: LineAddr,
        class: UpgradeClass,
        invalidations: u32,
        latency: u64,
    },
    Invalidate {
        cycle: u64,
        core: CoreId,
        address: LineAddr,
    },
    Writeback {
        cycle: u64,
        core: CoreId,
        address: LineAddr,
    },
    LlcEviction {
        cycle: u64,
        address: LineAddr,
    },
    Flush {
        cycle: u64,
        core: CoreId,
        address: LineAddr,
        was_present: bool,
    },
    TorcStall {
        cycle: u64,
        core: CoreId,
        address: LineAddr,
        stall: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LlcLine {
    state: CoherenceState,
    sharers: SharerVector,
}

#[derive(Debug, Clone)]
struct PrivateCaches {
    l1: SetAssoc<()>,
    l2: SetAssoc<()>,
}

#[derive(Debug, Clone)]
struct Jitter {
    amplitude: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    config: HierarchyConfig,
    defense: DefenseConfig,
    llc: SetAssoc<LlcLine>,
    private: Vec<PrivateCaches>,
    torc: Vec<TorcBuffer>,
    events: Vec<CacheEvent>,
    jitter: Option<Jitter>,
    silent_evictions: u64,
}

impl Hierarchy {
    pub fn new(config: HierarchyConfig, defense: DefenseConfig) -> Result<Self> {
        config.validate()?;
        let ls = config.line_size;
        let private = (0..config.cores)
            .map(|_| -> Result<PrivateCaches> {
                Ok(PrivateCaches {
                    l1: SetAssoc::new(config.l1.num_sets(ls)?, config.l1.associativity),
                    l2: SetAssoc::new(config.l2.num_sets(ls)?, config.l2.associativity),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            llc: SetAssoc::new(config.llc.num_sets(ls)?, config.llc.associativity),
            private,
            torc: (0..config.cores)
                .map(|_| TorcBuffer::new(config.torc_entries))
                .collect(),
            events: Vec::new(),
            jitter: None,
            silent_evictions: 0,
            config,
            defense,
        })
    }

    /// Uniform `[-amplitude, +amplitude]` noise on every memory access.
    pub fn with_memory_jitter(mut self, amplitude: u64, seed: u64) -> Self {
        self.jitter = (amplitude > 0).then(|| Jitter {
            amplitude,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        self
    }

    pub fn config(&self) -> &HierarchyConfig {
        &self.config
    }

    pub fn timing(&self) -> &TimingModel {
        &self.config.timing
    }

    pub fn defense(&self) -> &DefenseConfig {
        &self.defense
    }

    pub fn events(&self) -> &[CacheEvent] {
        &self.events
    }

    pub fn silent_evictions(&self) -> u64 {
        self.silent_evictions
    }

    pub fn torc_buffer(&self, core: CoreId) -> &TorcBuffer {
        &self.torc[core]
    }

    pub fn line(&self, byte_addr: u64) -> LineAddr {
        self.config.line(byte_addr)
    }

    fn line_no(&self, line: LineAddr) -> u64 {
        line.number(self.config.line_size)
    }

    fn check(&self, core: CoreId, line: LineAddr) -> Result<()> {
        if core >= self.config.cores {
            return Err(SimError::config(format!(
                "core {core} does not exist (hierarchy has {} cores)",
                self.config.cores
            )));
        }
        if line.0 >= self.config.address_space {
            return Err(SimError::AddressOutOfRange {
                address: line.0,
                limit: self.config.address_space,
            });
        }
        Ok(())
    }

    fn sample_mem(&mut self) -> u64 {
        let base = self.config.timing.t_mem;
        match self.jitter.as_mut() {
            None => base,
            Some(j) => {
                let amp = j.amplitude as i64;
                let d = j.rng.gen_range(-amp..=amp);
                (base as i64 + d).max(1) as u64
            }
        }
    }

    /// Directory view of one line, or `None` if it is not LLC-resident.
    pub fn directory_entry(&self, line: LineAddr) -> Option<DirectoryEntry> {
        let n = self.line_no(line);
        self.llc.get(n).map(|l| DirectoryEntry {
            address: line,
            state: l.state,
            sharers: l.sharers,
            replacement: self.llc.plru(self.llc.set_index(n)).clone(),
        })
    }

    /// Every directory entry, sorted by address.
    pub fn directory_snapshot(&self) -> Vec<DirectoryEntry> {
        let ls = self.config.line_size;
        let mut out: Vec<DirectoryEntry> = self
            .llc
            .iter()
            .map(|(n, l)| DirectoryEntry {
                address: LineAddr(n * ls),
                state: l.state,
                sharers: l.sharers,
                replacement: self.llc.plru(self.llc.set_index(n)).clone(),
            })
            .collect();
        out.sort_by_key(|e| e.address);
        out
    }

    pub fn private_level(&self, core: CoreId, line: LineAddr) -> Option<HitLevel> {
        let n = self.line_no(line);
        let p = &self.private[core];
        if p.l1.contains(n) {
            Some(HitLevel::L1)
        } else if p.l2.contains(n) {
            Some(HitLevel::L2)
        } else {
            None
        }
    }

    /// Cores whose private caches currently hold the line.
    pub fn holders(&self, line: LineAddr) -> SharerVector {
        let n = self.line_no(line);
        let mut v = SharerVector::empty(self.config.cores);
        for (c, p) in self.private.iter().enumerate() {
            if p.l1.contains(n) || p.l2.contains(n) {
                v.insert(c);
            }
        }
        v
    }

    /// Dispatch any request kind.
    pub fn access(&mut self, req: &CacheRequest, now: u64) -> Result<AccessOutcome> {
        match req.kind() {
            RequestKind::Gets | RequestKind::RedoGets => self.load(req, now),
            RequestKind::Getx => {
                let s = self.store(req.requester(), req.address(), now)?;
                Ok(AccessOutcome {
                    hit_level: s.hit_level,
                    response: CacheResponse::data(
                        s.total_latency,
                        DataToken::for_line(req.address()),
                    ),
                    total_latency: s.total_latency,
                    torc_delay: 0,
                })
            }
            RequestKind::Flush => {
                self.flush(req.address(), req.requester(), now)?;
                Ok(AccessOutcome {
                    hit_level: HitLevel::Memory,
                    response: CacheResponse::data(0, DataToken::for_line(req.address())),
                    total_latency: 0,
                    torc_delay: 0,
                })
            }
        }
    }

    fn load(&mut self, req: &CacheRequest, now: u64) -> Result<AccessOutcome> {
        let line = req.address();
        let core = req.requester();
        self.check(core, line)?;
        let n = self.line_no(line);
        let t = self.config.timing;
        let token = DataToken::for_line(line);

        let private_hit = {
            let p = &mut self.private[core];
            if p.l1.touch(n) {
                Some(HitLevel::L1)
            } else if p.l2.touch(n) {
                p.l1.insert(n, ());
                Some(HitLevel::L2)
            } else {
                None
            }
        };
        if let Some(level) = private_hit {
            let latency = if level == HitLevel::L1 {
                t.l1_hit()
            } else {
                t.l2_hit()
            };
            return Ok(self.finish_load(req, now, level, CacheResponse::data(latency, token), 0));
        }

        let entry = self.directory_entry(line);
        let hit = entry.is_some();
        let remote = entry.as_ref().is_some_and(|e| is_remote(e, core));
        let remote_em = remote
            && entry
                .as_ref()
                .is_some_and(|e| e.state.is_exclusive_or_modified());
        let feedback = feedback_policy(hit, remote_em, req.spec_flag(), &self.defense);
        let mem = self.sample_mem();
        let llc_latency = t.llc_hit();
        let miss_latency = llc_latency + mem;

        if feedback == ResponseKind::RemoteEm {
            let raw = RawLlcResult {
                hit,
                remote,
                response: feedback,
                unshaped_latency: llc_latency,
                miss_latency,
            };
            let (latency, delay) = self.shape(req, &raw, now, None);
            return Ok(self.finish_load(
                req,
                now,
                HitLevel::Llc,
                CacheResponse::remote_em(latency),
                delay,
            ));
        }

        let out = handle_gets(
            entry.as_ref(),
            req,
            self.defense.protocol_variant(),
            self.defense.defers_remote_em(),
            self.config.cores,
        );
        debug_assert_eq!(out.response, ResponseKind::Data);
        if out.writeback {
            if let Some(owner) = entry.as_ref().and_then(DirectoryEntry::owner) {
                self.events.push(CacheEvent::Writeback {
                    cycle: now,
                    core: owner,
                    address: line,
                });
            }
        }
        let new_line = LlcLine {
            state: out.state,
            sharers: out.sharers,
        };
        let (level, unshaped) = if hit {
            *self.llc.get_mut(n).expect("hit implies resident") = new_line;
            self.llc.touch(n);
            (HitLevel::Llc, llc_latency)
        } else {
            self.llc_insert(n, new_line, now);
            (HitLevel::Memory, miss_latency)
        };
        self.private_fill(core, n);
        let raw = RawLlcResult {
            hit,
            remote,
            response: ResponseKind::Data,
            unshaped_latency: unshaped,
            miss_latency,
        };
        let (latency, delay) = self.shape(req, &raw, now, Some(token));
        Ok(self.finish_load(req, now, level, CacheResponse::data(latency, token), delay))
    }

    /// Apply TORC shaping and buffer occupancy. Returns (latency, delay).
    fn shape(
        &mut self,
        req: &CacheRequest,
        raw: &RawLlcResult,
        now: u64,
        token: Option<DataToken>,
    ) -> (u64, u64) {
        let shaped = torc_shape(raw, req, &self.defense);
        if shaped == raw.unshaped_latency {
            return (shaped, 0);
        }
        let core = req.requester();
        let start = self.torc[core].next_free(now);
        let stall = start - now;
        if stall > 0 {
            self.events.push(CacheEvent::TorcStall {
                cycle: now,
                core,
                address: req.address(),
                stall,
            });
        }
        let latency = shaped + stall;
        self.torc[core].hold(
            TorcEntry {
                address: req.address(),
                token,
                remote_em: raw.response == ResponseKind::RemoteEm,
                release_cycle: now + latency,
            },
            start,
        );
        (latency, latency - raw.unshaped_latency)
    }

    fn finish_load(
        &mut self,
        req: &CacheRequest,
        now: u64,
        hit_level: HitLevel,
        response: CacheResponse,
        torc_delay: u64,
    ) -> AccessOutcome {
        self.events.push(CacheEvent::Access {
            cycle: now,
            core: req.requester(),
            address: req.address(),
            kind: req.kind(),
            spec_flag: req.spec_flag(),
            hit_level,
            response: response.kind(),
            latency: response.latency,
            torc_delay,
        });
        AccessOutcome {
            hit_level,
            response,
            total_latency: response.latency,
            torc_delay,
        }
    }

    /// Store (GETX) from `core`. Stores are never speculative.
    pub fn store(&mut self, core: CoreId, line: LineAddr, now: u64) -> Result<StoreOutcome> {
        self.check(core, line)?;
        let n = self.line_no(line);
        let t = self.config.timing;
        let private = self.private_level(core, line);
        let entry = self.directory_entry(line);
        let req = CacheRequest::getx(line, core);
        let out = handle_getx(entry.as_ref(), &req, self.config.cores);

        for victim in out.invalidated.iter() {
            let p = &mut self.private[victim];
            p.l1.remove(n);
            p.l2.remove(n);
            self.events.push(CacheEvent::Invalidate {
                cycle: now,
                core: victim,
                address: line,
            });
        }
        if out.writeback {
            if let Some(owner) = entry.as_ref().and_then(DirectoryEntry::owner) {
                self.events.push(CacheEvent::Writeback {
                    cycle: now,
                    core: owner,
                    address: line,
                });
            }
        }

        let invalidations = out.invalidations();
        let (hit_level, latency) = match private {
            Some(level) => {
                let base = if level == HitLevel::L1 {
                    t.l1_hit()
                } else {
                    t.l2_hit()
                };
                (level, base + t.upgrade_extra(out.class, invalidations))
            }
            None if out.hit => {
                let ack = if invalidations > 0 { t.t_llc } else { 0 };
                (HitLevel::Llc, t.llc_hit() + ack)
            }
            None => {
                let mem = self.sample_mem();
                (HitLevel::Memory, t.llc_hit() + mem)
            }
        };
        let new_line = LlcLine {
            state: out.state,
            sharers: out.sharers,
        };
        if out.hit {
            *self.llc.get_mut(n).expect("hit implies resident") = new_line;
            self.llc.touch(n);
        } else {
            self.llc_insert(n, new_line, now);
        }
        self.private_fill(core, n);
        self.events.push(CacheEvent::Store {
            cycle: now,
            core,
            address: line,
            class: out.class,
            invalidations,
            latency,
        });
        Ok(StoreOutcome {
            hit_level,
            class: out.class,
            invalidations,
            total_latency: latency,
        })
    }

    /// Invalidate the line everywhere, writing back dirty data.
    pub fn flush(&mut self, line: LineAddr, core: CoreId, now: u64) -> Result<()> {
        self.check(core, line)?;
        let n = self.line_no(line);
        let removed = self.llc.remove(n);
        for p in &mut self.private {
            p.l1.remove(n);
            p.l2.remove(n);
        }
        if let Some(l) = removed {
            if l.state == CoherenceState::Modified {
                if let Some(owner) = l.sharers.iter().next() {
                    self.events.push(CacheEvent::Writeback {
                        cycle: now,
                        core: owner,
                        address: line,
                    });
                }
            }
        }
        self.events.push(CacheEvent::Flush {
            cycle: now,
            core,
            address: line,
            was_present: removed.is_some(),
        });
        Ok(())
    }

    fn llc_insert(&mut self, n: u64, line: LlcLine, now: u64) {
        if let Some((victim, old)) = self.llc.insert(n, line) {
            let address = LineAddr(victim * self.config.line_size);
            for c in old.sharers.iter() {
                let p = &mut self.private[c];
                p.l1.remove(victim);
                p.l2.remove(victim);
            }
            if old.state == CoherenceState::Modified {
                if let Some(owner) = old.sharers.iter().next() {
                    self.events.push(CacheEvent::Writeback {
                        cycle: now,
                        core: owner,
                        address,
                    });
                }
            }
            self.events.push(CacheEvent::LlcEviction {
                cycle: now,
                address,
            });
        }
    }

    fn private_fill(&mut self, core: CoreId, n: u64) {
        let p = &mut self.private[core];
        if let Some((victim, ())) = p.l2.insert(n, ()) {
            p.l1.remove(victim);
            self.silent_evictions += 1;
        }
        if p.l1.insert(n, ()).is_some() {
            self.silent_evictions += 1;
        }
    }

    /// Verify the structural coherence invariants. With `exact` the sharer
    /// vector must equal the set of private holders; otherwise it must cover it.
    pub fn check_invariants(&self, exact: bool) -> std::result::Result<(), String> {
        let ls = self.config.line_size;
        for (n, l) in self.llc.iter() {
            let address = LineAddr(n * ls);
            let entry = DirectoryEntry {
                address,
                state: l.state,
                sharers: l.sharers,
                replacement: self.llc.plru(self.llc.set_index(n)).clone(),
            };
            if l.state == CoherenceState::Invalid || !entry.is_consistent() {
                return Err(format!(
                    "{address}: state {:?} with sharers {:?}",
                    l.state, l.sharers
                ));
            }
            let holders = self.holders(address);
            if holders.bits() & !l.sharers.bits() != 0 {
                return Err(format!(
                    "{address}: holders {holders:?} not covered by sharers {:?}",
                    l.sharers
                ));
            }
            if exact && holders != l.sharers {
                return Err(format!(
                    "{address}: holders {holders:?} != sharers {:?}",
                    l.sharers
                ));
            }
            if l.state.is_exclusive_or_modified() && holders.count() > 1 {
                return Err(format!(
                    "{address}: single-writer violated, {:?} held by {holders:?}",
                    l.state
                ));
            }
        }
        for (c, p) in self.private.iter().enumerate() {
            for (n, ()) in p.l1.iter() {
                if !p.l2.contains(n) {
                    return Err(format!("core {c}: L1 line {:#x} missing from L2", n * ls));
                }
            }
            for (n, ()) in p.l2.iter() {
                match self.llc.get(n) {
                    Some(l) if l.sharers.contains(c) => {}
                    _ => {
                        return Err(format!(
                            "core {c}: L2 line {:#x} not tracked by LLC",
                            n * ls
                        ))
                    }
                }
            }
        }
        Ok(())
    }
}
