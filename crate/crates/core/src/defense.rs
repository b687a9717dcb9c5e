//! Defense configurations and the LLC-side hooks they install.
//!
//! | id | TORC | feedback | protocol |
//! |----|------|----------|----------|
//! | C1 | off  | data only | MESI |
//! | C2 | on   | data only | MESI |
//! | C3 | non-speculative accesses only | REMOTE_EM on spec remote E/M hit | MESI |
//! | C4 | on   | REMOTE_EM on spec remote E/M hit *or* miss | MESI |
//! | C5 | on   | REMOTE_EM on spec remote E/M hit | SS-MESI |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cpu::SpdmKind;
use crate::error::SimError;
use crate::protocol::{CacheRequest, DataToken, LineAddr, ProtocolVariant, ResponseKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefenseId {
    #[serde(rename = "c1")]
    C1Insecure,
    #[serde(rename = "c2")]
    C2Torc,
    #[serde(rename = "c3")]
    C3TorcDsrc,
    #[serde(rename = "c4")]
    C4TorcDsrm,
    #[serde(rename = "c5")]
    C5TorcDsrcSsMesi,
}

impl DefenseId {
    pub const ALL: [DefenseId; 5] = [
        DefenseId::C1Insecure,
        DefenseId::C2Torc,
        DefenseId::C3TorcDsrc,
        DefenseId::C4TorcDsrm,
        DefenseId::C5TorcDsrcSsMesi,
    ];

    pub fn short(self) -> &'static str {
        match self {
            DefenseId::C1Insecure => "c1",
            DefenseId::C2Torc => "c2",
            DefenseId::C3TorcDsrc => "c3",
            DefenseId::C4TorcDsrm => "c4",
            DefenseId::C5TorcDsrcSsMesi => "c5",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DefenseId::C1Insecure => "insecure",
            DefenseId::C2Torc => "torc",
            DefenseId::C3TorcDsrc => "torc+dsrc",
            DefenseId::C4TorcDsrm => "torc+dsrm",
            DefenseId::C5TorcDsrcSsMesi => "torc+dsrc+ss-mesi",
        }
    }
}

impl fmt::Display for DefenseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for DefenseId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "c1" | "insecure" => Ok(DefenseId::C1Insecure),
            "c2" | "torc" => Ok(DefenseId::C2Torc),
            "c3" | "torc+dsrc" => Ok(DefenseId::C3TorcDsrc),
            "c4" | "torc+dsrm" => Ok(DefenseId::C4TorcDsrm),
            "c5" | "torc+dsrc+ss-mesi" => Ok(DefenseId::C5TorcDsrcSsMesi),
            other => Err(SimError::config(format!(
                "unknown defense config `{other}` (expected c1..c5)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub id: DefenseId,
    pub spdm: SpdmKind,
    /// C4 only: skip the TORC delay on the initial protected access.
    pub dsrm_optimized: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self::new(DefenseId::C1Insecure, SpdmKind::BranchShadow)
    }
}

impl DefenseConfig {
    pub fn new(id: DefenseId, spdm: SpdmKind) -> Self {
        Self {
            id,
            spdm,
            dsrm_optimized: true,
        }
    }

    pub fn with_dsrm_optimized(mut self, optimized: bool) -> Self {
        self.dsrm_optimized = optimized;
        self
    }

    pub fn protocol_variant(&self) -> ProtocolVariant {
        match self.id {
            DefenseId::C5TorcDsrcSsMesi => ProtocolVariant::SsMesi,
            _ => ProtocolVariant::Mesi,
        }
    }

    pub fn torc_enabled(&self) -> bool {
        self.id != DefenseId::C1Insecure
    }

    /// Whether speculative remote E/M hits are answered with REMOTE_EM.
    pub fn defers_remote_em(&self) -> bool {
        matches!(
            self.id,
            DefenseId::C3TorcDsrc | DefenseId::C4TorcDsrm | DefenseId::C5TorcDsrcSsMesi
        )
    }

    /// Whether behaviour depends on the speculation protection flag at all.
    pub fn is_speculation_aware(&self) -> bool {
        self.defers_remote_em()
    }

    /// Whether a data response to a remote-line hit gets the TORC delay.
    pub fn torc_applies(&self, spec_flag: bool) -> bool {
        match self.id {
            DefenseId::C1Insecure => false,
            DefenseId::C3TorcDsrc => !spec_flag,
            _ => true,
        }
    }

    /// Whether a REMOTE_EM response is held back to miss-equivalent time.
    pub fn delays_remote_em(&self) -> bool {
        match self.id {
            DefenseId::C4TorcDsrm => !self.dsrm_optimized,
            DefenseId::C3TorcDsrc | DefenseId::C5TorcDsrcSsMesi => true,
            _ => false,
        }
    }

    pub fn describe(&self) -> String {
        if self.is_speculation_aware() {
            format!("{} ({}, {})", self.id, self.id.label(), self.spdm)
        } else {
            format!("{} ({})", self.id, self.id.label())
        }
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Response kind chosen at the LLC for a load reaching it.
pub fn feedback_policy(
    hit: bool,
    remote_em: bool,
    spec_flag: bool,
    config: &DefenseConfig,
) -> ResponseKind {
    let remote_em_hit = hit && remote_em;
    let send = match config.id {
        DefenseId::C1Insecure | DefenseId::C2Torc => false,
        DefenseId::C3TorcDsrc | DefenseId::C5TorcDsrcSsMesi => spec_flag && remote_em_hit,
        DefenseId::C4TorcDsrm => spec_flag && (!hit || remote_em_hit),
    };
    if send {
        ResponseKind::RemoteEm
    } else {
        ResponseKind::Data
    }
}

/// What the LLC lookup produced before any defense-injected delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawLlcResult {
    pub hit: bool,
    pub remote: bool,
    pub response: ResponseKind,
    /// Latency of the path actually taken (LLC hit latency, miss latency, or
    /// LLC latency for dataless feedback).
    pub unshaped_latency: u64,
    /// Latency a miss to the same address would see.
    pub miss_latency: u64,
}

/// Latency after the TORC hook. Never below the unshaped latency.
pub fn torc_shape(raw: &RawLlcResult, req: &CacheRequest, config: &DefenseConfig) -> u64 {
    let shaped = match raw.response {
        ResponseKind::RemoteEm => {
            if config.delays_remote_em() {
                raw.miss_latency
            } else {
                raw.unshaped_latency
            }
        }
        ResponseKind::Data => {
            if raw.hit && raw.remote && config.torc_applies(req.spec_flag()) {
                raw.miss_latency
            } else {
                raw.unshaped_latency
            }
        }
    };
    shaped.max(raw.unshaped_latency)
}

pub const TORC_BUFFER_ENTRIES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorcEntry {
    pub address: LineAddr,
    pub token: Option<DataToken>,
    /// Set when the held response is REMOTE_EM feedback rather than data.
    pub remote_em: bool,
    pub release_cycle: u64,
}

/// Per-core holding buffer for delayed responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TorcBuffer {
    capacity: usize,
    entries: Vec<TorcEntry>,
}

impl Default for TorcBuffer {
    fn default() -> Self {
        Self::new(TORC_BUFFER_ENTRIES)
    }
}

impl TorcBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Drop entries whose responses have been released by `now`.
    pub fn retire(&mut self, now: u64) {
        self.entries.retain(|e| e.release_cycle > now);
    }

    pub fn occupancy(&self, now: u64) -> usize {
        self.entries
            .iter()
            .filter(|e| e.release_cycle > now)
            .count()
    }

    /// Earliest cycle `>= now` at which an entry is free.
    pub fn next_free(&self, now: u64) -> u64 {
        let mut live: Vec<u64> = self
            .entries
            .iter()
            .map(|e| e.release_cycle)
            .filter(|r| *r > now)
            .collect();
        if live.len() < self.capacity {
            return now;
        }
        live.sort_unstable();
        live[live.len() - self.capacity]
    }

    /// Hold a response. The caller must have waited for `next_free`.
    pub fn hold(&mut self, entry: TorcEntry, now: u64) {
        self.retire(now);
        debug_assert!(self.entries.len() < self.capacity);
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TorcEntry] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(id: DefenseId) -> DefenseConfig {
        DefenseConfig::new(id, SpdmKind::BranchShadow)
    }

    #[test]
    fn c3_speculative_remote_e_hit_gets_feedback() {
        assert_eq!(
            feedback_policy(true, true, true, &cfg(DefenseId::C3TorcDsrc)),
            ResponseKind::RemoteEm
        );
    }

    #[test]
    fn c4_speculative_miss_is_equalized() {
        assert_eq!(
            feedback_policy(false, false, true, &cfg(DefenseId::C4TorcDsrm)),
            ResponseKind::RemoteEm
        );
    }

    #[test]
    fn c4_non_speculative_miss_returns_data() {
        assert_eq!(
            feedback_policy(false, false, false, &cfg(DefenseId::C4TorcDsrm)),
            ResponseKind::Data
        );
    }

    #[test]
    fn c3_speculative_hit_on_shared_returns_data() {
        assert_eq!(
            feedback_policy(true, false, true, &cfg(DefenseId::C3TorcDsrc)),
            ResponseKind::Data
        );
    }

    #[test]
    fn c1_c2_never_send_feedback() {
        for id in [DefenseId::C1Insecure, DefenseId::C2Torc] {
            for bits in 0..8u8 {
                let r = feedback_policy(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, &cfg(id));
                assert_eq!(r, ResponseKind::Data);
            }
        }
    }

    #[test]
    fn only_c5_uses_ss_mesi() {
        for id in DefenseId::ALL {
            let expect = if id == DefenseId::C5TorcDsrcSsMesi {
                ProtocolVariant::SsMesi
            } else {
                ProtocolVariant::Mesi
            };
            assert_eq!(cfg(id).protocol_variant(), expect);
        }
    }

    fn raw(hit: bool, remote: bool, response: ResponseKind) -> RawLlcResult {
        RawLlcResult {
            hit,
            remote,
            response,
            unshaped_latency: if hit || response == ResponseKind::RemoteEm {
                58
            } else {
                198
            },
            miss_latency: 198,
        }
    }

    #[test]
    fn torc_masks_remote_hit_as_miss() {
        let req = CacheRequest::gets(LineAddr(0x40), 0, false);
        assert_eq!(
            torc_shape(
                &raw(true, true, ResponseKind::Data),
                &req,
                &cfg(DefenseId::C2Torc)
            ),
            198
        );
    }

    #[test]
    fn torc_leaves_local_hits_and_misses_alone() {
        let req = CacheRequest::gets(LineAddr(0x40), 0, false);
        let c2 = cfg(DefenseId::C2Torc);
        assert_eq!(
            torc_shape(&raw(true, false, ResponseKind::Data), &req, &c2),
            58
        );
        assert_eq!(
            torc_shape(&raw(false, false, ResponseKind::Data), &req, &c2),
            198
        );
    }

    #[test]
    fn c3_skips_torc_on_speculative_data_but_delays_feedback() {
        let spec = CacheRequest::gets(LineAddr(0x40), 0, true);
        let c3 = cfg(DefenseId::C3TorcDsrc);
        assert_eq!(
            torc_shape(&raw(true, true, ResponseKind::Data), &spec, &c3),
            58
        );
        assert_eq!(
            torc_shape(&raw(true, true, ResponseKind::RemoteEm), &spec, &c3),
            198
        );
    }

    #[test]
    fn optimized_c4_returns_feedback_at_llc_latency() {
        let spec = CacheRequest::gets(LineAddr(0x40), 0, true);
        let c4 = cfg(DefenseId::C4TorcDsrm);
        assert_eq!(
            torc_shape(&raw(false, false, ResponseKind::RemoteEm), &spec, &c4),
            58
        );
        let slow = c4.with_dsrm_optimized(false);
        assert_eq!(
            torc_shape(&raw(false, false, ResponseKind::RemoteEm), &spec, &slow),
            198
        );
    }

    #[test]
    fn torc_buffer_backpressure() {
        let mut buf = TorcBuffer::new(2);
        let e = |release| TorcEntry {
            address: LineAddr(0),
            token: None,
            remote_em: false,
            release_cycle: release,
        };
        assert_eq!(buf.next_free(0), 0);
        buf.hold(e(100), 0);
        buf.hold(e(50), 0);
        assert_eq!(buf.next_free(10), 50);
        assert_eq!(buf.next_free(50), 50);
        buf.hold(e(120), 50);
        assert_eq!(buf.occupancy(60), 2);
        assert_eq!(buf.next_free(60), 100);
    }

    #[test]
    fn parses_config_ids() {
        assert_eq!("C4".parse::<DefenseId>().unwrap(), DefenseId::C4TorcDsrm);
        assert!("c9".parse::<DefenseId>().is_err());
    }
}
