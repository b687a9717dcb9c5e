//! Directory-based MESI over a shared, inclusive LLC.
//!
//! Every LLC-resident line carries a [`DirectoryEntry`]: its stable MESI state
//! and a bit per core recording who has inserted/holds it. Transactions are
//! atomic; the timing model accounts for their latency separately.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::plru::TreePlru;

pub type CoreId = usize;

/// Maximum directory width supported by [`SharerVector`].
pub const MAX_CORES: usize = 64;

/// Line-aligned physical byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineAddr(pub u64);

impl LineAddr {
    pub fn containing(byte_addr: u64, line_size: u64) -> Self {
        LineAddr(byte_addr - byte_addr % line_size)
    }

    pub fn number(self, line_size: u64) -> u64 {
        self.0 / line_size
    }
}

impl fmt::Display for LineAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Opaque stand-in for line contents. Always non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataToken(pub u64);

impl DataToken {
    pub fn for_line(line: LineAddr) -> Self {
        DataToken(line.0.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoherenceState {
    Modified,
    Exclusive,
    Shared,
    Invalid,
}

impl CoherenceState {
    pub fn is_exclusive_or_modified(self) -> bool {
        matches!(self, CoherenceState::Modified | CoherenceState::Exclusive)
    }

    pub fn letter(self) -> char {
        match self {
            CoherenceState::Modified => 'M',
            CoherenceState::Exclusive => 'E',
            CoherenceState::Shared => 'S',
            CoherenceState::Invalid => 'I',
        }
    }
}

/// Fixed-width per-core bit set.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SharerVector {
    bits: u64,
    width: u8,
}

impl SharerVector {
    pub fn empty(width: usize) -> Self {
        assert!(
            (1..=MAX_CORES).contains(&width),
            "sharer vector width must be in 1..=64"
        );
        Self {
            bits: 0,
            width: width as u8,
        }
    }

    pub fn only(width: usize, core: CoreId) -> Self {
        let mut v = Self::empty(width);
        v.insert(core);
        v
    }

    pub fn from_bits(width: usize, bits: u64) -> Self {
        let mut v = Self::empty(width);
        v.bits = bits & v.mask();
        v
    }

    fn mask(&self) -> u64 {
        if self.width as usize == 64 {
            u64::MAX
        } else {
            (1u64 << self.width) - 1
        }
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn contains(&self, core: CoreId) -> bool {
        core < self.width() && self.bits & (1 << core) != 0
    }

    pub fn insert(&mut self, core: CoreId) {
        assert!(
            core < self.width(),
            "core {core} outside sharer vector width {}",
            self.width
        );
        self.bits |= 1 << core;
    }

    pub fn remove(&mut self, core: CoreId) {
        if core < self.width() {
            self.bits &= !(1 << core);
        }
    }

    pub fn count(&self) -> u32 {
        self.bits.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = CoreId> + '_ {
        (0..self.width()).filter(|c| self.contains(*c))
    }
}

impl fmt::Debug for SharerVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, c) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "core{c}")?;
        }
        write!(f, "}}")
    }
}

/// Directory state for one LLC-resident line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DirectoryEntry {
    pub address: LineAddr,
    pub state: CoherenceState,
    pub sharers: SharerVector,
    /// Snapshot of the LLC set's replacement tree, refreshed on every mutation.
    pub replacement: TreePlru,
}

impl DirectoryEntry {
    /// Checks the state/sharer-count pairing every entry must satisfy.
    pub fn is_consistent(&self) -> bool {
        match self.state {
            CoherenceState::Modified | CoherenceState::Exclusive => self.sharers.count() == 1,
            CoherenceState::Shared => self.sharers.count() >= 1,
            CoherenceState::Invalid => self.sharers.is_empty(),
        }
    }

    pub fn owner(&self) -> Option<CoreId> {
        if self.state.is_exclusive_or_modified() {
            self.sharers.iter().next()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolVariant {
    Mesi,
    /// Load misses fill in Shared instead of Exclusive.
    SsMesi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Gets,
    Getx,
    Flush,
    RedoGets,
}

/// A request leaving a private cache. Redo requests are never speculative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheRequest {
    kind: RequestKind,
    address: LineAddr,
    requester: CoreId,
    spec_flag: bool,
}

impl CacheRequest {
    pub fn gets(address: LineAddr, requester: CoreId, spec_flag: bool) -> Self {
        Self {
            kind: RequestKind::Gets,
            address,
            requester,
            spec_flag,
        }
    }

    pub fn redo(address: LineAddr, requester: CoreId) -> Self {
        Self {
            kind: RequestKind::RedoGets,
            address,
            requester,
            spec_flag: false,
        }
    }

    pub fn getx(address: LineAddr, requester: CoreId) -> Self {
        Self {
            kind: RequestKind::Getx,
            address,
            requester,
            spec_flag: false,
        }
    }

    pub fn flush(address: LineAddr, requester: CoreId) -> Self {
        Self {
            kind: RequestKind::Flush,
            address,
            requester,
            spec_flag: false,
        }
    }

    pub fn kind(&self) -> RequestKind {
        self.kind
    }

    pub fn address(&self) -> LineAddr {
        self.address
    }

    pub fn requester(&self) -> CoreId {
        self.requester
    }

    pub fn spec_flag(&self) -> bool {
        self.spec_flag
    }

    pub fn is_load(&self) -> bool {
        matches!(self.kind, RequestKind::Gets | RequestKind::RedoGets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseKind {
    Data,
    /// Dataless presence feedback for a protected load.
    RemoteEm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheResponse {
    kind: ResponseKind,
    pub latency: u64,
    data: Option<DataToken>,
}

impl CacheResponse {
    pub fn data(latency: u64, token: DataToken) -> Self {
        Self {
            kind: ResponseKind::Data,
            latency,
            data: Some(token),
        }
    }

    pub fn remote_em(latency: u64) -> Self {
        Self {
            kind: ResponseKind::RemoteEm,
            latency,
            data: None,
        }
    }

    pub fn kind(&self) -> ResponseKind {
        self.kind
    }

    pub fn token(&self) -> Option<DataToken> {
        self.data
    }
}

/// True iff `requester` did not insert the line itself.
pub fn is_remote(entry: &DirectoryEntry, requester: CoreId) -> bool {
    debug_assert!(entry.state != CoherenceState::Invalid);
    !entry.sharers.contains(requester)
}

/// Result of a load transaction at the directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GetsOutcome {
    /// Directory state/sharers after the transaction.
    pub state: CoherenceState,
    pub sharers: SharerVector,
    pub response: ResponseKind,
    /// State the requester's private copy is filled in; `Invalid` for REMOTE_EM.
    pub fill: CoherenceState,
    /// The previous owner held dirty data that had to be written back.
    pub writeback: bool,
    pub hit: bool,
}

/// Load (or redo) transaction. `entry` is `None` on an LLC miss.
///
/// `dsrc_active` decides whether a speculative hit on a remote E/M line is
/// answered with REMOTE_EM (and leaves the directory untouched) instead of the
/// ordinary E/M to S downgrade.
pub fn handle_gets(
    entry: Option<&DirectoryEntry>,
    req: &CacheRequest,
    variant: ProtocolVariant,
    dsrc_active: bool,
    width: usize,
) -> GetsOutcome {
    debug_assert!(req.is_load());
    let core = req.requester();
    let Some(entry) = entry.filter(|e| e.state != CoherenceState::Invalid) else {
        let fill = match variant {
            ProtocolVariant::Mesi => CoherenceState::Exclusive,
            ProtocolVariant::SsMesi => CoherenceState::Shared,
        };
        return GetsOutcome {
            state: fill,
            sharers: SharerVector::only(width, core),
            response: ResponseKind::Data,
            fill,
            writeback: false,
            hit: false,
        };
    };

    let remote = is_remote(entry, core);
    if remote && entry.state.is_exclusive_or_modified() {
        if req.spec_flag() && dsrc_active {
            return GetsOutcome {
                state: entry.state,
                sharers: entry.sharers,
                response: ResponseKind::RemoteEm,
                fill: CoherenceState::Invalid,
                writeback: false,
                hit: true,
            };
        }
        let mut sharers = entry.sharers;
        sharers.insert(core);
        return GetsOutcome {
            state: CoherenceState::Shared,
            sharers,
            response: ResponseKind::Data,
            fill: CoherenceState::Shared,
            writeback: entry.state == CoherenceState::Modified,
            hit: true,
        };
    }

    // Shared line, or a line this core already holds.
    let mut sharers = entry.sharers;
    sharers.insert(core);
    GetsOutcome {
        state: entry.state,
        sharers,
        response: ResponseKind::Data,
        fill: entry.state,
        writeback: false,
        hit: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpgradeClass {
    /// E (or M) to M with no coherence traffic.
    Silent,
    /// S to M: every other sharer is invalidated.
    Broadcast,
    /// Requester did not hold the line; any holders are invalidated.
    Fill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GetxOutcome {
    pub state: CoherenceState,
    pub sharers: SharerVector,
    /// Cores other than the requester whose copies were invalidated.
    pub invalidated: SharerVector,
    pub class: UpgradeClass,
    pub writeback: bool,
    pub hit: bool,
}

impl GetxOutcome {
    pub fn invalidations(&self) -> u32 {
        self.invalidated.count()
    }
}

/// Store transaction. Always leaves the requester as the single M owner.
pub fn handle_getx(
    entry: Option<&DirectoryEntry>,
    req: &CacheRequest,
    width: usize,
) -> GetxOutcome {
    let core = req.requester();
    let owner_only = SharerVector::only(width, core);
    let Some(entry) = entry.filter(|e| e.state != CoherenceState::Invalid) else {
        return GetxOutcome {
            state: CoherenceState::Modified,
            sharers: owner_only,
            invalidated: SharerVector::empty(width),
            class: UpgradeClass::Fill,
            writeback: false,
            hit: false,
        };
    };
    let mut invalidated = entry.sharers;
    invalidated.remove(core);
    let holds = entry.sharers.contains(core);
    let class = match (holds, entry.state) {
        (true, CoherenceState::Exclusive | CoherenceState::Modified) => UpgradeClass::Silent,
        (true, _) => UpgradeClass::Broadcast,
        (false, _) => UpgradeClass::Fill,
    };
    GetxOutcome {
        state: CoherenceState::Modified,
        sharers: owner_only,
        invalidated,
        class,
        writeback: !holds && entry.state == CoherenceState::Modified,
        hit: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: usize = 8;

    fn entry(state: CoherenceState, cores: &[CoreId]) -> DirectoryEntry {
        let mut sharers = SharerVector::empty(W);
        for c in cores {
            sharers.insert(*c);
        }
        DirectoryEntry {
            address: LineAddr(0x1000),
            state,
            sharers,
            replacement: TreePlru::new(16),
        }
    }

    #[test]
    fn remote_e_line_is_remote_for_other_core() {
        assert!(is_remote(&entry(CoherenceState::Exclusive, &[1]), 0));
    }

    #[test]
    fn own_insertion_is_local() {
        assert!(!is_remote(&entry(CoherenceState::Exclusive, &[0]), 0));
    }

    #[test]
    fn sharer_is_local() {
        assert!(!is_remote(&entry(CoherenceState::Shared, &[0, 1]), 0));
    }

    #[test]
    fn cold_miss_fills_exclusive_under_mesi() {
        let req = CacheRequest::gets(LineAddr(0x1000), 0, false);
        let out = handle_gets(None, &req, ProtocolVariant::Mesi, false, W);
        assert_eq!(out.fill, CoherenceState::Exclusive);
        assert_eq!(out.state, CoherenceState::Exclusive);
        assert_eq!(out.sharers, SharerVector::only(W, 0));
        assert_eq!(out.response, ResponseKind::Data);
    }

    #[test]
    fn cold_miss_fills_shared_under_ss_mesi() {
        let req = CacheRequest::gets(LineAddr(0x1000), 0, true);
        let out = handle_gets(None, &req, ProtocolVariant::SsMesi, true, W);
        assert_eq!(out.fill, CoherenceState::Shared);
        assert_eq!(out.sharers, SharerVector::only(W, 0));
        assert_eq!(out.response, ResponseKind::Data);
    }

    #[test]
    fn speculative_hit_on_remote_e_with_dsrc_is_deferred() {
        let e = entry(CoherenceState::Exclusive, &[1]);
        let req = CacheRequest::gets(e.address, 0, true);
        let out = handle_gets(Some(&e), &req, ProtocolVariant::Mesi, true, W);
        assert_eq!(out.response, ResponseKind::RemoteEm);
        assert_eq!(out.state, CoherenceState::Exclusive);
        assert_eq!(out.sharers, SharerVector::only(W, 1));
        assert_eq!(out.fill, CoherenceState::Invalid);
    }

    #[test]
    fn non_speculative_hit_on_remote_e_downgrades() {
        let e = entry(CoherenceState::Exclusive, &[1]);
        let req = CacheRequest::gets(e.address, 0, false);
        let out = handle_gets(Some(&e), &req, ProtocolVariant::Mesi, true, W);
        assert_eq!(out.response, ResponseKind::Data);
        assert_eq!(out.state, CoherenceState::Shared);
        assert_eq!(out.sharers.iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn redo_on_remote_m_downgrades_with_writeback() {
        let e = entry(CoherenceState::Modified, &[1]);
        let req = CacheRequest::redo(e.address, 0);
        assert!(!req.spec_flag());
        let out = handle_gets(Some(&e), &req, ProtocolVariant::Mesi, true, W);
        assert_eq!(out.state, CoherenceState::Shared);
        assert!(out.writeback);
    }

    #[test]
    fn speculative_hit_without_dsrc_downgrades() {
        let e = entry(CoherenceState::Exclusive, &[1]);
        let req = CacheRequest::gets(e.address, 0, true);
        let out = handle_gets(Some(&e), &req, ProtocolVariant::Mesi, false, W);
        assert_eq!(out.response, ResponseKind::Data);
        assert_eq!(out.state, CoherenceState::Shared);
    }

    #[test]
    fn silent_upgrade_from_exclusive() {
        let e = entry(CoherenceState::Exclusive, &[0]);
        let out = handle_getx(Some(&e), &CacheRequest::getx(e.address, 0), W);
        assert_eq!(out.state, CoherenceState::Modified);
        assert_eq!(out.invalidations(), 0);
        assert_eq!(out.class, UpgradeClass::Silent);
    }

    #[test]
    fn broadcast_upgrade_from_shared_pair() {
        let e = entry(CoherenceState::Shared, &[0, 1]);
        let out = handle_getx(Some(&e), &CacheRequest::getx(e.address, 0), W);
        assert_eq!(out.state, CoherenceState::Modified);
        assert_eq!(out.invalidations(), 1);
        assert_eq!(out.class, UpgradeClass::Broadcast);
        assert_eq!(out.sharers, SharerVector::only(W, 0));
    }

    #[test]
    fn broadcast_upgrade_from_all_eight_sharers() {
        let e = entry(CoherenceState::Shared, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let out = handle_getx(Some(&e), &CacheRequest::getx(e.address, 0), W);
        assert_eq!(out.invalidations(), 7);
        assert_eq!(out.class, UpgradeClass::Broadcast);
    }

    #[test]
    fn invalidation_count_matches_popcount_minus_one_for_every_vector() {
        // Enumerate every 8-bit sharer vector containing the requester.
        for bits in 0u64..256 {
            if bits & 1 == 0 {
                continue;
            }
            let sharers = SharerVector::from_bits(W, bits);
            let e = DirectoryEntry {
                address: LineAddr(0),
                state: CoherenceState::Shared,
                sharers,
                replacement: TreePlru::new(16),
            };
            let out = handle_getx(Some(&e), &CacheRequest::getx(e.address, 0), W);
            let mut brute = 0;
            for c in 1..W {
                if bits >> c & 1 == 1 {
                    brute += 1;
                }
            }
            assert_eq!(out.invalidations(), brute, "bits={bits:#010b}");
            assert_eq!(out.invalidations(), bits.count_ones() - 1);
        }
    }

    #[test]
    fn store_miss_fills_modified() {
        let out = handle_getx(None, &CacheRequest::getx(LineAddr(64), 3), W);
        assert_eq!(out.state, CoherenceState::Modified);
        assert_eq!(out.class, UpgradeClass::Fill);
        assert_eq!(out.sharers, SharerVector::only(W, 3));
    }

    #[test]
    fn consistency_rules() {
        assert!(entry(CoherenceState::Exclusive, &[2]).is_consistent());
        assert!(!entry(CoherenceState::Exclusive, &[1, 2]).is_consistent());
        assert!(!entry(CoherenceState::Shared, &[]).is_consistent());
        assert!(entry(CoherenceState::Invalid, &[]).is_consistent());
    }
}
