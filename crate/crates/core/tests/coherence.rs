mod common;

use cohsim::hierarchy::{CacheLevelConfig, Hierarchy, HierarchyConfig};
use cohsim::protocol::{CacheRequest, LineAddr, ResponseKind};
use cohsim::{DefenseConfig, DefenseId, SpdmKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny caches so that private and LLC evictions happen constantly.
fn tiny(cores: usize) -> HierarchyConfig {
    HierarchyConfig {
        l1: CacheLevelConfig::new(2 * 64, 2),
        l2: CacheLevelConfig::new(4 * 64, 2),
        llc: CacheLevelConfig::new(8 * 64, 2),
        ..common::config(cores)
    }
}

#[test]
fn invariants_survive_evictions() {
    for d in DefenseId::ALL {
        let cfg = tiny(4);
        let mut h = Hierarchy::new(cfg, DefenseConfig::new(d, SpdmKind::BranchShadow)).unwrap();
        let lines: Vec<LineAddr> = (0..32).map(|i| LineAddr(i * cfg.line_size)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..20_000u64 {
            let line = lines[rng.gen_range(0..lines.len())];
            let core = rng.gen_range(0..4);
            let req = match rng.gen_range(0..10) {
                0..=4 => CacheRequest::gets(line, core, rng.gen()),
                5 => CacheRequest::redo(line, core),
                6..=8 => CacheRequest::getx(line, core),
                _ => CacheRequest::flush(line, core),
            };
            let out = h.access(&req, i).unwrap();
            if out.response.kind() == ResponseKind::RemoteEm {
                assert!(out.response.token().is_none());
            }
            common::check_lines(&h, &lines, false)
                .unwrap_or_else(|e| panic!("{d} op {i} {req:?}: {e}"));
            h.check_invariants(false)
                .unwrap_or_else(|e| panic!("{d} op {i}: {e}"));
        }
        assert!(h.silent_evictions() > 0, "{d}: no evictions exercised");
    }
}

#[test]
fn fuzz_is_seed_deterministic() {
    let d = DefenseConfig::new(DefenseId::C4TorcDsrm, SpdmKind::BranchShadow);
    let a = common::fuzz(d, 3, 16, 2_000, 11, false).unwrap();
    let b = common::fuzz(d, 3, 16, 2_000, 11, false).unwrap();
    assert_eq!(
        (a.ops, a.remote_em, a.e_observed),
        (b.ops, b.remote_em, b.e_observed)
    );
    assert!(a.remote_em > 0);
}
