use std::ffi::{CStr, CString};
use std::ptr;

use cohsim_ffi::*;

fn last_error() -> String {
    let p = cohsim_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn system(config: u32, spdm: u32) -> *mut CohsimSystem {
    let mut sys = ptr::null_mut();
    assert_eq!(
        unsafe { cohsim_system_new(config, spdm, &mut sys) },
        CohsimStatus::Ok
    );
    assert!(!sys.is_null());
    sys
}

#[test]
fn load_latencies_walk_the_hierarchy() {
    let sys = system(1, 0);
    let mut a = CohsimAccess::default();
    unsafe {
        assert_eq!(cohsim_system_load(sys, 0, 0x1000, &mut a), CohsimStatus::Ok);
        assert_eq!((a.hit_level, a.latency), (3, 198));
        assert_eq!(cohsim_system_load(sys, 0, 0x1000, &mut a), CohsimStatus::Ok);
        assert_eq!((a.hit_level, a.latency), (0, 2));
        assert_eq!(cohsim_system_flush(sys, 0, 0x1000), CohsimStatus::Ok);
        assert_eq!(cohsim_system_load(sys, 0, 0x1000, &mut a), CohsimStatus::Ok);
        assert_eq!(a.hit_level, 3);
        assert!(cohsim_system_now(sys) >= 198 * 2 + 2);
        cohsim_system_free(sys);
    }
}

#[test]
fn remote_exclusive_line_under_c3_and_store_latency() {
    let sys = system(3, 0);
    let mut a = CohsimAccess::default();
    let mut lat = 0u64;
    unsafe {
        assert_eq!(cohsim_system_load(sys, 1, 0x2000, &mut a), CohsimStatus::Ok);
        // Exclusive in core 1: a store there is silent.
        assert_eq!(
            cohsim_system_store(sys, 1, 0x2000, &mut lat),
            CohsimStatus::Ok
        );
        assert_eq!(lat, 2);
        assert_eq!(cohsim_system_load(sys, 0, 0x2000, &mut a), CohsimStatus::Ok);
        assert_eq!(
            a.remote_em, 0,
            "non-speculative loads are never answered REMOTE_EM"
        );
        cohsim_system_free(sys);
    }
}

#[test]
fn execute_program_reports_timer_delta() {
    let sys = system(1, 0);
    let text =
        CString::new(".in r1\n lfence\n rdtsc r2\n lfence\n load r3, [r1]\n lfence\n rdtsc r4\n")
            .unwrap();
    let mut prog = ptr::null_mut();
    let mut out = CohsimExecution::default();
    let regs = [0u64, 0x4000];
    unsafe {
        assert_eq!(
            cohsim_program_parse(text.as_ptr(), &mut prog),
            CohsimStatus::Ok
        );
        assert_eq!(
            cohsim_system_execute(sys, 0, prog, regs.as_ptr(), regs.len(), &mut out),
            CohsimStatus::Ok
        );
        assert_eq!(out.has_delta, 1);
        let miss = out.delta;
        assert_eq!(
            cohsim_system_execute(sys, 0, prog, regs.as_ptr(), regs.len(), &mut out),
            CohsimStatus::Ok
        );
        assert_eq!(miss - out.delta, 198 - 2);
        assert!(out.end_cycle > out.start_cycle);
        cohsim_program_free(prog);
        cohsim_system_free(sys);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut sys = ptr::null_mut();
    unsafe {
        assert_eq!(
            cohsim_system_new(9, 0, &mut sys),
            CohsimStatus::InvalidArgument
        );
        assert!(sys.is_null());
        assert!(last_error().contains("defense"));
        assert_eq!(
            cohsim_system_new(1, 2, &mut sys),
            CohsimStatus::InvalidArgument
        );
        assert_eq!(
            cohsim_system_new(1, 0, ptr::null_mut()),
            CohsimStatus::NullPointer
        );

        let bad = CString::new("load r1, [r2\n").unwrap();
        let mut prog = ptr::null_mut();
        assert_eq!(
            cohsim_program_parse(bad.as_ptr(), &mut prog),
            CohsimStatus::Parse
        );
        assert!(prog.is_null());
        assert!(last_error().contains("line 1"), "{}", last_error());

        assert_eq!(
            cohsim_system_load(ptr::null_mut(), 0, 0, ptr::null_mut()),
            CohsimStatus::NullPointer
        );
        let sys = system(1, 0);
        assert_ne!(
            cohsim_system_load(sys, 99, 0, ptr::null_mut()),
            CohsimStatus::Ok
        );
        let regs = [0u64; 17];
        let ok = CString::new("rdtsc r1\n").unwrap();
        assert_eq!(
            cohsim_program_parse(ok.as_ptr(), &mut prog),
            CohsimStatus::Ok
        );
        assert_eq!(
            cohsim_system_execute(sys, 0, prog, regs.as_ptr(), regs.len(), ptr::null_mut()),
            CohsimStatus::InvalidArgument
        );
        cohsim_program_free(prog);
        cohsim_system_free(sys);
        cohsim_system_free(ptr::null_mut());
        cohsim_program_free(ptr::null_mut());
    }
}

#[test]
fn lrbs_and_property_through_the_abi() {
    let mut r = CohsimLrbsResult::default();
    let mut medians = [[0u64; 2]; 5];
    for c in 1..=5u32 {
        for s in 0..2u32 {
            assert_eq!(
                unsafe { cohsim_run_lrbs(c, 0, s, 5, &mut r) },
                CohsimStatus::Ok
            );
            assert_eq!(r.runs, 5);
            medians[c as usize - 1][s as usize] = r.median_cycles;
        }
    }
    assert!(medians[2][1] > medians[2][0], "c3 leaks: {medians:?}");
    assert_eq!(medians[3][0], medians[3][1]);
    assert_eq!(medians[4][0], medians[4][1]);

    let mut p = CohsimPropertyResult::default();
    assert_eq!(
        unsafe { cohsim_check_property(5, 0, 3, &mut p) },
        CohsimStatus::Ok
    );
    assert_eq!((p.pass, p.constant, p.subsets), (1, 1, 8));
    assert_eq!(p.total, p.expected_total);
    assert_eq!(p.total, 3 * (198 + p.overhead));
    assert_eq!(
        unsafe { cohsim_check_property(3, 0, 1, &mut p) },
        CohsimStatus::Ok
    );
    assert_eq!(p.constant, 0);
}

#[test]
fn abi_version_matches_header() {
    assert_eq!(cohsim_abi_version(), COHSIM_ABI_VERSION);
    let header = include_str!("../include/cohsim.h");
    assert!(header.contains(&format!("#define COHSIM_ABI_VERSION {COHSIM_ABI_VERSION}")));
    for f in [
        "cohsim_system_new",
        "cohsim_system_execute",
        "cohsim_last_error_message",
        "cohsim_check_property",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
