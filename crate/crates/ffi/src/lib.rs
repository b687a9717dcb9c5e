//! C ABI over the simulator. Handles are opaque pointers created by a
//! `*_new`/`*_parse` call and released with the matching `*_free`. Every
//! fallible call returns a [`CohsimStatus`]; on failure the message is
//! available from [`cohsim_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cohsim::harness::{check_security_property, run_lrbs, LrbsScenario, SecurityPropertyCase};
use cohsim::hierarchy::HitLevel;
use cohsim::protocol::ResponseKind;
use cohsim::{DefenseConfig, DefenseId, Program, SimError, SpdmKind, System, SystemConfig};

pub const COHSIM_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    AddressOutOfRange = 5,
    Deadlock = 6,
    Panic = 7,
}

/// Opaque simulation instance.
pub struct CohsimSystem {
    inner: System,
}

/// Opaque parsed probe program.
pub struct CohsimProgram {
    inner: Program,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CohsimAccess {
    /// 0 = L1, 1 = L2, 2 = LLC, 3 = memory.
    pub hit_level: u32,
    /// Non-zero if the response was REMOTE_EM.
    pub remote_em: u32,
    pub latency: u64,
    pub torc_delay: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CohsimExecution {
    /// Last minus first timer read, if the program read the timer twice.
    pub delta: u64,
    pub has_delta: u32,
    pub redo_count: u32,
    pub remote_em_count: u32,
    pub squashed: u32,
    pub start_cycle: u64,
    pub end_cycle: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CohsimLrbsResult {
    pub median_cycles: u64,
    pub runs: u32,
    pub redo_count: u32,
    pub remote_em_count: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CohsimPropertyResult {
    pub pass: u32,
    pub constant: u32,
    /// Receiver total of the empty transmitter subset.
    pub total: u64,
    /// Analytic total, 0 when the configuration has none.
    pub expected_total: u64,
    pub overhead: u64,
    pub subsets: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(err: &SimError) -> CohsimStatus {
    match err {
        SimError::Config(_) => CohsimStatus::Config,
        SimError::Parse { .. } => CohsimStatus::Parse,
        SimError::AddressOutOfRange { .. } => CohsimStatus::AddressOutOfRange,
        SimError::Deadlock { .. } => CohsimStatus::Deadlock,
    }
}

/// Run `f`, mapping errors and panics to a status and recording the message.
fn guard(f: impl FnOnce() -> Result<(), (CohsimStatus, String)>) -> CohsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CohsimStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CohsimStatus::Panic
        }
    }
}

fn sim<T>(r: cohsim::Result<T>) -> Result<T, (CohsimStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CohsimStatus, String) {
    (CohsimStatus::NullPointer, format!("{what} is null"))
}

fn defense(config: u32, spdm: u32) -> Result<DefenseConfig, (CohsimStatus, String)> {
    let id = match config {
        1..=5 => DefenseId::ALL[config as usize - 1],
        _ => {
            return Err((
                CohsimStatus::InvalidArgument,
                format!("defense config {config} not in 1..5"),
            ))
        }
    };
    let spdm = match spdm {
        0 => SpdmKind::BranchShadow,
        1 => SpdmKind::RobHead,
        _ => {
            return Err((
                CohsimStatus::InvalidArgument,
                format!("spdm {spdm} not 0 or 1"),
            ))
        }
    };
    Ok(DefenseConfig::new(id, spdm))
}

/// ABI version of this library; bumped on incompatible changes.
#[no_mangle]
pub extern "C" fn cohsim_abi_version() -> u32 {
    COHSIM_ABI_VERSION
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cohsim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Create a system with default hierarchy and timing. `config` is 1..5,
/// `spdm` is 0 (branch shadow) or 1 (ROB head).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cohsim_system_new(
    config: u32,
    spdm: u32,
    out: *mut *mut CohsimSystem,
) -> CohsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = defense(config, spdm)?;
        let inner = sim(System::new(SystemConfig::new(d)))?;
        *out = Box::into_raw(Box::new(CohsimSystem { inner }));
        Ok(())
    })
}

/// # Safety
/// `sys` must be null or a pointer from `cohsim_system_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cohsim_system_free(sys: *mut CohsimSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Current value of the system clock.
///
/// # Safety
/// `sys` must be null or a live system handle.
#[no_mangle]
pub unsafe extern "C" fn cohsim_system_now(sys: *const CohsimSystem) -> u64 {
    sys.as_ref().map_or(0, |s| s.inner.now())
}

/// Non-speculative load of `address` by `core`; advances the clock.
///
/// # Safety
/// `sys` must be a live system handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cohsim_system_load(
    sys: *mut CohsimSystem,
    core: u32,
    address: u64,
    out: *mut CohsimAccess,
) -> CohsimStatus {
    guard(|| {
        let s = sys.as_mut().ok_or_else(|| null("system"))?;
        let a = sim(s.inner.load(core as usize, address))?;
        if let Some(o) = out.as_mut() {
            *o = CohsimAccess {
                hit_level: match a.hit_level {
                    HitLevel::L1 => 0,
                    HitLevel::L2 => 1,
                    HitLevel::Llc => 2,
                    HitLevel::Memory => 3,
                },
                remote_em: (a.response.kind() == ResponseKind::RemoteEm) as u32,
                latency: a.total_latency,
                torc_delay: a.torc_delay,
            };
        }
        Ok(())
    })
}

/// Store to `address` by `core`; writes the latency to `latency` if non-null.
///
/// # Safety
/// `sys` must be a live system handle; `latency` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cohsim_system_store(
    sys: *mut CohsimSystem,
    core: u32,
    address: u64,
    latency: *mut u64,
) -> CohsimStatus {
    guard(|| {
        let s = sys.as_mut().ok_or_else(|| null("system"))?;
        let o = sim(s.inner.store(core as usize, address))?;
        if let Some(l) = latency.as_mut() {
            *l = o.total_latency;
        }
        Ok(())
    })
}

/// # Safety
/// `sys` must be a live system handle.
#[no_mangle]
pub unsafe extern "C" fn cohsim_system_flush(
    sys: *mut CohsimSystem,
    core: u32,
    address: u64,
) -> CohsimStatus {
    guard(|| {
        let s = sys.as_mut().ok_or_else(|| null("system"))?;
        sim(s.inner.flush(core as usize, address))
    })
}

/// Parse a program in the text assembly form.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cohsim_program_parse(
    text: *const c_char,
    out: *mut *mut CohsimProgram,
) -> CohsimStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let src = CStr::from_ptr(text).to_str().map_err(|e| {
            (
                CohsimStatus::InvalidArgument,
                format!("program text is not UTF-8: {e}"),
            )
        })?;
        let inner = sim(Program::parse(src))?;
        *out = Box::into_raw(Box::new(CohsimProgram { inner }));
        Ok(())
    })
}

/// # Safety
/// `prog` must be null or a pointer from `cohsim_program_parse` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cohsim_program_free(prog: *mut CohsimProgram) {
    if !prog.is_null() {
        drop(Box::from_raw(prog));
    }
}

/// Run `prog` on `core`. `regs` is null or points to `nregs` (at most 16)
/// initial values for r0, r1, ...
///
/// # Safety
/// Handles must be live; `regs` must point to `nregs` readable values.
#[no_mangle]
pub unsafe extern "C" fn cohsim_system_execute(
    sys: *mut CohsimSystem,
    core: u32,
    prog: *const CohsimProgram,
    regs: *const u64,
    nregs: usize,
    out: *mut CohsimExecution,
) -> CohsimStatus {
    guard(|| {
        let s = sys.as_mut().ok_or_else(|| null("system"))?;
        let p = prog.as_ref().ok_or_else(|| null("program"))?;
        if nregs > cohsim::cpu::program::NUM_REGS {
            return Err((
                CohsimStatus::InvalidArgument,
                format!("{nregs} registers given, at most 16"),
            ));
        }
        let values: &[u64] = if regs.is_null() || nregs == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(regs, nregs)
        };
        let inputs: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (cohsim::cpu::Reg::new(i).expect("bounded above"), v))
            .collect();
        let t = sim(s.inner.execute(core as usize, &p.inner, &inputs))?;
        if let Some(o) = out.as_mut() {
            *o = CohsimExecution {
                delta: t.delta().unwrap_or(0),
                has_delta: t.delta().is_some() as u32,
                redo_count: t.redos.len() as u32,
                remote_em_count: t.remote_em_count() as u32,
                squashed: t.squashed() as u32,
                start_cycle: t.start_cycle,
                end_cycle: t.end_cycle,
            };
        }
        Ok(())
    })
}

/// Run the probe experiment for one (config, spdm, secret) cell.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cohsim_run_lrbs(
    config: u32,
    spdm: u32,
    secret: u32,
    runs: u32,
    out: *mut CohsimLrbsResult,
) -> CohsimStatus {
    guard(|| {
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let d = defense(config, spdm)?;
        let r = sim(run_lrbs(
            &LrbsScenario::new(SystemConfig::new(d), secret != 0).with_runs(runs as usize),
        ))?;
        *o = CohsimLrbsResult {
            median_cycles: r.median_cycles,
            runs: r.per_run.len() as u32,
            redo_count: r.redo_count as u32,
            remote_em_count: r.remote_em_count as u32,
        };
        Ok(())
    })
}

/// Receiver-total constancy over all subsets of an `n`-line set (1..8).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cohsim_check_property(
    config: u32,
    spdm: u32,
    n: u32,
    out: *mut CohsimPropertyResult,
) -> CohsimStatus {
    guard(|| {
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let d = defense(config, spdm)?;
        let r = sim(check_security_property(&SecurityPropertyCase::new(
            SystemConfig::new(d),
            n as usize,
        )))?;
        *o = CohsimPropertyResult {
            pass: r.pass as u32,
            constant: r.constant as u32,
            total: r.rows[0].total,
            expected_total: r.expected_total.unwrap_or(0),
            overhead: r.overhead,
            subsets: r.rows.len() as u32,
        };
        Ok(())
    })
}
