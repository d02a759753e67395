//! C interface to the anoncount simulator.
//!
//! A run is started with [`anc_run`], which hands back an opaque [`AncRun`]
//! handle. Query functions read from the handle; [`anc_run_free`] releases
//! it. Every fallible function returns an [`AncStatus`]; on failure a
//! message is available from [`anc_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use anoncount::engine::{round_bound, RunConfig, SchedulerSpec};
use anoncount::harness::{run_experiment, ExperimentResult};
use anoncount::protocol::{Mode, Output};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AncStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The simulator rejected the configuration or the schedule.
    EngineError = 3,
    /// The run has no value of the requested kind.
    NoOutput = 4,
    IndexOutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AncMode {
    Basic = 0,
    Simultaneous = 1,
    Generalized = 2,
}

/// Metrics of a finished run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AncMetrics {
    pub rounds: u64,
    pub resets: u64,
    pub max_diam_estimate: u64,
    pub distinct_red_edges: u64,
    pub max_msg_bits: u64,
    pub max_param: u64,
    /// Level at which the leader first obtained a count, or -1.
    pub count_level: i64,
    /// Output matches the true network.
    pub correct: bool,
    /// Correct and no invariant violated.
    pub passed: bool,
}

/// Opaque handle to a finished run.
pub struct AncRun {
    result: ExperimentResult,
    violations: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> AncStatus) -> AncStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            AncStatus::Panic
        }
    }
}

fn fail(status: AncStatus, msg: impl Into<String>) -> AncStatus {
    set_error(msg);
    status
}

/// Last error message on this thread, or NULL. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn anc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Worst-case round bound for a connected network of `n` processes.
#[no_mangle]
pub extern "C" fn anc_round_bound(n: u32) -> u64 {
    round_bound(n as usize)
}

/// Runs one experiment.
///
/// `scheduler` is a NUL-terminated name such as `"random-connected"`,
/// `"path"`, `"alternating:star+path"` or `"t-union:2"`. `inputs` holds one
/// value per process in generalized mode and may be NULL otherwise. When
/// `check` is set the invariant monitor runs alongside.
///
/// # Safety
/// `scheduler` must be a valid C string, `inputs` must point to
/// `inputs_len` values (or be NULL with length 0) and `out` must be a valid
/// pointer. The handle written to `out` must be released with
/// [`anc_run_free`].
#[no_mangle]
pub unsafe extern "C" fn anc_run(
    n: u32,
    scheduler: *const c_char,
    seed: u64,
    mode: AncMode,
    inputs: *const u64,
    inputs_len: usize,
    check: bool,
    out: *mut *mut AncRun,
) -> AncStatus {
    guard(|| {
        if scheduler.is_null() || out.is_null() || (inputs.is_null() && inputs_len > 0) {
            return fail(AncStatus::NullPointer, "null argument");
        }
        // SAFETY: checked non-null; the caller guarantees a C string.
        let Ok(name) = unsafe { CStr::from_ptr(scheduler) }.to_str() else {
            return fail(AncStatus::InvalidArgument, "scheduler name is not UTF-8");
        };
        if n == 0 {
            return fail(AncStatus::InvalidArgument, "n must be at least 1");
        }
        let spec: SchedulerSpec = match name.parse() {
            Ok(s) => s,
            Err(e) => return fail(AncStatus::InvalidArgument, format!("{e}")),
        };
        let mode = match mode {
            AncMode::Basic => Mode::Basic,
            AncMode::Simultaneous => Mode::Simultaneous,
            AncMode::Generalized => Mode::Generalized,
        };
        let values = if inputs_len == 0 {
            Vec::new()
        } else {
            // SAFETY: non-null and `inputs_len` long per the contract.
            unsafe { std::slice::from_raw_parts(inputs, inputs_len) }.to_vec()
        };
        if mode == Mode::Generalized && values.len() != n as usize {
            return fail(AncStatus::InvalidArgument, format!("generalized mode needs {n} inputs"));
        }
        let config = RunConfig::new(n as usize, spec).seed(seed).mode(mode).inputs(values);
        match run_experiment(&config, check) {
            Ok(result) => {
                let violations = result
                    .violations
                    .iter()
                    .map(|v| CString::new(v.to_string().replace('\0', " ")).expect("no interior NUL"))
                    .collect();
                // SAFETY: `out` checked non-null.
                unsafe { *out = Box::into_raw(Box::new(AncRun { result, violations })) };
                AncStatus::Ok
            }
            Err(e) => fail(AncStatus::EngineError, e.to_string()),
        }
    })
}

/// Releases a run handle. NULL is ignored.
///
/// # Safety
/// `run` must come from [`anc_run`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn anc_run_free(run: *mut AncRun) {
    if !run.is_null() {
        // SAFETY: produced by `Box::into_raw` in `anc_run`.
        drop(unsafe { Box::from_raw(run) });
    }
}

/// # Safety
/// `run` must be NULL or a live handle.
unsafe fn handle<'a>(run: *const AncRun) -> Option<&'a AncRun> {
    // SAFETY: the caller passes NULL or a live handle.
    unsafe { run.as_ref() }
}

/// Count output by the leader (basic and simultaneous modes).
///
/// # Safety
/// `run` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn anc_run_count(run: *const AncRun, count: *mut u64) -> AncStatus {
    guard(|| {
        let (Some(r), false) = (unsafe { handle(run) }, count.is_null()) else {
            return fail(AncStatus::NullPointer, "null argument");
        };
        let output = r.result.report.outputs.iter().flatten().next();
        match output {
            Some(Output::Count(c)) => {
                // SAFETY: checked non-null.
                unsafe { *count = *c };
                AncStatus::Ok
            }
            _ => fail(AncStatus::NoOutput, "run produced no count"),
        }
    })
}

/// Number of distinct non-leader input values in a generalized output.
///
/// # Safety
/// `run` must be a live handle and `len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn anc_run_input_classes(run: *const AncRun, len: *mut usize) -> AncStatus {
    guard(|| {
        let (Some(r), false) = (unsafe { handle(run) }, len.is_null()) else {
            return fail(AncStatus::NullPointer, "null argument");
        };
        match r.result.report.leader_output() {
            Some(Output::Inputs(v)) => {
                // SAFETY: checked non-null.
                unsafe { *len = v.len() };
                AncStatus::Ok
            }
            _ => fail(AncStatus::NoOutput, "run produced no input multiset"),
        }
    })
}

/// Entry `index` of a generalized output: an input value and the number of
/// processes holding it.
///
/// # Safety
/// `run` must be a live handle; `value` and `count` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn anc_run_input_at(
    run: *const AncRun,
    index: usize,
    value: *mut u64,
    count: *mut u64,
) -> AncStatus {
    guard(|| {
        let (Some(r), false) = (unsafe { handle(run) }, value.is_null() || count.is_null()) else {
            return fail(AncStatus::NullPointer, "null argument");
        };
        let Some(Output::Inputs(v)) = r.result.report.leader_output() else {
            return fail(AncStatus::NoOutput, "run produced no input multiset");
        };
        let Some(&(val, cnt)) = v.get(index) else {
            return fail(AncStatus::IndexOutOfRange, format!("index {index} of {}", v.len()));
        };
        // SAFETY: checked non-null.
        unsafe {
            *value = val;
            *count = cnt;
        }
        AncStatus::Ok
    })
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn anc_run_metrics(run: *const AncRun, out: *mut AncMetrics) -> AncStatus {
    guard(|| {
        let (Some(r), false) = (unsafe { handle(run) }, out.is_null()) else {
            return fail(AncStatus::NullPointer, "null argument");
        };
        let m = &r.result.report.metrics;
        let metrics = AncMetrics {
            rounds: m.rounds,
            resets: m.resets,
            max_diam_estimate: m.max_diam_estimate,
            distinct_red_edges: m.distinct_red_edges as u64,
            max_msg_bits: m.max_msg_bits as u64,
            max_param: m.max_param,
            count_level: r.result.count_level.map_or(-1, |l| l as i64),
            correct: r.result.row.correct,
            passed: r.result.passed(),
        };
        // SAFETY: checked non-null.
        unsafe { *out = metrics };
        AncStatus::Ok
    })
}

/// Number of invariant violations recorded by the monitor.
///
/// # Safety
/// `run` must be a live handle and `len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn anc_run_violation_count(run: *const AncRun, len: *mut usize) -> AncStatus {
    guard(|| {
        let (Some(r), false) = (unsafe { handle(run) }, len.is_null()) else {
            return fail(AncStatus::NullPointer, "null argument");
        };
        // SAFETY: checked non-null.
        unsafe { *len = r.violations.len() };
        AncStatus::Ok
    })
}

/// Description of violation `index`, owned by the handle.
///
/// # Safety
/// `run` must be a live handle and `text` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn anc_run_violation(run: *const AncRun, index: usize, text: *mut *const c_char) -> AncStatus {
    guard(|| {
        let (Some(r), false) = (unsafe { handle(run) }, text.is_null()) else {
            return fail(AncStatus::NullPointer, "null argument");
        };
        match r.violations.get(index) {
            Some(s) => {
                // SAFETY: checked non-null.
                unsafe { *text = s.as_ptr() };
                AncStatus::Ok
            }
            None => fail(AncStatus::IndexOutOfRange, format!("index {index} of {}", r.violations.len())),
        }
    })
}
