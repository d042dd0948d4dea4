//! C interface to `mstrial`.
//!
//! Objects are opaque handles created by `mst_*_new`/`mst_*_load` style
//! functions and released with the matching `mst_*_free`. Every fallible
//! function returns an [`MstStatus`]; on failure the message is available via
//! [`mst_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use mstrial::cohort::{Cohort, EventDefinition, EventMode};
use mstrial::design::{sequential_boundaries, BoundaryFamily};
use mstrial::stats::{analyze_stage, Weight};
use mstrial::{AccrualPlan, Error, Group, MultiStateModel};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Internal = 5,
}

/// Boundary families for [`mst_design_boundaries`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MstBoundary {
    Pocock = 0,
    ObrienFleming = 1,
}

/// Opaque multi-state model.
pub struct MstModel(MultiStateModel);

/// Opaque patient cohort.
pub struct MstCohort(Cohort);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MstStatus {
    match e {
        Error::Io(_) => MstStatus::Io,
        Error::Convergence(_)
        | Error::NotPositiveDefinite { .. }
        | Error::SingularPlanning(_)
        | Error::UnreachablePower { .. } => MstStatus::Numerical,
        _ => MstStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), MstStatus>) -> MstStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MstStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            MstStatus::Internal
        }
    }
}

fn fail(e: Error) -> MstStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> MstStatus {
    set_error(format!("{what} is null"));
    MstStatus::NullPointer
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MstStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        MstStatus::InvalidArgument
    })
}

fn group_of(z: u8) -> Result<Group, MstStatus> {
    Group::from_z(z).map_err(fail)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Free with
/// [`mst_string_free`].
#[no_mangle]
pub extern "C" fn mst_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null_mut(), |s| s.clone().into_raw())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mst_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a model from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mst_model_from_json(json: *const c_char, out: *mut *mut MstModel) -> MstStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(json, "json")?;
        let model = MultiStateModel::from_json_str(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(MstModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mst_model_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn mst_model_free(model: *mut MstModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of states of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mst_model_state_count(model: *const MstModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.state_count())
}

/// Cumulative intensity of `from → to` over `(s1, s2]` in group `z`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mst_model_cumulative_intensity(
    model: *const MstModel,
    from: usize,
    to: usize,
    s1: f64,
    s2: f64,
    z: u8,
    out: *mut f64,
) -> MstStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m
            .0
            .cumulative_intensity(from, to, s1, s2, group_of(z)?)
            .map_err(fail)?;
        Ok(())
    })
}

/// Expected share of patients with an event in `states` by calendar time `t`
/// under uniform accrual over `accrual_duration`.
///
/// # Safety
/// `states` must point to `n_states` entries and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mst_model_expected_event_fraction(
    model: *const MstModel,
    states: *const usize,
    n_states: usize,
    t: f64,
    accrual_duration: f64,
    allocation: f64,
    out: *mut f64,
) -> MstStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() || (states.is_null() && n_states > 0) {
            return Err(null("states or out"));
        }
        let event = if n_states == 0 {
            &[][..]
        } else {
            slice::from_raw_parts(states, n_states)
        };
        let plan = AccrualPlan {
            allocation,
            ..AccrualPlan::new(accrual_duration, 0.0)
        };
        *out = m.0.expected_event_fraction(event, t, &plan).map_err(fail)?;
        Ok(())
    })
}

/// Loads a cohort from a transitions CSV and an optional roster CSV (null).
///
/// # Safety
/// Paths must be NUL-terminated strings (roster may be null) and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mst_cohort_load(
    transitions: *const c_char,
    roster: *const c_char,
    out: *mut *mut MstCohort,
) -> MstStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = str_arg(transitions, "transitions")?;
        let r = if roster.is_null() {
            None
        } else {
            Some(str_arg(roster, "roster")?)
        };
        let cohort = Cohort::load(t, r.map(Path::new)).map_err(fail)?;
        *out = Box::into_raw(Box::new(MstCohort(cohort)));
        Ok(())
    })
}

/// Parses a cohort from CSV text; `roster` may be null.
///
/// # Safety
/// Strings must be NUL-terminated (roster may be null) and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mst_cohort_from_csv(
    transitions: *const c_char,
    roster: *const c_char,
    out: *mut *mut MstCohort,
) -> MstStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = str_arg(transitions, "transitions")?;
        let r = if roster.is_null() {
            None
        } else {
            Some(str_arg(roster, "roster")?)
        };
        let cohort = Cohort::from_csv_strs(t, r).map_err(fail)?;
        *out = Box::into_raw(Box::new(MstCohort(cohort)));
        Ok(())
    })
}

/// # Safety
/// `cohort` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mst_cohort_free(cohort: *mut MstCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Number of patients, 0 for a null handle.
///
/// # Safety
/// `cohort` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mst_cohort_len(cohort: *const MstCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.0.len())
}

/// Stage statistic of the increment over `(t_prev, t_now]`.
///
/// Events are given as concatenated state lists: event `c` owns the next
/// `event_sizes[c]` entries of `event_states`. `all_entries` selects counting
/// every entry instead of the first one.
///
/// # Safety
/// Arrays must hold the stated number of entries; outputs may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mst_stage_statistic(
    cohort: *const MstCohort,
    event_states: *const usize,
    event_sizes: *const usize,
    n_events: usize,
    all_entries: bool,
    t_prev: f64,
    t_now: f64,
    statistic: *mut f64,
    p_value: *mut f64,
    rank: *mut usize,
) -> MstStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        if n_events == 0 || event_states.is_null() || event_sizes.is_null() {
            return Err(null("events"));
        }
        let sizes = slice::from_raw_parts(event_sizes, n_events);
        let states = slice::from_raw_parts(event_states, sizes.iter().sum());
        let mode = if all_entries {
            EventMode::AllEntries
        } else {
            EventMode::FirstHitting
        };
        let mut offset = 0;
        let events: Vec<EventDefinition> = sizes
            .iter()
            .map(|&k| {
                let e = EventDefinition::new(&states[offset..offset + k], mode);
                offset += k;
                e
            })
            .collect();
        let r = analyze_stage(&c.0, &events, &Weight::Unit, 1, t_prev, t_now).map_err(fail)?;
        if let Some(p) = statistic.as_mut() {
            *p = r.statistic;
        }
        if let Some(p) = p_value.as_mut() {
            *p = r.p_value;
        }
        if let Some(p) = rank.as_mut() {
            *p = r.rank;
        }
        Ok(())
    })
}

/// Critical values of the normalised inverse normal statistic for `stages`
/// equally weighted stages, written to `critical[0..stages]`.
///
/// # Safety
/// `critical` must have room for `stages` values.
#[no_mangle]
pub unsafe extern "C" fn mst_design_boundaries(
    family: MstBoundary,
    alpha: f64,
    stages: usize,
    critical: *mut f64,
) -> MstStatus {
    guard(|| {
        if critical.is_null() {
            return Err(null("critical"));
        }
        let fam = match family {
            MstBoundary::Pocock => BoundaryFamily::Pocock,
            MstBoundary::ObrienFleming => BoundaryFamily::ObrienFleming,
        };
        let b = sequential_boundaries(&fam, alpha, &vec![1.0; stages]).map_err(fail)?;
        slice::from_raw_parts_mut(critical, stages).copy_from_slice(&b.critical);
        Ok(())
    })
}
