//! C ABI over the thermoload core: network instances, the load solver, the
//! thermal model, the environment and frozen policies.
//!
//! Every fallible call returns a [`TlStatus`]; on failure the message is kept
//! per thread and read back with [`tl_last_error`]. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use thermoload::environment::{risk_temperature, EnvConfig, Environment, Scenario};
use thermoload::experiment::Setup;
use thermoload::load::{solve_fixed_point, DemandVector, LoadVector, SolverParams};
use thermoload::sac::PolicyCheckpoint;
use thermoload::thermal::{step_temperature, EnvironmentTrace, SlotConditions, ThermalParams, ThermalState};
use thermoload::topology::{generate_instance, InterferenceMode, NetworkConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotConverged = 3,
    EpisodeOver = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlInterference {
    Exact = 0,
    LongRange = 1,
    UpperBound = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlScenario {
    Ihd = 0,
    Uhd = 1,
}

/// Per-cell thermal constants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TlThermalParams {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub slot_seconds: f64,
    pub safe_limit: f64,
}

impl From<TlThermalParams> for ThermalParams {
    fn from(p: TlThermalParams) -> Self {
        ThermalParams {
            lambda: p.lambda,
            mu: p.mu,
            alpha: p.alpha,
            beta: p.beta,
            gamma: p.gamma,
            slot_seconds: p.slot_seconds,
            safe_limit: p.safe_limit,
        }
    }
}

impl From<ThermalParams> for TlThermalParams {
    fn from(p: ThermalParams) -> Self {
        TlThermalParams {
            lambda: p.lambda,
            mu: p.mu,
            alpha: p.alpha,
            beta: p.beta,
            gamma: p.gamma,
            slot_seconds: p.slot_seconds,
            safe_limit: p.safe_limit,
        }
    }
}

/// Network instance with its gain table and solver settings.
pub struct TlInstance {
    setup: Setup,
}

pub struct TlEnvironment {
    env: Environment,
}

pub struct TlPolicy {
    policy: PolicyCheckpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn fail(status: TlStatus, msg: impl Into<String>) -> TlStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> TlStatus) -> TlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TlStatus::Panic, "internal panic"),
    }
}

unsafe fn slice_in<'a>(p: *const f64, len: usize) -> Option<&'a [f64]> {
    if p.is_null() {
        (len == 0).then_some(&[][..])
    } else {
        Some(slice::from_raw_parts(p, len))
    }
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize) -> Option<&'a mut [f64]> {
    if p.is_null() {
        (len == 0).then_some(&mut [][..])
    } else {
        Some(slice::from_raw_parts_mut(p, len))
    }
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn tl_thermal_params_default() -> TlThermalParams {
    ThermalParams::default().into()
}

/// Generates an instance with default radio parameters.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tl_instance_new(
    cells: usize,
    users_per_cell: usize,
    rb_count: usize,
    seed: u64,
    mode: TlInterference,
    out: *mut *mut TlInstance,
) -> TlStatus {
    guard(|| {
        if out.is_null() {
            return fail(TlStatus::NullPointer, "out is null");
        }
        let cfg = NetworkConfig { cell_count: cells, users_per_cell, rb_count, seed, ..NetworkConfig::default() };
        let inst = match generate_instance(&cfg) {
            Ok(i) => i,
            Err(e) => return fail(TlStatus::InvalidArgument, e.to_string()),
        };
        let mode = match mode {
            TlInterference::Exact => InterferenceMode::Exact,
            TlInterference::LongRange => InterferenceMode::LongRange,
            TlInterference::UpperBound => InterferenceMode::UpperBound,
        };
        let setup = Setup::new(inst, mode, SolverParams::default(), ThermalParams::default());
        *out = Box::into_raw(Box::new(TlInstance { setup }));
        TlStatus::Ok
    })
}

/// # Safety
/// `inst` must come from [`tl_instance_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_instance_free(inst: *mut TlInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// # Safety
/// `inst` must be a live instance handle.
#[no_mangle]
pub unsafe extern "C" fn tl_instance_cells(inst: *const TlInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.setup.cells())
}

/// Solves the load-coupling fixed point from zero for per-cell demands
/// (bit/s) and writes the maximum cell load. `NotConverged` is returned when
/// the iteration diverges or stalls; `rho_hat` is still written.
///
/// # Safety
/// `demand` must hold `len` values; `rho_hat` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tl_solve_loads(
    inst: *const TlInstance,
    demand: *const f64,
    len: usize,
    d_max: f64,
    rho_hat: *mut f64,
) -> TlStatus {
    guard(|| {
        let (Some(inst), Some(d)) = (inst.as_ref(), slice_in(demand, len)) else {
            return fail(TlStatus::NullPointer, "instance or demand is null");
        };
        if rho_hat.is_null() {
            return fail(TlStatus::NullPointer, "rho_hat is null");
        }
        let s = &inst.setup;
        if len != s.cells() {
            return fail(TlStatus::InvalidArgument, format!("expected {} demands, got {len}", s.cells()));
        }
        let dv = match DemandVector::new(d.to_vec(), d_max) {
            Ok(v) => v,
            Err(e) => return fail(TlStatus::InvalidArgument, e.to_string()),
        };
        match solve_fixed_point(&s.gains, &dv, &s.solver, &LoadVector::zeros(&s.gains)) {
            Ok(sol) => {
                *rho_hat = sol.rho_hat;
                if sol.converged() {
                    TlStatus::Ok
                } else {
                    fail(TlStatus::NotConverged, format!("solver stopped: {:?}", sol.status))
                }
            }
            Err(e) => fail(TlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `params` must point to valid parameters; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tl_risk_temperature(
    params: *const TlThermalParams,
    sigma_bar: f64,
    ambient: f64,
    d_max: f64,
    value: *mut f64,
    always_at_risk: *mut bool,
) -> TlStatus {
    guard(|| {
        let Some(p) = params.as_ref() else {
            return fail(TlStatus::NullPointer, "params is null");
        };
        if value.is_null() || always_at_risk.is_null() {
            return fail(TlStatus::NullPointer, "output is null");
        }
        let p: ThermalParams = (*p).into();
        if let Err(e) = p.validate() {
            return fail(TlStatus::InvalidArgument, e.to_string());
        }
        let r = risk_temperature(&p, sigma_bar, ambient, d_max);
        *value = r.value;
        *always_at_risk = r.always_at_risk;
        TlStatus::Ok
    })
}

/// Advances `cells` chips one slot with the true efficiencies and writes the
/// next temperatures to `out`.
///
/// # Safety
/// All arrays must hold `cells` values.
#[no_mangle]
pub unsafe extern "C" fn tl_thermal_step(
    params: *const TlThermalParams,
    cells: usize,
    chip: *const f64,
    ambient: *const f64,
    sigma: *const f64,
    demand: *const f64,
    next_ambient: *const f64,
    out: *mut f64,
) -> TlStatus {
    guard(|| {
        let (Some(p), Some(chip), Some(amb), Some(sig), Some(d), Some(next), Some(out)) = (
            params.as_ref(),
            slice_in(chip, cells),
            slice_in(ambient, cells),
            slice_in(sigma, cells),
            slice_in(demand, cells),
            slice_in(next_ambient, cells),
            slice_out(out, cells),
        ) else {
            return fail(TlStatus::NullPointer, "null argument");
        };
        let p: ThermalParams = (*p).into();
        if let Err(e) = p.validate() {
            return fail(TlStatus::InvalidArgument, e.to_string());
        }
        let state = ThermalState { chip: chip.to_vec(), ambient: amb.to_vec(), sigma: sig.to_vec(), slot: 0 };
        let cond = SlotConditions { ambient: next.to_vec(), sigma: sig.to_vec() };
        let s = step_temperature(&state, d, &vec![p; cells], &cond);
        out.copy_from_slice(&s.chip);
        TlStatus::Ok
    })
}

/// Environment over `inst` with the default reward configuration.
///
/// # Safety
/// `inst` must be live; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tl_env_new(
    inst: *const TlInstance,
    scenario: TlScenario,
    slots: usize,
    out: *mut *mut TlEnvironment,
) -> TlStatus {
    guard(|| {
        let Some(inst) = inst.as_ref() else {
            return fail(TlStatus::NullPointer, "instance is null");
        };
        if out.is_null() {
            return fail(TlStatus::NullPointer, "out is null");
        }
        let scenario = match scenario {
            TlScenario::Ihd => Scenario::Ihd,
            TlScenario::Uhd => Scenario::Uhd,
        };
        let cfg = EnvConfig { scenario, slots, ..EnvConfig::default() };
        match inst.setup.env(&cfg) {
            Ok(env) => {
                *out = Box::into_raw(Box::new(TlEnvironment { env }));
                TlStatus::Ok
            }
            Err(e) => fail(TlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `env` must come from [`tl_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_env_free(env: *mut TlEnvironment) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be live.
#[no_mangle]
pub unsafe extern "C" fn tl_env_state_dim(env: *const TlEnvironment) -> usize {
    env.as_ref().map_or(0, |e| e.env.state_dim())
}

/// Starts an episode on a generated trace and writes the first state.
///
/// # Safety
/// `state` must hold `state_len` values.
#[no_mangle]
pub unsafe extern "C" fn tl_env_reset(
    env: *mut TlEnvironment,
    mean_ambient: f64,
    seed: u64,
    state: *mut f64,
    state_len: usize,
) -> TlStatus {
    guard(|| {
        let (Some(e), Some(out)) = (env.as_mut(), slice_out(state, state_len)) else {
            return fail(TlStatus::NullPointer, "null argument");
        };
        if state_len != e.env.state_dim() {
            return fail(TlStatus::InvalidArgument, format!("state buffer must hold {}", e.env.state_dim()));
        }
        let trace = EnvironmentTrace::generate(e.env.cells(), e.env.config().slots, mean_ambient, seed);
        match e.env.reset(trace) {
            Ok(s) => {
                out.copy_from_slice(&s.values);
                TlStatus::Ok
            }
            Err(err) => fail(TlStatus::InvalidArgument, err.to_string()),
        }
    })
}

/// Applies a per-cell demand action (bit/s) and writes the next state,
/// reward and whether the episode has ended.
///
/// # Safety
/// `action` must hold one value per cell and `state` `state_len` values.
#[no_mangle]
pub unsafe extern "C" fn tl_env_step(
    env: *mut TlEnvironment,
    action: *const f64,
    action_len: usize,
    state: *mut f64,
    state_len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> TlStatus {
    guard(|| {
        let (Some(e), Some(a), Some(out)) = (env.as_mut(), slice_in(action, action_len), slice_out(state, state_len))
        else {
            return fail(TlStatus::NullPointer, "null argument");
        };
        if reward.is_null() || done.is_null() {
            return fail(TlStatus::NullPointer, "output is null");
        }
        if state_len != e.env.state_dim() {
            return fail(TlStatus::InvalidArgument, format!("state buffer must hold {}", e.env.state_dim()));
        }
        match e.env.step(a) {
            Ok(o) => {
                out.copy_from_slice(&o.state.values);
                *reward = o.reward;
                *done = o.done;
                TlStatus::Ok
            }
            Err(thermoload::environment::EnvError::EpisodeOver) => fail(TlStatus::EpisodeOver, "episode is over"),
            Err(err) => fail(TlStatus::InvalidArgument, err.to_string()),
        }
    })
}

/// Loads a policy checkpoint written by the `train` verb.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_load(path: *const c_char, out: *mut *mut TlPolicy) -> TlStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(TlStatus::NullPointer, "null argument");
        }
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(TlStatus::InvalidArgument, "path is not UTF-8");
        };
        match PolicyCheckpoint::load(Path::new(p)) {
            Ok(policy) => {
                *out = Box::into_raw(Box::new(TlPolicy { policy }));
                TlStatus::Ok
            }
            Err(e) => fail(TlStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `policy` must come from [`tl_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_free(policy: *mut TlPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// # Safety
/// `policy` must be live.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_state_dim(policy: *const TlPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.state_dim)
}

/// # Safety
/// `policy` must be live.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_action_dim(policy: *const TlPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.action_dim)
}

/// Deterministic (mean) action in bit/s.
///
/// # Safety
/// `state` must hold `state_len` values and `action` `action_len` values.
#[no_mangle]
pub unsafe extern "C" fn tl_policy_act(
    policy: *const TlPolicy,
    state: *const f64,
    state_len: usize,
    action: *mut f64,
    action_len: usize,
) -> TlStatus {
    guard(|| {
        let (Some(p), Some(s), Some(out)) = (policy.as_ref(), slice_in(state, state_len), slice_out(action, action_len))
        else {
            return fail(TlStatus::NullPointer, "null argument");
        };
        if action_len != p.policy.action_dim {
            return fail(TlStatus::InvalidArgument, format!("action buffer must hold {}", p.policy.action_dim));
        }
        match p.policy.mean_action(s) {
            Ok(a) => {
                out.copy_from_slice(&a);
                TlStatus::Ok
            }
            Err(e) => fail(TlStatus::InvalidArgument, e.to_string()),
        }
    })
}
