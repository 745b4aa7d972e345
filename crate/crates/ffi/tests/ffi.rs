use std::ffi::{CStr, CString};
use std::ptr;

use thermoload::sac::{SacAgent, SacConfig};
use thermoload_ffi::*;

fn instance() -> *mut TlInstance {
    let mut inst = ptr::null_mut();
    let st = unsafe { tl_instance_new(3, 10, 250, 42, TlInterference::UpperBound, &mut inst) };
    assert_eq!(st, TlStatus::Ok);
    inst
}

fn last_error() -> String {
    let p = tl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn solver_reports_loads_and_bad_lengths() {
    let inst = instance();
    unsafe {
        assert_eq!(tl_instance_cells(inst), 3);
        let mut rho = f64::NAN;
        let d = [20e6, 20e6, 20e6];
        assert_eq!(tl_solve_loads(inst, d.as_ptr(), 3, 100e6, &mut rho), TlStatus::Ok);
        assert!(rho > 0.0 && rho < 1.0);
        assert_eq!(tl_solve_loads(inst, d.as_ptr(), 2, 100e6, &mut rho), TlStatus::InvalidArgument);
        assert!(last_error().contains("expected 3"));
        assert_eq!(tl_solve_loads(inst, ptr::null(), 3, 100e6, &mut rho), TlStatus::NullPointer);
        tl_instance_free(inst);
    }
}

#[test]
fn invalid_instance_is_rejected() {
    let mut inst = ptr::null_mut();
    let st = unsafe { tl_instance_new(0, 10, 250, 1, TlInterference::Exact, &mut inst) };
    assert_eq!(st, TlStatus::InvalidArgument);
    assert!(inst.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn risk_and_thermal_step_agree() {
    let p = tl_thermal_params_default();
    let (mut risk, mut always) = (0.0, true);
    unsafe {
        assert_eq!(tl_risk_temperature(&p, 0.75, 24.0, 100e6, &mut risk, &mut always), TlStatus::Ok);
    }
    assert!(!always && risk > 24.0 && risk <= p.safe_limit);
    let mut out = [0.0];
    unsafe {
        let st = tl_thermal_step(&p, 1, &risk, &24.0, &0.75, &100e6, &24.0, out.as_mut_ptr());
        assert_eq!(st, TlStatus::Ok);
    }
    assert!(out[0] <= p.safe_limit + 1e-6);
    let bad = TlThermalParams { lambda: -1.0, ..p };
    unsafe {
        assert_eq!(tl_risk_temperature(&bad, 0.75, 24.0, 100e6, &mut risk, &mut always), TlStatus::InvalidArgument);
    }
}

#[test]
fn environment_episode_and_policy_round_trip() {
    let inst = instance();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    SacAgent::new(9, 3, 100e6, SacConfig { hidden: vec![8], ..SacConfig::default() })
        .unwrap()
        .checkpoint()
        .save(&path)
        .unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut policy = ptr::null_mut();
        assert_eq!(tl_policy_load(cpath.as_ptr(), &mut policy), TlStatus::Ok);
        assert_eq!(tl_policy_state_dim(policy), 9);
        assert_eq!(tl_policy_action_dim(policy), 3);

        let mut env = ptr::null_mut();
        assert_eq!(tl_env_new(inst, TlScenario::Ihd, 5, &mut env), TlStatus::Ok);
        let dim = tl_env_state_dim(env);
        assert_eq!(dim, 9);
        let mut state = vec![0.0; dim];
        assert_eq!(tl_env_reset(env, 24.0, 7, state.as_mut_ptr(), dim), TlStatus::Ok);
        let mut action = [0.0; 3];
        let (mut reward, mut done, mut steps) = (0.0, false, 0);
        while !done {
            assert_eq!(tl_policy_act(policy, state.as_ptr(), dim, action.as_mut_ptr(), 3), TlStatus::Ok);
            assert!(action.iter().all(|a| (0.0..=100e6).contains(a)));
            assert_eq!(tl_env_step(env, action.as_ptr(), 3, state.as_mut_ptr(), dim, &mut reward, &mut done), TlStatus::Ok);
            assert!(reward.is_finite());
            steps += 1;
        }
        assert_eq!(steps, 5);
        assert_eq!(tl_env_step(env, action.as_ptr(), 3, state.as_mut_ptr(), dim, &mut reward, &mut done), TlStatus::EpisodeOver);
        tl_env_free(env);
        tl_policy_free(policy);
        tl_instance_free(inst);
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let mut policy = ptr::null_mut();
    let p = CString::new("/nonexistent/policy.ckpt").unwrap();
    assert_eq!(unsafe { tl_policy_load(p.as_ptr(), &mut policy) }, TlStatus::Io);
    assert!(policy.is_null());
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/thermoload.h")).unwrap();
    for f in ["tl_instance_new", "tl_solve_loads", "tl_risk_temperature", "tl_env_step", "tl_policy_act", "tl_last_error"] {
        assert!(h.contains(f), "{f} missing from header");
    }
}
