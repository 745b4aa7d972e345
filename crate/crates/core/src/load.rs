//! Interference-coupled load system and its fixed-point solver.
//!
//! For user `j` of cell `i` the load needed to carry `D_i / |J_i|` is
//!
//! ```text
//! f_ij(rho) = D_i / (W |J_i| log(1 + h_ij / (Phi_ij(rho) + N_c)))
//! ```
//!
//! where `W` is the bandwidth a load of one corresponds to and `Phi_ij` the
//! load-weighted interference. `f` is a standard interference function, so
//! Jacobi iteration from any non-negative start converges to the unique fixed
//! point, and that point is the minimal max-cell load for the demand.

use std::io::{self, Write};

use rand::Rng;
use thiserror::Error;

use crate::topology::{GainTable, InterferenceMode};

#[derive(Debug, Error, PartialEq)]
pub enum LoadError {
    #[error("demand for cell {cell} is {value}, outside [0, {d_max}]")]
    DemandOutOfRange { cell: usize, value: f64, d_max: f64 },
    #[error("demand vector has {got} cells, gain table has {expected}")]
    DemandShape { got: usize, expected: usize },
    #[error("load vector has {got} entries, expected {expected}")]
    LoadShape { got: usize, expected: usize },
    #[error("load vector contains a negative or non-finite entry")]
    NegativeLoad,
    #[error("user {user} in cell {cell} has zero serving gain but non-zero demand")]
    InfeasibleUser { cell: usize, user: usize },
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBase {
    Two,
    Natural,
}

impl LogBase {
    #[inline]
    fn log1p(self, x: f64) -> f64 {
        match self {
            LogBase::Two => x.ln_1p() / std::f64::consts::LN_2,
            LogBase::Natural => x.ln_1p(),
        }
    }
}

/// Per-cell throughput demand in bit/s.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandVector {
    pub per_cell: Vec<f64>,
    pub d_max: f64,
}

impl DemandVector {
    pub fn new(per_cell: Vec<f64>, d_max: f64) -> Result<Self, LoadError> {
        for (cell, &value) in per_cell.iter().enumerate() {
            if !(value.is_finite() && (0.0..=d_max).contains(&value)) {
                return Err(LoadError::DemandOutOfRange { cell, value, d_max });
            }
        }
        Ok(Self { per_cell, d_max })
    }

    pub fn uniform(cells: usize, value: f64, d_max: f64) -> Result<Self, LoadError> {
        Self::new(vec![value; cells], d_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadLevel {
    /// One entry per user (exact interference).
    User,
    /// One entry per cell (approximate interference).
    Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadVector {
    pub level: LoadLevel,
    pub values: Vec<f64>,
}

impl LoadVector {
    pub fn zeros(gains: &GainTable) -> Self {
        match gains.mode {
            InterferenceMode::Exact => Self { level: LoadLevel::User, values: vec![0.0; gains.user_count()] },
            _ => Self { level: LoadLevel::Cell, values: vec![0.0; gains.cell_count] },
        }
    }

    pub fn cell_sums(&self, gains: &GainTable) -> Vec<f64> {
        match self.level {
            LoadLevel::Cell => self.values.clone(),
            LoadLevel::User => gains
                .cell_users
                .iter()
                .map(|users| users.iter().map(|&j| self.values[j]).sum())
                .collect(),
        }
    }

    /// `max_i sum_j rho_ij`.
    pub fn rho_hat(&self, gains: &GainTable) -> f64 {
        self.cell_sums(gains).into_iter().fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &LoadVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, a: f64) -> LoadVector {
        LoadVector { level: self.level, values: self.values.iter().map(|v| v * a).collect() }
    }

    fn check(&self, gains: &GainTable) -> Result<(), LoadError> {
        let expected = LoadVector::zeros(gains).values.len();
        if self.values.len() != expected {
            return Err(LoadError::LoadShape { got: self.values.len(), expected });
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LoadError::NegativeLoad);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    /// Stop when the infinity-norm change between sweeps is at most this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// `rho_bar`.
    pub resource_limit: f64,
    /// A cell load above this declares divergence.
    pub blowup_ceiling: f64,
    pub log_base: LogBase,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 10_000, resource_limit: 1.0, blowup_ceiling: 10.0, log_base: LogBase::Two }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), LoadError> {
        if !(self.tolerance > 0.0) {
            return Err(LoadError::InvalidParams("tolerance must be > 0".into()));
        }
        if !(self.resource_limit > 0.0 && self.resource_limit <= 1.0) {
            return Err(LoadError::InvalidParams("resource_limit must be in (0, 1]".into()));
        }
        if !(self.blowup_ceiling > 0.0) {
            return Err(LoadError::InvalidParams("blowup_ceiling must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(LoadError::InvalidParams("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_demand(gains: &GainTable, demand: &DemandVector) -> Result<(), LoadError> {
    if demand.per_cell.len() != gains.cell_count {
        return Err(LoadError::DemandShape { got: demand.per_cell.len(), expected: gains.cell_count });
    }
    for (cell, users) in gains.cell_users.iter().enumerate() {
        if demand.per_cell[cell] > 0.0 {
            if let Some(&user) = users.iter().find(|&&j| gains.serving[j] <= 0.0) {
                return Err(LoadError::InfeasibleUser { cell, user });
            }
        }
    }
    Ok(())
}

/// Interference at user `j` in `||H x||^2` units, i.e. already divided by `E / N_T`.
#[inline]
fn interference(gains: &GainTable, loads: &LoadVector, j: usize) -> f64 {
    match loads.level {
        LoadLevel::User => gains.cross_exact[j].iter().zip(&loads.values).map(|(g, r)| g * r).sum(),
        LoadLevel::Cell => {
            let scale = gains.tx_antennas as f64 / gains.symbol_power;
            let row = &gains.gamma[j * gains.cell_count..(j + 1) * gains.cell_count];
            row.iter().zip(&loads.values).map(|(g, r)| g * r).sum::<f64>() * scale
        }
    }
}

#[inline]
fn user_load(gains: &GainTable, demand: f64, users_in_cell: usize, h: f64, phi: f64, base: LogBase) -> f64 {
    demand / (gains.bandwidth * users_in_cell as f64 * base.log1p(h / (phi + gains.noise_constant)))
}

fn apply_map(gains: &GainTable, loads: &LoadVector, demand: &DemandVector, base: LogBase) -> LoadVector {
    let mut out = LoadVector::zeros(gains);
    for (cell, users) in gains.cell_users.iter().enumerate() {
        let d = demand.per_cell[cell];
        if d == 0.0 {
            continue;
        }
        let n = users.len();
        for &j in users {
            let rho = user_load(gains, d, n, gains.serving[j], interference(gains, loads, j), base);
            match out.level {
                LoadLevel::User => out.values[j] = rho,
                LoadLevel::Cell => out.values[cell] += rho,
            }
        }
    }
    out
}

/// One evaluation of the load map. Cell-level modes return per-cell sums.
pub fn interference_map(
    gains: &GainTable,
    loads: &LoadVector,
    demand: &DemandVector,
    base: LogBase,
) -> Result<LoadVector, LoadError> {
    check_demand(gains, demand)?;
    loads.check(gains)?;
    Ok(apply_map(gains, loads, demand, base))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Some cell load exceeded the blow-up ceiling.
    BlowUp,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub residual: f64,
    pub rho_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solve {
    pub loads: LoadVector,
    pub rho_hat: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub residual: f64,
}

impl Solve {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Non-converged solves are never feasible.
    pub fn feasible(&self, rho_bar: f64) -> bool {
        self.converged() && check_feasible(self.rho_hat, rho_bar)
    }
}

/// `rho_hat <= rho_bar`.
pub fn check_feasible(rho_hat: f64, rho_bar: f64) -> bool {
    rho_hat <= rho_bar
}

/// Jacobi fixed-point iteration from `initial`.
pub fn solve_fixed_point(
    gains: &GainTable,
    demand: &DemandVector,
    params: &SolverParams,
    initial: &LoadVector,
) -> Result<Solve, LoadError> {
    solve_inner(gains, demand, params, initial, None)
}

/// As [`solve_fixed_point`] from zero, also recording the per-sweep trace.
pub fn solve_traced(
    gains: &GainTable,
    demand: &DemandVector,
    params: &SolverParams,
) -> Result<(Solve, Vec<TraceRow>), LoadError> {
    let mut trace = Vec::new();
    let s = solve_inner(gains, demand, params, &LoadVector::zeros(gains), Some(&mut trace))?;
    Ok((s, trace))
}

fn solve_inner(
    gains: &GainTable,
    demand: &DemandVector,
    params: &SolverParams,
    initial: &LoadVector,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Solve, LoadError> {
    params.validate()?;
    check_demand(gains, demand)?;
    initial.check(gains)?;

    let mut cur = initial.clone();
    // without coupling the map is constant: a single evaluation is the fixed point
    if !gains.has_coupling() {
        let next = apply_map(gains, &cur, demand, params.log_base);
        let rho_hat = next.rho_hat(gains);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow { iteration: 1, residual: next.max_abs_diff(&cur), rho_hat });
        }
        let status = if rho_hat > params.blowup_ceiling { SolveStatus::BlowUp } else { SolveStatus::Converged };
        return Ok(Solve { loads: next, rho_hat, iterations: 1, status, residual: 0.0 });
    }

    let mut residual = f64::INFINITY;
    for iteration in 1..=params.max_iterations {
        let next = apply_map(gains, &cur, demand, params.log_base);
        residual = next.max_abs_diff(&cur);
        let rho_hat = next.rho_hat(gains);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow { iteration, residual, rho_hat });
        }
        cur = next;
        if !rho_hat.is_finite() || rho_hat > params.blowup_ceiling {
            return Ok(Solve { loads: cur, rho_hat, iterations: iteration, status: SolveStatus::BlowUp, residual });
        }
        if residual <= params.tolerance {
            return Ok(Solve { loads: cur, rho_hat, iterations: iteration, status: SolveStatus::Converged, residual });
        }
    }
    let rho_hat = cur.rho_hat(gains);
    Ok(Solve { loads: cur, rho_hat, iterations: params.max_iterations, status: SolveStatus::MaxIterations, residual })
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut w: W) -> io::Result<()> {
    writeln!(w, "iteration,residual,rho_hat")?;
    for r in trace {
        writeln!(w, "{},{:e},{:e}", r.iteration, r.residual, r.rho_hat)?;
    }
    Ok(())
}

/// Relative slack allowed before a property check counts as violated.
pub const SIF_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SifReport {
    pub monotonicity_trials: usize,
    pub monotonicity_violations: usize,
    pub scalability_trials: usize,
    pub scalability_skipped: usize,
    pub scalability_violations: usize,
    /// Description of the first violation found.
    pub witness: Option<String>,
}

impl SifReport {
    pub fn passed(&self) -> bool {
        self.monotonicity_violations == 0 && self.scalability_violations == 0
    }

    fn absorb(&mut self, other: SifReport) {
        self.monotonicity_trials += other.monotonicity_trials;
        self.monotonicity_violations += other.monotonicity_violations;
        self.scalability_trials += other.scalability_trials;
        self.scalability_skipped += other.scalability_skipped;
        self.scalability_violations += other.scalability_violations;
        if self.witness.is_none() {
            self.witness = other.witness;
        }
    }
}

/// Checks `f(rho') >= f(rho)` for `rho' >= rho`, and `a f(rho) > f(a rho)` for
/// `a > 1` (skipped when `a <= 1`).
pub fn check_sif_pair(
    gains: &GainTable,
    demand: &DemandVector,
    rho: &LoadVector,
    rho_prime: &LoadVector,
    a: f64,
    base: LogBase,
) -> Result<SifReport, LoadError> {
    let mut report = SifReport::default();
    let f = interference_map(gains, rho, demand, base)?;
    let fp = interference_map(gains, rho_prime, demand, base)?;
    report.monotonicity_trials = 1;
    for (k, (lo, hi)) in f.values.iter().zip(&fp.values).enumerate() {
        if *hi < *lo - SIF_SLACK * lo.abs().max(1.0) {
            report.monotonicity_violations = 1;
            report.witness = Some(format!("monotonicity at entry {k}: f(rho)={lo:e} > f(rho')={hi:e}"));
            break;
        }
    }
    if a > 1.0 {
        report.scalability_trials = 1;
        let fa = interference_map(gains, &rho.scaled(a), demand, base)?;
        for (k, (base_v, scaled_v)) in f.values.iter().zip(&fa.values).enumerate() {
            let lhs = a * base_v;
            // strict inequality required wherever the entry is active
            let violated = if *base_v == 0.0 { *scaled_v != 0.0 } else { *scaled_v >= lhs + SIF_SLACK * lhs.abs() };
            if violated {
                report.scalability_violations = 1;
                if report.witness.is_none() {
                    report.witness =
                        Some(format!("scalability at entry {k} with a={a}: a f(rho)={lhs:e} <= f(a rho)={scaled_v:e}"));
                }
                break;
            }
        }
    } else {
        report.scalability_skipped = 1;
    }
    Ok(report)
}

/// Randomized monotonicity and scalability trials on `gains`' own mode.
pub fn verify_sif_properties<R: Rng>(
    gains: &GainTable,
    demand: &DemandVector,
    trials: usize,
    base: LogBase,
    rng: &mut R,
) -> Result<SifReport, LoadError> {
    let mut report = SifReport::default();
    let len = LoadVector::zeros(gains).values.len();
    let level = LoadVector::zeros(gains).level;
    // per-entry scale so that cell sums land in a realistic range
    let entry_scale = match level {
        LoadLevel::Cell => 1.0,
        LoadLevel::User => 1.0 / (gains.user_count() as f64 / gains.cell_count as f64),
    };
    for _ in 0..trials {
        let rho: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 1.5 * entry_scale).collect();
        let rho_prime: Vec<f64> = rho.iter().map(|r| r + rng.random::<f64>() * entry_scale).collect();
        let a = 1.0 + rng.random::<f64>() * 3.0;
        let a = if a == 1.0 { 1.5 } else { a };
        let r = check_sif_pair(
            gains,
            demand,
            &LoadVector { level, values: rho },
            &LoadVector { level, values: rho_prime },
            a,
            base,
        )?;
        report.absorb(r);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built table: `cells` cells with one user each.
    pub(crate) fn table(serving: Vec<f64>, gamma_rows: Vec<Vec<f64>>, noise: f64, bandwidth: f64) -> GainTable {
        let cells = serving.len();
        GainTable {
            mode: InterferenceMode::UpperBound,
            cell_count: cells,
            user_cell: (0..cells).collect(),
            cell_users: (0..cells).map(|c| vec![c]).collect(),
            serving,
            cross_exact: Vec::new(),
            gamma: gamma_rows.into_iter().flatten().collect(),
            noise_constant: noise,
            symbol_power: 1.0,
            tx_antennas: 1,
            bandwidth,
        }
    }

    #[test]
    fn single_user_closed_form() {
        let g = table(vec![7.0], vec![vec![0.0]], 1.0, 180e3);
        let d = DemandVector::new(vec![1e5], 1e8).unwrap();
        let f = interference_map(&g, &LoadVector::zeros(&g), &d, LogBase::Two).unwrap();
        let expect = 1e5 / (180e3 * 3.0);
        assert!((f.values[0] - expect).abs() < 1e-15);
        assert!((expect - 0.185_185_185).abs() < 1e-9);

        let s = solve_fixed_point(&g, &d, &SolverParams::default(), &LoadVector::zeros(&g)).unwrap();
        assert!(s.converged());
        assert_eq!(s.iterations, 1);
        assert!((s.rho_hat - expect).abs() < 1e-15);
    }

    #[test]
    fn natural_log_option() {
        let g = table(vec![7.0], vec![vec![0.0]], 1.0, 180e3);
        let d = DemandVector::new(vec![1e5], 1e8).unwrap();
        let f = interference_map(&g, &LoadVector::zeros(&g), &d, LogBase::Natural).unwrap();
        assert!((f.values[0] - 1e5 / (180e3 * 8f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn zero_load_gives_interference_free_load() {
        let g = table(vec![7.0, 3.0], vec![vec![0.0, 2.0], vec![5.0, 0.0]], 1.0, 1e6);
        let d = DemandVector::new(vec![1e6, 2e6], 1e8).unwrap();
        let f = interference_map(&g, &LoadVector::zeros(&g), &d, LogBase::Two).unwrap();
        assert!((f.values[0] - 1.0 / 8f64.log2()).abs() < 1e-12);
        assert!((f.values[1] - 2.0 / 4f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_instance_stays_symmetric() {
        let g = table(vec![10.0, 10.0], vec![vec![0.0, 3.0], vec![3.0, 0.0]], 0.5, 1e6);
        let d = DemandVector::new(vec![1e6, 1e6], 1e8).unwrap();
        let lv = LoadVector { level: LoadLevel::Cell, values: vec![0.3, 0.3] };
        let f = interference_map(&g, &lv, &d, LogBase::Two).unwrap();
        assert_eq!(f.values[0], f.values[1]);
        let s = solve_fixed_point(&g, &d, &SolverParams::default(), &LoadVector::zeros(&g)).unwrap();
        assert_eq!(s.loads.values[0], s.loads.values[1]);
    }

    #[test]
    fn zero_demand_cell_has_zero_load() {
        let g = table(vec![0.0, 10.0], vec![vec![0.0, 3.0], vec![3.0, 0.0]], 0.5, 1e6);
        let d = DemandVector::new(vec![0.0, 1e6], 1e8).unwrap();
        let s = solve_fixed_point(&g, &d, &SolverParams::default(), &LoadVector::zeros(&g)).unwrap();
        assert_eq!(s.loads.values[0], 0.0);
    }

    #[test]
    fn zero_gain_with_demand_is_infeasible_user() {
        let g = table(vec![0.0, 10.0], vec![vec![0.0, 3.0], vec![3.0, 0.0]], 0.5, 1e6);
        let d = DemandVector::new(vec![1.0, 1e6], 1e8).unwrap();
        let err = interference_map(&g, &LoadVector::zeros(&g), &d, LogBase::Two).unwrap_err();
        assert_eq!(err, LoadError::InfeasibleUser { cell: 0, user: 0 });
    }

    #[test]
    fn overload_reports_blowup() {
        // zero-interference load alone is 20
        let g = table(vec![1.0, 1.0], vec![vec![0.0, 0.1], vec![0.1, 0.0]], 1.0, 1.0);
        let d = DemandVector::new(vec![20.0, 20.0], 100.0).unwrap();
        let s = solve_fixed_point(&g, &d, &SolverParams::default(), &LoadVector::zeros(&g)).unwrap();
        assert_eq!(s.status, SolveStatus::BlowUp);
        assert!(!s.feasible(1.0));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let g = table(vec![10.0, 10.0], vec![vec![0.0, 3.0], vec![3.0, 0.0]], 0.5, 1e6);
        let d = DemandVector::new(vec![1e6, 1e6], 1e8).unwrap();
        let p = SolverParams { max_iterations: 2, tolerance: 1e-15, ..SolverParams::default() };
        let s = solve_fixed_point(&g, &d, &p, &LoadVector::zeros(&g)).unwrap();
        assert_eq!(s.status, SolveStatus::MaxIterations);
        assert!(!s.feasible(1.0));
    }

    #[test]
    fn feasibility_threshold() {
        assert!(check_feasible(0.6, 1.0));
        assert!(!check_feasible(1.01, 1.0));
        assert!(check_feasible(0.0, 1.0));
    }

    #[test]
    fn all_zero_demand_is_feasible() {
        let g = table(vec![10.0, 10.0], vec![vec![0.0, 3.0], vec![3.0, 0.0]], 0.5, 1e6);
        let d = DemandVector::new(vec![0.0, 0.0], 1e8).unwrap();
        let s = solve_fixed_point(&g, &d, &SolverParams::default(), &LoadVector::zeros(&g)).unwrap();
        assert_eq!(s.rho_hat, 0.0);
        assert!(s.feasible(1.0));
    }

    #[test]
    fn sif_edge_cases() {
        let g = table(vec![10.0, 10.0], vec![vec![0.0, 3.0], vec![3.0, 0.0]], 0.5, 1e6);
        let d = DemandVector::new(vec![1e6, 2e6], 1e8).unwrap();
        let rho = LoadVector { level: LoadLevel::Cell, values: vec![0.2, 0.4] };
        let r = check_sif_pair(&g, &d, &rho, &rho, 1.0, LogBase::Two).unwrap();
        assert_eq!(r.scalability_skipped, 1);
        assert_eq!(r.scalability_trials, 0);
        assert!(r.passed());
    }

    #[test]
    fn demand_bounds_enforced() {
        assert!(DemandVector::new(vec![-1.0], 10.0).is_err());
        assert!(DemandVector::new(vec![11.0], 10.0).is_err());
        assert!(DemandVector::new(vec![f64::NAN], 10.0).is_err());
    }

    #[test]
    fn bad_params_rejected() {
        let g = table(vec![7.0], vec![vec![0.0]], 1.0, 180e3);
        let d = DemandVector::new(vec![1e5], 1e8).unwrap();
        for p in [
            SolverParams { tolerance: 0.0, ..SolverParams::default() },
            SolverParams { resource_limit: 1.5, ..SolverParams::default() },
            SolverParams { max_iterations: 0, ..SolverParams::default() },
        ] {
            assert!(solve_fixed_point(&g, &d, &p, &LoadVector::zeros(&g)).is_err());
        }
    }
}
