//! Reference policies and the hindsight dynamic-programming oracle.

use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::environment::{Observation, Policy};
use crate::load::{solve_fixed_point, DemandVector, LoadError, LoadVector, SolverParams};
use crate::thermal::{next_unclamped, EnvironmentTrace, ThermalParams};
use crate::topology::GainTable;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("oracle refused: {0}")]
    TooLarge(String),
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
    #[error("no feasible plan from the initial state")]
    NoFeasiblePlan,
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// `D_max` in every cell.
#[derive(Debug, Clone, Copy)]
pub struct Aggressive {
    pub d_max: f64,
}

impl Policy for Aggressive {
    fn act(&mut self, obs: &Observation<'_>) -> Vec<f64> {
        vec![self.d_max; obs.thermal.cells()]
    }
}

/// `fraction * D_max` in every cell.
#[derive(Debug, Clone, Copy)]
pub struct Conservative {
    pub d_max: f64,
    pub fraction: f64,
}

impl Conservative {
    pub fn new(d_max: f64) -> Self {
        Self { d_max, fraction: 0.1 }
    }
}

impl Policy for Conservative {
    fn act(&mut self, obs: &Observation<'_>) -> Vec<f64> {
        vec![self.fraction * self.d_max; obs.thermal.cells()]
    }
}

/// Whether the uniform demand `u` in every cell passes the load gate.
fn uniform_feasible(gains: &GainTable, solver: &SolverParams, u: f64, d_max: f64) -> Result<bool, LoadError> {
    let d = DemandVector::uniform(gains.cell_count, u, d_max)?;
    Ok(solve_fixed_point(gains, &d, solver, &LoadVector::zeros(gains))?.feasible(solver.resource_limit))
}

/// Largest cell-uniform demand in `[0, d_max]` that passes the load gate.
/// Divergent solves count as infeasible.
pub fn max_uniform_demand(gains: &GainTable, solver: &SolverParams, d_max: f64) -> Result<f64, LoadError> {
    if uniform_feasible(gains, solver, d_max, d_max)? {
        return Ok(d_max);
    }
    let (mut lo, mut hi) = (0.0, d_max);
    while hi - lo > 1e-9 * d_max {
        let mid = 0.5 * (lo + hi);
        if uniform_feasible(gains, solver, mid, d_max)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Maximal cell-uniform demand each slot; the zero action whenever any cell's
/// forecast would exceed its limit.
#[derive(Debug, Clone)]
pub struct NaiveAdaptive {
    pub uniform: f64,
    pub thermal: Vec<ThermalParams>,
}

impl NaiveAdaptive {
    pub fn new(gains: &GainTable, solver: &SolverParams, thermal: Vec<ThermalParams>, d_max: f64) -> Result<Self, LoadError> {
        Ok(Self { uniform: max_uniform_demand(gains, solver, d_max)?, thermal })
    }

    pub fn decide(&self, chip: &[f64], ambient: &[f64], sigma_bar: &[f64]) -> Vec<f64> {
        let hot = (0..chip.len()).any(|i| {
            let p = &self.thermal[i];
            next_unclamped(chip[i], ambient[i], self.uniform, sigma_bar[i], p) > p.safe_limit
        });
        if hot {
            vec![0.0; chip.len()]
        } else {
            vec![self.uniform; chip.len()]
        }
    }
}

impl Policy for NaiveAdaptive {
    fn act(&mut self, obs: &Observation<'_>) -> Vec<f64> {
        self.decide(&obs.thermal.chip, &obs.thermal.ambient, obs.sigma_bar)
    }
}

/// Plays a fixed action sequence indexed by slot.
#[derive(Debug, Clone)]
pub struct Scripted {
    pub actions: Vec<Vec<f64>>,
}

impl Policy for Scripted {
    fn act(&mut self, obs: &Observation<'_>) -> Vec<f64> {
        self.actions[obs.thermal.slot].clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Demand levels per cell, evenly spaced over `[0, D_max]`.
    pub levels: usize,
    /// Temperature grid points per cell over `[min ambient, Psi_bar]`.
    pub temp_grid: usize,
    pub max_cells: usize,
    /// Refusal threshold on `states * actions * slots`.
    pub work_budget: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { levels: 11, temp_grid: 60, max_cells: 3, work_budget: 2e10 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.levels < 2 {
            return Err(BaselineError::InvalidConfig("levels must be >= 2".into()));
        }
        if self.temp_grid < 10 {
            return Err(BaselineError::InvalidConfig("temperature grid must have >= 10 points".into()));
        }
        if self.temp_grid > u16::MAX as usize {
            return Err(BaselineError::InvalidConfig("temperature grid too fine".into()));
        }
        Ok(())
    }
}

/// Everything the DP needs, with grid snapping precomputed.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub cells: usize,
    pub slots: usize,
    pub levels: Vec<f64>,
    pub grid: Vec<f64>,
    /// Resource-feasible joint actions as level indices.
    pub actions: Vec<Vec<usize>>,
    /// `next[((t * cells + i) * G + k) * L + l]`, `NONE` when above the limit.
    next: Vec<u16>,
    /// Initial grid index per cell.
    pub start: Vec<usize>,
}

const NONE: u16 = u16::MAX;

impl OracleModel {
    pub fn build(
        gains: &GainTable,
        solver: &SolverParams,
        thermal: &[ThermalParams],
        trace: &EnvironmentTrace,
        slots: usize,
        d_max: f64,
        cfg: &OracleConfig,
    ) -> Result<Self, BaselineError> {
        cfg.validate()?;
        let cells = gains.cell_count;
        if cells > cfg.max_cells {
            return Err(BaselineError::TooLarge(format!("{cells} cells exceeds the exact-DP limit of {}", cfg.max_cells)));
        }
        if trace.slots() < slots || trace.cells() != cells || thermal.len() != cells {
            return Err(BaselineError::InvalidConfig("trace or thermal params do not match the instance".into()));
        }
        let (l, g) = (cfg.levels, cfg.temp_grid);
        let states = (g as f64).powi(cells as i32);
        let joint = (l as f64).powi(cells as i32);
        let work = states * joint * slots as f64;
        if work > cfg.work_budget {
            return Err(BaselineError::TooLarge(format!("{work:.3e} state-action-slot evaluations exceeds budget")));
        }
        let levels: Vec<f64> = (0..l).map(|k| d_max * k as f64 / (l - 1) as f64).collect();
        let limit = thermal.iter().map(|p| p.safe_limit).fold(f64::INFINITY, f64::min);
        let lo = trace.min_ambient().min(limit);
        let grid: Vec<f64> = (0..g).map(|k| lo + (limit - lo) * k as f64 / (g - 1) as f64).collect();
        let step = (limit - lo) / (g - 1) as f64;
        let snap = |x: f64| -> u16 {
            if step <= 0.0 {
                return 0;
            }
            let k = ((x - lo) / step - 1e-9).ceil().max(0.0) as usize;
            k.min(g - 1) as u16
        };

        let mut actions = Vec::new();
        let mut idx = vec![0usize; cells];
        for _ in 0..joint as usize {
            let d: Vec<f64> = idx.iter().map(|&k| levels[k]).collect();
            let dv = DemandVector::new(d, d_max)?;
            if solve_fixed_point(gains, &dv, solver, &LoadVector::zeros(gains))?.feasible(solver.resource_limit) {
                actions.push(idx.clone());
            }
            for v in idx.iter_mut() {
                *v += 1;
                if *v < l {
                    break;
                }
                *v = 0;
            }
        }

        let mut next = vec![NONE; slots * cells * g * l];
        for t in 0..slots {
            let now = trace.conditions(t);
            let after = trace.conditions(t + 1);
            for (i, p) in thermal.iter().enumerate() {
                for (k, &psi) in grid.iter().enumerate() {
                    for (a, &d) in levels.iter().enumerate() {
                        let raw = next_unclamped(psi, now.ambient[i], d, now.sigma[i], p).max(after.ambient[i]);
                        if raw <= p.safe_limit {
                            next[((t * cells + i) * g + k) * l + a] = snap(raw);
                        }
                    }
                }
            }
        }
        let a0 = trace.conditions(0);
        let start = a0.ambient.iter().map(|&x| snap(x) as usize).collect();
        Ok(Self { cells, slots, levels, grid, actions, next, start })
    }

    /// Grid index after one slot, or `None` if the limit is exceeded.
    pub fn transition(&self, t: usize, cell: usize, k: usize, level: usize) -> Option<usize> {
        let (g, l) = (self.grid.len(), self.levels.len());
        match self.next[((t * self.cells + cell) * g + k) * l + level] {
            NONE => None,
            v => Some(v as usize),
        }
    }

    pub fn action_value(&self, a: &[usize]) -> f64 {
        a.iter().map(|&k| self.levels[k]).sum()
    }

    fn state_count(&self) -> usize {
        self.grid.len().pow(self.cells as u32)
    }

    fn encode(&self, ks: &[usize]) -> usize {
        ks.iter().rev().fold(0, |acc, &k| acc * self.grid.len() + k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// Sum of per-cell demand over all slots, bit/s.
    pub total: f64,
    /// `actions[t][i]`, bit/s.
    pub actions: Vec<Vec<f64>>,
    /// Grid-snapped temperatures along the plan, `temps[t][i]` for `t` in `0..=T`.
    pub temps: Vec<Vec<f64>>,
}

impl OracleSolution {
    pub fn mean_throughput_per_cell_mbps(&self) -> f64 {
        let cells = self.actions.first().map_or(1, Vec::len);
        self.total / (cells * self.actions.len()).max(1) as f64 / 1e6
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,cell,demand,planned_temperature")?;
        for (t, a) in self.actions.iter().enumerate() {
            for (i, d) in a.iter().enumerate() {
                writeln!(w, "{t},{i},{d},{}", self.temps[t][i])?;
            }
        }
        Ok(())
    }
}

/// Backward induction over the joint temperature grid.
pub fn solve_oracle(model: &OracleModel) -> Result<OracleSolution, BaselineError> {
    let n = model.state_count();
    let cells = model.cells;
    let g = model.grid.len();
    let rewards: Vec<f64> = model.actions.iter().map(|a| model.action_value(a)).collect();
    let mut value = vec![0.0f64; n];
    let mut choice = vec![u32::MAX; n * model.slots];
    let mut ks = vec![0usize; cells];
    for t in (0..model.slots).rev() {
        let mut fresh = vec![f64::NEG_INFINITY; n];
        for s in 0..n {
            let mut rem = s;
            for k in ks.iter_mut() {
                *k = rem % g;
                rem /= g;
            }
            let mut best = f64::NEG_INFINITY;
            let mut arg = u32::MAX;
            'actions: for (ai, a) in model.actions.iter().enumerate() {
                let mut ns = 0usize;
                let mut mul = 1usize;
                for i in 0..cells {
                    match model.transition(t, i, ks[i], a[i]) {
                        Some(k) => ns += k * mul,
                        None => continue 'actions,
                    }
                    mul *= g;
                }
                let v = rewards[ai] + value[ns];
                if v > best {
                    best = v;
                    arg = ai as u32;
                }
            }
            fresh[s] = best;
            choice[t * n + s] = arg;
        }
        value = fresh;
    }
    let s0 = model.encode(&model.start);
    if !value[s0].is_finite() {
        return Err(BaselineError::NoFeasiblePlan);
    }
    let mut ks = model.start.clone();
    let mut actions = Vec::with_capacity(model.slots);
    let mut temps = vec![ks.iter().map(|&k| model.grid[k]).collect::<Vec<_>>()];
    for t in 0..model.slots {
        let a = &model.actions[choice[t * n + model.encode(&ks)] as usize];
        for i in 0..cells {
            ks[i] = model.transition(t, i, ks[i], a[i]).expect("optimal action is feasible");
        }
        actions.push(a.iter().map(|&k| model.levels[k]).collect());
        temps.push(ks.iter().map(|&k| model.grid[k]).collect());
    }
    Ok(OracleSolution { total: value[s0], actions, temps })
}

/// Builds the grid model and solves it.
pub fn hindsight_oracle(
    gains: &GainTable,
    solver: &SolverParams,
    thermal: &[ThermalParams],
    trace: &EnvironmentTrace,
    slots: usize,
    d_max: f64,
    cfg: &OracleConfig,
) -> Result<OracleSolution, BaselineError> {
    solve_oracle(&OracleModel::build(gains, solver, thermal, trace, slots, d_max, cfg)?)
}

/// Convenience wrapper over an `Arc`'d table.
pub fn naive_adaptive(
    gains: &Arc<GainTable>,
    solver: &SolverParams,
    thermal: &[ThermalParams],
    d_max: f64,
) -> Result<NaiveAdaptive, LoadError> {
    NaiveAdaptive::new(gains, solver, thermal.to_vec(), d_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{EnvConfig, Environment};
    use crate::topology::InterferenceMode;

    fn gains(cells: usize, cross: f64, serving: f64) -> GainTable {
        let mut gamma = vec![0.0; cells * cells];
        for j in 0..cells {
            for l in 0..cells {
                if j != l {
                    gamma[j * cells + l] = cross;
                }
            }
        }
        GainTable {
            mode: InterferenceMode::UpperBound,
            cell_count: cells,
            user_cell: (0..cells).collect(),
            cell_users: (0..cells).map(|c| vec![c]).collect(),
            serving: vec![serving; cells],
            cross_exact: Vec::new(),
            gamma,
            noise_constant: 1.0,
            symbol_power: 1.0,
            tx_antennas: 1,
            bandwidth: 10e6,
        }
    }

    #[test]
    fn single_cell_uniform_demand_closed_form() {
        let g = gains(1, 0.0, 1e3);
        let u = max_uniform_demand(&g, &SolverParams::default(), 500e6).unwrap();
        let exact = 10e6 * (1.0f64 + 1e3).log2();
        assert!((u - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn symmetric_cells_get_equal_demand() {
        let g = gains(2, 50.0, 1e3);
        let na = NaiveAdaptive::new(&g, &SolverParams::default(), vec![ThermalParams::default(); 2], 100e6).unwrap();
        let a = na.decide(&[30.0, 30.0], &[24.0, 24.0], &[0.75, 0.75]);
        assert_eq!(a[0], a[1]);
        assert!(a[0] > 0.0 && a[0] <= 100e6);
    }

    #[test]
    fn naive_cools_down_globally() {
        let g = gains(2, 0.0, 1e6);
        let na = NaiveAdaptive::new(&g, &SolverParams::default(), vec![ThermalParams::default(); 2], 100e6).unwrap();
        assert_eq!(na.decide(&[119.9, 30.0], &[30.0, 30.0], &[0.3, 0.3]), vec![0.0, 0.0]);
    }

    #[test]
    fn aggressive_overheats_within_an_episode() {
        let g = Arc::new(gains(1, 0.0, 1e9));
        let cfg = EnvConfig { reward: crate::environment::RewardKind::NaiveThroughput, ..EnvConfig::default() };
        let mut env = Environment::new(g, SolverParams::default(), vec![ThermalParams::default()], cfg).unwrap();
        let s = env
            .run_episode(EnvironmentTrace::generate(1, 50, 24.0, 4), &mut Aggressive { d_max: 100e6 }, None)
            .unwrap();
        assert!(s.overheated_slots > 0);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let g = gains(4, 0.0, 1e9);
        let th = vec![ThermalParams::default(); 4];
        let tr = EnvironmentTrace::generate(4, 5, 24.0, 1);
        let r = hindsight_oracle(&g, &SolverParams::default(), &th, &tr, 5, 100e6, &OracleConfig::default());
        assert!(matches!(r, Err(BaselineError::TooLarge(_))));
        let g3 = gains(3, 0.0, 1e9);
        let tr3 = EnvironmentTrace::generate(3, 50, 24.0, 1);
        let big = OracleConfig { temp_grid: 400, ..OracleConfig::default() };
        let r = hindsight_oracle(&g3, &SolverParams::default(), &th[..3], &tr3, 50, 100e6, &big);
        assert!(matches!(r, Err(BaselineError::TooLarge(_))));
    }

    #[test]
    fn unlimited_thermals_pick_max_feasible_every_slot() {
        let g = gains(2, 0.0, 1e9);
        let th = vec![ThermalParams { alpha: 0.0, safe_limit: 1e4, ..ThermalParams::default() }; 2];
        let tr = EnvironmentTrace::generate(2, 4, 24.0, 1);
        let cfg = OracleConfig { levels: 5, temp_grid: 10, ..OracleConfig::default() };
        let s = hindsight_oracle(&g, &SolverParams::default(), &th, &tr, 4, 100e6, &cfg).unwrap();
        assert_eq!(s.total, 8.0 * 100e6);
    }

    #[test]
    fn single_slot_equals_best_feasible_action() {
        // coupling makes (100, 100) infeasible while (100, 75) is not
        let g = gains(2, 2e3, 1e4);
        let solver = SolverParams::default();
        let th = vec![ThermalParams::default(); 2];
        let tr = EnvironmentTrace::generate(2, 1, 24.0, 3);
        let cfg = OracleConfig { levels: 5, temp_grid: 20, ..OracleConfig::default() };
        let m = OracleModel::build(&g, &solver, &th, &tr, 1, 100e6, &cfg).unwrap();
        let best = m.actions.iter().map(|a| m.action_value(a)).fold(0.0, f64::max);
        assert!(m.actions.len() < 25);
        let s = solve_oracle(&m).unwrap();
        assert_eq!(s.total, best);
    }

    #[test]
    fn oracle_plan_is_truly_safe() {
        let g = Arc::new(gains(2, 0.0, 1e9));
        let th = vec![ThermalParams::default(); 2];
        let tr = EnvironmentTrace::generate(2, 30, 30.0, 9);
        let cfg = OracleConfig { levels: 6, temp_grid: 40, ..OracleConfig::default() };
        let s = hindsight_oracle(&g, &SolverParams::default(), &th, &tr, 30, 100e6, &cfg).unwrap();
        let ecfg = EnvConfig { slots: 30, ..EnvConfig::default() };
        let mut env = Environment::new(g, SolverParams::default(), th, ecfg).unwrap();
        let mut log = Vec::new();
        let sum = env.run_episode(tr, &mut Scripted { actions: s.actions.clone() }, Some(&mut log)).unwrap();
        assert_eq!(sum.overheated_slots, 0);
        assert_eq!(sum.thermal_denials, 0);
        assert!((sum.throughput_sum - s.total).abs() < 1e-6);
        for (r, planned) in log.iter().zip(&s.temps) {
            for i in 0..2 {
                assert!(r.chip[i] <= planned[i] + 1e-9);
            }
        }
    }
}
