//! Episodic decision environment with the resource/thermal denial reward
//! mechanism.
//!
//! Each slot the agent proposes per-cell throughput. The load solver gates the
//! whole action against `rho_bar`; then every cell is checked against its
//! forecast temperature and the risk temperature, and finally the true chip
//! temperatures are advanced with the actual dissipation efficiency.

use std::collections::VecDeque;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::load::{solve_fixed_point, DemandVector, LoadError, LoadVector, SolveStatus, SolverParams};
use crate::thermal::{
    back_solve_sigma, next_unclamped, step_temperature, EnvironmentTrace, SlotConditions, ThermalError,
    ThermalParams, ThermalState,
};
use crate::topology::GainTable;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action has {got} entries, expected {expected}")]
    ActionShape { got: usize, expected: usize },
    #[error("action for cell {cell} is {value}, outside [0, {d_max}]")]
    ActionOutOfRange { cell: usize, value: f64, d_max: f64 },
    #[error("trace covers {got} cells, environment has {expected}")]
    TraceShape { got: usize, expected: usize },
    #[error("trace has {got} slots, episode needs {needed}")]
    TraceTooShort { got: usize, needed: usize },
    #[error("episode finished; call reset")]
    EpisodeOver,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Thermal(#[from] ThermalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Current-slot dissipation efficiency is observed.
    Ihd,
    /// Dissipation efficiency must be estimated.
    Uhd,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ihd => "ihd",
            Scenario::Uhd => "uhd",
        }
    }

    pub fn features_per_cell(self) -> usize {
        match self {
            Scenario::Ihd => 3,
            Scenario::Uhd => 2,
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ihd" => Ok(Scenario::Ihd),
            "uhd" => Ok(Scenario::Uhd),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// Denial/risk mechanism.
    Mechanism,
    /// Reward equals delivered throughput; nothing is denied.
    NaiveThroughput,
}

/// How the throughput part of a cell's reward is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThroughputNorm {
    /// `D_i / std({D_i})`, falling back to `D_max` when the spread vanishes.
    StdDev,
    /// `D_i / D_max`.
    PeakFraction,
    /// `D_i` in Mbps.
    Mbps,
}

impl std::str::FromStr for ThroughputNorm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "std" => Ok(ThroughputNorm::StdDev),
            "peak" => Ok(ThroughputNorm::PeakFraction),
            "mbps" => Ok(ThroughputNorm::Mbps),
            other => Err(format!("unknown throughput normalization `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Mean of back-solved efficiencies over a sliding window.
    HistoricalMean,
    /// Minimum over the window.
    WorstCase,
    /// The true current-slot value.
    Oracle,
}

impl std::str::FromStr for EstimatorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(EstimatorMode::HistoricalMean),
            "worst" => Ok(EstimatorMode::WorstCase),
            "oracle" => Ok(EstimatorMode::Oracle),
            other => Err(format!("unknown estimator `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaEstimator {
    pub mode: EstimatorMode,
    pub window: usize,
    pub prior: f64,
    history: Vec<VecDeque<f64>>,
}

/// Estimates are kept at or above this.
const SIGMA_FLOOR: f64 = 1e-3;

impl SigmaEstimator {
    pub fn new(mode: EstimatorMode, window: usize, prior: f64, cells: usize) -> Self {
        Self { mode, window: window.max(1), prior, history: vec![VecDeque::new(); cells] }
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(VecDeque::clear);
    }

    /// `true_sigma` is only consulted in oracle mode.
    pub fn estimate(&self, cell: usize, true_sigma: f64) -> f64 {
        let h = &self.history[cell];
        let v = match self.mode {
            EstimatorMode::Oracle => true_sigma,
            _ if h.is_empty() => self.prior,
            EstimatorMode::HistoricalMean => h.iter().sum::<f64>() / h.len() as f64,
            EstimatorMode::WorstCase => h.iter().copied().fold(f64::INFINITY, f64::min),
        };
        v.max(SIGMA_FLOOR)
    }

    pub fn estimates(&self, state: &ThermalState) -> Vec<f64> {
        (0..state.cells()).map(|i| self.estimate(i, state.sigma[i])).collect()
    }

    pub fn observe(&mut self, cell: usize, sigma: f64) {
        let h = &mut self.history[cell];
        h.push_back(sigma);
        while h.len() > self.window {
            h.pop_front();
        }
    }

    /// Back-solves the efficiency from a realized step when the ambient floor
    /// was inactive; otherwise keeps the current history.
    pub fn update_from_step(
        &mut self,
        before: &ThermalState,
        executed: &[f64],
        after: &ThermalState,
        params: &[ThermalParams],
    ) {
        for i in 0..before.cells() {
            if after.chip[i] <= after.ambient[i] {
                continue;
            }
            if let Some(s) = back_solve_sigma(before.chip[i], before.ambient[i], executed[i], after.chip[i], &params[i]) {
                if s > 0.0 {
                    self.observe(i, s);
                }
            }
        }
    }
}

/// Result of the risk-temperature search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskTemperature {
    pub value: f64,
    /// Even the ambient temperature cannot absorb a peak-throughput slot.
    pub always_at_risk: bool,
}

pub const RISK_BISECTION_TOL: f64 = 1e-7;

/// Largest `Psi` in `[ambient, Psi_bar]` from which a `D_max` slot stays at or
/// below `Psi_bar` under `sigma_bar`, found by bisection.
pub fn risk_temperature(params: &ThermalParams, sigma_bar: f64, ambient: f64, d_max: f64) -> RiskTemperature {
    let limit = params.safe_limit;
    let g = |psi: f64| next_unclamped(psi, ambient, d_max, sigma_bar, params) - limit;
    if g(limit) <= 0.0 {
        return RiskTemperature { value: limit, always_at_risk: false };
    }
    if ambient >= limit || g(ambient) > 0.0 {
        return RiskTemperature { value: ambient.min(limit), always_at_risk: true };
    }
    let (mut lo, mut hi) = (ambient, limit);
    while hi - lo > RISK_BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    RiskTemperature { value: lo, always_at_risk: false }
}

/// Affine maps of raw state features onto roughly [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateScaling {
    pub ambient: (f64, f64),
    pub chip: (f64, f64),
    pub sigma: (f64, f64),
}

impl Default for StateScaling {
    fn default() -> Self {
        Self { ambient: (25.0, 15.0), chip: (70.0, 50.0), sigma: (0.75, 0.5) }
    }
}

impl StateScaling {
    pub fn identity() -> Self {
        Self { ambient: (0.0, 1.0), chip: (0.0, 1.0), sigma: (0.0, 1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub scenario: Scenario,
    pub values: Vec<f64>,
}

/// Per cell `(ambient, chip[, sigma])`, affinely scaled.
pub fn make_state(state: &ThermalState, scenario: Scenario, scaling: &StateScaling) -> AgentState {
    let f = |x: f64, (c, s): (f64, f64)| (x - c) / s;
    let mut values = Vec::with_capacity(state.cells() * scenario.features_per_cell());
    for i in 0..state.cells() {
        values.push(f(state.ambient[i], scaling.ambient));
        values.push(f(state.chip[i], scaling.chip));
        if scenario == Scenario::Ihd {
            values.push(f(state.sigma[i], scaling.sigma));
        }
    }
    AgentState { scenario, values }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub scenario: Scenario,
    pub reward: RewardKind,
    pub norm: ThroughputNorm,
    /// Weight on the degC penalty terms.
    pub penalty_weight: f64,
    /// Per-cell throughput cap, bit/s.
    pub d_max: f64,
    /// Decision slots per episode.
    pub slots: usize,
    pub estimator: EstimatorMode,
    pub estimator_window: usize,
    pub estimator_prior: f64,
    /// End the episode on the first resource or temperature breach.
    pub terminate_on_breach: bool,
    pub scaling: StateScaling,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Ihd,
            reward: RewardKind::Mechanism,
            norm: ThroughputNorm::StdDev,
            penalty_weight: 1.0,
            d_max: 100e6,
            slots: 50,
            estimator: EstimatorMode::WorstCase,
            estimator_window: 20,
            estimator_prior: 0.75,
            terminate_on_breach: false,
            scaling: StateScaling::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.d_max > 0.0) {
            return Err(EnvError::InvalidConfig("d_max must be > 0".into()));
        }
        if self.slots == 0 {
            return Err(EnvError::InvalidConfig("slots must be >= 1".into()));
        }
        if !(self.estimator_prior > 0.0) {
            return Err(EnvError::InvalidConfig("estimator prior must be > 0".into()));
        }
        if !(self.penalty_weight >= 0.0) {
            return Err(EnvError::InvalidConfig("penalty weight must be >= 0".into()));
        }
        Ok(())
    }

    /// The estimator mode actually used: IHD always observes the truth.
    pub fn effective_estimator(&self) -> EstimatorMode {
        match self.scenario {
            Scenario::Ihd => EstimatorMode::Oracle,
            Scenario::Uhd => self.estimator,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub per_cell: Vec<f64>,
    pub total: f64,
    pub requested: Vec<f64>,
    pub executed: Vec<f64>,
    pub rho_hat: f64,
    pub solve_status: SolveStatus,
    /// Whole action rejected by the load gate (mechanism) or infeasible (naive).
    pub resource_denied: bool,
    pub thermal_denied: Vec<bool>,
    pub risk_zone: Vec<bool>,
    pub predicted: Vec<f64>,
    pub risk: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    /// True next temperature above the limit.
    pub overheated: Vec<bool>,
}

impl RewardBreakdown {
    pub fn breach(&self) -> bool {
        self.overheated.iter().any(|&o| o) || (self.resource_denied && self.requested.iter().any(|&d| d > 0.0))
    }
}

fn throughput_term(d: f64, denom: f64, norm: ThroughputNorm, d_max: f64) -> f64 {
    match norm {
        ThroughputNorm::StdDev => d / denom,
        ThroughputNorm::PeakFraction => d / d_max,
        ThroughputNorm::Mbps => d / 1e6,
    }
}

/// Population standard deviation, replaced by `d_max` when it is below
/// `1e-9 * d_max`.
fn std_denominator(d: &[f64], d_max: f64) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-9 * d_max {
        d_max
    } else {
        sd
    }
}

/// Load and thermal context shared by every step.
pub struct Plant<'a> {
    pub gains: &'a GainTable,
    pub solver: &'a SolverParams,
    pub thermal: &'a [ThermalParams],
}

/// Evaluates one slot. Returns the reward breakdown and the true next
/// thermal state (advanced with the actual `sigma` in `state`).
pub fn apply_reward_mechanism(
    state: &ThermalState,
    action: &[f64],
    plant: &Plant<'_>,
    sigma_bar: &[f64],
    next: &SlotConditions,
    cfg: &EnvConfig,
) -> Result<(RewardBreakdown, ThermalState), EnvError> {
    let cells = state.cells();
    let demand = DemandVector::new(action.to_vec(), cfg.d_max)?;
    let solve = solve_fixed_point(plant.gains, &demand, plant.solver, &LoadVector::zeros(plant.gains))?;
    let feasible = solve.feasible(plant.solver.resource_limit);
    let gated: Vec<f64> = if feasible { action.to_vec() } else { vec![0.0; cells] };

    let mut b = RewardBreakdown {
        per_cell: vec![0.0; cells],
        total: 0.0,
        requested: action.to_vec(),
        executed: gated.clone(),
        rho_hat: solve.rho_hat,
        solve_status: solve.status,
        resource_denied: !feasible,
        thermal_denied: vec![false; cells],
        risk_zone: vec![false; cells],
        predicted: vec![0.0; cells],
        risk: vec![0.0; cells],
        sigma_bar: sigma_bar.to_vec(),
        overheated: vec![false; cells],
    };

    match cfg.reward {
        RewardKind::Mechanism => {
            let denom = std_denominator(&gated, cfg.d_max);
            for i in 0..cells {
                let p = &plant.thermal[i];
                let limit = p.safe_limit;
                let risk = risk_temperature(p, sigma_bar[i], state.ambient[i], cfg.d_max).value;
                let pred = next_unclamped(state.chip[i], state.ambient[i], gated[i], sigma_bar[i], p);
                b.risk[i] = risk;
                b.predicted[i] = pred;
                let thr = throughput_term(gated[i], denom, cfg.norm, cfg.d_max);
                b.per_cell[i] = if pred > limit {
                    b.thermal_denied[i] = true;
                    b.executed[i] = 0.0;
                    cfg.penalty_weight * (limit - pred)
                } else if pred >= risk {
                    b.risk_zone[i] = true;
                    thr + cfg.penalty_weight * (risk - pred)
                } else {
                    thr
                };
            }
        }
        RewardKind::NaiveThroughput => {
            for i in 0..cells {
                let p = &plant.thermal[i];
                b.predicted[i] = next_unclamped(state.chip[i], state.ambient[i], gated[i], sigma_bar[i], p);
                b.risk[i] = p.safe_limit;
                let norm = if cfg.norm == ThroughputNorm::StdDev { ThroughputNorm::PeakFraction } else { cfg.norm };
                b.per_cell[i] = throughput_term(gated[i], cfg.d_max, norm, cfg.d_max);
            }
        }
    }
    b.total = b.per_cell.iter().sum();
    let next_state = step_temperature(state, &b.executed, plant.thermal, next);
    for i in 0..cells {
        b.overheated[i] = next_state.chip[i] > plant.thermal[i].safe_limit;
    }
    Ok((b, next_state))
}

/// What a policy sees before acting.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub state: &'a AgentState,
    pub thermal: &'a ThermalState,
    pub sigma_bar: &'a [f64],
}

pub trait Policy {
    /// Per-cell demand in bit/s.
    fn act(&mut self, obs: &Observation<'_>) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: AgentState,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub done: bool,
    /// Ended by a breach rather than the horizon.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub t: usize,
    pub chip: Vec<f64>,
    pub ambient: Vec<f64>,
    pub sigma: Vec<f64>,
    pub breakdown: RewardBreakdown,
}

pub struct Environment {
    gains: Arc<GainTable>,
    solver: SolverParams,
    thermal: Vec<ThermalParams>,
    config: EnvConfig,
    trace: Option<EnvironmentTrace>,
    state: ThermalState,
    agent_state: AgentState,
    estimator: SigmaEstimator,
    done: bool,
}

impl Environment {
    pub fn new(
        gains: Arc<GainTable>,
        solver: SolverParams,
        thermal: Vec<ThermalParams>,
        config: EnvConfig,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        solver.validate()?;
        let cells = gains.cell_count;
        if thermal.len() != cells {
            return Err(EnvError::InvalidConfig(format!("{} thermal param sets for {cells} cells", thermal.len())));
        }
        for p in &thermal {
            p.validate()?;
        }
        let estimator =
            SigmaEstimator::new(config.effective_estimator(), config.estimator_window, config.estimator_prior, cells);
        let state = ThermalState { chip: vec![0.0; cells], ambient: vec![0.0; cells], sigma: vec![1.0; cells], slot: 0 };
        let agent_state = make_state(&state, config.scenario, &config.scaling);
        Ok(Self { gains, solver, thermal, config, trace: None, state, agent_state, estimator, done: true })
    }

    pub fn cells(&self) -> usize {
        self.gains.cell_count
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn gains(&self) -> &Arc<GainTable> {
        &self.gains
    }

    pub fn solver(&self) -> &SolverParams {
        &self.solver
    }

    pub fn thermal_params(&self) -> &[ThermalParams] {
        &self.thermal
    }

    pub fn state_dim(&self) -> usize {
        self.cells() * self.config.scenario.features_per_cell()
    }

    pub fn thermal_state(&self) -> &ThermalState {
        &self.state
    }

    pub fn agent_state(&self) -> &AgentState {
        &self.agent_state
    }

    pub fn sigma_bar(&self) -> Vec<f64> {
        self.estimator.estimates(&self.state)
    }

    pub fn reset(&mut self, trace: EnvironmentTrace) -> Result<AgentState, EnvError> {
        if trace.cells() != self.cells() {
            return Err(EnvError::TraceShape { got: trace.cells(), expected: self.cells() });
        }
        if trace.slots() < self.config.slots {
            return Err(EnvError::TraceTooShort { got: trace.slots(), needed: self.config.slots });
        }
        self.state = ThermalState::from_trace(&trace);
        self.trace = Some(trace);
        self.estimator.reset();
        self.done = false;
        self.agent_state = make_state(&self.state, self.config.scenario, &self.config.scaling);
        Ok(self.agent_state.clone())
    }

    fn check_action(&self, action: &[f64]) -> Result<Vec<f64>, EnvError> {
        if action.len() != self.cells() {
            return Err(EnvError::ActionShape { got: action.len(), expected: self.cells() });
        }
        let d_max = self.config.d_max;
        action
            .iter()
            .enumerate()
            .map(|(cell, &v)| {
                let slack = 1e-9 * d_max;
                if !v.is_finite() || v < -slack || v > d_max + slack {
                    Err(EnvError::ActionOutOfRange { cell, value: v, d_max })
                } else {
                    Ok(v.clamp(0.0, d_max))
                }
            })
            .collect()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let action = self.check_action(action)?;
        let trace = self.trace.as_ref().expect("reset before step");
        let next = trace.conditions(self.state.slot + 1);
        let sigma_bar = self.sigma_bar();
        let plant = Plant { gains: &self.gains, solver: &self.solver, thermal: &self.thermal };
        let (breakdown, next_state) =
            apply_reward_mechanism(&self.state, &action, &plant, &sigma_bar, &next, &self.config)?;
        self.estimator.update_from_step(&self.state, &breakdown.executed, &next_state, &self.thermal);
        self.state = next_state;
        self.agent_state = make_state(&self.state, self.config.scenario, &self.config.scaling);
        let terminal = self.config.terminate_on_breach && breakdown.breach();
        let done = terminal || self.state.slot >= self.config.slots;
        self.done = done;
        Ok(StepOutcome { state: self.agent_state.clone(), reward: breakdown.total, breakdown, done, terminal })
    }

    /// Runs one episode on `trace` with `policy`.
    pub fn run_episode(
        &mut self,
        trace: EnvironmentTrace,
        policy: &mut dyn Policy,
        mut log: Option<&mut Vec<SlotRecord>>,
    ) -> Result<EpisodeSummary, EnvError> {
        self.reset(trace)?;
        let mut summary = EpisodeSummary::new(self.cells(), self.config.slots);
        loop {
            let sigma_bar = self.sigma_bar();
            let obs = Observation { state: &self.agent_state, thermal: &self.state, sigma_bar: &sigma_bar };
            let action = policy.act(&obs);
            let before = self.state.clone();
            let out = self.step(&action)?;
            summary.record(&out);
            if let Some(l) = log.as_deref_mut() {
                l.push(SlotRecord {
                    t: before.slot,
                    chip: before.chip,
                    ambient: before.ambient,
                    sigma: before.sigma,
                    breakdown: out.breakdown,
                });
            }
            if out.done {
                break;
            }
        }
        Ok(summary)
    }
}

/// Aggregates over one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeSummary {
    pub cells: usize,
    pub horizon: usize,
    pub steps: usize,
    /// Sum of executed per-cell throughput over slots, bit/s.
    pub throughput_sum: f64,
    pub total_reward: f64,
    /// Slots where at least one cell ended above the limit.
    pub overheated_slots: usize,
    pub resource_denials: usize,
    /// Cell-slots denied by the thermal forecast.
    pub thermal_denials: usize,
    pub risk_zone_slots: usize,
    pub max_temperature: f64,
    pub terminated_early: bool,
}

impl EpisodeSummary {
    pub fn new(cells: usize, horizon: usize) -> Self {
        Self { cells, horizon, max_temperature: f64::NEG_INFINITY, ..Self::default() }
    }

    pub fn record(&mut self, out: &StepOutcome) {
        let b = &out.breakdown;
        self.steps += 1;
        self.throughput_sum += b.executed.iter().sum::<f64>();
        self.total_reward += out.reward;
        if b.overheated.iter().any(|&o| o) {
            self.overheated_slots += 1;
        }
        if b.resource_denied {
            self.resource_denials += 1;
        }
        self.thermal_denials += b.thermal_denied.iter().filter(|&&d| d).count();
        if b.risk_zone.iter().any(|&z| z) {
            self.risk_zone_slots += 1;
        }
        self.terminated_early |= out.terminal;
        self.max_temperature = self.max_temperature.max(b.predicted.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    /// Mean executed throughput per cell per horizon slot, Mbps. Slots lost to
    /// early termination count as zero.
    pub fn mean_throughput_per_cell_mbps(&self) -> f64 {
        self.throughput_sum / (self.cells * self.horizon) as f64 / 1e6
    }

    pub fn overheating_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.overheated_slots as f64 / self.steps as f64
        }
    }
}

fn flag_label(b: &RewardBreakdown, i: usize) -> &'static str {
    if b.resource_denied {
        "resource"
    } else if b.thermal_denied[i] {
        "thermal"
    } else if b.risk_zone[i] {
        "risk"
    } else {
        "none"
    }
}

pub fn write_slot_log<W: Write>(records: &[SlotRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "t,cell,D_requested,D_executed,rho_hat,Psi,Psi_hat,sigma,sigma_bar,Psi_risk,reward,denied_flags")?;
    for r in records {
        let b = &r.breakdown;
        for i in 0..r.chip.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                i,
                b.requested[i],
                b.executed[i],
                b.rho_hat,
                r.chip[i],
                r.ambient[i],
                r.sigma[i],
                b.sigma_bar[i],
                b.risk[i],
                b.per_cell[i],
                flag_label(b, i)
            )?;
        }
    }
    Ok(())
}
