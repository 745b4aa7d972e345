//! Experiment specification files.
//!
//! Flat UTF-8 `key = value` lines with dotted section prefixes. `#` starts a
//! comment; blank lines are ignored. Unknown keys are errors. The full schema
//! is listed in the README.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::baselines::OracleConfig;
use crate::environment::{EnvConfig, RewardKind, Scenario};
use crate::load::{LogBase, SolverParams};
use crate::sac::{SacConfig, TwinCombine};
use crate::thermal::ThermalParams;
use crate::topology::{InterferenceMode, NetworkConfig, SymbolMode};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    Eval,
    AmbientSweep,
    RewardAblation,
    Mobility,
    OracleCompare,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Eval => "eval",
            ExperimentKind::AmbientSweep => "sweep",
            ExperimentKind::RewardAblation => "ablate",
            ExperimentKind::Mobility => "mobility",
            ExperimentKind::OracleCompare => "oracle",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "train" => ExperimentKind::Train,
            "eval" => ExperimentKind::Eval,
            "sweep" | "ambient_sweep" => ExperimentKind::AmbientSweep,
            "ablate" | "reward_ablation" => ExperimentKind::RewardAblation,
            "mobility" => ExperimentKind::Mobility,
            "oracle" | "oracle_compare" => ExperimentKind::OracleCompare,
            other => return Err(format!("unknown experiment kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub network: NetworkConfig,
    pub interference: InterferenceMode,
    pub thermal: ThermalParams,
    pub solver: SolverParams,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub oracle: OracleConfig,
    /// Training episodes.
    pub episodes: usize,
    /// Evaluation traces per setting.
    pub eval_episodes: usize,
    pub seed: u64,
    /// Mean ambient range sampled per training episode, degC.
    pub train_ambient: (f64, f64),
    /// Mean ambient for evaluation, degC.
    pub eval_ambient: f64,
    pub sweep_ambients: Vec<f64>,
    /// Displacements as a percentage of the cell diameter.
    pub displacements: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Train,
            network: NetworkConfig::default(),
            interference: InterferenceMode::UpperBound,
            thermal: ThermalParams::default(),
            solver: SolverParams::default(),
            env: EnvConfig::default(),
            sac: SacConfig::default(),
            oracle: OracleConfig::default(),
            episodes: 5000,
            eval_episodes: 20,
            seed: 1,
            train_ambient: (16.0, 32.0),
            eval_ambient: 24.0,
            sweep_ambients: vec![16.0, 20.0, 24.0, 28.0, 32.0],
            displacements: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("bad value `{v}`: {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad boolean `{v}`")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|x| parse(x.trim())).collect()
}

impl ExperimentSpec {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut spec = Self::default();
        let mut waterfill: Option<f64> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(ConfigError::Parse { line, msg: format!("missing value for `{key}`") });
            }
            spec.set(key, value, &mut waterfill).map_err(|msg| ConfigError::Parse { line, msg })?;
        }
        if let Some(r) = waterfill {
            spec.network.symbol_mode = SymbolMode::Waterfill { noise_to_power: r };
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, v: &str, waterfill: &mut Option<f64>) -> Result<(), String> {
        let net = &mut self.network;
        let th = &mut self.thermal;
        let so = &mut self.solver;
        let env = &mut self.env;
        let sac = &mut self.sac;
        let or = &mut self.oracle;
        match key {
            "experiment.kind" => self.kind = parse(v)?,
            "experiment.scenario" => env.scenario = parse(v)?,
            "experiment.episodes" => self.episodes = parse(v)?,
            "experiment.eval_episodes" => self.eval_episodes = parse(v)?,
            "experiment.seed" => self.seed = parse(v)?,
            "experiment.train_ambient_min" => self.train_ambient.0 = parse(v)?,
            "experiment.train_ambient_max" => self.train_ambient.1 = parse(v)?,
            "experiment.eval_ambient" => self.eval_ambient = parse(v)?,
            "experiment.sweep_ambients" => self.sweep_ambients = parse_list(v)?,
            "experiment.displacements" => self.displacements = parse_list(v)?,
            "experiment.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),

            "network.cells" => net.cell_count = parse(v)?,
            "network.users_per_cell" => net.users_per_cell = parse(v)?,
            "network.tx_antennas" => net.tx_antennas = parse(v)?,
            "network.rx_antennas" => net.rx_antennas = parse(v)?,
            "network.rb_bandwidth" => net.rb_bandwidth = parse(v)?,
            "network.rb_count" => net.rb_count = parse(v)?,
            "network.noise_psd" => net.noise_psd = parse(v)?,
            "network.symbol_power" => net.symbol_power = parse(v)?,
            "network.cell_radius" => net.cell_radius = parse(v)?,
            "network.pathloss_exponent" => net.pathloss_exponent = parse(v)?,
            "network.reference_distance" => net.reference_distance = parse(v)?,
            "network.seed" => net.seed = parse(v)?,
            "network.symbol_mode" => match v {
                "principal" => {
                    net.symbol_mode = SymbolMode::Principal;
                    *waterfill = None;
                }
                "waterfill" => *waterfill = Some(waterfill.unwrap_or(1.0)),
                _ => return Err(format!("unknown symbol mode `{v}`")),
            },
            "network.waterfill_noise_to_power" => *waterfill = Some(parse(v)?),
            "network.interference" => self.interference = parse(v)?,

            "thermal.lambda" => th.lambda = parse(v)?,
            "thermal.mu" => th.mu = parse(v)?,
            "thermal.alpha" => th.alpha = parse(v)?,
            "thermal.beta" => th.beta = parse(v)?,
            "thermal.gamma" => th.gamma = parse(v)?,
            "thermal.slot_seconds" => th.slot_seconds = parse(v)?,
            "thermal.safe_limit" => th.safe_limit = parse(v)?,

            "solver.tolerance" => so.tolerance = parse(v)?,
            "solver.max_iterations" => so.max_iterations = parse(v)?,
            "solver.resource_limit" => so.resource_limit = parse(v)?,
            "solver.blowup_ceiling" => so.blowup_ceiling = parse(v)?,
            "solver.log_base" => {
                so.log_base = match v {
                    "2" => LogBase::Two,
                    "e" => LogBase::Natural,
                    _ => return Err(format!("log base must be `2` or `e`, got `{v}`")),
                }
            }

            "env.slots" => env.slots = parse(v)?,
            "env.d_max" => env.d_max = parse(v)?,
            "env.reward" => {
                env.reward = match v {
                    "mechanism" => RewardKind::Mechanism,
                    "naive" => RewardKind::NaiveThroughput,
                    _ => return Err(format!("unknown reward `{v}`")),
                }
            }
            "env.norm" => env.norm = parse(v)?,
            "env.penalty_weight" => env.penalty_weight = parse(v)?,
            "env.estimator" => env.estimator = parse(v)?,
            "env.estimator_window" => env.estimator_window = parse(v)?,
            "env.estimator_prior" => env.estimator_prior = parse(v)?,
            "env.terminate_on_breach" => env.terminate_on_breach = parse_bool(v)?,

            "sac.entropy" => sac.entropy = parse(v)?,
            "sac.discount" => sac.discount = parse(v)?,
            "sac.tau" => sac.tau = parse(v)?,
            "sac.batch_size" => sac.batch_size = parse(v)?,
            "sac.replay_capacity" => sac.replay_capacity = parse(v)?,
            "sac.target_update_interval" => sac.target_update_interval = parse(v)?,
            "sac.grad_steps_per_env_step" => sac.grad_steps_per_env_step = parse(v)?,
            "sac.lr" => {
                let lr = parse(v)?;
                sac.lr_policy = lr;
                sac.lr_q = lr;
                sac.lr_v = lr;
            }
            "sac.lr_policy" => sac.lr_policy = parse(v)?,
            "sac.lr_q" => sac.lr_q = parse(v)?,
            "sac.lr_v" => sac.lr_v = parse(v)?,
            "sac.hidden" => sac.hidden = parse_list(v)?,
            "sac.warmup_steps" => sac.warmup_steps = parse(v)?,
            "sac.log_std_min" => sac.log_std_min = parse(v)?,
            "sac.log_std_max" => sac.log_std_max = parse(v)?,
            "sac.twin" => {
                sac.twin = match v {
                    "min" => TwinCombine::Min,
                    "q1" => TwinCombine::Q1Only,
                    _ => return Err(format!("twin must be `min` or `q1`, got `{v}`")),
                }
            }
            "sac.seed" => sac.seed = parse(v)?,

            "oracle.levels" => or.levels = parse(v)?,
            "oracle.temp_grid" => or.temp_grid = parse(v)?,
            "oracle.max_cells" => or.max_cells = parse(v)?,
            "oracle.work_budget" => or.work_budget = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.network.validate().map_err(|e| inv(&e))?;
        self.thermal.validate().map_err(|e| inv(&e))?;
        self.solver.validate().map_err(|e| inv(&e))?;
        self.env.validate().map_err(|e| inv(&e))?;
        self.sac.validate().map_err(|e| inv(&e))?;
        self.oracle.validate().map_err(|e| inv(&e))?;
        if !(self.train_ambient.0 <= self.train_ambient.1) {
            return Err(ConfigError::Invalid("train ambient range is empty".into()));
        }
        if self.sweep_ambients.is_empty() || self.displacements.is_empty() {
            return Err(ConfigError::Invalid("sweep lists must be non-empty".into()));
        }
        if self.displacements.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(ConfigError::Invalid("displacements must be >= 0".into()));
        }
        if self.eval_episodes == 0 {
            return Err(ConfigError::Invalid("eval_episodes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        self.env.scenario
    }
}
