//! Experiment runners: training, evaluation, ambient sweep, reward ablation,
//! mobility and oracle comparison. Every output is fully determined by the
//! spec and its seed.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::baselines::{
    hindsight_oracle, Aggressive, BaselineError, Conservative, NaiveAdaptive, OracleConfig,
};
use crate::config::{ExperimentKind, ExperimentSpec};
use crate::environment::{write_slot_log, EnvConfig, EnvError, Environment, Policy, RewardKind, Scenario};
use crate::load::{LoadError, SolverParams};
use crate::rng::{derive_seed, seeded};
use crate::sac::{train, write_learning_curve, EpisodeLog, PolicyCheckpoint, SacAgent, SacConfig, SacError};
use crate::thermal::{EnvironmentTrace, ThermalParams};
use crate::topology::{build_gain_table, generate_instance, GainTable, InterferenceMode, NetworkInstance, TopologyError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("eval needs a checkpoint (experiment.checkpoint)")]
    MissingCheckpoint,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Io { context, source }
}

/// Instance, gains and per-cell physics shared by every run of a spec.
#[derive(Debug, Clone)]
pub struct Setup {
    pub instance: NetworkInstance,
    pub mode: InterferenceMode,
    pub gains: Arc<GainTable>,
    pub solver: SolverParams,
    pub thermal: Vec<ThermalParams>,
}

impl Setup {
    pub fn new(
        instance: NetworkInstance,
        mode: InterferenceMode,
        solver: SolverParams,
        thermal: ThermalParams,
    ) -> Self {
        let gains = Arc::new(build_gain_table(&instance, mode));
        let cells = instance.cell_count();
        Self { instance, mode, gains, solver, thermal: vec![thermal; cells] }
    }

    pub fn from_spec(spec: &ExperimentSpec) -> Result<Self, ExperimentError> {
        let instance = generate_instance(&spec.network)?;
        Ok(Self::new(instance, spec.interference, spec.solver, spec.thermal))
    }

    /// Same physics on users moved by `percent` of the cell diameter.
    pub fn displaced(&self, percent: f64, seed: u64) -> Result<Self, ExperimentError> {
        let inst = self.instance.displace_users(percent / 100.0, seed)?;
        Ok(Self::new(inst, self.mode, self.solver, self.thermal[0]))
    }

    pub fn cells(&self) -> usize {
        self.instance.cell_count()
    }

    pub fn env(&self, cfg: &EnvConfig) -> Result<Environment, ExperimentError> {
        Ok(Environment::new(self.gains.clone(), self.solver, self.thermal.clone(), cfg.clone())?)
    }

    pub fn naive_adaptive(&self, d_max: f64) -> Result<NaiveAdaptive, ExperimentError> {
        Ok(NaiveAdaptive::new(&self.gains, &self.solver, self.thermal.clone(), d_max)?)
    }
}

/// Evaluation trace `k`. Traces sharing `(seed, k)` differ across mean
/// ambients only by scale, so sweeps compare like with like.
pub fn eval_trace(cells: usize, slots: usize, ambient: f64, seed: u64, k: usize) -> EnvironmentTrace {
    EnvironmentTrace::generate(cells, slots, ambient, derive_seed(seed, 2_000_000 + k as u64))
}

pub fn eval_traces(cells: usize, slots: usize, ambient: f64, seed: u64, count: usize) -> Vec<EnvironmentTrace> {
    (0..count).map(|k| eval_trace(cells, slots, ambient, seed, k)).collect()
}

/// Trains an agent on traces whose mean ambient is drawn per episode from
/// `ambient`.
pub fn train_agent(
    setup: &Setup,
    env_cfg: &EnvConfig,
    sac: &SacConfig,
    episodes: usize,
    ambient: (f64, f64),
    seed: u64,
) -> Result<(SacAgent, Vec<EpisodeLog>), ExperimentError> {
    let mut env = setup.env(env_cfg)?;
    let mut rng = seeded(derive_seed(seed, 10));
    let (cells, slots) = (setup.cells(), env_cfg.slots);
    let mut traces = |ep: usize| {
        let mean = if ambient.1 > ambient.0 { rng.random_range(ambient.0..ambient.1) } else { ambient.0 };
        EnvironmentTrace::generate(cells, slots, mean, derive_seed(seed, 1_000_000 + ep as u64))
    };
    let cfg = SacConfig { seed: derive_seed(seed, 11), ..sac.clone() };
    Ok(train(&mut env, cfg, episodes, &mut traces)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalSummary {
    pub episodes: usize,
    pub slots: usize,
    pub mean_throughput_mbps: f64,
    pub overheat_rate: f64,
    pub resource_denial_rate: f64,
    pub thermal_denial_rate: f64,
    pub max_temperature: f64,
}

impl EvalSummary {
    pub fn non_overheating_rate(&self) -> f64 {
        1.0 - self.overheat_rate
    }
}

/// Runs `policy` on every trace; rates are over all executed slots.
pub fn evaluate(
    setup: &Setup,
    env_cfg: &EnvConfig,
    policy: &mut dyn Policy,
    traces: &[EnvironmentTrace],
) -> Result<EvalSummary, ExperimentError> {
    let mut env = setup.env(env_cfg)?;
    let mut out = EvalSummary { max_temperature: f64::NEG_INFINITY, ..EvalSummary::default() };
    let (mut thr, mut hot, mut res, mut therm) = (0.0, 0, 0, 0);
    for tr in traces {
        let s = env.run_episode(tr.clone(), policy, None)?;
        out.episodes += 1;
        out.slots += s.steps;
        thr += s.mean_throughput_per_cell_mbps();
        hot += s.overheated_slots;
        res += s.resource_denials;
        therm += s.thermal_denials;
        out.max_temperature = out.max_temperature.max(s.max_temperature);
    }
    let slots = out.slots.max(1) as f64;
    out.mean_throughput_mbps = thr / out.episodes.max(1) as f64;
    out.overheat_rate = hot as f64 / slots;
    out.resource_denial_rate = res as f64 / slots;
    out.thermal_denial_rate = therm as f64 / (slots * setup.cells() as f64);
    Ok(out)
}

/// Environment used to score a naive-reward policy: same physics, nothing
/// denied, full episodes.
pub fn naive_eval_config(cfg: &EnvConfig) -> EnvConfig {
    EnvConfig { reward: RewardKind::NaiveThroughput, terminate_on_breach: false, ..cfg.clone() }
}

/// Training config for the naive-reward ablation arm.
pub fn naive_train_config(cfg: &EnvConfig) -> EnvConfig {
    EnvConfig { reward: RewardKind::NaiveThroughput, terminate_on_breach: true, ..cfg.clone() }
}

/// Ordered `key=value` summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary(pub Vec<(String, String)>);

impl Summary {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.0.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    fn push_eval(&mut self, prefix: &str, e: &EvalSummary) {
        self.push(format!("{prefix}.mean_throughput_mbps"), e.mean_throughput_mbps);
        self.push(format!("{prefix}.overheat_rate"), e.overheat_rate);
        self.push(format!("{prefix}.resource_denial_rate"), e.resource_denial_rate);
        self.push(format!("{prefix}.thermal_denial_rate"), e.thermal_denial_rate);
    }
}

struct Out {
    dir: PathBuf,
}

impl Out {
    fn new(dir: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), ExperimentError> {
        let path = self.dir.join(name);
        let ctx = format!("writing {}", path.display());
        let file = File::create(&path).map_err(io_err(ctx.clone()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(ctx))
    }
}

fn eval_header(w: &mut impl Write, first: &str) -> io::Result<()> {
    writeln!(w, "{first},policy,mean_throughput_mbps,overheat_rate,resource_denial_rate,thermal_denial_rate")
}

fn eval_row(w: &mut impl Write, first: impl std::fmt::Display, policy: &str, e: &EvalSummary) -> io::Result<()> {
    writeln!(
        w,
        "{first},{policy},{},{},{},{}",
        e.mean_throughput_mbps, e.overheat_rate, e.resource_denial_rate, e.thermal_denial_rate
    )
}

/// Runs the experiment named in `spec` and writes its artifacts into `out`.
pub fn run(spec: &ExperimentSpec, out: &Path) -> Result<Summary, ExperimentError> {
    let out = Out::new(out)?;
    let setup = Setup::from_spec(spec)?;
    let mut summary = Summary::default();
    summary.push("experiment", spec.kind.name());
    summary.push("scenario", spec.scenario().name());
    summary.push("seed", spec.seed);
    summary.push("cells", setup.cells());
    summary.push("users_per_cell", spec.network.users_per_cell);
    summary.push("slots", spec.env.slots);
    out.write("gains.csv", |w| setup.gains.write_csv(w))?;

    match spec.kind {
        ExperimentKind::Train => run_train(spec, &setup, &out, &mut summary)?,
        ExperimentKind::Eval => run_eval(spec, &setup, &out, &mut summary)?,
        ExperimentKind::AmbientSweep => run_sweep(spec, &setup, &out, &mut summary)?,
        ExperimentKind::RewardAblation => run_ablation(spec, &setup, &out, &mut summary)?,
        ExperimentKind::Mobility => run_mobility(spec, &setup, &out, &mut summary)?,
        ExperimentKind::OracleCompare => run_oracle(spec, &setup, &out, &mut summary)?,
    }
    let text = summary.render();
    out.write("summary.txt", |w| w.write_all(text.as_bytes()))?;
    Ok(summary)
}

fn train_and_save(
    spec: &ExperimentSpec,
    setup: &Setup,
    env_cfg: &EnvConfig,
    out: &Out,
    tag: &str,
    seed: u64,
) -> Result<PolicyCheckpoint, ExperimentError> {
    let (agent, log) = train_agent(setup, env_cfg, &spec.sac, spec.episodes, spec.train_ambient, seed)?;
    out.write(&format!("learning_curve_{tag}.csv"), |w| write_learning_curve(&log, w))?;
    let ck = agent.checkpoint();
    let path = out.dir.join(format!("policy_{tag}.ckpt"));
    ck.save(&path)?;
    Ok(ck)
}

fn policy_from(spec: &ExperimentSpec, setup: &Setup, out: &Out) -> Result<PolicyCheckpoint, ExperimentError> {
    match &spec.checkpoint {
        Some(p) => Ok(PolicyCheckpoint::load(p)?),
        None => train_and_save(spec, setup, &spec.env, out, spec.scenario().name(), spec.seed),
    }
}

fn run_train(spec: &ExperimentSpec, setup: &Setup, out: &Out, summary: &mut Summary) -> Result<(), ExperimentError> {
    let mut ck = train_and_save(spec, setup, &spec.env, out, spec.scenario().name(), spec.seed)?;
    let traces = eval_traces(setup.cells(), spec.env.slots, spec.eval_ambient, spec.seed, spec.eval_episodes);
    let e = evaluate(setup, &spec.env, &mut ck, &traces)?;
    let mut env = setup.env(&spec.env)?;
    let mut log = Vec::new();
    env.run_episode(traces[0].clone(), &mut ck, Some(&mut log))?;
    out.write("slots.csv", |w| write_slot_log(&log, w))?;
    out.write("trace.csv", |w| traces[0].write_csv(w))?;
    summary.push("episodes", spec.episodes);
    summary.push_eval("sac", &e);
    Ok(())
}

fn run_eval(spec: &ExperimentSpec, setup: &Setup, out: &Out, summary: &mut Summary) -> Result<(), ExperimentError> {
    let path = spec.checkpoint.as_ref().ok_or(ExperimentError::MissingCheckpoint)?;
    let mut ck = PolicyCheckpoint::load(path)?;
    let traces = eval_traces(setup.cells(), spec.env.slots, spec.eval_ambient, spec.seed, spec.eval_episodes);
    let e = evaluate(setup, &spec.env, &mut ck, &traces)?;
    let mut env = setup.env(&spec.env)?;
    let mut log = Vec::new();
    env.run_episode(traces[0].clone(), &mut ck, Some(&mut log))?;
    out.write("slots.csv", |w| write_slot_log(&log, w))?;
    summary.push_eval("sac", &e);
    Ok(())
}

fn run_sweep(spec: &ExperimentSpec, setup: &Setup, out: &Out, summary: &mut Summary) -> Result<(), ExperimentError> {
    let mut ck = policy_from(spec, setup, out)?;
    let d_max = spec.env.d_max;
    let mut rows = Vec::new();
    for &amb in &spec.sweep_ambients {
        let traces = eval_traces(setup.cells(), spec.env.slots, amb, spec.seed, spec.eval_episodes);
        let sac = evaluate(setup, &spec.env, &mut ck, &traces)?;
        let naive = evaluate(setup, &spec.env, &mut setup.naive_adaptive(d_max)?, &traces)?;
        summary.push(format!("sac.ambient_{amb}.mean_throughput_mbps"), sac.mean_throughput_mbps);
        summary.push(format!("naive_adaptive.ambient_{amb}.mean_throughput_mbps"), naive.mean_throughput_mbps);
        rows.push((amb, sac, naive));
    }
    out.write("ambient_sweep.csv", |w| {
        eval_header(w, "ambient")?;
        for (amb, s, n) in &rows {
            eval_row(w, amb, "sac", s)?;
            eval_row(w, amb, "naive_adaptive", n)?;
        }
        Ok(())
    })?;
    let monotone = rows.windows(2).all(|p| p[1].1.mean_throughput_mbps <= p[0].1.mean_throughput_mbps);
    summary.push("sac.non_increasing_in_ambient", monotone);
    Ok(())
}

fn run_ablation(spec: &ExperimentSpec, setup: &Setup, out: &Out, summary: &mut Summary) -> Result<(), ExperimentError> {
    let mech_cfg = EnvConfig { reward: RewardKind::Mechanism, ..spec.env.clone() };
    let mut mech = train_and_save(spec, setup, &mech_cfg, out, "mechanism", spec.seed)?;
    let mut naive = train_and_save(spec, setup, &naive_train_config(&spec.env), out, "naive_reward", spec.seed)?;
    let traces = eval_traces(setup.cells(), spec.env.slots, spec.eval_ambient, spec.seed, spec.eval_episodes);
    let m = evaluate(setup, &mech_cfg, &mut mech, &traces)?;
    let n = evaluate(setup, &naive_eval_config(&spec.env), &mut naive, &traces)?;
    out.write("reward_ablation.csv", |w| {
        eval_header(w, "reward")?;
        eval_row(w, "mechanism", "sac", &m)?;
        eval_row(w, "naive", "sac", &n)
    })?;
    summary.push_eval("mechanism", &m);
    summary.push_eval("naive_reward", &n);
    Ok(())
}

fn run_mobility(spec: &ExperimentSpec, setup: &Setup, out: &Out, summary: &mut Summary) -> Result<(), ExperimentError> {
    let mut frozen = policy_from(spec, setup, out)?;
    let traces = eval_traces(setup.cells(), spec.env.slots, spec.eval_ambient, spec.seed, spec.eval_episodes);
    let mut rows = Vec::new();
    for &pct in &spec.displacements {
        let moved = setup.displaced(pct, derive_seed(spec.seed, 3))?;
        let f = evaluate(&moved, &spec.env, &mut frozen, &traces)?;
        let fresh = if pct > 0.0 {
            let mut ck = train_and_save(spec, &moved, &spec.env, out, &format!("fresh_{pct}"), spec.seed)?;
            Some(evaluate(&moved, &spec.env, &mut ck, &traces)?)
        } else {
            None
        };
        summary.push(format!("frozen.displacement_{pct}.mean_throughput_mbps"), f.mean_throughput_mbps);
        summary.push(format!("frozen.displacement_{pct}.non_overheating_rate"), f.non_overheating_rate());
        if let Some(n) = &fresh {
            summary.push(format!("fresh.displacement_{pct}.mean_throughput_mbps"), n.mean_throughput_mbps);
        }
        rows.push((pct, f, fresh));
    }
    out.write("mobility.csv", |w| {
        eval_header(w, "displacement_percent")?;
        for (pct, f, fresh) in &rows {
            eval_row(w, pct, "frozen", f)?;
            if let Some(n) = fresh {
                eval_row(w, pct, "fresh", n)?;
            }
        }
        Ok(())
    })
}

fn run_oracle(spec: &ExperimentSpec, setup: &Setup, out: &Out, summary: &mut Summary) -> Result<(), ExperimentError> {
    let mut sac = policy_from(spec, setup, out)?;
    let d_max = spec.env.d_max;
    let traces = eval_traces(setup.cells(), spec.env.slots, spec.eval_ambient, spec.seed, spec.eval_episodes);
    let mut oracle_total = 0.0;
    for (k, tr) in traces.iter().enumerate() {
        let sol = hindsight_oracle(&setup.gains, &setup.solver, &setup.thermal, tr, spec.env.slots, d_max, &spec.oracle)?;
        if k == 0 {
            out.write("oracle_actions.csv", |w| sol.write_csv(w))?;
        }
        oracle_total += sol.mean_throughput_per_cell_mbps();
    }
    let oracle = oracle_total / traces.len() as f64;
    let mut rows: Vec<(&str, EvalSummary)> = vec![
        ("sac", evaluate(setup, &spec.env, &mut sac, &traces)?),
        ("naive_adaptive", evaluate(setup, &spec.env, &mut setup.naive_adaptive(d_max)?, &traces)?),
        ("aggressive", evaluate(setup, &spec.env, &mut Aggressive { d_max }, &traces)?),
        ("conservative", evaluate(setup, &spec.env, &mut Conservative::new(d_max), &traces)?),
    ];
    out.write("oracle_compare.csv", |w| {
        writeln!(w, "policy,mean_throughput_mbps,percent_of_oracle,overheat_rate")?;
        writeln!(w, "oracle,{oracle},100,0")?;
        for (name, e) in &rows {
            writeln!(w, "{name},{},{},{}", e.mean_throughput_mbps, 100.0 * e.mean_throughput_mbps / oracle, e.overheat_rate)?;
        }
        Ok(())
    })?;
    summary.push("oracle.mean_throughput_mbps", oracle);
    for (name, e) in rows.drain(..) {
        summary.push_eval(name, &e);
        summary.push(format!("{name}.percent_of_oracle"), 100.0 * e.mean_throughput_mbps / oracle);
    }
    Ok(())
}

/// Oracle settings used when a comparison must finish quickly.
pub fn quick_oracle() -> OracleConfig {
    OracleConfig { levels: 6, temp_grid: 40, ..OracleConfig::default() }
}

/// Scenario-specific env config derived from a base.
pub fn with_scenario(cfg: &EnvConfig, scenario: Scenario) -> EnvConfig {
    EnvConfig { scenario, ..cfg.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(kind: ExperimentKind) -> ExperimentSpec {
        let mut s = ExperimentSpec::default();
        s.kind = kind;
        s.network.cell_count = 2;
        s.network.users_per_cell = 3;
        s.env.slots = 5;
        s.episodes = 3;
        s.eval_episodes = 2;
        s.sac.hidden = vec![8];
        s.sac.batch_size = 4;
        s.sac.warmup_steps = 5;
        s.oracle = OracleConfig { levels: 3, temp_grid: 10, ..OracleConfig::default() };
        s.sweep_ambients = vec![16.0, 32.0];
        s.displacements = vec![0.0, 10.0];
        s
    }

    #[test]
    fn every_experiment_writes_a_summary() {
        for kind in [
            ExperimentKind::Train,
            ExperimentKind::AmbientSweep,
            ExperimentKind::RewardAblation,
            ExperimentKind::Mobility,
            ExperimentKind::OracleCompare,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let s = run(&tiny_spec(kind), dir.path()).unwrap();
            assert_eq!(s.get("experiment"), Some(kind.name()));
            let text = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
            assert_eq!(text, s.render());
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = tiny_spec(ExperimentKind::Train);
        run(&spec, a.path()).unwrap();
        run(&spec, b.path()).unwrap();
        for f in ["summary.txt", "learning_curve_ihd.csv", "slots.csv", "policy_ihd.ckpt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn eval_requires_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let r = run(&tiny_spec(ExperimentKind::Eval), dir.path());
        assert!(matches!(r, Err(ExperimentError::MissingCheckpoint)));
    }

    #[test]
    fn zero_displacement_keeps_throughput() {
        let spec = tiny_spec(ExperimentKind::Train);
        let setup = Setup::from_spec(&spec).unwrap();
        let moved = setup.displaced(0.0, 9).unwrap();
        let traces = eval_traces(2, 5, 24.0, 1, 2);
        let mut na = setup.naive_adaptive(100e6).unwrap();
        let a = evaluate(&setup, &spec.env, &mut na, &traces).unwrap();
        let b = evaluate(&moved, &spec.env, &mut na, &traces).unwrap();
        assert_eq!(a, b);
    }
}
