//! Soft actor-critic with a squashed Gaussian policy, twin Q-networks and a
//! state-value network with a Polyak-averaged target.
//!
//! The agent works in the normalized action box `[0, 1]^I`; the environment
//! receives `a * D_max`. Log-densities are taken with respect to the
//! normalized box.

use std::io::{self, Read, Write};

use ndarray::{s, concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::environment::{EnvError, Environment, Observation, Policy, RewardBreakdown};
use crate::neural::{adam_step, AdamState, DenseNet, Gradients, NeuralError};
use crate::rng::{derive_seed, seeded};
use crate::thermal::EnvironmentTrace;

#[derive(Debug, Error)]
pub enum SacError {
    #[error("invalid SAC config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at episode {episode}")]
    Diverged { what: &'static str, episode: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwinCombine {
    Min,
    Q1Only,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    /// Entropy coefficient `k`.
    pub entropy: f64,
    pub discount: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Gradient steps between target updates.
    pub target_update_interval: usize,
    pub grad_steps_per_env_step: usize,
    pub lr_policy: f64,
    pub lr_q: f64,
    pub lr_v: f64,
    pub hidden: Vec<usize>,
    /// Uniform random actions before the policy is used.
    pub warmup_steps: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub twin: TwinCombine,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            entropy: 0.2,
            discount: 0.99,
            tau: 0.005,
            batch_size: 256,
            replay_capacity: 1_000_000,
            target_update_interval: 1,
            grad_steps_per_env_step: 1,
            lr_policy: 3e-4,
            lr_q: 3e-4,
            lr_v: 3e-4,
            hidden: vec![64, 64],
            warmup_steps: 1000,
            log_std_min: -20.0,
            log_std_max: 2.0,
            twin: TwinCombine::Min,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::InvalidConfig(m.into()));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must be in [0, 1)");
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return bad("batch size must be in [1, capacity]");
        }
        if self.target_update_interval == 0 {
            return bad("target update interval must be >= 1");
        }
        if !(self.entropy >= 0.0) {
            return bad("entropy coefficient must be >= 0");
        }
        if [self.lr_policy, self.lr_q, self.lr_v].iter().any(|&l| !(l >= 0.0)) {
            return bad("learning rates must be >= 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log-std clamp range is empty");
        }
        Ok(())
    }

    /// `key=value` lines, used as the checkpoint echo.
    pub fn echo(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        format!(
            "entropy={}\ndiscount={}\ntau={}\nbatch_size={}\nreplay_capacity={}\ntarget_update_interval={}\n\
             grad_steps_per_env_step={}\nlr_policy={}\nlr_q={}\nlr_v={}\nhidden={}\nwarmup_steps={}\n\
             log_std_min={}\nlog_std_max={}\ntwin={}\nseed={}\n",
            self.entropy,
            self.discount,
            self.tau,
            self.batch_size,
            self.replay_capacity,
            self.target_update_interval,
            self.grad_steps_per_env_step,
            self.lr_policy,
            self.lr_q,
            self.lr_v,
            hidden.join(","),
            self.warmup_steps,
            self.log_std_min,
            self.log_std_max,
            match self.twin {
                TwinCombine::Min => "min",
                TwinCombine::Q1Only => "q1",
            },
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Normalized action in `[0, 1]^I`.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Ring buffer of transitions stored in flat arrays.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<f64>,
    len: usize,
    cursor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub terminals: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            capacity,
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminals: Vec::new(),
            len: 0,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) {
        assert_eq!(t.state.len(), self.state_dim);
        assert_eq!(t.next_state.len(), self.state_dim);
        assert_eq!(t.action.len(), self.action_dim);
        let term = if t.terminal { 1.0 } else { 0.0 };
        if self.len < self.capacity {
            self.states.extend(&t.state);
            self.actions.extend(&t.action);
            self.rewards.push(t.reward);
            self.next_states.extend(&t.next_state);
            self.terminals.push(term);
            self.len += 1;
        } else {
            let c = self.cursor;
            let (sd, ad) = (self.state_dim, self.action_dim);
            self.states[c * sd..(c + 1) * sd].copy_from_slice(&t.state);
            self.actions[c * ad..(c + 1) * ad].copy_from_slice(&t.action);
            self.rewards[c] = t.reward;
            self.next_states[c * sd..(c + 1) * sd].copy_from_slice(&t.next_state);
            self.terminals[c] = term;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Transition {
        let (sd, ad) = (self.state_dim, self.action_dim);
        Transition {
            state: self.states[i * sd..(i + 1) * sd].to_vec(),
            action: self.actions[i * ad..(i + 1) * ad].to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states[i * sd..(i + 1) * sd].to_vec(),
            terminal: self.terminals[i] > 0.5,
        }
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len)).collect();
        self.gather(&idx)
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let rows = |src: &[f64], d: usize| Array2::from_shape_fn((idx.len(), d), |(r, c)| src[idx[r] * d + c]);
        Batch {
            states: rows(&self.states, sd),
            actions: rows(&self.actions, ad),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: rows(&self.next_states, sd),
            terminals: idx.iter().map(|&i| self.terminals[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    /// Per-cell demand, bit/s.
    pub action: Vec<f64>,
    /// Same action in `[0, 1]^I`.
    pub normalized: Vec<f64>,
    /// Log-density of `normalized`.
    pub log_prob: f64,
}

const LN2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)` without cancellation.
pub fn log_sech2(u: f64) -> f64 {
    2.0 * (LN2 - u - softplus(-2.0 * u))
}

/// Reparameterized policy samples for a batch with fixed noise.
struct PolicySample {
    cache: crate::neural::ForwardCache,
    /// Normalized actions.
    a: Array2<f64>,
    y: Array2<f64>,
    sigma: Array2<f64>,
    /// 1 where the raw log-std lies inside the clamp.
    ls_live: Array2<f64>,
    log_prob: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub config: SacConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub d_max: f64,
    pub policy: DenseNet,
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub v: DenseNet,
    pub v_target: DenseNet,
    pub opt_policy: AdamState,
    pub opt_q1: AdamState,
    pub opt_q2: AdamState,
    pub opt_v: AdamState,
    rng: ChaCha8Rng,
    grad_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateLosses {
    pub v: f64,
    pub q1: f64,
    pub q2: f64,
    pub policy: f64,
}

impl SacAgent {
    pub fn new(state_dim: usize, action_dim: usize, d_max: f64, config: SacConfig) -> Result<Self, SacError> {
        config.validate()?;
        let mut init = seeded(derive_seed(config.seed, 1));
        let sizes = |i: usize, o: usize| {
            let mut v = vec![i];
            v.extend(&config.hidden);
            v.push(o);
            v
        };
        let policy = DenseNet::new(&sizes(state_dim, 2 * action_dim), &mut init)?;
        let q1 = DenseNet::new(&sizes(state_dim + action_dim, 1), &mut init)?;
        let q2 = DenseNet::new(&sizes(state_dim + action_dim, 1), &mut init)?;
        let v = DenseNet::new(&sizes(state_dim, 1), &mut init)?;
        let v_target = v.clone();
        Ok(Self {
            opt_policy: AdamState::new(&policy, config.lr_policy),
            opt_q1: AdamState::new(&q1, config.lr_q),
            opt_q2: AdamState::new(&q2, config.lr_q),
            opt_v: AdamState::new(&v, config.lr_v),
            rng: seeded(derive_seed(config.seed, 2)),
            config,
            state_dim,
            action_dim,
            d_max,
            policy,
            q1,
            q2,
            v,
            v_target,
            grad_steps: 0,
        })
    }

    pub fn gradient_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn noise(&mut self, rows: usize) -> Array2<f64> {
        let rng = &mut self.rng;
        Array2::from_shape_fn((rows, self.action_dim), |_| rng.sample(StandardNormal))
    }

    fn sample_batch_policy(&self, states: ArrayView2<f64>, noise: &Array2<f64>) -> Result<PolicySample, SacError> {
        let (out, cache) = self.policy.forward_cached(states)?;
        let i = self.action_dim;
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
        let mean = out.slice(s![.., ..i]);
        let raw = out.slice(s![.., i..]);
        let ls = raw.mapv(|v| v.clamp(lo, hi));
        let ls_live = raw.mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
        let sigma = ls.mapv(f64::exp);
        let u = &mean + &(&sigma * noise);
        let y = u.mapv(f64::tanh);
        let a = y.mapv(|t| 0.5 * (t + 1.0));
        let mut log_prob = Array1::zeros(out.nrows());
        for n in 0..out.nrows() {
            let mut lp = 0.0;
            for d in 0..i {
                let e = noise[[n, d]];
                lp += -0.5 * e * e - ls[[n, d]] - HALF_LN_2PI - log_sech2(u[[n, d]]) + LN2;
            }
            log_prob[n] = lp;
        }
        Ok(PolicySample { cache, a, y, sigma, ls_live, log_prob })
    }

    /// Mean and stochastic action for one state.
    pub fn sample_action(&mut self, state: &[f64], mode: SampleMode) -> Result<SampledAction, SacError> {
        let s = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|_| NeuralError::Shape { expected: self.state_dim, got: state.len() })?;
        let noise = match mode {
            SampleMode::Stochastic => self.noise(1),
            SampleMode::Mean => Array2::zeros((1, self.action_dim)),
        };
        let p = self.sample_batch_policy(s, &noise)?;
        let normalized = p.a.row(0).to_vec();
        Ok(SampledAction {
            action: normalized.iter().map(|a| a * self.d_max).collect(),
            normalized,
            log_prob: p.log_prob[0],
        })
    }

    /// Log-density of a normalized action under the current policy.
    pub fn log_density(&self, state: &[f64], normalized: &[f64]) -> Result<f64, SacError> {
        let out = self.policy.forward_one(state)?;
        let i = self.action_dim;
        let mut lp = 0.0;
        for d in 0..i {
            let ls = out[i + d].clamp(self.config.log_std_min, self.config.log_std_max);
            let y = (2.0 * normalized[d] - 1.0).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            let u = y.atanh();
            let e = (u - out[d]) / ls.exp();
            lp += -0.5 * e * e - ls - HALF_LN_2PI - log_sech2(u) + LN2;
        }
        Ok(lp)
    }

    fn q_inputs(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[states, actions]).expect("row counts agree")
    }

    fn q_min(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>), SacError> {
        let q1 = self.q1.forward(x)?.column(0).to_owned();
        let q2 = self.q2.forward(x)?.column(0).to_owned();
        let m = match self.config.twin {
            TwinCombine::Min => q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect(),
            TwinCombine::Q1Only => q1.clone(),
        };
        Ok((m, q1, q2))
    }

    /// V-network loss `mean 0.5 (V(s) - [Qmin(s, a~) - k log pi(a~|s)])^2` and its
    /// gradient, with `a~` drawn from `noise`.
    pub fn v_objective(&self, batch: &Batch, noise: &Array2<f64>) -> Result<(f64, Gradients), SacError> {
        let p = self.sample_batch_policy(batch.states.view(), noise)?;
        let x = Self::q_inputs(batch.states.view(), p.a.view());
        let (qmin, _, _) = self.q_min(x.view())?;
        let target = &qmin - &(self.config.entropy * &p.log_prob);
        let (out, cache) = self.v.forward_cached(batch.states.view())?;
        let diff = &out.column(0) - &target;
        let n = batch.len() as f64;
        let loss = 0.5 * diff.mapv(|d| d * d).sum() / n;
        let g = (diff / n).insert_axis(Axis(1));
        let (grads, _) = self.v.backward(&cache, g.view())?;
        Ok((loss, grads))
    }

    fn q_target(&self, batch: &Batch) -> Result<Array1<f64>, SacError> {
        let vt = self.v_target.forward(batch.next_states.view())?.column(0).to_owned();
        Ok(&batch.rewards + &(self.config.discount * &(1.0 - &batch.terminals) * &vt))
    }

    /// Soft Bellman losses and gradients for both Q-networks.
    pub fn q_objectives(&self, batch: &Batch) -> Result<[(f64, Gradients); 2], SacError> {
        let target = self.q_target(batch)?;
        let x = Self::q_inputs(batch.states.view(), batch.actions.view());
        let n = batch.len() as f64;
        let one = |net: &DenseNet| -> Result<(f64, Gradients), SacError> {
            let (out, cache) = net.forward_cached(x.view())?;
            let diff = &out.column(0) - &target;
            let loss = 0.5 * diff.mapv(|d| d * d).sum() / n;
            let (g, _) = net.backward(&cache, (diff / n).insert_axis(Axis(1)).view())?;
            Ok((loss, g))
        };
        Ok([one(&self.q1)?, one(&self.q2)?])
    }

    /// Policy loss `mean[k log pi - Qmin]` under reparameterization with
    /// fixed `noise`, and its gradient.
    pub fn policy_objective(&self, batch: &Batch, noise: &Array2<f64>) -> Result<(f64, Gradients), SacError> {
        let p = self.sample_batch_policy(batch.states.view(), noise)?;
        let x = Self::q_inputs(batch.states.view(), p.a.view());
        let (o1, c1) = self.q1.forward_cached(x.view())?;
        let (o2, c2) = self.q2.forward_cached(x.view())?;
        let rows = batch.len();
        let nf = rows as f64;
        let mut m1 = Array2::zeros((rows, 1));
        let mut m2 = Array2::zeros((rows, 1));
        let mut qmin = Array1::zeros(rows);
        for r in 0..rows {
            let (a, b) = (o1[[r, 0]], o2[[r, 0]]);
            if self.config.twin == TwinCombine::Q1Only || a <= b {
                m1[[r, 0]] = 1.0;
                qmin[r] = a;
            } else {
                m2[[r, 0]] = 1.0;
                qmin[r] = b;
            }
        }
        let k = self.config.entropy;
        let loss = (k * &p.log_prob - &qmin).sum() / nf;
        let (_, gx1) = self.q1.backward(&c1, m1.view())?;
        let (_, gx2) = self.q2.backward(&c2, m2.view())?;
        let dq_da = (&gx1 + &gx2).slice(s![.., self.state_dim..]).to_owned();
        let i = self.action_dim;
        let mut g_out = Array2::zeros((rows, 2 * i));
        for r in 0..rows {
            for d in 0..i {
                let y = p.y[[r, d]];
                let sig = p.sigma[[r, d]];
                let e = noise[[r, d]];
                let dq_du = dq_da[[r, d]] * 0.5 * (1.0 - y * y);
                g_out[[r, d]] = (k * 2.0 * y - dq_du) / nf;
                g_out[[r, i + d]] = p.ls_live[[r, d]] * (k * (-1.0 + 2.0 * y * sig * e) - dq_du * sig * e) / nf;
            }
        }
        let (grads, _) = self.policy.backward(&p.cache, g_out.view())?;
        Ok((loss, grads))
    }

    pub fn update_v(&mut self, batch: &Batch) -> Result<f64, SacError> {
        let noise = self.noise(batch.len());
        let (loss, g) = self.v_objective(batch, &noise)?;
        adam_step(&mut self.v, &g, &mut self.opt_v)?;
        Ok(loss)
    }

    pub fn update_q(&mut self, batch: &Batch) -> Result<(f64, f64), SacError> {
        let [(l1, g1), (l2, g2)] = self.q_objectives(batch)?;
        adam_step(&mut self.q1, &g1, &mut self.opt_q1)?;
        adam_step(&mut self.q2, &g2, &mut self.opt_q2)?;
        Ok((l1, l2))
    }

    pub fn update_policy(&mut self, batch: &Batch) -> Result<f64, SacError> {
        let noise = self.noise(batch.len());
        let (loss, g) = self.policy_objective(batch, &noise)?;
        adam_step(&mut self.policy, &g, &mut self.opt_policy)?;
        Ok(loss)
    }

    pub fn soft_update_target(&mut self) {
        self.v_target.soft_update_from(&self.v, self.config.tau);
    }

    /// One full gradient round: V, both Q, policy, then target smoothing.
    pub fn gradient_step(&mut self, buffer: &ReplayBuffer) -> Result<UpdateLosses, SacError> {
        let batch = buffer.sample(self.config.batch_size, &mut self.rng);
        let v = self.update_v(&batch)?;
        let (q1, q2) = self.update_q(&batch)?;
        let policy = self.update_policy(&batch)?;
        self.grad_steps += 1;
        if self.grad_steps % self.config.target_update_interval as u64 == 0 {
            self.soft_update_target();
        }
        Ok(UpdateLosses { v, q1, q2, policy })
    }

    pub fn random_action(&mut self) -> Vec<f64> {
        (0..self.action_dim).map(|_| self.rng.random::<f64>()).collect()
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            config: self.config.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            d_max: self.d_max,
            log_std_range: (self.config.log_std_min, self.config.log_std_max),
            policy: self.policy.clone(),
        }
    }
}

/// Frozen policy network plus the configuration it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub config: SacConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub d_max: f64,
    pub log_std_range: (f64, f64),
    pub policy: DenseNet,
}

const CKPT_MAGIC: &[u8; 6] = b"TLSAC1";

impl PolicyCheckpoint {
    /// Deterministic (mean) normalized action.
    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>, SacError> {
        let out = self.policy.forward_one(state)?;
        Ok(out[..self.action_dim].iter().map(|m| 0.5 * (m.tanh() + 1.0) * self.d_max).collect())
    }

    /// Layout: magic, `u32` echo length, UTF-8 config echo, `u32` state and
    /// action dims, `f64` d_max, then the policy network in the neural
    /// checkpoint format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), SacError> {
        w.write_all(CKPT_MAGIC)?;
        let echo = self.config.echo();
        w.write_all(&(echo.len() as u32).to_le_bytes())?;
        w.write_all(echo.as_bytes())?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        w.write_all(&self.d_max.to_le_bytes())?;
        w.write_all(&self.log_std_range.0.to_le_bytes())?;
        w.write_all(&self.log_std_range.1.to_le_bytes())?;
        self.policy.write_to(w, None)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, String), SacError> {
        let bad = |m: &str| SacError::Neural(NeuralError::Checkpoint(m.into()));
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(bad("not a policy checkpoint"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let len = u32::from_le_bytes(b4) as usize;
        if len > 1 << 16 {
            return Err(bad("config echo too long"));
        }
        let mut echo = vec![0u8; len];
        r.read_exact(&mut echo)?;
        let echo = String::from_utf8(echo).map_err(|_| bad("config echo is not UTF-8"))?;
        r.read_exact(&mut b4)?;
        let state_dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let action_dim = u32::from_le_bytes(b4) as usize;
        let mut f = || -> io::Result<f64> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let d_max = f()?;
        let range = (f()?, f()?);
        let (policy, _) = DenseNet::read_from(r)?;
        if policy.input_dim() != state_dim || policy.output_dim() != 2 * action_dim {
            return Err(bad("policy shape disagrees with header"));
        }
        let config = parse_echo(&echo).map_err(|m| bad(&m))?;
        Ok((Self { config, state_dim, action_dim, d_max, log_std_range: range, policy }, echo))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SacError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SacError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Ok(Self::read_from(&mut f)?.0)
    }
}

fn parse_echo(echo: &str) -> Result<SacConfig, String> {
    let mut c = SacConfig::default();
    for line in echo.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad echo line `{line}`"))?;
        let num = |v: &str| v.parse::<f64>().map_err(|e| format!("{k}: {e}"));
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{k}: {e}"));
        match k {
            "entropy" => c.entropy = num(v)?,
            "discount" => c.discount = num(v)?,
            "tau" => c.tau = num(v)?,
            "batch_size" => c.batch_size = int(v)?,
            "replay_capacity" => c.replay_capacity = int(v)?,
            "target_update_interval" => c.target_update_interval = int(v)?,
            "grad_steps_per_env_step" => c.grad_steps_per_env_step = int(v)?,
            "lr_policy" => c.lr_policy = num(v)?,
            "lr_q" => c.lr_q = num(v)?,
            "lr_v" => c.lr_v = num(v)?,
            "hidden" => c.hidden = v.split(',').map(int).collect::<Result<_, _>>()?,
            "warmup_steps" => c.warmup_steps = int(v)?,
            "log_std_min" => c.log_std_min = num(v)?,
            "log_std_max" => c.log_std_max = num(v)?,
            "twin" => {
                c.twin = match v {
                    "min" => TwinCombine::Min,
                    "q1" => TwinCombine::Q1Only,
                    _ => return Err(format!("bad twin `{v}`")),
                }
            }
            "seed" => c.seed = v.parse().map_err(|e| format!("seed: {e}"))?,
            _ => return Err(format!("unknown echo key `{k}`")),
        }
    }
    Ok(c)
}

/// Deterministic evaluation policy from a checkpoint.
impl Policy for PolicyCheckpoint {
    fn act(&mut self, obs: &Observation<'_>) -> Vec<f64> {
        self.mean_action(&obs.state.values).expect("state shape fixed at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps_survived: usize,
    pub avg_reward: f64,
    pub resource_denial_rate: f64,
    pub thermal_denial_rate: f64,
    pub overheat_rate: f64,
    pub mean_throughput_mbps: f64,
}

pub fn write_learning_curve<W: Write>(log: &[EpisodeLog], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "episode,steps_survived,avg_reward,resource_denial_rate,thermal_denial_rate,overheat_rate,mean_throughput_mbps"
    )?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.episode,
            e.steps_survived,
            e.avg_reward,
            e.resource_denial_rate,
            e.thermal_denial_rate,
            e.overheat_rate,
            e.mean_throughput_mbps
        )?;
    }
    Ok(())
}

fn episode_row(episode: usize, cells: usize, horizon: usize, steps: &[RewardBreakdown]) -> EpisodeLog {
    let n = steps.len().max(1) as f64;
    EpisodeLog {
        episode,
        steps_survived: steps.len(),
        avg_reward: steps.iter().map(|b| b.total).sum::<f64>() / n,
        resource_denial_rate: steps.iter().filter(|b| b.resource_denied).count() as f64 / n,
        thermal_denial_rate: steps.iter().map(|b| b.thermal_denied.iter().filter(|&&d| d).count()).sum::<usize>()
            as f64
            / (n * cells as f64),
        overheat_rate: steps.iter().filter(|b| b.overheated.iter().any(|&o| o)).count() as f64 / n,
        mean_throughput_mbps: steps.iter().map(|b| b.executed.iter().sum::<f64>()).sum::<f64>()
            / (cells * horizon) as f64
            / 1e6,
    }
}

/// Trains per the episode/gradient-round schedule: each episode runs the
/// environment to completion, then performs `steps * grad_steps_per_env_step`
/// gradient rounds once the buffer holds a batch and warm-up is over.
pub fn train(
    env: &mut Environment,
    config: SacConfig,
    episodes: usize,
    traces: &mut dyn FnMut(usize) -> EnvironmentTrace,
) -> Result<(SacAgent, Vec<EpisodeLog>), SacError> {
    let mut agent = SacAgent::new(env.state_dim(), env.cells(), env.config().d_max, config)?;
    let log = continue_training(&mut agent, env, episodes, traces)?;
    Ok((agent, log))
}

pub fn continue_training(
    agent: &mut SacAgent,
    env: &mut Environment,
    episodes: usize,
    traces: &mut dyn FnMut(usize) -> EnvironmentTrace,
) -> Result<Vec<EpisodeLog>, SacError> {
    let cfg = agent.config.clone();
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity, agent.state_dim, agent.action_dim);
    let mut log = Vec::with_capacity(episodes);
    let mut env_steps = 0usize;
    let (cells, horizon) = (env.cells(), env.config().slots);
    for episode in 0..episodes {
        let mut state = env.reset(traces(episode))?;
        let mut steps = Vec::with_capacity(horizon);
        loop {
            let normalized = if env_steps < cfg.warmup_steps {
                agent.random_action()
            } else {
                agent.sample_action(&state.values, SampleMode::Stochastic)?.normalized
            };
            let action: Vec<f64> = normalized.iter().map(|a| a * agent.d_max).collect();
            let out = env.step(&action)?;
            buffer.push(&Transition {
                state: state.values,
                action: normalized,
                reward: out.reward,
                next_state: out.state.values.clone(),
                terminal: out.terminal,
            });
            env_steps += 1;
            state = out.state;
            steps.push(out.breakdown);
            if out.done {
                break;
            }
        }
        if env_steps >= cfg.warmup_steps && buffer.len() >= cfg.batch_size {
            for _ in 0..steps.len() * cfg.grad_steps_per_env_step {
                let l = agent.gradient_step(&buffer)?;
                if !(l.v.is_finite() && l.q1.is_finite() && l.q2.is_finite() && l.policy.is_finite()) {
                    return Err(SacError::Diverged { what: "loss", episode });
                }
            }
        }
        log.push(episode_row(episode, cells, horizon, &steps));
    }
    if !agent.policy.is_finite() {
        return Err(SacError::Diverged { what: "policy parameters", episode: episodes });
    }
    Ok(log)
}
