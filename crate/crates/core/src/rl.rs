//! Coupling-control environment and the soft actor-critic agent that learns
//! charging schedules.
//!
//! The episode grid has `K` points `t_k = k·τ/(K-1)`; the agent picks the
//! coupling on each of the `K-1` intervals, so an episode is `K-1`
//! environment steps. Rewards are stored as separate energy and power
//! increments and combined with the Fermi weight of the global step at
//! update time.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::approx::{gaussian_head, AdamState, Mlp, SquashedSample};
use crate::dynamics::{ChargingSystem, DissipatorSpec, EvolutionSpec, Evolver};
use crate::error::{Error, Result};
use crate::hilbert::ModelConfig;
use crate::math;
use crate::metrics::average_power;
use crate::CMatrix;

/// Closed or dissipative charging.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum ChargeMode {
    Closed,
    Open(DissipatorSpec),
}

impl ChargeMode {
    pub fn dissipator(&self) -> DissipatorSpec {
        match self {
            ChargeMode::Closed => DissipatorSpec::closed(),
            ChargeMode::Open(d) => *d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum ObservationMode {
    /// `(E/(2jN), P·τ/(2jN), t/τ)`.
    ScalarMetrics,
    /// The composite density matrix: diagonal, then real and imaginary
    /// parts of the strict upper triangle, `dim²` reals in total.
    FullState,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct EpisodeSpec {
    /// Charging time `τ`.
    pub horizon: f64,
    /// Grid points `K`; an episode has `K - 1` steps.
    pub n_steps: usize,
    pub mode: ChargeMode,
    pub observation_mode: ObservationMode,
    /// Integrator step; the mode's default when absent.
    pub dt: Option<f64>,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec::closed()
    }
}

impl EpisodeSpec {
    pub fn closed() -> Self {
        EpisodeSpec {
            horizon: 20.0,
            n_steps: 100,
            mode: ChargeMode::Closed,
            observation_mode: ObservationMode::ScalarMetrics,
            dt: None,
        }
    }

    pub fn open(dis: DissipatorSpec) -> Self {
        EpisodeSpec { horizon: 120.0, mode: ChargeMode::Open(dis), ..EpisodeSpec::closed() }
    }

    /// `τ/(K-1)`.
    pub fn interval(&self) -> f64 {
        self.horizon / (self.n_steps - 1) as f64
    }

    /// Environment steps per episode.
    pub fn steps_per_episode(&self) -> usize {
        self.n_steps - 1
    }

    pub fn evolution(&self) -> EvolutionSpec {
        let dis = self.mode.dissipator();
        let mut spec = EvolutionSpec::default_for(&dis);
        if let Some(dt) = self.dt {
            spec.dt = dt;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::InvalidConfig("an episode needs K >= 2 grid points".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        self.mode.dissipator().validate()?;
        let spec = self.evolution();
        spec.validate()?;
        if spec.dt > self.interval() {
            return Err(Error::StepExceedsSegment { dt: spec.dt, duration: self.interval() });
        }
        Ok(())
    }

    pub fn observation_dim(&self, total_dim: usize) -> usize {
        match self.observation_mode {
            ObservationMode::ScalarMetrics => 3,
            ObservationMode::FullState => total_dim * total_dim,
        }
    }
}

/// `g = (u + 1)/2`.
pub fn action_to_coupling(u: f64) -> f64 {
    0.5 * (u + 1.0)
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub delta_energy: f64,
    pub delta_power: f64,
    pub done: bool,
    pub coupling: f64,
    /// `E(t_{k+1})`, `P(t_{k+1})` and `t_{k+1}`.
    pub energy: f64,
    pub power: f64,
    pub time: f64,
}

/// The battery under agent control.
pub struct ChargingEnv {
    system: ChargingSystem,
    spec: EpisodeSpec,
    evolution: EvolutionSpec,
    evolver: Evolver,
    k: usize,
    energy: f64,
    power: f64,
    done: bool,
}

impl ChargingEnv {
    pub fn new(cfg: &ModelConfig, spec: &EpisodeSpec) -> Result<Self> {
        ChargingEnv::with_system(ChargingSystem::new(cfg)?, spec)
    }

    pub fn with_system(system: ChargingSystem, spec: &EpisodeSpec) -> Result<Self> {
        spec.validate()?;
        let evolution = spec.evolution();
        let evolver = Evolver::new(&system, &spec.mode.dissipator(), &evolution)?;
        Ok(ChargingEnv { system, spec: spec.clone(), evolution, evolver, k: 0, energy: 0.0, power: 0.0, done: false })
    }

    pub fn system(&self) -> &ChargingSystem {
        &self.system
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn observation_dim(&self) -> usize {
        self.spec.observation_dim(self.system.total_dim())
    }

    /// Back to `|G>⊗|N>` at `t = 0`.
    pub fn reset(&mut self) -> Result<Vec<f64>> {
        self.evolver = Evolver::new(&self.system, &self.spec.mode.dissipator(), &self.evolution)?;
        self.k = 0;
        self.energy = 0.0;
        self.power = 0.0;
        self.done = false;
        Ok(self.observation())
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.spec.interval()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> Vec<f64> {
        match self.spec.observation_mode {
            ObservationMode::ScalarMetrics => {
                let scale = self.system.config().free_spin_bound() / self.system.config().omega_a;
                vec![self.energy / scale, self.power * self.spec.horizon / scale, self.time() / self.spec.horizon]
            }
            ObservationMode::FullState => density_features(&self.evolver.density()),
        }
    }

    /// Hold `g = (u+1)/2` over the next interval.
    pub fn step(&mut self, u: f64) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if !u.is_finite() || !(-1.0..=1.0).contains(&u) {
            return Err(Error::InvalidArgument(alloc::format!("action {u} outside [-1, 1]")));
        }
        let g = action_to_coupling(u);
        self.evolver.advance(&self.system, g, self.spec.interval())?;
        self.k += 1;
        let t = self.time();
        let energy = self.evolver.energy(&self.system);
        if !energy.is_finite() {
            return Err(Error::NonFinite(alloc::format!("stored energy at t = {t}")));
        }
        let power = average_power(energy, t);
        let (delta_energy, delta_power) = (energy - self.energy, power - self.power);
        self.energy = energy;
        self.power = power;
        self.done = self.k + 1 == self.spec.n_steps;
        Ok(StepOutcome {
            observation: self.observation(),
            delta_energy,
            delta_power,
            done: self.done,
            coupling: g,
            energy,
            power,
            time: t,
        })
    }
}

fn density_features(rho: &CMatrix) -> Vec<f64> {
    let n = rho.nrows();
    let mut out = Vec::with_capacity(n * n);
    out.extend((0..n).map(|i| rho[(i, i)].re));
    for i in 0..n {
        for j in i + 1..n {
            out.push(rho[(i, j)].re);
            out.push(rho[(i, j)].im);
        }
    }
    out
}

/// One stored experience; the reward is kept as its two components.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: f64,
    pub delta_energy: f64,
    pub delta_power: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring of transitions with flat storage.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    len: usize,
    head: usize,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    actions: Vec<f64>,
    delta_energy: Vec<f64>,
    delta_power: Vec<f64>,
    done: Vec<bool>,
}

/// Columns of a sampled minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub delta_energy: Vec<f64>,
    pub delta_power: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Result<Self> {
        if capacity == 0 || obs_dim == 0 {
            return Err(Error::InvalidConfig("replay buffer needs positive capacity and observation size".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            len: 0,
            head: 0,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            delta_energy: Vec::new(),
            delta_power: Vec::new(),
            done: Vec::new(),
        })
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

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        let d = self.obs_dim;
        if t.observation.len() != d || t.next_observation.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: t.observation.len() });
        }
        if !t.delta_energy.is_finite() || !t.delta_power.is_finite() {
            return Err(Error::NonFinite("transition reward".into()));
        }
        if self.len < self.capacity {
            self.obs.extend_from_slice(&t.observation);
            self.next_obs.extend_from_slice(&t.next_observation);
            self.actions.push(t.action);
            self.delta_energy.push(t.delta_energy);
            self.delta_power.push(t.delta_power);
            self.done.push(t.done);
            self.len += 1;
        } else {
            let h = self.head;
            self.obs[h * d..(h + 1) * d].copy_from_slice(&t.observation);
            self.next_obs[h * d..(h + 1) * d].copy_from_slice(&t.next_observation);
            self.actions[h] = t.action;
            self.delta_energy[h] = t.delta_energy;
            self.delta_power[h] = t.delta_power;
            self.done[h] = t.done;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<Transition> {
        let d = self.obs_dim;
        (i < self.len).then(|| Transition {
            observation: self.obs[i * d..(i + 1) * d].to_vec(),
            action: self.actions[i],
            delta_energy: self.delta_energy[i],
            delta_power: self.delta_power[i],
            next_observation: self.next_obs[i * d..(i + 1) * d].to_vec(),
            done: self.done[i],
        })
    }

    /// Storage slots drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.len < n || self.len == 0 {
            return Err(Error::BufferUnderfull { have: self.len, need: n.max(1) });
        }
        Ok((0..n).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let d = self.obs_dim;
        let mut b = Batch {
            size: idx.len(),
            obs_dim: d,
            obs: Vec::with_capacity(idx.len() * d),
            actions: Vec::with_capacity(idx.len()),
            delta_energy: Vec::with_capacity(idx.len()),
            delta_power: Vec::with_capacity(idx.len()),
            next_obs: Vec::with_capacity(idx.len() * d),
            done: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            b.obs.extend_from_slice(&self.obs[i * d..(i + 1) * d]);
            b.next_obs.extend_from_slice(&self.next_obs[i * d..(i + 1) * d]);
            b.actions.push(self.actions[i]);
            b.delta_energy.push(self.delta_energy[i]);
            b.delta_power.push(self.delta_power[i]);
            b.done.push(self.done[i]);
        }
        b
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        Ok(self.gather(&idx))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct SacHyperparams {
    pub lr_networks: f64,
    pub lr_alpha: f64,
    pub discount: f64,
    /// Target smoothing `β`; targets move by `1 - β` toward the online nets.
    pub polyak: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_random_steps: u64,
    pub updates_begin_after: u64,
    pub total_steps: u64,
    pub entropy_target_initial: f64,
    pub entropy_target_final: f64,
    pub entropy_transition_steps: u64,
    pub fermi_center: f64,
    pub fermi_width: f64,
    /// Hidden layer widths of the policy and both critics.
    pub hidden: Vec<usize>,
    pub initial_log_alpha: f64,
    /// Greedy evaluation every this many episodes; 0 disables it.
    pub eval_interval_episodes: u64,
}

impl Default for SacHyperparams {
    fn default() -> Self {
        SacHyperparams {
            lr_networks: 0.001,
            lr_alpha: 0.003,
            discount: 0.993,
            polyak: 0.995,
            batch_size: 256,
            buffer_capacity: 180_000,
            warmup_random_steps: 5000,
            updates_begin_after: 1000,
            total_steps: 900_000,
            entropy_target_initial: 0.7,
            entropy_target_final: -2.8,
            entropy_transition_steps: 200_000,
            fermi_center: 50_000.0,
            fermi_width: 20_000.0,
            hidden: vec![512, 256],
            initial_log_alpha: 0.0,
            eval_interval_episodes: 10,
        }
    }
}

impl SacHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr_networks > 0.0) || !(self.lr_alpha > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.polyak) {
            return bad("discount and polyak must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("the buffer must hold at least one batch");
        }
        if !(self.fermi_width > 0.0) {
            return bad("fermi_width must be positive");
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }
}

/// `1/(1 + exp((n - c_m)/c_w))`.
pub fn fermi_weight(n: u64, hp: &SacHyperparams) -> f64 {
    let x = (n as f64 - hp.fermi_center) / hp.fermi_width;
    1.0 / (1.0 + math::exp(x))
}

/// Linear from the initial to the final entropy target, then constant.
pub fn entropy_target(n: u64, hp: &SacHyperparams) -> f64 {
    if hp.entropy_transition_steps == 0 || n >= hp.entropy_transition_steps {
        return hp.entropy_target_final;
    }
    let f = n as f64 / hp.entropy_transition_steps as f64;
    hp.entropy_target_initial + f * (hp.entropy_target_final - hp.entropy_target_initial)
}

/// Serializable position of the agent's ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Losses of one gradient update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub mean_log_prob: f64,
}

/// Networks, optimizers, temperature, counters and the random stream.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    pub policy_opt: AdamState,
    pub q1_opt: AdamState,
    pub q2_opt: AdamState,
    pub alpha_opt: AdamState,
    /// Environment steps taken so far.
    pub step: u64,
    /// Gradient updates performed so far.
    pub updates: u64,
    rng: ChaCha8Rng,
}

fn critic_input(obs: &[f64], actions: &[f64], obs_dim: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(actions.len() * (obs_dim + 1));
    for (row, &a) in obs.chunks_exact(obs_dim).zip(actions) {
        x.extend_from_slice(row);
        x.push(a);
    }
    x
}

fn check_finite(what: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(alloc::format!("{what} = {v}")))
    }
}

impl AgentState {
    /// Fresh agent; all initial weights and later randomness come from one
    /// ChaCha8 stream seeded with `seed`.
    pub fn new(obs_dim: usize, hp: &SacHyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![obs_dim];
        widths.extend_from_slice(&hp.hidden);
        widths.push(2);
        let policy = Mlp::new(&widths, &mut rng)?;
        widths[0] = obs_dim + 1;
        *widths.last_mut().expect("nonempty") = 1;
        let q1 = Mlp::new(&widths, &mut rng)?;
        let q2 = Mlp::new(&widths, &mut rng)?;
        Ok(AgentState {
            policy_opt: AdamState::new(policy.params().len(), hp.lr_networks),
            q1_opt: AdamState::new(q1.params().len(), hp.lr_networks),
            q2_opt: AdamState::new(q2.params().len(), hp.lr_networks),
            alpha_opt: AdamState::new(1, hp.lr_alpha),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_alpha: hp.initial_log_alpha,
            step: 0,
            updates: 0,
            rng,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn alpha(&self) -> f64 {
        math::exp(self.log_alpha)
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    pub fn set_rng_state(&mut self, s: RngState) {
        let mut rng = ChaCha8Rng::from_seed(s.seed);
        rng.set_stream(s.stream);
        rng.set_word_pos(s.word_pos);
        self.rng = rng;
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Policy head outputs `(mean, log_std)` for each row of `obs`.
    fn heads(&self, obs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.policy.predict(obs, n)
    }

    /// Deterministic action `tanh(mean)`.
    pub fn greedy_action(&self, obs: &[f64]) -> Result<f64> {
        let out = self.heads(obs, 1)?;
        check_finite("policy mean", out[0])?;
        Ok(math::tanh(out[0]))
    }

    /// Reparameterized draw from the current policy.
    pub fn sample_action(&mut self, obs: &[f64]) -> Result<SquashedSample> {
        let out = self.heads(obs, 1)?;
        let eps: f64 = StandardNormal.sample(&mut self.rng);
        gaussian_head(out[0], out[1], eps)
    }

    /// `y = r + γ(1-done)[min_i Q_tar,i(s', a') - α log π(a'|s')]` with
    /// `r = w_E ΔE + (1-w_E) ΔP` and `a'` drawn from the current policy.
    pub fn critic_targets(&mut self, batch: &Batch, w_energy: f64, hp: &SacHyperparams) -> Result<Vec<f64>> {
        let n = batch.size;
        let heads = self.heads(&batch.next_obs, n)?;
        let mut next_actions = Vec::with_capacity(n);
        let mut next_logp = Vec::with_capacity(n);
        for k in 0..n {
            let eps: f64 = StandardNormal.sample(&mut self.rng);
            let s = gaussian_head(heads[2 * k], heads[2 * k + 1], eps)?;
            next_actions.push(s.action);
            next_logp.push(s.log_prob);
        }
        let x = critic_input(&batch.next_obs, &next_actions, batch.obs_dim);
        let t1 = self.q1_target.predict(&x, n)?;
        let t2 = self.q2_target.predict(&x, n)?;
        let alpha = self.alpha();
        let mut y = Vec::with_capacity(n);
        for k in 0..n {
            let r = w_energy * batch.delta_energy[k] + (1.0 - w_energy) * batch.delta_power[k];
            let boot = if batch.done[k] { 0.0 } else { hp.discount * (t1[k].min(t2[k]) - alpha * next_logp[k]) };
            y.push(r + boot);
        }
        Ok(y)
    }

    /// Squared-error regression of both critics onto the targets; one Adam
    /// step each. Returns the mean of the two losses.
    pub fn critic_update(&mut self, batch: &Batch, w_energy: f64, hp: &SacHyperparams) -> Result<f64> {
        let n = batch.size;
        let y = self.critic_targets(batch, w_energy, hp)?;
        let x = critic_input(&batch.obs, &batch.actions, batch.obs_dim);
        let mut total = 0.0;
        for (net, opt) in [(&mut self.q1, &mut self.q1_opt), (&mut self.q2, &mut self.q2_opt)] {
            let (q, cache) = net.forward(&x, n)?;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(n);
            for k in 0..n {
                let d = q[k] - y[k];
                loss += d * d;
                grad.push(2.0 * d / n as f64);
            }
            loss /= n as f64;
            check_finite("critic loss", loss)?;
            let g = net.backward(&cache, &grad)?;
            opt.step(net.params_mut(), &g.params)?;
            total += loss;
        }
        Ok(0.5 * total)
    }

    /// Loss `mean[α log π(a|s) - min_i Q_i(s, a)]` and its gradient with
    /// respect to the policy parameters, for reparameterization noise
    /// `noise`. Also returns the mean log-probability.
    pub fn policy_loss_and_grad(&self, batch: &Batch, noise: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
        let n = batch.size;
        if noise.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: noise.len() });
        }
        let (heads, cache) = self.policy.forward(&batch.obs, n)?;
        let samples = (0..n)
            .map(|k| gaussian_head(heads[2 * k], heads[2 * k + 1], noise[k]))
            .collect::<Result<Vec<_>>>()?;
        let actions: Vec<f64> = samples.iter().map(|s| s.action).collect();
        let x = critic_input(&batch.obs, &actions, batch.obs_dim);
        let (q1, c1) = self.q1.forward(&x, n)?;
        let (q2, c2) = self.q2.forward(&x, n)?;
        let alpha = self.alpha();
        let inv_n = 1.0 / n as f64;
        // Route dL/dQ to whichever critic is the minimum for each sample.
        let mut g1 = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        let mut loss = 0.0;
        let mut mean_logp = 0.0;
        for k in 0..n {
            let qmin = if q1[k] <= q2[k] {
                g1[k] = -inv_n;
                q1[k]
            } else {
                g2[k] = -inv_n;
                q2[k]
            };
            // α = 0 must drop the entropy term even for extreme log-probabilities.
            if alpha != 0.0 {
                loss += alpha * samples[k].log_prob;
            }
            loss -= qmin;
            mean_logp += samples[k].log_prob;
        }
        loss *= inv_n;
        mean_logp *= inv_n;
        check_finite("actor loss", loss)?;
        let d1 = self.q1.backward_input(&c1, &g1)?;
        let d2 = self.q2.backward_input(&c2, &g2)?;
        let w = batch.obs_dim + 1;
        let mut grad_heads = Vec::with_capacity(2 * n);
        for k in 0..n {
            let d_action = d1[k * w + w - 1] + d2[k * w + w - 1];
            let (dm, ds) = samples[k].backprop(d_action, alpha * inv_n);
            grad_heads.push(dm);
            grad_heads.push(ds);
        }
        let gp = self.policy.backward(&cache, &grad_heads)?;
        Ok((loss, gp.params, mean_logp))
    }

    /// One Adam step on the policy loss, then one on `log α` for
    /// `mean[-α (log π + H̄)]`.
    pub fn actor_alpha_update(&mut self, batch: &Batch, target_entropy: f64) -> Result<UpdateStats> {
        let noise: Vec<f64> = (0..batch.size).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let (loss, grad, mean_logp) = self.policy_loss_and_grad(batch, &noise)?;
        self.policy_opt.step(self.policy.params_mut(), &grad)?;
        let alpha = self.alpha();
        let alpha_loss = -alpha * (mean_logp + target_entropy);
        check_finite("temperature loss", alpha_loss)?;
        let mut la = [self.log_alpha];
        self.alpha_opt.step(&mut la, &[alpha_loss])?;
        self.log_alpha = la[0];
        Ok(UpdateStats { critic_loss: f64::NAN, actor_loss: loss, alpha_loss, alpha: self.alpha(), mean_log_prob: mean_logp })
    }

    /// `φ_tar ← β φ_tar + (1-β) φ` for both critics.
    pub fn polyak_update(&mut self, hp: &SacHyperparams) -> Result<()> {
        let tau = 1.0 - hp.polyak;
        self.q1_target.soft_update_from(&self.q1, tau)?;
        self.q2_target.soft_update_from(&self.q2, tau)
    }

    /// Critic, actor/temperature and target updates on one sampled batch.
    pub fn update(&mut self, buffer: &ReplayBuffer, hp: &SacHyperparams) -> Result<UpdateStats> {
        let batch = buffer.sample(hp.batch_size, &mut self.rng)?;
        let w = fermi_weight(self.step, hp);
        let critic_loss = self.critic_update(&batch, w, hp)?;
        let mut stats = self.actor_alpha_update(&batch, entropy_target(self.step, hp))?;
        self.polyak_update(hp)?;
        self.updates += 1;
        stats.critic_loss = critic_loss;
        Ok(stats)
    }
}

/// Greedy rollout of a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `t_0 … t_{K-1}`.
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub power: Vec<f64>,
    /// Coupling applied on each interval, `K - 1` values.
    pub couplings: Vec<f64>,
    pub final_energy: f64,
    pub final_power: f64,
}

/// Run one episode with `tanh(mean)` actions.
pub fn evaluate_greedy(env: &mut ChargingEnv, agent: &AgentState) -> Result<Evaluation> {
    evaluate_with(env, |obs| agent.greedy_action(obs))
}

/// Run one episode with actions from `policy`.
pub fn evaluate_with<F: FnMut(&[f64]) -> Result<f64>>(env: &mut ChargingEnv, mut policy: F) -> Result<Evaluation> {
    let mut obs = env.reset()?;
    let mut ev = Evaluation {
        times: vec![0.0],
        energy: vec![0.0],
        power: vec![0.0],
        couplings: Vec::new(),
        final_energy: 0.0,
        final_power: 0.0,
    };
    loop {
        let u = policy(&obs)?;
        let out = env.step(u)?;
        ev.times.push(out.time);
        ev.energy.push(out.energy);
        ev.power.push(out.power);
        ev.couplings.push(out.coupling);
        obs = out.observation;
        if out.done {
            ev.final_energy = out.energy;
            ev.final_power = out.power;
            return Ok(ev);
        }
    }
}

/// Summary of one finished training episode.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EpisodeLog {
    /// Global step at the end of the episode.
    pub step: u64,
    pub episode: u64,
    /// Sum of Fermi-weighted rewards, each with the weight of its step.
    pub episode_return: f64,
    pub final_energy: f64,
    pub final_power: f64,
    pub alpha: f64,
    /// Means over the episode's updates; NaN when there were none.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub w_energy: f64,
    pub entropy_target: f64,
}

/// Progress notifications from [`Trainer::run`].
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Episode(&'a EpisodeLog),
    Evaluation { episode: u64, step: u64, evaluation: &'a Evaluation, best: bool },
}

/// Collection loop state: environment, buffer, agent and counters.
pub struct Trainer {
    pub agent: AgentState,
    pub hp: SacHyperparams,
    env: ChargingEnv,
    eval_env: ChargingEnv,
    buffer: ReplayBuffer,
    obs: Vec<f64>,
    episode: u64,
    episode_return: f64,
    critic_sum: f64,
    actor_sum: f64,
    n_updates: u64,
    best: Option<(u64, Evaluation)>,
    best_params: Option<Mlp>,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig, spec: &EpisodeSpec, hp: &SacHyperparams, seed: u64) -> Result<Self> {
        let system = ChargingSystem::new(cfg)?;
        let obs_dim = spec.observation_dim(system.total_dim());
        let agent = AgentState::new(obs_dim, hp, seed)?;
        Trainer::resume(system, spec, hp, agent)
    }

    /// Continue with an existing agent and an empty buffer; the global step
    /// counter carries on from `agent.step`.
    pub fn resume(system: ChargingSystem, spec: &EpisodeSpec, hp: &SacHyperparams, agent: AgentState) -> Result<Self> {
        hp.validate()?;
        let mut env = ChargingEnv::with_system(system.clone(), spec)?;
        if agent.obs_dim() != env.observation_dim() {
            return Err(Error::DimensionMismatch { expected: env.observation_dim(), found: agent.obs_dim() });
        }
        let eval_env = ChargingEnv::with_system(system, spec)?;
        let obs = env.reset()?;
        let buffer = ReplayBuffer::new(hp.buffer_capacity, env.observation_dim())?;
        Ok(Trainer {
            agent,
            hp: hp.clone(),
            env,
            eval_env,
            buffer,
            obs,
            episode: 0,
            episode_return: 0.0,
            critic_sum: 0.0,
            actor_sum: 0.0,
            n_updates: 0,
            best: None,
            best_params: None,
        })
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn episodes(&self) -> u64 {
        self.episode
    }

    /// Best greedy evaluation so far and the episode it followed.
    pub fn best_evaluation(&self) -> Option<&(u64, Evaluation)> {
        self.best.as_ref()
    }

    /// Policy parameters that produced the best greedy evaluation.
    pub fn best_policy(&self) -> Option<&Mlp> {
        self.best_params.as_ref()
    }

    /// Continue episode numbering after `n` finished episodes.
    pub fn set_episodes(&mut self, n: u64) {
        self.episode = n;
    }

    /// Reinstate a best-so-far snapshot; its evaluation is recomputed.
    pub fn restore_best(&mut self, episode: u64, policy: Mlp) -> Result<()> {
        if policy.widths() != self.agent.policy.widths() {
            return Err(Error::DimensionMismatch { expected: self.agent.policy.params().len(), found: policy.params().len() });
        }
        let mut probe = self.agent.clone();
        probe.policy = policy.clone();
        let ev = evaluate_greedy(&mut self.eval_env, &probe)?;
        self.best = Some((episode, ev));
        self.best_params = Some(policy);
        Ok(())
    }

    pub fn evaluate(&mut self) -> Result<Evaluation> {
        evaluate_greedy(&mut self.eval_env, &self.agent)
    }

    /// One environment step, plus an update when due.
    pub fn step<F: FnMut(TrainEvent<'_>) -> Result<()>>(&mut self, observer: &mut F) -> Result<()> {
        let u = if self.agent.step < self.hp.warmup_random_steps {
            self.agent.rng.random_range(-1.0..1.0)
        } else {
            self.agent.sample_action(&self.obs)?.action
        };
        let out = self.env.step(u)?;
        let w = fermi_weight(self.agent.step, &self.hp);
        self.episode_return += w * out.delta_energy + (1.0 - w) * out.delta_power;
        self.buffer.push(&Transition {
            observation: core::mem::take(&mut self.obs),
            action: u,
            delta_energy: out.delta_energy,
            delta_power: out.delta_power,
            next_observation: out.observation.clone(),
            done: out.done,
        })?;
        self.obs = out.observation;
        self.agent.step += 1;
        if self.agent.step >= self.hp.updates_begin_after && self.buffer.len() >= self.hp.batch_size {
            let stats = self.agent.update(&self.buffer, &self.hp)?;
            self.critic_sum += stats.critic_loss;
            self.actor_sum += stats.actor_loss;
            self.n_updates += 1;
        }
        if out.done {
            self.episode += 1;
            let n = self.n_updates as f64;
            let log = EpisodeLog {
                step: self.agent.step,
                episode: self.episode,
                episode_return: self.episode_return,
                final_energy: out.energy,
                final_power: out.power,
                alpha: self.agent.alpha(),
                critic_loss: if self.n_updates > 0 { self.critic_sum / n } else { f64::NAN },
                actor_loss: if self.n_updates > 0 { self.actor_sum / n } else { f64::NAN },
                w_energy: fermi_weight(self.agent.step, &self.hp),
                entropy_target: entropy_target(self.agent.step, &self.hp),
            };
            observer(TrainEvent::Episode(&log))?;
            self.episode_return = 0.0;
            self.critic_sum = 0.0;
            self.actor_sum = 0.0;
            self.n_updates = 0;
            self.obs = self.env.reset()?;
            if self.hp.eval_interval_episodes > 0 && self.episode % self.hp.eval_interval_episodes == 0 {
                let ev = self.evaluate()?;
                let better = self.best.as_ref().map_or(true, |(_, b)| ev.final_energy > b.final_energy);
                observer(TrainEvent::Evaluation { episode: self.episode, step: self.agent.step, evaluation: &ev, best: better })?;
                if better {
                    self.best = Some((self.episode, ev));
                    self.best_params = Some(self.agent.policy.clone());
                }
            }
        }
        Ok(())
    }

    /// Step until the global counter reaches `hp.total_steps`.
    pub fn run<F: FnMut(TrainEvent<'_>) -> Result<()>>(&mut self, mut observer: F) -> Result<()> {
        while self.agent.step < self.hp.total_steps {
            self.step(&mut observer)?;
        }
        Ok(())
    }
}

/// Train from scratch and return the trainer with its logs delivered to
/// `observer`.
pub fn train<F: FnMut(TrainEvent<'_>) -> Result<()>>(
    cfg: &ModelConfig,
    spec: &EpisodeSpec,
    hp: &SacHyperparams,
    seed: u64,
    observer: F,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg, spec, hp, seed)?;
    trainer.run(observer)?;
    Ok(trainer)
}
