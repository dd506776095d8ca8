//! TD3 building block shared by every agent.
//!
//! The agent does not know how its critic input is assembled. Callers pass
//! critic inputs as rows, plus the column offset where the agent's own action
//! sits, which lets the same code serve centralized and local critics.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp, MlpCheckpoint};

/// Target-policy smoothing (off unless configured).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub std: f64,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub policy_delay: usize,
    pub hidden: Vec<usize>,
    pub target_smoothing: Option<Smoothing>,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.01,
            lr_actor: 1e-4,
            lr_critic: 3e-4,
            policy_delay: 2,
            hidden: vec![256, 256],
            target_smoothing: None,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.lr_actor >= 0.0 && self.lr_critic >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.policy_delay == 0 {
            return Err(Error::Config("policy delay must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `ŷ = r + γ (1 − done) min(q1, q2)`.
pub fn td_target(reward: f64, gamma: f64, done: bool, q1_next: f64, q2_next: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q1_next.min(q2_next)
    }
}

/// Clips every component to `[−1, 1]`; in-range values pass unchanged.
pub fn clip_action(a: &mut [f64]) {
    for v in a {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Update counters, including how often each twin critic supplied the minimum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub soft_updates: u64,
    pub min_from_q1: u64,
    pub min_from_q2: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticStats {
    pub loss1: f64,
    pub loss2: f64,
    /// `q1 − ŷ` per sample.
    pub td_errors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Td3Agent {
    pub config: Td3Config,
    obs_dim: usize,
    action_dim: usize,
    critic_input_dim: usize,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    actor_target: Mlp,
    critic1_target: Mlp,
    critic2_target: Mlp,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    counters: Counters,
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        critic_input_dim: usize,
        config: Td3Config,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if critic_input_dim < action_dim {
            return Err(Error::InvalidArgument(
                "critic input must be at least as wide as the action".into(),
            ));
        }
        let actor = Mlp::actor(obs_dim, &config.hidden, action_dim, rng)?;
        let critic1 = Mlp::critic(critic_input_dim, &config.hidden, rng)?;
        let critic2 = Mlp::critic(critic_input_dim, &config.hidden, rng)?;
        Ok(Self {
            actor_opt: Adam::new(&actor, config.lr_actor),
            critic1_opt: Adam::new(&critic1, config.lr_critic),
            critic2_opt: Adam::new(&critic2, config.lr_critic),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            config,
            obs_dim,
            action_dim,
            critic_input_dim,
            counters: Counters::default(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn critic_input_dim(&self) -> usize {
        self.critic_input_dim
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn actor_target(&self) -> &Mlp {
        &self.actor_target
    }

    pub fn critic_targets(&self) -> (&Mlp, &Mlp) {
        (&self.critic1_target, &self.critic2_target)
    }

    /// Combined hash of the three target networks.
    pub fn target_hash(&self) -> String {
        format!(
            "{}{}{}",
            self.actor_target.param_hash(),
            self.critic1_target.param_hash(),
            self.critic2_target.param_hash()
        )
    }

    /// Deterministic policy output.
    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(obs)
    }

    /// Policy output plus clipped Gaussian noise; `std = 0` is deterministic.
    pub fn act_explore<R: Rng + ?Sized>(&self, obs: &[f64], std: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.act(obs)?;
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in a.iter_mut() {
                *v += normal.sample(rng);
            }
            clip_action(&mut a);
        }
        Ok(a)
    }

    /// Target-actor actions for a batch of next observations.
    pub fn target_actions<R: Rng + ?Sized>(&self, next_obs: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let mut a = self.actor_target.forward_batch(next_obs)?;
        if let Some(s) = self.config.target_smoothing {
            let normal = Normal::new(0.0, s.std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            a.mapv_inplace(|v| (v + normal.sample(rng).clamp(-s.clip, s.clip)).clamp(-1.0, 1.0));
        }
        Ok(a)
    }

    /// Twin-minimum TD targets for a batch of next critic inputs.
    pub fn td_targets(&mut self, rewards: &[f64], dones: &[bool], next_states: ArrayView2<f64>) -> Result<Vec<f64>> {
        if rewards.len() != next_states.nrows() || dones.len() != rewards.len() {
            return Err(Error::InvalidArgument("batch lengths disagree".into()));
        }
        let q1 = self.critic1_target.forward_batch(next_states)?;
        let q2 = self.critic2_target.forward_batch(next_states)?;
        let gamma = self.config.gamma;
        let mut out = Vec::with_capacity(rewards.len());
        for i in 0..rewards.len() {
            let (a, b) = (q1[[i, 0]], q2[[i, 0]]);
            if a <= b {
                self.counters.min_from_q1 += 1;
            } else {
                self.counters.min_from_q2 += 1;
            }
            out.push(td_target(rewards[i], gamma, dones[i], a, b));
        }
        Ok(out)
    }

    /// One Adam step of both critics on the (optionally importance-weighted)
    /// mean squared TD error.
    pub fn critic_update(
        &mut self,
        states: ArrayView2<f64>,
        targets: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<CriticStats> {
        let b = states.nrows();
        if b == 0 || targets.len() != b || weights.is_some_and(|w| w.len() != b) {
            return Err(Error::InvalidArgument("critic batch is empty or inconsistent".into()));
        }
        let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
        let mut losses = [0.0; 2];
        let mut td_errors = Vec::new();
        for (k, (net, opt)) in [
            (&mut self.critic1, &mut self.critic1_opt),
            (&mut self.critic2, &mut self.critic2_opt),
        ]
        .into_iter()
        .enumerate()
        {
            let cache = net.forward_cached(states)?;
            let q = cache.output();
            let mut upstream = Array2::zeros((b, 1));
            let mut loss = 0.0;
            for i in 0..b {
                let delta = q[[i, 0]] - targets[i];
                loss += weight(i) * delta * delta;
                upstream[[i, 0]] = 2.0 * weight(i) * delta / b as f64;
                if k == 0 {
                    td_errors.push(delta);
                }
            }
            losses[k] = loss / b as f64;
            let grads = net.backward(&cache, upstream.view())?;
            opt.step(net, &grads)?;
        }
        self.counters.critic_updates += 1;
        Ok(CriticStats { loss1: losses[0], loss2: losses[1], td_errors })
    }

    /// True when the delayed actor update is due.
    pub fn actor_update_due(&self) -> bool {
        let d = self.config.policy_delay as u64;
        self.counters.critic_updates > 0
            && self.counters.critic_updates.is_multiple_of(d)
            && self.counters.actor_updates < self.counters.critic_updates / d
    }

    /// Deterministic policy gradient step maximizing `mean q1(s, π(o))`.
    /// `states` holds critic inputs whose own-action columns start at
    /// `action_offset`; they are overwritten with the current policy output.
    /// Returns `−mean q1`.
    pub fn actor_update(&mut self, obs: ArrayView2<f64>, states: ArrayView2<f64>, action_offset: usize) -> Result<f64> {
        if !self.actor_update_due() {
            return Err(Error::Protocol(format!(
                "actor update off cadence: {} critic updates, {} actor updates, delay {}",
                self.counters.critic_updates, self.counters.actor_updates, self.config.policy_delay
            )));
        }
        let b = obs.nrows();
        if states.nrows() != b || action_offset + self.action_dim > states.ncols() {
            return Err(Error::InvalidArgument("actor batch is inconsistent".into()));
        }
        let actor_cache = self.actor.forward_cached(obs)?;
        let mut s = states.to_owned();
        s.slice_mut(ndarray::s![.., action_offset..action_offset + self.action_dim])
            .assign(actor_cache.output());
        let critic_cache = self.critic1.forward_cached(s.view())?;
        let q = critic_cache.output();
        let loss = -q.sum() / b as f64;
        let upstream = Array2::from_elem((b, 1), -1.0 / b as f64);
        let critic_grads = self.critic1.backward(&critic_cache, upstream.view())?;
        let dl_da = critic_grads
            .input
            .slice(ndarray::s![.., action_offset..action_offset + self.action_dim])
            .to_owned();
        let grads = self.actor.backward(&actor_cache, dl_da.view())?;
        self.actor_opt.step(&mut self.actor, &grads)?;
        self.counters.actor_updates += 1;
        Ok(loss)
    }

    /// Actor step from an externally supplied `∂L/∂a` (rows match `obs`).
    /// Bypasses the cadence check and the critics.
    pub fn apply_policy_gradient(&mut self, obs: ArrayView2<f64>, dl_da: ArrayView2<f64>) -> Result<()> {
        let cache = self.actor.forward_cached(obs)?;
        let grads = self.actor.backward(&cache, dl_da)?;
        self.actor_opt.step(&mut self.actor, &grads)
    }

    /// `target ← τ·online + (1 − τ)·target` for all three target networks.
    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Protocol(format!("soft update factor {tau} outside (0, 1]")));
        }
        self.actor_target.soft_update_from(&self.actor, tau)?;
        self.critic1_target.soft_update_from(&self.critic1, tau)?;
        self.critic2_target.soft_update_from(&self.critic2, tau)?;
        self.counters.soft_updates += 1;
        Ok(())
    }

    /// Writes `{prefix}_{net}.json` for each of the six networks plus
    /// `{prefix}_state.json` with optimizer states and counters.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (name, net) in self.networks() {
            let file = format!("{prefix}_{name}.json");
            net.save(&dir.join(&file))?;
            files.push(file);
        }
        let state = AgentState {
            version: AgentState::VERSION,
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            critic_input_dim: self.critic_input_dim,
            optimizers: [self.actor_opt.clone(), self.critic1_opt.clone(), self.critic2_opt.clone()],
            counters: self.counters,
        };
        let file = format!("{prefix}_state.json");
        let path = dir.join(&file);
        fs::write(&path, serde_json::to_string(&state)?).map_err(|e| Error::io(&path, e))?;
        files.push(file);
        Ok(files)
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        let path = dir.join(format!("{prefix}_state.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: AgentState = serde_json::from_str(&text)?;
        if state.version != AgentState::VERSION {
            return Err(Error::Checkpoint(format!("unsupported agent state v{}", state.version)));
        }
        let net = |name: &str| Mlp::load(&dir.join(format!("{prefix}_{name}.json")));
        let [actor_opt, critic1_opt, critic2_opt] = state.optimizers;
        let agent = Self {
            config: state.config,
            obs_dim: state.obs_dim,
            action_dim: state.action_dim,
            critic_input_dim: state.critic_input_dim,
            actor: net("actor")?,
            critic1: net("critic1")?,
            critic2: net("critic2")?,
            actor_target: net("actor_target")?,
            critic1_target: net("critic1_target")?,
            critic2_target: net("critic2_target")?,
            actor_opt,
            critic1_opt,
            critic2_opt,
            counters: state.counters,
        };
        let dims_ok = agent.actor.input_dim() == agent.obs_dim
            && agent.actor.output_dim() == agent.action_dim
            && agent.critic1.input_dim() == agent.critic_input_dim
            && agent.actor_target.dims() == agent.actor.dims()
            && agent.critic1_target.dims() == agent.critic1.dims()
            && agent.critic2_target.dims() == agent.critic2.dims()
            && agent.actor_opt.len() == agent.actor.param_count();
        if !dims_ok {
            return Err(Error::Checkpoint(format!("agent '{prefix}' networks disagree with its header")));
        }
        Ok(agent)
    }

    fn networks(&self) -> [(&'static str, &Mlp); 6] {
        [
            ("actor", &self.actor),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("actor_target", &self.actor_target),
            ("critic1_target", &self.critic1_target),
            ("critic2_target", &self.critic2_target),
        ]
    }

    /// In-memory checkpoint of the six networks.
    pub fn network_checkpoints(&self) -> Vec<(&'static str, MlpCheckpoint)> {
        self.networks()
            .into_iter()
            .map(|(n, net)| (n, net.to_checkpoint()))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AgentState {
    version: u32,
    config: Td3Config,
    obs_dim: usize,
    action_dim: usize,
    critic_input_dim: usize,
    optimizers: [Adam; 3],
    counters: Counters,
}

impl AgentState {
    const VERSION: u32 = 1;
}

/// Single-agent transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ReplayMode {
    #[default]
    Uniform,
    /// Proportional prioritization with exponents `alpha` (priority) and
    /// `beta` (importance correction).
    Prioritized { alpha: f64, beta: f64 },
}

/// Indices drawn from a buffer plus importance weights (all 1 when uniform).
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// FIFO ring buffer with uniform or proportional sampling without replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    priorities: Vec<f64>,
    next: usize,
    mode: ReplayMode,
    max_priority: f64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, mode: ReplayMode) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            priorities: Vec::new(),
            next: 0,
            mode,
            max_priority: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_ready(&self, batch_size: usize) -> bool {
        batch_size > 0 && self.len() >= batch_size
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
            self.priorities.push(self.max_priority);
        } else {
            self.items[self.next] = item;
            self.priorities[self.next] = self.max_priority;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.items.get(index)
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `None` when fewer than `batch_size` items are stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Option<SampledBatch> {
        if !self.is_ready(batch_size) {
            return None;
        }
        match self.mode {
            ReplayMode::Uniform => Some(SampledBatch {
                indices: rand::seq::index::sample(rng, self.len(), batch_size).into_vec(),
                weights: vec![1.0; batch_size],
            }),
            ReplayMode::Prioritized { alpha, beta } => {
                let scaled: Vec<f64> = self.priorities.iter().map(|p| p.powf(alpha)).collect();
                let total: f64 = scaled.iter().sum();
                let indices = rand::seq::index::sample_weighted(rng, self.len(), |i| scaled[i], batch_size)
                    .ok()?
                    .into_vec();
                let n = self.len() as f64;
                let raw: Vec<f64> = indices
                    .iter()
                    .map(|&i| (n * scaled[i] / total).powf(-beta))
                    .collect();
                let max = raw.iter().cloned().fold(f64::MIN, f64::max);
                Some(SampledBatch {
                    indices,
                    weights: raw.iter().map(|w| w / max).collect(),
                })
            }
        }
    }

    /// Sets priorities to `|td_error| + 1e-6`; no-op in uniform mode.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) {
        if matches!(self.mode, ReplayMode::Uniform) {
            return;
        }
        for (&i, e) in indices.iter().zip(td_errors) {
            if let Some(p) = self.priorities.get_mut(i) {
                *p = e.abs() + 1e-6;
                self.max_priority = self.max_priority.max(*p);
            }
        }
    }
}

/// Linear decay from `initial` to `floor` over `decay_episodes`, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay_episodes: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            initial: 0.5,
            floor: 0.05,
            decay_episodes: 600,
        }
    }
}

impl NoiseSchedule {
    pub fn std(&self, episode: usize) -> f64 {
        if self.decay_episodes == 0 || episode >= self.decay_episodes {
            return self.floor.min(self.initial);
        }
        let frac = episode as f64 / self.decay_episodes as f64;
        (self.initial - (self.initial - self.floor) * frac).max(self.floor.min(self.initial))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_config() -> Td3Config {
        Td3Config {
            hidden: vec![16, 16],
            ..Td3Config::default()
        }
    }

    fn agent(seed: u64) -> Td3Agent {
        Td3Agent::new(3, 2, 5, small_config(), &mut rng(seed)).unwrap()
    }

    fn random_rows(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn td_target_examples() {
        assert_eq!(td_target(0.7, 0.0, false, 3.0, -2.0), 0.7);
        assert!((td_target(1.0, 0.99, false, 2.0, 5.0) - 2.98).abs() < 1e-12);
        assert_eq!(td_target(1.0, 0.99, true, 2.0, 5.0), 1.0);
    }

    #[test]
    fn deterministic_action_is_repeatable() {
        let a = agent(1);
        let o = [0.2, -0.4, 0.9];
        assert_eq!(a.act(&o).unwrap(), a.act(&o).unwrap());
        assert_eq!(a.act_explore(&o, 0.0, &mut rng(5)).unwrap(), a.act(&o).unwrap());
        assert!(a.act(&[1.0]).is_err());
    }

    #[test]
    fn noisy_actions_stay_in_range() {
        let a = agent(2);
        let mut r = rng(3);
        for _ in 0..10_000 {
            let v = a.act_explore(&[0.1, 0.2, 0.3], 0.5, &mut r).unwrap();
            assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn clipping_keeps_in_range_values() {
        let mut a = [0.3, -1.0, 1.0, 2.5, -7.0];
        clip_action(&mut a);
        assert_eq!(a, [0.3, -1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn single_sample_loss_is_squared_error() {
        let mut a = agent(4);
        let s = random_rows(1, 5, &mut rng(9));
        let q = a.critic1.forward_batch(s.view()).unwrap()[[0, 0]];
        let stats = a.critic_update(s.view(), &[q + 0.5], None).unwrap();
        assert_eq!(stats.loss1, 0.25);
        assert_eq!(stats.td_errors, vec![-0.5]);
    }

    #[test]
    fn exact_targets_give_zero_loss_and_leave_critics_unchanged() {
        let mut a = agent(5);
        let s = random_rows(4, 5, &mut rng(10));
        let q1: Vec<f64> = a.critic1.forward_batch(s.view()).unwrap().column(0).to_vec();
        let q2: Vec<f64> = a.critic2.forward_batch(s.view()).unwrap().column(0).to_vec();
        // Make both critics identical so one target fits both.
        a.critic2 = a.critic1.clone();
        let before = a.critic1.clone();
        let stats = a.critic_update(s.view(), &q1, None).unwrap();
        assert_eq!((stats.loss1, stats.loss2), (0.0, 0.0));
        assert_eq!(a.critic1, before);
        assert_eq!(q1.len(), q2.len());
    }

    #[test]
    fn critic_overfits_a_fixed_batch() {
        let mut r = rng(6);
        let mut cfg = small_config();
        cfg.lr_critic = 1e-3;
        let mut a = Td3Agent::new(3, 2, 5, cfg, &mut r).unwrap();
        let s = random_rows(32, 5, &mut r);
        let y: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let first = a.critic_update(s.view(), &y, None).unwrap().loss1;
        let mut last = first;
        for _ in 0..200 {
            last = a.critic_update(s.view(), &y, None).unwrap().loss1;
        }
        assert!(last < first * 0.5, "{first} -> {last}");
    }

    #[test]
    fn linear_critic_reaches_least_squares_fit() {
        let mut r = rng(7);
        let cfg = Td3Config { gamma: 0.0, hidden: vec![], lr_critic: 1e-2, ..Td3Config::default() };
        let mut a = Td3Agent::new(2, 1, 3, cfg, &mut r).unwrap();
        let s = random_rows(40, 3, &mut r);
        let rewards: Vec<f64> = (0..40)
            .map(|i| 0.5 * s[[i, 0]] - 1.2 * s[[i, 1]] + 0.3 * s[[i, 2]] + 0.1 + r.random_range(-0.2..0.2))
            .collect();
        let dones = vec![false; 40];
        for _ in 0..6000 {
            let y = a.td_targets(&rewards, &dones, s.view()).unwrap();
            a.critic_update(s.view(), &y, None).unwrap();
        }
        // Normal equations on [s, 1].
        let mut xtx = [[0.0; 4]; 4];
        let mut xty = [0.0; 4];
        for i in 0..40 {
            let row = [s[[i, 0]], s[[i, 1]], s[[i, 2]], 1.0];
            for p in 0..4 {
                xty[p] += row[p] * rewards[i];
                for q in 0..4 {
                    xtx[p][q] += row[p] * row[q];
                }
            }
        }
        let beta = solve4(xtx, xty);
        let p = a.critic1.flat_params();
        for k in 0..4 {
            assert!((p[k] - beta[k]).abs() < 1e-3, "{p:?} vs {beta:?}");
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
        for c in 0..4 {
            let piv = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            b.swap(c, piv);
            for r in 0..4 {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in 0..4 {
                        a[r][k] -= f * a[c][k];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
        [b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2], b[3] / a[3][3]]
    }

    #[test]
    fn actor_updates_follow_policy_delay() {
        let mut r = rng(8);
        let mut a = agent(8);
        let obs = random_rows(8, 3, &mut r);
        let states = random_rows(8, 5, &mut r);
        let y = vec![0.0; 8];
        for _ in 0..100 {
            a.critic_update(states.view(), &y, None).unwrap();
            if a.actor_update_due() {
                a.actor_update(obs.view(), states.view(), 3).unwrap();
            } else {
                assert!(matches!(a.actor_update(obs.view(), states.view(), 3), Err(Error::Protocol(_))));
            }
        }
        assert_eq!(a.counters().critic_updates, 100);
        assert_eq!(a.counters().actor_updates, 50);
    }

    #[test]
    fn constant_critic_gives_zero_actor_gradient() {
        let mut r = rng(11);
        let mut a = agent(11);
        // Zero all critic weights except the output bias.
        let mut p = a.critic1.flat_params();
        let n = p.len();
        p.iter_mut().take(n - 1).for_each(|v| *v = 0.0);
        a.critic1.set_flat_params(&p).unwrap();
        let obs = random_rows(4, 3, &mut r);
        let states = random_rows(4, 5, &mut r);
        let y = a.critic1.forward_batch(states.view()).unwrap().column(0).to_vec();
        a.critic2 = a.critic1.clone();
        a.critic_update(states.view(), &y, None).unwrap();
        a.critic_update(states.view(), &y, None).unwrap();
        let before = a.actor.clone();
        let critic_before = a.critic1.clone();
        a.actor_update(obs.view(), states.view(), 3).unwrap();
        assert_eq!(a.actor, before);
        assert_eq!(a.critic1, critic_before);
    }

    #[test]
    fn toy_actor_converges_to_critic_optimum() {
        let mut r = rng(12);
        let cfg = Td3Config { hidden: vec![8], lr_actor: 1e-2, ..Td3Config::default() };
        let mut a = Td3Agent::new(1, 1, 1, cfg, &mut r).unwrap();
        let obs = Array2::from_elem((1, 1), 0.3);
        for _ in 0..2000 {
            let act = a.actor.forward_batch(obs.view()).unwrap()[[0, 0]];
            // L = (a − 0.5)², the negated toy critic.
            let g = Array2::from_elem((1, 1), 2.0 * (act - 0.5));
            a.apply_policy_gradient(obs.view(), g.view()).unwrap();
        }
        let act = a.act(&[0.3]).unwrap()[0];
        assert!((act - 0.5).abs() < 0.05, "{act}");
    }

    #[test]
    fn soft_update_contract() {
        let mut a = agent(13);
        let mut r = rng(13);
        let s = random_rows(4, 5, &mut r);
        let h0 = a.target_hash();
        for _ in 0..4 {
            a.critic_update(s.view(), &[1.0; 4], None).unwrap();
        }
        assert_eq!(a.target_hash(), h0);
        assert!(matches!(a.soft_update(0.0), Err(Error::Protocol(_))));
        let old = a.critic1_target.flat_params();
        a.soft_update(0.01).unwrap();
        for ((t, o), p) in a.critic1_target.flat_params().iter().zip(a.critic1.flat_params()).zip(old) {
            assert_eq!(*t, 0.01 * o + 0.99 * p);
        }
        a.soft_update(1.0).unwrap();
        assert_eq!(a.critic1_target, a.critic1);
        assert_eq!(a.actor_target, a.actor);
    }

    #[test]
    fn twin_min_selection_is_counted() {
        let mut a = agent(14);
        let mut r = rng(14);
        let s = random_rows(50, 5, &mut r);
        let q1 = a.critic1_target.forward_batch(s.view()).unwrap();
        let q2 = a.critic2_target.forward_batch(s.view()).unwrap();
        let expected_q1 = (0..50).filter(|&i| q1[[i, 0]] <= q2[[i, 0]]).count() as u64;
        let y = a.td_targets(&[0.0; 50], &[false; 50], s.view()).unwrap();
        assert_eq!(a.counters().min_from_q1, expected_q1);
        assert_eq!(a.counters().min_from_q1 + a.counters().min_from_q2, 50);
        for i in 0..50 {
            assert_eq!(y[i], 0.99 * q1[[i, 0]].min(q2[[i, 0]]));
        }
    }

    #[test]
    fn agent_checkpoint_round_trip() {
        let mut a = agent(15);
        let s = random_rows(4, 5, &mut rng(2));
        a.critic_update(s.view(), &[0.5; 4], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = a.save(dir.path(), "uav0").unwrap();
        assert_eq!(files.len(), 7);
        let b = Td3Agent::load(dir.path(), "uav0").unwrap();
        assert_eq!(b.actor, a.actor);
        assert_eq!(b.critic2_target, a.critic2_target);
        assert_eq!(b.counters(), a.counters());
        assert!(Td3Agent::load(dir.path(), "beam").is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3, ReplayMode::Uniform).unwrap();
        for i in 0..4 {
            b.push(i);
        }
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut b = ReplayBuffer::new(10, ReplayMode::Uniform).unwrap();
        for i in 0..10 {
            b.push(i);
        }
        let mut idx = b.sample(10, &mut rng(1)).unwrap().indices;
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(b.sample(11, &mut rng(1)).is_none());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mut b = ReplayBuffer::new(100, ReplayMode::Uniform).unwrap();
        for i in 0..100 {
            b.push(i);
        }
        assert_eq!(b.sample(16, &mut rng(9)), b.sample(16, &mut rng(9)));
    }

    #[test]
    fn prioritized_sampling_prefers_large_errors() {
        let mut b = ReplayBuffer::new(10, ReplayMode::Prioritized { alpha: 1.0, beta: 0.4 }).unwrap();
        for i in 0..10 {
            b.push(i);
        }
        let errors: Vec<f64> = (0..10).map(|i| if i == 7 { 100.0 } else { 0.01 }).collect();
        b.update_priorities(&(0..10).collect::<Vec<_>>(), &errors);
        let mut r = rng(3);
        let hits = (0..200).filter(|_| b.sample(1, &mut r).unwrap().indices[0] == 7).count();
        assert!(hits > 180);
        let batch = b.sample(5, &mut r).unwrap();
        assert!(batch.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn noise_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.std(0), 0.5);
        assert!((s.std(300) - 0.275).abs() < 1e-12);
        assert_eq!(s.std(600), 0.05);
        assert_eq!(s.std(5000), 0.05);
    }

    proptest! {
        #[test]
        fn noise_is_monotone_and_floored(a in 0usize..2000, b in 0usize..2000, horizon in 0usize..1000) {
            let s = NoiseSchedule { decay_episodes: horizon, ..NoiseSchedule::default() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.std(hi) <= s.std(lo));
            prop_assert!(s.std(hi) >= s.floor);
        }

        #[test]
        fn buffer_never_exceeds_capacity(cap in 1usize..50, pushes in 0usize..200) {
            let mut b = ReplayBuffer::new(cap, ReplayMode::Uniform).unwrap();
            for i in 0..pushes {
                b.push(i);
            }
            prop_assert_eq!(b.len(), pushes.min(cap));
            let kept: Vec<usize> = b.iter().copied().collect();
            let expected: Vec<usize> = (pushes.saturating_sub(cap)..pushes).collect();
            prop_assert_eq!(kept, expected);
        }
    }
}
