//! Two-timescale training.
//!
//! Every `T_r` slots the surface agent observes the UAV layout, picks a pose
//! update and collects a delayed reward once its window closes. In every slot
//! the fast layer (one agent per UAV plus the beamforming agent) acts on local
//! observations; its critics see the joint observation-action vector
//! `[o_1, a_1, …, o_M, a_M, o_beam, a_beam]`, except under the independent-TD3
//! scheme where each critic sees only `(o_i, a_i)`.
//!
//! Randomness is derived per `(seed, episode, stream)`, so a run resumed from
//! a checkpoint sees the same exploration noise and start states as the
//! original; only the replay contents differ.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    sixdma_reward, Environment, Observations, ScenarioConfig, Scheme, SixDmaAction, UavAction,
    WindowStats, SIXDMA_ACTION_DIM, UAV_ACTION_DIM, UAV_OBS_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{SurfacePose, Vec3};
use crate::rl::{NoiseSchedule, ReplayBuffer, ReplayMode, Td3Agent, Td3Config, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch_size: usize,
    pub td3: Td3Config,
    pub noise: NoiseSchedule,
    pub replay_capacity: usize,
    pub replay: ReplayMode,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            batch_size: 256,
            td3: Td3Config::default(),
            noise: NoiseSchedule::default(),
            replay_capacity: 100_000,
            replay: ReplayMode::Uniform,
            scheme: Scheme::Proposed,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the reduced scenario: 150 episodes, batch 64, 64x64
    /// hidden layers, exploration decaying over the first 60% of episodes.
    pub fn desk_scale() -> Self {
        Self {
            episodes: 150,
            batch_size: 64,
            td3: Td3Config {
                hidden: vec![64, 64],
                ..Td3Config::default()
            },
            noise: NoiseSchedule {
                decay_episodes: 90,
                ..NoiseSchedule::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.td3.validate()?;
        if self.episodes == 0 || self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(Error::Config(
                "episodes and batch size must be positive and the replay must hold a batch".into(),
            ));
        }
        if !(self.noise.initial >= 0.0 && self.noise.floor >= 0.0) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Column layout of the joint fast-layer vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointLayout {
    pub num_uavs: usize,
    pub uav_obs: usize,
    pub uav_action: usize,
    pub beam_obs: usize,
    pub beam_action: usize,
}

impl JointLayout {
    pub fn new(scenario: &ScenarioConfig) -> Self {
        Self {
            num_uavs: scenario.num_uavs,
            uav_obs: UAV_OBS_DIM,
            uav_action: UAV_ACTION_DIM,
            beam_obs: scenario.beam_obs_dim(),
            beam_action: scenario.beam_action_dim(),
        }
    }

    /// Fast-layer agents: UAVs first, then the beamforming agent.
    pub fn agents(&self) -> usize {
        self.num_uavs + 1
    }

    pub fn obs_dim(&self, agent: usize) -> usize {
        if agent < self.num_uavs {
            self.uav_obs
        } else {
            self.beam_obs
        }
    }

    pub fn action_dim(&self, agent: usize) -> usize {
        if agent < self.num_uavs {
            self.uav_action
        } else {
            self.beam_action
        }
    }

    /// `M (o_m + a_m) + o_beam + a_beam`.
    pub fn state_dim(&self) -> usize {
        self.num_uavs * (self.uav_obs + self.uav_action) + self.beam_obs + self.beam_action
    }

    pub fn next_obs_dim(&self) -> usize {
        self.num_uavs * self.uav_obs + self.beam_obs
    }

    pub fn obs_offset(&self, agent: usize) -> usize {
        agent * (self.uav_obs + self.uav_action)
    }

    pub fn action_offset(&self, agent: usize) -> usize {
        self.obs_offset(agent) + self.obs_dim(agent)
    }

    pub fn next_obs_offset(&self, agent: usize) -> usize {
        agent * self.uav_obs
    }

    pub fn critic_input_dim(&self, agent: usize, scheme: Scheme) -> usize {
        if scheme == Scheme::IndependentTd3 {
            self.obs_dim(agent) + self.action_dim(agent)
        } else {
            self.state_dim()
        }
    }
}

/// Concatenates `[o_1, a_1, …, o_M, a_M, o_beam, a_beam]`; the slices are
/// given in agent order with the beamforming agent last.
pub fn centralized_critic_inputs(layout: &JointLayout, obs: &[&[f64]], actions: &[&[f64]]) -> Result<Vec<f64>> {
    if obs.len() != layout.agents() || actions.len() != layout.agents() {
        return Err(Error::Protocol(format!(
            "centralized critic needs {} agents, got {} observations and {} actions",
            layout.agents(),
            obs.len(),
            actions.len()
        )));
    }
    let mut out = Vec::with_capacity(layout.state_dim());
    for (i, (o, a)) in obs.iter().zip(actions).enumerate() {
        if o.len() != layout.obs_dim(i) || a.len() != layout.action_dim(i) {
            return Err(Error::InvalidArgument(format!("agent {i} has wrong observation or action size")));
        }
        out.extend_from_slice(o);
        out.extend_from_slice(a);
    }
    Ok(out)
}

/// Fast-layer transition stored as the joint vector plus next observations.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransition {
    pub state: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// A surface decision awaiting its window reward.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingSixDmaTransition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub opened_at: usize,
    pub window: WindowStats,
}

/// Closes a surface window: reward from the window statistics, `next_obs`
/// from the next decision slot (or the episode end).
pub fn finalize_6dma_transition(
    pending: PendingSixDmaTransition,
    next_obs: Vec<f64>,
    done: bool,
    scenario: &ScenarioConfig,
) -> Transition {
    let (reward, _) = sixdma_reward(&pending.window, scenario);
    Transition {
        obs: pending.obs,
        action: pending.action,
        reward,
        next_obs,
        done,
    }
}

#[derive(Clone, Debug)]
pub struct AgentRoster {
    pub uav: Vec<Td3Agent>,
    pub beam: Td3Agent,
    pub sixdma: Td3Agent,
}

impl AgentRoster {
    pub fn new(scenario: &ScenarioConfig, config: &TrainConfig) -> Result<Self> {
        let layout = JointLayout::new(scenario);
        let mut init = episode_rng(config.seed, 0, Stream::FastInit);
        let mut uav = Vec::with_capacity(layout.num_uavs);
        for i in 0..layout.num_uavs {
            uav.push(Td3Agent::new(
                layout.uav_obs,
                layout.uav_action,
                layout.critic_input_dim(i, config.scheme),
                config.td3.clone(),
                &mut init,
            )?);
        }
        let m = layout.num_uavs;
        let beam = Td3Agent::new(
            layout.beam_obs,
            layout.beam_action,
            layout.critic_input_dim(m, config.scheme),
            config.td3.clone(),
            &mut init,
        )?;
        let mut init6 = episode_rng(config.seed, 0, Stream::SurfaceInit);
        let o6 = scenario.sixdma_obs_dim();
        let sixdma = Td3Agent::new(o6, SIXDMA_ACTION_DIM, o6 + SIXDMA_ACTION_DIM, config.td3.clone(), &mut init6)?;
        Ok(Self { uav, beam, sixdma })
    }

    pub fn fast_agent(&self, i: usize) -> &Td3Agent {
        if i < self.uav.len() {
            &self.uav[i]
        } else {
            &self.beam
        }
    }

    pub fn fast_agent_mut(&mut self, i: usize) -> &mut Td3Agent {
        if i < self.uav.len() {
            &mut self.uav[i]
        } else {
            &mut self.beam
        }
    }

    fn named(&self) -> Vec<(String, &Td3Agent)> {
        let mut v: Vec<(String, &Td3Agent)> = self.uav.iter().enumerate().map(|(i, a)| (format!("uav{i}"), a)).collect();
        v.push(("beam".into(), &self.beam));
        v.push(("sixdma".into(), &self.sixdma));
        v
    }

    /// Writes every agent plus `manifest.json`.
    pub fn save(&self, dir: &Path, meta: CheckpointMeta) -> Result<CheckpointManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        let mut param_hashes = BTreeMap::new();
        for (name, agent) in self.named() {
            files.extend(agent.save(dir, &name)?);
            param_hashes.insert(name, agent.actor.param_hash());
        }
        let manifest = CheckpointManifest {
            format: CheckpointManifest::FORMAT.into(),
            version: CheckpointManifest::VERSION,
            meta,
            num_uavs: self.uav.len(),
            files,
            actor_hashes: param_hashes,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a checkpoint and checks it against the scenario dimensions.
    pub fn load(dir: &Path, scenario: &ScenarioConfig) -> Result<(Self, CheckpointManifest)> {
        let manifest = CheckpointManifest::read(dir)?;
        if manifest.num_uavs != scenario.num_uavs {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} UAV agents, scenario has {}",
                manifest.num_uavs, scenario.num_uavs
            )));
        }
        let uav = (0..manifest.num_uavs)
            .map(|i| Td3Agent::load(dir, &format!("uav{i}")))
            .collect::<Result<Vec<_>>>()?;
        let roster = Self {
            uav,
            beam: Td3Agent::load(dir, "beam")?,
            sixdma: Td3Agent::load(dir, "sixdma")?,
        };
        let layout = JointLayout::new(scenario);
        let fits = (0..layout.agents()).all(|i| {
            let a = roster.fast_agent(i);
            a.obs_dim() == layout.obs_dim(i)
                && a.action_dim() == layout.action_dim(i)
                && a.critic_input_dim() == layout.critic_input_dim(i, manifest.meta.scheme)
        }) && roster.sixdma.obs_dim() == scenario.sixdma_obs_dim();
        if !fits {
            return Err(Error::Checkpoint("checkpoint dimensions do not match the scenario".into()));
        }
        Ok((roster, manifest))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scheme: Scheme,
    pub seed: u64,
    pub episodes_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub meta: CheckpointMeta,
    pub num_uavs: usize,
    pub files: Vec<String>,
    pub actor_hashes: BTreeMap<String, String>,
}

impl CheckpointManifest {
    pub const FORMAT: &'static str = "sixdma-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != Self::FORMAT || m.version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", m.format, m.version)));
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug)]
enum Stream {
    FastInit = 0,
    SurfaceInit = 1,
    FastNoise = 2,
    SurfaceNoise = 3,
    FastReplay = 4,
    SurfaceReplay = 5,
    Smoothing = 6,
    EnvReset = 7,
    SurfaceSmoothing = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn episode_seed(seed: u64, episode: usize, stream: Stream) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ episode as u64) ^ stream as u64)
}

fn episode_rng(seed: u64, episode: usize, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(episode_seed(seed, episode, stream))
}

/// Per-episode training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub rewards_uav: Vec<f64>,
    pub reward_beam: f64,
    pub reward_6dma: f64,
    pub mean_sum_rate: f64,
    pub mean_snr: f64,
    pub sensing_ok_fraction: f64,
    pub collisions: u32,
    pub blockages: u32,
    pub power_violations: u32,
    pub noise_std: f64,
    pub aborted: bool,
}

impl EpisodeMetrics {
    pub fn csv_header(num_uavs: usize) -> Vec<String> {
        let mut h = vec!["episode".to_string()];
        h.extend((0..num_uavs).map(|i| format!("reward_uav{i}")));
        h.extend(
            [
                "reward_beam",
                "reward_6dma",
                "mean_sum_rate",
                "mean_snr",
                "sensing_ok_fraction",
                "collisions",
                "blockages",
                "power_violations",
                "noise_std",
                "aborted",
            ]
            .map(String::from),
        );
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![self.episode.to_string()];
        r.extend(self.rewards_uav.iter().map(f64::to_string));
        r.extend([
            self.reward_beam.to_string(),
            self.reward_6dma.to_string(),
            self.mean_sum_rate.to_string(),
            self.mean_snr.to_string(),
            self.sensing_ok_fraction.to_string(),
            self.collisions.to_string(),
            self.blockages.to_string(),
            self.power_violations.to_string(),
            self.noise_std.to_string(),
            self.aborted.to_string(),
        ]);
        r
    }

    pub fn from_csv_record(record: &[String], num_uavs: usize) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument(format!("malformed metrics row: {what}"));
        if record.len() != 11 + num_uavs {
            return Err(bad("column count"));
        }
        let f = |i: usize| record[i].parse::<f64>().map_err(|_| bad(&record[i]));
        let u = |i: usize| record[i].parse::<u32>().map_err(|_| bad(&record[i]));
        let m = num_uavs;
        Ok(Self {
            episode: record[0].parse().map_err(|_| bad("episode"))?,
            rewards_uav: (1..=m).map(f).collect::<Result<_>>()?,
            reward_beam: f(m + 1)?,
            reward_6dma: f(m + 2)?,
            mean_sum_rate: f(m + 3)?,
            mean_snr: f(m + 4)?,
            sensing_ok_fraction: f(m + 5)?,
            collisions: u(m + 6)?,
            blockages: u(m + 7)?,
            power_violations: u(m + 8)?,
            noise_std: f(m + 9)?,
            aborted: record[m + 10].parse().map_err(|_| bad("aborted"))?,
        })
    }
}

#[derive(Default)]
struct EpisodeAccumulator {
    rewards_uav: Vec<f64>,
    reward_beam: f64,
    reward_6dma: f64,
    rate_sum: f64,
    snr_sum: f64,
    sensing_ok: usize,
    slots: usize,
    collisions: u32,
    blockages: u32,
    power_violations: u32,
}

impl EpisodeAccumulator {
    fn finish(self, episode: usize, noise_std: f64, aborted: bool) -> EpisodeMetrics {
        let n = self.slots.max(1) as f64;
        EpisodeMetrics {
            episode,
            rewards_uav: self.rewards_uav,
            reward_beam: self.reward_beam,
            reward_6dma: self.reward_6dma,
            mean_sum_rate: self.rate_sum / n,
            mean_snr: self.snr_sum / n,
            sensing_ok_fraction: self.sensing_ok as f64 / n,
            collisions: self.collisions,
            blockages: self.blockages,
            power_violations: self.power_violations,
            noise_std,
            aborted,
        }
    }
}

/// Stateful trainer; one episode per [`Trainer::run_episode`] call.
pub struct Trainer {
    scenario: ScenarioConfig,
    config: TrainConfig,
    layout: JointLayout,
    env: Environment,
    roster: AgentRoster,
    fast_buffer: ReplayBuffer<JointTransition>,
    sixdma_buffer: ReplayBuffer<Transition>,
    episode: usize,
    surface_decisions: u64,
}

impl Trainer {
    pub fn new(scenario: ScenarioConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = Environment::new(scenario.clone(), config.scheme, 0)?;
        let roster = AgentRoster::new(&scenario, &config)?;
        Self::assemble(scenario, config, env, roster, 0)
    }

    /// Continues from a saved roster; replay buffers start empty.
    pub fn resume(scenario: ScenarioConfig, config: TrainConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        let env = Environment::new(scenario.clone(), config.scheme, 0)?;
        let (roster, manifest) = AgentRoster::load(dir, &scenario)?;
        if manifest.meta.scheme != config.scheme || manifest.meta.seed != config.seed {
            return Err(Error::Checkpoint("checkpoint belongs to a different scheme or seed".into()));
        }
        Self::assemble(scenario, config, env, roster, manifest.meta.episodes_completed)
    }

    fn assemble(
        scenario: ScenarioConfig,
        config: TrainConfig,
        env: Environment,
        roster: AgentRoster,
        episode: usize,
    ) -> Result<Self> {
        Ok(Self {
            layout: JointLayout::new(&scenario),
            fast_buffer: ReplayBuffer::new(config.replay_capacity, config.replay)?,
            sixdma_buffer: ReplayBuffer::new(config.replay_capacity, config.replay)?,
            scenario,
            config,
            env,
            roster,
            episode,
            surface_decisions: 0,
        })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn roster(&self) -> &AgentRoster {
        &self.roster
    }

    pub fn layout(&self) -> &JointLayout {
        &self.layout
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn fast_buffer_len(&self) -> usize {
        self.fast_buffer.len()
    }

    pub fn sixdma_buffer_len(&self) -> usize {
        self.sixdma_buffer.len()
    }

    /// Surface decisions taken since this trainer was built.
    pub fn surface_decisions(&self) -> u64 {
        self.surface_decisions
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<CheckpointManifest> {
        self.roster.save(
            dir,
            CheckpointMeta {
                scheme: self.config.scheme,
                seed: self.config.seed,
                episodes_completed: self.episode,
            },
        )
    }

    /// Runs one training episode. A singular geometry aborts the episode and
    /// is reported through [`EpisodeMetrics::aborted`].
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        let e = self.episode;
        let noise_std = self.config.noise.std(e);
        let mut acc = EpisodeAccumulator {
            rewards_uav: vec![0.0; self.layout.num_uavs],
            ..Default::default()
        };
        let result = self.episode_body(e, noise_std, &mut acc);
        self.episode += 1;
        match result {
            Ok(()) => Ok(acc.finish(e, noise_std, false)),
            Err(Error::Singularity(_)) => Ok(acc.finish(e, noise_std, true)),
            Err(other) => Err(other),
        }
    }

    fn episode_body(&mut self, e: usize, noise_std: f64, acc: &mut EpisodeAccumulator) -> Result<()> {
        let seed = self.config.seed;
        let mut fast_noise = episode_rng(seed, e, Stream::FastNoise);
        let mut surface_noise = episode_rng(seed, e, Stream::SurfaceNoise);
        let mut fast_replay = episode_rng(seed, e, Stream::FastReplay);
        let mut surface_replay = episode_rng(seed, e, Stream::SurfaceReplay);
        let mut smoothing = episode_rng(seed, e, Stream::Smoothing);
        let mut surface_smoothing = episode_rng(seed, e, Stream::SurfaceSmoothing);

        let mut obs = self.env.reset(episode_seed(seed, e, Stream::EnvReset))?;
        let mut pending: Option<PendingSixDmaTransition> = None;
        let gamma_min = self.scenario.gamma_min();

        while !self.env.is_done() {
            if self.env.is_decision_slot() {
                if let Some(p) = pending.take() {
                    let t = finalize_6dma_transition(p, obs.sixdma.clone(), false, &self.scenario);
                    acc.reward_6dma += t.reward;
                    self.sixdma_buffer.push(t);
                }
                let a6 = self.roster.sixdma.act_explore(&obs.sixdma, noise_std, &mut surface_noise)?;
                let action = SixDmaAction::from_policy(&a6, self.env.state().pose.center, &self.scenario)?;
                let out = self.env.apply_6dma_action(action)?;
                self.surface_decisions += 1;
                if out.epsilon2 {
                    acc.blockages += 1;
                }
                pending = Some(PendingSixDmaTransition {
                    obs: obs.sixdma.clone(),
                    action: a6,
                    opened_at: self.env.slot(),
                    window: WindowStats {
                        epsilon2: out.epsilon2,
                        ..WindowStats::default()
                    },
                });
                self.update_sixdma(&mut surface_replay, &mut surface_smoothing)?;
                obs = self.env.build_observations()?;
            }

            let mut actions = Vec::with_capacity(self.layout.agents());
            for (i, o) in obs.uav.iter().enumerate() {
                actions.push(self.roster.uav[i].act_explore(o, noise_std, &mut fast_noise)?);
            }
            actions.push(self.roster.beam.act_explore(&obs.beam, noise_std, &mut fast_noise)?);
            let uav_actions = actions[..self.layout.num_uavs]
                .iter()
                .map(|a| UavAction::from_slice(a))
                .collect::<Result<Vec<_>>>()?;
            let (outcome, record) = self.env.step(&uav_actions, &actions[self.layout.num_uavs])?;
            let next = self.env.build_observations()?;

            let rate = outcome.metrics.sum_rate;
            let mean_snr = outcome.metrics.mean_snr();
            if let Some(p) = pending.as_mut() {
                p.window.push(rate, record.mean_pointing_angle);
            }
            for (sum, r) in acc.rewards_uav.iter_mut().zip(&outcome.rewards_uav) {
                *sum += r;
            }
            acc.reward_beam += outcome.reward_beam;
            acc.rate_sum += rate;
            acc.snr_sum += mean_snr;
            acc.sensing_ok += usize::from(mean_snr >= gamma_min);
            acc.slots += 1;
            acc.collisions += u32::from(outcome.epsilon1);
            acc.power_violations += u32::from(outcome.penalties.delta4 > 0.0);

            let obs_refs: Vec<&[f64]> = obs.uav.iter().map(Vec::as_slice).chain([obs.beam.as_slice()]).collect();
            let act_refs: Vec<&[f64]> = actions.iter().map(Vec::as_slice).collect();
            let mut rewards = outcome.rewards_uav.clone();
            rewards.push(outcome.reward_beam);
            self.fast_buffer.push(JointTransition {
                state: centralized_critic_inputs(&self.layout, &obs_refs, &act_refs)?,
                rewards,
                next_obs: next.uav.iter().flatten().chain(&next.beam).copied().collect(),
                done: outcome.done,
            });
            self.update_fast(&mut fast_replay, &mut smoothing)?;
            obs = next;
        }

        if let Some(p) = pending.take() {
            let t = finalize_6dma_transition(p, obs.sixdma.clone(), true, &self.scenario);
            acc.reward_6dma += t.reward;
            self.sixdma_buffer.push(t);
        }
        Ok(())
    }

    fn update_fast(&mut self, replay_rng: &mut ChaCha8Rng, smoothing_rng: &mut ChaCha8Rng) -> Result<()> {
        let Some(batch) = self.fast_buffer.sample(self.config.batch_size, replay_rng) else {
            return Ok(());
        };
        let layout = self.layout;
        let b = batch.indices.len();
        let c = layout.state_dim();
        let n_agents = layout.agents();
        let mut states = Array2::zeros((b, c));
        let mut next_states = Array2::zeros((b, c));
        let mut rewards = Array2::zeros((b, n_agents));
        let mut dones = Vec::with_capacity(b);
        let mut next_obs = Array2::zeros((b, layout.next_obs_dim()));
        for (row, &idx) in batch.indices.iter().enumerate() {
            let t = self.fast_buffer.get(idx).expect("sampled index in range");
            states.row_mut(row).assign(&ArrayView2::from_shape((1, c), &t.state).expect("width").row(0));
            for (k, r) in t.rewards.iter().enumerate() {
                rewards[[row, k]] = *r;
            }
            for (k, v) in t.next_obs.iter().enumerate() {
                next_obs[[row, k]] = *v;
            }
            dones.push(t.done);
        }
        for i in 0..n_agents {
            let (o, od) = (layout.next_obs_offset(i), layout.obs_dim(i));
            let (so, ao, ad) = (layout.obs_offset(i), layout.action_offset(i), layout.action_dim(i));
            let agent_next_obs = next_obs.slice(s![.., o..o + od]);
            next_states.slice_mut(s![.., so..so + od]).assign(&agent_next_obs);
            let target_actions = self.roster.fast_agent(i).target_actions(agent_next_obs, smoothing_rng)?;
            next_states.slice_mut(s![.., ao..ao + ad]).assign(&target_actions);
        }

        let independent = self.config.scheme == Scheme::IndependentTd3;
        let tau = self.config.td3.tau;
        let mut abs_td = vec![0.0; b];
        for i in 0..n_agents {
            let (so, od, ad) = (layout.obs_offset(i), layout.obs_dim(i), layout.action_dim(i));
            let (view, next_view, action_offset) = if independent {
                (
                    states.slice(s![.., so..so + od + ad]),
                    next_states.slice(s![.., so..so + od + ad]),
                    od,
                )
            } else {
                (states.view(), next_states.view(), layout.action_offset(i))
            };
            let r = rewards.column(i).to_vec();
            let agent = self.roster.fast_agent_mut(i);
            let y = agent.td_targets(&r, &dones, next_view)?;
            let stats = agent.critic_update(view, &y, Some(&batch.weights))?;
            for (acc, d) in abs_td.iter_mut().zip(&stats.td_errors) {
                *acc += d.abs() / n_agents as f64;
            }
            if agent.actor_update_due() {
                agent.actor_update(states.slice(s![.., so..so + od]), view, action_offset)?;
                agent.soft_update(tau)?;
            }
        }
        self.fast_buffer.update_priorities(&batch.indices, &abs_td);
        Ok(())
    }

    fn update_sixdma(&mut self, replay_rng: &mut ChaCha8Rng, smoothing_rng: &mut ChaCha8Rng) -> Result<()> {
        let Some(batch) = self.sixdma_buffer.sample(self.config.batch_size, replay_rng) else {
            return Ok(());
        };
        let o6 = self.scenario.sixdma_obs_dim();
        let w = o6 + SIXDMA_ACTION_DIM;
        let b = batch.indices.len();
        let mut states = Array2::zeros((b, w));
        let mut next_states = Array2::zeros((b, w));
        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        for (row, &idx) in batch.indices.iter().enumerate() {
            let t = self.sixdma_buffer.get(idx).expect("sampled index in range");
            for (k, v) in t.obs.iter().chain(&t.action).enumerate() {
                states[[row, k]] = *v;
            }
            for (k, v) in t.next_obs.iter().enumerate() {
                next_states[[row, k]] = *v;
            }
            rewards.push(t.reward);
            dones.push(t.done);
        }
        let agent = &mut self.roster.sixdma;
        let next_actions = agent.target_actions(next_states.slice(s![.., ..o6]), smoothing_rng)?;
        next_states.slice_mut(s![.., o6..]).assign(&next_actions);
        let y = agent.td_targets(&rewards, &dones, next_states.view())?;
        let stats = agent.critic_update(states.view(), &y, Some(&batch.weights))?;
        if agent.actor_update_due() {
            agent.actor_update(states.slice(s![.., ..o6]), states.view(), o6)?;
            agent.soft_update(self.config.td3.tau)?;
        }
        let abs: Vec<f64> = stats.td_errors.iter().map(|d| d.abs()).collect();
        self.sixdma_buffer.update_priorities(&batch.indices, &abs);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpisodeMetrics>,
    pub roster: AgentRoster,
}

/// Trains for `config.episodes` episodes from scratch.
pub fn train(scenario: ScenarioConfig, config: TrainConfig) -> Result<TrainReport> {
    let episodes = config.episodes;
    let mut trainer = Trainer::new(scenario, config)?;
    let metrics = (0..episodes)
        .map(|_| trainer.run_episode())
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        metrics,
        roster: trainer.roster,
    })
}

/// Mean, max and 99th percentile (nearest rank) in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub max_us: f64,
    pub p99_us: f64,
    pub samples: usize,
}

impl LatencyStats {
    pub fn from_samples(samples_us: &[f64]) -> Result<Self> {
        if samples_us.is_empty() {
            return Err(Error::InvalidArgument("no latency samples".into()));
        }
        let mut sorted = samples_us.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
        Ok(Self {
            mean_us: sorted.iter().sum::<f64>() / n as f64,
            max_us: sorted[n - 1],
            p99_us: sorted[rank - 1],
            samples: n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub agent: String,
    pub stats: LatencyStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub seed: u64,
    pub mean_sum_rate: f64,
    pub mean_snr: f64,
    pub sensing_ok_fraction: f64,
    pub collisions: u32,
    pub blockages: u32,
    pub power_violations: u32,
    pub slot_mean_snr: Vec<f64>,
    pub trajectory: Vec<Vec<Vec3>>,
    pub poses: Vec<SurfacePose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub mean_sum_rate: f64,
    pub mean_snr: f64,
    pub sensing_ok_fraction: f64,
    pub collisions: u32,
    pub blockages: u32,
    pub power_violations: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: Scheme,
    pub episodes: Vec<EvalEpisode>,
    pub aggregate: EvalAggregate,
    /// Wall-clock; excluded from equality checks by callers that need them.
    pub latency: Vec<LatencyRow>,
}

fn timed<T>(samples: &mut Vec<f64>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    samples.push(start.elapsed().as_secs_f64() * 1e6);
    Ok(out)
}

/// Noise-free rollouts, one episode per seed.
pub fn evaluate(roster: &AgentRoster, scenario: &ScenarioConfig, scheme: Scheme, seeds: &[u64]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one seed".into()));
    }
    if roster.uav.len() != scenario.num_uavs {
        return Err(Error::Checkpoint("roster does not match the scenario".into()));
    }
    let m = scenario.num_uavs;
    let gamma_min = scenario.gamma_min();
    let mut env = Environment::new(scenario.clone(), scheme, 0)?;
    let mut lat: Vec<Vec<f64>> = vec![Vec::new(); m + 2];
    let mut episodes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut obs: Observations = env.reset(seed)?;
        let mut ep = EvalEpisode {
            seed,
            mean_sum_rate: 0.0,
            mean_snr: 0.0,
            sensing_ok_fraction: 0.0,
            collisions: 0,
            blockages: 0,
            power_violations: 0,
            slot_mean_snr: Vec::new(),
            trajectory: Vec::new(),
            poses: Vec::new(),
        };
        while !env.is_done() {
            if env.is_decision_slot() {
                let a6 = timed(&mut lat[m + 1], || roster.sixdma.act(&obs.sixdma))?;
                let action = SixDmaAction::from_policy(&a6, env.state().pose.center, scenario)?;
                ep.blockages += u32::from(env.apply_6dma_action(action)?.epsilon2);
                obs = env.build_observations()?;
            }
            let mut uav_actions = Vec::with_capacity(m);
            for ((samples, agent), o) in lat.iter_mut().zip(&roster.uav).zip(&obs.uav) {
                let a = timed(samples, || agent.act(o))?;
                uav_actions.push(UavAction::from_slice(&a)?);
            }
            let beam = timed(&mut lat[m], || roster.beam.act(&obs.beam))?;
            let (outcome, record) = env.step(&uav_actions, &beam)?;
            let snr = outcome.metrics.mean_snr();
            ep.mean_sum_rate += outcome.metrics.sum_rate;
            ep.slot_mean_snr.push(snr);
            ep.collisions += u32::from(outcome.epsilon1);
            ep.power_violations += u32::from(outcome.penalties.delta4 > 0.0);
            ep.trajectory.push(record.uav_positions);
            ep.poses.push(record.pose);
            obs = env.build_observations()?;
        }
        let k = ep.slot_mean_snr.len() as f64;
        ep.mean_sum_rate /= k;
        ep.mean_snr = ep.slot_mean_snr.iter().sum::<f64>() / k;
        ep.sensing_ok_fraction = ep.slot_mean_snr.iter().filter(|&&s| s >= gamma_min).count() as f64 / k;
        episodes.push(ep);
    }
    let n = episodes.len() as f64;
    let aggregate = EvalAggregate {
        mean_sum_rate: episodes.iter().map(|e| e.mean_sum_rate).sum::<f64>() / n,
        mean_snr: episodes.iter().map(|e| e.mean_snr).sum::<f64>() / n,
        sensing_ok_fraction: episodes.iter().map(|e| e.sensing_ok_fraction).sum::<f64>() / n,
        collisions: episodes.iter().map(|e| e.collisions).sum(),
        blockages: episodes.iter().map(|e| e.blockages).sum(),
        power_violations: episodes.iter().map(|e| e.power_violations).sum(),
    };
    let latency = lat
        .iter()
        .enumerate()
        .map(|(i, samples)| {
            let agent = match i {
                i if i < m => format!("uav{i}"),
                i if i == m => "beam".to_string(),
                _ => "sixdma".to_string(),
            };
            LatencyStats::from_samples(samples).map(|stats| LatencyRow { agent, stats })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        scheme,
        episodes,
        aggregate,
        latency,
    })
}
