//! Episodic environment.
//!
//! One episode is `K` slots of length `Δt`. In every slot the fast layer (UAV
//! agents and the beamforming agent) acts; every `T_r` slots, before the fast
//! layer, the surface agent may move and rotate the surface.
//!
//! Within a fast step the precoder is taken from the beamforming action, UAVs
//! move, and the link metrics and rewards are evaluated at the post-move
//! positions. Physics uses the power-projected precoder while the power
//! penalty sees the unprojected one.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{channel_vector, ComplexVec};
use crate::error::{Error, Result};
use crate::geometry::{
    global_antenna_positions, half_space_ok, surface_normal, validate_spacing, AntennaLayout,
    RotationAngles, SurfacePose, Vec3,
};
use crate::isac::{
    self, db_to_linear, dbm_to_watts, project_power, tx_power, BeamformingMatrix, LinkMetrics,
};

/// Observation length of one UAV agent: position, BS position, end point, time.
pub const UAV_OBS_DIM: usize = 10;
/// Action length of one UAV agent: raw direction (3) and raw speed (1).
pub const UAV_ACTION_DIM: usize = 4;
/// Action length of the surface agent: three angle deltas, three center offsets.
pub const SIXDMA_ACTION_DIM: usize = 6;

/// Benchmark schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scheme {
    /// Joint optimization of trajectories, precoder, rotation and position.
    Proposed,
    /// Fast-layer agents train on their own observation only.
    IndependentTd3,
    /// Center fixed, rotation optimized.
    RotationOnly,
    /// Rotation fixed, center restricted to a circle around the mount.
    CircularOnly,
    /// Surface pose frozen (fixed-position antenna).
    Fixed,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Proposed,
        Scheme::IndependentTd3,
        Scheme::RotationOnly,
        Scheme::CircularOnly,
        Scheme::Fixed,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Scheme::Proposed),
            2 => Ok(Scheme::IndependentTd3),
            3 => Ok(Scheme::RotationOnly),
            4 => Ok(Scheme::CircularOnly),
            5 => Ok(Scheme::Fixed),
            other => Err(Error::InvalidArgument(format!("unknown scheme id {other}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Scheme::Proposed => 1,
            Scheme::IndependentTd3 => 2,
            Scheme::RotationOnly => 3,
            Scheme::CircularOnly => 4,
            Scheme::Fixed => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::IndependentTd3 => "td3",
            Scheme::RotationOnly => "rotation-only",
            Scheme::CircularOnly => "circular-only",
            Scheme::Fixed => "fpa",
        }
    }
}

impl TryFrom<u8> for Scheme {
    type Error = Error;
    fn try_from(id: u8) -> Result<Self> {
        Scheme::from_id(id)
    }
}

impl From<Scheme> for u8 {
    fn from(s: Scheme) -> u8 {
        s.id()
    }
}

/// How the surface agent aggregates sum-rate over its window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowAggregate {
    #[default]
    Mean,
    Sum,
}

/// Scenario parameters. Defaults are the full-size scenario (500 m x 500 m
/// area, four UAVs, three targets, 60 slots of 5 s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Half side of the square flight area in x and y (m).
    pub area_half_extent: f64,
    /// UAV altitude ceiling (m); the floor is 0.
    pub altitude_max: f64,
    pub num_uavs: usize,
    pub num_targets: usize,
    pub num_antennas: usize,
    pub num_slots: usize,
    pub slot_duration_s: f64,
    pub v_max: f64,
    pub d_min: f64,
    pub wavelength: f64,
    pub noise_comm_dbm: f64,
    pub noise_sense_dbm: f64,
    pub p_max_w: f64,
    pub gamma_min_db: f64,
    /// Per-update rotation bound (degrees).
    pub theta_max_deg: f64,
    /// Surface update period `T_r` in slots.
    pub update_period: usize,
    pub surface_side: f64,
    /// Half side of the cube the surface center may occupy around its mount.
    pub mobility_half_extent: f64,
    /// Largest center displacement per surface decision (m).
    pub center_step_limit: f64,
    /// Radius of the circle used by the circular-movement scheme (m).
    pub circle_radius: f64,
    pub initial_center: Vec3,
    pub bs_position: Vec3,
    pub uav_starts: Vec<Vec3>,
    pub uav_ends: Vec<Vec3>,
    pub targets: Vec<Vec3>,
    /// Uniform jitter (m) applied to start points at reset; 0 disables.
    pub start_jitter: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Weight of the per-slot progress bonus toward each UAV's end point.
    pub end_shaping_weight: f64,
    pub window_aggregate: WindowAggregate,
    pub collision_includes_targets: bool,
    /// Distance whose free-space amplitude normalizes channel observations.
    pub channel_ref_distance: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let y_edge = 250.0;
        let lanes = [20.0, 50.0, 80.0, 110.0];
        let uav_starts = lanes
            .iter()
            .enumerate()
            .map(|(i, &x)| Vec3::new(x, if i % 2 == 0 { -y_edge } else { y_edge }, 100.0))
            .collect();
        let uav_ends = lanes
            .iter()
            .enumerate()
            .map(|(i, &x)| Vec3::new(x, if i % 2 == 0 { y_edge } else { -y_edge }, 100.0))
            .collect();
        Self {
            area_half_extent: 250.0,
            altitude_max: 150.0,
            num_uavs: 4,
            num_targets: 3,
            num_antennas: 4,
            num_slots: 60,
            slot_duration_s: 5.0,
            v_max: 8.0,
            d_min: 3.0,
            wavelength: 0.125,
            noise_comm_dbm: -50.0,
            noise_sense_dbm: -50.0,
            p_max_w: 0.04,
            gamma_min_db: 1.0,
            theta_max_deg: 10.0,
            update_period: 10,
            surface_side: 1.0,
            mobility_half_extent: 5.0,
            center_step_limit: 1.0,
            circle_radius: 1.0,
            initial_center: Vec3::new(0.0, 0.0, 200.0),
            bs_position: Vec3::new(0.0, 0.0, 0.0),
            uav_starts,
            uav_ends,
            targets: vec![
                Vec3::new(10.0, -6.0, 197.0),
                Vec3::new(10.0, 6.0, 197.0),
                Vec3::new(11.0, 0.0, 205.0),
            ],
            start_jitter: 0.0,
            delta1: 10.0,
            delta2: 10.0,
            end_shaping_weight: 0.1,
            window_aggregate: WindowAggregate::Mean,
            collision_includes_targets: false,
            channel_ref_distance: 50.0,
        }
    }
}

impl ScenarioConfig {
    /// Reduced scenario used for quick learning checks: two UAVs, two targets,
    /// 20 slots.
    pub fn desk_scale() -> Self {
        let base = Self::default();
        Self {
            num_uavs: 2,
            num_targets: 2,
            num_slots: 20,
            uav_starts: vec![Vec3::new(25.0, -150.0, 100.0), Vec3::new(55.0, 150.0, 100.0)],
            uav_ends: vec![Vec3::new(25.0, 150.0, 100.0), Vec3::new(55.0, -150.0, 100.0)],
            targets: base.targets[..2].to_vec(),
            ..base
        }
    }

    pub fn sigma_c_sq(&self) -> f64 {
        dbm_to_watts(self.noise_comm_dbm)
    }

    pub fn sigma_s_sq(&self) -> f64 {
        dbm_to_watts(self.noise_sense_dbm)
    }

    pub fn gamma_min(&self) -> f64 {
        db_to_linear(self.gamma_min_db)
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max_deg.to_radians()
    }

    pub fn layout(&self) -> Result<AntennaLayout> {
        AntennaLayout::uniform_grid(self.num_antennas, self.surface_side)
    }

    /// Number of surface decision slots per episode, `⌈K / T_r⌉`.
    pub fn decisions_per_episode(&self) -> usize {
        self.num_slots.div_ceil(self.update_period)
    }

    pub fn uav_obs_dim(&self) -> usize {
        UAV_OBS_DIM
    }

    pub fn beam_obs_dim(&self) -> usize {
        2 * self.num_antennas * (self.num_uavs + self.num_targets)
    }

    pub fn beam_action_dim(&self) -> usize {
        2 * self.num_antennas * self.num_uavs
    }

    pub fn sixdma_obs_dim(&self) -> usize {
        3 * (self.num_uavs + 1)
    }

    fn area_lo(&self) -> Vec3 {
        Vec3::new(-self.area_half_extent, -self.area_half_extent, 0.0)
    }

    fn area_hi(&self) -> Vec3 {
        Vec3::new(self.area_half_extent, self.area_half_extent, self.altitude_max)
    }

    fn in_area(&self, p: Vec3) -> bool {
        p.clamp(self.area_lo(), self.area_hi()) == p
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("area_half_extent", self.area_half_extent),
            ("altitude_max", self.altitude_max),
            ("slot_duration_s", self.slot_duration_s),
            ("v_max", self.v_max),
            ("d_min", self.d_min),
            ("wavelength", self.wavelength),
            ("p_max_w", self.p_max_w),
            ("theta_max_deg", self.theta_max_deg),
            ("surface_side", self.surface_side),
            ("channel_ref_distance", self.channel_ref_distance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        let non_negative = [
            ("mobility_half_extent", self.mobility_half_extent),
            ("center_step_limit", self.center_step_limit),
            ("circle_radius", self.circle_radius),
            ("start_jitter", self.start_jitter),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("end_shaping_weight", self.end_shaping_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.noise_comm_dbm.is_finite() || !self.noise_sense_dbm.is_finite() || !self.gamma_min_db.is_finite() {
            return fail("noise powers and the SNR threshold must be finite".into());
        }
        if self.num_uavs == 0 || self.num_targets == 0 || self.num_antennas == 0 || self.num_slots == 0 {
            return fail("M, J, N and K must all be at least 1".into());
        }
        if self.update_period == 0 || self.update_period > self.num_slots {
            return fail(format!(
                "update period T_r = {} must lie in 1..=K ({})",
                self.update_period, self.num_slots
            ));
        }
        if self.d_min >= 2.0 * self.area_half_extent {
            return fail("d_min must be smaller than the area extent".into());
        }
        if self.circle_radius > self.mobility_half_extent {
            return fail("circle radius must fit inside the mobility box".into());
        }
        if self.uav_starts.len() != self.num_uavs || self.uav_ends.len() != self.num_uavs {
            return fail(format!(
                "expected {} start and end points, got {} and {}",
                self.num_uavs,
                self.uav_starts.len(),
                self.uav_ends.len()
            ));
        }
        if self.targets.len() != self.num_targets {
            return fail(format!(
                "expected {} target positions, got {}",
                self.num_targets,
                self.targets.len()
            ));
        }
        for p in self.uav_starts.iter().chain(&self.uav_ends) {
            if !self.in_area(*p) {
                return fail(format!("UAV waypoint {p:?} lies outside the flight area"));
            }
        }
        for i in 0..self.num_uavs {
            for j in (i + 1)..self.num_uavs {
                let d = self.uav_starts[i].distance(self.uav_starts[j]);
                if d < self.d_min {
                    return fail(format!(
                        "UAVs {i} and {j} start {d} m apart, below d_min = {}",
                        self.d_min
                    ));
                }
            }
        }
        for p in self.uav_starts.iter().chain(&self.targets) {
            if p.distance(self.initial_center) <= self.mobility_half_extent * 3f64.sqrt() {
                return fail(format!("point {p:?} lies within reach of the surface center"));
            }
        }
        let layout = self.layout()?;
        if !validate_spacing(&layout, self.wavelength) {
            return fail(format!(
                "antenna spacing {} is below half a wavelength",
                layout.min_spacing()
            ));
        }
        Ok(())
    }
}

/// Everything that changes during an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub slot: usize,
    pub uav_positions: Vec<Vec3>,
    pub target_positions: Vec<Vec3>,
    pub pose: SurfacePose,
    /// Physics-side (power-projected) precoder.
    pub precoder: BeamformingMatrix,
}

/// Per-agent observations for one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub uav: Vec<Vec<f64>>,
    pub beam: Vec<f64>,
    pub sixdma: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavAction {
    pub direction: Vec3,
    pub speed_raw: f64,
}

impl UavAction {
    pub fn from_slice(a: &[f64]) -> Result<Self> {
        if a.len() != UAV_ACTION_DIM {
            return Err(Error::InvalidArgument(format!(
                "UAV action needs {UAV_ACTION_DIM} entries, got {}",
                a.len()
            )));
        }
        Ok(Self {
            direction: Vec3::new(a[0], a[1], a[2]),
            speed_raw: a[3],
        })
    }

    pub fn hold() -> Self {
        Self {
            direction: Vec3::ZERO,
            speed_raw: -1.0,
        }
    }
}

/// A proposed surface update: angle increments and the requested new center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SixDmaAction {
    pub delta_angles: RotationAngles,
    pub new_center_raw: Vec3,
}

impl SixDmaAction {
    /// Maps six policy outputs in `[−1, 1]`: the first three scale `θ_max`,
    /// the last three scale the per-decision center step around `center`.
    pub fn from_policy(a: &[f64], center: Vec3, config: &ScenarioConfig) -> Result<Self> {
        if a.len() != SIXDMA_ACTION_DIM {
            return Err(Error::InvalidArgument(format!(
                "surface action needs {SIXDMA_ACTION_DIM} entries, got {}",
                a.len()
            )));
        }
        let t = config.theta_max();
        let s = config.center_step_limit;
        Ok(Self {
            delta_angles: RotationAngles::new(a[0] * t, a[1] * t, a[2] * t),
            new_center_raw: center + Vec3::new(a[3] * s, a[4] * s, a[5] * s),
        })
    }

    pub fn stay(center: Vec3) -> Self {
        Self {
            delta_angles: RotationAngles::ZERO,
            new_center_raw: center,
        }
    }
}

/// Outcome of moving the UAVs.
#[derive(Clone, Debug, PartialEq)]
pub struct UavMoveOutcome {
    pub positions: Vec<Vec3>,
    pub epsilon1: bool,
    /// `ε1 · δ1`.
    pub delta1_contrib: f64,
    /// Progress bonus toward each end point.
    pub shaping: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SixDmaOutcome {
    pub pose: SurfacePose,
    pub epsilon2: bool,
    pub worst_margin: f64,
}

/// Penalty components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub delta4: f64,
    pub delta5: Option<f64>,
}

/// Constraint flags and raw inputs for one reward evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardInputs {
    pub epsilon1: bool,
    /// Unprojected transmit power of the agent's precoder.
    pub raw_power: f64,
    pub shaping: Vec<f64>,
}

/// Sum-rates and pointing angles collected over one surface window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub rates: Vec<f64>,
    /// Per-slot mean angle (rad) between the normal and the UAV directions.
    pub mean_angles: Vec<f64>,
    pub epsilon2: bool,
}

impl WindowStats {
    pub fn push(&mut self, rate: f64, mean_angle: f64) {
        self.rates.push(rate);
        self.mean_angles.push(mean_angle);
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// Rewards, flags and penalty components of a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub metrics: LinkMetrics,
    pub rewards_uav: Vec<f64>,
    pub reward_beam: f64,
    pub reward_6dma: Option<f64>,
    pub epsilon1: bool,
    pub epsilon2: bool,
    pub penalties: Penalties,
    pub shaping: Vec<f64>,
    pub done: bool,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `r_m = (1 − ε1) R − ε1 δ1 + shaping_m`.
pub fn uav_reward(sum_rate: f64, epsilon1: bool, delta1: f64, shaping: f64) -> f64 {
    let e = flag(epsilon1);
    (1.0 - e) * sum_rate - e * delta1 + shaping
}

/// `r_beam = R − δ3 − δ4 + mean_j SNR_j`.
pub fn beam_reward(sum_rate: f64, delta3: f64, delta4: f64, mean_snr: f64) -> f64 {
    sum_rate - delta3 - delta4 + mean_snr
}

/// `δ5 = cos(θ̄) / M`.
pub fn pointing_bonus(window: &WindowStats, num_uavs: usize) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    let mean_angle = window.mean_angles.iter().sum::<f64>() / window.len() as f64;
    mean_angle.cos() / num_uavs as f64
}

/// `r_6dma = (1 − ε2) · agg(rates) − ε2 δ2 + δ5`.
pub fn sixdma_reward(window: &WindowStats, config: &ScenarioConfig) -> (f64, f64) {
    let delta5 = pointing_bonus(window, config.num_uavs);
    let agg = match (config.window_aggregate, window.len()) {
        (_, 0) => 0.0,
        (WindowAggregate::Mean, n) => window.rates.iter().sum::<f64>() / n as f64,
        (WindowAggregate::Sum, _) => window.rates.iter().sum::<f64>(),
    };
    let e = flag(window.epsilon2);
    ((1.0 - e) * agg - e * config.delta2 + delta5, delta5)
}

/// Builds rewards and penalty components from metrics and flags.
pub fn compute_rewards(
    metrics: &LinkMetrics,
    inputs: &RewardInputs,
    config: &ScenarioConfig,
    window: Option<&WindowStats>,
) -> StepOutcome {
    let r = metrics.sum_rate;
    let mean_snr = metrics.mean_snr();
    let delta3 = (config.gamma_min() - mean_snr).max(0.0);
    let delta4 = (inputs.raw_power - config.p_max_w).max(0.0);
    let shaping = if inputs.shaping.is_empty() {
        vec![0.0; metrics.sinr_per_uav.len()]
    } else {
        inputs.shaping.clone()
    };
    let rewards_uav = shaping
        .iter()
        .map(|&s| uav_reward(r, inputs.epsilon1, config.delta1, s))
        .collect();
    let (reward_6dma, delta5, epsilon2) = match window {
        Some(w) => {
            let (reward, d5) = sixdma_reward(w, config);
            (Some(reward), Some(d5), w.epsilon2)
        }
        None => (None, None, false),
    };
    StepOutcome {
        metrics: metrics.clone(),
        rewards_uav,
        reward_beam: beam_reward(r, delta3, delta4, mean_snr),
        reward_6dma,
        epsilon1: inputs.epsilon1,
        epsilon2,
        penalties: Penalties {
            delta1: config.delta1,
            delta2: config.delta2,
            delta3,
            delta4,
            delta5,
        },
        shaping,
        done: false,
    }
}

/// Restricts a proposed surface action to what a scheme allows.
pub fn apply_scheme_restriction(
    scheme: Scheme,
    proposed: SixDmaAction,
    current: &SurfacePose,
    initial_center: Vec3,
    circle_radius: f64,
) -> SixDmaAction {
    match scheme {
        Scheme::Proposed | Scheme::IndependentTd3 => proposed,
        Scheme::RotationOnly => SixDmaAction {
            delta_angles: proposed.delta_angles,
            new_center_raw: current.center,
        },
        Scheme::CircularOnly => {
            let offset = proposed.new_center_raw - initial_center;
            let horizontal = Vec3::new(offset.x, offset.y, 0.0);
            let center = match horizontal.normalized() {
                Some(u) if horizontal.norm() > 1e-12 => initial_center + u * circle_radius,
                _ => current.center,
            };
            SixDmaAction {
                delta_angles: RotationAngles::ZERO,
                new_center_raw: center,
            }
        }
        Scheme::Fixed => SixDmaAction::stay(current.center),
    }
}

/// Interleaved (re, im) precoder entries, UAV-major, scaled so an all-±1
/// action spends exactly `p_max`.
pub fn precoder_from_action(
    action: &[f64],
    antennas: usize,
    streams: usize,
    p_max: f64,
) -> Result<BeamformingMatrix> {
    if action.len() != 2 * antennas * streams {
        return Err(Error::InvalidArgument(format!(
            "beam action needs {} entries, got {}",
            2 * antennas * streams,
            action.len()
        )));
    }
    let scale = (p_max / (2 * antennas * streams) as f64).sqrt();
    let columns = action
        .chunks(2 * antennas)
        .map(|col| {
            col.chunks(2)
                .map(|ri| Complex64::new(ri[0] * scale, ri[1] * scale))
                .collect()
        })
        .collect();
    BeamformingMatrix::from_columns(columns)
}

/// One NDJSON line of the episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub uav_positions: Vec<Vec3>,
    pub pose: SurfacePose,
    pub raw_power: f64,
    pub mean_pointing_angle: f64,
    pub outcome: StepOutcome,
}

/// Streams slot records as newline-delimited JSON.
pub struct EpisodeLogger<W: Write> {
    out: W,
}

impl<W: Write> EpisodeLogger<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn log(&mut self, record: &SlotRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("<episode log>", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Environment instance; single writer.
#[derive(Clone, Debug)]
pub struct Environment {
    config: ScenarioConfig,
    scheme: Scheme,
    layout: AntennaLayout,
    state: WorldState,
    last_decision_slot: Option<usize>,
}

impl Environment {
    pub fn new(config: ScenarioConfig, scheme: Scheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let state = Self::initial_state(&config, seed);
        Ok(Self {
            config,
            scheme,
            layout,
            state,
            last_decision_slot: None,
        })
    }

    fn initial_state(config: &ScenarioConfig, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uav_positions = config
            .uav_starts
            .iter()
            .map(|&p| {
                if config.start_jitter > 0.0 {
                    let j = config.start_jitter;
                    let offset = Vec3::new(
                        rng.random_range(-j..=j),
                        rng.random_range(-j..=j),
                        rng.random_range(-j..=j),
                    );
                    (p + offset).clamp(config.area_lo(), config.area_hi())
                } else {
                    p
                }
            })
            .collect();
        WorldState {
            slot: 0,
            uav_positions,
            target_positions: config.targets.clone(),
            pose: SurfacePose::new(config.initial_center, RotationAngles::ZERO),
            precoder: BeamformingMatrix::zeros(config.num_antennas, config.num_uavs),
        }
    }

    /// Restarts the episode. Jittered start points that would violate `d_min`
    /// are a configuration error.
    pub fn reset(&mut self, seed: u64) -> Result<Observations> {
        let state = Self::initial_state(&self.config, seed);
        let p = &state.uav_positions;
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                if p[i].distance(p[j]) < self.config.d_min {
                    return Err(Error::Config(format!(
                        "UAVs {i} and {j} start closer than d_min"
                    )));
                }
            }
        }
        self.state = state;
        self.last_decision_slot = None;
        self.build_observations()
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn layout(&self) -> &AntennaLayout {
        &self.layout
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn slot(&self) -> usize {
        self.state.slot
    }

    pub fn is_done(&self) -> bool {
        self.state.slot >= self.config.num_slots
    }

    pub fn is_decision_slot(&self) -> bool {
        !self.is_done() && self.state.slot.is_multiple_of(self.config.update_period)
    }

    fn check_running(&self) -> Result<()> {
        if self.is_done() {
            return Err(Error::Protocol(format!(
                "episode already finished after {} slots",
                self.config.num_slots
            )));
        }
        Ok(())
    }

    /// Moves the UAVs by one slot. A zero raw direction holds position.
    pub fn apply_uav_actions(&mut self, actions: &[UavAction]) -> Result<UavMoveOutcome> {
        self.check_running()?;
        let cfg = &self.config;
        if actions.len() != cfg.num_uavs {
            return Err(Error::InvalidArgument(format!(
                "expected {} UAV actions, got {}",
                cfg.num_uavs,
                actions.len()
            )));
        }
        if actions
            .iter()
            .any(|a| !a.direction.is_finite() || !a.speed_raw.is_finite())
        {
            return Err(Error::InvalidArgument("UAV actions must be finite".into()));
        }
        let step_max = cfg.v_max * cfg.slot_duration_s;
        let mut shaping = Vec::with_capacity(actions.len());
        let mut positions = Vec::with_capacity(actions.len());
        for ((a, &p), &end) in actions.iter().zip(&self.state.uav_positions).zip(&cfg.uav_ends) {
            let next = match a.direction.normalized() {
                Some(dir) => {
                    let speed = (cfg.v_max * (a.speed_raw + 1.0) / 2.0).clamp(0.0, cfg.v_max);
                    (p + dir * (speed * cfg.slot_duration_s)).clamp(cfg.area_lo(), cfg.area_hi())
                }
                None => p,
            };
            let progress = (p.distance(end) - next.distance(end)) / step_max;
            shaping.push(cfg.end_shaping_weight * progress);
            positions.push(next);
        }
        let epsilon1 = self.collision(&positions);
        self.state.uav_positions = positions.clone();
        Ok(UavMoveOutcome {
            positions,
            epsilon1,
            delta1_contrib: flag(epsilon1) * cfg.delta1,
            shaping,
        })
    }

    fn collision(&self, positions: &[Vec3]) -> bool {
        let d_min = self.config.d_min;
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if positions[i].distance(positions[j]) < d_min {
                    return true;
                }
            }
            if self.config.collision_includes_targets
                && self
                    .state
                    .target_positions
                    .iter()
                    .any(|t| positions[i].distance(*t) < d_min)
            {
                return true;
            }
        }
        false
    }

    /// Applies a surface update at a decision slot, after restricting it to the
    /// active scheme. Each angle increment is clamped to `±θ_max` and the
    /// center to the mobility box.
    pub fn apply_6dma_action(&mut self, action: SixDmaAction) -> Result<SixDmaOutcome> {
        self.check_running()?;
        let cfg = &self.config;
        if !self.state.slot.is_multiple_of(cfg.update_period) {
            return Err(Error::Protocol(format!(
                "surface update requested at slot {}, which is not a multiple of T_r = {}",
                self.state.slot, cfg.update_period
            )));
        }
        if self.last_decision_slot == Some(self.state.slot) {
            return Err(Error::Protocol(format!(
                "surface already updated in slot {}",
                self.state.slot
            )));
        }
        if !action.delta_angles.is_finite() || !action.new_center_raw.is_finite() {
            return Err(Error::InvalidArgument("surface action must be finite".into()));
        }
        let effective = apply_scheme_restriction(
            self.scheme,
            action,
            &self.state.pose,
            cfg.initial_center,
            cfg.circle_radius,
        );
        let t = cfg.theta_max();
        let d = effective.delta_angles;
        let delta = RotationAngles::new(d.theta_x.clamp(-t, t), d.theta_y.clamp(-t, t), d.theta_z.clamp(-t, t));
        let reach = Vec3::new(cfg.mobility_half_extent, cfg.mobility_half_extent, cfg.mobility_half_extent);
        let center = effective
            .new_center_raw
            .clamp(cfg.initial_center - reach, cfg.initial_center + reach);
        self.state.pose = SurfacePose::new(center, self.state.pose.angles + delta);
        self.last_decision_slot = Some(self.state.slot);
        let points: Vec<Vec3> = self
            .state
            .uav_positions
            .iter()
            .chain(&self.state.target_positions)
            .copied()
            .collect();
        let (ok, worst_margin) = half_space_ok(&self.state.pose, &self.layout, &points)?;
        Ok(SixDmaOutcome {
            pose: self.state.pose,
            epsilon2: !ok,
            worst_margin,
        })
    }

    /// Installs a precoder, projecting it onto the power budget; returns the
    /// unprojected power.
    pub fn set_precoder(&mut self, raw: &BeamformingMatrix) -> Result<f64> {
        if raw.antennas() != self.config.num_antennas || raw.streams() != self.config.num_uavs {
            return Err(Error::InvalidArgument(format!(
                "precoder must be {}x{}",
                self.config.num_antennas, self.config.num_uavs
            )));
        }
        self.state.precoder = project_power(raw, self.config.p_max_w)?;
        Ok(tx_power(raw))
    }

    /// UAV and target channels for the current state.
    pub fn channels(&self) -> Result<(Vec<ComplexVec>, Vec<ComplexVec>)> {
        let positions = global_antenna_positions(&self.state.pose, &self.layout)?;
        let center = self.state.pose.center;
        let lambda = self.config.wavelength;
        let uav = self
            .state
            .uav_positions
            .iter()
            .map(|&p| channel_vector(center, p, &positions, lambda))
            .collect::<Result<Vec<_>>>()?;
        let targets = self
            .state
            .target_positions
            .iter()
            .map(|&p| channel_vector(center, p, &positions, lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok((uav, targets))
    }

    /// Link metrics of the current state with the installed precoder.
    pub fn step_metrics(&self) -> Result<LinkMetrics> {
        let (hc, hs) = self.channels()?;
        let w = &self.state.precoder;
        let sinr_per_uav = isac::sinr(&hc, w, self.config.sigma_c_sq())?;
        let sum_rate = isac::sum_rate(&sinr_per_uav)?;
        let snr_per_target = isac::sensing_snr(&hs, w, self.config.sigma_s_sq())?;
        Ok(LinkMetrics {
            sinr_per_uav,
            sum_rate,
            snr_per_target,
            tx_power: tx_power(w),
        })
    }

    /// Mean angle (rad) between the surface normal and the directions from the
    /// surface center to each UAV.
    pub fn mean_pointing_angle(&self) -> Result<f64> {
        let n = surface_normal(&self.state.pose, &self.layout)?;
        let c = self.state.pose.center;
        let mut total = 0.0;
        for &p in &self.state.uav_positions {
            let u = (p - c)
                .normalized()
                .ok_or_else(|| Error::Singularity("UAV at the surface center".into()))?;
            total += n.dot(u).clamp(-1.0, 1.0).acos();
        }
        Ok(total / self.state.uav_positions.len() as f64)
    }

    /// One fast-layer slot: install the precoder from the beam action, move the
    /// UAVs, evaluate metrics and rewards, advance the slot counter.
    pub fn step(&mut self, uav_actions: &[UavAction], beam_action: &[f64]) -> Result<(StepOutcome, SlotRecord)> {
        self.check_running()?;
        let raw = precoder_from_action(
            beam_action,
            self.config.num_antennas,
            self.config.num_uavs,
            self.config.p_max_w,
        )?;
        let raw_power = self.set_precoder(&raw)?;
        let moved = self.apply_uav_actions(uav_actions)?;
        let metrics = self.step_metrics()?;
        let inputs = RewardInputs {
            epsilon1: moved.epsilon1,
            raw_power,
            shaping: moved.shaping,
        };
        let mut outcome = compute_rewards(&metrics, &inputs, &self.config, None);
        let mean_pointing_angle = self.mean_pointing_angle()?;
        let record = SlotRecord {
            slot: self.state.slot,
            uav_positions: self.state.uav_positions.clone(),
            pose: self.state.pose,
            raw_power,
            mean_pointing_angle,
            outcome: outcome.clone(),
        };
        self.state.slot += 1;
        outcome.done = self.is_done();
        let mut record = record;
        record.outcome.done = outcome.done;
        Ok((outcome, record))
    }

    /// Normalized observations for every agent.
    pub fn build_observations(&self) -> Result<Observations> {
        let cfg = &self.config;
        let ext = cfg.area_half_extent;
        let push_pos = |v: &mut Vec<f64>, p: Vec3| v.extend([p.x / ext, p.y / ext, p.z / ext]);
        let t = self.state.slot as f64 / cfg.num_slots as f64;
        let uav = self
            .state
            .uav_positions
            .iter()
            .zip(&cfg.uav_ends)
            .map(|(&p, &end)| {
                let mut o = Vec::with_capacity(UAV_OBS_DIM);
                push_pos(&mut o, p);
                push_pos(&mut o, cfg.bs_position);
                push_pos(&mut o, end);
                o.push(t);
                o
            })
            .collect();

        let (hc, hs) = self.channels()?;
        let scale = 4.0 * PI * cfg.channel_ref_distance / cfg.wavelength;
        let beam = hc
            .iter()
            .chain(&hs)
            .flatten()
            .flat_map(|h| [h.re * scale, h.im * scale])
            .collect();

        let mut sixdma = Vec::with_capacity(cfg.sixdma_obs_dim());
        push_pos(&mut sixdma, cfg.bs_position);
        for &p in &self.state.uav_positions {
            push_pos(&mut sixdma, p);
        }
        Ok(Observations { uav, beam, sixdma })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(config: ScenarioConfig) -> Environment {
        Environment::new(config, Scheme::Proposed, 0).unwrap()
    }

    fn single_link_config() -> ScenarioConfig {
        ScenarioConfig {
            num_uavs: 1,
            num_targets: 1,
            num_antennas: 1,
            uav_starts: vec![Vec3::new(30.0, 0.0, 100.0)],
            uav_ends: vec![Vec3::new(30.0, 100.0, 100.0)],
            targets: vec![Vec3::new(10.0, 0.0, 197.0)],
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn reset_defaults() {
        let e = env(ScenarioConfig::default());
        assert_eq!(e.state().pose.center, Vec3::new(0.0, 0.0, 200.0));
        assert_eq!(e.state().pose.angles, RotationAngles::ZERO);
        assert_eq!(e.state().slot, 0);
        assert_eq!(tx_power(&e.state().precoder), 0.0);
        assert_eq!(e.state().uav_positions, ScenarioConfig::default().uav_starts);
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = ScenarioConfig {
            start_jitter: 5.0,
            ..ScenarioConfig::desk_scale()
        };
        let mut a = Environment::new(cfg.clone(), Scheme::Proposed, 3).unwrap();
        let mut b = Environment::new(cfg, Scheme::Proposed, 3).unwrap();
        let oa = a.reset(42).unwrap();
        let ob = b.reset(42).unwrap();
        assert_eq!(a.state(), b.state());
        assert_eq!(oa, ob);
    }

    #[test]
    fn close_starts_are_a_config_error() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.uav_starts[1] = cfg.uav_starts[0] + Vec3::new(1.0, 0.0, 0.0);
        assert!(matches!(
            Environment::new(cfg, Scheme::Proposed, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_speed_displacement() {
        let mut e = env(ScenarioConfig::desk_scale());
        let start = e.state().uav_positions[0];
        let out = e
            .apply_uav_actions(&[
                UavAction { direction: Vec3::new(1.0, 0.0, 0.0), speed_raw: 1.0 },
                UavAction::hold(),
            ])
            .unwrap();
        assert_eq!(out.positions[0] - start, Vec3::new(40.0, 0.0, 0.0));
        assert_eq!(out.positions[1], ScenarioConfig::desk_scale().uav_starts[1]);
    }

    #[test]
    fn speed_is_clamped_to_v_max() {
        let mut e = env(ScenarioConfig::desk_scale());
        let start = e.state().uav_positions[0];
        let out = e
            .apply_uav_actions(&[
                UavAction { direction: Vec3::new(0.0, 3.0, 0.0), speed_raw: 7.0 },
                UavAction::hold(),
            ])
            .unwrap();
        assert_eq!(out.positions[0].distance(start), 40.0);
    }

    #[test]
    fn moves_stay_inside_the_area() {
        let mut e = env(ScenarioConfig::desk_scale());
        for _ in 0..10 {
            let out = e
                .apply_uav_actions(&[
                    UavAction { direction: Vec3::new(0.0, -1.0, 1.0), speed_raw: 1.0 },
                    UavAction { direction: Vec3::new(1.0, 1.0, -1.0), speed_raw: 1.0 },
                ])
                .unwrap();
            for p in out.positions {
                assert!(p.y >= -250.0 && p.x <= 250.0 && p.z >= 0.0 && p.z <= 150.0);
            }
        }
    }

    #[test]
    fn non_finite_uav_action_is_rejected() {
        let mut e = env(ScenarioConfig::desk_scale());
        let bad = UavAction { direction: Vec3::new(f64::NAN, 0.0, 0.0), speed_raw: 0.0 };
        assert!(matches!(
            e.apply_uav_actions(&[bad, UavAction::hold()]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn collision_flag_below_d_min() {
        let mut cfg = ScenarioConfig::desk_scale();
        cfg.uav_starts = vec![Vec3::new(25.0, 0.0, 100.0), Vec3::new(25.0, 40.0 + 2.9, 100.0)];
        let mut e = env(cfg);
        let out = e
            .apply_uav_actions(&[
                UavAction { direction: Vec3::new(0.0, 1.0, 0.0), speed_raw: 1.0 },
                UavAction::hold(),
            ])
            .unwrap();
        assert!((out.positions[0].distance(out.positions[1]) - 2.9).abs() < 1e-9);
        assert!(out.epsilon1);
        assert_eq!(out.delta1_contrib, 10.0);
    }

    #[test]
    fn rotation_delta_is_clamped() {
        let mut e = env(ScenarioConfig::default());
        let action = SixDmaAction {
            delta_angles: RotationAngles::from_degrees(20.0, 0.0, 0.0),
            new_center_raw: Vec3::new(0.0, 0.0, 200.0),
        };
        let out = e.apply_6dma_action(action).unwrap();
        assert!((out.pose.angles.theta_x - 10f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn zero_surface_action_keeps_pose() {
        let mut e = env(ScenarioConfig::default());
        let before = e.state().pose;
        let out = e.apply_6dma_action(SixDmaAction::stay(before.center)).unwrap();
        assert_eq!(out.pose, before);
        assert!(!out.epsilon2);
    }

    #[test]
    fn off_cadence_update_is_a_protocol_error() {
        let mut e = env(ScenarioConfig::default());
        e.step(&[UavAction::hold(); 4], &vec![0.0; 32]).unwrap();
        let err = e.apply_6dma_action(SixDmaAction::stay(Vec3::new(0.0, 0.0, 200.0)));
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn facing_away_sets_blockage_flag() {
        let mut e = env(ScenarioConfig::default());
        // Normal (1,0,0) turned by 180 degrees about z in 18 decisions of 10 degrees.
        let mut eps = false;
        for _ in 0..18 {
            while !e.is_decision_slot() {
                e.step(&[UavAction::hold(); 4], &vec![0.0; 32]).unwrap();
            }
            let c = e.state().pose.center;
            eps = e
                .apply_6dma_action(SixDmaAction {
                    delta_angles: RotationAngles::from_degrees(0.0, 0.0, 10.0),
                    new_center_raw: c,
                })
                .map(|o| o.epsilon2)
                .unwrap_or(eps);
            if e.slot() + 10 > 60 {
                break;
            }
        }
        assert!(eps);

        // Directly: rotate the pose to face -X.
        let mut e = env(ScenarioConfig::default());
        e.state.pose.angles = RotationAngles::new(0.0, 0.0, PI - 10f64.to_radians());
        let c = e.state().pose.center;
        let out = e
            .apply_6dma_action(SixDmaAction {
                delta_angles: RotationAngles::from_degrees(0.0, 0.0, 10.0),
                new_center_raw: c,
            })
            .unwrap();
        assert!(out.epsilon2);
        assert!(out.worst_margin < 0.0);
    }

    #[test]
    fn center_is_clamped_to_mobility_box() {
        let mut e = env(ScenarioConfig::default());
        let out = e
            .apply_6dma_action(SixDmaAction {
                delta_angles: RotationAngles::ZERO,
                new_center_raw: Vec3::new(100.0, -100.0, 0.0),
            })
            .unwrap();
        assert_eq!(out.pose.center, Vec3::new(5.0, -5.0, 195.0));
    }

    #[test]
    fn zero_precoder_gives_zero_metrics() {
        let e = env(ScenarioConfig::default());
        let m = e.step_metrics().unwrap();
        assert_eq!(m.sum_rate, 0.0);
        assert!(m.snr_per_target.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scalar_closed_form_sinr() {
        let cfg = single_link_config();
        let mut e = env(cfg.clone());
        let w = BeamformingMatrix::from_columns(vec![vec![Complex64::new(0.1, 0.1)]]).unwrap();
        e.set_precoder(&w).unwrap();
        let m = e.step_metrics().unwrap();
        let d = cfg.uav_starts[0].distance(cfg.initial_center);
        let amp = cfg.wavelength / (4.0 * PI * d);
        let expected = 0.02 * amp * amp / cfg.sigma_c_sq();
        assert!((m.sinr_per_uav[0] - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn doubling_distance_quarters_received_power() {
        let mut cfg = single_link_config();
        cfg.num_antennas = 4;
        let near = Vec3::new(30.0, 0.0, 160.0);
        let dir = near - cfg.initial_center;
        let far = cfg.initial_center + dir * 2.0;
        let mut e = env(cfg.clone());
        let power = |e: &mut Environment, p: Vec3| {
            e.state.uav_positions = vec![p];
            let (hc, _) = e.channels().unwrap();
            // Matched beam fixed from the near position.
            hc
        };
        let h_near = power(&mut e, near);
        let w = BeamformingMatrix::from_columns(vec![h_near[0].iter().map(|h| h / h.norm() * 0.1).collect()]).unwrap();
        let gain = |h: &ComplexVec| {
            h.iter().zip(w.column(0)).map(|(h, w)| w.conj() * h).sum::<Complex64>().norm_sqr()
        };
        let h_far = power(&mut e, far);
        // The array phase pattern depends only on direction, which is shared.
        assert!((gain(&h_near[0]) / gain(&h_far[0]) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn collision_reward_ignores_rate() {
        let cfg = ScenarioConfig { end_shaping_weight: 0.0, ..ScenarioConfig::desk_scale() };
        let metrics = LinkMetrics {
            sinr_per_uav: vec![3.0, 7.0],
            sum_rate: 5.0,
            snr_per_target: vec![2.0, 2.0],
            tx_power: 0.04,
        };
        let inputs = RewardInputs { epsilon1: true, raw_power: 0.04, shaping: vec![0.0, 0.0] };
        let out = compute_rewards(&metrics, &inputs, &cfg, None);
        assert_eq!(out.rewards_uav, vec![-10.0, -10.0]);
    }

    #[test]
    fn sensing_penalty_threshold() {
        let cfg = ScenarioConfig::desk_scale();
        let g = cfg.gamma_min();
        let mut metrics = LinkMetrics {
            sinr_per_uav: vec![1.0, 1.0],
            sum_rate: 2.0,
            snr_per_target: vec![g, g],
            tx_power: 0.01,
        };
        let inputs = RewardInputs { epsilon1: false, raw_power: 0.01, shaping: vec![] };
        assert_eq!(compute_rewards(&metrics, &inputs, &cfg, None).penalties.delta3, 0.0);
        metrics.snr_per_target = vec![g * 0.5, g * 0.5];
        assert!(compute_rewards(&metrics, &inputs, &cfg, None).penalties.delta3 > 0.0);
    }

    #[test]
    fn pointing_bonus_examples() {
        let cfg = ScenarioConfig { num_uavs: 1, ..ScenarioConfig::default() };
        let w = WindowStats { rates: vec![2.0; 10], mean_angles: vec![0.0; 10], epsilon2: false };
        assert_eq!(pointing_bonus(&w, 1), 1.0);
        let (r, d5) = sixdma_reward(&w, &cfg);
        assert_eq!((r, d5), (3.0, 1.0));
        let blocked = WindowStats { epsilon2: true, ..w.clone() };
        assert_eq!(sixdma_reward(&blocked, &cfg).0, -10.0 + 1.0);
        let sum_cfg = ScenarioConfig { window_aggregate: WindowAggregate::Sum, ..cfg };
        assert_eq!(sixdma_reward(&w, &sum_cfg).0, 21.0);
    }

    #[test]
    fn observation_dimensions() {
        let e = env(ScenarioConfig::default());
        let o = e.build_observations().unwrap();
        assert_eq!(o.beam.len(), 56);
        assert!(o.uav.iter().all(|u| u.len() == 10));
        assert_eq!(o.sixdma.len(), 15);
        assert_eq!(o.uav[0][9], 0.0);
    }

    #[test]
    fn final_slot_time_feature_is_one() {
        let mut e = env(ScenarioConfig::desk_scale());
        for _ in 0..20 {
            e.step(&[UavAction::hold(), UavAction::hold()], &[0.0; 16]).unwrap();
        }
        assert!(e.is_done());
        assert_eq!(e.build_observations().unwrap().uav[0][9], 1.0);
        assert!(e.step(&[UavAction::hold(), UavAction::hold()], &[0.0; 16]).is_err());
    }

    #[test]
    fn scheme_restrictions() {
        let pose = SurfacePose::new(Vec3::new(0.0, 0.0, 200.0), RotationAngles::ZERO);
        let proposed = SixDmaAction {
            delta_angles: RotationAngles::from_degrees(5.0, -3.0, 2.0),
            new_center_raw: Vec3::new(0.7, 0.0, 200.5),
        };
        let init = pose.center;
        assert_eq!(apply_scheme_restriction(Scheme::Proposed, proposed, &pose, init, 1.0), proposed);
        assert_eq!(apply_scheme_restriction(Scheme::IndependentTd3, proposed, &pose, init, 1.0), proposed);
        let s3 = apply_scheme_restriction(Scheme::RotationOnly, proposed, &pose, init, 1.0);
        assert_eq!(s3.delta_angles, proposed.delta_angles);
        assert_eq!(s3.new_center_raw, pose.center);
        let s4 = apply_scheme_restriction(Scheme::CircularOnly, proposed, &pose, init, 1.0);
        assert_eq!(s4.delta_angles, RotationAngles::ZERO);
        assert_eq!(s4.new_center_raw, Vec3::new(1.0, 0.0, 200.0));
        let s5 = apply_scheme_restriction(Scheme::Fixed, proposed, &pose, init, 1.0);
        assert_eq!(s5, SixDmaAction::stay(pose.center));
        assert!(Scheme::from_id(6).is_err());
    }

    #[test]
    fn fixed_scheme_keeps_initial_pose_all_episode() {
        let cfg = ScenarioConfig::desk_scale();
        let mut e = Environment::new(cfg.clone(), Scheme::Fixed, 0).unwrap();
        let initial = e.state().pose;
        while !e.is_done() {
            if e.is_decision_slot() {
                let a = SixDmaAction::from_policy(&[1.0, -1.0, 1.0, 1.0, 1.0, -1.0], e.state().pose.center, &cfg).unwrap();
                e.apply_6dma_action(a).unwrap();
            }
            e.step(&[UavAction::hold(), UavAction::hold()], &[1.0; 16]).unwrap();
            assert_eq!(e.state().pose, initial);
        }
    }

    #[test]
    fn saturated_beam_action_meets_budget() {
        let w = precoder_from_action(&vec![1.0; 32], 4, 4, 0.04).unwrap();
        assert!((tx_power(&w) - 0.04).abs() < 1e-15);
        assert!(precoder_from_action(&[1.0; 3], 4, 4, 0.04).is_err());
    }

    #[test]
    fn episode_log_round_trips() {
        let mut e = env(ScenarioConfig::desk_scale());
        let mut logger = EpisodeLogger::new(Vec::new());
        let (_, rec) = e
            .step(&[UavAction::hold(), UavAction { direction: Vec3::new(-1.0, 0.0, 0.3), speed_raw: 0.2 }], &[0.4; 16])
            .unwrap();
        logger.log(&rec).unwrap();
        let bytes = logger.into_inner();
        let parsed: SlotRecord = serde_json::from_slice(bytes.trim_ascii_end()).unwrap();
        assert_eq!(parsed, rec);
    }

    #[test]
    fn config_json_round_trips_with_defaults() {
        let cfg: ScenarioConfig = serde_json::from_str(r#"{"num_slots": 30}"#).unwrap();
        assert_eq!(cfg.num_slots, 30);
        assert_eq!(cfg.p_max_w, 0.04);
        let back: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
