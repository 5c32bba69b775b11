//! Point-mass lunar lander with funnel-shaped interventions.
//!
//! Coordinates put the pad centre at the origin with the pad surface at
//! `y = 0`. `alpha` is the body angle (counter-clockwise positive) and the main
//! engine pushes along the body axis. Actions are `0 = nop, 1 = main engine,
//! 2 = left side engine, 3 = right side engine`. Terrain outside the pad is a
//! seeded piecewise-linear profile drawn at reset.
//!
//! Interventions are two-slope funnels. The trigger region is a thin band
//! over the pad (tested against vertical speed and tilt) plus the area under a
//! line of steepness `a` on either side. A rescue stops the craft, moves it
//! onto a steeper line of steepness `a_prime`, and levels it.

use std::io::Write;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::TabularPolicy;
use crate::rng::{rng_from_seed, Rng};
use crate::sim::{StepOutcome, StudentEnv};
use crate::teacher::TeachingSetting;

pub const NOP: usize = 0;
pub const MAIN: usize = 1;
pub const LEFT_ENGINE: usize = 2;
pub const RIGHT_ENGINE: usize = 3;
pub const N_ACTIONS: usize = 4;

/// Half width of the landing pad.
pub const PAD_HALF_WIDTH: f64 = 0.2;
/// Height drop applied when a rescue happens over the pad.
pub const PAD_RESCUE_DROP: f64 = 0.1;
/// Map edge: leaving `|x| <= MAP_HALF_WIDTH` is a failure.
pub const MAP_HALF_WIDTH: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LanderError {
    #[error("funnel needs 0 < a < a_prime, got a = {a}, a_prime = {a_prime}")]
    InvalidFunnel { a: f64, a_prime: f64 },
    #[error("rescue line is parallel to the funnel wall")]
    GeometryDegenerate,
    #[error("invalid lander config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanderState {
    pub x: f64,
    pub y: f64,
    pub x_dot: f64,
    pub y_dot: f64,
    pub alpha: f64,
    pub alpha_dot: f64,
    pub left_contact: bool,
    pub right_contact: bool,
}

impl LanderState {
    pub fn at(x: f64, y: f64) -> Self {
        Self { x, y, ..Self::default() }
    }
}

/// How the band over the pad compares speed and tilt with the height line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadTrigger {
    /// Signed test: fires when `y_dot` or `alpha` reach the line.
    #[default]
    Signed,
    /// Magnitude test: fires when `|y_dot|` or `|alpha|` reach the line.
    Magnitude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelIntervention {
    pub name: String,
    /// Steepness of the trigger walls.
    pub steepness_a: f64,
    /// Steepness of the line rescued states are placed on.
    pub reset_steepness_a_prime: f64,
    /// Tolerance on expected trigger visits.
    pub tau: f64,
}

impl FunnelIntervention {
    pub fn narrow(tau: f64) -> Self {
        Self { name: "Narrow".into(), steepness_a: 20.0, reset_steepness_a_prime: 100.0, tau }
    }

    pub fn wide(tau: f64) -> Self {
        Self { name: "Wide".into(), steepness_a: 0.5, reset_steepness_a_prime: 1.0, tau }
    }

    pub fn validate(&self) -> Result<(), LanderError> {
        check_funnel(self.steepness_a, self.reset_steepness_a_prime)?;
        if !(self.tau >= 0.0) {
            return Err(LanderError::Config(format!("tau = {}", self.tau)));
        }
        Ok(())
    }
}

fn check_funnel(a: f64, a_prime: f64) -> Result<(), LanderError> {
    if !(a > 0.0 && a_prime > a && a_prime.is_finite()) {
        return Err(LanderError::InvalidFunnel { a, a_prime });
    }
    Ok(())
}

/// Whether `state` lies in the trigger region of a funnel with steepness `a`.
pub fn trigger(state: &LanderState, a: f64, form: PadTrigger) -> bool {
    let LanderState { x, y, .. } = *state;
    if x < -PAD_HALF_WIDTH {
        y <= a * (-PAD_HALF_WIDTH - x)
    } else if x > PAD_HALF_WIDTH {
        y <= a * (x - PAD_HALF_WIDTH)
    } else {
        let (speed, tilt) = match form {
            PadTrigger::Signed => (state.y_dot, state.alpha),
            PadTrigger::Magnitude => (state.y_dot.abs(), state.alpha.abs()),
        };
        speed >= 0.3 + 10.0 * y || tilt >= 0.5 + 10.0 * y
    }
}

/// Rescued state for a funnel with trigger steepness `a` and reset steepness
/// `a_prime`.
///
/// Beside the pad the craft moves diagonally up and toward the pad until it
/// meets the reset line; over the pad it drops by
/// [`PAD_RESCUE_DROP`], never below the pad. Velocities and tilt are zeroed.
pub fn reset_rescue(state: &LanderState, a: f64, a_prime: f64) -> Result<LanderState, LanderError> {
    check_funnel(a, a_prime)?;
    if (a_prime + 1.0).abs() < f64::EPSILON {
        return Err(LanderError::GeometryDegenerate);
    }
    let (x0, y0) = (state.x, state.y);
    let (x, y) = if x0 > PAD_HALF_WIDTH {
        let x = (x0 + y0 + PAD_HALF_WIDTH * a_prime) / (a_prime + 1.0);
        (x, a_prime * (x - PAD_HALF_WIDTH))
    } else if x0 < -PAD_HALF_WIDTH {
        let x = (x0 - y0 - PAD_HALF_WIDTH * a_prime) / (a_prime + 1.0);
        (x, a_prime * (-PAD_HALF_WIDTH - x))
    } else {
        (x0, (y0 - PAD_RESCUE_DROP).max(0.0))
    };
    Ok(LanderState { x, y, ..LanderState::default() })
}

/// The two shipped funnels, narrow first.
pub fn build_lander_interventions(tau: f64) -> Vec<FunnelIntervention> {
    vec![FunnelIntervention::narrow(tau), FunnelIntervention::wide(tau)]
}

/// Tile coding of the continuous state for the tabular student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Discretization {
    pub x_bins: usize,
    pub y_bins: usize,
    pub x_dot_bins: usize,
    pub y_dot_bins: usize,
    pub alpha_bins: usize,
    pub y_max: f64,
    pub speed_max: f64,
    pub alpha_max: f64,
}

impl Default for Discretization {
    fn default() -> Self {
        Self {
            x_bins: 10,
            y_bins: 8,
            x_dot_bins: 5,
            y_dot_bins: 6,
            alpha_bins: 5,
            y_max: 1.6,
            speed_max: 1.2,
            alpha_max: 0.6,
        }
    }
}

fn bin(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    let f = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((f * n as f64) as usize).min(n - 1)
}

impl Discretization {
    pub fn n_tiles(&self) -> usize {
        self.x_bins * self.y_bins * self.x_dot_bins * self.y_dot_bins * self.alpha_bins
    }

    pub fn tile(&self, s: &LanderState) -> usize {
        let parts = [
            (bin(s.x, -MAP_HALF_WIDTH, MAP_HALF_WIDTH, self.x_bins), self.x_bins),
            (bin(s.y, 0.0, self.y_max, self.y_bins), self.y_bins),
            (bin(s.x_dot, -self.speed_max, self.speed_max, self.x_dot_bins), self.x_dot_bins),
            (bin(s.y_dot, -self.speed_max, self.speed_max, self.y_dot_bins), self.y_dot_bins),
            (bin(s.alpha, -self.alpha_max, self.alpha_max, self.alpha_bins), self.alpha_bins),
        ];
        parts.iter().fold(0, |acc, &(i, n)| acc * n + i)
    }

    fn validate(&self) -> Result<(), LanderError> {
        let bins = [self.x_bins, self.y_bins, self.x_dot_bins, self.y_dot_bins, self.alpha_bins];
        if bins.contains(&0) {
            return Err(LanderError::Config("every discretization axis needs a bin".into()));
        }
        if !(self.y_max > 0.0 && self.speed_max > 0.0 && self.alpha_max > 0.0) {
            return Err(LanderError::Config("discretization ranges must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanderConfig {
    pub dt: f64,
    pub gravity: f64,
    /// Main engine acceleration along the body axis.
    pub main_thrust: f64,
    /// Lateral acceleration from a side engine.
    pub side_thrust: f64,
    /// Angular acceleration from a side engine.
    pub side_torque: f64,
    /// Fraction of angular velocity lost per step.
    pub angular_damping: f64,
    pub start_height: f64,
    /// Initial velocity components are drawn from `[-push, push]` (downward only for `y`).
    pub initial_push: f64,
    pub terrain_max_height: f64,
    /// Horizontal distance from the body centre to each leg.
    pub leg_offset: f64,
    pub landing_speed: f64,
    pub landing_tilt: f64,
    pub landing_reward: f64,
    pub timeout_reward: f64,
    pub main_cost: f64,
    pub side_cost: f64,
    /// Shaping weight on distance to the pad centre.
    pub shaping_distance: f64,
    /// Shaping weight per leg in contact.
    pub shaping_leg: f64,
    pub train_timeout: usize,
    pub deploy_timeout: usize,
    /// Failure tolerance of the original problem.
    pub kappa: f64,
    pub tau: f64,
    pub pad_trigger: PadTrigger,
    pub discretization: Discretization,
}

impl Default for LanderConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            gravity: 0.5,
            main_thrust: 1.2,
            side_thrust: 0.2,
            side_torque: 2.0,
            angular_damping: 0.1,
            start_height: 1.4,
            initial_push: 0.3,
            terrain_max_height: 0.25,
            leg_offset: 0.04,
            landing_speed: 0.3,
            landing_tilt: 0.3,
            landing_reward: 100.0,
            timeout_reward: -100.0,
            main_cost: 0.3,
            side_cost: 0.03,
            shaping_distance: 100.0,
            shaping_leg: 10.0,
            train_timeout: 500,
            deploy_timeout: 2000,
            kappa: 0.1,
            tau: 0.1,
            pad_trigger: PadTrigger::Signed,
            discretization: Discretization::default(),
        }
    }
}

impl LanderConfig {
    pub fn validate(&self) -> Result<(), LanderError> {
        let positive = [
            ("dt", self.dt),
            ("gravity", self.gravity),
            ("start_height", self.start_height),
            ("landing_speed", self.landing_speed),
            ("landing_tilt", self.landing_tilt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LanderError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("main_thrust", self.main_thrust),
            ("side_thrust", self.side_thrust),
            ("side_torque", self.side_torque),
            ("initial_push", self.initial_push),
            ("terrain_max_height", self.terrain_max_height),
            ("leg_offset", self.leg_offset),
            ("main_cost", self.main_cost),
            ("side_cost", self.side_cost),
            ("kappa", self.kappa),
            ("tau", self.tau),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LanderError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.angular_damping) {
            return Err(LanderError::Config(format!("angular_damping = {}", self.angular_damping)));
        }
        if self.train_timeout == 0 || self.deploy_timeout == 0 {
            return Err(LanderError::Config("timeouts must be positive".into()));
        }
        self.discretization.validate()
    }

    /// Largest absolute one-step reward, used for the teacher's failure penalty.
    pub fn r_max(&self) -> f64 {
        self.landing_reward.abs().max(self.timeout_reward.abs())
    }

    /// Shaping potential: closer to the pad centre and more legs down is better.
    pub fn potential(&self, s: &LanderState) -> f64 {
        let legs = f64::from(u8::from(s.left_contact) + u8::from(s.right_contact));
        -self.shaping_distance * s.x.hypot(s.y) + self.shaping_leg * legs
    }
}

/// Ground profile: flat pad, linear segments between seeded knots elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    /// Knot heights at `|x| = 0.4, 0.6, 0.8, 1.0`, left side then right side.
    left: [f64; 4],
    right: [f64; 4],
}

const KNOT_X: [f64; 5] = [PAD_HALF_WIDTH, 0.4, 0.6, 0.8, 1.0];

impl Terrain {
    pub fn flat() -> Self {
        Self { left: [0.0; 4], right: [0.0; 4] }
    }

    pub fn sample(max_height: f64, rng: &mut Rng) -> Self {
        let mut draw = || std::array::from_fn(|_| max_height * rng.random::<f64>());
        let left = draw();
        let right = draw();
        Self { left, right }
    }

    pub fn height(&self, x: f64) -> f64 {
        let d = x.abs();
        if d <= PAD_HALF_WIDTH {
            return 0.0;
        }
        let side = if x < 0.0 { &self.left } else { &self.right };
        let h = |i: usize| if i == 0 { 0.0 } else { side[i - 1] };
        for i in 0..4 {
            if d <= KNOT_X[i + 1] {
                let f = (d - KNOT_X[i]) / (KNOT_X[i + 1] - KNOT_X[i]);
                return h(i) + f * (h(i + 1) - h(i));
            }
        }
        side[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Landed,
    Crashed,
    OutOfMap,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Running => "running",
            Outcome::Landed => "landed",
            Outcome::Crashed => "crashed",
            Outcome::OutOfMap => "out_of_map",
            Outcome::Timeout => "timeout",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, Outcome::Crashed | Outcome::OutOfMap)
    }
}

fn legs_touch(s: &LanderState, config: &LanderConfig, terrain: &Terrain) -> (bool, bool) {
    let (sin, cos) = s.alpha.sin_cos();
    let d = config.leg_offset;
    let left = (s.x - d * cos, s.y - d * sin);
    let right = (s.x + d * cos, s.y + d * sin);
    (left.1 <= terrain.height(left.0), right.1 <= terrain.height(right.0))
}

/// One physics step with symplectic Euler. Returns the next state, the step
/// reward (shaping difference, engine cost and terminal reward) and the
/// outcome. Timeouts are left to the caller.
pub fn step_lander(state: &LanderState, action: usize, config: &LanderConfig, terrain: &Terrain) -> (LanderState, f64, Outcome) {
    let (sin, cos) = state.alpha.sin_cos();
    let (ax, ay, torque, cost) = match action {
        MAIN => (-sin * config.main_thrust, cos * config.main_thrust, 0.0, config.main_cost),
        LEFT_ENGINE => (config.side_thrust, 0.0, -config.side_torque, config.side_cost),
        RIGHT_ENGINE => (-config.side_thrust, 0.0, config.side_torque, config.side_cost),
        _ => (0.0, 0.0, 0.0, 0.0),
    };
    let dt = config.dt;
    let mut s = *state;
    s.x_dot += ax * dt;
    s.y_dot += (ay - config.gravity) * dt;
    s.alpha_dot = (s.alpha_dot + torque * dt) * (1.0 - config.angular_damping);
    s.x += s.x_dot * dt;
    s.y += s.y_dot * dt;
    s.alpha += s.alpha_dot * dt;
    (s.left_contact, s.right_contact) = legs_touch(&s, config, terrain);

    let outcome = if s.x.abs() > MAP_HALF_WIDTH {
        Outcome::OutOfMap
    } else if s.y <= terrain.height(s.x) {
        let soft = s.x.abs() <= PAD_HALF_WIDTH
            && s.y_dot.abs() <= config.landing_speed
            && s.x_dot.abs() <= config.landing_speed
            && s.alpha.abs() <= config.landing_tilt;
        if soft {
            s.left_contact = true;
            s.right_contact = true;
            Outcome::Landed
        } else {
            Outcome::Crashed
        }
    } else {
        Outcome::Running
    };
    let terminal = if outcome == Outcome::Landed { config.landing_reward } else { 0.0 };
    let reward = config.potential(&s) - config.potential(state) - cost + terminal;
    (s, reward, outcome)
}

/// Episode state for [`LanderEnv`].
#[derive(Clone, Debug)]
pub struct LanderEpisode {
    pub state: LanderState,
    pub terrain: Terrain,
    pub t: usize,
    pub outcome: Outcome,
    /// Set when the last step entered the trigger region.
    pub pending_rescue: bool,
}

/// The lander as a tabular student environment, with or without a funnel.
#[derive(Clone, Debug)]
pub struct LanderEnv {
    config: Arc<LanderConfig>,
    funnel: Option<FunnelIntervention>,
    timeout: usize,
}

impl LanderEnv {
    pub fn new(config: Arc<LanderConfig>, funnel: Option<FunnelIntervention>, timeout: usize) -> Result<Self, LanderError> {
        config.validate()?;
        if let Some(f) = &funnel {
            f.validate()?;
        }
        if timeout == 0 {
            return Err(LanderError::Config("timeout must be positive".into()));
        }
        Ok(Self { config, funnel, timeout })
    }

    pub fn config(&self) -> &LanderConfig {
        &self.config
    }

    pub fn funnel(&self) -> Option<&FunnelIntervention> {
        self.funnel.as_ref()
    }

    pub fn timeout(&self) -> usize {
        self.timeout
    }

    fn triggered(&self, s: &LanderState) -> bool {
        self.funnel
            .as_ref()
            .is_some_and(|f| trigger(s, f.steepness_a, self.config.pad_trigger))
    }

    /// Fresh episode with seeded terrain and initial push.
    pub fn start(&self, rng: &mut Rng) -> LanderEpisode {
        let c = &self.config;
        let terrain = Terrain::sample(c.terrain_max_height, rng);
        let push = c.initial_push;
        let x_dot = push * (2.0 * rng.random::<f64>() - 1.0);
        let y_dot = -push * rng.random::<f64>();
        let state = LanderState { y: c.start_height, x_dot, y_dot, ..LanderState::default() };
        LanderEpisode { state, terrain, t: 0, outcome: Outcome::Running, pending_rescue: false }
    }
}

impl StudentEnv for LanderEnv {
    type Episode = LanderEpisode;

    fn n_obs(&self) -> usize {
        self.config.discretization.n_tiles()
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn tolerances(&self) -> Vec<f64> {
        match &self.funnel {
            Some(f) => vec![0.0, f.tau],
            None => vec![self.config.kappa, 0.0],
        }
    }

    fn reset(&self, rng: &mut Rng) -> (LanderEpisode, usize, u32) {
        let mut ep = self.start(rng);
        ep.pending_rescue = self.triggered(&ep.state);
        let obs = self.config.discretization.tile(&ep.state);
        let hits = u32::from(ep.pending_rescue) << 1;
        (ep, obs, hits)
    }

    fn step(&self, ep: &mut LanderEpisode, action: usize, _rng: &mut Rng) -> StepOutcome {
        let overridden = ep.pending_rescue;
        let (next, mut reward, mut outcome) = match (&self.funnel, overridden) {
            (Some(f), true) => {
                // Validated at construction, so the rescue cannot fail.
                let s = reset_rescue(&ep.state, f.steepness_a, f.reset_steepness_a_prime)
                    .expect("funnel validated at construction");
                (s, 0.0, Outcome::Running)
            }
            _ => step_lander(&ep.state, action, &self.config, &ep.terrain),
        };
        ep.state = next;
        ep.t += 1;
        if outcome == Outcome::Running && ep.t >= self.timeout {
            outcome = Outcome::Timeout;
            reward += self.config.timeout_reward;
        }
        ep.outcome = outcome;
        let failure = outcome.is_failure();
        ep.pending_rescue = outcome == Outcome::Running && self.triggered(&next);
        StepOutcome {
            obs: self.config.discretization.tile(&next),
            reward,
            hits: u32::from(failure) | (u32::from(ep.pending_rescue) << 1),
            done: outcome != Outcome::Running,
            failure,
            success: outcome == Outcome::Landed,
            overridden,
        }
    }

    fn overrides_action(&self, ep: &LanderEpisode) -> bool {
        ep.pending_rescue
    }
}

/// Lander teaching setting: the funnel library, the original problem with the
/// training timeout, and the original problem with the deployment timeout.
#[derive(Clone, Debug)]
pub struct LanderSetting {
    library: Vec<LanderEnv>,
    original: LanderEnv,
    deployment: LanderEnv,
}

impl LanderSetting {
    pub fn new(config: LanderConfig, funnels: Vec<FunnelIntervention>) -> Result<Self, LanderError> {
        let config = Arc::new(config);
        let library = funnels
            .into_iter()
            .map(|f| LanderEnv::new(config.clone(), Some(f), config.train_timeout))
            .collect::<Result<Vec<_>, _>>()?;
        let original = LanderEnv::new(config.clone(), None, config.train_timeout)?;
        let deployment = LanderEnv::new(config.clone(), None, config.deploy_timeout)?;
        Ok(Self { library, original, deployment })
    }

    /// The shipped Narrow and Wide funnels.
    pub fn standard(config: LanderConfig) -> Result<Self, LanderError> {
        let funnels = build_lander_interventions(config.tau);
        Self::new(config, funnels)
    }

    pub fn library(&self) -> &[LanderEnv] {
        &self.library
    }
}

impl TeachingSetting for LanderSetting {
    type Env = LanderEnv;

    fn n_interventions(&self) -> usize {
        self.library.len()
    }

    fn intervention_name(&self, id: usize) -> String {
        self.library[id].funnel().map_or_else(String::new, |f| f.name.clone())
    }

    fn training_env(&self, id: usize) -> &LanderEnv {
        &self.library[id]
    }

    fn original_env(&self) -> &LanderEnv {
        &self.original
    }

    fn deployment_env(&self) -> &LanderEnv {
        &self.deployment
    }
}

/// One finished episode for the episode CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub outcome: Outcome,
    pub ret: f64,
    pub triggers: usize,
}

/// Runs `n` episodes of `policy` and records one row per episode.
pub fn log_episodes(env: &LanderEnv, policy: &TabularPolicy, n: usize, seed: u64) -> Vec<EpisodeLog> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|episode| {
            let (mut ep, mut obs, hits) = env.reset(&mut rng);
            let mut triggers = usize::from(hits & 2 != 0);
            let mut ret = 0.0;
            loop {
                let action = if env.overrides_action(&ep) { NOP } else { policy.sample(obs, &mut rng) };
                let o = env.step(&mut ep, action, &mut rng);
                ret += o.reward;
                triggers += usize::from(o.hits & 2 != 0);
                obs = o.obs;
                if o.done {
                    break;
                }
            }
            EpisodeLog { episode, outcome: ep.outcome, ret, triggers }
        })
        .collect()
}

/// Writes `episode,outcome,return,triggers` rows.
pub fn write_episode_csv<W: Write>(out: W, rows: &[EpisodeLog]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "outcome", "return", "triggers"])?;
    for r in rows {
        w.write_record([r.episode.to_string(), r.outcome.as_str().to_string(), format!("{:.6}", r.ret), r.triggers.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
