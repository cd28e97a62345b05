//! Kinematic stand-in for the chopstick robot.
//!
//! The arm is modeled as rate-limited end-effector pose tracking at 100 Hz.
//! Each episode draws a constant calibration bias: the physical tip settles
//! at `command + bias`, while the robot's own (kinematic-model) estimate of
//! its pose, which is what policies observe, stays at `physical - bias`.
//! Grasping is a tolerance-sphere snap evaluated on the physical tip.

mod demos;
mod eval;
mod expert;

pub use demos::{generate_demos, replay, replay_all, ReplaySummary};
pub use eval::{cell_center, evaluate_grid, rollout, EpisodeRecord, EvalReport, RolloutOptions};
pub use expert::{ExpertPolicy, ScriptedExpert};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Action, State, RATE_HZ};
use crate::error::{Error, Result};
use crate::geometry::{self, add3, dist3, norm3, scale3, sub3, FrameTag, Pose, Quat, Vec3, OPENING_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    /// 1 cm cube.
    Cube,
    /// 20 mm ball.
    Ball20,
    /// 14 mm ball.
    Ball14,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 3] = [ObjectKind::Cube, ObjectKind::Ball20, ObjectKind::Ball14];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectKind::Cube => "cube",
            ObjectKind::Ball20 => "ball20",
            ObjectKind::Ball14 => "ball14",
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            ObjectKind::Cube => Shape::Cube,
            _ => Shape::Ball,
        }
    }

    /// Edge length or diameter in meters.
    pub fn size(&self) -> f64 {
        match self {
            ObjectKind::Cube => 0.010,
            ObjectKind::Ball20 => 0.020,
            ObjectKind::Ball14 => 0.014,
        }
    }

    /// Extra capture distance beyond the object's half size. Flat cube faces
    /// are forgiving; the small ball is the tightest target.
    pub fn default_grasp_tolerance(&self) -> f64 {
        match self {
            ObjectKind::Cube => 0.0065,
            ObjectKind::Ball20 => 0.0012,
            ObjectKind::Ball14 => 0.0010,
        }
    }
}

impl std::str::FromStr for ObjectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cube" => Ok(ObjectKind::Cube),
            "ball20" => Ok(ObjectKind::Ball20),
            "ball14" => Ok(ObjectKind::Ball14),
            other => Err(Error::Usage(format!("unknown object `{other}` (expected cube|ball20|ball14)"))),
        }
    }
}

impl std::fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Cube,
    Ball,
}

/// Axis-aligned box; the `x`/`y` extent is the square workstation plate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: Vec3,
    pub max: Vec3,
}

impl Workspace {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub object: ObjectKind,
    pub workspace: Workspace,
    pub rate_hz: f64,
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
    pub max_opening_speed: f64,
    /// Fraction of the remaining position error the arm closes per step.
    pub tracking_gain: f64,
    /// Per-step Gaussian noise on the tracked tip position (m).
    pub tracking_noise_std: f64,
    /// Per-episode calibration bias norm is drawn uniformly from this range (m).
    pub calibration_bias_min: f64,
    pub calibration_bias_max: f64,
    pub grasp_tolerance: f64,
    pub close_threshold: f64,
    pub lift_height: f64,
    pub hold_duration: f64,
    pub time_limit: f64,
    pub home_pose: Pose,
    /// Uniform jitter (m) applied to the home position on reset.
    pub home_jitter: f64,
    /// Std (m) of the scripted expert's hand tremor while demonstrating.
    pub expert_dither: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::for_object(ObjectKind::Cube)
    }
}

impl SimConfig {
    pub fn for_object(object: ObjectKind) -> SimConfig {
        SimConfig {
            object,
            workspace: Workspace {
                min: [0.20, -0.10, 0.0],
                max: [0.40, 0.10, 0.25],
            },
            rate_hz: RATE_HZ,
            max_linear_speed: 0.25,
            max_angular_speed: 2.0,
            max_opening_speed: 2.0,
            tracking_gain: 0.2,
            tracking_noise_std: 0.0002,
            calibration_bias_min: 0.001,
            calibration_bias_max: 0.006,
            grasp_tolerance: object.default_grasp_tolerance(),
            close_threshold: 0.15,
            lift_height: 0.03,
            hold_duration: 1.0,
            time_limit: 12.0,
            home_pose: Pose {
                position: [0.16, 0.0, 0.12],
                orientation: Quat::from_yaw_tilt(0.0, 0.35),
                opening: 0.6,
            },
            home_jitter: 0.01,
            expert_dither: 0.0003,
            seed: 0,
        }
    }

    /// No tracking noise, calibration bias, home jitter or expert tremor.
    pub fn noiseless(object: ObjectKind) -> SimConfig {
        SimConfig {
            tracking_noise_std: 0.0,
            calibration_bias_min: 0.0,
            calibration_bias_max: 0.0,
            home_jitter: 0.0,
            expert_dither: 0.0,
            ..SimConfig::for_object(object)
        }
    }

    pub fn with_seed(&self, seed: u64) -> SimConfig {
        SimConfig { seed, ..self.clone() }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn max_steps(&self) -> usize {
        (self.time_limit * self.rate_hz).round() as usize
    }

    pub fn hold_steps(&self) -> usize {
        (self.hold_duration * self.rate_hz).round() as usize
    }

    /// Resting position of the object's center at plate coordinates `(x, y)`.
    pub fn resting_position(&self, x: f64, y: f64) -> Vec3 {
        [x, y, self.workspace.min[2] + self.object.size() / 2.0]
    }

    /// Tip-to-center distance that still produces a grasp.
    pub fn capture_radius(&self) -> f64 {
        self.grasp_tolerance + self.object.size() / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_linear_speed", self.max_linear_speed),
            ("max_angular_speed", self.max_angular_speed),
            ("max_opening_speed", self.max_opening_speed),
            ("tracking_gain", self.tracking_gain),
            ("grasp_tolerance", self.grasp_tolerance),
            ("close_threshold", self.close_threshold),
            ("lift_height", self.lift_height),
            ("hold_duration", self.hold_duration),
            ("time_limit", self.time_limit),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("tracking_noise_std", self.tracking_noise_std),
            ("calibration_bias_min", self.calibration_bias_min),
            ("home_jitter", self.home_jitter),
            ("expert_dither", self.expert_dither),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.calibration_bias_max < self.calibration_bias_min {
            return Err(Error::Validation("calibration_bias_max < calibration_bias_min".into()));
        }
        if self.rate_hz != RATE_HZ {
            return Err(Error::Validation(format!("rate_hz is fixed at {RATE_HZ}, got {}", self.rate_hz)));
        }
        if !(0.0..OPENING_MAX).contains(&self.close_threshold) {
            return Err(Error::Validation("close_threshold must lie inside the opening range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub size: f64,
    pub position: Vec3,
    pub held: bool,
}

impl SceneObject {
    pub fn shape(&self) -> Shape {
        self.kind.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Running,
    Success,
    Failure,
}

impl Outcome {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Outcome::Running)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Running => "running",
            Outcome::Success => "success",
            Outcome::Failure => "failure",
        }
    }
}

/// Full simulator state. `pose` is the physical tip pose.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub pose: Pose,
    pub object: SceneObject,
    pub t: f64,
    pub held_elapsed: f64,
    pub outcome: Outcome,
    pub calibration_bias: Vec3,
    pub steps: usize,
    held_steps: usize,
    grasp_offset: Vec3,
    rng: ChaCha8Rng,
}

/// Start an episode with the object resting at `object_position`, seeded by `cfg.seed`.
pub fn reset(cfg: &SimConfig, object_position: Vec3) -> Result<EnvState> {
    cfg.validate()?;
    if !object_position.iter().all(|v| v.is_finite()) || !cfg.workspace.contains(object_position) {
        return Err(Error::InvalidArgument(format!(
            "object position {object_position:?} outside workspace"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter: Vec3 = std::array::from_fn(|_| {
        if cfg.home_jitter > 0.0 {
            rng.random_range(-cfg.home_jitter..=cfg.home_jitter)
        } else {
            0.0
        }
    });
    let calibration_bias = sample_bias(cfg, &mut rng);
    Ok(EnvState {
        pose: cfg.home_pose.translated(jitter),
        object: SceneObject {
            kind: cfg.object,
            size: cfg.object.size(),
            position: object_position,
            held: false,
        },
        t: 0.0,
        held_elapsed: 0.0,
        outcome: Outcome::Running,
        calibration_bias,
        steps: 0,
        held_steps: 0,
        grasp_offset: [0.0; 3],
        rng,
    })
}

fn sample_bias(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec3 {
    if cfg.calibration_bias_max <= 0.0 {
        return [0.0; 3];
    }
    let dir = loop {
        let v: Vec3 = std::array::from_fn(|_| StandardNormal.sample(&mut *rng));
        let n = norm3(v);
        if n > 1e-9 {
            break scale3(v, 1.0 / n);
        }
    };
    let magnitude = if cfg.calibration_bias_max > cfg.calibration_bias_min {
        rng.random_range(cfg.calibration_bias_min..=cfg.calibration_bias_max)
    } else {
        cfg.calibration_bias_min
    };
    scale3(dir, magnitude)
}

impl EnvState {
    /// What the robot reports: its kinematic-model pose and the tracked object.
    pub fn observe(&self) -> State {
        State {
            pose: self.pose.translated(scale3(self.calibration_bias, -1.0)),
            object_position: self.object.position,
            frame: FrameTag::RobotCentric,
        }
    }

    /// Number of consecutive steps the object has been held above the lift height.
    pub fn held_steps(&self) -> usize {
        self.held_steps
    }

    /// Where a held object's center sits relative to the tip.
    pub fn grasp_offset(&self) -> Vec3 {
        self.grasp_offset
    }

    /// Advance one control period toward the commanded pose.
    pub fn step(&mut self, cmd: &Action, cfg: &SimConfig) -> Result<Outcome> {
        if self.outcome.is_terminal() {
            return Err(Error::InvalidState(format!(
                "episode already ended with {}",
                self.outcome.as_str()
            )));
        }
        if cmd.frame != FrameTag::RobotCentric {
            return Err(Error::InvalidState("commands must be robot-centric".into()));
        }
        let raw = cmd.target.to_array();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite command {raw:?}")));
        }
        let dt = cfg.dt();

        let target = add3(cmd.target.position, self.calibration_bias);
        let delta = sub3(target, self.pose.position);
        let dist = norm3(delta);
        let max_move = cfg.max_linear_speed * dt;
        let mut position = if dist * cfg.tracking_gain > max_move {
            add3(self.pose.position, scale3(delta, max_move / dist))
        } else if cfg.tracking_gain >= 1.0 {
            target
        } else {
            add3(self.pose.position, scale3(delta, cfg.tracking_gain))
        };
        if cfg.tracking_noise_std > 0.0 {
            for v in position.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *v += z * cfg.tracking_noise_std;
            }
        }
        position[2] = position[2].max(cfg.workspace.min[2]);

        let cmd_q = if cmd.target.orientation.is_unit(1e-12) {
            cmd.target.orientation
        } else {
            cmd.target.orientation.normalized().unwrap_or(self.pose.orientation)
        };
        let angle = geometry::geodesic_angle(&self.pose.orientation, &cmd_q);
        let max_turn = cfg.max_angular_speed * dt;
        let orientation = if angle > max_turn {
            self.pose.orientation.slerp(&cmd_q, max_turn / angle)
        } else {
            cmd_q
        };

        let cmd_open = cmd.target.opening.clamp(0.0, OPENING_MAX);
        let max_open = cfg.max_opening_speed * dt;
        let prev_open = self.pose.opening;
        let opening = (prev_open + (cmd_open - prev_open).clamp(-max_open, max_open)).clamp(0.0, OPENING_MAX);

        self.pose = Pose { position, orientation, opening };
        self.t = (self.steps + 1) as f64 * dt;
        self.steps += 1;

        let crossed_closed = prev_open >= cfg.close_threshold && opening < cfg.close_threshold;
        if !self.object.held && crossed_closed && dist3(position, self.object.position) <= cfg.capture_radius() {
            self.object.held = true;
            self.grasp_offset = sub3(self.object.position, position);
        }
        if self.object.held && opening >= cfg.close_threshold {
            self.object.held = false;
            self.object.position[2] = cfg.workspace.min[2] + self.object.size / 2.0;
        }
        if self.object.held {
            self.object.position = add3(position, self.grasp_offset);
            if position[2] > cfg.lift_height {
                self.held_steps += 1;
            } else {
                self.held_steps = 0;
            }
        } else {
            self.held_steps = 0;
        }
        self.held_elapsed = self.held_steps as f64 * dt;

        if self.held_steps >= cfg.hold_steps() {
            self.outcome = Outcome::Success;
        } else if self.steps >= cfg.max_steps() {
            self.outcome = Outcome::Failure;
        }
        Ok(self.outcome)
    }
}
