//! Trajectories, demonstration sets, the line-delimited trajectory file
//! format, per-dimension state statistics and noise-injected corrective
//! labels.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameTag, Pose, Quat, Vec3, OPENING_MAX, UNIT_TOLERANCE};

pub const STATE_DIM: usize = 11;
pub const ACTION_DIM: usize = 8;
pub const FORMAT_VERSION: u32 = 1;
pub const RATE_HZ: f64 = 100.0;

/// Observation: end-effector pose plus tracked object position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub pose: Pose,
    pub object_position: Vec3,
    pub frame: FrameTag,
}

impl State {
    /// `[px, py, pz, qw, qx, qy, qz, opening, ox, oy, oz]`
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[..8].copy_from_slice(&self.pose.to_array());
        out[8..].copy_from_slice(&self.object_position);
        out
    }

    /// Inverse of [`State::to_array`]; renormalizes the quaternion slice.
    pub fn from_slice(v: &[f64], frame: FrameTag) -> Result<State> {
        if v.len() != STATE_DIM {
            return Err(Error::InvalidArgument(format!(
                "state needs {STATE_DIM} values, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite state {v:?}")));
        }
        Ok(State {
            pose: Pose::from_slice(&v[..8])?,
            object_position: [v[8], v[9], v[10]],
            frame,
        })
    }
}

/// Target end-effector pose command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub target: Pose,
    pub frame: FrameTag,
}

impl Action {
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        self.target.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: f64,
    pub state: State,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<Step>,
    pub success: bool,
    pub object_radius: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Shared frame of all steps, or `None` for an empty trajectory.
    pub fn frame(&self) -> Option<FrameTag> {
        self.steps.first().map(|s| s.state.frame)
    }

    /// World position of the object at the first step. Meaningless for
    /// object-centric trajectories, whose object position is the origin.
    pub fn initial_object_position(&self) -> Option<Vec3> {
        self.steps.first().map(|s| s.state.object_position)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(frame) = self.frame() else {
            return Ok(());
        };
        let mut prev_t = f64::NEG_INFINITY;
        for (i, s) in self.steps.iter().enumerate() {
            if s.state.frame != frame || s.action.frame != frame {
                return Err(Error::Validation(format!(
                    "trajectory {}: step {i} mixes frame tags",
                    self.id
                )));
            }
            if !(s.t > prev_t) {
                return Err(Error::Validation(format!(
                    "trajectory {}: timestamps not strictly increasing at step {i}",
                    self.id
                )));
            }
            prev_t = s.t;
            validate_values(&s.state.to_array(), &s.action.to_array())
                .map_err(|e| Error::Validation(format!("trajectory {} step {i}: {e}", self.id)))?;
        }
        Ok(())
    }

    /// Same trajectory with every state and action re-expressed relative to
    /// the object. Object position is taken per step, so a held (moving)
    /// object stays at the origin.
    pub fn to_object_frame(&self) -> Result<Trajectory> {
        let steps = self
            .steps
            .iter()
            .map(|s| {
                let obj = s.state.object_position;
                Ok(Step {
                    t: s.t,
                    state: crate::geometry::to_object_frame(&s.state)?,
                    action: crate::geometry::action_to_object_frame(&s.action, obj)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            id: self.id.clone(),
            steps,
            success: self.success,
            object_radius: self.object_radius,
        })
    }
}

fn validate_values(state: &[f64], action: &[f64]) -> std::result::Result<(), String> {
    if let Some(v) = state.iter().chain(action).find(|v| !v.is_finite()) {
        return Err(format!("non-finite value {v}"));
    }
    for (name, pose) in [("state", &state[..8]), ("action", &action[..8])] {
        let n = (pose[3] * pose[3] + pose[4] * pose[4] + pose[5] * pose[5] + pose[6] * pose[6]).sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(format!("{name} quaternion norm {n} is not unit"));
        }
        if !(0.0..=OPENING_MAX).contains(&pose[7]) {
            return Err(format!("{name} opening {} outside [0, {OPENING_MAX}]", pose[7]));
        }
    }
    Ok(())
}

/// Per-dimension mean and population variance of flattened states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateStats {
    pub mean: [f64; STATE_DIM],
    pub variance: [f64; STATE_DIM],
}

impl StateStats {
    pub fn std(&self) -> [f64; STATE_DIM] {
        self.variance.map(f64::sqrt)
    }
}

/// Population mean/variance over every state of every trajectory.
pub fn compute_stats<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Result<StateStats> {
    // Welford's update; numerically stable in a single pass.
    let mut n = 0usize;
    let mut mean = [0.0; STATE_DIM];
    let mut m2 = [0.0; STATE_DIM];
    for traj in trajectories {
        for step in &traj.steps {
            n += 1;
            let x = step.state.to_array();
            for d in 0..STATE_DIM {
                let delta = x[d] - mean[d];
                mean[d] += delta / n as f64;
                m2[d] += delta * (x[d] - mean[d]);
            }
        }
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "statistics need at least 2 steps, got {n}"
        )));
    }
    Ok(StateStats {
        mean,
        variance: m2.map(|v| (v / n as f64).max(0.0)),
    })
}

/// A validated set of successful demonstrations sharing one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    trajectories: Vec<Trajectory>,
    frame: FrameTag,
    stats: Option<StateStats>,
}

impl DemoSet {
    pub fn new(frame: FrameTag, trajectories: Vec<Trajectory>) -> Result<DemoSet> {
        for t in &trajectories {
            check_member(frame, t)?;
        }
        let mut set = DemoSet {
            trajectories,
            frame,
            stats: None,
        };
        set.refresh_stats();
        Ok(set)
    }

    pub fn empty(frame: FrameTag) -> DemoSet {
        DemoSet {
            trajectories: Vec::new(),
            frame,
            stats: None,
        }
    }

    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        check_member(self.frame, &traj)?;
        self.trajectories.push(traj);
        self.refresh_stats();
        Ok(())
    }

    fn refresh_stats(&mut self) {
        self.stats = compute_stats(&self.trajectories).ok();
    }

    pub fn frame(&self) -> FrameTag {
        self.frame
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Statistics over all steps; errors with fewer than two steps.
    pub fn stats(&self) -> Result<&StateStats> {
        self.stats.as_ref().ok_or_else(|| {
            Error::InsufficientData(format!(
                "statistics need at least 2 steps, got {}",
                self.total_steps()
            ))
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&State, &Action)> + '_ {
        self.trajectories
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| (&s.state, &s.action)))
    }

    /// Re-express the whole set in the object frame.
    pub fn to_object_frame(&self) -> Result<DemoSet> {
        if self.frame == FrameTag::ObjectCentric {
            return Err(Error::InvalidState("demo set is already object-centric".into()));
        }
        let trajs = self
            .trajectories
            .iter()
            .map(Trajectory::to_object_frame)
            .collect::<Result<Vec<_>>>()?;
        DemoSet::new(FrameTag::ObjectCentric, trajs)
    }

    /// Identity for `FrameTag::RobotCentric`; object transform otherwise.
    pub fn in_frame(&self, frame: FrameTag) -> Result<DemoSet> {
        match (self.frame, frame) {
            (a, b) if a == b => Ok(self.clone()),
            (FrameTag::RobotCentric, FrameTag::ObjectCentric) => self.to_object_frame(),
            _ => Err(Error::Validation(
                "cannot recover robot-centric demonstrations from object-centric ones".into(),
            )),
        }
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }
}

fn check_member(frame: FrameTag, traj: &Trajectory) -> Result<()> {
    if !traj.success {
        return Err(Error::Validation(format!(
            "trajectory {} is not successful; demo sets keep successes only",
            traj.id
        )));
    }
    if let Some(f) = traj.frame() {
        if f != frame {
            return Err(Error::Validation(format!(
                "trajectory {} is {f}, demo set is {frame}",
                traj.id
            )));
        }
    }
    traj.validate()
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderRecord {
    version: u32,
    frame: FrameTag,
    rate_hz: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord<'a> {
    traj: std::borrow::Cow<'a, str>,
    t: f64,
    state: Vec<f64>,
    action: Vec<f64>,
    success: bool,
    radius: f64,
}

/// Write trajectories in the line-delimited format: one header record,
/// then one record per step.
pub fn save_trajectories(path: &Path, frame: FrameTag, trajectories: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_trajectories(&mut w, frame, trajectories).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trajectories(w: &mut impl Write, frame: FrameTag, trajectories: &[Trajectory]) -> std::io::Result<()> {
    let header = HeaderRecord {
        version: FORMAT_VERSION,
        frame,
        rate_hz: RATE_HZ as u32,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for traj in trajectories {
        for s in &traj.steps {
            let rec = StepRecord {
                traj: traj.id.as_str().into(),
                t: s.t,
                state: s.state.to_array().to_vec(),
                action: s.action.to_array().to_vec(),
                success: traj.success,
                radius: traj.object_radius,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

/// Read a trajectory file. Quaternions are kept bit-exact (not renormalized).
pub fn load_trajectories(path: &Path) -> Result<(FrameTag, Vec<Trajectory>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectories(BufReader::new(file))
}

pub fn read_trajectories(reader: impl BufRead) -> Result<(FrameTag, Vec<Trajectory>)> {
    let mut lines = reader.lines().enumerate();
    let header: HeaderRecord = loop {
        match lines.next() {
            None => return Err(Error::Parse { line: 1, msg: "missing header record".into() }),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("bad header: {e}"),
                })?;
            }
        }
    };
    if header.version != FORMAT_VERSION {
        return Err(Error::Validation(format!("unsupported format version {}", header.version)));
    }
    if header.rate_hz != RATE_HZ as u32 {
        return Err(Error::Validation(format!("unsupported rate {} Hz", header.rate_hz)));
    }
    let frame = header.frame;
    let mut order: Vec<Trajectory> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| {
            if contains_non_finite_token(&line) {
                Error::Validation(format!("line {lineno}: non-finite value"))
            } else {
                Error::Parse { line: lineno, msg: e.to_string() }
            }
        })?;
        if rec.state.len() != STATE_DIM || rec.action.len() != ACTION_DIM {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "expected {STATE_DIM} state and {ACTION_DIM} action values, got {} and {}",
                    rec.state.len(),
                    rec.action.len()
                ),
            });
        }
        validate_values(&rec.state, &rec.action)
            .map_err(|m| Error::Validation(format!("line {lineno}: {m}")))?;
        let s = &rec.state;
        let a = &rec.action;
        let state = State {
            pose: raw_pose(&s[..8]),
            object_position: [s[8], s[9], s[10]],
            frame,
        };
        let action = Action {
            target: raw_pose(&a[..8]),
            frame,
        };
        let idx = *by_id.entry(rec.traj.to_string()).or_insert_with(|| {
            order.push(Trajectory {
                id: rec.traj.to_string(),
                steps: Vec::new(),
                success: rec.success,
                object_radius: rec.radius,
            });
            order.len() - 1
        });
        let traj = &mut order[idx];
        if traj.success != rec.success || traj.object_radius != rec.radius {
            return Err(Error::Validation(format!(
                "line {lineno}: trajectory {} changes success/radius mid-stream",
                traj.id
            )));
        }
        if let Some(last) = traj.steps.last() {
            if !(rec.t > last.t) {
                return Err(Error::Validation(format!(
                    "line {lineno}: timestamps of trajectory {} not strictly increasing",
                    traj.id
                )));
            }
        }
        traj.steps.push(Step { t: rec.t, state, action });
    }
    Ok((frame, order))
}

fn raw_pose(v: &[f64]) -> Pose {
    Pose {
        position: [v[0], v[1], v[2]],
        orientation: Quat([v[3], v[4], v[5], v[6]]),
        opening: v[7],
    }
}

fn contains_non_finite_token(line: &str) -> bool {
    ["NaN", "nan", "Infinity", "inf"].iter().any(|t| line.contains(t))
}

/// Save a demo set (successful trajectories only, one frame).
pub fn save_demos(set: &DemoSet, path: &Path) -> Result<()> {
    save_trajectories(path, set.frame(), set.trajectories())
}

/// Load and validate a demo set.
pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let (frame, trajs) = load_trajectories(path)?;
    DemoSet::new(frame, trajs)
}

/// How injected noise treats the quaternion slice of the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuatNoise {
    /// Add noise to the raw components, then renormalize.
    #[default]
    Flat,
    /// Rotate by a random axis-angle perturbation instead.
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Noise magnitude: covariance is `diag(eta * variance)`.
    pub eta: f64,
    /// Portion of each batch whose states are perturbed.
    pub fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub quat_mode: QuatNoise,
}

impl NoiseConfig {
    pub fn new(eta: f64, seed: u64) -> NoiseConfig {
        NoiseConfig {
            eta,
            fraction: 0.2,
            seed,
            quat_mode: QuatNoise::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidArgument(format!("noise eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidArgument(format!(
                "noise fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }

    /// Per-dimension standard deviation of the injected noise.
    pub fn noise_std(&self, stats: &StateStats) -> [f64; STATE_DIM] {
        stats.variance.map(|v| (self.eta * v).sqrt())
    }
}

/// Replace the states of a random `ceil(fraction * n)` subset of the batch by
/// Gaussian-perturbed copies, keeping every action unchanged.
pub fn inject_noise(batch: &[(State, Action)], cfg: &NoiseConfig, stats: &StateStats) -> Result<Vec<(State, Action)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = batch.to_vec();
    inject_noise_in_place(&mut out, cfg, stats, &mut rng)?;
    Ok(out)
}

/// In-place variant driven by a caller-supplied RNG (used per minibatch in training).
pub fn inject_noise_in_place(
    batch: &mut [(State, Action)],
    cfg: &NoiseConfig,
    stats: &StateStats,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cannot inject noise into an empty batch".into()));
    }
    let n = batch.len();
    let count = ((cfg.fraction * n as f64).ceil() as usize).min(n);
    if count == 0 {
        return Ok(());
    }
    let std = cfg.noise_std(stats);
    let chosen = index::sample(rng, n, count);
    for i in chosen.iter() {
        let state = &mut batch[i].0;
        let mut x = state.to_array();
        let mut eps = [0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            let z: f64 = StandardNormal.sample(rng);
            eps[d] = z * std[d];
        }
        let orientation = match cfg.quat_mode {
            QuatNoise::Flat => {
                for d in 0..STATE_DIM {
                    x[d] += eps[d];
                }
                Quat([x[3], x[4], x[5], x[6]]).normalized().unwrap_or(state.pose.orientation)
            }
            QuatNoise::Rotation => {
                for d in (0..3).chain(7..STATE_DIM) {
                    x[d] += eps[d];
                }
                let axis = [eps[4], eps[5], eps[6]];
                let angle = crate::geometry::norm3(axis) * 2.0;
                Quat::from_axis_angle(axis, angle)
                    .mul(state.pose.orientation)
                    .normalized()
                    .unwrap_or(state.pose.orientation)
            }
        };
        *state = State {
            pose: Pose {
                position: [x[0], x[1], x[2]],
                orientation,
                opening: x[7].clamp(0.0, OPENING_MAX),
            },
            object_position: [x[8], x[9], x[10]],
            frame: state.frame,
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_traj(id: &str, n: usize, frame: FrameTag, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = (0..n)
            .map(|i| {
                let p = [rng.random_range(0.1..0.4), rng.random_range(-0.1..0.1), rng.random_range(0.0..0.2)];
                let q = Quat::from_yaw_tilt(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
                let pose = Pose::new(p, q, rng.random_range(0.0..OPENING_MAX)).unwrap();
                let obj = if frame == FrameTag::ObjectCentric {
                    [0.0; 3]
                } else {
                    [rng.random_range(0.2..0.4), rng.random_range(-0.1..0.1), 0.005]
                };
                Step {
                    t: i as f64 / RATE_HZ,
                    state: State { pose, object_position: obj, frame },
                    action: Action { target: pose.translated([0.001, 0.0, -0.001]), frame },
                }
            })
            .collect();
        Trajectory {
            id: id.to_string(),
            steps,
            success: true,
            object_radius: 0.007,
        }
    }

    #[test]
    fn stats_two_point_hand_arithmetic() {
        let mut t = toy_traj("a", 2, FrameTag::RobotCentric, 1);
        t.steps[0].state.pose.position[0] = 0.0;
        t.steps[1].state.pose.position[0] = 2.0;
        let s = compute_stats([&t]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.variance[0], 1.0);
    }

    #[test]
    fn stats_constant_states_have_zero_variance() {
        let mut t = toy_traj("a", 5, FrameTag::RobotCentric, 2);
        let first = t.steps[0].state;
        for s in &mut t.steps {
            s.state = first;
        }
        let s = compute_stats([&t]).unwrap();
        assert!(s.variance.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let trajs: Vec<_> = (0..10).map(|i| toy_traj(&i.to_string(), 100, FrameTag::RobotCentric, i)).collect();
        let s = compute_stats(&trajs).unwrap();
        let xs: Vec<[f64; STATE_DIM]> = trajs.iter().flat_map(|t| t.steps.iter().map(|s| s.state.to_array())).collect();
        let n = xs.len() as f64;
        for d in 0..STATE_DIM {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
            assert!((s.mean[d] - mean).abs() < 1e-10);
            assert!((s.variance[d] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn stats_need_two_steps() {
        let t = toy_traj("a", 1, FrameTag::RobotCentric, 3);
        assert!(matches!(compute_stats([&t]), Err(Error::InsufficientData(_))));
        let set = DemoSet::new(FrameTag::RobotCentric, vec![t]).unwrap();
        assert!(set.stats().is_err());
    }

    #[test]
    fn demo_set_rejects_failures_and_frame_mixtures() {
        let mut failed = toy_traj("f", 3, FrameTag::RobotCentric, 4);
        failed.success = false;
        assert!(matches!(DemoSet::new(FrameTag::RobotCentric, vec![failed]), Err(Error::Validation(_))));
        let obj = toy_traj("o", 3, FrameTag::ObjectCentric, 5);
        assert!(matches!(DemoSet::new(FrameTag::RobotCentric, vec![obj]), Err(Error::Validation(_))));
        let mut mixed = toy_traj("m", 3, FrameTag::RobotCentric, 6);
        mixed.steps[1].state.frame = FrameTag::ObjectCentric;
        assert!(mixed.validate().is_err());
    }

    #[test]
    fn stats_refresh_on_push() {
        let mut set = DemoSet::empty(FrameTag::RobotCentric);
        assert!(set.stats().is_err());
        set.push(toy_traj("a", 10, FrameTag::RobotCentric, 7)).unwrap();
        let before = set.stats().unwrap().clone();
        set.push(toy_traj("b", 10, FrameTag::RobotCentric, 8)).unwrap();
        assert_ne!(&before, set.stats().unwrap());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        let set = DemoSet::new(
            FrameTag::RobotCentric,
            vec![toy_traj("a", 20, FrameTag::RobotCentric, 9), toy_traj("b", 7, FrameTag::RobotCentric, 10)],
        )
        .unwrap();
        save_demos(&set, &path).unwrap();
        let back = load_demos(&path).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn empty_set_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_demos(&DemoSet::empty(FrameTag::ObjectCentric), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"version\":1,\"frame\":\"object\",\"rate_hz\":100}\n");
        let back = load_demos(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.frame(), FrameTag::ObjectCentric);
    }

    #[test]
    fn nan_record_is_a_validation_error() {
        let text = "{\"version\":1,\"frame\":\"robot\",\"rate_hz\":100}\n\
            {\"traj\":\"a\",\"t\":0.0,\"state\":[NaN,0,0,1,0,0,0,0.5,0,0,0],\"action\":[0,0,0,1,0,0,0,0.5],\"success\":true,\"radius\":0.005}\n";
        let err = read_trajectories(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "{\"version\":1,\"frame\":\"robot\",\"rate_hz\":100}\n\
            {\"traj\":\"a\",\"t\":0.0,\"state\":[0,0,0,1,0,0,0,0.5,0,0,0],\"action\":[0,0,0,1,0,0,0,0.5],\"success\":true,\"radius\":0.005}\n\
            {\"traj\":\"a\",\"t\":0.01,\"state\":[0,0,0,1,0,0,0,0.5,0,0],\"action\":[0,0,0,1,0,0,0,0.5],\"success\":true,\"radius\":0.005}\n";
        match read_trajectories(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eta_zero_and_fraction_zero_leave_batch_unchanged() {
        let t = toy_traj("a", 50, FrameTag::RobotCentric, 11);
        let stats = compute_stats([&t]).unwrap();
        let batch: Vec<_> = t.steps.iter().map(|s| (s.state, s.action)).collect();
        let out = inject_noise(&batch, &NoiseConfig::new(0.0, 3), &stats).unwrap();
        for (a, b) in batch.iter().zip(&out) {
            assert_eq!(a.1, b.1);
            for (x, y) in a.0.to_array().iter().zip(b.0.to_array()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        let cfg = NoiseConfig { fraction: 0.0, ..NoiseConfig::new(1.0, 3) };
        assert_eq!(inject_noise(&batch, &cfg, &stats).unwrap(), batch);
    }

    #[test]
    fn inject_noise_rejects_negative_eta_and_empty_batch() {
        let t = toy_traj("a", 5, FrameTag::RobotCentric, 12);
        let stats = compute_stats([&t]).unwrap();
        let batch: Vec<_> = t.steps.iter().map(|s| (s.state, s.action)).collect();
        assert!(matches!(inject_noise(&batch, &NoiseConfig::new(-0.1, 0), &stats), Err(Error::InvalidArgument(_))));
        assert!(inject_noise(&[], &NoiseConfig::new(0.1, 0), &stats).is_err());
    }

    #[test]
    fn inject_noise_touches_ceil_fraction_and_is_deterministic() {
        let t = toy_traj("a", 37, FrameTag::RobotCentric, 13);
        let stats = compute_stats([&t]).unwrap();
        let batch: Vec<_> = t.steps.iter().map(|s| (s.state, s.action)).collect();
        let cfg = NoiseConfig::new(0.05, 99);
        let out = inject_noise(&batch, &cfg, &stats).unwrap();
        let changed = batch.iter().zip(&out).filter(|(a, b)| a.0 != b.0).count();
        assert_eq!(changed, (0.2f64 * 37.0).ceil() as usize);
        assert_eq!(out, inject_noise(&batch, &cfg, &stats).unwrap());
        for (s, _) in &out {
            assert!(s.pose.orientation.is_unit(1e-12));
            assert!(s.pose.orientation.w() >= 0.0);
        }
    }

    #[test]
    fn rotation_mode_keeps_unit_quaternions() {
        let t = toy_traj("a", 40, FrameTag::RobotCentric, 14);
        let stats = compute_stats([&t]).unwrap();
        let batch: Vec<_> = t.steps.iter().map(|s| (s.state, s.action)).collect();
        let cfg = NoiseConfig { quat_mode: QuatNoise::Rotation, fraction: 1.0, ..NoiseConfig::new(0.1, 5) };
        let out = inject_noise(&batch, &cfg, &stats).unwrap();
        for ((a, _), (b, _)) in batch.iter().zip(&out) {
            assert!(b.pose.orientation.is_unit(1e-12));
            assert_ne!(a.pose.orientation, b.pose.orientation);
        }
    }
}
