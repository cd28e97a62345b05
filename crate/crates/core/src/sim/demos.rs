use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{reset, EnvState, Outcome, ScriptedExpert, SimConfig};
use crate::data::{Action, DemoSet, Step, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::FrameTag;

/// Below this success rate (after at least `MIN_ATTEMPTS`) generation aborts.
const MIN_SUCCESS_RATE: f64 = 0.05;
const MIN_ATTEMPTS: usize = 20;

/// Roll the scripted expert from random placements until `n` successful
/// demonstrations are logged. Failed attempts are discarded.
pub fn generate_demos(cfg: &SimConfig, n: usize, seed: u64) -> Result<DemoSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one demonstration".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let (lo, hi) = (cfg.workspace.min, cfg.workspace.max);
    while set.len() < n {
        attempts += 1;
        let obj = cfg.resting_position(rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1]));
        let episode_seed: u64 = rng.random();
        let style_seed: u64 = rng.random();
        let ep_cfg = cfg.with_seed(episode_seed);
        let traj = record_expert(&ep_cfg, obj, style_seed, format!("{}-{:04}", cfg.object, set.len()))?;
        if traj.success {
            set.push(traj);
        }
        if attempts >= MIN_ATTEMPTS {
            let rate = set.len() as f64 / attempts as f64;
            if rate < MIN_SUCCESS_RATE {
                return Err(Error::LowSuccessRate { rate, attempts });
            }
        }
    }
    DemoSet::new(FrameTag::RobotCentric, set)
}

fn record_expert(cfg: &SimConfig, obj: crate::geometry::Vec3, style_seed: u64, id: String) -> Result<Trajectory> {
    let mut env = reset(cfg, obj)?;
    let mut expert = ScriptedExpert::new(style_seed, cfg.expert_dither);
    let mut steps = Vec::with_capacity(800);
    while !env.outcome.is_terminal() {
        let state = env.observe();
        let action = expert.act(&env, cfg)?;
        steps.push(Step {
            t: env.steps as f64 * cfg.dt(),
            state,
            action,
        });
        env.step(&action, cfg)?;
    }
    Ok(Trajectory {
        id,
        steps,
        success: env.outcome == Outcome::Success,
        object_radius: cfg.object.size() / 2.0,
    })
}

/// Re-execute a demonstration's commands open-loop with the object at its
/// recorded location. After the recording runs out the last command is
/// held until the episode ends.
pub fn replay(traj: &Trajectory, cfg: &SimConfig) -> Result<Outcome> {
    Ok(replay_env(traj, cfg)?.outcome)
}

fn replay_env(traj: &Trajectory, cfg: &SimConfig) -> Result<EnvState> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument(format!("trajectory {} is empty", traj.id)));
    }
    if !traj.success {
        return Err(Error::InvalidArgument(format!("trajectory {} was not successful", traj.id)));
    }
    if traj.frame() != Some(FrameTag::RobotCentric) {
        return Err(Error::Validation(format!(
            "replay needs robot-centric commands; trajectory {} is object-centric",
            traj.id
        )));
    }
    let obj = traj.initial_object_position().expect("nonempty");
    let mut env = reset(cfg, obj)?;
    let mut last: Option<Action> = None;
    for step in &traj.steps {
        if env.outcome.is_terminal() {
            break;
        }
        env.step(&step.action, cfg)?;
        last = Some(step.action);
    }
    let last = last.expect("nonempty");
    while !env.outcome.is_terminal() {
        env.step(&last, cfg)?;
    }
    Ok(env)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySummary {
    pub episodes: usize,
    pub successes: usize,
}

impl ReplaySummary {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

/// Replay every demonstration; each episode gets its own seed derived from `seed`.
pub fn replay_all(demos: &DemoSet, cfg: &SimConfig, seed: u64) -> Result<ReplaySummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    for traj in demos.trajectories() {
        let ep = cfg.with_seed(rng.random());
        if replay(traj, &ep)? == Outcome::Success {
            successes += 1;
        }
    }
    Ok(ReplaySummary {
        episodes: demos.len(),
        successes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ObjectKind;

    #[test]
    fn single_noiseless_demo() {
        let cfg = SimConfig::noiseless(ObjectKind::Ball20);
        let set = generate_demos(&cfg, 1, 3).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.trajectories()[0].success);
    }

    #[test]
    fn zero_demos_is_rejected() {
        let cfg = SimConfig::noiseless(ObjectKind::Cube);
        assert!(matches!(generate_demos(&cfg, 0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig::for_object(ObjectKind::Cube);
        assert_eq!(generate_demos(&cfg, 3, 8).unwrap(), generate_demos(&cfg, 3, 8).unwrap());
    }

    #[test]
    fn impossible_task_aborts() {
        let cfg = SimConfig {
            time_limit: 0.5,
            ..SimConfig::noiseless(ObjectKind::Cube)
        };
        assert!(matches!(generate_demos(&cfg, 2, 0), Err(Error::LowSuccessRate { .. })));
    }

    #[test]
    fn noiseless_replay_always_succeeds() {
        let cfg = SimConfig::noiseless(ObjectKind::Ball14);
        let set = generate_demos(&cfg, 5, 21).unwrap();
        for t in set.trajectories() {
            assert_eq!(replay(t, &cfg).unwrap(), Outcome::Success);
        }
    }

    #[test]
    fn replay_rejects_empty_and_object_frame() {
        let cfg = SimConfig::noiseless(ObjectKind::Cube);
        let set = generate_demos(&cfg, 1, 4).unwrap();
        let obj = set.to_object_frame().unwrap();
        assert!(matches!(replay(&obj.trajectories()[0], &cfg), Err(Error::Validation(_))));
        let mut empty = set.trajectories()[0].clone();
        empty.steps.clear();
        assert!(matches!(replay(&empty, &cfg), Err(Error::InvalidArgument(_))));
    }
}
