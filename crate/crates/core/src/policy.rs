//! Closed-loop policy interface shared by the learned agents, the scripted
//! expert and the evaluation harness.

use crate::data::{Action, State};
use crate::error::{Error, Result};
use crate::geometry::{self, FrameTag, Pose};
use crate::sim::EnvState;

pub trait Policy {
    fn name(&self) -> &str;

    /// Frame of the observations this policy consumes and the actions it emits.
    fn frame(&self) -> FrameTag;

    /// Called before each episode.
    fn reset(&mut self, _episode_seed: u64) {}

    /// Next command given the robot's observation. `env` is the full
    /// simulator state; only privileged policies (the scripted expert) read it.
    fn act(&mut self, obs: &State, env: &EnvState) -> Result<Action>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn frame(&self) -> FrameTag {
        (**self).frame()
    }

    fn reset(&mut self, episode_seed: u64) {
        (**self).reset(episode_seed)
    }

    fn act(&mut self, obs: &State, env: &EnvState) -> Result<Action> {
        (**self).act(obs, env)
    }
}

/// Runs an object-centric policy on robot-centric observations: states are
/// shifted into the object frame and actions shifted back.
pub struct WorldFrame<P> {
    inner: P,
}

impl<P: Policy> WorldFrame<P> {
    pub fn new(inner: P) -> Result<Self> {
        if inner.frame() != FrameTag::ObjectCentric {
            return Err(Error::Validation(format!(
                "{} is already robot-centric",
                inner.name()
            )));
        }
        Ok(WorldFrame { inner })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut P {
        &mut self.inner
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: Policy> Policy for WorldFrame<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn frame(&self) -> FrameTag {
        FrameTag::RobotCentric
    }

    fn reset(&mut self, episode_seed: u64) {
        self.inner.reset(episode_seed)
    }

    fn act(&mut self, obs: &State, env: &EnvState) -> Result<Action> {
        let local = geometry::to_object_frame(obs)?;
        let action = self.inner.act(&local, env)?;
        geometry::from_object_frame(&action, obs.object_position)
    }
}

/// Wrap a policy so that it consumes robot-centric observations, whatever
/// frame it was trained in.
pub fn in_world_frame<P: Policy + 'static>(policy: P) -> Result<Box<dyn Policy>> {
    match policy.frame() {
        FrameTag::RobotCentric => Ok(Box::new(policy)),
        FrameTag::ObjectCentric => Ok(Box::new(WorldFrame::new(policy)?)),
    }
}

/// Always commands the same pose.
pub struct HoldPose {
    pub pose: Pose,
}

impl Policy for HoldPose {
    fn name(&self) -> &str {
        "hold"
    }

    fn frame(&self) -> FrameTag {
        FrameTag::RobotCentric
    }

    fn act(&mut self, _obs: &State, _env: &EnvState) -> Result<Action> {
        Ok(Action {
            target: self.pose,
            frame: FrameTag::RobotCentric,
        })
    }
}

/// Rolling window of the last three observed poses, padded at episode
/// start by repeating the first pose.
#[derive(Debug, Clone, Default)]
pub struct PoseHistory {
    poses: Vec<Pose>,
}

impl PoseHistory {
    pub const LEN: usize = 3;

    pub fn clear(&mut self) {
        self.poses.clear();
    }

    pub fn push(&mut self, pose: Pose) {
        if self.poses.is_empty() {
            self.poses = vec![pose; Self::LEN];
        } else {
            self.poses.remove(0);
            self.poses.push(pose);
        }
    }

    /// Oldest first. Panics if nothing has been pushed yet.
    pub fn window(&self) -> [Pose; 3] {
        [self.poses[0], self.poses[1], self.poses[2]]
    }
}
