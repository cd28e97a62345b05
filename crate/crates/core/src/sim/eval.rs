use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{reset, ObjectKind, Outcome, SimConfig};
use crate::data::{Step, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{FrameTag, Vec3};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutOptions {
    /// Keep the visited (observation, command) pairs.
    pub record: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub cell_row: usize,
    pub cell_col: usize,
    pub trial: usize,
    pub object: ObjectKind,
    pub outcome: Outcome,
    pub steps: usize,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub agent: String,
    pub object: ObjectKind,
    pub grid_n: usize,
    pub trials_per_cell: usize,
    pub episodes: Vec<EpisodeRecord>,
    /// Recorded rollouts (robot frame), empty unless requested.
    pub rollouts: Vec<Trajectory>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.episodes.iter().filter(|e| e.outcome == Outcome::Success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.successes() as f64 / self.episodes.len() as f64
    }

    /// `cell_row,cell_col,object,outcome,steps` per episode plus a summary
    /// row whose outcome column holds the success rate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell_row,cell_col,object,outcome,steps\n");
        for e in &self.episodes {
            let _ = writeln!(out, "{},{},{},{},{}", e.cell_row, e.cell_col, e.object, e.outcome.as_str(), e.steps);
        }
        let total: usize = self.episodes.iter().map(|e| e.steps).sum();
        let _ = writeln!(out, "summary,summary,{},{:.6},{}", self.object, self.success_rate(), total);
        out
    }
}

/// Center of grid cell `(row, col)` on the plate, object resting on it.
pub fn cell_center(cfg: &SimConfig, grid_n: usize, row: usize, col: usize) -> Vec3 {
    let (lo, hi) = (cfg.workspace.min, cfg.workspace.max);
    let x = lo[0] + (row as f64 + 0.5) * (hi[0] - lo[0]) / grid_n as f64;
    let y = lo[1] + (col as f64 + 0.5) * (hi[1] - lo[1]) / grid_n as f64;
    cfg.resting_position(x, y)
}

/// One closed-loop episode with the environment seeded by `episode_seed`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &SimConfig,
    object_position: Vec3,
    episode_seed: u64,
    opts: RolloutOptions,
) -> Result<(Outcome, usize, Option<String>, Option<Trajectory>)> {
    if policy.frame() != FrameTag::RobotCentric {
        return Err(Error::Validation(format!(
            "{} consumes object-centric observations; wrap it with WorldFrame",
            policy.name()
        )));
    }
    let ep_cfg = cfg.with_seed(episode_seed);
    let mut env = reset(&ep_cfg, object_position)?;
    policy.reset(episode_seed);
    let mut steps = Vec::new();
    let mut diagnostic = None;
    while !env.outcome.is_terminal() {
        let obs = env.observe();
        let action = policy.act(&obs, &env)?;
        if action.target.to_array().iter().any(|v| !v.is_finite()) {
            diagnostic = Some(format!("non-finite action at step {}", env.steps));
            break;
        }
        if opts.record {
            steps.push(Step {
                t: env.steps as f64 * cfg.dt(),
                state: obs,
                action,
            });
        }
        env.step(&action, &ep_cfg)?;
    }
    let outcome = if diagnostic.is_some() { Outcome::Failure } else { env.outcome };
    let traj = opts.record.then(|| Trajectory {
        id: String::new(),
        steps,
        success: outcome == Outcome::Success,
        object_radius: cfg.object.size() / 2.0,
    });
    Ok((outcome, env.steps, diagnostic, traj))
}

fn episode_seed(base: u64, row: usize, col: usize, trial: usize) -> u64 {
    // splitmix64 over the cell key
    let mut z = base
        .wrapping_add((row as u64) << 40)
        .wrapping_add((col as u64) << 20)
        .wrapping_add(trial as u64)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Place the object at every cell center of a `grid_n` x `grid_n` grid
/// (`trials_per_cell` times each) and roll the policy to a terminal outcome.
pub fn evaluate_grid<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &SimConfig,
    grid_n: usize,
    trials_per_cell: usize,
    opts: RolloutOptions,
) -> Result<EvalReport> {
    if grid_n == 0 || trials_per_cell == 0 {
        return Err(Error::InvalidArgument("grid size and trials must be positive".into()));
    }
    let mut episodes = Vec::with_capacity(grid_n * grid_n * trials_per_cell);
    let mut rollouts = Vec::new();
    for row in 0..grid_n {
        for col in 0..grid_n {
            for trial in 0..trials_per_cell {
                let obj = cell_center(cfg, grid_n, row, col);
                let seed = episode_seed(cfg.seed, row, col, trial);
                let (outcome, steps, diagnostic, traj) = rollout(policy, cfg, obj, seed, opts)?;
                if let Some(mut t) = traj {
                    t.id = format!("{}-r{row}c{col}t{trial}", policy.name());
                    rollouts.push(t);
                }
                episodes.push(EpisodeRecord {
                    cell_row: row,
                    cell_col: col,
                    trial,
                    object: cfg.object,
                    outcome,
                    steps,
                    diagnostic,
                });
            }
        }
    }
    Ok(EvalReport {
        agent: policy.name().to_string(),
        object: cfg.object,
        grid_n,
        trials_per_cell,
        episodes,
        rollouts,
    })
}
