//! Follow the BC network while the state is close to the demonstrations,
//! fall back to k-NN when it drifts away.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bc::BcNetwork;
use crate::data::{Action, DemoSet, State};
use crate::error::{Error, Result};
use crate::geometry::FrameTag;
use crate::knn::{trajectory_features, KnnFeature, KnnIndex};
use crate::policy::{Policy, PoseHistory};
use crate::sim::EnvState;

pub const DEFAULT_QUANTILE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Bc,
    Knn,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Bc => "bc",
            Branch::Knn => "knn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub step: usize,
    pub mean_distance: f64,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub alpha: f64,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `BC iff mean distance to the k nearest demo features < alpha`.
#[derive(Debug, Clone)]
pub struct EnsemblePolicy {
    bc: BcNetwork,
    index: KnnIndex,
    cfg: EnsembleConfig,
    history: PoseHistory,
    switch_log: Vec<SwitchRecord>,
    /// Finished episodes, and how many of them used the k-NN branch.
    episodes: usize,
    knn_episodes: usize,
}

impl EnsemblePolicy {
    pub fn new(bc: BcNetwork, index: KnnIndex, cfg: EnsembleConfig) -> Result<EnsemblePolicy> {
        cfg.validate()?;
        if bc.frame != index.frame() {
            return Err(Error::Validation(format!(
                "BC network is {} but the k-NN index is {}",
                bc.frame,
                index.frame()
            )));
        }
        Ok(EnsemblePolicy {
            bc,
            index,
            cfg,
            history: PoseHistory::default(),
            switch_log: Vec::new(),
            episodes: 0,
            knn_episodes: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.cfg.alpha
    }

    pub fn bc(&self) -> &BcNetwork {
        &self.bc
    }

    pub fn index(&self) -> &KnnIndex {
        &self.index
    }

    /// Branch decisions since the last reset.
    pub fn switch_log(&self) -> &[SwitchRecord] {
        &self.switch_log
    }

    /// Fraction of episodes (including the one in progress) in which the
    /// k-NN branch acted at least once; `None` before the first step.
    pub fn knn_episode_fraction(&self) -> Option<f64> {
        let (mut n, mut fired) = (self.episodes, self.knn_episodes);
        if !self.switch_log.is_empty() {
            n += 1;
            fired += usize::from(self.fired());
        }
        (n > 0).then(|| fired as f64 / n as f64)
    }

    fn fired(&self) -> bool {
        self.switch_log.iter().any(|r| r.branch == Branch::Knn)
    }

    /// `step,mean_distance,branch` rows.
    pub fn switch_log_csv(&self) -> String {
        let mut out = String::from("step,mean_distance,branch\n");
        for r in &self.switch_log {
            let _ = writeln!(out, "{},{},{}", r.step, r.mean_distance, r.branch.as_str());
        }
        out
    }

    /// Decide and act for the current state given its history feature.
    pub fn act_on(&mut self, state: &State, feature: &KnnFeature) -> Result<Action> {
        let neighbors = self.index.query(feature);
        let mean = neighbors.iter().map(|n| n.distance).sum::<f64>() / neighbors.len() as f64;
        let branch = if mean < self.cfg.alpha { Branch::Bc } else { Branch::Knn };
        self.switch_log.push(SwitchRecord {
            step: self.switch_log.len(),
            mean_distance: mean,
            branch,
        });
        match branch {
            Branch::Bc => self.bc.predict(state),
            Branch::Knn => Ok(self.index.blend(&neighbors)),
        }
    }
}

impl Policy for EnsemblePolicy {
    fn name(&self) -> &str {
        "Ensemble"
    }

    fn frame(&self) -> FrameTag {
        self.bc.frame
    }

    fn reset(&mut self, _episode_seed: u64) {
        if !self.switch_log.is_empty() {
            self.episodes += 1;
            self.knn_episodes += usize::from(self.fired());
        }
        self.history.clear();
        self.switch_log.clear();
    }

    fn act(&mut self, obs: &State, _env: &EnvState) -> Result<Action> {
        self.history.push(obs.pose);
        let feature = KnnFeature::new(self.history.window(), obs.object_position);
        self.act_on(obs, &feature)
    }
}

/// Linear-interpolation quantile (`q = 0` is the minimum, `q = 1` the maximum).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Leave-one-out mean k-NN distance of every feature built from `demos`.
pub fn leave_one_out_distances(index: &KnnIndex, demos: &DemoSet) -> Result<Vec<f64>> {
    let features: Vec<KnnFeature> = demos
        .trajectories()
        .iter()
        .flat_map(|t| trajectory_features(t).into_iter().map(|(f, _)| f))
        .collect();
    if features.len() < index.k() + 1 {
        return Err(Error::InsufficientData(format!(
            "{} demo features cannot support leave-one-out with k = {}",
            features.len(),
            index.k()
        )));
    }
    let mut out = Vec::with_capacity(features.len());
    for f in &features {
        // the feature's own entry (if stored) is the one left out
        let mut nn = index.query_k(f, (index.k() + 1).min(index.len()))?;
        if let Some(pos) = nn.iter().position(|n| index.feature(n.id) == f) {
            nn.remove(pos);
        }
        nn.truncate(index.k());
        out.push(nn.iter().map(|n| n.distance).sum::<f64>() / nn.len() as f64);
    }
    Ok(out)
}

/// Threshold at the given quantile of the leave-one-out mean distances.
pub fn calibrate_alpha(index: &KnnIndex, demos: &DemoSet, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    quantile(&leave_one_out_distances(index, demos)?, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bc::{train, TrainConfig};
    use crate::knn::KnnConfig;
    use crate::sim::{generate_demos, ObjectKind, SimConfig};

    fn robot_demos() -> DemoSet {
        generate_demos(&SimConfig::for_object(ObjectKind::Cube), 3, 5).unwrap()
    }

    fn fixture() -> (DemoSet, BcNetwork, KnnIndex) {
        let demos = robot_demos().to_object_frame().unwrap();
        let bc = train(&demos, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap().network;
        let index = KnnIndex::from_demos(&demos, &KnnConfig::default()).unwrap();
        (demos, bc, index)
    }

    #[test]
    fn quantile_matches_sorted_oracle() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 5.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(quantile(&v, 0.125).unwrap(), 1.5);
    }

    #[test]
    fn threshold_limits_select_branch() {
        let (demos, bc, index) = fixture();
        let traj = &demos.trajectories()[0];
        let feats = trajectory_features(traj);
        let mut always_bc = EnsemblePolicy::new(bc.clone(), index.clone(), EnsembleConfig { alpha: 1e18 }).unwrap();
        let mut never_bc = EnsemblePolicy::new(bc, index, EnsembleConfig { alpha: 0.0 }).unwrap();
        for (step, (f, _)) in traj.steps.iter().zip(&feats).take(50) {
            always_bc.act_on(&step.state, f).unwrap();
            never_bc.act_on(&step.state, f).unwrap();
        }
        assert!(always_bc.switch_log().iter().all(|r| r.branch == Branch::Bc));
        assert!(never_bc.switch_log().iter().all(|r| r.branch == Branch::Knn));
    }

    #[test]
    fn boundary_is_strict() {
        let (demos, bc, index) = fixture();
        let traj = &demos.trajectories()[0];
        let (f, _) = trajectory_features(traj)[40];
        let nn = index.query(&f);
        let mean = nn.iter().map(|n| n.distance).sum::<f64>() / nn.len() as f64;
        let mut at = EnsemblePolicy::new(bc.clone(), index.clone(), EnsembleConfig { alpha: mean }).unwrap();
        at.act_on(&traj.steps[40].state, &f).unwrap();
        assert_eq!(at.switch_log()[0].branch, Branch::Knn);
        let mut above = EnsemblePolicy::new(bc, index, EnsembleConfig { alpha: mean.next_up() }).unwrap();
        above.act_on(&traj.steps[40].state, &f).unwrap();
        assert_eq!(above.switch_log()[0].branch, Branch::Bc);
    }

    #[test]
    fn full_quantile_keeps_demo_states_on_bc() {
        let (demos, bc, index) = fixture();
        let alpha = calibrate_alpha(&index, &demos, 1.0).unwrap();
        let mut pol = EnsemblePolicy::new(bc.clone(), index, EnsembleConfig { alpha }).unwrap();
        for traj in demos.trajectories() {
            for (step, (f, _)) in traj.steps.iter().zip(trajectory_features(traj)) {
                let a = pol.act_on(&step.state, &f).unwrap();
                assert_eq!(a, bc.predict(&step.state).unwrap());
            }
        }
        assert!(pol.switch_log().iter().all(|r| r.branch == Branch::Bc));
        let csv = pol.switch_log_csv();
        assert_eq!(csv.lines().count(), demos.total_steps() + 1);
    }

    #[test]
    fn zero_quantile_is_below_every_distance() {
        let (demos, _, index) = fixture();
        let d = leave_one_out_distances(&index, &demos).unwrap();
        let alpha = calibrate_alpha(&index, &demos, 0.0).unwrap();
        assert!(d.iter().all(|&x| alpha <= x));
    }

    #[test]
    fn fire_fraction_counts_episodes() {
        let (demos, bc, index) = fixture();
        let traj = &demos.trajectories()[0];
        let feats = trajectory_features(traj);
        let mut pol = EnsemblePolicy::new(bc, index, EnsembleConfig { alpha: 0.0 }).unwrap();
        assert_eq!(pol.knn_episode_fraction(), None);
        pol.act_on(&traj.steps[0].state, &feats[0].0).unwrap();
        pol.reset(1);
        pol.cfg.alpha = 1e18;
        pol.act_on(&traj.steps[0].state, &feats[0].0).unwrap();
        assert_eq!(pol.knn_episode_fraction(), Some(0.5));
        pol.reset(2);
        assert_eq!(pol.knn_episode_fraction(), Some(0.5));
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let (_, bc, _) = fixture();
        let index = KnnIndex::from_demos(&robot_demos(), &KnnConfig::default()).unwrap();
        assert!(EnsemblePolicy::new(bc, index, EnsembleConfig { alpha: 1.0 }).is_err());
    }
}
