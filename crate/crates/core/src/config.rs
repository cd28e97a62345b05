//! TOML run configuration. Section keys are the field names of the
//! corresponding library structs; command-line flags override them.
//!
//! ```toml
//! [sim]            # any SimConfig field; defaults depend on the object
//! tracking_noise_std = 0.0002
//!
//! [train]          # TrainConfig
//! epochs = 40
//! learning_rate = 0.03
//!
//! [knn]            # KnnConfig
//! k = 5
//!
//! [ensemble]
//! quantile = 0.99  # used when alpha is calibrated
//!
//! [bench]          # BenchConfig (has its own train/knn sub-tables)
//! seeds = 5
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::bc::TrainConfig;
use crate::ensemble::DEFAULT_QUANTILE;
use crate::error::{Error, Result};
use crate::knn::KnnConfig;
use crate::sim::{ObjectKind, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub quantile: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { quantile: DEFAULT_QUANTILE }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides applied on top of the per-object simulator defaults.
    pub sim: toml::Table,
    pub train: TrainConfig,
    pub knn: KnnConfig,
    pub ensemble: EnsembleSection,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        if cfg.sim.contains_key("object") {
            return Err(Error::Validation("config: choose the object on the command line, not in [sim]".into()));
        }
        Ok(cfg)
    }

    /// Simulator settings for `object` with the `[sim]` overrides applied.
    pub fn sim_for(&self, object: ObjectKind) -> Result<SimConfig> {
        let base = SimConfig::for_object(object);
        if self.sim.is_empty() {
            return Ok(base);
        }
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Validation(format!("config: {e}")))?;
        for (k, v) in &self.sim {
            table.insert(k.clone(), v.clone());
        }
        let cfg: SimConfig = table.try_into().map_err(|e| Error::Validation(format!("config [sim]: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sim_for(ObjectKind::Ball14).unwrap(), SimConfig::for_object(ObjectKind::Ball14));
    }

    #[test]
    fn sim_overrides_keep_object_defaults() {
        let cfg = RunConfig::parse("[sim]\ntracking_noise_std = 0.0\n[train]\nepochs = 3\n").unwrap();
        let sim = cfg.sim_for(ObjectKind::Ball14).unwrap();
        assert_eq!(sim.tracking_noise_std, 0.0);
        assert_eq!(sim.grasp_tolerance, ObjectKind::Ball14.default_grasp_tolerance());
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::parse("[sim]\nobject = \"cube\"\n").is_err());
        let cfg = RunConfig::parse("[sim]\nrate_hz = -1.0\n").unwrap();
        assert!(cfg.sim_for(ObjectKind::Cube).is_err());
        let cfg = RunConfig::parse("[sim]\nbogus = 1\n").unwrap();
        assert!(cfg.sim_for(ObjectKind::Cube).is_err());
    }
}
