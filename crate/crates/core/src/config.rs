//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::FusionParams;
use crate::ddpg::{DdpgConfig, RewardConfig};
use crate::error::{Error, Result};
use crate::eval::{CollectConfig, EvalSettings, Policy};
use crate::hmm::HazardMap;
use crate::orca::OrcaParams;
use crate::sim::WorldConfig;

pub const SEED_ENV: &str = "HNRN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmConfig {
    #[serde(rename = "Hidden state number of HMM", alias = "states")]
    pub states: usize,
    /// Sector count of the reduced observation; must divide the beam count.
    pub dims: usize,
    /// Frames in the classification window.
    pub window: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub hazard_map: HazardMap,
}

impl Default for HmmConfig {
    fn default() -> Self {
        HmmConfig { states: 10, dims: 36, window: 8, max_iters: 50, tol: 1e-3, hazard_map: HazardMap::Linear }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policies: Vec<Policy>,
    pub agent_counts: Vec<usize>,
    pub trials: usize,
    /// Step horizon per evaluation episode.
    pub horizon: usize,
    /// Agent count of the `demo` episode.
    pub demo_agents: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        EvalConfig {
            policies: vec![Policy::Orca, Policy::TargetOnly],
            agent_counts: s.agent_counts,
            trials: s.trials,
            horizon: s.horizon,
            demo_agents: 4,
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings { agent_counts: self.agent_counts.clone(), trials: self.trials, horizon: self.horizon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { episodes: 300 }
    }
}

/// Artifact locations, relative to the working directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub hmm: PathBuf,
    pub actor: PathBuf,
    pub critic: PathBuf,
    pub raw_actor: PathBuf,
    pub curves: PathBuf,
    pub report: PathBuf,
    pub episodes: PathBuf,
    pub trajectory: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let p = |name: &str| PathBuf::from("artifacts").join(name);
        Paths {
            dataset: p("dataset.jsonl"),
            hmm: p("hmm.bin"),
            actor: p("actor.bin"),
            critic: p("critic.bin"),
            raw_actor: p("raw_actor.bin"),
            curves: p("curves.jsonl"),
            report: p("report.csv"),
            episodes: p("episodes.jsonl"),
            trajectory: p("trajectory.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub hmm: HmmConfig,
    pub ddpg: DdpgConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub fusion: FusionParams,
    pub orca: OrcaParams,
    pub eval: EvalConfig,
    pub collect: CollectConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            world: WorldConfig::default(),
            hmm: HmmConfig::default(),
            ddpg: DdpgConfig::default(),
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionParams::default(),
            orca: OrcaParams::default(),
            eval: EvalConfig::default(),
            collect: CollectConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.ddpg.validate()?;
        if self.hmm.dims == 0 || !self.world.laser.beam_count.is_multiple_of(self.hmm.dims) {
            return Err(Error::Config(format!(
                "observation size {} does not divide {} beams",
                self.hmm.dims, self.world.laser.beam_count
            )));
        }
        if self.hmm.states == 0 {
            return Err(Error::Config("the HMM needs at least one hidden state".into()));
        }
        Ok(())
    }

    /// CLI flag first, then the environment variable, then the file.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        if let Some(s) = cli {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
            Err(_) => Ok(self.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("\"Max speed in ORCA\" = 1.0"));
        assert!(text.contains("\"Hidden state number of HMM\" = 10"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn table_names_are_accepted() {
        let cfg = RunConfig::from_toml(
            "[orca]\n\"Time horizon in ORCA\" = 2.0\n[ddpg]\n\"Batch size\" = 64\n[world]\n\"Delay of control\" = 0.05\n",
        )
        .unwrap();
        assert_eq!(cfg.orca.time_horizon, 2.0);
        assert_eq!(cfg.ddpg.batch_size, 64);
        assert_eq!(cfg.world.dt, 0.05);
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(RunConfig::from_toml("[hmm]\ndims = 7\n").is_err());
    }
}
