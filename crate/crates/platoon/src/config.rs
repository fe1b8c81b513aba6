//! TOML run configuration.
//!
//! Every section is optional and falls back to the library defaults. Unknown
//! top-level sections are rejected so that typos do not go unnoticed.

use std::path::Path;

use platoon_core::baseline::{GreedyParams, MobilParams};
use platoon_core::episode::EpisodeConfig;
use platoon_core::exec::mpc::MpcConfig;
use platoon_core::exec::planner::PlannerCostWeights;
use platoon_core::exec::tracker::ExecConfig;
use platoon_core::longitudinal::LongitudinalConfig;
use platoon_core::observe::{EngagementRule, GridConfig, RewardConfig, StateConfig};
use platoon_core::qmix::TrainConfig;
use platoon_core::sim::{BicycleParams, ScenarioConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

/// Lane-change execution settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionSection {
    /// Shortest candidate maneuver duration; the planner also tries the
    /// next `candidates - 1` whole seconds.
    #[serde(rename = "T_D")]
    pub t_d: f64,
    pub candidates: usize,
    pub abort_horizon: f64,
    pub keep_k_y: f64,
    pub keep_k_theta: f64,
    pub mpc: MpcConfig,
    pub weights: PlannerCostWeights,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        let d = ExecConfig::default();
        Self {
            t_d: d.durations[0],
            candidates: d.durations.len(),
            abort_horizon: d.abort_horizon,
            keep_k_y: d.keep_k_y,
            keep_k_theta: d.keep_k_theta,
            mpc: d.mpc,
            weights: d.weights,
        }
    }
}

impl ExecutionSection {
    pub fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            mpc: self.mpc.clone(),
            weights: self.weights,
            durations: (0..self.candidates).map(|k| self.t_d + k as f64).collect(),
            abort_horizon: self.abort_horizon,
            keep_k_y: self.keep_k_y,
            keep_k_theta: self.keep_k_theta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub decision_period: f64,
    pub max_time: f64,
    pub rlc_reference: f64,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let d = EpisodeConfig::default();
        Self { decision_period: d.decision_period, max_time: d.max_time, rlc_reference: d.rlc_reference }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Cnn,
    Flat,
}

/// Learned-policy setup that is not part of the optimizer schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub encoder: EncoderKind,
    /// Penetration rates cycled through during training.
    pub train_mprs: Vec<f64>,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    /// Base seed of training scenarios; episode `k` uses `scenario_seed + k`.
    pub scenario_seed: u64,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self { encoder: EncoderKind::Cnn, train_mprs: vec![0.5], init_seed: 3, scenario_seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub bicycle: BicycleParams,
    pub longitudinal: LongitudinalConfig,
    pub execution: ExecutionSection,
    pub mobil: MobilParams,
    pub greedy: GreedyParams,
    pub reward: RewardConfig,
    pub grid: GridConfig,
    pub state: StateConfig,
    pub engagement: EngagementRule,
    pub episode: EpisodeSection,
    pub train: TrainConfig,
    pub agent: AgentSection,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.episode_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&s)
    }

    /// Loads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Small road used for training on a desktop: 8 vehicles on 600 m.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.scenario.road.segment_length = 600.0;
        c.scenario.vehicle_count = 8;
        c.scenario.spawn_range = [50.0, 200.0];
        c.scenario.mpr = 0.5;
        c
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            scenario: self.scenario.clone(),
            bicycle: self.bicycle,
            longitudinal: self.longitudinal.clone(),
            exec: self.execution.exec_config(),
            mobil: self.mobil,
            greedy: self.greedy,
            reward: self.reward,
            grid: self.grid,
            state: self.state,
            engagement: self.engagement,
            decision_period: self.episode.decision_period,
            max_time: self.episode.max_time,
            rlc_reference: self.episode.rlc_reference,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.episode_config(), EpisodeConfig::default());
    }

    #[test]
    fn duration_candidates_follow_t_d() {
        let c = Config::from_toml_str("[execution]\nT_D = 3.0\n").unwrap();
        assert_eq!(c.episode_config().exec.durations, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::desk();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(Config::from_toml_str("[scenaro]\nmpr = 0.5\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("[grid]\nlanes = 5\n").is_err());
    }
}
