//! Seeded policy sweeps over penetration rates.

use std::path::{Path, PathBuf};

use platoon_core::episode::{rule_decider, run_episode, CavDecider, EpisodeConfig, Policy, QmixDecider};
use platoon_core::observe::EpisodeMetrics;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{io_err, Error, Result};

/// Version of the CSV and JSON result layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub policy: Policy,
    pub mprs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Episode cap in seconds; `None` keeps the config value.
    pub episode_length: Option<f64>,
    pub config: Config,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(policy: Policy, mprs: Vec<f64>, seeds: Vec<u64>, config: Config) -> Self {
        Self { policy, mprs, seeds, episode_length: None, config, checkpoint: None, out: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Spec("no seeds given".into()));
        }
        if self.mprs.is_empty() {
            return Err(Error::Spec("no penetration rates given".into()));
        }
        if let Some(m) = self.mprs.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::Spec(format!("penetration rate {m} outside [0, 1]")));
        }
        if matches!(self.episode_length, Some(t) if !(t > 0.0)) {
            return Err(Error::Spec("episode length must be positive".into()));
        }
        if self.policy.is_learned() && self.checkpoint.is_none() {
            return Err(Error::Spec(format!("policy {} needs a checkpoint", self.policy)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub schema_version: u32,
    pub policy: Policy,
    pub mpr: f64,
    pub seed: u64,
    pub platoon_rate: f64,
    pub max_platoon_length: usize,
    pub formation_time: Option<f64>,
    pub lane_changes_per_vehicle: f64,
    pub mean_speed: f64,
    pub energy: f64,
    pub collisions: usize,
    pub ticks: usize,
}

impl EpisodeRow {
    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics {
            platoon_rate: self.platoon_rate,
            max_platoon_length: self.max_platoon_length,
            formation_time: self.formation_time,
            lane_changes_per_vehicle: self.lane_changes_per_vehicle,
            mean_speed: self.mean_speed,
            energy: self.energy,
            collisions: self.collisions,
        }
    }
}

/// Mean and sample standard deviation (n - 1) of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema_version: u32,
    pub policy: Policy,
    pub mpr: f64,
    pub episodes: usize,
    pub platoon_rate_mean: f64,
    pub platoon_rate_std: f64,
    pub max_platoon_length_mean: f64,
    pub max_platoon_length_std: f64,
    /// Episodes in which a platoon formed; formation time is averaged over those.
    pub formed_episodes: usize,
    pub formation_time_mean: Option<f64>,
    pub formation_time_std: Option<f64>,
    pub lane_changes_per_vehicle_mean: f64,
    pub lane_changes_per_vehicle_std: f64,
    pub mean_speed_mean: f64,
    pub mean_speed_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub collision_episodes: usize,
}

impl AggregateRow {
    /// Aggregates rows sharing one policy and penetration rate.
    pub fn from_rows(rows: &[EpisodeRow]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Spec("nothing to aggregate".into()))?;
        if rows.iter().any(|r| r.policy != first.policy || r.mpr != first.mpr) {
            return Err(Error::Spec("aggregate over mixed policy or penetration rate".into()));
        }
        let stat = |f: fn(&EpisodeRow) -> f64| Stat::of(&rows.iter().map(f).collect::<Vec<_>>()).unwrap();
        let formed: Vec<f64> = rows.iter().filter_map(|r| r.formation_time).collect();
        let ft = Stat::of(&formed);
        let pr = stat(|r| r.platoon_rate);
        let ml = stat(|r| r.max_platoon_length as f64);
        let lc = stat(|r| r.lane_changes_per_vehicle);
        let sp = stat(|r| r.mean_speed);
        let en = stat(|r| r.energy);
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            policy: first.policy,
            mpr: first.mpr,
            episodes: rows.len(),
            platoon_rate_mean: pr.mean,
            platoon_rate_std: pr.std,
            max_platoon_length_mean: ml.mean,
            max_platoon_length_std: ml.std,
            formed_episodes: formed.len(),
            formation_time_mean: ft.map(|s| s.mean),
            formation_time_std: ft.map(|s| s.std),
            lane_changes_per_vehicle_mean: lc.mean,
            lane_changes_per_vehicle_std: lc.std,
            mean_speed_mean: sp.mean,
            mean_speed_std: sp.std,
            energy_mean: en.mean,
            energy_std: en.std,
            collision_episodes: rows.iter().filter(|r| r.collisions > 0).count(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub schema_version: u32,
    pub episodes: Vec<EpisodeRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ResultsTable {
    /// Builds a table, aggregating per (policy, mpr) in first-seen order.
    pub fn from_episodes(episodes: Vec<EpisodeRow>) -> Result<Self> {
        let mut keys: Vec<(Policy, f64)> = Vec::new();
        for r in &episodes {
            if !keys.iter().any(|k| *k == (r.policy, r.mpr)) {
                keys.push((r.policy, r.mpr));
            }
        }
        let aggregates = keys
            .iter()
            .map(|&(p, m)| {
                let group: Vec<EpisodeRow> = episodes.iter().filter(|r| r.policy == p && r.mpr == m).cloned().collect();
                AggregateRow::from_rows(&group)
            })
            .collect::<Result<_>>()?;
        Ok(Self { schema_version: SCHEMA_VERSION, episodes, aggregates })
    }

    pub fn policies(&self) -> Vec<Policy> {
        let mut out = Vec::new();
        for r in &self.episodes {
            if !out.contains(&r.policy) {
                out.push(r.policy);
            }
        }
        out
    }

    pub fn aggregate(&self, policy: Policy, mpr: f64) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.policy == policy && a.mpr == mpr)
    }

    pub fn episodes_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.episodes)
    }

    pub fn aggregate_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.aggregates)
    }

    /// Writes `episodes.csv`, `aggregate.csv` and `results.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, bytes: Vec<u8>| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(io_err(p))
        };
        write("episodes.csv", self.episodes_csv()?)?;
        write("aggregate.csv", self.aggregate_csv()?)?;
        write("results.json", serde_json::to_vec_pretty(self)?)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let t: Self = serde_json::from_slice(&bytes)?;
        if t.schema_version != SCHEMA_VERSION {
            return Err(Error::Spec(format!("{}: schema version {}", path.display(), t.schema_version)));
        }
        Ok(t)
    }

    pub fn read_episodes_csv(path: &Path) -> Result<Vec<EpisodeRow>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<Result<_, _>>()?)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Spec(e.to_string()))
}

/// Episode config for one sweep cell.
pub fn cell_config(base: &EpisodeConfig, mpr: f64, seed: u64, episode_length: Option<f64>) -> EpisodeConfig {
    let mut c = base.clone();
    c.scenario.mpr = mpr;
    c.scenario.seed = seed;
    if let Some(t) = episode_length {
        c.max_time = t;
    }
    c
}

/// Runs every (mpr, seed) cell in parallel. Rows come back in sweep order,
/// so output files do not depend on thread scheduling.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultsTable> {
    spec.validate()?;
    let mut base = spec.config.episode_config();
    let checkpoint = match &spec.checkpoint {
        Some(p) if spec.policy.is_learned() => {
            let c = Checkpoint::load(p)?;
            let flat = c.is_flat();
            if flat != (spec.policy == Policy::FlatQmix) {
                return Err(Error::Spec(format!(
                    "checkpoint {} holds a {} network, not {}",
                    p.display(),
                    if flat { "flat" } else { "convolutional" },
                    spec.policy
                )));
            }
            base.grid = c.header.grid;
            base.state = c.header.state;
            Some(c)
        }
        _ => None,
    };
    base.validate()?;
    let cells: Vec<(f64, u64)> = spec.mprs.iter().flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s))).collect();
    let rows = cells
        .par_iter()
        .map(|&(mpr, seed)| {
            let cfg = cell_config(&base, mpr, seed, spec.episode_length);
            let mut decider: Box<dyn CavDecider + '_> = match &checkpoint {
                Some(c) => Box::new(QmixDecider::new(c.header.net.agent, &c.params)?),
                None => rule_decider(spec.policy, seed)?,
            };
            let out = run_episode(&cfg, decider.as_mut())?;
            let m = out.metrics;
            Ok(EpisodeRow {
                schema_version: SCHEMA_VERSION,
                policy: spec.policy,
                mpr,
                seed,
                platoon_rate: m.platoon_rate,
                max_platoon_length: m.max_platoon_length,
                formation_time: m.formation_time,
                lane_changes_per_vehicle: m.lane_changes_per_vehicle,
                mean_speed: m.mean_speed,
                energy: m.energy,
                collisions: m.collisions,
                ticks: out.ticks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = ResultsTable::from_episodes(rows)?;
    if let Some(dir) = &spec.out {
        table.write_dir(dir)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_uses_n_minus_one() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn spec_validation() {
        let c = Config::default();
        assert!(ExperimentSpec::new(Policy::Mobil, vec![0.5], vec![], c.clone()).validate().is_err());
        assert!(ExperimentSpec::new(Policy::Mobil, vec![1.5], vec![0], c.clone()).validate().is_err());
        assert!(ExperimentSpec::new(Policy::CnnQmix, vec![0.5], vec![0], c.clone()).validate().is_err());
        assert!(ExperimentSpec::new(Policy::Greedy, vec![0.5], vec![0], c).validate().is_ok());
    }
}
