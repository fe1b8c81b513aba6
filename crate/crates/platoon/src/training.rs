//! Training runs driven by a [`Config`].

use std::path::{Path, PathBuf};

use platoon_core::episode::QmixEnv;
use platoon_core::qmix::train::TrainOutcome;
use platoon_core::qmix::{train, AgentNet, CheckpointTag, QmixNet, TrainLogRow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, DirSink};
use crate::config::{Config, EncoderKind};
use crate::error::{io_err, Error, Result};

/// Network for the configured encoder. The flat encoder is sized for the CAV
/// count of the single training penetration rate.
pub fn build_net(cfg: &Config) -> Result<QmixNet> {
    let ep = cfg.episode_config();
    let n = cfg.scenario.vehicle_count;
    let agent = match cfg.agent.encoder {
        EncoderKind::Cnn => AgentNet::cnn(&ep.grid, n)?,
        EncoderKind::Flat => {
            let [mpr] = cfg.agent.train_mprs[..] else {
                return Err(Error::Spec("the flat encoder trains on exactly one penetration rate".into()));
            };
            let mut s = ep.scenario.clone();
            s.mpr = mpr;
            AgentNet::flat(s.cav_count(), n)?
        }
    };
    Ok(QmixNet::new(agent, ep.state_dim()))
}

pub struct TrainingRun {
    pub net: QmixNet,
    pub outcome: TrainOutcome,
    /// Final parameters as a checkpoint (not written to disk).
    pub last: Checkpoint,
    pub best: Checkpoint,
}

/// Trains from scratch. With `out`, checkpoints go to `out` together with
/// `final.ckpt` and `train_log.csv`.
pub fn run_training(cfg: &Config, out: Option<&Path>) -> Result<TrainingRun> {
    let ep = cfg.episode_config();
    let net = build_net(cfg)?;
    let mut env = QmixEnv::new(ep.clone(), cfg.agent.train_mprs.clone(), cfg.agent.scenario_seed, net.agent)?;
    let init = net.init(&mut ChaCha8Rng::seed_from_u64(cfg.agent.init_seed));
    let outcome = match out {
        Some(dir) => {
            let mut sink = DirSink::new(dir, net.clone(), ep.grid, ep.state)?;
            let o = train(&net, init, &mut env, &cfg.train, &mut sink)?;
            sink.write("final.ckpt", CheckpointTag::Periodic, cfg.train.episodes, &o.params)?;
            write_train_log(&dir.join("train_log.csv"), &o.log)?;
            o
        }
        None => train(&net, init, &mut env, &cfg.train, &mut ())?,
    };
    let ckpt = |tag, params: &[f64]| Checkpoint::new(net.clone(), ep.grid, ep.state, tag, cfg.train.episodes, params.to_vec());
    Ok(TrainingRun {
        last: ckpt(CheckpointTag::Periodic, &outcome.params),
        best: ckpt(CheckpointTag::Best, &outcome.best_params),
        net,
        outcome,
    })
}

pub fn write_train_log(path: &Path, log: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: PathBuf::from(path), source },
        k => Error::Spec(format!("{k:?}")),
    })?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Mean return over the first and last `fraction` of the log.
pub fn return_windows(log: &[TrainLogRow], fraction: f64) -> Option<(f64, f64)> {
    let k = ((log.len() as f64 * fraction).round() as usize).max(1);
    if log.len() < 2 * k {
        return None;
    }
    let mean = |rows: &[TrainLogRow]| rows.iter().map(|r| r.reward).sum::<f64>() / rows.len() as f64;
    Some((mean(&log[..k]), mean(&log[log.len() - k..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(episode: usize, reward: f64) -> TrainLogRow {
        TrainLogRow { episode, epsilon: 0.0, reward, mean_reward: 0.0, platoon_rate: 0.0, loss: None, ticks: 1 }
    }

    #[test]
    fn windows() {
        let log: Vec<_> = (0..20).map(|k| row(k, k as f64)).collect();
        assert_eq!(return_windows(&log, 0.1), Some((0.5, 18.5)));
        assert_eq!(return_windows(&log[..1], 0.1), None);
    }

    #[test]
    fn flat_encoder_needs_single_rate() {
        let mut c = Config::desk();
        c.agent.encoder = EncoderKind::Flat;
        c.agent.train_mprs = vec![0.25, 0.5];
        assert!(build_net(&c).is_err());
        c.agent.train_mprs = vec![0.5];
        let net = build_net(&c).unwrap();
        assert_eq!(net.agent.obs_len(), 4 * 4);
    }
}
