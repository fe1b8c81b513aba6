//! Episode rollouts with ε-greedy exploration and TD updates.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{select_actions, td_loss, update_target, AgentNet, AgentStep, QmixNet, ReplayBuffer, Transition, KEEP_INDEX};
use crate::error::{Error, Result};
use crate::nn::Adam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Team reward of the tick.
    pub reward: f64,
    /// No bootstrapping past this tick (collision, or no agents left).
    pub terminal: bool,
    /// The episode is over, terminal or truncated.
    pub done: bool,
}

/// Multi-agent environment driven at decision ticks.
pub trait MultiAgentEnv {
    fn n_max(&self) -> usize;
    fn reset(&mut self, episode: u64) -> Result<()>;
    /// Observations of the agents currently present, keyed by mixer slot.
    fn observe(&self) -> Result<Vec<(usize, Vec<f64>)>>;
    fn global_state(&self) -> Vec<f64>;
    /// Applies `(slot, action index)` pairs and advances one tick.
    fn step(&mut self, actions: &[(usize, usize)]) -> Result<StepOutcome>;
    /// Platoon rate of the episode so far.
    fn platoon_rate(&self) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointTag {
    Initial,
    Periodic,
    Best,
}

pub trait CheckpointSink {
    fn save(&mut self, tag: CheckpointTag, episode: usize, params: &[f64]) -> Result<()>;
}

/// Discards checkpoints.
impl CheckpointSink for () {
    fn save(&mut self, _: CheckpointTag, _: usize, _: &[f64]) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub memory_size: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `episodes` over which ε decays linearly.
    pub epsilon_decay: f64,
    /// Gradient steps between target copies.
    pub target_update: usize,
    pub checkpoint_period: usize,
    pub train_steps_per_episode: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            gamma: 0.5,
            learning_rate: 1e-4,
            memory_size: 5000,
            batch_size: 128,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.6,
            target_update: 200,
            checkpoint_period: 200,
            train_steps_per_episode: 1,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.gamma) || !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) {
            return Err(Error::Config("gamma and epsilon must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.memory_size < self.batch_size {
            return Err(Error::Config("need a positive learning rate and memory_size >= batch_size >= 1".into()));
        }
        if self.target_update == 0 || self.checkpoint_period == 0 || !(self.epsilon_decay > 0.0) {
            return Err(Error::Config("target_update, checkpoint_period and epsilon_decay must be positive".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        let horizon = self.epsilon_decay * self.episodes as f64;
        let frac = if horizon > 0.0 { (episode as f64 / horizon).min(1.0) } else { 1.0 };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub epsilon: f64,
    /// Sum of team rewards over the episode.
    pub reward: f64,
    /// Team reward per tick.
    pub mean_reward: f64,
    pub platoon_rate: f64,
    /// Mean TD loss of the episode's updates, if any ran.
    pub loss: Option<f64>,
    pub ticks: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub best_params: Vec<f64>,
    pub log: Vec<TrainLogRow>,
    pub updates: usize,
}

fn agent_steps(
    obs: Vec<(usize, Vec<f64>)>,
    hidden: &BTreeMap<usize, Vec<f64>>,
    last: &BTreeMap<usize, usize>,
) -> Vec<AgentStep> {
    obs.into_iter()
        .map(|(id, obs)| AgentStep {
            id,
            obs,
            last_action: last.get(&id).copied().unwrap_or(KEEP_INDEX),
            hidden: hidden.get(&id).cloned().unwrap_or_else(AgentNet::zero_hidden),
        })
        .collect()
}

/// Runs `cfg.episodes` training episodes from `init` parameters.
pub fn train<E: MultiAgentEnv, S: CheckpointSink>(
    net: &QmixNet,
    init: Vec<f64>,
    env: &mut E,
    cfg: &TrainConfig,
    sink: &mut S,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.len() != net.param_count() {
        return Err(Error::Shape(alloc::format!("expected {} parameters, got {}", net.param_count(), init.len())));
    }
    if env.n_max() != net.agent.n_max {
        return Err(Error::AgentCountMismatch { expected: net.agent.n_max, found: env.n_max() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut target = params.clone();
    let mut best_params = params.clone();
    let mut opt = Adam::new(params.len(), cfg.learning_rate);
    opt.clip_norm = cfg.clip_norm;
    let mut replay = ReplayBuffer::new(cfg.memory_size)?;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut updates = 0usize;
    let mut best = f64::NEG_INFINITY;
    sink.save(CheckpointTag::Initial, 0, &params)?;

    for episode in 0..cfg.episodes {
        let eps = cfg.epsilon(episode);
        env.reset(episode as u64)?;
        let mut hidden: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut last: BTreeMap<usize, usize> = BTreeMap::new();
        let mut agents = agent_steps(env.observe()?, &hidden, &last);
        let mut state = env.global_state();
        let (mut ret, mut ticks) = (0.0, 0usize);
        loop {
            let (actions, next_h) = select_actions(&net.agent, &params, &agents, eps, &mut rng)?;
            let joint: Vec<(usize, usize)> = agents.iter().map(|a| a.id).zip(actions.iter().copied()).collect();
            let out = env.step(&joint)?;
            for (a, h) in agents.iter().zip(next_h) {
                hidden.insert(a.id, h);
            }
            for &(id, u) in &joint {
                last.insert(id, u);
            }
            let next_agents = agent_steps(env.observe()?, &hidden, &last);
            let next_state = env.global_state();
            ret += out.reward;
            ticks += 1;
            if !agents.is_empty() {
                replay.push(Transition {
                    agents: core::mem::take(&mut agents),
                    actions,
                    state: core::mem::take(&mut state),
                    reward: out.reward,
                    next_agents: next_agents.clone(),
                    next_state: next_state.clone(),
                    terminal: out.terminal,
                });
            }
            if out.done {
                break;
            }
            agents = next_agents;
            state = next_state;
        }

        let mut losses = Vec::new();
        if replay.len() >= cfg.batch_size {
            for _ in 0..cfg.train_steps_per_episode {
                let batch = replay.sample(cfg.batch_size, &mut rng)?;
                let (loss, grads) = td_loss(net, &params, &target, &batch, cfg.gamma)?;
                opt.step(&mut params, &grads)?;
                losses.push(loss);
                updates += 1;
                if updates % cfg.target_update == 0 {
                    update_target(&params, &mut target);
                }
            }
        }
        let row = TrainLogRow {
            episode,
            epsilon: eps,
            reward: ret,
            mean_reward: if ticks > 0 { ret / ticks as f64 } else { 0.0 },
            platoon_rate: env.platoon_rate()?,
            loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            ticks,
        };
        if ret > best {
            best = ret;
            best_params.clone_from(&params);
            sink.save(CheckpointTag::Best, episode + 1, &params)?;
        }
        if (episode + 1) % cfg.checkpoint_period == 0 {
            sink.save(CheckpointTag::Periodic, episode + 1, &params)?;
        }
        log.push(row);
    }
    Ok(TrainOutcome { params, best_params, log, updates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observe::GridConfig;
    use alloc::vec;
    use alloc::vec::Vec;

    /// Two agents on a line; action `keep` pays 1, anything else 0; the
    /// episode lasts three ticks.
    struct Toy {
        t: usize,
    }

    impl MultiAgentEnv for Toy {
        fn n_max(&self) -> usize {
            2
        }
        fn reset(&mut self, _: u64) -> Result<()> {
            self.t = 0;
            Ok(())
        }
        fn observe(&self) -> Result<Vec<(usize, Vec<f64>)>> {
            Ok((0..2).map(|i| (i, vec![self.t as f64 * 0.1 + i as f64; 24])).collect())
        }
        fn global_state(&self) -> Vec<f64> {
            vec![self.t as f64; 6]
        }
        fn step(&mut self, actions: &[(usize, usize)]) -> Result<StepOutcome> {
            self.t += 1;
            let r = actions.iter().filter(|a| a.1 == KEEP_INDEX).count() as f64 / 2.0;
            Ok(StepOutcome { reward: r, terminal: self.t == 3, done: self.t == 3 })
        }
        fn platoon_rate(&self) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[derive(Default)]
    struct Record(Vec<(CheckpointTag, usize)>);

    impl CheckpointSink for Record {
        fn save(&mut self, tag: CheckpointTag, episode: usize, _: &[f64]) -> Result<()> {
            self.0.push((tag, episode));
            Ok(())
        }
    }

    fn net() -> QmixNet {
        let grid = GridConfig { l_tail: 20.0, l_head: 20.0, l_grid: 10.0, lanes: 2, v_max: 30.0 };
        QmixNet::new(AgentNet::cnn(&grid, 2).unwrap(), 6)
    }

    fn cfg(episodes: usize) -> TrainConfig {
        TrainConfig { episodes, batch_size: 8, memory_size: 64, target_update: 5, checkpoint_period: 4, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_episodes_only_saves_initial() {
        let n = net();
        let init = n.init(&mut ChaCha8Rng::seed_from_u64(1));
        let mut rec = Record::default();
        let out = train(&n, init.clone(), &mut Toy { t: 0 }, &cfg(0), &mut rec).unwrap();
        assert_eq!(rec.0, vec![(CheckpointTag::Initial, 0)]);
        assert_eq!(out.params, init);
        assert_eq!(out.updates, 0);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let n = net();
        let init = n.init(&mut ChaCha8Rng::seed_from_u64(1));
        let mut rec = Record::default();
        let a = train(&n, init.clone(), &mut Toy { t: 0 }, &cfg(9), &mut rec).unwrap();
        let b = train(&n, init, &mut Toy { t: 0 }, &cfg(9), &mut ()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert!(a.updates > 0);
        assert!(a.log.iter().all(|r| r.ticks == 3));
        let periodic: Vec<usize> = rec.0.iter().filter(|c| c.0 == CheckpointTag::Periodic).map(|c| c.1).collect();
        assert_eq!(periodic, vec![4, 8]);
        assert!(rec.0.iter().any(|c| c.0 == CheckpointTag::Best));
    }

    #[test]
    fn epsilon_schedule() {
        let c = TrainConfig { episodes: 100, ..TrainConfig::default() };
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(30) - 0.525).abs() < 1e-12);
        assert!((c.epsilon(60) - 0.05).abs() < 1e-12);
        assert!((c.epsilon(99) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_environment() {
        let grid = GridConfig { l_tail: 20.0, l_head: 20.0, l_grid: 10.0, lanes: 2, v_max: 30.0 };
        let n = QmixNet::new(AgentNet::cnn(&grid, 3).unwrap(), 6);
        let init = vec![0.0; n.param_count()];
        assert!(matches!(
            train(&n, init, &mut Toy { t: 0 }, &cfg(1), &mut ()),
            Err(Error::AgentCountMismatch { expected: 3, found: 2 })
        ));
    }
}
