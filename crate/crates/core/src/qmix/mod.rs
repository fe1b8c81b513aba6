//! CNN-QMIX: weight-shared recurrent agent networks, a monotone mixer,
//! replay, and the TD training loop.
//!
//! Action indices are `0` right, `1` keep, `2` left.

pub mod agent;
pub mod mixer;
pub mod replay;
pub mod train;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::Action;
use crate::error::{Error, Result};
use crate::math;

pub use agent::{AgentCache, AgentInput, AgentNet, Encoder};
pub use mixer::{MixCache, Mixer};
pub use replay::ReplayBuffer;
pub use train::{train, CheckpointSink, CheckpointTag, MultiAgentEnv, StepOutcome, TrainConfig, TrainLogRow};

pub const ACTIONS: usize = 3;
pub const KEEP_INDEX: usize = 1;

pub fn action_of_index(i: usize) -> Action {
    i as Action - 1
}

pub fn index_of_action(a: Action) -> usize {
    (a + 1) as usize
}

/// Agent network plus mixer over one flat parameter vector (agent first).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmixNet {
    pub agent: AgentNet,
    pub mixer: Mixer,
}

impl QmixNet {
    pub fn new(agent: AgentNet, state_dim: usize) -> Self {
        let mixer = Mixer::new(agent.n_max, state_dim, agent.param_count());
        Self { agent, mixer }
    }

    pub fn param_count(&self) -> usize {
        self.agent.param_count() + self.mixer.param_count()
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        self.agent.init(&mut p, rng);
        self.mixer.init(&mut p, rng);
        p
    }
}

/// One agent slot of a transition. `id` doubles as the mixer slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub id: usize,
    pub obs: Vec<f64>,
    pub last_action: usize,
    pub hidden: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub agents: Vec<AgentStep>,
    /// Action index taken by each entry of `agents`.
    pub actions: Vec<usize>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub next_agents: Vec<AgentStep>,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    pub fn mask(&self, n_max: usize) -> Vec<f64> {
        presence(&self.agents, n_max)
    }
}

fn presence(agents: &[AgentStep], n_max: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_max];
    for a in agents {
        if a.id < n_max {
            m[a.id] = 1.0;
        }
    }
    m
}

fn input(a: &AgentStep) -> AgentInput<'_> {
    AgentInput { obs: &a.obs, last_action: a.last_action, agent_id: a.id, hidden: &a.hidden }
}

/// ε-greedy joint action. Returns action indices and next hidden states.
pub fn select_actions<R: Rng>(
    net: &AgentNet,
    params: &[f64],
    agents: &[AgentStep],
    epsilon: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(alloc::format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut actions = Vec::with_capacity(agents.len());
    let mut hiddens = Vec::with_capacity(agents.len());
    for a in agents {
        let (q, h) = net.q_values(params, &input(a))?;
        let explore = rng.gen::<f64>() < epsilon;
        actions.push(if explore { rng.gen_range(0..ACTIONS) } else { math::argmax(&q) });
        hiddens.push(h);
    }
    Ok((actions, hiddens))
}

/// Joint value of the agents' chosen actions.
pub fn q_total(net: &QmixNet, params: &[f64], agents: &[AgentStep], actions: &[usize], state: &[f64]) -> Result<f64> {
    let n = net.agent.n_max;
    let mut qs = vec![0.0; n];
    for (a, &u) in agents.iter().zip(actions) {
        qs[a.id] = net.agent.q_values(params, &input(a))?.0[u];
    }
    Ok(net.mixer.forward(params, &qs, &presence(agents, n), state)?.q_total)
}

/// Bootstrapped targets `r + γ·Q_total^target(s', argmax)`; terminal
/// transitions keep only `r`. Target joint actions are per-agent argmaxes.
pub fn td_targets(net: &QmixNet, target: &[f64], batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    let n = net.agent.n_max;
    batch
        .iter()
        .map(|tr| {
            if tr.terminal {
                return Ok(tr.reward);
            }
            let mut next = vec![0.0; n];
            for a in &tr.next_agents {
                if a.id >= n {
                    return Err(Error::Contract(alloc::format!("agent {} out of range", a.id)));
                }
                let q = net.agent.q_values(target, &input(a))?.0;
                next[a.id] = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            let mask = presence(&tr.next_agents, n);
            Ok(tr.reward + gamma * net.mixer.forward(target, &next, &mask, &tr.next_state)?.q_total)
        })
        .collect()
}

/// Mean squared error against precomputed targets and its gradient.
pub fn td_loss_against(net: &QmixNet, params: &[f64], batch: &[&Transition], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() || targets.len() != batch.len() {
        return Err(Error::Contract("batch must be nonempty with one target per transition".into()));
    }
    let n = net.agent.n_max;
    let mut grads = vec![0.0; params.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (tr, &y) in batch.iter().zip(targets) {
        if tr.actions.len() != tr.agents.len() {
            return Err(Error::Contract("one action per agent required".into()));
        }
        let mut caches = Vec::with_capacity(tr.agents.len());
        let mut qs = vec![0.0; n];
        for (a, &u) in tr.agents.iter().zip(&tr.actions) {
            if a.id >= n || u >= ACTIONS {
                return Err(Error::Contract(alloc::format!("agent {} or action {u} out of range", a.id)));
            }
            let c = net.agent.forward(params, &input(a))?;
            qs[a.id] = c.q()[u];
            caches.push(c);
        }
        let mix = net.mixer.forward(params, &qs, &tr.mask(n), &tr.state)?;
        let err = mix.q_total - y;
        loss += scale * err * err;
        let dq = net.mixer.backward(params, &mix, 2.0 * scale * err, &mut grads)?;
        for ((a, &u), c) in tr.agents.iter().zip(&tr.actions).zip(&caches) {
            let mut d = [0.0; ACTIONS];
            d[u] = dq[a.id];
            net.agent.backward(params, c, &d, &mut grads)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Training(alloc::format!("TD loss is {loss}")));
    }
    Ok((loss, grads))
}

/// Mean squared TD error over `batch` and its gradient with respect to the
/// online parameters.
pub fn td_loss(net: &QmixNet, params: &[f64], target: &[f64], batch: &[&Transition], gamma: f64) -> Result<(f64, Vec<f64>)> {
    let y = td_targets(net, target, batch, gamma)?;
    td_loss_against(net, params, batch, &y)
}

/// Hard copy of the online parameters.
pub fn update_target(online: &[f64], target: &mut Vec<f64>) {
    target.clear();
    target.extend_from_slice(online);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::observe::GridConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> GridConfig {
        GridConfig { l_tail: 20.0, l_head: 20.0, l_grid: 10.0, lanes: 2, v_max: 30.0 }
    }

    fn step(id: usize, r: &mut ChaCha8Rng) -> AgentStep {
        AgentStep {
            id,
            obs: (0..24).map(|_| r.gen_range(-1.0..1.0)).collect(),
            last_action: r.gen_range(0..3),
            hidden: (0..agent::GRU_UNITS).map(|_| r.gen_range(-0.5..0.5)).collect(),
        }
    }

    fn toy(r: &mut ChaCha8Rng, terminal: bool) -> Transition {
        Transition {
            agents: vec![step(0, r), step(1, r)],
            actions: vec![r.gen_range(0..3), r.gen_range(0..3)],
            state: (0..6).map(|_| r.gen_range(-1.0..1.0)).collect(),
            reward: r.gen_range(-1.0..1.0),
            next_agents: vec![step(0, r), step(1, r)],
            next_state: (0..6).map(|_| r.gen_range(-1.0..1.0)).collect(),
            terminal,
        }
    }

    fn toy_net() -> QmixNet {
        QmixNet::new(AgentNet::cnn(&small_grid(), 2).unwrap(), 6)
    }

    #[test]
    fn action_encoding_round_trips() {
        assert_eq!(action_of_index(0), crate::baseline::RIGHT);
        assert_eq!(action_of_index(KEEP_INDEX), crate::baseline::KEEP);
        assert_eq!(action_of_index(2), crate::baseline::LEFT);
        for i in 0..3 {
            assert_eq!(index_of_action(action_of_index(i)), i);
        }
        assert_eq!(math::argmax(&[0.1, 0.9, 0.3]), KEEP_INDEX);
    }

    #[test]
    fn td_loss_gradient_on_two_agent_batch() {
        let net = toy_net();
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let mut params = net.init(&mut r);
        let target = net.init(&mut r);
        let batch = [toy(&mut r, false), toy(&mut r, true)];
        let refs: Vec<&Transition> = batch.iter().collect();
        let y = td_targets(&net, &target, &refs, 0.5).unwrap();
        let report = grad_check(&mut params, 1e-3, |p| td_loss_against(&net, p, &refs, &y).unwrap());
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn td_loss_closed_forms() {
        let net = toy_net();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut params = vec![0.0; net.param_count()];
        let b2 = params.len() - 1;
        params[b2] = -5.0;
        let mut tr = toy(&mut r, true);
        tr.reward = -5.0;
        assert_eq!(td_loss(&net, &params, &params, &[&tr], 0.5).unwrap().0, 0.0);
        params[b2] = 1.0;
        tr.reward = 2.0;
        assert_eq!(td_loss(&net, &params, &params, &[&tr], 0.5).unwrap().0, 1.0);
        // Non-terminal: y = r + 0.5 * 1.0, prediction 1.0.
        tr.terminal = false;
        tr.reward = 0.5;
        assert_eq!(td_loss(&net, &params, &params, &[&tr], 0.5).unwrap().0, 0.0);
        params[b2] = f64::NAN;
        assert!(matches!(td_loss(&net, &params, &params, &[&tr], 0.5), Err(Error::Training(_))));
    }

    #[test]
    fn per_agent_argmax_maximizes_joint_value() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=3usize {
            let net = QmixNet::new(AgentNet::cnn(&small_grid(), 3).unwrap(), 6);
            for _ in 0..5 {
                let params = net.init(&mut r);
                let agents: Vec<AgentStep> = (0..n).map(|i| step(i, &mut r)).collect();
                let state: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
                let (greedy, _) = select_actions(&net.agent, &params, &agents, 0.0, &mut r).unwrap();
                let best_greedy = q_total(&net, &params, &agents, &greedy, &state).unwrap();
                let mut best = f64::NEG_INFINITY;
                for code in 0..3usize.pow(n as u32) {
                    let joint: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
                    best = best.max(q_total(&net, &params, &agents, &joint, &state).unwrap());
                }
                assert!(best_greedy >= best - 1e-12, "{best_greedy} < {best}");
            }
        }
    }

    #[test]
    fn exploration_is_uniform() {
        let net = AgentNet::cnn(&small_grid(), 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let params = vec![0.0; net.param_count()];
        let agents = vec![step(0, &mut r)];
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[select_actions(&net, &params, &agents, 1.0, &mut r).unwrap().0[0]] += 1;
        }
        let expect = 10_000.0 / 3.0;
        let sigma = libm::sqrt(10_000.0 * (1.0 / 3.0) * (2.0 / 3.0));
        for c in counts {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "{counts:?}");
        }
        assert!(select_actions(&net, &params, &agents, 1.5, &mut r).is_err());
    }

    #[test]
    fn greedy_selection_is_deterministic() {
        let net = toy_net();
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let params = net.init(&mut r);
        let agents = vec![step(0, &mut r), step(1, &mut r)];
        let a = select_actions(&net.agent, &params, &agents, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = select_actions(&net.agent, &params, &agents, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_copy() {
        let net = toy_net();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let online = net.init(&mut r);
        let mut target = vec![0.0; 3];
        update_target(&online, &mut target);
        assert_eq!(target, online);
        update_target(&online, &mut target);
        assert_eq!(target, online);
    }
}
