//! Closed-loop episodes: decision ticks, lane-change execution, car
//! following, and the multi-agent environment used for training.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{
    greedy_decide, greedy_rlc_decide, lane_change_safe, mobil_decide, target_lane, Action, GreedyDecision, GreedyParams,
    MobilParams, KEEP,
};
use crate::error::{Error, Result};
use crate::exec::tracker::{completed_change, lane_keeping_steer, ExecConfig, LaneChangeExecutor};
use crate::longitudinal::{ControllerSet, Leader, LongitudinalConfig};
use crate::math;
use crate::observe::{
    combined_reward, count_connected_ahead, encode_global_state, encode_grid, platoon_metrics, reward_platoon,
    reward_safety, reward_speed, EngagementRule, EpisodeMetrics, EpisodeTrace, GridConfig, RewardConfig, StateConfig,
};
use crate::qmix::agent::FLAT_FEATURES;
use crate::qmix::{action_of_index, select_actions, AgentNet, AgentStep, Encoder, MultiAgentEnv, StepOutcome, KEEP_INDEX};
use crate::sim::{build_scenario, BicycleParams, ControlInput, LaneChangeState, ScenarioConfig, VehicleId, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Mobil,
    Greedy,
    GreedyRlc,
    CnnQmix,
    FlatQmix,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Mobil, Policy::Greedy, Policy::GreedyRlc, Policy::CnnQmix, Policy::FlatQmix];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Mobil => "mobil",
            Policy::Greedy => "greedy",
            Policy::GreedyRlc => "greedy_rlc",
            Policy::CnnQmix => "cnn_qmix",
            Policy::FlatQmix => "flat_qmix",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Policy::CnnQmix | Policy::FlatQmix)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown policy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub scenario: ScenarioConfig,
    pub bicycle: BicycleParams,
    pub longitudinal: LongitudinalConfig,
    pub exec: ExecConfig,
    pub mobil: MobilParams,
    pub greedy: GreedyParams,
    pub reward: RewardConfig,
    pub grid: GridConfig,
    pub state: StateConfig,
    pub engagement: EngagementRule,
    /// Seconds between lane-change decisions.
    pub decision_period: f64,
    pub max_time: f64,
    /// Lane changes per CAV that the random lane-change budget allows.
    pub rlc_reference: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            bicycle: BicycleParams::default(),
            longitudinal: LongitudinalConfig::default(),
            exec: ExecConfig::default(),
            mobil: MobilParams::default(),
            greedy: GreedyParams::default(),
            reward: RewardConfig::default(),
            grid: GridConfig::default(),
            state: StateConfig::default(),
            engagement: EngagementRule::default(),
            decision_period: 1.0,
            max_time: 180.0,
            rlc_reference: 3.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.longitudinal.validate()?;
        self.exec.validate()?;
        self.mobil.validate()?;
        self.greedy.validate()?;
        self.reward.validate()?;
        self.grid.validate()?;
        if self.grid.lanes != self.scenario.road.lane_count {
            return Err(Error::Config("grid lanes must equal the road's lane count".into()));
        }
        if !(self.decision_period > 0.0) || !(self.max_time > 0.0) || self.rlc_reference < 0.0 {
            return Err(Error::Config("decision_period and max_time must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_tick(&self) -> usize {
        (math::round(self.decision_period / self.scenario.road.dt) as usize).max(1)
    }

    /// Mixer state width for this road.
    pub fn state_dim(&self) -> usize {
        self.state.dim(&self.scenario.road)
    }
}

const MERGE_CLEARANCE: f64 = 2.0;
const MERGE_HEADWAY: f64 = 1.0;

/// One running episode.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub cfg: EpisodeConfig,
    world: WorldState,
    ctl: ControllerSet,
    exec: LaneChangeExecutor,
    trace: EpisodeTrace,
    base_speed: Vec<f64>,
    collided: bool,
}

impl Simulation {
    pub fn new(cfg: &EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        let world = build_scenario(&cfg.scenario)?;
        Self::from_world(cfg, world)
    }

    /// Starts from an explicit world, e.g. a hand-built test scenario.
    pub fn from_world(cfg: &EpisodeConfig, world: WorldState) -> Result<Self> {
        let n = world.vehicles.len();
        if world.vehicles.iter().enumerate().any(|(i, v)| v.id as usize != i) {
            return Err(Error::Contract("vehicle ids must equal their index".into()));
        }
        let mut trace = EpisodeTrace::new(world.road.dt);
        trace.record(&world, &cfg.engagement);
        let collided = !world.collisions().is_empty();
        Ok(Self {
            cfg: cfg.clone(),
            base_speed: world.vehicles.iter().map(|v| v.desired_speed).collect(),
            ctl: ControllerSet::new(cfg.longitudinal.clone(), n),
            exec: LaneChangeExecutor::new(cfg.exec.clone())?,
            trace,
            world,
            collided,
        })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn controllers(&self) -> &ControllerSet {
        &self.ctl
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EpisodeTrace {
        self.trace
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    pub fn done(&self) -> bool {
        self.collided || self.world.all_exited() || self.world.time >= self.cfg.max_time - 1e-9
    }

    /// CAVs still on the segment, by id.
    pub fn active_cavs(&self) -> Vec<VehicleId> {
        self.world.active().filter(|v| v.kind.is_cav()).map(|v| v.id).collect()
    }

    /// MOBIL decisions of the human drivers.
    pub fn human_actions(&self) -> BTreeMap<VehicleId, Action> {
        self.world
            .active()
            .filter(|v| !v.kind.is_cav())
            .map(|v| (v.id, mobil_decide(&self.world, &self.ctl, v.id, &self.cfg.mobil)))
            .collect()
    }

    /// True when `action` is a lane change that exists and passes the
    /// MOBIL safety gate.
    pub fn change_allowed(&self, id: VehicleId, action: Action) -> bool {
        let Some(v) = self.world.vehicle(id) else {
            return false;
        };
        action != KEEP
            && !v.exited
            && !v.is_executing()
            && target_lane(v.lane, action, self.world.road.lane_count).is_some()
            && lane_change_safe(&self.world, &self.ctl, v, action, &self.cfg.mobil)
    }

    /// Starts the requested lane changes and sets desired-speed factors.
    /// Vehicles already executing, exited, or asked to leave the road keep
    /// their lane.
    pub fn apply(&mut self, decision: &GreedyDecision) -> Result<()> {
        for v in &mut self.world.vehicles {
            let f = decision.speed_factor.get(&v.id).copied().unwrap_or(1.0);
            v.desired_speed = self.base_speed[v.id as usize] * f;
        }
        for (&id, &action) in &decision.actions {
            let Some(v) = self.world.vehicle(id) else {
                return Err(Error::UnknownVehicle(id));
            };
            if action == KEEP || v.exited || v.is_executing() {
                continue;
            }
            let Some(lane) = target_lane(v.lane, action, self.world.road.lane_count) else {
                continue;
            };
            if self.merge_conflict(v, lane) {
                continue;
            }
            let m = self.exec.begin(&self.world, v, lane)?;
            let t = self.world.time;
            let v = &mut self.world.vehicles[id as usize];
            v.lc_state = LaneChangeState::Executing(m);
            v.last_lc_time = t;
        }
        Ok(())
    }

    /// One physics step.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.world.road.dt;
        let mut controls = BTreeMap::new();
        let mut maneuvers = Vec::new();
        let ids: Vec<VehicleId> = self.world.active().map(|v| v.id).collect();
        for id in ids {
            let v = &self.world.vehicles[id as usize];
            let u_a = self.ctl.command(&self.world, id, v.lane, dt)?.min(self.yield_to_merging(v));
            if let LaneChangeState::Executing(m) = &v.lc_state {
                let mut m = m.clone();
                let cap = u_a.min(self.ctl.predict_in_lane(&self.world, v, m.target_lane));
                let s = self.exec.track(&self.world, v, &mut m, cap, dt)?;
                controls.insert(id, s.input);
                maneuvers.push((id, m, s.finished));
            } else {
                let steer = lane_keeping_steer(v, self.world.road.lane_center(v.lane), &self.exec.cfg);
                controls.insert(id, ControlInput::new(u_a, steer));
            }
        }
        self.world.step(&controls, &self.cfg.bicycle, dt)?;
        for (id, m, finished) in maneuvers {
            let v = &mut self.world.vehicles[id as usize];
            if finished || v.exited {
                if finished && completed_change(&m) {
                    v.lane_changes += 1;
                }
                v.lc_state = LaneChangeState::Keeping;
                self.exec.finish(id);
            } else {
                v.lc_state = LaneChangeState::Executing(m);
            }
        }
        let hits = self.world.collisions();
        if !hits.is_empty() {
            self.collided = true;
            self.trace.collisions += hits.len();
        }
        self.trace.record(&self.world, &self.cfg.engagement);
        Ok(())
    }

    /// Another vehicle is already changing into `lane` from elsewhere close
    /// enough to `v` that both could end up side by side.
    fn merge_conflict(&self, v: &crate::sim::VehicleState, lane: usize) -> bool {
        self.world.active().any(|o| {
            o.id != v.id
                && o.lane != lane
                && matches!(&o.lc_state, LaneChangeState::Executing(m) if m.target_lane == lane)
                && (o.x - v.x).abs() < v.length.max(o.length) + MERGE_CLEARANCE + MERGE_HEADWAY * v.v.max(o.v)
        })
    }

    /// Acceleration bound from the nearest vehicle ahead that is changing
    /// into `v`'s lane from another lane; such a vehicle is followed as if it
    /// were already in the lane.
    fn yield_to_merging(&self, v: &crate::sim::VehicleState) -> f64 {
        let merging = self
            .world
            .active()
            .filter(|o| o.id != v.id && o.lane != v.lane && o.x > v.x)
            .filter(|o| matches!(&o.lc_state, LaneChangeState::Executing(m) if m.target_lane == v.lane))
            .min_by(|a, b| a.x.total_cmp(&b.x));
        match merging {
            Some(o) => self.ctl.predict_accel(v, Some(Leader { state: o, gap: (o.rear() - v.x).max(0.0) })),
            None => f64::INFINITY,
        }
    }

    /// Physics steps up to the next decision tick, stopping early when the
    /// episode ends.
    pub fn tick(&mut self) -> Result<()> {
        for _ in 0..self.cfg.steps_per_tick() {
            if self.done() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Per-agent reward of a vehicle in the current state, ignoring
    /// collisions.
    pub fn agent_reward(&self, id: VehicleId) -> Result<f64> {
        let v = self.world.vehicle(id).ok_or(Error::UnknownVehicle(id))?;
        let range = self.cfg.longitudinal.sensing_range;
        let nb = self.world.neighbors(id, v.lane);
        let front = nb.predecessor.filter(|n| n.gap <= range);
        let rear = nb.follower.filter(|n| n.gap <= range);
        let r_d = reward_safety(front.map(|n| n.gap), rear.map(|n| n.gap), &self.cfg.reward);
        let v_pred = front.and_then(|n| self.world.vehicle(n.id)).map(|p| p.v);
        let r_v = reward_speed(v_pred, v.v, self.base_speed[id as usize], &self.cfg.reward);
        let r_c = reward_platoon(count_connected_ahead(&self.world, id, &self.cfg.engagement));
        Ok(combined_reward(r_c, r_v, r_d, false, &self.cfg.reward))
    }

    pub fn metrics(&self) -> Result<EpisodeMetrics> {
        platoon_metrics(&self.trace)
    }

    /// Lane changes completed by CAVs so far.
    pub fn cav_lane_changes(&self) -> u32 {
        self.world.vehicles.iter().filter(|v| v.kind.is_cav()).map(|v| v.lane_changes).sum()
    }
}

/// Lateral decisions for the CAVs at a tick.
pub trait CavDecider {
    fn decide(&mut self, sim: &Simulation) -> Result<GreedyDecision>;
}

pub struct MobilDecider;

impl CavDecider for MobilDecider {
    fn decide(&mut self, sim: &Simulation) -> Result<GreedyDecision> {
        let actions = sim
            .active_cavs()
            .into_iter()
            .map(|id| (id, mobil_decide(sim.world(), sim.controllers(), id, &sim.cfg.mobil)))
            .collect();
        Ok(GreedyDecision { actions, speed_factor: BTreeMap::new() })
    }
}

/// Greedy assignment, optionally with random extra lane changes.
pub struct GreedyDecider {
    rlc: Option<ChaCha8Rng>,
}

impl GreedyDecider {
    pub fn plain() -> Self {
        Self { rlc: None }
    }

    pub fn with_rlc(seed: u64) -> Self {
        Self { rlc: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl CavDecider for GreedyDecider {
    fn decide(&mut self, sim: &Simulation) -> Result<GreedyDecision> {
        let c = &sim.cfg;
        match &mut self.rlc {
            None => Ok(greedy_decide(sim.world(), sim.controllers(), &c.greedy, &c.mobil, &c.engagement)),
            Some(rng) => {
                let cavs = sim.world().vehicles.iter().filter(|v| v.kind.is_cav()).count();
                let allowed = math::round(c.rlc_reference * cavs as f64) as usize;
                let budget = allowed.saturating_sub(sim.cav_lane_changes() as usize);
                let (d, _) = greedy_rlc_decide(sim.world(), sim.controllers(), &c.greedy, &c.mobil, &c.engagement, budget, rng);
                Ok(d)
            }
        }
    }
}

/// Observation of one agent for `net`'s encoder.
pub fn agent_observation(sim: &Simulation, net: &AgentNet, id: VehicleId) -> Result<Vec<f64>> {
    match net.encoder {
        Encoder::Conv(_) => Ok(encode_grid(sim.world(), id, &sim.cfg.grid)?.data),
        Encoder::Flat { .. } => flat_observation(sim.world(), id, &sim.cfg.grid),
    }
}

/// Fixed-length per-CAV feature list: relative position, lane, speed and an
/// own-vehicle flag for every CAV of the scenario in id order; exited CAVs
/// are zeros. Its length depends on the CAV count.
pub fn flat_observation(world: &WorldState, ego_id: VehicleId, grid: &GridConfig) -> Result<Vec<f64>> {
    let ego = world.vehicle(ego_id).ok_or(Error::UnknownVehicle(ego_id))?;
    let scale = grid.l_head.max(1.0);
    let lanes = (world.road.lane_count.max(2) - 1) as f64;
    let mut out = Vec::new();
    for v in world.vehicles.iter().filter(|v| v.kind.is_cav()) {
        if v.exited {
            out.extend([0.0; FLAT_FEATURES]);
        } else {
            out.extend([(v.x - ego.x) / scale, v.lane as f64 / lanes, v.v / grid.v_max, f64::from(u8::from(v.id == ego_id))]);
        }
    }
    Ok(out)
}

/// Recurrent state of learned agents across ticks.
#[derive(Clone, Debug, Default)]
pub struct AgentMemory {
    hidden: BTreeMap<usize, Vec<f64>>,
    last: BTreeMap<usize, usize>,
}

impl AgentMemory {
    pub fn steps(&self, obs: Vec<(usize, Vec<f64>)>) -> Vec<AgentStep> {
        obs.into_iter()
            .map(|(id, obs)| AgentStep {
                id,
                obs,
                last_action: self.last.get(&id).copied().unwrap_or(KEEP_INDEX),
                hidden: self.hidden.get(&id).cloned().unwrap_or_else(AgentNet::zero_hidden),
            })
            .collect()
    }

    pub fn update(&mut self, agents: &[AgentStep], actions: &[usize], hidden: Vec<Vec<f64>>) {
        for ((a, &u), h) in agents.iter().zip(actions).zip(hidden) {
            self.hidden.insert(a.id, h);
            self.last.insert(a.id, u);
        }
    }
}

/// Observations of every active CAV.
pub fn agent_observations(sim: &Simulation, net: &AgentNet) -> Result<Vec<(usize, Vec<f64>)>> {
    sim.active_cavs().into_iter().map(|id| Ok((id as usize, agent_observation(sim, net, id)?))).collect()
}

/// Converts action indices into lane changes, keeping the lane when the
/// change is impossible or unsafe.
pub fn gated_decision(sim: &Simulation, joint: &[(usize, usize)]) -> GreedyDecision {
    let actions = joint
        .iter()
        .map(|&(id, u)| {
            let id = id as VehicleId;
            let a = action_of_index(u);
            (id, if sim.change_allowed(id, a) { a } else { KEEP })
        })
        .collect();
    GreedyDecision { actions, speed_factor: BTreeMap::new() }
}

/// Greedy (ε = 0) execution of a trained agent network.
pub struct QmixDecider<'a> {
    net: AgentNet,
    params: &'a [f64],
    memory: AgentMemory,
    rng: ChaCha8Rng,
}

impl<'a> QmixDecider<'a> {
    pub fn new(net: AgentNet, params: &'a [f64]) -> Result<Self> {
        if params.len() < net.param_count() {
            return Err(Error::Shape(alloc::format!("agent net needs {} parameters, got {}", net.param_count(), params.len())));
        }
        Ok(Self { net, params, memory: AgentMemory::default(), rng: ChaCha8Rng::seed_from_u64(0) })
    }
}

impl CavDecider for QmixDecider<'_> {
    fn decide(&mut self, sim: &Simulation) -> Result<GreedyDecision> {
        if sim.world().vehicles.len() > self.net.n_max {
            return Err(Error::AgentCountMismatch { expected: self.net.n_max, found: sim.world().vehicles.len() });
        }
        let agents = self.memory.steps(agent_observations(sim, &self.net)?);
        let (actions, hidden) = select_actions(&self.net, self.params, &agents, 0.0, &mut self.rng)?;
        let joint: Vec<(usize, usize)> = agents.iter().map(|a| a.id).zip(actions.iter().copied()).collect();
        self.memory.update(&agents, &actions, hidden);
        Ok(gated_decision(sim, &joint))
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub metrics: EpisodeMetrics,
    pub trace: EpisodeTrace,
    pub ticks: usize,
}

/// Runs `sim` to completion: CAVs follow `decider`, human drivers MOBIL.
pub fn run_simulation(mut sim: Simulation, decider: &mut dyn CavDecider) -> Result<EpisodeOutcome> {
    let mut ticks = 0;
    while !sim.done() {
        let mut d = decider.decide(&sim)?;
        d.actions.extend(sim.human_actions());
        sim.apply(&d)?;
        sim.tick()?;
        ticks += 1;
    }
    let metrics = sim.metrics()?;
    Ok(EpisodeOutcome { metrics, trace: sim.into_trace(), ticks })
}

pub fn run_episode(cfg: &EpisodeConfig, decider: &mut dyn CavDecider) -> Result<EpisodeOutcome> {
    run_simulation(Simulation::new(cfg)?, decider)
}

/// Training environment: one episode per reset, scenario seed
/// `seed + episode`, MPR cycling through `mprs`.
pub struct QmixEnv {
    base: EpisodeConfig,
    mprs: Vec<f64>,
    seed: u64,
    net: AgentNet,
    sim: Option<Simulation>,
}

impl QmixEnv {
    pub fn new(base: EpisodeConfig, mprs: Vec<f64>, seed: u64, net: AgentNet) -> Result<Self> {
        base.validate()?;
        if mprs.is_empty() {
            return Err(Error::Config("training needs at least one MPR".into()));
        }
        if base.scenario.vehicle_count != net.n_max {
            return Err(Error::AgentCountMismatch { expected: net.n_max, found: base.scenario.vehicle_count });
        }
        Ok(Self { base, mprs, seed, net, sim: None })
    }

    pub fn simulation(&self) -> Option<&Simulation> {
        self.sim.as_ref()
    }

    /// Starts an episode from a prepared world instead of a generated one.
    pub fn reset_with_world(&mut self, world: WorldState) -> Result<()> {
        self.sim = Some(Simulation::from_world(&self.base, world)?);
        Ok(())
    }

    fn sim(&self) -> Result<&Simulation> {
        self.sim.as_ref().ok_or_else(|| Error::Contract("environment used before reset".into()))
    }
}

impl MultiAgentEnv for QmixEnv {
    fn n_max(&self) -> usize {
        self.net.n_max
    }

    fn reset(&mut self, episode: u64) -> Result<()> {
        let mut cfg = self.base.clone();
        cfg.scenario.seed = self.seed.wrapping_add(episode);
        cfg.scenario.mpr = self.mprs[(episode % self.mprs.len() as u64) as usize];
        self.sim = Some(Simulation::new(&cfg)?);
        Ok(())
    }

    fn observe(&self) -> Result<Vec<(usize, Vec<f64>)>> {
        agent_observations(self.sim()?, &self.net)
    }

    fn global_state(&self) -> Vec<f64> {
        self.sim.as_ref().map(|s| encode_global_state(s.world(), &s.cfg.state)).unwrap_or_default()
    }

    fn step(&mut self, actions: &[(usize, usize)]) -> Result<StepOutcome> {
        let sim = self.sim.as_mut().ok_or_else(|| Error::Contract("environment used before reset".into()))?;
        let present = sim.active_cavs();
        let mut d = gated_decision(sim, actions);
        d.actions.extend(sim.human_actions());
        sim.apply(&d)?;
        sim.tick()?;
        if sim.collided() {
            return Ok(StepOutcome { reward: sim.cfg.reward.collision_penalty, terminal: true, done: true });
        }
        let mut total = 0.0;
        for &id in &present {
            total += sim.agent_reward(id)?;
        }
        let reward = if present.is_empty() { 0.0 } else { total / present.len() as f64 };
        let no_agents = sim.active_cavs().is_empty();
        Ok(StepOutcome { reward, terminal: no_agents, done: no_agents || sim.done() })
    }

    fn platoon_rate(&self) -> Result<f64> {
        Ok(self.sim()?.metrics()?.platoon_rate)
    }
}

/// Builds a decider for a rule-based policy. `seed` drives the random
/// lane changes of `greedy_rlc`.
pub fn rule_decider(policy: Policy, seed: u64) -> Result<alloc::boxed::Box<dyn CavDecider>> {
    Ok(match policy {
        Policy::Mobil => alloc::boxed::Box::new(MobilDecider),
        Policy::Greedy => alloc::boxed::Box::new(GreedyDecider::plain()),
        Policy::GreedyRlc => alloc::boxed::Box::new(GreedyDecider::with_rlc(seed ^ 0x5EED_5EED)),
        Policy::CnnQmix | Policy::FlatQmix => {
            return Err(Error::Config(alloc::format!("{policy} needs trained parameters")));
        }
    })
}

/// Per-CAV presence over the scenario's vehicle slots.
pub fn presence_mask(world: &WorldState) -> Vec<f64> {
    let mut m = vec![0.0; world.vehicles.len()];
    for v in world.active().filter(|v| v.kind.is_cav()) {
        m[v.id as usize] = 1.0;
    }
    m
}
