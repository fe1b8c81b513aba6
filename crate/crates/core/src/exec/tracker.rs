//! Closed-loop lane-change execution and lane keeping.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::mpc::{MpcConfig, MpcController};
use super::planner::{plan_quintic, select_tf, PlanGoal, PlanStart, PlannerCostWeights, DEFAULT_DURATIONS};
use crate::error::{Error, Result};
use crate::sim::{ControlInput, LaneChangeState, Maneuver, VehicleId, VehicleState, WorldState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    pub mpc: MpcConfig,
    pub weights: PlannerCostWeights,
    pub durations: Vec<f64>,
    /// Look-ahead of the abort check.
    pub abort_horizon: f64,
    /// Lane-keeping gains on lateral offset and heading.
    pub keep_k_y: f64,
    pub keep_k_theta: f64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            weights: PlannerCostWeights::default(),
            durations: DEFAULT_DURATIONS.to_vec(),
            abort_horizon: 1.0,
            keep_k_y: 0.08,
            keep_k_theta: 0.8,
        }
    }
}

impl ExecConfig {
    pub fn validate(&self) -> Result<()> {
        self.mpc.validate()?;
        let w = &self.weights;
        if w.c1 < 0.0 || w.c2 < 0.0 || w.c3 < 0.0 || w.c1 + w.c2 + w.c3 == 0.0 {
            return Err(Error::Config("planner weights must be nonnegative and not all zero".into()));
        }
        if self.durations.is_empty() || self.durations.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("maneuver durations must be positive".into()));
        }
        if !(self.abort_horizon >= 0.0) {
            return Err(Error::Config("abort horizon must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Steering that recenters a lane-keeping vehicle; exactly zero on center.
pub fn lane_keeping_steer(ego: &VehicleState, lane_center: f64, cfg: &ExecConfig) -> f64 {
    let e_y = ego.y - lane_center;
    let u = -(cfg.keep_k_y * e_y + cfg.keep_k_theta * ego.theta);
    u.clamp(cfg.mpc.u_min[1], cfg.mpc.u_max[1])
}

/// One executed step of a maneuver, also the row format of the optional
/// per-maneuver trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackStep {
    pub t: f64,
    pub reference_y: f64,
    pub realized_y: f64,
    pub input: ControlInput,
    pub iterations: usize,
    /// The maneuver ends after this step.
    pub finished: bool,
    /// An abort was triggered on this step.
    pub aborted: bool,
}

/// True when any vehicle in `lane` would overlap the ego within `horizon`
/// seconds if everyone held their current speed.
pub fn predicted_overlap(world: &WorldState, ego: &VehicleState, lane: usize, horizon: f64) -> bool {
    let samples = 10usize;
    world.vehicles.iter().filter(|o| o.id != ego.id && o.lane == lane).any(|o| {
        (0..=samples).any(|k| {
            let t = horizon * k as f64 / samples as f64;
            let (ex, ox) = (ego.x + ego.v * t, o.x + o.v * t);
            ex.min(ox) - (ex - ego.length).max(ox - o.length) > 0.0
        })
    })
}

/// Plans a lane change toward `target_lane` from the vehicle's current state.
pub fn plan_lane_change(world: &WorldState, ego: &VehicleState, target_lane: usize, cfg: &ExecConfig) -> Result<Maneuver> {
    if target_lane >= world.road.lane_count {
        return Err(Error::Contract(format!("target lane {target_lane} does not exist")));
    }
    let start = PlanStart { x: ego.x, y: ego.y, v: ego.v, a: ego.a, heading: ego.theta };
    let goal = PlanGoal { y_f: world.road.lane_center(target_lane), v_f: ego.v };
    let t_f = select_tf(start, goal, &cfg.weights, &cfg.durations)?;
    Ok(Maneuver {
        plan: plan_quintic(start, goal, t_f)?,
        elapsed: 0.0,
        origin_lane: ego.lane,
        target_lane,
        aborted: false,
        last_input: ControlInput::new(ego.a, 0.0),
    })
}

/// Owns the MPC instances used by executing vehicles. Controllers are
/// linearized at the vehicle's speed when the maneuver starts, rounded to
/// the nearest m/s so they can be shared.
#[derive(Clone, Debug, Default)]
pub struct LaneChangeExecutor {
    pub cfg: ExecConfig,
    controllers: BTreeMap<u32, MpcController>,
    warm: BTreeMap<VehicleId, (u32, Vec<ControlInput>)>,
}

impl LaneChangeExecutor {
    pub fn new(cfg: ExecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, controllers: BTreeMap::new(), warm: BTreeMap::new() })
    }

    fn controller(&mut self, bin: u32) -> Result<&MpcController> {
        if !self.controllers.contains_key(&bin) {
            let cfg = MpcConfig { v0: bin as f64, ..self.cfg.mpc.clone() };
            self.controllers.insert(bin, MpcController::new(&cfg)?);
        }
        Ok(&self.controllers[&bin])
    }

    /// Starts a maneuver; the caller stores it in the vehicle's state.
    pub fn begin(&mut self, world: &WorldState, ego: &VehicleState, target_lane: usize) -> Result<Maneuver> {
        let m = plan_lane_change(world, ego, target_lane, &self.cfg)?;
        let bin = (crate::math::round(ego.v) as u32).max(1);
        self.warm.insert(ego.id, (bin, Vec::new()));
        Ok(m)
    }

    /// Forgets per-vehicle solver state.
    pub fn finish(&mut self, id: VehicleId) {
        self.warm.remove(&id);
    }

    /// Computes the input for one step of `maneuver`, applying the abort rule
    /// first. `accel_cap` bounds the longitudinal command (car following).
    /// Advances `maneuver.elapsed` by `dt`.
    pub fn track(
        &mut self,
        world: &WorldState,
        ego: &VehicleState,
        maneuver: &mut Maneuver,
        accel_cap: f64,
        dt: f64,
    ) -> Result<TrackStep> {
        if maneuver.elapsed > maneuver.plan.t_f + 1e-9 {
            return Err(Error::Contract(format!("maneuver of vehicle {} has expired", ego.id)));
        }
        let mut aborted_now = false;
        if !maneuver.aborted
            && maneuver.target_lane != maneuver.origin_lane
            && predicted_overlap(world, ego, maneuver.target_lane, self.cfg.abort_horizon)
        {
            let origin = maneuver.origin_lane;
            let mut back = plan_lane_change(world, ego, origin, &self.cfg)?;
            back.origin_lane = origin;
            back.aborted = true;
            back.last_input = maneuver.last_input;
            *maneuver = back;
            aborted_now = true;
            if let Some(w) = self.warm.get_mut(&ego.id) {
                w.1.clear();
            }
        }

        let (bin, warm) = match self.warm.get(&ego.id) {
            Some((b, w)) => (*b, w.clone()),
            None => ((crate::math::round(ego.v) as u32).max(1), Vec::new()),
        };
        let horizon = self.cfg.mpc.horizon;
        let reference: Vec<(f64, f64)> =
            (1..=horizon).map(|k| maneuver.plan.position(maneuver.elapsed + k as f64 * dt)).collect();
        let x0 = [ego.x, ego.y, ego.theta, ego.v, ego.a];
        let warm_ref = if warm.len() == horizon { Some(warm.as_slice()) } else { None };
        let controller = self.controller(bin)?;
        let sol = controller.solve(&x0, &reference, maneuver.last_input, warm_ref)?;
        let mut shifted: Vec<ControlInput> = sol.inputs[1..].to_vec();
        shifted.push(*sol.inputs.last().expect("horizon is at least one step"));
        self.warm.insert(ego.id, (bin, shifted));

        let input = ControlInput::new(sol.input.u_a.min(accel_cap), sol.input.u_delta);
        maneuver.last_input = input;
        maneuver.elapsed += dt;
        let finished = maneuver.elapsed >= maneuver.plan.t_f - 1e-9;
        Ok(TrackStep {
            t: world.time,
            reference_y: reference[0].1,
            realized_y: ego.y,
            input,
            iterations: sol.iterations,
            finished,
            aborted: aborted_now,
        })
    }
}

/// Whether a finished maneuver ended in a different lane than it started.
pub fn completed_change(m: &Maneuver) -> bool {
    !m.aborted && m.target_lane != m.origin_lane
}

/// Vehicle's maneuver, if executing.
pub fn maneuver_of(v: &VehicleState) -> Option<&Maneuver> {
    match &v.lc_state {
        LaneChangeState::Executing(m) => Some(m),
        LaneChangeState::Keeping => None,
    }
}
