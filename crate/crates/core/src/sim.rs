//! Road model, vehicle state, scenario generation and time stepping.
//!
//! Lanes are numbered from the right: lane 0 is the rightmost lane and its
//! center sits at `y = 0`; lane `l` is centered at `y = l * lane_width`.
//! A vehicle's `x` is the position of its front bumper, so it occupies the
//! longitudinal interval `[x - length, x]`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::planner::TrajectoryPlan;
use crate::math;

pub type VehicleId = u32;

/// Grid code for a cell with no vehicle.
pub const EMPTY_CODE: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadConfig {
    pub lane_count: usize,
    pub segment_length: f64,
    pub lane_width: f64,
    pub dt: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self { lane_count: 3, segment_length: 1200.0, lane_width: 3.5, dt: 0.1 }
    }
}

impl RoadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lane_count < 2 {
            return Err(Error::Config(format!("lane_count must be >= 2, got {}", self.lane_count)));
        }
        if !(self.segment_length > 0.0) || !(self.lane_width > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("segment_length, lane_width and dt must be positive".into()));
        }
        Ok(())
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }

    /// Lane whose center is nearest to `y`.
    pub fn lane_of(&self, y: f64) -> usize {
        let raw = math::round(y / self.lane_width);
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.lane_count - 1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VehicleKind {
    HumanDriven,
    Cav,
}

impl VehicleKind {
    /// Type channel value: 1 for human-driven, 2 for connected automated.
    pub fn code(self) -> f64 {
        match self {
            VehicleKind::HumanDriven => 1.0,
            VehicleKind::Cav => 2.0,
        }
    }

    pub fn is_cav(self) -> bool {
        self == VehicleKind::Cav
    }
}

/// A lane change in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Maneuver {
    pub plan: TrajectoryPlan,
    /// Time since the plan started.
    pub elapsed: f64,
    pub origin_lane: usize,
    pub target_lane: usize,
    pub aborted: bool,
    /// Input applied on the previous step, needed for the MPC increment cost.
    pub last_input: ControlInput,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum LaneChangeState {
    #[default]
    Keeping,
    Executing(Maneuver),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub kind: VehicleKind,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    /// Realized acceleration (lags the command by `tau`).
    pub a: f64,
    pub lane: usize,
    pub length: f64,
    pub desired_speed: f64,
    pub lc_state: LaneChangeState,
    pub last_lc_time: f64,
    pub lane_changes: u32,
    pub exited: bool,
}

impl VehicleState {
    /// A 5 m vehicle on the center of `lane`, keeping its lane.
    pub fn on_lane(id: VehicleId, kind: VehicleKind, road: &RoadConfig, lane: usize, x: f64, v: f64) -> Self {
        Self {
            id,
            kind,
            x,
            y: road.lane_center(lane),
            theta: 0.0,
            v,
            a: 0.0,
            lane,
            length: 5.0,
            desired_speed: 15.4,
            lc_state: LaneChangeState::Keeping,
            last_lc_time: f64::NEG_INFINITY,
            lane_changes: 0,
            exited: false,
        }
    }

    pub fn rear(&self) -> f64 {
        self.x - self.length
    }

    pub fn is_executing(&self) -> bool {
        matches!(self.lc_state, LaneChangeState::Executing(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BicycleParams {
    pub tau: f64,
    pub l_f: f64,
    pub l_r: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self { tau: 0.4, l_f: 1.5, l_r: 1.5 }
    }
}

impl BicycleParams {
    /// Slip angle of the velocity vector for a steering angle.
    pub fn slip_angle(&self, u_delta: f64) -> f64 {
        math::atan(self.l_r / (self.l_r + self.l_f) * math::tan(u_delta))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub u_a: f64,
    pub u_delta: f64,
}

impl ControlInput {
    pub fn new(u_a: f64, u_delta: f64) -> Self {
        Self { u_a, u_delta }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub road: RoadConfig,
    pub vehicle_count: usize,
    pub mpr: f64,
    pub spawn_range: [f64; 2],
    pub seed: u64,
    pub desired_speed_hv: f64,
    pub desired_speed_cav: f64,
    pub vehicle_length: f64,
    /// Minimum bumper-to-bumper spacing at spawn (IDM standstill gap).
    pub min_spacing: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road: RoadConfig::default(),
            vehicle_count: 24,
            mpr: 0.5,
            spawn_range: [100.0, 300.0],
            seed: 0,
            desired_speed_hv: 15.4,
            desired_speed_cav: 15.4,
            vehicle_length: 5.0,
            min_spacing: 6.0,
        }
    }
}

impl ScenarioConfig {
    pub fn cav_count(&self) -> usize {
        math::round(self.mpr * self.vehicle_count as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.road.validate()?;
        if !(0.0..=1.0).contains(&self.mpr) {
            return Err(Error::Config(format!("mpr must lie in [0, 1], got {}", self.mpr)));
        }
        let [lo, hi] = self.spawn_range;
        if !(lo >= 0.0 && hi > lo && hi <= self.road.segment_length) {
            return Err(Error::Config(format!(
                "spawn range [{lo}, {hi}] must lie within the segment"
            )));
        }
        if !(self.vehicle_length > 0.0) || self.min_spacing < 0.0 {
            return Err(Error::Config("vehicle_length must be positive".into()));
        }
        let pitch = self.vehicle_length + self.min_spacing;
        let per_lane = math::floor((hi - lo) / pitch) as usize + 1;
        if per_lane * self.road.lane_count < self.vehicle_count {
            return Err(Error::Config(format!(
                "spawn range of {} m cannot host {} vehicles at {} m spacing",
                hi - lo,
                self.vehicle_count,
                self.min_spacing
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub road: RoadConfig,
    pub time: f64,
    /// Indexed by vehicle id.
    pub vehicles: Vec<VehicleState>,
}

/// One neighbor in a lane of interest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: VehicleId,
    /// Bumper-to-bumper distance, floored at zero.
    pub gap: f64,
    /// `v_ego - v_neighbor`.
    pub delta_v: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Neighborhood {
    pub predecessor: Option<Neighbor>,
    pub follower: Option<Neighbor>,
}

const SPAWN_ATTEMPTS: usize = 20_000;

/// Places `vehicle_count` vehicles in the spawn range by rejection sampling.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<WorldState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [lo, hi] = cfg.spawn_range;
    let pitch = cfg.vehicle_length + cfg.min_spacing;

    let mut placed: Vec<(usize, f64)> = Vec::with_capacity(cfg.vehicle_count);
    let mut attempts = 0;
    while placed.len() < cfg.vehicle_count {
        attempts += 1;
        if attempts > SPAWN_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {} vehicles in [{lo}, {hi}] after {SPAWN_ATTEMPTS} draws",
                cfg.vehicle_count
            )));
        }
        let lane = rng.gen_range(0..cfg.road.lane_count);
        let x = rng.gen_range(lo..=hi);
        if placed.iter().all(|&(l, px)| l != lane || (px - x).abs() >= pitch) {
            placed.push((lane, x));
        }
    }
    // Ids run front to back so that id order is reproducible and readable.
    placed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let n_cav = cfg.cav_count();
    let mut ids: Vec<usize> = (0..cfg.vehicle_count).collect();
    for i in 0..n_cav {
        let j = rng.gen_range(i..ids.len());
        ids.swap(i, j);
    }
    let mut is_cav = alloc::vec![false; cfg.vehicle_count];
    for &i in &ids[..n_cav] {
        is_cav[i] = true;
    }

    let vehicles = placed
        .iter()
        .enumerate()
        .map(|(i, &(lane, x))| {
            let kind = if is_cav[i] { VehicleKind::Cav } else { VehicleKind::HumanDriven };
            let desired_speed = match kind {
                VehicleKind::Cav => cfg.desired_speed_cav,
                VehicleKind::HumanDriven => cfg.desired_speed_hv,
            };
            VehicleState {
                id: i as VehicleId,
                kind,
                x,
                y: cfg.road.lane_center(lane),
                theta: 0.0,
                v: desired_speed,
                a: 0.0,
                lane,
                length: cfg.vehicle_length,
                desired_speed,
                lc_state: LaneChangeState::Keeping,
                last_lc_time: f64::NEG_INFINITY,
                lane_changes: 0,
                exited: false,
            }
        })
        .collect();

    Ok(WorldState { road: cfg.road, time: 0.0, vehicles })
}

type Kin = [f64; 5];

fn bicycle_rhs(s: &Kin, u: ControlInput, beta: f64, p: &BicycleParams) -> Kin {
    let [_, _, theta, v, a] = *s;
    [
        v * math::cos(theta + beta),
        v * math::sin(theta + beta),
        v / p.l_r * math::sin(beta),
        a,
        (u.u_a - a) / p.tau,
    ]
}

/// One classical Runge-Kutta step of the lagged kinematic bicycle model.
pub fn integrate_bicycle(
    s: &VehicleState,
    u: ControlInput,
    p: &BicycleParams,
    dt: f64,
) -> Result<VehicleState> {
    let state: Kin = [s.x, s.y, s.theta, s.v, s.a];
    if state.iter().any(|v| !v.is_finite()) || !u.u_a.is_finite() || !u.u_delta.is_finite() {
        return Err(Error::Integration(s.id));
    }
    let beta = p.slip_angle(u.u_delta);
    let add = |base: &Kin, k: &Kin, h: f64| -> Kin {
        let mut out = *base;
        for i in 0..5 {
            out[i] += h * k[i];
        }
        out
    };
    let k1 = bicycle_rhs(&state, u, beta, p);
    let k2 = bicycle_rhs(&add(&state, &k1, dt / 2.0), u, beta, p);
    let k3 = bicycle_rhs(&add(&state, &k2, dt / 2.0), u, beta, p);
    let k4 = bicycle_rhs(&add(&state, &k3, dt), u, beta, p);
    let mut next = state;
    for i in 0..5 {
        next[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration(s.id));
    }
    let mut out = s.clone();
    out.x = next[0];
    out.y = next[1];
    out.theta = next[2];
    out.v = next[3].max(0.0);
    out.a = next[4];
    Ok(out)
}

impl WorldState {
    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleState> {
        self.vehicles.get(id as usize)
    }

    pub fn active(&self) -> impl Iterator<Item = &VehicleState> {
        self.vehicles.iter().filter(|v| !v.exited)
    }

    pub fn all_exited(&self) -> bool {
        self.vehicles.iter().all(|v| v.exited)
    }

    /// Advances every vehicle by one step in place.
    ///
    /// Exited vehicles keep driving beyond the segment end so that vehicles
    /// behind them still see a leader; a missing control for one of them
    /// means zero input.
    pub fn step(
        &mut self,
        controls: &BTreeMap<VehicleId, ControlInput>,
        params: &BicycleParams,
        dt: f64,
    ) -> Result<()> {
        for v in &self.vehicles {
            if !v.exited && !controls.contains_key(&v.id) {
                return Err(Error::MissingControl(v.id));
            }
        }
        let road = self.road;
        for v in &mut self.vehicles {
            let u = controls.get(&v.id).copied().unwrap_or_default();
            let mut next = integrate_bicycle(v, u, params, dt)?;
            next.lane = road.lane_of(next.y);
            if next.x > road.segment_length {
                next.exited = true;
            }
            *v = next;
        }
        self.time += dt;
        Ok(())
    }

    /// Nearest predecessor and follower of `ego_id` in `target_lane`.
    pub fn neighbors(&self, ego_id: VehicleId, target_lane: usize) -> Neighborhood {
        let Some(ego) = self.vehicle(ego_id) else {
            return Neighborhood::default();
        };
        let mut out = Neighborhood::default();
        let mut best_ahead = f64::INFINITY;
        let mut best_behind = f64::INFINITY;
        for other in &self.vehicles {
            if other.id == ego.id || other.lane != target_lane {
                continue;
            }
            let ahead = other.x > ego.x || (other.x == ego.x && other.id < ego.id);
            if ahead {
                let d = other.x - ego.x;
                if d < best_ahead {
                    best_ahead = d;
                    out.predecessor = Some(Neighbor {
                        id: other.id,
                        gap: (other.rear() - ego.x).max(0.0),
                        delta_v: ego.v - other.v,
                    });
                }
            } else {
                let d = ego.x - other.x;
                if d < best_behind {
                    best_behind = d;
                    out.follower = Some(Neighbor {
                        id: other.id,
                        gap: (ego.rear() - other.x).max(0.0),
                        delta_v: ego.v - other.v,
                    });
                }
            }
        }
        out
    }

    /// Pairs `(i, j)`, `i < j`, of on-segment vehicles whose bodies overlap
    /// longitudinally while laterally closer than half a lane width.
    pub fn collisions(&self) -> Vec<(VehicleId, VehicleId)> {
        let mut pairs = Vec::new();
        let half = 0.5 * self.road.lane_width;
        let active: Vec<&VehicleState> = self.active().collect();
        for (i, a) in active.iter().enumerate() {
            for b in &active[i + 1..] {
                let overlap = a.x.min(b.x) - a.rear().max(b.rear());
                if overlap > 0.0 && (a.y - b.y).abs() < half {
                    pairs.push((a.id.min(b.id), a.id.max(b.id)));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

/// Pure form of [`WorldState::step`].
pub fn step_world(
    world: &WorldState,
    controls: &BTreeMap<VehicleId, ControlInput>,
    params: &BicycleParams,
    dt: f64,
) -> Result<WorldState> {
    let mut next = world.clone();
    next.step(controls, params, dt)?;
    Ok(next)
}

pub fn neighbors(world: &WorldState, ego_id: VehicleId, target_lane: usize) -> Neighborhood {
    world.neighbors(ego_id, target_lane)
}

pub fn detect_collisions(world: &WorldState) -> Vec<(VehicleId, VehicleId)> {
    world.collisions()
}
