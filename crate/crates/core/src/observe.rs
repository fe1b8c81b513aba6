//! Grid observations, rewards, platoon identification and episode metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longitudinal::AccParams;
use crate::math;
use crate::sim::{RoadConfig, VehicleId, VehicleKind, VehicleState, WorldState};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub l_tail: f64,
    pub l_head: f64,
    pub l_grid: f64,
    pub lanes: usize,
    /// Speed that maps to 1.0 in the speed channel.
    pub v_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { l_tail: 100.0, l_head: 100.0, l_grid: 10.0, lanes: 3, v_max: 30.0 }
    }
}

impl GridConfig {
    pub fn cells(&self) -> usize {
        math::round((self.l_tail + self.l_head) / self.l_grid) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let span = (self.l_tail + self.l_head) / self.l_grid;
        if !(self.l_tail >= 0.0 && self.l_head >= 0.0 && self.l_grid > 0.0 && span >= 1.0)
            || (span - math::round(span)).abs() > 1e-9
        {
            return Err(Error::Config("grid cell width must divide the perception range".into()));
        }
        if self.lanes == 0 || !(self.v_max > 0.0) {
            return Err(Error::Config("grid needs at least one lane and positive v_max".into()));
        }
        Ok(())
    }
}

/// `channels × lanes × cells` tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridObservation {
    pub lanes: usize,
    pub cells: usize,
    pub data: Vec<f64>,
}

impl GridObservation {
    pub fn zeros(lanes: usize, cells: usize) -> Self {
        Self { lanes, cells, data: vec![0.0; CHANNELS * lanes * cells] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, self.lanes, self.cells]
    }

    fn idx(&self, c: usize, lane: usize, cell: usize) -> usize {
        (c * self.lanes + lane) * self.cells + cell
    }

    pub fn get(&self, c: usize, lane: usize, cell: usize) -> f64 {
        self.data[self.idx(c, lane, cell)]
    }

    fn set(&mut self, c: usize, lane: usize, cell: usize, value: f64) {
        let i = self.idx(c, lane, cell);
        self.data[i] = value;
    }

    /// Cells with any nonzero channel.
    pub fn occupied(&self) -> usize {
        let mut n = 0;
        for lane in 0..self.lanes {
            for cell in 0..self.cells {
                if (0..CHANNELS).any(|c| self.get(c, lane, cell) != 0.0) {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Writes vehicles with `origin <= x < origin + cells * l_grid` into a grid;
/// when two share a cell the one with the smaller `rank` wins.
fn rasterize<'a>(
    vehicles: impl Iterator<Item = &'a VehicleState>,
    lanes: usize,
    origin: f64,
    l_grid: f64,
    cells: usize,
    v_max: f64,
    rank: impl Fn(&VehicleState) -> f64,
) -> GridObservation {
    let mut grid = GridObservation::zeros(lanes, cells);
    let mut best = vec![f64::INFINITY; lanes * cells];
    let mut best_id = vec![VehicleId::MAX; lanes * cells];
    for v in vehicles {
        let rel = v.x - origin;
        if rel < 0.0 || v.lane >= lanes {
            continue;
        }
        let pos = rel / l_grid;
        let cell = math::floor(pos) as usize;
        if cell >= cells {
            continue;
        }
        let slot = v.lane * cells + cell;
        let r = rank(v);
        if r > best[slot] || (r == best[slot] && v.id > best_id[slot]) {
            continue;
        }
        best[slot] = r;
        best_id[slot] = v.id;
        grid.set(0, v.lane, cell, pos - cell as f64);
        grid.set(1, v.lane, cell, v.v / v_max);
        grid.set(2, v.lane, cell, v.kind.code());
    }
    grid
}

/// Ego-centred grid over `[x_ego - l_tail, x_ego + l_head)`.
pub fn encode_grid(world: &WorldState, ego_id: VehicleId, cfg: &GridConfig) -> Result<GridObservation> {
    let ego = world.vehicle(ego_id).ok_or(Error::UnknownVehicle(ego_id))?;
    let x0 = ego.x;
    Ok(rasterize(
        world.active(),
        cfg.lanes,
        x0 - cfg.l_tail,
        cfg.l_grid,
        cfg.cells(),
        cfg.v_max,
        |v| (v.x - x0).abs(),
    ))
}

/// Global state for the mixer: the whole segment rasterized at `cell`
/// metres, flattened.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateConfig {
    pub cell: f64,
    pub v_max: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self { cell: 20.0, v_max: 30.0 }
    }
}

impl StateConfig {
    pub fn cells(&self, road: &RoadConfig) -> usize {
        math::round(road.segment_length / self.cell).max(1.0) as usize
    }

    pub fn dim(&self, road: &RoadConfig) -> usize {
        CHANNELS * road.lane_count * self.cells(road)
    }
}

pub fn encode_global_state(world: &WorldState, cfg: &StateConfig) -> Vec<f64> {
    let cells = cfg.cells(&world.road);
    let seg = world.road.segment_length;
    let grid = rasterize(world.active(), world.road.lane_count, 0.0, seg / cells as f64, cells, cfg.v_max, |v| {
        -v.x
    });
    grid.data
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub r_decay: f64,
    pub m_decay: f64,
    pub h_min: f64,
    pub collision_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.5, w3: 2.0, r_decay: 0.1, m_decay: 0.2, h_min: 6.0, collision_penalty: -5.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 || self.w3 < 0.0 || !(self.r_decay > 0.0) || !(self.m_decay > 0.0) {
            return Err(Error::Config("reward weights must be nonnegative and decays positive".into()));
        }
        Ok(())
    }
}

/// Gap term; a missing neighbor does not constrain, none at all gives 1.
pub fn reward_safety(gap_front: Option<f64>, gap_rear: Option<f64>, cfg: &RewardConfig) -> f64 {
    let dev = [gap_front, gap_rear]
        .iter()
        .flatten()
        .map(|g| (g - cfg.h_min).abs())
        .fold(f64::INFINITY, f64::min);
    if dev.is_infinite() {
        1.0
    } else {
        math::exp(-cfg.r_decay * dev)
    }
}

/// Speed term against the predecessor, or the desired speed without one.
pub fn reward_speed(v_pred: Option<f64>, v: f64, v_desired: f64, cfg: &RewardConfig) -> f64 {
    let target = v_pred.unwrap_or(v_desired);
    math::exp(-cfg.m_decay * (target - v).abs())
}

pub fn reward_platoon(n_ahead: usize) -> f64 {
    if n_ahead == 0 {
        0.0
    } else {
        math::log10(2.0 * n_ahead as f64).max(0.0)
    }
}

pub fn combined_reward(r_c: f64, r_v: f64, r_d: f64, collided: bool, cfg: &RewardConfig) -> f64 {
    if collided {
        cfg.collision_penalty
    } else {
        cfg.w1 * r_c + cfg.w2 * r_v + cfg.w3 * r_d
    }
}

/// When a CAV counts as CACC-engaged with the CAV ahead of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EngagementRule {
    /// Gap at most this many metres.
    Fixed(f64),
    /// Gap at most `factor` times the CACC desired gap at the follower's speed.
    HeadwayMultiple { factor: f64, t_hw: f64, s0: f64 },
}

impl Default for EngagementRule {
    fn default() -> Self {
        let p = AccParams::cacc();
        EngagementRule::HeadwayMultiple { factor: 2.0, t_hw: p.t_hw, s0: p.s0 }
    }
}

impl EngagementRule {
    pub fn threshold(&self, v: f64) -> f64 {
        match *self {
            EngagementRule::Fixed(g) => g,
            EngagementRule::HeadwayMultiple { factor, t_hw, s0 } => factor * (t_hw * v + s0),
        }
    }
}

/// The CAV that `ego` is CACC-engaged with, if any.
pub fn engaged_leader(world: &WorldState, ego: &VehicleState, rule: &EngagementRule) -> Option<VehicleId> {
    if !ego.kind.is_cav() {
        return None;
    }
    let pred = world.neighbors(ego.id, ego.lane).predecessor?;
    let lead = world.vehicle(pred.id)?;
    (lead.kind.is_cav() && pred.gap <= rule.threshold(ego.v)).then_some(pred.id)
}

/// Length of the engaged CAV chain directly ahead of `ego_id` in its lane.
pub fn count_connected_ahead(world: &WorldState, ego_id: VehicleId, rule: &EngagementRule) -> usize {
    let mut n = 0;
    let Some(mut cur) = world.vehicle(ego_id) else {
        return 0;
    };
    while let Some(next) = engaged_leader(world, cur, rule) {
        n += 1;
        cur = &world.vehicles[next as usize];
        if n > world.vehicles.len() {
            break;
        }
    }
    n
}

/// Engaged CAV chains on the segment, front vehicle first. Single CAVs are
/// chains of length one.
pub fn platoons(world: &WorldState, rule: &EngagementRule) -> Vec<Vec<VehicleId>> {
    let leader: Vec<Option<VehicleId>> =
        world.vehicles.iter().map(|v| if v.exited { None } else { engaged_leader(world, v, rule) }).collect();
    chains_from_links(
        world.vehicles.iter().filter(|v| !v.exited && v.kind.is_cav()).map(|v| v.id),
        &leader,
        |id| world.vehicles[id as usize].x,
    )
}

/// Builds chains from follower→leader links among `members`. A link to a
/// vehicle outside `members` still makes the follower a chain member.
fn chains_from_links(
    members: impl Iterator<Item = VehicleId>,
    leader: &[Option<VehicleId>],
    x_of: impl Fn(VehicleId) -> f64,
) -> Vec<Vec<VehicleId>> {
    let members: Vec<VehicleId> = members.collect();
    let is_member = |id: VehicleId| members.contains(&id);
    let mut follower: Vec<Option<VehicleId>> = vec![None; leader.len()];
    for &id in &members {
        if let Some(l) = leader[id as usize] {
            follower[l as usize] = Some(id);
        }
    }
    let mut heads: Vec<VehicleId> = members
        .iter()
        .copied()
        .filter(|&id| leader[id as usize].map_or(true, |l| !is_member(l)))
        .collect();
    heads.sort_by(|a, b| x_of(*b).total_cmp(&x_of(*a)).then(a.cmp(b)));
    heads
        .into_iter()
        .map(|h| {
            let mut chain = vec![h];
            let mut cur = h;
            while let Some(f) = follower[cur as usize] {
                if !is_member(f) || chain.contains(&f) {
                    break;
                }
                chain.push(f);
                cur = f;
            }
            chain
        })
        .collect()
}

/// One vehicle in one recorded step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub id: VehicleId,
    pub kind: VehicleKind,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub lane: usize,
    pub active: bool,
    /// CAV this vehicle is CACC-engaged with.
    pub engaged_with: Option<VehicleId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub t: f64,
    pub rows: Vec<TraceRow>,
}

/// Per-step episode record from which [`EpisodeMetrics`] are computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub dt: f64,
    pub frames: Vec<TraceFrame>,
    /// Completed lane changes per vehicle at the end of the episode.
    pub lane_changes: Vec<u32>,
    pub collisions: usize,
}

impl EpisodeTrace {
    pub fn new(dt: f64) -> Self {
        Self { dt, ..Default::default() }
    }

    pub fn record(&mut self, world: &WorldState, rule: &EngagementRule) {
        let rows = world
            .vehicles
            .iter()
            .map(|v| TraceRow {
                id: v.id,
                kind: v.kind,
                x: v.x,
                y: v.y,
                v: v.v,
                a: v.a,
                lane: v.lane,
                active: !v.exited,
                engaged_with: if v.exited { None } else { engaged_leader(world, v, rule) },
            })
            .collect();
        self.frames.push(TraceFrame { t: world.time, rows });
        self.lane_changes = world.vehicles.iter().map(|v| v.lane_changes).collect();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub platoon_rate: f64,
    pub max_platoon_length: usize,
    /// Mean time at which platooning CAVs first joined a platoon.
    pub formation_time: Option<f64>,
    pub lane_changes_per_vehicle: f64,
    pub mean_speed: f64,
    pub energy: f64,
    pub collisions: usize,
}

/// A CAV participates when it follows an engaged leader or leads an engaged
/// follower.
fn participating(frame: &TraceFrame) -> Vec<bool> {
    let mut part = vec![false; frame.rows.len()];
    for r in &frame.rows {
        if !r.active {
            continue;
        }
        if let Some(l) = r.engaged_with {
            part[r.id as usize] = true;
            if let Some(lr) = frame.rows.get(l as usize) {
                if lr.kind.is_cav() {
                    part[l as usize] = true;
                }
            }
        }
    }
    part
}

pub fn platoon_metrics(trace: &EpisodeTrace) -> Result<EpisodeMetrics> {
    let Some(first) = trace.frames.first() else {
        return Err(Error::EmptyTrace);
    };
    let n = first.rows.len();
    let mut last_part = vec![false; n];
    let mut first_time: Vec<Option<f64>> = vec![None; n];
    let mut energy = vec![0.0; n];
    let (mut speed_sum, mut speed_count) = (0.0, 0usize);
    let mut max_len = 0usize;
    for frame in &trace.frames {
        let part = participating(frame);
        let leader: Vec<Option<VehicleId>> = frame.rows.iter().map(|r| r.engaged_with).collect();
        let chains = chains_from_links(
            frame.rows.iter().filter(|r| r.active && r.kind.is_cav()).map(|r| r.id),
            &leader,
            |id| frame.rows[id as usize].x,
        );
        for c in &chains {
            // An engaged link to an exited leader still counts that leader.
            let extra = usize::from(leader[c[0] as usize].is_some());
            max_len = max_len.max(c.len() + extra);
        }
        for r in frame.rows.iter().filter(|r| r.active) {
            let i = r.id as usize;
            speed_sum += r.v;
            speed_count += 1;
            energy[i] += r.a.abs() * trace.dt;
            if r.kind.is_cav() {
                last_part[i] = part[i];
                if part[i] && first_time[i].is_none() {
                    first_time[i] = Some(frame.t);
                }
            }
        }
    }
    let cavs: Vec<usize> = first.rows.iter().filter(|r| r.kind.is_cav()).map(|r| r.id as usize).collect();
    let platoon_rate =
        if cavs.is_empty() { 0.0 } else { cavs.iter().filter(|&&i| last_part[i]).count() as f64 / cavs.len() as f64 };
    let times: Vec<f64> = cavs.iter().filter_map(|&i| first_time[i]).collect();
    let formation_time = (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);
    let lc_total: u32 = trace.lane_changes.iter().sum();
    Ok(EpisodeMetrics {
        platoon_rate,
        max_platoon_length: if max_len >= 2 { max_len } else { 0 },
        formation_time,
        lane_changes_per_vehicle: if n == 0 { 0.0 } else { lc_total as f64 / n as f64 },
        mean_speed: if speed_count == 0 { 0.0 } else { speed_sum / speed_count as f64 },
        energy: if n == 0 { 0.0 } else { energy.iter().sum::<f64>() / n as f64 },
        collisions: trace.collisions,
    })
}
