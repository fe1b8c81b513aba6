//! Self-checks run by the `gradcheck` and `conformance` commands.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::mpc::{MpcConfig, MpcController};
use crate::exec::planner::{plan_quintic, PlanGoal, PlanStart};
use crate::exec::tracker::{ExecConfig, LaneChangeExecutor};
use crate::longitudinal::{idm_accel, AccParams, CaccFilter, ControllerSet, IdmParams, LongitudinalConfig};
use crate::math;
use crate::nn::{grad_check, Activation, Conv2d, Gru, Linear};
use crate::observe::GridConfig;
use crate::qmix::agent::{AgentInput, GRU_UNITS};
use crate::qmix::{td_loss_against, td_targets, AgentNet, AgentStep, Mixer, QmixNet, Transition};
use crate::sim::{BicycleParams, ControlInput, RoadConfig, VehicleKind, VehicleState, WorldState};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-3;

/// One measured quantity against its bound; `passed` means
/// `value <= tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self { name: name.to_string(), value, tolerance, passed: value <= tolerance }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(Check::new(name, value, tolerance));
    }
}

fn uniform(n: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

fn conv_error(r: &mut ChaCha8Rng) -> Result<f64> {
    let c = Conv2d { in_c: 3, in_h: 3, in_w: 8, out_c: 4, kernel: (3, 3), stride: (2, 2), act: Activation::Relu, offset: 0 };
    let mut params = vec![0.0; c.param_count()];
    c.init(&mut params, r);
    let x = uniform(c.in_len(), 1.0, r);
    let w = uniform(c.out_len(), 1.0, r);
    let mut failed = None;
    let report = grad_check(&mut params, GRAD_EPS, |p| {
        let mut g = vec![0.0; p.len()];
        let y = match c.forward(p, &x).and_then(|y| c.backward(p, &x, &y, &w, &mut g).map(|_| y)) {
            Ok(y) => y,
            Err(e) => {
                failed = Some(e);
                return (0.0, g);
            }
        };
        (y.iter().zip(&w).map(|(a, b)| a * b).sum(), g)
    });
    failed.map_or(Ok(report.max_rel_error), Err)
}

fn linear_error(r: &mut ChaCha8Rng) -> Result<f64> {
    let l = Linear { input: 7, output: 4, act: Activation::Elu, offset: 0 };
    let mut params = vec![0.0; l.param_count()];
    l.init(&mut params, r);
    let x = uniform(7, 1.0, r);
    let w = uniform(4, 1.0, r);
    let mut failed = None;
    let report = grad_check(&mut params, GRAD_EPS, |p| {
        let mut g = vec![0.0; p.len()];
        match l.forward(p, &x).and_then(|y| l.backward(p, &x, &y, &w, &mut g).map(|_| y)) {
            Ok(y) => (y.iter().zip(&w).map(|(a, b)| a * b).sum(), g),
            Err(e) => {
                failed = Some(e);
                (0.0, g)
            }
        }
    });
    failed.map_or(Ok(report.max_rel_error), Err)
}

fn gru_error(r: &mut ChaCha8Rng) -> Result<f64> {
    let g = Gru { input: 4, hidden: 5, offset: 0 };
    let mut params = vec![0.0; g.param_count()];
    g.init(&mut params, r);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| uniform(4, 1.0, r)).collect();
    let h0 = uniform(5, 1.0, r);
    let mut failed = None;
    let report = grad_check(&mut params, GRAD_EPS, |p| {
        let mut grads = vec![0.0; p.len()];
        let run = |grads: &mut Vec<f64>| -> Result<f64> {
            let mut hs = vec![h0.clone()];
            let mut caches = Vec::new();
            for x in &xs {
                let (h, c) = g.forward(p, x, hs.last().expect("nonempty"))?;
                hs.push(h);
                caches.push(c);
            }
            let last = hs.last().expect("nonempty");
            let loss = last.iter().map(|v| v * v).sum();
            let mut dh: Vec<f64> = last.iter().map(|v| 2.0 * v).collect();
            for t in (0..xs.len()).rev() {
                dh = g.backward(p, &xs[t], &hs[t], &caches[t], &dh, grads)?.1;
            }
            Ok(loss)
        };
        match run(&mut grads) {
            Ok(loss) => (loss, grads),
            Err(e) => {
                failed = Some(e);
                (0.0, grads)
            }
        }
    });
    failed.map_or(Ok(report.max_rel_error), Err)
}

fn agent_error(net: &AgentNet, r: &mut ChaCha8Rng) -> Result<f64> {
    let mut params = vec![0.0; net.param_count()];
    net.init(&mut params, r);
    let obs = uniform(net.obs_len(), 1.0, r);
    let h = uniform(GRU_UNITS, 0.5, r);
    let w = uniform(3, 1.0, r);
    let mut failed = None;
    let report = grad_check(&mut params, GRAD_EPS, |p| {
        let mut g = vec![0.0; p.len()];
        let input = AgentInput { obs: &obs, last_action: 2, agent_id: 1, hidden: &h };
        match net.forward(p, &input).and_then(|c| net.backward(p, &c, &w, &mut g).map(|_| c)) {
            Ok(c) => (c.q().iter().zip(&w).map(|(a, b)| a * b).sum(), g),
            Err(e) => {
                failed = Some(e);
                (0.0, g)
            }
        }
    });
    failed.map_or(Ok(report.max_rel_error), Err)
}

fn mixer_errors(r: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let m = Mixer::new(3, 5, 0);
    let mut params = vec![0.0; m.param_count()];
    m.init(&mut params, r);
    let s = uniform(5, 1.0, r);
    let q = uniform(3, 2.0, r);
    let mask = [1.0, 1.0, 0.0];
    let mut failed = None;
    let by_params = grad_check(&mut params, GRAD_EPS, |p| {
        let mut g = vec![0.0; p.len()];
        match m.forward(p, &q, &mask, &s).and_then(|c| m.backward(p, &c, 2.0 * c.q_total, &mut g).map(|_| c)) {
            Ok(c) => (c.q_total * c.q_total, g),
            Err(e) => {
                failed = Some(e);
                (0.0, g)
            }
        }
    });
    let mut qv = q.clone();
    let by_q = grad_check(&mut qv, GRAD_EPS, |qq| {
        let mut g = vec![0.0; params.len()];
        match m.forward(&params, qq, &mask, &s).and_then(|c| m.backward(&params, &c, 1.0, &mut g).map(|dq| (c, dq))) {
            Ok((c, dq)) => (c.q_total, dq),
            Err(e) => {
                failed = Some(e);
                (0.0, vec![0.0; qq.len()])
            }
        }
    });
    failed.map_or(Ok((by_params.max_rel_error, by_q.max_rel_error)), Err)
}

fn td_error(r: &mut ChaCha8Rng) -> Result<f64> {
    let grid = GridConfig { l_tail: 20.0, l_head: 20.0, l_grid: 10.0, lanes: 2, v_max: 30.0 };
    let net = QmixNet::new(AgentNet::cnn(&grid, 2)?, 6);
    let obs_len = net.agent.obs_len();
    let step = |id: usize, r: &mut ChaCha8Rng| AgentStep {
        id,
        obs: uniform(obs_len, 1.0, r),
        last_action: r.gen_range(0..3),
        hidden: uniform(GRU_UNITS, 0.5, r),
    };
    let toy = |r: &mut ChaCha8Rng, terminal: bool| Transition {
        agents: vec![step(0, r), step(1, r)],
        actions: vec![r.gen_range(0..3), r.gen_range(0..3)],
        state: uniform(6, 1.0, r),
        reward: r.gen_range(-1.0..1.0),
        next_agents: vec![step(0, r), step(1, r)],
        next_state: uniform(6, 1.0, r),
        terminal,
    };
    let mut params = net.init(r);
    let target = net.init(r);
    let batch = [toy(r, false), toy(r, true)];
    let refs: Vec<&Transition> = batch.iter().collect();
    let y = td_targets(&net, &target, &refs, 0.5)?;
    let mut failed = None;
    let report = grad_check(&mut params, GRAD_EPS, |p| match td_loss_against(&net, p, &refs, &y) {
        Ok(out) => out,
        Err(e) => {
            failed = Some(e);
            (0.0, vec![0.0; p.len()])
        }
    });
    failed.map_or(Ok(report.max_rel_error), Err)
}

/// Central-difference gradient checks of every layer, the full agent
/// network, the mixer and the TD loss on a two-agent batch.
pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteReport::default();
    out.push("conv2d", conv_error(&mut r)?, GRAD_TOLERANCE);
    out.push("linear", linear_error(&mut r)?, GRAD_TOLERANCE);
    out.push("gru_unrolled", gru_error(&mut r)?, GRAD_TOLERANCE);
    out.push("agent_cnn", agent_error(&AgentNet::cnn(&GridConfig::default(), 4)?, &mut r)?, GRAD_TOLERANCE);
    out.push("agent_flat", agent_error(&AgentNet::flat(3, 4)?, &mut r)?, GRAD_TOLERANCE);
    let (mp, mq) = mixer_errors(&mut r)?;
    out.push("mixer_params", mp, GRAD_TOLERANCE);
    out.push("mixer_q", mq, GRAD_TOLERANCE);
    out.push("td_loss_two_agents", td_error(&mut r)?, GRAD_TOLERANCE);
    Ok(out)
}

/// Monotonicity and masking of the mixer over random draws. Reports the
/// most negative finite-difference slope (negated) and the largest change
/// caused by masked agents.
pub fn mixing_suite(draws: usize, seed: u64) -> Result<SuiteReport> {
    const AGENTS: usize = 6;
    const STATE: usize = 10;
    let m = Mixer::new(AGENTS, STATE, 0);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_slope = f64::INFINITY;
    let mut worst_mask: f64 = 0.0;
    let mut params = vec![0.0; m.param_count()];
    for _ in 0..draws {
        m.init(&mut params, &mut r);
        let s = uniform(STATE, 2.0, &mut r);
        let q = uniform(AGENTS, 5.0, &mut r);
        let mask: Vec<f64> = (0..AGENTS).map(|_| if r.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
        let base = m.forward(&params, &q, &mask, &s)?.q_total;
        for i in 0..AGENTS {
            let mut q2 = q.clone();
            if mask[i] == 1.0 {
                let h = 1e-3;
                q2[i] = q[i] + h;
                let up = m.forward(&params, &q2, &mask, &s)?.q_total;
                q2[i] = q[i] - h;
                let down = m.forward(&params, &q2, &mask, &s)?.q_total;
                worst_slope = worst_slope.min((up - down) / (2.0 * h));
            } else {
                q2[i] = r.gen_range(-1e3..1e3);
                worst_mask = worst_mask.max((m.forward(&params, &q2, &mask, &s)?.q_total - base).abs());
            }
        }
    }
    let mut out = SuiteReport::default();
    out.push("mixer_min_slope_negated", -worst_slope, 1e-8);
    out.push("mixer_masked_change", worst_mask, 0.0);
    Ok(out)
}

fn quintic_closed_form() -> Result<f64> {
    let (y_f, t_f) = (3.5, 3.0);
    let start = PlanStart { x: 0.0, y: 0.0, v: 15.0, a: 0.0, heading: 0.0 };
    let plan = plan_quintic(start, PlanGoal { y_f, v_f: 15.0 }, t_f)?;
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let t = t_f * i as f64 / 999.0;
        let s = t / t_f;
        let oracle = y_f * (10.0 * s * s * s - 15.0 * s * s * s * s + 6.0 * s * s * s * s * s);
        worst = worst.max((plan.position(t).1 - oracle).abs());
    }
    Ok(worst)
}

fn quintic_boundaries(r: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let start = PlanStart {
            x: r.gen_range(-100.0..1000.0),
            y: r.gen_range(-2.0..9.0),
            v: r.gen_range(0.0..35.0),
            a: r.gen_range(-3.0..2.0),
            heading: r.gen_range(-0.1..0.1),
        };
        let goal = PlanGoal { y_f: r.gen_range(-2.0..9.0), v_f: r.gen_range(0.0..35.0) };
        let t_f = r.gen_range(0.5..6.0);
        let plan = plan_quintic(start, goal, t_f)?;
        let (c, s) = (math::cos(start.heading), math::sin(start.heading));
        let residuals = [
            plan.position(0.0).0 - start.x,
            plan.velocity(0.0).0 - start.v * c,
            plan.acceleration(0.0).0 - start.a * c,
            plan.position(t_f).0 - (start.x + 0.5 * t_f * (start.v * c + goal.v_f)),
            plan.velocity(t_f).0 - goal.v_f,
            plan.acceleration(t_f).0,
            plan.position(0.0).1 - start.y,
            plan.velocity(0.0).1 - start.v * s,
            plan.acceleration(0.0).1 - start.a * s,
            plan.position(t_f).1 - goal.y_f,
            plan.velocity(t_f).1,
            plan.acceleration(t_f).1,
        ];
        for v in residuals {
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

fn mpc_unconstrained() -> Result<f64> {
    let cfg = MpcConfig {
        v0: 12.0,
        u_min: [-1e9; 2],
        u_max: [1e9; 2],
        tolerance: 1e-12,
        max_iterations: 100_000,
        ..Default::default()
    };
    let ctl = MpcController::new(&cfg)?;
    let x0 = [0.0, 0.1, 0.0, 12.0, 0.2];
    let reference: Vec<(f64, f64)> = (1..=cfg.horizon).map(|k| (1.3 * k as f64, 0.2 * k as f64)).collect();
    let u_prev = ControlInput::new(0.3, -0.01);
    let f = ctl.linear_term(&x0, &reference, u_prev)?;
    let exact = ctl
        .hessian()
        .clone()
        .lu()
        .solve(&(-f))
        .ok_or_else(|| crate::Error::Contract("MPC Hessian is singular".into()))?;
    let sol = ctl.solve(&x0, &reference, u_prev, None)?;
    let mut worst: f64 = 0.0;
    for (k, u) in sol.inputs.iter().enumerate() {
        worst = worst.max((u.u_a - exact[2 * k]).abs()).max((u.u_delta - exact[2 * k + 1]).abs());
    }
    Ok(worst)
}

fn mpc_self_consistent() -> Result<f64> {
    let ctl = MpcController::new(&MpcConfig::default())?;
    let x0 = [100.0, 3.5, 0.0, 15.0, 0.0];
    let mut worst: f64 = 0.0;
    for u_prev in [ControlInput::default(), ControlInput::new(0.5, 0.02)] {
        let reference = ctl.hold_prediction(&x0, u_prev);
        let sol = ctl.solve(&x0, &reference, u_prev, None)?;
        for u in &sol.inputs {
            worst = worst.max((u.u_a - u_prev.u_a).abs()).max((u.u_delta - u_prev.u_delta).abs());
        }
    }
    Ok(worst)
}

/// Lone vehicle changing one lane in 3 s; returns the largest lateral
/// deviation from the plan and the largest bound violation of the applied
/// inputs.
fn mpc_lane_change() -> Result<(f64, f64)> {
    let cfg = ExecConfig { durations: vec![3.0], ..Default::default() };
    let (lo, hi) = (cfg.mpc.u_min, cfg.mpc.u_max);
    let mut exec = LaneChangeExecutor::new(cfg)?;
    let road = RoadConfig::default();
    let mut w = WorldState { road, time: 0.0, vehicles: vec![VehicleState::on_lane(0, VehicleKind::Cav, &road, 0, 100.0, 15.0)] };
    let params = BicycleParams::default();
    let ego = w.vehicles[0].clone();
    let mut m = exec.begin(&w, &ego, 1)?;
    let (mut err, mut violation): (f64, f64) = (0.0, 0.0);
    loop {
        let ego = w.vehicles[0].clone();
        let step = exec.track(&w, &ego, &mut m, f64::INFINITY, road.dt)?;
        let u = step.input;
        violation = violation.max(lo[0] - u.u_a).max(u.u_a - hi[0]).max(lo[1] - u.u_delta).max(u.u_delta - hi[1]);
        let mut controls = BTreeMap::new();
        controls.insert(0, u);
        w.step(&controls, &params, road.dt)?;
        err = err.max((w.vehicles[0].y - m.plan.position(m.elapsed).1).abs());
        if step.finished {
            break;
        }
    }
    Ok((err, violation))
}

/// Largest bound violation over solves with references far out of reach.
fn mpc_bounds(r: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = MpcConfig::default();
    let ctl = MpcController::new(&cfg)?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x0 = [0.0, r.gen_range(-1.0..1.0), r.gen_range(-0.05..0.05), r.gen_range(5.0..25.0), r.gen_range(-1.0..1.0)];
        let (dx, dy) = (r.gen_range(-5.0..5.0), r.gen_range(-20.0..20.0));
        let reference: Vec<(f64, f64)> = (1..=cfg.horizon).map(|k| (x0[3] * 0.1 * k as f64 + dx * k as f64, dy)).collect();
        let sol = ctl.solve(&x0, &reference, ControlInput::default(), None)?;
        for u in &sol.inputs {
            let v = [cfg.u_min[0] - u.u_a, u.u_a - cfg.u_max[0], cfg.u_min[1] - u.u_delta, u.u_delta - cfg.u_max[1]];
            worst = v.into_iter().fold(worst, f64::max);
        }
    }
    Ok(worst)
}

/// Ten human drivers from uneven spacing; returns the time at which all
/// accelerations fall below 0.01 m/s² for good (infinite if never) and
/// the number of collision events.
fn idm_platoon_settling() -> Result<(f64, usize)> {
    let mut road = RoadConfig::default();
    road.segment_length = 1e6;
    let mut vehicles = Vec::new();
    let mut x = 1000.0;
    for i in 0..10u32 {
        vehicles.push(VehicleState::on_lane(i, VehicleKind::HumanDriven, &road, 0, x, 10.0));
        x -= 5.0 + 15.0 + if i % 2 == 0 { 6.0 } else { -4.0 };
    }
    let mut w = WorldState { road, time: 0.0, vehicles };
    let mut set = ControllerSet::new(LongitudinalConfig::default(), 10);
    let params = BicycleParams::default();
    let mut settled_since = None;
    let mut collisions = 0;
    for _ in 0..3000 {
        let mut controls = BTreeMap::new();
        for id in 0..10u32 {
            controls.insert(id, ControlInput::new(set.command(&w, id, 0, road.dt)?, 0.0));
        }
        w.step(&controls, &params, road.dt)?;
        collisions += w.collisions().len();
        let calm = w.vehicles.iter().all(|v| v.a.abs() < 0.01);
        settled_since = match (calm, settled_since) {
            (true, None) => Some(w.time),
            (true, s) => s,
            (false, _) => None,
        };
    }
    Ok((settled_since.unwrap_or(f64::INFINITY), collisions))
}

fn controller_equilibrium() -> Result<f64> {
    let cfg = LongitudinalConfig::default();
    let road = RoadConfig::default();
    let v = 10.0;
    let mut worst: f64 = 0.0;
    for (kind, gap) in [(VehicleKind::Cav, cfg.cacc.desired_gap(v)), (VehicleKind::HumanDriven, cfg.acc.desired_gap(v))] {
        let mut lead = VehicleState::on_lane(1, kind, &road, 0, 300.0, v);
        lead.desired_speed = 20.0;
        let mut ego = VehicleState::on_lane(0, VehicleKind::Cav, &road, 0, 300.0 - 5.0 - gap, v);
        ego.desired_speed = 20.0;
        let w = WorldState { road, time: 0.0, vehicles: vec![ego, lead] };
        let mut set = ControllerSet::new(cfg.clone(), 2);
        worst = worst.max(set.command(&w, 0, 0, road.dt)?.abs());
    }
    Ok(worst)
}

fn cacc_linearity(r: &mut ChaCha8Rng) -> f64 {
    let p = AccParams::cacc();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let alpha = r.gen_range(-5.0..5.0);
        let (mut f1, mut f2, mut f3) = (CaccFilter::at_rest(), CaccFilter::at_rest(), CaccFilter::at_rest());
        for _ in 0..60 {
            let (a, b) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
            let y1 = f1.step(a, &p, 0.1);
            let y2 = f2.step(b, &p, 0.1);
            let y3 = f3.step(alpha * a + b, &p, 0.1);
            worst = worst.max((y3 - (alpha * y1 + y2)).abs());
        }
    }
    worst
}

/// Analytic checks of the planner, the MPC and the car-following laws.
pub fn conformance_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteReport::default();
    out.push("quintic_min_jerk_profile", quintic_closed_form()?, 1e-9);
    out.push("quintic_boundary_residuals", quintic_boundaries(&mut r)?, 1e-9);
    out.push("mpc_unconstrained_vs_normal_equations", mpc_unconstrained()?, 1e-8);
    out.push("mpc_self_consistent_du", mpc_self_consistent()?, 1e-12);
    let (err, violation) = mpc_lane_change()?;
    out.push("mpc_lane_change_lateral_error", err, 0.2);
    out.push("mpc_lane_change_bound_violation", violation, 0.0);
    out.push("mpc_bound_violation", mpc_bounds(&mut r)?, 0.0);
    let idm = IdmParams::default();
    out.push("idm_free_flow", idm_accel(idm.v0, f64::INFINITY, 0.0, &idm)?.abs(), 1e-12);
    out.push("idm_standstill", idm_accel(0.0, idm.s0, 0.0, &idm)?.abs(), 1e-12);
    let (settle, collisions) = idm_platoon_settling()?;
    out.push("idm_platoon_settle_time", settle, 300.0);
    out.push("idm_platoon_collisions", collisions as f64, 0.0);
    out.push("acc_cacc_equilibrium_command", controller_equilibrium()?, 0.0);
    out.push("cacc_filter_linearity", cacc_linearity(&mut r), 1e-12);
    Ok(out)
}
