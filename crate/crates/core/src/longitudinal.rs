//! Car-following: IDM for human drivers, ACC/CACC for connected vehicles.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::sim::{Neighbor, VehicleId, VehicleKind, VehicleState, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    pub a0: f64,
    pub b0: f64,
    pub t_headway: f64,
    pub v0: f64,
    pub s0: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { a0: 1.52, b0: 3.24, t_headway: 1.02, v0: 15.4, s0: 6.0, delta: 4.0 }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a0 > 0.0
            && self.b0 > 0.0
            && self.t_headway > 0.0
            && self.v0 > 0.0
            && self.s0 > 0.0
            && self.delta >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("IDM parameters must be positive with delta >= 1".into()))
        }
    }

    pub fn max_braking(&self) -> f64 {
        2.0 * self.b0
    }
}

/// IDM acceleration. Pass `f64::INFINITY` as `delta_s` for free flow.
pub fn idm_accel(v: f64, delta_s: f64, delta_v: f64, p: &IdmParams) -> Result<f64> {
    if !(delta_s > 0.0) {
        return Err(Error::NonPositiveGap(delta_s));
    }
    let s_star = p.s0 + (p.t_headway * v + v * delta_v / (2.0 * math::sqrt(p.a0 * p.b0))).max(0.0);
    let free = math::powf(v / p.v0, p.delta);
    let interaction = if delta_s.is_infinite() { 0.0 } else { (s_star / delta_s) * (s_star / delta_s) };
    let a = p.a0 * (1.0 - free - interaction);
    Ok(a.clamp(-p.max_braking(), p.a0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccParams {
    pub k_p: f64,
    pub k_d: f64,
    pub t_hw: f64,
    pub s0: f64,
    /// Feed-forward filter time constant.
    pub ff_t: f64,
    /// Feed-forward filter lag.
    pub ff_tau: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for AccParams {
    fn default() -> Self {
        Self::acc()
    }
}

impl AccParams {
    pub fn acc() -> Self {
        Self { k_p: 0.5, k_d: 0.3, t_hw: 1.2, s0: 6.0, ff_t: 1.2, ff_tau: 0.4, u_min: -4.0, u_max: 2.0 }
    }

    pub fn cacc() -> Self {
        Self { t_hw: 0.6, ff_t: 0.6, ..Self::acc() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.k_p > 0.0
            && self.k_d > 0.0
            && self.t_hw > 0.0
            && self.s0 >= 0.0
            && self.ff_t > 0.0
            && self.ff_tau >= 0.0
            && self.u_min < 0.0
            && self.u_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("ACC/CACC gains and headway must be positive".into()))
        }
    }

    pub fn desired_gap(&self, v: f64) -> f64 {
        v * self.t_hw + self.s0
    }

    fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }
}

/// PD gap control. A surplus gap (`gap > h_d`) accelerates.
pub fn acc_command(gap: f64, v: f64, v_lead: f64, p: &AccParams) -> f64 {
    let e = gap - p.desired_gap(v);
    let e_dot = v_lead - v;
    p.clamp(p.k_p * e + p.k_d * e_dot)
}

/// Speed loop used without a leader.
pub fn free_flow_command(v: f64, v_desired: f64, p: &AccParams) -> f64 {
    p.clamp(p.k_p * (v_desired - v))
}

/// First-order lead-lag `(τ s + 1) / (T s + 1)` on the predecessor's
/// acceleration, discretized exactly under a zero-order hold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaccFilter {
    /// Low-pass state `1 / (T s + 1)` of the input.
    pub z: f64,
}

impl CaccFilter {
    pub fn at_rest() -> Self {
        Self { z: 0.0 }
    }

    /// Filter output for the current input; advances the memory by `dt`.
    pub fn step(&mut self, a_lead: f64, p: &AccParams, dt: f64) -> f64 {
        let ratio = p.ff_tau / p.ff_t;
        let out = ratio * a_lead + (1.0 - ratio) * self.z;
        let phi = math::exp(-dt / p.ff_t);
        self.z = phi * self.z + (1.0 - phi) * a_lead;
        out
    }

    pub fn reset(&mut self) {
        self.z = 0.0;
    }
}

/// ACC feedback plus the filtered predecessor acceleration. `a_lead` is only
/// available from a connected predecessor; `None` is a caller bug.
pub fn cacc_command(
    gap: f64,
    v: f64,
    v_lead: f64,
    a_lead: Option<f64>,
    p: &AccParams,
    filter: &mut CaccFilter,
    dt: f64,
) -> Result<f64> {
    let Some(a_lead) = a_lead else {
        return Err(Error::Contract("CACC requires a connected predecessor".into()));
    };
    let e = gap - p.desired_gap(v);
    let feedback = p.k_p * e + p.k_d * (v_lead - v);
    Ok(p.clamp(feedback + filter.step(a_lead, p, dt)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LongitudinalMode {
    Idm,
    Acc,
    Cacc,
    FreeFlow,
}

/// Leader seen by a follower: its state and the bumper-to-bumper gap.
#[derive(Clone, Copy, Debug)]
pub struct Leader<'a> {
    pub state: &'a VehicleState,
    pub gap: f64,
}

pub fn select_longitudinal_mode(ego: &VehicleState, leader: Option<Leader<'_>>, sensing_range: f64) -> LongitudinalMode {
    if ego.kind == VehicleKind::HumanDriven {
        return LongitudinalMode::Idm;
    }
    match leader {
        Some(l) if l.gap <= sensing_range => {
            if l.state.kind.is_cav() {
                LongitudinalMode::Cacc
            } else {
                LongitudinalMode::Acc
            }
        }
        _ => LongitudinalMode::FreeFlow,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongitudinalConfig {
    pub idm: IdmParams,
    pub acc: AccParams,
    pub cacc: AccParams,
    /// Range within which a predecessor is tracked (radar and V2V alike).
    pub sensing_range: f64,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        Self { idm: IdmParams::default(), acc: AccParams::acc(), cacc: AccParams::cacc(), sensing_range: 150.0 }
    }
}

impl LongitudinalConfig {
    pub fn validate(&self) -> Result<()> {
        self.idm.validate()?;
        self.acc.validate()?;
        self.cacc.validate()?;
        if self.sensing_range > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("sensing range must be positive".into()))
        }
    }
}

/// Per-simulation controller state: the CACC filter memory of every vehicle.
#[derive(Clone, Debug)]
pub struct ControllerSet {
    pub cfg: LongitudinalConfig,
    filters: Vec<CaccFilter>,
    modes: Vec<Option<LongitudinalMode>>,
}

impl ControllerSet {
    pub fn new(cfg: LongitudinalConfig, vehicle_count: usize) -> Self {
        Self { cfg, filters: alloc::vec![CaccFilter::at_rest(); vehicle_count], modes: alloc::vec![None; vehicle_count] }
    }

    /// Mode used on the most recent [`command`](Self::command) call.
    pub fn last_mode(&self, id: VehicleId) -> Option<LongitudinalMode> {
        self.modes.get(id as usize).copied().flatten()
    }

    fn idm_for(&self, ego: &VehicleState) -> IdmParams {
        IdmParams { v0: ego.desired_speed, ..self.cfg.idm }
    }

    /// Stateless acceleration prediction behind a hypothetical leader. CACC
    /// is evaluated with its feed-forward at steady state (equal to the
    /// leader's acceleration).
    pub fn predict_accel(&self, ego: &VehicleState, leader: Option<Leader<'_>>) -> f64 {
        let mode = select_longitudinal_mode(ego, leader, self.cfg.sensing_range);
        self.evaluate(ego, leader, mode, None, 0.0).unwrap_or(-self.cfg.idm.max_braking())
    }

    fn evaluate(
        &self,
        ego: &VehicleState,
        leader: Option<Leader<'_>>,
        mode: LongitudinalMode,
        filter: Option<&mut CaccFilter>,
        dt: f64,
    ) -> Result<f64> {
        match (mode, leader) {
            (LongitudinalMode::Idm, None) => idm_accel(ego.v, f64::INFINITY, 0.0, &self.idm_for(ego)),
            (LongitudinalMode::Idm, Some(l)) => {
                if l.gap <= 0.0 {
                    return Ok(-self.cfg.idm.max_braking());
                }
                idm_accel(ego.v, l.gap, ego.v - l.state.v, &self.idm_for(ego))
            }
            (LongitudinalMode::FreeFlow, _) | (_, None) => Ok(free_flow_command(ego.v, ego.desired_speed, &self.cfg.acc)),
            (LongitudinalMode::Acc, Some(l)) => {
                let p = &self.cfg.acc;
                let gap_cmd = acc_command(l.gap, ego.v, l.state.v, p);
                Ok(gap_cmd.min(free_flow_command(ego.v, ego.desired_speed, p)))
            }
            (LongitudinalMode::Cacc, Some(l)) => {
                let p = &self.cfg.cacc;
                let cmd = match filter {
                    Some(f) => cacc_command(l.gap, ego.v, l.state.v, Some(l.state.a), p, f, dt)?,
                    None => {
                        let e = l.gap - p.desired_gap(ego.v);
                        p.clamp(p.k_p * e + p.k_d * (l.state.v - ego.v) + l.state.a)
                    }
                };
                Ok(cmd.min(free_flow_command(ego.v, ego.desired_speed, p)))
            }
        }
    }

    /// Commanded acceleration for `ego_id` following its predecessor in
    /// `lane`; advances that vehicle's CACC filter.
    pub fn command(&mut self, world: &WorldState, ego_id: VehicleId, lane: usize, dt: f64) -> Result<f64> {
        let ego = world.vehicle(ego_id).ok_or(Error::UnknownVehicle(ego_id))?;
        let pred = world.neighbors(ego_id, lane).predecessor;
        let leader = leader_of(world, pred);
        let mode = select_longitudinal_mode(ego, leader, self.cfg.sensing_range);
        let idx = ego_id as usize;
        if idx >= self.filters.len() {
            return Err(Error::Contract(format!("no controller state for vehicle {ego_id}")));
        }
        if mode != LongitudinalMode::Cacc {
            self.filters[idx].reset();
        }
        let mut filter = self.filters[idx];
        let out = self.evaluate(ego, leader, mode, Some(&mut filter), dt);
        self.filters[idx] = filter;
        self.modes[idx] = Some(mode);
        out
    }

    /// Predicted acceleration of `ego` behind its predecessor in `lane`.
    pub fn predict_in_lane(&self, world: &WorldState, ego: &VehicleState, lane: usize) -> f64 {
        let pred = world.neighbors(ego.id, lane).predecessor;
        self.predict_accel(ego, leader_of(world, pred))
    }
}

pub fn leader_of(world: &WorldState, pred: Option<Neighbor>) -> Option<Leader<'_>> {
    pred.and_then(|n| world.vehicle(n.id).map(|state| Leader { state, gap: n.gap }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::tests::{car, world_of};
    use crate::sim::{BicycleParams, ControlInput};
    use alloc::collections::BTreeMap;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn idm_equilibria_are_exact() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(p.v0, f64::INFINITY, 0.0, &p).unwrap(), 0.0);
        assert_eq!(idm_accel(0.0, p.s0, 0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn idm_reference_value() {
        // Independent scalar evaluation.
        let s_star: f64 = 6.0 + 1.02 * 10.0;
        let expected = 1.52 * (1.0 - (10.0f64 / 15.4).powi(4) - (s_star / 30.0).powi(2));
        let got = idm_accel(10.0, 30.0, 0.0, &IdmParams::default()).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.806).abs() < 1e-3);
    }

    #[test]
    fn idm_rejects_nonpositive_gap() {
        let p = IdmParams::default();
        assert!(matches!(idm_accel(10.0, 0.0, 0.0, &p), Err(Error::NonPositiveGap(_))));
        assert!(idm_accel(10.0, -1.0, 0.0, &p).is_err());
        assert!(idm_accel(10.0, f64::NAN, 0.0, &p).is_err());
    }

    #[test]
    fn acc_reference_values() {
        let p = AccParams::acc();
        assert_eq!(acc_command(18.0, 10.0, 10.0, &p), 0.0);
        assert!((acc_command(20.0, 10.0, 10.0, &p) - 1.0).abs() < 1e-12);
        assert!((acc_command(18.0, 10.0, 11.0, &p) - 0.3).abs() < 1e-12);
        assert_eq!(acc_command(500.0, 10.0, 10.0, &p), p.u_max);
        assert_eq!(acc_command(0.0, 30.0, 0.0, &p), p.u_min);
    }

    #[test]
    fn cacc_equilibrium_and_step_response() {
        let p = AccParams::cacc();
        let mut f = CaccFilter::at_rest();
        let hd = p.desired_gap(12.0);
        assert_eq!(cacc_command(hd, 12.0, 12.0, Some(0.0), &p, &mut f, 0.1).unwrap(), 0.0);
        let mut f = CaccFilter::at_rest();
        assert!(f.step(1.0, &p, 0.1) > 0.0);
        assert!(matches!(cacc_command(hd, 12.0, 12.0, None, &p, &mut f, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn cacc_filter_converges_to_dc_gain() {
        // Oracle: the continuous response of (τs+1)/(Ts+1) to a step c is
        // c (1 - (1 - τ/T) e^{-t/T}); sampled at t = k dt the ZOH filter is
        // exact, so compare along the way and at the tail.
        let p = AccParams::cacc();
        let c = 0.7;
        let mut f = CaccFilter::at_rest();
        for k in 0..2000 {
            let t = k as f64 * 0.1;
            let expected = c * (1.0 - (1.0 - p.ff_tau / p.ff_t) * (-t / p.ff_t).exp());
            let got = f.step(c, &p, 0.1);
            assert!((got - expected).abs() < 1e-12, "k={k}");
        }
        assert!((f.step(c, &p, 0.1) - c).abs() < 1e-12);
    }

    #[test]
    fn cacc_filter_dc_gain_by_impulse_quadrature() {
        // Independent oracle: the DC gain is the integral of the impulse
        // response τ/T δ(t) + (1 - τ/T)/T e^{-t/T}; Simpson on [0, 40T].
        let p = AccParams::cacc();
        let (t_c, tau) = (p.ff_t, p.ff_tau);
        let n = 20_000;
        let h = 40.0 * t_c / n as f64;
        let g = |t: f64| (1.0 - tau / t_c) / t_c * (-t / t_c).exp();
        let mut s = g(0.0) + g(40.0 * t_c);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
        }
        let dc = tau / t_c + s * h / 3.0;
        let mut f = CaccFilter::at_rest();
        let mut out = 0.0;
        for _ in 0..5000 {
            out = f.step(1.0, &p, 0.1);
        }
        assert!((out - dc).abs() < 1e-9);
    }

    #[test]
    fn mode_selection() {
        let cav = car(0, VehicleKind::Cav, 1, 100.0, 15.0);
        let lead_cav = car(1, VehicleKind::Cav, 1, 135.0, 15.0);
        let lead_hv = car(2, VehicleKind::HumanDriven, 1, 135.0, 15.0);
        let hv = car(3, VehicleKind::HumanDriven, 1, 100.0, 15.0);
        let near = |s| Some(Leader { state: s, gap: 30.0 });
        assert_eq!(select_longitudinal_mode(&cav, near(&lead_cav), 150.0), LongitudinalMode::Cacc);
        assert_eq!(select_longitudinal_mode(&cav, near(&lead_hv), 150.0), LongitudinalMode::Acc);
        assert_eq!(select_longitudinal_mode(&cav, None, 150.0), LongitudinalMode::FreeFlow);
        assert_eq!(
            select_longitudinal_mode(&cav, Some(Leader { state: &lead_cav, gap: 400.0 }), 150.0),
            LongitudinalMode::FreeFlow
        );
        assert_eq!(select_longitudinal_mode(&hv, near(&lead_cav), 150.0), LongitudinalMode::Idm);
        assert_eq!(select_longitudinal_mode(&hv, None, 150.0), LongitudinalMode::Idm);
    }

    #[test]
    fn controller_equilibrium_commands_zero() {
        let cfg = LongitudinalConfig::default();
        // Speeds and gaps chosen so positions are exactly representable.
        let v = 10.0;
        for (kind, hw) in [(VehicleKind::Cav, cfg.cacc.desired_gap(v)), (VehicleKind::HumanDriven, cfg.acc.desired_gap(v))] {
            let mut lead = car(1, kind, 0, 300.0, v);
            lead.desired_speed = 20.0;
            let mut ego = car(0, VehicleKind::Cav, 0, 300.0 - 5.0 - hw, v);
            ego.desired_speed = 20.0;
            let w = world_of(vec![ego, lead]);
            let mut set = ControllerSet::new(cfg.clone(), 2);
            assert_eq!(set.command(&w, 0, 0, 0.1).unwrap(), 0.0);
        }
    }

    #[test]
    fn idm_platoon_settles_without_collisions() {
        let cfg = LongitudinalConfig::default();
        let mut vehicles = Vec::new();
        let mut x = 1000.0;
        for i in 0..10u32 {
            vehicles.push(car(i, VehicleKind::HumanDriven, 0, x, 10.0));
            x -= 5.0 + 15.0 + if i % 2 == 0 { 6.0 } else { -4.0 };
        }
        let mut w = world_of(vehicles);
        w.road.segment_length = 1e6;
        let mut set = ControllerSet::new(cfg, 10);
        let params = BicycleParams::default();
        let mut settled_at = None;
        for step in 0..3000 {
            let mut controls = BTreeMap::new();
            for id in 0..10u32 {
                controls.insert(id, ControlInput::new(set.command(&w, id, 0, 0.1).unwrap(), 0.0));
            }
            w.step(&controls, &params, 0.1).unwrap();
            assert!(w.collisions().is_empty());
            if settled_at.is_none() && w.vehicles.iter().all(|v| v.a.abs() < 0.01) && step > 10 {
                settled_at = Some(step);
            }
        }
        assert!(settled_at.is_some());
        assert!(w.vehicles.iter().all(|v| v.a.abs() < 0.01));
    }

    proptest! {
        #[test]
        fn idm_bounded_and_monotone(v in 0.0f64..30.0, s in 0.5f64..200.0, dv in -10.0f64..10.0, dvv in 0.0f64..5.0, ds in 0.0f64..50.0) {
            let p = IdmParams::default();
            let a = idm_accel(v, s, dv, &p).unwrap();
            prop_assert!(a <= p.a0 && a >= -2.0 * p.b0);
            prop_assert!(idm_accel(v + dvv, s, dv, &p).unwrap() <= a + 1e-12);
            prop_assert!(idm_accel(v, s + ds, dv, &p).unwrap() >= a - 1e-12);
        }

        #[test]
        fn cacc_filter_is_linear(alpha in -5.0f64..5.0, seq in proptest::collection::vec(-3.0f64..3.0, 1..60)) {
            let p = AccParams::cacc();
            let (mut f1, mut f2) = (CaccFilter::at_rest(), CaccFilter::at_rest());
            for &a in &seq {
                let y1 = f1.step(a, &p, 0.1);
                let y2 = f2.step(alpha * a, &p, 0.1);
                prop_assert!((y2 - alpha * y1).abs() < 1e-12);
            }
        }
    }
}
