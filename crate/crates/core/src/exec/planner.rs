//! Quintic lane-change trajectories and the comfort cost used to pick their
//! duration.

use alloc::vec::Vec;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Kinematic state at the start of a maneuver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanStart {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub heading: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanGoal {
    pub y_f: f64,
    pub v_f: f64,
}

/// Longitudinal and lateral quintics `x(t) = sum a_k t^k`, `y(t) = sum b_k t^k`
/// on `[0, t_f]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPlan {
    pub a_coeffs: [f64; 6],
    pub b_coeffs: [f64; 6],
    pub t_f: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerCostWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for PlannerCostWeights {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0, c3: 0.1 }
    }
}

/// Default maneuver durations in seconds.
pub const DEFAULT_DURATIONS: [f64; 3] = [2.0, 3.0, 4.0];

fn eval(c: &[f64; 6], t: f64, derivative: usize) -> f64 {
    let mut acc = 0.0;
    for k in (derivative..6).rev() {
        let mut factor = 1.0;
        for j in 0..derivative {
            factor *= (k - j) as f64;
        }
        acc = acc * t + factor * c[k];
    }
    acc
}

/// Row of the boundary matrix: the `derivative`-th derivative of the
/// monomial basis at time `t`.
fn basis_row(t: f64, derivative: usize) -> [f64; 6] {
    let mut row = [0.0; 6];
    for (k, r) in row.iter_mut().enumerate().skip(derivative) {
        let mut factor = 1.0;
        for j in 0..derivative {
            factor *= (k - j) as f64;
        }
        *r = factor * math::powf(t, (k - derivative) as f64);
    }
    row
}

fn solve_quintic(conditions: [(f64, usize, f64); 6], t_f: f64) -> Result<[f64; 6]> {
    let mut m = SMatrix::<f64, 6, 6>::zeros();
    let mut rhs = SVector::<f64, 6>::zeros();
    for (i, &(t, d, value)) in conditions.iter().enumerate() {
        let row = basis_row(t, d);
        for k in 0..6 {
            m[(i, k)] = row[k];
        }
        rhs[i] = value;
    }
    let sol = m.lu().solve(&rhs).ok_or(Error::SingularPlan(t_f))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularPlan(t_f));
    }
    let mut out = [0.0; 6];
    out.copy_from_slice(sol.as_slice());
    Ok(out)
}

/// Solves both quintics from their boundary conditions.
///
/// Longitudinal: position, velocity and acceleration at `t = 0`; velocity
/// `v_f` with zero acceleration at `t_f`; and the displacement of a
/// trapezoidal speed profile, `x(t_f) = x0 + t_f (v_x0 + v_f) / 2`.
/// Lateral: position, velocity and acceleration at `t = 0`; `y_f` with zero
/// velocity and acceleration at `t_f`.
pub fn plan_quintic(start: PlanStart, goal: PlanGoal, t_f: f64) -> Result<TrajectoryPlan> {
    if !(t_f > 0.0) || !t_f.is_finite() {
        return Err(Error::SingularPlan(t_f));
    }
    let (sin_h, cos_h) = (math::sin(start.heading), math::cos(start.heading));
    let vx0 = start.v * cos_h;
    let ax0 = start.a * cos_h;
    let vy0 = start.v * sin_h;
    let ay0 = start.a * sin_h;
    let a_coeffs = solve_quintic(
        [
            (0.0, 0, start.x),
            (0.0, 1, vx0),
            (0.0, 2, ax0),
            (t_f, 0, start.x + 0.5 * t_f * (vx0 + goal.v_f)),
            (t_f, 1, goal.v_f),
            (t_f, 2, 0.0),
        ],
        t_f,
    )?;
    let b_coeffs = solve_quintic(
        [
            (0.0, 0, start.y),
            (0.0, 1, vy0),
            (0.0, 2, ay0),
            (t_f, 0, goal.y_f),
            (t_f, 1, 0.0),
            (t_f, 2, 0.0),
        ],
        t_f,
    )?;
    Ok(TrajectoryPlan { a_coeffs, b_coeffs, t_f })
}

impl TrajectoryPlan {
    /// `derivative`-th time derivative of `(x, y)` at `t`. Past `t_f` the
    /// vehicle is extrapolated at its final speed in the final lane.
    pub fn sample(&self, t: f64, derivative: usize) -> (f64, f64) {
        if t <= self.t_f {
            return (eval(&self.a_coeffs, t, derivative), eval(&self.b_coeffs, t, derivative));
        }
        let end_x = eval(&self.a_coeffs, self.t_f, 0);
        let end_v = eval(&self.a_coeffs, self.t_f, 1);
        let end_y = eval(&self.b_coeffs, self.t_f, 0);
        match derivative {
            0 => (end_x + end_v * (t - self.t_f), end_y),
            1 => (end_v, 0.0),
            _ => (0.0, 0.0),
        }
    }

    pub fn position(&self, t: f64) -> (f64, f64) {
        self.sample(t, 0)
    }

    pub fn velocity(&self, t: f64) -> (f64, f64) {
        self.sample(t, 1)
    }

    pub fn acceleration(&self, t: f64) -> (f64, f64) {
        self.sample(t, 2)
    }

    pub fn jerk(&self, t: f64) -> (f64, f64) {
        self.sample(t, 3)
    }

    pub fn final_lateral(&self) -> f64 {
        eval(&self.b_coeffs, self.t_f, 0)
    }
}

const SIMPSON_INTERVALS: usize = 200;

/// Comfort cost `∫ c1 |acc|² + c2 |jerk|² + c3 (y - y_f)² dt` over the plan,
/// by composite Simpson quadrature.
pub fn plan_cost(plan: &TrajectoryPlan, y_f: f64, w: &PlannerCostWeights) -> f64 {
    let integrand = |t: f64| {
        let (ax, ay) = plan.acceleration(t);
        let (jx, jy) = plan.jerk(t);
        let (_, y) = plan.position(t);
        w.c1 * (ax * ax + ay * ay) + w.c2 * (jx * jx + jy * jy) + w.c3 * (y - y_f) * (y - y_f)
    };
    let n = SIMPSON_INTERVALS;
    let h = plan.t_f / n as f64;
    let mut sum = integrand(0.0) + integrand(plan.t_f);
    for i in 1..n {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += weight * integrand(i as f64 * h);
    }
    sum * h / 3.0
}

/// Picks the maneuver duration with the lowest comfort cost; ties go to the
/// shorter duration.
pub fn select_tf(
    start: PlanStart,
    goal: PlanGoal,
    weights: &PlannerCostWeights,
    candidates: &[f64],
) -> Result<f64> {
    let mut sorted: Vec<f64> = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let Some(&first) = sorted.first() else {
        return Err(Error::Config("select_tf needs at least one candidate duration".into()));
    };
    if sorted.len() == 1 {
        return Ok(first);
    }
    let mut best = (f64::INFINITY, first);
    for &t_f in &sorted {
        let plan = plan_quintic(start, goal, t_f)?;
        let cost = plan_cost(&plan, goal.y_f, weights);
        if !best.0.is_finite() || cost < best.0 - 1e-12 * best.0.abs().max(1.0) {
            best = (cost, t_f);
        }
    }
    Ok(best.1)
}
