//! Receding-horizon tracking on the linearized lagged bicycle model.
//!
//! The horizon is condensed into a dense QP over the absolute input sequence
//! `U = [u_0, .., u_{N-1}]`, which turns the actuator limits into plain box
//! constraints. The input-increment penalty `Δu_n = u_n - u_{n-1}` enters the
//! Hessian through a block difference operator.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::sim::ControlInput;

pub const STATE_DIM: usize = 5;
pub const INPUT_DIM: usize = 2;
pub const OUTPUT_DIM: usize = 2;

pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;
pub type OutputMatrix = SMatrix<f64, OUTPUT_DIM, STATE_DIM>;

/// Continuous-time model `Ẋ = A X + B u`, `Y = C X` with
/// `X = (x, y, θ, v, a)`, `u = (u_a, u_δ)` and `Y = (x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearModel {
    pub a: StateMatrix,
    pub b: InputMatrix,
    pub c: OutputMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteModel {
    pub a: StateMatrix,
    pub b: InputMatrix,
    pub c: OutputMatrix,
    pub dt: f64,
}

/// Small-angle linearization about straight driving at speed `v0`.
pub fn linearize_bicycle(v0: f64, tau: f64, l_r: f64) -> LinearModel {
    let mut a = StateMatrix::zeros();
    a[(0, 3)] = 1.0;
    a[(1, 2)] = v0;
    a[(3, 4)] = 1.0;
    a[(4, 4)] = -1.0 / tau;
    let mut b = InputMatrix::zeros();
    b[(1, 1)] = 0.5 * v0;
    b[(2, 1)] = v0 / (2.0 * l_r);
    b[(4, 0)] = 1.0 / tau;
    let mut c = OutputMatrix::zeros();
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    LinearModel { a, b, c }
}

impl LinearModel {
    /// Zero-order-hold discretization via the exponential of the augmented
    /// matrix `[[A, B], [0, 0]] dt`.
    pub fn discretize(&self, dt: f64) -> DiscreteModel {
        let mut m = SMatrix::<f64, 7, 7>::zeros();
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                m[(i, j)] = self.a[(i, j)] * dt;
            }
            for j in 0..INPUT_DIM {
                m[(i, STATE_DIM + j)] = self.b[(i, j)] * dt;
            }
        }
        let e = expm(&m);
        let mut a = StateMatrix::zeros();
        let mut b = InputMatrix::zeros();
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                a[(i, j)] = e[(i, j)];
            }
            for j in 0..INPUT_DIM {
                b[(i, j)] = e[(i, STATE_DIM + j)];
            }
        }
        DiscreteModel { a, b, c: self.c, dt }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal of the output weight over `(x, y)`.
    pub q: [f64; 2],
    /// Diagonal of the increment weight over `(u_a, u_δ)`.
    pub r: [f64; 2],
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
    pub dt: f64,
    /// Linearization speed.
    pub v0: f64,
    pub tau: f64,
    pub l_r: f64,
    /// Stop once the projected-gradient (KKT) residual falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: [1.0, 10.0],
            r: [0.1, 10.0],
            u_min: [-4.0, -0.3],
            u_max: [2.0, 0.3],
            dt: 0.1,
            v0: 15.0,
            tau: 0.4,
            l_r: 1.5,
            tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon >= 1
            && self.q.iter().all(|&w| w >= 0.0)
            && self.r.iter().all(|&w| w > 0.0)
            && self.u_min.iter().zip(&self.u_max).all(|(lo, hi)| lo <= hi)
            && self.dt > 0.0
            && self.v0 > 0.0
            && self.tau > 0.0
            && self.l_r > 0.0
            && self.tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::error::Error::Config("invalid MPC configuration".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    /// First input of the optimal sequence (the one to apply).
    pub input: ControlInput,
    pub inputs: Vec<ControlInput>,
    /// Predicted outputs `Y_1 .. Y_N`.
    pub predicted: Vec<(f64, f64)>,
    pub iterations: usize,
    pub residual: f64,
    pub cost: f64,
}

/// Condensed QP data for one configuration; reusable across steps.
#[derive(Clone, Debug)]
pub struct MpcController {
    cfg: MpcConfig,
    model: DiscreteModel,
    /// Free response: `Y = Φ X_0 + Γ U`.
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    /// `2 Γᵀ Q̄`, used for the linear term.
    gamma_t_q: DMatrix<f64>,
    hessian: DMatrix<f64>,
    /// Diagonal preconditioner `U = S z`.
    scale: DVector<f64>,
    scaled_hessian: DMatrix<f64>,
    step: f64,
}

impl MpcController {
    pub fn new(cfg: &MpcConfig) -> Result<Self> {
        cfg.validate()?;
        let model = linearize_bicycle(cfg.v0, cfg.tau, cfg.l_r).discretize(cfg.dt);
        let n = cfg.horizon;
        let nu = INPUT_DIM * n;
        let ny = OUTPUT_DIM * n;

        // Powers C A^k and C A^k B.
        let mut phi = DMatrix::zeros(ny, STATE_DIM);
        let mut markov: Vec<SMatrix<f64, OUTPUT_DIM, INPUT_DIM>> = Vec::with_capacity(n);
        let mut a_pow = StateMatrix::identity();
        for k in 0..n {
            markov.push(model.c * a_pow * model.b);
            a_pow = model.a * a_pow;
            let ca = model.c * a_pow;
            for i in 0..OUTPUT_DIM {
                for j in 0..STATE_DIM {
                    phi[(OUTPUT_DIM * k + i, j)] = ca[(i, j)];
                }
            }
        }
        // Y_{k+1} = C A^{k+1} X_0 + sum_{j<=k} C A^{k-j} B u_j
        let mut gamma = DMatrix::zeros(ny, nu);
        for k in 0..n {
            for j in 0..=k {
                let blk = markov[k - j];
                for r in 0..OUTPUT_DIM {
                    for c in 0..INPUT_DIM {
                        gamma[(OUTPUT_DIM * k + r, INPUT_DIM * j + c)] = blk[(r, c)];
                    }
                }
            }
        }
        let mut gamma_t_q = gamma.transpose();
        for col in 0..ny {
            let w = 2.0 * cfg.q[col % OUTPUT_DIM];
            for row in 0..nu {
                gamma_t_q[(row, col)] *= w;
            }
        }
        let mut hessian = &gamma_t_q * &gamma;
        // 2 Dᵀ R̄ D: D has identity blocks on the diagonal and -I below it.
        for k in 0..n {
            for c in 0..INPUT_DIM {
                let i = INPUT_DIM * k + c;
                let w = 2.0 * cfg.r[c];
                hessian[(i, i)] += if k + 1 < n { 2.0 * w } else { w };
                if k + 1 < n {
                    let j = INPUT_DIM * (k + 1) + c;
                    hessian[(i, j)] -= w;
                    hessian[(j, i)] -= w;
                }
            }
        }
        let scale = DVector::from_iterator(nu, (0..nu).map(|i| 1.0 / math::sqrt(hessian[(i, i)])));
        let mut scaled_hessian = hessian.clone();
        for i in 0..nu {
            for j in 0..nu {
                scaled_hessian[(i, j)] *= scale[i] * scale[j];
            }
        }
        let eig = scaled_hessian.clone().symmetric_eigenvalues();
        let l_max = eig.iter().copied().fold(0.0, f64::max);
        let step = 1.0 / (l_max * (1.0 + 1e-9));
        Ok(Self {
            cfg: cfg.clone(),
            model,
            phi,
            gamma,
            gamma_t_q,
            hessian,
            scale,
            scaled_hessian,
            step,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DiscreteModel {
        &self.model
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn prediction_matrices(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.phi, &self.gamma)
    }

    /// Linear term `f` of `½ Uᵀ H U + fᵀ U`.
    pub fn linear_term(&self, x0: &[f64; 5], reference: &[(f64, f64)], u_prev: ControlInput) -> Result<DVector<f64>> {
        let n = self.cfg.horizon;
        if reference.len() < n {
            return Err(Error::Contract(alloc::format!(
                "reference has {} samples, horizon needs {n}",
                reference.len()
            )));
        }
        let x0v = DVector::from_column_slice(x0);
        let free = &self.phi * x0v;
        let mut err = DVector::zeros(OUTPUT_DIM * n);
        for k in 0..n {
            err[2 * k] = reference[k].0 - free[2 * k];
            err[2 * k + 1] = reference[k].1 - free[2 * k + 1];
        }
        let mut f = -(&self.gamma_t_q * err);
        f[0] -= 2.0 * self.cfg.r[0] * u_prev.u_a;
        f[1] -= 2.0 * self.cfg.r[1] * u_prev.u_delta;
        Ok(f)
    }

    fn objective(&self, u: &DVector<f64>, f: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + f.dot(u)
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let nu = INPUT_DIM * self.cfg.horizon;
        let lo = DVector::from_iterator(nu, (0..nu).map(|i| self.cfg.u_min[i % 2]));
        let hi = DVector::from_iterator(nu, (0..nu).map(|i| self.cfg.u_max[i % 2]));
        (lo, hi)
    }

    /// Solves the QP for the current state and reference.
    pub fn solve(
        &self,
        x0: &[f64; 5],
        reference: &[(f64, f64)],
        u_prev: ControlInput,
        warm_start: Option<&[ControlInput]>,
    ) -> Result<MpcSolution> {
        self.solve_inner(x0, reference, u_prev, warm_start, None)
    }

    /// Like [`solve`](Self::solve) but also records the objective of every
    /// accepted iterate.
    pub fn solve_traced(
        &self,
        x0: &[f64; 5],
        reference: &[(f64, f64)],
        u_prev: ControlInput,
    ) -> Result<(MpcSolution, Vec<f64>)> {
        let mut trace = Vec::new();
        let sol = self.solve_inner(x0, reference, u_prev, None, Some(&mut trace))?;
        Ok((sol, trace))
    }

    fn solve_inner(
        &self,
        x0: &[f64; 5],
        reference: &[(f64, f64)],
        u_prev: ControlInput,
        warm_start: Option<&[ControlInput]>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<MpcSolution> {
        let n = self.cfg.horizon;
        let nu = INPUT_DIM * n;
        let f = self.linear_term(x0, reference, u_prev)?;
        let (lo, hi) = self.bounds();

        // Work in scaled variables z = S⁻¹ U; the box stays a box.
        let zlo = lo.component_div(&self.scale);
        let zhi = hi.component_div(&self.scale);
        let fz = f.component_mul(&self.scale);
        let project = |z: &mut DVector<f64>| {
            for i in 0..nu {
                z[i] = z[i].clamp(zlo[i], zhi[i]);
            }
        };
        let obj = |z: &DVector<f64>| 0.5 * z.dot(&(&self.scaled_hessian * z)) + fz.dot(z);
        let grad = |z: &DVector<f64>| &self.scaled_hessian * z + &fz;
        let residual = |z: &DVector<f64>, g: &DVector<f64>| {
            let mut r: f64 = 0.0;
            for i in 0..nu {
                let p = (z[i] - g[i]).clamp(zlo[i], zhi[i]);
                r = r.max((z[i] - p).abs());
            }
            r
        };

        let mut x = DVector::zeros(nu);
        match warm_start {
            Some(ws) if ws.len() >= n => {
                for k in 0..n {
                    x[2 * k] = ws[k].u_a;
                    x[2 * k + 1] = ws[k].u_delta;
                }
            }
            _ => {
                for k in 0..n {
                    x[2 * k] = u_prev.u_a;
                    x[2 * k + 1] = u_prev.u_delta;
                }
            }
        }
        x = x.component_div(&self.scale);
        project(&mut x);

        // Monotone FISTA with restart. Objective changes are evaluated from
        // the step itself so that acceptance stays exact near the optimum.
        let mut fx = obj(&x);
        let mut gx = grad(&x);
        let mut y = x.clone();
        let mut t: f64 = 1.0;
        let mut iterations = 0;
        let mut res = residual(&x, &gx);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(fx);
        }
        while res >= self.cfg.tolerance {
            if iterations >= self.cfg.max_iterations {
                return Err(Error::SolverNotConverged { iterations, residual: res });
            }
            iterations += 1;
            let gy = grad(&y);
            let mut z = &y - gy * self.step;
            project(&mut z);
            let d = &z - &x;
            let hd = &self.scaled_hessian * &d;
            let delta = d.dot(&(&gx + &hd * 0.5));
            let t_next = 0.5 * (1.0 + math::sqrt(1.0 + 4.0 * t * t));
            if delta <= 0.0 {
                x = z;
                gx = grad(&x);
                fx += delta;
                y = &x + &d * ((t - 1.0) / t_next);
                t = t_next;
            } else {
                // Momentum overshot: restart from the last accepted point.
                y = x.clone();
                t = 1.0;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(fx);
            }
            res = residual(&x, &gx);
        }

        let u = x.component_mul(&self.scale);
        let inputs: Vec<ControlInput> = (0..n).map(|k| ControlInput::new(u[2 * k], u[2 * k + 1])).collect();
        let x0v = DVector::from_column_slice(x0);
        let y_pred = &self.phi * x0v + &self.gamma * &u;
        let predicted = (0..n).map(|k| (y_pred[2 * k], y_pred[2 * k + 1])).collect();
        Ok(MpcSolution {
            input: inputs[0],
            inputs,
            predicted,
            iterations,
            residual: res,
            cost: self.objective(&u, &f),
        })
    }

    /// Outputs predicted when the input is held at `u_prev` over the horizon.
    pub fn hold_prediction(&self, x0: &[f64; 5], u_prev: ControlInput) -> Vec<(f64, f64)> {
        let n = self.cfg.horizon;
        let mut u = DVector::zeros(INPUT_DIM * n);
        for k in 0..n {
            u[2 * k] = u_prev.u_a;
            u[2 * k + 1] = u_prev.u_delta;
        }
        let y = &self.phi * DVector::from_column_slice(x0) + &self.gamma * u;
        (0..n).map(|k| (y[2 * k], y[2 * k + 1])).collect()
    }
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
fn expm<const D: usize>(m: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    let norm = m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = m * scale;
    let mut term = SMatrix::<f64, D, D>::identity();
    let mut sum = term;
    for k in 1..=18 {
        term = term * a / k as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// One-shot solve: builds the condensed problem for `cfg` and returns the
/// first optimal input.
pub fn mpc_step(
    state: &[f64; 5],
    reference: &[(f64, f64)],
    cfg: &MpcConfig,
    u_prev: ControlInput,
) -> Result<MpcSolution> {
    MpcController::new(cfg)?.solve(state, reference, u_prev, None)
}

/// Propagates the discrete model under an input sequence (test helper and
/// diagnostics).
pub fn simulate_discrete(model: &DiscreteModel, x0: &[f64; 5], inputs: &[ControlInput]) -> Vec<[f64; 5]> {
    let mut x = nalgebra::SVector::<f64, 5>::from_column_slice(x0);
    let mut out = vec![];
    for u in inputs {
        let uv = nalgebra::SVector::<f64, 2>::new(u.u_a, u.u_delta);
        x = model.a * x + model.b * uv;
        out.push([x[0], x[1], x[2], x[3], x[4]]);
    }
    out
}
