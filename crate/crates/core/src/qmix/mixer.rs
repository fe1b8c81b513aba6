//! State-conditioned monotone mixing network.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};

pub const MIX_UNITS: usize = 32;

/// Hypernetworks map the global state to the mixer's weights and biases;
/// weights pass through `abs` so the joint value is nondecreasing in every
/// agent value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixer {
    pub agents: usize,
    pub state_dim: usize,
    pub hyper_w1: Linear,
    pub hyper_b1: Linear,
    pub hyper_w2: Linear,
    pub hyper_b2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixCache {
    state: Vec<f64>,
    qm: Vec<f64>,
    mask: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    hidden: Vec<f64>,
    pub q_total: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Mixer {
    pub fn new(agents: usize, state_dim: usize, offset: usize) -> Self {
        let lin = |output, offset| Linear { input: state_dim, output, act: Activation::Identity, offset };
        let hyper_w1 = lin(agents * MIX_UNITS, offset);
        let hyper_b1 = lin(MIX_UNITS, hyper_w1.offset + hyper_w1.param_count());
        let hyper_w2 = lin(MIX_UNITS, hyper_b1.offset + hyper_b1.param_count());
        let hyper_b2 = lin(1, hyper_w2.offset + hyper_w2.param_count());
        Self { agents, state_dim, hyper_w1, hyper_b1, hyper_w2, hyper_b2 }
    }

    pub fn param_count(&self) -> usize {
        self.hyper_b2.offset + self.hyper_b2.param_count() - self.hyper_w1.offset
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in [&self.hyper_w1, &self.hyper_b1, &self.hyper_w2, &self.hyper_b2] {
            l.init(params, rng);
        }
    }

    /// `qs` and `mask` have one slot per agent; masked slots are ignored.
    pub fn forward(&self, params: &[f64], qs: &[f64], mask: &[f64], state: &[f64]) -> Result<MixCache> {
        if qs.len() != self.agents || mask.len() != self.agents {
            return Err(Error::Shape(alloc::format!(
                "mixer built for {} agents, got {} values and {} mask entries",
                self.agents,
                qs.len(),
                mask.len()
            )));
        }
        let w1 = self.hyper_w1.pre_activation(params, state)?;
        let b1 = self.hyper_b1.pre_activation(params, state)?;
        let w2 = self.hyper_w2.pre_activation(params, state)?;
        let b2 = self.hyper_b2.pre_activation(params, state)?[0];
        let qm: Vec<f64> = qs.iter().zip(mask).map(|(q, m)| q * m).collect();
        let mut pre = b1;
        for (i, &q) in qm.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            for e in 0..MIX_UNITS {
                pre[e] += q * w1[i * MIX_UNITS + e].abs();
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| Activation::Elu.apply(z)).collect();
        let q_total = b2 + hidden.iter().zip(&w2).map(|(h, w)| h * w.abs()).sum::<f64>();
        Ok(MixCache { state: state.to_vec(), qm, mask: mask.to_vec(), w1, w2, hidden, q_total })
    }

    /// Accumulates parameter gradients for upstream `dq_total` and returns
    /// the gradient with respect to each agent value.
    pub fn backward(&self, params: &[f64], cache: &MixCache, dq_total: f64, grads: &mut [f64]) -> Result<Vec<f64>> {
        let mut dw2 = vec![0.0; MIX_UNITS];
        let mut dpre = vec![0.0; MIX_UNITS];
        for e in 0..MIX_UNITS {
            dw2[e] = dq_total * cache.hidden[e] * sign(cache.w2[e]);
            dpre[e] = dq_total * cache.w2[e].abs() * Activation::Elu.grad_from_output(cache.hidden[e]);
        }
        let mut dw1 = vec![0.0; self.agents * MIX_UNITS];
        let mut dq = vec![0.0; self.agents];
        for i in 0..self.agents {
            for e in 0..MIX_UNITS {
                let w = cache.w1[i * MIX_UNITS + e];
                dw1[i * MIX_UNITS + e] = dpre[e] * cache.qm[i] * sign(w);
                dq[i] += dpre[e] * w.abs();
            }
            dq[i] *= cache.mask[i];
        }
        self.hyper_w1.backward_pre(params, &cache.state, &dw1, grads)?;
        self.hyper_b1.backward_pre(params, &cache.state, &dpre, grads)?;
        self.hyper_w2.backward_pre(params, &cache.state, &dw2, grads)?;
        self.hyper_b2.backward_pre(params, &cache.state, &[dq_total], grads)?;
        Ok(dq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn only_final_bias_gives_constant() {
        let m = Mixer::new(3, 4, 0);
        let mut params = vec![0.0; m.param_count()];
        let last = params.len() - 1;
        params[last] = 1.7;
        let c = m.forward(&params, &[3.0, -2.0, 9.0], &[1.0; 3], &[0.2, 0.1, 0.0, 1.0]).unwrap();
        assert_eq!(c.q_total, 1.7);
        let mut g = vec![0.0; params.len()];
        assert_eq!(m.backward(&params, &c, 1.0, &mut g).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn monotone_and_mask_invariant() {
        let m = Mixer::new(4, 6, 0);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut params = vec![0.0; m.param_count()];
            m.init(&mut params, &mut r);
            let s = random(6, 1.0, &mut r);
            let q = random(4, 3.0, &mut r);
            let mask: Vec<f64> = (0..4).map(|_| if r.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
            let base = m.forward(&params, &q, &mask, &s).unwrap().q_total;
            for i in 0..4 {
                let mut q2 = q.clone();
                q2[i] += 1e-3;
                let up = m.forward(&params, &q2, &mask, &s).unwrap().q_total;
                if mask[i] == 1.0 {
                    assert!(up - base >= -1e-12);
                } else {
                    q2[i] = 1e6;
                    assert_eq!(m.forward(&params, &q2, &mask, &s).unwrap().q_total, base);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Mixer::new(3, 5, 0);
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let mut params = vec![0.0; m.param_count()];
        m.init(&mut params, &mut r);
        let s = random(5, 1.0, &mut r);
        let q = [0.4, -1.3, 2.0];
        let mask = [1.0, 1.0, 0.0];
        let report = grad_check(&mut params, 1e-3, |p| {
            let c = m.forward(p, &q, &mask, &s).unwrap();
            let mut g = vec![0.0; p.len()];
            m.backward(p, &c, 2.0 * c.q_total, &mut g).unwrap();
            (c.q_total * c.q_total, g)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let mut qv = q.to_vec();
        let report = grad_check(&mut qv, 1e-3, |qq| {
            let c = m.forward(&params, qq, &mask, &s).unwrap();
            let mut g = vec![0.0; params.len()];
            (c.q_total, m.backward(&params, &c, 1.0, &mut g).unwrap())
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
