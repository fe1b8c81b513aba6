//! Per-agent recurrent Q-network.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{one_hot, Activation, Conv2d, Gru, GruCache, Linear};
use crate::observe::{GridConfig, CHANNELS};

use super::ACTIONS;

pub const FC1_UNITS: usize = 128;
pub const GRU_UNITS: usize = 64;
pub const FC2_UNITS: usize = 64;
/// Width of the flat encoder, equal to the flattened conv output at the
/// default grid.
pub const FLAT_ENCODING: usize = 48;
/// Features per CAV in the flat observation.
pub const FLAT_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Conv([Conv2d; 3]),
    /// Fully connected over `FLAT_FEATURES * agents` inputs.
    Flat { layer: Linear, agents: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNet {
    pub encoder: Encoder,
    pub n_max: usize,
    pub fc1: Linear,
    pub gru: Gru,
    pub fc2: Linear,
    pub head: Linear,
}

/// One agent's inputs at a decision tick.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentInput<'a> {
    pub obs: &'a [f64],
    pub last_action: usize,
    pub agent_id: usize,
    pub hidden: &'a [f64],
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentCache {
    obs: Vec<f64>,
    enc: Vec<Vec<f64>>,
    fc1_in: Vec<f64>,
    fc1_out: Vec<f64>,
    h_prev: Vec<f64>,
    gru: GruCache,
    h: Vec<f64>,
    fc2_out: Vec<f64>,
    q: Vec<f64>,
}

impl AgentCache {
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn hidden(&self) -> &[f64] {
        &self.h
    }
}

fn conv(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: (usize, usize), stride: (usize, usize), offset: usize) -> Conv2d {
    Conv2d { in_c, in_h, in_w, out_c, kernel, stride, act: Activation::Relu, offset }
}

impl AgentNet {
    fn with_encoder(encoder: Encoder, enc_out: usize, enc_params: usize, n_max: usize) -> Self {
        let fc1 = Linear { input: enc_out + ACTIONS + n_max, output: FC1_UNITS, act: Activation::Relu, offset: enc_params };
        let gru = Gru { input: FC1_UNITS, hidden: GRU_UNITS, offset: fc1.offset + fc1.param_count() };
        let fc2 = Linear { input: GRU_UNITS, output: FC2_UNITS, act: Activation::Relu, offset: gru.offset + gru.param_count() };
        let head = Linear { input: FC2_UNITS, output: ACTIONS, act: Activation::Identity, offset: fc2.offset + fc2.param_count() };
        Self { encoder, n_max, fc1, gru, fc2, head }
    }

    /// Convolutional encoder over the ego grid: 16 filters 3×3 stride 2,
    /// 32 filters 3×3 stride 2, 16 filters 2×2 stride (1, 2).
    pub fn cnn(grid: &GridConfig, n_max: usize) -> Result<Self> {
        grid.validate()?;
        if n_max == 0 {
            return Err(Error::Config("agent net needs n_max >= 1".into()));
        }
        let c1 = conv(CHANNELS, grid.lanes, grid.cells(), 16, (3, 3), (2, 2), 0);
        let c2 = conv(16, c1.out_h(), c1.out_w(), 32, (3, 3), (2, 2), c1.param_count());
        let c3 = conv(32, c2.out_h(), c2.out_w(), 16, (2, 2), (1, 2), c2.offset + c2.param_count());
        let enc_params = c3.offset + c3.param_count();
        Ok(Self::with_encoder(Encoder::Conv([c1, c2, c3]), c3.out_len(), enc_params, n_max))
    }

    /// Flat-input variant fixed to `agents` CAVs.
    pub fn flat(agents: usize, n_max: usize) -> Result<Self> {
        if agents == 0 || n_max == 0 {
            return Err(Error::Config("flat agent net needs at least one agent".into()));
        }
        let layer = Linear { input: FLAT_FEATURES * agents, output: FLAT_ENCODING, act: Activation::Relu, offset: 0 };
        Ok(Self::with_encoder(Encoder::Flat { layer, agents }, FLAT_ENCODING, layer.param_count(), n_max))
    }

    pub fn obs_len(&self) -> usize {
        match &self.encoder {
            Encoder::Conv(c) => c[0].in_len(),
            Encoder::Flat { layer, .. } => layer.input,
        }
    }

    pub fn param_count(&self) -> usize {
        self.head.offset + self.head.param_count()
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        match &self.encoder {
            Encoder::Conv(c) => c.iter().for_each(|l| l.init(params, rng)),
            Encoder::Flat { layer, .. } => layer.init(params, rng),
        }
        self.fc1.init(params, rng);
        self.gru.init(params, rng);
        self.fc2.init(params, rng);
        self.head.init(params, rng);
    }

    fn check(&self, input: &AgentInput<'_>) -> Result<()> {
        if input.obs.len() != self.obs_len() {
            if let Encoder::Flat { agents, .. } = self.encoder {
                if input.obs.len() % FLAT_FEATURES == 0 {
                    return Err(Error::AgentCountMismatch { expected: agents, found: input.obs.len() / FLAT_FEATURES });
                }
            }
            return Err(Error::Shape(alloc::format!(
                "observation has {} values, network expects {}",
                input.obs.len(),
                self.obs_len()
            )));
        }
        if input.last_action >= ACTIONS || input.agent_id >= self.n_max {
            return Err(Error::Contract(alloc::format!(
                "action {} or agent id {} out of range",
                input.last_action,
                input.agent_id
            )));
        }
        if input.hidden.len() != GRU_UNITS {
            return Err(Error::Shape(alloc::format!("hidden state has {} values", input.hidden.len())));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &AgentInput<'_>) -> Result<AgentCache> {
        self.check(input)?;
        let mut enc = Vec::new();
        let mut x = input.obs.to_vec();
        match &self.encoder {
            Encoder::Conv(c) => {
                for l in c {
                    x = l.forward(params, &x)?;
                    enc.push(x.clone());
                }
            }
            Encoder::Flat { layer, .. } => {
                x = layer.forward(params, &x)?;
                enc.push(x.clone());
            }
        }
        let mut fc1_in = x;
        fc1_in.extend(one_hot(input.last_action, ACTIONS));
        fc1_in.extend(one_hot(input.agent_id, self.n_max));
        let fc1_out = self.fc1.forward(params, &fc1_in)?;
        let (h, gru) = self.gru.forward(params, &fc1_out, input.hidden)?;
        let fc2_out = self.fc2.forward(params, &h)?;
        let q = self.head.forward(params, &fc2_out)?;
        Ok(AgentCache { obs: input.obs.to_vec(), enc, fc1_in, fc1_out, h_prev: input.hidden.to_vec(), gru, h, fc2_out, q })
    }

    /// Q-values and next hidden state.
    pub fn q_values(&self, params: &[f64], input: &AgentInput<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.forward(params, input)?;
        Ok((c.q, c.h))
    }

    /// Accumulates parameter gradients for upstream `dq`. The incoming
    /// hidden state is treated as a constant.
    pub fn backward(&self, params: &[f64], cache: &AgentCache, dq: &[f64], grads: &mut [f64]) -> Result<()> {
        if dq.len() != ACTIONS || grads.len() != params.len() {
            return Err(Error::Shape("agent backward buffers".into()));
        }
        let d = self.head.backward(params, &cache.fc2_out, &cache.q, dq, grads)?;
        let d = self.fc2.backward(params, &cache.h, &cache.fc2_out, &d, grads)?;
        let (d, _) = self.gru.backward(params, &cache.fc1_out, &cache.h_prev, &cache.gru, &d, grads)?;
        let d = self.fc1.backward(params, &cache.fc1_in, &cache.fc1_out, &d, grads)?;
        let enc_len = d.len() - ACTIONS - self.n_max;
        let mut d = d[..enc_len].to_vec();
        match &self.encoder {
            Encoder::Conv(c) => {
                for i in (0..3).rev() {
                    let x = if i == 0 { &cache.obs } else { &cache.enc[i - 1] };
                    d = c[i].backward(params, x, &cache.enc[i], &d, grads)?;
                }
            }
            Encoder::Flat { layer, .. } => {
                layer.backward(params, &cache.obs, &cache.enc[0], &d, grads)?;
            }
        }
        Ok(())
    }

    pub fn zero_hidden() -> Vec<f64> {
        vec![0.0; GRU_UNITS]
    }
}
