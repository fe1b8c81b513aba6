//! Conv2d, Linear and GRU cell over flat parameter buffers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_uniform, Activation, Tensor};
use crate::error::{Error, Result};
use crate::math;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: expected {want} values, got {got}")))
    }
}

/// Zero same-padded strided cross-correlation. Weights are laid out
/// `[out_c][in_c][kh][kw]` followed by `out_c` biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub act: Activation,
    pub offset: usize,
}

impl Conv2d {
    pub fn out_h(&self) -> usize {
        self.in_h.div_ceil(self.stride.0)
    }

    pub fn out_w(&self) -> usize {
        self.in_w.div_ceil(self.stride.1)
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.kernel.0 * self.kernel.1 + self.out_c
    }

    fn pad(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let th = ((self.out_h() - 1) * self.stride.0 + kh).saturating_sub(self.in_h);
        let tw = ((self.out_w() - 1) * self.stride.1 + kw).saturating_sub(self.in_w);
        (th / 2, tw / 2)
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let nw = self.out_c * self.in_c * self.kernel.0 * self.kernel.1;
        let p = &mut params[self.offset..self.offset + self.param_count()];
        init_uniform(&mut p[..nw], self.in_c * self.kernel.0 * self.kernel.1, rng);
        p[nw..].iter_mut().for_each(|b| *b = 0.0);
    }

    /// Calls `f(out_index, weight_index, input_index)` for every tap that
    /// lands inside the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw) = self.kernel;
        let (oh, ow) = (self.out_h(), self.out_w());
        let (pt, pl) = self.pad();
        for oc in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oc * oh + oy) * ow + ox;
                    for ic in 0..self.in_c {
                        for ky in 0..kh {
                            let iy = (oy * self.stride.0 + ky) as isize - pt as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * self.stride.1 + kx) as isize - pl as isize;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                let wi = ((oc * self.in_c + ic) * kh + ky) * kw + kx;
                                let ii = (ic * self.in_h + iy as usize) * self.in_w + ix as usize;
                                f(o, wi, ii);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len("conv2d input", x.len(), self.in_len())?;
        let p = &params[self.offset..self.offset + self.param_count()];
        let nw = self.out_c * self.in_c * self.kernel.0 * self.kernel.1;
        let (w, b) = p.split_at(nw);
        let plane = self.out_h() * self.out_w();
        let mut z: Vec<f64> = (0..self.out_len()).map(|o| b[o / plane]).collect();
        self.for_each_tap(|o, wi, ii| z[o] += w[wi] * x[ii]);
        Ok(z.into_iter().map(|v| self.act.apply(v)).collect())
    }

    /// Forward on a `[c, h, w]` tensor.
    pub fn forward_tensor(&self, params: &[f64], x: &Tensor) -> Result<Tensor> {
        if x.shape != [self.in_c, self.in_h, self.in_w] {
            return Err(Error::Shape(format!(
                "conv2d expects [{}, {}, {}], got {:?}",
                self.in_c, self.in_h, self.in_w, x.shape
            )));
        }
        let y = self.forward(params, &x.data)?;
        Tensor::new(vec![self.out_c, self.out_h(), self.out_w()], y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, params: &[f64], x: &[f64], y: &[f64], dy: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        check_len("conv2d cache", y.len(), self.out_len())?;
        check_len("conv2d upstream", dy.len(), self.out_len())?;
        check_len("conv2d input", x.len(), self.in_len())?;
        let nw = self.out_c * self.in_c * self.kernel.0 * self.kernel.1;
        let w = &params[self.offset..self.offset + nw];
        let dz: Vec<f64> = dy.iter().zip(y).map(|(g, &o)| g * self.act.grad_from_output(o)).collect();
        let mut dx = vec![0.0; self.in_len()];
        let g = &mut grads[self.offset..self.offset + self.param_count()];
        let (gw, gb) = g.split_at_mut(nw);
        let plane = self.out_h() * self.out_w();
        for (o, d) in dz.iter().enumerate() {
            gb[o / plane] += d;
        }
        self.for_each_tap(|o, wi, ii| {
            gw[wi] += dz[o] * x[ii];
            dx[ii] += dz[o] * w[wi];
        });
        Ok(dx)
    }
}

/// `y = act(W x + b)` with `W` stored row-major `[out][in]`, then `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub act: Activation,
    pub offset: usize,
}

impl Linear {
    pub fn param_count(&self) -> usize {
        self.output * (self.input + 1)
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let nw = self.output * self.input;
        let p = &mut params[self.offset..self.offset + self.param_count()];
        init_uniform(&mut p[..nw], self.input, rng);
        p[nw..].iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn pre_activation(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len("linear input", x.len(), self.input)?;
        let nw = self.output * self.input;
        let w = &params[self.offset..self.offset + nw];
        let b = &params[self.offset + nw..self.offset + nw + self.output];
        Ok((0..self.output)
            .map(|o| {
                let row = &w[o * self.input..(o + 1) * self.input];
                b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect())
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pre_activation(params, x)?.into_iter().map(|v| self.act.apply(v)).collect())
    }

    /// Backward from the gradient of the pre-activation.
    pub fn backward_pre(&self, params: &[f64], x: &[f64], dz: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        check_len("linear input", x.len(), self.input)?;
        check_len("linear upstream", dz.len(), self.output)?;
        let nw = self.output * self.input;
        let w = &params[self.offset..self.offset + nw];
        let mut dx = vec![0.0; self.input];
        let g = &mut grads[self.offset..self.offset + self.param_count()];
        let (gw, gb) = g.split_at_mut(nw);
        for (o, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let row = &w[o * self.input..(o + 1) * self.input];
            let grow = &mut gw[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        Ok(dx)
    }

    pub fn backward(&self, params: &[f64], x: &[f64], y: &[f64], dy: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        check_len("linear cache", y.len(), self.output)?;
        check_len("linear upstream", dy.len(), self.output)?;
        let dz: Vec<f64> = dy.iter().zip(y).map(|(g, &o)| g * self.act.grad_from_output(o)).collect();
        self.backward_pre(params, x, &dz, grads)
    }
}

/// Gated recurrent unit with reset, update and candidate blocks (in that
/// order): `W_x [3H][I]`, `W_h [3H][H]`, `b_x [3H]`, `b_h [3H]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    pub offset: usize,
}

/// Intermediate values of one GRU step.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCache {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `W_hn h + b_hn`.
    pub hn: Vec<f64>,
}

impl Gru {
    pub fn param_count(&self) -> usize {
        3 * self.hidden * (self.input + self.hidden + 2)
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let h3 = 3 * self.hidden;
        let wx = self.offset;
        let wh = wx + h3 * self.input;
        let bx = wh + h3 * self.hidden;
        let bh = bx + h3;
        (wx, wh, bx, bh)
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let (wx, wh, bx, bh) = self.offsets();
        init_uniform(&mut params[wx..wh], self.input, rng);
        init_uniform(&mut params[wh..bx], self.hidden, rng);
        params[bx..bh + 3 * self.hidden].iter_mut().for_each(|b| *b = 0.0);
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let cols = x.len();
        (0..rows).map(|o| b[o] + w[o * cols..(o + 1) * cols].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
    }

    pub fn forward(&self, params: &[f64], x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        check_len("gru input", x.len(), self.input)?;
        check_len("gru hidden", h.len(), self.hidden)?;
        let hs = self.hidden;
        let (wx, wh, bx, bh) = self.offsets();
        let gx = Self::affine(&params[wx..wh], &params[bx..bh], x, 3 * hs);
        let gh = Self::affine(&params[wh..bx], &params[bh..bh + 3 * hs], h, 3 * hs);
        let r: Vec<f64> = (0..hs).map(|i| math::sigmoid(gx[i] + gh[i])).collect();
        let z: Vec<f64> = (0..hs).map(|i| math::sigmoid(gx[hs + i] + gh[hs + i])).collect();
        let hn: Vec<f64> = gh[2 * hs..].to_vec();
        let n: Vec<f64> = (0..hs).map(|i| math::tanh(gx[2 * hs + i] + r[i] * hn[i])).collect();
        let h_next = (0..hs).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
        Ok((h_next, GruCache { r, z, n, hn }))
    }

    /// Returns `(dx, dh_prev)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        h: &[f64],
        cache: &GruCache,
        dh_next: &[f64],
        grads: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("gru input", x.len(), self.input)?;
        check_len("gru hidden", h.len(), self.hidden)?;
        check_len("gru upstream", dh_next.len(), self.hidden)?;
        let hs = self.hidden;
        let GruCache { r, z, n, hn } = cache;
        if r.len() != hs {
            return Err(Error::Contract("GRU cache does not match the layer".into()));
        }
        let mut dgx = vec![0.0; 3 * hs];
        let mut dgh = vec![0.0; 3 * hs];
        let mut dh = vec![0.0; hs];
        for i in 0..hs {
            let d = dh_next[i];
            let dn = d * (1.0 - z[i]);
            let dz = d * (h[i] - n[i]);
            dh[i] = d * z[i];
            let dn_pre = dn * (1.0 - n[i] * n[i]);
            let dr = dn_pre * hn[i];
            let dz_pre = dz * z[i] * (1.0 - z[i]);
            let dr_pre = dr * r[i] * (1.0 - r[i]);
            dgx[i] = dr_pre;
            dgx[hs + i] = dz_pre;
            dgx[2 * hs + i] = dn_pre;
            dgh[i] = dr_pre;
            dgh[hs + i] = dz_pre;
            dgh[2 * hs + i] = dn_pre * r[i];
        }
        let (wx, wh, bx, bh) = self.offsets();
        let mut dx = vec![0.0; self.input];
        for o in 0..3 * hs {
            let (ax, ah) = (dgx[o], dgh[o]);
            grads[bx + o] += ax;
            grads[bh + o] += ah;
            for i in 0..self.input {
                grads[wx + o * self.input + i] += ax * x[i];
                dx[i] += ax * params[wx + o * self.input + i];
            }
            for j in 0..hs {
                grads[wh + o * hs + j] += ah * h[j];
                dh[j] += ah * params[wh + o * hs + j];
            }
        }
        Ok((dx, dh))
    }
}
