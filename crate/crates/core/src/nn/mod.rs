//! Small fixed-architecture neural networks with hand-derived gradients.
//!
//! Parameters of a network live in one flat `Vec<f64>`; each layer knows
//! its offset into it. Backward passes accumulate into a gradient buffer of
//! the same layout.

pub mod gradcheck;
pub mod layers;
pub mod optim;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Conv2d, Gru, GruCache, Linear};
pub use optim::Adam;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: alloc::vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    /// Exponential linear unit with unit scale.
    Elu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    math::exp(z) - 1.0
                }
            }
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if y > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

/// Fills `w` with draws from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<R: Rng>(w: &mut [f64], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    for v in w {
        *v = rng.gen_range(-bound..bound);
    }
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; len];
    if index < len {
        v[index] = 1.0;
    }
    v
}

pub fn l2_norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::new(alloc::vec![2, 3], alloc::vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(alloc::vec![2, 3], alloc::vec![0.0; 5]), Err(Error::Shape(_))));
        assert_eq!(Tensor::zeros(alloc::vec![3, 3, 20]).len(), 180);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert!((Activation::Elu.apply(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        let y = Activation::Elu.apply(-0.5);
        assert!((Activation::Elu.grad_from_output(y) - (-0.5f64).exp()).abs() < 1e-15);
    }
}
