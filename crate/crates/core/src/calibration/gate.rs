use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Stretched, clamped Hard-Concrete relaxation of a binary mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteGate {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcreteGate {
    fn default() -> Self {
        Self { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl HardConcreteGate {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("gate beta {} outside (0, 1]", self.beta)));
        }
        if !(self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(Error::Config(format!(
                "gate stretch ({}, {}) must satisfy gamma < 0 and zeta > 1",
                self.gamma, self.zeta
            )));
        }
        Ok(())
    }

    fn stretched(&self, log_alpha: f64, u: f64) -> f64 {
        let s = sigmoid((libm::log(u / (1.0 - u)) + log_alpha) / self.beta);
        s * (self.zeta - self.gamma) + self.gamma
    }

    /// Gate value for noise `u` in `(0, 1)`.
    pub fn sample(&self, log_alpha: f64, u: f64) -> Result<f64> {
        check_noise(u)?;
        Ok(self.stretched(log_alpha, u).clamp(0.0, 1.0))
    }

    /// `(gate, d gate / d log_alpha)` for noise `u`. The derivative is zero
    /// where the clamp is active.
    pub fn sample_with_grad(&self, log_alpha: f64, u: f64) -> Result<(f64, f64)> {
        check_noise(u)?;
        let s = sigmoid((libm::log(u / (1.0 - u)) + log_alpha) / self.beta);
        let raw = s * (self.zeta - self.gamma) + self.gamma;
        if raw <= 0.0 {
            Ok((0.0, 0.0))
        } else if raw >= 1.0 {
            Ok((1.0, 0.0))
        } else {
            Ok((raw, (self.zeta - self.gamma) * s * (1.0 - s) / self.beta))
        }
    }

    /// Noise-free gate used once training is over.
    pub fn deterministic(&self, log_alpha: f64) -> f64 {
        (sigmoid(log_alpha) * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    /// `P(gate > 0)`.
    pub fn expected_l0(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.beta * libm::log(-self.gamma / self.zeta))
    }

    pub fn expected_l0_grad(&self, log_alpha: f64) -> f64 {
        let p = self.expected_l0(log_alpha);
        p * (1.0 - p)
    }
}

fn check_noise(u: f64) -> Result<()> {
    if u > 0.0 && u < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gate noise {u} outside (0, 1)")))
    }
}

/// Free-function form of [`HardConcreteGate::sample`].
pub fn hard_concrete_sample(log_alpha: f64, u: f64, beta: f64, gamma: f64, zeta: f64) -> Result<f64> {
    HardConcreteGate { beta, gamma, zeta }.sample(log_alpha, u)
}

/// Free-function form of [`HardConcreteGate::expected_l0`].
pub fn expected_l0(log_alpha: f64, beta: f64, gamma: f64, zeta: f64) -> f64 {
    HardConcreteGate { beta, gamma, zeta }.expected_l0(log_alpha)
}

/// `lambda * sum |x|`.
pub fn l1_penalty(x: &DenseMatrix, lambda: f64) -> f64 {
    lambda * x.as_slice().iter().map(|v| v.abs()).sum::<f64>()
}

/// `lambda * sign(x)`, with 0 at 0.
pub fn l1_subgradient(x: &DenseMatrix, lambda: f64) -> DenseMatrix {
    x.map(|v| if v == 0.0 { 0.0 } else { lambda * v.signum() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_and_saturation() {
        let g = HardConcreteGate { beta: 0.5, ..Default::default() };
        assert!((hard_concrete_sample(0.0, 0.5, 0.5, -0.1, 1.1).unwrap() - 0.5).abs() < 1e-15);
        for u in [0.01, 0.3, 0.99] {
            assert_eq!(g.sample(50.0, u).unwrap(), 1.0);
        }
        assert!(g.sample(0.0, 0.0).is_err());
        assert!(g.sample(0.0, 1.0).is_err());
    }

    #[test]
    fn expected_l0_symmetry_and_saturation() {
        let g = HardConcreteGate::default();
        let mid = g.beta * libm::log(-g.gamma / g.zeta);
        assert!((g.expected_l0(mid) - 0.5).abs() < 1e-15);
        assert!(g.expected_l0(-50.0) < 1e-20);
    }

    #[test]
    fn l1_examples() {
        let x = DenseMatrix::from_rows(&[&[1.0, -2.0], &[0.0, 0.5]]).unwrap();
        assert_eq!(l1_penalty(&x, 1.0), 3.5);
        assert_eq!(l1_penalty(&DenseMatrix::zeros(3, 3), 2.0), 0.0);
        assert_eq!(l1_subgradient(&x, 2.0).as_slice(), &[2.0, -2.0, 0.0, 2.0]);
    }

    #[test]
    fn validation() {
        assert!(HardConcreteGate::default().validate().is_ok());
        assert!(HardConcreteGate { beta: 1.5, ..Default::default() }.validate().is_err());
        assert!(HardConcreteGate { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(HardConcreteGate { zeta: 1.0, ..Default::default() }.validate().is_err());
    }
}
