use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Exponents accepted for the step decay.
pub const ALLOWED_EXPONENTS: [f64; 5] = [0.0, 1.0 / 3.0, 0.4, 0.5, 0.6];

/// `ρ^t = alpha · t^(−a)` for `z, v` and `γ^t = beta · t^(−b)` for `x`, `t ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

impl StepSchedule {
    pub fn constant(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, a: 0.0, b: 0.0 }
    }

    /// Both steps decay as `t^(−1/2)`, keeping `γ^t / ρ^t` fixed.
    pub fn sqrt_decay(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, a: 0.5, b: 0.5 }
    }

    /// `beta = alpha / ratio`.
    pub fn from_ratio(alpha: f64, ratio: f64, a: f64, b: f64) -> Self {
        Self { alpha, beta: alpha / ratio, a, b }
    }

    /// `beta = 0` freezes the outer variable.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        for (name, e) in [("a", self.a), ("b", self.b)] {
            if !ALLOWED_EXPONENTS.iter().any(|&ok| (ok - e).abs() < 1e-12) {
                return Err(invalid(format!("exponent {name} = {e} not in {{0, 1/3, 2/5, 1/2, 3/5}}")));
            }
        }
        Ok(())
    }

    pub fn rho(&self, t: usize) -> f64 {
        decay(self.alpha, self.a, t)
    }

    pub fn gamma(&self, t: usize) -> f64 {
        decay(self.beta, self.b, t)
    }
}

fn decay(scale: f64, exponent: f64, t: usize) -> f64 {
    debug_assert!(t >= 1);
    if exponent == 0.0 {
        scale
    } else {
        scale * (t as f64).powf(-exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_steps_do_not_move() {
        let s = StepSchedule::constant(0.1, 0.02);
        assert!((1..1000).all(|t| s.rho(t) == 0.1 && s.gamma(t) == 0.02));
    }

    #[test]
    fn sqrt_decay_keeps_ratio() {
        let s = StepSchedule::sqrt_decay(0.4, 0.1);
        for t in [1, 4, 100, 12345] {
            assert!((s.rho(t) - 0.4 / (t as f64).sqrt()).abs() < 1e-15);
            assert!((s.gamma(t) / s.rho(t) - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn exponents_are_restricted() {
        assert!(StepSchedule { alpha: 1.0, beta: 1.0, a: 0.4, b: 0.6 }.validate().is_ok());
        assert!(StepSchedule { alpha: 1.0, beta: 1.0, a: 1.0 / 3.0, b: 0.0 }.validate().is_ok());
        assert!(StepSchedule { alpha: 1.0, beta: 1.0, a: 0.7, b: 0.0 }.validate().is_err());
        assert!(StepSchedule::constant(0.0, 1.0).validate().is_err());
        assert!(StepSchedule::constant(1.0, -1.0).validate().is_err());
        assert!(StepSchedule::constant(1.0, 0.0).validate().is_ok());
    }
}
