//! One-dimensional Ornstein–Uhlenbeck processes
//!
//! `dX = κ (μ − X) dt + σ dW` with constant level `μ`. The transition law is
//! Gaussian, which gives an exact simulation step and a closed-form price for
//! a call written on `X_T`.
//!
//! All functions here are unit-agnostic: `t`, `T` and `dt` are in whatever
//! time unit `kappa` and `sigma` are quoted in.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{ensure_finite, Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    /// Mean-reversion speed, strictly positive.
    pub kappa: f64,
    /// Volatility, non-negative.
    pub sigma: f64,
    /// Long-run mean.
    pub level: f64,
    /// Initial state.
    pub x0: f64,
}

/// Gaussian law `N(mean, std²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussLaw {
    pub mean: f64,
    pub std: f64,
}

impl GaussLaw {
    /// `E[(Y − strike)^+]` for `Y ~ N(mean, std²)`.
    pub fn call(&self, strike: f64) -> f64 {
        let intrinsic = self.mean - strike;
        if self.std == 0.0 {
            return intrinsic.max(0.0);
        }
        let d = intrinsic / self.std;
        intrinsic * norm_cdf(d) + self.std * norm_pdf(d)
    }
}

/// Precomputed coefficients of the exact transition over a fixed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuTransition {
    level: f64,
    decay: f64,
    std: f64,
}

impl OuTransition {
    #[inline]
    pub fn step(&self, x: f64, z: f64) -> f64 {
        self.level + (x - self.level) * self.decay + self.std * z
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn std(&self) -> f64 {
        self.std
    }
}

impl OuParams {
    pub fn new(kappa: f64, sigma: f64, level: f64, x0: f64) -> Result<Self> {
        let p = OuParams {
            kappa,
            sigma,
            level,
            x0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("kappa", self.kappa)?;
        ensure_finite("sigma", self.sigma)?;
        ensure_finite("level", self.level)?;
        ensure_finite("x0", self.x0)?;
        if self.kappa <= 0.0 {
            return Err(Error::invalid("kappa", format!("must be > 0, got {}", self.kappa)));
        }
        if self.sigma < 0.0 {
            return Err(Error::invalid("sigma", format!("must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// `e^{−κτ}`.
    fn decay(&self, tau: f64) -> f64 {
        (-self.kappa * tau).exp()
    }

    /// Standard deviation of `X_{t+τ}` given `X_t`.
    ///
    /// `1 − e^{−2κτ}` goes through `expm1` so that short horizons keep full
    /// relative precision.
    fn transition_std(&self, tau: f64) -> f64 {
        if self.sigma == 0.0 || tau == 0.0 {
            return 0.0;
        }
        let one_minus = -(-2.0 * self.kappa * tau).exp_m1();
        self.sigma * (one_minus / (2.0 * self.kappa)).sqrt()
    }

    fn horizon(t: f64, maturity: f64) -> Result<f64> {
        ensure_finite("t", t)?;
        ensure_finite("T", maturity)?;
        if t < 0.0 {
            return Err(Error::invalid("t", format!("must be >= 0, got {t}")));
        }
        if t > maturity {
            return Err(Error::invalid("t", format!("t = {t} exceeds T = {maturity}")));
        }
        Ok(maturity - t)
    }

    /// Law of `X_T` conditional on `X_t = x_t`.
    pub fn conditional_law(&self, x_t: f64, t: f64, maturity: f64) -> Result<GaussLaw> {
        ensure_finite("x_t", x_t)?;
        let tau = Self::horizon(t, maturity)?;
        Ok(self.law_over(x_t, tau))
    }

    pub(crate) fn law_over(&self, x: f64, tau: f64) -> GaussLaw {
        if tau == 0.0 {
            return GaussLaw { mean: x, std: 0.0 };
        }
        GaussLaw {
            mean: self.level + (x - self.level) * self.decay(tau),
            std: self.transition_std(tau),
        }
    }

    pub fn transition(&self, dt: f64) -> Result<OuTransition> {
        ensure_finite("dt", dt)?;
        if dt < 0.0 {
            return Err(Error::invalid("dt", format!("must be >= 0, got {dt}")));
        }
        Ok(OuTransition {
            level: self.level,
            decay: self.decay(dt),
            std: self.transition_std(dt),
        })
    }

    /// Exact transition over `dt` driven by the standard normal draw `z`.
    pub fn exact_step(&self, x: f64, dt: f64, z: f64) -> Result<f64> {
        if dt == 0.0 {
            return Ok(x);
        }
        Ok(self.transition(dt)?.step(x, z))
    }

    /// Price of the call `E[(X_T − K)^+ | X_t = x_t]` (zero rates).
    pub fn call_price(&self, x_t: f64, t: f64, maturity: f64, strike: f64) -> Result<f64> {
        ensure_finite("K", strike)?;
        Ok(self.conditional_law(x_t, t, maturity)?.call(strike))
    }
}
