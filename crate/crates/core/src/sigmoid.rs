//! Piecewise-linear replication of the logistic function by call payoffs
//!
//! The logistic `ς(x) = 1 / (1 + e^{−x})` is replaced by its linear
//! interpolant on a knot grid, written as a constant plus a sum of ramps
//!
//! ```text
//! ς̂(x) = ς(k_1) + Σ_j w_j · max(0, x − k_j)
//! ```
//!
//! Each ramp is a call payoff, so the conditional expectation of `ς̂(X_T + φ)`
//! under an Ornstein–Uhlenbeck law is a weighted sum of call prices. The last
//! weight cancels the final slope, so `ς̂` is flat outside `[k_1, k_N]`.

use crate::error::{ensure_finite, Error, Result};
use crate::ou::{GaussLaw, OuParams};

/// Logistic function `1 / (1 + e^{−x})`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`logistic`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmoidGrid {
    knots: Vec<f64>,
    weights: Vec<f64>,
    base: f64,
    values: Vec<f64>,
}

impl SigmoidGrid {
    /// `n` uniform knots on `[lo, hi]`.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        ensure_finite("lo", lo)?;
        ensure_finite("hi", hi)?;
        if n < 2 {
            return Err(Error::invalid("N", format!("need at least 2 knots, got {n}")));
        }
        if lo >= hi {
            return Err(Error::invalid("lo", format!("lo = {lo} must be below hi = {hi}")));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let mut knots: Vec<f64> = (0..n).map(|j| lo + h * j as f64).collect();
        knots[n - 1] = hi;
        Self::from_knots(knots)
    }

    /// Interpolant of the logistic on arbitrary strictly ascending knots.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid("knots", "need at least 2 knots"));
        }
        for k in &knots {
            ensure_finite("knots", *k)?;
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("knots", "must be strictly ascending"));
        }
        let values: Vec<f64> = knots.iter().map(|&k| logistic(k)).collect();
        let slopes: Vec<f64> = knots
            .windows(2)
            .zip(values.windows(2))
            .map(|(k, v)| (v[1] - v[0]) / (k[1] - k[0]))
            .collect();
        let n = knots.len();
        let mut weights = Vec::with_capacity(n);
        weights.push(slopes[0]);
        weights.extend(slopes.windows(2).map(|s| s[1] - s[0]));
        weights.push(-slopes[n - 2]);
        Ok(SigmoidGrid {
            knots,
            weights,
            base: values[0],
            values,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Value of the interpolant left of the first knot, `ς(k_1)`.
    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Bounds of the interpolant's range, `[ς(k_1), ς(k_N)]`.
    pub fn range(&self) -> (f64, f64) {
        (self.base, self.values[self.values.len() - 1])
    }

    /// `ς̂(x)`.
    ///
    /// Evaluated on the segment containing `x`, which equals the ramp sum
    /// and is exact at the knots.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        if x <= self.knots[0] {
            return self.base;
        }
        if x >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        let j = self.knots.partition_point(|&k| k <= x) - 1;
        let slope = (self.values[j + 1] - self.values[j]) / (self.knots[j + 1] - self.knots[j]);
        self.values[j] + slope * (x - self.knots[j])
    }

    /// `E[ς̂(Y + phi)]` for a Gaussian `Y`, as a sum of call prices.
    pub fn expect_under(&self, law: &GaussLaw, phi: f64) -> f64 {
        self.base
            + self
                .knots
                .iter()
                .zip(&self.weights)
                .map(|(&k, &w)| w * law.call(k - phi))
                .sum::<f64>()
    }

    /// `E[ς̂(X_T + phi) | X_t = x_t]` for the Ornstein–Uhlenbeck process `p`.
    pub fn expected(&self, p: &OuParams, x_t: f64, t: f64, maturity: f64, phi: f64) -> Result<f64> {
        ensure_finite("phi", phi)?;
        let law = p.conditional_law(x_t, t, maturity)?;
        Ok(self.expect_under(&law, phi))
    }

    /// Shift `φ` with `E[ς̂(X_T + φ) | X_0 = p.x0] = target`.
    ///
    /// Bisection on `[−20, 20]`, widened geometrically until the target is
    /// bracketed, then halved down to floating-point resolution.
    pub fn calibrate_phi(&self, p: &OuParams, target: f64, maturity: f64) -> Result<f64> {
        ensure_finite("target", target)?;
        if !(0.0 < target && target < 1.0) {
            return Err(Error::invalid("target", format!("must lie in (0, 1), got {target}")));
        }
        let (lo_val, hi_val) = self.range();
        if target <= lo_val || target >= hi_val {
            return Err(Error::Calibration(format!(
                "target {target} outside attainable range ({lo_val}, {hi_val})"
            )));
        }
        let law = p.conditional_law(p.x0, 0.0, maturity)?;
        let f = |phi: f64| self.expect_under(&law, phi) - target;

        let (mut lo, mut hi) = (-20.0_f64, 20.0_f64);
        let mut widenings = 0;
        while f(lo) > 0.0 || f(hi) < 0.0 {
            lo *= 2.0;
            hi *= 2.0;
            widenings += 1;
            if widenings > 40 {
                return Err(Error::Calibration(format!(
                    "could not bracket target {target} within [{lo}, {hi}]"
                )));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let phi = if f(hi).abs() < f(lo).abs() { hi } else { lo };
        let residual = f(phi).abs();
        if residual > 1e-10 {
            return Err(Error::Calibration(format!(
                "residual {residual:e} above tolerance for target {target}"
            )));
        }
        Ok(phi)
    }
}

impl Default for SigmoidGrid {
    /// 20 uniform knots on `[−5, 5]`.
    fn default() -> Self {
        SigmoidGrid::uniform(20, -5.0, 5.0).expect("static grid parameters are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ou(kappa: f64, sigma: f64) -> OuParams {
        OuParams::new(kappa, sigma, 0.0, 0.0).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SigmoidGrid::uniform(1, -5.0, 5.0).is_err());
        assert!(SigmoidGrid::uniform(5, 5.0, 5.0).is_err());
        assert!(SigmoidGrid::from_knots(vec![0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn two_knot_grid_is_the_chord() {
        let g = SigmoidGrid::uniform(2, -5.0, 5.0).unwrap();
        assert_relative_eq!(g.weights()[0], (logistic(5.0) - logistic(-5.0)) / 10.0);
        assert_relative_eq!(g.eval(0.0), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn exact_at_every_knot() {
        for n in [2, 10, 20, 30, 57] {
            let g = SigmoidGrid::uniform(n, -5.0, 5.0).unwrap();
            for &k in g.knots() {
                assert_eq!(g.eval(k), logistic(k), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn ramp_sum_matches_knot_values() {
        let g = SigmoidGrid::default();
        let (k, w) = (g.knots(), g.weights());
        for j in 0..k.len() {
            let s: f64 = (0..j).map(|m| w[m] * (k[j] - k[m])).sum();
            assert!((g.base() + s - logistic(k[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_outside_the_grid() {
        let g = SigmoidGrid::default();
        assert_eq!(g.eval(-5.0), logistic(-5.0));
        assert_eq!(g.eval(-40.0), logistic(-5.0));
        assert_eq!(g.eval(40.0), logistic(5.0));
        assert!(g.eval(1e6) < 1.0);
    }

    #[test]
    fn symmetric_grid_midpoint() {
        let g = SigmoidGrid::default();
        assert_relative_eq!(g.eval(0.0), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn expectation_collapses_at_maturity() {
        let g = SigmoidGrid::default();
        let p = ou(0.1, 3.0);
        let e = g.expected(&p, 0.4, 48.0, 48.0, 0.3).unwrap();
        assert_relative_eq!(e, g.eval(0.7), max_relative = 1e-15);
    }

    #[test]
    fn symmetric_expectation_is_one_half() {
        let g = SigmoidGrid::default();
        let e = g.expected(&ou(0.1, 3.0), 0.0, 0.0, 48.0, 0.0).unwrap();
        assert!((e - 0.5).abs() < 1e-14);
    }

    #[test]
    fn calibrate_symmetric_target_gives_zero_shift() {
        let g = SigmoidGrid::default();
        let phi = g.calibrate_phi(&ou(0.1, 3.0), 0.5, 48.0).unwrap();
        assert!(phi.abs() < 1e-10);
    }

    #[test]
    fn calibrate_matches_independent_root() {
        // brentq on the same call-sum formula, evaluated in numpy/scipy
        let g = SigmoidGrid::default();
        let p = ou(0.1, 3.0);
        let phi = g.calibrate_phi(&p, 0.6, 48.0).unwrap();
        assert_relative_eq!(phi, 1.777_137_890_566_078, max_relative = 1e-9);
        let phi_yr = g.calibrate_phi(&p, 0.6, 48.0 / 8760.0).unwrap();
        assert_relative_eq!(phi_yr, 0.415_001_840_307_579, max_relative = 1e-9);
    }

    #[test]
    fn calibration_is_monotone() {
        let g = SigmoidGrid::default();
        let p = ou(0.1, 3.0);
        let phis: Vec<f64> = [0.3, 0.5, 0.7]
            .iter()
            .map(|&q| g.calibrate_phi(&p, q, 48.0).unwrap())
            .collect();
        assert!(phis[0] < phis[1] && phis[1] < phis[2]);
    }

    #[test]
    fn unattainable_target_is_a_calibration_failure() {
        let g = SigmoidGrid::default();
        let err = g.calibrate_phi(&ou(0.1, 3.0), 0.999, 48.0).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
        assert!(g.calibrate_phi(&ou(0.1, 3.0), 1.5, 48.0).is_err());
    }

    #[test]
    fn deterministic_calibration_inverts_the_interpolant() {
        let g = SigmoidGrid::default();
        let p = ou(0.1, 0.0);
        let phi = g.calibrate_phi(&p, 0.6, 48.0).unwrap();
        assert!((g.eval(phi) - 0.6).abs() < 1e-10);
    }
}
