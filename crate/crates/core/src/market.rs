//! Coupled infeed / forward-price model
//!
//! Each renewable technology has an efficiency `Q_i(T) = ς̂(X_i(T) + φ_i)`
//! driven by a zero-level Ornstein–Uhlenbeck state `X_i`. The forward price
//! for delivery at `T` is the product of three pieces:
//!
//! ```text
//! f(t,T) = f0 · E[X^P(T) | F_t] / E[X^P(T)] · E[g(Q(T)) | F_{t−}] / E[g(Q(T))]
//! ```
//!
//! with `g(q) = 1 − Σ w_i q_i` and `t−` the last forecast arrival strictly
//! before `t`. The idiosyncratic factor `X^P` reverts to 1 and starts at 1, so
//! its unconditional mean is 1 at every horizon.
//!
//! The trading clock is in hours. Process parameters are quoted per
//! `param_unit_hours` hours (8760 by default, i.e. annualised).

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::ou::{OuParams, OuTransition};
use crate::rng::path_rng;
use crate::sigmoid::SigmoidGrid;

pub const HOURS_PER_YEAR: f64 = 8760.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TechnologyParams {
    pub name: String,
    pub kappa: f64,
    pub sigma: f64,
    pub weight: f64,
    pub initial_forecast: f64,
}

impl Default for TechnologyParams {
    fn default() -> Self {
        TechnologyParams {
            name: "wind".into(),
            kappa: 0.1,
            sigma: 3.0,
            weight: 0.0,
            initial_forecast: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdioParams {
    pub kappa: f64,
    pub sigma: f64,
}

impl Default for IdioParams {
    fn default() -> Self {
        IdioParams {
            kappa: 0.5,
            sigma: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridParams {
    pub knots: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            knots: 20,
            lo: -5.0,
            hi: 5.0,
        }
    }
}

/// Uncalibrated market description, as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketParams {
    pub f0: f64,
    pub horizon_hours: f64,
    pub steps: usize,
    pub param_unit_hours: f64,
    pub forecast_times: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub idio: IdioParams,
    pub technologies: Vec<TechnologyParams>,
    pub sigmoid_grid: GridParams,
}

impl Default for MarketParams {
    fn default() -> Self {
        MarketParams {
            f0: 100.0,
            horizon_hours: 48.0,
            steps: 48,
            param_unit_hours: HOURS_PER_YEAR,
            forecast_times: vec![10.0, 14.0, 18.0, 34.0, 38.0, 42.0],
            correlation: vec![vec![1.0, 0.46], vec![0.46, 1.0]],
            idio: IdioParams::default(),
            technologies: vec![
                TechnologyParams {
                    name: "wind_onshore".into(),
                    weight: 0.91,
                    initial_forecast: 0.5,
                    ..TechnologyParams::default()
                },
                TechnologyParams {
                    name: "wind_offshore".into(),
                    weight: 0.09,
                    initial_forecast: 0.6,
                    ..TechnologyParams::default()
                },
            ],
            sigmoid_grid: GridParams::default(),
        }
    }
}

/// A calibrated renewable technology.
#[derive(Debug, Clone, PartialEq)]
pub struct Technology {
    pub name: String,
    pub ou: OuParams,
    pub phi: f64,
    pub weight: f64,
    pub initial_forecast: f64,
    pub grid: SigmoidGrid,
}

impl Technology {
    /// Solves for `φ` so that the model is unbiased with respect to
    /// `initial_forecast` at `horizon` (in parameter units).
    pub fn calibrate(
        name: impl Into<String>,
        ou: OuParams,
        weight: f64,
        initial_forecast: f64,
        grid: SigmoidGrid,
        horizon: f64,
    ) -> Result<Self> {
        let name = name.into();
        ou.validate()?;
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::invalid("weight", format!("{name}: must lie in [0, 1], got {weight}")));
        }
        if !(initial_forecast > 0.0 && initial_forecast < 1.0) {
            return Err(Error::invalid(
                "initial_forecast",
                format!("{name}: must lie in (0, 1), got {initial_forecast}"),
            ));
        }
        let phi = grid
            .calibrate_phi(&ou, initial_forecast, horizon)
            .map_err(|e| Error::Calibration(format!("technology `{name}`: {e}")))?;
        Ok(Technology {
            name,
            ou,
            phi,
            weight,
            initial_forecast,
            grid,
        })
    }

    /// `Q_i(t, T)` given the state `x` at `t` (times in parameter units).
    pub fn forecast(&self, x: f64, t: f64, horizon: f64) -> Result<f64> {
        self.grid.expected(&self.ou, x, t, horizon, self.phi)
    }

    /// Realised efficiency `ς̂(x + φ)`.
    pub fn efficiency(&self, x: f64) -> f64 {
        self.grid.eval(x + self.phi)
    }

    /// Round-trip residual of the initial-forecast condition.
    pub fn calibration_residual(&self, horizon: f64) -> Result<f64> {
        Ok((self.forecast(self.ou.x0, 0.0, horizon)? - self.initial_forecast).abs())
    }
}

/// Observable market state on the trading grid, as seen by strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketState<'a> {
    /// Hours since inception.
    pub t: f64,
    /// Forward price `f(t, T)`.
    pub fwd: f64,
    /// Published forecasts `Q_i(t−, T)`.
    pub forecasts: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct MarketModel {
    technologies: Vec<Technology>,
    corr: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    idio: OuParams,
    f0: f64,
    forecast_times: Vec<f64>,
    horizon: f64,
    n_steps: usize,
    param_unit_hours: f64,
    structural_mean: f64,
}

/// `1 − Σ_i w_i q_i` (identity supply curve).
pub fn structural_component(weights: &[f64], forecasts: &[f64]) -> Result<f64> {
    if weights.len() != forecasts.len() {
        return Err(Error::invalid(
            "forecasts",
            format!("{} forecasts for {} weights", forecasts.len(), weights.len()),
        ));
    }
    Ok(1.0 - weights.iter().zip(forecasts).map(|(w, q)| w * q).sum::<f64>())
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d < -1e-12 {
            return Err(Error::NotPositiveSemiDefinite { pivot: j, value: d });
        }
        let d = d.max(0.0).sqrt();
        l[j][j] = d;
        for i in (j + 1)..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = if d > 0.0 {
                s / d
            } else if s.abs() <= 1e-12 {
                0.0
            } else {
                return Err(Error::NotPositiveSemiDefinite { pivot: j, value: 0.0 });
            };
        }
    }
    Ok(l)
}

impl MarketModel {
    /// Validates `params` and calibrates every technology shift.
    pub fn new(params: &MarketParams) -> Result<Self> {
        ensure_finite("f0", params.f0)?;
        ensure_finite("horizon_hours", params.horizon_hours)?;
        ensure_finite("param_unit_hours", params.param_unit_hours)?;
        if params.f0 <= 0.0 {
            return Err(Error::invalid("f0", format!("must be > 0, got {}", params.f0)));
        }
        if params.horizon_hours <= 0.0 {
            return Err(Error::invalid("horizon_hours", "must be > 0"));
        }
        if params.param_unit_hours <= 0.0 {
            return Err(Error::invalid("param_unit_hours", "must be > 0"));
        }
        if params.steps == 0 {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        let n = params.technologies.len();
        if n == 0 {
            return Err(Error::invalid("technologies", "need at least one technology"));
        }
        let total_weight: f64 = params.technologies.iter().map(|t| t.weight).sum();
        if total_weight > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "technologies.weight",
                format!("weights sum to {total_weight}, must not exceed 1"),
            ));
        }
        if params.forecast_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("forecast_times", "must be strictly ascending"));
        }
        if let Some(bad) = params
            .forecast_times
            .iter()
            .find(|&&t| !(t > 0.0 && t < params.horizon_hours))
        {
            return Err(Error::invalid(
                "forecast_times",
                format!("{bad} is not strictly inside (0, {})", params.horizon_hours),
            ));
        }
        check_correlation(&params.correlation, n)?;
        let chol = cholesky(&params.correlation)?;

        let horizon_units = params.horizon_hours / params.param_unit_hours;
        let grid = SigmoidGrid::uniform(
            params.sigmoid_grid.knots,
            params.sigmoid_grid.lo,
            params.sigmoid_grid.hi,
        )?;
        let technologies = params
            .technologies
            .iter()
            .map(|tp| {
                let ou = OuParams::new(tp.kappa, tp.sigma, 0.0, 0.0)?;
                Technology::calibrate(
                    tp.name.clone(),
                    ou,
                    tp.weight,
                    tp.initial_forecast,
                    grid.clone(),
                    horizon_units,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let idio = OuParams::new(params.idio.kappa, params.idio.sigma, 1.0, 1.0)?;
        let weights: Vec<f64> = technologies.iter().map(|t| t.weight).collect();
        let initial: Vec<f64> = technologies.iter().map(|t| t.initial_forecast).collect();
        let structural_mean = structural_component(&weights, &initial)?;
        if structural_mean <= 0.0 {
            return Err(Error::invalid("technologies", "structural component has zero mean"));
        }
        Ok(MarketModel {
            technologies,
            corr: params.correlation.clone(),
            chol,
            idio,
            f0: params.f0,
            forecast_times: params.forecast_times.clone(),
            horizon: params.horizon_hours,
            n_steps: params.steps,
            param_unit_hours: params.param_unit_hours,
            structural_mean,
        })
    }

    pub fn technologies(&self) -> &[Technology] {
        &self.technologies
    }

    pub fn correlation(&self) -> &[Vec<f64>] {
        &self.corr
    }

    pub fn idio(&self) -> &OuParams {
        &self.idio
    }

    pub fn f0(&self) -> f64 {
        self.f0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn forecast_times(&self) -> &[f64] {
        &self.forecast_times
    }

    pub fn param_unit_hours(&self) -> f64 {
        self.param_unit_hours
    }

    /// Convert hours on the trading clock to parameter time units.
    pub fn to_units(&self, hours: f64) -> f64 {
        hours / self.param_unit_hours
    }

    pub fn horizon_units(&self) -> f64 {
        self.to_units(self.horizon)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.technologies.iter().map(|t| t.weight).collect()
    }

    pub fn initial_forecasts(&self) -> Vec<f64> {
        self.technologies.iter().map(|t| t.initial_forecast).collect()
    }

    /// `E[g(Q(T))]`, the structural normaliser.
    pub fn structural_mean(&self) -> f64 {
        self.structural_mean
    }

    /// Largest forecast arrival strictly before `t`, or 0 if none.
    pub fn latest_forecast_time(&self, t: f64) -> f64 {
        self.forecast_times
            .iter()
            .copied()
            .filter(|&ti| ti < t)
            .fold(0.0, f64::max)
    }

    /// `E[X^P(T) | X^P(t) = xp] / E[X^P(T)]`.
    pub fn idio_ratio(&self, t: f64, xp: f64) -> f64 {
        let tau = self.to_units(self.horizon - t);
        1.0 + (xp - 1.0) * (-self.idio.kappa * tau).exp()
    }

    /// Published forecasts `Q_i(t_m, T)` from technology states at `t_m`.
    ///
    /// At `t_m = 0` the initial forecasts are returned verbatim.
    pub fn forecasts_at(&self, t_m: f64, states: &[f64]) -> Result<Vec<f64>> {
        if states.len() != self.technologies.len() {
            return Err(Error::invalid("x_t", "one state per technology required"));
        }
        if t_m == 0.0 {
            return Ok(self.initial_forecasts());
        }
        let (t_u, big_t) = (self.to_units(t_m), self.horizon_units());
        self.technologies
            .iter()
            .zip(states)
            .map(|(tech, &x)| tech.forecast(x, t_u, big_t))
            .collect()
    }

    /// Forward price from published forecasts (structural part already
    /// conditioned on `F_{t−}`).
    pub fn forward_from_forecasts(&self, t: f64, xp: f64, forecasts: &[f64]) -> Result<f64> {
        let g = structural_component(&self.weights(), forecasts)?;
        Ok(self.f0 * self.idio_ratio(t, xp) * (g / self.structural_mean))
    }

    /// `f(t, T)` given the idiosyncratic state at `t` and the technology
    /// states frozen at `latest_forecast_time(t)`.
    pub fn forward_price(&self, t: f64, xp_t: f64, frozen_states: &[f64]) -> Result<f64> {
        ensure_finite("t", t)?;
        ensure_finite("xP_t", xp_t)?;
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::invalid("t", format!("must lie in [0, {}], got {t}", self.horizon)));
        }
        for &x in frozen_states {
            ensure_finite("x_t", x)?;
        }
        let t_m = self.latest_forecast_time(t);
        let q = self.forecasts_at(t_m, frozen_states)?;
        self.forward_from_forecasts(t, xp_t, &q)
    }

    /// Trading grid: `n_steps` uniform steps over `[0, T]`, refined to
    /// contain every forecast arrival.
    pub fn trading_times(&self) -> Vec<f64> {
        let dt = self.horizon / self.n_steps as f64;
        let mut times: Vec<f64> = (0..=self.n_steps).map(|k| k as f64 * dt).collect();
        times[self.n_steps] = self.horizon;
        let tol = 1e-9 * self.horizon;
        for &ft in &self.forecast_times {
            match times.iter_mut().find(|s| (**s - ft).abs() < tol) {
                Some(s) => *s = ft,
                None => times.push(ft),
            }
        }
        times.sort_by(|a, b| a.total_cmp(b));
        times
    }

    /// Simulates `n_paths` paths on the trading grid.
    ///
    /// Path `i` draws from the stream `(seed, i)`, so the batch does not
    /// depend on the number of worker threads.
    pub fn simulate(&self, n_paths: usize, seed: u64) -> Result<ScenarioBatch> {
        if n_paths == 0 {
            return Err(Error::invalid("n_paths", "must be >= 1"));
        }
        let times = self.trading_times();
        let n_times = times.len();
        let n_tech = self.technologies.len();

        let mut tech_steps: Vec<Vec<OuTransition>> = Vec::with_capacity(n_times - 1);
        let mut idio_steps = Vec::with_capacity(n_times - 1);
        for w in times.windows(2) {
            let dt = self.to_units(w[1] - w[0]);
            tech_steps.push(
                self.technologies
                    .iter()
                    .map(|tech| tech.ou.transition(dt))
                    .collect::<Result<_>>()?,
            );
            idio_steps.push(self.idio.transition(dt)?);
        }
        // grid index of t− for every grid time, None meaning t− = 0
        let frozen_index: Vec<Option<usize>> = times
            .iter()
            .map(|&t| {
                let tm = self.latest_forecast_time(t);
                (tm > 0.0).then(|| times.iter().position(|&s| s == tm).expect("arrivals lie on the grid"))
            })
            .collect();
        let idio_ratio: Vec<(f64, f64)> = times
            .iter()
            .map(|&t| (t, (-self.idio.kappa * self.to_units(self.horizon - t)).exp()))
            .collect();
        let weights = self.weights();

        let mut fwd = vec![0.0; n_paths * n_times];
        let mut idio = vec![0.0; n_paths * n_times];
        let mut forecasts = vec![0.0; n_paths * n_times * n_tech];
        let mut terminal = vec![0.0; n_paths];

        fwd.par_chunks_mut(n_times)
            .zip(idio.par_chunks_mut(n_times))
            .zip(forecasts.par_chunks_mut(n_times * n_tech))
            .zip(terminal.par_iter_mut())
            .enumerate()
            .try_for_each(|(path, (((fwd, xp_out), fc_out), term))| -> Result<()> {
                let mut rng = path_rng(seed, path as u64);
                let mut x: Vec<f64> = self.technologies.iter().map(|t| t.ou.x0).collect();
                let mut xs = vec![0.0; n_times * n_tech];
                xs[..n_tech].copy_from_slice(&x);
                let mut xp = self.idio.x0;
                let mut z = vec![0.0; n_tech];
                let mut current: Option<usize> = None;
                let mut q = self.initial_forecasts();
                for k in 0..n_times {
                    if k > 0 {
                        for zi in z.iter_mut() {
                            *zi = StandardNormal.sample(&mut rng);
                        }
                        let zp: f64 = StandardNormal.sample(&mut rng);
                        for i in 0..n_tech {
                            let corr_z: f64 = (0..=i).map(|j| self.chol[i][j] * z[j]).sum();
                            x[i] = tech_steps[k - 1][i].step(x[i], corr_z);
                        }
                        xp = idio_steps[k - 1].step(xp, zp);
                        xs[k * n_tech..(k + 1) * n_tech].copy_from_slice(&x);
                    }
                    if frozen_index[k] != current {
                        current = frozen_index[k];
                        q = match current {
                            None => self.initial_forecasts(),
                            Some(m) => self.forecasts_at(times[m], &xs[m * n_tech..(m + 1) * n_tech])?,
                        };
                    }
                    let (_, decay) = idio_ratio[k];
                    let g = 1.0 - weights.iter().zip(&q).map(|(w, qi)| w * qi).sum::<f64>();
                    fwd[k] = self.f0 * (1.0 + (xp - 1.0) * decay) * (g / self.structural_mean);
                    xp_out[k] = xp;
                    fc_out[k * n_tech..(k + 1) * n_tech].copy_from_slice(&q);
                }
                *term = self.technologies[0].efficiency(x[0]);
                Ok(())
            })?;

        Ok(ScenarioBatch {
            n_paths,
            n_tech,
            times,
            fwd,
            idio,
            forecasts,
            terminal_efficiency: terminal,
            seed,
        })
    }
}

fn check_correlation(corr: &[Vec<f64>], n: usize) -> Result<()> {
    if corr.len() != n || corr.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("correlation", format!("must be {n}x{n}")));
    }
    for i in 0..n {
        if (corr[i][i] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("correlation", format!("diagonal entry {i} is {}", corr[i][i])));
        }
        for j in 0..n {
            ensure_finite("correlation", corr[i][j])?;
            if (corr[i][j] - corr[j][i]).abs() > 1e-12 {
                return Err(Error::invalid("correlation", "must be symmetric"));
            }
        }
    }
    Ok(())
}

/// Simulated paths on the trading grid, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBatch {
    n_paths: usize,
    n_tech: usize,
    times: Vec<f64>,
    fwd: Vec<f64>,
    idio: Vec<f64>,
    forecasts: Vec<f64>,
    terminal_efficiency: Vec<f64>,
    seed: u64,
}

impl ScenarioBatch {
    /// Assembles a batch from path-major arrays: `fwd` and `idio` hold
    /// `n_paths × times.len()` values, `forecasts` `n_tech` times as many.
    pub fn from_parts(
        times: Vec<f64>,
        n_tech: usize,
        fwd: Vec<f64>,
        idio: Vec<f64>,
        forecasts: Vec<f64>,
        terminal_efficiency: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n_paths = terminal_efficiency.len();
        let nt = times.len();
        if nt < 2 || n_paths == 0 || n_tech == 0 {
            return Err(Error::invalid("batch", "need two grid times, one path and one technology"));
        }
        if fwd.len() != n_paths * nt || idio.len() != n_paths * nt || forecasts.len() != n_paths * nt * n_tech {
            return Err(Error::invalid("batch", "array lengths do not match the grid"));
        }
        Ok(ScenarioBatch {
            n_paths,
            n_tech,
            times,
            fwd,
            idio,
            forecasts,
            terminal_efficiency,
            seed,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_tech(&self) -> usize {
        self.n_tech
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of trading intervals (grid points minus one).
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self, path: usize, k: usize) -> MarketState<'_> {
        let nt = self.times.len();
        let base = (path * nt + k) * self.n_tech;
        MarketState {
            t: self.times[k],
            fwd: self.fwd[path * nt + k],
            forecasts: &self.forecasts[base..base + self.n_tech],
        }
    }

    /// Forward prices of one path.
    pub fn fwd_path(&self, path: usize) -> &[f64] {
        let nt = self.times.len();
        &self.fwd[path * nt..(path + 1) * nt]
    }

    /// Idiosyncratic states `X^P` of one path.
    pub fn idio_path(&self, path: usize) -> &[f64] {
        let nt = self.times.len();
        &self.idio[path * nt..(path + 1) * nt]
    }

    /// Published forecast of technology `tech` along one path.
    pub fn forecast_path(&self, path: usize, tech: usize) -> impl Iterator<Item = f64> + '_ {
        let nt = self.times.len();
        (0..nt).map(move |k| self.forecasts[(path * nt + k) * self.n_tech + tech])
    }

    pub fn terminal_fwd(&self, path: usize) -> f64 {
        let nt = self.times.len();
        self.fwd[path * nt + nt - 1]
    }

    /// Realised efficiency `Q_1(T, T)` per path.
    pub fn terminal_efficiency(&self) -> &[f64] {
        &self.terminal_efficiency
    }

    /// Restrict to the paths in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ScenarioBatch {
        let nt = self.times.len();
        let m = self.n_tech;
        ScenarioBatch {
            n_paths: range.len(),
            n_tech: m,
            times: self.times.clone(),
            fwd: self.fwd[range.start * nt..range.end * nt].to_vec(),
            idio: self.idio[range.start * nt..range.end * nt].to_vec(),
            forecasts: self.forecasts[range.start * nt * m..range.end * nt * m].to_vec(),
            terminal_efficiency: self.terminal_efficiency[range].to_vec(),
            seed: self.seed,
        }
    }

    /// Writes `path,t,fwd,q1,...` rows, one per path and grid time.
    pub fn write_scenarios<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path,t,fwd")?;
        for i in 1..=self.n_tech {
            write!(w, ",q{i}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for k in 0..self.times.len() {
                let s = self.state(p, k);
                write!(w, "{p},{},{}", fmt17(s.t), fmt17(s.fwd))?;
                for q in s.forecasts {
                    write!(w, ",{}", fmt17(*q))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Writes `path,q1_T,f_T,payoff` rows.
    pub fn write_terminal<W: Write>(&self, payoffs: &[f64], mut w: W) -> std::io::Result<()> {
        writeln!(w, "path,q1_T,f_T,payoff")?;
        for p in 0..self.n_paths {
            writeln!(
                w,
                "{p},{},{},{}",
                fmt17(self.terminal_efficiency[p]),
                fmt17(self.terminal_fwd(p)),
                fmt17(payoffs[p])
            )?;
        }
        Ok(())
    }
}

/// Floating-point value with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// PPA payoff `c · Q_1(T,T) · (f(T,T) − K)` per path.
pub fn terminal_payoff(batch: &ScenarioBatch, capacity: f64, strike: f64) -> Result<Vec<f64>> {
    ensure_finite("c", capacity)?;
    ensure_finite("K", strike)?;
    if capacity < 0.0 {
        return Err(Error::invalid("c", format!("must be >= 0, got {capacity}")));
    }
    Ok((0..batch.n_paths())
        .map(|p| capacity * batch.terminal_efficiency()[p] * (batch.terminal_fwd(p) - strike))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_vol() -> MarketParams {
        let mut p = MarketParams::default();
        p.idio.sigma = 0.0;
        for t in &mut p.technologies {
            t.sigma = 0.0;
        }
        p
    }

    #[test]
    fn latest_forecast_time_is_strict() {
        let m = MarketModel::new(&MarketParams::default()).unwrap();
        assert_eq!(m.latest_forecast_time(5.0), 0.0);
        assert_eq!(m.latest_forecast_time(10.0), 0.0);
        assert_eq!(m.latest_forecast_time(14.0), 10.0);
        assert_eq!(m.latest_forecast_time(14.5), 14.0);
        assert_eq!(m.latest_forecast_time(48.0), 42.0);
    }

    #[test]
    fn structural_component_arithmetic() {
        let g = structural_component(&[0.91, 0.09], &[0.5, 0.6]).unwrap();
        assert!((g - 0.491).abs() < 1e-15);
        assert_eq!(structural_component(&[0.91, 0.09], &[0.0, 0.0]).unwrap(), 1.0);
        let eps = 1e-6;
        assert!((structural_component(&[1.0], &[1.0 - eps]).unwrap() - eps).abs() < 1e-15);
        assert!(structural_component(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn forward_at_inception_is_f0() {
        let m = MarketModel::new(&MarketParams::default()).unwrap();
        assert_eq!(m.forward_price(0.0, 1.0, &[0.0, 0.0]).unwrap(), 100.0);
        assert_eq!(m.forward_price(7.0, 1.0, &[0.0, 0.0]).unwrap(), 100.0);
        assert!(m.forward_price(49.0, 1.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn default_calibration() {
        let m = MarketModel::new(&MarketParams::default()).unwrap();
        let t = m.technologies();
        assert!(t[0].phi.abs() < 1e-10);
        assert!(t[1].phi > 0.0);
        for tech in t {
            assert!(tech.calibration_residual(m.horizon_units()).unwrap() < 1e-10);
        }
    }

    #[test]
    fn rejects_invalid_models() {
        let mut p = MarketParams::default();
        p.technologies[0].weight = 0.95;
        assert!(MarketModel::new(&p).is_err());

        let mut p = MarketParams::default();
        p.correlation = vec![vec![1.0, 1.5], vec![1.5, 1.0]];
        assert!(matches!(MarketModel::new(&p), Err(Error::NotPositiveSemiDefinite { .. })));

        let mut p = MarketParams::default();
        p.forecast_times = vec![10.0, 48.0];
        assert!(MarketModel::new(&p).is_err());
    }

    #[test]
    fn perfectly_correlated_technologies_are_allowed() {
        let mut p = MarketParams::default();
        p.correlation = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let m = MarketModel::new(&p).unwrap();
        m.simulate(4, 1).unwrap();
    }

    #[test]
    fn grid_contains_forecast_arrivals() {
        let mut p = MarketParams::default();
        p.steps = 5;
        let m = MarketModel::new(&p).unwrap();
        let times = m.trading_times();
        for ft in m.forecast_times() {
            assert!(times.contains(ft));
        }
        assert_eq!(times[0], 0.0);
        assert_eq!(*times.last().unwrap(), 48.0);
        assert_eq!(MarketModel::new(&MarketParams::default()).unwrap().trading_times().len(), 49);
    }

    #[test]
    fn zero_volatility_paths_are_constant() {
        let m = MarketModel::new(&zero_vol()).unwrap();
        let b = m.simulate(3, 11).unwrap();
        for p in 0..3 {
            for k in 0..b.times().len() {
                let s = b.state(p, k);
                assert!((s.fwd - 100.0).abs() < 1e-8, "fwd {}", s.fwd);
                assert!((s.forecasts[0] - 0.5).abs() < 1e-10);
                assert!((s.forecasts[1] - 0.6).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn payoff_arithmetic() {
        let m = MarketModel::new(&MarketParams::default()).unwrap();
        let b = m.simulate(8, 3).unwrap();
        let v = terminal_payoff(&b, 1.0, b.terminal_fwd(2)).unwrap();
        assert_eq!(v[2], 0.0);
        let v = terminal_payoff(&b, 2.0, 100.0).unwrap();
        for p in 0..8 {
            let expect = 2.0 * b.terminal_efficiency()[p] * (b.terminal_fwd(p) - 100.0);
            assert_eq!(v[p], expect);
        }
    }

    #[test]
    fn csv_headers() {
        let m = MarketModel::new(&MarketParams::default()).unwrap();
        let b = m.simulate(2, 3).unwrap();
        let mut out = Vec::new();
        b.write_scenarios(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("path,t,fwd,q1,q2\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 49);
        let mut out = Vec::new();
        b.write_terminal(&terminal_payoff(&b, 1.0, 100.0).unwrap(), &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("path,q1_T,f_T,payoff\n"));
    }

    #[test]
    fn fmt17_round_trips() {
        for x in [0.1, 1.0 / 3.0, -123.456e-7, 100.0] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
        }
    }
}
