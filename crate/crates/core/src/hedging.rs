//! Hedging strategies, PnL accumulation and risk statistics
//!
//! Strategies return the volume *sold* forward at each trading date, so the
//! terminal PnL of a PPA with payoff `V(T)` is
//!
//! ```text
//! PnL = V(T) − Σ_k q_k · (f_{k+1} − f_k)
//! ```
//!
//! Expected Shortfall follows the loss convention (`ES > 0` means a loss);
//! [`PnlStats`] additionally reports tail means with the sign of the PnL.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{fmt17, MarketState, ScenarioBatch};

pub trait Strategy: Send + Sync {
    fn name(&self) -> &str;

    /// Volume sold forward in `state`.
    fn volume(&self, state: &MarketState<'_>) -> f64;

    /// Volumes for every path and trading date `t_0 … t_{n−1}`, path-major.
    fn volumes(&self, batch: &ScenarioBatch) -> Vec<f64> {
        let n = batch.n_steps();
        let mut out = vec![0.0; batch.n_paths() * n];
        out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
            for (k, q) in row.iter_mut().enumerate() {
                *q = self.volume(&batch.state(p, k));
            }
        });
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct NoHedge;

impl Strategy for NoHedge {
    fn name(&self) -> &str {
        "No Hedge"
    }

    fn volume(&self, _: &MarketState<'_>) -> f64 {
        0.0
    }
}

/// Sells the initial forecast once and holds it.
#[derive(Debug, Clone)]
pub struct StaticVolumeHedge {
    pub quantity: f64,
}

impl Strategy for StaticVolumeHedge {
    fn name(&self) -> &str {
        "Static Volume Hedge"
    }

    fn volume(&self, _: &MarketState<'_>) -> f64 {
        self.quantity
    }
}

/// Holds the latest published forecast of the first technology.
#[derive(Debug, Clone, Default)]
pub struct DynamicVolumeHedge;

impl Strategy for DynamicVolumeHedge {
    fn name(&self) -> &str {
        "Dynamic Volume Hedge"
    }

    fn volume(&self, state: &MarketState<'_>) -> f64 {
        state.forecasts[0]
    }
}

pub fn no_hedge() -> NoHedge {
    NoHedge
}

pub fn static_volume_hedge(initial_forecast: f64) -> StaticVolumeHedge {
    StaticVolumeHedge {
        quantity: initial_forecast,
    }
}

pub fn dynamic_volume_hedge() -> DynamicVolumeHedge {
    DynamicVolumeHedge
}

/// Terminal PnL per path for precomputed hedge volumes (path-major,
/// `n_steps` per path).
pub fn pnl_from_volumes(batch: &ScenarioBatch, volumes: &[f64], payoffs: &[f64]) -> Result<Vec<f64>> {
    let n = batch.n_steps();
    if volumes.len() != batch.n_paths() * n {
        return Err(Error::invalid("volumes", "one volume per path and trading date required"));
    }
    if payoffs.len() != batch.n_paths() {
        return Err(Error::invalid("payoffs", "one payoff per path required"));
    }
    Ok((0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let fwd = batch.fwd_path(p);
            let q = &volumes[p * n..(p + 1) * n];
            let hedge: f64 = q.iter().zip(fwd.windows(2)).map(|(q, f)| q * (f[1] - f[0])).sum();
            payoffs[p] - hedge
        })
        .collect())
}

/// Terminal PnL per path of `strategy` hedging `payoffs`.
pub fn accumulate_pnl(batch: &ScenarioBatch, strategy: &dyn Strategy, payoffs: &[f64]) -> Result<Vec<f64>> {
    let volumes = strategy.volumes(batch);
    let n = batch.n_steps();
    if let Some(i) = volumes.iter().position(|q| !q.is_finite()) {
        return Err(Error::NonFiniteStrategy {
            strategy: strategy.name().to_string(),
            path: i / n,
            step: i % n,
            value: volumes[i],
        });
    }
    pnl_from_volumes(batch, &volumes, payoffs)
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")))
    }
}

/// Tail size `ceil(α n)`, at least 1. Products within 1e-9 of an integer
/// count as that integer so that e.g. `0.05 · 2000` gives 100.
pub fn tail_size(n: usize, alpha: f64) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    let m = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (m as usize).clamp(1, n)
}

/// Indices sorted ascending by value, ties by index.
pub(crate) fn ascending_order(sample: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sample.len()).collect();
    idx.sort_by(|&a, &b| sample[a].total_cmp(&sample[b]).then(a.cmp(&b)));
    idx
}

fn sorted(sample: &[f64]) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::invalid("sample", "must be nonempty"));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Value-at-Risk: minus the `ceil(α n)`-th smallest outcome.
pub fn empirical_var(sample: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let s = sorted(sample)?;
    Ok(-s[tail_size(s.len(), alpha) - 1])
}

/// Expected Shortfall: mean loss over the worst `ceil(α n)` outcomes.
pub fn empirical_es(sample: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let s = sorted(sample)?;
    let m = tail_size(s.len(), alpha);
    Ok(-s[..m].iter().sum::<f64>() / m as f64)
}

/// One row of the PnL statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct PnlStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Moment skewness; 0 for a constant sample (see `degenerate`).
    pub skewness: f64,
    pub degenerate: bool,
    /// `(α, ES_α)` with ES in the loss convention.
    pub es: Vec<(f64, f64)>,
}

impl PnlStats {
    pub fn es_at(&self, alpha: f64) -> Option<f64> {
        self.es.iter().find(|(a, _)| (*a - alpha).abs() < 1e-12).map(|(_, e)| *e)
    }

    /// Tail mean with the sign of the PnL (`−ES_α`).
    pub fn table_es(&self, alpha: f64) -> Option<f64> {
        self.es_at(alpha).map(|e| -e)
    }

    /// Standard error of the mean.
    pub fn mean_se(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }
}

pub fn pnl_stats(sample: &[f64], es_levels: &[f64]) -> Result<PnlStats> {
    if sample.len() < 2 {
        return Err(Error::invalid("sample", "need at least two outcomes"));
    }
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let m2 = sample.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let m3 = sample.iter().map(|y| (y - mean).powi(3)).sum::<f64>() / n;
    let degenerate = m2.sqrt() <= 4.0 * f64::EPSILON * mean.abs().max(f64::MIN_POSITIVE);
    let skewness = if degenerate { 0.0 } else { m3 / m2.powf(1.5) };
    let s = sorted(sample)?;
    let es = es_levels
        .iter()
        .map(|&a| {
            check_level(a)?;
            let m = tail_size(s.len(), a);
            Ok((a, -s[..m].iter().sum::<f64>() / m as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PnlStats {
        n: sample.len(),
        mean,
        variance: if degenerate { 0.0 } else { m2 * n / (n - 1.0) },
        skewness,
        degenerate,
        es,
    })
}

/// Risk indifference price: the optimal risk of the hedged position, given
/// that hedging an empty position carries zero risk.
pub fn indifference_price_risk(optimal_es: f64) -> Result<f64> {
    if optimal_es.is_finite() {
        Ok(optimal_es)
    } else {
        Err(Error::invalid("optimal_es", "must be finite"))
    }
}

/// `ln E[exp(−λ PnL)]`, evaluated with a max shift.
pub fn log_exponential_utility_objective(sample: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", format!("must be > 0, got {lambda}")));
    }
    if sample.is_empty() {
        return Err(Error::invalid("sample", "must be nonempty"));
    }
    let shift = sample.iter().map(|y| -lambda * y).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = sample.iter().map(|y| (-lambda * y - shift).exp()).sum();
    Ok(shift + (s / sample.len() as f64).ln())
}

/// `E[exp(−λ PnL)]`; minimising it maximises expected exponential utility.
pub fn exponential_utility_objective(sample: &[f64], lambda: f64) -> Result<f64> {
    Ok(log_exponential_utility_objective(sample, lambda)?.exp())
}

/// `(1/λ) ln(with_z / without_z)` from the two optimal objectives.
pub fn utility_indifference_price(with_z: f64, without_z: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !(with_z > 0.0) || !(without_z > 0.0) {
        return Err(Error::invalid("objective", "objectives and lambda must be positive"));
    }
    Ok((with_z.ln() - without_z.ln()) / lambda)
}

/// Utility indifference price from the PnL samples of the optimally hedged
/// positions with and without the derivative.
pub fn utility_indifference_price_from_samples(with_z: &[f64], without_z: &[f64], lambda: f64) -> Result<f64> {
    let a = log_exponential_utility_objective(with_z, lambda)?;
    let b = log_exponential_utility_objective(without_z, lambda)?;
    Ok((a - b) / lambda)
}

/// `path,pnl` rows.
pub fn write_pnl<W: Write>(pnl: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "path,pnl")?;
    for (p, y) in pnl.iter().enumerate() {
        writeln!(w, "{p},{}", fmt17(*y))?;
    }
    Ok(())
}

/// Column label for an ES level, e.g. `es5` for 0.05.
pub fn es_column(alpha: f64) -> String {
    let pct = alpha * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("es{}", pct.round() as i64)
    } else {
        format!("es{pct}")
    }
}

/// `strategy,mean,variance,skewness,es…` rows with table-signed ES.
pub fn write_stats<W: Write>(rows: &[(String, PnlStats)], es_levels: &[f64], mut w: W) -> std::io::Result<()> {
    write!(w, "strategy,mean,variance,skewness")?;
    for a in es_levels {
        write!(w, ",{}", es_column(*a))?;
    }
    writeln!(w)?;
    for (name, s) in rows {
        write!(w, "{name},{},{},{}", fmt17(s.mean), fmt17(s.variance), fmt17(s.skewness))?;
        for a in es_levels {
            write!(w, ",{}", fmt17(s.table_es(*a).unwrap_or(f64::NAN)))?;
        }
        writeln!(w)?;
    }
    Ok(())
}
