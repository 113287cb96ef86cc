//! Deep hedging: a feed-forward network maps the observable market state to
//! the volume sold forward, and is trained by ADAM to minimise the empirical
//! Expected Shortfall of the terminal PnL over simulated batches.
//!
//! The loss is the tail mean of the batch PnL itself; its subgradient puts
//! `−1/m` on the `m = ceil(α n)` worst paths. The Rockafellar–Uryasev form
//! (`min_v v + E[(L − v)^+] / α`) has the same optimum for the batch
//! estimator and would add one auxiliary parameter.

pub mod adam;
pub mod mlp;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hedging::{ascending_order, pnl_from_volumes, tail_size, Strategy};
use crate::market::{terminal_payoff, MarketModel, MarketState, ScenarioBatch};
use crate::rng::derive_seed;
use crate::sigmoid::logit;

pub use adam::{AdamParams, AdamState};
pub use mlp::{selu, selu_prime, Mlp};

const INIT_TAG: u64 = 0x1217;
const EPOCH_TAG: u64 = 0x10_0000;

/// PPA payoff `c · Q_1(T,T) · (f(T,T) − K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpaSpec {
    pub capacity: f64,
    pub strike: f64,
}

impl Default for PpaSpec {
    fn default() -> Self {
        PpaSpec {
            capacity: 1.0,
            strike: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train_paths: usize,
    pub lr0: f64,
    pub lr_alpha: f64,
    pub lr_nstep: u64,
    pub es_alpha: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            batch_size: 2000,
            n_train_paths: 100_000,
            lr0: 2e-5,
            lr_alpha: 0.2,
            lr_nstep: 4000,
            es_alpha: 0.05,
            seed: 1,
            hidden: vec![64, 64, 64],
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train_paths {
            return Err(Error::invalid(
                "batch_size",
                format!("must lie in [1, n_train_paths = {}], got {}", self.n_train_paths, self.batch_size),
            ));
        }
        if !(self.es_alpha > 0.0 && self.es_alpha < 1.0) {
            return Err(Error::invalid("es_alpha", format!("must lie in (0, 1), got {}", self.es_alpha)));
        }
        if self.es_alpha * (self.batch_size as f64) < 1.0 - 1e-9 {
            return Err(Error::invalid("es_alpha", "es_alpha · batch_size must be >= 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_alpha >= 0.0) || self.lr_nstep == 0 {
            return Err(Error::invalid("lr0", "learning-rate schedule must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden", "layer widths must be >= 1"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("adam", "need 0 <= beta < 1 and eps > 0"));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend(&self.hidden);
        d.push(1);
        d
    }
}

/// Inverse-time-decay learning rate at optimiser step `n`.
pub fn lr_schedule(cfg: &TrainConfig, n: u64) -> f64 {
    cfg.lr0 / (1.0 + cfg.lr_alpha * (n / cfg.lr_nstep) as f64)
}

/// Empirical ES of a PnL batch and its subgradient with respect to each PnL.
///
/// Ties are broken by path index, so the selected tail is deterministic.
pub fn es_loss(pnl: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if pnl.is_empty() || !(alpha > 0.0 && alpha < 1.0) || alpha * (pnl.len() as f64) < 1.0 - 1e-9 {
        return Err(Error::invalid("alpha", "empty ES tail"));
    }
    let m = tail_size(pnl.len(), alpha);
    let order = ascending_order(pnl);
    let mut grad = vec![0.0; pnl.len()];
    let mut sum = 0.0;
    for &i in &order[..m] {
        sum += pnl[i];
        grad[i] = -1.0 / m as f64;
    }
    Ok((-sum / m as f64, grad))
}

/// Fixed affine/logit feature map for network inputs:
/// `(t / T, fwd / f0 − 1, logit(q_1), …)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub horizon: f64,
    pub f0: f64,
}

impl Normalizer {
    pub fn for_model(model: &MarketModel) -> Self {
        Normalizer {
            horizon: model.horizon(),
            f0: model.f0(),
        }
    }

    pub fn input_dim(n_tech: usize) -> usize {
        2 + n_tech
    }

    pub fn apply(&self, state: &MarketState<'_>, out: &mut [f64]) {
        out[0] = state.t / self.horizon;
        out[1] = state.fwd / self.f0 - 1.0;
        for (o, &q) in out[2..].iter_mut().zip(state.forecasts) {
            *o = logit(q);
        }
    }

    /// Recovers `(t, fwd, forecasts)` from a feature row.
    pub fn invert(&self, features: &[f64]) -> (f64, f64, Vec<f64>) {
        let q = features[2..].iter().map(|&z| crate::sigmoid::logistic(z)).collect();
        (features[0] * self.horizon, (features[1] + 1.0) * self.f0, q)
    }

    /// Feature matrix for paths `paths` and trading dates `t_0 … t_{n−1}`,
    /// path-major.
    pub fn features(&self, batch: &ScenarioBatch, paths: std::ops::Range<usize>) -> Array2<f64> {
        let n = batch.n_steps();
        let d = Self::input_dim(batch.n_tech());
        let mut x = Array2::zeros((paths.len() * n, d));
        for (r, p) in paths.enumerate() {
            for k in 0..n {
                let mut row = x.row_mut(r * n + k);
                self.apply(&batch.state(p, k), row.as_slice_mut().expect("standard layout"));
            }
        }
        x
    }
}

/// A trained network used as a hedging strategy.
#[derive(Debug, Clone)]
pub struct NetworkStrategy {
    pub name: String,
    pub net: Mlp,
    pub normalizer: Normalizer,
}

impl NetworkStrategy {
    pub fn new(name: impl Into<String>, net: Mlp, normalizer: Normalizer) -> Self {
        NetworkStrategy {
            name: name.into(),
            net,
            normalizer,
        }
    }
}

impl Strategy for NetworkStrategy {
    fn name(&self) -> &str {
        &self.name
    }

    fn volume(&self, state: &MarketState<'_>) -> f64 {
        let mut x = vec![0.0; Normalizer::input_dim(state.forecasts.len())];
        self.normalizer.apply(state, &mut x);
        self.net.forward_one(&x)
    }

    fn volumes(&self, batch: &ScenarioBatch) -> Vec<f64> {
        let x = self.normalizer.features(batch, 0..batch.n_paths());
        self.net.forward(x.view()).to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean ES loss over the epoch's mini-batches.
    pub loss: f64,
    /// Learning rate at the end of the epoch.
    pub lr: f64,
}

/// Loss and parameter gradient of the ES objective on one mini-batch.
pub fn batch_loss_and_gradient(
    net: &Mlp,
    normalizer: &Normalizer,
    batch: &ScenarioBatch,
    payoffs: &[f64],
    alpha: f64,
) -> Result<(f64, Mlp)> {
    let n = batch.n_steps();
    let x = normalizer.features(batch, 0..batch.n_paths());
    let q = net.forward(x.view());
    let pnl = pnl_from_volumes(batch, q.as_slice().expect("contiguous"), payoffs)?;
    let (loss, dpnl) = es_loss(&pnl, alpha)?;

    // Only tail paths carry gradient; backpropagate through those rows.
    let tail: Vec<usize> = (0..batch.n_paths()).filter(|&p| dpnl[p] != 0.0).collect();
    let d = x.ncols();
    let mut xt = Array2::zeros((tail.len() * n, d));
    let mut up = Array1::zeros(tail.len() * n);
    for (r, &p) in tail.iter().enumerate() {
        let fwd = batch.fwd_path(p);
        for k in 0..n {
            xt.row_mut(r * n + k).assign(&x.row(p * n + k));
            // PnL = V − Σ q_k Δf_k
            up[r * n + k] = -dpnl[p] * (fwd[k + 1] - fwd[k]);
        }
    }
    Ok((loss, net.gradient(xt.view(), up.view())))
}

/// ES loss of `net` on a batch, without gradients.
pub fn batch_loss(net: &Mlp, normalizer: &Normalizer, batch: &ScenarioBatch, payoffs: &[f64], alpha: f64) -> Result<f64> {
    let x = normalizer.features(batch, 0..batch.n_paths());
    let q = net.forward(x.view());
    let pnl = pnl_from_volumes(batch, q.as_slice().expect("contiguous"), payoffs)?;
    Ok(es_loss(&pnl, alpha)?.0)
}

/// Trains a network strategy minimising `ES_{cfg.es_alpha}` of the hedged
/// PPA. Every epoch simulates a fresh set of `n_train_paths` paths with a
/// seed derived from `cfg.seed`; the run is deterministic given `cfg`.
pub fn train(model: &MarketModel, ppa: PpaSpec, cfg: &TrainConfig) -> Result<(NetworkStrategy, Vec<EpochRecord>)> {
    train_with(model, ppa, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &MarketModel,
    ppa: PpaSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkStrategy, Vec<EpochRecord>)> {
    cfg.validate()?;
    let normalizer = Normalizer::for_model(model);
    let dims = cfg.layer_dims(Normalizer::input_dim(model.technologies().len()));
    let mut net = Mlp::lecun_normal(&dims, derive_seed(cfg.seed, INIT_TAG))?;
    let mut adam = AdamState::new(&net, cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let paths = model.simulate(cfg.n_train_paths, derive_seed(cfg.seed, EPOCH_TAG + epoch as u64))?;
        let mut total = 0.0;
        let mut batches = 0;
        let mut start = 0;
        while start + cfg.batch_size <= paths.n_paths() {
            let mb = paths.slice(start..start + cfg.batch_size);
            start += cfg.batch_size;
            let payoffs = terminal_payoff(&mb, ppa.capacity, ppa.strike)?;
            let (loss, grad) = batch_loss_and_gradient(&net, &normalizer, &mb, &payoffs, cfg.es_alpha)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let lr = lr_schedule(cfg, adam.steps());
            adam.step(&mut net, &grad, lr);
            total += loss;
            batches += 1;
        }
        let loss = total / batches as f64;
        if !loss.is_finite() || !net.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        let record = EpochRecord {
            epoch,
            loss,
            lr: lr_schedule(cfg, adam.steps()),
        };
        log::debug!("epoch {epoch}: loss {loss:.6} lr {:.3e}", record.lr);
        on_epoch(&record);
        history.push(record);
    }
    let name = format!("{}% ES", fmt_pct(cfg.es_alpha));
    Ok((NetworkStrategy::new(name, net, normalizer), history))
}

fn fmt_pct(alpha: f64) -> String {
    let pct = alpha * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

/// `epoch,loss,lr` rows.
pub fn write_history<W: std::io::Write>(history: &[EpochRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,loss,lr")?;
    for r in history {
        writeln!(w, "{},{},{}", r.epoch, crate::market::fmt17(r.loss), crate::market::fmt17(r.lr))?;
    }
    Ok(())
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub max_rel_err: f64,
    /// Probes compared.
    pub checked: usize,
    /// Probes skipped because the perturbation crossed a kink.
    pub skipped: usize,
}

impl GradientReport {
    fn new() -> Self {
        GradientReport {
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric));
    }
}

/// Probe settings for [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub n_paths: usize,
    pub hidden: Vec<usize>,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradientProbe {
    fn default() -> Self {
        GradientProbe {
            n_paths: 16,
            hidden: vec![8, 8, 8],
            step: 1e-4,
            seed: 7,
        }
    }
}

/// Compares the backpropagated gradient of the full pipeline (network →
/// volumes → PnL → ES) with central finite differences on `n_probe`
/// parameters.
///
/// Probes whose perturbation changes the selected ES tail sit on a kink of
/// the loss and are skipped.
pub fn gradient_check(
    model: &MarketModel,
    ppa: PpaSpec,
    cfg: &TrainConfig,
    probe: &GradientProbe,
    n_probe: usize,
) -> Result<GradientReport> {
    let normalizer = Normalizer::for_model(model);
    let mut dims = vec![Normalizer::input_dim(model.technologies().len())];
    dims.extend(&probe.hidden);
    dims.push(1);
    let net = Mlp::lecun_normal(&dims, derive_seed(probe.seed, INIT_TAG))?;
    let batch = model.simulate(probe.n_paths, derive_seed(probe.seed, 99))?;
    let payoffs = terminal_payoff(&batch, ppa.capacity, ppa.strike)?;
    let alpha = cfg.es_alpha.max(1.0 / probe.n_paths as f64);
    let (_, grad) = batch_loss_and_gradient(&net, &normalizer, &batch, &payoffs, alpha)?;

    let tail_of = |net: &Mlp| -> Result<Vec<usize>> {
        let x = normalizer.features(&batch, 0..batch.n_paths());
        let q = net.forward(x.view());
        let pnl = pnl_from_volumes(&batch, q.as_slice().expect("contiguous"), &payoffs)?;
        let m = tail_size(pnl.len(), alpha);
        let mut t = ascending_order(&pnl)[..m].to_vec();
        t.sort_unstable();
        Ok(t)
    };
    let base_tail = tail_of(&net)?;
    let x_all = normalizer.features(&batch, 0..batch.n_paths());
    let base_signs = net.sign_pattern(x_all.view());

    let n_params = net.n_params();
    let stride = (n_params / n_probe.max(1)).max(1);
    let mut report = GradientReport::new();
    for j in 0..n_probe.min(n_params) {
        let idx = (j * stride + (derive_seed(probe.seed, j as u64) as usize % stride)) % n_params;
        let mut plus = net.clone();
        *plus.param_mut(idx) += probe.step;
        let mut minus = net.clone();
        *minus.param_mut(idx) -= probe.step;
        if tail_of(&plus)? != base_tail
            || tail_of(&minus)? != base_tail
            || plus.sign_pattern(x_all.view()) != base_signs
            || minus.sign_pattern(x_all.view()) != base_signs
        {
            report.skipped += 1;
            continue;
        }
        let fd = (batch_loss(&plus, &normalizer, &batch, &payoffs, alpha)?
            - batch_loss(&minus, &normalizer, &batch, &payoffs, alpha)?)
            / (2.0 * probe.step);
        report.record(grad.param(idx), fd);
    }
    Ok(report)
}

/// Finite-difference check of [`Mlp::gradient`] alone on the loss
/// `Σ_r u_r · net(x_r)` with random inputs and weights `u`, probing
/// `n_probe` parameters.
pub fn mlp_gradient_check(dims: &[usize], n_rows: usize, n_probe: usize, step: f64, seed: u64) -> Result<GradientReport> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let net = Mlp::lecun_normal(dims, seed)?;
    let mut rng = crate::rng::path_rng(seed, 0);
    let x = Array2::from_shape_fn((n_rows, dims[0]), |_| rng.sample::<f64, _>(StandardNormal));
    let u = Array1::from_shape_fn(n_rows, |_| rng.sample::<f64, _>(StandardNormal));
    let loss = |net: &Mlp| net.forward(x.view()).dot(&u);
    let grad = net.gradient(x.view(), u.view());
    let signs = net.sign_pattern(x.view());

    let n_params = net.n_params();
    let stride = (n_params / n_probe.max(1)).max(1);
    let mut report = GradientReport::new();
    for j in 0..n_probe.min(n_params) {
        let idx = (j * stride + (derive_seed(seed, j as u64) as usize % stride)) % n_params;
        let mut plus = net.clone();
        *plus.param_mut(idx) += step;
        let mut minus = net.clone();
        *minus.param_mut(idx) -= step;
        if plus.sign_pattern(x.view()) != signs || minus.sign_pattern(x.view()) != signs {
            report.skipped += 1;
            continue;
        }
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
        report.record(grad.param(idx), fd);
    }
    Ok(report)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale.max(1e-8)
    }
}
