//! The CLI workflows: calibrate, simulate, train, evaluate, report and
//! selfcheck. Each writes CSV (and weight) files into `output.directory`,
//! every file opening with a `#` metadata line carrying the config hash and
//! seeds, and returns a typed summary for printing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hedging::{
    accumulate_pnl, dynamic_volume_hedge, es_column, no_hedge, pnl_stats, static_volume_hedge, write_stats,
    PnlStats, Strategy,
};
use crate::market::{fmt17, terminal_payoff, MarketModel, ScenarioBatch};
use crate::neural::{
    gradient_check, mlp_gradient_check, train_with, write_history, GradientProbe, GradientReport, Mlp, NetworkStrategy, Normalizer,
};

/// Price levels of the delta-versus-forecast curves.
pub const CURVE_PRICES: [f64; 5] = [60.0, 80.0, 100.0, 120.0, 140.0];
const CURVE_POINTS: usize = 99;
const HISTOGRAM_BINS: usize = 60;

fn create(cfg: &RunConfig, name: &str, extra: &[(&str, String)]) -> Result<(PathBuf, BufWriter<File>)> {
    let dir = &cfg.output.directory;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", cfg.metadata_line(extra)).map_err(|e| Error::io(&path, e))?;
    Ok((path, w))
}

fn finish(path: &Path, w: BufWriter<File>) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .sync_all()
        .map_err(|e| Error::io(path, e))
}

fn write_file(
    cfg: &RunConfig,
    name: &str,
    extra: &[(&str, String)],
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<PathBuf> {
    let (path, mut w) = create(cfg, name, extra)?;
    body(&mut w).map_err(|e| Error::io(&path, e))?;
    finish(&path, w)?;
    Ok(path)
}

fn warn_on_seed_collision(cfg: &RunConfig) {
    if cfg.seeds_collide() {
        log::warn!(
            "train.seed and eval.eval_seed are both {}; evaluation is not independent of training",
            cfg.train.seed
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub technology: String,
    pub initial_forecast: f64,
    pub phi: f64,
    pub residual: f64,
}

/// Solves `φ` per technology and writes `calibration.csv`.
pub fn calibrate(cfg: &RunConfig) -> Result<Vec<CalibrationRow>> {
    let model = MarketModel::new(&cfg.market)?;
    let rows = model
        .technologies()
        .iter()
        .map(|t| {
            Ok(CalibrationRow {
                technology: t.name.clone(),
                initial_forecast: t.initial_forecast,
                phi: t.phi,
                residual: t.calibration_residual(model.horizon_units())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(cfg, "calibration.csv", &[], |w| {
        writeln!(w, "technology,initial_forecast,phi,residual")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.technology, fmt17(r.initial_forecast), fmt17(r.phi), fmt17(r.residual))?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Cross-sectional mean and standard error of the forward and each forecast
/// at one grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleRow {
    pub t: f64,
    pub fwd_mean: f64,
    pub fwd_se: f64,
    pub q_mean: Vec<f64>,
    pub q_se: Vec<f64>,
}

fn mean_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Per-time martingale diagnostics of a batch.
pub fn martingale_diagnostics(batch: &ScenarioBatch) -> Vec<MartingaleRow> {
    let n = batch.n_paths();
    (0..batch.times().len())
        .map(|k| {
            let (fwd_mean, fwd_se) = mean_se((0..n).map(|p| batch.state(p, k).fwd));
            let (q_mean, q_se) = (0..batch.n_tech())
                .map(|i| mean_se((0..n).map(move |p| batch.state(p, k).forecasts[i])))
                .unzip();
            MartingaleRow {
                t: batch.times()[k],
                fwd_mean,
                fwd_se,
                q_mean,
                q_se,
            }
        })
        .collect()
}

/// Gaps at summation round-off count as zero: a series that is constant
/// across paths has a mean and SE that differ from exact only by rounding.
fn z_score(mean: f64, se: f64, target: f64) -> f64 {
    let gap = (mean - target).abs();
    if gap <= 1e-12 * target.abs().max(1.0) {
        0.0
    } else if se > 0.0 {
        gap / se
    } else {
        f64::INFINITY
    }
}

/// Largest |mean − target| / SE over all rows, targets being `f0` for the
/// forward and the initial forecasts.
pub fn martingale_max_z(model: &MarketModel, rows: &[MartingaleRow]) -> f64 {
    let q0 = model.initial_forecasts();
    rows.iter()
        .flat_map(|r| {
            std::iter::once(z_score(r.fwd_mean, r.fwd_se, model.f0()))
                .chain((0..q0.len()).map(|i| z_score(r.q_mean[i], r.q_se[i], q0[i])))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub files: Vec<PathBuf>,
    pub martingale: Vec<MartingaleRow>,
    pub max_z: f64,
}

/// Simulates `n_paths` paths with `seed` and writes `scenarios.csv`,
/// `terminal.csv` and `martingale.csv`.
pub fn simulate(cfg: &RunConfig, n_paths: usize, seed: u64) -> Result<SimulateOutcome> {
    let model = MarketModel::new(&cfg.market)?;
    let batch = model.simulate(n_paths, seed)?;
    let payoffs = terminal_payoff(&batch, cfg.ppa.capacity, cfg.ppa.strike)?;
    let extra = [("sim_seed", seed.to_string()), ("n_paths", n_paths.to_string())];
    let mut files = vec![
        write_file(cfg, "scenarios.csv", &extra, |w| batch.write_scenarios(w))?,
        write_file(cfg, "terminal.csv", &extra, |w| batch.write_terminal(&payoffs, w))?,
    ];
    let martingale = martingale_diagnostics(&batch);
    files.push(write_file(cfg, "martingale.csv", &extra, |w| {
        write!(w, "t,fwd_mean,fwd_se")?;
        for i in 1..=batch.n_tech() {
            write!(w, ",q{i}_mean,q{i}_se")?;
        }
        writeln!(w)?;
        for r in &martingale {
            write!(w, "{},{},{}", fmt17(r.t), fmt17(r.fwd_mean), fmt17(r.fwd_se))?;
            for (m, s) in r.q_mean.iter().zip(&r.q_se) {
                write!(w, ",{},{}", fmt17(*m), fmt17(*s))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?);
    let max_z = martingale_max_z(&model, &martingale);
    Ok(SimulateOutcome {
        files,
        martingale,
        max_z,
    })
}

/// File-name label of a training run, e.g. `es5`.
pub fn strategy_label(cfg: &RunConfig) -> String {
    es_column(cfg.train.es_alpha)
}

pub fn weights_file_name(cfg: &RunConfig) -> String {
    format!("weights_{}.txt", strategy_label(cfg))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PathBuf,
    pub history: PathBuf,
    pub final_loss: f64,
    pub strategy: NetworkStrategy,
    /// Statistics on the held-out evaluation batch.
    pub held_out: PnlStats,
}

/// Trains a network, writes its weights and `history_<label>.csv`, and
/// evaluates it on the held-out batch.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    warn_on_seed_collision(cfg);
    let model = MarketModel::new(&cfg.market)?;
    let total = cfg.train.epochs;
    let (strategy, history) = train_with(&model, cfg.ppa, &cfg.train, |r| {
        if r.epoch % 10 == 0 || r.epoch + 1 == total {
            log::info!("epoch {:>4}/{total}: ES loss {:.6}", r.epoch + 1, r.loss);
        }
    })?;
    let label = strategy_label(cfg);
    let weights = write_file(cfg, &weights_file_name(cfg), &[("strategy", label.clone())], |w| {
        w.write_all(strategy.net.to_text().as_bytes())
    })?;
    let history_path = write_file(cfg, &format!("history_{label}.csv"), &[], |w| write_history(&history, w))?;
    let batch = model.simulate(cfg.eval.n_eval_paths, cfg.eval.eval_seed)?;
    let payoffs = terminal_payoff(&batch, cfg.ppa.capacity, cfg.ppa.strike)?;
    let pnl = accumulate_pnl(&batch, &strategy, &payoffs)?;
    let held_out = pnl_stats(&pnl, &cfg.eval.es_levels)?;
    Ok(TrainOutcome {
        weights,
        history: history_path,
        final_loss: history.last().map_or(f64::NAN, |r| r.loss),
        strategy,
        held_out,
    })
}

/// Loads a weight file as a strategy named after the file stem.
pub fn load_strategy(model: &MarketModel, path: &Path) -> Result<NetworkStrategy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let net = Mlp::from_text(&text).map_err(|e| Error::WeightFormat(format!("{}: {e}", path.display())))?;
    let want = Normalizer::input_dim(model.technologies().len());
    if net.input_dim() != want {
        return Err(Error::WeightFormat(format!(
            "{}: network expects {} inputs, model provides {want}",
            path.display(),
            net.input_dim()
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().trim_start_matches("weights_").to_string())
        .unwrap_or_else(|| "network".into());
    Ok(NetworkStrategy::new(name, net, Normalizer::for_model(model)))
}

/// The three benchmark strategies for `model`.
pub fn benchmarks(model: &MarketModel) -> Vec<Box<dyn Strategy>> {
    vec![
        Box::new(no_hedge()),
        Box::new(static_volume_hedge(model.initial_forecasts()[0])),
        Box::new(dynamic_volume_hedge()),
    ]
}

/// Statistics rows for `strategies` on one shared evaluation batch.
pub fn evaluate_strategies(cfg: &RunConfig, strategies: &[&dyn Strategy]) -> Result<Vec<(String, PnlStats)>> {
    let model = MarketModel::new(&cfg.market)?;
    let batch = model.simulate(cfg.eval.n_eval_paths, cfg.eval.eval_seed)?;
    let payoffs = terminal_payoff(&batch, cfg.ppa.capacity, cfg.ppa.strike)?;
    strategies
        .iter()
        .map(|s| {
            let pnl = accumulate_pnl(&batch, *s, &payoffs)?;
            Ok((s.name().to_string(), pnl_stats(&pnl, &cfg.eval.es_levels)?))
        })
        .collect()
}

/// Evaluates the benchmarks and every weight file on a shared batch and
/// writes `table1.csv`.
pub fn evaluate(cfg: &RunConfig, weight_files: &[PathBuf]) -> Result<Vec<(String, PnlStats)>> {
    warn_on_seed_collision(cfg);
    let model = MarketModel::new(&cfg.market)?;
    let nets = weight_files
        .iter()
        .map(|p| load_strategy(&model, p))
        .collect::<Result<Vec<_>>>()?;
    let bench = benchmarks(&model);
    let all: Vec<&dyn Strategy> = bench
        .iter()
        .map(|b| b.as_ref())
        .chain(nets.iter().map(|n| n as &dyn Strategy))
        .collect();
    let rows = evaluate_strategies(cfg, &all)?;
    write_file(cfg, "table1.csv", &[("n_eval_paths", cfg.eval.n_eval_paths.to_string())], |w| {
        write_stats(&rows, &cfg.eval.es_levels, w)
    })?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub files: Vec<PathBuf>,
    /// `(t, mean network volume, mean volume-hedge volume)` per trading date.
    pub mean_delta: Vec<(f64, f64, f64)>,
}

/// Grid index of the last trading date at or before `t`.
fn grid_index_at(times: &[f64], t: f64) -> usize {
    times[..times.len() - 1]
        .iter()
        .rposition(|&s| s <= t + 1e-9)
        .unwrap_or(0)
}

/// Writes the figure-data files for a trained strategy:
/// `delta_scatter.csv`, `mean_delta.csv`, `delta_curves.csv` and
/// `pnl_histogram.csv`.
pub fn report(cfg: &RunConfig, weights: &Path) -> Result<ReportOutcome> {
    let model = MarketModel::new(&cfg.market)?;
    let net = load_strategy(&model, weights)?;
    report_for(cfg, &model, &net)
}

pub fn report_for(cfg: &RunConfig, model: &MarketModel, net: &NetworkStrategy) -> Result<ReportOutcome> {
    let batch = model.simulate(cfg.eval.n_eval_paths, cfg.eval.eval_seed)?;
    let n = batch.n_steps();
    let deep = net.volumes(&batch);
    let volume_hedge = dynamic_volume_hedge();
    let vol = volume_hedge.volumes(&batch);
    let k_last = grid_index_at(batch.times(), model.horizon() - 1.0);
    let mut files = Vec::new();

    files.push(write_file(cfg, "delta_scatter.csv", &[], |w| {
        write!(w, "path,t,fwd")?;
        for i in 1..=batch.n_tech() {
            write!(w, ",q{i}")?;
        }
        writeln!(w, ",delta_deep,delta_volume")?;
        for p in 0..batch.n_paths() {
            let s = batch.state(p, k_last);
            write!(w, "{p},{},{}", fmt17(s.t), fmt17(s.fwd))?;
            for q in s.forecasts {
                write!(w, ",{}", fmt17(*q))?;
            }
            writeln!(w, ",{},{}", fmt17(deep[p * n + k_last]), fmt17(vol[p * n + k_last]))?;
        }
        Ok(())
    })?);

    let mean_delta: Vec<(f64, f64, f64)> = (0..n)
        .map(|k| {
            let np = batch.n_paths() as f64;
            let d = (0..batch.n_paths()).map(|p| deep[p * n + k]).sum::<f64>() / np;
            let v = (0..batch.n_paths()).map(|p| vol[p * n + k]).sum::<f64>() / np;
            (batch.times()[k], d, v)
        })
        .collect();
    files.push(write_file(cfg, "mean_delta.csv", &[], |w| {
        writeln!(w, "t,mean_delta_deep,mean_delta_volume")?;
        for (t, d, v) in &mean_delta {
            writeln!(w, "{},{},{}", fmt17(*t), fmt17(*d), fmt17(*v))?;
        }
        Ok(())
    })?);

    // Curves over q1 at fixed prices; the other forecasts stay at their
    // initial values.
    let t_curve = batch.times()[k_last];
    let mut forecasts = model.initial_forecasts();
    files.push(write_file(cfg, "delta_curves.csv", &[], |w| {
        writeln!(w, "t,price,q1,delta_deep,delta_volume")?;
        for &price in &CURVE_PRICES {
            for j in 1..=CURVE_POINTS {
                let q1 = j as f64 / (CURVE_POINTS + 1) as f64;
                forecasts[0] = q1;
                let state = crate::market::MarketState {
                    t: t_curve,
                    fwd: price,
                    forecasts: &forecasts,
                };
                let d = net.volume(&state);
                writeln!(w, "{},{},{},{},{}", fmt17(t_curve), fmt17(price), fmt17(q1), fmt17(d), fmt17(q1))?;
            }
        }
        Ok(())
    })?);

    let payoffs = terminal_payoff(&batch, cfg.ppa.capacity, cfg.ppa.strike)?;
    let pnl_vol = accumulate_pnl(&batch, &volume_hedge, &payoffs)?;
    let pnl_deep = accumulate_pnl(&batch, net, &payoffs)?;
    let lo = pnl_vol.iter().chain(&pnl_deep).copied().fold(f64::INFINITY, f64::min);
    let hi = pnl_vol.iter().chain(&pnl_deep).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let bin = |y: f64| (((y - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
    let mut counts = vec![[0usize; 2]; HISTOGRAM_BINS];
    for (&a, &b) in pnl_vol.iter().zip(&pnl_deep) {
        counts[bin(a)][0] += 1;
        counts[bin(b)][1] += 1;
    }
    files.push(write_file(cfg, "pnl_histogram.csv", &[], |w| {
        writeln!(w, "bin_lo,bin_hi,count_volume,count_deep")?;
        for (i, c) in counts.iter().enumerate() {
            let a = lo + i as f64 * width;
            writeln!(w, "{},{},{},{}", fmt17(a), fmt17(a + width), c[0], c[1])?;
        }
        Ok(())
    })?);

    Ok(ReportOutcome { files, mean_delta })
}

/// One line of the selfcheck table.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value < self.threshold
    }
}

/// Thresholds of the selfcheck diagnostics.
pub const STAT_ARB_MEAN_TOL: f64 = 0.02;
pub const STAT_ARB_ES_TOL: f64 = 0.05;
pub const MARTINGALE_Z_TOL: f64 = 4.5;
pub const PIPELINE_GRAD_TOL: f64 = 1e-5;
pub const MLP_GRAD_TOL: f64 = 1e-6;

/// A check that compared nothing fails.
fn compared(r: GradientReport) -> f64 {
    if r.checked == 0 {
        f64::INFINITY
    } else {
        r.max_rel_err
    }
}

/// Statistical-arbitrage run (training with `c = 0`), martingale
/// diagnostics on the evaluation batch and gradient checks. Writes
/// `selfcheck.csv`.
pub fn selfcheck(cfg: &RunConfig) -> Result<Vec<Check>> {
    let model = MarketModel::new(&cfg.market)?;
    let mut empty = cfg.clone();
    empty.ppa.capacity = 0.0;
    empty.eval.es_levels = vec![0.05];
    let (strategy, _) = train_with(&model, empty.ppa, &empty.train, |_| {})?;
    let rows = evaluate_strategies(&empty, &[&strategy])?;
    let stats = &rows[0].1;
    let es5 = stats.es_at(0.05).expect("level requested above");

    let batch = model.simulate(cfg.eval.n_eval_paths, cfg.eval.eval_seed)?;
    let max_z = martingale_max_z(&model, &martingale_diagnostics(&batch));
    let pipeline = gradient_check(&model, cfg.ppa, &cfg.train, &GradientProbe::default(), 40)?;
    let pure = mlp_gradient_check(&[4, 16, 16, 1], 64, 60, 1e-4, 3)?;

    let checks = vec![
        Check {
            name: "stat_arb_abs_mean",
            value: stats.mean.abs(),
            threshold: STAT_ARB_MEAN_TOL,
        },
        Check {
            name: "stat_arb_es5",
            value: es5,
            threshold: STAT_ARB_ES_TOL,
        },
        Check {
            name: "martingale_max_z",
            value: max_z,
            threshold: MARTINGALE_Z_TOL,
        },
        Check {
            name: "pipeline_gradient_rel_err",
            value: compared(pipeline),
            threshold: PIPELINE_GRAD_TOL,
        },
        Check {
            name: "mlp_gradient_rel_err",
            value: compared(pure),
            threshold: MLP_GRAD_TOL,
        },
    ];
    write_file(cfg, "selfcheck.csv", &[], |w| {
        writeln!(w, "check,value,threshold,pass")?;
        for c in &checks {
            writeln!(w, "{},{},{},{}", c.name, fmt17(c.value), fmt17(c.threshold), c.passed())?;
        }
        Ok(())
    })?;
    Ok(checks)
}
