use ppa_hedge::hedging::{
    accumulate_pnl, dynamic_volume_hedge, empirical_es, empirical_var, exponential_utility_objective,
    indifference_price_risk, no_hedge, pnl_from_volumes, pnl_stats, static_volume_hedge, utility_indifference_price,
    utility_indifference_price_from_samples, write_pnl, write_stats, Strategy,
};
use ppa_hedge::market::terminal_payoff;
use ppa_hedge::{MarketModel, MarketParams, MarketState};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

fn model() -> MarketModel {
    MarketModel::new(&MarketParams::default()).unwrap()
}

#[test]
fn no_hedge_is_identity_on_payoffs() {
    let m = model();
    let batch = m.simulate(300, 4).unwrap();
    let payoffs = terminal_payoff(&batch, 1.0, 100.0).unwrap();
    assert_eq!(accumulate_pnl(&batch, &no_hedge(), &payoffs).unwrap(), payoffs);
}

#[test]
fn constant_volume_telescopes() {
    let m = model();
    let batch = m.simulate(300, 4).unwrap();
    let payoffs = terminal_payoff(&batch, 1.0, 100.0).unwrap();
    let pnl = accumulate_pnl(&batch, &static_volume_hedge(0.5), &payoffs).unwrap();
    for p in 0..batch.n_paths() {
        let expect = payoffs[p] - 0.5 * (batch.terminal_fwd(p) - 100.0);
        assert!((pnl[p] - expect).abs() < 1e-10);
    }
}

#[test]
fn volume_hedge_vanishes_without_volatility() {
    let mut params = MarketParams::default();
    params.idio.sigma = 0.0;
    for t in &mut params.technologies {
        t.sigma = 0.0;
    }
    let m = MarketModel::new(&params).unwrap();
    let batch = m.simulate(50, 1).unwrap();
    let payoffs = terminal_payoff(&batch, 1.0, 100.0).unwrap();
    let pnl = accumulate_pnl(&batch, &dynamic_volume_hedge(), &payoffs).unwrap();
    assert!(pnl.iter().all(|&y| y == 0.0));
}

struct Broken;

impl Strategy for Broken {
    fn name(&self) -> &str {
        "broken"
    }

    fn volume(&self, s: &MarketState<'_>) -> f64 {
        if s.t >= 20.0 {
            f64::NAN
        } else {
            0.0
        }
    }
}

#[test]
fn non_finite_volume_names_path_and_step() {
    let m = model();
    let batch = m.simulate(3, 1).unwrap();
    let payoffs = vec![0.0; 3];
    let err = accumulate_pnl(&batch, &Broken, &payoffs).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("broken") && msg.contains("path 0") && msg.contains("step 20"), "{msg}");
    assert!(err.is_numerical());
}

#[test]
fn volumes_length_checked() {
    let m = model();
    let batch = m.simulate(3, 1).unwrap();
    assert!(pnl_from_volumes(&batch, &[0.0; 5], &[0.0; 3]).is_err());
}

#[test]
fn strategies_share_the_mean() {
    let m = model();
    let batch = m.simulate(20_000, 77).unwrap();
    let payoffs = terminal_payoff(&batch, 1.0, 100.0).unwrap();
    let stats: Vec<_> = [
        &no_hedge() as &dyn Strategy,
        &static_volume_hedge(0.5),
        &dynamic_volume_hedge(),
    ]
    .iter()
    .map(|s| pnl_stats(&accumulate_pnl(&batch, *s, &payoffs).unwrap(), &[0.05]).unwrap())
    .collect();
    for a in &stats {
        for b in &stats {
            let se = (a.mean_se().powi(2) + b.mean_se().powi(2)).sqrt();
            assert!((a.mean - b.mean).abs() <= 3.0 * se);
        }
    }
}

#[test]
fn definition_examples() {
    let y = [-4.0, -3.0, -2.0, -1.0];
    assert_eq!(empirical_es(&y, 0.5).unwrap(), 3.5);
    assert_eq!(empirical_var(&y, 0.5).unwrap(), 3.0);
    let shifted: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
    assert_eq!(empirical_es(&shifted, 0.5).unwrap(), 2.5);
    let scaled: Vec<f64> = y.iter().map(|v| v * 2.0).collect();
    assert_eq!(empirical_es(&scaled, 0.5).unwrap(), 7.0);
    assert!(empirical_es(&[], 0.5).is_err());
    assert!(empirical_es(&y, 0.0).is_err());
}

#[test]
fn constant_sample_statistics() {
    let s = pnl_stats(&[-0.25; 10], &[0.05, 0.3]).unwrap();
    assert_eq!(s.mean, -0.25);
    assert_eq!(s.variance, 0.0);
    assert!(s.degenerate);
    assert_eq!(s.skewness, 0.0);
    assert_eq!(s.table_es(0.05), Some(-0.25));
}

#[test]
fn indifference_prices() {
    assert_eq!(indifference_price_risk(0.0).unwrap(), 0.0);
    assert_eq!(indifference_price_risk(1.18).unwrap(), 1.18);
    assert!(indifference_price_risk(f64::NAN).is_err());

    assert_eq!(exponential_utility_objective(&[0.0; 4], 0.7).unwrap(), 1.0);
    let c = 0.37;
    let got = exponential_utility_objective(&[c; 4], 2.0).unwrap();
    assert!((got - (-2.0 * c).exp()).abs() < 1e-15);
    assert_eq!(utility_indifference_price(1.3, 1.3, 0.5).unwrap(), 0.0);
    // max-shifted evaluation survives exponents beyond f64 range
    let big = utility_indifference_price_from_samples(&[-1000.0, 0.0], &[-999.0, 0.0], 1.0).unwrap();
    assert!((big - 1.0).abs() < 1e-9);
}

#[test]
fn small_risk_aversion_price_is_difference_of_means() {
    // (1/λ) ln(E e^{−λA} / E e^{−λB}) = mean(B) − mean(A) + (λ/2)(var A − var B) + O(λ²)
    let a: Vec<f64> = (0..100).map(|i| ((i * 37 % 100) as f64 / 50.0 - 1.0) * 3.0 - 0.4).collect();
    let b: Vec<f64> = (0..100).map(|i| ((i * 61 % 100) as f64 / 50.0 - 1.0) * 0.5).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    for lambda in [1e-3, 1e-4, 1e-5] {
        let price = utility_indifference_price_from_samples(&a, &b, lambda).unwrap();
        let taylor = mean(&b) - mean(&a) + 0.5 * lambda * (var(&a) - var(&b));
        assert!((price - taylor).abs() < 10.0 * lambda * lambda, "λ={lambda}: {price} vs {taylor}");
    }
}

#[test]
fn csv_writers() {
    let mut out = Vec::new();
    write_pnl(&[1.5, -2.0], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next(), Some("path,pnl"));
    assert_eq!(text.lines().count(), 3);

    let stats = pnl_stats(&[-1.0, 0.0, 1.0, 2.0], &[0.25, 0.5]).unwrap();
    let mut out = Vec::new();
    write_stats(&[("x".into(), stats)], &[0.25, 0.5], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("strategy,mean,variance,skewness,es25,es50"));
    let row: Vec<f64> = lines.next().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 0.5);
    assert_eq!(row[3], -1.0);
    assert_eq!(row[4], -0.5);
}

fn sample() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
    vec(-50.0f64..50.0, 20..200)
}

proptest! {
    #[test]
    fn es_is_cash_invariant(y in sample(), c in -10.0f64..10.0, alpha in 0.01f64..0.99) {
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        let lhs = empirical_es(&shifted, alpha).unwrap();
        let rhs = empirical_es(&y, alpha).unwrap() - c;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs() + c.abs()) * 64.0);
    }

    #[test]
    fn es_is_positively_homogeneous(y in sample(), lambda in 0.0f64..10.0, alpha in 0.01f64..0.99) {
        let scaled: Vec<f64> = y.iter().map(|v| v * lambda).collect();
        let lhs = empirical_es(&scaled, alpha).unwrap();
        let rhs = lambda * empirical_es(&y, alpha).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()) * 64.0);
    }

    #[test]
    fn es_decreases_in_level(y in sample(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(empirical_es(&y, lo).unwrap() >= empirical_es(&y, hi).unwrap() - 1e-12);
        prop_assert!(empirical_es(&y, lo).unwrap() >= empirical_var(&y, lo).unwrap() - 1e-12);
    }

    #[test]
    fn es_is_subadditive(pair in (20usize..200).prop_flat_map(|n| (vec(-50.0f64..50.0, n), vec(-50.0f64..50.0, n))), alpha in 0.01f64..0.99) {
        let (x, y) = pair;
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let lhs = empirical_es(&sum, alpha).unwrap();
        let rhs = empirical_es(&x, alpha).unwrap() + empirical_es(&y, alpha).unwrap();
        prop_assert!(lhs <= rhs + 1e-10);
    }

    #[test]
    fn stats_invariants(y in sample()) {
        let s = pnl_stats(&y, &[0.01, 0.05, 0.3]).unwrap();
        prop_assert!(s.variance >= 0.0);
        prop_assert!(s.table_es(0.01).unwrap() <= s.table_es(0.05).unwrap());
        prop_assert!(s.table_es(0.05).unwrap() <= s.table_es(0.3).unwrap());
        prop_assert!(s.table_es(0.3).unwrap() <= s.mean + 1e-9);
    }
}
