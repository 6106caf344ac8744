use std::time::Instant;

use priorsr::constraints::{catalog, DataStats};
use priorsr::datagen::{make_dataset, Split, SplitData, SystemId, SystemSpec};
use priorsr::expr::EvalGuard;
use priorsr::optimizer::{fit_params, fit_with_retries, FitConfig, Objective};
use priorsr::parse;
use proptest::prelude::*;

fn train(id: SystemId) -> (SplitData, DataStats, priorsr::datagen::Dataset) {
    let d = make_dataset(&SystemSpec::default_for(id)).unwrap();
    (d.view(Split::Train), DataStats::from_dataset(&d), d)
}

#[test]
fn osc2_skeleton_recovers_true_coefficients() {
    let start = Instant::now();
    let (t, _, d) = train(SystemId::Osc2);
    let e = parse("p0*sin(t) - p1*v^3 - p2*x*v - p3*x*exp(p4*x)").unwrap();
    let r = fit_params(&e, &t, &FitConfig::default()).unwrap();
    let truth = [0.3, 0.5, 1.0, 5.0, 0.5];
    for (i, want) in truth.iter().enumerate() {
        assert!((r.params[i] - want).abs() <= 1e-2, "p{i} = {} (want {want})", r.params[i]);
    }
    let ood = d.view(Split::OodVal);
    let pred = priorsr::expr::evaluate(&e, &ood.bindings(), &r.params, &EvalGuard::default()).unwrap();
    let nmse = priorsr::scoring::nmse(&pred, &ood.target).unwrap();
    assert!(nmse <= 1e-6, "ood nmse {nmse}");
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn crk_skeleton_recovers_true_coefficients() {
    let (t, _, _) = train(SystemId::Crk);
    let e = parse("-p0*A^2 + p1*A^2/(p2*A^4 + 1)").unwrap();
    let r = fit_params(&e, &t, &FitConfig::default()).unwrap();
    for (i, want) in [0.1899, 0.4598, 0.7498].iter().enumerate() {
        assert!((r.params[i] - want).abs() <= 1e-2, "p{i} = {}", r.params[i]);
    }
}

#[test]
fn retries_are_deterministic_and_bounded() {
    let (t, stats, _) = train(SystemId::Crk);
    let cs = catalog(SystemId::Crk);
    // linear in A: fails nonlinearity whatever the parameters
    let e = parse("p0 - p1*A").unwrap();
    let cfg = FitConfig::default();
    let a = fit_with_retries(&e, &t, &cs, &stats, &cfg, 10, 7).unwrap();
    let b = fit_with_retries(&e, &t, &cs, &stats, &cfg, 10, 7).unwrap();
    assert_eq!(a, b);
    assert!(!a.valid());
    assert_eq!(a.fit.restarts_used, 10);

    let zero = fit_with_retries(&e, &t, &cs, &stats, &cfg, 0, 7).unwrap();
    let plain = fit_params(&e, &t, &cfg).unwrap();
    assert_eq!(zero.fit.params, plain.params);
    assert_eq!(zero.fit.restarts_used, 0);

    let truth = parse("-p0*A^2 + p1*A^2/(p2*A^4 + 1)").unwrap();
    let ok = fit_with_retries(&truth, &t, &cs, &stats, &cfg, 10, 7).unwrap();
    assert!(ok.valid(), "{:?}", ok.report.failure_reason);
    assert_eq!(ok.fit.restarts_used, 0);
}

fn smooth_table() -> SplitData {
    let x: Vec<f64> = (0..40).map(|i| -1.0 + i as f64 * 0.05).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.7 * v.sin() + 0.2 * v * v).collect();
    SplitData { names: vec!["x".into()], columns: vec![x], target: y }
}

/// Analytic gradient of MSE for `p0*sin(x) + p1*x^2 + p2*exp(p3*x)`.
fn oracle_gradient(t: &SplitData, p: &[f64]) -> [f64; 4] {
    let n = t.target.len() as f64;
    let mut g = [0.0; 4];
    for (x, y) in t.columns[0].iter().zip(&t.target) {
        let e = (p[3] * x).exp();
        let r = p[0] * x.sin() + p[1] * x * x + p[2] * e - y;
        let d = [x.sin(), x * x, e, p[2] * x * e];
        for k in 0..4 {
            g[k] += 2.0 * r * d[k] / n;
        }
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn internal_gradient_matches_analytic(p in prop::array::uniform4(0.1f64..2.0)) {
        let t = smooth_table();
        let e = parse("p0*sin(x) + p1*x^2 + p2*exp(p3*x)").unwrap();
        let obj = Objective::new(&e, &t, EvalGuard::default()).unwrap();
        let mut params = [1.0; 10];
        params[..4].copy_from_slice(&p);
        let f = obj.value(&params);
        let g = obj.gradient(&params, f, &FitConfig::default());
        let want = oracle_gradient(&t, &p);
        for k in 0..4 {
            let scale = want[k].abs().max(1e-3);
            prop_assert!((g[k] - want[k]).abs() / scale < 1e-4, "slot {}: {} vs {}", k, g[k], want[k]);
        }
    }

    #[test]
    fn fits_respect_bounds_and_never_worsen(a in 0.0f64..3.0, b in 0.0f64..3.0, lo in 0.0f64..0.5, hi in 1.0f64..4.0) {
        let t = smooth_table();
        let e = parse("p0*sin(x) + p1*x^2 + p2*x").unwrap();
        let mut cfg = FitConfig::default();
        for i in 0..10 {
            cfg.lower[i] = lo;
            cfg.upper[i] = hi;
            cfg.init[i] = (if i % 2 == 0 { a } else { b }).clamp(lo, hi);
        }
        let obj = Objective::new(&e, &t, EvalGuard::default()).unwrap();
        let before = obj.value(&cfg.init);
        let r = fit_params(&e, &t, &cfg).unwrap();
        prop_assert!(r.mse <= before);
        for i in 0..10 {
            prop_assert!(r.params[i] >= lo && r.params[i] <= hi);
        }
        for i in 3..10 {
            prop_assert_eq!(r.params[i], cfg.init[i]);
        }
    }
}
