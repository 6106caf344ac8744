use priorsr::constraints::{catalog, DataStats};
use priorsr::datagen::{make_dataset, Split, SplitData, SystemId, SystemSpec};
use priorsr::generator::{render_hard_rules, GrammarGenerator, PromptContext, PromptKind};
use priorsr::optimizer::FitConfig;
use priorsr::pool::{Lineage, Pool, Stage};
use priorsr::refine::{
    cosine_similarity, fingerprint, fit_batch, permutation_importance, profile_residual, refine_round, Env,
    RefineConfig, BINS,
};
use priorsr::scoring::BudgetState;
use priorsr::{parse, MAX_PARAMS};
use proptest::prelude::*;

fn table(x: Vec<f64>, z: Vec<f64>, y: Vec<f64>) -> SplitData {
    SplitData { names: vec!["x".into(), "z".into()], columns: vec![x, z], target: y }
}

/// Textbook sample moments via raw power sums.
fn oracle_moments(r: &[f64]) -> (f64, f64, f64) {
    let n = r.len() as f64;
    let s1 = r.iter().sum::<f64>() / n;
    let s2 = r.iter().map(|v| v * v).sum::<f64>() / n;
    let s3 = r.iter().map(|v| v.powi(3)).sum::<f64>() / n;
    let s4 = r.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    let m2 = s2 - s1 * s1;
    let m3 = s3 - 3.0 * s1 * s2 + 2.0 * s1.powi(3);
    let m4 = s4 - 4.0 * s1 * s3 + 6.0 * s1 * s1 * s2 - 3.0 * s1.powi(4);
    (s1, m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

fn rows() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec((-3.0f64..3.0, 0.0f64..10.0, -5.0f64..5.0, -2.0f64..2.0), 8..80)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn profile_matches_textbook_moments(rows in rows()) {
        let (x, z, y, r): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = rows.into_iter().fold(
            (vec![], vec![], vec![], vec![]),
            |(mut a, mut b, mut c, mut d), (p, q, s, t)| { a.push(p); b.push(q); c.push(s); d.push(t); (a, b, c, d) },
        );
        let spread = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assume!(spread(&r) > 1e-3 && spread(&y) > 1e-3 && spread(&x) > 1e-3 && spread(&z) > 1e-3);
        let n = r.len() as f64;
        let t = table(x, z, y.clone());
        let p = profile_residual(r.clone(), &t).unwrap();
        let (bias, skew, kurt) = oracle_moments(&r);
        prop_assert!((p.bias - bias).abs() < 1e-9);
        prop_assert!((p.skewness - skew).abs() < 1e-6 * skew.abs().max(1.0));
        prop_assert!((p.kurtosis - kurt).abs() < 1e-6 * kurt.abs().max(1.0));
        let ybar = y.iter().sum::<f64>() / n;
        let var_y = y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / n;
        let mse = r.iter().map(|v| v * v).sum::<f64>() / n;
        prop_assert!((p.nmse - mse / var_y).abs() < 1e-9 * p.nmse.max(1.0));
        prop_assert_eq!(p.bins.len(), 2);
        for b in &p.bins {
            prop_assert_eq!(b.counts.len(), BINS);
            prop_assert_eq!(b.counts.iter().sum::<usize>(), r.len());
            let pooled: f64 = b.mse.iter().zip(&b.counts).map(|(m, c)| m * *c as f64).sum::<f64>() / n;
            prop_assert!((pooled - mse).abs() < 1e-9 * mse.max(1.0));
            prop_assert!(b.edges.windows(2).all(|w| w[0] <= w[1]));
        }
        prop_assert!(p.high_error_regions.len() <= 2);
        prop_assert!(p.high_error_regions.windows(2).all(|w| w[0].mean_error >= w[1].mean_error));
    }

    #[test]
    fn cosine_and_fingerprint_agree(a in prop::collection::vec(-5.0f64..5.0, 2..30), k in 0.1f64..10.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-6));
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let f = fingerprint(&a);
        prop_assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let dot: f64 = f.iter().zip(&fingerprint(&scaled)).map(|(p, q)| p * q).sum();
        prop_assert!((dot - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cosine_rejects_degenerate_inputs() {
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), None);
    assert_eq!(cosine_similarity(&[1.0], &[1.0, 2.0]), None);
    assert_eq!(fingerprint(&[0.0, 0.0]), vec![0.0, 0.0]);
}

#[test]
fn unused_inputs_have_zero_importance() {
    let x: Vec<f64> = (0..200).map(|i| i as f64 / 20.0).collect();
    let z: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let t = table(x, z, y);
    let mut params = [0.0; MAX_PARAMS];
    params[0] = 2.0;
    let imp = permutation_importance(&parse("p0*x").unwrap(), &params, &t, 3).unwrap();
    assert_eq!(imp[0].0, "x");
    assert!(imp[0].1 > 1.0);
    assert_eq!(imp[1], ("z".to_string(), 0.0));
    assert_eq!(imp, permutation_importance(&parse("p0*x").unwrap(), &params, &t, 3).unwrap());
}

#[test]
fn profile_rejects_mismatched_lengths() {
    let t = table(vec![0.0, 1.0], vec![1.0, 2.0], vec![0.0, 1.0]);
    assert!(profile_residual(vec![0.1], &t).is_err());
}

fn crk_context(data: &priorsr::datagen::Dataset, cs: &priorsr::constraints::ConstraintSet) -> PromptContext {
    let mut c = PromptContext::new(PromptKind::Warmup, data.variables().to_vec(), data.target().clone());
    c.domain = "chemical kinetics".into();
    c.problem = "Recover the rate law.".into();
    c.hard_rules = render_hard_rules(cs);
    c
}

#[test]
fn refine_round_registers_on_the_island_and_charges_the_budget() {
    let data = make_dataset(&SystemSpec::default_for(SystemId::Crk)).unwrap();
    let train = data.view(Split::Train);
    let cs = catalog(SystemId::Crk);
    let stats = DataStats::from_dataset(&data);
    let fit = FitConfig::default();
    let base = crk_context(&data, &cs);
    let env = Env { train: &train, cs: &cs, stats: &stats, fit: &fit, retries: 2, seed: 4, base: &base };

    let mut budget = BudgetState::new(0, 400);
    let seedling = parse("-p0*A^2 + p1*A^2/(p2*A^4 + 1)").unwrap();
    let lineage = Lineage { stage: Stage::Warmup, parents: vec![] };
    let fitted = fit_batch(&[seedling], &env, &mut budget, &lineage).unwrap();
    assert_eq!(budget.n_curr, 1);
    let first = fitted.into_iter().flatten().next().expect("feasible fit");
    assert!(first.valid, "{:?}", first.report.failure_reason);

    let mut pool = Pool::new(3).unwrap();
    pool.register(first, 1).unwrap();
    let cfg = RefineConfig { num_skeletons: 6, per_call: 3, ..RefineConfig::default() };
    let before = pool.islands[1].best().unwrap().score_mse;
    let mut gen = GrammarGenerator::new(9);
    let out = refine_round(&mut pool, 1, &mut gen, &env, &mut budget, &cfg).unwrap();

    assert!(out.requested <= cfg.num_skeletons && out.requested > 0);
    assert_eq!(out.fitted, budget.n_curr - 1);
    assert!(out.fitted >= out.requested as u64);
    assert_eq!(pool.len(), 1 + out.registered.len());
    assert!(pool.islands[0].candidates().next().is_none());
    assert!(pool.islands[2].candidates().next().is_none());
    for id in &out.registered {
        let c = pool.islands[1].candidates().find(|c| c.id == *id).unwrap();
        assert!(c.valid);
        assert!(matches!(c.lineage.stage, Stage::Refine | Stage::Repair));
    }
    assert!(pool.islands[1].best().unwrap().score_mse >= before);
    let ins = out.insight.expect("round produces an insight");
    assert!(pool.insights.iter().any(|i| i.id == ins && i.island == 1));

    // an empty island is a no-op
    let n = budget.n_curr;
    let none = refine_round(&mut pool, 0, &mut gen, &env, &mut budget, &cfg).unwrap();
    assert_eq!((none.fitted, budget.n_curr), (0, n));
}
