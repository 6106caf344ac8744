//! Residual-guided refinement.
//!
//! A round takes the best candidate of an island, profiles its residuals,
//! retrieves similar candidates and lessons from the insight store, asks
//! the generator for refined skeletons, repairs the ones that break a prior,
//! registers the survivors, and records a reflection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::constraints::{ConstraintSet, DataStats};
use crate::datagen::SplitData;
use crate::expr::{evaluate, EvalGuard, Expression, Params};
use crate::generator::{
    Attempt, Exemplar, GenError, Generator, PromptContext, PromptKind, RefinementHistory, RepairRecord,
};
use crate::optimizer::{fit_with_retries, FitConfig, FitError};
use crate::pool::{Candidate, Insight, InsightKind, Lineage, Pool, PoolError, Stage};
use crate::scoring::BudgetState;
use crate::seeds;

pub const BINS: usize = 8;
const FIT_TAG: u64 = 0x7265_6669;
const PERM_TAG: u64 = 0x7065_726d;

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error("residual length {got} does not match {expected} training rows")]
    Shape { got: usize, expected: usize },
}

/// Squared-residual table of one input over equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableBins {
    pub var: String,
    /// `BINS + 1` edges spanning the train range.
    pub edges: Vec<f64>,
    pub mse: Vec<f64>,
    pub counts: Vec<usize>,
}

impl VariableBins {
    /// Spread between the worst and best non-empty bin.
    pub fn range(&self) -> f64 {
        let occupied = self.mse.iter().zip(&self.counts).filter(|(_, c)| **c > 0).map(|(m, _)| *m);
        let (lo, hi) = occupied.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m), hi.max(m)));
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub var: String,
    pub lo: f64,
    pub hi: f64,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProfile {
    pub residual: Vec<f64>,
    pub nmse: f64,
    pub bias: f64,
    pub skewness: f64,
    /// Excess kurtosis.
    pub kurtosis: f64,
    pub bins: Vec<VariableBins>,
    pub defect_variable: String,
    pub high_error_regions: Vec<Region>,
}

fn bin_of(x: f64, lo: f64, width: f64) -> usize {
    if width <= 0.0 {
        return 0;
    }
    (((x - lo) / width).floor() as isize).clamp(0, BINS as isize - 1) as usize
}

fn bin_table(var: &str, col: &[f64], sq: &[f64]) -> VariableBins {
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / BINS as f64;
    let mut sum = [0.0; BINS];
    let mut counts = vec![0usize; BINS];
    for (x, e) in col.iter().zip(sq) {
        let b = bin_of(*x, lo, width);
        sum[b] += e;
        counts[b] += 1;
    }
    VariableBins {
        var: var.to_string(),
        edges: (0..=BINS).map(|i| if i == BINS { hi } else { lo + width * i as f64 }).collect(),
        mse: sum.iter().zip(&counts).map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect(),
        counts,
    }
}

/// One split per variable at the bin edge with the largest gap between the
/// two sides; the worse side becomes a candidate region.
fn greedy_region(b: &VariableBins) -> Option<Region> {
    let mut best: Option<(f64, Region)> = None;
    for cut in 1..BINS {
        let side = |r: std::ops::Range<usize>| {
            let n: usize = b.counts[r.clone()].iter().sum();
            let s: f64 = r.map(|i| b.mse[i] * b.counts[i] as f64).sum();
            (n > 0).then(|| s / n as f64)
        };
        let (Some(l), Some(r)) = (side(0..cut), side(cut..BINS)) else {
            continue;
        };
        let gap = (l - r).abs();
        let region = if l >= r {
            Region { var: b.var.clone(), lo: b.edges[0], hi: b.edges[cut], mean_error: l }
        } else {
            Region { var: b.var.clone(), lo: b.edges[cut], hi: b.edges[BINS], mean_error: r }
        };
        if best.as_ref().is_none_or(|(g, _)| gap > *g) {
            best = Some((gap, region));
        }
    }
    best.map(|(_, r)| r)
}

/// Profile of a residual vector `y - y_hat` over the training rows.
pub fn profile_residual(residual: Vec<f64>, train: &SplitData) -> Result<ResidualProfile, RefineError> {
    let n = residual.len();
    if n != train.len() || n == 0 {
        return Err(RefineError::Shape { got: n, expected: train.len() });
    }
    let nf = n as f64;
    let bias = residual.iter().sum::<f64>() / nf;
    let m = |k: i32| residual.iter().map(|r| (r - bias).powi(k)).sum::<f64>() / nf;
    let (m2, m3, m4) = (m(2), m(3), m(4));
    let (skewness, kurtosis) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
    let ybar = train.target.iter().sum::<f64>() / nf;
    let var_y = train.target.iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / nf;
    let sq: Vec<f64> = residual.iter().map(|r| r * r).collect();
    let mse = sq.iter().sum::<f64>() / nf;
    let nmse = if var_y > 0.0 { mse / var_y } else { f64::INFINITY };
    let bins: Vec<VariableBins> = train.names.iter().zip(&train.columns).map(|(v, c)| bin_table(v, c, &sq)).collect();
    let defect_variable = bins
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.range().total_cmp(&b.range()).then(j.cmp(i)))
        .map(|(_, b)| b.var.clone())
        .unwrap_or_default();
    let mut high_error_regions: Vec<Region> = bins.iter().filter_map(greedy_region).collect();
    high_error_regions.sort_by(|a, b| b.mean_error.total_cmp(&a.mean_error));
    high_error_regions.truncate(3);
    Ok(ResidualProfile { residual, nmse, bias, skewness, kurtosis, bins, defect_variable, high_error_regions })
}

/// Train residuals of a skeleton at fixed parameters.
pub fn residuals(expr: &Expression, params: &Params, train: &SplitData) -> Result<Vec<f64>, RefineError> {
    let pred = evaluate(expr, &train.bindings(), params, &EvalGuard::default()).map_err(FitError::from)?;
    Ok(train.target.iter().zip(pred).map(|(y, p)| y - p).collect())
}

pub fn residual_profile(c: &Candidate, train: &SplitData) -> Result<ResidualProfile, RefineError> {
    let r = if c.residual.len() == train.len() { c.residual.clone() } else { residuals(&c.expr, &c.params, train)? };
    profile_residual(r, train)
}

impl ResidualProfile {
    /// Human-readable diagnostics for the prompt slots.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "NMSE {:.4e}; bias {:.4e}; skewness {:.3}; excess kurtosis {:.3}\n",
            self.nmse, self.bias, self.skewness, self.kurtosis
        );
        for b in &self.bins {
            let cells: Vec<String> = b.mse.iter().map(|m| format!("{m:.2e}")).collect();
            let _ = writeln!(
                s,
                "binned squared error by {} over [{:.4}, {:.4}]: {}",
                b.var,
                b.edges[0],
                b.edges[BINS],
                cells.join(" ")
            );
        }
        let _ = writeln!(s, "defect variable: {}", self.defect_variable);
        for r in &self.high_error_regions {
            let _ = writeln!(
                s,
                "high-error region: {} in [{:.4}, {:.4}], mean squared error {:.3e}",
                r.var, r.lo, r.hi, r.mean_error
            );
        }
        s
    }
}

/// Importance of each input: MSE after a seeded shuffle of its column minus
/// the baseline MSE, clamped at zero.
pub fn permutation_importance(
    expr: &Expression,
    params: &Params,
    train: &SplitData,
    seed: u64,
) -> Result<Vec<(String, f64)>, RefineError> {
    let guard = EvalGuard::default();
    let mse = |cols: &[Vec<f64>]| -> Result<f64, RefineError> {
        let mut b = crate::expr::Bindings::new();
        for (n, c) in train.names.iter().zip(cols) {
            b.insert(n, c);
        }
        let pred = evaluate(expr, &b, params, &guard).map_err(FitError::from)?;
        Ok(train.target.iter().zip(&pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / train.len() as f64)
    };
    let base = mse(&train.columns)?;
    let mut out = Vec::with_capacity(train.names.len());
    for (k, name) in train.names.iter().enumerate() {
        let mut cols = train.columns.clone();
        cols[k].shuffle(&mut seeds::rng(seeds::derive(seed, PERM_TAG, k as u64)));
        let shuffled = mse(&cols).unwrap_or(f64::INFINITY);
        out.push((name.clone(), (shuffled - base).max(0.0)));
    }
    Ok(out)
}

/// `a.b / (|a| |b|)`, or `None` when either vector has zero norm or the
/// lengths differ.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    let norm = (na * nb).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / norm)
}

/// Unit-norm copy of `r` (all zeros when `r` is zero).
pub fn fingerprint(r: &[f64]) -> Vec<f64> {
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        r.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; r.len()]
    }
}

/// Up to `top_k` candidates ranked by cosine similarity of their residuals
/// to `residual`, most similar first. Ties keep pool order.
pub fn rank_similar<'a>(
    residual: &[f64],
    candidates: impl Iterator<Item = &'a Candidate>,
    top_k: usize,
) -> Vec<(&'a Candidate, f64)> {
    let mut scored: Vec<(&Candidate, f64)> =
        candidates.filter_map(|c| cosine_similarity(residual, &c.residual).map(|s| (c, s))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(top_k);
    scored
}

pub fn find_similar<'a>(profile: &ResidualProfile, pool: &'a Pool, top_k: usize) -> Vec<(&'a Candidate, f64)> {
    rank_similar(&profile.residual, pool.candidates(), top_k)
}

/// Lessons relevant to `island`: its own insights of either kind plus
/// successes from other islands, ranked by fingerprint similarity.
pub fn retrieve_insights<'a>(pool: &'a Pool, island: usize, fp: &[f64], top_k: usize) -> Vec<&'a Insight> {
    let mut v: Vec<(&Insight, f64)> = pool
        .insights
        .iter()
        .filter(|i| i.island == island || i.kind == InsightKind::Success)
        .map(|i| (i, cosine_similarity(fp, &i.fingerprint).unwrap_or(-2.0)))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.created_at.cmp(&a.0.created_at)));
    v.into_iter().take(top_k).map(|(i, _)| i).collect()
}

/// Refinement and repair counts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub num_skeletons: usize,
    pub per_call: usize,
    pub max_repair_rounds: usize,
    pub max_refine_repair: usize,
    pub good_examples: usize,
    pub history: usize,
    pub top_k: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            num_skeletons: 10,
            per_call: 2,
            max_repair_rounds: 3,
            max_refine_repair: 6,
            good_examples: 3,
            history: 3,
            top_k: 3,
        }
    }
}

/// Shared inputs for fitting and prompting.
pub struct Env<'a> {
    pub train: &'a SplitData,
    pub cs: &'a ConstraintSet,
    pub stats: &'a DataStats,
    pub fit: &'a FitConfig,
    pub retries: usize,
    pub seed: u64,
    /// Template carrying domain, problem, variables, target and hard rules.
    pub base: &'a PromptContext,
}

impl Env<'_> {
    pub fn context(&self, kind: PromptKind) -> PromptContext {
        let mut c = self.base.clone();
        c.kind = kind;
        c
    }
}

fn fit_at(expr: &Expression, env: &Env, index: u64, lineage: Lineage) -> Result<Option<Candidate>, RefineError> {
    let seed = seeds::derive(env.seed, FIT_TAG, index);
    let fitted = match fit_with_retries(expr, env.train, env.cs, env.stats, env.fit, env.retries, seed) {
        Ok(f) => f,
        Err(FitError::Expr(e)) => {
            log::debug!("skeleton {} rejected: {e}", expr.serialize());
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    if fitted.infeasible() {
        return Ok(None);
    }
    let residual = residuals(&fitted.expr, &fitted.fit.params, env.train)?;
    Ok(Some(Candidate::from_fitted(fitted, residual, lineage)))
}

/// Fits skeletons in parallel, charging one budget unit each until the
/// budget runs out. Fit seeds come from the budget position, so results do
/// not depend on thread scheduling. `None` marks skeletons that never gave
/// finite predictions; skeletons beyond the budget are not returned.
pub fn fit_batch(
    exprs: &[Expression],
    env: &Env,
    budget: &mut BudgetState,
    lineage: &Lineage,
) -> Result<Vec<Option<Candidate>>, RefineError> {
    let room = budget.n_max.saturating_sub(budget.n_curr) as usize;
    let take = exprs.len().min(room);
    let start = budget.n_curr;
    budget.n_curr += take as u64;
    exprs[..take].par_iter().enumerate().map(|(i, e)| fit_at(e, env, start + i as u64, lineage.clone())).collect()
}

/// Single-skeleton form of [`fit_batch`].
pub fn fit_candidate(
    expr: &Expression,
    env: &Env,
    budget: &mut BudgetState,
    lineage: Lineage,
) -> Result<Option<Candidate>, RefineError> {
    Ok(fit_batch(std::slice::from_ref(expr), env, budget, &lineage)?.into_iter().next().flatten())
}

fn exemplar(c: &Candidate) -> Exemplar {
    Exemplar { expr: c.expr.clone(), score: c.score_mse, valid: c.valid }
}

/// Fix hint derived from the failing check's rule text.
fn fix_hint(env: &Env, reason: &str) -> String {
    let name = reason.split(':').next().unwrap_or(reason).trim();
    env.base
        .hard_rules
        .lines()
        .find(|l| l.contains(name))
        .map(|l| format!("Restructure the equation so that it satisfies rule {}", l.trim()))
        .unwrap_or_else(|| "Restructure the term responsible for the violation.".into())
}

/// Outcome of a repair session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Repaired {
    pub valid: Vec<Candidate>,
    /// Every fitted but still-invalid attempt.
    pub invalid: Vec<Candidate>,
    pub iterations: usize,
}

/// Repairs `failed` for up to `cfg.max_repair_rounds` generator calls,
/// spending at most `*iterations_left` calls. Stops at the first round that
/// yields a valid candidate. `good` holds valid examples, best first.
#[allow(clippy::too_many_arguments)]
pub fn repair(
    failed: &Candidate,
    original: &Candidate,
    analysis: &str,
    defect_var: Option<&str>,
    good: &[Candidate],
    history: &mut Vec<RepairRecord>,
    gen: &mut dyn Generator,
    env: &Env,
    budget: &mut BudgetState,
    cfg: &RefineConfig,
    iterations_left: &mut usize,
) -> Result<Repaired, RefineError> {
    let mut out = Repaired::default();
    let mut current = failed.clone();
    for round in 1..=cfg.max_repair_rounds {
        if *iterations_left == 0 || budget.n_curr >= budget.n_max {
            break;
        }
        *iterations_left -= 1;
        out.iterations += 1;
        let reason = current.report.failure_reason.clone().unwrap_or_else(|| "constraint violation".into());
        let mut ctx = env.context(PromptKind::Repair);
        ctx.samples_per_prompt = cfg.per_call;
        ctx.exemplars = vec![exemplar(original), exemplar(&current)];
        ctx.analysis = analysis.to_string();
        ctx.defect_var = defect_var.map(str::to_string);
        ctx.fix_hint = Some(fix_hint(env, &reason));
        ctx.failure_reason = Some(reason.clone());
        ctx.good_examples = good.iter().take(cfg.good_examples).map(exemplar).collect();
        let start = history.len().saturating_sub(cfg.history);
        ctx.history = history[start..].to_vec();
        let proposals = match gen.propose(&ctx) {
            Ok(o) => o.extracted,
            Err(GenError::NoValidExpression { .. }) => Vec::new(),
            Err(e @ (GenError::Transport { .. } | GenError::BadReply(_))) => {
                log::warn!("repair call failed: {e}");
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };
        history.push(RepairRecord {
            failed: current.expr.clone(),
            failure_reason: reason,
            attempt: round,
            fix_hint: ctx.fix_hint.clone().unwrap_or_default(),
        });
        let lineage = Lineage { stage: Stage::Repair, parents: vec![original.id, current.id] };
        let exprs: Vec<Expression> = proposals.into_iter().map(|p| p.expr).collect();
        for c in fit_batch(&exprs, env, budget, &lineage)?.into_iter().flatten() {
            if c.valid {
                out.valid.push(c);
            } else {
                out.invalid.push(c);
            }
        }
        if !out.valid.is_empty() {
            break;
        }
        if let Some(next) = out.invalid.iter().max_by(|a, b| a.score_mse.total_cmp(&b.score_mse)) {
            current = next.clone();
        }
    }
    Ok(out)
}

/// Turns a refinement outcome into a stored lesson.
pub fn reflect(
    original: &Candidate,
    attempts: &[Candidate],
    island: usize,
    created_at: u64,
    gen: &mut dyn Generator,
    env: &Env,
    analysis: &str,
) -> Result<Insight, RefineError> {
    let improved =
        attempts.iter().filter(|a| a.score_mse > original.score_mse).max_by(|a, b| a.score_mse.total_cmp(&b.score_mse));
    let (kind, ctx, sources) = match improved {
        Some(best) => {
            let mut ctx = env.context(PromptKind::ImprovementAnalysis);
            ctx.exemplars = vec![exemplar(original), exemplar(best)];
            ctx.analysis = analysis.to_string();
            (InsightKind::Success, ctx, vec![original.id, best.id])
        }
        None => {
            let mut ctx = env.context(PromptKind::Reflection);
            ctx.exemplars = vec![exemplar(original)];
            ctx.attempts = attempts
                .iter()
                .map(|a| Attempt { expr: a.expr.clone(), score: Some(a.score_mse), valid: a.valid, improved: false })
                .collect();
            (InsightKind::Failure, ctx, vec![original.id])
        }
    };
    let text = gen.analyze(&ctx)?;
    Ok(Insight { id: 0, text, kind, island, fingerprint: fingerprint(&original.residual), created_at, sources })
}

/// Accounting for one refinement round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundOutcome {
    pub requested: usize,
    pub calls: usize,
    pub fitted: u64,
    pub repair_iterations: usize,
    pub registered: Vec<u64>,
    pub insight: Option<u64>,
}

/// One refinement round on `island`. Only constraint-passing candidates are
/// registered, so the island best never drops.
pub fn refine_round(
    pool: &mut Pool,
    island: usize,
    gen: &mut dyn Generator,
    env: &Env,
    budget: &mut BudgetState,
    cfg: &RefineConfig,
) -> Result<RoundOutcome, RefineError> {
    let mut out = RoundOutcome::default();
    let n0 = budget.n_curr;
    let Some(best) = pool
        .islands
        .get(island)
        .ok_or(PoolError::IslandOutOfRange { island, count: pool.num_islands() })?
        .best()
        .cloned()
    else {
        return Ok(out);
    };
    let profile = residual_profile(&best, env.train)?;
    let fp = fingerprint(&profile.residual);

    let mut ra = env.context(PromptKind::ResidualAnalysis);
    ra.exemplars = vec![exemplar(&best)];
    ra.analysis = profile.to_text();
    ra.defect_var = Some(profile.defect_variable.clone());
    let diagnosis = match gen.analyze(&ra) {
        Ok(t) => t,
        Err(e @ (GenError::Transport { .. } | GenError::BadReply(_))) => {
            log::warn!("residual analysis failed: {e}");
            String::new()
        }
        Err(e) => return Err(e.into()),
    };
    let analysis = if diagnosis.is_empty() { profile.to_text() } else { format!("{}\n{diagnosis}", profile.to_text()) };

    let mut ctx = env.context(PromptKind::Refine);
    ctx.samples_per_prompt = cfg.per_call;
    ctx.exemplars = vec![exemplar(&best)];
    ctx.analysis = analysis.clone();
    ctx.defect_var = Some(profile.defect_variable.clone());
    for (r, _) in find_similar(&profile, pool, cfg.top_k) {
        for ins in pool.insights.iter().filter(|i| i.kind == InsightKind::Success && i.sources.first() == Some(&r.id)) {
            if let Some(improved) = ins.sources.get(1).and_then(|id| pool.candidates().find(|c| c.id == *id)) {
                ctx.refinements.push(RefinementHistory {
                    original: r.expr.clone(),
                    improved: improved.expr.clone(),
                    explanation: ins.text.clone(),
                });
            }
        }
    }
    ctx.insights = retrieve_insights(pool, island, &fp, cfg.top_k).into_iter().map(|i| i.text.clone()).collect();

    let max_calls = 2 * cfg.num_skeletons.div_ceil(cfg.per_call.max(1));
    let mut skeletons = Vec::new();
    while skeletons.len() < cfg.num_skeletons && out.calls < max_calls {
        out.calls += 1;
        ctx.samples_per_prompt = cfg.per_call.min(cfg.num_skeletons - skeletons.len());
        match gen.propose(&ctx) {
            Ok(o) => skeletons.extend(o.extracted.into_iter().map(|p| p.expr)),
            Err(GenError::NoValidExpression { .. }) => {}
            Err(e @ (GenError::Transport { .. } | GenError::BadReply(_))) => log::warn!("refine call failed: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    out.requested = skeletons.len();

    let mut attempts = Vec::new();
    let mut repairs_left = cfg.max_refine_repair;
    let mut history = Vec::new();
    let lineage = Lineage { stage: Stage::Refine, parents: vec![best.id] };
    let mut good: Vec<Candidate> = pool.candidates().filter(|c| c.valid).cloned().collect();
    good.sort_by(|a, b| b.score_mse.total_cmp(&a.score_mse));
    good.truncate(cfg.good_examples);
    for c in fit_batch(&skeletons, env, budget, &lineage)?.into_iter().flatten() {
        attempts.push(c.clone());
        if c.valid {
            out.registered.push(pool.register(c, island)?);
            continue;
        }
        let fixed = repair(
            &c,
            &best,
            &analysis,
            Some(&profile.defect_variable),
            &good,
            &mut history,
            gen,
            env,
            budget,
            cfg,
            &mut repairs_left,
        )?;
        out.repair_iterations += fixed.iterations;
        attempts.extend(fixed.invalid);
        for v in fixed.valid {
            attempts.push(v.clone());
            out.registered.push(pool.register(v, island)?);
        }
    }
    if !attempts.is_empty() {
        let ins = reflect(&best, &attempts, island, budget.n_curr, gen, env, &analysis)?;
        out.insight = Some(pool.add_insight(ins));
    }
    out.fitted = budget.n_curr - n0;
    Ok(out)
}
