//! Parameter fitting: projected L-BFGS with box bounds, finite-difference
//! gradients and Armijo backtracking, plus the constraint-retry loop.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::constraints::{self, CheckReport, ConstraintError, ConstraintSet, DataStats};
use crate::datagen::SplitData;
use crate::expr::{EvalGuard, ExprError, Expression, Params, Program, MAX_PARAMS};
use crate::seeds;

/// Finite stand-in for an unbounded upper limit.
pub const BOUND_CAP: f64 = 1e6;
pub const DEFAULT_RETRIES: usize = 10;

const HISTORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const RESTART_RANGE: (f64, f64) = (0.0, 2.0);

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("expression cannot be evaluated on the data: {0}")]
    Expr(#[from] ExprError),
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lower: Params,
    pub upper: Params,
    pub init: Params,
    pub max_iterations: usize,
    /// Relative finite-difference step.
    pub gradient_step: f64,
    /// Stop when an accepted step lowers the objective by less than
    /// `tol * |f|`.
    pub tol: f64,
    #[serde(skip, default)]
    pub guard: EvalGuard,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lower: [0.0; MAX_PARAMS],
            upper: [BOUND_CAP; MAX_PARAMS],
            init: [1.0; MAX_PARAMS],
            max_iterations: 500,
            gradient_step: 1e-7,
            tol: 1e-12,
            guard: EvalGuard::default(),
        }
    }
}

impl FitConfig {
    /// Bounds `[-cap, cap]` instead of the non-negative default.
    pub fn symmetric(mut self) -> Self {
        self.lower = [-BOUND_CAP; MAX_PARAMS];
        self
    }

    pub fn validate(&self) -> Result<(), FitError> {
        for i in 0..MAX_PARAMS {
            let (lo, hi, x) = (self.lower[i], self.upper[i], self.init[i]);
            if !(lo <= hi) || !(lo..=hi).contains(&x) {
                return Err(FitError::Config(format!(
                    "slot {i}: need lower <= init <= upper, got {lo} <= {x} <= {hi}"
                )));
            }
        }
        if !(self.gradient_step > 0.0) || !(self.tol >= 0.0) {
            return Err(FitError::Config("gradient step and tolerance must be positive".into()));
        }
        Ok(())
    }

    fn project(&self, x: &mut Params) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Params,
    /// Train MSE at `params`; `+inf` marks an infeasible fit.
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts_used: usize,
}

impl FitResult {
    pub fn feasible(&self) -> bool {
        self.mse.is_finite()
    }
}

/// Train-set MSE of one skeleton as a function of its parameters.
pub struct Objective<'a> {
    prog: Program,
    cols: Vec<&'a [f64]>,
    y: &'a [f64],
    guard: EvalGuard,
    /// Parameter slots that appear in the expression.
    pub free: Vec<usize>,
}

impl<'a> Objective<'a> {
    pub fn new(expr: &Expression, train: &'a SplitData, guard: EvalGuard) -> Result<Self, FitError> {
        if train.is_empty() {
            return Err(FitError::Expr(ExprError::EmptyTable));
        }
        let names = train.name_refs();
        let prog = Program::compile(expr, &names)?;
        Ok(Objective {
            prog,
            cols: train.column_refs(),
            y: &train.target,
            guard,
            free: expr.params_used().into_iter().collect(),
        })
    }

    /// MSE, or `+inf` when any prediction is non-finite.
    pub fn value(&self, p: &Params) -> f64 {
        match self.prog.eval_columns(&self.cols, self.y.len(), p, &self.guard) {
            Ok(pred) => {
                let s: f64 = pred.iter().zip(self.y).map(|(a, b)| (a - b) * (a - b)).sum();
                let m = s / self.y.len() as f64;
                if m.is_finite() {
                    m
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }

    /// Central-difference gradient over the free slots, falling back to a
    /// one-sided step next to a bound.
    pub fn gradient(&self, p: &Params, f: f64, cfg: &FitConfig) -> Params {
        let mut g = [0.0; MAX_PARAMS];
        for &i in &self.free {
            let h = cfg.gradient_step * p[i].abs().max(1.0);
            let at = |v: f64| {
                let mut q = *p;
                q[i] = v;
                self.value(&q)
            };
            let up = p[i] + h <= cfg.upper[i];
            let down = p[i] - h >= cfg.lower[i];
            let d = match (up, down) {
                (true, true) => (at(p[i] + h) - at(p[i] - h)) / (2.0 * h),
                (true, false) => (at(p[i] + h) - f) / h,
                (false, _) => (f - at(p[i] - h)) / h,
            };
            g[i] = if d.is_finite() { d } else { 0.0 };
        }
        g
    }
}

fn dot(a: &Params, b: &Params, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| a[i] * b[i]).sum()
}

/// Minimises train MSE over the free parameter slots within the bounds.
/// Slots absent from `expr` keep their initial value exactly.
pub fn fit_params(expr: &Expression, train: &SplitData, cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    let obj = Objective::new(expr, train, cfg.guard)?;
    Ok(minimize(&obj, cfg.init, cfg))
}

fn minimize(obj: &Objective<'_>, init: Params, cfg: &FitConfig) -> FitResult {
    let mut x = init;
    cfg.project(&mut x);
    let mut f = obj.value(&x);
    let mut result = FitResult { params: x, mse: f, iterations: 0, converged: false, restarts_used: 0 };
    if !f.is_finite() {
        result.mse = f64::INFINITY;
        return result;
    }
    if obj.free.is_empty() {
        result.converged = true;
        return result;
    }

    let mut g = obj.gradient(&x, f, cfg);
    let mut memory: VecDeque<(Params, Params, f64)> = VecDeque::with_capacity(HISTORY);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        // slots pinned at a bound by the gradient do not move
        let active: Vec<usize> = obj
            .free
            .iter()
            .copied()
            .filter(|&i| !((x[i] <= cfg.lower[i] && g[i] > 0.0) || (x[i] >= cfg.upper[i] && g[i] < 0.0)))
            .collect();
        let pg_norm = active.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
        if active.is_empty() || pg_norm == 0.0 {
            converged = true;
            break;
        }

        // two-loop recursion on the active slots
        let mut d = [0.0; MAX_PARAMS];
        for &i in &active {
            d[i] = -g[i];
        }
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &d, &active);
            for &i in &active {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = memory.back() {
            let yy = dot(y, y, &active);
            if yy > 0.0 {
                let gamma = dot(s, y, &active) / yy;
                for &i in &active {
                    d[i] *= gamma;
                }
            }
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d, &active);
            for &i in &active {
                d[i] += (a - b) * s[i];
            }
        }
        if dot(&d, &g, &active) >= 0.0 {
            memory.clear();
            for &i in &active {
                d[i] = -g[i];
            }
        }
        if memory.is_empty() {
            // first step or restart: keep the trial step modest
            let scale = 1.0 / pg_norm.max(1.0);
            for &i in &active {
                d[i] *= scale;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = x;
            for &i in &active {
                trial[i] = x[i] + step * d[i];
            }
            cfg.project(&mut trial);
            let ft = obj.value(&trial);
            let decrease: f64 = active.iter().map(|&i| g[i] * (trial[i] - x[i])).sum();
            if ft.is_finite() && ft <= f + ARMIJO * decrease && ft <= f {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if memory.is_empty() {
                converged = true;
                break;
            }
            memory.clear();
            continue;
        };

        let gn = obj.gradient(&xn, fnew, cfg);
        let mut s = [0.0; MAX_PARAMS];
        let mut y = [0.0; MAX_PARAMS];
        for &i in &obj.free {
            s[i] = xn[i] - x[i];
            y[i] = gn[i] - g[i];
        }
        let sy = dot(&s, &y, &obj.free);
        if sy > 1e-16 * dot(&y, &y, &obj.free).sqrt() * dot(&s, &s, &obj.free).sqrt() && sy > 0.0 {
            if memory.len() == HISTORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let done = f - fnew <= cfg.tol * f.abs() || fnew == 0.0;
        x = xn;
        f = fnew;
        g = gn;
        if done {
            converged = true;
            break;
        }
    }

    // recompute independently of the search bookkeeping
    result.params = x;
    result.mse = obj.value(&x);
    result.iterations = iterations;
    result.converged = converged;
    result
}

/// A fitted skeleton together with its constraint verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub expr: Expression,
    pub fit: FitResult,
    pub report: CheckReport,
}

impl Fitted {
    pub fn valid(&self) -> bool {
        self.report.valid
    }

    /// No attempt produced finite predictions; such candidates never enter
    /// the pool.
    pub fn infeasible(&self) -> bool {
        !self.fit.feasible()
    }

    pub fn score_mse(&self) -> f64 {
        -self.fit.mse
    }
}

/// Fits, checks constraints, and on failure refits from seeded random
/// starts in `[0, 2]` (clipped to the bounds) up to `retries` more times.
///
/// Returns the first constraint-passing fit, or else the lowest-MSE fit.
pub fn fit_with_retries(
    expr: &Expression,
    train: &SplitData,
    cs: &ConstraintSet,
    stats: &DataStats,
    cfg: &FitConfig,
    retries: usize,
    seed: u64,
) -> Result<Fitted, FitError> {
    cfg.validate()?;
    let obj = Objective::new(expr, train, cfg.guard)?;
    let attempts = if obj.free.is_empty() { 1 } else { retries + 1 };
    let mut best: Option<(FitResult, CheckReport)> = None;
    for attempt in 0..attempts {
        let init = if attempt == 0 {
            cfg.init
        } else {
            let mut rng = seeds::rng(seeds::derive(seed, 0x0066_6974, attempt as u64));
            let mut p = cfg.init;
            for &i in &obj.free {
                let lo = RESTART_RANGE.0.max(cfg.lower[i]);
                let hi = RESTART_RANGE.1.min(cfg.upper[i]).max(lo);
                p[i] = if hi > lo { rng.random_range(lo..hi) } else { lo };
            }
            p
        };
        let mut fit = minimize(&obj, init, cfg);
        fit.restarts_used = attempt;
        if !fit.feasible() {
            continue;
        }
        let report = constraints::check(expr, &fit.params, cs, stats)?;
        if report.valid {
            return Ok(Fitted { expr: expr.clone(), fit, report });
        }
        if best.as_ref().is_none_or(|(b, _)| fit.mse < b.mse) {
            best = Some((fit, report));
        }
    }
    let restarts = attempts - 1;
    Ok(match best {
        Some((mut fit, report)) => {
            fit.restarts_used = restarts;
            Fitted { expr: expr.clone(), fit, report }
        }
        None => Fitted {
            expr: expr.clone(),
            fit: FitResult {
                params: cfg.init,
                mse: f64::INFINITY,
                iterations: 0,
                converged: false,
                restarts_used: restarts,
            },
            report: CheckReport::rejected("non-finite output"),
        },
    })
}
