//! Executable prior checks and per-system catalogs.
//!
//! A [`ConstraintSet`] is an ordered list of [`Check`]s. Each check probes
//! a candidate `f(vars; params)` on grids instantiated from training
//! statistics ([`DataStats`]) and reports a measured value against a
//! threshold. A candidate is valid when every check passes.
//!
//! Two modes exist. Pointwise mode demands the property at every probe.
//! Statistical mode, meant for noisy data, allows up to
//! [`STATISTICAL_VIOLATION_FRACTION`] of sign-type probes to disagree and
//! widens `value_at` tolerances by `2 * sigma / sqrt(n)`. Anything that
//! passes pointwise also passes statistically.

mod catalog;
mod probe;

use serde::{Deserialize, Serialize};

use crate::datagen::{integrate_ode, DataError, SystemId};
use crate::expr::{EvalGuard, ExprError, Expression, Program};
use crate::linalg::least_squares;

pub use catalog::{catalog, catalog_by_name};
pub use probe::{estimate_noise, Axis, DataStats, Grid};
use probe::{instantiate, Points};

pub const STATISTICAL_VIOLATION_FRACTION: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ConstraintError {
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error("data statistics lack {0}")]
    MissingStat(String),
    #[error("malformed catalog: {0}")]
    Catalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Pointwise,
    Statistical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Absolute,
    /// Multiplied by the largest absolute training target.
    TargetMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub value: f64,
    #[serde(default)]
    pub scale: Scale,
}

impl Tolerance {
    pub fn abs(value: f64) -> Self {
        Tolerance { value, scale: Scale::Absolute }
    }

    pub fn of_target(value: f64) -> Self {
        Tolerance { value, scale: Scale::TargetMax }
    }

    pub fn resolve(&self, stats: &DataStats) -> f64 {
        match self.scale {
            Scale::Absolute => self.value,
            Scale::TargetMax => self.value * stats.target_max_abs.max(f64::MIN_POSITIVE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
    NonNegative,
    NonPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Value(f64),
    Equilibrium,
}

/// Turns a sign test into an oriented one: the tested quantity becomes
/// `(f(p) - f(p | var = anchor)) * sign(p[var] - anchor)`, without the
/// subtraction when `subtract` is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub var: String,
    pub anchor: Anchor,
    #[serde(default = "yes")]
    pub subtract: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum AsymmetryForm {
    /// Displacements `+d` and `-d` from `anchor` must give responses of
    /// different magnitude.
    AboutAnchor { anchor: f64 },
    /// The response must fall to `level * peak` in a shorter distance above
    /// the peak than below it.
    SharperAbovePeak { level: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckKind {
    /// Output must vary along every `required` variable and stay flat along
    /// every `forbidden` one.
    Dependence {
        #[serde(default)]
        required: Vec<String>,
        #[serde(default)]
        forbidden: Vec<String>,
    },
    ValueAt {
        target: f64,
    },
    SignAt {
        sign: Sign,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<Reference>,
    },
    MonotoneOn {
        var: String,
        increasing: bool,
        /// Average over the other axes before testing.
        #[serde(default)]
        aggregate: bool,
    },
    /// Rises then falls along `var`.
    UnimodalOn {
        var: String,
    },
    /// `|f| <= tolerance` on the probes.
    BoundedOn,
    /// Best affine fit leaves relative residual above the tolerance.
    Nonlinearity,
    /// `|f(var = A_eq)| <= tolerance`.
    Equilibrium {
        var: String,
    },
    /// Integrates `x'' = f(t, x, v)` and bounds `max |x|` by the tolerance.
    BoundedTrajectory {
        x0: f64,
        v0: f64,
        t_end: f64,
        dt: f64,
    },
    Asymmetry {
        var: String,
        #[serde(flatten)]
        form: AsymmetryForm,
    },
    AllOf {
        parts: Vec<Check>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(flatten)]
    pub kind: CheckKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<Grid>,
    pub tolerance: Tolerance,
    #[serde(default)]
    pub mode: Mode,
}

impl Check {
    pub fn new(name: &str, kind: CheckKind, tolerance: Tolerance) -> Self {
        Check { name: name.to_string(), kind, probes: Vec::new(), tolerance, mode: Mode::Pointwise }
    }

    pub fn probe(mut self, grid: Grid) -> Self {
        self.probes.push(grid);
        self
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if let CheckKind::AllOf { parts } = &mut self.kind {
            for p in parts {
                p.set_mode(mode);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub system: SystemId,
    pub variables: Vec<String>,
    pub checks: Vec<Check>,
}

impl ConstraintSet {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        for c in &mut self.checks {
            c.set_mode(mode);
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConstraintError> {
        let cs: ConstraintSet = serde_json::from_str(text).map_err(|e| ConstraintError::Catalog(e.to_string()))?;
        if cs.checks.is_empty() {
            return Err(ConstraintError::Catalog("no checks".into()));
        }
        Ok(cs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// `None` when probing produced a non-finite value.
    pub measured: Option<f64>,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub valid: bool,
    pub per_check: Vec<CheckOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> usize {
        self.per_check.iter().filter(|c| c.passed).count()
    }

    fn from_outcomes(per_check: Vec<CheckOutcome>) -> Self {
        let failure_reason = per_check.iter().find(|c| !c.passed).map(|c| {
            let why = c.detail.clone().unwrap_or_else(|| match c.measured {
                Some(m) => format!("measured {m:.6e}, threshold {:.6e}", c.threshold),
                None => "non-finite output".into(),
            });
            format!("{}: {why}", c.name)
        });
        CheckReport { valid: per_check.iter().all(|c| c.passed), per_check, failure_reason }
    }

    /// Report for a candidate that cannot be probed at all.
    pub fn rejected(reason: impl Into<String>) -> Self {
        CheckReport { valid: false, per_check: Vec::new(), failure_reason: Some(reason.into()) }
    }
}

const NON_FINITE: &str = "non-finite output";

struct Ctx<'a> {
    expr: &'a Expression,
    prog: Program,
    params: &'a [f64],
    guard: EvalGuard,
    vars: &'a [String],
    stats: &'a DataStats,
}

type Probed<T> = Result<T, Failure>;

enum Failure {
    NonFinite,
    Setup(ConstraintError),
}

impl From<ConstraintError> for Failure {
    fn from(e: ConstraintError) -> Self {
        Failure::Setup(e)
    }
}

impl From<ExprError> for Failure {
    fn from(_: ExprError) -> Self {
        Failure::NonFinite
    }
}

impl Ctx<'_> {
    fn eval(&self, pts: &Points) -> Probed<Vec<f64>> {
        let cols: Vec<&[f64]> = pts.columns.iter().map(|c| c.as_slice()).collect();
        Ok(self.prog.eval_columns(&cols, pts.len(), self.params, &self.guard)?)
    }

    fn points(&self, grids: &[Grid], inner: Option<&str>) -> Probed<Vec<Points>> {
        if grids.is_empty() {
            return Ok(vec![instantiate(&Grid::new(), self.vars, self.stats, inner)?]);
        }
        grids.iter().map(|g| instantiate(g, self.vars, self.stats, inner).map_err(Failure::from)).collect()
    }

    fn var_index(&self, var: &str) -> Probed<usize> {
        self.vars
            .iter()
            .position(|v| v == var)
            .ok_or_else(|| ConstraintError::InvalidProbe(format!("unknown variable `{var}`")).into())
    }
}

fn allowed(mode: Mode) -> f64 {
    match mode {
        Mode::Pointwise => 0.0,
        Mode::Statistical => STATISTICAL_VIOLATION_FRACTION,
    }
}

fn outcome(check: &Check, passed: bool, measured: f64, threshold: f64) -> CheckOutcome {
    CheckOutcome { name: check.name.clone(), passed, measured: Some(measured), threshold, detail: None }
}

fn run(check: &Check, ctx: &Ctx<'_>) -> Result<CheckOutcome, ConstraintError> {
    let tol = check.tolerance.resolve(ctx.stats);
    match evaluate_check(check, ctx, tol) {
        Ok(o) => Ok(o),
        Err(Failure::NonFinite) => Ok(CheckOutcome {
            name: check.name.clone(),
            passed: false,
            measured: None,
            threshold: tol,
            detail: Some(NON_FINITE.into()),
        }),
        Err(Failure::Setup(e)) => Err(e),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| f64::max(m, x.abs()))
}

fn evaluate_check(check: &Check, ctx: &Ctx<'_>, tol: f64) -> Probed<CheckOutcome> {
    let frac = allowed(check.mode);
    match &check.kind {
        CheckKind::Dependence { required, forbidden } => {
            let mut worst: Option<(String, f64, bool)> = None;
            for (var, must) in required.iter().map(|v| (v, true)).chain(forbidden.iter().map(|v| (v, false))) {
                ctx.var_index(var)?;
                let mut spread: f64 = 0.0;
                let mut scale: f64 = 0.0;
                for pts in ctx.points(&check.probes, Some(var))? {
                    let f = ctx.eval(&pts)?;
                    scale = scale.max(max_abs(&f));
                    for line in f.chunks(pts.line) {
                        let lo = line.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = line.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        spread = spread.max(hi - lo);
                    }
                }
                let effect = if scale > 0.0 { spread / scale } else { 0.0 };
                let ok = if must { effect > tol } else { effect <= tol };
                if !ok {
                    let mut o = outcome(check, false, effect, tol);
                    o.detail = Some(if must {
                        format!("output does not depend on `{var}`")
                    } else {
                        format!("output depends on `{var}`")
                    });
                    return Ok(o);
                }
                let margin = if must { effect } else { -effect };
                if worst.as_ref().is_none_or(|w| margin < w.1) {
                    worst = Some((var.clone(), margin, must));
                }
            }
            let measured = worst.map_or(0.0, |w| w.1.abs());
            Ok(outcome(check, true, measured, tol))
        }
        CheckKind::ValueAt { target } => {
            let mut resid = Vec::new();
            for pts in ctx.points(&check.probes, None)? {
                resid.extend(ctx.eval(&pts)?.into_iter().map(|f| f - target));
            }
            let n = resid.len() as f64;
            let pointwise = max_abs(&resid);
            match check.mode {
                Mode::Pointwise => Ok(outcome(check, pointwise <= tol, pointwise, tol)),
                Mode::Statistical => {
                    let mean = resid.iter().sum::<f64>() / n;
                    let thr = tol + 2.0 * ctx.stats.noise_sigma / n.sqrt();
                    // a pointwise pass is always a statistical pass
                    let ok = mean.abs() <= thr || pointwise <= tol;
                    Ok(outcome(check, ok, mean.abs(), thr))
                }
            }
        }
        CheckKind::SignAt { sign, reference } => {
            let mut total = 0usize;
            let mut bad = 0usize;
            for pts in ctx.points(&check.probes, None)? {
                let f = ctx.eval(&pts)?;
                let q: Vec<f64> = match reference {
                    None => f,
                    Some(r) => {
                        let vi = ctx.var_index(&r.var)?;
                        let anchor = match r.anchor {
                            Anchor::Value(a) => a,
                            Anchor::Equilibrium => ctx.stats.equilibrium()?,
                        };
                        let base = if r.subtract {
                            let mut at = pts.clone();
                            at.columns[vi].iter_mut().for_each(|x| *x = anchor);
                            ctx.eval(&at)?
                        } else {
                            vec![0.0; f.len()]
                        };
                        f.iter()
                            .zip(&base)
                            .zip(&pts.columns[vi])
                            .filter(|(_, x)| **x != anchor)
                            .map(|((f, b), x)| (f - b) * (x - anchor).signum())
                            .collect()
                    }
                };
                total += q.len();
                bad += q
                    .iter()
                    .filter(|&&q| match sign {
                        Sign::Positive => q <= 0.0,
                        Sign::Negative => q >= 0.0,
                        Sign::NonNegative => q < -tol,
                        Sign::NonPositive => q > tol,
                    })
                    .count();
            }
            let fraction = if total == 0 { 0.0 } else { bad as f64 / total as f64 };
            Ok(outcome(check, fraction <= frac, fraction, frac))
        }
        CheckKind::MonotoneOn { var, increasing, aggregate } => {
            ctx.var_index(var)?;
            let (mut total, mut bad) = (0usize, 0usize);
            for pts in ctx.points(&check.probes, Some(var))? {
                let f = ctx.eval(&pts)?;
                let eps = 1e-12 * max_abs(&f).max(f64::MIN_POSITIVE);
                let lines: Vec<Vec<f64>> = if *aggregate {
                    let nl = (f.len() / pts.line) as f64;
                    let mut mean = vec![0.0; pts.line];
                    for line in f.chunks(pts.line) {
                        for (m, x) in mean.iter_mut().zip(line) {
                            *m += x / nl;
                        }
                    }
                    vec![mean]
                } else {
                    f.chunks(pts.line).map(|c| c.to_vec()).collect()
                };
                for line in lines {
                    for w in line.windows(2) {
                        let d = w[1] - w[0];
                        total += 1;
                        if (*increasing && d < -eps) || (!*increasing && d > eps) {
                            bad += 1;
                        }
                    }
                }
            }
            let fraction = if total == 0 { 0.0 } else { bad as f64 / total as f64 };
            Ok(outcome(check, total > 0 && fraction <= frac, fraction, frac))
        }
        CheckKind::UnimodalOn { var } => {
            ctx.var_index(var)?;
            let mut worst: f64 = 0.0;
            for pts in ctx.points(&check.probes, Some(var))? {
                let f = ctx.eval(&pts)?;
                let eps = 1e-12 * max_abs(&f).max(f64::MIN_POSITIVE);
                for line in f.chunks(pts.line) {
                    worst = worst.max(unimodal_violation(line, eps));
                }
            }
            Ok(outcome(check, worst <= frac, worst, frac))
        }
        CheckKind::BoundedOn => {
            let mut m: f64 = 0.0;
            for pts in ctx.points(&check.probes, None)? {
                m = m.max(max_abs(&ctx.eval(&pts)?));
            }
            Ok(outcome(check, m <= tol, m, tol))
        }
        CheckKind::Nonlinearity => {
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut y = Vec::new();
            for pts in ctx.points(&check.probes, None)? {
                let f = ctx.eval(&pts)?;
                for i in 0..f.len() {
                    rows.push(pts.columns.iter().map(|c| c[i]).collect());
                }
                y.extend(f);
            }
            let rel = affine_residual(&rows, &y);
            Ok(outcome(check, rel > tol, rel, tol))
        }
        CheckKind::Equilibrium { var } => {
            let grid = Grid::new().with(var, Axis::Equilibrium);
            let pts = instantiate(&grid, ctx.vars, ctx.stats, None)?;
            let m = max_abs(&ctx.eval(&pts)?);
            let thr = match check.mode {
                Mode::Pointwise => tol,
                Mode::Statistical => tol + 2.0 * ctx.stats.noise_sigma,
            };
            Ok(outcome(check, m <= thr, m, thr))
        }
        CheckKind::BoundedTrajectory { x0, v0, t_end, dt } => {
            let mut params = [0.0; crate::MAX_PARAMS];
            params[..ctx.params.len().min(crate::MAX_PARAMS)]
                .copy_from_slice(&ctx.params[..ctx.params.len().min(crate::MAX_PARAMS)]);
            match integrate_ode(ctx.expr, &params, *x0, *v0, (0.0, *t_end), *dt) {
                Ok(tr) => {
                    let m = max_abs(&tr.x);
                    Ok(outcome(check, m <= tol, m, tol))
                }
                Err(DataError::Integration { .. }) => Err(Failure::NonFinite),
                Err(e) => Err(ConstraintError::InvalidProbe(e.to_string()).into()),
            }
        }
        CheckKind::Asymmetry { var, form } => {
            let vi = ctx.var_index(var)?;
            match form {
                AsymmetryForm::AboutAnchor { anchor } => {
                    let mut best: f64 = 0.0;
                    for pts in ctx.points(&check.probes, None)? {
                        let shifted = |off: f64| {
                            let mut p = pts.clone();
                            for (x, d) in p.columns[vi].iter_mut().zip(&pts.columns[vi]) {
                                *x = anchor + off * (d - anchor).abs();
                            }
                            p
                        };
                        let base = ctx.eval(&shifted(0.0))?;
                        let plus = ctx.eval(&shifted(1.0))?;
                        let minus = ctx.eval(&shifted(-1.0))?;
                        for i in 0..base.len() {
                            let (gp, gm) = ((plus[i] - base[i]).abs(), (minus[i] - base[i]).abs());
                            let denom = gp.max(gm);
                            if denom > 0.0 {
                                best = best.max((gp - gm).abs() / denom);
                            }
                        }
                    }
                    Ok(outcome(check, best > tol, best, tol))
                }
                AsymmetryForm::SharperAbovePeak { level } => {
                    let mut worst: f64 = 0.0;
                    for pts in ctx.points(&check.probes, Some(var))? {
                        let f = ctx.eval(&pts)?;
                        for (k, line) in f.chunks(pts.line).enumerate() {
                            let xs = &pts.columns[vi][k * pts.line..(k + 1) * pts.line];
                            worst = worst.max(peak_width_ratio(xs, line, *level));
                        }
                    }
                    let thr = 1.0 - tol;
                    Ok(outcome(check, worst < thr, worst, thr))
                }
            }
        }
        CheckKind::AllOf { parts } => {
            let mut last = None;
            for part in parts {
                let o = evaluate_check(part, ctx, part.tolerance.resolve(ctx.stats))?;
                if !o.passed {
                    let mut o = o;
                    o.detail = Some(format!("{} failed", part.name));
                    o.name = check.name.clone();
                    return Ok(o);
                }
                last = Some(o);
            }
            let mut o = last.ok_or_else(|| ConstraintError::Catalog("empty all_of".into()))?;
            o.name = check.name.clone();
            Ok(o)
        }
    }
}

/// Smallest fraction of finite differences that disagree with a single
/// rise-then-fall pattern. A curve with no rise or no fall scores 1.
fn unimodal_violation(line: &[f64], eps: f64) -> f64 {
    let d: Vec<f64> = line.windows(2).map(|w| w[1] - w[0]).filter(|d| d.abs() > eps).collect();
    if !(d.iter().any(|x| *x > 0.0) && d.iter().any(|x| *x < 0.0)) {
        return 1.0;
    }
    let n = d.len();
    let mut best = usize::MAX;
    // split k: d[..k] should rise, d[k..] should fall; both parts nonempty
    let mut neg_before = 0;
    let mut pos_after = d.iter().filter(|x| **x > 0.0).count();
    for k in 0..=n {
        if k > 0 {
            if d[k - 1] < 0.0 {
                neg_before += 1;
            } else {
                pos_after -= 1;
            }
        }
        if k == 0 || k == n {
            continue;
        }
        best = best.min(neg_before + pos_after);
    }
    if best == usize::MAX {
        1.0
    } else {
        best as f64 / n as f64
    }
}

/// Distance from the peak down to `level * peak` above the peak, divided by
/// the same distance below it. Infinite when the response never falls that
/// far above the peak.
fn peak_width_ratio(xs: &[f64], f: &[f64], level: f64) -> f64 {
    let Some(ip) = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])) else {
        return f64::INFINITY;
    };
    let peak = f[ip];
    if !(peak > 0.0) {
        return f64::INFINITY;
    }
    let cut = level * peak;
    let crossing = |range: &mut dyn Iterator<Item = usize>, step: isize| -> Option<f64> {
        for i in range {
            let j = (i as isize - step) as usize;
            if f[i] <= cut {
                let t = (f[j] - cut) / (f[j] - f[i]);
                return Some((xs[j] + t * (xs[i] - xs[j]) - xs[ip]).abs());
            }
        }
        None
    };
    let high = crossing(&mut (ip + 1..f.len()), 1);
    let low = crossing(&mut (0..ip).rev(), -1);
    match (high, low) {
        (None, _) => f64::INFINITY,
        (Some(_), None) => 0.0,
        (Some(h), Some(l)) if l > 0.0 => h / l,
        _ => f64::INFINITY,
    }
}

/// `||r|| / ||y - mean(y)||` for the least-squares affine fit; 0 when `y` is
/// constant.
fn affine_residual(rows: &[Vec<f64>], y: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let n = y.len();
    if n == 0 {
        return 0.0;
    }
    let k = rows[0].len();
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let yv = DVector::from_column_slice(y);
    let mean = yv.mean();
    let spread = yv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
    if spread <= f64::MIN_POSITIVE {
        return 0.0;
    }
    match least_squares(&design, &yv) {
        Some((_, r)) => r.norm() / spread,
        None => 0.0,
    }
}

/// Runs every check of `cs` on `expr` at `params`.
///
/// Candidates that reference variables outside the system, or exceed the
/// evaluation size limit, are rejected with a report rather than an error.
/// Errors signal a malformed catalog or missing statistics.
pub fn check(
    expr: &Expression,
    params: &[f64],
    cs: &ConstraintSet,
    stats: &DataStats,
) -> Result<CheckReport, ConstraintError> {
    let guard = EvalGuard::default();
    if expr.len() > guard.max_nodes {
        return Ok(CheckReport::rejected(format!("expression has {} nodes, limit {}", expr.len(), guard.max_nodes)));
    }
    let slots: Vec<&str> = cs.variables.iter().map(|s| s.as_str()).collect();
    let prog = match Program::compile(expr, &slots) {
        Ok(p) => p,
        Err(e) => return Ok(CheckReport::rejected(format!("uses a variable outside the system: {e}"))),
    };
    let ctx = Ctx { expr, prog, params, guard, vars: &cs.variables, stats };
    let per_check = cs.checks.iter().map(|c| run(c, &ctx)).collect::<Result<Vec<_>, _>>()?;
    Ok(CheckReport::from_outcomes(per_check))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unimodal_violation_counts_best_split() {
        assert_eq!(unimodal_violation(&[0.0, 1.0, 2.0, 1.0, 0.0], 0.0), 0.0);
        assert_eq!(unimodal_violation(&[0.0, 1.0, 2.0, 3.0], 0.0), 1.0);
        assert_eq!(unimodal_violation(&[3.0, 2.0, 1.0], 0.0), 1.0);
        // one dip on the rising side
        let v = unimodal_violation(&[0.0, 1.0, 0.5, 2.0, 3.0, 1.0], 0.0);
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn peak_width_ratio_on_triangle() {
        // rises over 4 units, falls over 2
        let xs: Vec<f64> = (0..=60).map(|i| i as f64 * 0.1).collect();
        let f: Vec<f64> =
            xs.iter().map(|&x| if x <= 4.0 { x / 4.0 } else { (1.0 - (x - 4.0) / 2.0).max(0.0) }).collect();
        let r = peak_width_ratio(&xs, &f, 0.5);
        assert!((r - 0.5).abs() < 1e-9, "{r}");
        let flipped: Vec<f64> = f.iter().rev().copied().collect();
        assert!((peak_width_ratio(&xs, &flipped, 0.5) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn affine_residual_separates_lines_from_curves() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let lin: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] - r[1] + 1.0).collect();
        assert!(affine_residual(&rows, &lin) < 1e-10);
        let quad: Vec<f64> = rows.iter().map(|r| r[0] * r[0]).collect();
        assert!(affine_residual(&rows, &quad) > 0.05);
        assert_eq!(affine_residual(&rows, &[3.0; 20]), 0.0);
    }
}
