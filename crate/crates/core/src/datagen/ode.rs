use crate::expr::{EvalGuard, ExprError, Expression, Program, MAX_PARAMS};

use super::DataError;

/// Samples of a second-order system `x' = v, v' = rhs(t, x, v)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// `rhs` evaluated at each sample.
    pub a: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn steps(t0: f64, t_end: f64, dt: f64) -> Result<usize, DataError> {
    if !(dt > 0.0 && dt.is_finite()) || !(t_end >= t0) {
        return Err(DataError::InvalidGrid(format!("need dt > 0 and t_end >= t0, got dt={dt}, span=({t0}, {t_end})")));
    }
    // tolerate representation error in span/dt
    Ok(((t_end - t0) / dt + 1e-9).floor() as usize)
}

fn checked(v: f64, step: usize) -> Result<f64, DataError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DataError::Integration { step, source: ExprError::NonFinite { row: step } })
    }
}

fn compile(rhs: &Expression, slots: &[&str]) -> Result<Program, DataError> {
    let guard = EvalGuard::default();
    if rhs.len() > guard.max_nodes {
        return Err(DataError::Integration {
            step: 0,
            source: ExprError::TooLarge { nodes: rhs.len(), max: guard.max_nodes },
        });
    }
    Program::compile(rhs, slots).map_err(|source| DataError::Integration { step: 0, source })
}

/// Fixed-step classical RK4 on `x' = v, v' = rhs(t, x, v)`.
///
/// Returns `floor(span/dt) + 1` samples starting at `t0`. `rhs` may use any
/// subset of `t`, `x`, `v`.
pub fn integrate_ode(
    rhs: &Expression,
    params: &[f64; MAX_PARAMS],
    x0: f64,
    v0: f64,
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory, DataError> {
    let (t0, t_end) = t_span;
    let n = steps(t0, t_end, dt)?;
    let prog = compile(rhs, &["t", "x", "v"])?;
    let mut stack = Vec::new();
    let mut f = |t: f64, x: f64, v: f64| prog.eval_point_with(&[t, x, v], params, &mut stack);

    let mut out = Trajectory {
        t: Vec::with_capacity(n + 1),
        x: Vec::with_capacity(n + 1),
        v: Vec::with_capacity(n + 1),
        a: Vec::with_capacity(n + 1),
    };
    let (mut x, mut v) = (x0, v0);
    for i in 0..=n {
        let t = t0 + i as f64 * dt;
        let a = checked(f(t, x, v), i)?;
        out.t.push(t);
        out.x.push(x);
        out.v.push(v);
        out.a.push(a);
        if i == n {
            break;
        }
        let h = dt;
        let (k1x, k1v) = (v, a);
        let (k2x, k2v) = (v + 0.5 * h * k1v, f(t + 0.5 * h, x + 0.5 * h * k1x, v + 0.5 * h * k1v));
        let (k3x, k3v) = (v + 0.5 * h * k2v, f(t + 0.5 * h, x + 0.5 * h * k2x, v + 0.5 * h * k2v));
        let (k4x, k4v) = (v + h * k3v, f(t + h, x + h * k3x, v + h * k3v));
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        checked(x, i + 1)?;
        checked(v, i + 1)?;
    }
    Ok(out)
}

/// RK4 on the scalar equation `state' = rhs(t, state)`. Returns `(t, state)`
/// samples.
pub fn integrate_scalar(
    rhs: &Expression,
    state: &str,
    params: &[f64; MAX_PARAMS],
    y0: f64,
    t_span: (f64, f64),
    dt: f64,
) -> Result<Vec<(f64, f64)>, DataError> {
    let (t0, t_end) = t_span;
    let n = steps(t0, t_end, dt)?;
    let prog = compile(rhs, &["t", state])?;
    let mut stack = Vec::new();
    let mut f = |t: f64, y: f64| prog.eval_point_with(&[t, y], params, &mut stack);
    let mut out = Vec::with_capacity(n + 1);
    let mut y = y0;
    for i in 0..=n {
        let t = t0 + i as f64 * dt;
        out.push((t, y));
        if i == n {
            break;
        }
        let k1 = checked(f(t, y), i)?;
        let k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1);
        let k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2);
        let k4 = f(t + dt, y + dt * k3);
        y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        checked(y, i + 1)?;
    }
    Ok(out)
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
pub fn find_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if !(flo.is_finite() && fhi.is_finite()) || flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || (hi - lo) * 0.5 < tol {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}
