use std::time::{Duration, Instant};

use super::{BinaryOp, ExprError, Expression, Node, UnaryOp};

/// Limits applied to every evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGuard {
    pub max_nodes: usize,
    pub timeout: Duration,
}

impl Default for EvalGuard {
    fn default() -> Self {
        EvalGuard { max_nodes: 200, timeout: Duration::from_secs(30) }
    }
}

/// Named columns of equal length.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    cols: Vec<(&'a str, &'a [f64])>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Bindings { cols: Vec::new() }
    }

    pub fn with(mut self, name: &'a str, col: &'a [f64]) -> Self {
        self.insert(name, col);
        self
    }

    pub fn insert(&mut self, name: &'a str, col: &'a [f64]) {
        if let Some(slot) = self.cols.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = col;
        } else {
            self.cols.push((name, col));
        }
    }

    pub fn get(&self, name: &str) -> Option<&'a [f64]> {
        self.cols.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
    }

    pub fn names(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.cols.iter().map(|(n, _)| *n)
    }

    /// Common column length, or an error if columns disagree.
    pub fn rows(&self) -> Result<usize, ExprError> {
        let Some((_, first)) = self.cols.first() else {
            return Err(ExprError::EmptyTable);
        };
        let n = first.len();
        for (name, c) in &self.cols {
            if c.len() != n {
                return Err(ExprError::LengthMismatch { name: name.to_string(), got: c.len(), expected: n });
            }
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Var(usize),
    Const(f64),
    Param(usize),
    Unary(UnaryOp),
    Binary(BinaryOp),
}

/// Postfix form of an expression with variables resolved to column slots.
///
/// Compiling once and running many times is what the optimizer and the
/// constraint probes do; [`evaluate`] is the one-shot convenience.
#[derive(Debug, Clone)]
pub struct Program {
    code: Vec<Instr>,
    max_stack: usize,
    nodes: usize,
}

impl Program {
    /// Resolves every variable against `slots`; the position of a name in
    /// `slots` is the column index the program reads.
    pub fn compile(expr: &Expression, slots: &[&str]) -> Result<Program, ExprError> {
        let mut code = Vec::with_capacity(expr.len());
        fn emit(n: &Node, slots: &[&str], code: &mut Vec<Instr>) -> Result<(), ExprError> {
            match n {
                Node::Var(name) => {
                    let idx = slots
                        .iter()
                        .position(|s| **s == **name)
                        .ok_or_else(|| ExprError::UnboundVariable(name.to_string()))?;
                    code.push(Instr::Var(idx));
                }
                Node::Const(c) => code.push(Instr::Const(*c)),
                Node::Param(i) => code.push(Instr::Param(*i as usize)),
                Node::Unary(op, c) => {
                    emit(c, slots, code)?;
                    code.push(Instr::Unary(*op));
                }
                Node::Binary(op, l, r) => {
                    emit(l, slots, code)?;
                    emit(r, slots, code)?;
                    code.push(Instr::Binary(*op));
                }
            }
            Ok(())
        }
        emit(expr.root(), slots, &mut code)?;
        let mut depth = 0usize;
        let mut max_stack = 0usize;
        for ins in &code {
            match ins {
                Instr::Var(_) | Instr::Const(_) | Instr::Param(_) => depth += 1,
                Instr::Unary(_) => {}
                Instr::Binary(_) => depth -= 1,
            }
            max_stack = max_stack.max(depth);
        }
        Ok(Program { code, max_stack, nodes: expr.len() })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Evaluates at a single point. May return a non-finite value; callers
    /// decide what that means.
    pub fn eval_point(&self, point: &[f64], params: &[f64]) -> f64 {
        let mut stack = Vec::with_capacity(self.max_stack);
        self.eval_point_with(point, params, &mut stack)
    }

    pub fn eval_point_with(&self, point: &[f64], params: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for ins in &self.code {
            match *ins {
                Instr::Var(i) => stack.push(point[i]),
                Instr::Const(c) => stack.push(c),
                Instr::Param(i) => stack.push(params[i]),
                Instr::Unary(op) => {
                    let top = stack.last_mut().expect("stack underflow");
                    *top = op.apply(*top);
                }
                Instr::Binary(op) => {
                    let b = stack.pop().expect("stack underflow");
                    let a = stack.last_mut().expect("stack underflow");
                    *a = op.apply(*a, b);
                }
            }
        }
        stack.pop().unwrap_or(f64::NAN)
    }

    /// Vectorised evaluation over `n` rows, checking the guard's deadline
    /// between instructions and rejecting any non-finite output.
    pub fn eval_columns(
        &self,
        cols: &[&[f64]],
        n: usize,
        params: &[f64],
        guard: &EvalGuard,
    ) -> Result<Vec<f64>, ExprError> {
        if self.nodes > guard.max_nodes {
            return Err(ExprError::TooLarge { nodes: self.nodes, max: guard.max_nodes });
        }
        let start = Instant::now();
        let mut stack: Vec<Val> = Vec::with_capacity(self.max_stack);
        let mut spare: Vec<Vec<f64>> = Vec::new();
        for ins in &self.code {
            if start.elapsed() > guard.timeout {
                return Err(ExprError::Timeout(guard.timeout));
            }
            match *ins {
                Instr::Var(i) => {
                    let mut buf = spare.pop().unwrap_or_else(|| Vec::with_capacity(n));
                    buf.clear();
                    buf.extend_from_slice(&cols[i][..n]);
                    stack.push(Val::Col(buf));
                }
                Instr::Const(c) => stack.push(Val::Scalar(c)),
                Instr::Param(i) => stack.push(Val::Scalar(params[i])),
                Instr::Unary(op) => match stack.last_mut().expect("stack underflow") {
                    Val::Scalar(x) => *x = op.apply(*x),
                    Val::Col(c) => unary_in_place(op, c),
                },
                Instr::Binary(op) => {
                    let b = stack.pop().expect("stack underflow");
                    let a = stack.pop().expect("stack underflow");
                    let v = match (a, b) {
                        (Val::Scalar(x), Val::Scalar(y)) => Val::Scalar(op.apply(x, y)),
                        (Val::Col(mut x), Val::Scalar(y)) => {
                            binary_col_scalar(op, &mut x, y);
                            Val::Col(x)
                        }
                        (Val::Scalar(x), Val::Col(mut y)) => {
                            binary_scalar_col(op, x, &mut y);
                            Val::Col(y)
                        }
                        (Val::Col(mut x), Val::Col(y)) => {
                            binary_col_col(op, &mut x, &y);
                            spare.push(y);
                            Val::Col(x)
                        }
                    };
                    stack.push(v);
                }
            }
        }
        let out = match stack.pop() {
            Some(Val::Col(c)) => c,
            Some(Val::Scalar(x)) => vec![x; n],
            None => Vec::new(),
        };
        if let Some(row) = out.iter().position(|v| !v.is_finite()) {
            return Err(ExprError::NonFinite { row });
        }
        Ok(out)
    }
}

/// A stack entry: row-invariant values stay scalar.
enum Val {
    Scalar(f64),
    Col(Vec<f64>),
}

fn unary_in_place(op: UnaryOp, c: &mut [f64]) {
    macro_rules! each {
        ($f:expr) => {
            for x in c.iter_mut() {
                *x = $f(*x);
            }
        };
    }
    match op {
        UnaryOp::Neg => each!(|x: f64| -x),
        UnaryOp::Sin => each!(f64::sin),
        UnaryOp::Cos => each!(f64::cos),
        UnaryOp::Tanh => each!(f64::tanh),
        UnaryOp::Exp => each!(f64::exp),
        UnaryOp::Log => each!(f64::ln),
        UnaryOp::Sqrt => each!(f64::sqrt),
        UnaryOp::Abs => each!(f64::abs),
        UnaryOp::Step => each!(|x| UnaryOp::Step.apply(x)),
    }
}

macro_rules! dispatch {
    ($op:expr, $zip:ident) => {
        match $op {
            BinaryOp::Add => $zip!(|a: f64, b: f64| a + b),
            BinaryOp::Sub => $zip!(|a: f64, b: f64| a - b),
            BinaryOp::Mul => $zip!(|a: f64, b: f64| a * b),
            BinaryOp::Div => $zip!(|a: f64, b: f64| a / b),
            op => $zip!(|a, b| op.apply(a, b)),
        }
    };
}

fn binary_col_scalar(op: BinaryOp, a: &mut [f64], b: f64) {
    if op == BinaryOp::Pow {
        if let Some(k) = small_int(b) {
            for x in a.iter_mut() {
                *x = x.powi(k);
            }
            return;
        }
    }
    macro_rules! zip {
        ($f:expr) => {
            for x in a.iter_mut() {
                *x = $f(*x, b);
            }
        };
    }
    dispatch!(op, zip)
}

fn binary_scalar_col(op: BinaryOp, a: f64, b: &mut [f64]) {
    macro_rules! zip {
        ($f:expr) => {
            for y in b.iter_mut() {
                *y = $f(a, *y);
            }
        };
    }
    dispatch!(op, zip)
}

fn binary_col_col(op: BinaryOp, a: &mut [f64], b: &[f64]) {
    macro_rules! zip {
        ($f:expr) => {
            for (x, y) in a.iter_mut().zip(b) {
                *x = $f(*x, *y);
            }
        };
    }
    dispatch!(op, zip)
}

/// Integral exponents small enough for exact repeated multiplication.
#[inline]
pub(crate) fn small_int(b: f64) -> Option<i32> {
    (b.fract() == 0.0 && b.abs() <= 16.0).then_some(b as i32)
}

/// Evaluates `expr` row-wise over `table` with the given parameters.
///
/// Every free variable must be bound and all columns must share a length of
/// at least one. Any non-finite output is a guard violation.
pub fn evaluate(
    expr: &Expression,
    table: &Bindings<'_>,
    params: &[f64],
    guard: &EvalGuard,
) -> Result<Vec<f64>, ExprError> {
    if expr.len() > guard.max_nodes {
        return Err(ExprError::TooLarge { nodes: expr.len(), max: guard.max_nodes });
    }
    let vars = expr.free_vars();
    let mut slots: Vec<&str> = Vec::with_capacity(vars.len());
    let mut cols: Vec<&[f64]> = Vec::with_capacity(vars.len());
    for v in &vars {
        let col = table.get(v).ok_or_else(|| ExprError::UnboundVariable(v.clone()))?;
        slots.push(v.as_str());
        cols.push(col);
    }
    let n = table.rows()?;
    if n == 0 {
        return Err(ExprError::EmptyTable);
    }
    let prog = Program::compile(expr, &slots)?;
    prog.eval_columns(&cols, n, params, guard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn p(vals: &[f64]) -> [f64; 10] {
        let mut out = [0.0; 10];
        out[..vals.len()].copy_from_slice(vals);
        out
    }

    #[test]
    fn linear_map() {
        let e = parse("p0*x").unwrap();
        let x = [1.0, 2.0, 3.0];
        let t = Bindings::new().with("x", &x);
        let y = evaluate(&e, &t, &p(&[2.0]), &EvalGuard::default()).unwrap();
        assert_eq!(y, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_of_zero_is_guard_violation() {
        let e = parse("log(x)").unwrap();
        let x = [0.0];
        let t = Bindings::new().with("x", &x);
        let err = evaluate(&e, &t, &p(&[]), &EvalGuard::default()).unwrap_err();
        assert_eq!(err, ExprError::NonFinite { row: 0 });
        assert!(err.is_guard_violation());
    }

    #[test]
    fn oscillator_two_rhs_at_quarter_period() {
        let e = parse("0.3*sin(t) - 0.5*v^3 - x*v - 5.0*x*exp(0.5*x)").unwrap();
        let (t, x, v) = ([std::f64::consts::FRAC_PI_2], [0.0], [0.0]);
        let b = Bindings::new().with("t", &t).with("x", &x).with("v", &v);
        let y = evaluate(&e, &b, &p(&[]), &EvalGuard::default()).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn negative_base_fractional_power_is_rejected() {
        let e = parse("x^0.5").unwrap();
        let x = [-1.0];
        let b = Bindings::new().with("x", &x);
        assert!(evaluate(&e, &b, &p(&[]), &EvalGuard::default()).is_err());
        // integer exponents of negative bases are fine
        let e = parse("x^3").unwrap();
        assert_eq!(evaluate(&e, &b, &p(&[]), &EvalGuard::default()).unwrap(), vec![-1.0]);
    }

    #[test]
    fn unbound_and_mismatched_inputs() {
        let e = parse("x + y").unwrap();
        let x = [1.0, 2.0];
        let y = [1.0];
        let only_x = Bindings::new().with("x", &x);
        assert_eq!(evaluate(&e, &only_x, &p(&[]), &EvalGuard::default()), Err(ExprError::UnboundVariable("y".into())));
        let both = Bindings::new().with("x", &x).with("y", &y);
        assert!(matches!(evaluate(&e, &both, &p(&[]), &EvalGuard::default()), Err(ExprError::LengthMismatch { .. })));
    }

    #[test]
    fn size_and_time_limits() {
        let e = parse("x + x + x").unwrap();
        let x = [1.0];
        let b = Bindings::new().with("x", &x);
        let small = EvalGuard { max_nodes: 3, ..EvalGuard::default() };
        assert!(matches!(evaluate(&e, &b, &p(&[]), &small), Err(ExprError::TooLarge { nodes: 5, max: 3 })));
        let instant = EvalGuard { timeout: Duration::ZERO, ..EvalGuard::default() };
        std::thread::sleep(Duration::from_millis(1));
        assert!(matches!(evaluate(&e, &b, &p(&[]), &instant), Err(ExprError::Timeout(_))));
    }

    #[test]
    fn point_and_column_evaluation_agree() {
        let e = parse("max(p0*(1 - p1*T), p2) + step(T - 2)*tanh(T)").unwrap();
        let temps: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let prm = p(&[0.8, 0.4, 0.25]);
        let prog = Program::compile(&e, &["T"]).unwrap();
        let cols = prog.eval_columns(&[&temps], temps.len(), &prm, &EvalGuard::default()).unwrap();
        for (i, t) in temps.iter().enumerate() {
            assert_eq!(prog.eval_point(&[*t], &prm).to_bits(), cols[i].to_bits());
        }
    }
}
