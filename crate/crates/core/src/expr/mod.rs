//! Expression trees for candidate equations.
//!
//! Skeletons are written in a small infix DSL (`p0*sin(t) - p1*v^3`) and
//! held as immutable trees over named variables, real constants and the
//! parameter slots `p0`..`p9`.

mod eval;
mod parse;
mod print;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use eval::{evaluate, Bindings, EvalGuard, Program};
pub use parse::parse;

/// Number of parameter slots a skeleton may reference.
pub const MAX_PARAMS: usize = 10;

/// Parameter vector shared by every skeleton.
pub type Params = [f64; MAX_PARAMS];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("column `{name}` has length {got}, expected {expected}")]
    LengthMismatch { name: String, got: usize, expected: usize },
    #[error("empty table")]
    EmptyTable,
    #[error("non-finite output at row {row}")]
    NonFinite { row: usize },
    #[error("expression has {nodes} nodes, limit is {max}")]
    TooLarge { nodes: usize, max: usize },
    #[error("evaluation exceeded {0:?}")]
    Timeout(std::time::Duration),
}

impl ExprError {
    /// True for failures that the evaluation guard raises (as opposed to
    /// malformed inputs).
    pub fn is_guard_violation(&self) -> bool {
        matches!(self, ExprError::NonFinite { .. } | ExprError::TooLarge { .. } | ExprError::Timeout(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
    /// Heaviside step with `step(0) = 1`.
    Step,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 9] = [
        UnaryOp::Neg,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Tanh,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sqrt,
        UnaryOp::Abs,
        UnaryOp::Step,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
            UnaryOp::Step => "step",
        }
    }

    pub fn from_name(name: &str) -> Option<UnaryOp> {
        UnaryOp::ALL.into_iter().find(|op| op.name() == name)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Step => {
                if x.is_nan() {
                    f64::NAN
                } else if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
    Min,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 7] =
        [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Pow, BinaryOp::Max, BinaryOp::Min];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Pow => "pow",
            BinaryOp::Max => "max",
            BinaryOp::Min => "min",
        }
    }

    /// `max` and `min` propagate NaN so that a bad operand is never masked.
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => match eval::small_int(b) {
                Some(k) => a.powi(k),
                None => a.powf(b),
            },
            BinaryOp::Max => {
                if a.is_nan() || b.is_nan() {
                    f64::NAN
                } else {
                    a.max(b)
                }
            }
            BinaryOp::Min => {
                if a.is_nan() || b.is_nan() {
                    f64::NAN
                } else {
                    a.min(b)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Var(Arc<str>),
    Const(f64),
    Param(u8),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

impl Node {
    pub fn var(name: &str) -> Node {
        Node::Var(Arc::from(name))
    }

    pub fn unary(op: UnaryOp, child: Node) -> Node {
        Node::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, left: Node, right: Node) -> Node {
        Node::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn len(&self) -> usize {
        match self {
            Node::Var(_) | Node::Const(_) | Node::Param(_) => 1,
            Node::Unary(_, c) => 1 + c.len(),
            Node::Binary(_, l, r) => 1 + l.len() + r.len(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Var(_) | Node::Const(_) | Node::Param(_) => 1,
            Node::Unary(_, c) => 1 + c.depth(),
            Node::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Pre-order walk.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        match self {
            Node::Unary(_, c) => c.walk(f),
            Node::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            _ => {}
        }
    }

    /// Subtree at pre-order index `idx`.
    pub fn subtree(&self, idx: usize) -> Option<&Node> {
        let mut i = 0;
        let mut found = None;
        self.walk(&mut |n| {
            if i == idx {
                found = Some(n);
            }
            i += 1;
        });
        found
    }

    /// Copy of `self` with the subtree at pre-order index `idx` replaced.
    pub fn replace_subtree(&self, idx: usize, with: &Node) -> Node {
        fn go(n: &Node, idx: usize, counter: &mut usize, with: &Node) -> Node {
            let here = *counter;
            *counter += 1;
            if here == idx {
                // still advance the counter past the replaced subtree
                *counter += n.len() - 1;
                return with.clone();
            }
            match n {
                Node::Unary(op, c) => Node::unary(*op, go(c, idx, counter, with)),
                Node::Binary(op, l, r) => {
                    let l2 = go(l, idx, counter, with);
                    let r2 = go(r, idx, counter, with);
                    Node::binary(*op, l2, r2)
                }
                leaf => leaf.clone(),
            }
        }
        let mut counter = 0;
        go(self, idx, &mut counter, with)
    }
}

/// An immutable expression tree. Cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Arc<Node>,
}

impl Expression {
    pub fn new(root: Node) -> Self {
        Expression { root: Arc::new(root) }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Node count.
    pub fn len(&self) -> usize {
        self.root.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.root.walk(&mut |n| {
            if let Node::Var(name) = n {
                out.insert(name.to_string());
            }
        });
        out
    }

    /// Parameter slots referenced by the tree.
    pub fn params_used(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.root.walk(&mut |n| {
            if let Node::Param(i) = n {
                out.insert(*i as usize);
            }
        });
        out
    }

    /// Canonical infix form; `parse(serialize(e)) == e`.
    pub fn serialize(&self) -> String {
        print::serialize(&self.root)
    }

    /// Relabels parameter slots in order of first appearance (`p0`, `p1`, ...).
    /// Slots beyond the tenth distinct parameter fold back onto existing ones.
    pub fn renumber_params(&self) -> Expression {
        let mut map: Vec<Option<u8>> = vec![None; MAX_PARAMS];
        let mut next = 0u8;
        fn go(n: &Node, map: &mut Vec<Option<u8>>, next: &mut u8) -> Node {
            match n {
                Node::Param(i) => {
                    let slot = &mut map[*i as usize];
                    let idx = match slot {
                        Some(j) => *j,
                        None => {
                            let j = *next % MAX_PARAMS as u8;
                            *next = next.saturating_add(1);
                            *slot = Some(j);
                            j
                        }
                    };
                    Node::Param(idx)
                }
                Node::Unary(op, c) => Node::unary(*op, go(c, map, next)),
                Node::Binary(op, l, r) => {
                    let l2 = go(l, map, next);
                    let r2 = go(r, map, next);
                    Node::binary(*op, l2, r2)
                }
                leaf => leaf.clone(),
            }
        }
        Expression::new(go(&self.root, &mut map, &mut next))
    }
}

impl From<Node> for Expression {
    fn from(n: Node) -> Self {
        Expression::new(n)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl std::str::FromStr for Expression {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Serialize for Expression {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&Expression::serialize(self))
    }
}

impl<'de> Deserialize<'de> for Expression {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }
}
