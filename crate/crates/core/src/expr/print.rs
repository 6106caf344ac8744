use super::{BinaryOp, Node, UnaryOp};

// Precedence levels used by the printer. Negative literals print like a
// prefix minus, so they share its level.
const ADD: u8 = 1;
const MUL: u8 = 2;
const PREFIX: u8 = 3;
const POW: u8 = 4;
const ATOM: u8 = 5;

fn prec(n: &Node) -> u8 {
    match n {
        Node::Const(c) if c.is_sign_negative() => PREFIX,
        Node::Var(_) | Node::Const(_) | Node::Param(_) => ATOM,
        Node::Unary(UnaryOp::Neg, _) => PREFIX,
        Node::Unary(..) => ATOM,
        Node::Binary(op, ..) => match op {
            BinaryOp::Add | BinaryOp::Sub => ADD,
            BinaryOp::Mul | BinaryOp::Div => MUL,
            BinaryOp::Pow => POW,
            BinaryOp::Max | BinaryOp::Min => ATOM,
        },
    }
}

/// Shortest decimal that parses back to the same bits.
pub(crate) fn format_number(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub(super) fn serialize(n: &Node) -> String {
    let mut out = String::new();
    write(n, &mut out);
    out
}

fn wrapped(n: &Node, parens: bool, out: &mut String) {
    if parens {
        out.push('(');
        write(n, out);
        out.push(')');
    } else {
        write(n, out);
    }
}

fn write(n: &Node, out: &mut String) {
    match n {
        Node::Var(name) => out.push_str(name),
        Node::Const(c) => out.push_str(&format_number(*c)),
        Node::Param(i) => {
            out.push('p');
            out.push(char::from(b'0' + *i));
        }
        Node::Unary(UnaryOp::Neg, c) => {
            out.push('-');
            // `-3` would read back as a literal, so constants keep their parens
            let parens = prec(c) < PREFIX || matches!(**c, Node::Const(_));
            wrapped(c, parens, out);
        }
        Node::Unary(op, c) => {
            out.push_str(op.name());
            out.push('(');
            write(c, out);
            out.push(')');
        }
        Node::Binary(op @ (BinaryOp::Max | BinaryOp::Min), l, r) => {
            out.push_str(op.name());
            out.push('(');
            write(l, out);
            out.push_str(", ");
            write(r, out);
            out.push(')');
        }
        Node::Binary(BinaryOp::Pow, l, r) => {
            wrapped(l, prec(l) <= POW, out);
            out.push('^');
            wrapped(r, prec(r) < PREFIX, out);
        }
        Node::Binary(op, l, r) => {
            let (p, sym) = match op {
                BinaryOp::Add => (ADD, " + "),
                BinaryOp::Sub => (ADD, " - "),
                BinaryOp::Mul => (MUL, "*"),
                BinaryOp::Div => (MUL, "/"),
                _ => unreachable!(),
            };
            wrapped(l, prec(l) < p, out);
            out.push_str(sym);
            wrapped(r, prec(r) <= p, out);
        }
    }
}
