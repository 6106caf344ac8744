use std::sync::Arc;

use super::{BinaryOp, ExprError, Expression, Node, UnaryOp, MAX_PARAMS};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, bytes: src.as_bytes(), pos: 0 }
    }

    fn err<T>(&self, pos: usize, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax { pos, msg: msg.into() })
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, ExprError> {
        let mut out = Vec::new();
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            let start = self.pos;
            let Some(&c) = self.bytes.get(self.pos) else {
                out.push((start, Tok::End));
                return Ok(out);
            };
            let tok = match c {
                b'0'..=b'9' | b'.' => self.number()?,
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    while self.pos < self.bytes.len()
                        && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
                    {
                        self.pos += 1;
                    }
                    Tok::Ident(self.src[start..self.pos].to_string())
                }
                b'+' | b'-' | b'*' | b'/' | b'^' => {
                    self.pos += 1;
                    Tok::Op(c as char)
                }
                b'(' => {
                    self.pos += 1;
                    Tok::LParen
                }
                b')' => {
                    self.pos += 1;
                    Tok::RParen
                }
                b',' => {
                    self.pos += 1;
                    Tok::Comma
                }
                _ => {
                    let ch = self.src[start..].chars().next().unwrap_or('?');
                    return self.err(start, format!("unexpected character `{ch}`"));
                }
            };
            out.push((start, tok));
        }
    }

    fn number(&mut self) -> Result<Tok, ExprError> {
        let start = self.pos;
        let digits = |lx: &mut Lexer| {
            let s = lx.pos;
            while lx.pos < lx.bytes.len() && lx.bytes[lx.pos].is_ascii_digit() {
                lx.pos += 1;
            }
            lx.pos - s
        };
        let mut n = digits(self);
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            return self.err(start, "malformed number");
        }
        if matches!(self.bytes.get(self.pos), Some(b'e') | Some(b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.bytes.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                // `2e` is not an exponent; leave the `e` for the next token
                self.pos = save;
            }
        }
        let text = &self.src[start..self.pos];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Tok::Num(v)),
            _ => self.err(start, format!("invalid number `{text}`")),
        }
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    i: usize,
}

fn is_reserved(name: &str) -> bool {
    UnaryOp::from_name(name).is_some() || matches!(name, "max" | "min" | "pow")
}

fn param_index(name: &str) -> Option<Result<u8, ()>> {
    let digits = name.strip_prefix('p')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    match digits.parse::<usize>() {
        Ok(i) if i < MAX_PARAMS && (digits.len() == 1) => Some(Ok(i as u8)),
        _ => Some(Err(())),
    }
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.i].1
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let j = (self.i + k).min(self.toks.len() - 1);
        &self.toks[j].1
    }

    fn pos(&self) -> usize {
        self.toks[self.i].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.i].1.clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax { pos: self.pos(), msg: msg.into() })
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), ExprError> {
        if *self.peek() == t {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinaryOp::Add,
                Tok::Op('-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinaryOp::Mul,
                Tok::Op('/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if *self.peek() != Tok::Op('-') {
            return self.power();
        }
        // A minus directly before a literal is a negative constant unless the
        // literal is the base of a power (`-3^2` is `-(3^2)`).
        if let Tok::Num(v) = *self.peek_at(1) {
            if *self.peek_at(2) != Tok::Op('^') {
                self.bump();
                self.bump();
                return Ok(Node::Const(-v));
            }
        }
        self.bump();
        let inner = self.unary()?;
        Ok(Node::unary(UnaryOp::Neg, inner))
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exp = self.unary()?;
            return Ok(Node::binary(BinaryOp::Pow, base, exp));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let start = self.pos();
        match self.bump() {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    return self.call(&name, start);
                }
                if let Some(p) = param_index(&name) {
                    return match p {
                        Ok(i) => Ok(Node::Param(i)),
                        Err(()) => Err(ExprError::Syntax {
                            pos: start,
                            msg: format!("parameter `{name}` out of range p0..p9"),
                        }),
                    };
                }
                if name == "pi" {
                    return Ok(Node::Const(std::f64::consts::PI));
                }
                if is_reserved(&name) {
                    return Err(ExprError::Syntax {
                        pos: start,
                        msg: format!("function `{name}` used without arguments"),
                    });
                }
                Ok(Node::Var(Arc::from(name.as_str())))
            }
            Tok::End => Err(ExprError::Syntax { pos: start, msg: "unexpected end of input".into() }),
            t => Err(ExprError::Syntax { pos: start, msg: format!("unexpected token {t:?}") }),
        }
    }

    fn call(&mut self, name: &str, start: usize) -> Result<Node, ExprError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut args = vec![self.expr()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        self.expect(Tok::RParen, "`)`")?;
        let arity_err = |n: usize| ExprError::Syntax {
            pos: start,
            msg: format!("`{name}` takes {n} argument(s), got {}", args.len()),
        };
        if let Some(op) = UnaryOp::from_name(name) {
            if args.len() != 1 {
                return Err(arity_err(1));
            }
            return Ok(Node::unary(op, args.pop().unwrap()));
        }
        let op = match name {
            "max" => BinaryOp::Max,
            "min" => BinaryOp::Min,
            "pow" => BinaryOp::Pow,
            _ => return Err(ExprError::Syntax { pos: start, msg: format!("unknown function `{name}`") }),
        };
        if args.len() != 2 {
            return Err(arity_err(2));
        }
        let r = args.pop().unwrap();
        let l = args.pop().unwrap();
        Ok(Node::binary(op, l, r))
    }
}

/// Parses DSL text into an expression tree.
///
/// Grammar (lowest to highest precedence): `+ -`, `* /`, unary `-`, `^`
/// (right associative), then atoms: numbers, `p0`..`p9`, identifiers,
/// `pi`, calls such as `sin(x)` or `max(a, b)`, and parenthesised groups.
/// Variables are not resolved here.
pub fn parse(text: &str) -> Result<Expression, ExprError> {
    let toks = Lexer::new(text).tokens()?;
    let mut p = Parser { toks, i: 0 };
    let node = p.expr()?;
    if *p.peek() != Tok::End {
        return p.err("trailing input");
    }
    Ok(Expression::new(node))
}
