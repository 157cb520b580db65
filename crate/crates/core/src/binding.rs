//! Parameter bindings: model scalars expressed over the design vector ρ.
//!
//! A binding is either a constant or a closed-form arithmetic expression over
//! `rho[k]` components, stored as a small AST so it can be evaluated with any
//! [`Scalar`] (plain, dual-seeded, complex-step). Expressions are written in
//! the model-file syntax, e.g. `"(0.5*rho[0] + 0.02) / sqrt(rho[1])"`.

use crate::diff::Scalar;
use crate::error::{MbsError, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Debug, PartialEq)]
#[doc(hidden)]
pub enum Ast {
    Const(f64),
    Rho(usize),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Neg(Box<Ast>),
    Pow(Box<Ast>, i32),
    Sqrt(Box<Ast>),
    Sin(Box<Ast>),
    Cos(Box<Ast>),
    Tanh(Box<Ast>),
    Exp(Box<Ast>),
}

impl Ast {
    fn eval<S: Scalar>(&self, rho: &[S]) -> S {
        match self {
            Ast::Const(c) => S::from_f64(*c),
            Ast::Rho(k) => rho[*k],
            Ast::Add(a, b) => a.eval(rho) + b.eval(rho),
            Ast::Sub(a, b) => a.eval(rho) - b.eval(rho),
            Ast::Mul(a, b) => a.eval(rho) * b.eval(rho),
            Ast::Div(a, b) => a.eval(rho) / b.eval(rho),
            Ast::Neg(a) => -a.eval(rho),
            Ast::Pow(a, n) => a.eval(rho).powi(*n),
            Ast::Sqrt(a) => a.eval(rho).sqrt(),
            Ast::Sin(a) => a.eval(rho).sin(),
            Ast::Cos(a) => a.eval(rho).cos(),
            Ast::Tanh(a) => a.eval(rho).tanh(),
            Ast::Exp(a) => a.eval(rho).exp(),
        }
    }

    fn max_rho(&self) -> Option<usize> {
        match self {
            Ast::Const(_) => None,
            Ast::Rho(k) => Some(*k),
            Ast::Add(a, b) | Ast::Sub(a, b) | Ast::Mul(a, b) | Ast::Div(a, b) => {
                match (a.max_rho(), b.max_rho()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
            Ast::Neg(a)
            | Ast::Pow(a, _)
            | Ast::Sqrt(a)
            | Ast::Sin(a)
            | Ast::Cos(a)
            | Ast::Tanh(a)
            | Ast::Exp(a) => a.max_rho(),
        }
    }
}

/// Constant or smooth closed-form expression over ρ.
#[derive(Clone, Debug, PartialEq)]
pub enum Binding {
    Const(f64),
    Expr { src: String, ast: Ast },
}

impl Binding {
    pub fn constant(v: f64) -> Self {
        Binding::Const(v)
    }

    /// Binding that returns `rho[k]` directly.
    pub fn rho(k: usize) -> Self {
        Binding::Expr {
            src: format!("rho[{}]", k),
            ast: Ast::Rho(k),
        }
    }

    /// Parse an expression such as `"2*rho[0] + sin(rho[1])^2"`.
    pub fn expr(src: &str) -> Result<Self> {
        let ast = Parser::new(src).parse()?;
        Ok(Binding::Expr {
            src: src.to_string(),
            ast,
        })
    }

    pub fn eval<S: Scalar>(&self, rho: &[S]) -> S {
        match self {
            Binding::Const(c) => S::from_f64(*c),
            Binding::Expr { ast, .. } => ast.eval(rho),
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(self, Binding::Const(_))
    }

    /// Highest ρ index referenced, if any.
    pub fn max_rho(&self) -> Option<usize> {
        match self {
            Binding::Const(_) => None,
            Binding::Expr { ast, .. } => ast.max_rho(),
        }
    }
}

impl Serialize for Binding {
    fn serialize<Se: Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        match self {
            Binding::Const(c) => s.serialize_f64(*c),
            Binding::Expr { src, .. } => {
                use serde::ser::SerializeMap;
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("expr", src)?;
                m.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Binding {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Expr { expr: String },
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Binding::Const(v)),
            Raw::Expr { expr } => Binding::expr(&expr).map_err(D::Error::custom),
        }
    }
}

// ============================================================================
// Recursive-descent parser
// ============================================================================

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
        }
    }

    fn parse(mut self) -> Result<Ast> {
        let ast = self.expr()?;
        self.skip_ws();
        if self.pos != self.bytes.len() {
            return Err(self.err("trailing input"));
        }
        Ok(ast)
    }

    fn err(&self, msg: &str) -> MbsError {
        MbsError::ExprParse(format!("{} at byte {} in `{}`", msg, self.pos, self.src))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Ast> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Ast::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Ast::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Ast> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Ast::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Ast::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Ast> {
        if self.eat(b'-') {
            Ok(Ast::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Ast> {
        let base = self.atom()?;
        if self.eat(b'^') {
            self.skip_ws();
            let start = self.pos;
            let neg = self.eat(b'-');
            let digits_start = self.pos;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits_start {
                return Err(self.err("expected integer exponent"));
            }
            let n: i32 = self.src[start + usize::from(neg)..self.pos]
                .parse()
                .map_err(|_| self.err("bad exponent"))?;
            Ok(Ast::Pow(Box::new(base), if neg { -n } else { n }))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Ast> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.err("expected expression")),
        }
    }

    fn number(&mut self) -> Result<Ast> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E')
                && self.pos > start
                && self
                    .bytes
                    .get(self.pos + 1)
                    .is_some_and(|&n| n.is_ascii_digit() || n == b'+' || n == b'-')
            {
                self.pos += 2;
            } else {
                break;
            }
        }
        self.src[start..self.pos]
            .parse::<f64>()
            .map(Ast::Const)
            .map_err(|_| self.err("bad number"))
    }

    fn ident(&mut self) -> Result<Ast> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        match name {
            "rho" => {
                self.expect(b'[')?;
                self.skip_ws();
                let ds = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let k: usize = self.src[ds..self.pos]
                    .parse()
                    .map_err(|_| self.err("bad rho index"))?;
                self.expect(b']')?;
                Ok(Ast::Rho(k))
            }
            "pi" => Ok(Ast::Const(std::f64::consts::PI)),
            "sqrt" | "sin" | "cos" | "tanh" | "exp" => {
                self.expect(b'(')?;
                let arg = self.expr()?;
                self.expect(b')')?;
                Ok(match name {
                    "sqrt" => Ast::Sqrt(Box::new(arg)),
                    "sin" => Ast::Sin(Box::new(arg)),
                    "cos" => Ast::Cos(Box::new(arg)),
                    "tanh" => Ast::Tanh(Box::new(arg)),
                    _ => Ast::Exp(Box::new(arg)),
                })
            }
            other => Err(self.err(&format!("unknown identifier `{}`", other))),
        }
    }
}
