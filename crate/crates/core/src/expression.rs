//! Scalar arithmetic expressions for declaring systems as data.
//!
//! ```text
//! expr    = term { ("+" | "-") term } ;
//! term    = unary { ("*" | "/") unary } ;
//! unary   = "-" unary | power ;
//! power   = primary [ "^" unary ] ;          (* right associative *)
//! primary = number | variable | func "(" expr ")" | "(" expr ")" ;
//! variable = "t" | "y" | "u" digits | "x" digits ;
//! func    = "sin" | "cos" | "exp" | "tanh" | "abs" | "sat" ;
//! ```
//!
//! `^` binds tighter than unary minus, so `-x1^2` is `-(x1^2)`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite result")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    T,
    Y,
    /// 1-based input channel.
    U(usize),
    /// 1-based state component.
    X(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::Y => write!(f, "y"),
            Var::U(i) => write!(f, "u{i}"),
            Var::X(i) => write!(f, "x{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    Sat,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "sat" => Func::Sat,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Sat => "sat",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Tanh => v.tanh(),
            Func::Abs => v.abs(),
            Func::Sat => v.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Values for the variables an expression may reference. Inputs and states
/// are 1-based in the expression text and 0-based in the slices.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub t: Option<f64>,
    pub y: Option<f64>,
    pub u: &'a [f64],
    pub x: &'a [f64],
}

impl<'a> Bindings<'a> {
    fn get(&self, var: Var) -> Option<f64> {
        match var {
            Var::T => self.t,
            Var::Y => self.y,
            Var::U(i) => self.u.get(i.wrapping_sub(1)).copied(),
            Var::X(i) => self.x.get(i.wrapping_sub(1)).copied(),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let mut p = Parser { src, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, b: &Bindings<'_>) -> Result<f64, ExprError> {
        let v = self.eval_inner(b)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFinite)
        }
    }

    fn eval_inner(&self, b: &Bindings<'_>) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(var) => b
                .get(*var)
                .ok_or_else(|| ExprError::Unbound(var.to_string()))?,
            Expr::Neg(e) => -e.eval_inner(b)?,
            Expr::Call(f, e) => f.apply(e.eval_inner(b)?),
            Expr::Binary(op, l, r) => {
                let l = l.eval_inner(b)?;
                let r = r.eval_inner(b)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        l / r
                    }
                    BinOp::Pow => {
                        if l < 0.0 && r.fract() != 0.0 {
                            return Err(ExprError::Domain(format!(
                                "negative base {l} with non-integer exponent {r}"
                            )));
                        }
                        if l == 0.0 && r < 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        if r.fract() == 0.0 && r.abs() <= 64.0 {
                            l.powi(r as i32)
                        } else {
                            l.powf(r)
                        }
                    }
                }
            }
        })
    }

    /// All variables referenced anywhere in the tree.
    pub fn variables(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Neg(e) | Expr::Call(_, e) => e.collect_vars(out),
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }

    /// Rejects references outside `n` states and `m` inputs.
    pub fn check_dimensions(&self, n: usize, m: usize) -> Result<(), ExprError> {
        for v in self.variables() {
            let ok = match v {
                Var::U(i) => (1..=m).contains(&i),
                Var::X(i) => (1..=n).contains(&i),
                Var::T | Var::Y => true,
            };
            if !ok {
                return Err(ExprError::UnknownIdentifier(v.to_string()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

impl std::str::FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: &str) -> ExprError {
        ExprError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek_raw() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek_raw(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.peek_raw()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some('+') => BinOp::Add,
                Some('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some('*') => BinOp::Mul,
                Some('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.identifier(),
            Some(c) => Err(self.error(&format!("unexpected character `{c}`"))),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            if j < bytes.len() && bytes[j].is_ascii_digit() {
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = &self.src[start..i];
        let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
            offset: start,
            message: format!("malformed number `{text}`"),
        })?;
        self.pos = i;
        Ok(Expr::Num(v))
    }

    fn identifier(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
            i += 1;
        }
        let name = &self.src[start..i];
        self.pos = i;
        if let Some(func) = Func::from_name(name) {
            if !self.eat('(') {
                return Err(self.error(&format!("expected `(` after `{name}`")));
            }
            let arg = self.expr()?;
            if !self.eat(')') {
                return Err(self.error("expected `)`"));
            }
            return Ok(Expr::Call(func, Box::new(arg)));
        }
        parse_var(name)
            .map(Expr::Var)
            .ok_or_else(|| ExprError::UnknownIdentifier(name.to_string()))
    }
}

fn parse_var(name: &str) -> Option<Var> {
    match name {
        "t" => return Some(Var::T),
        "y" => return Some(Var::Y),
        _ => {}
    }
    let (head, digits) = name.split_at(1);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let idx: usize = digits.parse().ok()?;
    match head {
        "u" => Some(Var::U(idx)),
        "x" => Some(Var::X(idx)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(src: &str, b: Bindings<'_>) -> Result<f64, ExprError> {
        Expr::parse(src).unwrap().eval(&b)
    }

    #[test]
    fn planar_drift_parses_with_cube() {
        let e = Expr::parse("x1 - x2^3").unwrap();
        let expected = Expr::Binary(
            BinOp::Sub,
            Box::new(Expr::Var(Var::X(1))),
            Box::new(Expr::Binary(
                BinOp::Pow,
                Box::new(Expr::Var(Var::X(2))),
                Box::new(Expr::Num(3.0)),
            )),
        );
        assert_eq!(e, expected);
        let x = [2.0, 0.0];
        assert_eq!(
            e.eval(&Bindings {
                x: &x,
                ..Default::default()
            }),
            Ok(2.0)
        );
        let x = [1.0, 2.0];
        assert_eq!(
            e.eval(&Bindings {
                x: &x,
                ..Default::default()
            }),
            Ok(-7.0)
        );
    }

    #[test]
    fn literal_and_mixed_evaluation() {
        assert_eq!(Expr::parse("2").unwrap(), Expr::Num(2.0));
        let u = [5.0];
        let x = [3.0];
        let b = Bindings {
            t: Some(0.0),
            u: &u,
            x: &x,
            ..Default::default()
        };
        assert_eq!(at("sin(t)*u1 + -x1", b), Ok(-3.0));
        let u = [1.0];
        assert_eq!(
            at(
                "u1",
                Bindings {
                    u: &u,
                    ..Default::default()
                }
            ),
            Ok(1.0)
        );
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(Expr::parse("x1+x2*x3"), Expr::parse("x1+(x2*x3)"));
        assert_eq!(Expr::parse("x1-x2-x3"), Expr::parse("(x1-x2)-x3"));
        assert_eq!(Expr::parse("x1/x2/x3"), Expr::parse("(x1/x2)/x3"));
        assert_eq!(Expr::parse("x1^x2^x3"), Expr::parse("x1^(x2^x3)"));
        assert_eq!(Expr::parse("-x1^2"), Expr::parse("-(x1^2)"));
        let x = [3.0];
        assert_eq!(
            at(
                "-x1^2",
                Bindings {
                    x: &x,
                    ..Default::default()
                }
            ),
            Ok(-9.0)
        );
        assert_eq!(at("2^-1", Bindings::default()), Ok(0.5));
        assert_eq!(at(" 2 *\t3 ", Bindings::default()), Ok(6.0));
        assert_eq!(at("1.5e-3*2e3", Bindings::default()), Ok(3.0));
    }

    #[test]
    fn saturation_and_functions() {
        let b = Bindings::default();
        assert_eq!(at("sat(3)", b), Ok(1.0));
        assert_eq!(at("sat(-0.25)", b), Ok(-0.25));
        assert_eq!(at("abs(-2) + exp(0) + cos(0) + tanh(0)", b), Ok(4.0));
    }

    #[test]
    fn evaluation_errors() {
        let x = [1.0, 0.0];
        let b = Bindings {
            x: &x,
            ..Default::default()
        };
        assert_eq!(at("x1/x2", b), Err(ExprError::DivisionByZero));
        assert_eq!(at("x3", b), Err(ExprError::Unbound("x3".into())));
        assert_eq!(at("t", b), Err(ExprError::Unbound("t".into())));
        assert!(matches!(at("(0-2)^0.5", b), Err(ExprError::Domain(_))));
        assert_eq!(at("(0-2)^2", b), Ok(4.0));
        assert_eq!(at("exp(1000)", b), Err(ExprError::NonFinite));
    }

    #[test]
    fn parse_errors_carry_position_or_name() {
        assert_eq!(
            Expr::parse("x1 + foo"),
            Err(ExprError::UnknownIdentifier("foo".into()))
        );
        assert_eq!(
            Expr::parse("x0"),
            Err(ExprError::UnknownIdentifier("x0".into()))
        );
        match Expr::parse("x1 + * 2") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match Expr::parse("(x1 + 2") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Expr::parse("1 2"),
            Err(ExprError::Syntax { offset: 2, .. })
        ));
        assert!(matches!(
            Expr::parse("sin x1"),
            Err(ExprError::Syntax { .. })
        ));
        assert!(matches!(
            Expr::parse(""),
            Err(ExprError::Syntax { offset: 0, .. })
        ));
    }

    #[test]
    fn variable_scan_and_dimension_check() {
        let e = Expr::parse("x1 - sat(x2)^3 + u1*t + y").unwrap();
        let vars: Vec<_> = e.variables().into_iter().collect();
        assert_eq!(vars, vec![Var::T, Var::Y, Var::U(1), Var::X(1), Var::X(2)]);
        assert!(e.check_dimensions(2, 1).is_ok());
        assert_eq!(
            e.check_dimensions(1, 1),
            Err(ExprError::UnknownIdentifier("x2".into()))
        );
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Expr::Num(v as f64 / 8.0)),
            Just(Expr::Var(Var::T)),
            Just(Expr::Var(Var::Y)),
            (1usize..4).prop_map(|i| Expr::Var(Var::X(i))),
            (1usize..3).prop_map(|i| Expr::Var(Var::U(i))),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            let op = prop_oneof![
                Just(BinOp::Add),
                Just(BinOp::Sub),
                Just(BinOp::Mul),
                Just(BinOp::Div),
                Just(BinOp::Pow)
            ];
            let func = prop_oneof![
                Just(Func::Sin),
                Just(Func::Cos),
                Just(Func::Exp),
                Just(Func::Tanh),
                Just(Func::Abs),
                Just(Func::Sat)
            ];
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (func, inner.clone()).prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
                (op, inner.clone(), inner).prop_map(|(o, l, r)| Expr::Binary(
                    o,
                    Box::new(l),
                    Box::new(r)
                )),
            ]
        })
    }

    proptest! {
        #[test]
        fn pretty_print_round_trips(e in arb_expr()) {
            let printed = e.to_string();
            prop_assert_eq!(Expr::parse(&printed).unwrap(), e);
        }

        #[test]
        fn sum_of_product_parses_as_product_first(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
            let lhs = Expr::parse(&format!("x{a}+x{b}*x{c}")).unwrap();
            let rhs = Expr::parse(&format!("x{a}+(x{b}*x{c})")).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
