//! Arithmetic expressions for Calculate nodes: `+ - * /` (also `× ÷ −`),
//! parentheses, numeric literals and node-id references.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalcError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unbound name `{0}`")]
    Unbound(String),
    #[error("division by zero")]
    DivisionByZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalcExpr {
    /// Decimal literal kept as written so it converts exactly.
    Num(String),
    Var(String),
    Neg(Box<CalcExpr>),
    Bin(BinOp, Box<CalcExpr>, Box<CalcExpr>),
}

impl CalcExpr {
    pub fn parse(text: &str) -> Result<Self, CalcError> {
        let tokens = tokenize(text)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.expr()?;
        if let Some((offset, tok)) = parser.tokens.get(parser.pos) {
            return Err(CalcError::Syntax {
                offset: *offset,
                message: format!("unexpected `{tok}`"),
            });
        }
        Ok(expr)
    }

    pub fn var(name: impl Into<String>) -> Self {
        CalcExpr::Var(name.into())
    }

    pub fn bin(op: BinOp, lhs: CalcExpr, rhs: CalcExpr) -> Self {
        CalcExpr::Bin(op, Box::new(lhs), Box::new(rhs))
    }

    /// Left-associative sum of the named references.
    pub fn sum_of<S: AsRef<str>>(names: &[S]) -> Self {
        let mut it = names.iter();
        let first = CalcExpr::var(it.next().expect("nonempty sum").as_ref());
        it.fold(first, |acc, n| {
            CalcExpr::bin(BinOp::Add, acc, CalcExpr::var(n.as_ref()))
        })
    }

    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            CalcExpr::Num(_) => {}
            CalcExpr::Var(v) => {
                out.insert(v.clone());
            }
            CalcExpr::Neg(e) => e.collect_vars(out),
            CalcExpr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn rename(&self, map: &BTreeMap<String, String>) -> CalcExpr {
        match self {
            CalcExpr::Num(n) => CalcExpr::Num(n.clone()),
            CalcExpr::Var(v) => CalcExpr::Var(map.get(v).cloned().unwrap_or_else(|| v.clone())),
            CalcExpr::Neg(e) => CalcExpr::Neg(Box::new(e.rename(map))),
            CalcExpr::Bin(op, a, b) => CalcExpr::bin(*op, a.rename(map), b.rename(map)),
        }
    }

    /// Evaluate left-to-right with the usual precedence.
    pub fn eval<T: CalcNum>(&self, bindings: &impl Fn(&str) -> Option<T>) -> Result<T, CalcError> {
        match self {
            CalcExpr::Num(text) => Ok(T::from_decimal(text)),
            CalcExpr::Var(v) => bindings(v).ok_or_else(|| CalcError::Unbound(v.clone())),
            CalcExpr::Neg(e) => Ok(e.eval(bindings)?.neg()),
            CalcExpr::Bin(op, a, b) => {
                let a = a.eval(bindings)?;
                let b = b.eval(bindings)?;
                match op {
                    BinOp::Add => Ok(a.add(&b)),
                    BinOp::Sub => Ok(a.sub(&b)),
                    BinOp::Mul => Ok(a.mul(&b)),
                    BinOp::Div => {
                        if b.is_zero() {
                            Err(CalcError::DivisionByZero)
                        } else {
                            Ok(a.div(&b))
                        }
                    }
                }
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8, right: bool) -> fmt::Result {
        match self {
            CalcExpr::Num(n) => f.write_str(n),
            CalcExpr::Var(v) => f.write_str(v),
            CalcExpr::Neg(e) => {
                f.write_str("-")?;
                e.fmt_prec(f, 3, false)
            }
            CalcExpr::Bin(op, a, b) => {
                let p = op.precedence();
                let paren = p < parent || (right && p == parent);
                if paren {
                    f.write_str("(")?;
                }
                a.fmt_prec(f, p, false)?;
                write!(f, " {} ", op.symbol())?;
                b.fmt_prec(f, p, true)?;
                if paren {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for CalcExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0, false)
    }
}

/// Number types a calculation can be evaluated over.
pub trait CalcNum: Sized + Clone {
    fn from_decimal(text: &str) -> Self;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn is_zero(&self) -> bool;
}

impl CalcNum for f64 {
    fn from_decimal(text: &str) -> Self {
        text.parse().expect("tokenizer admits only valid decimals")
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
}

impl CalcNum for BigRational {
    fn from_decimal(text: &str) -> Self {
        let (int, frac) = text.split_once('.').unwrap_or((text, ""));
        let digits: BigInt = format!("{int}{frac}").parse().expect("decimal digits");
        let denom = num_traits::pow(BigInt::from(10), frac.len());
        BigRational::new(digits, denom)
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
}

/// Convenience wrapper over real-valued bindings.
pub fn eval_calc(expr: &str, bindings: &BTreeMap<String, f64>) -> Result<f64, CalcError> {
    CalcExpr::parse(expr)?.eval(&|name: &str| bindings.get(name).copied())
}

pub(crate) fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(String),
    Ident(String),
    Op(BinOp),
    LParen,
    RParen,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(n) | Token::Ident(n) => f.write_str(n),
            Token::Op(op) => write!(f, "{}", op.symbol()),
            Token::LParen => f.write_str("("),
            Token::RParen => f.write_str(")"),
        }
    }
}

pub(crate) fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | ':')
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, CalcError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (offset, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '+' => {
                out.push((offset, Token::Op(BinOp::Add)));
                i += 1;
            }
            '-' | '−' => {
                out.push((offset, Token::Op(BinOp::Sub)));
                i += 1;
            }
            '*' | '×' => {
                out.push((offset, Token::Op(BinOp::Mul)));
                i += 1;
            }
            '/' | '÷' => {
                out.push((offset, Token::Op(BinOp::Div)));
                i += 1;
            }
            '(' => {
                out.push((offset, Token::LParen));
                i += 1;
            }
            ')' => {
                out.push((offset, Token::RParen));
                i += 1;
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].1.is_ascii_digit() {
                    i += 1;
                }
                if i < chars.len() && chars[i].1 == '.' {
                    i += 1;
                    let frac_start = i;
                    while i < chars.len() && chars[i].1.is_ascii_digit() {
                        i += 1;
                    }
                    if i == frac_start {
                        return Err(CalcError::Syntax {
                            offset: chars[i - 1].0,
                            message: "expected digits after decimal point".into(),
                        });
                    }
                }
                let s: String = chars[start..i].iter().map(|(_, c)| c).collect();
                out.push((offset, Token::Num(s)));
            }
            c if is_ident_start(c) => {
                let start = i;
                while i < chars.len() && is_ident_char(chars[i].1) {
                    i += 1;
                }
                let s: String = chars[start..i].iter().map(|(_, c)| c).collect();
                out.push((offset, Token::Ident(s)));
            }
            other => {
                return Err(CalcError::Syntax {
                    offset,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn end_offset(&self) -> usize {
        self.tokens.last().map(|(o, _)| o + 1).unwrap_or(0)
    }

    fn expr(&mut self) -> Result<CalcExpr, CalcError> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ (BinOp::Add | BinOp::Sub))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = CalcExpr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<CalcExpr, CalcError> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op(op @ (BinOp::Mul | BinOp::Div))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = CalcExpr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<CalcExpr, CalcError> {
        let Some((offset, tok)) = self.tokens.get(self.pos).cloned() else {
            return Err(CalcError::Syntax {
                offset: self.end_offset(),
                message: "unexpected end of expression".into(),
            });
        };
        self.pos += 1;
        match tok {
            Token::Num(n) => Ok(CalcExpr::Num(n)),
            Token::Ident(v) => Ok(CalcExpr::Var(v)),
            Token::Op(BinOp::Sub) => Ok(CalcExpr::Neg(Box::new(self.factor()?))),
            Token::LParen => {
                let e = self.expr()?;
                match self.tokens.get(self.pos) {
                    Some((_, Token::RParen)) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => Err(CalcError::Syntax {
                        offset,
                        message: "unbalanced parenthesis".into(),
                    }),
                }
            }
            other => Err(CalcError::Syntax {
                offset,
                message: format!("unexpected `{other}`"),
            }),
        }
    }
}
