//! Small closed-form expression language for generator and coefficient rules.
//!
//! Grammar: `expr := term (('+'|'-') term)*`, `term := factor (('*'|'/') factor)*`,
//! `factor := '-' factor | power`, `power := atom ('^' atom)?`,
//! `atom := number | ident | ident '(' expr ')' | '(' expr ')'`.
//!
//! Identifiers are resolved at evaluation time through a variable environment,
//! so one parsed expression can serve any dimension (`z1`, `z2`, ..., `znorm`,
//! `znorm2`, `b1`, ..., `t`, `y`). Constants are stored as `f64` and converted
//! to the target scalar on evaluation.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Func(Func, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Abs,
    Sqrt,
    Ln,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "tanh" => Some(Func::Tanh),
            "exp" => Some(Func::Exp),
            "abs" => Some(Func::Abs),
            "sqrt" => Some(Func::Sqrt),
            "ln" => Some(Func::Ln),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let bytes: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '^' => {
                out.push(Token::Caret);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == '.'
                        || bytes[i] == 'e'
                        || bytes[i] == 'E'
                        || ((bytes[i] == '+' || bytes[i] == '-')
                            && i > start
                            && (bytes[i - 1] == 'e' || bytes[i - 1] == 'E')))
                {
                    i += 1;
                }
                let text: String = bytes[start..i].iter().collect();
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::parse(format!("bad number literal `{text}`")))?;
                out.push(Token::Num(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(bytes[start..i].iter().collect()));
            }
            other => {
                return Err(Error::parse(format!(
                    "unexpected character `{other}` at byte {i} in expression"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Token) -> Result<()> {
        match self.next() {
            Some(t) if t == tok => Ok(()),
            other => Err(Error::parse(format!("expected {tok:?}, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.next();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Token::Minus) => {
                    self.next();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.next();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Token::Slash) => {
                    self.next();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.next();
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.next();
            // Integer exponents only; keeps evaluation total on negative bases.
            let neg = if matches!(self.peek(), Some(Token::Minus)) {
                self.next();
                true
            } else {
                false
            };
            match self.next() {
                Some(Token::Num(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                    let mut e = v as i32;
                    if neg {
                        e = -e;
                    }
                    Ok(Expr::Pow(Box::new(base), e))
                }
                other => Err(Error::parse(format!(
                    "exponent must be an integer literal, found {other:?}"
                ))),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::Ident(name)) => {
                if matches!(self.peek(), Some(Token::LParen)) {
                    let func = Func::from_name(&name).ok_or_else(|| {
                        Error::parse(format!("unknown function `{name}`"))
                    })?;
                    self.next();
                    let arg = self.expr()?;
                    self.expect(Token::RParen)?;
                    Ok(Expr::Func(func, Box::new(arg)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Token::LParen) => {
                let inner = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            other => Err(Error::parse(format!(
                "expected number, identifier or `(`, found {other:?}"
            ))),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        if tokens.is_empty() {
            return Err(Error::parse("empty expression"));
        }
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::parse(format!(
                "trailing tokens after expression: {:?}",
                &p.tokens[p.pos..]
            )));
        }
        Ok(e)
    }

    /// Evaluates against a variable environment. Unknown variables are an error.
    pub fn eval<T: Real>(&self, env: &dyn Fn(&str) -> Option<T>) -> Result<T> {
        match self {
            Expr::Const(v) => Ok(T::of(*v)),
            Expr::Var(name) => env(name)
                .ok_or_else(|| Error::input(format!("unknown variable `{name}` in expression"))),
            Expr::Neg(e) => Ok(-e.eval(env)?),
            Expr::Add(a, b) => Ok(a.eval(env)? + b.eval(env)?),
            Expr::Sub(a, b) => Ok(a.eval(env)? - b.eval(env)?),
            Expr::Mul(a, b) => Ok(a.eval(env)? * b.eval(env)?),
            Expr::Div(a, b) => {
                let d = b.eval(env)?;
                if d == T::zero() {
                    return Err(Error::numeric("division by zero in expression"));
                }
                Ok(a.eval(env)? / d)
            }
            Expr::Pow(base, e) => Ok(base.eval(env)?.powi(*e)),
            Expr::Func(f, arg) => {
                let x = arg.eval(env)?;
                Ok(match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tanh => x.tanh(),
                    Func::Exp => x.exp(),
                    Func::Abs => x.abs(),
                    Func::Sqrt => {
                        if x < T::zero() {
                            return Err(Error::numeric("sqrt of negative value in expression"));
                        }
                        x.sqrt()
                    }
                    Func::Ln => {
                        if x <= T::zero() {
                            return Err(Error::numeric("ln of nonpositive value in expression"));
                        }
                        x.ln()
                    }
                })
            }
        }
    }

    /// The value of a variable-free expression, e.g. `-1` or `0.5*2`.
    pub fn as_const(&self) -> Option<f64> {
        if !self.variables().is_empty() {
            return None;
        }
        self.eval::<f64>(&|_| None).ok()
    }

    /// Variables referenced by the expression, sorted and deduplicated.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => out.push(v.clone()),
            Expr::Neg(e) | Expr::Pow(e, _) | Expr::Func(_, e) => e.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ev(src: &str, vars: &[(&str, f64)]) -> f64 {
        let e = Expr::parse(src).unwrap();
        e.eval(&|name: &str| {
            vars.iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
        })
        .unwrap()
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_relative_eq!(ev("1 + 2 * 3", &[]), 7.0);
        assert_relative_eq!(ev("(1 + 2) * 3", &[]), 9.0);
        assert_relative_eq!(ev("2 ^ 3 + 1", &[]), 9.0);
        assert_relative_eq!(ev("-2 ^ 2", &[]), -4.0);
        assert_relative_eq!(ev("10 / 4", &[]), 2.5);
        assert_relative_eq!(ev("2 ^ -2", &[]), 0.25);
    }

    #[test]
    fn variables_and_functions() {
        assert_relative_eq!(ev("-y + sin(z1)", &[("y", 2.0), ("z1", 0.0)]), -2.0);
        assert_relative_eq!(
            ev("znorm2 - y", &[("znorm2", 9.0), ("y", 1.0)]),
            8.0
        );
        assert_relative_eq!(ev("tanh(0)", &[]), 0.0);
        assert_relative_eq!(ev("exp(1)", &[]), std::f64::consts::E);
        assert_relative_eq!(ev("sqrt(abs(-4))", &[]), 2.0);
        assert_relative_eq!(ev("1.5e2 + 1e-2", &[]), 150.01);
    }

    #[test]
    fn f32_evaluation() {
        let e = Expr::parse("y * y + 0.5").unwrap();
        let v: f32 = e.eval(&|n: &str| (n == "y").then_some(3.0f32)).unwrap();
        assert!((v - 9.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_malformed() {
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("foo(1)").is_err());
        assert!(Expr::parse("2 ^ y").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
    }

    #[test]
    fn unknown_variable_is_an_error() {
        let e = Expr::parse("q + 1").unwrap();
        assert!(e.eval(&|_: &str| None::<f64>).is_err());
    }

    #[test]
    fn collects_variables() {
        let e = Expr::parse("t * y + sin(z1) - z2 ^ 2").unwrap();
        assert_eq!(e.variables(), vec!["t", "y", "z1", "z2"]);
    }
}
