//! Arithmetic expressions over `y1`, `y2`, `|y|`.
//!
//! Config files describe custom fields as strings like
//! `2 + cos(|y|) * exp(-y1^2)`. The string is parsed once into a tree and
//! evaluated per point. Supported: `+ - * / ^`, parentheses, `cos`, `sin`,
//! `exp`, numeric literals with exponents, and the three point symbols.

use crate::Vector;
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Y1,
    Y2,
    /// `|y|`, the Euclidean norm of the evaluation point.
    AbsY,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Cos(Box<Expr>),
    Sin(Box<Expr>),
    Exp(Box<Expr>),
}

impl Expr {
    pub fn eval(&self, y: &Vector) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Y1 => y[0],
            Expr::Y2 => y[1],
            Expr::AbsY => (y[0] * y[0] + y[1] * y[1]).sqrt(),
            Expr::Add(a, b) => a.eval(y) + b.eval(y),
            Expr::Sub(a, b) => a.eval(y) - b.eval(y),
            Expr::Mul(a, b) => a.eval(y) * b.eval(y),
            Expr::Div(a, b) => a.eval(y) / b.eval(y),
            Expr::Pow(a, b) => a.eval(y).powf(b.eval(y)),
            Expr::Neg(a) => -a.eval(y),
            Expr::Cos(a) => a.eval(y).cos(),
            Expr::Sin(a) => a.eval(y).sin(),
            Expr::Exp(a) => a.eval(y).exp(),
        }
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }
}

/// Parse failure with a byte offset into the source string.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.pos, self.msg)
    }
}

impl std::error::Error for ParseError {}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Y1,
    Y2,
    AbsY,
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                toks.push((i, Tok::Plus));
                i += 1;
            }
            '-' => {
                toks.push((i, Tok::Minus));
                i += 1;
            }
            '*' => {
                toks.push((i, Tok::Star));
                i += 1;
            }
            '/' => {
                toks.push((i, Tok::Slash));
                i += 1;
            }
            '^' => {
                toks.push((i, Tok::Caret));
                i += 1;
            }
            '(' => {
                toks.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                toks.push((i, Tok::RParen));
                i += 1;
            }
            '|' => {
                if src[i..].starts_with("|y|") {
                    toks.push((i, Tok::AbsY));
                    i += 3;
                } else {
                    return Err(ParseError {
                        pos: i,
                        msg: "expected `|y|`".into(),
                    });
                }
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let num: f64 = text.parse().map_err(|_| ParseError {
                    pos: start,
                    msg: format!("bad number `{text}`"),
                })?;
                toks.push((start, Tok::Num(num)));
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &src[start..i];
                let tok = match word {
                    "y1" => Tok::Y1,
                    "y2" => Tok::Y2,
                    other => Tok::Ident(other.to_string()),
                };
                toks.push((start, tok));
            }
            _ => {
                return Err(ParseError {
                    pos: i,
                    msg: format!("unexpected character `{c}`"),
                });
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    at: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|(_, t)| t.clone());
        self.at += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(want) {
            self.at += 1;
            Ok(())
        } else {
            Err(ParseError {
                pos: self.pos(),
                msg: format!("expected {what}"),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.at += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.at += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.at += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.at += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Tok::Minus) {
            self.at += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.at += 1;
            // Right-associative, and `y1^-2` is allowed.
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Some(Tok::Num(x)) => Ok(Expr::Const(x)),
            Some(Tok::Y1) => Ok(Expr::Y1),
            Some(Tok::Y2) => Ok(Expr::Y2),
            Some(Tok::AbsY) => Ok(Expr::AbsY),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                let ctor: fn(Box<Expr>) -> Expr = match name.as_str() {
                    "cos" => Expr::Cos,
                    "sin" => Expr::Sin,
                    "exp" => Expr::Exp,
                    other => {
                        return Err(ParseError {
                            pos,
                            msg: format!("unknown function or symbol `{other}`"),
                        });
                    }
                };
                self.expect(&Tok::LParen, "`(` after function name")?;
                let arg = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(ctor(Box::new(arg)))
            }
            _ => Err(ParseError {
                pos,
                msg: "expected a value".into(),
            }),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(src)?;
    let mut p = Parser {
        toks: &toks,
        at: 0,
        end: src.len(),
    };
    let e = p.expr()?;
    if p.at != toks.len() {
        return Err(ParseError {
            pos: p.pos(),
            msg: "trailing input".into(),
        });
    }
    Ok(e)
}
