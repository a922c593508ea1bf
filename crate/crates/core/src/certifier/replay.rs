//! Exact re-execution of Computation expressions.
//!
//! Grammar: `expr := term (('+'|'-') term)*`, `term := unary (('*'|'/') unary)*`,
//! `unary := '-' unary | atom`, `atom := number | number "bp" | '@' id | '(' expr ')'`.
//! Numbers are decimal literals; `bp` scales by 1/10000. All arithmetic is on
//! big rationals, so replay never rounds.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::trace::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("syntax error at byte {at}: {message}")]
    Syntax { at: usize, message: String },
    #[error("reference `@{0}` has no recorded value")]
    UnknownRef(String),
    #[error("division by zero")]
    DivisionByZero,
}

pub fn scalar_value(s: &Scalar) -> Option<BigRational> {
    s.as_ratio()
        .map(|r| BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom())))
}

/// References named in an expression, in order of appearance.
pub fn references(expr: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = expr.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'@' {
            let start = i + 1;
            i = start;
            while i < bytes.len() && is_id_byte(bytes[i]) {
                i += 1;
            }
            out.push(expr[start..i].to_string());
        } else {
            i += 1;
        }
    }
    out
}

fn is_id_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'-'
}

pub fn eval_expr(
    expr: &str,
    lookup: &dyn Fn(&str) -> Option<BigRational>,
) -> Result<BigRational, ReplayError> {
    let mut p = Parser {
        src: expr.as_bytes(),
        pos: 0,
        lookup,
    };
    let v = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("trailing input"));
    }
    Ok(v)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    lookup: &'a dyn Fn(&str) -> Option<BigRational>,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ReplayError {
        ReplayError::Syntax {
            at: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<BigRational, ReplayError> {
        let mut acc = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = if op == b'+' { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<BigRational, ReplayError> {
        let mut acc = self.unary()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            acc = if op == b'*' {
                acc * rhs
            } else if rhs.is_zero() {
                return Err(ReplayError::DivisionByZero);
            } else {
                acc / rhs
            };
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<BigRational, ReplayError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(-self.unary()?);
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<BigRational, ReplayError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(b'@') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.src.len() && is_id_byte(self.src[self.pos]) {
                    self.pos += 1;
                }
                if start == self.pos {
                    return Err(self.error("empty reference"));
                }
                let id = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii id");
                (self.lookup)(id).ok_or_else(|| ReplayError::UnknownRef(id.to_string()))
            }
            Some(b) if b.is_ascii_digit() => self.number(),
            _ => Err(self.error("expected a number, reference or `(`")),
        }
    }

    fn number(&mut self) -> Result<BigRational, ReplayError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let mut digits = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        let mut scale = 0u32;
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            let frac_start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if frac_start == self.pos {
                return Err(self.error("digits expected after `.`"));
            }
            digits.push_str(&String::from_utf8_lossy(&self.src[frac_start..self.pos]));
            scale = (self.pos - frac_start) as u32;
        }
        if self.src[self.pos..].starts_with(b"bp") {
            self.pos += 2;
            scale += 4;
        }
        let numer: BigInt = digits.parse().map_err(|_| self.error("bad number"))?;
        let denom = num_traits::pow(BigInt::from(10), scale as usize);
        Ok(BigRational::new(numer, if scale == 0 { BigInt::one() } else { denom }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    fn eval(expr: &str) -> Result<BigRational, ReplayError> {
        let lookup = |id: &str| match id {
            "rev" => Some(r(1200, 1)),
            "cost" => Some(r(1159, 1)),
            _ => None,
        };
        eval_expr(expr, &lookup)
    }

    #[test]
    fn arithmetic_is_exact() {
        assert_eq!(eval("0.1 + 0.2").unwrap(), r(3, 10));
        assert_eq!(eval("1000bp * 3").unwrap(), r(3, 10));
        assert_eq!(eval("(@rev - @cost) / 1").unwrap(), r(41, 1));
        assert_eq!(eval("-2 * -(3)").unwrap(), r(6, 1));
        assert_eq!(eval("1 / 3 * 3").unwrap(), r(1, 1));
    }

    #[test]
    fn errors() {
        assert_eq!(eval("1 / (2 - 2)"), Err(ReplayError::DivisionByZero));
        assert_eq!(eval("@nope"), Err(ReplayError::UnknownRef("nope".into())));
        assert!(matches!(eval("1 +"), Err(ReplayError::Syntax { .. })));
        assert!(matches!(eval("(1"), Err(ReplayError::Syntax { .. })));
        assert!(matches!(eval("1 2"), Err(ReplayError::Syntax { .. })));
    }

    #[test]
    fn reference_listing() {
        assert_eq!(references("(@rev - @cost)/@rev"), vec!["rev", "cost", "rev"]);
    }

    #[test]
    fn scalar_conversion() {
        assert_eq!(scalar_value(&Scalar::bp(2500)), Some(r(1, 4)));
        assert_eq!(scalar_value(&Scalar::Int(7)), Some(r(7, 1)));
        assert_eq!(scalar_value(&Scalar::str("x")), None);
    }
}
