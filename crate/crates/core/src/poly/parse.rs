//! Text grammar for concrete polynomials.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary ('*' unary)*
//! unary  := ('+' | '-') unary | power
//! power  := atom ('^' uint)?
//! atom   := number | 'x' index | '(' expr ')'
//! ```
//!
//! Variables are `x1 .. xN`. Juxtaposition (`2x1`, `x1 x2`) is rejected.

use super::{PolyError, Polynomial};

/// Parse `text` as a polynomial in `n` state variables.
pub fn parse_polynomial(text: &str, n: usize) -> Result<Polynomial, PolyError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, n };
    p.skip_ws();
    if p.at_end() {
        return Err(p.error("empty expression"));
    }
    let value = p.expr()?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.error("expected operator '+', '-', '*' or end of input"));
    }
    Ok(value)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> PolyError {
        PolyError::Parse { column: self.pos + 1, message: message.to_string() }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let t = self.term()?;
                    acc.add_assign_scaled(&t, 1.0);
                }
                Some(b'-') => {
                    self.pos += 1;
                    let t = self.term()?;
                    acc.add_assign_scaled(&t, -1.0);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.unary()?;
        loop {
            self.skip_ws();
            if self.peek() == Some(b'*') {
                self.pos += 1;
                let f = self.unary()?;
                acc = acc.mul(&f)?;
            } else {
                return Ok(acc);
            }
        }
    }

    fn unary(&mut self) -> Result<Polynomial, PolyError> {
        self.skip_ws();
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(self.unary()?.scale(-1.0))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.atom()?;
        self.skip_ws();
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.error("expected non-negative integer exponent after '^'"));
            }
            let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            let k: u32 = digits.parse().map_err(|_| self.error("exponent too large"))?;
            if k > 64 {
                return Err(self.error("exponent too large"));
            }
            return base.pow(k);
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, PolyError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(self.error("expected ')'"));
                }
                self.pos += 1;
                self.reject_juxtaposition()?;
                Ok(inner)
            }
            Some(b'x') => {
                let at = self.pos;
                self.pos += 1;
                let start = self.pos;
                while matches!(self.peek(), Some(b'0'..=b'9')) {
                    self.pos += 1;
                }
                if start == self.pos {
                    self.pos = at;
                    return Err(self.error("expected variable index after 'x'"));
                }
                let idx: usize = std::str::from_utf8(&self.src[start..self.pos])
                    .unwrap()
                    .parse()
                    .map_err(|_| self.error("invalid variable index"))?;
                if idx == 0 || idx > self.n {
                    self.pos = at;
                    return Err(self.error(&format!("variable x{idx} outside x1..x{}", self.n)));
                }
                self.reject_juxtaposition()?;
                Ok(Polynomial::var(self.n, idx - 1))
            }
            Some(b'0'..=b'9' | b'.') => {
                let v = self.number()?;
                self.reject_juxtaposition()?;
                Ok(Polynomial::constant(self.n, v))
            }
            Some(_) => Err(self.error("expected number, variable or '('")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<f64, PolyError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            let digits = self.pos;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
            if digits == self.pos {
                self.pos = save;
                return Err(self.error("malformed exponent in numeric literal"));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>().map_err(|_| {
            let mut e = self.error("malformed numeric literal");
            if let PolyError::Parse { column, .. } = &mut e {
                *column = start + 1;
            }
            e
        })
    }

    /// Operands must be followed by an operator, ')' or the end of input.
    fn reject_juxtaposition(&mut self) -> Result<(), PolyError> {
        let save = self.pos;
        self.skip_ws();
        let next = self.peek();
        self.pos = save;
        match next {
            None | Some(b'+' | b'-' | b'*' | b'^' | b')') => Ok(()),
            Some(_) => {
                self.skip_ws();
                Err(self.error("implicit multiplication is not allowed; use '*'"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::Monomial;

    #[test]
    fn parses_benchmark_drift() {
        let p = parse_polynomial("-x1 - x2 - 0.5*x1^3", 2).unwrap();
        assert_eq!(p.concrete_coefficient(&Monomial::new(vec![1, 0])), -1.0);
        assert_eq!(p.concrete_coefficient(&Monomial::new(vec![0, 1])), -1.0);
        assert_eq!(p.concrete_coefficient(&Monomial::new(vec![3, 0])), -0.5);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn parses_parenthesised_powers() {
        let p = parse_polynomial("0.01 - (x1+2)^2 - x2^2", 2).unwrap();
        assert!((p.eval(&[-2.0, 0.0]).unwrap() - 0.01).abs() < 1e-15);
        assert!((p.eval(&[-2.0, 0.1]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn scientific_literals_and_unary_signs() {
        let p = parse_polynomial("-1.5e-1*x1 + +2E1", 1).unwrap();
        assert_eq!(p.eval(&[2.0]).unwrap(), -0.3 + 20.0);
        let q = parse_polynomial("-x1^2", 1).unwrap();
        assert_eq!(q.eval(&[3.0]).unwrap(), -9.0);
    }

    #[test]
    fn rejects_bad_input() {
        for (src, col) in [("2x1", 2), ("x1 x2", 4), ("x3", 1), ("x0", 1), ("x1^", 4), ("(x1", 4), ("", 1), ("x1 +", 5), ("x1^-2", 4)] {
            match parse_polynomial(src, 2) {
                Err(PolyError::Parse { column, .. }) => assert_eq!(column, col, "input {src:?}"),
                other => panic!("input {src:?} gave {other:?}"),
            }
        }
    }
}
