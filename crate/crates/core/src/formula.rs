//! Mixed-effects formula notation.
//!
//! Accepted grammar (whitespace and newlines are insignificant):
//!
//! ```text
//! formula  := "cbind" "(" ID "," ID ")" "~" term ("+" term)*
//! term     := "1" | ID | "(" lhs "|" ID (":" ID)* ")"
//! lhs      := "1" | "1" "+" ID
//! ID       := [A-Za-z][A-Za-z0-9_]*
//! ```

use std::fmt;

use thiserror::Error;

use crate::frame::FactorSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormulaError {
    #[error("syntax error at byte {offset}: expected {expected}")]
    Syntax { offset: usize, expected: String },
    #[error("unsupported construct `{construct}` at byte {offset}")]
    Unsupported { offset: usize, construct: String },
    #[error("duplicate term `{0}`")]
    DuplicateTerm(String),
    #[error("slope `{0}` in a varying term is not declared as a fixed covariate")]
    UndeclaredSlope(String),
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaryingTerm {
    pub grouping: Vec<String>,
    pub has_intercept: bool,
    pub slopes: Vec<String>,
}

impl VaryingTerm {
    /// Grouping factors joined with `:`.
    pub fn label(&self) -> String {
        self.grouping.join(":")
    }

    /// Number of effect columns: one for the intercept plus one per slope.
    pub fn n_columns(&self) -> usize {
        usize::from(self.has_intercept) + self.slopes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Formula {
    pub response: (String, String),
    pub intercept: bool,
    pub fixed: Vec<String>,
    pub varying: Vec<VaryingTerm>,
}

impl Formula {
    /// Every factor named by some varying term, first appearance order.
    pub fn grouping_factors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.varying {
            for g in &t.grouping {
                if !out.contains(&g.as_str()) {
                    out.push(g);
                }
            }
        }
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cbind({}, {}) ~ ", self.response.0, self.response.1)?;
        let mut terms: Vec<String> = Vec::new();
        if self.intercept {
            terms.push("1".into());
        }
        terms.extend(self.fixed.iter().cloned());
        for v in &self.varying {
            let mut lhs: Vec<&str> = Vec::new();
            if v.has_intercept {
                lhs.push("1");
            }
            lhs.extend(v.slopes.iter().map(String::as_str));
            terms.push(format!("({} | {})", lhs.join(" + "), v.label()));
        }
        write!(f, "{}", terms.join(" + "))
    }
}

/// Canonical text form; `parse_formula(&render_formula(f)) == Ok(f)`.
pub fn render_formula(f: &Formula) -> String {
    f.to_string()
}

pub fn parse_formula(text: &str) -> Result<Formula, FormulaError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let formula = p.formula()?;
    validate(&formula)?;
    Ok(formula)
}

fn validate(f: &Formula) -> Result<(), FormulaError> {
    for (i, name) in f.fixed.iter().enumerate() {
        if f.fixed[..i].contains(name) {
            return Err(FormulaError::DuplicateTerm(name.clone()));
        }
    }
    for (i, term) in f.varying.iter().enumerate() {
        if f.varying[..i].iter().any(|t| t == term) {
            return Err(FormulaError::DuplicateTerm(format!("(… | {})", term.label())));
        }
        for (j, g) in term.grouping.iter().enumerate() {
            if term.grouping[..j].contains(g) {
                return Err(FormulaError::DuplicateTerm(term.label()));
            }
        }
        for slope in &term.slopes {
            if !f.fixed.contains(slope) {
                return Err(FormulaError::UndeclaredSlope(slope.clone()));
            }
        }
    }
    Ok(())
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

enum Term {
    Intercept,
    Fixed(String),
    Varying(VaryingTerm),
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn error<T>(&self, expected: &str) -> Result<T, FormulaError> {
        Err(FormulaError::Syntax {
            offset: self.pos,
            expected: expected.to_string(),
        })
    }

    fn expect(&mut self, byte: u8) -> Result<(), FormulaError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(&format!("`{}`", byte as char))
        }
    }

    fn ident(&mut self) -> Result<String, FormulaError> {
        self.skip_ws();
        let start = self.pos;
        match self.src.get(self.pos) {
            Some(b) if b.is_ascii_alphabetic() => self.pos += 1,
            _ => return self.error("identifier"),
        }
        while let Some(b) = self.src.get(self.pos) {
            if b.is_ascii_alphanumeric() || *b == b'_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn one(&mut self) -> Result<(), FormulaError> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&b'1')
            && !self
                .src
                .get(self.pos + 1)
                .is_some_and(|b| b.is_ascii_alphanumeric() || *b == b'_' || *b == b'.')
        {
            self.pos += 1;
            Ok(())
        } else {
            self.error("`1`")
        }
    }

    fn formula(&mut self) -> Result<Formula, FormulaError> {
        let kw_pos = {
            self.skip_ws();
            self.pos
        };
        let kw = self.ident()?;
        if kw != "cbind" {
            self.pos = kw_pos;
            return self.error("`cbind`");
        }
        self.expect(b'(')?;
        let successes = self.ident()?;
        self.expect(b',')?;
        let failures = self.ident()?;
        self.expect(b')')?;
        self.expect(b'~')?;

        let mut intercept = false;
        let mut fixed = Vec::new();
        let mut varying = Vec::new();
        loop {
            let at = self.pos;
            match self.term()? {
                Term::Intercept if intercept => {
                    return Err(FormulaError::DuplicateTerm("1".into()));
                }
                Term::Intercept => intercept = true,
                Term::Fixed(name) => fixed.push(name),
                Term::Varying(v) => varying.push(v),
            }
            debug_assert!(self.pos > at);
            match self.peek() {
                None => break,
                Some(b'+') => self.pos += 1,
                Some(b'*') | Some(b'/') | Some(b'-') => return self.unsupported(1),
                Some(_) => return self.error("`+` or end of input"),
            }
        }
        Ok(Formula {
            response: (successes, failures),
            intercept,
            fixed,
            varying,
        })
    }

    fn unsupported<T>(&self, len: usize) -> Result<T, FormulaError> {
        let end = (self.pos + len).min(self.src.len());
        Err(FormulaError::Unsupported {
            offset: self.pos,
            construct: String::from_utf8_lossy(&self.src[self.pos..end]).into_owned(),
        })
    }

    fn term(&mut self) -> Result<Term, FormulaError> {
        match self.peek() {
            Some(b'1') => {
                self.one()?;
                Ok(Term::Intercept)
            }
            Some(b'(') => {
                self.pos += 1;
                self.varying().map(Term::Varying)
            }
            Some(b) if b.is_ascii_alphabetic() => Ok(Term::Fixed(self.ident()?)),
            _ => self.error("term"),
        }
    }

    fn varying(&mut self) -> Result<VaryingTerm, FormulaError> {
        self.one()?;
        let mut slopes = Vec::new();
        if self.peek() == Some(b'+') {
            self.pos += 1;
            slopes.push(self.ident()?);
        }
        match self.peek() {
            Some(b'|') => {
                if self.src.get(self.pos + 1) == Some(&b'|') {
                    return self.unsupported(2);
                }
                self.pos += 1;
            }
            _ => return self.error("`|`"),
        }
        let mut grouping = vec![self.ident()?];
        loop {
            match self.peek() {
                Some(b':') => {
                    self.pos += 1;
                    grouping.push(self.ident()?);
                }
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                Some(b'/') | Some(b'*') => return self.unsupported(1),
                _ => return self.error("`:` or `)`"),
            }
        }
        Ok(VaryingTerm {
            grouping,
            has_intercept: true,
            slopes,
        })
    }
}

/// One row of the term table: a varying term and its group count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TermRow {
    pub label: String,
    pub cardinality: usize,
    /// Effect columns the term contributes (intercept plus slopes).
    pub columns: usize,
}

impl TermRow {
    /// Effect parameters contributed: cardinality once per column.
    pub fn parameters(&self) -> usize {
        self.cardinality * self.columns
    }
}

pub fn term_table(f: &Formula, specs: &[FactorSpec]) -> Result<Vec<TermRow>, FormulaError> {
    f.varying
        .iter()
        .map(|t| {
            let cardinality = t
                .grouping
                .iter()
                .map(|g| {
                    specs
                        .iter()
                        .find(|s| &s.name == g)
                        .map(FactorSpec::len)
                        .ok_or_else(|| FormulaError::UnknownFactor(g.clone()))
                })
                .product::<Result<usize, _>>()?;
            Ok(TermRow {
                label: t.label(),
                cardinality,
                columns: t.n_columns(),
            })
        })
        .collect()
}
