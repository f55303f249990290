//! Lexer and recursive-descent parser for specification files.
//!
//! Binding, tightest first: `not` / `always` / `eventually`, `until`, `and`,
//! `or`, `implies` (right associative). Statements may be separated by `;`
//! but need not be.

use super::rule::{FairnessRule, Guard, Spec, Statement, DEFAULT_GUARD_K};
use super::{
    Comparator, Formula, Interval, Metric, MetricAtom, Predicate, Rhs, SignalAtom, StlError,
    DEFAULT_TOLERANCE,
};
use crate::metrics::Axis;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Pipe,
    Semi,
    Cmp(Comparator),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    text: String,
    line: usize,
    column: usize,
}

const KEYWORDS: &[&str] = &[
    "not", "and", "or", "implies", "always", "eventually", "until", "if", "then", "keep", "tol",
];

fn lex(src: &str) -> Result<Vec<Token>, StlError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let simple = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            '|' => Some(Tok::Pipe),
            ';' => Some(Tok::Semi),
            _ => None,
        };
        let tok = if let Some(t) = simple {
            i += 1;
            t
        } else if matches!(c, '=' | '<' | '>') {
            let next = chars.get(i + 1).copied();
            let (cmp, width) = match (c, next) {
                ('=', Some('=')) => (Comparator::Eq, 2),
                ('=', _) => (Comparator::Eq, 1),
                ('<', Some('=')) => (Comparator::Le, 2),
                ('<', _) => (Comparator::Lt, 1),
                ('>', Some('=')) => (Comparator::Ge, 2),
                _ => (Comparator::Gt, 1),
            };
            i += width;
            Tok::Cmp(cmp)
        } else if c.is_ascii_digit() || c == '.' || ((c == '-' || c == '+') && i + 1 < chars.len()) {
            // sign, digits, fraction, exponent; a sign may also prefix `inf`
            let mut j = i;
            if chars[j] == '-' || chars[j] == '+' {
                j += 1;
            }
            if chars[j..].starts_with(&['i', 'n', 'f']) {
                j += 3;
            } else {
                while j < chars.len() && (chars[j].is_ascii_digit() || chars[j] == '.') {
                    j += 1;
                }
                if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                    let mut k = j + 1;
                    if k < chars.len() && (chars[k] == '-' || chars[k] == '+') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        j = k;
                        while j < chars.len() && chars[j].is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
            }
            let text: String = chars[i..j].iter().collect();
            let value = text.parse::<f64>().map_err(|_| StlError::Syntax {
                line,
                column: col,
                token: text.clone(),
                message: "malformed number".into(),
            })?;
            i = j;
            Tok::Number(value)
        } else if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            if text == "inf" {
                Tok::Number(f64::INFINITY)
            } else {
                Tok::Ident(text)
            }
        } else {
            return Err(StlError::Syntax {
                line,
                column: col,
                token: c.to_string(),
                message: "unexpected character".into(),
            });
        };
        let text: String = chars[start..i].iter().collect();
        out.push(Token {
            tok,
            text,
            line,
            column: col,
        });
        col += i - start;
    }
    out.push(Token {
        tok: Tok::Eof,
        text: "<end of input>".into(),
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

fn is_kw(t: &Tok, kw: &str) -> bool {
    matches!(t, Tok::Ident(s) if s == kw)
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn peek_at(&self, offset: usize) -> &Token {
        let i = (self.pos + offset).min(self.tokens.len() - 1);
        &self.tokens[i]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, StlError> {
        let t = self.peek();
        Err(StlError::Syntax {
            line: t.line,
            column: t.column,
            token: t.text.clone(),
            message: message.into(),
        })
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if is_kw(&self.peek().tok, kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, StlError> {
        if self.peek().tok == want {
            Ok(self.bump())
        } else {
            self.error(format!("expected {what}"))
        }
    }

    fn spec(&mut self) -> Result<Spec, StlError> {
        let mut items = Vec::new();
        loop {
            while self.peek().tok == Tok::Semi {
                self.bump();
            }
            if self.peek().tok == Tok::Eof {
                break;
            }
            items.push(self.statement()?);
        }
        Ok(Spec { items })
    }

    fn statement(&mut self) -> Result<Statement, StlError> {
        if !is_kw(&self.peek().tok, "if") {
            return Ok(Statement::Formula(self.formula()?));
        }
        let at = self.bump();
        let guard = self.guard()?;
        if !self.eat_kw("then") {
            return self.error("expected `then`");
        }
        let body = self.formula()?;
        FairnessRule::from_parts(guard, body).map(Statement::Rule).map_err(|e| match e {
            StlError::UnsupportedRuleShape(m) => {
                StlError::UnsupportedRuleShape(format!("rule at {}:{}: {m}", at.line, at.column))
            }
            other => other,
        })
    }

    fn guard(&mut self) -> Result<Guard, StlError> {
        self.expect(Tok::Pipe, "`|` opening the guard")?;
        let (metric, axis, args) = self.metric_head()?;
        if metric != Metric::Pearson {
            return self.error("guard must be a PC atom");
        }
        self.expect(Tok::Pipe, "`|` closing the guard")?;
        let k = if self.peek().tok == Tok::Cmp(Comparator::Ge) {
            self.bump();
            self.number()?
        } else {
            DEFAULT_GUARD_K
        };
        Ok(Guard {
            axis,
            attribute: args[0].clone(),
            state: args[1].clone(),
            k,
        })
    }

    fn formula(&mut self) -> Result<Formula, StlError> {
        let lhs = self.disjunction()?;
        if self.eat_kw("implies") {
            let rhs = self.formula()?;
            return Ok(Formula::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn disjunction(&mut self) -> Result<Formula, StlError> {
        let mut f = self.conjunction()?;
        while self.eat_kw("or") {
            f = Formula::or(f, self.conjunction()?);
        }
        Ok(f)
    }

    fn conjunction(&mut self) -> Result<Formula, StlError> {
        let mut f = self.until()?;
        while self.eat_kw("and") {
            f = Formula::and(f, self.until()?);
        }
        Ok(f)
    }

    fn until(&mut self) -> Result<Formula, StlError> {
        let mut f = self.unary()?;
        while self.eat_kw("until") {
            let i = self.interval()?;
            let rhs = self.unary()?;
            f = Formula::Until(i, Box::new(f), Box::new(rhs));
        }
        Ok(f)
    }

    fn unary(&mut self) -> Result<Formula, StlError> {
        if self.eat_kw("not") {
            return Ok(Formula::not(self.unary()?));
        }
        if self.eat_kw("always") {
            let i = self.interval()?;
            return Ok(Formula::Always(i, Box::new(self.unary()?)));
        }
        if self.eat_kw("eventually") {
            let i = self.interval()?;
            return Ok(Formula::Eventually(i, Box::new(self.unary()?)));
        }
        if self.peek().tok == Tok::LParen {
            self.bump();
            let f = self.formula()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(f);
        }
        self.atom()
    }

    fn interval(&mut self) -> Result<Interval, StlError> {
        let open = self.expect(Tok::LBracket, "`[`")?;
        let a = self.step()?;
        self.expect(Tok::Comma, "`,`")?;
        let b = self.step()?;
        self.expect(Tok::RBracket, "`]`")?;
        Interval::new(a, b).ok_or(StlError::NegativeInterval {
            a,
            b,
            line: open.line,
            column: open.column,
        })
    }

    fn step(&mut self) -> Result<usize, StlError> {
        let t = self.peek().clone();
        if matches!(t.tok, Tok::Number(_)) && t.text.chars().all(|c| c.is_ascii_digit()) {
            self.bump();
            return t.text.parse().or_else(|_| self.error("interval bound too large"));
        }
        self.error("expected a non-negative integer step")
    }

    fn number(&mut self) -> Result<f64, StlError> {
        match self.peek().tok {
            Tok::Number(v) => {
                self.bump();
                Ok(v)
            }
            _ => self.error("expected a number"),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, StlError> {
        match &self.peek().tok {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => self.error(format!("expected {what}")),
        }
    }

    /// `metric_axis ( id [, id] )`
    fn metric_head(&mut self) -> Result<(Metric, Axis, Vec<String>), StlError> {
        let head = self.peek().clone();
        let name = self.ident("a metric")?;
        let unknown = || StlError::UnknownMetric {
            name: name.clone(),
            line: head.line,
            column: head.column,
        };
        let (m, ax) = name.rsplit_once('_').ok_or_else(unknown)?;
        let metric = Metric::from_name(m).ok_or_else(unknown)?;
        let axis: Axis = ax.to_ascii_lowercase().parse().map_err(|_| unknown())?;
        self.expect(Tok::LParen, "`(`")?;
        let mut args = vec![self.ident("an identifier")?];
        while self.peek().tok == Tok::Comma {
            self.bump();
            args.push(self.ident("an identifier")?);
        }
        let (lo, hi) = metric.arity();
        if args.len() < lo || args.len() > hi {
            return self.error(format!(
                "{} takes {} argument(s), got {}",
                metric.name(),
                if lo == hi { lo.to_string() } else { format!("{lo} or {hi}") },
                args.len()
            ));
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok((metric, axis, args))
    }

    fn tolerance(&mut self) -> Result<f64, StlError> {
        if self.eat_kw("tol") {
            let v = self.number()?;
            if !(v > 0.0) {
                return self.error("tolerance must be positive");
            }
            return Ok(v);
        }
        Ok(DEFAULT_TOLERANCE)
    }

    fn atom(&mut self) -> Result<Formula, StlError> {
        if !matches!(self.peek().tok, Tok::Ident(_)) {
            return self.error("expected a formula");
        }
        if self.peek_at(1).tok != Tok::LParen {
            let name = self.ident("a signal name")?;
            let cmp = match self.peek().tok {
                Tok::Cmp(c) => {
                    self.bump();
                    c
                }
                _ => return self.error("expected a comparison"),
            };
            let rhs = self.number()?;
            let tolerance = self.tolerance()?;
            return Ok(Formula::Predicate(Predicate::Signal(SignalAtom {
                name,
                cmp,
                rhs,
                tolerance,
            })));
        }
        let (metric, axis, args) = self.metric_head()?;
        let (cmp, rhs) = match self.peek().tok {
            Tok::Cmp(c) => {
                self.bump();
                let rhs = if self.eat_kw("keep") {
                    if !matches!(metric, Metric::Mean | Metric::Std) {
                        return self.error("`keep` applies to mean and std only");
                    }
                    Rhs::Keep
                } else {
                    Rhs::Value(self.number()?)
                };
                (c, rhs)
            }
            // bare atoms: decorrelate, or preserve the reference statistic
            _ => match metric {
                Metric::Mean | Metric::Std => (Comparator::Eq, Rhs::Keep),
                Metric::GroupLoss => return self.error("group loss needs a bound"),
                _ => (Comparator::Eq, Rhs::Value(0.0)),
            },
        };
        let tolerance = self.tolerance()?;
        Ok(Formula::Predicate(Predicate::Metric(MetricAtom {
            metric,
            axis,
            args,
            cmp,
            rhs,
            tolerance,
        })))
    }
}

/// Parse a specification file into guarded rules and free formulas.
pub fn parse_spec(text: &str) -> Result<Spec, StlError> {
    let mut p = Parser {
        tokens: lex(text)?,
        pos: 0,
    };
    p.spec()
}

/// Parse exactly one free formula.
pub fn parse_formula(text: &str) -> Result<Formula, StlError> {
    let mut p = Parser {
        tokens: lex(text)?,
        pos: 0,
    };
    let f = p.formula()?;
    if p.peek().tok != Tok::Eof {
        return p.error("trailing input after formula");
    }
    Ok(f)
}

impl std::str::FromStr for Formula {
    type Err = StlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s)
    }
}
