//! Pretty-printing in the concrete syntax accepted by the parser.

use std::fmt;

use super::rule::{FairnessRule, Spec, Statement};
use super::{Formula, MetricAtom, Predicate, Rhs, SignalAtom, DEFAULT_TOLERANCE};

fn write_tolerance(f: &mut fmt::Formatter<'_>, tolerance: f64) -> fmt::Result {
    if tolerance != DEFAULT_TOLERANCE {
        write!(f, " tol {tolerance}")?;
    }
    Ok(())
}

impl fmt::Display for MetricAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_{}({}) {} ",
            self.metric.name(),
            self.axis,
            self.args.join(", "),
            self.cmp.symbol()
        )?;
        match self.rhs {
            Rhs::Keep => f.write_str("keep")?,
            Rhs::Value(v) => write!(f, "{v}")?,
        }
        write_tolerance(f, self.tolerance)
    }
}

impl fmt::Display for SignalAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.name, self.cmp.symbol(), self.rhs)?;
        write_tolerance(f, self.tolerance)
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Metric(m) => m.fmt(f),
            Predicate::Signal(s) => s.fmt(f),
        }
    }
}

// larger binds tighter
fn precedence(f: &Formula) -> u8 {
    match f {
        Formula::Implies(..) => 1,
        Formula::Or(..) => 2,
        Formula::And(..) => 3,
        Formula::Until(..) => 4,
        Formula::Not(_) | Formula::Always(..) | Formula::Eventually(..) => 5,
        Formula::Predicate(_) => 6,
    }
}

fn child(f: &mut fmt::Formatter<'_>, c: &Formula, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({c})")
    } else {
        write!(f, "{c}")
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = precedence(self);
        match self {
            Formula::Predicate(a) => a.fmt(f),
            Formula::Not(c) => {
                f.write_str("not ")?;
                child(f, c, precedence(c) < p)
            }
            Formula::Always(i, c) | Formula::Eventually(i, c) => {
                let kw = if matches!(self, Formula::Always(..)) { "always" } else { "eventually" };
                write!(f, "{kw}{i} ")?;
                child(f, c, precedence(c) < p)
            }
            Formula::And(l, r) | Formula::Or(l, r) => {
                let kw = if matches!(self, Formula::And(..)) { "and" } else { "or" };
                child(f, l, precedence(l) < p)?;
                write!(f, " {kw} ")?;
                child(f, r, precedence(r) <= p)
            }
            Formula::Until(i, l, r) => {
                child(f, l, precedence(l) < p)?;
                write!(f, " until{i} ")?;
                child(f, r, precedence(r) <= p)
            }
            Formula::Implies(l, r) => {
                child(f, l, precedence(l) <= p)?;
                f.write_str(" implies ")?;
                child(f, r, precedence(r) < p)
            }
        }
    }
}

impl fmt::Display for FairnessRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = &self.guard;
        write!(
            f,
            "if |PC_{}({}, {})| >= {} then {}",
            g.axis,
            g.attribute,
            g.state,
            g.k,
            self.body()
        )
    }
}

impl fmt::Display for Spec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for item in &self.items {
            match item {
                Statement::Rule(r) => writeln!(f, "{r}")?,
                Statement::Formula(x) => writeln!(f, "{x}")?,
            }
        }
        Ok(())
    }
}
