//! A small signal temporal logic for fairness specifications.
//!
//! Time is discrete: interval bounds are step indices into a trace. A trace
//! is anything implementing [`Trace`]; the crate ships traces over named
//! signals, over panel partitions, and (in `dynamic_guard`) over prediction
//! blocks.
//!
//! ```text
//! # static rule, Table-1 shape
//! if |PC_spatial(income, demand)| >= 0.1 then
//!     always[0,1999] (PC_spatial(income, demand) == 0
//!                     and mean_spatial(demand) == keep
//!                     and std_spatial(demand) == keep)
//!
//! # free formula over raw signals
//! x > 0 until[0,3] y > 0
//! ```

mod eval;
mod parse;
mod print;
mod rule;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Axis, CorrelationKind, MetricsError};

pub use eval::{evaluate, instantiate_eventually, PanelTrace, SignalTrace, Trace};
pub use parse::parse_spec;
pub use rule::{FairnessRule, Guard, Spec, Statement, DEFAULT_GUARD_K};
pub use parse::parse_formula;

/// Tolerance for `==` comparisons unless a `tol` clause overrides it.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StlError {
    #[error("syntax error at {line}:{column} near {token:?}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        token: String,
        message: String,
    },
    #[error("unknown metric {name:?} at {line}:{column}")]
    UnknownMetric {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("interval [{a},{b}] at {line}:{column} has a > b")]
    NegativeInterval {
        a: usize,
        b: usize,
        line: usize,
        column: usize,
    },
    #[error("window ends at step {end} but the trace has {len} steps")]
    WindowOutOfRange { end: usize, len: usize },
    #[error("outermost operator is not eventually")]
    NotEventually,
    #[error("rule is not of the guarded always-conjunction shape: {0}")]
    UnsupportedRuleShape(String),
    #[error("trace has no signal {0:?}")]
    UnknownSignal(String),
    #[error("trace cannot evaluate {0}")]
    UnsupportedAtom(String),
    #[error("metric: {0}")]
    Metric(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Pearson,
    Spearman,
    Kendall,
    Mean,
    Std,
    GroupLoss,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Pearson => "PC",
            Metric::Spearman => "SC",
            Metric::Kendall => "KC",
            Metric::Mean => "mean",
            Metric::Std => "std",
            Metric::GroupLoss => "gloss",
        }
    }

    fn from_name(s: &str) -> Option<Metric> {
        [
            Metric::Pearson,
            Metric::Spearman,
            Metric::Kendall,
            Metric::Mean,
            Metric::Std,
            Metric::GroupLoss,
        ]
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn correlation(self) -> Option<CorrelationKind> {
        match self {
            Metric::Pearson => Some(CorrelationKind::Pearson),
            Metric::Spearman => Some(CorrelationKind::Spearman),
            Metric::Kendall => Some(CorrelationKind::Kendall),
            _ => None,
        }
    }

    /// Number of identifier arguments accepted: (min, max).
    fn arity(self) -> (usize, usize) {
        match self {
            Metric::Pearson | Metric::Spearman | Metric::Kendall => (2, 2),
            Metric::Mean | Metric::Std => (1, 1),
            Metric::GroupLoss => (1, 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    Eq,
    Le,
    Ge,
    Lt,
    Gt,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "==",
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
            Comparator::Lt => "<",
            Comparator::Gt => ">",
        }
    }

    /// Equality is `|lhs - rhs| <= tolerance`; the rest are exact.
    pub fn holds(self, lhs: f64, rhs: f64, tolerance: f64) -> bool {
        match self {
            Comparator::Eq => (lhs - rhs).abs() <= tolerance,
            Comparator::Le => lhs <= rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Lt => lhs < rhs,
            Comparator::Gt => lhs > rhs,
        }
    }
}

/// Right-hand side of a metric atom. `Keep` stands for the value the same
/// metric takes on the reference (unadjusted) data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rhs {
    Value(f64),
    Keep,
}

impl Rhs {
    pub fn value(self) -> Option<f64> {
        match self {
            Rhs::Value(v) => Some(v),
            Rhs::Keep => None,
        }
    }
}

/// `metric_axis(args...) cmp rhs`.
///
/// Arguments: correlations take `(attribute, state)`, mean and std take
/// `(state)`, group loss takes `(group[, prediction])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAtom {
    pub metric: Metric,
    pub axis: Axis,
    pub args: Vec<String>,
    pub cmp: Comparator,
    pub rhs: Rhs,
    pub tolerance: f64,
}

impl MetricAtom {
    pub fn correlation(kind: CorrelationKind, axis: Axis, attribute: &str, state: &str, c: f64) -> Self {
        let metric = match kind {
            CorrelationKind::Pearson => Metric::Pearson,
            CorrelationKind::Spearman => Metric::Spearman,
            CorrelationKind::Kendall => Metric::Kendall,
        };
        MetricAtom {
            metric,
            axis,
            args: vec![attribute.to_string(), state.to_string()],
            cmp: Comparator::Eq,
            rhs: Rhs::Value(c),
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    /// `mean` or `std` of `state` kept at its reference value.
    pub fn keep(metric: Metric, axis: Axis, state: &str) -> Self {
        MetricAtom {
            metric,
            axis,
            args: vec![state.to_string()],
            cmp: Comparator::Eq,
            rhs: Rhs::Keep,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    /// `gloss(group) <= zeta`
    pub fn group_loss(axis: Axis, group: &str, zeta: f64) -> Self {
        MetricAtom {
            metric: Metric::GroupLoss,
            axis,
            args: vec![group.to_string()],
            cmp: Comparator::Le,
            rhs: Rhs::Value(zeta),
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    /// Protected attribute of a correlation atom.
    pub fn attribute(&self) -> Option<&str> {
        match self.metric.correlation() {
            Some(_) => Some(&self.args[0]),
            None => None,
        }
    }

    /// State channel (or prediction identifier for group loss).
    pub fn state(&self) -> Option<&str> {
        match self.metric {
            Metric::Mean | Metric::Std => Some(&self.args[0]),
            _ => self.args.get(1).map(String::as_str),
        }
    }

    pub fn group(&self) -> Option<&str> {
        match self.metric {
            Metric::GroupLoss => Some(&self.args[0]),
            _ => None,
        }
    }
}

/// `name cmp value` over a raw named signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAtom {
    pub name: String,
    pub cmp: Comparator,
    pub rhs: f64,
    pub tolerance: f64,
}

impl SignalAtom {
    pub fn new(name: &str, cmp: Comparator, rhs: f64) -> Self {
        SignalAtom {
            name: name.to_string(),
            cmp,
            rhs,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    Metric(MetricAtom),
    Signal(SignalAtom),
}

/// Closed step interval `[a, b]`, `a <= b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub a: usize,
    pub b: usize,
}

impl Interval {
    pub fn new(a: usize, b: usize) -> Option<Interval> {
        (a <= b).then_some(Interval { a, b })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Formula {
    Predicate(Predicate),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Always(Interval, Box<Formula>),
    Eventually(Interval, Box<Formula>),
    /// `lhs until[a,b] rhs`
    Until(Interval, Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn signal(name: &str, cmp: Comparator, rhs: f64) -> Formula {
        Formula::Predicate(Predicate::Signal(SignalAtom::new(name, cmp, rhs)))
    }

    pub fn metric(atom: MetricAtom) -> Formula {
        Formula::Predicate(Predicate::Metric(atom))
    }

    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }

    pub fn and(l: Formula, r: Formula) -> Formula {
        Formula::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: Formula, r: Formula) -> Formula {
        Formula::Or(Box::new(l), Box::new(r))
    }

    pub fn implies(l: Formula, r: Formula) -> Formula {
        Formula::Implies(Box::new(l), Box::new(r))
    }

    pub fn always(a: usize, b: usize, f: Formula) -> Formula {
        Formula::Always(Interval { a, b }, Box::new(f))
    }

    pub fn eventually(a: usize, b: usize, f: Formula) -> Formula {
        Formula::Eventually(Interval { a, b }, Box::new(f))
    }

    pub fn until(a: usize, b: usize, l: Formula, r: Formula) -> Formula {
        Formula::Until(Interval { a, b }, Box::new(l), Box::new(r))
    }

    /// Left-nested conjunction; `None` for an empty list.
    pub fn conjunction(parts: impl IntoIterator<Item = Formula>) -> Option<Formula> {
        parts.into_iter().reduce(Formula::and)
    }

    /// Nesting depth; a predicate has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Formula::Predicate(_) => 0,
            Formula::Not(f) | Formula::Always(_, f) | Formula::Eventually(_, f) => 1 + f.depth(),
            Formula::And(l, r) | Formula::Or(l, r) | Formula::Implies(l, r) | Formula::Until(_, l, r) => {
                1 + l.depth().max(r.depth())
            }
        }
    }

    /// Furthest step past `t` the formula looks at.
    pub fn horizon(&self) -> usize {
        match self {
            Formula::Predicate(_) => 0,
            Formula::Not(f) => f.horizon(),
            Formula::And(l, r) | Formula::Or(l, r) | Formula::Implies(l, r) => l.horizon().max(r.horizon()),
            Formula::Always(i, f) | Formula::Eventually(i, f) => i.b + f.horizon(),
            // the left operand is only read on [t, t+b)
            Formula::Until(i, l, r) => {
                let left = if i.b > 0 { i.b - 1 + l.horizon() } else { 0 };
                (i.b + r.horizon()).max(left)
            }
        }
    }
}
