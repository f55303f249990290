//! Guarded fairness rules: `if |PC(X, Y)| >= k then always[a,b] (targets)`.

use serde::{Deserialize, Serialize};

use super::{Comparator, Formula, Interval, Metric, MetricAtom, Predicate, StlError};
use crate::metrics::{Axis, CorrelationKind};

/// Guard threshold used when a rule omits `>= k`.
pub const DEFAULT_GUARD_K: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guard {
    pub axis: Axis,
    pub attribute: String,
    pub state: String,
    pub k: f64,
}

impl Guard {
    pub fn fires(&self, pc: f64) -> bool {
        pc.abs() >= self.k
    }
}

/// A guard plus the Table-1 body: correlation targets followed by the mean
/// and std atoms, all on the guard's axis and state channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRule {
    pub guard: Guard,
    pub window: Interval,
    pub targets: Vec<MetricAtom>,
}

impl FairnessRule {
    /// `if |PC(attribute, state)| >= k then always[0, horizon] (PC == c and mean == keep and std == keep)`
    pub fn single(axis: Axis, attribute: &str, state: &str, k: f64, c: f64, horizon: usize) -> Self {
        FairnessRule {
            guard: Guard {
                axis,
                attribute: attribute.to_string(),
                state: state.to_string(),
                k,
            },
            window: Interval { a: 0, b: horizon },
            targets: vec![
                MetricAtom::correlation(CorrelationKind::Pearson, axis, attribute, state, c),
                MetricAtom::keep(Metric::Mean, axis, state),
                MetricAtom::keep(Metric::Std, axis, state),
            ],
        }
    }

    pub(crate) fn from_parts(guard: Guard, body: Formula) -> Result<Self, StlError> {
        let shape = |m: &str| StlError::UnsupportedRuleShape(m.to_string());
        let (window, atoms) = match body {
            Formula::Always(i, inner) => (i, flatten(*inner)?),
            other @ Formula::And(..) => {
                let mut window = None;
                let mut atoms = Vec::new();
                for part in conjuncts(other) {
                    let Formula::Always(i, inner) = part else {
                        return Err(shape("body must be always[a,b] over a conjunction of atoms"));
                    };
                    if window.is_some_and(|w| w != i) {
                        return Err(shape("conjuncts use different intervals"));
                    }
                    window = Some(i);
                    atoms.extend(flatten(*inner)?);
                }
                (window.expect("a conjunction has two parts"), atoms)
            }
            _ => return Err(shape("body must be always[a,b] over a conjunction of atoms")),
        };

        let mut correlations = Vec::new();
        let (mut mean, mut std) = (None, None);
        for atom in atoms {
            if atom.axis != guard.axis {
                return Err(shape(&format!("{atom} is not on the guard's {} axis", guard.axis)));
            }
            if atom.state() != Some(guard.state.as_str()) {
                return Err(shape(&format!("{atom} does not constrain {}", guard.state)));
            }
            if atom.cmp != Comparator::Eq {
                return Err(shape(&format!("{atom} is not an equality")));
            }
            let slot = match atom.metric {
                Metric::Mean => &mut mean,
                Metric::Std => &mut std,
                Metric::GroupLoss => return Err(shape("group loss does not belong in a static rule")),
                _ => {
                    correlations.push(atom);
                    continue;
                }
            };
            if slot.is_some() {
                return Err(shape(&format!("repeated {} target", atom.metric.name())));
            }
            *slot = Some(atom);
        }
        if correlations.is_empty() {
            return Err(shape("no correlation target"));
        }
        let mean = mean.unwrap_or_else(|| MetricAtom::keep(Metric::Mean, guard.axis, &guard.state));
        let std = std.unwrap_or_else(|| MetricAtom::keep(Metric::Std, guard.axis, &guard.state));
        correlations.push(mean);
        correlations.push(std);
        Ok(FairnessRule {
            guard,
            window,
            targets: correlations,
        })
    }

    pub fn axis(&self) -> Axis {
        self.guard.axis
    }

    pub fn correlation_targets(&self) -> impl Iterator<Item = &MetricAtom> {
        self.targets.iter().filter(|a| a.metric.correlation().is_some())
    }

    pub fn mean_target(&self) -> &MetricAtom {
        self.targets.iter().find(|a| a.metric == Metric::Mean).expect("rule invariant")
    }

    pub fn std_target(&self) -> &MetricAtom {
        self.targets.iter().find(|a| a.metric == Metric::Std).expect("rule invariant")
    }

    /// `always[a,b] (t1 and t2 and ...)`
    pub fn body(&self) -> Formula {
        self.body_over(self.window)
    }

    /// The body with its window clipped to a trace of `len` steps; `None`
    /// when the window starts past the end.
    pub fn body_clamped(&self, len: usize) -> Option<Formula> {
        if len == 0 || self.window.a >= len {
            return None;
        }
        Some(self.body_over(Interval {
            a: self.window.a,
            b: self.window.b.min(len - 1),
        }))
    }

    /// The body over an explicit window.
    pub fn body_over(&self, window: Interval) -> Formula {
        let conj = Formula::conjunction(self.targets.iter().cloned().map(Formula::metric))
            .expect("rule has targets");
        Formula::Always(window, Box::new(conj))
    }
}

fn conjuncts(f: Formula) -> Vec<Formula> {
    match f {
        Formula::And(l, r) => {
            let mut v = conjuncts(*l);
            v.extend(conjuncts(*r));
            v
        }
        other => vec![other],
    }
}

fn flatten(f: Formula) -> Result<Vec<MetricAtom>, StlError> {
    conjuncts(f)
        .into_iter()
        .map(|part| match part {
            Formula::Predicate(Predicate::Metric(m)) => Ok(m),
            other => Err(StlError::UnsupportedRuleShape(format!(
                "{other} is not a metric atom"
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Statement {
    Rule(FairnessRule),
    Formula(Formula),
}

/// A parsed specification file, statements in source order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Spec {
    pub items: Vec<Statement>,
}

impl Spec {
    pub fn rules(&self) -> impl Iterator<Item = &FairnessRule> {
        self.items.iter().filter_map(|s| match s {
            Statement::Rule(r) => Some(r),
            _ => None,
        })
    }

    pub fn formulas(&self) -> impl Iterator<Item = &Formula> {
        self.items.iter().filter_map(|s| match s {
            Statement::Formula(f) => Some(f),
            _ => None,
        })
    }
}
