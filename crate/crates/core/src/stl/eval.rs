//! Boolean semantics over finite discrete traces.

use std::collections::BTreeMap;

use super::{Formula, Metric, MetricAtom, Predicate, Rhs, StlError};
use crate::dataio::Panel;
use crate::metrics::{correlation_or_missing, mean, std_dev, Axis, MetricsError, Partition};

/// A finite trace the predicates of a formula can be read from.
pub trait Trace {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Left-hand value of a predicate at step `t`. `None` means the value is
    /// undefined there (a degenerate slice), which makes the predicate false.
    fn value(&self, p: &Predicate, t: usize) -> Result<Option<f64>, StlError>;

    /// What `keep` resolves to for `atom` at step `t`.
    fn keep_value(&self, atom: &MetricAtom, _t: usize) -> Result<Option<f64>, StlError> {
        Err(StlError::UnsupportedAtom(atom.to_string()))
    }
}

fn predicate_holds<T: Trace + ?Sized>(trace: &T, p: &Predicate, t: usize) -> Result<bool, StlError> {
    let Some(lhs) = trace.value(p, t)? else {
        return Ok(false);
    };
    let (cmp, rhs, tol) = match p {
        Predicate::Signal(s) => (s.cmp, s.rhs, s.tolerance),
        Predicate::Metric(m) => {
            let rhs = match m.rhs {
                Rhs::Value(v) => v,
                Rhs::Keep => match trace.keep_value(m, t)? {
                    Some(v) => v,
                    None => return Ok(false),
                },
            };
            (m.cmp, rhs, m.tolerance)
        }
    };
    Ok(cmp.holds(lhs, rhs, tol))
}

fn check_window(formula: &Formula, t: usize, len: usize) -> Result<(), StlError> {
    let end = t + formula.horizon();
    if end >= len {
        return Err(StlError::WindowOutOfRange { end, len });
    }
    Ok(())
}

/// Whether `(trace, t)` satisfies `formula`.
///
/// Windows are closed, `[t+a, t+b]`. For until, the left operand must hold
/// on `[t, t')` where `t'` is the witness of the right operand. Every window
/// the formula could read must fit in the trace, otherwise the result is
/// `WindowOutOfRange`, whether or not evaluation would short-circuit first.
pub fn evaluate<T: Trace + ?Sized>(formula: &Formula, trace: &T, t: usize) -> Result<bool, StlError> {
    check_window(formula, t, trace.len())?;
    eval_at(formula, trace, t)
}

fn eval_at<T: Trace + ?Sized>(formula: &Formula, trace: &T, t: usize) -> Result<bool, StlError> {
    Ok(match formula {
        Formula::Predicate(p) => predicate_holds(trace, p, t)?,
        Formula::Not(f) => !eval_at(f, trace, t)?,
        Formula::And(l, r) => eval_at(l, trace, t)? && eval_at(r, trace, t)?,
        Formula::Or(l, r) => eval_at(l, trace, t)? || eval_at(r, trace, t)?,
        Formula::Implies(l, r) => !eval_at(l, trace, t)? || eval_at(r, trace, t)?,
        Formula::Always(i, f) => {
            for s in t + i.a..=t + i.b {
                if !eval_at(f, trace, s)? {
                    return Ok(false);
                }
            }
            true
        }
        Formula::Eventually(i, f) => {
            for s in t + i.a..=t + i.b {
                if eval_at(f, trace, s)? {
                    return Ok(true);
                }
            }
            false
        }
        Formula::Until(i, l, r) => {
            let mut held_to = t;
            for s in t + i.a..=t + i.b {
                while held_to < s {
                    if !eval_at(l, trace, held_to)? {
                        return Ok(false);
                    }
                    held_to += 1;
                }
                if eval_at(r, trace, s)? {
                    return Ok(true);
                }
            }
            false
        }
    })
}

/// Concrete timestamps witnessing `eventually[a,b] φ` at `t`.
///
/// Returns the longest run of consecutive steps in `[t+a, t+b]` where `φ`
/// holds (the earliest on ties). When no run is longer than one step, every
/// satisfying step is returned instead. Empty when unsatisfied.
pub fn instantiate_eventually<T: Trace + ?Sized>(
    formula: &Formula,
    trace: &T,
    t: usize,
) -> Result<Vec<usize>, StlError> {
    let Formula::Eventually(i, f) = formula else {
        return Err(StlError::NotEventually);
    };
    check_window(formula, t, trace.len())?;
    let mut hits = Vec::new();
    for s in t + i.a..=t + i.b {
        if eval_at(f, trace, s)? {
            hits.push(s);
        }
    }
    let (mut best, mut run_start) = ((0, 0), 0);
    for k in 0..hits.len() {
        if k > 0 && hits[k] != hits[k - 1] + 1 {
            run_start = k;
        }
        if k + 1 - run_start > best.1 - best.0 {
            best = (run_start, k + 1);
        }
    }
    if best.1 - best.0 >= 2 {
        return Ok(hits[best.0..best.1].to_vec());
    }
    Ok(hits)
}

/// Named real-valued signals of a common length.
#[derive(Debug, Clone, Default)]
pub struct SignalTrace {
    signals: BTreeMap<String, Vec<f64>>,
    len: usize,
}

impl SignalTrace {
    pub fn new<S: Into<String>>(signals: impl IntoIterator<Item = (S, Vec<f64>)>) -> Result<Self, StlError> {
        let mut out = SignalTrace::default();
        for (i, (name, values)) in signals.into_iter().enumerate() {
            if i == 0 {
                out.len = values.len();
            } else if values.len() != out.len {
                return Err(MetricsError::LengthMismatch(out.len, values.len()).into());
            }
            out.signals.insert(name.into(), values);
        }
        Ok(out)
    }
}

impl Trace for SignalTrace {
    fn len(&self) -> usize {
        self.len
    }

    fn value(&self, p: &Predicate, t: usize) -> Result<Option<f64>, StlError> {
        match p {
            Predicate::Signal(s) => {
                let v = self
                    .signals
                    .get(&s.name)
                    .ok_or_else(|| StlError::UnknownSignal(s.name.clone()))?;
                Ok(Some(v[t]))
            }
            Predicate::Metric(m) => Err(StlError::UnsupportedAtom(m.to_string())),
        }
    }
}

/// A panel read one partition per step: step `i` is `partitions[i]`.
///
/// `keep` resolves against `reference`, normally the unadjusted panel.
pub struct PanelTrace<'a> {
    current: &'a Panel,
    reference: &'a Panel,
    axis: Axis,
    partitions: Vec<Partition>,
}

impl<'a> PanelTrace<'a> {
    pub fn new(
        current: &'a Panel,
        reference: &'a Panel,
        axis: Axis,
        partitions: Vec<Partition>,
    ) -> Result<Self, StlError> {
        if !current.same_shape(reference) {
            return Err(StlError::Metric(MetricsError::LengthMismatch(
                current.demand().len(),
                reference.demand().len(),
            )));
        }
        Ok(PanelTrace {
            current,
            reference,
            axis,
            partitions,
        })
    }

    fn gather(&self, panel: &Panel, channel: &str, t: usize) -> Result<Vec<f64>, StlError> {
        let data = panel
            .channel(channel)
            .map_err(|_| StlError::UnknownSignal(channel.to_string()))?;
        Ok(self.partitions[t].gather(data, panel.n_steps()))
    }

    fn metric_on(&self, panel: &Panel, m: &MetricAtom, t: usize) -> Result<Option<f64>, StlError> {
        if m.axis != self.axis {
            return Err(StlError::UnsupportedAtom(format!("{m} on a {} trace", self.axis)));
        }
        if let Some(kind) = m.metric.correlation() {
            let x = self.gather(panel, &m.args[0], t)?;
            let y = self.gather(panel, &m.args[1], t)?;
            return Ok(correlation_or_missing(kind, &x, &y));
        }
        let y: Vec<f64> = self
            .gather(panel, &m.args[0], t)?
            .into_iter()
            .filter(|v| v.is_finite())
            .collect();
        if y.is_empty() {
            return Ok(None);
        }
        match m.metric {
            Metric::Mean => Ok(Some(mean(&y))),
            Metric::Std => Ok(Some(std_dev(&y))),
            _ => Err(StlError::UnsupportedAtom(m.to_string())),
        }
    }
}

impl Trace for PanelTrace<'_> {
    fn len(&self) -> usize {
        self.partitions.len()
    }

    fn value(&self, p: &Predicate, t: usize) -> Result<Option<f64>, StlError> {
        match p {
            Predicate::Metric(m) => self.metric_on(self.current, m, t),
            Predicate::Signal(s) => Err(StlError::UnsupportedAtom(s.to_string())),
        }
    }

    fn keep_value(&self, atom: &MetricAtom, t: usize) -> Result<Option<f64>, StlError> {
        self.metric_on(self.reference, atom, t)
    }
}
