//! Per-partition adjustment of a panel under guarded fairness rules.
//!
//! A partition whose `|PC(X, Y)|` reaches the guard threshold is replaced by
//! the decoder's output; every other partition is copied verbatim. The
//! rule's `always[a,b]` window selects partitions by start timestamp.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Panel, Provenance};
use crate::decoder::{decode, DecodeError, DecodeProblem, Target};
use crate::metrics::{
    mean, pearson, slice_correlations, std_dev, summarize, Axis, CorrelationKind, MetricsError,
    Partition, SeriesSummary, SliceValue,
};
use crate::stl::{evaluate, FairnessRule, Interval, PanelTrace, Rhs, StlError, Trace};
use crate::trsolve::SolverConfig;

#[derive(Debug, Error)]
pub enum GuardError {
    #[error("panel has no channel {0:?}")]
    ChannelMissing(String),
    #[error("rules cannot be combined: {0}")]
    IncompatibleRules(String),
    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),
    #[error("panels differ in shape")]
    ShapeMismatch,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stl(#[from] StlError),
}

/// Default temporal partition length.
pub const DEFAULT_WINDOW: usize = 100;
/// Shortest partition the decoder is run on.
pub const MIN_PARTITION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub axis: Axis,
    /// Temporal window length; ignored for spatial plans.
    pub window: usize,
}

impl PartitionPlan {
    pub fn spatial() -> Self {
        PartitionPlan {
            axis: Axis::Spatial,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn temporal(window: usize) -> Self {
        PartitionPlan {
            axis: Axis::Temporal,
            window,
        }
    }

    pub fn validate(&self, panel: &Panel) -> Result<(), GuardError> {
        match self.axis {
            Axis::Temporal if self.window < MIN_PARTITION => Err(GuardError::InvalidPlan(format!(
                "temporal window {} is shorter than {MIN_PARTITION}",
                self.window
            ))),
            Axis::Spatial if panel.n_stations() < MIN_PARTITION => Err(GuardError::InvalidPlan(format!(
                "spatial partitions need at least {MIN_PARTITION} stations"
            ))),
            _ => Ok(()),
        }
    }

    /// Every partition of the panel, including short temporal remainders.
    pub fn partitions(&self, panel: &Panel) -> Vec<Partition> {
        crate::metrics::partitions(panel.n_stations(), panel.n_steps(), self.axis, self.window, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PartitionStatus {
    /// Guard did not fire; copied verbatim.
    Untouched,
    /// Outside the rule's time window.
    OutOfWindow,
    /// Remainder window shorter than the minimum partition.
    TooShort,
    /// Missing cells or a constant series; skipped.
    Degenerate,
    Adjusted { iterations: usize, restarts: usize },
    /// Decoder failed; copied verbatim.
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub partition: Partition,
    pub pc_before: Option<f64>,
    pub pc_after: Option<f64>,
    #[serde(flatten)]
    pub status: PartitionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: CorrelationKind,
    pub before: SeriesSummary,
    pub after: SeriesSummary,
    /// `(|avg before| - |avg after|) / |avg before| * 100` on signed averages.
    pub improvement_pct: f64,
    /// The same on the averages of magnitudes.
    pub abs_improvement_pct: f64,
}

/// Moment drift between two panels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentDrift {
    /// Mean over partitions of the squared change in the partition mean.
    pub partition_mean_mse: f64,
    pub partition_std_mse: f64,
    /// The same over each station's full series.
    pub global_mean_mse: f64,
    pub global_std_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub axis: Axis,
    pub attribute: String,
    pub state: String,
    pub metrics: Vec<MetricComparison>,
    pub drift: MomentDrift,
}

impl ComparisonReport {
    pub fn metric(&self, kind: CorrelationKind) -> &MetricComparison {
        self.metrics.iter().find(|m| m.metric == kind).expect("all kinds reported")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentReport {
    pub rules: Vec<String>,
    pub plan: PartitionPlan,
    pub partitions: usize,
    pub adjusted: usize,
    pub untouched: usize,
    pub out_of_window: usize,
    pub too_short: usize,
    pub degenerate: usize,
    pub failed: usize,
    /// Adjusted partitions as a share of all partitions.
    pub coverage_pct: f64,
    /// Squared moment changes over adjusted partitions only.
    pub adjusted_mean_mse: f64,
    pub adjusted_std_mse: f64,
    /// Whether the rule bodies hold on the adjusted partitions.
    pub stl_satisfied: bool,
    pub comparisons: Vec<ComparisonReport>,
    pub records: Vec<PartitionRecord>,
}

impl AdjustmentReport {
    pub fn all_converged(&self) -> bool {
        self.failed == 0
    }
}

/// `(|before| - |after|) / |before| * 100`, or 0 when `before` is 0.
pub fn improvement(before: f64, after: f64) -> f64 {
    if before.abs() == 0.0 {
        0.0
    } else {
        (before.abs() - after.abs()) / before.abs() * 100.0
    }
}

fn channel<'a>(panel: &'a Panel, name: &str) -> Result<&'a [f64], GuardError> {
    panel
        .channel(name)
        .map_err(|_| GuardError::ChannelMissing(name.to_string()))
}

fn sq(v: f64) -> f64 {
    v * v
}

/// Drift of partition and per-station moments of `state` from `before` to `after`.
pub fn moment_drift(before: &Panel, after: &Panel, state: &str, plan: &PartitionPlan) -> Result<MomentDrift, GuardError> {
    if !before.same_shape(after) {
        return Err(GuardError::ShapeMismatch);
    }
    let (y0, y1) = (channel(before, state)?, channel(after, state)?);
    let n_t = before.n_steps();
    let moments = |data: &[f64], p: &Partition| {
        let v: Vec<f64> = p.gather(data, n_t).into_iter().filter(|v| v.is_finite()).collect();
        if v.is_empty() {
            None
        } else {
            Some((mean(&v), std_dev(&v)))
        }
    };
    let drift = |parts: &[Partition]| {
        let (mut m, mut s, mut k) = (0.0, 0.0, 0usize);
        for p in parts {
            if let (Some(a), Some(b)) = (moments(y0, p), moments(y1, p)) {
                m += sq(a.0 - b.0);
                s += sq(a.1 - b.1);
                k += 1;
            }
        }
        if k == 0 {
            (0.0, 0.0)
        } else {
            (m / k as f64, s / k as f64)
        }
    };
    let (pm, ps) = drift(&plan.partitions(before));
    let stations: Vec<Partition> = (0..before.n_stations())
        .map(|s| Partition {
            station: Some(s),
            start: 0,
            len: n_t,
        })
        .collect();
    let (gm, gs) = drift(&stations);
    Ok(MomentDrift {
        partition_mean_mse: pm,
        partition_std_mse: ps,
        global_mean_mse: gm,
        global_std_mse: gs,
    })
}

/// Table-2 style comparison of correlation averages before and after.
///
/// Slices are those of `plan`: one per timestamp (spatial) or per station
/// window (temporal). Missing slices are excluded from the averages.
pub fn compare_report(
    before: &Panel,
    after: &Panel,
    attribute: &str,
    state: &str,
    plan: &PartitionPlan,
) -> Result<ComparisonReport, GuardError> {
    if !before.same_shape(after) {
        return Err(GuardError::ShapeMismatch);
    }
    channel(before, attribute)?;
    channel(after, state)?;
    let mut metrics = Vec::new();
    // slices too short to adjust would only add +-1 noise to the averages
    let slices = |panel: &Panel, kind| -> Result<Vec<SliceValue>, GuardError> {
        let mut v = slice_correlations(panel, attribute, state, kind, plan.axis, plan.window)?;
        v.retain(|s| s.len >= MIN_PARTITION);
        Ok(v)
    };
    for kind in CorrelationKind::ALL {
        let b = summarize(&slices(before, kind)?);
        let a = summarize(&slices(after, kind)?);
        metrics.push(MetricComparison {
            metric: kind,
            improvement_pct: improvement(b.mean.unwrap_or(0.0), a.mean.unwrap_or(0.0)),
            abs_improvement_pct: improvement(b.mean_abs.unwrap_or(0.0), a.mean_abs.unwrap_or(0.0)),
            before: b,
            after: a,
        });
    }
    Ok(ComparisonReport {
        axis: plan.axis,
        attribute: attribute.to_string(),
        state: state.to_string(),
        metrics,
        drift: moment_drift(before, after, state, plan)?,
    })
}

enum Outcome {
    Keep(PartitionStatus, Option<f64>),
    /// New values, status, guard PC and which rules fired.
    Replace(Vec<f64>, PartitionStatus, Option<f64>, Vec<bool>),
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn adjust_partition(
    panel: &Panel,
    rules: &[FairnessRule],
    partition: &Partition,
    solver: &SolverConfig,
) -> Result<Outcome, GuardError> {
    let n_t = panel.n_steps();
    let first = &rules[0];
    if partition.start < first.window.a || partition.start > first.window.b {
        return Ok(Outcome::Keep(PartitionStatus::OutOfWindow, None));
    }
    if partition.len < MIN_PARTITION {
        return Ok(Outcome::Keep(PartitionStatus::TooShort, None));
    }
    let y0 = partition.gather(channel(panel, &first.guard.state)?, n_t);
    if !finite(&y0) {
        return Ok(Outcome::Keep(PartitionStatus::Degenerate, None));
    }

    let mut targets = Vec::new();
    let mut guard_pc = None;
    let mut fired = vec![false; rules.len()];
    for (rule, fired) in rules.iter().zip(fired.iter_mut()) {
        let x = partition.gather(channel(panel, &rule.guard.attribute)?, n_t);
        if !finite(&x) {
            return Ok(Outcome::Keep(PartitionStatus::Degenerate, None));
        }
        let Ok(pc) = pearson(&x, &y0) else {
            return Ok(Outcome::Keep(PartitionStatus::Degenerate, None));
        };
        guard_pc.get_or_insert(pc);
        if !rule.guard.fires(pc) {
            continue;
        }
        *fired = true;
        for atom in rule.correlation_targets() {
            if atom.metric.correlation() != Some(CorrelationKind::Pearson) {
                return Ok(Outcome::Keep(
                    PartitionStatus::Failed {
                        reason: format!("{atom}: only PC targets can be decoded"),
                    },
                    guard_pc,
                ));
            }
            let attribute = partition.gather(channel(panel, &atom.args[0])?, n_t);
            if !finite(&attribute) {
                return Ok(Outcome::Keep(PartitionStatus::Degenerate, guard_pc));
            }
            targets.push(Target::Correlation {
                attribute,
                c: atom.rhs.value().unwrap_or(0.0),
            });
        }
    }
    if targets.is_empty() {
        return Ok(Outcome::Keep(PartitionStatus::Untouched, guard_pc));
    }
    let resolve = |rhs: Rhs, reference: f64| rhs.value().unwrap_or(reference);
    targets.push(Target::Mean(resolve(first.mean_target().rhs, mean(&y0))));
    targets.push(Target::Std(resolve(first.std_target().rhs, std_dev(&y0))));
    let problem = DecodeProblem { y0, targets };
    Ok(match decode(&problem, solver) {
        Ok(r) => Outcome::Replace(
            r.y1,
            PartitionStatus::Adjusted {
                iterations: r.outcome.iterations,
                restarts: r.restarts,
            },
            guard_pc,
            fired,
        ),
        Err(DecodeError::ConstantAttribute) => Outcome::Keep(PartitionStatus::Degenerate, guard_pc),
        Err(e) => Outcome::Keep(PartitionStatus::Failed { reason: e.to_string() }, guard_pc),
    })
}

fn check_compatible(panel: &Panel, rules: &[FairnessRule], plan: &PartitionPlan) -> Result<(), GuardError> {
    let Some(first) = rules.first() else {
        return Err(GuardError::IncompatibleRules("no rules".into()));
    };
    for r in rules {
        if r.axis() != plan.axis {
            return Err(GuardError::IncompatibleRules(format!(
                "rule on the {} axis with a {} partition plan",
                r.axis(),
                plan.axis
            )));
        }
        if r.guard.state != first.guard.state || r.window != first.window {
            return Err(GuardError::IncompatibleRules(
                "jointly solved rules must share the state channel and window".into(),
            ));
        }
        channel(panel, &r.guard.attribute)?;
        for a in r.correlation_targets() {
            channel(panel, &a.args[0])?;
        }
    }
    channel(panel, &first.guard.state)?;
    plan.validate(panel)
}

/// Apply one rule.
pub fn adjust(
    panel: &Panel,
    rule: &FairnessRule,
    plan: &PartitionPlan,
    solver: &SolverConfig,
) -> Result<(Panel, AdjustmentReport), GuardError> {
    adjust_joint(panel, std::slice::from_ref(rule), plan, solver)
}

/// Apply rules one after another, each on the previous output. Returns one
/// report per rule.
pub fn adjust_sequential(
    panel: &Panel,
    rules: &[FairnessRule],
    plan: &PartitionPlan,
    solver: &SolverConfig,
) -> Result<(Panel, Vec<AdjustmentReport>), GuardError> {
    let mut current = panel.clone();
    let mut reports = Vec::with_capacity(rules.len());
    for rule in rules {
        let (next, report) = adjust(&current, rule, plan, solver)?;
        current = next;
        reports.push(report);
    }
    Ok((current, reports))
}

/// Apply several rules at once: per partition, the correlation targets of
/// every rule whose guard fires go into one decode with shared mean and std
/// targets (taken from the first rule).
pub fn adjust_joint(
    panel: &Panel,
    rules: &[FairnessRule],
    plan: &PartitionPlan,
    solver: &SolverConfig,
) -> Result<(Panel, AdjustmentReport), GuardError> {
    check_compatible(panel, rules, plan)?;
    solver.validate().map_err(|e| GuardError::InvalidPlan(e.to_string()))?;
    let parts = plan.partitions(panel);
    let outcomes: Vec<Outcome> = parts
        .par_iter()
        .map(|p| adjust_partition(panel, rules, p, solver))
        .collect::<Result<_, _>>()?;

    let state = rules[0].guard.state.clone();
    let mut out = panel.clone();
    let n_t = panel.n_steps();
    let mut records = Vec::with_capacity(parts.len());
    let mut adjusted_parts: Vec<(Partition, Vec<bool>)> = Vec::new();
    let (mut mean_se, mut std_se) = (0.0, 0.0);
    {
        let y = out.channel_mut(&state).expect("checked");
        for (p, outcome) in parts.iter().zip(outcomes) {
            let (status, pc_before) = match outcome {
                Outcome::Keep(s, pc) => (s, pc),
                Outcome::Replace(y1, s, pc, fired) => {
                    let y0 = p.gather(y, n_t);
                    mean_se += sq(mean(&y1) - mean(&y0));
                    std_se += sq(std_dev(&y1) - std_dev(&y0));
                    for (i, v) in p.indices(n_t).into_iter().zip(y1) {
                        y[i] = v;
                    }
                    adjusted_parts.push((*p, fired));
                    (s, pc)
                }
            };
            records.push(PartitionRecord {
                partition: *p,
                pc_before,
                pc_after: None,
                status,
            });
        }
    }
    let guard_x = channel(&out, &rules[0].guard.attribute)?.to_vec();
    for r in records.iter_mut() {
        if matches!(r.status, PartitionStatus::Adjusted { .. }) {
            let y = r.partition.gather(channel(&out, &state)?, n_t);
            r.pc_after = pearson(&r.partition.gather(&guard_x, n_t), &y).ok();
        } else {
            r.pc_after = r.pc_before;
        }
    }

    let adjusted = adjusted_parts.len();
    if adjusted > 0 {
        out.set_provenance(Provenance::Adjusted);
    }
    // each rule is checked over the partitions where its guard fired
    let mut stl_satisfied = true;
    for (i, r) in rules.iter().enumerate() {
        let parts: Vec<Partition> = adjusted_parts.iter().filter(|(_, f)| f[i]).map(|(p, _)| *p).collect();
        let trace = PanelTrace::new(&out, panel, plan.axis, parts)?;
        if let Some(k) = trace.len().checked_sub(1) {
            stl_satisfied &= evaluate(&r.body_over(Interval { a: 0, b: k }), &trace, 0)?;
        }
    }

    let count = |f: fn(&PartitionStatus) -> bool| records.iter().filter(|r| f(&r.status)).count();
    let mut comparisons = Vec::new();
    let mut seen = Vec::new();
    for r in rules {
        if !seen.contains(&&r.guard.attribute) {
            seen.push(&r.guard.attribute);
            comparisons.push(compare_report(panel, &out, &r.guard.attribute, &state, plan)?);
        }
    }
    let report = AdjustmentReport {
        rules: rules.iter().map(|r| r.to_string()).collect(),
        plan: *plan,
        partitions: parts.len(),
        adjusted,
        untouched: count(|s| matches!(s, PartitionStatus::Untouched)),
        out_of_window: count(|s| matches!(s, PartitionStatus::OutOfWindow)),
        too_short: count(|s| matches!(s, PartitionStatus::TooShort)),
        degenerate: count(|s| matches!(s, PartitionStatus::Degenerate)),
        failed: count(|s| matches!(s, PartitionStatus::Failed { .. })),
        coverage_pct: if parts.is_empty() {
            0.0
        } else {
            adjusted as f64 / parts.len() as f64 * 100.0
        },
        adjusted_mean_mse: if adjusted == 0 { 0.0 } else { mean_se / adjusted as f64 },
        adjusted_std_mse: if adjusted == 0 { 0.0 } else { std_se / adjusted as f64 },
        stl_satisfied,
        comparisons,
        records,
    };
    Ok((out, report))
}
