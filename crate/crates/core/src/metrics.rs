//! Correlation coefficients over spatial and temporal slices, and bounded
//! group loss.
//!
//! Conventions used throughout the crate:
//! - standard deviation is the population one (divide by `n`);
//! - Spearman ranks ties by their average rank;
//! - Kendall is tau-b, corrected for ties in either series;
//! - a slice whose series is constant (or too short once missing cells are
//!   dropped) is reported as missing, never as zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, Panel};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricsError {
    #[error("series is constant; correlation undefined")]
    DegenerateSeries,
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("series contains a non-finite value")]
    NonFinite,
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("spatial slices need at least two stations")]
    TooFewStations,
    #[error("temporal window must be at least 2 steps, got {0}")]
    InvalidWindow(usize),
    #[error("group {0:?} has no samples")]
    EmptyGroup(String),
    #[error("threshold must be >= 0")]
    InvalidThreshold,
}

impl From<DataError> for MetricsError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::UnknownChannel(c) => MetricsError::UnknownChannel(c),
            other => MetricsError::UnknownChannel(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorrelationKind {
    #[serde(rename = "PC")]
    Pearson,
    #[serde(rename = "SC")]
    Spearman,
    #[serde(rename = "KC")]
    Kendall,
}

impl CorrelationKind {
    pub const ALL: [CorrelationKind; 3] = [
        CorrelationKind::Pearson,
        CorrelationKind::Spearman,
        CorrelationKind::Kendall,
    ];

    pub fn short(self) -> &'static str {
        match self {
            CorrelationKind::Pearson => "PC",
            CorrelationKind::Spearman => "SC",
            CorrelationKind::Kendall => "KC",
        }
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Spatial,
    Temporal,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Spatial => "spatial",
            Axis::Temporal => "temporal",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spatial" => Ok(Axis::Spatial),
            "temporal" => Ok(Axis::Temporal),
            other => Err(format!("unknown axis {other:?}")),
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pearson product-moment correlation.
///
/// Uses a single-pass co-moment update, which stays accurate for series with
/// a large common offset.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let (mut mx, mut my) = (0.0, 0.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = xi - mx;
        let dy = yi - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (xi - mx);
        syy += dy * (yi - my);
        sxy += dx * (yi - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(MetricsError::DegenerateSeries);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean(i+1..=j)
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Number of pairs within runs of equal values of an already-sorted key.
fn tied_pairs<T>(items: &[T], same: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in items.windows(2) {
        if same(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort on `y`, returning the number of inversions.
fn sort_counting_swaps(v: &mut [(f64, f64)], buf: &mut Vec<(f64, f64)>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], buf) + sort_counting_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].1 < v[i].1 {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall tau-b in O(n log n) (Knight's algorithm).
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite")
            .then(a.1.partial_cmp(&b.1).expect("finite"))
    });
    let ties_x = tied_pairs(&pairs, |a, b| a.0 == b.0);
    let ties_xy = tied_pairs(&pairs, |a, b| a.0 == b.0 && a.1 == b.1);
    let mut buf = Vec::with_capacity(pairs.len());
    let swaps = sort_counting_swaps(&mut pairs, &mut buf);
    let ties_y = tied_pairs(&pairs, |a, b| a.1 == b.1);

    let total = n * (n - 1) / 2;
    if ties_x == total || ties_y == total {
        return Err(MetricsError::DegenerateSeries);
    }
    // concordant - discordant = total - ties_x - ties_y + ties_xy - 2 * discordant
    let numerator =
        total as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    let denominator = ((total - ties_x) as f64).sqrt() * ((total - ties_y) as f64).sqrt();
    Ok((numerator / denominator).clamp(-1.0, 1.0))
}

pub fn correlation(kind: CorrelationKind, x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    match kind {
        CorrelationKind::Pearson => pearson(x, y),
        CorrelationKind::Spearman => spearman(x, y),
        CorrelationKind::Kendall => kendall(x, y),
    }
}

/// Correlation with missing cells dropped pairwise. `None` when the slice is
/// degenerate.
pub fn correlation_or_missing(kind: CorrelationKind, x: &[f64], y: &[f64]) -> Option<f64> {
    if x.iter().chain(y).all(|v| v.is_finite()) {
        return correlation(kind, x, y).ok();
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (*a, *b))
        .unzip();
    correlation(kind, &xs, &ys).ok()
}

/// One entry of a correlation series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceValue {
    /// Station for temporal slices; `None` for spatial ones.
    pub station: Option<usize>,
    /// Timestamp (spatial) or window start (temporal).
    pub start: usize,
    pub len: usize,
    /// `None` marks a flagged-missing slice.
    pub value: Option<f64>,
}

/// Temporal windows `[start, end)` of one station series. The trailing
/// remainder is kept when it has at least `min_len` steps.
pub fn temporal_windows(steps: usize, window: usize, min_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < steps {
        let end = (start + window).min(steps);
        if end - start == window || end - start >= min_len {
            out.push((start, end));
        }
        start = end;
    }
    out
}

/// One unit of adjustment: a timestamp across all stations (spatial) or a
/// window of one station's series (temporal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub station: Option<usize>,
    /// Timestamp (spatial) or window start (temporal).
    pub start: usize,
    /// Number of cells.
    pub len: usize,
}

impl Partition {
    /// Flat station-major panel indices covered by this partition.
    pub fn indices(&self, n_steps: usize) -> Vec<usize> {
        match self.station {
            None => (0..self.len).map(|s| s * n_steps + self.start).collect(),
            Some(s) => (s * n_steps + self.start..s * n_steps + self.start + self.len).collect(),
        }
    }

    pub fn gather(&self, data: &[f64], n_steps: usize) -> Vec<f64> {
        self.indices(n_steps).into_iter().map(|i| data[i]).collect()
    }
}

/// Partitions tiling a panel of the given shape, in recombination order.
pub fn partitions(
    n_stations: usize,
    n_steps: usize,
    axis: Axis,
    window: usize,
    min_len: usize,
) -> Vec<Partition> {
    match axis {
        Axis::Spatial => (0..n_steps)
            .map(|t| Partition {
                station: None,
                start: t,
                len: n_stations,
            })
            .collect(),
        Axis::Temporal => {
            let windows = temporal_windows(n_steps, window.max(1), min_len);
            (0..n_stations)
                .flat_map(|s| {
                    windows.iter().map(move |&(a, b)| Partition {
                        station: Some(s),
                        start: a,
                        len: b - a,
                    })
                })
                .collect()
        }
    }
}

/// Correlation series between an attribute channel and a state channel.
///
/// Spatial: one value per timestamp, across stations. Temporal: one value per
/// (station, window), station-major.
pub fn slice_correlations(
    panel: &Panel,
    attribute: &str,
    state: &str,
    kind: CorrelationKind,
    axis: Axis,
    window: usize,
) -> Result<Vec<SliceValue>, MetricsError> {
    let xs = panel.channel(attribute)?;
    let ys = panel.channel(state)?;
    let n_t = panel.n_steps();
    match axis {
        Axis::Spatial => {
            let n_s = panel.n_stations();
            if n_s < 2 {
                return Err(MetricsError::TooFewStations);
            }
            Ok((0..n_t)
                .into_par_iter()
                .map(|t| {
                    let x: Vec<f64> = (0..n_s).map(|s| xs[s * n_t + t]).collect();
                    let y: Vec<f64> = (0..n_s).map(|s| ys[s * n_t + t]).collect();
                    SliceValue {
                        station: None,
                        start: t,
                        len: n_s,
                        value: correlation_or_missing(kind, &x, &y),
                    }
                })
                .collect())
        }
        Axis::Temporal => {
            if window < 2 {
                return Err(MetricsError::InvalidWindow(window));
            }
            let windows = temporal_windows(n_t, window, 2);
            let jobs: Vec<(usize, usize, usize)> = (0..panel.n_stations())
                .flat_map(|s| windows.iter().map(move |&(a, b)| (s, a, b)))
                .collect();
            Ok(jobs
                .into_par_iter()
                .map(|(s, a, b)| SliceValue {
                    station: Some(s),
                    start: a,
                    len: b - a,
                    value: correlation_or_missing(
                        kind,
                        &xs[s * n_t + a..s * n_t + b],
                        &ys[s * n_t + a..s * n_t + b],
                    ),
                })
                .collect())
        }
    }
}

/// Aggregate of a correlation series with missing slices excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub mean: Option<f64>,
    pub mean_abs: Option<f64>,
    pub count: usize,
    pub missing: usize,
}

pub fn summarize(series: &[SliceValue]) -> SeriesSummary {
    let present: Vec<f64> = series.iter().filter_map(|s| s.value).collect();
    let count = present.len();
    let (mean, mean_abs) = if count == 0 {
        (None, None)
    } else {
        (
            Some(present.iter().sum::<f64>() / count as f64),
            Some(present.iter().map(|v| v.abs()).sum::<f64>() / count as f64),
        )
    };
    SeriesSummary {
        mean,
        mean_abs,
        count,
        missing: series.len() - count,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLoss {
    pub group: String,
    pub loss: f64,
    pub satisfied: bool,
}

/// Empirical per-group loss checked against a bound `zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLossReport {
    pub zeta: f64,
    pub groups: Vec<GroupLoss>,
}

impl GroupLossReport {
    pub fn all_satisfied(&self) -> bool {
        self.groups.iter().all(|g| g.satisfied)
    }

    pub fn violated(&self) -> impl Iterator<Item = &GroupLoss> {
        self.groups.iter().filter(|g| !g.satisfied)
    }
}

/// `per_sample_loss` maps each group to its squared errors; the group loss
/// is their mean.
pub fn bounded_group_loss(
    per_sample_loss: &BTreeMap<String, Vec<f64>>,
    zeta: f64,
) -> Result<GroupLossReport, MetricsError> {
    if !(zeta >= 0.0) {
        return Err(MetricsError::InvalidThreshold);
    }
    let groups = per_sample_loss
        .iter()
        .map(|(name, losses)| {
            if losses.is_empty() {
                return Err(MetricsError::EmptyGroup(name.clone()));
            }
            let loss = mean(losses);
            Ok(GroupLoss {
                group: name.clone(),
                loss,
                satisfied: loss <= zeta,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroupLossReport { zeta, groups })
}

/// Mean squared error between `pred` and `truth` restricted to `members`.
pub fn mse_over(pred: &[f64], truth: &[f64], members: &[usize]) -> f64 {
    members
        .iter()
        .map(|&i| (pred[i] - truth[i]).powi(2))
        .sum::<f64>()
        / members.len() as f64
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}
