//! K-Means on per-station feature vectors and protected-cluster selection.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DynamicError;
use crate::dataio::Panel;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
/// Seeded k-means++ starts; the fit with the lowest inertia is kept.
pub const RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Whether the assignment reached a fixpoint before the iteration cap.
    pub converged: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm from [`RESTARTS`] k-means++ seedings drawn from
/// `seed`, keeping the lowest inertia (earliest on ties).
///
/// Each run goes to an assignment fixpoint or [`MAX_LLOYD_ITERATIONS`].
/// Ties go to the lower cluster index and an emptied cluster keeps its
/// old centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit, DynamicError> {
    if k == 0 {
        return Err(DynamicError::InvalidConfig("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(DynamicError::TooFewStations {
            stations: points.len(),
            k,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(DynamicError::ShapeMismatch("feature rows must be finite and equally long".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..RESTARTS {
        let fit = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansFit {
    let dim = points[0].len();
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(w) => w.sample(rng),
            // every point coincides with a centroid already
            Err(_) => (0..points.len()).find(|i| !chosen.contains(i)).expect("len >= k"),
        };
        chosen.push(next);
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| dist2(p, &centroids[l])).sum();
    KMeansFit {
        labels,
        centroids,
        iterations,
        inertia,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extreme {
    Min,
    Max,
}

/// Which clusters count as protected: the `count` clusters whose centroid
/// is most extreme on `feature`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectedRule {
    pub feature: String,
    pub extreme: Extreme,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub k: usize,
    pub features: Vec<String>,
    /// Cluster id per station.
    pub labels: Vec<usize>,
    /// Protected cluster ids, most extreme first.
    pub protected: Vec<usize>,
}

impl GroupAssignment {
    /// Build from known labels; every protected cluster must have members.
    pub fn from_labels(labels: Vec<usize>, protected: Vec<usize>) -> Result<Self, DynamicError> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let out = GroupAssignment {
            k,
            features: Vec::new(),
            labels,
            protected,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), DynamicError> {
        if self.protected.is_empty() || self.protected.iter().any(|&c| self.members(c).is_empty()) {
            return Err(DynamicError::EmptyProtectedSet);
        }
        Ok(())
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&s| self.labels[s] == cluster).collect()
    }

    pub fn group_name(cluster: usize) -> String {
        format!("cluster{cluster}")
    }

    /// `(name, stations)` for every protected cluster.
    pub fn protected_groups(&self) -> Vec<(String, Vec<usize>)> {
        self.protected
            .iter()
            .map(|&c| (Self::group_name(c), self.members(c)))
            .collect()
    }

    /// All protected stations, ascending.
    pub fn protected_stations(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|s| self.protected.contains(&self.labels[*s]))
            .collect()
    }
}

/// Cluster stations on the time-mean of `features` over the first `upto`
/// steps (columns standardized), then pick protected clusters by `rule`.
pub fn assign_groups(
    panel: &Panel,
    features: &[String],
    upto: usize,
    k: usize,
    rule: &ProtectedRule,
    seed: u64,
) -> Result<GroupAssignment, DynamicError> {
    let Some(key) = features.iter().position(|f| *f == rule.feature) else {
        return Err(DynamicError::InvalidConfig(format!(
            "protected feature {:?} is not clustered on",
            rule.feature
        )));
    };
    if rule.count == 0 || rule.count > k {
        return Err(DynamicError::InvalidConfig("protected count must lie in [1, k]".into()));
    }
    let (n_s, n_t) = (panel.n_stations(), panel.n_steps());
    let upto = upto.min(n_t);
    let mut points = vec![Vec::with_capacity(features.len()); n_s];
    for name in features {
        let values = panel.channel(name)?;
        for (s, row) in points.iter_mut().enumerate() {
            let cells: Vec<f64> = values[s * n_t..s * n_t + upto]
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .collect();
            row.push(if cells.is_empty() {
                0.0
            } else {
                cells.iter().sum::<f64>() / cells.len() as f64
            });
        }
    }
    for j in 0..features.len() {
        let col: Vec<f64> = points.iter().map(|p| p[j]).collect();
        let m = col.iter().sum::<f64>() / n_s.max(1) as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n_s.max(1) as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for p in points.iter_mut() {
            p[j] = (p[j] - m) / sd;
        }
    }

    let fit = kmeans(&points, k, seed)?;
    let mut order: Vec<usize> = (0..k).filter(|&c| fit.labels.contains(&c)).collect();
    order.sort_by(|&a, &b| {
        let o = fit.centroids[a][key].total_cmp(&fit.centroids[b][key]);
        match rule.extreme {
            Extreme::Min => o,
            Extreme::Max => o.reverse(),
        }
    });
    let out = GroupAssignment {
        k,
        features: features.to_vec(),
        labels: fit.labels,
        protected: order.into_iter().take(rule.count).collect(),
    };
    out.validate()?;
    Ok(out)
}
