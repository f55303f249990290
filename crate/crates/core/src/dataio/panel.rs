use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Name of the channel every panel carries.
pub const DEMAND: &str = "demand";

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Where the values of a panel came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Raw,
    Interpolated,
    Synthetic,
    Adjusted,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Raw => "raw",
            Provenance::Interpolated => "interpolated",
            Provenance::Synthetic => "synthetic",
            Provenance::Adjusted => "adjusted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(Provenance::Raw),
            "interpolated" => Some(Provenance::Interpolated),
            "synthetic" => Some(Provenance::Synthetic),
            "adjusted" => Some(Provenance::Adjusted),
            _ => None,
        }
    }
}

/// Uniformly spaced timestamp grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: NaiveDateTime,
    pub step_seconds: i64,
    pub len: usize,
}

impl TimeGrid {
    pub fn hourly(start: NaiveDateTime, len: usize) -> Self {
        TimeGrid {
            start,
            step_seconds: 3600,
            len,
        }
    }

    pub fn at(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::seconds(self.step_seconds * index as i64)
    }

    /// Grid index containing `ts`, i.e. the bin `[at(i), at(i+1))`.
    pub fn bin_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let offset = (ts - self.start).num_seconds();
        if offset < 0 {
            return None;
        }
        let idx = (offset / self.step_seconds) as usize;
        (idx < self.len).then_some(idx)
    }

    /// Hours elapsed since the grid start, as a real coordinate.
    pub fn hours_at(&self, index: usize) -> f64 {
        (self.step_seconds * index as i64) as f64 / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Channel {
    name: String,
    values: Vec<f64>,
}

/// Stations × timestamps × channels.
///
/// Channel values are stored station-major, so the series of one station is
/// a contiguous slice. `NaN` marks a flagged-missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    stations: Vec<String>,
    grid: TimeGrid,
    channels: Vec<Channel>,
    provenance: Provenance,
}

impl Panel {
    pub fn new(
        stations: Vec<String>,
        grid: TimeGrid,
        demand: Vec<f64>,
        features: Vec<(String, Vec<f64>)>,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        if stations.is_empty() || grid.len == 0 {
            return Err(DataError::EmptyGrid);
        }
        if grid.step_seconds <= 0 {
            return Err(DataError::Schema {
                row: 0,
                message: "timestamp step must be positive".into(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &stations {
            if !seen.insert(s.as_str()) {
                return Err(DataError::Schema {
                    row: 0,
                    message: format!("duplicate station id {s}"),
                });
            }
        }
        let mut panel = Panel {
            stations,
            grid,
            channels: Vec::with_capacity(features.len() + 1),
            provenance,
        };
        panel.push_channel(DEMAND.to_string(), demand)?;
        for (name, values) in features {
            panel.push_channel(name, values)?;
        }
        Ok(panel)
    }

    fn push_channel(&mut self, name: String, values: Vec<f64>) -> Result<(), DataError> {
        let expected = self.stations.len() * self.grid.len;
        if values.len() != expected {
            return Err(DataError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        if name.is_empty() || name.contains(',') || self.channels.iter().any(|c| c.name == name) {
            return Err(DataError::Schema {
                row: 0,
                message: format!("invalid or duplicate channel name {name:?}"),
            });
        }
        self.channels.push(Channel { name, values });
        Ok(())
    }

    pub fn stations(&self) -> &[String] {
        &self.stations
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.len
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }

    /// All channel names, demand first.
    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.channel_names().skip(1)
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.channels.iter().any(|c| c.name == name)
    }

    pub fn channel(&self, name: &str) -> Result<&[f64], DataError> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| DataError::UnknownChannel(name.to_string()))
    }

    pub fn channel_mut(&mut self, name: &str) -> Result<&mut [f64], DataError> {
        self.channels
            .iter_mut()
            .find(|c| c.name == name)
            .map(|c| c.values.as_mut_slice())
            .ok_or_else(|| DataError::UnknownChannel(name.to_string()))
    }

    pub fn demand(&self) -> &[f64] {
        &self.channels[0].values
    }

    pub fn index(&self, station: usize, step: usize) -> usize {
        station * self.grid.len + step
    }

    pub fn value(&self, name: &str, station: usize, step: usize) -> Result<f64, DataError> {
        Ok(self.channel(name)?[self.index(station, step)])
    }

    /// Time series of one station.
    pub fn station_series(&self, name: &str, station: usize) -> Result<&[f64], DataError> {
        let t = self.grid.len;
        Ok(&self.channel(name)?[station * t..(station + 1) * t])
    }

    /// Values of every station at one timestamp.
    pub fn spatial_slice(&self, name: &str, step: usize) -> Result<Vec<f64>, DataError> {
        let values = self.channel(name)?;
        let t = self.grid.len;
        Ok((0..self.stations.len()).map(|s| values[s * t + step]).collect())
    }

    /// Per-station average of a channel over time, ignoring missing cells.
    pub fn station_means(&self, name: &str) -> Result<Vec<f64>, DataError> {
        let values = self.channel(name)?;
        let t = self.grid.len;
        Ok((0..self.stations.len())
            .map(|s| {
                let (sum, n) = values[s * t..(s + 1) * t]
                    .iter()
                    .filter(|v| v.is_finite())
                    .fold((0.0, 0usize), |(a, n), v| (a + v, n + 1));
                if n == 0 {
                    f64::NAN
                } else {
                    sum / n as f64
                }
            })
            .collect())
    }

    /// Copy restricted to the timestamp range `[start, end)`.
    pub fn time_slice(&self, start: usize, end: usize) -> Result<Panel, DataError> {
        if start >= end || end > self.grid.len {
            return Err(DataError::EmptyGrid);
        }
        let len = end - start;
        let grid = TimeGrid {
            start: self.grid.at(start),
            step_seconds: self.grid.step_seconds,
            len,
        };
        let t = self.grid.len;
        let channels = self
            .channels
            .iter()
            .map(|c| Channel {
                name: c.name.clone(),
                values: (0..self.stations.len())
                    .flat_map(|s| c.values[s * t + start..s * t + end].iter().copied())
                    .collect(),
            })
            .collect();
        Ok(Panel {
            stations: self.stations.clone(),
            grid,
            channels,
            provenance: self.provenance,
        })
    }

    pub fn same_shape(&self, other: &Panel) -> bool {
        self.stations == other.stations
            && self.grid == other.grid
            && self.channel_names().eq(other.channel_names())
    }
}
