//! Panel CSV: `station_id,timestamp,demand,<feature columns...>`.
//!
//! Leading `#` lines carry `key=value` metadata; `provenance=` is read back
//! into the panel, everything else is ignored on load. Missing cells are
//! written as empty fields.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDateTime;

use super::panel::{Panel, Provenance, TimeGrid, DEMAND, TIMESTAMP_FORMAT};
use super::DataError;

/// Render a panel. `metadata` lines are emitted as `# ` comments after the
/// provenance line.
pub fn panel_to_csv(panel: &Panel, metadata: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# provenance={}", panel.provenance().as_str());
    for line in metadata {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("station_id,timestamp");
    for name in panel.channel_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');

    let channels: Vec<&[f64]> = panel
        .channel_names()
        .map(|n| panel.channel(n).expect("listed channel"))
        .collect();
    for (s, station) in panel.stations().iter().enumerate() {
        for t in 0..panel.n_steps() {
            out.push_str(station);
            out.push(',');
            let _ = write!(out, "{}", panel.grid().at(t).format(TIMESTAMP_FORMAT));
            let idx = panel.index(s, t);
            for values in &channels {
                out.push(',');
                let v = values[idx];
                if v.is_finite() {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_panel(path: &Path, panel: &Panel, metadata: &[String]) -> Result<(), DataError> {
    std::fs::write(path, panel_to_csv(panel, metadata)).map_err(|e| DataError::io(path, e))
}

pub fn read_panel(path: &Path) -> Result<Panel, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_panel(&text)
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

pub fn parse_panel(text: &str) -> Result<Panel, DataError> {
    let mut provenance = Provenance::Raw;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        for token in line.trim_start_matches('#').split_whitespace() {
            if let Some(v) = token.strip_prefix("provenance=") {
                provenance = Provenance::parse(v).ok_or_else(|| DataError::Schema {
                    row: 0,
                    message: format!("unknown provenance {v:?}"),
                })?;
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::Schema {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 3
        || &headers[0] != "station_id"
        || &headers[1] != "timestamp"
        || &headers[2] != DEMAND
    {
        return Err(DataError::Schema {
            row: 0,
            message: "header must start with station_id,timestamp,demand".into(),
        });
    }
    let n_channels = headers.len() - 2;

    let mut stations: Vec<String> = Vec::new();
    let mut station_index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(usize, NaiveDateTime, Vec<f64>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Schema {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(DataError::Schema {
                row,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let station = record[0].to_string();
        let s = *station_index.entry(station.clone()).or_insert_with(|| {
            stations.push(station);
            stations.len() - 1
        });
        let ts = parse_timestamp(&record[1]).ok_or_else(|| DataError::Schema {
            row,
            message: format!("bad timestamp {:?}", &record[1]),
        })?;
        let mut values = Vec::with_capacity(n_channels);
        for field in record.iter().skip(2) {
            if field.is_empty() {
                values.push(f64::NAN);
            } else {
                values.push(field.parse::<f64>().map_err(|_| DataError::Schema {
                    row,
                    message: format!("bad number {field:?}"),
                })?);
            }
        }
        rows.push((s, ts, values));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyGrid);
    }

    let mut times: Vec<NaiveDateTime> = rows.iter().map(|r| r.1).collect();
    times.sort();
    times.dedup();
    let step_seconds = if times.len() > 1 {
        (times[1] - times[0]).num_seconds()
    } else {
        3600
    };
    for w in times.windows(2) {
        if (w[1] - w[0]).num_seconds() != step_seconds {
            return Err(DataError::Schema {
                row: 0,
                message: "timestamps are not uniformly spaced".into(),
            });
        }
    }
    let grid = TimeGrid {
        start: times[0],
        step_seconds,
        len: times.len(),
    };
    let cells = stations.len() * grid.len;
    let mut data = vec![vec![f64::NAN; cells]; n_channels];
    let mut filled = vec![false; cells];
    for (i, (s, ts, values)) in rows.into_iter().enumerate() {
        let t = grid.bin_of(ts).expect("timestamp on grid");
        let idx = s * grid.len + t;
        if filled[idx] {
            return Err(DataError::Schema {
                row: i + 1,
                message: "duplicate (station, timestamp) row".into(),
            });
        }
        filled[idx] = true;
        for (c, v) in values.into_iter().enumerate() {
            data[c][idx] = v;
        }
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(DataError::Schema {
            row: 0,
            message: format!(
                "missing row for station {} at {}",
                stations[missing / grid.len],
                grid.at(missing % grid.len).format(TIMESTAMP_FORMAT)
            ),
        });
    }
    let mut data = data.into_iter();
    let demand = data.next().expect("demand column");
    let features = headers
        .iter()
        .skip(3)
        .map(str::to_string)
        .zip(data)
        .collect();
    Panel::new(stations, grid, demand, features, provenance)
}
