//! Raw trips and census-feature ingestion.
//!
//! Input schemas:
//! - trips: `station_id,timestamp_iso8601`, one row per trip
//! - features: `tract_id,month_iso8601,feature_name,value` (long form)
//! - stations: `station_id,lat,lon`
//! - tracts: `tract_id,lat,lon,population`

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use super::csvio::parse_timestamp;
use super::panel::{Panel, Provenance, TimeGrid};
use super::DataError;

/// Name of the optional feature that overrides the static tract population.
pub const POPULATION: &str = "population";

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub station_id: String,
    pub timestamp: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub tract_id: String,
    pub month: NaiveDateTime,
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tract {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub population: f64,
}

fn read_records(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let got = reader.headers().map_err(|e| DataError::Schema {
        row: 0,
        message: e.to_string(),
    })?;
    if got.iter().ne(header.iter().copied()) {
        return Err(DataError::Schema {
            row: 0,
            message: format!("expected header {}", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Schema {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn number(row: usize, field: &str) -> Result<f64, DataError> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::Schema {
            row,
            message: format!("bad number {field:?}"),
        })
}

/// Month keys may be `YYYY-MM`, `YYYY-MM-DD` or a full timestamp.
fn parse_month(row: usize, field: &str) -> Result<NaiveDateTime, DataError> {
    if let Some(ts) = parse_timestamp(field) {
        return Ok(ts);
    }
    let date = NaiveDate::parse_from_str(field, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(&format!("{field}-01"), "%Y-%m-%d"))
        .map_err(|_| DataError::Schema {
            row,
            message: format!("bad month {field:?}"),
        })?;
    Ok(date.and_hms_opt(0, 0, 0).expect("midnight"))
}

pub fn load_trips(path: &Path) -> Result<Vec<TripRecord>, DataError> {
    read_records(path, &["station_id", "timestamp_iso8601"])?
        .into_iter()
        .map(|(row, r)| {
            Ok(TripRecord {
                station_id: r[0].to_string(),
                timestamp: parse_timestamp(&r[1]).ok_or_else(|| DataError::Schema {
                    row,
                    message: format!("bad timestamp {:?}", &r[1]),
                })?,
            })
        })
        .collect()
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>, DataError> {
    read_records(path, &["tract_id", "month_iso8601", "feature_name", "value"])?
        .into_iter()
        .map(|(row, r)| {
            Ok(FeatureRecord {
                tract_id: r[0].to_string(),
                month: parse_month(row, &r[1])?,
                feature: r[2].to_string(),
                value: number(row, &r[3])?,
            })
        })
        .collect()
}

pub fn load_stations(path: &Path) -> Result<Vec<Station>, DataError> {
    read_records(path, &["station_id", "lat", "lon"])?
        .into_iter()
        .map(|(row, r)| {
            Ok(Station {
                id: r[0].to_string(),
                lat: number(row, &r[1])?,
                lon: number(row, &r[2])?,
            })
        })
        .collect()
}

pub fn load_tracts(path: &Path) -> Result<Vec<Tract>, DataError> {
    read_records(path, &["tract_id", "lat", "lon", "population"])?
        .into_iter()
        .map(|(row, r)| {
            Ok(Tract {
                id: r[0].to_string(),
                lat: number(row, &r[1])?,
                lon: number(row, &r[2])?,
                population: number(row, &r[3])?,
            })
        })
        .collect()
}

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const EARTH_RADIUS_KM: f64 = 6371.0088;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().asin()
}

/// Assign every station to its nearest tract centroid. Equidistant tracts
/// resolve to the lowest tract id.
pub fn map_stations(
    stations: &[Station],
    tracts: &[Tract],
) -> Result<BTreeMap<String, String>, DataError> {
    if tracts.is_empty() {
        return Err(DataError::NoTracts);
    }
    let mut order: Vec<&Tract> = tracts.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(stations
        .iter()
        .map(|s| {
            let mut best = order[0];
            let mut best_d = haversine_km(s.lat, s.lon, best.lat, best.lon);
            for t in &order[1..] {
                let d = haversine_km(s.lat, s.lon, t.lat, t.lon);
                if d < best_d {
                    best = t;
                    best_d = d;
                }
            }
            (s.id.clone(), best.id.clone())
        })
        .collect())
}

/// Piecewise-linear interpolation through `(time, value)` knots, constant
/// beyond the first and last knot. Knot times need not be sorted but must be
/// distinct.
pub fn interpolate_features(knots: &[(f64, f64)], targets: &[f64]) -> Result<Vec<f64>, DataError> {
    if knots.len() < 2 {
        return Err(DataError::SingleKnot);
    }
    let mut knots = knots.to_vec();
    knots.sort_by(|a, b| a.0.total_cmp(&b.0));
    if knots.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(DataError::Schema {
            row: 0,
            message: "duplicate interpolation knot".into(),
        });
    }
    let last = knots.len() - 1;
    Ok(targets
        .iter()
        .map(|&t| {
            if t <= knots[0].0 {
                return knots[0].1;
            }
            if t >= knots[last].0 {
                return knots[last].1;
            }
            // first knot strictly after t
            let hi = knots.partition_point(|k| k.0 <= t);
            let (t0, v0) = knots[hi - 1];
            let (t1, v1) = knots[hi];
            if t == t0 {
                return v0;
            }
            let w = (t - t0) / (t1 - t0);
            v0 + w * (v1 - v0)
        })
        .collect())
}

/// Trip counts per (station, grid step), station-major over `stations`.
pub fn aggregate_demand(
    trips: &[TripRecord],
    stations: &[String],
    grid: &TimeGrid,
) -> Result<Vec<f64>, DataError> {
    if grid.len == 0 || stations.is_empty() {
        return Err(DataError::EmptyGrid);
    }
    let index: BTreeMap<&str, usize> = stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut counts = vec![0.0; stations.len() * grid.len];
    for (i, trip) in trips.iter().enumerate() {
        let s = *index
            .get(trip.station_id.as_str())
            .ok_or_else(|| DataError::Schema {
                row: i + 1,
                message: format!("trip at unknown station {:?}", trip.station_id),
            })?;
        let t = grid
            .bin_of(trip.timestamp)
            .ok_or(DataError::OutsideGrid { row: i + 1 })?;
        counts[s * grid.len + t] += 1.0;
    }
    Ok(counts)
}

/// Demand divided by population cell-wise. Zero or missing population yields
/// a flagged-missing (`NaN`) cell.
pub fn scale_by_population(demand: &[f64], population: &[f64]) -> Result<Vec<f64>, DataError> {
    if demand.len() != population.len() {
        return Err(DataError::ShapeMismatch {
            expected: demand.len(),
            got: population.len(),
        });
    }
    Ok(demand
        .iter()
        .zip(population)
        .map(|(&d, &p)| if p > 0.0 && p.is_finite() { d / p } else { f64::NAN })
        .collect())
}

/// Full ingestion: trips + tract features → panel with population-scaled
/// demand and one interpolated channel per feature.
pub fn build_panel(
    trips: &[TripRecord],
    features: &[FeatureRecord],
    stations: &[Station],
    tracts: &[Tract],
    grid: TimeGrid,
) -> Result<Panel, DataError> {
    let assignment = map_stations(stations, tracts)?;
    let station_ids: Vec<String> = stations.iter().map(|s| s.id.clone()).collect();
    let counts = aggregate_demand(trips, &station_ids, &grid)?;

    // feature -> tract -> knots
    let mut knots: BTreeMap<&str, BTreeMap<&str, Vec<(f64, f64)>>> = BTreeMap::new();
    for f in features {
        let hours = (f.month - grid.start).num_seconds() as f64 / 3600.0;
        knots
            .entry(f.feature.as_str())
            .or_default()
            .entry(f.tract_id.as_str())
            .or_default()
            .push((hours, f.value));
    }
    let targets: Vec<f64> = (0..grid.len).map(|t| grid.hours_at(t)).collect();

    let mut channels: Vec<(String, Vec<f64>)> = Vec::new();
    for (feature, by_tract) in &knots {
        let mut values = Vec::with_capacity(station_ids.len() * grid.len);
        for sid in &station_ids {
            let tract = &assignment[sid];
            let tract_knots = by_tract.get(tract.as_str()).ok_or_else(|| DataError::Schema {
                row: 0,
                message: format!("feature {feature:?} has no values for tract {tract:?}"),
            })?;
            values.extend(interpolate_features(tract_knots, &targets)?);
        }
        channels.push((feature.to_string(), values));
    }

    let population: Vec<f64> = match channels.iter().find(|(n, _)| n == POPULATION) {
        Some((_, v)) => v.clone(),
        None => {
            let by_id: BTreeMap<&str, f64> =
                tracts.iter().map(|t| (t.id.as_str(), t.population)).collect();
            station_ids
                .iter()
                .flat_map(|sid| std::iter::repeat_n(by_id[assignment[sid].as_str()], grid.len))
                .collect()
        }
    };
    let demand = scale_by_population(&counts, &population)?;
    Panel::new(station_ids, grid, demand, channels, Provenance::Interpolated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
    }

    fn tract(id: &str, lat: f64, lon: f64) -> Tract {
        Tract {
            id: id.into(),
            lat,
            lon,
            population: 100.0,
        }
    }

    #[test]
    fn station_on_centroid_maps_there() {
        let stations = [Station {
            id: "s".into(),
            lat: 35.05,
            lon: -85.31,
        }];
        let tracts = [tract("a", 35.0, -85.0), tract("b", 35.05, -85.31)];
        assert_eq!(map_stations(&stations, &tracts).unwrap()["s"], "b");
    }

    #[test]
    fn equidistant_tie_goes_to_lowest_id() {
        let stations = [Station {
            id: "s".into(),
            lat: 0.0,
            lon: 0.0,
        }];
        let tracts = [tract("t9", 0.0, 1.0), tract("t2", 0.0, -1.0)];
        assert_eq!(map_stations(&stations, &tracts).unwrap()["s"], "t2");
        assert!(matches!(map_stations(&stations, &[]), Err(DataError::NoTracts)));
    }

    #[test]
    fn interpolation_midpoint_and_knots() {
        // January (0 h) = 100, February (744 h) = 200
        let knots = [(0.0, 100.0), (744.0, 200.0)];
        let out = interpolate_features(&knots, &[0.0, 372.0, 744.0, -5.0, 1000.0]).unwrap();
        assert_eq!(out, vec![100.0, 150.0, 200.0, 100.0, 200.0]);
        assert!(matches!(
            interpolate_features(&[(0.0, 1.0)], &[0.0]),
            Err(DataError::SingleKnot)
        ));
    }

    #[test]
    fn demand_counts() {
        let grid = TimeGrid::hourly(t0(), 3);
        let stations = vec!["a".to_string(), "b".to_string()];
        assert_eq!(aggregate_demand(&[], &stations, &grid).unwrap(), vec![0.0; 6]);
        let trips: Vec<TripRecord> = (0..3)
            .map(|h| TripRecord {
                station_id: "b".into(),
                timestamp: t0() + Duration::hours(h) + Duration::minutes(5),
            })
            .collect();
        assert_eq!(
            aggregate_demand(&trips, &stations, &grid).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
        let late = [TripRecord {
            station_id: "a".into(),
            timestamp: t0() + Duration::hours(5),
        }];
        assert!(matches!(
            aggregate_demand(&late, &stations, &grid),
            Err(DataError::OutsideGrid { row: 1 })
        ));
        assert!(matches!(
            aggregate_demand(&[], &stations, &TimeGrid::hourly(t0(), 0)),
            Err(DataError::EmptyGrid)
        ));
    }

    #[test]
    fn zero_population_is_missing() {
        let out = scale_by_population(&[4.0, 1.0], &[2.0, 0.0]).unwrap();
        assert_eq!(out[0], 2.0);
        assert!(out[1].is_nan());
    }
}
