//! Panel container, CSV ingestion, and the synthetic panel generator.

mod csvio;
mod ingest;
mod panel;
mod synth;

use std::path::Path;

use thiserror::Error;

pub use csvio::{panel_to_csv, parse_panel, parse_timestamp, read_panel, write_panel};
pub use ingest::{
    aggregate_demand, build_panel, haversine_km, interpolate_features, load_features,
    load_stations, load_tracts, load_trips, map_stations, scale_by_population, FeatureRecord,
    Station, Tract, TripRecord, POPULATION,
};
pub use panel::{Panel, Provenance, TimeGrid, DEMAND, TIMESTAMP_FORMAT};
pub use synth::{generate_synthetic, Coupling, FeatureSpec, GroundTruth, PlantedGroup, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty timestamp grid")]
    EmptyGrid,
    #[error("no census tracts to map stations to")]
    NoTracts,
    #[error("interpolation needs at least two knots")]
    SingleKnot,
    #[error("trip at row {row} falls outside the timestamp grid")]
    OutsideGrid { row: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
