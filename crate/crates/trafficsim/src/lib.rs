//! Deterministic discrete-time queue simulator for a grid of four-way
//! intersections with 12 entrance lanes and 4 signal phases.

pub mod error;
pub mod log;
pub mod metrics;
pub mod sim;
pub mod spec;
pub mod topology;

pub use error::{Result, SimError};
pub use log::{EpisodeLog, StepRecord};
pub use metrics::average_travel_time;
pub use sim::{Counts, IntersectionState, Observation, Simulator, VehicleRecord};
pub use spec::{FlowSpec, NetworkSpec, RateSegment, SourceSpec};
pub use topology::{Dir, Grid, Phase, Turn, FEEDERS, LANES, OBS_DIM};
