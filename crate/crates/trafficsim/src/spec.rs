//! Versioned JSON network and flow specifications.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::topology::{Dir, Grid, Turn};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub schema_version: u32,
    pub rows: usize,
    pub cols: usize,
    /// Seconds to traverse any link at free flow.
    pub free_flow_time: u64,
    /// Maximum vehicles (queued plus moving) per entrance lane.
    pub lane_capacity: u32,
    /// Seconds between consecutive discharges from one green lane.
    pub saturation_headway: u64,
    /// Seconds a phase must be held before it may change.
    pub min_action_duration: u64,
}

impl NetworkSpec {
    pub fn grid(rows: usize, cols: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            rows,
            cols,
            free_flow_time: 30,
            lane_capacity: 30,
            saturation_headway: 2,
            min_action_duration: 15,
        }
    }

    pub fn topology(&self) -> Grid {
        Grid::new(self.rows, self.cols)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        if self.rows == 0 || self.cols == 0 {
            return Err(SimError::InvalidSpec("grid must have at least one intersection".into()));
        }
        if self.lane_capacity == 0 || self.saturation_headway == 0 || self.free_flow_time == 0 {
            return Err(SimError::InvalidSpec(
                "lane_capacity, saturation_headway and free_flow_time must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Constant arrival rate over `[start, end)` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSegment {
    pub start: u64,
    pub end: u64,
    pub vehicles_per_hour: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub intersection: usize,
    /// Boundary side the vehicles arrive from.
    pub approach: Dir,
    pub rates: Vec<RateSegment>,
    /// Turn probabilities (left, through, right) applied at every intersection
    /// along the sampled route.
    pub turn_probs: [f64; 3],
}

impl SourceSpec {
    pub fn rate_at(&self, t: u64) -> f64 {
        self.rates
            .iter()
            .find(|s| s.start <= t && t < s.end)
            .map_or(0.0, |s| s.vehicles_per_hour)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub schema_version: u32,
    /// Episode length in seconds.
    pub duration: u64,
    pub sources: Vec<SourceSpec>,
}

pub const DEFAULT_TURN_PROBS: [f64; 3] = [0.2, 0.6, 0.2];

impl FlowSpec {
    /// One source per boundary approach, all at the same constant rate.
    pub fn uniform(net: &NetworkSpec, vehicles_per_hour: f64, duration: u64) -> Self {
        Self::shaped(net, duration, duration, |_| vehicles_per_hour)
    }

    /// Piecewise-constant sinusoidal demand: `base * (1 + amplitude * sin)`,
    /// one segment per `segment` seconds and one full period per episode.
    pub fn sinusoidal(net: &NetworkSpec, base: f64, amplitude: f64, duration: u64, segment: u64) -> Self {
        Self::shaped(net, duration, segment, |mid| {
            let phase = 2.0 * std::f64::consts::PI * mid / duration as f64;
            (base * (1.0 + amplitude * phase.sin())).max(0.0)
        })
    }

    fn shaped(net: &NetworkSpec, duration: u64, segment: u64, rate: impl Fn(f64) -> f64) -> Self {
        let grid = net.topology();
        let segment = segment.max(1);
        let mut rates = Vec::new();
        let mut start = 0;
        while start < duration {
            let end = (start + segment).min(duration);
            rates.push(RateSegment {
                start,
                end,
                vehicles_per_hour: rate((start + end) as f64 / 2.0),
            });
            start = end;
        }
        let mut sources = Vec::new();
        for id in 0..grid.len() {
            for approach in grid.boundary_approaches(id) {
                sources.push(SourceSpec {
                    intersection: id,
                    approach,
                    rates: rates.clone(),
                    turn_probs: DEFAULT_TURN_PROBS,
                });
            }
        }
        Self {
            schema_version: SCHEMA_VERSION,
            duration,
            sources,
        }
    }

    /// Copy with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.sources {
            for r in &mut s.rates {
                r.vehicles_per_hour *= factor;
            }
        }
        out
    }

    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        check_version(self.schema_version)?;
        let grid = net.topology();
        for (i, s) in self.sources.iter().enumerate() {
            if s.intersection >= grid.len() {
                return Err(SimError::InvalidSpec(format!("sources[{i}].intersection out of range")));
            }
            if grid.neighbor(s.intersection, s.approach).is_some() {
                return Err(SimError::InvalidSpec(format!(
                    "sources[{i}].approach is not a boundary approach"
                )));
            }
            if s.turn_probs.iter().any(|&p| p.is_nan() || p < 0.0) || s.turn_probs.iter().sum::<f64>() <= 0.0 {
                return Err(SimError::InvalidSpec(format!("sources[{i}].turn_probs invalid")));
            }
            if s.rates.iter().any(|r| r.end < r.start || r.vehicles_per_hour.is_nan() || r.vehicles_per_hour < 0.0) {
                return Err(SimError::InvalidSpec(format!("sources[{i}].rates invalid")));
            }
        }
        Ok(())
    }

    pub fn turn_weight(&self, source: usize, turn: Turn) -> f64 {
        self.sources[source].turn_probs[turn.index()]
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(SimError::InvalidSpec(format!(
            "schema_version {v} unsupported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| SimError::InvalidSpec(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}
