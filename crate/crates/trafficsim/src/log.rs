//! Line-delimited episode log: one `step` line per control step per
//! intersection, then one `vehicle` line per vehicle and a final `end` line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sim::VehicleRecord;
use crate::topology::{Phase, OBS_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub intersection_id: usize,
    pub obs: [f32; OBS_DIM],
    pub action: Phase,
    pub reward: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Step(StepRecord),
    Vehicle(VehicleRecord),
    End { t_end: u64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub vehicles: Vec<VehicleRecord>,
    pub t_end: u64,
}

impl EpisodeLog {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| SimError::Io(e.to_string());
        let ser = |l: &Line| serde_json::to_string(l).map_err(|e| SimError::Log(e.to_string()));
        for s in &self.steps {
            writeln!(w, "{}", ser(&Line::Step(s.clone()))?).map_err(io)?;
        }
        for v in &self.vehicles {
            writeln!(w, "{}", ser(&Line::Vehicle(v.clone()))?).map_err(io)?;
        }
        writeln!(w, "{}", ser(&Line::End { t_end: self.t_end })?).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut log = EpisodeLog::default();
        let mut ended = false;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| SimError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            if ended {
                return Err(SimError::Log(format!("line {} after end marker", i + 1)));
            }
            match serde_json::from_str(&line).map_err(|e| SimError::Log(format!("line {}: {e}", i + 1)))? {
                Line::Step(s) => log.steps.push(s),
                Line::Vehicle(v) => log.vehicles.push(v),
                Line::End { t_end } => {
                    log.t_end = t_end;
                    ended = true;
                }
            }
        }
        if !ended {
            return Err(SimError::Log("missing end marker".into()));
        }
        Ok(log)
    }

    /// Steps of one intersection in time order.
    pub fn intersection_steps(&self, id: usize) -> Vec<&StepRecord> {
        let mut v: Vec<_> = self.steps.iter().filter(|s| s.intersection_id == id).collect();
        v.sort_by_key(|s| s.t);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Turn;

    #[test]
    fn jsonl_round_trip() {
        let mut obs = [0.0; OBS_DIM];
        obs[3] = 4.0;
        let log = EpisodeLog {
            steps: vec![StepRecord {
                t: 15,
                intersection_id: 2,
                obs,
                action: Phase::C,
                reward: 3.0,
            }],
            vehicles: vec![VehicleRecord {
                id: 0,
                route: vec![Turn::Left, Turn::Through],
                t_enter: 1,
                t_leave: None,
            }],
            t_end: 3600,
        };
        let mut buf = Vec::new();
        log.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(EpisodeLog::read_from(&buf[..]).unwrap(), log);
    }

    #[test]
    fn missing_end_marker_is_an_error() {
        assert!(EpisodeLog::read_from(&b"\n"[..]).is_err());
    }
}
