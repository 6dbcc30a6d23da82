use std::collections::VecDeque;

use numcore::SeededRng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::spec::{FlowSpec, NetworkSpec};
use crate::topology::{exit_heading, green_lanes, lane_index, lane_parts, Downstream, Grid, Phase, Turn, LANES, OBS_DIM};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u64,
    pub route: Vec<Turn>,
    pub t_enter: u64,
    pub t_leave: Option<u64>,
}

/// Per-lane observation pairs `(L_num, L_queue)` in lane order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f32; OBS_DIM]);

impl Observation {
    pub fn zeros() -> Self {
        Self([0.0; OBS_DIM])
    }

    pub fn num(&self, lane: usize) -> f32 {
        self.0[2 * lane]
    }

    pub fn queue(&self, lane: usize) -> f32 {
        self.0[2 * lane + 1]
    }

    pub fn queue_sum(&self) -> f32 {
        (0..LANES).map(|l| self.queue(l)).sum()
    }
}

#[derive(Clone, Debug, Default)]
struct Lane {
    /// (vehicle, second it reaches the stop line)
    moving: VecDeque<(u32, u64)>,
    queue: VecDeque<u32>,
    last_discharge: Option<u64>,
}

impl Lane {
    fn load(&self) -> usize {
        self.moving.len() + self.queue.len()
    }
}

#[derive(Clone, Debug)]
pub struct IntersectionState {
    lanes: Vec<Lane>,
    phase: Phase,
    phase_elapsed: u64,
}

impl IntersectionState {
    pub fn queue_count(&self, lane: usize) -> usize {
        self.lanes[lane].queue.len()
    }

    pub fn moving_count(&self, lane: usize) -> usize {
        self.lanes[lane].moving.len()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn phase_elapsed(&self) -> u64 {
        self.phase_elapsed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counts {
    pub entered: usize,
    pub inside: usize,
    pub left: usize,
}

/// Discrete-time (1 s) point-queue simulator of a signalized grid.
#[derive(Clone, Debug)]
pub struct Simulator {
    net: NetworkSpec,
    grid: Grid,
    flows: FlowSpec,
    rng: SeededRng,
    t: u64,
    nodes: Vec<IntersectionState>,
    records: Vec<VehicleRecord>,
    route_pos: Vec<usize>,
    backlogs: Vec<VecDeque<u32>>,
    exiting: VecDeque<(u32, u64)>,
    left: usize,
}

impl Simulator {
    pub fn new(net: NetworkSpec, flows: FlowSpec, seed: u64) -> Result<Self> {
        net.validate()?;
        flows.validate(&net)?;
        let grid = net.topology();
        let node = IntersectionState {
            lanes: vec![Lane::default(); LANES],
            phase: Phase::A,
            // the first decision may pick any phase
            phase_elapsed: net.min_action_duration,
        };
        Ok(Self {
            nodes: vec![node; grid.len()],
            backlogs: vec![VecDeque::new(); flows.sources.len()],
            net,
            grid,
            flows,
            rng: SeededRng::new(seed),
            t: 0,
            records: Vec::new(),
            route_pos: Vec::new(),
            exiting: VecDeque::new(),
            left: 0,
        })
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn flows(&self) -> &FlowSpec {
        &self.flows
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn intersection(&self, id: usize) -> &IntersectionState {
        &self.nodes[id]
    }

    pub fn phases(&self) -> Vec<Phase> {
        self.nodes.iter().map(|n| n.phase).collect()
    }

    pub fn records(&self) -> &[VehicleRecord] {
        &self.records
    }

    pub fn green_lanes(&self, id: usize) -> [bool; LANES] {
        green_lanes(self.nodes[id].phase)
    }

    pub fn observe(&self, id: usize) -> Observation {
        let mut o = [0.0; OBS_DIM];
        for (l, lane) in self.nodes[id].lanes.iter().enumerate() {
            o[2 * l] = lane.load() as f32;
            o[2 * l + 1] = lane.queue.len() as f32;
        }
        Observation(o)
    }

    /// Sum of queue lengths over the 12 entrance lanes.
    pub fn reward(&self, id: usize) -> f32 {
        self.nodes[id].lanes.iter().map(|l| l.queue.len() as f32).sum()
    }

    pub fn counts(&self) -> Counts {
        let on_lanes: usize = self
            .nodes
            .iter()
            .flat_map(|n| n.lanes.iter().map(Lane::load))
            .sum();
        let backlog: usize = self.backlogs.iter().map(VecDeque::len).sum();
        Counts {
            entered: self.records.len(),
            inside: on_lanes + backlog + self.exiting.len(),
            left: self.left,
        }
    }

    pub fn max_lane_load(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.lanes.iter().map(Lane::load))
            .max()
            .unwrap_or(0)
    }

    fn sample_route(&mut self, source: usize) -> Vec<Turn> {
        let start = (self.flows.sources[source].intersection, self.flows.sources[source].approach);
        let probs = self.flows.sources[source].turn_probs;
        let cap = 2 * (self.grid.rows + self.grid.cols);
        for _ in 0..16 {
            let mut route = Vec::new();
            let (mut at, mut approach) = start;
            loop {
                let turn = Turn::ALL[self.rng.categorical(&probs)];
                route.push(turn);
                match self.grid.downstream(at, exit_heading(approach, turn)) {
                    Downstream::Exit => return route,
                    Downstream::Intersection { id, approach: a } => {
                        at = id;
                        approach = a;
                    }
                }
                if route.len() > cap {
                    break;
                }
            }
        }
        // going straight always reaches the boundary
        let (mut at, approach) = start;
        let mut route = vec![Turn::Through];
        while let Some(n) = self.grid.neighbor(at, approach.opposite()) {
            route.push(Turn::Through);
            at = n;
        }
        route
    }

    fn apply_actions(&mut self, actions: &[Phase]) -> Result<Vec<bool>> {
        if actions.len() != self.nodes.len() {
            return Err(SimError::Contract(format!(
                "expected {} actions, got {}",
                self.nodes.len(),
                actions.len()
            )));
        }
        let min = self.net.min_action_duration;
        Ok(self
            .nodes
            .iter_mut()
            .zip(actions)
            .map(|(n, &a)| {
                if a == n.phase {
                    true
                } else if n.phase_elapsed >= min {
                    n.phase = a;
                    n.phase_elapsed = 0;
                    true
                } else {
                    false
                }
            })
            .collect())
    }

    /// Advances one second. Returns, per intersection, whether the requested
    /// phase is in force (a change before the minimum duration is rejected).
    pub fn step(&mut self, actions: &[Phase]) -> Result<Vec<bool>> {
        let accepted = self.apply_actions(actions)?;
        let t = self.t;
        let fft = self.net.free_flow_time;
        let cap = self.net.lane_capacity as usize;

        for s in 0..self.flows.sources.len() {
            let lambda = self.flows.sources[s].rate_at(t) / 3600.0;
            let n = self.rng.poisson(lambda);
            for _ in 0..n {
                let route = self.sample_route(s);
                let id = self.records.len();
                self.records.push(VehicleRecord {
                    id: id as u64,
                    route,
                    t_enter: t,
                    t_leave: None,
                });
                self.route_pos.push(0);
                self.backlogs[s].push_back(id as u32);
            }
        }

        for s in 0..self.backlogs.len() {
            let src = &self.flows.sources[s];
            let (node, approach) = (src.intersection, src.approach);
            while let Some(&v) = self.backlogs[s].front() {
                let turn = self.records[v as usize].route[0];
                let lane = &mut self.nodes[node].lanes[lane_index(approach, turn)];
                if lane.load() >= cap {
                    break;
                }
                lane.moving.push_back((v, t + fft));
                self.backlogs[s].pop_front();
            }
        }

        for node in &mut self.nodes {
            for lane in &mut node.lanes {
                while let Some(&(v, ready)) = lane.moving.front() {
                    if ready > t {
                        break;
                    }
                    lane.queue.push_back(v);
                    lane.moving.pop_front();
                }
            }
        }

        let headway = self.net.saturation_headway;
        for id in 0..self.nodes.len() {
            let green = green_lanes(self.nodes[id].phase);
            for (l, &is_green) in green.iter().enumerate() {
                if !is_green {
                    continue;
                }
                let lane = &self.nodes[id].lanes[l];
                let Some(&v) = lane.queue.front() else { continue };
                if lane.last_discharge.is_some_and(|d| t < d + headway) {
                    continue;
                }
                let (approach, _) = lane_parts(l);
                let pos = self.route_pos[v as usize];
                let route = &self.records[v as usize].route;
                let heading = exit_heading(approach, route[pos]);
                match self.grid.downstream(id, heading) {
                    Downstream::Exit => self.exiting.push_back((v, t + fft)),
                    Downstream::Intersection { id: next, approach: a } => {
                        let turn = *route
                            .get(pos + 1)
                            .ok_or_else(|| SimError::Contract(format!("route of vehicle {v} ends inside the grid")))?;
                        let dst = &mut self.nodes[next].lanes[lane_index(a, turn)];
                        if dst.load() >= cap {
                            continue;
                        }
                        dst.moving.push_back((v, t + fft));
                    }
                }
                self.route_pos[v as usize] += 1;
                let lane = &mut self.nodes[id].lanes[l];
                lane.queue.pop_front();
                lane.last_discharge = Some(t);
            }
        }

        while let Some(&(v, leave)) = self.exiting.front() {
            if leave > t {
                break;
            }
            self.records[v as usize].t_leave = Some(leave);
            self.left += 1;
            self.exiting.pop_front();
        }

        for node in &mut self.nodes {
            node.phase_elapsed += 1;
        }
        self.t += 1;
        Ok(accepted)
    }

    /// Holds `actions` for `seconds` ticks.
    pub fn run_for(&mut self, actions: &[Phase], seconds: u64) -> Result<()> {
        for _ in 0..seconds {
            self.step(actions)?;
        }
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.flows.duration
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{RateSegment, SourceSpec, SCHEMA_VERSION};
    use crate::topology::Dir;

    fn single_vehicle_flow() -> FlowSpec {
        FlowSpec {
            schema_version: SCHEMA_VERSION,
            duration: 200,
            sources: vec![SourceSpec {
                intersection: 0,
                approach: Dir::W,
                // mean of 4 vehicles in the first second only
                rates: vec![RateSegment {
                    start: 0,
                    end: 1,
                    vehicles_per_hour: 4.0 * 3600.0,
                }],
                turn_probs: [0.0, 1.0, 0.0],
            }],
        }
    }

    #[test]
    fn empty_network_only_advances_phase_clock() {
        let net = NetworkSpec::grid(2, 2);
        let flows = FlowSpec::uniform(&net, 0.0, 100);
        let mut sim = Simulator::new(net, flows, 1).unwrap();
        let before = sim.intersection(0).phase_elapsed();
        sim.run_for(&[Phase::A; 4], 10).unwrap();
        assert_eq!(sim.intersection(0).phase_elapsed(), before + 10);
        for id in 0..4 {
            assert_eq!(sim.observe(id), Observation::zeros());
            assert_eq!(sim.reward(id), 0.0);
        }
    }

    #[test]
    fn early_phase_change_is_rejected() {
        let net = NetworkSpec::grid(1, 1);
        let flows = FlowSpec::uniform(&net, 0.0, 100);
        let mut sim = Simulator::new(net, flows, 1).unwrap();
        assert_eq!(sim.step(&[Phase::B]).unwrap(), vec![true]);
        assert_eq!(sim.step(&[Phase::C]).unwrap(), vec![false]);
        assert_eq!(sim.intersection(0).phase(), Phase::B);
        sim.run_for(&[Phase::B], 13).unwrap();
        assert_eq!(sim.step(&[Phase::C]).unwrap(), vec![true]);
    }

    #[test]
    fn through_vehicle_on_green_takes_two_link_times() {
        let net = NetworkSpec::grid(1, 1);
        let mut sim = Simulator::new(net, single_vehicle_flow(), 3).unwrap();
        // westbound-from-W through traffic is lane W-through, served by phase B
        sim.run_for(&[Phase::B], 200).unwrap();
        let done: Vec<_> = sim.records().iter().filter(|r| r.t_leave.is_some()).collect();
        assert!(!done.is_empty());
        let first = done[0];
        assert_eq!(first.t_leave.unwrap() - first.t_enter, 60);
    }

    #[test]
    fn observation_reports_moving_and_queued() {
        let net = NetworkSpec::grid(1, 1);
        let mut sim = Simulator::new(net, single_vehicle_flow(), 3).unwrap();
        sim.step(&[Phase::A]).unwrap();
        let lane = lane_index(Dir::W, Turn::Through);
        let n = sim.records().len() as f32;
        assert_eq!(sim.observe(0).num(lane), n);
        assert_eq!(sim.observe(0).queue(lane), 0.0);
        // red for W through under phase A: vehicles queue after the link time
        sim.run_for(&[Phase::A], 40).unwrap();
        assert_eq!(sim.observe(0).queue(lane), n);
        assert_eq!(sim.reward(0), n);
    }
}
