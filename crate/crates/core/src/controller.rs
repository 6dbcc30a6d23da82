//! Closed-loop control: every intersection agent samples its window with the
//! shared plan, agents exchange denoised estimates between reverse steps, and
//! the first generated future observation is decoded into a phase.

use std::collections::VecDeque;

use numcore::SeededRng;
use serde::{Deserialize, Serialize};
use trafficsim::{average_travel_time, EpisodeLog, FlowSpec, Grid, NetworkSpec, Phase, Simulator, LANES, OBS_DIM};

use crate::datapipe::{run_episode, MaskSet, NeighborFeed, SLOT};
use crate::diffusion::{cfg_noise, ddim_step_full, forward_noise, prcd_compose, MaskPair, SamplingPlan};
use crate::error::{Error, Result};
use crate::invdyn::rule_decode;
use crate::model::NoiseInput;
use crate::trainer::{RewardHandling, TrainedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub sampling_steps: usize,
    pub omega: f32,
    pub dcm_enabled: bool,
    /// Replace every neighbor cell with the exchanged estimate, not only the
    /// cells the receiver lacks.
    pub dcm_replace_all: bool,
    pub future_reward: f32,
    /// Re-noise observed history into each intermediate sample.
    pub clamp_observed: bool,
    /// Bound clean estimates to the normalized range.
    pub clip_x0: bool,
    pub reward_handling: RewardHandling,
    pub use_invdyn: bool,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 10,
            omega: 1.2,
            dcm_enabled: true,
            dcm_replace_all: false,
            future_reward: 1.0,
            clamp_observed: true,
            clip_x0: true,
            reward_handling: RewardHandling::Prcd,
            use_invdyn: true,
            seed: 0,
        }
    }
}

/// One intersection's rolling history.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub id: usize,
    /// Last `C` normalized observations, oldest first; `None` when missing.
    pub history: VecDeque<Option<[f32; OBS_DIM]>>,
    pub rewards: VecDeque<Option<f32>>,
    /// Denoised window estimate published in the latest round.
    pub published: Option<Vec<f32>>,
}

impl AgentState {
    pub fn new(id: usize, c: usize) -> Self {
        Self {
            id,
            history: std::iter::repeat_n(None, c).collect(),
            rewards: std::iter::repeat_n(None, c).collect(),
            published: None,
        }
    }

    pub fn push(&mut self, obs: Option<[f32; OBS_DIM]>, reward: Option<f32>) {
        self.history.pop_front();
        self.history.push_back(obs);
        self.rewards.pop_front();
        self.rewards.push_back(reward);
    }
}

/// Round-indexed exchange of published estimates. A round can only be read
/// once every agent has published into it.
#[derive(Clone, Debug)]
pub struct MessageBoard {
    round: usize,
    posts: Vec<Option<(usize, Vec<f32>)>>,
}

impl MessageBoard {
    pub fn new(agents: usize) -> Self {
        Self {
            round: 0,
            posts: vec![None; agents],
        }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn publish(&mut self, agent: usize, round: usize, view: Vec<f32>) -> Result<()> {
        if round != self.round {
            return Err(Error::Protocol(format!(
                "agent {agent} published for round {round} while the board is at round {}",
                self.round
            )));
        }
        self.posts[agent] = Some((round, view));
        Ok(())
    }

    /// Barrier: closes the current round once all agents published.
    pub fn close_round(&mut self) -> Result<()> {
        if let Some(a) = self.posts.iter().position(|p| p.as_ref().is_none_or(|(r, _)| *r != self.round)) {
            return Err(Error::Protocol(format!("agent {a} has not published round {}", self.round)));
        }
        self.round += 1;
        Ok(())
    }

    /// Estimate of `agent` from the last closed round.
    pub fn read(&self, agent: usize) -> Result<&[f32]> {
        match &self.posts[agent] {
            Some((r, v)) if *r + 1 == self.round => Ok(v),
            _ => Err(Error::Protocol(format!(
                "agent {agent} has no estimate for closed round {}",
                self.round.wrapping_sub(1)
            ))),
        }
    }
}

/// Neighbor feed of `id` from the upstream agents' published estimates
/// (`[T, 12, 2]` each), filling only unavailable cells unless `replace_all`.
pub fn publish_neighbor_view(grid: &Grid, id: usize, base: &NeighborFeed, board: &MessageBoard, replace_all: bool) -> Result<NeighborFeed> {
    let mut feed = base.clone();
    for l in 0..LANES {
        let Some(f) = grid.lane_feeders(id, l) else { continue };
        let est = board.read(f.intersection)?;
        for s in 0..feed.t {
            let lacking = (0..f.lanes.len()).any(|k| !feed.cell_available(l, s, k));
            if replace_all || lacking {
                feed.set_cells(l, s, &f.lanes, &est[s * SLOT..(s + 1) * SLOT], true);
            }
        }
    }
    Ok(feed)
}

pub struct Controller<'m> {
    pub model: &'m TrainedModel,
    pub config: InferenceConfig,
    pub plan: SamplingPlan,
    grid: Grid,
    pub agents: Vec<AgentState>,
    /// Evaluation order within a round; results must not depend on it.
    pub order: Vec<usize>,
}

impl<'m> Controller<'m> {
    pub fn new(model: &'m TrainedModel, grid: Grid, config: InferenceConfig) -> Result<Self> {
        let plan = SamplingPlan::uniform(model.schedule.steps(), config.sampling_steps)?;
        Ok(Self {
            model,
            plan,
            grid,
            agents: (0..grid.len()).map(|i| AgentState::new(i, model.shape.c)).collect(),
            order: (0..grid.len()).collect(),
            config,
        })
    }

    /// Records the current step's (possibly missing) data for every agent.
    pub fn observe(&mut self, sim: &Simulator, mask: &MaskSet, step: usize) {
        let norm = self.model.normalizer;
        for a in &mut self.agents {
            if mask.observed(a.id, step) {
                a.push(Some(norm.obs_vec(&sim.observe(a.id).0)), Some(norm.reward(sim.reward(a.id))));
            } else {
                a.push(None, None);
            }
        }
    }

    fn raw_feed(&self, id: usize) -> NeighborFeed {
        let t = self.model.shape.t();
        NeighborFeed::assemble(&self.grid, id, t, |j, s| self.agents[j].history.get(s).copied().flatten())
    }

    /// Samples every agent's window and returns the generated clean windows.
    pub fn sample_windows(&mut self, step: usize) -> Result<Vec<Vec<f32>>> {
        let shape = self.model.shape;
        let (c, t) = (shape.c, shape.t());
        let sched = &self.model.schedule;
        let n = self.agents.len();
        let cfg = self.config.clone();
        let clip = cfg.clip_x0.then_some((-1.0, 1.0));

        let mut obs = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut rngs = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let base = SeededRng::new(cfg.seed).fork(step as u64);
        for a in &self.agents {
            let mut o = vec![0.0; t * SLOT];
            let mut f = vec![false; t];
            let mut r = vec![cfg.future_reward; t];
            let mut avail = vec![true; t];
            for s in 0..c {
                if let Some(v) = a.history[s] {
                    o[s * SLOT..(s + 1) * SLOT].copy_from_slice(&v);
                    f[s] = true;
                }
                match a.rewards[s] {
                    Some(v) => r[s] = v,
                    None => {
                        r[s] = 0.0;
                        avail[s] = false;
                    }
                }
            }
            let pair = match cfg.reward_handling {
                RewardHandling::Prcd => MaskPair::from_available(&avail),
                RewardHandling::ZeroPad => MaskPair::from_available(&vec![true; t]),
            };
            let mut rng = base.fork(a.id as u64);
            x.push((0..t * SLOT).map(|_| rng.normal_f32()).collect::<Vec<f32>>());
            rngs.push(rng);
            obs.push(o);
            flags.push(f);
            rewards.push(r);
            masks.push(pair);
        }
        let raw: Vec<NeighborFeed> = (0..n).map(|i| self.raw_feed(i)).collect();
        let mut board = MessageBoard::new(n);
        let mut x0 = vec![Vec::new(); n];

        for (round, &(k, k_prev)) in self.plan.transitions().iter().enumerate() {
            let feeds: Vec<NeighborFeed> = if round == 0 || !cfg.dcm_enabled {
                raw.clone()
            } else {
                (0..n)
                    .map(|i| publish_neighbor_view(&self.grid, i, &raw[i], &board, cfg.dcm_replace_all))
                    .collect::<Result<_>>()?
            };
            let mut batch = Vec::with_capacity(2 * n);
            for &i in &self.order {
                let input = NoiseInput {
                    k,
                    xk: x[i].clone(),
                    obs: obs[i].clone(),
                    obs_flag: flags[i].clone(),
                    feed: feeds[i].values.clone(),
                    reward: Some(rewards[i].clone()),
                };
                batch.push(NoiseInput {
                    reward: None,
                    ..input.clone()
                });
                batch.push(input);
            }
            let out = self.model.noise.predict(&batch)?;
            for (slot, &i) in self.order.iter().enumerate() {
                let (eps_null, eps_r) = (&out[2 * slot], &out[2 * slot + 1]);
                let guided = cfg_noise(eps_r, eps_null, cfg.omega)?;
                let eps = prcd_compose(&guided, eps_null, &masks[i])?;
                let (mut next, mut est) = ddim_step_full(&x[i], &eps, k, k_prev, sched, clip)?;
                if cfg.clamp_observed {
                    for s in (0..c).filter(|&s| flags[i][s]) {
                        let gt = &obs[i][s * SLOT..(s + 1) * SLOT];
                        est[s * SLOT..(s + 1) * SLOT].copy_from_slice(gt);
                        let renoised = if k_prev == 0 {
                            gt.to_vec()
                        } else {
                            let noise: Vec<f32> = (0..SLOT).map(|_| rngs[i].normal_f32()).collect();
                            forward_noise(gt, k_prev, &noise, sched)?
                        };
                        next[s * SLOT..(s + 1) * SLOT].copy_from_slice(&renoised);
                    }
                }
                board.publish(i, round, est.clone())?;
                x[i] = next;
                x0[i] = est;
            }
            board.close_round()?;
        }
        for (a, est) in self.agents.iter_mut().zip(&x0) {
            a.published = Some(est.clone());
        }
        Ok(x)
    }

    /// One decision per agent from freshly sampled windows.
    pub fn control_step(&mut self, step: usize) -> Result<Vec<Phase>> {
        let c = self.model.shape.c;
        let windows = self.sample_windows(step)?;
        windows
            .iter()
            .map(|w| {
                let o: [f32; OBS_DIM] = w[(c - 1) * SLOT..c * SLOT].try_into().expect("slot width");
                let next: [f32; OBS_DIM] = w[c * SLOT..(c + 1) * SLOT].try_into().expect("slot width");
                if self.config.use_invdyn {
                    self.model.invdyn.infer_action(&o, &next)
                } else {
                    Ok(rule_decode(&o, &next))
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopResult {
    pub log: EpisodeLog,
    pub att: f64,
}

pub fn att_of(log: &EpisodeLog) -> Result<f64> {
    Ok(average_travel_time(&log.vehicles, Some(log.t_end))?)
}

/// Runs one episode under the planner. `mask` decides which intersections
/// report data at each control step.
pub fn run_closed_loop(
    net: &NetworkSpec,
    flows: &FlowSpec,
    sim_seed: u64,
    model: &TrainedModel,
    mask: &MaskSet,
    config: &InferenceConfig,
) -> Result<ClosedLoopResult> {
    mask.check_topology(net)?;
    let interval = net.min_action_duration.max(1);
    let steps = flows.duration.div_ceil(interval) as usize;
    if mask.steps < steps {
        return Err(Error::Contract(format!("mask covers {} steps, episode needs {steps}", mask.steps)));
    }
    let mut ctl = Controller::new(model, net.topology(), config.clone())?;
    let log = run_episode(net, flows, sim_seed, |step, sim| {
        ctl.observe(sim, mask, step);
        ctl.control_step(step)
    })?;
    let att = att_of(&log)?;
    Ok(ClosedLoopResult { log, att })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn board_enforces_barrier() {
        let mut b = MessageBoard::new(2);
        b.publish(0, 0, vec![1.0]).unwrap();
        assert!(b.close_round().is_err());
        assert!(b.publish(1, 1, vec![2.0]).is_err());
        b.publish(1, 0, vec![2.0]).unwrap();
        b.close_round().unwrap();
        assert_eq!(b.read(1).unwrap(), &[2.0]);
        b.publish(0, 1, vec![3.0]).unwrap();
        assert!(b.close_round().is_err());
    }
}
