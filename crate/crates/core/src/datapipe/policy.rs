//! Scripted behavior policies used to build the offline dataset, and the
//! episode driver shared with the closed-loop controller.

use numcore::SeededRng;
use serde::{Deserialize, Serialize};
use trafficsim::{EpisodeLog, FlowSpec, NetworkSpec, Observation, Phase, Simulator, StepRecord};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorPolicy {
    /// A, B, C, D, A, ... one control step each.
    FixedTime,
    /// Phase whose two movements hold the most queued vehicles.
    GreedyQueue,
    EpsilonGreedyQueue { epsilon: f64 },
    Random,
}

impl BehaviorPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            BehaviorPolicy::FixedTime => "fixed_time",
            BehaviorPolicy::GreedyQueue => "greedy_queue",
            BehaviorPolicy::EpsilonGreedyQueue { .. } => "epsilon_greedy_queue",
            BehaviorPolicy::Random => "random",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "fixed_time" | "fixed" => BehaviorPolicy::FixedTime,
            "greedy_queue" | "greedy" => BehaviorPolicy::GreedyQueue,
            "epsilon_greedy_queue" | "eps_greedy" => BehaviorPolicy::EpsilonGreedyQueue { epsilon: 0.1 },
            "random" => BehaviorPolicy::Random,
            other => return Err(Error::Config(format!("unknown behavior policy `{other}`"))),
        })
    }

    pub fn choose(&self, step: usize, obs: &Observation, rng: &mut SeededRng) -> Phase {
        match *self {
            BehaviorPolicy::FixedTime => Phase::ALL[step % 4],
            BehaviorPolicy::GreedyQueue => greedy_phase(obs),
            BehaviorPolicy::EpsilonGreedyQueue { epsilon } => {
                if rng.bernoulli(epsilon) {
                    Phase::ALL[rng.below(4)]
                } else {
                    greedy_phase(obs)
                }
            }
            BehaviorPolicy::Random => Phase::ALL[rng.below(4)],
        }
    }
}

/// Argmax of summed movement queues; ties go to the lowest phase index.
pub fn greedy_phase(obs: &Observation) -> Phase {
    let mut best = Phase::A;
    let mut best_q = f32::NEG_INFINITY;
    for p in Phase::ALL {
        let q: f32 = p.movements().iter().map(|&m| obs.queue(m)).sum();
        if q > best_q {
            best = p;
            best_q = q;
        }
    }
    best
}

/// Drives a full episode on the control grid (one decision per minimum
/// action duration). `decide` sees the step index and the simulator before
/// the step's actions are applied and returns one phase per intersection.
pub fn run_episode(
    net: &NetworkSpec,
    flows: &FlowSpec,
    seed: u64,
    mut decide: impl FnMut(usize, &Simulator) -> Result<Vec<Phase>>,
) -> Result<EpisodeLog> {
    let mut sim = Simulator::new(net.clone(), flows.clone(), seed)?;
    let interval = net.min_action_duration.max(1);
    let n = sim.grid().len();
    let mut steps = Vec::new();
    let mut step = 0;
    while !sim.is_finished() {
        let actions = decide(step, &sim)?;
        if actions.len() != n {
            return Err(Error::Contract(format!("{} actions for {n} intersections", actions.len())));
        }
        for (i, &a) in actions.iter().enumerate() {
            steps.push(StepRecord {
                t: sim.time(),
                intersection_id: i,
                obs: sim.observe(i).0,
                action: a,
                reward: sim.reward(i),
            });
        }
        let remaining = flows.duration - sim.time();
        sim.run_for(&actions, interval.min(remaining))?;
        step += 1;
    }
    Ok(EpisodeLog {
        steps,
        vehicles: sim.records().to_vec(),
        t_end: sim.time(),
    })
}

pub fn run_behavior_policy(net: &NetworkSpec, flows: &FlowSpec, policy: BehaviorPolicy, seed: u64) -> Result<EpisodeLog> {
    let mut rng = SeededRng::new(seed).fork(0x9011c7);
    run_episode(net, flows, seed, |step, sim| {
        Ok((0..sim.grid().len())
            .map(|i| policy.choose(step, &sim.observe(i), &mut rng))
            .collect())
    })
}
