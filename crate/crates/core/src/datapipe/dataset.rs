//! Offline dataset: behavior-policy episodes stored as raw counts.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use numcore::SeededRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trafficsim::{EpisodeLog, FlowSpec, NetworkSpec, Phase, OBS_DIM};

use super::normalize::Normalizer;
use super::policy::{run_behavior_policy, BehaviorPolicy};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Hex SHA-256 of everything about a network that shapes its data.
pub fn topology_hash(net: &NetworkSpec) -> String {
    let key = format!(
        "grid:{}x{};fft:{};cap:{};headway:{};min_action:{}",
        net.rows, net.cols, net.free_flow_time, net.lane_capacity, net.saturation_headway, net.min_action_duration
    );
    hex::encode(Sha256::digest(key.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One episode as dense `[step][intersection]` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub policy: String,
    pub seed: u64,
    pub intersections: usize,
    pub steps: usize,
    obs: Vec<[f32; OBS_DIM]>,
    actions: Vec<Phase>,
    rewards: Vec<f32>,
    pub log: EpisodeLog,
}

impl Episode {
    pub fn from_log(log: EpisodeLog, intersections: usize, policy: &str, seed: u64) -> Result<Self> {
        if intersections == 0 || !log.steps.len().is_multiple_of(intersections) {
            return Err(Error::Format(format!(
                "{} step records do not tile {intersections} intersections",
                log.steps.len()
            )));
        }
        let steps = log.steps.len() / intersections;
        let mut obs = vec![[0.0; OBS_DIM]; log.steps.len()];
        let mut actions = vec![Phase::A; log.steps.len()];
        let mut rewards = vec![0.0; log.steps.len()];
        let mut seen = vec![false; log.steps.len()];
        let mut times: Vec<u64> = log.steps.iter().map(|s| s.t).collect();
        times.sort_unstable();
        times.dedup();
        if times.len() != steps {
            return Err(Error::Format("step times are not shared by all intersections".into()));
        }
        for r in &log.steps {
            let s = times.binary_search(&r.t).expect("time collected above");
            if r.intersection_id >= intersections {
                return Err(Error::Format(format!("intersection {} out of range", r.intersection_id)));
            }
            let k = s * intersections + r.intersection_id;
            if seen[k] {
                return Err(Error::Format(format!("duplicate record t={} i={}", r.t, r.intersection_id)));
            }
            seen[k] = true;
            obs[k] = r.obs;
            actions[k] = r.action;
            rewards[k] = r.reward;
        }
        Ok(Self {
            policy: policy.to_string(),
            seed,
            intersections,
            steps,
            obs,
            actions,
            rewards,
            log,
        })
    }

    pub fn obs(&self, intersection: usize, step: usize) -> &[f32; OBS_DIM] {
        &self.obs[step * self.intersections + intersection]
    }

    pub fn action(&self, intersection: usize, step: usize) -> Phase {
        self.actions[step * self.intersections + intersection]
    }

    /// Raw queue sum observed together with `obs(intersection, step)`.
    pub fn reward(&self, intersection: usize, step: usize) -> f32 {
        self.rewards[step * self.intersections + intersection]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub file: String,
    pub policy: BehaviorPolicy,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub topology_hash: String,
    pub network: NetworkSpec,
    pub flows: FlowSpec,
    pub normalizer: Normalizer,
    pub episodes: Vec<EpisodeEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub network: NetworkSpec,
    pub flows: FlowSpec,
    pub normalizer: Normalizer,
    pub policies: Vec<BehaviorPolicy>,
    pub episodes: Vec<Episode>,
}

/// Fixed-time, greedy and epsilon-greedy in equal shares.
pub fn default_mixture() -> Vec<BehaviorPolicy> {
    vec![
        BehaviorPolicy::FixedTime,
        BehaviorPolicy::GreedyQueue,
        BehaviorPolicy::EpsilonGreedyQueue { epsilon: 0.1 },
    ]
}

impl OfflineDataset {
    /// `episodes_per_policy` episodes of every policy in `mixture`, each with
    /// its own simulator seed derived from `seed`.
    pub fn generate(
        net: &NetworkSpec,
        flows: &FlowSpec,
        mixture: &[BehaviorPolicy],
        episodes_per_policy: usize,
        seed: u64,
    ) -> Result<Self> {
        net.validate()?;
        flows.validate(net)?;
        let root = SeededRng::new(seed);
        let n = net.topology().len();
        let mut episodes = Vec::new();
        let mut policies = Vec::new();
        for (p, policy) in mixture.iter().enumerate() {
            for e in 0..episodes_per_policy {
                let ep_seed = root.fork((p * 1_000_003 + e) as u64).seed();
                let log = run_behavior_policy(net, flows, *policy, ep_seed)?;
                episodes.push(Episode::from_log(log, n, policy.name(), ep_seed)?);
                policies.push(*policy);
            }
        }
        Ok(Self {
            network: net.clone(),
            flows: flows.clone(),
            normalizer: Normalizer::new(net.lane_capacity),
            policies,
            episodes,
        })
    }

    pub fn intersections(&self) -> usize {
        self.network.topology().len()
    }

    pub fn topology_hash(&self) -> String {
        topology_hash(&self.network)
    }

    /// Shortest episode length in control steps.
    pub fn steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps).min().unwrap_or(0)
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (k, (ep, policy)) in self.episodes.iter().zip(&self.policies).enumerate() {
            let file = format!("episode_{k:04}.jsonl");
            let mut bytes = Vec::new();
            ep.log.write_to(&mut bytes)?;
            std::fs::write(dir.join(&file), &bytes)?;
            entries.push(EpisodeEntry {
                file,
                policy: *policy,
                seed: ep.seed,
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = DatasetManifest {
            schema_version: DATASET_SCHEMA,
            topology_hash: self.topology_hash(),
            network: self.network.clone(),
            flows: self.flows.clone(),
            normalizer: self.normalizer,
            episodes: entries,
        };
        let w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(w, &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
        if manifest.schema_version != DATASET_SCHEMA {
            return Err(Error::Format(format!("dataset schema {} unsupported", manifest.schema_version)));
        }
        if manifest.topology_hash != topology_hash(&manifest.network) {
            return Err(Error::Format("dataset topology hash does not match its network".into()));
        }
        let n = manifest.network.topology().len();
        let mut episodes = Vec::new();
        let mut policies = Vec::new();
        for e in &manifest.episodes {
            let bytes = std::fs::read(dir.join(&e.file))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Format(format!("{}: content hash mismatch (stale artifact)", e.file)));
            }
            let log = EpisodeLog::read_from(&bytes[..])?;
            episodes.push(Episode::from_log(log, n, e.policy.name(), e.seed)?);
            policies.push(e.policy);
        }
        Ok(Self {
            network: manifest.network,
            flows: manifest.flows,
            normalizer: manifest.normalizer,
            policies,
            episodes,
        })
    }
}
