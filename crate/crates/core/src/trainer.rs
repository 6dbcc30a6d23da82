//! Joint training of the noise model and inverse dynamics on windows with
//! artificially hidden observations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use numcore::{AdamConfig, AdamState, Checkpoint, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use trafficsim::NetworkSpec;

use crate::datapipe::{
    self_supervised_split, topology_hash, valid_anchors, window, MaskSet, Normalizer, OfflineDataset, RewardTrajectory,
    SplitSample, TrajectoryWindow, WindowShape, SLOT,
};
use crate::diffusion::{forward_noise, DiffusionSchedule, MaskPair};
use crate::error::{Error, Result};
use crate::invdyn::{clean_transitions, InverseDynamics, Transition};
use crate::model::{ModelConfig, NoiseInput, NoiseModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskPolicy {
    /// Only cells with recorded ground truth (observed or artificially hidden).
    #[default]
    KnownCellsOnly,
    AllCells,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardHandling {
    /// Reward-conditioned estimate where rewards exist, null estimate elsewhere.
    #[default]
    Prcd,
    /// Missing rewards replaced by zeros inside a single conditioned pass.
    ZeroPad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub train_steps: usize,
    pub p_uncond: f64,
    pub omega: f32,
    pub c: usize,
    pub h: usize,
    pub k: usize,
    pub seed: u64,
    pub loss_mask_policy: LossMaskPolicy,
    pub reward_handling: RewardHandling,
    pub model: ModelConfig,
    pub invdyn_hidden: usize,
    /// Save an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 2e-4,
            train_steps: 20_000,
            p_uncond: 0.25,
            omega: 1.2,
            c: 5,
            h: 3,
            k: 100,
            seed: 0,
            loss_mask_policy: LossMaskPolicy::KnownCellsOnly,
            reward_handling: RewardHandling::Prcd,
            model: ModelConfig::default(),
            invdyn_hidden: 128,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale step count.
    pub const FULL_SCALE_STEPS: usize = 150_000;

    pub fn shape(&self) -> WindowShape {
        WindowShape { c: self.c, h: self.h }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 || self.c == 0 || self.k == 0 || self.invdyn_hidden == 0 {
            return Err(Error::Config("batch_size, lr, c, k and invdyn_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond {} outside [0, 1)", self.p_uncond)));
        }
        if self.c + self.h != self.model.t {
            return Err(Error::Config(format!(
                "window C + H = {} but the model expects T = {}",
                self.c + self.h,
                self.model.t
            )));
        }
        if self.k != self.model.k_max {
            return Err(Error::Config("diffusion K differs from the model's step range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub diffusion_loss: Vec<f32>,
    pub invdyn_loss: Vec<f32>,
    pub dropout_draws: usize,
    pub dropouts: usize,
    pub wall_clock_s: f64,
    pub checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn dropout_rate(&self) -> f64 {
        self.dropouts as f64 / self.dropout_draws.max(1) as f64
    }

    /// Same numbers, ignoring wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.diffusion_loss == other.diffusion_loss
            && self.invdyn_loss == other.invdyn_loss
            && self.dropouts == other.dropouts
            && self.dropout_draws == other.dropout_draws
            && self.config == other.config
    }
}

/// Reward condition of one pass: the trajectory, or the learned null token.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Reward(Vec<f32>),
    Null,
}

/// Condition and per-slot composition masks for one training sample.
/// `dropped` replaces the reward by the null token everywhere.
pub fn training_condition_builder(
    window: &TrajectoryWindow,
    reward: &RewardTrajectory,
    dropped: bool,
    handling: RewardHandling,
) -> Result<(Condition, MaskPair)> {
    let t = window.t();
    if reward.available_mask.len() != t {
        return Err(Error::Contract("reward trajectory and window lengths differ".into()));
    }
    if dropped {
        return Ok((Condition::Null, MaskPair::from_available(&vec![false; t])));
    }
    match handling {
        RewardHandling::Prcd => Ok((
            Condition::Reward(reward.values.clone()),
            MaskPair::from_available(&reward.available_mask),
        )),
        RewardHandling::ZeroPad => {
            let zeroed = reward
                .values
                .iter()
                .zip(&reward.available_mask)
                .map(|(&v, &a)| if a { v } else { 0.0 })
                .collect();
            Ok((Condition::Reward(zeroed), MaskPair::from_available(&vec![true; t])))
        }
    }
}

/// A drawn sample ready for a forward pass.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub origin: (usize, usize, usize),
    pub split: SplitSample,
    pub k: usize,
    pub eps: Vec<f32>,
    pub dropped: bool,
}

/// One network pass: inputs, regression target and per-cell loss weight.
struct Entry {
    input: NoiseInput,
    target: Vec<f32>,
    weight: Vec<f32>,
}

fn entries(samples: &[TrainSample], sched: &DiffusionSchedule, cfg: &TrainConfig) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for s in samples {
        let w = &s.split.sample.window;
        let xk = forward_noise(&w.values, s.k, &s.eps, sched)?;
        let (cond, masks) = training_condition_builder(w, &s.split.sample.reward, s.dropped, cfg.reward_handling)?;
        let base = NoiseInput {
            k: s.k,
            xk,
            obs: w.condition_values(),
            obs_flag: w.observed_mask.clone(),
            feed: s.split.sample.feed.values.clone(),
            reward: None,
        };
        let cell_weight = |slot: usize, selected: bool| -> f32 {
            let known = match cfg.loss_mask_policy {
                LossMaskPolicy::KnownCellsOnly => w.known_mask[slot],
                LossMaskPolicy::AllCells => true,
            };
            if selected && known {
                1.0
            } else {
                0.0
            }
        };
        let weights = |sel: &[bool]| -> Vec<f32> {
            (0..w.t())
                .flat_map(|slot| std::iter::repeat_n(cell_weight(slot, sel[slot]), SLOT))
                .collect()
        };
        let reward = match cond {
            Condition::Reward(r) => Some(r),
            Condition::Null => None,
        };
        if reward.is_some() && masks.m_obs().iter().any(|&m| m) {
            out.push(Entry {
                input: NoiseInput {
                    reward: reward.clone(),
                    ..base.clone()
                },
                target: s.eps.clone(),
                weight: weights(masks.m_obs()),
            });
        }
        let null_slots: Vec<bool> = if reward.is_some() {
            masks.m_mis().to_vec()
        } else {
            vec![true; w.t()]
        };
        if null_slots.iter().any(|&m| m) {
            out.push(Entry {
                input: base,
                target: s.eps.clone(),
                weight: weights(&null_slots),
            });
        }
    }
    Ok(out)
}

/// Weighted mean squared error of the predicted noise, on `tape`.
fn diffusion_loss<S: numcore::Real>(
    model: &NoiseModel,
    tape: &mut Tape<S>,
    vars: &[Var],
    entries: &[Entry],
) -> Result<Var> {
    let total: f32 = entries.iter().map(|e| e.weight.iter().sum::<f32>()).sum();
    if total == 0.0 {
        return Err(Error::Skip("batch has no cell with known ground truth".into()));
    }
    let inputs: Vec<NoiseInput> = entries.iter().map(|e| e.input.clone()).collect();
    let out = model.forward_with(tape, vars, &inputs)?;
    weighted_mse(tape, out, entries, total)
}

/// `sum(weight / total * (out - target)^2)` over the stacked entries.
fn weighted_mse<S: numcore::Real>(tape: &mut Tape<S>, out: Var, entries: &[Entry], total: f32) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let cast = |v: Vec<f32>| v.into_iter().map(|x| S::from_f64_lossy(x as f64)).collect::<Vec<S>>();
    let target = tape.constant(Tensor::new(shape.clone(), cast(entries.iter().flat_map(|e| e.target.clone()).collect()))?);
    let weight = tape.constant(Tensor::new(
        shape,
        cast(entries.iter().flat_map(|e| e.weight.iter().map(|w| w / total)).collect()),
    )?);
    let diff = tape.sub(out, target)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weight)?;
    Ok(tape.sum(weighted)?)
}

/// Everything needed to run the planner: both networks plus the data
/// conventions they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub noise: NoiseModel,
    pub invdyn: InverseDynamics,
    pub schedule: DiffusionSchedule,
    pub shape: WindowShape,
    pub normalizer: Normalizer,
    pub topology_hash: String,
    pub extra: BTreeMap<String, String>,
}

impl TrainedModel {
    /// Freshly initialized networks for `net` under `config`.
    pub fn untrained(net: &NetworkSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            noise: NoiseModel::new(config.model, config.seed)?,
            invdyn: InverseDynamics::new(config.invdyn_hidden, config.seed),
            schedule: DiffusionSchedule::cosine(config.k)?,
            shape: config.shape(),
            normalizer: Normalizer::new(net.lane_capacity),
            topology_hash: topology_hash(net),
            extra: BTreeMap::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.noise.params.write_to("noise", &mut ck);
        self.invdyn.params.write_to("invdyn", &mut ck);
        ck.manifest = self.noise.config.manifest();
        ck.set("invdyn.hidden", self.invdyn.hidden);
        ck.set("window.c", self.shape.c);
        ck.set("window.h", self.shape.h);
        ck.set("window.t", self.shape.t());
        ck.set("window.neighbor_lanes", trafficsim::FEEDERS);
        ck.set("diffusion.k", self.schedule.steps());
        ck.set("diffusion.schedule", &self.schedule.name);
        ck.set("diffusion.s", self.schedule.s);
        ck.set("normalizer.lane_capacity", self.normalizer.lane_capacity);
        ck.set("topology_hash", &self.topology_hash);
        for (k, v) in &self.extra {
            ck.set(k.clone(), v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        let get = |k: &str| -> Result<&String> { m.get(k).ok_or_else(|| Error::Format(format!("manifest lacks {k}"))) };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|e| Error::Format(format!("{k}: {e}"))) };
        let config = ModelConfig::from_manifest(m)?;
        let mut noise = NoiseModel::new(config, 0)?;
        noise.params.read_from("noise", ck)?;
        let mut invdyn = InverseDynamics::new(num("invdyn.hidden")?, 0);
        invdyn.params.read_from("invdyn", ck)?;
        if get("diffusion.schedule")? != "cosine" {
            return Err(Error::Format("only the cosine schedule can be restored".into()));
        }
        let schedule = DiffusionSchedule::cosine(num("diffusion.k")?)?;
        let cap: f32 = get("normalizer.lane_capacity")?
            .parse()
            .map_err(|e| Error::Format(format!("lane_capacity: {e}")))?;
        let known = [
            "invdyn.hidden",
            "window.c",
            "window.h",
            "window.t",
            "window.neighbor_lanes",
            "diffusion.k",
            "diffusion.schedule",
            "diffusion.s",
            "normalizer.lane_capacity",
            "topology_hash",
        ];
        let extra = m
            .iter()
            .filter(|(k, _)| !k.starts_with("model.") && !known.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            noise,
            invdyn,
            schedule,
            shape: WindowShape {
                c: num("window.c")?,
                h: num("window.h")?,
            },
            normalizer: Normalizer { lane_capacity: cap },
            topology_hash: get("topology_hash")?.clone(),
            extra,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

/// Step-by-step trainer; [`train`] drives it to completion.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: TrainedModel,
    dataset: &'a OfflineDataset,
    mask: &'a MaskSet,
    anchors: Vec<(usize, usize, usize)>,
    transitions: Vec<Transition>,
    noise_adam: AdamState,
    invdyn_adam: AdamState,
    sampler: SeededRng,
    splitter: SeededRng,
    noiser: SeededRng,
    dropout: ConditionDropout,
    transition_rng: SeededRng,
    pub report: TrainReport,
    step: usize,
    started: Instant,
}

/// Bernoulli(p) draws replacing the reward condition by the null token.
#[derive(Clone, Debug)]
pub struct ConditionDropout {
    pub p: f64,
    rng: SeededRng,
    pub draws: usize,
    pub dropped: usize,
}

impl ConditionDropout {
    pub fn new(p: f64, rng: SeededRng) -> Self {
        Self {
            p,
            rng,
            draws: 0,
            dropped: 0,
        }
    }

    pub fn draw(&mut self) -> bool {
        let d = self.rng.bernoulli(self.p);
        self.draws += 1;
        self.dropped += usize::from(d);
        d
    }

    pub fn rate(&self) -> f64 {
        self.dropped as f64 / self.draws.max(1) as f64
    }
}

impl<'a> Trainer<'a> {
    /// Trains on `episodes` of `dataset` (all episodes when `None`).
    pub fn new(dataset: &'a OfflineDataset, mask: &'a MaskSet, config: TrainConfig, episodes: Option<&[usize]>) -> Result<Self> {
        config.validate()?;
        mask.check_topology(&dataset.network)?;
        let shape = config.shape();
        let episodes: Vec<usize> = episodes.map_or_else(|| (0..dataset.episodes.len()).collect(), <[usize]>::to_vec);
        let mut anchors = Vec::new();
        for &e in &episodes {
            let ep = dataset
                .episodes
                .get(e)
                .ok_or_else(|| Error::Contract(format!("episode {e} out of range")))?;
            for i in 0..ep.intersections {
                for a in valid_anchors(shape, ep.steps) {
                    anchors.push((e, i, a));
                }
            }
        }
        if anchors.is_empty() {
            return Err(Error::Contract("dataset has no complete window".into()));
        }
        let transitions = clean_transitions(dataset, mask, episodes.iter().copied());
        let root = SeededRng::new(config.seed);
        let mut model = TrainedModel::untrained(&dataset.network, &config)?;
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let noise_adam = AdamState::new(adam, model.noise.params.tensors());
        let invdyn_adam = AdamState::new(adam, model.invdyn.params.tensors());
        model.extra.insert("train.seed".to_string(), config.seed.to_string());
        model.extra.insert("train.mask_pattern".to_string(), format!("{:?}", mask.pattern).to_lowercase());
        model.extra.insert("train.mask_rate".to_string(), mask.rate.to_string());
        let report = TrainReport {
            diffusion_loss: Vec::new(),
            invdyn_loss: Vec::new(),
            dropout_draws: 0,
            dropouts: 0,
            wall_clock_s: 0.0,
            checkpoint: None,
            config: config.clone(),
        };
        Ok(Self {
            dropout: ConditionDropout::new(config.p_uncond, root.fork(4)),
            config,
            model,
            dataset,
            mask,
            anchors,
            transitions,
            noise_adam,
            invdyn_adam,
            sampler: root.fork(1),
            splitter: root.fork(2),
            noiser: root.fork(3),
            transition_rng: root.fork(5),
            report,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws `n` samples with the given streams; windows with nothing to
    /// learn from are redrawn.
    fn draw(&mut self, n: usize) -> Result<Vec<TrainSample>> {
        let grid = self.dataset.network.topology();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::Contract("could not draw trainable windows: data almost entirely missing".into()));
            }
            let (e, i, a) = self.anchors[self.sampler.below(self.anchors.len())];
            let w = window(self.dataset, self.mask, e, i, a, self.config.shape())?;
            if self.config.loss_mask_policy == LossMaskPolicy::KnownCellsOnly && !w.window.known_mask.iter().any(|&k| k) {
                continue;
            }
            let split = match self_supervised_split(&w, &grid, self.mask.pattern, &mut self.splitter) {
                Ok(s) => s,
                Err(Error::Skip(_)) => continue,
                Err(e) => return Err(e),
            };
            let k = 1 + self.noiser.below(self.config.k);
            let eps = (0..w.window.values.len()).map(|_| self.noiser.normal_f32()).collect();
            let dropped = self.dropout.draw();
            out.push(TrainSample {
                origin: (e, i, a),
                split,
                k,
                eps,
                dropped,
            });
        }
        Ok(out)
    }

    /// Draws a batch without touching the training streams (for evaluation).
    pub fn draw_fixed(&self, n: usize, seed: u64) -> Result<Vec<TrainSample>> {
        let mut probe = Trainer {
            config: self.config.clone(),
            model: self.model.clone(),
            dataset: self.dataset,
            mask: self.mask,
            anchors: self.anchors.clone(),
            transitions: Vec::new(),
            noise_adam: self.noise_adam.clone(),
            invdyn_adam: self.invdyn_adam.clone(),
            sampler: SeededRng::new(seed).fork(1),
            splitter: SeededRng::new(seed).fork(2),
            noiser: SeededRng::new(seed).fork(3),
            dropout: ConditionDropout::new(self.config.p_uncond, SeededRng::new(seed).fork(4)),
            transition_rng: SeededRng::new(seed).fork(5),
            report: self.report.clone(),
            step: 0,
            started: self.started,
        };
        probe.draw(n)
    }

    /// Diffusion loss of `model` on a fixed set of samples (no update).
    pub fn evaluate(model: &TrainedModel, samples: &[TrainSample], config: &TrainConfig) -> Result<f32> {
        let es = entries(samples, &model.schedule, config)?;
        let mut tape = Tape::<f32>::inference();
        let vars: Vec<Var> = model.noise.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let loss = diffusion_loss(&model.noise, &mut tape, &vars, &es)?;
        Ok(tape.value(loss).item())
    }

    /// One optimization step; returns (diffusion loss, invdyn loss).
    pub fn step(&mut self) -> Result<(f32, f32)> {
        let samples = self.draw(self.config.batch_size)?;
        let es = entries(&samples, &self.model.schedule, &self.config)?;
        let step = self.step;
        let dump = |detail: String| {
            let origins: Vec<String> = samples
                .iter()
                .map(|s| format!("(episode {}, intersection {}, anchor {}, k {}, dropped {})", s.origin.0, s.origin.1, s.origin.2, s.k, s.dropped))
                .collect();
            Error::NonFiniteLoss {
                step,
                detail: format!("{detail}; batch: [{}]", origins.join(", ")),
            }
        };

        let mut tape = Tape::<f32>::new();
        let noise_vars: Vec<Var> = self.model.noise.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        let d_loss = match diffusion_loss(&self.model.noise, &mut tape, &noise_vars, &es) {
            Ok(v) => v,
            Err(Error::Num(e)) => return Err(dump(e.to_string())),
            Err(e) => return Err(e),
        };
        let d_val = tape.value(d_loss).item();
        if !d_val.is_finite() {
            return Err(dump("diffusion loss".into()));
        }
        let inv_vars: Vec<Var> = self.model.invdyn.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        let batch: Vec<Transition> = if self.transitions.is_empty() {
            Vec::new()
        } else {
            (0..self.config.batch_size)
                .map(|_| self.transitions[self.transition_rng.below(self.transitions.len())].clone())
                .collect()
        };
        let (total, i_val) = match self.model.invdyn.loss(&mut tape, &inv_vars, &batch) {
            Ok(l) => {
                let v = tape.value(l).item();
                if !v.is_finite() {
                    return Err(dump("inverse dynamics loss".into()));
                }
                (tape.add(d_loss, l)?, v)
            }
            Err(Error::Skip(_)) => (d_loss, 0.0),
            Err(e) => return Err(e),
        };
        let mut grads = tape.backward(total)?;
        let collect = |vars: &[Var], params: &[Tensor<f32>], grads: &mut numcore::Gradients<f32>| -> Result<Vec<Tensor<f32>>> {
            vars.iter()
                .zip(params)
                .map(|(v, p)| Ok(Tensor::new(p.shape().to_vec(), grads.take(*v).unwrap_or_else(|| vec![0.0; p.len()]))?))
                .collect()
        };
        let g_noise = collect(&noise_vars, self.model.noise.params.tensors(), &mut grads)?;
        let g_inv = collect(&inv_vars, self.model.invdyn.params.tensors(), &mut grads)?;
        self.noise_adam
            .step(self.model.noise.params.tensors_mut(), &g_noise)
            .map_err(|e| dump(e.to_string()))?;
        self.invdyn_adam
            .step(self.model.invdyn.params.tensors_mut(), &g_inv)
            .map_err(|e| dump(e.to_string()))?;
        self.step += 1;
        self.report.diffusion_loss.push(d_val);
        self.report.invdyn_loss.push(i_val);
        self.report.dropout_draws = self.dropout.draws;
        self.report.dropouts = self.dropout.dropped;
        Ok((d_val, i_val))
    }

    pub fn finish(mut self, out_dir: Option<&Path>) -> Result<(TrainReport, TrainedModel)> {
        self.model.extra.insert("train.steps".into(), self.step.to_string());
        if let Some(dir) = out_dir {
            let path = dir.join("final");
            self.model.save(&path)?;
            self.report.checkpoint = Some(path);
        }
        self.report.wall_clock_s = self.started.elapsed().as_secs_f64();
        Ok((self.report, self.model))
    }
}

/// Runs `config.train_steps` steps; checkpoints go under `out_dir`.
pub fn train(
    dataset: &OfflineDataset,
    mask: &MaskSet,
    config: TrainConfig,
    episodes: Option<&[usize]>,
    out_dir: Option<&Path>,
) -> Result<(TrainReport, TrainedModel)> {
    let mut trainer = Trainer::new(dataset, mask, config, episodes)?;
    for s in 0..trainer.config.train_steps {
        trainer.step()?;
        let every = trainer.config.checkpoint_every;
        if let (Some(dir), true) = (out_dir, every > 0 && (s + 1) % every == 0) {
            trainer.model.save(&dir.join(format!("step_{:07}", s + 1)))?;
        }
    }
    trainer.finish(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_with(avail: Vec<bool>) -> (TrajectoryWindow, RewardTrajectory) {
        let t = avail.len();
        (
            TrajectoryWindow {
                values: vec![0.0; t * SLOT],
                observed_mask: avail.clone(),
                known_mask: avail.clone(),
                t_anchor: 4,
            },
            RewardTrajectory {
                values: vec![0.5; t],
                available_mask: avail,
            },
        )
    }

    #[test]
    fn condition_builder_cases() {
        let (w, r) = window_with(vec![true; 4]);
        let (c, m) = training_condition_builder(&w, &r, false, RewardHandling::Prcd).unwrap();
        assert_eq!(c, Condition::Reward(vec![0.5; 4]));
        assert!(m.m_mis().iter().all(|&x| !x));
        let (c, m) = training_condition_builder(&w, &r, true, RewardHandling::Prcd).unwrap();
        assert_eq!(c, Condition::Null);
        assert!(m.m_obs().iter().all(|&x| !x));
        let (w, r) = window_with(vec![true, false, true, false]);
        let (_, m) = training_condition_builder(&w, &r, false, RewardHandling::Prcd).unwrap();
        assert_eq!(m.m_mis(), &[false, true, false, true]);
    }

    #[test]
    fn excluded_cells_get_no_gradient() {
        let t = 2;
        let mut weight = vec![0.0; t * SLOT];
        weight[..SLOT].fill(1.0);
        let e = Entry {
            input: NoiseInput {
                k: 1,
                xk: vec![0.0; t * SLOT],
                obs: vec![0.0; t * SLOT],
                obs_flag: vec![false; t],
                feed: Vec::new(),
                reward: None,
            },
            target: vec![-1.0; t * SLOT],
            weight,
        };
        let mut tape = Tape::<f64>::new();
        let out = tape.param(Tensor::from_fn(vec![1, t, 12, 2], |i| i as f64 * 0.1));
        let loss = weighted_mse(&mut tape, out, std::slice::from_ref(&e), SLOT as f32).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.wrt(out).unwrap();
        assert!(g[..SLOT].iter().all(|&x| x != 0.0));
        assert!(g[SLOT..].iter().all(|&x| x == 0.0));
    }
}
