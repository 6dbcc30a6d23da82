#![allow(dead_code)]

use difflight::datapipe::{default_mixture, KmLayout, MaskSet, MissingPattern, OfflineDataset, SLOT};
use difflight::model::{forward, ModelConfig, NoiseInput, NoiseModel, NoiseModelKind};
use difflight::trainer::{TrainConfig, TrainedModel};
use numcore::{Objective, Real, SeededRng, Tape, Tensor, Var};
use trafficsim::{FlowSpec, NetworkSpec, LANES};

pub fn small_net() -> NetworkSpec {
    NetworkSpec::grid(2, 2)
}

/// Ten minutes of 2x2 traffic under every behavior policy.
pub fn small_dataset() -> OfflineDataset {
    let net = small_net();
    let flows = FlowSpec::uniform(&net, 550.0, 600);
    OfflineDataset::generate(&net, &flows, &default_mixture(), 1, 11).unwrap()
}

pub fn rm_mask(ds: &OfflineDataset, rate: f64, seed: u64) -> MaskSet {
    MaskSet::generate(&ds.network, ds.steps(), MissingPattern::Rm, rate, seed, KmLayout::Spread).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        train_steps: 4,
        model: ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ..ModelConfig::default()
        },
        invdyn_hidden: 16,
        ..TrainConfig::default()
    }
}

/// Untrained model whose zero-initialized output layer is replaced by random
/// weights, so predictions depend on every input.
pub fn random_model(net: &NetworkSpec, seed: u64) -> TrainedModel {
    let mut m = TrainedModel::untrained(net, &tiny_config()).unwrap();
    let mut rng = SeededRng::new(seed);
    for name in ["head.1.w", "head.1.b"] {
        let t = m.noise.params.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = 0.3 * rng.normal_f32();
        }
    }
    m
}

pub fn config(t: usize, kind: NoiseModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        d_model: 16,
        layers: 1,
        heads: 2,
        t,
        k_max: 100,
    }
}

pub fn input(t: usize, seed: u64, reward: bool) -> NoiseInput {
    let mut r = SeededRng::new(seed);
    let mut v = |n: usize| (0..n).map(|_| r.normal_f32().clamp(-1.0, 1.0)).collect::<Vec<f32>>();
    let xk = v(t * SLOT);
    let obs = v(t * SLOT);
    let feed = v(LANES * t * 6);
    let rewards = v(t);
    NoiseInput {
        k: 1 + (seed as usize * 37) % 100,
        xk,
        obs,
        obs_flag: (0..t).map(|s| s % 2 == 0).collect(),
        feed,
        reward: reward.then_some(rewards),
    }
}

/// Model with its zero-initialized output layer randomized so every
/// parameter receives gradient.
pub fn live_model(cfg: ModelConfig, seed: u64) -> NoiseModel {
    let mut m = NoiseModel::new(cfg, seed).unwrap();
    let mut r = SeededRng::new(seed + 1);
    let names: Vec<String> = m.params.names().iter().filter(|n| n.starts_with("head.1") || n.starts_with("out")).cloned().collect();
    for n in names {
        for x in m.params.get_mut(&n).unwrap().data_mut() {
            *x = 0.5 * r.normal_f32();
        }
    }
    m
}

pub struct WeightedOutput {
    pub model: NoiseModel,
    pub batch: Vec<NoiseInput>,
    pub weights: Vec<f64>,
}

impl Objective for WeightedOutput {
    fn eval<S: Real>(&self, tape: &mut Tape<S>, params: &[Var]) -> numcore::Result<Var> {
        let out = forward(&self.model.config, &self.model.params, tape, params, &self.batch).map_err(|e| numcore::NumError::Contract(e.to_string()))?;
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(Tensor::new(shape, self.weights.iter().map(|&x| S::from_f64_lossy(x)).collect())?);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    }
}

pub fn objective(kind: NoiseModelKind) -> (WeightedOutput, Vec<Tensor<f64>>) {
    let cfg = config(4, kind);
    let model = live_model(cfg, 3);
    let batch = vec![input(4, 1, true), input(4, 2, false)];
    let mut r = SeededRng::new(9);
    let weights = (0..2 * 4 * SLOT).map(|_| r.normal()).collect();
    let params = model.params.tensors().iter().map(|t| t.cast::<f64>()).collect();
    (WeightedOutput { model, batch, weights }, params)
}

