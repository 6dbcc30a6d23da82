//! Noise prediction networks: the spatial-temporal transformer and a small
//! temporal U-Net used only for ablations.

mod params;
pub mod stformer;
pub mod unet;

use std::collections::BTreeMap;

use numcore::nn::{linear, mlp2};
use numcore::{Real, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use trafficsim::{FEEDERS, LANES};

pub use params::{Bound, Init, ParamStore};

use crate::datapipe::{SLOT, FEATURES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModelKind {
    Stformer,
    UnetStub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: NoiseModelKind,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Window length `T`.
    pub t: usize,
    /// Diffusion steps `K` (range of the step embedding).
    pub k_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: NoiseModelKind::Stformer,
            d_model: 64,
            layers: 2,
            heads: 4,
            t: 8,
            k_max: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_model >= 2
            && self.d_model.is_multiple_of(2)
            && self.heads > 0
            && self.d_model.is_multiple_of(self.heads)
            && self.t > 0
            && self.k_max > 0
            && (self.kind != NoiseModelKind::UnetStub || self.t.is_multiple_of(2));
        if !ok {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        Ok(())
    }

    pub fn manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let kind = match self.kind {
            NoiseModelKind::Stformer => "stformer",
            NoiseModelKind::UnetStub => "unet_stub",
        };
        m.insert("model.kind".into(), kind.into());
        m.insert("model.d_model".into(), self.d_model.to_string());
        m.insert("model.layers".into(), self.layers.to_string());
        m.insert("model.heads".into(), self.heads.to_string());
        m.insert("model.t".into(), self.t.to_string());
        m.insert("model.k_max".into(), self.k_max.to_string());
        m.insert("model.feeders".into(), FEEDERS.to_string());
        m
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            m.get(k)
                .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))?
                .parse()
                .map_err(|e| Error::Format(format!("{k}: {e}")))
        };
        let kind = match m.get("model.kind").map(String::as_str) {
            Some("stformer") => NoiseModelKind::Stformer,
            Some("unet_stub") => NoiseModelKind::UnetStub,
            other => return Err(Error::Format(format!("unknown model kind {other:?}"))),
        };
        let cfg = Self {
            kind,
            d_model: get("model.d_model")?,
            layers: get("model.layers")?,
            heads: get("model.heads")?,
            t: get("model.t")?,
            k_max: get("model.k_max")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One sample's inputs, all normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInput {
    /// Diffusion step, `1..=K`.
    pub k: usize,
    /// Noisy window `[T, 12, 2]`.
    pub xk: Vec<f32>,
    /// Observation condition `[T, 12, 2]`, zero where unobserved.
    pub obs: Vec<f32>,
    pub obs_flag: Vec<bool>,
    /// Neighbor condition `[12, T, 3, 2]`, zero where unavailable.
    pub feed: Vec<f32>,
    /// Reward trajectory `[T]`, or `None` for the learned null token.
    pub reward: Option<Vec<f32>>,
}

impl NoiseInput {
    fn check(&self, t: usize, k_max: usize) -> Result<()> {
        let ok = self.k >= 1
            && self.k <= k_max
            && self.xk.len() == t * SLOT
            && self.obs.len() == t * SLOT
            && self.obs_flag.len() == t
            && self.feed.len() == LANES * t * FEEDERS * FEATURES
            && self.reward.as_ref().is_none_or(|r| r.len() == t);
        if !ok {
            return Err(Error::Contract(format!("noise input does not match T={t}, K={k_max}")));
        }
        Ok(())
    }
}

/// `[sin(p f_i).., cos(p f_i)..]` with geometric frequencies.
pub fn sinusoidal(position: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let f = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (position * f).sin();
        out[half + i] = (position * f).cos();
    }
    out
}

pub(crate) fn constant<S: Real>(tape: &mut Tape<S>, shape: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Result<Var> {
    let data: Vec<S> = data.into_iter().map(S::from_f64_lossy).collect();
    Ok(tape.constant(Tensor::new(shape, data)?))
}

pub(crate) fn mlp<S: Real>(tape: &mut Tape<S>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    Ok(mlp2(
        tape,
        x,
        p.v(&format!("{name}.0.w")),
        p.v(&format!("{name}.0.b")),
        p.v(&format!("{name}.1.w")),
        p.v(&format!("{name}.1.b")),
    )?)
}

pub(crate) fn dense<S: Real>(tape: &mut Tape<S>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    Ok(linear(tape, x, p.v(&format!("{name}.w")), p.v(&format!("{name}.b")))?)
}

/// Embedders shared by both architectures.
pub(crate) fn init_shared(init: &mut Init, store: &mut ParamStore, d: usize) {
    init.mlp(store, "embed.dt", [d, d, d]);
    init.mlp(store, "embed.tt", [d, d, d]);
    init.mlp(store, "embed.r", [1, d, d]);
    store.add("embed.null_reward", init.normal(&[d], 1.0));
}

/// Diffusion-step `[B, D]`, trajectory-step `[T, D]` and reward `[B, T, D]`
/// embeddings.
pub(crate) fn shared_embeddings<S: Real>(
    tape: &mut Tape<S>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &[NoiseInput],
) -> Result<(Var, Var, Var)> {
    let (b, t, d) = (batch.len(), cfg.t, cfg.d_model);
    let dt_in = constant(tape, vec![b, d], batch.iter().flat_map(|s| sinusoidal(s.k as f64, d)))?;
    let e_dt = mlp(tape, p, "embed.dt", dt_in)?;
    let tt_in = constant(tape, vec![t, d], (0..t).flat_map(|s| sinusoidal(s as f64, d)))?;
    let e_tt = mlp(tape, p, "embed.tt", tt_in)?;

    let r_in = constant(
        tape,
        vec![b, t, 1],
        batch
            .iter()
            .flat_map(|s| (0..t).map(move |i| s.reward.as_ref().map_or(0.0, |r| r[i] as f64))),
    )?;
    let e_r = mlp(tape, p, "embed.r", r_in)?;
    let use_r = |s: &NoiseInput| if s.reward.is_some() { 1.0 } else { 0.0 };
    let on = constant(tape, vec![b, t, d], batch.iter().flat_map(|s| std::iter::repeat_n(use_r(s), t * d)))?;
    let off = constant(tape, vec![b, t, d], batch.iter().flat_map(|s| std::iter::repeat_n(1.0 - use_r(s), t * d)))?;
    let cond = tape.mul(e_r, on)?;
    let null = tape.mul(off, p.v("embed.null_reward"))?;
    let e_r = tape.add(cond, null)?;
    Ok((e_dt, e_tt, e_r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl NoiseModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: SeededRng::new(seed).fork(0x5eed),
        };
        let mut params = ParamStore::default();
        init_shared(&mut init, &mut params, config.d_model);
        match config.kind {
            NoiseModelKind::Stformer => stformer::init(&mut init, &mut params, &config),
            NoiseModelKind::UnetStub => unet::init(&mut init, &mut params, &config),
        }
        Ok(Self { config, params })
    }

    /// Predicted noise `[B, T, 12, 2]` with parameters bound to `vars`.
    pub fn forward_with<S: Real>(&self, tape: &mut Tape<S>, vars: &[Var], batch: &[NoiseInput]) -> Result<Var> {
        forward(&self.config, &self.params, tape, vars, batch)
    }

    /// Inference-only prediction, one `[T * 24]` vector per sample.
    pub fn predict(&self, batch: &[NoiseInput]) -> Result<Vec<Vec<f32>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::<f32>::inference();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward_with(&mut tape, &vars, batch)?;
        let per = self.config.t * SLOT;
        Ok(tape.value(out).data().chunks(per).map(<[f32]>::to_vec).collect())
    }
}

/// Architecture dispatch over an explicit parameter binding.
pub fn forward<S: Real>(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape<S>,
    vars: &[Var],
    batch: &[NoiseInput],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for s in batch {
        s.check(cfg.t, cfg.k_max)?;
    }
    let p = Bound { store, vars };
    match cfg.kind {
        NoiseModelKind::Stformer => stformer::forward(tape, &p, cfg, batch),
        NoiseModelKind::UnetStub => unet::forward(tape, &p, cfg, batch),
    }
}
