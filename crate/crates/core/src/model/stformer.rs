//! Spatial-temporal transformer noise model.
//!
//! Internal layout is lane-major, `[B, 12, T, D]`: cross-attention and the
//! temporal branch attend along `T` inside each lane, the spatial branch
//! transposes to attend across the 12 lanes of each timestep.

use numcore::nn::{multi_head_attention, AttentionVars};
use numcore::{Real, Tape, Var};
use trafficsim::{FEEDERS, LANES};

use super::{constant, dense, mlp, shared_embeddings, Bound, Init, ModelConfig, NoiseInput, ParamStore};
use crate::datapipe::{FEATURES, SLOT};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;
/// Local embedder input: noisy value (2), observed value (2), observed flag.
const CTR_IN: usize = 2 * FEATURES + 1;

pub(crate) fn init(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) {
    let d = cfg.d_model;
    init.mlp(store, "embed.ctr", [CTR_IN, d, d]);
    init.mlp(store, "embed.ntr", [FEATURES, d, d]);
    for l in 0..cfg.layers {
        for a in ["cca", "ssa", "tsa"] {
            init.attention(store, &format!("ste{l}.{a}"), d);
        }
        init.linear(store, &format!("ste{l}.mlp.0"), d, d);
        init.linear(store, &format!("ste{l}.mlp.1"), d, d);
    }
    init.linear(store, "head.0", d, d);
    // zero output: the untrained model predicts no noise
    init.zero_linear(store, "head.1", d, FEATURES);
}

fn attention_vars(p: &Bound, name: &str) -> AttentionVars {
    let v = |s: &str| p.v(&format!("{name}.{s}"));
    AttentionVars {
        wq: v("q.w"),
        bq: v("q.b"),
        wk: v("k.w"),
        bk: v("k.b"),
        wv: v("v.w"),
        bv: v("v.b"),
        wo: v("o.w"),
        bo: v("o.b"),
    }
}

/// Local-trajectory and neighbor-trajectory embeddings,
/// `[B, 12, T, D]` and `[B, 12, T * 3, D]`.
pub fn embed_trajectories<S: Real>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, batch: &[NoiseInput]) -> Result<(Var, Var)> {
    let (b, t) = (batch.len(), cfg.t);
    let mut ctr = Vec::with_capacity(b * LANES * t * CTR_IN);
    for s in batch {
        for l in 0..LANES {
            for i in 0..t {
                let at = i * SLOT + l * FEATURES;
                ctr.extend(s.xk[at..at + FEATURES].iter().map(|&v| v as f64));
                ctr.extend(s.obs[at..at + FEATURES].iter().map(|&v| v as f64));
                ctr.push(if s.obs_flag[i] { 1.0 } else { 0.0 });
            }
        }
    }
    let ctr = constant(tape, vec![b, LANES, t, CTR_IN], ctr)?;
    let e_ctr = mlp(tape, p, "embed.ctr", ctr)?;
    let ntr = constant(
        tape,
        vec![b, LANES, t * FEEDERS, FEATURES],
        batch.iter().flat_map(|s| s.feed.iter().map(|&v| v as f64)),
    )?;
    let e_ntr = mlp(tape, p, "embed.ntr", ntr)?;
    Ok((e_ctr, e_ntr))
}

/// Conditioning added to attention inputs, precomputed once per forward.
pub struct LayerContext {
    /// `e_dt + e_tt` over `[B, 12, T, D]`.
    pub q_cond: Var,
    /// `e_dt + e_tt` over the neighbor tokens `[B, 12, 3T, D]`.
    pub kv_cond: Var,
    /// `e_dt + e_tt + e_r` over `[B, 12, T, D]`.
    pub z_cond: Var,
}

pub fn layer_context<S: Real>(tape: &mut Tape<S>, cfg: &ModelConfig, b: usize, e_dt: Var, e_tt: Var, e_r: Var) -> Result<LayerContext> {
    let (t, d) = (cfg.t, cfg.d_model);
    let dt = tape.reshape(e_dt, &[b, 1, 1, d])?;
    let dt_q = tape.expand(dt, &[b, LANES, t, d])?;
    let q_cond = tape.add(dt_q, e_tt)?;
    let dt_kv = tape.expand(dt, &[b, LANES, t * FEEDERS, d])?;
    let tt = tape.reshape(e_tt, &[t, 1, d])?;
    let tt = tape.expand(tt, &[t, FEEDERS, d])?;
    let tt = tape.reshape(tt, &[t * FEEDERS, d])?;
    let kv_cond = tape.add(dt_kv, tt)?;
    let r = tape.reshape(e_r, &[b, 1, t, d])?;
    let r = tape.expand(r, &[b, LANES, t, d])?;
    let z_cond = tape.add(q_cond, r)?;
    Ok(LayerContext { q_cond, kv_cond, z_cond })
}

/// Per-lane cross-attention from the local series to its neighbor feed,
/// with residual. `kv` is the already-conditioned neighbor input.
pub fn cca<S: Real>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, layer: usize, h: Var, kv: Var, ctx: &LayerContext) -> Result<Var> {
    let sh = tape.shape(h).to_vec();
    let (b, t, d) = (sh[0], cfg.t, cfg.d_model);
    let q = tape.layer_norm(h, S::from_f64_lossy(LN_EPS))?;
    let q = tape.add(q, ctx.q_cond)?;
    let q = tape.reshape(q, &[b * LANES, t, d])?;
    let kv = tape.reshape(kv, &[b * LANES, t * FEEDERS, d])?;
    let att = multi_head_attention(tape, q, kv, &attention_vars(p, &format!("ste{layer}.cca")), cfg.heads)?;
    let att = tape.reshape(att, &[b, LANES, t, d])?;
    Ok(tape.add(att, h)?)
}

/// Spatial (across lanes) and temporal (across slots) self-attention.
pub fn ssa_tsa<S: Real>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, layer: usize, z: Var) -> Result<(Var, Var)> {
    let sh = tape.shape(z).to_vec();
    let (b, t, d) = (sh[0], cfg.t, cfg.d_model);
    let zt = tape.reshape(z, &[b * LANES, t, d])?;
    let tsa = multi_head_attention(tape, zt, zt, &attention_vars(p, &format!("ste{layer}.tsa")), cfg.heads)?;
    let tsa = tape.reshape(tsa, &[b, LANES, t, d])?;
    let zs = tape.permute(z, &[0, 2, 1, 3])?;
    let zs = tape.reshape(zs, &[b * t, LANES, d])?;
    let ssa = multi_head_attention(tape, zs, zs, &attention_vars(p, &format!("ste{layer}.ssa")), cfg.heads)?;
    let ssa = tape.reshape(ssa, &[b, t, LANES, d])?;
    let ssa = tape.permute(ssa, &[0, 2, 1, 3])?;
    Ok((ssa, tsa))
}

/// One encoder layer: `MLP(SSA(e') + TSA(e')) + e_ctr` where
/// `e' = CCA(e_ctr, e_ntr)`.
pub fn ste_layer<S: Real>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, layer: usize, e_ctr: Var, kv: Var, ctx: &LayerContext) -> Result<Var> {
    let h1 = cca(tape, p, cfg, layer, e_ctr, kv, ctx)?;
    let z = tape.layer_norm(h1, S::from_f64_lossy(LN_EPS))?;
    let z = tape.add(z, ctx.z_cond)?;
    let (ssa, tsa) = ssa_tsa(tape, p, cfg, layer, z)?;
    let s = tape.add(ssa, tsa)?;
    let m = dense(tape, p, &format!("ste{layer}.mlp.0"), s)?;
    let m = tape.gelu(m)?;
    let m = dense(tape, p, &format!("ste{layer}.mlp.1"), m)?;
    Ok(tape.add(m, e_ctr)?)
}

pub(crate) fn forward<S: Real>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, batch: &[NoiseInput]) -> Result<Var> {
    let b = batch.len();
    let (e_dt, e_tt, e_r) = shared_embeddings(tape, p, cfg, batch)?;
    let (mut h, e_ntr) = embed_trajectories(tape, p, cfg, batch)?;
    let ctx = layer_context(tape, cfg, b, e_dt, e_tt, e_r)?;
    let kv = tape.layer_norm(e_ntr, S::from_f64_lossy(LN_EPS))?;
    let kv = tape.add(kv, ctx.kv_cond)?;
    for layer in 0..cfg.layers {
        h = ste_layer(tape, p, cfg, layer, h, kv, &ctx)?;
    }
    let y = tape.layer_norm(h, S::from_f64_lossy(LN_EPS))?;
    let y = dense(tape, p, "head.0", y)?;
    let y = tape.gelu(y)?;
    let y = dense(tape, p, "head.1", y)?;
    // [B, 12, T, 2] -> [B, T, 12, 2]
    Ok(tape.permute(y, &[0, 2, 1, 3])?)
}
