//! Minimal temporal U-Net over the flattened window: one down/up level with
//! a skip connection. Only here so the architecture ablation has something
//! to compare against.

use numcore::{Real, Tape, Var};
use trafficsim::{FEEDERS, LANES};

use super::{constant, dense, mlp, shared_embeddings, Bound, Init, ModelConfig, NoiseInput, ParamStore};
use crate::datapipe::{FEATURES, SLOT};
use crate::error::Result;

/// Per-slot input: noisy window, observation condition, flags, neighbor feed.
const IN: usize = 2 * SLOT + LANES + LANES * FEEDERS * FEATURES;

pub(crate) fn init(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) {
    let d = cfg.d_model;
    init.linear(store, "unet.in", IN, d);
    init.linear(store, "unet.down", 2 * d, d);
    init.mlp(store, "unet.mid", [d, d, d]);
    init.linear(store, "unet.up", d, 2 * d);
    init.zero_linear(store, "unet.out", d, SLOT);
}

pub(crate) fn forward<S: Real>(tape: &mut Tape<S>, p: &Bound, cfg: &ModelConfig, batch: &[NoiseInput]) -> Result<Var> {
    let (b, t, d) = (batch.len(), cfg.t, cfg.d_model);
    let (e_dt, e_tt, e_r) = shared_embeddings(tape, p, cfg, batch)?;
    let mut x = Vec::with_capacity(b * t * IN);
    for s in batch {
        for i in 0..t {
            x.extend(s.xk[i * SLOT..(i + 1) * SLOT].iter().map(|&v| v as f64));
            x.extend(s.obs[i * SLOT..(i + 1) * SLOT].iter().map(|&v| v as f64));
            x.extend(std::iter::repeat_n(if s.obs_flag[i] { 1.0 } else { 0.0 }, LANES));
            for l in 0..LANES {
                let at = (l * t + i) * FEEDERS * FEATURES;
                x.extend(s.feed[at..at + FEEDERS * FEATURES].iter().map(|&v| v as f64));
            }
        }
    }
    let x = constant(tape, vec![b, t, IN], x)?;
    let h = dense(tape, p, "unet.in", x)?;
    let dt = tape.reshape(e_dt, &[b, 1, d])?;
    let dt = tape.expand(dt, &[b, t, d])?;
    let h = tape.add(h, dt)?;
    let h = tape.add(h, e_tt)?;
    let h = tape.add(h, e_r)?;
    let h0 = tape.gelu(h)?;

    let down = tape.reshape(h0, &[b, t / 2, 2 * d])?;
    let h1 = dense(tape, p, "unet.down", down)?;
    let h1 = tape.gelu(h1)?;
    let mid = mlp(tape, p, "unet.mid", h1)?;
    let h1 = tape.add(h1, mid)?;
    let up = dense(tape, p, "unet.up", h1)?;
    let up = tape.reshape(up, &[b, t, d])?;
    let h2 = tape.add(up, h0)?;
    let h2 = tape.gelu(h2)?;
    let y = dense(tape, p, "unet.out", h2)?;
    Ok(tape.reshape(y, &[b, t, LANES, FEATURES])?)
}
