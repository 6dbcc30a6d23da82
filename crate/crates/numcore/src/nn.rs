//! Composite building blocks assembled from tape primitives.

use crate::error::{NumError, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

/// `x [.., in] * w [in, out] + b [out]`
pub fn linear<S: Real>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Projection weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `softmax(q k^T / sqrt(d)) v` over `[batch, tokens, d]` inputs.
pub fn scaled_dot_product_attention<S: Real>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if d == 0 {
        return Err(NumError::Contract("attention with zero-width queries".into()));
    }
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, S::one() / S::from_usize(d).unwrap().sqrt())?;
    let weights = tape.softmax(scores)?;
    tape.bmm(weights, v, false)
}

fn split_heads<S: Real>(tape: &mut Tape<S>, x: Var, heads: usize) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    let (n, t, d) = (sh[0], sh[1], sh[2]);
    let x = tape.reshape(x, &[n, t, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n * heads, t, d / heads])
}

fn merge_heads<S: Real>(tape: &mut Tape<S>, x: Var, n: usize, heads: usize) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    let (t, dh) = (sh[1], sh[2]);
    let x = tape.reshape(x, &[n, heads, t, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n, t, heads * dh])
}

/// Multi-head attention: queries `[n, tq, d]`, keys/values `[n, tk, d]`.
pub fn multi_head_attention<S: Real>(
    tape: &mut Tape<S>,
    query: Var,
    key_value: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let qs = tape.shape(query).to_vec();
    let ks = tape.shape(key_value).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || heads == 0 || !qs[2].is_multiple_of(heads) {
        return Err(NumError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let n = qs[0];
    let q = linear(tape, query, w.wq, w.bq)?;
    let k = linear(tape, key_value, w.wk, w.bk)?;
    let v = linear(tape, key_value, w.wv, w.bv)?;
    let (q, k, v) = if heads == 1 {
        (q, k, v)
    } else {
        (
            split_heads(tape, q, heads)?,
            split_heads(tape, k, heads)?,
            split_heads(tape, v, heads)?,
        )
    };
    let att = scaled_dot_product_attention(tape, q, k, v)?;
    let att = if heads == 1 { att } else { merge_heads(tape, att, n, heads)? };
    linear(tape, att, w.wo, w.bo)
}

/// Two-layer perceptron with a GELU in between.
pub fn mlp2<S: Real>(tape: &mut Tape<S>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, w2, b2)
}

/// Mean cross-entropy of `logits [n, c]` against class indices.
pub fn cross_entropy<S: Real>(tape: &mut Tape<S>, logits: Var, targets: &[usize]) -> Result<Var> {
    let sh = tape.shape(logits).to_vec();
    if sh.len() != 2 || sh[0] != targets.len() || targets.iter().any(|&c| c >= sh[1]) {
        return Err(NumError::ShapeMismatch {
            op: "cross_entropy",
            lhs: sh,
            rhs: vec![targets.len()],
        });
    }
    let c = sh[1];
    let logp = tape.log_softmax(logits)?;
    let mut onehot = vec![S::zero(); targets.len() * c];
    let w = -S::one() / S::from_usize(targets.len()).unwrap();
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * c + t] = w;
    }
    let sel = tape.constant(crate::Tensor::new(sh, onehot)?);
    let picked = tape.mul(logp, sel)?;
    tape.sum(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn uniform_logits_give_ln4() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros([3, 4]));
        let loss = cross_entropy(&mut tape, l, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn([1, 3, 2], |i| i as f64));
        let k = tape.constant(Tensor::from_fn([1, 1, 2], |i| i as f64 - 0.5));
        let v = tape.constant(Tensor::new([1, 1, 2], vec![7.0, -2.0]).unwrap());
        let out = scaled_dot_product_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, -2.0, 7.0, -2.0, 7.0, -2.0]);
    }
}
