//! Inverse dynamics: which phase turned observation `o` into `o'`.

use numcore::nn::cross_entropy;
use numcore::{AdamConfig, AdamState, Real, SeededRng, Tape, Tensor, Var};
use trafficsim::{Phase, OBS_DIM};

use crate::datapipe::{MaskSet, OfflineDataset};
use crate::error::{Error, Result};
use crate::model::{constant, dense, Bound, Init, ParamStore};

pub const INPUT: usize = 2 * OBS_DIM;
pub const ACTIONS: usize = 4;

/// One logged control step with normalized observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub o: [f32; OBS_DIM],
    pub o_next: [f32; OBS_DIM],
    pub action: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseDynamics {
    pub hidden: usize,
    pub params: ParamStore,
}

impl InverseDynamics {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut init = Init {
            rng: SeededRng::new(seed).fork(0x1d),
        };
        let mut params = ParamStore::default();
        init.linear(&mut params, "l0", INPUT, hidden);
        init.linear(&mut params, "l1", hidden, hidden);
        init.linear(&mut params, "l2", hidden, ACTIONS);
        Self { hidden, params }
    }

    /// Logits `[n, 4]` for `inputs [n, 48]`.
    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, vars: &[Var], inputs: Var) -> Result<Var> {
        let p = Bound {
            store: &self.params,
            vars,
        };
        let h = dense(tape, &p, "l0", inputs)?;
        let h = tape.gelu(h)?;
        let h = dense(tape, &p, "l1", h)?;
        let h = tape.gelu(h)?;
        dense(tape, &p, "l2", h)
    }

    /// Mean cross-entropy over `batch`; every sample must be clean.
    pub fn loss<S: Real>(&self, tape: &mut Tape<S>, vars: &[Var], batch: &[Transition]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Skip("no clean transition in the batch".into()));
        }
        let x = constant(tape, vec![batch.len(), INPUT], batch.iter().flat_map(pair_features))?;
        let logits = self.forward(tape, vars, x)?;
        let targets: Vec<usize> = batch.iter().map(|t| t.action.index()).collect();
        Ok(cross_entropy(tape, logits, &targets)?)
    }

    pub fn logits(&self, o: &[f32; OBS_DIM], o_next: &[f32; OBS_DIM]) -> Result<[f32; ACTIONS]> {
        let mut tape = Tape::<f32>::inference();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let x: Vec<f32> = o.iter().chain(o_next).copied().collect();
        let x = tape.constant(Tensor::new(vec![1, INPUT], x)?);
        let out = self.forward(&mut tape, &vars, x)?;
        let d = tape.value(out).data();
        Ok([d[0], d[1], d[2], d[3]])
    }

    pub fn infer_action(&self, o: &[f32; OBS_DIM], o_next: &[f32; OBS_DIM]) -> Result<Phase> {
        argmax_phase(&self.logits(o, o_next)?)
    }

    pub fn accuracy(&self, set: &[Transition]) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Contract("accuracy of an empty set".into()));
        }
        let mut hits = 0;
        for t in set {
            if self.infer_action(&t.o, &t.o_next)? == t.action {
                hits += 1;
            }
        }
        Ok(hits as f64 / set.len() as f64)
    }
}

fn pair_features(t: &Transition) -> impl Iterator<Item = f64> + '_ {
    t.o.iter().chain(&t.o_next).map(|&v| v as f64)
}

/// Argmax; ties resolve to the lowest phase index.
pub fn argmax_phase(logits: &[f32; ACTIONS]) -> Result<Phase> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Num(numcore::NumError::NonFinite { op: "infer_action" }));
    }
    let mut best = 0;
    for i in 1..ACTIONS {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Ok(Phase::ALL[best])
}

/// Decoder used when inverse dynamics is switched off: the phase whose
/// movements lose the most queued vehicles between the two observations.
pub fn rule_decode(o: &[f32; OBS_DIM], o_next: &[f32; OBS_DIM]) -> Phase {
    let mut best = Phase::A;
    let mut best_drop = f32::NEG_INFINITY;
    for p in Phase::ALL {
        let drop: f32 = p.movements().iter().map(|&m| o[2 * m + 1] - o_next[2 * m + 1]).sum();
        if drop > best_drop {
            best = p;
            best_drop = drop;
        }
    }
    best
}

/// Transitions whose two observations were both recorded.
pub fn clean_transitions(dataset: &OfflineDataset, mask: &MaskSet, episodes: impl IntoIterator<Item = usize>) -> Vec<Transition> {
    let norm = dataset.normalizer;
    let mut out = Vec::new();
    for e in episodes {
        let ep = &dataset.episodes[e];
        for i in 0..ep.intersections {
            for s in 0..ep.steps.saturating_sub(1) {
                if mask.observed(i, s) && mask.observed(i, s + 1) {
                    out.push(Transition {
                        o: norm.obs_vec(ep.obs(i, s)),
                        o_next: norm.obs_vec(ep.obs(i, s + 1)),
                        action: ep.action(i, s),
                    });
                }
            }
        }
    }
    out
}

/// Trains `model` alone on `set` with minibatch Adam; returns per-step loss.
pub fn fit(model: &mut InverseDynamics, set: &[Transition], steps: usize, batch: usize, lr: f32, seed: u64) -> Result<Vec<f32>> {
    if set.is_empty() {
        return Err(Error::Skip("no clean transition to fit".into()));
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        model.params.tensors(),
    );
    let mut rng = SeededRng::new(seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let picked: Vec<Transition> = (0..batch.clamp(1, set.len()))
            .map(|_| set[rng.below(set.len())].clone())
            .collect();
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = model.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        let loss = model.loss(&mut tape, &vars, &picked)?;
        losses.push(tape.value(loss).item());
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(model.params.tensors())
            .map(|(v, p)| Tensor::new(p.shape().to_vec(), g.take(*v).unwrap_or_else(|| vec![0.0; p.len()])))
            .collect::<std::result::Result<_, _>>()?;
        adam.step(model.params.tensors_mut(), &grads)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_pick_phase_a() {
        assert_eq!(argmax_phase(&[0.0; 4]).unwrap(), Phase::A);
        assert_eq!(argmax_phase(&[0.0, 2.0, 2.0, 1.0]).unwrap(), Phase::B);
        assert!(argmax_phase(&[f32::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_ignores_positive_rescaling() {
        let l = [0.3, -1.0, 0.7, 0.1];
        let scaled = l.map(|v| v * 3.5);
        assert_eq!(argmax_phase(&l).unwrap(), argmax_phase(&scaled).unwrap());
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let mut m = InverseDynamics::new(8, 0);
        // zero the last layer so every logit is 0
        for name in ["l2.w", "l2.b"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let t = Transition {
            o: [0.1; OBS_DIM],
            o_next: [0.2; OBS_DIM],
            action: Phase::C,
        };
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = m.params.tensors().iter().map(|p| tape.param(p.cast())).collect();
        let loss = m.loss(&mut tape, &vars, &[t.clone(), t]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rule_decoder_reads_queue_drop() {
        let mut o = [0.0; OBS_DIM];
        let mut n = [0.0; OBS_DIM];
        o[2 * 4 + 1] = 0.5;
        n[2 * 4 + 1] = 0.1;
        assert_eq!(rule_decode(&o, &n), Phase::B);
        assert_eq!(rule_decode(&o, &o), Phase::A);
    }
}
