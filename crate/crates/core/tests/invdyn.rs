use difflight::invdyn::{argmax_phase, fit, rule_decode, InverseDynamics, Transition};
use numcore::SeededRng;
use trafficsim::{Phase, OBS_DIM};

/// Four outcomes: the served phase's two movements lose half their queue.
fn toy_set(n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let action = Phase::ALL[i % 4];
            let mut o = [0.0f32; OBS_DIM];
            for v in o.iter_mut() {
                *v = rng.uniform() as f32 * 0.5 + 0.25;
            }
            let mut o_next = o;
            for m in action.movements() {
                o_next[2 * m + 1] -= 0.5;
                o_next[2 * m] -= 0.3;
            }
            Transition { o, o_next, action }
        })
        .collect()
}

#[test]
fn learns_the_four_outcome_set_exactly() {
    let train = toy_set(256, 1);
    let held = toy_set(64, 2);
    let mut m = InverseDynamics::new(32, 3);
    let losses = fit(&mut m, &train, 300, 32, 1e-3, 4).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    assert_eq!(m.accuracy(&train).unwrap(), 1.0);
    assert_eq!(m.accuracy(&held).unwrap(), 1.0);
}

#[test]
fn rule_decoder_solves_the_toy_set() {
    for t in toy_set(40, 5) {
        assert_eq!(rule_decode(&t.o, &t.o_next), t.action);
    }
}

#[test]
fn argmax_breaks_ties_toward_lower_phase() {
    assert_eq!(argmax_phase(&[0.0, 1.0, 1.0, 0.5]).unwrap(), Phase::B);
    assert!(argmax_phase(&[0.0, f32::NAN, 1.0, 0.5]).is_err());
}

#[test]
fn empty_batch_is_skipped() {
    let mut m = InverseDynamics::new(8, 1);
    assert!(fit(&mut m, &[], 10, 4, 1e-3, 1).is_err());
}
