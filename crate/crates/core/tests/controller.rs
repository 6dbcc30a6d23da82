mod common;

use common::{random_model, small_net};
use difflight::controller::{publish_neighbor_view, run_closed_loop, Controller, InferenceConfig, MessageBoard};
use difflight::datapipe::{KmLayout, MaskSet, MissingPattern, NeighborFeed, SLOT};
use difflight::diffusion::{ddim_step_full, forward_noise, DiffusionSchedule};
use numcore::SeededRng;
use trafficsim::{FlowSpec, Simulator, LANES};

fn warmed_controller<'m>(model: &'m difflight::trainer::TrainedModel, config: InferenceConfig, mask: &MaskSet) -> Controller<'m> {
    let net = small_net();
    let flows = FlowSpec::uniform(&net, 550.0, 600);
    let mut sim = Simulator::new(net.clone(), flows, 3).unwrap();
    let mut ctl = Controller::new(model, net.topology(), config).unwrap();
    for step in 0..model.shape.c {
        sim.run_for(&[trafficsim::Phase::A; 4], net.min_action_duration).unwrap();
        ctl.observe(&sim, mask, step);
    }
    ctl
}

#[test]
fn dcm_is_inert_in_the_first_round() {
    let net = small_net();
    let model = random_model(&net, 1);
    let mask = MaskSet::generate(&net, 40, MissingPattern::Km, 0.25, 2, KmLayout::Spread).unwrap();
    let one = |dcm| InferenceConfig { sampling_steps: 1, dcm_enabled: dcm, ..InferenceConfig::default() };
    let a = warmed_controller(&model, one(true), &mask).sample_windows(5).unwrap();
    let b = warmed_controller(&model, one(false), &mask).sample_windows(5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dcm_changes_later_rounds() {
    let net = small_net();
    let model = random_model(&net, 1);
    let mask = MaskSet::generate(&net, 40, MissingPattern::Km, 0.25, 2, KmLayout::Spread).unwrap();
    let cfg = |dcm| InferenceConfig { dcm_enabled: dcm, ..InferenceConfig::default() };
    let a = warmed_controller(&model, cfg(true), &mask).sample_windows(5).unwrap();
    let b = warmed_controller(&model, cfg(false), &mask).sample_windows(5).unwrap();
    assert_ne!(a, b);
}

#[test]
fn actions_are_deterministic_given_seed() {
    let net = small_net();
    let model = random_model(&net, 2);
    let flows = FlowSpec::uniform(&net, 550.0, 300);
    let mask = MaskSet::full(&net, 20);
    let cfg = InferenceConfig { sampling_steps: 3, seed: 9, ..InferenceConfig::default() };
    let a = run_closed_loop(&net, &flows, 4, &model, &mask, &cfg).unwrap();
    let b = run_closed_loop(&net, &flows, 4, &model, &mask, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.att.is_finite() && a.att > 0.0);
}

#[test]
fn decoupled_agents_ignore_evaluation_order() {
    let net = small_net();
    let model = random_model(&net, 3);
    let mask = MaskSet::generate(&net, 40, MissingPattern::Rm, 0.3, 1, KmLayout::Spread).unwrap();
    let cfg = InferenceConfig { dcm_enabled: false, sampling_steps: 4, ..InferenceConfig::default() };
    let mut fwd = warmed_controller(&model, cfg.clone(), &mask);
    let mut rev = warmed_controller(&model, cfg, &mask);
    rev.order.reverse();
    assert_eq!(fwd.control_step(5).unwrap(), rev.control_step(5).unwrap());
}

#[test]
fn observed_history_is_published_verbatim() {
    let net = small_net();
    let model = random_model(&net, 4);
    let mask = MaskSet::full(&net, 40);
    let mut ctl = warmed_controller(&model, InferenceConfig { sampling_steps: 5, ..InferenceConfig::default() }, &mask);
    let windows = ctl.sample_windows(5).unwrap();
    for (a, w) in ctl.agents.iter().zip(&windows) {
        let published = a.published.as_ref().unwrap();
        for (s, h) in a.history.iter().enumerate() {
            let h = h.unwrap();
            assert_eq!(&published[s * SLOT..(s + 1) * SLOT], &h[..]);
            assert_eq!(&w[s * SLOT..(s + 1) * SLOT], &h[..]);
        }
        assert_eq!(a.history.len(), model.shape.c);
    }
}

#[test]
fn oracle_noise_publishes_ground_truth() {
    let sched = DiffusionSchedule::cosine(100).unwrap();
    let mut r = SeededRng::new(5);
    let x0: Vec<f32> = (0..8 * SLOT).map(|_| r.normal_f32().clamp(-1.0, 1.0)).collect();
    let eps: Vec<f32> = (0..x0.len()).map(|_| r.normal_f32()).collect();
    for k in [100, 50, 10, 1] {
        let xk = forward_noise(&x0, k, &eps, &sched).unwrap();
        let (_, est) = ddim_step_full(&xk, &eps, k, k - 1, &sched, Some((-1.0, 1.0))).unwrap();
        for (a, b) in est.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-3, "k {k}");
        }
    }
}

#[test]
fn neighbor_view_fills_only_missing_cells() {
    let grid = small_net().topology();
    let t = 8;
    let mut board = MessageBoard::new(4);
    for a in 0..4 {
        board.publish(a, 0, vec![a as f32 + 0.5; t * SLOT]).unwrap();
    }
    board.close_round().unwrap();
    // agent 0: upstream 1 observed everywhere, upstream 2 never
    let base = NeighborFeed::assemble(&grid, 0, t, |j, _| (j == 1).then_some([-0.25; 24]));
    let fill = publish_neighbor_view(&grid, 0, &base, &board, false).unwrap();
    let all = publish_neighbor_view(&grid, 0, &base, &board, true).unwrap();
    assert_eq!(fill.values.len(), base.values.len());
    let src = NeighborFeed::sources(&grid, 0);
    for l in 0..LANES {
        for s in 0..t {
            let cell = (l * t + s) * 3;
            match src[l] {
                Some(1) => {
                    assert_eq!(fill.values[2 * cell], -0.25);
                    assert_eq!(all.values[2 * cell], 1.5);
                }
                Some(2) => {
                    assert_eq!(fill.values[2 * cell], 2.5);
                    assert_eq!(all.values[2 * cell], 2.5);
                }
                _ => assert!((0..3).all(|k| !fill.cell_available(l, s, k))),
            }
        }
    }
}

#[test]
fn reading_an_unclosed_round_is_a_protocol_error() {
    let mut board = MessageBoard::new(2);
    board.publish(0, 0, vec![0.0]).unwrap();
    assert!(board.read(0).is_err());
    assert!(board.close_round().is_err());
    assert!(matches!(board.publish(1, 3, vec![0.0]), Err(difflight::Error::Protocol(_))));
}

#[test]
fn short_mask_is_rejected() {
    let net = small_net();
    let model = random_model(&net, 2);
    let flows = FlowSpec::uniform(&net, 550.0, 3600);
    let mask = MaskSet::full(&net, 10);
    assert!(run_closed_loop(&net, &flows, 1, &model, &mask, &InferenceConfig::default()).is_err());
}
