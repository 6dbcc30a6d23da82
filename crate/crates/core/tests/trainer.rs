mod common;

use common::{rm_mask, small_dataset, tiny_config};
use difflight::datapipe::{KmLayout, MaskSet, MissingPattern};
use difflight::trainer::{train, ConditionDropout, LossMaskPolicy, RewardHandling, TrainConfig, TrainedModel, Trainer};
use numcore::SeededRng;
use proptest::prelude::*;

#[test]
fn same_seed_reproduces_the_loss_curve() {
    let ds = small_dataset();
    let mask = rm_mask(&ds, 0.3, 1);
    let (a, ma) = train(&ds, &mask, tiny_config(), None, None).unwrap();
    let (b, mb) = train(&ds, &mask, tiny_config(), None, None).unwrap();
    assert!(a.same_numbers(&b));
    assert_eq!(ma.noise.params, mb.noise.params);
    assert_eq!(a.diffusion_loss.len(), 4);
    assert!(a.diffusion_loss.iter().chain(&a.invdyn_loss).all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_gives_identical_loss() {
    let ds = small_dataset();
    let mask = rm_mask(&ds, 0.3, 1);
    let cfg = TrainConfig { checkpoint_every: 2, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let (report, model) = train(&ds, &mask, cfg.clone(), None, Some(dir.path())).unwrap();
    assert!(dir.path().join("step_0000002").is_dir());
    assert!(dir.path().join("step_0000004").is_dir());
    let back = TrainedModel::load(report.checkpoint.as_ref().unwrap()).unwrap();
    let probe = Trainer::new(&ds, &mask, cfg.clone(), None).unwrap();
    let eval = probe.draw_fixed(16, 77).unwrap();
    assert_eq!(
        Trainer::evaluate(&model, &eval, &cfg).unwrap().to_bits(),
        Trainer::evaluate(&back, &eval, &cfg).unwrap().to_bits()
    );
    assert_eq!(back.topology_hash, model.topology_hash);
}

#[test]
fn checkpoint_for_other_grid_is_detected() {
    let ds = small_dataset();
    let mask = rm_mask(&ds, 0.3, 1);
    let (_, model) = train(&ds, &mask, tiny_config(), None, None).unwrap();
    let other = trafficsim::NetworkSpec::grid(3, 3);
    assert_ne!(model.topology_hash, difflight::datapipe::topology_hash(&other));
}

#[test]
fn ablation_switches_train() {
    let ds = small_dataset();
    let mask = MaskSet::generate(&ds.network, ds.steps(), MissingPattern::Km, 0.25, 2, KmLayout::Spread).unwrap();
    for (policy, handling) in [(LossMaskPolicy::AllCells, RewardHandling::ZeroPad), (LossMaskPolicy::KnownCellsOnly, RewardHandling::Prcd)] {
        let cfg = TrainConfig { loss_mask_policy: policy, reward_handling: handling, ..tiny_config() };
        let (r, _) = train(&ds, &mask, cfg, None, None).unwrap();
        assert!(r.diffusion_loss.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn invalid_config_is_rejected() {
    let ds = small_dataset();
    let mask = rm_mask(&ds, 0.3, 1);
    for cfg in [
        TrainConfig { batch_size: 0, ..tiny_config() },
        TrainConfig { p_uncond: 1.5, ..tiny_config() },
        TrainConfig { lr: -1.0, ..tiny_config() },
    ] {
        assert!(Trainer::new(&ds, &mask, cfg, None).is_err());
    }
}

#[test]
fn dropout_rate_concentrates() {
    let mut d = ConditionDropout::new(0.25, SeededRng::new(12));
    for _ in 0..10_000 {
        d.draw();
    }
    assert!((0.23..=0.27).contains(&d.rate()), "{}", d.rate());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dropout_never_fires_at_zero_and_always_at_one(seed in 0u64..1000) {
        let mut off = ConditionDropout::new(0.0, SeededRng::new(seed));
        let mut on = ConditionDropout::new(1.0, SeededRng::new(seed));
        for _ in 0..100 {
            prop_assert!(!off.draw());
            prop_assert!(on.draw());
        }
    }
}
