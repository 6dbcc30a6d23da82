use difflight::datapipe::{BehaviorPolicy, KmLayout, MaskSet, MissingPattern, OfflineDataset};
use difflight::sfm::{impute_episode, impute_intersection, impute_observation, masked_mae, SfmConfig};
use proptest::prelude::*;
use trafficsim::{FlowSpec, Grid, NetworkSpec, OBS_DIM};

#[test]
fn constant_neighbors_impute_that_constant() {
    let g = Grid::new(3, 3);
    let out = impute_intersection(&g, 4, |_| Some([7.0; OBS_DIM]), SfmConfig::default());
    assert_eq!(out, [7.0; OBS_DIM]);
}

#[test]
fn one_to_twelve_average_to_six_and_a_half() {
    let v: Vec<f32> = (1..=12).map(|x| x as f32).collect();
    assert_eq!(impute_observation(&v, SfmConfig::default()), 6.5);
}

#[test]
fn divisor_must_be_positive() {
    assert!(SfmConfig::new(0).is_err());
}

#[test]
fn beats_zero_fill_on_sinusoidal_rm30() {
    let net = NetworkSpec::grid(3, 3);
    let flows = FlowSpec::sinusoidal(&net, 500.0, 0.5, 3600, 300);
    let ds = OfflineDataset::generate(&net, &flows, &[BehaviorPolicy::FixedTime], 1, 21).unwrap();
    let ep = &ds.episodes[0];
    let mask = MaskSet::generate(&net, ep.steps, MissingPattern::Rm, 0.3, 5, KmLayout::Spread).unwrap();
    let grid = net.topology();
    let sfm = impute_episode(ep, &mask, &grid, SfmConfig::default());
    let zeros = vec![vec![[0.0; OBS_DIM]; ep.intersections]; ep.steps];
    let (a, b) = (masked_mae(ep, &mask, &sfm).unwrap(), masked_mae(ep, &mask, &zeros).unwrap());
    assert!(a < b, "sfm {a} zero-fill {b}");
}

proptest! {
    #[test]
    fn imputed_value_is_bounded_by_neighbors(vals in proptest::collection::vec(0.0f32..30.0, 1..=12)) {
        let m = impute_observation(&vals, SfmConfig::default());
        let max = vals.iter().cloned().fold(0.0, f32::max);
        prop_assert!(m >= 0.0 && m <= max + 1e-4);
    }

    #[test]
    fn observed_cells_pass_through(seed in 0u64..50) {
        let net = NetworkSpec::grid(2, 2);
        let flows = FlowSpec::uniform(&net, 400.0, 450);
        let ds = OfflineDataset::generate(&net, &flows, &[BehaviorPolicy::Random], 1, seed).unwrap();
        let ep = &ds.episodes[0];
        let mask = MaskSet::generate(&net, ep.steps, MissingPattern::Rm, 0.5, seed, KmLayout::Spread).unwrap();
        let out = impute_episode(ep, &mask, &net.topology(), SfmConfig::default());
        for s in 0..ep.steps {
            for i in 0..ep.intersections {
                if mask.observed(i, s) {
                    prop_assert_eq!(&out[s][i], ep.obs(i, s));
                }
            }
        }
    }
}
