//! Offline data: behavior-policy episodes, missing-data masks, windows and
//! normalization.

pub mod dataset;
pub mod mask;
pub mod normalize;
pub mod policy;
pub mod window;

pub use dataset::{default_mixture, topology_hash, DatasetManifest, Episode, OfflineDataset};
pub use mask::{KmLayout, MaskSet, MissingPattern};
pub use normalize::Normalizer;
pub use policy::{greedy_phase, run_behavior_policy, run_episode, BehaviorPolicy};
pub use window::{
    self_supervised_split, valid_anchors, window, NeighborFeed, RewardTrajectory, SplitSample, TrajectoryWindow,
    WindowSample, WindowShape, FEATURES, SLOT,
};
