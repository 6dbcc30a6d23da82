//! Fixed-length training/inference windows around a control step.

use numcore::SeededRng;
use trafficsim::{Grid, FEEDERS, LANES, OBS_DIM};

use super::dataset::OfflineDataset;
use super::mask::{MaskSet, MissingPattern};
use crate::error::{Error, Result};

pub const FEATURES: usize = 2;
/// Values per window slot: 12 lanes x (L_num, L_queue).
pub const SLOT: usize = LANES * FEATURES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowShape {
    /// Historical slots, the last of which is the current step.
    pub c: usize,
    /// Future slots.
    pub h: usize,
}

impl Default for WindowShape {
    fn default() -> Self {
        Self { c: 5, h: 3 }
    }
}

impl WindowShape {
    pub fn t(&self) -> usize {
        self.c + self.h
    }

    /// Control step covered by `slot` when the current step is `anchor`.
    /// `None` before the start of the episode.
    pub fn step_of(&self, anchor: usize, slot: usize) -> Option<usize> {
        (anchor + 1 + slot).checked_sub(self.c)
    }
}

/// Local observations `[T, 12, 2]`, normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    pub values: Vec<f32>,
    /// History slots usable as condition; future slots are always false.
    pub observed_mask: Vec<bool>,
    /// Slots whose ground truth is known (loss may be taken there).
    pub known_mask: Vec<bool>,
    pub t_anchor: usize,
}

impl TrajectoryWindow {
    pub fn t(&self) -> usize {
        self.observed_mask.len()
    }

    pub fn slot(&self, s: usize) -> &[f32] {
        &self.values[s * SLOT..(s + 1) * SLOT]
    }

    /// Values with unobserved slots zeroed: the observation condition.
    pub fn condition_values(&self) -> Vec<f32> {
        let mut v = self.values.clone();
        for (s, &o) in self.observed_mask.iter().enumerate() {
            if !o {
                v[s * SLOT..(s + 1) * SLOT].fill(0.0);
            }
        }
        v
    }
}

/// Normalized rewards `[T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTrajectory {
    pub values: Vec<f32>,
    pub available_mask: Vec<bool>,
}

/// For every local entrance lane: the three upstream lanes that discharge
/// into it, over all window slots. Layout `[12, T, 3, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborFeed {
    pub t: usize,
    pub values: Vec<f32>,
    /// `[12, T, 3]`
    pub available: Vec<bool>,
}

impl NeighborFeed {
    pub fn empty(t: usize) -> Self {
        Self {
            t,
            values: vec![0.0; LANES * t * FEEDERS * 2],
            available: vec![false; LANES * t * FEEDERS],
        }
    }

    /// Upstream intersection feeding each local lane, if any.
    pub fn sources(grid: &Grid, id: usize) -> [Option<usize>; LANES] {
        std::array::from_fn(|l| grid.lane_feeders(id, l).map(|f| f.intersection))
    }

    /// Builds the feed from per-(upstream intersection, slot) observation
    /// vectors; `None` leaves the cells zero and unavailable.
    pub fn assemble(grid: &Grid, id: usize, t: usize, mut view: impl FnMut(usize, usize) -> Option<[f32; OBS_DIM]>) -> Self {
        let mut feed = Self::empty(t);
        for l in 0..LANES {
            let Some(f) = grid.lane_feeders(id, l) else { continue };
            for s in 0..t {
                if let Some(obs) = view(f.intersection, s) {
                    feed.set_cells(l, s, &f.lanes, &obs, true);
                }
            }
        }
        feed
    }

    /// Overwrites slot `s` of lane `l` from an upstream observation vector.
    pub fn set_cells(&mut self, l: usize, s: usize, lanes: &[usize; FEEDERS], obs: &[f32], available: bool) {
        for (k, &ul) in lanes.iter().enumerate() {
            let cell = (l * self.t + s) * FEEDERS + k;
            self.available[cell] = available;
            self.values[2 * cell] = obs[2 * ul];
            self.values[2 * cell + 1] = obs[2 * ul + 1];
        }
    }

    pub fn clear_cells(&mut self, l: usize, s: usize) {
        for k in 0..FEEDERS {
            let cell = (l * self.t + s) * FEEDERS + k;
            self.available[cell] = false;
            self.values[2 * cell] = 0.0;
            self.values[2 * cell + 1] = 0.0;
        }
    }

    pub fn cell_available(&self, l: usize, s: usize, k: usize) -> bool {
        self.available[(l * self.t + s) * FEEDERS + k]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub window: TrajectoryWindow,
    pub reward: RewardTrajectory,
    pub feed: NeighborFeed,
    pub intersection: usize,
}

/// Anchors with a full history and future inside an episode of `steps`.
pub fn valid_anchors(shape: WindowShape, steps: usize) -> std::ops::Range<usize> {
    let lo = shape.c - 1;
    let hi = steps.saturating_sub(shape.h);
    lo..hi.max(lo)
}

/// Cuts the window of `intersection` whose current step is `anchor`.
pub fn window(
    dataset: &OfflineDataset,
    mask: &MaskSet,
    episode: usize,
    intersection: usize,
    anchor: usize,
    shape: WindowShape,
) -> Result<WindowSample> {
    let ep = dataset
        .episodes
        .get(episode)
        .ok_or_else(|| Error::Contract(format!("episode {episode} out of range")))?;
    if !valid_anchors(shape, ep.steps).contains(&anchor) {
        return Err(Error::Contract(format!(
            "anchor {anchor} outside valid range {:?}",
            valid_anchors(shape, ep.steps)
        )));
    }
    if mask.steps < ep.steps || mask.intersections != dataset.intersections() {
        return Err(Error::Contract("mask does not cover the dataset".into()));
    }
    let norm = dataset.normalizer;
    let t = shape.t();
    let mut values = vec![0.0; t * SLOT];
    let mut known = vec![false; t];
    let mut rewards = vec![0.0; t];
    for s in 0..t {
        let step = shape.step_of(anchor, s).expect("anchor >= c - 1");
        if mask.observed(intersection, step) {
            known[s] = true;
            values[s * SLOT..(s + 1) * SLOT].copy_from_slice(&norm.obs_vec(ep.obs(intersection, step)));
            rewards[s] = norm.reward(ep.reward(intersection, step));
        }
    }
    let observed: Vec<bool> = (0..t).map(|s| s < shape.c && known[s]).collect();
    let grid = dataset.network.topology();
    let feed = NeighborFeed::assemble(&grid, intersection, t, |j, s| {
        let step = shape.step_of(anchor, s)?;
        mask.observed(j, step).then(|| norm.obs_vec(ep.obs(j, step)))
    });
    Ok(WindowSample {
        window: TrajectoryWindow {
            values,
            observed_mask: observed,
            known_mask: known.clone(),
            t_anchor: anchor,
        },
        reward: RewardTrajectory {
            values: rewards,
            available_mask: known,
        },
        feed,
        intersection,
    })
}

/// A window with part of its observed data hidden for self-supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSample {
    pub sample: WindowSample,
    /// Local slots hidden artificially (ground truth still known).
    pub target_mask: Vec<bool>,
    /// Upstream intersection whose feed was hidden, if any.
    pub hidden_neighbor: Option<usize>,
}

pub const RM_SPLIT_RATIO: f64 = 0.5;

/// Hides part of the observed data: under RM each observed history slot
/// with probability one half; under KM everything from one observed
/// intersection (the local one or an upstream neighbor).
pub fn self_supervised_split(
    sample: &WindowSample,
    grid: &Grid,
    pattern: MissingPattern,
    rng: &mut SeededRng,
) -> Result<SplitSample> {
    let mut out = sample.clone();
    let t = out.window.t();
    let mut target = vec![false; t];
    let local_observed: Vec<usize> = (0..t).filter(|&s| out.window.observed_mask[s]).collect();
    let mut hidden_neighbor = None;
    match pattern {
        MissingPattern::Rm => {
            if local_observed.is_empty() {
                return Err(Error::Skip("no observed history step to hide".into()));
            }
            for &s in &local_observed {
                if rng.bernoulli(RM_SPLIT_RATIO) {
                    target[s] = true;
                }
            }
        }
        MissingPattern::Km => {
            let sources = NeighborFeed::sources(grid, sample.intersection);
            let mut candidates: Vec<Option<usize>> = Vec::new();
            if !local_observed.is_empty() {
                candidates.push(None);
            }
            let mut ups: Vec<usize> = sources.iter().flatten().copied().collect();
            ups.sort_unstable();
            ups.dedup();
            for j in ups {
                let any = (0..LANES)
                    .filter(|&l| sources[l] == Some(j))
                    .any(|l| (0..t).any(|s| (0..FEEDERS).any(|k| out.feed.cell_available(l, s, k))));
                if any {
                    candidates.push(Some(j));
                }
            }
            if candidates.is_empty() {
                return Err(Error::Skip("no observed intersection to hide".into()));
            }
            match candidates[rng.below(candidates.len())] {
                None => local_observed.iter().for_each(|&s| target[s] = true),
                Some(j) => {
                    for l in (0..LANES).filter(|&l| sources[l] == Some(j)) {
                        for s in 0..t {
                            out.feed.clear_cells(l, s);
                        }
                    }
                    hidden_neighbor = Some(j);
                }
            }
        }
    }
    for (s, &hide) in target.iter().enumerate() {
        if hide {
            out.window.observed_mask[s] = false;
            out.reward.available_mask[s] = false;
            out.reward.values[s] = 0.0;
        }
    }
    Ok(SplitSample {
        sample: out,
        target_mask: target,
        hidden_neighbor,
    })
}
