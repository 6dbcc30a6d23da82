//! Store-and-forward imputation: a missing lane value is the previous-step
//! mean over the connected upstream lanes.

use trafficsim::{Dir, Grid, FEEDERS, LANES, OBS_DIM};

use crate::datapipe::{Episode, MaskSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SfmConfig {
    /// Divisor; stays fixed even when some connected lanes are unavailable.
    pub k: usize,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self { k: 12 }
    }
}

impl SfmConfig {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("SFM k must be positive".into()));
        }
        Ok(Self { k })
    }
}

/// `(1/k) * sum(values)`; unavailable lanes are simply absent from `values`.
pub fn impute_observation(neighbor_values: &[f32], cfg: SfmConfig) -> f32 {
    neighbor_values.iter().sum::<f32>() / cfg.k as f32
}

/// The upstream lanes (intersection, lane) connected to `id`: three feeders
/// from each neighbor, in N, E, S, W approach order.
pub fn connected_lanes(grid: &Grid, id: usize) -> Vec<(usize, usize)> {
    Dir::ALL
        .iter()
        .filter_map(|&a| grid.feeders(id, a))
        .flat_map(|f| f.lanes.map(|l| (f.intersection, l)))
        .collect()
}

/// Imputes all 24 features of `id` from the neighbors' previous-step raw
/// observations (`None` for a neighbor that was not observed). Every lane
/// receives the same per-feature value.
pub fn impute_intersection(
    grid: &Grid,
    id: usize,
    mut prev: impl FnMut(usize) -> Option<[f32; OBS_DIM]>,
    cfg: SfmConfig,
) -> [f32; OBS_DIM] {
    let mut num = Vec::with_capacity(4 * FEEDERS);
    let mut queue = Vec::with_capacity(4 * FEEDERS);
    for (j, l) in connected_lanes(grid, id) {
        if let Some(o) = prev(j) {
            num.push(o[2 * l]);
            queue.push(o[2 * l + 1]);
        }
    }
    let (n, q) = (impute_observation(&num, cfg), impute_observation(&queue, cfg));
    let mut out = [0.0; OBS_DIM];
    for l in 0..LANES {
        out[2 * l] = n;
        out[2 * l + 1] = q;
    }
    out
}

/// Sum of queue lengths over the 12 lanes.
pub fn impute_reward(obs: &[f32; OBS_DIM]) -> f32 {
    (0..LANES).map(|l| obs[2 * l + 1]).sum()
}

/// Whole-episode imputation of raw observations, `[step][intersection]`.
/// Observed cells are copied unchanged; missing cells at step 0 become 0.
pub fn impute_episode(ep: &Episode, mask: &MaskSet, grid: &Grid, cfg: SfmConfig) -> Vec<Vec<[f32; OBS_DIM]>> {
    let n = ep.intersections;
    (0..ep.steps)
        .map(|s| {
            (0..n)
                .map(|i| {
                    if mask.observed(i, s) {
                        *ep.obs(i, s)
                    } else if s == 0 {
                        [0.0; OBS_DIM]
                    } else {
                        impute_intersection(grid, i, |j| mask.observed(j, s - 1).then(|| *ep.obs(j, s - 1)), cfg)
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean absolute error over the masked cells of `ep` against `imputed`.
pub fn masked_mae(ep: &Episode, mask: &MaskSet, imputed: &[Vec<[f32; OBS_DIM]>]) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, row) in imputed.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            if !mask.observed(i, s) {
                let truth = ep.obs(i, s);
                total += v.iter().zip(truth).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
                count += OBS_DIM;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}
