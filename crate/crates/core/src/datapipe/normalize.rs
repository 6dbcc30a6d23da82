//! Map raw vehicle counts into the bounded ranges the model works in.

use serde::{Deserialize, Serialize};
use trafficsim::{LANES, OBS_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lane_capacity: f32,
}

impl Normalizer {
    pub fn new(lane_capacity: u32) -> Self {
        Self {
            lane_capacity: lane_capacity as f32,
        }
    }

    /// Largest possible queue sum at one intersection.
    pub fn max_queue_sum(&self) -> f32 {
        LANES as f32 * self.lane_capacity
    }

    /// Count in `[0, capacity]` to `[-1, 1]`.
    pub fn obs(&self, x: f32) -> f32 {
        (2.0 * (x / self.lane_capacity) - 1.0).clamp(-1.0, 1.0)
    }

    /// Inverse of [`Normalizer::obs`], rounded to the nearest whole vehicle:
    /// counts are integers, and f32 cannot invert the affine map exactly for
    /// every capacity.
    pub fn obs_count(&self, y: f32) -> f32 {
        self.obs_raw(y).round()
    }

    /// Unrounded inverse, for model outputs that need not be integral.
    pub fn obs_raw(&self, y: f32) -> f32 {
        (y + 1.0) / 2.0 * self.lane_capacity
    }

    pub fn obs_vec(&self, raw: &[f32; OBS_DIM]) -> [f32; OBS_DIM] {
        raw.map(|x| self.obs(x))
    }

    /// Queue sum to `[0, 1]`, 1 meaning no queue at all.
    pub fn reward(&self, queue_sum: f32) -> f32 {
        1.0 - (queue_sum / self.max_queue_sum()).min(1.0)
    }

    pub fn reward_raw(&self, r: f32) -> f32 {
        (1.0 - r) * self.max_queue_sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let n = Normalizer::new(30);
        assert_eq!(n.obs(0.0), -1.0);
        assert_eq!(n.obs(30.0), 1.0);
        assert_eq!(n.obs(45.0), 1.0);
        assert_eq!(n.reward(0.0), 1.0);
        assert_eq!(n.reward(360.0), 0.0);
        assert_eq!(n.reward(1000.0), 0.0);
    }

    #[test]
    fn integer_counts_round_trip_exactly() {
        for cap in 1..=200u32 {
            let n = Normalizer::new(cap);
            for x in 0..=cap {
                assert_eq!(n.obs_count(n.obs(x as f32)), x as f32, "cap {cap} x {x}");
            }
        }
    }
}
