//! Missing-data masks over (intersection, control step) cells.

use std::path::Path;

use numcore::SeededRng;
use serde::{Deserialize, Serialize};
use trafficsim::{Grid, NetworkSpec};

use super::dataset::topology_hash;
use crate::error::{Error, Result};

pub const MASK_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPattern {
    /// Independent per-cell dropouts.
    Rm,
    /// Whole intersections never observed.
    Km,
}

impl MissingPattern {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rm" => Ok(MissingPattern::Rm),
            "km" => Ok(MissingPattern::Km),
            other => Err(Error::Config(format!("unknown missing pattern `{other}`"))),
        }
    }
}

/// How kriging-missing intersections are placed relative to each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KmLayout {
    /// Prefer masked intersections whose neighbors are all observed.
    #[default]
    Spread,
    /// Guarantee one masked intersection whose neighbors are all masked too.
    Adjacent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSet {
    pub schema_version: u32,
    pub topology_hash: String,
    pub pattern: MissingPattern,
    pub rate: f64,
    pub seed: u64,
    pub km_layout: KmLayout,
    pub intersections: usize,
    pub steps: usize,
    /// One string per intersection, `1` = observed, `0` = missing.
    rows: Vec<String>,
}

impl MaskSet {
    pub fn full(net: &NetworkSpec, steps: usize) -> Self {
        let n = net.topology().len();
        Self {
            schema_version: MASK_SCHEMA,
            topology_hash: topology_hash(net),
            pattern: MissingPattern::Rm,
            rate: 0.0,
            seed: 0,
            km_layout: KmLayout::Spread,
            intersections: n,
            steps,
            rows: vec!["1".repeat(steps); n],
        }
    }

    pub fn generate(
        net: &NetworkSpec,
        steps: usize,
        pattern: MissingPattern,
        rate: f64,
        seed: u64,
        km_layout: KmLayout,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
        }
        let grid = net.topology();
        let n = grid.len();
        let mut rng = SeededRng::new(seed);
        let mut observed = vec![vec![true; steps]; n];
        match pattern {
            MissingPattern::Rm => {
                for row in observed.iter_mut() {
                    for cell in row.iter_mut() {
                        *cell = !rng.bernoulli(rate);
                    }
                }
            }
            MissingPattern::Km => {
                let exact = rate * n as f64;
                let count = exact.round();
                if (exact - count).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "KM rate {rate} is not a whole number of the {n} intersections"
                    )));
                }
                for i in km_intersections(&grid, count as usize, km_layout, &mut rng)? {
                    observed[i].iter_mut().for_each(|c| *c = false);
                }
            }
        }
        Ok(Self {
            schema_version: MASK_SCHEMA,
            topology_hash: topology_hash(net),
            pattern,
            rate,
            seed,
            km_layout,
            intersections: n,
            steps,
            rows: observed
                .iter()
                .map(|r| r.iter().map(|&o| if o { '1' } else { '0' }).collect())
                .collect(),
        })
    }

    /// Whether cell (intersection, step) was recorded. Panics out of range.
    pub fn observed(&self, intersection: usize, step: usize) -> bool {
        assert!(step < self.steps, "mask has {} steps, asked for {step}", self.steps);
        self.rows[intersection].as_bytes()[step] == b'1'
    }

    pub fn intersection_fully_missing(&self, intersection: usize) -> bool {
        !self.rows[intersection].contains('1')
    }

    pub fn masked_fraction(&self) -> f64 {
        let missing: usize = self.rows.iter().map(|r| r.bytes().filter(|&b| b == b'0').count()).sum();
        missing as f64 / (self.intersections * self.steps).max(1) as f64
    }

    /// Hides, in `flags[intersection][step]`, every cell this mask hides.
    pub fn apply(&self, flags: &mut [Vec<bool>]) {
        for (i, row) in flags.iter_mut().enumerate() {
            for (s, f) in row.iter_mut().enumerate() {
                *f = *f && self.observed(i, s);
            }
        }
    }

    pub fn check_topology(&self, net: &NetworkSpec) -> Result<()> {
        if self.topology_hash != topology_hash(net) {
            return Err(Error::Contract("mask was generated for a different topology".into()));
        }
        Ok(())
    }

    pub fn file_name(&self) -> String {
        let p = match self.pattern {
            MissingPattern::Rm => "rm",
            MissingPattern::Km => "km",
        };
        format!("mask_{p}_{:.3}_{}_{}.json", self.rate, self.seed, &self.topology_hash[..12])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: MaskSet = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema_version != MASK_SCHEMA {
            return Err(Error::Format(format!("mask schema {} unsupported", m.schema_version)));
        }
        if m.rows.len() != m.intersections || m.rows.iter().any(|r| r.len() != m.steps || r.bytes().any(|b| b != b'0' && b != b'1')) {
            return Err(Error::Format("mask rows malformed".into()));
        }
        Ok(m)
    }
}

fn km_intersections(grid: &Grid, count: usize, layout: KmLayout, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let n = grid.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut chosen = vec![false; n];
    match layout {
        KmLayout::Spread => {
            let mut picked = 0;
            for &i in &order {
                if picked == count {
                    break;
                }
                if grid.neighbors(i).iter().all(|&j| !chosen[j]) {
                    chosen[i] = true;
                    picked += 1;
                }
            }
            for &i in &order {
                if picked == count {
                    break;
                }
                if !chosen[i] {
                    chosen[i] = true;
                    picked += 1;
                }
            }
        }
        KmLayout::Adjacent => {
            if count > 0 {
                let center = order
                    .iter()
                    .copied()
                    .find(|&i| grid.neighbors(i).len() < count)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "{count} masked intersections cannot surround one with masked neighbors"
                        ))
                    })?;
                chosen[center] = true;
                for j in grid.neighbors(center) {
                    chosen[j] = true;
                }
                let mut picked = chosen.iter().filter(|&&c| c).count();
                for &i in &order {
                    if picked == count {
                        break;
                    }
                    if !chosen[i] {
                        chosen[i] = true;
                        picked += 1;
                    }
                }
            }
        }
    }
    Ok((0..n).filter(|&i| chosen[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rm_rate_concentrates() {
        let net = NetworkSpec::grid(2, 5);
        let m = MaskSet::generate(&net, 1000, MissingPattern::Rm, 0.3, 3, KmLayout::Spread).unwrap();
        let f = m.masked_fraction();
        assert!((0.28..=0.32).contains(&f), "{f}");
    }

    #[test]
    fn rate_endpoints() {
        let net = NetworkSpec::grid(2, 2);
        let m0 = MaskSet::generate(&net, 50, MissingPattern::Rm, 0.0, 1, KmLayout::Spread).unwrap();
        assert_eq!(m0.masked_fraction(), 0.0);
        let m1 = MaskSet::generate(&net, 50, MissingPattern::Rm, 1.0, 1, KmLayout::Spread).unwrap();
        assert_eq!(m1.masked_fraction(), 1.0);
    }

    #[test]
    fn km_masks_whole_intersections() {
        let net = NetworkSpec::grid(2, 2);
        let m = MaskSet::generate(&net, 40, MissingPattern::Km, 0.25, 4, KmLayout::Spread).unwrap();
        let missing: Vec<_> = (0..4).filter(|&i| m.intersection_fully_missing(i)).collect();
        assert_eq!(missing.len(), 1);
        for i in 0..4 {
            let any = (0..40).any(|s| m.observed(i, s));
            assert_eq!(any, !missing.contains(&i));
        }
        assert!(MaskSet::generate(&net, 40, MissingPattern::Km, 0.3, 4, KmLayout::Spread).is_err());
    }

    #[test]
    fn km_spread_and_adjacent_layouts() {
        let net = NetworkSpec::grid(3, 3);
        let grid = net.topology();
        for seed in 0..20 {
            let m = MaskSet::generate(&net, 5, MissingPattern::Km, 2.0 / 9.0, seed, KmLayout::Spread).unwrap();
            let missing: Vec<_> = (0..9).filter(|&i| m.intersection_fully_missing(i)).collect();
            for &i in &missing {
                assert!(grid.neighbors(i).iter().all(|j| !missing.contains(j)));
            }
            let m = MaskSet::generate(&net, 5, MissingPattern::Km, 4.0 / 9.0, seed, KmLayout::Adjacent).unwrap();
            let missing: Vec<_> = (0..9).filter(|&i| m.intersection_fully_missing(i)).collect();
            assert_eq!(missing.len(), 4);
            assert!(missing
                .iter()
                .any(|&i| grid.neighbors(i).iter().all(|j| missing.contains(j))));
        }
    }

    #[test]
    fn apply_is_idempotent() {
        let net = NetworkSpec::grid(2, 2);
        let m = MaskSet::generate(&net, 30, MissingPattern::Rm, 0.4, 9, KmLayout::Spread).unwrap();
        let mut once = vec![vec![true; 30]; 4];
        m.apply(&mut once);
        let mut twice = once.clone();
        m.apply(&mut twice);
        assert_eq!(once, twice);
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let net = NetworkSpec::grid(2, 2);
        let a = MaskSet::generate(&net, 30, MissingPattern::Rm, 0.3, 7, KmLayout::Spread).unwrap();
        let b = MaskSet::generate(&net, 30, MissingPattern::Rm, 0.3, 7, KmLayout::Spread).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back: MaskSet = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
