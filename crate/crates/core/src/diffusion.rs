//! Noise schedule, forward noising, deterministic DDIM steps, classifier-free
//! guidance and the partial-reward mask composition.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub name: String,
    pub s: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule over `k` steps; betas clipped at 0.999.
    pub fn cosine(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let s = COSINE_OFFSET;
        let f = |i: usize| {
            let x = (i as f64 / k as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas = (1..=k).map(|i| (1.0 - f(i) / f(i - 1)).clamp(0.0, MAX_BETA)).collect();
        let mut sched = Self::from_betas(betas)?;
        sched.name = "cosine".into();
        sched.s = s;
        Ok(sched)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie strictly inside (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            name: "explicit".into(),
            s: 0.0,
            beta,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta(k)
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(contract(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn same_len(op: &str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(contract(format!("{op}: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// `sqrt(ab_k) * x0 + sqrt(1 - ab_k) * eps`
pub fn forward_noise(x0: &[f32], k: usize, eps: &[f32], sched: &DiffusionSchedule) -> Result<Vec<f32>> {
    sched.check_k(k)?;
    same_len("forward_noise", x0, eps)?;
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

/// Closed-form inversion of [`forward_noise`] given a noise estimate.
pub fn predict_x0(xk: &[f32], eps_hat: &[f32], k: usize, sched: &DiffusionSchedule) -> Result<Vec<f32>> {
    sched.check_k(k)?;
    same_len("predict_x0", xk, eps_hat)?;
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(xk.iter().zip(eps_hat).map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32).collect())
}

/// One deterministic DDIM step from `k` to `k_prev` (`k_prev == 0` yields
/// the clean estimate). Returns `(x_{k_prev}, x0_hat)`; `clip` bounds
/// `x0_hat` before it is re-noised.
pub fn ddim_step_full(
    xk: &[f32],
    eps_hat: &[f32],
    k: usize,
    k_prev: usize,
    sched: &DiffusionSchedule,
    clip: Option<(f32, f32)>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if k_prev >= k {
        return Err(contract(format!("ddim_step must move backwards, got {k} -> {k_prev}")));
    }
    let mut x0 = predict_x0(xk, eps_hat, k, sched)?;
    if let Some((lo, hi)) = clip {
        x0.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
    let ab = sched.alpha_bar(k_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let prev = x0
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Ok((prev, x0))
}

pub fn ddim_step(xk: &[f32], eps_hat: &[f32], k: usize, k_prev: usize, sched: &DiffusionSchedule) -> Result<Vec<f32>> {
    Ok(ddim_step_full(xk, eps_hat, k, k_prev, sched, None)?.0)
}

/// Strictly decreasing diffusion steps ending at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    steps: Vec<usize>,
}

impl SamplingPlan {
    pub fn new(steps: Vec<usize>, k_max: usize) -> Result<Self> {
        if steps.is_empty() || *steps.last().unwrap() != 1 || steps[0] > k_max {
            return Err(Error::Config(format!("sampling plan {steps:?} must start <= {k_max} and end at 1")));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!("sampling plan {steps:?} is not strictly decreasing")));
        }
        Ok(Self { steps })
    }

    /// `n` roughly evenly spaced steps from `k_max` down to 1.
    pub fn uniform(k_max: usize, n: usize) -> Result<Self> {
        if n == 0 || n > k_max {
            return Err(Error::Config(format!("cannot take {n} sampling steps out of {k_max}")));
        }
        if n == 1 {
            return Self::new(vec![1], k_max);
        }
        let steps = (0..n)
            .map(|i| {
                let frac = (n - 1 - i) as f64 / (n - 1) as f64;
                1 + ((k_max - 1) as f64 * frac).round() as usize
            })
            .collect();
        Self::new(steps, k_max)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(k, k_prev)` for every reverse step, the last one landing on 0.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self.steps.windows(2).map(|w| (w[0], w[1])).collect();
        v.push((*self.steps.last().unwrap(), 0));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f32,
    pub p_uncond: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 1.2,
            p_uncond: 0.25,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) || !self.omega.is_finite() {
            return Err(Error::Config(format!("invalid guidance {self:?}")));
        }
        Ok(())
    }
}

/// `eps_uncond + omega * (eps_cond - eps_uncond)`, evaluated as the
/// weighted sum `(1 - omega) * eps_uncond + omega * eps_cond` in 64-bit so
/// that `omega` of 0 and 1 return either input exactly.
pub fn cfg_noise(eps_cond: &[f32], eps_uncond: &[f32], omega: f32) -> Result<Vec<f32>> {
    same_len("cfg_noise", eps_cond, eps_uncond)?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| {
            let w = f64::from(omega);
            ((1.0 - w) * f64::from(u) + w * f64::from(c)) as f32
        })
        .collect())
}

/// Per-timestep split into slots with and without rewards. Always a
/// partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    m_obs: Vec<bool>,
    m_mis: Vec<bool>,
}

impl MaskPair {
    pub fn new(m_obs: Vec<bool>, m_mis: Vec<bool>) -> Result<Self> {
        let pair = Self { m_obs, m_mis };
        pair.check()?;
        Ok(pair)
    }

    /// `m_obs` = slots with a reward, `m_mis` = the rest.
    pub fn from_available(available: &[bool]) -> Self {
        Self {
            m_obs: available.to_vec(),
            m_mis: available.iter().map(|a| !a).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.m_obs.len() != self.m_mis.len() {
            return Err(contract("mask pair lengths differ"));
        }
        if let Some(t) = (0..self.m_obs.len()).find(|&t| self.m_obs[t] == self.m_mis[t]) {
            return Err(contract(format!(
                "masks are not a partition at slot {t} (obs={}, mis={})",
                self.m_obs[t], self.m_mis[t]
            )));
        }
        Ok(())
    }

    pub fn m_obs(&self) -> &[bool] {
        &self.m_obs
    }

    pub fn m_mis(&self) -> &[bool] {
        &self.m_mis
    }

    pub fn len(&self) -> usize {
        self.m_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_obs.is_empty()
    }
}

/// `m_obs * eps_rewarded + m_mis * eps_null`, masks broadcast over each
/// timestep's `len / T` values.
pub fn prcd_compose(eps_rewarded: &[f32], eps_null: &[f32], masks: &MaskPair) -> Result<Vec<f32>> {
    masks.check()?;
    same_len("prcd_compose", eps_rewarded, eps_null)?;
    let t = masks.len();
    if t == 0 || !eps_rewarded.len().is_multiple_of(t) {
        return Err(contract(format!(
            "{} values do not split into {t} timesteps",
            eps_rewarded.len()
        )));
    }
    let per = eps_rewarded.len() / t;
    Ok((0..eps_rewarded.len())
        .map(|i| {
            if masks.m_obs[i / per] {
                eps_rewarded[i]
            } else {
                eps_null[i]
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_betas_multiply() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        for k in 1..=100 {
            assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
        assert!(s.alpha_bar(1) > 0.999);
    }

    #[test]
    fn plans_end_at_one() {
        for n in [100, 50, 20, 10, 2, 1] {
            let p = SamplingPlan::uniform(100, n).unwrap();
            assert_eq!(p.len(), n);
            assert_eq!(*p.steps().last().unwrap(), 1);
            if n > 1 {
                assert_eq!(p.steps()[0], 100);
            }
        }
        assert!(SamplingPlan::new(vec![10, 10, 1], 100).is_err());
        assert!(SamplingPlan::new(vec![10, 5], 100).is_err());
    }

    #[test]
    fn out_of_range_k_is_rejected() {
        let s = DiffusionSchedule::cosine(10).unwrap();
        assert!(forward_noise(&[0.0], 0, &[0.0], &s).is_err());
        assert!(forward_noise(&[0.0], 11, &[0.0], &s).is_err());
        assert!(ddim_step(&[0.0], &[0.0], 3, 3, &s).is_err());
    }

    #[test]
    fn zero_noise_estimate_rescales() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        let x = predict_x0(&[0.5], &[0.0], 40, &s).unwrap();
        assert!((x[0] as f64 - 0.5 / s.alpha_bar(40).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        assert!(MaskPair::new(vec![true, false], vec![true, true]).is_err());
        assert!(MaskPair::new(vec![false], vec![false]).is_err());
        assert!(MaskPair::new(vec![true, false], vec![false, true]).is_ok());
    }
}
