//! Evaluation helpers: closed-loop ATT over seeds, relative generalization
//! and the sampling-step sweep.

use serde::{Deserialize, Serialize};
use trafficsim::{FlowSpec, NetworkSpec};

use crate::controller::{att_of, run_closed_loop, InferenceConfig};
use crate::datapipe::{run_behavior_policy, BehaviorPolicy, KmLayout, MaskSet, MissingPattern};
use crate::error::{contract, Error, Result};
use crate::trainer::TrainedModel;

/// Ratio of the ATT of a model evaluated off its training condition to the
/// ATT of the model trained on the evaluated condition.
pub fn relative_generalization(p_g: f64, p_o: f64) -> Result<f64> {
    if [p_g, p_o].iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Contract(format!("ATT values must be positive and finite, got {p_g} and {p_o}")));
    }
    Ok(p_g / p_o)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// What an evaluation episode looks like apart from the controller.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSetting {
    pub network: NetworkSpec,
    pub flows: FlowSpec,
    pub pattern: MissingPattern,
    pub rate: f64,
    pub km_layout: KmLayout,
}

impl EvalSetting {
    pub fn steps(&self) -> usize {
        self.flows.duration.div_ceil(self.network.min_action_duration.max(1)) as usize
    }

    /// Each seed drives the demand sample, the mask and the sampler noise.
    pub fn mask(&self, seed: u64) -> Result<MaskSet> {
        MaskSet::generate(&self.network, self.steps(), self.pattern, self.rate, seed, self.km_layout)
    }
}

pub fn evaluate_model(setting: &EvalSetting, model: &TrainedModel, config: &InferenceConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| {
            let mask = setting.mask(seed)?;
            let cfg = InferenceConfig { seed, ..config.clone() };
            Ok(run_closed_loop(&setting.network, &setting.flows, seed, model, &mask, &cfg)?.att)
        })
        .collect()
}

pub fn evaluate_baseline(setting: &EvalSetting, policy: BehaviorPolicy, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&seed| att_of(&run_behavior_policy(&setting.network, &setting.flows, policy, seed)?))
        .collect()
}

/// Train-rate by test-rate ATT grid. Cells never evaluated stay `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationMatrix {
    pub train_rates: Vec<f64>,
    pub test_rates: Vec<f64>,
    pub att: Vec<Vec<Option<f64>>>,
}

impl GeneralizationMatrix {
    pub fn new(train_rates: Vec<f64>, test_rates: Vec<f64>) -> Self {
        let att = vec![vec![None; test_rates.len()]; train_rates.len()];
        Self {
            train_rates,
            test_rates,
            att,
        }
    }

    pub fn set(&mut self, train: usize, test: usize, att: f64) -> Result<()> {
        if !(att > 0.0 && att.is_finite()) {
            return Err(Error::Contract(format!("cell ({train},{test}) ATT {att} is not positive")));
        }
        self.att[train][test] = Some(att);
        Ok(())
    }

    fn reference_row(&self, test: usize) -> Option<usize> {
        let r = self.test_rates[test];
        self.train_rates.iter().position(|&t| t == r)
    }

    /// `P_r` of one cell: `None` if either ATT is absent or the test rate
    /// was never trained on.
    pub fn pr(&self, train: usize, test: usize) -> Option<Result<f64>> {
        let p_g = self.att[train][test]?;
        let p_o = self.att[self.reference_row(test)?][test]?;
        Some(relative_generalization(p_g, p_o))
    }

    pub fn pr_grid(&self) -> Result<Vec<Vec<Option<f64>>>> {
        (0..self.train_rates.len())
            .map(|i| (0..self.test_rates.len()).map(|j| self.pr(i, j).transpose()).collect())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.att.iter().flatten().all(Option::is_some)
    }

    pub fn summary_table(&self) -> Result<String> {
        let pr = self.pr_grid()?;
        let mut out = String::from("train\\test");
        for r in &self.test_rates {
            out.push_str(&format!(" | {:>14}", format!("{:.0}%", r * 100.0)));
        }
        out.push('\n');
        for (i, r) in self.train_rates.iter().enumerate() {
            out.push_str(&format!("{:>10}", format!("{:.0}%", r * 100.0)));
            for (att, p) in self.att[i].iter().zip(&pr[i]) {
                let cell = match (att, p) {
                    (Some(a), Some(p)) => format!("{a:.1}s P_r {p:.3}"),
                    (Some(a), None) => format!("{a:.1}s"),
                    _ => "absent".to_string(),
                };
                out.push_str(&format!(" | {cell:>14}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

pub const SWEEP_PLANS: [usize; 4] = [100, 50, 20, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sampling_steps: usize,
    pub att: Vec<f64>,
    pub median: f64,
}

/// Same checkpoint, same seeds, varying only the sampling plan.
pub fn sweep_steps(setting: &EvalSetting, model: &TrainedModel, config: &InferenceConfig, plans: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(contract("sweep needs at least one seed"));
    }
    plans
        .iter()
        .map(|&n| {
            let cfg = InferenceConfig {
                sampling_steps: n,
                ..config.clone()
            };
            let att = evaluate_model(setting, model, &cfg, seeds)?;
            let median = median(&att).expect("non-empty");
            Ok(SweepRow {
                sampling_steps: n,
                att,
                median,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_hand_cases() {
        assert_eq!(relative_generalization(300.0, 300.0).unwrap(), 1.0);
        assert!((relative_generalization(330.0, 300.0).unwrap() - 1.1).abs() < 1e-12);
        assert!(relative_generalization(100.0, 0.0).is_err());
        assert!(relative_generalization(100.0, -3.0).is_err());
    }

    #[test]
    fn matrix_marks_absent_cells() {
        let mut m = GeneralizationMatrix::new(vec![0.1, 0.3], vec![0.1, 0.3, 0.5]);
        m.set(0, 0, 120.0).unwrap();
        m.set(1, 0, 132.0).unwrap();
        m.set(1, 1, 125.0).unwrap();
        let pr = m.pr_grid().unwrap();
        assert_eq!(pr[0][0], Some(1.0));
        assert!((pr[1][0].unwrap() - 1.1).abs() < 1e-12);
        assert_eq!(pr[0][1], None);
        assert_eq!(pr[1][2], None);
        assert!(!m.is_complete());
        assert!(m.summary_table().unwrap().contains("absent"));
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
