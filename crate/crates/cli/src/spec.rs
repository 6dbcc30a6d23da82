//! Experiment specification files and JSON loading with field paths in
//! error messages.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use difflight::controller::InferenceConfig;
use difflight::datapipe::{BehaviorPolicy, KmLayout, MissingPattern};
use difflight::model::NoiseModelKind;
use difflight::trainer::{RewardHandling, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use trafficsim::{FlowSpec, NetworkSpec};

pub const SPEC_SCHEMA: u32 = 1;

/// Parses JSON, reporting the offending field path on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("{}: field `{path}`: {}", origin.display(), e.into_inner())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&text, path)
}

pub fn load_network(path: &Path) -> Result<NetworkSpec> {
    let net: NetworkSpec = read_json(path)?;
    net.validate().with_context(|| format!("{}", path.display()))?;
    Ok(net)
}

pub fn load_flows(path: &Path, net: &NetworkSpec) -> Result<FlowSpec> {
    let flows: FlowSpec = read_json(path)?;
    flows.validate(net).with_context(|| format!("{}", path.display()))?;
    Ok(flows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub episodes_per_policy: usize,
    pub policies: Vec<BehaviorPolicy>,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            episodes_per_policy: 3,
            policies: difflight::datapipe::default_mixture(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub pattern: MissingPattern,
    /// Training and test rates; the first one is used by single-rate commands.
    pub rates: Vec<f64>,
    pub seed: u64,
    pub km_layout: KmLayout,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            pattern: MissingPattern::Rm,
            rates: vec![0.3],
            seed: 0,
            km_layout: KmLayout::Spread,
        }
    }
}

/// Variant switches; unset fields leave the train/inference sections alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub noise_model: Option<NoiseModelKind>,
    pub reward_handling: Option<RewardHandling>,
    pub dcm: Option<bool>,
    pub invdyn: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub network: PathBuf,
    pub flows: PathBuf,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_eval_seeds")]
    pub eval_seeds: Vec<u64>,
}

fn default_eval_seeds() -> Vec<u64> {
    vec![101, 102, 103]
}

impl ExperimentSpec {
    /// Loads `path`; relative references resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: Self = read_json(path)?;
        if spec.schema_version != SPEC_SCHEMA {
            bail!(
                "{}: field `schema_version`: unsupported version {} (expected {SPEC_SCHEMA})",
                path.display(),
                spec.schema_version
            );
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        spec.network = resolve(&spec.network);
        spec.flows = resolve(&spec.flows);
        spec.dataset = spec.dataset.as_deref().map(resolve);
        for (field, p) in [("network", Some(&spec.network)), ("flows", Some(&spec.flows)), ("dataset", spec.dataset.as_ref())] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{}: field `{field}`: {} does not exist", path.display(), p.display());
                }
            }
        }
        if spec.mask.rates.is_empty() {
            bail!("{}: field `mask.rates`: at least one rate is required", path.display());
        }
        if spec.eval_seeds.is_empty() {
            bail!("{}: field `eval_seeds`: at least one seed is required", path.display());
        }
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(k) = self.ablation.noise_model {
            t.model.kind = k;
        }
        if let Some(r) = self.ablation.reward_handling {
            t.reward_handling = r;
        }
        t
    }

    pub fn inference_config(&self) -> InferenceConfig {
        let mut c = self.inference.clone();
        if let Some(r) = self.ablation.reward_handling {
            c.reward_handling = r;
        }
        if let Some(d) = self.ablation.dcm {
            c.dcm_enabled = d;
        }
        if let Some(i) = self.ablation.invdyn {
            c.use_invdyn = i;
        }
        c
    }
}
