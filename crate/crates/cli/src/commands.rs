//! Subcommand implementations. Each returns the run directory it wrote.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use difflight::controller::{att_of, Controller, InferenceConfig};
use difflight::datapipe::{
    run_behavior_policy, run_episode, topology_hash, BehaviorPolicy, KmLayout, MaskSet, MissingPattern, OfflineDataset,
};
use difflight::experiment::{
    evaluate_baseline, evaluate_model, median, sweep_steps as run_sweep, EvalSetting, GeneralizationMatrix, SWEEP_PLANS,
};
use difflight::sfm::{impute_episode, masked_mae, SfmConfig};
use difflight::trainer::{TrainConfig, TrainedModel, Trainer};
use serde_json::{json, Value};
use trafficsim::{EpisodeLog, FlowSpec, NetworkSpec};

use crate::report::{finite, Report};
use crate::rundir::RunDir;
use crate::spec::{load_flows, load_network, ExperimentSpec};
use crate::Sources;

struct Resolved {
    spec: Option<ExperimentSpec>,
    network_path: PathBuf,
    net: NetworkSpec,
    flows_path: Option<PathBuf>,
    flows: Option<FlowSpec>,
}

impl Resolved {
    fn new(src: &Sources, need_flows: bool) -> Result<Self> {
        let spec = src.spec.as_deref().map(ExperimentSpec::load).transpose()?;
        let network_path = src
            .network
            .clone()
            .or_else(|| spec.as_ref().map(|s| s.network.clone()))
            .ok_or_else(|| anyhow!("missing --network (or spec field `network`)"))?;
        let net = load_network(&network_path)?;
        let flows_path = src.flows.clone().or_else(|| spec.as_ref().map(|s| s.flows.clone()));
        if need_flows && flows_path.is_none() {
            bail!("missing --flows (or spec field `flows`)");
        }
        let flows = flows_path.as_deref().map(|p| load_flows(p, &net)).transpose()?;
        Ok(Self {
            spec,
            network_path,
            net,
            flows_path,
            flows,
        })
    }

    fn spec(&self) -> Result<&ExperimentSpec> {
        self.spec.as_ref().ok_or_else(|| anyhow!("this command needs --spec"))
    }

    fn flows(&self) -> &FlowSpec {
        self.flows.as_ref().expect("flows resolved")
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![("network", self.network_path.as_path())];
        if let Some(f) = &self.flows_path {
            v.push(("flows", f.as_path()));
        }
        v
    }

    fn steps(&self) -> usize {
        self.flows().duration.div_ceil(self.net.min_action_duration.max(1)) as usize
    }

    fn dataset_path(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.spec.as_ref().and_then(|s| s.dataset.clone()))
            .ok_or_else(|| anyhow!("missing --dataset (or spec field `dataset`)"))
    }
}

fn write_log(log: &EpisodeLog, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    log.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn simulate(out: Option<&Path>, src: &Sources, policy: &str, seed: u64) -> Result<PathBuf> {
    let r = Resolved::new(src, true)?;
    let policy = BehaviorPolicy::parse(policy)?;
    let rd = RunDir::create(out, "simulate", json!({ "policy": policy }), seed, &r.inputs())?;
    let log = run_behavior_policy(&r.net, r.flows(), policy, seed)?;
    write_log(&log, &rd.file("episode.jsonl"))?;
    let mut rep = Report::default();
    rep.metric("att", att_of(&log)?)?;
    rep.metric("vehicles", log.vehicles.len() as f64)?;
    rep.metric("finished", log.vehicles.iter().filter(|v| v.t_leave.is_some()).count() as f64)?;
    rep.emit(&rd.path)?;
    rd.finish()
}

pub fn gen_data(
    out: Option<&Path>,
    src: &Sources,
    episodes_per_policy: Option<usize>,
    policies: Option<Vec<String>>,
    seed: Option<u64>,
) -> Result<PathBuf> {
    let r = Resolved::new(src, true)?;
    let data = r.spec.as_ref().map(|s| s.data.clone()).unwrap_or_default();
    let policies = match policies {
        Some(names) => names.iter().map(|n| BehaviorPolicy::parse(n)).collect::<difflight::Result<Vec<_>>>()?,
        None => data.policies,
    };
    let per = episodes_per_policy.unwrap_or(data.episodes_per_policy);
    let seed = seed.unwrap_or(data.seed);
    let config = json!({ "policies": policies, "episodes_per_policy": per });
    let rd = RunDir::create(out, "gen-data", config, seed, &r.inputs())?;
    let ds = OfflineDataset::generate(&r.net, r.flows(), &policies, per, seed)?;
    ds.save(&rd.file("dataset"))?;
    let mut rep = Report::default();
    rep.metric("episodes", ds.episodes.len() as f64)?;
    rep.metric("steps_per_episode", ds.steps() as f64)?;
    for p in &policies {
        let atts: Vec<f64> = ds
            .episodes
            .iter()
            .filter(|e| e.policy == p.name())
            .map(|e| att_of(&e.log))
            .collect::<difflight::Result<_>>()?;
        if let Some(m) = median(&atts) {
            rep.metric(&format!("att_median.{}", p.name()), m)?;
        }
    }
    rep.emit(&rd.path)?;
    rd.finish()
}

pub fn mask(
    out: Option<&Path>,
    src: &Sources,
    steps: Option<usize>,
    pattern: Option<MissingPattern>,
    rate: Option<f64>,
    seed: Option<u64>,
    km_layout: Option<KmLayout>,
) -> Result<PathBuf> {
    let r = Resolved::new(src, steps.is_none())?;
    let section = r.spec.as_ref().map(|s| s.mask.clone()).unwrap_or_default();
    let steps = steps.unwrap_or_else(|| r.steps());
    let pattern = pattern.unwrap_or(section.pattern);
    let rate = rate.unwrap_or(section.rates[0]);
    let seed = seed.unwrap_or(section.seed);
    let layout = km_layout.unwrap_or(section.km_layout);
    let config = json!({ "steps": steps, "pattern": pattern, "rate": rate, "km_layout": layout });
    let rd = RunDir::create(out, "mask", config, seed, &[("network", r.network_path.as_path())])?;
    let m = MaskSet::generate(&r.net, steps, pattern, rate, seed, layout)?;
    m.save(&rd.file(&m.file_name()))?;
    let mut rep = Report::default();
    rep.metric("masked_fraction", m.masked_fraction())?;
    rep.row("file", m.file_name());
    rep.emit(&rd.path)?;
    rd.finish()
}

fn load_mask(path: &Path, net: &NetworkSpec, steps: usize) -> Result<MaskSet> {
    crate::rundir::verify_artifact(path)?;
    let m = MaskSet::load(path)?;
    m.check_topology(net)?;
    if m.steps < steps {
        bail!("mask {} covers {} steps, {steps} needed", path.display(), m.steps);
    }
    Ok(m)
}

fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    crate::rundir::verify_artifact(path)?;
    OfflineDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn impute(out: Option<&Path>, src: &Sources, dataset: Option<PathBuf>, mask_path: &Path, k: usize) -> Result<PathBuf> {
    let spec = src.spec.as_deref().map(ExperimentSpec::load).transpose()?;
    let ds_path = dataset
        .or_else(|| spec.as_ref().and_then(|s| s.dataset.clone()))
        .ok_or_else(|| anyhow!("missing --dataset (or spec field `dataset`)"))?;
    let ds = load_dataset(&ds_path)?;
    let m = load_mask(mask_path, &ds.network, ds.steps())?;
    let cfg = SfmConfig::new(k)?;
    let rd = RunDir::create(out, "impute", json!({ "k": k }), m.seed, &[("dataset", &ds_path), ("mask", mask_path)])?;
    let grid = ds.network.topology();
    let mut rep = Report::default();
    let (mut sfm_all, mut zero_all) = (Vec::new(), Vec::new());
    for (e, ep) in ds.episodes.iter().enumerate() {
        let imputed = impute_episode(ep, &m, &grid, cfg);
        let zeros = vec![vec![[0.0; trafficsim::OBS_DIM]; ep.intersections]; ep.steps];
        let (Some(a), Some(b)) = (masked_mae(ep, &m, &imputed), masked_mae(ep, &m, &zeros)) else {
            rep.note(format!("episode {e}: no masked cell"));
            continue;
        };
        rep.line(vec![("episode", json!(e)), ("sfm_mae", finite("sfm_mae", a)?), ("zero_fill_mae", finite("zero_fill_mae", b)?)]);
        sfm_all.push(a);
        zero_all.push(b);
    }
    if !sfm_all.is_empty() {
        rep.metric("sfm_mae_mean", sfm_all.iter().sum::<f64>() / sfm_all.len() as f64)?;
        rep.metric("zero_fill_mae_mean", zero_all.iter().sum::<f64>() / zero_all.len() as f64)?;
    }
    rep.emit(&rd.path)?;
    rd.finish()
}

fn load_model(path: &Path, net: &NetworkSpec) -> Result<TrainedModel> {
    crate::rundir::verify_artifact(path)?;
    let m = TrainedModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if m.topology_hash != topology_hash(net) {
        bail!("checkpoint {} was trained on a different network", path.display());
    }
    Ok(m)
}

fn train_model(cfg: &TrainConfig, ds: &OfflineDataset, mask: &MaskSet, dir: &Path) -> Result<(TrainedModel, Value)> {
    let mut tr = Trainer::new(ds, mask, cfg.clone(), None)?;
    let every = (cfg.train_steps / 20).max(1);
    for s in 0..cfg.train_steps {
        let (d, i) = tr.step()?;
        if (s + 1) % every == 0 {
            eprintln!("step {:>6}  diffusion {d:.4}  invdyn {i:.4}", s + 1);
        }
        if cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 {
            tr.model.save(&dir.join(format!("step_{:07}", s + 1)))?;
        }
    }
    let (report, model) = tr.finish(Some(dir))?;
    let curves = json!({
        "diffusion_loss": report.diffusion_loss,
        "invdyn_loss": report.invdyn_loss,
        "dropout_draws": report.dropout_draws,
        "dropouts": report.dropouts,
    });
    Ok((model, curves))
}

fn tail_mean(v: &[f32], n: usize) -> f64 {
    let t = &v[v.len().saturating_sub(n)..];
    t.iter().map(|&x| f64::from(x)).sum::<f64>() / t.len().max(1) as f64
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    out: Option<&Path>,
    src: &Sources,
    dataset: Option<PathBuf>,
    mask_path: Option<PathBuf>,
    rate: Option<f64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
) -> Result<PathBuf> {
    let r = Resolved::new(src, false)?;
    let spec = r.spec()?;
    let ds_path = r.dataset_path(dataset)?;
    let ds = load_dataset(&ds_path)?;
    if topology_hash(&ds.network) != topology_hash(&r.net) {
        bail!("dataset {} was generated on a different network", ds_path.display());
    }
    let mut cfg = spec.train_config();
    cfg.train_steps = steps.unwrap_or(cfg.train_steps);
    cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let mut inputs = vec![("network", r.network_path.as_path()), ("dataset", ds_path.as_path())];
    if let Some(p) = &mask_path {
        inputs.push(("mask", p.as_path()));
    }
    let rate = rate.unwrap_or(spec.mask.rates[0]);
    let config = json!({ "train": cfg, "mask": spec.mask, "rate": rate });
    let rd = RunDir::create(out, "train", config, cfg.seed, &inputs)?;
    let mask = match &mask_path {
        Some(p) => load_mask(p, &ds.network, ds.steps())?,
        None => MaskSet::generate(&ds.network, ds.steps(), spec.mask.pattern, rate, spec.mask.seed, spec.mask.km_layout)?,
    };
    mask.save(&rd.file(&mask.file_name()))?;
    let (_, curves) = train_model(&cfg, &ds, &mask, &rd.file("checkpoints"))?;
    fs::write(rd.file("train_curves.json"), serde_json::to_string(&curves)? + "\n")?;
    let mut rep = Report::default();
    let d: Vec<f32> = serde_json::from_value(curves["diffusion_loss"].clone())?;
    let i: Vec<f32> = serde_json::from_value(curves["invdyn_loss"].clone())?;
    rep.metric("steps", d.len() as f64)?;
    if !d.is_empty() {
        rep.metric("diffusion_loss_first", f64::from(d[0]))?;
        rep.metric("diffusion_loss_last50", tail_mean(&d, 50))?;
        rep.metric("invdyn_loss_last50", tail_mean(&i, 50))?;
    }
    let draws = curves["dropout_draws"].as_u64().unwrap_or(0);
    if draws > 0 {
        rep.metric("dropout_rate", curves["dropouts"].as_u64().unwrap_or(0) as f64 / draws as f64)?;
    }
    rep.row("checkpoint", "checkpoints/final");
    rep.emit(&rd.path)?;
    rd.finish()
}

fn eval_setting(r: &Resolved, rate: f64) -> Result<EvalSetting> {
    let spec = r.spec()?;
    Ok(EvalSetting {
        network: r.net.clone(),
        flows: r.flows().clone(),
        pattern: spec.mask.pattern,
        rate,
        km_layout: spec.mask.km_layout,
    })
}

pub fn run(
    out: Option<&Path>,
    src: &Sources,
    checkpoint: &Path,
    mask_path: Option<PathBuf>,
    rate: Option<f64>,
    seed: u64,
    sampling_steps: Option<usize>,
) -> Result<PathBuf> {
    let r = Resolved::new(src, true)?;
    let mut icfg = r.spec.as_ref().map(ExperimentSpec::inference_config).unwrap_or_default();
    icfg.seed = seed;
    icfg.sampling_steps = sampling_steps.unwrap_or(icfg.sampling_steps);
    let model = load_model(checkpoint, &r.net)?;
    let mut inputs = r.inputs();
    inputs.push(("checkpoint", checkpoint));
    if let Some(p) = &mask_path {
        inputs.push(("mask", p.as_path()));
    }
    let mask = match &mask_path {
        Some(p) => load_mask(p, &r.net, r.steps())?,
        None => {
            let rate = rate.or_else(|| r.spec.as_ref().map(|s| s.mask.rates[0])).unwrap_or(0.0);
            let section = r.spec.as_ref().map(|s| s.mask.clone()).unwrap_or_default();
            MaskSet::generate(&r.net, r.steps(), section.pattern, rate, seed, section.km_layout)?
        }
    };
    let config = json!({ "inference": icfg, "mask_rate": mask.rate, "mask_pattern": mask.pattern });
    let rd = RunDir::create(out, "run", config, seed, &inputs)?;
    let mut w = BufWriter::new(File::create(rd.file("steps.jsonl"))?);
    let mut ctl = Controller::new(&model, r.net.topology(), icfg)?;
    let log = run_episode(&r.net, r.flows(), seed, |step, sim| {
        ctl.observe(sim, &mask, step);
        let actions = ctl.control_step(step)?;
        let queues: Vec<f32> = (0..actions.len()).map(|i| sim.reward(i)).collect();
        let line = json!({ "t": sim.time(), "step": step, "actions": actions, "queue_sums": queues });
        writeln!(w, "{line}")?;
        w.flush()?;
        Ok(actions)
    })?;
    drop(w);
    let att = att_of(&log)?;
    fs::write(rd.file("att.json"), serde_json::to_string_pretty(&json!({ "att": finite("att", att)? }))? + "\n")?;
    write_log(&log, &rd.file("episode.jsonl"))?;
    let mut rep = Report::default();
    rep.metric("att", att)?;
    rep.emit(&rd.path)?;
    rd.finish()
}

pub fn eval(out: Option<&Path>, src: &Sources, episodes: &[PathBuf], checkpoint: Option<PathBuf>, rate: Option<f64>) -> Result<PathBuf> {
    if !episodes.is_empty() {
        let inputs: Vec<(&str, &Path)> = episodes.iter().map(|p| ("episode", p.as_path())).collect();
        let names: Vec<String> = episodes.iter().map(|p| p.display().to_string()).collect();
        let rd = RunDir::create(out, "eval", json!({ "episodes": names }), 0, &inputs)?;
        let mut rep = Report::default();
        for p in episodes {
            let log = EpisodeLog::read_from(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))?;
            let att = att_of(&log)?;
            rep.line(vec![("episode", json!(p.display().to_string())), ("att", finite("att", att)?)]);
            rep.row(format!("ATT {}", p.display()), format!("{att:.3}"));
        }
        rep.emit(&rd.path)?;
        return rd.finish();
    }
    let checkpoint = checkpoint.ok_or_else(|| anyhow!("eval needs --episode or --checkpoint"))?;
    let r = Resolved::new(src, true)?;
    let spec = r.spec()?.clone();
    let rate = rate.unwrap_or(spec.mask.rates[0]);
    let model = load_model(&checkpoint, &r.net)?;
    let mut inputs = r.inputs();
    inputs.push(("checkpoint", &checkpoint));
    let icfg = spec.inference_config();
    let config = json!({ "inference": icfg, "rate": rate, "eval_seeds": spec.eval_seeds });
    let rd = RunDir::create(out, "eval", config, spec.eval_seeds[0], &inputs)?;
    let setting = eval_setting(&r, rate)?;
    let ours = evaluate_model(&setting, &model, &icfg, &spec.eval_seeds)?;
    let fixed = evaluate_baseline(&setting, BehaviorPolicy::FixedTime, &spec.eval_seeds)?;
    let random = evaluate_baseline(&setting, BehaviorPolicy::Random, &spec.eval_seeds)?;
    let mut rep = Report::default();
    for (k, seed) in spec.eval_seeds.iter().enumerate() {
        rep.line(vec![
            ("seed", json!(seed)),
            ("att_model", finite("att_model", ours[k])?),
            ("att_fixed_time", finite("att_fixed_time", fixed[k])?),
            ("att_random", finite("att_random", random[k])?),
        ]);
    }
    let (m, f, rn) = (median(&ours).unwrap(), median(&fixed).unwrap(), median(&random).unwrap());
    rep.metric("att_median.model", m)?;
    rep.metric("att_median.fixed_time", f)?;
    rep.metric("att_median.random", rn)?;
    rep.metric("ratio_to_random", m / rn)?;
    rep.metric("ratio_to_fixed_time", m / f)?;
    rep.emit(&rd.path)?;
    rd.finish()
}

pub fn matrix(out: Option<&Path>, src: &Sources, dataset: Option<PathBuf>, rates: Option<Vec<f64>>) -> Result<PathBuf> {
    let r = Resolved::new(src, true)?;
    let spec = r.spec()?.clone();
    let ds_path = r.dataset_path(dataset)?;
    let ds = load_dataset(&ds_path)?;
    let rates = rates.unwrap_or_else(|| spec.mask.rates.clone());
    let cfg = spec.train_config();
    let icfg = spec.inference_config();
    let mut inputs = r.inputs();
    inputs.push(("dataset", &ds_path));
    let config = json!({ "train": cfg, "inference": icfg, "rates": rates, "mask": spec.mask, "eval_seeds": spec.eval_seeds });
    let rd = RunDir::create(out, "matrix", config, cfg.seed, &inputs)?;
    let mut m = GeneralizationMatrix::new(rates.clone(), rates.clone());
    let mut rep = Report::default();
    for (i, &train_rate) in rates.iter().enumerate() {
        let mask = MaskSet::generate(&ds.network, ds.steps(), spec.mask.pattern, train_rate, spec.mask.seed, spec.mask.km_layout)?;
        let dir = rd.file(&format!("models/rate_{:03}", (train_rate * 100.0).round() as u32));
        eprintln!("training at rate {train_rate}");
        let (model, _) = train_model(&cfg, &ds, &mask, &dir)?;
        for (j, &test_rate) in rates.iter().enumerate() {
            let atts = evaluate_model(&eval_setting(&r, test_rate)?, &model, &icfg, &spec.eval_seeds)?;
            let att = median(&atts).ok_or_else(|| anyhow!("no evaluation seed"))?;
            m.set(i, j, att)?;
        }
    }
    let pr = m.pr_grid()?;
    for (i, tr) in rates.iter().enumerate() {
        for (j, te) in rates.iter().enumerate() {
            let cell = |v: Option<f64>, name: &str| v.map_or(Ok(Value::String("absent".into())), |x| finite(name, x));
            rep.line(vec![
                ("train_rate", json!(tr)),
                ("test_rate", json!(te)),
                ("att", cell(m.att[i][j], "att")?),
                ("p_r", cell(pr[i][j], "p_r")?),
            ]);
        }
    }
    fs::write(rd.file("matrix.json"), serde_json::to_string_pretty(&json!({ "matrix": m, "p_r": pr }))? + "\n")?;
    rep.note(m.summary_table()?);
    rep.emit(&rd.path)?;
    rd.finish()
}

pub fn sweep_steps(out: Option<&Path>, src: &Sources, checkpoint: &Path, plans: Option<Vec<usize>>, rate: Option<f64>) -> Result<PathBuf> {
    let r = Resolved::new(src, true)?;
    let spec = r.spec()?.clone();
    let plans = plans.unwrap_or_else(|| SWEEP_PLANS.to_vec());
    let rate = rate.unwrap_or(spec.mask.rates[0]);
    let model = load_model(checkpoint, &r.net)?;
    let icfg: InferenceConfig = spec.inference_config();
    let mut inputs = r.inputs();
    inputs.push(("checkpoint", checkpoint));
    let config = json!({ "inference": icfg, "plans": plans, "rate": rate, "eval_seeds": spec.eval_seeds });
    let rd = RunDir::create(out, "sweep-steps", config, spec.eval_seeds[0], &inputs)?;
    let rows = run_sweep(&eval_setting(&r, rate)?, &model, &icfg, &plans, &spec.eval_seeds)?;
    let mut rep = Report::default();
    let reference = rows[0].median;
    for row in &rows {
        rep.line(vec![
            ("sampling_steps", json!(row.sampling_steps)),
            ("att_median", finite("att_median", row.median)?),
            ("drift", finite("drift", row.median / reference - 1.0)?),
        ]);
        rep.row(
            format!("{} steps", row.sampling_steps),
            format!("{:.3}  ({:+.2}% vs {} steps)", row.median, 100.0 * (row.median / reference - 1.0), rows[0].sampling_steps),
        );
    }
    rep.emit(&rd.path)?;
    rd.finish()
}
