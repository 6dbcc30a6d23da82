//! Run directories: every command writes its outputs into one directory
//! together with a manifest of the resolved configuration and the hashes of
//! everything it read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const RUN_ROOT_ENV: &str = "DIFFLIGHT_RUN_ROOT";
pub const MANIFEST: &str = "run_manifest.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: Value,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, base, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST) {
            let rel = p.strip_prefix(base).expect("walk stays below base");
            let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// Per-file hashes of a file or directory tree (run manifests excluded).
pub fn hash_tree(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        walk(path, path, &mut out)?;
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        out.insert(name, sha256_hex(&bytes));
    }
    Ok(out)
}

pub fn digest(path: &Path) -> Result<String> {
    let tree = hash_tree(path)?;
    Ok(sha256_hex(serde_json::to_string(&tree)?.as_bytes()))
}

/// Fails when `path` was produced by a run whose manifest records different
/// content for it.
pub fn verify_artifact(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("referenced artifact {} does not exist", path.display());
    }
    let path = fs::canonicalize(path)?;
    let start = if path.is_dir() { Some(path.as_path()) } else { path.parent() };
    let Some(run) = start.into_iter().flat_map(Path::ancestors).take(4).find(|d| d.join(MANIFEST).is_file()) else {
        return Ok(());
    };
    let mpath = run.join(MANIFEST);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)
        .with_context(|| format!("parsing {}", mpath.display()))?;
    let rel = path.strip_prefix(run).expect("ancestor");
    let prefix = rel.to_string_lossy().replace('\\', "/");
    let under = |k: &str| prefix.is_empty() || k == prefix || k.starts_with(&format!("{prefix}/"));
    let actual: BTreeMap<String, String> = if path.is_dir() {
        hash_tree(&path)?
            .into_iter()
            .map(|(k, v)| (if prefix.is_empty() { k } else { format!("{prefix}/{k}") }, v))
            .collect()
    } else {
        BTreeMap::from([(prefix.clone(), sha256_hex(&fs::read(&path)?))])
    };
    for (k, want) in manifest.outputs.iter().filter(|(k, _)| under(k)) {
        match actual.get(k) {
            Some(got) if got == want => {}
            Some(_) => bail!("stale artifact: {} no longer matches the hash in {}", run.join(k).display(), mpath.display()),
            None => bail!("stale artifact: {} listed in {} is missing", run.join(k).display(), mpath.display()),
        }
    }
    Ok(())
}

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config: Value,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
}

impl RunDir {
    /// Verifies and hashes `inputs`, then opens `out` or a directory under
    /// the run root named after the command and configuration hash.
    pub fn create(out: Option<&Path>, command: &str, config: Value, seed: u64, inputs: &[(&str, &Path)]) -> Result<Self> {
        let mut hashes = BTreeMap::new();
        for (label, p) in inputs {
            verify_artifact(p)?;
            hashes.insert((*label).to_string(), digest(p)?);
        }
        let keyed = serde_json::json!({ "command": command, "config": config, "inputs": hashes, "seed": seed });
        let config_hash = sha256_hex(serde_json::to_string(&keyed)?.as_bytes());
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => run_root().join(format!("{command}-{}", &config_hash[..12])),
        };
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let _ = fs::remove_file(path.join(MANIFEST));
        Ok(Self {
            path,
            command: command.to_string(),
            config,
            config_hash,
            seed,
            inputs: hashes,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            command: self.command,
            config: self.config,
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs: hash_tree(&self.path)?,
        };
        fs::write(self.path.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(self.path)
    }
}
