//! On-disk formats: chain records (JSON lines), manifest, hashing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hamgp::basis::KernelHyperparams;
use hamgp::hamiltonian::GpParams;
use hamgp::learn::{ChainSample, IterationDiagnostics, RunSummary};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const CHAIN_FILE: &str = "chain.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const DATASET_FILE: &str = "dataset.csv";
pub const RUN_LOG_FILE: &str = "run.log";
pub const FLOWMAP_FILE: &str = "flowmap.json";
pub const FLOWMAP_CELLS_FILE: &str = "flowmap_cells.csv";
pub const PREDICTION_FILE: &str = "prediction.csv";
pub const PREDICTION_REPORT_FILE: &str = "prediction.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// One line of the chain file. The latent trajectory is written separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iteration: usize,
    pub params: GpParams,
    pub kernel: KernelHyperparams,
    pub structural: BTreeMap<String, f64>,
    pub kernel_accepted: bool,
    pub structural_accepted: BTreeMap<String, bool>,
    pub joint_accepted: BTreeMap<String, bool>,
    pub diagnostics: IterationDiagnostics,
}

impl From<&ChainSample> for ChainRecord {
    fn from(s: &ChainSample) -> Self {
        Self {
            iteration: s.iteration,
            params: s.params.clone(),
            kernel: s.kernel,
            structural: s.structural.clone(),
            kernel_accepted: s.kernel_accepted,
            structural_accepted: s.structural_accepted.clone(),
            joint_accepted: s.joint_accepted.clone(),
            diagnostics: s.diagnostics.clone(),
        }
    }
}

pub fn read_chain(path: &Path) -> Result<Vec<ChainRecord>> {
    let file = File::open(path).with_context(|| format!("opening chain {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Records after burn-in.
pub fn retained(chain: &[ChainRecord], burn_in: usize) -> Vec<&ChainRecord> {
    chain.iter().filter(|r| r.iteration > burn_in).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    /// SHA-256 of the pretty-printed effective config.
    pub config_sha256: String,
    pub chain_seed: u64,
    pub data_seed: u64,
    pub versions: BTreeMap<String, String>,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    /// SHA-256 of each emitted file.
    pub files: BTreeMap<String, String>,
    /// How evaluation builds the posterior mean model.
    pub mean_model: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub const MEAN_MODEL: &str =
    "arithmetic mean of basis weights and of each structural hyperparameter over records with iteration > burn_in";

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        (
            "hamgp-cli".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        ),
        ("format".to_string(), "1".to_string()),
    ])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Resolves the config for a chain: an explicit file wins, otherwise the
/// manifest written next to the chain.
pub fn config_for_chain(explicit: Option<&Path>, chain: &Path) -> Result<ExperimentConfig> {
    if let Some(p) = explicit {
        return ExperimentConfig::load(p);
    }
    let manifest = sibling(chain, MANIFEST_FILE);
    if !manifest.exists() {
        bail!(
            "no config given and no {} next to {}",
            MANIFEST_FILE,
            chain.display()
        );
    }
    Ok(Manifest::load(&manifest)?.config)
}

pub fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).join(name)
}
