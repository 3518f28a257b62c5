use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use agentdiff::data::{read_json, write_json};
use agentdiff::pipeline::{file_sha256, list_files};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Path to sha256.
    pub inputs: BTreeMap<String, String>,
    pub checkpoints: BTreeMap<String, String>,
    pub tool_versions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub analyses: Vec<Analysis>,
}

/// A later step that wrote into the same directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Analysis {
    pub command: Vec<String>,
    pub outputs: Vec<String>,
    pub finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn outputs(dir: &Path) -> agentdiff::Result<Vec<String>> {
    Ok(list_files(dir)?
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .filter(|n| n != MANIFEST_FILE)
        .collect())
}

impl RunManifest {
    pub fn start(argv: &[String], config: &impl Serialize) -> agentdiff::Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = Sha256::digest(serde_json::to_vec(&config)?)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let tool_versions = BTreeMap::from([
            ("agentdiff".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format".to_string(), agentdiff::model::checkpoint::FORMAT.to_string()),
        ]);
        Ok(RunManifest {
            command: argv.to_vec(),
            config,
            config_hash,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            tool_versions,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
            analyses: Vec::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> agentdiff::Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Lists the directory's files and writes the manifest into it.
    pub fn finish(mut self, dir: &Path) -> agentdiff::Result<()> {
        self.outputs = outputs(dir)?;
        self.finished_unix = now();
        write_json(&dir.join(MANIFEST_FILE), &self)
    }
}

/// Appends an analysis entry to the directory's manifest.
pub fn record_analysis(dir: &Path, argv: &[String]) -> agentdiff::Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut m: RunManifest = if path.exists() {
        read_json(&path)?
    } else {
        RunManifest::start(argv, &serde_json::Value::Null)?
    };
    m.analyses.push(Analysis {
        command: argv.to_vec(),
        outputs: outputs(dir)?,
        finished_unix: now(),
    });
    m.outputs = outputs(dir)?;
    write_json(&path, &m)
}
