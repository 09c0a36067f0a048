//! Run manifests: everything needed to repeat a command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use geoward::{Error, Result};

pub const MANIFEST_FORMAT: &str = "geoward-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub role: String,
    pub description: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    /// Fully resolved arguments of the command.
    pub args: serde_json::Value,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub inputs: Vec<InputHash>,
    pub plans: Vec<PlanRecord>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub threads: usize,
    pub timestamp: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects what a command touched while it runs.
#[derive(Debug, Default)]
pub struct Recorder {
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub plans: Vec<PlanRecord>,
    pub outputs: Vec<String>,
}

impl Recorder {
    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        let p = path.into();
        if !self.inputs.contains(&p) {
            self.inputs.push(p);
        }
    }

    pub fn plan(&mut self, role: &str, plan: &geoward::damage::DamagePlan) {
        self.plans.push(PlanRecord {
            role: role.to_string(),
            description: plan.description().to_string(),
            indices: plan.indices().to_vec(),
        });
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn finish(self, command: &str, args: serde_json::Value, threads: usize) -> Result<RunManifest> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.to_string_lossy().into_owned(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            command: command.to_string(),
            args,
            seeds: self.seeds,
            inputs,
            plans: self.plans,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let f = fs::File::create(dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("run manifest {}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("unsupported run manifest format '{}'", m.format)));
        }
        Ok(m)
    }

    /// Fails if any recorded input no longer hashes to its recorded value.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = sha256_file(Path::new(&input.path))?;
            if now != input.sha256 {
                return Err(Error::InvalidInput(format!(
                    "input {} changed since the recorded run (sha256 {} != {})",
                    input.path, now, input.sha256
                )));
            }
        }
        Ok(())
    }
}
