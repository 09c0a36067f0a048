//! Checkpoint files: a JSON manifest plus a sidecar blob of `n` little-endian
//! f64 values in flat-index order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Activation, FlatWeights, NetworkSpec, OutputMode};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "geoward-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_mode: OutputMode,
    pub weight_count: usize,
    pub dataset_fingerprint: String,
    /// Blob filename, relative to the manifest's directory.
    pub blob: String,
}

impl CheckpointManifest {
    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.layer_sizes.clone(), self.hidden_activation, self.output_mode)
    }
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path-stem>.bin` (weights).
pub fn save_checkpoint(
    path: &Path,
    spec: &NetworkSpec,
    w: &FlatWeights,
    dataset_fingerprint: &str,
) -> Result<CheckpointManifest> {
    if w.len() != spec.n_weights() {
        return Err(Error::invalid(format!(
            "weight vector has {} entries, architecture needs {}",
            w.len(),
            spec.n_weights()
        )));
    }
    let blob_path = blob_path_for(path);
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", path.display())))?
        .to_string();

    let mut bytes = Vec::with_capacity(8 * w.len());
    for &v in w.as_slice() {
        bytes.write_f64::<LittleEndian>(v)?;
    }
    fs::write(&blob_path, bytes)?;

    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        layer_sizes: spec.layer_sizes().to_vec(),
        hidden_activation: spec.hidden_activation(),
        output_mode: spec.output_mode(),
        weight_count: w.len(),
        dataset_fingerprint: dataset_fingerprint.to_string(),
        blob: blob_name,
    };
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, FlatWeights, CheckpointManifest)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("checkpoint manifest {}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format '{}'",
            manifest.format
        )));
    }
    let spec = manifest.spec()?;
    if spec.n_weights() != manifest.weight_count {
        return Err(Error::Format(format!(
            "manifest weight_count {} disagrees with architecture ({} weights)",
            manifest.weight_count,
            spec.n_weights()
        )));
    }
    let blob_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.blob);
    let mut raw = Vec::new();
    fs::File::open(&blob_path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::InvalidInput(format!("cannot read weight blob {}: {e}", blob_path.display())))?;
    if raw.len() != 8 * manifest.weight_count {
        return Err(Error::Format(format!(
            "weight blob {} has {} bytes, expected {}",
            blob_path.display(),
            raw.len(),
            8 * manifest.weight_count
        )));
    }
    let mut cursor = raw.as_slice();
    let mut values = Vec::with_capacity(manifest.weight_count);
    for _ in 0..manifest.weight_count {
        values.push(cursor.read_f64::<LittleEndian>()?);
    }
    Ok((spec, FlatWeights::new(values), manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Relu, OutputMode::Softmax).unwrap();
        let mut w = FlatWeights::init(&spec, 17);
        // awkward values: subnormal, negative zero, extremes
        w.as_mut_slice()[0] = f64::MIN_POSITIVE / 3.0;
        w.as_mut_slice()[1] = -0.0;
        w.as_mut_slice()[2] = f64::MAX;
        let path = dir.path().join("net.json");
        save_checkpoint(&path, &spec, &w, "abc123").unwrap();
        let (spec2, w2, m) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(m.blob, "net.bin");
        assert_eq!(m.dataset_fingerprint, "abc123");
        let a: Vec<u64> = w.as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = w2.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::new(vec![2, 2], Activation::Tanh, OutputMode::Identity).unwrap();
        let path = dir.path().join("c.json");
        save_checkpoint(&path, &spec, &FlatWeights::zeros(6), "x").unwrap();
        fs::write(dir.path().join("c.bin"), [0u8; 7]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
