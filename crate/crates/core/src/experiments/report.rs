use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestProvenance {
    pub dataset: String,
    pub queries: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downstream_queries: Option<String>,
    pub scorer: String,
    pub features: String,
}

/// `manifest.json`: configuration, seed, input hashes, and a digest of every
/// report file written into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub provenance: ManifestProvenance,
    /// Relative path to sha256 of the file contents.
    pub outputs: BTreeMap<String, String>,
}

fn io_error(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, content: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

/// Writes `files` (relative path, serialized JSON) under the configured
/// output directory and merges their digests into `manifest.json`.
pub fn write_report(
    config: &ExperimentConfig,
    provenance: ManifestProvenance,
    files: &[(String, String)],
) -> Result<Manifest, ExperimentError> {
    let out = config.output_path();
    let manifest_path = out.join("manifest.json");
    let mut outputs = std::fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|s| serde_json::from_str::<Manifest>(&s).ok())
        .filter(|m| m.provenance == provenance && m.seed == config.seed)
        .map(|m| m.outputs)
        .unwrap_or_default();
    for (rel, content) in files {
        write_file(&out.join(rel), content)?;
        outputs.insert(rel.clone(), crate::hash::digest_str(content));
    }
    let manifest = Manifest {
        config: config.clone(),
        seed: config.seed,
        provenance,
        outputs,
    };
    write_file(&manifest_path, &to_json(&manifest))?;
    Ok(manifest)
}
