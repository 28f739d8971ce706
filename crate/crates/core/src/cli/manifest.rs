use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{FitRecord, Timings};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one run. Everything except `timings_ms` is a function of
/// the config and inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub skipped: Vec<String>,
    pub converged: BTreeMap<String, bool>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub(crate) fn new(
        command: &str,
        cfg: &RunConfig,
        inputs: Vec<FileDigest>,
        written: &[(String, String)],
        skipped: Vec<String>,
        fits: &[FitRecord],
        timings: Timings,
    ) -> RunManifest {
        let mut outputs: Vec<FileDigest> = written
            .iter()
            .map(|(path, sha256)| FileDigest { path: path.clone(), sha256: sha256.clone() })
            .collect();
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        RunManifest {
            command: command.to_string(),
            config_sha256: cfg.digest(),
            seed: cfg.seed,
            versions: BTreeMap::from([
                ("mrp".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("format".to_string(), "1".to_string()),
            ]),
            inputs,
            outputs,
            skipped,
            converged: fits.iter().map(|f| (f.kind.to_string(), f.map.converged)).collect(),
            timings_ms: timings.0.into_iter().collect(),
        }
    }
}
