//! Run manifests: reproducibility metadata attached to every pipeline stage.
//!
//! A manifest records the stage, the hash of its configuration, the seeds in
//! play, digests of every input file, and the list of outputs produced. Two
//! runs with identical manifest inputs produce identical outputs, so the
//! manifest deliberately carries no wall-clock timestamps — it is itself part
//! of the byte-reproducible artifact set.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Library version that produced the artifacts.
    pub version: String,
    /// Pipeline stage (`match`, `estimate`, ...).
    pub stage: String,
    /// SHA-256 of the canonical JSON encoding of the stage configuration.
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    /// Output files written by the stage, relative to the manifest.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new<C: Serialize>(stage: &str, config: &C, seeds: Vec<u64>) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.to_string(),
            config_sha256: hash_config(config),
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records an input file's digest; call before the stage consumes it.
    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self, serde_json::Error> {
        serde_json::from_reader(reader)
    }
}

/// SHA-256 of the canonical (serde-ordered) JSON encoding of a config.
pub fn hash_config<C: Serialize>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex(&Sha256::digest(&json))
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct Cfg {
            a: u32,
            b: String,
        }
        let h1 = hash_config(&Cfg {
            a: 1,
            b: "x".into(),
        });
        let h2 = hash_config(&Cfg {
            a: 1,
            b: "x".into(),
        });
        let h3 = hash_config(&Cfg {
            a: 2,
            b: "x".into(),
        });
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn file_digest_matches_known_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(b"abc")
            .unwrap();
        assert_eq!(
            hash_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips_and_has_no_timestamp() {
        let mut m = RunManifest::new("estimate", &serde_json::json!({"b": 1000}), vec![7, 8]);
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.csv");
        std::fs::File::create(&input)
            .unwrap()
            .write_all(b"unit,period\n")
            .unwrap();
        m.add_input(&input).unwrap();
        m.add_output(Path::new("att.csv"));
        let json = m.to_json_string();
        assert!(!json.to_lowercase().contains("time"));
        let back = RunManifest::from_json_reader(json.as_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn identical_stage_runs_produce_identical_manifests() {
        let a = RunManifest::new("match", &serde_json::json!({"seed": 3}), vec![3]);
        let b = RunManifest::new("match", &serde_json::json!({"seed": 3}), vec![3]);
        assert_eq!(a.to_json_string(), b.to_json_string());
    }
}
