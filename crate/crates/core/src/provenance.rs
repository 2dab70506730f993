//! Run provenance: parameters, seeds and input digests of every CLI run.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub subcommand: String,
    pub tool_version: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub timestamp_unix: u64,
}

impl RunProvenance {
    pub fn new(subcommand: &str) -> Self {
        RunProvenance {
            subcommand: subcommand.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            params: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.params.insert(key.to_string(), v);
        self
    }

    pub fn seed(&mut self, key: &str, seed: u64) -> &mut Self {
        self.seeds.insert(key.to_string(), seed);
        self
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> Result<&mut Self> {
        let path = path.as_ref();
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    /// The reproducible part, without timestamp or paths, for embedding in
    /// output headers.
    pub fn header_line(&self) -> String {
        let params = serde_json::to_string(&self.params).unwrap_or_default();
        let seeds = serde_json::to_string(&self.seeds).unwrap_or_default();
        let digests: Vec<&str> = self.inputs.iter().map(|d| d.sha256.as_str()).collect();
        format!(
            "{} v{} params={} seeds={} inputs={}",
            self.subcommand,
            self.tool_version,
            params,
            seeds,
            digests.join(",")
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn header_excludes_timestamp() {
        let mut a = RunProvenance::new("filter");
        a.param("pose_max", 20.0).seed("run", 7);
        let mut b = a.clone();
        b.timestamp_unix += 100;
        assert_eq!(a.header_line(), b.header_line());
        assert!(a.header_line().contains("\"pose_max\":20.0"));
    }
}
