//! Per-command run record: what ran, how long it took, and checksums of
//! every file it wrote.

use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, started: SystemTime) -> Self {
        Self {
            command: command.into(),
            seed,
            started_unix: started.duration_since(UNIX_EPOCH).unwrap_or(Duration::ZERO).as_secs(),
            wall_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn add(&mut self, path: &Path, bytes: &[u8]) {
        self.outputs.push(OutputFile {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
    }

    pub fn finish(&mut self, started: SystemTime) {
        self.wall_seconds = started.elapsed().unwrap_or(Duration::ZERO).as_secs_f64();
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run records serialise");
        s.push('\n');
        s
    }
}
