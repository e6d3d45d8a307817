//! Atomic artifact writes and per-stage manifests recording input hashes,
//! parameters, and the seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Write a file atomically: the writer fills a temp file in the target
/// directory which is then renamed over the destination.
pub fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> anyhow::Result<()>,
{
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .with_context(|| format!("cannot create temp file in {}", dir.display()))?;
    write(tmp.path())?;
    tmp.persist(path)
        .with_context(|| format!("cannot move temp file into {}", path.display()))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot hash input {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub parameters: serde_json::Value,
    /// Input path -> sha256, sorted by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

/// Tracks one stage run: inputs to hash, outputs produced, wall time.
pub struct StageRun {
    stage: String,
    seed: u64,
    parameters: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
    items: usize,
}

impl StageRun {
    pub fn new(stage: impl Into<String>, seed: u64, parameters: impl Serialize) -> Self {
        Self {
            stage: stage.into(),
            seed,
            parameters: serde_json::to_value(parameters).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            items: 0,
        }
    }

    pub fn add_input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn add_output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Count per-utterance work items for the timing log.
    pub fn add_items(&mut self, n: usize) {
        self.items += n;
    }

    /// Write the manifest next to the work dir and log wall time, per-item
    /// time, and resident memory.
    pub fn finish(self, work_dir: &Path) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for path in &self.inputs {
            inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        let manifest = Manifest {
            stage: self.stage.clone(),
            seed: self.seed,
            parameters: self.parameters,
            inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let dir = work_dir.join("manifests");
        let path = dir.join(format!("{}.json", self.stage));
        atomic_write(&path, |tmp| {
            let file = std::fs::File::create(tmp)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
            Ok(())
        })?;

        let elapsed = self.started.elapsed().as_secs_f64();
        let per_item = if self.items > 0 {
            format!(
                ", {:.1} ms/utt over {} utterances",
                1000.0 * elapsed / self.items as f64,
                self.items
            )
        } else {
            String::new()
        };
        log::info!(
            "stage {} finished in {:.2} s{}{}",
            self.stage,
            elapsed,
            per_item,
            rss_suffix()
        );
        Ok(())
    }
}

fn rss_suffix() -> String {
    match resident_memory_mb() {
        Some(mb) => format!(", rss {mb:.0} MB"),
        None => String::new(),
    }
}

/// Resident set size in MB (Linux only).
pub fn resident_memory_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmRSS:") {
            let kb: f64 = rest.trim().trim_end_matches(" kB").trim().parse().ok()?;
            return Some(kb / 1024.0);
        }
    }
    None
}
