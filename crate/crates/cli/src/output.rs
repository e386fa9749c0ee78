//! Run directories, manifests, and CSV emission.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use brdsgd::engine::{write_trace_csv, RunTrace, StabilityTrace};
use brdsgd::Real;

/// FNV-1a over the raw config bytes; 16 hex digits key the run directory.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Output root: `--out` flag, else `BRDSGD_OUT`, else `./runs`.
pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("BRDSGD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// One directory per run, keyed by command, config hash, and seed.
    pub fn create(root: &Path, command: &str, hash: &str, seed: u64) -> Result<Self> {
        let path = root.join(format!("{command}-{hash}-s{seed}"));
        fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn write_manifest(&self, lines: &[(&str, String)]) -> Result<()> {
        let mut text = String::new();
        for (key, value) in lines {
            text.push_str(&format!("{key} = {value}\n"));
        }
        fs::write(self.path.join("manifest.txt"), text).context("writing manifest")?;
        Ok(())
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path.join(name), text).with_context(|| format!("writing {name}"))?;
        Ok(())
    }

    pub fn write_trace(
        &self,
        name: &str,
        trace: &RunTrace<Real>,
        stability: Option<&StabilityTrace<Real>>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, trace, stability)?;
        fs::write(self.path.join(name), buf).with_context(|| format!("writing {name}"))?;
        Ok(())
    }
}

/// One `value = key` summary line for the final trace row.
pub fn trace_summary(trace: &RunTrace<Real>) -> String {
    match trace.rows.last() {
        Some(row) => format!(
            "k={} train_loss={} test_loss={} acc={} H={}",
            row.k, row.train_loss, row.test_loss, row.test_accuracy, row.h
        ),
        None => "empty trace".to_string(),
    }
}
