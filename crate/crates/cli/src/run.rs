//! Run directories: sample files, CSV logs and the closing manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_error, ExperimentConfig};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const CHECKPOINT: &str = "checkpoint";
pub const REPORT: &str = "report.json";
pub const SAMPLES: &str = "samples.csv";

/// A command-line value that replaced one from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub field: String,
    pub file: serde_json::Value,
    #[serde(rename = "override")]
    pub value: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub dsb: String,
    pub energy_protocol: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub versions: Versions,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub overrides: Vec<Override>,
    pub off_policy: bool,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct RunDir {
    root: PathBuf,
    started: u64,
}

impl RunDir {
    /// Creates `root` and snapshots the resolved config into it.
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        let run = Self { root: root.to_path_buf(), started: unix_now() };
        fs::write(run.path(CONFIG), cfg.to_toml()?)?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Hashes every produced file and writes the manifest via a rename.
    pub fn finish(self, command: &str, cfg: &ExperimentConfig, overrides: Vec<Override>, off_policy: bool) -> Result<Manifest> {
        let mut paths = Vec::new();
        collect_files(&self.root, &mut paths)?;
        paths.retain(|p| p.file_name().is_some_and(|n| n != MANIFEST && n != "manifest.json.tmp"));
        paths.sort();
        let files = paths
            .iter()
            .map(|p| {
                let bytes = fs::read(p)?;
                let rel = p.strip_prefix(&self.root).expect("collected under root");
                Ok(FileEntry {
                    path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                    bytes: bytes.len() as u64,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command: command.into(),
            config: cfg.clone(),
            versions: Versions {
                dsb: env!("CARGO_PKG_VERSION").into(),
                energy_protocol: dsb_core::energy_rpc::PROTOCOL_VERSION,
            },
            started_unix: self.started,
            finished_unix: unix_now(),
            overrides,
            off_policy,
            files,
        };
        let tmp = self.root.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, self.root.join(MANIFEST))?;
        Ok(manifest)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn write_states(path: &Path, states: &[Vec<u8>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for x in states {
        let line: Vec<String> = x.iter().map(u8::to_string).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_states(path: &Path) -> Result<Vec<Vec<u8>>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let x = line
            .split(',')
            .map(|s| s.trim().parse::<u8>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| config_error(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(x);
    }
    Ok(out)
}

pub fn write_points(path: &Path, points: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dims = points.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..dims).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let line: Vec<String> = p.iter().map(f64::to_string).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}
