//! Atomic file writes, the metrics CSV and the run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::finetune::RoundMetrics;

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Column order of metrics.csv.
pub const METRICS_COLUMNS: [&str; 8] = [
    "round",
    "mean_reward",
    "std_reward",
    "grad_steps_cum",
    "scope_start",
    "scope_end",
    "diversity",
    "wallclock_s",
];

/// Column order of diagnostics.csv.
pub const DIAGNOSTICS_COLUMNS: [&str; 4] = ["round", "loss", "clip_fraction", "wallclock_s"];

/// Appends one metrics row per round, flushing after each row.
pub struct MetricsWriter {
    metrics: csv::Writer<BufWriter<File>>,
    diagnostics: csv::Writer<BufWriter<File>>,
    wallclock_in_metrics: bool,
    path: PathBuf,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e)
}

impl MetricsWriter {
    /// Creates `metrics.csv` and `diagnostics.csv` in `dir`.
    pub fn create(dir: impl AsRef<Path>, wallclock_in_metrics: bool) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &[&str]| -> Result<csv::Writer<BufWriter<File>>> {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            w.write_record(header).map_err(|e| csv_err(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(w)
        };
        Ok(Self {
            metrics: open("metrics.csv", &METRICS_COLUMNS)?,
            diagnostics: open("diagnostics.csv", &DIAGNOSTICS_COLUMNS)?,
            wallclock_in_metrics,
            path: dir.join("metrics.csv"),
        })
    }

    pub fn write_row(&mut self, m: &RoundMetrics) -> Result<()> {
        let wall = if self.wallclock_in_metrics {
            m.wallclock_s.to_string()
        } else {
            String::new()
        };
        let row = [
            m.round.to_string(),
            m.mean_reward.to_string(),
            m.std_reward.to_string(),
            m.grad_steps_cum.to_string(),
            m.scope_start.to_string(),
            m.scope_end.to_string(),
            m.diversity.to_string(),
            wall,
        ];
        self.metrics.write_record(&row).map_err(|e| csv_err(&self.path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&self.path, e))?;
        let diag = [
            m.round.to_string(),
            m.loss.to_string(),
            m.clip_fraction.to_string(),
            m.wallclock_s.to_string(),
        ];
        self.diagnostics.write_record(&diag).map_err(|e| csv_err(&self.path, e))?;
        self.diagnostics.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// The documented subset of a metrics.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub grad_steps_cum: u64,
    pub scope_start: f64,
    pub scope_end: f64,
    pub diversity: f64,
}

/// Reads metrics.csv by column name, ignoring any extra columns.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column {name}")))
    };
    let idx: Vec<usize> = METRICS_COLUMNS[..7].iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec[idx[i]]
                .parse()
                .map_err(|_| Error::format(path, format!("bad {} value {:?}", METRICS_COLUMNS[i], &rec[idx[i]])))
        };
        rows.push(MetricsRow {
            round: num(0)? as usize,
            mean_reward: num(1)?,
            std_reward: num(2)?,
            grad_steps_cum: num(3)? as u64,
            scope_start: num(4)?,
            scope_end: num(5)?,
            diversity: num(6)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config: toml::Table,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    /// Command-specific facts, e.g. whether pretraining met its target.
    pub notes: serde_json::Map<String, serde_json::Value>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Every regular file under `dir` except the manifest and temporaries.
pub fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::format(dir, e))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let name = entry.file_name().to_string_lossy();
        if rel == Path::new(MANIFEST_FILE) || name.ends_with(".tmp") {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        files.push(FileEntry {
            path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(files)
}

impl RunManifest {
    /// Fills the inventory from `dir` and writes `dir/manifest.json`
    /// atomically. Call after every other output is complete.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished_at = now();
        self.files = inventory(dir)?;
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::format(dir, e))?;
        write_atomic(dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
