//! Training metrics and rollout traces as append-only JSON-lines files.
//!
//! The metrics file is a pure function of `(config, seed)`: identical runs
//! produce byte-identical files. Wall-clock timings are therefore written to
//! a separate sidecar file (`timing.jsonl`) that reproducibility checks
//! ignore.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::LossBreakdown;
use crate::{Error, Result};

/// One per-epoch record in the metrics file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean loss components over the epoch's episodes.
    pub loss: LossBreakdown,
    /// Out-of-bounds penalty split into its (encoder, decoder) sides.
    pub bounds_sides: (f64, f64),
    /// Per-head query similarity, mean over episodes and timesteps.
    pub similarity: Vec<f64>,
    /// File name of the checkpoint written at this epoch, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
    /// Set on the final record of a run that aborted on non-finite loss.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diverged: Option<String>,
}

/// Append-only JSON-lines writer with one flush per record, so a crashed
/// run still leaves every completed epoch on disk.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl MetricsWriter {
    /// Create (truncate) the metrics file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(MetricsWriter {
            out: BufWriter::new(fs::File::create(path)?),
            path: path.to_path_buf(),
        })
    }

    /// Append one record as a single JSON line.
    pub fn append(&mut self, record: &TrainRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }

    /// Path the writer was opened on.
    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Read a whole metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<TrainRecord>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Analysis(format!("{}:{}: bad metrics record: {e}", path.display(), i + 1))
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Analysis(format!(
            "{}: no records",
            path.display()
        )));
    }
    Ok(records)
}

/// One wall-clock entry in the timing sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Wall time of the epoch in milliseconds.
    pub wall_ms: f64,
}

/// Append a timing entry to `timing.jsonl` next to the metrics file.
pub fn append_timing(dir: &Path, rec: &TimingRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("timing.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

/// Attention traces recorded during one rollout, serialized as JSON for the
/// report generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutTrace {
    /// Box slot the rollout ran on.
    pub slot: usize,
    /// `"open_loop"` or `"closed_loop"`.
    pub mode: String,
    /// TD points per step `[T][N_TD][2]` (normalized coordinates).
    pub pt_td: Vec<Vec<[f64; 2]>>,
    /// BU points per step `[T][N_BU][2]`.
    pub pt_bu: Vec<Vec<[f64; 2]>>,
    /// Summed BU attention map per step `[T][g][g]`.
    pub m_bu_sum: Vec<Vec<Vec<f32>>>,
    /// Joint command actually followed per step `[T][D_J]`.
    pub joints: Vec<Vec<f64>>,
    /// Success flags for the rollout (closed loop evaluates the scripted
    /// success criteria against the model-driven trajectory).
    pub attention_success: bool,
    /// Whether the pick itself met the tolerance/lift criteria.
    pub pick_success: bool,
    /// Step at which the rollout aborted on a non-finite prediction.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aborted_at: Option<usize>,
}

impl RolloutTrace {
    /// Save as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Load from JSON.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
