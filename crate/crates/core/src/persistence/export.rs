//! Dataset export: a directory of newline-delimited JSON files plus a
//! manifest.
//!
//! | file | one row per |
//! |---|---|
//! | `sessions.ndjson` | session start |
//! | `steps.ndjson` | environment step |
//! | `feedback.ndjson` | submitted feedback form |
//! | `chat.ndjson` | chat message |
//! | `manifest.json` | schema version and counts |
//!
//! Rows are grouped by session in order of first appearance, and keep log
//! order within a session. Import followed by export reproduces the same
//! bytes.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::record::{
    ChatRecord, FeedbackRecord, Record, SessionId, SessionStarted, StepRecord, FLAG_CLOCK_ANOMALY,
};

pub const EXPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRow {
    pub session: SessionId,
    pub stage_index: u32,
    pub stage_id: String,
    pub episode: u32,
    pub step: u32,
    pub frame_id: u64,
    pub action: u8,
    pub reward: f64,
    pub done: bool,
    pub t1: f64,
    pub t2: f64,
    /// `t2 - t1`; null when the clocks were anomalous.
    pub response_time_ms: Option<f64>,
    pub clock_anomaly: bool,
    pub server_ms: f64,
    pub flags: u8,
    /// Hex of the canonical pre-step state encoding.
    pub pre_state: String,
}

impl From<&StepRecord> for StepRow {
    fn from(r: &StepRecord) -> Self {
        StepRow {
            session: r.session,
            stage_index: r.stage_index,
            stage_id: r.stage_id.clone(),
            episode: r.episode,
            step: r.step,
            frame_id: r.frame_id,
            action: r.action,
            reward: r.reward,
            done: r.done,
            t1: r.t1,
            t2: r.t2,
            response_time_ms: r.response_time_ms(),
            clock_anomaly: r.flags & FLAG_CLOCK_ANOMALY != 0,
            server_ms: r.server_ms,
            flags: r.flags,
            pre_state: hex::encode(&r.pre_state),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub sessions: u64,
    pub steps: u64,
    pub feedback: u64,
    pub chat: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment_id: String,
    pub counts: Counts,
    /// Steps + feedback + chat rows.
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub experiment_id: String,
    pub sessions: Vec<SessionStarted>,
    pub steps: Vec<StepRow>,
    pub feedback: Vec<FeedbackRecord>,
    pub chat: Vec<ChatRecord>,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{file}:{line}: {reason}")]
    Row {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Dataset {
    /// Collects the rows of every session started under `experiment_id`.
    pub fn from_records(experiment_id: &str, records: &[Record]) -> Self {
        let mut order: HashMap<SessionId, usize> = HashMap::new();
        let mut buckets: Vec<Vec<&Record>> = Vec::new();
        for r in records {
            if let Record::SessionStarted(s) = r {
                if s.experiment_id == experiment_id && !order.contains_key(&s.session) {
                    order.insert(s.session, buckets.len());
                    buckets.push(Vec::new());
                }
            }
            if let Some(&i) = order.get(&r.session()) {
                buckets[i].push(r);
            }
        }
        let mut ds = Dataset {
            experiment_id: experiment_id.to_string(),
            ..Dataset::default()
        };
        for r in buckets.into_iter().flatten() {
            match r {
                Record::SessionStarted(s) => ds.sessions.push(s.clone()),
                Record::Step(s) => ds.steps.push(StepRow::from(s)),
                Record::Feedback(f) => ds.feedback.push(f.clone()),
                Record::Chat(c) => ds.chat.push(c.clone()),
                _ => {}
            }
        }
        ds
    }

    pub fn manifest(&self) -> Manifest {
        let counts = Counts {
            sessions: self.sessions.len() as u64,
            steps: self.steps.len() as u64,
            feedback: self.feedback.len() as u64,
            chat: self.chat.len() as u64,
        };
        Manifest {
            schema_version: EXPORT_SCHEMA_VERSION,
            experiment_id: self.experiment_id.clone(),
            rows: counts.steps + counts.feedback + counts.chat,
            counts,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<Manifest, ExportError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_rows(&dir.join("sessions.ndjson"), &self.sessions)?;
        write_rows(&dir.join("steps.ndjson"), &self.steps)?;
        write_rows(&dir.join("feedback.ndjson"), &self.feedback)?;
        write_rows(&dir.join("chat.ndjson"), &self.chat)?;
        let manifest = self.manifest();
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Self, ExportError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ExportError::Manifest(e.to_string()))?;
        if manifest.schema_version != EXPORT_SCHEMA_VERSION {
            return Err(ExportError::Manifest(format!(
                "schema version {} is not supported (expected {EXPORT_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let ds = Dataset {
            experiment_id: manifest.experiment_id.clone(),
            sessions: read_rows(&dir.join("sessions.ndjson"))?,
            steps: read_rows(&dir.join("steps.ndjson"))?,
            feedback: read_rows(&dir.join("feedback.ndjson"))?,
            chat: read_rows(&dir.join("chat.ndjson"))?,
        };
        if ds.manifest() != manifest {
            return Err(ExportError::Manifest(format!(
                "counts {:?} do not match files {:?}",
                manifest.counts,
                ds.manifest().counts
            )));
        }
        Ok(ds)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExportError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = io::BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| ExportError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ExportError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| ExportError::Row {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Reads a record log and exports one experiment's rows to `out`.
pub fn export_log(log: &Path, experiment_id: &str, out: &Path) -> Result<Manifest, ExportError> {
    let scan = super::log::read_log(log).map_err(io_err(log))?;
    if let Some(c) = &scan.corruption {
        tracing::warn!(offset = c.offset, reason = %c.reason, "export stops at unreadable log tail");
    }
    Dataset::from_records(experiment_id, &scan.records).write(out)
}
