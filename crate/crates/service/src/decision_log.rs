//! Line-delimited JSON log of every filter decision, and its replay.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clickshield_core::{ClickEvent, Decision, EngineConfig, FilterEngine, Registry};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub click: ClickEvent,
    #[serde(flatten)]
    pub decision: Decision,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(
        "corrupt record on line {line} (last good sequence: {}): {reason}",
        .after_seq.map_or_else(|| "none".to_string(), |s| s.to_string())
    )]
    Corrupt {
        line: usize,
        after_seq: Option<u64>,
        reason: String,
    },
    #[error("sequence {seq} on line {line} does not follow {previous}")]
    OutOfSequence { line: usize, seq: u64, previous: u64 },
}

/// Appends records to a log file. Writes are buffered until [`flush`].
///
/// [`flush`]: DecisionLogWriter::flush
pub struct DecisionLogWriter {
    out: BufWriter<File>,
}

impl DecisionLogWriter {
    /// Opens `path` for appending. A non-empty existing log is first moved
    /// aside to `<path>.1`, `<path>.2`, ... so each file covers one engine
    /// lifetime and replays cleanly.
    pub fn create(path: &Path) -> io::Result<(Self, Option<PathBuf>)> {
        let rotated = match std::fs::metadata(path) {
            Ok(meta) if meta.len() > 0 => {
                let target = (1..)
                    .map(|n| {
                        let mut name = path.as_os_str().to_owned();
                        name.push(format!(".{n}"));
                        PathBuf::from(name)
                    })
                    .find(|p| !p.exists())
                    .expect("unbounded suffix search");
                std::fs::rename(path, &target)?;
                Some(target)
            }
            _ => None,
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Self {
                out: BufWriter::new(file),
            },
            rotated,
        ))
    }

    pub fn append_line(&mut self, line: &str) -> io::Result<()> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")
    }

    pub fn append(&mut self, record: &DecisionRecord) -> io::Result<()> {
        let line = serde_json::to_string(record).map_err(io::Error::other)?;
        self.append_line(&line)
    }

    /// Pushes buffered records to the OS and syncs file data.
    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

/// Reads a whole log, checking that sequence numbers strictly increase.
pub fn read_log(path: &Path) -> Result<Vec<DecisionRecord>, LogError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records: Vec<DecisionRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let previous = records.last().map(|r| r.seq);
        let record: DecisionRecord = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
            line: line_no,
            after_seq: previous,
            reason: e.to_string(),
        })?;
        if let Some(prev) = previous {
            if record.seq <= prev {
                return Err(LogError::OutOfSequence {
                    line: line_no,
                    seq: record.seq,
                    previous: prev,
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub seq: u64,
    pub click: ClickEvent,
    pub recorded: Decision,
    /// `None` when the replaying engine rejected the click outright.
    pub replayed: Option<Decision>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub records: usize,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Feeds recorded clicks through a fresh engine and stops at the first
/// decision that differs from the recorded one.
pub fn replay_records(records: &[DecisionRecord], config: EngineConfig, registry: Arc<Registry>) -> ReplayReport {
    let mut engine = FilterEngine::new(config, registry);
    for (i, record) in records.iter().enumerate() {
        let (replayed, error) = match engine.handle_click(&record.click) {
            Ok(d) => (Some(d), None),
            Err(e) => (None, Some(e.to_string())),
        };
        if replayed.as_ref() != Some(&record.decision) {
            return ReplayReport {
                records: i + 1,
                divergence: Some(Divergence {
                    seq: record.seq,
                    click: record.click.clone(),
                    recorded: record.decision.clone(),
                    replayed,
                    error,
                }),
            };
        }
    }
    ReplayReport {
        records: records.len(),
        divergence: None,
    }
}

pub fn replay_log(path: &Path, config: EngineConfig, registry: Arc<Registry>) -> Result<ReplayReport, LogError> {
    let records = read_log(path)?;
    Ok(replay_records(&records, config, registry))
}
