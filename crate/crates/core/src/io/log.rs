//! Append-only JSON-lines logs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::config::ExperimentConfig;
use crate::train::EpochRecord;

/// One line of a training run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunEvent {
    /// Written once when a run starts: the resolved config and its hash.
    Start {
        config_hash: String,
        config: ExperimentConfig,
    },
    /// A run continued from a checkpoint taken after `epoch` epochs.
    Resume {
        epoch: usize,
        checkpoint: PathBuf,
    },
    Epoch(EpochRecord),
}

impl RunEvent {
    /// Epoch records of a log, in order.
    pub fn epochs(events: &[RunEvent]) -> Vec<&EpochRecord> {
        events
            .iter()
            .filter_map(|e| match e {
                RunEvent::Epoch(r) => Some(r),
                _ => None,
            })
            .collect()
    }
}

pub struct JsonlWriter {
    path: PathBuf,
    file: File,
}

impl JsonlWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Writes one record and flushes it.
    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)
            .map_err(|e| Error::Invalid(format!("log record: {e}")))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Every record of a JSON-lines file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut w = JsonlWriter::append(&p).unwrap();
        w.write(&(1, "a")).unwrap();
        drop(w);
        JsonlWriter::append(&p).unwrap().write(&(2, "b")).unwrap();
        let back: Vec<(i32, String)> = read_jsonl(&p).unwrap();
        assert_eq!(back, vec![(1, "a".to_string()), (2, "b".to_string())]);
    }

    #[test]
    fn run_events_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.jsonl");
        let cfg = ExperimentConfig::from_toml("").unwrap();
        let events = vec![
            RunEvent::Start {
                config_hash: cfg.hash(),
                config: cfg,
            },
            RunEvent::Resume {
                epoch: 3,
                checkpoint: "ck/epoch-0003.ckpt".into(),
            },
        ];
        let mut w = JsonlWriter::append(&p).unwrap();
        for e in &events {
            w.write(e).unwrap();
        }
        assert_eq!(read_jsonl::<RunEvent>(&p).unwrap(), events);
    }
}
