//! Append-only annotation ledger, one JSON object per line.
//!
//! Every manual verdict is followed by the auto-annotations it implied, so
//! replaying manual records in order through a fresh [`LabelState`], with a
//! merge at each iteration boundary, rebuilds the live state.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TrackletId;
use crate::labels::{AutoPair, LabelError, LabelState, Verdict};
use crate::metric::PairKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Manual,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub seq: u64,
    pub iteration: u32,
    pub pair: [TrackletId; 2],
    pub verdict: Verdict,
    pub source: Source,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("ledger sequence breaks at line {line}: expected {expected}, found {found}")]
    Sequence { line: usize, expected: u64, found: u64 },
    #[error("replaying record {seq}: {source}")]
    Replay { seq: u64, source: LabelError },
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Where record timestamps come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Clock {
    #[default]
    Wall,
    /// Every record is stamped 0, so simulated runs write identical bytes.
    Zero,
}

/// In-memory ledger, optionally mirrored to a file that is flushed after
/// every manual verdict group.
#[derive(Debug, Default)]
pub struct AnnotationLedger {
    records: Vec<LedgerRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
    clock: Clock,
}

impl AnnotationLedger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Creates or truncates `path`.
    pub fn create(path: &Path) -> Result<Self, LedgerError> {
        let f = File::create(path)?;
        Ok(Self {
            records: Vec::new(),
            file: Some((path.to_path_buf(), BufWriter::new(f))),
            clock: Clock::Wall,
        })
    }

    /// Opens an existing ledger, keeping only records up to and including
    /// `through_iteration`, and rewrites the file to match.
    pub fn resume(path: &Path, through_iteration: u32) -> Result<Self, LedgerError> {
        let mut records = load_ledger(path)?;
        records.retain(|r| r.iteration <= through_iteration);
        let mut ledger = Self::create(path)?;
        for r in &records {
            ledger.write_line(r)?;
        }
        ledger.records = records;
        ledger.flush()?;
        Ok(ledger)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    fn write_line(&mut self, r: &LedgerRecord) -> Result<(), LedgerError> {
        if let Some((_, w)) = &mut self.file {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn push(&mut self, iteration: u32, pair: &PairKey, verdict: Verdict, source: Source, timestamp: u64) -> Result<(), LedgerError> {
        let r = LedgerRecord {
            seq: self.records.len() as u64,
            iteration,
            pair: pair.ids(),
            verdict,
            source,
            timestamp,
        };
        self.write_line(&r)?;
        self.records.push(r);
        Ok(())
    }

    /// Appends a manual verdict and its consequences.
    pub fn record(
        &mut self,
        iteration: u32,
        pair: &PairKey,
        verdict: Verdict,
        auto: &[AutoPair],
    ) -> Result<(), LedgerError> {
        let ts = match self.clock {
            Clock::Wall => now_millis(),
            Clock::Zero => 0,
        };
        self.push(iteration, pair, verdict, Source::Manual, ts)?;
        for a in auto {
            self.push(iteration, &a.pair, a.verdict, Source::Auto, ts)?;
        }
        self.flush()
    }

    pub fn flush(&mut self) -> Result<(), LedgerError> {
        if let Some((_, w)) = &mut self.file {
            w.flush()?;
        }
        Ok(())
    }
}

pub fn read_ledger(reader: impl BufRead) -> Result<Vec<LedgerRecord>, LedgerError> {
    let mut out: Vec<LedgerRecord> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LedgerRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            // a torn final line from an interrupted write
            Err(e) if e.is_eof() => break,
            Err(e) => {
                return Err(LedgerError::Malformed {
                    line: n + 1,
                    message: e.to_string(),
                });
            }
        };
        let expected = out.len() as u64;
        if r.seq != expected {
            return Err(LedgerError::Sequence {
                line: n + 1,
                expected,
                found: r.seq,
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_ledger(path: &Path) -> Result<Vec<LedgerRecord>, LedgerError> {
    read_ledger(BufReader::new(File::open(path)?))
}

/// Rebuilds label state from manual records of iterations `1..=iterations`,
/// merging after each iteration. Auto records are implied and skipped.
pub fn replay(
    state: &mut LabelState,
    records: &[LedgerRecord],
    iterations: u32,
    eps: f64,
    min_pts: usize,
) -> Result<(), LedgerError> {
    let mut pos = 0;
    for t in 1..=iterations {
        while pos < records.len() && records[pos].iteration == t {
            let r = &records[pos];
            pos += 1;
            if r.source == Source::Auto {
                continue;
            }
            let [a, b] = r.pair;
            let pair = state.pair(a, b).map_err(|source| LedgerError::Replay { seq: r.seq, source })?;
            state
                .apply_annotation(&pair, r.verdict)
                .map_err(|source| LedgerError::Replay { seq: r.seq, source })?;
        }
        state.merge_labels(eps, min_pts);
    }
    Ok(())
}
