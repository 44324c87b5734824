//! Append-only evaluation ledger, persisted as JSON lines.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluator::EvalRecord;
use crate::space::Config;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LedgerKey {
    pub config: Config,
    pub steps: u64,
    pub seed: u64,
}

impl LedgerKey {
    pub fn of(record: &EvalRecord) -> Self {
        LedgerKey {
            config: record.config.clone(),
            steps: record.steps,
            seed: record.seed,
        }
    }
}

/// At most one record per `(config, steps, seed)`. With a backing file,
/// every new record is written and flushed before `append` returns.
#[derive(Debug, Default)]
pub struct Ledger {
    records: Vec<EvalRecord>,
    index: HashMap<LedgerKey, usize>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a JSON-lines ledger file, loading existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut ledger = if path.exists() {
            Self::load(path)?
        } else {
            Self::default()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        ledger.sink = Some((path.to_path_buf(), BufWriter::new(file)));
        Ok(ledger)
    }

    /// Reads a ledger file without attaching it for writing.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ledger = Self::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: EvalRecord = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
            ledger.insert(record)?;
        }
        Ok(ledger)
    }

    pub fn lookup(&self, key: &LedgerKey) -> Option<&EvalRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    /// Appends a record. Re-appending an identical score is a no-op; a
    /// different score for an existing key is a hard error.
    pub fn append(&mut self, record: EvalRecord) -> Result<()> {
        if !self.insert(record)? {
            return Ok(());
        }
        if let Some((path, sink)) = self.sink.as_mut() {
            let line = serde_json::to_string(self.records.last().expect("just pushed"))
                .map_err(|e| Error::json("ledger record", e))?;
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }

    fn insert(&mut self, record: EvalRecord) -> Result<bool> {
        let key = LedgerKey::of(&record);
        if let Some(&i) = self.index.get(&key) {
            let stored = self.records[i].score;
            if stored.to_bits() != record.score.to_bits() {
                return Err(Error::LedgerConflict {
                    steps: record.steps,
                    seed: record.seed,
                    stored,
                    new: record.score,
                });
            }
            return Ok(false);
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(true)
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records at a given step count, in append order.
    pub fn at_steps(&self, steps: u64) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter(move |r| r.steps == steps)
    }

    /// Most advanced earlier record of `config` (for checkpoint continuation).
    pub fn latest_below(&self, config: &Config, seed: u64, steps: u64) -> Option<&EvalRecord> {
        self.records
            .iter()
            .filter(|r| r.seed == seed && r.steps < steps && &r.config == config)
            .max_by_key(|r| r.steps)
    }
}
