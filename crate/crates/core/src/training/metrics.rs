use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    /// Replacement rate in force at `step`; absent outside compression.
    pub p_d: Option<f64>,
    pub lr_effective: f64,
    pub wall_ms: u64,
}

/// Append-only record stream; steps strictly increase within each split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    records: Vec<MetricRecord>,
}

impl RunMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self
            .records
            .iter()
            .rev()
            .find(|r| r.split == record.split && r.stage == record.stage)
        {
            if record.step <= last.step {
                return Err(Error::State(format!(
                    "{} step {} not after {}",
                    record.split, record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a MetricRecord> + 'a {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn extend(&mut self, other: RunMetrics) -> Result<()> {
        for r in other.records {
            self.push(r)?;
        }
        Ok(())
    }

    /// Same records with wall-clock zeroed, for determinism comparisons.
    pub fn without_wall_clock(&self) -> RunMetrics {
        let records = self
            .records
            .iter()
            .map(|r| MetricRecord {
                wall_ms: 0,
                ..r.clone()
            })
            .collect();
        RunMetrics { records }
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record serializes") + "\n")
            .collect()
    }

    /// Appends the JSON-lines form to `path`.
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut m = RunMetrics::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: MetricRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("bad metrics line: {e}")))?;
            m.push(r)?;
        }
        Ok(m)
    }
}
