//! Line-delimited JSON metrics log.
//!
//! One object per line, tagged by `event`:
//!
//! | event        | fields                                                                  |
//! |--------------|-------------------------------------------------------------------------|
//! | `iter`       | `phase`, `iteration`, `seg`, `cont`, `total`, `labeled`, `pseudo`        |
//! | `validation` | `iteration`, `dsc`, `per_structure`, `best`                             |
//! | `refresh`    | `iteration`, `estimation_iteration`, `step`, `stored`, `retained`, `mean_consistency` |
//!
//! `iteration` is the global update counter (phase 2 continues where phase 1 stopped);
//! `estimation_iteration` counts from the start of phase 2. `labeled`/`pseudo` are the
//! numbers of ground-truth and pseudo-labeled slices in the batch.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricRecord {
    Iter {
        phase: u8,
        iteration: u64,
        seg: f64,
        cont: f64,
        total: f64,
        labeled: usize,
        pseudo: usize,
    },
    Validation {
        iteration: u64,
        dsc: f64,
        per_structure: Vec<f64>,
        best: f64,
    },
    Refresh {
        iteration: u64,
        estimation_iteration: u64,
        step: usize,
        stored: usize,
        retained: usize,
        mean_consistency: Option<f64>,
    },
}

pub fn to_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metric records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
