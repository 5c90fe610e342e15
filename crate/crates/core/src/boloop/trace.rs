//! Run traces and their JSON-lines / CSV encodings.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub objective: String,
    pub method: String,
    pub dim: usize,
    pub seed: u64,
    pub q: usize,
    pub iterations: usize,
    pub initial_count: usize,
    pub total_evals: usize,
}

/// One batch: iteration 0 is the initial design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Best value observed up to and including this batch.
    pub best: f64,
    pub suggest_seconds: f64,
}

/// A line of the JSONL encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Iteration(IterationRecord),
    Error { message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub records: Vec<IterationRecord>,
    /// Set when the run was aborted.
    pub error: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

impl RunTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, records: Vec::new(), error: None }
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none() && self.records.len() == self.header.iterations + 1
    }

    pub fn evaluations(&self) -> usize {
        self.records.iter().map(|r| r.values.len()).sum()
    }

    pub fn initial_best(&self) -> Option<f64> {
        let first = self.records.first().filter(|r| r.iteration == 0)?;
        first.values.iter().copied().reduce(f64::max)
    }

    pub fn best(&self) -> Option<f64> {
        self.records.last().map(|r| r.best)
    }

    /// Best value so far after every evaluation.
    pub fn running_best(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.records
            .iter()
            .flat_map(|r| &r.values)
            .map(|&y| {
                best = best.max(y);
                best
            })
            .collect()
    }

    /// Mean suggestion time over the suggested batches.
    pub fn mean_suggest_seconds(&self) -> f64 {
        let timed: Vec<f64> = self.records.iter().filter(|r| r.iteration > 0).map(|r| r.suggest_seconds).collect();
        if timed.is_empty() {
            0.0
        } else {
            timed.iter().sum::<f64>() / timed.len() as f64
        }
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        let mut line = |item: &TraceLine| -> Result<()> {
            let text = serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{text}").map_err(io_err(Path::new("<trace>")))
        };
        line(&TraceLine::Header(self.header.clone()))?;
        for r in &self.records {
            line(&TraceLine::Iteration(r.clone()))?;
        }
        if let Some(message) = &self.error {
            line(&TraceLine::Error { message: message.clone() })?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to memory");
        out
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut trace: Option<RunTrace> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(io_err(Path::new("<trace>")))?;
            if line.trim().is_empty() {
                continue;
            }
            let item: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Format(format!("trace line {}: {e}", i + 1)))?;
            match (item, trace.as_mut()) {
                (TraceLine::Header(h), None) => trace = Some(RunTrace::new(h)),
                (TraceLine::Iteration(rec), Some(t)) if t.error.is_none() => t.records.push(rec),
                (TraceLine::Error { message }, Some(t)) if t.error.is_none() => t.error = Some(message),
                _ => return Err(Error::Format(format!("trace line {}: unexpected record", i + 1))),
            }
        }
        trace.ok_or_else(|| Error::Format("trace has no header".into()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_jsonl())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    /// One CSV row per evaluation.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let err = io_err(Path::new("<csv>"));
        let mut header = String::from("objective,method,seed,q,iteration,evaluation");
        for i in 0..self.header.dim {
            header.push_str(&format!(",x{i}"));
        }
        header.push_str(",value,best,suggest_seconds\n");
        let mut out = header;
        let mut best = f64::NEG_INFINITY;
        let mut k = 0;
        for r in &self.records {
            for (x, y) in r.points.iter().zip(&r.values) {
                best = best.max(*y);
                let h = &self.header;
                out.push_str(&format!("{},{},{},{},{},{}", h.objective, h.method, h.seed, h.q, r.iteration, k));
                for v in x {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(",{y},{best},{}\n", r.suggest_seconds));
                k += 1;
            }
        }
        w.write_all(out.as_bytes()).map_err(err)
    }
}
