//! Per-step run records and their line-delimited JSON form.
//!
//! The file starts with one `{"record":"run",...}` line followed by one
//! `{"record":"step",...}` line per sampling step.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::FlopCounter;
use crate::error::{RasError, Result};
use crate::region::MetricKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_patches: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub class_id: Option<usize>,
    pub metric: MetricKind,
    pub starvation_scale: f64,
    pub attention_recovery: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sigma: f64,
    pub sigma_next: f64,
    pub ratio: f64,
    pub dense: bool,
    /// Patches the model processed this step.
    pub active: Vec<usize>,
    /// Per-patch statistic of the merged prediction before drop damping.
    pub stats: Vec<f64>,
    /// Damped cache scores used to pick the next step's patches.
    pub scores: Vec<f64>,
    pub flops: FlopCounter,
    /// Wall-clock time of the step. Not serialized, so trace files stay
    /// reproducible; timings are exported separately.
    #[serde(skip)]
    pub wall_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum TraceLine {
    Run(TraceHeader),
    Step(StepRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
}

impl RunTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            steps: Vec::new(),
        }
    }

    /// Total model FLOPs over the run.
    pub fn total_flops(&self) -> FlopCounter {
        let mut f = FlopCounter::default();
        for s in &self.steps {
            f += s.flops;
        }
        f
    }

    /// Number of token forwards, Σ |active_t|.
    pub fn token_forwards(&self) -> usize {
        self.steps.iter().map(|s| s.active.len()).sum()
    }

    pub fn write_jsonl(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        let line = serde_json::to_string(&TraceLine::Run(self.header.clone()))
            .map_err(|e| RasError::Serde(e.to_string()))?;
        writeln!(w, "{line}")?;
        for s in &self.steps {
            let line = serde_json::to_string(&TraceLine::Step(s.clone()))
                .map_err(|e| RasError::Serde(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(r: impl Read) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceLine = serde_json::from_str(&line)
                .map_err(|e| RasError::InvalidTrace(format!("line {}: {e}", n + 1)))?;
            match rec {
                TraceLine::Run(h) if header.is_none() => header = Some(h),
                TraceLine::Run(_) => {
                    return Err(RasError::InvalidTrace("duplicate run header".into()))
                }
                TraceLine::Step(s) => steps.push(s),
            }
        }
        let header = header.ok_or_else(|| RasError::InvalidTrace("missing run header".into()))?;
        Ok(Self { header, steps })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let mut t = RunTrace::new(TraceHeader {
            grid_h: 2,
            grid_w: 2,
            num_patches: 4,
            total_steps: 1,
            seed: 3,
            class_id: Some(1),
            metric: MetricKind::Std,
            starvation_scale: 0.3,
            attention_recovery: true,
        });
        t.steps.push(StepRecord {
            step: 0,
            sigma: 1.0,
            sigma_next: 0.1 + 0.2,
            ratio: 0.5,
            dense: false,
            active: vec![0, 3],
            stats: vec![0.1, 1.0 / 3.0, 2.0, 1e-300],
            scores: vec![0.1, 0.2, 0.3, 0.4],
            flops: FlopCounter::default(),
            wall_us: 12,
        });
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        assert!(!String::from_utf8_lossy(&buf).contains("wall_us"));
        t.steps[0].wall_us = 0;
        assert_eq!(RunTrace::read_jsonl(&buf[..]).unwrap(), t);
    }

    #[test]
    fn missing_header_rejected() {
        assert!(RunTrace::read_jsonl("".as_bytes()).is_err());
    }
}
