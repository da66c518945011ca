//! Append-only metric log.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Records in insertion order; within one `(split, metric)` stream steps
/// strictly increase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    records: Vec<MetricRecord>,
    last_step: BTreeMap<(String, String), u64>,
}

impl RunMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: u64, split: &str, metric: &str, value: f64) -> Result<()> {
        let key = (split.to_string(), metric.to_string());
        if let Some(&last) = self.last_step.get(&key) {
            if step <= last {
                return invalid(format!(
                    "{split}/{metric}: step {step} does not follow {last}"
                ));
            }
        }
        self.last_step.insert(key, step);
        self.records.push(MetricRecord {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// `(step, value)` pairs of one stream.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// Latest value of every stream, keyed `split/metric`.
    pub fn final_values(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            out.insert(format!("{}/{}", r.split, r.metric), r.value);
        }
        out
    }

    /// CSV with header `step,split,metric,value`; values use shortest
    /// round-trip formatting, so equal logs give equal bytes.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "split", "metric", "value"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.split.clone(),
                r.metric.clone(),
                format!("{:?}", r.value),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut m = Self::new();
        for rec in r.deserialize() {
            let rec: MetricRecord = rec?;
            m.push(rec.step, &rec.split, &rec.metric, rec.value)?;
        }
        Ok(m)
    }
}

/// Threshold and streak length that define convergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceCriterion {
    pub threshold: f64,
    pub consecutive: usize,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self {
            threshold: 0.99,
            consecutive: 2,
        }
    }
}

/// Step of the evaluation that completes the first run of `consecutive`
/// values at or above `threshold`.
pub fn convergence_step(series: &[(u64, f64)], criterion: ConvergenceCriterion) -> Option<u64> {
    let mut streak = 0;
    for &(step, v) in series {
        if v >= criterion.threshold {
            streak += 1;
            if streak >= criterion.consecutive.max(1) {
                return Some(step);
            }
        } else {
            streak = 0;
        }
    }
    None
}
