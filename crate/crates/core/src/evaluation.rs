//! Decoding and task metrics.
//!
//! Only the next-token head is used at inference; auxiliary heads are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::tasks::dataset::TaskInstance;
use crate::tasks::sibling::{validate_sibling_sequence, SiblingConfig};
use crate::tasks::BOS;
use crate::tensor::Scalar;

/// Rows decoded together in one forward pass.
pub const DECODE_BATCH: usize = 256;

fn argmax<F: Scalar>(row: &[F]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample<F: Scalar, R: Rng>(row: &[F], temperature: f64, rng: &mut R) -> u32 {
    if temperature <= 0.0 {
        return argmax(row);
    }
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .map(|v| ((v.as_f64() - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (row.len() - 1) as u32
}

/// Extends equal-length prompts one token at a time. `pick` chooses the next
/// token from a row of logits. Rows that emitted `stop` stop growing.
fn decode_rows<F: Scalar>(
    model: &Model<F>,
    prompts: &[&[u32]],
    max_new: usize,
    stop: Option<u32>,
    mut pick: impl FnMut(&[F]) -> u32,
) -> Result<Vec<Vec<u32>>> {
    let Some(first) = prompts.first() else {
        return Ok(Vec::new());
    };
    let p = first.len();
    if p == 0 || prompts.iter().any(|r| r.len() != p) {
        return invalid("prompts in one decode batch must share a positive length");
    }
    let max_len = model.config().max_seq_len;
    if p + max_new.saturating_sub(1) > max_len {
        return invalid(format!(
            "prompt of {p} tokens plus {max_new} new tokens exceeds max_seq_len {max_len}"
        ));
    }
    let v = model.config().vocab_size;
    let mut seqs: Vec<Vec<u32>> = prompts.iter().map(|r| r.to_vec()).collect();
    let mut out = vec![Vec::with_capacity(max_new); prompts.len()];
    let mut live: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..max_new {
        if live.is_empty() {
            break;
        }
        let rows: Vec<&[u32]> = live.iter().map(|&i| seqs[i].as_slice()).collect();
        let batch = TokenBatch::from_rows(&rows, 0)?;
        let logits = model.logits(&batch)?;
        let t = batch.len;
        let mut still = Vec::with_capacity(live.len());
        for (b, &i) in live.iter().enumerate() {
            let off = (b * t + t - 1) * v;
            let tok = pick(&logits.data()[off..off + v]);
            out[i].push(tok);
            seqs[i].push(tok);
            if Some(tok) != stop {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(out)
}

/// Greedy continuation of `prefix`: argmax until `stop` (kept in the
/// output) or `max_new` tokens. Returns only the new tokens.
pub fn greedy_decode<F: Scalar>(
    model: &Model<F>,
    prefix: &[u32],
    max_new: usize,
    stop: Option<u32>,
) -> Result<Vec<u32>> {
    Ok(decode_rows(model, &[prefix], max_new, stop, argmax)?.remove(0))
}

/// [`greedy_decode`] over many prompts, batched by prompt length.
pub fn greedy_decode_batch<F: Scalar>(
    model: &Model<F>,
    prompts: &[&[u32]],
    max_new: usize,
    stop: Option<u32>,
) -> Result<Vec<Vec<u32>>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        by_len.entry(p.len()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); prompts.len()];
    for idx in by_len.values() {
        for chunk in idx.chunks(DECODE_BATCH) {
            let rows: Vec<&[u32]> = chunk.iter().map(|&i| prompts[i]).collect();
            for (&i, gen) in chunk
                .iter()
                .zip(decode_rows(model, &rows, max_new, stop, argmax)?)
            {
                out[i] = gen;
            }
        }
    }
    Ok(out)
}

/// Fraction of instances whose greedy answer matches the target path token
/// for token. The prompt ends at the first supervised position; the closing
/// token after the path is not compared.
pub fn path_exact_match<F: Scalar>(model: &Model<F>, instances: &[TaskInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let prompts: Vec<&[u32]> = instances.iter().map(|i| i.prompt()).collect();
    let n_path = instances[0].answer().len().saturating_sub(1);
    if instances
        .iter()
        .any(|i| i.answer().len().saturating_sub(1) != n_path)
    {
        return invalid("all instances must share one path length");
    }
    let gens = greedy_decode_batch(model, &prompts, n_path, None)?;
    let hits = instances
        .iter()
        .zip(&gens)
        .filter(|(inst, g)| g.as_slice() == &inst.answer()[..n_path])
        .count();
    Ok(hits as f64 / instances.len() as f64)
}

/// Generated sibling bodies from `BOS`, `4K` tokens each, sampled at
/// `temperature` (`0` is greedy).
pub fn sample_sibling<F: Scalar, R: Rng>(
    model: &Model<F>,
    cfg: &SiblingConfig,
    n_samples: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    let prompt = [BOS];
    let mut out = Vec::with_capacity(n_samples);
    let mut left = n_samples;
    while left > 0 {
        let n = left.min(DECODE_BATCH);
        let rows = vec![&prompt[..]; n];
        out.extend(decode_rows(
            model,
            &rows,
            4 * cfg.components,
            None,
            |row| sample(row, temperature, rng),
        )?);
        left -= n;
    }
    Ok(out)
}

/// Fraction of sampled generations that pass the sibling validator.
pub fn sibling_coherence<F: Scalar, R: Rng>(
    model: &Model<F>,
    cfg: &SiblingConfig,
    n_samples: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 {
        return invalid("coherence needs at least one sample");
    }
    let gens = sample_sibling(model, cfg, n_samples, temperature, rng)?;
    let ok = gens
        .iter()
        .filter(|g| validate_sibling_sequence(g, cfg).is_ok())
        .count();
    Ok(ok as f64 / n_samples as f64)
}

/// Steps to convergence of a method relative to the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "kebab-case")]
pub enum ConvergenceRatio {
    Ratio(f64),
    MethodDidNotConverge,
    BaselineDidNotConverge,
}

impl ConvergenceRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Ratio(r) => Some(r),
            _ => None,
        }
    }
}

pub fn convergence_ratio(method_step: Option<u64>, baseline_step: Option<u64>) -> ConvergenceRatio {
    match (method_step, baseline_step) {
        (_, None) | (_, Some(0)) => ConvergenceRatio::BaselineDidNotConverge,
        (None, _) => ConvergenceRatio::MethodDidNotConverge,
        (Some(m), Some(b)) => ConvergenceRatio::Ratio(m as f64 / b as f64),
    }
}

/// Mean and standard error (sample standard deviation over `√n`; zero when
/// `n == 1`).
pub fn mean_se(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

/// One aggregated cell: a metric of a method on a task across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub method: String,
    pub task: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: Option<f64>,
    pub se: Option<f64>,
    /// Seeds expected but missing or unconverged.
    pub missing: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<ReportCell>,
    /// Decoded examples for inspection, keyed by method.
    pub samples: BTreeMap<String, Vec<String>>,
}

impl EvalReport {
    pub fn add(
        &mut self,
        method: &str,
        task: &str,
        metric: &str,
        values: Vec<f64>,
        missing: usize,
    ) {
        let stats = mean_se(&values);
        self.cells.push(ReportCell {
            method: method.to_string(),
            task: task.to_string(),
            metric: metric.to_string(),
            mean: stats.map(|s| s.0),
            se: stats.map(|s| s.1),
            values,
            missing,
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Method × task table of `mean (se)` for one metric, in insertion order.
    pub fn table(&self, metric: &str) -> String {
        let cells: Vec<&ReportCell> = self.cells.iter().filter(|c| c.metric == metric).collect();
        let mut methods: Vec<&str> = Vec::new();
        let mut tasks: Vec<&str> = Vec::new();
        for c in &cells {
            if !methods.contains(&c.method.as_str()) {
                methods.push(&c.method);
            }
            if !tasks.contains(&c.task.as_str()) {
                tasks.push(&c.task);
            }
        }
        let fmt_cell = |m: &str, t: &str| -> String {
            let Some(c) = cells.iter().find(|c| c.method == m && c.task == t) else {
                return "-".into();
            };
            let mut s = match (c.mean, c.se) {
                (Some(mean), Some(se)) => format!("{mean:.2} ({se:.2})"),
                _ => "n/a".into(),
            };
            if c.values.len() == 1 {
                s.push_str(" n=1");
            }
            if c.missing > 0 {
                let _ = write!(s, " [{} missing]", c.missing);
            }
            s
        };
        let mut rows = vec![std::iter::once(metric.to_string())
            .chain(tasks.iter().map(|t| t.to_string()))
            .collect::<Vec<_>>()];
        for m in &methods {
            rows.push(
                std::iter::once(m.to_string())
                    .chain(tasks.iter().map(|t| fmt_cell(m, t)))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}", w = *w))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }

    /// `method,task,metric,mean,se,n,missing` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "task", "metric", "mean", "se", "n", "missing"])?;
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            w.write_record([
                c.method.clone(),
                c.task.clone(),
                c.metric.clone(),
                opt(c.mean),
                opt(c.se),
                c.values.len().to_string(),
                c.missing.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_hand_computation() {
        // mean 2, sample variance 1, s.e. 1/√3
        let (m, se) = mean_se(&[1.0, 2.0, 3.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-15);
        assert!((se - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[0.7]), Some((0.7, 0.0)));
        assert_eq!(mean_se(&[]), None);
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(
            convergence_ratio(Some(300), Some(300)),
            ConvergenceRatio::Ratio(1.0)
        );
        assert_eq!(convergence_ratio(Some(150), Some(300)).value(), Some(0.5));
        assert_eq!(
            convergence_ratio(None, Some(300)),
            ConvergenceRatio::MethodDidNotConverge
        );
        assert_eq!(
            convergence_ratio(Some(1), None),
            ConvergenceRatio::BaselineDidNotConverge
        );
    }

    #[test]
    fn table_layout() {
        let mut r = EvalReport::default();
        r.add("ntp", "G(2,5)", "exact_match", vec![0.4, 0.5, 0.45], 0);
        r.add("fsp-bce", "G(2,5)", "exact_match", vec![1.0], 0);
        r.add("mtp", "G(2,5)", "exact_match", vec![], 3);
        let t = r.table("exact_match");
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("exact_match") && lines[0].contains("G(2,5)"));
        assert!(lines[2].starts_with("ntp") && lines[2].contains("0.45 (0.03)"));
        assert!(lines[3].contains("1.00 (0.00) n=1"));
        assert!(lines[4].contains("n/a [3 missing]"));
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn sampling_respects_temperature() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let row = [0.0f64, 5.0, 1.0];
        assert_eq!(sample(&row, 0.0, &mut rng), 1);
        let draws: Vec<u32> = (0..200).map(|_| sample(&row, 1.0, &mut rng)).collect();
        assert!(draws.iter().any(|&d| d != 1));
        assert!(draws.iter().filter(|&&d| d == 1).count() > 150);
    }
}
