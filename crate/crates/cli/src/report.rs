//! Aggregation of finished runs into method × task tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsp::evaluation::{convergence_ratio, ConvergenceRatio, EvalReport};
use fsp::tasks::dataset::MANIFEST_FILE;
use fsp::tasks::{DatasetManifest, TaskSpec};
use fsp::training::RunSummary;

/// A run that was expected or found, with its summary when it finished.
#[derive(Clone, Debug)]
pub struct RunEntry {
    pub group: String,
    pub seed: u64,
    pub task: String,
    pub dir: PathBuf,
    /// Reverse-LM teacher runs are left out of ratio tables.
    pub teacher: bool,
    pub summary: Option<RunSummary>,
}

/// `G(d,l)` or `sibling(K,N)` for the dataset in `data_dir`, if readable.
pub fn task_label(data_dir: &Path) -> Option<String> {
    let text = std::fs::read_to_string(data_dir.join(MANIFEST_FILE)).ok()?;
    let m: DatasetManifest = serde_json::from_str(&text).ok()?;
    Some(match m.task {
        TaskSpec::PathStar(c) => format!("G({},{})", c.degree, c.path_len),
        TaskSpec::Sibling(c) => format!("sibling({},{})", c.components, c.support),
    })
}

impl RunEntry {
    /// Entry for a run directory given on the command line.
    pub fn from_dir(dir: &Path) -> Self {
        let summary = RunSummary::read(dir).ok();
        let teacher = summary.as_ref().is_some_and(|s| s.task == "reverse");
        let (group, seed, task) = match &summary {
            Some(s) => {
                let label = s
                    .config
                    .get("data_dir")
                    .and_then(|d| task_label(Path::new(d)))
                    .unwrap_or_else(|| s.task.clone());
                let task = if s.task == "reverse" {
                    format!("{label} reversed")
                } else {
                    label
                };
                (s.name.clone(), s.seed, task)
            }
            None => (dir.display().to_string(), 0, "?".into()),
        };
        Self {
            group,
            seed,
            task,
            dir: dir.to_path_buf(),
            teacher,
            summary,
        }
    }
}

/// Tables built from a set of runs.
pub struct Report {
    pub metrics: EvalReport,
    pub ratios: EvalReport,
    pub ratio_label: Option<String>,
    pub missing: Vec<PathBuf>,
}

/// Groups runs by (method, task) in first-seen order.
fn grouped(entries: &[RunEntry]) -> Vec<((String, String), Vec<&RunEntry>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut map: BTreeMap<(String, String), Vec<&RunEntry>> = BTreeMap::new();
    for e in entries {
        let key = (e.group.clone(), e.task.clone());
        if !map.contains_key(&key) {
            order.push(key.clone());
        }
        map.entry(key).or_default().push(e);
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).expect("key recorded");
            (k, v)
        })
        .collect()
}

/// Builds the primary-metric table and, with a baseline, the
/// steps-to-convergence ratio table. `metric` overrides each run's primary
/// metric.
pub fn build(entries: &[RunEntry], baseline: Option<&str>, metric: Option<&str>) -> Report {
    let mut metrics = EvalReport::default();
    let mut ratios = EvalReport::default();
    let missing = entries
        .iter()
        .filter(|e| e.summary.is_none())
        .map(|e| e.dir.clone())
        .collect();
    let groups = grouped(entries);
    for ((method, task), runs) in &groups {
        let done: Vec<&RunSummary> = runs.iter().filter_map(|r| r.summary.as_ref()).collect();
        let name = metric
            .map(str::to_string)
            .or_else(|| done.first().map(|s| s.primary_metric.clone()))
            .unwrap_or_else(|| "test/exact_match".into());
        let values: Vec<f64> = done
            .iter()
            .filter_map(|s| s.final_metrics.get(&name).copied())
            .collect();
        let absent = runs.len() - values.len();
        metrics.add(method, task, &name, values, absent);
    }
    let ratio_label = baseline.map(|b| format!("convergence steps / {b}"));
    if let (Some(base), Some(label)) = (baseline, &ratio_label) {
        for ((method, task), runs) in &groups {
            if method == base || runs.iter().any(|r| r.teacher) {
                continue;
            }
            let Some((_, base_runs)) = groups.iter().find(|((m, t), _)| m == base && t == task)
            else {
                ratios.add(method, task, label, Vec::new(), runs.len());
                continue;
            };
            let mut values = Vec::new();
            for r in runs {
                let b = base_runs.iter().find(|b| b.seed == r.seed);
                let step = |e: Option<&&RunEntry>| {
                    e.and_then(|e| e.summary.as_ref())
                        .and_then(|s| s.convergence_step)
                };
                if let ConvergenceRatio::Ratio(v) = convergence_ratio(step(Some(r)), step(b)) {
                    values.push(v);
                }
            }
            let absent = runs.len() - values.len();
            ratios.add(method, task, label, values, absent);
        }
    }
    Report {
        metrics,
        ratios,
        ratio_label,
        missing,
    }
}

impl Report {
    /// Plain-text rendering: one table per metric, then the ratio table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut seen: Vec<&str> = Vec::new();
        for c in &self.metrics.cells {
            if !seen.contains(&c.metric.as_str()) {
                seen.push(&c.metric);
            }
        }
        for m in seen {
            out.push_str(&self.metrics.table(m));
            out.push('\n');
        }
        if let Some(label) = &self.ratio_label {
            out.push_str(&self.ratios.table(label));
            out.push('\n');
        }
        if !self.missing.is_empty() {
            out.push_str("missing runs:\n");
            for p in &self.missing {
                out.push_str(&format!("  {}\n", p.display()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(group: &str, seed: u64, em: Option<f64>, conv: Option<u64>) -> RunEntry {
        RunEntry {
            group: group.into(),
            seed,
            task: "G(2,6)".into(),
            dir: PathBuf::from(format!("{group}-{seed}")),
            teacher: false,
            summary: em.map(|v| RunSummary {
                name: group.into(),
                objective: group.into(),
                task: "path-star".into(),
                seed,
                config_hash: String::new(),
                config: BTreeMap::new(),
                dataset_hash: String::new(),
                steps: 10,
                final_metrics: [("test/exact_match".to_string(), v)].into(),
                primary_metric: "test/exact_match".into(),
                best: None,
                convergence_step: conv,
                param_hash: String::new(),
                teacher_hash: None,
                uniform_ce: 1.0,
            }),
        }
    }

    #[test]
    fn tables_aggregate_seeds_and_mark_missing_runs() {
        let runs = vec![
            entry("ntp", 0, Some(0.5), Some(100)),
            entry("ntp", 1, Some(0.7), Some(200)),
            entry("fsp-bce", 0, Some(1.0), Some(50)),
            entry("fsp-bce", 1, None, None),
        ];
        let r = build(&runs, Some("ntp"), None);
        let ntp = &r.metrics.cells[0];
        assert!((ntp.mean.unwrap() - 0.6).abs() < 1e-12);
        let fsp = &r.metrics.cells[1];
        assert_eq!((fsp.values.len(), fsp.missing), (1, 1));
        assert_eq!(r.ratios.cells.len(), 1);
        assert_eq!(r.ratios.cells[0].values, vec![0.5]);
        let text = r.render();
        assert!(text.contains("n=1"));
        assert!(text.contains("[1 missing]"));
        assert!(text.contains("convergence steps / ntp"));
        assert!(text.contains("fsp-bce-1"));
    }
}
