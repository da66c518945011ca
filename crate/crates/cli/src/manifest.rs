//! Experiment manifests: named run groups, each a config expanded over seeds.
//!
//! ```json
//! {
//!   "output_dir": "runs",
//!   "baseline": "ntp",
//!   "runs": [
//!     { "name": "teacher", "preset": "desk-sibling", "set": ["data_dir=data/sib"], "seeds": [0, 1], "teacher": true },
//!     { "name": "ntp", "preset": "desk-sibling", "set": ["data_dir=data/sib"], "seeds": [0, 1] },
//!     { "name": "fsp-revlm", "preset": "desk-sibling", "set": ["data_dir=data/sib", "objective=fsp-revlm"],
//!       "seeds": [0, 1], "teacher_run": "teacher" }
//!   ]
//! }
//! ```
//!
//! Paths are resolved relative to the working directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fsp::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    /// Flat `key = value` config file; takes the place of `preset`.
    #[serde(default)]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub preset: Option<String>,
    /// `key=value` overrides applied after the base config.
    #[serde(default)]
    pub set: Vec<String>,
    pub seeds: Vec<u64>,
    /// Trains a reverse-LM teacher instead of a student.
    #[serde(default)]
    pub teacher: bool,
    /// Teacher group whose same-seed checkpoint this group consumes.
    #[serde(default)]
    pub teacher_run: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub output_dir: PathBuf,
    /// Group used as the denominator of convergence ratios.
    #[serde(default)]
    pub baseline: Option<String>,
    pub runs: Vec<RunSpec>,
}

/// One fully resolved training job.
#[derive(Clone, Debug)]
pub struct Job {
    pub group: String,
    pub seed: u64,
    pub teacher: bool,
    pub config: TrainConfig,
}

impl ExperimentManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let m: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for r in &self.runs {
            if !names.insert(r.name.as_str()) {
                bail!("run name '{}' appears more than once", r.name);
            }
            if r.seeds.is_empty() {
                bail!("run '{}' lists no seeds", r.name);
            }
            if r.config.is_some() == r.preset.is_some() {
                bail!("run '{}' needs exactly one of config or preset", r.name);
            }
        }
        if let Some(b) = &self.baseline {
            if !names.contains(b.as_str()) {
                bail!("baseline '{b}' is not a run name");
            }
        }
        for r in &self.runs {
            let Some(t) = &r.teacher_run else { continue };
            let Some(teacher) = self.runs.iter().find(|x| &x.name == t) else {
                bail!("run '{}' names unknown teacher run '{t}'", r.name);
            };
            if !teacher.teacher {
                bail!("run '{}' names '{t}', which is not a teacher run", r.name);
            }
            if let Some(s) = r.seeds.iter().find(|s| !teacher.seeds.contains(s)) {
                bail!("teacher run '{t}' has no seed {s} needed by '{}'", r.name);
            }
        }
        Ok(())
    }

    fn base_config(&self, spec: &RunSpec, seed: u64) -> Result<TrainConfig> {
        let mut cfg = match (&spec.config, &spec.preset) {
            (Some(path), _) => TrainConfig::from_file(path)?,
            (None, Some(p)) => TrainConfig::preset(p)?,
            (None, None) => bail!("run '{}' needs a config or a preset", spec.name),
        };
        cfg.output_dir = self.output_dir.clone();
        cfg.apply_overrides(&spec.set)
            .with_context(|| format!("overrides of run '{}'", spec.name))?;
        cfg.name = spec.name.clone();
        cfg.seed = seed;
        Ok(cfg)
    }

    /// Every (group, seed) job, teachers first.
    pub fn jobs(&self) -> Result<Vec<Job>> {
        let mut jobs = Vec::new();
        for spec in self
            .runs
            .iter()
            .filter(|r| r.teacher)
            .chain(self.runs.iter().filter(|r| !r.teacher))
        {
            for &seed in &spec.seeds {
                let mut config = self.base_config(spec, seed)?;
                if let Some(t) = &spec.teacher_run {
                    let teacher = self.runs.iter().find(|x| &x.name == t).expect("validated");
                    let tcfg = self.base_config(teacher, seed)?;
                    config.teacher_checkpoint = Some(tcfg.run_dir().join("final.ckpt"));
                }
                jobs.push(Job {
                    group: spec.name.clone(),
                    seed,
                    teacher: spec.teacher,
                    config,
                });
            }
        }
        Ok(jobs)
    }
}
