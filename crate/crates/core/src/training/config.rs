//! Flat `key = value` run configuration.
//!
//! A config file is a list of `key = value` lines; `#` starts a comment. An
//! optional `preset` key selects the starting point and is applied before
//! every other key regardless of its position. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveKind, ObjectiveSpec, TeacherLayer, Weighting};
use crate::tensor::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup then cosine decay to zero at the last step.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Run name; defaults to the objective name when empty.
    pub name: String,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,

    pub objective: String,
    pub n_aux: usize,
    /// Future window; `None` covers the whole sequence.
    pub tau: Option<usize>,
    pub weighting: Weighting,
    pub lambda_aux: f64,
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_layer: TeacherLayer,
    /// Expected SHA-256 of the teacher checkpoint file.
    pub teacher_hash: Option<String>,
    pub summary_cache: Option<PathBuf>,
    pub tfidf_table: Option<PathBuf>,

    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_factor: usize,
    pub tie_unembedding: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,

    /// Steps between evaluations; `0` evaluates at the end of every epoch.
    pub eval_every: usize,
    /// Test instances scored per evaluation; `0` uses all.
    pub eval_limit: usize,
    /// Training instances scored for exact match; `0` skips it.
    pub train_eval_limit: usize,
    /// Unconditional samples per coherence evaluation.
    pub eval_samples: usize,
    pub temperature: f64,
    /// Steps between training-loss records.
    pub log_every: usize,

    pub seed: u64,
    pub precision: Precision,
    pub save_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            objective: "ntp".into(),
            n_aux: 1,
            tau: None,
            weighting: Weighting::TfIdf,
            lambda_aux: 1.0,
            teacher_checkpoint: None,
            teacher_layer: TeacherLayer::Last,
            teacher_hash: None,
            summary_cache: None,
            tfidf_table: None,
            n_layers: 6,
            d_model: 256,
            n_heads: 4,
            mlp_factor: 4,
            tie_unembedding: true,
            lr: 3e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            batch_size: 256,
            epochs: 200,
            max_steps: None,
            eval_every: 0,
            eval_limit: 0,
            train_eval_limit: 2000,
            eval_samples: 500,
            temperature: 1.0,
            log_every: 1,
            seed: 0,
            precision: Precision::F32,
            save_checkpoints: true,
        }
    }
}

pub const PRESETS: &[&str] = &[
    "path-star",
    "sibling",
    "desk-path-star",
    "desk-sibling",
    "smoke",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => config_err(format!("{key}: expected true or false, got '{value}'")),
    }
}

fn parse_opt<T>(value: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        f(value).map(Some)
    }
}

fn show_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), |x| x.to_string())
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref()
        .map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl TrainConfig {
    /// Named starting point.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "path-star" => Self {
                n_layers: 12,
                d_model: 384,
                n_heads: 6,
                epochs: 500,
                ..base
            },
            "sibling" => Self {
                n_layers: 12,
                d_model: 384,
                n_heads: 6,
                epochs: 150,
                ..base
            },
            "desk-path-star" => base,
            "desk-sibling" => Self {
                epochs: 150,
                ..base
            },
            "smoke" => Self {
                n_layers: 2,
                d_model: 32,
                n_heads: 2,
                mlp_factor: 2,
                lr: 1e-3,
                batch_size: 32,
                epochs: 5,
                train_eval_limit: 64,
                eval_limit: 64,
                eval_samples: 64,
                ..base
            },
            _ => {
                return config_err(format!(
                    "unknown preset '{name}'; known: {}",
                    PRESETS.join(", ")
                ))
            }
        })
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => self.name = v.to_string(),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "objective" => self.objective = v.to_string(),
            "n_aux" => self.n_aux = parse_num(key, v)?,
            "tau" => {
                self.tau = if v == "full" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "weighting" => {
                self.weighting = match v {
                    "tfidf" => Weighting::TfIdf,
                    "uniform" => Weighting::Uniform,
                    _ => {
                        return config_err(format!(
                            "weighting: expected tfidf or uniform, got '{v}'"
                        ))
                    }
                }
            }
            "lambda_aux" => self.lambda_aux = parse_num(key, v)?,
            "teacher_checkpoint" => {
                self.teacher_checkpoint = parse_opt(v, |s| Ok(PathBuf::from(s)))?
            }
            "teacher_layer" => self.teacher_layer = TeacherLayer::parse(v)?,
            "teacher_hash" => self.teacher_hash = parse_opt(v, |s| Ok(s.to_string()))?,
            "summary_cache" => self.summary_cache = parse_opt(v, |s| Ok(PathBuf::from(s)))?,
            "tfidf_table" => self.tfidf_table = parse_opt(v, |s| Ok(PathBuf::from(s)))?,
            "n_layers" => self.n_layers = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "n_heads" => self.n_heads = parse_num(key, v)?,
            "mlp_factor" => self.mlp_factor = parse_num(key, v)?,
            "tie_unembedding" => self.tie_unembedding = parse_bool(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => {
                        return config_err(format!(
                            "lr_schedule: expected constant or cosine, got '{v}'"
                        ))
                    }
                }
            }
            "warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_opt(v, |s| parse_num(key, s))?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_limit" => self.eval_limit = parse_num(key, v)?,
            "train_eval_limit" => self.train_eval_limit = parse_num(key, v)?,
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return config_err(format!("precision: expected f32 or f64, got '{v}'")),
                }
            }
            "save_checkpoints" => self.save_checkpoints = parse_bool(key, v)?,
            _ => return config_err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("name", self.name.clone()),
            ("data_dir", self.data_dir.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("objective", self.objective.clone()),
            ("n_aux", self.n_aux.to_string()),
            (
                "tau",
                self.tau.map_or_else(|| "full".into(), |t| t.to_string()),
            ),
            (
                "weighting",
                match self.weighting {
                    Weighting::TfIdf => "tfidf",
                    Weighting::Uniform => "uniform",
                }
                .into(),
            ),
            ("lambda_aux", format!("{:?}", self.lambda_aux)),
            ("teacher_checkpoint", show_path(&self.teacher_checkpoint)),
            ("teacher_layer", self.teacher_layer.to_string()),
            ("teacher_hash", show_opt(&self.teacher_hash)),
            ("summary_cache", show_path(&self.summary_cache)),
            ("tfidf_table", show_path(&self.tfidf_table)),
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("mlp_factor", self.mlp_factor.to_string()),
            ("tie_unembedding", self.tie_unembedding.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            (
                "lr_schedule",
                match self.lr_schedule {
                    LrSchedule::Constant => "constant",
                    LrSchedule::Cosine => "cosine",
                }
                .into(),
            ),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", show_opt(&self.max_steps)),
            ("eval_every", self.eval_every.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("train_eval_limit", self.train_eval_limit.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("temperature", format!("{:?}", self.temperature)),
            ("log_every", self.log_every.to_string()),
            ("seed", self.seed.to_string()),
            (
                "precision",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
                .into(),
            ),
            ("save_checkpoints", self.save_checkpoints.to_string()),
        ]
    }

    /// Parses config text; see the module docs for the format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!("line {}: expected key = value", n + 1));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, p)) => Self::preset(p)?,
            None => Self::default(),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let Some((k, v)) = o.split_once('=') else {
                return config_err(format!("override '{o}' is not key=value"));
            };
            if k.trim() == "preset" {
                return config_err("preset cannot be overridden; put it in the config file");
            }
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Text that [`TrainConfig::parse`] reads back to an equal config.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 over every field except `seed` and `output_dir`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "seed" && k != "output_dir" {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        hex::encode(h.finalize())
    }

    pub fn run_name(&self) -> &str {
        if self.name.is_empty() {
            &self.objective
        } else {
            &self.name
        }
    }

    /// `output_dir/<name>-<hash prefix>-seed<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!(
            "{}-{}-seed{}",
            self.run_name(),
            &self.hash()[..12],
            self.seed
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return config_err("batch_size and epochs must be positive");
        }
        if self.log_every == 0 {
            return config_err("log_every must be positive");
        }
        let positive = [("lr", self.lr), ("eps", self.eps)];
        if let Some((k, _)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return config_err(format!("{k} must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("betas must lie in [0, 1)");
        }
        if !(self.grad_clip >= 0.0 && self.weight_decay >= 0.0 && self.temperature >= 0.0) {
            return config_err("grad_clip, weight_decay and temperature must be >= 0");
        }
        self.objective_spec(2)?.validate()
    }

    /// Objective for sequences of at most `seq_len` tokens.
    pub fn objective_spec(&self, seq_len: usize) -> Result<ObjectiveSpec> {
        let tau = self.tau.unwrap_or(seq_len.max(2));
        let kind = match self.objective.as_str() {
            "ntp" => ObjectiveKind::Ntp,
            "mtp" => ObjectiveKind::Mtp { n_aux: self.n_aux },
            "ds-mtp" => ObjectiveKind::DsMtp { n_aux: self.n_aux },
            "mtp-skip" => ObjectiveKind::MtpSkip { tau },
            "fsp-bce" => ObjectiveKind::FspBce {
                tau,
                weighting: self.weighting,
            },
            "fsp-revlm" => ObjectiveKind::FspRevLm {
                teacher_checkpoint: self.teacher_checkpoint.clone().unwrap_or_default(),
                teacher_layer: self.teacher_layer,
            },
            other => {
                return config_err(format!(
                    "unknown objective '{other}'; expected ntp, mtp, ds-mtp, mtp-skip, fsp-bce or fsp-revlm"
                ))
            }
        };
        let spec = ObjectiveSpec::new(kind).with_lambda(self.lambda_aux);
        spec.validate()?;
        Ok(spec)
    }

    /// Backbone configuration for a task vocabulary and sequence length.
    pub fn model_config(&self, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            mlp_factor: self.mlp_factor,
            tie_unembedding: self.tie_unembedding,
            ..ModelConfig::gpt_mini(vocab_size, max_seq_len)
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate at optimizer step `step` (1-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let done = step.saturating_sub(self.warmup_steps) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * (done / span).min(1.0)).cos())
            }
        }
    }
}
