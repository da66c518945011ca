//! Deterministic training loop, evaluation hooks and run artifacts.
//!
//! Every random choice draws from its own stream derived from the run seed:
//! parameter init, per-epoch data order, objective sampling and evaluation
//! sampling. Changing the objective therefore never changes which batches
//! the model sees.
//!
//! A run directory holds `config.cfg`, `metrics.csv`, `summary.json`,
//! `final.ckpt` and `best.ckpt`.

pub mod config;
pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{LrSchedule, Precision, TrainConfig};
pub use metrics::{convergence_step, ConvergenceCriterion, MetricRecord, RunMetrics};

use crate::checkpoint;
use crate::error::{config_err, Error, Result};
use crate::evaluation::{path_exact_match, sibling_coherence};
use crate::model::{Model, ModelConfig};
use crate::objectives::{
    compute_loss, offset_targets, ObjectiveContext, ObjectiveKind, ObjectiveSpec, SummarySource,
    TfIdfTable, Weighting,
};
use crate::tasks::dataset::{read_dataset_dir, Dataset};
use crate::tasks::sibling::SiblingConfig;
use crate::tasks::TaskSpec;
use crate::teacher::{reversed_dataset, TeacherSummaries};
use crate::tensor::{clip_grad_norm, global_norm, AdamW, Scalar, Tape};
use crate::TokenBatch;

/// Random stream for `(seed, label, index)`.
pub fn derived_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Which task metrics an evaluation computes besides held-out loss.
#[derive(Clone, Copy, Debug)]
pub enum EvalTask<'a> {
    /// Greedy exact match on test instances and on a training subset.
    PathStar,
    /// Coherence of unconditional samples.
    Sibling(&'a SiblingConfig),
    /// Held-out loss only.
    LossOnly,
}

impl EvalTask<'_> {
    fn primary(&self) -> (&'static str, bool) {
        match self {
            Self::PathStar => ("exact_match", true),
            Self::Sibling(_) => ("coherence", true),
            Self::LossOnly => ("loss", false),
        }
    }
}

impl<'a> From<&'a TaskSpec> for EvalTask<'a> {
    fn from(spec: &'a TaskSpec) -> Self {
        match spec {
            TaskSpec::PathStar(_) => Self::PathStar,
            TaskSpec::Sibling(c) => Self::Sibling(c),
        }
    }
}

/// Mean next-token cross-entropy over the supervised positions of the
/// first `limit` instances (`0` means all).
pub fn dataset_loss<F: Scalar>(
    model: &Model<F>,
    ds: &Dataset,
    limit: usize,
    batch_size: usize,
) -> Result<f64> {
    let n = if limit == 0 {
        ds.len()
    } else {
        limit.min(ds.len())
    };
    let idx: Vec<usize> = (0..n).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (tokens, mask) = ds.batch(chunk)?;
        let (targets, valid) = offset_targets(&tokens, 1, &mask);
        let rows = valid.iter().filter(|&&v| v).count();
        if rows == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let h = model.forward_hidden(&mut tape, &p, &tokens)?;
        let logits = model.ntp_logits(&mut tape, &p, h)?;
        let loss = tape.softmax_cross_entropy(logits, &targets, &valid)?;
        total += tape.value(loss).item().as_f64() * rows as f64;
        count += rows;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// One evaluation pass: `(split, metric, value)` triples.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    task: EvalTask<'_>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<(&'static str, &'static str, f64)>> {
    let limit = |n: usize, l: usize| if l == 0 { n } else { l.min(n) };
    let mut out = vec![(
        "test",
        "loss",
        dataset_loss(model, test, cfg.eval_limit, cfg.batch_size)?,
    )];
    match task {
        EvalTask::PathStar => {
            let n = limit(test.len(), cfg.eval_limit);
            out.push((
                "test",
                "exact_match",
                path_exact_match(model, &test.instances[..n])?,
            ));
            if cfg.train_eval_limit > 0 {
                let n = cfg.train_eval_limit.min(train.len());
                out.push((
                    "train",
                    "exact_match",
                    path_exact_match(model, &train.instances[..n])?,
                ));
            }
        }
        EvalTask::Sibling(sc) => {
            let mut rng = derived_rng(cfg.seed, "eval", step);
            let c = sibling_coherence(
                model,
                sc,
                cfg.eval_samples.max(1),
                cfg.temperature,
                &mut rng,
            )?;
            out.push(("test", "coherence", c));
        }
        EvalTask::LossOnly => {}
    }
    Ok(out)
}

/// Everything a training run consumes besides its configuration.
pub struct TrainInputs<'a, F> {
    pub task: EvalTask<'a>,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub class_weights: Option<Vec<F>>,
    pub summaries: Option<&'a mut dyn SummarySource<F>>,
}

pub struct TrainResult<F> {
    pub model: Model<F>,
    pub metrics: RunMetrics,
    pub steps: u64,
    /// Step at which the primary metric first held at or above 0.99 for two
    /// consecutive evaluations (higher-is-better metrics only).
    pub convergence_step: Option<u64>,
    /// Step and value of the best primary-metric evaluation.
    pub best: Option<(u64, f64)>,
}

fn dump_batch(
    run_dir: Option<&Path>,
    seed: u64,
    step: u64,
    tokens: &TokenBatch,
    mask: &[bool],
) -> Option<PathBuf> {
    let path = match run_dir {
        Some(d) => d.join("nan_batch.jsonl"),
        None => std::env::temp_dir().join(format!("fsp-nan-seed{seed}-step{step}.jsonl")),
    };
    let mut f = std::fs::File::create(&path).ok()?;
    for b in 0..tokens.batch {
        let row = serde_json::json!({
            "step": step,
            "tokens": tokens.row(b),
            "mask": &mask[b * tokens.len..b * tokens.len + tokens.lengths[b]],
        });
        writeln!(f, "{row}").ok()?;
    }
    Some(path)
}

/// Sequence length covering every instance of both splits.
pub fn max_len(train: &Dataset, test: &Dataset) -> usize {
    train
        .instances
        .iter()
        .chain(&test.instances)
        .map(|i| i.tokens.len())
        .max()
        .unwrap_or(1)
}

/// Trains a fresh model. Writes checkpoints and metrics into `run_dir`
/// when given.
pub fn run_training<F: Scalar>(
    cfg: &TrainConfig,
    mut inputs: TrainInputs<'_, F>,
    run_dir: Option<&Path>,
) -> Result<TrainResult<F>> {
    cfg.validate()?;
    let train = inputs.train;
    if train.is_empty() {
        return config_err("training set is empty");
    }
    let seq_len = max_len(train, inputs.test);
    let spec = cfg.objective_spec(seq_len)?;
    let model_cfg = spec.configure_model(&cfg.model_config(train.vocab_size, seq_len));
    let mut model = Model::<F>::new(model_cfg, cfg.seed)?;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamW::new(cfg.adamw(), &shape_refs, model.decay_mask());

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let (primary, higher_better) = inputs.task.primary();
    let mut metrics = RunMetrics::new();
    let mut best: Option<(u64, f64)> = None;
    let mut objective_rng = derived_rng(cfg.seed, "objective", 0);
    let class_weights = inputs.class_weights.take();
    let mut ctx = ObjectiveContext {
        class_weights: class_weights.as_deref(),
        summaries: inputs
            .summaries
            .take()
            .map(|s| s as &mut dyn SummarySource<F>),
        rng: &mut objective_rng,
    };
    let mut step = 0u64;
    let mut last_eval = None;

    let run_eval = |model: &Model<F>,
                    step: u64,
                    metrics: &mut RunMetrics,
                    best: &mut Option<(u64, f64)>|
     -> Result<()> {
        for (split, name, v) in evaluate(model, inputs.task, train, inputs.test, cfg, step)? {
            metrics.push(step, split, name, v)?;
            if split == "test" && name == primary {
                let better = match *best {
                    None => true,
                    Some((_, b)) => (higher_better && v > b) || (!higher_better && v < b),
                };
                if better {
                    *best = Some((step, v));
                    if let (Some(dir), true) = (run_dir, cfg.save_checkpoints) {
                        checkpoint::save(model, &dir.join("best.ckpt"))?;
                    }
                }
            }
        }
        if let Some(dir) = run_dir {
            metrics.write_csv(&dir.join("metrics.csv"))?;
        }
        Ok(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, "data", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if step as usize >= total {
                break 'epochs;
            }
            step += 1;
            let (tokens, mask) = train.batch(chunk)?;
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let parts = compute_loss(&model, &mut tape, &p, &spec, &tokens, &mask, &mut ctx)?;
            let loss = tape.value(parts.total).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    message: format!("loss is {loss} at step {step}"),
                    dump: dump_batch(run_dir, cfg.seed, step, &tokens, &mask),
                });
            }
            let ntp = tape.value(parts.ntp).item().as_f64();
            let aux = parts.aux.map(|a| tape.value(a).item().as_f64());
            tape.backward(parts.total)?;
            let mut grads = p.grads(&mut tape);
            drop(tape);
            let norm = global_norm(&grads);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            let lr = cfg.lr_at(step as usize, total);
            if let Err(e) = opt.step(model.params_mut(), &grads, lr) {
                return Err(match e {
                    Error::NonFinite { message, .. } => Error::NonFinite {
                        message: format!("{message} at step {step}"),
                        dump: dump_batch(run_dir, cfg.seed, step, &tokens, &mask),
                    },
                    other => other,
                });
            }
            if step == 1 || step.is_multiple_of(cfg.log_every as u64) || step as usize == total {
                metrics.push(step, "train", "loss", loss)?;
                metrics.push(step, "train", "ntp_loss", ntp)?;
                if let Some(a) = aux {
                    metrics.push(step, "train", "aux_loss", a)?;
                }
                metrics.push(step, "train", "grad_norm", norm)?;
                metrics.push(step, "train", "lr", lr)?;
            }
            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every as u64) {
                run_eval(&model, step, &mut metrics, &mut best)?;
                last_eval = Some(step);
            }
        }
        if cfg.eval_every == 0 && last_eval != Some(step) {
            run_eval(&model, step, &mut metrics, &mut best)?;
            last_eval = Some(step);
        }
    }
    if last_eval != Some(step) {
        run_eval(&model, step, &mut metrics, &mut best)?;
    }
    if let (Some(dir), true) = (run_dir, cfg.save_checkpoints) {
        checkpoint::save(&model, &dir.join("final.ckpt"))?;
    }
    if let Some(dir) = run_dir {
        metrics.write_csv(&dir.join("metrics.csv"))?;
    }
    let convergence = if higher_better {
        convergence_step(
            &metrics.series("test", primary),
            ConvergenceCriterion::default(),
        )
    } else {
        None
    };
    Ok(TrainResult {
        model,
        metrics,
        steps: step,
        convergence_step: convergence,
        best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEval {
    pub step: u64,
    pub value: f64,
}

/// `summary.json` of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub objective: String,
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub dataset_hash: String,
    pub steps: u64,
    pub final_metrics: BTreeMap<String, f64>,
    pub primary_metric: String,
    pub best: Option<BestEval>,
    pub convergence_step: Option<u64>,
    pub param_hash: String,
    pub teacher_hash: Option<String>,
    /// Cross-entropy of a uniform predictor, `ln V`, for reference.
    pub uniform_ce: f64,
}

impl RunSummary {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join("summary.json");
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub metrics: RunMetrics,
}

fn prepare_run_dir(cfg: &TrainConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.cfg"), cfg.render())?;
    Ok(dir)
}

fn finish_run<F: Scalar>(
    cfg: &TrainConfig,
    dir: PathBuf,
    task: &str,
    dataset_hash: &str,
    vocab: usize,
    teacher_hash: Option<String>,
    res: TrainResult<F>,
) -> Result<RunOutcome> {
    let primary = match task {
        "path-star" => "test/exact_match",
        "sibling" => "test/coherence",
        _ => "test/loss",
    };
    let summary = RunSummary {
        name: cfg.run_name().to_string(),
        objective: cfg.objective.clone(),
        task: task.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        dataset_hash: dataset_hash.to_string(),
        steps: res.steps,
        final_metrics: res.metrics.final_values(),
        primary_metric: primary.to_string(),
        best: res.best.map(|(step, value)| BestEval { step, value }),
        convergence_step: res.convergence_step,
        param_hash: res.model.param_hash(),
        teacher_hash,
        uniform_ce: (vocab as f64).ln(),
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(RunOutcome {
        run_dir: dir,
        summary,
        metrics: res.metrics,
    })
}

fn class_weights<F: Scalar>(
    cfg: &TrainConfig,
    train: &Dataset,
    dir: &Path,
) -> Result<Option<Vec<F>>> {
    if cfg.objective != "fsp-bce" || cfg.weighting != Weighting::TfIdf {
        return Ok(None);
    }
    let table = match &cfg.tfidf_table {
        Some(p) => TfIdfTable::read_csv(p)?,
        None => TfIdfTable::from_corpus(
            train.instances.iter().map(|i| i.tokens.as_slice()),
            train.vocab_size,
        )?,
    };
    if table.weights.len() != train.vocab_size {
        return config_err(format!(
            "tf-idf table covers {} tokens, vocabulary has {}",
            table.weights.len(),
            train.vocab_size
        ));
    }
    table.write_csv(&dir.join("tfidf.csv"))?;
    Ok(Some(table.weights_as()))
}

/// Loads the frozen reverse-LM teacher named in the config.
pub fn load_teacher<F: Scalar>(
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
) -> Result<(TeacherSummaries<F>, String)> {
    let Some(path) = &cfg.teacher_checkpoint else {
        return config_err("fsp-revlm needs teacher_checkpoint");
    };
    let hash = checkpoint::file_hash(path)?;
    if let Some(expected) = &cfg.teacher_hash {
        if *expected != hash {
            return config_err(format!(
                "teacher checkpoint hash {hash} does not match the expected {expected}"
            ));
        }
    }
    let teacher = checkpoint::load::<F>(model_cfg, path)?;
    let raw: [u8; 32] = hex::decode(&hash)
        .ok()
        .and_then(|b| b.try_into().ok())
        .expect("sha256 hex");
    let src = TeacherSummaries::new(teacher, cfg.teacher_layer)?;
    let src = if cfg.summary_cache.is_some() {
        src.with_cache(cfg.summary_cache.as_deref(), raw)?
    } else {
        src
    };
    Ok((src, hash))
}

fn train_typed<F: Scalar>(cfg: &TrainConfig) -> Result<RunOutcome> {
    let (manifest, train, test) = read_dataset_dir(&cfg.data_dir)?;
    let dir = prepare_run_dir(cfg)?;
    let seq_len = max_len(&train, &test);
    let weights = class_weights::<F>(cfg, &train, &dir)?;
    let mut teacher = None;
    let mut teacher_hash = None;
    if matches!(
        cfg.objective_spec(seq_len)?.kind,
        ObjectiveKind::FspRevLm { .. }
    ) {
        let (src, hash) = load_teacher::<F>(cfg, cfg.model_config(train.vocab_size, seq_len))?;
        teacher = Some(src);
        teacher_hash = Some(hash);
    }
    let inputs = TrainInputs {
        task: EvalTask::from(&manifest.task),
        train: &train,
        test: &test,
        class_weights: weights,
        summaries: teacher.as_mut().map(|t| t as &mut dyn SummarySource<F>),
    };
    let res = run_training(cfg, inputs, Some(&dir))?;
    if let Some(t) = &teacher {
        t.verify_frozen()?;
        t.flush()?;
    }
    finish_run(
        cfg,
        dir,
        manifest.task.name(),
        &manifest.content_hash,
        train.vocab_size,
        teacher_hash,
        res,
    )
}

/// Trains one run from a config whose `data_dir` holds a generated dataset.
pub fn train(cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg),
        Precision::F64 => train_typed::<f64>(cfg),
    }
}

/// Trains the reverse-LM teacher: next-token prediction on right-to-left
/// copies of the dataset, supervising every position. The held-out loss on
/// the reversed test split is logged as `test/loss`.
pub fn train_teacher(cfg: &TrainConfig) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.objective = "ntp".into();
    if cfg.name.is_empty() {
        cfg.name = "teacher".into();
    }
    cfg.validate()?;
    let (manifest, train, test) = read_dataset_dir(&cfg.data_dir)?;
    let (rtrain, rtest) = (reversed_dataset(&train), reversed_dataset(&test));
    let dir = prepare_run_dir(&cfg)?;
    fn go<F: Scalar>(
        cfg: &TrainConfig,
        train: &Dataset,
        test: &Dataset,
        dir: &Path,
    ) -> Result<TrainResult<F>> {
        let inputs = TrainInputs {
            task: EvalTask::LossOnly,
            train,
            test,
            class_weights: None,
            summaries: None,
        };
        run_training(cfg, inputs, Some(dir))
    }
    let v = train.vocab_size;
    match cfg.precision {
        Precision::F32 => {
            let r = go::<f32>(&cfg, &rtrain, &rtest, &dir)?;
            finish_run(&cfg, dir, "reverse", &manifest.content_hash, v, None, r)
        }
        Precision::F64 => {
            let r = go::<f64>(&cfg, &rtrain, &rtest, &dir)?;
            finish_run(&cfg, dir, "reverse", &manifest.content_hash, v, None, r)
        }
    }
}

/// Re-evaluates a run's checkpoint (`final` or `best`) on the full test set.
pub fn evaluate_run(run_dir: &Path, which: &str) -> Result<BTreeMap<String, f64>> {
    let mut cfg = TrainConfig::from_file(&run_dir.join("config.cfg"))?;
    cfg.eval_limit = 0;
    let (manifest, train, test) = read_dataset_dir(&cfg.data_dir)?;
    let seq_len = max_len(&train, &test);
    let spec: ObjectiveSpec = cfg.objective_spec(seq_len)?;
    let model_cfg = spec.configure_model(&cfg.model_config(train.vocab_size, seq_len));
    let ckpt = run_dir.join(format!("{which}.ckpt"));
    let model = checkpoint::load::<f32>(model_cfg, &ckpt)?;
    let summary = RunSummary::read(run_dir).ok();
    let step = summary.map_or(0, |s| s.steps);
    let task = if summary_task_is_reverse(run_dir) {
        EvalTask::LossOnly
    } else {
        EvalTask::from(&manifest.task)
    };
    let (train, test) = if matches!(task, EvalTask::LossOnly) {
        (reversed_dataset(&train), reversed_dataset(&test))
    } else {
        (train, test)
    };
    Ok(evaluate(&model, task, &train, &test, &cfg, step)?
        .into_iter()
        .map(|(s, m, v)| (format!("{s}/{m}"), v))
        .collect())
}

fn summary_task_is_reverse(run_dir: &Path) -> bool {
    RunSummary::read(run_dir).is_ok_and(|s| s.task == "reverse")
}
