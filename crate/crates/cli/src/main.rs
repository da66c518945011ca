//! `fsp`: dataset generation, training, evaluation, sweeps and reports.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 numerical
//! abort, 4 missing artifact.

mod manifest;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsp::tasks::dataset::{generate_splits, write_dataset_dir};
use fsp::tasks::{PathStarConfig, SiblingConfig, TaskSpec};
use fsp::training::{evaluate_run, train, train_teacher, RunOutcome, RunSummary, TrainConfig};

use manifest::{ExperimentManifest, Job};
use report::RunEntry;

#[derive(Parser)]
#[command(name = "fsp", version, about = "Future-aware pretraining laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test dataset directory.
    GenData {
        #[command(subcommand)]
        task: GenTask,
    },
    /// Train one student run.
    Train(TrainArgs),
    /// Train a reverse-LM teacher on right-to-left copies of the data.
    TrainTeacher(TrainArgs),
    /// Re-evaluate a run checkpoint on the full test split.
    Eval {
        run_dir: PathBuf,
        /// Checkpoint to load: final or best.
        #[arg(long, default_value = "final")]
        which: String,
    },
    /// Run every (group, seed) job of a manifest.
    Sweep {
        manifest: PathBuf,
        /// Retrain runs that already have a summary.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate finished runs into method × task tables.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum GenTask {
    /// Path-star graphs G(d, l).
    PathStar {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        l: usize,
        /// Training instances.
        #[arg(long)]
        n: usize,
        /// Test instances; defaults to a tenth of `n`, at least one.
        #[arg(long)]
        n_test: Option<usize>,
        /// Size of the node universe.
        #[arg(long, default_value_t = 50)]
        nodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Multi-component sibling discovery with K components of support N.
    Sibling {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n_values: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        n_test: Option<usize>,
        /// Shuffle block order per instance.
        #[arg(long)]
        shuffle_components: bool,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named preset used instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to aggregate.
    #[arg(required_unless_present = "manifest")]
    runs: Vec<PathBuf>,
    /// Aggregate the runs a manifest expects, marking absent ones.
    #[arg(long, conflicts_with = "runs")]
    manifest: Option<PathBuf>,
    /// Denominator group of the convergence-ratio table.
    #[arg(long)]
    baseline: Option<String>,
    /// Metric key to tabulate instead of each run's primary metric.
    #[arg(long)]
    metric: Option<String>,
    /// Directory for `metrics.csv`, `ratios.csv` and `report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<fsp::Error>()) {
        Some(fsp::Error::NonFinite { dump, .. }) => {
            if let Some(p) = dump {
                eprintln!("batch dump: {}", p.display());
            }
            3
        }
        Some(fsp::Error::MissingArtifact(_)) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { task } => gen_data(task),
        Command::Train(args) => {
            let out = train(&train_config(&args)?)?;
            print_outcome(&out);
            Ok(())
        }
        Command::TrainTeacher(args) => {
            let out = train_teacher(&train_config(&args)?)?;
            print_outcome(&out);
            println!(
                "teacher checkpoint: {}",
                out.run_dir.join("final.ckpt").display()
            );
            Ok(())
        }
        Command::Eval { run_dir, which } => {
            let metrics = evaluate_run(&run_dir, &which)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Sweep { manifest, force } => sweep(&manifest, force),
        Command::Report(args) => report_cmd(args),
    }
}

fn gen_data(task: GenTask) -> Result<()> {
    let default_test = |n: usize| n.div_ceil(10).max(1);
    let (spec, n, n_test, seed, out) = match task {
        GenTask::PathStar {
            d,
            l,
            n,
            n_test,
            nodes,
            seed,
            out,
        } => {
            let cfg = PathStarConfig {
                n_nodes: nodes,
                ..PathStarConfig::new(d, l)
            };
            (
                TaskSpec::PathStar(cfg),
                n,
                n_test.unwrap_or(default_test(n)),
                seed,
                out,
            )
        }
        GenTask::Sibling {
            k,
            n_values,
            n,
            n_test,
            shuffle_components,
            seed,
            out,
        } => {
            let cfg = SiblingConfig {
                shuffle_components,
                ..SiblingConfig::new(k, n_values)
            };
            (
                TaskSpec::Sibling(cfg),
                n,
                n_test.unwrap_or(default_test(n)),
                seed,
                out,
            )
        }
    };
    spec.validate()?;
    let (train, test) = generate_splits(&spec, n, n_test, seed)?;
    let m = write_dataset_dir(&out, &spec, seed, &train, &test)?;
    println!(
        "wrote {} train and {} test instances to {}",
        m.n_train,
        m.n_test,
        out.display()
    );
    println!("content hash: {}", m.content_hash);
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), _) => {
            if !p.exists() {
                return Err(fsp::Error::MissingArtifact(p.clone()).into());
            }
            TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?
        }
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_outcome(out: &RunOutcome) {
    println!("run dir: {}", out.run_dir.display());
    println!("steps: {}", out.summary.steps);
    for (k, v) in &out.summary.final_metrics {
        println!("{k}: {v}");
    }
}

fn worker_threads() -> Result<usize> {
    match std::env::var("FSP_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| anyhow!("FSP_THREADS must be a positive integer, got '{v}'"))?;
            if n == 0 {
                bail!("FSP_THREADS must be positive");
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

/// Runs `jobs` on up to `threads` workers; returns failures in job order.
fn run_jobs(jobs: &[Job], threads: usize, force: bool) -> Vec<(usize, anyhow::Error)> {
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let dir = job.config.run_dir();
                let label = format!("{} seed {}", job.group, job.seed);
                if !force && RunSummary::read(&dir).is_ok() {
                    println!("[skip] {label}: {}", dir.display());
                    continue;
                }
                let res = if job.teacher {
                    train_teacher(&job.config)
                } else {
                    train(&job.config)
                };
                match res {
                    Ok(out) => println!("[done] {label}: {}", out.run_dir.display()),
                    Err(e) => {
                        eprintln!("[fail] {label}: {e}");
                        failures
                            .lock()
                            .expect("no poisoned lock")
                            .push((i, anyhow::Error::new(e)));
                    }
                }
            });
        }
    });
    let mut f = failures.into_inner().expect("no poisoned lock");
    f.sort_by_key(|(i, _)| *i);
    f
}

fn sweep(path: &Path, force: bool) -> Result<()> {
    let m = ExperimentManifest::read(path)?;
    let jobs = m.jobs()?;
    let threads = worker_threads()?;
    let (teachers, students): (Vec<Job>, Vec<Job>) = jobs.into_iter().partition(|j| j.teacher);
    let mut failures = run_jobs(&teachers, threads, force);
    failures.extend(run_jobs(&students, threads, force));
    let n = failures.len();
    match failures.into_iter().next() {
        None => Ok(()),
        Some((_, first)) => Err(first.context(format!("{n} sweep job(s) failed"))),
    }
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let (entries, baseline) = match &args.manifest {
        Some(p) => {
            let m = ExperimentManifest::read(p)?;
            let entries = m
                .jobs()?
                .into_iter()
                .map(|j| {
                    let dir = j.config.run_dir();
                    let mut e = RunEntry::from_dir(&dir);
                    e.group = j.group;
                    e.seed = j.seed;
                    if e.summary.is_none() {
                        e.task =
                            report::task_label(&j.config.data_dir).unwrap_or_else(|| "?".into());
                    }
                    if j.teacher && !e.teacher {
                        e.teacher = true;
                        e.task.push_str(" reversed");
                    }
                    e
                })
                .collect::<Vec<_>>();
            (entries, args.baseline.clone().or(m.baseline))
        }
        None => (
            args.runs.iter().map(|d| RunEntry::from_dir(d)).collect(),
            args.baseline.clone(),
        ),
    };
    let r = report::build(&entries, baseline.as_deref(), args.metric.as_deref());
    print!("{}", r.render());
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.csv"), r.metrics.to_csv()?)?;
        std::fs::write(out.join("report.json"), r.metrics.to_json()? + "\n")?;
        if r.ratio_label.is_some() {
            std::fs::write(out.join("ratios.csv"), r.ratios.to_csv()?)?;
        }
    }
    Ok(())
}
