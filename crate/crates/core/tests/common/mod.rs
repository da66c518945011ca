#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fsp::tasks::dataset::{generate_splits, write_dataset_dir};
use fsp::tasks::{PathStarConfig, SiblingConfig, TaskSpec};
use fsp::tensor::{Scalar, Tape, Tensor, Var};
use fsp::training::TrainConfig;

/// Generates a dataset directory under `root` and returns its path.
pub fn dataset(root: &Path, spec: TaskSpec, n_train: usize, n_test: usize, seed: u64) -> PathBuf {
    let dir = root.join(format!("data-{}-{seed}", spec.name()));
    let (tr, te) = generate_splits(&spec, n_train, n_test, seed).unwrap();
    write_dataset_dir(&dir, &spec, seed, &tr, &te).unwrap();
    dir
}

pub fn path_star(d: usize, l: usize) -> TaskSpec {
    TaskSpec::PathStar(PathStarConfig::new(d, l))
}

pub fn sibling(k: usize, n: usize) -> TaskSpec {
    TaskSpec::Sibling(SiblingConfig::new(k, n))
}

/// Small, fast configuration writing into `out`.
pub fn tiny_config(data: &Path, out: &Path) -> TrainConfig {
    let mut c = TrainConfig::preset("smoke").unwrap();
    c.data_dir = data.to_path_buf();
    c.output_dir = out.to_path_buf();
    c.n_layers = 1;
    c.d_model = 16;
    c.n_heads = 2;
    c.batch_size = 16;
    c.epochs = 2;
    c.train_eval_limit = 16;
    c.eval_limit = 16;
    c.eval_samples = 16;
    c
}

/// Largest relative error between the tape gradient of `f` with respect to
/// each input and a central finite difference, over every input element.
/// Relative error is `|a − n| / max(|a| + |n|, floor)`.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    h: f64,
    floor: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().as_f64()
    };
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
