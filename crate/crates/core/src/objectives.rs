//! Training objectives: target construction and total loss for next-token
//! prediction and each auxiliary variant.
//!
//! Positions are 0-based here. Logits at position `t` predict `x[t+1]`; an
//! auxiliary target at `t` only ever looks at positions `≥ t+2` within the
//! row's real length, so nothing past the end of a sequence is read.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::batch::TokenBatch;
use crate::error::{config_err, invalid, Error, Result};
use crate::model::{AuxHeadKind, Bound, Model, ModelConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    TfIdf,
}

/// Which teacher representation a reverse-LM summary is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherLayer {
    /// Output of the final norm (the next-token head), before unembedding.
    Last,
    /// Output of backbone block `k` (1-based).
    Depth(usize),
}

impl fmt::Display for TeacherLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Last => write!(f, "last"),
            Self::Depth(k) => write!(f, "depth-{k}"),
        }
    }
}

impl TeacherLayer {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(Self::Last);
        }
        match s.strip_prefix("depth-").and_then(|k| k.parse().ok()) {
            Some(k) if k >= 1 => Ok(Self::Depth(k)),
            _ => config_err(format!(
                "teacher layer must be 'last' or 'depth-<k>', got '{s}'"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveKind {
    Ntp,
    Mtp {
        n_aux: usize,
    },
    DsMtp {
        n_aux: usize,
    },
    MtpSkip {
        tau: usize,
    },
    FspBce {
        tau: usize,
        weighting: Weighting,
    },
    FspRevLm {
        teacher_checkpoint: PathBuf,
        teacher_layer: TeacherLayer,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub lambda_aux: f64,
}

impl ObjectiveSpec {
    pub fn ntp() -> Self {
        Self {
            kind: ObjectiveKind::Ntp,
            lambda_aux: 1.0,
        }
    }

    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            lambda_aux: 1.0,
        }
    }

    pub fn with_lambda(mut self, lambda_aux: f64) -> Self {
        self.lambda_aux = lambda_aux;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ObjectiveKind::Ntp => "ntp",
            ObjectiveKind::Mtp { .. } => "mtp",
            ObjectiveKind::DsMtp { .. } => "ds-mtp",
            ObjectiveKind::MtpSkip { .. } => "mtp-skip",
            ObjectiveKind::FspBce { .. } => "fsp-bce",
            ObjectiveKind::FspRevLm { .. } => "fsp-revlm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_aux.is_finite() || self.lambda_aux < 0.0 {
            return config_err(format!(
                "lambda_aux must be finite and >= 0, got {}",
                self.lambda_aux
            ));
        }
        match &self.kind {
            ObjectiveKind::Mtp { n_aux } | ObjectiveKind::DsMtp { n_aux } if *n_aux == 0 => {
                config_err("multi-token objectives need at least one aux head")
            }
            ObjectiveKind::MtpSkip { tau } | ObjectiveKind::FspBce { tau, .. } if *tau < 2 => {
                config_err(format!("tau must be >= 2, got {tau}"))
            }
            _ => Ok(()),
        }
    }

    /// Model configuration carrying the auxiliary heads this objective needs.
    pub fn configure_model(&self, base: &ModelConfig) -> ModelConfig {
        let (n, kind, inject) = match self.kind {
            ObjectiveKind::Ntp => (0, AuxHeadKind::TokenLogits, false),
            ObjectiveKind::Mtp { n_aux } => (n_aux, AuxHeadKind::TokenLogits, false),
            ObjectiveKind::DsMtp { n_aux } => (n_aux, AuxHeadKind::TokenLogits, true),
            ObjectiveKind::MtpSkip { .. } => (1, AuxHeadKind::TokenLogits, false),
            ObjectiveKind::FspBce { .. } => (1, AuxHeadKind::SummaryLogits, false),
            ObjectiveKind::FspRevLm { .. } => (1, AuxHeadKind::SummaryVector, false),
        };
        ModelConfig {
            n_aux_heads: n,
            aux_head_kind: kind,
            aux_token_injection: inject,
            ..base.clone()
        }
    }
}

/// Per-vocabulary tf-idf weights with binary term frequency: one sequence is
/// one document and `w(i) = ln((N+1)/(df_i+1)) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfIdfTable {
    pub weights: Vec<f64>,
    pub n_docs: usize,
    pub df: Vec<usize>,
}

impl TfIdfTable {
    pub fn from_corpus<'a, I>(corpus: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut df = vec![0usize; vocab_size];
        let mut seen = vec![usize::MAX; vocab_size];
        let mut n_docs = 0;
        for doc in corpus {
            for &tok in doc {
                let i = tok as usize;
                if i >= vocab_size {
                    return invalid(format!("token {i} outside vocabulary of {vocab_size}"));
                }
                if seen[i] != n_docs {
                    seen[i] = n_docs;
                    df[i] += 1;
                }
            }
            n_docs += 1;
        }
        if n_docs == 0 {
            return invalid("tf-idf needs a non-empty corpus");
        }
        let n = n_docs as f64;
        let weights = df
            .iter()
            .map(|&d| ((n + 1.0) / (d as f64 + 1.0)).ln() + 1.0)
            .collect();
        Ok(Self {
            weights,
            n_docs,
            df,
        })
    }

    /// All-ones weights.
    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            weights: vec![1.0; vocab_size],
            n_docs: 0,
            df: vec![0; vocab_size],
        }
    }

    pub fn weights_as<F: Scalar>(&self) -> Vec<F> {
        self.weights.iter().map(|&w| F::from_f64(w)).collect()
    }

    /// Two columns, `token_id,weight`, with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["token_id", "weight"])?;
        for (i, wt) in self.weights.iter().enumerate() {
            w.write_record([i.to_string(), format!("{wt:?}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the weight column back; document counts are not stored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut weights = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let id: usize = rec[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad token id on row {row}")))?;
            let w: f64 = rec[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad weight on row {row}")))?;
            if id != weights.len() {
                return Err(Error::Format(format!(
                    "token ids must be dense, got {id} on row {row}"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return invalid(format!("weight for token {id} must be finite and >= 0"));
            }
            weights.push(w);
        }
        let n = weights.len();
        Ok(Self {
            weights,
            n_docs: 0,
            df: vec![0; n],
        })
    }
}

/// Target for a future-summary head, one row per `(batch, position)`.
#[derive(Clone, Debug, PartialEq)]
pub enum FutureSummaryTarget<F> {
    /// `bits[row · V + i] == 1` iff token `i` occurs in the row's window.
    MultiHot {
        vocab_size: usize,
        bits: Vec<u8>,
        valid: Vec<bool>,
    },
    /// Constant summary vectors `[B, T, d]`.
    Vectors { values: Tensor<F>, valid: Vec<bool> },
}

impl<F> FutureSummaryTarget<F> {
    pub fn valid(&self) -> &[bool] {
        match self {
            Self::MultiHot { valid, .. } | Self::Vectors { valid, .. } => valid,
        }
    }
}

/// Token `offset` steps ahead of every position, and whether it exists and
/// the position is supervised.
pub fn offset_targets(
    tokens: &TokenBatch,
    offset: usize,
    loss_mask: &[bool],
) -> (Vec<u32>, Vec<bool>) {
    let targets = tokens.shifted(offset, 0);
    let mut valid = vec![false; tokens.numel()];
    for b in 0..tokens.batch {
        for t in 0..tokens.len {
            let i = b * tokens.len + t;
            valid[i] = loss_mask[i] && t + offset < tokens.lengths[b];
        }
    }
    (targets, valid)
}

fn check_mask(tokens: &TokenBatch, loss_mask: &[bool]) -> Result<()> {
    if loss_mask.len() != tokens.numel() {
        return invalid(format!(
            "loss mask has {} entries for a {}x{} batch",
            loss_mask.len(),
            tokens.batch,
            tokens.len
        ));
    }
    Ok(())
}

/// Mean cross-entropy of position `t` predicting `x[t+1]` over masked positions.
pub fn ntp_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    tokens: &TokenBatch,
    loss_mask: &[bool],
) -> Result<Var> {
    check_mask(tokens, loss_mask)?;
    let (targets, valid) = offset_targets(tokens, 1, loss_mask);
    tape.softmax_cross_entropy(logits, &targets, &valid)
}

/// Scalar pieces of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// `ntp + λ · aux`.
    pub total: Var,
    pub ntp: Var,
    pub aux: Option<Var>,
}

fn compose<F: Scalar>(
    tape: &mut Tape<F>,
    ntp: Var,
    aux: Option<Var>,
    lambda: f64,
) -> Result<LossParts> {
    let total = match aux {
        None => ntp,
        Some(a) => {
            let scaled = tape.scale(a, F::from_f64(lambda));
            tape.add(ntp, scaled)?
        }
    };
    Ok(LossParts { total, ntp, aux })
}

fn sum_vars<F: Scalar>(tape: &mut Tape<F>, vars: &[Var]) -> Result<Option<Var>> {
    let mut it = vars.iter().copied();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// `L_NTP + λ · Σ_k L_k`, where head `k` (0-based) predicts `x[t+2+k]`.
pub fn mtp_losses<F: Scalar>(
    tape: &mut Tape<F>,
    ntp_logits: Var,
    head_logits: &[Var],
    tokens: &TokenBatch,
    loss_mask: &[bool],
    lambda: f64,
) -> Result<LossParts> {
    let ntp = ntp_loss(tape, ntp_logits, tokens, loss_mask)?;
    let mut terms = Vec::with_capacity(head_logits.len());
    for (k, &logits) in head_logits.iter().enumerate() {
        let (targets, valid) = offset_targets(tokens, k + 2, loss_mask);
        terms.push(tape.softmax_cross_entropy(logits, &targets, &valid)?);
    }
    let aux = sum_vars(tape, &terms)?;
    compose(tape, ntp, aux, lambda)
}

/// Injected multi-token loss: head `k` reads the backbone state at `t` (or
/// head `k−1`'s state) merged with the embedding of `x[t+1+k]`, and predicts
/// `x[t+2+k]`. Tokens `x[t+1..=t+1+k]` therefore reach the head without
/// passing through the backbone.
#[allow(clippy::too_many_arguments)]
pub fn ds_mtp_loss<F: Scalar>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    params: &Bound,
    hidden: Var,
    ntp_logits: Var,
    tokens: &TokenBatch,
    loss_mask: &[bool],
    lambda: f64,
) -> Result<LossParts> {
    let n = model.config().n_aux_heads;
    let mut input = hidden;
    let mut heads = Vec::with_capacity(n);
    for k in 0..n {
        let extra = tokens.shifted(k + 1, 0);
        let out = model.aux_forward(tape, params, input, k, Some(&extra))?;
        heads.push(out.out);
        input = out.state;
    }
    mtp_losses(tape, ntp_logits, &heads, tokens, loss_mask, lambda)
}

/// One random future token per position: `x[t+δ]` with `δ` uniform on
/// `{2, …, min(τ, len−1−t)}`. Positions with fewer than two tokens ahead are
/// invalid.
pub fn mtp_skip_target<R: Rng>(
    tokens: &TokenBatch,
    tau: usize,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if tau < 2 {
        return invalid(format!("tau must be >= 2, got {tau}"));
    }
    let mut targets = vec![0u32; tokens.numel()];
    let mut valid = vec![false; tokens.numel()];
    for b in 0..tokens.batch {
        let len = tokens.lengths[b];
        for t in 0..len {
            let ahead = len - 1 - t;
            if ahead < 2 {
                continue;
            }
            let hi = tau.min(ahead);
            let delta = if hi == 2 { 2 } else { rng.random_range(2..=hi) };
            let i = b * tokens.len + t;
            targets[i] = tokens.get(b, t + delta);
            valid[i] = true;
        }
    }
    Ok((targets, valid))
}

/// Multi-hot bag of the tokens in `x[t+2 ..= min(t+τ, len−1)]`.
pub fn fsp_bce_target<F>(
    tokens: &TokenBatch,
    tau: usize,
    vocab_size: usize,
) -> Result<FutureSummaryTarget<F>> {
    if tau < 2 {
        return invalid(format!("tau must be >= 2, got {tau}"));
    }
    let rows = tokens.numel();
    let mut bits = vec![0u8; rows * vocab_size];
    let mut valid = vec![false; rows];
    for b in 0..tokens.batch {
        let len = tokens.lengths[b];
        for t in 0..len {
            if t + 2 >= len {
                break;
            }
            let row = b * tokens.len + t;
            valid[row] = true;
            let end = (t + tau).min(len - 1);
            for s in t + 2..=end {
                let id = tokens.get(b, s) as usize;
                if id >= vocab_size {
                    return invalid(format!("token {id} outside vocabulary of {vocab_size}"));
                }
                bits[row * vocab_size + id] = 1;
            }
        }
    }
    Ok(FutureSummaryTarget::MultiHot {
        vocab_size,
        bits,
        valid,
    })
}

fn combine_masks(loss_mask: &[bool], valid: &[bool]) -> Vec<bool> {
    loss_mask.iter().zip(valid).map(|(&a, &b)| a && b).collect()
}

/// Weighted BCE between summary logits and a multi-hot target.
pub fn fsp_bce_aux<F: Scalar>(
    tape: &mut Tape<F>,
    aux_logits: Var,
    target: &FutureSummaryTarget<F>,
    weights: &[F],
    loss_mask: &[bool],
) -> Result<Var> {
    let FutureSummaryTarget::MultiHot { bits, valid, .. } = target else {
        return config_err("fsp-bce needs a multi-hot target");
    };
    let mask = combine_masks(loss_mask, valid);
    tape.weighted_sigmoid_bce(aux_logits, bits, weights, &mask)
}

/// `L_NTP + λ · weighted BCE`.
#[allow(clippy::too_many_arguments)]
pub fn fsp_bce_loss<F: Scalar>(
    tape: &mut Tape<F>,
    ntp_logits: Var,
    aux_logits: Var,
    target: &FutureSummaryTarget<F>,
    weights: &[F],
    tokens: &TokenBatch,
    loss_mask: &[bool],
    lambda: f64,
) -> Result<LossParts> {
    let ntp = ntp_loss(tape, ntp_logits, tokens, loss_mask)?;
    let aux = fsp_bce_aux(tape, aux_logits, target, weights, loss_mask)?;
    compose(tape, ntp, Some(aux), lambda)
}

/// ℓ2 match between predicted summary vectors and constant teacher vectors.
pub fn fsp_revlm_aux<F: Scalar>(
    tape: &mut Tape<F>,
    aux_vectors: Var,
    target: &FutureSummaryTarget<F>,
    loss_mask: &[bool],
) -> Result<Var> {
    let FutureSummaryTarget::Vectors { values, valid } = target else {
        return config_err("fsp-revlm needs summary vectors");
    };
    let width = tape.value(aux_vectors).last_dim();
    if values.last_dim() != width {
        return config_err(format!(
            "student summary width {width} differs from teacher width {}",
            values.last_dim()
        ));
    }
    let mask = combine_masks(loss_mask, valid);
    tape.l2_match(aux_vectors, values, &mask)
}

/// `L_NTP + λ · ℓ2 match`.
pub fn fsp_revlm_loss<F: Scalar>(
    tape: &mut Tape<F>,
    ntp_logits: Var,
    aux_vectors: Var,
    target: &FutureSummaryTarget<F>,
    tokens: &TokenBatch,
    loss_mask: &[bool],
    lambda: f64,
) -> Result<LossParts> {
    let ntp = ntp_loss(tape, ntp_logits, tokens, loss_mask)?;
    let aux = fsp_revlm_aux(tape, aux_vectors, target, loss_mask)?;
    compose(tape, ntp, Some(aux), lambda)
}

/// Source of gradient-free future-summary vectors for a batch.
pub trait SummarySource<F> {
    fn summaries(&mut self, tokens: &TokenBatch) -> Result<FutureSummaryTarget<F>>;
    fn width(&self) -> usize;
}

/// Everything beyond the batch an objective may need.
pub struct ObjectiveContext<'a, F, R> {
    pub class_weights: Option<&'a [F]>,
    pub summaries: Option<&'a mut dyn SummarySource<F>>,
    pub rng: &'a mut R,
}

/// Forward pass plus total loss for any objective.
pub fn compute_loss<F: Scalar, R: Rng>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    params: &Bound,
    spec: &ObjectiveSpec,
    tokens: &TokenBatch,
    loss_mask: &[bool],
    ctx: &mut ObjectiveContext<'_, F, R>,
) -> Result<LossParts> {
    check_mask(tokens, loss_mask)?;
    let needed = spec.configure_model(model.config());
    if needed.n_aux_heads != model.config().n_aux_heads
        || (needed.n_aux_heads > 0
            && (needed.aux_head_kind != model.config().aux_head_kind
                || needed.aux_token_injection != model.config().aux_token_injection))
    {
        return config_err(format!(
            "model aux heads do not match objective {}",
            spec.name()
        ));
    }
    let hidden = model.forward_hidden(tape, params, tokens)?;
    let logits = model.ntp_logits(tape, params, hidden)?;
    let lambda = spec.lambda_aux;
    match &spec.kind {
        ObjectiveKind::Ntp => {
            let ntp = ntp_loss(tape, logits, tokens, loss_mask)?;
            compose(tape, ntp, None, lambda)
        }
        ObjectiveKind::Mtp { n_aux } => {
            let heads = (0..*n_aux)
                .map(|k| {
                    model
                        .aux_forward(tape, params, hidden, k, None)
                        .map(|o| o.out)
                })
                .collect::<Result<Vec<_>>>()?;
            mtp_losses(tape, logits, &heads, tokens, loss_mask, lambda)
        }
        ObjectiveKind::DsMtp { .. } => ds_mtp_loss(
            model, tape, params, hidden, logits, tokens, loss_mask, lambda,
        ),
        ObjectiveKind::MtpSkip { tau } => {
            let head = model.aux_forward(tape, params, hidden, 0, None)?.out;
            let (targets, valid) = mtp_skip_target(tokens, *tau, ctx.rng)?;
            let ntp = ntp_loss(tape, logits, tokens, loss_mask)?;
            let mask = combine_masks(loss_mask, &valid);
            let aux = tape.softmax_cross_entropy(head, &targets, &mask)?;
            compose(tape, ntp, Some(aux), lambda)
        }
        ObjectiveKind::FspBce { tau, weighting } => {
            let head = model.aux_forward(tape, params, hidden, 0, None)?.out;
            let v = model.config().vocab_size;
            let target = fsp_bce_target(tokens, *tau, v)?;
            let uniform;
            let weights = match (weighting, ctx.class_weights) {
                (Weighting::Uniform, _) => {
                    uniform = vec![F::one(); v];
                    &uniform[..]
                }
                (Weighting::TfIdf, Some(w)) => w,
                (Weighting::TfIdf, None) => {
                    return config_err("tf-idf weighting requested without a table")
                }
            };
            fsp_bce_loss(
                tape, logits, head, &target, weights, tokens, loss_mask, lambda,
            )
        }
        ObjectiveKind::FspRevLm { .. } => {
            let Some(source) = ctx.summaries.as_deref_mut() else {
                return config_err("fsp-revlm needs a teacher summary source");
            };
            let head = model.aux_forward(tape, params, hidden, 0, None)?.out;
            let target = source.summaries(tokens)?;
            fsp_revlm_loss(tape, logits, head, &target, tokens, loss_mask, lambda)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[&[u32]]) -> TokenBatch {
        TokenBatch::from_rows(rows, 0).unwrap()
    }

    #[test]
    fn bce_target_window_example() {
        // x = (1,2,3,2,5); from the first position the window is x[2..=4]
        let toks = batch(&[&[1, 2, 3, 2, 5]]);
        let tgt = fsp_bce_target::<f64>(&toks, 4, 6).unwrap();
        let FutureSummaryTarget::MultiHot { bits, valid, .. } = tgt else {
            unreachable!()
        };
        assert_eq!(&bits[..6], &[0, 0, 1, 1, 0, 1]);
        // repeated token 2 sets one bit, not a count
        assert!(bits.iter().all(|&b| b <= 1));
        assert_eq!(valid, vec![true, true, true, false, false]);
        // second position: window x[3..=4] = {2, 5}
        assert_eq!(&bits[6..12], &[0, 0, 1, 0, 0, 1]);
    }

    #[test]
    fn bce_target_respects_padding() {
        let toks = batch(&[&[1, 2, 3, 4], &[1, 2, 3]]);
        let tgt = fsp_bce_target::<f32>(&toks, 8, 5).unwrap();
        let FutureSummaryTarget::MultiHot { bits, valid, .. } = tgt else {
            unreachable!()
        };
        assert_eq!(
            valid,
            vec![true, true, false, false, true, false, false, false]
        );
        // the padded slot (token 0) never enters row 1's window
        assert_eq!(&bits[4 * 5..5 * 5], &[0, 0, 0, 1, 0]);
    }

    #[test]
    fn tau_below_two_rejected() {
        let toks = batch(&[&[1, 2, 3]]);
        assert!(fsp_bce_target::<f32>(&toks, 1, 4).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mtp_skip_target(&toks, 1, &mut rng).is_err());
        let spec = ObjectiveSpec::new(ObjectiveKind::FspBce {
            tau: 1,
            weighting: Weighting::Uniform,
        });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tfidf_two_document_example() {
        let docs: Vec<Vec<u32>> = vec![vec![1, 2], vec![1, 3]];
        let t = TfIdfTable::from_corpus(docs.iter().map(|d| d.as_slice()), 5).unwrap();
        assert_eq!(t.n_docs, 2);
        assert!((t.weights[1] - 1.0).abs() < 1e-12);
        assert!((t.weights[2] - (1.5f64.ln() + 1.0)).abs() < 1e-12);
        assert!((t.weights[3] - 1.405_465_108_108_164_4).abs() < 1e-9);
        assert!((t.weights[4] - (3f64.ln() + 1.0)).abs() < 1e-9);
        assert!((t.weights[4] - 2.098_612_288_668_11).abs() < 1e-9);
        // absent tokens get the largest weight
        let max = t.weights.iter().cloned().fold(0.0, f64::max);
        assert_eq!(t.weights[0], max);
    }

    #[test]
    fn tfidf_errors_and_csv() {
        let empty: Vec<&[u32]> = vec![];
        assert!(TfIdfTable::from_corpus(empty, 3).is_err());
        assert!(TfIdfTable::from_corpus([&[7u32][..]], 3).is_err());

        let t = TfIdfTable::from_corpus([&[0u32, 1][..], &[1, 1, 2][..]], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        t.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("token_id,weight\n0,"));
        let back = TfIdfTable::read_csv(&path).unwrap();
        assert_eq!(back.weights, t.weights);
    }

    #[test]
    fn skip_target_collapsed_and_empty_future() {
        let toks = batch(&[&[5, 6, 7, 8, 9]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (tg, valid) = mtp_skip_target(&toks, 2, &mut rng).unwrap();
        assert_eq!(&tg[..3], &[7, 8, 9]);
        assert_eq!(valid, vec![true, true, true, false, false]);
    }

    #[test]
    fn offset_targets_mask_boundary() {
        // T = 3: head 1 (offset 2) at position 0 targets x[2]; position 1 has none
        let toks = batch(&[&[4, 5, 6]]);
        let (tg, valid) = offset_targets(&toks, 2, &[true, true, true]);
        assert_eq!(tg[0], 6);
        assert_eq!(valid, vec![true, false, false]);
        // supervision mask is respected as well
        let (_, valid) = offset_targets(&toks, 1, &[false, true, true]);
        assert_eq!(valid, vec![false, true, false]);
    }

    #[test]
    fn teacher_layer_parsing() {
        assert_eq!(TeacherLayer::parse("last").unwrap(), TeacherLayer::Last);
        assert_eq!(
            TeacherLayer::parse("depth-2").unwrap(),
            TeacherLayer::Depth(2)
        );
        assert!(TeacherLayer::parse("depth-0").is_err());
        assert!(TeacherLayer::parse("first").is_err());
        assert_eq!(TeacherLayer::Depth(3).to_string(), "depth-3");
    }
}
