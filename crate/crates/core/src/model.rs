//! Causal transformer: shared backbone, next-token head and unembedding,
//! plus optional auxiliary heads that read the backbone output.
//!
//! Layout follows the usual GPT-2 recipe: learned absolute positions,
//! pre-norm blocks, a final layer norm acting as the next-token head, and an
//! unembedding that is tied to the token embedding unless configured
//! otherwise. Each auxiliary head is one transformer block of model width, a
//! layer norm and an output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::TokenBatch;
use crate::error::{config_err, dim_err, invalid, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// What an auxiliary head emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxHeadKind {
    /// Next-token style logits through the shared unembedding.
    TokenLogits,
    /// Vocabulary-sized logits through the head's own projection.
    SummaryLogits,
    /// A model-width vector, no unembedding.
    SummaryVector,
}

impl AuxHeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TokenLogits => "token-logits",
            Self::SummaryLogits => "summary-logits",
            Self::SummaryVector => "summary-vector",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token-logits" => Ok(Self::TokenLogits),
            "summary-logits" => Ok(Self::SummaryLogits),
            "summary-vector" => Ok(Self::SummaryVector),
            _ => config_err(format!("unknown aux head kind '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_factor: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_aux_heads: usize,
    pub aux_head_kind: AuxHeadKind,
    /// Auxiliary heads additionally consume the embedding of an upcoming
    /// token through a linear merge, chained head to head.
    pub aux_token_injection: bool,
    pub tie_unembedding: bool,
}

impl ModelConfig {
    /// 12 layers, width 384, 6 heads, MLP factor 4.
    pub fn gpt_mini(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 12,
            d_model: 384,
            n_heads: 6,
            mlp_factor: 4,
            vocab_size,
            max_seq_len,
            n_aux_heads: 0,
            aux_head_kind: AuxHeadKind::TokenLogits,
            aux_token_injection: false,
            tie_unembedding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_factor", self.mlp_factor),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{name} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return config_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.aux_token_injection && self.aux_head_kind != AuxHeadKind::TokenLogits {
            return config_err("token injection is only defined for token-logits heads");
        }
        Ok(())
    }

    /// Width of an auxiliary head's output.
    pub fn aux_output_dim(&self) -> usize {
        match self.aux_head_kind {
            AuxHeadKind::TokenLogits | AuxHeadKind::SummaryLogits => self.vocab_size,
            AuxHeadKind::SummaryVector => self.d_model,
        }
    }

    /// Same backbone, no auxiliary heads.
    pub fn without_aux(&self) -> Self {
        Self {
            n_aux_heads: 0,
            aux_token_injection: false,
            ..self.clone()
        }
    }

    pub fn param_count(&self) -> usize {
        Layout::build(self)
            .specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: Norm,
    fc: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct AuxHead {
    merge: Option<Linear>,
    block: Block,
    ln: Norm,
    proj: Option<Linear>,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    wte: usize,
    wpe: usize,
    blocks: Vec<Block>,
    ln_f: Norm,
    lm_head: Option<usize>,
    aux: Vec<AuxHead>,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    resid_std: f64,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, std: f64) -> Linear {
        Linear {
            w: self.param(format!("{prefix}.w"), vec![d_in, d_out], Init::Normal(std)),
            b: self.param(format!("{prefix}.b"), vec![d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.param(format!("{prefix}.g"), vec![d], Init::Ones),
            b: self.param(format!("{prefix}.b"), vec![d], Init::Zeros),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, mlp: usize) -> Block {
        let rs = self.resid_std;
        Block {
            ln1: self.norm(&format!("{prefix}.ln1"), d),
            q: self.linear(&format!("{prefix}.attn.q"), d, d, INIT_STD),
            k: self.linear(&format!("{prefix}.attn.k"), d, d, INIT_STD),
            v: self.linear(&format!("{prefix}.attn.v"), d, d, INIT_STD),
            proj: self.linear(&format!("{prefix}.attn.proj"), d, d, rs),
            ln2: self.norm(&format!("{prefix}.ln2"), d),
            fc: self.linear(&format!("{prefix}.mlp.fc"), d, d * mlp, INIT_STD),
            out: self.linear(&format!("{prefix}.mlp.out"), d * mlp, d, rs),
        }
    }
}

impl Layout {
    fn build(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut lb = LayoutBuilder {
            specs: Vec::new(),
            resid_std: INIT_STD / (2.0 * c.n_layers as f64).sqrt(),
        };
        let wte = lb.param("wte".into(), vec![c.vocab_size, d], Init::Normal(INIT_STD));
        let wpe = lb.param("wpe".into(), vec![c.max_seq_len, d], Init::Normal(INIT_STD));
        let blocks = (0..c.n_layers)
            .map(|i| lb.block(&format!("h.{i}"), d, c.mlp_factor))
            .collect();
        let ln_f = lb.norm("ln_f", d);
        let lm_head = (!c.tie_unembedding).then(|| {
            lb.param(
                "lm_head".into(),
                vec![d, c.vocab_size],
                Init::Normal(INIT_STD),
            )
        });
        let aux = (0..c.n_aux_heads)
            .map(|k| {
                let p = format!("aux.{k}");
                let merge = c
                    .aux_token_injection
                    .then(|| lb.linear(&format!("{p}.merge"), 2 * d, d, INIT_STD));
                let block = lb.block(&format!("{p}.block"), d, c.mlp_factor);
                let ln = lb.norm(&format!("{p}.ln"), d);
                let proj = match c.aux_head_kind {
                    AuxHeadKind::TokenLogits => None,
                    AuxHeadKind::SummaryLogits => {
                        Some(lb.linear(&format!("{p}.proj"), d, c.vocab_size, INIT_STD))
                    }
                    AuxHeadKind::SummaryVector => {
                        Some(lb.linear(&format!("{p}.proj"), d, d, INIT_STD))
                    }
                };
                AuxHead {
                    merge,
                    block,
                    ln,
                    proj,
                }
            })
            .collect();
        Self {
            specs: lb.specs,
            wte,
            wpe,
            blocks,
            ln_f,
            lm_head,
            aux,
        }
    }
}

/// Seed for one named parameter, so a tensor's initial value does not
/// depend on which other parameters exist.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Parameter handles bound onto one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Gradients for every parameter after `tape.backward`, zero-filled for
    /// parameters the loss did not reach.
    pub fn grads<F: Scalar>(&self, tape: &mut Tape<F>) -> Vec<Vec<F>> {
        self.vars
            .iter()
            .map(|&v| {
                let n = tape.value(v).numel();
                tape.take_grad(v).unwrap_or_else(|| vec![F::zero(); n])
            })
            .collect()
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

/// Output of one auxiliary head.
#[derive(Clone, Copy, Debug)]
pub struct AuxOutput {
    /// Block output before the head's norm; the next injected head reads it.
    pub state: Var,
    /// Logits or summary vector, `[B, T, aux_output_dim]`.
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<F>>,
}

impl<F: Scalar> Model<F> {
    /// Fresh model: N(0, 0.02) weights, residual projections scaled by
    /// `1/√(2·n_layers)`, zero biases, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        let params = layout
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![F::zero(); n],
                    Init::Ones => vec![F::one(); n],
                    Init::Normal(std) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &s.name));
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| F::from_f64(dist.sample(&mut rng))).collect()
                    }
                };
                Tensor::new(s.shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        if named.len() != layout.specs.len() {
            return invalid(format!(
                "checkpoint has {} tensors, config expects {}",
                named.len(),
                layout.specs.len()
            ));
        }
        let mut params = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return invalid(format!(
                    "checkpoint tensor {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                ));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.param_names().zip(self.params.iter())
    }

    /// Weight decay applies to matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.rank() >= 2).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Copy of the backbone, next-token head and unembedding only.
    pub fn without_aux(&self) -> Self {
        let config = self.config.without_aux();
        let layout = Layout::build(&config);
        let keep = layout.specs.len();
        Self {
            config,
            layout,
            params: self.params[..keep].to_vec(),
        }
    }

    /// Index of the named parameter.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout.specs.iter().position(|s| s.name == name)
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear(&self, tape: &mut Tape<F>, p: &Bound, l: &Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(l.w))?;
        tape.add_broadcast(y, p.var(l.b))
    }

    fn norm(&self, tape: &mut Tape<F>, p: &Bound, n: &Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(n.g), p.var(n.b), F::from_f64(LN_EPS))
    }

    fn block(&self, tape: &mut Tape<F>, p: &Bound, blk: &Block, x: Var) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let h = self.norm(tape, p, &blk.ln1, x)?;
        let q = self.linear(tape, p, &blk.q, h)?;
        let k = self.linear(tape, p, &blk.k, h)?;
        let v = self.linear(tape, p, &blk.v, h)?;
        let q = tape.split_heads(q, heads)?;
        let k = tape.split_heads(k, heads)?;
        let v = tape.split_heads(v, heads)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let att = tape.causal_softmax(scores, F::from_f64(1.0 / (dh as f64).sqrt()))?;
        let y = tape.batch_matmul(att, v, false)?;
        let y = tape.merge_heads(y, heads)?;
        let y = self.linear(tape, p, &blk.proj, y)?;
        let x = tape.add(x, y)?;
        let h = self.norm(tape, p, &blk.ln2, x)?;
        let f = self.linear(tape, p, &blk.fc, h)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, p, &blk.out, f)?;
        tape.add(x, f)
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.len > self.config.max_seq_len {
            return invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len, self.config.max_seq_len
            ));
        }
        if let Some(&bad) = tokens
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ));
        }
        Ok(())
    }

    /// Token plus position embedding, `[B, T, d]`.
    fn embed(&self, tape: &mut Tape<F>, p: &Bound, tokens: &TokenBatch) -> Result<Var> {
        self.check_tokens(tokens)?;
        let x = tape.embedding(
            p.var(self.layout.wte),
            &tokens.ids,
            &[tokens.batch, tokens.len],
        )?;
        let pos: Vec<u32> = (0..tokens.len as u32).collect();
        let pe = tape.embedding(p.var(self.layout.wpe), &pos, &[tokens.len])?;
        tape.add_broadcast(x, pe)
    }

    /// Backbone output `[B, T, d]`. Position `t` depends on tokens `≤ t` only.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        Ok(*self
            .forward_layers(tape, p, tokens)?
            .last()
            .expect("at least one layer"))
    }

    /// Output of every backbone block, in depth order.
    pub fn forward_layers(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        tokens: &TokenBatch,
    ) -> Result<Vec<Var>> {
        let mut x = self.embed(tape, p, tokens)?;
        let mut outs = Vec::with_capacity(self.layout.blocks.len());
        for blk in &self.layout.blocks {
            x = self.block(tape, p, blk, x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Next-token head: final layer norm over the backbone output.
    pub fn head(&self, tape: &mut Tape<F>, p: &Bound, hidden: Var) -> Result<Var> {
        self.norm(tape, p, &self.layout.ln_f, hidden)
    }

    fn unembed(&self, tape: &mut Tape<F>, p: &Bound, h: Var) -> Result<Var> {
        match self.layout.lm_head {
            Some(w) => tape.matmul(h, p.var(w)),
            None => tape.matmul_t(h, p.var(self.layout.wte)),
        }
    }

    /// Next-token logits `[B, T, V]` from the backbone output.
    pub fn ntp_logits(&self, tape: &mut Tape<F>, p: &Bound, hidden: Var) -> Result<Var> {
        let h = self.head(tape, p, hidden)?;
        self.unembed(tape, p, h)
    }

    /// Runs auxiliary head `head_index` on `input`, which is the backbone
    /// output, or for injected heads the previous head's `state`.
    /// `extra_tokens` (`[B·T]` ids) is required exactly when the model was
    /// built with token injection.
    pub fn aux_forward(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        input: Var,
        head_index: usize,
        extra_tokens: Option<&[u32]>,
    ) -> Result<AuxOutput> {
        let Some(head) = self.layout.aux.get(head_index) else {
            return config_err(format!(
                "aux head {head_index} requested but the model has {}",
                self.layout.aux.len()
            ));
        };
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return dim_err(format!(
                "aux input must be [B, T, {}], got {shape:?}",
                self.config.d_model
            ));
        }
        let x = match (&head.merge, extra_tokens) {
            (Some(merge), Some(extra)) => {
                if let Some(&bad) = extra
                    .iter()
                    .find(|&&id| id as usize >= self.config.vocab_size)
                {
                    return invalid(format!("injected token {bad} outside vocabulary"));
                }
                let e = tape.embedding(p.var(self.layout.wte), extra, &shape[..2])?;
                let cat = tape.concat(input, e)?;
                self.linear(tape, p, merge, cat)?
            }
            (Some(_), None) => return config_err("token-injected aux head needs extra tokens"),
            (None, Some(_)) => {
                return config_err("extra tokens supplied to an aux head without token injection")
            }
            (None, None) => input,
        };
        let state = self.block(tape, p, &head.block, x)?;
        let h = self.norm(tape, p, &head.ln, state)?;
        let out = match &head.proj {
            None => self.unembed(tape, p, h)?,
            Some(l) => self.linear(tape, p, l, h)?,
        };
        Ok(AuxOutput { state, out })
    }

    /// Inference-only next-token logits `[B, T, V]`.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let h = self.forward_hidden(&mut tape, &p, tokens)?;
        let l = self.ntp_logits(&mut tape, &p, h)?;
        Ok(tape.value(l).clone())
    }

    /// SHA-256 over parameter names and little-endian `f32` values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            mlp_factor: 2,
            vocab_size: vocab,
            max_seq_len: 12,
            n_aux_heads: 0,
            aux_head_kind: AuxHeadKind::TokenLogits,
            aux_token_injection: false,
            tie_unembedding: true,
        }
    }

    #[test]
    fn gpt_mini_preset() {
        let c = ModelConfig::gpt_mini(54, 64);
        assert_eq!(
            (c.n_layers, c.d_model, c.n_heads, c.mlp_factor),
            (12, 384, 6, 4)
        );
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = tiny(10);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let c = tiny(10);
        let (d, v, t, m, l) = (16, 10, 12, 2, 2);
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * m * d + d * m) + (d * m * d + d);
        let expected = v * d + t * d + l * block + 2 * d;
        assert_eq!(c.param_count(), expected);
        let model = Model::<f64>::new(c.clone(), 0).unwrap();
        assert_eq!(model.num_params(), expected);

        let mut untied = c.clone();
        untied.tie_unembedding = false;
        assert_eq!(untied.param_count(), expected + d * v);

        let mut aux = c;
        aux.n_aux_heads = 2;
        aux.aux_head_kind = AuxHeadKind::SummaryVector;
        assert_eq!(
            aux.param_count(),
            expected + 2 * (block + 2 * d + d * d + d)
        );
    }

    #[test]
    fn aux_heads_do_not_perturb_backbone_init() {
        let base = Model::<f32>::new(tiny(10), 3).unwrap();
        let mut c = tiny(10);
        c.n_aux_heads = 3;
        let with_aux = Model::<f32>::new(c, 3).unwrap();
        assert_eq!(base.params(), with_aux.without_aux().params());
    }

    #[test]
    fn tied_unembedding_aliases_embedding() {
        let mut model = Model::<f64>::new(tiny(7), 1).unwrap();
        let toks = TokenBatch::single(&[1, 2, 3]).unwrap();
        let before = model.logits(&toks).unwrap();
        let wte = model.param_index("wte").unwrap();
        // bump the embedding row of token 5: its logit must move everywhere
        for (j, x) in model.params_mut()[wte].data_mut()[5 * 16..6 * 16]
            .iter_mut()
            .enumerate()
        {
            *x += 0.1 * j as f64;
        }
        let after = model.logits(&toks).unwrap();
        for t in 0..3 {
            assert_ne!(before.data()[t * 7 + 5], after.data()[t * 7 + 5]);
            assert_eq!(before.data()[t * 7 + 4], after.data()[t * 7 + 4]);
        }
    }

    #[test]
    fn extra_tokens_need_injection_heads() {
        let mut c = tiny(10);
        c.n_aux_heads = 1;
        let model = Model::<f64>::new(c, 0).unwrap();
        let toks = TokenBatch::single(&[1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let h = model.forward_hidden(&mut tape, &p, &toks).unwrap();
        let err = model.aux_forward(&mut tape, &p, h, 0, Some(&[1, 2, 3]));
        assert!(matches!(err, Err(crate::Error::Config(_))));
        assert!(matches!(
            model.aux_forward(&mut tape, &p, h, 1, None),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn rejects_out_of_vocab_and_overlong() {
        let model = Model::<f32>::new(tiny(10), 0).unwrap();
        assert!(model
            .logits(&TokenBatch::single(&[1, 10]).unwrap())
            .is_err());
        let long: Vec<u32> = vec![1; 13];
        assert!(model.logits(&TokenBatch::single(&long).unwrap()).is_err());
    }
}
