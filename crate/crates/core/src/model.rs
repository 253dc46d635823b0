//! A small decoder-only transformer with per-layer activation taps.
//!
//! Pre-norm residual blocks, learned absolute positions, GELU feed-forward,
//! strictly causal attention. Every weight matrix that adapters may wrap is
//! routed through a site hook, so an adapted model reuses this forward
//! verbatim and substitutes only the targeted matmuls.
//!
//! Weights are stored `[in, out]` (activations are row vectors). The
//! activation taps are the residual stream: tap 0 is the embedding output,
//! tap `l+1` the output of block `l`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::corpus::SEP_ID;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_seq,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Which weight matrix of which layer a site hook is looking at.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfUp,
    FfDown,
}

impl SiteKind {
    pub fn label(&self) -> &'static str {
        match self {
            SiteKind::AttnQ => "attn_q",
            SiteKind::AttnK => "attn_k",
            SiteKind::AttnV => "attn_v",
            SiteKind::AttnO => "attn_o",
            SiteKind::FfUp => "ff_up",
            SiteKind::FfDown => "ff_down",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl Site {
    pub fn label(&self) -> String {
        format!("l{}.{}", self.layer, self.kind.label())
    }
}

/// Post-block hidden states, index 0 = embedding output.
#[derive(Clone, Debug)]
pub struct LayerActivations {
    pub taps: Vec<Tensor>,
}

impl LayerActivations {
    pub fn n_layers(&self) -> usize {
        self.taps.len() - 1
    }
}

#[derive(Clone)]
struct BlockParams {
    ln1_g: Tensor,
    ln1_b: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
}

#[derive(Clone)]
pub struct Model {
    cfg: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<BlockParams>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    lm_head: Tensor,
}

/// Tape handles for one registration of the model parameters.
pub struct BoundModel {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub ln_f_g: Var,
    pub ln_f_b: Var,
    pub lm_head: Var,
}

pub struct BoundBlock {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

pub struct TapeForward {
    pub logits: Var,
    pub taps: Vec<Var>,
}

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e30;

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let randn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| Tensor::randn(shape, INIT_STD, rng);
        let tok_emb = randn(vec![cfg.vocab_size, d], &mut rng);
        let pos_emb = randn(vec![cfg.max_seq, d], &mut rng);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockParams {
                ln1_g: Tensor::from_vec(vec![d], vec![1.0; d])?,
                ln1_b: Tensor::zeros(vec![d]),
                w_q: randn(vec![d, d], &mut rng),
                w_k: randn(vec![d, d], &mut rng),
                w_v: randn(vec![d, d], &mut rng),
                w_o: randn(vec![d, d], &mut rng),
                ln2_g: Tensor::from_vec(vec![d], vec![1.0; d])?,
                ln2_b: Tensor::zeros(vec![d]),
                w_up: randn(vec![d, cfg.d_ff], &mut rng),
                b_up: Tensor::zeros(vec![cfg.d_ff]),
                w_down: randn(vec![cfg.d_ff, d], &mut rng),
                b_down: Tensor::zeros(vec![d]),
            });
        }
        let ln_f_g = Tensor::from_vec(vec![d], vec![1.0; d])?;
        let ln_f_b = Tensor::zeros(vec![d]);
        let lm_head = randn(vec![d, cfg.vocab_size], &mut rng);
        Ok(Model { cfg, tok_emb, pos_emb, blocks, ln_f_g, ln_f_b, lm_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Flip gradient tracking on every parameter. The base model is frozen
    /// by default; adapters register themselves as the only trainables.
    pub fn set_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("model.tok_emb".into(), &self.tok_emb),
            ("model.pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("model.l{i}.ln1.g"), &b.ln1_g));
            out.push((format!("model.l{i}.ln1.b"), &b.ln1_b));
            out.push((format!("model.l{i}.attn_q"), &b.w_q));
            out.push((format!("model.l{i}.attn_k"), &b.w_k));
            out.push((format!("model.l{i}.attn_v"), &b.w_v));
            out.push((format!("model.l{i}.attn_o"), &b.w_o));
            out.push((format!("model.l{i}.ln2.g"), &b.ln2_g));
            out.push((format!("model.l{i}.ln2.b"), &b.ln2_b));
            out.push((format!("model.l{i}.ff_up.w"), &b.w_up));
            out.push((format!("model.l{i}.ff_up.b"), &b.b_up));
            out.push((format!("model.l{i}.ff_down.w"), &b.w_down));
            out.push((format!("model.l{i}.ff_down.b"), &b.b_down));
        }
        out.push(("model.ln_f.g".into(), &self.ln_f_g));
        out.push(("model.ln_f.b".into(), &self.ln_f_b));
        out.push(("model.lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("model.tok_emb".into(), &mut self.tok_emb),
            ("model.pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("model.l{i}.ln1.g"), &mut b.ln1_g));
            out.push((format!("model.l{i}.ln1.b"), &mut b.ln1_b));
            out.push((format!("model.l{i}.attn_q"), &mut b.w_q));
            out.push((format!("model.l{i}.attn_k"), &mut b.w_k));
            out.push((format!("model.l{i}.attn_v"), &mut b.w_v));
            out.push((format!("model.l{i}.attn_o"), &mut b.w_o));
            out.push((format!("model.l{i}.ln2.g"), &mut b.ln2_g));
            out.push((format!("model.l{i}.ln2.b"), &mut b.ln2_b));
            out.push((format!("model.l{i}.ff_up.w"), &mut b.w_up));
            out.push((format!("model.l{i}.ff_up.b"), &mut b.b_up));
            out.push((format!("model.l{i}.ff_down.w"), &mut b.w_down));
            out.push((format!("model.l{i}.ff_down.b"), &mut b.b_down));
        }
        out.push(("model.ln_f.g".into(), &mut self.ln_f_g));
        out.push(("model.ln_f.b".into(), &mut self.ln_f_b));
        out.push(("model.lm_head".into(), &mut self.lm_head));
        out
    }

    /// In-dimension and out-dimension of a site's weight matrix.
    pub fn site_dims(&self, kind: SiteKind) -> (usize, usize) {
        let d = self.cfg.d_model;
        match kind {
            SiteKind::FfUp => (d, self.cfg.d_ff),
            SiteKind::FfDown => (self.cfg.d_ff, d),
            _ => (d, d),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            tok_emb: tape.leaf(&self.tok_emb),
            pos_emb: tape.leaf(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1_g: tape.leaf(&b.ln1_g),
                    ln1_b: tape.leaf(&b.ln1_b),
                    w_q: tape.leaf(&b.w_q),
                    w_k: tape.leaf(&b.w_k),
                    w_v: tape.leaf(&b.w_v),
                    w_o: tape.leaf(&b.w_o),
                    ln2_g: tape.leaf(&b.ln2_g),
                    ln2_b: tape.leaf(&b.ln2_b),
                    w_up: tape.leaf(&b.w_up),
                    b_up: tape.leaf(&b.b_up),
                    w_down: tape.leaf(&b.w_down),
                    b_down: tape.leaf(&b.b_down),
                })
                .collect(),
            ln_f_g: tape.leaf(&self.ln_f_g),
            ln_f_b: tape.leaf(&self.ln_f_b),
            lm_head: tape.leaf(&self.lm_head),
        }
    }

    /// Tape handles in [`Self::named_params`] order.
    pub fn bound_params(&self, bound: &BoundModel) -> Vec<(String, Var)> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let vars = [
            vec![bound.tok_emb, bound.pos_emb],
            bound
                .blocks
                .iter()
                .flat_map(|b| {
                    vec![
                        b.ln1_g, b.ln1_b, b.w_q, b.w_k, b.w_v, b.w_o, b.ln2_g, b.ln2_b, b.w_up,
                        b.b_up, b.w_down, b.b_down,
                    ]
                })
                .collect(),
            vec![bound.ln_f_g, bound.ln_f_b, bound.lm_head],
        ]
        .concat();
        names.into_iter().zip(vars).collect()
    }

    fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("forward on an empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary (size {})",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn causal_mask(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                data[i * n + j] = MASK_NEG;
            }
        }
        Tensor::from_vec(vec![n, n], data).expect("mask")
    }

    /// Causal forward on a tape, with every adaptable matmul routed through
    /// `site_linear`. Returns final logits plus all residual-stream taps.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[usize],
        site_linear: &mut dyn FnMut(&mut Tape, Site, Var, Var) -> Result<Var>,
    ) -> Result<TapeForward> {
        self.validate_tokens(tokens)?;
        let n = tokens.len();
        let d = self.cfg.d_model;
        let n_heads = self.cfg.n_heads;
        let dh = d / n_heads;

        let emb = tape.embedding(bound.tok_emb, tokens)?;
        let pos = tape.slice_rows(bound.pos_emb, 0, n)?;
        let mut x = tape.add(emb, pos)?;
        let mut taps = vec![x];

        let mask = Self::causal_mask(n);
        let mask_var = tape.constant(&mask);

        for (layer, b) in bound.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
            let q = site_linear(tape, Site { layer, kind: SiteKind::AttnQ }, h, b.w_q)?;
            let k = site_linear(tape, Site { layer, kind: SiteKind::AttnK }, h, b.w_k)?;
            let v = site_linear(tape, Site { layer, kind: SiteKind::AttnV }, h, b.w_v)?;
            let mut heads = Vec::with_capacity(n_heads);
            for hh in 0..n_heads {
                let qh = tape.slice_cols(q, hh * dh, dh)?;
                let kh = tape.slice_cols(k, hh * dh, dh)?;
                let vh = tape.slice_cols(v, hh * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let masked = tape.add(scaled, mask_var)?;
                let att = tape.softmax_rows(masked)?;
                heads.push(tape.matmul(att, vh)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let attn_out = site_linear(tape, Site { layer, kind: SiteKind::AttnO }, ctx, b.w_o)?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
            let up = site_linear(tape, Site { layer, kind: SiteKind::FfUp }, h2, b.w_up)?;
            let up = tape.add_row(up, b.b_up)?;
            let act = tape.gelu(up);
            let down = site_linear(tape, Site { layer, kind: SiteKind::FfDown }, act, b.w_down)?;
            let down = tape.add_row(down, b.b_down)?;
            x = tape.add(x, down)?;
            taps.push(x);
        }

        let normed = tape.layer_norm(x, bound.ln_f_g, bound.ln_f_b, LN_EPS)?;
        let logits = tape.matmul(normed, bound.lm_head)?;
        Ok(TapeForward { logits, taps })
    }

    /// Plain tape forward with no adapters.
    pub fn forward_tape(&self, tape: &mut Tape, tokens: &[usize]) -> Result<TapeForward> {
        let bound = self.bind(tape);
        self.forward_bound(tape, &bound, tokens, &mut |tape, _site, x, w| tape.matmul(x, w))
    }
}

/// Mean cross-entropy of logits against aligned targets. The next-token
/// shift (loss at position t predicts token t+1) is the caller's convention;
/// see [`next_token_loss`].
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Teacher-forced next-token loss over positions `[from, to)`: the logits at
/// position t are scored against token t+1.
pub fn next_token_loss(
    tape: &mut Tape,
    logits: Var,
    tokens: &[usize],
    from: usize,
    to: usize,
) -> Result<Var> {
    if from >= to || to > tokens.len() || from == 0 {
        return Err(Error::Contract(format!(
            "next_token_loss span [{from}, {to}) invalid for {} tokens",
            tokens.len()
        )));
    }
    let rows = tape.slice_rows(logits, from - 1, to - from)?;
    lm_loss(tape, rows, &tokens[from..to])
}

/// Anything that can run tokens through the backbone and expose taps.
/// The planted test fixture implements this too.
pub trait Backbone {
    fn forward(&self, tokens: &[usize]) -> Result<(Tensor, LayerActivations)>;
    fn n_layers(&self) -> usize;
    fn max_seq(&self) -> usize;
    fn vocab_size(&self) -> usize;
}

impl Backbone for Model {
    fn forward(&self, tokens: &[usize]) -> Result<(Tensor, LayerActivations)> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, tokens)?;
        let logits = tape.value(fwd.logits).detached();
        let taps = fwd.taps.iter().map(|&t| tape.value(t).detached()).collect();
        Ok((logits, LayerActivations { taps }))
    }

    fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    fn max_seq(&self) -> usize {
        self.cfg.max_seq
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }
}

/// Greedy decoding: repeatedly appends the argmax of the final-position
/// logits, stopping at `eos`, `max_new` tokens, or the context limit.
pub fn generate_greedy<B: Backbone>(
    backbone: &B,
    prompt: &[usize],
    max_new: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Input("generate_greedy needs a nonempty prompt".into()));
    }
    let mut out = prompt.to_vec();
    for _ in 0..max_new {
        if out.len() >= backbone.max_seq() {
            break;
        }
        let (logits, _) = backbone.forward(&out)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        out.push(best);
        if Some(best) == eos {
            break;
        }
    }
    Ok(out)
}

/// Test backbone that injects a pair-consistency signal at one tap: when the
/// two SEP-separated halves share a marker token, a fixed direction is added
/// to that tap's rows (and subtracted otherwise). All other taps and the
/// logits come straight from the inner model.
pub struct PlantedBackbone {
    inner: Model,
    tap: usize,
    markers: HashSet<usize>,
    direction: Vec<f64>,
    strength: f64,
}

impl PlantedBackbone {
    pub fn new(
        inner: Model,
        tap: usize,
        markers: HashSet<usize>,
        strength: f64,
        seed: u64,
    ) -> Result<Self> {
        if tap > inner.config().n_layers {
            return Err(Error::Config(format!(
                "planted tap {tap} out of range for {} layers",
                inner.config().n_layers
            )));
        }
        let d = inner.config().d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::randn(vec![d], 1.0, &mut rng);
        let norm = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let direction = raw.data().iter().map(|v| v / norm).collect();
        Ok(PlantedBackbone { inner, tap, markers, direction, strength })
    }

    pub fn inner(&self) -> &Model {
        &self.inner
    }

    fn pair_sign(&self, tokens: &[usize]) -> f64 {
        let sep = tokens.iter().position(|&t| t == SEP_ID).unwrap_or(tokens.len());
        let first: HashSet<usize> =
            tokens[..sep].iter().copied().filter(|t| self.markers.contains(t)).collect();
        let shared = tokens
            .get(sep + 1..)
            .unwrap_or(&[])
            .iter()
            .any(|t| first.contains(t));
        if shared {
            1.0
        } else {
            -1.0
        }
    }
}

impl Backbone for PlantedBackbone {
    fn forward(&self, tokens: &[usize]) -> Result<(Tensor, LayerActivations)> {
        let (logits, mut acts) = self.inner.forward(tokens)?;
        let s = self.pair_sign(tokens) * self.strength;
        let tap = &mut acts.taps[self.tap];
        let d = self.direction.len();
        let rows = tap.numel() / d;
        for r in 0..rows {
            for j in 0..d {
                tap.data_mut()[r * d + j] += s * self.direction[j];
            }
        }
        Ok((logits, acts))
    }

    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    fn max_seq(&self) -> usize {
        self.inner.max_seq()
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
}
