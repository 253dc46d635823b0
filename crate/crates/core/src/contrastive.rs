//! Contrastive alignment of the shared projection `A`, composed with the
//! language-modeling objective; owns the training loop.
//!
//! Anchors are A-projected, mean-pooled hidden states of the expert text at
//! the semantic layers, taken live from the training forward. Targets come
//! from a cached key dictionary: lay texts encoded with the `A` retained
//! from the previous optimizer step, so keys are always one iteration stale
//! and never receive gradient. The semantic projection at block `b` is that
//! block's feed-forward up site `A` applied to the block's output stream.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedModel, ForwardControl, SiteAdapter};
use crate::checkpoint::{self, Dtype};
use crate::corpus::{PairedCorpus, Tokenizer, EOS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::model::{next_token_loss, Backbone, Model, Site, SiteKind};
use crate::tensor::{Tape, Tensor, Var};

// ── Loss pieces ─────────────────────────────────────────────────────────

/// InfoNCE-style loss over cosine similarities:
/// `−log( Σ_{p∈χ⁺} exp(sim(x,p)/τ) / Σ_{q∈χ⁺∪χ⁻} exp(sim(x,q)/τ) )`.
/// With no negatives the numerator equals the denominator and the loss is
/// exactly zero.
pub fn contrastive_loss(
    tape: &mut Tape,
    anchor: Var,
    positives: &[Var],
    negatives: &[Var],
    tau: f64,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::Contract("contrastive_loss needs at least one positive".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if negatives.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut pos_sims = Vec::with_capacity(positives.len());
    for &p in positives {
        let s = tape.cosine_sim(anchor, p)?;
        pos_sims.push(tape.scale(s, 1.0 / tau));
    }
    let mut all_sims = pos_sims.clone();
    for &q in negatives {
        let s = tape.cosine_sim(anchor, q)?;
        all_sims.push(tape.scale(s, 1.0 / tau));
    }
    let pos_vec = tape.concat_rows(&pos_sims)?;
    let all_vec = tape.concat_rows(&all_sims)?;
    let lse_pos = tape.logsumexp(pos_vec)?;
    let lse_all = tape.logsumexp(all_vec)?;
    tape.sub(lse_all, lse_pos)
}

/// `lm + λ · mean(terms)`. With λ = 0 or no terms the language-modeling
/// node is returned untouched.
pub fn composite_loss(tape: &mut Tape, lm: Var, terms: &[Var], lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("contrastive weight must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 || terms.is_empty() {
        return Ok(lm);
    }
    let stacked = tape.concat_rows(terms)?;
    let mean = tape.mean_all(stacked);
    let weighted = tape.scale(mean, lambda);
    tape.add(lm, weighted)
}

// ── Cached key dictionary ───────────────────────────────────────────────

/// Contrastive target vectors, encoded with the `A` snapshot of
/// `snapshot_step` (−1 for the freshly initialized `A` before step 0).
#[derive(Clone, Debug, Default)]
pub struct CachedKeyDictionary {
    pub keys: BTreeMap<String, Vec<f64>>,
    pub snapshot_step: i64,
}

impl CachedKeyDictionary {
    pub fn get(&self, id: &str) -> Option<&Vec<f64>> {
        self.keys.get(id)
    }
}

/// Encodes one `[r]` key per item: frozen-backbone forward, per-layer
/// projection `z_b = A_b · mean-pooled hidden`, averaged over the layer set.
/// The snapshots must be value copies; keys carry no gradient.
pub fn refresh_keys(
    a_by_layer: &BTreeMap<usize, Tensor>,
    items: &[(String, Vec<usize>)],
    model: &Model,
    snapshot_step: i64,
) -> Result<CachedKeyDictionary> {
    if a_by_layer.is_empty() {
        return Err(Error::Config("refresh_keys with an empty semantic layer set".into()));
    }
    for (layer, a) in a_by_layer {
        if a.requires_grad() {
            return Err(Error::Contract(format!(
                "A snapshot for layer {layer} is gradient-tracked; pass a value copy"
            )));
        }
    }
    let r = a_by_layer.values().next().unwrap().shape()[0];
    let mut keys = BTreeMap::new();
    for (id, tokens) in items {
        let (_, acts) = model.forward(tokens)?;
        let mut key = vec![0.0; r];
        for (&layer, a) in a_by_layer {
            let tap = &acts.taps[layer + 1];
            let (n, d) = (tap.shape()[0], tap.shape()[1]);
            let mut pooled = vec![0.0; d];
            for row in 0..n {
                for j in 0..d {
                    pooled[j] += tap.data()[row * d + j];
                }
            }
            for v in pooled.iter_mut() {
                *v /= n as f64;
            }
            for (i, slot) in key.iter_mut().enumerate() {
                let mut s = 0.0;
                for j in 0..d {
                    s += a.data()[i * d + j] * pooled[j];
                }
                *slot += s;
            }
        }
        for v in key.iter_mut() {
            *v /= a_by_layer.len() as f64;
        }
        keys.insert(id.clone(), key);
    }
    Ok(CachedKeyDictionary { keys, snapshot_step })
}

// ── Optimizer and schedule ──────────────────────────────────────────────

/// AdamW with decoupled weight decay. Parameters without a gradient entry
/// are skipped for the step.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let numel = tensor.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let data = tensor.data_mut();
            for i in 0..numel {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }

    fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, m) in &self.m {
            out.push((format!("optim.m.{name}"), Tensor::vector(m.clone())));
        }
        for (name, v) in &self.v {
            out.push((format!("optim.v.{name}"), Tensor::vector(v.clone())));
        }
        out
    }

    fn import_state(&mut self, entries: &[(String, Tensor)], t: u64) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (name, tensor) in entries {
            if let Some(p) = name.strip_prefix("optim.m.") {
                self.m.insert(p.to_string(), tensor.data().to_vec());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                self.v.insert(p.to_string(), tensor.data().to_vec());
            }
        }
    }
}

/// Warmup-then-cosine learning rate.
pub fn lr_at(step: usize, total_steps: usize, base: f64, warmup_ratio: f64) -> f64 {
    let warm = ((total_steps as f64) * warmup_ratio).ceil() as usize;
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        let span = (total_steps - warm).max(1) as f64;
        let progress = (step - warm) as f64 / span;
        base * 0.5 * (1.0 + (PI * progress).cos())
    }
}

// ── Training configuration and log ──────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Weight of the contrastive term in the composite loss.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Semantic layer set as block indices.
    pub semantic_layers: Vec<usize>,
    pub seed: u64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            epochs: 5,
            lambda: 0.5,
            tau: 0.5,
            semantic_layers: Vec::new(),
            seed: 0,
            weight_decay: 0.0,
            warmup_ratio: 0.1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStepRecord {
    pub step: usize,
    pub lr: f64,
    pub lm_loss: f64,
    /// Per semantic block: the batch-mean contrastive term.
    pub contrastive: Vec<(usize, f64)>,
    pub composite: f64,
    /// Count of batch samples per branch.
    pub branch_hist: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<TrainStepRecord>,
    pub semantic_layers: Vec<usize>,
    pub n_branches: usize,
    /// True when the first dictionary was built from the freshly initialized
    /// A (there is no previous iteration before step 0).
    pub initial_keys_from_init: bool,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut header = vec!["step".to_string(), "lr".into(), "lm_loss".into()];
        for b in &self.semantic_layers {
            header.push(format!("contrastive_l{b}"));
        }
        header.push("composite".into());
        for i in 0..self.n_branches {
            header.push(format!("branch_{i}"));
        }
        let mut out = header.join("\t");
        out.push('\n');
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), format!("{:.8e}", s.lr), format!("{:.12e}", s.lm_loss)];
            for (_, v) in &s.contrastive {
                row.push(format!("{v:.12e}"));
            }
            row.push(format!("{:.12e}", s.composite));
            for c in &s.branch_hist {
                row.push(c.to_string());
            }
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// How branch weights are sourced during training: hard selection from the
/// per-sample style label, or the trainable router gate.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TrainControl {
    OracleSwitch,
    Router,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub warmup_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { batch_size: 12, lr: 1e-2, epochs: 30, seed: 0, warmup_ratio: 0.1 }
    }
}

/// Full-parameter language-model training of the backbone on
/// `expert ⧺ SEP ⧺ lay ⧺ EOS` sequences: the stand-in for starting from a
/// pretrained model. Parameters are frozen again on return. Returns the
/// per-step mean loss.
pub fn pretrain_backbone(
    model: &mut Model,
    corpus: &PairedCorpus,
    tokenizer: &Tokenizer,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    let sequences: Vec<Vec<usize>> = corpus
        .samples
        .iter()
        .map(|s| training_sequence(tokenizer, &s.expert, &s.lay).0)
        .collect();
    let max_seq = model.config().max_seq;
    if let Some(seq) = sequences.iter().find(|s| s.len() > max_seq) {
        return Err(Error::Length(format!(
            "pretraining sequence needs {} tokens, max_seq is {max_seq}",
            seq.len()
        )));
    }
    model.set_trainable(true);
    let mut optimizer = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e71_a11f);
    let mut schedule = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            schedule.push(chunk.to_vec());
        }
    }
    let total = schedule.len();
    let mut losses = Vec::with_capacity(total);
    for (step, batch) in schedule.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut terms = Vec::with_capacity(batch.len());
        for &si in batch {
            let tokens = &sequences[si];
            let fwd = model.forward_bound(&mut tape, &bound, tokens, &mut |t, _s, x, w| {
                t.matmul(x, w)
            })?;
            terms.push(next_token_loss(&mut tape, fwd.logits, tokens, 1, tokens.len())?);
        }
        let stacked = tape.concat_rows(&terms)?;
        let loss = tape.mean_all(stacked);
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, var) in model.bound_params(&bound) {
            if let Some(g) = grads.get(var) {
                by_name.insert(name, g.clone());
            }
        }
        drop(tape);
        let lr = lr_at(step, total, cfg.lr, cfg.warmup_ratio);
        let mut params = model.named_params_mut();
        optimizer.step(&mut params, &by_name, lr);
    }
    model.set_trainable(false);
    Ok(losses)
}

struct TrainSample {
    id: String,
    /// Branch selected by the sample's style label; 0 for single-branch
    /// schemes, where routing is vacuous.
    branch_index: usize,
    tokens: Vec<usize>,
    expert_len: usize,
    lay_tokens: Vec<usize>,
}

/// Builds the full token sequence `expert ⧺ SEP ⧺ lay ⧺ EOS` for one pair.
pub fn training_sequence(tokenizer: &Tokenizer, expert: &str, lay: &str) -> (Vec<usize>, usize) {
    let expert_ids = tokenizer.encode(expert);
    let lay_ids = tokenizer.encode(lay);
    let mut tokens = expert_ids.clone();
    tokens.push(SEP_ID);
    tokens.extend_from_slice(&lay_ids);
    tokens.push(EOS_ID);
    (tokens, expert_ids.len())
}

/// The training loop: per step, oracle-switched (or routed) forwards,
/// teacher-forced LM loss over the lay span, live anchors against the stale
/// key dictionary, one optimizer step on the adapter parameters, then a key
/// refresh with the post-step A for the next batch.
pub struct Trainer {
    pub adapted: AdaptedModel,
    cfg: TrainConfig,
    control: TrainControl,
    samples: Vec<TrainSample>,
    schedule: Vec<Vec<usize>>,
    optimizer: AdamW,
    dictionary: CachedKeyDictionary,
    step: usize,
    log: TrainLog,
}

impl Trainer {
    pub fn new(
        adapted: AdaptedModel,
        corpus: &PairedCorpus,
        tokenizer: &Tokenizer,
        styles: &[String],
        cfg: TrainConfig,
        control: TrainControl,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Contract("training corpus is empty".into()));
        }
        if control == TrainControl::Router && adapted.gates.is_none() {
            return Err(Error::Control("router training needs enable_router() first".into()));
        }
        let n_branches = adapted.n_branches();
        let max_seq = adapted.model.config().max_seq;
        let mut samples = Vec::with_capacity(corpus.len());
        for s in &corpus.samples {
            let style_index = styles
                .iter()
                .position(|st| st == &s.style)
                .ok_or_else(|| Error::Routing(format!("sample {} has style {:?} with no branch", s.id, s.style)))?;
            // single-branch schemes train jointly on every style
            let branch_index = if n_branches == 1 { 0 } else { style_index };
            if branch_index >= n_branches {
                return Err(Error::Routing(format!(
                    "style {:?} maps to branch {branch_index}, but only {n_branches} exist",
                    s.style
                )));
            }
            let (tokens, expert_len) = training_sequence(tokenizer, &s.expert, &s.lay);
            if tokens.len() > max_seq {
                return Err(Error::Length(format!(
                    "sample {} needs {} tokens, max_seq is {max_seq}",
                    s.id,
                    tokens.len()
                )));
            }
            samples.push(TrainSample {
                id: s.id.clone(),
                branch_index,
                tokens,
                expert_len,
                lay_tokens: tokenizer.encode(&s.lay),
            });
        }
        // semantic layer sanity when the constraint is on
        if cfg.lambda > 0.0 {
            if cfg.semantic_layers.is_empty() {
                return Err(Error::Config(
                    "lambda > 0 needs a nonempty semantic layer set".into(),
                ));
            }
            let n_layers = adapted.model.config().n_layers;
            for &b in &cfg.semantic_layers {
                if b >= n_layers {
                    return Err(Error::Config(format!(
                        "semantic block {b} out of range for {n_layers} layers"
                    )));
                }
                match adapted.site_adapter(Site { layer: b, kind: SiteKind::FfUp }) {
                    Some(SiteAdapter::Branched { .. }) | Some(SiteAdapter::Pair(_)) => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "semantic block {b} has no shared-A ff_up adapter"
                        )))
                    }
                }
            }
        }

        // the whole batch schedule is a pure function of the seed, so resume
        // needs no RNG state beyond the step counter
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
        let mut schedule = Vec::new();
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                schedule.push(chunk.to_vec());
            }
        }
        if let Some(cap) = cfg.max_steps {
            schedule.truncate(cap);
        }
        if schedule.is_empty() {
            return Err(Error::Config("training schedule is empty".into()));
        }

        let optimizer = AdamW::new(0.9, 0.999, 1e-8, cfg.weight_decay);
        let log = TrainLog {
            steps: Vec::new(),
            semantic_layers: cfg.semantic_layers.clone(),
            n_branches,
            initial_keys_from_init: cfg.lambda > 0.0,
        };
        let mut trainer = Trainer {
            adapted,
            cfg,
            control,
            samples,
            schedule,
            optimizer,
            dictionary: CachedKeyDictionary::default(),
            step: 0,
            log,
        };
        trainer.refresh_for_next_batch(-1)?;
        Ok(trainer)
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.len()
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dictionary(&self) -> &CachedKeyDictionary {
        &self.dictionary
    }

    fn semantic_a_values(&self) -> Result<BTreeMap<usize, Tensor>> {
        let mut out = BTreeMap::new();
        for &b in &self.cfg.semantic_layers {
            let site = Site { layer: b, kind: SiteKind::FfUp };
            let a = match self.adapted.site_adapter(site) {
                Some(SiteAdapter::Branched { a_shared, .. }) => a_shared.detached(),
                Some(SiteAdapter::Pair(p)) => p.a.detached(),
                _ => {
                    return Err(Error::Config(format!(
                        "semantic block {b} has no shared-A ff_up adapter"
                    )))
                }
            };
            out.insert(b, a);
        }
        Ok(out)
    }

    fn refresh_for_next_batch(&mut self, snapshot_step: i64) -> Result<()> {
        if self.cfg.lambda == 0.0 || self.cfg.semantic_layers.is_empty() {
            return Ok(());
        }
        let Some(batch) = self.schedule.get(self.step) else {
            return Ok(());
        };
        let items: Vec<(String, Vec<usize>)> = batch
            .iter()
            .map(|&i| (self.samples[i].id.clone(), self.samples[i].lay_tokens.clone()))
            .collect();
        let snapshots = self.semantic_a_values()?;
        self.dictionary = refresh_keys(&snapshots, &items, &self.adapted.model, snapshot_step)?;
        Ok(())
    }

    /// Runs one optimizer step. Returns false when the schedule is finished.
    pub fn step_once(&mut self) -> Result<bool> {
        let Some(batch) = self.schedule.get(self.step).cloned() else {
            return Ok(false);
        };
        let lr = lr_at(self.step, self.schedule.len(), self.cfg.lr, self.cfg.warmup_ratio);
        let use_contrastive = self.cfg.lambda > 0.0 && !self.cfg.semantic_layers.is_empty();

        let mut tape = Tape::new();
        let bound = self.adapted.bind(&mut tape);

        let mut lm_terms: Vec<Var> = Vec::with_capacity(batch.len());
        let mut anchors: BTreeMap<usize, Vec<(usize, Var)>> = BTreeMap::new(); // block -> (sample, anchor)
        let mut branch_hist = vec![0usize; self.adapted.n_branches()];

        for &si in &batch {
            let sample = &self.samples[si];
            let control = match self.control {
                TrainControl::OracleSwitch => {
                    let alpha =
                        crate::switch::switch_alpha(sample.branch_index, self.adapted.n_branches())?;
                    ForwardControl::Fixed(alpha)
                }
                TrainControl::Router => ForwardControl::Router { expert_len: sample.expert_len },
            };
            branch_hist[sample.branch_index] += 1;
            let fwd = self.adapted.forward_with(&mut tape, &bound, &sample.tokens, &control)?;
            let loss = next_token_loss(
                &mut tape,
                fwd.logits,
                &sample.tokens,
                sample.expert_len + 1,
                sample.tokens.len(),
            )?;
            lm_terms.push(loss);

            if use_contrastive {
                for &b in &self.cfg.semantic_layers {
                    let site = Site { layer: b, kind: SiteKind::FfUp };
                    let a_var = bound.site_a(site).ok_or_else(|| {
                        Error::Config(format!("semantic block {b} not bound"))
                    })?;
                    let tap = fwd.taps[b + 1];
                    let expert_rows = tape.slice_rows(tap, 0, sample.expert_len)?;
                    let pooled = tape.mean_rows(expert_rows)?;
                    let anchor = tape.matvec(a_var, pooled)?;
                    anchors.entry(b).or_default().push((si, anchor));
                }
            }
        }

        // batch-mean language modeling loss
        let lm_stack = tape.concat_rows(&lm_terms)?;
        let lm = tape.mean_all(lm_stack);

        // per-layer batch-mean contrastive terms against the stale keys
        let mut term_vars: Vec<Var> = Vec::new();
        let mut term_values: Vec<(usize, f64)> = Vec::new();
        if use_contrastive {
            for (&b, layer_anchors) in &anchors {
                let mut per_sample = Vec::with_capacity(layer_anchors.len());
                for &(si, anchor) in layer_anchors {
                    let sample = &self.samples[si];
                    let key = self.dictionary.get(&sample.id).ok_or_else(|| {
                        Error::Contract(format!("no cached key for sample {}", sample.id))
                    })?;
                    let pos = tape.constant(&Tensor::vector(key.clone()));
                    let mut negs = Vec::new();
                    for &other in &batch {
                        if other == si {
                            continue;
                        }
                        let other_id = &self.samples[other].id;
                        let neg_key = self.dictionary.get(other_id).ok_or_else(|| {
                            Error::Contract(format!("no cached key for sample {other_id}"))
                        })?;
                        negs.push(tape.constant(&Tensor::vector(neg_key.clone())));
                    }
                    per_sample.push(contrastive_loss(&mut tape, anchor, &[pos], &negs, self.cfg.tau)?);
                }
                let stacked = tape.concat_rows(&per_sample)?;
                let mean = tape.mean_all(stacked);
                term_vars.push(mean);
                term_values.push((b, tape.value(mean).item()));
            }
        }

        let composite = composite_loss(&mut tape, lm, &term_vars, self.cfg.lambda)?;
        let lm_value = tape.value(lm).item();
        let composite_value = tape.value(composite).item();

        let grads = tape.backward(composite)?;
        let mut grads_by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, var) in self.adapted.bound_trainables(&bound) {
            if let Some(g) = grads.get(var) {
                grads_by_name.insert(name, g.clone());
            }
        }
        drop(tape);

        let mut params = self.adapted.trainable_params_mut();
        self.optimizer.step(&mut params, &grads_by_name, lr);
        drop(params);

        self.log.steps.push(TrainStepRecord {
            step: self.step,
            lr,
            lm_loss: lm_value,
            contrastive: term_values,
            composite: composite_value,
            branch_hist,
        });

        let finished_step = self.step as i64;
        self.step += 1;
        self.refresh_for_next_batch(finished_step)?;
        Ok(true)
    }

    /// Runs the remaining schedule and returns the log.
    pub fn train(&mut self) -> Result<&TrainLog> {
        while self.step_once()? {}
        Ok(&self.log)
    }

    // ── Resume state ────────────────────────────────────────────────

    /// Writes an exact f64 training state: adapter parameters, optimizer
    /// moments, and the step counter. The batch schedule is a pure function
    /// of the config seed, so restoring these continues the run bit for bit.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .adapted
            .trainable_params()
            .into_iter()
            .map(|(n, t)| (n, t.detached()))
            .collect();
        entries.extend(self.optimizer.export_state());
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save_checkpoint(dir, &refs, Dtype::F64)?;
        let meta = serde_json::json!({
            "step": self.step,
            "optimizer_t": self.optimizer.step_count(),
            "seed": self.cfg.seed,
        });
        std::fs::write(dir.join("train_state.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    /// Restores a state written by [`Trainer::save_state`] into a freshly
    /// constructed trainer with the same config and corpus.
    pub fn resume_from(&mut self, dir: &Path) -> Result<()> {
        let entries = checkpoint::load_checkpoint(dir)?;
        let meta: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("train_state.json"))
                .map_err(|e| Error::Checkpoint(format!("missing train_state.json: {e}")))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad train_state.json: {e}")))?;
        let step = meta["step"].as_u64().ok_or_else(|| {
            Error::Checkpoint("train_state.json missing step".into())
        })? as usize;
        let opt_t = meta["optimizer_t"].as_u64().unwrap_or(step as u64);

        let by_name: BTreeMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, tensor) in self.adapted.trainable_params_mut() {
            let loaded = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("state is missing parameter {name}"))
            })?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, state has {:?}",
                    tensor.shape(),
                    loaded.shape()
                )));
            }
            let grad = tensor.requires_grad();
            *tensor = (*loaded).clone();
            tensor.set_requires_grad(grad);
        }
        self.optimizer.import_state(&entries, opt_t);
        self.step = step;
        self.log.steps.clear();
        self.refresh_for_next_batch(step as i64 - 1)?;
        Ok(())
    }
}
