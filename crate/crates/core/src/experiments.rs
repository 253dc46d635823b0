//! Experiment harness behind the CLI: one structured config document drives
//! probing, training, evaluation, generation, analysis, sweeps, and
//! parameter accounting. Every artifact lands in one run directory with a
//! manifest, and reruns with the same config and seed produce byte-identical
//! files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{attach, AdaptedModel, AdapterScheme, AttachSpec, SiteAdapter};
use crate::checkpoint::{self, Dtype};
use crate::contrastive::{pretrain_backbone, refresh_keys, PretrainConfig, TrainConfig, TrainControl, Trainer};
use crate::corpus::{
    build_vocab, load_jsonl, marker_ids, split, synth_corpus, PairedCorpus, PlantedSpec, StyleKind,
    StyleSpec, SynthSpec, Tokenizer, EOS_ID, SEP_ID,
};
use crate::error::{Error, Result};
use crate::metrics::{
    bleu4, cross_correlation, heterogeneity_report, mean_pair_cosine, rouge_l, rouge_n,
    semantic_subspace, tokenize_metric,
};
use crate::model::{generate_greedy, Backbone, Model, ModelConfig, PlantedBackbone, Site, SiteKind};
use crate::probe::{probe_backbone, ProbeOptions, ProbeReport};
use crate::switch::{
    confusion_matrix, ExecRecommender, GateScope, OracleRecommender, Recommender, SimulatedAgent,
};
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub attach: AttachSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub recommender: RecommenderSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Full-parameter LM epochs on the train split before freezing; the
    /// stand-in for a pretrained backbone. 0 skips pretraining.
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "default_pretrain_batch")]
    pub pretrain_batch: usize,
}

fn default_pretrain_lr() -> f64 {
    1e-2
}

fn default_pretrain_batch() -> usize {
    12
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub min_freq: Option<usize>,
}

fn default_split_ratio() -> f64 {
    0.8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub samples_per_style: usize,
    pub seed: u64,
    /// Style kinds by name: any of `concise`, `expanded`, `plain`.
    pub styles: Vec<String>,
    #[serde(default)]
    pub planted_layer: Option<usize>,
    #[serde(default)]
    pub planted_strength: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachSection {
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<SiteKind>,
    pub rank: usize,
    pub branches: usize,
    pub scheme: AdapterScheme,
    #[serde(default = "default_gate_scope")]
    pub gate_scope: GateScope,
}

fn default_kinds() -> Vec<SiteKind> {
    AttachSpec::default_kinds()
}

fn default_gate_scope() -> GateScope {
    GateScope::Global
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub tau: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_control")]
    pub control: String,
    #[serde(default)]
    pub probe_report: Option<PathBuf>,
}

fn default_warmup() -> f64 {
    0.1
}

fn default_control() -> String {
    "oracle_switch".into()
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            batch_size: base.batch_size,
            lr: base.lr,
            epochs: base.epochs,
            lambda: base.lambda,
            tau: base.tau,
            weight_decay: base.weight_decay,
            warmup_ratio: base.warmup_ratio,
            max_steps: None,
            control: default_control(),
            probe_report: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_npp")]
    pub negatives_per_positive: usize,
    #[serde(default)]
    pub k: Option<usize>,
}

fn default_npp() -> usize {
    1
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { negatives_per_positive: 1, k: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommenderSection {
    #[serde(default = "default_rec_kind")]
    pub kind: String,
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub command: Option<String>,
}

fn default_rec_kind() -> String {
    "oracle".into()
}

impl Default for RecommenderSection {
    fn default() -> Self {
        RecommenderSection { kind: "oracle".into(), accuracy: None, command: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default = "default_max_new")]
    pub max_new: usize,
}

fn default_max_new() -> usize {
    24
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { max_new: default_max_new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct AnalyzeSection {
    #[serde(default)]
    pub tap: Option<usize>,
}


#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    #[serde(default)]
    pub ranks: Option<Vec<usize>>,
    #[serde(default)]
    pub accuracies: Option<Vec<f64>>,
    #[serde(default)]
    pub schemes: Option<Vec<AdapterScheme>>,
    /// Optional explicit per-scheme ranks for the scheme axis; budgets must
    /// match between lora and multi_lora.
    #[serde(default)]
    pub lora_rank: Option<usize>,
}

/// Parses a config document, rejecting unknown keys and checking referenced
/// paths.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.corpus.path, &self.corpus.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("corpus: set either path or synth, not both".into()))
            }
            (None, None) => {
                return Err(Error::Config("corpus: set path or synth".into()))
            }
            (Some(p), None)
                if !p.exists() => {
                    return Err(Error::Config(format!(
                        "corpus path {} does not exist",
                        p.display()
                    )));
                }
            _ => {}
        }
        if let Some(report) = &self.train.probe_report {
            if !report.exists() {
                return Err(Error::Config(format!(
                    "probe report {} does not exist",
                    report.display()
                )));
            }
        }
        if !(self.corpus.split_ratio > 0.0 && self.corpus.split_ratio < 1.0) {
            return Err(Error::Config("corpus.split_ratio must be in (0, 1)".into()));
        }
        match self.train.control.as_str() {
            "oracle_switch" | "router" => {}
            other => {
                return Err(Error::Config(format!(
                    "train.control must be oracle_switch or router, got {other:?}"
                )))
            }
        }
        match self.recommender.kind.as_str() {
            "oracle" | "sim" | "exec" => {}
            other => {
                return Err(Error::Config(format!(
                    "recommender.kind must be oracle, sim, or exec, got {other:?}"
                )))
            }
        }
        if self.recommender.kind == "sim" && self.recommender.accuracy.is_none() {
            return Err(Error::Config("recommender sim needs an accuracy".into()));
        }
        if self.recommender.kind == "exec" && self.recommender.command.is_none() {
            return Err(Error::Config("recommender exec needs a command".into()));
        }
        Ok(())
    }

    fn synth_spec(&self) -> Result<Option<SynthSpec>> {
        let Some(synth) = &self.corpus.synth else { return Ok(None) };
        let mut styles = Vec::new();
        for name in &synth.styles {
            let kind = match name.as_str() {
                "concise" => StyleKind::Concise,
                "expanded" => StyleKind::Expanded,
                "plain" => StyleKind::Plain,
                other => {
                    return Err(Error::Config(format!("unknown synthetic style {other:?}")))
                }
            };
            styles.push(StyleSpec { name: name.clone(), kind });
        }
        let planted = match (synth.planted_layer, synth.planted_strength) {
            (Some(layer), strength) => {
                Some(PlantedSpec { layer, strength: strength.unwrap_or(6.0) })
            }
            (None, Some(_)) => {
                return Err(Error::Config("planted_strength without planted_layer".into()))
            }
            _ => None,
        };
        Ok(Some(SynthSpec {
            samples_per_style: synth.samples_per_style,
            seed: synth.seed,
            styles,
            planted,
        }))
    }

    pub fn attach_spec(&self) -> AttachSpec {
        AttachSpec {
            layers: self.attach.layers.clone(),
            kinds: self.attach.kinds.clone(),
            rank: self.attach.rank,
            branches: self.attach.branches,
            scheme: self.attach.scheme,
        }
    }
}

// ── Shared materialization ──────────────────────────────────────────────

/// Everything the commands derive from a config: corpus, splits, tokenizer,
/// style order, and the base model.
pub struct Materialized {
    pub corpus: PairedCorpus,
    pub train: PairedCorpus,
    pub test: PairedCorpus,
    pub tokenizer: Tokenizer,
    pub styles: Vec<String>,
    pub model_config: ModelConfig,
    pub planted: Option<PlantedSpec>,
    pub stratified: bool,
}

pub fn materialize(cfg: &RunConfig) -> Result<Materialized> {
    let (corpus, planted) = if let Some(path) = &cfg.corpus.path {
        (load_jsonl(path)?, None)
    } else {
        let spec = cfg.synth_spec()?.expect("validated");
        (synth_corpus(&spec)?, spec.planted)
    };
    if corpus.is_empty() {
        return Err(Error::Contract("corpus is empty".into()));
    }
    let tokenizer = build_vocab(&corpus, cfg.corpus.min_freq.unwrap_or(1))?;
    let mut styles = corpus.styles();
    styles.sort();
    let outcome = split(&corpus, cfg.corpus.split_ratio, cfg.seed)?;
    let model_config = ModelConfig {
        n_layers: cfg.model.n_layers,
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        d_ff: cfg.model.d_ff,
        vocab_size: tokenizer.vocab_size(),
        max_seq: cfg.model.max_seq,
        seed: cfg.seed,
    };
    model_config.validate()?;
    Ok(Materialized {
        corpus,
        train: outcome.train,
        test: outcome.test,
        tokenizer,
        styles,
        model_config,
        planted,
        stratified: outcome.stratified,
    })
}

/// Builds the backbone for this config: fresh weights, then the optional
/// deterministic pretraining pass on the train split, frozen on return.
pub fn base_model(cfg: &RunConfig, mat: &Materialized) -> Result<Model> {
    let mut model = Model::new(mat.model_config.clone())?;
    if cfg.model.pretrain_epochs > 0 {
        let pre = PretrainConfig {
            batch_size: cfg.model.pretrain_batch,
            lr: cfg.model.pretrain_lr,
            epochs: cfg.model.pretrain_epochs,
            seed: cfg.seed,
            warmup_ratio: 0.1,
        };
        pretrain_backbone(&mut model, &mat.train, &mat.tokenizer, &pre)?;
    }
    Ok(model)
}

// ── Manifest ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, outputs: &[&str]) -> Result<()> {
    let mut sorted: Vec<String> = outputs.iter().map(|s| s.to_string()).collect();
    sorted.sort();
    let manifest = RunManifest { command, seed: cfg.seed, outputs: sorted, config: cfg };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable manifest"),
    )?;
    Ok(())
}

// ── probe ───────────────────────────────────────────────────────────────

pub const PROBE_REPORT_FILE: &str = "probe_report.tsv";

/// Runs the probing pipeline and writes the per-layer report.
pub fn run_probe(cfg: &RunConfig, out: &Path) -> Result<ProbeReport> {
    fs::create_dir_all(out)?;
    let mat = materialize(cfg)?;
    let opts = ProbeOptions {
        negatives_per_positive: cfg.probe.negatives_per_positive,
        k: cfg.probe.k,
        seed: cfg.seed,
    };
    let backbone = base_model(cfg, &mat)?;
    let report = match &mat.planted {
        Some(p) => {
            let markers = marker_ids(&mat.tokenizer);
            let planted = PlantedBackbone::new(backbone, p.layer, markers, p.strength, cfg.seed)?;
            probe_backbone(&planted, &mat.corpus, &mat.tokenizer, &opts)?
        }
        None => probe_backbone(&backbone, &mat.corpus, &mat.tokenizer, &opts)?,
    };
    fs::write(out.join(PROBE_REPORT_FILE), report.to_tsv())?;
    write_manifest(out, "probe", cfg, &[PROBE_REPORT_FILE])?;
    Ok(report)
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub attach: AttachSpec,
    pub styles: Vec<String>,
    pub semantic_layers: Vec<usize>,
    pub router: Option<GateScope>,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const STATE_DIR: &str = "state";
const META_FILE: &str = "meta.json";

/// Saves the trainable parameters (f32 manifest format) plus the metadata
/// needed to reconstruct the adapted model.
pub fn save_adapted(dir: &Path, adapted: &AdaptedModel, meta: &CheckpointMeta) -> Result<()> {
    let params = adapted.trainable_params();
    checkpoint::save_checkpoint(dir, &params, Dtype::F32)?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta).expect("meta"))?;
    Ok(())
}

/// Rebuilds the adapted model from a checkpoint directory over a provided
/// base model (reconstructed from the same config, including pretraining):
/// adapters attached, weights loaded by name.
pub fn load_adapted(dir: &Path, base: Model) -> Result<(AdaptedModel, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(
        &fs::read_to_string(dir.join(META_FILE))
            .map_err(|e| Error::Checkpoint(format!("missing {META_FILE}: {e}")))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad {META_FILE}: {e}")))?;
    if base.config() != &meta.model {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with model config {:?}, got {:?}",
            meta.model,
            base.config()
        )));
    }
    let mut adapted = attach(base, meta.attach.clone())?;
    if let Some(scope) = meta.router {
        adapted.enable_router(scope);
    }
    let loaded = checkpoint::load_checkpoint(dir)?;
    let by_name: BTreeMap<&str, &Tensor> = loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, tensor) in adapted.trainable_params_mut() {
        let found = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing {name}")))?;
        if found.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} vs checkpoint {:?}",
                tensor.shape(),
                found.shape()
            )));
        }
        let grad = tensor.requires_grad();
        *tensor = (*found).clone();
        tensor.set_requires_grad(grad);
    }
    Ok((adapted, meta))
}

pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub final_lm_loss: f64,
    pub steps: usize,
}

/// Trains per the config and writes the checkpoint, the step log, and
/// (optionally) an exact resume state.
pub fn run_train(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    save_state: bool,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let mat = materialize(cfg)?;
    let semantic_layers = if cfg.train.lambda > 0.0 {
        let report_path = cfg
            .train
            .probe_report
            .clone()
            .unwrap_or_else(|| out.join(PROBE_REPORT_FILE));
        if !report_path.exists() {
            return Err(Error::Config(format!(
                "lambda > 0 needs a probe report; {} not found",
                report_path.display()
            )));
        }
        let report = ProbeReport::from_tsv(&fs::read_to_string(&report_path)?)?;
        let blocks = report.semantic_blocks();
        if blocks.is_empty() {
            return Err(Error::Config(
                "probe selected only the embedding tap; no block to constrain (raise probe.k or adjust the corpus)".into(),
            ));
        }
        blocks
    } else {
        Vec::new()
    };

    let model = base_model(cfg, &mat)?;
    let mut adapted = attach(model, cfg.attach_spec())?;
    let control = match cfg.train.control.as_str() {
        "router" => {
            adapted.enable_router(cfg.attach.gate_scope);
            TrainControl::Router
        }
        _ => TrainControl::OracleSwitch,
    };
    let train_cfg = TrainConfig {
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        epochs: cfg.train.epochs,
        lambda: cfg.train.lambda,
        tau: cfg.train.tau,
        semantic_layers: semantic_layers.clone(),
        seed: cfg.seed,
        weight_decay: cfg.train.weight_decay,
        warmup_ratio: cfg.train.warmup_ratio,
        max_steps: cfg.train.max_steps,
    };
    let mut trainer =
        Trainer::new(adapted, &mat.train, &mat.tokenizer, &mat.styles, train_cfg, control)?;
    if let Some(state) = resume {
        trainer.resume_from(state)?;
    }
    let log = trainer.train()?.clone();
    fs::write(out.join(TRAIN_LOG_FILE), log.to_tsv())?;

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let meta = CheckpointMeta {
        model: mat.model_config.clone(),
        attach: cfg.attach_spec(),
        styles: mat.styles.clone(),
        semantic_layers,
        router: trainer.adapted.gates.as_ref().map(|(scope, _)| *scope),
    };
    save_adapted(&ckpt_dir, &trainer.adapted, &meta)?;
    if save_state {
        trainer.save_state(&out.join(STATE_DIR))?;
    }
    write_manifest(out, "train", cfg, &[TRAIN_LOG_FILE, CHECKPOINT_DIR])?;
    let final_lm_loss = log.steps.last().map(|s| s.lm_loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome { checkpoint_dir: ckpt_dir, final_lm_loss, steps: log.steps.len() })
}

// ── evaluate / generate ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub style: String,
    pub recommended: String,
    pub reference: String,
    pub generated: String,
}

pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const METRICS_FILE: &str = "metrics.tsv";

fn build_recommender(cfg: &RunConfig) -> Result<Box<dyn Recommender>> {
    match cfg.recommender.kind.as_str() {
        "oracle" => Ok(Box::new(OracleRecommender)),
        "sim" => {
            let p = cfg.recommender.accuracy.expect("validated");
            Ok(Box::new(SimulatedAgent::new(p, cfg.seed)?))
        }
        "exec" => {
            let cmd = cfg.recommender.command.as_ref().expect("validated");
            Ok(Box::new(ExecRecommender::spawn(cmd)?))
        }
        other => Err(Error::Config(format!("unknown recommender {other:?}"))),
    }
}

/// Greedy generation over a corpus with recommender-driven branch switching.
pub fn generate_corpus(
    adapted: &mut AdaptedModel,
    corpus: &PairedCorpus,
    tokenizer: &Tokenizer,
    styles: &[String],
    recommender: &mut dyn Recommender,
    max_new: usize,
) -> Result<Vec<GenerationRecord>> {
    let mut records = Vec::with_capacity(corpus.len());
    for sample in &corpus.samples {
        if !styles.contains(&sample.style) {
            return Err(Error::Routing(format!(
                "sample {} has style {:?} with no branch",
                sample.id, sample.style
            )));
        }
        let recommended = recommender.recommend(&sample.expert, &sample.style, styles)?;
        // single-pair adapters have one branch regardless of style
        let branch = if adapted.n_branches() == 1 {
            0
        } else {
            styles.iter().position(|s| s == &recommended).expect("validated")
        };
        adapted.set_switch(branch)?;
        let mut prompt = tokenizer.encode(&sample.expert);
        prompt.push(SEP_ID);
        if prompt.len() >= adapted.max_seq() {
            return Err(Error::Length(format!(
                "prompt for {} needs {} tokens, max_seq is {}",
                sample.id,
                prompt.len(),
                adapted.max_seq()
            )));
        }
        let full = generate_greedy(adapted, &prompt, max_new, Some(EOS_ID))?;
        let tail: Vec<usize> = full[prompt.len()..]
            .iter()
            .copied()
            .take_while(|&t| t != EOS_ID)
            .collect();
        records.push(GenerationRecord {
            id: sample.id.clone(),
            style: sample.style.clone(),
            recommended,
            reference: sample.lay.clone(),
            generated: tokenizer.decode(&tail),
        });
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub group: String,
    pub count: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
}

/// Mean per-sample ROUGE F1 and sentence BLEU, per style and overall.
pub fn score_generations(records: &[GenerationRecord]) -> Result<Vec<MetricsRow>> {
    let mut groups: BTreeMap<String, Vec<&GenerationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.style.clone()).or_default().push(r);
    }
    let mut rows = Vec::new();
    let score_group = |items: &[&GenerationRecord], group: &str| -> Result<MetricsRow> {
        let mut sums = [0.0f64; 4];
        for r in items {
            let cand = tokenize_metric(&r.generated);
            let reference = tokenize_metric(&r.reference);
            sums[0] += rouge_n(&cand, &reference, 1)?.f1;
            sums[1] += rouge_n(&cand, &reference, 2)?.f1;
            sums[2] += rouge_l(&cand, &reference).f1;
            sums[3] += bleu4(&cand, &reference)?.score;
        }
        let n = items.len().max(1) as f64;
        Ok(MetricsRow {
            group: group.to_string(),
            count: items.len(),
            rouge1: sums[0] / n,
            rouge2: sums[1] / n,
            rouge_l: sums[2] / n,
            bleu: sums[3] / n,
        })
    };
    for (style, items) in &groups {
        rows.push(score_group(items, style)?);
    }
    let all: Vec<&GenerationRecord> = records.iter().collect();
    rows.push(score_group(&all, "overall")?);
    Ok(rows)
}

pub fn metrics_to_tsv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("group\tcount\trouge1\trouge2\trouge_l\tbleu\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.group, r.count, r.rouge1, r.rouge2, r.rouge_l, r.bleu
        ));
    }
    out
}

pub fn write_generations(records: &[GenerationRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(records)
}

pub struct EvaluateOutcome {
    pub records: Vec<GenerationRecord>,
    pub rows: Vec<MetricsRow>,
}

/// Generates on the test split with recommender-driven switching, then
/// scores the dumps.
pub fn run_evaluate(cfg: &RunConfig, out: &Path, ckpt: &Path) -> Result<EvaluateOutcome> {
    fs::create_dir_all(out)?;
    let mat = materialize(cfg)?;
    let (mut adapted, meta) = load_adapted(ckpt, base_model(cfg, &mat)?)?;
    if meta.styles != mat.styles {
        return Err(Error::Config(format!(
            "checkpoint styles {:?} do not match corpus styles {:?}",
            meta.styles, mat.styles
        )));
    }
    let mut recommender = build_recommender(cfg)?;
    let records = generate_corpus(
        &mut adapted,
        &mat.test,
        &mat.tokenizer,
        &mat.styles,
        recommender.as_mut(),
        cfg.evaluate.max_new,
    )?;
    write_generations(&records, &out.join(GENERATIONS_FILE))?;
    let rows = score_generations(&records)?;
    fs::write(out.join(METRICS_FILE), metrics_to_tsv(&rows))?;
    write_manifest(out, "evaluate", cfg, &[GENERATIONS_FILE, METRICS_FILE])?;
    Ok(EvaluateOutcome { records, rows })
}

/// Generation dump only (no scoring).
pub fn run_generate(cfg: &RunConfig, out: &Path, ckpt: &Path) -> Result<Vec<GenerationRecord>> {
    fs::create_dir_all(out)?;
    let mat = materialize(cfg)?;
    let (mut adapted, _meta) = load_adapted(ckpt, base_model(cfg, &mat)?)?;
    let mut recommender = build_recommender(cfg)?;
    let records = generate_corpus(
        &mut adapted,
        &mat.test,
        &mat.tokenizer,
        &mat.styles,
        recommender.as_mut(),
        cfg.evaluate.max_new,
    )?;
    write_generations(&records, &out.join(GENERATIONS_FILE))?;
    write_manifest(out, "generate", cfg, &[GENERATIONS_FILE])?;
    Ok(records)
}

// ── analyze ─────────────────────────────────────────────────────────────

pub const KDE_FILE: &str = "kde_points.tsv";
pub const XCORR_FILE: &str = "cross_correlation.tsv";
pub const COSINE_FILE: &str = "cosine_summary.tsv";
pub const CONFUSION_FILE: &str = "confusion.tsv";
pub const HETEROGENEITY_FILE: &str = "heterogeneity.tsv";

pub struct AnalyzeOutcome {
    pub mean_cosine: f64,
    pub compare_mean_cosine: Option<f64>,
    pub warnings: Vec<String>,
}

/// Shared-A snapshots at the checkpoint's semantic layers. Checkpoints
/// trained without the constraint record no layer set; the analysis then
/// falls back to every block that carries a shared-A ff_up adapter.
fn semantic_a_snapshots(
    adapted: &AdaptedModel,
    meta: &CheckpointMeta,
) -> Result<BTreeMap<usize, Tensor>> {
    let blocks: Vec<usize> = if meta.semantic_layers.is_empty() {
        (0..adapted.model.config().n_layers).collect()
    } else {
        meta.semantic_layers.clone()
    };
    let mut snapshots = BTreeMap::new();
    for &b in &blocks {
        let site = Site { layer: b, kind: SiteKind::FfUp };
        let a = match adapted.site_adapter(site) {
            Some(SiteAdapter::Branched { a_shared, .. }) => a_shared.detached(),
            Some(SiteAdapter::Pair(p)) => p.a.detached(),
            _ => continue,
        };
        snapshots.insert(b, a);
    }
    if snapshots.is_empty() {
        return Err(Error::Config(
            "no shared-A ff_up adapter found for the semantic projection".into(),
        ));
    }
    Ok(snapshots)
}

/// A-projected keys for texts through the frozen base (the key-dictionary
/// construction).
fn projected_keys(
    adapted: &AdaptedModel,
    meta: &CheckpointMeta,
    tokenizer: &Tokenizer,
    items: &[(String, String)],
) -> Result<Vec<Vec<f64>>> {
    let snapshots = semantic_a_snapshots(adapted, meta)?;
    let tokens: Vec<(String, Vec<usize>)> =
        items.iter().map(|(id, text)| (id.clone(), tokenizer.encode(text))).collect();
    let dict = refresh_keys(&snapshots, &tokens, &adapted.model, 0)?;
    Ok(items.iter().map(|(id, _)| dict.keys[id].clone()).collect())
}

/// A-projected expert representations through the adapted model with the
/// sample's own branch selected, mirroring the training-time anchors.
pub fn adapted_expert_keys(
    adapted: &mut AdaptedModel,
    meta: &CheckpointMeta,
    tokenizer: &Tokenizer,
    samples: &[crate::corpus::PairedSample],
    styles: &[String],
) -> Result<Vec<Vec<f64>>> {
    let snapshots = semantic_a_snapshots(adapted, meta)?;
    let r = snapshots.values().next().unwrap().shape()[0];
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let style_idx = styles
            .iter()
            .position(|st| st == &s.style)
            .ok_or_else(|| Error::Routing(format!("style {:?} has no branch", s.style)))?;
        let branch = if adapted.n_branches() == 1 { 0 } else { style_idx };
        adapted.set_switch(branch)?;
        let tokens = tokenizer.encode(&s.expert);
        let (_, acts) = adapted.forward(&tokens)?;
        let mut key = vec![0.0; r];
        for (&b, a) in &snapshots {
            let tap = &acts.taps[b + 1];
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
                let mut acc = 0.0;
                for j in 0..d {
                    acc += a.data()[i * d + j] * pooled[j];
                }
                *slot += acc;
            }
        }
        for v in key.iter_mut() {
            *v /= snapshots.len() as f64;
        }
        out.push(key);
    }
    Ok(out)
}

fn pooled_tap_reps<B: Backbone>(
    backbone: &B,
    tokenizer: &Tokenizer,
    texts: &[String],
    tap: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(texts.len());
    for text in texts {
        let tokens = tokenizer.encode(text);
        let feats = crate::probe::pair_features(backbone, &tokens)?;
        out.push(feats[tap].clone());
    }
    Ok(out)
}

/// Semantic-shift analyses over the test split: KDE point clouds of expert
/// vs generated-lay activations, the A-projected cross-correlation matrix,
/// the mean expert↔lay cosine under A, heterogeneity tables, and the
/// router/recommender confusion matrix. A comparison checkpoint adds its
/// generated-lay cloud and cosine; when it is missing the analysis runs
/// single-sided with a warning.
pub fn run_analyze(
    cfg: &RunConfig,
    out: &Path,
    ckpt: &Path,
    compare: Option<&Path>,
) -> Result<AnalyzeOutcome> {
    fs::create_dir_all(out)?;
    let mat = materialize(cfg)?;
    let backbone = base_model(cfg, &mat)?;
    let (mut adapted, meta) = load_adapted(ckpt, backbone.clone())?;
    let mut warnings = Vec::new();

    // generated lay texts under oracle switching, for the activation clouds
    let mut oracle = OracleRecommender;
    let records = generate_corpus(
        &mut adapted,
        &mat.test,
        &mat.tokenizer,
        &mat.styles,
        &mut oracle,
        cfg.evaluate.max_new,
    )?;
    let tap = cfg.analyze.tap.unwrap_or(mat.model_config.n_layers / 2 + 1).min(mat.model_config.n_layers);
    let expert_texts: Vec<String> = mat.test.samples.iter().map(|s| s.expert.clone()).collect();
    let gen_texts: Vec<String> = records
        .iter()
        .map(|r| if r.generated.is_empty() { "<pad>".to_string() } else { r.generated.clone() })
        .collect();
    let expert_reps = pooled_tap_reps(&backbone, &mat.tokenizer, &expert_texts, tap)?;
    let gen_reps = pooled_tap_reps(&backbone, &mat.tokenizer, &gen_texts, tap)?;
    let projection = semantic_subspace(&expert_reps, &gen_reps)?;

    let mut kde = String::from("x\ty\tgroup\n");
    for p in &projection.expert_points {
        kde.push_str(&format!("{:.8}\t{:.8}\texpert\n", p[0], p[1]));
    }
    for p in &projection.lay_points {
        kde.push_str(&format!("{:.8}\t{:.8}\tlay_gen\n", p[0], p[1]));
    }

    // A-projected representations on held-out pairs: anchors through the
    // adapted model (the training-time construction) against gold-lay keys
    // through the frozen base; cosine + correlation
    let lay_items: Vec<(String, String)> =
        mat.test.samples.iter().map(|s| (s.id.clone(), s.lay.clone())).collect();
    let expert_keys =
        adapted_expert_keys(&mut adapted, &meta, &mat.tokenizer, &mat.test.samples, &mat.styles)?;
    let lay_keys = projected_keys(&adapted, &meta, &mat.tokenizer, &lay_items)?;
    let mean_cosine = mean_pair_cosine(&expert_keys, &lay_keys)?;
    let xcorr = cross_correlation(&expert_keys, &lay_keys)?;
    let mut xcorr_tsv = String::new();
    for row in &xcorr.matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
        xcorr_tsv.push_str(&cells.join("\t"));
        xcorr_tsv.push('\n');
    }

    let mut cosine_tsv = String::from("checkpoint\tmean_cosine\n");
    cosine_tsv.push_str(&format!("main\t{mean_cosine:.8}\n"));

    // comparison checkpoint: its generated cloud and cosine on the same axes
    let mut compare_mean_cosine = None;
    match compare {
        Some(cmp_path) => {
            let (mut cmp_model, cmp_meta) = load_adapted(cmp_path, backbone.clone())?;
            let cmp_records = generate_corpus(
                &mut cmp_model,
                &mat.test,
                &mat.tokenizer,
                &mat.styles,
                &mut OracleRecommender,
                cfg.evaluate.max_new,
            )?;
            let cmp_texts: Vec<String> = cmp_records
                .iter()
                .map(|r| if r.generated.is_empty() { "<pad>".to_string() } else { r.generated.clone() })
                .collect();
            let cmp_reps = pooled_tap_reps(&backbone, &mat.tokenizer, &cmp_texts, tap)?;
            for p in projection.project(&cmp_reps) {
                kde.push_str(&format!("{:.8}\t{:.8}\tlay_gen_compare\n", p[0], p[1]));
            }
            let cmp_expert = adapted_expert_keys(
                &mut cmp_model,
                &cmp_meta,
                &mat.tokenizer,
                &mat.test.samples,
                &mat.styles,
            )?;
            let cmp_lay = projected_keys(&cmp_model, &cmp_meta, &mat.tokenizer, &lay_items)?;
            let cmp_cos = mean_pair_cosine(&cmp_expert, &cmp_lay)?;
            cosine_tsv.push_str(&format!("compare\t{cmp_cos:.8}\n"));
            compare_mean_cosine = Some(cmp_cos);
        }
        None => {
            warnings.push("no comparison checkpoint; running single-sided".into());
        }
    }

    // confusion matrix: router argmax when gates exist, else the configured
    // recommender against the true styles
    let n_styles = mat.styles.len();
    let (trues, preds): (Vec<usize>, Vec<usize>) = if let Some((_, gates)) = &adapted.gates {
        let mut trues = Vec::new();
        let mut preds = Vec::new();
        for s in &mat.test.samples {
            let true_idx = mat.styles.iter().position(|st| st == &s.style).unwrap();
            let tokens = mat.tokenizer.encode(&s.expert);
            let (_, acts) = backbone.forward(&tokens)?;
            let tap0 = &acts.taps[0];
            let (n, d) = (tap0.shape()[0], tap0.shape()[1]);
            let mut pooled = vec![0.0; d];
            for r in 0..n {
                for j in 0..d {
                    pooled[j] += tap0.data()[r * d + j];
                }
            }
            for v in pooled.iter_mut() {
                *v /= n as f64;
            }
            let alpha = gates[0].alpha_value(&pooled)?;
            let argmax = alpha
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            trues.push(true_idx);
            preds.push(argmax.min(n_styles - 1));
        }
        (trues, preds)
    } else {
        let mut recommender = build_recommender(cfg)?;
        let mut trues = Vec::new();
        let mut preds = Vec::new();
        for s in &mat.test.samples {
            let true_idx = mat.styles.iter().position(|st| st == &s.style).unwrap();
            let answer = recommender.recommend(&s.expert, &s.style, &mat.styles)?;
            let pred_idx = mat.styles.iter().position(|st| st == &answer).unwrap();
            trues.push(true_idx);
            preds.push(pred_idx);
        }
        (trues, preds)
    };
    let confusion = confusion_matrix(&preds, &trues, n_styles)?;
    let mut confusion_tsv = format!("true\\pred\t{}\n", mat.styles.join("\t"));
    for (i, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        confusion_tsv.push_str(&format!("{}\t{}\n", mat.styles[i], cells.join("\t")));
    }

    let het = heterogeneity_report(&mat.corpus);

    fs::write(out.join(KDE_FILE), kde)?;
    fs::write(out.join(XCORR_FILE), xcorr_tsv)?;
    fs::write(out.join(COSINE_FILE), cosine_tsv)?;
    fs::write(out.join(CONFUSION_FILE), confusion_tsv)?;
    fs::write(out.join(HETEROGENEITY_FILE), het.to_tsv())?;
    write_manifest(
        out,
        "analyze",
        cfg,
        &[KDE_FILE, XCORR_FILE, COSINE_FILE, CONFUSION_FILE, HETEROGENEITY_FILE],
    )?;
    Ok(AnalyzeOutcome { mean_cosine, compare_mean_cosine, warnings })
}

// ── sweep ───────────────────────────────────────────────────────────────

pub const SWEEP_FILE: &str = "sweep.tsv";

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub point: String,
    pub scheme: AdapterScheme,
    pub rank: usize,
    pub branches: usize,
    pub trainable_params: u64,
    pub final_lm_loss: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
}

fn scheme_name(scheme: AdapterScheme) -> &'static str {
    match scheme {
        AdapterScheme::Lora => "lora",
        AdapterScheme::MultiLora => "multi_lora",
        AdapterScheme::Branched => "branched",
    }
}

fn overall_row(rows: &[MetricsRow]) -> Result<&MetricsRow> {
    rows.iter()
        .find(|r| r.group == "overall")
        .ok_or_else(|| Error::Contract("metrics missing the overall row".into()))
}

fn count_trainables(cfg: &RunConfig, spec: &AttachSpec) -> Result<u64> {
    let mat = materialize(cfg)?;
    let model = Model::new(mat.model_config)?;
    let adapted = attach(model, spec.clone())?;
    Ok(adapted.trainable_params().iter().map(|(_, t)| t.numel() as u64).sum())
}

/// Runs train+evaluate per sweep point with matched seeds and collects one
/// row per point. The scheme axis enforces parameter parity: the single-pair
/// rank is the branch count times the per-branch rank.
pub fn run_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out)?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a [sweep] section".into()))?;
    // probing depends only on the backbone, which every point shares:
    // run it once and hand the report to each point
    let mut cfg = cfg.clone();
    if cfg.train.lambda > 0.0 && cfg.train.probe_report.is_none() {
        run_probe(&cfg, out)?;
        cfg.train.probe_report = Some(out.join(PROBE_REPORT_FILE));
    }
    let cfg = &cfg;
    let mut rows = Vec::new();
    match sweep.axis.as_str() {
        "rank" => {
            let ranks = sweep
                .ranks
                .as_ref()
                .ok_or_else(|| Error::Config("rank axis needs sweep.ranks".into()))?;
            for &rank in ranks {
                let mut point_cfg = cfg.clone();
                point_cfg.attach.rank = rank;
                let dir = out.join(format!("rank-{rank}"));
                let outcome = run_train(&point_cfg, &dir, None, false)?;
                let eval = run_evaluate(&point_cfg, &dir, &outcome.checkpoint_dir)?;
                let m = overall_row(&eval.rows)?;
                rows.push(SweepRow {
                    point: format!("rank={rank}"),
                    scheme: point_cfg.attach.scheme,
                    rank,
                    branches: point_cfg.attach.branches,
                    trainable_params: count_trainables(&point_cfg, &point_cfg.attach_spec())?,
                    final_lm_loss: outcome.final_lm_loss,
                    rouge1: m.rouge1,
                    rouge2: m.rouge2,
                    rouge_l: m.rouge_l,
                    bleu: m.bleu,
                });
            }
        }
        "recommender_accuracy" => {
            let accs = sweep
                .accuracies
                .as_ref()
                .ok_or_else(|| Error::Config("accuracy axis needs sweep.accuracies".into()))?;
            // one training run, shared across accuracy points
            let train_dir = out.join("trained");
            let outcome = run_train(cfg, &train_dir, None, false)?;
            for &p in accs {
                let mut point_cfg = cfg.clone();
                if (p - 1.0).abs() < 1e-12 {
                    point_cfg.recommender =
                        RecommenderSection { kind: "oracle".into(), accuracy: None, command: None };
                } else {
                    point_cfg.recommender =
                        RecommenderSection { kind: "sim".into(), accuracy: Some(p), command: None };
                }
                let dir = out.join(format!("acc-{p:.2}"));
                let eval = run_evaluate(&point_cfg, &dir, &outcome.checkpoint_dir)?;
                let m = overall_row(&eval.rows)?;
                rows.push(SweepRow {
                    point: format!("accuracy={p:.2}"),
                    scheme: cfg.attach.scheme,
                    rank: cfg.attach.rank,
                    branches: cfg.attach.branches,
                    trainable_params: count_trainables(cfg, &cfg.attach_spec())?,
                    final_lm_loss: outcome.final_lm_loss,
                    rouge1: m.rouge1,
                    rouge2: m.rouge2,
                    rouge_l: m.rouge_l,
                    bleu: m.bleu,
                });
            }
        }
        "scheme" => {
            let schemes = sweep
                .schemes
                .as_ref()
                .ok_or_else(|| Error::Config("scheme axis needs sweep.schemes".into()))?;
            let branch_rank = cfg.attach.rank;
            let n = cfg.attach.branches;
            let lora_rank = sweep.lora_rank.unwrap_or(branch_rank * n);
            // parameter parity: a single pair at lora_rank must cost the same
            // as n pairs at branch_rank
            if lora_rank != branch_rank * n {
                let per_unit_multi = n as u64 * branch_rank as u64;
                let per_unit_lora = lora_rank as u64;
                if per_unit_lora != per_unit_multi {
                    return Err(Error::Parity(format!(
                        "single-pair rank {lora_rank} does not match {n} branches of rank {branch_rank}"
                    )));
                }
            }
            for &scheme in schemes {
                let mut point_cfg = cfg.clone();
                point_cfg.attach.scheme = scheme;
                match scheme {
                    AdapterScheme::Lora => {
                        point_cfg.attach.rank = lora_rank;
                        point_cfg.attach.branches = 1;
                    }
                    _ => {
                        point_cfg.attach.rank = branch_rank;
                        point_cfg.attach.branches = n;
                    }
                }
                // the semantic constraint belongs to the shared-A scheme;
                // baseline points run without it
                if scheme != AdapterScheme::Branched {
                    point_cfg.train.lambda = 0.0;
                }
                let dir = out.join(format!("scheme-{}", scheme_name(scheme)));
                let outcome = run_train(&point_cfg, &dir, None, false)?;
                let eval = run_evaluate(&point_cfg, &dir, &outcome.checkpoint_dir)?;
                let m = overall_row(&eval.rows)?;
                rows.push(SweepRow {
                    point: format!("scheme={}", scheme_name(scheme)),
                    scheme,
                    rank: point_cfg.attach.rank,
                    branches: point_cfg.attach.branches,
                    trainable_params: count_trainables(&point_cfg, &point_cfg.attach_spec())?,
                    final_lm_loss: outcome.final_lm_loss,
                    rouge1: m.rouge1,
                    rouge2: m.rouge2,
                    rouge_l: m.rouge_l,
                    bleu: m.bleu,
                });
            }
        }
        other => {
            return Err(Error::Config(format!(
                "sweep axis must be rank, recommender_accuracy, or scheme, got {other:?}"
            )))
        }
    }
    let mut tsv = String::from(
        "point\tscheme\trank\tbranches\ttrainable_params\tfinal_lm_loss\trouge1\trouge2\trouge_l\tbleu\n",
    );
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.point,
            scheme_name(r.scheme),
            r.rank,
            r.branches,
            r.trainable_params,
            r.final_lm_loss,
            r.rouge1,
            r.rouge2,
            r.rouge_l,
            r.bleu
        ));
    }
    fs::write(out.join(SWEEP_FILE), tsv)?;
    write_manifest(out, "sweep", cfg, &[SWEEP_FILE])?;
    Ok(rows)
}

// ── paramcount ──────────────────────────────────────────────────────────

pub const PARAMCOUNT_FILE: &str = "paramcount.tsv";

/// Per-site and total trainable-parameter counts for every scheme, plus the
/// reduction percentage of the shared-A layout.
pub fn run_paramcount(cfg: &RunConfig, out: Option<&Path>) -> Result<String> {
    let mat = materialize(cfg)?;
    let model = Model::new(mat.model_config)?;
    let spec = cfg.attach_spec();
    let report = crate::adapter::param_count_report(&model, &spec)?;
    let mut tsv = String::from("site\td\tk\tlora\tmulti_lora\tbranched\n");
    for row in &report.rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            row.site, row.d, row.k, row.lora, row.multi_lora, row.branched
        ));
    }
    tsv.push_str(&format!(
        "total\t-\t-\t{}\t{}\t{}\n",
        report.total_lora, report.total_multi_lora, report.total_branched
    ));
    tsv.push_str(&format!("reduction_pct\t-\t-\t-\t-\t{:.2}\n", report.reduction_pct));
    tsv.push_str(&format!(
        "gate_params\t-\t-\t-\t-\t{}\n",
        match cfg.attach.gate_scope {
            GateScope::Global => report.gate_global,
            GateScope::PerSite => report.gate_per_site,
        }
    ));
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PARAMCOUNT_FILE), &tsv)?;
        write_manifest(dir, "paramcount", cfg, &[PARAMCOUNT_FILE])?;
    }
    Ok(tsv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_config(dir: &Path) -> RunConfig {
        let text = format!(
            r#"
seed = 7
out_dir = "{}"

[model]
n_layers = 2
d_model = 16
n_heads = 2
d_ff = 32
max_seq = 48

[corpus]
split_ratio = 0.8

[corpus.synth]
samples_per_style = 8
seed = 3
styles = ["concise", "expanded", "plain"]

[attach]
rank = 2
branches = 3
scheme = "branched"

[train]
batch_size = 6
lr = 0.002
epochs = 2
lambda = 0.0
tau = 0.5
"#,
            dir.display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let bad = r#"
seed = 1
nonsense = true
[model]
n_layers = 1
d_model = 8
n_heads = 1
d_ff = 16
max_seq = 16
[corpus.synth]
samples_per_style = 2
seed = 0
styles = ["plain"]
[attach]
rank = 2
branches = 1
scheme = "lora"
"#;
        let err = parse_config(bad).unwrap_err();
        assert!(err.to_string().contains("nonsense"), "got: {err}");
    }

    #[test]
    fn config_requires_existing_corpus_path() {
        let bad = r#"
seed = 1
[model]
n_layers = 1
d_model = 8
n_heads = 1
d_ff = 16
max_seq = 16
[corpus]
path = "/definitely/not/here.jsonl"
[attach]
rank = 2
branches = 1
scheme = "lora"
"#;
        assert!(matches!(parse_config(bad), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_adapter_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path());
        let out = dir.path().join("train");
        let outcome = run_train(&cfg, &out, None, false).unwrap();
        let mat = materialize(&cfg).unwrap();
        let (adapted, meta) = load_adapted(&outcome.checkpoint_dir, base_model(&cfg, &mat).unwrap()).unwrap();
        assert_eq!(meta.styles, vec!["concise", "expanded", "plain"]);
        // reload produces identical parameter bytes
        let (adapted2, _) = load_adapted(&outcome.checkpoint_dir, base_model(&cfg, &mat).unwrap()).unwrap();
        for ((n1, t1), (n2, t2)) in
            adapted.trainable_params().iter().zip(adapted2.trainable_params().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn gold_generations_score_one() {
        let corpus = synth_corpus(&SynthSpec::three_style(4, 1)).unwrap();
        let records: Vec<GenerationRecord> = corpus
            .samples
            .iter()
            .map(|s| GenerationRecord {
                id: s.id.clone(),
                style: s.style.clone(),
                recommended: s.style.clone(),
                reference: s.lay.clone(),
                generated: s.lay.clone(),
            })
            .collect();
        let rows = score_generations(&records).unwrap();
        for row in rows {
            assert_eq!(row.rouge1, 1.0, "group {}", row.group);
            assert_eq!(row.rouge2, 1.0);
            assert_eq!(row.rouge_l, 1.0);
            assert!((row.bleu - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_metrics_match_rescoring_the_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path());
        let out = dir.path().join("train");
        let outcome = run_train(&cfg, &out, None, false).unwrap();
        let eval_dir = dir.path().join("eval");
        let eval = run_evaluate(&cfg, &eval_dir, &outcome.checkpoint_dir).unwrap();
        let reread = read_generations(&eval_dir.join(GENERATIONS_FILE)).unwrap();
        let rescored = score_generations(&reread).unwrap();
        assert_eq!(metrics_to_tsv(&rescored), metrics_to_tsv(&eval.rows));
        let on_disk = fs::read_to_string(eval_dir.join(METRICS_FILE)).unwrap();
        assert_eq!(on_disk, metrics_to_tsv(&rescored));
    }

    #[test]
    fn probe_rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = demo_config(dir.path());
        cfg.corpus.synth.as_mut().unwrap().planted_layer = Some(1);
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run_probe(&cfg, &out_a).unwrap();
        run_probe(&cfg, &out_b).unwrap();
        let a = fs::read(out_a.join(PROBE_REPORT_FILE)).unwrap();
        let b = fs::read(out_b.join(PROBE_REPORT_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paramcount_reports_reduction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo_config(dir.path());
        let tsv = run_paramcount(&cfg, None).unwrap();
        assert!(tsv.contains("reduction_pct"));
        // N=3 with square q/v sites and rectangular ff sites still reduces
        let line = tsv.lines().find(|l| l.starts_with("reduction_pct")).unwrap();
        let pct: f64 = line.split('\t').next_back().unwrap().parse().unwrap();
        assert!(pct > 0.0);
    }

    #[test]
    fn missing_probe_report_blocks_constrained_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = demo_config(dir.path());
        cfg.train.lambda = 0.5;
        let out = dir.path().join("train");
        assert!(matches!(run_train(&cfg, &out, None, false), Err(Error::Config(_))));
    }
}
