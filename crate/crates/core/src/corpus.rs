//! Paired expert/lay corpora: JSONL ingestion, the word-level tokenizer,
//! deterministic splits, and synthetic corpus generation.
//!
//! The synthetic generator produces style-heterogeneous fixtures: one style
//! compresses the expert text to its key terms, one expands it with plain
//! wording, one substitutes technical tokens with common ones. With planted
//! parameters enabled, every sample additionally carries a per-sample marker
//! token in both halves, which the planted backbone uses to inject a
//! pair-consistency signal at a chosen layer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One paired record: expert text, its lay rendering, and the style label of
/// the source that produced the pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedSample {
    pub id: String,
    pub expert: String,
    pub lay: String,
    pub style: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedCorpus {
    pub samples: Vec<PairedSample>,
}

impl PairedCorpus {
    pub fn new(samples: Vec<PairedSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if s.id.is_empty() || s.expert.is_empty() || s.lay.is_empty() || s.style.is_empty() {
                return Err(Error::Schema(format!("sample {:?} has an empty field", s.id)));
            }
            if !seen.insert(s.id.clone()) {
                return Err(Error::Ingestion(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(PairedCorpus { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Style labels in first-appearance order.
    pub fn styles(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.style) {
                out.push(s.style.clone());
            }
        }
        out
    }

    pub fn by_style(&self, style: &str) -> Vec<&PairedSample> {
        self.samples.iter().filter(|s| s.style == style).collect()
    }
}

/// Loads a JSONL corpus: one object per line with exactly the keys
/// `id`, `expert`, `lay`, `style`. Malformed lines are rejected with their
/// line number.
pub fn load_jsonl(path: &Path) -> Result<PairedCorpus> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: PairedSample = serde_json::from_str(line).map_err(|e| {
            Error::Schema(format!("line {}: {e}", lineno + 1))
        })?;
        if sample.id.is_empty()
            || sample.expert.is_empty()
            || sample.lay.is_empty()
            || sample.style.is_empty()
        {
            return Err(Error::Schema(format!("line {}: empty field", lineno + 1)));
        }
        samples.push(sample);
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(first) = seen.insert(s.id.clone(), i) {
            return Err(Error::Ingestion(format!(
                "duplicate id {:?} (records {} and {})",
                s.id,
                first + 1,
                i + 1
            )));
        }
    }
    Ok(PairedCorpus { samples })
}

pub fn save_jsonl(corpus: &PairedCorpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &corpus.samples {
        out.push_str(&serde_json::to_string(s).expect("serializable record"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Tokenization ────────────────────────────────────────────────────────

/// Lowercases and splits into alphanumeric runs and single punctuation
/// characters. Shared by the tokenizer and the text metrics so scores are
/// reproducible bit for bit.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Word-level vocabulary with fixed reserved ids 0–3 (PAD, UNK, SEP, EOS).
/// Ids follow first appearance in the corpus, so they are stable given the
/// same corpus and frequency cutoff.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .into_iter()
            .map(|t| self.token_to_id.get(&t).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Joins tokens with single spaces; equal to the input up to whitespace
    /// normalization and lowercasing when every token is in vocabulary.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != SEP_ID && id != EOS_ID)
            .map(|&id| self.id_to_token.get(id).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }
}

/// Builds the vocabulary from every expert and lay text, keeping tokens with
/// frequency ≥ `min_freq`; everything else maps to UNK.
pub fn build_vocab(corpus: &PairedCorpus, min_freq: usize) -> Result<Tokenizer> {
    if corpus.is_empty() {
        return Err(Error::Contract("build_vocab on an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for s in &corpus.samples {
        for t in tokenize(&s.expert).into_iter().chain(tokenize(&s.lay)) {
            let c = counts.entry(t.clone()).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
    }
    let mut id_to_token: Vec<String> =
        vec!["<pad>".into(), "<unk>".into(), "<sep>".into(), "<eos>".into()];
    for t in order {
        if counts[&t] >= min_freq {
            id_to_token.push(t);
        }
    }
    let token_to_id =
        id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(Tokenizer { token_to_id, id_to_token })
}

// ── Synthetic corpora ───────────────────────────────────────────────────

/// How a style rewrites expert text into lay text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    /// Compress to the key terms (word count goes down for every sample).
    Concise,
    /// Re-explain with plain words and extra framing (word count goes up).
    Expanded,
    /// Keep the structure, substitute technical tokens with common ones.
    Plain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub kind: StyleKind,
}

/// Parameters for the planted-signal fixture: markers are added to both
/// halves of every pair, and the planted backbone injects a shared-marker
/// signal at `layer`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub layer: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub samples_per_style: usize,
    pub seed: u64,
    pub styles: Vec<StyleSpec>,
    pub planted: Option<PlantedSpec>,
}

impl SynthSpec {
    pub fn three_style(samples_per_style: usize, seed: u64) -> Self {
        SynthSpec {
            samples_per_style,
            seed,
            styles: vec![
                StyleSpec { name: "concise".into(), kind: StyleKind::Concise },
                StyleSpec { name: "expanded".into(), kind: StyleKind::Expanded },
                StyleSpec { name: "plain".into(), kind: StyleKind::Plain },
            ],
            planted: None,
        }
    }
}

const TOPICS: [&str; 12] = [
    "anemia", "asthma", "diabetes", "migraine", "eczema", "arthritis", "insomnia", "vertigo",
    "fatigue", "allergy", "hypertension", "bronchitis",
];
const NOUNS: [&str; 12] = [
    "erythrocytes", "bronchioles", "neuropathy", "cytokines", "hemoglobin", "biomarkers",
    "lesions", "receptors", "antigens", "platelets", "enzymes", "mucosa",
];
const NOUNS_SIMPLE: [&str; 12] = [
    "cells", "airways", "nerves", "signals", "blood", "signs", "sores", "sensors", "triggers",
    "clots", "helpers", "lining",
];
const RESULTS: [&str; 12] = [
    "improvement", "reduction", "remission", "relief", "decline", "recovery", "worsening",
    "stability", "response", "tolerance", "benefit", "deterioration",
];
const RESULTS_SIMPLE: [&str; 12] = [
    "gains", "easing", "healing", "comfort", "drop", "mending", "setback", "steadiness",
    "reaction", "coping", "help", "slide",
];
const COHORTS: [&str; 12] = [
    "adults", "infants", "elders", "patients", "smokers", "athletes", "workers", "children",
    "teens", "veterans", "nurses", "donors",
];

/// Marker token for planted sample `index`.
pub fn marker_token(index: usize) -> String {
    format!("sig{index}")
}

/// Vocabulary ids of planted marker tokens.
pub fn marker_ids(tokenizer: &Tokenizer) -> HashSet<usize> {
    (0..tokenizer.vocab_size())
        .filter(|&id| {
            tokenizer
                .token_of(id)
                .map(|t| t.starts_with("sig") && t[3..].chars().all(|c| c.is_ascii_digit()) && t.len() > 3)
                .unwrap_or(false)
        })
        .collect()
}

/// Deterministic style-heterogeneous corpus. Every sample's lay text is the
/// style's transform of its expert text.
pub fn synth_corpus(spec: &SynthSpec) -> Result<PairedCorpus> {
    if spec.styles.is_empty() {
        return Err(Error::Config("synth_corpus needs at least one style".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    let mut global = 0usize;
    for style in &spec.styles {
        for i in 0..spec.samples_per_style {
            let topic = TOPICS[rng.random_range(0..TOPICS.len())];
            let ni = rng.random_range(0..NOUNS.len());
            let ri = rng.random_range(0..RESULTS.len());
            let cohort = COHORTS[rng.random_range(0..COHORTS.len())];

            let expert = format!(
                "the {topic} study of {} finds {} in {cohort} .",
                NOUNS[ni], RESULTS[ri]
            );
            let lay = match style.kind {
                StyleKind::Concise => format!("{topic} {} .", RESULTS[ri]),
                StyleKind::Expanded => format!(
                    "this study about {topic} looked at {} and found {} for {cohort} in plain words .",
                    NOUNS_SIMPLE[ni], RESULTS_SIMPLE[ri]
                ),
                StyleKind::Plain => format!(
                    "the {topic} work of {} shows {} in {cohort} .",
                    NOUNS_SIMPLE[ni], RESULTS_SIMPLE[ri]
                ),
            };
            let (expert, lay) = if spec.planted.is_some() {
                let m = marker_token(global);
                (format!("{expert} {m}"), format!("{lay} {m}"))
            } else {
                (expert, lay)
            };
            samples.push(PairedSample {
                id: format!("{}-{i:04}", style.name),
                expert,
                lay,
                style: style.name.clone(),
            });
            global += 1;
        }
    }
    PairedCorpus::new(samples)
}

// ── Splits ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct SplitResult {
    pub train: PairedCorpus,
    pub test: PairedCorpus,
    /// False when some style had fewer than two samples and the split fell
    /// back to a global shuffle.
    pub stratified: bool,
}

/// Deterministic shuffled split, stratified by style.
pub fn split(corpus: &PairedCorpus, ratio: f64, seed: u64) -> Result<SplitResult> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        groups.entry(&s.style).or_default().push(i);
    }
    let stratified = groups.values().all(|g| g.len() >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    if stratified {
        for group in groups.values() {
            let mut idx = group.clone();
            idx.shuffle(&mut rng);
            let n_train = ((idx.len() as f64) * ratio).round() as usize;
            let n_train = n_train.clamp(1, idx.len() - 1);
            train_idx.extend_from_slice(&idx[..n_train]);
            test_idx.extend_from_slice(&idx[n_train..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..corpus.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64) * ratio).round() as usize;
        let n_train = n_train.min(idx.len());
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pickup = |idx: &[usize]| PairedCorpus {
        samples: idx.iter().map(|&i| corpus.samples[i].clone()).collect(),
    };
    Ok(SplitResult { train: pickup(&train_idx), test: pickup(&test_idx), stratified })
}
