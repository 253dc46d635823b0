//! Semantic-relevant layer identification: pair expert and lay texts into a
//! consistency classification task, fit a per-layer linear probe on pooled
//! activations, and keep the top-K layers by validation accuracy.
//!
//! The probe is a logistic regression over the layer-l representation of
//! `[expert ; SEP ; lay]`, mean-pooled over positions, trained by full-batch
//! gradient descent on a 4:1 split. Features come from the frozen base
//! model; probing precedes adapter training in the pipeline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PairedCorpus, Tokenizer, SEP_ID};
use crate::error::{Error, Result};
use crate::model::Backbone;

/// One probe example: expert text i against lay text j, positive iff i = j.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ProbePair {
    pub expert_index: usize,
    pub lay_index: usize,
    pub label: bool,
}

impl ProbePair {
    fn new(expert_index: usize, lay_index: usize) -> Self {
        ProbePair { expert_index, lay_index, label: expert_index == lay_index }
    }
}

/// One positive pair per sample plus `negatives_per_positive` mismatched
/// pairs drawn uniformly without replacement per anchor.
pub fn build_probe_dataset(
    corpus: &PairedCorpus,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<ProbePair>> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Contract(format!("probe dataset needs at least 2 samples, got {n}")));
    }
    if negatives_per_positive >= n {
        return Err(Error::Sampling(format!(
            "{negatives_per_positive} negatives per positive impossible with {n} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n * (1 + negatives_per_positive));
    for i in 0..n {
        pairs.push(ProbePair::new(i, i));
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.shuffle(&mut rng);
        for &j in others.iter().take(negatives_per_positive) {
            pairs.push(ProbePair::new(i, j));
        }
    }
    Ok(pairs)
}

/// Token sequence `[expert ; SEP ; lay]` for a probe pair, truncated
/// symmetrically when it exceeds the context. Returns the truncation flag.
pub fn pair_tokens(
    tokenizer: &Tokenizer,
    corpus: &PairedCorpus,
    pair: &ProbePair,
    max_seq: usize,
) -> (Vec<usize>, bool) {
    let expert = tokenizer.encode(&corpus.samples[pair.expert_index].expert);
    let lay = tokenizer.encode(&corpus.samples[pair.lay_index].lay);
    let budget = max_seq.saturating_sub(1);
    let (mut e_keep, mut l_keep) = (expert.len(), lay.len());
    while e_keep + l_keep > budget {
        if e_keep >= l_keep {
            e_keep -= 1;
        } else {
            l_keep -= 1;
        }
    }
    let truncated = e_keep < expert.len() || l_keep < lay.len();
    let mut tokens = expert[..e_keep].to_vec();
    tokens.push(SEP_ID);
    tokens.extend_from_slice(&lay[..l_keep]);
    (tokens, truncated)
}

/// Mean-pooled activation of tap `layer` for one token sequence.
pub fn layer_feature<B: Backbone>(backbone: &B, tokens: &[usize], layer: usize) -> Result<Vec<f64>> {
    if layer > backbone.n_layers() {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {} blocks",
            backbone.n_layers()
        )));
    }
    Ok(pair_features(backbone, tokens)?.swap_remove(layer))
}

/// Mean-pooled activations of every tap for one sequence (one forward).
pub fn pair_features<B: Backbone>(backbone: &B, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (_, acts) = backbone.forward(tokens)?;
    let mut out = Vec::with_capacity(acts.taps.len());
    for tap in &acts.taps {
        let (n, d) = (tap.shape()[0], tap.shape()[1]);
        let mut pooled = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                pooled[j] += tap.data()[r * d + j];
            }
        }
        for v in pooled.iter_mut() {
            *v /= n as f64;
        }
        out.push(pooled);
    }
    Ok(out)
}

/// Fitted probe: linear weights plus bias, and held-out accuracy.
#[derive(Clone, Debug)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub val_accuracy: f64,
    /// Full-batch training loss per gradient step.
    pub train_losses: Vec<f64>,
}

pub const PROBE_GD_STEPS: usize = 200;
pub const PROBE_GD_LR: f64 = 0.1;

fn stable_logistic_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

fn sigmoid(z: f64) -> f64 {
    let t = (-z).clamp(-700.0, 700.0);
    1.0 / (1.0 + t.exp())
}

/// Logistic regression by full-batch gradient descent on a 4:1 split.
/// Decision rule on the held-out fifth: class 1 iff the predicted
/// probability exceeds 0.5 (exactly 0.5 goes to class 0).
pub fn fit_probe(features: &[Vec<f64>], labels: &[bool], split_seed: u64) -> Result<ProbeFit> {
    if features.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len();
    if n < 5 {
        return Err(Error::DegenerateSplit(format!("need at least 5 samples, got {n}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract("ragged feature rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    order.shuffle(&mut rng);
    let n_train = (((n as f64) * 0.8).round() as usize).clamp(1, n - 1);
    let (train_idx, val_idx) = order.split_at(n_train);
    let train_pos = train_idx.iter().filter(|&&i| labels[i]).count();
    if train_pos == 0 || train_pos == train_idx.len() {
        return Err(Error::DegenerateSplit(
            "training split contains a single class".into(),
        ));
    }

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut train_losses = Vec::with_capacity(PROBE_GD_STEPS);
    let m = train_idx.len() as f64;
    for _ in 0..PROBE_GD_STEPS {
        let mut grad_w = vec![0.0; dim];
        let mut grad_b = 0.0;
        let mut loss = 0.0;
        for &i in train_idx {
            let x = &features[i];
            let y = if labels[i] { 1.0 } else { 0.0 };
            let z = b + w.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
            loss += stable_logistic_loss(z, y);
            let err = sigmoid(z) - y;
            for (gw, xv) in grad_w.iter_mut().zip(x) {
                *gw += err * xv;
            }
            grad_b += err;
        }
        train_losses.push(loss / m);
        for (wv, gw) in w.iter_mut().zip(&grad_w) {
            *wv -= PROBE_GD_LR * gw / m;
        }
        b -= PROBE_GD_LR * grad_b / m;
    }

    let mut correct = 0usize;
    for &i in val_idx {
        let z = b + w.iter().zip(&features[i]).map(|(wv, xv)| wv * xv).sum::<f64>();
        let predicted = sigmoid(z) > 0.5;
        if predicted == labels[i] {
            correct += 1;
        }
    }
    Ok(ProbeFit {
        weights: w,
        bias: b,
        val_accuracy: correct as f64 / val_idx.len() as f64,
        train_losses,
    })
}

/// Indices of the K highest accuracies, ties to the lower layer index;
/// returned in ascending layer order.
pub fn select_semantic_layers(accuracies: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > accuracies.len() {
        return Err(Error::Config(format!(
            "cannot select top {k} of {} layers",
            accuracies.len()
        )));
    }
    let mut order: Vec<usize> = (0..accuracies.len()).collect();
    order.sort_by(|&a, &b| {
        accuracies[b].partial_cmp(&accuracies[a]).unwrap().then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(k).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Per-layer validation accuracies plus the selected top-K layer set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracies: Vec<f64>,
    pub selected: Vec<usize>,
    pub k: usize,
    pub truncated_pairs: usize,
}

impl ProbeReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\taccuracy\tselected\n");
        for (layer, acc) in self.accuracies.iter().enumerate() {
            let flag = if self.selected.contains(&layer) { 1 } else { 0 };
            out.push_str(&format!("{layer}\t{acc:.6}\t{flag}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut accuracies = Vec::new();
        let mut selected = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Schema(format!("probe report line {}: {line:?}", i + 1)));
            }
            let layer: usize = cols[0]
                .parse()
                .map_err(|_| Error::Schema(format!("bad layer index {:?}", cols[0])))?;
            let acc: f64 = cols[1]
                .parse()
                .map_err(|_| Error::Schema(format!("bad accuracy {:?}", cols[1])))?;
            if layer != accuracies.len() {
                return Err(Error::Schema("probe report layers out of order".into()));
            }
            accuracies.push(acc);
            if cols[2].trim() == "1" {
                selected.push(layer);
            }
        }
        let k = selected.len();
        Ok(ProbeReport { accuracies, selected, k, truncated_pairs: 0 })
    }

    /// Selected taps mapped to block indices for the contrastive stage:
    /// tap t is the output of block t−1, and tap 0 (the embedding output)
    /// has no block to constrain, so it is dropped.
    pub fn semantic_blocks(&self) -> Vec<usize> {
        self.selected.iter().filter(|&&t| t >= 1).map(|&t| t - 1).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub negatives_per_positive: usize,
    /// Top-K size; defaults to half the block count.
    pub k: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { negatives_per_positive: 1, k: None, seed: 0 }
    }
}

/// The full probing pipeline over a backbone and a paired corpus.
pub fn probe_backbone<B: Backbone>(
    backbone: &B,
    corpus: &PairedCorpus,
    tokenizer: &Tokenizer,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let pairs = build_probe_dataset(corpus, opts.negatives_per_positive, opts.seed)?;
    let n_taps = backbone.n_layers() + 1;
    let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(pairs.len()); n_taps];
    let mut labels = Vec::with_capacity(pairs.len());
    let mut truncated_pairs = 0usize;
    for pair in &pairs {
        let (tokens, truncated) = pair_tokens(tokenizer, corpus, pair, backbone.max_seq());
        if truncated {
            truncated_pairs += 1;
        }
        let per_tap = pair_features(backbone, &tokens)?;
        for (tap, feat) in per_tap.into_iter().enumerate() {
            features[tap].push(feat);
        }
        labels.push(pair.label);
    }
    let mut accuracies = Vec::with_capacity(n_taps);
    for tap_features in &features {
        let fit = fit_probe(tap_features, &labels, opts.seed ^ 0x9e3779b9)?;
        accuracies.push(fit.val_accuracy);
    }
    let k = opts.k.unwrap_or_else(|| (backbone.n_layers() / 2).max(1));
    let selected = select_semantic_layers(&accuracies, k)?;
    Ok(ProbeReport { accuracies, selected, k, truncated_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::corpus::{build_vocab, marker_ids, synth_corpus, PlantedSpec, SynthSpec};
    use crate::model::{Model, ModelConfig, PlantedBackbone};

    fn two_sample_corpus() -> PairedCorpus {
        synth_corpus(&SynthSpec::three_style(1, 0)).map(|mut c| {
            c.samples.truncate(2);
            c
        })
        .unwrap()
    }

    #[test]
    fn probe_dataset_counts_and_label_rule() {
        let corpus = two_sample_corpus();
        let pairs = build_probe_dataset(&corpus, 1, 0).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs.iter().filter(|p| p.label).count(), 2);
        for p in &pairs {
            assert_eq!(p.label, p.expert_index == p.lay_index);
        }
    }

    #[test]
    fn probe_dataset_is_deterministic_and_bounded() {
        let corpus = synth_corpus(&SynthSpec::three_style(5, 1)).unwrap();
        assert_eq!(
            build_probe_dataset(&corpus, 3, 9).unwrap(),
            build_probe_dataset(&corpus, 3, 9).unwrap()
        );
        // negatives drawn without replacement per anchor
        let pairs = build_probe_dataset(&corpus, 3, 9).unwrap();
        for i in 0..corpus.len() {
            let negs: Vec<usize> = pairs
                .iter()
                .filter(|p| p.expert_index == i && !p.label)
                .map(|p| p.lay_index)
                .collect();
            let mut dedup = negs.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(negs.len(), dedup.len());
        }
        assert!(matches!(
            build_probe_dataset(&corpus, corpus.len(), 0),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn pair_tokens_truncates_symmetrically() {
        let corpus = synth_corpus(&SynthSpec::three_style(2, 0)).unwrap();
        let tok = build_vocab(&corpus, 1).unwrap();
        let pair = ProbePair::new(0, 0);
        let (full, truncated) = pair_tokens(&tok, &corpus, &pair, 64);
        assert!(!truncated);
        assert!(full.contains(&SEP_ID));
        let (short, was_truncated) = pair_tokens(&tok, &corpus, &pair, 9);
        assert!(was_truncated);
        assert_eq!(short.len(), 9);
        // the longer half absorbs the cuts; the shorter half is untouched
        let sep_full = full.iter().position(|&t| t == SEP_ID).unwrap();
        let sep_short = short.iter().position(|&t| t == SEP_ID).unwrap();
        let lay_full = full.len() - 1 - sep_full;
        let lay_short = short.len() - 1 - sep_short;
        assert!(sep_short <= sep_full && lay_short <= lay_full);
        assert!(sep_short.min(lay_short) == sep_full.min(lay_full) || sep_short == lay_short);
    }

    #[test]
    fn separable_data_reaches_perfect_accuracy() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let off = (i % 20) as f64 * 0.01;
            if i < 20 {
                features.push(vec![1.0 + off, 1.0 - off]);
                labels.push(true);
            } else {
                features.push(vec![-1.0 - off, -1.0 + off]);
                labels.push(false);
            }
        }
        let fit = fit_probe(&features, &labels, 3).unwrap();
        assert_eq!(fit.val_accuracy, 1.0);
    }

    #[test]
    fn probe_training_loss_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let features: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<bool> = features.iter().map(|f| f[0] + 0.3 * f[1] > 0.0).collect();
        let fit = fit_probe(&features, &labels, 0).unwrap();
        for w in fit.train_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let features: Vec<Vec<f64>> = (0..200)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let labels: Vec<bool> = (0..200).map(|_| rng.random::<bool>()).collect();
            let fit = fit_probe(&features, &labels, seed).unwrap();
            assert!(
                (0.35..=0.65).contains(&fit.val_accuracy),
                "seed {seed}: accuracy {}",
                fit.val_accuracy
            );
        }
    }

    #[test]
    fn zero_logit_ties_go_to_class_zero() {
        // all-zero features on balanced labels keep w and b at zero, so
        // every validation point sits exactly at p = 0.5
        let features: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; 40];
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let fit = fit_probe(&features, &labels, 5).unwrap();
        assert_eq!(fit.bias, 0.0);
        // predictions are all class 0, so accuracy equals the class-0 share
        let n_val = 8;
        let _ = n_val;
        assert!((fit.val_accuracy - 0.5).abs() <= 0.25);
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let features: Vec<Vec<f64>> = vec![vec![0.1]; 4];
        let labels = vec![true, false, true, false];
        assert!(matches!(fit_probe(&features, &labels, 0), Err(Error::DegenerateSplit(_))));
        let one_class: Vec<bool> = vec![true; 30];
        let f: Vec<Vec<f64>> = vec![vec![0.2, 0.4]; 30];
        assert!(matches!(fit_probe(&f, &one_class, 0), Err(Error::DegenerateSplit(_))));
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_semantic_layers(&[0.5, 0.9, 0.7], 1).unwrap(), vec![1]);
        assert_eq!(select_semantic_layers(&[0.5, 0.9, 0.7], 3).unwrap(), vec![0, 1, 2]);
        // tie broken toward the lower index
        assert_eq!(select_semantic_layers(&[0.7, 0.9, 0.9, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_semantic_layers(&[0.9, 0.2, 0.9], 1).unwrap(), vec![0]);
        assert!(select_semantic_layers(&[0.5], 2).is_err());
        // invariant to supply order: permuting the reports permutes nothing
        let accs = [0.51, 0.88, 0.88, 0.31, 0.62];
        let a = select_semantic_layers(&accs, 2).unwrap();
        assert_eq!(a, vec![1, 2]);
    }

    #[test]
    fn report_tsv_round_trip() {
        let report = ProbeReport {
            accuracies: vec![0.5, 0.875, 0.75],
            selected: vec![1, 2],
            k: 2,
            truncated_pairs: 0,
        };
        let parsed = ProbeReport::from_tsv(&report.to_tsv()).unwrap();
        assert_eq!(parsed.accuracies, report.accuracies);
        assert_eq!(parsed.selected, report.selected);
        assert_eq!(report.semantic_blocks(), vec![0, 1]);
    }

    #[test]
    fn planted_layer_is_found() {
        let mut spec = SynthSpec::three_style(14, 21);
        spec.planted = Some(PlantedSpec { layer: 2, strength: 6.0 });
        let corpus = synth_corpus(&spec).unwrap();
        let tok = build_vocab(&corpus, 1).unwrap();
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: tok.vocab_size(),
            max_seq: 64,
            seed: 5,
        };
        let model = Model::new(cfg).unwrap();
        let markers = marker_ids(&tok);
        let planted = PlantedBackbone::new(model, 2, markers, 6.0, 9).unwrap();
        let report =
            probe_backbone(&planted, &corpus, &tok, &ProbeOptions { k: Some(1), ..Default::default() })
                .unwrap();
        assert_eq!(report.selected, vec![2], "accuracies: {:?}", report.accuracies);
        assert!(report.accuracies[2] > 0.9);
    }
}
