//! Text metrics and representation analyses: ROUGE-1/2/L, BLEU with a
//! brevity penalty, words-per-sentence, the composite readability score,
//! per-source heterogeneity tables, the top-2 singular-direction subspace
//! projection, and cross-correlation matrices.
//!
//! Metric tokenization is the corpus tokenizer (lowercase, alphanumeric
//! runs, punctuation as standalone tokens), so scores are reproducible bit
//! for bit. The readability components are declared stand-ins: lexical
//! rarity against a shipped easy-word list, normalized sentence length,
//! content-word density, and pronoun/connective density, equally weighted
//! by default.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{tokenize, PairedCorpus};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Metric tokenization is the corpus tokenizer.
pub use crate::corpus::tokenize as tokenize_metric;

// ── N-gram overlap scores ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when an input had no tokens (score defined as zero).
    pub degenerate: bool,
}

impl MetricScore {
    fn zero(degenerate: bool) -> Self {
        MetricScore { precision: 0.0, recall: 0.0, f1: 0.0, degenerate }
    }

    fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricScore { precision, recall, f1, degenerate: false }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap: precision against the candidate's n-grams,
/// recall against the reference's.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Result<MetricScore> {
    if n == 0 {
        return Err(Error::Config("rouge_n needs n >= 1".into()));
    }
    if candidate.is_empty() || reference.is_empty() {
        return Ok(MetricScore::zero(true));
    }
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refc.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return Ok(MetricScore::zero(true));
    }
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(MetricScore::from_pr(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    ))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Longest-common-subsequence overlap.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> MetricScore {
    if candidate.is_empty() || reference.is_empty() {
        return MetricScore::zero(true);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    MetricScore::from_pr(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BleuSmoothing {
    /// Zero modified precisions fall back to 1/(2·|candidate n-grams|).
    Additive,
    /// Zero modified precisions zero the whole score.
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuResult {
    pub score: f64,
    pub degenerate: bool,
}

/// `BP · exp(Σ w_n ln p_n)` with clipped modified precisions and
/// `BP = 1` when the candidate is longer than the reference, else
/// `e^{1 − r/c}`. Orders where neither side has any n-gram are dropped and
/// the remaining weights renormalize, so identical texts score exactly 1
/// at any length.
pub fn bleu(
    candidate: &[String],
    reference: &[String],
    max_n: usize,
    weights: &[f64],
    smoothing: BleuSmoothing,
) -> Result<BleuResult> {
    if max_n == 0 || weights.len() != max_n {
        return Err(Error::Config(format!(
            "bleu needs one weight per order, got {} weights for max_n {max_n}",
            weights.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("bleu weights must sum to 1, got {wsum}")));
    }
    if candidate.is_empty() {
        return Ok(BleuResult { score: 0.0, degenerate: true });
    }
    if reference.is_empty() {
        return Ok(BleuResult { score: 0.0, degenerate: true });
    }
    let mut used: Vec<(f64, f64)> = Vec::with_capacity(max_n); // (weight, precision)
    for (n, &w) in (1..=max_n).zip(weights) {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let ref_total: usize = refc.values().sum();
        if total == 0 && ref_total == 0 {
            continue; // vacuous order on both sides
        }
        let matched: usize = cand
            .iter()
            .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
            .sum();
        let p = if total > 0 && matched > 0 {
            matched as f64 / total as f64
        } else {
            match smoothing {
                BleuSmoothing::Additive => 1.0 / (2.0 * total.max(1) as f64),
                BleuSmoothing::Strict => return Ok(BleuResult { score: 0.0, degenerate: false }),
            }
        };
        used.push((w, p));
    }
    let weight_sum: f64 = used.iter().map(|(w, _)| w).sum();
    let log_sum: f64 = used.iter().map(|(w, p)| (w / weight_sum) * p.ln()).sum();
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(BleuResult { score: bp * log_sum.exp(), degenerate: false })
}

/// Uniform weights over orders 1..=4.
pub fn bleu4(candidate: &[String], reference: &[String]) -> Result<BleuResult> {
    bleu(candidate, reference, 4, &[0.25; 4], BleuSmoothing::Additive)
}

// ── Word count and readability ──────────────────────────────────────────

fn word_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(|c| c.is_alphanumeric()))
        .collect()
}

fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0usize;
    for (i, &ch) in chars.iter().enumerate() {
        if matches!(ch, '.' | '!' | '?') {
            let at_end = chars[i + 1..].iter().all(|c| c.is_whitespace());
            let followed_by_space = chars.get(i + 1).map(|c| c.is_whitespace()).unwrap_or(true);
            if at_end || followed_by_space {
                count += 1;
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WordCountScore {
    pub value: f64,
    /// Set when the text has no sentence terminator and the one-sentence
    /// fallback was used.
    pub fallback: bool,
}

/// Words per sentence; sentence boundaries are `.`, `!`, `?` followed by
/// whitespace or end of text.
pub fn avg_word_count(text: &str) -> WordCountScore {
    let words = word_tokens(text).len() as f64;
    let sentences = sentence_count(text);
    if sentences == 0 {
        WordCountScore { value: words, fallback: true }
    } else {
        WordCountScore { value: words / sentences as f64, fallback: false }
    }
}

/// Total word tokens in a document (the per-document length statistic of
/// the heterogeneity report).
pub fn total_word_count(text: &str) -> usize {
    word_tokens(text).len()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcrsWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for DcrsWeights {
    fn default() -> Self {
        DcrsWeights { alpha: 0.25, beta: 0.25, gamma: 0.25, delta: 0.25 }
    }
}

impl DcrsWeights {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.alpha, self.beta, self.gamma, self.delta];
        if parts.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("readability weights must be nonnegative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("readability weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// The four component scorers of the composite readability score, each
/// producing a value in [0, 1].
pub trait DcrsComponents {
    fn lexical(&self, text: &str) -> f64;
    fn syntactic(&self, text: &str) -> f64;
    fn conceptual(&self, text: &str) -> f64;
    fn discourse(&self, text: &str) -> f64;
}

const EASY_WORDS: &[&str] = &[
    "a", "about", "after", "all", "an", "and", "any", "are", "as", "at", "back", "bad", "be",
    "because", "been", "before", "big", "but", "by", "can", "come", "could", "day", "do", "down",
    "each", "easy", "find", "first", "for", "found", "from", "get", "give", "go", "good", "had",
    "has", "have", "he", "help", "her", "here", "him", "his", "how", "i", "if", "in", "into",
    "is", "it", "its", "just", "know", "less", "like", "little", "long", "look", "made", "make",
    "man", "many", "may", "me", "more", "most", "much", "my", "new", "no", "not", "now", "of",
    "off", "old", "on", "one", "only", "or", "other", "our", "out", "over", "people", "plain",
    "said", "see", "she", "short", "show", "shows", "simple", "so", "some", "study", "take",
    "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "time",
    "to", "two", "up", "us", "use", "very", "was", "way", "we", "well", "went", "were", "what",
    "when", "where", "which", "who", "will", "with", "words", "work", "would", "you", "your",
];

const PRONOUNS_CONNECTIVES: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "them", "this", "that", "these", "those", "and",
    "but", "or", "so", "because", "however", "therefore", "also", "then", "while", "although",
    "since", "thus", "moreover", "instead", "meanwhile", "furthermore", "besides",
];

/// Default component scorers: lexical rarity against the easy-word list,
/// sentence length normalized over 5–40 words, unique content-word density,
/// and pronoun/connective density scaled over 0–25% of tokens.
pub struct DefaultDcrsComponents {
    easy: HashSet<&'static str>,
    discourse_markers: HashSet<&'static str>,
}

impl Default for DefaultDcrsComponents {
    fn default() -> Self {
        DefaultDcrsComponents {
            easy: EASY_WORDS.iter().copied().collect(),
            discourse_markers: PRONOUNS_CONNECTIVES.iter().copied().collect(),
        }
    }
}

impl DcrsComponents for DefaultDcrsComponents {
    fn lexical(&self, text: &str) -> f64 {
        let words = word_tokens(text);
        let types: HashSet<&str> = words.iter().map(String::as_str).collect();
        if types.is_empty() {
            return 0.0;
        }
        let rare = types.iter().filter(|t| !self.easy.contains(*t)).count();
        rare as f64 / types.len() as f64
    }

    fn syntactic(&self, text: &str) -> f64 {
        ((avg_word_count(text).value - 5.0) / 35.0).clamp(0.0, 1.0)
    }

    fn conceptual(&self, text: &str) -> f64 {
        let words = word_tokens(text);
        if words.is_empty() {
            return 0.0;
        }
        let content: HashSet<&str> = words
            .iter()
            .map(String::as_str)
            .filter(|t| !self.easy.contains(*t))
            .collect();
        (content.len() as f64 / words.len() as f64).clamp(0.0, 1.0)
    }

    fn discourse(&self, text: &str) -> f64 {
        let words = word_tokens(text);
        if words.is_empty() {
            return 0.0;
        }
        let hits =
            words.iter().filter(|t| self.discourse_markers.contains(t.as_str())).count();
        ((hits as f64 / words.len() as f64) / 0.25).clamp(0.0, 1.0)
    }
}

/// Weighted composite readability score `αL + βS + γC + δD`.
pub fn dcrs(text: &str, weights: &DcrsWeights, components: &dyn DcrsComponents) -> Result<f64> {
    weights.validate()?;
    let l = components.lexical(text).clamp(0.0, 1.0);
    let s = components.syntactic(text).clamp(0.0, 1.0);
    let c = components.conceptual(text).clamp(0.0, 1.0);
    let d = components.discourse(text).clamp(0.0, 1.0);
    Ok(weights.alpha * l + weights.beta * s + weights.gamma * c + weights.delta * d)
}

// ── Heterogeneity report ────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub count: usize,
}

/// Nearest-rank quantiles of a sample: `q(p) = x[⌈p·n⌉ − 1]` on the sorted
/// values.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let at = |p: f64| -> f64 {
        if p == 0.0 {
            sorted[0]
        } else {
            sorted[((p * n as f64).ceil() as usize - 1).min(n - 1)]
        }
    };
    Some(Quantiles {
        min: sorted[0],
        q25: at(0.25),
        median: at(0.5),
        q75: at(0.75),
        max: sorted[n - 1],
        count: n,
    })
}

#[derive(Clone, Debug)]
pub struct HetRow {
    pub source: String,
    pub side: &'static str,
    pub metric: &'static str,
    pub stats: Quantiles,
}

#[derive(Clone, Debug, Default)]
pub struct HeterogeneityReport {
    pub rows: Vec<HetRow>,
    pub warnings: Vec<String>,
}

impl HeterogeneityReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("source\tside\tmetric\tmin\tq25\tmedian\tq75\tmax\tcount\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                r.source,
                r.side,
                r.metric,
                r.stats.min,
                r.stats.q25,
                r.stats.median,
                r.stats.q75,
                r.stats.max,
                r.stats.count
            ));
        }
        out
    }

    pub fn row(&self, source: &str, side: &str, metric: &str) -> Option<&HetRow> {
        self.rows
            .iter()
            .find(|r| r.source == source && r.side == side && r.metric == metric)
    }
}

/// Per source and side: total word count and composite readability
/// quantiles, suitable for distribution plots.
pub fn heterogeneity_report(corpus: &PairedCorpus) -> HeterogeneityReport {
    let weights = DcrsWeights::default();
    let comps = DefaultDcrsComponents::default();
    let mut groups: BTreeMap<String, Vec<&crate::corpus::PairedSample>> = BTreeMap::new();
    for s in &corpus.samples {
        groups.entry(s.style.clone()).or_default().push(s);
    }
    let mut report = HeterogeneityReport::default();
    for (source, samples) in groups {
        if samples.is_empty() {
            report.warnings.push(format!("source {source} has no samples; omitted"));
            continue;
        }
        for (side, pick) in [
            ("expert", Box::new(|s: &crate::corpus::PairedSample| s.expert.clone())
                as Box<dyn Fn(&crate::corpus::PairedSample) -> String>),
            ("lay", Box::new(|s: &crate::corpus::PairedSample| s.lay.clone())),
        ] {
            let wc: Vec<f64> =
                samples.iter().map(|s| total_word_count(&pick(s)) as f64).collect();
            let dc: Vec<f64> = samples
                .iter()
                .map(|s| dcrs(&pick(s), &weights, &comps).expect("valid default weights"))
                .collect();
            if let Some(stats) = quantiles(&wc) {
                report.rows.push(HetRow { source: source.clone(), side, metric: "word_count", stats });
            }
            if let Some(stats) = quantiles(&dc) {
                report.rows.push(HetRow { source: source.clone(), side, metric: "dcrs", stats });
            }
        }
    }
    report
}

// ── Subspace projection and correlation ─────────────────────────────────

#[derive(Clone, Debug)]
pub struct SubspaceProjection {
    pub directions: [Vec<f64>; 2],
    /// Column mean of the stacked data that was removed before the SVD.
    pub mean: Vec<f64>,
    pub expert_points: Vec<[f64; 2]>,
    pub lay_points: Vec<[f64; 2]>,
}

impl SubspaceProjection {
    /// Projects additional rows onto the fitted plane (centered by the
    /// fitted mean).
    pub fn project(&self, rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
        rows.iter()
            .map(|r| {
                let c: Vec<f64> = r.iter().zip(&self.mean).map(|(v, mu)| v - mu).collect();
                let x: f64 = c.iter().zip(&self.directions[0]).map(|(a, b)| a * b).sum();
                let y: f64 = c.iter().zip(&self.directions[1]).map(|(a, b)| a * b).sum();
                [x, y]
            })
            .collect()
    }
}

const POWER_TOL: f64 = 1e-10;
const POWER_CAP: usize = 10_000;

fn power_iteration(mat: &[Vec<f64>], seed: u64) -> (f64, Vec<f64>) {
    let d = mat.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Tensor::randn(vec![d], 1.0, &mut rng);
    let mut v: Vec<f64> = start.data().to_vec();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    for _ in 0..POWER_CAP {
        let mut next = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                next[i] += mat[i][j] * v[j];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        let same: f64 = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let flipped: f64 =
            next.iter().zip(&v).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
        v = next;
        if same.min(flipped) < POWER_TOL {
            break;
        }
    }
    let mut mv = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            mv[i] += mat[i][j] * v[j];
        }
    }
    let eigval: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    (eigval, v)
}

/// Top-2 right singular directions of the mean-centered stack of paired
/// expert and lay representations, with both sets projected onto them.
pub fn semantic_subspace(expert: &[Vec<f64>], lay: &[Vec<f64>]) -> Result<SubspaceProjection> {
    if expert.len() < 2 || expert.len() != lay.len() {
        return Err(Error::Contract(format!(
            "semantic_subspace needs >= 2 paired rows, got {} and {}",
            expert.len(),
            lay.len()
        )));
    }
    let d = expert[0].len();
    if d < 2 || expert.iter().chain(lay).any(|r| r.len() != d) {
        return Err(Error::Contract("representation rows must share a dimension >= 2".into()));
    }
    let rows: Vec<&Vec<f64>> = expert.iter().chain(lay).collect();
    let m = rows.len();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (s, v) in mean.iter_mut().zip(r.iter()) {
            *s += v;
        }
    }
    for s in mean.iter_mut() {
        *s /= m as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    // Gram matrix XᵀX
    let mut gram = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    let (l1, v1) = power_iteration(&gram, 0xd17ec7);
    if l1 <= 1e-12 {
        return Err(Error::DegenerateSubspace(
            "representations have rank < 2 after centering".into(),
        ));
    }
    // deflate and extract the second direction
    let mut deflated = gram.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i][j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, mut v2) = power_iteration(&deflated, 0xd17ec8);
    if l2 <= 1e-12 * l1.max(1.0) {
        return Err(Error::DegenerateSubspace(
            "representations have rank < 2 after centering".into(),
        ));
    }
    // re-orthonormalize against v1
    let dot: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
    for (x, u) in v2.iter_mut().zip(&v1) {
        *x -= dot * u;
    }
    let norm = v2.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateSubspace("second direction vanished".into()));
    }
    for x in v2.iter_mut() {
        *x /= norm;
    }
    let proj = SubspaceProjection {
        directions: [v1, v2],
        mean,
        expert_points: Vec::new(),
        lay_points: Vec::new(),
    };
    Ok(SubspaceProjection {
        expert_points: proj.project(expert),
        lay_points: proj.project(lay),
        ..proj
    })
}

#[derive(Clone, Debug)]
pub struct CrossCorrelation {
    /// `matrix[a][b]` is the Pearson correlation between expert dimension a
    /// and lay dimension b across the paired samples.
    pub matrix: Vec<Vec<f64>>,
    pub expert_zero_variance: Vec<usize>,
    pub lay_zero_variance: Vec<usize>,
}

fn standardize_columns(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let m = rows.len();
    let d = rows[0].len();
    let mut out = vec![vec![0.0; d]; m];
    let mut flagged = Vec::new();
    for j in 0..d {
        let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / m as f64;
        let var: f64 = rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / m as f64;
        if var == 0.0 {
            flagged.push(j);
            continue;
        }
        let sd = var.sqrt();
        for (o, r) in out.iter_mut().zip(rows) {
            o[j] = (r[j] - mean) / sd;
        }
    }
    (out, flagged)
}

/// Pearson cross-correlation between expert and lay representation
/// dimensions; zero-variance dimensions are flagged and zeroed.
pub fn cross_correlation(expert: &[Vec<f64>], lay: &[Vec<f64>]) -> Result<CrossCorrelation> {
    if expert.len() < 2 || expert.len() != lay.len() {
        return Err(Error::Contract(format!(
            "cross_correlation needs >= 2 paired rows, got {} and {}",
            expert.len(),
            lay.len()
        )));
    }
    let r = expert[0].len();
    if lay[0].len() != r || expert.iter().chain(lay).any(|row| row.len() != r) {
        return Err(Error::Contract("representation rows must share a dimension".into()));
    }
    let m = expert.len() as f64;
    let (e_std, e_flagged) = standardize_columns(expert);
    let (l_std, l_flagged) = standardize_columns(lay);
    let mut matrix = vec![vec![0.0; r]; r];
    for a in 0..r {
        if e_flagged.contains(&a) {
            continue;
        }
        for b in 0..r {
            if l_flagged.contains(&b) {
                continue;
            }
            let mut s = 0.0;
            for i in 0..expert.len() {
                s += e_std[i][a] * l_std[i][b];
            }
            matrix[a][b] = s / m;
        }
    }
    Ok(CrossCorrelation {
        matrix,
        expert_zero_variance: e_flagged,
        lay_zero_variance: l_flagged,
    })
}

/// Mean cosine similarity between paired representation rows.
pub fn mean_pair_cosine(expert: &[Vec<f64>], lay: &[Vec<f64>]) -> Result<f64> {
    if expert.is_empty() || expert.len() != lay.len() {
        return Err(Error::Contract("mean_pair_cosine needs equal nonempty sets".into()));
    }
    let mut total = 0.0;
    for (e, l) in expert.iter().zip(lay) {
        let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nl = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ne == 0.0 || nl == 0.0 {
            return Err(Error::DegenerateVector("zero-norm representation".into()));
        }
        let dot: f64 = e.iter().zip(l).map(|(a, b)| a * b).sum();
        total += dot / (ne * nl);
    }
    Ok(total / expert.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};
    use rand::Rng;

    fn toks(text: &str) -> Vec<String> {
        tokenize(text)
    }

    #[test]
    fn rouge_identical_texts_score_one() {
        let t = toks("the quick brown fox");
        for n in 1..=2 {
            let s = rouge_n(&t, &t, n).unwrap();
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let l = rouge_l(&t, &t);
        assert_eq!(l.f1, 1.0);
    }

    #[test]
    fn rouge_hand_cases() {
        let c = toks("the cat sat");
        let r = toks("the cat ran");
        let r1 = rouge_n(&c, &r, 1).unwrap();
        assert!((r1.f1 - 2.0 / 3.0).abs() < 1e-12);
        let r2 = rouge_n(&c, &r, 2).unwrap();
        assert!((r2.f1 - 0.5).abs() < 1e-12);
        let rl = rouge_l(&c, &r);
        assert!((rl.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_disjoint_and_empty() {
        let a = toks("alpha beta");
        let b = toks("gamma delta");
        assert_eq!(rouge_n(&a, &b, 1).unwrap().f1, 0.0);
        let empty: Vec<String> = vec![];
        let s = rouge_n(&empty, &a, 1).unwrap();
        assert!(s.degenerate && s.f1 == 0.0);
    }

    #[test]
    fn rouge_swap_exchanges_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = ["a", "b", "c", "d", "e"];
        for _ in 0..25 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..rng.random_range(1..8))
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect()
            };
            let c = draw(&mut rng);
            let r = draw(&mut rng);
            let fwd = rouge_n(&c, &r, 1).unwrap();
            let back = rouge_n(&r, &c, 1).unwrap();
            assert!((fwd.precision - back.recall).abs() < 1e-12);
            assert!((fwd.recall - back.precision).abs() < 1e-12);
            assert!((fwd.f1 - back.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn rouge_l_reversed_distinct_tokens() {
        let c = toks("one two three four five");
        let r: Vec<String> = c.iter().rev().cloned().collect();
        let s = rouge_l(&c, &r);
        assert!((s.f1 - 0.2).abs() < 1e-12); // LCS = 1
    }

    /// Exhaustive subsequence oracle for short sequences.
    fn lcs_oracle(a: &[String], b: &[String]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0usize;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<&String> =
                short.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| t).collect();
            // is `sub` a subsequence of `long`?
            let mut it = long.iter();
            if sub.iter().all(|s| it.any(|l| &l == s)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    #[test]
    fn rouge_l_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vocab = ["x", "y", "z", "w"];
        for _ in 0..100 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..rng.random_range(1..=10))
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect()
            };
            let c = draw(&mut rng);
            let r = draw(&mut rng);
            let expect = lcs_oracle(&c, &r) as f64;
            let got = rouge_l(&c, &r);
            let p = expect / c.len() as f64;
            let rr = expect / r.len() as f64;
            let f1 = if p + rr == 0.0 { 0.0 } else { 2.0 * p * rr / (p + rr) };
            assert!((got.f1 - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn lcs_dominates_longest_contiguous_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let vocab = ["m", "n", "o", "p"];
        for _ in 0..50 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..rng.random_range(2..=10))
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect()
            };
            let c = draw(&mut rng);
            let r = draw(&mut rng);
            // longest common contiguous run is a common subsequence
            let mut run = 0usize;
            for i in 0..c.len() {
                for j in 0..r.len() {
                    let mut k = 0;
                    while i + k < c.len() && j + k < r.len() && c[i + k] == r[j + k] {
                        k += 1;
                    }
                    run = run.max(k);
                }
            }
            let lcs = super::lcs_len(&c, &r);
            assert!(lcs >= run, "LCS {lcs} below contiguous run {run}");
        }
    }

    #[test]
    fn bleu_identical_is_one_and_brevity_case() {
        let t = toks("alpha beta gamma delta epsilon zeta");
        assert!((bleu4(&t, &t).unwrap().score - 1.0).abs() < 1e-12);
        // candidate = first 5 tokens of a 10-token reference: all candidate
        // n-grams match, so the score is exactly the brevity penalty e^{-1}
        let reference: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let candidate = reference[..5].to_vec();
        let b = bleu4(&candidate, &reference).unwrap();
        assert!((b.score - (-1.0f64).exp()).abs() < 1e-9);
        assert!((b.score - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn bleu_contract_errors_and_flags() {
        let t = toks("a b c");
        assert!(bleu(&t, &t, 4, &[0.3, 0.3, 0.3, 0.3], BleuSmoothing::Additive).is_err());
        let empty: Vec<String> = vec![];
        let r = bleu4(&empty, &t).unwrap();
        assert!(r.degenerate && r.score == 0.0);
    }

    /// Direct-formula oracle: independent n-gram matching through linear
    /// scans instead of hash maps, product form, same effective-order and
    /// smoothing rules.
    fn bleu_oracle(c: &[String], r: &[String]) -> f64 {
        if c.is_empty() || r.is_empty() {
            return 0.0;
        }
        let grams = |t: &[String], n: usize| -> Vec<Vec<String>> {
            if t.len() < n {
                vec![]
            } else {
                t.windows(n).map(|w| w.to_vec()).collect()
            }
        };
        let mut precisions: Vec<f64> = Vec::new();
        for n in 1..=4usize {
            let cg = grams(c, n);
            let rg = grams(r, n);
            if cg.is_empty() && rg.is_empty() {
                continue;
            }
            let mut matched = 0usize;
            let mut rg_used = vec![false; rg.len()];
            for g in &cg {
                if let Some(pos) = rg.iter().enumerate().position(|(i, x)| !rg_used[i] && x == g) {
                    rg_used[pos] = true;
                    matched += 1;
                }
            }
            let p = if !cg.is_empty() && matched > 0 {
                matched as f64 / cg.len() as f64
            } else {
                1.0 / (2.0 * cg.len().max(1) as f64)
            };
            precisions.push(p);
        }
        let mut product: f64 = 1.0;
        for p in &precisions {
            product *= p.powf(1.0 / precisions.len() as f64);
        }
        let bp = if c.len() > r.len() {
            1.0
        } else {
            (1.0 - r.len() as f64 / c.len() as f64).exp()
        };
        bp * product
    }

    #[test]
    fn bleu_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vocab = ["a", "b", "c", "d", "e", "f"];
        for _ in 0..100 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..rng.random_range(1..=9))
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect()
            };
            let c = draw(&mut rng);
            let r = draw(&mut rng);
            let got = bleu4(&c, &r).unwrap().score;
            let expect = bleu_oracle(&c, &r);
            assert!((got - expect).abs() < 1e-9, "c={c:?} r={r:?}: {got} vs {expect}");
        }
    }

    #[test]
    fn bleu_bounded_by_min_precision_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vocab = ["p", "q", "r"];
        for _ in 0..50 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..rng.random_range(4..=10))
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect()
            };
            let c = draw(&mut rng);
            let r = draw(&mut rng);
            let score = bleu4(&c, &r).unwrap().score;
            assert!((0.0..=1.0).contains(&score));
            // BP <= 1 and every factor <= 1, so score <= each p_n^{w_n}
            for n in 1..=4 {
                let s = rouge_n(&c, &r, n).unwrap();
                if s.precision > 0.0 {
                    assert!(score <= s.precision.powf(0.25) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn word_count_cases() {
        assert!((avg_word_count("Hello world. Foo bar baz.").value - 2.5).abs() < 1e-12);
        let single = avg_word_count("word");
        assert_eq!(single.value, 1.0);
        assert!(single.fallback);
        let twenty = "one two three four five. six seven eight nine ten. \
                      one two three four five. six seven eight nine ten.";
        assert!((avg_word_count(twenty).value - 5.0).abs() < 1e-12);
    }

    struct FixedComponents(f64, f64, f64, f64);
    impl DcrsComponents for FixedComponents {
        fn lexical(&self, _: &str) -> f64 {
            self.0
        }
        fn syntactic(&self, _: &str) -> f64 {
            self.1
        }
        fn conceptual(&self, _: &str) -> f64 {
            self.2
        }
        fn discourse(&self, _: &str) -> f64 {
            self.3
        }
    }

    #[test]
    fn dcrs_composite_cases() {
        let w = DcrsWeights::default();
        assert_eq!(dcrs("x", &w, &FixedComponents(0.0, 0.0, 0.0, 0.0)).unwrap(), 0.0);
        let mid = dcrs("x", &w, &FixedComponents(0.2, 0.4, 0.6, 0.8)).unwrap();
        assert!((mid - 0.5).abs() < 1e-12);
        let wl = DcrsWeights { alpha: 1.0, beta: 0.0, gamma: 0.0, delta: 0.0 };
        assert!((dcrs("x", &wl, &FixedComponents(0.7, 0.1, 0.1, 0.1)).unwrap() - 0.7).abs() < 1e-12);
        let bad = DcrsWeights { alpha: 0.5, beta: 0.5, gamma: 0.5, delta: 0.0 };
        assert!(matches!(dcrs("x", &bad, &FixedComponents(0.0, 0.0, 0.0, 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn quantiles_match_sort_and_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1usize, 2, 5, 17, 100] {
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let q = quantiles(&values).unwrap();
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(q.min, sorted[0]);
            assert_eq!(q.max, sorted[n - 1]);
            assert_eq!(q.q25, sorted[((0.25 * n as f64).ceil() as usize - 1).min(n - 1)]);
            assert_eq!(q.median, sorted[((0.5 * n as f64).ceil() as usize - 1).min(n - 1)]);
            assert_eq!(q.q75, sorted[((0.75 * n as f64).ceil() as usize - 1).min(n - 1)]);
        }
    }

    #[test]
    fn heterogeneity_identical_sources_identical_rows() {
        let corpus = synth_corpus(&SynthSpec::three_style(10, 4)).unwrap();
        let mut doubled = corpus.clone();
        for s in corpus.samples.iter() {
            let mut copy = s.clone();
            copy.id = format!("{}-copy", s.id);
            copy.style = format!("{}2", s.style);
            doubled.samples.push(copy);
        }
        let report = heterogeneity_report(&doubled);
        for style in ["concise", "expanded", "plain"] {
            for side in ["expert", "lay"] {
                for metric in ["word_count", "dcrs"] {
                    let a = report.row(style, side, metric).unwrap();
                    let b = report.row(&format!("{style}2"), side, metric).unwrap();
                    assert_eq!(a.stats, b.stats);
                }
            }
        }
    }

    #[test]
    fn heterogeneity_sees_the_style_length_contrast() {
        let corpus = synth_corpus(&SynthSpec::three_style(25, 7)).unwrap();
        let report = heterogeneity_report(&corpus);
        let concise_lay = report.row("concise", "lay", "word_count").unwrap();
        let concise_expert = report.row("concise", "expert", "word_count").unwrap();
        assert!(concise_lay.stats.median < concise_expert.stats.median);
        let expanded_lay = report.row("expanded", "lay", "word_count").unwrap();
        let expanded_expert = report.row("expanded", "expert", "word_count").unwrap();
        assert!(expanded_lay.stats.median > expanded_expert.stats.median);
    }

    #[test]
    fn subspace_recovers_planted_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 6;
        // orthonormal basis of the planted plane
        let u1: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let u2: Vec<f64> = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let make = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let a: f64 = rng.random_range(-2.0..2.0);
                    let b: f64 = rng.random_range(-1.0..1.0);
                    (0..d).map(|j| a * u1[j] + b * u2[j]).collect()
                })
                .collect()
        };
        let expert = make(&mut rng, 40);
        let lay = make(&mut rng, 40);
        let proj = semantic_subspace(&expert, &lay).unwrap();
        for dir in &proj.directions {
            // the recovered direction lies in span(u1, u2)
            let in_plane = dir[0] * dir[0] + dir[1] * dir[1];
            assert!((in_plane - 1.0).abs() < 1e-6, "direction leaves the plane: {dir:?}");
        }
        // orthonormal within 1e-9
        let dot: f64 =
            proj.directions[0].iter().zip(&proj.directions[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9);
        for dir in &proj.directions {
            let n: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn subspace_identical_sets_coincide_and_projection_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> =
            (0..20).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let proj = semantic_subspace(&rows, &rows).unwrap();
        for (e, l) in proj.expert_points.iter().zip(&proj.lay_points) {
            assert_eq!(e, l);
        }
        // a vector already in the span projects losslessly
        let w: Vec<f64> = (0..5)
            .map(|j| 0.8 * proj.directions[0][j] - 1.3 * proj.directions[1][j])
            .collect();
        let x: f64 = w.iter().zip(&proj.directions[0]).map(|(a, b)| a * b).sum();
        let y: f64 = w.iter().zip(&proj.directions[1]).map(|(a, b)| a * b).sum();
        let norm2: f64 = w.iter().map(|v| v * v).sum();
        assert!((x * x + y * y - norm2).abs() < 1e-9);
    }

    #[test]
    fn subspace_rejects_rank_deficient_input() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(
            semantic_subspace(&rows, &rows),
            Err(Error::DegenerateSubspace(_))
        ));
    }

    #[test]
    fn cross_correlation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> =
            (0..50).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let same = cross_correlation(&rows, &rows).unwrap();
        for (i, row) in same.matrix.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-12);
        }
        // permuted columns show the permutation pattern
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> =
            rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let c = cross_correlation(&rows, &permuted).unwrap();
        for (a, row) in c.matrix.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                if perm[b] == a {
                    assert!((v - 1.0).abs() < 1e-12);
                } else {
                    assert!(v.abs() < 1.0 - 1e-9 || (v - 1.0).abs() < 1e-12);
                }
            }
        }
        // independent sets decorrelate
        let other: Vec<Vec<f64>> =
            (0..1000).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let more: Vec<Vec<f64>> =
            (0..1000).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let indep = cross_correlation(&other, &more).unwrap();
        for row in &indep.matrix {
            for &v in row {
                assert!(v.abs() < 0.15);
            }
        }
        // zero variance flagged
        let flat: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let flagged = cross_correlation(&flat, &flat).unwrap();
        assert_eq!(flagged.expert_zero_variance, vec![0]);
        assert!(flagged.matrix[0].iter().all(|&v| v == 0.0));
    }
}
