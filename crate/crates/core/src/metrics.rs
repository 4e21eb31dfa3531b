//! Diversity, similarity and task metrics, run aggregation and the Wilcoxon test.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("n must be at least 1")]
    InvalidN,
    #[error("{0}: no input")]
    Empty(&'static str),
    #[error("group `{0}` is empty")]
    EmptyGroup(String),
    #[error("group `{seed}` has {found} texts; at least 2 are needed")]
    TooFewTexts { seed: String, found: usize },
    #[error("text has no tokens: {0:?}")]
    NoTokens(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label `{0}` is not among the classes")]
    UnknownClass(String),
    #[error("{found} non-zero differences; at least {WILCOXON_MIN_NONZERO} are needed")]
    Underpowered { found: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("embedding source: {0}")]
    Embedding(String),
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}' | '\u{2026}' | '\u{2013}' | '\u{2014}' | '\u{ab}' | '\u{bb}' | '\u{bf}' | '\u{a1}')
}

/// Lower-cased whitespace tokens with surrounding punctuation removed; empty tokens dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(is_punct).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramProfile {
    pub n: usize,
    pub unique_count: usize,
    pub total_count: usize,
}

impl NGramProfile {
    pub fn distinct(&self) -> f64 {
        if self.total_count == 0 {
            0.0
        } else {
            self.unique_count as f64 / self.total_count as f64
        }
    }
}

pub fn ngram_profile<S: AsRef<str>>(texts: &[S], n: usize) -> Result<NGramProfile, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidN);
    }
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0;
    for text in texts {
        let toks = tokenize(text.as_ref());
        for gram in toks.windows(n) {
            total += 1;
            if !seen.contains(gram) {
                seen.insert(gram.to_vec());
            }
        }
    }
    Ok(NGramProfile { n, unique_count: seen.len(), total_count: total })
}

/// Unique over total n-grams of the pooled texts; 0 when there are no n-grams.
pub fn distinct_n<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64, MetricError> {
    ngram_profile(texts, n).map(|p| p.distinct())
}

/// Distinct-N over seeds and augmentations pooled together.
pub fn distinct_n_global<S: AsRef<str>>(seeds: &[S], augmented: &[S], n: usize) -> Result<f64, MetricError> {
    let pooled: Vec<&str> = seeds.iter().chain(augmented).map(AsRef::as_ref).collect();
    distinct_n(&pooled, n)
}

/// Mean of Distinct-N computed within each group.
pub fn distinct_n_per_seed<S: AsRef<str>>(groups: &BTreeMap<String, Vec<S>>, n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidN);
    }
    if groups.is_empty() {
        return Err(MetricError::Empty("distinct_n_per_seed"));
    }
    let mut sum = 0.0;
    for (seed, texts) in groups {
        if texts.is_empty() {
            return Err(MetricError::EmptyGroup(seed.clone()));
        }
        sum += distinct_n(texts, n)?;
    }
    Ok(sum / groups.len() as f64)
}

pub fn unique_ngram_count<S: AsRef<str>>(texts: &[S], n: usize) -> Result<usize, MetricError> {
    ngram_profile(texts, n).map(|p| p.unique_count)
}

/// Token embeddings for the embedding-based scorer.
pub trait Embedder: Send + Sync {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError>;
}

/// Offline embedder: hashed character trigrams of `#token#`, L2-normalised.
#[derive(Debug, Clone, Copy)]
pub struct CharNgramEmbedder {
    pub dims: usize,
}

impl Default for CharNgramEmbedder {
    fn default() -> Self {
        CharNgramEmbedder { dims: 512 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

impl Embedder for CharNgramEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        Ok(tokens
            .iter()
            .map(|t| {
                let chars: Vec<char> = format!("#{t}#").chars().collect();
                let dims = self.dims.max(1);
                let mut v = vec![0.0; dims];
                for w in chars.windows(3.min(chars.len())) {
                    let s: String = w.iter().collect();
                    v[(fnv1a(s.as_bytes()) % dims as u64) as usize] += 1.0;
                }
                normalize(&mut v);
                v
            })
            .collect())
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// OpenAI-compatible `/embeddings` endpoint with an in-process token cache.
pub struct HttpEmbedder {
    url: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, api_key_env: &str) -> Result<Self, MetricError> {
        let api_key = std::env::var(api_key_env)
            .map_err(|_| MetricError::Embedding(format!("environment variable {api_key_env} is not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| MetricError::Embedding(e.to_string()))?;
        Ok(HttpEmbedder {
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            client,
            cache: Mutex::new(HashMap::new()),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().unwrap();
            let mut m: Vec<String> = tokens.iter().filter(|t| !cache.contains_key(*t)).cloned().collect();
            m.sort();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let body = serde_json::json!({ "model": self.model, "input": missing });
            let response = self
                .client
                .post(&self.url)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
                .map_err(|e| MetricError::Embedding(e.to_string()))?;
            if !response.status().is_success() {
                return Err(MetricError::Embedding(format!("status {}", response.status())));
            }
            let reply: EmbeddingReply = response.json().map_err(|e| MetricError::Embedding(e.to_string()))?;
            let mut cache = self.cache.lock().unwrap();
            for item in reply.data {
                let token = missing.get(item.index).ok_or_else(|| MetricError::Embedding("reply index out of range".into()))?;
                let mut v = item.embedding;
                normalize(&mut v);
                cache.insert(token.clone(), v);
            }
        }
        let cache = self.cache.lock().unwrap();
        tokens
            .iter()
            .map(|t| cache.get(t).cloned().ok_or_else(|| MetricError::Embedding(format!("no embedding for `{t}`"))))
            .collect()
    }
}

/// Token similarity used by greedy matching.
#[derive(Clone)]
pub enum SimilarityScorer {
    /// 1 for equal tokens, 0 otherwise.
    ExactToken,
    /// Cosine of token embeddings, clamped to `[0, 1]`.
    Embedding(Arc<dyn Embedder>),
}

impl std::fmt::Debug for SimilarityScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimilarityScorer::ExactToken => write!(f, "ExactToken"),
            SimilarityScorer::Embedding(_) => write!(f, "Embedding"),
        }
    }
}

impl SimilarityScorer {
    pub fn name(&self) -> &'static str {
        match self {
            SimilarityScorer::ExactToken => "exact_token",
            SimilarityScorer::Embedding(_) => "embedding_greedy",
        }
    }

    /// `m[i][j]` is the similarity of `a[i]` and `b[j]`.
    pub fn matrix(&self, a: &[String], b: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        match self {
            SimilarityScorer::ExactToken => {
                Ok(a.iter().map(|x| b.iter().map(|y| if x == y { 1.0 } else { 0.0 }).collect()).collect())
            }
            SimilarityScorer::Embedding(embedder) => {
                let ea = embedder.embed(a)?;
                let eb = embedder.embed(b)?;
                Ok(ea
                    .iter()
                    .zip(a)
                    .map(|(va, ta)| {
                        eb.iter()
                            .zip(b)
                            .map(|(vb, tb)| {
                                if ta == tb {
                                    1.0
                                } else {
                                    va.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>().clamp(0.0, 1.0)
                                }
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

/// Greedy-matching F1 between the token sequences of two texts.
pub fn similarity_greedy_f1(candidate: &str, reference: &str, scorer: &SimilarityScorer) -> Result<f64, MetricError> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() {
        return Err(MetricError::NoTokens(candidate.to_string()));
    }
    if r.is_empty() {
        return Err(MetricError::NoTokens(reference.to_string()));
    }
    let m = scorer.matrix(&c, &r)?;
    let precision = m.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).sum::<f64>() / c.len() as f64;
    let recall = (0..r.len()).map(|j| m.iter().map(|row| row[j]).fold(0.0, f64::max)).sum::<f64>() / r.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean of `1 - F1` over (generated, original) pairs.
pub fn semantic_variability<S: AsRef<str>>(pairs: &[(S, S)], scorer: &SimilarityScorer) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("semantic_variability"));
    }
    let mut sum = 0.0;
    for (g, o) in pairs {
        sum += 1.0 - similarity_greedy_f1(g.as_ref(), o.as_ref(), scorer)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Per group, mean `1 - F1` over unordered pairs of its texts; then the mean over groups.
pub fn semantic_variability_pairwise<S: AsRef<str>>(
    groups: &BTreeMap<String, Vec<S>>,
    scorer: &SimilarityScorer,
) -> Result<f64, MetricError> {
    if groups.is_empty() {
        return Err(MetricError::Empty("semantic_variability_pairwise"));
    }
    let mut total = 0.0;
    for (seed, texts) in groups {
        if texts.len() < 2 {
            return Err(MetricError::TooFewTexts { seed: seed.clone(), found: texts.len() });
        }
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..texts.len() {
            for j in i + 1..texts.len() {
                sum += 1.0 - similarity_greedy_f1(texts[i].as_ref(), texts[j].as_ref(), scorer)?;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / groups.len() as f64)
}

fn check_lengths<A, B>(gold: &[A], pred: &[B]) -> Result<(), MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch { left: gold.len(), right: pred.len() });
    }
    if gold.is_empty() {
        return Err(MetricError::Empty("labels"));
    }
    Ok(())
}

/// Fraction of positions where the trimmed labels are equal.
pub fn accuracy<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64, MetricError> {
    check_lengths(gold, pred)?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g.as_ref().trim() == p.as_ref().trim()).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Accuracy with case-insensitive matching, used for QA answers.
pub fn answer_accuracy<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64, MetricError> {
    check_lengths(gold, pred)?;
    let hits = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| g.as_ref().trim().to_lowercase() == p.as_ref().trim().to_lowercase())
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1; a class with no predictions and no gold scores 0.
pub fn macro_f1<S: AsRef<str>>(gold: &[S], pred: &[S], classes: &[S]) -> Result<f64, MetricError> {
    check_lengths(gold, pred)?;
    if classes.is_empty() {
        return Err(MetricError::Empty("classes"));
    }
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_ref().trim(), i)).collect();
    let lookup = |s: &S| -> Result<usize, MetricError> {
        index.get(s.as_ref().trim()).copied().ok_or_else(|| MetricError::UnknownClass(s.as_ref().to_string()))
    };
    let k = classes.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (lookup(g)?, lookup(p)?);
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let f1_sum: f64 = (0..k)
        .map(|i| {
            let denom = 2 * tp[i] + fp[i] + fn_[i];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[i] as f64 / denom as f64
            }
        })
        .sum();
    Ok(f1_sum / k as f64)
}

pub const WILCOXON_MIN_NONZERO: usize = 5;
/// Largest sample size that uses the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;
pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub method: WilcoxonMethod,
}

impl WilcoxonResult {
    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE_LEVEL
    }
}

/// Differences within this distance, scaled by magnitude, count as zero or as tied.
const TIE_TOLERANCE: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Average ranks (1-based) of `values`, which must be sorted ascending.
fn average_ranks(sorted: &[f64]) -> Vec<f64> {
    let mut ranks = vec![0.0; sorted.len()];
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && close(sorted[j], sorted[i]) {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        ranks[i..j].iter_mut().for_each(|r| *r = avg);
        i = j;
    }
    ranks
}

/// P(W+ <= stat) under the null, by counting sign assignments over doubled ranks.
fn exact_lower_tail(ranks: &[f64], stat: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (stat * 2.0).round() as usize;
    let below: f64 = counts[..=limit.min(max)].iter().sum();
    below / 2f64.powi(ranks.len() as i32)
}

/// Two-sided paired signed-rank test of `a` against `b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).filter(|(x, y)| !close(**x, **y)).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    if n < WILCOXON_MIN_NONZERO {
        return Err(MetricError::Underpowered { found: n });
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus) + 0.0;

    if n <= WILCOXON_EXACT_MAX {
        let p = (2.0 * exact_lower_tail(&ranks, statistic)).min(1.0);
        return Ok(WilcoxonResult { statistic, p_value: p, n, method: WilcoxonMethod::Exact });
    }
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranks.len() {
        let j = ranks[i..].iter().take_while(|r| **r == ranks[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (statistic - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.cdf(z)).min(1.0);
    Ok(WilcoxonResult { statistic, p_value: p, n, method: WilcoxonMethod::Normal })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: BTreeMap<String, MetricSummary>,
}

#[derive(Serialize, Deserialize)]
struct ReportRecord {
    metric: String,
    mean: f64,
    std: f64,
    runs: usize,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.entries.get(metric)
    }

    /// `metric.mean=`, `metric.std=` and `metric.runs=` lines in metric order.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (name, s) in &self.entries {
            let _ = writeln!(out, "{name}.mean={}", s.mean);
            let _ = writeln!(out, "{name}.std={}", s.std);
            let _ = writeln!(out, "{name}.runs={}", s.runs);
        }
        out
    }

    /// One `{"metric", "mean", "std", "runs"}` record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (name, s) in &self.entries {
            let rec = ReportRecord { metric: name.clone(), mean: s.mean, std: s.std, runs: s.runs };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: ReportRecord = serde_json::from_str(line)?;
            entries.insert(r.metric, MetricSummary { mean: r.mean, std: r.std, runs: r.runs });
        }
        Ok(MetricReport { entries })
    }
}

/// Population mean and standard deviation per metric.
pub fn aggregate_runs(per_run: &BTreeMap<String, Vec<f64>>) -> Result<MetricReport, MetricError> {
    let mut entries = BTreeMap::new();
    for (name, values) in per_run {
        if values.is_empty() {
            return Err(MetricError::EmptyGroup(name.clone()));
        }
        let n = values.len() as f64;
        // identical runs report their value exactly, with zero spread
        if values.iter().all(|v| v == &values[0]) {
            entries.insert(name.clone(), MetricSummary { mean: values[0], std: 0.0, runs: values.len() });
            continue;
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() == 1 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt() };
        entries.insert(name.clone(), MetricSummary { mean, std, runs: values.len() });
    }
    Ok(MetricReport { entries })
}
