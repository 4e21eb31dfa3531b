//! Comparison augmenters: EDA, back-translation, paraphrasing and few-shot mixing.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{ConfigError, ParseFailure};
use crate::llm_gateway::{prompt_hash, CompletionRequest, Gateway, GatewayError, RetryPolicy};
use crate::response::clean_body;
use crate::ttr_engine::{render, SeedAugmentation, VariantFailure};
use crate::types::{label_set, AugmentedSample, IobTag, LabelPayload, RunConfig, SeedSample, TaskType};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("synonym lexicon {path}: {source}")]
    Lexicon { path: PathBuf, source: io::Error },
    #[error("{method}: no usable response after {attempts} attempts: {last}")]
    Parse { method: &'static str, attempts: u32, last: ParseFailure },
    #[error("all {} variants of `{seed_id}` failed", failures.len())]
    AllVariantsFailed { seed_id: String, failures: Vec<VariantFailure> },
}

fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Randomness consumed by the EDA operations.
pub trait EdaRandom {
    /// Uniform in `0..upper`; `upper` is at least 1.
    fn index(&mut self, upper: usize) -> usize;
    /// Uniform in `[0, 1)`.
    fn unit(&mut self) -> f64;
}

pub struct SeededRandom(ChaCha8Rng);

impl SeededRandom {
    pub fn new(seed: u64) -> Self {
        SeededRandom(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl EdaRandom for SeededRandom {
    fn index(&mut self, upper: usize) -> usize {
        self.0.random_range(0..upper)
    }

    fn unit(&mut self) -> f64 {
        self.0.random()
    }
}

/// Replays fixed draws; indices are reduced modulo `upper`. Panics when exhausted.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRandom {
    indices: VecDeque<usize>,
    units: VecDeque<f64>,
}

impl ScriptedRandom {
    pub fn new(indices: impl IntoIterator<Item = usize>, units: impl IntoIterator<Item = f64>) -> Self {
        ScriptedRandom { indices: indices.into_iter().collect(), units: units.into_iter().collect() }
    }
}

impl EdaRandom for ScriptedRandom {
    fn index(&mut self, upper: usize) -> usize {
        self.indices.pop_front().expect("scripted index draws exhausted") % upper
    }

    fn unit(&mut self) -> f64 {
        self.units.pop_front().expect("scripted unit draws exhausted")
    }
}

/// Case-insensitive synonym table read from `word<TAB>syn1,syn2,...` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: HashMap<String, Vec<String>>,
}

fn lookup_form(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

impl SynonymLexicon {
    /// Blank lines and `#` comments are ignored; malformed lines are skipped.
    pub fn parse(text: &str) -> Self {
        let mut entries: HashMap<String, Vec<String>> = HashMap::new();
        for line in text.lines() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let Some((word, syns)) = line.split_once('\t') else { continue };
            let key = lookup_form(word);
            let list = entries.entry(key.clone()).or_default();
            for s in syns.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if s.to_lowercase() != key && !list.iter().any(|x| x == s) {
                    list.push(s.to_string());
                }
            }
        }
        entries.retain(|_, v| !v.is_empty());
        SynonymLexicon { entries }
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        fs::read_to_string(path)
            .map(|t| SynonymLexicon::parse(&t))
            .map_err(|source| BaselineError::Lexicon { path: path.to_path_buf(), source })
    }

    pub fn bundled() -> Self {
        SynonymLexicon::parse(include_str!("../data/mini_lexicon.tsv"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn synonyms(&self, word: &str) -> &[String] {
        self.entries.get(&lookup_form(word)).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdaConfig {
    pub alpha: f64,
    pub p_delete: f64,
    pub rng_seed: u64,
    /// Bundled mini lexicon when absent.
    pub synonym_lexicon: Option<PathBuf>,
}

impl Default for EdaConfig {
    fn default() -> Self {
        EdaConfig { alpha: 0.1, p_delete: 0.1, rng_seed: 0, synonym_lexicon: None }
    }
}

impl EdaConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::Invalid(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.p_delete) {
            return Err(ConfigError::Invalid(format!("p_delete must be in [0, 1], got {}", self.p_delete)));
        }
        Ok(())
    }
}

/// Changed positions for a text of `len` tokens: `max(1, round(alpha * len))`.
pub fn eda_change_count(alpha: f64, len: usize) -> usize {
    ((alpha * len as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdaOperation {
    SynonymReplacement,
    RandomInsertion,
    RandomSwap,
    RandomDeletion,
}

impl EdaOperation {
    pub const ALL: [EdaOperation; 4] = [
        EdaOperation::SynonymReplacement,
        EdaOperation::RandomInsertion,
        EdaOperation::RandomSwap,
        EdaOperation::RandomDeletion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdaOperation::SynonymReplacement => "synonym_replacement",
            EdaOperation::RandomInsertion => "random_insertion",
            EdaOperation::RandomSwap => "random_swap",
            EdaOperation::RandomDeletion => "random_deletion",
        }
    }
}

/// A token EDA can rewrite. Tagged tokens keep their tag on replacement.
pub trait EdaToken: Clone {
    fn word(&self) -> &str;
    fn replaced(&self, word: &str) -> Self;
    fn inserted(word: &str) -> Self;
}

impl EdaToken for String {
    fn word(&self) -> &str {
        self
    }
    fn replaced(&self, word: &str) -> Self {
        word.to_string()
    }
    fn inserted(word: &str) -> Self {
        word.to_string()
    }
}

impl EdaToken for (String, IobTag) {
    fn word(&self) -> &str {
        &self.0
    }
    fn replaced(&self, word: &str) -> Self {
        (word.to_string(), self.1)
    }
    fn inserted(word: &str) -> Self {
        (word.to_string(), IobTag::O)
    }
}

fn synonym_positions<T: EdaToken>(tokens: &[T], lexicon: &SynonymLexicon) -> Vec<usize> {
    (0..tokens.len()).filter(|&i| !lexicon.synonyms(tokens[i].word()).is_empty()).collect()
}

/// Replaces up to `n` distinct tokens that have synonyms.
pub fn synonym_replacement<T: EdaToken>(tokens: &[T], n: usize, lexicon: &SynonymLexicon, rng: &mut dyn EdaRandom) -> Vec<T> {
    let mut out = tokens.to_vec();
    let mut candidates = synonym_positions(tokens, lexicon);
    for _ in 0..n {
        if candidates.is_empty() {
            break;
        }
        let pos = candidates.swap_remove(rng.index(candidates.len()));
        let syns = lexicon.synonyms(tokens[pos].word());
        out[pos] = tokens[pos].replaced(&syns[rng.index(syns.len())]);
    }
    out
}

/// Inserts `n` synonyms of random tokens at random positions; needs one token with synonyms.
pub fn random_insertion<T: EdaToken>(tokens: &[T], n: usize, lexicon: &SynonymLexicon, rng: &mut dyn EdaRandom) -> Vec<T> {
    let candidates = synonym_positions(tokens, lexicon);
    let mut out = tokens.to_vec();
    if candidates.is_empty() {
        return out;
    }
    for _ in 0..n {
        let source = candidates[rng.index(candidates.len())];
        let syns = lexicon.synonyms(tokens[source].word());
        let word = &syns[rng.index(syns.len())];
        let at = rng.index(out.len() + 1);
        out.insert(at, T::inserted(word));
    }
    out
}

/// Performs `n` swaps of two positions; a colliding second draw is retried up to three times.
pub fn random_swap<T: Clone>(tokens: &[T], n: usize, rng: &mut dyn EdaRandom) -> Vec<T> {
    let mut out = tokens.to_vec();
    if out.len() < 2 {
        return out;
    }
    for _ in 0..n {
        let i = rng.index(out.len());
        let mut j = rng.index(out.len());
        let mut tries = 0;
        while j == i && tries < 3 {
            j = rng.index(out.len());
            tries += 1;
        }
        out.swap(i, j);
    }
    out
}

/// Drops each token with probability `p`; one random token survives if all would go.
pub fn random_deletion<T: Clone>(tokens: &[T], p: f64, rng: &mut dyn EdaRandom) -> Vec<T> {
    if tokens.len() <= 1 {
        return tokens.to_vec();
    }
    let kept: Vec<T> = tokens.iter().filter(|_| rng.unit() >= p).cloned().collect();
    if kept.is_empty() {
        return vec![tokens[rng.index(tokens.len())].clone()];
    }
    kept
}

/// Re-tags `I-X` without a preceding `B-X`/`I-X` as `B-X`.
pub fn repair_iob(tags: &mut [IobTag]) {
    let mut prev: Option<IobTag> = None;
    for tag in tags.iter_mut() {
        if tag.is_inside() && prev.and_then(IobTag::entity_type) != tag.entity_type() {
            *tag = IobTag::ALL
                .into_iter()
                .find(|t| t.is_begin() && t.entity_type() == tag.entity_type())
                .expect("every inside tag has a begin tag");
        }
        prev = Some(*tag);
    }
}

pub struct Eda {
    config: EdaConfig,
    lexicon: SynonymLexicon,
}

impl Eda {
    pub fn new(config: EdaConfig) -> Result<Self, BaselineError> {
        config.validate()?;
        let lexicon = match &config.synonym_lexicon {
            Some(path) => SynonymLexicon::load(path)?,
            None => SynonymLexicon::bundled(),
        };
        Ok(Eda { config, lexicon })
    }

    pub fn with_lexicon(config: EdaConfig, lexicon: SynonymLexicon) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Eda { config, lexicon })
    }

    pub fn config(&self) -> &EdaConfig {
        &self.config
    }

    /// Same lexicon and rates, different RNG seed.
    pub fn reseeded(&self, rng_seed: u64) -> Eda {
        Eda { config: EdaConfig { rng_seed, ..self.config.clone() }, lexicon: self.lexicon.clone() }
    }

    /// Draws one applicable operation uniformly and applies it.
    pub fn apply<T: EdaToken>(&self, tokens: &[T], rng: &mut dyn EdaRandom) -> (EdaOperation, Vec<T>) {
        let n = eda_change_count(self.config.alpha, tokens.len());
        let has_synonyms = !synonym_positions(tokens, &self.lexicon).is_empty();
        let mut remaining = EdaOperation::ALL.to_vec();
        loop {
            let op = remaining[rng.index(remaining.len())];
            let out = match op {
                EdaOperation::SynonymReplacement | EdaOperation::RandomInsertion if !has_synonyms => {
                    remaining.retain(|o| *o != op);
                    continue;
                }
                EdaOperation::SynonymReplacement => synonym_replacement(tokens, n, &self.lexicon, rng),
                EdaOperation::RandomInsertion => random_insertion(tokens, n, &self.lexicon, rng),
                EdaOperation::RandomSwap => random_swap(tokens, n, rng),
                EdaOperation::RandomDeletion => random_deletion(tokens, self.config.p_delete, rng),
            };
            return (op, out);
        }
    }

    /// `k` variants, each from its own deterministic random stream.
    ///
    /// QA seeds have only their question line rewritten so the answer stays in the context.
    pub fn augment(&self, seed: &SeedSample, k: u32) -> Result<Vec<AugmentedSample>, ConfigError> {
        if seed.text.split_whitespace().next().is_none() {
            return Err(ConfigError::Invalid(format!("seed `{}` has no tokens", seed.id)));
        }
        let mut out = Vec::with_capacity(k as usize);
        for variant in 0..k {
            let mut rng = SeededRandom::new(derive_seed(self.config.rng_seed, &[&seed.id, &variant.to_string()]));
            let (op, text, label) = match (&seed.task, &seed.label) {
                (TaskType::NamedEntityRecognition, Some(LabelPayload::Iob { tokens, tags })) => {
                    let pairs: Vec<(String, IobTag)> = tokens.iter().cloned().zip(tags.iter().copied()).collect();
                    let (op, pairs) = self.apply(&pairs, &mut rng);
                    let (tokens, mut tags): (Vec<String>, Vec<IobTag>) = pairs.into_iter().unzip();
                    repair_iob(&mut tags);
                    (op, tokens.join(" "), Some(LabelPayload::Iob { tokens, tags }))
                }
                (TaskType::QuestionAnswering, _) => {
                    let (context, question) = seed.text.rsplit_once('\n').unwrap_or(("", seed.text.as_str()));
                    let words: Vec<String> =
                        if question.split_whitespace().next().is_some() { question } else { context }
                            .split_whitespace()
                            .map(String::from)
                            .collect();
                    let (op, words) = self.apply(&words, &mut rng);
                    let text = if context.is_empty() { words.join(" ") } else { format!("{context}\n{}", words.join(" ")) };
                    (op, text, seed.label.clone())
                }
                _ => {
                    let words: Vec<String> = seed.text.split_whitespace().map(String::from).collect();
                    let (op, words) = self.apply(&words, &mut rng);
                    (op, words.join(" "), seed.label.clone())
                }
            };
            let provenance = BTreeMap::from([
                ("operation".to_string(), op.as_str().to_string()),
                ("alpha".to_string(), self.config.alpha.to_string()),
                ("p_delete".to_string(), self.config.p_delete.to_string()),
                ("rng_seed".to_string(), self.config.rng_seed.to_string()),
            ]);
            out.push(AugmentedSample { seed_id: seed.id.clone(), text, method: "eda".into(), index: variant, label, provenance });
        }
        Ok(out)
    }
}

pub fn eda_augment(seed: &SeedSample, config: &EdaConfig, k: u32) -> Result<Vec<AugmentedSample>, BaselineError> {
    Ok(Eda::new(config.clone())?.augment(seed, k)?)
}

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("translation service unavailable: {0}")]
    Transient(String),
    #[error("translation rejected: {0}")]
    Fatal(String),
}

pub trait Translator: Send + Sync {
    fn name(&self) -> &str;
    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String, TranslateError>;
}

/// Pivot languages tried in order, one per variant.
pub const DEFAULT_PIVOTS: [&str; 5] = ["de", "fr", "zh", "es", "ja"];

type TranslateFn = dyn Fn(&str, &str, &str) -> Result<String, TranslateError> + Send + Sync;

/// Offline translator for tests and dry runs.
pub struct MockTranslator {
    behaviour: Box<TranslateFn>,
    calls: Mutex<Vec<(String, String)>>,
}

fn strip_pivot_tag<'a>(text: &'a str, lang: &str) -> Option<&'a str> {
    text.strip_prefix('[')?.strip_prefix(lang)?.strip_prefix("] ")
}

impl MockTranslator {
    pub fn from_fn(f: impl Fn(&str, &str, &str) -> Result<String, TranslateError> + Send + Sync + 'static) -> Self {
        MockTranslator { behaviour: Box::new(f), calls: Mutex::new(Vec::new()) }
    }

    /// Tags text with the target language and strips the tag on the way back, so a
    /// round trip returns the input exactly.
    pub fn reversible() -> Self {
        MockTranslator::from_fn(|text, source, target| {
            Ok(match strip_pivot_tag(text, source) {
                Some(inner) => inner.to_string(),
                None => format!("[{target}] {text}"),
            })
        })
    }

    /// Like [`MockTranslator::reversible`] but the return leg rotates the words by an
    /// amount that depends on the pivot, so different pivots yield different variants.
    pub fn lossy() -> Self {
        MockTranslator::from_fn(|text, source, target| match strip_pivot_tag(text, source) {
            Some(inner) => {
                let mut words: Vec<&str> = inner.split_whitespace().collect();
                if !words.is_empty() {
                    let shift = (derive_seed(0, &[source]) as usize) % words.len();
                    let len = words.len();
                    words.rotate_left(shift.max(1) % len);
                }
                Ok(words.join(" "))
            }
            None => Ok(format!("[{target}] {text}")),
        })
    }

    /// (source, target) pairs seen so far.
    pub fn calls(&self) -> Vec<(String, String)> {
        self.calls.lock().unwrap().clone()
    }
}

impl Translator for MockTranslator {
    fn name(&self) -> &str {
        "mock"
    }

    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String, TranslateError> {
        self.calls.lock().unwrap().push((source.to_string(), target.to_string()));
        (self.behaviour)(text, source, target)
    }
}

/// LibreTranslate-compatible `POST {base_url}/translate` endpoint.
pub struct HttpTranslator {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct TranslateBody<'a> {
    q: &'a str,
    source: &'a str,
    target: &'a str,
    format: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    api_key: Option<&'a str>,
}

#[derive(Deserialize)]
struct TranslateReply {
    #[serde(rename = "translatedText")]
    translated_text: String,
}

impl HttpTranslator {
    /// The key, if any, is read from the environment variable `api_key_env`.
    pub fn new(base_url: &str, api_key_env: Option<&str>, timeout: Duration) -> Result<Self, ConfigError> {
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ConfigError::Invalid(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ConfigError::Invalid(format!("http client: {e}")))?;
        Ok(HttpTranslator { base_url: base_url.trim_end_matches('/').to_string(), api_key, retry: RetryPolicy::default(), client })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn once(&self, text: &str, source: &str, target: &str) -> Result<String, TranslateError> {
        let body = TranslateBody { q: text, source, target, format: "text", api_key: self.api_key.as_deref() };
        let response = self
            .client
            .post(format!("{}/translate", self.base_url))
            .json(&body)
            .send()
            .map_err(|e| TranslateError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| TranslateError::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str::<TranslateReply>(&text)
                .map(|r| r.translated_text)
                .map_err(|e| TranslateError::Transient(format!("unreadable reply: {e}"))),
            408 | 429 | 500.. => Err(TranslateError::Transient(format!("status {status}"))),
            _ => Err(TranslateError::Fatal(format!("status {status}: {}", text.chars().take(200).collect::<String>()))),
        }
    }
}

impl Translator for HttpTranslator {
    fn name(&self) -> &str {
        "http"
    }

    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String, TranslateError> {
        let mut last = None;
        for attempt in 0..self.retry.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.once(text, source, target) {
                Ok(t) => return Ok(t),
                Err(e @ TranslateError::Fatal(_)) => return Err(e),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt ran"))
    }
}

/// Variant `i` is `source -> pivots[i] -> source`.
///
/// QA seeds have only their question line translated.
pub fn backtranslate(
    seed: &SeedSample,
    pivots: &[String],
    translator: &dyn Translator,
    k: u32,
    source_lang: &str,
) -> Result<SeedAugmentation, BaselineError> {
    if k as usize > pivots.len() {
        return Err(ConfigError::Invalid(format!("k = {k} exceeds the {} pivot languages", pivots.len())).into());
    }
    let (context, text) = match seed.task {
        TaskType::QuestionAnswering => match seed.text.rsplit_once('\n') {
            Some((c, q)) => (Some(c), q),
            None => (None, seed.text.as_str()),
        },
        _ => (None, seed.text.as_str()),
    };
    let mut out = SeedAugmentation::default();
    for (i, pivot) in pivots.iter().take(k as usize).enumerate() {
        let round_trip = translator
            .translate(text, source_lang, pivot)
            .and_then(|mid| translator.translate(&mid, pivot, source_lang));
        match round_trip {
            Ok(back) => {
                let back = back.trim().to_string();
                let text = match context {
                    Some(c) => format!("{c}\n{back}"),
                    None => back,
                };
                let label = match seed.task {
                    TaskType::NamedEntityRecognition => None,
                    _ => seed.label.clone(),
                };
                let provenance = BTreeMap::from([
                    ("pivot".to_string(), pivot.clone()),
                    ("source_language".to_string(), source_lang.to_string()),
                    ("translator".to_string(), translator.name().to_string()),
                ]);
                out.samples.push(AugmentedSample {
                    seed_id: seed.id.clone(),
                    text,
                    method: "backtrans".into(),
                    index: i as u32,
                    label,
                    provenance,
                });
            }
            Err(e) => out.failures.push(VariantFailure { seed_id: seed.id.clone(), index: i as u32, reason: e.to_string() }),
        }
    }
    if out.samples.is_empty() && k > 0 {
        return Err(BaselineError::AllVariantsFailed { seed_id: seed.id.clone(), failures: out.failures });
    }
    Ok(out)
}

const PARAPHRASE_TEMPLATE: &str = "You are an expert in text data augmentation. Rephrase the following <text_type> into <k> semantically similar but linguistically different variants.
Each variant must keep the meaning of the original <text_type>.<label line>
Original <text_type>: <original text>
Return exactly <k> rephrased variants as a numbered list (1., 2., ...), one per line, without explanations.";

pub fn build_paraphrase_prompt(seed: &SeedSample, config: &RunConfig) -> String {
    let k = config.k_per_seed.to_string();
    let label_line = match seed.class_name() {
        Some(label) if seed.task.is_labeled() => {
            format!("\nEach variant must keep the same '{}' as the original, which is '{label}'.", config.label_type)
        }
        _ => String::new(),
    };
    render(
        PARAPHRASE_TEMPLATE,
        &[("text_type", &config.text_type), ("k", &k), ("label line", &label_line), ("original text", &seed.text)],
    )
}

/// Items of a numbered list; with `k == 1` an unnumbered reply is taken whole.
pub fn parse_numbered_list(raw: &str, k: usize) -> Result<Vec<String>, ParseFailure> {
    let item = Regex::new(r"^\s*(?:[-*]\s+)?[*_]*\(?(\d{1,3})[.):][*_]*\s+(.*\S)\s*$").expect("valid regex");
    let mut items: Vec<String> = raw
        .lines()
        .filter_map(|l| item.captures(l))
        .map(|c| clean_body(&c[2]))
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() && k == 1 {
        let whole = clean_body(raw.trim());
        if !whole.is_empty() {
            items.push(whole.lines().map(str::trim).collect::<Vec<_>>().join(" "));
        }
    }
    if items.len() < k {
        return Err(ParseFailure::TooFewItems { expected: k, found: items.len() });
    }
    items.truncate(k);
    Ok(items)
}

fn request(config: &RunConfig, prompt: String) -> CompletionRequest {
    CompletionRequest::new(&config.provider, &config.model, prompt)
        .with_temperature(config.temperature)
        .with_max_tokens(config.max_tokens)
}

/// One prompt asking for `k_per_seed` rephrasings, retried until the list parses.
pub fn paraphrase_augment(seed: &SeedSample, config: &RunConfig, gateway: &Gateway) -> Result<SeedAugmentation, BaselineError> {
    config.validate(seed.task)?;
    let prompt = build_paraphrase_prompt(seed, config);
    let mut out = SeedAugmentation::default();
    let mut last = ParseFailure::Malformed("no attempts made".into());
    for attempt in 0..config.max_attempts {
        let user = format!("{prompt}\n\n[request id: p-a{attempt}-r{}]", config.run_index);
        let response = gateway.complete(&request(config, user.clone()), attempt)?;
        out.llm_calls += 1;
        match parse_numbered_list(&response.text, config.k_per_seed as usize) {
            Ok(items) => {
                let label = match seed.task {
                    TaskType::NamedEntityRecognition => None,
                    _ => seed.label.clone(),
                };
                for (i, text) in items.into_iter().enumerate() {
                    let provenance = BTreeMap::from([
                        ("provider".to_string(), config.provider.clone()),
                        ("model".to_string(), config.model.clone()),
                        ("prompt_sha256".to_string(), prompt_hash(&user)),
                        ("attempt".to_string(), attempt.to_string()),
                        ("run".to_string(), config.run_index.to_string()),
                    ]);
                    out.samples.push(AugmentedSample {
                        seed_id: seed.id.clone(),
                        text,
                        method: "paraphrase".into(),
                        index: i as u32,
                        label: label.clone(),
                        provenance,
                    });
                }
                return Ok(out);
            }
            Err(e) => last = e,
        }
    }
    Err(BaselineError::Parse { method: "paraphrase", attempts: config.max_attempts, last })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FewShotConfig {
    pub k_examples: usize,
    pub n_outputs: u32,
    pub rng_seed: u64,
}

pub const FEWSHOT_TEMPLATE: &str = "Each item below is a <text_type> from a dataset, followed by its '<label_type>'.
The possible labels are: <label list>.
<examples>
Write one new <text_type> that blends the content and style of the items above, choose the most fitting label from the possible labels, and return it in exactly this format:
Text: <new text> | Label: <label>";

/// Example draws for each output, deterministic in `rng_seed`.
pub fn fewshot_example_indices(n_seeds: usize, config: &FewShotConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    (0..config.n_outputs).map(|_| sample(&mut rng, n_seeds, config.k_examples).into_vec()).collect()
}

pub fn build_fewshot_prompt(examples: &[&SeedSample], labels: &[String], config: &RunConfig) -> String {
    let lines: Vec<String> = examples
        .iter()
        .map(|s| format!("Text: {} | Label: {}", s.text.replace('\n', " "), s.class_name().unwrap_or("")))
        .collect();
    render(
        FEWSHOT_TEMPLATE,
        &[
            ("text_type", &config.text_type),
            ("label_type", &config.label_type),
            ("label list", &labels.join(", ")),
            ("examples", &lines.join("\n")),
        ],
    )
}

fn normalize_label(s: &str) -> String {
    s.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_lowercase()
}

/// Finds a `Text: T | Label: L` line and resolves `L` against `labels`.
pub fn parse_fewshot_response(raw: &str, labels: &[String]) -> Result<(String, String), ParseFailure> {
    let mut unknown = None;
    for line in raw.lines() {
        let lower = line.to_lowercase();
        let Some(at) = lower.rfind("label:") else { continue };
        let text_part = line[..at].trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '|' | '*' | '_')).trim();
        let text_part = clean_body(text_part);
        let text = match text_part.get(..5) {
            Some(p) if p.eq_ignore_ascii_case("text:") => clean_body(&text_part[5..]),
            _ => text_part.clone(),
        };
        let label = normalize_label(&clean_body(&line[at + 6..]));
        if text.is_empty() || text.starts_with('<') {
            continue;
        }
        match labels.iter().find(|l| normalize_label(l) == label) {
            Some(l) => return Ok((text, l.clone())),
            None => unknown = Some(label),
        }
    }
    Err(match unknown {
        Some(label) => ParseFailure::UnknownLabel(label),
        None => ParseFailure::MissingSection("Label".into()),
    })
}

/// GPT3Mix-style generation: each output embeds `k_examples` randomly drawn labeled seeds
/// and takes its label from the model's answer.
pub fn fewshot_mix_augment(
    seeds: &[SeedSample],
    fewshot: &FewShotConfig,
    config: &RunConfig,
    gateway: &Gateway,
) -> Result<SeedAugmentation, BaselineError> {
    if fewshot.k_examples == 0 {
        return Err(ConfigError::Invalid("k_examples must be at least 1".into()).into());
    }
    if seeds.len() < fewshot.k_examples {
        return Err(ConfigError::Invalid(format!("{} seeds cannot supply {} examples", seeds.len(), fewshot.k_examples)).into());
    }
    if let Some(bad) = seeds.iter().find(|s| s.task != TaskType::Classification || s.class_name().is_none()) {
        return Err(ConfigError::Invalid(format!("few-shot mixing needs labeled classification seeds; `{}` is not", bad.id)).into());
    }
    config.validate(TaskType::Classification)?;
    let labels = label_set(seeds);
    let mut out = SeedAugmentation::default();
    for (i, draw) in fewshot_example_indices(seeds.len(), fewshot).into_iter().enumerate() {
        let examples: Vec<&SeedSample> = draw.iter().map(|&j| &seeds[j]).collect();
        let ids: Vec<&str> = examples.iter().map(|s| s.id.as_str()).collect();
        let prompt = build_fewshot_prompt(&examples, &labels, config);
        let mut last = String::from("no attempts made");
        let mut produced = None;
        for attempt in 0..config.max_attempts {
            let user = format!("{prompt}\n\n[request id: m{i}-a{attempt}-r{}]", config.run_index);
            let response = match gateway.complete(&request(config, user.clone()), attempt) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    break;
                }
            };
            out.llm_calls += 1;
            match parse_fewshot_response(&response.text, &labels) {
                Ok(pair) => {
                    produced = Some((pair, attempt, prompt_hash(&user)));
                    break;
                }
                Err(e) => last = e.to_string(),
            }
        }
        let seed_id = ids.join("+");
        match produced {
            Some(((text, label), attempt, hash)) => {
                let provenance = BTreeMap::from([
                    ("examples".to_string(), ids.join(",")),
                    ("provider".to_string(), config.provider.clone()),
                    ("model".to_string(), config.model.clone()),
                    ("prompt_sha256".to_string(), hash),
                    ("attempt".to_string(), attempt.to_string()),
                    ("run".to_string(), config.run_index.to_string()),
                    ("rng_seed".to_string(), fewshot.rng_seed.to_string()),
                ]);
                out.samples.push(AugmentedSample {
                    seed_id,
                    text,
                    method: "fewshot_mix".into(),
                    index: i as u32,
                    label: Some(LabelPayload::Class(label)),
                    provenance,
                });
            }
            None => out.failures.push(VariantFailure { seed_id, index: i as u32, reason: last }),
        }
    }
    if out.samples.is_empty() && fewshot.n_outputs > 0 {
        return Err(BaselineError::AllVariantsFailed { seed_id: "fewshot_mix".into(), failures: out.failures });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{Matcher, MockProvider, MockRule, Reply};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn gateway(reply: Reply) -> (Gateway, Arc<MockProvider>) {
        let mock = Arc::new(MockProvider::new(vec![MockRule::new(Matcher::Any, reply)]).unwrap());
        (Gateway::new().with_provider(mock.clone()).with_retry(RetryPolicy::immediate(1)), mock)
    }

    #[test]
    fn deletion_with_zero_probability_is_identity() {
        let toks = words("the movie was really good");
        let mut rng = SeededRandom::new(3);
        assert_eq!(random_deletion(&toks, 0.0, &mut rng), toks);
    }

    #[test]
    fn scripted_swap() {
        let mut rng = ScriptedRandom::new([0, 2], []);
        assert_eq!(random_swap(&words("a b c"), 1, &mut rng), words("c b a"));
    }

    #[test]
    fn replacement_changes_exactly_n_tokens() {
        let toks = words("good movie and a big idea with many funny people");
        assert_eq!(toks.len(), 10);
        let n = eda_change_count(0.1, toks.len());
        assert_eq!(n, 1);
        let out = synonym_replacement(&toks, n, &SynonymLexicon::bundled(), &mut SeededRandom::new(9));
        assert_eq!(toks.iter().zip(&out).filter(|(a, b)| a != b).count(), 1);
    }

    #[test]
    fn deletion_keeps_one_token() {
        let mut rng = ScriptedRandom::new([1], [0.0, 0.0, 0.0]);
        assert_eq!(random_deletion(&words("a b c"), 1.0, &mut rng), words("b"));
    }

    #[test]
    fn lexicon_parsing_and_lookup() {
        let lex = SynonymLexicon::parse("# comment\nGood\tfine, nice,good\nbroken line\n\nempty\t\n");
        assert_eq!(lex.len(), 1);
        assert_eq!(lex.synonyms("GOOD,"), ["fine", "nice"]);
        assert!(lex.synonyms("empty").is_empty());
        assert!(SynonymLexicon::bundled().len() > 20);
    }

    #[test]
    fn no_synonyms_falls_back_to_swap_or_delete() {
        let eda = Eda::with_lexicon(EdaConfig::default(), SynonymLexicon::default()).unwrap();
        for seed in 0..50 {
            let (op, _) = eda.apply(&words("zz yy xx ww"), &mut SeededRandom::new(seed));
            assert!(matches!(op, EdaOperation::RandomSwap | EdaOperation::RandomDeletion));
        }
    }

    #[test]
    fn config_bounds() {
        assert!(EdaConfig { alpha: 1.5, ..EdaConfig::default() }.validate().is_err());
        assert!(EdaConfig { p_delete: -0.1, ..EdaConfig::default() }.validate().is_err());
    }

    #[test]
    fn eda_is_deterministic_and_copies_label() {
        let seed = SeedSample::classification("s", "what a good idea and a great ride", "positive");
        let cfg = EdaConfig { rng_seed: 17, ..EdaConfig::default() };
        let a = eda_augment(&seed, &cfg, 3).unwrap();
        assert_eq!(a, eda_augment(&seed, &cfg, 3).unwrap());
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|s| s.label == seed.label && s.method == "eda"));
    }

    #[test]
    fn eda_ner_keeps_tags_aligned() {
        let tokens = words("EU rejects German call to boycott British lamb");
        let tags = vec![
            IobTag::BOrg, IobTag::O, IobTag::BMisc, IobTag::O, IobTag::O, IobTag::O, IobTag::BMisc, IobTag::O,
        ];
        let seed = SeedSample::ner("n", tokens, tags);
        for v in eda_augment(&seed, &EdaConfig { alpha: 0.3, p_delete: 0.3, ..EdaConfig::default() }, 5).unwrap() {
            let Some(LabelPayload::Iob { tokens, tags }) = &v.label else { panic!() };
            assert_eq!(tokens.len(), tags.len());
            assert_eq!(v.text, tokens.join(" "));
        }
    }

    #[test]
    fn eda_qa_rewrites_question_only() {
        let seed = SeedSample::question_answering("q", "Paris is a big city in France.", "Which big city is in France?", "Paris");
        for v in eda_augment(&seed, &EdaConfig::default(), 4).unwrap() {
            assert!(v.text.starts_with("Paris is a big city in France.\n"));
        }
    }

    #[test]
    fn iob_repair() {
        let mut tags = vec![IobTag::O, IobTag::IPer, IobTag::BLoc, IobTag::IOrg, IobTag::IOrg];
        repair_iob(&mut tags);
        assert_eq!(tags, vec![IobTag::O, IobTag::BPer, IobTag::BLoc, IobTag::BOrg, IobTag::IOrg]);
    }

    proptest! {
        #[test]
        fn swap_preserves_multiset(ws in proptest::collection::vec("[a-e]{1,3}", 1..12), seed in any::<u64>(), n in 1usize..5) {
            let mut out = random_swap(&ws, n, &mut SeededRandom::new(seed));
            let mut sorted = ws.clone();
            sorted.sort();
            out.sort();
            prop_assert_eq!(out, sorted);
        }

        #[test]
        fn insertion_adds_n(ws in proptest::collection::vec("(good|bad|movie|zz)", 1..12), seed in any::<u64>(), alpha in 0.0f64..1.0) {
            prop_assume!(ws.iter().any(|w| w != "zz"));
            let n = eda_change_count(alpha, ws.len());
            let out = random_insertion(&ws, n, &SynonymLexicon::bundled(), &mut SeededRandom::new(seed));
            prop_assert_eq!(out.len(), ws.len() + n);
        }

        #[test]
        fn deletion_never_empties(ws in proptest::collection::vec("[a-z]{1,4}", 1..12), seed in any::<u64>(), p in 0.0f64..=1.0) {
            prop_assert!(!random_deletion(&ws, p, &mut SeededRandom::new(seed)).is_empty());
        }
    }

    #[test]
    fn backtranslation_reversible_round_trip() {
        let seed = SeedSample::classification("s", "the film was great", "positive");
        let pivots: Vec<String> = ["de", "fr", "zh"].map(String::from).to_vec();
        let tr = MockTranslator::reversible();
        let out = backtranslate(&seed, &pivots, &tr, 3, "en").unwrap();
        assert_eq!(out.samples.len(), 3);
        assert!(out.samples.iter().all(|s| s.text == seed.text));
        let used: Vec<&str> = out.samples.iter().map(|s| s.provenance["pivot"].as_str()).collect();
        assert_eq!(used, ["de", "fr", "zh"]);
        assert_eq!(tr.calls().len(), 6);
        assert!(backtranslate(&seed, &pivots, &tr, 4, "en").is_err());
    }

    #[test]
    fn backtranslation_partial_failure() {
        let seed = SeedSample::classification("s", "the film was great", "positive");
        let tr = MockTranslator::from_fn(|text, _, target| {
            if target == "fr" {
                Err(TranslateError::Transient("down".into()))
            } else {
                Ok(text.to_string())
            }
        });
        let pivots: Vec<String> = ["de", "fr"].map(String::from).to_vec();
        let out = backtranslate(&seed, &pivots, &tr, 2, "en").unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.failures[0].index, 1);
    }

    #[test]
    fn lossy_mock_differs_by_pivot() {
        let seed = SeedSample::classification("s", "one two three four five six seven", "x");
        let pivots: Vec<String> = DEFAULT_PIVOTS.map(String::from).to_vec();
        let out = backtranslate(&seed, &pivots, &MockTranslator::lossy(), 5, "en").unwrap();
        assert!(out.samples.iter().all(|s| s.text != seed.text));
    }

    #[test]
    fn numbered_lists() {
        assert_eq!(parse_numbered_list("1. A\n2. B\n3. C", 3).unwrap(), ["A", "B", "C"]);
        assert_eq!(parse_numbered_list("Sure!\n1) **A**\n2) \"B\"\n3) [C]\nDone", 3).unwrap(), ["A", "B", "C"]);
        assert_eq!(
            parse_numbered_list("1. A\n2. B", 3),
            Err(ParseFailure::TooFewItems { expected: 3, found: 2 })
        );
        assert_eq!(parse_numbered_list("1. A", 1).unwrap(), ["A"]);
        assert_eq!(parse_numbered_list("Just one rephrasing", 1).unwrap(), ["Just one rephrasing"]);
        assert_eq!(parse_numbered_list("1. A\n2. B\n3. C\n4. D", 2).unwrap(), ["A", "B"]);
    }

    #[test]
    fn paraphrase_via_gateway() {
        let seed = SeedSample::classification("t", "How big is our galaxy in diameter?", "Numeric");
        let (gw, _) = gateway(Reply::text("1. A\n2. B\n3. C"));
        let out = paraphrase_augment(&seed, &RunConfig::default(), &gw).unwrap();
        let texts: Vec<&str> = out.samples.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["A", "B", "C"]);
        assert!(out.samples.iter().all(|s| s.label == seed.label));

        let (gw, mock) = gateway(Reply::text("1. A\n2. B"));
        assert!(matches!(
            paraphrase_augment(&seed, &RunConfig::default(), &gw),
            Err(BaselineError::Parse { attempts: 3, .. })
        ));
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn paraphrase_prompt_mentions_label_for_classification_only() {
        let cfg = RunConfig { label_type: "sentiment".into(), ..RunConfig::default() };
        let p = build_paraphrase_prompt(&SeedSample::classification("a", "fine film", "positive"), &cfg);
        assert!(p.contains("which is 'positive'"));
        assert!(p.contains("Return exactly 3 rephrased"));
        let q = SeedSample::question_answering("q", "ctx", "what?", "ans");
        assert!(!build_paraphrase_prompt(&q, &cfg).contains("which is"));
    }

    fn two_seeds() -> Vec<SeedSample> {
        vec![
            SeedSample::classification("a", "what a lovely film", "positive"),
            SeedSample::classification("b", "a dull and tedious mess", "negative"),
        ]
    }

    #[test]
    fn fewshot_embeds_both_seeds() {
        let seeds = two_seeds();
        let draws = fewshot_example_indices(2, &FewShotConfig { k_examples: 2, n_outputs: 4, rng_seed: 5 });
        for d in draws {
            let mut d = d.clone();
            d.sort();
            assert_eq!(d, [0, 1]);
        }
        let (gw, mock) = gateway(Reply::text("Text: T | Label: positive"));
        let out = fewshot_mix_augment(&seeds, &FewShotConfig { k_examples: 2, n_outputs: 1, rng_seed: 5 }, &RunConfig::default(), &gw).unwrap();
        assert_eq!(out.samples[0].text, "T");
        assert_eq!(out.samples[0].label, Some(LabelPayload::Class("positive".into())));
        let prompt = &mock.transcript()[0].0;
        assert!(prompt.contains("Text: what a lovely film | Label: positive"));
        assert!(prompt.contains("Text: a dull and tedious mess | Label: negative"));
    }

    #[test]
    fn fewshot_parsing() {
        let labels = vec!["negative".to_string(), "positive".to_string()];
        assert_eq!(parse_fewshot_response("Text: T | Label: Positive.", &labels).unwrap(), ("T".into(), "positive".into()));
        assert_eq!(
            parse_fewshot_response("Sure:\n**Text:** \"Nice\" | **Label:** negative", &labels).unwrap(),
            ("Nice".into(), "negative".into())
        );
        assert_eq!(
            parse_fewshot_response("Text: T | Label: neutralish", &labels),
            Err(ParseFailure::UnknownLabel("neutralish".into()))
        );
        assert!(matches!(parse_fewshot_response("no label", &labels), Err(ParseFailure::MissingSection(_))));
    }

    #[test]
    fn fewshot_preconditions() {
        let (gw, _) = gateway(Reply::text("Text: T | Label: positive"));
        let cfg = FewShotConfig { k_examples: 3, n_outputs: 1, rng_seed: 0 };
        assert!(matches!(fewshot_mix_augment(&two_seeds(), &cfg, &RunConfig::default(), &gw), Err(BaselineError::Config(_))));
    }

    #[test]
    fn fewshot_unknown_label_fails_output() {
        let (gw, _) = gateway(Reply::text("Text: T | Label: neutralish"));
        let cfg = FewShotConfig { k_examples: 2, n_outputs: 2, rng_seed: 0 };
        assert!(matches!(
            fewshot_mix_augment(&two_seeds(), &cfg, &RunConfig::default(), &gw),
            Err(BaselineError::AllVariantsFailed { .. })
        ));
    }

    #[test]
    fn fewshot_with_synthetic_mock() {
        let (gw, _) = gateway(Reply::Synthetic);
        let cfg = FewShotConfig { k_examples: 2, n_outputs: 3, rng_seed: 1 };
        let out = fewshot_mix_augment(&two_seeds(), &cfg, &RunConfig::default(), &gw).unwrap();
        assert_eq!(out.samples.len(), 3);
    }
}
