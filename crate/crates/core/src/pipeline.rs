//! The `subsample`, `augment`, `evaluate`, `audit` and `compare` commands.
//!
//! Every command reads and writes plain files under an output directory. Outputs that
//! are meant to be reproducible carry no timestamps; timings live in separate files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    backtranslate, fewshot_mix_augment, paraphrase_augment, BaselineError, Eda, EdaConfig, FewShotConfig, HttpTranslator,
    MockTranslator, Translator, DEFAULT_PIVOTS,
};
use crate::dataset_io::{
    filter_max_tokens, read_augmented, read_dataset, subsample, write_augmented, write_dataset, DatasetError, DatasetFile,
    DatasetFormat,
};
use crate::error::ConfigError;
use crate::label_tools::{generate_iob_labels, label_consistency_ratio, IobExample, IobScheme, LabelError, LabelerConfig};
use crate::llm_gateway::{Gateway, HttpChatProvider, HttpProviderConfig, MockProvider, ResponseCache};
use crate::metrics::{
    aggregate_runs, distinct_n, distinct_n_global, distinct_n_per_seed, semantic_variability,
    semantic_variability_pairwise, unique_ngram_count, wilcoxon_signed_rank, CharNgramEmbedder, HttpEmbedder,
    MetricError, MetricReport, SimilarityScorer, WilcoxonResult,
};
use crate::response::PARSE_TABLE_VERSION;
use crate::ttr_engine::{PromptTemplates, SeedAugmentation, TtrEngine, VariantFailure};
use crate::types::{label_set, validate_dataset, AugmentedSample, LabelPayload, RunConfig, SeedSample, TaskType};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{metric}: {source}")]
    Metric { metric: String, source: MetricError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid dataset:\n{0}")]
    InvalidDataset(String),
    #[error("every seed failed ({failures} failures); see {log}")]
    AllSeedsFailed { failures: usize, log: PathBuf },
    #[error("{0}")]
    Precondition(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, body: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(io_err(path))
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("manifest serializes");
    s.push('\n');
    s
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("record serializes"));
        s.push('\n');
    }
    s
}

fn read_seeds(path: &Path, task: TaskType) -> Result<Vec<SeedSample>, PipelineError> {
    let seeds = read_dataset(&DatasetFile::infer(path, task)?)?;
    let report = validate_dataset(&seeds);
    if !report.is_valid() {
        return Err(PipelineError::InvalidDataset(report.to_string()));
    }
    Ok(seeds)
}

fn require_file(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Precondition(format!("{what} {} does not exist", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleConfig {
    pub dataset: PathBuf,
    pub task: TaskType,
    /// Per class, for classification.
    pub per_class: usize,
    /// Overall, for QA and NER.
    pub total: usize,
    pub rng_seed: u64,
    /// Texts longer than this many whitespace tokens are dropped before drawing.
    pub max_tokens: Option<usize>,
    pub out: PathBuf,
}

impl SubsampleConfig {
    pub fn new(dataset: impl Into<PathBuf>, task: TaskType, out: impl Into<PathBuf>) -> Self {
        SubsampleConfig { dataset: dataset.into(), task, per_class: 10, total: 50, rng_seed: 0, max_tokens: None, out: out.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleManifest {
    pub dataset: String,
    pub dataset_sha256: String,
    pub task: TaskType,
    pub rng_seed: u64,
    pub per_class: Option<usize>,
    pub total: Option<usize>,
    pub max_tokens: Option<usize>,
    pub input_count: usize,
    pub eligible_count: usize,
    pub output_count: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub output: String,
    pub output_sha256: String,
}

pub struct SubsampleOutcome {
    pub output: PathBuf,
    pub manifest: PathBuf,
    pub count: usize,
}

/// Writes `subsample.<ext>` (same format as the input) and `subsample.manifest.json`.
pub fn cmd_subsample(config: &SubsampleConfig) -> Result<SubsampleOutcome, PipelineError> {
    require_file(&config.dataset, "dataset")?;
    let input = DatasetFile::infer(&config.dataset, config.task)?;
    let all = read_seeds(&config.dataset, config.task)?;
    let input_count = all.len();
    let eligible = match config.max_tokens {
        Some(m) => filter_max_tokens(all, m),
        None => all,
    };
    let picked = subsample(&eligible, config.task, config.per_class, config.total, config.rng_seed)?;
    let ext = config.dataset.extension().and_then(|e| e.to_str()).unwrap_or("jsonl");
    let output = config.out.join(format!("subsample.{ext}"));
    fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
    write_dataset(&picked, &DatasetFile::new(&output, input.format, config.task)?)?;

    let mut class_counts = BTreeMap::new();
    for s in &picked {
        if let Some(c) = s.class_name() {
            *class_counts.entry(c.to_string()).or_insert(0) += 1;
        }
    }
    let classification = config.task == TaskType::Classification;
    let manifest = SubsampleManifest {
        dataset: config.dataset.display().to_string(),
        dataset_sha256: sha256_file(&config.dataset)?,
        task: config.task,
        rng_seed: config.rng_seed,
        per_class: classification.then_some(config.per_class),
        total: (!classification).then_some(config.total),
        max_tokens: config.max_tokens,
        input_count,
        eligible_count: eligible.len(),
        output_count: picked.len(),
        class_counts,
        output: output.display().to_string(),
        output_sha256: sha256_file(&output)?,
    };
    let manifest_path = config.out.join("subsample.manifest.json");
    write_file(&manifest_path, &to_json_pretty(&manifest))?;
    Ok(SubsampleOutcome { output, manifest: manifest_path, count: picked.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ttr,
    Eda,
    Backtrans,
    Paraphrase,
    FewshotMix,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ttr => "ttr",
            Method::Eda => "eda",
            Method::Backtrans => "backtrans",
            Method::Paraphrase => "paraphrase",
            Method::FewshotMix => "fewshot_mix",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ttr" => Ok(Method::Ttr),
            "eda" => Ok(Method::Eda),
            "backtrans" | "backtranslation" | "back_translation" => Ok(Method::Backtrans),
            "paraphrase" | "auggpt" => Ok(Method::Paraphrase),
            "fewshot_mix" | "fewshot" | "gpt3mix" => Ok(Method::FewshotMix),
            other => Err(ConfigError::Invalid(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranslatorSpec {
    /// Offline translator whose round trip rotates words by a pivot-dependent amount.
    Mock,
    Http { base_url: String, api_key_env: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub dataset: PathBuf,
    pub method: Method,
    pub task: TaskType,
    pub run: RunConfig,
    /// Base URL for providers without a preset.
    pub provider_url: Option<String>,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
    pub workers: usize,
    pub runs: u32,
    /// Re-draw the seed subsample for each run with seed `rng_seed + run`.
    pub resample_per_run: bool,
    pub per_class: usize,
    pub total: usize,
    pub eda: EdaConfig,
    pub pivots: Vec<String>,
    pub source_language: String,
    pub translator: TranslatorSpec,
    pub fewshot_examples: usize,
    /// Outputs per run for few-shot mixing; defaults to `k * seeds`.
    pub fewshot_outputs: Option<u32>,
    /// Scheme generated NER label sequences must satisfy.
    pub iob_scheme: IobScheme,
    pub templates_dir: Option<PathBuf>,
}

impl AugmentConfig {
    pub fn new(dataset: impl Into<PathBuf>, method: Method, task: TaskType, out: impl Into<PathBuf>) -> Self {
        AugmentConfig {
            dataset: dataset.into(),
            method,
            task,
            run: RunConfig::default(),
            provider_url: None,
            out: out.into(),
            cache: None,
            workers: 4,
            runs: 1,
            resample_per_run: false,
            per_class: 10,
            total: 50,
            eda: EdaConfig::default(),
            pivots: DEFAULT_PIVOTS.map(String::from).to_vec(),
            source_language: "en".into(),
            translator: TranslatorSpec::Mock,
            fewshot_examples: 4,
            fewshot_outputs: None,
            iob_scheme: IobScheme::Lenient,
            templates_dir: None,
        }
    }

    /// Settings that determine the generated data, as sorted key/value pairs.
    pub fn fingerprint(&self) -> BTreeMap<String, String> {
        let r = &self.run;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("method", self.method.to_string());
        put("task", self.task.to_string());
        put("k", r.k_per_seed.to_string());
        put("mode", r.mode.to_string());
        put("seed", r.rng_seed.to_string());
        put("provider", r.provider.clone());
        put("model", r.model.clone());
        put("text_type", r.text_type.clone());
        put("label_type", r.label_type.clone());
        put("max_attempts", r.max_attempts.to_string());
        put("temperature", r.temperature.to_string());
        put("max_tokens", r.max_tokens.to_string());
        put("runs", self.runs.to_string());
        put("resample_per_run", self.resample_per_run.to_string());
        if self.resample_per_run {
            put("per_class", self.per_class.to_string());
            put("total", self.total.to_string());
        }
        match self.method {
            Method::Eda => {
                put("eda_alpha", self.eda.alpha.to_string());
                put("eda_p_delete", self.eda.p_delete.to_string());
                put(
                    "eda_lexicon",
                    self.eda.synonym_lexicon.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "bundled".into()),
                );
            }
            Method::Backtrans => {
                put("pivots", self.pivots.join(","));
                put("source_language", self.source_language.clone());
                put(
                    "translator",
                    match &self.translator {
                        TranslatorSpec::Mock => "mock".into(),
                        TranslatorSpec::Http { base_url, .. } => base_url.clone(),
                    },
                );
            }
            Method::FewshotMix => {
                put("fewshot_examples", self.fewshot_examples.to_string());
                put("fewshot_outputs", self.fewshot_outputs.map(|n| n.to_string()).unwrap_or_else(|| "k*seeds".into()));
            }
            _ => {}
        }
        if self.task == TaskType::NamedEntityRecognition {
            put("iob_scheme", format!("{:?}", self.iob_scheme).to_lowercase());
        }
        m
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.fingerprint()).expect("fingerprint serializes"))
    }
}

/// Gateway for `provider` with an optional persistent cache. `mock` is the offline
/// synthetic provider; `openai` and `deepseek` are presets; any other name needs `base_url`.
pub fn build_gateway(
    provider: &str,
    base_url: Option<&str>,
    cache: Option<&Path>,
    workers: usize,
) -> Result<Gateway, PipelineError> {
    let mut gateway = Gateway::new().with_max_in_flight(workers.max(1));
    gateway = match (provider, base_url) {
        ("mock", None) => gateway.with_provider(Arc::new(MockProvider::synthetic().named("mock"))),
        (name, Some(url)) => {
            gateway.with_provider(Arc::new(HttpChatProvider::new(HttpProviderConfig::custom(name, url))?))
        }
        (name, None) => {
            let preset = HttpProviderConfig::preset(name).ok_or_else(|| ConfigError::UnknownProvider(name.to_string()))?;
            gateway.with_provider(Arc::new(HttpChatProvider::new(preset)?))
        }
    };
    if let Some(path) = cache {
        gateway = gateway.with_cache(ResponseCache::open(path).map_err(io_err(path))?);
    }
    Ok(gateway)
}

fn build_translator(translator: &TranslatorSpec) -> Result<Box<dyn Translator>, PipelineError> {
    Ok(match translator {
        TranslatorSpec::Mock => Box::new(MockTranslator::lossy()),
        TranslatorSpec::Http { base_url, api_key_env } => {
            Box::new(HttpTranslator::new(base_url, api_key_env.as_deref(), Duration::from_secs(60))?)
        }
    })
}

/// A seed or variant that produced no output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub run: u32,
    pub seed_id: String,
    pub index: Option<u32>,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub run: u32,
    pub seed_id: String,
    pub variants: usize,
    pub llm_calls: u32,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: u32,
    pub seeds_file: String,
    pub seeds_sha256: String,
    pub seed_ids: Vec<String>,
    pub augmented_file: String,
    pub augmented_sha256: String,
    pub samples: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub path: Option<String>,
    pub entries: usize,
    pub live_calls: u64,
    pub cache_hits: u64,
    pub failed_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub dataset: String,
    pub dataset_sha256: String,
    pub template_version: String,
    pub parse_table_version: String,
    pub runs: Vec<RunManifest>,
    pub cache: CacheManifest,
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub manifest: AugmentManifest,
    pub samples: usize,
    pub failures: usize,
    pub out: PathBuf,
}

pub fn run_dir(out: &Path, run: u32) -> PathBuf {
    out.join(format!("run-{run}"))
}

/// Variants of one seed, or the failing stage and its failures.
type SeedResult = Result<SeedAugmentation, (String, Vec<VariantFailure>)>;

struct AugmentContext<'a> {
    config: &'a AugmentConfig,
    gateway: &'a Gateway,
    engine: TtrEngine,
    eda: Option<Eda>,
    translator: Option<Box<dyn Translator>>,
    labeler: LabelerConfig,
}

impl AugmentContext<'_> {
    fn seed_outcome(&self, seed: &SeedSample, run: &RunConfig) -> SeedResult {
        let result = match self.config.method {
            Method::Ttr => self.engine.augment(seed, run, self.gateway).map_err(|e| match e {
                crate::ttr_engine::TtrError::AllVariantsFailed { failures, .. } => ("augment".to_string(), failures),
                other => ("augment".to_string(), vec![whole_seed_failure(seed, other.to_string())]),
            }),
            Method::Eda => {
                let eda = self.eda.as_ref().expect("eda configured");
                let run_eda = eda.reseeded(run.rng_seed.wrapping_add(run.run_index as u64));
                run_eda
                    .augment(seed, run.k_per_seed)
                    .map(|samples| SeedAugmentation { samples, ..Default::default() })
                    .map_err(|e| ("augment".to_string(), vec![whole_seed_failure(seed, e.to_string())]))
            }
            Method::Backtrans => backtranslate(
                seed,
                &self.config.pivots,
                self.translator.as_deref().expect("translator configured"),
                run.k_per_seed,
                &self.config.source_language,
            )
            .map_err(|e| baseline_failures(seed, e)),
            Method::Paraphrase => paraphrase_augment(seed, run, self.gateway).map_err(|e| baseline_failures(seed, e)),
            Method::FewshotMix => unreachable!("few-shot mixing runs over the whole seed set"),
        };
        result
    }

    /// Attaches generated IOB labels to NER variants that lack them.
    fn relabel(&self, out: &mut SeedAugmentation, example: &IobExample) {
        let mut kept = Vec::with_capacity(out.samples.len());
        for mut s in std::mem::take(&mut out.samples) {
            if s.label.is_some() {
                kept.push(s);
                continue;
            }
            match generate_iob_labels(&s.text, example, self.config.iob_scheme, &self.labeler, self.gateway) {
                Ok((tokens, tags)) => {
                    s.label = Some(LabelPayload::Iob { tokens, tags });
                    kept.push(s);
                }
                Err(e) => out.failures.push(VariantFailure {
                    seed_id: s.seed_id.clone(),
                    index: s.index,
                    reason: format!("iob labels: {e}"),
                }),
            }
        }
        out.samples = kept;
    }
}

fn whole_seed_failure(seed: &SeedSample, reason: String) -> VariantFailure {
    VariantFailure { seed_id: seed.id.clone(), index: u32::MAX, reason }
}

fn baseline_failures(seed: &SeedSample, e: BaselineError) -> (String, Vec<VariantFailure>) {
    match e {
        BaselineError::AllVariantsFailed { failures, .. } => ("augment".into(), failures),
        other => ("augment".into(), vec![whole_seed_failure(seed, other.to_string())]),
    }
}

fn failure_record(run: u32, stage: &str, f: VariantFailure) -> FailureRecord {
    let stage = if f.reason.starts_with("iob labels: ") { "iob" } else { stage };
    FailureRecord {
        run,
        seed_id: f.seed_id,
        index: (f.index != u32::MAX).then_some(f.index),
        stage: stage.to_string(),
        reason: f.reason,
    }
}

/// Builds the gateway from the configuration and runs [`run_augment`].
pub fn cmd_augment(config: &AugmentConfig) -> Result<AugmentOutcome, PipelineError> {
    let gateway = build_gateway(&config.run.provider, config.provider_url.as_deref(), config.cache.as_deref(), config.workers)?;
    run_augment(config, &gateway)
}

/// Augments every seed of every run. Partial failures are logged; the call fails only
/// when no seed produced any variant.
pub fn run_augment(config: &AugmentConfig, gateway: &Gateway) -> Result<AugmentOutcome, PipelineError> {
    require_file(&config.dataset, "dataset")?;
    if config.runs < 1 {
        return Err(ConfigError::Invalid("runs must be at least 1".into()).into());
    }
    if config.workers < 1 {
        return Err(ConfigError::Invalid("workers must be at least 1".into()).into());
    }
    config.run.validate(config.task)?;
    if config.method == Method::FewshotMix && config.task != TaskType::Classification {
        return Err(ConfigError::Invalid("few-shot mixing needs a classification dataset".into()).into());
    }
    let all_seeds = read_seeds(&config.dataset, config.task)?;
    if all_seeds.is_empty() {
        return Err(PipelineError::Precondition(format!("{} has no samples", config.dataset.display())));
    }
    let templates = match &config.templates_dir {
        Some(dir) => PromptTemplates::with_overrides(dir).map_err(io_err(dir))?,
        None => PromptTemplates::bundled(),
    };
    let ctx = AugmentContext {
        config,
        gateway,
        engine: TtrEngine::new(templates.clone()),
        eda: match config.method {
            Method::Eda => Some(Eda::new(config.eda.clone())?),
            _ => None,
        },
        translator: match config.method {
            Method::Backtrans => Some(build_translator(&config.translator)?),
            _ => None,
        },
        labeler: LabelerConfig {
            provider: config.run.provider.clone(),
            model: config.run.model.clone(),
            max_attempts: config.run.max_attempts,
            ..LabelerConfig::default()
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("worker pool: {e}")))?;
    fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;

    let mut runs = Vec::new();
    let mut total_samples = 0;
    let mut total_failures = 0;
    let mut timings: Vec<SeedTiming> = Vec::new();
    let mut failures_log: Vec<FailureRecord> = Vec::new();
    for run_index in 0..config.runs {
        let seeds = if config.resample_per_run {
            subsample(&all_seeds, config.task, config.per_class, config.total, config.run.rng_seed.wrapping_add(run_index as u64))?
        } else {
            all_seeds.clone()
        };
        let run = RunConfig { run_index, ..config.run.clone() };
        let dir = run_dir(&config.out, run_index);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let example = match config.task {
            TaskType::NamedEntityRecognition => match &seeds[0].label {
                Some(LabelPayload::Iob { tokens, tags }) => Some(IobExample::new(tokens.clone(), tags.clone())?),
                _ => None,
            },
            _ => None,
        };

        let mut samples: Vec<AugmentedSample> = Vec::new();
        let mut failures: Vec<FailureRecord> = Vec::new();
        if config.method == Method::FewshotMix {
            let started = Instant::now();
            let fewshot = FewShotConfig {
                k_examples: config.fewshot_examples,
                n_outputs: config.fewshot_outputs.unwrap_or(run.k_per_seed * seeds.len() as u32),
                rng_seed: run.rng_seed.wrapping_add(run_index as u64),
            };
            match fewshot_mix_augment(&seeds, &fewshot, &run, gateway) {
                Ok(out) => {
                    timings.push(SeedTiming {
                        run: run_index,
                        seed_id: "*".into(),
                        variants: out.samples.len(),
                        llm_calls: out.llm_calls,
                        wall_ms: started.elapsed().as_secs_f64() * 1000.0,
                    });
                    samples = out.samples;
                    failures.extend(out.failures.into_iter().map(|f| failure_record(run_index, "augment", f)));
                }
                Err(BaselineError::AllVariantsFailed { failures: f, .. }) => {
                    failures.extend(f.into_iter().map(|f| failure_record(run_index, "augment", f)));
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            let results: Vec<(SeedResult, f64)> = pool.install(|| {
                seeds
                    .par_iter()
                    .map(|seed| {
                        let started = Instant::now();
                        let mut outcome = ctx.seed_outcome(seed, &run);
                        if let (Ok(out), Some(example)) = (&mut outcome, &example) {
                            ctx.relabel(out, example);
                        }
                        (outcome, started.elapsed().as_secs_f64() * 1000.0)
                    })
                    .collect()
            });
            for (seed, (result, wall_ms)) in seeds.iter().zip(results) {
                match result {
                    Ok(out) => {
                        timings.push(SeedTiming {
                            run: run_index,
                            seed_id: seed.id.clone(),
                            variants: out.samples.len(),
                            llm_calls: out.llm_calls,
                            wall_ms,
                        });
                        samples.extend(out.samples);
                        failures.extend(out.failures.into_iter().map(|f| failure_record(run_index, "augment", f)));
                    }
                    Err((stage, fs)) => {
                        timings.push(SeedTiming { run: run_index, seed_id: seed.id.clone(), variants: 0, llm_calls: 0, wall_ms });
                        failures.extend(fs.into_iter().map(|f| failure_record(run_index, &stage, f)));
                    }
                }
            }
        }

        for f in &failures {
            log::warn!("run {} seed {}: {}", f.run, f.seed_id, f.reason);
        }
        let seeds_file = dir.join("seeds.jsonl");
        write_dataset(&seeds, &DatasetFile::new(&seeds_file, DatasetFormat::JsonLines, config.task)?)?;
        let augmented_file = dir.join("augmented.jsonl");
        write_augmented(&samples, &augmented_file)?;
        write_file(&dir.join("failures.jsonl"), &to_jsonl(&failures))?;
        runs.push(RunManifest {
            run: run_index,
            seeds_file: seeds_file.display().to_string(),
            seeds_sha256: sha256_file(&seeds_file)?,
            seed_ids: seeds.iter().map(|s| s.id.clone()).collect(),
            augmented_file: augmented_file.display().to_string(),
            augmented_sha256: sha256_file(&augmented_file)?,
            samples: samples.len(),
            failures: failures.len(),
        });
        total_samples += samples.len();
        total_failures += failures.len();
        failures_log.extend(failures);
    }

    write_file(&config.out.join("timings.jsonl"), &to_jsonl(&timings))?;
    write_file(&config.out.join("timings.txt"), &timing_summary(&timings, config.method))?;
    let failures_path = config.out.join("failures.jsonl");
    write_file(&failures_path, &to_jsonl(&failures_log))?;

    let stats = gateway.stats();
    let manifest = AugmentManifest {
        config: config.fingerprint(),
        config_hash: config.config_hash(),
        dataset: config.dataset.display().to_string(),
        dataset_sha256: sha256_file(&config.dataset)?,
        template_version: if config.method == Method::Ttr { templates.version.clone() } else { config.method.to_string() },
        parse_table_version: PARSE_TABLE_VERSION.to_string(),
        runs,
        cache: CacheManifest {
            path: gateway.cache().and_then(|c| c.path()).map(|p| p.display().to_string()),
            entries: gateway.cache().map(|c| c.len()).unwrap_or(0),
            live_calls: stats.live_calls,
            cache_hits: stats.cache_hits,
            failed_calls: stats.failed_calls,
        },
    };
    write_file(&config.out.join("manifest.json"), &to_json_pretty(&manifest))?;

    if total_samples == 0 {
        return Err(PipelineError::AllSeedsFailed { failures: total_failures, log: failures_path });
    }
    Ok(AugmentOutcome { manifest, samples: total_samples, failures: total_failures, out: config.out.clone() })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Seconds per generated sample, mean and population std.
fn timing_summary(timings: &[SeedTiming], method: Method) -> String {
    let per_sample: Vec<f64> =
        timings.iter().filter(|t| t.variants > 0).map(|t| t.wall_ms / 1000.0 / t.variants as f64).collect();
    let (mean, std) = mean_std(&per_sample);
    format!(
        "method={method}\nseconds_per_sample.mean={mean:.4}\nseconds_per_sample.std={std:.4}\nseeds={}\nsamples={}\n",
        timings.len(),
        timings.iter().map(|t| t.variants).sum::<usize>()
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerSpec {
    ExactToken,
    /// Offline hashed character-trigram embeddings.
    CharNgram,
    Http { base_url: String, model: String, api_key_env: String },
}

impl ScorerSpec {
    pub fn build(&self) -> Result<SimilarityScorer, PipelineError> {
        Ok(match self {
            ScorerSpec::ExactToken => SimilarityScorer::ExactToken,
            ScorerSpec::CharNgram => SimilarityScorer::Embedding(Arc::new(CharNgramEmbedder::default())),
            ScorerSpec::Http { base_url, model, api_key_env } => SimilarityScorer::Embedding(Arc::new(
                HttpEmbedder::new(base_url, model, api_key_env)
                    .map_err(|source| PipelineError::Metric { metric: "scorer".into(), source })?,
            )),
        })
    }
}

impl FromStr for ScorerSpec {
    type Err = ConfigError;

    /// `exact`, `char-ngram`, or `http:<base_url>:<model>:<API_KEY_ENV>` split at the last two colons.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "exact" | "exact_token" | "exact-token" => Ok(ScorerSpec::ExactToken),
            "char-ngram" | "char_ngram" | "chargram" => Ok(ScorerSpec::CharNgram),
            other => {
                let rest = other
                    .strip_prefix("http:")
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown scorer `{other}`")))?;
                let mut parts = rest.rsplitn(3, ':');
                let (Some(key), Some(model), Some(url)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(ConfigError::Invalid("http scorer needs `http:<url>:<model>:<KEY_ENV>`".into()));
                };
                Ok(ScorerSpec::Http { base_url: url.to_string(), model: model.to_string(), api_key_env: key.to_string() })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateConfig {
    /// Output directory of `augment` (containing `run-*`), or a single augmented file.
    pub augmented: PathBuf,
    /// Seed file used when a run directory has no `seeds.jsonl`.
    pub dataset: Option<PathBuf>,
    pub task: TaskType,
    pub n: usize,
    pub scorer: ScorerSpec,
    pub out: PathBuf,
}

impl EvaluateConfig {
    pub fn new(augmented: impl Into<PathBuf>, task: TaskType, out: impl Into<PathBuf>) -> Self {
        EvaluateConfig { augmented: augmented.into(), dataset: None, task, n: 3, scorer: ScorerSpec::ExactToken, out: out.into() }
    }
}

/// Per-metric values of each run, in run order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub metric: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub report: MetricReport,
    pub per_run: BTreeMap<String, Vec<f64>>,
    /// Metrics left out, with the reason.
    pub skipped: BTreeMap<String, String>,
}

/// (seed file, augmented file) per run.
fn evaluation_inputs(config: &EvaluateConfig) -> Result<Vec<(PathBuf, PathBuf)>, PipelineError> {
    require_file(&config.augmented, "augmented output")?;
    let fallback = || -> Result<PathBuf, PipelineError> {
        config
            .dataset
            .clone()
            .ok_or_else(|| PipelineError::Precondition("no seeds.jsonl beside the augmented file and no --dataset".into()))
    };
    if config.augmented.is_file() {
        let beside = config.augmented.with_file_name("seeds.jsonl");
        let seeds = match &config.dataset {
            Some(d) => d.clone(),
            None if beside.exists() => beside,
            None => fallback()?,
        };
        return Ok(vec![(seeds, config.augmented.clone())]);
    }
    let mut runs: Vec<(u32, PathBuf)> = fs::read_dir(&config.augmented)
        .map_err(io_err(&config.augmented))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix("run-").and_then(|n| n.parse().ok()).map(|n| (n, e.path()))
        })
        .filter(|(_, p)| p.join("augmented.jsonl").exists())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(PipelineError::Precondition(format!("{} has no run-*/augmented.jsonl", config.augmented.display())));
    }
    runs.into_iter()
        .map(|(_, dir)| {
            let seeds = if dir.join("seeds.jsonl").exists() { dir.join("seeds.jsonl") } else { fallback()? };
            Ok((seeds, dir.join("augmented.jsonl")))
        })
        .collect()
}

enum MetricValue {
    Value(f64),
    Skipped(String),
}

fn metric_err(metric: &str) -> impl FnOnce(MetricError) -> PipelineError + '_ {
    move |source| PipelineError::Metric { metric: metric.to_string(), source }
}

/// Metric values and skipped metrics with their reasons.
pub type RunMetrics = (BTreeMap<String, f64>, BTreeMap<String, String>);

/// Intrinsic metrics of one run, keyed by metric name.
pub fn evaluate_run(
    seeds: &[SeedSample],
    augmented: &[AugmentedSample],
    n: usize,
    scorer: &SimilarityScorer,
) -> Result<RunMetrics, PipelineError> {
    let seed_text: BTreeMap<&str, &str> = seeds.iter().map(|s| (s.id.as_str(), s.text.as_str())).collect();
    let seed_texts: Vec<&str> = seeds.iter().map(|s| s.text.as_str()).collect();
    let aug_texts: Vec<&str> = augmented.iter().map(|s| s.text.as_str()).collect();

    let mut with_seed: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    let mut variants: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    for s in augmented {
        if let Some(orig) = seed_text.get(s.seed_id.as_str()) {
            with_seed.entry(s.seed_id.clone()).or_insert_with(|| vec![orig]).push(&s.text);
            variants.entry(s.seed_id.clone()).or_default().push(&s.text);
            pairs.push((&s.text, orig));
        }
    }
    variants.retain(|_, v| v.len() >= 2);

    let names = [
        format!("distinct_{n}"),
        format!("distinct_{n}_per_seed"),
        format!("unique_{n}grams"),
        format!("original_distinct_{n}"),
        format!("original_unique_{n}grams"),
        "semantic_variability".to_string(),
        "semantic_variability_pairwise".to_string(),
    ];
    let computed: Vec<Result<MetricValue, PipelineError>> = names
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let v = match i {
                0 => MetricValue::Value(distinct_n_global(&seed_texts, &aug_texts, n).map_err(metric_err(name))?),
                1 if with_seed.is_empty() => MetricValue::Skipped("no variant links to a known seed".into()),
                1 => MetricValue::Value(distinct_n_per_seed(&with_seed, n).map_err(metric_err(name))?),
                2 => MetricValue::Value(unique_ngram_count(&aug_texts, n).map_err(metric_err(name))? as f64),
                3 => MetricValue::Value(distinct_n(&seed_texts, n).map_err(metric_err(name))?),
                4 => MetricValue::Value(unique_ngram_count(&seed_texts, n).map_err(metric_err(name))? as f64),
                5 if pairs.is_empty() => MetricValue::Skipped("no variant links to a known seed".into()),
                5 => MetricValue::Value(semantic_variability(&pairs, scorer).map_err(metric_err(name))?),
                _ if variants.is_empty() => MetricValue::Skipped("no seed has two or more variants".into()),
                _ => MetricValue::Value(semantic_variability_pairwise(&variants, scorer).map_err(metric_err(name))?),
            };
            Ok(v)
        })
        .collect();
    let mut values = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for (name, v) in names.into_iter().zip(computed) {
        match v? {
            MetricValue::Value(x) => {
                values.insert(name, x);
            }
            MetricValue::Skipped(reason) => {
                skipped.insert(name, reason);
            }
        }
    }
    Ok((values, skipped))
}

/// Writes `metrics.txt`, `metrics.jsonl` and `runs.jsonl` to the output directory.
pub fn cmd_evaluate(config: &EvaluateConfig) -> Result<EvaluateOutcome, PipelineError> {
    let scorer = config.scorer.build()?;
    let inputs = evaluation_inputs(config)?;
    let mut per_run: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for (seeds_path, aug_path) in &inputs {
        let seeds = read_seeds(seeds_path, config.task)?;
        let augmented = read_augmented(aug_path, config.task)?;
        if augmented.is_empty() {
            return Err(PipelineError::Precondition(format!("{} has no augmented samples", aug_path.display())));
        }
        let (values, skip) = evaluate_run(&seeds, &augmented, config.n, &scorer)?;
        for (k, v) in values {
            per_run.entry(k).or_default().push(v);
        }
        skipped.extend(skip);
    }
    // a metric skipped in any run is dropped everywhere so series stay paired
    per_run.retain(|k, v| !skipped.contains_key(k) && v.len() == inputs.len());
    let report = aggregate_runs(&per_run).map_err(metric_err("aggregate"))?;

    let mut kv = report.to_key_value();
    for (name, reason) in &skipped {
        kv.push_str(&format!("# {name} skipped: {reason}\n"));
    }
    write_file(&config.out.join("metrics.txt"), &kv)?;
    write_file(&config.out.join("metrics.jsonl"), &report.to_jsonl())?;
    let series: Vec<RunSeries> = per_run.iter().map(|(k, v)| RunSeries { metric: k.clone(), values: v.clone() }).collect();
    write_file(&config.out.join("runs.jsonl"), &to_jsonl(&series))?;
    Ok(EvaluateOutcome { report, per_run, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    /// `augment` output directory or a single augmented file.
    pub augmented: PathBuf,
    /// Seed file supplying the candidate label set; carried labels are used otherwise.
    pub dataset: Option<PathBuf>,
    pub judge: LabelerConfig,
    pub provider_url: Option<String>,
    pub cache: Option<PathBuf>,
    pub workers: usize,
    pub out: PathBuf,
}

fn augmented_files(path: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    require_file(path, "augmented output")?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut runs: Vec<(u32, PathBuf)> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix("run-").and_then(|n| n.parse().ok()).map(|n| (n, e.path().join("augmented.jsonl")))
        })
        .filter(|(_, p)| p.exists())
        .collect();
    runs.sort();
    Ok(runs.into_iter().map(|(_, p)| p).collect())
}

pub fn cmd_audit(config: &AuditConfig) -> Result<crate::label_tools::ConsistencyReport, PipelineError> {
    let gateway = build_gateway(&config.judge.provider, config.provider_url.as_deref(), config.cache.as_deref(), config.workers)?;
    run_audit(config, &gateway)
}

/// Writes `consistency.jsonl` (one record per sample) and `consistency.txt`.
pub fn run_audit(config: &AuditConfig, gateway: &Gateway) -> Result<crate::label_tools::ConsistencyReport, PipelineError> {
    let mut samples = Vec::new();
    for file in augmented_files(&config.augmented)? {
        samples.extend(read_augmented(&file, TaskType::Classification)?);
    }
    if samples.is_empty() {
        return Err(PipelineError::Precondition("no augmented samples to audit".into()));
    }
    let labels = match &config.dataset {
        Some(path) => Some(label_set(&read_seeds(path, TaskType::Classification)?)),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| ConfigError::Invalid(format!("worker pool: {e}")))?;
    let report = pool.install(|| label_consistency_ratio(&samples, labels.as_deref(), &config.judge, gateway))?;
    write_file(&config.out.join("consistency.jsonl"), &report.records_jsonl())?;
    write_file(
        &config.out.join("consistency.txt"),
        &format!("ratio={}\nmatched={}\ntotal={}\n", report.ratio, report.matched, report.total),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    /// `evaluate` output directories or `runs.jsonl` files; at least two.
    pub reports: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub left: String,
    pub right: String,
    #[serde(flatten)]
    pub outcome: ComparisonOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ComparisonOutcome {
    Tested { result: WilcoxonResult, significant: bool },
    Failed { error: String },
}

fn load_series(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, PipelineError> {
    let file = if path.is_dir() { path.join("runs.jsonl") } else { path.to_path_buf() };
    let body = fs::read_to_string(&file).map_err(io_err(&file))?;
    let mut out = BTreeMap::new();
    for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let s: RunSeries = serde_json::from_str(line)
            .map_err(|e| PipelineError::Precondition(format!("{}:{}: {e}", file.display(), i + 1)))?;
        out.insert(s.metric, s.values);
    }
    Ok(out)
}

fn report_name(path: &Path) -> String {
    let p = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
    p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_else(|| p.display().to_string())
}

/// Pairwise signed-rank tests per shared metric. Rows that cannot be tested carry their
/// error; the command fails only if no row could be tested.
pub fn cmd_compare(config: &CompareConfig) -> Result<Vec<ComparisonRow>, PipelineError> {
    if config.reports.len() < 2 {
        return Err(PipelineError::Precondition("compare needs at least two run series".into()));
    }
    let loaded: Vec<(String, BTreeMap<String, Vec<f64>>)> =
        config.reports.iter().map(|p| Ok((report_name(p), load_series(p)?))).collect::<Result<_, PipelineError>>()?;
    let mut names: BTreeSet<&str> = loaded[0].1.keys().map(String::as_str).collect();
    for (_, m) in &loaded[1..] {
        names.retain(|k| m.contains_key(*k));
    }
    if names.is_empty() {
        return Err(PipelineError::Precondition("the run series share no metric".into()));
    }
    let mut rows = Vec::new();
    for metric in names {
        for i in 0..loaded.len() {
            for j in i + 1..loaded.len() {
                let (a, b) = (&loaded[i].1[metric], &loaded[j].1[metric]);
                let outcome = match wilcoxon_signed_rank(a, b) {
                    Ok(result) => ComparisonOutcome::Tested { significant: result.significant(), result },
                    Err(e) => ComparisonOutcome::Failed { error: e.to_string() },
                };
                rows.push(ComparisonRow {
                    metric: metric.to_string(),
                    left: loaded[i].0.clone(),
                    right: loaded[j].0.clone(),
                    outcome,
                });
            }
        }
    }
    if let Some(out) = &config.out {
        write_file(&out.join("compare.tsv"), &comparison_table(&rows))?;
        write_file(&out.join("compare.jsonl"), &to_jsonl(&rows))?;
    }
    if rows.iter().all(|r| matches!(r.outcome, ComparisonOutcome::Failed { .. })) {
        let reasons: BTreeSet<String> = rows
            .iter()
            .filter_map(|r| match &r.outcome {
                ComparisonOutcome::Failed { error } => Some(error.clone()),
                _ => None,
            })
            .collect();
        return Err(PipelineError::Precondition(format!(
            "no comparison could be tested: {}",
            reasons.into_iter().collect::<Vec<_>>().join("; ")
        )));
    }
    Ok(rows)
}

/// Tab-separated table with a header row; significant rows are marked `*`.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("metric\tleft\tright\tn\tstatistic\tp_value\tsignificant\n");
    for r in rows {
        match &r.outcome {
            ComparisonOutcome::Tested { result, significant } => out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\n",
                r.metric,
                r.left,
                r.right,
                result.n,
                result.statistic,
                result.p_value,
                if *significant { "*" } else { "" }
            )),
            ComparisonOutcome::Failed { error } => {
                out.push_str(&format!("{}\t{}\t{}\t-\t-\t-\terror: {error}\n", r.metric, r.left, r.right))
            }
        }
    }
    out
}
