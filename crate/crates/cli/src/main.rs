//! `ttr` command line.
//!
//! Settings resolve in this order: flag, `TTR_*` environment variable, `--config` file,
//! built-in default. The config file holds flat `key=value` lines whose keys are long
//! flag names; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ttr_core::label_tools::{IobScheme, LabelerConfig};
use ttr_core::pipeline::{
    cmd_audit, cmd_augment, cmd_compare, cmd_evaluate, cmd_subsample, comparison_table, AugmentConfig, AuditConfig,
    CompareConfig, EvaluateConfig, Method, ScorerSpec, SubsampleConfig, TranslatorSpec,
};
use ttr_core::{ContinuationMode, RunConfig, TaskType};

#[derive(Parser, Debug)]
#[command(name = "ttr", version, about = "LLM text augmentation by transplanting and regenerating seed samples")]
struct Cli {
    /// Flat key=value file supplying defaults.
    #[arg(long, global = true, env = "TTR_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a reproducible seed subsample.
    Subsample(SubsampleArgs),
    /// Generate augmented samples.
    Augment(Box<AugmentArgs>),
    /// Compute diversity metrics over augment runs.
    Evaluate(EvaluateArgs),
    /// Ask a judge model to re-predict carried labels.
    Audit(AuditArgs),
    /// Signed-rank tests between run series of two or more evaluations.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct SubsampleArgs {
    #[arg(long, env = "TTR_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "TTR_TASK", default_value = "classification")]
    task: TaskType,
    #[arg(long, env = "TTR_PER_CLASS", default_value_t = 10)]
    per_class: usize,
    #[arg(long, env = "TTR_TOTAL", default_value_t = 50)]
    total: usize,
    #[arg(long, env = "TTR_SEED", default_value_t = 0)]
    seed: u64,
    /// Drop texts longer than this many whitespace tokens first.
    #[arg(long, env = "TTR_MAX_TEXT_TOKENS")]
    max_text_tokens: Option<usize>,
    #[arg(long, env = "TTR_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long, env = "TTR_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "TTR_TASK", default_value = "classification")]
    task: TaskType,
    #[arg(long, env = "TTR_METHOD", default_value = "ttr")]
    method: Method,
    /// left-right, right-left or uni.
    #[arg(long, env = "TTR_MODE", default_value = "right-left")]
    mode: ContinuationMode,
    /// Variants per seed.
    #[arg(long, env = "TTR_K", default_value_t = 3)]
    k: u32,
    #[arg(long, env = "TTR_SEED", default_value_t = 0)]
    seed: u64,
    /// mock, openai, deepseek, or any name together with --provider-url.
    #[arg(long, env = "TTR_PROVIDER", default_value = "mock")]
    provider: String,
    #[arg(long, env = "TTR_PROVIDER_URL")]
    provider_url: Option<String>,
    #[arg(long, env = "TTR_MODEL", default_value = "mock")]
    model: String,
    #[arg(long, env = "TTR_TEXT_TYPE", default_value = "sentence")]
    text_type: String,
    /// Empty for tasks where the label is not carried by the prompt.
    #[arg(long, env = "TTR_LABEL_TYPE", default_value = "label")]
    label_type: String,
    #[arg(long, env = "TTR_TEMPERATURE", default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, env = "TTR_MAX_TOKENS", default_value_t = 512)]
    max_tokens: u32,
    #[arg(long, env = "TTR_MAX_ATTEMPTS", default_value_t = 3)]
    max_attempts: u32,
    /// Append-only response cache.
    #[arg(long, env = "TTR_CACHE")]
    cache: Option<PathBuf>,
    #[arg(long, env = "TTR_WORKERS", default_value_t = 4)]
    workers: usize,
    #[arg(long, env = "TTR_RUNS", default_value_t = 1)]
    runs: u32,
    /// Re-draw the subsample of the dataset for every run.
    #[arg(long, env = "TTR_RESAMPLE_PER_RUN", default_value_t = false)]
    resample_per_run: bool,
    #[arg(long, env = "TTR_PER_CLASS", default_value_t = 10)]
    per_class: usize,
    #[arg(long, env = "TTR_TOTAL", default_value_t = 50)]
    total: usize,
    #[arg(long, env = "TTR_EDA_ALPHA", default_value_t = 0.1)]
    eda_alpha: f64,
    #[arg(long, env = "TTR_EDA_P_DELETE", default_value_t = 0.1)]
    eda_p_delete: f64,
    /// `word<TAB>syn,syn` file; the bundled lexicon otherwise.
    #[arg(long, env = "TTR_EDA_LEXICON")]
    eda_lexicon: Option<PathBuf>,
    #[arg(long, env = "TTR_PIVOTS", value_delimiter = ',', default_value = "de,fr,zh,es,ja")]
    pivots: Vec<String>,
    #[arg(long, env = "TTR_SOURCE_LANGUAGE", default_value = "en")]
    source_language: String,
    /// Translation service base URL; the offline mock translator otherwise.
    #[arg(long, env = "TTR_TRANSLATOR_URL")]
    translator_url: Option<String>,
    /// Environment variable holding the translation service key.
    #[arg(long, env = "TTR_TRANSLATOR_KEY_ENV")]
    translator_key_env: Option<String>,
    #[arg(long, env = "TTR_FEWSHOT_EXAMPLES", default_value_t = 4)]
    fewshot_examples: usize,
    #[arg(long, env = "TTR_FEWSHOT_OUTPUTS")]
    fewshot_outputs: Option<u32>,
    /// iob2 or lenient.
    #[arg(long, env = "TTR_IOB_SCHEME", default_value = "lenient", value_parser = parse_scheme)]
    iob_scheme: IobScheme,
    /// Directory overriding the bundled prompt templates.
    #[arg(long, env = "TTR_TEMPLATES")]
    templates: Option<PathBuf>,
    #[arg(long, env = "TTR_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Output directory of `augment`, or one augmented file.
    #[arg(long, env = "TTR_AUGMENTED")]
    augmented: PathBuf,
    /// Seed file for runs without their own seeds.jsonl.
    #[arg(long, env = "TTR_DATASET")]
    dataset: Option<PathBuf>,
    #[arg(long, env = "TTR_TASK", default_value = "classification")]
    task: TaskType,
    #[arg(long, env = "TTR_NGRAM", default_value_t = 3)]
    ngram: usize,
    /// exact, char-ngram, or http:<url>:<model>:<KEY_ENV>.
    #[arg(long, env = "TTR_SCORER", default_value = "exact")]
    scorer: ScorerSpec,
    #[arg(long, env = "TTR_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, env = "TTR_AUGMENTED")]
    augmented: PathBuf,
    /// Seed file supplying the label set.
    #[arg(long, env = "TTR_DATASET")]
    dataset: Option<PathBuf>,
    #[arg(long, env = "TTR_PROVIDER", default_value = "mock")]
    provider: String,
    #[arg(long, env = "TTR_PROVIDER_URL")]
    provider_url: Option<String>,
    #[arg(long, env = "TTR_MODEL", default_value = "mock")]
    model: String,
    #[arg(long, env = "TTR_CACHE")]
    cache: Option<PathBuf>,
    #[arg(long, env = "TTR_WORKERS", default_value_t = 4)]
    workers: usize,
    #[arg(long, env = "TTR_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Evaluate output directories or runs.jsonl files.
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    #[arg(long, env = "TTR_OUT")]
    out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> Result<IobScheme, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "iob2" | "strict" => Ok(IobScheme::Iob2),
        "lenient" | "iob1" => Ok(IobScheme::Lenient),
        other => Err(format!("unknown IOB scheme `{other}` (iob2 or lenient)")),
    }
}

fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let body = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), n + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.contains("api-key") {
            bail!("{}:{}: API keys are read from the environment only", path.display(), n + 1);
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Location of `--config` before full parsing, so its values can become defaults.
fn config_path(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    std::env::var_os("TTR_CONFIG").map(PathBuf::from)
}

fn command_with_defaults(values: &BTreeMap<String, String>) -> Result<clap::Command> {
    let mut cmd = Cli::command();
    let mut used: BTreeMap<&str, bool> = values.keys().map(|k| (k.as_str(), false)).collect();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let sub = cmd.find_subcommand(&name).expect("listed subcommand");
        let ids: Vec<String> =
            sub.get_arguments().filter_map(|a| a.get_long().map(|l| l.to_string())).collect();
        let mut hits = Vec::new();
        for long in ids {
            if let Some(v) = values.get(&long) {
                *used.get_mut(long.as_str()).expect("key present") = true;
                hits.push((long, v.clone()));
            }
        }
        cmd = cmd.mut_subcommand(&name, |mut s| {
            for (long, v) in hits {
                let id = long.replace('-', "_");
                s = s.mut_arg(id, |a| a.default_value(v).required(false));
            }
            s
        });
    }
    let unknown: Vec<&str> = used.into_iter().filter(|(_, u)| !u).map(|(k, _)| k).collect();
    if !unknown.is_empty() {
        bail!("unknown config keys: {}", unknown.join(", "));
    }
    Ok(cmd)
}

fn parse_cli() -> Result<Cli> {
    let args: Vec<String> = std::env::args().collect();
    let defaults = match config_path(&args) {
        Some(p) => read_config_file(&p)?,
        None => BTreeMap::new(),
    };
    let matches = command_with_defaults(&defaults)?.get_matches_from(&args);
    Ok(Cli::from_arg_matches(&matches)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Subsample(a) => {
            let cfg = SubsampleConfig {
                dataset: a.dataset,
                task: a.task,
                per_class: a.per_class,
                total: a.total,
                rng_seed: a.seed,
                max_tokens: a.max_text_tokens,
                out: a.out,
            };
            let done = cmd_subsample(&cfg)?;
            println!("wrote {} samples to {}", done.count, done.output.display());
        }
        Command::Augment(a) => {
            let mut cfg = AugmentConfig::new(a.dataset, a.method, a.task, a.out);
            cfg.run = RunConfig {
                k_per_seed: a.k,
                mode: a.mode,
                rng_seed: a.seed,
                provider: a.provider,
                model: a.model,
                text_type: a.text_type,
                label_type: a.label_type,
                max_attempts: a.max_attempts,
                temperature: a.temperature,
                max_tokens: a.max_tokens,
                run_index: 0,
            };
            cfg.provider_url = a.provider_url;
            cfg.cache = a.cache;
            cfg.workers = a.workers;
            cfg.runs = a.runs;
            cfg.resample_per_run = a.resample_per_run;
            cfg.per_class = a.per_class;
            cfg.total = a.total;
            cfg.eda.alpha = a.eda_alpha;
            cfg.eda.p_delete = a.eda_p_delete;
            cfg.eda.rng_seed = a.seed;
            cfg.eda.synonym_lexicon = a.eda_lexicon;
            cfg.pivots = a.pivots;
            cfg.source_language = a.source_language;
            cfg.translator = match a.translator_url {
                Some(base_url) => TranslatorSpec::Http { base_url, api_key_env: a.translator_key_env },
                None => TranslatorSpec::Mock,
            };
            cfg.fewshot_examples = a.fewshot_examples;
            cfg.fewshot_outputs = a.fewshot_outputs;
            cfg.iob_scheme = a.iob_scheme;
            cfg.templates_dir = a.templates;
            let done = cmd_augment(&cfg)?;
            if done.failures > 0 {
                log::warn!(
                    "{} variants failed; details in {}",
                    done.failures,
                    done.out.join("failures.jsonl").display()
                );
            }
            println!(
                "wrote {} samples over {} run(s) to {} (live calls {}, cache hits {})",
                done.samples,
                done.manifest.runs.len(),
                done.out.display(),
                done.manifest.cache.live_calls,
                done.manifest.cache.cache_hits
            );
        }
        Command::Evaluate(a) => {
            let cfg = EvaluateConfig {
                augmented: a.augmented,
                dataset: a.dataset,
                task: a.task,
                n: a.ngram,
                scorer: a.scorer,
                out: a.out,
            };
            let done = cmd_evaluate(&cfg)?;
            for (metric, reason) in &done.skipped {
                log::warn!("{metric} skipped: {reason}");
            }
            print!("{}", done.report.to_key_value());
        }
        Command::Audit(a) => {
            let cfg = AuditConfig {
                augmented: a.augmented,
                dataset: a.dataset,
                judge: LabelerConfig { provider: a.provider, model: a.model, ..LabelerConfig::default() },
                provider_url: a.provider_url,
                cache: a.cache,
                workers: a.workers,
                out: a.out,
            };
            let report = cmd_audit(&cfg)?;
            println!("ratio={}\nmatched={}\ntotal={}", report.ratio, report.matched, report.total);
        }
        Command::Compare(a) => {
            let rows = cmd_compare(&CompareConfig { reports: a.reports, out: a.out })?;
            print!("{}", comparison_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let outcome = parse_cli().and_then(run);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
