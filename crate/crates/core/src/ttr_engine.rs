//! Transplant-then-regenerate augmentation.
//!
//! A seed is first *transplanted*: the model writes a sentence that could precede it
//! and one that could follow it. The seed is then masked and the model *regenerates*
//! a replacement that fits between the two generated sentences while keeping the
//! seed's label. Each of the `k` variants per seed runs its own transplant.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::error::{ConfigError, ParseFailure};
use crate::llm_gateway::{prompt_hash, CompletionRequest, Gateway, GatewayError};
use crate::response::{require_section, split_sections, Section, PARSE_TABLE_VERSION};
use crate::types::{AugmentedSample, ContinuationMode, RunConfig, SeedSample, TransplantContext};

pub const METHOD: &str = "ttr";

/// Prompt template set. Placeholders are written `<name>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub version: String,
    pub transplant_forward: String,
    pub transplant_backward: String,
    pub transplant_unidirectional: String,
    pub regeneration: String,
}

impl PromptTemplates {
    pub fn bundled() -> Self {
        PromptTemplates {
            version: "ttr-prompts-v1".into(),
            transplant_forward: include_str!("../templates/transplant_forward.txt").into(),
            transplant_backward: include_str!("../templates/transplant_backward.txt").into(),
            transplant_unidirectional: include_str!("../templates/transplant_unidirectional.txt").into(),
            regeneration: include_str!("../templates/regeneration.txt").into(),
        }
    }

    /// Bundled templates with any of `transplant_forward.txt`, `transplant_backward.txt`,
    /// `transplant_unidirectional.txt` or `regeneration.txt` in `dir` taking precedence.
    /// An optional `VERSION` file names the resulting set.
    pub fn with_overrides(dir: &Path) -> io::Result<Self> {
        let mut t = PromptTemplates::bundled();
        let mut overridden = false;
        for (name, slot) in [
            ("transplant_forward.txt", &mut t.transplant_forward),
            ("transplant_backward.txt", &mut t.transplant_backward),
            ("transplant_unidirectional.txt", &mut t.transplant_unidirectional),
            ("regeneration.txt", &mut t.regeneration),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(path)?;
                overridden = true;
            }
        }
        let version_file = dir.join("VERSION");
        if version_file.exists() {
            t.version = fs::read_to_string(version_file)?.trim().to_string();
        } else if overridden {
            t.version = format!("{}+custom", t.version);
        }
        Ok(t)
    }

    fn transplant(&self, mode: ContinuationMode) -> &str {
        match mode {
            ContinuationMode::ForwardFirst => &self.transplant_forward,
            ContinuationMode::BackwardFirst => &self.transplant_backward,
            ContinuationMode::Unidirectional => &self.transplant_unidirectional,
        }
    }
}

/// Replaces `<name>` placeholders in one pass, so substituted text is never re-expanded.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 128);
    let mut rest = template;
    while let Some(open) = rest.find('<') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let replaced = tail.find('>').and_then(|close| {
            let name = &tail[1..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('<');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out.trim_end().to_string()
}

fn nonce_line(variant: u32, attempt: u32, run: u32) -> String {
    format!("\n\n[request id: v{variant}-a{attempt}-r{run}]")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransplantPrompt {
    pub rendered: String,
    pub mode: ContinuationMode,
    pub text_type: String,
}

impl TransplantPrompt {
    /// Labels of the instruction lines between the opening line and the seed line,
    /// in the order the model is asked to produce them.
    pub fn instruction_blocks(&self) -> Vec<String> {
        self.rendered
            .lines()
            .skip(1)
            .take_while(|l| !l.starts_with("The original"))
            .filter_map(|l| l.split_once(':').map(|(label, _)| label.trim().to_string()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegenerationPrompt {
    pub rendered: String,
    pub label_type: String,
    pub original_label: String,
}

#[derive(Debug, Error)]
pub enum TtrError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("transplant failed after {attempts} attempts; last response: {last_raw:?}")]
    TransplantFailure { attempts: u32, last_raw: String },
    #[error("all {} variants of seed `{seed_id}` failed", failures.len())]
    AllVariantsFailed { seed_id: String, failures: Vec<VariantFailure> },
}

/// A variant that could not be produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantFailure {
    pub seed_id: String,
    pub index: u32,
    pub reason: String,
}

/// Everything produced for one seed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedAugmentation {
    pub samples: Vec<AugmentedSample>,
    pub failures: Vec<VariantFailure>,
    pub llm_calls: u32,
}

/// Why a regenerated text was discarded.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterRejection {
    Empty,
    IdenticalToSeed,
    LengthOutOfRange { ratio: f64 },
}

impl std::fmt::Display for FilterRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FilterRejection::Empty => write!(f, "regenerated text is empty"),
            FilterRejection::IdenticalToSeed => write!(f, "regenerated text repeats the seed"),
            FilterRejection::LengthOutOfRange { ratio } => {
                write!(f, "length ratio {ratio:.2} outside [{MIN_LENGTH_RATIO}, {MAX_LENGTH_RATIO}]")
            }
        }
    }
}

pub const MIN_LENGTH_RATIO: f64 = 0.25;
pub const MAX_LENGTH_RATIO: f64 = 4.0;

/// Lower-cased with whitespace runs collapsed to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn post_filter(candidate: &str, seed_text: &str) -> Result<(), FilterRejection> {
    let norm = normalize(candidate);
    if norm.is_empty() {
        return Err(FilterRejection::Empty);
    }
    if norm == normalize(seed_text) {
        return Err(FilterRejection::IdenticalToSeed);
    }
    let seed_len = seed_text.split_whitespace().count().max(1) as f64;
    let ratio = candidate.split_whitespace().count() as f64 / seed_len;
    if !(MIN_LENGTH_RATIO..=MAX_LENGTH_RATIO).contains(&ratio) {
        return Err(FilterRejection::LengthOutOfRange { ratio });
    }
    Ok(())
}

/// Extracts the generated context; the seed text stays authoritative for `original`.
pub fn parse_transplant_response(
    raw: &str,
    seed_text: &str,
    mode: ContinuationMode,
) -> Result<TransplantContext, ParseFailure> {
    let sections = split_sections(raw);
    let subsequent = require_section(&sections, Section::Subsequent)?;
    let preceding = match mode {
        ContinuationMode::Unidirectional => String::new(),
        _ => require_section(&sections, Section::Preceding)?,
    };
    Ok(TransplantContext { preceding, original: seed_text.to_string(), subsequent, mode })
}

/// The body of the `Middle Sentence` section.
pub fn parse_regeneration_response(raw: &str) -> Result<String, ParseFailure> {
    require_section(&split_sections(raw), Section::Middle)
}

/// Result of a successful transplant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransplantOutcome {
    pub context: TransplantContext,
    pub prompt_sha256: String,
    /// Attempt index of the call that parsed.
    pub attempt: u32,
    pub llm_calls: u32,
}

#[derive(Debug, Clone)]
pub struct TtrEngine {
    templates: PromptTemplates,
}

impl Default for TtrEngine {
    fn default() -> Self {
        TtrEngine::new(PromptTemplates::bundled())
    }
}

impl TtrEngine {
    pub fn new(templates: PromptTemplates) -> Self {
        TtrEngine { templates }
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn build_transplant_prompt(
        &self,
        seed: &SeedSample,
        mode: ContinuationMode,
        text_type: &str,
    ) -> Result<TransplantPrompt, ConfigError> {
        if text_type.trim().is_empty() {
            return Err(ConfigError::Invalid("text_type must be non-empty".into()));
        }
        if seed.text.trim().is_empty() {
            return Err(ConfigError::Invalid(format!("seed `{}` has empty text", seed.id)));
        }
        let rendered =
            render(self.templates.transplant(mode), &[("text_type", text_type), ("original text", &seed.text)]);
        Ok(TransplantPrompt { rendered, mode, text_type: text_type.to_string() })
    }

    pub fn build_regeneration_prompt(
        &self,
        context: &TransplantContext,
        seed: &SeedSample,
        config: &RunConfig,
    ) -> Result<RegenerationPrompt, ConfigError> {
        if context.original != seed.text {
            return Err(ConfigError::Invalid(format!("context does not belong to seed `{}`", seed.id)));
        }
        if config.text_type.trim().is_empty() {
            return Err(ConfigError::Invalid("text_type must be non-empty".into()));
        }
        let label = if seed.task.is_labeled() {
            let label = seed
                .class_name()
                .ok_or_else(|| ConfigError::Invalid(format!("seed `{}` has no class label", seed.id)))?;
            if config.label_type.trim().is_empty() {
                return Err(ConfigError::Invalid("label_type must be non-empty for labeled tasks".into()));
            }
            Some(label)
        } else {
            None
        };
        let template = match label {
            Some(_) => self.templates.regeneration.clone(),
            None => drop_label_requirement(&self.templates.regeneration),
        };
        let rendered = render(
            &template,
            &[
                ("text_type", &config.text_type),
                ("label_type", &config.label_type),
                ("original label", label.unwrap_or("")),
                ("preceding sentence", &context.preceding),
                ("original text", &context.original),
                ("subsequent sentence", &context.subsequent),
            ],
        );
        Ok(RegenerationPrompt {
            rendered,
            label_type: config.label_type.clone(),
            original_label: label.unwrap_or("").to_string(),
        })
    }

    fn request(&self, config: &RunConfig, prompt: String) -> CompletionRequest {
        CompletionRequest::new(&config.provider, &config.model, prompt)
            .with_temperature(config.temperature)
            .with_max_tokens(config.max_tokens)
    }

    /// Transplants `seed` for variant `variant`, retrying unparseable responses.
    pub fn transplant(
        &self,
        seed: &SeedSample,
        config: &RunConfig,
        gateway: &Gateway,
        variant: u32,
    ) -> Result<TransplantOutcome, TtrError> {
        self.transplant_from(seed, config, gateway, variant, 0)
    }

    fn transplant_from(
        &self,
        seed: &SeedSample,
        config: &RunConfig,
        gateway: &Gateway,
        variant: u32,
        first_attempt: u32,
    ) -> Result<TransplantOutcome, TtrError> {
        let prompt = self.build_transplant_prompt(seed, config.mode, &config.text_type)?;
        let mut last_raw = String::new();
        let mut llm_calls = 0;
        for attempt in first_attempt..config.max_attempts {
            let user = format!("{}{}", prompt.rendered, nonce_line(variant, attempt, config.run_index));
            let response = gateway.complete(&self.request(config, user.clone()), attempt)?;
            llm_calls += 1;
            match parse_transplant_response(&response.text, &seed.text, config.mode) {
                Ok(context) => {
                    return Ok(TransplantOutcome { context, prompt_sha256: prompt_hash(&user), attempt, llm_calls })
                }
                Err(e) => {
                    log::debug!("seed {} v{variant} a{attempt}: transplant parse failed: {e}", seed.id);
                    last_raw = response.text;
                }
            }
        }
        Err(TtrError::TransplantFailure { attempts: llm_calls, last_raw })
    }

    /// Runs one transplant+regenerate chain; returns the sample and the call count.
    fn run_chain(
        &self,
        seed: &SeedSample,
        config: &RunConfig,
        gateway: &Gateway,
        variant: u32,
    ) -> (Result<AugmentedSample, String>, u32) {
        let mut calls = 0;
        let mut attempt = 0;
        let mut last_reason = String::from("no attempts made");
        while attempt < config.max_attempts {
            let transplanted = match self.transplant_from(seed, config, gateway, variant, attempt) {
                Ok(t) => t,
                Err(TtrError::TransplantFailure { attempts, last_raw }) => {
                    calls += attempts;
                    return (Err(format!("transplant never parsed; last response: {last_raw:?}")), calls);
                }
                Err(e) => return (Err(e.to_string()), calls),
            };
            calls += transplanted.llm_calls;
            attempt = transplanted.attempt;

            let regen = match self.build_regeneration_prompt(&transplanted.context, seed, config) {
                Ok(p) => p,
                Err(e) => return (Err(e.to_string()), calls),
            };
            let user = format!("{}{}", regen.rendered, nonce_line(variant, attempt, config.run_index));
            let response = match gateway.complete(&self.request(config, user.clone()), attempt) {
                Ok(r) => r,
                Err(e) => return (Err(e.to_string()), calls),
            };
            calls += 1;
            attempt += 1;

            let text = match parse_regeneration_response(&response.text) {
                Ok(t) => t,
                Err(e) => {
                    last_reason = format!("regeneration: {e}");
                    continue;
                }
            };
            if let Err(rejection) = post_filter(&text, &seed.text) {
                last_reason = rejection.to_string();
                continue;
            }

            let ctx = &transplanted.context;
            let provenance = BTreeMap::from([
                ("mode".to_string(), config.mode.to_string()),
                ("provider".to_string(), config.provider.clone()),
                ("model".to_string(), config.model.clone()),
                ("template_version".to_string(), self.templates.version.clone()),
                ("parse_table".to_string(), PARSE_TABLE_VERSION.to_string()),
                ("transplant_prompt_sha256".to_string(), transplanted.prompt_sha256.clone()),
                ("regeneration_prompt_sha256".to_string(), prompt_hash(&user)),
                ("attempt".to_string(), (attempt - 1).to_string()),
                ("run".to_string(), config.run_index.to_string()),
                ("llm_calls".to_string(), calls.to_string()),
                ("preceding".to_string(), ctx.preceding.clone()),
                ("subsequent".to_string(), ctx.subsequent.clone()),
            ]);
            let label = match seed.task {
                crate::types::TaskType::NamedEntityRecognition => None,
                _ => seed.label.clone(),
            };
            let sample = AugmentedSample {
                seed_id: seed.id.clone(),
                text,
                method: METHOD.to_string(),
                index: variant,
                label,
                provenance,
            };
            return (Ok(sample), calls);
        }
        (Err(format!("attempts exhausted: {last_reason}")), calls)
    }

    /// Produces `k_per_seed` variants of `seed`, each from its own transplant.
    ///
    /// Fails only when every variant fails; partial failures are listed in the outcome.
    pub fn augment(&self, seed: &SeedSample, config: &RunConfig, gateway: &Gateway) -> Result<SeedAugmentation, TtrError> {
        config.validate(seed.task)?;
        self.build_transplant_prompt(seed, config.mode, &config.text_type)?;
        if seed.task.is_labeled() && seed.class_name().is_none() {
            return Err(ConfigError::Invalid(format!("seed `{}` has no class label", seed.id)).into());
        }
        let mut out = SeedAugmentation::default();
        for variant in 0..config.k_per_seed {
            let (result, calls) = self.run_chain(seed, config, gateway, variant);
            out.llm_calls += calls;
            match result {
                Ok(sample) => out.samples.push(sample),
                Err(reason) => out.failures.push(VariantFailure { seed_id: seed.id.clone(), index: variant, reason }),
            }
        }
        if out.samples.is_empty() {
            return Err(TtrError::AllVariantsFailed { seed_id: seed.id.clone(), failures: out.failures });
        }
        Ok(out)
    }
}

/// Removes requirement lines mentioning the seed label and renumbers the list.
fn drop_label_requirement(template: &str) -> String {
    let mut out = Vec::new();
    let mut in_requirements = false;
    let mut number = 0;
    for line in template.lines() {
        if line.contains("requirements") {
            in_requirements = true;
            number = 0;
            out.push(line.to_string());
            continue;
        }
        let numbered = line.split_once(". ").filter(|(n, _)| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()));
        match numbered {
            Some((_, rest)) if in_requirements => {
                if line.contains("<original label>") || line.contains("<label_type>") {
                    continue;
                }
                number += 1;
                out.push(format!("{number}. {rest}"));
            }
            _ => {
                in_requirements = false;
                out.push(line.to_string());
            }
        }
    }
    out.join("\n")
}

/// Convenience wrapper using the bundled templates.
pub fn augment_ttr(seed: &SeedSample, config: &RunConfig, gateway: &Gateway) -> Result<SeedAugmentation, TtrError> {
    TtrEngine::default().augment(seed, config, gateway)
}
