//! Label auditing with an LLM judge, and IOB label generation and validation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{ConfigError, ParseFailure};
use crate::llm_gateway::{CompletionRequest, Gateway, GatewayError, AUDIT_TEMPERATURE};
use crate::response::{parse_list_literal, split_sections, Section};
use crate::types::{AugmentedSample, IobTag};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unusable response after {attempts} attempts: {last}")]
    Parse { attempts: u32, last: ParseFailure },
}

/// Model settings for judge and annotation calls.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelerConfig {
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Attempts for IOB annotation; label prediction always allows one retry.
    pub max_attempts: u32,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            provider: "mock".into(),
            model: "mock".into(),
            temperature: AUDIT_TEMPERATURE,
            max_tokens: 512,
            max_attempts: 3,
        }
    }
}

impl LabelerConfig {
    fn request(&self, prompt: String) -> CompletionRequest {
        CompletionRequest::new(&self.provider, &self.model, prompt)
            .with_temperature(self.temperature)
            .with_max_tokens(self.max_tokens)
    }
}

/// Comma-separated label names as they appear in the candidate list line.
pub fn label_enum_str(labels: &[String]) -> String {
    labels.join(", ")
}

pub fn build_label_prompt(text: &str, labels: &[String]) -> String {
    format!(
        "You are an expert text classifier. Your task is to analyze the given text and select exactly ONE most appropriate label from the provided candidate label list.\n\n\
         Text: {text}\n\
         Candidate label list: {}\n\n\
         Please return ONLY the selected label name without explanations, punctuation or additional text.",
        label_enum_str(labels)
    )
}

fn normalize_label(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || matches!(c, '\u{201c}' | '\u{201d}' | '\u{2018}' | '\u{2019}'))
        .to_lowercase()
}

/// Resolves a judge reply to one of `labels`; anything but a bare label is rejected.
pub fn match_label(reply: &str, labels: &[String]) -> Result<String, ParseFailure> {
    let norm = normalize_label(reply);
    labels
        .iter()
        .find(|l| normalize_label(l) == norm)
        .cloned()
        .ok_or_else(|| ParseFailure::UnknownLabel(reply.trim().to_string()))
}

/// Asks the judge for one label; an unmatched reply is retried once.
pub fn predict_label(text: &str, labels: &[String], config: &LabelerConfig, gateway: &Gateway) -> Result<String, LabelError> {
    if labels.is_empty() {
        return Err(ConfigError::Invalid("label set is empty".into()).into());
    }
    let prompt = build_label_prompt(text, labels);
    let mut last = ParseFailure::Malformed("no attempts made".into());
    for attempt in 0..2 {
        let response = gateway.complete(&config.request(prompt.clone()), attempt)?;
        match match_label(&response.text, labels) {
            Ok(label) => return Ok(label),
            Err(e) => last = e,
        }
    }
    Err(LabelError::Parse { attempts: 2, last })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub seed_id: String,
    pub method: String,
    pub index: u32,
    pub carried_label: String,
    /// `None` when the judge gave no usable answer.
    pub predicted_label: Option<String>,
    #[serde(rename = "match")]
    pub matched: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub ratio: f64,
    pub matched: usize,
    pub total: usize,
    pub records: Vec<ConsistencyRecord>,
}

impl ConsistencyReport {
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Share of samples whose judged label equals the carried one.
///
/// Unparseable replies and failed calls count as mismatches. `labels` defaults to the
/// sorted set of carried labels.
pub fn label_consistency_ratio(
    augmented: &[AugmentedSample],
    labels: Option<&[String]>,
    config: &LabelerConfig,
    gateway: &Gateway,
) -> Result<ConsistencyReport, LabelError> {
    if augmented.is_empty() {
        return Err(ConfigError::Invalid("no augmented samples to audit".into()).into());
    }
    let mut carried = Vec::with_capacity(augmented.len());
    for s in augmented {
        let label = s
            .label
            .as_ref()
            .and_then(|l| l.class_name())
            .ok_or_else(|| ConfigError::Invalid(format!("sample {}#{} has no class label", s.seed_id, s.index)))?;
        carried.push(label.to_string());
    }
    let label_set: Vec<String> = match labels {
        Some(l) => l.to_vec(),
        None => {
            let mut l = carried.clone();
            l.sort();
            l.dedup();
            l
        }
    };
    let records: Vec<ConsistencyRecord> = augmented
        .par_iter()
        .zip(carried.par_iter())
        .map(|(s, carried)| {
            let (predicted, error) = match predict_label(&s.text, &label_set, config, gateway) {
                Ok(p) => (Some(p), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ConsistencyRecord {
                seed_id: s.seed_id.clone(),
                method: s.method.clone(),
                index: s.index,
                carried_label: carried.clone(),
                matched: predicted.as_deref() == Some(carried.as_str()),
                predicted_label: predicted,
                error,
            }
        })
        .collect();
    let matched = records.iter().filter(|r| r.matched).count();
    Ok(ConsistencyReport { ratio: matched as f64 / records.len() as f64, matched, total: records.len(), records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IobScheme {
    /// Every entity opens with `B-`.
    #[default]
    Iob2,
    /// `I-X` may open an entity after `O` or at the start.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IobViolation {
    pub position: usize,
    pub tag: IobTag,
    pub previous: Option<IobTag>,
}

impl fmt::Display for IobViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.previous {
            Some(p) => write!(f, "position {}: {} after {}", self.position, self.tag, p),
            None => write!(f, "position {}: {} opens the sequence", self.position, self.tag),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IobReport {
    pub violations: Vec<IobViolation>,
}

impl IobReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.violations.iter().map(|v| v.position).collect()
    }
}

pub fn validate_iob_sequence(tags: &[IobTag], scheme: IobScheme) -> IobReport {
    let mut violations = Vec::new();
    for (i, &tag) in tags.iter().enumerate() {
        if !tag.is_inside() {
            continue;
        }
        let previous = i.checked_sub(1).map(|j| tags[j]);
        let continues = previous.is_some_and(|p| p != IobTag::O && p.entity_type() == tag.entity_type());
        let ok = match scheme {
            IobScheme::Iob2 => continues,
            IobScheme::Lenient => continues || previous.is_none_or(|p| p == IobTag::O),
        };
        if !ok {
            violations.push(IobViolation { position: i, tag, previous });
        }
    }
    IobReport { violations }
}

/// The one-shot demonstration embedded in the annotation prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IobExample {
    pub sentence: String,
    pub tokens: Vec<String>,
    pub tags: Vec<IobTag>,
}

impl IobExample {
    pub fn new(tokens: Vec<String>, tags: Vec<IobTag>) -> Result<Self, ConfigError> {
        if tokens.is_empty() || tokens.len() != tags.len() {
            return Err(ConfigError::Invalid(format!(
                "example needs equal, non-zero token and tag counts (got {} and {})",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(IobExample { sentence: tokens.join(" "), tokens, tags })
    }
}

fn py_quote(s: &str) -> String {
    format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'"))
}

fn tag_id_map() -> String {
    let pairs: Vec<String> = IobTag::ALL.iter().map(|t| format!("'{}': {}", t.as_str(), t.id())).collect();
    format!("{{{}}}", pairs.join(", "))
}

pub fn build_iob_prompt(text: &str, example: &IobExample) -> String {
    let entities: Vec<String> = example.tokens.iter().map(|t| py_quote(t)).collect();
    let labels: Vec<String> = example.tags.iter().map(|t| py_quote(t.as_str())).collect();
    let ids: Vec<String> = example.tags.iter().map(|t| t.id().to_string()).collect();
    format!(
        "You are a professional named entity recognition (NER) annotation expert. Your task is to tokenize the given sentence, identify the named entities, and assign a corresponding BIO-format label and label ID to each token.\n\n\
         This task includes only the following four types of entities: persons (PER), organizations (ORG), locations (LOC), and miscellaneous names (MISC).\n\n\
         Use the following BIO labels and their corresponding label IDs: {}.\n\n\
         Please output the result strictly in the following format (only include these four lines):\n\
         sentence: original sentence\n\
         entities: ['token1', 'token2', ..., 'tokenN']\n\
         labels: [BIO_label1, BIO_label2, ..., BIO_labelN]\n\
         IDs: [label_id1, label_id2, ..., label_idN]\n\n\
         Here is an example:\n\
         sentence: {}\n\
         entities: [{}]\n\
         labels: [{}]\n\
         IDs: [{}]\n\n\
         Now, please perform named entity recognition and annotation for the following sentence:\n\
         {}\n\n\
         Return only the result. Do not include any explanation or additional content.",
        tag_id_map(),
        example.sentence,
        entities.join(", "),
        labels.join(", "),
        ids.join(", "),
        text.replace('\n', " "),
    )
}

fn list_section(sections: &[(Section, String)], section: Section) -> Result<Vec<String>, ParseFailure> {
    let body = sections
        .iter()
        .find(|(s, _)| *s == section)
        .map(|(_, b)| b.trim().trim_matches(|c| c == '`' || c == '*').trim())
        .ok_or_else(|| ParseFailure::MissingSection(section.name().into()))?;
    if body.starts_with('[') {
        parse_list_literal(body)
    } else {
        parse_list_literal(&format!("[{body}]"))
    }
}

/// Tokens and tags from the four-line annotation reply.
///
/// Token, tag and id counts must agree and each id must be its tag's fixed id.
pub fn parse_iob_response(raw: &str) -> Result<(Vec<String>, Vec<IobTag>), ParseFailure> {
    let sections = split_sections(raw);
    let tokens = list_section(&sections, Section::Entities)?;
    let labels = list_section(&sections, Section::Labels)?;
    let ids = list_section(&sections, Section::Ids)?;
    if tokens.is_empty() {
        return Err(ParseFailure::EmptySection(Section::Entities.name().into()));
    }
    if tokens.len() != labels.len() || labels.len() != ids.len() {
        return Err(ParseFailure::Malformed(format!(
            "{} entities, {} labels and {} IDs",
            tokens.len(),
            labels.len(),
            ids.len()
        )));
    }
    let mut tags = Vec::with_capacity(labels.len());
    for (label, id) in labels.iter().zip(&ids) {
        let tag: IobTag = label.trim().to_uppercase().parse().map_err(|_| ParseFailure::UnknownLabel(label.clone()))?;
        let id: u8 = id.trim().parse().map_err(|_| ParseFailure::Malformed(format!("ID `{id}` is not a number")))?;
        if id != tag.id() {
            return Err(ParseFailure::Malformed(format!("ID {id} does not match {tag} ({})", tag.id())));
        }
        tags.push(tag);
    }
    Ok((tokens, tags))
}

/// Annotates `text` with the model; replies failing to parse, or violating `scheme`, are retried.
pub fn generate_iob_labels(
    text: &str,
    example: &IobExample,
    scheme: IobScheme,
    config: &LabelerConfig,
    gateway: &Gateway,
) -> Result<(Vec<String>, Vec<IobTag>), LabelError> {
    let prompt = build_iob_prompt(text, example);
    let mut last = ParseFailure::Malformed("no attempts made".into());
    let attempts = config.max_attempts.max(1);
    for attempt in 0..attempts {
        let response = gateway.complete(&config.request(prompt.clone()), attempt)?;
        match parse_iob_response(&response.text) {
            Ok((tokens, tags)) => {
                let report = validate_iob_sequence(&tags, scheme);
                if report.is_valid() {
                    return Ok((tokens, tags));
                }
                last = ParseFailure::Malformed(format!("invalid tag sequence: {}", report.violations[0]));
            }
            Err(e) => last = e,
        }
    }
    Err(LabelError::Parse { attempts, last })
}
