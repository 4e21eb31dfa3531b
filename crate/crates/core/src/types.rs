//! Shared domain types: tasks, seed and augmented samples, labels and run settings.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// The kind of downstream task a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classification,
    #[serde(rename = "qa")]
    QuestionAnswering,
    #[serde(rename = "ner")]
    NamedEntityRecognition,
}

impl TaskType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Classification => "classification",
            TaskType::QuestionAnswering => "qa",
            TaskType::NamedEntityRecognition => "ner",
        }
    }

    /// Whether augmentation prompts carry the seed's label.
    pub fn is_labeled(&self) -> bool {
        matches!(self, TaskType::Classification)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classification" | "cls" => Ok(TaskType::Classification),
            "qa" | "question-answering" | "question_answering" => Ok(TaskType::QuestionAnswering),
            "ner" | "named-entity-recognition" => Ok(TaskType::NamedEntityRecognition),
            other => Err(ConfigError::Invalid(format!("unknown task type `{other}`"))),
        }
    }
}

/// One of the nine CoNLL-2003 IOB tags, with the fixed label ids used in NER prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IobTag {
    O,
    BOrg,
    BMisc,
    BPer,
    IPer,
    BLoc,
    IOrg,
    IMisc,
    ILoc,
}

impl IobTag {
    /// All tags in id order.
    pub const ALL: [IobTag; 9] = [
        IobTag::O,
        IobTag::BOrg,
        IobTag::BMisc,
        IobTag::BPer,
        IobTag::IPer,
        IobTag::BLoc,
        IobTag::IOrg,
        IobTag::IMisc,
        IobTag::ILoc,
    ];

    pub fn id(self) -> u8 {
        match self {
            IobTag::O => 0,
            IobTag::BOrg => 1,
            IobTag::BMisc => 2,
            IobTag::BPer => 3,
            IobTag::IPer => 4,
            IobTag::BLoc => 5,
            IobTag::IOrg => 6,
            IobTag::IMisc => 7,
            IobTag::ILoc => 8,
        }
    }

    pub fn from_id(id: u8) -> Option<IobTag> {
        IobTag::ALL.get(id as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IobTag::O => "O",
            IobTag::BOrg => "B-ORG",
            IobTag::BMisc => "B-MISC",
            IobTag::BPer => "B-PER",
            IobTag::IPer => "I-PER",
            IobTag::BLoc => "B-LOC",
            IobTag::IOrg => "I-ORG",
            IobTag::IMisc => "I-MISC",
            IobTag::ILoc => "I-LOC",
        }
    }

    /// Entity type without the B-/I- prefix; `None` for `O`.
    pub fn entity_type(self) -> Option<&'static str> {
        match self {
            IobTag::O => None,
            IobTag::BOrg | IobTag::IOrg => Some("ORG"),
            IobTag::BMisc | IobTag::IMisc => Some("MISC"),
            IobTag::BPer | IobTag::IPer => Some("PER"),
            IobTag::BLoc | IobTag::ILoc => Some("LOC"),
        }
    }

    pub fn is_begin(self) -> bool {
        matches!(self, IobTag::BOrg | IobTag::BMisc | IobTag::BPer | IobTag::BLoc)
    }

    pub fn is_inside(self) -> bool {
        matches!(self, IobTag::IOrg | IobTag::IMisc | IobTag::IPer | IobTag::ILoc)
    }
}

impl fmt::Display for IobTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown IOB tag `{0}`")]
pub struct UnknownTag(pub String);

impl FromStr for IobTag {
    type Err = UnknownTag;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IobTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTag(s.to_string()))
    }
}

impl Serialize for IobTag {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for IobTag {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Task-specific label carried by a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelPayload {
    Class(String),
    Answer(String),
    /// Token and tag sequences; well-formed payloads have equal lengths.
    Iob { tokens: Vec<String>, tags: Vec<IobTag> },
}

impl LabelPayload {
    pub fn class_name(&self) -> Option<&str> {
        match self {
            LabelPayload::Class(c) => Some(c),
            _ => None,
        }
    }
}

/// A labeled input text selected for augmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSample {
    pub id: String,
    pub text: String,
    pub label: Option<LabelPayload>,
    pub task: TaskType,
}

impl SeedSample {
    pub fn classification(id: impl Into<String>, text: impl Into<String>, class: impl Into<String>) -> Self {
        SeedSample {
            id: id.into(),
            text: text.into(),
            label: Some(LabelPayload::Class(class.into())),
            task: TaskType::Classification,
        }
    }

    /// QA items are flattened as `context\nquestion`; the answer rides along as the label.
    pub fn question_answering(
        id: impl Into<String>,
        context: &str,
        question: &str,
        answer: impl Into<String>,
    ) -> Self {
        SeedSample {
            id: id.into(),
            text: format!("{context}\n{question}"),
            label: Some(LabelPayload::Answer(answer.into())),
            task: TaskType::QuestionAnswering,
        }
    }

    /// NER sample whose text is the space-joined token sequence.
    pub fn ner(id: impl Into<String>, tokens: Vec<String>, tags: Vec<IobTag>) -> Self {
        SeedSample {
            id: id.into(),
            text: tokens.join(" "),
            label: Some(LabelPayload::Iob { tokens, tags }),
            task: TaskType::NamedEntityRecognition,
        }
    }

    pub fn class_name(&self) -> Option<&str> {
        self.label.as_ref().and_then(LabelPayload::class_name)
    }
}

/// A generated variant linked back to its seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSample {
    pub seed_id: String,
    pub text: String,
    pub method: String,
    pub index: u32,
    pub label: Option<LabelPayload>,
    pub provenance: BTreeMap<String, String>,
}

/// Order of the two continuation directions in the transplant step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContinuationMode {
    /// Preceding context requested first ("left, right").
    BackwardFirst,
    /// Subsequent context requested first ("right, left").
    ForwardFirst,
    /// Subsequent context only.
    Unidirectional,
}

impl ContinuationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContinuationMode::BackwardFirst => "left-right",
            ContinuationMode::ForwardFirst => "right-left",
            ContinuationMode::Unidirectional => "uni",
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        !matches!(self, ContinuationMode::Unidirectional)
    }
}

impl fmt::Display for ContinuationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContinuationMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace([',', ' '], "-").as_str() {
            "left-right" | "backward-first" | "backward" => Ok(ContinuationMode::BackwardFirst),
            "right-left" | "forward-first" | "forward" => Ok(ContinuationMode::ForwardFirst),
            "uni" | "unidirectional" => Ok(ContinuationMode::Unidirectional),
            other => Err(ConfigError::Invalid(format!(
                "unknown continuation mode `{other}` (expected left-right, right-left or uni)"
            ))),
        }
    }
}

/// The seed embedded in its generated surroundings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransplantContext {
    pub preceding: String,
    pub original: String,
    pub subsequent: String,
    pub mode: ContinuationMode,
}

/// Settings shared by the LLM-driven augmenters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k_per_seed: u32,
    pub mode: ContinuationMode,
    pub rng_seed: u64,
    pub provider: String,
    pub model: String,
    /// Placeholder for `<text_type>`, e.g. "sentence" or "question".
    pub text_type: String,
    /// Placeholder for `<label_type>`, e.g. "sentiment".
    pub label_type: String,
    /// Attempts per chain before a variant is recorded as failed.
    pub max_attempts: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Repeat-run index; folded into prompt nonces so repeated runs draw fresh variants.
    pub run_index: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k_per_seed: 3,
            mode: ContinuationMode::ForwardFirst,
            rng_seed: 0,
            provider: "mock".to_string(),
            model: "mock".to_string(),
            text_type: "sentence".to_string(),
            label_type: "label".to_string(),
            max_attempts: 3,
            temperature: 0.7,
            max_tokens: 512,
            run_index: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, task: TaskType) -> Result<(), ConfigError> {
        if self.k_per_seed < 1 {
            return Err(ConfigError::Invalid("k_per_seed must be at least 1".into()));
        }
        if self.max_attempts < 1 {
            return Err(ConfigError::Invalid("max_attempts must be at least 1".into()));
        }
        if self.text_type.trim().is_empty() {
            return Err(ConfigError::Invalid("text_type must be non-empty".into()));
        }
        if task.is_labeled() && self.label_type.trim().is_empty() {
            return Err(ConfigError::Invalid("label_type must be non-empty for labeled tasks".into()));
        }
        Ok(())
    }
}

/// What went wrong with one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateId,
    EmptyId,
    EmptyText,
    TaskMismatch { expected: TaskType, found: TaskType },
    MissingLabel,
    WrongLabelKind,
    LengthMismatch { tokens: usize, tags: usize },
    UnknownClass(String),
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::DuplicateId => write!(f, "duplicate id"),
            ViolationKind::EmptyId => write!(f, "empty id"),
            ViolationKind::EmptyText => write!(f, "text is empty after trimming"),
            ViolationKind::TaskMismatch { expected, found } => {
                write!(f, "task {found} differs from dataset task {expected}")
            }
            ViolationKind::MissingLabel => write!(f, "missing label"),
            ViolationKind::WrongLabelKind => write!(f, "label kind does not match task"),
            ViolationKind::LengthMismatch { tokens, tags } => {
                write!(f, "{tokens} tokens but {tags} tags")
            }
            ViolationKind::UnknownClass(c) => write!(f, "class `{c}` not in label set"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub sample_id: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{}: {}", v.sample_id, v.kind)?;
        }
        Ok(())
    }
}

/// Checks every sample invariant. The dataset task is taken from the first sample.
pub fn validate_dataset(samples: &[SeedSample]) -> ValidationReport {
    validate_dataset_with_labels(samples, None)
}

/// Like [`validate_dataset`], additionally checking class names against a declared label set.
pub fn validate_dataset_with_labels(samples: &[SeedSample], label_set: Option<&[String]>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let Some(first) = samples.first() else {
        return report;
    };
    let task = first.task;
    let mut seen = HashSet::new();
    let mut push = |id: &str, kind| {
        report.violations.push(Violation { sample_id: id.to_string(), kind })
    };

    for s in samples {
        if s.id.is_empty() {
            push(&s.id, ViolationKind::EmptyId);
        } else if !seen.insert(s.id.as_str()) {
            push(&s.id, ViolationKind::DuplicateId);
        }
        if s.text.trim().is_empty() {
            push(&s.id, ViolationKind::EmptyText);
        }
        if s.task != task {
            push(&s.id, ViolationKind::TaskMismatch { expected: task, found: s.task });
        }
        match (s.task, &s.label) {
            (_, None) => push(&s.id, ViolationKind::MissingLabel),
            (TaskType::Classification, Some(LabelPayload::Class(c))) => {
                if let Some(set) = label_set {
                    if !set.iter().any(|l| l == c) {
                        push(&s.id, ViolationKind::UnknownClass(c.clone()));
                    }
                }
            }
            (TaskType::QuestionAnswering, Some(LabelPayload::Answer(_))) => {}
            (TaskType::NamedEntityRecognition, Some(LabelPayload::Iob { tokens, tags })) => {
                if tokens.len() != tags.len() {
                    push(&s.id, ViolationKind::LengthMismatch { tokens: tokens.len(), tags: tags.len() });
                }
            }
            _ => push(&s.id, ViolationKind::WrongLabelKind),
        }
    }
    report
}

/// Sorted, de-duplicated class names present in a classification dataset.
pub fn label_set(samples: &[SeedSample]) -> Vec<String> {
    let mut labels: Vec<String> = samples.iter().filter_map(|s| s.class_name().map(str::to_string)).collect();
    labels.sort();
    labels.dedup();
    labels
}
