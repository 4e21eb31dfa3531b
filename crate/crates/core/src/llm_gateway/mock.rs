//! Scripted provider for tests and offline runs.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use regex::Regex;
use sha2::{Digest, Sha256};

use super::{CompletionRequest, Provider, ProviderError};
use crate::error::ConfigError;

/// Selects the prompts a rule applies to.
#[derive(Clone)]
pub enum Matcher {
    Any,
    Substring(String),
    Regex(Regex),
    /// Every inner matcher must match.
    All(Vec<Matcher>),
}

impl Matcher {
    pub fn substring(s: impl Into<String>) -> Self {
        Matcher::Substring(s.into())
    }

    pub fn regex(pattern: &str) -> Result<Self, regex::Error> {
        Regex::new(pattern).map(Matcher::Regex)
    }

    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Substring(s) => prompt.contains(s.as_str()),
            Matcher::Regex(r) => r.is_match(prompt),
            Matcher::All(ms) => ms.iter().all(|m| m.matches(prompt)),
        }
    }
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Any => write!(f, "Any"),
            Matcher::Substring(s) => write!(f, "Substring({s:?})"),
            Matcher::Regex(r) => write!(f, "Regex({:?})", r.as_str()),
            Matcher::All(ms) => f.debug_list().entries(ms).finish(),
        }
    }
}

type ReplyFn = Arc<dyn Fn(&str) -> String + Send + Sync>;

/// What a matching rule answers.
#[derive(Clone)]
pub enum Reply {
    Text(String),
    Fail { status: u16, transient: bool },
    /// Deterministic well-formed reply derived from the prompt, see [`synthetic_reply`].
    Synthetic,
    Func(ReplyFn),
}

impl Reply {
    pub fn text(s: impl Into<String>) -> Self {
        Reply::Text(s.into())
    }

    pub fn func(f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Reply::Func(Arc::new(f))
    }
}

impl fmt::Debug for Reply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reply::Text(s) => write!(f, "Text({s:?})"),
            Reply::Fail { status, transient } => write!(f, "Fail({status}, transient={transient})"),
            Reply::Synthetic => write!(f, "Synthetic"),
            Reply::Func(_) => write!(f, "Func"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockRule {
    pub matcher: Matcher,
    pub reply: Reply,
}

impl MockRule {
    pub fn new(matcher: Matcher, reply: Reply) -> Self {
        MockRule { matcher, reply }
    }
}

/// Answers each prompt with the first matching rule.
pub struct MockProvider {
    name: String,
    rules: Vec<MockRule>,
    fallback: Option<String>,
    calls: AtomicUsize,
    transcript: Mutex<Vec<(String, String)>>,
}

impl MockProvider {
    /// Strict mock: unmatched prompts fail.
    pub fn new(rules: Vec<MockRule>) -> Result<Self, ConfigError> {
        if rules.is_empty() {
            return Err(ConfigError::Invalid("mock script has no rules".into()));
        }
        Ok(MockProvider {
            name: "mock".into(),
            rules,
            fallback: None,
            calls: AtomicUsize::new(0),
            transcript: Mutex::new(Vec::new()),
        })
    }

    /// A mock that answers every prompt with [`synthetic_reply`].
    pub fn synthetic() -> Self {
        MockProvider::new(vec![MockRule::new(Matcher::Any, Reply::Synthetic)]).expect("one rule")
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Unmatched prompts get `text` instead of an error.
    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// (prompt, reply) pairs in call order; failed calls record `<error>`.
    pub fn transcript(&self) -> Vec<(String, String)> {
        self.transcript.lock().unwrap().clone()
    }

    fn answer(&self, prompt: &str) -> Result<String, ProviderError> {
        let Some(rule) = self.rules.iter().find(|r| r.matcher.matches(prompt)) else {
            return self.fallback.clone().ok_or_else(|| ProviderError::Fatal {
                status: None,
                message: "mock script has no rule matching the prompt".into(),
            });
        };
        match &rule.reply {
            Reply::Text(t) => Ok(t.clone()),
            Reply::Synthetic => Ok(synthetic_reply(prompt)),
            Reply::Func(f) => Ok(f(prompt)),
            Reply::Fail { status, transient: true } => {
                Err(ProviderError::Transient { status: Some(*status), message: "scripted failure".into() })
            }
            Reply::Fail { status, transient: false } => {
                Err(ProviderError::Fatal { status: Some(*status), message: "scripted failure".into() })
            }
        }
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let result = self.answer(&request.user);
        let recorded = result.as_deref().unwrap_or("<error>").to_string();
        self.transcript.lock().unwrap().push((request.user.clone(), recorded));
        result
    }
}

fn digest(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn between<'a>(haystack: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = haystack.find(start)? + start.len();
    let rest = &haystack[from..];
    let to = rest.find(end).unwrap_or(rest.len());
    Some(rest[..to].trim())
}

/// Text after the first `marker` occurring in `prompt`, up to the end of the same line.
fn after_marker<'a>(prompt: &'a str, marker: &Regex) -> Option<&'a str> {
    marker.find(prompt).map(|m| prompt[m.end()..].lines().next().unwrap_or("").trim())
}

const FILLER: [&str; 12] = [
    "really", "today", "again", "indeed", "still", "now", "perhaps", "truly", "somehow", "lately", "often", "here",
];

fn rework(text: &str, salt: u64) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return FILLER[(salt % FILLER.len() as u64) as usize].to_string();
    }
    let shift = 1 + (salt as usize) % words.len().max(1);
    let mut out: Vec<&str> = words[shift % words.len()..].iter().chain(&words[..shift % words.len()]).copied().collect();
    out.push(FILLER[(salt % FILLER.len() as u64) as usize]);
    out.join(" ")
}

/// Produces a deterministic, well-formed answer to any prompt this crate renders.
///
/// The reply depends only on the prompt text, so nonce lines yield distinct variants.
pub fn synthetic_reply(prompt: &str) -> String {
    let salt = digest(prompt);
    if prompt.contains("Middle Sentence") {
        let original = Regex::new(r"(?m)^2\. Original [^:\n]*: ")
            .ok()
            .and_then(|re| re.find(prompt).map(|m| m.end()))
            .map(|start| {
                let rest = &prompt[start..];
                rest[..rest.find("\n3. Subsequent Sentence:").unwrap_or(rest.len())].trim()
            })
            .unwrap_or("");
        let preceding = between(prompt, "1. Preceding Sentence:", "\n").unwrap_or("");
        let subsequent = between(prompt, "3. Subsequent Sentence:", "\n").unwrap_or("");
        return format!(
            "Preceding Sentence: [{preceding}]\nMiddle Sentence: [{}]\nSubsequent Sentence: [{subsequent}]",
            rework(original, salt).replace('\n', " ")
        );
    }
    if prompt.contains("Subsequent Sentence:") && prompt.contains("The original") {
        let original = Regex::new(r"The original [^:\n]* is: ")
            .ok()
            .and_then(|re| re.find(prompt).map(|m| m.end()))
            .map(|start| {
                let rest = &prompt[start..];
                rest[..rest.find("\nNow please return").unwrap_or(rest.len())].trim()
            })
            .unwrap_or("");
        let words: Vec<&str> = original.split_whitespace().collect();
        let first = words.first().copied().unwrap_or("it");
        let last = words.last().copied().unwrap_or("it").trim_matches(|c: char| !c.is_alphanumeric());
        let filler = FILLER[(salt % FILLER.len() as u64) as usize];
        let subsequent = format!("Subsequent Sentence: [People talked about {last} {filler} afterwards.]");
        if prompt.contains("Preceding Sentence:") {
            return format!(
                "Preceding Sentence: [Someone began with {first} {}.]\nOriginal Text: [{}]\n{subsequent}",
                FILLER[((salt >> 8) % FILLER.len() as u64) as usize],
                original.replace('\n', " ")
            );
        }
        return format!("Original Text: [{}]\n{subsequent}", original.replace('\n', " "));
    }
    if prompt.contains("Candidate label list:") {
        let labels: Vec<&str> = between(prompt, "Candidate label list:", "\n")
            .unwrap_or("")
            .split(',')
            .map(|l| l.trim())
            .filter(|l| !l.is_empty())
            .collect();
        return match labels.len() {
            0 => "unknown".into(),
            n => labels[(salt % n as u64) as usize].to_string(),
        };
    }
    if prompt.contains("BIO-format label") {
        let sentence = between(prompt, "annotation for the following sentence:\n", "\n").unwrap_or("");
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        let mut labels = Vec::with_capacity(tokens.len());
        let mut prev_entity = false;
        for (i, t) in tokens.iter().enumerate() {
            let capital = i > 0 && t.chars().next().is_some_and(char::is_uppercase);
            let tag = match (capital, prev_entity) {
                (true, true) => "I-MISC",
                (true, false) => "B-MISC",
                _ => "O",
            };
            prev_entity = capital;
            labels.push(tag);
        }
        let ids: Vec<&str> = labels
            .iter()
            .map(|l| match *l {
                "B-MISC" => "2",
                "I-MISC" => "7",
                _ => "0",
            })
            .collect();
        let quoted: Vec<String> = tokens.iter().map(|t| format!("'{}'", t.replace('\'', "\\'"))).collect();
        return format!(
            "sentence: {sentence}\nentities: [{}]\nlabels: [{}]\nIDs: [{}]",
            quoted.join(", "),
            labels.join(", "),
            ids.join(", ")
        );
    }
    if let Some(k) = Regex::new(r"Return exactly (\d+) rephrased")
        .ok()
        .and_then(|re| re.captures(prompt))
        .and_then(|c| c[1].parse::<u64>().ok())
    {
        let text = Regex::new(r"(?m)^Original [^:\n]*: ").ok().and_then(|re| after_marker(prompt, &re)).unwrap_or("");
        return (1..=k).map(|i| format!("{i}. {}", rework(text, salt.wrapping_add(i)))).collect::<Vec<_>>().join("\n");
    }
    if prompt.contains("| Label:") {
        let examples: Vec<(&str, &str)> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("Text: "))
            .filter_map(|l| l.rsplit_once(" | Label: "))
            .filter(|(_, label)| !label.starts_with('<'))
            .collect();
        if let Some((text, label)) = examples.first() {
            let other = examples.get(1).map(|e| e.0).unwrap_or(text);
            let a: Vec<&str> = text.split_whitespace().collect();
            let b: Vec<&str> = other.split_whitespace().collect();
            let mixed: Vec<&str> = a[..a.len().div_ceil(2)].iter().chain(&b[b.len() / 2..]).copied().collect();
            return format!("Text: {} | Label: {label}", mixed.join(" "));
        }
    }
    "OK".into()
}
