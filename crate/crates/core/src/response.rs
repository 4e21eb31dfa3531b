//! Tolerant parsing of labelled sections in model responses.
//!
//! A section starts on a line of the form `<label>: body`, where the label may be
//! wrapped in markdown emphasis, prefixed by list markers or headings, and written in
//! any case. The body runs until the next recognised label or a blank line after
//! some body text. Bodies are stripped of surrounding brackets, quotes and emphasis.

use crate::error::ParseFailure;

/// Version tag of the label synonym table below; recorded in provenance.
pub const PARSE_TABLE_VERSION: &str = "sections-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    Preceding,
    Original,
    Subsequent,
    Middle,
    NewText,
    Sentence,
    Entities,
    Labels,
    Ids,
}

impl Section {
    pub fn name(self) -> &'static str {
        match self {
            Section::Preceding => "Preceding Sentence",
            Section::Original => "Original Text",
            Section::Subsequent => "Subsequent Sentence",
            Section::Middle => "Middle Sentence",
            Section::NewText => "New Text",
            Section::Sentence => "sentence",
            Section::Entities => "entities",
            Section::Labels => "labels",
            Section::Ids => "IDs",
        }
    }
}

/// Lower-cased label spellings accepted for each section.
pub const LABEL_SYNONYMS: &[(Section, &[&str])] = &[
    (Section::Preceding, &["preceding sentence", "preceding text", "preceding context", "preceding"]),
    (Section::Subsequent, &["subsequent sentence", "subsequent text", "subsequent context", "subsequent", "following sentence"]),
    (Section::Middle, &["middle sentence", "middle text", "middle", "new middle sentence"]),
    (Section::NewText, &["new text"]),
    (Section::Sentence, &["sentence"]),
    (Section::Entities, &["entities", "tokens"]),
    (Section::Labels, &["labels", "bio labels", "tags"]),
    (Section::Ids, &["ids", "label ids", "id"]),
];

fn classify(label: &str) -> Option<Section> {
    let norm: String = label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if norm.is_empty() {
        return None;
    }
    for (section, names) in LABEL_SYNONYMS {
        if names.contains(&norm.as_str()) {
            return Some(*section);
        }
    }
    // "Original Text", "Original question", "Original sentence pair", ...
    if norm == "original" || (norm.starts_with("original ") && norm.split(' ').count() <= 4) {
        return Some(Section::Original);
    }
    None
}

const MARKUP: &[char] = &['*', '_', '`', '#', '>', '~'];
const EMPHASIS: &[char] = &['*', '_', '`'];

fn strip_line_prefix(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s;
        s = s.trim_start_matches(MARKUP).trim_start();
        if let Some(rest) = s.strip_prefix("- ").or_else(|| s.strip_prefix("• ")) {
            s = rest.trim_start();
        }
        // list numbering such as "1." or "2)"
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 && digits < 3 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
                s = r.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Splits a line into (section, inline body) when it opens a recognised section.
fn section_line(line: &str) -> Option<(Section, &str)> {
    let s = strip_line_prefix(line);
    let colon = s.find(':')?;
    let label = s[..colon].trim_matches(|c: char| MARKUP.contains(&c) || c.is_whitespace());
    let label = label.trim_start_matches('[').trim_end_matches(']');
    let section = classify(label)?;
    let body = s[colon + 1..].trim_start_matches(|c: char| MARKUP.contains(&c) || c.is_whitespace());
    Some((section, body))
}

/// Removes surrounding brackets, quotes and emphasis, repeatedly.
pub fn clean_body(body: &str) -> String {
    let mut s = body.trim();
    loop {
        let before = s;
        for (open, close) in [("**", "**"), ("__", "__"), ("*", "*"), ("_", "_"), ("`", "`")] {
            if s.len() >= open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len()..s.len() - close.len()].trim();
            }
        }
        s = s.trim_start_matches(EMPHASIS).trim_end_matches(EMPHASIS).trim();
        for (open, close) in [('[', ']'), ('"', '"'), ('\u{201c}', '\u{201d}'), ('\'', '\'')] {
            if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
                let inner = &s[open.len_utf8()..s.len() - close.len_utf8()];
                // "[A] and [B]" is not a bracketed body
                if !inner.contains(open) && !inner.contains(close) {
                    s = inner.trim();
                }
            }
        }
        if s == before {
            return s.to_string();
        }
    }
}

/// All sections in order of appearance, with raw (uncleaned) bodies.
pub fn split_sections(raw: &str) -> Vec<(Section, String)> {
    let mut out: Vec<(Section, String)> = Vec::new();
    let mut open = false;
    for line in raw.lines() {
        if let Some((section, body)) = section_line(line) {
            out.push((section, body.trim().to_string()));
            open = true;
            continue;
        }
        let Some((_, body)) = out.last_mut().filter(|_| open) else {
            continue;
        };
        let text = line.trim();
        if text.is_empty() {
            if !body.is_empty() {
                open = false;
            }
            continue;
        }
        if !body.is_empty() {
            body.push('\n');
        }
        body.push_str(text);
    }
    out
}

/// The cleaned body of the first occurrence of `section`.
pub fn find_section(sections: &[(Section, String)], section: Section) -> Option<String> {
    sections.iter().find(|(s, _)| *s == section).map(|(_, b)| clean_body(b))
}

/// Like [`find_section`] but a missing or empty section is a [`ParseFailure`].
pub fn require_section(sections: &[(Section, String)], section: Section) -> Result<String, ParseFailure> {
    let body = find_section(sections, section).ok_or_else(|| ParseFailure::MissingSection(section.name().into()))?;
    if body.is_empty() {
        return Err(ParseFailure::EmptySection(section.name().into()));
    }
    Ok(body)
}

/// Parses a Python-style list literal such as `['EU', 'rejects']` or `[B-ORG, O]`.
pub fn parse_list_literal(s: &str) -> Result<Vec<String>, ParseFailure> {
    let s = s.trim().trim_matches('`').trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| ParseFailure::Malformed(format!("expected a bracketed list, got `{s}`")))?;
    let mut items = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        let mut item = String::new();
        if c == '\'' || c == '"' {
            let quote = c;
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => {
                        if let Some(escaped) = chars.next() {
                            item.push(escaped);
                        }
                    }
                    c if c == quote => {
                        closed = true;
                        break;
                    }
                    c => item.push(c),
                }
            }
            if !closed {
                return Err(ParseFailure::Malformed("unterminated quoted list item".into()));
            }
            while chars.peek().is_some_and(|c| c.is_whitespace()) {
                chars.next();
            }
            match chars.next() {
                None | Some(',') => {}
                Some(other) => return Err(ParseFailure::Malformed(format!("unexpected `{other}` after list item"))),
            }
        } else {
            for c in chars.by_ref() {
                if c == ',' {
                    break;
                }
                item.push(c);
            }
            item = item.trim().to_string();
            if item.is_empty() {
                return Err(ParseFailure::Malformed("empty list item".into()));
            }
        }
        items.push(item);
    }
    Ok(items)
}
