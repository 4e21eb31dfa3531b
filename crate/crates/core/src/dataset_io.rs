//! Dataset readers and writers (JSON Lines, tab-separated, CoNLL) and stratified subsampling.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AugmentedSample, IobTag, LabelPayload, SeedSample, TaskType};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message} (expected {expected})")]
    Malformed { path: PathBuf, line: usize, message: String, expected: &'static str },
    #[error("{path}:{line}: unknown IOB tag `{tag}`")]
    UnknownTag { path: PathBuf, line: usize, tag: String },
    #[error("CoNLL format requires the ner task, got {0}")]
    FormatTaskMismatch(TaskType),
    #[error("class `{class}` has {available} samples, {requested} requested")]
    InsufficientClass { class: String, available: usize, requested: usize },
    #[error("dataset has {available} samples, {requested} requested")]
    InsufficientTotal { available: usize, requested: usize },
    #[error("sample `{0}` has no class label")]
    MissingClass(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("cannot write sample `{id}`: {message}")]
    Unwritable { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    JsonLines,
    TabSeparated,
    Conll,
}

impl DatasetFormat {
    /// `.jsonl`/`.json` → JSON Lines, `.tsv` → tab-separated, `.conll`/`.txt` → CoNLL.
    pub fn from_extension(path: &Path) -> Option<DatasetFormat> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "jsonl" | "json" | "ndjson" => Some(DatasetFormat::JsonLines),
            "tsv" => Some(DatasetFormat::TabSeparated),
            "conll" | "txt" | "iob" => Some(DatasetFormat::Conll),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub format: DatasetFormat,
    pub task: TaskType,
}

impl DatasetFile {
    pub fn new(path: impl Into<PathBuf>, format: DatasetFormat, task: TaskType) -> Result<Self, DatasetError> {
        if format == DatasetFormat::Conll && task != TaskType::NamedEntityRecognition {
            return Err(DatasetError::FormatTaskMismatch(task));
        }
        Ok(DatasetFile { path: path.into(), format, task })
    }

    /// Infers the format from the file extension, falling back to JSON Lines.
    pub fn infer(path: impl Into<PathBuf>, task: TaskType) -> Result<Self, DatasetError> {
        let path = path.into();
        let format = DatasetFormat::from_extension(&path).unwrap_or(DatasetFormat::JsonLines);
        DatasetFile::new(path, format, task)
    }

    fn stem(&self) -> String {
        self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("sample").to_string()
    }
}

/// Label fields shared by seed and augmented records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct LabelFields {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tags: Option<Vec<IobTag>>,
}

impl LabelFields {
    fn from_payload(label: &Option<LabelPayload>) -> Self {
        match label {
            None => LabelFields::default(),
            Some(LabelPayload::Class(c)) => LabelFields { label: Some(c.clone()), ..Default::default() },
            Some(LabelPayload::Answer(a)) => LabelFields { answer: Some(a.clone()), ..Default::default() },
            Some(LabelPayload::Iob { tokens, tags }) => LabelFields {
                tokens: Some(tokens.clone()),
                tags: Some(tags.clone()),
                ..Default::default()
            },
        }
    }

    fn into_payload(self, task: TaskType) -> Option<LabelPayload> {
        match task {
            TaskType::Classification => self.label.map(LabelPayload::Class),
            TaskType::QuestionAnswering => self.answer.or(self.label).map(LabelPayload::Answer),
            TaskType::NamedEntityRecognition => match (self.tokens, self.tags) {
                (Some(tokens), Some(tags)) => Some(LabelPayload::Iob { tokens, tags }),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<TaskType>,
    #[serde(flatten)]
    label: LabelFields,
}

#[derive(Debug, Serialize, Deserialize)]
struct AugmentedRecord {
    seed_id: String,
    index: u32,
    method: String,
    text: String,
    #[serde(flatten)]
    label: LabelFields,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Reads every record of a dataset file.
pub fn read_dataset(file: &DatasetFile) -> Result<Vec<SeedSample>, DatasetError> {
    let body = fs::read_to_string(&file.path).map_err(io_err(&file.path))?;
    match file.format {
        DatasetFormat::JsonLines => parse_jsonl(file, &body),
        DatasetFormat::TabSeparated => parse_tsv(file, &body),
        DatasetFormat::Conll => parse_conll(file, &body),
    }
}

fn parse_jsonl(file: &DatasetFile, body: &str) -> Result<Vec<SeedSample>, DatasetError> {
    let stem = file.stem();
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SeedRecord = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            path: file.path.clone(),
            line: line_no,
            message: e.to_string(),
            expected: "a JSON object with `text` and task-specific label fields",
        })?;
        if let Some(task) = record.task {
            if task != file.task {
                return Err(DatasetError::Malformed {
                    path: file.path.clone(),
                    line: line_no,
                    message: format!("record task {task} differs from dataset task {}", file.task),
                    expected: "a record of the dataset's task",
                });
            }
        }
        out.push(SeedSample {
            id: record.id.unwrap_or_else(|| format!("{stem}-{line_no}")),
            text: record.text,
            label: record.label.into_payload(file.task),
            task: file.task,
        });
    }
    Ok(out)
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn is_header(cols: &[&str]) -> bool {
    cols.last().is_some_and(|c| matches!(c.trim().to_ascii_lowercase().as_str(), "label" | "answer"))
}

// Classification: `[id\t]text\tlabel`. QA: `[id\t]context\tquestion\tanswer`.
fn parse_tsv(file: &DatasetFile, body: &str) -> Result<Vec<SeedSample>, DatasetError> {
    let stem = file.stem();
    let (bare, with_id, expected) = match file.task {
        TaskType::Classification => (2, 3, "`text<TAB>label` or `id<TAB>text<TAB>label`"),
        TaskType::QuestionAnswering => {
            (3, 4, "`context<TAB>question<TAB>answer` or `id<TAB>context<TAB>question<TAB>answer`")
        }
        TaskType::NamedEntityRecognition => {
            return Err(DatasetError::Malformed {
                path: file.path.clone(),
                line: 0,
                message: "tab-separated files cannot hold NER data".into(),
                expected: "CoNLL or JSON Lines for NER",
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if i == 0 && is_header(&cols) {
            continue;
        }
        let (id, fields) = if cols.len() == with_id {
            (unescape_field(cols[0]), &cols[1..])
        } else if cols.len() == bare {
            (format!("{stem}-{line_no}"), &cols[..])
        } else {
            return Err(DatasetError::Malformed {
                path: file.path.clone(),
                line: line_no,
                message: format!("found {} columns", cols.len()),
                expected,
            });
        };
        let sample = match file.task {
            TaskType::Classification => SeedSample {
                id,
                text: unescape_field(fields[0]),
                label: Some(LabelPayload::Class(unescape_field(fields[1].trim()))),
                task: file.task,
            },
            _ => SeedSample::question_answering(
                id,
                &unescape_field(fields[0]),
                &unescape_field(fields[1]),
                unescape_field(fields[2]),
            ),
        };
        out.push(sample);
    }
    Ok(out)
}

const CONLL_ID_PREFIX: &str = "# id = ";

fn parse_conll(file: &DatasetFile, body: &str) -> Result<Vec<SeedSample>, DatasetError> {
    let stem = file.stem();
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut pending_id: Option<String> = None;
    let mut start_line = 0;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<IobTag>, id: &mut Option<String>, start: usize| {
        if tokens.is_empty() {
            return;
        }
        let id = id.take().unwrap_or_else(|| format!("{stem}-{start}"));
        out.push(SeedSample::ner(id, std::mem::take(tokens), std::mem::take(tags)));
    };

    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, &mut pending_id, start_line);
            continue;
        }
        if let Some(id) = trimmed.strip_prefix(CONLL_ID_PREFIX) {
            flush(&mut tokens, &mut tags, &mut pending_id, start_line);
            pending_id = Some(id.to_string());
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split([' ', '\t']).filter(|c| !c.is_empty()).collect();
        if cols.len() < 2 {
            return Err(DatasetError::Malformed {
                path: file.path.clone(),
                line: line_no,
                message: format!("line `{trimmed}` has a single column"),
                expected: "`token<sep>...<sep>tag`",
            });
        }
        let tag_str = cols[cols.len() - 1];
        let tag = tag_str.parse::<IobTag>().map_err(|_| DatasetError::UnknownTag {
            path: file.path.clone(),
            line: line_no,
            tag: tag_str.to_string(),
        })?;
        if tokens.is_empty() {
            start_line = line_no;
        }
        tokens.push(cols[0].to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, &mut pending_id, start_line);
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// Writes samples in the file's format; `read_dataset` on the result yields the same samples.
pub fn write_dataset(samples: &[SeedSample], file: &DatasetFile) -> Result<(), DatasetError> {
    let mut buf = String::new();
    for s in samples {
        match file.format {
            DatasetFormat::JsonLines => {
                let record = SeedRecord {
                    id: Some(s.id.clone()),
                    text: s.text.clone(),
                    task: Some(s.task),
                    label: LabelFields::from_payload(&s.label),
                };
                buf.push_str(&serde_json::to_string(&record).expect("record serializes"));
                buf.push('\n');
            }
            DatasetFormat::TabSeparated => buf.push_str(&tsv_line(s)?),
            DatasetFormat::Conll => {
                let Some(LabelPayload::Iob { tokens, tags }) = &s.label else {
                    return Err(DatasetError::Unwritable { id: s.id.clone(), message: "no IOB payload".into() });
                };
                if tokens.len() != tags.len() {
                    return Err(DatasetError::Unwritable {
                        id: s.id.clone(),
                        message: "token and tag counts differ".into(),
                    });
                }
                buf.push_str(CONLL_ID_PREFIX);
                buf.push_str(&s.id);
                buf.push('\n');
                for (token, tag) in tokens.iter().zip(tags) {
                    buf.push_str(token);
                    buf.push(' ');
                    buf.push_str(tag.as_str());
                    buf.push('\n');
                }
                buf.push('\n');
            }
        }
    }
    let mut w = create(&file.path)?;
    w.write_all(buf.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&file.path))
}

fn tsv_line(s: &SeedSample) -> Result<String, DatasetError> {
    match (&s.task, &s.label) {
        (TaskType::Classification, Some(LabelPayload::Class(c))) => {
            Ok(format!("{}\t{}\t{}\n", escape_field(&s.id), escape_field(&s.text), escape_field(c)))
        }
        (TaskType::QuestionAnswering, Some(LabelPayload::Answer(a))) => {
            let (context, question) = s.text.rsplit_once('\n').unwrap_or(("", &s.text));
            Ok(format!(
                "{}\t{}\t{}\t{}\n",
                escape_field(&s.id),
                escape_field(context),
                escape_field(question),
                escape_field(a)
            ))
        }
        _ => Err(DatasetError::Unwritable { id: s.id.clone(), message: "label does not fit the TSV layout".into() }),
    }
}

/// Writes augmented samples as JSON Lines, one record per variant.
pub fn write_augmented(samples: &[AugmentedSample], path: &Path) -> Result<(), DatasetError> {
    let mut buf = String::new();
    for s in samples {
        let record = AugmentedRecord {
            seed_id: s.seed_id.clone(),
            index: s.index,
            method: s.method.clone(),
            text: s.text.clone(),
            label: LabelFields::from_payload(&s.label),
            provenance: s.provenance.clone(),
        };
        buf.push_str(&serde_json::to_string(&record).expect("record serializes"));
        buf.push('\n');
    }
    let mut w = create(path)?;
    w.write_all(buf.as_bytes()).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_augmented(path: &Path, task: TaskType) -> Result<Vec<AugmentedSample>, DatasetError> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: AugmentedRecord = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
            expected: "an augmented-sample JSON object",
        })?;
        out.push(AugmentedSample {
            seed_id: r.seed_id,
            text: r.text,
            method: r.method,
            index: r.index,
            label: r.label.into_payload(task),
            provenance: r.provenance,
        });
    }
    Ok(out)
}

/// Drops samples whose text has more than `max_tokens` whitespace-separated tokens.
pub fn filter_max_tokens(samples: Vec<SeedSample>, max_tokens: usize) -> Vec<SeedSample> {
    samples.into_iter().filter(|s| s.text.split_whitespace().count() <= max_tokens).collect()
}

/// Deterministic subsample: `per_class` of each class for classification, `total` otherwise.
///
/// Candidates are sorted by id before drawing, and classes are visited in sorted
/// name order with one RNG stream, so the result does not depend on input order.
pub fn subsample(
    samples: &[SeedSample],
    task: TaskType,
    per_class: usize,
    total: usize,
    rng_seed: u64,
) -> Result<Vec<SeedSample>, DatasetError> {
    let mut ids = HashSet::new();
    for s in samples {
        if !ids.insert(s.id.as_str()) {
            return Err(DatasetError::DuplicateId(s.id.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let draw = |pool: &mut Vec<&SeedSample>, count: usize, rng: &mut ChaCha8Rng| -> Vec<SeedSample> {
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), count).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pool[i].clone()).collect()
    };

    match task {
        TaskType::Classification => {
            let mut by_class: BTreeMap<&str, Vec<&SeedSample>> = BTreeMap::new();
            for s in samples {
                let class = s.class_name().ok_or_else(|| DatasetError::MissingClass(s.id.clone()))?;
                by_class.entry(class).or_default().push(s);
            }
            if let Some((class, pool)) = by_class.iter().find(|(_, pool)| pool.len() < per_class) {
                return Err(DatasetError::InsufficientClass {
                    class: class.to_string(),
                    available: pool.len(),
                    requested: per_class,
                });
            }
            let mut out = Vec::with_capacity(per_class * by_class.len());
            for pool in by_class.values_mut() {
                out.extend(draw(pool, per_class, &mut rng));
            }
            Ok(out)
        }
        _ => {
            if samples.len() < total {
                return Err(DatasetError::InsufficientTotal { available: samples.len(), requested: total });
            }
            let mut pool: Vec<&SeedSample> = samples.iter().collect();
            Ok(draw(&mut pool, total, &mut rng))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn conll_sentence_becomes_one_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "train.conll", "EU B-ORG\nrejects O\n\n");
        let file = DatasetFile::new(p, DatasetFormat::Conll, TaskType::NamedEntityRecognition).unwrap();
        let samples = read_dataset(&file).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(
            samples[0].label,
            Some(LabelPayload::Iob { tokens: vec!["EU".into(), "rejects".into()], tags: vec![IobTag::BOrg, IobTag::O] })
        );
        assert_eq!(samples[0].id, "train-1");
        assert_eq!(samples[0].text, "EU rejects");
    }

    #[test]
    fn conll_four_column_layout_and_docstart() {
        let dir = tempfile::tempdir().unwrap();
        let body = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\n\nPeter NNP B-NP B-PER\n";
        let p = write_tmp(&dir, "c.txt", body);
        let file = DatasetFile::new(p, DatasetFormat::Conll, TaskType::NamedEntityRecognition).unwrap();
        let samples = read_dataset(&file).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].text, "Peter");
    }

    #[test]
    fn conll_unknown_tag_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "bad.conll", "EU B-FOO\n");
        let file = DatasetFile::new(p, DatasetFormat::Conll, TaskType::NamedEntityRecognition).unwrap();
        match read_dataset(&file) {
            Err(DatasetError::UnknownTag { tag, line, .. }) => {
                assert_eq!(tag, "B-FOO");
                assert_eq!(line, 1);
            }
            other => panic!("expected unknown tag, got {other:?}"),
        }
    }

    #[test]
    fn conll_requires_ner() {
        assert!(matches!(
            DatasetFile::new("x.conll", DatasetFormat::Conll, TaskType::Classification),
            Err(DatasetError::FormatTaskMismatch(_))
        ));
    }

    #[test]
    fn tsv_classification_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "sst.tsv", "great movie\tpositive\n");
        let file = DatasetFile::new(p, DatasetFormat::TabSeparated, TaskType::Classification).unwrap();
        let samples = read_dataset(&file).unwrap();
        assert_eq!(samples, vec![SeedSample::classification("sst-1", "great movie", "positive")]);
    }

    #[test]
    fn tsv_malformed_line_names_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "sst.tsv", "a\tpositive\nonly one column\n");
        let file = DatasetFile::new(p, DatasetFormat::TabSeparated, TaskType::Classification).unwrap();
        let err = read_dataset(&file).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sst.tsv:2"), "{msg}");
        assert!(msg.contains("text<TAB>label"), "{msg}");
    }

    #[test]
    fn jsonl_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "d.jsonl", "{\"text\": \"ok\", \"label\": \"a\"}\nnot json\n");
        let file = DatasetFile::new(p, DatasetFormat::JsonLines, TaskType::Classification).unwrap();
        assert!(matches!(read_dataset(&file), Err(DatasetError::Malformed { line: 2, .. })));
    }

    #[test]
    fn empty_write_gives_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let file =
            DatasetFile::new(dir.path().join("e.jsonl"), DatasetFormat::JsonLines, TaskType::Classification).unwrap();
        write_dataset(&[], &file).unwrap();
        assert_eq!(fs::read_to_string(&file.path).unwrap(), "");
        assert!(read_dataset(&file).unwrap().is_empty());
    }

    #[test]
    fn three_lines_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            SeedSample::classification("a", "one", "x"),
            SeedSample::classification("b", "two", "y"),
            SeedSample::classification("c", "three", "x"),
        ];
        for format in [DatasetFormat::JsonLines, DatasetFormat::TabSeparated] {
            let file = DatasetFile::new(dir.path().join("o.out"), format, TaskType::Classification).unwrap();
            write_dataset(&samples, &file).unwrap();
            assert_eq!(fs::read_to_string(&file.path).unwrap().lines().count(), 3);
            assert_eq!(read_dataset(&file).unwrap(), samples);
        }
    }

    #[test]
    fn ner_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![SeedSample::ner(
            "s1",
            vec!["EU".into(), "rejects".into(), "German".into()],
            vec![IobTag::BOrg, IobTag::O, IobTag::BMisc],
        )];
        for format in [DatasetFormat::Conll, DatasetFormat::JsonLines] {
            let file = DatasetFile::new(dir.path().join("n.out"), format, TaskType::NamedEntityRecognition).unwrap();
            write_dataset(&samples, &file).unwrap();
            assert_eq!(read_dataset(&file).unwrap(), samples);
        }
    }

    #[test]
    fn qa_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![SeedSample::question_answering("q1", "Paris is in France.", "Where is Paris?", "France")];
        let file =
            DatasetFile::new(dir.path().join("qa.tsv"), DatasetFormat::TabSeparated, TaskType::QuestionAnswering)
                .unwrap();
        write_dataset(&samples, &file).unwrap();
        assert_eq!(read_dataset(&file).unwrap(), samples);
    }

    fn two_class(n: usize) -> Vec<SeedSample> {
        (0..n)
            .map(|i| {
                SeedSample::classification(
                    format!("s{i:03}"),
                    format!("text {i}"),
                    if i % 2 == 0 { "positive" } else { "negative" },
                )
            })
            .collect()
    }

    #[test]
    fn subsample_ten_per_class() {
        let out = subsample(&two_class(60), TaskType::Classification, 10, 0, 7).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(out.iter().filter(|s| s.class_name() == Some("positive")).count(), 10);
        assert_eq!(out.iter().filter(|s| s.class_name() == Some("negative")).count(), 10);
    }

    #[test]
    fn subsample_zero_and_errors() {
        assert!(subsample(&two_class(10), TaskType::Classification, 0, 0, 1).unwrap().is_empty());
        match subsample(&two_class(10), TaskType::Classification, 6, 0, 1) {
            Err(DatasetError::InsufficientClass { class, available: 5, requested: 6 }) => {
                assert_eq!(class, "negative")
            }
            other => panic!("{other:?}"),
        }
        let qa: Vec<_> = (0..3).map(|i| SeedSample::question_answering(format!("q{i}"), "c", "q", "a")).collect();
        assert!(matches!(
            subsample(&qa, TaskType::QuestionAnswering, 0, 50, 1),
            Err(DatasetError::InsufficientTotal { available: 3, requested: 50 })
        ));
    }

    #[test]
    fn subsample_is_independent_of_input_order() {
        let data = two_class(40);
        let mut reversed = data.clone();
        reversed.reverse();
        let a = subsample(&data, TaskType::Classification, 5, 0, 99).unwrap();
        let b = subsample(&reversed, TaskType::Classification, 5, 0, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_token_filter() {
        let s = vec![
            SeedSample::classification("a", "one two three", "x"),
            SeedSample::classification("b", "one", "x"),
        ];
        let kept = filter_max_tokens(s, 2);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "b");
    }

    proptest! {
        #[test]
        fn subsample_reproducible_without_duplicates(seed in any::<u64>(), n in 20usize..80, per in 0usize..10) {
            let data = two_class(n);
            let a = subsample(&data, TaskType::Classification, per, 0, seed).unwrap();
            let b = subsample(&data, TaskType::Classification, per, 0, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let ids: HashSet<_> = a.iter().map(|s| s.id.clone()).collect();
            prop_assert_eq!(ids.len(), a.len());
            prop_assert_eq!(a.len(), 2 * per);
        }

        #[test]
        fn jsonl_round_trip(texts in proptest::collection::vec("[a-zA-Z \\t\"\\\\é]{1,20}", 0..8)) {
            let dir = tempfile::tempdir().unwrap();
            let samples: Vec<_> = texts.iter().enumerate()
                .map(|(i, t)| SeedSample::classification(format!("id{i}"), t.clone(), "lbl"))
                .collect();
            for format in [DatasetFormat::JsonLines, DatasetFormat::TabSeparated] {
                let file = DatasetFile::new(dir.path().join("p.out"), format, TaskType::Classification).unwrap();
                write_dataset(&samples, &file).unwrap();
                prop_assert_eq!(&read_dataset(&file).unwrap(), &samples);
            }
        }
    }

    proptest! {
        #[test]
        fn augmented_round_trip(
            rows in proptest::collection::vec(("[a-z0-9]{1,6}", "[a-zA-Z ,.\"é]{1,30}", 0u32..5, proptest::option::of("[a-z]{1,6}")), 0..8),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let samples: Vec<AugmentedSample> = rows
                .into_iter()
                .map(|(seed, text, index, label)| AugmentedSample {
                    seed_id: seed,
                    text,
                    method: "ttr".into(),
                    index,
                    label: label.map(LabelPayload::Class),
                    provenance: [("mode".to_string(), "right-left".to_string())].into_iter().collect(),
                })
                .collect();
            let path = dir.path().join("aug.jsonl");
            write_augmented(&samples, &path).unwrap();
            prop_assert_eq!(read_augmented(&path, TaskType::Classification).unwrap(), samples);
        }
    }
}
