//! Preference datasets normalized into a single record format.
//!
//! Three public comparison schemas are supported (WebGPT comparisons,
//! HH dialogue pairs, summarize-from-feedback). The adapters in this module
//! are the only place those schemas are known; everything downstream consumes
//! [`PreferenceRecord`]s.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("tied scores ({0})")]
    TieRecord(f64),
    #[error("chosen and rejected transcripts are identical")]
    IdenticalPair,
    #[error("choice {choice} out of range for {n} summaries")]
    ChoiceOutOfRange { choice: i64, n: usize },
    #[error("corpus contains no valid records")]
    EmptyCorpus,
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CorpusError {
    fn malformed(msg: impl Into<String>) -> Self {
        CorpusError::MalformedRecord(msg.into())
    }

    fn kind(&self) -> &'static str {
        match self {
            CorpusError::MalformedRecord(_) => "malformed",
            CorpusError::TieRecord(_) => "tie",
            CorpusError::IdenticalPair => "identical_pair",
            CorpusError::ChoiceOutOfRange { .. } => "choice_out_of_range",
            CorpusError::EmptyCorpus => "empty",
            CorpusError::Line { source, .. } => source.kind(),
            CorpusError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Summary,
    Dialogue,
    Qa,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Summary => "summary",
            Task::Dialogue => "dialogue",
            Task::Qa => "qa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Webgpt,
    Hh,
    Summarize,
    Labeled,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Webgpt => "webgpt",
            Source::Hh => "hh",
            Source::Summarize => "summarize",
            Source::Labeled => "labeled",
            Source::Synthetic => "synthetic",
        })
    }
}

/// One model output with its position in the human ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedOutput {
    pub text: String,
    /// 0 = most preferred.
    pub rank: u32,
    pub raw_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub task: Task,
    pub prompt: String,
    pub outputs: Vec<RatedOutput>,
    pub source: Source,
    /// Set when two outputs share a rank (kept only for evaluation corpora).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tie: bool,
}

impl PreferenceRecord {
    /// Builds a record, assigning its content-derived id and checking invariants.
    pub fn new(
        task: Task,
        source: Source,
        prompt: impl Into<String>,
        outputs: Vec<RatedOutput>,
        tie: bool,
    ) -> Result<Self, CorpusError> {
        let mut record = PreferenceRecord { id: String::new(), task, prompt: prompt.into(), outputs, source, tie };
        record.id = record.content_id();
        record.validate()?;
        Ok(record)
    }

    /// Stable hash over everything except the id itself.
    pub fn content_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source.to_string().as_bytes());
        h.update([0]);
        h.update(self.task.to_string().as_bytes());
        h.update([0]);
        h.update(self.prompt.as_bytes());
        for o in &self.outputs {
            h.update([0]);
            h.update(o.rank.to_le_bytes());
            h.update(o.text.as_bytes());
        }
        hex::encode(&h.finalize()[..12])
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.outputs.len() < 2 {
            return Err(CorpusError::malformed(format!("need at least 2 outputs, got {}", self.outputs.len())));
        }
        if let Some(i) = self.outputs.iter().position(|o| o.text.trim().is_empty()) {
            return Err(CorpusError::malformed(format!("output {i} is empty")));
        }
        let mut ranks: Vec<u32> = self.outputs.iter().map(|o| o.rank).collect();
        ranks.sort_unstable();
        if ranks[0] != 0 {
            return Err(CorpusError::malformed("no output has rank 0"));
        }
        if !self.tie {
            let contiguous = ranks.iter().enumerate().all(|(i, &r)| r as usize == i);
            if !contiguous {
                return Err(CorpusError::malformed(format!(
                    "ranks {ranks:?} are not a permutation of 0..{}",
                    ranks.len()
                )));
            }
        }
        Ok(())
    }

    /// The most preferred output (lowest rank, first on ties).
    pub fn best(&self) -> &RatedOutput {
        self.outputs.iter().min_by_key(|o| o.rank).expect("validated record")
    }

    /// The least preferred output (highest rank, last on ties).
    pub fn worst(&self) -> &RatedOutput {
        self.outputs.iter().rev().max_by_key(|o| o.rank).expect("validated record")
    }

    pub fn best_index(&self) -> usize {
        let best = self.best() as *const RatedOutput;
        self.outputs.iter().position(|o| std::ptr::eq(o, best)).unwrap()
    }
}

/// What to do with records whose outputs are rated equally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    /// Drop ties (training corpora need a strict order).
    #[default]
    Skip,
    /// Keep ties with `tie = true` (evaluation corpora).
    Keep,
}

fn str_field<'a>(obj: &'a Value, key: &str) -> Result<&'a str, CorpusError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(CorpusError::malformed(format!("field `{key}` is not a string"))),
        None => Err(CorpusError::malformed(format!("missing field `{key}`"))),
    }
}

fn num_field(obj: &Value, key: &str) -> Result<f64, CorpusError> {
    obj.get(key)
        .ok_or_else(|| CorpusError::malformed(format!("missing field `{key}`")))?
        .as_f64()
        .ok_or_else(|| CorpusError::malformed(format!("field `{key}` is not a number")))
}

fn parse_object(line: &str) -> Result<Value, CorpusError> {
    let v: Value = serde_json::from_str(line).map_err(|e| CorpusError::malformed(format!("invalid JSON: {e}")))?;
    if !v.is_object() {
        return Err(CorpusError::malformed("line is not a JSON object"));
    }
    Ok(v)
}

fn non_empty(text: &str, what: &str) -> Result<String, CorpusError> {
    let t = text.trim();
    if t.is_empty() {
        Err(CorpusError::malformed(format!("{what} is empty")))
    } else {
        Ok(t.to_string())
    }
}

/// Parses one line of the WebGPT comparisons file.
///
/// `question` may be a plain string or the public object form carrying
/// `full_text`.
pub fn parse_webgpt(line: &str, ties: TiePolicy) -> Result<PreferenceRecord, CorpusError> {
    let v = parse_object(line)?;
    let question = match v.get("question") {
        Some(Value::String(s)) => s.as_str(),
        Some(q @ Value::Object(_)) => str_field(q, "full_text")?,
        Some(_) => return Err(CorpusError::malformed("field `question` has unexpected type")),
        None => return Err(CorpusError::malformed("missing field `question`")),
    };
    let a0 = non_empty(str_field(&v, "answer_0")?, "answer_0")?;
    let a1 = non_empty(str_field(&v, "answer_1")?, "answer_1")?;
    let s0 = num_field(&v, "score_0")?;
    let s1 = num_field(&v, "score_1")?;
    let (r0, r1, tie) = if s0 > s1 {
        (0, 1, false)
    } else if s1 > s0 {
        (1, 0, false)
    } else {
        match ties {
            TiePolicy::Skip => return Err(CorpusError::TieRecord(s0)),
            TiePolicy::Keep => (0, 0, true),
        }
    };
    PreferenceRecord::new(
        Task::Qa,
        Source::Webgpt,
        question.trim(),
        vec![
            RatedOutput { text: a0, rank: r0, raw_score: Some(s0) },
            RatedOutput { text: a1, rank: r1, raw_score: Some(s1) },
        ],
        tie,
    )
}

/// Byte offset just past the longest common prefix, measured in whole chars.
fn common_prefix_len(a: &str, b: &str) -> usize {
    a.char_indices()
        .zip(b.chars())
        .find(|((_, ca), cb)| ca != cb)
        .map(|((i, _), _)| i)
        .unwrap_or_else(|| a.len().min(b.len()))
}

const LONG_SPEAKERS: [&str; 2] = ["Human:", "Assistant:"];
const SHORT_SPEAKERS: [&str; 2] = ["H:", "A:"];

fn speaker_starts(text: &str, markers: &[&str]) -> Vec<usize> {
    let mut starts = Vec::new();
    for m in markers {
        for (p, _) in text.match_indices(m) {
            let at_boundary = text[..p].chars().next_back().is_none_or(char::is_whitespace);
            if at_boundary {
                starts.push(p);
            }
        }
    }
    starts
}

/// Splits a chosen/rejected pair into the shared context and the two diverging turns.
///
/// The shared prefix is cut back to the start of the last speaker turn it contains.
fn split_dialogue(chosen: &str, rejected: &str) -> (usize, usize) {
    let lcp = common_prefix_len(chosen, rejected);
    let has_long = LONG_SPEAKERS.iter().any(|m| chosen.contains(m) || rejected.contains(m));
    let markers: &[&str] = if has_long { &LONG_SPEAKERS } else { &SHORT_SPEAKERS };
    let boundary = speaker_starts(chosen, markers)
        .into_iter()
        .chain(speaker_starts(rejected, markers))
        .filter(|&p| p <= lcp)
        .max()
        .unwrap_or(0);
    (boundary, lcp)
}

/// Parses one line of the HH dialogue comparison file (`chosen`, `rejected`).
pub fn parse_hh(line: &str) -> Result<PreferenceRecord, CorpusError> {
    let v = parse_object(line)?;
    let chosen = str_field(&v, "chosen")?;
    let rejected = str_field(&v, "rejected")?;
    if chosen == rejected {
        return Err(CorpusError::IdenticalPair);
    }
    let (cut, _) = split_dialogue(chosen, rejected);
    let prompt = chosen[..cut].trim();
    let good = non_empty(&chosen[cut..], "chosen suffix")?;
    let bad = non_empty(&rejected[cut..], "rejected suffix")?;
    if good == bad {
        return Err(CorpusError::IdenticalPair);
    }
    PreferenceRecord::new(
        Task::Dialogue,
        Source::Hh,
        prompt,
        vec![RatedOutput { text: good, rank: 0, raw_score: None }, RatedOutput { text: bad, rank: 1, raw_score: None }],
        false,
    )
}

/// Parses one line of the summarize-from-feedback comparisons file.
pub fn parse_summarize(line: &str) -> Result<PreferenceRecord, CorpusError> {
    let v = parse_object(line)?;
    let post = match v.get("info") {
        Some(Value::String(s)) => s.as_str(),
        Some(info @ Value::Object(_)) => match (info.get("post"), info.get("article")) {
            (Some(Value::String(s)), _) | (None, Some(Value::String(s))) => s.as_str(),
            _ => return Err(CorpusError::malformed("field `info` has no `post` text")),
        },
        Some(_) => return Err(CorpusError::malformed("field `info` has unexpected type")),
        None => return Err(CorpusError::malformed("missing field `info`")),
    };
    let summaries = v
        .get("summaries")
        .and_then(Value::as_array)
        .ok_or_else(|| CorpusError::malformed("missing array field `summaries`"))?;
    let texts = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let text = match s {
                Value::String(t) => t.as_str(),
                Value::Object(_) => str_field(s, "text")?,
                _ => return Err(CorpusError::malformed(format!("summary {i} has unexpected type"))),
            };
            non_empty(text, &format!("summary {i}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let choice = v
        .get("choice")
        .and_then(Value::as_i64)
        .ok_or_else(|| CorpusError::malformed("missing integer field `choice`"))?;
    if choice < 0 || choice as usize >= texts.len() {
        return Err(CorpusError::ChoiceOutOfRange { choice, n: texts.len() });
    }
    let choice = choice as usize;
    // The chosen summary is rank 0; the rest keep their relative order.
    let mut next = 1;
    let outputs = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let rank = if i == choice {
                0
            } else {
                next += 1;
                next - 1
            };
            RatedOutput { text, rank, raw_score: None }
        })
        .collect();
    PreferenceRecord::new(Task::Summary, Source::Summarize, post.trim(), outputs, false)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<PreferenceRecord>,
    pub source_counts: BTreeMap<Source, usize>,
}

impl Corpus {
    pub fn new(records: Vec<PreferenceRecord>) -> Self {
        let mut source_counts = BTreeMap::new();
        for r in &records {
            *source_counts.entry(r.source).or_insert(0) += 1;
        }
        Corpus { records, source_counts }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// The on-disk schema a JSONL file is written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Webgpt,
    Hh,
    Summarize,
    Normalized,
}

impl std::str::FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "webgpt" => Ok(Schema::Webgpt),
            "hh" => Ok(Schema::Hh),
            "summarize" => Ok(Schema::Summarize),
            "normalized" => Ok(Schema::Normalized),
            other => Err(format!("unknown source `{other}` (expected webgpt, hh, summarize or normalized)")),
        }
    }
}

fn parse_normalized(line: &str) -> Result<PreferenceRecord, CorpusError> {
    let r: PreferenceRecord =
        serde_json::from_str(line).map_err(|e| CorpusError::malformed(format!("invalid normalized record: {e}")))?;
    r.validate()?;
    Ok(r)
}

pub fn parse_line(schema: Schema, line: &str, ties: TiePolicy) -> Result<PreferenceRecord, CorpusError> {
    match schema {
        Schema::Webgpt => parse_webgpt(line, ties),
        Schema::Hh => parse_hh(line),
        Schema::Summarize => parse_summarize(line),
        Schema::Normalized => parse_normalized(line),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub skipped: usize,
    /// Skip counts keyed by error kind (`tie`, `malformed`, ...).
    pub skip_reasons: BTreeMap<&'static str, usize>,
    /// First few skipped lines with their error, for diagnostics.
    pub examples: Vec<String>,
}

/// Parses every line of `text`; lines are parsed in parallel, order is preserved.
pub fn parse_lines(text: &str, schema: Schema, ties: TiePolicy) -> Result<(Corpus, LoadReport), CorpusError> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    let parsed: Vec<_> = lines.par_iter().map(|&(n, l)| (n, parse_line(schema, l, ties))).collect();
    let mut records = Vec::with_capacity(parsed.len());
    let mut report = LoadReport::default();
    for (n, r) in parsed {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                report.skipped += 1;
                *report.skip_reasons.entry(e.kind()).or_insert(0) += 1;
                if report.examples.len() < 5 {
                    report.examples.push(format!("line {}: {e}", n + 1));
                }
            }
        }
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok((Corpus::new(records), report))
}

/// Reads a JSONL file through the adapter for `schema`.
pub fn load_corpus(
    path: impl AsRef<Path>,
    schema: Schema,
    ties: TiePolicy,
) -> Result<(Corpus, LoadReport), CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_lines(&text, schema, ties)
}

/// Writes one normalized record per line.
pub fn write_normalized(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in &corpus.records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn webgpt_higher_score_wins() {
        let r =
            parse_webgpt(r#"{"question":"Q","answer_0":"A","answer_1":"B","score_0":1,"score_1":-1}"#, TiePolicy::Skip)
                .unwrap();
        assert_eq!(r.task, Task::Qa);
        assert_eq!(r.prompt, "Q");
        assert_eq!((r.outputs[0].text.as_str(), r.outputs[0].rank), ("A", 0));
        assert_eq!((r.outputs[1].text.as_str(), r.outputs[1].rank), ("B", 1));

        let r = parse_webgpt(
            r#"{"question":"Q","answer_0":"A","answer_1":"B","score_0":-0.5,"score_1":0.5}"#,
            TiePolicy::Skip,
        )
        .unwrap();
        assert_eq!(r.best().text, "B");
    }

    #[test]
    fn webgpt_tie_is_reported_or_flagged() {
        let line = r#"{"question":"Q","answer_0":"A","answer_1":"B","score_0":0,"score_1":0}"#;
        assert!(matches!(parse_webgpt(line, TiePolicy::Skip), Err(CorpusError::TieRecord(_))));
        let kept = parse_webgpt(line, TiePolicy::Keep).unwrap();
        assert!(kept.tie);
        assert!(kept.outputs.iter().all(|o| o.rank == 0));
    }

    #[test]
    fn webgpt_public_object_form() {
        let line = r#"{"question":{"dataset":"eli5","id":"x","full_text":"Why is the sky blue?"},
            "quotes_0":{"title":[],"extract":[]},"answer_0":"Rayleigh scattering.","tokens_0":[],"score_0":1.0,
            "quotes_1":{"title":[],"extract":[]},"answer_1":"Because.","tokens_1":[],"score_1":-1.0}"#
            .replace('\n', " ");
        let r = parse_webgpt(&line, TiePolicy::Skip).unwrap();
        assert_eq!(r.prompt, "Why is the sky blue?");
        assert_eq!(r.best().text, "Rayleigh scattering.");
    }

    #[test]
    fn webgpt_malformed() {
        for line in [
            r#"{"question":"Q","answer_0":"A","score_0":1,"score_1":0}"#,
            r#"{"question":"Q","answer_0":3,"answer_1":"B","score_0":1,"score_1":0}"#,
            r#"{"question":"Q","answer_0":"  ","answer_1":"B","score_0":1,"score_1":0}"#,
            r#"[1,2]"#,
            "not json",
        ] {
            assert!(matches!(parse_webgpt(line, TiePolicy::Skip), Err(CorpusError::MalformedRecord(_))), "{line}");
        }
    }

    #[test]
    fn hh_common_prefix_split() {
        let r = parse_hh(r#"{"chosen":"H: hi A: hello","rejected":"H: hi A: go away"}"#).unwrap();
        assert_eq!(r.prompt, "H: hi");
        assert_eq!(r.outputs[0].text, "A: hello");
        assert_eq!(r.outputs[0].rank, 0);
        assert_eq!(r.outputs[1].text, "A: go away");
        assert_eq!(r.outputs[1].rank, 1);
        assert_eq!(r.task, Task::Dialogue);
    }

    #[test]
    fn hh_public_transcript_format() {
        let chosen = "\n\nHuman: What is a good pie?\n\nAssistant: Apple pie is classic.\n\nHuman: Why?\n\nAssistant: It is sweet and tart.";
        let rejected = "\n\nHuman: What is a good pie?\n\nAssistant: Apple pie is classic.\n\nHuman: Why?\n\nAssistant: I don't know.";
        let line = serde_json::json!({"chosen": chosen, "rejected": rejected}).to_string();
        let r = parse_hh(&line).unwrap();
        assert!(r.prompt.starts_with("Human: What is a good pie?"));
        assert!(r.prompt.ends_with("Human: Why?"));
        assert_eq!(r.outputs[0].text, "Assistant: It is sweet and tart.");
        assert_eq!(r.outputs[1].text, "Assistant: I don't know.");
    }

    #[test]
    fn hh_marker_inside_turn_is_not_a_boundary_when_long_markers_exist() {
        let chosen = "Human: plan?\n\nAssistant: Plan A: run fast";
        let rejected = "Human: plan?\n\nAssistant: Plan A: walk";
        let line = serde_json::json!({"chosen": chosen, "rejected": rejected}).to_string();
        let r = parse_hh(&line).unwrap();
        assert_eq!(r.prompt, "Human: plan?");
        assert_eq!(r.outputs[0].text, "Assistant: Plan A: run fast");
    }

    #[test]
    fn hh_identical_pair() {
        assert!(matches!(
            parse_hh(r#"{"chosen":"H: a A: b","rejected":"H: a A: b"}"#),
            Err(CorpusError::IdenticalPair)
        ));
    }

    #[test]
    fn summarize_choice_semantics() {
        let r = parse_summarize(
            r#"{"info":{"id":"t3","post":"Long post.","title":"T"},"summaries":[{"text":"first"},{"text":"second"}],"choice":1}"#,
        )
        .unwrap();
        assert_eq!(r.prompt, "Long post.");
        assert_eq!(r.outputs[1].text, "second");
        assert_eq!(r.outputs[1].rank, 0);
        assert_eq!(r.outputs[0].rank, 1);
        assert_eq!(r.task, Task::Summary);
    }

    #[test]
    fn summarize_choice_out_of_range() {
        let e = parse_summarize(r#"{"info":"p","summaries":["a","b"],"choice":2}"#).unwrap_err();
        assert!(matches!(e, CorpusError::ChoiceOutOfRange { choice: 2, n: 2 }));
    }

    #[test]
    fn ids_are_deterministic_and_content_sensitive() {
        let a = r#"{"question":"Q","answer_0":"A","answer_1":"B","score_0":1,"score_1":-1}"#;
        let b = r#"{"question":"Q","answer_0":"A","answer_1":"C","score_0":1,"score_1":-1}"#;
        let ra = parse_webgpt(a, TiePolicy::Skip).unwrap();
        assert_eq!(ra.id, parse_webgpt(a, TiePolicy::Skip).unwrap().id);
        assert_ne!(ra.id, parse_webgpt(b, TiePolicy::Skip).unwrap().id);
    }

    #[test]
    fn parse_lines_counts_skips_and_keeps_order() {
        let text = [
            r#"{"question":"Q1","answer_0":"A","answer_1":"B","score_0":1,"score_1":-1}"#,
            r#"{"question":"Q2","answer_0":"A","answer_1":"B","score_0":0,"score_1":0}"#,
            "",
            r#"{"question":"Q3","answer_0":"A","answer_1":"B","score_0":-1,"score_1":1}"#,
        ]
        .join("\n");
        let (c, rep) = parse_lines(&text, Schema::Webgpt, TiePolicy::Skip).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.records[0].prompt, "Q1");
        assert_eq!(c.records[1].prompt, "Q3");
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.skip_reasons.get("tie"), Some(&1));
        assert_eq!(c.source_counts.get(&Source::Webgpt), Some(&2));
    }

    #[test]
    fn all_invalid_is_empty_corpus() {
        let e = parse_lines("garbage\n", Schema::Hh, TiePolicy::Skip).unwrap_err();
        assert!(matches!(e, CorpusError::EmptyCorpus));
    }

    #[test]
    fn write_empty_corpus_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_normalized(&Corpus::default(), dir.path().join("x.jsonl")).unwrap_err();
        assert!(matches!(e, CorpusError::EmptyCorpus));
    }

    #[test]
    fn normalized_field_order() {
        let r =
            parse_webgpt(r#"{"question":"Q","answer_0":"A","answer_1":"B","score_0":1,"score_1":-1}"#, TiePolicy::Skip)
                .unwrap();
        let line = serde_json::to_string(&r).unwrap();
        let keys = ["\"id\"", "\"task\"", "\"prompt\"", "\"outputs\"", "\"source\""];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
        assert!(line.contains(r#""text":"A","rank":0,"raw_score":1.0"#));
        assert!(!line.contains("tie"));
    }

    #[test]
    fn rank_invariants() {
        let out = |t: &str, r| RatedOutput { text: t.into(), rank: r, raw_score: None };
        assert!(PreferenceRecord::new(Task::Qa, Source::Synthetic, "p", vec![out("a", 0)], false).is_err());
        assert!(PreferenceRecord::new(Task::Qa, Source::Synthetic, "p", vec![out("a", 1), out("b", 2)], false).is_err());
        assert!(PreferenceRecord::new(Task::Qa, Source::Synthetic, "p", vec![out("a", 0), out("b", 0)], false).is_err());
        assert!(PreferenceRecord::new(Task::Qa, Source::Synthetic, "p", vec![out("a", 0), out("b", 0)], true).is_ok());
        let r = PreferenceRecord::new(
            Task::Qa,
            Source::Synthetic,
            "p",
            vec![out("mid", 1), out("top", 0), out("low", 2)],
            false,
        )
        .unwrap();
        assert_eq!(r.best().text, "top");
        assert_eq!(r.worst().text, "low");
        assert_eq!(r.best_index(), 1);
    }
}
