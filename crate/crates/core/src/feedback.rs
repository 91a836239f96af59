//! Hindsight feedback templates and span-tracked rendering.
//!
//! Spans are byte ranges into the rendered text and always fall on `char`
//! boundaries, so they map directly onto byte-level tokens.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Task;

pub const POSITIVE: &str = "{positive}";
pub const NEGATIVE: &str = "{negative}";

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("template `{id}`: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("no templates eligible for task {0}")]
    NoTemplates(Task),
    #[error("template file line {line}: {reason}")]
    TemplateFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateTask {
    Summary,
    Dialogue,
    Qa,
    Shared,
}

impl TemplateTask {
    pub fn applies_to(self, task: Task) -> bool {
        match self {
            TemplateTask::Shared => true,
            TemplateTask::Summary => task == Task::Summary,
            TemplateTask::Dialogue => task == Task::Dialogue,
            TemplateTask::Qa => task == Task::Qa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    PosFirst,
    NegFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt,
    FeedbackMarker,
    OutputPos,
    OutputNeg,
}

impl Role {
    pub fn is_output(self) -> bool {
        matches!(self, Role::OutputPos | Role::OutputNeg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub role: Role,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn text<'a>(&self, s: &'a str) -> &'a str {
        &s[self.start..self.end]
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Literal(&'a str),
    Positive,
    Negative,
}

fn pieces(pattern: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = pattern;
    loop {
        let next = [(POSITIVE, Piece::Positive), (NEGATIVE, Piece::Negative)]
            .into_iter()
            .filter_map(|(ph, piece)| rest.find(ph).map(|i| (i, ph.len(), piece)))
            .min_by_key(|(i, _, _)| *i);
        match next {
            Some((i, len, piece)) => {
                if i > 0 {
                    out.push(Piece::Literal(&rest[..i]));
                }
                out.push(piece);
                rest = &rest[i + len..];
            }
            None => {
                if !rest.is_empty() {
                    out.push(Piece::Literal(rest));
                }
                return out;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackTemplate {
    pub id: String,
    pub task: TemplateTask,
    pub pattern: String,
    pub order: Order,
    /// One of the two bare `Good:`/`Bad:` marker templates.
    #[serde(default)]
    pub simple: bool,
}

impl FeedbackTemplate {
    /// Validates the pattern and derives the placeholder order from it.
    pub fn new(id: impl Into<String>, task: TemplateTask, pattern: impl Into<String>) -> Result<Self, FeedbackError> {
        let id = id.into();
        let pattern = pattern.into();
        let invalid = |reason: String| FeedbackError::InvalidTemplate { id: id.clone(), reason };
        for ph in [POSITIVE, NEGATIVE] {
            let n = pattern.matches(ph).count();
            if n != 1 {
                return Err(invalid(format!("{ph} appears {n} times, expected once")));
            }
        }
        let order = if pattern.find(POSITIVE) < pattern.find(NEGATIVE) { Order::PosFirst } else { Order::NegFirst };
        Ok(FeedbackTemplate { id, task, pattern, order, simple: false })
    }

    fn simple_marker(id: &str, pattern: &str) -> Self {
        let mut t = FeedbackTemplate::new(id, TemplateTask::Shared, pattern).expect("builtin pattern");
        t.simple = true;
        t
    }

    /// The same feedback with the two outputs presented in the other order.
    pub fn swapped(&self) -> FeedbackTemplate {
        let ps = pieces(&self.pattern);
        let mut markers = Vec::new();
        let mut pending = String::new();
        let mut tail = String::new();
        for p in &ps {
            match p {
                Piece::Literal(l) => pending.push_str(l),
                ph => {
                    markers.push((ph.clone(), pending.trim().to_string()));
                    pending.clear();
                }
            }
        }
        tail.push_str(pending.trim_end());
        let placeholder = |p: &Piece| if *p == Piece::Positive { POSITIVE } else { NEGATIVE };
        let (first, second) = (&markers[0], &markers[1]);
        let join = |marker: &str, ph: &str| {
            if marker.is_empty() {
                ph.to_string()
            } else {
                format!("{marker} {ph}")
            }
        };
        let pattern =
            format!("{} {}{}", join(&second.1, placeholder(&second.0)), join(&first.1, placeholder(&first.0)), tail);
        let mut t = FeedbackTemplate::new(format!("{}~swapped", self.id), self.task, pattern)
            .expect("swapping preserves placeholders");
        t.simple = self.simple;
        t
    }
}

/// Rendered text plus the role of every byte after (and including) the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedChain {
    pub text: String,
    pub spans: Vec<Span>,
}

impl RenderedChain {
    pub(crate) fn push(&mut self, role: Role, s: &str) {
        if s.is_empty() {
            return;
        }
        let start = self.text.len();
        self.text.push_str(s);
        self.spans.push(Span { role, start, end: self.text.len() });
    }

    /// Starts a chain with `prompt` followed by the single separator space.
    pub(crate) fn with_prompt(prompt: &str) -> Self {
        let mut chain = RenderedChain { text: String::new(), spans: Vec::new() };
        if !prompt.is_empty() {
            chain.push(Role::Prompt, &format!("{prompt} "));
        }
        chain
    }

    pub fn span_texts(&self) -> impl Iterator<Item = (Role, &str)> {
        self.spans.iter().map(|s| (s.role, s.text(&self.text)))
    }
}

/// Substitutes the outputs into `template` after `prompt`.
pub fn render(template: &FeedbackTemplate, positive: &str, negative: &str, prompt: &str) -> RenderedChain {
    let mut chain = RenderedChain::with_prompt(prompt);
    for piece in pieces(&template.pattern) {
        match piece {
            Piece::Literal(l) => chain.push(Role::FeedbackMarker, l),
            Piece::Positive => chain.push(Role::OutputPos, positive),
            Piece::Negative => chain.push(Role::OutputNeg, negative),
        }
    }
    chain
}

const AUX_TABLE: [(TemplateTask, &str); 24] = [
    (TemplateTask::Summary, "a good summary is: {positive} a bad summary is: {negative}"),
    (TemplateTask::Summary, "a bad summary is: {negative} a good summary is: {positive}"),
    (TemplateTask::Summary, "a good summary is: {positive} a worse summary is: {negative}"),
    (TemplateTask::Summary, "a bad summary is: {negative} a better summary is: {positive}"),
    (TemplateTask::Shared, "a good response is: {positive} a bad response is: {negative}"),
    (TemplateTask::Shared, "a bad response is: {negative} a good response is: {positive}"),
    (TemplateTask::Shared, "a good answer is: {positive} a bad answer is: {negative}"),
    (TemplateTask::Shared, "a bad answer is: {negative} a good answer is: {positive}"),
    (TemplateTask::Shared, "a good answer is: {positive} a worse answer is: {negative}"),
    (TemplateTask::Shared, "a bad answer is: {negative} a better answer is: {positive}"),
    (TemplateTask::Shared, "good: {positive} worse: {negative}"),
    (TemplateTask::Shared, "bad: {negative} better: {positive}"),
    (TemplateTask::Shared, "good: {positive} bad: {negative}"),
    (TemplateTask::Shared, "bad: {positive} good: {negative}"),
    (TemplateTask::Dialogue, "you are a helpful assistant: {positive} you are an unhelpful assistant: {negative}"),
    (TemplateTask::Dialogue, "you are an unhelpful assistant: {positive} you are a helpful assistant: {negative}"),
    (
        TemplateTask::Dialogue,
        "you are a respectful and unbiased assistant: {positive} you are a disrespectful and biased assistant: {negative}",
    ),
    (
        TemplateTask::Dialogue,
        "you are a disrespectful and biased assistant: {positive} you are a respectful and unbiased assistant: {negative}",
    ),
    (TemplateTask::Summary, "give me a good summary: {positive} give me a worse summary: {negative}"),
    (TemplateTask::Summary, "give me a bad summary: {negative} give me a better summary: {positive}"),
    (TemplateTask::Summary, "let's generate a good summary: {positive} let's generate a worse summary: {negative}"),
    (TemplateTask::Summary, "let's generate a bad summary: {negative} let's generate a better summary: {positive}"),
    (TemplateTask::Shared, "let's generate a good answer: {positive} let's generate a worse answer: {negative}"),
    (TemplateTask::Shared, "let's generate a bad answer: {negative} let's generate a better answer: {positive}"),
];

/// The two bare-marker templates followed by the auxiliary natural-language table.
pub fn builtin_templates() -> Vec<FeedbackTemplate> {
    let mut out = vec![
        FeedbackTemplate::simple_marker("simple-good-bad", "Good: {positive} Bad: {negative}"),
        FeedbackTemplate::simple_marker("simple-bad-good", "Bad: {negative} Good: {positive}"),
    ];
    out.extend(AUX_TABLE.iter().enumerate().map(|(i, (task, pattern))| {
        FeedbackTemplate::new(format!("aux-{:02}", i + 1), *task, *pattern).expect("builtin pattern")
    }));
    out
}

#[derive(Deserialize)]
struct TemplateLine {
    id: String,
    task: TemplateTask,
    pattern: String,
}

#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: Vec<FeedbackTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        TemplateRegistry { templates: builtin_templates() }
    }
}

impl TemplateRegistry {
    pub fn templates(&self) -> &[FeedbackTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&FeedbackTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    /// Merges user templates (JSONL `{id, task, pattern}`); a repeated id replaces the old entry.
    pub fn merge_jsonl(&mut self, text: &str) -> Result<usize, FeedbackError> {
        let mut added = 0;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: TemplateLine = serde_json::from_str(line)
                .map_err(|e| FeedbackError::TemplateFile { line: n + 1, reason: e.to_string() })?;
            let t = FeedbackTemplate::new(parsed.id, parsed.task, parsed.pattern)?;
            match self.templates.iter_mut().find(|old| old.id == t.id) {
                Some(old) => *old = t,
                None => self.templates.push(t),
            }
            added += 1;
        }
        Ok(added)
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<usize, FeedbackError> {
        self.merge_jsonl(&fs::read_to_string(path)?)
    }

    /// Templates usable for `task`; only the bare markers unless `natural_language`.
    pub fn eligible(&self, task: Task, natural_language: bool) -> Result<Vec<&FeedbackTemplate>, FeedbackError> {
        let out: Vec<_> = self
            .templates
            .iter()
            .filter(|t| if natural_language { t.task.applies_to(task) } else { t.simple })
            .collect();
        if out.is_empty() {
            Err(FeedbackError::NoTemplates(task))
        } else {
            Ok(out)
        }
    }
}

/// Eligible templates from the builtin registry.
pub fn eligible_templates(task: Task, natural_language: bool) -> Result<Vec<FeedbackTemplate>, FeedbackError> {
    Ok(TemplateRegistry::default().eligible(task, natural_language)?.into_iter().cloned().collect())
}

/// Uniform draw over `templates`.
pub fn sample_template<'a, R: Rng + ?Sized>(
    templates: &[&'a FeedbackTemplate],
    rng: &mut R,
) -> Option<&'a FeedbackTemplate> {
    templates.choose(rng).copied()
}
