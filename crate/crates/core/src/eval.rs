//! ROUGE and likelihood-based preference classification.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::batch::step_rng;
use crate::corpus::{Corpus, PreferenceRecord, Task};
use crate::gen::{conditioned_context, generate, GenError, SamplingParams};
use crate::model::{token_logprobs, ModelError, ModelParams};
use crate::token::{encode, BOS};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("evaluation corpus is empty")]
    EmptyCorpus,
    #[error("candidate {0} is empty")]
    EmptyCandidate(usize),
    #[error("need at least two candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("record {id} has task {found}, expected {expected}")]
    TaskMismatch { id: String, expected: Task, found: Task },
    #[error("{0} candidates for {1} records")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gen(#[from] GenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    Rouge1,
    Rouge2,
    RougeL,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(hits: usize, cand: usize, refr: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { hits as f64 / cand as f64 };
        let recall = if refr == 0 { 0.0 } else { hits as f64 / refr as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        RougeScore { precision, recall, f1 }
    }

    const ONE: RougeScore = RougeScore { precision: 1.0, recall: 1.0, f1: 1.0 };
}

/// Lowercased whitespace tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE of `candidate` against `reference`.
///
/// When neither side has any n-gram of the requested order the score is 1.0
/// for identical non-empty token sequences and 0.0 otherwise.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> RougeScore {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    match variant {
        RougeVariant::Rouge1 | RougeVariant::Rouge2 => {
            let n = if variant == RougeVariant::Rouge1 { 1 } else { 2 };
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            let (ct, rt) = (cc.values().sum::<usize>(), rc.values().sum::<usize>());
            if ct == 0 && rt == 0 {
                return if !c.is_empty() && c == r { RougeScore::ONE } else { RougeScore::default() };
            }
            let hits = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
            RougeScore::from_counts(hits, ct, rt)
        }
        RougeVariant::RougeL => RougeScore::from_counts(lcs_len(&c, &r), c.len(), r.len()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
}

pub fn rouge_all(candidate: &str, reference: &str) -> RougeTriple {
    RougeTriple {
        rouge1: rouge(candidate, reference, RougeVariant::Rouge1),
        rouge2: rouge(candidate, reference, RougeVariant::Rouge2),
        rouge_l: rouge(candidate, reference, RougeVariant::RougeL),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub chosen_index: usize,
    /// Mean per-token log-likelihood of each candidate.
    pub scores: Vec<f64>,
    /// More than one candidate shared the top score; the lowest index was chosen.
    pub tie: bool,
}

impl ClassificationResult {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let chosen_index = scores.iter().position(|&s| s == best).unwrap_or(0);
        let tie = scores.iter().filter(|&&s| s == best).count() > 1;
        ClassificationResult { chosen_index, scores, tie }
    }
}

/// Mean log p of the candidate bytes given `prompt` and an optional feedback marker.
pub fn candidate_score(
    params: &ModelParams<f32>,
    prompt: &str,
    candidate: &str,
    condition: Option<&str>,
) -> Result<f64, EvalError> {
    let mut tokens = vec![BOS];
    tokens.extend(encode(&conditioned_context(prompt, condition.unwrap_or(""))));
    let start = tokens.len();
    tokens.extend(encode(candidate));
    let lp = token_logprobs(params, &tokens)?;
    let cand = &lp[start - 1..];
    Ok(cand.iter().sum::<f64>() / cand.len() as f64)
}

pub fn classify_preference(
    params: &ModelParams<f32>,
    prompt: &str,
    candidates: &[&str],
    condition: Option<&str>,
) -> Result<ClassificationResult, EvalError> {
    if candidates.len() < 2 {
        return Err(EvalError::TooFewCandidates(candidates.len()));
    }
    if let Some(i) = candidates.iter().position(|c| c.is_empty()) {
        return Err(EvalError::EmptyCandidate(i));
    }
    let scores =
        candidates.iter().map(|c| candidate_score(params, prompt, c, condition)).collect::<Result<Vec<_>, _>>()?;
    Ok(ClassificationResult::from_scores(scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n_records: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_record: Option<Vec<serde_json::Value>>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Averages ROUGE of `candidates[i]` against the best output of `records[i]`.
pub fn summary_report(records: &[PreferenceRecord], candidates: &[String]) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if records.len() != candidates.len() {
        return Err(EvalError::LengthMismatch(candidates.len(), records.len()));
    }
    let scores: Vec<RougeTriple> = records.iter().zip(candidates).map(|(r, c)| rouge_all(c, &r.best().text)).collect();
    let mut metrics = BTreeMap::new();
    for (name, get) in [
        ("rouge1", (|t: &RougeTriple| t.rouge1) as fn(&RougeTriple) -> RougeScore),
        ("rouge2", |t| t.rouge2),
        ("rougeL", |t| t.rouge_l),
    ] {
        metrics.insert(format!("{name}_precision"), mean(scores.iter().map(|t| get(t).precision)));
        metrics.insert(format!("{name}_recall"), mean(scores.iter().map(|t| get(t).recall)));
        metrics.insert(format!("{name}_f1"), mean(scores.iter().map(|t| get(t).f1)));
    }
    let avg = (metrics["rouge1_f1"] + metrics["rouge2_f1"] + metrics["rougeL_f1"]) / 3.0;
    metrics.insert("avg_rouge_f1".into(), avg);
    let per_record = records
        .iter()
        .zip(candidates)
        .zip(&scores)
        .map(|((r, c), s)| json!({"id": r.id, "candidate": c, "rouge": s}))
        .collect();
    Ok(EvalReport { task: records[0].task, n_records: records.len(), metrics, per_record: Some(per_record) })
}

/// Accuracy of choosing each record's best output.
pub fn classification_report(
    records: &[PreferenceRecord],
    results: &[ClassificationResult],
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if records.len() != results.len() {
        return Err(EvalError::LengthMismatch(results.len(), records.len()));
    }
    let correct: Vec<bool> = records.iter().zip(results).map(|(r, c)| c.chosen_index == r.best_index()).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".into(), mean(correct.iter().map(|&c| if c { 1.0 } else { 0.0 })));
    metrics.insert("ties".into(), results.iter().filter(|r| r.tie).count() as f64);
    let per_record = records
        .iter()
        .zip(results)
        .zip(&correct)
        .map(|((r, c), ok)| json!({"id": r.id, "chosen": c.chosen_index, "scores": c.scores, "tie": c.tie, "correct": ok}))
        .collect();
    Ok(EvalReport { task: records[0].task, n_records: records.len(), metrics, per_record: Some(per_record) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub condition: Option<String>,
    pub sampling: SamplingParams,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { condition: Some("Good:".into()), sampling: SamplingParams::greedy(), seed: 0 }
    }
}

/// Summary records are scored by ROUGE of a generated output; other tasks by
/// preference-classification accuracy. Record `i` samples with RNG stream `i`.
pub fn evaluate_suite(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    task: Task,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if let Some(r) = corpus.records.iter().find(|r| r.task != task) {
        return Err(EvalError::TaskMismatch { id: r.id.clone(), expected: task, found: r.task });
    }
    let condition = opts.condition.as_deref();
    match task {
        Task::Summary => {
            let candidates = corpus
                .records
                .par_iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut rng = step_rng(opts.seed, i as u64);
                    generate(params, &r.prompt, condition.unwrap_or(""), &opts.sampling, &mut rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            summary_report(&corpus.records, &candidates)
        }
        Task::Dialogue | Task::Qa => {
            let results = corpus
                .records
                .par_iter()
                .map(|r| {
                    let cands: Vec<&str> = r.outputs.iter().map(|o| o.text.as_str()).collect();
                    classify_preference(params, &r.prompt, &cands, condition)
                })
                .collect::<Result<Vec<_>, _>>()?;
            classification_report(&corpus.records, &results)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        let s = rouge("the cat", "the cat sat", RougeVariant::Rouge1);
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
        let id = rouge_all("A b c", "a B c");
        for s in [id.rouge1, id.rouge2, id.rouge_l] {
            assert_eq!(s, RougeScore::ONE);
        }
        let dis = rouge_all("x y", "p q");
        for s in [dis.rouge1, dis.rouge2, dis.rouge_l] {
            assert_eq!(s, RougeScore::default());
        }
    }

    #[test]
    fn zero_ngram_rule() {
        assert_eq!(rouge("word", "word", RougeVariant::Rouge2), RougeScore::ONE);
        assert_eq!(rouge("word", "other", RougeVariant::Rouge2), RougeScore::default());
        assert_eq!(rouge("", "", RougeVariant::Rouge1), RougeScore::default());
        assert_eq!(rouge("", "a b", RougeVariant::RougeL), RougeScore::default());
    }

    #[test]
    fn clipped_counts() {
        let s = rouge("the the the", "the cat", RougeVariant::Rouge1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let r = ClassificationResult::from_scores(vec![-1.0, -0.5, -0.5]);
        assert_eq!((r.chosen_index, r.tie), (1, true));
        let r = ClassificationResult::from_scores(vec![-0.1, -0.5]);
        assert_eq!((r.chosen_index, r.tie), (0, false));
    }
}
