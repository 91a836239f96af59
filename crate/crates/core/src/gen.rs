//! Sampling conditioned on a feedback marker, iterative refinement and
//! pseudo-dialogue regeneration.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{next_token_logits, ModelError, ModelParams};
use crate::token::{decode_lossy, encode, TokenId, BOS, BYTE_TOKENS, EOS};

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("previous output is empty")]
    EmptyPrevious,
    #[error("dialogue must alternate human/assistant turns starting with human (turn {0})")]
    NonAlternatingDialogue(usize),
    #[error("invalid sampling params: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    /// 0 means greedy.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub stop_at_eos: bool,
    /// Generation ends when the output ends with one of these; the match is cut off.
    pub stop: Vec<String>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.8,
            top_k: 40,
            max_new_tokens: 64,
            stop_at_eos: true,
            stop: vec![" Bad:".into(), " Good:".into()],
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        SamplingParams { temperature: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.max_new_tokens == 0 {
            return Err(GenError::InvalidParams("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidParams(format!("temperature {} must be >= 0", self.temperature)));
        }
        Ok(())
    }
}

/// Text the model continues from: `"{prompt} {condition} "`.
pub fn conditioned_context(prompt: &str, condition: &str) -> String {
    match (prompt.is_empty(), condition.is_empty()) {
        (true, true) => String::new(),
        (true, false) => format!("{condition} "),
        (false, true) => format!("{prompt} "),
        (false, false) => format!("{prompt} {condition} "),
    }
}

/// Picks the next token from raw logits. Control tokens other than EOS are never chosen.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f32], p: &SamplingParams, rng: &mut R) -> TokenId {
    let allowed = |i: usize| i < BYTE_TOKENS || (i == EOS as usize && p.stop_at_eos);
    let mut cand: Vec<(usize, f64)> =
        logits.iter().enumerate().filter(|(i, _)| allowed(*i)).map(|(i, &z)| (i, z as f64)).collect();
    if p.temperature == 0.0 {
        let best = cand.iter().fold(cand[0], |b, &c| if c.1 > b.1 { c } else { b });
        return best.0 as TokenId;
    }
    if p.top_k > 0 && p.top_k < cand.len() {
        // Stable sort keeps lower ids first among equal logits.
        cand.sort_by(|a, b| b.1.total_cmp(&a.1));
        cand.truncate(p.top_k);
    }
    let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cand.iter().map(|c| ((c.1 - max) / p.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in cand.iter().zip(&weights) {
        if u < *w {
            return c.0 as TokenId;
        }
        u -= w;
    }
    cand.last().expect("non-empty vocabulary").0 as TokenId
}

/// Continues `context` and returns only the new text.
pub fn continue_text<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    context: &str,
    p: &SamplingParams,
    rng: &mut R,
) -> Result<String, GenError> {
    p.validate()?;
    let mut tokens = vec![BOS];
    tokens.extend(encode(context));
    let max = params.cfg.max_seq;
    if tokens.len() > max {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), max }.into());
    }
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < p.max_new_tokens && tokens.len() <= max {
        let logits = next_token_logits(params, &tokens)?;
        let next = sample_token(&logits, p, rng);
        if next == EOS {
            break;
        }
        out.push(next);
        tokens.push(next);
        let text = decode_lossy(&out);
        if let Some(s) = p.stop.iter().find(|s| !s.is_empty() && text.ends_with(s.as_str())) {
            return Ok(text[..text.len() - s.len()].to_string());
        }
    }
    Ok(decode_lossy(&out))
}

/// Samples an output for `prompt` under a feedback marker such as `"Good:"`.
pub fn generate<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    prompt: &str,
    condition: &str,
    p: &SamplingParams,
    rng: &mut R,
) -> Result<String, GenError> {
    continue_text(params, &conditioned_context(prompt, condition), p, rng)
}

/// Prompt for refinement: the previous output marked as bad.
pub fn refine_prompt(prompt: &str, previous: &str) -> String {
    if prompt.is_empty() {
        format!("Bad: {previous}")
    } else {
        format!("{prompt} Bad: {previous}")
    }
}

/// Generates from `"{prompt} Bad: {previous} Good: "`.
pub fn refine<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    prompt: &str,
    previous: &str,
    p: &SamplingParams,
    rng: &mut R,
) -> Result<String, GenError> {
    if previous.trim().is_empty() {
        return Err(GenError::EmptyPrevious);
    }
    generate(params, &refine_prompt(prompt, previous), "Good:", p, rng)
}

/// Repeated refinement; round k sees every earlier output marked bad.
pub fn refine_rounds<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    prompt: &str,
    initial: &str,
    rounds: usize,
    p: &SamplingParams,
    rng: &mut R,
) -> Result<Vec<String>, GenError> {
    let mut outputs = Vec::with_capacity(rounds);
    let mut context = prompt.to_string();
    let mut previous = initial.to_string();
    for _ in 0..rounds {
        let next = refine(params, &context, &previous, p, rng)?;
        context = refine_prompt(&context, &previous);
        previous = next.clone();
        outputs.push(next);
    }
    Ok(outputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Assistant,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Human => "Human:",
            Speaker::Assistant => "Assistant:",
        }
    }
}

pub fn transcript(turns: &[(Speaker, String)]) -> String {
    turns.iter().map(|(s, t)| format!("{} {t}", s.label())).collect::<Vec<_>>().join("\n\n")
}

/// Rebuilds a dialogue, producing each assistant turn with `gen` from the
/// transcript so far (human turns as given, assistant turns as regenerated).
pub fn pseudo_dialogue_with(
    dialogue: &[(Speaker, String)],
    mut gen: impl FnMut(&str) -> Result<String, GenError>,
) -> Result<Vec<(Speaker, String)>, GenError> {
    for (i, (s, _)) in dialogue.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Assistant };
        if *s != expected {
            return Err(GenError::NonAlternatingDialogue(i));
        }
    }
    let mut out: Vec<(Speaker, String)> = Vec::with_capacity(dialogue.len());
    for (speaker, text) in dialogue {
        match speaker {
            Speaker::Human => out.push((Speaker::Human, text.clone())),
            Speaker::Assistant => {
                let context = transcript(&out);
                let raw = gen(&context)?;
                let reply = raw.trim_start();
                let reply = reply.strip_prefix(Speaker::Assistant.label()).unwrap_or(reply).trim();
                out.push((Speaker::Assistant, reply.to_string()));
            }
        }
    }
    Ok(out)
}

pub fn pseudo_dialogue<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    dialogue: &[(Speaker, String)],
    p: &SamplingParams,
    rng: &mut R,
) -> Result<Vec<(Speaker, String)>, GenError> {
    pseudo_dialogue_with(dialogue, |ctx| generate(params, ctx, "Good:", p, rng))
}
