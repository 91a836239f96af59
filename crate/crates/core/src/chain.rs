//! Chain-of-hindsight and SFT-family training examples with character loss masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PreferenceRecord;
use crate::feedback::{render, FeedbackTemplate, RenderedChain, Role, Span};

#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("record has {have} outputs, chain needs {need}")]
    InsufficientOutputs { need: usize, have: usize },
    #[error("best and worst outputs share rank {0}")]
    RankCollision(u32),
    #[error("chain length {0} is not supported (use 1 or 2)")]
    UnsupportedChainLength(usize),
    #[error("mode {0:?} is not a baseline")]
    NotABaseline(TrainingMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Coh,
    Sft,
    SftBoth,
    SftUnlikelihood,
    ConditionalSft,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 5] = [
        TrainingMode::Coh,
        TrainingMode::Sft,
        TrainingMode::SftBoth,
        TrainingMode::SftUnlikelihood,
        TrainingMode::ConditionalSft,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Coh => "coh",
            TrainingMode::Sft => "sft",
            TrainingMode::SftBoth => "sft_both",
            TrainingMode::SftUnlikelihood => "sft_unlikelihood",
            TrainingMode::ConditionalSft => "conditional_sft",
        }
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainingMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown training mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPolicy {
    /// Every output span is a target.
    #[default]
    AllOutputs,
    /// Only the final output span is a target.
    LastOutputOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSpec {
    pub chain_length: usize,
    pub use_natural_language: bool,
    pub order_sampling_seed: u64,
    pub loss_policy: LossPolicy,
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec {
            chain_length: 2,
            use_natural_language: false,
            order_sampling_seed: 0,
            loss_policy: LossPolicy::AllOutputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohExample {
    pub text: String,
    pub spans: Vec<Span>,
    pub loss_policy: LossPolicy,
    /// Byte ranges trained with the unlikelihood objective; each equals an output_neg span.
    pub unlikelihood_spans: Vec<(usize, usize)>,
}

impl CohExample {
    fn from_chain(chain: RenderedChain, loss_policy: LossPolicy) -> Self {
        CohExample { text: chain.text, spans: chain.spans, loss_policy, unlikelihood_spans: Vec::new() }
    }

    pub fn spans_with(&self, role: Role) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(move |s| s.role == role)
    }

    pub fn span_text(&self, role: Role) -> Option<&str> {
        self.spans_with(role).next().map(|s| s.text(&self.text))
    }
}

/// A contiguous byte range of an example sharing one loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub start: usize,
    pub end: usize,
    /// 0 = ignored, 1 = likelihood target, -1 = unlikelihood target.
    pub weight: f32,
}

fn check_pair(record: &PreferenceRecord) -> Result<(), ChainError> {
    if record.outputs.len() < 2 {
        return Err(ChainError::InsufficientOutputs { need: 2, have: record.outputs.len() });
    }
    let (best, worst) = (record.best().rank, record.worst().rank);
    if best == worst {
        return Err(ChainError::RankCollision(best));
    }
    Ok(())
}

fn single(prompt: &str, marker: Option<&str>, role: Role, output: &str, policy: LossPolicy) -> CohExample {
    let mut chain = RenderedChain::with_prompt(prompt);
    if let Some(m) = marker {
        chain.push(Role::FeedbackMarker, m);
    }
    chain.push(role, output);
    CohExample::from_chain(chain, policy)
}

/// One "Good: {best}" and one "Bad: {worst}" example; the unchained form.
fn single_marker_pair(record: &PreferenceRecord, policy: LossPolicy) -> Vec<CohExample> {
    vec![
        single(&record.prompt, Some("Good: "), Role::OutputPos, &record.best().text, policy),
        single(&record.prompt, Some("Bad: "), Role::OutputNeg, &record.worst().text, policy),
    ]
}

/// Builds the chain-of-hindsight example(s) for `record`.
///
/// With `chain_length = 2` the best output fills `{positive}` and the worst
/// fills `{negative}`, giving one example. With `chain_length = 1` the chain is
/// disabled: one `Good:` example and one `Bad:` example are returned.
pub fn build_coh(
    record: &PreferenceRecord,
    spec: &ChainSpec,
    template: &FeedbackTemplate,
) -> Result<Vec<CohExample>, ChainError> {
    if spec.chain_length > record.outputs.len() {
        return Err(ChainError::InsufficientOutputs { need: spec.chain_length, have: record.outputs.len() });
    }
    check_pair(record)?;
    match spec.chain_length {
        1 => Ok(single_marker_pair(record, spec.loss_policy)),
        2 => {
            let chain = render(template, &record.best().text, &record.worst().text, &record.prompt);
            Ok(vec![CohExample::from_chain(chain, spec.loss_policy)])
        }
        n => Err(ChainError::UnsupportedChainLength(n)),
    }
}

/// Builds the examples for one of the SFT-family baselines.
pub fn build_baseline(record: &PreferenceRecord, mode: TrainingMode) -> Result<Vec<CohExample>, ChainError> {
    check_pair(record)?;
    let policy = LossPolicy::AllOutputs;
    let bare = |o: &crate::corpus::RatedOutput| {
        let role = if o.rank == record.best().rank { Role::OutputPos } else { Role::OutputNeg };
        single(&record.prompt, None, role, &o.text, policy)
    };
    match mode {
        TrainingMode::Coh => Err(ChainError::NotABaseline(mode)),
        TrainingMode::Sft => Ok(vec![bare(record.best())]),
        TrainingMode::SftBoth => Ok(record.outputs.iter().map(bare).collect()),
        TrainingMode::SftUnlikelihood => Ok(record
            .outputs
            .iter()
            .map(|o| {
                let mut ex = bare(o);
                ex.unlikelihood_spans = ex.spans_with(Role::OutputNeg).map(|s| (s.start, s.end)).collect();
                ex
            })
            .collect()),
        TrainingMode::ConditionalSft => Ok(single_marker_pair(record, policy)),
    }
}

/// Dispatches on `mode`; `template` is only consulted for chain-of-hindsight.
pub fn build_examples(
    record: &PreferenceRecord,
    mode: TrainingMode,
    spec: &ChainSpec,
    template: &FeedbackTemplate,
) -> Result<Vec<CohExample>, ChainError> {
    match mode {
        TrainingMode::Coh => build_coh(record, spec, template),
        other => build_baseline(record, other),
    }
}

/// Per-region loss weights covering every byte of the example exactly once.
pub fn loss_mask_chars(example: &CohExample) -> Vec<MaskRegion> {
    let last_output = example.spans.iter().rposition(|s| s.role.is_output());
    example
        .spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let unlikely = example.unlikelihood_spans.contains(&(s.start, s.end));
            let weight = if !s.role.is_output() {
                0.0
            } else if unlikely {
                -1.0
            } else if example.loss_policy == LossPolicy::LastOutputOnly && Some(i) != last_output {
                0.0
            } else {
                1.0
            };
            MaskRegion { start: s.start, end: s.end, weight }
        })
        .collect()
}

/// Inspection record: `{text, spans, weights}`.
#[derive(Debug, Serialize)]
pub struct ExampleDump<'a> {
    pub text: &'a str,
    pub spans: &'a [Span],
    pub weights: Vec<f32>,
}

impl<'a> ExampleDump<'a> {
    pub fn new(example: &'a CohExample) -> Self {
        ExampleDump {
            text: &example.text,
            spans: &example.spans,
            weights: loss_mask_chars(example).iter().map(|r| r.weight).collect(),
        }
    }
}
