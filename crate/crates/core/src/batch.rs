//! Minibatch assembly: proportional source sampling, forgetful causal masking,
//! padding/truncation and the feedback + pretraining mixture.
//!
//! All randomness for step `s` comes from generators seeded by
//! `(seed, stream = s)`, so a batch depends only on the seeds and the step
//! index. That keeps prefetching and checkpoint resume bit-reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{build_examples, ChainError, ChainSpec, TrainingMode};
use crate::corpus::{Corpus, PreferenceRecord, Source, Task};
use crate::feedback::{sample_template, FeedbackError, TemplateRegistry};
use crate::token::{tokenize_example, tokenize_plain, TokenSequence, Vocab, BOS, PAD};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("feedback source {0} is empty")]
    EmptySource(Source),
    #[error("no feedback sources configured")]
    NoSources,
    #[error("pretraining corpus is empty but lambda > 0")]
    EmptyPretrain,
    #[error("row {row}: truncating to {max_len} tokens would cut trained output tokens")]
    OutputTruncated { row: usize, max_len: usize },
    #[error("every row of the batch was dropped")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deterministic per-step generator.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    pub lambda: f64,
    /// Records sampled per step for the feedback term.
    pub feedback_batch: usize,
    /// Documents per step for the pretraining term.
    pub pretrain_batch: usize,
    /// Source sampling weights; empty means proportional to corpus sizes.
    pub dataset_weights: BTreeMap<Source, f64>,
}

impl MixtureConfig {
    pub const PAPER_FEEDBACK_BATCH: usize = 512;
    pub const PAPER_PRETRAIN_BATCH: usize = 2048;
    pub const PAPER_LAMBDA: f64 = 1.5;

    /// The full-scale batch sizes divided by `divisor` (1:4 ratio kept).
    pub fn scaled(divisor: usize) -> Self {
        let divisor = divisor.max(1);
        MixtureConfig {
            lambda: Self::PAPER_LAMBDA,
            feedback_batch: (Self::PAPER_FEEDBACK_BATCH / divisor).max(1),
            pretrain_batch: (Self::PAPER_PRETRAIN_BATCH / divisor).max(1),
            dataset_weights: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(BatchError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.feedback_batch == 0 {
            return Err(BatchError::Config("feedback_batch must be >= 1".into()));
        }
        if self.lambda > 0.0 && self.pretrain_batch == 0 {
            return Err(BatchError::Config("pretrain_batch must be >= 1 when lambda > 0".into()));
        }
        if !self.dataset_weights.is_empty() {
            let sum: f64 = self.dataset_weights.values().sum();
            if (sum - 1.0).abs() > 1e-9 || self.dataset_weights.values().any(|w| *w < 0.0) {
                return Err(BatchError::Config(format!("dataset_weights must sum to 1, got {sum}")));
            }
        }
        Ok(())
    }
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig::scaled(64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcmConfig {
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for FcmConfig {
    fn default() -> Self {
        FcmConfig { ratio_min: 0.0, ratio_max: 0.05 }
    }
}

impl FcmConfig {
    pub const OFF: FcmConfig = FcmConfig { ratio_min: 0.0, ratio_max: 0.0 };

    pub fn fixed(ratio: f64) -> Self {
        FcmConfig { ratio_min: ratio, ratio_max: ratio }
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        if 0.0 <= self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0 {
            Ok(())
        } else {
            Err(BatchError::Config(format!(
                "fcm ratios must satisfy 0 <= min <= max <= 1, got [{}, {}]",
                self.ratio_min, self.ratio_max
            )))
        }
    }
}

/// Draws a per-sequence ratio and flags each byte token as masked with that probability.
///
/// Specials (BOS/EOS/...) are never flagged. Ids and weights are returned untouched.
pub fn apply_fcm<R: Rng + ?Sized>(mut seq: TokenSequence, cfg: &FcmConfig, rng: &mut R) -> TokenSequence {
    let ratio =
        if cfg.ratio_max > cfg.ratio_min { rng.random_range(cfg.ratio_min..=cfg.ratio_max) } else { cfg.ratio_min };
    let vocab = Vocab::default();
    let eligible: Vec<usize> = (0..seq.ids.len()).filter(|&i| !vocab.is_special(seq.ids[i])).collect();
    if ratio <= 0.0 || eligible.is_empty() {
        return seq;
    }
    if ratio >= 1.0 {
        for &i in &eligible {
            seq.fcm[i] = true;
        }
        return seq;
    }
    // Geometric gaps between successes are equivalent to independent Bernoulli draws.
    let gaps = Geometric::new(ratio).expect("0 < ratio < 1");
    let mut at = gaps.sample(rng);
    while (at as usize) < eligible.len() {
        seq.fcm[eligible[at as usize]] = true;
        at = at.saturating_add(1).saturating_add(gaps.sample(rng));
    }
    seq
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSource {
    Feedback,
    Pretrain,
}

/// Row-major `rows x max_len` token, weight and FCM matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub rows: usize,
    pub max_len: usize,
    pub tokens: Vec<u32>,
    pub weights: Vec<f32>,
    pub fcm: Vec<bool>,
    pub lengths: Vec<usize>,
    pub sources: Vec<RowSource>,
}

/// One unpadded row of a batch.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub tokens: &'a [u32],
    pub weights: &'a [f32],
    pub fcm: &'a [bool],
}

impl TrainingBatch {
    pub fn row(&self, i: usize) -> Row<'_> {
        let start = i * self.max_len;
        let end = start + self.lengths[i];
        Row { tokens: &self.tokens[start..end], weights: &self.weights[start..end], fcm: &self.fcm[start..end] }
    }

    pub fn trainable_tokens(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

#[derive(Debug, Clone)]
pub struct Collated {
    pub batch: TrainingBatch,
    /// Input indices dropped because truncation would cut trained tokens.
    pub skipped: Vec<usize>,
}

/// Cuts a sequence to `max_len` by dropping tokens right after BOS.
///
/// Fails if any dropped token carries a nonzero weight.
pub fn truncate_prompt_side(seq: &TokenSequence, max_len: usize) -> Option<TokenSequence> {
    if seq.len() <= max_len {
        return Some(seq.clone());
    }
    if max_len < 2 {
        return None;
    }
    let overflow = seq.len() - max_len;
    let cut = 1..1 + overflow;
    if seq.weights[cut.clone()].iter().any(|&w| w != 0.0) {
        return None;
    }
    fn keep<T: Copy>(v: &[T], from: usize) -> Vec<T> {
        let mut out = vec![v[0]];
        out.extend_from_slice(&v[from..]);
        out
    }
    Some(TokenSequence {
        ids: keep(&seq.ids, cut.end),
        weights: keep(&seq.weights, cut.end),
        fcm: keep(&seq.fcm, cut.end),
    })
}

/// Right-pads sequences with PAD into one batch.
///
/// With `skip_truncated`, rows that cannot be shortened without losing
/// trained tokens are dropped and listed; otherwise they are an error.
pub fn collate(
    seqs: &[TokenSequence],
    sources: &[RowSource],
    max_len: usize,
    skip_truncated: bool,
) -> Result<Collated, BatchError> {
    let mut kept = Vec::with_capacity(seqs.len());
    let mut skipped = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        match truncate_prompt_side(s, max_len) {
            Some(t) => kept.push((t, sources[i])),
            None if skip_truncated => skipped.push(i),
            None => return Err(BatchError::OutputTruncated { row: i, max_len }),
        }
    }
    if kept.is_empty() {
        return Err(BatchError::EmptyBatch);
    }
    let rows = kept.len();
    let mut batch = TrainingBatch {
        rows,
        max_len,
        tokens: vec![PAD; rows * max_len],
        weights: vec![0.0; rows * max_len],
        fcm: vec![false; rows * max_len],
        lengths: Vec::with_capacity(rows),
        sources: Vec::with_capacity(rows),
    };
    for (r, (s, src)) in kept.into_iter().enumerate() {
        let o = r * max_len;
        batch.tokens[o..o + s.len()].copy_from_slice(&s.ids);
        batch.weights[o..o + s.len()].copy_from_slice(&s.weights);
        batch.fcm[o..o + s.len()].copy_from_slice(&s.fcm);
        batch.lengths.push(s.len());
        batch.sources.push(src);
    }
    Ok(Collated { batch, skipped })
}

/// Feedback corpora with their sampling distribution.
#[derive(Debug, Clone)]
pub struct FeedbackPool {
    sources: Vec<(Source, Arc<Corpus>)>,
    weights: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl FeedbackPool {
    /// `weights` empty means proportional to corpus sizes.
    pub fn new(corpora: BTreeMap<Source, Arc<Corpus>>, weights: &BTreeMap<Source, f64>) -> Result<Self, BatchError> {
        if corpora.is_empty() {
            return Err(BatchError::NoSources);
        }
        if let Some((s, _)) = corpora.iter().find(|(_, c)| c.is_empty()) {
            return Err(BatchError::EmptySource(*s));
        }
        let sources: Vec<_> = corpora.into_iter().collect();
        let raw: Vec<f64> = if weights.is_empty() {
            sources.iter().map(|(_, c)| c.len() as f64).collect()
        } else {
            sources
                .iter()
                .map(|(s, _)| {
                    weights
                        .get(s)
                        .copied()
                        .ok_or_else(|| BatchError::Config(format!("no dataset weight for source {s}")))
                })
                .collect::<Result<_, _>>()?
        };
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&weights).map_err(|e| BatchError::Config(e.to_string()))?;
        Ok(FeedbackPool { sources, weights, index })
    }

    /// Convenience constructor for a single corpus.
    pub fn single(source: Source, corpus: Corpus) -> Result<Self, BatchError> {
        FeedbackPool::new(BTreeMap::from([(source, Arc::new(corpus))]), &BTreeMap::new())
    }

    pub fn weights(&self) -> BTreeMap<Source, f64> {
        self.sources.iter().map(|(s, _)| *s).zip(self.weights.iter().copied()).collect()
    }

    pub fn total_records(&self) -> usize {
        self.sources.iter().map(|(_, c)| c.len()).sum()
    }

    /// Draws `size` records with replacement: source by weight, then uniform within it.
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<(Source, &PreferenceRecord)> {
        (0..size)
            .map(|_| {
                let (src, corpus) = &self.sources[self.index.sample(rng)];
                (*src, &corpus.records[rng.random_range(0..corpus.len())])
            })
            .collect()
    }
}

/// Proportional sampling over `corpora`.
pub fn sample_feedback_minibatch<'a, R: Rng + ?Sized>(
    pool: &'a FeedbackPool,
    size: usize,
    rng: &mut R,
) -> Vec<&'a PreferenceRecord> {
    pool.sample(size, rng).into_iter().map(|(_, r)| r).collect()
}

/// Plain-text documents, one per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainCorpus {
    pub docs: Vec<String>,
}

impl PretrainCorpus {
    pub fn from_text(text: &str) -> Self {
        PretrainCorpus { docs: text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BatchError> {
        Ok(Self::from_text(&fs::read_to_string(path)?))
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// A full-weight sequence for a random document; long documents yield a random window.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, max_len: usize, rng: &mut R) -> TokenSequence {
        let doc = &self.docs[rng.random_range(0..self.docs.len())];
        let seq = tokenize_plain(doc);
        if seq.len() <= max_len {
            return seq;
        }
        let body = &seq.ids[1..];
        let window = max_len - 1;
        let start = rng.random_range(0..=body.len() - window);
        let mut ids = vec![BOS];
        ids.extend_from_slice(&body[start..start + window]);
        let mut weights = vec![1.0; ids.len()];
        weights[0] = 0.0;
        let fcm = vec![false; ids.len()];
        TokenSequence { ids, weights, fcm }
    }
}

#[derive(Debug, Clone)]
pub struct StepBatches {
    pub step: u64,
    pub feedback: TrainingBatch,
    pub pretrain: Option<TrainingBatch>,
    /// Feedback rows dropped by truncation.
    pub skipped_rows: usize,
}

/// Produces the feedback (and optional pretraining) batch for any step index.
#[derive(Debug, Clone)]
pub struct StepBatcher {
    pub pool: FeedbackPool,
    pub pretrain: Option<Arc<PretrainCorpus>>,
    pub mixture: MixtureConfig,
    pub fcm: FcmConfig,
    pub mode: TrainingMode,
    pub chain: ChainSpec,
    pub registry: TemplateRegistry,
    pub max_len: usize,
    pub data_seed: u64,
}

impl StepBatcher {
    pub fn validate(&self) -> Result<(), BatchError> {
        self.mixture.validate()?;
        self.fcm.validate()?;
        if self.mixture.lambda > 0.0 && self.pretrain.as_ref().is_none_or(|p| p.is_empty()) {
            return Err(BatchError::EmptyPretrain);
        }
        if self.max_len < 2 {
            return Err(BatchError::Config("max_len must be >= 2".into()));
        }
        for task in [Task::Summary, Task::Dialogue, Task::Qa] {
            self.registry.eligible(task, self.chain.use_natural_language)?;
        }
        Ok(())
    }

    /// Builds, tokenizes and FCM-masks the examples for a set of records.
    pub fn feedback_sequences<R: Rng + ?Sized, T: Rng + ?Sized>(
        &self,
        records: &[&PreferenceRecord],
        data_rng: &mut R,
        template_rng: &mut T,
    ) -> Result<Vec<TokenSequence>, BatchError> {
        let vocab = Vocab::default();
        let mut out = Vec::with_capacity(records.len() * 2);
        for record in records {
            let eligible = self.registry.eligible(record.task, self.chain.use_natural_language)?;
            let template = sample_template(&eligible, template_rng).expect("eligible is non-empty");
            for ex in build_examples(record, self.mode, &self.chain, template)? {
                out.push(apply_fcm(tokenize_example(&ex, &vocab), &self.fcm, data_rng));
            }
        }
        Ok(out)
    }

    pub fn next_step(&self, step: u64) -> Result<StepBatches, BatchError> {
        let mut data_rng = step_rng(self.data_seed, step);
        let mut template_rng = step_rng(self.chain.order_sampling_seed, step);
        let records = sample_feedback_minibatch(&self.pool, self.mixture.feedback_batch, &mut data_rng);
        let seqs = self.feedback_sequences(&records, &mut data_rng, &mut template_rng)?;
        let sources = vec![RowSource::Feedback; seqs.len()];
        let fb = collate(&seqs, &sources, self.max_len, true)?;
        let pretrain = if self.mixture.lambda > 0.0 {
            let corpus = self.pretrain.as_ref().ok_or(BatchError::EmptyPretrain)?;
            if corpus.is_empty() {
                return Err(BatchError::EmptyPretrain);
            }
            let seqs: Vec<_> =
                (0..self.mixture.pretrain_batch).map(|_| corpus.sample_sequence(self.max_len, &mut data_rng)).collect();
            let sources = vec![RowSource::Pretrain; seqs.len()];
            Some(collate(&seqs, &sources, self.max_len, false)?.batch)
        } else {
            None
        };
        Ok(StepBatches { step, feedback: fb.batch, pretrain, skipped_rows: fb.skipped.len() })
    }
}

/// Runs a [`StepBatcher`] on a background thread behind a bounded queue.
pub struct Prefetcher {
    rx: Receiver<Result<StepBatches, BatchError>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(batcher: StepBatcher, steps: std::ops::Range<u64>, capacity: usize) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for step in steps {
                let item = batcher.next_step(step);
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    return;
                }
            }
        });
        Prefetcher { rx, handle: Some(handle) }
    }

    pub fn next(&self) -> Option<Result<StepBatches, BatchError>> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Unblock the producer before joining.
        let (_tx, rx) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::{encode, EOS};

    fn seq(len: usize) -> TokenSequence {
        let mut ids = vec![BOS];
        ids.extend(std::iter::repeat_n(97, len.saturating_sub(2)));
        ids.push(EOS);
        let mut weights = vec![0.0; ids.len()];
        *weights.last_mut().unwrap() = 1.0;
        let fcm = vec![false; ids.len()];
        TokenSequence { ids, weights, fcm }
    }

    #[test]
    fn collate_pads_right() {
        let c = collate(&[seq(3), seq(5)], &[RowSource::Feedback; 2], 5, true).unwrap();
        let b = c.batch;
        assert_eq!((b.rows, b.max_len), (2, 5));
        assert_eq!(&b.tokens[3..5], &[PAD, PAD]);
        for i in 0..b.tokens.len() {
            if b.tokens[i] == PAD {
                assert_eq!(b.weights[i], 0.0);
                assert!(!b.fcm[i]);
            }
        }
        assert_eq!(b.lengths, vec![3, 5]);
    }

    #[test]
    fn truncation_keeps_bos_and_trained_tokens() {
        let mut s = seq(10);
        s.weights[8] = 1.0;
        let t = truncate_prompt_side(&s, 6).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.ids[0], BOS);
        assert_eq!(t.trainable_tokens(), 2);
        s.weights[3] = 1.0;
        assert!(truncate_prompt_side(&s, 6).is_none());
        let c = collate(&[s.clone(), seq(4)], &[RowSource::Feedback; 2], 6, true).unwrap();
        assert_eq!(c.skipped, vec![0]);
        assert_eq!(c.batch.rows, 1);
        assert!(matches!(
            collate(&[s], &[RowSource::Feedback], 6, false),
            Err(BatchError::OutputTruncated { row: 0, .. })
        ));
    }

    #[test]
    fn fcm_zero_ratio_and_specials() {
        let mut rng = step_rng(1, 0);
        let s = apply_fcm(seq(50), &FcmConfig::OFF, &mut rng);
        assert!(s.fcm.iter().all(|&m| !m));
        let all = apply_fcm(seq(50), &FcmConfig::fixed(1.0), &mut rng);
        assert!(!all.fcm[0] && !all.fcm[49]);
        assert!(all.fcm[1..49].iter().all(|&m| m));
        assert_eq!(all.ids, seq(50).ids);
        assert_eq!(all.weights, seq(50).weights);
    }

    #[test]
    fn fcm_fixed_ratio_fraction() {
        let mut rng = step_rng(3, 0);
        let s = apply_fcm(seq(10_002), &FcmConfig::fixed(0.15), &mut rng);
        let frac = s.fcm.iter().filter(|&&m| m).count() as f64 / 10_000.0;
        assert!((frac - 0.15).abs() < 0.01, "{frac}");
    }

    #[test]
    fn mixture_scaling_keeps_ratio() {
        let m = MixtureConfig::scaled(64);
        assert_eq!((m.feedback_batch, m.pretrain_batch), (8, 32));
        assert_eq!(m.lambda, 1.5);
        let full = MixtureConfig::scaled(1);
        assert_eq!((full.feedback_batch, full.pretrain_batch), (512, 2048));
    }

    #[test]
    fn config_validation() {
        assert!(FcmConfig { ratio_min: 0.1, ratio_max: 0.05 }.validate().is_err());
        assert!(FcmConfig { ratio_min: 0.0, ratio_max: 1.5 }.validate().is_err());
        let mut m = MixtureConfig::default();
        m.lambda = -1.0;
        assert!(m.validate().is_err());
        let mut m = MixtureConfig::default();
        m.dataset_weights = BTreeMap::from([(Source::Hh, 0.3), (Source::Webgpt, 0.3)]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn pretrain_window() {
        let corpus = PretrainCorpus::from_text("short\n\n0123456789abcdefghij\n");
        assert_eq!(corpus.docs.len(), 2);
        let mut rng = step_rng(0, 0);
        for _ in 0..20 {
            let s = corpus.sample_sequence(8, &mut rng);
            assert!(s.len() <= 8);
            assert_eq!(s.ids[0], BOS);
            assert_eq!(s.weights[0], 0.0);
            assert!(s.weights[1..].iter().all(|&w| w == 1.0));
        }
        let one = PretrainCorpus::from_text("ab");
        assert_eq!(one.sample_sequence(8, &mut rng).ids, [vec![BOS], encode("ab"), vec![EOS]].concat());
    }
}
