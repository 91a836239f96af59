//! Trainer behavior: resume, mixture accounting, divergence.

use std::sync::Arc;

use hindsight_core::batch::{BatchError, FcmConfig, FeedbackPool, MixtureConfig, StepBatcher};
use hindsight_core::chain::{ChainSpec, TrainingMode};
use hindsight_core::checkpoint::load_checkpoint;
use hindsight_core::corpus::Source;
use hindsight_core::feedback::TemplateRegistry;
use hindsight_core::model::{init_params, ModelConfig};
use hindsight_core::optim::{OptimError, OptimizerConfig, StepMetrics, TrainConfig, Trainer};
use hindsight_core::synthetic::SyntheticTask;

fn batcher(lambda: f64, with_pretrain: bool) -> StepBatcher {
    let task = SyntheticTask::default();
    StepBatcher {
        pool: FeedbackPool::single(Source::Synthetic, task.corpus(100, 1)).unwrap(),
        pretrain: with_pretrain.then(|| Arc::new(task.pretrain(100, 2))),
        mixture: MixtureConfig { lambda, ..MixtureConfig::default() },
        fcm: FcmConfig::default(),
        mode: TrainingMode::Coh,
        chain: ChainSpec { order_sampling_seed: 5, ..ChainSpec::default() },
        registry: TemplateRegistry::default(),
        max_len: 48,
        data_seed: 4,
    }
}

fn opt(steps: u64) -> OptimizerConfig {
    OptimizerConfig { max_steps: steps, warmup_steps: 3, learning_rate: 1e-3, ..OptimizerConfig::default() }
}

fn cfg() -> ModelConfig {
    ModelConfig::new(16, 1, 2, 48)
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let tc =
        TrainConfig { checkpoint_every: Some(6), checkpoint_dir: Some(dir.path().into()), ..TrainConfig::default() };
    let mut full = Trainer::new(init_params(&cfg(), 1).unwrap(), batcher(1.5, true), opt(12), tc);
    let mut full_metrics = Vec::new();
    full.train(|m| full_metrics.push(m.clone())).unwrap();

    let ck = load_checkpoint(dir.path().join("step-000006.ckpt")).unwrap();
    // A different seed in the batcher must be overridden by the saved state.
    let mut other = batcher(1.5, true);
    other.data_seed = 999;
    let mut resumed = Trainer::resume(ck.params, ck.state.unwrap(), other, opt(12), TrainConfig::default()).unwrap();
    let mut tail: Vec<StepMetrics> = Vec::new();
    resumed.train(|m| tail.push(m.clone())).unwrap();

    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.state, full.state);
    assert_eq!(tail, full_metrics[6..]);
}

#[test]
fn lambda_zero_needs_no_pretraining_corpus() {
    let mut t = Trainer::new(init_params(&cfg(), 2).unwrap(), batcher(0.0, false), opt(5), TrainConfig::default());
    let mut seen = Vec::new();
    t.train(|m| seen.push(m.clone())).unwrap();
    assert_eq!(seen.len(), 5);
    for m in &seen {
        assert_eq!(m.loss_pretrain, None);
        assert_eq!(m.loss_total.to_bits(), m.loss_feedback.to_bits());
    }
}

#[test]
fn lambda_without_corpus_is_rejected() {
    let mut t = Trainer::new(init_params(&cfg(), 2).unwrap(), batcher(1.0, false), opt(5), TrainConfig::default());
    let err = t.train(|_| {}).unwrap_err();
    assert!(matches!(err, OptimError::Batch(BatchError::EmptyPretrain)), "{err:?}");
}

#[test]
fn training_reduces_loss() {
    let mut t = Trainer::new(init_params(&cfg(), 3).unwrap(), batcher(0.0, false), opt(60), TrainConfig::default());
    let mut losses = Vec::new();
    t.train(|m| losses.push(m.loss_feedback)).unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
    assert!(tail < head * 0.8, "loss {head} -> {tail}");
}

#[test]
fn divergence_guard_fires() {
    let tc = TrainConfig { divergence_factor: 0.5, ..TrainConfig::default() };
    let mut t = Trainer::new(init_params(&cfg(), 4).unwrap(), batcher(0.0, false), opt(5), tc);
    let err = t.train(|_| {}).unwrap_err();
    assert!(matches!(err, OptimError::DivergenceDetected { step: 1, .. }), "{err:?}");
}
