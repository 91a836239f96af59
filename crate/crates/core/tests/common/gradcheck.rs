//! Central finite differences against the analytic backward pass, in f64.

#![allow(dead_code)]

use hindsight_core::batch::{apply_fcm, collate, step_rng, FcmConfig, RowSource, TrainingBatch};
use hindsight_core::chain::{build_examples, ChainSpec, TrainingMode};
use hindsight_core::feedback::builtin_templates;
use hindsight_core::model::{batch_loss, loss_and_grads, ModelConfig, ModelParams};
use hindsight_core::synthetic::SyntheticTask;
use hindsight_core::token::{tokenize_example, Vocab};

pub const H: f64 = 1e-5;
/// Below this magnitude central differences are dominated by roundoff
/// (about eps * |loss| / h), so relative error is taken against the floor.
pub const FLOOR: f64 = 1e-5;

pub fn batch_for(modes: &[TrainingMode], seed: u64) -> TrainingBatch {
    let task = SyntheticTask::default();
    let corpus = task.corpus(modes.len(), seed);
    let templates = builtin_templates();
    let simple = templates.iter().find(|t| t.simple).unwrap();
    let mut rng = step_rng(seed, 0);
    let mut seqs = Vec::new();
    for (record, &mode) in corpus.records.iter().zip(modes) {
        for ex in build_examples(record, mode, &ChainSpec::default(), simple).unwrap() {
            seqs.push(apply_fcm(tokenize_example(&ex, &Vocab::default()), &FcmConfig::fixed(0.1), &mut rng));
        }
    }
    let sources = vec![RowSource::Feedback; seqs.len()];
    collate(&seqs, &sources, 48, false).unwrap().batch
}

pub struct Report {
    pub max_rel: f64,
    pub at: String,
    /// Max relative error over entries with |grad| >= 1e-3.
    pub max_rel_large: f64,
}

pub fn check(params: &ModelParams<f64>, batch: &TrainingBatch) -> Report {
    let (_, grads) = loss_and_grads(params, batch).unwrap();
    let mut p = params.clone();
    let mut report = Report { max_rel: 0.0, at: String::new(), max_rel_large: 0.0 };
    for i in 0..p.len() {
        let orig = p.data[i];
        p.data[i] = orig + H;
        let up = batch_loss(&p, batch).unwrap();
        p.data[i] = orig - H;
        let down = batch_loss(&p, batch).unwrap();
        p.data[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let analytic = grads.data[i];
        let scale = analytic.abs().max(numeric.abs());
        let rel = (analytic - numeric).abs() / scale.max(FLOOR);
        if rel > report.max_rel {
            let (name, idx) = p.locate(i).unwrap();
            report.max_rel = rel;
            report.at = format!("{name}[{idx}] analytic={analytic:e} numeric={numeric:e}");
        }
        if scale >= 1e-3 {
            report.max_rel_large = report.max_rel_large.max(rel);
        }
    }
    report
}

pub fn assert_ok(label: &str, r: &Report) {
    assert!(r.max_rel < 1e-4, "{label}: max relative error {:e} at {}", r.max_rel, r.at);
    assert!(r.max_rel_large < 1e-5, "{label}: large-gradient relative error {:e}", r.max_rel_large);
}

pub fn config() -> ModelConfig {
    ModelConfig::new(16, 2, 4, 64)
}
