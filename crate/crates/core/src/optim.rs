//! Adam and the training loop over the feedback (+ pretraining) objective.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{BatchError, Prefetcher, StepBatcher};
use crate::chain::TrainingMode;
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::model::{loss_and_grads, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in {name}[{index}]")]
    NonFiniteGradient { name: String, index: usize },
    #[error("loss diverged at step {step}: ema {ema} > {factor} x initial {initial}")]
    DivergenceDetected { step: u64, ema: f64, initial: f64, factor: f64 },
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("parameter and moment shapes differ")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub max_steps: u64,
    /// Linear warmup length; 0 disables it.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            learning_rate: 3e-4,
            max_steps: 1000,
            warmup_steps: 100,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.learning_rate > 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(OptimError::Config(format!("{self:?}")))
        }
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected Adam update. On a non-finite gradient nothing is modified
    /// and the offending index is returned.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32], cfg: &OptimizerConfig) -> Result<(), usize> {
        assert!(params.len() == grads.len() && grads.len() == self.m.len());
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(i);
        }
        let clip = match cfg.grad_clip {
            Some(c) => {
                let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                if norm > c {
                    (c / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        // Bias corrections folded into the step size; epsilon is added to sqrt(v) uncorrected.
        let alpha = (cfg.lr_at(self.step) * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t))) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, cfg.epsilon as f32);
        for i in 0..params.len() {
            let g = grads[i] * clip;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= alpha * self.m[i] / (self.v[i].sqrt() + eps);
        }
        Ok(())
    }
}

pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(OptimError::ShapeMismatch);
    }
    state.update(&mut params.data, &grads.data, cfg).map_err(|i| {
        let (name, index) = params.locate(i).unwrap_or_else(|| ("?".into(), i));
        OptimError::NonFiniteGradient { name, index }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed steps; the next step uses RNG stream `step`.
    pub step: u64,
    pub adam: AdamState,
    pub loss_ema: Option<f64>,
    pub initial_loss: Option<f64>,
    pub data_seed: u64,
    pub order_seed: u64,
}

impl TrainState {
    pub fn new(n_params: usize, data_seed: u64, order_seed: u64) -> Self {
        TrainState {
            step: 0,
            adam: AdamState::new(n_params),
            loss_ema: None,
            initial_loss: None,
            data_seed,
            order_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_feedback: f64,
    pub loss_pretrain: Option<f64>,
    pub loss_total: f64,
    pub tokens_trained: usize,
    pub mode: TrainingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub ema_decay: f64,
    pub divergence_factor: f64,
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            checkpoint_every: None,
            checkpoint_dir: None,
            ema_decay: 0.9,
            divergence_factor: 10.0,
            prefetch: 2,
        }
    }
}

pub struct Trainer {
    pub params: ModelParams<f32>,
    pub state: TrainState,
    pub batcher: StepBatcher,
    pub opt: OptimizerConfig,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(params: ModelParams<f32>, batcher: StepBatcher, opt: OptimizerConfig, cfg: TrainConfig) -> Self {
        let state = TrainState::new(params.len(), batcher.data_seed, batcher.chain.order_sampling_seed);
        Trainer { params, state, batcher, opt, cfg }
    }

    /// Continues from a saved state; the batcher's seeds are taken from the state.
    pub fn resume(
        params: ModelParams<f32>,
        state: TrainState,
        mut batcher: StepBatcher,
        opt: OptimizerConfig,
        cfg: TrainConfig,
    ) -> Result<Self, OptimError> {
        if state.adam.m.len() != params.len() {
            return Err(OptimError::ShapeMismatch);
        }
        batcher.data_seed = state.data_seed;
        batcher.chain.order_sampling_seed = state.order_seed;
        Ok(Trainer { params, state, batcher, opt, cfg })
    }

    /// Runs until `opt.max_steps` completed steps, calling `on_step` after each one.
    pub fn train(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<(), OptimError> {
        self.opt.validate()?;
        self.batcher.validate()?;
        if self.state.step >= self.opt.max_steps {
            return Ok(());
        }
        let prefetch = Prefetcher::spawn(self.batcher.clone(), self.state.step..self.opt.max_steps, self.cfg.prefetch);
        while self.state.step < self.opt.max_steps {
            let batches = prefetch.next().expect("producer covers every step")?;
            let metrics = self.step_on(&batches)?;
            on_step(&metrics);
            if let (Some(every), Some(dir)) = (self.cfg.checkpoint_every, &self.cfg.checkpoint_dir) {
                if every > 0 && self.state.step.is_multiple_of(every) {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(format!("step-{:06}.ckpt", self.state.step));
                    save_checkpoint(&path, &self.params, Some(&self.state))?;
                }
            }
        }
        Ok(())
    }

    fn step_on(&mut self, b: &crate::batch::StepBatches) -> Result<StepMetrics, OptimError> {
        debug_assert_eq!(b.step, self.state.step);
        let lambda = self.batcher.mixture.lambda;
        let (loss_feedback, mut grads) = loss_and_grads(&self.params, &b.feedback)?;
        let mut tokens_trained = b.feedback.trainable_tokens();
        let (loss_pretrain, loss_total) = match (&b.pretrain, lambda > 0.0) {
            (Some(pre), true) => {
                let (lp, gp) = loss_and_grads(&self.params, pre)?;
                let l = lambda as f32;
                for (g, p) in grads.data.iter_mut().zip(&gp.data) {
                    *g += l * p;
                }
                tokens_trained += pre.trainable_tokens();
                (Some(lp), loss_feedback + lambda * lp)
            }
            _ => (None, loss_feedback),
        };
        adam_step(&mut self.params, &grads, &mut self.state.adam, &self.opt)?;
        self.state.step += 1;
        let initial = *self.state.initial_loss.get_or_insert(loss_total);
        let ema = match self.state.loss_ema {
            Some(e) => self.cfg.ema_decay * e + (1.0 - self.cfg.ema_decay) * loss_total,
            None => loss_total,
        };
        self.state.loss_ema = Some(ema);
        if !ema.is_finite() || ema > self.cfg.divergence_factor * initial {
            return Err(OptimError::DivergenceDetected {
                step: self.state.step,
                ema,
                initial,
                factor: self.cfg.divergence_factor,
            });
        }
        Ok(StepMetrics {
            step: self.state.step,
            loss_feedback,
            loss_pretrain,
            loss_total,
            tokens_trained,
            mode: self.batcher.mode,
        })
    }
}

/// Writes metrics as JSON lines from a background thread behind a bounded queue.
pub struct MetricsWriter {
    tx: Option<SyncSender<StepMetrics>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let (tx, rx) = sync_channel::<StepMetrics>(256);
        let handle = std::thread::spawn(move || {
            for m in rx {
                serde_json::to_writer(&mut out, &m)?;
                out.write_all(b"\n")?;
            }
            out.flush()
        });
        Ok(MetricsWriter { tx: Some(tx), handle: Some(handle) })
    }

    pub fn send(&self, m: &StepMetrics) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(m.clone());
        }
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.close()
    }

    fn close(&mut self) -> std::io::Result<()> {
        self.tx.take();
        match self.handle.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(std::io::Error::other("metrics writer panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_warmup() -> OptimizerConfig {
        OptimizerConfig { warmup_steps: 0, ..Default::default() }
    }

    #[test]
    fn first_step_formula() {
        let cfg = no_warmup();
        for g in [0.5f32, -3.0, 1e-4] {
            let mut w = [1.0f32];
            let mut st = AdamState::new(1);
            st.update(&mut w, &[g], &cfg).unwrap();
            let expect = 1.0 - cfg.learning_rate * g as f64 / (g.abs() as f64 + cfg.epsilon / (1.0 - cfg.beta2).sqrt());
            assert!((w[0] as f64 - expect).abs() < 1e-7, "{} vs {expect}", w[0]);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = no_warmup();
        let mut w = [1.0f32, -2.0];
        let mut st = AdamState::new(2);
        st.update(&mut w, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(w, [1.0, -2.0]);
        assert_eq!(st.step, 1);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        st.update(&mut w, &[0.0, 0.0], &cfg).unwrap();
        assert!((st.m[0] - 0.45).abs() < 1e-7);
        assert!((st.v[0] - 0.2375).abs() < 1e-7);
    }

    #[test]
    fn scalar_convergence() {
        let cfg = OptimizerConfig { learning_rate: 0.1, ..no_warmup() };
        let mut w = [0.0f32];
        let mut st = AdamState::new(1);
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            st.update(&mut w, &[g], &cfg).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.05, "{}", w[0]);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        use crate::model::{init_params, ModelConfig};
        let cfg = ModelConfig::new(16, 1, 4, 8);
        let mut p: ModelParams<f32> = init_params(&cfg, 0).unwrap();
        let mut g = ModelParams::zeros(&cfg);
        let idx = p.layout().iter().find(|t| t.name == "layers.0.mlp.up").unwrap().offset + 3;
        g.data[idx] = f32::NAN;
        let before = p.clone();
        let mut st = AdamState::new(p.len());
        match adam_step(&mut p, &g, &mut st, &no_warmup()) {
            Err(OptimError::NonFiniteGradient { name, index }) => {
                assert_eq!((name.as_str(), index), ("layers.0.mlp.up", 3));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn warmup_and_clip() {
        let cfg = OptimizerConfig { warmup_steps: 10, ..Default::default() };
        assert!((cfg.lr_at(1) - 3e-5).abs() < 1e-12);
        assert_eq!(cfg.lr_at(10), 3e-4);
        assert_eq!(cfg.lr_at(500), 3e-4);
        let clip = OptimizerConfig { grad_clip: Some(1.0), ..no_warmup() };
        let mut a = [0.0f32];
        let mut b = [0.0f32];
        AdamState::new(1).update(&mut a, &[100.0], &clip).unwrap();
        AdamState::new(1).update(&mut b, &[1.0], &no_warmup()).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
        assert!(OptimizerConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
    }
}
