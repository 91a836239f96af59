use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;

use hindsight_core::batch::{step_rng, FeedbackPool, PretrainCorpus, StepBatcher};
use hindsight_core::chain::{build_examples, ChainSpec, ExampleDump, LossPolicy, TrainingMode};
use hindsight_core::checkpoint::{load_checkpoint, save_checkpoint};
use hindsight_core::corpus::{load_corpus, write_normalized, Corpus, LoadReport, Schema, Source, Task, TiePolicy};
use hindsight_core::eval::{evaluate_suite, EvalOptions};
use hindsight_core::feedback::{sample_template, TemplateRegistry};
use hindsight_core::gen::{generate as sample, refine_rounds, SamplingParams};
use hindsight_core::model::{init_params, ModelParams};
use hindsight_core::optim::{MetricsWriter, TrainConfig, Trainer};
use hindsight_core::synthetic::SyntheticTask;
use hindsight_serve::session::{load_pairs, LabelPair};
use hindsight_serve::store::LabelStore;
use hindsight_serve::{AppState, ServeConfig};

use crate::config::RunConfig;
use crate::{SamplingArgs, Usage};

fn schema(s: &str) -> Result<Schema> {
    s.parse::<Schema>().map_err(|e| Usage(e).into())
}

fn ties(keep: bool) -> TiePolicy {
    if keep {
        TiePolicy::Keep
    } else {
        TiePolicy::Skip
    }
}

fn print_report(path: &Path, corpus: &Corpus, report: &LoadReport) {
    eprintln!("{}: {} records, {} skipped", path.display(), corpus.len(), report.skipped);
    for (reason, n) in &report.skip_reasons {
        eprintln!("  skipped {reason}: {n}");
    }
    for e in &report.examples {
        eprintln!("  {e}");
    }
}

pub fn ingest(source: &str, keep_ties: bool, input: &Path, output: &Path) -> Result<()> {
    let schema = schema(source)?;
    let (corpus, report) =
        load_corpus(input, schema, ties(keep_ties)).with_context(|| format!("loading {}", input.display()))?;
    print_report(input, &corpus, &report);
    write_normalized(&corpus, output).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

fn registry(templates: Option<&Path>) -> Result<TemplateRegistry> {
    let mut reg = TemplateRegistry::default();
    if let Some(p) = templates {
        let n = reg.merge_file(p).with_context(|| format!("loading templates {}", p.display()))?;
        tracing::info!("loaded {n} templates from {}", p.display());
    }
    Ok(reg)
}

#[allow(clippy::too_many_arguments)]
pub fn build(
    mode: TrainingMode,
    chain_length: usize,
    natural_language: bool,
    loss_policy: LossPolicy,
    templates: Option<&Path>,
    seed: u64,
    input: &Path,
    output: &Path,
) -> Result<()> {
    if !(1..=2).contains(&chain_length) {
        bail!(Usage(format!("--chain-length must be 1 or 2, got {chain_length}")));
    }
    let reg = registry(templates)?;
    let spec =
        ChainSpec { chain_length, use_natural_language: natural_language, order_sampling_seed: seed, loss_policy };
    let (corpus, report) = load_corpus(input, Schema::Normalized, TiePolicy::Skip)
        .with_context(|| format!("loading {}", input.display()))?;
    print_report(input, &corpus, &report);
    let mut out = BufWriter::new(fs::File::create(output).with_context(|| format!("creating {}", output.display()))?);
    let mut n = 0;
    for (i, record) in corpus.records.iter().enumerate() {
        let eligible = reg.eligible(record.task, natural_language)?;
        let mut rng = step_rng(seed, i as u64);
        let template = sample_template(&eligible, &mut rng).expect("eligible is non-empty");
        for ex in build_examples(record, mode, &spec, template).with_context(|| format!("record {}", record.id))? {
            serde_json::to_writer(&mut out, &ExampleDump::new(&ex))?;
            out.write_all(b"\n")?;
            n += 1;
        }
    }
    out.flush()?;
    eprintln!("wrote {n} examples to {}", output.display());
    Ok(())
}

fn load_feedback(cfg: &RunConfig) -> Result<FeedbackPool> {
    if cfg.data.feedback.is_empty() {
        bail!(Usage("config: data.feedback lists no files".into()));
    }
    let mut by_source: BTreeMap<Source, Vec<_>> = BTreeMap::new();
    for f in &cfg.data.feedback {
        let schema = schema(&f.schema)?;
        let (corpus, report) =
            load_corpus(&f.path, schema, ties(f.keep_ties)).with_context(|| format!("loading {}", f.path.display()))?;
        print_report(&f.path, &corpus, &report);
        for r in corpus.records {
            by_source.entry(r.source).or_default().push(r);
        }
    }
    let corpora = by_source.into_iter().map(|(s, rs)| (s, Arc::new(Corpus::new(rs)))).collect();
    FeedbackPool::new(corpora, &cfg.mixture.dataset_weights).map_err(|e| Usage(format!("config: {e}")).into())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    if cfg.mixture.lambda > 0.0 && cfg.data.pretrain.is_none() {
        bail!(Usage("config: mixture.lambda > 0 needs data.pretrain".into()));
    }
    let pool = load_feedback(cfg)?;
    let pretrain = match &cfg.data.pretrain {
        Some(p) if cfg.mixture.lambda > 0.0 => {
            let corpus = PretrainCorpus::load(p).with_context(|| format!("loading {}", p.display()))?;
            if corpus.is_empty() {
                bail!("{}: no pretraining documents", p.display());
            }
            Some(Arc::new(corpus))
        }
        _ => None,
    };
    let batcher = StepBatcher {
        pool,
        pretrain,
        mixture: cfg.mixture.clone(),
        fcm: cfg.fcm,
        mode: cfg.train.mode,
        chain: cfg.chain.clone(),
        registry: registry(cfg.data.templates.as_deref())?,
        max_len: cfg.train.max_len,
        data_seed: cfg.seeds.data(),
    };
    batcher.validate().map_err(|e| Usage(format!("config: {e}")))?;

    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;

    let tcfg = TrainConfig {
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: Some(cfg.out_dir.clone()),
        ema_decay: cfg.train.ema_decay,
        divergence_factor: cfg.train.divergence_factor,
        prefetch: cfg.train.prefetch,
    };
    let (mut trainer, metrics_name) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.params.cfg != cfg.model.to_config() {
                bail!(Usage(format!("{}: model shape differs from the config", path.display())));
            }
            let state =
                ckpt.state.ok_or_else(|| anyhow::anyhow!("{}: checkpoint has no optimizer state", path.display()))?;
            let name = format!("metrics-from-{}.jsonl", state.step);
            (Trainer::resume(ckpt.params, state, batcher, cfg.optim.clone(), tcfg)?, name)
        }
        None => {
            let params = init_params(&cfg.model.to_config(), cfg.seeds.init())?;
            (Trainer::new(params, batcher, cfg.optim.clone(), tcfg), "metrics.jsonl".to_string())
        }
    };
    let start_step = trainer.state.step;
    tracing::info!(
        "training {} params, mode {}, steps {}..{}",
        trainer.params.len(),
        cfg.train.mode.as_str(),
        start_step,
        cfg.optim.max_steps
    );
    let metrics = MetricsWriter::create(cfg.out_dir.join(&metrics_name))?;
    let started = Instant::now();
    let mut last = None;
    let log_every = cfg.train.log_every.max(1);
    let result = trainer.train(|m| {
        metrics.send(m);
        if m.step % log_every == 0 || m.step == cfg.optim.max_steps {
            tracing::info!("step {} loss {:.4} tokens {}", m.step, m.loss_total, m.tokens_trained);
        }
        last = Some(m.clone());
    });
    metrics.finish()?;
    result?;

    let final_path = cfg.out_dir.join("final.ckpt");
    let checksum = save_checkpoint(&final_path, &trainer.params, Some(&trainer.state))?;
    let summary = json!({
        "steps": trainer.state.step,
        "steps_run": trainer.state.step - start_step,
        "final_loss": last.as_ref().map(|m| m.loss_total),
        "loss_ema": trainer.state.loss_ema,
        "seconds": started.elapsed().as_secs_f64(),
        "checkpoint": final_path,
        "checksum": checksum,
        "metrics": cfg.out_dir.join(&metrics_name),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_params(path: &Path) -> Result<ModelParams<f32>> {
    Ok(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.params)
}

fn sampling(base: SamplingParams, args: &SamplingArgs) -> Result<SamplingParams> {
    let mut p = base;
    if let Some(t) = args.temperature {
        p.temperature = t;
    }
    if let Some(k) = args.top_k {
        p.top_k = k;
    }
    if let Some(n) = args.max_new_tokens {
        p.max_new_tokens = n;
    }
    if !args.stop.is_empty() {
        p.stop = args.stop.clone();
    }
    if args.ignore_eos {
        p.stop_at_eos = false;
    }
    p.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(p)
}

pub fn generate(ckpt: &Path, prompt: &str, condition: &str, args: &SamplingArgs) -> Result<()> {
    let params = load_params(ckpt)?;
    let p = sampling(SamplingParams::default(), args)?;
    let mut rng = step_rng(args.seed, 0);
    println!("{}", sample(&params, prompt, condition, &p, &mut rng)?);
    Ok(())
}

pub fn refine(ckpt: &Path, prompt: &str, previous: &str, rounds: usize, args: &SamplingArgs) -> Result<()> {
    if rounds == 0 {
        bail!(Usage("--rounds must be >= 1".into()));
    }
    if previous.trim().is_empty() {
        bail!(Usage("--previous must not be empty".into()));
    }
    let params = load_params(ckpt)?;
    let p = sampling(SamplingParams::default(), args)?;
    let mut rng = step_rng(args.seed, 0);
    for text in refine_rounds(&params, prompt, previous, rounds, &p, &mut rng)? {
        println!("{text}");
    }
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    task: Task,
    data: &Path,
    condition: &str,
    out: Option<&Path>,
    args: &SamplingArgs,
) -> Result<()> {
    let loaded = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (corpus, report) = load_corpus(data, Schema::Normalized, TiePolicy::Keep)
        .with_context(|| format!("loading {}", data.display()))?;
    print_report(data, &corpus, &report);
    let opts = EvalOptions {
        condition: (!condition.is_empty()).then(|| condition.to_string()),
        sampling: sampling(SamplingParams::greedy(), args)?,
        seed: args.seed,
    };
    let mut result = evaluate_suite(&loaded.params, &corpus, task, &opts)?;
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&result)?).with_context(|| format!("writing {}", out.display()))?;
        let resolved = json!({
            "checkpoint": ckpt,
            "checksum": loaded.checksum,
            "data": data,
            "task": task,
            "options": opts,
        });
        fs::write(resolved_path(out), serde_json::to_string_pretty(&resolved)?)?;
    }
    result.per_record = None;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

/// `report.json` -> `report.config.json`.
fn resolved_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

pub fn serve(
    addr: std::net::SocketAddr,
    pairs: Option<&Path>,
    corpus: Option<&Path>,
    store: &Path,
    ckpt: Option<&Path>,
    static_dir: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let pairs = match (pairs, corpus) {
        (Some(p), _) => load_pairs(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(c)) => {
            let (corpus, report) = load_corpus(c, Schema::Normalized, TiePolicy::Keep)
                .with_context(|| format!("loading {}", c.display()))?;
            print_report(c, &corpus, &report);
            corpus.records.iter().map(LabelPair::from_record).collect()
        }
        (None, None) => bail!(Usage("serve needs --pairs or --corpus".into())),
    };
    let model = ckpt.map(load_params).transpose()?;
    let store = LabelStore::open(store).with_context(|| format!("opening {}", store.display()))?;
    tracing::info!("{} pairs, {} stored labels", pairs.len(), store.snapshot().len());
    let state = AppState::new(pairs, store, model, seed);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(hindsight_serve::run(state, ServeConfig { addr, static_dir }))?;
    Ok(())
}

pub fn synth(records: usize, out: &Path, pretrain: Option<&Path>, pretrain_lines: usize, seed: u64) -> Result<()> {
    if records == 0 {
        bail!(Usage("--records must be >= 1".into()));
    }
    let task = SyntheticTask::default();
    let corpus = task.corpus(records, seed);
    write_normalized(&corpus, out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = pretrain {
        let docs = task.pretrain(pretrain_lines, seed.wrapping_add(1)).docs;
        let mut text = docs.join("\n");
        text.push('\n');
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("wrote {} records to {}", corpus.len(), out.display());
    Ok(())
}
