//! The command implementations, independent of argument parsing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use delib_core::decode::GenerateMode;
use delib_core::tasks::{generate_corpus, load_corpus, save_corpus, Corpus, Split, Splits};
use delib_core::tensor::ParamStore;
use delib_core::trainer::{evaluate as eval_pairs, EvalExample, EvalOptions, MetricRecord, Phase, Trainer};
use delib_core::verify::{check_gradients, run_suite, CheckResult, VerifyConfig, VerifyReport};
use log::info;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn corpus_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.tsv", split.name()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `train.tsv`, `dev.tsv` and `test.tsv` under `out`.
pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let splits = generate_corpus(&cfg.task)?;
    create_dir(out)?;
    let mut paths = Vec::new();
    for split in Split::ALL {
        let path = corpus_path(out, split);
        save_corpus(splits.get(split), &path)?;
        info!("wrote {} pairs to {}", splits.get(split).pairs.len(), path.display());
        paths.push(path);
    }
    Ok(paths)
}

/// Reads the three splits from `dir`, or generates them from the task
/// specification when no directory is given.
pub fn load_splits(cfg: &RunConfig, dir: Option<&Path>) -> Result<Splits, Failure> {
    let Some(dir) = dir else {
        return Ok(generate_corpus(&cfg.task)?);
    };
    let load = |split: Split| -> Result<Corpus, Failure> {
        let path = corpus_path(dir, split);
        let c = load_corpus(&path).map_err(|e| Failure::from(e).context(path.display()))?;
        check_vocab(cfg.task.vocab, &c, &path)?;
        Ok(c)
    };
    Ok(Splits { train: load(Split::Train)?, dev: load(Split::Dev)?, test: load(Split::Test)? })
}

fn check_vocab(model_vocab: usize, corpus: &Corpus, path: &Path) -> Result<(), Failure> {
    if corpus.spec.vocab != model_vocab {
        return Err(Failure::usage(format!(
            "{}: corpus vocabulary size {} does not match the model's {}",
            path.display(),
            corpus.spec.vocab,
            model_vocab
        )));
    }
    Ok(())
}

fn append_records(path: &Path, records: &[MetricRecord]) -> Result<(), Failure> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Failure::runtime(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Failure::runtime(e.to_string()))
}

fn eval_options(cfg: &RunConfig, seed: u64) -> EvalOptions {
    EvalOptions { mode: cfg.eval.mode, t_max: cfg.t_max(), info_gain: cfg.eval.info_gain, g: cfg.regularizer.g, band: cfg.eval.band, seed }
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub records: Vec<MetricRecord>,
    pub params: ParamStore,
}

/// Pretraining followed by the configured scheme. After every epoch the
/// configured splits are evaluated, one record per split is appended to
/// the metric log and the checkpoint is replaced. A failing epoch leaves the
/// previous checkpoint in place.
pub fn train(cfg: &RunConfig, out: &Path, corpus: Option<&Path>, init: Option<&Path>) -> Result<TrainOutcome, Failure> {
    cfg.validate()?;
    let splits = load_splits(cfg, corpus)?;
    if splits.train.pairs.is_empty() {
        return Err(Failure::usage("training corpus is empty"));
    }
    create_dir(out)?;
    let mut trainer = match init {
        None => Trainer::new(cfg.train_config())?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.model_config() != cfg.model_config() {
                return Err(Failure::usage(format!("{}: model configuration differs from the run's", path.display())));
            }
            Trainer::from_params(cfg.train_config(), ck.param_store()?, 0)?
        }
    };
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(METRICS_FILE);
    Checkpoint::new(cfg, trainer.epoch, &trainer.params).save(&ck_path)?;
    let start = Instant::now();
    let mut records = Vec::new();
    let result = trainer.run(&splits.train.pairs, |t, phase, loss| {
        let mut batch = Vec::new();
        for &split in &cfg.eval.splits {
            let pairs = &splits.get(split).pairs;
            if pairs.is_empty() {
                continue;
            }
            let opts = eval_options(cfg, t.eval_options(false).seed);
            let (summary, _) = eval_pairs(&t.model, &t.params, pairs, &opts)?;
            batch.push(t.record(phase, split, Some(loss), summary, start));
        }
        let train_ter = batch.first().map(|r| r.eval.ter_second).unwrap_or(f64::NAN);
        info!("epoch {} {:?}: loss {loss:.4}, ter {train_ter:.4}", t.epoch, phase);
        append_records(&log_path, &batch).map_err(|f| delib_core::error::Error::Data(f.message))?;
        Checkpoint::new(cfg, t.epoch, &t.params).save(&ck_path).map_err(|f| delib_core::error::Error::Data(f.message))?;
        records.extend(batch);
        Ok(())
    });
    result.map_err(|e| Failure::from(e).context(format!("training stopped; last good checkpoint is {}", ck_path.display())))?;
    if records.is_empty() {
        append_records(&log_path, &[])?;
    }
    Ok(TrainOutcome { checkpoint: ck_path, records, params: trainer.params })
}

#[derive(Serialize)]
struct DumpLine<'a> {
    index: usize,
    #[serde(flatten)]
    example: &'a EvalExample,
}

/// Evaluates a checkpoint on one corpus. With `out`, writes the metric
/// record to `eval_<split>.json` and one attention dump per example to
/// `attention_<split>.jsonl`.
pub fn evaluate(ck: &Checkpoint, corpus: &Corpus, mode: Option<GenerateMode>, out: Option<&Path>) -> Result<MetricRecord, Failure> {
    check_vocab(ck.config.task.vocab, corpus, Path::new("corpus"))?;
    let mut cfg = ck.config.clone();
    if let Some(m) = mode {
        m.validate()?;
        cfg.eval.mode = m;
    }
    let trainer = Trainer::from_params(cfg.train_config(), ck.param_store()?, ck.epoch)?;
    let start = Instant::now();
    let opts = eval_options(&cfg, trainer.eval_options(false).seed);
    let (summary, examples) = eval_pairs(&trainer.model, &trainer.params, &corpus.pairs, &opts)?;
    let phase = match cfg.scheme {
        delib_core::training::Scheme::Separate { .. } => Phase::Separate,
        _ => Phase::Joint,
    };
    let record = trainer.record(phase, corpus.split, None, summary, start);
    if let Some(dir) = out {
        create_dir(dir)?;
        let name = corpus.split.name();
        let json = serde_json::to_string_pretty(&record).map_err(|e| Failure::runtime(e.to_string()))?;
        fs::write(dir.join(format!("eval_{name}.json")), json).map_err(|e| Failure::runtime(e.to_string()))?;
        let path = dir.join(format!("attention_{name}.jsonl"));
        let file = File::create(&path).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        for (index, example) in examples.iter().enumerate() {
            let line = serde_json::to_string(&DumpLine { index, example }).map_err(|e| Failure::runtime(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Failure::runtime(e.to_string()))?;
        }
        w.flush().map_err(|e| Failure::runtime(e.to_string()))?;
    }
    Ok(record)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    create_dir(dir)?;
    let json = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(dir.join(name), json + "\n").map_err(|e| Failure::runtime(e.to_string()))
}

/// Runs the full check suite; with `out`, writes `verify.json`.
pub fn verify(cfg: &VerifyConfig, out: Option<&Path>) -> Result<VerifyReport, Failure> {
    let report = run_suite(cfg)?;
    if let Some(dir) = out {
        write_json(dir, "verify.json", &report)?;
    }
    Ok(report)
}

/// Runs only the finite-difference checks; with `out`, writes
/// `gradcheck.json`.
pub fn gradcheck(cfg: &VerifyConfig, out: Option<&Path>) -> Result<Vec<CheckResult>, Failure> {
    cfg.validate()?;
    let checks = check_gradients(cfg)?;
    if let Some(dir) = out {
        write_json(dir, "gradcheck.json", &checks)?;
    }
    Ok(checks)
}
