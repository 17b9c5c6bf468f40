//! Epoch-level training: teacher-forced pretraining of the first pass, then
//! one of the joint or separate schemes, with per-epoch evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::GenerateMode;
use crate::delib::{Deliberation, IntermediateFeatures};
use crate::error::{Error, Result};
use crate::metrics::ErrorTally;
use crate::seq2seq::{AttentionMap, ModelConfig};
use crate::tasks::{Pair, Split};
use crate::tensor::{GradientMap, ParamStore};
use crate::training::{
    self, diagonal_band_mass, draw_intermediate_samples, guided_attention_grad, guided_attention_loss, sgd_update, IntermediateMode,
    SampleConfig, SampleSet, Scheme, Strategy,
};

const SHUFFLE_STREAM: u64 = 1 << 32;
const SAMPLE_STREAM: u64 = 2 << 32;
const EVAL_STREAM: u64 = 3 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    0.05
}
fn default_clip() -> f64 {
    5.0
}
fn default_batch() -> usize {
    16
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_g")]
    pub g: f64,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_g() -> f64 {
    0.2
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig { enabled: false, gamma: default_gamma(), g: default_g() }
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scheme: Scheme,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub optim: OptimConfig,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub intermediate_mode: IntermediateMode,
    /// Longest intermediate or output sequence, EOS included.
    pub t_max: usize,
    pub seed: u64,
}

fn default_strategy() -> Strategy {
    Strategy::Ancestral
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scheme.validate()?;
        self.sample_config().validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Contract(format!("optim.lr must be positive, got {}", o.lr)));
        }
        if !(o.clip > 0.0) {
            return Err(Error::Contract(format!("optim.clip must be positive, got {}", o.clip)));
        }
        if o.batch_size == 0 {
            return Err(Error::Contract("optim.batch_size must be positive".into()));
        }
        let r = &self.regularizer;
        if !(r.gamma >= 0.0 && r.gamma.is_finite()) || !(r.g > 0.0) {
            return Err(Error::Contract("regularizer needs gamma >= 0 and g > 0".into()));
        }
        if let (Scheme::JointLoss { .. }, Strategy::Beam { .. } | Strategy::NoisyGreedy { .. }) = (self.scheme, self.strategy) {
            return Err(Error::Contract("joint_loss draws its own Gumbel samples; strategy must be ancestral".into()));
        }
        Ok(())
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig { m: self.scheme.samples(), strategy: self.strategy, mode: self.intermediate_mode, t_max: self.t_max }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
    Separate,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub split: Split,
    pub scheme: String,
    pub train_loss: Option<f64>,
    pub eval: EvalSummary,
    pub wall_time_s: f64,
}

/// Corpus-level evaluation of two-pass inference.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean teacher-forced `−log p(y | x; θᴵ)`.
    pub nll_first: f64,
    /// Mean teacher-forced `−log p(y | ŷᴵ, x; θᴵᴵ)` given the decoded first pass.
    pub nll_second: f64,
    pub ter_first: f64,
    pub ter_second: f64,
    pub exact_first: f64,
    pub exact_second: f64,
    /// Mean guided-attention loss of the second pass's intermediate attention.
    pub guided_attention: f64,
    /// Mean attention mass of that attention within the diagonal band.
    pub band_mass: f64,
    pub info_gain_free_running: Option<f64>,
    pub info_gain_teacher_forced: Option<f64>,
}

/// Per-example decoding trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub first: Vec<u32>,
    pub second: Vec<u32>,
    pub attn_first: AttentionMap,
    pub attn_x: AttentionMap,
    pub attn_y: AttentionMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: GenerateMode,
    pub t_max: usize,
    pub info_gain: bool,
    pub g: f64,
    pub band: f64,
    pub seed: u64,
}

impl EvalOptions {
    pub fn greedy(t_max: usize) -> Self {
        EvalOptions { mode: GenerateMode::Greedy, t_max, info_gain: false, g: default_g(), band: 0.2, seed: 0 }
    }
}

/// Two-pass decoding of every pair, with metrics for both passes.
pub fn evaluate(model: &Deliberation, params: &ParamStore, pairs: &[Pair], opts: &EvalOptions) -> Result<(EvalSummary, Vec<EvalExample>)> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty corpus".into()));
    }
    let (mut first_tally, mut second_tally) = (ErrorTally::default(), ErrorTally::default());
    let mut s = EvalSummary::default();
    let mut examples = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let out = model.two_pass_generate(params, &pair.x, opts.mode, opts.t_max, opts.seed.wrapping_add(i as u64))?;
        first_tally.add(&pair.y, &out.first.tokens);
        second_tally.add(&pair.y, &out.second.tokens);
        let feats = IntermediateFeatures::from_generated(&out.first);
        s.nll_first -= model.first().teacher_forced_logprob(params, &pair.x, &pair.y)?.total;
        s.nll_second -= model.second_pass_logprob(params, &pair.x, &feats, &pair.y)?.total;

        let first_scoring = model.first().teacher_forced_logprob(params, &pair.x, &out.first.tokens)?;
        let second_scoring = model.second_pass_logprob(params, &pair.x, &feats, &out.second.tokens)?;
        s.guided_attention += guided_attention_loss(&second_scoring.attn_y, opts.g)?;
        s.band_mass += diagonal_band_mass(&second_scoring.attn_y, opts.band);
        examples.push(EvalExample {
            first: out.first.tokens.ids().to_vec(),
            second: out.second.tokens.ids().to_vec(),
            attn_first: first_scoring.attn,
            attn_x: second_scoring.attn_x,
            attn_y: second_scoring.attn_y,
        });
    }
    let n = pairs.len() as f64;
    s.nll_first /= n;
    s.nll_second /= n;
    s.guided_attention /= n;
    s.band_mass /= n;
    s.ter_first = first_tally.token_error_rate();
    s.ter_second = second_tally.token_error_rate();
    s.exact_first = first_tally.exact_match();
    s.exact_second = second_tally.exact_match();
    if opts.info_gain {
        s.info_gain_free_running =
            Some(training::info_gain_estimate(model, params, pairs, IntermediateMode::FreeRunning, opts.t_max, opts.seed)?);
        s.info_gain_teacher_forced =
            Some(training::info_gain_estimate(model, params, pairs, IntermediateMode::TeacherForced, opts.t_max, opts.seed)?);
    }
    Ok((s, examples))
}

/// Training state: model, parameters and the epoch counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Deliberation,
    pub params: ParamStore,
    pub cfg: TrainConfig,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Deliberation::new(cfg.model)?;
        let params = model.init_params(cfg.seed);
        Ok(Trainer { model, params, cfg, epoch: 0 })
    }

    pub fn from_params(cfg: TrainConfig, params: ParamStore, epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Deliberation::new(cfg.model)?;
        for name in model.all_names() {
            let want = model_shape(&model, &name);
            let got = params.require(&name)?.shape();
            if want.as_deref() != Some(got) {
                return Err(Error::Data(format!("parameter {name} has shape {got:?}, expected {want:?}")));
            }
        }
        Ok(Trainer { model, params, cfg, epoch })
    }

    fn epoch_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream + self.epoch as u64);
        rng
    }

    /// Shuffled batches of one epoch, with one sampling seed per batch.
    fn batches(&self, n: usize) -> Vec<(Vec<usize>, u64)> {
        let mut rng = self.epoch_rng(SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.chunks(self.cfg.optim.batch_size).map(|c| (c.to_vec(), rng.gen::<u64>())).collect()
    }

    fn apply(&mut self, grads: &GradientMap, trainable: &[String]) -> Result<()> {
        let g = grads.restrict(trainable);
        sgd_update(&mut self.params, &g, self.cfg.optim.lr, self.cfg.optim.clip)?;
        Ok(())
    }

    /// One epoch of teacher-forced training of θᴵ; returns the mean loss.
    pub fn pretrain_epoch(&mut self, data: &[Pair]) -> Result<f64> {
        let names = self.model.first_names();
        let mut total = 0.0;
        for (idx, _) in self.batches(data.len()) {
            let batch: Vec<Pair> = idx.iter().map(|&i| data[i].clone()).collect();
            let (report, grads) = training::separate_train_first(self.model.first(), &self.params, &batch)?;
            let loss = report.losses["nll"];
            check_finite(loss)?;
            total += loss * batch.len() as f64;
            self.apply(&grads, &names)?;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    /// Intermediate outputs of the frozen first pass for every example;
    /// example `i` uses its own stream.
    pub fn collect_samples(&self, data: &[Pair]) -> Result<Vec<SampleSet>> {
        let cfg = self.cfg.sample_config();
        data.iter()
            .enumerate()
            .map(|(i, pair)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(SAMPLE_STREAM + i as u64);
                draw_intermediate_samples(self.model.first(), &self.params, pair, &cfg, &mut rng)
            })
            .collect()
    }

    /// One epoch of θᴵᴵ training on stored samples (θᴵ, including the shared
    /// encoder, stays fixed).
    pub fn separate_epoch(&mut self, data: &[Pair], stored: &[SampleSet]) -> Result<f64> {
        if stored.len() != data.len() {
            return Err(Error::Data(format!("{} sample sets for {} examples", stored.len(), data.len())));
        }
        let names = self.model.second_only_names();
        let reg = self.cfg.regularizer;
        let mut total = 0.0;
        for (idx, _) in self.batches(data.len()) {
            let batch: Vec<Pair> = idx.iter().map(|&i| data[i].clone()).collect();
            let samples: Vec<SampleSet> = idx.iter().map(|&i| stored[i].clone()).collect();
            let (loss, grads) = if reg.enabled {
                let (r, g) = training::combined_second_pass_loss(&self.model, &self.params, &batch, &samples, reg.gamma, reg.g)?;
                (r.losses["combined"], g)
            } else {
                let (r, g) = training::separate_train_second(&self.model, &self.params, &batch, &samples)?;
                (r.losses["separate"], g)
            };
            check_finite(loss)?;
            total += loss * batch.len() as f64;
            self.apply(&grads, &names)?;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    /// One epoch of a joint scheme over all parameters.
    pub fn joint_epoch(&mut self, data: &[Pair]) -> Result<f64> {
        let names = self.model.all_names();
        let reg = self.cfg.regularizer;
        let mut total = 0.0;
        for (idx, seed) in self.batches(data.len()) {
            let batch: Vec<Pair> = idx.iter().map(|&i| data[i].clone()).collect();
            let out = match self.cfg.scheme {
                Scheme::JointGrad { .. } => training::joint_grad_step(&self.model, &self.params, &batch, &self.cfg.sample_config(), seed)?,
                Scheme::JointLoss { m, tau, relaxation } => training::joint_loss_step(
                    &self.model,
                    &self.params,
                    &batch,
                    m,
                    tau,
                    relaxation,
                    self.cfg.intermediate_mode,
                    self.cfg.t_max,
                    seed,
                )?,
                Scheme::Separate { .. } => return Err(Error::Contract("separate scheme has no joint epoch".into())),
            };
            let mut grads = out.combined()?;
            let mut loss = out.report.losses["joint"];
            if reg.enabled {
                let (la, ga) = guided_attention_grad(&self.model, &self.params, &batch, &out.samples, reg.g)?;
                grads.add_scaled(&ga, reg.gamma)?;
                loss += reg.gamma * la;
            }
            check_finite(loss)?;
            total += loss * batch.len() as f64;
            self.apply(&grads, &names)?;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    /// Full schedule: pretraining, then the configured scheme. `on_epoch`
    /// receives the phase, epoch number and mean training loss after every
    /// epoch together with the trainer state.
    pub fn run<F>(&mut self, data: &[Pair], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, Phase, f64) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::Contract("training corpus is empty".into()));
        }
        for _ in 0..self.cfg.optim.pretrain_epochs {
            let loss = self.pretrain_epoch(data)?;
            on_epoch(self, Phase::Pretrain, loss)?;
        }
        match self.cfg.scheme {
            Scheme::Separate { .. } => {
                let stored = self.collect_samples(data)?;
                for _ in 0..self.cfg.optim.epochs {
                    let loss = self.separate_epoch(data, &stored)?;
                    on_epoch(self, Phase::Separate, loss)?;
                }
            }
            _ => {
                for _ in 0..self.cfg.optim.epochs {
                    let loss = self.joint_epoch(data)?;
                    on_epoch(self, Phase::Joint, loss)?;
                }
            }
        }
        Ok(())
    }

    pub fn eval_options(&self, info_gain: bool) -> EvalOptions {
        EvalOptions {
            info_gain,
            g: self.cfg.regularizer.g,
            seed: {
                let mut rng = self.epoch_rng(EVAL_STREAM);
                rng.gen()
            },
            ..EvalOptions::greedy(self.cfg.t_max)
        }
    }

    pub fn record(&self, phase: Phase, split: Split, train_loss: Option<f64>, eval: EvalSummary, start: Instant) -> MetricRecord {
        MetricRecord {
            epoch: self.epoch,
            phase,
            split,
            scheme: scheme_name(&self.cfg.scheme).to_string(),
            train_loss,
            eval,
            wall_time_s: start.elapsed().as_secs_f64(),
        }
    }
}

pub fn scheme_name(s: &Scheme) -> &'static str {
    match s {
        Scheme::JointGrad { .. } => "joint_grad",
        Scheme::JointLoss { .. } => "joint_loss",
        Scheme::Separate { .. } => "separate",
    }
}

fn model_shape(model: &Deliberation, name: &str) -> Option<Vec<usize>> {
    model.first().param_specs().into_iter().chain(model.second_only_specs()).find(|s| s.name == name).map(|s| s.shape)
}

fn check_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { op: "training step", detail: format!("loss is {loss}") })
    }
}
