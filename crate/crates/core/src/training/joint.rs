//! Joint and separate training of the two passes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{draw_intermediate_samples, gumbel_noise, IntermediateMode, Sample, SampleConfig, SampleSet};
use super::{nll_teacher_forcing, require_batch, value_and_grad, LossReport, StepOutput};
use crate::decode::{self, argmax, StepDecoder};
use crate::delib::{Deliberation, IntermediateInput};
use crate::error::{Error, Result};
use crate::seq2seq::{FirstPassDecoder, Seq2Seq};
use crate::tasks::Pair;
use crate::tensor::{Binder, GradientMap, Graph, ParamStore, Tensor, Var};
use crate::vocab::{Token, TokenSeq, EOS};

/// Forward value of a reparameterised sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Hard one-hot forward, relaxed backward.
    #[default]
    StraightThrough,
    /// Relaxed one-hot both ways.
    Relaxed,
}

/// `log F̂ᴵ` of a stored sample on `g`, conditioned on the same history the
/// sample was drawn with.
fn sample_logprob_var(g: &mut Graph, dec: &FirstPassDecoder, sample: &Sample, mode: IntermediateMode, reference: &[Token]) -> Result<Var> {
    match mode {
        IntermediateMode::FreeRunning => Ok(decode::teacher_force(g, dec, sample.tokens.ids())?.total),
        IntermediateMode::TeacherForced => {
            if sample.drawn == 0 || sample.drawn > reference.len() {
                return Err(Error::Data(format!(
                    "forced-history sample with {} drawn tokens for a reference of length {}",
                    sample.drawn,
                    reference.len()
                )));
            }
            let mut state = dec.start(g)?;
            let mut prev = dec.vocab().bos();
            let mut picks = Vec::with_capacity(sample.drawn);
            for t in 0..sample.drawn {
                let out = dec.step(g, &state, prev)?;
                picks.push(g.pick(out.log_probs, sample.tokens.ids()[t] as usize)?);
                state = out.state;
                prev = reference[t];
            }
            g.add_n(&picks)
        }
    }
}

fn second_logprob_grad(model: &Deliberation, params: &ParamStore, pair: &Pair, sample: &Sample) -> Result<(f64, GradientMap)> {
    let feats = sample.intermediate(model.config().extras)?;
    value_and_grad(params, &model.second_names(), |g, b| {
        let vars = model.bind_second(g, b)?;
        let dec = vars.decoder(g, &pair.x, IntermediateInput::Tokens(&feats))?;
        Ok(decode::teacher_force(g, &dec, pair.y.ids())?.total)
    })
}

fn check_samples(batch: &[Pair], samples: &[SampleSet]) -> Result<()> {
    require_batch(batch)?;
    if samples.len() != batch.len() {
        return Err(Error::Data(format!("{} sample sets for {} examples", samples.len(), batch.len())));
    }
    if let Some(i) = samples.iter().position(SampleSet::is_empty) {
        return Err(Error::Data(format!("no stored samples for example {i}")));
    }
    Ok(())
}

/// Score-function estimator on given samples:
/// θᴵ gets `−(1/M) Σ_m log F̂ᴵᴵ⁽ᵐ⁾ ∇log F̂ᴵ⁽ᵐ⁾`, θᴵᴵ gets
/// `−(1/M) Σ_m ∇log F̂ᴵᴵ⁽ᵐ⁾`, both averaged over the batch.
pub fn joint_grad_with_samples(model: &Deliberation, params: &ParamStore, batch: &[Pair], samples: &[SampleSet]) -> Result<StepOutput> {
    let start = Instant::now();
    check_samples(batch, samples)?;
    let names1 = model.first_names();
    let mut first = GradientMap::zeros_like(params, &names1)?;
    let mut second = GradientMap::zeros_like(params, &model.second_names())?;
    let mut loss = 0.0;
    let nb = batch.len() as f64;
    for (pair, set) in batch.iter().zip(samples) {
        let scale = 1.0 / (set.len() as f64 * nb);
        for s in &set.samples {
            let (_, g1) = value_and_grad(params, &names1, |g, b| {
                let vars = model.first().bind(g, b)?;
                let dec = vars.decoder(g, &pair.x)?;
                sample_logprob_var(g, &dec, s, set.mode, pair.y.ids())
            })?;
            let (lp2, g2) = second_logprob_grad(model, params, pair, s)?;
            first.add_scaled(&g1, -lp2 * scale)?;
            second.add_scaled(&g2, -scale)?;
            loss -= lp2 * scale;
        }
    }
    let report = LossReport::timed(start).with_loss("joint", loss).with_norm("first", &first).with_norm("second", &second);
    Ok(StepOutput { report, first, second, samples: samples.to_vec() })
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws samples (example `i` from stream `i` of `seed`) and applies
/// [`joint_grad_with_samples`].
pub fn joint_grad_step(model: &Deliberation, params: &ParamStore, batch: &[Pair], cfg: &SampleConfig, seed: u64) -> Result<StepOutput> {
    require_batch(batch)?;
    let samples = batch
        .iter()
        .enumerate()
        .map(|(i, pair)| draw_intermediate_samples(model.first(), params, pair, cfg, &mut example_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    joint_grad_with_samples(model, params, batch, &samples)
}

struct Rollout {
    rows: Vec<Var>,
    extras: Vec<Var>,
    tokens: Vec<Token>,
    logprob: f64,
    drawn: usize,
}

/// Gumbel-softmax rollout of the first pass. The hard token at step `t` is
/// `argmax(log p_t + z_t)`; the row fed onwards is
/// `softmax((log p_t + z_t) / τ)`, straight-through or not.
#[allow(clippy::too_many_arguments)]
fn relaxed_rollout(
    g: &mut Graph,
    dec: &FirstPassDecoder,
    noise: &[Vec<f64>],
    tau: f64,
    relaxation: Relaxation,
    mode: IntermediateMode,
    reference: &[Token],
    t_max: usize,
) -> Result<Rollout> {
    let steps = match mode {
        IntermediateMode::FreeRunning => t_max,
        IntermediateMode::TeacherForced => {
            if reference.len() > t_max {
                return Err(Error::Contract("reference longer than t_max".into()));
            }
            reference.len()
        }
    };
    let emit = dec.vocab().emit_size();
    if noise.len() < steps || noise.iter().take(steps).any(|z| z.len() != emit) {
        return Err(Error::Contract(format!("need {steps} noise rows of width {emit}")));
    }
    let mut state = dec.start(g)?;
    let mut input = dec.embed_token(g, dec.vocab().bos())?;
    let mut out = Rollout { rows: Vec::new(), extras: Vec::new(), tokens: Vec::new(), logprob: 0.0, drawn: 0 };
    for (t, z) in noise.iter().take(steps).enumerate() {
        let step = dec.step_embedded(g, &state, input)?;
        let lp = g.value(step.log_probs);
        let perturbed: Vec<f64> = lp.iter().zip(z).map(|(a, b)| a + b).collect();
        let hard = argmax(&perturbed);
        out.logprob += lp[hard];
        let zv = g.constant_vec(z.clone());
        let pert = g.add(step.log_probs, zv)?;
        let scaled = g.scale(pert, 1.0 / tau);
        let soft = g.softmax(scaled)?;
        let row = match relaxation {
            Relaxation::StraightThrough => g.straight_through(Tensor::one_hot(emit, hard).into_data(), soft)?,
            Relaxation::Relaxed => soft,
        };
        let mut parts = vec![step.state.s];
        parts.extend(&step.state.contexts);
        out.extras.push(g.concat(&parts)?);
        out.rows.push(row);
        out.tokens.push(hard as Token);
        if hard as Token == EOS {
            break;
        }
        input = match mode {
            IntermediateMode::FreeRunning => dec.vars.dec_emb.mix(g, row)?,
            IntermediateMode::TeacherForced => dec.embed_token(g, reference[t])?,
        };
        state = step.state;
    }
    out.drawn = out.tokens.len();
    if mode == IntermediateMode::TeacherForced && out.tokens.last() != Some(&EOS) && out.tokens.len() < t_max {
        out.tokens.push(EOS);
        out.rows.push(g.constant_vec(Tensor::one_hot(emit, EOS as usize).into_data()));
        let last = *out.extras.last().expect("at least one step");
        out.extras.push(last);
    }
    Ok(out)
}

/// Reparameterised joint loss `−(1/M) Σ_m log p(y | ỹᴵ⁽ᵐ⁾, x; θᴵᴵ)` with the
/// given Gumbel noise (`noise[i][m]` holds one row per step for sample `m`
/// of example `i`). θᴵ receives the pathwise gradient through the relaxed
/// samples.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_with_noise(
    model: &Deliberation,
    params: &ParamStore,
    batch: &[Pair],
    noise: &[Vec<Vec<Vec<f64>>>],
    tau: f64,
    relaxation: Relaxation,
    mode: IntermediateMode,
    t_max: usize,
) -> Result<StepOutput> {
    let start = Instant::now();
    require_batch(batch)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    if noise.len() != batch.len() || noise.iter().any(Vec::is_empty) {
        return Err(Error::Contract("need at least one noise draw per example".into()));
    }
    let names1 = model.first_names();
    let names2 = model.second_names();
    let mut first = GradientMap::zeros_like(params, &names1)?;
    let mut second = GradientMap::zeros_like(params, &names2)?;
    let mut loss = 0.0;
    let mut sets = Vec::with_capacity(batch.len());
    let nb = batch.len() as f64;
    for (pair, draws) in batch.iter().zip(noise) {
        let scale = 1.0 / (draws.len() as f64 * nb);
        let mut set = SampleSet { samples: Vec::new(), mode };
        for z in draws {
            let mut g = Graph::new();
            let mut b1 = Binder::new(params);
            let mut b2 = Binder::new(params);
            let v1 = model.first().bind(&mut g, &mut b1)?;
            let dec1 = v1.decoder(&mut g, &pair.x)?;
            let roll = relaxed_rollout(&mut g, &dec1, z, tau, relaxation, mode, pair.y.ids(), t_max)?;
            let v2 = model.bind_second(&mut g, &mut b2)?;
            let extras = model.config().extras.then_some(&roll.extras[..]);
            let dec2 = v2.decoder(&mut g, &pair.x, IntermediateInput::Relaxed { rows: &roll.rows, extras })?;
            let lp2 = decode::teacher_force(&mut g, &dec2, pair.y.ids())?.total;
            let grads = g.backward(lp2)?;
            first.add_scaled(&b1.gradient_map(&grads, &names1)?, -scale)?;
            second.add_scaled(&b2.gradient_map(&grads, &names2)?, -scale)?;
            loss -= g.scalar(lp2) * scale;
            set.samples.push(Sample {
                tokens: TokenSeq::new(roll.tokens),
                logprob: roll.logprob,
                drawn: roll.drawn,
                features: roll.extras.iter().map(|&v| g.value(v).to_vec()).collect(),
                relaxed: Some(roll.rows.iter().map(|&v| g.value(v).to_vec()).collect()),
                noise: Some(z.clone()),
            });
        }
        sets.push(set);
    }
    let report = LossReport::timed(start).with_loss("joint", loss).with_norm("first", &first).with_norm("second", &second);
    Ok(StepOutput { report, first, second, samples: sets })
}

/// Draws Gumbel noise (example `i` from stream `i` of `seed`) and applies
/// [`joint_loss_with_noise`].
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_step(
    model: &Deliberation,
    params: &ParamStore,
    batch: &[Pair],
    m: usize,
    tau: f64,
    relaxation: Relaxation,
    mode: IntermediateMode,
    t_max: usize,
    seed: u64,
) -> Result<StepOutput> {
    if m == 0 {
        return Err(Error::Contract("at least one sample is required".into()));
    }
    let emit = model.vocab().emit_size();
    let noise: Vec<_> = (0..batch.len())
        .map(|i| {
            let mut rng = example_rng(seed, i);
            (0..m).map(|_| gumbel_noise(t_max, emit, &mut rng)).collect()
        })
        .collect();
    joint_loss_with_noise(model, params, batch, &noise, tau, relaxation, mode, t_max)
}

/// First phase of separate training: teacher-forced NLL of θᴵ.
pub fn separate_train_first(model: &Seq2Seq, params: &ParamStore, batch: &[Pair]) -> Result<(LossReport, GradientMap)> {
    let start = Instant::now();
    let (loss, grads) = nll_teacher_forcing(model, params, batch)?;
    let report = LossReport::timed(start).with_loss("nll", loss).with_norm("first", &grads);
    Ok((report, grads))
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + (values.iter().map(|v| (v - max).exp()).sum::<f64>() / values.len() as f64).ln()
}

/// Second phase of separate training on stored samples. Reports the trained
/// loss `−(1/M) Σ log F̂ᴵᴵ` as `separate` and `−log((1/M) Σ F̂ᴵᴵ)` as
/// `separate_log_mean`. The gradient covers θᴵᴵ names only.
pub fn separate_train_second(
    model: &Deliberation,
    params: &ParamStore,
    batch: &[Pair],
    stored: &[SampleSet],
) -> Result<(LossReport, GradientMap)> {
    let start = Instant::now();
    check_samples(batch, stored)?;
    let mut grads = GradientMap::zeros_like(params, &model.second_names())?;
    let (mut loss, mut log_mean) = (0.0, 0.0);
    let nb = batch.len() as f64;
    for (pair, set) in batch.iter().zip(stored) {
        let scale = 1.0 / (set.len() as f64 * nb);
        let mut lps = Vec::with_capacity(set.len());
        for s in &set.samples {
            let (lp2, g2) = second_logprob_grad(model, params, pair, s)?;
            grads.add_scaled(&g2, -scale)?;
            loss -= lp2 * scale;
            lps.push(lp2);
        }
        log_mean -= log_mean_exp(&lps) / nb;
    }
    let report = LossReport::timed(start).with_loss("separate", loss).with_loss("separate_log_mean", log_mean).with_norm("second", &grads);
    Ok((report, grads))
}

fn entropies(g: &Graph, log_probs: &[Var]) -> Vec<f64> {
    log_probs.iter().map(|&v| -g.value(v).iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>()).collect()
}

/// Mean over the batch of `(1/T) Σ_t [H(p(y_t | y_<t, x; θᴵ)) −
/// H(p(y_t | y_<t, ỹᴵ, x; θᴵᴵ))]`, with one intermediate output ỹᴵ per
/// example drawn ancestrally (example `i` from stream `i` of `seed`) under
/// the given history mode. Entropies are in nats.
pub fn info_gain_estimate(
    model: &Deliberation,
    params: &ParamStore,
    batch: &[Pair],
    mode: IntermediateMode,
    t_max: usize,
    seed: u64,
) -> Result<f64> {
    require_batch(batch)?;
    let cfg = SampleConfig { mode, ..SampleConfig::ancestral(1, t_max) };
    let mut total = 0.0;
    for (i, pair) in batch.iter().enumerate() {
        let set = draw_intermediate_samples(model.first(), params, pair, &cfg, &mut example_rng(seed, i))?;
        let feats = set.samples[0].intermediate(model.config().extras)?;

        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let v1 = model.first().bind(&mut g, &mut b)?;
        let dec1 = v1.decoder(&mut g, &pair.x)?;
        let s1 = decode::teacher_force(&mut g, &dec1, pair.y.ids())?;
        let h1 = entropies(&g, &s1.log_probs);
        let v2 = model.bind_second(&mut g, &mut b)?;
        let dec2 = v2.decoder(&mut g, &pair.x, IntermediateInput::Tokens(&feats))?;
        let s2 = decode::teacher_force(&mut g, &dec2, pair.y.ids())?;
        let h2 = entropies(&g, &s2.log_probs);

        total += h1.iter().zip(&h2).map(|(a, b)| a - b).sum::<f64>() / h1.len() as f64;
    }
    Ok(total / batch.len() as f64)
}
