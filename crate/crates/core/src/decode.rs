//! Pass-agnostic autoregressive decoding: teacher forcing, greedy, sampling
//! and beam search over anything implementing [`StepDecoder`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::softmax;
use crate::tensor::{Graph, Var};
use crate::vocab::{Token, TokenSeq, Vocab, EOS};

/// Recurrent state carried between decoder steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub s: Var,
    /// Context vectors of the previous step, one per attention module.
    pub contexts: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct StepOut {
    pub state: DecoderState,
    /// One alignment row per attention module.
    pub alphas: Vec<Var>,
    pub logits: Var,
    pub log_probs: Var,
}

pub trait StepDecoder {
    fn vocab(&self) -> Vocab;

    fn start(&self, g: &mut Graph) -> Result<DecoderState>;

    fn embed_token(&self, g: &mut Graph, token: Token) -> Result<Var>;

    /// Advances one step from an already-embedded previous token.
    fn step_embedded(&self, g: &mut Graph, state: &DecoderState, input: Var) -> Result<StepOut>;

    fn step(&self, g: &mut Graph, state: &DecoderState, prev: Token) -> Result<StepOut> {
        let input = self.embed_token(g, prev)?;
        self.step_embedded(g, state, input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerateMode {
    Greedy,
    Sample { temperature: f64 },
    Beam { width: usize },
}

impl GenerateMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GenerateMode::Greedy => Ok(()),
            GenerateMode::Sample { temperature } if temperature > 0.0 && temperature.is_finite() => Ok(()),
            GenerateMode::Sample { temperature } => {
                Err(Error::Contract(format!("sampling temperature must be positive, got {temperature}")))
            }
            GenerateMode::Beam { width } if width >= 1 => Ok(()),
            GenerateMode::Beam { .. } => Err(Error::Contract("beam width must be at least 1".into())),
        }
    }
}

/// Teacher-forced scoring graph of one reference sequence.
#[derive(Clone, Debug)]
pub struct Scored {
    pub total: Var,
    pub per_step: Vec<Var>,
    /// `alphas[k][t]`: alignment row of attention module `k` at step `t`.
    pub alphas: Vec<Vec<Var>>,
    pub log_probs: Vec<Var>,
}

pub fn teacher_force<D: StepDecoder + ?Sized>(g: &mut Graph, dec: &D, y: &[Token]) -> Result<Scored> {
    if y.is_empty() {
        return Err(Error::Contract("cannot score an empty sequence".into()));
    }
    let mut state = dec.start(g)?;
    let mut prev = dec.vocab().bos();
    let mut per_step = Vec::with_capacity(y.len());
    let mut alphas: Vec<Vec<Var>> = Vec::new();
    let mut log_probs = Vec::with_capacity(y.len());
    for &tok in y {
        let out = dec.step(g, &state, prev)?;
        per_step.push(g.pick(out.log_probs, tok as usize)?);
        if alphas.is_empty() {
            alphas = vec![Vec::with_capacity(y.len()); out.alphas.len()];
        }
        for (k, a) in out.alphas.iter().enumerate() {
            alphas[k].push(*a);
        }
        log_probs.push(out.log_probs);
        state = out.state;
        prev = tok;
    }
    let total = g.add_n(&per_step)?;
    Ok(Scored { total, per_step, alphas, log_probs })
}

/// A generated sequence with its model log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: TokenSeq,
    pub logprob: f64,
    /// Per emitted token: the decoder state followed by the contexts it used.
    pub features: Vec<Vec<f64>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `softmax(log_probs / temperature)`.
pub fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = log_probs.iter().map(|v| v / temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub(crate) fn features(g: &Graph, out: &StepOut) -> Vec<f64> {
    let mut f = g.value(out.state.s).to_vec();
    for &c in &out.state.contexts {
        f.extend_from_slice(g.value(c));
    }
    f
}

/// Free-running generation with greedy choice or temperature sampling.
pub fn free_run<D: StepDecoder + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph,
    dec: &D,
    mode: GenerateMode,
    t_max: usize,
    rng: &mut R,
) -> Result<Generated> {
    mode.validate()?;
    if t_max == 0 {
        return Err(Error::Contract("t_max must be at least 1".into()));
    }
    if let GenerateMode::Beam { width } = mode {
        return beam_search(g, dec, width, t_max)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()));
    }
    let mut state = dec.start(g)?;
    let mut prev = dec.vocab().bos();
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut feats = Vec::new();
    for _ in 0..t_max {
        let out = dec.step(g, &state, prev)?;
        let lp = g.value(out.log_probs);
        let tok = match mode {
            GenerateMode::Sample { temperature } => sample_index(lp, temperature, rng),
            _ => argmax(lp),
        };
        logprob += lp[tok];
        feats.push(features(g, &out));
        tokens.push(tok as Token);
        state = out.state;
        prev = tok as Token;
        if prev == EOS {
            break;
        }
    }
    Ok(Generated { tokens: TokenSeq::new(tokens), logprob, features: feats })
}

/// Forced-history generation: at step `t` the decoder consumes the reference
/// prefix `reference[..t]` and emits a token chosen by `mode`. The result is
/// cut after the first emitted EOS; if none was emitted within the
/// reference's length, an EOS is appended (unless that would exceed `t_max`).
/// The appended EOS does not contribute to `logprob`.
pub fn forced_run<D: StepDecoder + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph,
    dec: &D,
    reference: &[Token],
    mode: GenerateMode,
    t_max: usize,
    rng: &mut R,
) -> Result<Generated> {
    mode.validate()?;
    if reference.is_empty() || reference.len() > t_max {
        return Err(Error::Contract(format!("forced history of length {} does not fit t_max {t_max}", reference.len())));
    }
    let mut state = dec.start(g)?;
    let mut prev = dec.vocab().bos();
    let mut tokens = Vec::with_capacity(reference.len());
    let mut logprob = 0.0;
    let mut feats = Vec::new();
    for &next_ref in reference {
        let out = dec.step(g, &state, prev)?;
        let lp = g.value(out.log_probs);
        let tok = match mode {
            GenerateMode::Sample { temperature } => sample_index(lp, temperature, rng),
            _ => argmax(lp),
        };
        logprob += lp[tok];
        feats.push(features(g, &out));
        tokens.push(tok as Token);
        if tok as Token == EOS {
            break;
        }
        state = out.state;
        prev = next_ref;
    }
    if tokens.last() != Some(&EOS) && tokens.len() < t_max {
        tokens.push(EOS);
        let last = feats.last().cloned().unwrap_or_default();
        feats.push(last);
    }
    Ok(Generated { tokens: TokenSeq::new(tokens), logprob, features: feats })
}

struct Hypothesis {
    tokens: Vec<Token>,
    score: f64,
    state: DecoderState,
    features: Vec<Vec<f64>>,
}

/// Beam search keeping `width` unfinished hypotheses per step. Returns every
/// finished hypothesis that can still reach the top `width`, best first; ties
/// are broken by token order so results are deterministic.
pub fn beam_search<D: StepDecoder + ?Sized>(g: &mut Graph, dec: &D, width: usize, t_max: usize) -> Result<Vec<Generated>> {
    if width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    if t_max == 0 {
        return Err(Error::Contract("t_max must be at least 1".into()));
    }
    let start = dec.start(g)?;
    let mut alive = vec![Hypothesis { tokens: Vec::new(), score: 0.0, state: start, features: Vec::new() }];
    let mut finished: Vec<Generated> = Vec::new();
    let bos = dec.vocab().bos();

    while !alive.is_empty() {
        let mut candidates: Vec<(f64, Vec<Token>, DecoderState, Vec<Vec<f64>>)> = Vec::new();
        for hyp in &alive {
            let prev = hyp.tokens.last().copied().unwrap_or(bos);
            let out = dec.step(g, &hyp.state, prev)?;
            let feat = features(g, &out);
            let lp = g.value(out.log_probs).to_vec();
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok as Token);
                let mut feats = hyp.features.clone();
                feats.push(feat.clone());
                candidates.push((hyp.score + l, tokens, out.state.clone(), feats));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

        let mut next = Vec::new();
        for (score, tokens, state, feats) in candidates {
            let done = tokens.last() == Some(&EOS) || tokens.len() == t_max;
            if done {
                finished.push(Generated { tokens: TokenSeq::new(tokens), logprob: score, features: feats });
            } else if next.len() < width {
                next.push(Hypothesis { tokens, score, state, features: feats });
            }
        }
        alive = next;

        finished.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens)));
        finished.truncate(width);
        // scores only decrease along a hypothesis, so nothing alive can
        // overtake a full set of finished ones that already beat it
        if finished.len() == width {
            let worst_kept = finished[width - 1].logprob;
            if alive.iter().all(|h| h.score < worst_kept) {
                break;
            }
        }
    }
    Ok(finished)
}
