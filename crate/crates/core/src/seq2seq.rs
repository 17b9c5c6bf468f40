//! Single-pass attention encoder-decoder (the first pass).
//!
//! The encoder embeds `x` and runs a gated recurrence over it. The decoder
//! state summarises the output history, additive attention over the encoder
//! states yields an alignment row and a context vector, and the output layer
//! maps `[s_t ; c_t]` to logits over the emittable tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{self, DecoderState, GenerateMode, Generated, StepDecoder, StepOut};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars, EmbeddingVars, EncoderVars, GruVars, Memory, OutputVars, ParamSpec};
use crate::tensor::{Binder, Graph, ParamStore, Tensor, Var};
use crate::vocab::{Token, TokenSeq, Vocab};

/// Parameter-name prefixes of the first pass.
pub const ENCODER: &str = "enc";
pub const DECODER: &str = "dec1";
pub const ATTENTION: &str = "att1";
pub const OUTPUT: &str = "out1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Feed the previous context vector(s) into the decoder recurrence.
    #[serde(default)]
    pub context_in_state: bool,
    /// Concatenate first-pass states and contexts to the second pass's
    /// intermediate-token embeddings.
    #[serde(default)]
    pub extras: bool,
}

fn default_hidden() -> usize {
    32
}

impl ModelConfig {
    pub fn new(vocab: usize, hidden: usize) -> Self {
        ModelConfig { vocab, hidden, context_in_state: false, extras: false }
    }

    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab)?;
        if self.hidden == 0 {
            return Err(Error::Contract("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic alignment weights, one row per decoder step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub rows: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn from_graph(g: &Graph, rows: &[Var]) -> Self {
        AttentionMap { rows: rows.iter().map(|&r| g.value(r).to_vec()).collect() }
    }

    /// Largest deviation of any row sum from one; `None` if an entry is negative.
    pub fn row_sum_error(&self) -> Option<f64> {
        let mut worst = 0.0f64;
        for row in &self.rows {
            if row.iter().any(|&a| a < 0.0) {
                return None;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }
}

/// Result of teacher-forced scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Scoring {
    pub total: f64,
    pub per_step: Vec<f64>,
    pub attn: AttentionMap,
}

/// Outputs of one decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStep {
    pub s: Tensor,
    pub alpha: Tensor,
    pub context: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    cfg: ModelConfig,
    vocab: Vocab,
}

impl Seq2Seq {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Seq2Seq { cfg, vocab: Vocab::new(cfg.vocab)? })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        let d = self.cfg.hidden;
        let mut specs = nn::embedding_specs(ENCODER, self.vocab.size(), d);
        specs.extend(nn::gru_specs(&format!("{ENCODER}.cell"), d, d));
        specs
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.cfg.hidden;
        let dec_in = if self.cfg.context_in_state { 2 * d } else { d };
        let mut specs = self.encoder_specs();
        specs.extend(nn::embedding_specs(DECODER, self.vocab.size(), d));
        specs.extend(nn::gru_specs(&format!("{DECODER}.cell"), dec_in, d));
        specs.extend(nn::attention_specs(ATTENTION, d, d, d));
        specs.extend(nn::output_specs(OUTPUT, 2 * d, self.vocab.emit_size()));
        specs
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.param_specs().into_iter().map(|s| s.name).collect();
        names.sort();
        names
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        nn::init_params(&self.param_specs(), rng, store);
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<FirstPassVars> {
        Ok(FirstPassVars {
            enc: EncoderVars::bind(g, b, ENCODER)?,
            dec_emb: EmbeddingVars::bind(g, b, DECODER)?,
            dec: GruVars::bind(g, b, &format!("{DECODER}.cell"))?,
            att: AttentionVars::bind(g, b, ATTENTION)?,
            out: OutputVars::bind(g, b, OUTPUT)?,
            vocab: self.vocab,
            context_in_state: self.cfg.context_in_state,
        })
    }

    /// Encoder hidden vectors `h_{1:L}` as an `[L, d]` tensor.
    pub fn encode(&self, params: &ParamStore, x: &TokenSeq) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind(&mut g, &mut b)?;
        let h = vars.encode_x(&mut g, x)?;
        Ok(g.tensor(h))
    }

    /// One decoder step from `s_prev` consuming `prev`, attending over `h`.
    /// `c_prev` is required when the context-in-state variant is enabled.
    pub fn decode_step(
        &self,
        params: &ParamStore,
        s_prev: &Tensor,
        prev: Token,
        h: &Tensor,
        c_prev: Option<&Tensor>,
    ) -> Result<DecodeStep> {
        if h.shape().len() != 2 || h.shape()[0] == 0 {
            return Err(Error::Contract("attention memory must be a non-empty [L, d] matrix".into()));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind(&mut g, &mut b)?;
        let hv = g.leaf(h);
        let mem = vars.att.memory(&mut g, hv)?;
        let dec = FirstPassDecoder { vars: &vars, mem };
        let s = g.leaf(s_prev);
        let contexts = match (self.cfg.context_in_state, c_prev) {
            (true, Some(c)) => vec![g.leaf(c)],
            (true, None) => return Err(Error::Contract("previous context required".into())),
            (false, _) => Vec::new(),
        };
        let out = dec.step(&mut g, &DecoderState { s, contexts }, prev)?;
        let context = *out.state.contexts.last().expect("first pass has one context");
        Ok(DecodeStep {
            s: g.tensor(out.state.s),
            alpha: g.tensor(out.alphas[0]),
            context: g.tensor(context),
            logits: g.tensor(out.logits),
        })
    }

    /// `log p(y | x)` under teacher forcing, with per-step terms and the
    /// attention map.
    pub fn teacher_forced_logprob(&self, params: &ParamStore, x: &TokenSeq, y: &TokenSeq) -> Result<Scoring> {
        y.validate(self.vocab, Some(y.len()))?;
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind(&mut g, &mut b)?;
        let dec = vars.decoder(&mut g, x)?;
        let scored = decode::teacher_force(&mut g, &dec, y.ids())?;
        Ok(Scoring {
            total: g.scalar(scored.total),
            per_step: scored.per_step.iter().map(|&v| g.scalar(v)).collect(),
            attn: AttentionMap::from_graph(&g, &scored.alphas[0]),
        })
    }

    /// Free-running generation. `seed` drives sampling; it is ignored by the
    /// deterministic modes.
    pub fn generate(&self, params: &ParamStore, x: &TokenSeq, mode: GenerateMode, t_max: usize, seed: u64) -> Result<Generated> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.generate_with(params, x, mode, t_max, &mut rng)
    }

    pub fn generate_with(
        &self,
        params: &ParamStore,
        x: &TokenSeq,
        mode: GenerateMode,
        t_max: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generated> {
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind(&mut g, &mut b)?;
        let dec = vars.decoder(&mut g, x)?;
        decode::free_run(&mut g, &dec, mode, t_max, rng)
    }

    /// Top hypotheses of a width-`width` beam, best first.
    pub fn beam_search(&self, params: &ParamStore, x: &TokenSeq, width: usize, t_max: usize) -> Result<Vec<Generated>> {
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind(&mut g, &mut b)?;
        let dec = vars.decoder(&mut g, x)?;
        decode::beam_search(&mut g, &dec, width, t_max)
    }
}

/// First-pass parameters bound onto one graph.
#[derive(Clone, Debug)]
pub struct FirstPassVars {
    pub enc: EncoderVars,
    pub dec_emb: EmbeddingVars,
    pub dec: GruVars,
    pub att: AttentionVars,
    pub out: OutputVars,
    vocab: Vocab,
    context_in_state: bool,
}

/// Checks every id of an input sequence against the vocabulary.
pub(crate) fn input_ids(x: &TokenSeq, vocab: Vocab) -> Result<Vec<usize>> {
    if x.is_empty() {
        return Err(Error::Contract("input sequence is empty".into()));
    }
    x.ids()
        .iter()
        .map(|&t| {
            if (t as usize) < vocab.size() {
                Ok(t as usize)
            } else {
                Err(Error::Contract(format!("token id {t} is outside vocabulary of size {}", vocab.size())))
            }
        })
        .collect()
}

impl FirstPassVars {
    pub fn encode_x(&self, g: &mut Graph, x: &TokenSeq) -> Result<Var> {
        let ids = input_ids(x, self.vocab)?;
        self.enc.encode_ids(g, &ids)
    }

    pub fn decoder(&self, g: &mut Graph, x: &TokenSeq) -> Result<FirstPassDecoder<'_>> {
        let h = self.encode_x(g, x)?;
        let mem = self.att.memory(g, h)?;
        Ok(FirstPassDecoder { vars: self, mem })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }
}

/// The first-pass decoder attending over one encoded input.
#[derive(Clone, Debug)]
pub struct FirstPassDecoder<'v> {
    pub vars: &'v FirstPassVars,
    pub mem: Memory,
}

impl StepDecoder for FirstPassDecoder<'_> {
    fn vocab(&self) -> Vocab {
        self.vars.vocab
    }

    fn start(&self, g: &mut Graph) -> Result<DecoderState> {
        let s = self.vars.dec.zero_state(g);
        let contexts = if self.vars.context_in_state { vec![g.constant_vec(vec![0.0; self.vars.dec.hidden()])] } else { Vec::new() };
        Ok(DecoderState { s, contexts })
    }

    fn embed_token(&self, g: &mut Graph, token: Token) -> Result<Var> {
        if token as usize >= self.vars.vocab.size() {
            return Err(Error::Contract(format!("token id {token} outside vocabulary")));
        }
        self.vars.dec_emb.lookup(g, token as usize)
    }

    fn step_embedded(&self, g: &mut Graph, state: &DecoderState, input: Var) -> Result<StepOut> {
        let x = if self.vars.context_in_state {
            let mut parts = vec![input];
            parts.extend(&state.contexts);
            g.concat(&parts)?
        } else {
            input
        };
        let s = self.vars.dec.step(g, x, state.s)?;
        let (alpha, c) = self.vars.att.attend(g, &self.mem, s)?;
        let logits = self.vars.out.logits(g, &[s, c])?;
        let log_probs = g.log_softmax(logits)?;
        Ok(StepOut { state: DecoderState { s, contexts: vec![c] }, alphas: vec![alpha], logits, log_probs })
    }
}
