//! Second pass with dual attention, and two-pass generation.
//!
//! The second pass re-uses the first pass's input encoder (the `enc.*`
//! parameters are the same store entries, not a copy), adds its own encoder
//! over the intermediate output, attends over both memories from one shared
//! decoder state and predicts from `[s_t ; c_x,t ; c_y,t]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{self, DecoderState, GenerateMode, Generated, StepDecoder, StepOut};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars, EmbeddingVars, EncoderVars, GruVars, Memory, OutputVars, ParamSpec};
use crate::seq2seq::{self, input_ids, AttentionMap, ModelConfig, Seq2Seq};
use crate::tensor::{Binder, Graph, ParamStore, Tensor, Var};
use crate::vocab::{Token, TokenSeq, Vocab, EOS};

pub const Y_ENCODER: &str = "ency";
pub const DECODER: &str = "dec2";
pub const ATTENTION_X: &str = "att2x";
pub const ATTENTION_Y: &str = "att2y";
pub const OUTPUT: &str = "out2";

/// First-pass output as seen by the second pass.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateFeatures {
    pub tokens: TokenSeq,
    /// Per token: first-pass decoder state followed by its context vector.
    pub extras: Option<Vec<Vec<f64>>>,
}

impl IntermediateFeatures {
    /// An empty token list is materialised as `[EOS]`.
    pub fn new(tokens: TokenSeq) -> Self {
        let tokens = if tokens.is_empty() { TokenSeq::new(vec![EOS]) } else { tokens };
        IntermediateFeatures { tokens, extras: None }
    }

    pub fn with_extras(tokens: TokenSeq, extras: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.len() != extras.len() {
            return Err(Error::Contract(format!("{} intermediate tokens but {} extra feature rows", tokens.len(), extras.len())));
        }
        let mut f = IntermediateFeatures::new(tokens);
        if !f.tokens.is_empty() && !extras.is_empty() {
            f.extras = Some(extras);
        }
        Ok(f)
    }

    pub fn from_generated(g: &Generated) -> Self {
        IntermediateFeatures::with_extras(g.tokens.clone(), g.features.clone())
            .unwrap_or_else(|_| IntermediateFeatures::new(g.tokens.clone()))
    }
}

/// Teacher-forced second-pass scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondScoring {
    pub total: f64,
    pub per_step: Vec<f64>,
    pub attn_x: AttentionMap,
    pub attn_y: AttentionMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondStep {
    pub s: Tensor,
    pub alpha_x: Tensor,
    pub alpha_y: Tensor,
    pub context_x: Tensor,
    pub context_y: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPassOutput {
    pub first: Generated,
    pub second: Generated,
}

#[derive(Clone, Debug)]
pub struct Deliberation {
    first: Seq2Seq,
    cfg: ModelConfig,
    vocab: Vocab,
}

impl Deliberation {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Ok(Deliberation { first: Seq2Seq::new(cfg)?, cfg, vocab: Vocab::new(cfg.vocab)? })
    }

    pub fn first(&self) -> &Seq2Seq {
        &self.first
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Parameters owned by the second pass alone (the shared input encoder is
    /// listed with the first pass).
    pub fn second_only_specs(&self) -> Vec<ParamSpec> {
        let d = self.cfg.hidden;
        let y_in = if self.cfg.extras { 3 * d } else { d };
        let dec_in = if self.cfg.context_in_state { 3 * d } else { d };
        let mut specs = nn::embedding_specs(Y_ENCODER, self.vocab.emit_size(), d);
        specs.extend(nn::gru_specs(&format!("{Y_ENCODER}.cell"), y_in, d));
        specs.extend(nn::embedding_specs(DECODER, self.vocab.size(), d));
        specs.extend(nn::gru_specs(&format!("{DECODER}.cell"), dec_in, d));
        specs.extend(nn::attention_specs(ATTENTION_X, d, d, d));
        specs.extend(nn::attention_specs(ATTENTION_Y, d, d, d));
        specs.extend(nn::output_specs(OUTPUT, 3 * d, self.vocab.emit_size()));
        specs
    }

    /// Names of θᴵ.
    pub fn first_names(&self) -> Vec<String> {
        self.first.param_names()
    }

    /// Names of θᴵᴵ, including the shared input encoder.
    pub fn second_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.first.encoder_specs().into_iter().chain(self.second_only_specs()).map(|s| s.name).collect();
        names.sort();
        names
    }

    /// Names of θᴵᴵ that θᴵ does not also own.
    pub fn second_only_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.second_only_specs().into_iter().map(|s| s.name).collect();
        names.sort();
        names
    }

    pub fn all_names(&self) -> Vec<String> {
        let mut names = self.first_names();
        names.extend(self.second_only_names());
        names.sort();
        names
    }

    /// Initialises θᴵ then θᴵᴵ from one seeded stream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.first.init_params(&mut rng, &mut store);
        nn::init_params(&self.second_only_specs(), &mut rng, &mut store);
        store
    }

    pub fn bind_second(&self, g: &mut Graph, b: &mut Binder) -> Result<SecondPassVars> {
        Ok(SecondPassVars {
            enc: EncoderVars::bind(g, b, seq2seq::ENCODER)?,
            ency: EncoderVars::bind(g, b, Y_ENCODER)?,
            dec_emb: EmbeddingVars::bind(g, b, DECODER)?,
            dec: GruVars::bind(g, b, &format!("{DECODER}.cell"))?,
            att_x: AttentionVars::bind(g, b, ATTENTION_X)?,
            att_y: AttentionVars::bind(g, b, ATTENTION_Y)?,
            out: OutputVars::bind(g, b, OUTPUT)?,
            vocab: self.vocab,
            context_in_state: self.cfg.context_in_state,
            extras: self.cfg.extras,
        })
    }

    /// One second-pass step over explicit memories `h_x` (`[L, d]`) and
    /// `h_y` (`[Tᴵ, d]`).
    pub fn second_pass_step(
        &self,
        params: &ParamStore,
        s_prev: &Tensor,
        prev: Token,
        h_x: &Tensor,
        h_y: &Tensor,
        c_prev: Option<(&Tensor, &Tensor)>,
    ) -> Result<SecondStep> {
        for (name, h) in [("h_x", h_x), ("h_y", h_y)] {
            if h.shape().len() != 2 {
                return Err(Error::Contract(format!("{name} must be an [L, d] matrix")));
            }
        }
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind_second(&mut g, &mut b)?;
        let hx = g.leaf(h_x);
        let hy = g.leaf(h_y);
        let dec = SecondPassDecoder { vars: &vars, mem_x: vars.att_x.memory(&mut g, hx)?, mem_y: vars.att_y.memory(&mut g, hy)? };
        let s = g.leaf(s_prev);
        let contexts = match (self.cfg.context_in_state, c_prev) {
            (true, Some((cx, cy))) => vec![g.leaf(cx), g.leaf(cy)],
            (true, None) => return Err(Error::Contract("previous contexts required".into())),
            (false, _) => Vec::new(),
        };
        let out = dec.step(&mut g, &DecoderState { s, contexts }, prev)?;
        Ok(SecondStep {
            s: g.tensor(out.state.s),
            alpha_x: g.tensor(out.alphas[0]),
            alpha_y: g.tensor(out.alphas[1]),
            context_x: g.tensor(out.state.contexts[0]),
            context_y: g.tensor(out.state.contexts[1]),
            logits: g.tensor(out.logits),
        })
    }

    /// `log p(y | yᴵ, x; θᴵᴵ)` under teacher forcing over the reference `y`.
    pub fn second_pass_logprob(
        &self,
        params: &ParamStore,
        x: &TokenSeq,
        y_first: &IntermediateFeatures,
        y: &TokenSeq,
    ) -> Result<SecondScoring> {
        y.validate(self.vocab, Some(y.len()))?;
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind_second(&mut g, &mut b)?;
        let dec = vars.decoder(&mut g, x, IntermediateInput::Tokens(y_first))?;
        let scored = decode::teacher_force(&mut g, &dec, y.ids())?;
        Ok(SecondScoring {
            total: g.scalar(scored.total),
            per_step: scored.per_step.iter().map(|&v| g.scalar(v)).collect(),
            attn_x: AttentionMap::from_graph(&g, &scored.alphas[0]),
            attn_y: AttentionMap::from_graph(&g, &scored.alphas[1]),
        })
    }

    /// Second-pass generation conditioned on a fixed intermediate output.
    pub fn generate_second(
        &self,
        params: &ParamStore,
        x: &TokenSeq,
        y_first: &IntermediateFeatures,
        mode: GenerateMode,
        t_max: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generated> {
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let vars = self.bind_second(&mut g, &mut b)?;
        let dec = vars.decoder(&mut g, x, IntermediateInput::Tokens(y_first))?;
        decode::free_run(&mut g, &dec, mode, t_max, rng)
    }

    /// θᴵ decodes `x` free-running; θᴵᴵ then decodes conditioned on `x` and
    /// that output, also free-running.
    pub fn two_pass_generate(
        &self,
        params: &ParamStore,
        x: &TokenSeq,
        mode: GenerateMode,
        t_max: usize,
        seed: u64,
    ) -> Result<TwoPassOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = self.first.generate_with(params, x, mode, t_max, &mut rng)?;
        let feats = IntermediateFeatures::from_generated(&first);
        let second = self.generate_second(params, x, &feats, mode, t_max, &mut rng)?;
        Ok(TwoPassOutput { first, second })
    }
}

/// How the intermediate output enters the second pass's y-encoder.
#[derive(Clone, Copy, Debug)]
pub enum IntermediateInput<'a> {
    Tokens(&'a IntermediateFeatures),
    /// One (possibly relaxed) distribution over emittable tokens per
    /// position, with optional per-position extra features.
    Relaxed {
        rows: &'a [Var],
        extras: Option<&'a [Var]>,
    },
}

/// Second-pass parameters bound onto one graph.
#[derive(Clone, Debug)]
pub struct SecondPassVars {
    pub enc: EncoderVars,
    pub ency: EncoderVars,
    pub dec_emb: EmbeddingVars,
    pub dec: GruVars,
    pub att_x: AttentionVars,
    pub att_y: AttentionVars,
    pub out: OutputVars,
    vocab: Vocab,
    context_in_state: bool,
    extras: bool,
}

impl SecondPassVars {
    pub fn encode_x(&self, g: &mut Graph, x: &TokenSeq) -> Result<Var> {
        let ids = input_ids(x, self.vocab)?;
        self.enc.encode_ids(g, &ids)
    }

    pub fn encode_intermediate(&self, g: &mut Graph, input: IntermediateInput) -> Result<Var> {
        let emit = self.vocab.emit_size();
        let mut inputs = Vec::new();
        match input {
            IntermediateInput::Tokens(f) => {
                for (i, &t) in f.tokens.ids().iter().enumerate() {
                    if t as usize >= emit {
                        return Err(Error::Contract(format!("intermediate token {t} is not emittable")));
                    }
                    let e = self.ency.emb.lookup(g, t as usize)?;
                    let e = match (&f.extras, self.extras) {
                        (Some(extras), true) => {
                            let extra = g.constant_vec(extras[i].clone());
                            g.concat(&[e, extra])?
                        }
                        (None, true) => return Err(Error::Contract("model expects intermediate extras but none were given".into())),
                        (_, false) => e,
                    };
                    inputs.push(e);
                }
            }
            IntermediateInput::Relaxed { rows, extras } => {
                for (i, &r) in rows.iter().enumerate() {
                    let e = self.ency.emb.mix(g, r)?;
                    let e = match (extras, self.extras) {
                        (Some(extras), true) => g.concat(&[e, extras[i]])?,
                        (None, true) => return Err(Error::Contract("model expects intermediate extras but none were given".into())),
                        (_, false) => e,
                    };
                    inputs.push(e);
                }
            }
        }
        if inputs.is_empty() {
            return Err(Error::Contract("empty intermediate output; materialise it as a single EOS".into()));
        }
        self.ency.run(g, &inputs)
    }

    pub fn decoder(&self, g: &mut Graph, x: &TokenSeq, y_first: IntermediateInput) -> Result<SecondPassDecoder<'_>> {
        let hx = self.encode_x(g, x)?;
        let hy = self.encode_intermediate(g, y_first)?;
        Ok(SecondPassDecoder { vars: self, mem_x: self.att_x.memory(g, hx)?, mem_y: self.att_y.memory(g, hy)? })
    }
}

#[derive(Clone, Debug)]
pub struct SecondPassDecoder<'v> {
    pub vars: &'v SecondPassVars,
    pub mem_x: Memory,
    pub mem_y: Memory,
}

impl StepDecoder for SecondPassDecoder<'_> {
    fn vocab(&self) -> Vocab {
        self.vars.vocab
    }

    fn start(&self, g: &mut Graph) -> Result<DecoderState> {
        let s = self.vars.dec.zero_state(g);
        let contexts = if self.vars.context_in_state {
            let d = self.vars.dec.hidden();
            vec![g.constant_vec(vec![0.0; d]), g.constant_vec(vec![0.0; d])]
        } else {
            Vec::new()
        };
        Ok(DecoderState { s, contexts })
    }

    fn embed_token(&self, g: &mut Graph, token: Token) -> Result<Var> {
        if token as usize >= self.vars.vocab.size() {
            return Err(Error::Contract(format!("token id {token} outside vocabulary")));
        }
        self.vars.dec_emb.lookup(g, token as usize)
    }

    fn step_embedded(&self, g: &mut Graph, state: &DecoderState, input: Var) -> Result<StepOut> {
        if self.mem_y.len == 0 || self.mem_x.len == 0 {
            return Err(Error::Contract("second pass needs non-empty memories".into()));
        }
        let x = if self.vars.context_in_state {
            let mut parts = vec![input];
            parts.extend(&state.contexts);
            g.concat(&parts)?
        } else {
            input
        };
        let s = self.vars.dec.step(g, x, state.s)?;
        let (alpha_x, cx) = self.vars.att_x.attend(g, &self.mem_x, s)?;
        let (alpha_y, cy) = self.vars.att_y.attend(g, &self.mem_y, s)?;
        let logits = self.vars.out.logits(g, &[s, cx, cy])?;
        let log_probs = g.log_softmax(logits)?;
        Ok(StepOut { state: DecoderState { s, contexts: vec![cx, cy] }, alphas: vec![alpha_x, alpha_y], logits, log_probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(v: usize, d: usize) -> (Deliberation, ParamStore) {
        let m = Deliberation::new(ModelConfig::new(v, d)).unwrap();
        let p = m.init_params(5);
        (m, p)
    }

    #[test]
    fn name_sets() {
        let (m, p) = setup(5, 3);
        let first = m.first_names();
        let second = m.second_names();
        assert!(first.iter().any(|n| n == "enc.emb"));
        assert!(second.iter().any(|n| n == "enc.emb"), "θᴵᴵ includes the shared encoder");
        assert!(!second.iter().any(|n| n.starts_with("dec1")));
        assert_eq!(m.all_names().len(), p.len());
    }

    #[test]
    fn shared_encoder_is_one_storage() {
        let (m, mut p) = setup(5, 3);
        let x = TokenSeq::terminated(&[1, 2]);
        let before = m.first().encode(&p, &x).unwrap();
        p.get_mut("enc.emb").unwrap().data_mut()[3] += 0.5;
        let after_first = m.first().encode(&p, &x).unwrap();

        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let vars = m.bind_second(&mut g, &mut b).unwrap();
        let hx = vars.encode_x(&mut g, &x).unwrap();
        assert_ne!(before, after_first);
        assert_eq!(g.tensor(hx), after_first);
    }

    #[test]
    fn single_intermediate_position() {
        let (m, p) = setup(6, 4);
        let hx = m.first().encode(&p, &TokenSeq::terminated(&[1, 2, 3])).unwrap();
        let hy = Tensor::matrix(1, 4, vec![0.1, -0.3, 0.2, 0.7]).unwrap();
        let step = m.second_pass_step(&p, &Tensor::zeros(&[4]), 5, &hx, &hy, None).unwrap();
        assert_eq!(step.alpha_y.data(), &[1.0]);
        assert_eq!(step.context_y.data(), hy.data());
        assert_eq!(step.logits.shape(), &[5]);
    }

    #[test]
    fn contexts_are_weighted_sums() {
        let (m, p) = setup(6, 4);
        let hx = m.first().encode(&p, &TokenSeq::terminated(&[1, 2, 3])).unwrap();
        let hy = Tensor::matrix(2, 4, vec![0.1, -0.3, 0.2, 0.7, 0.4, 0.0, -0.5, 0.9]).unwrap();
        let s = Tensor::vector(vec![0.2, 0.1, -0.3, 0.4]);
        let step = m.second_pass_step(&p, &s, 2, &hx, &hy, None).unwrap();
        for (alpha, h, c) in [(&step.alpha_x, &hx, &step.context_x), (&step.alpha_y, &hy, &step.context_y)] {
            let (rows, d) = (h.shape()[0], h.shape()[1]);
            for j in 0..d {
                let manual: f64 = (0..rows).map(|l| alpha.data()[l] * h.data()[l * d + j]).sum();
                assert!((manual - c.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_intermediate_becomes_eos() {
        let f = IntermediateFeatures::new(TokenSeq::new(vec![]));
        assert_eq!(f.tokens.ids(), &[EOS]);
    }

    #[test]
    fn empty_y_memory_is_contract_violation() {
        let (m, p) = setup(5, 3);
        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let vars = m.bind_second(&mut g, &mut b).unwrap();
        let err = vars.encode_intermediate(&mut g, IntermediateInput::Relaxed { rows: &[], extras: None });
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn extras_flag_off_ignores_extras() {
        let (m, p) = setup(6, 3);
        let x = TokenSeq::terminated(&[1, 4]);
        let y = TokenSeq::terminated(&[4, 1]);
        let yi = TokenSeq::terminated(&[4, 2]);
        let bare = IntermediateFeatures::new(yi.clone());
        let rich = IntermediateFeatures::with_extras(yi, vec![vec![0.3; 6]; 3]).unwrap();
        let a = m.second_pass_logprob(&p, &x, &bare, &y).unwrap();
        let b = m.second_pass_logprob(&p, &x, &rich, &y).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn extras_flag_on_consumes_first_pass_features() {
        let mut cfg = ModelConfig::new(6, 3);
        cfg.extras = true;
        let m = Deliberation::new(cfg).unwrap();
        let p = m.init_params(8);
        let x = TokenSeq::terminated(&[1, 4]);
        let out = m.two_pass_generate(&p, &x, GenerateMode::Greedy, 5, 0).unwrap();
        let feats = IntermediateFeatures::from_generated(&out.first);
        assert_eq!(feats.extras.as_ref().unwrap()[0].len(), 6);
        let s = m.second_pass_logprob(&p, &x, &feats, &TokenSeq::terminated(&[1])).unwrap();
        assert!(s.total < 0.0);
        assert!(m.second_pass_logprob(&p, &x, &IntermediateFeatures::new(out.first.tokens), &TokenSeq::terminated(&[1])).is_err());
    }

    #[test]
    fn zeroed_output_layer_is_uniform() {
        let (m, mut p) = setup(6, 3);
        for name in ["out2.w", "out2.b"] {
            let shape = p.get(name).unwrap().shape().to_vec();
            p.insert(name, Tensor::zeros(&shape));
        }
        let y = TokenSeq::terminated(&[2, 3]);
        let s = m.second_pass_logprob(&p, &TokenSeq::terminated(&[1]), &IntermediateFeatures::new(y.clone()), &y).unwrap();
        assert!((s.total + 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_two_pass_is_deterministic() {
        let (m, p) = setup(7, 4);
        let x = TokenSeq::terminated(&[1, 2, 5]);
        let a = m.two_pass_generate(&p, &x, GenerateMode::Greedy, 6, 1).unwrap();
        let b = m.two_pass_generate(&p, &x, GenerateMode::Greedy, 6, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn silent_y_path_degenerates_to_single_pass() {
        let (m, mut p) = setup(7, 4);
        let d = 4;
        for name in m.second_only_names().into_iter().filter(|n| n.starts_with("ency.") || n.starts_with("att2y.")) {
            let shape = p.get(&name).unwrap().shape().to_vec();
            p.insert(name, Tensor::zeros(&shape));
        }
        // single-pass model whose decoder, attention and output copy θᴵᴵ's
        let mut single = p.clone();
        for (from, to) in [("dec2", "dec1"), ("att2x", "att1")] {
            for name in m.second_only_names().into_iter().filter(|n| n.starts_with(&format!("{from}."))) {
                let t = p.get(&name).unwrap().clone();
                single.insert(name.replacen(from, to, 1), t);
            }
        }
        let w2 = p.get("out2.w").unwrap();
        let emit = w2.shape()[0];
        let w1: Vec<f64> = (0..emit).flat_map(|r| w2.data()[r * 3 * d..r * 3 * d + 2 * d].to_vec()).collect();
        single.insert("out1.w", Tensor::matrix(emit, 2 * d, w1).unwrap());
        single.insert("out1.b", p.get("out2.b").unwrap().clone());

        for x in [vec![1, 2, 5], vec![3], vec![4, 4, 1, 2]] {
            let x = TokenSeq::terminated(&x);
            let two = m.two_pass_generate(&p, &x, GenerateMode::Greedy, 6, 0).unwrap();
            let one = m.first().generate(&single, &x, GenerateMode::Greedy, 6, 0).unwrap();
            assert_eq!(two.second.tokens, one.tokens);
        }
    }
}
