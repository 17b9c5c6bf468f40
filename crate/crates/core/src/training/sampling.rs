//! Intermediate first-pass samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{self, GenerateMode, Generated};
use crate::delib::IntermediateFeatures;
use crate::error::{Error, Result};
use crate::seq2seq::Seq2Seq;
use crate::tasks::Pair;
use crate::tensor::{Binder, Graph, ParamStore};
use crate::vocab::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// The `width` best beam hypotheses (free-running only).
    Beam { width: usize },
    /// Sampling at a temperature other than one.
    NoisyGreedy { temperature: f64 },
    /// Exact draws from `p(yᴵ | x; θᴵ)`.
    Ancestral,
}

/// History the first pass conditions on while producing an intermediate
/// output: its own samples, or the reference prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntermediateMode {
    #[default]
    FreeRunning,
    TeacherForced,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub m: usize,
    pub strategy: Strategy,
    pub mode: IntermediateMode,
    pub t_max: usize,
}

impl SampleConfig {
    pub fn ancestral(m: usize, t_max: usize) -> Self {
        SampleConfig { m, strategy: Strategy::Ancestral, mode: IntermediateMode::FreeRunning, t_max }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Contract("at least one sample is required".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Contract("t_max must be at least 1".into()));
        }
        match self.strategy {
            Strategy::Beam { width: 0 } => Err(Error::Contract("beam width must be at least 1".into())),
            Strategy::Beam { .. } if self.mode == IntermediateMode::TeacherForced => {
                Err(Error::Contract("beam search needs free-running history".into()))
            }
            Strategy::NoisyGreedy { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Contract(format!("temperature must be positive, got {temperature}")))
            }
            _ => Ok(()),
        }
    }
}

/// One intermediate output.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: TokenSeq,
    /// Log-probability of the sampled tokens under θᴵ along the history
    /// used to draw them.
    pub logprob: f64,
    /// Number of leading tokens actually drawn; a forced-history sample may
    /// carry one appended EOS beyond this.
    pub drawn: usize,
    pub features: Vec<Vec<f64>>,
    /// Relaxed one-hot rows as fed to the second pass (reparameterised
    /// samples only).
    pub relaxed: Option<Vec<Vec<f64>>>,
    /// Gumbel noise rows that produced the sample.
    pub noise: Option<Vec<Vec<f64>>>,
}

impl Sample {
    pub(crate) fn from_generated(g: Generated, drawn: usize) -> Self {
        Sample { tokens: g.tokens, logprob: g.logprob, drawn, features: g.features, relaxed: None, noise: None }
    }

    pub fn intermediate(&self, extras: bool) -> Result<IntermediateFeatures> {
        if extras {
            IntermediateFeatures::with_extras(self.tokens.clone(), self.features.clone())
        } else {
            Ok(IntermediateFeatures::new(self.tokens.clone()))
        }
    }
}

/// The M intermediate outputs drawn for one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub mode: IntermediateMode,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws intermediate outputs for one example. Free-running ancestral or
/// noisy-greedy draws use `rng` in order; beam search is deterministic and
/// yields up to `width` distinct hypotheses, best first.
pub fn draw_intermediate_samples(
    model: &Seq2Seq,
    params: &ParamStore,
    pair: &Pair,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleSet> {
    cfg.validate()?;
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let vars = model.bind(&mut g, &mut b)?;
    let dec = vars.decoder(&mut g, &pair.x)?;
    let temperature = match cfg.strategy {
        Strategy::Beam { width } => {
            let samples = decode::beam_search(&mut g, &dec, width, cfg.t_max)?
                .into_iter()
                .map(|h| {
                    let n = h.tokens.len();
                    Sample::from_generated(h, n)
                })
                .collect();
            return Ok(SampleSet { samples, mode: cfg.mode });
        }
        Strategy::NoisyGreedy { temperature } => temperature,
        Strategy::Ancestral => 1.0,
    };
    let mode = GenerateMode::Sample { temperature };
    let mut samples = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        // the encoder part of the graph is shared; only decoder steps grow it
        let s = match cfg.mode {
            IntermediateMode::FreeRunning => {
                let gen = decode::free_run(&mut g, &dec, mode, cfg.t_max, rng)?;
                let n = gen.tokens.len();
                Sample::from_generated(gen, n)
            }
            IntermediateMode::TeacherForced => {
                let gen = decode::forced_run(&mut g, &dec, pair.y.ids(), mode, cfg.t_max, rng)?;
                let drawn = drawn_len(&gen, pair.y.len());
                Sample::from_generated(gen, drawn)
            }
        };
        samples.push(s);
    }
    Ok(SampleSet { samples, mode: cfg.mode })
}

/// Tokens a forced-history run actually drew (excludes an appended EOS).
fn drawn_len(gen: &Generated, reference_len: usize) -> usize {
    gen.tokens.len().min(reference_len)
}

/// `rows × width` standard Gumbel draws.
pub fn gumbel_noise(rows: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..width)
                .map(|_| {
                    let u: f64 = rng.gen();
                    -(-u.max(f64::MIN_POSITIVE).ln()).ln()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::ModelConfig;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn setup() -> (Seq2Seq, ParamStore, Pair) {
        let m = Seq2Seq::new(ModelConfig::new(5, 3)).unwrap();
        let mut p = ParamStore::new();
        m.init_params(&mut ChaCha8Rng::seed_from_u64(1), &mut p);
        let pair = Pair { x: TokenSeq::terminated(&[1, 2]), y: TokenSeq::terminated(&[2, 1]) };
        (m, p, pair)
    }

    #[test]
    fn point_mass_gives_identical_samples() {
        let (m, mut p, pair) = setup();
        let mut b = vec![0.0; 4];
        b[2] = 200.0;
        p.insert("out1.w", Tensor::zeros(p.get("out1.w").unwrap().shape()));
        p.insert("out1.b", Tensor::vector(b));
        let cfg = SampleConfig::ancestral(6, 3);
        let set = draw_intermediate_samples(&m, &p, &pair, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(set.len(), 6);
        for s in &set.samples {
            assert_eq!(s.tokens.ids(), &[2, 2, 2]);
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let (m, p, pair) = setup();
        let cfg = SampleConfig::ancestral(5, 4);
        let a = draw_intermediate_samples(&m, &p, &pair, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = draw_intermediate_samples(&m, &p, &pair, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            s.tokens.validate(m.vocab(), Some(4)).unwrap();
            assert!(s.logprob <= 0.0);
        }
    }

    #[test]
    fn beam_gives_distinct_sorted() {
        let (m, p, pair) = setup();
        let cfg = SampleConfig { m: 3, strategy: Strategy::Beam { width: 3 }, mode: IntermediateMode::FreeRunning, t_max: 3 };
        let set = draw_intermediate_samples(&m, &p, &pair, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 3);
        for w in set.samples.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
    }

    #[test]
    fn forced_history_samples_end_in_eos() {
        let (m, p, pair) = setup();
        let cfg = SampleConfig { mode: IntermediateMode::TeacherForced, ..SampleConfig::ancestral(20, 5) };
        let set = draw_intermediate_samples(&m, &p, &pair, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for s in &set.samples {
            assert!(s.tokens.is_terminated());
            assert!(s.tokens.len() <= pair.y.len() + 1);
            assert!(s.drawn <= pair.y.len());
        }
    }

    #[test]
    fn gumbel_moments() {
        let n = 200_000;
        let rows = gumbel_noise(1, n, &mut ChaCha8Rng::seed_from_u64(5));
        let mean = rows[0].iter().sum::<f64>() / n as f64;
        // mean of the standard Gumbel is the Euler-Mascheroni constant
        assert!((mean - 0.5772156649).abs() < 0.01, "{mean}");
    }
}
