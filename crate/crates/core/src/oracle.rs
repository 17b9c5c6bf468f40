//! Exhaustive enumeration over tiny output spaces: exact marginals, exact
//! losses and gradients, and statistics of Monte-Carlo gradient estimators
//! against them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode;
use crate::delib::{Deliberation, IntermediateFeatures, IntermediateInput};
use crate::error::{Error, Result};
use crate::tasks::Pair;
use crate::tensor::{Binder, GradientMap, Graph, ParamStore};
use crate::training::{self, draw_intermediate_samples, first_pass_logprob_grad, SampleConfig};
use crate::vocab::{Token, TokenSeq, Vocab, EOS};

pub const DEFAULT_CAP: u64 = 100_000;

/// Every EOS-terminated sequence of length at most `t_max` plus every
/// unterminated sequence of length exactly `t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedSpace {
    pub vocab: Vocab,
    pub t_max: usize,
    pub seqs: Vec<TokenSeq>,
}

impl EnumeratedSpace {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// `Σ_{k<T} C^k + C^T` with `C` content tokens, saturating at `u128::MAX`.
pub fn space_size(vocab: Vocab, t_max: usize) -> u128 {
    let c = vocab.num_content() as u128;
    let mut total: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..t_max {
        total = total.saturating_add(pow);
        pow = pow.saturating_mul(c);
    }
    total.saturating_add(pow)
}

pub fn enumerate_space(vocab: Vocab, t_max: usize, cap: u64) -> Result<EnumeratedSpace> {
    if t_max == 0 {
        return Err(Error::Contract("t_max must be at least 1".into()));
    }
    let count = space_size(vocab, t_max);
    if count > u128::from(cap) {
        return Err(Error::Capacity { count, cap });
    }
    let content: Vec<Token> = vocab.content_tokens().collect();
    let mut seqs = Vec::with_capacity(count as usize);
    let mut prefixes: Vec<Vec<Token>> = vec![Vec::new()];
    for len in 0..=t_max {
        for p in &prefixes {
            if len < t_max {
                let mut s = p.clone();
                s.push(EOS);
                seqs.push(TokenSeq::new(s));
            } else {
                seqs.push(TokenSeq::new(p.clone()));
            }
        }
        if len < t_max {
            prefixes = prefixes
                .iter()
                .flat_map(|p| {
                    content.iter().map(move |&t| {
                        let mut s = p.clone();
                        s.push(t);
                        s
                    })
                })
                .collect();
        }
    }
    Ok(EnumeratedSpace { vocab, t_max, seqs })
}

fn check_model(model: &Deliberation, space: &EnumeratedSpace) -> Result<()> {
    if model.config().extras {
        return Err(Error::Contract("exact enumeration does not support intermediate extras".into()));
    }
    if model.vocab() != space.vocab {
        return Err(Error::Contract("space and model vocabularies differ".into()));
    }
    Ok(())
}

fn second_logprob(model: &Deliberation, params: &ParamStore, pair: &Pair, yi: &TokenSeq) -> Result<f64> {
    Ok(model.second_pass_logprob(params, &pair.x, &IntermediateFeatures::new(yi.clone()), &pair.y)?.total)
}

/// Per intermediate output: `(log Fᴵ, log Fᴵᴵ)`.
fn term_logprobs(model: &Deliberation, params: &ParamStore, pair: &Pair, space: &EnumeratedSpace) -> Result<Vec<(f64, f64)>> {
    check_model(model, space)?;
    space
        .seqs
        .iter()
        .map(|yi| {
            let lp1 = model.first().teacher_forced_logprob(params, &pair.x, yi)?.total;
            Ok((lp1, second_logprob(model, params, pair, yi)?))
        })
        .collect()
}

/// `p(y | x) = Σ_{yᴵ} p(yᴵ | x; θᴵ) p(y | yᴵ, x; θᴵᴵ)`.
pub fn exact_marginal(model: &Deliberation, params: &ParamStore, pair: &Pair, space: &EnumeratedSpace) -> Result<f64> {
    Ok(term_logprobs(model, params, pair, space)?.iter().map(|(a, b)| (a + b).exp()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactLosses {
    /// `−log Σ Fᴵ Fᴵᴵ`.
    pub naive: f64,
    /// `−Σ Fᴵ log Fᴵᴵ`.
    pub bound: f64,
}

pub fn exact_losses(model: &Deliberation, params: &ParamStore, pair: &Pair, space: &EnumeratedSpace) -> Result<ExactLosses> {
    let terms = term_logprobs(model, params, pair, space)?;
    let marginal: f64 = terms.iter().map(|(a, b)| (a + b).exp()).sum();
    let bound = -terms.iter().map(|(a, b)| a.exp() * b).sum::<f64>();
    Ok(ExactLosses { naive: -marginal.ln(), bound })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Naive,
    Bound,
}

impl LossKind {
    pub fn of(self, l: ExactLosses) -> f64 {
        match self {
            LossKind::Naive => l.naive,
            LossKind::Bound => l.bound,
        }
    }
}

/// Gradients split by pass: `first` over θᴵ names (through Fᴵ), `second`
/// over θᴵᴵ names (through Fᴵᴵ). The shared encoder appears in both.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactGradients {
    pub first: GradientMap,
    pub second: GradientMap,
}

impl ExactGradients {
    pub fn total(&self) -> Result<GradientMap> {
        let mut g = self.first.clone();
        g.add_scaled(&self.second, 1.0)?;
        Ok(g)
    }
}

fn second_logprob_grad(model: &Deliberation, params: &ParamStore, pair: &Pair, yi: &TokenSeq) -> Result<(f64, GradientMap)> {
    let feats = IntermediateFeatures::new(yi.clone());
    let names = model.second_names();
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let vars = model.bind_second(&mut g, &mut b)?;
    let dec = vars.decoder(&mut g, &pair.x, IntermediateInput::Tokens(&feats))?;
    let total = decode::teacher_force(&mut g, &dec, pair.y.ids())?.total;
    let grads = g.backward(total)?;
    Ok((g.scalar(total), b.gradient_map(&grads, &names)?))
}

/// Exact gradients by summing per-term autodiff gradients.
///
/// Bound: `∇θᴵ = −Σ Fᴵ log Fᴵᴵ ∇log Fᴵ`, `∇θᴵᴵ = −Σ Fᴵ ∇log Fᴵᴵ`.
/// Naive: the same sums weighted by `Fᴵ Fᴵᴵ / Σ Fᴵ Fᴵᴵ` (the posterior
/// over intermediate outputs) instead.
pub fn exact_gradients(
    model: &Deliberation,
    params: &ParamStore,
    pair: &Pair,
    space: &EnumeratedSpace,
    which: LossKind,
) -> Result<ExactGradients> {
    check_model(model, space)?;
    let mut first = GradientMap::zeros_like(params, &model.first_names())?;
    let mut second = GradientMap::zeros_like(params, &model.second_names())?;
    let mut terms = Vec::with_capacity(space.len());
    for yi in &space.seqs {
        let (lp1, g1) = first_pass_logprob_grad(model.first(), params, &Pair { x: pair.x.clone(), y: yi.clone() })?;
        let (lp2, g2) = second_logprob_grad(model, params, pair, yi)?;
        terms.push((lp1, lp2, g1, g2));
    }
    match which {
        LossKind::Bound => {
            for (lp1, lp2, g1, g2) in &terms {
                let p1 = lp1.exp();
                first.add_scaled(g1, -p1 * lp2)?;
                second.add_scaled(g2, -p1)?;
            }
        }
        LossKind::Naive => {
            let marginal: f64 = terms.iter().map(|(a, b, _, _)| (a + b).exp()).sum();
            for (lp1, lp2, g1, g2) in &terms {
                let w = (lp1 + lp2).exp() / marginal;
                first.add_scaled(g1, -w)?;
                second.add_scaled(g2, -w)?;
            }
        }
    }
    Ok(ExactGradients { first, second })
}

/// The enumerated loss built as a single graph and differentiated directly.
pub fn exact_gradients_direct(
    model: &Deliberation,
    params: &ParamStore,
    pair: &Pair,
    space: &EnumeratedSpace,
    which: LossKind,
) -> Result<(f64, ExactGradients)> {
    check_model(model, space)?;
    let mut g = Graph::new();
    let mut b1 = Binder::new(params);
    let mut b2 = Binder::new(params);
    let v1 = model.first().bind(&mut g, &mut b1)?;
    let v2 = model.bind_second(&mut g, &mut b2)?;
    let mut terms = Vec::with_capacity(space.len());
    for yi in &space.seqs {
        let dec1 = v1.decoder(&mut g, &pair.x)?;
        let lp1 = decode::teacher_force(&mut g, &dec1, yi.ids())?.total;
        let feats = IntermediateFeatures::new(yi.clone());
        let dec2 = v2.decoder(&mut g, &pair.x, IntermediateInput::Tokens(&feats))?;
        let lp2 = decode::teacher_force(&mut g, &dec2, pair.y.ids())?.total;
        let term = match which {
            LossKind::Bound => {
                let p1 = g.exp(lp1)?;
                g.mul(p1, lp2)?
            }
            LossKind::Naive => {
                let joint = g.add(lp1, lp2)?;
                g.exp(joint)?
            }
        };
        terms.push(term);
    }
    let sum = g.add_n(&terms)?;
    let loss = match which {
        LossKind::Bound => g.scale(sum, -1.0),
        LossKind::Naive => {
            let l = g.log(sum)?;
            g.scale(l, -1.0)
        }
    };
    let grads = g.backward(loss)?;
    Ok((
        g.scalar(loss),
        ExactGradients { first: b1.gradient_map(&grads, &model.first_names())?, second: b2.gradient_map(&grads, &model.second_names())? },
    ))
}

/// Which Monte-Carlo gradient to collect per trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Score-function joint estimator; all parameters (shared encoder summed).
    JointGrad,
    /// Separate training on the same samples; θᴵᴵ parameters only.
    Separate,
}

/// Per-coordinate statistics of an estimator against the exact bound
/// gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub labels: Vec<String>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub oracle: Vec<f64>,
    pub z: Vec<f64>,
    pub trials: usize,
}

impl EstimatorStats {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().map(|z| z.abs()).fold(0.0, f64::max)
    }

    /// Mean over coordinates of `self.variance / other.variance`, skipping
    /// coordinates where `other` has zero variance.
    pub fn mean_variance_ratio(&self, other: &EstimatorStats) -> Option<f64> {
        let ratios: Vec<f64> = self.variance.iter().zip(&other.variance).filter(|(_, &b)| b > 0.0).map(|(a, b)| a / b).collect();
        if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        }
    }
}

/// The estimator's gradient for one trial: `m` ancestral samples drawn from
/// stream `trial` of `seed`.
pub fn estimator_trial(
    model: &Deliberation,
    params: &ParamStore,
    pair: &Pair,
    kind: EstimatorKind,
    m: usize,
    t_max: usize,
    seed: u64,
    trial: u64,
) -> Result<GradientMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let set = draw_intermediate_samples(model.first(), params, pair, &SampleConfig::ancestral(m, t_max), &mut rng)?;
    let batch = std::slice::from_ref(pair);
    match kind {
        EstimatorKind::JointGrad => training::joint_grad_with_samples(model, params, batch, &[set])?.combined(),
        EstimatorKind::Separate => Ok(training::separate_train_second(model, params, batch, &[set])?.1),
    }
}

/// Runs `trials` independent estimator draws and compares their
/// per-coordinate mean with the enumerated bound gradient.
#[allow(clippy::too_many_arguments)]
pub fn verify_estimator(
    model: &Deliberation,
    params: &ParamStore,
    pair: &Pair,
    space: &EnumeratedSpace,
    kind: EstimatorKind,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<EstimatorStats> {
    if trials < 2 {
        return Err(Error::Contract("at least two trials are required".into()));
    }
    let exact = exact_gradients(model, params, pair, space, LossKind::Bound)?;
    let oracle_map = match kind {
        EstimatorKind::JointGrad => exact.total()?,
        EstimatorKind::Separate => exact.second,
    };
    let oracle = oracle_map.flatten();
    let labels = oracle_map.coordinate_labels();
    let n = oracle.len();
    let (mut mean, mut m2) = (vec![0.0; n], vec![0.0; n]);
    for trial in 0..trials {
        let g = estimator_trial(model, params, pair, kind, m, space.t_max, seed, trial as u64)?.flatten();
        if g.len() != n {
            return Err(Error::Contract("estimator and oracle cover different parameters".into()));
        }
        let k = (trial + 1) as f64;
        for i in 0..n {
            let delta = g[i] - mean[i];
            mean[i] += delta / k;
            m2[i] += delta * (g[i] - mean[i]);
        }
    }
    let variance: Vec<f64> = m2.iter().map(|v| (v / (trials - 1) as f64).max(0.0)).collect();
    let z = (0..n)
        .map(|i| {
            let diff = mean[i] - oracle[i];
            if variance[i] > 0.0 {
                diff / (variance[i] / trials as f64).sqrt()
            } else if diff.abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    Ok(EstimatorStats { labels, mean, variance, oracle, z, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::ModelConfig;
    use crate::tensor::{finite_diff_check, Tensor};

    fn setup(v: usize, seed: u64) -> (Deliberation, ParamStore, Pair, EnumeratedSpace) {
        let m = Deliberation::new(ModelConfig::new(v, 3)).unwrap();
        let p = m.init_params(seed);
        let pair = Pair { x: TokenSeq::terminated(&[1, 2]), y: TokenSeq::terminated(&[2]) };
        let space = enumerate_space(m.vocab(), 3, DEFAULT_CAP).unwrap();
        (m, p, pair, space)
    }

    #[test]
    fn counting() {
        let v3 = Vocab::new(3).unwrap();
        let s = enumerate_space(v3, 2, DEFAULT_CAP).unwrap();
        assert_eq!(s.seqs, vec![TokenSeq::new(vec![0]), TokenSeq::new(vec![1, 0]), TokenSeq::new(vec![1, 1])]);
        let v5 = Vocab::new(5).unwrap();
        let s = enumerate_space(v5, 3, DEFAULT_CAP).unwrap();
        assert_eq!(s.len() as u128, space_size(v5, 3));
        assert_eq!(s.len(), 1 + 3 + 9 + 27);
        let mut sorted = s.seqs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), s.len());
        for q in &s.seqs {
            q.validate(v5, Some(3)).unwrap();
        }
        let big = Vocab::new(20).unwrap();
        match enumerate_space(big, 5, DEFAULT_CAP) {
            Err(Error::Capacity { count, .. }) => assert_eq!(count, space_size(big, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_probabilities_normalize() {
        let (m, p, pair, space) = setup(5, 1);
        let total: f64 = space.seqs.iter().map(|y| m.first().teacher_forced_logprob(&p, &pair.x, y).unwrap().total.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let marg: f64 = space.seqs.iter().map(|y| exact_marginal(&m, &p, &Pair { x: pair.x.clone(), y: y.clone() }, &space).unwrap()).sum();
        assert!((marg - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independence_and_point_mass() {
        let (m, mut p, pair, space) = setup(4, 2);
        for name in m.second_only_names().into_iter().filter(|n| n.starts_with("ency.") || n.starts_with("att2y.")) {
            p.insert(name.clone(), Tensor::zeros(p.get(&name).unwrap().shape()));
        }
        let marg = exact_marginal(&m, &p, &pair, &space).unwrap();
        let single = second_logprob(&m, &p, &pair, &TokenSeq::new(vec![EOS])).unwrap().exp();
        assert!((marg - single).abs() < 1e-12);

        let (m, mut p, pair, space) = setup(4, 3);
        p.insert("out1.w", Tensor::zeros(p.get("out1.w").unwrap().shape()));
        p.insert("out1.b", Tensor::vector(vec![0.0, 800.0, 0.0]));
        let y_hat = TokenSeq::new(vec![1, 1, 1]);
        let marg = exact_marginal(&m, &p, &pair, &space).unwrap();
        let direct = second_logprob(&m, &p, &pair, &y_hat).unwrap().exp();
        assert!((marg - direct).abs() < 1e-12);
        let l = exact_losses(&m, &p, &pair, &space).unwrap();
        assert!((l.bound - l.naive).abs() < 1e-12);
        let gn = exact_gradients(&m, &p, &pair, &space, LossKind::Naive).unwrap();
        let gb = exact_gradients(&m, &p, &pair, &space, LossKind::Bound).unwrap();
        assert!(gn.second.max_abs_diff(&gb.second).unwrap() < 1e-10);
    }

    #[test]
    fn uniform_second_pass() {
        let (m, mut p, pair, space) = setup(4, 4);
        for name in ["out2.w", "out2.b"] {
            p.insert(name, Tensor::zeros(p.get(name).unwrap().shape()));
        }
        let l = exact_losses(&m, &p, &pair, &space).unwrap();
        let expected = 2.0 * 3f64.ln();
        assert!((l.naive - expected).abs() < 1e-12);
        assert!((l.bound - expected).abs() < 1e-12);
    }

    #[test]
    fn two_routes_agree_and_pass_gradcheck() {
        let (m, p, pair, space) = setup(4, 5);
        for which in [LossKind::Bound, LossKind::Naive] {
            let per_term = exact_gradients(&m, &p, &pair, &space, which).unwrap();
            let (loss, direct) = exact_gradients_direct(&m, &p, &pair, &space, which).unwrap();
            assert!((loss - which.of(exact_losses(&m, &p, &pair, &space).unwrap())).abs() < 1e-12);
            assert!(per_term.first.max_abs_diff(&direct.first).unwrap() < 1e-10);
            assert!(per_term.second.max_abs_diff(&direct.second).unwrap() < 1e-10);
            let total = per_term.total().unwrap();
            let r = finite_diff_check(|q| Ok(which.of(exact_losses(&m, q, &pair, &space)?)), &p, &total, 1e-5, 1e-6).unwrap();
            assert!(r.passed, "{which:?}: {:?}", r.worst);
        }
    }

    #[test]
    fn bound_dominates() {
        for seed in 0..10 {
            let (m, p, pair, space) = setup(4, 100 + seed);
            let l = exact_losses(&m, &p, &pair, &space).unwrap();
            assert!(l.bound >= l.naive - 1e-9);
        }
    }

    #[test]
    fn estimator_smoke() {
        let (m, p, pair, _) = setup(4, 6);
        let space = enumerate_space(m.vocab(), 2, DEFAULT_CAP).unwrap();
        let pair = Pair { x: pair.x, y: TokenSeq::terminated(&[1]) };
        let stats = verify_estimator(&m, &p, &pair, &space, EstimatorKind::JointGrad, 1, 400, 0).unwrap();
        assert_eq!(stats.trials, 400);
        assert!(stats.variance.iter().all(|&v| v >= 0.0));
        assert!(stats.max_abs_z() < 6.0, "{}", stats.max_abs_z());
    }
}
