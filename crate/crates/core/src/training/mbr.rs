//! Minimum Bayes risk training of the first pass.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{draw_intermediate_samples, SampleConfig};
use super::{first_pass_logprob_grad, require_batch, LossReport};
use crate::error::{Error, Result};
use crate::metrics::levenshtein;
use crate::oracle::{enumerate_space, DEFAULT_CAP};
use crate::seq2seq::Seq2Seq;
use crate::tasks::Pair;
use crate::tensor::{GradientMap, ParamStore};
use crate::vocab::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    ZeroOne,
    /// Edit distance over content tokens.
    Levenshtein,
}

impl Distance {
    pub fn eval(self, reference: &TokenSeq, hypothesis: &TokenSeq) -> f64 {
        match self {
            Distance::ZeroOne => f64::from(u8::from(reference != hypothesis)),
            Distance::Levenshtein => levenshtein(reference.content(), hypothesis.content()) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MbrMode {
    /// Sum over every sequence of length at most `t_max`.
    Exact { t_max: usize, cap: u64 },
    /// `m` ancestral samples per example, example `i` from stream `i` of
    /// `seed`.
    Sampled { m: usize, t_max: usize, seed: u64 },
}

impl MbrMode {
    pub fn exact(t_max: usize) -> Self {
        MbrMode::Exact { t_max, cap: DEFAULT_CAP }
    }
}

/// Expected risk `Σ_ŷ p(ŷ | x; θᴵ) R(i, ŷ)` averaged over the batch, where
/// `risk(i, ŷ)` scores hypothesis `ŷ` for example `i`. The sampled mode uses
/// the score-function gradient `(1/M) Σ_m R(ŷ⁽ᵐ⁾) ∇log p(ŷ⁽ᵐ⁾)`.
pub fn mbr_loss_with_risk<R>(
    model: &Seq2Seq,
    params: &ParamStore,
    batch: &[Pair],
    risk: R,
    mode: MbrMode,
) -> Result<(LossReport, GradientMap)>
where
    R: Fn(usize, &TokenSeq) -> Result<f64>,
{
    let start = Instant::now();
    require_batch(batch)?;
    let names = model.param_names();
    let mut grads = GradientMap::zeros_like(params, &names)?;
    let mut loss = 0.0;
    let nb = batch.len() as f64;
    match mode {
        MbrMode::Exact { t_max, cap } => {
            let space = enumerate_space(model.vocab(), t_max, cap)?;
            for (i, pair) in batch.iter().enumerate() {
                for y_hat in &space.seqs {
                    let r = risk(i, y_hat)?;
                    let (lp, g) = first_pass_logprob_grad(model, params, &Pair { x: pair.x.clone(), y: y_hat.clone() })?;
                    let p = lp.exp();
                    loss += p * r / nb;
                    grads.add_scaled(&g, p * r / nb)?;
                }
            }
        }
        MbrMode::Sampled { m, t_max, seed } => {
            let cfg = SampleConfig::ancestral(m, t_max);
            for (i, pair) in batch.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let set = draw_intermediate_samples(model, params, pair, &cfg, &mut rng)?;
                let scale = 1.0 / (m as f64 * nb);
                for s in &set.samples {
                    let r = risk(i, &s.tokens)?;
                    let (_, g) = first_pass_logprob_grad(model, params, &Pair { x: pair.x.clone(), y: s.tokens.clone() })?;
                    loss += r * scale;
                    grads.add_scaled(&g, r * scale)?;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Domain { op: "mbr_loss", detail: format!("expected risk is {loss}") });
    }
    let report = LossReport::timed(start).with_loss("mbr", loss).with_norm("first", &grads);
    Ok((report, grads))
}

/// [`mbr_loss_with_risk`] with risk `D(y, ŷ)` against each example's reference.
pub fn mbr_loss(
    model: &Seq2Seq,
    params: &ParamStore,
    batch: &[Pair],
    distance: Distance,
    mode: MbrMode,
) -> Result<(LossReport, GradientMap)> {
    mbr_loss_with_risk(model, params, batch, |i, y_hat| Ok(distance.eval(&batch[i].y, y_hat)), mode)
}
