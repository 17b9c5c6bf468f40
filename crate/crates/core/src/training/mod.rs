//! Losses, gradient estimators and the parameter update rule.
//!
//! Every loss is computed one example (and one intermediate sample) at a
//! time on a fresh graph; gradients are reduced in ascending example order so
//! results do not depend on anything but the inputs.

mod guided;
mod joint;
mod mbr;
mod sampling;

pub use guided::{
    combined_second_pass_loss, diagonal_band_mass, guided_attention_grad, guided_attention_loss, guided_attention_var, guided_weight,
};
pub use joint::{
    info_gain_estimate, joint_grad_step, joint_grad_with_samples, joint_loss_step, joint_loss_with_noise, separate_train_first,
    separate_train_second, Relaxation,
};
pub use mbr::{mbr_loss, mbr_loss_with_risk, Distance, MbrMode};
pub use sampling::{draw_intermediate_samples, gumbel_noise, IntermediateMode, Sample, SampleConfig, SampleSet, Strategy};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode;
use crate::error::{Error, Result};
use crate::seq2seq::Seq2Seq;
use crate::tasks::Pair;
use crate::tensor::{Binder, GradientMap, Graph, ParamStore, Var};

/// How θᴵ and θᴵᴵ are trained after θᴵ's teacher-forced pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheme {
    /// Score-function gradient for θᴵ, teacher forcing for θᴵᴵ.
    JointGrad { m: usize },
    /// Gumbel-softmax reparameterised samples.
    JointLoss {
        m: usize,
        tau: f64,
        #[serde(default)]
        relaxation: Relaxation,
    },
    /// θᴵ frozen; θᴵᴵ trained on stored samples.
    Separate { m: usize },
}

impl Scheme {
    pub fn samples(&self) -> usize {
        match *self {
            Scheme::JointGrad { m } | Scheme::JointLoss { m, .. } | Scheme::Separate { m } => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples() == 0 {
            return Err(Error::Contract("scheme needs at least one sample (m >= 1)".into()));
        }
        if let Scheme::JointLoss { tau, .. } = *self {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Contract(format!("temperature tau must be positive, got {tau}")));
            }
        }
        Ok(())
    }
}

/// Named scalar losses and gradient norms of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub losses: BTreeMap<String, f64>,
    pub grad_norms: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

impl LossReport {
    pub(crate) fn timed(start: Instant) -> Self {
        LossReport { wall_time_s: start.elapsed().as_secs_f64(), ..LossReport::default() }
    }

    pub fn with_loss(mut self, name: &str, value: f64) -> Self {
        self.losses.insert(name.to_string(), value);
        self
    }

    pub fn with_norm(mut self, name: &str, grads: &GradientMap) -> Self {
        self.grad_norms.insert(name.to_string(), grads.norm());
        self
    }

    pub fn is_finite(&self) -> bool {
        self.losses.values().chain(self.grad_norms.values()).all(|v| v.is_finite())
    }
}

/// Result of a step that touches both passes. `first` is keyed by θᴵ names
/// and `second` by θᴵᴵ names; the shared encoder appears in both with the
/// respective contributions.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub first: GradientMap,
    pub second: GradientMap,
    pub samples: Vec<SampleSet>,
}

impl StepOutput {
    /// Total gradient per parameter (shared encoder contributions summed).
    pub fn combined(&self) -> Result<GradientMap> {
        let mut g = self.first.clone();
        g.add_scaled(&self.second, 1.0)?;
        Ok(g)
    }
}

/// Value and gradient of a scalar built on a fresh graph.
pub(crate) fn value_and_grad<F>(params: &ParamStore, names: &[String], build: F) -> Result<(f64, GradientMap)>
where
    F: FnOnce(&mut Graph, &mut Binder) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let v = build(&mut g, &mut b)?;
    let value = g.scalar(v);
    let grads = g.backward(v)?;
    Ok((value, b.gradient_map(&grads, names)?))
}

pub(crate) fn require_batch(batch: &[Pair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("batch is empty".into()));
    }
    Ok(())
}

/// First-pass `log p(y | x; θᴵ)` and its gradient over θᴵ.
pub fn first_pass_logprob_grad(model: &Seq2Seq, params: &ParamStore, pair: &Pair) -> Result<(f64, GradientMap)> {
    value_and_grad(params, &model.param_names(), |g, b| {
        let vars = model.bind(g, b)?;
        let dec = vars.decoder(g, &pair.x)?;
        Ok(decode::teacher_force(g, &dec, pair.y.ids())?.total)
    })
}

/// Weighted teacher-forced negative log-likelihood:
/// `Σ_i w_i (−log p(y_i | x_i)) / Σ_i w_i`.
pub fn nll_weighted(model: &Seq2Seq, params: &ParamStore, batch: &[Pair], weights: &[f64]) -> Result<(f64, GradientMap)> {
    require_batch(batch)?;
    if weights.len() != batch.len() {
        return Err(Error::Contract(format!("{} weights for {} examples", weights.len(), batch.len())));
    }
    let total_w: f64 = weights.iter().sum();
    if !(total_w > 0.0) {
        return Err(Error::Contract("weights must have a positive sum".into()));
    }
    let mut grads = GradientMap::zeros_like(params, &model.param_names())?;
    let mut loss = 0.0;
    for (pair, &w) in batch.iter().zip(weights) {
        let (lp, g) = first_pass_logprob_grad(model, params, pair)?;
        loss -= w * lp;
        grads.add_scaled(&g, -w)?;
    }
    grads.scale(1.0 / total_w);
    Ok((loss / total_w, grads))
}

/// Mean teacher-forced negative log-likelihood over the batch.
pub fn nll_teacher_forcing(model: &Seq2Seq, params: &ParamStore, batch: &[Pair]) -> Result<(f64, GradientMap)> {
    nll_weighted(model, params, batch, &vec![1.0; batch.len()])
}

/// Norms of one SGD application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateInfo {
    pub grad_norm: f64,
    pub applied_norm: f64,
}

/// `θ ← θ − lr·g`, with `g` rescaled to global norm `clip` when it is
/// larger. Only parameters present in `grads` move. Nothing is modified when
/// any gradient entry is non-finite.
pub fn sgd_update(params: &mut ParamStore, grads: &GradientMap, lr: f64, clip: f64) -> Result<UpdateInfo> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    if !(clip > 0.0) {
        return Err(Error::Contract(format!("clip norm must be positive, got {clip}")));
    }
    for (name, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain { op: "sgd_update", detail: format!("gradient of {name}[{i}] is {}", g.data()[i]) });
        }
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape { op: "sgd_update", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
    }
    let norm = grads.norm();
    let factor = if norm > clip { clip / norm } else { 1.0 };
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * factor * d;
        }
    }
    Ok(UpdateInfo { grad_norm: norm, applied_norm: lr * factor * norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::ModelConfig;
    use crate::tensor::{finite_diff_check, Tensor};
    use crate::vocab::TokenSeq;

    fn pair(x: &[u32], y: &[u32]) -> Pair {
        Pair { x: TokenSeq::terminated(x), y: TokenSeq::terminated(y) }
    }

    fn setup() -> (Seq2Seq, ParamStore) {
        let m = Seq2Seq::new(ModelConfig::new(5, 3)).unwrap();
        let mut p = ParamStore::new();
        m.init_params(&mut rand::SeedableRng::seed_from_u64(3), &mut p);
        (m, p)
    }

    #[test]
    fn uniform_model_nll() {
        let (m, mut p) = setup();
        for name in ["out1.w", "out1.b"] {
            let shape = p.get(name).unwrap().shape().to_vec();
            p.insert(name, Tensor::zeros(&shape));
        }
        let batch = [pair(&[1, 2], &[2, 1]), pair(&[3], &[3, 3, 3])];
        let (loss, _) = nll_teacher_forcing(&m, &p, &batch).unwrap();
        assert!((loss - 3.5 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_equals_weight_two() {
        let (m, p) = setup();
        let a = pair(&[1, 2], &[2, 1]);
        let b = pair(&[3], &[1]);
        let (l1, g1) = nll_teacher_forcing(&m, &p, &[a.clone(), a.clone(), b.clone()]).unwrap();
        let (l2, g2) = nll_weighted(&m, &p, &[a, b], &[2.0, 1.0]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2).unwrap() < 1e-12);
    }

    #[test]
    fn nll_gradcheck() {
        let (m, p) = setup();
        let batch = [pair(&[1, 2], &[2, 1]), pair(&[3], &[3])];
        let (_, grads) = nll_teacher_forcing(&m, &p, &batch).unwrap();
        let r = finite_diff_check(|q| Ok(nll_teacher_forcing(&m, q, &batch)?.0), &p, &grads, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{:?}", r.worst);
    }

    #[test]
    fn sgd_rules() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![1.0, -2.0]));
        let mut g = GradientMap::new();
        g.insert("a", Tensor::vector(vec![0.0, 0.0]));
        sgd_update(&mut p, &g, 0.1, 5.0).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[1.0, -2.0]);

        g.insert("a", p.get("a").unwrap().clone());
        sgd_update(&mut p, &g, 1.0, f64::INFINITY).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[0.0, 0.0]);

        g.insert("a", Tensor::vector(vec![6.0, 8.0]));
        let info = sgd_update(&mut p, &g, 0.5, 1.0).unwrap();
        assert_eq!(info.grad_norm, 10.0);
        assert!((info.applied_norm - 0.5).abs() < 1e-15);
        assert!((Tensor::vector(p.get("a").unwrap().data().to_vec()).norm_sq().sqrt() - 0.5).abs() < 1e-12);

        let before = p.clone();
        g.insert("a", Tensor::vector(vec![f64::NAN, 1.0]));
        assert!(matches!(sgd_update(&mut p, &g, 0.5, 1.0), Err(Error::Domain { .. })));
        assert_eq!(p, before);
    }
}
