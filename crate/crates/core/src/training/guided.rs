//! Guided attention on the second pass's intermediate-output attention.

use std::time::Instant;

use super::sampling::SampleSet;
use super::{require_batch, value_and_grad, LossReport};
use crate::decode;
use crate::delib::{Deliberation, IntermediateInput};
use crate::error::{Error, Result};
use crate::seq2seq::AttentionMap;
use crate::tasks::Pair;
use crate::tensor::{GradientMap, Graph, ParamStore, Var};

/// `w = 1 − exp(−(t/T − l/Tᴵ)² / (2g²))` with 1-based `t` and `l`.
pub fn guided_weight(t: usize, big_t: usize, l: usize, big_ti: usize, g: f64) -> f64 {
    let d = t as f64 / big_t as f64 - l as f64 / big_ti as f64;
    1.0 - (-(d * d) / (2.0 * g * g)).exp()
}

fn check_g(g: f64) -> Result<()> {
    if g > 0.0 && !g.is_nan() {
        Ok(())
    } else {
        Err(Error::Contract(format!("guided-attention sharpness g must be positive, got {g}")))
    }
}

/// `Σ_t Σ_l α_{t,l} w_{t,l}` for a `T × Tᴵ` attention map.
pub fn guided_attention_loss(attn: &AttentionMap, g: f64) -> Result<f64> {
    check_g(g)?;
    let big_t = attn.rows.len();
    let mut loss = 0.0;
    for (t, row) in attn.rows.iter().enumerate() {
        for (l, &a) in row.iter().enumerate() {
            loss += a * guided_weight(t + 1, big_t, l + 1, row.len(), g);
        }
    }
    Ok(loss)
}

/// Differentiable form of [`guided_attention_loss`] over alignment rows.
pub fn guided_attention_var(graph: &mut Graph, rows: &[Var], g: f64) -> Result<Var> {
    check_g(g)?;
    if rows.is_empty() {
        return Ok(graph.constant_scalar(0.0));
    }
    let big_t = rows.len();
    let mut terms = Vec::with_capacity(big_t);
    for (t, &row) in rows.iter().enumerate() {
        let big_ti = graph.shape(row)[0];
        let w = (1..=big_ti).map(|l| guided_weight(t + 1, big_t, l, big_ti, g)).collect();
        let wv = graph.constant_vec(w);
        terms.push(graph.matmul(row, wv)?);
    }
    graph.add_n(&terms)
}

/// Mean over rows of the attention mass within `|t/T − l/Tᴵ| < band`.
pub fn diagonal_band_mass(attn: &AttentionMap, band: f64) -> f64 {
    let big_t = attn.rows.len();
    if big_t == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (t, row) in attn.rows.iter().enumerate() {
        let ti = row.len() as f64;
        total += row
            .iter()
            .enumerate()
            .filter(|(l, _)| ((t + 1) as f64 / big_t as f64 - (l + 1) as f64 / ti).abs() < band)
            .map(|(_, a)| a)
            .sum::<f64>();
    }
    total / big_t as f64
}

/// `L_y + γ L_α` for θᴵᴵ on stored samples, both terms averaged over samples
/// and batch. Reports `separate`, `guided_attention` and `combined`.
pub fn combined_second_pass_loss(
    model: &Deliberation,
    params: &ParamStore,
    batch: &[Pair],
    samples: &[SampleSet],
    gamma: f64,
    g: f64,
) -> Result<(LossReport, GradientMap)> {
    let start = Instant::now();
    require_batch(batch)?;
    check_g(g)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Contract(format!("gamma must be non-negative, got {gamma}")));
    }
    if samples.len() != batch.len() {
        return Err(Error::Data(format!("{} sample sets for {} examples", samples.len(), batch.len())));
    }
    if let Some(i) = samples.iter().position(SampleSet::is_empty) {
        return Err(Error::Data(format!("no stored samples for example {i}")));
    }
    let names = model.second_names();
    let mut grads = GradientMap::zeros_like(params, &names)?;
    let (mut ly, mut la) = (0.0, 0.0);
    let nb = batch.len() as f64;
    for (pair, set) in batch.iter().zip(samples) {
        let scale = 1.0 / (set.len() as f64 * nb);
        for s in &set.samples {
            let feats = s.intermediate(model.config().extras)?;
            let mut parts = (0.0, 0.0);
            let (_, gr) = value_and_grad(params, &names, |gr, b| {
                let vars = model.bind_second(gr, b)?;
                let dec = vars.decoder(gr, &pair.x, IntermediateInput::Tokens(&feats))?;
                let scored = decode::teacher_force(gr, &dec, pair.y.ids())?;
                let guide = guided_attention_var(gr, &scored.alphas[1], g)?;
                parts = (gr.scalar(scored.total), gr.scalar(guide));
                let nll = gr.scale(scored.total, -1.0);
                let weighted = gr.scale(guide, gamma);
                gr.add(nll, weighted)
            })?;
            grads.add_scaled(&gr, scale)?;
            ly -= parts.0 * scale;
            la += parts.1 * scale;
        }
    }
    let report = LossReport::timed(start)
        .with_loss("separate", ly)
        .with_loss("guided_attention", la)
        .with_loss("combined", ly + gamma * la)
        .with_norm("second", &grads);
    Ok((report, grads))
}

/// Mean guided-attention loss over batch and samples, with its gradient
/// over θᴵᴵ.
pub fn guided_attention_grad(
    model: &Deliberation,
    params: &ParamStore,
    batch: &[Pair],
    samples: &[SampleSet],
    g: f64,
) -> Result<(f64, GradientMap)> {
    require_batch(batch)?;
    check_g(g)?;
    if samples.len() != batch.len() || samples.iter().any(SampleSet::is_empty) {
        return Err(Error::Data("every example needs stored samples".into()));
    }
    let names = model.second_names();
    let mut grads = GradientMap::zeros_like(params, &names)?;
    let mut loss = 0.0;
    let nb = batch.len() as f64;
    for (pair, set) in batch.iter().zip(samples) {
        let scale = 1.0 / (set.len() as f64 * nb);
        for s in &set.samples {
            let feats = s.intermediate(model.config().extras)?;
            let (v, gr) = value_and_grad(params, &names, |gr, b| {
                let vars = model.bind_second(gr, b)?;
                let dec = vars.decoder(gr, &pair.x, IntermediateInput::Tokens(&feats))?;
                let scored = decode::teacher_force(gr, &dec, pair.y.ids())?;
                guided_attention_var(gr, &scored.alphas[1], g)
            })?;
            grads.add_scaled(&gr, scale)?;
            loss += v * scale;
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::ModelConfig;
    use crate::tensor::finite_diff_check;
    use crate::training::{draw_intermediate_samples, separate_train_second, SampleConfig};
    use crate::vocab::TokenSeq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(rows: Vec<Vec<f64>>) -> AttentionMap {
        AttentionMap { rows }
    }

    #[test]
    fn diagonal_is_free() {
        let a = map(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(guided_attention_loss(&a, 0.2).unwrap(), 0.0);
        let b = map(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!(guided_attention_loss(&b, 0.2).unwrap() > 0.0);
    }

    #[test]
    fn worked_example() {
        let a = map(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        let expected = 1.0 - (-3.125f64).exp();
        assert!((guided_attention_loss(&a, 0.2).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.9561).abs() < 1e-4);
    }

    #[test]
    fn wide_g_vanishes_and_is_monotone() {
        let a = map(vec![vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]);
        let mut last = f64::INFINITY;
        for g in [0.05, 0.1, 0.2, 0.5, 1.0, 10.0] {
            let l = guided_attention_loss(&a, g).unwrap();
            assert!(l <= last);
            last = l;
        }
        assert!(guided_attention_loss(&a, 1e6).unwrap() < 1e-10);
        assert!(guided_attention_loss(&a, 0.0).is_err());
    }

    #[test]
    fn band_mass() {
        let a = map(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(diagonal_band_mass(&a, 0.2), 1.0);
        let b = map(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(diagonal_band_mass(&b, 0.2), 0.0);
    }

    fn setup() -> (Deliberation, ParamStore, Vec<Pair>, Vec<SampleSet>) {
        let m = Deliberation::new(ModelConfig::new(6, 3)).unwrap();
        let p = m.init_params(4);
        let batch = vec![
            Pair { x: TokenSeq::terminated(&[1, 2, 3]), y: TokenSeq::terminated(&[1, 2, 3]) },
            Pair { x: TokenSeq::terminated(&[4]), y: TokenSeq::terminated(&[4, 1]) },
        ];
        let cfg = SampleConfig::ancestral(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = batch.iter().map(|pr| draw_intermediate_samples(m.first(), &p, pr, &cfg, &mut rng).unwrap()).collect();
        (m, p, batch, samples)
    }

    #[test]
    fn gamma_zero_is_separate_loss() {
        let (m, p, batch, samples) = setup();
        let (a, ga) = combined_second_pass_loss(&m, &p, &batch, &samples, 0.0, 0.2).unwrap();
        let (b, gb) = separate_train_second(&m, &p, &batch, &samples).unwrap();
        assert_eq!(a.losses["combined"], b.losses["separate"]);
        assert!(ga.max_abs_diff(&gb).unwrap() < 1e-15);
    }

    #[test]
    fn affine_in_gamma() {
        let (m, p, batch, samples) = setup();
        let l = |gamma| combined_second_pass_loss(&m, &p, &batch, &samples, gamma, 0.2).unwrap().0.losses["combined"];
        let (l0, l1, l3) = (l(0.0), l(1.0), l(3.0));
        assert!((l3 - l0 - 3.0 * (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn combined_gradcheck() {
        let (m, p, batch, samples) = setup();
        let (_, grads) = combined_second_pass_loss(&m, &p, &batch, &samples, 1.0, 0.2).unwrap();
        let r = finite_diff_check(
            |q| Ok(combined_second_pass_loss(&m, q, &batch, &samples, 1.0, 0.2)?.0.losses["combined"]),
            &p,
            &grads,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.worst);
        assert!(grads.get("att2y.v").unwrap().norm_sq() > 0.0);

        let (_, plain) = separate_train_second(&m, &p, &batch, &samples).unwrap();
        let (la, guide) = guided_attention_grad(&m, &p, &batch, &samples, 0.2).unwrap();
        let mut sum = plain;
        sum.add_scaled(&guide, 1.0).unwrap();
        assert!(sum.max_abs_diff(&grads).unwrap() < 1e-12);
        let rep = combined_second_pass_loss(&m, &p, &batch, &samples, 1.0, 0.2).unwrap().0;
        assert!((rep.losses["guided_attention"] - la).abs() < 1e-12);
    }
}
