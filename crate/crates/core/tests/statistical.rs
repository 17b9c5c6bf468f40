//! Monte-Carlo quantities against their enumerated values.

use std::collections::HashMap;

use delib_core::delib::Deliberation;
use delib_core::oracle::{enumerate_space, estimator_trial, EstimatorKind};
use delib_core::seq2seq::ModelConfig;
use delib_core::tasks::Pair;
use delib_core::training::{draw_intermediate_samples, mbr_loss, Distance, MbrMode, SampleConfig};
use delib_core::vocab::TokenSeq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (Deliberation, delib_core::tensor::ParamStore, Pair) {
    let m = Deliberation::new(ModelConfig::new(4, 3)).unwrap();
    let mut p = m.init_params(17);
    // sharpen the first pass so the space has uneven mass
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        for v in p.get_mut(&name).unwrap().data_mut() {
            *v *= 12.0;
        }
    }
    let pair = Pair { x: TokenSeq::terminated(&[1, 2]), y: TokenSeq::terminated(&[2]) };
    (m, p, pair)
}

#[test]
fn ancestral_frequencies_match_enumeration() {
    let (m, p, pair) = setup();
    let t_max = 3;
    let n = 50_000;
    let space = enumerate_space(m.vocab(), t_max, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = draw_intermediate_samples(m.first(), &p, &pair, &SampleConfig::ancestral(n, t_max), &mut rng).unwrap();
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for s in &set.samples {
        *counts.entry(s.tokens.ids().to_vec()).or_default() += 1;
    }
    let mut covered = 0.0;
    for y in &space.seqs {
        let prob = m.first().teacher_forced_logprob(&p, &pair.x, y).unwrap().total.exp();
        covered += prob;
        let freq = *counts.get(y.ids()).unwrap_or(&0) as f64 / n as f64;
        let sd = (prob * (1.0 - prob) / n as f64).sqrt();
        assert!((freq - prob).abs() <= 4.0 * sd + 1e-12, "{:?}: {freq} vs {prob}", y.ids());
    }
    assert!((covered - 1.0).abs() < 1e-9);
    assert_eq!(counts.values().sum::<usize>(), n);
    assert!(counts.len() <= space.len());
}

#[test]
fn sampled_mbr_matches_exact() {
    let (m, p, pair) = setup();
    let batch = [pair];
    let t_max = 3;
    let (exact, _) = mbr_loss(m.first(), &p, &batch, Distance::ZeroOne, MbrMode::exact(t_max)).unwrap();
    let risk = exact.losses["mbr"];
    assert!(risk > 0.05 && risk < 0.95, "{risk}");
    let n = 20_000;
    let (sampled, _) = mbr_loss(m.first(), &p, &batch, Distance::ZeroOne, MbrMode::Sampled { m: n, t_max, seed: 3 }).unwrap();
    let sd = (risk * (1.0 - risk) / n as f64).sqrt();
    let est = sampled.losses["mbr"];
    assert!((est - risk).abs() < 4.0 * sd, "{est} vs {risk} (sd {sd})");
}

#[test]
fn joint_and_separate_estimators_agree_per_trial() {
    let (m, p, pair) = setup();
    let only_second = m.second_only_names();
    for trial in 0..50 {
        let joint = estimator_trial(&m, &p, &pair, EstimatorKind::JointGrad, 2, 3, 9, trial).unwrap();
        let sep = estimator_trial(&m, &p, &pair, EstimatorKind::Separate, 2, 3, 9, trial).unwrap();
        assert_eq!(joint.restrict(&only_second), sep.restrict(&only_second));
    }
}
