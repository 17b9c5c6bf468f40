//! The enumeration-backed check suite: each check compares a computed value
//! against a threshold and reports the margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delib::{Deliberation, IntermediateFeatures};
use crate::error::{Error, Result};
use crate::oracle::{
    enumerate_space, exact_gradients, exact_gradients_direct, exact_losses, exact_marginal, verify_estimator, EnumeratedSpace,
    EstimatorKind, LossKind, DEFAULT_CAP,
};
use crate::seq2seq::{AttentionMap, ModelConfig};
use crate::tasks::Pair;
use crate::tensor::{finite_diff_check, GradientMap, ParamStore, Tensor};
use crate::training::{
    combined_second_pass_loss, draw_intermediate_samples, guided_attention_grad, guided_attention_loss, gumbel_noise,
    joint_grad_with_samples, joint_loss_with_noise, mbr_loss, mbr_loss_with_risk, nll_teacher_forcing, separate_train_second, Distance,
    IntermediateMode, MbrMode, Relaxation, SampleConfig, SampleSet,
};
use crate::vocab::{Token, TokenSeq};

/// Logit bias that makes the first pass a point mass: `exp(−800)` underflows
/// to zero.
const POINT_MASS_BIAS: f64 = 800.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub bound_instances: usize,
    pub normalization_instances: usize,
    pub mbr_instances: usize,
    /// Random instances draw `V` from `3..=max_vocab` and `T_max` from
    /// `1..=max_t`.
    pub max_vocab: usize,
    pub max_t: usize,
    pub hidden: usize,
    /// Random-instance parameters are the model's initialization times this
    /// factor, so that both passes are far from uniform.
    pub init_scale: f64,
    pub estimator_trials: usize,
    pub fd_step: f64,
    pub fd_tol: f64,
    pub z_max: f64,
    pub variance_ratio: (f64, f64),
    pub cap: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            bound_instances: 100,
            normalization_instances: 20,
            mbr_instances: 20,
            max_vocab: 4,
            max_t: 3,
            hidden: 3,
            init_scale: 25.0,
            estimator_trials: 10_000,
            fd_step: 1e-5,
            fd_tol: 1e-6,
            z_max: 4.0,
            variance_ratio: (0.1875, 0.3125),
            cap: DEFAULT_CAP,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_vocab < 3 || self.max_t == 0 || self.hidden == 0 {
            return Err(Error::Contract("verify needs max_vocab >= 3, max_t >= 1 and hidden >= 1".into()));
        }
        let (vmax, tmax) = (self.max_vocab, self.max_t);
        let count = crate::oracle::space_size(crate::vocab::Vocab::new(vmax)?, tmax);
        if count > u128::from(self.cap) {
            return Err(Error::Capacity { count, cap: self.cap });
        }
        if self.estimator_trials < 2 {
            return Err(Error::Contract("estimator_trials must be at least 2".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Contract("init_scale must be positive".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_tol > 0.0) {
            return Err(Error::Contract("fd_step and fd_tol must be positive".into()));
        }
        let (lo, hi) = self.variance_ratio;
        if !(lo <= hi) {
            return Err(Error::Contract("variance_ratio must be an ordered interval".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    AtMost { limit: f64 },
    Below { limit: f64 },
    AtLeast { limit: f64 },
    Within { lo: f64, hi: f64 },
}

impl Threshold {
    pub fn admits(self, v: f64) -> bool {
        match self {
            Threshold::AtMost { limit } => v <= limit,
            Threshold::Below { limit } => v < limit,
            Threshold::AtLeast { limit } => v >= limit,
            Threshold::Within { lo, hi } => lo <= v && v <= hi,
        }
    }

    /// Distance to the nearest boundary, positive on the admitted side.
    pub fn margin(self, v: f64) -> f64 {
        match self {
            Threshold::AtMost { limit } | Threshold::Below { limit } => limit - v,
            Threshold::AtLeast { limit } => v - limit,
            Threshold::Within { lo, hi } => (v - lo).min(hi - v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: Threshold,
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, value: f64, threshold: Threshold, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed: !value.is_nan() && threshold.admits(value),
            value,
            threshold,
            margin: threshold.margin(value),
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let bound = match self.threshold {
            Threshold::AtMost { limit } => format!("<= {limit:e}"),
            Threshold::Below { limit } => format!("< {limit}"),
            Threshold::AtLeast { limit } => format!(">= {limit:e}"),
            Threshold::Within { lo, hi } => format!("in [{lo}, {hi}]"),
        };
        write!(f, "{verdict} {}: value {:.6e} {bound} (margin {:.3e}) {}", self.name, self.value, self.margin, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// A random model, parameters, example and enumerated intermediate space.
pub struct Instance {
    pub model: Deliberation,
    pub params: ParamStore,
    pub pair: Pair,
    pub space: EnumeratedSpace,
}

/// Draws an instance: `V ∈ 3..=max_vocab`, `T_max ∈ 1..=max_t`, a source of
/// one to three content tokens and a target drawn uniformly from the space.
pub fn random_instance(rng: &mut ChaCha8Rng, cfg: &VerifyConfig) -> Result<Instance> {
    let v = rng.gen_range(3..=cfg.max_vocab);
    let t_max = rng.gen_range(1..=cfg.max_t);
    let mut mc = ModelConfig::new(v, cfg.hidden);
    mc.context_in_state = rng.gen_bool(0.5);
    let model = Deliberation::new(mc)?;
    let mut params = model.init_params(rng.gen());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        for v in params.get_mut(&name).expect("listed name").data_mut() {
            *v *= cfg.init_scale;
        }
    }
    let x: Vec<Token> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..(v - 1) as Token)).collect();
    let space = enumerate_space(model.vocab(), t_max, cfg.cap)?;
    let y = space.seqs[rng.gen_range(0..space.len())].clone();
    Ok(Instance { model, params, pair: Pair { x: TokenSeq::terminated(&x), y }, space })
}

/// Replaces θᴵ's output layer so every step emits `token` with probability one.
pub fn make_point_mass(params: &mut ParamStore, token: usize) -> Result<()> {
    let w = params.require("out1.w")?.shape().to_vec();
    let emit = w[0];
    if token >= emit {
        return Err(Error::Contract(format!("token {token} is not emittable (width {emit})")));
    }
    let mut b = vec![0.0; emit];
    b[token] = POINT_MASS_BIAS;
    params.insert("out1.w", Tensor::zeros(&w));
    params.insert("out1.b", Tensor::vector(b));
    Ok(())
}

fn instance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `L_y ≥ Ľ_y` on random instances, and equality under a point-mass θᴵ.
pub fn check_bound(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut rng = instance_rng(cfg.seed, 1);
    let (mut min_gap, mut holds) = (f64::INFINITY, 0);
    let mut max_eq = 0.0f64;
    for _ in 0..cfg.bound_instances {
        let mut inst = random_instance(&mut rng, cfg)?;
        let l = exact_losses(&inst.model, &inst.params, &inst.pair, &inst.space)?;
        let gap = l.bound - l.naive;
        min_gap = min_gap.min(gap);
        if gap >= -1e-9 {
            holds += 1;
        }
        let emit = inst.model.vocab().emit_size();
        make_point_mass(&mut inst.params, rng.gen_range(0..emit))?;
        let l = exact_losses(&inst.model, &inst.params, &inst.pair, &inst.space)?;
        max_eq = max_eq.max((l.bound - l.naive).abs());
    }
    Ok(vec![
        CheckResult::new(
            "bound_inequality",
            min_gap,
            Threshold::AtLeast { limit: -1e-9 },
            format!("min L_y - naive over {} instances; {holds}/{} hold", cfg.bound_instances, cfg.bound_instances),
        ),
        CheckResult::new(
            "bound_point_mass_equality",
            max_eq,
            Threshold::AtMost { limit: 1e-9 },
            "max |L_y - naive| with a point-mass first pass",
        ),
    ])
}

/// Total probability of the first pass and of the exact marginal.
pub fn check_normalization(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut rng = instance_rng(cfg.seed, 2);
    let (mut first, mut marginal) = (0.0f64, 0.0f64);
    for _ in 0..cfg.normalization_instances {
        let inst = random_instance(&mut rng, cfg)?;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for y in &inst.space.seqs {
            s1 += inst.model.first().teacher_forced_logprob(&inst.params, &inst.pair.x, y)?.total.exp();
            let pair = Pair { x: inst.pair.x.clone(), y: y.clone() };
            s2 += exact_marginal(&inst.model, &inst.params, &pair, &inst.space)?;
        }
        first = first.max((s1 - 1.0).abs());
        marginal = marginal.max((s2 - 1.0).abs());
    }
    let detail = format!("max |sum - 1| over {} instances", cfg.normalization_instances);
    Ok(vec![
        CheckResult::new("normalization_first_pass", first, Threshold::AtMost { limit: 1e-9 }, detail.clone()),
        CheckResult::new("normalization_marginal", marginal, Threshold::AtMost { limit: 1e-9 }, detail),
    ])
}

fn tiny(extras: bool, cfg: &VerifyConfig) -> Result<(Deliberation, ParamStore, Vec<Pair>)> {
    let mut mc = ModelConfig::new(4, cfg.hidden.min(3));
    mc.extras = extras;
    mc.context_in_state = true;
    let model = Deliberation::new(mc)?;
    let params = model.init_params(cfg.seed ^ 0x5eed);
    let batch = vec![
        Pair { x: TokenSeq::terminated(&[1, 2]), y: TokenSeq::terminated(&[2]) },
        Pair { x: TokenSeq::terminated(&[2]), y: TokenSeq::terminated(&[2, 1]) },
    ];
    Ok((model, params, batch))
}

fn stored_samples(model: &Deliberation, params: &ParamStore, batch: &[Pair], m: usize, t_max: usize, seed: u64) -> Result<Vec<SampleSet>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = instance_rng(seed, 100 + i as u64);
            draw_intermediate_samples(model.first(), params, pair, &SampleConfig::ancestral(m, t_max), &mut rng)
        })
        .collect()
}

fn gradcheck<F>(name: &str, f: F, params: &ParamStore, grads: &GradientMap, cfg: &VerifyConfig) -> Result<CheckResult>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let r = finite_diff_check(f, params, grads, cfg.fd_step, cfg.fd_tol)?;
    let worst = r.worst.as_ref().map(|w| format!("worst {}[{}]", w.param, w.index)).unwrap_or_default();
    Ok(CheckResult::new(
        format!("gradcheck_{name}"),
        r.max_rel_error(),
        Threshold::AtMost { limit: cfg.fd_tol },
        format!("{} coordinates; {worst}", r.coordinates),
    ))
}

/// Central finite differences against every analytic gradient.
pub fn check_gradients(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (model, params, batch) = tiny(false, cfg)?;
    let t_max = 2;

    let (_, g) = nll_teacher_forcing(model.first(), &params, &batch)?;
    out.push(gradcheck("teacher_forcing_nll", |q| Ok(nll_teacher_forcing(model.first(), q, &batch)?.0), &params, &g, cfg)?);

    let space = enumerate_space(model.vocab(), t_max, cfg.cap)?;
    for (name, kind) in [("exact_naive", LossKind::Naive), ("exact_bound", LossKind::Bound)] {
        let (_, g) = exact_gradients_direct(&model, &params, &batch[0], &space, kind)?;
        out.push(gradcheck(name, |q| Ok(kind.of(exact_losses(&model, q, &batch[0], &space)?)), &params, &g.total()?, cfg)?);
    }

    let mode = MbrMode::exact(t_max);
    let (_, g) = mbr_loss(model.first(), &params, &batch, Distance::Levenshtein, mode)?;
    out.push(gradcheck(
        "mbr_exact",
        |q| Ok(mbr_loss(model.first(), q, &batch, Distance::Levenshtein, mode)?.0.losses["mbr"]),
        &params,
        &g,
        cfg,
    )?);

    let g_width = 0.3;
    for extras in [false, true] {
        let (model, params, batch) = tiny(extras, cfg)?;
        let samples = stored_samples(&model, &params, &batch, 2, 3, cfg.seed)?;
        let suffix = if extras { "_extras" } else { "" };
        let (_, g) = guided_attention_grad(&model, &params, &batch, &samples, g_width)?;
        out.push(gradcheck(
            &format!("guided_attention{suffix}"),
            |q| Ok(guided_attention_grad(&model, q, &batch, &samples, g_width)?.0),
            &params,
            &g,
            cfg,
        )?);
        let (_, g) = combined_second_pass_loss(&model, &params, &batch, &samples, 0.7, g_width)?;
        out.push(gradcheck(
            &format!("combined{suffix}"),
            |q| Ok(combined_second_pass_loss(&model, q, &batch, &samples, 0.7, g_width)?.0.losses["combined"]),
            &params,
            &g,
            cfg,
        )?);
    }

    let (model, params, batch) = tiny(true, cfg)?;
    let emit = model.vocab().emit_size();
    let t_relax = 3;
    let noise: Vec<Vec<Vec<Vec<f64>>>> = (0..batch.len())
        .map(|i| {
            let mut rng = instance_rng(cfg.seed, 200 + i as u64);
            (0..2).map(|_| gumbel_noise(t_relax, emit, &mut rng)).collect()
        })
        .collect();
    for (name, mode) in
        [("relaxed_joint_free_running", IntermediateMode::FreeRunning), ("relaxed_joint_teacher_forced", IntermediateMode::TeacherForced)]
    {
        let run = |q: &ParamStore| joint_loss_with_noise(&model, q, &batch, &noise, 0.8, Relaxation::Relaxed, mode, t_relax);
        let g = run(&params)?.combined()?;
        out.push(gradcheck(name, |q| Ok(run(q)?.report.losses["joint"]), &params, &g, cfg)?);
    }
    Ok(out)
}

fn estimator_instance(cfg: &VerifyConfig) -> Result<Instance> {
    let model = Deliberation::new(ModelConfig::new(4, cfg.hidden.min(3)))?;
    let params = model.init_params(cfg.seed ^ 0xe57);
    let space = enumerate_space(model.vocab(), 2, cfg.cap)?;
    Ok(Instance { model, params, pair: Pair { x: TokenSeq::terminated(&[1, 2]), y: TokenSeq::terminated(&[2]) }, space })
}

/// Unbiasedness of the score-function estimator (M = 1) and its `1/M`
/// variance scaling (M = 4 against M = 1).
pub fn check_estimator(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let inst = estimator_instance(cfg)?;
    let run = |m: usize| {
        verify_estimator(
            &inst.model,
            &inst.params,
            &inst.pair,
            &inst.space,
            EstimatorKind::JointGrad,
            m,
            cfg.estimator_trials,
            cfg.seed.wrapping_add(m as u64),
        )
    };
    let one = run(1)?;
    let four = run(4)?;
    let z = one.max_abs_z();
    let worst =
        one.z.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(i, _)| one.labels[i].clone()).unwrap_or_default();
    let ratio = four.mean_variance_ratio(&one).unwrap_or(f64::NAN);
    let (lo, hi) = cfg.variance_ratio;
    Ok(vec![
        CheckResult::new(
            "estimator_unbiased",
            z,
            Threshold::Below { limit: cfg.z_max },
            format!("max |z| over {} coordinates, {} trials; worst {worst}", one.z.len(), one.trials),
        ),
        CheckResult::new(
            "estimator_variance_ratio",
            ratio,
            Threshold::Within { lo, hi },
            format!("mean var(M=4)/var(M=1) over {} trials", one.trials),
        ),
    ])
}

/// θᴵᴵ gradients from the three schemes on one shared sample set.
pub fn check_scheme_equivalence(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut worst = 0.0f64;
    for extras in [false, true] {
        for mode in [IntermediateMode::FreeRunning, IntermediateMode::TeacherForced] {
            let (model, params, batch) = tiny(extras, cfg)?;
            let t_max = 3;
            let emit = model.vocab().emit_size();
            let noise: Vec<Vec<Vec<Vec<f64>>>> = (0..batch.len())
                .map(|i| {
                    let mut rng = instance_rng(cfg.seed, 300 + i as u64);
                    (0..3).map(|_| gumbel_noise(t_max, emit, &mut rng)).collect()
                })
                .collect();
            let hard = joint_loss_with_noise(&model, &params, &batch, &noise, 0.7, Relaxation::StraightThrough, mode, t_max)?;
            let grad = joint_grad_with_samples(&model, &params, &batch, &hard.samples)?;
            let (_, sep) = separate_train_second(&model, &params, &batch, &hard.samples)?;
            let d1 = hard.second.max_abs_diff(&grad.second).unwrap_or(f64::INFINITY);
            let d2 = grad.second.max_abs_diff(&sep).unwrap_or(f64::INFINITY);
            worst = worst.max(d1).max(d2);
        }
    }
    Ok(vec![CheckResult::new(
        "scheme_equivalence",
        worst,
        Threshold::AtMost { limit: 1e-12 },
        "max |difference| of second-pass gradients, joint_grad / joint_loss(hard) / separate",
    )])
}

/// Exact MBR with risk `−log Fᴵᴵ` against the enumerated bound for θᴵ.
pub fn check_mbr_identity(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut rng = instance_rng(cfg.seed, 4);
    let mut worst = 0.0f64;
    for _ in 0..cfg.mbr_instances {
        let inst = random_instance(&mut rng, cfg)?;
        let (model, params, pair) = (&inst.model, &inst.params, &inst.pair);
        let risk = |_: usize, yi: &TokenSeq| -> Result<f64> {
            Ok(-model.second_pass_logprob(params, &pair.x, &IntermediateFeatures::new(yi.clone()), &pair.y)?.total)
        };
        let mode = MbrMode::Exact { t_max: inst.space.t_max, cap: cfg.cap };
        let (report, g) = mbr_loss_with_risk(model.first(), params, std::slice::from_ref(pair), risk, mode)?;
        let bound = exact_losses(model, params, pair, &inst.space)?.bound;
        let exact = exact_gradients(model, params, pair, &inst.space, LossKind::Bound)?;
        worst = worst.max((report.losses["mbr"] - bound).abs()).max(g.max_abs_diff(&exact.first).unwrap_or(f64::INFINITY));
    }
    Ok(vec![CheckResult::new(
        "mbr_identity",
        worst,
        Threshold::AtMost { limit: 1e-12 },
        format!("max |difference| of loss and first-pass gradient over {} instances", cfg.mbr_instances),
    )])
}

/// Identity attention has zero guided-attention loss for every length.
pub fn check_guided_diagonal(_cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut worst = 0.0f64;
    for n in 1..=12 {
        let attn = AttentionMap { rows: (0..n).map(|t| (0..n).map(|l| if l == t { 1.0 } else { 0.0 }).collect()).collect() };
        for g in [0.05, 0.2, 1.0] {
            worst = worst.max(guided_attention_loss(&attn, g)?.abs());
        }
    }
    Ok(vec![CheckResult::new(
        "guided_attention_diagonal",
        worst,
        Threshold::AtMost { limit: 0.0 },
        "max loss of identity attention, lengths 1..=12",
    )])
}

/// Every check, in a fixed order.
pub fn run_suite(cfg: &VerifyConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut checks = Vec::new();
    checks.extend(check_bound(cfg)?);
    checks.extend(check_normalization(cfg)?);
    checks.extend(check_gradients(cfg)?);
    checks.extend(check_estimator(cfg)?);
    checks.extend(check_scheme_equivalence(cfg)?);
    checks.extend(check_mbr_identity(cfg)?);
    checks.extend(check_guided_diagonal(cfg)?);
    Ok(VerifyReport { config: cfg.clone(), checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyConfig {
        VerifyConfig { bound_instances: 5, normalization_instances: 3, mbr_instances: 3, estimator_trials: 200, ..VerifyConfig::default() }
    }

    #[test]
    fn threshold_margins() {
        let t = Threshold::Within { lo: 0.2, hi: 0.3 };
        assert!(t.admits(0.25) && !t.admits(0.31));
        assert!((t.margin(0.22) - 0.02).abs() < 1e-15);
        assert!(!Threshold::Below { limit: 4.0 }.admits(4.0));
        assert!(Threshold::AtMost { limit: 0.0 }.admits(0.0));
        assert!(!CheckResult::new("nan", f64::NAN, Threshold::AtMost { limit: 1.0 }, "").passed);
    }

    #[test]
    fn deterministic_checks_pass() {
        let cfg = quick();
        for checks in [
            check_bound(&cfg).unwrap(),
            check_normalization(&cfg).unwrap(),
            check_scheme_equivalence(&cfg).unwrap(),
            check_mbr_identity(&cfg).unwrap(),
            check_guided_diagonal(&cfg).unwrap(),
        ] {
            for c in checks {
                assert!(c.passed, "{c}");
            }
        }
    }

    #[test]
    fn point_mass_is_exact() {
        let cfg = quick();
        let mut rng = instance_rng(9, 0);
        let mut inst = random_instance(&mut rng, &cfg).unwrap();
        make_point_mass(&mut inst.params, 0).unwrap();
        let p = inst.model.first().teacher_forced_logprob(&inst.params, &inst.pair.x, &TokenSeq::terminated(&[])).unwrap();
        assert_eq!(p.total, 0.0);
        assert!(make_point_mass(&mut inst.params, 99).is_err());
    }

    #[test]
    fn over_capacity_config_is_refused() {
        let cfg = VerifyConfig { max_vocab: 12, max_t: 8, ..VerifyConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Capacity { .. })));
    }

    #[test]
    fn report_is_reproducible() {
        let cfg = VerifyConfig { estimator_trials: 50, ..quick() };
        let a = check_estimator(&cfg).unwrap();
        let b = check_estimator(&cfg).unwrap();
        assert_eq!(a, b);
    }
}
