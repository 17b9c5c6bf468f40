//! End-to-end acceptance run: every criterion is evaluated at its stated
//! tolerance, one PASS/FAIL line is printed per criterion, and the test
//! fails if any criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use delib_cli::commands;
use delib_cli::config::RunConfig;
use delib_core::tasks::{generate_corpus, Splits, TaskKind, TaskSpec};
use delib_core::trainer::{evaluate, EvalOptions, OptimConfig, RegularizerConfig, TrainConfig, Trainer};
use delib_core::training::{IntermediateMode, Scheme, Strategy};
use delib_core::verify::{
    check_bound, check_estimator, check_gradients, check_guided_diagonal, check_mbr_identity, check_normalization,
    check_scheme_equivalence, CheckResult, VerifyConfig,
};

struct Outcome {
    id: usize,
    passed: bool,
    summary: String,
    elapsed: Duration,
    budget: Duration,
}

impl Outcome {
    fn line(&self) -> String {
        let verdict = if self.passed && self.elapsed <= self.budget { "PASS" } else { "FAIL" };
        format!(
            "criterion {:>2}: {verdict} ({:.1}s, budget {}s) {}",
            self.id,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.summary
        )
    }

    fn ok(&self) -> bool {
        self.passed && self.elapsed <= self.budget
    }
}

fn run<F>(id: usize, budget_s: u64, f: F) -> Outcome
where
    F: FnOnce() -> (bool, String),
{
    let start = Instant::now();
    let (passed, summary) = f();
    let o = Outcome { id, passed, summary, elapsed: start.elapsed(), budget: Duration::from_secs(budget_s) };
    println!("{}", o.line());
    o
}

fn from_checks(checks: Vec<CheckResult>) -> (bool, String) {
    let passed = checks.iter().all(|c| c.passed);
    let summary =
        checks.iter().map(|c| format!("{}={:.3e}{}", c.name, c.value, if c.passed { "" } else { "!" })).collect::<Vec<_>>().join(" ");
    (passed, summary)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn noisy_copy(seed: u64, train: usize, test: usize) -> Splits {
    generate_corpus(&TaskSpec { kind: TaskKind::NoisyCopy, p_noise: 0.2, vocab: 12, len_min: 4, len_max: 8, train, dev: 0, test, seed })
        .expect("valid task")
}

fn separate_config(seed: u64, mode: IntermediateMode, pretrain: usize, epochs: usize, gamma: f64) -> TrainConfig {
    TrainConfig {
        model: delib_core::seq2seq::ModelConfig::new(12, 32),
        scheme: Scheme::Separate { m: 1 },
        strategy: Strategy::Ancestral,
        optim: OptimConfig { lr: 0.1, clip: 5.0, epochs, pretrain_epochs: pretrain, batch_size: 16 },
        regularizer: RegularizerConfig { enabled: gamma > 0.0, gamma, g: 0.2 },
        intermediate_mode: mode,
        t_max: 9,
        seed,
    }
}

/// Pretrains θᴵ with teacher forcing for `pretrain` epochs, then trains θᴵᴵ
/// separately for `epochs` epochs from that same θᴵ under each variant.
/// Returns the first-pass summary and one two-pass summary per variant.
fn pretrain_then_separate(
    seed: u64,
    data: &Splits,
    pretrain: usize,
    epochs: usize,
    variants: &[(IntermediateMode, f64)],
) -> (delib_core::trainer::EvalSummary, Vec<delib_core::trainer::EvalSummary>) {
    let opts = EvalOptions::greedy(9);
    let mut base = Trainer::new(separate_config(seed, IntermediateMode::FreeRunning, pretrain, epochs, 0.0)).unwrap();
    for _ in 0..pretrain {
        base.pretrain_epoch(&data.train.pairs).unwrap();
    }
    let (first, _) = evaluate(&base.model, &base.params, &data.test.pairs, &opts).unwrap();
    let mut out = Vec::new();
    for &(mode, gamma) in variants {
        let cfg = separate_config(seed, mode, pretrain, epochs, gamma);
        let mut t = Trainer::from_params(cfg, base.params.clone(), base.epoch).unwrap();
        let stored = t.collect_samples(&data.train.pairs).unwrap();
        for _ in 0..epochs {
            t.separate_epoch(&data.train.pairs, &stored).unwrap();
        }
        for name in t.model.first_names() {
            assert_eq!(t.params.get(&name), base.params.get(&name), "first pass moved: {name}");
        }
        out.push(evaluate(&t.model, &t.params, &data.test.pairs, &opts).unwrap().0);
    }
    (first, out)
}

fn criterion_8() -> (bool, String) {
    let (diag_ok, diag) = from_checks(check_guided_diagonal(&VerifyConfig::default()).unwrap());
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for seed in 1..=3u64 {
        let data = noisy_copy(seed, 2000, 200);
        let variants = [(IntermediateMode::FreeRunning, 1.0), (IntermediateMode::FreeRunning, 0.0)];
        let (_, s) = pretrain_then_separate(seed, &data, 10, 25, &variants);
        gains.push(s[0].band_mass - s[1].band_mass);
        detail.push(format!("{:.3}/{:.3}", s[0].band_mass, s[1].band_mass));
    }
    let m = median(&gains);
    (diag_ok && m >= 0.2, format!("{diag}; band mass gamma=1/gamma=0 per seed [{}], median gain {m:.3} (need >= 0.2)", detail.join(" ")))
}

fn criterion_9() -> (bool, String) {
    let (mut d_free, mut d_forced) = (Vec::new(), Vec::new());
    let mut detail = Vec::new();
    for seed in 1..=5u64 {
        let data = noisy_copy(seed, 2000, 500);
        let variants = [(IntermediateMode::FreeRunning, 0.0), (IntermediateMode::TeacherForced, 0.0)];
        let (first, s) = pretrain_then_separate(seed, &data, 20, 20, &variants);
        d_free.push(s[0].ter_second - first.ter_first);
        d_forced.push(s[1].ter_second - first.ter_first);
        detail.push(format!("{:.4}/{:.4}/{:.4}", first.ter_first, s[0].ter_second, s[1].ter_second));
    }
    let (mf, mt) = (median(&d_free), median(&d_forced));
    let a = mf < 0.0;
    let b = mt >= -0.005;
    (
        a && b,
        format!(
            "TER single/free-running/teacher-forced per seed [{}]; median change (a) free-running {mf:+.4} (need < 0) {}, (b) teacher-forced {mt:+.4} (need >= -0.005) {}",
            detail.join(" "),
            if a { "ok" } else { "FAILED" },
            if b { "ok" } else { "FAILED" }
        ),
    )
}

fn criterion_10() -> (bool, String) {
    let quick = VerifyConfig { estimator_trials: 500, ..VerifyConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let v1 = commands::verify(&quick, Some(&dir.path().join("v1"))).unwrap();
    let v2 = commands::verify(&quick, Some(&dir.path().join("v2"))).unwrap();
    let report_same = fs::read(dir.path().join("v1/verify.json")).unwrap() == fs::read(dir.path().join("v2/verify.json")).unwrap();
    let cfg = RunConfig::from_toml(
        r#"
seed = 11
[task]
kind = "noisy_copy"
p_noise = 0.1
vocab = 8
len_min = 1
len_max = 4
train = 60
dev = 10
test = 10
seed = 3
[model]
hidden = 8
[scheme]
kind = "joint_grad"
m = 2
[optim]
epochs = 2
pretrain_epochs = 1
batch_size = 8
[eval]
splits = ["dev"]
info_gain = true
"#,
    )
    .unwrap();
    let a = commands::train(&cfg, &dir.path().join("a"), None, None).unwrap();
    let b = commands::train(&cfg, &dir.path().join("b"), None, None).unwrap();
    let ck_same = fs::read(&a.checkpoint).unwrap() == fs::read(&b.checkpoint).unwrap();
    let strip = |rs: &[delib_core::trainer::MetricRecord]| rs.iter().map(|r| (r.epoch, r.eval.clone())).collect::<Vec<_>>();
    let metrics_same = strip(&a.records) == strip(&b.records);
    (
        report_same && v1 == v2 && ck_same && metrics_same,
        format!("verify report identical: {report_same}; train checkpoint identical: {ck_same}; metrics identical: {metrics_same}"),
    )
}

#[test]
fn acceptance() {
    let cfg = VerifyConfig::default();
    let outcomes = vec![
        run(1, 60, || from_checks(check_bound(&cfg).unwrap())),
        run(2, 60, || from_checks(check_normalization(&cfg).unwrap())),
        run(3, 300, || from_checks(check_gradients(&cfg).unwrap())),
        run(4, 600, || {
            let checks = check_estimator(&cfg).unwrap();
            from_checks(checks.into_iter().filter(|c| c.name == "estimator_unbiased").collect())
        }),
        run(5, 600, || {
            let checks = check_estimator(&cfg).unwrap();
            from_checks(checks.into_iter().filter(|c| c.name == "estimator_variance_ratio").collect())
        }),
        run(6, 60, || from_checks(check_scheme_equivalence(&cfg).unwrap())),
        run(7, 60, || from_checks(check_mbr_identity(&cfg).unwrap())),
        run(8, 900, criterion_8),
        run(9, 1800, criterion_9),
        run(10, 300, criterion_10),
    ];
    println!("---");
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.ok()).map(|o| o.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
