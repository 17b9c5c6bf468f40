use delib_core::delib::Deliberation;
use delib_core::oracle::{enumerate_space, exact_losses, exact_marginal};
use delib_core::seq2seq::ModelConfig;
use delib_core::tasks::{corpus_to_string, generate_corpus, parse_corpus, Pair, TaskKind, TaskSpec};
use delib_core::training::{guided_weight, nll_teacher_forcing, nll_weighted};
use delib_core::vocab::{Token, TokenSeq};
use proptest::prelude::*;

fn seq(max_token: Token, max_len: usize) -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(1..=max_token, 0..=max_len)
}

fn model(vocab: usize, hidden: usize, cis: bool) -> Deliberation {
    let mut cfg = ModelConfig::new(vocab, hidden);
    cfg.context_in_state = cis;
    Deliberation::new(cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_is_linear_in_example_weights(
        seed in any::<u64>(),
        w1 in 0.1f64..3.0,
        w2 in 0.1f64..3.0,
        x1 in seq(4, 3), y1 in seq(4, 3), x2 in seq(4, 3), y2 in seq(4, 3),
    ) {
        let m = model(6, 3, false);
        let p = m.init_params(seed);
        let a = Pair { x: TokenSeq::terminated(&x1), y: TokenSeq::terminated(&y1) };
        let b = Pair { x: TokenSeq::terminated(&x2), y: TokenSeq::terminated(&y2) };
        let (la, ga) = nll_teacher_forcing(m.first(), &p, std::slice::from_ref(&a)).unwrap();
        let (lb, gb) = nll_teacher_forcing(m.first(), &p, std::slice::from_ref(&b)).unwrap();
        let (l, g) = nll_weighted(m.first(), &p, &[a, b], &[w1, w2]).unwrap();
        let s = w1 + w2;
        prop_assert!((l - (w1 * la + w2 * lb) / s).abs() < 1e-10);
        let mut expect = ga.clone();
        expect.scale(w1 / s);
        expect.add_scaled(&gb, w2 / s).unwrap();
        prop_assert!(g.max_abs_diff(&expect).unwrap() < 1e-10);
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), x in seq(5, 6), y in seq(5, 6), cis in any::<bool>()) {
        let m = model(7, 4, cis);
        let p = m.init_params(seed);
        let s = m.first().teacher_forced_logprob(&p, &TokenSeq::terminated(&x), &TokenSeq::terminated(&y)).unwrap();
        prop_assert_eq!(s.attn.rows.len(), y.len() + 1);
        for row in &s.attn.rows {
            prop_assert_eq!(row.len(), x.len() + 1);
            prop_assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(s.total <= 0.0);
    }

    #[test]
    fn marginal_normalizes_and_bound_dominates(seed in any::<u64>(), vocab in 3usize..=4, t_max in 1usize..=3, x in seq(2, 3)) {
        let m = model(vocab, 3, seed % 2 == 0);
        let p = m.init_params(seed);
        let space = enumerate_space(m.vocab(), t_max, 1000).unwrap();
        let x = TokenSeq::terminated(&x.iter().map(|&t| t.min(vocab as Token - 2)).collect::<Vec<_>>());
        let mut total = 0.0;
        for y in &space.seqs {
            let pair = Pair { x: x.clone(), y: y.clone() };
            total += exact_marginal(&m, &p, &pair, &space).unwrap();
            let l = exact_losses(&m, &p, &pair, &space).unwrap();
            prop_assert!(l.bound >= l.naive - 1e-9, "{:?}", l);
        }
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corpus_round_trip(
        kind in prop_oneof![Just(TaskKind::Copy), Just(TaskKind::Reverse), Just(TaskKind::NoisyCopy)],
        vocab in 4usize..20,
        len_min in 1usize..4,
        extra in 0usize..4,
        n in 0usize..20,
        seed in any::<u64>(),
        noise in 0.0f64..1.0,
    ) {
        let spec = TaskSpec {
            kind,
            p_noise: if kind == TaskKind::NoisyCopy { noise } else { 0.0 },
            vocab,
            len_min,
            len_max: len_min + extra,
            train: n,
            dev: 2,
            test: 1,
            seed,
        };
        let c = generate_corpus(&spec).unwrap();
        for corpus in [&c.train, &c.dev, &c.test] {
            let back = parse_corpus(&corpus_to_string(corpus).unwrap()).unwrap();
            prop_assert_eq!(&back, corpus);
            for pair in &corpus.pairs {
                prop_assert!(pair.x.is_terminated() && pair.y.is_terminated());
                prop_assert!((len_min..=len_min + extra).contains(&pair.y.content().len()));
            }
        }
    }

    #[test]
    fn guided_weight_is_a_penalty(t in 1usize..20, big_t in 1usize..20, l in 1usize..20, big_ti in 1usize..20, g in 0.01f64..2.0) {
        let w = guided_weight(t, big_t, l, big_ti, g);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(guided_weight(t, big_t, t, big_t, g), 0.0);
    }
}
