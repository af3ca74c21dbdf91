use std::collections::HashMap;
use std::path::Path;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use ndp_moe::bitwidth::{
    build_loss_table, increment_budget, oracle_prefix_split, oracle_unrestricted, prefix_split,
};
use ndp_moe::placement::place;
use ndp_moe::stats::{importance, stage_similarity, ImportanceScores, StageStats};
use ndp_moe::trace::{
    generate_traces, read_traces_from, write_traces_to, GeneratorParams, TraceHeader,
};
use ndp_moe::ModelConfig;

fn fixed(cases: u32, seed: u64) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn small_model(layers: usize, experts: usize, k: usize) -> ModelConfig {
    ModelConfig {
        name: "small".into(),
        hidden_dim: 64,
        ffn_dim: 128,
        num_layers: layers,
        num_experts: experts,
        top_k: k,
        matrices_per_expert: 3,
    }
}

fn model_strategy() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 2usize..10)
        .prop_flat_map(|(l, e)| (Just(l), Just(e), 1..=e.min(3)))
        .prop_map(|(l, e, k)| small_model(l, e, k))
}

fn generator_strategy() -> impl Strategy<Value = GeneratorParams> {
    (
        any::<u64>(),
        0.05f64..3.0,
        0.0f64..=1.0,
        0.0f64..=1.0,
        1usize..12,
        1usize..12,
        0usize..5,
    )
        .prop_map(
            |(seed, alpha_dir, rho, global_share, p, o, n)| GeneratorParams {
                seed,
                alpha_dir,
                rho,
                global_share,
                prompt_len: p,
                output_len: o,
                num_sequences: n,
            },
        )
}

/// Loss rows as `[L(1), L(2), L(3), L(4)]`, optionally non-monotone.
fn rows_strategy(monotone: bool) -> impl Strategy<Value = Vec<[f64; 4]>> {
    (2usize..9).prop_flat_map(move |n| {
        prop::collection::vec(
            (0.0f64..10.0, 0.0f64..4.0, 0.0f64..4.0, 0.0f64..4.0).prop_map(move |(a, b, c, d)| {
                if monotone {
                    [a + b + c + d, a + c + d, a + d, a]
                } else {
                    [a, b, c, d]
                }
            }),
            n,
        )
    })
}

/// Reference gains on the running-minimum envelope.
fn ref_gains(row: &[f64; 4]) -> [f64; 4] {
    let mut env = *row;
    for b in 1..4 {
        env[b] = env[b].min(env[b - 1]);
    }
    [0.0, env[0] - env[1], env[0] - env[2], env[0] - env[3]]
}

/// Best gain over nonincreasing bit sequences spending exactly `budget`.
fn ref_best_prefix(rows: &[[f64; 4]], budget: usize) -> f64 {
    let n = rows.len();
    let mut best = f64::NEG_INFINITY;
    for code in 0..4usize.pow(n as u32) {
        let bits: Vec<usize> = (0..n)
            .map(|i| code / 4usize.pow(i as u32) % 4 + 1)
            .collect();
        if bits.windows(2).any(|w| w[1] > w[0]) {
            continue;
        }
        if bits.iter().map(|b| b - 1).sum::<usize>() != budget {
            continue;
        }
        let g: f64 = bits
            .iter()
            .zip(rows)
            .map(|(&b, r)| ref_gains(r)[b - 1])
            .sum();
        best = best.max(g);
    }
    best
}

proptest! {
    #![proptest_config(fixed(64, 0x5eed_0001))]

    #[test]
    fn stats_conserve_selections(m in model_strategy(), g in generator_strategy()) {
        let traces = generate_traces(&m, &g).unwrap();
        for s in &traces {
            let st = StageStats::collect(&s.decode, m.num_experts).unwrap();
            let mut recount: HashMap<(usize, u32), u64> = HashMap::new();
            for tok in &s.decode {
                for (l, sels) in tok.layers.iter().enumerate() {
                    for sel in sels {
                        *recount.entry((l, sel.expert)).or_default() += 1;
                    }
                }
            }
            for l in 0..m.num_layers {
                let total: u64 = st.counts[l].iter().sum();
                prop_assert_eq!(total, (m.top_k * s.decode.len()) as u64);
                for e in 0..m.num_experts {
                    let want = recount.get(&(l, e as u32)).copied().unwrap_or(0);
                    prop_assert_eq!(st.counts[l][e], want);
                }
                let w: f64 = st.score_sums[l].iter().sum();
                prop_assert!((w - s.decode.len() as f64).abs() < 1e-4 * s.decode.len() as f64);
            }
        }
    }

    #[test]
    fn trace_round_trip(m in model_strategy(), g in generator_strategy()) {
        let traces = generate_traces(&m, &g).unwrap();
        let header = TraceHeader::for_model(&m);
        let mut first = Vec::new();
        write_traces_to(&mut first, &header, &traces).unwrap();
        let (h, back) = read_traces_from(first.as_slice(), Path::new("mem"), &m).unwrap();
        prop_assert_eq!(h.as_ref(), Some(&header));
        prop_assert_eq!(&back, &traces);
        let mut second = Vec::new();
        write_traces_to(&mut second, &header, &back).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn importance_rows_are_distributions(
        m in model_strategy(), g in generator_strategy(), alpha in 0.0f64..=1.0
    ) {
        let traces = generate_traces(&m, &g).unwrap();
        for s in &traces {
            let st = StageStats::collect(&s.prefill, m.num_experts).unwrap();
            let sc = importance(&st, alpha).unwrap();
            for row in &sc.scores {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
            // affine in alpha
            let s0 = importance(&st, 0.0).unwrap();
            let s1 = importance(&st, 1.0).unwrap();
            for l in 0..m.num_layers {
                for e in 0..m.num_experts {
                    let lin = alpha * s1.scores[l][e] + (1.0 - alpha) * s0.scores[l][e];
                    prop_assert!((sc.scores[l][e] - lin).abs() < 1e-12);
                }
            }
            let sim = stage_similarity(&st, &StageStats::collect(&s.decode, m.num_experts).unwrap()).unwrap();
            prop_assert!(sim.per_layer.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn importance_ignores_score_scale(
        p in prop::collection::vec(0u64..50, 2..9), scale in 0.01f64..100.0, alpha in 0.0f64..=1.0
    ) {
        let w: Vec<f64> = p.iter().map(|&c| c as f64 * 0.37 + 0.01).collect();
        let mk = |w: Vec<f64>| StageStats { counts: vec![p.clone()], score_sums: vec![w], token_count: 1 };
        let a = importance(&mk(w.clone()), alpha).unwrap();
        let b = importance(&mk(w.iter().map(|x| x * scale).collect()), alpha).unwrap();
        for (x, y) in a.scores[0].iter().zip(&b.scores[0]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn placement_is_top_k_with_low_id_ties(
        rows in prop::collection::vec(prop::collection::vec(0u8..4, 8), 1..5), k in 0usize..=8
    ) {
        // coarse values force many ties
        let scores = ImportanceScores {
            scores: rows.iter().map(|r| r.iter().map(|&x| x as f64 / 4.0).collect()).collect(),
            alpha: 0.5,
        };
        let plan = place(&scores, k).unwrap();
        prop_assert_eq!(&plan, &place(&scores, k).unwrap());
        for (l, row) in rows.iter().enumerate() {
            let mut want: Vec<usize> = (0..8).collect();
            want.sort_by_key(|&e| (std::cmp::Reverse(row[e]), e));
            let mut want = want[..k].to_vec();
            want.sort_unstable();
            prop_assert_eq!(&plan.hot[l], &want);
            prop_assert_eq!(plan.hot[l].len() + plan.cold[l].len(), 8);
        }
    }

    #[test]
    fn migration_bounded_by_budget(
        a in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 1..6),
        b in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 1..6),
        k in 0usize..=8
    ) {
        let n = a.len().min(b.len());
        let pa = place(&ImportanceScores { scores: a[..n].to_vec(), alpha: 0.5 }, k).unwrap();
        let pb = place(&ImportanceScores { scores: b[..n].to_vec(), alpha: 0.5 }, k).unwrap();
        prop_assert!(pb.migrations_from(Some(&pa)) <= k * n);
        prop_assert_eq!(pb.migrations_from(None), k * n);
        prop_assert_eq!(pa.migrations_from(Some(&pa)), 0);
    }

    #[test]
    fn prefix_split_is_optimal(rows in rows_strategy(false), avg in prop::sample::select(vec![1.0, 1.5, 2.0, 2.5, 3.0, 4.0])) {
        let order: Vec<usize> = (0..rows.len()).collect();
        let got = prefix_split(&order, &rows, avg).unwrap();
        let budget = increment_budget(rows.len(), avg).unwrap();
        prop_assert_eq!(got.budget, budget);
        prop_assert_eq!(got.bits.iter().map(|&b| b as usize - 1).sum::<usize>(), budget);
        prop_assert!(got.bits.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(got.states_visited <= (rows.len() + 1).pow(2));
        let want = ref_best_prefix(&rows, budget);
        prop_assert!((got.gain - want).abs() <= 1e-9 * want.abs().max(1.0));
        let lib_oracle = oracle_prefix_split(&order, &rows, avg).unwrap();
        prop_assert!((got.gain - lib_oracle.gain).abs() <= 1e-9 * want.abs().max(1.0));
        // ordering restriction can only lose gain
        let free = oracle_unrestricted(&order, &rows, avg).unwrap();
        prop_assert!(free.gain >= got.gain - 1e-9);
    }

    #[test]
    fn constant_shift_leaves_allocation(rows in rows_strategy(true), shift in 0.0f64..100.0) {
        let order: Vec<usize> = (0..rows.len()).collect();
        let shifted: Vec<[f64; 4]> = rows.iter().map(|r| r.map(|x| x + shift)).collect();
        let a = prefix_split(&order, &rows, 2.0).unwrap();
        let b = prefix_split(&order, &shifted, 2.0).unwrap();
        prop_assert_eq!(a.bits, b.bits);
    }
}

proptest! {
    #![proptest_config(fixed(12, 0x5eed_0002))]

    #[test]
    fn loss_table_monotone(seed in any::<u64>(), calib in 1usize..16) {
        let m = small_model(2, 4, 2);
        let t = build_loss_table(&m, seed, calib).unwrap();
        for layer in &t.losses {
            for row in layer {
                prop_assert!(row[0] >= row[1] && row[1] >= row[2] && row[2] >= row[3], "{:?}", row);
                prop_assert!(row[3] > 0.0);
            }
        }
    }
}
