use ndp_moe::stats::{stage_similarity, StageStats};
use ndp_moe::trace::{generate_traces, GeneratorParams, SequenceTrace};
use ndp_moe::ModelConfig;

fn params(seed: u64, rho: f64, n: usize) -> GeneratorParams {
    GeneratorParams {
        seed,
        rho,
        num_sequences: n,
        ..Default::default()
    }
}

fn mean_similarity(model: &ModelConfig, traces: &[SequenceTrace]) -> f64 {
    let sims: Vec<f64> = traces
        .iter()
        .map(|s| {
            let a = StageStats::collect(&s.prefill, model.num_experts).unwrap();
            let b = StageStats::collect(&s.decode, model.num_experts).unwrap();
            stage_similarity(&a, &b).unwrap().mean
        })
        .collect();
    sims.iter().sum::<f64>() / sims.len() as f64
}

#[test]
fn aggregate_histogram_is_skewed() {
    let m = ModelConfig::mixtral_8x7b();
    let traces = generate_traces(&m, &params(11, 0.9, 512)).unwrap();
    let mut counts = vec![vec![0u64; 8]; m.num_layers];
    for s in &traces {
        for tok in s.prefill.iter().chain(&s.decode) {
            for (l, sels) in tok.layers.iter().enumerate() {
                for sel in sels {
                    counts[l][sel.expert as usize] += 1;
                }
            }
        }
    }
    let (mut high, mut low) = (false, false);
    for row in &counts {
        let total: u64 = row.iter().sum();
        for &c in row {
            let rate = c as f64 / total as f64;
            high |= rate > 2.0 / 8.0;
            low |= rate < 0.5 / 8.0;
        }
    }
    assert!(high && low);
}

#[test]
fn similarity_grows_with_rho() {
    let m = ModelConfig::mixtral_8x7b();
    let sims: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&rho| mean_similarity(&m, &generate_traces(&m, &params(3, rho, 64)).unwrap()))
        .collect();
    assert!(sims[0] < sims[1] && sims[1] < sims[2], "{sims:?}");
}

#[test]
fn identical_source_approaches_one_with_length() {
    let m = ModelConfig {
        num_layers: 4,
        ..ModelConfig::mixtral_8x7b()
    };
    let sim_at = |len| {
        let g = GeneratorParams {
            rho: 1.0,
            prompt_len: len,
            output_len: len,
            num_sequences: 16,
            ..Default::default()
        };
        mean_similarity(&m, &generate_traces(&m, &g).unwrap())
    };
    let short = sim_at(16);
    let long = sim_at(4096);
    assert!(long > short);
    assert!(long > 0.99, "{long}");
}

#[test]
fn count_contract_and_validity() {
    let m = ModelConfig::mixtral_8x22b();
    let g = GeneratorParams {
        prompt_len: 5,
        output_len: 7,
        num_sequences: 9,
        ..Default::default()
    };
    let traces = generate_traces(&m, &g).unwrap();
    assert_eq!(traces.len(), 9);
    for s in &traces {
        assert_eq!(s.prefill.len(), 5);
        assert_eq!(s.decode.len(), 7);
        s.validate(&m).unwrap();
    }
}

#[test]
fn sequences_do_not_depend_on_batch_size() {
    let m = ModelConfig::mixtral_8x7b();
    let few = generate_traces(&m, &params(5, 0.9, 3)).unwrap();
    let many = generate_traces(&m, &params(5, 0.9, 10)).unwrap();
    assert_eq!(few[..], many[..3]);
}

#[test]
fn seeds_differ() {
    let m = ModelConfig::mixtral_8x7b();
    let a = generate_traces(&m, &params(1, 0.9, 2)).unwrap();
    let b = generate_traces(&m, &params(2, 0.9, 2)).unwrap();
    assert_ne!(a, b);
}
