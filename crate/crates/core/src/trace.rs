//! Routing traces: per-token, per-layer top-k expert selections.
//!
//! Traces are stored as JSON Lines. The first line is a header object
//! `{"model":..,"L":..,"E":..,"k":..}`; every following line is one
//! [`SequenceTrace`] whose tokens are encoded as `[[[expert, score], ..] x L]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// One routed expert and its router score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(u32, f64)", into = "(u32, f64)")]
pub struct Selection {
    pub expert: u32,
    pub score: f64,
}

impl From<(u32, f64)> for Selection {
    fn from((expert, score): (u32, f64)) -> Self {
        Self { expert, score }
    }
}

impl From<Selection> for (u32, f64) {
    fn from(s: Selection) -> Self {
        (s.expert, s.score)
    }
}

/// Routing decisions of one token, indexed by layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenRouting {
    pub layers: Vec<Vec<Selection>>,
}

impl TokenRouting {
    pub fn new(layers: Vec<Vec<Selection>>) -> Self {
        Self { layers }
    }

    /// Builds a single-layer routing from `(expert, score)` pairs.
    pub fn single_layer(pairs: &[(u32, f64)]) -> Self {
        Self {
            layers: vec![pairs.iter().copied().map(Selection::from).collect()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceTrace {
    pub seq_id: String,
    pub prefill: Vec<TokenRouting>,
    pub decode: Vec<TokenRouting>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model: String,
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "E")]
    pub num_experts: usize,
    pub k: usize,
    /// Free-form provenance (generator parameters, config hash).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
}

impl TraceHeader {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            model: model.name.clone(),
            num_layers: model.num_layers,
            num_experts: model.num_experts,
            k: model.top_k,
            source: None,
        }
    }

    pub fn check(&self, model: &ModelConfig) -> Result<()> {
        let want = (model.num_layers, model.num_experts, model.top_k);
        let got = (self.num_layers, self.num_experts, self.k);
        if want != got {
            return Err(Error::HeaderMismatch(format!(
                "file has (L, E, k) = {got:?}, model `{}` expects {want:?}",
                model.name
            )));
        }
        Ok(())
    }
}

/// Checks one routing against the model geometry.
fn validate_token(
    model: &ModelConfig,
    seq: &str,
    stage: &'static str,
    token: usize,
    routing: &TokenRouting,
) -> Result<()> {
    let fail = |layer: usize, message: String| Error::Validation {
        seq: seq.to_string(),
        stage,
        token,
        layer,
        message,
    };
    if routing.layers.len() != model.num_layers {
        return Err(fail(
            0,
            format!(
                "expected {} layers, found {}",
                model.num_layers,
                routing.layers.len()
            ),
        ));
    }
    for (layer, sels) in routing.layers.iter().enumerate() {
        if sels.len() != model.top_k {
            return Err(fail(
                layer,
                format!("expected {} selections, found {}", model.top_k, sels.len()),
            ));
        }
        for (i, s) in sels.iter().enumerate() {
            if s.expert as usize >= model.num_experts {
                return Err(fail(
                    layer,
                    format!("expert id {} >= E={}", s.expert, model.num_experts),
                ));
            }
            if !(s.score > 0.0 && s.score <= 1.0) {
                return Err(fail(layer, format!("score {} outside (0, 1]", s.score)));
            }
            if sels[..i].iter().any(|o| o.expert == s.expert) {
                return Err(fail(layer, format!("duplicate expert {}", s.expert)));
            }
        }
    }
    Ok(())
}

impl SequenceTrace {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.prefill.is_empty() {
            return Err(Error::EmptyStage("prefill"));
        }
        if self.decode.is_empty() {
            return Err(Error::EmptyStage("decode"));
        }
        for (t, tok) in self.prefill.iter().enumerate() {
            validate_token(model, &self.seq_id, "prefill", t, tok)?;
        }
        for (t, tok) in self.decode.iter().enumerate() {
            validate_token(model, &self.seq_id, "decode", t, tok)?;
        }
        Ok(())
    }
}

/// Writes the header and one line per sequence.
pub fn write_traces_to<W: Write>(
    mut out: W,
    header: &TraceHeader,
    traces: &[SequenceTrace],
) -> Result<()> {
    let mut line = serde_json::to_string(header)?;
    line.push('\n');
    for seq in traces {
        line.push_str(&serde_json::to_string(seq)?);
        line.push('\n');
        if line.len() > 1 << 20 {
            out.write_all(line.as_bytes())
                .map_err(|e| Error::io("<trace>", e))?;
            line.clear();
        }
    }
    out.write_all(line.as_bytes())
        .map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn write_traces(path: &Path, header: &TraceHeader, traces: &[SequenceTrace]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_traces_to(&mut out, header, traces).map_err(|e| relabel_io(e, path))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn relabel_io(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// Parses a trace file, checking its header against `model` and validating
/// every sequence. An empty file yields an empty list.
pub fn read_traces(path: &Path, model: &ModelConfig) -> Result<Vec<SequenceTrace>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces_from(BufReader::new(file), path, model).map(|(_, traces)| traces)
}

pub fn read_traces_from<R: BufRead>(
    reader: R,
    path: &Path,
    model: &ModelConfig,
) -> Result<(Option<TraceHeader>, Vec<SequenceTrace>)> {
    let mut header: Option<TraceHeader> = None;
    let mut traces = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        };
        match header {
            None => {
                let h: TraceHeader = serde_json::from_str(&line).map_err(parse_err)?;
                h.check(model)?;
                header = Some(h);
            }
            Some(_) => {
                let seq: SequenceTrace = serde_json::from_str(&line).map_err(parse_err)?;
                seq.validate(model)?;
                traces.push(seq);
            }
        }
    }
    Ok((header, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub seed: u64,
    /// Dirichlet concentration; smaller values give more skewed experts.
    pub alpha_dir: f64,
    /// Weight of the sequence's prefill distribution in the decode mixture.
    pub rho: f64,
    /// Weight of the shared per-layer popularity vector in every
    /// sequence-level distribution. 0 makes sequences fully independent.
    pub global_share: f64,
    pub prompt_len: usize,
    pub output_len: usize,
    pub num_sequences: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha_dir: 0.3,
            rho: 0.9,
            global_share: 0.5,
            prompt_len: 128,
            output_len: 128,
            num_sequences: 64,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_dir.is_finite() && self.alpha_dir > 0.0) {
            return Err(Error::Config(format!(
                "alpha_dir must be positive, got {}",
                self.alpha_dir
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0, 1], got {}",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.global_share) {
            return Err(Error::Config(format!(
                "global_share must lie in [0, 1], got {}",
                self.global_share
            )));
        }
        if self.prompt_len == 0 || self.output_len == 0 {
            return Err(Error::Config(
                "prompt_len and output_len must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Smallest probability any expert keeps, so every expert stays selectable.
const PROB_FLOOR: f64 = 1e-9;

/// Stream id reserved for the shared popularity vectors.
const POPULARITY_STREAM: u64 = u64::MAX;

fn dirichlet(rng: &mut impl Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    normalize_or_uniform(draws)
}

fn normalize_or_uniform(mut v: Vec<f64>) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        let n = v.len() as f64;
        v.iter_mut().for_each(|x| *x = 1.0 / n);
    }
    v
}

fn mix(a: &[f64], b: &[f64], weight_a: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| weight_a * x + (1.0 - weight_a) * y)
        .collect()
}

/// Rounds to six significant digits, the precision stored in trace files.
pub fn round_score(x: f64) -> f64 {
    let r = if x > 0.0 && x.is_finite() {
        let mut n = 5 - x.log10().floor() as i32;
        if (0..=22).contains(&n) && x * POW10[n as usize] < 99_999.5 {
            n += 1;
        }
        if (0..=22).contains(&n) {
            // integer over an exact power of ten: one correctly rounded division
            (x * POW10[n as usize]).round() / POW10[n as usize]
        } else {
            format!("{x:.5e}").parse().expect("formatted float parses")
        }
    } else {
        x
    };
    r.max(f64::MIN_POSITIVE)
}

const POW10: [f64; 23] = [
    1e0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8, 1e9, 1e10, 1e11, 1e12, 1e13, 1e14, 1e15, 1e16,
    1e17, 1e18, 1e19, 1e20, 1e21, 1e22,
];

/// Gumbel-top-k in multiplicative form: `exp(log p - log E) = p / E` with
/// `E ~ Exp(1)`, so ranking by `p / E` equals ranking by the Gumbel-perturbed
/// log-probability. Keeps the k largest and scores each by its perturbed
/// softmax renormalized over the k. `keys` is scratch space reused across calls.
fn sample_top_k(
    rng: &mut impl Rng,
    probs: &[f64],
    k: usize,
    keys: &mut Vec<(f64, u32)>,
) -> Vec<Selection> {
    keys.clear();
    keys.extend(probs.iter().enumerate().map(|(e, &p)| {
        let x: f64 = Exp1.sample(rng);
        (p / x, e as u32)
    }));
    let by_key = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < keys.len() {
        keys.select_nth_unstable_by(k - 1, by_key);
    }
    let top = &mut keys[..k];
    top.sort_by(by_key);
    let denom: f64 = top.iter().map(|(w, _)| w).sum();
    top.iter()
        .map(|&(w, e)| Selection {
            expert: e,
            score: round_score((w / denom).min(1.0)),
        })
        .collect()
}

fn popularity(model: &ModelConfig, g: &GeneratorParams) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    rng.set_stream(POPULARITY_STREAM);
    (0..model.num_layers)
        .map(|_| dirichlet(&mut rng, g.alpha_dir, model.num_experts))
        .collect()
}

fn generate_one(
    model: &ModelConfig,
    g: &GeneratorParams,
    popularity: &[Vec<f64>],
    index: usize,
) -> SequenceTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    rng.set_stream(index as u64);
    let e = model.num_experts;
    let floor = |v: Vec<f64>| -> Vec<f64> {
        let scale = 1.0 + PROB_FLOOR * e as f64;
        v.into_iter().map(|x| (x + PROB_FLOOR) / scale).collect()
    };

    let mut prefill_p = Vec::with_capacity(model.num_layers);
    let mut decode_p = Vec::with_capacity(model.num_layers);
    for pop in popularity {
        let own = dirichlet(&mut rng, g.alpha_dir, e);
        let drift = dirichlet(&mut rng, g.alpha_dir, e);
        let prefill = mix(pop, &own, g.global_share);
        let drift = mix(pop, &drift, g.global_share);
        let decode = mix(&prefill, &drift, g.rho);
        prefill_p.push(floor(prefill));
        decode_p.push(floor(decode));
    }

    let mut keys = Vec::with_capacity(e);
    let mut stage = |probs: &[Vec<f64>], len: usize| -> Vec<TokenRouting> {
        (0..len)
            .map(|_| TokenRouting {
                layers: probs
                    .iter()
                    .map(|p| sample_top_k(&mut rng, p, model.top_k, &mut keys))
                    .collect(),
            })
            .collect()
    };
    let prefill = stage(&prefill_p, g.prompt_len);
    let decode = stage(&decode_p, g.output_len);
    SequenceTrace {
        seq_id: format!("seq-{index:05}"),
        prefill,
        decode,
    }
}

/// Synthesizes `num_sequences` traces. Output depends only on `(model, g)`.
///
/// Each layer has a shared popularity vector drawn once per seed. Every
/// sequence mixes it with its own Dirichlet draw to form the prefill
/// distribution `p`; decode tokens sample from `rho * p + (1 - rho) * q`
/// where `q` mixes the popularity vector with an independent drift draw.
pub fn generate_traces(model: &ModelConfig, g: &GeneratorParams) -> Result<Vec<SequenceTrace>> {
    model.validate()?;
    g.validate()?;
    let pop = popularity(model, g);
    Ok((0..g.num_sequences)
        .into_par_iter()
        .map(|i| generate_one(model, g, &pop, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ModelConfig {
        ModelConfig {
            name: "tiny".into(),
            hidden_dim: 16,
            ffn_dim: 32,
            num_layers: 3,
            num_experts: 8,
            top_k: 2,
            matrices_per_expert: 3,
        }
    }

    fn params(n: usize) -> GeneratorParams {
        GeneratorParams {
            seed: 7,
            num_sequences: n,
            prompt_len: 12,
            output_len: 9,
            ..Default::default()
        }
    }

    #[test]
    fn count_contract() {
        let traces = generate_traces(&small_model(), &params(5)).unwrap();
        assert_eq!(traces.len(), 5);
        for t in &traces {
            assert_eq!(t.prefill.len(), 12);
            assert_eq!(t.decode.len(), 9);
            t.validate(&small_model()).unwrap();
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_traces(&small_model(), &params(4)).unwrap();
        let b = generate_traces(&small_model(), &params(4)).unwrap();
        assert_eq!(a, b);
        let mut other = params(4);
        other.seed = 8;
        assert_ne!(a, generate_traces(&small_model(), &other).unwrap());
    }

    #[test]
    fn scores_are_rounded_and_positive() {
        let traces = generate_traces(&small_model(), &params(3)).unwrap();
        for tok in traces
            .iter()
            .flat_map(|t| t.prefill.iter().chain(&t.decode))
        {
            for sels in &tok.layers {
                let sum: f64 = sels.iter().map(|s| s.score).sum();
                assert!((sum - 1.0).abs() < 1e-5);
                for s in sels {
                    assert_eq!(s.score, round_score(s.score));
                }
            }
        }
    }

    #[test]
    fn rounding_matches_decimal_formatting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20_000 {
            let x: f64 = rng.random_range(0.0..1.0f64).powi(rng.random_range(1..40));
            let want: f64 = format!("{x:.5e}").parse().unwrap();
            assert_eq!(round_score(x), want.max(f64::MIN_POSITIVE), "{x:e}");
        }
        assert_eq!(round_score(1.0), 1.0);
        assert_eq!(round_score(0.9999996), 1.0);
        assert_eq!(round_score(0.123456789), 0.123457);
        assert_eq!(round_score(1e-300), 1e-300);
    }

    #[test]
    fn rejects_bad_generator_params() {
        let mut g = params(1);
        g.rho = 1.5;
        assert!(generate_traces(&small_model(), &g).is_err());
        let mut g = params(1);
        g.output_len = 0;
        assert!(generate_traces(&small_model(), &g).is_err());
    }

    #[test]
    fn validation_names_location() {
        let model = small_model();
        let mut t = generate_traces(&model, &params(1)).unwrap().remove(0);
        t.decode[4].layers[2][1].expert = 8;
        match t.validate(&model).unwrap_err() {
            Error::Validation {
                seq,
                stage,
                token,
                layer,
                ..
            } => {
                assert_eq!(
                    (seq.as_str(), stage, token, layer),
                    ("seq-00000", "decode", 4, 2)
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_expert_rejected() {
        let model = small_model();
        let mut t = generate_traces(&model, &params(1)).unwrap().remove(0);
        let first = t.prefill[0].layers[0][0].expert;
        t.prefill[0].layers[0][1].expert = first;
        let err = t.validate(&model).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn empty_and_header_only_files() {
        let model = small_model();
        let (h, traces) = read_traces_from(&b""[..], Path::new("empty"), &model).unwrap();
        assert!(h.is_none() && traces.is_empty());

        let mut buf = Vec::new();
        write_traces_to(&mut buf, &TraceHeader::for_model(&model), &[]).unwrap();
        let (h, traces) = read_traces_from(&buf[..], Path::new("hdr"), &model).unwrap();
        assert!(h.is_some() && traces.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let model = small_model();
        let text = "{\"model\":\"tiny\",\"L\":3,\"E\":8,\"k\":2}\n{\"seq_id\": oops}\n";
        match read_traces_from(text.as_bytes(), Path::new("bad.jsonl"), &model).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        let text = "{\"model\":\"tiny\",\"L\":3,\"E\":4,\"k\":2}\n";
        let err = read_traces_from(text.as_bytes(), Path::new("h"), &small_model()).unwrap_err();
        assert!(matches!(err, Error::HeaderMismatch(_)));
    }

    #[test]
    fn selection_encodes_as_pair() {
        let tok = TokenRouting::single_layer(&[(0, 0.7), (3, 0.3)]);
        assert_eq!(serde_json::to_string(&tok).unwrap(), "[[[0,0.7],[3,0.3]]]");
    }
}
