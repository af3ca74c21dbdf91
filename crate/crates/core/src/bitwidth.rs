//! Mixed-precision bitwidth allocation for NDP-resident experts.
//!
//! Each expert starts at 1 bit. A layer with `n` NDP experts and average
//! budget `b` gets `R = n * (b - 1)` unit increments. Experts are walked in
//! descending importance and the assigned bits never increase along that
//! order, so an assignment is fully described by the block counts
//! `(n4, n3, n2, n1)`. [`prefix_split`] searches those counts with prefix sums
//! in `O(n^2)`; [`oracle_prefix_split`] and [`oracle_unrestricted`] are slow
//! enumerations used to check it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, QUANT_BITS};
use crate::error::{Error, Result};
use crate::placement::PlacementPlan;
use crate::stats::ImportanceScores;

/// Largest layer the prefix-structured oracle will enumerate.
pub const ORACLE_PREFIX_LIMIT: usize = 12;
/// Largest layer the unrestricted oracle will enumerate (4^n assignments).
pub const ORACLE_UNRESTRICTED_LIMIT: usize = 8;

/// Hidden width of the synthetic calibration experts.
pub const CALIB_HIDDEN: usize = 64;
/// FFN width of the synthetic calibration experts.
pub const CALIB_FFN: usize = 256;

// ---------------------------------------------------------------------------
// quantization and loss tables

/// Symmetric round-to-nearest quantization with one scale per output row.
///
/// Uses `2^bits` mid-rise levels `(i + 1/2) * step`, so 1 bit maps every
/// weight to `+-step/2`. `step = max|row| / 2^(bits-1)`.
pub fn quantize_rows(weights: &[f32], cols: usize, bits: u32) -> Vec<f32> {
    let half_levels = (1u64 << (bits - 1)) as f32;
    let mut out = Vec::with_capacity(weights.len());
    for row in weights.chunks(cols) {
        let max = row.iter().fold(0f32, |m, w| m.max(w.abs()));
        if max == 0.0 {
            out.extend(std::iter::repeat_n(0.0, row.len()));
            continue;
        }
        let step = max / half_levels;
        for &w in row {
            let idx = (w / step).floor().clamp(-half_levels, half_levels - 1.0);
            out.push((idx + 0.5) * step);
        }
    }
    out
}

/// A small dense SwiGLU expert: `down(silu(gate x) * up x)`.
#[derive(Debug, Clone)]
pub struct SyntheticExpert {
    pub hidden: usize,
    pub ffn: usize,
    /// `ffn x hidden`
    pub gate: Vec<f32>,
    /// `ffn x hidden`
    pub up: Vec<f32>,
    /// `hidden x ffn`
    pub down: Vec<f32>,
}

// eight independent partial sums so the loop vectorizes
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn matvec(m: &[f32], cols: usize, x: &[f32]) -> Vec<f32> {
    m.chunks(cols).map(|row| dot(row, x)).collect()
}

impl SyntheticExpert {
    /// Gaussian weights with std `scale / sqrt(fan_in)`.
    pub fn random(rng: &mut ChaCha8Rng, hidden: usize, ffn: usize, scale: f32) -> Self {
        let mut draw = |n: usize, fan_in: usize| -> Vec<f32> {
            let std = scale / (fan_in as f32).sqrt();
            (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(rng);
                    z * std
                })
                .collect()
        };
        let gate = draw(ffn * hidden, hidden);
        let up = draw(ffn * hidden, hidden);
        let down = draw(hidden * ffn, ffn);
        Self {
            hidden,
            ffn,
            gate,
            up,
            down,
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let g = matvec(&self.gate, self.hidden, x);
        let u = matvec(&self.up, self.hidden, x);
        let h: Vec<f32> = g
            .iter()
            .zip(&u)
            .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
            .collect();
        matvec(&self.down, self.ffn, &h)
    }

    pub fn quantized(&self, bits: u32) -> Self {
        Self {
            hidden: self.hidden,
            ffn: self.ffn,
            gate: quantize_rows(&self.gate, self.hidden, bits),
            up: quantize_rows(&self.up, self.hidden, bits),
            down: quantize_rows(&self.down, self.ffn, bits),
        }
    }

    /// Mean squared output error of the `bits`-bit copy over `inputs`.
    pub fn output_mse(&self, inputs: &[Vec<f32>], bits: u32) -> f64 {
        let reference: Vec<Vec<f32>> = inputs.iter().map(|x| self.forward(x)).collect();
        self.quantized(bits).mse_against(inputs, &reference)
    }

    /// `output_mse` at 1, 2, 3 and 4 bits, sharing the reference outputs.
    pub fn output_mse_all(&self, inputs: &[Vec<f32>]) -> [f64; 4] {
        let reference: Vec<Vec<f32>> = inputs.iter().map(|x| self.forward(x)).collect();
        QUANT_BITS.map(|b| self.quantized(b).mse_against(inputs, &reference))
    }

    fn mse_against(&self, inputs: &[Vec<f32>], reference: &[Vec<f32>]) -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (x, a) in inputs.iter().zip(reference) {
            let b = self.forward(x);
            for (ya, yb) in a.iter().zip(&b) {
                let d = (*ya - *yb) as f64;
                sum += d * d;
            }
            n += a.len();
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossHeader {
    pub config_hash: String,
    pub model: String,
    pub seed: u64,
    pub calib_tokens: usize,
    pub calib_hidden: usize,
    pub calib_ffn: usize,
}

/// `losses[l][e][b - 1]` is the output MSE of expert `e` in layer `l` at `b` bits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub header: LossHeader,
    pub losses: Vec<Vec<[f64; 4]>>,
}

#[derive(Serialize, Deserialize)]
struct LossFile {
    header: LossHeader,
    layers: BTreeMap<String, BTreeMap<String, [f64; 4]>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a model geometry, used to key cached loss tables.
pub fn config_hash(model: &ModelConfig) -> String {
    let json = serde_json::to_vec(model).expect("model serializes");
    hex(&Sha256::digest(&json))
}

impl LossTable {
    pub fn num_layers(&self) -> usize {
        self.losses.len()
    }

    pub fn row(&self, layer: usize, expert: usize) -> &[f64; 4] {
        &self.losses[layer][expert]
    }

    pub fn loss(&self, layer: usize, expert: usize, bits: u32) -> f64 {
        self.losses[layer][expert][bits as usize - 1]
    }

    /// Checks the table covers `model`'s `(L, E)` grid.
    pub fn check_shape(&self, model: &ModelConfig) -> Result<()> {
        if self.losses.len() != model.num_layers
            || self.losses.iter().any(|r| r.len() != model.num_experts)
        {
            return Err(Error::Config(format!(
                "loss table shape does not match model `{}` ({} layers x {} experts)",
                model.name, model.num_layers, model.num_experts
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .losses
            .iter()
            .enumerate()
            .map(|(l, row)| {
                let experts = row
                    .iter()
                    .enumerate()
                    .map(|(e, v)| (e.to_string(), *v))
                    .collect();
                (l.to_string(), experts)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&LossFile {
            header: self.header.clone(),
            layers,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LossFile = serde_json::from_str(text)?;
        let parse_idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("loss table key `{s}` is not an index")))
        };
        let mut losses: Vec<Vec<[f64; 4]>> = vec![Vec::new(); file.layers.len()];
        for (lkey, experts) in &file.layers {
            let l = parse_idx(lkey)?;
            let slot = losses
                .get_mut(l)
                .ok_or_else(|| Error::Config(format!("layer {l} out of range")))?;
            let mut row = vec![None; experts.len()];
            for (ekey, v) in experts {
                let e = parse_idx(ekey)?;
                *row.get_mut(e).ok_or_else(|| {
                    Error::Config(format!("expert {e} out of range in layer {l}"))
                })? = Some(*v);
            }
            *slot = row
                .into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Config(format!("layer {l} has gaps")))?;
        }
        Ok(Self {
            header: file.header,
            losses,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Path a table for these inputs is cached under inside `dir`.
    pub fn cache_path(dir: &Path, model: &ModelConfig, seed: u64, calib_tokens: usize) -> PathBuf {
        let key = format!(
            "{}:{seed}:{calib_tokens}:{CALIB_HIDDEN}x{CALIB_FFN}",
            config_hash(model)
        );
        let digest = hex(&Sha256::digest(key.as_bytes()));
        dir.join(format!("loss-{}.json", &digest[..16]))
    }

    /// Loads the cached table, building and caching it when absent.
    pub fn load_or_build(
        dir: &Path,
        model: &ModelConfig,
        seed: u64,
        calib_tokens: usize,
    ) -> Result<Self> {
        let path = Self::cache_path(dir, model, seed, calib_tokens);
        if path.exists() {
            let table = Self::load(&path)?;
            if table.header.config_hash == config_hash(model) && table.header.seed == seed {
                return Ok(table);
            }
            log::warn!("stale loss table cache at {}, rebuilding", path.display());
        }
        let table = build_loss_table(model, seed, calib_tokens)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        table.save(&path)?;
        Ok(table)
    }
}

/// Builds the per-(layer, expert) loss table from seeded synthetic experts.
///
/// Each expert draws its own weight scale (log-normal, sigma 0.2) so experts
/// differ in quantization sensitivity. Output MSE grows roughly with the
/// sixth power of that scale. Calibration inputs are shared within a layer.
pub fn build_loss_table(model: &ModelConfig, seed: u64, calib_tokens: usize) -> Result<LossTable> {
    model.validate()?;
    if calib_tokens == 0 {
        return Err(Error::Config("calib_tokens must be >= 1".into()));
    }
    let experts = model.num_experts;
    let losses = (0..model.num_layers)
        .into_par_iter()
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((l * (experts + 1)) as u64);
            let inputs: Vec<Vec<f32>> = (0..calib_tokens)
                .map(|_| {
                    (0..CALIB_HIDDEN)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect();
            (0..experts)
                .into_par_iter()
                .map(|e| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((l * (experts + 1) + e + 1) as u64);
                    let z: f32 = StandardNormal.sample(&mut rng);
                    let scale = (0.2 * z).exp();
                    let expert = SyntheticExpert::random(&mut rng, CALIB_HIDDEN, CALIB_FFN, scale);
                    expert.output_mse_all(&inputs)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(LossTable {
        header: LossHeader {
            config_hash: config_hash(model),
            model: model.name.clone(),
            seed,
            calib_tokens,
            calib_hidden: CALIB_HIDDEN,
            calib_ffn: CALIB_FFN,
        },
        losses,
    })
}

// ---------------------------------------------------------------------------
// gains

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaGains {
    /// `[L(1) - L(2), L(1) - L(3), L(1) - L(4)]`
    pub gains: [f64; 3],
    /// The row was not monotone and was replaced by its running minimum.
    pub clamped: bool,
}

impl DeltaGains {
    /// Gain of moving from 1 bit to `bits` (0 for 1 bit).
    pub fn at(&self, bits: u32) -> f64 {
        match bits {
            1 => 0.0,
            b => self.gains[b as usize - 2],
        }
    }
}

/// Gains of upgrading from 1 bit, computed on the monotone envelope of `row`.
pub fn delta_gains(row: &[f64; 4]) -> DeltaGains {
    let mut env = *row;
    let mut clamped = false;
    for b in 1..4 {
        if env[b] > env[b - 1] {
            env[b] = env[b - 1];
            clamped = true;
        }
    }
    if clamped {
        log::warn!("non-monotone loss row {row:?} clamped to {env:?}");
    }
    DeltaGains {
        gains: [env[0] - env[1], env[0] - env[2], env[0] - env[3]],
        clamped,
    }
}

// ---------------------------------------------------------------------------
// allocation

/// Experts per bitwidth in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BlockCounts {
    pub n4: usize,
    pub n3: usize,
    pub n2: usize,
    pub n1: usize,
}

impl BlockCounts {
    pub fn total(&self) -> usize {
        self.n4 + self.n3 + self.n2 + self.n1
    }

    pub fn increments(&self) -> usize {
        3 * self.n4 + 2 * self.n3 + self.n2
    }

    /// Bits in importance order: `n4` fours, then threes, twos, ones.
    pub fn expand(&self) -> Vec<u8> {
        let mut bits = Vec::with_capacity(self.total());
        bits.extend(std::iter::repeat_n(4u8, self.n4));
        bits.extend(std::iter::repeat_n(3u8, self.n3));
        bits.extend(std::iter::repeat_n(2u8, self.n2));
        bits.extend(std::iter::repeat_n(1u8, self.n1));
        bits
    }

    fn from_bits(bits: &[u8]) -> Self {
        let count = |b| bits.iter().filter(|&&x| x == b).count();
        Self {
            n4: count(4),
            n3: count(3),
            n2: count(2),
            n1: count(1),
        }
    }
}

/// Bit assignment for the NDP experts of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBits {
    /// NDP expert ids in descending importance.
    pub experts: Vec<usize>,
    /// `bits[i]` belongs to `experts[i]`.
    pub bits: Vec<u8>,
    pub counts: BlockCounts,
    pub gain: f64,
    /// Increment budget actually spent.
    pub budget: usize,
    /// `(n4, n3)` pairs examined by the search.
    pub states_visited: usize,
}

impl LayerBits {
    pub fn bits_of(&self, expert: usize) -> Option<u8> {
        self.experts
            .iter()
            .position(|&e| e == expert)
            .map(|i| self.bits[i])
    }

    pub fn average_bits(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
        }
    }
}

/// Unit increments for `n` experts at average `avg_bits`, floored when the
/// product is fractional.
pub fn increment_budget(n: usize, avg_bits: f64) -> Result<usize> {
    if !(1.0..=4.0).contains(&avg_bits) {
        return Err(Error::AvgBitsOutOfRange(avg_bits));
    }
    let r = n as f64 * (avg_bits - 1.0);
    // absorb representation error such as 3 * (2.3333.. - 1)
    let floored = (r + 1e-9).floor() as usize;
    if (r - floored as f64).abs() > 1e-9 {
        log::debug!("fractional increment budget {r} floored to {floored}");
    }
    Ok(floored.min(3 * n))
}

fn gains_in_order(order: &[usize], losses: &[[f64; 4]]) -> Vec<DeltaGains> {
    order.iter().map(|&e| delta_gains(&losses[e])).collect()
}

/// Optimal prefix-structured split over precomputed gains (importance order).
///
/// Maximizes `C4(n4) + [C3(n4+n3) - C3(n4)] + [C2(n4+n3+n2) - C2(n4+n3)]`
/// subject to `3 n4 + 2 n3 + n2 = budget`. Ties prefer larger `n4`, then
/// larger `n3`.
pub fn split_counts(gains: &[DeltaGains], budget: usize) -> (BlockCounts, f64, usize) {
    let n = gains.len();
    let mut c2 = vec![0.0; n + 1];
    let mut c3 = vec![0.0; n + 1];
    let mut c4 = vec![0.0; n + 1];
    for (i, g) in gains.iter().enumerate() {
        c2[i + 1] = c2[i] + g.gains[0];
        c3[i + 1] = c3[i] + g.gains[1];
        c4[i + 1] = c4[i] + g.gains[2];
    }

    let mut best: Option<(BlockCounts, f64)> = None;
    let mut visited = 0;
    for n4 in (0..=n).take_while(|n4| 3 * n4 <= budget) {
        for n3 in (0..=n - n4).take_while(|n3| 3 * n4 + 2 * n3 <= budget) {
            visited += 1;
            let n2 = budget - 3 * n4 - 2 * n3;
            if n2 > n - n4 - n3 {
                continue;
            }
            let a = n4 + n3;
            let gain = c4[n4] + (c3[a] - c3[n4]) + (c2[a + n2] - c2[a]);
            // later tuples have larger (n4, n3), so >= implements the tie-break
            if best.as_ref().is_none_or(|(_, g)| gain >= *g) {
                let counts = BlockCounts {
                    n4,
                    n3,
                    n2,
                    n1: n - a - n2,
                };
                best = Some((counts, gain));
            }
        }
    }
    let (counts, gain) = best.unwrap_or((
        BlockCounts {
            n1: n,
            ..Default::default()
        },
        0.0,
    ));
    (counts, gain, visited)
}

/// Assigns bits to the experts in `order` (descending importance) so the
/// layer averages `avg_bits`. `losses` is indexed by expert id.
pub fn prefix_split(order: &[usize], losses: &[[f64; 4]], avg_bits: f64) -> Result<LayerBits> {
    let budget = increment_budget(order.len(), avg_bits)?;
    let gains = gains_in_order(order, losses);
    let (counts, gain, states_visited) = split_counts(&gains, budget);
    Ok(LayerBits {
        experts: order.to_vec(),
        bits: counts.expand(),
        counts,
        gain,
        budget,
        states_visited,
    })
}

/// Every expert in `order` gets exactly `avg_bits`, which must be an integer.
pub fn uniform_bits(order: &[usize], losses: &[[f64; 4]], avg_bits: f64) -> Result<LayerBits> {
    if !(1.0..=4.0).contains(&avg_bits) {
        return Err(Error::AvgBitsOutOfRange(avg_bits));
    }
    if avg_bits.fract() != 0.0 {
        return Err(Error::FractionalUniformBits(avg_bits));
    }
    let b = avg_bits as u8;
    let bits = vec![b; order.len()];
    let gain = gains_in_order(order, losses)
        .iter()
        .map(|g| g.at(b as u32))
        .sum();
    Ok(LayerBits {
        experts: order.to_vec(),
        counts: BlockCounts::from_bits(&bits),
        budget: order.len() * (b as usize - 1),
        bits,
        gain,
        states_visited: 0,
    })
}

/// Brute force over all nonincreasing bit sequences meeting the budget, with
/// gains summed directly from the loss rows.
pub fn oracle_prefix_split(
    order: &[usize],
    losses: &[[f64; 4]],
    avg_bits: f64,
) -> Result<LayerBits> {
    if order.len() > ORACLE_PREFIX_LIMIT {
        return Err(Error::OracleGuard {
            n: order.len(),
            limit: ORACLE_PREFIX_LIMIT,
        });
    }
    let budget = increment_budget(order.len(), avg_bits)?;
    let gains = gains_in_order(order, losses);

    fn walk(
        gains: &[DeltaGains],
        pos: usize,
        cap: u8,
        left: usize,
        cur: &mut Vec<u8>,
        best: &mut Option<(Vec<u8>, f64)>,
    ) {
        if pos == gains.len() {
            if left == 0 {
                let gain: f64 = cur.iter().zip(gains).map(|(&b, g)| g.at(b as u32)).sum();
                if best.as_ref().is_none_or(|(_, g)| gain > *g) {
                    *best = Some((cur.clone(), gain));
                }
            }
            return;
        }
        // remaining experts can absorb at most (cap - 1) increments each
        if left > (gains.len() - pos) * (cap as usize - 1) {
            return;
        }
        for b in (1..=cap).rev() {
            let cost = b as usize - 1;
            if cost > left {
                continue;
            }
            cur.push(b);
            walk(gains, pos + 1, b, left - cost, cur, best);
            cur.pop();
        }
    }

    let mut best = None;
    walk(&gains, 0, 4, budget, &mut Vec::new(), &mut best);
    let (bits, gain) = best.expect("budget <= 3n is always feasible");
    Ok(LayerBits {
        experts: order.to_vec(),
        counts: BlockCounts::from_bits(&bits),
        bits,
        gain,
        budget,
        states_visited: 0,
    })
}

/// Brute force over all `4^n` assignments meeting the budget, ignoring the
/// importance order. Bounds what the prefix restriction gives up.
pub fn oracle_unrestricted(
    order: &[usize],
    losses: &[[f64; 4]],
    avg_bits: f64,
) -> Result<LayerBits> {
    let n = order.len();
    if n > ORACLE_UNRESTRICTED_LIMIT {
        return Err(Error::OracleGuard {
            n,
            limit: ORACLE_UNRESTRICTED_LIMIT,
        });
    }
    let budget = increment_budget(n, avg_bits)?;
    let gains = gains_in_order(order, losses);
    let mut best: Option<(Vec<u8>, f64)> = None;
    let mut bits = vec![1u8; n];
    for code in 0..4usize.pow(n as u32) {
        let mut c = code;
        let mut spent = 0;
        for slot in bits.iter_mut() {
            *slot = (c % 4) as u8 + 1;
            spent += c % 4;
            c /= 4;
        }
        if spent != budget {
            continue;
        }
        let gain: f64 = bits.iter().zip(&gains).map(|(&b, g)| g.at(b as u32)).sum();
        if best.as_ref().is_none_or(|(_, g)| gain > *g) {
            best = Some((bits.clone(), gain));
        }
    }
    let (bits, gain) = best.expect("budget <= 3n is always feasible");
    Ok(LayerBits {
        experts: order.to_vec(),
        counts: BlockCounts::from_bits(&bits),
        bits,
        gain,
        budget,
        states_visited: 0,
    })
}

/// How NDP experts receive bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Importance-ordered prefix split.
    #[default]
    Selector,
    /// Every NDP expert at the average bitwidth.
    Uniform,
}

/// Bit assignment of every layer's NDP experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitwidthPlan {
    pub layers: Vec<LayerBits>,
}

impl BitwidthPlan {
    pub fn bits(&self, layer: usize, expert: usize) -> Option<u8> {
        self.layers[layer].bits_of(expert)
    }

    pub fn total_gain(&self) -> f64 {
        self.layers.iter().map(|l| l.gain).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "expert", "bits"])?;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut rows: Vec<(usize, u8)> = layer
                .experts
                .iter()
                .copied()
                .zip(layer.bits.iter().copied())
                .collect();
            rows.sort_unstable();
            for (e, b) in rows {
                w.write_record([l.to_string(), e.to_string(), b.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Allocates bits for the cold experts of `plan`, ranked by `scores`.
pub fn assign_bits(
    plan: &PlacementPlan,
    scores: &ImportanceScores,
    table: &LossTable,
    avg_bits: f64,
    allocation: Allocation,
) -> Result<BitwidthPlan> {
    let layers = plan
        .cold
        .iter()
        .enumerate()
        .map(|(l, cold)| {
            let order = scores.ranked(l, cold);
            match allocation {
                Allocation::Selector => prefix_split(&order, &table.losses[l], avg_bits),
                Allocation::Uniform => uniform_bits(&order, &table.losses[l], avg_bits),
            }
        })
        .collect::<Result<_>>()?;
    Ok(BitwidthPlan { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Loss rows whose gains are the worked-example deltas, one per expert id.
    fn worked_losses() -> Vec<[f64; 4]> {
        [
            (6.0, 8.0, 9.0),
            (5.0, 7.0, 7.5),
            (3.0, 4.0, 4.2),
            (1.0, 1.5, 1.6),
        ]
        .iter()
        .map(|&(d2, d3, d4)| [10.0, 10.0 - d2, 10.0 - d3, 10.0 - d4])
        .collect()
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_gains(&[10.0, 4.0, 2.0, 1.0]).gains, [6.0, 8.0, 9.0]);
        let c = delta_gains(&[3.5; 4]);
        assert_eq!(c.gains, [0.0; 3]);
        assert!(!c.clamped);
    }

    #[test]
    fn delta_clamps_non_monotone_row() {
        let d = delta_gains(&[10.0, 4.0, 4.5, 1.0]);
        assert!(d.clamped);
        assert_eq!(d.gains, [6.0, 6.0, 9.0]);
    }

    #[test]
    fn worked_instance() {
        let layer = prefix_split(&[0, 1, 2, 3], &worked_losses(), 2.0).unwrap();
        assert_eq!(
            layer.counts,
            BlockCounts {
                n4: 0,
                n3: 1,
                n2: 2,
                n1: 1
            }
        );
        assert!((layer.gain - 16.0).abs() < 1e-12);
        assert_eq!(layer.bits, vec![3, 2, 2, 1]);
        assert_eq!(layer.budget, 4);
    }

    #[test]
    fn worked_instance_candidates() {
        // feasible (n4, n3, n2) for R=4, n=4: (1,0,1), (0,2,0), (0,1,2), (0,0,4)
        let gains = gains_in_order(&[0, 1, 2, 3], &worked_losses());
        let direct =
            |bits: &[u8]| -> f64 { bits.iter().zip(&gains).map(|(&b, g)| g.at(b as u32)).sum() };
        let got: Vec<f64> = [[4, 2, 1, 1], [3, 3, 1, 1], [3, 2, 2, 1], [2, 2, 2, 2]]
            .iter()
            .map(|b| direct(b))
            .collect();
        let want = [14.0, 15.0, 16.0, 15.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn saturated_and_empty_budgets() {
        let losses = worked_losses();
        let full = prefix_split(&[2, 0, 3, 1], &losses, 4.0).unwrap();
        assert_eq!(full.bits, vec![4; 4]);
        assert_eq!(full.counts.n4, 4);
        let empty = prefix_split(&[2, 0, 3, 1], &losses, 1.0).unwrap();
        assert_eq!(empty.bits, vec![1; 4]);
        assert_eq!(empty.gain, 0.0);
    }

    #[test]
    fn avg_bits_out_of_range() {
        let losses = worked_losses();
        assert!(matches!(
            prefix_split(&[0], &losses, 0.5),
            Err(Error::AvgBitsOutOfRange(_))
        ));
        assert!(matches!(
            prefix_split(&[0], &losses, 4.5),
            Err(Error::AvgBitsOutOfRange(_))
        ));
    }

    #[test]
    fn fractional_budget_floors() {
        // 3 experts at 2.5 bits: 4.5 increments -> 4
        let layer = prefix_split(&[0, 1, 2], &worked_losses(), 2.5).unwrap();
        assert_eq!(layer.budget, 4);
        assert_eq!(layer.counts.increments(), 4);
        assert_eq!(increment_budget(3, 1.0 + 4.0 / 3.0).unwrap(), 4);
    }

    #[test]
    fn empty_layer() {
        let layer = prefix_split(&[], &worked_losses(), 3.0).unwrap();
        assert!(layer.bits.is_empty());
        assert_eq!(layer.gain, 0.0);
    }

    #[test]
    fn single_expert_forced() {
        let losses = worked_losses();
        for e in 0..4 {
            let o = oracle_prefix_split(&[e], &losses, 3.0).unwrap();
            assert_eq!(o.bits, vec![3]);
            let u = oracle_unrestricted(&[e], &losses, 3.0).unwrap();
            assert_eq!(u.bits, vec![3]);
        }
    }

    #[test]
    fn oracle_guards() {
        let losses = vec![[1.0, 0.5, 0.25, 0.125]; 13];
        let order: Vec<usize> = (0..13).collect();
        assert!(matches!(
            oracle_prefix_split(&order, &losses, 2.0),
            Err(Error::OracleGuard { n: 13, limit: 12 })
        ));
        assert!(matches!(
            oracle_unrestricted(&order[..9], &losses, 2.0),
            Err(Error::OracleGuard { n: 9, limit: 8 })
        ));
    }

    #[test]
    fn uniform_allocation() {
        let u = uniform_bits(&[0, 1, 2, 3], &worked_losses(), 2.0).unwrap();
        assert_eq!(u.bits, vec![2; 4]);
        assert!((u.gain - 15.0).abs() < 1e-12);
        assert!(matches!(
            uniform_bits(&[0], &worked_losses(), 2.5),
            Err(Error::FractionalUniformBits(_))
        ));
    }

    #[test]
    fn quantizer_basics() {
        let w = [1.0f32, -0.5, 0.25, 0.0];
        assert_eq!(quantize_rows(&w, 4, 1), vec![0.5, -0.5, 0.5, 0.5]);
        assert_eq!(quantize_rows(&[0.0f32; 4], 2, 3), vec![0.0; 4]);
        let q16 = quantize_rows(&w, 4, 16);
        for (a, b) in w.iter().zip(&q16) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_expert_has_no_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ex = SyntheticExpert::random(&mut rng, 8, 16, 1.0);
        ex.gate.iter_mut().for_each(|w| *w = 0.0);
        ex.up.iter_mut().for_each(|w| *w = 0.0);
        ex.down.iter_mut().for_each(|w| *w = 0.0);
        let inputs: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        for b in 1..=4 {
            assert_eq!(ex.output_mse(&inputs, b), 0.0);
        }
    }

    #[test]
    fn sixteen_bit_reproduces_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = SyntheticExpert::random(&mut rng, CALIB_HIDDEN, CALIB_FFN, 1.0);
        let q = ex.quantized(16);
        for _ in 0..4 {
            let x: Vec<f32> = (0..CALIB_HIDDEN)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let a = ex.forward(&x);
            let b = q.forward(&x);
            let num: f32 = a
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f32>()
                .sqrt();
            let den: f32 = a.iter().map(|p| p * p).sum::<f32>().sqrt();
            assert!(num / den <= 1e-3, "relative error {}", num / den);
        }
    }

    #[test]
    fn loss_table_json_round_trip() {
        let model = ModelConfig {
            name: "tiny".into(),
            hidden_dim: 8,
            ffn_dim: 16,
            num_layers: 11,
            num_experts: 3,
            top_k: 1,
            matrices_per_expert: 3,
        };
        let table = build_loss_table(&model, 5, 4).unwrap();
        table.check_shape(&model).unwrap();
        let back = LossTable::from_json(&table.to_json().unwrap()).unwrap();
        assert_eq!(back, table);
        let again = build_loss_table(&model, 5, 4).unwrap();
        assert_eq!(again, table);
    }

    #[test]
    fn loss_table_cache() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelConfig {
            name: "tiny".into(),
            hidden_dim: 8,
            ffn_dim: 16,
            num_layers: 2,
            num_experts: 2,
            top_k: 1,
            matrices_per_expert: 3,
        };
        let a = LossTable::load_or_build(dir.path(), &model, 9, 2).unwrap();
        assert!(LossTable::cache_path(dir.path(), &model, 9, 2).exists());
        let b = LossTable::load_or_build(dir.path(), &model, 9, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            LossTable::cache_path(dir.path(), &model, 9, 2),
            LossTable::cache_path(dir.path(), &model, 10, 2)
        );
    }

    #[test]
    fn bitwidth_csv() {
        let layer = prefix_split(&[2, 0, 1, 3], &worked_losses(), 2.0).unwrap();
        let plan = BitwidthPlan {
            layers: vec![layer],
        };
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,expert,bits\n0,0,"));
        assert_eq!(text.lines().count(), 5);
        assert_eq!(plan.bits(0, 2), Some(3));
        assert_eq!(plan.bits(0, 9), None);
    }
}
