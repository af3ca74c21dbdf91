//! Roofline cost model of MoE decoding on a GPU + NDP system, driven by
//! routing traces.
//!
//! Within a layer the GPU and NDP run their experts concurrently, so a layer
//! costs the slower of the two device sums plus the PCIe round trip of the
//! hidden vector when any NDP expert is touched. Layers and tokens are
//! sequential. Expert migration is charged once per sequence, after prefill
//! and before decoding.

use std::collections::VecDeque;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitwidth::{assign_bits, Allocation, BitwidthPlan, LossTable};
use crate::config::{HardwareConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::placement::{place, static_frequency_place, Device, PlacementPlan};
use crate::stats::{importance, StageStats, DEFAULT_ALPHA};
use crate::trace::{SequenceTrace, TokenRouting};

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_fetch_bits() -> u32 {
    4
}

/// A scheduling policy as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    /// Prefill-guided placement plus mixed-precision NDP experts.
    Ours {
        avg_bits: f64,
        k: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        allocation: Allocation,
    },
    /// One global hot/cold split from calibration frequencies; NDP at full precision.
    MondeStatic { k: usize },
    /// GPU-only execution with a per-layer LRU expert cache filled over PCIe.
    GpuOnDemand {
        gpu_cache_capacity: usize,
        #[serde(default = "default_fetch_bits")]
        fetch_bits: u32,
    },
}

impl Policy {
    pub fn ours(avg_bits: f64, k: usize) -> Self {
        Policy::Ours {
            avg_bits,
            k,
            alpha: DEFAULT_ALPHA,
            allocation: Allocation::Selector,
        }
    }

    /// Short name used in report rows, e.g. `ours-3bit`.
    pub fn label(&self) -> String {
        match self {
            Policy::Ours {
                avg_bits,
                allocation,
                ..
            } => {
                let suffix = match allocation {
                    Allocation::Selector => "",
                    Allocation::Uniform => "-uniform",
                };
                format!("ours-{avg_bits}bit{suffix}")
            }
            Policy::MondeStatic { .. } => "monde_static".into(),
            Policy::GpuOnDemand { .. } => "gpu_on_demand".into(),
        }
    }

    pub fn validate(&self, model: &ModelConfig, hw: &HardwareConfig) -> Result<()> {
        let check_k = |k: usize| {
            if k > model.num_experts {
                Err(Error::BudgetTooLarge {
                    k,
                    experts: model.num_experts,
                })
            } else {
                Ok(())
            }
        };
        match *self {
            Policy::Ours {
                avg_bits,
                k,
                alpha,
                allocation,
            } => {
                check_k(k)?;
                if !(1.0..=4.0).contains(&avg_bits) {
                    return Err(Error::AvgBitsOutOfRange(avg_bits));
                }
                if allocation == Allocation::Uniform && avg_bits.fract() != 0.0 {
                    return Err(Error::FractionalUniformBits(avg_bits));
                }
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!(
                        "alpha must lie in [0, 1], got {alpha}"
                    )));
                }
                Ok(())
            }
            Policy::MondeStatic { k } => check_k(k),
            Policy::GpuOnDemand { fetch_bits, .. } => {
                model.expert_bytes(fetch_bits, hw.fp_bytes).map(|_| ())
            }
        }
    }
}

/// Where prefill experts execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    /// Every expert on NDP at full precision.
    #[default]
    AllNdp,
    /// The layout left resident by the previous sequence (all NDP for the first).
    Resident,
    /// Every expert on the GPU at full precision with no transfer cost.
    Gpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub prefill: PrefillMode,
    /// Forget residency between sequences: every sequence migrates its full
    /// hot set and starts with an empty cache. Sequences then run in parallel.
    pub full_recharge: bool,
}

/// Roofline time of one expert on `device` processing `tokens` tokens.
///
/// `max(weight bytes / bandwidth, 2 * params * tokens / throughput)`. On NDP
/// with low-bit packing the throughput is scaled by `full_bits / bits`.
pub fn expert_exec_time(
    model: &ModelConfig,
    hw: &HardwareConfig,
    device: Device,
    bits: u32,
    tokens: u64,
) -> Result<f64> {
    let full = hw.full_bits();
    let bytes = model.expert_bytes(bits, hw.fp_bytes)? as f64;
    let (bandwidth, flops) = match device {
        Device::Gpu => {
            if bits != full {
                return Err(Error::InvalidBits(bits));
            }
            (hw.gpu_hbm_bandwidth, hw.gpu_peak_flops)
        }
        Device::Ndp => {
            let base = hw.ndp_compute_throughput();
            let flops = if hw.ndp_lowbit_packing {
                base * full as f64 / bits as f64
            } else {
                base
            };
            (hw.ndp_bandwidth, flops)
        }
    };
    if tokens == 0 {
        return Ok(0.0);
    }
    let compute = 2.0 * model.expert_param_count() as f64 * tokens as f64 / flops;
    Ok((bytes / bandwidth).max(compute))
}

/// PCIe time to ship `tokens` hidden vectors to NDP and back.
pub fn activation_transfer_time(model: &ModelConfig, hw: &HardwareConfig, tokens: u64) -> f64 {
    let bytes = 2.0 * model.hidden_dim as f64 * hw.fp_bytes as f64 * tokens as f64;
    bytes / hw.pcie_bandwidth
}

/// A policy bound to the data it needs to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheduler {
    ContextAware {
        k: usize,
        alpha: f64,
        avg_bits: f64,
        allocation: Allocation,
    },
    Static {
        plan: PlacementPlan,
    },
    OnDemand {
        capacity: usize,
        fetch_bits: u32,
    },
}

impl Scheduler {
    /// Resolves `policy`; the static baseline takes its plan from `calibration`.
    pub fn resolve(policy: &Policy, calibration: Option<&StageStats>) -> Result<Self> {
        Ok(match *policy {
            Policy::Ours {
                avg_bits,
                k,
                alpha,
                allocation,
            } => Scheduler::ContextAware {
                k,
                alpha,
                avg_bits,
                allocation,
            },
            Policy::MondeStatic { k } => {
                let cal = calibration.ok_or_else(|| {
                    Error::MissingInput("calibration statistics for monde_static".into())
                })?;
                Scheduler::Static {
                    plan: static_frequency_place(cal, k)?,
                }
            }
            Policy::GpuOnDemand {
                gpu_cache_capacity,
                fetch_bits,
            } => Scheduler::OnDemand {
                capacity: gpu_cache_capacity,
                fetch_bits,
            },
        })
    }
}

/// Per-layer LRU set of expert ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LruCache {
    capacity: usize,
    order: VecDeque<usize>,
}

impl LruCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            order: VecDeque::with_capacity(capacity + 1),
        }
    }

    /// Touches `expert`; returns true on a hit.
    pub fn access(&mut self, expert: usize) -> bool {
        if let Some(pos) = self.order.iter().position(|&e| e == expert) {
            self.order.remove(pos);
            self.order.push_back(expert);
            return true;
        }
        if self.capacity > 0 {
            if self.order.len() == self.capacity {
                self.order.pop_front();
            }
            self.order.push_back(expert);
        }
        false
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Device state carried from one sequence to the next.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Residency {
    pub plan: Option<PlacementPlan>,
    pub caches: Vec<LruCache>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seq_id: String,
    pub prefill_time: f64,
    pub migration_time: f64,
    pub decode_time: f64,
    /// NDP busy time during decoding, excluding PCIe transfers.
    pub ndp_busy: f64,
    /// GPU expert busy time during decoding, excluding PCIe transfers.
    pub gpu_busy: f64,
    pub migration_bytes: u64,
    /// Expert weight transfers to the GPU.
    pub migration_events: usize,
    pub decode_tokens: usize,
    pub gpu_activations: u64,
    pub ndp_activations: u64,
    pub loss_proxy: f64,
}

impl SequenceReport {
    pub fn e2e_time(&self) -> f64 {
        self.prefill_time + self.migration_time + self.decode_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    pub e2e_latency: f64,
    pub prefill_latency: f64,
    pub migration_latency: f64,
    pub decode_latency: f64,
    pub ndp_latency: f64,
    pub migration_bytes: u64,
    pub decode_tokens: usize,
    pub decode_throughput: f64,
    pub loss_proxy: f64,
    pub sequences: Vec<SequenceReport>,
}

/// Columns of the per-run CSV, in order. New metrics are appended only.
pub const REPORT_COLUMNS: [&str; 10] = [
    "policy",
    "e2e_latency",
    "decode_latency",
    "decode_throughput",
    "ndp_latency",
    "migration_bytes",
    "loss_proxy",
    "prefill_latency",
    "migration_latency",
    "decode_tokens",
];

impl SimReport {
    pub fn from_sequences(policy: String, sequences: Vec<SequenceReport>) -> Self {
        let sum = |f: fn(&SequenceReport) -> f64| sequences.iter().map(f).sum::<f64>();
        let prefill_latency = sum(|s| s.prefill_time);
        let migration_latency = sum(|s| s.migration_time);
        let decode_latency = sum(|s| s.decode_time);
        let decode_tokens: usize = sequences.iter().map(|s| s.decode_tokens).sum();
        Self {
            policy,
            e2e_latency: sum(SequenceReport::e2e_time),
            prefill_latency,
            migration_latency,
            decode_latency,
            ndp_latency: sum(|s| s.ndp_busy),
            migration_bytes: sequences.iter().map(|s| s.migration_bytes).sum(),
            decode_tokens,
            decode_throughput: if decode_latency > 0.0 {
                decode_tokens as f64 / decode_latency
            } else {
                0.0
            },
            loss_proxy: sum(|s| s.loss_proxy),
            sequences,
        }
    }

    /// Concatenates two reports of the same policy.
    pub fn merge(self, other: SimReport) -> SimReport {
        let mut seqs = self.sequences;
        seqs.extend(other.sequences);
        SimReport::from_sequences(self.policy, seqs)
    }

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.policy.clone(),
            self.e2e_latency.to_string(),
            self.decode_latency.to_string(),
            self.decode_throughput.to_string(),
            self.ndp_latency.to_string(),
            self.migration_bytes.to_string(),
            self.loss_proxy.to_string(),
            self.prefill_latency.to_string(),
            self.migration_latency.to_string(),
            self.decode_tokens.to_string(),
        ]
    }
}

/// Writes one CSV row per report under [`REPORT_COLUMNS`].
pub fn write_reports_csv<W: Write>(out: W, reports: &[SimReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// How each expert of a layer executes for one phase.
#[derive(Debug, Clone, Copy)]
struct Slot {
    device: Device,
    bits: u32,
}

pub struct Simulator<'a> {
    model: &'a ModelConfig,
    hw: &'a HardwareConfig,
    losses: Option<&'a LossTable>,
    options: SimOptions,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a ModelConfig, hw: &'a HardwareConfig) -> Result<Self> {
        model.validate()?;
        hw.validate()?;
        Ok(Self {
            model,
            hw,
            losses: None,
            options: SimOptions::default(),
        })
    }

    pub fn with_losses(mut self, losses: &'a LossTable) -> Result<Self> {
        losses.check_shape(self.model)?;
        self.losses = Some(losses);
        Ok(self)
    }

    pub fn with_options(mut self, options: SimOptions) -> Self {
        self.options = options;
        self
    }

    pub fn options(&self) -> SimOptions {
        self.options
    }

    fn exec(&self, device: Device, bits: u32, tokens: u64) -> f64 {
        expert_exec_time(self.model, self.hw, device, bits, tokens)
            .expect("bitwidths are validated before simulation")
    }

    fn full_bytes(&self) -> u64 {
        self.model
            .expert_bytes(self.hw.full_bits(), self.hw.fp_bytes)
            .expect("full precision is always valid")
    }

    /// Cost of one batched pass over `tokens` where every expert's device is
    /// fixed by `layout(layer, expert)`.
    fn batched_pass(&self, tokens: &[TokenRouting], layout: impl Fn(usize, usize) -> Slot) -> f64 {
        let e = self.model.num_experts;
        let mut total = 0.0;
        let mut counts = vec![0u64; e];
        for layer in 0..self.model.num_layers {
            counts.iter_mut().for_each(|c| *c = 0);
            let mut ndp_tokens = 0u64;
            for tok in tokens {
                let mut touched = false;
                for s in &tok.layers[layer] {
                    counts[s.expert as usize] += 1;
                    touched |= layout(layer, s.expert as usize).device == Device::Ndp;
                }
                ndp_tokens += touched as u64;
            }
            let (mut gpu, mut ndp) = (0.0, 0.0);
            for (expert, &n) in counts.iter().enumerate() {
                let slot = layout(layer, expert);
                let t = self.exec(slot.device, slot.bits, n);
                match slot.device {
                    Device::Gpu => gpu += t,
                    Device::Ndp => ndp += t,
                }
            }
            total += f64::max(gpu, ndp)
                + activation_transfer_time(self.model, self.hw, ndp_tokens)
                + self.hw.nonexpert_layer_time * tokens.len() as f64;
        }
        total
    }

    fn check_sequence(&self, seq: &SequenceTrace) -> Result<()> {
        seq.validate(self.model)
    }

    /// Runs one sequence under `scheduler`, updating `residency`.
    pub fn simulate_sequence(
        &self,
        scheduler: &Scheduler,
        seq: &SequenceTrace,
        residency: &mut Residency,
    ) -> Result<SequenceReport> {
        self.check_sequence(seq)?;
        if self.options.full_recharge {
            *residency = Residency::default();
        }
        match scheduler {
            Scheduler::ContextAware {
                k,
                alpha,
                avg_bits,
                allocation,
            } => {
                let losses = self.losses.ok_or_else(|| {
                    Error::MissingInput("loss table for context-aware policy".into())
                })?;
                let stats = StageStats::collect(&seq.prefill, self.model.num_experts)?;
                let scores = importance(&stats, *alpha)?;
                let plan = place(&scores, *k)?;
                let bits = assign_bits(&plan, &scores, losses, *avg_bits, *allocation)?;
                Ok(self.run_placed(seq, residency, plan, Some((&bits, losses))))
            }
            Scheduler::Static { plan } => {
                if plan.num_layers() != self.model.num_layers {
                    return Err(Error::Config("static plan layer count mismatch".into()));
                }
                Ok(self.run_placed(seq, residency, plan.clone(), None))
            }
            Scheduler::OnDemand {
                capacity,
                fetch_bits,
            } => self.run_on_demand(seq, residency, *capacity, *fetch_bits),
        }
    }

    fn prefill_cost(&self, seq: &SequenceTrace, resident: Option<&PlacementPlan>) -> f64 {
        let full = self.hw.full_bits();
        match self.options.prefill {
            PrefillMode::AllNdp => self.batched_pass(&seq.prefill, |_, _| Slot {
                device: Device::Ndp,
                bits: full,
            }),
            PrefillMode::Gpu => self.batched_pass(&seq.prefill, |_, _| Slot {
                device: Device::Gpu,
                bits: full,
            }),
            PrefillMode::Resident => self.batched_pass(&seq.prefill, |l, e| Slot {
                device: resident.map_or(Device::Ndp, |p| p.device(l, e)),
                bits: full,
            }),
        }
    }

    /// Shared path of the placement-based policies. `bits` is `None` when
    /// NDP experts run at full precision.
    fn run_placed(
        &self,
        seq: &SequenceTrace,
        residency: &mut Residency,
        plan: PlacementPlan,
        bits: Option<(&BitwidthPlan, &LossTable)>,
    ) -> SequenceReport {
        let full = self.hw.full_bits();
        let mut report = SequenceReport {
            seq_id: seq.seq_id.clone(),
            decode_tokens: seq.decode.len(),
            ..Default::default()
        };
        report.prefill_time = self.prefill_cost(seq, residency.plan.as_ref());

        report.migration_events = plan.migrations_from(residency.plan.as_ref());
        report.migration_bytes = report.migration_events as u64 * self.full_bytes();
        report.migration_time = report.migration_bytes as f64 / self.hw.pcie_bandwidth;

        let layers = self.model.num_layers;
        let slots: Vec<Vec<Slot>> = (0..layers)
            .map(|l| {
                (0..self.model.num_experts)
                    .map(|e| match plan.device(l, e) {
                        Device::Gpu => Slot {
                            device: Device::Gpu,
                            bits: full,
                        },
                        Device::Ndp => Slot {
                            device: Device::Ndp,
                            bits: bits.and_then(|(b, _)| b.bits(l, e)).map_or(full, u32::from),
                        },
                    })
                    .collect()
            })
            .collect();
        // per-layer unit times, looked up for every decode activation
        let unit: Vec<Vec<f64>> = slots
            .iter()
            .map(|row| row.iter().map(|s| self.exec(s.device, s.bits, 1)).collect())
            .collect();
        let act = activation_transfer_time(self.model, self.hw, 1);

        for tok in &seq.decode {
            for (l, sels) in tok.layers.iter().enumerate() {
                let (mut gpu, mut ndp) = (0.0, 0.0);
                let mut touched = false;
                for s in sels {
                    let e = s.expert as usize;
                    let t = unit[l][e];
                    match slots[l][e].device {
                        Device::Gpu => {
                            gpu += t;
                            report.gpu_activations += 1;
                        }
                        Device::Ndp => {
                            ndp += t;
                            touched = true;
                            report.ndp_activations += 1;
                            if let Some((_, losses)) = bits {
                                report.loss_proxy += losses.loss(l, e, slots[l][e].bits);
                            }
                        }
                    }
                }
                report.gpu_busy += gpu;
                report.ndp_busy += ndp;
                report.decode_time += f64::max(gpu, ndp)
                    + if touched { act } else { 0.0 }
                    + self.hw.nonexpert_layer_time;
            }
        }
        residency.plan = Some(plan);
        report
    }

    fn run_on_demand(
        &self,
        seq: &SequenceTrace,
        residency: &mut Residency,
        capacity: usize,
        fetch_bits: u32,
    ) -> Result<SequenceReport> {
        let layers = self.model.num_layers;
        if residency.caches.len() != layers {
            residency.caches = vec![LruCache::new(capacity); layers];
        }
        let full = self.hw.full_bits();
        let fetch_bytes = self.model.expert_bytes(fetch_bits, self.hw.fp_bytes)?;
        let fetch_time = fetch_bytes as f64 / self.hw.pcie_bandwidth;
        let gpu_unit = self.exec(Device::Gpu, full, 1);
        let lossy = fetch_bits < full;
        let mut report = SequenceReport {
            seq_id: seq.seq_id.clone(),
            decode_tokens: seq.decode.len(),
            ..Default::default()
        };

        // prefill: each distinct expert is fetched on a miss, then run batched
        let mut counts = vec![0u64; self.model.num_experts];
        for l in 0..layers {
            counts.iter_mut().for_each(|c| *c = 0);
            let mut first_seen = Vec::new();
            for tok in &seq.prefill {
                for s in &tok.layers[l] {
                    let e = s.expert as usize;
                    if counts[e] == 0 {
                        first_seen.push(e);
                    }
                    counts[e] += 1;
                }
            }
            let mut t = self.hw.nonexpert_layer_time * seq.prefill.len() as f64;
            for e in first_seen {
                if !residency.caches[l].access(e) {
                    t += fetch_time;
                    report.migration_events += 1;
                }
                t += self.exec(Device::Gpu, full, counts[e]);
            }
            report.prefill_time += t;
        }

        for tok in &seq.decode {
            for (l, sels) in tok.layers.iter().enumerate() {
                let mut t = self.hw.nonexpert_layer_time;
                for s in sels {
                    let e = s.expert as usize;
                    if !residency.caches[l].access(e) {
                        t += fetch_time;
                        report.migration_events += 1;
                    }
                    t += gpu_unit;
                    report.gpu_busy += gpu_unit;
                    report.gpu_activations += 1;
                    if lossy {
                        if let Some(losses) = self.losses {
                            report.loss_proxy += losses.loss(l, e, fetch_bits);
                        }
                    }
                }
                report.decode_time += t;
            }
        }
        report.migration_bytes = report.migration_events as u64 * fetch_bytes;
        Ok(report)
    }

    /// Runs every sequence in order, carrying residency across sequences.
    /// With `full_recharge` sequences are independent and run in parallel.
    pub fn simulate(
        &self,
        policy: &Policy,
        traces: &[SequenceTrace],
        calibration: Option<&StageStats>,
    ) -> Result<SimReport> {
        policy.validate(self.model, self.hw)?;
        let scheduler = Scheduler::resolve(policy, calibration)?;
        let sequences = if self.options.full_recharge {
            traces
                .par_iter()
                .map(|seq| self.simulate_sequence(&scheduler, seq, &mut Residency::default()))
                .collect::<Result<Vec<_>>>()?
        } else {
            let mut residency = Residency::default();
            traces
                .iter()
                .map(|seq| self.simulate_sequence(&scheduler, seq, &mut residency))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(SimReport::from_sequences(policy.label(), sequences))
    }
}

/// Aggregated prefill statistics of a trace set, the default calibration
/// source for the static baseline.
pub fn prefill_calibration(model: &ModelConfig, traces: &[SequenceTrace]) -> StageStats {
    let mut stats = StageStats::zeros(model.num_layers, model.num_experts);
    for seq in traces {
        for tok in &seq.prefill {
            stats.add_token(tok);
        }
    }
    stats
}
