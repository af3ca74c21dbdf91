use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndp_moe::bitwidth::{Allocation, LossTable};
use ndp_moe::sim::{
    prefill_calibration, write_reports_csv, Policy, SimReport, Simulator, REPORT_COLUMNS,
};
use ndp_moe::stats::sequence_similarity;
use ndp_moe::trace::{generate_traces, read_traces, write_traces, SequenceTrace, TraceHeader};
use ndp_moe::{Error, GeneratorParams, ModelConfig, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_for(cfg: &ExperimentConfig, model: &ModelConfig, g: &GeneratorParams) -> TraceHeader {
    TraceHeader {
        source: Some(json!({ "generator": g, "config_hash": cfg.content_hash() })),
        ..TraceHeader::for_model(model)
    }
}

pub fn gen_trace(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    let model = cfg.model()?;
    let traces = generate_traces(&model, &cfg.generator)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_traces(out, &header_for(cfg, &model, &cfg.generator), &traces)?;
    info!("wrote {} sequences to {}", traces.len(), out.display());
    Ok(traces.len())
}

/// Builds the loss table into `out`, or into the cache when `out` is None.
pub fn build_loss(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let model = cfg.model()?;
    let l = &cfg.loss;
    match out {
        Some(path) => {
            let table = ndp_moe::build_loss_table(&model, l.seed, l.calib_tokens)?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            table.save(path)?;
            Ok(path.to_path_buf())
        }
        None => {
            LossTable::load_or_build(&l.cache_dir, &model, l.seed, l.calib_tokens)?;
            Ok(LossTable::cache_path(
                &l.cache_dir,
                &model,
                l.seed,
                l.calib_tokens,
            ))
        }
    }
}

fn needs_losses(policies: &[Policy], full_bits: u32) -> bool {
    policies.iter().any(|p| match p {
        Policy::Ours { .. } => true,
        Policy::GpuOnDemand { fetch_bits, .. } => *fetch_bits < full_bits,
        Policy::MondeStatic { .. } => false,
    })
}

fn load_losses(cfg: &ExperimentConfig, model: &ModelConfig) -> Result<LossTable> {
    let l = &cfg.loss;
    let table = match &l.path {
        Some(path) => LossTable::load(path)?,
        None => LossTable::load_or_build(&l.cache_dir, model, l.seed, l.calib_tokens)?,
    };
    table.check_shape(model)?;
    Ok(table)
}

fn load_traces(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    g: &GeneratorParams,
) -> Result<Vec<SequenceTrace>> {
    match &cfg.trace {
        Some(path) => read_traces(path, model),
        None => generate_traces(model, g),
    }
}

fn simulate_policies(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    traces: &[SequenceTrace],
    losses: Option<&LossTable>,
    policies: &[Policy],
) -> Result<Vec<SimReport>> {
    let mut sim = Simulator::new(model, &cfg.hardware)?.with_options(cfg.sim);
    if let Some(t) = losses {
        sim = sim.with_losses(t)?;
    }
    let calibration = prefill_calibration(model, traces);
    policies
        .iter()
        .map(|p| sim.simulate(p, traces, Some(&calibration)))
        .collect()
}

#[derive(Serialize)]
struct RunOutput<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
    similarity: f64,
    reports: &'a [SimReport],
}

/// Simulates every configured policy; writes `report.json` and `report.csv`
/// into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SimReport>> {
    cfg.validate()?;
    let model = cfg.model()?;
    let policies = cfg.policies()?;
    let traces = load_traces(cfg, &model, &cfg.generator)?;
    if traces.is_empty() {
        return Err(Error::MissingInput("trace set has no sequences".into()));
    }
    let losses = if needs_losses(&policies, cfg.hardware.full_bits()) {
        Some(load_losses(cfg, &model)?)
    } else {
        None
    };
    let reports = simulate_policies(cfg, &model, &traces, losses.as_ref(), &policies)?;
    let output = RunOutput {
        config_hash: cfg.content_hash(),
        config: cfg,
        similarity: sequence_similarity(&traces, model.num_experts)?,
        reports: &reports,
    };
    write_file(
        &out_dir.join("report.json"),
        &serde_json::to_vec_pretty(&output)?,
    )?;
    let mut csv = Vec::new();
    write_reports_csv(&mut csv, &reports)?;
    write_file(&out_dir.join("report.csv"), &csv)?;
    info!(
        "wrote {} report rows to {}",
        reports.len(),
        out_dir.display()
    );
    Ok(reports)
}

/// Leading sweep columns; [`REPORT_COLUMNS`] follow.
pub const SWEEP_KEY_COLUMNS: [&str; 6] =
    ["rho", "k", "alpha", "avg_bits", "allocation", "similarity"];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub rho: Option<f64>,
    pub policy: Policy,
    pub similarity: f64,
    pub report: SimReport,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl SweepRow {
    fn record(&self) -> Vec<String> {
        let (k, alpha, bits, alloc) = match &self.policy {
            Policy::Ours {
                avg_bits,
                k,
                alpha,
                allocation,
            } => (
                Some(*k),
                Some(*alpha),
                Some(*avg_bits),
                Some(match allocation {
                    Allocation::Selector => "selector",
                    Allocation::Uniform => "uniform",
                }),
            ),
            Policy::MondeStatic { k } => (Some(*k), None, None, None),
            Policy::GpuOnDemand { .. } => (None, None, None, None),
        };
        let mut rec = vec![
            opt(self.rho),
            opt(k),
            opt(alpha),
            opt(bits),
            opt(alloc),
            self.similarity.to_string(),
        ];
        rec.extend(self.report.csv_record());
        rec
    }
}

/// Expands each configured policy over the sweep axes that apply to it.
fn expand(cfg: &ExperimentConfig, policy: &Policy) -> Vec<Policy> {
    let axes = &cfg.sweep;
    match *policy {
        Policy::Ours {
            avg_bits,
            k,
            alpha,
            allocation,
        } => {
            let ks = axes.k.clone().unwrap_or_else(|| vec![k]);
            let alphas = axes.alpha.clone().unwrap_or_else(|| vec![alpha]);
            let bits = axes.avg_bits.clone().unwrap_or_else(|| vec![avg_bits]);
            let allocs = axes.allocation.clone().unwrap_or_else(|| vec![allocation]);
            let mut out = Vec::new();
            for &k in &ks {
                for &alpha in &alphas {
                    for &avg_bits in &bits {
                        for &allocation in &allocs {
                            out.push(Policy::Ours {
                                avg_bits,
                                k,
                                alpha,
                                allocation,
                            });
                        }
                    }
                }
            }
            out
        }
        Policy::MondeStatic { k } => axes
            .k
            .clone()
            .unwrap_or_else(|| vec![k])
            .into_iter()
            .map(|k| Policy::MondeStatic { k })
            .collect(),
        ref other => vec![other.clone()],
    }
}

/// Runs the Cartesian product of the sweep axes and writes `sweep.csv` and
/// `sweep.json` into `out_dir`. Rows are ordered by rho, then configured
/// policy, then k, alpha, avg_bits, allocation.
pub fn sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let model = cfg.model()?;
    let policies = cfg.policies()?;
    let cells: Vec<Policy> = policies.iter().flat_map(|p| expand(cfg, p)).collect();
    for p in &cells {
        p.validate(&model, &cfg.hardware)?;
    }
    let losses = if needs_losses(&cells, cfg.hardware.full_bits()) {
        Some(load_losses(cfg, &model)?)
    } else {
        None
    };
    let rhos: Vec<Option<f64>> = match (&cfg.sweep.rho, &cfg.trace) {
        (Some(r), _) => r.iter().copied().map(Some).collect(),
        (None, Some(_)) => vec![None],
        (None, None) => vec![Some(cfg.generator.rho)],
    };

    let mut rows = Vec::new();
    for rho in rhos {
        let g = GeneratorParams {
            rho: rho.unwrap_or(cfg.generator.rho),
            ..cfg.generator.clone()
        };
        let traces = load_traces(cfg, &model, &g)?;
        if traces.is_empty() {
            return Err(Error::MissingInput("trace set has no sequences".into()));
        }
        let similarity = sequence_similarity(&traces, model.num_experts)?;
        let cell = |p: &Policy| -> Result<SweepRow> {
            let report = simulate_policies(
                cfg,
                &model,
                &traces,
                losses.as_ref(),
                std::slice::from_ref(p),
            )?
            .pop()
            .expect("one policy, one report");
            Ok(SweepRow {
                rho,
                policy: p.clone(),
                similarity,
                report,
            })
        };
        let batch: Vec<SweepRow> = if cfg.sim.full_recharge {
            cells.par_iter().map(cell).collect::<Result<_>>()?
        } else {
            cells.iter().map(cell).collect::<Result<_>>()?
        };
        rows.extend(batch);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = SWEEP_KEY_COLUMNS
        .iter()
        .chain(REPORT_COLUMNS.iter())
        .copied()
        .collect();
    w.write_record(&header)?;
    for row in &rows {
        w.write_record(row.record())?;
    }
    let csv = w
        .into_inner()
        .map_err(|e| Error::io(out_dir, e.into_error()))?;
    write_file(&out_dir.join("sweep.csv"), &csv)?;
    let meta = json!({
        "config_hash": cfg.content_hash(),
        "config": cfg,
        "rows": rows.iter().map(|r| json!({
            "rho": r.rho,
            "policy": r.policy,
            "similarity": r.similarity,
            "report": {
                "policy": r.report.policy,
                "e2e_latency": r.report.e2e_latency,
                "decode_latency": r.report.decode_latency,
                "decode_throughput": r.report.decode_throughput,
                "ndp_latency": r.report.ndp_latency,
                "migration_bytes": r.report.migration_bytes,
                "loss_proxy": r.report.loss_proxy,
            },
        })).collect::<Vec<_>>(),
    });
    write_file(
        &out_dir.join("sweep.json"),
        &serde_json::to_vec_pretty(&meta)?,
    )?;
    info!("wrote {} sweep rows to {}", rows.len(), out_dir.display());
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct ValidationSummary {
    pub config_hash: String,
    pub model: String,
    pub policies: usize,
    pub trace_sequences: Option<usize>,
    pub loss_table: Option<String>,
}

/// Checks the config and any trace or loss-table file it names.
pub fn validate(cfg: &ExperimentConfig) -> Result<ValidationSummary> {
    cfg.validate()?;
    let model = cfg.model()?;
    let trace_sequences = match &cfg.trace {
        Some(path) => Some(read_traces(path, &model)?.len()),
        None => None,
    };
    let loss_table = match &cfg.loss.path {
        Some(path) => {
            LossTable::load(path)?.check_shape(&model)?;
            Some(path.display().to_string())
        }
        None => None,
    };
    Ok(ValidationSummary {
        config_hash: cfg.content_hash(),
        model: model.name,
        policies: cfg.policies()?.len(),
        trace_sequences,
        loss_table,
    })
}
