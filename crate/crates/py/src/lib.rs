//! Python bindings, importable as `ndp_moe`.
//!
//! Configs, traces and loss tables are wrapped as classes. Reports, policies
//! and plans cross the boundary as plain dicts via their JSON form.

use std::path::PathBuf;

use ndp_moe::sim::{Policy, PrefillMode, SimOptions};
use ndp_moe::{
    Device, Error, GeneratorParams, HardwareConfig, LayerBits, LossTable, ModelConfig,
    SequenceTrace, Simulator, StageStats, TraceHeader,
};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// `[layer][expert]`.
type Grid<T> = Vec<Vec<T>>;

fn err(e: Error) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?
        .call_method1("loads", (text,))?
        .unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = PyModule::import(obj.py(), "json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "ModelConfig", module = "ndp_moe", frozen, skip_from_py_object)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (name, hidden_dim, ffn_dim, num_layers, num_experts, top_k, matrices_per_expert = 3))]
    fn new(
        name: String,
        hidden_dim: usize,
        ffn_dim: usize,
        num_layers: usize,
        num_experts: usize,
        top_k: usize,
        matrices_per_expert: usize,
    ) -> PyResult<Self> {
        let inner = ModelConfig {
            name,
            hidden_dim,
            ffn_dim,
            num_layers,
            num_experts,
            top_k,
            matrices_per_expert,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// `"mixtral-8x7b"` or `"mixtral-8x22b"`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        ModelConfig::preset(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown model preset `{name}`")))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ModelConfig::from_json_str(text)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }
    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim
    }
    #[getter]
    fn ffn_dim(&self) -> usize {
        self.inner.ffn_dim
    }
    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers
    }
    #[getter]
    fn num_experts(&self) -> usize {
        self.inner.num_experts
    }
    #[getter]
    fn top_k(&self) -> usize {
        self.inner.top_k
    }

    fn expert_param_count(&self) -> u64 {
        self.inner.expert_param_count()
    }

    fn total_expert_params(&self) -> u64 {
        self.inner.total_expert_params()
    }

    fn expert_bytes(&self, bits: u32, fp_bytes: u32) -> PyResult<u64> {
        self.inner.expert_bytes(bits, fp_bytes).map_err(err)
    }

    fn default_gpu_budget(&self) -> usize {
        self.inner.default_gpu_budget()
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig({:?}, L={}, E={}, k={})",
            self.inner.name, self.inner.num_layers, self.inner.num_experts, self.inner.top_k
        )
    }
}

#[pyclass(
    name = "HardwareConfig",
    module = "ndp_moe",
    frozen,
    skip_from_py_object
)]
struct PyHardwareConfig {
    inner: HardwareConfig,
}

#[pymethods]
impl PyHardwareConfig {
    /// Defaults, with any field overridden by keyword.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(HardwareConfig::default())
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        if let Some(d) = overrides {
            let extra: serde_json::Map<String, serde_json::Value> = from_py(d.as_any())?;
            value.as_object_mut().expect("struct").extend(extra);
        }
        let inner: HardwareConfig =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn pcie_bandwidth(&self) -> f64 {
        self.inner.pcie_bandwidth
    }
    #[getter]
    fn ndp_bandwidth(&self) -> f64 {
        self.inner.ndp_bandwidth
    }
    #[getter]
    fn gpu_hbm_bandwidth(&self) -> f64 {
        self.inner.gpu_hbm_bandwidth
    }
}

/// A list of sequence traces for one model.
#[pyclass(name = "TraceSet", module = "ndp_moe", frozen, skip_from_py_object)]
struct PyTraceSet {
    model: ModelConfig,
    traces: Vec<SequenceTrace>,
}

#[pymethods]
impl PyTraceSet {
    #[staticmethod]
    #[pyo3(signature = (model, seed = 0, num_sequences = 64, prompt_len = 128, output_len = 128,
                        rho = 0.9, alpha_dir = 0.3, global_share = 0.5))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        py: Python<'_>,
        model: &PyModelConfig,
        seed: u64,
        num_sequences: usize,
        prompt_len: usize,
        output_len: usize,
        rho: f64,
        alpha_dir: f64,
        global_share: f64,
    ) -> PyResult<Self> {
        let params = GeneratorParams {
            seed,
            alpha_dir,
            rho,
            global_share,
            prompt_len,
            output_len,
            num_sequences,
        };
        let model = model.inner.clone();
        let traces = py
            .detach(|| ndp_moe::generate_traces(&model, &params))
            .map_err(err)?;
        Ok(Self { model, traces })
    }

    #[staticmethod]
    fn load(model: &PyModelConfig, path: PathBuf) -> PyResult<Self> {
        let traces = ndp_moe::read_traces(&path, &model.inner).map_err(err)?;
        Ok(Self {
            model: model.inner.clone(),
            traces,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ndp_moe::write_traces(&path, &TraceHeader::for_model(&self.model), &self.traces)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.traces.len()
    }

    fn seq_ids(&self) -> Vec<String> {
        self.traces.iter().map(|t| t.seq_id.clone()).collect()
    }

    /// Mean prefill/decode cosine similarity over sequences.
    fn similarity(&self) -> PyResult<f64> {
        ndp_moe::sequence_similarity(&self.traces, self.model.num_experts).map_err(err)
    }

    /// `(counts, score_sums)` of one sequence's prefill, each `[layer][expert]`.
    fn prefill_stats(&self, index: usize) -> PyResult<(Grid<u64>, Grid<f64>)> {
        let seq = self
            .traces
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no sequence {index}")))?;
        let s = StageStats::collect(&seq.prefill, self.model.num_experts).map_err(err)?;
        Ok((s.counts, s.score_sums))
    }

    /// Sequence `index` as a dict in the trace-file layout.
    fn sequence(&self, py: Python<'_>, index: usize) -> PyResult<Py<PyAny>> {
        let seq = self
            .traces
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no sequence {index}")))?;
        to_py(py, seq)
    }
}

#[pyclass(name = "LossTable", module = "ndp_moe", frozen, skip_from_py_object)]
struct PyLossTable {
    inner: LossTable,
}

#[pymethods]
impl PyLossTable {
    #[staticmethod]
    #[pyo3(signature = (model, seed = 0, calib_tokens = 64))]
    fn build(
        py: Python<'_>,
        model: &PyModelConfig,
        seed: u64,
        calib_tokens: usize,
    ) -> PyResult<Self> {
        let m = model.inner.clone();
        let inner = py
            .detach(|| ndp_moe::build_loss_table(&m, seed, calib_tokens))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        LossTable::load(&path)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Losses at 1..=4 bits for one expert.
    fn row(&self, layer: usize, expert: usize) -> PyResult<[f64; 4]> {
        self.inner
            .losses
            .get(layer)
            .and_then(|l| l.get(expert))
            .copied()
            .ok_or_else(|| PyValueError::new_err(format!("no entry ({layer}, {expert})")))
    }

    /// All rows of one layer, indexed by expert id.
    fn layer(&self, layer: usize) -> PyResult<Vec<[f64; 4]>> {
        self.inner
            .losses
            .get(layer)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("no layer {layer}")))
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }
}

/// `S = alpha * L1(counts) + (1 - alpha) * L1(score_sums)` per layer.
#[pyfunction]
#[pyo3(signature = (counts, score_sums, alpha = 0.5))]
fn importance(
    counts: Vec<Vec<u64>>,
    score_sums: Vec<Vec<f64>>,
    alpha: f64,
) -> PyResult<Vec<Vec<f64>>> {
    if counts.len() != score_sums.len()
        || counts
            .iter()
            .zip(&score_sums)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(PyValueError::new_err(
            "counts and score_sums differ in shape",
        ));
    }
    let stats = StageStats {
        token_count: 0,
        counts,
        score_sums,
    };
    ndp_moe::importance(&stats, alpha)
        .map(|s| s.scores)
        .map_err(err)
}

/// Top-`k` experts per layer by score, ties to the lower id.
/// Returns `(hot, cold)`, each a sorted id list per layer.
#[pyfunction]
fn place(scores: Vec<Vec<f64>>, k: usize) -> PyResult<(Grid<usize>, Grid<usize>)> {
    let scores = ndp_moe::ImportanceScores {
        scores,
        alpha: f64::NAN,
    };
    let plan = ndp_moe::place(&scores, k).map_err(err)?;
    Ok((plan.hot, plan.cold))
}

fn layer_bits_dict(py: Python<'_>, bits: &LayerBits) -> PyResult<Py<PyAny>> {
    to_py(py, bits)
}

/// Optimal prefix-structured bit split. `order` lists expert ids by
/// descending importance; `losses[e]` holds expert `e`'s losses at 1..=4 bits.
#[pyfunction]
fn prefix_split(
    py: Python<'_>,
    order: Vec<usize>,
    losses: Vec<[f64; 4]>,
    avg_bits: f64,
) -> PyResult<Py<PyAny>> {
    check_order(&order, losses.len())?;
    let bits = ndp_moe::prefix_split(&order, &losses, avg_bits).map_err(err)?;
    layer_bits_dict(py, &bits)
}

/// Brute-force reference for `prefix_split` (small inputs only).
#[pyfunction]
fn oracle_prefix_split(
    py: Python<'_>,
    order: Vec<usize>,
    losses: Vec<[f64; 4]>,
    avg_bits: f64,
) -> PyResult<Py<PyAny>> {
    check_order(&order, losses.len())?;
    let bits = ndp_moe::oracle_prefix_split(&order, &losses, avg_bits).map_err(err)?;
    layer_bits_dict(py, &bits)
}

fn check_order(order: &[usize], n: usize) -> PyResult<()> {
    match order.iter().find(|&&e| e >= n) {
        Some(e) => Err(PyValueError::new_err(format!("expert {e} has no loss row"))),
        None => Ok(()),
    }
}

/// Roofline seconds for one expert on `"gpu"` or `"ndp"`.
#[pyfunction]
fn expert_exec_time(
    model: &PyModelConfig,
    hardware: &PyHardwareConfig,
    device: &str,
    bits: u32,
    tokens: u64,
) -> PyResult<f64> {
    let device = match device {
        "gpu" => Device::Gpu,
        "ndp" => Device::Ndp,
        _ => return Err(PyValueError::new_err(format!("unknown device `{device}`"))),
    };
    ndp_moe::expert_exec_time(&model.inner, &hardware.inner, device, bits, tokens).map_err(err)
}

/// Simulates one policy over a trace set and returns the report as a dict.
///
/// `policy` is a dict such as `{"policy": "ours", "avg_bits": 3, "k": 4}`.
/// `losses` is required for `ours`; `monde_static` calibrates on the
/// aggregated prefill of `traces`.
#[pyfunction]
#[pyo3(signature = (model, hardware, traces, policy, losses = None, prefill = "all_ndp", full_recharge = false))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    model: &PyModelConfig,
    hardware: &PyHardwareConfig,
    traces: &PyTraceSet,
    policy: &Bound<'_, PyAny>,
    losses: Option<&PyLossTable>,
    prefill: &str,
    full_recharge: bool,
) -> PyResult<Py<PyAny>> {
    let policy: Policy = from_py(policy)?;
    let prefill: PrefillMode = serde_json::from_value(serde_json::Value::String(prefill.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown prefill mode `{prefill}`")))?;
    if traces.model != model.inner {
        return Err(PyValueError::new_err(
            "trace set was made for a different model",
        ));
    }
    let report = py
        .detach(|| {
            let mut sim = Simulator::new(&model.inner, &hardware.inner)?.with_options(SimOptions {
                prefill,
                full_recharge,
            });
            if let Some(t) = losses {
                sim = sim.with_losses(&t.inner)?;
            }
            let calibration = ndp_moe::prefill_calibration(&model.inner, &traces.traces);
            sim.simulate(&policy, &traces.traces, Some(&calibration))
        })
        .map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "ndp_moe")]
fn ndp_moe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyHardwareConfig>()?;
    m.add_class::<PyTraceSet>()?;
    m.add_class::<PyLossTable>()?;
    m.add_function(wrap_pyfunction!(importance, m)?)?;
    m.add_function(wrap_pyfunction!(place, m)?)?;
    m.add_function(wrap_pyfunction!(prefix_split, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_prefix_split, m)?)?;
    m.add_function(wrap_pyfunction!(expert_exec_time, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
