//! Experiment files: everything a command needs, in one JSON document.

use std::path::{Path, PathBuf};

use ndp_moe::bitwidth::Allocation;
use ndp_moe::sim::{Policy, SimOptions};
use ndp_moe::{Error, GeneratorParams, HardwareConfig, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A built-in geometry by name, or a full inline definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Inline(ModelConfig),
}

impl Default for ModelRef {
    fn default() -> Self {
        ModelRef::Preset("mixtral-8x7b".into())
    }
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let model = match self {
            ModelRef::Preset(name) => ModelConfig::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown model preset `{name}`")))?,
            ModelRef::Inline(m) => m.clone(),
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub seed: u64,
    pub calib_tokens: usize,
    /// A prebuilt table; when absent the table is loaded from or built into
    /// `cache_dir`.
    pub path: Option<PathBuf>,
    pub cache_dir: PathBuf,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            calib_tokens: 64,
            path: None,
            cache_dir: PathBuf::from(".ndp-moe-cache"),
        }
    }
}

/// Values swept by `sweep`. An absent axis keeps each policy's own value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub alpha: Option<Vec<f64>>,
    pub avg_bits: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub rho: Option<Vec<f64>>,
    pub allocation: Option<Vec<Allocation>>,
}

impl SweepAxes {
    fn validate(&self) -> Result<()> {
        let empty = [
            ("alpha", self.alpha.as_ref().map(Vec::len)),
            ("avg_bits", self.avg_bits.as_ref().map(Vec::len)),
            ("k", self.k.as_ref().map(Vec::len)),
            ("rho", self.rho.as_ref().map(Vec::len)),
            ("allocation", self.allocation.as_ref().map(Vec::len)),
        ];
        for (name, len) in empty {
            if len == Some(0) {
                return Err(Error::Config(format!("sweep axis `{name}` is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub hardware: HardwareConfig,
    pub generator: GeneratorParams,
    /// Absent means the standard comparison set for the model.
    pub policies: Option<Vec<Policy>>,
    pub sim: SimOptions,
    pub loss: LossSettings,
    /// Trace file to read instead of generating one.
    pub trace: Option<PathBuf>,
    pub sweep: SweepAxes,
    pub output: OutputPaths,
}

/// ours at 3 and 2 bits, the static baseline, and on-demand offloading, all
/// with the model's default GPU budget.
pub fn standard_policies(model: &ModelConfig) -> Vec<Policy> {
    let k = model.default_gpu_budget();
    vec![
        Policy::ours(3.0, k),
        Policy::ours(2.0, k),
        Policy::MondeStatic { k },
        Policy::GpuOnDemand {
            gpu_cache_capacity: k,
            fetch_bits: 4,
        },
    ]
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.trace.as_mut() {
            fix(p);
        }
        if let Some(p) = self.loss.path.as_mut() {
            fix(p);
        }
        fix(&mut self.loss.cache_dir);
        fix(&mut self.output.dir);
    }

    pub fn model(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    pub fn policies(&self) -> Result<Vec<Policy>> {
        match &self.policies {
            Some(p) => Ok(p.clone()),
            None => Ok(standard_policies(&self.model()?)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        self.hardware.validate()?;
        self.generator.validate()?;
        let policies = self.policies()?;
        if policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        for p in &policies {
            p.validate(&model, &self.hardware)?;
        }
        if self.loss.calib_tokens == 0 {
            return Err(Error::Config("loss.calib_tokens must be >= 1".into()));
        }
        self.sweep.validate()?;
        if self.trace.is_some() && self.sweep.rho.is_some() {
            return Err(Error::Config(
                "sweep axis `rho` needs generated traces but `trace` names a file".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
