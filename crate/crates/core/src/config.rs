//! MoE model geometry and device parameters.
//!
//! Every cost formula in the simulator is driven by these two value types.
//! Both are plain data and can be loaded from JSON; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantized bitwidths an NDP-resident expert may use.
pub const QUANT_BITS: [u32; 4] = [1, 2, 3, 4];

fn default_matrices() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Weight matrices per expert (gate, up, down for Mixtral).
    #[serde(default = "default_matrices")]
    pub matrices_per_expert: usize,
}

impl ModelConfig {
    pub fn mixtral_8x7b() -> Self {
        Self {
            name: "mixtral-8x7b".into(),
            hidden_dim: 4096,
            ffn_dim: 14336,
            num_layers: 32,
            num_experts: 8,
            top_k: 2,
            matrices_per_expert: 3,
        }
    }

    pub fn mixtral_8x22b() -> Self {
        Self {
            name: "mixtral-8x22b".into(),
            hidden_dim: 6144,
            ffn_dim: 16384,
            num_layers: 56,
            num_experts: 8,
            top_k: 2,
            matrices_per_expert: 3,
        }
    }

    /// Looks up a built-in geometry by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mixtral-8x7b" => Some(Self::mixtral_8x7b()),
            "mixtral-8x22b" => Some(Self::mixtral_8x22b()),
            _ => None,
        }
    }

    /// GPU experts per layer used for this geometry when none is configured.
    pub fn default_gpu_budget(&self) -> usize {
        match self.name.as_str() {
            "mixtral-8x22b" => 2,
            _ => (self.num_experts / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("matrices_per_expert", self.matrices_per_expert),
        ];
        for (key, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("{key} must be >= 1")));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k {} exceeds num_experts {}",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }

    /// Parameters of a single expert: `m * d * f`.
    pub fn expert_param_count(&self) -> u64 {
        (self.matrices_per_expert as u64) * (self.hidden_dim as u64) * (self.ffn_dim as u64)
    }

    /// Expert parameters summed over all experts and layers.
    pub fn total_expert_params(&self) -> u64 {
        self.expert_param_count() * self.num_experts as u64 * self.num_layers as u64
    }

    /// Storage size of one expert at `bits` per weight, rounded up to whole bytes.
    ///
    /// `bits` must be a quantized width (1..=4) or the full-precision width
    /// `8 * fp_bytes`.
    pub fn expert_bytes(&self, bits: u32, fp_bytes: u32) -> Result<u64> {
        if !QUANT_BITS.contains(&bits) && bits != 8 * fp_bytes {
            return Err(Error::InvalidBits(bits));
        }
        Ok((self.expert_param_count() * bits as u64).div_ceil(8))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mixtral_8x7b()
    }
}

/// Device rates. All bandwidths are bytes/s, compute in FLOP/s (2 per MAC).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    pub gpu_hbm_bandwidth: f64,
    pub gpu_peak_flops: f64,
    pub pcie_bandwidth: f64,
    pub ndp_bandwidth: f64,
    pub ndp_macs: u64,
    pub ndp_clock: f64,
    /// Bytes per full-precision weight.
    pub fp_bytes: u32,
    /// Seconds of attention and other non-expert work per layer per token.
    pub nonexpert_layer_time: f64,
    /// When set, an NDP MAC unit processes `full_bits / bits` low-bit weights
    /// per cycle, so NDP compute throughput grows as precision drops.
    pub ndp_lowbit_packing: bool,
}

impl Default for HardwareConfig {
    /// H100 + DDR NDP device over PCIe Gen4 x16.
    fn default() -> Self {
        Self {
            gpu_hbm_bandwidth: 3.35e12,
            gpu_peak_flops: 989.4e12,
            pcie_bandwidth: 32e9,
            ndp_bandwidth: 512e9,
            // 64 systolic arrays of 4x4 PEs
            ndp_macs: 64 * 4 * 4,
            ndp_clock: 1e9,
            fp_bytes: 2,
            nonexpert_layer_time: 0.0,
            ndp_lowbit_packing: true,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("gpu_hbm_bandwidth", self.gpu_hbm_bandwidth),
            ("gpu_peak_flops", self.gpu_peak_flops),
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("ndp_bandwidth", self.ndp_bandwidth),
            ("ndp_clock", self.ndp_clock),
        ];
        for (key, value) in rates {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!(
                    "{key} must be positive, got {value}"
                )));
            }
        }
        if self.ndp_macs == 0 {
            return Err(Error::Config("ndp_macs must be positive".into()));
        }
        if self.fp_bytes == 0 {
            return Err(Error::Config("fp_bytes must be positive".into()));
        }
        if !(self.nonexpert_layer_time.is_finite() && self.nonexpert_layer_time >= 0.0) {
            return Err(Error::Config("nonexpert_layer_time must be >= 0".into()));
        }
        Ok(())
    }

    /// Full-precision bits per weight.
    pub fn full_bits(&self) -> u32 {
        8 * self.fp_bytes
    }

    /// Base NDP throughput in FLOP/s at full precision.
    pub fn ndp_compute_throughput(&self) -> f64 {
        2.0 * self.ndp_macs as f64 * self.ndp_clock
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let hw: Self = serde_json::from_str(text)?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}
