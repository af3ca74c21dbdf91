//! Scheduling and simulation of Mixture-of-Experts decoding on a GPU paired
//! with a near-data-processing (NDP) memory device.
//!
//! The pipeline per sequence: collect prefill routing statistics
//! ([`stats`]), pin the most important experts on the GPU ([`placement`]),
//! give the NDP-resident rest mixed low-bit precisions ([`bitwidth`]), and
//! cost the decode phase with a roofline model ([`sim`]). [`trace`] provides
//! the routing trace format and a synthetic generator.

pub mod bitwidth;
pub mod config;
pub mod error;
pub mod placement;
pub mod sim;
pub mod stats;
pub mod trace;

pub use bitwidth::{
    assign_bits, build_loss_table, delta_gains, oracle_prefix_split, oracle_unrestricted,
    prefix_split, Allocation, BitwidthPlan, BlockCounts, DeltaGains, LayerBits, LossTable,
};
pub use config::{HardwareConfig, ModelConfig};
pub use error::{Error, Result};
pub use placement::{place, static_frequency_place, Device, PlacementPlan};
pub use sim::{
    expert_exec_time, prefill_calibration, Policy, PrefillMode, SequenceReport, SimOptions,
    SimReport, Simulator,
};
pub use stats::{importance, sequence_similarity, stage_similarity, ImportanceScores, StageStats};
pub use trace::{
    generate_traces, read_traces, write_traces, GeneratorParams, SequenceTrace, TokenRouting,
    TraceHeader,
};
