//! Per-layer GPU/NDP expert partition.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{ImportanceScores, StageStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Gpu,
    Ndp,
}

/// `hot[l]` holds exactly `k` expert ids pinned on the GPU at full precision,
/// `cold[l]` the rest, which execute on the NDP tier. Both lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub hot: Vec<Vec<usize>>,
    pub cold: Vec<Vec<usize>>,
    pub k: usize,
}

impl PlacementPlan {
    /// Every expert on NDP (the layout before any migration).
    pub fn all_cold(num_layers: usize, num_experts: usize) -> Self {
        Self {
            hot: vec![Vec::new(); num_layers],
            cold: vec![(0..num_experts).collect(); num_layers],
            k: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hot.len()
    }

    pub fn device(&self, layer: usize, expert: usize) -> Device {
        if self.hot[layer].binary_search(&expert).is_ok() {
            Device::Gpu
        } else {
            Device::Ndp
        }
    }

    /// Experts that must be copied to the GPU to move from `prev` to `self`.
    /// Experts dropped from the GPU need no transfer since NDP keeps every
    /// expert. With no previous plan every hot expert is transferred.
    pub fn migrations_from(&self, prev: Option<&PlacementPlan>) -> usize {
        match prev {
            None => self.hot.iter().map(Vec::len).sum(),
            Some(prev) => self
                .hot
                .iter()
                .zip(&prev.hot)
                .map(|(new, old)| new.iter().filter(|e| old.binary_search(e).is_err()).count())
                .sum(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "expert", "device"])?;
        for l in 0..self.num_layers() {
            let n = self.hot[l].len() + self.cold[l].len();
            for e in 0..n {
                let dev = match self.device(l, e) {
                    Device::Gpu => "gpu",
                    Device::Ndp => "ndp",
                };
                w.write_record([l.to_string(), e.to_string(), dev.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn top_k_rows(rows: &[Vec<f64>], k: usize) -> Result<PlacementPlan> {
    let num_experts = rows.first().map_or(0, Vec::len);
    if k > num_experts {
        return Err(Error::BudgetTooLarge {
            k,
            experts: num_experts,
        });
    }
    let mut hot = Vec::with_capacity(rows.len());
    let mut cold = Vec::with_capacity(rows.len());
    for row in rows {
        let mut ids: Vec<usize> = (0..row.len()).collect();
        ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut h = ids[..k].to_vec();
        let mut c = ids[k..].to_vec();
        h.sort_unstable();
        c.sort_unstable();
        hot.push(h);
        cold.push(c);
    }
    Ok(PlacementPlan { hot, cold, k })
}

/// Pins the `k` highest-scoring experts of each layer; ties go to the lower id.
pub fn place(scores: &ImportanceScores, k: usize) -> Result<PlacementPlan> {
    top_k_rows(&scores.scores, k)
}

/// Context-agnostic plan from global activation frequencies of a calibration
/// set, shared by every sequence.
pub fn static_frequency_place(calibration: &StageStats, k: usize) -> Result<PlacementPlan> {
    let rows: Vec<Vec<f64>> = (0..calibration.num_layers())
        .map(|l| calibration.frequencies(l))
        .collect();
    top_k_rows(&rows, k)
}
