//! Second-order MSB-flip sensitivity and per-layer protection budgets.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bitcodec;
use crate::error::{Error, Result};
use crate::nn::{self, Batch, NoiseSpec, QuantizedModel};
use crate::stats;

/// `S = g·Δ + ½·h·Δ²` for an MSB deviation `Δ`.
pub fn taylor_score(g: f64, h: f64, delta: f64) -> f64 {
    g * delta + 0.5 * h * delta * delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    /// Dequantized deviation caused by flipping the current MSB.
    pub delta_msb: Vec<f64>,
    pub score: Vec<f64>,
}

impl LayerSensitivity {
    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub layers: Vec<LayerSensitivity>,
}

impl SensitivityMap {
    /// Per-layer aggregate, see [`layer_sensitivity`].
    pub fn layer_scores(&self) -> Vec<f64> {
        layer_sensitivity(self)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["layer", "index", "g", "h", "delta_msb", "s"]).map_err(io)?;
        for (l, layer) in self.layers.iter().enumerate() {
            for i in 0..layer.len() {
                w.write_record([
                    l.to_string(),
                    i.to_string(),
                    layer.g[i].to_string(),
                    layer.h[i].to_string(),
                    layer.delta_msb[i].to_string(),
                    layer.score[i].to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Clean-model Taylor sensitivity of every weight to its own MSB flip.
pub fn weight_sensitivity(model: &QuantizedModel, val_set: &Batch) -> Result<SensitivityMap> {
    let g = nn::backward(model, val_set, NoiseSpec::CLEAN, 0)?;
    let h = nn::curvature_diag(model, val_set)?;
    Ok(from_derivatives(model, g, h))
}

pub(crate) fn from_derivatives(model: &QuantizedModel, g: Vec<Vec<f64>>, h: Vec<Vec<f64>>) -> SensitivityMap {
    let layers = g
        .into_iter()
        .zip(h)
        .enumerate()
        .map(|(l, (g, h))| {
            let tensor = model.weights(l);
            let bits = tensor.bits();
            let delta_msb: Vec<f64> = tensor
                .codes()
                .iter()
                .map(|&c| {
                    let flipped = bitcodec::flip_bit(c, bits - 1, bits).expect("valid code");
                    tensor.scale() * (flipped - c) as f64
                })
                .collect();
            let score = (0..g.len()).map(|i| taylor_score(g[i], h[i], delta_msb[i])).collect();
            LayerSensitivity { g, h, delta_msb, score }
        })
        .collect();
    SensitivityMap { layers }
}

/// `S̄ = (Q50 + Q75) / 2` of each layer's scores.
pub fn layer_sensitivity(map: &SensitivityMap) -> Vec<f64> {
    map.layers.iter().map(|l| layer_score(&l.score)).collect()
}

pub fn layer_score(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    (stats::quantile_sorted(&sorted, 0.5) + stats::quantile_sorted(&sorted, 0.75)) / 2.0
}

/// `⌈α·n⌉`, tolerant of the rounding noise in `α·n` (0.01 · 18000 must be 180).
pub fn protected_count(alpha: f64, total: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("protection rate {alpha} outside [0, 1]")));
    }
    let exact = alpha * total as f64;
    let count = (exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize;
    Ok(count.min(total))
}

/// Greedy fill: the most sensitive layers take the whole budget first.
/// Ties in `S̄` go to the lower layer index.
pub fn assign_budget(alpha: f64, layer_scores: &[f64], sizes: &[usize]) -> Result<Vec<usize>> {
    if layer_scores.len() != sizes.len() {
        return Err(Error::input("one score per layer required"));
    }
    let mut remaining = protected_count(alpha, sizes.iter().sum())?;
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| layer_scores[b].total_cmp(&layer_scores[a]).then(a.cmp(&b)));
    let mut budget = vec![0; sizes.len()];
    for l in order {
        let take = remaining.min(sizes[l]);
        budget[l] = take;
        remaining -= take;
    }
    Ok(budget)
}

/// Even split of the same total, capped per layer. Capped layers hand their
/// excess to the others; a leftover that does not divide evenly goes one
/// weight at a time to the largest layers.
pub fn even_assign_budget(alpha: f64, sizes: &[usize]) -> Result<Vec<usize>> {
    let mut remaining = protected_count(alpha, sizes.iter().sum())?;
    let mut by_size: Vec<usize> = (0..sizes.len()).collect();
    by_size.sort_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(a.cmp(&b)));
    let mut budget = vec![0; sizes.len()];
    for (k, &l) in by_size.iter().enumerate() {
        let share = remaining / (sizes.len() - k);
        budget[l] = share.min(sizes[l]);
        remaining -= budget[l];
    }
    for &l in by_size.iter().rev() {
        if remaining == 0 {
            break;
        }
        if budget[l] < sizes[l] {
            budget[l] += 1;
            remaining -= 1;
        }
    }
    Ok(budget)
}
