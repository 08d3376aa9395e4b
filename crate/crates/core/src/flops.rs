//! Analytical FLOPs accounting. A layer over `L` tokens with hidden width
//! `D` and feed-forward parameter `M` costs `4LD^2 + 2L^2D + 2LDM`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn layer_flops(tokens: u64, hidden: u64, ffn: u64) -> u128 {
    let (l, d, m) = (tokens as u128, hidden as u128, ffn as u128);
    4 * l * d * d + 2 * l * l * d + 2 * l * d * m
}

/// Linear estimate `1 - (N-2)/N * static_retention * dynamic_avg`: two
/// unpruned layers are dropped from the count and the remaining layers are
/// scaled by the token retention alone.
pub fn paper_reduction_estimate(num_layers: usize, static_retention: f64, dynamic_avg: f64) -> f64 {
    let n = num_layers as f64;
    1.0 - (n - 2.0) / n * static_retention * dynamic_avg
}

/// Mean of the per-stage token multipliers `1, r, r^2, ..., r^stages`.
pub fn dynamic_average_multiplier(retention: f64, stages: usize) -> f64 {
    (0..=stages).map(|i| retention.powi(i as i32)).sum::<f64>() / (stages + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens: u64,
    pub flops: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub layers: Vec<LayerCost>,
    pub full_flops: u128,
    pub pruned_flops: u128,
    pub reduction_fraction: f64,
}

/// Exact cost of a per-layer token trajectory against running every layer
/// at `full_tokens`.
pub fn exact_reduction(
    trajectory: &[u64],
    full_tokens: u64,
    num_layers: usize,
    hidden: u64,
    ffn: u64,
) -> Result<FlopsBreakdown> {
    if trajectory.len() != num_layers {
        return Err(Error::ShapeMismatch(format!(
            "trajectory has {} layers, model has {num_layers}",
            trajectory.len()
        )));
    }
    if let Some(&t) = trajectory.iter().find(|&&t| t > full_tokens) {
        return Err(Error::ShapeMismatch(format!(
            "layer token count {t} exceeds the full count {full_tokens}"
        )));
    }
    let layers: Vec<LayerCost> = trajectory
        .iter()
        .enumerate()
        .map(|(i, &t)| LayerCost {
            layer: i + 1,
            tokens: t,
            flops: layer_flops(t, hidden, ffn),
        })
        .collect();
    let full_flops = layer_flops(full_tokens, hidden, ffn) * num_layers as u128;
    let pruned_flops: u128 = layers.iter().map(|c| c.flops).sum();
    let reduction_fraction = if full_flops == 0 {
        0.0
    } else {
        1.0 - pruned_flops as f64 / full_flops as f64
    };
    Ok(FlopsBreakdown {
        layers,
        full_flops,
        pruned_flops,
        reduction_fraction,
    })
}

/// Token counts per layer for the reference schedule: `full` tokens in the
/// first two layers, `static_kept` from layer 3, multiplied by `retention`
/// after each prune layer (rounded up, like the pruner).
pub fn scheduled_trajectory(
    num_layers: usize,
    full: u64,
    static_kept: u64,
    prune_layers: &[usize],
    retention: f64,
) -> Vec<u64> {
    let mut current = static_kept;
    (1..=num_layers)
        .map(|l| {
            if l <= 2 {
                return full;
            }
            let here = current;
            if prune_layers.contains(&l) {
                current = crate::dynamic_pruner::retained_count(current as usize, retention) as u64;
            }
            here
        })
        .collect()
}
