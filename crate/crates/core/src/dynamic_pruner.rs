//! Layer-level dynamic pruning. Each surviving visual token carries an
//! importance score that is an exponential moving average, across update
//! layers, of a rank-based weight scaled by the layer's attention
//! confidence. At prune layers only the highest-scoring fraction survives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::TokenSet;
use crate::model::LayerAttention;
use crate::scoring::TokenScoreVector;

pub const DEFAULT_BETA: f64 = 0.2;
pub const DEFAULT_RETENTION: f64 = 0.9;
pub const DEFAULT_STEEPNESS: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Prune layers of a 32-layer backbone.
pub const REFERENCE_PRUNE_LAYERS: [usize; 4] = [5, 10, 15, 20];
pub const REFERENCE_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScheduleConfig {
    pub update_layers: TokenSet,
    pub prune_layers: TokenSet,
    pub retention: f64,
    pub steepness: f64,
    pub epsilon: f64,
    pub beta: f64,
}

impl LayerScheduleConfig {
    /// Updates at every layer from 3 on; prune layers at the reference
    /// relative depths, rescaled to `num_layers`.
    pub fn for_depth(num_layers: usize) -> Self {
        Self {
            update_layers: (3..=num_layers).collect(),
            prune_layers: scaled_prune_layers(num_layers),
            retention: DEFAULT_RETENTION,
            steepness: DEFAULT_STEEPNESS,
            epsilon: DEFAULT_EPSILON,
            beta: DEFAULT_BETA,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRunConfig(m));
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return bad(format!("retention {} outside (0, 1]", self.retention));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", self.beta));
        }
        if !(self.steepness > 0.0) || !(self.epsilon > 0.0) {
            return bad("steepness and epsilon must be positive".into());
        }
        if let Some(&l) = self.update_layers.iter().chain(&self.prune_layers).find(|&&l| l < 3 || l > num_layers) {
            return bad(format!("scheduled layer {l} outside 3..={num_layers}"));
        }
        if let Some(&l) = self.prune_layers.iter().find(|l| !self.update_layers.contains(l)) {
            if self.update_layers.range(..l).next().is_none() {
                return bad(format!("prune layer {l} precedes every update layer"));
            }
        }
        Ok(())
    }
}

/// `{5, 10, 15, 20}` at the same relative depth in a `num_layers` model,
/// never earlier than layer 3.
pub fn scaled_prune_layers(num_layers: usize) -> TokenSet {
    REFERENCE_PRUNE_LAYERS
        .iter()
        .map(|&l| {
            let scaled = (l * num_layers + REFERENCE_DEPTH / 2) / REFERENCE_DEPTH;
            scaled.clamp(3, num_layers)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalized `sigmoid(-k * rank)` weights, rank 1 being the highest score
/// (ties to the lower index). Returned in the score vector's index order.
pub fn rank_weight(scores: &TokenScoreVector, steepness: f64) -> Result<Vec<(usize, f64)>> {
    if scores.is_empty() {
        return Err(Error::EmptyTokenSet);
    }
    let mut ranks = BTreeMap::new();
    for (r, idx) in scores.ranking().into_iter().enumerate() {
        ranks.insert(idx, r + 1);
    }
    let raw: Vec<(usize, f64)> = ranks
        .into_iter()
        .map(|(i, r)| (i, sigmoid(-steepness * r as f64)))
        .collect();
    let total: f64 = raw.iter().map(|&(_, w)| w).sum();
    Ok(raw.into_iter().map(|(i, w)| (i, w / total)).collect())
}

/// `mean / (std + epsilon)` over every attention weight of the layer
/// (all heads, all active query rows and key columns).
pub fn layer_confidence(att: &LayerAttention, epsilon: f64) -> f64 {
    let count = att.heads.iter().map(|h| h.len()).sum::<usize>() as f64;
    if count == 0.0 {
        return 0.0;
    }
    let mean = att.heads.iter().map(|h| h.sum()).sum::<f64>() / count;
    let var = att
        .heads
        .iter()
        .flat_map(|h| h.iter())
        .map(|&a| (a - mean) * (a - mean))
        .sum::<f64>()
        / count;
    mean / (var.sqrt() + epsilon)
}

/// Per-token EMA importance of the visual tokens still in flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    scores: BTreeMap<usize, f64>,
    last_updated: Option<usize>,
    beta: f64,
}

impl ImportanceState {
    /// All tokens start at zero.
    pub fn new(tokens: impl IntoIterator<Item = usize>, beta: f64) -> Self {
        Self {
            scores: tokens.into_iter().map(|i| (i, 0.0)).collect(),
            last_updated: None,
            beta,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score(&self, token: usize) -> Option<f64> {
        self.scores.get(&token).copied()
    }

    pub fn tokens(&self) -> TokenSet {
        self.scores.keys().copied().collect()
    }

    pub fn last_updated(&self) -> Option<usize> {
        self.last_updated
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// One EMA step with externally computed per-token instant scores.
    pub fn apply(&mut self, instant: &[(usize, f64)], layer: usize) {
        let beta = self.beta;
        for &(i, s) in instant {
            if let Some(acc) = self.scores.get_mut(&i) {
                *acc = (1.0 - beta) * *acc + beta * s;
            }
        }
        self.last_updated = Some(layer);
    }

    /// Keeps the `ceil(retention * n)` highest-scoring tokens (ties to the
    /// lower index) and forgets the rest. Returns the kept tokens.
    pub fn prune(&mut self, retention: f64) -> TokenSet {
        let n = self.scores.len();
        let keep = retained_count(n, retention);
        if keep >= n {
            return self.tokens();
        }
        let mut order: Vec<(usize, f64)> = self.scores.iter().map(|(&i, &s)| (i, s)).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let kept: TokenSet = order[..keep].iter().map(|&(i, _)| i).collect();
        self.scores.retain(|i, _| kept.contains(i));
        kept
    }
}

/// `ceil(retention * n)`, robust to the representation error of `retention`.
pub fn retained_count(n: usize, retention: f64) -> usize {
    let exact = retention * n as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Instant importance `rank_weight * layer_confidence` for the tokens in
/// `state`, scored by this layer's task attention.
pub fn instant_importance(
    state: &ImportanceState,
    scores: &TokenScoreVector,
    att: &LayerAttention,
    cfg: &LayerScheduleConfig,
) -> Result<Vec<(usize, f64)>> {
    let scored = scores.restricted(&state.tokens());
    let weights = rank_weight(&scored, cfg.steepness)?;
    let conf = layer_confidence(att, cfg.epsilon);
    Ok(weights.into_iter().map(|(i, w)| (i, w * conf)).collect())
}

pub fn update_importance(
    state: &mut ImportanceState,
    scores: &TokenScoreVector,
    att: &LayerAttention,
    layer: usize,
    cfg: &LayerScheduleConfig,
) -> Result<()> {
    if !cfg.update_layers.contains(&layer) {
        return Err(Error::LayerNotScheduled(layer));
    }
    if state.is_empty() {
        state.last_updated = Some(layer);
        return Ok(());
    }
    let instant = instant_importance(state, scores, att, cfg)?;
    state.apply(&instant, layer);
    Ok(())
}

/// Prunes `state` at a prune layer; text and action tokens are untouched by
/// construction because the state only holds visual tokens.
pub fn layer_prune(state: &mut ImportanceState, layer: usize, cfg: &LayerScheduleConfig) -> Result<TokenSet> {
    if !cfg.prune_layers.contains(&layer) {
        return Err(Error::LayerNotScheduled(layer));
    }
    Ok(state.prune(cfg.retention))
}
