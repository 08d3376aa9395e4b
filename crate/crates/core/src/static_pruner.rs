//! Action-level static pruning: before the third layer, keep the union of
//! the previous generation's top tokens, the patches that changed since a
//! velocity-selected reference frame, and the top tokens of the first two
//! layers of the current generation. Everything else is dropped.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, PatchFeatureGrid};
use crate::layout::{TokenLayout, TokenSet, View};
use crate::scoring::{top_k_set, ScoreSource, TokenScoreVector};

/// Minimum ring-buffer depth; the offset formula reaches 11 at rest.
pub const MIN_HISTORY: usize = 12;

/// Which reading of the reference-frame offset formula to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetFormula {
    /// `floor(-16/3 * v/6 + 22/3) + 4`
    #[default]
    Scaled,
    /// `floor(-16/3 * v + 22/3) + 4`
    Unscaled,
}

/// How the previous generation's per-layer scores collapse into one score per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalAggregation {
    /// Mean over every layer the token was still active in.
    #[default]
    MeanOverLayers,
    /// Final-layer score only; tokens pruned before the last layer get none.
    LastLayer,
}

pub fn aggregate_scores(per_layer: &[TokenScoreVector], mode: GlobalAggregation) -> TokenScoreVector {
    match mode {
        GlobalAggregation::LastLayer => {
            let entries = per_layer.last().map(|s| s.entries.clone()).unwrap_or_default();
            TokenScoreVector::new(entries, ScoreSource::Aggregate)
        }
        GlobalAggregation::MeanOverLayers => {
            let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for scores in per_layer {
                for &(i, s) in &scores.entries {
                    let e = acc.entry(i).or_insert((0.0, 0));
                    e.0 += s;
                    e.1 += 1;
                }
            }
            let entries = acc.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect();
            TokenScoreVector::new(entries, ScoreSource::Aggregate)
        }
    }
}

/// Aggregate token scores of the previous generation.
#[derive(Debug, Clone, Default)]
pub struct GlobalAttentionMemory {
    scores: Option<TokenScoreVector>,
    generation: u64,
}

impl GlobalAttentionMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_none()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn scores(&self) -> Option<&TokenScoreVector> {
        self.scores.as_ref()
    }

    pub fn store(&mut self, scores: TokenScoreVector) {
        self.scores = Some(scores);
        self.generation += 1;
    }
}

/// Top-`k_g` tokens by the stored aggregate score, restricted to `candidates`.
pub fn select_global(memory: &GlobalAttentionMemory, candidates: &TokenSet, k_g: usize) -> TokenSet {
    match memory.scores() {
        None => TokenSet::new(),
        Some(s) => top_k_set(&s.restricted(candidates), k_g),
    }
}

/// Ring buffer of recent frames, oldest first.
#[derive(Debug, Clone)]
pub struct FrameHistory {
    capacity: usize,
    frames: VecDeque<(usize, Frame)>,
}

impl FrameHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(MIN_HISTORY),
            frames: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, step: usize, frame: Frame) -> Result<()> {
        if let Some(&(last, _)) = self.frames.back() {
            if step <= last {
                return Err(Error::Invariant(format!(
                    "frame step {step} does not follow {last}"
                )));
            }
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back((step, frame));
        Ok(())
    }

    pub fn get(&self, step: usize) -> Option<&Frame> {
        self.frames.iter().find(|(s, _)| *s == step).map(|(_, f)| f)
    }

    pub fn oldest(&self) -> Option<(usize, &Frame)> {
        self.frames.front().map(|(s, f)| (*s, f))
    }

    /// Frames strictly older than `step`.
    pub fn past_len(&self, step: usize) -> usize {
        self.frames.iter().filter(|(s, _)| *s < step).count()
    }

    /// The frame `offset` steps before `step`, or the oldest one held.
    pub fn reference(&self, step: usize, offset: usize) -> Option<(usize, &Frame)> {
        step.checked_sub(offset)
            .and_then(|s| self.get(s).map(|f| (s, f)))
            .or_else(|| self.oldest())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => {
            log::debug!("zero-norm patch in similarity; treating as dissimilar");
            0.0
        }
        (false, false) => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

/// Cosine similarity of corresponding patches, row-major `n*n` values.
pub fn patch_similarity(a: &PatchFeatureGrid, b: &PatchFeatureGrid) -> Result<Vec<f64>> {
    if a.n() != b.n() || a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "grids {}x{}/{} and {}x{}/{}",
            a.n(),
            a.n(),
            a.dim(),
            b.n(),
            b.n(),
            b.dim()
        )));
    }
    Ok((0..a.num_patches())
        .map(|p| cosine(a.patch(p), b.patch(p)))
        .collect())
}

/// Reference-frame offset from translational speed, clamped to `[1, history_len]`.
pub fn frame_offset(v_t: f64, history_len: usize, formula: OffsetFormula) -> usize {
    let raw = frame_offset_unclamped(v_t, formula);
    raw.clamp(1, history_len.max(1) as i64) as usize
}

pub fn frame_offset_unclamped(v_t: f64, formula: OffsetFormula) -> i64 {
    let v = match formula {
        OffsetFormula::Scaled => v_t / 6.0,
        OffsetFormula::Unscaled => v_t,
    };
    // (22 - 16 v) / 3 keeps integer-valued points exact before the floor.
    (((22.0 - 16.0 * v) / 3.0) + 1e-9).floor() as i64 + 4
}

/// Up to `k_d` patches whose similarity falls below `tau`, lowest first (ties
/// to the lower patch index). Returned as flat patch indices.
pub fn lowest_similarity(sim: &[f64], tau: f64, k_d: usize) -> Vec<usize> {
    let mut candidates: Vec<(usize, f64)> = sim
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, s)| s < tau)
        .collect();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    candidates.truncate(k_d);
    candidates.into_iter().map(|(p, _)| p).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicParams {
    pub tau: f64,
    pub k_dynamic: usize,
    pub formula: OffsetFormula,
}

/// Dynamic tokens of one view: patches of the current frame (already pushed
/// into `history` at `current_step`) that changed most against the frame
/// `frame_offset(v_t)` steps earlier.
pub fn select_dynamic(
    history: &FrameHistory,
    layout: &TokenLayout,
    view: View,
    current_step: usize,
    v_t: f64,
    params: &DynamicParams,
) -> Result<TokenSet> {
    let Some(range) = layout.view_range(view) else {
        return Ok(TokenSet::new());
    };
    let current = history
        .get(current_step)
        .and_then(|f| f.get(&view))
        .ok_or_else(|| Error::Invariant(format!("no frame for step {current_step}")))?;
    let offset = frame_offset(v_t, history.past_len(current_step), params.formula);
    let Some(reference) = history.reference(current_step, offset).and_then(|(_, f)| f.get(&view)) else {
        return Ok(TokenSet::new());
    };
    if current.num_patches() != range.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches for a view range of {}",
            current.num_patches(),
            range.len()
        )));
    }
    let sim = patch_similarity(reference, current)?;
    Ok(lowest_similarity(&sim, params.tau, params.k_dynamic)
        .into_iter()
        .map(|p| range.start + p)
        .collect())
}

/// Union of the per-layer top-`k_base` sets of the first two layers, restricted to `candidates`.
pub fn select_local(
    layer1: &TokenScoreVector,
    layer2: &TokenScoreVector,
    candidates: &TokenSet,
    k_base: usize,
) -> TokenSet {
    let mut set = top_k_set(&layer1.restricted(candidates), k_base);
    set.extend(top_k_set(&layer2.restricted(candidates), k_base));
    set
}

/// Where a retained token came from. A token claimed by several sources
/// is attributed to the first in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Global,
    Dynamic,
    Local,
    /// Text and action tokens.
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticPruneResult {
    pub v_global: TokenSet,
    pub v_dynamic: TokenSet,
    pub v_local: TokenSet,
    /// Retained visual tokens plus every text and action token.
    pub v_retain: TokenSet,
    pub v_prune: TokenSet,
    pub provenance: BTreeMap<usize, Stage>,
}

impl StaticPruneResult {
    /// Nothing pruned.
    pub fn keep_all(layout: &TokenLayout) -> Self {
        let v_retain = layout.all();
        let provenance = v_retain
            .iter()
            .map(|&i| (i, if layout.is_visual(i) { Stage::Local } else { Stage::Always }))
            .collect();
        Self {
            v_global: TokenSet::new(),
            v_dynamic: TokenSet::new(),
            v_local: layout.visual(),
            v_retain,
            v_prune: TokenSet::new(),
            provenance,
        }
    }

    pub fn retained_visual(&self) -> usize {
        self.provenance.values().filter(|s| **s != Stage::Always).count()
    }

    pub fn stage_count(&self, stage: Stage) -> usize {
        self.provenance.values().filter(|s| **s == stage).count()
    }
}

pub fn compose_static(
    v_global: TokenSet,
    v_dynamic: TokenSet,
    v_local: TokenSet,
    layout: &TokenLayout,
) -> Result<StaticPruneResult> {
    for &i in v_global.iter().chain(&v_dynamic).chain(&v_local) {
        if !layout.is_visual(i) {
            return Err(Error::NotVisual(i));
        }
    }
    let mut provenance = BTreeMap::new();
    for (set, stage) in [(&v_global, Stage::Global), (&v_dynamic, Stage::Dynamic), (&v_local, Stage::Local)] {
        for &i in set {
            provenance.entry(i).or_insert(stage);
        }
    }
    for i in layout.non_prunable() {
        provenance.insert(i, Stage::Always);
    }
    let v_retain: TokenSet = provenance.keys().copied().collect();
    let v_prune = layout.visual().difference(&v_retain).copied().collect();
    Ok(StaticPruneResult {
        v_global,
        v_dynamic,
        v_local,
        v_retain,
        v_prune,
        provenance,
    })
}
