//! Task attention score of visual tokens, top-k selection and the early/final
//! layer hit-rate diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{TokenLayout, TokenSet};
use crate::model::{AttentionRecord, LayerAttention};

/// Which attention entries count as "visual token to text token".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionDirection {
    /// Text-query rows over visual-key columns, `A[t_j, V_i]`. The only
    /// direction carrying mass in a causal decoder with text after the image.
    #[default]
    TextToVisual,
    /// Visual-query rows over text-key columns, `A[V_i, t_j]`.
    VisualToText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    Layer(usize),
    Aggregate,
}

/// One score per active visual token, sorted by original index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreVector {
    pub entries: Vec<(usize, f64)>,
    pub source: ScoreSource,
}

impl TokenScoreVector {
    pub fn new(mut entries: Vec<(usize, f64)>, source: ScoreSource) -> Self {
        entries.sort_by_key(|&(i, _)| i);
        Self { entries, source }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .ok()
            .map(|k| self.entries[k].1)
    }

    pub fn indices(&self) -> TokenSet {
        self.entries.iter().map(|&(i, _)| i).collect()
    }

    /// Entries whose index is in `keep`.
    pub fn restricted(&self, keep: &TokenSet) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .copied()
                .filter(|(i, _)| keep.contains(i))
                .collect(),
            source: self.source,
        }
    }

    /// Positions in descending score order, ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<(usize, f64)> = self.entries.clone();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        order.into_iter().map(|(i, _)| i).collect()
    }
}

/// Average attention between each active visual token and the text tokens,
/// over all heads and text positions of one layer.
pub fn layer_task_score(
    att: &LayerAttention,
    layout: &TokenLayout,
    layer: usize,
    direction: AttentionDirection,
) -> Result<TokenScoreVector> {
    let text = layout.text_range();
    if text.is_empty() {
        return Err(Error::EmptyTextRange);
    }
    let text_rows: Vec<usize> = text
        .clone()
        .map(|t| att.row_of(t).ok_or(Error::NonPrunableDropped(t)))
        .collect::<Result<_>>()?;
    let visual_rows: Vec<(usize, usize)> = att
        .positions
        .iter()
        .enumerate()
        .take_while(|(_, &p)| layout.is_visual(p))
        .map(|(r, &p)| (r, p))
        .collect();
    let norm = 1.0 / (att.heads.len() * text_rows.len()) as f64;
    let mut sums = vec![0.0; visual_rows.len()];
    for head in &att.heads {
        for &t in &text_rows {
            for (acc, &(v, _)) in sums.iter_mut().zip(&visual_rows) {
                *acc += match direction {
                    AttentionDirection::TextToVisual => head[[t, v]],
                    AttentionDirection::VisualToText => head[[v, t]],
                };
            }
        }
    }
    let entries = visual_rows
        .iter()
        .zip(sums)
        .map(|(&(_, p), s)| (p, s * norm))
        .collect();
    Ok(TokenScoreVector::new(entries, ScoreSource::Layer(layer)))
}

pub fn task_attention_score(
    record: &AttentionRecord,
    layout: &TokenLayout,
    layer: usize,
    direction: AttentionDirection,
) -> Result<TokenScoreVector> {
    layer_task_score(record.layer(layer)?, layout, layer, direction)
}

/// The `k` highest-scoring positions in rank order. `k` clamps to the population.
pub fn top_k_tokens(scores: &TokenScoreVector, k: usize) -> Vec<usize> {
    let mut ranking = scores.ranking();
    ranking.truncate(k);
    ranking
}

pub fn top_k_set(scores: &TokenScoreVector, k: usize) -> TokenSet {
    top_k_tokens(scores, k).into_iter().collect()
}

/// Fraction of the final layer's top-k that appears in the union of the
/// early layers' top-k sets.
pub fn hit_rate_from_scores(early: &[&TokenScoreVector], last: &TokenScoreVector, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let union: TokenSet = early.iter().flat_map(|s| top_k_tokens(s, k)).collect();
    let hits = top_k_tokens(last, k)
        .into_iter()
        .filter(|i| union.contains(i))
        .count();
    hits as f64 / k as f64
}

pub fn hit_rate(
    early_layers: &TokenSet,
    final_layer: usize,
    record: &AttentionRecord,
    layout: &TokenLayout,
    k: usize,
    direction: AttentionDirection,
) -> Result<f64> {
    let early = early_layers
        .iter()
        .map(|&l| task_attention_score(record, layout, l, direction))
        .collect::<Result<Vec<_>>>()?;
    let last = task_attention_score(record, layout, final_layer, direction)?;
    let refs: Vec<&TokenScoreVector> = early.iter().collect();
    Ok(hit_rate_from_scores(&refs, &last, k))
}
