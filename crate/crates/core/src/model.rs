//! Minimal pre-norm decoder-only transformer over a compacted active token
//! set. Pruned positions are physically removed from the hidden-state matrix,
//! so every matmul shrinks with the retained set. Rotary position indices are
//! the tokens' original sequence positions and survive pruning unchanged.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{TokenLayout, TokenSet};

/// Number of scalar outputs per action slot (dx, dy, dz, droll, dpitch, dyaw, gripper).
pub const ACTION_DIM: usize = 7;

pub const ROPE_BASE: f64 = 10_000.0;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 32-layer configuration used for the benchmark-scale preset.
    pub fn bench() -> Self {
        Self {
            num_layers: 32,
            hidden_dim: 64,
            num_heads: 8,
            ffn_dim: 128,
            seed: 7,
        }
    }

    /// Shallow configuration for fast tests.
    pub fn small() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers < 3 {
            return bad(format!("num_layers must be at least 3, got {}", self.num_layers));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return bad("all dimensions must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary positions", self.head_dim()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Additive pre-softmax bias on attention logits. `key[p]` is added to every
/// logit whose key sits at original position `p`, for query rows at original
/// positions `>= query_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBias {
    pub key: Vec<f64>,
    pub query_start: usize,
}

impl AttentionBias {
    pub fn zeros(seq_len: usize, query_start: usize) -> Self {
        Self {
            key: vec![0.0; seq_len],
            query_start,
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.key.len() != seq_len {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries for a sequence of {}",
                self.key.len(),
                seq_len
            )));
        }
        if let Some(bad) = self.key.iter().find(|b| !b.is_finite()) {
            return Err(Error::ShapeMismatch(format!("non-finite bias value {bad}")));
        }
        Ok(())
    }
}

/// Attention probabilities of one layer, one matrix per head, over the
/// active positions (`positions[i]` is the original index of row/column i).
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub heads: Vec<Array2<f64>>,
    pub positions: Vec<usize>,
}

impl LayerAttention {
    pub fn active_len(&self) -> usize {
        self.positions.len()
    }

    /// Active-row index of an original position.
    pub fn row_of(&self, original: usize) -> Option<usize> {
        self.positions.binary_search(&original).ok()
    }
}

/// Captured attention for a subset of layers (1-based layer ids).
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub layers: BTreeMap<usize, LayerAttention>,
}

impl AttentionRecord {
    pub fn layer(&self, layer: usize) -> Result<&LayerAttention> {
        self.layers.get(&layer).ok_or(Error::LayerNotCaptured(layer))
    }

    pub fn captured_layers(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }
}

/// Projection weights of one layer; activations multiply from the left.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    layers: Vec<LayerWeights>,
    action_head: Array2<f64>,
    checksum: u64,
}

/// Hidden states of the active tokens after `layers_done` layers. Doubles as
/// the checkpoint consumed by [`Model::forward_resume`].
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub hidden: Array2<f64>,
    pub positions: Vec<usize>,
    pub layers_done: usize,
    /// Multiply-accumulate count of every matmul executed so far.
    pub macs: u64,
    /// Active sequence length at each executed layer.
    pub layer_lens: Vec<usize>,
    model_checksum: u64,
}

impl ForwardState {
    pub fn active(&self) -> TokenSet {
        self.positions.iter().copied().collect()
    }

    /// Drops every active row whose original position is not in `keep`.
    pub fn retain(&mut self, keep: &TokenSet) -> Result<()> {
        for &p in keep {
            if self.positions.binary_search(&p).is_err() {
                return Err(Error::CheckpointMismatch(format!(
                    "position {p} is not active in the checkpoint"
                )));
            }
        }
        let rows: Vec<usize> = self
            .positions
            .iter()
            .enumerate()
            .filter(|(_, p)| keep.contains(p))
            .map(|(i, _)| i)
            .collect();
        if rows.len() == self.positions.len() {
            return Ok(());
        }
        self.hidden = self.hidden.select(Axis(0), &rows);
        self.positions = rows.iter().map(|&i| self.positions[i]).collect();
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-normed hidden states of the action slots, in slot order.
    pub action_hidden: Array2<f64>,
    pub record: AttentionRecord,
    pub macs: u64,
    pub layer_lens: Vec<usize>,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (3.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

fn rms_norm(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn fnv1a(hash: &mut u64, m: &Array2<f64>) {
    for v in m.iter() {
        for b in v.to_bits().to_le_bytes() {
            *hash ^= b as u64;
            *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// In-place rotary embedding of each head's (even, odd) pairs, keyed by original position.
fn apply_rope(m: &mut Array2<f64>, positions: &[usize], num_heads: usize, head_dim: usize) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect();
    for (row, &pos) in m.rows_mut().into_iter().zip(positions) {
        let mut row = row;
        for (i, f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            for h in 0..num_heads {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Model {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                wq: init_matrix(&mut rng, d, d),
                wk: init_matrix(&mut rng, d, d),
                wv: init_matrix(&mut rng, d, d),
                wo: init_matrix(&mut rng, d, d),
                w_up: init_matrix(&mut rng, d, f),
                w_down: init_matrix(&mut rng, f, d),
            })
            .collect::<Vec<_>>();
        let action_head = init_matrix(&mut rng, d, ACTION_DIM);
        let mut checksum = 0xcbf2_9ce4_8422_2325;
        for l in &layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down] {
                fnv1a(&mut checksum, m);
            }
        }
        fnv1a(&mut checksum, &action_head);
        Ok(Self {
            cfg,
            layers,
            action_head,
            checksum,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Weights of a 1-based layer.
    pub fn layer_weights(&self, layer: usize) -> Option<&LayerWeights> {
        layer.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    pub fn action_head(&self) -> &Array2<f64> {
        &self.action_head
    }

    /// FNV-1a digest over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// Starts a forward pass over `positions` (ascending original indices),
    /// `rows[i]` being the input embedding at `positions[i]`.
    pub fn begin(&self, rows: Array2<f64>, positions: Vec<usize>) -> Result<ForwardState> {
        if rows.nrows() != positions.len() || rows.ncols() != self.cfg.hidden_dim {
            return Err(Error::ShapeMismatch(format!(
                "embeddings are {}x{}, expected {}x{}",
                rows.nrows(),
                rows.ncols(),
                positions.len(),
                self.cfg.hidden_dim
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ShapeMismatch("positions must be strictly increasing".into()));
        }
        Ok(ForwardState {
            hidden: rows,
            positions,
            layers_done: 0,
            macs: 0,
            layer_lens: Vec::new(),
            model_checksum: self.checksum,
        })
    }

    /// Gathers the retained rows of a full embedding matrix and starts a forward pass.
    pub fn begin_masked(
        &self,
        embeddings: ArrayView2<'_, f64>,
        layout: &TokenLayout,
        retained: &TokenSet,
    ) -> Result<ForwardState> {
        if embeddings.nrows() != layout.seq_len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings for a layout of {} tokens",
                embeddings.nrows(),
                layout.seq_len()
            )));
        }
        layout.check_retained(retained)?;
        let positions: Vec<usize> = retained.iter().copied().collect();
        let rows = embeddings.select(Axis(0), &positions);
        self.begin(rows, positions)
    }

    /// Runs the next layer on `state` and returns its attention probabilities.
    pub fn step_layer(
        &self,
        state: &mut ForwardState,
        bias: Option<&AttentionBias>,
    ) -> Result<LayerAttention> {
        if state.model_checksum != self.checksum {
            return Err(Error::CheckpointMismatch("state was produced by a different model".into()));
        }
        if state.layers_done >= self.cfg.num_layers {
            return Err(Error::CheckpointMismatch("all layers already executed".into()));
        }
        let w = &self.layers[state.layers_done];
        let (nh, dh) = (self.cfg.num_heads, self.cfg.head_dim());
        let (l, d, f) = (state.positions.len(), self.cfg.hidden_dim, self.cfg.ffn_dim);
        let pos = &state.positions;

        let xn = rms_norm(&state.hidden);
        let mut q = xn.dot(&w.wq);
        let mut k = xn.dot(&w.wk);
        let v = xn.dot(&w.wv);
        apply_rope(&mut q, pos, nh, dh);
        apply_rope(&mut k, pos, nh, dh);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(nh);
        let mut ctx = Array2::<f64>::zeros((l, d));
        for h in 0..nh {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                let biased = bias.filter(|b| pos[i] >= b.query_start);
                let (visible, masked) = row.split_at_mut(i + 1);
                masked.fill(0.0);
                for (j, s) in visible.iter_mut().enumerate() {
                    *s *= scale;
                    if let Some(b) = biased {
                        *s += b.key[pos[j]];
                    }
                }
                softmax_row(visible);
            }
            let out = scores.dot(&v.slice(cols));
            ctx.slice_mut(cols).assign(&out);
            heads.push(scores);
        }
        state.hidden += &ctx.dot(&w.wo);

        let xn = rms_norm(&state.hidden);
        let up = xn.dot(&w.w_up).mapv(gelu);
        state.hidden += &up.dot(&w.w_down);

        let (l64, d64, f64_) = (l as u64, d as u64, f as u64);
        state.macs += 4 * l64 * d64 * d64 + 2 * l64 * l64 * d64 + 2 * l64 * d64 * f64_;
        state.layer_lens.push(l);
        state.layers_done += 1;
        Ok(LayerAttention {
            heads,
            positions: state.positions.clone(),
        })
    }

    /// Runs the remaining layers, keeping attention for layers in `capture`.
    pub fn run_to_end(
        &self,
        mut state: ForwardState,
        layout: &TokenLayout,
        bias: Option<&AttentionBias>,
        capture: &TokenSet,
    ) -> Result<ForwardOutput> {
        let mut record = AttentionRecord::default();
        while state.layers_done < self.cfg.num_layers {
            let att = self.step_layer(&mut state, bias)?;
            if capture.contains(&state.layers_done) {
                record.layers.insert(state.layers_done, att);
            }
        }
        self.finish(state, layout, record)
    }

    /// Final norm over the action slots of a finished forward pass.
    pub fn finish(
        &self,
        state: ForwardState,
        layout: &TokenLayout,
        record: AttentionRecord,
    ) -> Result<ForwardOutput> {
        let rows: Vec<usize> = layout
            .action_range()
            .map(|p| {
                state
                    .positions
                    .binary_search(&p)
                    .map_err(|_| Error::NonPrunableDropped(p))
            })
            .collect::<Result<_>>()?;
        let action_hidden = rms_norm(&state.hidden.select(Axis(0), &rows));
        Ok(ForwardOutput {
            action_hidden,
            record,
            macs: state.macs,
            layer_lens: state.layer_lens,
        })
    }

    /// Forward pass over the retained subset of `embeddings` (one row per
    /// layout position), capturing attention at the requested 1-based layers.
    pub fn forward_masked(
        &self,
        embeddings: ArrayView2<'_, f64>,
        layout: &TokenLayout,
        retained: &TokenSet,
        bias: Option<&AttentionBias>,
        capture: &TokenSet,
    ) -> Result<ForwardOutput> {
        if let Some(b) = bias {
            b.validate(layout.seq_len())?;
        }
        let state = self.begin_masked(embeddings, layout, retained)?;
        self.run_to_end(state, layout, bias, capture)
    }

    /// Continues from a checkpoint taken after some layer, first dropping
    /// every token not in `retained`.
    pub fn forward_resume(
        &self,
        checkpoint: &ForwardState,
        layout: &TokenLayout,
        retained: &TokenSet,
        bias: Option<&AttentionBias>,
        capture: &TokenSet,
    ) -> Result<ForwardOutput> {
        if checkpoint.model_checksum != self.checksum {
            return Err(Error::CheckpointMismatch("checkpoint was produced by a different model".into()));
        }
        if checkpoint.hidden.ncols() != self.cfg.hidden_dim {
            return Err(Error::CheckpointMismatch("hidden width differs".into()));
        }
        layout.check_retained(retained)?;
        let mut state = checkpoint.clone();
        state.retain(retained)?;
        self.run_to_end(state, layout, bias, capture)
    }

    /// Linear readout of each action slot into an action vector.
    pub fn action_readout(&self, action_hidden: &Array2<f64>) -> Vec<[f64; ACTION_DIM]> {
        action_hidden
            .dot(&self.action_head)
            .rows()
            .into_iter()
            .map(|r| {
                let mut a = [0.0; ACTION_DIM];
                for (dst, src) in a.iter_mut().zip(r.iter()) {
                    *dst = src.tanh();
                }
                a
            })
            .collect()
    }

    /// Multiply-accumulate count the engine performs for one layer over `len` active tokens.
    pub fn layer_macs(&self, len: usize) -> u64 {
        let (l, d, f) = (len as u64, self.cfg.hidden_dim as u64, self.cfg.ffn_dim as u64);
        4 * l * d * d + 2 * l * l * d + 2 * l * d * f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::View;

    fn cfg(hidden: usize, heads: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden_dim: hidden,
            num_heads: heads,
            ffn_dim: 16,
            seed: 3,
        }
    }

    fn embeddings(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(cfg(16, 4, 3)).unwrap();
        let b = Model::build(cfg(16, 4, 3)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut other = cfg(16, 4, 3);
        other.seed = 4;
        assert_ne!(a.checksum(), Model::build(other).unwrap().checksum());
    }

    #[test]
    fn head_dim_and_validation() {
        assert_eq!(cfg(64, 8, 3).head_dim(), 8);
        assert!(matches!(Model::build(cfg(65, 8, 3)), Err(Error::InvalidConfig(_))));
        assert!(matches!(Model::build(cfg(64, 8, 2)), Err(Error::InvalidConfig(_))));
        assert!(matches!(Model::build(cfg(12, 4, 3)), Err(Error::InvalidConfig(_))));
        let mut zero = cfg(64, 8, 3);
        zero.ffn_dim = 0;
        assert!(Model::build(zero).is_err());
    }

    #[test]
    fn rows_are_stochastic_and_causal() {
        let model = Model::build(cfg(16, 4, 3)).unwrap();
        let layout = TokenLayout::uniform(&[View::ThirdPerson], 9, 3, 2).unwrap();
        let emb = embeddings(layout.seq_len(), 16, 1);
        let capture: TokenSet = [1, 2, 3].into_iter().collect();
        let out = model
            .forward_masked(emb.view(), &layout, &layout.all(), None, &capture)
            .unwrap();
        assert_eq!(out.record.captured_layers(), vec![1, 2, 3]);
        for att in out.record.layers.values() {
            for head in &att.heads {
                assert_eq!(head.dim(), (14, 14));
                for (i, row) in head.rows().into_iter().enumerate() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                    assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn capture_only_requested_layers() {
        let model = Model::build(cfg(16, 4, 4)).unwrap();
        let layout = TokenLayout::uniform(&[View::ThirdPerson], 6, 2, 2).unwrap();
        let emb = embeddings(layout.seq_len(), 16, 2);
        let capture: TokenSet = [1, 2].into_iter().collect();
        let out = model
            .forward_masked(emb.view(), &layout, &layout.all(), None, &capture)
            .unwrap();
        assert_eq!(out.record.captured_layers(), vec![1, 2]);
        assert!(matches!(out.record.layer(3), Err(Error::LayerNotCaptured(3))));
    }

    #[test]
    fn zero_bias_matches_no_bias() {
        let model = Model::build(cfg(16, 2, 3)).unwrap();
        let layout = TokenLayout::uniform(&[View::ThirdPerson], 8, 2, 2).unwrap();
        let emb = embeddings(layout.seq_len(), 16, 5);
        let none = TokenSet::new();
        let a = model
            .forward_masked(emb.view(), &layout, &layout.all(), None, &none)
            .unwrap();
        let zero = AttentionBias::zeros(layout.seq_len(), 0);
        let b = model
            .forward_masked(emb.view(), &layout, &layout.all(), Some(&zero), &none)
            .unwrap();
        assert_eq!(a.action_hidden, b.action_hidden);
    }

    #[test]
    fn rejects_bad_retained_sets() {
        let model = Model::build(cfg(16, 2, 3)).unwrap();
        let layout = TokenLayout::uniform(&[View::ThirdPerson], 8, 2, 2).unwrap();
        let emb = embeddings(layout.seq_len(), 16, 5);
        let mut keep = layout.all();
        keep.remove(&8);
        let err = model.forward_masked(emb.view(), &layout, &keep, None, &TokenSet::new());
        assert!(matches!(err, Err(Error::NonPrunableDropped(8))));
        let mut keep = layout.all();
        keep.insert(99);
        let err = model.forward_masked(emb.view(), &layout, &keep, None, &TokenSet::new());
        assert!(matches!(err, Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn resume_rejects_foreign_checkpoint_and_new_tokens() {
        let model = Model::build(cfg(16, 2, 3)).unwrap();
        let mut other_cfg = cfg(16, 2, 3);
        other_cfg.seed = 99;
        let other = Model::build(other_cfg).unwrap();
        let layout = TokenLayout::uniform(&[View::ThirdPerson], 8, 2, 2).unwrap();
        let emb = embeddings(layout.seq_len(), 16, 5);
        let mut keep = layout.all();
        keep.remove(&0);
        let mut state = model.begin_masked(emb.view(), &layout, &keep).unwrap();
        model.step_layer(&mut state, None).unwrap();
        let none = TokenSet::new();
        assert!(matches!(
            other.forward_resume(&state, &layout, &keep, None, &none),
            Err(Error::CheckpointMismatch(_))
        ));
        assert!(matches!(
            model.forward_resume(&state, &layout, &layout.all(), None, &none),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn mac_count_tracks_layer_lengths() {
        let model = Model::build(cfg(16, 2, 3)).unwrap();
        let layout = TokenLayout::uniform(&[View::ThirdPerson], 8, 2, 2).unwrap();
        let emb = embeddings(layout.seq_len(), 16, 5);
        let out = model
            .forward_masked(emb.view(), &layout, &layout.all(), None, &TokenSet::new())
            .unwrap();
        assert_eq!(out.layer_lens, vec![12, 12, 12]);
        assert_eq!(out.macs, 3 * model.layer_macs(12));
        assert!(model.layer_macs(11) < model.layer_macs(12));
    }
}
