//! Drives a [`Pipeline`] over a simulated episode and records per-step metrics.

use serde::{Deserialize, Serialize};

use crate::controller::ActionMode;
use crate::error::Result;
use crate::layout::TokenSet;
use crate::model::Model;
use crate::pipeline::{GenerationInput, GenerationOutput, Pipeline, PrunerConfig, Strategy};
use crate::sim::{action_oracle, attention_bias_for, Episode, Phase};
use crate::static_pruner::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: Phase,
    pub mode: ActionMode,
    pub k_base: usize,
    pub v_t: f64,
    pub v_r: f64,
    pub frame_offset: usize,
    pub visual_tokens: usize,
    pub retained_global: usize,
    pub retained_dynamic: usize,
    pub retained_local: usize,
    pub retained_visual: usize,
    pub pruned_visual: usize,
    pub final_visual: usize,
    pub layer_lens: Vec<usize>,
    pub hit_rate: f64,
    pub hit_rate_first: f64,
    /// Fraction of ground-truth important tokens kept by the static stage.
    pub important_recall: f64,
    pub action_error: f64,
    pub macs: u64,
    pub full_flops: u128,
    pub pruned_flops: u128,
    pub flops_reduction: f64,
}

impl StepMetrics {
    pub fn static_reduction(&self) -> f64 {
        self.pruned_visual as f64 / self.visual_tokens as f64
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub steps: Vec<StepMetrics>,
    /// Wall-clock seconds of each forward pass; kept apart from the metrics
    /// so those stay deterministic.
    pub forward_secs: Vec<f64>,
    pub outputs: Vec<GenerationOutput>,
}

pub fn run_episode(
    model: &Model,
    episode: &Episode,
    cfg: &PrunerConfig,
    strategy: &Strategy,
    seed: u64,
) -> Result<EpisodeRun> {
    let mut pipe = Pipeline::new(model, episode.layout.clone(), cfg.clone(), strategy.clone(), seed)?;
    let layout = &episode.layout;
    let mut run = EpisodeRun {
        steps: Vec::with_capacity(episode.len()),
        forward_secs: Vec::with_capacity(episode.len()),
        outputs: Vec::with_capacity(episode.len()),
    };
    for (i, st) in episode.steps.iter().enumerate() {
        let emb = episode.embeddings(i);
        let bias = attention_bias_for(episode, i);
        let out = pipe.run_generation(GenerationInput {
            step: st.step,
            embeddings: emb.view(),
            frame: &st.frame,
            bias: Some(&bias),
            prev_action: (i > 0).then(|| episode.steps[i - 1].action),
        })?;
        let sr = &out.static_result;
        let retained: TokenSet = sr.v_retain.clone();
        let important = &st.truth.important;
        let recall = if important.is_empty() {
            1.0
        } else {
            important.intersection(&retained).count() as f64 / important.len() as f64
        };
        let oracle = action_oracle(episode, i, &retained);
        run.steps.push(StepMetrics {
            step: st.step,
            phase: st.phase,
            mode: out.mode,
            k_base: out.k_base,
            v_t: out.v_t,
            v_r: out.v_r,
            frame_offset: out.frame_offset,
            visual_tokens: layout.visual_len(),
            retained_global: sr.stage_count(Stage::Global),
            retained_dynamic: sr.stage_count(Stage::Dynamic),
            retained_local: sr.stage_count(Stage::Local),
            retained_visual: sr.retained_visual(),
            pruned_visual: sr.v_prune.len(),
            final_visual: out.final_visual.len(),
            layer_lens: out.layer_lens.clone(),
            hit_rate: out.hit_rate,
            hit_rate_first: out.hit_rate_first,
            important_recall: recall,
            action_error: oracle.error,
            macs: out.macs,
            full_flops: out.flops.full_flops,
            pruned_flops: out.flops.pruned_flops,
            flops_reduction: out.flops.reduction_fraction,
        });
        run.forward_secs.push(out.forward_secs);
        run.outputs.push(out);
    }
    Ok(run)
}
