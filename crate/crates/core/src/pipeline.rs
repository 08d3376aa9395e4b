//! One action generation end to end: controller, static pruning after the
//! second layer, EMA-driven pruning at scheduled layers, action readout and
//! the global attention memory update for the next generation.

use std::time::Instant;

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{classify, translational_speed, ActionDelta, ActionMode, ControllerState, Thresholds};
use crate::dynamic_pruner::{layer_prune, update_importance, ImportanceState, LayerScheduleConfig};
use crate::error::{Error, Result};
use crate::flops::{exact_reduction, FlopsBreakdown};
use crate::grid::Frame;
use crate::layout::{TokenLayout, TokenSet};
use crate::model::{AttentionBias, Model, ACTION_DIM};
use crate::scoring::{hit_rate_from_scores, layer_task_score, AttentionDirection, TokenScoreVector};
use crate::static_pruner::{
    aggregate_scores, compose_static, frame_offset, select_dynamic, select_global, select_local, DynamicParams,
    FrameHistory, GlobalAggregation, GlobalAttentionMemory, OffsetFormula, StaticPruneResult, MIN_HISTORY,
};

/// Which visual tokens survive the static stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaticSelection {
    /// Keep everything.
    Off,
    /// Global ∪ dynamic ∪ local.
    Union,
    LocalOnly,
    GlobalOnly,
    /// Uniformly random tokens, as many per view as the union would keep.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub selection: StaticSelection,
    pub layer_pruning: bool,
    pub controller: bool,
}

impl Strategy {
    pub const PRESETS: [&'static str; 7] =
        ["none", "random", "local-only", "global-only", "static", "static-layer", "specprune"];

    pub fn preset(name: &str) -> Result<Self> {
        let (selection, layer_pruning, controller) = match name {
            "none" => (StaticSelection::Off, false, false),
            "random" => (StaticSelection::Random, true, true),
            "local-only" => (StaticSelection::LocalOnly, true, true),
            "global-only" => (StaticSelection::GlobalOnly, true, true),
            "static" => (StaticSelection::Union, false, false),
            "static-layer" => (StaticSelection::Union, true, false),
            "specprune" => (StaticSelection::Union, true, true),
            other => {
                return Err(Error::InvalidRunConfig(format!(
                    "unknown strategy {other:?}; expected one of {:?}",
                    Self::PRESETS
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            selection,
            layer_pruning,
            controller,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrunerConfig {
    pub alpha: f64,
    pub tau: f64,
    pub k_dynamic: usize,
    pub offset_formula: OffsetFormula,
    pub global_aggregation: GlobalAggregation,
    pub direction: AttentionDirection,
    pub thresholds: Thresholds,
    pub hit_rate_k: usize,
    pub history: usize,
    /// Defaults to [`LayerScheduleConfig::for_depth`] when absent.
    pub schedule: Option<LayerScheduleConfig>,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            tau: 0.95,
            k_dynamic: 16,
            offset_formula: OffsetFormula::Scaled,
            global_aggregation: GlobalAggregation::MeanOverLayers,
            direction: AttentionDirection::TextToVisual,
            thresholds: Thresholds::default(),
            hit_rate_k: 20,
            history: MIN_HISTORY,
            schedule: None,
        }
    }
}

impl PrunerConfig {
    pub fn schedule_for(&self, num_layers: usize) -> LayerScheduleConfig {
        self.schedule.clone().unwrap_or_else(|| LayerScheduleConfig::for_depth(num_layers))
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRunConfig(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        let th = self.thresholds;
        if !(th.translational > 0.0 && th.rotational > 0.0 && th.vertical >= 0.0) {
            return bad("velocity thresholds must be positive".into());
        }
        self.schedule_for(num_layers).validate(num_layers)
    }
}

/// Per-generation inputs.
#[derive(Clone)]
pub struct GenerationInput<'a> {
    pub step: usize,
    pub embeddings: ArrayView2<'a, f64>,
    pub frame: &'a Frame,
    pub bias: Option<&'a AttentionBias>,
    /// Action executed after the previous generation.
    pub prev_action: Option<ActionDelta>,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub action_chunk: Vec<[f64; ACTION_DIM]>,
    pub mode: ActionMode,
    pub k_base: usize,
    pub v_t: f64,
    pub v_r: f64,
    pub frame_offset: usize,
    pub static_result: StaticPruneResult,
    /// Visual tokens alive at the last layer.
    pub final_visual: TokenSet,
    pub layer_lens: Vec<usize>,
    pub macs: u64,
    pub flops: FlopsBreakdown,
    /// Hit rate of layers {1, 2} and of layer 1 alone against the last layer.
    pub hit_rate: f64,
    pub hit_rate_first: f64,
    pub forward_secs: f64,
}

#[derive(Clone)]
pub struct Pipeline<'m> {
    model: &'m Model,
    layout: TokenLayout,
    cfg: PrunerConfig,
    schedule: LayerScheduleConfig,
    strategy: Strategy,
    memory: GlobalAttentionMemory,
    history: FrameHistory,
    controller: ControllerState,
    rng: ChaCha8Rng,
}

impl<'m> Pipeline<'m> {
    pub fn new(model: &'m Model, layout: TokenLayout, cfg: PrunerConfig, strategy: Strategy, seed: u64) -> Result<Self> {
        let n = model.config().num_layers;
        cfg.validate(n)?;
        let schedule = cfg.schedule_for(n);
        Ok(Self {
            model,
            layout,
            schedule,
            strategy,
            memory: GlobalAttentionMemory::new(),
            history: FrameHistory::new(cfg.history),
            controller: ControllerState::new(cfg.thresholds, cfg.alpha),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64),
            cfg,
        })
    }

    pub fn memory(&self) -> &GlobalAttentionMemory {
        &self.memory
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    fn static_sets(&mut self, step: usize, v_t: f64, k_base: usize, s1: &TokenScoreVector, s2: &TokenScoreVector) -> Result<StaticPruneResult> {
        let params = DynamicParams {
            tau: self.cfg.tau,
            k_dynamic: self.cfg.k_dynamic,
            formula: self.cfg.offset_formula,
        };
        let (mut global, mut dynamic, mut local) = (TokenSet::new(), TokenSet::new(), TokenSet::new());
        let views: Vec<_> = self.layout.view_ranges().iter().map(|vr| vr.view).collect();
        for view in views {
            let candidates = self.layout.visual_in_view(view);
            let g = select_global(&self.memory, &candidates, k_base);
            let d = select_dynamic(&self.history, &self.layout, view, step, v_t, &params)?;
            let l = select_local(s1, s2, &candidates, k_base);
            match self.strategy.selection {
                StaticSelection::Off => unreachable!("handled by caller"),
                StaticSelection::Union => {
                    global.extend(g);
                    dynamic.extend(d);
                    local.extend(l);
                }
                StaticSelection::LocalOnly => local.extend(l),
                StaticSelection::GlobalOnly => global.extend(g),
                StaticSelection::Random => {
                    let count = g.union(&d).copied().collect::<TokenSet>().union(&l).count();
                    let pool: Vec<usize> = candidates.into_iter().collect();
                    let picked = sample(&mut self.rng, pool.len(), count.min(pool.len()));
                    // attributed to the local stage for bookkeeping
                    local.extend(picked.into_iter().map(|i| pool[i]));
                }
            }
        }
        compose_static(global, dynamic, local, &self.layout)
    }

    pub fn run_generation(&mut self, input: GenerationInput<'_>) -> Result<GenerationOutput> {
        let model = self.model;
        let num_layers = model.config().num_layers;
        let (v_t, v_r) = match input.prev_action {
            Some(a) => {
                if self.strategy.controller {
                    self.controller = classify(&a, &self.controller);
                } else {
                    self.controller.v_t = translational_speed(&a);
                    self.controller.v_r = crate::controller::rotational_speed(&a);
                }
                (self.controller.v_t, self.controller.v_r)
            }
            None => (0.0, 0.0),
        };
        let k_base = self.controller.k_base();
        self.history.push(input.step, input.frame.clone())?;
        let offset = frame_offset(v_t, self.history.past_len(input.step), self.cfg.offset_formula);

        let started = Instant::now();
        let mut state = model.begin_masked(input.embeddings, &self.layout, &self.layout.all())?;
        let mut per_layer: Vec<TokenScoreVector> = Vec::with_capacity(num_layers);
        for layer in 1..=2 {
            let att = model.step_layer(&mut state, input.bias)?;
            per_layer.push(layer_task_score(&att, &self.layout, layer, self.cfg.direction)?);
        }

        let prune_now = !self.memory.is_empty() && self.strategy.selection != StaticSelection::Off;
        let static_result = if prune_now {
            let (s1, s2) = (per_layer[0].clone(), per_layer[1].clone());
            self.static_sets(input.step, v_t, k_base, &s1, &s2)?
        } else {
            StaticPruneResult::keep_all(&self.layout)
        };
        state.retain(&static_result.v_retain)?;

        let non_prunable = self.layout.non_prunable();
        let mut importance = ImportanceState::new(
            static_result.v_retain.iter().copied().filter(|&i| self.layout.is_visual(i)),
            self.schedule.beta,
        );
        let layer_pruning = prune_now && self.strategy.layer_pruning;
        for layer in 3..=num_layers {
            let att = model.step_layer(&mut state, input.bias)?;
            let scores = layer_task_score(&att, &self.layout, layer, self.cfg.direction)?;
            if layer_pruning {
                if self.schedule.update_layers.contains(&layer) {
                    update_importance(&mut importance, &scores, &att, layer, &self.schedule)?;
                }
                if self.schedule.prune_layers.contains(&layer) {
                    let mut keep = layer_prune(&mut importance, layer, &self.schedule)?;
                    keep.extend(non_prunable.iter().copied());
                    state.retain(&keep)?;
                }
            }
            per_layer.push(scores);
        }
        let final_visual: TokenSet = state.positions.iter().copied().filter(|&i| self.layout.is_visual(i)).collect();
        let macs = state.macs;
        let layer_lens = state.layer_lens.clone();
        let out = model.finish(state, &self.layout, Default::default())?;
        let action_chunk = model.action_readout(&out.action_hidden);
        let forward_secs = started.elapsed().as_secs_f64();

        let last = per_layer.last().expect("at least three layers");
        let k = self.cfg.hit_rate_k;
        let hit_rate = hit_rate_from_scores(&[&per_layer[0], &per_layer[1]], last, k);
        let hit_rate_first = hit_rate_from_scores(&[&per_layer[0]], last, k);

        self.memory.store(aggregate_scores(&per_layer, self.cfg.global_aggregation));

        let cfg = model.config();
        let flops = exact_reduction(
            &layer_lens.iter().map(|&l| l as u64).collect::<Vec<_>>(),
            self.layout.seq_len() as u64,
            num_layers,
            cfg.hidden_dim as u64,
            cfg.ffn_dim as u64,
        )?;
        Ok(GenerationOutput {
            action_chunk,
            mode: self.controller.mode,
            k_base,
            v_t,
            v_r,
            frame_offset: offset,
            static_result,
            final_visual,
            layer_lens,
            macs,
            flops,
            hit_rate,
            hit_rate_first,
            forward_secs,
        })
    }
}
