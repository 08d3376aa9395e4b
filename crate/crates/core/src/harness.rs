//! Batch runs over simulated episodes: configuration, strategy comparisons,
//! parameter sweeps and wall-clock benchmarks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::ActionMode;
use crate::error::{Error, Result};
use crate::layout::TokenSet;
use crate::model::{Model, ModelConfig};
use crate::pipeline::{PrunerConfig, Strategy};
use crate::runner::{run_episode, EpisodeRun, StepMetrics};
use crate::sim::{generate_episode, Episode, SceneSpec, TrajectorySpec};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable overriding the output root.
pub const OUTPUT_ENV: &str = "SPECPRUNE_OUT";
pub const HISTOGRAM_BINS: usize = 10;

/// Task suite, used to pick the prune ratio from a mode preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSuite {
    Spatial,
    Object,
    Goal,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModePreset {
    PaperMain,
    PaperAppendix,
}

impl ModePreset {
    pub fn alpha(self, task: TaskSuite) -> f64 {
        use TaskSuite::*;
        match (self, task) {
            (ModePreset::PaperMain, Spatial) => 1.0,
            (ModePreset::PaperMain, Goal) => 0.8,
            (ModePreset::PaperMain, Object | Long) => 0.6,
            (ModePreset::PaperAppendix, Long) => 1.0,
            (ModePreset::PaperAppendix, Goal) => 0.8,
            (ModePreset::PaperAppendix, Object | Spatial) => 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneSpec,
    /// TOML file with a `SceneSpec`; replaces `scene`.
    pub scene_file: Option<PathBuf>,
    /// TOML file with a `TrajectorySpec`; otherwise one is drawn per seed.
    pub trajectory_file: Option<PathBuf>,
    pub pruner: PrunerConfig,
    /// Overrides `pruner.alpha` together with `task`.
    pub preset: Option<ModePreset>,
    pub task: TaskSuite,
    pub strategies: Vec<String>,
    pub seed: u64,
    pub episodes: usize,
    /// Steps per episode; the full trajectory when absent.
    pub steps: Option<usize>,
    /// Timed forward passes per step in benchmarks, after one warm-up.
    pub repetitions: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::small(),
            scene: SceneSpec::small(),
            scene_file: None,
            trajectory_file: None,
            pruner: PrunerConfig::default(),
            preset: None,
            task: TaskSuite::Spatial,
            strategies: ["none", "random", "local-only", "global-only", "static", "static-layer", "specprune"]
                .map(String::from)
                .to_vec(),
            seed: 0,
            episodes: 40,
            steps: None,
            repetitions: 3,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Loads a config file. Relative spec paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.scene_file, &mut cfg.trajectory_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies preset, scene file and validation; returns the resolved config.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(preset) = self.preset {
            self.pruner.alpha = preset.alpha(self.task);
        }
        if let Some(path) = &self.scene_file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::InvalidRunConfig(format!("scene file {}: {e}", path.display())))?;
            self.scene = toml::from_str(&text)?;
        }
        if let Some(path) = &self.trajectory_file {
            if !path.exists() {
                return Err(Error::InvalidRunConfig(format!("trajectory file {} not found", path.display())));
            }
        }
        self.model.validate()?;
        self.scene.validate()?;
        if self.scene.feature_dim != self.model.hidden_dim {
            return Err(Error::InvalidRunConfig(format!(
                "scene feature_dim {} differs from model hidden_dim {}",
                self.scene.feature_dim, self.model.hidden_dim
            )));
        }
        self.pruner.validate(self.model.num_layers)?;
        if self.episodes == 0 {
            return Err(Error::InvalidRunConfig("episodes must be positive".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidRunConfig("no strategies selected".into()));
        }
        for s in &self.strategies {
            Strategy::preset(s)?;
        }
        Ok(self)
    }

    /// `output_dir`, else `$SPECPRUNE_OUT`, else `./specprune-out`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("specprune-out"))
    }

    pub fn trajectory(&self, seed: u64) -> Result<TrajectorySpec> {
        match &self.trajectory_file {
            Some(path) => {
                let t: TrajectorySpec = toml::from_str(&fs::read_to_string(path)?)?;
                t.validate()?;
                Ok(t)
            }
            None => Ok(TrajectorySpec::randomized(seed)),
        }
    }

    pub fn episode(&self, seed: u64) -> Result<Episode> {
        let scene = SceneSpec {
            seed,
            ..self.scene.clone()
        };
        let traj = self.trajectory(seed)?;
        let steps = self.steps.unwrap_or(traj.total_steps()).min(traj.total_steps());
        generate_episode(&scene, &traj, steps, self.pruner.tau)
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.episodes as u64).map(move |i| self.seed + i)
    }
}

/// One JSONL record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub strategy: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub episodes: usize,
    /// Steps after the first generation of each episode.
    pub pruned_steps: usize,
    pub static_reduction: f64,
    pub retained_visual: f64,
    pub final_visual: f64,
    pub hit_rate: f64,
    pub hit_rate_first: f64,
    pub important_recall: f64,
    pub action_error: f64,
    pub flops_reduction: f64,
    pub fine_fraction: f64,
    /// Static reduction in tenths: bin `i` counts steps in `[i/10, (i+1)/10)`.
    pub reduction_histogram: [usize; HISTOGRAM_BINS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub model_checksum: u64,
    pub summaries: Vec<StrategySummary>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Median forward seconds per strategy over steps after the first.
    pub median_forward_secs: BTreeMap<String, f64>,
    /// Unpruned median over each strategy's median.
    pub speedup: BTreeMap<String, f64>,
}

pub struct SuiteOutput {
    pub report: SuiteReport,
    pub rows: Vec<MetricsRow>,
    pub timing: Option<TimingReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn summarize(strategy: &str, runs: &[EpisodeRun]) -> StrategySummary {
    let pruned: Vec<&StepMetrics> = runs.iter().flat_map(|r| r.steps.iter().skip(1)).collect();
    let mut hist = [0usize; HISTOGRAM_BINS];
    for m in &pruned {
        let bin = ((m.static_reduction() * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        hist[bin] += 1;
    }
    let avg = |f: fn(&StepMetrics) -> f64| mean(pruned.iter().map(|m| f(m)));
    StrategySummary {
        strategy: strategy.to_string(),
        episodes: runs.len(),
        pruned_steps: pruned.len(),
        static_reduction: avg(|m| m.static_reduction()),
        retained_visual: avg(|m| m.retained_visual as f64),
        final_visual: avg(|m| m.final_visual as f64),
        hit_rate: avg(|m| m.hit_rate),
        hit_rate_first: avg(|m| m.hit_rate_first),
        important_recall: avg(|m| m.important_recall),
        action_error: avg(|m| m.action_error),
        flops_reduction: avg(|m| m.flops_reduction),
        fine_fraction: avg(|m| f64::from(u8::from(m.mode == ActionMode::Fine))),
        reduction_histogram: hist,
    }
}

/// Structural checks on one run; returns human-readable violations.
pub fn check_run(strategy: &str, seed: u64, episode: &Episode, run: &EpisodeRun) -> Vec<String> {
    let layout = &episode.layout;
    let visual = layout.visual();
    let non_prunable = layout.non_prunable();
    let mut out = Vec::new();
    for (m, o) in run.steps.iter().zip(&run.outputs) {
        let sr = &o.static_result;
        let tag = format!("{strategy} seed {seed} step {}", m.step);
        if m.retained_global + m.retained_dynamic + m.retained_local != m.retained_visual {
            out.push(format!("{tag}: stage counts do not sum to the retained count"));
        }
        let retained_visual: TokenSet = sr.v_retain.intersection(&visual).copied().collect();
        if !retained_visual.is_disjoint(&sr.v_prune) || retained_visual.len() + sr.v_prune.len() != visual.len() {
            out.push(format!("{tag}: retained and pruned sets do not partition the visual tokens"));
        }
        if !non_prunable.is_subset(&sr.v_retain) {
            out.push(format!("{tag}: a text or action token was pruned"));
        }
        if m.hit_rate + 1e-12 < m.hit_rate_first {
            out.push(format!("{tag}: two-layer hit rate below the one-layer hit rate"));
        }
        if !o.final_visual.is_subset(&retained_visual) {
            out.push(format!("{tag}: a statically pruned token reappeared"));
        }
        if m.step == 0 && m.pruned_visual != 0 {
            out.push(format!("{tag}: first generation was pruned"));
        }
    }
    out
}

/// Runs every strategy over every seed. Timing is measured only when
/// `measure_timing` is set, by re-running each step `repetitions` times.
pub fn run_suite(cfg: &RunConfig, measure_timing: bool) -> Result<SuiteOutput> {
    let cfg = cfg.clone().resolve()?;
    let model = Model::build(cfg.model.clone())?;
    let seeds: Vec<u64> = cfg.seeds().collect();
    let episodes: Vec<Episode> = seeds.par_iter().map(|&s| cfg.episode(s)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut violations = Vec::new();
    let mut timing = BTreeMap::new();
    for name in &cfg.strategies {
        let strategy = Strategy::preset(name)?;
        let runs: Vec<EpisodeRun> = seeds
            .par_iter()
            .zip(&episodes)
            .map(|(&s, ep)| run_episode(&model, ep, &cfg.pruner, &strategy, s))
            .collect::<Result<_>>()?;
        for ((&s, ep), run) in seeds.iter().zip(&episodes).zip(&runs) {
            violations.extend(check_run(name, s, ep, run));
            rows.extend(run.steps.iter().map(|m| MetricsRow {
                schema_version: SCHEMA_VERSION,
                strategy: name.clone(),
                seed: s,
                metrics: m.clone(),
            }));
        }
        summaries.push(summarize(name, &runs));
        if measure_timing {
            let mut secs: Vec<f64> = runs.iter().flat_map(|r| r.forward_secs.iter().skip(1).copied()).collect();
            for _ in 1..cfg.repetitions.max(1) {
                for (&s, ep) in seeds.iter().zip(&episodes) {
                    let r = run_episode(&model, ep, &cfg.pruner, &strategy, s)?;
                    secs.extend(r.forward_secs.iter().skip(1));
                }
            }
            timing.insert(name.clone(), median(&secs));
        }
    }
    let timing = measure_timing.then(|| {
        let base = timing.get("none").copied();
        let speedup = timing
            .iter()
            .filter_map(|(k, &v)| base.map(|b| (k.clone(), if v > 0.0 { b / v } else { 0.0 })))
            .collect();
        TimingReport {
            median_forward_secs: timing,
            speedup,
        }
    });
    Ok(SuiteOutput {
        report: SuiteReport {
            schema_version: SCHEMA_VERSION,
            model_checksum: model.checksum(),
            config: cfg,
            summaries,
            violations,
        },
        rows,
        timing,
    })
}

/// Writes `metrics.jsonl`, `summary.json` and, when present, `timing.json`.
pub fn write_suite(out: &SuiteOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
    for row in &out.rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.report)? + "\n")?;
    if let Some(t) = &out.timing {
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(t)? + "\n")?;
    }
    Ok(())
}

/// Plain-text table of the strategy summaries.
pub fn summary_table(report: &SuiteReport) -> String {
    let mut s = format!(
        "{:<13} {:>9} {:>9} {:>8} {:>8} {:>9} {:>8} {:>6}\n",
        "strategy", "reduction", "retained", "hit", "recall", "act_err", "flops", "fine"
    );
    for m in &report.summaries {
        s += &format!(
            "{:<13} {:>9.3} {:>9.1} {:>8.3} {:>8.3} {:>9.4} {:>8.3} {:>6.2}\n",
            m.strategy,
            m.static_reduction,
            m.retained_visual,
            m.hit_rate,
            m.important_recall,
            m.action_error,
            m.flops_reduction,
            m.fine_fraction
        );
    }
    s
}

/// Grid of pruner parameters; empty lists keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub tau: Vec<f64>,
    pub k_dynamic: Vec<usize>,
    pub hit_rate_k: Vec<usize>,
    pub translational: Vec<f64>,
    pub rotational: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl SweepGrid {
    pub fn configs(&self, base: &PrunerConfig) -> Vec<PrunerConfig> {
        fn axis<T: Copy>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &tau in &axis(&self.tau, base.tau) {
            for &k_dynamic in &axis(&self.k_dynamic, base.k_dynamic) {
                for &hit_rate_k in &axis(&self.hit_rate_k, base.hit_rate_k) {
                    for &tr in &axis(&self.translational, base.thresholds.translational) {
                        for &rot in &axis(&self.rotational, base.thresholds.rotational) {
                            for &alpha in &axis(&self.alpha, base.alpha) {
                                let mut c = base.clone();
                                c.tau = tau;
                                c.k_dynamic = k_dynamic;
                                c.hit_rate_k = hit_rate_k;
                                c.thresholds.translational = tr;
                                c.thresholds.rotational = rot;
                                c.alpha = alpha;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub pruner: PrunerConfig,
    pub summary: StrategySummary,
}

/// Runs the `specprune` strategy for every point of `grid`.
pub fn run_sweep(cfg: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for pruner in grid.configs(&cfg.pruner) {
        let point = RunConfig {
            pruner: pruner.clone(),
            preset: None,
            strategies: vec!["specprune".into()],
            ..cfg.clone()
        };
        let out = run_suite(&point, false)?;
        if let Some(v) = out.report.violations.first() {
            return Err(Error::Invariant(v.clone()));
        }
        rows.push(SweepRow {
            schema_version: SCHEMA_VERSION,
            pruner,
            summary: out.report.summaries.into_iter().next().expect("one strategy"),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub strategy: String,
    pub runs: usize,
    pub median_secs: f64,
    pub samples: Vec<f64>,
}

/// Wall-clock of one pruned generation: the pipeline is replayed up to
/// `step` and that generation is timed `runs` times after `warmup` untimed
/// passes.
pub fn bench_generation(
    model: &Model,
    episode: &Episode,
    cfg: &PrunerConfig,
    strategy: &Strategy,
    step: usize,
    warmup: usize,
    runs: usize,
) -> Result<BenchResult> {
    use crate::pipeline::{GenerationInput, Pipeline};
    use crate::sim::attention_bias_for;
    if step >= episode.len() {
        return Err(Error::InvalidRunConfig(format!("step {step} beyond episode length {}", episode.len())));
    }
    let mut pipe = Pipeline::new(model, episode.layout.clone(), cfg.clone(), strategy.clone(), 0)?;
    for s in 0..=step {
        let emb = episode.embeddings(s);
        let bias = attention_bias_for(episode, s);
        let gen = GenerationInput {
            step: episode.steps[s].step,
            embeddings: emb.view(),
            frame: &episode.steps[s].frame,
            bias: Some(&bias),
            prev_action: (s > 0).then(|| episode.steps[s - 1].action),
        };
        if s < step {
            pipe.run_generation(gen)?;
            continue;
        }
        let mut samples = Vec::with_capacity(runs);
        for i in 0..warmup + runs {
            let mut p = pipe.clone();
            let t = Instant::now();
            p.run_generation(gen.clone())?;
            if i >= warmup {
                samples.push(t.elapsed().as_secs_f64());
            }
        }
        return Ok(BenchResult {
            strategy: strategy.name.clone(),
            runs,
            median_secs: median(&samples),
            samples,
        });
    }
    unreachable!("loop returns at the benchmarked step")
}
