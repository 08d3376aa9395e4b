//! `specprune` command-line harness.
//!
//! Exit codes: 0 success, 1 invariant violation in a report, 2 invalid
//! configuration or arguments, 3 I/O or runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specprune_core::flops::{
    dynamic_average_multiplier, exact_reduction, paper_reduction_estimate, scheduled_trajectory,
};
use specprune_core::harness::{
    run_suite, run_sweep, summary_table, write_suite, ModePreset, RunConfig, SweepGrid, TaskSuite,
};
use specprune_core::dynamic_pruner::{scaled_prune_layers, DEFAULT_RETENTION};
use specprune_core::render::{render_retention, DEFAULT_CELL};
use specprune_core::runner::run_episode;
use specprune_core::sim::SceneSpec;
use specprune_core::{Error, Model, ModelConfig};

const EXIT_VIOLATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "specprune", version, about = "Visual token pruning over simulated episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and print per-step metrics.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "specprune")]
        strategy: String,
        /// Export the simulated episode as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run every strategy over many seeds and write metrics and a summary.
    Suite {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Also measure wall-clock speedup against the unpruned strategy.
        #[arg(long)]
        timing: bool,
    },
    /// Summaries over a grid of pruner parameters.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long = "sweep-tau", value_delimiter = ',')]
        sweep_tau: Vec<f64>,
        #[arg(long = "sweep-k-dynamic", value_delimiter = ',')]
        sweep_k_dynamic: Vec<usize>,
        #[arg(long = "sweep-k", value_delimiter = ',')]
        sweep_k: Vec<usize>,
        #[arg(long = "sweep-translational", value_delimiter = ',')]
        sweep_translational: Vec<f64>,
        #[arg(long = "sweep-rotational", value_delimiter = ',')]
        sweep_rotational: Vec<f64>,
        #[arg(long = "sweep-alpha", value_delimiter = ',')]
        sweep_alpha: Vec<f64>,
    },
    /// Analytical FLOPs report for a token trajectory.
    Flops {
        #[arg(long, default_value_t = 32)]
        layers: usize,
        #[arg(long, default_value_t = 4096)]
        hidden: u64,
        #[arg(long, default_value_t = 11008)]
        ffn: u64,
        #[arg(long, default_value_t = 600)]
        tokens: u64,
        /// Tokens kept by the static stage.
        #[arg(long, default_value_t = 285)]
        static_kept: u64,
        #[arg(long, default_value_t = DEFAULT_RETENTION)]
        retention: f64,
        #[arg(long)]
        json: bool,
    },
    /// Write retention images for an episode.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "specprune")]
        strategy: String,
        /// Pixels per patch side.
        #[arg(long, default_value_t = DEFAULT_CELL)]
        cell: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    /// 8x8 patches per view, 8-layer model.
    Small,
    /// 17x17 patches per view, 32-layer model.
    Paper,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k_dynamic: Option<usize>,
    #[arg(long)]
    hit_rate_k: Option<usize>,
    /// Output directory; defaults to $SPECPRUNE_OUT, then ./specprune-out.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    PaperMain,
    PaperAppendix,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Spatial,
    Object,
    Goal,
    Long,
}

impl Common {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        match self.scale {
            Some(Scale::Small) => {
                cfg.model = ModelConfig::small();
                cfg.scene = SceneSpec::small();
            }
            Some(Scale::Paper) => {
                cfg.model = ModelConfig::bench();
                cfg.scene = SceneSpec::paper();
            }
            None => {}
        }
        if let Some(l) = self.layers {
            cfg.model.num_layers = l;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.steps.is_some() {
            cfg.steps = self.steps;
        }
        if let Some(p) = self.preset {
            cfg.preset = Some(match p {
                PresetArg::PaperMain => ModePreset::PaperMain,
                PresetArg::PaperAppendix => ModePreset::PaperAppendix,
            });
        }
        if let Some(t) = self.task {
            cfg.task = match t {
                TaskArg::Spatial => TaskSuite::Spatial,
                TaskArg::Object => TaskSuite::Object,
                TaskArg::Goal => TaskSuite::Goal,
                TaskArg::Long => TaskSuite::Long,
            };
        }
        if let Some(a) = self.alpha {
            cfg.pruner.alpha = a;
            cfg.preset = None;
        }
        if let Some(t) = self.tau {
            cfg.pruner.tau = t;
        }
        if let Some(k) = self.k_dynamic {
            cfg.pruner.k_dynamic = k;
        }
        if let Some(k) = self.hit_rate_k {
            cfg.pruner.hit_rate_k = k;
        }
        if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
        Ok(cfg)
    }
}

enum Failure {
    Violation(usize),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation(n)) => {
            eprintln!("error: {n} invariant violation(s); see summary.json");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_) | Error::Json(_) | Error::Invariant(_) => EXIT_RUNTIME,
                _ => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { common, strategy, dump } => {
            let mut cfg = common.config()?;
            cfg.episodes = 1;
            cfg.strategies = if strategy == "none" {
                vec![strategy]
            } else {
                vec!["none".into(), strategy]
            };
            let cfg = cfg.resolve()?;
            let dir = cfg.output_root().join("run");
            let episode = cfg.episode(cfg.seed)?;
            if let Some(path) = dump {
                episode.save(&path)?;
            }
            let out = run_suite(&cfg, true)?;
            write_suite(&out, &dir)?;
            let name = cfg.strategies.last().expect("strategy");
            println!("{:>4} {:<12} {:<6} {:>4} {:>4} {:>4} {:>4} {:>5} {:>6} {:>8}", "step", "phase", "mode", "G", "D", "L", "ret", "hit", "flops", "act_err");
            for row in out.rows.iter().filter(|r| &r.strategy == name) {
                let m = &row.metrics;
                println!(
                    "{:>4} {:<12} {:<6} {:>4} {:>4} {:>4} {:>4} {:>5.2} {:>6.3} {:>8.4}",
                    m.step,
                    m.phase.name(),
                    m.mode.name(),
                    m.retained_global,
                    m.retained_dynamic,
                    m.retained_local,
                    m.retained_visual,
                    m.hit_rate,
                    m.flops_reduction,
                    m.action_error
                );
            }
            print!("\n{}", summary_table(&out.report));
            if let Some(t) = &out.timing {
                if let Some(s) = t.speedup.get(name) {
                    println!("speedup vs unpruned: {s:.2}x");
                }
            }
            println!("wrote {}", dir.display());
            check(&out.report.violations)
        }
        Command::Suite { common, episodes, strategies, timing } => {
            let mut cfg = common.config()?;
            if let Some(e) = episodes {
                cfg.episodes = e;
            }
            if !strategies.is_empty() {
                cfg.strategies = strategies;
            }
            let cfg = cfg.resolve()?;
            let dir = cfg.output_root().join("suite");
            let out = run_suite(&cfg, timing)?;
            write_suite(&out, &dir)?;
            print!("{}", summary_table(&out.report));
            if let Some(t) = &out.timing {
                for (k, s) in &t.speedup {
                    println!("speedup {k:<13} {s:.2}x");
                }
            }
            println!("wrote {}", dir.display());
            check(&out.report.violations)
        }
        Command::Sweep {
            common,
            episodes,
            sweep_tau,
            sweep_k_dynamic,
            sweep_k,
            sweep_translational,
            sweep_rotational,
            sweep_alpha,
        } => {
            let mut cfg = common.config()?;
            if let Some(e) = episodes {
                cfg.episodes = e;
            }
            let cfg = cfg.resolve()?;
            let grid = SweepGrid {
                tau: sweep_tau,
                k_dynamic: sweep_k_dynamic,
                hit_rate_k: sweep_k,
                translational: sweep_translational,
                rotational: sweep_rotational,
                alpha: sweep_alpha,
            };
            let rows = run_sweep(&cfg, &grid)?;
            let dir = cfg.output_root().join("sweep");
            std::fs::create_dir_all(&dir)?;
            let mut text = String::new();
            println!("{:>6} {:>4} {:>4} {:>6} {:>6} {:>5} {:>9} {:>6} {:>9}", "tau", "K_D", "k", "v_t", "v_r", "alpha", "reduction", "hit", "act_err");
            for r in &rows {
                let p = &r.pruner;
                println!(
                    "{:>6.3} {:>4} {:>4} {:>6.3} {:>6.3} {:>5.2} {:>9.3} {:>6.3} {:>9.4}",
                    p.tau,
                    p.k_dynamic,
                    p.hit_rate_k,
                    p.thresholds.translational,
                    p.thresholds.rotational,
                    p.alpha,
                    r.summary.static_reduction,
                    r.summary.hit_rate,
                    r.summary.action_error
                );
                text += &serde_json::to_string(r).map_err(Error::from)?;
                text.push('\n');
            }
            std::fs::write(dir.join("sweep.jsonl"), text)?;
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Flops { layers, hidden, ffn, tokens, static_kept, retention, json } => {
            if static_kept > tokens || layers < 3 {
                return Err(Error::InvalidRunConfig("need static_kept <= tokens and at least 3 layers".into()).into());
            }
            let prune: Vec<usize> = scaled_prune_layers(layers).into_iter().collect();
            let ratio = static_kept as f64 / tokens as f64;
            let dyn_avg = dynamic_average_multiplier(retention, prune.len());
            let estimate = paper_reduction_estimate(layers, ratio, dyn_avg);
            let traj = scheduled_trajectory(layers, tokens, static_kept, &prune, retention);
            let exact = exact_reduction(&traj, tokens, layers, hidden, ffn)?;
            if json {
                let v = serde_json::json!({
                    "estimate": estimate,
                    "static_retention": ratio,
                    "dynamic_average": dyn_avg,
                    "prune_layers": prune,
                    "exact": exact,
                });
                println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
            } else {
                println!("layers {layers}  hidden {hidden}  ffn {ffn}  tokens {tokens} -> {static_kept}");
                println!("prune layers {prune:?}  retention {retention}");
                println!("linear estimate   {estimate:.4}  (static {ratio:.4}, dynamic average {dyn_avg:.5})");
                println!("exact reduction   {:.4}", exact.reduction_fraction);
                println!("discrepancy       {:+.4}", exact.reduction_fraction - estimate);
                println!("full FLOPs        {}", exact.full_flops);
                println!("pruned FLOPs      {}", exact.pruned_flops);
            }
            Ok(())
        }
        Command::Render { common, strategy, cell } => {
            let cfg = common.config()?.resolve()?;
            let strat = specprune_core::pipeline::Strategy::preset(&strategy)?;
            let model = Model::build(cfg.model.clone())?;
            let episode = cfg.episode(cfg.seed)?;
            let run = run_episode(&model, &episode, &cfg.pruner, &strat, cfg.seed)?;
            let dir = cfg.output_root().join("render");
            let mut count = 0;
            for (i, out) in run.outputs.iter().enumerate() {
                count += render_retention(&episode, i, &out.static_result.v_retain, Path::new(&dir), cell)?.len();
            }
            println!("wrote {count} images to {}", dir.display());
            Ok(())
        }
    }
}

fn check(violations: &[String]) -> Result<(), Failure> {
    for v in violations {
        eprintln!("violation: {v}");
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(violations.len()))
    }
}
