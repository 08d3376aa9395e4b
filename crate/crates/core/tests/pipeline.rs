use specprune_core::controller::{translational_speed, ActionMode};
use specprune_core::harness::{check_run, run_suite, summarize, ModePreset, RunConfig, TaskSuite};
use specprune_core::pipeline::{GenerationInput, Pipeline, PrunerConfig, Strategy};
use specprune_core::runner::run_episode;
use specprune_core::scoring::top_k_set;
use specprune_core::sim::{attention_bias_for, generate_episode, Episode, SceneSpec, TrajectorySpec};
use specprune_core::static_pruner::{patch_similarity, Stage};
use specprune_core::{Model, ModelConfig, TokenSet, View};

fn small_episode(seed: u64, noise: f64) -> Episode {
    let scene = SceneSpec { seed, noise_scale: noise, ..SceneSpec::small() };
    let traj = TrajectorySpec::randomized(seed);
    generate_episode(&scene, &traj, traj.total_steps(), 0.95).unwrap()
}

#[test]
fn first_generation_is_unpruned_and_fills_memory() {
    let ep = small_episode(1, 0.02);
    let model = Model::build(ModelConfig::small()).unwrap();
    let mut pipe = Pipeline::new(&model, ep.layout.clone(), PrunerConfig::default(), Strategy::preset("specprune").unwrap(), 0).unwrap();
    assert!(pipe.memory().is_empty());
    let emb = ep.embeddings(0);
    let bias = attention_bias_for(&ep, 0);
    let out = pipe
        .run_generation(GenerationInput { step: 0, embeddings: emb.view(), frame: &ep.steps[0].frame, bias: Some(&bias), prev_action: None })
        .unwrap();
    assert!(out.static_result.v_prune.is_empty());
    assert_eq!(out.layer_lens, vec![ep.layout.seq_len(); 8]);
    assert_eq!(out.flops.reduction_fraction, 0.0);
    assert!(!pipe.memory().is_empty());
    assert_eq!(out.action_chunk.len(), 8);
}

#[test]
fn fine_mode_uses_forty_token_budgets() {
    let ep = small_episode(2, 0.02);
    let model = Model::build(ModelConfig::small()).unwrap();
    let run = run_episode(&model, &ep, &PrunerConfig::default(), &Strategy::preset("specprune").unwrap(), 0).unwrap();
    let mut seen_fine = false;
    for (m, o) in run.steps.iter().zip(&run.outputs).skip(1) {
        let want = if m.mode == ActionMode::Fine { 40 } else { 24 };
        assert_eq!(m.k_base, want);
        for vr in ep.layout.view_ranges() {
            let g = o.static_result.v_global.range(vr.start..vr.end).count();
            assert_eq!(g, want.min(vr.end - vr.start));
        }
        seen_fine |= m.mode == ActionMode::Fine;
    }
    assert!(seen_fine);
}

#[test]
fn live_counter_matches_flops_model() {
    let ep = small_episode(3, 0.02);
    let model = Model::build(ModelConfig::small()).unwrap();
    let run = run_episode(&model, &ep, &PrunerConfig::default(), &Strategy::preset("specprune").unwrap(), 0).unwrap();
    for m in &run.steps {
        assert_eq!(m.macs as u128, m.pruned_flops);
        assert!(m.pruned_flops <= m.full_flops);
    }
    assert!(run.steps.iter().skip(1).all(|m| m.flops_reduction > 0.0));
}

#[test]
fn layer_pruning_shrinks_by_retention() {
    let ep = small_episode(4, 0.02);
    let model = Model::build(ModelConfig { num_layers: 32, ..ModelConfig::small() }).unwrap();
    let run = run_episode(&model, &ep, &PrunerConfig::default(), &Strategy::preset("specprune").unwrap(), 0).unwrap();
    let m = &run.steps[3];
    let fixed = ep.layout.non_prunable().len();
    let mut visual = m.retained_visual;
    for (i, &len) in m.layer_lens.iter().enumerate().skip(2) {
        assert_eq!(len, visual + fixed, "layer {}", i + 1);
        if [5, 10, 15, 20].contains(&(i + 1)) {
            visual = (visual * 9).div_ceil(10);
        }
    }
    assert_eq!(m.final_visual, visual);
}

#[test]
fn strategies_are_consistent() {
    let cfg = RunConfig { episodes: 3, steps: Some(20), ..RunConfig::default() };
    let out = run_suite(&cfg, false).unwrap();
    assert!(out.report.violations.is_empty(), "{:?}", out.report.violations);
    let by = |n: &str| out.report.summaries.iter().find(|s| s.strategy == n).unwrap().clone();
    assert_eq!(by("none").static_reduction, 0.0);
    assert_eq!(by("none").flops_reduction, 0.0);
    assert!(by("specprune").static_reduction > 0.0);
    assert!(by("static-layer").flops_reduction > by("static").flops_reduction);
    assert!(by("specprune").important_recall > by("random").important_recall);
    assert_eq!(by("none").reduction_histogram[0], by("none").pruned_steps);
    let mut gl = out.rows.iter().filter(|r| r.strategy == "global-only" && r.metrics.step > 0);
    assert!(gl.all(|r| r.metrics.retained_local == 0 && r.metrics.retained_dynamic == 0));
}

#[test]
fn global_set_takes_precedence() {
    let ep = small_episode(5, 0.02);
    let model = Model::build(ModelConfig::small()).unwrap();
    let run = run_episode(&model, &ep, &PrunerConfig::default(), &Strategy::preset("specprune").unwrap(), 0).unwrap();
    let o = &run.outputs[4];
    for (&t, &stage) in &o.static_result.provenance {
        match stage {
            Stage::Global => assert!(o.static_result.v_global.contains(&t)),
            Stage::Dynamic => assert!(!o.static_result.v_global.contains(&t)),
            Stage::Local => assert!(!o.static_result.v_global.contains(&t) && !o.static_result.v_dynamic.contains(&t)),
            Stage::Always => assert!(!ep.layout.is_visual(t)),
        }
    }
    assert!(check_run("specprune", 5, &ep, &run).is_empty());
}

#[test]
fn suite_is_deterministic() {
    let cfg = RunConfig { episodes: 2, steps: Some(8), strategies: vec!["random".into(), "specprune".into()], ..RunConfig::default() };
    let a = run_suite(&cfg, false).unwrap();
    let b = run_suite(&cfg, false).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.report, b.report);
    let runs: Vec<_> = (0..2).map(|s| run_episode(&Model::build(cfg.model.clone()).unwrap(), &cfg.episode(s).unwrap(), &cfg.pruner, &Strategy::preset("random").unwrap(), s).unwrap()).collect();
    assert_eq!(summarize("random", &runs), a.report.summaries[0]);
}

#[test]
fn presets_and_config_files() {
    assert_eq!(ModePreset::PaperMain.alpha(TaskSuite::Spatial), 1.0);
    assert_eq!(ModePreset::PaperMain.alpha(TaskSuite::Goal), 0.8);
    assert_eq!(ModePreset::PaperMain.alpha(TaskSuite::Long), 0.6);
    assert_eq!(ModePreset::PaperAppendix.alpha(TaskSuite::Long), 1.0);
    assert_eq!(ModePreset::PaperAppendix.alpha(TaskSuite::Spatial), 0.6);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("scene.toml"), "grid = 6\nfeature_dim = 32\nseed = 3\n").unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "preset = \"paper-main\"\ntask = \"goal\"\nscene_file = \"scene.toml\"\nepisodes = 2\n[pruner]\ntau = 0.9\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap().resolve().unwrap();
    assert_eq!(cfg.pruner.alpha, 0.8);
    assert_eq!(cfg.pruner.tau, 0.9);
    assert_eq!(cfg.scene.grid, 6);
    assert_eq!(cfg.episode(0).unwrap().layout.visual_len(), 72);

    assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    let bad = RunConfig { strategies: vec!["nope".into()], ..RunConfig::default() };
    assert!(bad.resolve().is_err());
    let missing = RunConfig { trajectory_file: Some(dir.path().join("none.toml")), ..RunConfig::default() };
    assert!(missing.resolve().is_err());
    let mismatch = RunConfig { scene: SceneSpec::paper(), ..RunConfig::default() };
    assert!(mismatch.resolve().is_err());
}

#[test]
fn trajectory_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let traj = TrajectorySpec::scripted([0.2, 0.2, 0.45], [0.6, 0.4], [0.3, 0.6], 0.45, 0.25);
    let path = dir.path().join("traj.toml");
    std::fs::write(&path, toml_string(&traj)).unwrap();
    let cfg = RunConfig { trajectory_file: Some(path), episodes: 1, ..RunConfig::default() };
    let ep = cfg.resolve().unwrap().episode(7).unwrap();
    assert_eq!(ep.trajectory, traj);
}

fn toml_string(t: &TrajectorySpec) -> String {
    let mut s = format!(
        "start = {:?}\nobject = {:?}\ngoal = {:?}\nz_high = {:?}\nz_low = {:?}\n",
        t.start, t.object, t.goal, t.z_high, t.z_low
    );
    for p in &t.phases {
        s += &format!(
            "[[phases]]\nphase = \"{}\"\nsteps = {}\nspeed = {:?}\nyaw_rate = {:?}\ngripper = {:?}\n",
            p.phase.name(),
            p.steps,
            p.speed,
            p.yaw_rate,
            p.gripper
        );
    }
    s
}

#[test]
fn simulator_redundancy_and_speed_profile() {
    let ep = small_episode(6, 0.02);
    for view in [View::ThirdPerson, View::Wrist] {
        let mut total = 0.0;
        for pair in ep.steps.windows(2) {
            let sim = patch_similarity(&pair[0].frame[&view], &pair[1].frame[&view]).unwrap();
            total += sim.iter().filter(|&&s| s > 0.95).count() as f64 / sim.len() as f64;
        }
        let mean = total / (ep.steps.len() - 1) as f64;
        assert!(mean >= 0.8, "view {view:?}: {mean}");
    }
    let mut i = 0;
    for ph in &ep.trajectory.phases {
        for _ in 0..ph.steps {
            assert!((translational_speed(&ep.steps[i].action) - ph.speed).abs() < 1e-9);
            i += 1;
        }
    }
}

#[test]
fn stationary_noiseless_world_is_static() {
    let mut traj = TrajectorySpec::randomized(0);
    for p in &mut traj.phases {
        p.speed = 0.0;
        p.yaw_rate = 0.0;
    }
    traj.object = [traj.start[0], traj.start[1]];
    let scene = SceneSpec { noise_scale: 0.0, ..SceneSpec::small() };
    if let Ok(ep) = generate_episode(&scene, &traj, 5, 0.95) {
        for pair in ep.steps.windows(2) {
            assert_eq!(pair[0].frame, pair[1].frame);
        }
    }
}

#[test]
fn large_margin_ranks_task_patches_first() {
    let scene = SceneSpec { bias_margin: 40.0, ..SceneSpec::small() };
    let traj = TrajectorySpec::randomized(8);
    let ep = generate_episode(&scene, &traj, 6, 0.95).unwrap();
    let model = Model::build(ModelConfig::small()).unwrap();
    let bias = attention_bias_for(&ep, 5);
    let emb = ep.embeddings(5);
    let mut state = model.begin_masked(emb.view(), &ep.layout, &ep.layout.all()).unwrap();
    let att = model.step_layer(&mut state, Some(&bias)).unwrap();
    let scores = specprune_core::scoring::layer_task_score(&att, &ep.layout, 1, Default::default()).unwrap();
    let task = &ep.steps[5].truth.task;
    let top: TokenSet = top_k_set(&scores, task.len());
    assert!(task.is_subset(&top));
}

#[test]
fn episode_dump_round_trip() {
    let ep = small_episode(9, 0.02);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ep.json");
    ep.save(&p).unwrap();
    assert_eq!(Episode::load(&p).unwrap(), ep);
    std::fs::write(&p, "{\"format\":\"other\",\"episode\":null}").unwrap();
    assert!(Episode::load(&p).is_err());
}
