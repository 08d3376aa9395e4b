//! Synthetic tabletop episodes: a gripper picks an object up and places it on
//! a goal region while a fixed third-person camera and a wrist camera observe
//! the scene. Frames are patch-feature grids built from orthogonal per-class
//! directions plus a smooth world texture and per-frame Gaussian noise, so
//! cosine similarity separates changed from unchanged patches cleanly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controller::{translational_speed, ActionDelta};
use crate::error::{Error, Result};
use crate::grid::{Frame, PatchFeatureGrid};
use crate::layout::{TokenLayout, TokenSet, View};
use crate::model::AttentionBias;
use crate::static_pruner::{frame_offset, patch_similarity, OffsetFormula, MIN_HISTORY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchClass {
    Table,
    Object,
    Goal,
    Gripper,
    Arm,
}

impl PatchClass {
    pub const ALL: [PatchClass; 5] = [
        PatchClass::Table,
        PatchClass::Object,
        PatchClass::Goal,
        PatchClass::Gripper,
        PatchClass::Arm,
    ];

    pub fn is_task(self) -> bool {
        matches!(self, PatchClass::Object | PatchClass::Goal)
    }

    fn ordinal(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Targeting,
    Approaching,
    Transferring,
    Placing,
}

impl Phase {
    pub fn is_fine(self) -> bool {
        matches!(self, Phase::Approaching | Phase::Placing)
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Targeting => "targeting",
            Phase::Approaching => "approaching",
            Phase::Transferring => "transferring",
            Phase::Placing => "placing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Patches per side of each view's grid.
    pub grid: usize,
    pub views: Vec<View>,
    pub feature_dim: usize,
    pub noise_scale: f64,
    /// Amplitude of the smooth world texture added to every surface patch.
    pub texture_scale: f64,
    pub object_radius: f64,
    pub goal_radius: f64,
    pub gripper_radius: f64,
    pub arm_width: f64,
    /// Width of table seen by the wrist camera at the travel height.
    pub wrist_fov: f64,
    pub text_tokens: usize,
    pub action_slots: usize,
    /// Pre-softmax logit boost for the most salient task patch.
    pub bias_margin: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::small()
    }
}

impl SceneSpec {
    /// 8×8 patches per view, 32-dim features.
    pub fn small() -> Self {
        Self {
            grid: 8,
            views: vec![View::ThirdPerson, View::Wrist],
            feature_dim: 32,
            noise_scale: 0.02,
            texture_scale: 0.1,
            object_radius: 0.12,
            goal_radius: 0.12,
            gripper_radius: 0.08,
            arm_width: 0.05,
            wrist_fov: 0.6,
            text_tokens: 8,
            action_slots: 8,
            bias_margin: 6.0,
            seed: 0,
        }
    }

    /// 17×17 patches per view (578 visual tokens), 64-dim features.
    pub fn paper() -> Self {
        Self {
            grid: 17,
            feature_dim: 64,
            object_radius: 0.09,
            goal_radius: 0.09,
            gripper_radius: 0.06,
            arm_width: 0.035,
            wrist_fov: 0.5,
            text_tokens: 16,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScene(m.to_string()));
        if self.grid == 0 || self.feature_dim < PatchClass::ALL.len() {
            return bad("grid must be positive and feature_dim must fit one direction per class");
        }
        if self.views.is_empty() {
            return bad("at least one view is required");
        }
        if self.text_tokens == 0 || self.action_slots == 0 {
            return bad("text_tokens and action_slots must be positive");
        }
        let finite = [
            self.noise_scale,
            self.texture_scale,
            self.object_radius,
            self.goal_radius,
            self.gripper_radius,
            self.arm_width,
            self.wrist_fov,
            self.bias_margin,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("geometry, noise and margin must be finite and non-negative");
        }
        if self.wrist_fov == 0.0 {
            return bad("wrist_fov must be positive");
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::uniform(&self.views, self.grid * self.grid, self.text_tokens, self.action_slots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub phase: Phase,
    pub steps: usize,
    /// Translational displacement per step.
    pub speed: f64,
    /// Yaw change per step in radians.
    pub yaw_rate: f64,
    pub gripper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub start: [f64; 3],
    pub object: [f64; 2],
    pub goal: [f64; 2],
    /// Travel height and grasp/place height.
    pub z_high: f64,
    pub z_low: f64,
    pub phases: Vec<PhaseSpec>,
}

/// Nominal per-step speeds of the scripted phases.
pub const TRAVEL_SPEED: f64 = 0.08;
pub const PRECISE_SPEED: f64 = 0.02;
const TRAVEL_YAW: f64 = 0.02;

impl TrajectorySpec {
    /// Waypoints of each phase, in order.
    fn waypoints(&self) -> [[f64; 3]; 4] {
        [
            [self.object[0], self.object[1], self.z_high],
            [self.object[0], self.object[1], self.z_low],
            [self.goal[0], self.goal[1], self.z_high],
            [self.goal[0], self.goal[1], self.z_low],
        ]
    }

    /// Four phases reaching each waypoint exactly at constant per-phase speed.
    pub fn scripted(start: [f64; 3], object: [f64; 2], goal: [f64; 2], z_high: f64, z_low: f64) -> Self {
        let mut spec = Self {
            start,
            object,
            goal,
            z_high,
            z_low,
            phases: Vec::new(),
        };
        let phases = [
            (Phase::Targeting, TRAVEL_SPEED, TRAVEL_YAW, 1.0),
            (Phase::Approaching, PRECISE_SPEED, 0.0, 1.0),
            (Phase::Transferring, TRAVEL_SPEED, -TRAVEL_YAW, -1.0),
            (Phase::Placing, PRECISE_SPEED, 0.0, -1.0),
        ];
        let mut from = start;
        for ((phase, nominal, yaw_rate, gripper), to) in phases.into_iter().zip(spec.waypoints()) {
            let dist = dist3(from, to);
            let steps = ((dist / nominal).ceil() as usize).max(1);
            spec.phases.push(PhaseSpec {
                phase,
                steps,
                speed: dist / steps as f64,
                yaw_rate,
                gripper,
            });
            from = to;
        }
        spec
    }

    /// Scripted trajectory with object, goal and start drawn from `seed`.
    pub fn randomized(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616a);
        let mut pick = |lo: f64, hi: f64| rng.random_range(lo..hi);
        loop {
            let object = [pick(0.25, 0.75), pick(0.2, 0.6)];
            let goal = [pick(0.25, 0.75), pick(0.2, 0.6)];
            let start = [pick(0.15, 0.85), pick(0.15, 0.65), 0.45];
            let sep = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if sep(object, goal) >= 0.3 && sep([start[0], start[1]], object) >= 0.25 {
                return Self::scripted(start, object, goal, 0.45, 0.25);
            }
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() || self.phases.iter().any(|p| p.steps == 0) {
            return Err(Error::InvalidScene("every phase needs at least one step".into()));
        }
        if self.phases.iter().any(|p| !(p.speed.is_finite() && p.speed >= 0.0)) {
            return Err(Error::InvalidScene("phase speeds must be finite and non-negative".into()));
        }
        if !(self.z_low > 0.0 && self.z_high > self.z_low) {
            return Err(Error::InvalidScene("need 0 < z_low < z_high".into()));
        }
        Ok(())
    }

    /// Pose (x, y, z, yaw) at every step plus the action executed from it.
    fn rollout(&self) -> Vec<(Phase, [f64; 4], ActionDelta)> {
        let mut out = Vec::with_capacity(self.total_steps());
        let mut pos = self.start;
        let mut yaw = 0.0;
        let waypoints = self.waypoints();
        for (i, ph) in self.phases.iter().enumerate() {
            let to = waypoints.get(i).copied().unwrap_or(pos);
            let d = dist3(pos, to);
            let dir = if d > 0.0 {
                [(to[0] - pos[0]) / d, (to[1] - pos[1]) / d, (to[2] - pos[2]) / d]
            } else {
                [0.0; 3]
            };
            for _ in 0..ph.steps {
                let delta = ActionDelta {
                    dx: dir[0] * ph.speed,
                    dy: dir[1] * ph.speed,
                    dz: dir[2] * ph.speed,
                    d_alpha: 0.0,
                    d_beta: 0.0,
                    d_gamma: ph.yaw_rate,
                    gripper: ph.gripper,
                };
                out.push((ph.phase, [pos[0], pos[1], pos[2], yaw], delta));
                pos = [pos[0] + delta.dx, pos[1] + delta.dy, pos[2] + delta.dz];
                yaw += ph.yaw_rate;
            }
        }
        out
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist2(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

const ARM_BASE: [f64; 2] = [0.5, 1.05];
const TEXTURE_WAVES: usize = 4;
const WRIST_FINGERS: [[f64; 2]; 2] = [[0.3, 0.85], [0.7, 0.85]];
const WRIST_FINGER_RADIUS: f64 = 0.1;

/// Fixed random feature basis of a scene.
#[derive(Debug, Clone)]
struct FeatureBasis {
    class_dirs: Vec<Vec<f64>>,
    waves: Vec<([f64; 2], f64, Vec<f64>)>,
}

impl FeatureBasis {
    fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6665_6174);
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let mut class_dirs: Vec<Vec<f64>> = Vec::new();
        while class_dirs.len() < PatchClass::ALL.len() {
            let mut v = gauss(dim);
            for u in &class_dirs {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                class_dirs.push(v);
            }
        }
        let waves = (0..TEXTURE_WAVES)
            .map(|_| {
                let g = gauss(dim + 3);
                let freq = [g[0] * 2.0, g[1] * 2.0];
                let phase = g[2] * PI;
                let mut dir = g[3..].to_vec();
                let norm = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|a| *a /= norm);
                (freq, phase, dir)
            })
            .collect();
        Self { class_dirs, waves }
    }

    fn texture(&self, p: [f64; 2], scale: f64, out: &mut [f64]) {
        let amp = scale / (self.waves.len() as f64).sqrt();
        for (freq, phase, dir) in &self.waves {
            let c = amp * (2.0 * PI * (freq[0] * p[0] + freq[1] * p[1]) + phase).cos();
            out.iter_mut().zip(dir).for_each(|(o, d)| *o += c * d);
        }
    }
}

/// What the patches of one view show at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewLabels {
    pub classes: Vec<PatchClass>,
    /// Bias salience in [0, 1] per patch; zero outside task patches.
    pub salience: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub task: TokenSet,
    pub dynamic: TokenSet,
    /// `task ∪ dynamic`.
    pub important: TokenSet,
    pub target: ActionDelta,
    pub labels: BTreeMap<View, ViewLabels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub step: usize,
    pub phase: Phase,
    pub pose: [f64; 4],
    pub frame: Frame,
    pub action: ActionDelta,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub layout: TokenLayout,
    pub text_embeddings: Vec<Vec<f64>>,
    pub action_embeddings: Vec<Vec<f64>>,
    pub steps: Vec<EpisodeStep>,
}

/// Format tag written into episode dumps.
pub const EPISODE_FORMAT: &str = "specprune-episode/1";

#[derive(Serialize, Deserialize)]
struct EpisodeDump {
    format: String,
    episode: Episode,
}

impl Episode {
    /// Full model input for one step: visual patches view by view, then
    /// text, then action-slot embeddings.
    pub fn embeddings(&self, step: usize) -> Array2<f64> {
        let d = self.scene.feature_dim;
        let mut out = Array2::zeros((self.layout.seq_len(), d));
        let frame = &self.steps[step].frame;
        for vr in self.layout.view_ranges() {
            let grid = &frame[&vr.view];
            for p in 0..grid.num_patches() {
                out.row_mut(vr.start + p)
                    .iter_mut()
                    .zip(grid.patch(p))
                    .for_each(|(o, v)| *o = *v);
            }
        }
        let tail = self.text_embeddings.iter().chain(&self.action_embeddings);
        for (row, e) in (self.layout.text_range().start..).zip(tail) {
            out.row_mut(row).iter_mut().zip(e).for_each(|(o, v)| *o = *v);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Writes a JSON dump tagged with [`EPISODE_FORMAT`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let dump = EpisodeDump {
            format: EPISODE_FORMAT.to_string(),
            episode: self.clone(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &dump)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let dump: EpisodeDump = serde_json::from_reader(file)?;
        if dump.format != EPISODE_FORMAT {
            return Err(Error::InvalidScene(format!("unknown episode format {}", dump.format)));
        }
        Ok(dump.episode)
    }
}

struct Renderer<'a> {
    scene: &'a SceneSpec,
    basis: &'a FeatureBasis,
}

struct WorldState {
    ee: [f64; 3],
    object: [f64; 2],
    goal: [f64; 2],
    z_high: f64,
}

impl Renderer<'_> {
    fn cell_center(&self, p: usize) -> [f64; 2] {
        let n = self.scene.grid;
        [((p % n) as f64 + 0.5) / n as f64, ((p / n) as f64 + 0.5) / n as f64]
    }

    /// Class and task salience of each patch, plus the world point it sees.
    fn label(&self, view: View, w: &WorldState) -> (ViewLabels, Vec<[f64; 2]>) {
        let s = self.scene;
        let n2 = s.grid * s.grid;
        let mut classes = Vec::with_capacity(n2);
        let mut salience = Vec::with_capacity(n2);
        let mut points = Vec::with_capacity(n2);
        let fov = s.wrist_fov * (w.ee[2] / w.z_high);
        for p in 0..n2 {
            let c = self.cell_center(p);
            let world = match view {
                View::ThirdPerson => c,
                View::Wrist => [w.ee[0] + (c[0] - 0.5) * fov, w.ee[1] + (c[1] - 0.5) * fov],
            };
            let ee = [w.ee[0], w.ee[1]];
            let robot = match view {
                View::ThirdPerson => {
                    if dist2(world, ee) < s.gripper_radius {
                        Some(PatchClass::Gripper)
                    } else if seg_dist(world, ARM_BASE, ee) < s.arm_width {
                        Some(PatchClass::Arm)
                    } else {
                        None
                    }
                }
                View::Wrist => WRIST_FINGERS
                    .iter()
                    .any(|f| dist2(c, *f) < WRIST_FINGER_RADIUS)
                    .then_some(PatchClass::Gripper),
            };
            let d_obj = dist2(world, w.object);
            let d_goal = dist2(world, w.goal);
            let (class, sal) = match robot {
                Some(r) => (r, 0.0),
                None if d_obj < s.object_radius => (PatchClass::Object, 1.0 - 0.5 * d_obj / s.object_radius),
                None if d_goal < s.goal_radius => (PatchClass::Goal, 0.8 * (1.0 - 0.5 * d_goal / s.goal_radius)),
                None => (PatchClass::Table, 0.0),
            };
            classes.push(class);
            salience.push(sal);
            points.push(world);
        }
        (ViewLabels { classes, salience }, points)
    }

    fn render(&self, view: View, labels: &ViewLabels, points: &[[f64; 2]], rng: &mut ChaCha8Rng) -> PatchFeatureGrid {
        let s = self.scene;
        let mut grid = PatchFeatureGrid::zeros(s.grid, s.feature_dim);
        for p in 0..grid.num_patches() {
            let class = labels.classes[p];
            let out = grid.patch_mut(p);
            out.copy_from_slice(&self.basis.class_dirs[class.ordinal()]);
            // robot parts carry texture in camera coordinates, surfaces in world coordinates
            let anchor = match (class, view) {
                (PatchClass::Gripper | PatchClass::Arm, _) => {
                    let c = self.cell_center(p);
                    [c[0] + 3.0, c[1] + 3.0]
                }
                _ => points[p],
            };
            self.basis.texture(anchor, s.texture_scale, out);
            for v in out.iter_mut() {
                *v += s.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        grid
    }
}

fn token_set(layout: &TokenLayout, view: View, patches: impl Iterator<Item = usize>) -> TokenSet {
    let start = layout.view_range(view).map(|vr| vr.start).unwrap_or(0);
    patches.map(|p| start + p).collect()
}

/// Generates the first `steps` steps of the scripted episode.
pub fn generate_episode(scene: &SceneSpec, traj: &TrajectorySpec, steps: usize, tau: f64) -> Result<Episode> {
    scene.validate()?;
    traj.validate()?;
    if steps > traj.total_steps() {
        return Err(Error::InvalidScene(format!(
            "{steps} steps requested from a {}-step trajectory",
            traj.total_steps()
        )));
    }
    let layout = scene.layout()?;
    let basis = FeatureBasis::new(scene.feature_dim, scene.seed);
    let renderer = Renderer { scene, basis: &basis };
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6e6f_6973);
    let mut embed = |count: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let v: Vec<f64> = (0..scene.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.into_iter().map(|a| a / norm).collect()
            })
            .collect()
    };
    let text_embeddings = embed(scene.text_tokens);
    let action_embeddings = embed(scene.action_slots);

    let rollout = traj.rollout();
    let mut out: Vec<EpisodeStep> = Vec::with_capacity(steps);
    for (step, &(phase, pose, action)) in rollout.iter().take(steps).enumerate() {
        let attached = matches!(phase, Phase::Transferring | Phase::Placing);
        let world = WorldState {
            ee: [pose[0], pose[1], pose[2]],
            object: if attached { [pose[0], pose[1]] } else { traj.object },
            goal: traj.goal,
            z_high: traj.z_high,
        };
        let mut frame_rng = ChaCha8Rng::seed_from_u64(scene.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step as u64);
        let mut frame = Frame::new();
        let mut labels = BTreeMap::new();
        for &view in &scene.views {
            let (lab, points) = renderer.label(view, &world);
            frame.insert(view, renderer.render(view, &lab, &points, &mut frame_rng));
            labels.insert(view, lab);
        }

        let mut task = TokenSet::new();
        for (&view, lab) in &labels {
            task.extend(token_set(&layout, view, lab.classes.iter().enumerate().filter(|(_, c)| c.is_task()).map(|(p, _)| p)));
        }
        let mut dynamic = TokenSet::new();
        if step > 0 {
            let v_prev = translational_speed(&out[step - 1].action);
            let offset = frame_offset(v_prev, step.min(MIN_HISTORY - 1), OffsetFormula::Scaled);
            let reference = &out[step - offset].frame;
            for &view in &scene.views {
                let sim = patch_similarity(&reference[&view], &frame[&view])?;
                dynamic.extend(token_set(&layout, view, sim.iter().enumerate().filter(|(_, s)| **s < tau).map(|(p, _)| p)));
            }
        }
        let important = task.union(&dynamic).copied().collect();
        out.push(EpisodeStep {
            step,
            phase,
            pose,
            frame,
            action,
            truth: GroundTruth {
                task,
                dynamic,
                important,
                target: action,
                labels,
            },
        });
    }
    Ok(Episode {
        scene: scene.clone(),
        trajectory: traj.clone(),
        layout,
        text_embeddings,
        action_embeddings,
        steps: out,
    })
}

/// Key bias lifting task patches for text and action queries, proportional
/// to their salience. A zero margin yields an all-zero bias.
pub fn attention_bias_for(episode: &Episode, step: usize) -> AttentionBias {
    let layout = &episode.layout;
    let mut bias = AttentionBias::zeros(layout.seq_len(), layout.text_range().start);
    let margin = episode.scene.bias_margin;
    for vr in layout.view_ranges() {
        let lab = &episode.steps[step].truth.labels[&vr.view];
        for (p, s) in lab.salience.iter().enumerate() {
            bias.key[vr.start + p] = margin * s;
        }
    }
    bias
}

/// Fixed readout gain mapping centroid displacement to action error.
fn readout_gain(seed: u64, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_696e);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Centroid stand-in for a class that no retained patch shows.
const MISSING_CENTROID: [f64; 2] = [-1.0, -1.0];
const CLASS_MATCH: f64 = 0.5;

fn class_centroids(
    grid: &PatchFeatureGrid,
    basis: &FeatureBasis,
    keep: impl Fn(usize) -> bool,
) -> Vec<f64> {
    let n = grid.n();
    let mut out = Vec::new();
    for class in [PatchClass::Object, PatchClass::Goal] {
        let dir = &basis.class_dirs[class.ordinal()];
        let (mut wx, mut wy, mut wsum) = (0.0, 0.0, 0.0);
        for p in (0..grid.num_patches()).filter(|&p| keep(p)) {
            let f = grid.patch(p);
            let norm = f.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let cos = f.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>() / norm;
            let w = (cos - CLASS_MATCH).max(0.0);
            wx += w * ((p % n) as f64 + 0.5) / n as f64;
            wy += w * ((p / n) as f64 + 0.5) / n as f64;
            wsum += w;
        }
        let c = if wsum > 0.0 { [wx / wsum, wy / wsum] } else { MISSING_CENTROID };
        out.extend(c);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub predicted: ActionDelta,
    pub error: f64,
}

/// Predicts the step's action from the task-object and goal centroids of the
/// retained patches. With every patch visible the prediction equals the
/// target; every centroid shift caused by pruning moves it away linearly.
pub fn action_oracle(episode: &Episode, step: usize, retained: &TokenSet) -> OracleOutput {
    let scene = &episode.scene;
    let basis = FeatureBasis::new(scene.feature_dim, scene.seed);
    let st = &episode.steps[step];
    let mut full = Vec::new();
    let mut kept = Vec::new();
    for vr in episode.layout.view_ranges() {
        let grid = &st.frame[&vr.view];
        full.extend(class_centroids(grid, &basis, |_| true));
        kept.extend(class_centroids(grid, &basis, |p| retained.contains(&(vr.start + p))));
    }
    let gain = readout_gain(scene.seed, 7, full.len());
    let target = st.truth.target.to_array();
    let mut pred = [0.0; 7];
    for (r, row) in gain.iter().enumerate() {
        let shift: f64 = row.iter().zip(kept.iter().zip(&full)).map(|(g, (k, f))| g * (k - f)).sum();
        pred[r] = target[r] + shift;
    }
    let predicted = ActionDelta::from_array(pred);
    OracleOutput {
        error: predicted.distance(&st.truth.target),
        predicted,
    }
}
