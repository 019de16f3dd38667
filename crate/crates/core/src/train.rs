//! Two-stage optimization of a Gaussian scene and per-image exposure
//! trajectories against motion-blurred images.
//!
//! Stage one refines the camera trajectories together with the scene. Stage
//! two freezes each image's mid-exposure pose and instead optimizes a rigid
//! transform trajectory relative to it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::aggregate::{aggregate, Aggregation};
use crate::blur::{blur_backward, synthesize_blur, BlurTrajectory, Stage};
use crate::config::{parse_bool, parse_value, unknown_key, Configurable};
use crate::data::{format_pose, Dataset};
use crate::densify::{densify_and_prune, DensifyConfig, DensifyState};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lie::{se3_exp, Pose, Rotation, SchemeKind, Twist, Vec3};
use crate::metrics::{loss, psnr, ssim};
use crate::raster::{backward, backward_exact_pose, render, RenderSettings, SceneGradients};
use crate::scene::{init_scene, Scene};

/// Exponential learning-rate decay from `start` at iteration 0 to `end` at
/// iteration `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub total: usize,
}

pub fn lr_at(iteration: usize, schedule: &LrSchedule) -> f64 {
    if iteration == 0 || schedule.total == 0 {
        return schedule.start;
    }
    if iteration >= schedule.total {
        return schedule.end;
    }
    let f = iteration as f64 / schedule.total as f64;
    schedule.start * (schedule.end / schedule.start).powf(f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Adam moments for a row-major parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    width: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Moments {
    pub fn new(rows: usize, width: usize) -> Self {
        Self {
            width,
            m: vec![0.0; rows * width],
            v: vec![0.0; rows * width],
            steps: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len() / self.width
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Updates the moments of entry `(row, col)` and returns the parameter
    /// increment.
    pub fn step(&mut self, row: usize, col: usize, grad: f64, lr: f64, cfg: &AdamConfig) -> f64 {
        let i = row * self.width + col;
        self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad;
        self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad * grad;
        let m_hat = self.m[i] / (1.0 - cfg.beta1.powi(self.steps));
        let v_hat = self.v[i] / (1.0 - cfg.beta2.powi(self.steps));
        -lr * m_hat / (v_hat.sqrt() + cfg.eps)
    }

    /// Rebuilds rows after densification; `None` rows start from zero.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let w = self.width;
        let pick = |src: &[f64]| -> Vec<f64> {
            origin
                .iter()
                .flat_map(|o| match o {
                    Some(i) => src[i * w..(i + 1) * w].to_vec(),
                    None => vec![0.0; w],
                })
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    pub fn reset(&mut self) {
        *self = Moments::new(self.rows(), self.width);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SceneMoments {
    mean: Moments,
    rotation: Moments,
    scale: Moments,
    opacity: Moments,
    color: Moments,
}

impl SceneMoments {
    fn new(n: usize) -> Self {
        Self {
            mean: Moments::new(n, 3),
            rotation: Moments::new(n, 4),
            scale: Moments::new(n, 3),
            opacity: Moments::new(n, 1),
            color: Moments::new(n, 3),
        }
    }

    fn all(&mut self) -> [&mut Moments; 5] {
        [&mut self.mean, &mut self.rotation, &mut self.scale, &mut self.opacity, &mut self.color]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub n_subframes: usize,
    pub iterations: usize,
    /// Fraction of the iterations spent in the first stage.
    pub stage1_fraction: f64,
    pub stage1_only: bool,
    pub scheme: SchemeKind,
    /// Control poses per trajectory; the scheme's default when unset.
    pub control_count: Option<usize>,
    pub aggregation: Aggregation,
    pub pose_lr: (f64, f64),
    pub rigid_lr: (f64, f64),
    pub weight_lr: f64,
    /// Position learning rate, in scene extents per step.
    pub position_lr: (f64, f64),
    pub color_lr: f64,
    pub opacity_lr: f64,
    pub scale_lr: f64,
    pub rotation_lr: f64,
    pub adam: AdamConfig,
    pub optimize_poses: bool,
    pub optimize_scene: bool,
    pub learn_weights: bool,
    /// Restart the blend weights from uniform when the second stage begins.
    pub relearn_weights_stage2: bool,
    /// Spread of the initial control poses around the input pose (radians,
    /// and scene extents for translation).
    pub init_jitter: f64,
    pub densify: DensifyConfig,
    /// Densification stops after this fraction of the iterations.
    pub densify_until_fraction: f64,
    pub fixed_threshold: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            n_subframes: crate::blur::DEFAULT_SUBFRAMES,
            iterations: 6000,
            stage1_fraction: 0.4,
            stage1_only: false,
            scheme: SchemeKind::Linear,
            control_count: None,
            aggregation: Aggregation::Max,
            pose_lr: (1e-3, 1e-5),
            rigid_lr: (1e-3, 1e-5),
            weight_lr: 5e-3,
            position_lr: (1.6e-4, 1.6e-6),
            color_lr: 2.5e-3,
            opacity_lr: 0.05,
            scale_lr: 5e-3,
            rotation_lr: 1e-3,
            adam: AdamConfig::default(),
            optimize_poses: true,
            optimize_scene: true,
            learn_weights: true,
            relearn_weights_stage2: false,
            init_jitter: 1e-3,
            densify: DensifyConfig::default(),
            densify_until_fraction: 0.7,
            fixed_threshold: false,
            seed: 0,
            log_every: 100,
        }
    }
}

impl Configurable for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.densify;
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "n_subframes" => self.n_subframes = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "stage1_fraction" => self.stage1_fraction = parse_value(key, value)?,
            "stage1_only" => self.stage1_only = parse_bool(key, value)?,
            "scheme" => self.scheme = value.parse()?,
            "control_count" => self.control_count = Some(parse_value(key, value)?),
            "aggregation" => self.aggregation = value.parse()?,
            "pose_lr_start" => self.pose_lr.0 = parse_value(key, value)?,
            "pose_lr_end" => self.pose_lr.1 = parse_value(key, value)?,
            "rigid_lr_start" => self.rigid_lr.0 = parse_value(key, value)?,
            "rigid_lr_end" => self.rigid_lr.1 = parse_value(key, value)?,
            "weight_lr" => self.weight_lr = parse_value(key, value)?,
            "position_lr_start" => self.position_lr.0 = parse_value(key, value)?,
            "position_lr_end" => self.position_lr.1 = parse_value(key, value)?,
            "color_lr" => self.color_lr = parse_value(key, value)?,
            "opacity_lr" => self.opacity_lr = parse_value(key, value)?,
            "scale_lr" => self.scale_lr = parse_value(key, value)?,
            "rotation_lr" => self.rotation_lr = parse_value(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "optimize_poses" => self.optimize_poses = parse_bool(key, value)?,
            "optimize_scene" => self.optimize_scene = parse_bool(key, value)?,
            "learn_weights" => self.learn_weights = parse_bool(key, value)?,
            "relearn_weights_stage2" => self.relearn_weights_stage2 = parse_bool(key, value)?,
            "init_jitter" => self.init_jitter = parse_value(key, value)?,
            "densify_tau0" => d.tau0 = parse_value(key, value)?,
            "densify_alpha" => d.alpha = parse_value(key, value)?,
            "densify_beta" => d.beta = parse_value(key, value)?,
            "densify_gamma" => d.gamma = parse_value(key, value)?,
            "densify_eta" => d.eta = parse_value(key, value)?,
            "densify_interval" => d.interval = parse_value(key, value)?,
            "densify_start" => d.start = parse_value(key, value)?,
            "densify_until_fraction" => self.densify_until_fraction = parse_value(key, value)?,
            "min_opacity" => d.min_opacity = parse_value(key, value)?,
            "fixed_threshold" => self.fixed_threshold = parse_bool(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Plain single-frame 3DGS on the blurred inputs: one subframe, fixed
    /// poses and threshold, no second stage.
    pub fn naive(mut self) -> Self {
        self.n_subframes = 1;
        self.optimize_poses = false;
        self.learn_weights = false;
        self.stage1_only = true;
        self.fixed_threshold = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.n_subframes == 0 || self.iterations == 0 {
            return bad("n_subframes and iterations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return bad("stage1_fraction must lie in [0, 1]".into());
        }
        for (name, (a, b)) in [("pose_lr", self.pose_lr), ("rigid_lr", self.rigid_lr), ("position_lr", self.position_lr)] {
            if !(a > 0.0 && b > 0.0 && b <= a) {
                return bad(format!("{name} schedule must be positive and non-increasing"));
            }
        }
        let rates = [self.weight_lr, self.color_lr, self.opacity_lr, self.scale_lr, self.rotation_lr];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return bad("learning rates must be non-negative".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam needs betas in [0, 1) and eps > 0".into());
        }
        if self.init_jitter < 0.0 || self.log_every == 0 {
            return bad("init_jitter must be non-negative and log_every positive".into());
        }
        self.scheme.check_control_count(self.control_count())?;
        self.densify_config().validate()
    }

    pub fn control_count(&self) -> usize {
        self.control_count.unwrap_or(self.scheme.default_control_count())
    }

    /// Iteration at which the second stage begins.
    pub fn t_split(&self) -> usize {
        if self.stage1_only {
            self.iterations
        } else {
            (self.stage1_fraction * self.iterations as f64).round() as usize
        }
    }

    pub fn densify_config(&self) -> DensifyConfig {
        let mut d = DensifyConfig {
            t_split: self.t_split(),
            until: (self.densify_until_fraction * self.iterations as f64).round() as usize,
            ..self.densify.clone()
        };
        if self.fixed_threshold {
            d = d.fixed();
        }
        d
    }
}

/// One row of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub primitive_count: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("iteration,loss,psnr,ssim,primitive_count\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.iteration, r.loss, r.psnr, r.ssim, r.primitive_count).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub view: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub scene: Scene,
    /// One trajectory per dataset view; only training views are optimized.
    pub trajectories: Vec<BlurTrajectory>,
    pub iteration: usize,
    pub stage: Stage,
    pub densify: DensifyState,
    pub settings: RenderSettings,
    scene_moments: SceneMoments,
    control_moments: Vec<Moments>,
    logit_moments: Vec<Moments>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl TrainState {
    /// Scene from the dataset's point cloud.
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let scene = init_scene(&ds.points, &ds.colors)?;
        Self::with_scene(ds, cfg, scene)
    }

    pub fn with_scene(ds: &Dataset, cfg: &TrainConfig, scene: Scene) -> Result<Self> {
        cfg.validate()?;
        if ds.train.is_empty() {
            return Err(Error::Config("dataset has no training views".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let count = cfg.control_count();
        let extent = scene.extent;
        let mut trajectories = Vec::with_capacity(ds.len());
        for pose in &ds.poses {
            let mut sample = || rng.sample::<f64, _>(StandardNormal) * cfg.init_jitter;
            let xi = Twist::new(
                Vec3::new(sample(), sample(), sample()) * extent,
                Vec3::new(sample(), sample(), sample()),
            );
            let controls = (0..count)
                .map(|k| {
                    let f = if count > 1 { k as f64 / (count - 1) as f64 - 0.5 } else { 0.0 };
                    se3_exp(&(f * xi)) * *pose
                })
                .collect();
            trajectories.push(BlurTrajectory::new(cfg.scheme, controls, cfg.n_subframes)?);
        }
        let n = scene.len();
        Ok(Self {
            settings: RenderSettings::for_scene(&scene),
            densify: DensifyState::new(n),
            scene_moments: SceneMoments::new(n),
            control_moments: (0..ds.len()).map(|_| Moments::new(count, 6)).collect(),
            logit_moments: (0..ds.len()).map(|_| Moments::new(1, cfg.n_subframes)).collect(),
            scene,
            trajectories,
            iteration: 0,
            stage: Stage::Pose,
            rng,
            order: Vec::new(),
        })
    }

    fn next_view(&mut self, ds: &Dataset) -> usize {
        if self.order.is_empty() {
            let mut order = ds.train.clone();
            order.shuffle(&mut self.rng);
            order.reverse();
            self.order = order;
        }
        self.order.pop().expect("training views")
    }

    /// Switches every trajectory to rigid transforms about its frozen
    /// mid-exposure pose.
    pub fn enter_stage2(&mut self, cfg: &TrainConfig) -> Result<()> {
        if self.stage == Stage::Rigid {
            return Ok(());
        }
        for (traj, moments) in self.trajectories.iter_mut().zip(&mut self.control_moments) {
            *traj = traj.to_rigid_stage()?;
            moments.reset();
        }
        if cfg.relearn_weights_stage2 {
            for (traj, moments) in self.trajectories.iter_mut().zip(&mut self.logit_moments) {
                traj.weight_logits.iter_mut().for_each(|l| *l = 0.0);
                moments.reset();
            }
        }
        self.stage = Stage::Rigid;
        Ok(())
    }

    /// Training loss of one view under the current parameters.
    pub fn probe_loss(&self, ds: &Dataset, view: usize, cfg: &TrainConfig) -> Result<f64> {
        let (blurred, _) = synthesize_blur(&self.scene, &self.trajectories[view], &ds.intrinsics, &self.settings)?;
        Ok(loss(&blurred, &ds.images[view], cfg.lambda)?.0)
    }

    /// One optimization step on the next training view.
    pub fn step(&mut self, ds: &Dataset, cfg: &TrainConfig) -> Result<StepReport> {
        let t = self.iteration;
        if self.stage == Stage::Pose && t >= cfg.t_split() && !cfg.stage1_only {
            self.enter_stage2(cfg)?;
        }
        let view = self.next_view(ds);
        let traj = &self.trajectories[view];
        let (blurred, stack) = synthesize_blur(&self.scene, traj, &ds.intrinsics, &self.settings)?;
        let (value, dl_dblur) = loss(&blurred, &ds.images[view], cfg.lambda)?;
        if !value.is_finite() {
            return Err(Error::DivergedTraining { iteration: t, loss: value });
        }
        let (dl_dframes, dl_dlogits) = blur_backward(&stack, &dl_dblur)?;
        // Camera poses follow the projected means only. The second stage moves
        // the primitives rigidly, covariances included, so its gradient is exact.
        let adjoint = match self.stage {
            Stage::Pose => backward,
            Stage::Rigid => backward_exact_pose,
        };
        let per_frame: Vec<(SceneGradients, Twist)> = stack
            .graphs
            .par_iter()
            .zip(&dl_dframes)
            .map(|(graph, g)| adjoint(graph, g))
            .collect::<Result<_>>()?;

        let n = per_frame.len() as f64;
        let count = self.scene.len();
        let mut grads = SceneGradients::zeros(count);
        for (g, _) in &per_frame {
            grads.add_scaled(g, 1.0);
        }
        // Positional gradients are pooled across subframes; scaling by n makes
        // mean pooling coincide with the plain sum over subframes.
        let world: Vec<Vec<[f64; 3]>> = per_frame
            .iter()
            .map(|(g, _)| g.mean.iter().map(|m| [n * m.x, n * m.y, n * m.z]).collect())
            .collect();
        let screen: Vec<Vec<[f64; 2]>> = per_frame
            .iter()
            .map(|(g, _)| g.mean2d.iter().map(|m| [n * m.x, n * m.y]).collect())
            .collect();
        let pooled_world = aggregate(&world, cfg.aggregation)?;
        let pooled_screen = aggregate(&screen, cfg.aggregation)?;

        let dcfg = cfg.densify_config();
        if t < dcfg.until {
            let mid = traj.mid_pose()?;
            let depths: Vec<Option<f64>> = self
                .scene
                .primitives
                .iter()
                .zip(&grads.visible)
                .map(|(g, &vis)| vis.then(|| mid.apply(&g.mean).z))
                .collect();
            self.densify
                .accumulate(&pooled_screen, &pooled_world, &depths, self.scene.extent)?;
        }

        if cfg.optimize_scene {
            self.update_scene(&grads, &pooled_world, cfg, t);
        }
        if cfg.optimize_poses {
            let twists: Vec<Twist> = per_frame.iter().map(|(_, tw)| *tw).collect();
            let control_grads = self.trajectories[view].control_gradients(&twists)?;
            let lr = match self.stage {
                Stage::Pose => lr_at(
                    t,
                    &LrSchedule {
                        start: cfg.pose_lr.0,
                        end: cfg.pose_lr.1,
                        total: cfg.t_split(),
                    },
                ),
                Stage::Rigid => lr_at(
                    t - cfg.t_split(),
                    &LrSchedule {
                        start: cfg.rigid_lr.0,
                        end: cfg.rigid_lr.1,
                        total: cfg.iterations - cfg.t_split(),
                    },
                ),
            };
            let moments = &mut self.control_moments[view];
            moments.begin_step();
            let traj = &mut self.trajectories[view];
            for (c, g) in control_grads.iter().enumerate() {
                let g = g.to_vector();
                let delta: [f64; 6] = std::array::from_fn(|k| moments.step(c, k, g[k], lr, &cfg.adam));
                traj.controls[c] = traj.controls[c].perturb_left(&Twist::from_vector(&delta.into()));
            }
        }
        if cfg.learn_weights && dl_dlogits.len() > 1 {
            let moments = &mut self.logit_moments[view];
            moments.begin_step();
            let traj = &mut self.trajectories[view];
            for (i, g) in dl_dlogits.iter().enumerate() {
                traj.weight_logits[i] += moments.step(0, i, *g, cfg.weight_lr, &cfg.adam);
            }
        }

        self.iteration += 1;
        if dcfg.is_scheduled(self.iteration) && self.iteration <= dcfg.until {
            let report = densify_and_prune(&mut self.scene, &mut self.densify, &dcfg, self.iteration, &mut self.rng)?;
            for m in self.scene_moments.all() {
                m.remap(&report.origin);
            }
        }
        Ok(StepReport { view, loss: value })
    }

    fn update_scene(&mut self, grads: &SceneGradients, pooled_mean: &[[f64; 3]], cfg: &TrainConfig, t: usize) {
        let pos_lr = self.scene.extent
            * lr_at(
                t,
                &LrSchedule {
                    start: cfg.position_lr.0,
                    end: cfg.position_lr.1,
                    total: cfg.iterations,
                },
            );
        let adam = cfg.adam;
        let mo = &mut self.scene_moments;
        for m in mo.all() {
            m.begin_step();
        }
        for (i, g) in self.scene.primitives.iter_mut().enumerate() {
            for c in 0..3 {
                g.mean[c] += mo.mean.step(i, c, pooled_mean[i][c], pos_lr, &adam);
                g.log_scale[c] += mo.scale.step(i, c, grads.log_scale[i][c], cfg.scale_lr, &adam);
                g.color[c] += mo.color.step(i, c, grads.color[i][c], cfg.color_lr, &adam);
            }
            for c in 0..4 {
                g.rotation[c] += mo.rotation.step(i, c, grads.rotation[i][c], cfg.rotation_lr, &adam);
            }
            g.opacity_logit += mo.opacity.step(i, 0, grads.opacity_logit[i], cfg.opacity_lr, &adam);
        }
    }

    /// Sharp render of view `i` at its evaluation pose.
    pub fn render_view(&self, ds: &Dataset, i: usize) -> Result<Image> {
        Ok(render(&self.scene, &ds.eval_pose(i)?, &ds.intrinsics, &self.settings).0)
    }

    /// Mean PSNR and SSIM over the test views, or over the training views
    /// when there are none.
    pub fn evaluate(&self, ds: &Dataset) -> Result<(f64, f64)> {
        let views = if ds.test.is_empty() { &ds.train } else { &ds.test };
        let mut p = 0.0;
        let mut s = 0.0;
        for &i in views {
            let img = self.render_view(ds, i)?;
            p += psnr(&img, ds.reference(i))?;
            s += ssim(&img, ds.reference(i))?;
        }
        let n = views.len() as f64;
        Ok((p / n, s / n))
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
    /// Sharp mid-exposure renders of the test views.
    pub renders: Vec<(String, Image)>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> &MetricRow {
        self.metrics.last().expect("at least one metrics row")
    }
}

/// Trains from the dataset's point cloud for `cfg.iterations` steps. When
/// `out` is given, writes the checkpoint, trajectory sidecar, metrics report
/// and test renders there.
pub fn run_bsgs(ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let state = TrainState::new(ds, cfg)?;
    run_from(state, ds, cfg, out)
}

pub fn run_from(mut state: TrainState, ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut metrics = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0usize;
    while state.iteration < cfg.iterations {
        let report = match state.step(ds, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let (Error::DivergedTraining { .. }, Some(dir)) = (&e, out) {
                    state.scene.save(&dir.join("diverged.bsgs"))?;
                    write_trajectories(&dir.join("diverged_trajectories.txt"), ds, &state)?;
                }
                return Err(e);
            }
        };
        window += report.loss;
        window_len += 1;
        if state.iteration % cfg.log_every == 0 || state.iteration == cfg.iterations {
            let (p, s) = state.evaluate(ds)?;
            let row = MetricRow {
                iteration: state.iteration,
                loss: window / window_len as f64,
                psnr: p,
                ssim: s,
                primitive_count: state.scene.len(),
            };
            log::info!(
                "iter {} stage {} loss {:.5} psnr {:.3} ssim {:.4} primitives {}",
                row.iteration,
                state.stage.number(),
                row.loss,
                row.psnr,
                row.ssim,
                row.primitive_count
            );
            metrics.push(row);
            window = 0.0;
            window_len = 0;
        }
    }
    let renders = ds
        .test
        .iter()
        .map(|&i| Ok((ds.names[i].clone(), state.render_view(ds, i)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        state.scene.save(&dir.join("scene.bsgs"))?;
        write_trajectories(&dir.join("trajectories.txt"), ds, &state)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        let rdir = dir.join("renders");
        fs::create_dir_all(&rdir)?;
        for (name, img) in &renders {
            img.save_png(&rdir.join(name))?;
        }
    }
    Ok(TrainOutcome { state, metrics, renders })
}

/// Trajectory sidecar: a `stage N` header, then per image
/// `name scheme control_count controls... anchor logit_count logits...`
/// with poses as `qw qx qy qz tx ty tz`.
pub fn write_trajectories(path: &Path, ds: &Dataset, state: &TrainState) -> Result<()> {
    let mut s = format!(
        "stage {}\n# name scheme control_count controls(qw qx qy qz tx ty tz)... anchor logit_count logits...\n",
        state.stage.number()
    );
    for (name, traj) in ds.names.iter().zip(&state.trajectories) {
        write!(s, "{name} {} {}", traj.scheme.name(), traj.controls.len()).unwrap();
        for c in &traj.controls {
            write!(s, " {}", format_pose(c)).unwrap();
        }
        write!(s, " {} {}", format_pose(&traj.anchor), traj.weight_logits.len()).unwrap();
        for l in &traj.weight_logits {
            write!(s, " {l}").unwrap();
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<(Stage, Vec<(String, BlurTrajectory)>)> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, m: &str| Error::DatasetParseError {
        file: path.to_path_buf(),
        line,
        message: m.to_string(),
    };
    let mut stage = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f[0] == "stage" {
            stage = Some(match f.get(1) {
                Some(&"1") => Stage::Pose,
                Some(&"2") => Stage::Rigid,
                _ => return Err(err(i + 1, "stage must be 1 or 2")),
            });
            continue;
        }
        let stage = stage.ok_or_else(|| err(i + 1, "missing stage header"))?;
        let num = |j: usize| -> Result<f64> {
            f.get(j)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| err(i + 1, "malformed number"))
        };
        let pose = |j: usize| -> Result<Pose> {
            let r = Rotation::from_wxyz(num(j)?, num(j + 1)?, num(j + 2)?, num(j + 3)?)
                .map_err(|e| err(i + 1, &e.to_string()))?;
            Ok(Pose::new(r, Vec3::new(num(j + 4)?, num(j + 5)?, num(j + 6)?)))
        };
        let scheme: SchemeKind = f.get(1).ok_or_else(|| err(i + 1, "missing scheme"))?.parse()?;
        let count = num(2)? as usize;
        let controls = (0..count).map(|c| pose(3 + 7 * c)).collect::<Result<Vec<_>>>()?;
        let anchor = pose(3 + 7 * count)?;
        let at = 10 + 7 * count;
        let n = num(at)? as usize;
        let logits = (0..n).map(|j| num(at + 1 + j)).collect::<Result<Vec<_>>>()?;
        if f.len() != at + 1 + n {
            return Err(err(i + 1, "unexpected field count"));
        }
        let mut traj = BlurTrajectory::new(scheme, controls, n.max(1))?;
        traj.stage = stage;
        traj.anchor = anchor;
        traj.weight_logits = logits;
        out.push((f[0].to_string(), traj));
    }
    Ok((stage.ok_or_else(|| err(1, "missing stage header"))?, out))
}
