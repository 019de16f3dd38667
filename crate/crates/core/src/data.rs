//! Plain-text datasets, the synthetic blur generator and worker-count control.
//!
//! A dataset directory holds
//!
//! ```text
//! images/<name>        blurred training and test inputs (PNG)
//! poses.txt            name qw qx qy qz tx ty tz   (world to camera)
//! points.txt           x y z r g b                 (colors 0..255)
//! intrinsics.txt       fx fy cx cy width height
//! split.txt            name train|test
//! gt/images/<name>     optional sharp mid-exposure images
//! gt/trajectories.txt  optional name + start pose + end pose (14 numbers)
//! gt/scene.bsgs        optional true scene
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blur::{synthesize_blur, BlurTrajectory};
use crate::config::{parse_value, unknown_key, Configurable};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lie::{geodesic, se3_exp, Pose, Rotation, SchemeKind, Twist, Vec3};
use crate::raster::{render, CameraIntrinsics, RenderSettings};
use crate::scene::{bounding_radius, logit, GaussianPrimitive, Scene};

/// Largest accepted deviation of a pose quaternion from unit norm.
pub const QUATERNION_NORM_TOLERANCE: f64 = 0.01;
pub const THREADS_ENV: &str = "BSGS_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Sharp image at mid-exposure, per view.
    pub sharp: Vec<Image>,
    /// Exposure start and end pose, per view.
    pub trajectories: Vec<(Pose, Pose)>,
    pub scene: Option<Scene>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub names: Vec<String>,
    pub images: Vec<Image>,
    /// Initial world-to-camera pose per view.
    pub poses: Vec<Pose>,
    pub points: Vec<Vec3>,
    /// Point colors in `[0, 1]`.
    pub colors: Vec<Vec3>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Pose at which view `i` is evaluated: the true mid-exposure pose when
    /// known, otherwise the initial pose.
    pub fn eval_pose(&self, i: usize) -> Result<Pose> {
        match &self.ground_truth {
            Some(gt) => {
                let (a, b) = gt.trajectories[i];
                geodesic(&a, &b, 0.5)
            }
            None => Ok(self.poses[i]),
        }
    }

    /// Sharp reference for view `i` when known, otherwise its input image.
    pub fn reference(&self, i: usize) -> &Image {
        match &self.ground_truth {
            Some(gt) => &gt.sharp[i],
            None => &self.images[i],
        }
    }
}

fn parse_error(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::DatasetParseError {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    if !path.exists() {
        return Err(Error::DatasetMissingComponent(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.split('#').next().unwrap_or("").trim();
            (!l.is_empty()).then(|| (i + 1, l.split_whitespace().map(str::to_string).collect()))
        })
        .collect())
}

fn numbers(file: &Path, line: usize, fields: &[String]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(file, line, format!("not a finite number: '{f}'")))
        })
        .collect()
}

/// `qw qx qy qz tx ty tz`; near-unit quaternions are normalized with a warning.
fn pose_from_fields(file: &Path, line: usize, v: &[f64]) -> Result<Pose> {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
    if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(parse_error(file, line, format!("quaternion norm {norm} is not close to 1")));
    }
    if (norm - 1.0).abs() > 1e-9 {
        log::warn!("{}:{line}: normalizing quaternion of norm {norm}", file.display());
    }
    let r = Rotation::from_wxyz(v[0], v[1], v[2], v[3]).map_err(|e| parse_error(file, line, e.to_string()))?;
    Ok(Pose::new(r, Vec3::new(v[4], v[5], v[6])))
}

pub fn format_pose(p: &Pose) -> String {
    let [w, x, y, z] = p.rotation.wxyz();
    let t = p.translation;
    format!("{w} {x} {y} {z} {} {} {}", t.x, t.y, t.z)
}

/// Parses a `name qw qx qy qz tx ty tz` file.
pub fn read_pose_file(path: &Path) -> Result<Vec<(String, Pose)>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, f)| {
            if f.len() != 8 {
                return Err(parse_error(path, n, format!("expected 8 fields, found {}", f.len())));
            }
            let v = numbers(path, n, &f[1..])?;
            Ok((f[0].clone(), pose_from_fields(path, n, &v)?))
        })
        .collect()
}

pub fn write_pose_file(path: &Path, entries: &[(String, Pose)]) -> Result<()> {
    let mut text = String::from("# name qw qx qy qz tx ty tz\n");
    for (name, p) in entries {
        writeln!(text, "{name} {}", format_pose(p)).unwrap();
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let lines = read_lines(path)?;
    let (n, f) = lines
        .first()
        .ok_or_else(|| parse_error(path, 1, "empty intrinsics file"))?;
    if f.len() != 6 {
        return Err(parse_error(path, *n, format!("expected 6 fields, found {}", f.len())));
    }
    let v = numbers(path, *n, f)?;
    let size = |x: f64| -> Result<usize> {
        if x >= 1.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(parse_error(path, *n, format!("bad image size {x}")))
        }
    };
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], size(v[4])?, size(v[5])?)
        .map_err(|e| parse_error(path, *n, e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    fs::write(
        path,
        format!("# fx fy cx cy width height\n{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )?;
    Ok(())
}

fn read_points(path: &Path) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (n, f) in read_lines(path)? {
        if f.len() != 6 {
            return Err(parse_error(path, n, format!("expected 6 fields, found {}", f.len())));
        }
        let v = numbers(path, n, &f)?;
        if v[3..].iter().any(|c| !(0.0..=255.0).contains(c)) {
            return Err(parse_error(path, n, "colors must lie in 0..255"));
        }
        points.push(Vec3::new(v[0], v[1], v[2]));
        colors.push(Vec3::new(v[3], v[4], v[5]) / 255.0);
    }
    Ok((points, colors))
}

fn read_split(path: &Path, names: &[String]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (n, f) in read_lines(path)? {
        if f.len() != 2 {
            return Err(parse_error(path, n, "expected 'name train|test'"));
        }
        let idx = names
            .iter()
            .position(|x| *x == f[0])
            .ok_or_else(|| parse_error(path, n, format!("unknown image '{}'", f[0])))?;
        match f[1].as_str() {
            "train" => train.push(idx),
            "test" => test.push(idx),
            other => return Err(parse_error(path, n, format!("unknown split '{other}'"))),
        }
    }
    Ok((train, test))
}

fn read_image(path: &Path, k: &CameraIntrinsics) -> Result<Image> {
    if !path.exists() {
        return Err(Error::DatasetMissingComponent(path.to_path_buf()));
    }
    let img = Image::load_png(path)?;
    if img.width() != k.width || img.height() != k.height {
        return Err(Error::ShapeMismatch(format!(
            "{} is {}x{}, intrinsics say {}x{}",
            path.display(),
            img.width(),
            img.height(),
            k.width,
            k.height
        )));
    }
    Ok(img)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;
    let entries = read_pose_file(&dir.join("poses.txt"))?;
    let (points, colors) = read_points(&dir.join("points.txt"))?;
    let names: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
    let poses = entries.iter().map(|(_, p)| *p).collect();
    let (train, test) = read_split(&dir.join("split.txt"), &names)?;
    let images = names
        .iter()
        .map(|n| read_image(&dir.join("images").join(n), &intrinsics))
        .collect::<Result<Vec<_>>>()?;

    let gt_dir = dir.join("gt");
    let ground_truth = if gt_dir.is_dir() {
        let sharp = names
            .iter()
            .map(|n| read_image(&gt_dir.join("images").join(n), &intrinsics))
            .collect::<Result<Vec<_>>>()?;
        let path = gt_dir.join("trajectories.txt");
        let mut trajectories = Vec::with_capacity(names.len());
        let lines = read_lines(&path)?;
        for name in &names {
            let (n, f) = lines
                .iter()
                .find(|(_, f)| f.first() == Some(name))
                .ok_or_else(|| parse_error(&path, 0, format!("no trajectory for '{name}'")))?;
            if f.len() != 15 {
                return Err(parse_error(&path, *n, format!("expected 15 fields, found {}", f.len())));
            }
            let v = numbers(&path, *n, &f[1..])?;
            trajectories.push((pose_from_fields(&path, *n, &v[..7])?, pose_from_fields(&path, *n, &v[7..])?));
        }
        let scene_path = gt_dir.join("scene.bsgs");
        let scene = scene_path.exists().then(|| Scene::load(&scene_path)).transpose()?;
        Some(GroundTruth {
            sharp,
            trajectories,
            scene,
        })
    } else {
        None
    };

    Ok(Dataset {
        intrinsics,
        names,
        images,
        poses,
        points,
        colors,
        train,
        test,
        ground_truth,
    })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    write_intrinsics(&dir.join("intrinsics.txt"), &ds.intrinsics)?;
    let entries: Vec<(String, Pose)> = ds.names.iter().cloned().zip(ds.poses.iter().copied()).collect();
    write_pose_file(&dir.join("poses.txt"), &entries)?;
    let mut pts = String::from("# x y z r g b\n");
    for (p, c) in ds.points.iter().zip(&ds.colors) {
        let c = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round());
        writeln!(pts, "{} {} {} {} {} {}", p.x, p.y, p.z, c.x, c.y, c.z).unwrap();
    }
    fs::write(dir.join("points.txt"), pts)?;
    let mut split = String::new();
    for (set, label) in [(&ds.train, "train"), (&ds.test, "test")] {
        for &i in set {
            writeln!(split, "{} {label}", ds.names[i]).unwrap();
        }
    }
    fs::write(dir.join("split.txt"), split)?;
    for (name, img) in ds.names.iter().zip(&ds.images) {
        img.save_png(&dir.join("images").join(name))?;
    }
    if let Some(gt) = &ds.ground_truth {
        let gt_dir = dir.join("gt");
        fs::create_dir_all(gt_dir.join("images"))?;
        let mut traj = String::from("# name start(qw qx qy qz tx ty tz) end(qw qx qy qz tx ty tz)\n");
        for ((name, img), (a, b)) in ds.names.iter().zip(&gt.sharp).zip(&gt.trajectories) {
            img.save_png(&gt_dir.join("images").join(name))?;
            writeln!(traj, "{name} {} {}", format_pose(a), format_pose(b)).unwrap();
        }
        fs::write(gt_dir.join("trajectories.txt"), traj)?;
        if let Some(scene) = &gt.scene {
            scene.save(&gt_dir.join("scene.bsgs"))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub primitives: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_degrees: f64,
    /// Camera distance from the scene center, in scene extents.
    pub ring_radius: f64,
    pub ring_elevation_degrees: f64,
    pub max_rotation_degrees: f64,
    /// Largest exposure translation as a fraction of the scene extent.
    pub max_translation: f64,
    pub frames: usize,
    pub pose_noise_degrees: f64,
    /// Pose translation noise as a fraction of the scene extent.
    pub pose_noise_translation: f64,
    /// Point position noise as a fraction of the scene extent.
    pub point_noise: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            primitives: 300,
            train_views: 24,
            test_views: 4,
            width: 64,
            height: 64,
            fov_degrees: 45.0,
            ring_radius: 3.0,
            ring_elevation_degrees: 20.0,
            max_rotation_degrees: 2.0,
            max_translation: 0.02,
            frames: 9,
            pose_noise_degrees: 0.2,
            pose_noise_translation: 0.005,
            point_noise: 0.01,
            min_scale: 0.04,
            max_scale: 0.12,
            seed: 0,
        }
    }
}

impl Configurable for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "primitives" => self.primitives = parse_value(key, value)?,
            "train_views" => self.train_views = parse_value(key, value)?,
            "test_views" => self.test_views = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "fov_degrees" => self.fov_degrees = parse_value(key, value)?,
            "ring_radius" => self.ring_radius = parse_value(key, value)?,
            "ring_elevation_degrees" => self.ring_elevation_degrees = parse_value(key, value)?,
            "max_rotation_degrees" => self.max_rotation_degrees = parse_value(key, value)?,
            "max_translation" => self.max_translation = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "pose_noise_degrees" => self.pose_noise_degrees = parse_value(key, value)?,
            "pose_noise_translation" => self.pose_noise_translation = parse_value(key, value)?,
            "point_noise" => self.point_noise = parse_value(key, value)?,
            "min_scale" => self.min_scale = parse_value(key, value)?,
            "max_scale" => self.max_scale = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.primitives < 4 {
            return bad("need at least 4 primitives");
        }
        if self.train_views == 0 || self.width == 0 || self.height == 0 || self.frames == 0 {
            return bad("views, image size and frames must be positive");
        }
        if self.max_rotation_degrees < 0.0 || self.max_translation < 0.0 {
            return bad("blur magnitudes must be non-negative");
        }
        if self.pose_noise_degrees < 0.0 || self.pose_noise_translation < 0.0 || self.point_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) || !(self.ring_radius > 1.0) {
            return bad("need 0 < fov < 180 and ring radius > 1");
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return bad("need 0 < min_scale <= max_scale");
        }
        Ok(())
    }
}

/// World-to-camera pose at `eye` looking at `target`, with `+z` as world up
/// and camera axes x right, y down, z forward.
pub fn look_at(eye: Vec3, target: Vec3) -> Pose {
    let f = (target - eye).normalize();
    let up = if f.cross(&Vec3::z()).norm() < 1e-6 { Vec3::y() } else { Vec3::z() };
    let r = f.cross(&up).normalize();
    let d = f.cross(&r);
    let m = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    let q = UnitQuaternion::from_matrix(&m);
    let rot = Rotation::from_wxyz(q.w, q.i, q.j, q.k).expect("unit quaternion");
    Pose::new(rot, -(m * eye))
}

fn unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

fn gaussian3<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma
}

/// Random scene inside the unit ball.
pub fn random_scene<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Scene> {
    let prims: Vec<GaussianPrimitive> = (0..cfg.primitives)
        .map(|_| {
            let mean = unit_vector(rng) * rng.random::<f64>().cbrt();
            let q = UnitQuaternion::from_scaled_axis(unit_vector(rng) * rng.random_range(0.0..std::f64::consts::PI));
            let (lo, hi) = (cfg.min_scale.ln(), cfg.max_scale.ln());
            GaussianPrimitive {
                mean,
                rotation: [q.w, q.i, q.j, q.k],
                log_scale: Vec3::new(
                    rng.random_range(lo..=hi),
                    rng.random_range(lo..=hi),
                    rng.random_range(lo..=hi),
                ),
                opacity_logit: logit(rng.random_range(0.5..0.95)),
                color: Vec3::new(rng.random(), rng.random(), rng.random()),
            }
        })
        .collect();
    let extent = bounding_radius(&prims.iter().map(|g| g.mean).collect::<Vec<_>>());
    Scene::new(prims, extent)
}

pub fn synth_intrinsics(cfg: &SynthConfig) -> Result<CameraIntrinsics> {
    let f = 0.5 * cfg.width as f64 / (0.5 * cfg.fov_degrees.to_radians()).tan();
    CameraIntrinsics::new(f, f, cfg.width as f64 / 2.0, cfg.height as f64 / 2.0, cfg.width, cfg.height)
}

fn quantize(img: &Image) -> Image {
    Image::from_rgb8(img.width(), img.height(), &img.to_rgb8()).expect("same shape")
}

/// Builds a synthetic blur dataset. Blurred inputs are the uniform mean of
/// `frames` sharp renders along a linear exposure trajectory centred on a
/// ring pose; images are quantized to 8 bits as they would be on disk.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = random_scene(cfg, &mut rng)?;
    let extent = scene.extent;
    let k = synth_intrinsics(cfg)?;
    let settings = RenderSettings::for_scene(&scene);
    let n = cfg.train_views + cfg.test_views;
    // Test views are spread through the ring rather than bunched at the end.
    let stride = if cfg.test_views == 0 { usize::MAX } else { n / cfg.test_views };

    let mut names = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut sharp = Vec::with_capacity(n);
    let mut trajectories = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..n {
        let azimuth = std::f64::consts::TAU * i as f64 / n as f64;
        let elev = cfg.ring_elevation_degrees.to_radians() * (1.0 + 0.5 * (3.0 * azimuth).sin());
        let r = cfg.ring_radius * extent;
        let eye = Vec3::new(r * elev.cos() * azimuth.cos(), r * elev.cos() * azimuth.sin(), r * elev.sin());
        let mid = look_at(eye, Vec3::zeros());

        let angle = cfg.max_rotation_degrees.to_radians() * rng.random_range(0.5..=1.0);
        let shift = cfg.max_translation * extent * rng.random_range(0.5..=1.0);
        let xi = Twist::new(unit_vector(&mut rng) * shift, unit_vector(&mut rng) * angle);
        let start = se3_exp(&(-0.5 * xi)) * mid;
        let end = se3_exp(&(0.5 * xi)) * mid;
        let traj = BlurTrajectory::new(SchemeKind::Linear, vec![start, end], cfg.frames)?;
        let (blurred, _) = synthesize_blur(&scene, &traj, &k, &settings)?;
        let (clean, _) = render(&scene, &traj.mid_pose()?, &k, &settings);

        let noise = Twist::new(
            gaussian3(&mut rng, cfg.pose_noise_translation * extent),
            gaussian3(&mut rng, cfg.pose_noise_degrees.to_radians()),
        );
        poses.push(se3_exp(&noise) * traj.mid_pose()?);
        names.push(format!("view_{i:03}.png"));
        images.push(quantize(&blurred));
        sharp.push(quantize(&clean));
        trajectories.push((start, end));
        if cfg.test_views > 0 && i % stride == stride / 2 && test.len() < cfg.test_views {
            test.push(i);
        } else {
            train.push(i);
        }
    }

    let points = scene
        .primitives
        .iter()
        .map(|g| g.mean + gaussian3(&mut rng, cfg.point_noise * extent))
        .collect();
    let colors = scene
        .primitives
        .iter()
        .map(|g| g.color.map(|c| (c * 255.0).round() / 255.0))
        .collect();
    Ok(Dataset {
        intrinsics: k,
        names,
        images,
        poses,
        points,
        colors,
        train,
        test,
        ground_truth: Some(GroundTruth {
            sharp,
            trajectories,
            scene: Some(scene),
        }),
    })
}

/// Worker count from `BSGS_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}
