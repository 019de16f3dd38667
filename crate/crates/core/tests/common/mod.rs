//! Finite-difference oracles shared by the gradient and acceptance suites.
#![allow(dead_code)]

use bsgs::image::Image;
use bsgs::lie::{Pose, Twist, Vec3};
use bsgs::raster::{backward, backward_exact_pose, render, render_frozen, CameraIntrinsics, RenderSettings};
use bsgs::scene::{logit, GaussianPrimitive, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn intrinsics32() -> CameraIntrinsics {
    CameraIntrinsics::new(60.0, 60.0, 16.0, 16.0, 32, 32).unwrap()
}

/// `n` primitives in front of an identity camera, well inside the view,
/// with opacities below the alpha clamp. Depths are stratified so no two
/// primitives can swap depth order under a finite-difference step.
pub fn random_scene(seed: u64, n: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slab = 1.0 / n as f64;
    let prims = (0..n)
        .map(|i| GaussianPrimitive {
            mean: Vec3::new(
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                1.8 + slab * (i as f64 + rng.random_range(0.1..0.9)),
            ),
            rotation: [
                rng.random_range(0.5..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ],
            log_scale: Vec3::new(
                rng.random_range(-3.0..-2.0),
                rng.random_range(-3.0..-2.0),
                rng.random_range(-3.0..-2.0),
            ),
            opacity_logit: logit(rng.random_range(0.3..0.85)),
            color: Vec3::new(rng.random(), rng.random(), rng.random()),
        })
        .collect();
    Scene::new(prims, 1.0).unwrap()
}

pub fn random_upstream(seed: u64, w: usize, h: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Image::from_data(w, h, data).unwrap()
}

fn dot(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Parameter groups of a primitive, each a small vector.
pub const GROUPS: [&str; 5] = ["mean", "rotation", "log_scale", "opacity_logit", "color"];

fn group_values(p: &GaussianPrimitive, group: &str) -> Vec<f64> {
    match group {
        "mean" => p.mean.iter().copied().collect(),
        "rotation" => p.rotation.to_vec(),
        "log_scale" => p.log_scale.iter().copied().collect(),
        "opacity_logit" => vec![p.opacity_logit],
        "color" => p.color.iter().copied().collect(),
        _ => unreachable!(),
    }
}

fn set_value(p: &mut GaussianPrimitive, group: &str, c: usize, v: f64) {
    match group {
        "mean" => p.mean[c] = v,
        "rotation" => p.rotation[c] = v,
        "log_scale" => p.log_scale[c] = v,
        "opacity_logit" => p.opacity_logit = v,
        "color" => p.color[c] = v,
        _ => unreachable!(),
    }
}

fn analytic_group(g: &bsgs::raster::SceneGradients, i: usize, group: &str) -> Vec<f64> {
    match group {
        "mean" => g.mean[i].iter().copied().collect(),
        "rotation" => g.rotation[i].to_vec(),
        "log_scale" => g.log_scale[i].iter().copied().collect(),
        "opacity_logit" => vec![g.opacity_logit[i]],
        "color" => g.color[i].iter().copied().collect(),
        _ => unreachable!(),
    }
}

/// `|a - f| / |f|` over a parameter group; absolute when `|f|` is tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|f| f * f).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Worst relative error between the analytic Gaussian-parameter gradients
/// and central differences of `<upstream, render>`, over every primitive and
/// parameter group.
pub fn scene_gradient_error(scene: &Scene, pose: &Pose, k: &CameraIntrinsics, upstream: &Image) -> f64 {
    let settings = RenderSettings::for_scene(scene).smooth();
    let (_, graph) = render(scene, pose, k, &settings);
    let (grads, _) = backward(&graph, upstream).unwrap();
    let objective = |s: &Scene| dot(&render(s, pose, k, &settings).0, upstream);

    let mut worst: f64 = 0.0;
    for i in 0..scene.len() {
        for group in GROUPS {
            let values = group_values(&scene.primitives[i], group);
            let mut numeric = Vec::with_capacity(values.len());
            for (c, &v) in values.iter().enumerate() {
                let h = 1e-4 * v.abs().max(1.0);
                let mut plus = scene.clone();
                set_value(&mut plus.primitives[i], group, c, v + h);
                let mut minus = scene.clone();
                set_value(&mut minus.primitives[i], group, c, v - h);
                numeric.push((objective(&plus) - objective(&minus)) / (2.0 * h));
            }
            let analytic = analytic_group(&grads, i, group);
            let err = relative_error(&analytic, &numeric);
            worst = worst.max(err);
        }
    }
    worst
}

/// Relative error of the pose gradient against central differences of
/// `<upstream, render>` over left perturbations, with projected covariances
/// frozen at the base pose.
pub fn pose_gradient_error(scene: &Scene, pose: &Pose, k: &CameraIntrinsics, upstream: &Image) -> f64 {
    let settings = RenderSettings::for_scene(scene).smooth();
    let (_, base) = render(scene, pose, k, &settings);
    let frozen = base.cov2d_snapshot();
    let (_, graph) = render_frozen(scene, pose, k, &settings, &frozen);
    let (_, analytic) = backward(&graph, upstream).unwrap();

    let h = 1e-5;
    let mut numeric = [0.0; 6];
    for (c, slot) in numeric.iter_mut().enumerate() {
        let mut e = [0.0; 6];
        e[c] = h;
        let plus = pose.perturb_left(&Twist::from_vector(&e.into()));
        e[c] = -h;
        let minus = pose.perturb_left(&Twist::from_vector(&e.into()));
        let fp = dot(&render_frozen(scene, &plus, k, &settings, &frozen).0, upstream);
        let fm = dot(&render_frozen(scene, &minus, k, &settings, &frozen).0, upstream);
        *slot = (fp - fm) / (2.0 * h);
    }
    relative_error(analytic.to_vector().as_slice(), &numeric)
}

/// Relative error of the exact pose gradient against central differences of
/// `<upstream, render>` over left perturbations, covariances included.
pub fn exact_pose_gradient_error(scene: &Scene, pose: &Pose, k: &CameraIntrinsics, upstream: &Image) -> f64 {
    let settings = RenderSettings::for_scene(scene).smooth();
    let (_, graph) = render(scene, pose, k, &settings);
    let (_, analytic) = backward_exact_pose(&graph, upstream).unwrap();

    let h = 1e-5;
    let mut numeric = [0.0; 6];
    for (c, slot) in numeric.iter_mut().enumerate() {
        let mut e = [0.0; 6];
        e[c] = h;
        let plus = pose.perturb_left(&Twist::from_vector(&e.into()));
        e[c] = -h;
        let minus = pose.perturb_left(&Twist::from_vector(&e.into()));
        let fp = dot(&render(scene, &plus, k, &settings).0, upstream);
        let fm = dot(&render(scene, &minus, k, &settings).0, upstream);
        *slot = (fp - fm) / (2.0 * h);
    }
    relative_error(analytic.to_vector().as_slice(), &numeric)
}
