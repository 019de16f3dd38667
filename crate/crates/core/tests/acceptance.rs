//! End-to-end acceptance checks, one test per criterion. Each test writes a
//! single `criterion N: PASS|FAIL ...` line straight to stdout, so the lines
//! show even when the harness captures output.
//!
//! The training runs behind criteria 4, 5, 6 and 8 share one dataset and are
//! cached, so each configuration trains once per test binary.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use bsgs::aggregate::Aggregation;
use bsgs::blur::{synthesize_blur, BlurTrajectory};
use bsgs::data::{generate_synthetic, with_threads, Dataset, SynthConfig};
use bsgs::densify::{coupled_threshold, space_threshold, time_threshold, DensifyConfig};
use bsgs::image::Image;
use bsgs::lie::{interpolate_pose, se3_exp, se3_log, Pose, SchemeKind, Twist, Vec3};
use bsgs::metrics::{psnr, ssim};
use bsgs::raster::{render, RenderSettings};
use bsgs::train::{lr_at, metrics_csv, run_bsgs, LrSchedule, TrainConfig, TrainOutcome, TrainState};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    let rel = a.inverse() * *b;
    rel.rotation.angle() + (a.translation - b.translation).norm()
}

fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let omega = axis.normalize() * rng.random_range(0.0..max_angle);
    let rho = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    Twist::new(rho, omega)
}

#[test]
fn criterion_1_lie_geometry() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut round_trip: f64 = 0.0;
    for _ in 0..1000 {
        let xi = random_twist(&mut rng, 3.0);
        let back = se3_log(&se3_exp(&xi)).unwrap();
        round_trip = round_trip.max((back.to_vector() - xi.to_vector()).norm());
    }

    let mut endpoint0: f64 = 0.0;
    let mut endpoint1: f64 = 0.0;
    let mut invariance: f64 = 0.0;
    for _ in 0..200 {
        let a = se3_exp(&random_twist(&mut rng, 3.0));
        let mut controls = vec![a];
        for _ in 0..3 {
            let last = *controls.last().unwrap();
            controls.push(last * se3_exp(&random_twist(&mut rng, 1.0)));
        }
        let g = se3_exp(&random_twist(&mut rng, 3.0));
        let moved: Vec<Pose> = controls.iter().map(|c| g * *c).collect();
        for (scheme, n) in [(SchemeKind::Linear, 2), (SchemeKind::CubicSpline, 4), (SchemeKind::Bezier, 4)] {
            let c = &controls[..n];
            endpoint0 = endpoint0.max(pose_distance(&interpolate_pose(c, 0.0, scheme).unwrap(), &c[0]));
            endpoint1 = endpoint1.max(pose_distance(&interpolate_pose(c, 1.0, scheme).unwrap(), &c[n - 1]));
            let s = rng.random_range(0.0..1.0);
            let lhs = interpolate_pose(&moved[..n], s, scheme).unwrap();
            let rhs = g * interpolate_pose(c, s, scheme).unwrap();
            invariance = invariance.max(pose_distance(&lhs, &rhs));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = round_trip < 1e-8 && endpoint0 < 1e-12 && endpoint1 < 1e-9 && invariance < 1e-9 && elapsed < 5.0;
    report(
        1,
        pass,
        &format!(
            "round trip {round_trip:.2e}, s=0 {endpoint0:.2e}, s=1 {endpoint1:.2e}, left invariance {invariance:.2e}, {elapsed:.2}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradients() {
    let start = Instant::now();
    let k = intrinsics32();
    let mut scene_err: f64 = 0.0;
    let mut pose_err: f64 = 0.0;
    for seed in 0..5u64 {
        let scene = random_scene(200 + seed, 4 + 2 * seed as usize);
        let pose = se3_exp(&Twist::new(
            Vec3::new(0.01, -0.02, 0.03) * seed as f64,
            Vec3::new(0.02, 0.01, -0.015) * seed as f64,
        ));
        let upstream = random_upstream(300 + seed, 32, 32);
        scene_err = scene_err.max(scene_gradient_error(&scene, &pose, &k, &upstream));
        pose_err = pose_err.max(pose_gradient_error(&scene, &pose, &k, &upstream));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = scene_err < 1e-3 && pose_err < 1e-3 && elapsed < 60.0;
    report(
        2,
        pass,
        &format!("max relative error: gaussian {scene_err:.2e}, pose {pose_err:.2e}, {elapsed:.1}s"),
    );
    assert!(pass);
}

fn small_dataset() -> Dataset {
    generate_synthetic(&SynthConfig {
        primitives: 40,
        train_views: 4,
        test_views: 1,
        width: 24,
        height: 24,
        frames: 5,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn criterion_3_blur_identities() {
    let scene = random_scene(41, 8);
    let k = intrinsics32();
    let settings = RenderSettings::for_scene(&scene);
    let a = se3_exp(&Twist::new(Vec3::new(0.02, 0.0, -0.01), Vec3::new(0.0, 0.03, 0.01)));
    let b = se3_exp(&Twist::new(Vec3::new(-0.02, 0.01, 0.02), Vec3::new(0.02, -0.02, 0.0)));
    let traj = BlurTrajectory::new(SchemeKind::Linear, vec![a, b], 9).unwrap();
    let (blurred, stack) = synthesize_blur(&scene, &traj, &k, &settings).unwrap();
    let mut mean = vec![0.0; 32 * 32 * 3];
    for s in &stack.params {
        let (img, _) = render(&scene, &traj.pose_at(*s).unwrap(), &k, &settings);
        for (m, v) in mean.iter_mut().zip(img.data()) {
            *m += v / 9.0;
        }
    }
    let mean = Image::from_data(32, 32, mean).unwrap();
    let uniform = blurred
        .data()
        .iter()
        .zip(mean.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let uniform_ok = uniform < 1e-12 && blurred.to_rgb8() == mean.to_rgb8();

    let pose = se3_exp(&Twist::new(Vec3::new(0.01, 0.02, 0.0), Vec3::new(0.01, 0.0, 0.02)));
    let still = BlurTrajectory::stationary(pose, SchemeKind::Bezier, 4, 9).unwrap();
    let (blurred, _) = synthesize_blur(&scene, &still, &k, &settings).unwrap();
    let (sharp, _) = render(&scene, &pose, &k, &settings);
    let zero_motion = blurred
        .data()
        .iter()
        .zip(sharp.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let ds = small_dataset();
    let cfg = TrainConfig {
        n_subframes: 5,
        iterations: 1000,
        weight_lr: 0.05,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&ds, &cfg).unwrap();
    for _ in 0..1000 {
        state.step(&ds, &cfg).unwrap();
    }
    let mut weight_sum: f64 = 0.0;
    let mut moved = false;
    for &i in &ds.train {
        let w = state.trajectories[i].weights();
        weight_sum = weight_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        moved |= w.iter().any(|v| (v - 0.2).abs() > 1e-6);
    }

    let pass = uniform_ok && zero_motion < 1e-6 && weight_sum < 1e-12 && moved;
    report(
        3,
        pass,
        &format!(
            "uniform blend vs mean {uniform:.1e}, zero motion {zero_motion:.1e}, |sum w - 1| after 1000 steps {weight_sum:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_metric_fixtures() {
    let a = Image::filled(16, 16, Vec3::new(0.3, 0.3, 0.3));
    let b = Image::filled(16, 16, Vec3::new(0.4, 0.4, 0.4));
    let p = psnr(&a, &b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..24 * 24 * 3).map(|_| rng.random()).collect();
    let img = Image::from_data(24, 24, data).unwrap();
    let s = ssim(&img, &img).unwrap();
    let sched = LrSchedule {
        start: 1e-3,
        end: 1e-5,
        total: 6000,
    };
    let (l0, l1) = (lr_at(0, &sched), lr_at(6000, &sched));
    let pass = (p - 20.0).abs() < 1e-6 && s == 1.0 && l0 == 1e-3 && l1 == 1e-5;
    report(7, pass, &format!("psnr {p}, ssim {s}, lr endpoints {l0:e} / {l1:e}"));
    assert!(pass);
}

// Desk-scale runs.

fn desk_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate_synthetic(&SynthConfig::default()).unwrap())
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        n_subframes: 9,
        iterations: 6000,
        ..TrainConfig::default()
    }
}

/// Trained outcome for a named configuration, computed at most once.
static RUN_SECONDS: Mutex<Vec<(String, f64)>> = Mutex::new(Vec::new());

/// Wall time of a cached desk-scale run.
fn run_seconds(name: &str) -> f64 {
    desk_run(name);
    let times = RUN_SECONDS.lock().unwrap();
    times.iter().find(|(n, _)| n == name).map(|(_, s)| *s).unwrap()
}

fn desk_run(name: &str) -> &'static TrainOutcome {
    static RUNS: OnceLock<Mutex<HashMap<String, &'static TrainOutcome>>> = OnceLock::new();
    let mut runs = RUNS.get_or_init(Default::default).lock().unwrap();
    if let Some(r) = runs.get(name) {
        return r;
    }
    let base = desk_config();
    let (cfg, threads) = match name {
        "bsgs" => (base, Some(2)),
        "bsgs-1-thread" => (base, Some(1)),
        "naive" => (base.naive(), None),
        "stage1" => (TrainConfig { stage1_only: true, ..base }, None),
        "fixed" => (TrainConfig { fixed_threshold: true, ..base }, None),
        "mean" => (TrainConfig { aggregation: Aggregation::Mean, ..base }, None),
        other => {
            let (agg, seed) = other.split_once('@').expect("aggregation@seed");
            (
                TrainConfig {
                    aggregation: agg.parse().unwrap(),
                    seed: seed.parse().unwrap(),
                    ..base
                },
                None,
            )
        }
    };
    let start = Instant::now();
    let ds = desk_dataset();
    let outcome = with_threads(threads, || run_bsgs(ds, &cfg, None)).unwrap().unwrap();
    let last = outcome.final_metrics();
    println!(
        "run {name}: psnr {:.3} ssim {:.4} primitives {} in {:.0}s",
        last.psnr,
        last.ssim,
        last.primitive_count,
        start.elapsed().as_secs_f64()
    );
    RUN_SECONDS.lock().unwrap().push((name.to_string(), start.elapsed().as_secs_f64()));
    let leaked: &'static TrainOutcome = Box::leak(Box::new(outcome));
    runs.insert(name.to_string(), leaked);
    leaked
}

fn final_psnr(name: &str) -> f64 {
    desk_run(name).final_metrics().psnr
}

#[test]
fn criterion_4_aggregation_ablation() {
    let (max, mean) = (final_psnr("bsgs"), final_psnr("mean"));
    let (pass, detail) = if max >= mean {
        (true, format!("max {max:.3} dB vs mean {mean:.3} dB (+{:.3})", max - mean))
    } else {
        let mut gaps: Vec<f64> = vec![max - mean];
        for seed in [1, 2] {
            gaps.push(final_psnr(&format!("max@{seed}")) - final_psnr(&format!("mean@{seed}")));
        }
        gaps.sort_by(f64::total_cmp);
        (
            gaps[1] >= 0.0,
            format!("max - mean over 3 seeds {gaps:.3?}, median {:.3} dB", gaps[1]),
        )
    };
    // The time limit is per training run; the seed fallback needs several.
    let slowest = ["bsgs", "mean", "max@1", "mean@1", "max@2", "mean@2"]
        .iter()
        .filter(|n| max < mean || ["bsgs", "mean"].contains(n))
        .map(|n| run_seconds(n))
        .fold(0.0, f64::max);
    let pass = pass && slowest < 900.0;
    let detail = format!("{detail}, slowest run {slowest:.0}s");
    report(4, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_5_desk_scale_recovery() {
    let (full, naive, stage1) = (final_psnr("bsgs"), final_psnr("naive"), final_psnr("stage1"));
    let pass = full - naive >= 2.0 && full - stage1 >= 0.3;
    report(
        5,
        pass,
        &format!(
            "bsgs {full:.3} dB, naive {naive:.3} dB (+{:.3}), stage-I only {stage1:.3} dB (+{:.3})",
            full - naive,
            full - stage1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_densification_economy() {
    let cfg = DensifyConfig {
        t_split: 2000,
        ..DensifyConfig::default()
    };
    let depths: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
    let space = depths.windows(2).all(|d| space_threshold(d[0], &cfg) > space_threshold(d[1], &cfg));
    let coupled = [0, 700, 2000, 3500].iter().all(|&t| {
        depths
            .windows(2)
            .all(|d| coupled_threshold(d[0], t, &cfg) > coupled_threshold(d[1], t, &cfg))
    });
    let stage1 = (0..cfg.t_split - 1).all(|t| time_threshold(t, &cfg) > time_threshold(t + 1, &cfg));
    let stage2 = (0..40).all(|k| {
        let t = cfg.t_split + k * cfg.interval;
        time_threshold(t, &cfg) > time_threshold(t + cfg.interval, &cfg)
    });
    let starts = time_threshold(0, &cfg) == cfg.tau0 && time_threshold(cfg.t_split, &cfg) == cfg.tau0;
    let monotone = space && coupled && stage1 && stage2 && starts;

    let stdc = desk_run("bsgs").final_metrics();
    let fixed = desk_run("fixed").final_metrics();
    let ratio = stdc.primitive_count as f64 / fixed.primitive_count as f64;
    let gap = stdc.psnr - fixed.psnr;
    let pass = monotone && ratio <= 0.7 && gap >= -0.5;
    report(
        6,
        pass,
        &format!(
            "monotone {monotone}; primitives {} vs fixed {} ({:.1}% fewer), psnr {:.3} vs {:.3} dB",
            stdc.primitive_count,
            fixed.primitive_count,
            100.0 * (1.0 - ratio),
            stdc.psnr,
            fixed.psnr
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism_across_thread_counts() {
    let a = desk_run("bsgs");
    let b = desk_run("bsgs-1-thread");
    let same_rows = a.metrics.len() == b.metrics.len()
        && a.metrics.iter().zip(&b.metrics).all(|(x, y)| {
            x.iteration == y.iteration
                && x.primitive_count == y.primitive_count
                && x.loss.to_bits() == y.loss.to_bits()
                && x.psnr.to_bits() == y.psnr.to_bits()
                && x.ssim.to_bits() == y.ssim.to_bits()
        });
    let pass = same_rows && metrics_csv(&a.metrics) == metrics_csv(&b.metrics);
    report(
        8,
        pass,
        &format!("{} metric rows compared between 2 and 1 worker threads", a.metrics.len()),
    );
    assert!(pass);
}
