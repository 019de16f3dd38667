use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsgs::aggregate::Aggregation;
use bsgs::config::Configurable;
use bsgs::data::{
    generate_synthetic, load_dataset, read_intrinsics, read_pose_file, threads_from_env, with_threads,
    write_dataset, write_pose_file, SynthConfig,
};
use bsgs::image::Image;
use bsgs::lie::SchemeKind;
use bsgs::metrics::{error_map, psnr, ssim};
use bsgs::raster::{render, RenderSettings};
use bsgs::scene::Scene;
use bsgs::train::{run_bsgs, TrainConfig};
use bsgs::{Error, Result};
use clap::{Parser, Subcommand};

/// Deblurring Gaussian splatting from motion-blurred images.
#[derive(Parser, Debug)]
#[command(name = "bsgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic blurred dataset with ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize a scene and per-image exposure trajectories.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// max, mean or topk(k)
        #[arg(long)]
        aggregation: Option<Aggregation>,
        /// Disable the depth and time coupled threshold.
        #[arg(long)]
        fixed_threshold: bool,
        /// Skip the rigid-transform stage.
        #[arg(long)]
        stage1_only: bool,
        /// linear, cubic or bezier
        #[arg(long)]
        scheme: Option<SchemeKind>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render a checkpoint at the poses in a pose file.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pose_file: PathBuf,
        /// Defaults to intrinsics.txt beside the pose file.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare renders against reference images with matching names.
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write per-image error heat maps here.
        #[arg(long)]
        error_maps: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = threads_from_env().and_then(|threads| with_threads(threads, || run(cli.command))).and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, seed } => {
            let mut cfg = SynthConfig::default();
            if let Some(path) = config {
                cfg.apply_file(&path)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = generate_synthetic(&cfg)?;
            write_dataset(&ds, &out)?;
            log::info!("wrote {} views to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            aggregation,
            fixed_threshold,
            stage1_only,
            scheme,
            iterations,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = config {
                cfg.apply_file(&path)?;
            }
            if let Some(a) = aggregation {
                cfg.aggregation = a;
            }
            if let Some(s) = scheme {
                cfg.scheme = s;
                cfg.control_count = None;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.fixed_threshold |= fixed_threshold;
            cfg.stage1_only |= stage1_only;
            cfg.validate()?;
            let ds = load_dataset(&data)?;
            let outcome = run_bsgs(&ds, &cfg, Some(&out))?;
            let mids = ds
                .names
                .iter()
                .zip(&outcome.state.trajectories)
                .map(|(n, t)| Ok((n.clone(), t.mid_pose()?)))
                .collect::<Result<Vec<_>>>()?;
            write_pose_file(&out.join("mid_poses.txt"), &mids)?;
            fs::copy(data.join("intrinsics.txt"), out.join("intrinsics.txt"))?;
            let last = outcome.final_metrics();
            println!(
                "psnr {:.4} ssim {:.4} primitives {}",
                last.psnr, last.ssim, last.primitive_count
            );
            Ok(())
        }
        Command::Render {
            checkpoint,
            pose_file,
            intrinsics,
            out,
        } => {
            let scene = Scene::load(&checkpoint)?;
            let kpath = intrinsics.unwrap_or_else(|| pose_file.with_file_name("intrinsics.txt"));
            let k = read_intrinsics(&kpath)?;
            let settings = RenderSettings::for_scene(&scene);
            fs::create_dir_all(&out)?;
            for (name, pose) in read_pose_file(&pose_file)? {
                let (img, _) = render(&scene, &pose, &k, &settings);
                img.save_png(&out.join(png_name(&name)))?;
            }
            Ok(())
        }
        Command::Eval {
            renders,
            gt,
            report,
            error_maps,
        } => evaluate(&renders, &gt, &report, error_maps.as_deref()),
    }
}

fn png_name(name: &str) -> String {
    if name.to_ascii_lowercase().ends_with(".png") {
        name.to_string()
    } else {
        format!("{name}.png")
    }
}

fn evaluate(renders: &Path, gt: &Path, report: &Path, maps: Option<&Path>) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(renders)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::DatasetMissingComponent(renders.to_path_buf()));
    }
    if let Some(dir) = maps {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::from("name,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for name in &names {
        let reference = gt.join(name);
        if !reference.exists() {
            return Err(Error::DatasetMissingComponent(reference));
        }
        let a = Image::load_png(&renders.join(name))?;
        let b = Image::load_png(&reference)?;
        let (p, s) = (psnr(&a, &b)?, ssim(&a, &b)?);
        if let Some(dir) = maps {
            error_map(&a, &b, &dir.join(name))?;
        }
        writeln!(text, "{name},{p},{s}").unwrap();
        sp += p;
        ss += s;
    }
    let n = names.len() as f64;
    writeln!(text, "mean,{},{}", sp / n, ss / n).unwrap();
    if let Some(parent) = report.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(report, text)?;
    println!("psnr {:.4} ssim {:.4} over {} images", sp / n, ss / n, names.len());
    Ok(())
}
