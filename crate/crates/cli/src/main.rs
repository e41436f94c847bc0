//! Command-line surface: train, generate, embed, extract evaluation views,
//! report model cost, and run the finite-difference verification suites.
//!
//! Exit codes: 0 success, 1 usage or verification failure, 2 data/format
//! error. Setting MIXER360_DETERMINISTIC=1 forces sequential kernels.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixer360::analysis;
use mixer360::config::Config;
use mixer360::error::Error;
use mixer360::generator::sample_latent;
use mixer360::geometry::{embed_snapshot, eval_view_poses, extract_snapshot, EquirectCanvas};
use mixer360::gradcheck;
use mixer360::layers::SceneLabel;
use mixer360::png_io::{read_rgb_png, write_mask_png, write_rgb_png};
use mixer360::rng::{derive_rng, Stream};
use mixer360::tensor::autograd;
use mixer360::trainer::{self, snapshot_pose, Checkpoint, Dataset, TrainState};

#[derive(Parser)]
#[command(name = "mixer360", version, about = "Omnidirectional image generation with an MLP-Mixer conditional GAN", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of class-sorted panoramas.
    Train(TrainArgs),
    /// Generate a panorama from one snapshot picture using a checkpoint.
    Generate(GenerateArgs),
    /// Embed a snapshot picture into an empty equirectangular canvas.
    Embed(EmbedArgs),
    /// Extract the 50 evaluation views from a panorama.
    ExtractViews(ExtractViewsArgs),
    /// Print the analytic parameter/MAC/memory report.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient verification suites.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration file (defaults apply for missing keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root: one subdirectory per scene class, PNG panoramas inside.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, samples, and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Resume training from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the configured batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input snapshot PNG; must match the checkpoint's snapshot size.
    #[arg(long)]
    snapshot: PathBuf,
    /// Scene class: an integer id, or a name resolved via --class-list.
    #[arg(long)]
    label: Option<String>,
    /// Optional text file with one class name per line (line = class id).
    #[arg(long)]
    class_list: Option<PathBuf>,
    /// Latent seed; the same seed reproduces the same image byte-for-byte.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output panorama PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the 50 evaluation views into this directory.
    #[arg(long)]
    views: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Input snapshot PNG.
    #[arg(long)]
    snapshot: PathBuf,
    /// Output canvas PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the embedding mask as a grayscale PNG.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Canvas height in pixels (width is 2x).
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 90.0)]
    fov_h: f64,
    #[arg(long, default_value_t = 90.0)]
    fov_v: f64,
    #[arg(long, default_value_t = 0.0)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0)]
    pitch: f64,
}

#[derive(Args)]
struct ExtractViewsArgs {
    /// Input panorama PNG (width must be twice the height).
    #[arg(long)]
    canvas: PathBuf,
    /// Directory for the 50 view PNGs.
    #[arg(long)]
    out_dir: PathBuf,
    /// Square view size in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// View field of view in degrees.
    #[arg(long, default_value_t = 90.0)]
    fov: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// TOML configuration file; the built-in defaults are used if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Run only the suite with this exact name.
    #[arg(long)]
    only: Option<String>,
    /// Harness self-test: inject a wrong-sign gradient that must fail.
    #[arg(long, default_value_t = false)]
    self_test_inject_failure: bool,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Data { .. }
        | Error::Io(_)
        | Error::Image(_)
        | Error::CheckpointMagic
        | Error::CheckpointVersion { .. }
        | Error::CheckpointTruncated(_)
        | Error::CheckpointUnknownTensor { .. }
        | Error::CheckpointMissingTensor { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; everything else is usage
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Embed(args) => cmd_embed(args),
        Command::ExtractViews(args) => cmd_extract_views(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let mut config = load_config(&args.config)?;
    if let Some(it) = args.iterations {
        config.train.iterations = it;
    }
    if let Some(bs) = args.batch_size {
        config.train.batch_size = bs;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    let dataset = Dataset::load(&args.data, config.model.height)?;
    eprintln!(
        "training on {} images across {} classes",
        dataset.len(),
        dataset.class_names().len()
    );
    let outcome = trainer::fit(&config, &dataset, &args.out, args.resume.as_deref())?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("metrics log: {}", outcome.metrics_log.display());
    Ok(ExitCode::SUCCESS)
}

fn resolve_label(
    label: &Option<String>,
    class_list: &Option<PathBuf>,
    num_classes: usize,
) -> Result<SceneLabel, Error> {
    let names: Vec<String> = match class_list {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::Data {
                path: path.clone(),
                msg: e.to_string(),
            })?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        None => Vec::new(),
    };
    let Some(raw) = label else {
        return Err(Error::Config(format!(
            "missing --label: pass a class id in 0..{} or a class name from --class-list",
            num_classes - 1
        )));
    };
    let id = match raw.parse::<usize>() {
        Ok(id) => id,
        Err(_) => match names.iter().position(|n| n == raw) {
            Some(id) => id,
            None => {
                return Err(Error::Config(format!(
                    "unknown class {raw:?}; valid ids are 0..{}",
                    num_classes - 1
                )))
            }
        },
    };
    if id >= num_classes {
        return Err(Error::LabelOutOfRange {
            label: id,
            num_classes,
        });
    }
    Ok(SceneLabel(id))
}

/// View file name, elevation-major: e+90_y000.png ... e-90_y324.png
fn view_file_name(elev: f64, yaw: f64) -> String {
    format!("e{:+03}_y{:03}.png", elev as i64, yaw as i64)
}

fn write_views(
    canvas: &EquirectCanvas<f32>,
    dir: &Path,
    size: usize,
    fov: f64,
) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    for pose in eval_view_poses(fov) {
        let view = extract_snapshot(canvas, &pose, size, size)?;
        let name = view_file_name(pose.pitch_deg(), pose.yaw_deg().rem_euclid(360.0));
        write_rgb_png(&dir.join(name), &view)?;
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode, Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let config = ckpt.config.clone();
    let label = resolve_label(&args.label, &args.class_list, config.model.num_classes)?;
    let snapshot: mixer360::Tensor<f32> = read_rgb_png(&args.snapshot)?;
    let s = config.model.snapshot.size;
    if snapshot.shape() != [3, s, s] {
        return Err(Error::Data {
            path: args.snapshot.clone(),
            msg: format!(
                "snapshot must be {s}x{s} to match the checkpoint configuration, got {}x{}",
                snapshot.shape()[2],
                snapshot.shape()[1]
            ),
        });
    }
    let state = TrainState::from_checkpoint(&ckpt)?;
    let pose = snapshot_pose(&config)?;
    let (canvas, _mask) = embed_snapshot(&snapshot, &pose, config.model.height)?;
    let (h, w) = (config.model.height, config.model.width_px());
    let x = canvas.pixels().reshape(&[1, 3, h, w])?;
    let mut z_rng = derive_rng(args.seed, Stream::Latent, 0);
    let z = sample_latent(&mut z_rng, 1, config.model.z_dim);
    let img = autograd::no_grad(|| state.gen.generate(&x, &z, &[label], false))?;
    let img3 = img.reshape(&[3, h, w])?;
    write_rgb_png(&args.out, &img3)?;
    println!("wrote {}", args.out.display());
    if let Some(views_dir) = &args.views {
        let out_canvas = EquirectCanvas::new(img3)?;
        write_views(
            &out_canvas,
            views_dir,
            config.eval.view_size,
            config.eval.view_fov_deg,
        )?;
        println!("wrote 50 views under {}", views_dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_embed(args: EmbedArgs) -> Result<ExitCode, Error> {
    let pose = mixer360::geometry::CameraPose::new(args.yaw, args.pitch, args.fov_h, args.fov_v)?;
    let snapshot: mixer360::Tensor<f32> = read_rgb_png(&args.snapshot)?;
    let (canvas, mask) = embed_snapshot(&snapshot, &pose, args.height)?;
    write_rgb_png(&args.out, canvas.pixels())?;
    println!("wrote {}", args.out.display());
    if let Some(mask_path) = &args.mask {
        write_mask_png(mask_path, mask.values())?;
        println!("wrote {}", mask_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_extract_views(args: ExtractViewsArgs) -> Result<ExitCode, Error> {
    let pixels: mixer360::Tensor<f32> = read_rgb_png(&args.canvas)?;
    let shape = pixels.shape().to_vec();
    let canvas = EquirectCanvas::new(pixels).map_err(|_| Error::Data {
        path: args.canvas.clone(),
        msg: format!("panorama must be [3, H, 2H], decoded {shape:?}"),
    })?;
    write_views(&canvas, &args.out_dir, args.size, args.fov)?;
    println!("wrote 50 views under {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode, Error> {
    let config = load_config(&args.config)?;
    config.validate()?;
    print!(
        "{}",
        analysis::render_report(&config.model, &config.train.ablation)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<ExitCode, Error> {
    let suites = gradcheck::suites();
    if let Some(only) = &args.only {
        if !suites.iter().any(|s| s.name == only) {
            let names: Vec<&str> = suites.iter().map(|s| s.name).collect();
            return Err(Error::Config(format!(
                "unknown suite {only:?}; available: {}",
                names.join(", ")
            )));
        }
    }
    let mut failures = 0usize;
    let mut ran = 0usize;
    for suite in &suites {
        if let Some(only) = &args.only {
            if suite.name != only {
                continue;
            }
        }
        for report in (suite.run)() {
            ran += 1;
            let status = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "{status} {}/{} max_rel_err={:.3e} tol={:.0e} ({} elements)",
                suite.name, report.name, report.max_rel_err, report.tolerance, report.checked_elements
            );
            if !report.passed() {
                failures += 1;
            }
        }
    }
    if args.self_test_inject_failure {
        let report = gradcheck::injected_failure_report();
        ran += 1;
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} selftest/{} max_rel_err={:.3e} tol={:.0e}",
            report.name, report.max_rel_err, report.tolerance
        );
        if !report.passed() {
            failures += 1;
        }
    }
    println!("{ran} checks, {failures} failures");
    if failures > 0 {
        Ok(ExitCode::from(1))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}
