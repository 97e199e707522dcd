//! `lidarflow`: project scans, build ground truth, generate synthetic data, train,
//! run inference, evaluate and render flow.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lidarflow::Error;

use config::KeyValues;

#[derive(Parser)]
#[command(name = "lidarflow", version, about = "Dense optical flow from sparse lidar scans")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Project a KITTI .bin scan to an LRI1 range image.
    Project(ProjectArgs),
    /// Sample dense flow at projected lidar points (GT_Lidar, KITTI PNG on the grid).
    MakeGt(MakeGtArgs),
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train on the train split of a synthetic manifest.
    Train(TrainArgs),
    /// Predict dense flow from two scans.
    Infer(InferArgs),
    /// Score predicted flow against ground truth.
    Eval(EvalArgs),
    /// Render a flow file with the color wheel.
    Viz(VizArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Grid and field-of-view flags; angles in degrees.
#[derive(Args, Clone, Debug)]
pub struct GridArgs {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    azimuth_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    azimuth_max: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    elevation_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    elevation_max: Option<f64>,
    /// key=value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Input scaling applied to valid range-image cells.
#[derive(Args, Clone, Debug)]
pub struct NormArgs {
    #[arg(long, allow_hyphen_values = true)]
    range_scale: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    range_offset: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    refl_scale: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    refl_offset: Option<f64>,
}

#[derive(Args)]
struct ProjectArgs {
    scan: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct MakeGtArgs {
    scan: PathBuf,
    /// Dense flow (.flo or KITTI .png) at the image resolution.
    flow: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Pinhole intrinsics; all four or none (none fits the camera to the grid FOV).
    #[arg(long)]
    fx: Option<f64>,
    #[arg(long)]
    fy: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    cx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    cy: Option<f64>,
    /// Lidar-to-camera translation in camera axes (m).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    translation: Option<Vec<f64>>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    bg_max: Option<f64>,
    /// Fixed background translation "u,v" in pixels.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    background: Option<Vec<f64>>,
    #[arg(long)]
    obj_translation_max: Option<f64>,
    #[arg(long)]
    obj_linear_max: Option<f64>,
    #[arg(long)]
    octaves: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Write only the manifest.
    #[arg(long)]
    manifest_only: bool,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_hold: Option<usize>,
    #[arg(long)]
    lr_half_every: Option<usize>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    norm: NormArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// First frame: KITTI .bin scan or LRI1 .lri range image.
    scan_t: PathBuf,
    scan_t1: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Output file stem.
    #[arg(long, default_value = "pred")]
    name: String,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    norm: NormArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<id>.flo` (or `<id>.png`) predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of `<id>.png` ground truth with optional `<id>_noc.png` and `<id>_fg.png`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    flow: PathBuf,
    /// .ppm or .png
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    max_mag: Option<f64>,
}

fn dispatch(cli: Cli) -> lidarflow::Result<()> {
    lidarflow::training::configure_threads_from_env()?;
    match cli.cmd {
        Cmd::Project(a) => {
            let spec = config::grid_spec(&a.grid, &KeyValues::load(a.grid.config.as_deref())?)?;
            run::project(&a.scan, &a.out, &spec)
        }
        Cmd::MakeGt(a) => {
            arity("--translation", a.translation.as_deref(), 3)?;
            let spec = config::grid_spec(&a.grid, &KeyValues::load(a.grid.config.as_deref())?)?;
            let cam = config::camera(&spec, [a.fx, a.fy, a.cx, a.cy], a.translation.as_deref())?;
            run::make_gt(&a.scan, &a.flow, &a.out, &spec, &cam)
        }
        Cmd::Synth(a) => {
            arity("--background", a.background.as_deref(), 2)?;
            let kv = KeyValues::load(a.grid.config.as_deref())?;
            let spec = config::grid_spec(&a.grid, &kv)?;
            let mut scene = lidarflow::synth::SceneConfig::new(spec, 0);
            let flag = |v: Option<String>, k: &str| v.or_else(|| kv.get(k).map(str::to_string));
            let pairs = [
                ("n_objects", flag(a.objects.map(|v| v.to_string()), "n_objects")),
                ("bg_max", flag(a.bg_max.map(|v| v.to_string()), "bg_max")),
                ("obj_translation_max", flag(a.obj_translation_max.map(|v| v.to_string()), "obj_translation_max")),
                ("obj_linear_max", flag(a.obj_linear_max.map(|v| v.to_string()), "obj_linear_max")),
                ("octaves", flag(a.octaves.map(|v| v.to_string()), "octaves")),
                ("dropout", flag(a.dropout.map(|v| v.to_string()), "dropout")),
                ("background_u", flag(a.background.as_ref().map(|b| b[0].to_string()), "background_u")),
                ("background_v", flag(a.background.as_ref().map(|b| b[1].to_string()), "background_v")),
            ];
            for (k, v) in pairs {
                if let Some(v) = v {
                    scene.apply_pair(k, &v)?;
                }
            }
            let counts = [
                config::pick(a.train, &kv, "train", 8)?,
                config::pick(a.val, &kv, "val", 2)?,
                config::pick(a.test, &kv, "test", 2)?,
            ];
            let seed = config::pick(a.seed, &kv, "seed", 0)?;
            run::synth(&a.out, scene, counts, seed, a.manifest_only)
        }
        Cmd::Train(a) => {
            let kv = KeyValues::load(a.config.as_deref())?;
            let opts = config::train_options(&a, &kv)?;
            run::train(&a.manifest, &a.out, a.resume.as_deref(), &opts)
        }
        Cmd::Infer(a) => {
            let kv = KeyValues::load(a.grid.config.as_deref())?;
            let spec = config::grid_spec(&a.grid, &kv)?;
            let mut net = lidarflow::network::NetworkConfig::new(spec, 16);
            net.base_channels = config::pick(a.base_channels, &kv, "base_channels", 16)?;
            let norm = config::norm(&a.norm, &kv)?;
            let precision = config::precision(a.precision, &kv)?;
            run::infer(&a.checkpoint, &a.scan_t, &a.scan_t1, &a.out, &a.name, net, norm, precision)
        }
        Cmd::Eval(a) => run::eval(&a.pred, &a.gt, &a.out),
        Cmd::Viz(a) => run::viz(&a.flow, &a.out, a.max_mag),
    }
}

/// Comma-separated vector flags need exactly `n` components.
fn arity(flag: &str, v: Option<&[f64]>, n: usize) -> lidarflow::Result<()> {
    match v {
        Some(v) if v.len() != n => Err(Error::Config(format!("{flag} takes {n} comma-separated values, got {}", v.len()))),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_numerical() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}
