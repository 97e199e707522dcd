//! Command bodies. Every output directory gets a `run.txt` describing the
//! invocation before any data is written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lidarflow::eval::{evaluate, EvalMasks, EvalReport, Region, Occlusion};
use lidarflow::flow::{flow_to_color, read_flow, read_mask_png, write_flo, write_kitti_png, write_mask_png, FlowField};
use lidarflow::lidar::{
    load_point_cloud, project_flow_to_lidar, project_to_range_image, read_lri, save_point_cloud, write_lri,
    CameraModel, GridSpec, InputNorm, RangeImage,
};
use lidarflow::network::{param_count, read_checkpoint, write_checkpoint, Network, NetworkConfig, NetworkInputs, NetworkParams};
use lidarflow::synth::{Manifest, SceneConfig, Split};
use lidarflow::tensor::Real;
use lidarflow::training::{site_names, trace_csv, train_loop, TrainState};
use lidarflow::{Error, Result};

use crate::config::TrainOptions;
use crate::Precision;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

/// `run.txt`: command, version, seed and resolved settings. No timestamps, so
/// reruns produce identical files.
fn write_run_manifest(dir: &Path, command: &str, seed: u64, pairs: &[(String, String)]) -> Result<()> {
    let mut s = format!("command={command}\nversion=v{}\nseed={seed}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    write_text(&dir.join("run.txt"), &s)
}

fn grid_pairs(spec: &GridSpec) -> Vec<(String, String)> {
    [
        ("rows", spec.rows.to_string()),
        ("cols", spec.cols.to_string()),
        ("height", spec.height.to_string()),
        ("width", spec.width.to_string()),
        ("azimuth_min", spec.azimuth.0.to_degrees().to_string()),
        ("azimuth_max", spec.azimuth.1.to_degrees().to_string()),
        ("elevation_min", spec.elevation.0.to_degrees().to_string()),
        ("elevation_max", spec.elevation.1.to_degrees().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn parent_dir(out: &Path) -> Result<()> {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => mkdir(p),
        _ => Ok(()),
    }
}

pub fn project(scan: &Path, out: &Path, spec: &GridSpec) -> Result<()> {
    let cloud = load_point_cloud(scan)?;
    let img = project_to_range_image(&cloud, spec);
    parent_dir(out)?;
    write_lri(out, &img)?;
    println!("{} points, {} valid cells of {}", cloud.len(), img.valid_count(), spec.cells());
    Ok(())
}

pub fn make_gt(scan: &Path, flow: &Path, out: &Path, spec: &GridSpec, cam: &CameraModel) -> Result<()> {
    let cloud = load_point_cloud(scan)?;
    let dense = read_flow(flow)?;
    let sparse = project_flow_to_lidar(&cloud, &dense, cam, spec)?;
    parent_dir(out)?;
    write_kitti_png(out, sparse.flow())?;
    println!("{} valid cells of {}", sparse.valid_count(), spec.cells());
    Ok(())
}

pub fn synth(out: &Path, scene: SceneConfig, counts: [usize; 3], seed: u64, manifest_only: bool) -> Result<()> {
    let manifest = Manifest::new(scene, counts, seed)?;
    mkdir(out)?;
    let grid = grid_pairs(&manifest.scene.spec);
    let mut pairs = manifest.scene.to_pairs();
    pairs.retain(|(k, _)| k != "seed" && !grid.iter().any(|(g, _)| g == k));
    pairs.extend(grid);
    pairs.extend([
        ("train".to_string(), counts[0].to_string()),
        ("val".to_string(), counts[1].to_string()),
        ("test".to_string(), counts[2].to_string()),
        (
            "outputs".to_string(),
            if manifest_only { "manifest.txt" } else { "manifest.txt,frames/,gt/,gt_lidar/" }.to_string(),
        ),
    ]);
    write_run_manifest(out, "synth", seed, &pairs)?;
    manifest.write(out.join("manifest.txt"))?;
    if manifest_only {
        return Ok(());
    }
    let (frames, gt, gt_lidar) = (out.join("frames"), out.join("gt"), out.join("gt_lidar"));
    for d in [&frames, &gt, &gt_lidar] {
        mkdir(d)?;
    }
    let spec = manifest.scene.spec;
    for rec in &manifest.records {
        let s = manifest.generate(rec)?;
        let id = &rec.id;
        save_point_cloud(frames.join(format!("{id}_t0.bin")), &s.cloud)?;
        save_point_cloud(frames.join(format!("{id}_t1.bin")), &s.xt1.to_point_cloud(&spec))?;
        write_lri(frames.join(format!("{id}_t0.lri")), &s.xt)?;
        write_lri(frames.join(format!("{id}_t1.lri")), &s.xt1)?;
        write_kitti_png(gt.join(format!("{id}.png")), &s.gt_dense)?;
        write_flo(gt.join(format!("{id}.flo")), &s.gt_dense)?;
        let (h, w) = (s.masks.height, s.masks.width);
        write_mask_png(gt.join(format!("{id}_noc.png")), h, w, &s.masks.noc)?;
        write_mask_png(gt.join(format!("{id}_fg.png")), h, w, &s.masks.fg)?;
        write_kitti_png(gt_lidar.join(format!("{id}.png")), s.gt_lidar.flow())?;
    }
    println!("{} frames written to {}", manifest.records.len(), out.display());
    Ok(())
}

pub fn train(manifest_path: &Path, out: &Path, resume: Option<&Path>, opts: &TrainOptions) -> Result<()> {
    match opts.precision {
        Precision::F32 => train_as::<f32>(manifest_path, out, resume, opts),
        Precision::F64 => train_as::<f64>(manifest_path, out, resume, opts),
    }
}

fn train_as<T: Real>(manifest_path: &Path, out: &Path, resume: Option<&Path>, opts: &TrainOptions) -> Result<()> {
    let manifest = Manifest::read(manifest_path)?;
    let cfg = &opts.train;
    let net = Network::new(NetworkConfig::new(manifest.scene.spec, opts.base_channels))?;
    cfg.validate(net.config().site_count())?;
    let mut state = match resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            ck.params.check_layout(net.config())?;
            TrainState::<T>::from_checkpoint(&ck)
        }
        None => TrainState::new(net.init_params(cfg.seed)?),
    };
    mkdir(out)?;
    let mut pairs = opts.snapshot();
    pairs.retain(|(k, _)| k != "seed");
    pairs.push(("manifest".into(), manifest_path.display().to_string()));
    pairs.push(("resume".into(), resume.map_or("none".into(), |p| p.display().to_string())));
    pairs.extend(grid_pairs(&manifest.scene.spec));
    pairs.push(("outputs".into(), "checkpoints/,final.lfw,trace.csv".into()));
    pairs.push(("param_count".into(), param_count(net.config()).to_string()));
    for s in net.layout() {
        pairs.push((format!("layout.{}", s.name), format!("{:?}", s.dims)));
    }
    write_run_manifest(out, "train", cfg.seed, &pairs)?;

    let dataset = manifest
        .split(Split::Train)
        .map(|r| manifest.generate(r)?.to_train_sample(&net))
        .collect::<Result<Vec<_>>>()?;
    let ck_dir = out.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        mkdir(&ck_dir)?;
    }
    let trace = train_loop(&net, &dataset, cfg, &mut state, |iter, st| {
        write_checkpoint(ck_dir.join(format!("iter_{iter:08}.lfw")), &st.to_checkpoint())
    })?;
    write_checkpoint(out.join("final.lfw"), &state.to_checkpoint())?;
    write_text(&out.join("trace.csv"), &trace_csv(&site_names(&net), &trace))?;
    if let Some(last) = trace.last() {
        println!("iter {} loss {:.6}", last.iter + 1, last.total);
    }
    Ok(())
}

fn load_frame(path: &Path, spec: &GridSpec) -> Result<RangeImage> {
    let img = if path.extension().is_some_and(|e| e == "lri") {
        read_lri(path)?
    } else {
        project_to_range_image(&load_point_cloud(path)?, spec)
    };
    if (img.rows(), img.cols()) != (spec.rows, spec.cols) {
        return Err(Error::Shape(format!(
            "{} is {}x{}, grid expects {}x{}",
            path.display(),
            img.rows(),
            img.cols(),
            spec.rows,
            spec.cols
        )));
    }
    Ok(img)
}

#[allow(clippy::too_many_arguments)]
pub fn infer(
    checkpoint: &Path,
    scan_t: &Path,
    scan_t1: &Path,
    out: &Path,
    name: &str,
    cfg: NetworkConfig,
    norm: InputNorm,
    precision: Precision,
) -> Result<()> {
    let net = Network::new(cfg)?;
    let ck = read_checkpoint(checkpoint)?;
    ck.params.check_layout(net.config())?;
    let spec = net.config().spec;
    let (xt, xt1) = (load_frame(scan_t, &spec)?, load_frame(scan_t1, &spec)?);
    let field = match precision {
        Precision::F32 => predict::<f32>(&net, &ck.params, &xt, &xt1, &norm)?,
        Precision::F64 => predict::<f64>(&net, &ck.params.cast(), &xt, &xt1, &norm)?,
    };
    mkdir(out)?;
    write_flo(out.join(format!("{name}.flo")), &field)?;
    flow_to_color(&field, None)?.write_ppm(out.join(format!("{name}.ppm")))?;
    Ok(())
}

fn predict<T: Real>(
    net: &Network,
    params: &NetworkParams<T>,
    xt: &RangeImage,
    xt1: &RangeImage,
    norm: &InputNorm,
) -> Result<FlowField> {
    let inputs = NetworkInputs::<T>::from_range_images(xt, xt1, norm)?;
    let field = net.full_forward(params, &inputs)?.final_field(0)?;
    if field.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iter: 0,
            term: "inference output".into(),
        });
    }
    Ok(field)
}

fn optional_mask(path: PathBuf, dims: (usize, usize)) -> Result<Option<Vec<bool>>> {
    if !path.exists() {
        return Ok(None);
    }
    let (h, w, m) = read_mask_png(&path)?;
    if (h, w) != dims {
        return Err(Error::Shape(format!("{} is {h}x{w}, flow is {}x{}", path.display(), dims.0, dims.1)));
    }
    Ok(Some(m))
}

/// Scores every `<id>.png` in `gt_dir` against `<id>.flo` (or `<id>.png`) in `pred_dir`.
pub fn eval(pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let mut ids: Vec<String> = fs::read_dir(gt_dir)
        .map_err(io(gt_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".png").map(str::to_string))
        .filter(|id| !id.ends_with("_noc") && !id.ends_with("_fg"))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Config(format!("no ground truth frames in {}", gt_dir.display())));
    }
    let mut total = EvalReport::default();
    let mut frames = String::from("id,epe,fl_bg,fl_fg,fl_all\n");
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
    for id in &ids {
        let gt = read_flow(gt_dir.join(format!("{id}.png")))?;
        let flo = pred_dir.join(format!("{id}.flo"));
        let pred_path = if flo.exists() { flo } else { pred_dir.join(format!("{id}.png")) };
        let pred = read_flow(&pred_path)?;
        let noc = optional_mask(gt_dir.join(format!("{id}_noc.png")), gt.dims())?;
        let fg = optional_mask(gt_dir.join(format!("{id}_fg.png")), gt.dims())?;
        let masks = EvalMasks::for_gt(&gt, noc, fg)?;
        let rep = evaluate(&pred, &gt, &masks)?;
        let _ = writeln!(
            frames,
            "{id},{},{},{},{}",
            fmt(rep.epe_mean()),
            fmt(rep.fl(Region::Background, Occlusion::Occ)),
            fmt(rep.fl(Region::Foreground, Occlusion::Occ)),
            fmt(rep.fl(Region::All, Occlusion::Occ)),
        );
        total.merge(&rep);
    }
    mkdir(out)?;
    write_text(&out.join("report.csv"), &total.to_csv())?;
    write_text(&out.join("report.txt"), &total.to_table())?;
    write_text(&out.join("frames.csv"), &frames)?;
    print!("{}", total.to_table());
    Ok(())
}

pub fn viz(flow: &Path, out: &Path, max_mag: Option<f64>) -> Result<()> {
    let img = flow_to_color(&read_flow(flow)?, max_mag)?;
    parent_dir(out)?;
    if out.extension().is_some_and(|e| e == "png") {
        img.write_png(out)
    } else {
        img.write_ppm(out)
    }
}
