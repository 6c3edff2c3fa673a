use std::path::{Path, PathBuf};

use meshcorr::autodiff::read_checkpoint;
use meshcorr::config::KvConfig;
use meshcorr::correction::{ablation_csv, ablation_study, correct as apply_correction, error_overlay, evaluate, AblationMode, MetricSpace};
use meshcorr::dataset::{frame_dir, list_frames, read_error, read_feature_root, read_features, read_samples, write_error, write_features};
use meshcorr::groundtruth::{compute_gt, GroundTruthConfig};
use meshcorr::image::{write_mask, write_pfm, write_pnm, Image};
use meshcorr::metrics::reports_to_csv;
use meshcorr::network::{FeatureSelection, Model};
use meshcorr::raster::{rasterize as render, FeatureKind};
use meshcorr::scene::{load_mesh, load_trajectory, save_mesh, save_trajectory, CameraIntrinsics};
use meshcorr::synthetic::{default_intrinsics, generate, SceneSpec};
use meshcorr::train::{predict_errors, train as fit, Sample, TrainConfig};

use crate::run::{io, Manifest, Staging};
use crate::{require, CliError, Common};

type Result<T> = std::result::Result<T, CliError>;

const INFER_BATCH: usize = 8;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(Model::from_checkpoint(read_checkpoint::<f32>(path)?)?)
}

fn disabled_kinds(text: &str) -> Result<Vec<FeatureKind>> {
    if text.trim().is_empty() || text.trim() == "none" {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|name| {
            FeatureKind::from_name(name.trim())
                .ok_or_else(|| CliError::Usage(format!("unknown feature `{}`", name.trim())))
        })
        .collect()
}

/// Samples from repeated `--features` / `--gt` pairs.
fn load_pairs(features: &[PathBuf], gt: &[PathBuf]) -> Result<Vec<Sample>> {
    if features.len() != gt.len() {
        return Err(CliError::Usage(format!(
            "{} feature roots but {} error roots",
            features.len(),
            gt.len()
        )));
    }
    let mut out = Vec::new();
    for (f, g) in features.iter().zip(gt) {
        require(f)?;
        require(g)?;
        out.extend(read_samples(f, g)?);
    }
    Ok(out)
}

pub fn gen_synthetic(task: Option<String>, seed: Option<u64>, common: &Common) -> Result<()> {
    let mut cfg = common.load_config()?;
    if let Some(t) = task {
        cfg.set("task", &t);
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string());
    }
    let task: String = cfg.take_or("task", "bias".to_string())?;
    let base = match task.as_str() {
        "clean" => SceneSpec::clean(0),
        "bias" => SceneSpec::bias_task(0),
        "street" => SceneSpec::street(0),
        other => return Err(CliError::Usage(format!("unknown task `{other}` (clean, bias, street)"))),
    };
    let spec = base.override_from_kv(&mut cfg)?;
    let d = default_intrinsics();
    let intr = CameraIntrinsics::new(
        cfg.take_or("fx", d.fx)?,
        cfg.take_or("fy", d.fy)?,
        cfg.take_or("cx", d.cx)?,
        cfg.take_or("cy", d.cy)?,
        cfg.take_or("width", d.width)?,
        cfg.take_or("height", d.height)?,
    )?;
    cfg.finish()?;
    spec.validate()?;
    let scene = generate(&spec)?;

    let stage = Staging::new(&common.out)?;
    save_mesh(&scene.laser, &stage.path().join("laser.ply"))?;
    save_mesh(&scene.camera, &stage.path().join("camera.ply"))?;
    save_trajectory(&scene.trajectory, &stage.path().join("poses.txt"))?;
    write_text(&stage.path().join("intrinsics.cfg"), &intr.to_config_string())?;

    let mut m = Manifest::new("gen-synthetic");
    m.config("task", &task)
        .config("seed", spec.seed)
        .config("length", spec.length)
        .config("half_width", spec.half_width)
        .config("camera_height", spec.camera_height)
        .config("grid_step", spec.grid_step)
        .config("box_count", spec.box_count)
        .config("box_size_min", spec.box_size.0)
        .config("box_size_max", spec.box_size.1)
        .config("walls", spec.walls)
        .config("frames", spec.frames)
        .config("frame_step", spec.frame_step)
        .config("height_variation", spec.height_variation)
        .config_text(&intr.to_config_string());
    stage.commit(m)
}

pub fn rasterize(mesh: &Path, poses: &Path, intrinsics: &Path, common: &Common) -> Result<()> {
    common.load_config()?.finish()?;
    for p in [mesh, poses, intrinsics] {
        require(p)?;
    }
    let mesh_data = load_mesh(mesh)?;
    let traj = load_trajectory(poses)?;
    let intr = CameraIntrinsics::load(intrinsics)?;

    let stage = Staging::new(&common.out)?;
    for (frame, pose) in traj.iter() {
        write_features(&frame_dir(stage.path(), frame), &render(&mesh_data, pose, &intr))?;
    }
    let mut m = Manifest::new("rasterize");
    m.input("mesh", mesh).input("poses", poses).input("intrinsics", intrinsics);
    stage.commit(m)
}

pub fn gen_gt(camera: &Path, laser: &Path, common: &Common) -> Result<()> {
    let mut cfg = common.load_config()?;
    let gt_cfg = GroundTruthConfig::new(cfg.take_or("scale", 1.0)?)?;
    cfg.finish()?;
    require(camera)?;
    require(laser)?;
    let cam = list_frames(camera)?;
    let las = list_frames(laser)?;
    if cam.iter().map(|f| f.0).ne(las.iter().map(|f| f.0)) {
        return Err(CliError::Core(meshcorr::Error::Shape(format!(
            "{} and {} hold different frames",
            camera.display(),
            laser.display()
        ))));
    }

    let stage = Staging::new(&common.out)?;
    for ((frame, cd), (_, ld)) in cam.into_iter().zip(las) {
        let err = compute_gt(&read_features(&cd)?, &read_features(&ld)?, &gt_cfg)?;
        write_error(&frame_dir(stage.path(), frame), &err)?;
    }
    let mut m = Manifest::new("gen-gt");
    m.config("scale", gt_cfg.scale).input("camera", camera).input("laser", laser);
    stage.commit(m)
}

pub fn train(features: &[PathBuf], gt: &[PathBuf], common: &Common) -> Result<()> {
    let mut cfg = common.load_config()?;
    let tcfg = TrainConfig::from_kv(&mut cfg)?;
    let sel = FeatureSelection::parse(&cfg.take_or("features", "all".to_string())?)?;
    cfg.finish()?;
    tcfg.validate()?;
    let data = load_pairs(features, gt)?;

    let stage = Staging::new(&common.out)?;
    let trained = fit(&data, &tcfg, sel, Some(stage.path()))?;
    write_text(&stage.path().join("loss.csv"), &trained.log.to_csv())?;
    write_text(&stage.path().join("steps.csv"), &trained.log.steps_csv())?;

    let mut m = Manifest::new("train");
    m.config_text(&tcfg.to_config_string()).config("features", sel);
    for (f, g) in features.iter().zip(gt) {
        m.input("features", f).input("gt", g);
    }
    stage.commit(m)
}

pub fn infer(checkpoint: &Path, features: &Path, common: &Common) -> Result<()> {
    let mut cfg = common.load_config()?;
    let disabled_text: String = cfg.take_or("disable", "none".to_string())?;
    let disabled = disabled_kinds(&disabled_text)?;
    cfg.finish()?;
    require(checkpoint)?;
    require(features)?;
    let model = load_model(checkpoint)?;
    let frames = read_feature_root(features)?;

    let stage = Staging::new(&common.out)?;
    let sets: Vec<_> = frames.iter().map(|(_, s)| s).collect();
    let preds = predict_errors(&model, &sets, &disabled, INFER_BATCH)?;
    for ((frame, _), pred) in frames.iter().zip(&preds) {
        write_error(&frame_dir(stage.path(), *frame), pred)?;
    }
    let mut m = Manifest::new("infer");
    m.config("disable", disabled_text).input("checkpoint", checkpoint).input("features", features);
    stage.commit(m)
}

pub fn correct(features: &Path, pred: &Path, common: &Common) -> Result<()> {
    common.load_config()?.finish()?;
    require(features)?;
    require(pred)?;
    // pairs frames and checks sizes
    let samples = read_samples(features, pred)?;

    let stage = Staging::new(&common.out)?;
    for s in &samples {
        let c = apply_correction(&s.features.inverse_depth, &s.features.mask, &s.target)?;
        let dir = frame_dir(stage.path(), s.frame);
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let f32_image = |img: &Image<f64>| {
            Image::from_vec(img.width(), img.height(), 1, img.data().iter().map(|&v| v as f32).collect())
        };
        write_pfm(&f32_image(&c.inverse_depth)?, &dir.join("inverse_depth.pfm"))?;
        write_pfm(&f32_image(&c.depth)?, &dir.join("depth.pfm"))?;
        write_mask(&c.valid, &dir.join("mask.pgm"))?;
    }
    let mut m = Manifest::new("correct");
    m.input("features", features).input("pred", pred);
    stage.commit(m)
}

fn metric_space(cfg: &mut KvConfig) -> Result<MetricSpace> {
    Ok(MetricSpace::parse(&cfg.take_or("space", "inverse_depth".to_string())?)?)
}

pub fn eval(checkpoint: &Path, features: &Path, gt: &Path, common: &Common) -> Result<()> {
    let mut cfg = common.load_config()?;
    let space = metric_space(&mut cfg)?;
    cfg.finish()?;
    require(checkpoint)?;
    let model = load_model(checkpoint)?;
    let samples = load_pairs(&[features.to_path_buf()], &[gt.to_path_buf()])?;

    let stage = Staging::new(&common.out)?;
    let (base, corr) = evaluate(&model, &samples, space)?;
    write_text(&stage.path().join("metrics.csv"), &reports_to_csv(&[base, corr]))?;
    let mut m = Manifest::new("eval");
    m.config("space", space.name())
        .input("checkpoint", checkpoint)
        .input("features", features)
        .input("gt", gt);
    stage.commit(m)
}

pub fn ablate(
    checkpoint: &Path,
    features: &Path,
    gt: &Path,
    train_features: &[PathBuf],
    train_gt: &[PathBuf],
    common: &Common,
) -> Result<()> {
    let mut cfg = common.load_config()?;
    let space = metric_space(&mut cfg)?;
    let mode_text: String = cfg.take_or("mode", "cheap".to_string())?;
    let mode = match mode_text.as_str() {
        "cheap" => AblationMode::Cheap,
        "faithful" => AblationMode::Faithful,
        other => return Err(CliError::Usage(format!("unknown ablation mode `{other}` (cheap, faithful)"))),
    };
    let tcfg = TrainConfig::from_kv(&mut cfg)?;
    cfg.finish()?;
    tcfg.validate()?;
    if mode == AblationMode::Faithful && train_features.is_empty() {
        return Err(CliError::Usage("faithful ablation needs --train-features and --train-gt".into()));
    }
    require(checkpoint)?;
    let model = load_model(checkpoint)?;
    let eval_set = load_pairs(&[features.to_path_buf()], &[gt.to_path_buf()])?;
    let train_set = load_pairs(train_features, train_gt)?;

    let stage = Staging::new(&common.out)?;
    let train_arg = (!train_set.is_empty()).then_some((train_set.as_slice(), &tcfg));
    let rows = ablation_study(&model, &eval_set, mode, train_arg, space)?;
    write_text(&stage.path().join("ablation.csv"), &ablation_csv(&rows))?;
    let mut m = Manifest::new("ablate");
    m.config("space", space.name()).config("mode", &mode_text);
    if train_arg.is_some() {
        m.config_text(&tcfg.to_config_string());
    }
    m.input("checkpoint", checkpoint).input("features", features).input("gt", gt);
    for (f, g) in train_features.iter().zip(train_gt) {
        m.input("train_features", f).input("train_gt", g);
    }
    stage.commit(m)
}

pub fn render_overlay(errors: &Path, common: &Common) -> Result<()> {
    let mut cfg = common.load_config()?;
    let scale: Option<f64> = cfg.take("scale")?;
    cfg.finish()?;
    if let Some(s) = scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::Usage(format!("scale must be positive, got {s}")));
        }
    }
    require(errors)?;
    let frames = list_frames(errors)?
        .into_iter()
        .map(|(frame, dir)| Ok((frame, read_error(&dir)?)))
        .collect::<Result<Vec<_>>>()?;
    // default: the largest masked magnitude maps to full intensity
    let scale = scale.unwrap_or_else(|| {
        let max = frames
            .iter()
            .flat_map(|(_, e)| e.delta.data().iter().zip(e.mask.data()))
            .filter(|(_, &m)| m)
            .fold(0.0f64, |a, (d, _)| a.max(d.abs()));
        if max > 0.0 { max } else { 1.0 }
    });

    let stage = Staging::new(&common.out)?;
    for (frame, err) in &frames {
        write_pnm(&error_overlay(err, scale), &stage.path().join(format!("frame_{frame:06}.ppm")))?;
    }
    let mut m = Manifest::new("render-overlay");
    m.config("scale", scale).input("errors", errors);
    stage.commit(m)
}
