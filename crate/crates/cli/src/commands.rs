use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use mvfd_core::artifact::write_json;
use mvfd_core::evaluation::{evaluate, EvalReport};
use mvfd_core::explain::{gradcam, hull_mass_ratio, overlay, panel};
use mvfd_core::geometry::{
    detect_faces, extract_views, BoundingBox, FaceDetectorProvider, FaceRecord, ImageBuffer, SidecarDetector, ViewKind,
    ViewParams,
};
use mvfd_core::ingestion::{
    generate_synthetic, ingest_videos, load_samples, preprocess, DatasetManifest, Split, SyntheticSpec,
};
use mvfd_core::model::{DetectorModel, ModelConfig};
use mvfd_core::training::{fit, resume, FitReport, TrainConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{default_model, default_synth, section, usage, FileConfig, Flags, Resolved};
use crate::outdir::OutDir;
use crate::{Cli, Command, EvalArgs, ExplainArgs, FramesArgs, InferArgs, Ingest, PreprocessArgs, SynthArgs, TrainArgs, ViewArgs};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let summary = match cli.command {
        Command::Synth(a) | Command::Ingest(Ingest::Synth(a)) => synth(&file, a)?,
        Command::Ingest(Ingest::Frames(a)) => frames(&file, a)?,
        Command::Preprocess(a) => preprocess_cmd(&file, a)?,
        Command::Train(a) => train(&file, a)?,
        Command::Eval(a) => eval(&file, a)?,
        Command::Infer(a) => {
            let records = infer(&file, &a)?;
            if let Some(out) = &a.out {
                write_json(out, &records)?;
            }
            // Records are the command's output either way.
            println!("{}", serde_json::to_string_pretty(&records)?);
            return Ok(());
        }
        Command::Explain(a) => explain(&file, a)?,
    };
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else if let Some(msg) = summary.get("message").and_then(Value::as_str) {
        println!("{msg}");
    }
    Ok(())
}

fn view_params(file: &FileConfig, a: &ViewArgs) -> anyhow::Result<ViewParams> {
    let flags = Flags::default()
        .set("margin", a.margin)
        .set("expand", a.expand)
        .set("side", a.side)
        .into_map();
    let p: ViewParams = section("views", &ViewParams::default(), file.views.as_ref(), flags)?;
    if !(p.margin >= 0.0 && p.expand >= 0.0 && p.side > 0) {
        return Err(usage(format!("view parameters must be non-negative with a positive side, got {p:?}")));
    }
    Ok(p)
}

fn detector(annotations: Option<&Path>) -> anyhow::Result<SidecarDetector> {
    Ok(match annotations {
        Some(p) => SidecarDetector::shared(p)?,
        None => SidecarDetector::PerImage,
    })
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn synth(file: &FileConfig, a: SynthArgs) -> anyhow::Result<Value> {
    let seed = file.seed(a.seed.seed);
    let flags = Flags::default()
        .set("count", a.count)
        .set("side", a.image_side)
        .set("artifact", a.artifact)
        .set("strength", a.strength)
        .set("seed", Some(seed))
        .into_map();
    let spec: SyntheticSpec = section("synth", &default_synth(), file.synth.as_ref(), flags)?;
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let resolved = Resolved::new("synth", seed, &json!({ "synth": spec }))?;
    let dir = OutDir::create(&a.out.out, a.out.force)?;
    let manifest = generate_synthetic(&spec, dir.path())?;
    resolved.write(dir.path())?;
    let out = dir.commit()?;
    let n = manifest.entries.len();
    info!("wrote {n} images to {}", out.display());
    Ok(json!({
        "message": format!("{n} images in {}", out.display()),
        "manifest": out.join("manifest.jsonl"),
        "images": n,
        "config_hash": resolved.config_hash,
    }))
}

fn frames(file: &FileConfig, a: FramesArgs) -> anyhow::Result<Value> {
    if a.stride == 0 {
        return Err(usage("--stride must be at least 1"));
    }
    let seed = file.seed(a.seed.seed);
    let provider = detector(a.annotations.as_deref())?;
    let resolved = Resolved::new(
        "ingest-frames",
        seed,
        &json!({ "root": a.root, "stride": a.stride, "annotations": a.annotations }),
    )?;
    let dir = OutDir::create(&a.out.out, a.out.force)?;
    let manifest = ingest_videos(&a.root, dir.path(), a.stride, seed, &provider)?;
    resolved.write(dir.path())?;
    let out = dir.commit()?;
    let n = manifest.entries.len();
    Ok(json!({
        "message": format!("{n} frames in {}", out.display()),
        "manifest": out.join("manifest.jsonl"),
        "frames": n,
        "config_hash": resolved.config_hash,
    }))
}

fn preprocess_cmd(file: &FileConfig, a: PreprocessArgs) -> anyhow::Result<Value> {
    let params = view_params(file, &a.views)?;
    let manifest = load_manifest(&a.manifest)?;
    let resolved = Resolved::new(
        "preprocess",
        manifest.seed,
        &json!({ "manifest": a.manifest, "views": params }),
    )?;
    let dir = OutDir::create(&a.out.out, a.out.force)?;
    let out_manifest = preprocess(&manifest, dir.path(), &params)?;
    resolved.write(dir.path())?;
    let out = dir.commit()?;
    let (n, skipped) = (out_manifest.entries.len(), manifest.entries.iter().map(|e| e.faces.len()).sum::<usize>());
    if n < skipped {
        warn!("{} faces skipped by the landmark sanity gate", skipped - n);
    }
    Ok(json!({
        "message": format!("{n} faces in {}", out.display()),
        "manifest": out.join("manifest.jsonl"),
        "faces": n,
        "config_hash": resolved.config_hash,
    }))
}

fn model_config(file: &FileConfig, a: &TrainArgs, seed: u64) -> anyhow::Result<ModelConfig> {
    let mut backbone = serde_json::Map::new();
    if let Some(f) = &a.family {
        backbone.insert("family".into(), json!(f));
    }
    if let Some(d) = a.feature_dim {
        backbone.insert("feature_dim".into(), json!(d));
    }
    let flags = Flags::default()
        .set("view_backbone", (!backbone.is_empty()).then_some(Value::Object(backbone)))
        .set("views", a.views.clone())
        .set("use_pose", a.no_pose.then_some(false))
        .set("seed", Some(seed))
        .into_map();
    let cfg: ModelConfig = section("model", &default_model(), file.model.as_ref(), flags)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(file: &FileConfig, a: &TrainArgs, seed: u64) -> anyhow::Result<TrainConfig> {
    let flags = Flags::default()
        .set("epochs", a.epochs)
        .set("learning_rate", a.learning_rate)
        .set("batch_size", a.batch_size)
        .set("pose_pretrain", a.pose_pretrain.then(|| json!({})))
        .set("seed", Some(seed))
        .into_map();
    let mut cfg: TrainConfig = section("train", &TrainConfig::default(), file.train.as_ref(), flags)?;
    if let Some(p) = &mut cfg.pose_pretrain {
        p.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(file: &FileConfig, a: TrainArgs) -> anyhow::Result<Value> {
    let seed = file.seed(a.seed.seed);
    let train_cfg = train_config(file, &a, seed)?;
    let params = view_params(file, &a.view_params)?;
    let model_cfg = match &a.resume {
        Some(ckpt) => {
            if a.family.is_some() || a.feature_dim.is_some() || a.views.is_some() || a.no_pose {
                warn!("model flags are ignored when resuming; the checkpoint's model is used");
            }
            DetectorModel::load(ckpt)
                .with_context(|| format!("loading {}", ckpt.display()))?
                .config()
                .clone()
        }
        None => model_config(file, &a, seed)?,
    };
    let resolved = Resolved::new(
        "train",
        seed,
        &json!({ "manifest": a.manifest, "views": params, "model": model_cfg, "train": train_cfg, "resume": a.resume }),
    )?;
    let manifest = load_manifest(&a.manifest)?;
    let train_set = load_samples(&manifest, &[Split::Train], &params)?;
    let val_set = load_samples(&manifest, &[Split::Val], &params)?;
    info!("{} training and {} validation faces", train_set.len(), val_set.len());
    let dir = OutDir::create(&a.out.out, a.out.force)?;
    resolved.write(dir.path())?;
    let (model, report): (DetectorModel, FitReport) = match &a.resume {
        Some(ckpt) => resume(ckpt, &train_set, &val_set, &train_cfg, Some(dir.path()))?,
        None => {
            let mut model = DetectorModel::build(&model_cfg)?;
            let report = fit(&mut model, &train_set, &val_set, &train_cfg, Some(dir.path()))?;
            (model, report)
        }
    };
    model
        .to_archive(json!({ "config_hash": resolved.config_hash }), Vec::new())?
        .save(&dir.path().join("model.ckpt"))?;
    let val_row = evaluate(&model, &val_set, "val")?;
    let summary = json!({
        "best_epoch": report.best_epoch,
        "best_val_f1": report.best_val_f1,
        "epochs_run": report.log.last_epoch(),
        "stopped_early": report.stopped_early,
        "pose_pretrain_accuracy": report.pose.as_ref().map(|p| p.final_accuracy),
        "val": val_row,
        "config_hash": resolved.config_hash,
    });
    write_json(&dir.path().join("summary.json"), &summary)?;
    let out = dir.commit()?;
    let mut result = summary;
    result["checkpoint"] = json!(out.join("model.ckpt"));
    result["message"] = json!(format!(
        "best epoch {} (val F1 {:.4}); model at {}",
        report.best_epoch,
        report.best_val_f1,
        out.join("model.ckpt").display()
    ));
    Ok(result)
}

fn eval(file: &FileConfig, a: EvalArgs) -> anyhow::Result<Value> {
    let split: Split = a.split.parse().map_err(|e: mvfd_core::Error| usage(e.to_string()))?;
    let params = view_params(file, &a.views)?;
    let model = DetectorModel::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let resolved = Resolved::new(
        "eval",
        model.config().seed,
        &json!({ "checkpoint": a.checkpoint, "manifest": a.manifest, "split": split, "views": params }),
    )?;
    let manifest = load_manifest(&a.manifest)?;
    let samples = load_samples(&manifest, &[split], &params)?;
    let row = evaluate(&model, &samples, split.as_str())?;
    let report = EvalReport::new(vec![row]);
    let dir = OutDir::create(&a.out.out, a.out.force)?;
    report.save(&dir.path().join("report.json"))?;
    mvfd_core::artifact::write_atomic(&dir.path().join("report.csv"), report.to_csv().as_bytes())?;
    resolved.write(dir.path())?;
    let out = dir.commit()?;
    let mut summary = serde_json::to_value(&report)?;
    summary["report"] = json!(out.join("report.json"));
    summary["message"] = json!(report.to_table());
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct FaceScore {
    pub image: String,
    pub face: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub prob_fake: f64,
    pub pose_class: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

fn faces_of(path: &Path, provider: &dyn FaceDetectorProvider) -> anyhow::Result<(ImageBuffer, Vec<FaceRecord>)> {
    let image = ImageBuffer::load_png(path)?;
    let faces = detect_faces(&image, &path.to_string_lossy(), provider)?;
    Ok((image, faces))
}

fn infer(file: &FileConfig, a: &InferArgs) -> anyhow::Result<Vec<FaceScore>> {
    let params = view_params(file, &a.views)?;
    let model = DetectorModel::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let provider = detector(a.annotations.as_deref())?;
    let mut out = Vec::new();
    for path in &a.images {
        let (image, faces) = faces_of(path, &provider)?;
        if faces.is_empty() {
            info!("{}: no faces", path.display());
        }
        for (k, face) in faces.iter().enumerate() {
            let views = extract_views(&image, face, &params)?;
            let pred = model.forward(&[&views])?;
            let pose = model.predict_pose(&[&views.middle.image])?;
            out.push(FaceScore {
                image: path.to_string_lossy().into_owned(),
                face: k,
                bbox: face.bbox,
                prob_fake: pred.probs[0],
                pose_class: pose[0],
                flagged: face.flagged,
            });
        }
    }
    Ok(out)
}

fn explain(file: &FileConfig, a: ExplainArgs) -> anyhow::Result<Value> {
    let view: ViewKind = a.view.parse().map_err(|e: mvfd_core::Error| usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(format!("--alpha {} outside [0, 1]", a.alpha)));
    }
    let params = view_params(file, &a.views)?;
    let provider = detector(a.annotations.as_deref())?;
    let (image, faces) = faces_of(&a.image, &provider)?;
    let Some(face) = faces.get(a.face) else {
        bail!("{} has {} annotated faces; --face {} is out of range", a.image.display(), faces.len(), a.face);
    };
    let triple = extract_views(&image, face, &params)?;
    let original = &triple.get(view).image;
    let checkpoints: Vec<PathBuf> = std::iter::once(a.checkpoint.clone()).chain(a.compare.clone()).collect();
    let mut overlays = Vec::new();
    let mut maps = Vec::new();
    for ckpt in &checkpoints {
        let model = DetectorModel::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let hm = gradcam(&model, &triple, view, a.layer.as_deref())?;
        if hm.degenerate {
            warn!("{}: constant map on layer {}", ckpt.display(), hm.layer);
        }
        maps.push(json!({
            "checkpoint": ckpt,
            "method": mvfd_core::evaluation::method_name(model.config()),
            "layer": hm.layer,
            "prob_fake": model.forward(&[&triple])?.probs[0],
            "hull_mass": hull_mass_ratio(&hm, triple.get(view), face),
            "degenerate": hm.degenerate,
        }));
        overlays.push(overlay(&hm, original, a.alpha)?);
    }
    let resolved = Resolved::new(
        "explain",
        0,
        &json!({
            "checkpoints": checkpoints, "image": a.image, "face": a.face, "view": view,
            "layer": a.layer, "alpha": a.alpha, "views": params,
        }),
    )?;
    let refs: Vec<&ImageBuffer> = overlays.iter().collect();
    panel(original, &refs).save_png(&a.out)?;
    let summary = json!({
        "panel": a.out,
        "view": view,
        "maps": maps,
        "resolved_config": resolved,
    });
    write_json(&a.out.with_extension("json"), &summary)?;
    let mut result = summary;
    result["message"] = json!(format!("wrote {}", a.out.display()));
    Ok(result)
}
