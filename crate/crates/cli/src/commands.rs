use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cxr_core::datagen::generate_dataset;
use cxr_core::engine::{grad_check as check_op, grad_check_ops};
use cxr_core::imageproc::{read_image, write_pgm, AugmentSpec, Maskable};
use cxr_core::metrics::write_text;
use cxr_core::nets::{load_checkpoint, save_checkpoint, Checkpoint};
use cxr_core::pipeline::{
    self, binarize, derive_seed, evaluate_scheme, holdout_split, log_to_csv, make_folds, predict_indices,
    prepare_classifier_input, read_kv, render_kv, scheme_of, train_classifier, train_segmentation, Dataset,
    DatasetManifest, Evaluation, ManifestRecord, Prediction, Sample, SchemeConfig, SegConfig,
};
use cxr_core::saliency::saliency as saliency_map;
use cxr_core::{ClassLabel, SaliencyMethod};

use crate::{Common, SchemeArgs, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn config_pairs(common: &Common) -> Result<Vec<(String, String)>> {
    match &common.config {
        Some(p) => read_kv(p).map_err(|e| usage(format!("config {}: {e}", p.display()))),
        None => Ok(Vec::new()),
    }
}

fn no_config(common: &Common, cmd: &str) -> Result<()> {
    if common.config.is_some() {
        return Err(usage(format!("{cmd} takes no --config")));
    }
    Ok(())
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

pub fn gen_data(common: &Common, n: Option<usize>, counts: Option<&[usize]>, size: usize) -> Result<()> {
    no_config(common, "gen-data")?;
    let counts = match (n, counts) {
        (Some(n), None) => [n; 3],
        (None, Some(c)) => [c[0], c[1], c[2]],
        _ => return Err(usage("give --n or --counts")),
    };
    let m = generate_dataset(counts, size, common.seed, &common.out)?;
    println!("wrote {} phantoms to {}", m.len(), common.out.display());
    Ok(())
}

pub fn preprocess(common: &Common, manifest: &Path, prep: &str, segmented: bool) -> Result<()> {
    no_config(common, "preprocess")?;
    let prep: pipeline::Prep = prep.parse()?;
    let m = DatasetManifest::read(manifest)?;
    let data = Dataset::load(&m)?;
    let dir = common.out.join("images");
    std::fs::create_dir_all(&dir)?;
    let mut records = Vec::new();
    let mut channels = String::from("path,label,channel\n");
    for (r, s) in m.records.iter().zip(&data.samples) {
        let mut img = pipeline::preprocess(&s.image, prep)?;
        if segmented {
            let mask = s
                .mask
                .as_ref()
                .with_context(|| format!("{} has no mask", r.image_path.display()))?;
            img = img.apply_mask(mask)?;
        }
        let stem = stem_of(&r.image_path);
        if img.len() == 1 {
            let rel = Path::new("images").join(format!("{stem}.pgm"));
            write_pgm(img.channel(0), common.out.join(&rel))?;
            let mask_path = r.mask_path.as_ref().map(|p| std::path::absolute(m.resolve(p))).transpose()?;
            records.push(ManifestRecord {
                image_path: rel,
                label: r.label,
                mask_path,
            });
        } else {
            for (k, c) in img.channels().iter().enumerate() {
                let rel = Path::new("images").join(format!("{stem}_c{k}.pgm"));
                write_pgm(c, common.out.join(&rel))?;
                channels.push_str(&format!("{},{},{k}\n", rel.display(), r.label));
            }
        }
    }
    if prep.channels() == 1 {
        DatasetManifest::new(common.out.clone(), records).write(common.out.join("manifest.csv"))?;
    } else {
        write_text(common.out.join("channels.csv"), &channels)?;
    }
    println!("preprocessed {} images ({})", data.len(), prep.name());
    Ok(())
}

pub fn train_seg(common: &Common, manifest: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg = SegConfig::default();
    for (k, v) in config_pairs(common)? {
        cfg.set(&k, &v).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    cfg.train.seed = common.seed;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = Dataset::load(&DatasetManifest::read(manifest)?)?;
    let out = train_segmentation(&data, &cfg, common.seed)?;
    save_checkpoint(&out.outcome.checkpoint, common.out.join("unet.ckpt"))?;
    write_text(common.out.join("log.csv"), &log_to_csv(&out.outcome.log))?;
    write_text(common.out.join("config.txt"), &render_kv(&cfg.to_kv()))?;
    let mut metrics = String::from("split,accuracy,iou,dsc\n");
    if let Some(m) = out.val_metrics {
        metrics.push_str(&format!("val,{},{},{}\n", m.accuracy, m.iou, m.dsc));
        println!("validation IoU {:.4}, DSC {:.4}", m.iou, m.dsc);
    }
    write_text(common.out.join("seg_metrics.csv"), &metrics)?;
    Ok(())
}

fn scheme_config(common: &Common, args: &SchemeArgs) -> Result<SchemeConfig> {
    let mut cfg = SchemeConfig::default();
    let mut pairs = config_pairs(common)?;
    for (k, v) in [("scheme", &args.scheme), ("prep", &args.prep), ("family", &args.family)] {
        if let Some(v) = v {
            pairs.push((k.to_string(), v.clone()));
        }
    }
    if let Some(e) = args.epochs {
        pairs.push(("max_epochs".into(), e.to_string()));
    }
    for (k, v) in pairs {
        cfg.set(&k, &v).map_err(|e| usage(e.to_string()))?;
    }
    cfg.train.seed = common.seed;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_data(manifest: &Path, masks_from: Option<&Path>) -> Result<Dataset> {
    let data = Dataset::load(&DatasetManifest::read(manifest)?)?;
    match masks_from {
        Some(p) => {
            let unet = load_checkpoint(p)?;
            let size: usize = unet
                .extra("input_size")
                .and_then(|v| v.parse().ok())
                .context("segmentation checkpoint lacks input_size")?;
            Ok(data.with_predicted_masks(&unet.model, size)?)
        }
        None => Ok(data),
    }
}

pub fn train_cls(common: &Common, args: &SchemeArgs) -> Result<()> {
    let cfg = scheme_config(common, args)?;
    let data = load_data(&args.manifest, args.masks_from.as_deref())?;
    let (train, val) = holdout_split(&data.labels(), pipeline::VAL_FRACTION, derive_seed(common.seed, 0))?;
    let out = train_classifier(&data, &train, &val, &cfg, common.seed)?;
    save_checkpoint(&out.checkpoint, common.out.join("classifier.ckpt"))?;
    write_text(common.out.join("log.csv"), &log_to_csv(&out.log))?;
    write_text(common.out.join("config.txt"), &render_kv(&cfg.to_kv()))?;
    if !val.is_empty() {
        let probs = predict_indices(&out.checkpoint.model, &data, &val, &cfg)?;
        let preds = val
            .iter()
            .zip(probs)
            .map(|(&index, probs)| Prediction {
                index,
                fold: 0,
                label: data.samples[index].label,
                probs,
            })
            .collect();
        let ev = Evaluation::from_predictions(preds)?;
        ev.write(common.out.join("val"))?;
        println!("best epoch {}, validation top-1 accuracy {:.4}", out.best_epoch, top1(&ev));
    }
    Ok(())
}

fn top1(ev: &Evaluation) -> f64 {
    ev.confusion.correct() as f64 / ev.confusion.total().max(1) as f64
}

pub fn crossval(common: &Common, args: &SchemeArgs, jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let cfg = scheme_config(common, args)?;
    let data = load_data(&args.manifest, args.masks_from.as_deref())?;
    let res = pipeline::crossval(&data, &cfg, common.seed, jobs)?;
    res.write(&common.out)?;
    for (f, o) in res.folds.iter().zip(&res.outcomes) {
        save_checkpoint(&o.checkpoint, common.out.join(format!("fold{}.ckpt", f.fold_id)))?;
    }
    write_text(common.out.join("config.txt"), &render_kv(&cfg.to_kv()))?;
    println!(
        "{}-fold {} / {} / {}: top-1 accuracy {:.4}",
        cfg.folds,
        cfg.scheme.name(),
        cfg.prep.name(),
        cfg.classifier.family,
        top1(&res.evaluation)
    );
    Ok(())
}

fn fold_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| dir.display().to_string())? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if let Some(i) = name.strip_prefix("fold").and_then(|r| r.strip_suffix(".ckpt")) {
            if let Ok(i) = i.parse() {
                found.push((i, path));
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(usage(format!("no fold<i>.ckpt files in {}", dir.display())));
    }
    if found.iter().enumerate().any(|(i, (f, _))| i != *f) {
        return Err(usage("fold checkpoints must be numbered 0..k without gaps"));
    }
    found.iter().map(|(_, p)| Ok(load_checkpoint(p)?)).collect()
}

pub fn evaluate(common: &Common, manifest: &Path, checkpoints: &Path, masks_from: Option<&Path>) -> Result<()> {
    no_config(common, "evaluate")?;
    let ckpts = fold_checkpoints(checkpoints)?;
    let cfg = scheme_of(&ckpts[0])?;
    for c in &ckpts[1..] {
        if scheme_of(c)?.to_kv() != cfg.to_kv() {
            return Err(usage("fold checkpoints were trained under different schemes"));
        }
    }
    let data = load_data(manifest, masks_from)?;
    let folds = make_folds(&data.labels(), ckpts.len(), common.seed)?;
    let ev = evaluate_scheme(&ckpts, &folds, &data, &cfg)?;
    ev.write(&common.out)?;
    println!("top-1 accuracy {:.4} over {} test images", top1(&ev), ev.confusion.total());
    Ok(())
}

pub struct SaliencyInputs<'a> {
    pub image: Option<&'a Path>,
    pub mask: Option<&'a Path>,
    pub manifest: Option<&'a Path>,
    pub limit: usize,
}

pub fn saliency(common: &Common, checkpoint: &Path, inputs: SaliencyInputs, method: &str, class: Option<&str>, tap: Option<&str>) -> Result<()> {
    no_config(common, "saliency")?;
    let method: SaliencyMethod = method.parse()?;
    let target: Option<ClassLabel> = class.map(str::parse).transpose()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = scheme_of(&ckpt)?;
    let items: Vec<(String, Sample)> = match (inputs.image, inputs.manifest) {
        (Some(img), _) => {
            let sample = Sample {
                image: read_image(img)?,
                mask: inputs.mask.map(read_image).transpose()?.map(|m| binarize(&m)),
                label: target.unwrap_or(ClassLabel::Covid19),
            };
            vec![(stem_of(img), sample)]
        }
        (None, Some(m)) => {
            let manifest = DatasetManifest::read(m)?;
            let data = Dataset::load(&manifest)?;
            manifest
                .records
                .iter()
                .zip(data.samples)
                .take(inputs.limit)
                .map(|(r, s)| (stem_of(&r.image_path), s))
                .collect()
        }
        (None, None) => return Err(usage("give --image or --manifest")),
    };
    let mut summary = String::from("stem,label,target,predicted,method,tap,mass_inside_mask\n");
    for (stem, sample) in &items {
        let x = prepare_classifier_input(sample, &AugmentSpec::IDENTITY, &cfg)?;
        let probs = ckpt.model.predict(&x)?;
        let predicted = probs
            .data()
            .iter()
            .enumerate()
            .fold(0, |b, (i, &p)| if p > probs.data()[b] { i } else { b });
        let c = target.map_or(predicted, ClassLabel::index);
        let map = saliency_map(&ckpt.model, &x, c, tap, method)?;
        map.write(&common.out, stem)?;
        let mass = match &sample.mask {
            Some(m) => {
                let m = binarize(&cxr_core::imageproc::resize_bilinear(m, map.width, map.height)?);
                map.mass_inside(&m)?.map_or("".into(), |v| v.to_string())
            }
            None => String::new(),
        };
        summary.push_str(&format!(
            "{stem},{},{},{},{},{},{mass}\n",
            sample.label,
            ClassLabel::ALL[c],
            ClassLabel::ALL[predicted],
            method.name(),
            map.tap
        ));
    }
    write_text(common.out.join("saliency.csv"), &summary)?;
    println!("wrote {} {} maps", items.len(), method.name());
    Ok(())
}

pub fn grad_check(common: &Common, op: &str, trials: usize, eps: f64) -> Result<()> {
    no_config(common, "grad-check")?;
    let ops: Vec<&str> = if op == "all" {
        grad_check_ops().to_vec()
    } else if grad_check_ops().contains(&op) {
        vec![op]
    } else {
        return Err(usage(format!("unknown op `{op}`; one of all, {}", grad_check_ops().join(", "))));
    };
    if trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let mut csv = String::from("op,trials,max_rel_error,threshold,passed\n");
    let mut failed = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        let r = check_op(op, trials, eps, common.seed.wrapping_add(i as u64))?;
        println!("{op}: max relative error {:.3e} (threshold {:.0e})", r.max_rel_error, r.threshold);
        csv.push_str(&format!("{op},{trials},{},{},{}\n", r.max_rel_error, r.threshold, r.passed()));
        if !r.passed() {
            failed.push(*op);
        }
    }
    write_text(common.out.join("gradcheck.csv"), &csv)?;
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn copy_matching(src: &Path, dst: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut names: Vec<String> = std::fs::read_dir(src)
        .with_context(|| src.display().to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| keep(n))
        .collect();
    names.sort();
    std::fs::create_dir_all(dst)?;
    let mut out = Vec::new();
    for n in names {
        std::fs::copy(src.join(&n), dst.join(&n))?;
        out.push(dst.join(n));
    }
    Ok(out)
}

pub fn report(common: &Common, crossval: &Path, saliency: Option<&Path>) -> Result<()> {
    no_config(common, "report")?;
    if !crossval.join("metrics.csv").is_file() {
        return Err(usage(format!("{} holds no metrics.csv", crossval.display())));
    }
    let mut files = copy_matching(crossval, &common.out, |n| {
        matches!(n, "metrics.csv" | "confusion.csv" | "predictions.csv" | "audit.txt")
            || (n.starts_with("roc_") && n.ends_with(".csv"))
    })?;
    if let Some(dir) = saliency {
        files.extend(copy_matching(dir, &common.out.join("saliency"), |n| {
            n.ends_with(".pgm") || n == "saliency.csv"
        })?);
    }
    let index: String = files
        .iter()
        .filter_map(|p| p.strip_prefix(&common.out).ok())
        .map(|p| format!("{}\n", p.display()))
        .collect();
    write_text(common.out.join("index.txt"), &index)?;
    println!("bundled {} files", files.len());
    Ok(())
}
