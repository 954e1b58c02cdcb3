//! Small end-to-end training runs that must drive training error to zero.

use cxr_core::nets::{build_unet, load_checkpoint, save_checkpoint, Checkpoint};
use cxr_core::pipeline::{
    evaluate_segmentation, fit, predict_indices, seg_tensors, train_classifier, Dataset, Prep, Scheme, SchemeConfig,
};
use cxr_core::optim::OptimizerKind;
use cxr_core::{TrainConfig, UNetConfig};

fn tiny_scheme() -> SchemeConfig {
    let mut cfg = SchemeConfig {
        scheme: Scheme::Plain,
        prep: Prep::Original,
        input_size: 32,
        ..SchemeConfig::default()
    };
    cfg.train.max_epochs = 30;
    cfg.train.early_stop_enabled = false;
    cfg
}

#[test]
fn classifier_memorises_twelve_images() {
    let data = Dataset::from_phantoms([4, 4, 4], 32, 21).unwrap();
    let mut cfg = tiny_scheme();
    cfg.train.optimizer = OptimizerKind::Adam;
    let all: Vec<usize> = (0..data.len()).collect();
    let out = train_classifier(&data, &all, &all, &cfg, 4).unwrap();
    let probs = predict_indices(&out.checkpoint.model, &data, &all, &cfg).unwrap();
    let labels = data.labels();
    let wrong: Vec<usize> = all
        .iter()
        .filter(|&&i| {
            let p = &probs[i];
            let arg = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            arg != labels[i].index()
        })
        .copied()
        .collect();
    assert!(wrong.is_empty(), "misclassified {wrong:?}");
}

#[test]
fn unet_memorises_four_masks() {
    let data = Dataset::from_phantoms([2, 1, 1], 32, 22).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let set = seg_tensors(&data, &all, 32).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        batch_size: 4,
        early_stop_enabled: false,
        lr_drop_enabled: false,
        ..TrainConfig::segmentation()
    };
    let unet_cfg = UNetConfig {
        base_channels: 8,
        depth: 2,
        ..UNetConfig::default()
    };
    let model = build_unet(&unet_cfg, 5).unwrap();
    let (model, log, _, _) = fit(model, &cfg, &set, &set, 6).unwrap();
    assert_eq!(log.len(), 200);
    let m = evaluate_segmentation(&model, &data, &all, 32).unwrap();
    assert!(m.iou >= 0.95, "iou {}", m.iou);
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let data = Dataset::from_phantoms([2, 2, 2], 32, 23).unwrap();
    let mut cfg = tiny_scheme();
    cfg.train.max_epochs = 1;
    let all: Vec<usize> = (0..data.len()).collect();
    let out = train_classifier(&data, &all, &all, &cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back: Checkpoint = load_checkpoint(&path).unwrap();
    assert_eq!(back.extra, out.checkpoint.extra);
    assert_eq!(back.train, out.checkpoint.train);
    let a = predict_indices(&out.checkpoint.model, &data, &all, &cfg).unwrap();
    let b = predict_indices(&back.model, &data, &all, &cfg).unwrap();
    assert_eq!(a, b);
    // Saving the loaded checkpoint reproduces the file byte for byte.
    let again = dir.path().join("m2.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
