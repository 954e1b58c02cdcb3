use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Graph, Mode, Tensor};
use crate::error::{Error, Result};
use crate::imageproc::AugmentSpec;
use crate::metrics::{seg_metrics, PixelConfusion, SegMetrics};
use crate::nets::{build_classifier, build_unet, Checkpoint, CheckpointMeta, Model, ModelConfig, UNetConfig};
use crate::optim::{schedule_update, EarlyStopState, Optimizer, ScheduleAction, TrainConfig};

use super::config::{SchemeConfig, SegConfig};
use super::data::{prepare_classifier_input, prepare_seg_input, probs_to_masks, seg_target, Dataset};
use super::folds::{balance_augment, group_by_class, holdout_split};

/// Batch size used for inference-only passes.
const EVAL_BATCH: usize = 16;

/// Independent seed for sub-task `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub action: ScheduleAction,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr,action\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr,
            e.action.name()
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// 0 when no epoch improved on the initial weights.
    pub best_epoch: usize,
}

/// Network inputs and one-hot targets, one `(1, ...)` tensor per sample.
#[derive(Clone, Debug, Default)]
pub struct TensorSet {
    pub inputs: Vec<Tensor<f32>>,
    pub targets: Vec<Tensor<f32>>,
}

impl TensorSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let x: Vec<Tensor<f32>> = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        let y: Vec<Tensor<f32>> = idx.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((Tensor::stack(&x)?, Tensor::stack(&y)?))
    }
}

/// Mean cross-entropy of `model` over `set`, eval mode.
pub fn eval_loss(model: &Model, set: &TensorSet) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = set.batch(chunk)?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let f = model.forward(&mut g, xv, Mode::Eval)?;
        let loss = g.cross_entropy(f.probs, &y)?;
        total += g.value(loss).item()? as f64 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Mini-batch training with the per-epoch schedule. The returned model is
/// the best one on `val` (on `train` when `val` is empty).
pub fn fit(mut model: Model, cfg: &TrainConfig, train: &TensorSet, val: &TensorSet, seed: u64) -> Result<(Model, Vec<EpochLog>, usize, f64)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut opt = Optimizer::<f32>::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut state = EarlyStopState::default();
    let mut best = (model.clone(), 0, f64::INFINITY);
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let f = model.forward(&mut g, xv, Mode::Train)?;
            let loss = g
                .cross_entropy(f.probs, &y)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
            g.backward(loss)?;
            total += g.value(loss).item()? as f64 * chunk.len() as f64;
            let grads = f.param_grads(&g, model.store());
            let updates = g.take_stat_updates();
            opt.step(model.store_mut().params_mut(), &grads)?;
            model.store_mut().apply_stat_updates(updates)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { eval_loss(&model, val)? };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: validation loss {val_loss}")));
        }
        let lr = opt.lr();
        let action = schedule_update(&mut state, val_loss, cfg);
        if state.epochs_since_improve == 0 {
            best = (model.clone(), epoch, val_loss);
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            action,
        });
        match action {
            ScheduleAction::DropLr => opt.scale_lr(cfg.lr_drop_factor),
            ScheduleAction::Stop => break,
            ScheduleAction::Continue => {}
        }
    }
    let (model, best_epoch, best_val) = best;
    Ok((model, log, best_epoch, best_val))
}

fn checkpoint(model: Model, train: &TrainConfig, extra: Vec<(String, String)>, best_epoch: usize, best_val: f64, seed: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::new(model, train.clone());
    ckpt.extra = extra;
    ckpt.meta = CheckpointMeta {
        epoch: best_epoch as u64,
        best_val_loss: best_val,
        seed,
    };
    ckpt
}

pub fn seg_tensors(data: &Dataset, indices: &[usize], size: usize) -> Result<TensorSet> {
    let mut set = TensorSet::default();
    for &i in indices {
        let s = &data.samples[i];
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("image {i} has no mask")))?;
        set.inputs.push(prepare_seg_input(&s.image, size)?);
        set.targets.push(seg_target(mask, size)?);
    }
    Ok(set)
}

/// Pixel accuracy, IoU and DSC of the lung class, pooled over `indices`,
/// at network resolution.
pub fn evaluate_segmentation(unet: &Model, data: &Dataset, indices: &[usize], size: usize) -> Result<SegMetrics> {
    let set = seg_tensors(data, indices, size)?;
    let mut pc = PixelConfusion::default();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = set.batch(chunk)?;
        let pred = probs_to_masks(&unet.predict(&x)?)?;
        let truth = probs_to_masks(&y)?;
        for (p, t) in pred.iter().zip(&truth) {
            pc.merge(&PixelConfusion::from_masks(p.pixels(), t.pixels())?);
        }
    }
    seg_metrics(&pc)
}

#[derive(Clone, Debug)]
pub struct SegOutcome {
    pub outcome: TrainOutcome,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Best model on the validation images; `None` without a validation set.
    pub val_metrics: Option<SegMetrics>,
}

/// U-Net training on every image's mask, holding out a stratified share for
/// validation.
pub fn train_segmentation(data: &Dataset, cfg: &SegConfig, seed: u64) -> Result<SegOutcome> {
    cfg.validate()?;
    if !data.has_masks() {
        return Err(Error::invalid("segmentation training needs a mask for every image"));
    }
    let (train_idx, val_idx) = holdout_split(&data.labels(), cfg.val_fraction, derive_seed(seed, 0))?;
    let unet = UNetConfig {
        in_channels: 1,
        out_classes: 2,
        ..cfg.unet.clone()
    };
    let model = build_unet(&unet, derive_seed(seed, 1))?;
    let train = seg_tensors(data, &train_idx, cfg.input_size)?;
    let val = seg_tensors(data, &val_idx, cfg.input_size)?;
    let (model, log, best_epoch, best_val) = fit(model, &cfg.train, &train, &val, derive_seed(seed, 2))?;
    let val_metrics = if val_idx.is_empty() {
        None
    } else {
        Some(evaluate_segmentation(&model, data, &val_idx, cfg.input_size)?)
    };
    let extra = vec![
        ("input_size".to_string(), cfg.input_size.to_string()),
        ("val_fraction".to_string(), cfg.val_fraction.to_string()),
    ];
    Ok(SegOutcome {
        outcome: TrainOutcome {
            checkpoint: checkpoint(model, &cfg.train, extra, best_epoch, best_val, seed),
            log,
            best_epoch,
        },
        train_indices: train_idx,
        val_indices: val_idx,
        val_metrics,
    })
}

fn one_hot(class: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(vec![1, 3]);
    t.data_mut()[class] = 1.0;
    t
}

pub fn classifier_tensors(data: &Dataset, items: &[(usize, AugmentSpec)], cfg: &SchemeConfig) -> Result<TensorSet> {
    let mut set = TensorSet::default();
    for (i, spec) in items {
        let s = &data.samples[*i];
        set.inputs.push(prepare_classifier_input(s, spec, cfg)?);
        set.targets.push(one_hot(s.label.index()));
    }
    Ok(set)
}

/// Trains one classifier on `train_idx` (class-balanced by augmentation)
/// with model selection on the unaugmented `val_idx`.
pub fn train_classifier(data: &Dataset, train_idx: &[usize], val_idx: &[usize], cfg: &SchemeConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = data.labels();
    let items: Vec<(usize, AugmentSpec)> = balance_augment(&group_by_class(train_idx, &labels), derive_seed(seed, 0))
        .into_iter()
        .map(|it| (it.index, it.spec))
        .collect();
    let val_items: Vec<(usize, AugmentSpec)> = val_idx.iter().map(|&i| (i, AugmentSpec::IDENTITY)).collect();
    let train = classifier_tensors(data, &items, cfg)?;
    let val = classifier_tensors(data, &val_items, cfg)?;
    let model = build_classifier(&cfg.classifier, derive_seed(seed, 1))?;
    let (model, log, best_epoch, best_val) = fit(model, &cfg.train, &train, &val, derive_seed(seed, 2))?;
    let extra = vec![
        ("scheme".to_string(), cfg.scheme.name().to_string()),
        ("prep".to_string(), cfg.prep.name().to_string()),
        ("input_size".to_string(), cfg.input_size.to_string()),
    ];
    Ok(TrainOutcome {
        checkpoint: checkpoint(model, &cfg.train, extra, best_epoch, best_val, seed),
        log,
        best_epoch,
    })
}

/// Rebuilds the scheme a classifier checkpoint was trained under.
pub fn scheme_of(ckpt: &Checkpoint) -> Result<SchemeConfig> {
    let ModelConfig::Classifier(classifier) = ckpt.model.config() else {
        return Err(Error::invalid("checkpoint holds a U-Net, not a classifier"));
    };
    let mut cfg = SchemeConfig {
        classifier: classifier.clone(),
        train: ckpt.train.clone(),
        ..SchemeConfig::default()
    };
    for key in ["scheme", "prep", "input_size"] {
        let v = ckpt
            .extra(key)
            .ok_or_else(|| Error::format(format!("classifier checkpoint lacks `{key}`")))?;
        cfg.set(key, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::Scheme;

    fn tiny_scheme() -> SchemeConfig {
        let mut cfg = SchemeConfig {
            input_size: 32,
            ..SchemeConfig::default()
        };
        cfg.classifier.width = 8;
        cfg.classifier.blocks = 1;
        cfg.train.max_epochs = 2;
        cfg
    }

    #[test]
    fn zero_lr_freezes_classifier_parameters() {
        let data = Dataset::from_phantoms([3, 3, 3], 32, 1).unwrap();
        let mut cfg = tiny_scheme();
        cfg.train.learning_rate = 0.0;
        let all: Vec<usize> = (0..9).collect();
        let out = train_classifier(&data, &all, &[], &cfg, 4).unwrap();
        let fresh = build_classifier(&cfg.classifier, derive_seed(4, 1)).unwrap();
        for (a, b) in out.checkpoint.model.store().params().iter().zip(fresh.store().params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn zero_lr_freezes_unet_parameters() {
        let data = Dataset::from_phantoms([2, 1, 1], 32, 1).unwrap();
        let mut cfg = SegConfig {
            input_size: 32,
            ..SegConfig::default()
        };
        cfg.unet.base_channels = 4;
        cfg.unet.depth = 2;
        cfg.train.learning_rate = 0.0;
        cfg.train.max_epochs = 2;
        let out = train_segmentation(&data, &cfg, 3).unwrap();
        let fresh = build_unet(
            &UNetConfig {
                in_channels: 1,
                out_classes: 2,
                ..cfg.unet.clone()
            },
            derive_seed(3, 1),
        )
        .unwrap();
        for (a, b) in out.outcome.checkpoint.model.store().params().iter().zip(fresh.store().params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn missing_masks_rejected() {
        let mut data = Dataset::from_phantoms([2, 1, 1], 32, 1).unwrap();
        data.samples[1].mask = None;
        assert!(train_segmentation(&data, &SegConfig::default(), 0).is_err());
        let cfg = SchemeConfig {
            scheme: Scheme::Segmented,
            ..tiny_scheme()
        };
        assert!(train_classifier(&data, &[0, 1, 2, 3], &[], &cfg, 0).is_err());
    }

    #[test]
    fn log_and_scheme_round_trip() {
        let data = Dataset::from_phantoms([3, 3, 3], 32, 1).unwrap();
        let cfg = tiny_scheme();
        let out = train_classifier(&data, &[0, 1, 3, 4, 6, 7], &[2, 5, 8], &cfg, 9).unwrap();
        let csv = log_to_csv(&out.log);
        assert!(csv.starts_with("epoch,train_loss,val_loss,lr,action\n1,"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(scheme_of(&out.checkpoint).unwrap(), cfg);
        let again = train_classifier(&data, &[0, 1, 3, 4, 6, 7], &[2, 5, 8], &cfg, 9).unwrap();
        assert_eq!(out.log, again.log);
    }

    #[test]
    fn early_stop_keeps_best_weights() {
        let data = Dataset::from_phantoms([3, 3, 3], 32, 1).unwrap();
        let mut cfg = tiny_scheme();
        cfg.train.max_epochs = 6;
        cfg.train.stop_patience = 2;
        cfg.train.lr_patience = 1;
        let out = train_classifier(&data, &[0, 1, 3, 4, 6, 7], &[2, 5, 8], &cfg, 2).unwrap();
        let best = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.meta.best_val_loss, best);
        assert_eq!(out.log[out.best_epoch - 1].val_loss, best);
    }
}
