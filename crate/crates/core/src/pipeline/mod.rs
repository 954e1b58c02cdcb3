//! Experimental protocol: stratified folds, class balancing by
//! augmentation, segmentation and classification training, and pooled
//! evaluation.

mod config;
mod data;
mod evaluate;
mod folds;
mod manifest;
mod train;

pub use config::{parse_kv, read_kv, render_kv, Prep, Scheme, SchemeConfig, SegConfig};
pub use data::{
    binarize, predict_mask, prepare_classifier_input, prepare_seg_input, preprocess, probs_to_masks, seg_target,
    Dataset, Sample,
};
pub use evaluate::{crossval, evaluate_scheme, predict_indices, CrossValResult, Evaluation, Prediction};
pub use folds::{
    balance_augment, balance_factors, group_by_class, holdout_split, make_folds, AugmentedItem, FoldSplit, VAL_FRACTION,
};
pub use manifest::{DatasetManifest, ManifestRecord};
pub use train::{
    classifier_tensors, derive_seed, eval_loss, evaluate_segmentation, fit, log_to_csv, scheme_of, seg_tensors,
    train_classifier, train_segmentation, EpochLog, SegOutcome, TensorSet, TrainOutcome,
};
