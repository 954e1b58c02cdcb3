use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::imageproc::AugmentSpec;
use crate::metrics::{roc_curve, roc_micro, write_text, ConfusionMatrix, MetricsReport, RocCurve, Z95};
use crate::nets::{Checkpoint, Model};
use crate::ClassLabel;

use super::config::SchemeConfig;
use super::data::{prepare_classifier_input, Dataset};
use super::folds::{make_folds, FoldSplit};
use super::train::{derive_seed, log_to_csv, train_classifier, TrainOutcome};

const PREDICT_BATCH: usize = 16;

/// One test-set prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Dataset index.
    pub index: usize,
    pub fold: usize,
    pub label: ClassLabel,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Arg-max class; the lowest index wins ties.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Class probabilities for `indices`, unaugmented.
pub fn predict_indices(model: &Model, data: &Dataset, indices: &[usize], cfg: &SchemeConfig) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(PREDICT_BATCH) {
        let xs = chunk
            .iter()
            .map(|&i| prepare_classifier_input(&data.samples[i], &AugmentSpec::IDENTITY, cfg))
            .collect::<Result<Vec<_>>>()?;
        let probs = model.predict(&Tensor::stack(&xs)?)?;
        let (n, c) = probs.dims2()?;
        let d = probs.to_f64_vec();
        out.extend((0..n).map(|r| d[r * c..(r + 1) * c].to_vec()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    /// Per-class one-vs-rest curves followed by the micro average, keyed by
    /// lower-case name.
    pub roc: Vec<(String, RocCurve)>,
    pub predictions: Vec<Prediction>,
}

fn class_names() -> Vec<&'static str> {
    ClassLabel::ALL.iter().map(|l| l.name()).collect()
}

impl Evaluation {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Result<Self> {
        let truth: Vec<usize> = predictions.iter().map(|p| p.label.index()).collect();
        let pred: Vec<usize> = predictions.iter().map(Prediction::predicted).collect();
        let confusion = ConfusionMatrix::from_predictions(3, &truth, &pred)?;
        let report = MetricsReport::from_confusion(&confusion, &class_names(), Z95)?;
        let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.probs.clone()).collect();
        let mut roc = Vec::new();
        if !predictions.is_empty() {
            for l in ClassLabel::ALL {
                roc.push((l.name().to_ascii_lowercase(), roc_curve(&scores, &truth, l.index())?));
            }
            roc.push(("micro".to_string(), roc_micro(&scores, &truth)?));
        }
        Ok(Self {
            confusion,
            report,
            roc,
            predictions,
        })
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("index,fold,label,predicted,p_covid19,p_mers,p_sars\n");
        for p in &self.predictions {
            let probs: Vec<String> = p.probs.iter().map(f64::to_string).collect();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.index,
                p.fold,
                p.label.name(),
                ClassLabel::ALL[p.predicted()].name(),
                probs.join(",")
            ));
        }
        s
    }

    /// Writes metrics.csv, confusion.csv, roc_<name>.csv, predictions.csv
    /// and audit.txt into `dir`; returns the paths written.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            ("metrics.csv".to_string(), self.report.to_csv()?),
            ("confusion.csv".to_string(), self.confusion.to_csv(&class_names())?),
            ("predictions.csv".to_string(), self.predictions_csv()),
            ("audit.txt".to_string(), self.report.audit()),
        ];
        for (name, curve) in &self.roc {
            let auc = curve.auc.map_or("undefined".to_string(), |a| a.to_string());
            files.push((format!("roc_{name}.csv"), curve.to_csv()?));
            files[3].1.push_str(&format!("auc {name} = {auc}\n"));
        }
        let mut written = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            write_text(&path, &text)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Pools the test predictions of every fold's checkpoint.
pub fn evaluate_scheme(checkpoints: &[Checkpoint], folds: &[FoldSplit], data: &Dataset, cfg: &SchemeConfig) -> Result<Evaluation> {
    if checkpoints.len() != folds.len() {
        return Err(Error::invalid(format!(
            "{} checkpoints for {} folds",
            checkpoints.len(),
            folds.len()
        )));
    }
    let mut predictions = Vec::new();
    for (ckpt, fold) in checkpoints.iter().zip(folds) {
        if let Some(f) = ckpt.extra("fold") {
            if f != fold.fold_id.to_string() {
                return Err(Error::invalid(format!(
                    "checkpoint for fold {f} paired with fold {}",
                    fold.fold_id
                )));
            }
        }
        let probs = predict_indices(&ckpt.model, data, &fold.test, cfg)?;
        for (&index, probs) in fold.test.iter().zip(probs) {
            predictions.push(Prediction {
                index,
                fold: fold.fold_id,
                label: data.samples[index].label,
                probs,
            });
        }
    }
    Evaluation::from_predictions(predictions)
}

#[derive(Clone, Debug)]
pub struct CrossValResult {
    pub folds: Vec<FoldSplit>,
    pub outcomes: Vec<TrainOutcome>,
    pub evaluation: Evaluation,
}

impl CrossValResult {
    /// `index,fold,partition` for every fold's train, val and test lists.
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("index,fold,partition\n");
        for f in &self.folds {
            for (part, idx) in [("train", &f.train), ("val", &f.val), ("test", &f.test)] {
                for i in idx {
                    s.push_str(&format!("{i},{},{part}\n", f.fold_id));
                }
            }
        }
        s
    }

    /// Evaluation files plus folds.csv and one training log per fold.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let mut written = self.evaluation.write(dir)?;
        let folds = dir.join("folds.csv");
        write_text(&folds, &self.folds_csv())?;
        written.push(folds);
        for (f, out) in self.folds.iter().zip(&self.outcomes) {
            let path = dir.join(format!("fold{}_log.csv", f.fold_id));
            write_text(&path, &log_to_csv(&out.log))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Stratified k-fold cross-validation of one scheme. Each fold trains with
/// its own seed derived from `(seed, fold)`, so `jobs > 1` gives the same
/// result as a serial run.
pub fn crossval(data: &Dataset, cfg: &SchemeConfig, seed: u64, jobs: usize) -> Result<CrossValResult> {
    cfg.validate()?;
    let folds = make_folds(&data.labels(), cfg.folds, seed)?;
    let run = |f: &FoldSplit| -> Result<TrainOutcome> {
        let mut out = train_classifier(data, &f.train, &f.val, cfg, derive_seed(seed, f.fold_id as u64 + 1))?;
        out.checkpoint.extra.push(("fold".to_string(), f.fold_id.to_string()));
        Ok(out)
    };
    let outcomes = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        folds.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let checkpoints: Vec<Checkpoint> = outcomes.iter().map(|o| o.checkpoint.clone()).collect();
    let evaluation = evaluate_scheme(&checkpoints, &folds, data, cfg)?;
    Ok(CrossValResult {
        folds,
        outcomes,
        evaluation,
    })
}
