//! Segmentation and classification metrics, binomial confidence intervals,
//! ROC curves and CSV rendering.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Multiplier for a 95% normal-approximation interval.
pub const Z95: f64 = 1.96;

/// Pixel counts with foreground (lung) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelConfusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelConfusion {
    /// Counts agreement between a predicted and a ground-truth mask
    /// (non-zero = foreground).
    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!("mask sizes {} vs {}", pred.len(), truth.len())));
        }
        let mut pc = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => pc.tp += 1,
                (false, false) => pc.tn += 1,
                (true, false) => pc.fp += 1,
                (false, true) => pc.fn_ += 1,
            }
        }
        Ok(pc)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &PixelConfusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub accuracy: f64,
    pub iou: f64,
    pub dsc: f64,
}

pub fn seg_metrics(pc: &PixelConfusion) -> Result<SegMetrics> {
    let total = pc.total();
    if total == 0 {
        return Err(Error::invalid("segmentation metrics over zero pixels"));
    }
    let union = pc.tp + pc.fp + pc.fn_;
    // Both masks empty: perfect agreement.
    let (iou, dsc) = if union == 0 {
        (1.0, 1.0)
    } else {
        (
            pc.tp as f64 / union as f64,
            2.0 * pc.tp as f64 / (2 * pc.tp + pc.fp + pc.fn_) as f64,
        )
    };
    Ok(SegMetrics {
        accuracy: (pc.tp + pc.tn) as f64 / total as f64,
        iou,
        dsc,
    })
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// Builds from row-major counts.
    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(Error::shape(format!(
                "{} counts for a {n_classes}x{n_classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { n: n_classes, counts })
    }

    pub fn from_predictions(n_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("truth and prediction lengths differ"));
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n || pred >= self.n {
            return Err(Error::invalid(format!("class index out of range ({truth}, {pred})")));
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of samples whose true class is `i`.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i * self.n..(i + 1) * self.n].iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// One-vs-rest `(tp, tn, fp, fn)` for class `i`.
    pub fn one_vs_rest(&self, i: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(i, i);
        let fn_ = self.support(i) - tp;
        let fp = (0..self.n).map(|t| self.get(t, i)).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, tn, fp, fn_)
    }

    /// CSV grid with a header row of predicted class names.
    pub fn to_csv(&self, names: &[&str]) -> Result<String> {
        if names.len() != self.n {
            return Err(Error::shape("one name per class required"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (i, name) in names.iter().enumerate() {
            let mut row = vec![name.to_string()];
            row.extend((0..self.n).map(|j| self.get(i, j).to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

pub fn accumulate_folds(folds: &[ConfusionMatrix]) -> Result<ConfusionMatrix> {
    let first = folds.first().ok_or_else(|| Error::invalid("no fold matrices to accumulate"))?;
    let mut acc = ConfusionMatrix::new(first.n);
    for cm in folds {
        if cm.n != first.n {
            return Err(Error::shape(format!("{}-class matrix among {}-class folds", cm.n, first.n)));
        }
        acc.counts.iter_mut().zip(&cm.counts).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

/// A proportion; `degenerate` marks a 0/0 that was reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    pub fn of(num: u64, den: u64) -> Self {
        if den == 0 {
            Ratio {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Ratio {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Accuracy,
    Precision,
    Sensitivity,
    F1,
    Specificity,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Accuracy,
        MetricKind::Precision,
        MetricKind::Sensitivity,
        MetricKind::F1,
        MetricKind::Specificity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Precision => "precision",
            MetricKind::Sensitivity => "sensitivity",
            MetricKind::F1 => "f1",
            MetricKind::Specificity => "specificity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: Ratio,
    pub precision: Ratio,
    pub sensitivity: Ratio,
    pub f1: Ratio,
    pub specificity: Ratio,
}

impl ClassMetrics {
    pub fn get(&self, kind: MetricKind) -> Ratio {
        match kind {
            MetricKind::Accuracy => self.accuracy,
            MetricKind::Precision => self.precision,
            MetricKind::Sensitivity => self.sensitivity,
            MetricKind::F1 => self.f1,
            MetricKind::Specificity => self.specificity,
        }
    }
}

/// One-vs-rest metrics of class `i`. F1 is computed as `2TP / (2TP + FP + FN)`,
/// the harmonic mean of precision and sensitivity in integer form.
pub fn class_metrics(cm: &ConfusionMatrix, i: usize) -> Result<ClassMetrics> {
    if i >= cm.n {
        return Err(Error::invalid(format!("class {i} of {}", cm.n)));
    }
    let (tp, tn, fp, fn_) = cm.one_vs_rest(i);
    Ok(ClassMetrics {
        accuracy: Ratio::of(tp + tn, tp + tn + fp + fn_),
        precision: Ratio::of(tp, tp + fp),
        sensitivity: Ratio::of(tp, tp + fn_),
        f1: Ratio::of(2 * tp, 2 * tp + fp + fn_),
        specificity: Ratio::of(tn, tn + fp),
    })
}

/// `sum(w_i * v_i) / sum(w_i)`.
pub fn weighted_overall(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::shape(format!("{} values, {} weights", values.len(), weights.len())));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid("negative weight"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}

/// Normal-approximation half-width `z * sqrt(p (1 - p) / n)`.
pub fn confidence_interval(value: f64, n: u64, z: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("confidence interval with n = 0"));
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::invalid(format!("proportion {value} outside [0, 1]")));
    }
    Ok(z * (value * (1.0 - value) / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricWithCI {
    pub value: f64,
    pub half_width: f64,
    pub n: u64,
    pub z: f64,
    pub degenerate: bool,
}

impl MetricWithCI {
    pub fn new(value: f64, n: u64, z: f64, degenerate: bool) -> Result<Self> {
        Ok(Self {
            value,
            half_width: confidence_interval(value, n, z)?,
            n,
            z,
            degenerate,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub metrics: Vec<MetricWithCI>,
}

impl ReportRow {
    pub fn get(&self, kind: MetricKind) -> &MetricWithCI {
        &self.metrics[MetricKind::ALL.iter().position(|&k| k == kind).expect("known metric")]
    }
}

/// Per-class rows plus the sample-weighted overall row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ReportRow>,
    pub overall: ReportRow,
    /// True-class sample counts used as weights.
    pub weights: Vec<u64>,
}

impl MetricsReport {
    /// Builds the report from an accumulated confusion matrix. Each class
    /// interval uses that class's sample count; the overall row uses the
    /// total.
    pub fn from_confusion(cm: &ConfusionMatrix, names: &[&str], z: f64) -> Result<Self> {
        if names.len() != cm.n {
            return Err(Error::shape("one name per class required"));
        }
        let weights: Vec<u64> = (0..cm.n).map(|i| cm.support(i)).collect();
        let mut per_class = Vec::with_capacity(cm.n);
        let mut all = Vec::with_capacity(cm.n);
        for (i, name) in names.iter().enumerate() {
            let m = class_metrics(cm, i)?;
            let n = weights[i].max(1);
            let metrics = MetricKind::ALL
                .iter()
                .map(|&k| MetricWithCI::new(m.get(k).value, n, z, m.get(k).degenerate || weights[i] == 0))
                .collect::<Result<Vec<_>>>()?;
            per_class.push(ReportRow {
                label: name.to_string(),
                metrics,
            });
            all.push(m);
        }
        let w: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
        let total = cm.total().max(1);
        let overall = MetricKind::ALL
            .iter()
            .map(|&k| {
                let vals: Vec<f64> = all.iter().map(|m| m.get(k).value).collect();
                let degenerate = all.iter().any(|m| m.get(k).degenerate);
                MetricWithCI::new(weighted_overall(&vals, &w)?, total, z, degenerate)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            per_class,
            overall: ReportRow {
                label: "overall".into(),
                metrics: overall,
            },
            weights,
        })
    }

    /// `label,metric,value,half_width,n,degenerate`, one row per
    /// (class or overall) and metric.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "metric", "value", "half_width", "n", "degenerate"])
            .map_err(csv_err)?;
        for row in self.per_class.iter().chain(std::iter::once(&self.overall)) {
            for (k, m) in MetricKind::ALL.iter().zip(&row.metrics) {
                w.write_record([
                    row.label.clone(),
                    k.name().to_string(),
                    format!("{}", m.value),
                    format!("{}", m.half_width),
                    m.n.to_string(),
                    m.degenerate.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }

    /// Human-readable trace of every overall value as a weighted sum.
    pub fn audit(&self) -> String {
        let total: u64 = self.weights.iter().sum();
        let mut out = String::new();
        for (idx, k) in MetricKind::ALL.iter().enumerate() {
            let terms: Vec<String> = self
                .per_class
                .iter()
                .zip(&self.weights)
                .map(|(r, w)| format!("{w}*{}", r.metrics[idx].value))
                .collect();
            out.push_str(&format!(
                "{} = ({}) / {total} = {}\n",
                k.name(),
                terms.join(" + "),
                self.overall.metrics[idx].value
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// From the strictest threshold (`+inf`, origin) down to the loosest.
    pub points: Vec<RocPoint>,
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
}

impl RocCurve {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fpr", "tpr", "threshold"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])
                .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Binary ROC from `(score, is_positive)` pairs. Tied scores move the curve
/// diagonally, so the trapezoid area equals the mid-rank pair probability.
pub fn roc_binary(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores".into()));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let rate = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: rate(fp, neg),
            tpr: rate(tp, pos),
            threshold: t,
        });
    }
    let auc = (pos > 0 && neg > 0).then(|| {
        points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    });
    Ok(RocCurve { points, auc })
}

fn check_scores(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("one score row per label required"));
    }
    if scores.iter().any(|r| r.len() != n_classes) || labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::shape(format!("score rows and labels must index {n_classes} classes")));
    }
    Ok(())
}

/// One-vs-rest ROC of class `i` from per-sample class probabilities.
pub fn roc_curve(scores: &[Vec<f64>], labels: &[usize], i: usize) -> Result<RocCurve> {
    let n = scores.first().map_or(0, Vec::len);
    check_scores(scores, labels, n)?;
    if i >= n {
        return Err(Error::invalid(format!("class {i} of {n}")));
    }
    let s: Vec<f64> = scores.iter().map(|r| r[i]).collect();
    let p: Vec<bool> = labels.iter().map(|&l| l == i).collect();
    roc_binary(&s, &p)
}

/// Micro-average: every (sample, class) pair pooled into one binary problem.
pub fn roc_micro(scores: &[Vec<f64>], labels: &[usize]) -> Result<RocCurve> {
    let n = scores.first().map_or(0, Vec::len);
    check_scores(scores, labels, n)?;
    let s: Vec<f64> = scores.iter().flatten().copied().collect();
    let p: Vec<bool> = labels.iter().flat_map(|&l| (0..n).map(move |c| c == l)).collect();
    roc_binary(&s, &p)
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn seg_examples() {
        let gt = [1u8, 1, 1, 1];
        let pred = [1u8, 0, 1, 0];
        let m = seg_metrics(&PixelConfusion::from_masks(&pred, &gt).unwrap()).unwrap();
        assert_eq!(m.iou, 0.5);
        assert!(close(m.dsc, 2.0 / 3.0, 1e-15));
        let same = seg_metrics(&PixelConfusion::from_masks(&gt, &gt).unwrap()).unwrap();
        assert_eq!((same.iou, same.dsc), (1.0, 1.0));
        let empty = seg_metrics(&PixelConfusion::from_masks(&[0, 0], &[0, 0]).unwrap()).unwrap();
        assert_eq!((empty.iou, empty.dsc, empty.accuracy), (1.0, 1.0, 1.0));
        let disjoint = seg_metrics(&PixelConfusion::from_masks(&[1, 0], &[0, 1]).unwrap()).unwrap();
        assert_eq!((disjoint.iou, disjoint.dsc), (0.0, 0.0));
        assert!(seg_metrics(&PixelConfusion::default()).is_err());
    }

    #[test]
    fn class_metrics_example() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 1, 3, 1, 0, 0, 4]).unwrap();
        let m = class_metrics(&cm, 0).unwrap();
        assert!(close(m.sensitivity.value, 5.0 / 6.0, 1e-15));
        assert!(close(m.precision.value, 5.0 / 6.0, 1e-15));
        assert!(close(m.specificity.value, 8.0 / 9.0, 1e-15));
        assert!(close(m.accuracy.value, 13.0 / 15.0, 1e-15));
        assert!(close(m.f1.value, 5.0 / 6.0, 1e-15));
        assert!(class_metrics(&cm, 3).is_err());
    }

    #[test]
    fn diagonal_and_degenerate() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 2, 0, 0, 0, 7]).unwrap();
        for i in 0..3 {
            let m = class_metrics(&cm, i).unwrap();
            for k in MetricKind::ALL {
                assert_eq!(m.get(k).value, 1.0);
            }
        }
        let cm = ConfusionMatrix::from_counts(3, vec![4, 1, 0, 0, 0, 0, 0, 0, 7]).unwrap();
        let m = class_metrics(&cm, 1).unwrap();
        assert_eq!(m.sensitivity, Ratio { value: 0.0, degenerate: true });
        assert!(!m.precision.degenerate);
    }

    #[test]
    fn weighted_overall_examples() {
        let v = weighted_overall(&[0.9953, 0.9310, 0.9704], &[423.0, 144.0, 134.0]).unwrap();
        assert!(close(v, 0.9773, 1e-4), "{v}");
        assert!(close(weighted_overall(&[0.2, 0.4, 0.9], &[1.0; 3]).unwrap(), 0.5, 1e-15));
        assert_eq!(weighted_overall(&[0.2, 0.4, 0.9], &[0.0, 5.0, 0.0]).unwrap(), 0.4);
        assert!(weighted_overall(&[0.2], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn confidence_interval_examples() {
        assert!(close(confidence_interval(0.9953, 423, Z95).unwrap(), 0.0065, 1e-4));
        assert!(close(confidence_interval(0.9773, 701, Z95).unwrap(), 0.0110, 1e-4));
        assert_eq!(confidence_interval(1.0, 50, Z95).unwrap(), 0.0);
        let half = confidence_interval(0.5, 50, Z95).unwrap();
        for p in [0.1, 0.3, 0.49, 0.51, 0.9] {
            assert!(confidence_interval(p, 50, Z95).unwrap() < half);
        }
        assert!(confidence_interval(0.5, 0, Z95).is_err());
    }

    #[test]
    fn fold_accumulation() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 1, 3, 1, 0, 0, 4]).unwrap();
        let five = accumulate_folds(&vec![cm.clone(); 5]).unwrap();
        assert_eq!(five.counts(), cm.counts().iter().map(|c| 5 * c).collect::<Vec<_>>().as_slice());
        let other = ConfusionMatrix::from_counts(3, vec![1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(
            accumulate_folds(&[cm.clone(), other.clone()]).unwrap(),
            accumulate_folds(&[other, cm.clone()]).unwrap()
        );
        assert!(accumulate_folds(&[cm, ConfusionMatrix::new(2)]).is_err());
    }

    fn pair_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    den += 1.0;
                    num += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn roc_examples() {
        let r = roc_binary(&[0.9, 0.8, 0.4, 0.1], &[true, false, true, false]).unwrap();
        assert!(close(r.auc.unwrap(), 0.75, 1e-15));
        assert_eq!(r.points.first().unwrap().threshold, f64::INFINITY);
        assert!(r.points.windows(2).all(|w| w[0].threshold > w[1].threshold));
        let r = roc_binary(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, Some(1.0));
        let r = roc_binary(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(r.auc, Some(0.5));
        assert_eq!(roc_binary(&[0.1, 0.2], &[true, true]).unwrap().auc, None);
    }

    #[test]
    fn roc_trapezoid_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
            let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let r = roc_binary(&scores, &pos).unwrap();
            if let Some(auc) = r.auc {
                assert!(close(auc, pair_auc(&scores, &pos), 1e-12));
            }
        }
    }

    #[test]
    fn one_vs_rest_and_micro() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6], vec![0.5, 0.3, 0.2]];
        let labels = [0, 1, 2, 0];
        for c in 0..3 {
            assert_eq!(roc_curve(&scores, &labels, c).unwrap().auc, Some(1.0));
        }
        assert_eq!(roc_micro(&scores, &labels).unwrap().auc, Some(1.0));
        assert!(roc_curve(&scores, &[0, 1, 3, 0], 0).is_err());
    }

    #[test]
    fn report_overall_is_weighted_recombination() {
        let cm = ConfusionMatrix::from_counts(3, vec![40, 3, 2, 5, 20, 1, 2, 2, 25]).unwrap();
        let r = MetricsReport::from_confusion(&cm, &["A", "B", "C"], Z95).unwrap();
        let w: Vec<f64> = r.weights.iter().map(|&v| v as f64).collect();
        for (idx, _) in MetricKind::ALL.iter().enumerate() {
            let vals: Vec<f64> = r.per_class.iter().map(|row| row.metrics[idx].value).collect();
            assert_eq!(r.overall.metrics[idx].value, weighted_overall(&vals, &w).unwrap());
        }
        // Weighted sensitivity is plain accuracy over all samples.
        let sens = r.overall.get(MetricKind::Sensitivity).value;
        assert!(close(sens, cm.correct() as f64 / cm.total() as f64, 1e-12));
        for row in r.per_class.iter().chain([&r.overall]) {
            for m in &row.metrics {
                assert_eq!(m.half_width, m.z * (m.value * (1.0 - m.value) / m.n as f64).sqrt());
            }
        }
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 * 5);
        assert!(r.audit().contains("sensitivity"));
    }

    #[test]
    fn confusion_csv() {
        let cm = ConfusionMatrix::from_predictions(2, &[0, 1, 1], &[0, 0, 1]).unwrap();
        assert_eq!(cm.to_csv(&["a", "b"]).unwrap(), "true\\pred,a,b\na,1,0\nb,1,1\n");
    }
}
