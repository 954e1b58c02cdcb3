//! Two-stage chest X-ray recognition pipeline: contrast preprocessing, U-Net
//! lung segmentation, CNN classification under stratified k-fold
//! cross-validation, metric reporting with binomial confidence intervals,
//! and Grad-CAM / Score-CAM saliency.
//!
//! Everything runs on the small reverse-mode engine in [`engine`]; there is
//! no external tensor library. [`datagen`] provides deterministic lung
//! phantoms so the whole protocol can run without clinical data.

pub mod datagen;
pub mod engine;
pub mod error;
pub mod imageproc;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod saliency;

pub use engine::{Graph, Mode, Real, Tensor, Var};
pub use error::{Error, Result};
pub use imageproc::{GrayImage, MultiChannelImage};
pub use metrics::{ConfusionMatrix, MetricWithCI, MetricsReport, PixelConfusion};
pub use nets::{ClassifierConfig, Family, Model, UNetConfig};
pub use optim::TrainConfig;
pub use pipeline::{Prep, Scheme, SchemeConfig};
pub use saliency::{SaliencyMap, SaliencyMethod};

/// The three disease classes, in the fixed order used for confusion-matrix
/// rows, report rows and network outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Covid19,
    Mers,
    Sars,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Covid19, ClassLabel::Mers, ClassLabel::Sars];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Covid19 => "COVID19",
            ClassLabel::Mers => "MERS",
            ClassLabel::Sars => "SARS",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "COVID19" | "COVID" => Ok(ClassLabel::Covid19),
            "MERS" => Ok(ClassLabel::Mers),
            "SARS" => Ok(ClassLabel::Sars),
            _ => Err(Error::Unknown {
                kind: "class label",
                name: s.to_string(),
            }),
        }
    }
}
