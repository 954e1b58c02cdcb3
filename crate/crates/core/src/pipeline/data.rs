use crate::datagen::{image_seed, try_generate_phantom, PhantomSpec};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::imageproc::{
    augment, clahe, complement, compose_3channel, read_image, resize_bilinear, AugmentSpec, ClaheParams, GrayImage,
    Maskable, MultiChannelImage,
};
use crate::nets::Model;
use crate::ClassLabel;

use super::config::{Prep, Scheme, SchemeConfig};
use super::manifest::DatasetManifest;

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: GrayImage,
    /// Binary lung mask (0 / 255), same size as the image.
    pub mask: Option<GrayImage>,
    pub label: ClassLabel,
}

/// Images held in memory, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let image = read_image(manifest.resolve(&r.image_path))?;
            let mask = match &r.mask_path {
                Some(p) => {
                    let m = read_image(manifest.resolve(p))?;
                    if m.dims() != image.dims() {
                        return Err(Error::shape(format!(
                            "mask {} is {:?}, image is {:?}",
                            p.display(),
                            m.dims(),
                            image.dims()
                        )));
                    }
                    Some(binarize(&m))
                }
                None => None,
            };
            samples.push(Sample {
                image,
                mask,
                label: r.label,
            });
        }
        Ok(Self { samples })
    }

    /// The phantoms `generate_dataset` would write for the same arguments.
    pub fn from_phantoms(counts: [usize; 3], size: usize, seed: u64) -> Result<Self> {
        let mut samples = Vec::new();
        for (label, &n) in ClassLabel::ALL.iter().zip(&counts) {
            for i in 0..n {
                let p = try_generate_phantom(&PhantomSpec::new(image_seed(seed, *label, i), size, *label))?;
                samples.push(Sample {
                    image: p.image,
                    mask: Some(p.mask),
                    label: p.label,
                });
            }
        }
        Ok(Self { samples })
    }

    /// Replaces every mask with the U-Net prediction.
    pub fn with_predicted_masks(&self, unet: &Model, input_size: usize) -> Result<Self> {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.mask = Some(predict_mask(unet, &s.image, input_size)?);
        }
        Ok(out)
    }
}

/// Thresholds at mid-grey so interpolated masks stay binary.
pub fn binarize(mask: &GrayImage) -> GrayImage {
    mask.map(|p| if p >= 128 { 255 } else { 0 })
}

pub fn preprocess(img: &GrayImage, prep: Prep) -> Result<MultiChannelImage> {
    let params = ClaheParams::default();
    match prep {
        Prep::Original => MultiChannelImage::new(vec![img.clone()]),
        Prep::Clahe => MultiChannelImage::new(vec![clahe(img, &params)?]),
        Prep::Complement => MultiChannelImage::new(vec![complement(img)]),
        Prep::ThreeChannel => compose_3channel(img, &params),
    }
}

fn to_tensor(img: &MultiChannelImage) -> Result<Tensor<f32>> {
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity(img.len() * w * h);
    for c in img.channels() {
        data.extend(c.pixels().iter().map(|&p| p as f32 / 255.0));
    }
    Tensor::new(vec![1, img.len(), h, w], data)
}

/// Classifier input `(1, C, S, S)` in [0, 1]: augment (image and mask),
/// enhance the full image, mask if the scheme asks for it, then resize.
pub fn prepare_classifier_input(sample: &Sample, spec: &AugmentSpec, cfg: &SchemeConfig) -> Result<Tensor<f32>> {
    let image = augment(&sample.image, spec, 0)?;
    let mut x = preprocess(&image, cfg.prep)?;
    if cfg.scheme == Scheme::Segmented {
        let mask = sample
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid("segmented scheme needs a lung mask for every image"))?;
        let mask = binarize(&augment(mask, spec, 0)?);
        x = x.apply_mask(&mask)?;
    }
    let s = cfg.input_size;
    to_tensor(&x.map_channels(|c| resize_bilinear(c, s, s))?)
}

/// U-Net input `(1, 1, S, S)`.
pub fn prepare_seg_input(image: &GrayImage, size: usize) -> Result<Tensor<f32>> {
    to_tensor(&MultiChannelImage::new(vec![resize_bilinear(image, size, size)?])?)
}

/// One-hot target `(1, 2, S, S)`: channel 0 background, channel 1 lung.
pub fn seg_target(mask: &GrayImage, size: usize) -> Result<Tensor<f32>> {
    let m = binarize(&resize_bilinear(mask, size, size)?);
    let fg: Vec<f32> = m.pixels().iter().map(|&p| if p > 0 { 1.0 } else { 0.0 }).collect();
    let mut data: Vec<f32> = fg.iter().map(|v| 1.0 - v).collect();
    data.extend(fg);
    Tensor::new(vec![1, 2, size, size], data)
}

/// Lung mask at network resolution from `(N, 2, S, S)` probabilities:
/// 255 where the lung channel wins.
pub fn probs_to_masks(probs: &Tensor<f32>) -> Result<Vec<GrayImage>> {
    let (n, c, h, w) = probs.dims4()?;
    if c != 2 {
        return Err(Error::shape(format!("expected 2 segmentation channels, got {c}")));
    }
    let d = probs.data();
    Ok((0..n)
        .map(|i| {
            let base = i * 2 * h * w;
            GrayImage::from_fn(w, h, |x, y| {
                let j = y * w + x;
                if d[base + h * w + j] > d[base + j] {
                    255
                } else {
                    0
                }
            })
        })
        .collect())
}

/// Segments one image; the mask comes back at the image's own size.
pub fn predict_mask(unet: &Model, image: &GrayImage, input_size: usize) -> Result<GrayImage> {
    let probs = unet.predict(&prepare_seg_input(image, input_size)?)?;
    let small = probs_to_masks(&probs)?.remove(0);
    Ok(binarize(&resize_bilinear(&small, image.width(), image.height())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        let image = GrayImage::from_fn(32, 32, |x, y| (x * 4 + y) as u8);
        let mask = GrayImage::from_fn(32, 32, |x, _| if x < 16 { 255 } else { 0 });
        Sample {
            image,
            mask: Some(mask),
            label: ClassLabel::Mers,
        }
    }

    #[test]
    fn segmented_input_is_zero_outside_mask() {
        let cfg = SchemeConfig {
            scheme: Scheme::Segmented,
            input_size: 32,
            ..SchemeConfig::default()
        };
        let x = prepare_classifier_input(&sample(), &AugmentSpec::IDENTITY, &cfg).unwrap();
        assert_eq!(x.shape(), &[1, 1, 32, 32]);
        for y in 0..32 {
            assert_eq!(x.data()[y * 32 + 20], 0.0);
            assert!(x.data()[y * 32 + 5] > 0.0);
        }
    }

    #[test]
    fn three_channel_input_shape_and_order() {
        let mut cfg = SchemeConfig {
            input_size: 16,
            ..SchemeConfig::default()
        };
        cfg.set("prep", "three-channel").unwrap();
        let s = sample();
        let x = prepare_classifier_input(&s, &AugmentSpec::IDENTITY, &cfg).unwrap();
        assert_eq!(x.shape(), &[1, 3, 16, 16]);
        // Channel 2 is the complement of channel 0 at the corner pixel.
        assert!((x.data()[0] + x.data()[2 * 256] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn plain_scheme_needs_no_mask() {
        let mut s = sample();
        s.mask = None;
        let cfg = SchemeConfig::default();
        assert!(prepare_classifier_input(&s, &AugmentSpec::IDENTITY, &cfg).is_ok());
        let seg = SchemeConfig {
            scheme: Scheme::Segmented,
            ..cfg
        };
        assert!(prepare_classifier_input(&s, &AugmentSpec::IDENTITY, &seg).is_err());
    }

    #[test]
    fn seg_target_and_decode_agree() {
        let s = sample();
        let t = seg_target(s.mask.as_ref().unwrap(), 32).unwrap();
        let back = probs_to_masks(&t).unwrap();
        assert_eq!(back[0], *s.mask.as_ref().unwrap());
    }

    #[test]
    fn phantoms_match_generated_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = crate::datagen::generate_dataset([2, 1, 1], 32, 5, dir.path()).unwrap();
        let a = Dataset::load(&m).unwrap();
        let b = Dataset::from_phantoms([2, 1, 1], 32, 5).unwrap();
        assert_eq!(a.labels(), b.labels());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }
}
