//! Grayscale image transforms: histogram equalization, CLAHE, complement,
//! the three-channel stack, masking and geometric augmentation.

mod geometry;
mod histogram;
mod io;

pub use geometry::{augment, bilinear_resize, resize_bilinear, AugmentSpec, ALLOWED_ROTATIONS, MAX_TRANSLATION};
pub use histogram::{clahe, equalize_hist, ClaheParams, ClaheTarget, HistogramMapping, MappingSource};
pub use io::{decode_pgm, encode_pgm, read_image, read_pgm, write_pgm};

use crate::error::{Error, Result};

/// 8-bit single-channel raster stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub const BIT_DEPTH: u32 = 8;
    pub const MAX_VALUE: u8 = u8::MAX;

    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &p in &self.pixels {
            hist[p as usize] += 1;
        }
        hist
    }

    /// True when every pixel is either 0 or 255.
    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0 || p == 255)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Ordered stack of same-sized grayscale channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiChannelImage {
    channels: Vec<GrayImage>,
}

impl MultiChannelImage {
    pub fn new(channels: Vec<GrayImage>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::invalid("multi-channel image needs at least one channel"))?;
        if channels.iter().any(|c| c.dims() != first.dims()) {
            return Err(Error::shape("channels differ in dimensions"));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[GrayImage] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &GrayImage {
        &self.channels[i]
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn map_channels(&self, f: impl Fn(&GrayImage) -> Result<GrayImage>) -> Result<Self> {
        Self::new(self.channels.iter().map(f).collect::<Result<_>>()?)
    }
}

impl From<GrayImage> for MultiChannelImage {
    fn from(img: GrayImage) -> Self {
        Self {
            channels: vec![img],
        }
    }
}

/// Intensity inversion `255 - x`.
pub fn complement(img: &GrayImage) -> GrayImage {
    img.map(|p| GrayImage::MAX_VALUE - p)
}

/// Stacks (original, CLAHE, complement) as three channels.
pub fn compose_3channel(img: &GrayImage, params: &ClaheParams) -> Result<MultiChannelImage> {
    let enhanced = clahe(img, params)?;
    MultiChannelImage::new(vec![img.clone(), enhanced, complement(img)])
}

/// Types that can be restricted to a binary lung mask.
pub trait Maskable: Sized {
    /// Zeroes every pixel where the mask is 0; applied per channel.
    fn apply_mask(&self, mask: &GrayImage) -> Result<Self>;
}

fn check_mask(dims: (usize, usize), mask: &GrayImage) -> Result<()> {
    if mask.dims() != dims {
        return Err(Error::shape(format!(
            "mask is {:?}, image is {:?}",
            mask.dims(),
            dims
        )));
    }
    if !mask.is_binary() {
        return Err(Error::invalid("mask values must be 0 or 255"));
    }
    Ok(())
}

impl Maskable for GrayImage {
    fn apply_mask(&self, mask: &GrayImage) -> Result<Self> {
        check_mask(self.dims(), mask)?;
        let pixels = self
            .pixels
            .iter()
            .zip(mask.pixels())
            .map(|(&p, &m)| if m == 0 { 0 } else { p })
            .collect();
        GrayImage::new(self.width, self.height, pixels)
    }
}

impl Maskable for MultiChannelImage {
    fn apply_mask(&self, mask: &GrayImage) -> Result<Self> {
        self.map_channels(|c| c.apply_mask(mask))
    }
}

/// Convenience free-function form of [`Maskable::apply_mask`].
pub fn apply_mask<I: Maskable>(img: &I, mask: &GrayImage) -> Result<I> {
    img.apply_mask(mask)
}
