use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GrayImage;
use crate::error::{Error, Result};

/// Rotation angles (degrees) the augmenter may draw from.
pub const ALLOWED_ROTATIONS: [i32; 11] = [0, 5, -5, 10, -10, 20, -20, 25, -25, 30, -30];

/// Bound on each translation component, as a fraction of the image side.
pub const MAX_TRANSLATION: f64 = 0.15;

/// One geometric augmentation: rotation about the image centre followed by
/// a translation expressed as a fraction of width and height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub rotation_deg: i32,
    pub translate_frac: (f64, f64),
    pub seed: u64,
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        rotation_deg: 0,
        translate_frac: (0.0, 0.0),
        seed: 0,
    };

    /// Draws a rotation from [`ALLOWED_ROTATIONS`] and a translation from
    /// the closed interval `[-0.15, 0.15]` per axis.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation_deg = ALLOWED_ROTATIONS[rng.random_range(0..ALLOWED_ROTATIONS.len())];
        let tx = rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION);
        let ty = rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION);
        Self {
            rotation_deg,
            translate_frac: (tx, ty),
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0 && self.translate_frac == (0.0, 0.0)
    }

    /// True when both the rotation and the translation lie in the sampling
    /// ranges.
    pub fn in_sampling_range(&self) -> bool {
        ALLOWED_ROTATIONS.contains(&self.rotation_deg)
            && [self.translate_frac.0, self.translate_frac.1]
                .iter()
                .all(|t| t.abs() <= MAX_TRANSLATION)
    }
}

#[inline]
fn sample_bilinear(src: &[f64], w: usize, h: usize, sx: f64, sy: f64) -> f64 {
    let x0 = (sx.floor() as usize).min(w - 1);
    let y0 = (sy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Corner-aligned source coordinate for destination index `i`; a length-1
/// destination samples the source centre.
#[inline]
fn corner_aligned(i: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len == 1 {
        (src_len - 1) as f64 / 2.0
    } else {
        i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

/// Bilinear resampling of a real-valued raster with corner-aligned grids.
pub fn bilinear_resize(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh, "raster length");
    let xs: Vec<f64> = (0..dw).map(|x| corner_aligned(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let sy = corner_aligned(y, sh, dh);
        for &sx in &xs {
            out.push(sample_bilinear(src, sw, sh, sx, sy));
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize with corner-aligned coordinates.
pub fn resize_bilinear(img: &GrayImage, w: usize, h: usize) -> Result<GrayImage> {
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!("resize target {w}x{h}")));
    }
    if img.dims() == (w, h) {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let out = bilinear_resize(&src, img.width(), img.height(), w, h);
    GrayImage::new(w, h, out.into_iter().map(to_u8).collect())
}

/// Rotates about the image centre, then translates by
/// `(tx * width, ty * height)`. Positive angles turn the content
/// counter-clockwise on screen. Pixels whose source falls outside the frame
/// take `fill`.
///
/// The rotation must be one of [`ALLOWED_ROTATIONS`]; the translation is
/// taken as given so that callers can express exact pixel shifts.
pub fn augment(img: &GrayImage, spec: &AugmentSpec, fill: u8) -> Result<GrayImage> {
    if !ALLOWED_ROTATIONS.contains(&spec.rotation_deg) {
        return Err(Error::invalid(format!(
            "rotation {} deg not in the allowed set",
            spec.rotation_deg
        )));
    }
    let (tfx, tfy) = spec.translate_frac;
    if !(tfx.is_finite() && tfy.is_finite()) {
        return Err(Error::invalid("non-finite translation"));
    }
    if spec.is_identity() {
        return Ok(img.clone());
    }

    let (w, h) = img.dims();
    let src: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (tx, ty) = (tfx * w as f64, tfy * h as f64);
    let theta = (spec.rotation_deg as f64).to_radians();
    let (sin, cos) = if spec.rotation_deg == 0 {
        (0.0, 1.0)
    } else {
        theta.sin_cos()
    };
    const EDGE: f64 = 1e-9;

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            if sx < -EDGE || sy < -EDGE || sx > (w - 1) as f64 + EDGE || sy > (h - 1) as f64 + EDGE {
                out.push(fill);
            } else {
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                out.push(to_u8(sample_bilinear(&src, w, h, sx, sy)));
            }
        }
    }
    GrayImage::new(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integer_shift(img: &GrayImage, dx: isize, dy: isize, fill: u8) -> GrayImage {
        let (w, h) = img.dims();
        GrayImage::from_fn(w, h, |x, y| {
            let sx = x as isize - dx;
            let sy = y as isize - dy;
            if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                fill
            } else {
                img.get(sx as usize, sy as usize)
            }
        })
    }

    fn smooth_blob(size: usize) -> GrayImage {
        let c = (size - 1) as f64 / 2.0;
        let s = size as f64 / 5.0;
        GrayImage::from_fn(size, size, |x, y| {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c * 0.9).powi(2);
            (40.0 + 180.0 * (-r2 / (2.0 * s * s)).exp()).round() as u8
        })
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let img = smooth_blob(32);
        assert_eq!(augment(&img, &AugmentSpec::IDENTITY, 0).unwrap(), img);
    }

    #[test]
    fn one_pixel_translation_matches_integer_shift() {
        let mut img = GrayImage::filled(4, 4, 0);
        img.set(1, 2, 255);
        let spec = AugmentSpec {
            rotation_deg: 0,
            translate_frac: (0.25, 0.0),
            seed: 0,
        };
        let out = augment(&img, &spec, 0).unwrap();
        assert_eq!(out, integer_shift(&img, 1, 0, 0));
        assert_eq!(out.get(2, 2), 255);
    }

    #[test]
    fn rotation_round_trip_is_close_on_smooth_images() {
        let img = smooth_blob(64);
        let fwd = AugmentSpec {
            rotation_deg: 5,
            translate_frac: (0.0, 0.0),
            seed: 0,
        };
        let back = AugmentSpec {
            rotation_deg: -5,
            ..fwd
        };
        let out = augment(&augment(&img, &fwd, 0).unwrap(), &back, 0).unwrap();
        // Compare inside the inscribed disk, which never leaves the frame.
        let c = 31.5;
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..64 {
            for x in 0..64 {
                if ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() < 29.0 {
                    sum += (img.get(x, y) as f64 - out.get(x, y) as f64).abs();
                    n += 1;
                }
            }
        }
        assert!(sum / (n as f64) < 2.0, "mean abs diff {}", sum / n as f64);
    }

    #[test]
    fn rejects_unlisted_rotation() {
        let img = GrayImage::filled(8, 8, 3);
        let spec = AugmentSpec {
            rotation_deg: 7,
            ..AugmentSpec::IDENTITY
        };
        assert!(augment(&img, &spec, 0).is_err());
    }

    #[test]
    fn sampled_specs_stay_in_range() {
        for seed in 0..500 {
            let s = AugmentSpec::sample(seed);
            assert!(s.in_sampling_range(), "{s:?}");
            assert_eq!(s, AugmentSpec::sample(seed));
        }
    }

    #[test]
    fn resize_same_dims_is_identity() {
        let img = smooth_blob(9);
        assert_eq!(resize_bilinear(&img, 9, 9).unwrap(), img);
    }

    #[test]
    fn resize_to_single_row_takes_column_means() {
        let img = GrayImage::new(2, 2, vec![0, 0, 255, 255]).unwrap();
        let out = resize_bilinear(&img, 2, 1).unwrap();
        // Direct formula: row coordinate 0.5, so each column is 0.5*0 + 0.5*255.
        let expected = (0.5f64 * 0.0 + 0.5 * 255.0).round() as u8;
        assert_eq!(out.pixels(), &[expected, expected]);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = GrayImage::filled(5, 3, 131);
        let up = resize_bilinear(&img, 17, 11).unwrap();
        let down = resize_bilinear(&up, 5, 3).unwrap();
        assert_eq!(down, img);
    }

    #[test]
    fn resize_rejects_empty_target() {
        assert!(resize_bilinear(&GrayImage::filled(2, 2, 0), 0, 3).is_err());
    }

    #[test]
    fn bilinear_upsample_is_monotone_across_columns() {
        let out = bilinear_resize(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 2);
        let row = &out[..4];
        for (got, want) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(&out[..4], &out[4..]);
    }
}
