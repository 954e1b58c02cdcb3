use super::GrayImage;
use crate::error::{Error, Result};

/// Where a lookup table came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappingSource {
    GlobalHE,
    ClaheTile,
}

/// 256-entry monotone intensity lookup table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramMapping {
    lut: [u8; 256],
    source: MappingSource,
}

impl HistogramMapping {
    /// Global equalization table `round(255 * CDF(i))`.
    pub fn global(img: &GrayImage) -> Self {
        let hist = img.histogram();
        let counts: Vec<f64> = hist.iter().map(|&c| c as f64).collect();
        Self {
            lut: uniform_lut(&counts, img.pixels().len() as f64),
            source: MappingSource::GlobalHE,
        }
    }

    pub fn identity(source: MappingSource) -> Self {
        let mut lut = [0u8; 256];
        for (i, v) in lut.iter_mut().enumerate() {
            *v = i as u8;
        }
        Self { lut, source }
    }

    pub fn lut(&self) -> &[u8; 256] {
        &self.lut
    }

    pub fn source(&self) -> MappingSource {
        self.source
    }

    #[inline]
    pub fn apply(&self, v: u8) -> u8 {
        self.lut[v as usize]
    }

    pub fn is_monotone(&self) -> bool {
        self.lut.windows(2).all(|w| w[0] <= w[1])
    }
}

// Shared by global HE and the CLAHE uniform target so the two agree bit for
// bit when CLAHE degenerates to a single unclipped tile.
fn uniform_lut(hist: &[f64], total: f64) -> [u8; 256] {
    let mut lut = [0u8; 256];
    let mut cum = 0.0;
    for (i, &h) in hist.iter().enumerate() {
        cum += h;
        lut[i] = (255.0 * cum / total).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

fn rayleigh_lut(hist: &[f64], total: f64, alpha: f64) -> [u8; 256] {
    let hconst = 2.0 * alpha * alpha;
    let vmax = 1.0 - (-1.0 / hconst).exp();
    let mut lut = [0u8; 256];
    let mut cum = 0.0;
    for (i, &h) in hist.iter().enumerate() {
        cum += h;
        let val = (vmax * cum / total).min(1.0 - f64::EPSILON);
        let mapped = (-hconst * (1.0 - val).ln()).sqrt();
        lut[i] = (255.0 * mapped).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Global histogram equalization: each pixel becomes `round(255 * CDF(x))`,
/// rounding half away from zero.
pub fn equalize_hist(img: &GrayImage) -> GrayImage {
    let mapping = HistogramMapping::global(img);
    img.map(|p| mapping.apply(p))
}

/// Target histogram shape for the CLAHE transfer function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClaheTarget {
    Uniform,
    Rayleigh { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaheParams {
    /// Tile grid as (columns, rows).
    pub tiles: (usize, usize),
    /// Normalized clip limit in (0, 1]; 1 disables clipping.
    pub clip_limit: f64,
    pub target: ClaheTarget,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles: (8, 8),
            clip_limit: 0.01,
            target: ClaheTarget::Rayleigh { alpha: 0.4 },
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles.0 == 0 || self.tiles.1 == 0 {
            return Err(Error::invalid("CLAHE tile grid must be at least 1x1"));
        }
        if !(self.clip_limit > 0.0 && self.clip_limit <= 1.0) {
            return Err(Error::invalid(format!(
                "CLAHE clip limit {} outside (0, 1]",
                self.clip_limit
            )));
        }
        if let ClaheTarget::Rayleigh { alpha } = self.target {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::invalid(format!("Rayleigh alpha {alpha} must be positive")));
            }
        }
        Ok(())
    }
}

/// Reflect-101 index into `0..len`.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

fn tile_mapping(
    pixels: &[u8],
    stride: usize,
    x0: usize,
    y0: usize,
    tw: usize,
    th: usize,
    params: &ClaheParams,
) -> HistogramMapping {
    let mut counts = [0u64; 256];
    for y in y0..y0 + th {
        for &p in &pixels[y * stride + x0..y * stride + x0 + tw] {
            counts[p as usize] += 1;
        }
    }
    let n = (tw * th) as u64;
    if counts.iter().filter(|&&c| c > 0).count() == 1 {
        return HistogramMapping::identity(MappingSource::ClaheTile);
    }

    // Clip limit interpolates between a flat histogram and no clipping.
    let min_clip = n.div_ceil(256);
    let clip = min_clip as f64 + (params.clip_limit * (n - min_clip) as f64).round();
    let mut hist: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    if excess > 0.0 {
        let share = excess / 256.0;
        hist.iter_mut().for_each(|h| *h += share);
    }

    let total = n as f64;
    let lut = match params.target {
        ClaheTarget::Uniform => uniform_lut(&hist, total),
        ClaheTarget::Rayleigh { alpha } => rayleigh_lut(&hist, total, alpha),
    };
    HistogramMapping {
        lut,
        source: MappingSource::ClaheTile,
    }
}

/// Locates the two tile centres bracketing `pos` along one axis and the
/// blend weight of the second.
fn bracket(pos: usize, tile: usize, tiles: usize) -> (usize, usize, f64) {
    let g = (pos as f64 + 0.5) / tile as f64 - 0.5;
    if g <= 0.0 {
        (0, 0, 0.0)
    } else if g >= (tiles - 1) as f64 {
        (tiles - 1, tiles - 1, 0.0)
    } else {
        let i0 = g.floor() as usize;
        (i0, i0 + 1, g - i0 as f64)
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// Tiles that do not divide the image are handled by reflect-padding the
/// right and bottom edges. A tile whose histogram has a single occupied bin
/// maps to the identity, so constant images pass through unchanged.
pub fn clahe(img: &GrayImage, params: &ClaheParams) -> Result<GrayImage> {
    params.validate()?;
    let (w, h) = img.dims();
    let (tx, ty) = params.tiles;
    if tx > w || ty > h {
        return Err(Error::invalid(format!(
            "{tx}x{ty} tiles do not fit a {w}x{h} image"
        )));
    }
    let tw = w.div_ceil(tx);
    let th = h.div_ceil(ty);
    let (pw, ph) = (tw * tx, th * ty);

    let padded: Vec<u8> = if (pw, ph) == (w, h) {
        img.pixels().to_vec()
    } else {
        let mut out = Vec::with_capacity(pw * ph);
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                out.push(img.get(reflect(x, w), sy));
            }
        }
        out
    };

    let mut maps = Vec::with_capacity(tx * ty);
    for j in 0..ty {
        for i in 0..tx {
            maps.push(tile_mapping(&padded, pw, i * tw, j * th, tw, th, params));
        }
    }

    let cols: Vec<_> = (0..w).map(|x| bracket(x, tw, tx)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (r0, r1, wy) = bracket(y, th, ty);
        for (x, &(c0, c1, wx)) in cols.iter().enumerate() {
            let p = img.get(x, y);
            let v = |r: usize, c: usize| maps[r * tx + c].apply(p) as f64;
            let top = v(r0, c0) * (1.0 - wx) + v(r0, c1) * wx;
            let bottom = v(r1, c0) * (1.0 - wx) + v(r1, c1) * wx;
            let blended = top * (1.0 - wy) + bottom * wy;
            out.push(blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = GrayImage> {
        (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h)
                .prop_map(move |px| GrayImage::new(w, h, px).unwrap())
        })
    }

    #[test]
    fn he_constant_maps_to_white() {
        let out = equalize_hist(&GrayImage::filled(4, 4, 7));
        assert!(out.pixels().iter().all(|&p| p == 255));
    }

    #[test]
    fn he_two_level_image() {
        // CDF(0) = 0.5 -> 127.5 rounds away from zero.
        let img = GrayImage::new(2, 2, vec![0, 0, 255, 255]).unwrap();
        assert_eq!(equalize_hist(&img).pixels(), &[128, 128, 255, 255]);
    }

    #[test]
    fn clahe_constant_is_identity() {
        for &v in &[0u8, 1, 77, 254, 255] {
            let img = GrayImage::filled(20, 12, v);
            for params in [
                ClaheParams::default(),
                ClaheParams {
                    tiles: (3, 5),
                    clip_limit: 0.5,
                    target: ClaheTarget::Uniform,
                },
            ] {
                assert_eq!(clahe(&img, &params).unwrap(), img);
            }
        }
    }

    #[test]
    fn clahe_rejects_oversized_tiles_and_bad_clip() {
        let img = GrayImage::filled(4, 4, 1);
        let mut p = ClaheParams::default();
        assert!(clahe(&img, &p).is_err());
        p.tiles = (2, 2);
        p.clip_limit = 0.0;
        assert!(clahe(&img, &p).is_err());
        p.clip_limit = 1.5;
        assert!(clahe(&img, &p).is_err());
    }

    #[test]
    fn clahe_handles_non_dividing_tiles() {
        let img = GrayImage::from_fn(37, 29, |x, y| ((x * 7 + y * 3) % 256) as u8);
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        assert_eq!(out.dims(), (37, 29));
    }

    #[test]
    fn reflect_indexing() {
        let idx: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }

    #[test]
    fn rayleigh_lut_spans_range() {
        let img = GrayImage::from_fn(16, 16, |x, y| (x * 16 + y) as u8);
        let m = tile_mapping(
            img.pixels(),
            16,
            0,
            0,
            16,
            16,
            &ClaheParams {
                tiles: (1, 1),
                clip_limit: 1.0,
                target: ClaheTarget::Rayleigh { alpha: 0.4 },
            },
        );
        assert!(m.is_monotone());
        assert_eq!(m.lut()[255], 255);
        // Bell-shaped target: the median intensity maps below the uniform target.
        assert!(m.lut()[127] < 128);
    }

    proptest! {
        #[test]
        fn he_is_idempotent_up_to_one_level(img in arb_image()) {
            let once = equalize_hist(&img);
            let twice = equalize_hist(&once);
            for (a, b) in once.pixels().iter().zip(twice.pixels()) {
                prop_assert!((*a as i32 - *b as i32).abs() <= 1);
            }
            prop_assert!(HistogramMapping::global(&img).is_monotone());
        }

        #[test]
        fn clahe_unclipped_single_tile_matches_he(img in arb_image()) {
            let params = ClaheParams { tiles: (1, 1), clip_limit: 1.0, target: ClaheTarget::Uniform };
            let distinct = img.histogram().iter().filter(|&&c| c > 0).count();
            prop_assume!(distinct > 1);
            prop_assert_eq!(clahe(&img, &params).unwrap(), equalize_hist(&img));
        }

        #[test]
        fn clahe_tile_maps_are_monotone(img in arb_image(), clip in 0.001f64..1.0, rayleigh in any::<bool>()) {
            let params = ClaheParams {
                tiles: (1, 1),
                clip_limit: clip,
                target: if rayleigh { ClaheTarget::Rayleigh { alpha: 0.4 } } else { ClaheTarget::Uniform },
            };
            let (w, h) = img.dims();
            let m = tile_mapping(img.pixels(), w, 0, 0, w, h, &params);
            prop_assert!(m.is_monotone());
            // Single tile: the output is that tile's LUT applied pointwise, so it
            // preserves intensity order.
            let out = clahe(&img, &params).unwrap();
            for (a, b) in img.pixels().iter().zip(img.pixels().iter().skip(1)) {
                let (oa, ob) = (m.apply(*a), m.apply(*b));
                if a <= b { prop_assert!(oa <= ob); }
            }
            prop_assert_eq!(out.dims(), img.dims());
        }
    }
}
