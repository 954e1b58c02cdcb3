//! Synthetic lung phantoms: two dark elliptical lung fields on a bright
//! thorax, with a class-specific texture painted strictly inside the lungs.
//!
//! Textures:
//! - COVID19: several small bright blobs near the outer lung periphery.
//! - MERS: a diffuse haze raising the whole field plus coarse speckle.
//! - SARS: one large focal consolidation in the lower-central lung.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageproc::{write_pgm, GrayImage};
use crate::pipeline::{DatasetManifest, ManifestRecord};
use crate::ClassLabel;

/// Bounds for the sampled lung ellipses, as fractions of the image side.
#[derive(Clone, Debug, PartialEq)]
pub struct LungGeometry {
    /// Horizontal semi-axis.
    pub semi_x: (f64, f64),
    /// Vertical semi-axis.
    pub semi_y: (f64, f64),
    /// Horizontal distance of each lung centre from the midline.
    pub offset_x: (f64, f64),
    /// Vertical centre.
    pub center_y: (f64, f64),
}

impl Default for LungGeometry {
    fn default() -> Self {
        Self {
            semi_x: (0.15, 0.19),
            semi_y: (0.28, 0.34),
            offset_x: (0.20, 0.22),
            center_y: (0.45, 0.52),
        }
    }
}

impl LungGeometry {
    fn validate(&self) -> Result<()> {
        let ordered = [self.semi_x, self.semi_y, self.offset_x, self.center_y]
            .iter()
            .all(|&(lo, hi)| lo > 0.0 && lo <= hi);
        let inside = 0.5 - self.offset_x.1 - self.semi_x.1 >= 0.0
            && 0.5 + self.offset_x.1 + self.semi_x.1 <= 1.0
            && self.center_y.0 - self.semi_y.1 >= 0.0
            && self.center_y.1 + self.semi_y.1 <= 1.0;
        let apart = self.offset_x.0 >= self.semi_x.1;
        if !(ordered && inside && apart) {
            return Err(Error::invalid(format!("lung geometry {self:?} leaves the frame or overlaps")));
        }
        Ok(())
    }

    /// Smallest and largest total lung area (both ellipses) in pixels for a
    /// `size x size` image.
    pub fn area_bounds(&self, size: usize) -> (f64, f64) {
        let s2 = (size * size) as f64;
        let pi2 = 2.0 * std::f64::consts::PI;
        (pi2 * self.semi_x.0 * self.semi_y.0 * s2, pi2 * self.semi_x.1 * self.semi_y.1 * s2)
    }
}

/// Class texture amplitudes in intensity levels; sizes are fractions of the
/// image side.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureParams {
    pub blob_count: (usize, usize),
    pub blob_sigma: f64,
    pub blob_amplitude: (f64, f64),
    pub haze_level: (f64, f64),
    pub haze_speckle: f64,
    pub focal_sigma: f64,
    pub focal_amplitude: (f64, f64),
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            blob_count: (3, 5),
            blob_sigma: 0.045,
            blob_amplitude: (45.0, 60.0),
            haze_level: (22.0, 30.0),
            haze_speckle: 8.0,
            focal_sigma: 0.09,
            focal_amplitude: (100.0, 120.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: usize,
    pub label: ClassLabel,
    pub geometry: LungGeometry,
    pub texture: TextureParams,
}

impl PhantomSpec {
    pub fn new(seed: u64, size: usize, label: ClassLabel) -> Self {
        Self {
            seed,
            size,
            label,
            geometry: LungGeometry::default(),
            texture: TextureParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::invalid(format!("phantom size {} < 32", self.size)));
        }
        self.geometry.validate()
    }
}

/// One sampled lung ellipse in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

impl Ellipse {
    /// Squared normalized radius of the pixel centre `(x, y)`.
    fn r2(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.a;
        let dy = (y as f64 + 0.5 - self.cy) / self.b;
        dx * dx + dy * dy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: GrayImage,
    /// 255 inside either lung ellipse, 0 elsewhere.
    pub mask: GrayImage,
    pub label: ClassLabel,
    pub lungs: [Ellipse; 2],
}

const GEOMETRY_STREAM: u64 = 0;
const TEXTURE_STREAM: u64 = 1;

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn gaussian(x: f64, y: f64, cx: f64, cy: f64, sigma: f64) -> f64 {
    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Class texture in intensity levels, unmasked.
fn texture(spec: &PhantomSpec, lungs: &[Ellipse; 2]) -> Vec<f64> {
    let s = spec.size;
    let sf = s as f64;
    let t = &spec.texture;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(TEXTURE_STREAM);
    let mut out = vec![0.0; s * s];
    let mut paint = |cx: f64, cy: f64, sigma: f64, amp: f64| {
        for y in 0..s {
            for x in 0..s {
                out[y * s + x] += amp * gaussian(x as f64 + 0.5, y as f64 + 0.5, cx, cy, sigma);
            }
        }
    };
    match spec.label {
        ClassLabel::Covid19 => {
            let n = rng.random_range(t.blob_count.0..=t.blob_count.1);
            for _ in 0..n {
                let (side, lung) = if rng.random_bool(0.5) { (-1.0, &lungs[0]) } else { (1.0, &lungs[1]) };
                // Outer half of the lung, away from the midline.
                let theta: f64 = rng.random_range(-1.2..1.2);
                let r = rng.random_range(0.55..0.85);
                let cx = lung.cx + side * r * lung.a * theta.cos();
                let cy = lung.cy + r * lung.b * theta.sin();
                paint(cx, cy, t.blob_sigma * sf, range(&mut rng, t.blob_amplitude));
            }
        }
        ClassLabel::Mers => {
            let level = range(&mut rng, t.haze_level);
            let speckle = Normal::new(0.0, t.haze_speckle).expect("finite sigma");
            // Speckle on a 4-pixel grid so it survives resizing.
            let cell = 4;
            let cells = s.div_ceil(cell);
            let grid: Vec<f64> = (0..cells * cells).map(|_| speckle.sample(&mut rng)).collect();
            for y in 0..s {
                for x in 0..s {
                    out[y * s + x] = level + grid[(y / cell) * cells + x / cell];
                }
            }
        }
        ClassLabel::Sars => {
            let lung = lungs[rng.random_range(0..2)];
            let cx = lung.cx + rng.random_range(-0.2..0.2) * lung.a;
            let cy = lung.cy + rng.random_range(0.1..0.4) * lung.b;
            paint(cx, cy, t.focal_sigma * sf, range(&mut rng, t.focal_amplitude));
        }
    }
    out
}

fn render(spec: &PhantomSpec, with_texture: bool) -> Result<Phantom> {
    spec.validate()?;
    let s = spec.size;
    let sf = s as f64;
    let g = &spec.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(GEOMETRY_STREAM);
    let cy = range(&mut rng, g.center_y) * sf;
    let lungs = [-1.0, 1.0].map(|side| Ellipse {
        cx: (0.5 + side * range(&mut rng, g.offset_x)) * sf,
        cy: cy + rng.random_range(-0.01..0.01) * sf,
        a: range(&mut rng, g.semi_x) * sf,
        b: range(&mut rng, g.semi_y) * sf,
    });
    let body = Ellipse {
        cx: sf / 2.0,
        cy: sf * 0.52,
        a: sf * 0.49,
        b: sf * 0.52,
    };
    let thorax = rng.random_range(170.0..200.0);
    let lung_level = rng.random_range(60.0..70.0);
    let air = rng.random_range(15.0..30.0);
    let tilt = rng.random_range(-10.0..10.0);
    let noise = Normal::new(0.0, 3.0).expect("finite sigma");

    let tex = with_texture.then(|| texture(spec, &lungs));
    let mut pixels = Vec::with_capacity(s * s);
    let mut mask = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let inside = lungs.iter().any(|l| l.r2(x, y) <= 1.0);
            let mut v = if inside {
                lung_level
            } else if body.r2(x, y) <= 1.0 {
                thorax + tilt * (y as f64 / sf - 0.5)
            } else {
                air
            };
            v += noise.sample(&mut rng);
            if let (true, Some(t)) = (inside, &tex) {
                v += t[y * s + x];
            }
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
            mask.push(if inside { 255 } else { 0 });
        }
    }
    Ok(Phantom {
        image: GrayImage::new(s, s, pixels)?,
        mask: GrayImage::new(s, s, mask)?,
        label: spec.label,
        lungs,
    })
}

/// Deterministic phantom for `spec`.
///
/// # Panics
/// On an invalid spec; use [`try_generate_phantom`] to get the error.
pub fn generate_phantom(spec: &PhantomSpec) -> Phantom {
    try_generate_phantom(spec).expect("valid phantom spec")
}

pub fn try_generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    render(spec, true)
}

/// The phantom without its class texture (same geometry and noise).
pub fn generate_untextured(spec: &PhantomSpec) -> Result<Phantom> {
    render(spec, false)
}

/// Per-image seed for image `index` of class `label` in a dataset seeded
/// with `seed`.
pub fn image_seed(seed: u64, label: ClassLabel, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label.index() as u64) << 32) | index as u64);
    rng.random()
}

/// Writes `images/`, `masks/` and `manifest.csv` under `out_dir`; `counts`
/// is the number of images per class in [`ClassLabel::ALL`] order.
pub fn generate_dataset(counts: [usize; 3], size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::new();
    for (label, &n) in ClassLabel::ALL.iter().zip(&counts) {
        for i in 0..n {
            let spec = PhantomSpec::new(image_seed(seed, *label, i), size, *label);
            let p = try_generate_phantom(&spec)?;
            let stem = format!("{}_{i:04}.pgm", label.name().to_ascii_lowercase());
            let image_path = Path::new("images").join(&stem);
            let mask_path = Path::new("masks").join(&stem);
            write_pgm(&p.image, out.join(&image_path))?;
            write_pgm(&p.mask, out.join(&mask_path))?;
            records.push(ManifestRecord {
                image_path,
                label: *label,
                mask_path: Some(mask_path),
            });
        }
    }
    let manifest = DatasetManifest::new(out.to_path_buf(), records);
    manifest.write(out.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::new(42, 64, ClassLabel::Mers);
        assert_eq!(generate_phantom(&spec), generate_phantom(&spec));
        let other = PhantomSpec::new(43, 64, ClassLabel::Mers);
        assert_ne!(generate_phantom(&spec).image, generate_phantom(&other).image);
    }

    #[test]
    fn rejects_small_or_escaping_specs() {
        assert!(try_generate_phantom(&PhantomSpec::new(1, 16, ClassLabel::Sars)).is_err());
        let mut spec = PhantomSpec::new(1, 64, ClassLabel::Sars);
        spec.geometry.semi_x = (0.3, 0.35);
        assert!(try_generate_phantom(&spec).is_err());
    }

    #[test]
    fn mask_area_within_ellipse_bounds() {
        for size in [32, 64, 128] {
            let geo = LungGeometry::default();
            let (lo, hi) = geo.area_bounds(size);
            // Pixelization error is bounded by the two perimeters.
            let slack = 2.0 * std::f64::consts::PI * (geo.semi_x.1 + geo.semi_y.1) * size as f64;
            for seed in 0..30 {
                let p = generate_phantom(&PhantomSpec::new(seed, size, ClassLabel::Covid19));
                let count = p.mask.pixels().iter().filter(|&&v| v == 255).count() as f64;
                assert!(count >= lo - slack && count <= hi + slack, "{size} {seed}: {count}");
                assert!(p.mask.is_binary());
            }
        }
    }

    #[test]
    fn texture_stays_inside_mask() {
        for label in ClassLabel::ALL {
            for seed in 0..10 {
                let spec = PhantomSpec::new(seed, 64, label);
                let with = generate_phantom(&spec);
                let without = generate_untextured(&spec).unwrap();
                assert_eq!(with.mask, without.mask);
                for ((a, b), m) in with.image.pixels().iter().zip(without.image.pixels()).zip(with.mask.pixels()) {
                    if *m == 0 {
                        assert_eq!(a, b);
                    }
                }
                assert_ne!(with.image, without.image);
            }
        }
    }

    fn mean_inside(p: &Phantom) -> f64 {
        let (sum, n) = p
            .image
            .pixels()
            .iter()
            .zip(p.mask.pixels())
            .filter(|(_, &m)| m != 0)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
        sum / n as f64
    }

    #[test]
    fn class_means_are_separated() {
        let means: Vec<f64> = ClassLabel::ALL
            .iter()
            .map(|&label| {
                (0..100)
                    .map(|i| mean_inside(&generate_phantom(&PhantomSpec::new(image_seed(9, label, i), 64, label))))
                    .sum::<f64>()
                    / 100.0
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((means[i] - means[j]).abs() >= 5.0, "{means:?}");
            }
        }
    }

    #[test]
    fn dataset_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset([4, 3, 2], 32, 5, dir.path()).unwrap();
        assert_eq!(m.records.len(), 9);
        let back = DatasetManifest::read(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back.records, m.records);
        for r in &back.records {
            assert!(back.resolve(&r.image_path).exists());
            assert!(back.resolve(r.mask_path.as_ref().unwrap()).exists());
        }
        let again = tempfile::tempdir().unwrap();
        generate_dataset([4, 3, 2], 32, 5, again.path()).unwrap();
        for r in &m.records {
            assert_eq!(
                std::fs::read(dir.path().join(&r.image_path)).unwrap(),
                std::fs::read(again.path().join(&r.image_path)).unwrap()
            );
        }
    }
}
