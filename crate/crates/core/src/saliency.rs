//! Class-activation saliency: Grad-CAM (gradient-weighted feature maps) and
//! Score-CAM (feature maps weighted by the score change under masking).

use std::path::{Path, PathBuf};

use crate::engine::{Graph, Mode, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::imageproc::{bilinear_resize, write_pgm, GrayImage};
use crate::nets::{Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencyMethod {
    GradCam,
    ScoreCam,
}

impl SaliencyMethod {
    pub fn name(self) -> &'static str {
        match self {
            SaliencyMethod::GradCam => "gradcam",
            SaliencyMethod::ScoreCam => "scorecam",
        }
    }
}

impl std::str::FromStr for SaliencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "gradcam" => Ok(SaliencyMethod::GradCam),
            "scorecam" => Ok(SaliencyMethod::ScoreCam),
            _ => Err(Error::Unknown {
                kind: "saliency method",
                name: s.to_string(),
            }),
        }
    }
}

/// A network exposing one named activation stack and pre-softmax scores.
pub trait TappedModel<T: Real> {
    fn default_tap(&self) -> String;

    /// Runs the forward pass on `x` (`(N, C, H, W)`) and returns the tap
    /// activation `(N, K, h, w)` and the class scores `(N, classes)`.
    fn forward_tap(&self, g: &mut Graph<T>, x: Var, tap: &str) -> Result<(Var, Var)>;
}

impl TappedModel<f32> for Model {
    fn default_tap(&self) -> String {
        Model::default_tap(self).to_string()
    }

    fn forward_tap(&self, g: &mut Graph<f32>, x: Var, tap: &str) -> Result<(Var, Var)> {
        if !matches!(self.config(), ModelConfig::Classifier(_)) {
            return Err(Error::invalid("saliency needs a classifier with per-image scores"));
        }
        let f = self.forward(g, x, Mode::Eval)?;
        Ok((f.tap(tap)?, f.logits))
    }
}

/// Normalized relevance map at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Max-normalized to `[0, 1]`; all zeros when nothing is relevant.
    pub values: Vec<f64>,
    /// Upsampled map before normalization.
    pub raw: Vec<f64>,
    pub method: SaliencyMethod,
    pub tap: String,
}

impl SaliencyMap {
    fn from_cam(cam: &[f64], h: usize, w: usize, height: usize, width: usize, method: SaliencyMethod, tap: String) -> Self {
        let raw = bilinear_resize(cam, w, h, width, height);
        let max = raw.iter().copied().fold(0.0, f64::max);
        let values = if max > 0.0 {
            raw.iter().map(|v| v / max).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self {
            width,
            height,
            values,
            raw,
            method,
            tap,
        }
    }

    /// Row-major index of the largest value (first on ties).
    pub fn peak(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn to_image(&self) -> GrayImage {
        let px = self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        GrayImage::new(self.width, self.height, px).expect("map dims")
    }

    /// Fraction of total saliency mass on non-zero mask pixels; `None` for
    /// an all-zero map.
    pub fn mass_inside(&self, mask: &GrayImage) -> Result<Option<f64>> {
        if mask.dims() != (self.width, self.height) {
            return Err(Error::shape("mask and saliency map differ in size"));
        }
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return Ok(None);
        }
        let inside: f64 = self
            .values
            .iter()
            .zip(mask.pixels())
            .filter(|(_, &m)| m != 0)
            .map(|(v, _)| v)
            .sum();
        Ok(Some(inside / total))
    }

    /// Writes `<stem>.cam.pgm` (8-bit normalized map) and `<stem>.cam.csv`
    /// (upsampled values before normalization), returning both paths.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        let pgm = dir.join(format!("{stem}.cam.pgm"));
        let csv_path = dir.join(format!("{stem}.cam.csv"));
        write_pgm(&self.to_image(), &pgm)?;
        let mut text = String::with_capacity(self.raw.len() * 12);
        for row in self.raw.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))?;
        Ok((pgm, csv_path))
    }
}

/// Bilinear upsampling to `height x width` followed by min-max
/// normalization; a constant map becomes all zeros.
pub fn upsample_normalize(map: &[f64], h: usize, w: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("zero-sized upsampling target"));
    }
    if map.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape(format!("{} values for a {h}x{w} map", map.len())));
    }
    if height < h || width < w {
        return Err(Error::invalid(format!("target {height}x{width} smaller than map {h}x{w}")));
    }
    let up = bilinear_resize(map, w, h, width, height);
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(vec![0.0; up.len()]);
    }
    Ok(up.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

fn single_input<T: Real>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("saliency takes one image, got a batch of {n}")));
    }
    Ok((c, h, w))
}

fn score_of<T: Real>(g: &Graph<T>, scores: Var, row: usize, class: usize) -> Result<T> {
    let (n, classes) = g.value(scores).dims2()?;
    if class >= classes || row >= n {
        return Err(Error::invalid(format!("class {class} of {classes}")));
    }
    Ok(g.value(scores).data()[row * classes + class])
}

/// `relu(sum_k alpha_k A^k)` over the `h x w` tap grid.
fn combine<T: Real>(alphas: &[f64], act: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (_, k, h, w) = act.dims4()?;
    let hw = h * w;
    let a = act.data();
    let mut cam = vec![0.0; hw];
    for (ki, &alpha) in alphas.iter().enumerate().take(k) {
        for (c, &v) in cam.iter_mut().zip(&a[ki * hw..(ki + 1) * hw]) {
            *c += alpha * v.as_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok((cam, h, w))
}

/// Grad-CAM channel weights: the spatial mean of `d y^c / d A^k` for every
/// channel `k` of the tap, plus the tap activation itself.
pub fn grad_cam_weights<T: Real, M: TappedModel<T> + ?Sized>(
    model: &M,
    input: &Tensor<T>,
    class: usize,
    tap: &str,
) -> Result<(Vec<f64>, Tensor<T>)> {
    single_input(input)?;
    let mut g = Graph::new();
    // Tracking the input keeps every tap on the gradient path.
    let x = g.param(input.clone());
    let (a, scores) = model.forward_tap(&mut g, x, tap)?;
    score_of(&g, scores, 0, class)?;
    let y = g.index(scores, class)?;
    g.backward(y)?;
    let act = g.value(a).clone();
    let (_, k, h, w) = act.dims4()?;
    let grad = g
        .grad(a)
        .ok_or_else(|| Error::invalid(format!("tap `{tap}` does not influence the class score")))?;
    let hw = (h * w) as f64;
    let alphas = grad
        .data()
        .chunks(h * w)
        .take(k)
        .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / hw)
        .collect();
    Ok((alphas, act))
}

pub fn grad_cam<T: Real, M: TappedModel<T> + ?Sized>(
    model: &M,
    input: &Tensor<T>,
    class: usize,
    tap: Option<&str>,
) -> Result<SaliencyMap> {
    let (_, height, width) = single_input(input)?;
    let tap = tap.map_or_else(|| model.default_tap(), str::to_string);
    let (alphas, act) = grad_cam_weights(model, input, class, &tap)?;
    let (cam, h, w) = combine(&alphas, &act)?;
    Ok(SaliencyMap::from_cam(&cam, h, w, height, width, SaliencyMethod::GradCam, tap))
}

/// Masked inputs per forward pass in Score-CAM.
const SCORE_CAM_BATCH: usize = 16;

/// Score-CAM channel weights `f(X * D^k) - f(X)`, computed with forward
/// passes only.
pub fn score_cam_weights<T: Real, M: TappedModel<T> + ?Sized>(
    model: &M,
    input: &Tensor<T>,
    class: usize,
    tap: &str,
) -> Result<(Vec<f64>, Tensor<T>)> {
    let (c, height, width) = single_input(input)?;
    let mut g = Graph::no_grad();
    let x = g.constant(input.clone());
    let (a, scores) = model.forward_tap(&mut g, x, tap)?;
    let base = score_of(&g, scores, 0, class)?.as_f64();
    let act = g.value(a).clone();
    let (_, k, h, w) = act.dims4()?;
    let hw = h * w;
    let plane = height * width;
    let mut alphas = Vec::with_capacity(k);
    let mut start = 0;
    while start < k {
        let end = (start + SCORE_CAM_BATCH).min(k);
        let mut batch = Vec::with_capacity((end - start) * c * plane);
        for ki in start..end {
            let map: Vec<f64> = act.data()[ki * hw..(ki + 1) * hw].iter().map(|v| v.as_f64()).collect();
            let mask = upsample_normalize(&map, h, w, height, width)?;
            for ch in 0..c {
                let src = &input.data()[ch * plane..(ch + 1) * plane];
                batch.extend(src.iter().zip(&mask).map(|(&v, &m)| v * T::lit(m)));
            }
        }
        let masked = Tensor::new(vec![end - start, c, height, width], batch)?;
        let mut g = Graph::no_grad();
        let xm = g.constant(masked);
        let (_, s) = model.forward_tap(&mut g, xm, tap)?;
        for row in 0..end - start {
            alphas.push(score_of(&g, s, row, class)?.as_f64() - base);
        }
        start = end;
    }
    Ok((alphas, act))
}

pub fn score_cam<T: Real, M: TappedModel<T> + ?Sized>(
    model: &M,
    input: &Tensor<T>,
    class: usize,
    tap: Option<&str>,
) -> Result<SaliencyMap> {
    let (_, height, width) = single_input(input)?;
    let tap = tap.map_or_else(|| model.default_tap(), str::to_string);
    let (alphas, act) = score_cam_weights(model, input, class, &tap)?;
    let (cam, h, w) = combine(&alphas, &act)?;
    Ok(SaliencyMap::from_cam(&cam, h, w, height, width, SaliencyMethod::ScoreCam, tap))
}

pub fn saliency<T: Real, M: TappedModel<T> + ?Sized>(
    model: &M,
    input: &Tensor<T>,
    class: usize,
    tap: Option<&str>,
    method: SaliencyMethod,
) -> Result<SaliencyMap> {
    match method {
        SaliencyMethod::GradCam => grad_cam(model, input, class, tap),
        SaliencyMethod::ScoreCam => score_cam(model, input, class, tap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_classifier, ClassifierConfig};

    /// `scores = [sum(A), -sum(A)]` with `A = x` on a single channel.
    struct SumModel;

    impl TappedModel<f64> for SumModel {
        fn default_tap(&self) -> String {
            "a".into()
        }

        fn forward_tap(&self, g: &mut Graph<f64>, x: Var, _tap: &str) -> Result<(Var, Var)> {
            let s = g.sum(x)?;
            let neg = g.scale(s, -1.0)?;
            let s1 = g.reshape(s, vec![1, 1])?;
            let n1 = g.reshape(neg, vec![1, 1])?;
            let scores = g.concat(&[s1, n1])?;
            Ok((x, scores))
        }
    }

    /// Fixed left/right half maps; score = left sum - right sum of the input.
    struct HalvesModel {
        n: usize,
    }

    impl HalvesModel {
        fn halves(&self) -> Tensor<f64> {
            let n = self.n;
            let mut d = vec![0.0; 2 * n * n];
            for y in 0..n {
                for x in 0..n {
                    d[if x < n / 2 { 0 } else { n * n } + y * n + x] = 1.0;
                }
            }
            Tensor::new(vec![1, 2, n, n], d).unwrap()
        }
    }

    impl TappedModel<f64> for HalvesModel {
        fn default_tap(&self) -> String {
            "halves".into()
        }

        fn forward_tap(&self, g: &mut Graph<f64>, x: Var, _tap: &str) -> Result<(Var, Var)> {
            let n = self.n;
            let batch = g.shape(x)[0];
            let w: Vec<f64> = (0..n * n).map(|i| if i % n < n / 2 { 1.0 } else { -1.0 }).collect();
            let w = g.constant(Tensor::new(vec![1, n * n], w)?);
            let flat = g.reshape(x, vec![batch, n * n])?;
            let scores = g.linear(flat, w, None)?;
            let a = g.constant(self.halves());
            Ok((a, scores))
        }
    }

    #[test]
    fn grad_cam_unit_gradient() {
        let d = [0.5, -1.0, 2.0, 0.0];
        let x = Tensor::from_f64(vec![1, 1, 2, 2], &d).unwrap();
        let (alphas, _) = grad_cam_weights(&SumModel, &x, 0, "a").unwrap();
        assert_eq!(alphas, vec![1.0]);
        let map = grad_cam(&SumModel, &x, 0, None).unwrap();
        assert_eq!(map.values, vec![0.25, 0.0, 1.0, 0.0]);
        let neg = Tensor::from_f64(vec![1, 1, 2, 2], &[0.5, 1.0, 2.0, 0.0]).unwrap();
        let map = grad_cam(&SumModel, &neg, 1, None).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_cam_halves_example() {
        let m = HalvesModel { n: 4 };
        let x = Tensor::full(vec![1, 1, 4, 4], 1.0);
        let (alphas, _) = score_cam_weights(&m, &x, 0, "halves").unwrap();
        assert_eq!(alphas, vec![8.0, -8.0]);
        let map = score_cam(&m, &x, 0, None).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                assert_eq!(map.values[y * 4 + xx], if xx < 2 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn score_cam_constant_map_blanks_the_input() {
        struct Ones;
        impl TappedModel<f64> for Ones {
            fn default_tap(&self) -> String {
                "ones".into()
            }
            fn forward_tap(&self, g: &mut Graph<f64>, x: Var, _: &str) -> Result<(Var, Var)> {
                let n = g.shape(x)[0];
                let s = g.global_avgpool(x)?;
                let s = g.reshape(s, vec![n, 1])?;
                let a = g.constant(Tensor::full(vec![1, 1, 2, 2], 3.0));
                Ok((a, s))
            }
        }
        let x = Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (alphas, _) = score_cam_weights(&Ones, &x, 0, "ones").unwrap();
        // A constant map normalizes to zeros, so the masked input is blank.
        assert_eq!(alphas, vec![-2.5]);
        assert!(score_cam(&Ones, &x, 0, None).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_normalize_examples() {
        let m = [0.0, 0.5, 1.0, 0.25];
        assert_eq!(upsample_normalize(&m, 2, 2, 2, 2).unwrap(), m.to_vec());
        assert_eq!(upsample_normalize(&[3.0; 4], 2, 2, 4, 4).unwrap(), vec![0.0; 16]);
        let up = upsample_normalize(&[0.0, 1.0, 0.0, 1.0], 2, 2, 2, 4).unwrap();
        for row in up.chunks(4) {
            assert!(row.windows(2).all(|p| p[0] < p[1]));
            assert_eq!((row[0], row[3]), (0.0, 1.0));
        }
        assert!(upsample_normalize(&m, 2, 2, 0, 4).is_err());
        assert!(upsample_normalize(&m, 2, 2, 1, 4).is_err());
    }

    fn fire_model() -> Model {
        build_classifier(&ClassifierConfig::default(), 21).unwrap()
    }

    fn image(seed: u64) -> Tensor<f32> {
        let d: Vec<f32> = (0..32 * 32)
            .map(|i| (((i as u64 * 2654435761 + seed) % 97) as f32) / 97.0)
            .collect();
        Tensor::new(vec![1, 1, 32, 32], d).unwrap()
    }

    #[test]
    fn maps_match_input_size_and_range() {
        let m = fire_model();
        for method in [SaliencyMethod::GradCam, SaliencyMethod::ScoreCam] {
            let map = saliency(&m, &image(1), 2, None, method).unwrap();
            assert_eq!((map.width, map.height), (32, 32));
            assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(map.tap, "features");
        }
        assert!(grad_cam(&m, &image(1), 0, Some("nope")).is_err());
    }

    #[test]
    fn peak_is_invariant_to_head_rescaling() {
        let m = fire_model();
        let mut scaled = m.clone();
        let names = scaled.store().param_names().to_vec();
        for (n, p) in names.iter().zip(scaled.store_mut().params_mut()) {
            if n.starts_with("head.") {
                p.data_mut().iter_mut().for_each(|v| *v *= 4.0);
            }
        }
        for method in [SaliencyMethod::GradCam, SaliencyMethod::ScoreCam] {
            let a = saliency(&m, &image(3), 1, None, method).unwrap();
            let b = saliency(&scaled, &image(3), 1, None, method).unwrap();
            if a.values.iter().any(|&v| v > 0.0) {
                assert_eq!(a.peak(), b.peak(), "{method:?}");
            }
        }
    }

    #[test]
    fn writes_pgm_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let map = grad_cam(&fire_model(), &image(2), 0, None).unwrap();
        let (pgm, csv) = map.write(dir.path(), "x").unwrap();
        assert_eq!(crate::imageproc::read_pgm(pgm).unwrap().dims(), (32, 32));
        assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 32);
    }

    #[test]
    fn mass_inside_mask() {
        let map = SaliencyMap::from_cam(&[1.0, 3.0], 1, 2, 1, 2, SaliencyMethod::GradCam, "t".into());
        let mask = GrayImage::new(2, 1, vec![0, 255]).unwrap();
        assert_eq!(map.mass_inside(&mask).unwrap(), Some(0.75));
    }
}
