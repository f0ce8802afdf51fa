//! Positive multi-crop views: two global crops (alternating between two
//! augmentation families) and eight local crops per training image.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::Rng;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Area fraction separating local crops (below) from global crops (above).
pub const GLOBAL_LOCAL_BOUNDARY: f64 = 0.4;

const MAX_CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewFamilyConfig {
    /// Fraction of the source area covered by the crop, `(lo, hi)`.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range sampled log-uniformly.
    pub aspect: (f64, f64),
    pub output_size: usize,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_prob: f64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for ViewFamilyConfig {
    fn default() -> Self {
        Self::global1()
    }
}

impl ViewFamilyConfig {
    fn base(crop_scale: (f64, f64), output_size: usize, blur_prob: f64, solarize_prob: f64) -> Self {
        Self {
            crop_scale,
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            output_size,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob,
            blur_sigma: (0.1, 2.0),
            solarize_prob,
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
        }
    }

    pub fn global1() -> Self {
        Self::base((GLOBAL_LOCAL_BOUNDARY, 1.0), 32, 1.0, 0.0)
    }

    pub fn global2() -> Self {
        Self::base((GLOBAL_LOCAL_BOUNDARY, 1.0), 32, 0.1, 0.2)
    }

    pub fn local() -> Self {
        Self::base((0.05, GLOBAL_LOCAL_BOUNDARY), 16, 0.5, 0.0)
    }

    /// No stochastic transform: full-image resize, no normalization.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
            output_size,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            solarize_prob: 0.0,
            normalize_mean: [0.0; 3],
            normalize_std: [1.0; 3],
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("{path}.crop_scale"), "need 0 <= lo <= hi <= 1"));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return Err(Error::config(format!("{path}.aspect"), "need 0 < lo <= hi"));
        }
        if self.output_size < 4 {
            return Err(Error::config(format!("{path}.output_size"), "must be at least 4"));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{path}.{name}"), "probability must lie in [0, 1]"));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("{path}.{name}"), "intensity must lie in [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config(format!("{path}.hue"), "hue intensity must lie in [0, 0.5]"));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::config(format!("{path}.blur_sigma"), "need 0 < lo <= hi"));
        }
        if self.normalize_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config(format!("{path}.normalize_std"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub global1: ViewFamilyConfig,
    pub global2: ViewFamilyConfig,
    pub local: ViewFamilyConfig,
    pub n_global: usize,
    pub n_local: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global1: ViewFamilyConfig::global1(),
            global2: ViewFamilyConfig::global2(),
            local: ViewFamilyConfig::local(),
            n_global: 2,
            n_local: 8,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.global1.validate(&format!("{path}.global1"))?;
        self.global2.validate(&format!("{path}.global2"))?;
        self.local.validate(&format!("{path}.local"))?;
        if self.global1.output_size != self.global2.output_size {
            return Err(Error::config(
                format!("{path}.global2.output_size"),
                "both global families must share one output size",
            ));
        }
        if self.n_global == 0 {
            return Err(Error::config(format!("{path}.n_global"), "need at least one global view"));
        }
        Ok(())
    }

    pub fn global_size(&self) -> usize {
        self.global1.output_size
    }

    pub fn local_size(&self) -> usize {
        self.local.output_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Family {
    Global1,
    Global2,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Area fraction drawn from the configured scale range.
    pub area_fraction: f64,
    pub aspect: f64,
    /// True when every attempt was degenerate and the whole image was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JitterParams {
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Every sampled parameter that produced a view.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewProvenance {
    pub family: Family,
    pub crop: CropParams,
    pub flipped: bool,
    pub jitter: Option<JitterParams>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub provenance: ViewProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub globals: Vec<View>,
    pub locals: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.globals.len() + self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples a crop of area fraction in `scale` and aspect in `aspect`, then
/// resizes it bilinearly to `out×out`.
pub fn random_resized_crop(
    img: &Image,
    scale: (f64, f64),
    aspect: (f64, f64),
    out: usize,
    rng: &mut Rng,
) -> Result<(Image, CropParams)> {
    if img.height() < 4 || img.width() < 4 {
        return Err(Error::Dimension(format!(
            "crop source must be at least 4x4, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (aspect.0.ln(), aspect.1.ln());
    let mut first_fraction = None;
    for _ in 0..MAX_CROP_ATTEMPTS {
        let fraction = uniform(rng, scale.0, scale.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        first_fraction.get_or_insert(fraction);
        let target = area * fraction;
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            let crop = CropParams {
                top,
                left,
                height: ch,
                width: cw,
                area_fraction: fraction,
                aspect: ratio,
                fallback: false,
            };
            let image = img.crop_resize(top as f64, left as f64, ch as f64, cw as f64, out, out);
            return Ok((image, crop));
        }
    }
    let crop = CropParams {
        top: 0,
        left: 0,
        height: h,
        width: w,
        area_fraction: first_fraction.unwrap_or(1.0),
        aspect: w as f64 / h as f64,
        fallback: true,
    };
    Ok((img.resize(out, out), crop))
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, |y, x| img.pixel(y, w - 1 - x))
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn grayscale(img: &Image) -> Image {
    Image::from_fn(img.height(), img.width(), |y, x| {
        let g = luma(img.pixel(y, x));
        [g, g, g]
    })
}

pub fn adjust_brightness(img: &Image, factor: f64) -> Image {
    img.map(|v| v * factor).clamp01()
}

pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    let n = (img.height() * img.width()) as f64;
    let mean = img.data().chunks_exact(CHANNELS).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / n;
    img.map(|v| factor * v + (1.0 - factor) * mean).clamp01()
}

pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    Image::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        let g = luma(p);
        p.map(|v| (factor * v + (1.0 - factor) * g).clamp(0.0, 1.0))
    })
}

/// Rotates hue by `shift` turns (e.g. `0.1` = 36°).
pub fn adjust_hue(img: &Image, shift: f64) -> Image {
    Image::from_fn(img.height(), img.width(), |y, x| {
        let (h, s, v) = rgb_to_hsv(img.pixel(y, x));
        hsv_to_rgb((h + shift).rem_euclid(1.0), s, v)
    })
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn solarize(img: &Image, threshold: f64) -> Image {
    img.map(|v| if v >= threshold { 1.0 - v } else { v })
}

pub fn normalize(img: &Image, mean: [f64; 3], std: [f64; 3]) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
    out
}

fn sample_jitter(cfg: &ViewFamilyConfig, rng: &mut Rng) -> JitterParams {
    let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
    order.shuffle(rng);
    JitterParams {
        order,
        brightness: uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness),
        contrast: uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast),
        saturation: uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation),
        hue: uniform(rng, -cfg.hue, cfg.hue),
    }
}

pub fn color_jitter(img: &Image, params: &JitterParams) -> Image {
    let mut out = img.clone();
    for op in params.order {
        out = match op {
            JitterOp::Brightness => adjust_brightness(&out, params.brightness),
            JitterOp::Contrast => adjust_contrast(&out, params.contrast),
            JitterOp::Saturation => adjust_saturation(&out, params.saturation),
            JitterOp::Hue if params.hue != 0.0 => adjust_hue(&out, params.hue),
            JitterOp::Hue => out,
        };
    }
    out
}

/// One fully augmented, normalized view.
pub fn augment(img: &Image, cfg: &ViewFamilyConfig, family: Family, rng: &mut Rng) -> Result<View> {
    let (mut out, crop) = random_resized_crop(img, cfg.crop_scale, cfg.aspect, cfg.output_size, rng)?;
    let flipped = rng.random_bool(cfg.flip_prob);
    if flipped {
        out = hflip(&out);
    }
    let jitter = if rng.random_bool(cfg.jitter_prob) {
        let params = sample_jitter(cfg, rng);
        out = color_jitter(&out, &params);
        Some(params)
    } else {
        None
    };
    let gray = rng.random_bool(cfg.grayscale_prob);
    if gray {
        out = grayscale(&out);
    }
    let blur_sigma = if rng.random_bool(cfg.blur_prob) {
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        out = out.gaussian_blur(sigma);
        Some(sigma)
    } else {
        None
    };
    let solarized = rng.random_bool(cfg.solarize_prob);
    if solarized {
        out = solarize(&out, 0.5);
    }
    let image = normalize(&out.clamp01(), cfg.normalize_mean, cfg.normalize_std);
    Ok(View {
        image,
        provenance: ViewProvenance {
            family,
            crop,
            flipped,
            jitter,
            grayscale: gray,
            blur_sigma,
            solarized,
        },
    })
}

/// Global views alternate between the two global families; locals use the local family.
pub fn make_views(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<ViewSet> {
    make_views_with_counts(img, cfg, cfg.n_global, cfg.n_local, rng)
}

pub fn make_views_with_counts(
    img: &Image,
    cfg: &AugmentConfig,
    n_global: usize,
    n_local: usize,
    rng: &mut Rng,
) -> Result<ViewSet> {
    let globals = (0..n_global)
        .map(|i| {
            if i % 2 == 0 {
                augment(img, &cfg.global1, Family::Global1, rng)
            } else {
                augment(img, &cfg.global2, Family::Global2, rng)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let locals = (0..n_local)
        .map(|_| augment(img, &cfg.local, Family::Local, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { globals, locals })
}

/// Deterministic evaluation view: resize to `size`, then normalize.
pub fn eval_view(img: &Image, size: usize, mean: [f64; 3], std: [f64; 3]) -> Image {
    normalize(&img.resize(size, size), mean, std)
}
