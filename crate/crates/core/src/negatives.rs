//! Negative views: a shifting transform changes an image's high-level
//! semantics while keeping its low-level statistics, then the ordinary view
//! pipeline is applied on top.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views_with_counts, AugmentConfig, ViewSet};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

const SHARPEN_ALPHA: f64 = 1.0;
const SHARPEN_SIGMA: f64 = 1.0;
const BLUR_SHIFT_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShiftTransform {
    Identity,
    /// Uniform over {90°, 180°, 270°}.
    Rot90Set,
    /// Uniform over {0°, 90°, 180°, 270°}.
    Rot360,
    /// Shuffle of a `grid_n × grid_n` tiling (Perm-4 for 2, Perm-16 for 4).
    PermPatch { grid_n: usize },
    PixPerm,
    Sharpen,
    Translate { max_frac: f64 },
    GaussBlurShift,
}

impl ShiftTransform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftTransform::PermPatch { grid_n } if grid_n == 0 => {
                Err(Error::Parameter("perm_patches grid_n must be >= 1".into()))
            }
            ShiftTransform::Translate { max_frac } if !(0.0..=1.0).contains(&max_frac) => {
                Err(Error::Parameter(format!("translate max_frac {max_frac} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// What a shift actually did to one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ShiftRecord {
    Identity,
    Rotate { quarter_turns: u8 },
    PermPatch { grid_n: usize, permutation: Vec<usize> },
    PixPerm,
    Sharpen,
    Translate { dy: i64, dx: i64 },
    Blur { sigma: f64 },
}

/// A sequence of shifts applied left to right, written as `rot90+sharpen+translate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftPipeline(pub Vec<ShiftTransform>);

impl ShiftPipeline {
    pub fn identity() -> Self {
        Self(vec![ShiftTransform::Identity])
    }

    /// Parses names; `perm_patch` uses `grid_n` and `translate` uses `max_frac`.
    pub fn parse(spec: &str, grid_n: usize, max_frac: f64) -> Result<Self> {
        let mut out = Vec::new();
        for part in spec.split('+').map(str::trim) {
            let t = match part {
                "identity" | "none" => ShiftTransform::Identity,
                "rot90" | "rot" => ShiftTransform::Rot90Set,
                "rot360" => ShiftTransform::Rot360,
                "perm4" => ShiftTransform::PermPatch { grid_n: 2 },
                "perm16" => ShiftTransform::PermPatch { grid_n: 4 },
                "perm_patch" => ShiftTransform::PermPatch { grid_n },
                "pixperm" | "pix_perm" => ShiftTransform::PixPerm,
                "sharpen" | "sharp" => ShiftTransform::Sharpen,
                "translate" | "trans" => ShiftTransform::Translate { max_frac },
                "gaussblur" | "gb" => ShiftTransform::GaussBlurShift,
                other => return Err(Error::Parameter(format!("unknown shift `{other}`"))),
            };
            t.validate()?;
            out.push(t);
        }
        Ok(Self(out))
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Result<(Image, Vec<ShiftRecord>)> {
        let mut cur = img.clone();
        let mut records = Vec::with_capacity(self.0.len());
        for t in &self.0 {
            let (next, rec) = apply_shift(&cur, *t, rng)?;
            cur = next;
            records.push(rec);
        }
        Ok((cur, records))
    }
}

impl FromStr for ShiftPipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, 2, 0.25)
    }
}

impl fmt::Display for ShiftPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self
            .0
            .iter()
            .map(|t| match t {
                ShiftTransform::Identity => "identity".into(),
                ShiftTransform::Rot90Set => "rot90".into(),
                ShiftTransform::Rot360 => "rot360".into(),
                ShiftTransform::PermPatch { grid_n } => format!("perm{}", grid_n * grid_n),
                ShiftTransform::PixPerm => "pixperm".into(),
                ShiftTransform::Sharpen => "sharpen".into(),
                ShiftTransform::Translate { max_frac } => format!("translate({max_frac})"),
                ShiftTransform::GaussBlurShift => "gaussblur".into(),
            })
            .collect();
        f.write_str(&names.join("+"))
    }
}

pub fn apply_shift(img: &Image, t: ShiftTransform, rng: &mut Rng) -> Result<(Image, ShiftRecord)> {
    Ok(match t {
        ShiftTransform::Identity => (img.clone(), ShiftRecord::Identity),
        ShiftTransform::Rot90Set => {
            let k = rng.random_range(1..=3u8);
            (rotate90(img, k)?, ShiftRecord::Rotate { quarter_turns: k })
        }
        ShiftTransform::Rot360 => {
            let k = rng.random_range(0..=3u8);
            (rotate90(img, k)?, ShiftRecord::Rotate { quarter_turns: k })
        }
        ShiftTransform::PermPatch { grid_n } => {
            let (out, permutation) = perm_patches(img, grid_n, rng);
            (out, ShiftRecord::PermPatch { grid_n, permutation })
        }
        ShiftTransform::PixPerm => (pix_perm(img, rng), ShiftRecord::PixPerm),
        ShiftTransform::Sharpen => (sharpen(img), ShiftRecord::Sharpen),
        ShiftTransform::Translate { max_frac } => {
            let (out, dy, dx) = translate(img, max_frac, rng);
            (out, ShiftRecord::Translate { dy, dx })
        }
        ShiftTransform::GaussBlurShift => (
            img.gaussian_blur(BLUR_SHIFT_SIGMA),
            ShiftRecord::Blur { sigma: BLUR_SHIFT_SIGMA },
        ),
    })
}

/// Lossless clockwise rotation by `k` quarter turns.
pub fn rotate90(img: &Image, k: u8) -> Result<Image> {
    if !img.is_square() {
        return Err(Error::Dimension(format!(
            "rotate90 needs a square image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let n = img.height();
    Ok(match k % 4 {
        0 => img.clone(),
        1 => Image::from_fn(n, n, |y, x| img.pixel(n - 1 - x, y)),
        2 => Image::from_fn(n, n, |y, x| img.pixel(n - 1 - y, n - 1 - x)),
        _ => Image::from_fn(n, n, |y, x| img.pixel(x, n - 1 - y)),
    })
}

/// Rearranges `grid_n × grid_n` equal tiles by a uniform permutation
/// (tile `i` of the output is tile `perm[i]` of the input). An identity draw
/// is redrawn once. Sides not divisible by `grid_n` are edge-padded first and
/// cropped back afterwards.
pub fn perm_patches(img: &Image, grid_n: usize, rng: &mut Rng) -> (Image, Vec<usize>) {
    let tiles = grid_n * grid_n;
    let mut perm: Vec<usize> = (0..tiles).collect();
    if tiles <= 1 {
        return (img.clone(), perm);
    }
    perm.shuffle(rng);
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        perm.shuffle(rng);
    }
    let (h, w) = (img.height(), img.width());
    let ph = h.div_ceil(grid_n) * grid_n;
    let pw = w.div_ceil(grid_n) * grid_n;
    let padded = if (ph, pw) == (h, w) {
        img.clone()
    } else {
        Image::from_fn(ph, pw, |y, x| img.pixel(y.min(h - 1), x.min(w - 1)))
    };
    let (th, tw) = (ph / grid_n, pw / grid_n);
    let shuffled = Image::from_fn(ph, pw, |y, x| {
        let tile = (y / th) * grid_n + x / tw;
        let src = perm[tile];
        let (sy, sx) = ((src / grid_n) * th + y % th, (src % grid_n) * tw + x % tw);
        padded.pixel(sy, sx)
    });
    let out = if (ph, pw) == (h, w) {
        shuffled
    } else {
        Image::from_fn(h, w, |y, x| shuffled.pixel(y, x))
    };
    (out, perm)
}

/// Uniform shuffle of pixel positions; the three channels of a pixel move together.
pub fn pix_perm(img: &Image, rng: &mut Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(rng);
    Image::from_fn(h, w, |y, x| {
        let s = order[y * w + x];
        img.pixel(s / w, s % w)
    })
}

/// Unsharp mask `img + α·(img − blur(img))` with α = 1, clamped to `[0, 1]`.
pub fn sharpen(img: &Image) -> Image {
    let blurred = img.gaussian_blur(SHARPEN_SIGMA);
    let mut out = img.clone();
    for (o, b) in out.data_mut().iter_mut().zip(blurred.data()) {
        *o = (*o + SHARPEN_ALPHA * (*o - b)).clamp(0.0, 1.0);
    }
    out
}

/// Integer shift by offsets drawn uniformly from `[-⌊max_frac·side⌋, ⌊max_frac·side⌋]`,
/// zero-filling uncovered pixels. Returns `(image, dy, dx)`.
pub fn translate(img: &Image, max_frac: f64, rng: &mut Rng) -> (Image, i64, i64) {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let my = (max_frac * h as f64).floor() as i64;
    let mx = (max_frac * w as f64).floor() as i64;
    let dy = if my > 0 { rng.random_range(-my..=my) } else { 0 };
    let dx = if mx > 0 { rng.random_range(-mx..=mx) } else { 0 };
    (shift_image(img, dy, dx), dy, dx)
}

pub fn shift_image(img: &Image, dy: i64, dx: i64) -> Image {
    let (h, w) = (img.height() as i64, img.width() as i64);
    Image::from_fn(h as usize, w as usize, |y, x| {
        let (sy, sx) = (y as i64 - dy, x as i64 - dx);
        if (0..h).contains(&sy) && (0..w).contains(&sx) {
            img.pixel(sy as usize, sx as usize)
        } else {
            [0.0; 3]
        }
    })
}

/// Where negatives come from and which shift produces them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativeConfig {
    pub source: NegativeSource,
    /// Shift names joined by `+`, applied left to right.
    pub shift: String,
    pub grid_n: usize,
    pub max_frac: f64,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        Self {
            source: NegativeSource::Auxiliary,
            shift: "rot90".into(),
            grid_n: 2,
            max_frac: 0.25,
        }
    }
}

impl NegativeConfig {
    pub fn pipeline(&self) -> Result<ShiftPipeline> {
        ShiftPipeline::parse(&self.shift, self.grid_n, self.max_frac)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        self.pipeline().map(|_| ()).map_err(|e| match e {
            Error::Parameter(m) => Error::config(format!("{path}.shift"), m),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    InDist,
    Auxiliary,
    /// Both in-distribution and auxiliary negatives, drawn independently.
    Combined,
}

impl NegativeSource {
    pub fn needs_auxiliary(self) -> bool {
        matches!(self, NegativeSource::Auxiliary | NegativeSource::Combined)
    }

    pub fn groups(self) -> &'static [SourceKind] {
        match self {
            NegativeSource::InDist => &[SourceKind::InDist],
            NegativeSource::Auxiliary => &[SourceKind::Auxiliary],
            NegativeSource::Combined => &[SourceKind::InDist, SourceKind::Auxiliary],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SourceKind {
    InDist,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeViews {
    pub kind: SourceKind,
    /// Index of the source image in its dataset.
    pub source_index: usize,
    pub shifts: Vec<ShiftRecord>,
    pub views: ViewSet,
}

/// Negative view counts per training sample: one global, eight local.
pub const NEG_GLOBALS: usize = 1;
pub const NEG_LOCALS: usize = 8;

pub struct NegativeSampler<'a> {
    pub in_dist: &'a ImageDataset,
    pub auxiliary: Option<&'a ImageDataset>,
    pub source: NegativeSource,
    pub shifts: &'a ShiftPipeline,
    pub augment: &'a AugmentConfig,
    pub n_local: usize,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(
        in_dist: &'a ImageDataset,
        auxiliary: Option<&'a ImageDataset>,
        source: NegativeSource,
        shifts: &'a ShiftPipeline,
        augment: &'a AugmentConfig,
    ) -> Result<Self> {
        if in_dist.is_empty() {
            return Err(Error::config("data.in_dist", "in-distribution dataset is empty"));
        }
        if source.needs_auxiliary() {
            match auxiliary {
                None => {
                    return Err(Error::config("data.auxiliary", "negative source needs an auxiliary dataset"))
                }
                Some(a) if a.is_empty() => {
                    return Err(Error::config("data.auxiliary", "auxiliary dataset is empty"))
                }
                Some(a) if a.image_size() != in_dist.image_size() => {
                    return Err(Error::config(
                        "data.auxiliary",
                        format!(
                            "auxiliary images are {}px but in-distribution images are {}px",
                            a.image_size(),
                            in_dist.image_size()
                        ),
                    ))
                }
                _ => {}
            }
        }
        Ok(Self {
            in_dist,
            auxiliary,
            source,
            shifts,
            augment,
            n_local: augment.n_local,
        })
    }

    /// Negative views for the in-distribution training sample `sample`.
    /// In-dist negatives shift that same image; auxiliary negatives shift a
    /// uniformly drawn auxiliary image.
    pub fn sample(&self, sample: usize, rng: &mut Rng) -> Result<Vec<NegativeViews>> {
        self.source
            .groups()
            .iter()
            .map(|&kind| {
                let (img, source_index) = match kind {
                    SourceKind::InDist => (&self.in_dist.images()[sample], sample),
                    SourceKind::Auxiliary => {
                        let aux = self.auxiliary.expect("validated in new()");
                        let i = rng.random_range(0..aux.len());
                        (&aux.images()[i], i)
                    }
                };
                let (shifted, shifts) = self.shifts.apply(img, rng)?;
                let views = make_views_with_counts(&shifted, self.augment, NEG_GLOBALS, self.n_local, rng)?;
                Ok(NegativeViews {
                    kind,
                    source_index,
                    shifts,
                    views,
                })
            })
            .collect()
    }
}
