//! Datasets: CIFAR binary records, image folders, synthetic generators, and
//! per-channel color histograms.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::{stream, Rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Vec<Image>,
    labels: Option<Vec<u32>>,
    source: String,
    image_size: usize,
}

impl ImageDataset {
    /// All images must share one square size; values are clamped to `[0, 1]` by construction elsewhere.
    pub fn new(images: Vec<Image>, labels: Option<Vec<u32>>, source: impl Into<String>) -> Result<Self> {
        let source = source.into();
        let Some(first) = images.first() else {
            return Err(Error::Data(format!("dataset `{source}` is empty")));
        };
        let size = first.height();
        if let Some(i) = images.iter().position(|im| im.height() != size || im.width() != size) {
            return Err(Error::Data(format!(
                "dataset `{source}`: image {i} is {}x{}, expected {size}x{size}",
                images[i].height(),
                images[i].width()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::Data(format!(
                    "dataset `{source}`: {} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        if images.iter().any(|im| im.data().iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Data(format!("dataset `{source}` has values outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            source,
            image_size: size,
        })
    }

    pub fn empty(image_size: usize, source: impl Into<String>) -> Self {
        Self {
            images: Vec::new(),
            labels: None,
            source: source.into(),
            image_size,
        }
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Bilinear resize of every image; used to match auxiliary/OOD data to the in-distribution size.
    pub fn resized(&self, size: usize) -> Self {
        if size == self.image_size {
            return self.clone();
        }
        Self {
            images: self.images.iter().map(|im| im.resize(size, size).clamp01()).collect(),
            labels: self.labels.clone(),
            source: self.source.clone(),
            image_size: size,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            source: self.source.clone(),
            image_size: self.image_size,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn map_images(&self, mut f: impl FnMut(usize, &Image) -> Image) -> Result<Self> {
        let images = self.images.iter().enumerate().map(|(i, im)| f(i, im)).collect();
        Self::new(images, self.labels.clone(), self.source.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::C10 => 1 + 3072,
            CifarVariant::C100 => 2 + 3072,
        }
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

/// Reads a CIFAR binary batch file. CIFAR-100 keeps the fine label.
pub fn load_cifar_bin(path: &Path, variant: CifarVariant) -> Result<ImageDataset> {
    let bytes = fs::read(path)?;
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Format {
            file: path.to_path_buf(),
            offset,
            message: format!("{} bytes is not a positive multiple of the {rec}-byte record", bytes.len()),
        });
    }
    let header = rec - 3 * CIFAR_PLANE;
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for r in bytes.chunks_exact(rec) {
        labels.push(u32::from(r[header - 1]));
        let px = &r[header..];
        let img = Image::from_fn(CIFAR_SIDE, CIFAR_SIDE, |y, x| {
            let i = y * CIFAR_SIDE + x;
            [
                f64::from(px[i]) / 255.0,
                f64::from(px[CIFAR_PLANE + i]) / 255.0,
                f64::from(px[2 * CIFAR_PLANE + i]) / 255.0,
            ]
        });
        images.push(img);
    }
    ImageDataset::new(images, Some(labels), path.display().to_string())
}

/// Writes 32×32 images in CIFAR binary layout; pixels are rounded to 8 bits.
/// For CIFAR-100 the coarse label byte is written as 0.
pub fn write_cifar_bin(path: &Path, ds: &ImageDataset, variant: CifarVariant) -> Result<()> {
    if ds.image_size() != CIFAR_SIDE {
        return Err(Error::Data(format!("CIFAR records hold 32x32 images, got {}", ds.image_size())));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, img) in ds.images().iter().enumerate() {
        let label = ds.labels().map_or(0, |l| l[i]);
        let label = u8::try_from(label).map_err(|_| Error::Data(format!("label {label} does not fit a byte")))?;
        if variant == CifarVariant::C100 {
            w.write_all(&[0])?;
        }
        w.write_all(&[label])?;
        for c in 0..CHANNELS {
            let plane: Vec<u8> = (0..CIFAR_PLANE)
                .map(|p| (img.get(p / CIFAR_SIDE, p % CIFAR_SIDE, c) * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            w.write_all(&plane)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Decodes every PPM (P3/P6) and PNG file in `dir` (non-recursive, sorted by
/// name), resizing each to `target_size`. Undecodable files are skipped.
pub fn load_image_folder(dir: &Path, target_size: usize) -> Result<ImageDataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in &paths {
        match decode_image(p) {
            Ok(img) => images.push(img.resize(target_size, target_size).clamp01()),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no decodable images in {}", dir.display())));
    }
    ImageDataset::new(images, None, dir.display().to_string())
}

pub fn decode_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        decode_ppm(path, &bytes)
    } else {
        Err(Error::Format {
            file: path.to_path_buf(),
            offset: 0,
            message: "unrecognized image signature".into(),
        })
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Image> {
    let fmt_err = |m: String| Error::Format {
        file: path.to_path_buf(),
        offset: 0,
        message: m,
    };
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| fmt_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| fmt_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(fmt_err("unexpanded palette".into())),
    };
    let row = info.line_size;
    Ok(Image::from_fn(h, w, |y, x| {
        let o = y * row + x * stride;
        let px = &buf[o..o + stride];
        if stride < 3 {
            let g = f64::from(px[0]) / 255.0;
            [g, g, g]
        } else {
            [px[0], px[1], px[2]].map(|v| f64::from(v) / 255.0)
        }
    }))
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let err = |offset: usize, m: &str| Error::Format {
        file: path.to_path_buf(),
        offset: offset as u64,
        message: m.to_string(),
    };
    let mut pos = 2;
    let next_token = |pos: &mut usize| -> Result<usize> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "expected an integer"))
    };
    let w = next_token(&mut pos)?;
    let h = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(err(pos, "unsupported dimensions or maxval"));
    }
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(w * h * 3);
    if bytes.starts_with(b"P6") {
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(err(bytes.len(), "truncated pixel data"));
        }
        data.extend(bytes[pos..pos + need].iter().map(|&b| f64::from(b) / scale));
    } else {
        for _ in 0..w * h * 3 {
            data.push(next_token(&mut pos)? as f64 / scale);
        }
    }
    Image::new(h, w, data)
}

/// Binary PPM (P6) encoder for `[0, 1]` images.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Sinusoidal gratings; the class is the orientation.
    Stripes,
    /// Gaussian blobs; the class is the blob count.
    Blobs,
    /// Independent per-pixel noise around a random base color.
    Noise,
    /// Checkerboards; the class is the cell size.
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Stripe orientations in degrees, one class each.
    pub orientations: Vec<f64>,
    /// Blob counts, one class each.
    pub blob_counts: Vec<usize>,
    /// Checker cell sizes in pixels, one class each.
    pub checker_cells: Vec<usize>,
    /// Per-channel mean of the noise kind.
    pub noise_mean: [f64; 3],
    pub noise_std: f64,
    /// Amplitude jitter of per-pixel noise added on top of every kind.
    pub pixel_noise: f64,
    /// Two colors shared by every image; a fresh random pair per image when unset.
    pub palette: Option<[[f64; 3]; 2]>,
    /// Uniform per-channel jitter applied to a fixed palette.
    pub palette_jitter: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            orientations: vec![0.0, 45.0],
            blob_counts: vec![1, 2, 3],
            checker_cells: vec![4, 8],
            noise_mean: [0.5, 0.5, 0.5],
            noise_std: 0.15,
            pixel_noise: 0.03,
            palette: None,
            palette_jitter: 0.0,
        }
    }
}

/// Two colors drawn the same way for every kind so low-level color statistics match.
fn palette(params: &SynthParams, rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
    match params.palette {
        None => {
            let a = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            let b = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            (a, b)
        }
        Some([a, b]) => {
            let j = params.palette_jitter;
            let mut jitter = |c: [f64; 3]| {
                if j > 0.0 {
                    c.map(|v| v + rng.random_range(-j..=j))
                } else {
                    c
                }
            };
            (jitter(a), jitter(b))
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
}

fn gauss(rng: &mut Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Parametric images of one kind. Labels give the class index per image.
pub fn synth_dataset(kind: SynthKind, n: usize, size: usize, seed: u64, params: &SynthParams) -> Result<ImageDataset> {
    if n == 0 {
        return Err(Error::Parameter("synthetic dataset needs n >= 1".into()));
    }
    if size < 4 {
        return Err(Error::Parameter("synthetic images need size >= 4".into()));
    }
    let classes = match kind {
        SynthKind::Stripes => params.orientations.len(),
        SynthKind::Blobs => params.blob_counts.len(),
        SynthKind::Checker => params.checker_cells.len(),
        SynthKind::Noise => 1,
    };
    if classes == 0 {
        return Err(Error::Parameter(format!("{kind:?} needs at least one class")));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, Stream::Synthetic, &[kind as u64, i as u64]);
        let class = i % classes;
        let img = synth_image(kind, class, size, params, &mut rng);
        images.push(img.clamp01());
        labels.push(class as u32);
    }
    ImageDataset::new(images, Some(labels), format!("synthetic:{kind:?}").to_lowercase())
}

fn synth_image(kind: SynthKind, class: usize, size: usize, params: &SynthParams, rng: &mut Rng) -> Image {
    let s = size as f64;
    let (ca, cb) = palette(params, rng);
    let base = match kind {
        SynthKind::Stripes => {
            let theta = params.orientations[class].to_radians();
            let period = rng.random_range(0.2..0.35) * s;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, sn) = (theta.cos(), theta.sin());
            Image::from_fn(size, size, |y, x| {
                // orientation 0° gives vertical bands (intensity varies along x)
                let u = (x as f64 - s / 2.0) * c + (y as f64 - s / 2.0) * sn;
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * u / period + phase).sin();
                mix(ca, cb, t)
            })
        }
        SynthKind::Blobs => {
            let count = params.blob_counts[class];
            let blobs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.2..0.8) * s,
                        rng.random_range(0.2..0.8) * s,
                        rng.random_range(0.08..0.18) * s,
                    )
                })
                .collect();
            Image::from_fn(size, size, |y, x| {
                let t: f64 = blobs
                    .iter()
                    .map(|&(cy, cx, r)| {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        (-d2 / (2.0 * r * r)).exp()
                    })
                    .sum::<f64>()
                    .min(1.0);
                mix(ca, cb, t)
            })
        }
        SynthKind::Checker => {
            let cell = params.checker_cells[class].max(1);
            let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
            Image::from_fn(size, size, |y, x| {
                let t = (((y + oy) / cell + (x + ox) / cell) % 2) as f64;
                mix(ca, cb, t)
            })
        }
        SynthKind::Noise => {
            let m = params.noise_mean;
            let sd = params.noise_std;
            let mut px = Vec::with_capacity(size * size * CHANNELS);
            for _ in 0..size * size {
                for c in 0..CHANNELS {
                    px.push(m[c] + sd * gauss(rng));
                }
            }
            return Image::new(size, size, px).expect("sized above").clamp01();
        }
    };
    if params.pixel_noise > 0.0 {
        let mut out = base;
        for v in out.data_mut() {
            *v += params.pixel_noise * gauss(rng);
        }
        out
    } else {
        base
    }
}

/// Normalized per-channel histograms over all pixels of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColorHistogram {
    pub bins: usize,
    /// `channels[c][b]`, each channel sums to 1.
    pub channels: [Vec<f64>; 3],
}

pub fn color_histogram(ds: &ImageDataset, bins: usize) -> Result<ColorHistogram> {
    if bins < 2 {
        return Err(Error::Parameter(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if ds.is_empty() {
        return Err(Error::Data("histogram of an empty dataset".into()));
    }
    let mut counts: [Vec<u64>; 3] = [vec![0; bins], vec![0; bins], vec![0; bins]];
    let mut total = 0u64;
    for img in ds.images() {
        for px in img.data().chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                let b = ((px[c].clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
                counts[c][b] += 1;
            }
            total += 1;
        }
    }
    let channels = counts.map(|ch| ch.into_iter().map(|n| n as f64 / total as f64).collect());
    Ok(ColorHistogram { bins, channels })
}

/// Mean over channels of the L1 distance between normalized histograms (range `[0, 2]`).
pub fn histogram_distance(a: &ColorHistogram, b: &ColorHistogram) -> Result<f64> {
    if a.bins != b.bins {
        return Err(Error::Dimension(format!("histogram bins {} vs {}", a.bins, b.bins)));
    }
    let per_channel: f64 = (0..CHANNELS)
        .map(|c| a.channels[c].iter().zip(&b.channels[c]).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(per_channel / CHANNELS as f64)
}
