//! RGB images stored as `H×W×3` rows of reals in `[0, 1]`.

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Dimension(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, p: [f64; 3]) {
        let o = (y * self.width + x) * CHANNELS;
        self.data[o..o + 3].copy_from_slice(&p);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Bilinear resample of the sub-rectangle `(top, left, h, w)` to `out_h×out_w`
    /// using half-pixel centers; a same-size full-image call is exact.
    pub fn crop_resize(&self, top: f64, left: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Self {
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        let mut out = Vec::with_capacity(out_h * out_w * CHANNELS);
        for oy in 0..out_h {
            let fy = (top + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = (left + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..CHANNELS {
                    let v00 = self.get(y0, x0, c);
                    let v01 = self.get(y0, x1, c);
                    let v10 = self.get(y1, x0, c);
                    let v11 = self.get(y1, x1, c);
                    let top_v = if wx == 0.0 { v00 } else { v00 + (v01 - v00) * wx };
                    let bot_v = if wx == 0.0 { v10 } else { v10 + (v11 - v10) * wx };
                    out.push(if wy == 0.0 { top_v } else { top_v + (bot_v - top_v) * wy });
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            data: out,
        }
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.height as f64, self.width as f64, out_h, out_w)
    }

    /// Separable Gaussian blur with kernel radius `ceil(2·sigma)` and edge clamping.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        let radius = (2.0 * sigma).ceil().max(1.0) as isize;
        let kernel: Vec<f64> = {
            let raw: Vec<f64> = (-radius..=radius)
                .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
                .collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        };
        let (h, w) = (self.height as isize, self.width as isize);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for (ki, &kv) in kernel.iter().enumerate() {
                    let xx = (x + ki as isize - radius).clamp(0, w - 1);
                    let src = ((y * w + xx) as usize) * CHANNELS;
                    let dst = ((y * w + x) as usize) * CHANNELS;
                    for c in 0..CHANNELS {
                        tmp[dst + c] += kv * self.data[src + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for (ki, &kv) in kernel.iter().enumerate() {
                    let yy = (y + ki as isize - radius).clamp(0, h - 1);
                    let src = ((yy * w + x) as usize) * CHANNELS;
                    let dst = ((y * w + x) as usize) * CHANNELS;
                    for c in 0..CHANNELS {
                        out[dst + c] += kv * tmp[src + c];
                    }
                }
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Per-channel sorted values; equal across images iff the channel histograms match exactly.
    pub fn channel_multisets(&self) -> [Vec<f64>; 3] {
        let mut out: [Vec<f64>; 3] = Default::default();
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                out[c].push(px[c]);
            }
        }
        for ch in &mut out {
            ch.sort_by(f64::total_cmp);
        }
        out
    }
}
