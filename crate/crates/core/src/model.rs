//! Student/teacher encoders with projection heads.
//!
//! A [`Network`] owns a flat, ordered parameter list. Forward passes bind the
//! parameters onto a [`Tape`] (as gradient leaves for the student, as
//! constants for the teacher) and consume them in the order they were created.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::Rng;
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    TinyVit,
    Mlp,
}

/// How the ViT turns its final tokens into the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePool {
    Cls,
    /// Mean of the normalized patch tokens, the class token excluded.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Side of the global views; position embeddings live on this grid.
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pool: FeaturePool,
    /// Hidden sizes of the MLP encoder; the last one is the feature width.
    pub mlp_hidden: Vec<usize>,
    /// The MLP encoder average-pools inputs to this grid first.
    pub pool_grid: usize,
    /// Number of soft-classes `K`.
    pub out_dim: usize,
    /// Head hidden width; `None` means twice the feature width.
    pub head_hidden: Option<usize>,
    pub init_std: f64,
    pub momentum: f64,
    pub centering: bool,
    pub center_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::TinyVit,
            image_size: 32,
            patch: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            pool: FeaturePool::Cls,
            mlp_hidden: vec![256, 128],
            pool_grid: 8,
            out_dim: 256,
            head_hidden: None,
            init_std: 0.02,
            momentum: 0.996,
            centering: true,
            center_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::TinyVit => self.dim,
            EncoderKind::Mlp => *self.mlp_hidden.last().unwrap_or(&0),
        }
    }

    pub fn head_width(&self) -> usize {
        self.head_hidden.unwrap_or(2 * self.feature_dim())
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("{path}.{field}"), msg));
        if self.out_dim < 2 {
            return bad("out_dim", format!("need at least 2 soft-classes, got {}", self.out_dim));
        }
        if !(self.init_std > 0.0) {
            return bad("init_std", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} outside [0, 1]", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return bad("center_momentum", format!("{} outside [0, 1]", self.center_momentum));
        }
        if self.head_width() == 0 {
            return bad("head_hidden", "must be positive".into());
        }
        match self.encoder {
            EncoderKind::TinyVit => {
                if self.patch == 0 || self.image_size % self.patch != 0 {
                    return bad("patch", format!("{} does not divide image_size {}", self.patch, self.image_size));
                }
                if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
                    return bad("heads", format!("{} heads do not divide dim {}", self.heads, self.dim));
                }
                if self.mlp_ratio == 0 {
                    return bad("mlp_ratio", "must be positive".into());
                }
            }
            EncoderKind::Mlp => {
                if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
                    return bad("mlp_hidden", "need at least one positive layer width".into());
                }
                if self.pool_grid == 0 {
                    return bad("pool_grid", "must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Whether views of side `size` can be encoded.
    pub fn check_input_size(&self, size: usize) -> Result<()> {
        match self.encoder {
            EncoderKind::TinyVit if size % self.patch != 0 || size < self.patch => Err(Error::Dimension(format!(
                "view side {size} is not a positive multiple of patch {}",
                self.patch
            ))),
            EncoderKind::Mlp if size < self.pool_grid => Err(Error::Dimension(format!(
                "view side {size} is smaller than the pooling grid {}",
                self.pool_grid
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (affine weights only).
    pub decay: bool,
}

/// Encoder plus projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: ModelConfig,
    params: Vec<Param>,
}

/// Outputs of one forward pass: features `[B, d]` before the head, logits `[B, K]`.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
}

fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std validated");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

struct Builder<'a> {
    params: Vec<Param>,
    std: f64,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, shape: &[usize]) {
        let value = trunc_normal(shape, self.std, self.rng);
        self.params.push(Param {
            name: name.into(),
            value,
            decay: true,
        });
    }

    fn fixed(&mut self, name: &str, shape: &[usize], v: f64) {
        self.params.push(Param {
            name: name.into(),
            value: Tensor::full(shape, v),
            decay: false,
        });
    }

    fn embedding(&mut self, name: &str, shape: &[usize]) {
        let value = trunc_normal(shape, self.std, self.rng);
        self.params.push(Param {
            name: name.into(),
            value,
            decay: false,
        });
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.weight(&format!("{name}.w"), &[fan_in, fan_out]);
        self.fixed(&format!("{name}.b"), &[fan_out], 0.0);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.fixed(&format!("{name}.g"), &[d], 1.0);
        self.fixed(&format!("{name}.b"), &[d], 0.0);
    }
}

/// Hands out bound parameter vars in creation order.
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

fn linear(tape: &mut Tape, x: Var, c: &mut Cursor) -> Result<Var> {
    let (w, b) = (c.next(), c.next());
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

fn layer_norm(tape: &mut Tape, x: Var, c: &mut Cursor) -> Result<Var> {
    let (g, b) = (c.next(), c.next());
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Bilinear interpolation matrix `[dst², src²]` between square grids, half-pixel centers.
pub fn grid_interpolation(src: usize, dst: usize) -> Vec<f64> {
    let axis = |o: usize| -> [(usize, f64); 2] {
        let f = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let w = f - i0 as f64;
        [(i0, 1.0 - w), (i1, w)]
    };
    let mut m = vec![0.0; dst * dst * src * src];
    for oy in 0..dst {
        for ox in 0..dst {
            let row = oy * dst + ox;
            for (iy, wy) in axis(oy) {
                for (ix, wx) in axis(ox) {
                    m[row * src * src + iy * src + ix] += wy * wx;
                }
            }
        }
    }
    m
}

/// Non-overlapping `p×p` patches flattened as `(dy, dx, c)`: `[B·T, p·p·3]`.
fn patchify(images: &[&Image], p: usize) -> Vec<f64> {
    let side = images[0].height();
    let g = side / p;
    let mut out = Vec::with_capacity(images.len() * side * side * CHANNELS);
    for img in images {
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    let o = ((gy * p + dy) * side + gx * p) * CHANNELS;
                    out.extend_from_slice(&img.data()[o..o + p * CHANNELS]);
                }
            }
        }
    }
    out
}

/// Adaptive average pooling to a `g×g` grid: `[B, g·g·3]`.
fn avg_pool(images: &[&Image], g: usize) -> Vec<f64> {
    let side = images[0].height();
    let mut out = Vec::with_capacity(images.len() * g * g * CHANNELS);
    for img in images {
        for cy in 0..g {
            let (y0, y1) = (cy * side / g, ((cy + 1) * side).div_ceil(g));
            for cx in 0..g {
                let (x0, x1) = (cx * side / g, ((cx + 1) * side).div_ceil(g));
                let mut acc = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = img.pixel(y, x);
                        for c in 0..CHANNELS {
                            acc[c] += px[c];
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                out.extend(acc.iter().map(|v| v / n));
            }
        }
    }
    out
}

impl Network {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate("model")?;
        let mut b = Builder {
            params: Vec::new(),
            std: cfg.init_std,
            rng,
        };
        let d = cfg.feature_dim();
        match cfg.encoder {
            EncoderKind::TinyVit => {
                let grid = cfg.image_size / cfg.patch;
                let hidden = cfg.mlp_ratio * d;
                b.linear("patch", cfg.patch * cfg.patch * CHANNELS, d);
                b.embedding("cls", &[d]);
                b.embedding("cls_pos", &[d]);
                b.embedding("pos", &[grid * grid, d]);
                for i in 0..cfg.depth {
                    b.norm(&format!("block{i}.ln1"), d);
                    b.linear(&format!("block{i}.qkv"), d, 3 * d);
                    b.linear(&format!("block{i}.proj"), d, d);
                    b.norm(&format!("block{i}.ln2"), d);
                    b.linear(&format!("block{i}.fc1"), d, hidden);
                    b.linear(&format!("block{i}.fc2"), hidden, d);
                }
                b.norm("norm", d);
            }
            EncoderKind::Mlp => {
                let mut fan_in = cfg.pool_grid * cfg.pool_grid * CHANNELS;
                for (i, &w) in cfg.mlp_hidden.iter().enumerate() {
                    b.linear(&format!("enc{i}"), fan_in, w);
                    fan_in = w;
                }
            }
        }
        b.linear("head.fc1", d, cfg.head_width());
        b.linear("head.fc2", cfg.head_width(), cfg.out_dim);
        Ok(Self {
            cfg: cfg.clone(),
            params: b.params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Zeroes the last head layer so every logit is exactly zero.
    pub fn zero_head(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with("head.fc2")) {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Registers every parameter on the tape, as gradient leaves if `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(&p.value.clone().with_requires_grad(true))
                } else {
                    tape.constant(&p.value)
                }
            })
            .collect()
    }

    /// Encodes a batch of equally sized square views (already normalized).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], images: &[&Image]) -> Result<Forward> {
        let Some(first) = images.first() else {
            return Err(Error::Dimension("forward on an empty batch".into()));
        };
        let side = first.height();
        if images.iter().any(|im| im.height() != side || im.width() != side) {
            return Err(Error::Dimension("forward batch mixes view sizes".into()));
        }
        self.cfg.check_input_size(side)?;
        if vars.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let mut c = Cursor { vars, pos: 0 };
        let features = match self.cfg.encoder {
            EncoderKind::TinyVit => self.vit_features(tape, &mut c, images)?,
            EncoderKind::Mlp => {
                let g = self.cfg.pool_grid;
                let mut x = tape.constant_raw(vec![images.len(), g * g * CHANNELS], avg_pool(images, g))?;
                for _ in &self.cfg.mlp_hidden {
                    let y = linear(tape, x, &mut c)?;
                    x = tape.gelu(y);
                }
                x
            }
        };
        let h = linear(tape, features, &mut c)?;
        let h = tape.gelu(h);
        let logits = linear(tape, h, &mut c)?;
        debug_assert_eq!(c.pos, vars.len());
        Ok(Forward { features, logits })
    }

    fn vit_features(&self, tape: &mut Tape, c: &mut Cursor, images: &[&Image]) -> Result<Var> {
        let cfg = &self.cfg;
        let (bsz, d, p) = (images.len(), cfg.dim, cfg.patch);
        let side = images[0].height();
        let grid = side / p;
        let tokens = grid * grid;
        let patches = tape.constant_raw(vec![bsz * tokens, p * p * CHANNELS], patchify(images, p))?;
        let x = linear(tape, patches, c)?;
        let x = tape.reshape(x, &[bsz, tokens, d])?;
        let (cls, cls_pos, pos) = (c.next(), c.next(), c.next());
        let ref_grid = cfg.image_size / p;
        let pos = if grid == ref_grid {
            pos
        } else {
            let m = tape.constant_raw(vec![tokens, ref_grid * ref_grid], grid_interpolation(ref_grid, grid))?;
            tape.matmul(m, pos)?
        };
        let x = tape.add_broadcast(x, pos)?;
        let cls = tape.add(cls, cls_pos)?;
        let mut x = tape.prepend_token(x, cls)?;
        let t1 = tokens + 1;
        let (heads, dh) = (cfg.heads, d / cfg.heads);
        for _ in 0..cfg.depth {
            let flat = tape.reshape(x, &[bsz * t1, d])?;
            let h = layer_norm(tape, flat, c)?;
            let qkv = linear(tape, h, c)?;
            let qkv = tape.reshape(qkv, &[bsz, t1, 3, heads, dh])?;
            let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
            let split = |tape: &mut Tape, i: usize| -> Result<Var> {
                let s = tape.slice_rows(qkv, i, 1)?;
                tape.reshape(s, &[bsz * heads, t1, dh])
            };
            let (q, k, v) = (split(tape, 0)?, split(tape, 1)?, split(tape, 2)?);
            let scores = tape.batch_matmul(q, k, true)?;
            let attn = tape.softmax_temp(scores, (dh as f64).sqrt())?;
            let o = tape.batch_matmul(attn, v, false)?;
            let o = tape.reshape(o, &[bsz, heads, t1, dh])?;
            let o = tape.permute(o, &[0, 2, 1, 3])?;
            let o = tape.reshape(o, &[bsz * t1, d])?;
            let o = linear(tape, o, c)?;
            let flat = tape.add(flat, o)?;
            let h = layer_norm(tape, flat, c)?;
            let h = linear(tape, h, c)?;
            let h = tape.gelu(h);
            let h = linear(tape, h, c)?;
            let flat = tape.add(flat, h)?;
            x = tape.reshape(flat, &[bsz, t1, d])?;
        }
        let flat = tape.reshape(x, &[bsz * t1, d])?;
        let normed = layer_norm(tape, flat, c)?;
        let normed = tape.reshape(normed, &[bsz, t1, d])?;
        match cfg.pool {
            FeaturePool::Cls => tape.take_token(normed, 0),
            FeaturePool::Mean => {
                let mut w = vec![1.0 / tokens as f64; bsz * t1];
                for b in 0..bsz {
                    w[b * t1] = 0.0;
                }
                let w = tape.constant_raw(vec![bsz, 1, t1], w)?;
                let pooled = tape.batch_matmul(w, normed, false)?;
                tape.reshape(pooled, &[bsz, d])
            }
        }
    }

    /// Forward without gradients; returns `(features, logits)` as `[B·d]`, `[B·K]` row-major.
    pub fn infer(&self, images: &[&Image]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, images)?;
        tape.check_finite(out.logits, "inference logits")?;
        Ok((tape.value(out.features).to_vec(), tape.value(out.logits).to_vec()))
    }

    fn same_structure(&self, other: &Network) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// `softmax((g − c)/τ_t)` row-wise, or without `c` when centering is off.
pub fn teacher_probs(logits: &[f64], k: usize, tau_t: f64, center: Option<&[f64]>) -> Result<Vec<f64>> {
    if !(tau_t > 0.0) {
        return Err(Error::Parameter(format!("teacher temperature must be > 0, got {tau_t}")));
    }
    if k == 0 || logits.len() % k != 0 {
        return Err(Error::Dimension(format!("{} logits are not rows of {k}", logits.len())));
    }
    match center {
        None => Ok(softmax_rows(logits, k, tau_t)),
        Some(c) => {
            if c.len() != k {
                return Err(Error::Dimension(format!("center has {} entries, K is {k}", c.len())));
            }
            let shifted: Vec<f64> = logits.chunks_exact(k).flat_map(|r| r.iter().zip(c).map(|(g, c)| g - c)).collect();
            Ok(softmax_rows(&shifted, k, tau_t))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacher {
    pub student: Network,
    pub teacher: Network,
    pub center: Vec<f64>,
}

impl StudentTeacher {
    /// Teacher starts as an exact copy of the student.
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let student = Network::new(cfg, rng)?;
        Ok(Self {
            teacher: student.clone(),
            center: vec![0.0; cfg.out_dim],
            student,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.student.config()
    }

    /// `p_t ← m·p_t + (1−m)·p_s` elementwise.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Parameter(format!("EMA momentum {m} outside [0, 1]")));
        }
        if !self.student.same_structure(&self.teacher) {
            return Err(Error::Usage("student and teacher structures differ".into()));
        }
        for (t, s) in self.teacher.params.iter_mut().zip(&self.student.params) {
            for (pt, &ps) in t.value.data_mut().iter_mut().zip(s.value.data()) {
                *pt = m * *pt + (1.0 - m) * ps;
            }
        }
        Ok(())
    }

    /// `c ← μ·c + (1−μ)·mean_rows(teacher logits)`.
    pub fn update_center(&mut self, teacher_logits: &[f64]) -> Result<()> {
        let k = self.center.len();
        if teacher_logits.is_empty() || teacher_logits.len() % k != 0 {
            return Err(Error::Dimension(format!("{} logits are not rows of {k}", teacher_logits.len())));
        }
        let rows = (teacher_logits.len() / k) as f64;
        let mut mean = vec![0.0; k];
        for r in teacher_logits.chunks_exact(k) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let mu = self.config().center_momentum;
        for (c, m) in self.center.iter_mut().zip(mean) {
            *c = mu * *c + (1.0 - mu) * m / rows;
        }
        Ok(())
    }

    pub fn teacher_probs(&self, logits: &[f64], tau_t: f64) -> Result<Vec<f64>> {
        let center = self.config().centering.then_some(self.center.as_slice());
        teacher_probs(logits, self.center.len(), tau_t, center)
    }

    /// Largest absolute parameter difference between teacher and student.
    pub fn max_divergence(&self) -> f64 {
        self.teacher
            .params
            .iter()
            .zip(&self.student.params)
            .flat_map(|(t, s)| t.value.data().iter().zip(s.value.data()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

/// Random perturbation of every parameter, for tests and demos that need a non-trivial teacher gap.
pub fn perturb(net: &mut Network, scale: f64, rng: &mut Rng) {
    for p in &mut net.params {
        for v in p.value.data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}
