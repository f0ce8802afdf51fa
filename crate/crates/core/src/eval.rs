//! Feature-bank scoring, AUROC, k-NN accuracy and the occupied soft-class count.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_view, IMAGENET_MEAN, IMAGENET_STD};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Network;
use crate::rng::{stream, Stream};
use crate::tensor::softmax_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Temperature of the similarity score.
    pub score_tau: f64,
    pub knn_k: usize,
    /// Keep at most this many bank rows, drawn uniformly with the run seed.
    pub bank_subsample: Option<usize>,
    /// Images per inference batch.
    pub chunk: usize,
    /// Teacher temperature used for soft-class probabilities in diagnostics.
    pub probs_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_tau: 0.04,
            knn_k: 10,
            bank_subsample: None,
            chunk: 64,
            probs_tau: 0.01,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.score_tau > 0.0) {
            return Err(Error::config(format!("{path}.score_tau"), "must be positive"));
        }
        if self.knn_k == 0 {
            return Err(Error::config(format!("{path}.knn_k"), "must be positive"));
        }
        if self.bank_subsample == Some(0) {
            return Err(Error::config(format!("{path}.bank_subsample"), "must be positive"));
        }
        if self.chunk == 0 {
            return Err(Error::config(format!("{path}.chunk"), "must be positive"));
        }
        if !(self.probs_tau > 0.0) {
            return Err(Error::config(format!("{path}.probs_tau"), "must be positive"));
        }
        Ok(())
    }
}

/// Per-image features and logits of a network on deterministic evaluation views.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub dim: usize,
    pub k: usize,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Resize to the model's global size, normalize, and encode in chunks.
pub fn encode_dataset(net: &Network, ds: &ImageDataset, chunk: usize) -> Result<Encoded> {
    let size = net.config().image_size;
    let views: Vec<Image> = ds
        .images()
        .iter()
        .map(|im| eval_view(im, size, IMAGENET_MEAN, IMAGENET_STD))
        .collect();
    let mut features = Vec::new();
    let mut logits = Vec::new();
    for part in views.chunks(chunk.max(1)) {
        let refs: Vec<&Image> = part.iter().collect();
        let (f, g) = net.infer(&refs)?;
        features.extend(f);
        logits.extend(g);
    }
    Ok(Encoded {
        dim: net.config().feature_dim(),
        k: net.config().out_dim,
        features,
        logits,
    })
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// ℓ2-normalized in-distribution training features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    rows: Vec<f64>,
    labels: Option<Vec<u32>>,
}

impl FeatureBank {
    pub fn new(features: &[f64], dim: usize, labels: Option<Vec<u32>>) -> Result<Self> {
        if dim == 0 || features.is_empty() || features.len() % dim != 0 {
            return Err(Error::Dimension(format!("{} values are not rows of {dim}", features.len())));
        }
        let m = features.len() / dim;
        if labels.as_ref().is_some_and(|l| l.len() != m) {
            return Err(Error::Dimension("label count differs from bank size".into()));
        }
        let mut rows = Vec::with_capacity(features.len());
        for (i, f) in features.chunks_exact(dim).enumerate() {
            let u = unit(f).ok_or_else(|| Error::Numerical(format!("bank feature {i} has zero or non-finite norm")))?;
            rows.extend(u);
        }
        Ok(Self { dim, rows, labels })
    }

    pub fn from_encoded(enc: &Encoded, labels: Option<Vec<u32>>) -> Result<Self> {
        Self::new(&enc.features, enc.dim, labels)
    }

    /// Uniform seeded subsample of `max` rows (all rows if `max >= len`), order preserved.
    pub fn subsample(&self, max: usize, seed: u64) -> Self {
        if max >= self.len() {
            return self.clone();
        }
        let mut idx = sample(&mut stream(seed, Stream::BankSubsample, &[]), self.len(), max).into_vec();
        idx.sort_unstable();
        Self {
            dim: self.dim,
            rows: idx.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    fn cosines(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim {
            return Err(Error::Dimension(format!("feature of width {} for bank width {}", f.len(), self.dim)));
        }
        let u = unit(f).ok_or_else(|| Error::Numerical("test feature has zero or non-finite norm".into()))?;
        Ok(self.rows.chunks_exact(self.dim).map(|r| r.iter().zip(&u).map(|(a, b)| a * b).sum()).collect())
    }
}

/// `−(1/M) Σ_m exp(cos(f, f_m)/τ)`; larger means more anomalous.
pub fn ood_score(f: &[f64], bank: &FeatureBank, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("score temperature must be > 0, got {tau}")));
    }
    let cos = bank.cosines(f)?;
    Ok(-cos.iter().map(|c| (c / tau).exp()).sum::<f64>() / cos.len() as f64)
}

pub fn ood_scores(enc: &Encoded, bank: &FeatureBank, tau: f64) -> Result<Vec<f64>> {
    (0..enc.len()).map(|i| ood_score(enc.feature(i), bank, tau)).collect()
}

/// Probability that an out-score exceeds an in-score, ties counting ½, via mid-ranks.
pub fn auroc(scores_out: &[f64], scores_in: &[f64]) -> Result<f64> {
    if scores_out.is_empty() || scores_in.is_empty() {
        return Err(Error::Usage("auroc needs non-empty score lists".into()));
    }
    if scores_out.iter().chain(scores_in).any(|s| s.is_nan()) {
        return Err(Error::Numerical("auroc input contains NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_out
        .iter()
        .map(|&s| (s, true))
        .chain(scores_in.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank sums in doubled units keep everything integral
    let mut rank2_out: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_out += mid2 * all[i..=j].iter().filter(|x| x.1).count() as u64;
        i = j + 1;
    }
    let (n_out, n_in) = (scores_out.len() as u64, scores_in.len() as u64);
    let u2 = rank2_out - n_out * (n_out + 1);
    Ok(u2 as f64 / (2 * n_out * n_in) as f64)
}

/// Majority vote among the `k` most cosine-similar bank rows; ties go to the
/// label with the larger summed similarity, then the smaller label.
pub fn knn_predict(bank: &FeatureBank, f: &[f64], k: usize) -> Result<u32> {
    let labels = bank.labels().ok_or_else(|| Error::Usage("k-NN needs a labeled bank".into()))?;
    if k == 0 || k > bank.len() {
        return Err(Error::Parameter(format!("k = {k} with a bank of {}", bank.len())));
    }
    let cos = bank.cosines(f)?;
    let mut order: Vec<usize> = (0..cos.len()).collect();
    order.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
    let mut votes: Vec<(u32, usize, f64)> = Vec::new();
    for &i in &order[..k] {
        match votes.iter_mut().find(|v| v.0 == labels[i]) {
            Some(v) => {
                v.1 += 1;
                v.2 += cos[i];
            }
            None => votes.push((labels[i], 1, cos[i])),
        }
    }
    votes.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    Ok(votes[0].0)
}

pub fn knn_accuracy(bank: &FeatureBank, test: &Encoded, labels: &[u32], k: usize) -> Result<f64> {
    if labels.len() != test.len() || test.is_empty() {
        return Err(Error::Dimension(format!("{} labels for {} test features", labels.len(), test.len())));
    }
    let mut hits = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if knn_predict(bank, test.feature(i), k)? == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Occupancy {
    pub count: usize,
    pub mask: Vec<bool>,
    pub mean: Vec<f64>,
}

/// Class `i` is occupied iff its mean probability over the rows exceeds `1/K`.
pub fn occupied_classes(probs: &[f64], k: usize) -> Result<Occupancy> {
    if k == 0 || probs.is_empty() || probs.len() % k != 0 {
        return Err(Error::Dimension(format!("{} probabilities are not rows of {k}", probs.len())));
    }
    let n = (probs.len() / k) as f64;
    let mut mean = vec![0.0; k];
    for row in probs.chunks_exact(k) {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let thr = 1.0 / k as f64;
    let mask: Vec<bool> = mean.iter().map(|&m| m > thr).collect();
    Ok(Occupancy {
        count: mask.iter().filter(|&&b| b).count(),
        mask,
        mean,
    })
}

/// Soft-class probabilities of encoded logits (no centering).
pub fn soft_class_probs(enc: &Encoded, tau: f64) -> Vec<f64> {
    softmax_rows(&enc.logits, enc.k, tau)
}
