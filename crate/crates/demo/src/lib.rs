//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations: render a synthetic image next to a shifted negative,
//! trace the similarity score against query angle for a temperature, and
//! build an ROC curve for two Gaussian score populations.

use negdistill::data::{synth_dataset, SynthKind, SynthParams};
use negdistill::eval::{auroc, ood_score, FeatureBank};
use negdistill::image::Image;
use negdistill::negatives::ShiftPipeline;
use negdistill::rng::{stream, Stream};
use rand::Rng as _;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn synth_kind(name: &str) -> Result<SynthKind, String> {
    match name {
        "stripes" => Ok(SynthKind::Stripes),
        "blobs" => Ok(SynthKind::Blobs),
        "checker" => Ok(SynthKind::Checker),
        "noise" => Ok(SynthKind::Noise),
        other => Err(format!("unknown image kind `{other}`")),
    }
}

/// RGBA bytes, row-major, for a canvas `ImageData`.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height() * img.width() * 4);
    for px in img.data().chunks_exact(3) {
        for &v in px {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// The source image followed by its shifted copy, both as RGBA of `size × size`.
pub fn shift_pair(kind: &str, shift: &str, size: usize, seed: u64) -> Result<(Vec<u8>, Vec<u8>), String> {
    let kind = synth_kind(kind)?;
    let ds = synth_dataset(kind, 1, size, seed, &SynthParams::default()).map_err(|e| e.to_string())?;
    let img = &ds.images()[0];
    let pipeline = ShiftPipeline::parse(shift, 4, 0.25).map_err(|e| e.to_string())?;
    let (shifted, _) = pipeline
        .apply(img, &mut stream(seed, Stream::Demo, &[0]))
        .map_err(|e| e.to_string())?;
    Ok((to_rgba(img), to_rgba(&shifted)))
}

#[wasm_bindgen]
pub fn shifted_image(kind: &str, shift: &str, size: usize, seed: u64) -> Result<Vec<u8>, JsValue> {
    shift_pair(kind, shift, size, seed).map(|(_, b)| b).map_err(js_err)
}

#[wasm_bindgen]
pub fn source_image(kind: &str, size: usize, seed: u64) -> Result<Vec<u8>, JsValue> {
    shift_pair(kind, "identity", size, seed).map(|(a, _)| a).map_err(js_err)
}

/// Score of a unit query at each of `samples` angles in `[0, 2π)` against a
/// bank of 2-D unit vectors at `bank_angles` (radians).
pub fn score_curve(bank_angles: &[f64], tau: f64, samples: usize) -> Result<Vec<f64>, String> {
    let rows: Vec<f64> = bank_angles.iter().flat_map(|a| [a.cos(), a.sin()]).collect();
    let bank = FeatureBank::new(&rows, 2, None).map_err(|e| e.to_string())?;
    (0..samples)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / samples as f64;
            ood_score(&[t.cos(), t.sin()], &bank, tau).map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen]
pub fn score_vs_angle(bank_angles: &[f64], tau: f64, samples: usize) -> Result<Vec<f64>, JsValue> {
    score_curve(bank_angles, tau, samples).map_err(js_err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auroc: f64,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// ROC with OOD as the positive class; one point per distinct threshold.
pub fn roc(scores_out: &[f64], scores_in: &[f64]) -> Result<Roc, String> {
    let area = auroc(scores_out, scores_in).map_err(|e| e.to_string())?;
    let mut all: Vec<(f64, bool)> = scores_out
        .iter()
        .map(|&s| (s, true))
        .chain(scores_in.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (scores_out.len() as f64, scores_in.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        fpr.push(fp / nn);
        tpr.push(tp / np);
    }
    Ok(Roc { auroc: area, fpr, tpr })
}

/// Draws `n` in-distribution scores from N(0, 1) and `n` OOD scores from
/// N(`separation`, 1), then returns `[auroc, fpr..., tpr...]`.
#[wasm_bindgen]
pub fn gaussian_roc(separation: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    let mut rng = stream(seed, Stream::Demo, &[1]);
    let mut draw = |shift: f64| -> Vec<f64> { (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect() };
    let inn = draw(0.0);
    let out = draw(separation);
    let r = roc(&out, &inn).map_err(js_err)?;
    let mut flat = vec![r.auroc];
    flat.extend(r.fpr);
    flat.extend(r.tpr);
    Ok(flat)
}
