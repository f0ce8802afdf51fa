//! Positive (teacher-to-student cross-entropy) and negative (uniform-target)
//! objectives, in a plain reference form and in a tape form for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::negatives::NegativeSource;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the negative term for a single negative source.
    pub lambda: f64,
    /// Weights used when in-distribution and auxiliary negatives are combined.
    pub lambda_in: f64,
    pub lambda_aux: f64,
    pub tau_s: f64,
    /// Teacher temperature decreases linearly from start to end within each epoch.
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_in: 0.5,
            lambda_aux: 0.5,
            tau_s: 0.1,
            tau_t_start: 0.055,
            tau_t_end: 0.01,
            clamp_eps: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("{path}.{f}"), m));
        for (name, v) in [("lambda", self.lambda), ("lambda_in", self.lambda_in), ("lambda_aux", self.lambda_aux)] {
            if !(v >= 0.0) || !v.is_finite() {
                return err(name, format!("must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.tau_s > 0.0) {
            return err("tau_s", format!("must be positive, got {}", self.tau_s));
        }
        if !(self.tau_t_end > 0.0) {
            return err("tau_t_end", format!("must be positive, got {}", self.tau_t_end));
        }
        if self.tau_t_start < self.tau_t_end {
            return err("tau_t_start", "must be >= tau_t_end".into());
        }
        if self.tau_t_start >= self.tau_s {
            return err(
                "tau_t_start",
                format!("teacher temperature {} must be below tau_s {}", self.tau_t_start, self.tau_s),
            );
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1.0) {
            return err("clamp_eps", "must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Weight of each negative group, in the order of `source.groups()`.
    pub fn negative_weights(&self, source: NegativeSource) -> Vec<f64> {
        match source {
            NegativeSource::Combined => vec![self.lambda_in, self.lambda_aux],
            _ => vec![self.lambda],
        }
    }

    pub fn negatives_active(&self, source: NegativeSource) -> bool {
        self.negative_weights(source).iter().any(|&w| w > 0.0)
    }
}

fn check_rows(rows: &[&[f64]], k: usize, what: &str) -> Result<()> {
    if k == 0 {
        return Err(Error::Dimension("K must be positive".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(Error::Dimension(format!("{what} row has {} entries, K is {k}", r.len())));
    }
    Ok(())
}

/// `−Σ_g Σ_{v≠g} Σ_i p_t^i(g)·log(max(p_s^i(v), eps))` for one sample.
/// Teacher row `g` and student row `g` come from the same global view.
pub fn loss_pos(p_t: &[&[f64]], p_s: &[&[f64]], eps: f64) -> Result<f64> {
    let k = p_t.first().map_or(0, |r| r.len());
    check_rows(p_t, k, "teacher")?;
    check_rows(p_s, k, "student")?;
    if p_t.len() > p_s.len() {
        return Err(Error::Dimension(format!(
            "{} teacher views but only {} student views",
            p_t.len(),
            p_s.len()
        )));
    }
    let mut total = 0.0;
    for (g, t) in p_t.iter().enumerate() {
        for (v, s) in p_s.iter().enumerate() {
            if v == g {
                continue;
            }
            total -= t.iter().zip(s.iter()).map(|(a, b)| a * b.max(eps).ln()).sum::<f64>();
        }
    }
    Ok(total)
}

/// `−(1/K) Σ_v Σ_i log(max(p_s^i(v), eps))`.
pub fn loss_neg(p_s_neg: &[&[f64]], k: usize, eps: f64) -> Result<f64> {
    check_rows(p_s_neg, k, "negative")?;
    let s: f64 = p_s_neg.iter().flat_map(|r| r.iter()).map(|p| p.max(eps).ln()).sum();
    Ok(-s / k as f64)
}

/// `lp + Σ λ_j·ln_j`.
pub fn loss_total(lp: f64, negs: &[(f64, f64)]) -> Result<f64> {
    let mut t = lp;
    for &(lambda, ln) in negs {
        if !(lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
        }
        t += lambda * ln;
    }
    Ok(t)
}

/// Entropy `Σ_pairs H(p_t(g))` over the same pairs `loss_pos` visits, a lower bound for it.
pub fn pos_entropy_bound(p_t: &[&[f64]], n_student: usize) -> f64 {
    let h: f64 = p_t
        .iter()
        .map(|t| -t.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    h * (n_student - 1) as f64
}

/// Tape form of the positive loss averaged over the batch.
///
/// `logp_groups` holds student log-probabilities for each view group laid out
/// view-major (`[views·B, K]`); `global_group` is the group whose first
/// `teacher.len()` views are the teacher's globals. `teacher[g]` is `[B·K]`.
pub fn pos_loss_tape(
    tape: &mut Tape,
    logp_groups: &[(Var, usize)],
    global_group: usize,
    teacher: &[Vec<f64>],
    batch: usize,
) -> Result<Var> {
    let row = teacher.first().map_or(0, Vec::len);
    if row == 0 || teacher.iter().any(|t| t.len() != row) {
        return Err(Error::Dimension("teacher probabilities are empty or ragged".into()));
    }
    let mut all = vec![0.0; row];
    for t in teacher {
        for (a, b) in all.iter_mut().zip(t) {
            *a += b;
        }
    }
    let mut terms = Vec::with_capacity(logp_groups.len());
    for (gi, &(logp, views)) in logp_groups.iter().enumerate() {
        if tape.value(logp).len() != views * row {
            return Err(Error::Dimension(format!(
                "view group {gi} has {} values, expected {views}x{row}",
                tape.value(logp).len()
            )));
        }
        let mut w = Vec::with_capacity(views * row);
        for v in 0..views {
            if gi == global_group && v < teacher.len() {
                let mut others = vec![0.0; row];
                for (_, t) in teacher.iter().enumerate().filter(|&(g, _)| g != v) {
                    for (d, x) in others.iter_mut().zip(t) {
                        *d += x;
                    }
                }
                w.extend(others);
            } else {
                w.extend_from_slice(&all);
            }
        }
        let wv = tape.constant_raw(tape.shape(logp).to_vec(), w)?;
        let prod = tape.mul(logp, wv)?;
        terms.push(tape.sum(prod));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.mul_scalar(total, -1.0 / batch as f64))
}

/// Tape form of the negative loss averaged over the batch; `logps` are `[rows, K]`.
pub fn neg_loss_tape(tape: &mut Tape, logps: &[Var], k: usize, batch: usize) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &lp in logps {
        if tape.shape(lp).last() != Some(&k) {
            return Err(Error::Dimension(format!("negative logits {:?} for K={k}", tape.shape(lp))));
        }
        let s = tape.sum(lp);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("no negative views".into()))?;
    Ok(tape.mul_scalar(total, -1.0 / (k * batch) as f64))
}
