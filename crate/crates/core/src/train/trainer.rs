use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{neg_loss_tape, pos_loss_tape, LossConfig};
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{Schedule, ScheduleValues};
use crate::augment::{make_views, AugmentConfig, ViewSet};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{ModelConfig, Network, StudentTeacher};
use crate::negatives::{NegativeConfig, NegativeSampler, NegativeViews, ShiftPipeline};
use crate::rng::{derive_seed, stream, Stream};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub warmup_epochs: u64,
    /// Peak learning rate is `base_lr · batch_size / 256`.
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_grad: f64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            warmup_epochs: 2,
            base_lr: 0.004,
            min_lr: 1e-6,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_grad: 3.0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::config(format!("{path}.{f}"), m));
        if self.epochs == 0 {
            return err("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return err("warmup_epochs", "cannot exceed epochs");
        }
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) {
            return err("base_lr", "learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.weight_decay_end >= 0.0) {
            return err("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1", "Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps", "must be positive");
        }
        if !(self.clip_grad >= 0.0) {
            return err("clip_grad", "must be non-negative");
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Everything that shapes a training run apart from the data and the seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub negatives: NegativeConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate("model")?;
        self.augment.validate("augment")?;
        self.negatives.validate("negatives")?;
        self.loss.validate("loss")?;
        self.train.validate("train")?;
        if self.augment.global_size() != self.model.image_size {
            return Err(Error::config(
                "augment.global1.output_size",
                format!(
                    "global views are {}px but the model expects {}px",
                    self.augment.global_size(),
                    self.model.image_size
                ),
            ));
        }
        for (field, size) in [
            ("augment.global1.output_size", self.augment.global_size()),
            ("augment.local.output_size", self.augment.local_size()),
        ] {
            self.model
                .check_input_size(size)
                .map_err(|e| Error::config(field, e.to_string()))?;
        }
        Ok(())
    }
}

pub struct TrainData<'a> {
    pub in_dist: &'a ImageDataset,
    pub auxiliary: Option<&'a ImageDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub tau_t: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,epoch,loss_pos,loss_neg,loss_total,lr,tau_t";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss_pos, self.loss_neg, self.loss_total, self.lr, self.tau_t
        )
    }
}

/// Views for one batch: positives per sample, and negative groups per sample when active.
#[derive(Debug, Clone)]
pub struct BatchViews {
    pub step: u64,
    pub epoch: u64,
    pub indices: Vec<usize>,
    pub positives: Vec<ViewSet>,
    pub negatives: Vec<Vec<NegativeViews>>,
    pub schedule: ScheduleValues,
}

/// Loss nodes of one batch on a tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub pos: Var,
    /// One entry per negative group (empty when negatives are inactive).
    pub negs: Vec<Var>,
    pub total: Var,
    pub teacher_vars: Vec<Var>,
    /// Raw teacher logits of the global views, view-major.
    pub teacher_logits: Vec<f64>,
}

pub struct Trainer {
    setup: TrainSetup,
    seed: u64,
    shifts: ShiftPipeline,
    n_train: usize,
    schedule: Schedule,
    pub state: StudentTeacher,
    pub opt: AdamW,
    /// Number of completed steps.
    pub step: u64,
}

fn view_major<'a>(sets: impl Iterator<Item = &'a ViewSet> + Clone, count: usize, globals: bool) -> Vec<&'a Image> {
    let mut out = Vec::new();
    for v in 0..count {
        for s in sets.clone() {
            let list = if globals { &s.globals } else { &s.locals };
            out.push(&list[v].image);
        }
    }
    out
}

impl Trainer {
    pub fn new(setup: TrainSetup, seed: u64, n_train: usize) -> Result<Self> {
        setup.validate()?;
        let t = &setup.train;
        if n_train < t.batch_size {
            return Err(Error::config(
                "train.batch_size",
                format!("batch size {} exceeds the {n_train} training images", t.batch_size),
            ));
        }
        let steps_per_epoch = (n_train / t.batch_size) as u64;
        let schedule = Schedule::new(
            steps_per_epoch,
            t.epochs,
            t.warmup_epochs,
            t.peak_lr(),
            t.min_lr,
            (t.weight_decay, t.weight_decay_end),
            (setup.loss.tau_t_start, setup.loss.tau_t_end),
        )?;
        let state = StudentTeacher::new(&setup.model, &mut stream(seed, Stream::Init, &[]))?;
        let opt = AdamW::new(state.student.params(), t.beta1, t.beta2, t.adam_eps);
        Ok(Self {
            shifts: setup.negatives.pipeline()?,
            setup,
            seed,
            n_train,
            schedule,
            state,
            opt,
            step: 0,
        })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.schedule.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn negatives_active(&self) -> bool {
        self.setup.loss.negatives_active(self.setup.negatives.source)
    }

    /// Sample indices of a step: a per-epoch shuffle, incomplete tail batch dropped.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch();
        let i = (step % self.steps_per_epoch()) as usize;
        let mut perm: Vec<usize> = (0..self.n_train).collect();
        perm.shuffle(&mut stream(self.seed, Stream::Shuffle, &[epoch]));
        let b = self.setup.train.batch_size;
        perm[i * b..(i + 1) * b].to_vec()
    }

    pub fn prepare(&self, step: u64, data: &TrainData) -> Result<BatchViews> {
        if data.in_dist.len() != self.n_train {
            return Err(Error::Usage(format!(
                "trainer was built for {} images, got {}",
                self.n_train,
                data.in_dist.len()
            )));
        }
        let epoch = step / self.steps_per_epoch();
        let indices = self.batch_indices(step);
        let images = data.in_dist.images();
        let positives = indices
            .iter()
            .map(|&i| make_views(&images[i], &self.setup.augment, &mut stream(self.seed, Stream::PositiveViews, &[epoch, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let negatives = if self.negatives_active() {
            let sampler = NegativeSampler::new(
                data.in_dist,
                data.auxiliary,
                self.setup.negatives.source,
                &self.shifts,
                &self.setup.augment,
            )?;
            indices
                .iter()
                .map(|&i| sampler.sample(i, &mut stream(self.seed, Stream::NegativeViews, &[epoch, i as u64])))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(BatchViews {
            step,
            epoch,
            indices,
            positives,
            negatives,
            schedule: self.schedule.at(step),
        })
    }

    fn student_logp(&self, net: &Network, tape: &mut Tape, vars: &[Var], images: &[&Image]) -> Result<Var> {
        let out = net.forward(tape, vars, images)?;
        let p = tape.softmax_temp(out.logits, self.setup.loss.tau_s)?;
        tape.log_clamped(p, self.setup.loss.clamp_eps)
    }

    /// Records teacher and student forwards and the loss for `batch`; `student_vars`
    /// must come from `net.bind(tape, ..)`.
    pub fn loss_on_tape(&self, net: &Network, tape: &mut Tape, student_vars: &[Var], batch: &BatchViews) -> Result<LossVars> {
        let b = batch.indices.len();
        let n_global = self.setup.augment.n_global;
        let n_local = self.setup.augment.n_local;
        let k = self.setup.model.out_dim;

        let globals = view_major(batch.positives.iter(), n_global, true);
        let teacher_vars = self.state.teacher.bind(tape, false);
        let t_out = self.state.teacher.forward(tape, &teacher_vars, &globals)?;
        let teacher_logits = tape.value(t_out.logits).to_vec();
        let probs = self.state.teacher_probs(&teacher_logits, batch.schedule.tau_t)?;
        let teacher: Vec<Vec<f64>> = probs.chunks_exact(b * k).map(<[f64]>::to_vec).collect();

        let mut groups = vec![(self.student_logp(net, tape, student_vars, &globals)?, n_global)];
        if n_local > 0 {
            let locals = view_major(batch.positives.iter(), n_local, false);
            groups.push((self.student_logp(net, tape, student_vars, &locals)?, n_local));
        }
        let pos = pos_loss_tape(tape, &groups, 0, &teacher, b)?;

        let mut negs = Vec::new();
        let mut total = pos;
        if !batch.negatives.is_empty() {
            let weights = self.setup.loss.negative_weights(self.setup.negatives.source);
            for (j, &w) in weights.iter().enumerate() {
                let sets: Vec<&ViewSet> = batch.negatives.iter().map(|n| &n[j].views).collect();
                let mut logps = Vec::new();
                let g = view_major(sets.iter().copied(), sets[0].globals.len(), true);
                logps.push(self.student_logp(net, tape, student_vars, &g)?);
                if !sets[0].locals.is_empty() {
                    let l = view_major(sets.iter().copied(), sets[0].locals.len(), false);
                    logps.push(self.student_logp(net, tape, student_vars, &l)?);
                }
                let ln = neg_loss_tape(tape, &logps, k, b)?;
                let weighted = tape.mul_scalar(ln, w);
                total = tape.add(total, weighted)?;
                negs.push(ln);
            }
        }
        Ok(LossVars {
            pos,
            negs,
            total,
            teacher_vars,
            teacher_logits,
        })
    }

    /// One full iteration: views, forwards, loss, backward, AdamW, EMA, center.
    pub fn step(&mut self, data: &TrainData) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(Error::Usage("training already finished".into()));
        }
        let batch = self.prepare(self.step, data)?;
        let mut tape = Tape::new();
        let vars = self.state.student.bind(&mut tape, true);
        let lv = self.loss_on_tape(&self.state.student, &mut tape, &vars, &batch)?;
        let loss_total = tape.scalar_value(lv.total)?;
        if !loss_total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {} (epoch {}); batch seed {:#018x}, samples {:?}",
                batch.step,
                batch.epoch,
                derive_seed(self.seed, Stream::PositiveViews, &[batch.epoch]),
                batch.indices
            )));
        }
        let loss_pos = tape.scalar_value(lv.pos)?;
        let neg_values = lv.negs.iter().map(|&v| tape.scalar_value(v)).collect::<Result<Vec<_>>>()?;
        let weights = self.setup.loss.negative_weights(self.setup.negatives.source);
        let loss_neg = match neg_values.len() {
            0 => 0.0,
            1 => neg_values[0],
            _ => neg_values.iter().zip(&weights).map(|(v, w)| v * w).sum(),
        };

        let mut grads = tape.backward(lv.total)?;
        let mut flat: Vec<Vec<f64>> = vars
            .iter()
            .zip(self.state.student.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        if let Some(i) = flat.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for `{}` at step {}",
                self.state.student.params()[i].name,
                batch.step
            )));
        }
        clip_grad_norm(&mut flat, self.setup.train.clip_grad);
        let s = batch.schedule;
        self.opt.update(self.state.student.params_mut(), &flat, s.lr, s.weight_decay)?;
        self.state.ema_update(self.setup.model.momentum)?;
        if self.setup.model.centering {
            self.state.update_center(&lv.teacher_logits)?;
        }
        self.step += 1;
        Ok(StepMetrics {
            step: batch.step,
            epoch: batch.epoch,
            loss_pos,
            loss_neg,
            loss_total,
            lr: s.lr,
            tau_t: s.tau_t,
        })
    }
}
