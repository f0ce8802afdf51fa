//! The four subcommands. Each writes fixed file names below the output
//! directory: `config.echo`, `metrics.csv`, `checkpoints/` and `reports/`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use log::info;
use negdistill::checkpoint::Checkpoint;
use negdistill::data::{color_histogram, histogram_distance, ImageDataset};
use negdistill::eval::{
    auroc, encode_dataset, knn_accuracy, occupied_classes, ood_scores, soft_class_probs, Encoded, FeatureBank,
};
use negdistill::model::Network;
use negdistill::train::{StepMetrics, TrainData, Trainer};
use negdistill::Error;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.echo";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const SCORE_HIST_BINS: usize = 50;

/// A parsed config together with where it came from and where results go.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    /// Directory that relative dataset paths are resolved against.
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(config: ExperimentConfig, base_dir: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            config,
            base_dir,
            out_dir,
        }
    }

    /// Loads the config file and applies command-line overrides.
    pub fn from_args(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let out_dir = config.resolve_out_dir(out);
        let base_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(config, base_dir, out_dir))
    }

    fn reports(&self) -> CliResult<PathBuf> {
        let dir = self.out_dir.join(REPORT_DIR);
        create_dir(&dir)?;
        Ok(dir)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT)
    }

    fn load(&self, spec: &crate::config::DatasetSpec) -> CliResult<ImageDataset> {
        spec.load(&self.base_dir, self.config.model.image_size)
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Write {
        file: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Write {
        file: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub n_train: usize,
    pub steps: u64,
    pub epochs: u64,
    pub negatives_active: bool,
    pub resumed_from_step: Option<u64>,
    pub final_metrics: Option<StepMetrics>,
    pub final_checkpoint: String,
}

#[derive(Serialize)]
struct FailureReport<'a> {
    step: u64,
    epoch: u64,
    message: &'a str,
    checkpoint: String,
}

fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Keeps the rows of an existing metrics file that precede `step`.
fn metrics_prefix(path: &Path, step: u64) -> CliResult<String> {
    let mut out = format!("{}\n", StepMetrics::CSV_HEADER);
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().skip(1) {
        let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        match row_step {
            Some(s) if s < step => {
                out.push_str(line);
                out.push('\n');
            }
            _ => break,
        }
    }
    Ok(out)
}

/// Full training run. On a numerical failure the last good state is dumped
/// next to `reports/failure.json` before the error is returned.
pub fn train(ctx: &Context, resume: Option<&Path>) -> CliResult<TrainSummary> {
    let cfg = &ctx.config;
    let ckpt_dir = ctx.out_dir.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    let reports = ctx.reports()?;
    write_file(&ctx.out_dir.join(CONFIG_ECHO), cfg.to_toml())?;

    let in_dist = ctx.load(&cfg.data.in_dist)?;
    let negatives_used = cfg.loss.negatives_active(cfg.negatives.source) && cfg.negatives.source.needs_auxiliary();
    let auxiliary = match (&cfg.data.auxiliary, negatives_used) {
        (Some(spec), true) => Some(ctx.load(spec)?),
        _ => None,
    };
    let data = TrainData {
        in_dist: &in_dist,
        auxiliary: auxiliary.as_ref(),
    };

    let mut trainer = Trainer::new(cfg.setup(), cfg.seed, in_dist.len())?;
    let mut resumed_from_step = None;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        ck.restore(&mut trainer)?;
        resumed_from_step = Some(ck.step);
        info!("resumed from {} at step {}", path.display(), ck.step);
    }

    let metrics_path = ctx.out_dir.join(METRICS_CSV);
    let prefix = metrics_prefix(&metrics_path, resumed_from_step.unwrap_or(0))?;
    let file = fs::File::create(&metrics_path).map_err(|e| CliError::Write {
        file: metrics_path.clone(),
        source: e,
    })?;
    let mut metrics = BufWriter::new(file);
    let io_err = |e| CliError::Write {
        file: metrics_path.clone(),
        source: e,
    };
    metrics.write_all(prefix.as_bytes()).map_err(io_err)?;

    let spe = trainer.steps_per_epoch();
    let every = cfg.train.checkpoint_every;
    let mut last = None;
    while !trainer.is_done() {
        let at = trainer.step;
        match trainer.step(&data) {
            Ok(m) => {
                writeln!(metrics, "{}", m.csv_row()).map_err(io_err)?;
                last = Some(m);
            }
            Err(e @ Error::Numerical(_)) => {
                metrics.flush().map_err(io_err)?;
                let dump = ckpt_dir.join("failure.ckpt");
                Checkpoint::from_trainer(&trainer)?.save(&dump)?;
                write_json(
                    &reports.join("failure.json"),
                    &FailureReport {
                        step: at,
                        epoch: at / spe,
                        message: &e.to_string(),
                        checkpoint: dump.display().to_string(),
                    },
                )?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
        if trainer.step % spe == 0 {
            let epoch = trainer.step / spe;
            if let Some(m) = &last {
                info!("epoch {epoch}: loss_total {:.5} loss_neg {:.5}", m.loss_total, m.loss_neg);
            }
            if every > 0 && epoch % every == 0 {
                Checkpoint::from_trainer(&trainer)?.save(&ckpt_dir.join(checkpoint_name(epoch)))?;
            }
        }
    }
    metrics.flush().map_err(io_err)?;

    let final_path = ckpt_dir.join(FINAL_CHECKPOINT);
    Checkpoint::from_trainer(&trainer)?.save(&final_path)?;
    let summary = TrainSummary {
        seed: cfg.seed,
        n_train: in_dist.len(),
        steps: trainer.step,
        epochs: cfg.train.epochs,
        negatives_active: trainer.negatives_active(),
        resumed_from_step,
        final_metrics: last,
        final_checkpoint: final_path.display().to_string(),
    };
    write_json(&reports.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Encoded train bank, in-distribution test set and OOD sets for one teacher.
struct Encodings {
    train: ImageDataset,
    bank: FeatureBank,
    test: ImageDataset,
    test_enc: Encoded,
    ood: Vec<(String, Encoded)>,
}

fn load_teacher(ctx: &Context, path: &Path) -> CliResult<Network> {
    if !path.exists() {
        return Err(CliError::MissingData(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?.teacher(&ctx.config.model)?)
}

fn encode_all(ctx: &Context, net: &Network, with_ood: bool) -> CliResult<Encodings> {
    let cfg = &ctx.config;
    let chunk = cfg.eval.chunk;
    let train = ctx.load(&cfg.data.in_dist)?;
    let test_spec = cfg
        .data
        .in_dist_test
        .as_ref()
        .ok_or_else(|| Error::config("data.in_dist_test", "evaluation needs an in-distribution test set"))?;
    let test = ctx.load(test_spec)?;
    let train_enc = encode_dataset(net, &train, chunk)?;
    let mut bank = FeatureBank::from_encoded(&train_enc, train.labels().map(<[u32]>::to_vec))?;
    if let Some(max) = cfg.eval.bank_subsample {
        bank = bank.subsample(max, cfg.seed);
    }
    let test_enc = encode_dataset(net, &test, chunk)?;
    let mut ood = Vec::new();
    if with_ood {
        for spec in &cfg.data.ood {
            let ds = ctx.load(spec)?;
            ood.push((spec.display_name(), encode_dataset(net, &ds, chunk)?));
        }
    }
    Ok(Encodings {
        train,
        bank,
        test,
        test_enc,
        ood,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AurocRow {
    pub dataset: String,
    pub auroc: f64,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub score_tau: f64,
    pub bank_size: usize,
    pub in_dataset: String,
    /// Even-indexed test images scored as "out" against odd-indexed ones.
    pub in_vs_in_auroc: f64,
    pub results: Vec<AurocRow>,
    pub mean_auroc: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn split_halves(scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let even = scores.iter().step_by(2).copied().collect();
    let odd = scores.iter().skip(1).step_by(2).copied().collect();
    (even, odd)
}

fn score_histogram(sets: &[(&str, &[f64])], bins: usize) -> String {
    let all = sets.iter().flat_map(|(_, s)| s.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out = String::from("dataset,bin,bin_lo,bin_hi,count\n");
    for (name, scores) in sets {
        let mut counts = vec![0usize; bins];
        for &s in scores.iter() {
            let b = (((s - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            writeln!(out, "{name},{b},{a},{},{c}", a + width).expect("string write");
        }
    }
    out
}

fn evaluate(ctx: &Context, enc: &Encodings, checkpoint: &Path) -> CliResult<(EvalSummary, Vec<(String, Vec<f64>)>)> {
    let tau = ctx.config.eval.score_tau;
    let in_scores = ood_scores(&enc.test_enc, &enc.bank, tau)?;
    let (even, odd) = split_halves(&in_scores);
    let in_vs_in = auroc(&even, &odd)?;
    let mut results = Vec::new();
    let mut all = vec![(enc.test.source().to_string(), in_scores.clone())];
    for (name, e) in &enc.ood {
        let s = ood_scores(e, &enc.bank, tau)?;
        results.push(AurocRow {
            dataset: name.clone(),
            auroc: auroc(&s, &in_scores)?,
            n_in: in_scores.len(),
            n_out: s.len(),
        });
        all.push((name.clone(), s));
    }
    let values: Vec<f64> = results.iter().map(|r| r.auroc).collect();
    let summary = EvalSummary {
        checkpoint: checkpoint.display().to_string(),
        score_tau: tau,
        bank_size: enc.bank.len(),
        in_dataset: enc.test.source().to_string(),
        in_vs_in_auroc: in_vs_in,
        mean_auroc: mean(&values),
        results,
    };
    Ok((summary, all))
}

/// Scores the in-distribution test set and every OOD set against the train bank.
pub fn eval(ctx: &Context, checkpoint: Option<&Path>) -> CliResult<EvalSummary> {
    let path = checkpoint.map_or_else(|| ctx.final_checkpoint(), Path::to_path_buf);
    let net = load_teacher(ctx, &path)?;
    let enc = encode_all(ctx, &net, true)?;
    let (summary, scores) = evaluate(ctx, &enc, &path)?;
    let reports = ctx.reports()?;

    let mut csv = String::from("sample_id,dataset,score\n");
    for (name, s) in &scores {
        for (i, v) in s.iter().enumerate() {
            writeln!(csv, "{i},{name},{v}").expect("string write");
        }
    }
    write_file(&reports.join("scores.csv"), csv)?;

    let mut table = String::from("dataset,auroc,n_in,n_out\n");
    for r in &summary.results {
        writeln!(table, "{},{},{},{}", r.dataset, r.auroc, r.n_in, r.n_out).expect("string write");
    }
    write_file(&reports.join("auroc.csv"), table)?;

    let sets: Vec<(&str, &[f64])> = scores.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    write_file(&reports.join("score_hist.csv"), score_histogram(&sets, SCORE_HIST_BINS))?;
    write_json(&reports.join("eval_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseRow {
    pub checkpoint: String,
    pub occupied: usize,
    pub k: usize,
    pub knn_accuracy: Option<f64>,
    pub mean_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseSummary {
    pub probs_tau: f64,
    pub knn_k: usize,
    pub checkpoints: Vec<DiagnoseRow>,
}

/// Occupied soft-classes, k-NN accuracy and the occupied-vs-AUROC scatter for
/// each checkpoint. `occupied.csv` lists the per-class means of the first one.
pub fn diagnose(ctx: &Context, checkpoints: &[PathBuf]) -> CliResult<DiagnoseSummary> {
    let paths = if checkpoints.is_empty() {
        vec![ctx.final_checkpoint()]
    } else {
        checkpoints.to_vec()
    };
    let cfg = &ctx.config;
    let reports = ctx.reports()?;
    let mut rows = Vec::new();
    let mut occupied_csv = None;
    for path in &paths {
        let net = load_teacher(ctx, path)?;
        let enc = encode_all(ctx, &net, true)?;
        let probs = soft_class_probs(&enc.test_enc, cfg.eval.probs_tau);
        let occ = occupied_classes(&probs, enc.test_enc.k)?;
        let knn = match (enc.bank.labels(), enc.test.labels()) {
            (Some(_), Some(labels)) if !enc.train.is_empty() => {
                Some(knn_accuracy(&enc.bank, &enc.test_enc, labels, cfg.eval.knn_k)?)
            }
            _ => None,
        };
        let (summary, _) = evaluate(ctx, &enc, path)?;
        if occupied_csv.is_none() {
            let mut csv = String::from("class,mean_prob,occupied\n");
            for (i, (m, o)) in occ.mean.iter().zip(&occ.mask).enumerate() {
                writeln!(csv, "{i},{m},{}", u8::from(*o)).expect("string write");
            }
            occupied_csv = Some(csv);
        }
        rows.push(DiagnoseRow {
            checkpoint: path.display().to_string(),
            occupied: occ.count,
            k: enc.test_enc.k,
            knn_accuracy: knn,
            mean_auroc: summary.mean_auroc,
        });
    }
    write_file(&reports.join("occupied.csv"), occupied_csv.expect("at least one checkpoint"))?;
    let mut scatter = String::from("checkpoint,occupied,auroc\n");
    for r in &rows {
        let a = r.mean_auroc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(scatter, "{},{},{a}", r.checkpoint, r.occupied).expect("string write");
    }
    write_file(&reports.join("scatter.csv"), scatter)?;
    let summary = DiagnoseSummary {
        probs_tau: cfg.eval.probs_tau,
        knn_k: cfg.eval.knn_k,
        checkpoints: rows,
    };
    write_json(&reports.join("diagnose_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistDistance {
    pub dataset_a: String,
    pub dataset_b: String,
    pub distance: f64,
}

/// Per-channel color histograms of every configured dataset and all pairwise distances.
pub fn hist(ctx: &Context, bins: usize) -> CliResult<Vec<HistDistance>> {
    let cfg = &ctx.config;
    let mut specs = vec![&cfg.data.in_dist];
    specs.extend(cfg.data.auxiliary.as_ref());
    specs.extend(cfg.data.ood.iter());
    let mut hists = Vec::new();
    for spec in specs {
        let ds = ctx.load(spec)?;
        hists.push((spec.display_name(), color_histogram(&ds, bins)?));
    }
    let reports = ctx.reports()?;
    let mut csv = String::from("dataset,channel,bin,value\n");
    for (name, h) in &hists {
        for (c, ch) in h.channels.iter().enumerate() {
            for (b, v) in ch.iter().enumerate() {
                writeln!(csv, "{name},{c},{b},{v}").expect("string write");
            }
        }
    }
    write_file(&reports.join("histograms.csv"), csv)?;
    let mut out = Vec::new();
    let mut table = String::from("dataset_a,dataset_b,distance\n");
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            let d = histogram_distance(&hists[i].1, &hists[j].1)?;
            writeln!(table, "{},{},{d}", hists[i].0, hists[j].0).expect("string write");
            out.push(HistDistance {
                dataset_a: hists[i].0.clone(),
                dataset_b: hists[j].0.clone(),
                distance: d,
            });
        }
    }
    write_file(&reports.join("histogram_distances.csv"), table)?;
    Ok(out)
}
