use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use negdistill::eval::auroc;
use negdistill_cli::{commands, Context, ExperimentConfig};

const TINY: &str = r#"
seed = 3

[data.in_dist]
name = "stripes"
kind = "synthetic"
generator = "stripes"
n = 8
seed = 1

[data.in_dist_test]
name = "stripes_test"
kind = "synthetic"
generator = "stripes"
n = 6
seed = 2

[data.auxiliary]
name = "blobs"
kind = "synthetic"
generator = "blobs"
n = 8
seed = 3

[[data.ood]]
name = "checker"
kind = "synthetic"
generator = "checker"
n = 5
seed = 4

[[data.ood]]
name = "noise"
kind = "synthetic"
generator = "noise"
n = 4
seed = 5

[model]
encoder = "mlp"
mlp_hidden = [12]
pool_grid = 4
out_dim = 6

[augment]
n_local = 2

[train]
epochs = 2
batch_size = 4
warmup_epochs = 1
checkpoint_every = 1

[eval]
knn_k = 3
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn ctx(dir: &Path, text: &str, out: &str) -> Context {
    let cfg = write_config(dir, text);
    Context::from_args(&cfg, None, Some(&dir.join(out))).unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_negdistill"));
    c.env_remove(negdistill_cli::config::OUT_ROOT_ENV);
    c.env("RUST_LOG", "warn");
    c
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn train_writes_fixed_layout_and_is_bitwise_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = ctx(dir.path(), TINY, "a");
    let b = ctx(dir.path(), TINY, "b");
    let sa = commands::train(&a, None).unwrap();
    commands::train(&b, None).unwrap();
    assert_eq!(sa.steps, 4);
    for f in [
        "config.echo",
        "metrics.csv",
        "checkpoints/epoch_0001.ckpt",
        "checkpoints/epoch_0002.ckpt",
        "checkpoints/final.ckpt",
        "reports/train_summary.json",
    ] {
        assert!(a.out_dir.join(f).is_file(), "missing {f}");
    }
    let ma = fs::read(a.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.out_dir.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.out_dir.join("checkpoints/final.ckpt")).unwrap(),
        fs::read(b.out_dir.join("checkpoints/final.ckpt")).unwrap()
    );
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,epoch,loss_pos,loss_neg,loss_total,lr,tau_t");
    assert_eq!(text.lines().count(), 5);

    let echo = ExperimentConfig::from_toml(&read(a.out_dir.join("config.echo")), Path::new("echo")).unwrap();
    assert_eq!(echo, a.config);
}

#[test]
fn lambda_zero_gives_zero_negative_loss() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[loss]\nlambda = 0.0\n");
    let c = ctx(dir.path(), &text, "out");
    commands::train(&c, None).unwrap();
    let csv = read(c.out_dir.join("metrics.csv"));
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(3).unwrap(), "0", "{line}");
    }
}

#[test]
fn resume_continues_with_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let full = ctx(dir.path(), TINY, "full");
    commands::train(&full, None).unwrap();
    let part = ctx(dir.path(), TINY, "part");
    fs::create_dir_all(&part.out_dir).unwrap();
    let ck = full.out_dir.join("checkpoints/epoch_0001.ckpt");
    let s = commands::train(&part, Some(&ck)).unwrap();
    assert_eq!(s.resumed_from_step, Some(2));
    let tail = |p: &Path| {
        read(p.join("metrics.csv"))
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().unwrap().parse::<u64>().unwrap() >= 2)
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(tail(&full.out_dir).len(), 2);
    assert_eq!(tail(&full.out_dir), tail(&part.out_dir));
    assert_eq!(
        fs::read(full.out_dir.join("checkpoints/final.ckpt")).unwrap(),
        fs::read(part.out_dir.join("checkpoints/final.ckpt")).unwrap()
    );
}

#[test]
fn eval_tables_match_library_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), TINY, "out");
    commands::train(&c, None).unwrap();
    let s = commands::eval(&c, None).unwrap();
    assert_eq!(s.results.len(), c.config.data.ood.len());
    let reports = c.out_dir.join("reports");
    let table = read(reports.join("auroc.csv"));
    assert_eq!(table.lines().count(), 1 + c.config.data.ood.len());

    let mut by_set: Vec<(String, Vec<f64>)> = Vec::new();
    for line in read(reports.join("scores.csv")).lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let v: f64 = cols[2].parse().unwrap();
        match by_set.iter_mut().find(|(n, _)| n == cols[1]) {
            Some((_, s)) => s.push(v),
            None => by_set.push((cols[1].to_string(), vec![v])),
        }
    }
    let in_scores = &by_set[0].1;
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let out = &by_set.iter().find(|(n, _)| n == cols[0]).unwrap().1;
        assert_eq!(cols[1].parse::<f64>().unwrap(), auroc(out, in_scores).unwrap());
    }
    assert!(reports.join("score_hist.csv").is_file());
    assert!(reports.join("eval_summary.json").is_file());
    assert!((0.0..=1.0).contains(&s.in_vs_in_auroc));
}

#[test]
fn diagnose_scatter_has_one_row_per_checkpoint_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), TINY, "out");
    commands::train(&c, None).unwrap();
    let cks = vec![
        c.out_dir.join("checkpoints/epoch_0001.ckpt"),
        c.out_dir.join("checkpoints/final.ckpt"),
    ];
    let s = commands::diagnose(&c, &cks).unwrap();
    assert_eq!(s.checkpoints.len(), 2);
    for r in &s.checkpoints {
        assert!(r.occupied <= r.k);
        assert!(r.knn_accuracy.is_some());
    }
    let reports = c.out_dir.join("reports");
    let first: Vec<Vec<u8>> = ["occupied.csv", "scatter.csv", "diagnose_summary.json"]
        .iter()
        .map(|f| fs::read(reports.join(f)).unwrap())
        .collect();
    assert_eq!(String::from_utf8_lossy(&first[1]).lines().count(), 3);
    commands::diagnose(&c, &cks).unwrap();
    for (f, before) in ["occupied.csv", "scatter.csv", "diagnose_summary.json"].iter().zip(first) {
        assert_eq!(fs::read(reports.join(f)).unwrap(), before, "{f}");
    }
}

#[test]
fn hist_distances() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[data.in_dist]
name = "black"
kind = "synthetic"
generator = "noise"
n = 3
synth = { noise_mean = [0.0, 0.0, 0.0], noise_std = 0.0, pixel_noise = 0.0 }

[data.auxiliary]
name = "black_again"
kind = "synthetic"
generator = "noise"
n = 5
seed = 9
synth = { noise_mean = [0.0, 0.0, 0.0], noise_std = 0.0, pixel_noise = 0.0 }

[[data.ood]]
name = "white"
kind = "synthetic"
generator = "noise"
n = 2
synth = { noise_mean = [1.0, 1.0, 1.0], noise_std = 0.0, pixel_noise = 0.0 }
"#;
    let c = ctx(dir.path(), text, "out");
    let d = commands::hist(&c, 16).unwrap();
    let get = |a: &str, b: &str| d.iter().find(|x| x.dataset_a == a && x.dataset_b == b).unwrap().distance;
    assert_eq!(get("black", "black_again"), 0.0);
    assert!((get("black", "white") - 2.0).abs() < 1e-12);

    let csv = read(c.out_dir.join("reports/histograms.csv"));
    let mut sums = std::collections::BTreeMap::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        *sums.entry((cols[0].to_string(), cols[1].to_string())).or_insert(0.0) += cols[3].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 9);
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn invalid_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\ntau_s = -1.0\n");
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss.tau_s"));

    let cfg = write_config(dir.path(), "[train]\nepohcs = 3\n");
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epohcs"));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace(
        "[[data.ood]]\nname = \"checker\"\nkind = \"synthetic\"\ngenerator = \"checker\"\nn = 5\nseed = 4",
        "[[data.ood]]\nname = \"c100\"\nkind = \"cifar100\"\npath = \"nowhere/test.bin\"",
    );
    let cfg = write_config(dir.path(), &text);
    let out = bin()
        .args(["hist", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));

    let cfg = write_config(dir.path(), TINY);
    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(dir.path().join("absent.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("checkpoint_every = 1", "checkpoint_every = 1\nbase_lr = 1e300\nwarmup_epochs = 0")
        .replace("warmup_epochs = 1\n", "");
    let cfg = write_config(dir.path(), &text);
    let out_dir = dir.path().join("o");
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let failure = read(out_dir.join("reports/failure.json"));
    assert!(failure.contains("\"step\""));
    assert!(out_dir.join("checkpoints/failure.ckpt").is_file());
}

#[test]
fn seed_flag_and_out_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let root = dir.path().join("root");
    let out = bin()
        .env(negdistill_cli::config::OUT_ROOT_ENV, &root)
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "42", "--out", "rel"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = read(root.join("rel/config.echo"));
    assert!(echo.contains("seed = 42"));
}
