//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Set `NEGDISTILL_ACCEPT_SEEDS` to change the number of seeds of the twin runs.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use negdistill::augment::ViewFamilyConfig;
use negdistill::checkpoint::Checkpoint;
use negdistill::data::{
    color_histogram, histogram_distance, load_cifar_bin, synth_dataset, write_cifar_bin, CifarVariant, ImageDataset,
    SynthKind, SynthParams,
};
use negdistill::eval::{auroc, encode_dataset, occupied_classes, ood_score, ood_scores, soft_class_probs, FeatureBank};
use negdistill::image::Image;
use negdistill::model::{perturb, EncoderKind, FeaturePool, ModelConfig, StudentTeacher};
use negdistill::negatives::{perm_patches, pix_perm, rotate90, NegativeSource};
use negdistill::rng::{stream, Rng, Stream};
use negdistill::tensor::{Tape, Tensor, Var};
use negdistill::train::{loss_neg, loss_pos, pos_entropy_bound, TrainData, TrainSetup, Trainer};
use negdistill_cli::{commands, Context, ExperimentConfig};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> Rng {
    stream(seed, Stream::Demo, &[0xacce])
}

fn rand_tensor(shape: &[usize], r: &mut Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
}

fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| 0.4 + ((i * 5) % 9) as f64 / 8.0).collect();
    let wv = tape.constant_raw(tape.shape(x).to_vec(), w).unwrap();
    let p = tape.mul(x, wv).unwrap();
    tape.sum(p)
}

/// Largest `|a − n| / max(1, |a|, |n|)` over every input element.
fn op_grad_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        let v = tape.scalar_value(loss).unwrap();
        (tape, vars, loss, v)
    };
    let (tape, vars, loss, _) = run(inputs);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[li].numel()]);
        for i in 0..inputs[li].numel() {
            let mut plus = inputs.to_vec();
            plus[li].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[li].data_mut()[i] -= h;
            let numeric = (run(&plus).3 - run(&minus).3) / (2.0 * h);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
        }
    }
    worst
}

fn tiny_vit_setup() -> TrainSetup {
    let mut s = TrainSetup::default();
    s.model = ModelConfig {
        encoder: EncoderKind::TinyVit,
        image_size: 8,
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        out_dim: 6,
        ..ModelConfig::default()
    };
    let size = |f: &mut ViewFamilyConfig, s: usize| f.output_size = s;
    size(&mut s.augment.global1, 8);
    size(&mut s.augment.global2, 8);
    size(&mut s.augment.local, 4);
    s.augment.n_local = 2;
    s.train.batch_size = 2;
    s.train.epochs = 60;
    s.train.warmup_epochs = 1;
    s.train.base_lr = 0.5;
    s
}

fn tiny_data(n: usize, size: usize) -> (ImageDataset, ImageDataset) {
    let p = SynthParams::default();
    (
        synth_dataset(SynthKind::Stripes, n, size, 11, &p).unwrap(),
        synth_dataset(SynthKind::Blobs, n, size, 12, &p).unwrap(),
    )
}

fn gradient_correctness() -> Outcome {
    let mut r = rng(1);
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let mut cases: Vec<(&str, Vec<Tensor>, Build)> = Vec::new();
    let unary = |f: fn(&mut Tape, Var) -> Var| -> Build {
        Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = f(t, v[0]);
            weighted_sum(t, y)
        })
    };
    let m = |r: &mut Rng, s: &[usize]| rand_tensor(s, r, -1.5, 1.5);
    cases.push(("add", vec![m(&mut r, &[3, 4]), m(&mut r, &[3, 4])], Box::new(|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("sub", vec![m(&mut r, &[3, 4]), m(&mut r, &[3, 4])], Box::new(|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("mul", vec![m(&mut r, &[3, 4]), m(&mut r, &[3, 4])], Box::new(|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("add_broadcast", vec![m(&mut r, &[2, 3, 4]), m(&mut r, &[3, 4])], Box::new(|t, v| {
        let y = t.add_broadcast(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("mul_scalar", vec![m(&mut r, &[5])], unary(|t, x| t.mul_scalar(x, -1.7))));
    cases.push(("exp", vec![m(&mut r, &[6])], unary(|t, x| t.exp(x))));
    cases.push(("log_clamped", vec![rand_tensor(&[6], &mut r, 0.2, 3.0)], unary(|t, x| t.log_clamped(x, 1e-12).unwrap())));
    let away_from_zero: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.2 - i as f64 * 0.1 }).collect();
    cases.push((
        "relu",
        vec![Tensor::new(vec![8], away_from_zero).unwrap().with_requires_grad(true)],
        unary(|t, x| t.relu(x)),
    ));
    cases.push(("gelu", vec![rand_tensor(&[20], &mut r, -4.0, 4.0)], unary(|t, x| t.gelu(x))));
    cases.push(("sum", vec![m(&mut r, &[7])], Box::new(|t, v| {
        let s = t.sum(v[0]);
        t.mul(s, s).unwrap()
    })));
    cases.push(("mean", vec![m(&mut r, &[7])], Box::new(|t, v| {
        let s = t.mean(v[0]);
        t.mul(s, s).unwrap()
    })));
    cases.push(("matmul", vec![m(&mut r, &[3, 5]), m(&mut r, &[5, 4])], Box::new(|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("batch_matmul", vec![m(&mut r, &[2, 3, 5]), m(&mut r, &[2, 5, 4])], Box::new(|t, v| {
        let y = t.batch_matmul(v[0], v[1], false).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("batch_matmul_t", vec![m(&mut r, &[2, 3, 5]), m(&mut r, &[2, 4, 5])], Box::new(|t, v| {
        let y = t.batch_matmul(v[0], v[1], true).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("transpose", vec![m(&mut r, &[3, 5])], unary(|t, x| t.transpose(x).unwrap())));
    cases.push(("reshape", vec![m(&mut r, &[3, 4])], unary(|t, x| t.reshape(x, &[2, 6]).unwrap())));
    cases.push(("permute", vec![m(&mut r, &[2, 3, 4])], unary(|t, x| t.permute(x, &[2, 0, 1]).unwrap())));
    cases.push((
        "layer_norm",
        vec![m(&mut r, &[3, 6]), m(&mut r, &[6]), m(&mut r, &[6])],
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
            weighted_sum(t, y)
        }),
    ));
    cases.push(("softmax_temp", vec![m(&mut r, &[3, 5])], unary(|t, x| t.softmax_temp(x, 0.7).unwrap())));
    cases.push(("slice_rows", vec![m(&mut r, &[4, 3])], unary(|t, x| t.slice_rows(x, 1, 2).unwrap())));
    cases.push(("prepend_token", vec![m(&mut r, &[2, 3, 4]), m(&mut r, &[4])], Box::new(|t, v| {
        let y = t.prepend_token(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    })));
    cases.push(("take_token", vec![m(&mut r, &[2, 3, 4])], unary(|t, x| t.take_token(x, 1).unwrap())));

    let t0 = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, build) in &cases {
        let e = op_grad_error(inputs, build.as_ref());
        ensure(e < 1e-3, || format!("op {name}: relative error {e:.2e}"))?;
        if e > worst_op.1 {
            worst_op = (name, e);
        }
    }

    // end to end: full loss with negatives on a 2-sample toy ViT
    let setup = tiny_vit_setup();
    let (ind, aux) = tiny_data(2, 8);
    let data = TrainData {
        in_dist: &ind,
        auxiliary: Some(&aux),
    };
    let mut trainer = Trainer::new(setup, 5, 2).map_err(|e| e.to_string())?;
    for p in trainer.state.student.params_mut() {
        for v in p.value.data_mut() {
            *v *= 20.0;
        }
    }
    trainer.state.teacher = trainer.state.student.clone();
    let batch = trainer.prepare(0, &data).map_err(|e| e.to_string())?;
    let loss_of = |net: &negdistill::model::Network| -> f64 {
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, true);
        let lv = trainer.loss_on_tape(net, &mut tape, &vars, &batch).unwrap();
        tape.scalar_value(lv.total).unwrap()
    };
    let net = trainer.state.student.clone();
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true);
    let lv = trainer.loss_on_tape(&net, &mut tape, &vars, &batch).map_err(|e| e.to_string())?;
    ensure(!lv.negs.is_empty(), || "toy model has no negative term".into())?;
    let grads = tape.backward(lv.total).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst_e2e: f64 = 0.0;
    let mut checked = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_default();
        let n = net.params()[pi].value.numel();
        let analytic = if analytic.is_empty() { vec![0.0; n] } else { analytic };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for i in 0..n {
            let mut plus = net.clone();
            plus.params_mut()[pi].value.data_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi].value.data_mut()[i] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i].powi(2);
            n2 += numeric.powi(2);
            checked += 1;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 1e-9 {
            let rel = diff2.sqrt() / scale;
            ensure(rel < 1e-2, || format!("parameter {}: relative error {rel:.2e}", net.params()[pi].name))?;
            worst_e2e = worst_e2e.max(rel);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} ops, worst {} {:.1e}; end-to-end {checked} scalars, worst {worst_e2e:.1e}; {secs:.1}s",
        cases.len(),
        worst_op.0,
        worst_op.1
    ))
}

fn random_probs(r: &mut Rng, k: usize, spread: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| r.random_range(-spread..spread)).collect();
    negdistill::tensor::softmax_rows(&logits, k, 1.0)
}

fn loss_bounds() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(2);
    let mut min_gap_neg = f64::INFINITY;
    let mut min_gap_pos = f64::INFINITY;
    for _ in 0..1000 {
        let k = r.random_range(2..64usize);
        let views = r.random_range(1..10usize);
        let spread = r.random_range(0.01..8.0);
        let rows: Vec<Vec<f64>> = (0..views).map(|_| random_probs(&mut r, k, spread)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let bound = views as f64 * (k as f64).ln();
        let l = loss_neg(&refs, k, 1e-12).unwrap();
        ensure(l >= bound - 1e-6, || format!("loss_neg {l} below bound {bound}"))?;
        min_gap_neg = min_gap_neg.min(l - bound);
        let uniform = vec![vec![1.0 / k as f64; k]; views];
        let urefs: Vec<&[f64]> = uniform.iter().map(Vec::as_slice).collect();
        let lu = loss_neg(&urefs, k, 1e-12).unwrap();
        ensure((lu - bound).abs() < 1e-9, || format!("uniform loss_neg {lu} != {bound}"))?;

        let n_student = r.random_range(2..10usize);
        let teacher: Vec<Vec<f64>> = (0..2).map(|_| random_probs(&mut r, k, spread)).collect();
        let student: Vec<Vec<f64>> = (0..n_student).map(|_| random_probs(&mut r, k, spread)).collect();
        let tr: Vec<&[f64]> = teacher.iter().map(Vec::as_slice).collect();
        let sr: Vec<&[f64]> = student.iter().map(Vec::as_slice).collect();
        let lp = loss_pos(&tr, &sr, 1e-12).unwrap();
        let hb = pos_entropy_bound(&tr, n_student);
        ensure(lp >= hb - 1e-9, || format!("loss_pos {lp} below entropy bound {hb}"))?;
        min_gap_pos = min_gap_pos.min(lp - hb);
    }
    // equality only at the uniform rows: gradient descent on logits reaches the bound
    let (k, views) = (16usize, 3usize);
    let mut logits: Vec<f64> = (0..k * views).map(|_| r.random_range(-3.0..3.0)).collect();
    let bound = views as f64 * (k as f64).ln();
    let mut last = f64::INFINITY;
    for _ in 0..400 {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![views, k], logits.clone()).unwrap().with_requires_grad(true));
        let p = tape.softmax_temp(x, 1.0).unwrap();
        let lp = tape.log_clamped(p, 1e-12).unwrap();
        let s = tape.sum(lp);
        let loss = tape.mul_scalar(s, -1.0 / k as f64);
        last = tape.scalar_value(loss).unwrap();
        let g = tape.backward(loss).unwrap();
        for (l, d) in logits.iter_mut().zip(g.get(x).unwrap()) {
            *l -= 20.0 * d;
        }
    }
    ensure((last - bound).abs() < 1e-4, || format!("descent stopped at {last}, bound {bound}"))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "1000 instances; min gaps neg {min_gap_neg:.2e}, pos {min_gap_pos:.2e}; descent reaches bound within {:.1e}; {secs:.2}s",
        (last - bound).abs()
    ))
}

fn pairwise_auroc(out: &[f64], inn: &[f64]) -> f64 {
    let mut s = 0.0;
    for &o in out {
        for &i in inn {
            s += if o > i {
                1.0
            } else if o == i {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (out.len() * inn.len()) as f64
}

fn auroc_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(3);
    let mut ties = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n_out = r.random_range(1..=200usize);
        let n_in = r.random_range(1..=200usize);
        let levels = r.random_range(2..30u32);
        let mut draw = |n: usize, shift: u32| -> Vec<f64> {
            (0..n).map(|_| f64::from(r.random_range(0..levels) + shift) / 7.0).collect()
        };
        let out = draw(n_out, 1);
        let inn = draw(n_in, 0);
        if out.iter().any(|o| inn.contains(o)) {
            ties += 1;
        }
        let fast = auroc(&out, &inn).unwrap();
        let slow = pairwise_auroc(&out, &inn);
        worst = worst.max((fast - slow).abs());
        ensure((fast - slow).abs() < 1e-12, || format!("{fast} vs {slow} (n {n_out}/{n_in})"))?;
    }
    ensure(ties > 50, || format!("only {ties} instances had ties"))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("100 instances, {ties} with ties, max abs err {worst:.1e}; {secs:.2}s"))
}

fn score_invariances() -> Outcome {
    let mut r = rng(4);
    let tau = 0.04;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (m, d) = (r.random_range(1..40usize), r.random_range(2..16usize));
        let rows: Vec<f64> = (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let bank = FeatureBank::new(&rows, d, None).unwrap();
        let base = ood_score(&q, &bank, tau).unwrap();
        let scaled_rows: Vec<f64> = rows
            .chunks(d)
            .flat_map(|row| {
                let c = r.random_range(0.01..100.0);
                row.iter().map(move |v| v * c).collect::<Vec<_>>()
            })
            .collect();
        let c = r.random_range(0.01..100.0);
        let sq: Vec<f64> = q.iter().map(|v| v * c).collect();
        let scaled = ood_score(&sq, &FeatureBank::new(&scaled_rows, d, None).unwrap(), tau).unwrap();
        let rel = (scaled - base).abs() / base.abs();
        worst = worst.max(rel);
        ensure(rel < 1e-12, || format!("rescaling changed the score by {rel:.2e}"))?;
    }
    let b = FeatureBank::new(&[0.0, 2.0, 0.0], 3, None).unwrap();
    let same = ood_score(&[0.0, 5.0, 0.0], &b, tau).unwrap();
    let orth = ood_score(&[1.0, 0.0, 3.0], &b, tau).unwrap();
    let e25 = 25f64.exp();
    ensure((same + e25).abs() / e25 < 1e-9, || format!("aligned score {same}, want -exp(25)"))?;
    ensure((orth + 1.0).abs() < 1e-9, || format!("orthogonal score {orth}, want -1"))?;
    Ok(format!("200 rescalings, max rel diff {worst:.1e}; M=1 cases -exp(25) and -1 exact to 1e-9"))
}

fn ema_contracts() -> Outcome {
    let cfg = tiny_vit_setup().model;
    let mut r = rng(5);
    for m in [0.0, 0.5, 0.9, 1.0] {
        let mut st = StudentTeacher::new(&cfg, &mut r).unwrap();
        perturb(&mut st.student, 0.5, &mut r);
        let d0 = st.max_divergence();
        ensure(d0 > 0.0, || "perturbation had no effect".into())?;
        for n in 1..=50 {
            st.ema_update(m).unwrap();
            let bound = m.powi(n) * d0;
            let d = st.max_divergence();
            ensure(d <= bound * (1.0 + 1e-12) + 1e-15, || format!("m={m} n={n}: {d} > {bound}"))?;
        }
    }

    let (ind, aux) = tiny_data(4, 8);
    let data = TrainData {
        in_dist: &ind,
        auxiliary: Some(&aux),
    };
    let mut trainer = Trainer::new(tiny_vit_setup(), 6, 4).map_err(|e| e.to_string())?;
    let mut teacher_vars = 0;
    for _ in 0..100 {
        let batch = trainer.prepare(trainer.step, &data).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let vars = trainer.state.student.bind(&mut tape, true);
        let lv = trainer
            .loss_on_tape(&trainer.state.student, &mut tape, &vars, &batch)
            .map_err(|e| e.to_string())?;
        let grads = tape.backward(lv.total).map_err(|e| e.to_string())?;
        ensure(!lv.teacher_vars.is_empty(), || "no teacher vars on the tape".into())?;
        for &v in &lv.teacher_vars {
            ensure(grads.get(v).is_none(), || format!("teacher var got a gradient at step {}", trainer.step))?;
        }
        ensure(vars.iter().any(|&v| grads.get(v).is_some()), || "student got no gradient".into())?;
        teacher_vars += lv.teacher_vars.len();
        trainer.step(&data).map_err(|e| e.to_string())?;
    }
    Ok(format!(
        "bound holds for m in {{0, 0.5, 0.9, 1}} over 50 updates; 100 steps, {teacher_vars} teacher tensors, none with a gradient"
    ))
}

fn random_image(r: &mut Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| [r.random(), r.random(), r.random()])
}

fn sorted_multisets(img: &Image) -> [Vec<f64>; 3] {
    img.channel_multisets().map(|mut v| {
        v.sort_by(f64::total_cmp);
        v
    })
}

fn shift_invariants() -> Outcome {
    let mut r = rng(8);
    for _ in 0..50 {
        let s = r.random_range(1..20usize);
        let img = random_image(&mut r, s, s);
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate90(&x, 1).unwrap();
        }
        ensure(x == img, || format!("rotate90^4 is not the identity at size {s}"))?;
        ensure(rotate90(&img, 4).unwrap() == img, || "rotate90(k=4) is not the identity".into())?;
    }
    let mut checked = 0;
    for _ in 0..50 {
        let (h, w) = (r.random_range(2..24usize), r.random_range(2..24usize));
        let img = random_image(&mut r, h, w);
        let want = sorted_multisets(&img);
        ensure(sorted_multisets(&pix_perm(&img, &mut r)) == want, || "PixPerm changed a histogram".into())?;
    }
    for _ in 0..50 {
        let grid = r.random_range(2..=4usize);
        let side = grid * r.random_range(1..8usize);
        let img = random_image(&mut r, side, side);
        let (p, _) = perm_patches(&img, grid, &mut r);
        ensure(sorted_multisets(&p) == sorted_multisets(&img), || {
            format!("PermPatch({grid}) changed a histogram at {side}x{side}")
        })?;
        checked += 1;
    }
    let ds = synth_dataset(SynthKind::Blobs, 12, 16, 3, &SynthParams::default()).unwrap();
    let mut pr = rng(9);
    let permuted = ds.map_images(|_, im| pix_perm(im, &mut pr)).unwrap();
    let d = histogram_distance(&color_histogram(&ds, 32).unwrap(), &color_histogram(&permuted, 32).unwrap()).unwrap();
    ensure(d == 0.0, || format!("histogram distance after PixPerm is {d}"))?;
    Ok(format!("50 four-cycles; 50 PixPerm and {checked} PermPatch multisets equal; PixPerm dataset distance 0"))
}

const DETERMINISM_CONFIG: &str = r#"
seed = 21

[data.in_dist]
kind = "synthetic"
generator = "stripes"
n = 16
seed = 1

[data.auxiliary]
kind = "synthetic"
generator = "blobs"
n = 16
seed = 2

[train]
epochs = 2
batch_size = 8
warmup_epochs = 1
"#;

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("det.toml");
    fs::write(&cfg_path, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let ctx = Context::from_args(&cfg_path, None, Some(&dir.path().join(name))).map_err(|e| e.to_string())?;
        commands::train(&ctx, None).map_err(|e| e.to_string())?;
        fs::read(ctx.out_dir.join("metrics.csv")).map_err(|e| e.to_string())
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(a == b, || "metrics.csv differs between identical runs".into())?;
    let rows = String::from_utf8_lossy(&a).lines().count() - 1;
    ensure(rows == 4, || format!("expected 4 metric rows, got {rows}"))?;
    let ck = |n: &str| fs::read(dir.path().join(n).join("checkpoints/final.ckpt")).unwrap_or_default();
    ensure(ck("a") == ck("b"), || "final checkpoints differ".into())?;
    Ok(format!("two TinyViT runs, {rows} rows and final checkpoint bitwise identical"))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(10);
    let mut records = 0;
    for (variant, label_max) in [(CifarVariant::C10, 10u32), (CifarVariant::C100, 100)] {
        let n = r.random_range(1..12usize);
        let images: Vec<Image> = (0..n)
            .map(|_| Image::from_fn(32, 32, |_, _| [0, 0, 0].map(|_| f64::from(r.random_range(0..=255u8)) / 255.0)))
            .collect();
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..label_max)).collect();
        let ds = ImageDataset::new(images, Some(labels), "rt").unwrap();
        let p = dir.path().join(format!("{variant:?}.bin"));
        write_cifar_bin(&p, &ds, variant).map_err(|e| e.to_string())?;
        let bytes = fs::read(&p).map_err(|e| e.to_string())?;
        let back = load_cifar_bin(&p, variant).map_err(|e| e.to_string())?;
        ensure(back.images() == ds.images(), || "pixels changed in CIFAR round trip".into())?;
        ensure(back.labels() == ds.labels(), || "labels changed in CIFAR round trip".into())?;
        let p2 = dir.path().join("again.bin");
        write_cifar_bin(&p2, &back, variant).map_err(|e| e.to_string())?;
        ensure(fs::read(&p2).map_err(|e| e.to_string())? == bytes, || "rewritten file differs".into())?;
        records += n;
    }

    let (ind, aux) = tiny_data(4, 8);
    let data = TrainData {
        in_dist: &ind,
        auxiliary: Some(&aux),
    };
    let mut a = Trainer::new(tiny_vit_setup(), 13, 4).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        a.step(&data).map_err(|e| e.to_string())?;
    }
    let path = dir.path().join("mid.ckpt");
    Checkpoint::from_trainer(&a).map_err(|e| e.to_string())?.save(&path).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(tiny_vit_setup(), 13, 4).map_err(|e| e.to_string())?;
    Checkpoint::load(&path).map_err(|e| e.to_string())?.restore(&mut b).map_err(|e| e.to_string())?;
    for i in 0..5 {
        let ma = a.step(&data).map_err(|e| e.to_string())?;
        let mb = b.step(&data).map_err(|e| e.to_string())?;
        ensure(ma == mb, || format!("resumed metrics differ at step {}: {ma:?} vs {mb:?}", i + 3))?;
    }
    ensure(a.state == b.state, || "resumed state differs after 5 steps".into())?;
    Ok(format!("{records} CIFAR records bitwise; checkpoint resume identical for 5 steps"))
}

/// Settings of the synthetic twin runs.
struct TwinSpec {
    n_train: usize,
    n_test: usize,
    n_aux: usize,
    n_ood: usize,
    base_lr: f64,
    momentum: f64,
    palette_jitter: f64,
}

const TWIN: TwinSpec = TwinSpec {
    n_train: 256,
    n_test: 128,
    n_aux: 256,
    n_ood: 128,
    base_lr: 0.05,
    momentum: 0.99,
    palette_jitter: 0.1,
};

#[derive(Debug, Clone, Copy)]
struct TwinResult {
    auroc: f64,
    occupied: usize,
    secs: f64,
}

fn synth(kind: SynthKind, n: usize, seed: u64, p: &SynthParams) -> ImageDataset {
    synth_dataset(kind, n, 32, seed, p).unwrap()
}

fn twin_run(seed: u64, lambda: f64) -> Result<TwinResult, String> {
    let p = SynthParams {
        orientations: vec![0.0, 45.0],
        palette: Some([[0.2, 0.3, 0.6], [0.85, 0.75, 0.3]]),
        palette_jitter: TWIN.palette_jitter,
        ..SynthParams::default()
    };
    let base = 1000 * (seed + 1);
    let train = synth(SynthKind::Stripes, TWIN.n_train, base + 1, &p);
    let test = synth(SynthKind::Stripes, TWIN.n_test, base + 2, &p);
    let aux = synth(SynthKind::Blobs, TWIN.n_aux, base + 3, &p);
    let ood = synth(SynthKind::Checker, TWIN.n_ood, base + 4, &p);

    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.loss.lambda = lambda;
    cfg.negatives.source = NegativeSource::Auxiliary;
    cfg.negatives.shift = "rot90".into();
    cfg.train.epochs = 30;
    cfg.train.batch_size = 32;
    cfg.train.base_lr = TWIN.base_lr;
    cfg.model.momentum = TWIN.momentum;
    cfg.model.pool = FeaturePool::Mean;
    cfg.validate().map_err(|e| e.to_string())?;
    assert_eq!((cfg.model.dim, cfg.model.out_dim), (64, 256));
    assert_eq!(cfg.model.encoder, EncoderKind::TinyVit);

    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg.setup(), seed, train.len()).map_err(|e| e.to_string())?;
    let data = TrainData {
        in_dist: &train,
        auxiliary: Some(&aux),
    };
    while !trainer.is_done() {
        trainer.step(&data).map_err(|e| e.to_string())?;
    }
    let net = &trainer.state.teacher;
    let chunk = cfg.eval.chunk;
    let bank = FeatureBank::from_encoded(&encode_dataset(net, &train, chunk).map_err(|e| e.to_string())?, None)
        .map_err(|e| e.to_string())?;
    let e_in = encode_dataset(net, &test, chunk).map_err(|e| e.to_string())?;
    let e_out = encode_dataset(net, &ood, chunk).map_err(|e| e.to_string())?;
    let s_in = ood_scores(&e_in, &bank, cfg.eval.score_tau).map_err(|e| e.to_string())?;
    let s_out = ood_scores(&e_out, &bank, cfg.eval.score_tau).map_err(|e| e.to_string())?;
    let occ = occupied_classes(&soft_class_probs(&e_in, cfg.eval.probs_tau), e_in.k).map_err(|e| e.to_string())?;
    Ok(TwinResult {
        auroc: auroc(&s_out, &s_in).map_err(|e| e.to_string())?,
        occupied: occ.count,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn twin_runs(seeds: u64) -> Result<Vec<(TwinResult, TwinResult)>, String> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let with = twin_run(seed, 1.0)?;
        let without = twin_run(seed, 0.0)?;
        println!(
            "      seed {seed}: auroc {:.4} vs {:.4}, occupied {} vs {}, {:.0}s + {:.0}s",
            with.auroc, without.auroc, with.occupied, without.occupied, with.secs, without.secs
        );
        out.push((with, without));
    }
    Ok(out)
}

fn directional(runs: &[(TwinResult, TwinResult)]) -> Outcome {
    let m1 = median(runs.iter().map(|r| r.0.auroc).collect());
    let m0 = median(runs.iter().map(|r| r.1.auroc).collect());
    let slowest = runs.iter().flat_map(|r| [r.0.secs, r.1.secs]).fold(0.0, f64::max);
    let detail = format!(
        "median AUROC {m1:.4} (lambda=1) vs {m0:.4} (lambda=0), diff {:+.4}; slowest run {slowest:.0}s",
        m1 - m0
    );
    ensure(m1 - m0 >= 0.03 && m1 >= 0.80 && slowest < 900.0, || detail.clone())?;
    Ok(detail)
}

fn occupied_direction(runs: &[(TwinResult, TwinResult)]) -> Outcome {
    let o1 = median(runs.iter().map(|r| r.0.occupied as f64).collect());
    let o0 = median(runs.iter().map(|r| r.1.occupied as f64).collect());
    let detail = format!("median occupied {o1} (lambda=1) vs {o0} (lambda=0)");
    ensure(o1 < o0, || detail.clone())?;
    Ok(detail)
}

fn report(id: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("[PASS] {id:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("[FAIL] {id:>2} {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let seeds = std::env::var("NEGDISTILL_ACCEPT_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(5u64);
    let mut ok = true;
    ok &= report(1, "gradient correctness", gradient_correctness());
    ok &= report(2, "loss bounds", loss_bounds());
    ok &= report(3, "AUROC oracle equivalence", auroc_oracle());
    ok &= report(4, "score invariances", score_invariances());
    ok &= report(5, "EMA and teacher contracts", ema_contracts());
    ok &= report(8, "shifting-transform invariants", shift_invariants());
    ok &= report(9, "training determinism", determinism());
    ok &= report(10, "format round trips", round_trips());
    println!("      twin runs: {seeds} seeds x lambda in {{1, 0}}");
    match twin_runs(seeds) {
        Ok(runs) => {
            ok &= report(6, "directional AUROC gain from negatives", directional(&runs));
            ok &= report(7, "fewer occupied soft-classes with negatives", occupied_direction(&runs));
        }
        Err(e) => {
            ok &= report(6, "directional AUROC gain from negatives", Err(e.clone()));
            ok &= report(7, "fewer occupied soft-classes with negatives", Err(e));
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
