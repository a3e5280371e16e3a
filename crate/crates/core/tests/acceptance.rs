//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `VNETSEG_ACCEPTANCE_EPOCHS` overrides the end-to-end epoch count and
//! `VNETSEG_ACCEPTANCE_DIR` keeps the end-to-end artifacts in a fixed place.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{
    conv3d_reference, flood_fill, grad_check, network_grad_check, random_tensor, random_volume,
    rng, same_partition, weighted_sum,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnetseg::cli::{cmd_gen, cmd_train, predict_volume, Manifest, RunConfig, BEST_CHECKPOINT};
use vnetseg::data::{
    extract_tiles, generate_phantom, read_volume, sample_training_patches, stitch, write_volume,
    PatchKind, PhantomConfig, SamplerConfig, Split, Volume,
};
use vnetseg::diffcore::{DiffTensor, Tape, Var};
use vnetseg::losses::{soft_dice, tversky_index, tversky_loss, TverskyParams};
use vnetseg::metrics::{aggregate, evaluate, Averaging, EvalReport};
use vnetseg::optim::{AmsgradConfig, OptimizerState};
use vnetseg::postproc::{binarize, label_components, postprocess, Connectivity, PostprocConfig};
use vnetseg::vnet::{read_checkpoint, NamedParam};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |name: &str, err: f64| {
        if err >= worst.0 {
            worst = (err, name.to_string());
        }
    };
    for (stride, pad, k) in [(1, 1, 3), (2, 0, 2), (2, 1, 3)] {
        let x = random_tensor(&mut r, &[2, 2, 5, 4, 6], -1.0, 1.0);
        let w = random_tensor(&mut r, &[3, 2, k, k, k], -1.0, 1.0);
        let b = random_tensor(&mut r, &[3], -1.0, 1.0);
        note(
            "conv3d",
            grad_check(&[x, w, b], |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], stride, pad).unwrap();
                weighted_sum(t, y, 11)
            }),
        );
    }
    let x = random_tensor(&mut r, &[2, 3, 2, 3, 2], -1.0, 1.0);
    let w = random_tensor(&mut r, &[3, 2, 2, 2, 2], -1.0, 1.0);
    note(
        "conv3d_transposed",
        grad_check(&[x, w], |t, v| {
            let y = t.conv3d_transposed(v[0], v[1], 2).unwrap();
            weighted_sum(t, y, 12)
        }),
    );
    let a = random_tensor(&mut r, &[2, 2, 3, 2, 2], -2.0, 2.0);
    let b = random_tensor(&mut r, &[2, 2, 3, 2, 2], 0.5, 2.0);
    type Unary = fn(&mut Tape<f64>, &[Var]) -> Var;
    let unary: [(&str, Unary); 5] = [
        ("selu", |t, v| t.selu(v[0])),
        ("sigmoid", |t, v| t.sigmoid(v[0])),
        ("dropout", |t, v| {
            t.dropout(v[0], 0.6, true, &mut ChaCha8Rng::seed_from_u64(99))
                .unwrap()
        }),
        ("scale/add_scalar", |t, v| {
            let s = t.scale(v[0], -1.7);
            t.add_scalar(s, 0.3)
        }),
        ("sample_sums", |t, v| {
            let s = t.sample_sums(v[0]);
            t.mul(s, s).unwrap()
        }),
    ];
    for (name, f) in unary {
        note(
            name,
            grad_check(&[a.clone()], |t, v| {
                let y = f(t, v);
                weighted_sum(t, y, 13)
            }),
        );
    }
    let binary: [(&str, Unary); 5] = [
        ("add", |t, v| t.add(v[0], v[1]).unwrap()),
        ("sub", |t, v| t.sub(v[0], v[1]).unwrap()),
        ("mul", |t, v| t.mul(v[0], v[1]).unwrap()),
        ("div", |t, v| t.div(v[0], v[1]).unwrap()),
        ("concat_channels", |t, v| {
            t.concat_channels(v[0], v[1]).unwrap()
        }),
    ];
    for (name, f) in binary {
        note(
            name,
            grad_check(&[a.clone(), b.clone()], |t, v| {
                let y = f(t, v);
                weighted_sum(t, y, 14)
            }),
        );
    }
    note(
        "sum/mean",
        grad_check(&[a.clone()], |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            let s = t.sum(sq);
            let m = t.mean(sq);
            t.add(s, m).unwrap()
        }),
    );
    let p = random_tensor(&mut r, &[2, 1, 4, 4, 4], 0.01, 0.99);
    let g: Vec<f64> = (0..128).map(|i| f64::from(u8::from(i % 7 == 0))).collect();
    let g = DiffTensor::new(vec![2, 1, 4, 4, 4], g).unwrap();
    note(
        "tversky_loss",
        grad_check(&[p], |t, v| {
            let truth = t.constant(g.shape().to_vec(), g.values().to_vec()).unwrap();
            tversky_loss(t, v[0], truth, &TverskyParams::default()).unwrap()
        }),
    );
    for (name, err) in network_grad_check(21) {
        note(&name, err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < 1e-5 && elapsed < Duration::from_secs(120),
        format!(
            "worst relative error {:.2e} ({}), {}",
            worst.0,
            worst.1,
            secs(elapsed)
        ),
    )
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(31);
    let mut conv_dev: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(1..=2);
        let c = r.random_range(1..=3);
        let k = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let ks = [
            r.random_range(1..=3),
            r.random_range(1..=3),
            r.random_range(1..=3),
        ];
        let dims = ks.map(|kk| r.random_range(kk..=7));
        let xs = [n, c, dims[0], dims[1], dims[2]];
        let ws = [k, c, ks[0], ks[1], ks[2]];
        let x = random_tensor(&mut r, &xs, -1.0, 1.0);
        let w = random_tensor(&mut r, &ws, -1.0, 1.0);
        let b = random_tensor(&mut r, &[k], -1.0, 1.0);
        let (want, _) = conv3d_reference(x.values(), xs, w.values(), ws, b.values(), stride, pad);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x), t.leaf(w), t.leaf(b));
        let y = t.conv3d(xv, wv, bv, stride, pad).unwrap();
        for (a, e) in t.value(y).iter().zip(&want) {
            conv_dev = conv_dev.max((a - e).abs());
        }
    }
    let conns = [
        Connectivity::Six,
        Connectivity::Eighteen,
        Connectivity::TwentySix,
    ];
    let mut mismatches = 0;
    for seed in 0..100u64 {
        let mut g = rng(seed);
        let m = Volume::mask(
            [16; 3],
            [1.0; 3],
            (0..4096).map(|_| u8::from(g.random_bool(0.2))).collect(),
        )
        .unwrap();
        let conn = conns[seed as usize % 3];
        let set = label_components(&m, conn).unwrap();
        if !same_partition(
            set.labels(),
            &flood_fill(m.as_mask().unwrap(), m.dims(), conn),
        ) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        conv_dev <= 1e-12 && mismatches == 0 && elapsed < Duration::from_secs(120),
        format!(
            "conv3d max deviation {conv_dev:.2e} over 200 cases, {mismatches}/100 labelings differ from flood fill, {}",
            secs(elapsed)
        ),
    )
}

fn tversky_value(pred: &[f64], truth: &[f64], params: &TverskyParams) -> f64 {
    let mut t = Tape::<f64>::new();
    let p = t.constant(vec![pred.len()], pred.to_vec()).unwrap();
    let g = t.constant(vec![truth.len()], truth.to_vec()).unwrap();
    let i = tversky_index(&mut t, p, g, params).unwrap();
    t.value(i)[0]
}

fn tversky_identities() -> Outcome {
    let mut r = rng(40);
    let mut perfect: f64 = 0.0;
    for _ in 0..20 {
        let truth: Vec<f64> = (0..64)
            .map(|_| f64::from(u8::from(r.random_bool(0.1))))
            .collect();
        perfect =
            perfect.max((tversky_value(&truth, &truth, &TverskyParams::default()) - 1.0).abs());
    }
    let half = TverskyParams::new(0.5, 0.5, 1e-300).unwrap();
    let mut dice_dev: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..200);
        let pred: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let mut truth: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(r.random_bool(0.2))))
            .collect();
        truth[0] = 1.0;
        dice_dev =
            dice_dev.max((tversky_value(&pred, &truth, &half) - soft_dice(&pred, &truth)).abs());
    }
    let mut truth = [0.0; 8];
    truth[2] = 1.0;
    let hand = tversky_value(
        &[1.0; 8],
        &truth,
        &TverskyParams::new(0.4, 0.6, 1e-12).unwrap(),
    );
    let hand_dev = (hand - 1.0 / 5.2).abs();
    outcome(
        perfect < 1e-6 && dice_dev <= 1e-12 && hand_dev < 1e-9,
        format!("|T-1| {perfect:.1e} on perfect maps, soft Dice deviation {dice_dev:.1e}, hand case deviation {hand_dev:.1e}"),
    )
}

fn amsgrad_properties() -> Outcome {
    let run = || {
        let mut params = vec![NamedParam {
            name: "w".into(),
            tensor: DiffTensor::new(vec![3], vec![0.5f64, -0.2, 1.0])
                .unwrap()
                .with_grad(),
        }];
        let mut opt = OptimizerState::new(AmsgradConfig::default()).unwrap();
        let mut g = rng(5);
        let mut monotone = true;
        let mut prev = vec![0.0; 3];
        let mut trail = Vec::new();
        for t in 0..100 {
            let grad: Vec<f64> = (0..3)
                .map(|i| {
                    let spike = if t % 17 == 0 {
                        50.0
                    } else {
                        1.0 / (1.0 + t as f64)
                    };
                    let sign = if (t + i) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * spike * g.random_range(0.5..1.5)
                })
                .collect();
            params[0].tensor.zero_grad();
            params[0].tensor.accumulate_grad(&grad).unwrap();
            opt.step(&mut params).unwrap();
            let vh = &opt.moments[0].v_hat;
            monotone &= vh.iter().zip(&prev).all(|(a, b)| a >= b);
            prev = vh.clone();
            trail.extend(params[0].tensor.values().iter().map(|v| v.to_bits()));
        }
        (monotone, trail)
    };
    let (monotone, a) = run();
    let (_, b) = run();

    let mut params = vec![NamedParam {
        name: "x".into(),
        tensor: DiffTensor::new(vec![1], vec![1.0f64]).unwrap().with_grad(),
    }];
    params[0].tensor.accumulate_grad(&[1.0]).unwrap();
    let mut opt = OptimizerState::new(AmsgradConfig {
        learning_rate: 0.1,
        ..Default::default()
    })
    .unwrap();
    opt.step(&mut params).unwrap();
    let step1 = params[0].tensor.values()[0];
    outcome(
        monotone && (step1 - -2.16228).abs() < 1e-4 && a == b,
        format!(
            "v_hat monotone over 100 steps: {monotone}, step-1 value {step1:.5}, replay identical: {}",
            a == b
        ),
    )
}

fn sampler_statistics() -> Outcome {
    let p = generate_phantom(&PhantomConfig {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let config = SamplerConfig {
        count: 40,
        ..Default::default()
    };
    let (mut positive, mut total, mut violations) = (0usize, 0usize, 0usize);
    for call in 0..250u64 {
        for patch in sample_training_patches(&p.image, &p.truth, &config, 1000 + call).unwrap() {
            total += 1;
            let hits = patch.truth.count_positive();
            match patch.spec.kind {
                PatchKind::PositiveCentered => {
                    positive += 1;
                    violations += usize::from(hits == 0);
                }
                _ => violations += usize::from(hits != 0),
            }
        }
    }
    let frac = positive as f64 / total as f64;
    outcome(
        (frac - 0.7).abs() <= 0.015 && violations == 0,
        format!("{positive}/{total} positive = {frac:.4}, {violations} kind violations"),
    )
}

fn tiling_round_trip() -> Outcome {
    let mut r = rng(60);
    let mut dims_list = vec![[100, 100, 100], [64, 64, 64], [33, 1, 70]];
    while dims_list.len() < 50 {
        dims_list.push([
            r.random_range(1..80),
            r.random_range(1..80),
            r.random_range(1..80),
        ]);
    }
    let mut failures = 0;
    for (i, dims) in dims_list.iter().enumerate() {
        let vol = random_volume(&mut r, *dims, i % 2 == 0);
        let back = stitch(&extract_tiles(&vol, 32).unwrap(), vol.dims(), vol.spacing()).unwrap();
        failures += usize::from(back.to_bytes() != vol.to_bytes());
    }
    outcome(
        failures == 0,
        format!("{} volumes, {failures} not byte-exact", dims_list.len()),
    )
}

fn vvol_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(70);
    let mut failures = 0;
    for (i, mask) in [true, false, true, false].into_iter().enumerate() {
        let vol = random_volume(&mut r, [5 + i, 7, 3 + 2 * i], mask);
        let a = dir.path().join(format!("a{i}.vvol"));
        let b = dir.path().join(format!("b{i}.vvol"));
        write_volume(&vol, &a).unwrap();
        write_volume(&read_volume(&a).unwrap(), &b).unwrap();
        failures += usize::from(std::fs::read(&a).unwrap() != std::fs::read(&b).unwrap());
    }
    outcome(
        failures == 0,
        format!("mask and gray files, {failures} of 4 differ after rewrite"),
    )
}

fn precision_text(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".into(), |v| format!("{v:.3}"))
}

fn end_to_end(work: &Path, epochs: usize) -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.epochs = epochs;
    let data = work.join("data");
    let run = work.join("run");
    let pred_dir = work.join("pred");
    std::fs::create_dir_all(&pred_dir).unwrap();
    cmd_gen(&cfg, &data).unwrap();
    cmd_train(&cfg, &data, &run).unwrap();
    let net = read_checkpoint(run.join(BEST_CHECKPOINT)).unwrap().params;
    let manifest = Manifest::load(&data).unwrap();
    let post = PostprocConfig::default();
    let (mut raw_reports, mut kept_reports) = (Vec::new(), Vec::new());
    let mut precision_up = 0;
    let mut leaked = 0usize;
    let tests: Vec<_> = manifest.entries(Split::Test).collect();
    for entry in &tests {
        let image = read_volume(data.join(&entry.image)).unwrap();
        let truth = read_volume(data.join(&entry.truth)).unwrap();
        let distractors = read_volume(data.join(&entry.distractors)).unwrap();
        let prob = predict_volume(&net, &image).unwrap();
        let raw = binarize(&prob, post.threshold).unwrap();
        let kept = postprocess(&raw, &post).unwrap();
        write_volume(&raw, pred_dir.join(format!("{}_raw.vvol", entry.name))).unwrap();
        write_volume(&kept, pred_dir.join(format!("{}_kept.vvol", entry.name))).unwrap();
        let r = evaluate(&raw, &truth).unwrap();
        let k = evaluate(&kept, &truth).unwrap();
        let up = matches!((r.precision, k.precision), (Some(a), Some(b)) if b > a);
        precision_up += usize::from(up);
        leaked += kept
            .as_mask()
            .unwrap()
            .iter()
            .zip(distractors.as_mask().unwrap())
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count();
        println!(
            "  {}: raw precision {} recall {} accuracy {}, kept precision {} recall {}{}",
            entry.name,
            precision_text(r.precision),
            precision_text(r.recall),
            precision_text(r.accuracy),
            precision_text(k.precision),
            precision_text(k.recall),
            if up {
                ""
            } else {
                "  (precision not increased)"
            }
        );
        raw_reports.push(r);
        kept_reports.push(k);
    }
    let kept: EvalReport = aggregate(&kept_reports, Averaging::Macro).unwrap();
    let raw: EvalReport = aggregate(&raw_reports, Averaging::Macro).unwrap();
    let recall = kept.recall.unwrap_or(0.0);
    let min_accuracy = raw_reports
        .iter()
        .filter_map(|r| r.accuracy)
        .fold(1.0, f64::min);
    let elapsed = start.elapsed();
    outcome(
        tests.len() == 8 && recall >= 0.60 && precision_up == tests.len() && min_accuracy >= 0.99,
        format!(
            "{epochs} epochs, {} test volumes: kept macro recall {recall:.3} precision {} dice {}, precision up on {precision_up}/{}, \
             raw macro accuracy {} (min {min_accuracy:.4}), {leaked} distractor voxels kept, {}",
            tests.len(),
            precision_text(kept.precision),
            precision_text(kept.dice),
            tests.len(),
            precision_text(raw.accuracy),
            secs(elapsed)
        ),
    )
}

fn distractor_removal() -> Outcome {
    let mut clean = 0;
    for seed in 0..20 {
        let p = generate_phantom(&PhantomConfig {
            seed: 500 + seed,
            distractor_count: 20,
            ..Default::default()
        })
        .unwrap();
        let t = p.truth.as_mask().unwrap();
        let d = p.distractors.as_mask().unwrap();
        let detection = Volume::mask(
            p.truth.dims(),
            p.truth.spacing(),
            t.iter().zip(d).map(|(a, b)| a | b).collect(),
        )
        .unwrap();
        let kept = postprocess(&detection, &PostprocConfig::default()).unwrap();
        let leaked = kept
            .as_mask()
            .unwrap()
            .iter()
            .zip(d)
            .any(|(&k, &d)| k == 1 && d == 1);
        clean += usize::from(!leaked);
    }
    outcome(
        clean >= 19,
        format!("{clean}/20 trials with zero distractor voxels kept"),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let epochs = std::env::var("VNETSEG_ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(12);
    let tmp = tempfile::tempdir().unwrap();
    let work: PathBuf = std::env::var_os("VNETSEG_ACCEPTANCE_DIR")
        .map_or_else(|| tmp.path().to_path_buf(), PathBuf::from);

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("oracle equivalence", Box::new(oracles)),
        ("tversky identities", Box::new(tversky_identities)),
        ("amsgrad properties", Box::new(amsgrad_properties)),
        ("sampler statistics", Box::new(sampler_statistics)),
        ("tiling round-trip", Box::new(tiling_round_trip)),
        ("vvol round-trip", Box::new(vvol_round_trip)),
        (
            "end-to-end experiment",
            Box::new(move || end_to_end(&work, epochs)),
        ),
        ("distractor removal", Box::new(distractor_removal)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 && std::env::var_os("VNETSEG_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
