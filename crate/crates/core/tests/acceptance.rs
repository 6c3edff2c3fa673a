//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test -p meshcorr-core --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use meshcorr::autodiff::{Padding, ParamId, ParamStore, Tape, Tensor};
use meshcorr::correction::{ablation_study, correct, evaluate, AblationMode, MetricSpace};
use meshcorr::groundtruth::{compute_gt, GroundTruthConfig};
use meshcorr::metrics::{berhu, berhu_dx, berhu_loss, delta_accuracy, reports_to_csv, rmse};
use meshcorr::network::{FeatureSelection, Model, ModelOptions, ROW_LABELS};
use meshcorr::raster::{rasterize, FeatureKind};
use meshcorr::scene::CameraIntrinsics;
use meshcorr::synthetic::{default_intrinsics, generate, render_samples, SceneSpec};
use meshcorr::train::{fine_tune, train, Phase, Sample, TrainConfig, Trained};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: &'static str,
    pass: bool,
}

fn report(out: &mut Vec<Outcome>, id: &'static str, name: &str, pass: bool, detail: String, elapsed: Duration) {
    println!(
        "[{}] {id:>3} {name}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    out.push(Outcome { id, pass });
}

// ---------------------------------------------------------------- 1

fn rasterizer_oracle() -> (bool, String) {
    let intr = CameraIntrinsics::new(80.0, 80.0, 47.5, 31.5, 96, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut covered, mut matched, mut non_adjacent) = (0usize, 0usize, 0usize);
    for _ in 0..100 {
        let (mesh, pose) = common::random_scene(&mut rng, &intr, 50);
        let raster = rasterize(&mesh, &pose, &intr);
        let oracle = common::raycast(&mesh, &pose, &intr);
        let (w, h) = (intr.width, intr.height);
        for row in 0..h {
            for col in 0..w {
                let p = row * w + col;
                let r = raster.mask.data()[p].then(|| raster.inverse_depth.data()[p] as f64);
                let o = oracle[p];
                if r.is_none() && o.is_none() {
                    continue;
                }
                covered += 1;
                if let (Some(ri), Some((oi, _))) = (r, o) {
                    if (ri - oi).abs() <= 1e-5 {
                        matched += 1;
                        continue;
                    }
                }
                // a mismatch is acceptable only where the visible triangle
                // (or coverage) changes within one pixel
                let id = |q: Option<(f64, usize)>| q.map(|(_, t)| t);
                let mut adjacent = false;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                        if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                            continue;
                        }
                        if id(oracle[rr as usize * w + cc as usize]) != id(o) {
                            adjacent = true;
                        }
                    }
                }
                if !adjacent {
                    non_adjacent += 1;
                }
            }
        }
    }
    let frac = matched as f64 / covered as f64;
    (
        frac >= 0.99 && non_adjacent == 0,
        format!("{matched}/{covered} covered pixels within 1e-5 ({:.4}%), {non_adjacent} mismatches away from edges", 100.0 * frac),
    )
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(String, f64)> = Vec::new();

    for &(k, stride, padding) in &[
        (3, 1, Padding::Same),
        (3, 2, Padding::Same),
        (7, 2, Padding::Same),
        (1, 2, Padding::Same),
        (3, 2, Padding::Valid),
    ] {
        let w = Tensor::from_vec([k, k, 3, 4], (0..k * k * 12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        // input gradient through the unary helper, weight and bias gradients
        // by perturbing the stored parameters
        let mut store = ParamStore::new();
        let wid = store.add("w", w.clone());
        let bid = store.add("b", b.clone());
        let e = common::check_unary_op(&mut rng, [2, 9, 8, 3], &|t, v| {
            let wv = t.input(w.clone());
            let bv = t.input(b.clone());
            t.conv2d(v, wv, Some(bv), stride, padding).unwrap()
        });
        worst.push((format!("conv{k}x{k}/{stride} {padding:?} input"), e));
        let x = Tensor::from_vec([2, 9, 8, 3], (0..432).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out_len = {
            let mut t = Tape::new(&store);
            let xv = t.input(x.clone());
            let (wv, bv) = (t.param(wid), t.param(bid));
            let y = t.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
            t.value(y).len()
        };
        let probe: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |store: &ParamStore<f64>| {
            let mut t = Tape::new(store);
            let xv = t.input(x.clone());
            let (wv, bv) = (t.param(wid), t.param(bid));
            let y = t.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
            let s = t.weighted_sum(y, &probe).unwrap();
            let v = t.value(s).data()[0];
            (v, t.backward(s).into_param_grads(store))
        };
        let (_, grads) = run(&store);
        for (id, name) in [(wid, "weight"), (bid, "bias")] {
            let value = store.get(id).clone();
            let entries: Vec<usize> = (0..value.len()).collect();
            let e = common::fd_relative_error(&value, &entries, &grads[id.0], 1e-6, 1e-6, &|v| {
                let mut s = store.clone();
                *s.get_mut(id) = v.clone();
                run(&s).0
            });
            worst.push((format!("conv{k}x{k}/{stride} {padding:?} {name}"), e));
        }
    }
    worst.push((
        "max_pool 3x3/2".into(),
        common::check_unary_op(&mut rng, [2, 7, 6, 3], &|t, v| t.max_pool(v, 3, 2).unwrap()),
    ));
    worst.push(("relu".into(), common::check_unary_op(&mut rng, [2, 4, 5, 3], &|t, v| t.relu(v))));
    worst.push(("crelu".into(), common::check_unary_op(&mut rng, [2, 4, 5, 3], &|t, v| t.crelu(v))));
    worst.push(("unpool_nn".into(), common::check_unary_op(&mut rng, [2, 3, 4, 3], &|t, v| t.unpool_nn(v))));
    let other = Tensor::from_vec([2, 4, 5, 3], (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    worst.push((
        "add".into(),
        common::check_unary_op(&mut rng, [2, 4, 5, 3], &|t, v| {
            let o = t.input(other.clone());
            let s = t.add(v, o).unwrap();
            t.add(s, v).unwrap()
        }),
    ));
    let target: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..120).map(|i| i % 7 != 3).collect();
    worst.push((
        "berhu".into(),
        common::check_unary_op(&mut rng, [2, 4, 5, 3], &|t, v| t.berhu(v, &target, &mask).unwrap()),
    ));

    // full network, batch 2, 64x96x10, random head so every layer receives
    // gradient
    let options = ModelOptions {
        zero_head: false,
        ..ModelOptions::default()
    };
    let mut model = Model::<f64>::build_with(FeatureSelection::ALL, 11, options).unwrap();
    let n = 2 * 64 * 96 * 10;
    let x = Tensor::from_vec([2, 64, 96, 10], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let probe: Vec<f64> = (0..2 * 64 * 96).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |m: &Model<f64>, x: &Tensor<f64>| {
        let mut t = Tape::new(m.params());
        let xv = t.input(x.clone());
        let (y, _) = m.forward(&mut t, xv).unwrap();
        let s = t.weighted_sum(y, &probe).unwrap();
        t.value(s).data()[0]
    };
    let (param_grads, input_grad) = {
        let mut t = Tape::new(model.params());
        let xv = t.input(x.clone());
        let (y, _) = model.forward(&mut t, xv).unwrap();
        let s = t.weighted_sum(y, &probe).unwrap();
        let g = t.backward(s);
        let input = g.input(xv).unwrap().clone();
        (g.into_param_grads(model.params()), input)
    };
    let input_entries: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();
    worst.push((
        "network input".into(),
        common::fd_relative_error(&x, &input_entries, &input_grad, 1e-6, 1e-6, &|x| loss(&model, x)),
    ));
    let probed = [
        "stem.w",
        "stem.b",
        "group1.res1.reduce.w",
        "group1.proj.shortcut.w",
        "group2.proj.spatial.w",
        "group3.res2.expand.w",
        "group4.proj.shortcut.w",
        "up1.conv.w",
        "up3.shortcut.w",
        "up5.conv.b",
        "head.w",
        "head.b",
    ];
    let mut net_worst: f64 = 0.0;
    for name in probed {
        let id: ParamId = model.params().find(name).expect("parameter exists");
        let len = model.params().get(id).len();
        for _ in 0..2 {
            let i = rng.random_range(0..len);
            let original = model.params().get(id).data()[i];
            let h = 1e-6;
            model.params_mut().get_mut(id).data_mut()[i] = original + h;
            let fp = loss(&model, &x);
            model.params_mut().get_mut(id).data_mut()[i] = original - h;
            let fm = loss(&model, &x);
            model.params_mut().get_mut(id).data_mut()[i] = original;
            let numeric = (fp - fm) / (2.0 * h);
            let a = param_grads[id.0].data()[i];
            let err = (a - numeric).abs();
            if err > 1e-6 {
                net_worst = net_worst.max(err / a.abs().max(numeric.abs()));
            }
        }
    }
    worst.push(("network parameters (24 probes)".into(), net_worst));

    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < 1e-4))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let (max_name, max) = worst.iter().fold(("", 0.0), |m, (n, e)| if *e > m.1 { (n.as_str(), *e) } else { m });
    (
        failing.is_empty(),
        format!("{} checks, worst relative error {max:.2e} ({max_name}){}", worst.len(), if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }),
    )
}

// ---------------------------------------------------------------- 3

/// Output sizes per layout row for a 64x96xF input, as listed in the
/// reference architecture table.
fn reference_rows(f: usize) -> [[usize; 3]; 13] {
    [
        [64, 96, f],
        [32, 48, 64],
        [16, 24, 64],
        [16, 24, 256],
        [8, 12, 512],
        [4, 6, 1024],
        [2, 3, 2048],
        [4, 6, 1024],
        [8, 12, 512],
        [16, 24, 256],
        [32, 48, 128],
        [64, 96, 32],
        [64, 96, 1],
    ]
}

fn shape_conformance() -> (bool, String) {
    let mut ok = true;
    let mut lines = Vec::new();
    for sel in [FeatureSelection::ALL, FeatureSelection::ALL.without(FeatureKind::Rgb)] {
        let model = Model::<f32>::build(sel, 0).unwrap();
        let rows = model.row_shapes(64, 96).unwrap();
        for (i, (got, want)) in rows.iter().zip(reference_rows(sel.channel_count())).enumerate() {
            if got[0] != 1 || got[1..] != want {
                ok = false;
                lines.push(format!("row {i} ({}) {:?} != {:?}", ROW_LABELS[i], &got[1..], want));
            }
        }
    }
    let model = Model::<f32>::build(FeatureSelection::ALL, 0).unwrap();
    let big = model.row_shapes(128, 192).unwrap();
    let fully_conv = big[12] == [1, 128, 192, 1];
    let rf = model.receptive_field();
    ok &= fully_conv && rf >= 96.0;
    (
        ok,
        format!(
            "13 rows match for F=10 and F=7{}; 128x192 input -> {:?}; receptive field {rf} px",
            if lines.is_empty() { String::new() } else { format!(" EXCEPT {}", lines.join("; ")) },
            &big[12][1..]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn perfect_prediction() -> (bool, String) {
    let intr = default_intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut pixels = 0usize;
    let mut nonzero = 0usize;
    for i in 0..20 {
        let scene = generate(&SceneSpec::street(100 + i)).unwrap();
        let f = rng.random_range(0..scene.trajectory.len());
        let pose = &scene.trajectory.poses()[f];
        let cam = rasterize(&scene.camera, pose, &intr);
        let laser = rasterize(&scene.laser, pose, &intr);
        let gt = compute_gt(&cam, &laser, &GroundTruthConfig::default()).unwrap();
        let c = correct(&cam.inverse_depth, &cam.mask, &gt).unwrap();
        for p in 0..gt.mask.data().len() {
            if gt.mask.data()[p] {
                pixels += 1;
                nonzero += (gt.delta.data()[p] != 0.0) as usize;
                worst = worst.max((c.inverse_depth.data()[p] - laser.inverse_depth.data()[p] as f64).abs());
            }
        }
    }
    (
        worst <= 1e-6 && pixels > 0 && nonzero > 0,
        format!("20 frames, {pixels} joint pixels ({nonzero} with nonzero error), max |i* - i_ref| = {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- data

fn bias_samples(seed: u64) -> Vec<Sample> {
    render_samples(&generate(&SceneSpec::bias_task(seed)).unwrap(), &default_intrinsics()).unwrap()
}

fn eval_crops(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().map(|s| s.center_crop(96, 64).unwrap()).collect()
}

// ---------------------------------------------------------------- 5

fn zero_model(test: &[Sample]) -> (bool, String) {
    let model = Model::<f32>::build(FeatureSelection::ALL, 5).unwrap();
    let (b, c) = evaluate(&model, test, MetricSpace::InverseDepth).unwrap();
    let same = b.rmse.to_bits() == c.rmse.to_bits()
        && b.delta.iter().zip(&c.delta).all(|(x, y)| x.to_bits() == y.to_bits())
        && b.n == c.n;
    (same, format!("baseline rmse {} d1 {} / corrected rmse {} d1 {}", b.rmse, b.delta[0], c.rmse, c.delta[0]))
}

// ---------------------------------------------------------------- 7

fn metric_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut rmse_worst, mut delta_mismatch, mut monotone_fail): (f64, usize, usize) = (0.0, 0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..2.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.random_range(0.4..2.2)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[rng.random_range(0..n)] = true;
        let r = rmse(&pred, &gt, &mask).unwrap();
        rmse_worst = rmse_worst.max((r - common::naive_rmse(&pred, &gt, &mask)).abs());
        let d = delta_accuracy(&pred, &gt, &mask).unwrap();
        if d != common::naive_delta(&pred, &gt, &mask) {
            delta_mismatch += 1;
        }
        if !(d[0] <= d[1] && d[1] <= d[2]) {
            monotone_fail += 1;
        }
    }
    (
        rmse_worst <= 1e-12 && delta_mismatch == 0 && monotone_fail == 0,
        format!("1000 pairs: max rmse deviation {rmse_worst:.1e}, {delta_mismatch} delta mismatches, {monotone_fail} ordering violations"),
    )
}

// ---------------------------------------------------------------- 8

fn berhu_properties() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut jump, mut slope_jump, mut dominance_fail): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..1000 {
        let c: f64 = rng.random_range(1e-3..10.0);
        for sign in [1.0, -1.0] {
            let at = sign * c;
            let below = sign * c * (1.0 - 1e-12);
            let above = sign * c * (1.0 + 1e-12);
            jump = jump.max((berhu(below, c) - berhu(above, c)).abs()).max((berhu(at, c) - c).abs());
            slope_jump = slope_jump.max((berhu_dx(below, c) - berhu_dx(above, c)).abs());
        }
        let x: f64 = rng.random_range(-30.0..30.0);
        let b = berhu(x, c);
        let equal_expected = x.abs() <= c;
        if b < x.abs() || (b == x.abs()) != equal_expected {
            dominance_fail += 1;
        }
    }
    let (zero_loss, zero_grad) = berhu_loss(&[0.0f64; 16], &[true; 16]).unwrap();
    let zero_ok = zero_loss == 0.0 && zero_grad.iter().all(|&g| g == 0.0);
    (
        jump <= 1e-9 && slope_jump <= 1e-9 && dominance_fail == 0 && zero_ok,
        format!("value jump {jump:.1e}, slope jump {slope_jump:.1e} at |x|=c; {dominance_fail} dominance violations; zero residual loss {zero_loss}"),
    )
}

// ---------------------------------------------------------------- 10

fn determinism(train_set: &[Sample], test: &[Sample]) -> (bool, String) {
    let cfg = TrainConfig {
        phase1: Phase { lr: 1e-4, epochs: 2 },
        phase2: Phase { lr: 1e-5, epochs: 1 },
        seed: 42,
        ..TrainConfig::default()
    };
    let data = &train_set[..24];
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let t = train(data, &cfg, FeatureSelection::ALL, Some(dir.path())).unwrap();
        let ckpts: Vec<Vec<u8>> = t.checkpoints.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let (b, c) = evaluate(&t.model, test, MetricSpace::InverseDepth).unwrap();
        (ckpts, t.log.to_csv(), t.log.steps_csv(), reports_to_csv(&[b, c]))
    };
    let a = run();
    let b = run();
    let same = a == b && a.0.len() == 2;
    (
        same,
        format!(
            "two runs (24 samples, 2+1 epochs): checkpoints {} ({} + {} bytes), loss logs {}, metric CSVs {}",
            if a.0 == b.0 { "identical" } else { "DIFFER" },
            a.0[0].len(),
            a.0[1].len(),
            if a.1 == b.1 && a.2 == b.2 { "identical" } else { "DIFFER" },
            if a.3 == b.3 { "identical" } else { "DIFFER" }
        ),
    )
}

fn main() {
    println!("acceptance suite");
    let mut out = Vec::new();

    let t = Instant::now();
    let (pass, detail) = rasterizer_oracle();
    let elapsed = t.elapsed();
    report(&mut out, "1", "rasterizer vs ray-cast oracle", pass && elapsed < Duration::from_secs(120), detail, elapsed);

    let t = Instant::now();
    let (pass, detail) = gradient_suite();
    let elapsed = t.elapsed();
    report(&mut out, "2", "finite-difference gradient suite", pass && elapsed < Duration::from_secs(300), detail, elapsed);

    let t = Instant::now();
    let (pass, detail) = shape_conformance();
    report(&mut out, "3", "architecture shape conformance", pass, detail, t.elapsed());

    let t = Instant::now();
    let (pass, detail) = perfect_prediction();
    report(&mut out, "4", "perfect-prediction identity", pass, detail, t.elapsed());

    let mut train_set = bias_samples(1);
    train_set.extend(bias_samples(2));
    let test = eval_crops(&bias_samples(3));

    let t = Instant::now();
    let (pass, detail) = zero_model(&test);
    report(&mut out, "5", "zero-model identity", pass, detail, t.elapsed());

    let t = Instant::now();
    let cfg = TrainConfig {
        phase1: Phase { lr: 1e-4, epochs: 30 },
        phase2: Phase { lr: 1e-5, epochs: 10 },
        fine_tune_epochs: 10,
        seed: 6,
        ..TrainConfig::default()
    };
    let trained: Trained = train(&train_set, &cfg, FeatureSelection::ALL, None).unwrap();
    let (base, corr) = evaluate(&trained.model, &test, MetricSpace::InverseDepth).unwrap();
    let elapsed = t.elapsed();
    let ratio = corr.rmse / base.rmse;
    report(
        &mut out,
        "6",
        "desk-scale learning on the depth-bias task",
        ratio <= 0.5 && corr.delta[0] > base.delta[0] && elapsed < Duration::from_secs(1800),
        format!(
            "{} train / {} held-out frames; rmse {:.4} -> {:.4} (x{ratio:.3}), d1 {:.4} -> {:.4}; first/last epoch loss {:.4}/{:.4}",
            train_set.len(),
            test.len(),
            base.rmse,
            corr.rmse,
            base.delta[0],
            corr.delta[0],
            trained.log.epochs[0].mean_loss,
            trained.log.epochs.last().unwrap().mean_loss
        ),
        elapsed,
    );

    let t = Instant::now();
    let (pass, detail) = metric_oracles();
    report(&mut out, "7", "metric oracles", pass, detail, t.elapsed());

    let t = Instant::now();
    let (pass, detail) = berhu_properties();
    report(&mut out, "8", "BerHu properties", pass, detail, t.elapsed());

    let t = Instant::now();
    let rows = ablation_study(&trained.model, &test, AblationMode::Cheap, None, MetricSpace::InverseDepth).unwrap();
    let d1 = |label: &str| rows.iter().find(|r| r.label == label).unwrap().metrics.delta[0];
    let full = d1("full");
    let drop_inv = full - d1("no_inverse_depth");
    let drop_edge = full - d1("no_edge_ratio");
    let table: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.label, r.metrics.delta[0])).collect();
    report(
        &mut out,
        "9",
        "ablation direction",
        drop_inv > drop_edge && (full - corr.delta[0]).abs() == 0.0,
        format!("d1 drop without inverse_depth {drop_inv:.4} vs edge_ratio {drop_edge:.4}; {}", table.join(" ")),
        t.elapsed(),
    );

    let t = Instant::now();
    let (pass, detail) = determinism(&train_set, &test);
    report(&mut out, "10", "determinism", pass, detail, t.elapsed());

    let t = Instant::now();
    let no_rgb = FeatureSelection::ALL.without(FeatureKind::Rgb);
    let tuned = fine_tune(&trained.model, &train_set, &cfg, no_rgb).unwrap();
    let (_, tuned_corr) = evaluate(&tuned.model, &test, MetricSpace::InverseDepth).unwrap();
    let recovered = tuned_corr.delta[0] / corr.delta[0];
    report(
        &mut out,
        "S1",
        "fine-tuning without rgb recovers d1",
        recovered >= 0.95,
        format!(
            "{} epochs; d1 {:.4} -> {:.4} ({:.1}% of pre-drop); first-layer parameters {} -> {}",
            cfg.fine_tune_epochs,
            corr.delta[0],
            tuned_corr.delta[0],
            100.0 * recovered,
            trained.model.first_layer_param_count(),
            tuned.model.first_layer_param_count()
        ),
        t.elapsed(),
    );

    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        out.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
