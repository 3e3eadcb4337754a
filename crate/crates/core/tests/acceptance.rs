//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::time::Instant;

use num_bigint::{BigInt, BigUint, Sign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qzo::cli::{run, RunConfig, Settings};
use qzo::data::Dataset;
use qzo::model::{
    encode_checkpoint, partition_blocks, ptq_calibrate, q_layer_forward, Activation, Batch, FpBatch,
    FpModel, LayerKind, LayerSpec, QModel,
};
use qzo::optim::{apply_update, Scaling};
use qzo::oracle::{
    bp_grad_fp, estimate_similarity, rge, variance_report, Sampling, VarianceSetup,
};
use qzo::prng::{derive_seed, rademacher_fill, stream_seed, XorShift32};
use qzo::profiler::{analytic_memory, forward_count, mac_count, predict_step_cost, Method};
use qzo::quant::{BitWidth, QTensor};
use qzo::sparse::select_block;
use qzo::train::{evaluate, train, Schedule, TrainConfig, TrainScope};
use qzo::zo::{
    apply_grads, choose_mode, estimate_grad_np, estimate_grad_wp, estimate_step, train_step, Mode,
    PerturbConfig, PerturbMode, Scope,
};

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

// ---------------------------------------------------------------- builders

fn conv(out: usize, k: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::Conv2d {
        out_channels: out,
        kernel: (k, k),
        stride,
        padding: pad,
    }
}

fn dw(k: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::DepthwiseConv2d {
        kernel: (k, k),
        stride,
        padding: pad,
    }
}

fn fc(out: usize) -> LayerKind {
    LayerKind::FullyConnected { out_features: out }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// PTQ model from a random float init, calibrated on `calib` samples.
fn ptq_model(shape: &[usize], stack: &[(LayerKind, Activation)], seed: u64, calib: &[Vec<f64>]) -> QModel {
    let fp = FpModel::random(shape, stack, seed).unwrap();
    ptq_calibrate(&fp, calib).unwrap()
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform(rng, len, 0.0, 1.0)).collect()
}

fn batch_of(model: &QModel, rows: &[Vec<f64>], labels: &[usize]) -> Batch {
    let flat: Vec<f64> = rows.concat();
    Batch::from_features(&flat, model.input_shape(), labels, model.input_scale()).unwrap()
}

fn toy4(seed: u64) -> (QModel, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = [
        (conv(2, 3, 1, 1), Activation::Relu),
        (dw(3, 1, 1), Activation::Relu),
        (fc(8), Activation::Relu),
        (fc(3), Activation::Identity),
    ];
    let calib = random_images(&mut rng, 32, 144);
    let model = ptq_model(&[1, 12, 12], &stack, seed, &calib);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    let batch = batch_of(&model, &calib[..2], &labels);
    (model, batch)
}

fn toy3(seed: u64) -> (QModel, Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = [
        (conv(2, 3, 1, 1), Activation::Relu),
        (fc(6), Activation::Relu),
        (fc(3), Activation::Identity),
    ];
    let pool = random_images(&mut rng, 64, 36);
    let labels = (0..64).map(|_| rng.random_range(0..3)).collect();
    (ptq_model(&[1, 6, 6], &stack, seed, &pool), pool, labels)
}

fn mlp_stack(widths: &[usize]) -> Vec<(LayerKind, Activation)> {
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let act = if i + 1 < widths.len() {
                Activation::Relu
            } else {
                Activation::Identity
            };
            (fc(w), act)
        })
        .collect()
}

/// INT8 MLP 16-32-16-2 (1106 parameters) initialized at random and
/// calibrated on the synthetic task.
fn mlp(data: &Dataset, seed: u64) -> QModel {
    ptq_model(&[16], &mlp_stack(&[32, 16, 2]), seed, &data.rows())
}

fn synthetic(seed: u64) -> Dataset {
    Dataset::linearly_separable(640, 16, 0.1, seed).unwrap()
}

// ----------------------------------------------------------- criterion 1

/// `f = m · 2^e` for a positive normal `f32`.
fn dyadic(f: f32) -> (u64, i32) {
    let bits = f.to_bits();
    let exp = ((bits >> 23) & 0xFF) as i32;
    assert!(f > 0.0 && exp != 0 && exp != 255);
    (((bits & 0x7F_FFFF) | 0x80_0000) as u64, exp - 127 - 23)
}

/// `clip(round_half_away(acc · num/den · 2^shift), -128, 127)` in exact
/// integer arithmetic.
fn exact_requant(acc: &BigInt, num: u64, den: u64, shift: i32) -> i64 {
    let mut n: BigUint = acc.magnitude() * BigUint::from(num);
    let mut d = BigUint::from(den);
    if shift >= 0 {
        n <<= shift as usize;
    } else {
        d <<= (-shift) as usize;
    }
    let q = (n * 2u32 + &d) / (d * 2u32);
    let mag = u64::try_from(q).unwrap_or(u64::MAX).min(1 << 20) as i64;
    let v = if acc.sign() == Sign::Minus { -mag } else { mag };
    v.clamp(-128, 127)
}

/// Independent integer reference for one layer on one sample, or `None`
/// when the accumulator leaves the 32-bit range.
#[allow(clippy::too_many_arguments)]
fn reference_layer(
    kind: LayerKind,
    shape: &[usize],
    w: &[i32],
    b: &[i32],
    x: &[i32],
    scales: (f32, f32, f32),
    relu: bool,
) -> Option<Vec<i32>> {
    let (s_w, s_x, s_z) = scales;
    let mut accs: Vec<BigInt> = Vec::new();
    let mut window = 1u64;
    match kind {
        LayerKind::FullyConnected { out_features } => {
            let n = x.len();
            for o in 0..out_features {
                let mut a = BigInt::from(b[o]);
                for i in 0..n {
                    a += BigInt::from(w[o * n + i]) * BigInt::from(x[i]);
                }
                accs.push(a);
            }
        }
        LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } => {
            let (c, h, wd) = (shape[0], shape[1], shape[2]);
            let (oc_n, k, stride, pad, depthwise) = match kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => (out_channels, kernel.0, stride, padding, false),
                LayerKind::DepthwiseConv2d { kernel, stride, padding } => (c, kernel.0, stride, padding, true),
                _ => unreachable!(),
            };
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (wd + 2 * pad - k) / stride + 1;
            for oc in 0..oc_n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut a = BigInt::from(b[oc]);
                        let chans: Vec<usize> = if depthwise { vec![oc] } else { (0..c).collect() };
                        for (ci, &ic) in chans.iter().enumerate() {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let widx = if depthwise {
                                        (oc * k + ky) * k + kx
                                    } else {
                                        ((oc * c + ci) * k + ky) * k + kx
                                    };
                                    let xv = x[(ic * h + iy as usize) * wd + ix as usize];
                                    a += BigInt::from(w[widx]) * BigInt::from(xv);
                                }
                            }
                        }
                        accs.push(a);
                    }
                }
            }
        }
        LayerKind::GlobalAvgPool => {
            let hw = shape[1] * shape[2];
            window = hw as u64;
            for ch in 0..shape[0] {
                accs.push(x[ch * hw..(ch + 1) * hw].iter().map(|&v| BigInt::from(v)).sum());
            }
        }
    }
    let lo = BigInt::from(i32::MIN);
    let hi = BigInt::from(i32::MAX);
    if accs.iter().any(|a| *a < lo || *a > hi) {
        return None;
    }
    let (mx, ex) = dyadic(s_x);
    let (mz, ez) = dyadic(s_z);
    let (num, den, shift) = match kind {
        LayerKind::GlobalAvgPool => (mx, mz * window, ex - ez),
        _ => {
            let (mw, ew) = dyadic(s_w);
            (mw * mx, mz, ew + ex - ez)
        }
    };
    Some(
        accs.iter()
            .map(|a| {
                let v = exact_requant(a, num, den, shift) as i32;
                if relu {
                    v.max(0)
                } else {
                    v
                }
            })
            .collect(),
    )
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut checked, mut overflows, mut mismatches) = (0, 0, 0);
    for _ in 0..10_000 {
        let scale = |rng: &mut ChaCha8Rng| rng.random_range(1e-3f32..0.2);
        let (s_w, s_x, s_z) = (scale(&mut rng), scale(&mut rng), scale(&mut rng));
        let relu = rng.random_bool(0.5);
        let act = if relu { Activation::Relu } else { Activation::Identity };
        let c = rng.random_range(1..4);
        let h = rng.random_range(1..7);
        let wd = rng.random_range(1..7);
        let (kind, shape) = match rng.random_range(0..4) {
            0 => (fc(rng.random_range(1..6)), vec![rng.random_range(1..20)]),
            1 | 2 => {
                let k = rng.random_range(1..4usize);
                let pad = rng.random_range(0..2usize);
                if h + 2 * pad < k || wd + 2 * pad < k {
                    continue;
                }
                let stride = rng.random_range(1..3);
                let kind = if rng.random_bool(0.5) {
                    conv(rng.random_range(1..4), k, stride, pad)
                } else {
                    dw(k, stride, pad)
                };
                (kind, vec![c, h, wd])
            }
            _ => (LayerKind::GlobalAvgPool, vec![c, h, wd]),
        };
        let layer = match kind {
            LayerKind::GlobalAvgPool => LayerSpec::global_avg_pool(shape.clone(), s_x, s_z).unwrap(),
            _ => {
                let geom = qzo::model::Geometry::new(kind, shape.clone()).unwrap();
                let nw: usize = geom.weight_shape().unwrap().iter().product();
                let w = (0..nw).map(|_| rng.random_range(-128..=127)).collect();
                let big = rng.random_bool(0.02);
                let b = (0..geom.bias_len())
                    .map(|_| {
                        if big {
                            rng.random_range(i32::MAX - 5000..=i32::MAX) * if rng.random_bool(0.5) { 1 } else { -1 }
                        } else {
                            rng.random_range(-(1 << 20)..(1 << 20))
                        }
                    })
                    .collect();
                LayerSpec::linear(kind, shape.clone(), w, b, s_w, s_x, s_z, act).unwrap()
            }
        };
        let batch = rng.random_range(1..3usize);
        let len: usize = shape.iter().product();
        let xs: Vec<i32> = (0..batch * len).map(|_| rng.random_range(-128..=127)).collect();
        let mut tshape = vec![batch];
        tshape.extend(&shape);
        let x = QTensor::from_raw(xs.clone(), tshape, s_x as f64, BitWidth::Int8, true).unwrap();
        let empty = Vec::new();
        let (w, b) = match (layer.weights(), layer.bias()) {
            (Some(w), Some(b)) => (w.data(), b.data()),
            _ => (&empty[..], &empty[..]),
        };
        let expected: Option<Vec<i32>> = xs
            .chunks(len)
            .map(|xi| reference_layer(kind, &shape, w, b, xi, (s_w, s_x, s_z), relu && kind != LayerKind::GlobalAvgPool))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        let got = q_layer_forward(&layer, &x);
        checked += 1;
        match (expected, got) {
            (None, Err(_)) => overflows += 1,
            (Some(e), Ok(g)) if g.data() == &e[..] => {}
            _ => mismatches += 1,
        }
    }
    outcome(
        mismatches == 0 && checked >= 9_000,
        format!("{checked} instances, {overflows} overflow rejections, {mismatches} mismatches"),
    )
}

// ----------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let d = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let a = uniform(&mut rng, d, 0.5, 2.0);
    let theta = uniform(&mut rng, d, -1.0, 1.0);
    let grad: Vec<f64> = a.iter().zip(&theta).map(|(a, t)| a * t).collect();
    let trials = 100_000;
    let mut mean = vec![0.0; d];
    for t in 0..trials {
        let seed = derive_seed(stream_seed(2, t), 0, 0, 0);
        let g = rge(&theta, &[(0, seed)], 1e-4, |p, _| {
            0.5 * p.iter().zip(&a).map(|(x, a)| a * x * x).sum::<f64>()
        })
        .unwrap();
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / trials as f64;
        }
    }
    let err = mean.iter().zip(&grad).map(|(m, g)| (m - g).powi(2)).sum::<f64>().sqrt();
    let rel = err / grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    outcome(rel <= 0.02, format!("relative error {rel:.4} (limit 0.02)"))
}

// ----------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut cells = 0;
    let mut seed = 300;
    for d in [10, 50, 100] {
        for n in [1, 5, 10] {
            for q in [1, 5, 10] {
                seed += 1;
                let r = variance_report(&VarianceSetup {
                    d,
                    n,
                    q,
                    mu: 1e-4,
                    s: 1.0,
                    sigma: (1.0 / d as f64).sqrt(),
                    trials: 10_000,
                    seed,
                    sampling: Sampling::IndependentTerms,
                })
                .unwrap();
                cells += 1;
                if r.rel_dev >= worst.0 {
                    worst = (r.rel_dev, format!("d={d} N={n} Q={q}"));
                }
            }
        }
    }
    // samples reused across queries follow the (d - 1 + Q) noise term
    let shared = variance_report(&VarianceSetup {
        d: 50,
        n: 5,
        q: 10,
        mu: 1e-4,
        s: 1.0,
        sigma: (1.0f64 / 50.0).sqrt(),
        trials: 10_000,
        seed: 399,
        sampling: Sampling::PerSample,
    })
    .unwrap();
    outcome(
        worst.0 < 0.05,
        format!(
            "{cells} cells, worst deviation {:.4} at {} (limit 0.05); reused-sample variant: {:.4} from its own law, {:.4} from the independent-term law",
            worst.0, worst.1, shared.rel_dev_exact, shared.rel_dev
        ),
    )
}

// ----------------------------------------------------------- criterion 4

const DRAWS: u64 = 8;

fn criterion_4() -> Outcome {
    let reps = 20;
    let (mut ok, mut layerwise_wins, mut adaptive_ok) = (0, 0, 0);
    let mut means = [0.0; 4];
    let modes = [PerturbMode::ModelWp, PerturbMode::LayerWp, PerturbMode::LayerNp, PerturbMode::Adaptive];
    for rep in 0..reps {
        let (mut model, batch) = toy4(400 + rep);
        let bp = bp_grad_fp(&FpModel::from_qmodel(&model), &FpBatch::from_batch(&batch)).unwrap();
        // per mode, per layer cosine averaged over independent draws
        let mut cos = [[0.0; 4]; 4];
        let mut forwards = Vec::new();
        for (mi, mode) in modes.into_iter().enumerate() {
            for draw in 0..DRAWS {
                let cfg = PerturbConfig {
                    mode,
                    q: 40,
                    mu: 1,
                    base_seed: stream_seed(4, rep * DRAWS + draw),
                    ..Default::default()
                };
                let (grads, r) = estimate_step(&mut model, &batch, &cfg, 0).unwrap();
                forwards.push(r.forwards);
                for g in &grads {
                    cos[mi][g.layer] += estimate_similarity(&model, g, &bp).unwrap() / DRAWS as f64;
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for (m, c) in means.iter_mut().zip(&cos) {
            *m += mean(c) / reps as f64;
        }
        let budget = forwards.iter().all(|&f| f == forwards[0]);
        let lw = mean(&cos[1]) > mean(&cos[0]);
        let ad = (0..4).all(|i| cos[3][i] >= cos[1][i].max(cos[2][i]));
        layerwise_wins += lw as usize;
        adaptive_ok += ad as usize;
        ok += (budget && lw && ad) as usize;
    }
    outcome(
        ok >= 16,
        format!(
            "{ok}/{reps} repetitions (need 16): layer-wise WP > model-wise WP in {layerwise_wins}, adaptive >= max(WP, NP) on every layer in {adaptive_ok}; mean cosine model-wp {:.3}, layer-wp {:.3}, layer-np {:.3}, adaptive {:.3}",
            means[0], means[1], means[2], means[3]
        ),
    )
}

// ----------------------------------------------------------- criterion 5

fn expected_dims(kind: LayerKind, shape: &[usize]) -> (usize, usize) {
    let out_hw = |k: usize, s: usize, p: usize| ((shape[1] + 2 * p - k) / s + 1) * ((shape[2] + 2 * p - k) / s + 1);
    match kind {
        LayerKind::FullyConnected { out_features } => {
            let n: usize = shape.iter().product();
            (out_features * n + out_features, out_features)
        }
        LayerKind::Conv2d {
            out_channels,
            kernel: (k, _),
            stride,
            padding,
        } => (
            out_channels * shape[0] * k * k + out_channels,
            out_channels * out_hw(k, stride, padding),
        ),
        LayerKind::DepthwiseConv2d {
            kernel: (k, _),
            stride,
            padding,
        } => (shape[0] * k * k + shape[0], shape[0] * out_hw(k, stride, padding)),
        LayerKind::GlobalAvgPool => (0, shape[0]),
    }
}

fn criterion_5() -> Outcome {
    let mut models = vec![toy4(5).0, toy3(5).0, mlp(&synthetic(5), 5)];
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for s in 0..40 {
        let c = rng.random_range(1..9);
        let h = rng.random_range(3..17);
        let stack = vec![
            (conv(rng.random_range(1..17), rng.random_range(1..4), rng.random_range(1..3), 1), Activation::Relu),
            (dw(3, rng.random_range(1..3), 1), Activation::Relu),
            (conv(rng.random_range(1..33), 1, 1, 0), Activation::Relu),
            (LayerKind::GlobalAvgPool, Activation::Identity),
            (fc(rng.random_range(2..11)), Activation::Identity),
        ];
        let calib = random_images(&mut rng, 2, c * h * h);
        models.push(ptq_model(&[c, h, h], &stack, s, &calib));
    }
    let (mut layers, mut wrong) = (0, 0);
    for m in &models {
        for l in m.layers().iter().filter(|l| l.has_params()) {
            let (d_w, d_a) = expected_dims(l.kind(), l.in_shape());
            let want = if d_w < d_a { Mode::Wp } else { Mode::Np };
            layers += 1;
            wrong += (choose_mode(l) != want || l.d_w() != d_w || l.d_a() != d_a) as usize;
        }
    }
    outcome(wrong == 0, format!("{layers} layers over {} models, {wrong} disagreements", models.len()))
}

// ----------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let (mut model, pool, labels) = toy3(606);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let eta = 0.05;
    let (mut identical, mut changed) = (0, 0usize);
    let mut modes_seen = std::collections::BTreeSet::new();
    for step in 0..100u64 {
        let idx: Vec<usize> = (0..3).map(|_| rng.random_range(0..pool.len())).collect();
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| pool[i].clone()).collect();
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch = batch_of(&model, &rows, &lab);
        let cfg = PerturbConfig {
            mode: PerturbMode::Adaptive,
            q: 6,
            mu: 1,
            base_seed: stream_seed(6, step),
            ..Default::default()
        };
        let mut reference = model.clone();
        let q = cfg.queries_per_layer(reference.trainable_layers().len());
        let mut grads = Vec::new();
        for i in reference.trainable_layers() {
            let g = match choose_mode(reference.layer(i)) {
                Mode::Wp => estimate_grad_wp(&mut reference, Scope::Layer(i), &batch, q, &cfg).unwrap(),
                Mode::Np => estimate_grad_np(&reference, i, &batch, q, &cfg).unwrap(),
            };
            modes_seen.insert(choose_mode(reference.layer(i)).name());
            grads.extend(g.layers);
        }
        apply_grads(&mut reference, &grads, eta, Scaling::default()).unwrap();
        let before = encode_checkpoint(&model).unwrap();
        train_step(&mut model, &batch, &cfg, eta, Scaling::default(), step).unwrap();
        let after = encode_checkpoint(&model).unwrap();
        changed += before.iter().zip(&after).filter(|(a, b)| a != b).count();
        identical += (after == encode_checkpoint(&reference).unwrap()) as usize;
        model = reference;
    }
    outcome(
        identical == 100 && changed > 0,
        format!(
            "{identical}/100 steps bit-identical, modes {:?}, {changed} checkpoint bytes changed by updates",
            modes_seen
        ),
    )
}

// ----------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data.csv");
    Dataset::linearly_separable(256, 16, 0.1, 7).unwrap().write_csv(&data).unwrap();
    let cfg = |command: &str, out: &str, model: Option<&str>| {
        let mut s = Settings::parse(
            "[run]\nseed = 77\n[model]\narch = fc:32:relu,fc:16:relu,fc:2\nblocks = 3\n\
             [train]\neta0 = 0.05\nepochs = 2\nbatch_size = 4\naccumulation = 2\nselect_block = true\n\
             [perturb]\nq = 12\n",
        )
        .unwrap();
        s.insert("run.command", command);
        s.insert("paths.data", &data.to_string_lossy());
        s.insert("paths.out", &root.join(out).to_string_lossy());
        if let Some(m) = model {
            s.insert("paths.model", &root.join(m).to_string_lossy());
        }
        RunConfig::from_settings(s).unwrap()
    };
    run(&cfg("init", "init", None)).unwrap();
    run(&cfg("train", "a", Some("init/model.ckpt"))).unwrap();
    run(&cfg("train", "b", Some("init/model.ckpt"))).unwrap();
    let same = |f: &str| fs::read(root.join("a").join(f)).unwrap() == fs::read(root.join("b").join(f)).unwrap();
    let rows = fs::read_to_string(root.join("a/metrics.csv")).unwrap().lines().count() - 1;
    let pass = same("final.ckpt") && same("metrics.csv") && same("selection.csv");
    outcome(pass, format!("{rows} metric rows; checkpoints, metrics and selection identical: {pass}"))
}

// ----------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut checked, mut worst) = (0, 0.0f64);
    let mut violations = 0;
    while checked < 10_000 {
        let s = rng.random_range(1e-3..0.1);
        let eta = rng.random_range(1e-5..1e-2);
        let theta: Vec<i32> = (0..100).map(|_| rng.random_range(-120..=120)).collect();
        // gradient of the loss with respect to the dequantized parameters
        let g_fp: Vec<f64> = (0..100).map(|_| rng.random_range(-50.0..50.0)).collect();
        let g_q: Vec<f64> = g_fp.iter().map(|g| g * s).collect();
        let t = QTensor::from_raw(theta.clone(), vec![100], s, BitWidth::Int8, true).unwrap();
        let next = apply_update(&t, &g_q, eta, 1, 1, 1, s).unwrap();
        for ((&th, &g), &nq) in theta.iter().zip(&g_fp).zip(next.data()) {
            let fp_next = s * th as f64 - eta * g;
            if fp_next / s < -128.0 || fp_next / s > 127.0 {
                continue;
            }
            checked += 1;
            let dev = (s * nq as f64 - fp_next).abs() / s;
            worst = worst.max(dev);
            violations += (dev > 0.5 + 1e-9) as usize;
        }
    }
    outcome(
        violations == 0,
        format!("{checked} parameters, worst deviation {worst:.6}·s (bound 0.5·s), {violations} violations"),
    )
}

// ------------------------------------------------------ criteria 9 and 10

fn mlp_run(seed: u64, steps: usize, q: usize, eta0: f64, scaling: Scaling) -> (f64, f64) {
    let data = synthetic(seed);
    let (tr, held) = data.holdout_split().unwrap();
    let mut model = mlp(&tr, seed);
    let batch = tr.to_batch(model.input_scale(), None).unwrap();
    let cfg = TrainConfig {
        eta0,
        epochs: 100,
        batch_size: 4,
        accumulation: 1,
        perturb: PerturbConfig {
            q,
            ..Default::default()
        },
        scaling,
        schedule: Schedule::Cosine,
        seed: seed as u32,
        max_steps: Some(steps),
        ..Default::default()
    };
    let mut cfg = cfg;
    cfg.epochs = steps.div_ceil(batch.len().div_ceil(cfg.batch_size));
    train(&mut model, &batch, &cfg, |_| Ok(())).unwrap();
    let (loss, _) = evaluate(&model, &batch).unwrap();
    let (_, acc) = evaluate(&model, &held.to_batch(model.input_scale(), None).unwrap()).unwrap();
    (loss, acc)
}

const MLP_ETA0: f64 = 0.05;

fn criterion_9() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let both = mlp_run(seed, 200, 20, MLP_ETA0, Scaling { gns: true, qas: true }).0;
        let no_gns = mlp_run(seed, 200, 20, MLP_ETA0, Scaling { gns: false, qas: true }).0;
        let no_qas = mlp_run(seed, 200, 20, MLP_ETA0, Scaling { gns: true, qas: false }).0;
        wins += (both < no_gns && both < no_qas) as usize;
        rows.push(format!("{both:.3}/{no_gns:.3}/{no_qas:.3}"));
    }
    outcome(
        wins >= 4,
        format!("{wins}/5 seeds (need 4); final loss both/no-GNS/no-QAS: {}", rows.join(", ")),
    )
}

fn criterion_10() -> Outcome {
    let mut hits = 0;
    let mut accs = Vec::new();
    for seed in 1..=5u64 {
        let acc = mlp_run(100 + seed, 500, 20, MLP_ETA0, Scaling::default()).1;
        hits += (acc >= 0.9) as usize;
        accs.push(format!("{acc:.3}"));
    }
    outcome(hits >= 4, format!("{hits}/5 seeds reach 0.90 (need 4); held-out accuracy {}", accs.join(", ")))
}

// ---------------------------------------------------------- criterion 11

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut formula_miss = 0;
    for _ in 0..2000 {
        let [l, da, dw, n, q]: [u64; 5] = std::array::from_fn(|_| rng.random_range(1..2000));
        let want = [
            n * (2 * da + dw),
            l * dw,
            l * q,
            n * l * da + l * dw,
            n * l * q + dw,
            n * l * da + l * dw,
        ];
        let methods = [
            Method::Inference,
            Method::WpVanilla,
            Method::WpEfficient,
            Method::NpVanilla,
            Method::NpEfficient,
            Method::Bp,
        ];
        for (m, w) in methods.into_iter().zip(want) {
            formula_miss += (analytic_memory(l, da, dw, n, q, m).unwrap() != w) as usize;
        }
    }
    let mut runs = 0;
    let mut count_miss = 0;
    let data = synthetic(11);
    let mut mlp4 = ptq_model(&[16], &mlp_stack(&[32, 16, 8, 2]), 11, &data.rows());
    let k = 4;
    mlp4.set_partition(partition_blocks(&mlp4, k).unwrap(), k).unwrap();
    let models: Vec<(QModel, Batch)> = vec![
        toy4(11),
        {
            let (m, pool, labels) = toy3(11);
            let b = batch_of(&m, &pool[..5], &labels[..5]);
            (m, b)
        },
        {
            let b = data.subset(&[0, 1, 2]).unwrap().to_batch(mlp4.input_scale(), None).unwrap();
            (mlp4, b)
        },
    ];
    for (model, batch) in models {
        let mut scopes = vec![None];
        scopes.extend((0..model.num_blocks()).map(Some));
        for scope in scopes {
            for mode in [PerturbMode::ModelWp, PerturbMode::LayerWp, PerturbMode::LayerNp, PerturbMode::Adaptive] {
                for q in [3, 8] {
                    let mut m = model.clone();
                    match scope {
                        Some(b) => m.set_trainable(b).unwrap(),
                        None => m.set_all_trainable(),
                    }
                    let cfg = PerturbConfig {
                        mode,
                        q,
                        ..Default::default()
                    };
                    let (_, r) = estimate_step(&mut m, &batch, &cfg, 0).unwrap();
                    let p = predict_step_cost(&m, &cfg, batch.len()).unwrap();
                    let mut miss = r.forwards != p.forwards || r.macs != p.macs;
                    if mode == PerturbMode::ModelWp {
                        let (n, q) = (batch.len() as u64, q as u64);
                        miss |= r.forwards != forward_count(Method::WpEfficient, n, q);
                        miss |= r.macs != mac_count(&m, Method::WpEfficient, n, q);
                    }
                    runs += 1;
                    count_miss += miss as usize;
                }
            }
        }
    }
    outcome(
        formula_miss == 0 && count_miss == 0,
        format!("12000 closed-form evaluations, {formula_miss} mismatches; {runs} engine steps, {count_miss} count mismatches"),
    )
}

// ---------------------------------------------------------- criterion 12

fn criterion_12() -> Outcome {
    let data = Dataset::linearly_separable(400, 16, 0.1, 12).unwrap();
    let (tr, held) = data.holdout_split().unwrap();
    let mut model = ptq_model(&[16], &mlp_stack(&[32, 16, 8, 2]), 12, &tr.rows());
    model.set_partition(partition_blocks(&model, 4).unwrap(), 4).unwrap();
    let tb = tr.to_batch(model.input_scale(), None).unwrap();
    let hb = held.to_batch(model.input_scale(), None).unwrap();
    let cfg = TrainConfig {
        eta0: 0.05,
        batch_size: 4,
        perturb: PerturbConfig {
            q: 8,
            ..Default::default()
        },
        seed: 12,
        ..Default::default()
    };
    let report = select_block(&model, &tb, &hb, &cfg).unwrap();
    let gains: Vec<f64> = report.trials.iter().map(|t| t.acc_after - t.acc_before).collect();
    let mut best = 0;
    for (i, &g) in gains.iter().enumerate() {
        if g > gains[best] {
            best = i;
        }
    }
    let base_acc = model.accuracy(&hb).unwrap();
    let selection_ok = report.trials.len() == 4
        && report.chosen == best
        && report.trials.iter().all(|t| t.acc_before == base_acc && t.gain == t.acc_after - t.acc_before);
    let snapshot = |m: &QModel| -> Vec<Vec<i32>> {
        m.layers()
            .iter()
            .map(|l| {
                let mut v = l.weights().map(|w| w.data().to_vec()).unwrap_or_default();
                v.extend(l.bias().map(|b| b.data().to_vec()).unwrap_or_default());
                v
            })
            .collect()
    };
    let mut frozen_ok = true;
    let mut trained_changed = 0;
    for block in 0..4 {
        let mut m = model.clone();
        let before = snapshot(&m);
        train(
            &mut m,
            &tb,
            &TrainConfig {
                scope: TrainScope::Block(block),
                max_steps: Some(40),
                ..cfg.clone()
            },
            |_| Ok(()),
        )
        .unwrap();
        let after = snapshot(&m);
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            if m.block_of()[i] == Some(block) {
                trained_changed += (a != b) as usize;
            } else {
                frozen_ok &= a == b;
            }
        }
    }
    outcome(
        selection_ok && frozen_ok,
        format!(
            "gains {:?}, chosen {} (argmax {best}); frozen layers unchanged: {frozen_ok}; {trained_changed} trained layers moved",
            gains.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>(),
            report.chosen
        ),
    )
}

// ---------------------------------------------------------- criterion 13

fn criterion_13() -> Outcome {
    // 1 ^ (1 << 13) = 8193; 8193 >> 17 = 0; 8193 ^ (8193 << 5) = 270369
    let mut x = 1u32;
    x ^= x << 13;
    x ^= x >> 17;
    x ^= x << 5;
    let mut rng = XorShift32::new(1).unwrap();
    let first = rng.next_u32();
    let xi = rademacher_fill(1, 1).unwrap()[0];
    let n = 1_000_000;
    let mut r = XorShift32::new(1).unwrap();
    let mean = (0..n).map(|_| r.rademacher() as f64).sum::<f64>() / n as f64;
    let bound = 3.0 / (n as f64).sqrt();
    outcome(
        x == 270_369 && first == 270_369 && xi == -1 && mean.abs() <= bound,
        format!("first draw {first}, first sign {xi}, mean of {n} draws {mean:.5} (bound {bound:.3})"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 13] = [
        ("quantized forward exactness", criterion_1),
        ("RGE unbiasedness", criterion_2),
        ("variance law", criterion_3),
        ("layer-wise vs model-wise similarity", criterion_4),
        ("adaptive rule", criterion_5),
        ("single-pass step equivalence", criterion_6),
        ("seed-replay determinism", criterion_7),
        ("QAS tracking", criterion_8),
        ("scaling ablation", criterion_9),
        ("end-to-end convergence", criterion_10),
        ("profiler", criterion_11),
        ("block selection", criterion_12),
        ("XORShift/Rademacher", criterion_13),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let o = f();
        failed += !o.pass as usize;
        println!(
            "{} criterion {:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
