//! Acceptance criteria A1-A9. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segcls::data_model::{labels_to_regions, regions_to_labels, Grid3, LabelVolume, MultimodalVolume};
use segcls::inference::{all_flips, predict_case, tta_ensemble_logits, AverageSpace, InferenceConfig, Predictor};
use segcls::losses::{
    bce_loss, bce_loss_grad, dice_loss, dice_loss_grad, focal_loss, focal_loss_grad, slice_targets, total_loss, LossConfig,
};
use segcls::metrics::{dice_score, hd95, sensitivity_specificity, HD95_EMPTY_SENTINEL};
use segcls::networks::{load_checkpoint, read_checkpoint_header, ForwardCtx, Network, NetworkConfig};
use segcls::preprocess::{pad_to_multiple, AugmentConfig, PreparedCase};
use segcls::schedule::{cosine_lr, make_folds, poly_lr, SchedulerConfig};
use segcls::synth::{generate_case, SynthConfig};
use segcls::train::{evaluate_validation, fit, FitOptions, TrainConfig, TrainingCase};
use segcls_tensor::{Graph, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("A1", "shape conformance", a1_shapes),
        ("A2", "closed-form values", a2_closed_form),
        ("A3", "gradient checks", a3_gradients),
        ("A4", "overfit", a4_overfit),
        ("A5", "gating efficacy", a5_gating),
        ("A6", "hd95 oracle equivalence", a6_hd95),
        ("A7", "tta correctness", a7_tta),
        ("A8", "determinism and checkpoint round trip", a8_determinism),
        ("A9", "round trips", a9_round_trips),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| id.contains(p.as_str()) || name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn a1_shapes() -> Outcome {
    let strip = |t: Vec<(String, Vec<usize>)>| -> Vec<(String, Vec<usize>)> { t.into_iter().map(|(k, s)| (k, s[1..].to_vec())).collect() };
    let bifpn = Network::<f32>::meta(NetworkConfig::bifpn()).map_err(|e| e.to_string())?;
    let trace = strip(bifpn.trace_shapes(&[1, 4, 128, 128, 96]).map_err(|e| e.to_string())?);
    let nested = Network::<f32>::meta(NetworkConfig::nested_unet()).map_err(|e| e.to_string())?;
    let trace_n = strip(nested.trace_shapes(&[1, 4, 128, 128, 128]).map_err(|e| e.to_string())?);
    let expected: [(&str, &[usize], &[(String, Vec<usize>)]); 16] = [
        ("encoder.level1", &[16, 64, 64, 48], &trace),
        ("encoder.level2", &[32, 32, 32, 24], &trace),
        ("encoder.level3", &[64, 16, 16, 12], &trace),
        ("encoder.level4", &[128, 8, 8, 6], &trace),
        ("decoder.concat", &[1024, 64, 64, 48], &trace),
        ("classifier.conv", &[512, 64, 64, 48], &trace),
        ("classifier.pooled", &[512, 48], &trace),
        ("classifier.restored", &[512, 96], &trace),
        ("classifier.lstm", &[1024, 96], &trace),
        ("classifier.logits", &[3, 96], &trace),
        ("seg_logits", &[3, 128, 128, 96], &trace),
        ("nested.features", &[128, 128, 128, 128], &trace_n),
        ("classifier.conv", &[256, 128, 128, 128], &trace_n),
        ("classifier.pooled", &[256, 128], &trace_n),
        ("classifier.lstm", &[512, 128], &trace_n),
        ("classifier.logits", &[3, 128], &trace_n),
    ];
    for (name, shape, t) in expected {
        let got = t.iter().find(|(k, _)| k == name).map(|(_, s)| s.clone());
        ensure(got.as_deref() == Some(shape), || format!("{name}: expected {shape:?}, got {got:?}"))?;
    }
    for l in 1..=3 {
        for (k, s) in [(1, [256, 64, 64, 48]), (2, [256, 32, 32, 24]), (3, [256, 16, 16, 12]), (4, [256, 8, 8, 6])] {
            let name = format!("bifpn.layer{l}.level{k}");
            let got = trace.iter().find(|(n, _)| *n == name).map(|(_, s)| s.clone());
            ensure(got.as_deref() == Some(&s[..]), || format!("{name}: expected {s:?}, got {got:?}"))?;
        }
    }
    ensure(trace_n.iter().any(|(k, s)| k == "seg_logits" && s == &[3, 128, 128, 128]), || "nested seg logits".into())?;
    Ok(format!("{} BiFPN and {} UNet++ shapes match", expected.len() - 5 + 12, 5))
}

fn a2_closed_form() -> Outcome {
    let tol = 1e-6;
    let checks = [
        ("dice ones", dice_loss(&[1.0; 8], &[1.0; 8], 1e-5).unwrap(), 6.249996093998789e-07),
        ("dice zeros", dice_loss(&[0.0; 6], &[1.0; 6], 1e-5).unwrap(), 1.0),
        ("dice half", dice_loss(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 1e-5).unwrap(), 0.5000012499968749),
        ("focal", focal_loss(&[0.5], &[1.0], 2.0, 0.25).unwrap(), 0.04332169878499658),
        ("focal p_t=1", focal_loss(&[1.0], &[1.0], 2.0, 0.25).unwrap(), 0.0),
        ("bce", bce_loss(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]).unwrap(), 0.6931471805599453),
        ("cosine t=0", cosine_lr(0, 400, 1e-3), 1e-3),
        ("cosine t=T/4", cosine_lr(100, 400, 1e-3), 0.0008535533905932737),
        ("cosine t=T", cosine_lr(400, 400, 1e-3), 0.0),
        ("poly e=0", poly_lr(0, 200, 1e-3, 0.9), 1e-3),
        ("poly e=100", poly_lr(100, 200, 1e-3, 0.9), 0.0005358867312681466),
        ("poly e=N", poly_lr(200, 200, 1e-3, 0.9), 0.0),
    ];
    let mut worst = 0.0f64;
    for (name, got, want) in checks {
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= tol, || format!("{name}: {got} vs {want}"))?;
    }
    Ok(format!("{} values, max abs error {worst:.1e}", checks.len()))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn a3_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut worst = 0.0f64;
    type LossFn = Box<dyn Fn(&[f64], &[f64]) -> f64>;
    type GradFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64>>;
    let kernels: [(&str, LossFn, GradFn); 3] = [
        ("dice", Box::new(|p, g| dice_loss(p, g, 1e-5).unwrap()), Box::new(|p, g| dice_loss_grad(p, g, 1e-5).unwrap())),
        ("focal", Box::new(|p, g| focal_loss(p, g, 2.0, 0.25).unwrap()), Box::new(|p, g| focal_loss_grad(p, g, 2.0, 0.25).unwrap())),
        ("bce", Box::new(|p, g| bce_loss(p, g).unwrap()), Box::new(|p, g| bce_loss_grad(p, g).unwrap())),
    ];
    for (name, loss, grad) in &kernels {
        for _ in 0..5 {
            let n = rng.random_range(4..=64);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
            let g: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
            let a = grad(&p, &g);
            for i in 0..n {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp[i] += h;
                pm[i] -= h;
                let num = (loss(&pp, &g) - loss(&pm, &g)) / (2.0 * h);
                let e = rel_err(a[i], num);
                worst = worst.max(e);
                ensure(e < 1e-4, || format!("{name} element {i}: analytic {} numeric {num}", a[i]))?;
            }
        }
    }
    let loss_worst = worst;

    // two-level reduced BiFPN, f64, input 4×16³, full training loss
    let mut cfg = NetworkConfig::bifpn_reduced();
    cfg.encoder_channels = vec![8, 16];
    cfg.dropout_rate = 0.0;
    let mut net = Network::<f64>::new(cfg, 11).map_err(|e| e.to_string())?;
    let x = Tensor::<f64>::from_fn(&[1, 4, 16, 16, 16], |_| rng.random_range(-1.0..1.0));
    let shape = [1usize, 3, 16, 16, 16];
    let region_gt: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect();
    let slice_gt = slice_targets(&region_gt, &shape).unwrap();
    let loss_cfg = LossConfig::default();
    let eval = |net: &Network<f64>, grads: bool| -> (f64, Option<segcls_tensor::Gradients<f64>>) {
        let graph = Graph::new();
        let ctx = ForwardCtx::new(&graph, net.store(), true, 0);
        let out = net.forward(&ctx, graph.constant(x.clone())).unwrap();
        let (l, _) = total_loss(&graph, out.seg_logits, out.slice_logits, &region_gt, &slice_gt, &loss_cfg).unwrap();
        let value = graph.value(l).item();
        (value, grads.then(|| graph.backward(l)))
    };
    let (l0, grads) = eval(&net, true);
    let grads = grads.expect("requested");
    // relative error is measured against a floor well above the roundoff
    // of the central difference itself
    let floor = 1e4 * 4.0 * f64::EPSILON * l0.abs().max(1.0) / h;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let ids: Vec<_> = net.store().ids().filter(|&id| net.store().is_trainable(id)).collect();
    let (mut checked, mut kinks) = (0usize, 0usize);
    let mut net_worst = 0.0f64;
    for id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(net.store().value(id).shape()));
        let n = analytic.numel();
        let picks: Vec<usize> = (0..4.min(n)).map(|_| rng.random_range(0..n)).collect();
        for i in picks {
            let orig = net.store().value(id).data()[i];
            net.store_mut().value_mut(id).data_mut()[i] = orig + h;
            let lp = eval(&net, false).0;
            net.store_mut().value_mut(id).data_mut()[i] = orig - h;
            let lm = eval(&net, false).0;
            net.store_mut().value_mut(id).data_mut()[i] = orig;
            let a = analytic.data()[i];
            let central = (lp - lm) / (2.0 * h);
            let e = rel(a, central);
            checked += 1;
            if e < 1e-4 {
                net_worst = net_worst.max(e);
                continue;
            }
            // a ReLU boundary inside [w - h, w + h] spoils only one side; the
            // other side must still agree
            let (fwd, bwd) = ((lp - l0) / h, (l0 - lm) / h);
            if rel(a, fwd).min(rel(a, bwd)) < 1e-4 {
                kinks += 1;
                continue;
            }
            return Err(format!("{} [{i}]: analytic {a:.6e} central {central:.6e} forward {fwd:.6e} backward {bwd:.6e}", net.store().name(id)));
        }
    }
    ensure(kinks * 10 <= checked, || format!("{kinks} of {checked} entries straddle a kink"))?;
    Ok(format!("loss kernels max rel err {loss_worst:.1e}; network {checked} parameter entries max rel err {net_worst:.1e} (floor {floor:.0e}), {kinks} at a kink"))
}

fn synth_training_cases(cfg: &SynthConfig) -> Vec<TrainingCase> {
    (0..cfg.n_cases)
        .map(|i| {
            let c = generate_case(cfg, i).unwrap();
            TrainingCase::prepare(c.id, &c.volume, &c.labels).unwrap()
        })
        .collect()
}

fn a4_overfit() -> Outcome {
    let cases = synth_training_cases(&SynthConfig { n_cases: 4, shape: [64, 64, 64], seed: 0, ..Default::default() });
    let steps = 500;
    let opts = FitOptions {
        network: NetworkConfig::bifpn_reduced(),
        train: TrainConfig { batch_size: 4, max_steps: Some(steps), ..Default::default() },
        scheduler: SchedulerConfig { total_epochs: steps, warmup_epochs: 5, base_lr: 3e-3, ..Default::default() },
        loss: LossConfig::default(),
        augment: AugmentConfig { crop_size: [32, 32, 32], ..Default::default() },
        output_dir: None,
    };
    let res = fit(&cases, &[], &opts, &mut |_| {}).map_err(|e| e.to_string())?;
    let v = evaluate_validation(&res.network, &cases, &opts.loss).map_err(|e| e.to_string())?;
    let detail = format!("{} steps, training Dice WT {:.3}, slice accuracy {:.3}", res.steps, v.dice[0], v.slice_accuracy);
    ensure(v.dice[0] >= 0.8 && v.slice_accuracy >= 0.9, || detail.clone())?;
    Ok(detail)
}

/// Thresholds normalized T1Gd for every region; its slice head calls a
/// slice positive when at least `min_voxels` voxels fire there.
struct IntensityModel {
    threshold: f32,
    min_voxels: f64,
}

impl Predictor for IntensityModel {
    fn predict(&self, x: &Tensor<f32>) -> segcls::Result<(Tensor<f64>, Tensor<f64>)> {
        let s = x.shape();
        let (nx, ny, nz) = (s[2], s[3], s[4]);
        let vol = nx * ny * nz;
        let t1gd = &x.data()[vol..2 * vol];
        let logits: Vec<f64> = t1gd.iter().map(|&v| f64::from(v - self.threshold) * 10.0).collect();
        let mut counts = vec![0.0; nz];
        for (o, &l) in logits.iter().enumerate() {
            if l > 0.0 {
                counts[o % nz] += 1.0;
            }
        }
        let slice: Vec<f64> = counts.iter().map(|&c| c - self.min_voxels + 0.5).collect();
        let seg = [logits.clone(), logits.clone(), logits].concat();
        Ok((Tensor::new(&[1, 3, nx, ny, nz], seg), Tensor::new(&[1, 3, nz], [slice.clone(), slice.clone(), slice].concat())))
    }
}

fn a5_gating() -> Outcome {
    let cfg = SynthConfig { n_cases: 6, shape: [48, 48, 48], seed: 21, speckles: 8, ..Default::default() };
    let model = IntensityModel { threshold: 2.5, min_voxels: 4.0 };
    let models: [&dyn Predictor; 1] = [&model];
    let on = InferenceConfig::default();
    let off = InferenceConfig { gate_enabled: false, ..Default::default() };
    let (mut dice_on, mut dice_off) = (0.0, 0.0);
    let (mut fp_before, mut fp_after) = (0usize, 0usize);
    for i in 0..cfg.n_cases {
        let case = generate_case(&cfg, i).map_err(|e| e.to_string())?;
        let gated = predict_case(&case.volume, &models, &on).map_err(|e| e.to_string())?;
        let plain = predict_case(&case.volume, &models, &off).map_err(|e| e.to_string())?;
        ensure(gated.regions.is_subset_of(&plain.regions), || format!("{}: gated mask is not a subset", case.id))?;
        let gt = labels_to_regions(&case.labels);
        let truth = gt.slice_presence(2);
        let (et_on, et_off, et_gt) = (gated.regions.channel(2), plain.regions.channel(2), gt.channel(2));
        let d = et_gt.dims();
        for k in 0..d[2] {
            // correctly classified negative slice
            if truth[2][k] || gated.slice_positive[2][k] {
                continue;
            }
            for i in 0..d[0] {
                for j in 0..d[1] {
                    fp_before += usize::from(et_off.get([i, j, k]) == 1);
                    fp_after += usize::from(et_on.get([i, j, k]) == 1);
                }
            }
        }
        let (_, spec_on) = sensitivity_specificity(et_on, et_gt).unwrap();
        let (_, spec_off) = sensitivity_specificity(et_off, et_gt).unwrap();
        ensure(spec_on >= spec_off, || format!("{}: specificity dropped", case.id))?;
        dice_on += dice_score(et_on, et_gt).unwrap();
        dice_off += dice_score(et_off, et_gt).unwrap();
    }
    let n = cfg.n_cases as f64;
    let (dice_on, dice_off) = (dice_on / n, dice_off / n);
    let detail = format!("FP voxels on negative slices {fp_before} -> {fp_after}; mean ET Dice {dice_off:.4} -> {dice_on:.4}");
    ensure(fp_before > 0 && fp_after == 0 && dice_on > dice_off, || detail.clone())?;
    Ok(detail)
}

/// Brute force: boundary voxels by direct neighbour test, all-pairs
/// distances, linear-interpolated 95th percentile.
fn hd95_oracle(a: &Grid3<u8>, b: &Grid3<u8>, spacing: [f64; 3]) -> f64 {
    let surface = |m: &Grid3<u8>| -> Vec<[i64; 3]> {
        let d = m.dims().map(|x| x as i64);
        let on = |p: [i64; 3]| (0..3).all(|a| p[a] >= 0 && p[a] < d[a]) && m.get(p.map(|x| x as usize)) == 1;
        let mut out = Vec::new();
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    let p = [i, j, k];
                    let nbrs = [[i - 1, j, k], [i + 1, j, k], [i, j - 1, k], [i, j + 1, k], [i, j, k - 1], [i, j, k + 1]];
                    if on(p) && nbrs.iter().any(|&q| !on(q)) {
                        out.push(p);
                    }
                }
            }
        }
        out
    };
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    if sa.is_empty() || sb.is_empty() {
        return HD95_EMPTY_SENTINEL;
    }
    let dist = |p: &[i64; 3], q: &[i64; 3]| {
        let sq = |a: usize| {
            let t = (p[a] - q[a]) as f64 * spacing[a];
            t * t
        };
        (sq(0) + (sq(1) + sq(2))).sqrt()
    };
    let nearest = |p: &[i64; 3], set: &[[i64; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).chain(sb.iter().map(|p| nearest(p, &sa))).collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // numpy.percentile(all, 95), method "linear"
    let rank = 0.95 * (all.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let (a, b, t) = (all[lo], all[hi], rank - lo as f64);
    if t >= 0.5 {
        b - (b - a) * (1.0 - t)
    } else {
        a + (b - a) * t
    }
}

fn random_mask(rng: &mut ChaCha8Rng) -> Grid3<u8> {
    let d = [16, 16, 16];
    match rng.random_range(0..3) {
        0 => {
            let p = rng.random_range(0.02..0.3);
            Grid3::from_fn(d, |_| u8::from(rng.random_bool(p)))
        }
        _ => {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(3.0..13.0));
            let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0..6.0));
            Grid3::from_fn(d, |idx| u8::from((0..3).map(|a| ((idx[a] as f64 - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0))
        }
    }
}

fn a6_hd95() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 60;
    let mut nonzero = 0;
    for t in 0..n {
        let (a, b) = (random_mask(&mut rng), random_mask(&mut rng));
        let spacing = if t % 2 == 0 { [1.0; 3] } else { std::array::from_fn(|_| rng.random_range(0.5..3.0)) };
        let got = hd95(&a, &b, spacing).map_err(|e| e.to_string())?;
        let want = hd95_oracle(&a, &b, spacing);
        ensure(got == want, || format!("pair {t}: library {got} vs oracle {want}"))?;
        nonzero += usize::from(got > 0.0);
    }
    let empty = Grid3::filled([16, 16, 16], 0u8);
    let one = random_mask(&mut rng);
    ensure(hd95(&empty, &one, [1.0; 3]).unwrap() == hd95_oracle(&empty, &one, [1.0; 3]), || "single-empty case".into())?;
    ensure(hd95(&empty, &empty, [1.0; 3]).unwrap() == 0.0, || "double-empty case".into())?;
    Ok(format!("{n} random 16³ pairs ({nonzero} nonzero) equal bit-for-bit, plus empty cases"))
}

/// Symmetric 3×3×3 box average of a channel mix, equivariant under flips.
struct BoxModel {
    mix: [[f64; 4]; 3],
}

impl Predictor for BoxModel {
    fn predict(&self, x: &Tensor<f32>) -> segcls::Result<(Tensor<f64>, Tensor<f64>)> {
        let s = x.shape();
        let d = [s[2], s[3], s[4]];
        let vol = d[0] * d[1] * d[2];
        let at = |c: usize, i: usize, j: usize, k: usize| f64::from(x.data()[c * vol + (i * d[1] + j) * d[2] + k]);
        let mut seg = vec![0.0; 3 * vol];
        for r in 0..3 {
            for i in 0..d[0] {
                for j in 0..d[1] {
                    for k in 0..d[2] {
                        let mut acc = 0.0;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                for dk in -1i64..=1 {
                                    let (ii, jj, kk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                                    if ii < 0 || jj < 0 || kk < 0 || ii >= d[0] as i64 || jj >= d[1] as i64 || kk >= d[2] as i64 {
                                        continue;
                                    }
                                    for c in 0..4 {
                                        acc += self.mix[r][c] * at(c, ii as usize, jj as usize, kk as usize);
                                    }
                                }
                            }
                        }
                        seg[r * vol + (i * d[1] + j) * d[2] + k] = acc / 27.0;
                    }
                }
            }
        }
        let mut slice = vec![0.0; 3 * d[2]];
        for r in 0..3 {
            for o in 0..vol {
                slice[r * d[2] + o % d[2]] += seg[r * vol + o] / (d[0] * d[1]) as f64;
            }
        }
        Ok((Tensor::new(&[1, 3, d[0], d[1], d[2]], seg), Tensor::new(&[1, 3, d[2]], slice)))
    }
}

fn a7_tta() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f32>::from_fn(&[1, 4, 8, 6, 10], |_| rng.random_range(-1.0..1.0));
    let toy = BoxModel { mix: std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))) };
    let (plain_seg, plain_slice) = toy.predict(&x).map_err(|e| e.to_string())?;
    let (seg, slice) = tta_ensemble_logits(&[&toy], &x, &all_flips(), AverageSpace::Logits).map_err(|e| e.to_string())?;
    let eq_err = seg.data().iter().zip(plain_seg.data()).chain(slice.data().iter().zip(plain_slice.data())).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(eq_err <= 1e-5, || format!("equivariant model: TTA differs from plain forward by {eq_err:.2e}"))?;

    let mut cfg = NetworkConfig::bifpn_reduced();
    cfg.encoder_channels = vec![8, 16];
    let net = Network::<f64>::new(cfg, 3).map_err(|e| e.to_string())?;
    let xn = Tensor::<f32>::from_fn(&[1, 4, 8, 8, 8], |_| rng.random_range(-1.0..1.0));
    let mut flips = all_flips();
    let mut worst = 0.0f64;
    for space in [AverageSpace::Logits, AverageSpace::Probs] {
        let (a_seg, a_slice) = tta_ensemble_logits(&[&net, &toy], &xn, &flips, space).map_err(|e| e.to_string())?;
        flips.shuffle(&mut rng);
        let (b_seg, b_slice) = tta_ensemble_logits(&[&toy, &net], &xn, &flips, space).map_err(|e| e.to_string())?;
        let d = a_seg.max_abs_diff(&b_seg).max(a_slice.max_abs_diff(&b_slice));
        worst = worst.max(d);
    }
    ensure(worst <= 1e-9, || format!("order dependence {worst:.2e}"))?;
    Ok(format!("equivariant max diff {eq_err:.1e}; permutation max diff {worst:.1e}"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_segcls")).args(args).env_remove("SEGCLS_DEVICE").output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn a8_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let data = root.join("data");
    run_cli(&["synth", "--n", "4", "--seed", "5", "--shape", "32,32,32", "--out", data.to_str().unwrap()])?;
    let config = root.join("run.toml");
    let text = format!(
        "seed = 13\ndataset = \"{}\"\n\n[network]\narchitecture = \"bifpn\"\nencoder_channels = [8, 16, 32, 64]\npyramid_channels = 16\nbifpn_layers = 1\nclassifier_channels = 16\nlstm_layers = 1\ndropout_rate = 0.2\n\n[train]\nbatch_size = 2\nfolds = 2\n\n[scheduler]\ntotal_epochs = 3\nwarmup_epochs = 1\n\n[augment]\ncrop_size = [32, 32, 32]\n",
        data.join("dataset.toml").display()
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let (a, b) = (root.join("a"), root.join("b"));
    for out in [&a, &b] {
        run_cli(&["train", "--config", config.to_str().unwrap(), "--fold", "0", "--output", out.to_str().unwrap()])?;
    }
    let log = |d: &Path| std::fs::read_to_string(d.join("fold0/train_log.jsonl")).unwrap_or_default();
    let (la, lb) = (log(&a), log(&b));
    ensure(!la.is_empty() && la == lb, || "loss logs differ between identical runs".into())?;

    let ckpt = a.join("fold0/best.ckpt");
    let header = read_checkpoint_header(&ckpt).map_err(|e| e.to_string())?;
    let logged = header.metadata["val_loss"].as_f64().ok_or("checkpoint lacks val_loss")?;
    let (net, _) = load_checkpoint::<f32>(&ckpt).map_err(|e| e.to_string())?;
    let manifest = segcls::data_model::DatasetManifest::load(data.join("dataset.toml")).map_err(|e| e.to_string())?;
    let folds = make_folds(&manifest.ids(), 2, 13).map_err(|e| e.to_string())?;
    let mut val = Vec::new();
    for id in &folds[0].1 {
        let (v, l) = segcls::data_model::load_case_files(manifest.get(id).unwrap()).map_err(|e| e.to_string())?;
        val.push(TrainingCase::prepare(id.clone(), &v, &l.unwrap()).map_err(|e| e.to_string())?);
    }
    let again = evaluate_validation(&net, &val, &LossConfig::default()).map_err(|e| e.to_string())?;
    let diff = (again.loss - logged).abs();
    ensure(diff <= 1e-6, || format!("reloaded validation loss {} vs logged {logged}", again.loss))?;
    Ok(format!("{} identical log lines; reloaded validation loss differs by {diff:.1e}", la.lines().count()))
}

fn a9_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let codes = [0u8, 1, 2, 4];
    for t in 0..20 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(6..20));
        let labels = LabelVolume::new(Grid3::from_fn(dims, |_| codes[rng.random_range(0..4)])).unwrap();
        ensure(regions_to_labels(&labels_to_regions(&labels)) == labels, || format!("case {t}: label round trip"))?;

        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..dims[a] / 2));
        let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..dims[a]));
        let inside = |idx: [usize; 3]| (0..3).all(|a| lo[a] <= idx[a] && idx[a] <= hi[a]);
        let img = Grid3::from_fn(dims, |idx| if inside(idx) { rng.random_range(1.0f32..2.0) } else { 0.0 });
        let volume = MultimodalVolume::new([img.clone(), img.map(|v| v * 2.0), img.map(|v| if v > 0.0 { v + 1.0 } else { 0.0 }), img], [1.0; 3], rng.random_range(0..3))
            .map_err(|e| e.to_string())?;
        let prep = PreparedCase::new(&volume).map_err(|e| e.to_string())?;
        ensure(prep.crop.lo == lo && prep.crop.hi == hi, || format!("case {t}: crop {:?} vs {lo:?}..{hi:?}", prep.crop))?;
        // coordinate field: every voxel tagged with its own flat index
        let coords = Grid3::from_fn(dims, |[i, j, k]| ((i * dims[1] + j) * dims[2] + k + 1) as u32);
        let net_space = pad_to_multiple(&prep.forward_grid(&coords), 16, 0);
        let back = prep.restore_grid(&net_space, 0);
        let expected = Grid3::from_fn(dims, |idx| if inside(idx) { coords.get(idx) } else { 0 });
        ensure(back == expected, || format!("case {t}: crop/pad/uncrop is not the identity on the crop"))?;
    }
    Ok("labels<->regions and crop/pad/uncrop exact on 20 random cases".into())
}
