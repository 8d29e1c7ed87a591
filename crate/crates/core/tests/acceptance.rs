//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 11`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bsefuse::cli::{run_command, EXIT_OK};
use bsefuse::dataio::{
    generate_synthetic, split_patients, DatasetManifest, ImageRecord, PatientRecord, SignalChannels, StackedSample,
    SynthConfig,
};
use bsefuse::ensemble::build_ensemble;
use bsefuse::gradcam::{finalize, grad_cam_maps, gradcam_ensemble, gradcam_single, gradcam_with_head, weighted_map};
use bsefuse::metrics::report::evaluate_fold;
use bsefuse::metrics::{
    compute_metrics, group_by_patient, patient_recognition_rate, patient_vote, welch_ttest, ConfusionMatrix,
    Prediction,
};
use bsefuse::model::ModelKind;
use bsefuse::nn::layers::Pass;
use bsefuse::nn::{load_backbone, Backbone, FreezePolicy, InflationPolicy, WeightSource};
use bsefuse::training::cv::load_samples;
use bsefuse::training::{
    batch_tensor, cross_validate, fit_with_early_stopping, train_loop, Adam, AdamParams, RecipeConfig,
    TrainConfig, Trainable,
};
use bsefuse::types::rng_stream;
use bsefuse::{Label, Modality};
use candle_core::{Device, Tensor, Var};
use ndarray::{array, Array3};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn random_input(n: usize, c: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = rng_stream(seed, "acceptance-input");
    let v: Vec<f32> = (0..n * c * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (n, c, side, side), &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
}

fn label(malignant: bool) -> Label {
    if malignant {
        Label::Malignant
    } else {
        Label::Benign
    }
}

fn c1_vote_oracle() -> Check {
    let t = Instant::now();
    let (mut cases, mut ties) = (0usize, 0usize);
    for n in 1..=7usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<Label> = (0..n).map(|i| label(mask >> i & 1 == 1)).collect();
            let malignant = mask.count_ones() as usize;
            let benign = n - malignant;
            let want = if benign > malignant { Label::Benign } else { Label::Malignant };
            let got = patient_vote(&labels).map_err(err)?;
            ensure(got == want, format!("n={n} mask={mask:b}: {got:?} vs {want:?}"))?;
            if benign == malignant {
                ensure(got == Label::Malignant, "tie not resolved to malignant")?;
                ties += 1;
            }
            cases += 1;
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("{cases} orderings, {ties} ties all malignant, {elapsed:.2?}"))
}

fn c2_recognition_rate() -> Check {
    let mut rng = rng_stream(2, "acceptance-rr");
    let mut worst = 0.0f64;
    for table in 0..1000 {
        let n_patients = rng.gen_range(1..30);
        let mut preds = Vec::new();
        let mut direct = 0.0f64;
        for p in 0..n_patients {
            let truth = label(rng.gen_bool(0.5));
            let n_images = rng.gen_range(1..=9);
            let mut correct = 0usize;
            for i in 0..n_images {
                let p_m: f64 = rng.gen_range(0.0..1.0);
                let pred = Prediction {
                    image_id: format!("{p}_{i}"),
                    patient_id: format!("P{p:03}"),
                    true_label: truth,
                    p_benign: 1.0 - p_m,
                    p_malignant: p_m,
                };
                correct += pred.correct() as usize;
                preds.push(pred);
            }
            direct += correct as f64 / n_images as f64;
        }
        direct /= n_patients as f64;
        let groups = group_by_patient(&preds).map_err(err)?;
        let counts: Vec<(usize, usize)> = groups.iter().map(|g| (g.n_correct(), g.predicted.len())).collect();
        let rr = patient_recognition_rate(&counts).map_err(err)?;
        let d = (rr - direct).abs();
        ensure(d <= 1e-12, format!("table {table}: {rr} vs {direct}"))?;
        worst = worst.max(d);
    }
    Ok(format!("1000 tables, max deviation {worst:.1e}"))
}

fn c3_metrics() -> Check {
    let mut rng = rng_stream(3, "acceptance-metrics");
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    };
    let hand = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let mut cases: Vec<ConfusionMatrix> = (0..50)
        .map(|_| ConfusionMatrix {
            tp: rng.gen_range(0..40),
            fp: rng.gen_range(0..40),
            tn: rng.gen_range(0..40),
            fn_: rng.gen_range(0..40),
        })
        .filter(|c| c.total() > 0)
        .collect();
    let random = cases.len();
    cases.extend([
        ConfusionMatrix { tp: 0, fp: 0, tn: 7, fn_: 0 },
        ConfusionMatrix { tp: 5, fp: 0, tn: 0, fn_: 0 },
        ConfusionMatrix { tp: 0, fp: 3, tn: 0, fn_: 4 },
    ]);
    for cm in &cases {
        let m = compute_metrics(cm).map_err(err)?;
        let precision = hand(cm.tp, cm.tp + cm.fp);
        let sensitivity = hand(cm.tp, cm.tp + cm.fn_);
        let specificity = hand(cm.tn, cm.tn + cm.fp);
        let f1 = match (precision, sensitivity) {
            (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
            _ => None,
        };
        let accuracy = (cm.tp + cm.tn) as f64 / cm.total() as f64;
        ensure(
            close(Some(m.accuracy), Some(accuracy))
                && close(m.precision, precision)
                && close(m.sensitivity, sensitivity)
                && close(m.specificity, specificity)
                && close(m.f1, f1),
            format!("{cm:?}: {m:?}"),
        )?;
    }
    let empty = compute_metrics(&ConfusionMatrix::default());
    ensure(empty.is_err(), "empty matrix accepted")?;
    let m = compute_metrics(&cases[random]).map_err(err)?;
    ensure(m.precision.is_none() && m.sensitivity.is_none() && m.f1.is_none(), "undefined ratios not absent")?;
    Ok(format!("{random} random + 3 degenerate matrices"))
}

fn manifest(n_benign: usize, n_malignant: usize) -> DatasetManifest {
    let mut patients = BTreeMap::new();
    let mut images = Vec::new();
    for i in 0..n_benign + n_malignant {
        let pid = format!("P{i:03}");
        patients.insert(
            pid.clone(),
            PatientRecord {
                patient_id: pid.clone(),
                label: label(i >= n_benign),
                histological_type: None,
                strain_ratio: None,
            },
        );
        images.push(ImageRecord {
            image_id: format!("{pid}_0"),
            patient_id: pid,
            bmode_path: PathBuf::new(),
            elasto_path: PathBuf::new(),
            roi: None,
        });
    }
    DatasetManifest {
        root: PathBuf::new(),
        patients,
        images,
    }
}

fn c4_leakage_guard() -> Check {
    let mut rng = rng_stream(4, "acceptance-split");
    for i in 0..100 {
        let seed: u64 = rng.gen();
        let m = manifest(rng.gen_range(8..45), rng.gen_range(8..45));
        let plan = split_patients(&m, 0.2, 5, seed).map_err(err)?;
        plan.validate(&m).map_err(err)?;
        let mut sets: Vec<&BTreeSet<String>> = plan.folds.iter().collect();
        sets.push(&plan.test_patients);
        for (a, x) in sets.iter().enumerate() {
            for y in &sets[a + 1..] {
                ensure(x.is_disjoint(y), format!("seed #{i}: overlapping partitions"))?;
            }
        }
        let covered: usize = sets.iter().map(|s| s.len()).sum();
        ensure(covered == m.n_patients(), format!("seed #{i}: {covered} of {} covered", m.n_patients()))?;
    }
    let m = manifest(20, 20);
    let plan = split_patients(&m, 0.2, 5, 9).map_err(err)?;
    let victim = plan.test_patients.iter().next().unwrap().clone();
    let mut dup = plan.clone();
    dup.folds[2].insert(victim.clone());
    ensure(dup.validate(&m).is_err(), "duplicated patient accepted")?;
    let mut missing = plan;
    missing.test_patients.remove(&victim);
    ensure(missing.validate(&m).is_err(), "unassigned patient accepted")?;
    Ok("100 seeds disjoint and covering; corrupted plans rejected".into())
}

fn snapshot_groups(b: &Backbone, groups: &[&str]) -> Vec<(String, Tensor)> {
    groups
        .iter()
        .flat_map(|g| b.store().group(g).expect("group").params.iter())
        .map(|p| (p.name.clone(), p.var.as_tensor().copy().unwrap()))
        .collect()
}

fn unchanged(before: &[(String, Tensor)], after: &[(String, Tensor)]) -> Result<(), String> {
    for ((name, a), (_, b)) in before.iter().zip(after) {
        let d = max_abs_diff(a, b);
        ensure(d == 0.0, format!("{name} moved by {d}"))?;
    }
    Ok(())
}

fn synthetic_samples(dir: &Path, cfg: &SynthConfig, train: &TrainConfig) -> Vec<StackedSample> {
    let (m, _) = generate_synthetic(cfg, dir).unwrap();
    load_samples(&m, train).unwrap()
}

fn halves(s: &[StackedSample]) -> (Vec<&StackedSample>, Vec<&StackedSample>) {
    s.iter().partition(|x| x.patient_id[2..].parse::<usize>().unwrap() % 2 == 0)
}

fn c5_freeze_invariance() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let synth = SynthConfig {
        n_patients: 8,
        images_per_patient: (2, 2),
        class_balance: 0.5,
        signal_channels: SignalChannels::Both,
        image_size: 64,
        seed: 5,
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        augment: true,
        image_side: 64,
        patience: 5,
        ..TrainConfig::new(5)
    };
    let samples = synthetic_samples(dir.path(), &synth, &cfg);
    let (train, val) = halves(&samples);
    let recipe = RecipeConfig::new(ModelKind::Ensemble, WeightSource::Seeded(0));

    let frozen_a = ["conv1", "conv2", "conv3", "conv4", "conv5"];
    let frozen_b = ["stem", "layer1", "layer2", "layer3"];
    let a = recipe.prepare_backbone("alexnet", 4).map_err(err)?;
    let b = recipe.prepare_backbone("resnet18", 4).map_err(err)?;
    let (a0, b0) = (snapshot_groups(&a, &frozen_a), snapshot_groups(&b, &frozen_b));
    let head_a0 = snapshot_groups(&a, &["fc6"]);
    let ha = train_loop(&a, &train, &val, &cfg).map_err(err)?;
    let hb = train_loop(&b, &train, &val, &cfg).map_err(err)?;
    ensure(ha.epochs.len() == 5 && hb.epochs.len() == 5, "did not train 5 epochs")?;
    unchanged(&a0, &snapshot_groups(&a, &frozen_a))?;
    unchanged(&b0, &snapshot_groups(&b, &frozen_b))?;
    ensure(unchanged(&head_a0, &snapshot_groups(&a, &["fc6"])).is_err(), "trainable group did not move")?;

    let ea = snapshot_groups(&a, &a.group_names().iter().map(String::as_str).collect::<Vec<_>>()[..7]);
    let eb = snapshot_groups(&b, &b.group_names().iter().map(String::as_str).collect::<Vec<_>>()[..5]);
    let e = build_ensemble(a, b, 11).map_err(err)?;
    let (w0, _) = e.head_tensors().map_err(err)?;
    let w0 = w0.copy().map_err(err)?;
    train_loop(&e, &train, &val, &cfg).map_err(err)?;
    let names = |x: &Backbone| x.group_names();
    let a_names = names(e.extractor_a());
    let b_names = names(e.extractor_b());
    unchanged(&ea, &snapshot_groups(e.extractor_a(), &a_names.iter().map(String::as_str).collect::<Vec<_>>()))?;
    unchanged(&eb, &snapshot_groups(e.extractor_b(), &b_names.iter().map(String::as_str).collect::<Vec<_>>()))?;
    let (w1, _) = e.head_tensors().map_err(err)?;
    ensure(max_abs_diff(&w0, &w1) > 0.0, "ensemble head did not move")?;
    Ok("frozen groups bit-identical after 5 epochs; ensemble changed only its head".into())
}

fn c6_zero_init() -> Check {
    let mut worst = 0.0f32;
    for arch in ["alexnet", "resnet18"] {
        let orig = load_backbone(arch, &WeightSource::Seeded(6)).map_err(err)?;
        let mut inflated = load_backbone(arch, &WeightSource::Seeded(6)).map_err(err)?;
        inflated.inflate_input_channels(4, InflationPolicy::ZeroInit).map_err(err)?;
        let x3 = random_input(20, 3, 64, 60);
        let gray = random_input(20, 1, 64, 61);
        let x4 = Tensor::cat(&[&gray, &x3], 1).map_err(err)?;
        let a = orig.logits(&x3, &mut Pass::eval()).map_err(err)?;
        let b = inflated.logits(&x4, &mut Pass::eval()).map_err(err)?;
        let d = max_abs_diff(&a, &b);
        ensure(d <= 1e-5, format!("{arch}: {d}"))?;
        worst = worst.max(d);
    }
    Ok(format!("20 inputs per backbone, max deviation {worst:.1e}"))
}

fn c7_fusion_width() -> Check {
    let a = load_backbone("alexnet", &WeightSource::Seeded(7)).map_err(err)?;
    let b = load_backbone("resnet18", &WeightSource::Seeded(7)).map_err(err)?;
    let e = build_ensemble(a, b, 7).map_err(err)?;
    ensure(e.head_width() == 4608, format!("head width {}", e.head_width()))?;
    for n in [1usize, 4, 16] {
        let f = e.features(&random_input(n, 3, 64, n as u64)).map_err(err)?;
        ensure(f.dims() == [n, 4608], format!("batch {n}: {:?}", f.dims()))?;
    }
    Ok("4096 + 512 = 4608 for batches 1, 4, 16".into())
}

fn c8_early_stopping() -> Check {
    let mut b = load_backbone("resnet18", &WeightSource::Seeded(8)).map_err(err)?;
    b.apply_freeze_policy(&FreezePolicy::Custom(vec!["fc".into()])).map_err(err)?;
    let x = random_input(6, 3, 64, 80);
    let y = Tensor::new(&[0u32, 1, 0, 1, 1, 0], &Device::Cpu).map_err(err)?;
    let h = b.frozen_prefix(&x).map_err(err)?;
    let mut opt = Adam::new(b.trainable_vars(), AdamParams::new(1e-2));
    let mut at_best = None;
    let best = 7usize;
    let history = fit_with_early_stopping(&b, 2.0, 10_000, 200, 0.0, |epoch| {
        let logits = b.trainable_forward(&h, &mut Pass::eval())?;
        opt.backward_step(&candle_nn::loss::cross_entropy(&logits, &y)?)?;
        if epoch == best {
            at_best = Some(b.forward_classify(&x)?);
        }
        let val = if epoch <= best { 1.0 - 0.05 * epoch as f64 } else { 1.0 - 0.05 * best as f64 };
        Ok((0.0, val, 0.0))
    })
    .map_err(err)?;
    let last = history.epochs.last().map(|r| r.epoch);
    ensure(last == Some(207), format!("stopped at {last:?}"))?;
    ensure(history.stopped_early, "not flagged as early stop")?;
    ensure(history.best_epoch == Some(best), format!("best epoch {:?}", history.best_epoch))?;
    let now = b.forward_classify(&x).map_err(err)?;
    let d = max_abs_diff(&now, &at_best.unwrap());
    ensure(d <= 1e-6, format!("restored outputs differ by {d}"))?;
    Ok(format!("stopped at epoch 207, best epoch 7 restored (max deviation {d:.1e})"))
}

fn mean_patient_accuracy(run: &bsefuse::training::CvRun, output: &str) -> Result<f64, String> {
    let accs: Vec<f64> = run
        .fold_predictions(output)
        .iter()
        .enumerate()
        .map(|(k, p)| evaluate_fold(k, p).map(|e| e.patient.accuracy))
        .collect::<bsefuse::Result<_>>()
        .map_err(err)?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

fn synthetic_cv(
    signal: SignalChannels,
    model: ModelKind,
    modality: Modality,
    epochs: usize,
    lr: f64,
    test_fraction: f64,
) -> Result<bsefuse::training::CvRun, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let synth = SynthConfig {
        n_patients: 40,
        images_per_patient: (3, 5),
        class_balance: 0.5,
        signal_channels: signal,
        image_size: 128,
        seed: 1,
    };
    let (m, _) = generate_synthetic(&synth, dir.path()).map_err(err)?;
    let plan = split_patients(&m, test_fraction, 5, 1).map_err(err)?;
    let cfg = TrainConfig {
        learning_rate: lr,
        augment: false,
        image_side: 112,
        crop: true,
        patience: epochs,
        modality,
        ..TrainConfig::new(epochs)
    };
    let recipe = RecipeConfig::new(model, WeightSource::Seeded(0));
    cross_validate(&m, &plan, &recipe, &cfg, None).map_err(err)
}

fn c9_synthetic_end_to_end() -> Check {
    let t = Instant::now();
    let both = synthetic_cv(SignalChannels::Both, ModelKind::Ensemble, Modality::Bse, 3, 1e-3, 0.2)?;
    let ens = mean_patient_accuracy(&both, "ensemble")?;
    let alex = mean_patient_accuracy(&both, "alexnet")?;
    let res = mean_patient_accuracy(&both, "resnet18")?;
    let gray_b = synthetic_cv(SignalChannels::GrayOnly, ModelKind::ResNet18, Modality::B, 6, 3e-4, 0.5)?;
    let b_only = mean_patient_accuracy(&gray_b, "resnet18")?;
    let gray_se = synthetic_cv(SignalChannels::GrayOnly, ModelKind::ResNet18, Modality::Se, 6, 3e-4, 0.5)?;
    let se_only = mean_patient_accuracy(&gray_se, "resnet18")?;
    let elapsed = t.elapsed();
    let summary = format!(
        "ensemble {ens:.3} (alexnet {alex:.3}, resnet18 {res:.3}); gray-only B {b_only:.3}, SE {se_only:.3}; {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure(ens >= 0.90, format!("ensemble below 0.90: {summary}"))?;
    ensure(ens >= alex && ens >= res, format!("ensemble below a single backbone: {summary}"))?;
    ensure((se_only - 0.5).abs() <= 0.10, format!("SE-only not near chance: {summary}"))?;
    ensure(b_only > 0.85, format!("B-only not above 0.85: {summary}"))?;
    ensure(elapsed <= Duration::from_secs(15 * 60), format!("over budget: {summary}"))?;
    Ok(summary)
}

fn c10_gradcam() -> Check {
    let act = array![[[1.0f32, 2.0], [3.0, 4.0]]];
    let zero = weighted_map(&act, &Array3::zeros((1, 2, 2))).map_err(err)?;
    ensure(finalize(&zero, (8, 8), Label::Benign).grid.iter().all(|&v| v == 0.0), "zero gradient, nonzero map")?;
    let ens = build_ensemble(
        load_backbone("alexnet", &WeightSource::Seeded(1)).map_err(err)?,
        load_backbone("resnet18", &WeightSource::Seeded(2)).map_err(err)?,
        3,
    )
    .map_err(err)?;
    let (w, bias) = ens.head_tensors().map_err(err)?;
    ens.set_head(&w.zeros_like().map_err(err)?, &bias).map_err(err)?;
    let h = gradcam_ensemble(&ens, &random_input(1, 3, 96, 100), Some(1)).map_err(err)?;
    ensure(h.grid.iter().all(|&v| v == 0.0), "zero head, nonzero ensemble map")?;

    // 3x3 input, two 3x3 kernels (identity and right neighbour), ReLU,
    // global average pool, head row for class 1 = [2, 1].
    let dev = Device::Cpu;
    let x = Tensor::new(&[[[[1f32, 0., 2.], [0., 3., 1.], [2., 1., 0.]]]], &dev).map_err(err)?;
    let mut k = [0f32; 18];
    k[4] = 1.0;
    k[9 + 5] = 1.0;
    let kw = Tensor::from_vec(k.to_vec(), (2, 1, 3, 3), &dev).map_err(err)?;
    let a = Var::from_tensor(&x.conv2d(&kw, 1, 1, 1, 1).map_err(err)?.relu().map_err(err)?).map_err(err)?;
    let pooled = a.as_tensor().mean(3).map_err(err)?.mean(2).map_err(err)?;
    let head = Tensor::new(&[[0.5f32, -1.0], [2.0, 1.0]], &dev).map_err(err)?;
    let logits = pooled.matmul(&head.t().map_err(err)?).map_err(err)?;
    let (maps, _) = grad_cam_maps(&logits, &[&a], Some(1)).map_err(err)?;
    let expected = array![[2.0f32, 2.0, 4.0], [3.0, 7.0, 2.0], [5.0, 2.0, 0.0]] / 9.0;
    let toy = maps[0].iter().zip(&expected).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
    ensure(toy <= 1e-6, format!("toy map deviates by {toy}"))?;

    let e = build_ensemble(
        load_backbone("alexnet", &WeightSource::Seeded(1)).map_err(err)?,
        load_backbone("resnet18", &WeightSource::Seeded(2)).map_err(err)?,
        3,
    )
    .map_err(err)?;
    let (w, bias) = e.head_tensors().map_err(err)?;
    let mut cols = w.to_vec2::<f32>().map_err(err)?;
    for row in &mut cols {
        row[4096..].iter_mut().for_each(|v| *v = 0.0);
    }
    e.set_head(&Tensor::new(cols, &dev).map_err(err)?, &bias).map_err(err)?;
    let (w, bias) = e.head_tensors().map_err(err)?;
    let wa = w.narrow(1, 0, 4096).map_err(err)?;
    let head_a = |f: &Tensor| -> bsefuse::Result<Tensor> { Ok(f.matmul(&wa.t()?)?.broadcast_add(&bias)?) };
    let xin = random_input(1, 3, 96, 101);
    let (_, act_b) = e.extractor_b().cam_features(&xin).map_err(err)?;
    let (_, _, gh, gw) = act_b.as_tensor().dims4().map_err(err)?;
    let mut disconnected = 0.0f32;
    for t in 0..2 {
        let m_e = gradcam_ensemble(&e, &xin, Some(t)).map_err(err)?;
        let m_s = gradcam_with_head(e.extractor_a(), &xin, head_a, Some(t), Some((gh, gw))).map_err(err)?;
        let d = (&m_e.grid - &m_s.grid).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
        disconnected = disconnected.max(d);
    }
    ensure(disconnected <= 1e-5, format!("disconnected extractor deviates by {disconnected}"))?;

    let (hit, n) = localization()?;
    let rate = hit as f64 / n as f64;
    ensure(n > 0, "no correctly classified samples")?;
    ensure(rate >= 0.80, format!("localization {hit}/{n}"))?;
    Ok(format!(
        "zero maps, toy grid within {toy:.1e}, disconnected extractor within {disconnected:.1e}, peak in lesion box {hit}/{n}"
    ))
}

/// Train ResNet-18 on uncropped synthetic BSE images and count correctly
/// classified test images whose heatmap peak lies in the lesion box.
fn localization() -> Result<(usize, usize), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let side = 224usize;
    let synth = SynthConfig {
        n_patients: 30,
        images_per_patient: (3, 4),
        class_balance: 0.5,
        signal_channels: SignalChannels::Both,
        image_size: 128,
        seed: 2,
    };
    let (m, _) = generate_synthetic(&synth, dir.path()).map_err(err)?;
    let plan = split_patients(&m, 0.3, 5, 1).map_err(err)?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        augment: false,
        image_side: side,
        crop: false,
        patience: 3,
        ..TrainConfig::new(3)
    };
    let samples = load_samples(&m, &cfg).map_err(err)?;
    let (tp, vp) = plan.fold_partition(0);
    let pick = |set: &BTreeSet<String>| -> Vec<&StackedSample> {
        samples.iter().filter(|s| set.contains(&s.patient_id)).collect()
    };
    let (train, val, test) = (pick(&tp), pick(&vp), pick(&plan.test_patients));
    let b = RecipeConfig::new(ModelKind::ResNet18, WeightSource::Seeded(0))
        .prepare_backbone("resnet18", 4)
        .map_err(err)?;
    train_loop(&b, &train, &val, &cfg).map_err(err)?;
    let scale = side as f64 / synth.image_size as f64;
    let (mut hit, mut n) = (0, 0);
    for s in test {
        let h = gradcam_single(&b, &batch_tensor(&[s]).map_err(err)?, None).map_err(err)?;
        if h.target_class != s.label {
            continue;
        }
        let roi = m.image(&s.image_id).and_then(|r| r.roi).ok_or("synthetic image without ROI")?;
        let (r, c) = h.peak();
        let (r, c) = (r as f64 + 0.5, c as f64 + 0.5);
        let inside = c >= roi.x as f64 * scale
            && c <= (roi.x + roi.w) as f64 * scale
            && r >= roi.y as f64 * scale
            && r <= (roi.y + roi.h) as f64 * scale;
        n += 1;
        hit += inside as usize;
    }
    Ok((hit, n))
}

fn c11_welch() -> Check {
    #[derive(serde::Deserialize)]
    struct Case {
        a: Vec<f64>,
        b: Vec<f64>,
        t: f64,
        p: f64,
    }
    #[derive(serde::Deserialize)]
    struct Fixture {
        cases: Vec<Case>,
    }
    let text = std::fs::read_to_string(fixture("welch_scipy.json")).map_err(err)?;
    let f: Fixture = serde_json::from_str(&text).map_err(err)?;
    ensure(f.cases.len() == 100, format!("{} cases", f.cases.len()))?;
    let (mut dt, mut dp) = (0.0f64, 0.0f64);
    for (i, c) in f.cases.iter().enumerate() {
        let r = welch_ttest(&c.a, &c.b).map_err(err)?;
        let (et, ep) = ((r.t - c.t).abs(), (r.p - c.p).abs());
        ensure(et <= 1e-6 && ep <= 1e-6, format!("case {i}: t {} vs {}, p {} vs {}", r.t, c.t, r.p, c.p))?;
        dt = dt.max(et);
        dp = dp.max(ep);
    }
    Ok(format!("100 pairs, max |dt| {dt:.1e}, max |dp| {dp:.1e}"))
}

fn pipeline_run(root: &Path) -> Result<PathBuf, String> {
    let run = root.join("run");
    let config = root.join("config.toml");
    std::fs::write(
        &config,
        "[data]\nfolds = 2\ntest_fraction = 0.2\n\
         [data.synth]\nn_patients = 12\nimages_per_patient = [2, 3]\nclass_balance = 0.5\n\
         signal_channels = \"both\"\nimage_size = 64\nseed = 12\n\
         [model]\narchitecture = \"ensemble\"\nweights = \"seeded\"\nweights_seed = 3\n\
         [train]\nmax_epochs = 2\nbatch_size = 8\nlearning_rate = 1e-3\nimage_side = 64\nseed = 12\n\
         [eval]\nformats = [\"csv\", \"json\"]\nvoting = true\n",
    )
    .map_err(err)?;
    let code = run_command([
        "bsefuse",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--run",
        run.to_str().unwrap(),
    ]);
    ensure(code == EXIT_OK, format!("train exited with {code}"))?;
    Ok(run)
}

fn files_under(dir: &Path, pred: &dyn Fn(&Path) -> bool) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if pred(&p) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c12_determinism() -> Check {
    let (d1, d2) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let r1 = pipeline_run(d1.path())?;
    let r2 = pipeline_run(d2.path())?;
    let split = |r: &Path| std::fs::read(r.join("split.json")).unwrap();
    ensure(split(&r1) == split(&r2), "split plans differ")?;
    let histories = |r: &Path| {
        files_under(r, &|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("history_")))
    };
    let (h1, h2) = (histories(&r1), histories(&r2));
    ensure(!h1.is_empty(), "no loss histories written")?;
    ensure(h1 == h2, "loss histories differ")?;
    let (rep1, rep2) = (files_under(&r1.join("report"), &|_| true), files_under(&r2.join("report"), &|_| true));
    ensure(!rep1.is_empty(), "no report tables written")?;
    ensure(rep1 == rep2, "report tables differ")?;
    Ok(format!(
        "identical split, {} loss histories and {} report files across two runs",
        h1.len(),
        rep1.len()
    ))
}

type Criterion = (usize, &'static str, fn() -> Check);

const CRITERIA: [Criterion; 12] = [
    (1, "patient vote oracle", c1_vote_oracle),
    (2, "recognition rate property", c2_recognition_rate),
    (3, "metric oracle", c3_metrics),
    (4, "leakage guard", c4_leakage_guard),
    (5, "freeze invariance", c5_freeze_invariance),
    (6, "zero-init channel inflation", c6_zero_init),
    (7, "feature fusion width", c7_fusion_width),
    (8, "early stopping restore", c8_early_stopping),
    (9, "synthetic end-to-end", c9_synthetic_end_to_end),
    (10, "grad-cam checks", c10_gradcam),
    (11, "welch t-test oracle", c11_welch),
    (12, "determinism", c12_determinism),
];

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
