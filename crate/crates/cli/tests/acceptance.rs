//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line on stderr
//! (written past the test harness capture) and the test fails if any
//! criterion fails. Criteria run sequentially so their timings do not
//! overlap.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mricascade::dataio::{generate_synthetic, MaskSlice, SliceImage, SyntheticConfig};
use mricascade::metrics::{classification_metrics, dice, ConfusionMatrix};
use mricascade::nets::{
    archive, init_params, unet_forward, valid_shape, CellKind, ClassifierConfig, DeepSegNetConfig, EncoderSpec, PaddingMode,
    ParameterStore, RecurrentConfig, ResNetConfig, ResNetVariant, SegmenterConfig, UNetConfig,
};
use mricascade::pipeline::{binarize, run_prepared, sweep_prepared, PipelineKind, PreparedDataset, SegmenterCache};
use mricascade::preprocess::{elastic_deform, sample_displacement_field, DisplacementField, ElasticDeformParams, PreprocessConfig};
use mricascade::train::{grad_check_with, load_pretrained, save_checkpoint, standard_suite, GradCheckOptions};
use mricascade::{Error, Tensor};
use mricascade_cli::config::RunConfig;
use mricascade_cli::overlay::{compose, tinted_set, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and thresholds, pinned.
const METRIC_TOL: f64 = 1e-12;
const F1_TOL: f64 = 1e-4;
const GRAD_EPSILON: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 60.0;
const METRIC_BUDGET_S: f64 = 5.0;
/// Frozen after the calibration run recorded in the README.
const UNET_DICE_MIN: f64 = 0.85;
const ACCURACY_MIN: f64 = 0.80;
const PIPELINE_BUDGET_S: f64 = 20.0 * 60.0;
const SHIFT_TOL: f64 = 1e-12;
const CENTROID_TOL: f64 = 0.5;
const SEEDS: [u64; 3] = [0, 1, 2];
const FRACTIONS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

fn report(n: usize, name: &str, pass: bool, detail: &str) -> bool {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {name}: {status} ({detail})");
    pass
}

fn desk_config() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).expect("desk config")
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> MaskSlice {
    MaskSlice::new(h, w, (0..h * w).map(|_| u8::from(r.random::<f64>() < density)).collect()).unwrap()
}

// 1. Metric formulas against direct evaluation, Dice against pixelwise F1.
fn metric_oracle() -> (bool, String) {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0;
    for _ in 0..1000 {
        let (tp, fp, fneg, tn) =
            (r.random_range(0..40u64), r.random_range(0..40u64), r.random_range(0..40u64), r.random_range(0..40u64));
        if tp + fp + fneg + tn == 0 {
            continue;
        }
        let m = classification_metrics(&ConfusionMatrix::new(tp, fp, fneg, tn));
        let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fneg as f64, tn as f64);
        let div = |a: f64, b: f64| (b != 0.0).then(|| a / b);
        let precision = div(tpf, tpf + fpf);
        let recall = div(tpf, tpf + fnf);
        let f1 = match (precision, recall) {
            (Some(p), Some(q)) if p + q > 0.0 => Some(2.0 * q * p / (q + p)),
            _ => None,
        };
        let ok = close(m.accuracy, div(tpf + tnf, tpf + tnf + fpf + fnf), METRIC_TOL)
            && close(m.precision, precision, METRIC_TOL)
            && close(m.recall, recall, METRIC_TOL)
            && close(m.specificity, div(tnf, tnf + fpf), METRIC_TOL)
            && close(m.f1, f1, METRIC_TOL);
        bad += usize::from(!ok);
    }
    for _ in 0..500 {
        let (h, w) = (r.random_range(4..24), r.random_range(4..24));
        let (da, db) = (r.random::<f64>(), r.random::<f64>());
        let (a, b) = (random_mask(&mut r, h, w, da), random_mask(&mut r, h, w, db));
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&p, &g) in a.pixels().iter().zip(b.pixels()) {
            match (p, g) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fneg += 1.0,
                _ => {}
            }
        }
        let f1 = if tp + fp + fneg == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        bad += usize::from((dice(&a, &b).unwrap() - f1).abs() > METRIC_TOL);
    }
    let secs = t.elapsed().as_secs_f64();
    (bad == 0 && secs < METRIC_BUDGET_S, format!("{bad} mismatches, {secs:.2}s"))
}

// 2. Worked vector.
fn worked_vector() -> (bool, String) {
    let m = classification_metrics(&ConfusionMatrix::new(3, 1, 2, 4));
    let ok = m.accuracy == Some(0.70)
        && m.precision == Some(0.75)
        && m.recall == Some(0.60)
        && m.f1.is_some_and(|f| (f - 0.6667).abs() <= F1_TOL)
        && m.specificity == Some(0.80);
    (ok, format!("{:?}", (m.accuracy, m.precision, m.recall, m.f1, m.specificity)))
}

// 3. Gradient verification.
fn gradients() -> (bool, String) {
    let t = Instant::now();
    let opts = GradCheckOptions { epsilon: GRAD_EPSILON, ..Default::default() };
    let mut worst = (String::new(), 0.0f64);
    let mut failures = Vec::new();
    for case in standard_suite(0) {
        match grad_check_with(&case.model, &case.input, &opts) {
            Ok(e) => {
                if e >= GRAD_TOL {
                    failures.push(case.name.clone());
                }
                if e > worst.1 {
                    worst = (case.name, e);
                }
            }
            Err(e) => failures.push(format!("{}: {e}", case.name)),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (
        failures.is_empty() && secs < GRAD_BUDGET_S,
        format!("worst {} {:.2e}, failures {failures:?}, {secs:.1}s", worst.0, worst.1),
    )
}

/// Layer-by-layer walk: two 3×3 valid convs per level, 2×2 pooling on even
/// sizes, two bottom convs, and per level an up-convolution doubling the
/// size followed by two convs.
fn shape_oracle(input: i64, depth: usize) -> Option<i64> {
    let mut s = input;
    for _ in 0..depth {
        s -= 2;
        s -= 2;
        if s <= 0 || s % 2 != 0 {
            return None;
        }
        s /= 2;
    }
    s -= 4;
    if s <= 0 {
        return None;
    }
    for _ in 0..depth {
        s = s * 2 - 4;
        if s <= 0 {
            return None;
        }
    }
    Some(s)
}

// 4. Shape algebra.
fn shapes() -> (bool, String) {
    let cfg = |input_size, depth, base_channels| UNetConfig { depth, base_channels, padding_mode: PaddingMode::Valid, input_size };
    let mut ok = true;
    let mut notes = Vec::new();
    for (input, expect) in [(252, 68), (268, 84), (572, 388)] {
        let got = valid_shape(&cfg(input, 4, 1));
        ok &= got == Some(expect) && shape_oracle(input as i64, 4) == Some(expect as i64);
        notes.push(format!("{input}->{got:?}"));
    }
    let inadmissible = valid_shape(&cfg(256, 4, 1)).is_none() && shape_oracle(256, 4).is_none();
    ok &= inadmissible;
    notes.push(format!("256 inadmissible: {inadmissible}"));
    for depth in 1..=4 {
        for input in 8..=300usize {
            ok &= valid_shape(&cfg(input, depth, 1)).map(|v| v as i64) == shape_oracle(input as i64, depth);
        }
    }
    let mut forwards = 0;
    let tests: Vec<(usize, usize)> =
        [(252, 4), (268, 4), (572, 4)].into_iter().chain((20..=80).map(|s| (s, 2))).chain((12..=40).map(|s| (s, 1))).collect();
    for (input, depth) in tests {
        let c = cfg(input, depth, 1);
        let Some(out) = valid_shape(&c) else { continue };
        let params = init_params(&c, 0).unwrap();
        let y = unet_forward(&params, &Tensor::full(&[1, input, input], 0.1), &c).unwrap();
        ok &= y.shape() == [1, out, out];
        forwards += 1;
    }
    notes.push(format!("{forwards} forward passes"));
    (ok, notes.join(", "))
}

// 5. The four pipelines at desk scale.
fn pipelines(data: &PreparedDataset, cfg: &RunConfig) -> (bool, String) {
    let t = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let mut cache = SegmenterCache::new();
        for kind in PipelineKind::ALL {
            match run_prepared(kind, data, &cfg.pipeline, seed, &mut cache) {
                Ok(run) => {
                    let m = run.result.metrics;
                    let columns = [m.accuracy, m.f1, m.precision, m.recall, m.specificity, m.dice];
                    let complete = columns.iter().all(Option::is_some);
                    let acc_ok = m.accuracy.is_some_and(|a| a >= ACCURACY_MIN);
                    let dice_ok = !matches!(kind, PipelineKind::UnetRnn | PipelineKind::UnetLstm)
                        || m.dice.is_some_and(|d| d >= UNET_DICE_MIN);
                    ok &= complete && acc_ok && dice_ok;
                    lines.push(format!(
                        "{kind}/s{seed} acc {:.3} dice {:.3}{}",
                        m.accuracy.unwrap_or(f64::NAN),
                        m.dice.unwrap_or(f64::NAN),
                        if complete { "" } else { " (undefined column)" }
                    ));
                }
                Err(e) => {
                    ok = false;
                    lines.push(format!("{kind}/s{seed} error {e}"));
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < PIPELINE_BUDGET_S;
    (ok, format!("{}; {secs:.0}s", lines.join("; ")))
}

// 6. Training-fraction trend.
fn trend(data: &PreparedDataset, cfg: &RunConfig) -> (bool, String) {
    let t = Instant::now();
    let report = match sweep_prepared(&PipelineKind::ALL, &FRACTIONS, &SEEDS, data, &cfg.pipeline, |_| {}) {
        Ok(r) => r,
        Err(e) => return (false, format!("sweep error {e}")),
    };
    let mut ok = report.is_complete();
    let mut notes = Vec::new();
    for kind in PipelineKind::ALL {
        let (a5, a9) = (report.mean_accuracy(kind, 0.5), report.mean_accuracy(kind, 0.9));
        let (s5, s9) = (report.mean_sensitivity(kind, 0.5), report.mean_sensitivity(kind, 0.9));
        let kind_ok = matches!((a5, a9), (Some(x), Some(y)) if y >= x) && matches!((s5, s9), (Some(x), Some(y)) if y >= x);
        ok &= kind_ok;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or("-".into());
        notes.push(format!("{kind} acc {}->{} sens {}->{}", f(a5), f(a9), f(s5), f(s9)));
    }
    (ok, format!("{}; {:.0}s", notes.join("; "), t.elapsed().as_secs_f64()))
}

const TINY: &str = r#"
kinds = ["deepsegnet_resnet50", "deepsegnet_rnn", "unet_rnn", "unet_lstm"]
[preprocess]
target_size = 16
[augmentation]
max_translation = 1
[roi]
roi_size = 32
[unet]
depth = 1
base_channels = 2
padding_mode = "valid"
[deepsegnet]
depth = 1
base_channels = 2
[resnet]
base_width = 1
[recurrent]
input_dim = 2
hidden_dim = 3
[recurrent.encoder]
channels = [2, 2]
strides = [2, 2]
[segmenter_training]
epochs = 2
batch_size = 4
[classifier_training]
epochs = 2
batch_size = 4
[segmenter_optimizer]
learning_rate = 0.01
[classifier_optimizer]
learning_rate = 0.01
"#;

fn files_with(root: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for kind in std::fs::read_dir(root).unwrap() {
        let dir = kind.unwrap().path();
        if dir.is_dir() {
            for f in std::fs::read_dir(&dir).unwrap() {
                let p = f.unwrap().path();
                if p.extension().is_some_and(|e| e == ext) || p.file_name().is_some_and(|n| n == ext) {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
    }
    out.sort();
    out
}

// 7. End-to-end determinism of `run`.
fn determinism(tmp: &Path) -> (bool, String) {
    let data = tmp.join("tiny");
    let syn = SyntheticConfig { n_patients: 20, image_size: 16, seed: 3, ..Default::default() };
    generate_synthetic(&syn, &data).unwrap();
    let cfg = tmp.join("tiny.toml");
    std::fs::write(&cfg, format!("dataset = {:?}\n{TINY}", data)).unwrap();
    let mut outs = Vec::new();
    for i in 0..2 {
        let out = tmp.join(format!("run{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_mricascade"))
            .args(["run", "--seed", "11", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env_remove("MRICASCADE_SEED")
            .output()
            .unwrap();
        if !status.status.success() {
            return (false, format!("run {i} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outs.push(out);
    }
    let metrics = files_with(&outs[0], "metrics.json");
    let checkpoints = files_with(&outs[0], "nta");
    let mut same = metrics.len() == 4 && checkpoints.len() == 8;
    same &= metrics == files_with(&outs[1], "metrics.json") && checkpoints == files_with(&outs[1], "nta");
    for f in metrics.iter().chain(&checkpoints) {
        same &= std::fs::read(outs[0].join(f)).unwrap() == std::fs::read(outs[1].join(f)).unwrap();
    }
    (same, format!("{} metrics files, {} checkpoints compared", metrics.len(), checkpoints.len()))
}

fn disk(n: usize, cy: f64, cx: f64, radius: f64) -> (SliceImage, MaskSlice) {
    let inside: Vec<u8> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            u8::from((y - cy).powi(2) + (x - cx).powi(2) <= radius * radius)
        })
        .collect();
    let img = SliceImage::new(n, n, inside.iter().map(|&v| f64::from(v)).collect()).unwrap();
    (img, MaskSlice::new(n, n, inside).unwrap())
}

fn centroid(weights: impl Iterator<Item = f64>, n: usize) -> (f64, f64) {
    let (mut sy, mut sx, mut s) = (0.0, 0.0, 0.0);
    for (i, w) in weights.enumerate() {
        sy += w * (i / n) as f64;
        sx += w * (i % n) as f64;
        s += w;
    }
    (sy / s, sx / s)
}

// 8. Augmentation suite.
fn augmentation() -> (bool, String) {
    let n = 64;
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let img = SliceImage::new(n, n, (0..n * n).map(|_| r.random::<f64>()).collect()).unwrap();
    let mask = random_mask(&mut r, n, n, 0.3);

    let zero = ElasticDeformParams { grid_shape: (3, 3), sigma: 0.0 };
    let field = sample_displacement_field(&zero, n, n, 5).unwrap();
    let (wi, wm) = elastic_deform(&img, Some(&mask), &field).unwrap();
    let identity = wi.pixels().iter().zip(img.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()) && wm.as_ref() == Some(&mask);

    let (dx, dy) = (3isize, -2isize);
    let field = DisplacementField::constant(n, n, dx as f64, dy as f64);
    let (si, sm) = elastic_deform(&img, Some(&mask), &field).unwrap();
    let sm = sm.unwrap();
    let mut shift_ok = true;
    for row in 0..n as isize {
        for col in 0..n as isize {
            let (sr, sc) = (row + dy, col + dx);
            if sr < 0 || sc < 0 || sr >= n as isize || sc >= n as isize {
                continue;
            }
            let (o, s) = ((row * n as isize + col) as usize, (sr * n as isize + sc) as usize);
            shift_ok &= (si.pixels()[o] - img.pixels()[s]).abs() <= SHIFT_TOL && sm.pixels()[o] == mask.pixels()[s];
        }
    }

    // Default deformation parameters at the default slice size; on much
    // smaller slices a sigma-10 field over a 3x3 grid comes close to folding.
    let big = PreprocessConfig::default().target_size;
    let (blob, blob_mask) = disk(big, big as f64 / 2.0, big as f64 * 0.47, big as f64 * 0.14);
    let params = ElasticDeformParams::default();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let field = sample_displacement_field(&params, big, big, seed).unwrap();
        let (wi, wm) = elastic_deform(&blob, Some(&blob_mask), &field).unwrap();
        let wm = wm.unwrap();
        let ci = centroid(wi.pixels().iter().copied(), big);
        let cm = centroid(wm.pixels().iter().map(|&v| f64::from(v)), big);
        worst = worst.max(((ci.0 - cm.0).powi(2) + (ci.1 - cm.1).powi(2)).sqrt());
    }
    let co_move = worst <= CENTROID_TOL;
    (
        identity && shift_ok && co_move,
        format!("identity {identity}, shift oracle {shift_ok}, worst centroid gap {worst:.3}px over 100 fields at {big}px"),
    )
}

// 9. Overlay fidelity.
fn overlay_fidelity(tmp: &Path) -> (bool, String) {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    for i in 0..50 {
        let n = r.random_range(8..48);
        let raw = SliceImage::new(n, n, (0..n * n).map(|_| r.random::<f64>()).collect()).unwrap();
        let pre = SliceImage::new(n, n, (0..n * n).map(|_| r.random::<f64>() * 4.0 - 2.0).collect()).unwrap();
        let truth = random_mask(&mut r, n, n, 0.2);
        let density = r.random::<f64>();
        let prob = Tensor::from_vec(&[1, n, n], (0..n * n).map(|_| r.random::<f64>() * density * 2.0).collect()).unwrap();
        let pred = binarize(&prob, 0.5).unwrap();
        let fig = compose(&raw, &pre, Some(&truth), &pred).unwrap();
        let path = tmp.join(format!("overlay_{i}.png"));
        fig.save(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        let untinted = (0..3).all(|p| tinted_set(&back, p).unwrap().area() == 0);
        if tinted_set(&back, 3).unwrap() == pred && untinted {
            exact += 1;
        }
    }
    (exact == 50, format!("{exact}/50 exact"))
}

fn architectures() -> Vec<(&'static str, ParameterStore)> {
    let unet = SegmenterConfig::Unet(UNetConfig { depth: 2, base_channels: 2, padding_mode: PaddingMode::Valid, input_size: 44 });
    let seg = SegmenterConfig::Deepsegnet(DeepSegNetConfig { depth: 2, base_channels: 2 });
    let resnet =
        ClassifierConfig::Resnet(ResNetConfig { variant: ResNetVariant::Resnet50, num_classes: 2, input_size: 32, base_width: 1 });
    let rec = |cell| {
        ClassifierConfig::Recurrent(RecurrentConfig {
            cell,
            input_dim: 2,
            hidden_dim: 3,
            num_classes: 2,
            encoder: EncoderSpec { channels: vec![2, 2], strides: vec![2, 2] },
            input_size: 16,
        })
    };
    vec![
        ("unet", init_params(&unet, 1).unwrap()),
        ("deepsegnet", init_params(&seg, 1).unwrap()),
        ("resnet50", init_params(&resnet, 1).unwrap()),
        ("rnn", init_params(&rec(CellKind::Plain), 1).unwrap()),
        ("lstm", init_params(&rec(CellKind::Gated), 1).unwrap()),
    ]
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// 10. Checkpoint round trip and transfer-learning load.
fn checkpoints(tmp: &Path) -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, params) in architectures() {
        let path = tmp.join(format!("{name}.nta"));
        save_checkpoint(&params, &path).unwrap();
        let back = archive::read(&path).unwrap();
        let same = back.len() == params.len()
            && params.iter().all(|(n, t)| back.get(n).is_some_and(|b| b.shape() == t.shape() && bits(b) == bits(t)));
        ok &= same;

        // Source: another initialization, every other tensor kept, plus
        // names the template lacks.
        let mut other = params.clone();
        let mut r = ChaCha8Rng::seed_from_u64(10);
        for (_, t) in other.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += r.random::<f64>() + 0.5);
        }
        let mut source = ParameterStore::new();
        for (i, (n, t)) in other.iter().enumerate() {
            if i % 2 == 0 {
                source.insert(n, t.clone()).unwrap();
            }
        }
        source.insert("foreign.weight", Tensor::full(&[2, 2], 1.0)).unwrap();
        let src_path = tmp.join(format!("{name}_partial.nta"));
        save_checkpoint(&source, &src_path).unwrap();
        let (loaded, rep) = load_pretrained(&params, &src_path, false).unwrap();
        let expected: BTreeSet<&str> = params.names().filter(|n| source.contains(n)).collect();
        let got: BTreeSet<&str> = rep.loaded.iter().map(String::as_str).collect();
        let values = params.iter().all(|(n, t)| {
            let want = if expected.contains(n) { source.get(n).unwrap() } else { t };
            bits(loaded.get(n).unwrap()) == bits(want)
        });
        let strict_rejects = matches!(load_pretrained(&params, &src_path, true), Err(Error::StrictMismatch { .. }));
        ok &= got == expected && values && strict_rejects && rep.skipped == vec!["foreign.weight".to_string()];
        notes.push(format!("{name}: round trip {same}, {}/{} replaced", got.len(), params.len()));
    }
    (ok, notes.join("; "))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, (pass, detail): (bool, String)| results.push(report(n, name, pass, &detail));

    record(1, "metric oracle", metric_oracle());
    record(2, "worked metric vector", worked_vector());
    record(3, "gradient verification", gradients());
    record(4, "shape algebra", shapes());

    let mut cfg = desk_config();
    let data_dir = tmp.path().join("synthetic");
    let manifest = generate_synthetic(&cfg.synthetic, &data_dir).unwrap();
    cfg.dataset = Some(data_dir);
    let data = PreparedDataset::load(&manifest, &cfg.pipeline.preprocess).unwrap();
    record(5, "desk-scale pipelines", pipelines(&data, &cfg));
    record(6, "training-fraction trend", trend(&data, &cfg));

    record(7, "run determinism", determinism(tmp.path()));
    record(8, "augmentation", augmentation());
    record(9, "overlay fidelity", overlay_fidelity(tmp.path()));
    record(10, "checkpoint round trip", checkpoints(tmp.path()));

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
