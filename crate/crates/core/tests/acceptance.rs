//! End-to-end acceptance checks, one printed line per criterion.
//!
//! Runs without the libtest harness so every line reaches stdout under a
//! plain `cargo test`. Exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use fusionnet::checkpoint::Checkpoint;
use fusionnet::data::{
    count_directory, ingest_directory, synth_dataset, IngestOptions, LabeledDataset, Sample,
    SynthSpec,
};
use fusionnet::dense::{DenseBlock, DenseConfig};
use fusionnet::gradcheck::{broken_fixture, run_cases, run_suite, Scope, TOLERANCE};
use fusionnet::metrics::{metrics, ConfusionMatrix};
use fusionnet::train::{evaluate_loss, fit, fit_with, Classifier, Control, TrainConfig};
use fusionnet::vit::{build_vit, VitConfig};
use fusionnet::{
    build_ensemble, EnsembleConfig, Mode, Module, Parameter, Result, Tape, Tensor, Var,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> std::result::Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

fn err(e: fusionnet::Error) -> String {
    e.to_string()
}

// 1. finite-difference suite over ops, layers, tiny backbones and ensemble
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(Scope::All, 1).map_err(err)?;
    let took = within(start, Duration::from_secs(120))?;
    ensure(report.passed(), || {
        let f: Vec<String> = report
            .failures()
            .iter()
            .map(|r| format!("{} {:.2e}", r.name, r.max_rel_error))
            .collect();
        format!("failing cases: {}", f.join(", "))
    })?;
    ensure(report.results.iter().all(|r| r.coords_checked > 0), || {
        "a case probed nothing".into()
    })?;
    for scope in [Scope::Ops, Scope::Layers, Scope::Backbones, Scope::Ensemble] {
        ensure(report.results.iter().any(|r| r.scope == scope), || {
            format!("no {scope:?} cases")
        })?;
    }
    // negative control: a wrong backward rule must be caught and named
    let broken = run_cases(&[broken_fixture()], Scope::All, 1).map_err(err)?;
    ensure(
        !broken.passed() && broken.failures()[0].name == "broken_square",
        || "broken fixture passed".into(),
    )?;
    Ok(format!(
        "{} cases, worst rel error {:.2e} <= {TOLERANCE:e}, {took:.1?}",
        report.results.len(),
        report.worst()
    ))
}

// 2. full-scale shape identities by construction
fn shape_identities() -> Outcome {
    let start = Instant::now();
    let model = build_ensemble(&EnsembleConfig::full()).map_err(err)?;
    let dims = model.branch_dims();
    ensure(dims == [1280, 1664, 768], || {
        format!("branch dims {dims:?}")
    })?;
    ensure(model.fused_dim() == 3712, || {
        format!("fused {}", model.fused_dim())
    })?;
    drop(model);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vit = build_vit(
        &VitConfig {
            input_size: 112,
            ..VitConfig::full()
        },
        "vit",
        &mut rng,
    )
    .map_err(err)?;
    let t = vit.shape_trace();
    ensure(t.patches == [49, 768] && t.tokens == [50, 768], || {
        format!("patches {:?} tokens {:?}", t.patches, t.tokens)
    })?;
    ensure(t.qkv == [50, 2304], || format!("qkv {:?}", t.qkv))?;
    ensure(t.heads == [12, 50, 64], || format!("heads {:?}", t.heads))?;
    let tape = Tape::new();
    let x = tape.constant(&Tensor::uniform(vec![1, 3, 112, 112], 0.0, 1.0, &mut rng));
    let out = vit.forward(&tape, x).map_err(err)?.shape();
    ensure(out == [1, 768], || format!("vit output {out:?}"))?;
    let took = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "1280 + 1664 + 768 = 3712; vit 49/50/[12, 50, 64]; {took:.1?}"
    ))
}

fn brute_force(cm: &[Vec<u64>]) -> (Vec<(f64, f64, f64)>, f64) {
    let mut pairs = Vec::new();
    for (t, row) in cm.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    let k = cm.len();
    let mut per = Vec::new();
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
        let actual = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per.push((precision, recall, f1));
    }
    let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    (per, correct / pairs.len() as f64)
}

// 3. metric arithmetic
fn metric_arithmetic() -> Outcome {
    let cm = ConfusionMatrix::from_counts(vec![vec![220, 14], vec![24, 366]]).map_err(err)?;
    let report = metrics(&cm, 1).map_err(err)?;
    ensure((report.accuracy - 0.9391).abs() <= 0.00005, || {
        format!("accuracy {}", report.accuracy)
    })?;
    ensure(report.accuracy == 586.0 / 624.0, || {
        "accuracy is not 586/624".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let k = rng.random_range(2..=4);
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| rng.random_range(0..30)).collect())
            .collect();
        if counts.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        let r = metrics(
            &ConfusionMatrix::from_counts(counts.clone()).map_err(err)?,
            k - 1,
        )
        .map_err(err)?;
        ensure(r.weighted_avg.recall == r.accuracy, || {
            format!(
                "matrix {i}: weighted recall {} != accuracy {}",
                r.weighted_avg.recall, r.accuracy
            )
        })?;
        // small matrices get the per-sample oracle
        if i % 10 == 0 {
            let (per, acc) = brute_force(&counts);
            ensure((acc - r.accuracy).abs() < 1e-12, || {
                format!("matrix {i}: accuracy")
            })?;
            for (c, (p, rc, f)) in per.iter().enumerate() {
                let m = &r.per_class[c];
                ensure(
                    (m.precision - p).abs() < 1e-12
                        && (m.recall - rc).abs() < 1e-12
                        && (m.f1 - f).abs() < 1e-12,
                    || format!("matrix {i} class {c}: {m:?} vs oracle {p} {rc} {f}"),
                )?;
            }
        }
    }
    Ok(format!(
        "accuracy {:.4}; weighted recall == accuracy on 1000 random matrices; per-sample oracle agrees",
        report.accuracy
    ))
}

fn row_error(probs: &[f64], width: usize) -> f64 {
    probs
        .chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

// 4. softmax and attention rows sum to one
fn normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_softmax, mut worst_attention, mut matrices) = (0.0f64, 0.0f64, 0usize);
    let mut absorb = |tape: &Tape, matrices: &mut usize| {
        let errs = tape.attention_row_errors().unwrap_or_default();
        *matrices += errs.len();
        worst_attention = errs.into_iter().fold(worst_attention, f64::max);
    };

    // tiny: 100 full ensemble forwards, fresh weights every 10
    let mut model = build_ensemble(&EnsembleConfig::tiny()).map_err(err)?;
    for i in 0..100u64 {
        if i % 10 == 0 {
            let cfg = EnsembleConfig {
                seed: i,
                freeze_backbones: false,
                ..EnsembleConfig::tiny()
            };
            model = build_ensemble(&cfg).map_err(err)?;
        }
        let x = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        tape.enable_attention_probe();
        let probs = model.forward(&tape, &x, Mode::Eval).map_err(err)?;
        worst_softmax = worst_softmax.max(row_error(&probs.data(), 2));
        absorb(&tape, &mut matrices);
    }
    let tiny_matrices = matrices;

    // full scale: the ViT at its 112-pixel input, fresh weights every 25
    let cfg = VitConfig {
        input_size: 112,
        ..VitConfig::full()
    };
    let mut vit = build_vit(&cfg, "vit", &mut rng).map_err(err)?;
    for i in 0..100 {
        if i % 25 == 24 {
            vit = build_vit(&cfg, "vit", &mut rng).map_err(err)?;
        }
        let tape = Tape::new();
        tape.enable_attention_probe();
        let x = tape.constant(&Tensor::uniform(vec![1, 3, 112, 112], 0.0, 1.0, &mut rng));
        vit.forward(&tape, x).map_err(err)?;
        absorb(&tape, &mut matrices);
    }
    drop(vit);

    // full scale: full 224-pixel ensemble forwards, then the head on 100 random
    // fused vectors
    let mut model = build_ensemble(&EnsembleConfig::full()).map_err(err)?;
    model.set_feature_cache(false);
    for _ in 0..3 {
        let x = Tensor::uniform(vec![1, 3, 224, 224], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        tape.enable_attention_probe();
        let probs = model.forward(&tape, &x, Mode::Eval).map_err(err)?;
        worst_softmax = worst_softmax.max(row_error(&probs.data(), 2));
        absorb(&tape, &mut matrices);
    }
    for _ in 0..100 {
        let tape = Tape::new();
        let fused = tape.constant(&Tensor::randn(vec![4, 3712], 3.0, &mut rng));
        let probs = model
            .head_logits(&tape, fused, Mode::Eval)
            .and_then(|l| l.softmax(1))
            .map_err(err)?;
        worst_softmax = worst_softmax.max(row_error(&probs.data(), 2));
    }
    drop(model);

    let took = within(start, Duration::from_secs(120))?;
    ensure(tiny_matrices > 0 && matrices > tiny_matrices, || {
        "attention probe saw nothing".into()
    })?;
    ensure(worst_softmax <= 1e-9, || {
        format!("softmax row error {worst_softmax:e}")
    })?;
    ensure(worst_attention <= 1e-9, || {
        format!("attention row error {worst_attention:e}")
    })?;
    Ok(format!(
        "{matrices} attention matrices, worst row errors softmax {worst_softmax:.1e} attention {worst_attention:.1e}, {took:.1?}"
    ))
}

fn branch_params(model: &fusionnet::EnsembleModel) -> BTreeMap<String, Vec<u64>> {
    let mut out = BTreeMap::new();
    let mut take = |p: &Parameter| {
        out.insert(
            p.name.clone(),
            p.tensor.data().iter().map(|v| v.to_bits()).collect(),
        );
    };
    model.mobile().visit(&mut take);
    model.dense().visit(&mut take);
    model.vit().visit(&mut take);
    out
}

fn head_params(model: &fusionnet::EnsembleModel) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    model.visit(&mut |p| {
        if p.name.starts_with("head.") {
            out.insert(p.name.clone(), p.tensor.data().to_vec());
        }
    });
    out
}

fn synth(
    n_per_class: usize,
    seed: u64,
    split: &str,
) -> std::result::Result<LabeledDataset, String> {
    synth_dataset(
        &SynthSpec {
            n_per_class,
            size: 32,
            seed,
        },
        split,
    )
    .map_err(err)
}

// 5. frozen branches stay bit-identical through training
fn freeze_invariant() -> Outcome {
    let train = synth(32, 5, "train")?;
    let mut model = build_ensemble(&EnsembleConfig::tiny()).map_err(err)?;
    ensure(model.backbones_frozen(), || {
        "tiny preset is not frozen".into()
    })?;
    let branches = branch_params(&model);
    let head = head_params(&model);
    // 64 samples in batches of 32: 25 epochs are 50 Adam steps
    let cfg = TrainConfig {
        max_epochs: 25,
        early_stop_patience: 25,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut steps = 0;
    fit_with(&mut model, &train, &train, &cfg, |_, _| {
        steps += 2;
        Ok(Control::Continue)
    })
    .map_err(err)?;
    ensure(steps == 50, || format!("{steps} steps"))?;
    ensure(branch_params(&model) == branches, || {
        "a branch parameter changed".into()
    })?;
    let after = head_params(&model);
    let changed = after.iter().filter(|(k, v)| head[*k] != **v).count();
    ensure(changed > 0, || "no head parameter changed".into())?;
    Ok(format!(
        "50 steps: {} branch tensors bit-identical, {changed}/{} head tensors changed",
        branches.len(),
        after.len()
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Best eval-mode train accuracy within 200 epochs.
fn capacity(frozen: bool, seed: u64, target: f64) -> std::result::Result<f64, String> {
    let train = synth(32, seed, "train")?;
    let cfg = EnsembleConfig {
        freeze_backbones: frozen,
        seed,
        ..EnsembleConfig::tiny()
    };
    let mut model = build_ensemble(&cfg).map_err(err)?;
    let tc = TrainConfig {
        max_epochs: 200,
        early_stop_patience: 200,
        seed,
        ..TrainConfig::default()
    };
    let mut best = 0.0f64;
    fit_with(&mut model, &train, &train, &tc, |m, _| {
        let (_, acc) = evaluate_loss(m, &train, 64)?;
        best = best.max(acc);
        Ok(if acc >= target {
            Control::Stop
        } else {
            Control::Continue
        })
    })
    .map_err(err)?;
    Ok(best)
}

// 6. learning capacity on the 64-sample synthetic set
fn learning_capacity() -> Outcome {
    let start = Instant::now();
    let frozen = (0..3)
        .map(|s| capacity(true, s, 0.9))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let unfrozen = (0..3)
        .map(|s| capacity(false, s, 0.99))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let took = within(start, Duration::from_secs(300))?;
    let (f, u) = (median(frozen.clone()), median(unfrozen.clone()));
    ensure(f >= 0.9, || format!("frozen median {f} from {frozen:?}"))?;
    ensure(u >= 0.99, || {
        format!("unfrozen median {u} from {unfrozen:?}")
    })?;
    Ok(format!(
        "median train accuracy frozen {f:.3}, unfrozen {u:.3}, {took:.1?}"
    ))
}

/// A bias-only classifier: its logits ignore the image.
struct BiasOnly(Parameter);

impl Module for BiasOnly {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.0);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.0);
    }
}

impl Classifier for BiasOnly {
    fn input_size(&self) -> usize {
        2
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn logits<'t>(&mut self, tape: &'t Tape, images: &Tensor, _: Mode) -> Result<Var<'t>> {
        let zeros = tape.constant(&Tensor::zeros(vec![images.shape()[0], 2]));
        zeros.add_bias(tape.param(&self.0), 1)
    }
}

fn constant_split(split: &str, label: usize) -> std::result::Result<LabeledDataset, String> {
    let samples = (0..8)
        .map(|_| Sample {
            image: Tensor::zeros(vec![3, 2, 2]),
            label,
        })
        .collect();
    LabeledDataset::new(split, vec!["a".into(), "b".into()], samples).map_err(err)
}

// 7. early stopping on a strictly worsening validation loss
fn early_stopping() -> Outcome {
    // training pushes toward class 0 while validation is all class 1
    let train = constant_split("train", 0)?;
    let val = constant_split("val", 1)?;
    let mut model = BiasOnly(Parameter::weight("bias", Tensor::zeros(vec![2])));
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 0.05,
        max_epochs: 50,
        early_stop_patience: 3,
        ..TrainConfig::default()
    };
    let mut after_epoch = Vec::new();
    let record = fit_with(&mut model, &train, &val, &cfg, |m, _| {
        after_epoch.push(m.0.tensor.data().to_vec());
        Ok(Control::Continue)
    })
    .map_err(err)?;
    let losses: Vec<f64> = record.epochs.iter().map(|e| e.val_loss).collect();
    ensure(losses.windows(2).all(|w| w[1] > w[0]), || {
        format!("val loss not worsening: {losses:?}")
    })?;
    ensure(record.stopped_epoch == 4 && record.early_stopped, || {
        format!(
            "stopped at {} (early {})",
            record.stopped_epoch, record.early_stopped
        )
    })?;
    ensure(record.best_epoch == 1, || {
        format!("best epoch {}", record.best_epoch)
    })?;
    ensure(model.0.tensor.data() == after_epoch[0].as_slice(), || {
        "epoch-1 weights not restored".into()
    })?;
    Ok(format!(
        "patience 3: stopped at epoch {}, restored epoch {}",
        record.stopped_epoch, record.best_epoch
    ))
}

// 8. dense block channel law and the 169-layer arithmetic
fn dense_channel_law() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        1usize..=12,
        0usize..=4,
        1usize..=6,
        1usize..=4,
        any::<u64>(),
    );
    runner
        .run(&strategy, |(c_in, layers, k, factor, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut block = DenseBlock::new("b", c_in, layers, k, factor, &mut rng);
            prop_assert_eq!(block.out_channels(), c_in + layers * k);
            // and the forward really produces that many channels
            let tape = Tape::new();
            let x = tape.constant(&Tensor::uniform(vec![2, c_in, 3, 3], -1.0, 1.0, &mut rng));
            let y = block.forward(&tape, x, Mode::Train).unwrap();
            prop_assert_eq!(y.shape(), vec![2, c_in + layers * k, 3, 3]);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    // 64 stem channels, k = 32, blocks (6, 12, 32, 32), halving transitions
    let mut c = 64;
    let mut ends = Vec::new();
    for (i, l) in [6, 12, 32, 32].into_iter().enumerate() {
        c += l * 32;
        ends.push(c);
        if i < 3 {
            c /= 2;
        }
    }
    let cfg = DenseConfig::full();
    ensure(ends == cfg.block_channels(), || {
        format!("{ends:?} vs {:?}", cfg.block_channels())
    })?;
    ensure(cfg.feature_dim() == 1664 && c == 1664, || {
        format!("feature dim {}", cfg.feature_dim())
    })?;
    Ok(format!(
        "100 random blocks obey c_in + L*k; preset ends {ends:?}"
    ))
}

fn curve(seed: u64) -> std::result::Result<String, String> {
    let train = synth(8, seed, "train")?;
    let val = synth(4, seed, "val")?;
    let cfg = EnsembleConfig {
        seed,
        freeze_backbones: false,
        ..EnsembleConfig::tiny()
    };
    let mut model = build_ensemble(&cfg).map_err(err)?;
    let tc = TrainConfig {
        batch_size: 8,
        max_epochs: 3,
        learning_rate: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    Ok(fit(&mut model, &train, &val, &tc).map_err(err)?.curve_csv())
}

// 9. determinism and checkpoint persistence
fn determinism_and_persistence() -> Outcome {
    let (a, b) = (curve(9)?, curve(9)?);
    ensure(a == b, || "curves differ across identical runs".into())?;
    ensure(a.lines().count() == 4, || {
        format!("curve has {} lines", a.lines().count())
    })?;

    let cfg = EnsembleConfig {
        seed: 9,
        ..EnsembleConfig::tiny()
    };
    let model = build_ensemble(&cfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.elck");
    Checkpoint::from_module(&model, &cfg.fingerprint(), serde_json::json!({"epoch": 0}))
        .save(&path)
        .map_err(err)?;
    let mut other = build_ensemble(&EnsembleConfig {
        seed: 10,
        ..cfg.clone()
    })
    .map_err(err)?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    loaded.apply(&mut other, &cfg.fingerprint()).map_err(err)?;
    let mut want = BTreeMap::new();
    model.visit(&mut |p| {
        want.insert(
            p.name.clone(),
            p.tensor
                .data()
                .iter()
                .map(|&v| (v as f32).to_bits())
                .collect::<Vec<_>>(),
        );
    });
    let mut mismatched = 0;
    other.visit(&mut |p| {
        let got: Vec<u32> = p
            .tensor
            .data()
            .iter()
            .map(|&v| (v as f32).to_bits())
            .collect();
        if want.get(&p.name) != Some(&got) {
            mismatched += 1;
        }
    });
    ensure(mismatched == 0, || {
        format!("{mismatched} tensors differ after reload")
    })?;
    let mut bad_fp = cfg.fingerprint();
    bad_fp.replace_range(0..1, if bad_fp.starts_with('0') { "1" } else { "0" });
    ensure(loaded.apply(&mut other, &bad_fp).is_err(), || {
        "altered fingerprint accepted".into()
    })?;

    // hand-assembled file for one two-element parameter
    let one = BiasOnly(Parameter::weight(
        "w",
        Tensor::new(vec![2], vec![0.5, -3.0]).map_err(err)?,
    ));
    let bytes = Checkpoint::from_module(&one, "ff", serde_json::json!({}))
        .to_bytes()
        .map_err(err)?;
    let header = br#"{"fingerprint":"ff","metadata":{},"tensors":[{"name":"w","shape":[2],"kind":"weight","offset":0,"len":2}]}"#;
    let mut golden = vec![b'E', b'L', b'C', b'K', 1, 0];
    golden.extend((header.len() as u32).to_le_bytes());
    golden.extend_from_slice(header);
    golden.extend([0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x40, 0xc0]);
    ensure(bytes == golden, || "golden bytes differ".into())?;
    Ok(format!(
        "identical curves over {} epochs; {} tensors round-trip at f32; golden file matches",
        3,
        want.len()
    ))
}

fn write_fixture(root: &Path) -> std::io::Result<()> {
    let layout = [("train", 1341, 3875), ("test", 234, 390), ("val", 8, 8)];
    for (split, normal, pneumonia) in layout {
        for (class, n) in [("NORMAL", normal), ("PNEUMONIA", pneumonia)] {
            let dir = root.join(split).join(class);
            std::fs::create_dir_all(&dir)?;
            for i in 0..n {
                std::fs::write(dir.join(format!("{i:05}.pgm")), b"P5\n1 1\n255\n\x80")?;
            }
        }
    }
    Ok(())
}

// 10. dataset ingestion counts on a tree with the chest X-ray layout
fn dataset_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_fixture(dir.path()).map_err(|e| e.to_string())?;
    let want = [("train", 1341, 3875), ("val", 8, 8), ("test", 234, 390)];
    let reports = count_directory(dir.path()).map_err(err)?;
    let data = ingest_directory(
        dir.path(),
        &IngestOptions {
            input_size: 2,
            imagenet_norm: false,
        },
    )
    .map_err(err)?;
    for (split, normal, pneumonia) in want {
        let expect: BTreeMap<String, usize> = [
            ("NORMAL".to_string(), normal),
            ("PNEUMONIA".to_string(), pneumonia),
        ]
        .into();
        let counted = &reports
            .iter()
            .find(|r| r.split == split)
            .ok_or("split missing")?
            .counts;
        ensure(*counted == expect, || {
            format!("{split} counted {counted:?}")
        })?;
        let ds = match split {
            "train" => &data.train,
            "val" => &data.val,
            _ => &data.test,
        };
        ensure(ds.counts_by_name() == expect, || {
            format!("{split} ingested {:?}", ds.counts_by_name())
        })?;
    }
    ensure(data.reports.iter().all(|r| r.skipped.is_empty()), || {
        "files were skipped".into()
    })?;
    Ok("train 1341/3875, val 8/8, test 234/390 (counted and decoded)".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("shape identities", shape_identities),
        ("metric arithmetic", metric_arithmetic),
        ("normalization invariants", normalization),
        ("freeze invariant", freeze_invariant),
        ("learning capacity", learning_capacity),
        ("early stopping", early_stopping),
        ("dense channel law", dense_channel_law),
        ("determinism and persistence", determinism_and_persistence),
        ("dataset contract", dataset_contract),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {:?}",
                p.downcast_ref::<String>()
                    .map(String::as_str)
                    .or(p.downcast_ref::<&str>().copied())
            ))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
