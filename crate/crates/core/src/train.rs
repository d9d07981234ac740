//! Mini-batch Adam on categorical cross-entropy with early stopping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::module::{Mode, Module, Snapshot};
use crate::tensor::{Tape, Tensor, Var};

/// A model that maps `[b, 3, s, s]` images to class logits.
pub trait Classifier: Module {
    fn input_size(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn logits<'t>(&mut self, tape: &'t Tape, images: &Tensor, mode: Mode) -> Result<Var<'t>>;
}

impl Classifier for EnsembleModel {
    fn input_size(&self) -> usize {
        EnsembleModel::input_size(self)
    }

    fn num_classes(&self) -> usize {
        EnsembleModel::num_classes(self)
    }

    fn logits<'t>(&mut self, tape: &'t Tape, images: &Tensor, mode: Mode) -> Result<Var<'t>> {
        EnsembleModel::logits(self, tape, images, mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Weight each class's loss by `N / (K · n_class)` on the train split.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            max_epochs: 20,
            early_stop_patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train: batch_size must be >= 2".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::Config(
                "train: early_stop_patience must be >= 1".into(),
            ));
        }
        if [self.learning_rate, self.epsilon]
            .iter()
            .any(|v| v.is_nan() || *v <= 0.0)
        {
            return Err(Error::Config(
                "train: learning_rate and epsilon must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train: betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One Adam update of `param` in place; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            ..Default::default()
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    ///
    /// A missing gradient counts as zero. Any NaN gradient aborts the step
    /// before anything is written.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64) -> Result<()> {
        let mut bad = None;
        model.visit(&mut |p| {
            if p.is_trainable() && bad.is_none() {
                if let Some(g) = p.tensor.grad() {
                    if g.iter().any(|x| x.is_nan()) {
                        bad = Some(p.name.clone());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::numeric(
                "adam_step",
                format!("NaN gradient for {name}"),
            ));
        }
        self.t += 1;
        let (t, b1, b2, eps) = (self.t, self.beta1, self.beta2, self.epsilon);
        model.visit_mut(&mut |p| {
            if !p.is_trainable() {
                return;
            }
            let n = p.tensor.numel();
            let grad = p
                .tensor
                .grad()
                .map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            adam_update(p.tensor.data_mut(), &grad, m, v, t, lr, b1, b2, eps);
        });
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub early_stopped: bool,
}

impl TrainRecord {
    pub fn best(&self) -> Option<&EpochStats> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc` with shortest
    /// round-trip float formatting.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
            )
            .expect("write to string");
        }
        out
    }
}

/// Whether [`fit_with`] should keep going after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// `N / (K · n_c)` per class; absent classes get weight 0.
pub fn inverse_frequency_weights(dataset: &LabeledDataset) -> Vec<f64> {
    let counts = dataset.class_counts();
    let n = dataset.len() as f64;
    let k = counts.iter().filter(|&&c| c > 0).count() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (k * c as f64) })
        .collect()
}

pub(crate) fn one_hot(labels: &[usize], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        out[i * k + y] = 1.0;
    }
    out
}

pub(crate) fn argmax_rows(data: &[f64], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn check_split<M: Classifier>(model: &M, split: &LabeledDataset, name: &str) -> Result<()> {
    if split.is_empty() {
        return Err(Error::contract("fit", format!("{name} split is empty")));
    }
    if split.num_classes() != model.num_classes() {
        return Err(Error::contract(
            "fit",
            format!(
                "{name} split has {} classes, model has {}",
                split.num_classes(),
                model.num_classes()
            ),
        ));
    }
    if split.image_size() != Some(model.input_size()) {
        return Err(Error::contract(
            "fit",
            format!("{name} image size differs from model input"),
        ));
    }
    Ok(())
}

/// Mean loss and accuracy in eval mode over every sample.
pub fn evaluate_loss<M: Classifier>(
    model: &mut M,
    dataset: &LabeledDataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let k = model.num_classes();
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = dataset.batch(chunk)?;
        let tape = Tape::new();
        let logits = model.logits(&tape, &x, Mode::Eval)?;
        loss += logits.softmax_cross_entropy(&one_hot(&y, k), None)?.item() * chunk.len() as f64;
        correct += argmax_rows(&logits.data(), k)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    let n = dataset.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// [`fit_with`] without an epoch callback.
pub fn fit<M: Classifier>(
    model: &mut M,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainRecord> {
    fit_with(model, train, val, config, |_, _| Ok(Control::Continue))
}

/// Trains with Adam, validating after every epoch.
///
/// Training stops after `early_stop_patience` consecutive epochs without a
/// strictly lower validation loss, at `max_epochs`, or when `on_epoch`
/// returns [`Control::Stop`]. The parameters of the best epoch are restored
/// into `model` before returning.
pub fn fit_with<M, F>(
    model: &mut M,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainRecord>
where
    M: Classifier,
    F: FnMut(&mut M, &EpochStats) -> Result<Control>,
{
    config.validate()?;
    check_split(model, train, "train")?;
    check_split(model, val, "val")?;
    let k = model.num_classes();
    let weights = config
        .class_weighting
        .then(|| inverse_frequency_weights(train));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.beta1, config.beta2, config.epsilon);
    let mut order: Vec<usize> = (0..train.len()).collect();
    // a split smaller than one batch trains as a single batch
    let batch = config.batch_size.min(train.len());
    if batch < 2 {
        return Err(Error::contract(
            "fit",
            "train split needs at least 2 samples",
        ));
    }

    let mut record = TrainRecord {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        early_stopped: false,
    };
    let mut best: Option<(f64, Snapshot)> = None;
    let mut wait = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for chunk in order.chunks_exact(batch) {
            let (x, y) = train.batch(chunk)?;
            let tape = Tape::new();
            let logits = model.logits(&tape, &x, Mode::Train)?;
            let loss = logits.softmax_cross_entropy(&one_hot(&y, k), weights.as_deref())?;
            let grads = tape.backward(loss)?.param_grads();
            model.zero_grad();
            let mut missing = Vec::new();
            model.visit_mut(&mut |p| {
                if let Some(g) = grads.get(&p.name) {
                    if p.tensor.accumulate_grad(g).is_err() {
                        missing.push(p.name.clone());
                    }
                }
            });
            if let Some(name) = missing.first() {
                return Err(Error::contract(
                    "fit",
                    format!("gradient shape mismatch for {name}"),
                ));
            }
            adam.step(model, config.learning_rate)?;
            loss_sum += loss.item() * chunk.len() as f64;
            correct += argmax_rows(&logits.data(), k)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            seen += chunk.len();
        }
        model.zero_grad();
        let (val_loss, val_accuracy) = evaluate_loss(model, val, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::numeric(
                "fit",
                format!("validation loss is {val_loss}"),
            ));
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} train_acc {:.4} val_loss {:.6} val_acc {:.4}",
            stats.train_loss,
            stats.train_accuracy,
            stats.val_loss,
            stats.val_accuracy
        );
        record.epochs.push(stats.clone());
        record.stopped_epoch = epoch;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.snapshot()));
            record.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
        }
        if on_epoch(model, &stats)? == Control::Stop {
            break;
        }
        if wait >= config.early_stop_patience {
            record.early_stopped = true;
            log::info!(
                "early stop at epoch {epoch}; best epoch {}",
                record.best_epoch
            );
            break;
        }
    }
    if let Some((_, snap)) = best {
        model.restore(&snap)?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Sample, SynthSpec};
    use crate::ensemble::{build_ensemble, EnsembleConfig};
    use crate::gradcheck::finite_diff_check;
    use crate::module::Parameter;

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(
            &mut p,
            &[0.0, 0.0],
            &mut m,
            &mut v,
            1,
            0.1,
            0.9,
            0.999,
            1e-8,
        );
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8);
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(v[0] >= 0.0);
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut x = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=200 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, t, 0.1, 0.9, 0.999, 1e-8);
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    struct Bias {
        p: Parameter,
    }

    impl Module for Bias {
        fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
            f(&self.p);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn nan_gradient_aborts_the_step() {
        let mut model = Bias {
            p: Parameter::weight("b", Tensor::zeros(vec![2])),
        };
        model.p.tensor.accumulate_grad(&[1.0, f64::NAN]).unwrap();
        let mut adam = AdamState::new(0.9, 0.999, 1e-8);
        assert!(matches!(
            adam.step(&mut model, 0.1),
            Err(Error::Numeric { .. })
        ));
        assert_eq!(adam.t, 0);
        assert_eq!(model.p.tensor.data(), &[0.0, 0.0]);
    }

    #[test]
    fn fused_loss_values_and_gradient() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap());
        let l = z.softmax_cross_entropy(&[0.0, 1.0], None).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let z = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 1.0, 0.0, -1.0]).unwrap();
        let y = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let err = finite_diff_check(|_, z| z.softmax_cross_entropy(&y, None), &z, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn inverse_frequency() {
        let img = || Tensor::zeros(vec![3, 1, 1]);
        let samples = [0, 0, 0, 1]
            .iter()
            .map(|&label| Sample {
                image: img(),
                label,
            })
            .collect();
        let ds = LabeledDataset::new("t", vec!["a".into(), "b".into()], samples).unwrap();
        let w = inverse_frequency_weights(&ds);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);
    }

    fn synth(n: usize, seed: u64) -> LabeledDataset {
        synth_dataset(
            &SynthSpec {
                n_per_class: n,
                size: 32,
                seed,
            },
            "train",
        )
        .unwrap()
    }

    #[test]
    fn fit_is_deterministic_and_keeps_frozen_branches() {
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (train, val) = (synth(8, 1), synth(4, 2));
        let run = || {
            let mut model = build_ensemble(&EnsembleConfig::tiny()).unwrap();
            let before = model.snapshot();
            let record = fit(&mut model, &train, &val, &cfg).unwrap();
            (record, before, model.snapshot())
        };
        let (a, before, after) = run();
        let (b, _, _) = run();
        assert_eq!(a.curve_csv(), b.curve_csv());
        for (name, t) in &before {
            let same = after[name].data() == t.data();
            assert_eq!(same, !name.starts_with("head."), "{name}");
        }
    }

    #[test]
    fn empty_split_is_a_contract_error() {
        let mut model = build_ensemble(&EnsembleConfig::tiny()).unwrap();
        let empty = LabeledDataset::new("v", vec!["disk".into(), "stripe".into()], vec![]).unwrap();
        let err = fit(&mut model, &synth(2, 0), &empty, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }
}
