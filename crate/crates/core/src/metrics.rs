//! Confusion matrices and precision / recall / F1 / accuracy reports.
//!
//! Every ratio is formed as an exact rational and converted to f64 once, so
//! algebraic identities (support-weighted recall equals accuracy, invariance
//! to scaling all counts) hold bit-exactly in the reported values.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::module::Mode;
use crate::tensor::Tape;
use crate::train::{argmax_rows, Classifier};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::contract(
                "confusion",
                "counts must be a non-empty square matrix",
            ));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `true\pred` header row then one row per true class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("true\\pred");
        for j in 0..self.num_classes() {
            write!(out, ",{}", name(j)).expect("write to string");
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&name(i));
            for c in row {
                write!(out, ",{c}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::contract(
            "confusion",
            format!("{} predictions for {} labels", preds.len(), truth.len()),
        ));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::contract(
                "confusion",
                format!("label {} out of range for k={k}", p.max(t)),
            ));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub zero_division: Vec<&'static str>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub positive_class: usize,
    /// Metrics of the positive class.
    pub positive: ClassMetrics,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Aggregate,
    pub weighted_avg: Aggregate,
    pub accuracy: f64,
    pub total: u64,
    pub zero_division: bool,
}

fn ratio(num: u64, den: u64) -> Option<BigRational> {
    (den != 0).then(|| BigRational::new(BigInt::from(num), BigInt::from(den)))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("bounded ratio converts")
}

struct Exact {
    precision: BigRational,
    recall: BigRational,
    f1: BigRational,
}

fn class_metrics(cm: &ConfusionMatrix, c: usize, names: &[String]) -> (ClassMetrics, Exact) {
    let k = cm.num_classes();
    let tp = cm.counts[c][c];
    let support: u64 = cm.counts[c].iter().sum();
    let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
    let (fp, fn_) = (predicted - tp, support - tp);
    let tn = cm.total() - tp - fp - fn_;
    let mut zero_division = Vec::new();
    let zero = BigRational::zero;
    let precision = ratio(tp, tp + fp).unwrap_or_else(|| {
        zero_division.push("precision");
        zero()
    });
    let recall = ratio(tp, tp + fn_).unwrap_or_else(|| {
        zero_division.push("recall");
        zero()
    });
    let sum = &precision + &recall;
    let f1 = if sum.is_zero() {
        zero_division.push("f1");
        zero()
    } else {
        BigRational::from_integer(BigInt::from(2)) * &precision * &recall / sum
    };
    let metrics = ClassMetrics {
        class: c,
        name: names.get(c).cloned().unwrap_or_else(|| c.to_string()),
        precision: to_f64(&precision),
        recall: to_f64(&recall),
        f1: to_f64(&f1),
        support,
        tp,
        fp,
        fn_,
        tn,
        zero_division,
    };
    (
        metrics,
        Exact {
            precision,
            recall,
            f1,
        },
    )
}

/// [`metrics_named`] with classes named by index.
pub fn metrics(cm: &ConfusionMatrix, positive_class: usize) -> Result<MetricsReport> {
    metrics_named(cm, positive_class, &[])
}

/// Per-class, macro, support-weighted and accuracy figures.
pub fn metrics_named(
    cm: &ConfusionMatrix,
    positive_class: usize,
    class_names: &[String],
) -> Result<MetricsReport> {
    let k = cm.num_classes();
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("metrics", "confusion matrix is empty"));
    }
    if positive_class >= k {
        return Err(Error::contract(
            "metrics",
            format!("positive class {positive_class} >= {k}"),
        ));
    }
    let (per_class, exact): (Vec<_>, Vec<_>) =
        (0..k).map(|c| class_metrics(cm, c, class_names)).unzip();
    let kq = BigRational::from_integer(BigInt::from(k));
    let nq = BigRational::from_integer(BigInt::from(total));
    let macro_of = |f: fn(&Exact) -> &BigRational| {
        to_f64(&(exact.iter().map(f).fold(BigRational::zero(), |a, b| a + b) / &kq))
    };
    let weighted_of = |f: fn(&Exact) -> &BigRational| {
        let sum = exact
            .iter()
            .zip(&per_class)
            .map(|(e, m)| f(e) * BigRational::from_integer(BigInt::from(m.support)))
            .fold(BigRational::zero(), |a, b| a + b);
        to_f64(&(sum / &nq))
    };
    let accuracy = to_f64(&ratio(cm.trace(), total).expect("total > 0"));
    Ok(MetricsReport {
        positive_class,
        positive: per_class[positive_class].clone(),
        macro_avg: Aggregate {
            precision: macro_of(|e| &e.precision),
            recall: macro_of(|e| &e.recall),
            f1: macro_of(|e| &e.f1),
        },
        weighted_avg: Aggregate {
            precision: weighted_of(|e| &e.precision),
            recall: weighted_of(|e| &e.recall),
            f1: weighted_of(|e| &e.f1),
        },
        accuracy,
        total,
        zero_division: per_class.iter().any(|m| !m.zero_division.is_empty()),
        per_class,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `scope,class,precision,recall,f1,support` rows: per class, then
    /// macro, weighted and accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,class,precision,recall,f1,support\n");
        for m in &self.per_class {
            writeln!(
                out,
                "class,{},{},{},{},{}",
                m.name, m.precision, m.recall, m.f1, m.support
            )
            .expect("write to string");
        }
        for (scope, a) in [("macro", &self.macro_avg), ("weighted", &self.weighted_avg)] {
            writeln!(
                out,
                "{scope},,{},{},{},{}",
                a.precision, a.recall, a.f1, self.total
            )
            .expect("write to string");
        }
        writeln!(out, "accuracy,,,,{},{}", self.accuracy, self.total).expect("write to string");
        out
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>9} {:>9} {:>9} {:>8}\n",
            "", "precision", "recall", "f1", "support"
        );
        for m in &self.per_class {
            writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.name, m.precision, m.recall, m.f1, m.support
            )
            .expect("write to string");
        }
        for (scope, a) in [
            ("macro avg", &self.macro_avg),
            ("weighted avg", &self.weighted_avg),
        ] {
            writeln!(
                out,
                "{scope:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                a.precision, a.recall, a.f1, self.total
            )
            .expect("write to string");
        }
        writeln!(
            out,
            "{:<12} {:>29.4} {:>8}",
            "accuracy", self.accuracy, self.total
        )
        .expect("write to string");
        out
    }
}

/// Argmax predictions in eval mode, batched.
pub fn predict<M: Classifier>(
    model: &mut M,
    dataset: &LabeledDataset,
    batch_size: usize,
) -> Result<Vec<usize>> {
    if dataset
        .image_size()
        .is_some_and(|s| s != model.input_size())
    {
        return Err(Error::contract(
            "evaluate",
            "dataset image size differs from model input",
        ));
    }
    let k = model.num_classes();
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = dataset.batch(chunk)?;
        let tape = Tape::new();
        let logits = model.logits(&tape, &x, Mode::Eval)?;
        out.extend(argmax_rows(&logits.data(), k));
    }
    Ok(out)
}

/// Confusion matrix and report of `model` on `dataset`; the last class is
/// treated as positive.
pub fn evaluate<M: Classifier>(
    model: &mut M,
    dataset: &LabeledDataset,
    batch_size: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let preds = predict(model, dataset, batch_size)?;
    let k = model.num_classes();
    let cm = confusion(&preds, &dataset.labels(), k)?;
    let report = metrics_named(&cm, k - 1, dataset.class_names())?;
    Ok((cm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_matrix() {
        let cm = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 2]]);
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn perfect_matrix() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 0], vec![0, 7]]).unwrap();
        let r = metrics(&cm, 1).unwrap();
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.accuracy, 1.0);
        assert!(!r.zero_division);
    }

    #[test]
    fn reported_accuracy_matrix() {
        let cm = ConfusionMatrix::from_counts(vec![vec![220, 14], vec![24, 366]]).unwrap();
        let r = metrics(&cm, 1).unwrap();
        assert!((r.accuracy - 0.9391).abs() <= 5e-5);
        assert_eq!(r.accuracy, 586.0 / 624.0);
        assert_eq!(r.positive.tp, 366);
        assert_eq!(r.positive.fp, 14);
        assert_eq!(r.positive.fn_, 24);
        assert_eq!(r.positive.tn, 220);
    }

    #[test]
    fn zero_denominator_is_flagged() {
        // nothing predicted as class 1
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![2, 0]]).unwrap();
        let r = metrics(&cm, 1).unwrap();
        assert_eq!(r.positive.precision, 0.0);
        assert!(r.positive.zero_division.contains(&"precision"));
        assert!(r.zero_division);
        assert!(metrics(&ConfusionMatrix::from_counts(vec![vec![0]]).unwrap(), 0).is_err());
    }

    #[test]
    fn csv_and_json_have_stable_fields() {
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 1], vec![0, 3]]).unwrap();
        let r = metrics_named(&cm, 1, &["NORMAL".into(), "PNEUMONIA".into()]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("scope,class,precision,recall,f1,support\nclass,NORMAL,"));
        assert!(csv.contains("\naccuracy,,,,"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["per_class"][1]["name"], "PNEUMONIA");
        assert_eq!(json["total"], 6);
        assert_eq!(
            cm.to_csv(&["NORMAL".into(), "PNEUMONIA".into()]),
            "true\\pred,NORMAL,PNEUMONIA\nNORMAL,2,1\nPNEUMONIA,0,3\n"
        );
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..5).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::vec(0u64..50, k), k)
                .prop_filter("non-empty", |m| m.iter().flatten().sum::<u64>() > 0)
        })
    }

    proptest! {
        #[test]
        fn weighted_recall_equals_accuracy(counts in matrix()) {
            let r = metrics(&ConfusionMatrix::from_counts(counts).unwrap(), 0).unwrap();
            prop_assert_eq!(r.weighted_avg.recall, r.accuracy);
        }

        #[test]
        fn scaling_counts_changes_nothing(counts in matrix(), s in 2u64..7) {
            let scaled = counts.iter().map(|r| r.iter().map(|c| c * s).collect()).collect();
            let a = metrics(&ConfusionMatrix::from_counts(counts).unwrap(), 0).unwrap();
            let b = metrics(&ConfusionMatrix::from_counts(scaled).unwrap(), 0).unwrap();
            prop_assert_eq!(a.per_class.iter().map(|m| (m.precision, m.recall, m.f1)).collect::<Vec<_>>(),
                            b.per_class.iter().map(|m| (m.precision, m.recall, m.f1)).collect::<Vec<_>>());
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.weighted_avg, b.weighted_avg);
        }

        #[test]
        fn relabeling_permutes_per_class_metrics(counts in matrix(), rot in 0usize..4) {
            let k = counts.len();
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let mut permuted = vec![vec![0; k]; k];
            for i in 0..k {
                for j in 0..k {
                    permuted[perm[i]][perm[j]] = counts[i][j];
                }
            }
            let a = metrics(&ConfusionMatrix::from_counts(counts).unwrap(), 0).unwrap();
            let b = metrics(&ConfusionMatrix::from_counts(permuted).unwrap(), 0).unwrap();
            for c in 0..k {
                let (x, y) = (&a.per_class[c], &b.per_class[perm[c]]);
                prop_assert_eq!((x.precision, x.recall, x.f1, x.support), (y.precision, y.recall, y.f1, y.support));
            }
        }
    }
}
