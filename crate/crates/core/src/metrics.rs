//! Multi-class classification metrics and multi-round confidence-interval
//! aggregation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// K x K counts, rows indexed by true class, columns by predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn true_positives(&self, class: usize) -> u64 {
        self.count(class, class)
    }

    fn predicted_positives(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, class)).sum()
    }

    fn actual_positives(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.count(class, p)).sum()
    }
}

/// Tally label/prediction pairs into a confusion matrix.
pub fn confusion(labels: &[usize], predictions: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Config(format!(
            "confusion: {} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= classes || p >= classes {
            return Err(Error::Config(format!("confusion: class id {} out of range 0..{classes}", t.max(p))));
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

/// One-vs-rest precision/recall/f1 for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the value was reported as 0.
    pub zero_division: bool,
}

/// Accuracy plus one-vs-rest and macro-averaged precision/recall/f1. The
/// headline precision/recall/f1 are the positive class's one-vs-rest
/// values; macro averages sit alongside so either reading is available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub positive_class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub samples: u64,
    pub zero_division: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Derive a [`MetricsReport`] from a confusion matrix.
pub fn report(cm: &ConfusionMatrix, positive_class: usize) -> Result<MetricsReport> {
    if positive_class >= cm.classes() {
        return Err(Error::Config(format!(
            "positive class {positive_class} out of range 0..{}",
            cm.classes()
        )));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Config("empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.classes()).map(|c| cm.true_positives(c)).sum();
    let accuracy = trace as f64 / total as f64;

    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let tp = cm.true_positives(c);
            let (precision, pz) = ratio(tp, cm.predicted_positives(c));
            let (recall, rz) = ratio(tp, cm.actual_positives(c));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics { precision, recall, f1, zero_division: pz || rz }
        })
        .collect();

    let k = cm.classes() as f64;
    let headline = per_class[positive_class];
    Ok(MetricsReport {
        accuracy,
        positive_class,
        precision: headline.precision,
        recall: headline.recall,
        f1: headline.f1,
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        zero_division: headline.zero_division,
        per_class,
        samples: total,
    })
}

/// Mean and 95% half-width of one metric across rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub mean: f64,
    pub half_width: f64,
}

/// Per-round reports plus Student-t confidence intervals on each headline
/// metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundsAggregate {
    pub rounds: Vec<MetricsReport>,
    pub accuracy: MetricCi,
    pub precision: MetricCi,
    pub recall: MetricCi,
    pub f1: MetricCi,
}

/// 95% two-sided Student-t confidence interval: `mean ± t_{0.975,n-1} s/sqrt(n)`.
pub fn mean_ci(values: &[f64]) -> Result<MetricCi> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Config(format!("confidence interval needs >= 2 rounds, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Config(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    Ok(MetricCi { mean, half_width: t * s / (n as f64).sqrt() })
}

/// Aggregate round reports into means with 95% half-widths.
pub fn aggregate(rounds: &[MetricsReport]) -> Result<RoundsAggregate> {
    let pick = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { rounds.iter().map(f).collect() };
    Ok(RoundsAggregate {
        accuracy: mean_ci(&pick(|r| r.accuracy))?,
        precision: mean_ci(&pick(|r| r.precision))?,
        recall: mean_ci(&pick(|r| r.recall))?,
        f1: mean_ci(&pick(|r| r.f1))?,
        rounds: rounds.to_vec(),
    })
}

impl std::fmt::Display for MetricCi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} \u{b1} {:.4}", self.mean, self.half_width)
    }
}

/// Render labelled aggregates as an aligned-column text table. Rows whose
/// label ends in `*` are evaluations on perturbed inputs.
pub fn format_table(rows: &[(String, RoundsAggregate)]) -> String {
    let mut out = String::new();
    let label_width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once("Model".len()))
        .max()
        .unwrap_or(5)
        + 2;
    out.push_str(&format!(
        "{:<4}{:<label_width$}{:<18}{:<18}{:<18}{:<18}\n",
        "#", "Model", "Accuracy", "Precision", "Recall", "F1-score"
    ));
    for (i, (label, agg)) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<4}{:<label_width$}{:<18}{:<18}{:<18}{:<18}\n",
            i + 1,
            label,
            agg.accuracy.to_string(),
            agg.precision.to_string(),
            agg.recall.to_string(),
            agg.f1.to_string(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    #[test]
    fn perfect_predictions_give_diagonal_and_ones() {
        let labels = [0, 1, 2, 1, 0];
        let cm = confusion(&labels, &labels, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.count(t, p), 0);
                }
            }
        }
        let rep = report(&cm, 1).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
        assert_eq!(rep.f1, 1.0);
        assert!(!rep.zero_division);
    }

    #[test]
    fn counting_matches_row_and_column_sums() {
        let cm = confusion(&[0, 1, 2], &[1, 1, 1], 3).unwrap();
        for t in 0..3 {
            assert_eq!(cm.actual_positives(t), 1);
        }
        assert_eq!(cm.predicted_positives(1), 3);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn random_cases_match_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let k = 4;
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.gen_range(0..k)).collect();
        let cm = confusion(&labels, &preds, k).unwrap();
        for t in 0..k {
            for p in 0..k {
                let expect = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&l, &q)| l == t && q == p)
                    .count() as u64;
                assert_eq!(cm.count(t, p), expect);
            }
        }
    }

    #[test]
    fn binary_half_predicted_case() {
        // cm [[5,0],[5,0]], positive class 0: precision 0.5, recall 1, f1 2/3
        let labels = [vec![0usize; 5], vec![1usize; 5]].concat();
        let preds = vec![0usize; 10];
        let cm = confusion(&labels, &preds, 2).unwrap();
        let rep = report(&cm, 0).unwrap();
        assert_eq!(rep.precision, 0.5);
        assert_eq!(rep.recall, 1.0);
        assert!((rep.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_predicted_positives_flags_zero_division() {
        let cm = confusion(&[0, 0, 1], &[1, 1, 1], 2).unwrap();
        let rep = report(&cm, 0).unwrap();
        assert_eq!(rep.precision, 0.0);
        assert!(rep.zero_division);
    }

    #[test]
    fn out_of_range_class_is_an_error() {
        assert!(confusion(&[0, 3], &[0, 0], 3).is_err());
    }

    #[test]
    fn permuting_sample_order_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<usize> = (0..100).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<usize> = (0..100).map(|_| rng.gen_range(0..3)).collect();
        let rep1 = report(&confusion(&labels, &preds, 3).unwrap(), 1).unwrap();

        let mut idx: Vec<usize> = (0..100).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p2: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let rep2 = report(&confusion(&l2, &p2, 3).unwrap(), 1).unwrap();
        assert_eq!(rep1, rep2);
    }

    #[test]
    fn f1_sits_between_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let labels: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
            let preds: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
            let rep = report(&confusion(&labels, &preds, 3).unwrap(), 1).unwrap();
            for c in &rep.per_class {
                if c.precision > 0.0 && c.recall > 0.0 {
                    assert!(c.f1 <= c.precision.max(c.recall) + 1e-12);
                    assert!(c.f1 >= c.precision.min(c.recall) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn micro_accuracy_equals_macro_recall_on_balanced_diagonal() {
        // balanced classes, symmetric confusion structure
        let mut cm = ConfusionMatrix::new(3);
        for t in 0..3 {
            for p in 0..3 {
                cm.counts[t * 3 + p] = if t == p { 8 } else { 1 };
            }
        }
        let rep = report(&cm, 0).unwrap();
        assert!((rep.accuracy - rep.macro_recall).abs() < 1e-12);
    }

    #[test]
    fn identical_rounds_have_zero_half_width() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let rep = report(&cm, 1).unwrap();
        let agg = aggregate(&[rep.clone(), rep.clone(), rep]).unwrap();
        assert_eq!(agg.accuracy.half_width, 0.0);
        assert_eq!(agg.accuracy.mean, 1.0);
    }

    #[test]
    fn two_round_interval_matches_t_table() {
        let ci = mean_ci(&[0.9, 1.0]).unwrap();
        assert!((ci.mean - 0.95).abs() < 1e-12);
        // s = 0.0707..., t_{0.975,1} = 12.7062: half-width = 12.7062 * s / sqrt(2)
        assert!((ci.half_width - 0.6353).abs() < 1e-3, "{}", ci.half_width);
    }

    #[test]
    fn aggregate_requires_two_rounds() {
        let cm = confusion(&[0], &[0], 2).unwrap();
        let rep = report(&cm, 0).unwrap();
        assert!(aggregate(&[rep]).is_err());
    }

    #[test]
    fn t_interval_covers_true_mean_at_nominal_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        let normal = Normal::new(0.7, 0.05).unwrap();
        let mut covered = 0;
        let sims = 1000;
        for _ in 0..sims {
            let sample: Vec<f64> = (0..15).map(|_| normal.sample(&mut rng)).collect();
            let ci = mean_ci(&sample).unwrap();
            if (ci.mean - 0.7).abs() <= ci.half_width {
                covered += 1;
            }
        }
        let coverage = covered as f64 / sims as f64;
        assert!((coverage - 0.95).abs() <= 0.02, "coverage {coverage}");
    }

    #[test]
    fn table_has_header_and_one_row_per_entry() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let rep = report(&cm, 1).unwrap();
        let agg = aggregate(&[rep.clone(), rep]).unwrap();
        let table = format_table(&[("tiny".into(), agg.clone()), ("tiny*".into(), agg)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("Accuracy") && lines[0].contains("F1-score"));
        assert!(lines[1].contains("tiny") && lines[1].contains("1.0000 \u{b1} 0.0000"));
        assert!(lines[2].contains("tiny*"));
    }
}
