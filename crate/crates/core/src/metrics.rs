//! Evaluation metrics: weighted and per-class F1, confusion matrices, and
//! gate-weight statistics.
//!
//! F1 uses the zero-division convention: a class with precision + recall
//! equal to zero scores 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("labels and predictions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("class index {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),
}

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs(labels: &[usize], predictions: &[usize], class_count: usize) -> Result<Self, MetricsError> {
        if labels.len() != predictions.len() {
            return Err(MetricsError::LengthMismatch(labels.len(), predictions.len()));
        }
        if labels.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut counts = vec![vec![0u64; class_count]; class_count];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= class_count {
                return Err(MetricsError::ClassOutOfRange(y, class_count));
            }
            if p >= class_count {
                return Err(MetricsError::ClassOutOfRange(p, class_count));
            }
            counts[y][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|row| row.iter().sum::<u64>()).sum()
    }

    /// Per-class support (row sums).
    pub fn supports(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// CSV with a header of predicted-class names and one row per true
    /// class, prefixed by its name.
    pub fn to_csv(&self, class_names: &[String], w: impl std::io::Write) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        let mut header = vec!["true\\pred".to_string()];
        header.extend(class_names.iter().cloned());
        writer.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut record = vec![class_names[i].clone()];
            record.extend(row.iter().map(|c| c.to_string()));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Per-class F1 plus a flag for classes absent from both labels and
/// predictions (their 0 score is a convention, not a measurement).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClassF1 {
    pub f1: f64,
    pub absent: bool,
}

/// Standard per-class F1 from one pass over the pairs.
pub fn per_class_f1(labels: &[usize], predictions: &[usize], class_count: usize) -> Result<Vec<ClassF1>, MetricsError> {
    let cm = ConfusionMatrix::from_pairs(labels, predictions, class_count)?;
    let mut out = Vec::with_capacity(class_count);
    for c in 0..class_count {
        let tp = cm.counts[c][c] as f64;
        let fp: f64 = (0..class_count).filter(|&r| r != c).map(|r| cm.counts[r][c] as f64).sum();
        let fn_: f64 = (0..class_count).filter(|&p| p != c).map(|p| cm.counts[c][p] as f64).sum();
        let absent = tp + fp + fn_ == 0.0;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        out.push(ClassF1 { f1, absent });
    }
    Ok(out)
}

/// Support-weighted mean of per-class F1 scores.
pub fn weighted_f1(labels: &[usize], predictions: &[usize], class_count: usize) -> Result<f64, MetricsError> {
    let per_class = per_class_f1(labels, predictions, class_count)?;
    let cm = ConfusionMatrix::from_pairs(labels, predictions, class_count)?;
    let supports = cm.supports();
    let total: u64 = supports.iter().sum();
    let weighted = per_class
        .iter()
        .zip(&supports)
        .map(|(c, &s)| c.f1 * s as f64)
        .sum::<f64>()
        / total as f64;
    Ok(weighted)
}

/// One exported gate decision, as written to `gates.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateRecord {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub beta_s: f64,
    pub beta_t: f64,
    pub beta_m: f64,
    pub label: usize,
    pub prediction: usize,
}

impl GateRecord {
    pub fn beta(&self) -> [f64; 3] {
        [self.beta_s, self.beta_t, self.beta_m]
    }
}

pub const GATE_HISTOGRAM_BINS: usize = 10;

/// Aggregate gate-weight statistics over a split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateStats {
    /// Mean weight per expert, in (speech, text, multimodal) order.
    pub mean_beta: [f64; 3],
    /// Ten equal-width bins over [0, 1] per expert.
    pub histograms: [[u64; GATE_HISTOGRAM_BINS]; 3],
    /// Mean weight per expert per true class.
    pub per_class_mean: Vec<[f64; 3]>,
}

pub fn gate_stats(records: &[GateRecord], class_count: usize) -> Result<GateStats, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut mean = [0.0f64; 3];
    let mut histograms = [[0u64; GATE_HISTOGRAM_BINS]; 3];
    let mut class_sums = vec![[0.0f64; 3]; class_count];
    let mut class_counts = vec![0u64; class_count];
    for rec in records {
        if rec.label >= class_count {
            return Err(MetricsError::ClassOutOfRange(rec.label, class_count));
        }
        for (e, &b) in rec.beta().iter().enumerate() {
            mean[e] += b;
            let bin = ((b * GATE_HISTOGRAM_BINS as f64) as usize).min(GATE_HISTOGRAM_BINS - 1);
            histograms[e][bin] += 1;
            class_sums[rec.label][e] += b;
        }
        class_counts[rec.label] += 1;
    }
    let n = records.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let per_class_mean = class_sums
        .iter()
        .zip(&class_counts)
        .map(|(sums, &count)| {
            if count == 0 {
                [0.0; 3]
            } else {
                [sums[0] / count as f64, sums[1] / count as f64, sums[2] / count as f64]
            }
        })
        .collect();
    Ok(GateStats { mean_beta: mean, histograms, per_class_mean })
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub absent_classes: Vec<usize>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_means: Option<[f64; 3]>,
}

impl MetricsReport {
    pub fn build(
        labels: &[usize],
        predictions: &[usize],
        class_count: usize,
        gate_means: Option<[f64; 3]>,
    ) -> Result<Self, MetricsError> {
        let per_class = per_class_f1(labels, predictions, class_count)?;
        Ok(MetricsReport {
            weighted_f1: weighted_f1(labels, predictions, class_count)?,
            per_class_f1: per_class.iter().map(|c| c.f1).collect(),
            absent_classes: per_class
                .iter()
                .enumerate()
                .filter(|(_, c)| c.absent)
                .map(|(i, _)| i)
                .collect(),
            confusion: ConfusionMatrix::from_pairs(labels, predictions, class_count)?.counts,
            gate_means,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force weighted F1 straight from the definition, written
    /// independently of the library path above.
    pub(crate) fn brute_weighted_f1(labels: &[usize], preds: &[usize], classes: usize) -> f64 {
        let n = labels.len() as f64;
        let mut acc = 0.0;
        for c in 0..classes {
            let tp = labels.iter().zip(preds).filter(|(&y, &p)| y == c && p == c).count() as f64;
            let pred_c = preds.iter().filter(|&&p| p == c).count() as f64;
            let true_c = labels.iter().filter(|&&y| y == c).count() as f64;
            let prec = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let rec = if true_c > 0.0 { tp / true_c } else { 0.0 };
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            acc += f1 * true_c / n;
        }
        acc
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![0, 1, 2, 1, 0];
        assert_eq!(weighted_f1(&labels, &labels, 3).unwrap(), 1.0);
        let per = per_class_f1(&labels, &labels, 3).unwrap();
        assert!(per.iter().all(|c| c.f1 == 1.0 && !c.absent));
    }

    #[test]
    fn hand_example_two_thirds() {
        // labels [0,0,1], preds [0,1,1]: both class F1s are 2/3.
        let f1 = weighted_f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_wrong_binary_is_zero() {
        assert_eq!(weighted_f1(&[0, 1, 0], &[1, 0, 1], 2).unwrap(), 0.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(weighted_f1(&[], &[], 2), Err(MetricsError::Empty)));
    }

    #[test]
    fn absent_class_is_flagged() {
        let per = per_class_f1(&[0, 0], &[0, 0], 3).unwrap();
        assert!(!per[0].absent);
        assert!(per[1].absent && per[1].f1 == 0.0);
        assert!(per[2].absent);
    }

    #[test]
    fn weighted_combination_of_per_class_equals_weighted_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let n = rng.random_range(1..60);
            let classes = rng.random_range(2..6usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let per = per_class_f1(&labels, &preds, classes).unwrap();
            let supports = ConfusionMatrix::from_pairs(&labels, &preds, classes).unwrap().supports();
            let combo: f64 = per.iter().zip(&supports).map(|(c, &s)| c.f1 * s as f64).sum::<f64>() / n as f64;
            let direct = weighted_f1(&labels, &preds, classes).unwrap();
            assert!((combo - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let classes = rng.random_range(2..7usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let lib = weighted_f1(&labels, &preds, classes).unwrap();
            let brute = brute_weighted_f1(&labels, &preds, classes);
            assert!((lib - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 30;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4usize)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4usize)).collect();
        let base = weighted_f1(&labels, &preds, 4).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let labels_p: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let preds_p: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        assert_eq!(base, weighted_f1(&labels_p, &preds_p, 4).unwrap());
        assert_eq!(
            ConfusionMatrix::from_pairs(&labels, &preds, 4).unwrap(),
            ConfusionMatrix::from_pairs(&labels_p, &preds_p, 4).unwrap()
        );
    }

    #[test]
    fn confusion_row_sums_equal_supports() {
        let labels = vec![0, 0, 1, 2, 2, 2];
        let preds = vec![0, 1, 1, 2, 0, 2];
        let cm = ConfusionMatrix::from_pairs(&labels, &preds, 3).unwrap();
        assert_eq!(cm.supports(), vec![2, 1, 3]);
        assert_eq!(cm.total(), 6);
    }

    #[test]
    fn gate_stats_uniform_and_single() {
        let uniform_rec = |i: usize| GateRecord {
            conversation_id: "c".into(),
            utterance_index: i,
            beta_s: 1.0 / 3.0,
            beta_t: 1.0 / 3.0,
            beta_m: 1.0 / 3.0,
            label: i % 2,
            prediction: 0,
        };
        let records: Vec<GateRecord> = (0..6).map(uniform_rec).collect();
        let stats = gate_stats(&records, 2).unwrap();
        for m in stats.mean_beta {
            assert!((m - 1.0 / 3.0).abs() < 1e-12);
        }
        let sum: f64 = stats.mean_beta.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        let single = vec![GateRecord {
            conversation_id: "c".into(),
            utterance_index: 0,
            beta_s: 0.7,
            beta_t: 0.2,
            beta_m: 0.1,
            label: 1,
            prediction: 1,
        }];
        let stats = gate_stats(&single, 2).unwrap();
        assert_eq!(stats.mean_beta, [0.7, 0.2, 0.1]);
        assert_eq!(stats.per_class_mean[1], [0.7, 0.2, 0.1]);
        assert_eq!(stats.per_class_mean[0], [0.0, 0.0, 0.0]);
        // 0.7 lands in bin 7, 0.2 in bin 2, 0.1 in bin 1.
        assert_eq!(stats.histograms[0][7], 1);
        assert_eq!(stats.histograms[1][2], 1);
        assert_eq!(stats.histograms[2][1], 1);
    }

    #[test]
    fn confusion_csv_has_class_headers() {
        let cm = ConfusionMatrix::from_pairs(&[0, 1], &[0, 1], 2).unwrap();
        let mut buf = Vec::new();
        cm.to_csv(&["neg".into(), "pos".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("true\\pred,neg,pos\n"));
        assert!(text.contains("neg,1,0"));
    }
}
