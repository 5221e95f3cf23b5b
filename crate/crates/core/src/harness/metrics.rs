//! Classification metrics over confusion matrices and score matrices.

use crate::error::{Error, Result};

/// Square confusion matrix, `counts[true][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Confusion {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize], n_classes: usize) -> Self {
        let mut c = Confusion::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            c.counts[t][p] += 1;
        }
        c
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Plain accuracy: trace over total.
pub fn accuracy(c: &Confusion) -> f64 {
    let correct: u64 = (0..c.n_classes()).map(|i| c.counts[i][i]).sum();
    correct as f64 / c.total() as f64
}

/// Mean per-class recall. Classes absent from the truth column contribute
/// recall 0 with a warning.
pub fn balanced_accuracy(c: &Confusion) -> f64 {
    let k = c.n_classes();
    let mut sum = 0.0;
    for t in 0..k {
        let support: u64 = c.counts[t].iter().sum();
        if support == 0 {
            eprintln!("warning: class {t} absent from truth, recall counted as 0");
            continue;
        }
        sum += c.counts[t][t] as f64 / support as f64;
    }
    sum / k as f64
}

/// Mean per-class harmonic mean of precision and recall.
pub fn macro_f1(c: &Confusion) -> f64 {
    let k = c.n_classes();
    let mut sum = 0.0;
    for cls in 0..k {
        let tp = c.counts[cls][cls] as f64;
        let support: u64 = c.counts[cls].iter().sum();
        let predicted: u64 = (0..k).map(|t| c.counts[t][cls]).sum();
        if support == 0 {
            eprintln!("warning: class {cls} absent from truth, F1 counted as 0");
            continue;
        }
        let recall = tp / support as f64;
        let precision = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / k as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    pub macro_auc: f64,
    /// Classes skipped for lacking both positives and negatives.
    pub skipped_classes: Vec<usize>,
}

/// Macro one-vs-rest AUC via the Mann-Whitney rank statistic with midranks
/// for ties. `scores` is `N x K` row-major; `labels` are class indices.
pub fn auc_ovr(scores: &[f32], labels: &[usize], n_classes: usize) -> Result<AucResult> {
    let n = labels.len();
    if n == 0 || scores.len() != n * n_classes {
        return Err(Error::Contract(format!(
            "auc_ovr: {} scores for {} samples x {} classes",
            scores.len(),
            n,
            n_classes
        )));
    }
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for cls in 0..n_classes {
        let n_pos = labels.iter().filter(|&&l| l == cls).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            skipped.push(cls);
            continue;
        }
        // midranks of the class-score column
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[a * n_classes + cls]
                .partial_cmp(&scores[b * n_classes + cls])
                .unwrap()
        });
        let mut ranks = vec![0.0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n
                && scores[order[j + 1] * n_classes + cls] == scores[order[i] * n_classes + cls]
            {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = midrank;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..n)
            .filter(|&i| labels[i] == cls)
            .map(|i| ranks[i])
            .sum();
        let auc =
            (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64);
        aucs.push(auc);
    }
    if aucs.is_empty() {
        return Err(Error::Contract("auc_ovr: no evaluable class".into()));
    }
    Ok(AucResult {
        macro_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        skipped_classes: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn diagonal_confusion_is_perfect() {
        let c = Confusion {
            counts: vec![vec![3, 0], vec![0, 5]],
        };
        assert_eq!(balanced_accuracy(&c), 1.0);
        assert_eq!(macro_f1(&c), 1.0);
        assert_eq!(accuracy(&c), 1.0);
    }

    #[test]
    fn hand_confusion_case() {
        // recalls 1.0 and 0.5 -> balanced accuracy 0.75
        let c = Confusion {
            counts: vec![vec![2, 0], vec![1, 1]],
        };
        assert!((balanced_accuracy(&c) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_prediction_class_in_three_class_task() {
        let c = Confusion {
            counts: vec![vec![4, 0, 0], vec![3, 0, 0], vec![2, 0, 0]],
        };
        assert!((balanced_accuracy(&c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_perfect_and_constant() {
        // perfectly ordered scores
        let scores = [0.9f32, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9];
        let labels = [0usize, 0, 1, 1];
        let r = auc_ovr(&scores, &labels, 2).unwrap();
        assert_eq!(r.macro_auc, 1.0);
        // constant scores: all ties -> exactly 0.5
        let scores = [0.5f32; 8];
        let r = auc_ovr(&scores, &labels, 2).unwrap();
        assert_eq!(r.macro_auc, 0.5);
    }

    /// Brute force: AUC = fraction of (pos, neg) pairs ranked correctly,
    /// ties counting one half.
    fn auc_pairs(scores: &[f32], labels: &[usize], n_classes: usize, cls: usize) -> f64 {
        let n = labels.len();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            if labels[i] != cls {
                continue;
            }
            for j in 0..n {
                if labels[j] == cls {
                    continue;
                }
                pairs += 1.0;
                let si = scores[i * n_classes + cls];
                let sj = scores[j * n_classes + cls];
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_brute_force_pair_counting() {
        let mut rng = Stream::new(404);
        for trial in 0..300 {
            let n = 2 + rng.below(11) as usize;
            let k = 2 + rng.below(3) as usize;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k as u64) as usize).collect();
            // quantized scores to force ties
            let scores: Vec<f32> = (0..n * k)
                .map(|_| (rng.below(5) as f32) / 4.0)
                .collect();
            let got = auc_ovr(&scores, &labels, k);
            let mut expect = Vec::new();
            for cls in 0..k {
                let n_pos = labels.iter().filter(|&&l| l == cls).count();
                if n_pos == 0 || n_pos == n {
                    continue;
                }
                expect.push(auc_pairs(&scores, &labels, k, cls));
            }
            match got {
                Ok(r) => {
                    let want = expect.iter().sum::<f64>() / expect.len() as f64;
                    assert!((r.macro_auc - want).abs() < 1e-12, "trial {trial}");
                }
                Err(_) => assert!(expect.is_empty(), "trial {trial}"),
            }
        }
    }

    #[test]
    fn auc_skips_unevaluable_classes() {
        let scores = [0.9f32, 0.0, 0.05, 0.1, 0.0, 0.8, 0.2, 0.0, 0.7];
        let labels = [0usize, 1, 1]; // class 2 has no positives
        let r = auc_ovr(&scores, &labels, 3).unwrap();
        assert_eq!(r.skipped_classes, vec![2]);
    }
}
