//! Multi-label ranking metrics.
//!
//! Per-label metrics return `None` for degenerate labels (no positives or
//! no negatives for ROC AUC, no positives for PR AUC). Macro averages are
//! taken over the labels for which the metric is defined.

use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mann-Whitney statistic via rank sums with averaged ranks for ties:
/// `(concordant + 0.5 tied) / (P N)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks are 1-based; a tie group spanning i..j gets (i + 1 + j) / 2
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        let group_pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * group_pos as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean over positives, in descending-score order, of
/// the precision at that rank. Ties keep their original relative order
/// (stable sort).
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / pos as f64)
}

/// ROC AUC over all (document, label) cells as one ranking problem.
pub fn micro_roc_auc(scores: ArrayView2<f64>, labels: ArrayView2<bool>) -> Result<f64> {
    if scores.dim() != labels.dim() {
        return Err(Error::Contract(format!(
            "score matrix {:?} and label matrix {:?} differ in shape",
            scores.dim(),
            labels.dim()
        )));
    }
    let s: Vec<f64> = scores.iter().copied().collect();
    let y: Vec<bool> = labels.iter().copied().collect();
    roc_auc(&s, &y).ok_or_else(|| {
        Error::Input("micro ROC AUC needs at least one positive and one negative cell".into())
    })
}

/// Train-frequency buckets `[lo, hi)`; `hi = None` is unbounded.
pub const BUCKETS: [(usize, Option<usize>); 4] =
    [(1, Some(10)), (10, Some(51)), (51, Some(101)), (101, None)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    /// Interval label such as `[10,51)`.
    pub bucket: String,
    pub lo: usize,
    pub hi: Option<usize>,
    pub roc_auc_macro: f64,
    /// Labels in the bucket with a defined ROC AUC.
    pub n_labels: usize,
}

fn bucket_name(lo: usize, hi: Option<usize>) -> String {
    match hi {
        Some(hi) => format!("[{lo},{hi})"),
        None => format!("[{lo},inf)"),
    }
}

/// Index into [`BUCKETS`] for a train frequency; `None` below 1.
pub fn bucket_of(freq: usize) -> Option<usize> {
    BUCKETS
        .iter()
        .position(|&(lo, hi)| freq >= lo && hi.is_none_or(|h| freq < h))
}

/// Mean per-label ROC AUC within each frequency bucket. Buckets without a
/// defined label are omitted.
pub fn bucketed_macro(per_label: &[Option<f64>], train_freq: &[usize]) -> Vec<BucketScore> {
    assert_eq!(per_label.len(), train_freq.len(), "one frequency per label");
    let mut sums = [(0.0f64, 0usize); BUCKETS.len()];
    for (auc, &f) in per_label.iter().zip(train_freq) {
        if let (Some(a), Some(b)) = (auc, bucket_of(f)) {
            sums[b].0 += a;
            sums[b].1 += 1;
        }
    }
    BUCKETS
        .iter()
        .zip(sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(&(lo, hi), (s, n))| BucketScore {
            bucket: bucket_name(lo, hi),
            lo,
            hi,
            roc_auc_macro: s / n as f64,
            n_labels: n,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub train_freq: usize,
    pub positives: usize,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub roc_auc_macro: Option<f64>,
    pub roc_auc_micro: Option<f64>,
    pub pr_auc_macro: Option<f64>,
    pub per_label: Vec<LabelScore>,
    pub buckets: Vec<BucketScore>,
    /// Labels without both positives and negatives, left out of the ROC AUC
    /// averages.
    pub excluded_degenerate: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    /// `scores` and `truth` are documents x labels.
    pub fn compute(
        scores: ArrayView2<f64>,
        truth: ArrayView2<bool>,
        labels: &[String],
        train_freq: &[usize],
    ) -> Result<Self> {
        if scores.dim() != truth.dim() || scores.ncols() != labels.len() || labels.len() != train_freq.len() {
            return Err(Error::Contract(format!(
                "metric inputs disagree: scores {:?}, truth {:?}, {} labels, {} frequencies",
                scores.dim(),
                truth.dim(),
                labels.len(),
                train_freq.len()
            )));
        }
        let per_label: Vec<LabelScore> = (0..labels.len())
            .map(|c| {
                let s: Vec<f64> = scores.column(c).to_vec();
                let y: Vec<bool> = truth.column(c).to_vec();
                LabelScore {
                    label: labels[c].clone(),
                    train_freq: train_freq[c],
                    positives: y.iter().filter(|&&v| v).count(),
                    roc_auc: roc_auc(&s, &y),
                    pr_auc: pr_auc(&s, &y),
                }
            })
            .collect();
        let roc: Vec<Option<f64>> = per_label.iter().map(|l| l.roc_auc).collect();
        Ok(Self {
            roc_auc_macro: mean(roc.iter().flatten().copied()),
            roc_auc_micro: micro_roc_auc(scores, truth).ok(),
            pr_auc_macro: mean(per_label.iter().filter_map(|l| l.pr_auc)),
            buckets: bucketed_macro(&roc, train_freq),
            excluded_degenerate: roc.iter().filter(|r| r.is_none()).count(),
            per_label,
        })
    }

    /// Macro ROC AUC over labels whose train frequency is at least `min_freq`.
    pub fn roc_auc_macro_min_freq(&self, min_freq: usize) -> Option<f64> {
        mean(
            self.per_label
                .iter()
                .filter(|l| l.train_freq >= min_freq)
                .filter_map(|l| l.roc_auc),
        )
    }

    pub fn bucket(&self, lo: usize) -> Option<&BucketScore> {
        self.buckets.iter().find(|b| b.lo == lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn brute_roc(s: &[f64], y: &[bool]) -> Option<f64> {
        let mut num = 0.0;
        let mut pairs = 0usize;
        for i in (0..s.len()).filter(|&i| y[i]) {
            for j in (0..s.len()).filter(|&j| !y[j]) {
                pairs += 1;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
        let p = y.iter().filter(|&&v| v).count();
        (pairs > 0).then(|| num / (p as f64 * (y.len() - p) as f64))
    }

    #[test]
    fn roc_examples() {
        let y = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &y), Some(1.0));
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &y), Some(0.0));
        assert_eq!(
            roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]),
            Some(0.75)
        );
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(roc_auc(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(pr_auc(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]), Some(0.25));
        let ap = pr_auc(&[0.9, 0.6, 0.4], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(pr_auc(&[0.3], &[false]), None);
        // stable tie order: positive listed second ranks second
        assert_eq!(pr_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
    }

    #[test]
    fn micro_examples() {
        let s = array![[0.9, 0.2], [0.3, 0.8]];
        let y = array![[true, false], [false, true]];
        assert_eq!(micro_roc_auc(s.view(), y.view()).unwrap(), 1.0);
        let col = array![[0.1], [0.4], [0.35], [0.8]];
        let ycol = array![[false], [false], [true], [true]];
        assert_eq!(micro_roc_auc(col.view(), ycol.view()).unwrap(), 0.75);
        let all = array![[true, true]];
        assert!(matches!(
            micro_roc_auc(array![[0.1, 0.2]].view(), all.view()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucket_of(0), None);
        assert_eq!(bucket_of(1), Some(0));
        assert_eq!(bucket_of(9), Some(0));
        assert_eq!(bucket_of(10), Some(1));
        assert_eq!(bucket_of(50), Some(1));
        assert_eq!(bucket_of(51), Some(2));
        assert_eq!(bucket_of(100), Some(2));
        assert_eq!(bucket_of(101), Some(3));
    }

    #[test]
    fn buckets_skip_empty_and_match_macro() {
        let b = bucketed_macro(&[Some(0.8), Some(0.6), None], &[20, 30, 40]);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].bucket, "[10,51)");
        assert!((b[0].roc_auc_macro - 0.7).abs() < 1e-12);
        assert_eq!(b[0].n_labels, 2);
    }

    #[test]
    fn report_fields_and_exclusions() {
        let s = array![[0.9, 0.1, 0.5], [0.2, 0.3, 0.5], [0.7, 0.8, 0.5]];
        let y = array![[true, false, false], [false, false, false], [true, true, false]];
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = MetricReport::compute(s.view(), y.view(), &names, &[5, 60, 200]).unwrap();
        assert_eq!(r.excluded_degenerate, 1);
        assert_eq!(r.per_label[2].roc_auc, None);
        assert_eq!(r.roc_auc_macro, Some(1.0));
        assert_eq!(r.buckets.len(), 2);
        assert!(r.bucket(101).is_none());
        let json = serde_json::to_value(&r).unwrap();
        for key in [
            "roc_auc_macro",
            "roc_auc_micro",
            "pr_auc_macro",
            "per_label",
            "buckets",
            "excluded_degenerate",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..=12).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn roc_matches_pairwise_count((s, y) in instance()) {
            prop_assert_eq!(roc_auc(&s, &y), brute_roc(&s, &y));
        }

        #[test]
        fn roc_invariant_under_monotone_map((s, y) in instance(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let t: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
            prop_assert_eq!(roc_auc(&s, &y), roc_auc(&t, &y));
        }

        #[test]
        fn roc_of_negated_scores_complements(y in prop::collection::vec(any::<bool>(), 2..12), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut s: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
            s.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            if let (Some(a), Some(b)) = (roc_auc(&s, &y), roc_auc(&neg, &y)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn macro_is_mean_of_included(values in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..20)) {
            let freq = vec![20; values.len()];
            let b = bucketed_macro(&values, &freq);
            let inc: Vec<f64> = values.iter().flatten().copied().collect();
            if inc.is_empty() {
                prop_assert!(b.is_empty());
            } else {
                let m = inc.iter().sum::<f64>() / inc.len() as f64;
                prop_assert!((b[0].roc_auc_macro - m).abs() < 1e-12);
            }
        }
    }
}
