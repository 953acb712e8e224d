//! Detection metrics and the silhouette score.
//!
//! Ranking metrics group tied scores: AP takes one precision-recall step per
//! distinct score and AUC gives half credit to tied positive-negative pairs.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{euclidean, Matrix};
use crate::{Error, Result};

/// Scores paired with binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    truth: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, truth: Vec<bool>) -> Result<Self> {
        if scores.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                truth.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("scores must not be NaN"));
        }
        Ok(Self { scores, truth })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn positives(&self) -> usize {
        self.truth.iter().filter(|&&t| t).count()
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let p = self.positives();
        let n = self.len() - p;
        if p == 0 || n == 0 {
            return Err(Error::invalid(format!(
                "ranking metrics need both classes, got {p} positives and {n} negatives"
            )));
        }
        Ok((p, n))
    }

    /// `(score, positives, total)` per distinct score, highest first.
    fn tie_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            let pos = usize::from(self.truth[i]);
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += pos;
                    g.2 += 1;
                }
                _ => groups.push((s, pos, 1)),
            }
        }
        groups
    }
}

/// Step-wise area under the precision-recall curve.
pub fn average_precision(sl: &ScoredLabels) -> Result<f64> {
    let (p, _) = sl.require_both_classes()?;
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (_, pos, total) in sl.tie_groups() {
        tp += pos;
        seen += total;
        if pos > 0 {
            ap += pos as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(ap / p as f64)
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)` with ties counted half.
pub fn roc_auc(sl: &ScoredLabels) -> Result<f64> {
    let (p, n) = sl.require_both_classes()?;
    // Sum of negatives strictly below plus half of those tied, per positive,
    // accumulated from the lowest score upwards.
    let mut groups = sl.tie_groups();
    groups.reverse();
    let (mut below_neg, mut wins) = (0usize, 0.0f64);
    for (_, pos, total) in groups {
        let neg = total - pos;
        wins += pos as f64 * (below_neg as f64 + 0.5 * neg as f64);
        below_neg += neg;
    }
    Ok(wins / (p as f64 * n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholded {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metrics for predictions `score >= threshold`.
pub fn thresholded_metrics(sl: &ScoredLabels, threshold: f64) -> Thresholded {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &t) in sl.scores.iter().zip(&sl.truth) {
        match (s >= threshold, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = f1_from(tp, fp, fn_);
    let f1_neg = f1_from(tn, fn_, fp);
    Thresholded {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1,
        macro_f1: 0.5 * (f1 + f1_neg),
    }
}

/// Best F1 over thresholds at every distinct score (and above all scores).
pub fn max_f1(sl: &ScoredLabels) -> Result<f64> {
    let (p, _) = sl.require_both_classes()?;
    let (mut tp, mut seen, mut best) = (0usize, 0usize, 0.0f64);
    for (_, pos, total) in sl.tie_groups() {
        tp += pos;
        seen += total;
        best = best.max(f1_from(tp, seen - tp, p - tp));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub positives: usize,
    pub ap: f64,
    pub auc: f64,
    pub max_f1: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 9] = [
        "n",
        "positives",
        "ap",
        "auc",
        "max_f1",
        "f1",
        "precision",
        "recall",
        "macro_f1",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.n as f64,
            self.positives as f64,
            self.ap,
            self.auc,
            self.max_f1,
            self.f1,
            self.precision,
            self.recall,
            self.macro_f1,
        ]
    }
}

pub fn evaluate(sl: &ScoredLabels, threshold: f64) -> Result<MetricReport> {
    let t = thresholded_metrics(sl, threshold);
    Ok(MetricReport {
        n: sl.len(),
        positives: sl.positives(),
        ap: average_precision(sl)?,
        auc: roc_auc(sl)?,
        max_f1: max_f1(sl)?,
        f1: t.f1,
        precision: t.precision,
        recall: t.recall,
        macro_f1: t.macro_f1,
    })
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} points", labels.len())));
    }
    if n < 3 {
        return Err(Error::invalid("silhouette needs at least 3 points"));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least 2 non-empty clusters"));
    }
    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += euclidean(points.row(i), points.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(n: usize, seed: u64, levels: u32) -> ScoredLabels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        truth[0] = true;
        truth[1] = false;
        ScoredLabels::new(scores, truth).unwrap()
    }

    fn ap_oracle(sl: &ScoredLabels) -> f64 {
        let mut thresholds: Vec<f64> = sl.scores().to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let p = sl.positives() as f64;
        let (mut prev_recall, mut ap) = (0.0, 0.0);
        for t in thresholds {
            let tp = (0..sl.len()).filter(|&i| sl.scores[i] >= t && sl.truth[i]).count() as f64;
            let pred = (0..sl.len()).filter(|&i| sl.scores[i] >= t).count() as f64;
            let recall = tp / p;
            ap += (recall - prev_recall) * (tp / pred);
            prev_recall = recall;
        }
        ap
    }

    fn auc_oracle(sl: &ScoredLabels) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..sl.len() {
            for j in 0..sl.len() {
                if sl.truth[i] && !sl.truth[j] {
                    pairs += 1.0;
                    if sl.scores[i] > sl.scores[j] {
                        wins += 1.0;
                    } else if sl.scores[i] == sl.scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn max_f1_oracle(sl: &ScoredLabels) -> f64 {
        let mut best = thresholded_metrics(sl, f64::INFINITY).f1;
        for &t in sl.scores() {
            best = best.max(thresholded_metrics(sl, t).f1);
        }
        best
    }

    #[test]
    fn ranking_metrics_match_oracles() {
        for seed in 0..20 {
            for levels in [5, 1000] {
                let sl = random_instance(200, seed, levels);
                assert!((average_precision(&sl).unwrap() - ap_oracle(&sl)).abs() < 1e-12);
                assert!((roc_auc(&sl).unwrap() - auc_oracle(&sl)).abs() < 1e-12);
                assert!((max_f1(&sl).unwrap() - max_f1_oracle(&sl)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_ranking_is_exactly_one() {
        let truth = vec![true, true, false, false, false];
        let sl = ScoredLabels::new(vec![0.9, 0.8, 0.3, 0.2, 0.1], truth.clone()).unwrap();
        assert_eq!(average_precision(&sl).unwrap(), 1.0);
        assert_eq!(roc_auc(&sl).unwrap(), 1.0);
        assert_eq!(max_f1(&sl).unwrap(), 1.0);
        let exact = ScoredLabels::new(truth.iter().map(|&t| f64::from(u8::from(t))).collect(), truth).unwrap();
        assert_eq!(average_precision(&exact).unwrap(), 1.0);
        let t = thresholded_metrics(&exact, 0.5);
        assert_eq!((t.f1, t.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn all_ties_give_half_auc() {
        let sl = ScoredLabels::new(vec![0.4; 6], vec![true, false, true, false, false, false]).unwrap();
        assert_eq!(roc_auc(&sl).unwrap(), 0.5);
        assert!((average_precision(&sl).unwrap() - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_rejected() {
        let sl = ScoredLabels::new(vec![0.1, 0.2], vec![false, false]).unwrap();
        assert!(average_precision(&sl).is_err());
        assert!(roc_auc(&sl).is_err());
        assert!(ScoredLabels::new(vec![0.1], vec![]).is_err());
    }

    #[test]
    fn thresholded_conventions() {
        let sl = ScoredLabels::new(vec![0.1, 0.2, 0.3], vec![true, false, true]).unwrap();
        let t = thresholded_metrics(&sl, 0.5);
        assert_eq!((t.precision, t.recall, t.f1), (0.0, 0.0, 0.0));
        // Negative class: tn = 1, fn = 2, fp = 0 -> P = 1/3, R = 1.
        assert!((t.macro_f1 - 0.25).abs() < 1e-15);

        let sl = ScoredLabels::new(vec![0.9, 0.6, 0.4, 0.7], vec![true, false, true, true]).unwrap();
        let t = thresholded_metrics(&sl, 0.5);
        // tp = 2, fp = 1, fn = 1, tn = 0.
        assert!((t.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_positive_ranked_last() {
        let mut truth = vec![false; 10];
        truth[9] = true;
        let scores = (0..10).map(|i| 1.0 - i as f64 / 10.0).collect();
        let sl = ScoredLabels::new(scores, truth).unwrap();
        // Best threshold includes everything: P = 1/10, R = 1.
        assert!((max_f1(&sl).unwrap() - 2.0 * 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn monotone_transform_and_flip_invariance() {
        let sl = random_instance(200, 99, 50);
        let warped = ScoredLabels::new(
            sl.scores().iter().map(|s| (3.0 * s).exp()).collect(),
            sl.truth().to_vec(),
        )
        .unwrap();
        assert_eq!(average_precision(&sl).unwrap(), average_precision(&warped).unwrap());
        assert_eq!(roc_auc(&sl).unwrap(), roc_auc(&warped).unwrap());
        assert_eq!(max_f1(&sl).unwrap(), max_f1(&warped).unwrap());
        let flipped = ScoredLabels::new(
            sl.scores().iter().map(|s| -s).collect(),
            sl.truth().iter().map(|t| !t).collect(),
        )
        .unwrap();
        assert!((roc_auc(&sl).unwrap() - roc_auc(&flipped).unwrap()).abs() < 1e-15);
    }

    fn silhouette_oracle(points: &Matrix, labels: &[usize]) -> f64 {
        let n = points.rows();
        let mut total = 0.0;
        for i in 0..n {
            let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if same.is_empty() {
                continue;
            }
            let a = same
                .iter()
                .map(|&j| euclidean(points.row(i), points.row(j)))
                .sum::<f64>()
                / same.len() as f64;
            let mut b = f64::INFINITY;
            let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
            others.sort();
            others.dedup();
            for c in others {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                let d = members
                    .iter()
                    .map(|&j| euclidean(points.row(i), points.row(j)))
                    .sum::<f64>()
                    / members.len() as f64;
                b = b.min(d);
            }
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
        total / n as f64
    }

    #[test]
    fn silhouette_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let pts = Matrix::random_normal(30, 3, 1.0, &mut rng);
            let labels: Vec<usize> = (0..30).map(|_| rng.gen_range(0..3)).collect();
            let s = silhouette(&pts, &labels).unwrap();
            assert!((s - silhouette_oracle(&pts, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn silhouette_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for i in 0..40 {
            let c = if i < 20 { 0.0 } else { 100.0 };
            rows.push(vec![c + rng.gen_range(-0.5..0.5), c + rng.gen_range(-0.5..0.5)]);
        }
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        assert!(silhouette(&Matrix::from_rows(&rows), &labels).unwrap() > 0.9);

        let same = Matrix::filled(6, 2, 1.5);
        assert_eq!(silhouette(&same, &[0, 0, 0, 1, 1, 1]).unwrap(), 0.0);
        assert!(silhouette(&same, &[0; 6]).is_err());
        // A singleton cluster contributes zero.
        let pts = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]);
        let s = silhouette(&pts, &[0, 0, 1]).unwrap();
        assert!((s - silhouette_oracle(&pts, &[0, 0, 1])).abs() < 1e-15);
    }
}
