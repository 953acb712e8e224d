use coordet::event_data::Labels;
use coordet::linalg::{euclidean, Matrix};
use coordet::metrics_eval::{average_precision, max_f1, roc_auc, silhouette, ScoredLabels};
use coordet::pipeline::scored_labels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> ScoredLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = [3u32, 20, 1_000_000][seed as usize % 3];
    let scores = (0..200)
        .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
        .collect();
    let mut truth: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.25)).collect();
    truth[0] = true;
    truth[1] = false;
    ScoredLabels::new(scores, truth).unwrap()
}

/// Predicted-positive set `{score >= t}` for each distinct `t`, as `(tp, predicted)`.
fn threshold_counts(sl: &ScoredLabels) -> Vec<(f64, usize, usize)> {
    let mut ts: Vec<f64> = sl.scores().to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let mut tp = 0;
            let mut pred = 0;
            for (&s, &y) in sl.scores().iter().zip(sl.truth()) {
                if s >= t {
                    pred += 1;
                    tp += usize::from(y);
                }
            }
            (t, tp, pred)
        })
        .collect()
}

fn ap_oracle(sl: &ScoredLabels) -> f64 {
    let p = sl.positives() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, tp, pred) in threshold_counts(sl) {
        let recall = tp as f64 / p;
        ap += (recall - prev_recall) * (tp as f64 / pred as f64);
        prev_recall = recall;
    }
    ap
}

fn auc_oracle(sl: &ScoredLabels) -> f64 {
    let (s, y) = (sl.scores(), sl.truth());
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn max_f1_oracle(sl: &ScoredLabels) -> f64 {
    let p = sl.positives();
    threshold_counts(sl)
        .into_iter()
        .map(|(_, tp, pred)| {
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (pred + p) as f64
            }
        })
        .fold(0.0, f64::max)
}

fn silhouette_oracle(x: &Matrix, labels: &[usize]) -> f64 {
    let n = x.rows();
    let k = labels.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let members: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            if members.is_empty() {
                None
            } else {
                Some(members.iter().map(|&j| euclidean(x.row(i), x.row(j))).sum::<f64>() / members.len() as f64)
            }
        };
        let Some(a) = mean_to(labels[i]) else { continue };
        let b = (0..k)
            .filter(|&c| c != labels[i])
            .filter_map(mean_to)
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

#[test]
fn ranking_metrics_match_pairwise_oracles() {
    for seed in 0..30 {
        let sl = instance(seed);
        assert!((average_precision(&sl).unwrap() - ap_oracle(&sl)).abs() < 1e-12);
        assert!((roc_auc(&sl).unwrap() - auc_oracle(&sl)).abs() < 1e-12);
        assert!((max_f1(&sl).unwrap() - max_f1_oracle(&sl)).abs() < 1e-12);
    }
}

#[test]
fn silhouette_matches_direct_definition() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::random_normal(200, 3, 1.0, &mut rng);
        let k = 2 + seed as usize % 3;
        let labels: Vec<usize> = (0..200).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        assert!((silhouette(&x, &labels).unwrap() - silhouette_oracle(&x, &labels)).abs() < 1e-12);
    }
}

#[test]
fn perfect_ranking_scores_one() {
    let scores: Vec<f64> = (0..200).map(|i| i as f64).collect();
    let truth: Vec<bool> = (0..200).map(|i| i >= 150).collect();
    let sl = ScoredLabels::new(scores, truth).unwrap();
    assert_eq!(average_precision(&sl).unwrap(), 1.0);
    assert_eq!(roc_auc(&sl).unwrap(), 1.0);
    assert_eq!(max_f1(&sl).unwrap(), 1.0);
}

#[test]
fn excluded_accounts_are_left_out() {
    let truth: Labels = (0..6).map(|u| (u, usize::from(u >= 4))).collect();
    let revealed: Labels = [(0, 0), (5, 1)].into_iter().collect();
    let scores = [0.9, 0.1, 0.2, 0.3, 0.8, 0.0];
    let sl = scored_labels(&scores, &truth, Some(&revealed)).unwrap();
    assert_eq!(sl.scores(), &[0.1, 0.2, 0.3, 0.8]);
    assert_eq!(sl.truth(), &[false, false, false, true]);
    assert_eq!(average_precision(&sl).unwrap(), 1.0);
}
