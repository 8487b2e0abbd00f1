use std::cmp::Ordering;

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "metric",
            left: format!("{} scores", scores.len()),
            right: format!("{} labels", labels.len()),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score"));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve: `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`,
/// computed from mid-ranks.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC-ROC needs both classes"));
    }
    let mut idx = descending(scores);
    idx.reverse();
    // Sum of ascending mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let block_pos = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid_rank * block_pos as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over descending distinct
/// score thresholds, each tie block treated as one threshold.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive"));
    }
    let idx = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}


#[cfg(test)]
mod tests {
    use super::oracles::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auc_roc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_positive_positions() {
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut first = vec![false; n];
        first[0] = true;
        assert_eq!(auc_pr(&scores, &first).unwrap(), 1.0);
        let mut last = vec![false; n];
        last[n - 1] = true;
        assert!((auc_pr(&scores, &last).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(auc_roc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc_pr(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_instances_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let levels = rng.random_range(2..=10);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let roc = auc_roc(&scores, &labels).unwrap();
            let pr = auc_pr(&scores, &labels).unwrap();
            assert!((roc - auc_roc_pairs(&scores, &labels)).abs() < 1e-9);
            assert!((pr - auc_pr_thresholds(&scores, &labels)).abs() < 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn invariant_under_monotone_maps(
            raw in proptest::collection::vec((-3.0f64..3.0, proptest::bool::ANY), 4..40),
            a in 0.1f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| (s * 4.0).round() / 4.0).collect();
            let mut labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            labels[0] = true;
            labels[1] = false;
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let roc = auc_roc(&scores, &labels).unwrap();
            let pr = auc_pr(&scores, &labels).unwrap();
            for mapped in [&exp, &affine] {
                proptest::prop_assert!((auc_roc(mapped, &labels).unwrap() - roc).abs() < 1e-12);
                proptest::prop_assert!((auc_pr(mapped, &labels).unwrap() - pr).abs() < 1e-12);
            }
            proptest::prop_assert!((0.0..=1.0).contains(&roc) && (0.0..=1.0).contains(&pr));
        }
    }
}
