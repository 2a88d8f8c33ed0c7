//! Ranking and thresholded classification metrics.

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// given their average rank. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based; a tie block shares the mean of its ranks
        let rank = (start + end + 1) as f64 / 2.0;
        let pos_in_block = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += rank * pos_in_block as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of predictions on the right side of 0.5 (`>= 0.5` means
/// correct). `None` on empty input.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    if scores.is_empty() {
        return None;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| (s >= 0.5) == l)
        .count();
    Some(hits as f64 / scores.len() as f64)
}

/// Mean binary cross-entropy with probabilities clipped to
/// `[clip, 1 - clip]`. `None` on empty input.
pub fn log_loss(scores: &[f64], labels: &[bool], clip: f64) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            let p = s.clamp(clip, 1.0 - clip);
            if l {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Some(total / scores.len() as f64)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}
