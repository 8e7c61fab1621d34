//! Evaluation metrics and rank correlation.

/// Macro-averaged F1 over classes for multi-label predictions.
///
/// `predicted` and `truth` are `samples × classes` row-major 0/1 flags.
/// Classes that are neither present nor predicted anywhere carry no
/// information and are left out of the average; if every class is left
/// out the predictor is perfect and the score is 1.
pub fn macro_f1(predicted: &[u8], truth: &[u8], classes: usize) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (i, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
        let c = i % classes;
        match (p != 0, t != 0) {
            (true, true) => tp[c] += 1,
            (true, false) => fp[c] += 1,
            (false, true) => fn_[c] += 1,
            (false, false) => {}
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Per-class F1 scores; `None` for classes absent from both inputs.
pub fn per_class_f1(predicted: &[u8], truth: &[u8], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let (mut tp, mut wrong) = (0usize, 0usize);
            for (p, t) in predicted.iter().zip(truth).skip(c).step_by(classes) {
                match (*p != 0, *t != 0) {
                    (true, true) => tp += 1,
                    (true, false) | (false, true) => wrong += 1,
                    _ => {}
                }
            }
            (tp + wrong > 0).then(|| 2.0 * tp as f64 / (2 * tp + wrong) as f64)
        })
        .collect()
}

/// Mean intersection-over-union over classes that occur in either map.
pub fn mean_iou(predicted: &[u8], truth: &[u8], classes: usize) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
///
/// Returns `None` when either input is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}
