//! Brute-force reference implementations.

/// Direct precision-at-rank sum; ties ranked by original index.
pub fn ap(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| {
        (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
            + 1
    };
    let pos: Vec<usize> = (0..n).filter(|&i| positive[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &pos {
        let r = rank(i);
        let hits = pos.iter().filter(|&&j| rank(j) <= r).count();
        total += hits as f64 / r as f64;
    }
    Some(total / pos.len() as f64)
}

/// Mean of `ap` over the classes (columns) that have a positive.
pub fn map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
    let c = scores.first()?.len();
    let aps: Vec<f64> = (0..c)
        .filter_map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = labels.iter().map(|r| r[k]).collect();
            ap(&s, &y)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}
