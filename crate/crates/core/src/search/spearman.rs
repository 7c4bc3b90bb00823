use super::{Result, SearchError};

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

fn has_ties(values: &[f64]) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).any(|w| w[0] == w[1])
}

/// Spearman's rank correlation: the Pearson correlation of average ranks.
/// Without ties this equals `1 − 6 Σd² / (n(n² − 1))`, which is evaluated
/// in integers and rounded once.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SearchError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(SearchError::UndefinedCorrelation);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    if !has_ties(a) && !has_ties(b) {
        let n = a.len() as i128;
        let d2: i128 = ra.iter().zip(&rb).map(|(x, y)| (*x as i128 - *y as i128).pow(2)).sum();
        let den = n * (n * n - 1);
        return Ok((den - 6 * d2) as f64 / den as f64);
    }
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(SearchError::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}
