use crate::error::{CoreError, Result};

/// Unit-cost edit distance, two rolling rows.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Layer error rate: edit distance normalized by the truth length.
pub fn ler<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if truth.is_empty() {
        return Err(CoreError::EmptyTruth);
    }
    Ok(levenshtein(pred, truth) as f64 / truth.len() as f64)
}
