//! CTC loss (log-space forward/backward) and greedy decoding.

use scaforge_grad::{Tape, Var};

use crate::error::{CoreError, Result};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Minimum frame count that can emit `label`: one per symbol plus a blank
/// between each repeated pair.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `label` under per-frame log-probabilities
/// `logp` (`frames × alphabet`, row-major), plus its gradient with respect to
/// every entry of `logp`.
pub fn ctc_nll(logp: &[f64], alphabet: usize, label: &[usize], blank: usize) -> Result<(f64, Vec<f64>)> {
    if alphabet == 0 || logp.len() % alphabet != 0 {
        return Err(CoreError::InvalidParam(format!("{} log-probs for alphabet {alphabet}", logp.len())));
    }
    let t_len = logp.len() / alphabet;
    if let Some(&bad) = label.iter().find(|&&s| s >= alphabet || s == blank) {
        return Err(CoreError::InvalidParam(format!("label symbol {bad}")));
    }
    if t_len == 0 || min_frames(label) > t_len {
        return Err(CoreError::LabelTooLong { label: label.len(), frames: t_len });
    }
    let s_len = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { blank } else { label[s / 2] }).collect();
    let lp = |t: usize, k: usize| logp[t * alphabet + k];
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if skip(s) { prev[s - 2] } else { ninf };
            let sum = lse3(a, b, c);
            alpha[t * s_len + s] = if sum == ninf { ninf } else { sum + lp(t, ext[s]) };
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { ninf };
            let c = if s + 2 < s_len && skip(s + 2) { next[s + 2] } else { ninf };
            let sum = lse3(a, b, c);
            beta[t * s_len + s] = if sum == ninf { ninf } else { sum + lp(t, ext[s]) };
        }
    }
    let end = &alpha[last..];
    let log_p = if s_len > 1 { lse2(end[s_len - 1], end[s_len - 2]) } else { end[0] };
    if !log_p.is_finite() {
        return Err(CoreError::LabelTooLong { label: label.len(), frames: t_len });
    }
    let mut grad = vec![0.0; logp.len()];
    let mut acc = vec![ninf; alphabet];
    for t in 0..t_len {
        acc.iter_mut().for_each(|a| *a = ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            acc[ext[s]] = lse2(acc[ext[s]], v);
        }
        for k in 0..alphabet {
            if acc[k] != ninf {
                grad[t * alphabet + k] = -(acc[k] - log_p - lp(t, k)).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Records the CTC loss of `logp: [frames, alphabet]` on the tape.
pub fn ctc_loss(tape: &mut Tape, logp: Var, label: &[usize], blank: usize) -> Result<Var> {
    let v = tape.value(logp);
    let alphabet = *v.shape().last().unwrap_or(&0);
    let (loss, grad) = ctc_nll(v.data(), alphabet, label, blank)?;
    Ok(tape.scalar_custom(logp, loss, grad)?)
}

/// Per-frame argmax path.
pub fn best_path(logp: &[f64], alphabet: usize) -> Vec<usize> {
    logp.chunks(alphabet)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Collapses repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

pub fn greedy_decode(logp: &[f64], alphabet: usize, blank: usize) -> Vec<usize> {
    collapse(&best_path(logp, alphabet), blank)
}
