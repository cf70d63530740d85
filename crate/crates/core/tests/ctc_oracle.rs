mod common;

use proptest::prelude::*;
use scaforge_core::attack::ctc::{best_path, collapse, ctc_nll, greedy_decode, min_frames};

use common::{path_sums, random_logp};

#[test]
fn matches_exhaustive_enumeration() {
    let mut checked = 0;
    for a in 2..=4 {
        for blank in [0, a - 1] {
            for t in 1..=6 {
                for seed in 0..3 {
                    let logp = random_logp(t, a, (a * 100 + t * 10) as u64 + seed + blank as u64 * 7);
                    let sums = path_sums(&logp, t, a, blank);
                    for (label, p) in &sums {
                        if label.is_empty() || label.len() > 3 {
                            continue;
                        }
                        let (loss, _) = ctc_nll(&logp, a, label, blank).unwrap();
                        assert!((loss + p.ln()).abs() < 1e-6, "a={a} t={t} label={label:?}: {loss} vs {}", -p.ln());
                        checked += 1;
                    }
                    // every admissible label must be reachable by some path
                    let symbols: Vec<usize> = (0..a).filter(|&k| k != blank).collect();
                    for len in 1..=3usize {
                        for code in 0..symbols.len().pow(len as u32) {
                            let label: Vec<usize> =
                                (0..len).map(|i| symbols[code / symbols.len().pow(i as u32) % symbols.len()]).collect();
                            assert_eq!(min_frames(&label) <= t, sums.contains_key(&label), "{label:?} at t={t}");
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 500, "{checked}");
}

#[test]
fn uniform_three_frames() {
    let a = 24;
    let logp = vec![-(a as f64).ln(); 3 * a];
    let sums = path_sums(&logp, 3, a, 23);
    let (loss, _) = ctc_nll(&logp, a, &[4], 23).unwrap();
    assert!((loss + sums[&vec![4]].ln()).abs() < 1e-9);
    assert!((sums[&vec![4]] - 6.0 / (a as f64).powi(3)).abs() < 1e-15);
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..20 {
        let (t, a) = (5, 4);
        let logp = random_logp(t, a, seed);
        let label = [1, 2];
        let (_, g) = ctc_nll(&logp, a, &label, 0).unwrap();
        for i in 0..logp.len() {
            let h = 1e-5;
            let mut up = logp.clone();
            up[i] += h;
            let mut dn = logp.clone();
            dn[i] -= h;
            let n = (ctc_nll(&up, a, &label, 0).unwrap().0 - ctc_nll(&dn, a, &label, 0).unwrap().0) / (2.0 * h);
            let rel = (g[i] - n).abs() / g[i].abs().max(n.abs()).max(1e-3);
            assert!(rel < 1e-4, "seed {seed} i {i}: {} vs {n}", g[i]);
        }
    }
}

/// Second collapse routine: drop blanks only where they separate runs.
fn collapse_reference(path: &[usize], blank: usize) -> Vec<usize> {
    let runs: Vec<usize> = path
        .iter()
        .enumerate()
        .filter(|&(i, &k)| i == 0 || path[i - 1] != k)
        .map(|(_, &k)| k)
        .collect();
    runs.into_iter().filter(|&k| k != blank).collect()
}

proptest! {
    #[test]
    fn greedy_decode_matches_reference(t in 1usize..40, seed in 0u64..10_000) {
        let a = 24;
        let logp = random_logp(t, a, seed);
        let decoded = greedy_decode(&logp, a, 23);
        prop_assert_eq!(&decoded, &collapse_reference(&best_path(&logp, a), 23));
        prop_assert_eq!(decoded, collapse(&best_path(&logp, a), 23));
    }
}
