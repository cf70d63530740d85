//! Oracles shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaforge_core::attack::{AttackConfig, AttackModel, ALPHABET, BLANK};
use scaforge_core::noise::{EnablePattern, NoiseBench, MAX_LEVEL};
use scaforge_core::rng::seeded;

pub const H: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_logp(t: usize, a: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed, 3);
    let mut out = Vec::with_capacity(t * a);
    for _ in 0..t {
        let z: Vec<f64> = (0..a).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(z.iter().map(|v| v - lse));
    }
    out
}

/// Probability mass of every collapsed label, by enumerating all a^t paths.
pub fn path_sums(logp: &[f64], t: usize, a: usize, blank: usize) -> HashMap<Vec<usize>, f64> {
    let mut sums = HashMap::new();
    let mut path = vec![0usize; t];
    loop {
        let p: f64 = path.iter().enumerate().map(|(i, &k)| logp[i * a + k]).sum::<f64>().exp();
        let mut label = Vec::new();
        for (i, &k) in path.iter().enumerate() {
            if k != blank && (i == 0 || path[i - 1] != k) {
                label.push(k);
            }
        }
        *sums.entry(label).or_insert(0.0) += p;
        let mut i = 0;
        loop {
            if i == t {
                return sums;
            }
            path[i] += 1;
            if path[i] < a {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Full-table recursion, independent of the rolling-row implementation.
pub fn dp_oracle(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

/// Levels ordered by measured readout, highest first, by insertion sort
/// over a full sweep of the bench.
pub fn sort_oracle(bench: &mut NoiseBench) -> Vec<u16> {
    let measured: Vec<f64> = (0..=MAX_LEVEL).map(|l| bench.measure_pattern(EnablePattern::new(l).unwrap(), &[])).collect();
    let mut order: Vec<u16> = (0..=MAX_LEVEL).collect();
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && measured[usize::from(order[j - 1])] < measured[usize::from(order[j])] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    order
}

fn small_config(n_conv: usize) -> AttackConfig {
    AttackConfig {
        n_conv_layers: n_conv,
        conv_channels: 3,
        kernel: 3,
        strides: vec![1; n_conv],
        rnn_hidden: 3,
        rnn_layers: 1,
        alphabet_size: ALPHABET,
    }
}

/// The whole attack model (normalization, convolutions, BiGRU, head, CTC)
/// against central finite differences, for every parameter and every input
/// readout. Returns the worst relative error.
pub fn attack_model_gradcheck(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = AttackModel::new(small_config(1 + (seed % 2) as usize), seed).unwrap();
    m.set_normalization(25.0, 8.0).unwrap();
    let x: Vec<f64> = (0..9).map(|_| rng.random_range(10.0..40.0)).collect();
    let y: Vec<usize> = (0..2).map(|_| rng.random_range(0..BLANK)).collect();
    let mut worst = 0.0f64;
    let (_, grads) = m.param_gradient(&x, &y).unwrap();
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let bump = |d: f64| {
                let mut p = m.clone();
                p.params_mut()[k].data_mut()[j] += d;
                p.loss(&x, &y).unwrap()
            };
            worst = worst.max(rel_err(g.data()[j], (bump(H) - bump(-H)) / (2.0 * H)));
        }
    }
    let (_, gx) = m.input_gradient(&x, &y).unwrap();
    for j in 0..x.len() {
        let bump = |d: f64| {
            let mut xs = x.clone();
            xs[j] += d;
            m.loss(&xs, &y).unwrap()
        };
        worst = worst.max(rel_err(gx[j], (bump(H) - bump(-H)) / (2.0 * H)));
    }
    worst
}
