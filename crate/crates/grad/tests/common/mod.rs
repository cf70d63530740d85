//! Finite-difference cases shared by the unit tests and the acceptance run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaforge_grad::{bigru, gru_cell, GruParams, Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output element contributes.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.leaf(rand_tensor(&mut rng, &shape));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares analytic and numeric gradients for every input.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let l = f(&mut t, &vs).unwrap();
        t.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

pub fn matmul_and_bias(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let ins = [rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4, 2]), rand_tensor(rng, &[2])];
    check(&ins, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let b = t.add_bias(m, v[2])?;
        weighted_sum(t, b, s)
    })
}

pub fn elementwise(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let ins = [rand_tensor(rng, &[2, 5]), rand_tensor(rng, &[2, 5])];
    check(&ins, |t, v| {
        let a = t.add(v[0], v[1])?;
        let m = t.mul(a, v[0])?;
        let d = t.sub(m, v[1])?;
        let sg = t.sigmoid(d)?;
        let th = t.tanh(v[1])?;
        let r = t.relu(v[0])?;
        let x = t.add(sg, th)?;
        let x = t.add(x, r)?;
        let x = t.affine(x, -1.7, 0.3)?;
        weighted_sum(t, x, s)
    })
}

pub fn softmax_family(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let ins = [rand_tensor(rng, &[3, 6])];
    check(&ins, |t, v| {
        let ls = t.log_softmax(v[0])?;
        let sm = t.softmax(v[0])?;
        let x = t.add(ls, sm)?;
        weighted_sum(t, x, s)
    })
}

pub fn reductions_gather_reshape(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let ins = [rand_tensor(rng, &[4, 3])];
    check(&ins, |t, v| {
        let r = t.reshape(v[0], &[12])?;
        let g = t.gather(r, &[0, 5, 5, 11, 7])?;
        let a = weighted_sum(t, g, s)?;
        let m = t.mean(v[0])?;
        let sum = t.sum(v[0])?;
        let x = t.add(a, m)?;
        let x2 = t.mul(x, x)?;
        t.add(x2, sum)
    })
}

pub fn slicing_and_concat(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let ins = [rand_tensor(rng, &[4, 5]), rand_tensor(rng, &[4, 2])];
    check(&ins, |t, v| {
        let c = t.slice_cols(v[0], 1, 4)?;
        let r = t.slice_rows(v[0], 2, 4)?;
        let cc = t.concat_cols(&[c, v[1], c])?;
        let rr = t.concat_rows(&[r, v[0]])?;
        let a = weighted_sum(t, cc, s)?;
        let b = weighted_sum(t, rr, s + 1)?;
        let p = t.mul(a, b)?;
        t.add(p, a)
    })
}

pub fn conv1d_strided_padded(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let ins = [rand_tensor(rng, &[11, 2]), rand_tensor(rng, &[3, 2, 4]), rand_tensor(rng, &[4])];
    check(&ins, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2], 2, 1)?;
        let y = t.tanh(y)?;
        weighted_sum(t, y, s)
    })
}

pub fn conv2d_and_pool(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let ins = [rand_tensor(rng, &[2, 6, 6, 2]), rand_tensor(rng, &[3, 3, 2, 3]), rand_tensor(rng, &[3])];
    check(&ins, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        let p = t.max_pool2d(y, 2)?;
        weighted_sum(t, p, s)
    })
}

/// Random 3-step sequence, hidden 4.
pub fn gru_cell_and_bigru(rng: &mut ChaCha8Rng, s: u64) -> f64 {
    let f = GruParams::init(2, 4, rng);
    let b = GruParams::init(2, 4, rng);
    let mut ins: Vec<Tensor> = vec![rand_tensor(rng, &[3, 2])];
    ins.extend(f.tensors().into_iter().cloned());
    ins.extend(b.tensors().into_iter().cloned());
    check(&ins, |t, v| {
        let fv = scaforge_grad::GruVars {
            w_ih: v[1],
            w_hh: v[2],
            b_ih: v[3],
            b_hh: v[4],
            hidden: 4,
        };
        let bv = scaforge_grad::GruVars {
            w_ih: v[5],
            w_hh: v[6],
            b_ih: v[7],
            b_hh: v[8],
            hidden: 4,
        };
        let y = bigru(t, v[0], &fv, &bv)?;
        let x0 = t.slice_rows(v[0], 0, 1)?;
        let h = t.slice_cols(y, 0, 4)?;
        let h = t.slice_rows(h, 2, 3)?;
        let c = gru_cell(t, x0, h, &fv)?;
        let a = weighted_sum(t, y, s)?;
        let b = weighted_sum(t, c, s + 7)?;
        t.add(a, b)
    })
}

/// conv1d → relu → matmul → log_softmax → NLL
pub fn composite_classifier_nll(rng: &mut ChaCha8Rng, _: u64) -> f64 {
    let ins = [
        rand_tensor(rng, &[8, 1]),
        rand_tensor(rng, &[3, 1, 4]),
        rand_tensor(rng, &[4]),
        rand_tensor(rng, &[4, 5]),
    ];
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
    check(&ins, |t, v| {
        let c = t.conv1d(v[0], v[1], v[2], 1, 0)?;
        let r = t.relu(c)?;
        let z = t.matmul(r, v[3])?;
        let lp = t.log_softmax(z)?;
        let flat = t.reshape(lp, &[30])?;
        let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * 5 + l).collect();
        let picked = t.gather(flat, &idx)?;
        let m = t.mean(picked)?;
        t.affine(m, -1.0, 0.0)
    })
}

/// Every primitive case, each worth one sweep over seeds.
pub const CASES: [(&str, fn(&mut ChaCha8Rng, u64) -> f64); 9] = [
    ("matmul", matmul_and_bias),
    ("elementwise", elementwise),
    ("softmax", softmax_family),
    ("reductions", reductions_gather_reshape),
    ("slice/concat", slicing_and_concat),
    ("conv1d", conv1d_strided_padded),
    ("conv2d", conv2d_and_pool),
    ("bigru", gru_cell_and_bigru),
    ("composite", composite_classifier_nll),
];

/// Worst relative error of `case` over seeds `0..seeds`.
pub fn worst_over_seeds(case: fn(&mut ChaCha8Rng, u64) -> f64, seeds: u64) -> f64 {
    (0..seeds).map(|s| case(&mut ChaCha8Rng::seed_from_u64(s), s)).fold(0.0, f64::max)
}
