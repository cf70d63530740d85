//! Gated recurrent units.
//!
//! Gate layout along the `3·hidden` axis is `[reset | update | candidate]`;
//! the state update is `h' = (1 − z)·h + z·ñ`.

use rand::Rng;

use crate::error::{mismatch, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trainable weights of one GRU direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// `[input, 3·hidden]`
    pub w_ih: Tensor,
    /// `[hidden, 3·hidden]`
    pub w_hh: Tensor,
    /// `[3·hidden]`
    pub b_ih: Tensor,
    /// `[3·hidden]`
    pub b_hh: Tensor,
}

impl GruParams {
    /// Uniform init in `±1/√hidden`.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut u = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        Self {
            w_ih: Tensor::new(vec![input, 3 * hidden], u(input * 3 * hidden)).expect("w_ih"),
            w_hh: Tensor::new(vec![hidden, 3 * hidden], u(hidden * 3 * hidden)).expect("w_hh"),
            b_ih: Tensor::vector(u(3 * hidden)),
            b_hh: Tensor::vector(u(3 * hidden)),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[input, 3 * hidden]),
            w_hh: Tensor::zeros(&[hidden, 3 * hidden]),
            b_ih: Tensor::zeros(&[3 * hidden]),
            b_hh: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[0]
    }

    /// Places the weights on `tape` as leaves.
    pub fn record(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            w_ih: tape.leaf(self.w_ih.clone()),
            w_hh: tape.leaf(self.w_hh.clone()),
            b_ih: tape.leaf(self.b_ih.clone()),
            b_hh: tape.leaf(self.b_hh.clone()),
            hidden: self.hidden(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
}

/// GRU weights recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub hidden: usize,
}

impl GruVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

// One recurrence given the precomputed input projection `x·W_ih + b_ih`.
fn step(tape: &mut Tape, xproj: Var, h: Var, p: &GruVars) -> Result<Var> {
    let hd = p.hidden;
    let hw = tape.matmul(h, p.w_hh)?;
    let hp = tape.add_bias(hw, p.b_hh)?;
    let x_rz = tape.slice_cols(xproj, 0, 2 * hd)?;
    let h_rz = tape.slice_cols(hp, 0, 2 * hd)?;
    let pre = tape.add(x_rz, h_rz)?;
    let rz = tape.sigmoid(pre)?;
    let r = tape.slice_cols(rz, 0, hd)?;
    let z = tape.slice_cols(rz, hd, 2 * hd)?;
    let x_n = tape.slice_cols(xproj, 2 * hd, 3 * hd)?;
    let h_n = tape.slice_cols(hp, 2 * hd, 3 * hd)?;
    let gated = tape.mul(r, h_n)?;
    let n_pre = tape.add(x_n, gated)?;
    let n = tape.tanh(n_pre)?;
    let diff = tape.sub(n, h)?;
    let upd = tape.mul(z, diff)?;
    tape.add(h, upd)
}

/// A single GRU step. `x: [1, input]`, `h: [1, hidden]`.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let (xr, xc) = tape.value(x).dims2("gru_cell")?;
    let (hr, hc) = tape.value(h).dims2("gru_cell")?;
    let wi = tape.value(p.w_ih).shape().to_vec();
    if xr != hr || hc != p.hidden || wi[0] != xc {
        return Err(mismatch(
            "gru_cell",
            format!("x [{xr},{xc}], h [{hr},{hc}], w_ih {wi:?}, hidden {}", p.hidden),
        ));
    }
    let xw = tape.matmul(x, p.w_ih)?;
    let xproj = tape.add_bias(xw, p.b_ih)?;
    step(tape, xproj, h, p)
}

fn run_direction(tape: &mut Tape, xproj: Var, steps: usize, p: &GruVars, reverse: bool) -> Result<Vec<Var>> {
    let mut h = tape.leaf(Tensor::zeros(&[1, p.hidden]));
    let mut out = vec![h; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let row = tape.slice_rows(xproj, t, t + 1)?;
        h = step(tape, row, h, p)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional GRU over `seq: [steps, input]`, zero initial states.
///
/// Returns `[steps, 2·hidden]`: the forward state at each step followed by
/// the backward state at the same step.
pub fn bigru(tape: &mut Tape, seq: Var, fwd: &GruVars, bwd: &GruVars) -> Result<Var> {
    let (steps, input) = tape.value(seq).dims2("bigru")?;
    for p in [fwd, bwd] {
        if tape.value(p.w_ih).shape()[0] != input {
            return Err(mismatch(
                "bigru",
                format!("input width {input} vs w_ih {:?}", tape.value(p.w_ih).shape()),
            ));
        }
    }
    if steps == 0 {
        return Err(mismatch("bigru", "empty sequence"));
    }
    let xf = tape.matmul(seq, fwd.w_ih)?;
    let xf = tape.add_bias(xf, fwd.b_ih)?;
    let xb = tape.matmul(seq, bwd.w_ih)?;
    let xb = tape.add_bias(xb, bwd.b_ih)?;
    let hf = run_direction(tape, xf, steps, fwd, false)?;
    let hb = run_direction(tape, xb, steps, bwd, true)?;
    let f = tape.concat_rows(&hf)?;
    let b = tape.concat_rows(&hb)?;
    tape.concat_cols(&[f, b])
}
