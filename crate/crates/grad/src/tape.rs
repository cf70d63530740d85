use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{mismatch, GradError, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug, Clone)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Affine(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LogSoftmax(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Gather(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Reshape(usize),
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    ScalarCustom {
        parent: usize,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records eagerly evaluated operations for a single forward/backward pass.
///
/// A tape is not shared between threads; independent tapes can run in
/// parallel.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        let g = self.grads.get(v.index)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.index].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t,
            None => Tensor::zeros(self.shapes.get(v.index).map(Vec::as_slice).unwrap_or(&[])),
        }
    }
}

// C = A(m×k) · B(k×n) + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices cover every element addressed by the stated dimensions
    // and strides; callers pass contiguous buffers of the right length.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.rows() * plen];
    for b in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let r = (b * g.out_h + oh) * g.out_w + ow;
                let row = &mut cols[r * plen..(r + 1) * plen];
                for kh in 0..g.k_h {
                    let ih = (oh * g.stride.0 + kh) as isize - g.pad.0 as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for kw in 0..g.k_w {
                        let iw = (ow * g.stride.1 + kw) as isize - g.pad.1 as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + ih as usize) * g.in_w + iw as usize) * g.in_c;
                        let dst = (kh * g.k_w + kw) * g.in_c;
                        row[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plen = g.patch_len();
    for b in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let r = (b * g.out_h + oh) * g.out_w + ow;
                let row = &dcols[r * plen..(r + 1) * plen];
                for kh in 0..g.k_h {
                    let ih = (oh * g.stride.0 + kh) as isize - g.pad.0 as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for kw in 0..g.k_w {
                        let iw = (ow * g.stride.1 + kw) as isize - g.pad.1 as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + ih as usize) * g.in_w + iw as usize) * g.in_c;
                        let src = (kh * g.k_w + kw) * g.in_c;
                        for c in 0..g.in_c {
                            dx[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant or trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GradError::Detached(v.index));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.val(ia).dims2("matmul")?;
        let (k2, n) = self.val(ib).dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.val(ia).data(),
            (k, 1),
            self.val(ib).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, ia, ib)?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::new(self.val(ia).shape().to_vec(), data)?, ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(ia, ib))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(ia, ib))
    }

    /// Adds a bias vector of length `n` to every row of a `[.., n]` tensor.
    /// This is the only broadcasting operation.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let n = self.val(ib).len();
        let last = self.val(ix).shape().last().copied().unwrap_or(1);
        if self.val(ib).shape().len() != 1 || last != n {
            return Err(mismatch(
                "add_bias",
                format!("{:?} + {:?}", self.val(ix).shape(), self.val(ib).shape()),
            ));
        }
        let bias_data = self.val(ib).data().to_vec();
        let mut t = self.val(ix).clone();
        for row in t.data_mut().chunks_mut(n.max(1)) {
            row.iter_mut().zip(&bias_data).for_each(|(v, b)| *v += b);
        }
        self.push("add_bias", t, Op::AddBias(ix, ib))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let mut t = self.val(ix).clone();
        t.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        self.push("affine", t, Op::Affine(ix, scale))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Var> {
        let ix = self.idx(x)?;
        let mut t = self.val(ix).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(name, t, op(ix))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh)
    }

    fn rowwise(&self, ix: usize) -> usize {
        self.val(ix).shape().last().copied().unwrap_or(1).max(1)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = self.rowwise(ix);
        let mut t = self.val(ix).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", t, Op::LogSoftmax(ix))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = self.rowwise(ix);
        let mut t = self.val(ix).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push("softmax", t, Op::Softmax(ix))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.val(ix).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ix))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        if t.is_empty() {
            return Err(mismatch("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(ix))
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let src = self.val(ix).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(mismatch("gather", format!("index {bad} out of {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        self.push("gather", Tensor::vector(data), Op::Gather(ix, indices.to_vec()))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(mismatch("concat_cols", "no inputs"));
        }
        let rows = self.val(ids[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (r, c) = self.val(i).dims2("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", format!("rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in ids.iter().zip(&widths) {
                data.extend_from_slice(&self.val(i).data()[r * w..(r + 1) * w]);
            }
        }
        self.push("concat_cols", Tensor::matrix(rows, total, data)?, Op::ConcatCols(ids))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(mismatch("concat_rows", "no inputs"));
        }
        let cols = self.val(ids[0]).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &ids {
            let (r, c) = self.val(i).dims2("concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", format!("cols {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.val(i).data());
        }
        self.push("concat_rows", Tensor::matrix(rows, cols, data)?, Op::ConcatRows(ids))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = self.val(ix).dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let src = self.val(ix).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        self.push("slice_cols", Tensor::matrix(rows, end - start, data)?, Op::SliceCols(ix, start))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, cols) = self.val(ix).dims2("slice_rows")?;
        if start > end || end > rows {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {rows}")));
        }
        let data = self.val(ix).data()[start * cols..end * cols].to_vec();
        self.push("slice_rows", Tensor::matrix(end - start, cols, data)?, Op::SliceRows(ix, start))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(ix))
    }

    /// 1-D convolution over a time-major signal.
    ///
    /// `x: [len, c_in]`, `w: [k, c_in, c_out]`, `b: [c_out]` gives
    /// `[(len + 2·padding − k) / stride + 1, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (len, c_in) = self.val(ix).dims2("conv1d")?;
        let ws = self.val(self.idx(w)?).shape().to_vec();
        let &[k, wc, c_out] = ws.as_slice() else {
            return Err(mismatch("conv1d", format!("kernel shape {ws:?}")));
        };
        if wc != c_in {
            return Err(mismatch("conv1d", format!("input channels {c_in} vs kernel {wc}")));
        }
        let out_w = conv_out(len, k, stride, padding)
            .ok_or_else(|| mismatch("conv1d", format!("input length {len} < kernel {k}")))?;
        let geom = ConvGeom {
            batch: 1,
            in_h: 1,
            in_w: len,
            in_c: c_in,
            k_h: 1,
            k_w: k,
            out_h: 1,
            out_w,
            out_c: c_out,
            stride: (1, stride),
            pad: (0, padding),
        };
        self.conv(x, w, b, geom, vec![out_w, c_out])
    }

    /// 2-D convolution on NHWC batches.
    ///
    /// `x: [batch, h, w, c_in]`, `w: [k_h, k_w, c_in, c_out]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xs = self.val(ix).shape().to_vec();
        let &[batch, in_h, in_w, in_c] = xs.as_slice() else {
            return Err(mismatch("conv2d", format!("input shape {xs:?}")));
        };
        let ws = self.val(self.idx(w)?).shape().to_vec();
        let &[k_h, k_w, wc, out_c] = ws.as_slice() else {
            return Err(mismatch("conv2d", format!("kernel shape {ws:?}")));
        };
        if wc != in_c {
            return Err(mismatch("conv2d", format!("input channels {in_c} vs kernel {wc}")));
        }
        let out_h = conv_out(in_h, k_h, stride, padding);
        let out_w = conv_out(in_w, k_w, stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(mismatch("conv2d", format!("input {in_h}x{in_w} smaller than kernel {k_h}x{k_w}")));
        };
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_h,
            out_w,
            out_c,
            stride: (stride, stride),
            pad: (padding, padding),
        };
        self.conv(x, w, b, geom, vec![batch, out_h, out_w, out_c])
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        if self.val(ib).shape() != [geom.out_c] {
            return Err(mismatch("conv", format!("bias {:?} for {} channels", self.val(ib).shape(), geom.out_c)));
        }
        let cols = im2col(self.val(ix).data(), &geom);
        let (rows, plen, oc) = (geom.rows(), geom.patch_len(), geom.out_c);
        let mut out = vec![0.0; rows * oc];
        gemm(rows, plen, oc, &cols, (plen, 1), self.val(iw).data(), (oc, 1), &mut out, 0.0);
        let bias = self.val(ib).data();
        for row in out.chunks_mut(oc.max(1)) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(
            "conv",
            t,
            Op::Conv {
                x: ix,
                w: iw,
                b: ib,
                geom,
                cols,
            },
        )
    }

    /// Max pooling on NHWC batches with a square window and stride equal to the
    /// window; trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xs = self.val(ix).shape().to_vec();
        let &[batch, h, w, c] = xs.as_slice() else {
            return Err(mismatch("max_pool2d", format!("input shape {xs:?}")));
        };
        if k == 0 || h < k || w < k {
            return Err(mismatch("max_pool2d", format!("window {k} on {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.val(ix).data();
        let mut out = vec![f64::NEG_INFINITY; batch * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..batch {
            for y in 0..oh * k {
                for xx in 0..ow * k {
                    let o_base = ((b * oh + y / k) * ow + xx / k) * c;
                    let i_base = ((b * h + y) * w + xx) * c;
                    for ch in 0..c {
                        let v = src[i_base + ch];
                        if v > out[o_base + ch] {
                            out[o_base + ch] = v;
                            argmax[o_base + ch] = i_base + ch;
                        }
                    }
                }
            }
        }
        self.push(
            "max_pool2d",
            Tensor::new(vec![batch, oh, ow, c], out)?,
            Op::MaxPool { x: ix, argmax },
        )
    }

    /// Records a scalar computed outside the tape whose gradient with respect
    /// to `parent` is already known.
    pub fn scalar_custom(&mut self, parent: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        let ip = self.idx(parent)?;
        if local_grad.len() != self.val(ip).len() {
            return Err(mismatch(
                "scalar_custom",
                format!("gradient of length {} for {} elements", local_grad.len(), self.val(ip).len()),
            ));
        }
        if local_grad.iter().any(|v| !v.is_finite()) {
            return Err(GradError::NonFinite { op: "scalar_custom" });
        }
        self.push(
            "scalar_custom",
            Tensor::scalar(value),
            Op::ScalarCustom {
                parent: ip,
                local_grad,
            },
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.val(il).len() != 1 {
            return Err(GradError::NotScalar(self.val(il).shape().to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'a mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()])
        }

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let y = nodes[i].value.data();
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[*a].value.dims2("matmul")?;
                    let n = nodes[*b].value.shape()[1];
                    let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                    // dA = dC · Bᵀ
                    gemm(m, n, k, &g, (n, 1), bd, (1, n), slot(&mut grads, nodes, *a), 1.0);
                    // dB = Aᵀ · dC
                    gemm(k, m, n, ad, (1, k), &g, (n, 1), slot(&mut grads, nodes, *b), 1.0);
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, nodes, *a), &g);
                    add_into(slot(&mut grads, nodes, *b), &g);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, nodes, *a), &g);
                    slot(&mut grads, nodes, *b).iter_mut().zip(&g).for_each(|(d, v)| *d -= v);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    {
                        let da = slot(&mut grads, nodes, *a);
                        for j in 0..g.len() {
                            da[j] += g[j] * bv[j];
                        }
                    }
                    let db = slot(&mut grads, nodes, *b);
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
                Op::AddBias(x, b) => {
                    add_into(slot(&mut grads, nodes, *x), &g);
                    let db = slot(&mut grads, nodes, *b);
                    let n = db.len().max(1);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
                Op::Affine(x, scale) => {
                    slot(&mut grads, nodes, *x).iter_mut().zip(&g).for_each(|(d, v)| *d += scale * v);
                }
                Op::Relu(x) => {
                    let xv = nodes[*x].value.data();
                    let dx = slot(&mut grads, nodes, *x);
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let dx = slot(&mut grads, nodes, *x);
                    for j in 0..g.len() {
                        dx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Tanh(x) => {
                    let dx = slot(&mut grads, nodes, *x);
                    for j in 0..g.len() {
                        dx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
                Op::LogSoftmax(x) => {
                    let n = nodes[i].value.shape().last().copied().unwrap_or(1).max(1);
                    let dx = slot(&mut grads, nodes, *x);
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let n = nodes[i].value.shape().last().copied().unwrap_or(1).max(1);
                    let dx = slot(&mut grads, nodes, *x);
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Sum(x) => {
                    slot(&mut grads, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean(x) => {
                    let n = nodes[*x].value.len() as f64;
                    slot(&mut grads, nodes, *x).iter_mut().for_each(|d| *d += g[0] / n);
                }
                Op::Gather(x, indices) => {
                    let dx = slot(&mut grads, nodes, *x);
                    for (&j, &v) in indices.iter().zip(&g) {
                        dx[j] += v;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = nodes[i].value.shape()[0];
                    let total = nodes[i].value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.shape()[1];
                        let dp = slot(&mut grads, nodes, p);
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        add_into(slot(&mut grads, nodes, p), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (rows, w) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                    let cols = nodes[*x].value.shape()[1];
                    let dx = slot(&mut grads, nodes, *x);
                    for r in 0..rows {
                        add_into(&mut dx[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
                Op::SliceRows(x, start) => {
                    let cols = nodes[i].value.shape()[1];
                    let dx = slot(&mut grads, nodes, *x);
                    add_into(&mut dx[start * cols..start * cols + g.len()], &g);
                }
                Op::Reshape(x) => add_into(slot(&mut grads, nodes, *x), &g),
                Op::Conv { x, w, b, geom, cols } => {
                    let (rows, plen, oc) = (geom.rows(), geom.patch_len(), geom.out_c);
                    {
                        let db = slot(&mut grads, nodes, *b);
                        for row in g.chunks(oc.max(1)) {
                            add_into(db, row);
                        }
                    }
                    // dW = colsᵀ · dOut
                    gemm(plen, rows, oc, cols, (1, plen), &g, (oc, 1), slot(&mut grads, nodes, *w), 1.0);
                    // dCols = dOut · Wᵀ
                    let wd = nodes[*w].value.data();
                    let mut dcols = vec![0.0; rows * plen];
                    gemm(rows, oc, plen, &g, (oc, 1), wd, (1, oc), &mut dcols, 0.0);
                    col2im_add(&dcols, geom, slot(&mut grads, nodes, *x));
                }
                Op::MaxPool { x, argmax } => {
                    let dx = slot(&mut grads, nodes, *x);
                    for (&j, &v) in argmax.iter().zip(&g) {
                        dx[j] += v;
                    }
                }
                Op::ScalarCustom { parent, local_grad } => {
                    slot(&mut grads, nodes, *parent)
                        .iter_mut()
                        .zip(local_grad)
                        .for_each(|(d, l)| *d += g[0] * l);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            shapes: nodes[..=il].iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
