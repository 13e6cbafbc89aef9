//! Minimal differentiable array engine.
//!
//! Forward operations record themselves onto a [`Tape`]; the tape is the
//! computation record, replayed once in reverse by [`Tape::backward`] to
//! accumulate gradients into every `requires_grad` leaf. Data is always
//! 64-bit, row-major and contiguous; a tape and its tensors belong to one
//! thread (parallelism happens across tapes, never inside one).
//!
//! Binary operations broadcast only by trailing-axis expansion: the right
//! operand's shape must equal a suffix of the left operand's shape (a
//! scalar, shape `[]`, is a suffix of everything).

mod kernels;

pub mod fd;

pub use fd::{check_leaf_gradients, finite_difference_check};

use crate::error::{Error, Result};
use std::cell::RefCell;

pub(crate) use kernels::{bilinear_taps, col2im_acc, im2col, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        input: usize,
        kernels: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool2 {
        input: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        input: usize,
    },
    AddScalar {
        input: usize,
    },
    MulScalar {
        input: usize,
        c: f64,
    },
    PowScalar {
        input: usize,
        p: f64,
    },
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
    Reduce {
        kind: ReduceKind,
        input: usize,
        axis: Option<usize>,
    },
    TimeShift {
        input: usize,
        offset: i64,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
        inputs: Vec<usize>,
    },
    IndexSelect {
        input: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    RoiAlign {
        map: usize,
        rect: [f64; 4],
        out: (usize, usize),
        samples: (usize, usize),
    },
    Reshape {
        input: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Computation record: every executed primitive op in execution order.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to one value on a tape. Copyable; the data lives in the tape.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::config(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    if numel(shape) != len {
        return Err(Error::config(format!(
            "shape {shape:?} does not match data length {len}"
        )));
    }
    Ok(())
}

/// Right operand shape must be a suffix of the left operand shape.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Tensor { tape: self, id }
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Differentiable leaf: receives a gradient after `backward`.
    pub fn leaf_grad(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_> {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], false, Op::Leaf)
    }

    /// Reverse pass from a scalar output. Resets all previously accumulated
    /// gradients first, so repeated calls on one record are bit-identical.
    pub fn backward(&self, output: Tensor<'_>) -> Result<()> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Contract(
                "output tensor belongs to a different record".into(),
            ));
        }
        let inner = &mut *self.inner.borrow_mut();
        let TapeInner { nodes, grads } = inner;
        let out_shape = &nodes[output.id].shape;
        if numel(out_shape) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {out_shape:?}"
            )));
        }
        for g in grads.iter_mut() {
            *g = None;
        }
        if !nodes[output.id].requires_grad {
            return Ok(());
        }
        grads[output.id] = Some(vec![1.0]);
        for i in (0..=output.id).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(nodes, grads, i, &g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id].data.len()]);
    }
    f(slot.as_mut().unwrap());
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    // The op is cheap to clone (indices and small attrs only).
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b, trans_b } => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[id].shape[1];
            let a_data = &nodes[a].data;
            let b_data = &nodes[b].data;
            if !trans_b {
                // dA += g · Bᵀ ; dB += Aᵀ · g
                accumulate(grads, nodes, a, |da| {
                    matmul_nt_acc(da, g, b_data, m, n, k);
                });
                accumulate(grads, nodes, b, |db| {
                    matmul_tn_acc(db, a_data, g, k, m, n);
                });
            } else {
                // out = A · Bᵀ with B stored [n,k]: dA += g · B ; dB += gᵀ · A
                accumulate(grads, nodes, a, |da| {
                    matmul_nn_acc(da, g, b_data, m, n, k);
                });
                accumulate(grads, nodes, b, |db| {
                    matmul_tn_acc(db, g, a_data, n, m, k);
                });
            }
        }
        Op::Conv2d {
            input,
            kernels,
            stride,
            pad,
        } => {
            let xs = &nodes[input].shape;
            let ks = &nodes[kernels].shape;
            let (nb, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (co, kh, kw) = (ks[0], ks[2], ks[3]);
            let (ho, wo) = (nodes[id].shape[2], nodes[id].shape[3]);
            let ckk = ci * kh * kw;
            let howo = ho * wo;
            let x = &nodes[input].data;
            let kmat = &nodes[kernels].data;
            let mut cols = vec![0.0; ckk * howo];
            let needs_dx = nodes[input].requires_grad;
            let needs_dk = nodes[kernels].requires_grad;
            let mut dcols = if needs_dx {
                vec![0.0; ckk * howo]
            } else {
                Vec::new()
            };
            for s in 0..nb {
                let gout = &g[s * co * howo..(s + 1) * co * howo];
                if needs_dk {
                    im2col(
                        &x[s * ci * h * w..(s + 1) * ci * h * w],
                        ci,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                        &mut cols,
                    );
                    accumulate(grads, nodes, kernels, |dk| {
                        matmul_nt_acc(dk, gout, &cols, co, howo, ckk);
                    });
                }
                if needs_dx {
                    dcols.fill(0.0);
                    matmul_tn_acc(&mut dcols, kmat, gout, ckk, co, howo);
                    accumulate(grads, nodes, input, |dx| {
                        col2im_acc(
                            &dcols,
                            ci,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                            ho,
                            wo,
                            &mut dx[s * ci * h * w..(s + 1) * ci * h * w],
                        );
                    });
                }
            }
        }
        Op::AvgPool2 { input } => {
            let os = &nodes[id].shape;
            let (nc, ho, wo) = (os[0] * os[1], os[2], os[3]);
            let w = nodes[input].shape[3];
            accumulate(grads, nodes, input, |dx| {
                for p in 0..nc {
                    let gplane = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dplane = &mut dx[p * 4 * ho * wo..(p + 1) * 4 * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let q = gplane[oy * wo + ox] * 0.25;
                            let base = 2 * oy * w + 2 * ox;
                            dplane[base] += q;
                            dplane[base + 1] += q;
                            dplane[base + w] += q;
                            dplane[base + w + 1] += q;
                        }
                    }
                }
            });
        }
        Op::Softmax { input, axis } => {
            let y = &nodes[id].data;
            let shape = &nodes[id].shape;
            let ax_len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            accumulate(grads, nodes, input, |dx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * ax_len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..ax_len {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..ax_len {
                            let idx = base + j * inner;
                            dx[idx] += (g[idx] - dot) * y[idx];
                        }
                    }
                }
            });
        }
        Op::Binary { kind, a, b } => {
            let rlen = nodes[b].data.len();
            match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    let sign = if kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                    accumulate(grads, nodes, a, |da| {
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                    accumulate(grads, nodes, b, |db| {
                        for (chunk_idx, gi) in g.iter().enumerate() {
                            db[chunk_idx % rlen] += sign * gi;
                        }
                    });
                }
                BinaryKind::Mul => {
                    let a_data = &nodes[a].data;
                    let b_data = &nodes[b].data;
                    accumulate(grads, nodes, a, |da| {
                        for (i, gi) in g.iter().enumerate() {
                            da[i] += gi * b_data[i % rlen];
                        }
                    });
                    accumulate(grads, nodes, b, |db| {
                        for (i, gi) in g.iter().enumerate() {
                            db[i % rlen] += gi * a_data[i];
                        }
                    });
                }
            }
        }
        Op::Unary { kind, input } => {
            let y = &nodes[id].data;
            let x = &nodes[input].data;
            accumulate(grads, nodes, input, |dx| match kind {
                UnaryKind::Sigmoid => {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                UnaryKind::Tanh => {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                UnaryKind::Relu => {
                    // Subgradient 0 at the kink.
                    for i in 0..dx.len() {
                        if x[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
                UnaryKind::Log => {
                    for i in 0..dx.len() {
                        dx[i] += g[i] / x[i];
                    }
                }
                UnaryKind::Neg => {
                    for i in 0..dx.len() {
                        dx[i] -= g[i];
                    }
                }
            });
        }
        Op::AddScalar { input } => {
            accumulate(grads, nodes, input, |dx| {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        }
        Op::MulScalar { input, c } => {
            accumulate(grads, nodes, input, |dx| {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += c * gi;
                }
            });
        }
        Op::PowScalar { input, p } => {
            let x = &nodes[input].data;
            accumulate(grads, nodes, input, |dx| {
                if p == 0.0 {
                    return;
                }
                for i in 0..dx.len() {
                    // Subgradient 0 at x = 0 when the derivative would blow up.
                    if x[i] > 0.0 || p >= 1.0 {
                        dx[i] += g[i] * p * x[i].powf(p - 1.0);
                    }
                }
            });
        }
        Op::Clamp { input, lo, hi } => {
            let x = &nodes[input].data;
            accumulate(grads, nodes, input, |dx| {
                for i in 0..dx.len() {
                    if x[i] >= lo && x[i] <= hi {
                        dx[i] += g[i];
                    }
                }
            });
        }
        Op::Reduce { kind, input, axis } => {
            let x = &nodes[input].data;
            let xshape = &nodes[input].shape;
            match axis {
                None => {
                    let n = x.len() as f64;
                    accumulate(grads, nodes, input, |dx| match kind {
                        ReduceKind::Sum => {
                            for d in dx.iter_mut() {
                                *d += g[0];
                            }
                        }
                        ReduceKind::Mean => {
                            let q = g[0] / n;
                            for d in dx.iter_mut() {
                                *d += q;
                            }
                        }
                        ReduceKind::Max => {
                            let mut best = 0usize;
                            for (i, v) in x.iter().enumerate() {
                                if *v > x[best] {
                                    best = i;
                                }
                            }
                            dx[best] += g[0];
                        }
                    });
                }
                Some(ax) => {
                    let ax_len = xshape[ax];
                    let inner: usize = xshape[ax + 1..].iter().product();
                    let outer: usize = xshape[..ax].iter().product();
                    accumulate(grads, nodes, input, |dx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let go = g[o * inner + i];
                                let base = o * ax_len * inner + i;
                                match kind {
                                    ReduceKind::Sum => {
                                        for j in 0..ax_len {
                                            dx[base + j * inner] += go;
                                        }
                                    }
                                    ReduceKind::Mean => {
                                        let q = go / ax_len as f64;
                                        for j in 0..ax_len {
                                            dx[base + j * inner] += q;
                                        }
                                    }
                                    ReduceKind::Max => {
                                        let mut best = 0usize;
                                        for j in 1..ax_len {
                                            if x[base + j * inner] > x[base + best * inner] {
                                                best = j;
                                            }
                                        }
                                        dx[base + best * inner] += go;
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
        Op::TimeShift { input, offset } => {
            let t_len = nodes[id].shape[0] as i64;
            let row = nodes[id].data.len() / t_len as usize;
            accumulate(grads, nodes, input, |dx| {
                for t in 0..t_len {
                    let src = t - offset;
                    if src >= 0 && src < t_len {
                        let from = &g[t as usize * row..(t as usize + 1) * row];
                        let to = &mut dx[src as usize * row..(src as usize + 1) * row];
                        for (d, gi) in to.iter_mut().zip(from) {
                            *d += gi;
                        }
                    }
                }
            });
        }
        Op::Narrow {
            input,
            axis,
            start,
            len,
        } => {
            let xshape = &nodes[input].shape;
            let ax_len = xshape[axis];
            let inner: usize = xshape[axis + 1..].iter().product();
            let outer: usize = xshape[..axis].iter().product();
            accumulate(grads, nodes, input, |dx| {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut dx
                        [(o * ax_len + start) * inner..(o * ax_len + start + len) * inner];
                    for (d, gi) in dst.iter_mut().zip(src) {
                        *d += gi;
                    }
                }
            });
        }
        Op::Concat { axis, inputs } => {
            let oshape = &nodes[id].shape;
            let inner: usize = oshape[axis + 1..].iter().product();
            let outer: usize = oshape[..axis].iter().product();
            let total_ax = oshape[axis];
            let mut offset = 0usize;
            for &inp in &inputs {
                let part_ax = nodes[inp].shape[axis];
                accumulate(grads, nodes, inp, |dx| {
                    for o in 0..outer {
                        let src = &g[(o * total_ax + offset) * inner
                            ..(o * total_ax + offset + part_ax) * inner];
                        let dst = &mut dx[o * part_ax * inner..(o + 1) * part_ax * inner];
                        for (d, gi) in dst.iter_mut().zip(src) {
                            *d += gi;
                        }
                    }
                });
                offset += part_ax;
            }
        }
        Op::IndexSelect {
            input,
            axis,
            indices,
        } => {
            let xshape = &nodes[input].shape;
            let ax_len = xshape[axis];
            let inner: usize = xshape[axis + 1..].iter().product();
            let outer: usize = xshape[..axis].iter().product();
            let sel = indices.len();
            accumulate(grads, nodes, input, |dx| {
                for o in 0..outer {
                    for (si, &ix) in indices.iter().enumerate() {
                        let src = &g[(o * sel + si) * inner..(o * sel + si + 1) * inner];
                        let dst =
                            &mut dx[(o * ax_len + ix) * inner..(o * ax_len + ix + 1) * inner];
                        for (d, gi) in dst.iter_mut().zip(src) {
                            *d += gi;
                        }
                    }
                }
            });
        }
        Op::RoiAlign {
            map,
            rect,
            out,
            samples,
        } => {
            let ms = &nodes[map].shape;
            let (c, h, w) = (ms[0], ms[1], ms[2]);
            let (oh, ow) = out;
            let (sh, sw) = samples;
            let grid = roi_sample_grid(rect, h, w, oh, ow, sh, sw);
            let inv = 1.0 / (sh * sw) as f64;
            accumulate(grads, nodes, map, |dm| {
                for (bin, points) in grid.iter().enumerate() {
                    for taps in points.iter().flatten() {
                        for ci in 0..c {
                            let gv = g[ci * oh * ow + bin] * inv;
                            let plane = &mut dm[ci * h * w..(ci + 1) * h * w];
                            for (idx, wt) in taps {
                                plane[*idx] += gv * wt;
                            }
                        }
                    }
                }
            });
        }
        Op::Reshape { input } => {
            accumulate(grads, nodes, input, |dx| {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        }
    }
}

/// Sample taps for every output bin of a RoIAlign call, in bin-major order.
fn roi_sample_grid(
    rect: [f64; 4],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
) -> Vec<Vec<Option<[(usize, f64); 4]>>> {
    let [x1, y1, x2, y2] = rect;
    let (rx, ry) = (x1 * w as f64, y1 * h as f64);
    let bin_w = (x2 - x1) * w as f64 / ow as f64;
    let bin_h = (y2 - y1) * h as f64 / oh as f64;
    let mut grid = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut points = Vec::with_capacity(sh * sw);
            for sy in 0..sh {
                let y = ry + oy as f64 * bin_h + (sy as f64 + 0.5) / sh as f64 * bin_h;
                for sx in 0..sw {
                    let x = rx + ox as f64 * bin_w + (sx as f64 + 0.5) / sw as f64 * bin_w;
                    points.push(bilinear_taps(h, w, y - 0.5, x - 0.5));
                }
            }
            grid.push(points);
        }
    }
    grid
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].shape.len()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        debug_assert_eq!(inner.nodes[self.id].data.len(), 1);
        inner.nodes[self.id].data[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn same_tape(&self, other: &Tensor<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{op}: operands belong to different records"
            )))
        }
    }

    fn unary(&self, kind: UnaryKind) -> Result<Tensor<'t>> {
        let (shape, data, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.shape.clone(), n.data.clone(), n.requires_grad)
        };
        let out: Vec<f64> = match kind {
            UnaryKind::Sigmoid => data
                .iter()
                .map(|&x| {
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                })
                .collect(),
            UnaryKind::Tanh => data.iter().map(|x| x.tanh()).collect(),
            UnaryKind::Relu => data.iter().map(|x| x.max(0.0)).collect(),
            UnaryKind::Log => {
                if let Some(bad) = data.iter().find(|&&x| x <= 0.0) {
                    return Err(Error::domain(format!("log of non-positive value {bad}")));
                }
                data.iter().map(|x| x.ln()).collect()
            }
            UnaryKind::Neg => data.iter().map(|x| -x).collect(),
        };
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::Unary {
                kind,
                input: self.id,
            },
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn tanh(&self) -> Result<Tensor<'t>> {
        self.unary(UnaryKind::Tanh)
    }
    pub fn relu(&self) -> Result<Tensor<'t>> {
        self.unary(UnaryKind::Relu)
    }
    pub fn log(&self) -> Result<Tensor<'t>> {
        self.unary(UnaryKind::Log)
    }
    pub fn neg(&self) -> Result<Tensor<'t>> {
        self.unary(UnaryKind::Neg)
    }

    fn binary(&self, kind: BinaryKind, rhs: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(rhs, "binary op")?;
        let (lshape, rshape) = (self.shape(), rhs.shape());
        if !broadcast_ok(&lshape, &rshape) {
            return Err(Error::Shape {
                op: match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                },
                lhs: lshape,
                rhs: rshape,
            });
        }
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[rhs.id];
        let rlen = b.data.len();
        let mut out = Vec::with_capacity(a.data.len());
        match kind {
            BinaryKind::Add => {
                for (i, &x) in a.data.iter().enumerate() {
                    out.push(x + b.data[i % rlen]);
                }
            }
            BinaryKind::Sub => {
                for (i, &x) in a.data.iter().enumerate() {
                    out.push(x - b.data[i % rlen]);
                }
            }
            BinaryKind::Mul => {
                for (i, &x) in a.data.iter().enumerate() {
                    out.push(x * b.data[i % rlen]);
                }
            }
        }
        let rg = a.requires_grad || b.requires_grad;
        let shape = a.shape.clone();
        drop(inner);
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::Binary {
                kind,
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(BinaryKind::Add, rhs)
    }
    pub fn sub(&self, rhs: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(BinaryKind::Sub, rhs)
    }
    pub fn mul(&self, rhs: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(BinaryKind::Mul, rhs)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<'t>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let out: Vec<f64> = n.data.iter().map(|x| x + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(inner);
        Ok(self.tape.push(shape, out, rg, Op::AddScalar { input: self.id }))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor<'t>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let out: Vec<f64> = n.data.iter().map(|x| x * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(inner);
        Ok(self
            .tape
            .push(shape, out, rg, Op::MulScalar { input: self.id, c }))
    }

    /// Elementwise x^p. Negative bases are rejected for fractional p.
    pub fn pow_scalar(&self, p: f64) -> Result<Tensor<'t>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if p.fract() != 0.0 {
            if let Some(bad) = n.data.iter().find(|&&x| x < 0.0) {
                return Err(Error::domain(format!(
                    "pow with fractional exponent {p} of negative value {bad}"
                )));
            }
        }
        let out: Vec<f64> = n.data.iter().map(|x| x.powf(p)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(inner);
        Ok(self
            .tape
            .push(shape, out, rg, Op::PowScalar { input: self.id, p }))
    }

    /// Clamp into [lo, hi]; gradient passes through inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<'t>> {
        if lo > hi {
            return Err(Error::config(format!("clamp bounds inverted: {lo} > {hi}")));
        }
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let out: Vec<f64> = n.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(inner);
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::Clamp {
                input: self.id,
                lo,
                hi,
            },
        ))
    }

    /// 2-D matrix product; with `trans_b` the right operand is stored [n×k].
    fn matmul_impl(&self, rhs: &Tensor<'t>, trans_b: bool) -> Result<Tensor<'t>> {
        self.same_tape(rhs, "matmul")?;
        let ls = self.shape();
        let rs = rhs.shape();
        let op_name: &'static str = if trans_b { "matmul_nt" } else { "matmul" };
        if ls.len() != 2 || rs.len() != 2 {
            return Err(Error::Shape {
                op: op_name,
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k) = (ls[0], ls[1]);
        let (rk, n) = if trans_b { (rs[1], rs[0]) } else { (rs[0], rs[1]) };
        if k != rk {
            return Err(Error::Shape {
                op: op_name,
                lhs: ls,
                rhs: rs,
            });
        }
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[rhs.id];
        let mut out = vec![0.0; m * n];
        if trans_b {
            matmul_nt_acc(&mut out, &a.data, &b.data, m, k, n);
        } else {
            matmul_nn_acc(&mut out, &a.data, &b.data, m, k, n);
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        Ok(self.tape.push(
            vec![m, n],
            out,
            rg,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
                trans_b,
            },
        ))
    }

    /// C[i,j] = Σ_k A[i,k]·B[k,j]
    pub fn matmul(&self, rhs: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.matmul_impl(rhs, false)
    }

    /// C[i,j] = Σ_k A[i,k]·B[j,k] — i.e. A·Bᵀ without materializing Bᵀ.
    pub fn matmul_nt(&self, rhs: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.matmul_impl(rhs, true)
    }

    /// Cross-correlation of [N,Ci,H,W] (or [Ci,H,W]) with [Co,Ci,kh,kw].
    pub fn conv2d(&self, kernels: &Tensor<'t>, stride: usize, pad: usize) -> Result<Tensor<'t>> {
        self.same_tape(kernels, "conv2d")?;
        let xs = self.shape();
        let ks = kernels.shape();
        if ks.len() != 4 || (xs.len() != 3 && xs.len() != 4) {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let batched = xs.len() == 4;
        let x4 = if batched {
            *self
        } else {
            self.reshape(&[1, xs[0], xs[1], xs[2]])?
        };
        let xs4 = x4.shape();
        let (nb, ci, h, w) = (xs4[0], xs4[1], xs4[2], xs4[3]);
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kci != ci {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs4,
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output extent is not an integer: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let ckk = ci * kh * kw;
        let howo = ho * wo;
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[x4.id].data;
        let kmat = &inner.nodes[kernels.id].data;
        let mut out = vec![0.0; nb * co * howo];
        let mut cols = vec![0.0; ckk * howo];
        for s in 0..nb {
            im2col(
                &x[s * ci * h * w..(s + 1) * ci * h * w],
                ci,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut cols,
            );
            matmul_nn_acc(
                &mut out[s * co * howo..(s + 1) * co * howo],
                kmat,
                &cols,
                co,
                ckk,
                howo,
            );
        }
        let rg = inner.nodes[x4.id].requires_grad || inner.nodes[kernels.id].requires_grad;
        drop(inner);
        let result = self.tape.push(
            vec![nb, co, ho, wo],
            out,
            rg,
            Op::Conv2d {
                input: x4.id,
                kernels: kernels.id,
                stride,
                pad,
            },
        );
        if batched {
            Ok(result)
        } else {
            result.reshape(&[co, ho, wo])
        }
    }

    /// 2×2 average pooling with stride 2 on [N,C,H,W]; H and W must be even.
    pub fn avg_pool2(&self) -> Result<Tensor<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "avg_pool2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!(
                "avg_pool2 requires even extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = vec![0.0; nb * c * ho * wo];
        for p in 0..nb * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            let oplane = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * w + 2 * ox;
                    oplane[oy * wo + ox] =
                        0.25 * (plane[base] + plane[base + 1] + plane[base + w] + plane[base + w + 1]);
                }
            }
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self
            .tape
            .push(vec![nb, c, ho, wo], out, rg, Op::AvgPool2 { input: self.id }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::config(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let ax_len = shape[axis];
        let inner_sz: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner_sz {
                let base = o * ax_len * inner_sz + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..ax_len {
                    mx = mx.max(x[base + j * inner_sz]);
                }
                let mut sum = 0.0;
                for j in 0..ax_len {
                    let e = (x[base + j * inner_sz] - mx).exp();
                    out[base + j * inner_sz] = e;
                    sum += e;
                }
                for j in 0..ax_len {
                    out[base + j * inner_sz] /= sum;
                }
            }
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::Softmax {
                input: self.id,
                axis,
            },
        ))
    }

    fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if let Some(ax) = axis {
            if ax >= shape.len() {
                return Err(Error::config(format!(
                    "reduce axis {ax} out of range for shape {shape:?}"
                )));
            }
            if shape[ax] == 0 {
                return Err(Error::domain("reduce over empty axis".into()));
            }
        } else if numel(&shape) == 0 {
            return Err(Error::domain("reduce over empty tensor".into()));
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let (out_shape, out): (Vec<usize>, Vec<f64>) = match axis {
            None => {
                let v = match kind {
                    ReduceKind::Sum => x.iter().sum(),
                    ReduceKind::Mean => x.iter().sum::<f64>() / x.len() as f64,
                    ReduceKind::Max => x.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
                (vec![], vec![v])
            }
            Some(ax) => {
                let ax_len = shape[ax];
                let inner_sz: usize = shape[ax + 1..].iter().product();
                let outer: usize = shape[..ax].iter().product();
                let mut out = vec![0.0; outer * inner_sz];
                for o in 0..outer {
                    for i in 0..inner_sz {
                        let base = o * ax_len * inner_sz + i;
                        let v = match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let mut s = 0.0;
                                for j in 0..ax_len {
                                    s += x[base + j * inner_sz];
                                }
                                if kind == ReduceKind::Mean {
                                    s / ax_len as f64
                                } else {
                                    s
                                }
                            }
                            ReduceKind::Max => {
                                let mut mx = f64::NEG_INFINITY;
                                for j in 0..ax_len {
                                    mx = mx.max(x[base + j * inner_sz]);
                                }
                                mx
                            }
                        };
                        out[o * inner_sz + i] = v;
                    }
                }
                let mut os = shape.clone();
                os.remove(ax);
                (os, out)
            }
        };
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(
            out_shape,
            out,
            rg,
            Op::Reduce {
                kind,
                input: self.id,
                axis,
            },
        ))
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor<'t>> {
        self.reduce(ReduceKind::Sum, axis)
    }
    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor<'t>> {
        self.reduce(ReduceKind::Mean, axis)
    }
    pub fn max(&self, axis: Option<usize>) -> Result<Tensor<'t>> {
        self.reduce(ReduceKind::Max, axis)
    }

    /// Shift along axis 0 by `offset` frames; vacated rows are zero-filled.
    /// `offset = 1` moves frame t-1 into slot t (a forward shift).
    pub fn time_shift(&self, offset: i64) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::config("time_shift requires at least 1 axis".into()));
        }
        let t_len = shape[0];
        let row = numel(&shape) / t_len;
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = vec![0.0; x.len()];
        for t in 0..t_len as i64 {
            let src = t - offset;
            if src >= 0 && src < t_len as i64 {
                out[t as usize * row..(t as usize + 1) * row]
                    .copy_from_slice(&x[src as usize * row..(src as usize + 1) * row]);
            }
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::TimeShift {
                input: self.id,
                offset,
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Index(format!(
                "narrow axis {axis} range {start}..{} out of bounds for shape {shape:?}",
                start + len
            )));
        }
        let ax_len = shape[axis];
        let inner_sz: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = Vec::with_capacity(outer * len * inner_sz);
        for o in 0..outer {
            out.extend_from_slice(
                &x[(o * ax_len + start) * inner_sz..(o * ax_len + start + len) * inner_sz],
            );
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        let mut os = shape;
        os[axis] = len;
        Ok(self.tape.push(
            os,
            out,
            rg,
            Op::Narrow {
                input: self.id,
                axis,
                start,
                len,
            },
        ))
    }

    /// Gather slices along `axis` at the given indices (with repetition).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "index_select axis {axis} out of range for shape {shape:?}"
            )));
        }
        let ax_len = shape[axis];
        if indices.is_empty() {
            return Err(Error::Index("index_select with empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ax_len) {
            return Err(Error::Index(format!(
                "index {bad} out of range for axis length {ax_len}"
            )));
        }
        let inner_sz: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut out = Vec::with_capacity(outer * indices.len() * inner_sz);
        for o in 0..outer {
            for &ix in indices {
                out.extend_from_slice(
                    &x[(o * ax_len + ix) * inner_sz..(o * ax_len + ix + 1) * inner_sz],
                );
            }
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        let mut os = shape;
        os[axis] = indices.len();
        Ok(self.tape.push(
            os,
            out,
            rg,
            Op::IndexSelect {
                input: self.id,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Region pooling on a [C,h,w] map with a box in normalized [0,1]
    /// coordinates; each output bin averages bilinear samples on a regular
    /// sub-grid. Differentiable with respect to the map only.
    pub fn roi_align(
        &self,
        rect: [f64; 4],
        out: (usize, usize),
        samples: (usize, usize),
    ) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::Shape {
                op: "roi_align",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let [x1, y1, x2, y2] = rect;
        if !(0.0..=1.0).contains(&x1)
            || !(0.0..=1.0).contains(&y1)
            || !(0.0..=1.0).contains(&x2)
            || !(0.0..=1.0).contains(&y2)
        {
            return Err(Error::Geometry(format!(
                "box {rect:?} not inside the unit square"
            )));
        }
        if (x2 - x1) * w as f64 <= 0.0 || (y2 - y1) * h as f64 <= 0.0 {
            return Err(Error::Geometry(format!(
                "degenerate box {rect:?} on a {h}x{w} map"
            )));
        }
        let (oh, ow) = out;
        let (sh, sw) = samples;
        if oh == 0 || ow == 0 || sh == 0 || sw == 0 {
            return Err(Error::config("roi_align output/sample grid must be positive"));
        }
        let grid = roi_sample_grid(rect, h, w, oh, ow, sh, sw);
        let inv = 1.0 / (sh * sw) as f64;
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut outv = vec![0.0; c * oh * ow];
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for (bin, points) in grid.iter().enumerate() {
                let mut acc = 0.0;
                for taps in points.iter().flatten() {
                    for (idx, wt) in taps {
                        acc += plane[*idx] * wt;
                    }
                }
                outv[ci * oh * ow + bin] = acc * inv;
            }
        }
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.tape.push(
            vec![c, oh, ow],
            outv,
            rg,
            Op::RoiAlign {
                map: self.id,
                rect,
                out,
                samples,
            },
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if numel(&shape) != numel(new_shape) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: shape,
                rhs: new_shape.to_vec(),
            });
        }
        let inner = self.tape.inner.borrow();
        let data = inner.nodes[self.id].data.clone();
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self
            .tape
            .push(new_shape.to_vec(), data, rg, Op::Reshape { input: self.id }))
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'t>(axis: usize, parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::config(format!(
            "concat axis {axis} out of range for shape {base:?}"
        )));
    }
    let mut total_ax = 0usize;
    for p in parts {
        first.same_tape(p, "concat")?;
        let s = p.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::Shape {
                op: "concat",
                lhs: base.clone(),
                rhs: s,
            });
        }
        total_ax += s[axis];
    }
    let inner_sz: usize = base[axis + 1..].iter().product();
    let outer: usize = base[..axis].iter().product();
    let tape = first.tape;
    let inner = tape.inner.borrow();
    let mut out = vec![0.0; outer * total_ax * inner_sz];
    let mut offset = 0usize;
    let mut rg = false;
    for p in parts {
        let node = &inner.nodes[p.id];
        rg |= node.requires_grad;
        let part_ax = node.shape[axis];
        for o in 0..outer {
            let src = &node.data[o * part_ax * inner_sz..(o + 1) * part_ax * inner_sz];
            out[(o * total_ax + offset) * inner_sz..(o * total_ax + offset + part_ax) * inner_sz]
                .copy_from_slice(src);
        }
        offset += part_ax;
    }
    drop(inner);
    let mut os = base;
    os[axis] = total_ax;
    Ok(tape.push(
        os,
        out,
        rg,
        Op::Concat {
            axis,
            inputs: parts.iter().map(|p| p.id).collect(),
        },
    ))
}
