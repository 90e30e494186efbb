//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! vector-Jacobian products into every node that requires a gradient.

use std::cell::{Cell, RefCell};

use super::element::{matmul_into, Element, Mat};
use super::tensor::{strides_of, Tensor};
use crate::error::{config_err, Error, Result};

/// Marker in remap tables for positions that read as zero.
pub(crate) const VOID: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Gelu,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How one operand of a broadcast binary op is indexed from the output index.
#[derive(Debug)]
enum Bcast {
    Same,
    Cycle(usize),
    Table(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Table(t) => t[i],
        }
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        ia: Bcast,
        ib: Bcast,
    },
    Scale {
        x: usize,
        c: F,
    },
    Offset {
        x: usize,
    },
    Unary {
        x: usize,
        kind: Activation,
    },
    SumAll {
        x: usize,
    },
    Affine {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Remap {
        x: usize,
        tables: Vec<Vec<usize>>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Gather {
        table: usize,
        idx: Vec<usize>,
    },
    Bilinear2x {
        x: usize,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation tape. Single-threaded by construction.
pub struct Graph<F: Element> {
    nodes: RefCell<Vec<Node<F>>>,
    flops: Cell<u64>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Element> {
    g: &'g Graph<F>,
    id: usize,
}

impl<F: Element> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes only.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&[F]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<Vec<F>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, d) | (d, 1) => d,
            _ => return Err(config_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

fn bcast_plan(out: &[usize], src: &[usize]) -> Bcast {
    let n = numel(src);
    if n == numel(out) {
        return Bcast::Same;
    }
    // Source equals the trailing dims of the output (after dropping leading 1s).
    let mut trimmed = src;
    while trimmed.len() > 1 && trimmed[0] == 1 {
        trimmed = &trimmed[1..];
    }
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return Bcast::Cycle(n);
    }
    let r = out.len();
    let sstr = strides_of(src);
    let mut eff = vec![0usize; r];
    for i in 0..src.len() {
        let oi = i + r - src.len();
        eff[oi] = if src[i] == 1 { 0 } else { sstr[i] };
    }
    let mut table = Vec::with_capacity(numel(out));
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..numel(out) {
        table.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Bcast::Table(table)
}

/// Visits `(out_index, src_offset)` for a remap, `src_offset == VOID` for zero fill.
fn remap_visit(shape: &[usize], tables: &[Vec<usize>], mut f: impl FnMut(usize, usize)) {
    let r = shape.len();
    let inner = shape[r - 1];
    let last = &tables[r - 1];
    let outer: usize = numel(&shape[..r - 1]);
    let mut idx = vec![0usize; r - 1];
    let mut o = 0usize;
    for _ in 0..outer {
        let mut base = 0usize;
        let mut void = false;
        for (ax, &j) in idx.iter().enumerate() {
            let t = tables[ax][j];
            if t == VOID {
                void = true;
                break;
            }
            base += t;
        }
        for &t in last.iter().take(inner) {
            if void || t == VOID {
                f(o, VOID);
            } else {
                f(o, base + t);
            }
            o += 1;
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn im2col<F: Element>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [F],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Element>(
    col: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [F],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source rows and weights for 2x bilinear upsampling (half-pixel centers).
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[inline]
fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn gelu_parts<F: Element>(x: F) -> (F, F) {
    // (Phi(x), phi(x))
    let half = F::c(0.5);
    let cdf = half * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (cdf, pdf)
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
        }
    }

    /// Floating-point operations (2 x multiply-accumulates) of the convolution,
    /// affine and batched-matmul nodes recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn add_flops(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    fn push(&self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Result<Var<'_, F>> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op_name} produced {:?} at flat index {i}",
                value[i],
                op_name = op_name(&op)
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            g: self,
            id: nodes.len() - 1,
        })
    }

    /// Inserts a tensor as a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor<F>) -> Result<Var<'_, F>> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&self, tensor: &Tensor<F>) -> Result<Var<'_, F>> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn var(&self, tensor: Tensor<F>) -> Result<Var<'_, F>> {
        let rg = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, rg)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        // Keep only leaves.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { .. } => "binary",
        Op::Scale { .. } => "scale",
        Op::Offset { .. } => "offset",
        Op::Unary { .. } => "activation",
        Op::SumAll { .. } => "sum",
        Op::Affine { .. } => "affine",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Reshape { .. } => "reshape",
        Op::Remap { .. } => "remap",
        Op::Concat { .. } => "concat",
        Op::Gather { .. } => "gather",
        Op::Bilinear2x { .. } => "bilinear",
    }
}

fn slot<F: Element>(grads: &mut [Option<Vec<F>>], id: usize, len: usize) -> &mut Vec<F> {
    grads[id].get_or_insert_with(|| vec![F::zero(); len])
}

fn backprop<F: Element>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[id];
    let need = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, ia, ib } => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if need(a) {
                let ga = slot(grads, a, av.len());
                for (i, &gi) in g.iter().enumerate() {
                    let (ja, jb) = (ia.at(i), ib.at(i));
                    let d = match kind {
                        Binary::Add | Binary::Sub => gi,
                        Binary::Mul => gi * bv[jb],
                        Binary::Div => gi / bv[jb],
                    };
                    ga[ja] = ga[ja] + d;
                }
            }
            if need(b) {
                let gb = slot(grads, b, bv.len());
                for (i, &gi) in g.iter().enumerate() {
                    let (ja, jb) = (ia.at(i), ib.at(i));
                    let d = match kind {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * av[ja],
                        Binary::Div => -gi * av[ja] / (bv[jb] * bv[jb]),
                    };
                    gb[jb] = gb[jb] + d;
                }
            }
        }
        Op::Scale { x, c } => {
            let gx = slot(grads, *x, g.len());
            for (o, &gi) in gx.iter_mut().zip(g) {
                *o = *o + gi * *c;
            }
        }
        Op::Offset { x } => {
            let gx = slot(grads, *x, g.len());
            for (o, &gi) in gx.iter_mut().zip(g) {
                *o = *o + gi;
            }
        }
        Op::Unary { x, kind } => {
            let xv = &nodes[*x].value;
            let yv = &node.value;
            let gx = slot(grads, *x, g.len());
            for i in 0..g.len() {
                let d = match kind {
                    Activation::Relu => {
                        if xv[i] > F::zero() {
                            g[i]
                        } else {
                            F::zero()
                        }
                    }
                    Activation::Sigmoid => g[i] * yv[i] * (F::one() - yv[i]),
                    Activation::Gelu => {
                        let (cdf, pdf) = gelu_parts(xv[i]);
                        g[i] * (cdf + xv[i] * pdf)
                    }
                    Activation::Softplus => g[i] * sigmoid(xv[i]),
                };
                gx[i] = gx[i] + d;
            }
        }
        Op::SumAll { x } => {
            let n = nodes[*x].value.len();
            let gx = slot(grads, *x, n);
            for o in gx.iter_mut() {
                *o = *o + g[0];
            }
        }
        Op::Affine { x, w, b } => {
            let wshape = &nodes[*w].shape;
            let (din, dout) = (wshape[0], wshape[1]);
            let xv = &nodes[*x].value;
            let m = xv.len() / din;
            if need(*x) {
                let gx = slot(grads, *x, xv.len());
                matmul_into(
                    Mat::new(g, m, dout),
                    Mat::new(&nodes[*w].value, din, dout).t(),
                    gx,
                    true,
                );
            }
            if need(*w) {
                let gw = slot(grads, *w, din * dout);
                matmul_into(Mat::new(xv, m, din).t(), Mat::new(g, m, dout), gw, true);
            }
            if let Some(b) = b {
                if need(*b) {
                    let gb = slot(grads, *b, dout);
                    for row in g.chunks_exact(dout) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let ash = &nodes[*a].shape;
            let (bsz, n, k) = (ash[0], ash[1], ash[2]);
            let m = node.shape[2];
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if need(*a) {
                let ga = slot(grads, *a, av.len());
                for i in 0..bsz {
                    let gi = &g[i * n * m..(i + 1) * n * m];
                    let bm = if *trans_b {
                        Mat::new(&bv[i * m * k..(i + 1) * m * k], m, k)
                    } else {
                        Mat::new(&bv[i * k * m..(i + 1) * k * m], k, m).t()
                    };
                    matmul_into(Mat::new(gi, n, m), bm, &mut ga[i * n * k..(i + 1) * n * k], true);
                }
            }
            if need(*b) {
                let gb = slot(grads, *b, bv.len());
                for i in 0..bsz {
                    let gi = &g[i * n * m..(i + 1) * n * m];
                    let am = Mat::new(&av[i * n * k..(i + 1) * n * k], n, k);
                    let out = &mut gb[i * k * m..(i + 1) * k * m];
                    if *trans_b {
                        // b is [m, k]: gb = g^T a
                        matmul_into(Mat::new(gi, n, m).t(), am, out, true);
                    } else {
                        matmul_into(am.t(), Mat::new(gi, n, m), out, true);
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let xs = &nodes[*x].shape;
            let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let ws = &nodes[*w].shape;
            let (o, k) = (ws[0], ws[2]);
            let (ho, wo) = (node.shape[2], node.shape[3]);
            let hw = ho * wo;
            let ckk = c * k * k;
            let direct = k == 1 && *stride == 1 && *pad == 0;
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let mut col = if direct { Vec::new() } else { vec![F::zero(); ckk * hw] };
            let mut gcol = vec![F::zero(); if need(*x) && !direct { ckk * hw } else { 0 }];
            for n in 0..nb {
                let gy = &g[n * o * hw..(n + 1) * o * hw];
                let xn = &xv[n * c * h * wd..(n + 1) * c * h * wd];
                if need(*w) {
                    let colv: &[F] = if direct {
                        xn
                    } else {
                        im2col(xn, c, h, wd, k, *stride, *pad, ho, wo, &mut col);
                        &col
                    };
                    let gw = slot(grads, *w, o * ckk);
                    matmul_into(Mat::new(gy, o, hw), Mat::new(colv, ckk, hw).t(), gw, true);
                }
                if need(*x) {
                    let gx = slot(grads, *x, xv.len());
                    let gxn = &mut gx[n * c * h * wd..(n + 1) * c * h * wd];
                    if direct {
                        matmul_into(Mat::new(wv, o, ckk).t(), Mat::new(gy, o, hw), gxn, true);
                    } else {
                        matmul_into(Mat::new(wv, o, ckk).t(), Mat::new(gy, o, hw), &mut gcol, false);
                        col2im(&gcol, c, h, wd, k, *stride, *pad, ho, wo, gxn);
                    }
                }
            }
            if let Some(b) = b {
                if need(*b) {
                    let gb = slot(grads, *b, o);
                    for n in 0..nb {
                        for oc in 0..o {
                            let s: F = g[(n * o + oc) * hw..(n * o + oc + 1) * hw].iter().copied().sum();
                            gb[oc] = gb[oc] + s;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let d = *node.shape.last().unwrap();
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            let rows = xv.len() / d;
            if need(*gamma) || need(*beta) {
                let mut gg = vec![F::zero(); d];
                let mut gbv = vec![F::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        let xh = (xv[r * d + j] - mean[r]) * rstd[r];
                        gg[j] = gg[j] + g[r * d + j] * xh;
                        gbv[j] = gbv[j] + g[r * d + j];
                    }
                }
                if need(*gamma) {
                    let s = slot(grads, *gamma, d);
                    s.iter_mut().zip(&gg).for_each(|(o, v)| *o = *o + *v);
                }
                if need(*beta) {
                    let s = slot(grads, *beta, d);
                    s.iter_mut().zip(&gbv).for_each(|(o, v)| *o = *o + *v);
                }
            }
            if need(*x) {
                let gx = slot(grads, *x, xv.len());
                let inv_d = F::one() / F::c(d as f64);
                for r in 0..rows {
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        let gh = g[r * d + j] * gv[j];
                        let xh = (xv[r * d + j] - mean[r]) * rstd[r];
                        s1 = s1 + gh;
                        s2 = s2 + gh * xh;
                    }
                    for j in 0..d {
                        let gh = g[r * d + j] * gv[j];
                        let xh = (xv[r * d + j] - mean[r]) * rstd[r];
                        let v = rstd[r] * (gh - s1 * inv_d - xh * s2 * inv_d);
                        gx[r * d + j] = gx[r * d + j] + v;
                    }
                }
            }
        }
        Op::Softmax { x } => {
            let d = *node.shape.last().unwrap();
            let y = &node.value;
            let gx = slot(grads, *x, y.len());
            for ((gr, yr), gxr) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                let dot: F = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                for j in 0..d {
                    gxr[j] = gxr[j] + yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::Reshape { x } => {
            let gx = slot(grads, *x, g.len());
            gx.iter_mut().zip(g).for_each(|(o, v)| *o = *o + *v);
        }
        Op::Remap { x, tables } => {
            let n = nodes[*x].value.len();
            let gx = slot(grads, *x, n);
            remap_visit(&node.shape, tables, |o, s| {
                if s != VOID {
                    gx[s] = gx[s] + g[o];
                }
            });
        }
        Op::Concat { xs, axis } => {
            let shape = &node.shape;
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[axis + 1..]);
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &xi in xs {
                let len = nodes[xi].shape[*axis] * inner;
                if need(xi) {
                    let gx = slot(grads, xi, outer * len);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        for (d, s) in gx[o * len..(o + 1) * len].iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Gather { table, idx } => {
            let ts = &nodes[*table].shape;
            let cols = ts[1];
            let gt = slot(grads, *table, ts[0] * cols);
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    gt[i * cols + c] = gt[i * cols + c] + g[r * cols + c];
                }
            }
        }
        Op::Bilinear2x { x } => {
            let xs = &nodes[*x].shape;
            let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
            let ty = bilinear_taps(h);
            let tx = bilinear_taps(w);
            let gx = slot(grads, *x, b * h * w * c);
            let (ho, wo) = (2 * h, 2 * w);
            for bi in 0..b {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let go = &g[((bi * ho + oy) * wo + ox) * c..][..c];
                        let taps = [
                            (y0, x0, (1.0 - fy) * (1.0 - fx)),
                            (y0, x1, (1.0 - fy) * fx),
                            (y1, x0, fy * (1.0 - fx)),
                            (y1, x1, fy * fx),
                        ];
                        for (yy, xx, wgt) in taps {
                            let wgt = F::c(wgt);
                            let base = ((bi * h + yy) * w + xx) * c;
                            for ci in 0..c {
                                gx[base + ci] = gx[base + ci] + go[ci] * wgt;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g, F: Element> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.g.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor<F> {
        let nodes = self.g.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[F]) -> R) -> R {
        f(&self.g.nodes.borrow()[self.id].value)
    }

    /// Single-element value.
    pub fn item(&self) -> F {
        self.with_data(|d| d[0])
    }

    fn binary(self, other: Var<'g, F>, kind: Binary) -> Result<Var<'g, F>> {
        let (shape, value, ia, ib) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(&a.shape, &b.shape)?;
            let ia = bcast_plan(&shape, &a.shape);
            let ib = bcast_plan(&shape, &b.shape);
            let n = numel(&shape);
            let (av, bv) = (&a.value, &b.value);
            let mut value = Vec::with_capacity(n);
            for i in 0..n {
                let (x, y) = (av[ia.at(i)], bv[ib.at(i)]);
                value.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
            (shape, value, ia, ib)
        };
        let rg = self.g.rg(&[self.id, other.id]);
        self.g.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                ia,
                ib,
            },
            rg,
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, Binary::Div)
    }

    pub fn scale(self, c: F) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| v * c).collect())
        };
        self.g.push(shape, value, Op::Scale { x: self.id, c }, self.requires_grad())
    }

    pub fn add_scalar(self, c: F) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| v + c).collect())
        };
        self.g.push(shape, value, Op::Offset { x: self.id }, self.requires_grad())
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            let value = n
                .value
                .iter()
                .map(|&x| match kind {
                    Activation::Relu => x.max(F::zero()),
                    Activation::Sigmoid => sigmoid(x),
                    Activation::Gelu => x * gelu_parts(x).0,
                    Activation::Softplus => {
                        // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
                        x.max(F::zero()) + (-x.abs()).exp().ln_1p()
                    }
                })
                .collect();
            (n.shape.clone(), value)
        };
        self.g
            .push(shape, value, Op::Unary { x: self.id, kind }, self.requires_grad())
    }

    pub fn relu(self) -> Result<Var<'g, F>> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'g, F>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn gelu(self) -> Result<Var<'g, F>> {
        self.activation(Activation::Gelu)
    }

    pub fn sum(self) -> Result<Var<'g, F>> {
        let s: F = self.with_data(|d| d.iter().copied().sum());
        self.g
            .push(vec![1], vec![s], Op::SumAll { x: self.id }, self.requires_grad())
    }

    /// `x @ w + b` over the last axis; `w` is `[din, dout]`.
    pub fn affine(self, w: Var<'g, F>, b: Option<Var<'g, F>>) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (x, wn) = (&nodes[self.id], &nodes[w.id]);
            if wn.shape.len() != 2 {
                return Err(config_err!("affine weight must be 2-d, got {:?}", wn.shape));
            }
            let (din, dout) = (wn.shape[0], wn.shape[1]);
            if *x.shape.last().unwrap() != din {
                return Err(config_err!(
                    "affine input {:?} does not match weight {:?}",
                    x.shape,
                    wn.shape
                ));
            }
            let m = x.value.len() / din;
            let mut value = vec![F::zero(); m * dout];
            if let Some(b) = b {
                let bn = &nodes[b.id];
                if bn.value.len() != dout {
                    return Err(config_err!("affine bias {:?} vs dout {dout}", bn.shape));
                }
                for row in value.chunks_exact_mut(dout) {
                    row.copy_from_slice(&bn.value);
                }
            }
            matmul_into(
                Mat::new(&x.value, m, din),
                Mat::new(&wn.value, din, dout),
                &mut value,
                b.is_some(),
            );
            self.g.add_flops(2 * m * din * dout);
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = dout;
            (shape, value)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.g.rg(&ids);
        self.g.push(
            shape,
            value,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        )
    }

    /// `[B, n, k] x [B, k, m]`, or `[B, n, k] x [B, m, k]^T` when `trans_b`.
    pub fn bmm(self, other: Var<'g, F>, trans_b: bool) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] {
                return Err(config_err!("bmm shapes {:?} x {:?}", a.shape, b.shape));
            }
            let (bsz, n, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (kb, m) = if trans_b {
                (b.shape[2], b.shape[1])
            } else {
                (b.shape[1], b.shape[2])
            };
            if kb != k {
                return Err(config_err!(
                    "bmm inner dims {:?} x {:?} (trans_b={trans_b})",
                    a.shape,
                    b.shape
                ));
            }
            let mut value = vec![F::zero(); bsz * n * m];
            for i in 0..bsz {
                let am = Mat::new(&a.value[i * n * k..(i + 1) * n * k], n, k);
                let bm = if trans_b {
                    Mat::new(&b.value[i * m * k..(i + 1) * m * k], m, k).t()
                } else {
                    Mat::new(&b.value[i * k * m..(i + 1) * k * m], k, m)
                };
                matmul_into(am, bm, &mut value[i * n * m..(i + 1) * n * m], false);
            }
            self.g.add_flops(2 * bsz * n * k * m);
            (vec![bsz, n, m], value)
        };
        let rg = self.g.rg(&[self.id, other.id]);
        self.g.push(
            shape,
            value,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        )
    }

    /// Cross-correlation of `[N, C, H, W]` with `[O, C, k, k]`.
    pub fn conv2d(
        self,
        w: Var<'g, F>,
        b: Option<Var<'g, F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (x, wn) = (&nodes[self.id], &nodes[w.id]);
            if x.shape.len() != 4 || wn.shape.len() != 4 || wn.shape[2] != wn.shape[3] {
                return Err(config_err!("conv2d shapes {:?} * {:?}", x.shape, wn.shape));
            }
            let (nb, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (o, k) = (wn.shape[0], wn.shape[2]);
            if wn.shape[1] != c {
                return Err(config_err!(
                    "conv2d input has {c} channels, weight expects {}",
                    wn.shape[1]
                ));
            }
            if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
                return Err(config_err!("conv2d kernel {k} does not fit {h}x{wd} (pad {pad})"));
            }
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wd + 2 * pad - k) / stride + 1;
            let hw = ho * wo;
            let ckk = c * k * k;
            let mut value = vec![F::zero(); nb * o * hw];
            if let Some(b) = b {
                let bv = &nodes[b.id].value;
                if bv.len() != o {
                    return Err(config_err!("conv2d bias has {} entries for {o} outputs", bv.len()));
                }
                for n in 0..nb {
                    for oc in 0..o {
                        value[(n * o + oc) * hw..(n * o + oc + 1) * hw]
                            .iter_mut()
                            .for_each(|v| *v = bv[oc]);
                    }
                }
            }
            let direct = k == 1 && stride == 1 && pad == 0;
            let mut col = if direct { Vec::new() } else { vec![F::zero(); ckk * hw] };
            for n in 0..nb {
                let xn = &x.value[n * c * h * wd..(n + 1) * c * h * wd];
                let colv: &[F] = if direct {
                    xn
                } else {
                    im2col(xn, c, h, wd, k, stride, pad, ho, wo, &mut col);
                    &col
                };
                matmul_into(
                    Mat::new(&wn.value, o, ckk),
                    Mat::new(colv, ckk, hw),
                    &mut value[n * o * hw..(n + 1) * o * hw],
                    true,
                );
            }
            self.g.add_flops(2 * nb * o * hw * ckk);
            (vec![nb, o, ho, wo], value)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.g.rg(&ids);
        self.g.push(
            shape,
            value,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
            rg,
        )
    }

    /// Normalizes over the last axis using the population variance.
    pub fn layer_norm(self, gamma: Var<'g, F>, beta: Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
        let (shape, value, mean, rstd) = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id];
            let d = *x.shape.last().unwrap();
            let (gv, bv) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            if gv.len() != d || bv.len() != d {
                return Err(config_err!(
                    "layer_norm over {d} features with gamma/beta of {}/{}",
                    gv.len(),
                    bv.len()
                ));
            }
            let rows = x.value.len() / d;
            let mut mean = Vec::with_capacity(rows);
            let mut rstd = Vec::with_capacity(rows);
            let mut value = vec![F::zero(); x.value.len()];
            let inv_d = F::one() / F::c(d as f64);
            for (r, row) in x.value.chunks_exact(d).enumerate() {
                let mu = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
                let rs = F::one() / (var + F::c(eps)).sqrt();
                for j in 0..d {
                    value[r * d + j] = (row[j] - mu) * rs * gv[j] + bv[j];
                }
                mean.push(mu);
                rstd.push(rs);
            }
            (x.shape.clone(), value, mean, rstd)
        };
        let rg = self.g.rg(&[self.id, gamma.id, beta.id]);
        self.g.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(self) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id];
            let d = *x.shape.last().unwrap();
            let mut value = x.value.clone();
            for row in value.chunks_exact_mut(d) {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            (x.shape.clone(), value)
        };
        self.g
            .push(shape, value, Op::Softmax { x: self.id }, self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let value = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id];
            if numel(shape) != x.value.len() || shape.contains(&0) {
                return Err(config_err!("cannot reshape {:?} into {shape:?}", x.shape));
            }
            x.value.clone()
        };
        self.g.push(
            shape.to_vec(),
            value,
            Op::Reshape { x: self.id },
            self.requires_grad(),
        )
    }

    /// Generic data movement: output element at multi-index `j` reads
    /// `src[sum_ax tables[ax][j[ax]]]`, or zero if any entry is [`VOID`].
    pub(crate) fn remap(self, shape: Vec<usize>, tables: Vec<Vec<usize>>) -> Result<Var<'g, F>> {
        debug_assert_eq!(shape.len(), tables.len());
        let value = {
            let nodes = self.g.nodes.borrow();
            let src = &nodes[self.id].value;
            let mut value = vec![F::zero(); numel(&shape)];
            remap_visit(&shape, &tables, |o, s| {
                if s != VOID {
                    value[o] = src[s];
                }
            });
            value
        };
        self.g
            .push(shape, value, Op::Remap { x: self.id, tables }, self.requires_grad())
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, F>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(config_err!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let st = strides_of(&shape);
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let tables = perm
            .iter()
            .map(|&p| (0..shape[p]).map(|j| j * st[p]).collect())
            .collect();
        self.remap(out, tables)
    }

    fn identity_tables(shape: &[usize]) -> Vec<Vec<usize>> {
        let st = strides_of(shape);
        shape
            .iter()
            .zip(&st)
            .map(|(&n, &s)| (0..n).map(|j| j * s).collect())
            .collect()
    }

    /// Cyclic shift: `out[i] = x[(i - shift) mod n]` along each listed axis.
    pub fn roll(self, shifts: &[(usize, isize)]) -> Result<Var<'g, F>> {
        let shape = self.shape();
        let st = strides_of(&shape);
        let mut tables = Self::identity_tables(&shape);
        for &(ax, s) in shifts {
            if ax >= shape.len() {
                return Err(config_err!("roll axis {ax} out of range for {shape:?}"));
            }
            let n = shape[ax] as isize;
            tables[ax] = (0..n)
                .map(|j| ((j - s).rem_euclid(n)) as usize * st[ax])
                .collect();
        }
        self.remap(shape, tables)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(config_err!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            ));
        }
        let st = strides_of(&shape);
        let mut tables = Self::identity_tables(&shape);
        tables[axis] = (0..len).map(|j| (start + j) * st[axis]).collect();
        let mut out = shape;
        out[axis] = len;
        self.remap(out, tables)
    }

    /// Zero padding: `(axis, before, after)` per entry.
    pub fn pad(self, pads: &[(usize, usize, usize)]) -> Result<Var<'g, F>> {
        let shape = self.shape();
        let st = strides_of(&shape);
        let mut tables = Self::identity_tables(&shape);
        let mut out = shape.clone();
        for &(ax, before, after) in pads {
            if ax >= shape.len() {
                return Err(config_err!("pad axis {ax} out of range for {shape:?}"));
            }
            out[ax] = shape[ax] + before + after;
            tables[ax] = (0..out[ax])
                .map(|j| {
                    if j < before || j >= before + shape[ax] {
                        VOID
                    } else {
                        (j - before) * st[ax]
                    }
                })
                .collect();
        }
        self.remap(out, tables)
    }

    /// `out[i] = x[i + offset]` along `axis`, zero where out of range.
    pub fn shift_zero(self, axis: usize, offset: isize) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(config_err!("shift axis {axis} out of range for {shape:?}"));
        }
        let st = strides_of(&shape);
        let mut tables = Self::identity_tables(&shape);
        let n = shape[axis] as isize;
        tables[axis] = (0..n)
            .map(|j| {
                let s = j + offset;
                if s < 0 || s >= n {
                    VOID
                } else {
                    s as usize * st[axis]
                }
            })
            .collect();
        self.remap(shape, tables)
    }

    pub fn concat(xs: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
        let first = xs.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let g = first.g;
        let (shape, value) = {
            let nodes = g.nodes.borrow();
            let base = &nodes[first.id].shape;
            if axis >= base.len() {
                return Err(config_err!("concat axis {axis} out of range for {base:?}"));
            }
            let mut shape = base.clone();
            shape[axis] = 0;
            for v in xs {
                let s = &nodes[v.id].shape;
                let compatible = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(config_err!("concat of {base:?} with {s:?} along {axis}"));
                }
                shape[axis] += s[axis];
            }
            let outer = numel(&shape[..axis]);
            let inner = numel(&shape[axis + 1..]);
            let mut value = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for v in xs {
                    let n = &nodes[v.id];
                    let len = n.shape[axis] * inner;
                    value.extend_from_slice(&n.value[o * len..(o + 1) * len]);
                }
            }
            (shape, value)
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let rg = g.rg(&ids);
        g.push(shape, value, Op::Concat { xs: ids, axis }, rg)
    }

    /// Rows of a `[R, C]` table selected by `idx`, giving `[idx.len(), C]`.
    pub fn gather_rows(self, idx: Vec<usize>) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let t = &nodes[self.id];
            if t.shape.len() != 2 {
                return Err(config_err!("gather table must be 2-d, got {:?}", t.shape));
            }
            let (rows, cols) = (t.shape[0], t.shape[1]);
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(config_err!("gather index {bad} out of {rows} rows"));
            }
            let mut value = Vec::with_capacity(idx.len() * cols);
            for &i in &idx {
                value.extend_from_slice(&t.value[i * cols..(i + 1) * cols]);
            }
            (vec![idx.len(), cols], value)
        };
        self.g.push(
            shape,
            value,
            Op::Gather {
                table: self.id,
                idx,
            },
            self.requires_grad(),
        )
    }

    /// 2x bilinear upsampling of channel-last `[B, H, W, C]` (half-pixel centers).
    pub fn upsample_bilinear2x(self) -> Result<Var<'g, F>> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 4 {
                return Err(config_err!("bilinear expects [B,H,W,C], got {:?}", x.shape));
            }
            let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let ty = bilinear_taps(h);
            let tx = bilinear_taps(w);
            let (ho, wo) = (2 * h, 2 * w);
            let mut value = vec![F::zero(); b * ho * wo * c];
            for bi in 0..b {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let out = &mut value[((bi * ho + oy) * wo + ox) * c..][..c];
                        let taps = [
                            (y0, x0, (1.0 - fy) * (1.0 - fx)),
                            (y0, x1, (1.0 - fy) * fx),
                            (y1, x0, fy * (1.0 - fx)),
                            (y1, x1, fy * fx),
                        ];
                        for (yy, xx, wgt) in taps {
                            let wgt = F::c(wgt);
                            let src = &x.value[((bi * h + yy) * w + xx) * c..][..c];
                            for ci in 0..c {
                                out[ci] = out[ci] + src[ci] * wgt;
                            }
                        }
                    }
                }
            }
            (vec![b, ho, wo, c], value)
        };
        self.g
            .push(shape, value, Op::Bilinear2x { x: self.id }, self.requires_grad())
    }
}
