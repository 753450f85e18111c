//! A small tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op evaluates eagerly
//! and records its parents, so [`Graph::backward`] is a single reverse sweep.
//! Graphs are cheap to build and meant to be thrown away after one
//! forward/backward pass.

use crate::error::{ensure_shape, Result};
use crate::sparse::SparseMap;
use crate::tensor::Tensor;
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Axpby(Var, f64, Var, f64),
    Affine(Var, f64),
    Sqrt(Var),
    Square(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Max(Var, usize),
    Reshape(Var),
    Narrow(Var, usize),
    Concat(Vec<Var>),
    Conv2d(Conv2dArgs),
    AvgPool2(Var),
    Upsample2(Var),
    Linear {
        src: Var,
        map: Rc<SparseMap>,
        base: Option<(Var, Rc<Vec<f64>>)>,
    },
}

#[derive(Clone, Copy, Debug)]
struct Conv2dArgs {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()))
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`; intended for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `alpha * a + beta * b`.
    pub fn axpby(&mut self, alpha: f64, a: Var, beta: f64, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Axpby(a, alpha, b, beta), |x, y| alpha * x + beta * y)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Gradient passes only where `lo < a < hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Maximum element; the gradient goes to the first maximal index.
    pub fn max(&mut self, a: Var) -> Var {
        let data = self.value(a).data();
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let value = Tensor::scalar(data[best]);
        let rg = self.rg(&[a]);
        self.push(value, Op::Max(a, best), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Slice `len` entries of the leading dimension starting at `start`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, data), Op::Narrow(a, start * inner), rg)
    }

    /// Concatenate along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            ensure_shape(&first[1..], &t.shape()[1..])?;
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// 2-D convolution of a `[Cin, H, W]` input with `[Cout, Cin, K, K]`
    /// weights and an optional `[Cout]` bias; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        ensure_shape(&[ws[0], cin, ws[2], ws[2]], &ws)?;
        if let Some(b) = b {
            ensure_shape(&[ws[0]], self.shape(b))?;
        }
        let geo = ConvGeometry::new(cin, h, wd, ws[2], stride, pad);
        let cout = ws[0];
        let cols = geo.im2col(self.value(x).data());
        let mut out = vec![0.0; cout * geo.p()];
        gemm(
            cout,
            geo.ckk(),
            geo.p(),
            self.value(w).data(),
            (geo.ckk(), 1),
            &cols,
            (geo.p(), 1),
            &mut out,
            (geo.p(), 1),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, chunk) in out.chunks_mut(geo.p()).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let args = Conv2dArgs {
            x,
            w,
            b,
            stride,
            pad,
        };
        Ok(self.push(
            Tensor::new(&[cout, geo.ho, geo.wo], out),
            Op::Conv2d(args),
            rg,
        ))
    }

    /// 2x2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = (ch * h + 2 * y) * w + 2 * xx;
                    out[(ch * ho + y) * wo + xx] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, ho, wo], out), Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[c, ho, wo], out), Op::Upsample2(x), rg))
    }

    /// `out = map * src`, reshaped to `shape`.
    pub fn linear_map(&mut self, src: Var, map: Rc<SparseMap>, shape: &[usize]) -> Result<Var> {
        ensure_shape(&[map.in_len()], &[self.value(src).len()])?;
        let out = Tensor::try_new(shape, map.apply(self.value(src).data()))?;
        let rg = self.rg(&[src]);
        Ok(self.push(
            out,
            Op::Linear {
                src,
                map,
                base: None,
            },
            rg,
        ))
    }

    /// `out[i] = keep[i] * base[i] + (map * src)[i]`; the result takes the
    /// shape of `base`.
    pub fn composite(&mut self, base: Var, keep: Rc<Vec<f64>>, src: Var, map: Rc<SparseMap>) -> Result<Var> {
        let b = self.value(base);
        ensure_shape(&[b.len()], &[map.out_len()])?;
        ensure_shape(&[b.len()], &[keep.len()])?;
        ensure_shape(&[map.in_len()], &[self.value(src).len()])?;
        let mut out = map.apply(self.value(src).data());
        for ((o, &k), &bv) in out.iter_mut().zip(keep.iter()).zip(b.data()) {
            if k != 0.0 {
                *o += k * bv;
            }
        }
        let out = Tensor::new(b.shape(), out);
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            out,
            Op::Linear {
                src,
                map,
                base: Some((base, keep)),
            },
            rg,
        ))
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Gradients { grads, shapes }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(1.0, g, s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(-1.0, g, s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Axpby(a, alpha, b, beta) => {
                acc(*a, &mut |s| axpy(*alpha, g, s));
                acc(*b, &mut |s| axpy(*beta, g, s));
            }
            Op::Affine(a, scale) => acc(*a, &mut |s| axpy(*scale, g, s)),
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * 0.5 / out[k];
                }
            }),
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * 2.0 * av[k];
                    }
                })
            }
            Op::Silu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        let sg = sigmoid(av[k]);
                        s[k] += g[k] * sg * (1.0 + av[k] * (1.0 - sg));
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Softplus(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * sigmoid(av[k]);
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if av[k] > *lo && av[k] < *hi {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Max(a, idx) => acc(*a, &mut |s| s[*idx] += g[0]),
            Op::Reshape(a) => acc(*a, &mut |s| axpy(1.0, g, s)),
            Op::Narrow(a, offset) => acc(*a, &mut |s| axpy(1.0, g, &mut s[*offset..*offset + g.len()])),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |s| axpy(1.0, &g[offset..offset + len], s));
                    offset += len;
                }
            }
            Op::Conv2d(args) => self.conv_backward(*args, g, &mut acc),
            Op::AvgPool2(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw().unwrap();
                let (ho, wo) = (h / 2, w / 2);
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = 0.25 * g[(ch * ho + y) * wo + xx];
                                let base = (ch * h + 2 * y) * w + 2 * xx;
                                s[base] += gv;
                                s[base + 1] += gv;
                                s[base + w] += gv;
                                s[base + w + 1] += gv;
                            }
                        }
                    }
                })
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw().unwrap();
                let (ho, wo) = (2 * h, 2 * w);
                acc(*x, &mut |s| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                s[(ch * h + y / 2) * w + xx / 2] += g[(ch * ho + y) * wo + xx];
                            }
                        }
                    }
                })
            }
            Op::Linear { src, map, base } => {
                acc(*src, &mut |s| map.apply_transpose_add(g, s));
                if let Some((b, keep)) = base {
                    acc(*b, &mut |s| {
                        for k in 0..s.len() {
                            s[k] += keep[k] * g[k];
                        }
                    });
                }
            }
        }
    }

    fn conv_backward(&self, args: Conv2dArgs, g: &[f64], acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64]))) {
        let x = &self.nodes[args.x.0].value;
        let w = &self.nodes[args.w.0].value;
        let (cin, h, wd) = x.chw().unwrap();
        let cout = w.shape()[0];
        let geo = ConvGeometry::new(cin, h, wd, w.shape()[2], args.stride, args.pad);
        let (ckk, p) = (geo.ckk(), geo.p());
        if let Some(b) = args.b {
            acc(b, &mut |s| {
                for (co, chunk) in g.chunks(p).enumerate() {
                    s[co] += chunk.iter().sum::<f64>();
                }
            });
        }
        if self.nodes[args.w.0].requires_grad {
            let cols = geo.im2col(x.data());
            acc(args.w, &mut |s| {
                // dW (cout x ckk) += g (cout x p) * cols^T (p x ckk)
                gemm_acc(cout, p, ckk, g, (p, 1), &cols, (1, p), s, (ckk, 1));
            });
        }
        if self.nodes[args.x.0].requires_grad {
            let mut dcols = vec![0.0; ckk * p];
            // dcols (ckk x p) = W^T (ckk x cout) * g (cout x p)
            gemm(ckk, cout, p, w.data(), (1, ckk), g, (p, 1), &mut dcols, (p, 1));
            acc(args.x, &mut |s| geo.col2im_add(&dcols, s));
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(row, col, src_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.p();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(row * p, oy * self.wo + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.ckk() * self.p()];
        self.for_each_tap(|row_off, col, src| cols[row_off + col] = x[src]);
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|row_off, col, src| dx[src] += cols[row_off + col]);
    }
}

/// `c = a * b` for an `m x k` times `k x n` product with explicit
/// (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], sc: (usize, usize)) {
    gemm_impl(m, k, n, a, sa, b, sb, c, sc, 0.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], sc: (usize, usize)) {
    gemm_impl(m, k, n, a, sa, b, sb, c, sc, 1.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_impl(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    sc: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * sa.0 + (k.max(1) - 1) * sa.1 + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * sb.0 + (n - 1) * sb.1 + 1 || k == 0);
    assert!(c.len() >= (m - 1) * sc.0 + (n - 1) * sc.1 + 1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx.
    fn check(shape: &[usize], f: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = t(shape, 7);
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = f(&mut g, x);
        let probe = g.constant(t(g.shape(y), 99));
        let yp = g.mul(y, probe).unwrap();
        let loss = g.sum(yp);
        let grad = g.backward(loss).get_or_zeros(x);
        let eval = |xv: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(xv);
            let y = f(&mut g, x);
            let probe = g.constant(t(g.shape(y), 99));
            let yp = g.mul(y, probe).unwrap();
            let l = g.sum(yp);
            g.scalar(l)
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            let an = grad.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        check(&[2, 3, 3], |g, x| g.silu(x));
        check(&[2, 3, 3], |g, x| g.sigmoid(x));
        check(&[2, 3, 3], |g, x| g.softplus(x));
        check(&[2, 3, 3], |g, x| {
            let s = g.square(x);
            let s = g.affine(s, 1.0, 0.5);
            g.sqrt(s)
        });
        check(&[6], |g, x| {
            let e = g.exp(x);
            g.axpby(0.3, e, -2.0, x).unwrap()
        });
    }

    #[test]
    fn conv_grads() {
        let w = t(&[4, 2, 3, 3], 3);
        let b = t(&[4], 5);
        check(&[2, 5, 6], |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            g.conv2d(x, w, Some(b), 1, 1).unwrap()
        });
        check(&[2, 7, 6], |g, x| {
            let w = g.constant(w.clone());
            g.conv2d(x, w, None, 2, 1).unwrap()
        });
        // gradient with respect to the weights
        let x = t(&[2, 5, 5], 11);
        check(&[4, 2, 3, 3], |g, w| {
            let x = g.constant(x.clone());
            g.conv2d(x, w, None, 2, 1).unwrap()
        });
    }

    #[test]
    fn structural_grads() {
        check(&[3, 4, 4], |g, x| {
            let p = g.avg_pool2(x).unwrap();
            let u = g.upsample2(p).unwrap();
            let n = g.narrow(u, 1, 2);
            let c = g.concat(&[n, x]).unwrap();
            g.reshape(c, &[5, 16]).unwrap()
        });
        check(&[2, 3, 3], |g, x| {
            let m = Rc::new(SparseMap::rotate_scale(2, 3, 3, 30.0, 1.2));
            g.linear_map(x, m, &[2, 3, 3]).unwrap()
        });
    }

    #[test]
    fn max_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[4], vec![0.1, 0.7, 0.7, -1.0]));
        let m = g.max(x);
        assert_eq!(g.scalar(m), 0.7);
        let gr = g.backward(m).get_or_zeros(x);
        assert_eq!(gr.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }
}
