//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] without copying; [`Graph::backward`]
//! returns gradients for every parameter that took part in the pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Grads, ParamId, ParamStore};
use crate::real::{gemm, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Val<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    Renorm { x: Var, axis: usize, eps: T },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Resize(Var),
    TransposeLast2(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Repeat { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    MeanAll(Var),
    Mse { x: Var, target: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    val: Val<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Decompose `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Half-pixel bilinear sampling taps for resizing `n_in` samples to `n_out`.
fn bilinear_taps<T: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, T::c(frac))
        })
        .collect()
}

/// Unfold one `[C, H, W]` image into `[C*k*k, Ho*Wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
    col_stride: usize,
    col_offset: usize,
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * col_stride + col_offset..row * col_stride + col_offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - pad as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src_row[ix as usize] };
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
    col_stride: usize,
    col_offset: usize,
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * col_stride + col_offset..row * col_stride + col_offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on elements in one im2col buffer; larger batches are chunked.
const COL_BUDGET: usize = 1 << 23;

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].val {
            Val::Owned(d) => d,
            Val::Param(id) => &self.params.get(*id).data,
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "not a scalar");
        d[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, val: Val::Owned(data), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        assert_eq!(numel(shape), data.len(), "input shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape.clone();
        self.nodes.push(Node { shape, val: Val::Param(id), op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x[..., in] · w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2);
        let (fan_in, fan_out) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), fan_in, "linear: input width mismatch");
        let rows = numel(&xs) / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), fan_out);
            for r in out.chunks_mut(fan_out) {
                r.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(rows, fan_in, fan_out, self.value(x), false, self.value(w), false, &mut out, beta);
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(shape, out, Op::Linear { x, w, b }, ng)
    }

    /// Batched matmul over the leading dimension: `[B, m, k] x [B, k, n]`,
    /// with optional transposition of the trailing two axes of either side.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm expects [B,_,_] operands");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims");
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(vec![batch, m, n], out, Op::Bmm { a, b, ta, tb }, ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over the prefix).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        assert!(sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb, "add_suffix: {sa:?} vs {sb:?}");
        let bv = self.value(b);
        let n = bv.len();
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(bv).for_each(|(o, &y)| *o += y);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(sa, out, Op::AddSuffix(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, out, Op::Scale(a, s), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xv[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (xv[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= s;
                }
            }
        }
        let ng = self.ng(x);
        self.push(shape, out, Op::Softmax { x, axis }, ng)
    }

    /// `(x + eps) / sum_axis(x + eps)`: turns non-negative weights into a
    /// weighted-mean distribution along `axis`.
    pub fn renorm(&mut self, x: Var, axis: usize, eps: T) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut s = T::zero();
                for j in 0..n {
                    s += xv[base + j * inner] + eps;
                }
                for j in 0..n {
                    out[base + j * inner] = (xv[base + j * inner] + eps) / s;
                }
            }
        }
        let ng = self.ng(x);
        self.push(shape, out, Op::Renorm { x, axis, eps }, ng)
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Var {
        let eps = T::c(1e-5);
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::c(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.value(g);
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(gv).for_each(|(o, &s)| *o *= s);
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bv).for_each(|(o, &s)| *o += s);
            }
        }
        let ng = self.ng(x) || gain.is_some_and(|g| self.ng(g)) || bias.is_some_and(|b| self.ng(b));
        self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [Co, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects 4-d input and weight");
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, ci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert_eq!(ws[3], k, "square kernels only");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let p = ho * wo;
        let ckk = c * k * k;
        let mut out = vec![T::zero(); batch * co * p];
        if k == 1 && stride == 1 && pad == 0 {
            // Pointwise: each image is already its own column matrix.
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b));
            for i in 0..batch {
                let dst = &mut out[i * co * p..(i + 1) * co * p];
                if let Some(bv) = bv {
                    for (o, row) in dst.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v = bv[o]);
                    }
                }
                gemm(co, c, p, wv, false, &xv[i * c * p..(i + 1) * c * p], false, dst, T::one());
            }
            let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
            return self.push(vec![batch, co, ho, wo], out, Op::Conv2d { x, w, b, stride, pad }, ng);
        }
        let chunk = (COL_BUDGET / (ckk * p)).clamp(1, batch.max(1));
        let mut cols = vec![T::zero(); ckk * p * chunk];
        let mut tmp = vec![T::zero(); co * p * chunk];
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let mut start = 0;
        while start < batch {
            let nb = chunk.min(batch - start);
            let cs = nb * p;
            for i in 0..nb {
                let img = &xv[(start + i) * c * h * wd..(start + i + 1) * c * h * wd];
                im2col(img, c, h, wd, k, stride, pad, &mut cols, cs, i * p);
            }
            gemm(co, ckk, cs, wv, false, &cols[..ckk * cs], false, &mut tmp[..co * cs], T::zero());
            for i in 0..nb {
                for o in 0..co {
                    let dst = &mut out[((start + i) * co + o) * p..((start + i) * co + o + 1) * p];
                    let src = &tmp[o * cs + i * p..o * cs + (i + 1) * p];
                    match bv {
                        Some(bv) => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bv[o]),
                        None => dst.copy_from_slice(src),
                    }
                }
            }
            start += nb;
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(vec![batch, co, ho, wo], out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Bilinear resize of the trailing two axes (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let nd = xs.len();
        assert!(nd >= 2);
        let (h, w) = (xs[nd - 2], xs[nd - 1]);
        let planes = numel(&xs[..nd - 2]);
        let ty = bilinear_taps::<T>(h, out_h);
        let tx = bilinear_taps::<T>(w, out_w);
        let xv = self.value(x);
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let mut shape = xs;
        shape[nd - 2] = out_h;
        shape[nd - 1] = out_w;
        let ng = self.ng(x);
        self.push(shape, out, Op::Resize(x), ng)
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let nd = xs.len();
        let (r, c) = (xs[nd - 2], xs[nd - 1]);
        let batch = numel(&xs[..nd - 2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            let src = &xv[b * r * c..(b + 1) * r * c];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = xs;
        shape.swap(nd - 2, nd - 1);
        let ng = self.ng(x);
        self.push(shape, out, Op::TransposeLast2(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), numel(self.shape(x)), "reshape changes element count");
        let data = self.value(x).to_vec();
        let ng = self.ng(x);
        self.push(shape.to_vec(), data, Op::Reshape(x), ng)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&xs, axis);
        assert!(start + len <= n, "slice out of range");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let ng = self.ng(x);
        self.push(shape, out, Op::Slice { x, axis, start }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len());
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat: mismatched dims");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let v = self.value(p);
                out.extend_from_slice(&v[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// Broadcast a size-1 `axis` to `n` copies.
    pub fn repeat(&mut self, x: Var, axis: usize, n: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs[axis], 1, "repeat needs a singleton axis");
        let (outer, _, inner) = split_axis(&xs, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = xs;
        shape[axis] = n;
        let ng = self.ng(x);
        self.push(shape, out, Op::Repeat { x, axis }, ng)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&xs, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(shape, out, Op::SumAxis { x, axis }, ng)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis);
        self.scale(s, T::one() / T::c(n as f64))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().copied().sum::<T>() / T::c(v.len() as f64);
        let ng = self.ng(x);
        self.push(vec![1], vec![m], Op::MeanAll(x), ng)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, x: Var, target: Var) -> Var {
        assert_eq!(self.shape(x), self.shape(target), "mse shape mismatch");
        let xv = self.value(x);
        let tv = self.value(target);
        let s: T = xv.iter().zip(tv).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let m = s / T::c(xv.len() as f64);
        let ng = self.ng(x) || self.ng(target);
        self.push(vec![1], vec![m], Op::Mse { x, target }, ng)
    }

    /// Mean softmax cross-entropy of `logits: [R, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let ls = self.shape(logits).to_vec();
        assert_eq!(ls.len(), 2);
        let (rows, cls) = (ls[0], ls[1]);
        assert_eq!(rows, targets.len(), "one target per row");
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * cls];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &lv[r * cls..(r + 1) * cls];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &v) in probs[r * cls..(r + 1) * cls].iter_mut().zip(row) {
                *p = (v - mx).exp();
                s += *p;
            }
            probs[r * cls..(r + 1) * cls].iter_mut().for_each(|p| *p /= s);
            assert!(targets[r] < cls, "target class out of range");
            loss += s.ln() + mx - row[targets[r]];
        }
        loss /= T::c(rows as f64);
        let ng = self.ng(logits);
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Normalize each row along the last axis to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::c(1e-12));
            norms[r] = n;
            out[r * d..(r + 1) * d].iter_mut().zip(row).for_each(|(o, &v)| *o = v / n);
        }
        let ng = self.ng(x);
        self.push(shape, out, Op::L2Normalize { x, norms }, ng)
    }

    /// Back-propagate from a scalar `loss` and collect parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(numel(self.shape(loss)), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Grads::zeros_like(self.params);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        out
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = numel(self.shape(v));
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Grads<T>) {
        let node = &self.nodes[i];
        let y = match &node.val {
            Val::Owned(d) => &d[..],
            Val::Param(_) => &[][..],
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (fi, fo) = (ws[0], ws[1]);
                let rows = g.len() / fo;
                if let Some(dx) = self.acc(grads, *x) {
                    gemm(rows, fo, fi, g, false, self.value(*w), true, dx, T::one());
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(fi, rows, fo, self.value(*x), true, g, false, dw, T::one());
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for r in g.chunks(fo) {
                            db.iter_mut().zip(r).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let batch = sa[0];
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.acc(grads, *a) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let ds = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *ta {
                            // dA^T[k,m] = op(B)[k,n] · G^T[n,m]
                            gemm(k, n, m, bs, *tb, gs, true, ds, T::one());
                        } else {
                            // dA[m,k] = G[m,n] · op(B)^T[n,k]
                            gemm(m, n, k, gs, false, bs, !*tb, ds, T::one());
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let ds = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *tb {
                            // dB^T[n,k] = G^T[n,m] · op(A)[m,k]
                            gemm(n, m, k, gs, true, as_, *ta, ds, T::one());
                        } else {
                            // dB[k,n] = op(A)^T[k,m] · G[m,n]
                            gemm(k, m, n, as_, !*ta, gs, false, ds, T::one());
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.acc(grads, *b) {
                    let n = db.len();
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::Relu(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * n * inner + ii;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                dx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::Renorm { x, axis, eps } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let xv = self.value(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * n * inner + ii;
                            let mut s = T::zero();
                            let mut dot = T::zero();
                            for j in 0..n {
                                let idx = base + j * inner;
                                s += xv[idx] + *eps;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                dx[idx] += (g[idx] - dot) / s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                if let Some(b) = bias {
                    if let Some(db) = self.acc(grads, *b) {
                        for r in g.chunks(d) {
                            db.iter_mut().zip(r).for_each(|(dd, &v)| *dd += v);
                        }
                    }
                }
                if let Some(gn) = gain {
                    if let Some(dg) = self.acc(grads, *gn) {
                        for (r, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((dd, &gv), &h) in dg.iter_mut().zip(r).zip(xh) {
                                *dd += gv * h;
                            }
                        }
                    }
                }
                let gv = gain.map(|gn| self.value(gn));
                if let Some(dx) = self.acc(grads, *x) {
                    let dn = T::c(d as f64);
                    let mut gh = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gh[j] = gr[j] * gv.map_or(T::one(), |s| s[j]);
                        }
                        let mean_g = gh.iter().copied().sum::<T>() / dn;
                        let mean_gx = gh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (gh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(node, g, *x, *w, *b, *stride, *pad, grads),
            Op::Resize(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let xs = self.shape(*x);
                    let nd = xs.len();
                    let (h, w) = (xs[nd - 2], xs[nd - 1]);
                    let (oh, ow) = (node.shape[nd - 2], node.shape[nd - 1]);
                    let planes = numel(&xs[..nd - 2]);
                    let ty = bilinear_taps::<T>(h, oh);
                    let tx = bilinear_taps::<T>(w, ow);
                    for p in 0..planes {
                        let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                        let ds = &mut dx[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = gs[oy * ow + ox];
                                let top = gv * (T::one() - fy);
                                let bot = gv * fy;
                                ds[y0 * w + x0] += top * (T::one() - fx);
                                ds[y0 * w + x1] += top * fx;
                                ds[y1 * w + x0] += bot * (T::one() - fx);
                                ds[y1 * w + x1] += bot * fx;
                            }
                        }
                    }
                }
            }
            Op::TransposeLast2(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let nd = node.shape.len();
                    // node is [.., c, r]; input is [.., r, c]
                    let (c, r) = (node.shape[nd - 2], node.shape[nd - 1]);
                    let batch = numel(&node.shape[..nd - 2]);
                    for bi in 0..batch {
                        let gs = &g[bi * r * c..(bi + 1) * r * c];
                        let ds = &mut dx[bi * r * c..(bi + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                ds[i * c + j] += gs[j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Slice { x, axis, start } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let xs = self.shape(*x);
                    let (outer, n, inner) = split_axis(xs, *axis);
                    let len = node.shape[*axis];
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if let Some(dp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            dp[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += n;
                }
            }
            Op::Repeat { x, axis } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let (outer, n, inner) = split_axis(&node.shape, *axis);
                    for o in 0..outer {
                        for j in 0..n {
                            let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dx[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            dx[(o * n + j) * inner..(o * n + j + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::MeanAll(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let s = g[0] / T::c(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let tv = self.value(*target);
                let s = g[0] * T::c(2.0) / T::c(xv.len() as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &a), &b) in dx.iter_mut().zip(xv).zip(tv) {
                        *d += s * (a - b);
                    }
                }
                if let Some(dt) = self.acc(grads, *target) {
                    for ((d, &a), &b) in dt.iter_mut().zip(xv).zip(tv) {
                        *d -= s * (a - b);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(dl) = self.acc(grads, *logits) {
                    let rows = targets.len();
                    let cls = probs.len() / rows;
                    let s = g[0] / T::c(rows as f64);
                    for r in 0..rows {
                        for c in 0..cls {
                            let ind = if c == targets[r] { T::one() } else { T::zero() };
                            dl[r * cls + c] += s * (probs[r * cls + c] - ind);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let d = *node.shape.last().unwrap();
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node<T>,
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (node.shape[2], node.shape[3]);
        let p = ho * wo;
        let ckk = c * k * k;
        if let Some(b) = b {
            if let Some(db) = self.acc(grads, b) {
                for bi in 0..batch {
                    for o in 0..co {
                        let s: T = g[(bi * co + o) * p..(bi * co + o + 1) * p].iter().copied().sum();
                        db[o] += s;
                    }
                }
            }
        }
        let need_dw = self.ng(w);
        let need_dx = self.ng(x);
        if !need_dw && !need_dx {
            return;
        }
        if k == 1 && stride == 1 && pad == 0 {
            let xv = self.value(x);
            let wv = self.value(w);
            if let Some(dw) = self.acc(grads, w) {
                for i in 0..batch {
                    let gi = &g[i * co * p..(i + 1) * co * p];
                    gemm(co, p, c, gi, false, &xv[i * c * p..(i + 1) * c * p], true, dw, T::one());
                }
            }
            if let Some(dx) = self.acc(grads, x) {
                for i in 0..batch {
                    let gi = &g[i * co * p..(i + 1) * co * p];
                    gemm(c, co, p, wv, true, gi, false, &mut dx[i * c * p..(i + 1) * c * p], T::one());
                }
            }
            return;
        }
        let chunk = (COL_BUDGET / (ckk * p)).clamp(1, batch.max(1));
        let mut cols = vec![T::zero(); ckk * p * chunk];
        let mut gcat = vec![T::zero(); co * p * chunk];
        let xv = self.value(x);
        let wv = self.value(w);
        let mut dw_local = if need_dw { vec![T::zero(); co * ckk] } else { Vec::new() };
        let mut dx_local = if need_dx { vec![T::zero(); batch * c * h * wd] } else { Vec::new() };
        let mut start = 0;
        while start < batch {
            let nb = chunk.min(batch - start);
            let cs = nb * p;
            for i in 0..nb {
                for o in 0..co {
                    let src = &g[((start + i) * co + o) * p..((start + i) * co + o + 1) * p];
                    gcat[o * cs + i * p..o * cs + (i + 1) * p].copy_from_slice(src);
                }
            }
            if need_dw {
                for i in 0..nb {
                    let img = &xv[(start + i) * c * h * wd..(start + i + 1) * c * h * wd];
                    im2col(img, c, h, wd, k, stride, pad, &mut cols, cs, i * p);
                }
                // dW[co, ckk] += G[co, cs] · cols^T[cs, ckk]
                gemm(co, cs, ckk, &gcat[..co * cs], false, &cols[..ckk * cs], true, &mut dw_local, T::one());
            }
            if need_dx {
                // dcols[ckk, cs] = W^T[ckk, co] · G[co, cs]
                gemm(ckk, co, cs, wv, true, &gcat[..co * cs], false, &mut cols[..ckk * cs], T::zero());
                for i in 0..nb {
                    let dimg = &mut dx_local[(start + i) * c * h * wd..(start + i + 1) * c * h * wd];
                    col2im(&cols, c, h, wd, k, stride, pad, dimg, cs, i * p);
                }
            }
            start += nb;
        }
        if let Some(dw) = self.acc(grads, w) {
            dw.iter_mut().zip(&dw_local).for_each(|(d, &v)| *d += v);
        }
        if let Some(dx) = self.acc(grads, x) {
            dx.iter_mut().zip(&dx_local).for_each(|(d, &v)| *d += v);
        }
    }
}
