//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for parameters and inputs. Tensors are NCHW for images and
//! `[batch, features]` for vectors.

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Linear(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Conv2d(Var, Var, Conv2dOpts),
    ConvTranspose2d(Var, Var, Conv2dOpts),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Reshape(Var),
    Crop2d(Var),
    SumAll(Var),
    MeanAll(Var),
    GlobalAvgPool(Var),
    SoftmaxLast(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
    scoped: BTreeMap<usize, BTreeMap<ParamId, Tensor>>,
}

static NO_GRADS: BTreeMap<ParamId, Tensor> = BTreeMap::new();

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// Parameter gradients recorded under a non-zero [`Graph::set_scope`].
    pub fn params_in(&self, scope: usize) -> &BTreeMap<ParamId, Tensor> {
        if scope == 0 {
            return &self.params;
        }
        self.scoped.get(&scope).unwrap_or(&NO_GRADS)
    }
}

/// Batch-norm running-statistic update produced during a training forward pass.
#[derive(Debug, Clone)]
pub struct BufferUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(usize, ParamId), Var>,
    buffer_updates: Vec<BufferUpdate>,
    constant_params: bool,
    scope: usize,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold `x` (`c x h x w`) into a `(c*kh*kw) x (oh*ow)` matrix.
fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    for oj in 0..g.ow {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        dst[oi * g.ow + oj] = if ii >= 0
                            && (ii as usize) < g.h
                            && jj >= 0
                            && (jj as usize) < g.w
                        {
                            x[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `x`.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        x[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                    }
                }
            }
        }
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// (outer, axis, inner) decomposition around axis 1.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "axis-1 op on rank-{} tensor", shape.len());
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// While set, [`Graph::param`] records parameters as constants: they
    /// receive no gradient and are not cached. Lets a second network (with
    /// its own store) run inside this graph, e.g. a frozen critic.
    pub fn set_constant_params(&mut self, on: bool) {
        self.constant_params = on;
    }

    /// Parameters fetched after this call are keyed under `scope`, so a
    /// second trainable network with its own store can share the graph.
    /// Scope 0 is the default; returns the previous scope.
    pub fn set_scope(&mut self, scope: usize) -> usize {
        std::mem::replace(&mut self.scope, scope)
    }

    /// Graph node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.constant_params {
            return self.push(store.get(id).clone(), Op::Input);
        }
        let key = (self.scope, id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(key, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a per-channel bias `[C]` to `x` of shape `[B, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let tb = self.value(bias);
        let (outer, ch, inner) = split_axis1(tx.shape());
        assert_eq!(tb.len(), ch, "bias length {} vs {} channels", tb.len(), ch);
        let mut out = tx.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for c in 0..ch {
                let bv = tb.data()[c];
                let base = (o * ch + c) * inner;
                for v in &mut d[base..base + inner] {
                    *v += bv;
                }
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v + s);
        self.push(t, Op::AddScalar(x))
    }

    /// `x [B, I] · wᵀ` with `w [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape().len(), 2, "linear input must be [batch, features]");
        let (b, i) = (tx.dim(0), tx.dim(1));
        let o = tw.dim(0);
        assert_eq!(tw.dim(1), i, "linear weight expects {} inputs, got {}", tw.dim(1), i);
        let mut out = vec![0.0; b * o];
        gemm(b, i, o, 1.0, tx.data(), false, tw.data(), true, 0.0, &mut out);
        self.push(Tensor::new(vec![b, o], out), Op::Linear(x, w))
    }

    /// Batched matrix product `[B, M, K] · [B, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bs, m, k) = (ta.dim(0), ta.dim(1), ta.dim(2));
        let n = tb.dim(2);
        assert_eq!(tb.dim(0), bs);
        assert_eq!(tb.dim(1), k);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                1.0,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(vec![bs, m, n], out), Op::Bmm(a, b))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (bs, m, n) = (t.dim(0), t.dim(1), t.dim(2));
        let mut out = vec![0.0; bs * m * n];
        for b in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    out[(b * n + j) * m + i] = t.data()[(b * m + i) * n + j];
                }
            }
        }
        self.push(Tensor::new(vec![bs, n, m], out), Op::TransposeLast2(x))
    }

    fn conv_geom(x: &[usize], w: &[usize], opts: &Conv2dOpts, cin: usize) -> ConvGeom {
        let (h, wd) = (x[2], x[3]);
        let (kh, kw) = (w[2], w[3]);
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        assert!(
            h + 2 * ph >= kh && wd + 2 * pw >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{wd}"
        );
        ConvGeom {
            c: cin,
            h,
            w: wd,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / sh + 1,
            ow: (wd + 2 * pw - kw) / sw + 1,
        }
    }

    /// 2-D convolution. `x [B, C, H, W]`, `w [O, C/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, opts: Conv2dOpts) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape().len(), 4, "conv2d input must be NCHW");
        let (bs, c) = (tx.dim(0), tx.dim(1));
        let o = tw.dim(0);
        let groups = opts.groups;
        assert_eq!(c % groups, 0);
        assert_eq!(o % groups, 0);
        let cg = c / groups;
        let og = o / groups;
        assert_eq!(tw.dim(1), cg, "conv2d weight expects {} input channels, got {}", tw.dim(1) * groups, c);
        let g = Self::conv_geom(tx.shape(), tw.shape(), &opts, cg);
        let (rows, ncols) = (g.rows(), g.cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; bs * o * ncols];
        let in_stride = c * g.h * g.w;
        for b in 0..bs {
            for gi in 0..groups {
                let xs = &tx.data()[b * in_stride + gi * cg * g.h * g.w..][..cg * g.h * g.w];
                im2col(xs, &g, &mut cols);
                let wg = &tw.data()[gi * og * rows..(gi + 1) * og * rows];
                let dst = &mut out[(b * o + gi * og) * ncols..(b * o + (gi + 1) * og) * ncols];
                gemm(og, rows, ncols, 1.0, wg, false, &cols, false, 0.0, dst);
            }
        }
        let t = Tensor::new(vec![bs, o, g.oh, g.ow], out);
        self.push(t, Op::Conv2d(x, w, opts))
    }

    /// Transposed convolution. `x [B, C, H, W]`, `w [C, O, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, opts: Conv2dOpts) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(opts.groups, 1, "grouped transposed convolution is not supported");
        let (bs, c, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        assert_eq!(tw.dim(0), c);
        let (o, kh, kw) = (tw.dim(1), tw.dim(2), tw.dim(3));
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        let oh = (h - 1) * sh + kh - 2 * ph;
        let ow = (wd - 1) * sw + kw - 2 * pw;
        // Output geometry seen as the input of the adjoint convolution.
        let g = ConvGeom { c: o, h: oh, w: ow, kh, kw, sh, sw, ph, pw, oh: h, ow: wd };
        debug_assert_eq!((oh + 2 * ph - kh) / sh + 1, h);
        let rows = g.rows();
        let mut cols = vec![0.0; rows * h * wd];
        let mut out = vec![0.0; bs * o * oh * ow];
        for b in 0..bs {
            let xb = &tx.data()[b * c * h * wd..(b + 1) * c * h * wd];
            gemm(rows, c, h * wd, 1.0, tw.data(), true, xb, false, 0.0, &mut cols);
            col2im(&cols, &g, &mut out[b * o * oh * ow..(b + 1) * o * oh * ow]);
        }
        self.push(Tensor::new(vec![bs, o, oh, ow], out), Op::ConvTranspose2d(x, w, opts))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    /// Hard clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(x, lo, hi))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x))
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x))
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let (outer, _, inner) = split_axis1(&first);
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let (o, a, i) = split_axis1(s);
            assert!(o == outer && i == inner && s[2..] == first[2..], "concat shape mismatch");
            total += a;
        }
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let a = t.dim(1);
            for o in 0..outer {
                let src = &t.data()[o * a * inner..(o + 1) * a * inner];
                out[(o * total + offset) * inner..(o * total + offset + a) * inner].copy_from_slice(src);
            }
            offset += a;
        }
        let mut shape = first;
        shape[1] = total;
        self.push(Tensor::new(shape, out), Op::Concat(parts.to_vec()))
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (outer, a, inner) = split_axis1(t.shape());
        assert!(start + len <= a, "narrow {start}+{len} out of {a}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * a + start) * inner..(o * a + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[1] = len;
        self.push(Tensor::new(shape, out), Op::Narrow(x, start))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x))
    }

    /// Top-left `h x w` crop of an NCHW tensor.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        let (bs, c, ih, iw) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        assert!(h <= ih && w <= iw);
        let mut out = Vec::with_capacity(bs * c * h * w);
        for p in 0..bs * c {
            for i in 0..h {
                out.extend_from_slice(&t.data()[(p * ih + i) * iw..(p * ih + i) * iw + w]);
            }
        }
        self.push(Tensor::new(vec![bs, c, h, w], out), Op::Crop2d(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (bs, c) = (t.dim(0), t.dim(1));
        let hw = t.dim(2) * t.dim(3);
        let out = (0..bs * c)
            .map(|p| t.data()[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::new(vec![bs, c], out), Op::GlobalAvgPool(x))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::SoftmaxLast(x))
    }

    /// Per-channel batch normalisation of an NCHW tensor.
    ///
    /// In training mode batch statistics are used and a running-statistic
    /// update is queued (see [`Graph::take_buffer_updates`]); otherwise the
    /// stored running mean/variance are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        train: bool,
    ) -> Var {
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let t = self.value(x);
        let (bs, c) = (t.dim(0), t.dim(1));
        let hw: usize = t.shape()[2..].iter().product();
        let n = (bs * hw) as f64;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..bs {
                    s += t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                mean[ch] = s / n;
                let mut q = 0.0;
                for b in 0..bs {
                    q += t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
                var[ch] = q / n;
            }
            (mean, var)
        } else {
            (store.get(running_mean).data().to_vec(), store.get(running_var).data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gv).data().to_vec();
        let be = self.value(bv).data().to_vec();
        let t = self.value(x);
        let mut xhat = t.clone();
        let mut out = t.clone();
        for b in 0..bs {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for (xh, o) in xhat.data_mut()[range.clone()]
                    .iter_mut()
                    .zip(&mut out.data_mut()[range])
                {
                    *xh = (*xh - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + be[ch];
                }
            }
        }
        if train {
            self.buffer_updates.push(BufferUpdate {
                mean_id: running_mean,
                var_id: running_var,
                batch_mean: mean,
                batch_var: var,
            });
        }
        self.push(
            out,
            Op::BatchNorm { x, gamma: gv, beta: bv, xhat, inv_std, train },
        )
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = Tensor::new(
                        gout.shape().to_vec(),
                        gout.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                    );
                    let gb = Tensor::new(
                        gout.shape().to_vec(),
                        gout.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                    );
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let (outer, ch, inner) = split_axis1(gout.shape());
                    let mut gb = vec![0.0; ch];
                    for o in 0..outer {
                        for (c, gbc) in gb.iter_mut().enumerate() {
                            let base = (o * ch + c) * inner;
                            *gbc += gout.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    acc(&mut grads, *b, Tensor::new(bshape, gb));
                    acc(&mut grads, *x, gout.clone());
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(&mut grads, *x, gout.map(|v| v * s));
                }
                Op::AddScalar(x) => acc(&mut grads, *x, gout.clone()),
                Op::Linear(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (b, i, o) = (tx.dim(0), tx.dim(1), tw.dim(0));
                    let mut gx = vec![0.0; b * i];
                    gemm(b, o, i, 1.0, gout.data(), false, tw.data(), false, 0.0, &mut gx);
                    let mut gw = vec![0.0; o * i];
                    gemm(o, b, i, 1.0, gout.data(), true, tx.data(), false, 0.0, &mut gw);
                    acc(&mut grads, *x, Tensor::new(vec![b, i], gx));
                    acc(&mut grads, *w, Tensor::new(vec![o, i], gw));
                }
                Op::Bmm(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (bs, m, k, n) = (ta.dim(0), ta.dim(1), ta.dim(2), tb.dim(2));
                    let mut ga = vec![0.0; bs * m * k];
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let go = &gout.data()[i * m * n..(i + 1) * m * n];
                        gemm(m, n, k, 1.0, go, false, &tb.data()[i * k * n..(i + 1) * k * n], true, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
                        gemm(k, m, n, 1.0, &ta.data()[i * m * k..(i + 1) * m * k], true, go, false, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                    acc(&mut grads, *a, Tensor::new(vec![bs, m, k], ga));
                    acc(&mut grads, *b, Tensor::new(vec![bs, k, n], gb));
                }
                Op::TransposeLast2(x) => {
                    let (bs, n, m) = (gout.dim(0), gout.dim(1), gout.dim(2));
                    let mut gx = vec![0.0; bs * m * n];
                    for b in 0..bs {
                        for j in 0..n {
                            for i in 0..m {
                                gx[(b * m + i) * n + j] = gout.data()[(b * n + j) * m + i];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(vec![bs, m, n], gx));
                }
                Op::Conv2d(x, w, opts) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (bs, c) = (tx.dim(0), tx.dim(1));
                    let o = tw.dim(0);
                    let groups = opts.groups;
                    let (cg, og) = (c / groups, o / groups);
                    let g = Self::conv_geom(tx.shape(), tw.shape(), opts, cg);
                    let (rows, ncols) = (g.rows(), g.cols());
                    let mut cols = vec![0.0; rows * ncols];
                    let mut dcols = vec![0.0; rows * ncols];
                    let mut gx = vec![0.0; tx.len()];
                    let mut gw = vec![0.0; tw.len()];
                    let in_plane = g.h * g.w;
                    for b in 0..bs {
                        for gi in 0..groups {
                            let xoff = (b * c + gi * cg) * in_plane;
                            im2col(&tx.data()[xoff..xoff + cg * in_plane], &g, &mut cols);
                            let go = &gout.data()[(b * o + gi * og) * ncols..(b * o + (gi + 1) * og) * ncols];
                            gemm(og, ncols, rows, 1.0, go, false, &cols, true, 1.0, &mut gw[gi * og * rows..(gi + 1) * og * rows]);
                            let wg = &tw.data()[gi * og * rows..(gi + 1) * og * rows];
                            gemm(rows, og, ncols, 1.0, wg, true, go, false, 0.0, &mut dcols);
                            col2im(&dcols, &g, &mut gx[xoff..xoff + cg * in_plane]);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), gx));
                    acc(&mut grads, *w, Tensor::new(tw.shape().to_vec(), gw));
                }
                Op::ConvTranspose2d(x, w, opts) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (bs, c, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
                    let (o, kh, kw) = (tw.dim(1), tw.dim(2), tw.dim(3));
                    let (oh, ow) = (gout.dim(2), gout.dim(3));
                    let g = ConvGeom {
                        c: o,
                        h: oh,
                        w: ow,
                        kh,
                        kw,
                        sh: opts.stride.0,
                        sw: opts.stride.1,
                        ph: opts.padding.0,
                        pw: opts.padding.1,
                        oh: h,
                        ow: wd,
                    };
                    let rows = g.rows();
                    let mut cols = vec![0.0; rows * h * wd];
                    let mut gx = vec![0.0; tx.len()];
                    let mut gw = vec![0.0; tw.len()];
                    for b in 0..bs {
                        im2col(&gout.data()[b * o * oh * ow..(b + 1) * o * oh * ow], &g, &mut cols);
                        let xb = &tx.data()[b * c * h * wd..(b + 1) * c * h * wd];
                        gemm(c, rows, h * wd, 1.0, tw.data(), false, &cols, false, 0.0, &mut gx[b * c * h * wd..(b + 1) * c * h * wd]);
                        gemm(c, h * wd, rows, 1.0, xb, false, &cols, true, 1.0, &mut gw);
                    }
                    acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), gx));
                    acc(&mut grads, *w, Tensor::new(tw.shape().to_vec(), gw));
                }
                Op::LeakyRelu(x, slope) => {
                    let tx = self.value(*x);
                    let g = gout
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), g));
                }
                Op::Sigmoid(x) => {
                    let g = gout
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(gout.shape().to_vec(), g));
                }
                Op::Tanh(x) => {
                    let g = gout
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &t)| g * (1.0 - t * t))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(gout.shape().to_vec(), g));
                }
                Op::Clamp(x, lo, hi) => {
                    let tx = self.value(*x);
                    let g = gout
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), g));
                }
                Op::Abs(x) => {
                    let tx = self.value(*x);
                    let g = gout
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), g));
                }
                Op::Square(x) => {
                    let tx = self.value(*x);
                    let g = gout.data().iter().zip(tx.data()).map(|(g, &v)| 2.0 * v * g).collect();
                    acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), g));
                }
                Op::Softplus(x) => {
                    let tx = self.value(*x);
                    let g = gout.data().iter().zip(tx.data()).map(|(g, &v)| g * sigmoid(v)).collect();
                    acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), g));
                }
                Op::Concat(parts) => {
                    let (outer, total, inner) = split_axis1(gout.shape());
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let a = shape[1];
                        let mut gp = Vec::with_capacity(outer * a * inner);
                        for o in 0..outer {
                            gp.extend_from_slice(
                                &gout.data()[(o * total + offset) * inner..(o * total + offset + a) * inner],
                            );
                        }
                        acc(&mut grads, p, Tensor::new(shape, gp));
                        offset += a;
                    }
                }
                Op::Narrow(x, start) => {
                    let shape = self.value(*x).shape().to_vec();
                    let (outer, a, inner) = split_axis1(&shape);
                    let len = gout.dim(1);
                    let mut gx = vec![0.0; outer * a * inner];
                    for o in 0..outer {
                        gx[(o * a + start) * inner..(o * a + start + len) * inner]
                            .copy_from_slice(&gout.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(&mut grads, *x, Tensor::new(shape, gx));
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, gout.clone().reshape(&shape));
                }
                Op::Crop2d(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let (ih, iw) = (shape[2], shape[3]);
                    let (h, w) = (gout.dim(2), gout.dim(3));
                    let mut gx = vec![0.0; shape.iter().product()];
                    for p in 0..shape[0] * shape[1] {
                        for i in 0..h {
                            gx[(p * ih + i) * iw..(p * ih + i) * iw + w]
                                .copy_from_slice(&gout.data()[(p * h + i) * w..(p * h + i + 1) * w]);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(shape, gx));
                }
                Op::SumAll(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::full(&shape, gout.item()));
                }
                Op::MeanAll(x) => {
                    let t = self.value(*x);
                    let g = gout.item() / t.len() as f64;
                    acc(&mut grads, *x, Tensor::full(t.shape(), g));
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let hw = shape[2] * shape[3];
                    let mut gx = vec![0.0; shape.iter().product()];
                    for (p, g) in gout.data().iter().enumerate() {
                        for v in &mut gx[p * hw..(p + 1) * hw] {
                            *v = g / hw as f64;
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(shape, gx));
                }
                Op::SoftmaxLast(x) => {
                    let n = *gout.shape().last().unwrap();
                    let mut gx = vec![0.0; gout.len()];
                    for ((gr, yr), dst) in gout
                        .data()
                        .chunks(n)
                        .zip(node.value.data().chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = y * (g - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(gout.shape().to_vec(), gx));
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let shape = xhat.shape().to_vec();
                    let (bs, c) = (shape[0], shape[1]);
                    let hw: usize = shape[2..].iter().product();
                    let n = (bs * hw) as f64;
                    let gam = self.value(*gamma).data().to_vec();
                    let mut ggam = vec![0.0; c];
                    let mut gbet = vec![0.0; c];
                    let mut gx = vec![0.0; xhat.len()];
                    for ch in 0..c {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for b in 0..bs {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for (dy, xh) in gout.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                                sum_dy += dy;
                                sum_dy_xhat += dy * xh;
                            }
                        }
                        ggam[ch] = sum_dy_xhat;
                        gbet[ch] = sum_dy;
                        for b in 0..bs {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for ((d, dy), xh) in gx[r.clone()]
                                .iter_mut()
                                .zip(&gout.data()[r.clone()])
                                .zip(&xhat.data()[r])
                            {
                                *d = if *train {
                                    gam[ch] * inv_std[ch] * (dy - sum_dy / n - xh * sum_dy_xhat / n)
                                } else {
                                    gam[ch] * inv_std[ch] * dy
                                };
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(shape, gx));
                    acc(&mut grads, *gamma, Tensor::new(vec![c], ggam));
                    acc(&mut grads, *beta, Tensor::new(vec![c], gbet));
                }
            }
            grads[idx] = Some(gout);
        }

        let mut params = BTreeMap::new();
        let mut scoped: BTreeMap<usize, BTreeMap<ParamId, Tensor>> = BTreeMap::new();
        for (&(scope, pid), &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                if scope == 0 {
                    params.insert(pid, g.clone());
                } else {
                    scoped.entry(scope).or_default().insert(pid, g.clone());
                }
            }
        }
        Grads {
            nodes: grads,
            params,
            scoped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(f(x) * probe))/dx.
    fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let build = |ins: &[Tensor], probe: &Option<Tensor>| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            let shape = g.shape(out).to_vec();
            let p = probe.clone().unwrap_or_else(|| Tensor::full(&shape, 1.0));
            let pv = g.input(p);
            let m = g.mul(out, pv);
            let loss = g.sum_all(m);
            (g, vars, loss)
        };
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.shape(out).to_vec()
        };
        // Random probe so the check is not degenerate.
        let probe = Some(rand_tensor(&out_shape, &mut rng));
        let (g, vars, loss) = build(&inputs, &probe);
        let grads = g.backward(loss);
        let eps = 1e-6;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inp.shape()));
            for i in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= eps;
                let (gp, _, lp) = build(&plus, &probe);
                let (gm, _, lm) = build(&minus, &probe);
                let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
                let a = analytic.data()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() < 1e-8 || (a - numeric).abs() / denom < 1e-5,
                    "input {k} elem {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv2d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 5, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        check_grad(vec![x, w], |g, v| g.conv2d(v[0], v[1], Conv2dOpts::new(2, 1)));
    }

    #[test]
    fn grouped_conv2d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 4, 5, 5], &mut rng);
        let w = rand_tensor(&[4, 1, 3, 3], &mut rng);
        let opts = Conv2dOpts { stride: (1, 1), padding: (1, 1), groups: 4 };
        check_grad(vec![x, w], move |g, v| g.conv2d(v[0], v[1], opts));
    }

    #[test]
    fn conv_transpose2d_grad_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 3, 3, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv_transpose2d(xv, wv, Conv2dOpts::new(2, 1));
        assert_eq!(g.shape(y), &[2, 2, 6, 8]);
        check_grad(vec![x, w], |g, v| g.conv_transpose2d(v[0], v[1], Conv2dOpts::new(2, 1)));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for shared weights.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let cx = g.conv2d(xv, wv, Conv2dOpts::new(2, 1));
        let y = rand_tensor(g.shape(cx), &mut rng);
        let yv = g.input(y.clone());
        let ty = g.conv_transpose2d(yv, wv, Conv2dOpts::new(2, 1));
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let b = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        check_grad(vec![a, b, bias], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let t = g.tanh(s);
            let l = g.leaky_relu(t, 0.1);
            let sg = g.sigmoid(l);
            let sp = g.softplus(sg);
            let sq = g.square(sp);
            let ab = g.add_bias(sq, v[2]);
            let c = g.concat(&[ab, v[0]]);
            let n = g.narrow(c, 2, 3);
            let cr = g.crop2d(n, 1, 2);
            g.global_avg_pool(cr)
        });
    }

    #[test]
    fn linear_bmm_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[5, 4], &mut rng);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 4, 3], &mut rng);
        check_grad(vec![x, w, a, b], |g, v| {
            let l = g.linear(v[0], v[1]);
            let r = g.reshape(l, &[3, 5]);
            let mm = g.bmm(v[2], v[3]);
            let tr = g.transpose_last2(mm);
            let sm = g.softmax_last(tr);
            let sq = g.square(sm);
            let s1 = g.mean_all(sq);
            let s2 = g.sum_all(r);
            let s = g.add(s1, s2);
            g.scale(s, 0.5)
        });
    }

    #[test]
    fn batch_norm_train_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let mut store = ParamStore::new();
        let gamma = store.add("g", rand_tensor(&[3], &mut rng));
        let beta = store.add("b", rand_tensor(&[3], &mut rng));
        let rm = store.add_buffer("rm", Tensor::zeros(&[3]));
        let rv = store.add_buffer("rv", Tensor::full(&[3], 1.0));
        check_grad(vec![x], |g, v| g.batch_norm(&store, v[0], gamma, beta, rm, rv, 1e-5, true));
    }
}
