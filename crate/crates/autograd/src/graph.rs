use crate::conv::{col2im_add, im2col, ConvGeom};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Ln(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    LogSigmoid(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    UpsampleNearest(Var, usize),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Option<Vec<T>> },
    L2NormalizeRows(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of tensor operations, differentiable by [`Graph::backward`].
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if no gradient reached it.
    pub fn take_or_zeros(&mut self, v: Var, like: &[usize]) -> Tensor<T> {
        self.grads.get_mut(v.0).and_then(|g| g.take()).unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn inner_size(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` as a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// `ln σ(a)`, evaluated without forming `σ(a)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::LogSigmoid(a), rg)
    }

    /// Elementwise clamp; the gradient passes only where `lo <= a <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::from_f64(t.numel() as f64));
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Concatenation along axis 1 (channels for NCHW, features for `[N, D]`).
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let inner = inner_size(&first);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == first.len() && s[0] == n && inner_size(s) == inner, "concat shape mismatch");
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), rg)
    }

    /// Channels `[start, start+len)` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[1], "slice [{start}, {}) out of {} channels", start + len, s[1]);
        let inner = inner_size(&s);
        let t = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, data), Op::Slice { x, start }, rg)
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        if factor == 1 {
            return x;
        }
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for (iy, row) in plane.chunks_exact(w).enumerate() {
                let first = &mut out[iy * factor * ow..(iy * factor + 1) * ow];
                for (chunk, &v) in first.chunks_exact_mut(factor).zip(row) {
                    chunk.fill(v);
                }
                for r in 1..factor {
                    out.copy_within(iy * factor * ow..(iy * factor + 1) * ow, (iy * factor + r) * ow);
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, oh, ow], data), Op::UpsampleNearest(x, factor), rg)
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let src = self.value(x).data();
        let data = (0..n * c).map(|p| src[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c], data), Op::GlobalAvgPool(x), rg)
    }

    /// `x · wᵀ + b` with `x: [N, D_in]`, `w: [D_out, D_in]`, `b: [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).dims2();
        let (dout, din2) = self.value(w).dims2();
        assert_eq!(din, din2, "linear: input width {din} vs weight width {din2}");
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), &[dout], "linear bias shape");
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), n, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            &mut out,
            T::one(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// 2D cross-correlation with zero padding.
    ///
    /// `x: [N, C_in, H, W]`, `w: [C_out, C_in, kh, kw]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let (c_out, c_in2, kh, kw) = self.value(w).dims4();
        assert_eq!(c_in, c_in2, "conv2d: input has {c_in} channels, weight expects {c_in2}");
        assert!(stride >= 1 && h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let geom = ConvGeom { c_in, h, w: wd, kh, kw, stride, pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * c_out * p];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), c_out, "conv2d bias length");
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                chunk.fill(bias[i % c_out]);
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let keep_cols = self.rg(w) && !geom.is_pointwise();
        let mut cols = if keep_cols { Some(vec![T::zero(); n * k * p]) } else { None };
        let mut scratch = if geom.is_pointwise() || keep_cols { Vec::new() } else { vec![T::zero(); k * p] };
        for bi in 0..n {
            let xb = &xs[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
            let col: &[T] = if geom.is_pointwise() {
                xb
            } else if let Some(cols) = cols.as_mut() {
                let dst = &mut cols[bi * k * p..(bi + 1) * k * p];
                im2col(&geom, xb, dst);
                dst
            } else {
                im2col(&geom, xb, &mut scratch);
                &scratch
            };
            gemm(
                MatRef::new(ws, c_out, k),
                MatRef::new(col, k, p),
                &mut out[bi * c_out * p..(bi + 1) * c_out * p],
                T::one(),
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, c_out, oh, ow], out), Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Each row of `[N, D]` divided by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * d);
        for row in src.chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            data.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, d], data), Op::L2NormalizeRows(x), rg)
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(labels.len(), n, "one label per row");
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &label) in src.chunks(k).zip(labels) {
            assert!(label < k, "label {label} out of {k} classes");
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            loss += z.ln() + m - row[label];
            probs.extend(row.iter().map(|&v| (v - m).exp() / z));
        }
        let v = Tensor::scalar(loss / T::from_f64(n as f64));
        let rg = self.rg(logits);
        self.push(v, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).numel(), 1, "backward from a non-scalar");
        if !self.rg(root) {
            return Grads { grads };
        }
        grads[root.0] = Some(Tensor::new(self.shape(root), vec![T::one()]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gv, x| two * x * gv));
            }
            Op::Ln(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * s }));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::LogSigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * sigmoid(-x)));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gv, x| if x >= lo && x <= hi { gv } else { T::zero() }),
                );
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g.item() / T::from_f64(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Concat(parts) => {
                let shape = y.shape();
                let (n, total_c, inner) = (shape[0], shape[1], inner_size(shape));
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let base = (b * total_c + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + c * inner]);
                        }
                        let gp = Tensor::new(self.shape(p), data);
                        self.accumulate(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let (start, len) = (*start, y.shape()[1]);
                let full_c = self.shape(*x)[1];
                let inner = inner_size(y.shape());
                self.accumulate_with(grads, *x, |acc| {
                    let n = y.shape()[0];
                    for b in 0..n {
                        let dst = &mut acc.data_mut()[(b * full_c + start) * inner..(b * full_c + start + len) * inner];
                        let src = &g.data()[b * len * inner..(b + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::UpsampleNearest(x, f) => {
                let f = *f;
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h * f, w * f);
                self.accumulate_with(grads, *x, |acc| {
                    let dst = acc.data_mut();
                    for p in 0..n * c {
                        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        let plane = &mut dst[p * h * w..(p + 1) * h * w];
                        for (oy, line) in src.chunks_exact(ow).enumerate() {
                            let row = &mut plane[(oy / f) * w..(oy / f + 1) * w];
                            for (r, chunk) in row.iter_mut().zip(line.chunks_exact(f)) {
                                *r += chunk.iter().copied().sum::<T>();
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                let data = (0..n * c * hw).map(|i| g.data()[i / hw] * inv).collect();
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], data));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let dout = y.shape()[1];
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); n * din];
                    gemm(MatRef::new(g.data(), n, dout), MatRef::new(self.value(*w).data(), dout, din), &mut gx, T::zero());
                    self.accumulate(grads, *x, Tensor::new(&[n, din], gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(
                        MatRef::new(g.data(), n, dout).t(),
                        MatRef::new(self.value(*x).data(), n, din),
                        &mut gw,
                        T::zero(),
                    );
                    self.accumulate(grads, *w, Tensor::new(&[dout, din], gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[dout], gb));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => self.backprop_conv(*x, *w, *b, geom, cols.as_deref(), g, grads),
            Op::L2NormalizeRows(x) => {
                let (n, d) = y.dims2();
                let xs = self.value(*x).data();
                let mut gx = Vec::with_capacity(n * d);
                for r in 0..n {
                    let xr = &xs[r * d..(r + 1) * d];
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                }
                self.accumulate(grads, *x, Tensor::new(&[n, d], gx));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (n, k) = self.value(*logits).dims2();
                let scale = g.item() / T::from_f64(n as f64);
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    gl[r * k + label] -= T::one();
                }
                for v in &mut gl {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&[n, k], gl));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: Option<&[T]>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c_out, _, _) = g.dims4();
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.c_in * geom.h * geom.w;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![T::zero(); c_out];
                for (i, chunk) in g.data().chunks(p).enumerate() {
                    gb[i % c_out] += chunk.iter().copied().sum::<T>();
                }
                self.accumulate(grads, b, Tensor::new(&[c_out], gb));
            }
        }
        if self.rg(w) {
            let mut gw = vec![T::zero(); c_out * k];
            let mut scratch = Vec::new();
            for bi in 0..n {
                let col: &[T] = if geom.is_pointwise() {
                    &xs[bi * in_size..(bi + 1) * in_size]
                } else if let Some(cols) = cols {
                    &cols[bi * k * p..(bi + 1) * k * p]
                } else {
                    scratch.resize(k * p, T::zero());
                    im2col(geom, &xs[bi * in_size..(bi + 1) * in_size], &mut scratch);
                    &scratch
                };
                gemm(
                    MatRef::new(&g.data()[bi * c_out * p..(bi + 1) * c_out * p], c_out, p),
                    MatRef::new(col, k, p).t(),
                    &mut gw,
                    T::one(),
                );
            }
            let shape = self.shape(w).to_vec();
            self.accumulate(grads, w, Tensor::new(&shape, gw));
        }
        if self.rg(x) {
            let shape = self.shape(x).to_vec();
            let mut gx = vec![T::zero(); n * in_size];
            let mut gcol = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
            for bi in 0..n {
                let gout = MatRef::new(&g.data()[bi * c_out * p..(bi + 1) * c_out * p], c_out, p);
                let wt = MatRef::new(ws, c_out, k).t();
                if geom.is_pointwise() {
                    gemm(wt, gout, &mut gx[bi * in_size..(bi + 1) * in_size], T::zero());
                } else {
                    gemm(wt, gout, &mut gcol, T::zero());
                    col2im_add(geom, &gcol, &mut gx[bi * in_size..(bi + 1) * in_size]);
                }
            }
            self.accumulate(grads, x, Tensor::new(&shape, gx));
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    // min(x, 0) - ln(1 + e^{-|x|})
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}
