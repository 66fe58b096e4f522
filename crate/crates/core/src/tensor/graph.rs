//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! evaluate eagerly and record just enough structure to run `backward` from a
//! scalar loss. Graphs are cheap to build and are discarded after each
//! training step; parameters live outside the graph in a `ModelParams` map.

use super::{broadcast_zip, reduce_to_shape, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Boundary handling for 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output spatial size equals input. Stride must be (1,1)
    /// and kernel sides odd.
    Same,
    /// No padding, output size floor((n-k)/stride)+1.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        k: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        padding: Padding,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Softmax {
        x: VarId,
        axis: usize,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        c: f64,
    },
    MeanAxes {
        x: VarId,
        axes: Vec<usize>,
    },
    Reshape {
        x: VarId,
    },
    Concat {
        parts: Vec<VarId>,
        axis: usize,
    },
    Narrow {
        x: VarId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Bce {
        pred: VarId,
        target: VarId,
    },
    Sum {
        x: VarId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op,
    requires: bool,
}

/// One forward computation with its recorded tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

const BCE_EPS: f64 = 1e-7;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires: bool) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires,
        });
        VarId(self.nodes.len() - 1)
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id.0].requires
    }

    /// Tracked input: gradients will be computed for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input (data, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call, if the node is tracked.
    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    // ---- operations -----------------------------------------------------

    /// 2-D cross-correlation. `x` is [H, W, Cin], `k` is [Kh, Kw, Cin, Cout],
    /// optional bias [Cout].
    pub fn conv2d(
        &mut self,
        x: VarId,
        k: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        padding: Padding,
    ) -> VarId {
        let value = conv2d_forward(
            self.value(x),
            self.value(k),
            b.map(|b| self.value(b)),
            stride,
            padding,
        );
        let requires = self.requires(x)
            || self.requires(k)
            || b.map(|b| self.requires(b)).unwrap_or(false);
        self.push(
            value,
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
            requires,
        )
    }

    /// 1-D cross-correlation along the first axis. `x` is [L, Cin], `k` is
    /// [K, Cin, Cout] with K odd, optional bias [Cout]. "Same" zero padding.
    pub fn conv1d(&mut self, x: VarId, k: VarId, b: Option<VarId>) -> VarId {
        let (l, cin) = {
            let d = self.value(x).dims();
            assert_eq!(d.len(), 2, "conv1d input must be [L, Cin], got {:?}", d);
            (d[0], d[1])
        };
        let kd = self.value(k).dims().to_vec();
        assert_eq!(kd.len(), 3, "conv1d kernel must be [K, Cin, Cout], got {:?}", kd);
        let x2 = self.reshape(x, &[l, 1, cin]);
        let k2 = self.reshape(k, &[kd[0], 1, kd[1], kd[2]]);
        let y = self.conv2d(x2, k2, b, (1, 1), Padding::Same);
        self.reshape(y, &[l, kd[2]])
    }

    /// Fully connected layer: `x` is [Cin], `w` is [Cin, Cout], `b` is [Cout].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(xv.dims().len(), 1, "linear input must be a vector");
        assert_eq!(wv.dims().len(), 2, "linear weight must be a matrix");
        let (cin, cout) = (wv.dims()[0], wv.dims()[1]);
        assert_eq!(xv.dims()[0], cin, "linear shape mismatch: x {:?} vs w {:?}", xv.dims(), wv.dims());
        assert_eq!(bv.dims(), &[cout], "linear bias shape mismatch");
        let mut out = vec![T::zero(); cout];
        for i in 0..cin {
            let xi = xv.data()[i];
            let row = &wv.data()[i * cout..(i + 1) * cout];
            for (o, &wv_) in out.iter_mut().zip(row) {
                *o = *o + xi * wv_;
            }
        }
        for (o, &bv_) in out.iter_mut().zip(bv.data()) {
            *o = *o + bv_;
        }
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(Tensor::new(vec![cout], out), Op::Linear { x, w, b }, requires)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let requires = self.requires(x);
        self.push(value, Op::Relu { x }, requires)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let requires = self.requires(x);
        self.push(value, Op::Sigmoid { x }, requires)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> VarId {
        let xv = self.value(x);
        assert!(axis < xv.dims().len(), "softmax axis {} out of range for {:?}", axis, xv.dims());
        let value = softmax_forward(xv, axis);
        let requires = self.requires(x);
        self.push(value, Op::Softmax { x, axis }, requires)
    }

    /// Elementwise addition with broadcasting.
    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let requires = self.requires(a) || self.requires(b);
        self.push(value, Op::Add { a, b }, requires)
    }

    /// Elementwise multiplication with broadcasting.
    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let requires = self.requires(a) || self.requires(b);
        self.push(value, Op::Mul { a, b }, requires)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let cc = T::from_f64(c);
        let value = self.value(x).map(|v| v * cc);
        let requires = self.requires(x);
        self.push(value, Op::Scale { x, c }, requires)
    }

    /// Mean over the given axes; reduced axes are removed from the shape.
    pub fn mean_axes(&mut self, x: VarId, axes: &[usize]) -> VarId {
        let xv = self.value(x);
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        assert!(
            axes.iter().all(|&a| a < xv.dims().len()),
            "mean axis out of range for {:?}",
            xv.dims()
        );
        let value = mean_axes_forward(xv, &axes);
        let requires = self.requires(x);
        self.push(value, Op::MeanAxes { x, axes }, requires)
    }

    /// Mean over the time axis of an [F, T, C] map, yielding [F, C].
    pub fn row_avg_pool(&mut self, x: VarId) -> VarId {
        assert_eq!(self.value(x).dims().len(), 3, "row_avg_pool expects [F, T, C]");
        self.mean_axes(x, &[1])
    }

    /// Mean over the frequency axis of an [F, T, C] map, yielding [T, C].
    pub fn col_avg_pool(&mut self, x: VarId) -> VarId {
        assert_eq!(self.value(x).dims().len(), 3, "col_avg_pool expects [F, T, C]");
        self.mean_axes(x, &[0])
    }

    /// Mean over both spatial axes of an [F, T, C] map, yielding [C].
    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        assert_eq!(self.value(x).dims().len(), 3, "global_avg_pool expects [F, T, C]");
        self.mean_axes(x, &[0, 1])
    }

    pub fn reshape(&mut self, x: VarId, dims: &[usize]) -> VarId {
        let value = self.value(x).reshape(dims);
        let requires = self.requires(x);
        self.push(value, Op::Reshape { x }, requires)
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> VarId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.value(parts[0]).dims().to_vec();
        assert!(axis < first.len(), "concat axis out of range");
        let mut axis_len = 0;
        for &p in parts {
            let d = self.value(p).dims();
            assert_eq!(d.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in d.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch: {:?} vs {:?}", d, first);
            }
            axis_len += d[axis];
        }
        let mut out_dims = first.clone();
        out_dims[axis] = axis_len;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_dims.iter().product()];
        let out_row = axis_len * inner;
        let mut base = 0;
        for &p in parts {
            let d = self.value(p).dims()[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = o * out_row + base;
                data[dst..dst + d * inner]
                    .copy_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
            base += d * inner;
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        self.push(
            Tensor::new(out_dims, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            requires,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> VarId {
        let xd = self.value(x).dims().to_vec();
        assert!(axis < xd.len(), "narrow axis out of range");
        assert!(start + len <= xd[axis], "narrow range out of bounds");
        let outer: usize = xd[..axis].iter().product();
        let inner: usize = xd[axis + 1..].iter().product();
        let mut out_dims = xd.clone();
        out_dims[axis] = len;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let s = (o * xd[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[s..s + len * inner]);
        }
        let requires = self.requires(x);
        self.push(
            Tensor::new(out_dims, data),
            Op::Narrow { x, axis, start, len },
            requires,
        )
    }

    /// Mean binary cross entropy with predictions clamped to
    /// [1e-7, 1 - 1e-7]. Targets are not differentiated.
    pub fn bce_loss(&mut self, pred: VarId, target: VarId) -> VarId {
        let pv = self.value(pred);
        let tv = self.value(target);
        assert_eq!(pv.dims(), tv.dims(), "bce shape mismatch: {:?} vs {:?}", pv.dims(), tv.dims());
        let eps = T::from_f64(BCE_EPS);
        let one = T::one();
        let n = T::from_f64(pv.numel() as f64);
        let mut acc = T::zero();
        for (&p, &t) in pv.data().iter().zip(tv.data()) {
            let p = p.max(eps).min(one - eps);
            acc = acc - (t * p.ln() + (one - t) * (one - p).ln());
        }
        let requires = self.requires(pred);
        self.push(Tensor::scalar(acc / n), Op::Bce { pred, target }, requires)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let requires = self.requires(x);
        self.push(Tensor::scalar(acc), Op::Sum { x }, requires)
    }

    // ---- backward -------------------------------------------------------

    /// Populate gradients of every tracked node with d(loss)/d(node).
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss node"
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(
            &self.nodes[loss.0].value.dims().to_vec(),
            T::one(),
        ));
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone().unwrap();
            match op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    k,
                    b,
                    stride,
                    padding,
                } => {
                    let (dx, dk, db) = conv2d_backward(
                        self.value(x),
                        self.value(k),
                        &g,
                        stride,
                        padding,
                        self.requires(x),
                        self.requires(k),
                    );
                    if let Some(dx) = dx {
                        self.accumulate(x, dx);
                    }
                    if let Some(dk) = dk {
                        self.accumulate(k, dk);
                    }
                    if let Some(b) = b {
                        if self.requires(b) {
                            self.accumulate(b, db);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (cin, cout) = {
                        let d = self.value(w).dims();
                        (d[0], d[1])
                    };
                    if self.requires(x) {
                        let wv = self.value(w);
                        let mut dx = vec![T::zero(); cin];
                        for i2 in 0..cin {
                            let row = &wv.data()[i2 * cout..(i2 + 1) * cout];
                            let mut acc = T::zero();
                            for (&wv_, &gv) in row.iter().zip(g.data()) {
                                acc = acc + wv_ * gv;
                            }
                            dx[i2] = acc;
                        }
                        self.accumulate(x, Tensor::new(vec![cin], dx));
                    }
                    if self.requires(w) {
                        let xv = self.value(x);
                        let mut dw = vec![T::zero(); cin * cout];
                        for i2 in 0..cin {
                            let xi = xv.data()[i2];
                            let row = &mut dw[i2 * cout..(i2 + 1) * cout];
                            for (d, &gv) in row.iter_mut().zip(g.data()) {
                                *d = xi * gv;
                            }
                        }
                        self.accumulate(w, Tensor::new(vec![cin, cout], dw));
                    }
                    if self.requires(b) {
                        self.accumulate(b, g.clone());
                    }
                }
                Op::Relu { x } => {
                    if self.requires(x) {
                        let xv = self.value(x);
                        let data = xv
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                            .collect();
                        self.accumulate(x, Tensor::new(xv.dims().to_vec(), data));
                    }
                }
                Op::Sigmoid { x } => {
                    if self.requires(x) {
                        let yv = &self.nodes[i].value;
                        let data = yv
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&y, &gv)| gv * y * (T::one() - y))
                            .collect();
                        let dims = yv.dims().to_vec();
                        self.accumulate(x, Tensor::new(dims, data));
                    }
                }
                Op::Softmax { x, axis } => {
                    if self.requires(x) {
                        let dx = softmax_backward(&self.nodes[i].value, &g, axis);
                        self.accumulate(x, dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(a) {
                        let da = reduce_to_shape(&g, &self.value(a).dims().to_vec());
                        self.accumulate(a, da);
                    }
                    if self.requires(b) {
                        let db = reduce_to_shape(&g, &self.value(b).dims().to_vec());
                        self.accumulate(b, db);
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let prod = broadcast_zip(&g, self.value(b), |x, y| x * y);
                        let da = reduce_to_shape(&prod, &self.value(a).dims().to_vec());
                        self.accumulate(a, da);
                    }
                    if self.requires(b) {
                        let prod = broadcast_zip(&g, self.value(a), |x, y| x * y);
                        let db = reduce_to_shape(&prod, &self.value(b).dims().to_vec());
                        self.accumulate(b, db);
                    }
                }
                Op::Scale { x, c } => {
                    if self.requires(x) {
                        let cc = T::from_f64(c);
                        self.accumulate(x, g.map(|v| v * cc));
                    }
                }
                Op::MeanAxes { x, axes } => {
                    if self.requires(x) {
                        let dx = mean_axes_backward(self.value(x).dims(), &axes, &g);
                        self.accumulate(x, dx);
                    }
                }
                Op::Reshape { x } => {
                    if self.requires(x) {
                        let dims = self.value(x).dims().to_vec();
                        self.accumulate(x, g.reshape(&dims));
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_dims = self.nodes[i].value.dims().to_vec();
                    let outer: usize = out_dims[..axis].iter().product();
                    let inner: usize = out_dims[axis + 1..].iter().product();
                    let out_row = out_dims[axis] * inner;
                    let mut base = 0;
                    for &p in &parts {
                        let d = self.value(p).dims()[axis];
                        if self.requires(p) {
                            let mut dp = vec![T::zero(); outer * d * inner];
                            for o in 0..outer {
                                let s = o * out_row + base;
                                dp[o * d * inner..(o + 1) * d * inner]
                                    .copy_from_slice(&g.data()[s..s + d * inner]);
                            }
                            let mut dims = out_dims.clone();
                            dims[axis] = d;
                            self.accumulate(p, Tensor::new(dims, dp));
                        }
                        base += d * inner;
                    }
                }
                Op::Narrow { x, axis, start, len } => {
                    if self.requires(x) {
                        let xd = self.value(x).dims().to_vec();
                        let outer: usize = xd[..axis].iter().product();
                        let inner: usize = xd[axis + 1..].iter().product();
                        let mut dx = Tensor::zeros(&xd);
                        for o in 0..outer {
                            let dst = (o * xd[axis] + start) * inner;
                            dx.data_mut()[dst..dst + len * inner]
                                .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::Bce { pred, target } => {
                    if self.requires(pred) {
                        let pv = self.value(pred);
                        let tv = self.value(target);
                        let eps = T::from_f64(BCE_EPS);
                        let one = T::one();
                        let n = T::from_f64(pv.numel() as f64);
                        let gs = g.item();
                        let data = pv
                            .data()
                            .iter()
                            .zip(tv.data())
                            .map(|(&p, &t)| {
                                if p < eps || p > one - eps {
                                    // clamped region: flat
                                    T::zero()
                                } else {
                                    gs * (-t / p + (one - t) / (one - p)) / n
                                }
                            })
                            .collect();
                        let dims = pv.dims().to_vec();
                        self.accumulate(pred, Tensor::new(dims, data));
                    }
                }
                Op::Sum { x } => {
                    if self.requires(x) {
                        let gs = g.item();
                        let dims = self.value(x).dims().to_vec();
                        self.accumulate(x, Tensor::full(&dims, gs));
                    }
                }
            }
        }
    }

    fn accumulate(&mut self, id: VarId, delta: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.dims(), delta.dims());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            None => node.grad = Some(delta),
        }
    }
}

// ---- op kernels ---------------------------------------------------------

fn conv2d_out_shape(
    x: &[usize],
    k: &[usize],
    stride: (usize, usize),
    padding: Padding,
) -> (usize, usize, usize, usize) {
    assert_eq!(x.len(), 3, "conv2d input must be [H, W, Cin], got {:?}", x);
    assert_eq!(k.len(), 4, "conv2d kernel must be [Kh, Kw, Cin, Cout], got {:?}", k);
    assert_eq!(x[2], k[2], "conv2d channel mismatch: input {:?} kernel {:?}", x, k);
    let (kh, kw) = (k[0], k[1]);
    match padding {
        Padding::Same => {
            assert_eq!(stride, (1, 1), "same padding requires stride (1,1)");
            assert!(kh % 2 == 1 && kw % 2 == 1, "same padding requires odd kernel");
            (x[0], x[1], (kh - 1) / 2, (kw - 1) / 2)
        }
        Padding::Valid => {
            assert!(
                kh <= x[0] && kw <= x[1],
                "kernel {:?} larger than input {:?}",
                k,
                x
            );
            (
                (x[0] - kh) / stride.0 + 1,
                (x[1] - kw) / stride.1 + 1,
                0,
                0,
            )
        }
    }
}

/// First and one-past-last output indices o with
/// 0 <= o*stride + k_off - pad < n_in.
fn valid_range(n_out: usize, stride: usize, k_off: usize, pad: usize, n_in: usize) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let top = n_in + pad;
    if top <= k_off {
        return (0, 0);
    }
    let hi = ((top - k_off - 1) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

/// Convolutions are decomposed per kernel offset: for each (khi, kwi) the
/// contribution is a [Cin, Cout] matrix product applied along each valid
/// output row, which keeps the working set small and needs no patch
/// matrices. Zero padding falls out of the valid-range clipping.
fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Tensor<T> {
    let (h, w, cin) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (kh, kw, cout) = (k.dims()[0], k.dims()[1], k.dims()[3]);
    let (oh_n, ow_n, ph, pw) = conv2d_out_shape(x.dims(), k.dims(), stride, padding);
    if let Some(b) = b {
        assert_eq!(b.dims(), &[cout], "conv2d bias shape mismatch");
    }
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); oh_n * ow_n * cout];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    for khi in 0..kh {
        let (oh_lo, oh_hi) = valid_range(oh_n, stride.0, khi, ph, h);
        for kwi in 0..kw {
            let (ow_lo, ow_hi) = valid_range(ow_n, stride.1, kwi, pw, w);
            if ow_lo >= ow_hi {
                continue;
            }
            let kslice = &kd[(khi * kw + kwi) * cin * cout..][..cin * cout];
            for oh in oh_lo..oh_hi {
                let ih = oh * stride.0 + khi - ph;
                let iw0 = ow_lo * stride.1 + kwi - pw;
                crate::tensor::gemm_acc_nn(
                    ow_hi - ow_lo,
                    cin,
                    cout,
                    &xd[(ih * w + iw0) * cin..],
                    stride.1 * cin,
                    kslice,
                    &mut out[(oh * ow_n + ow_lo) * cout..],
                    cout,
                );
            }
        }
    }
    Tensor::new(vec![oh_n, ow_n, cout], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (h, w, cin) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (kh, kw, cout) = (k.dims()[0], k.dims()[1], k.dims()[3]);
    let (oh_n, ow_n, ph, pw) = conv2d_out_shape(x.dims(), k.dims(), stride, padding);
    debug_assert_eq!(g.dims(), &[oh_n, ow_n, cout]);
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut db = vec![T::zero(); cout];
    for grow in gd.chunks_exact(cout) {
        for (d, &gv) in db.iter_mut().zip(grow) {
            *d = *d + gv;
        }
    }
    let mut dx = if need_dx { vec![T::zero(); h * w * cin] } else { Vec::new() };
    let mut dk = if need_dk { vec![T::zero(); kh * kw * cin * cout] } else { Vec::new() };
    let mut kt = vec![T::zero(); cout * cin];
    for khi in 0..kh {
        let (oh_lo, oh_hi) = valid_range(oh_n, stride.0, khi, ph, h);
        for kwi in 0..kw {
            let (ow_lo, ow_hi) = valid_range(ow_n, stride.1, kwi, pw, w);
            if ow_lo >= ow_hi {
                continue;
            }
            let kslice = &kd[(khi * kw + kwi) * cin * cout..][..cin * cout];
            if need_dx {
                // dX gets G · K(offset)^T; transpose the tiny kernel slab once
                for ci in 0..cin {
                    for co in 0..cout {
                        kt[co * cin + ci] = kslice[ci * cout + co];
                    }
                }
            }
            for oh in oh_lo..oh_hi {
                let ih = oh * stride.0 + khi - ph;
                let iw0 = ow_lo * stride.1 + kwi - pw;
                let grow = &gd[(oh * ow_n + ow_lo) * cout..];
                if need_dk {
                    crate::tensor::gemm_acc_tn(
                        cin,
                        ow_hi - ow_lo,
                        cout,
                        &xd[(ih * w + iw0) * cin..],
                        stride.1 * cin,
                        grow,
                        cout,
                        &mut dk[(khi * kw + kwi) * cin * cout..][..cin * cout],
                    );
                }
                if need_dx {
                    crate::tensor::gemm_acc_nn(
                        ow_hi - ow_lo,
                        cout,
                        cin,
                        grow,
                        cout,
                        &kt,
                        &mut dx[(ih * w + iw0) * cin..],
                        stride.1 * cin,
                    );
                }
            }
        }
    }
    (
        if need_dx {
            Some(Tensor::new(vec![h, w, cin], dx))
        } else {
            None
        },
        if need_dk {
            Some(Tensor::new(vec![kh, kw, cin, cout], dk))
        } else {
            None
        },
        Tensor::new(vec![cout], db),
    )
}

fn lane_geometry(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = lane_geometry(x.dims(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = xd[base];
            for j in 1..len {
                let v = xd[base + j * inner];
                if v > m {
                    m = v;
                }
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (xd[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                s = s + e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / s;
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = lane_geometry(y.dims(), axis);
    let yd = y.data();
    let gd = g.data();
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot = dot + yd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                out[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(y.dims().to_vec(), out)
}

fn mean_axes_forward<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let dims = x.dims();
    let out_dims: Vec<usize> = dims
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let count: usize = axes.iter().map(|&a| dims[a]).product();
    // stride of each input axis in the output (0 for reduced axes)
    let mut out_strides = vec![0usize; dims.len()];
    let mut s = 1;
    for i in (0..dims.len()).rev() {
        if !axes.contains(&i) {
            out_strides[i] = s;
            s *= dims[i];
        }
    }
    let mut out = Tensor::zeros(&out_dims);
    let mut idx = vec![0usize; dims.len()];
    let mut off = 0usize;
    for i in 0..x.numel() {
        out.data_mut()[off] = out.data()[off] + x.data()[i];
        for ax in (0..dims.len()).rev() {
            idx[ax] += 1;
            off += out_strides[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            idx[ax] = 0;
            off -= out_strides[ax] * dims[ax];
        }
    }
    let c = T::from_f64(count as f64);
    for v in out.data_mut() {
        *v = *v / c;
    }
    out
}

fn mean_axes_backward<T: Scalar>(x_dims: &[usize], axes: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let count: usize = axes.iter().map(|&a| x_dims[a]).product();
    let c = T::from_f64(count as f64);
    let mut out_strides = vec![0usize; x_dims.len()];
    let mut s = 1;
    for i in (0..x_dims.len()).rev() {
        if !axes.contains(&i) {
            out_strides[i] = s;
            s *= x_dims[i];
        }
    }
    let mut dx = Tensor::zeros(x_dims);
    let n = dx.numel();
    let mut idx = vec![0usize; x_dims.len()];
    let mut off = 0usize;
    for i in 0..n {
        dx.data_mut()[i] = g.data()[off] / c;
        for ax in (0..x_dims.len()).rev() {
            idx[ax] += 1;
            off += out_strides[ax];
            if idx[ax] < x_dims[ax] {
                break;
            }
            idx[ax] = 0;
            off -= out_strides[ax] * x_dims[ax];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(dims, data)
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let k = g.constant(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, k, None);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let k = g.constant(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let y = g.conv1d(x, k, None);
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 1], &[0.3, -1.0, 2.0, 9.0]));
        let k = g.constant(t(&[3, 1, 1], &[0.0, 0.0, 0.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv1d(x, k, Some(b));
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn conv2d_ones_same_padding() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 3, 1], 1.0f64));
        let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0f64));
        let y = g.conv2d(x, k, None, (1, 1), Padding::Same);
        let v = g.value(y);
        assert_eq!(v.at(&[1, 1, 0]), 9.0); // center
        assert_eq!(v.at(&[0, 1, 0]), 6.0); // edge
        assert_eq!(v.at(&[0, 0, 0]), 4.0); // corner
    }

    #[test]
    fn conv2d_stride_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[320, 7, 3]));
        let k = g.constant(Tensor::<f64>::zeros(&[4, 1, 3, 2]));
        let y = g.conv2d(x, k, None, (4, 1), Padding::Valid);
        assert_eq!(g.value(y).dims(), &[80, 7, 2]);
    }

    #[test]
    fn conv2d_linearity_in_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, dims: &[usize]| {
            let n = dims.iter().product();
            Tensor::new(
                dims.to_vec(),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            )
        };
        let xa = rand_t(&mut rng, &[5, 4, 2]);
        let xb = rand_t(&mut rng, &[5, 4, 2]);
        let k = rand_t(&mut rng, &[3, 3, 2, 3]);
        let (alpha, beta) = (0.7, -1.3);
        let mix = broadcast_zip(
            &xa.map(|v| alpha * v),
            &xb.map(|v| beta * v),
            |x, y| x + y,
        );
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let y = g.conv2d(xv, kv, None, (1, 1), Padding::Same);
            g.value(y).clone()
        };
        let lhs = run(&mix);
        let ya = run(&xa);
        let yb = run(&xb);
        for i in 0..lhs.numel() {
            let rhs = alpha * ya.data()[i] + beta * yb.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        // rows [[1,2],[3,4]] as [F=2, T=2, C=1]
        let x = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let f = g.row_avg_pool(x);
        assert_eq!(g.value(f).data(), &[1.5, 3.5]);
        let gl = g.global_avg_pool(x);
        assert_eq!(g.value(gl).data(), &[2.5]);
        let c = g.constant(Tensor::full(&[3, 4, 2], 0.7f64));
        let fc = g.row_avg_pool(c);
        assert!(g.value(fc).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let single = g.constant(t(&[2, 1, 1], &[5.0, 6.0]));
        let fs = g.row_avg_pool(single);
        assert_eq!(g.value(fs).data(), &[5.0, 6.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let sa = g.softmax(a, 0);
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
        let b = g.constant(t(&[2], &[1.0f64.ln(), 3.0f64.ln()]));
        let sb = g.softmax(b, 0);
        assert!((g.value(sb).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(sb).data()[1] - 0.75).abs() < 1e-12);
        let c = g.constant(t(&[2], &[1000.0, 1000.0]));
        let sc = g.softmax(c, 0);
        assert_eq!(g.value(sc).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = data.iter().map(|v| v + 17.25).collect();
        let mut g = Graph::new();
        let a = g.constant(t(&[3, 4], &data));
        let b = g.constant(t(&[3, 4], &shifted));
        let sa = g.softmax(a, 1);
        let sb = g.softmax(b, 1);
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in 0..3 {
            let s: f64 = (0..4).map(|c| g.value(sa).at(&[row, c])).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..4).all(|c| g.value(sa).at(&[row, c]) >= 0.0));
        }
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[4], 1.0f64));
        let loss = g.bce_loss(ones, ones);
        assert!(g.value(loss).item() <= 1e-6);
        let half = g.constant(Tensor::full(&[4], 0.5f64));
        let t1 = g.constant(Tensor::full(&[4], 1.0f64));
        let l1 = g.bce_loss(half, t1);
        assert!((g.value(l1).item() - 2.0f64.ln()).abs() < 1e-9);
        let t0 = g.constant(Tensor::full(&[4], 0.0f64));
        let l0 = g.bce_loss(half, t0);
        assert!((g.value(l0).item() - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_non_scalar_panics() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        g.backward(y);
    }

    #[test]
    fn concat_narrow_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[1, 2], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 0);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = g.narrow(c, 0, 2, 1);
        assert_eq!(g.value(back).data(), &[5.0, 6.0]);
        let s = g.sum(back);
        g.backward(s);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn determinism_identical_runs() {
        use rand::{Rng, SeedableRng};
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::new(
                vec![6, 5, 2],
                (0..60).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<f32>>(),
            );
            let k = Tensor::new(
                vec![3, 3, 2, 2],
                (0..36).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<f32>>(),
            );
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let kv = g.leaf(k);
            let y = g.conv2d(xv, kv, None, (1, 1), Padding::Same);
            let sm = g.softmax(y, 0);
            let s = g.sum(sm);
            g.backward(s);
            (g.value(s).item(), g.grad(kv).unwrap().clone())
        };
        let (a1, g1) = run();
        let (a2, g2) = run();
        assert_eq!(a1.to_bits(), a2.to_bits());
        assert_eq!(g1, g2);
    }
}
