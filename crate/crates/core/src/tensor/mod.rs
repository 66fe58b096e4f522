//! Dense tensors and reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: it supplies exactly the primitives the
//! attention network needs (convolutions, pooling, softmax, elementwise
//! arithmetic with broadcasting, binary cross entropy) plus the Adam
//! optimizer. Everything is generic over the element type so the training
//! path runs in `f32` while gradient checks run in `f64`.

mod adam;
mod graph;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Padding, VarId};
pub use params::{GradMap, ModelParams, ParamsError};

use num_traits::Float;

/// Element type bound for all tensor math.
pub trait Scalar: Float + std::fmt::Debug + Default + Copy + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            dims
        );
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn from_slice(dims: &[usize], data: &[T]) -> Self {
        Self::new(dims.to_vec(), data.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn reshape(&self, dims: &[usize]) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.dims,
            dims
        );
        Self {
            dims: dims.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.dims[i]);
            off = off * self.dims[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// C += A·B where A is [m, k] with row stride `rsa`, B is [k, n]
/// row-major contiguous, C is [m, n] with row stride `rsc`. Column counts
/// up to 16 dispatch to monomorphic kernels whose inner loops unroll and
/// vectorize; larger n takes the runtime-length loop.
pub(crate) fn gemm_acc_nn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    b: &[T],
    c: &mut [T],
    rsc: usize,
) {
    macro_rules! dispatch {
        ($($n:literal),*) => {
            match n {
                $($n => return nn_fixed::<T, $n>(m, k, a, rsa, b, c, rsc),)*
                _ => {}
            }
        };
    }
    dispatch!(1, 2, 3, 4, 5, 6, 8, 10, 12, 16);
    for i in 0..m {
        let crow = &mut c[i * rsc..i * rsc + n];
        for (l, &av) in a[i * rsa..i * rsa + k].iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

fn nn_fixed<T: Scalar, const N: usize>(
    m: usize,
    k: usize,
    a: &[T],
    rsa: usize,
    b: &[T],
    c: &mut [T],
    rsc: usize,
) {
    let bk = &b[..k * N];
    let mut i = 0;
    // 4-row blocks keep four accumulators in registers and load each B
    // row once per block
    while i + 4 <= m {
        let mut acc = [[T::zero(); N]; 4];
        let r0 = a[i * rsa..i * rsa + k].iter();
        let r1 = a[(i + 1) * rsa..(i + 1) * rsa + k].iter();
        let r2 = a[(i + 2) * rsa..(i + 2) * rsa + k].iter();
        let r3 = a[(i + 3) * rsa..(i + 3) * rsa + k].iter();
        for ((((brow, &a0), &a1), &a2), &a3) in bk.chunks_exact(N).zip(r0).zip(r1).zip(r2).zip(r3)
        {
            for j in 0..N {
                acc[0][j] = acc[0][j] + a0 * brow[j];
                acc[1][j] = acc[1][j] + a1 * brow[j];
                acc[2][j] = acc[2][j] + a2 * brow[j];
                acc[3][j] = acc[3][j] + a3 * brow[j];
            }
        }
        for (r, acc) in acc.iter().enumerate() {
            let crow: &mut [T; N] = (&mut c[(i + r) * rsc..(i + r) * rsc + N]).try_into().unwrap();
            for j in 0..N {
                crow[j] = crow[j] + acc[j];
            }
        }
        i += 4;
    }
    while i < m {
        let mut acc = [T::zero(); N];
        for (brow, &av) in bk.chunks_exact(N).zip(&a[i * rsa..i * rsa + k]) {
            for j in 0..N {
                acc[j] = acc[j] + av * brow[j];
            }
        }
        let crow: &mut [T; N] = (&mut c[i * rsc..i * rsc + N]).try_into().unwrap();
        for j in 0..N {
            crow[j] = crow[j] + acc[j];
        }
        i += 1;
    }
}

/// C += Sᵀ·G where S is [k, m] with row stride `rss`, G is [k, n] with
/// row stride `rsg`, C is [m, n] row-major contiguous. Accumulates rank-1
/// updates; C stays cache-resident (kernel-gradient shapes are tiny).
pub(crate) fn gemm_acc_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    s: &[T],
    rss: usize,
    g: &[T],
    rsg: usize,
    c: &mut [T],
) {
    macro_rules! dispatch {
        ($($n:literal),*) => {
            match n {
                $($n => return tn_fixed::<T, $n>(m, k, s, rss, g, rsg, c),)*
                _ => {}
            }
        };
    }
    dispatch!(1, 2, 3, 4, 5, 6, 8, 10, 12, 16);
    for l in 0..k {
        let grow = &g[l * rsg..l * rsg + n];
        for (i, &sv) in s[l * rss..l * rss + m].iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + sv * grow[j];
            }
        }
    }
}

fn tn_fixed<T: Scalar, const N: usize>(
    m: usize,
    k: usize,
    s: &[T],
    rss: usize,
    g: &[T],
    rsg: usize,
    c: &mut [T],
) {
    let mut i = 0;
    // 4-column blocks of Sᵀ: accumulate four C rows in registers across
    // the whole k sweep, loading each G row once per block
    while i + 4 <= m {
        let mut acc = [[T::zero(); N]; 4];
        for l in 0..k {
            let grow: &[T; N] = g[l * rsg..l * rsg + N].try_into().unwrap();
            let srow: &[T; 4] = s[l * rss + i..l * rss + i + 4].try_into().unwrap();
            for j in 0..N {
                acc[0][j] = acc[0][j] + srow[0] * grow[j];
                acc[1][j] = acc[1][j] + srow[1] * grow[j];
                acc[2][j] = acc[2][j] + srow[2] * grow[j];
                acc[3][j] = acc[3][j] + srow[3] * grow[j];
            }
        }
        for (r, acc) in acc.iter().enumerate() {
            let crow: &mut [T; N] = (&mut c[(i + r) * N..(i + r + 1) * N]).try_into().unwrap();
            for j in 0..N {
                crow[j] = crow[j] + acc[j];
            }
        }
        i += 4;
    }
    while i < m {
        let mut acc = [T::zero(); N];
        for l in 0..k {
            let grow: &[T; N] = g[l * rsg..l * rsg + N].try_into().unwrap();
            acc.iter_mut().zip(grow).for_each(|(a, &gv)| *a = *a + s[l * rss + i] * gv);
        }
        let crow: &mut [T; N] = (&mut c[i * N..(i + 1) * N]).try_into().unwrap();
        for j in 0..N {
            crow[j] = crow[j] + acc[j];
        }
        i += 1;
    }
}

/// Shape of the result of broadcasting `a` against `b` (numpy rules:
/// right-aligned, each pair of dims must match or one of them must be 1).
pub(crate) fn broadcast_dims(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcast-compatible",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Row-major strides with zeros on broadcast (size-1 or missing) axes,
/// left-padded to `out_rank`.
pub(crate) fn broadcast_strides(dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let rank = out_dims.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..dims.len()).rev() {
        let oi = rank - dims.len() + i;
        strides[oi] = if dims[i] == 1 { 0 } else { s };
        s *= dims[i];
    }
    strides
}

/// Apply a binary op elementwise with broadcasting. The innermost axis is
/// processed in tight per-case loops; outer axes step via an odometer.
pub(crate) fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.dims() == b.dims() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.dims.clone(), data);
    }
    let out_dims = broadcast_dims(a.dims(), b.dims());
    let sa = broadcast_strides(a.dims(), &out_dims);
    let sb = broadcast_strides(b.dims(), &out_dims);
    let rank = out_dims.len();
    let inner = out_dims[rank - 1];
    let n: usize = out_dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut remaining = n;
    while remaining > 0 {
        match (sa[rank - 1], sb[rank - 1]) {
            (1, 1) => {
                for (&x, &y) in a.data[oa..oa + inner].iter().zip(&b.data[ob..ob + inner]) {
                    data.push(f(x, y));
                }
            }
            (1, 0) => {
                let y = b.data[ob];
                for &x in &a.data[oa..oa + inner] {
                    data.push(f(x, y));
                }
            }
            (0, 1) => {
                let x = a.data[oa];
                for &y in &b.data[ob..ob + inner] {
                    data.push(f(x, y));
                }
            }
            _ => {
                let v = f(a.data[oa], b.data[ob]);
                for _ in 0..inner {
                    data.push(v);
                }
            }
        }
        remaining -= inner;
        // odometer over the outer axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_dims[ax];
            ob -= sb[ax] * out_dims[ax];
        }
    }
    Tensor::new(out_dims, data)
}

/// Sum `t` down to `dims` (inverse of broadcasting), for gradient reduction.
pub(crate) fn reduce_to_shape<T: Scalar>(t: &Tensor<T>, dims: &[usize]) -> Tensor<T> {
    if t.dims() == dims {
        return t.clone();
    }
    let strides = broadcast_strides(dims, t.dims());
    let mut out = Tensor::zeros(dims);
    let src_dims = t.dims().to_vec();
    let rank = src_dims.len();
    let inner = src_dims[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut i = 0usize;
    while i < t.numel() {
        // innermost axis in one tight pass
        if strides[rank - 1] == 1 {
            for (o, &s) in out.data[off..off + inner].iter_mut().zip(&t.data[i..i + inner]) {
                *o = *o + s;
            }
        } else {
            let mut acc = T::zero();
            for &s in &t.data[i..i + inner] {
                acc = acc + s;
            }
            out.data[off] = out.data[off] + acc;
        }
        i += inner;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < src_dims[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * src_dims[ax];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_dims(&[3, 1, 2], &[4, 2]), vec![3, 4, 2]);
        assert_eq!(broadcast_dims(&[5], &[2, 5]), vec![2, 5]);
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn broadcast_mismatch_panics() {
        broadcast_dims(&[3, 2], &[4, 2]);
    }

    #[test]
    fn broadcast_mul_and_reduce() {
        let a = Tensor::from_slice(&[2, 1], &[1.0f64, 2.0]);
        let b = Tensor::from_slice(&[1, 3], &[10.0f64, 20.0, 30.0]);
        let c = broadcast_zip(&a, &b, |x, y| x * y);
        assert_eq!(c.dims(), &[2, 3]);
        assert_eq!(c.data(), &[10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
        let r = reduce_to_shape(&c, &[2, 1]);
        assert_eq!(r.data(), &[60.0, 120.0]);
    }

    #[test]
    fn indexing_round_trip() {
        let mut t = Tensor::<f32>::zeros(&[2, 3, 4]);
        t.set(&[1, 2, 3], 7.0);
        assert_eq!(t.at(&[1, 2, 3]), 7.0);
        assert_eq!(t.offset(&[1, 2, 3]), 23);
    }
}
