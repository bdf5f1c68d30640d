use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Checkpoint dtype code.
    const DTYPE: u8;

    /// `C = alpha * A B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self;

    fn to_le_bytes_vec(data: &[Self], out: &mut Vec<u8>);

    fn from_le_chunk(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 0;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64_lossy(v: f64) -> f32 {
        v as f32
    }

    fn to_le_bytes_vec(data: &[f32], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64_lossy(v: f64) -> f64 {
        v
    }

    fn to_le_bytes_vec(data: &[f64], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

#[inline]
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_parts(Vec::new(), vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| real(v)).collect())
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| real(rng.random_range(lo..hi))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                real(mean + std * z)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / real(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type (used to move parameters between f32 and f64).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| real(v.to_f64().unwrap_or(f64::NAN))).collect(),
        )
    }

    /// Slice `len` entries starting at `start` along the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| Error::invalid("narrow_batch on scalar"))?;
        if start + len > lead || len == 0 {
            return Err(Error::invalid(format!(
                "narrow_batch {start}..{} out of range for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let inner = self.numel() / lead;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape of two equal-rank shapes, or `None`.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `src` viewed at `out`'s shape (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    src.iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == o { st } else { 0 })
        .collect()
}

/// Visits every index of `out` with the matching flat offsets into two
/// broadcast operands. Innermost axis is the tight loop.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return a.zip_map(b, op, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let n = out.iter().product();
    let mut data = vec![T::zero(); n];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
        data[o] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor::from_parts(out, data))
}

/// Sums `x` down to `shape` (each axis equal or 1).
pub(crate) fn sum_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if x.shape == shape {
        return Ok(x.clone());
    }
    let ok = shape.len() == x.rank() && shape.iter().zip(&x.shape).all(|(&s, &d)| s == d || s == 1);
    if !ok {
        return Err(Error::shape("sum_to", &x.shape, shape));
    }
    let st = broadcast_strides(shape, &x.shape);
    let zeros = vec![0; x.rank()];
    let mut acc = vec![T::zero(); shape.iter().product()];
    for_each_broadcast(&x.shape, &st, &zeros, |o, it, _| {
        acc[it] += x.data[o];
    });
    Ok(Tensor::from_parts(shape.to_vec(), acc))
}

/// Broadcasts `x` up to `shape`.
pub(crate) fn expand<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if x.shape == shape {
        return Ok(x.clone());
    }
    let ok = shape.len() == x.rank() && shape.iter().zip(&x.shape).all(|(&s, &d)| s == d || d == 1);
    if !ok {
        return Err(Error::shape("expand", &x.shape, shape));
    }
    let st = broadcast_strides(&x.shape, shape);
    let zeros = vec![0; shape.len()];
    let mut out = vec![T::zero(); shape.iter().product()];
    for_each_broadcast(shape, &st, &zeros, |o, ix, _| {
        out[o] = x.data[ix];
    });
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Concatenates along `dim`.
pub(crate) fn concat<T: Real>(parts: &[&Tensor<T>], dim: usize) -> Result<Tensor<T>> {
    let first = parts[0];
    if dim >= first.rank() {
        return Err(Error::invalid(format!("concat axis {dim} out of range for {:?}", first.shape)));
    }
    let mut total = 0;
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == dim || a == b);
        if !same {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
        total += p.shape[dim];
    }
    let outer: usize = first.shape[..dim].iter().product();
    let inner: usize = first.shape[dim + 1..].iter().product();
    let mut shape = first.shape.clone();
    shape[dim] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[dim] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// `len` entries from `start` along `dim`.
pub(crate) fn narrow<T: Real>(x: &Tensor<T>, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if dim >= x.rank() || start + len > x.shape[dim] || len == 0 {
        return Err(Error::invalid(format!(
            "narrow axis {dim} [{start}, {}) out of range for {:?}",
            start + len,
            x.shape
        )));
    }
    let outer: usize = x.shape[..dim].iter().product();
    let inner: usize = x.shape[dim + 1..].iter().product();
    let full = x.shape[dim] * inner;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full + start * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[dim] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Zero-pads `x` along `dim` so that it occupies `[start, start+len)` of an
/// axis of extent `full`. Adjoint of [`narrow`].
pub(crate) fn embed<T: Real>(x: &Tensor<T>, dim: usize, start: usize, full: usize) -> Result<Tensor<T>> {
    if dim >= x.rank() || start + x.shape[dim] > full {
        return Err(Error::invalid(format!(
            "embed of {:?} at axis {dim} offset {start} into extent {full}",
            x.shape
        )));
    }
    let len = x.shape[dim];
    let outer: usize = x.shape[..dim].iter().product();
    let inner: usize = x.shape[dim + 1..].iter().product();
    let mut shape = x.shape.clone();
    shape[dim] = full;
    let mut data = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&x.data[src..src + len * inner]);
    }
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_shape() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_add_over_channels() {
        let a = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[10.0, 20.0]).unwrap();
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 12.0, 23.0, 24.0]);
        let back = sum_to(&c, &[1, 2, 1, 1]).unwrap();
        assert_eq!(back.data(), &[23.0, 47.0]);
    }

    #[test]
    fn incompatible_broadcast_names_operator() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let err = broadcast_binary("mul", &a, &b, |x, y| x * y).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mul") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn narrow_embed_are_adjoint_shapes() {
        let x = Tensor::<f64>::from_f64(&[1, 3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let n = narrow(&x, 1, 1, 2).unwrap();
        assert_eq!(n.data(), &[3., 4., 5., 6.]);
        let e = embed(&n, 1, 1, 3).unwrap();
        assert_eq!(e.data(), &[0., 0., 3., 4., 5., 6.]);
        let c = concat(&[&narrow(&x, 1, 0, 1).unwrap(), &n], 1).unwrap();
        assert_eq!(c, x);
    }
}
