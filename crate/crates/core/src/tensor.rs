//! Dense row-major tensors and the eager kernels shared by the tape.
//!
//! Feature maps use the `[N, C, H, W]` layout. Values are generic over
//! [`Real`]: `f64` for gradient checking, `f32` for training.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Dtype code used by the tensor file format.
    const DTYPE: u8;
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// How [`Tensor::create`] fills a new tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Constant(f64),
    /// Uniform in `[low, high)` from a ChaCha8 stream seeded with `seed`.
    Uniform { seed: u64, low: f64, high: f64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Constant(c) => vec![T::of(c); n],
            Fill::Uniform { seed, low, high } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::of(rng.gen_range(low..high))).collect()
            }
        };
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Constant(0.0))
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn uniform(shape: &[usize], seed: u64, low: f64, high: f64) -> Result<Self> {
        Self::create(shape, Fill::Uniform { seed, low, high })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dimensions of a 4-d feature map.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Sum in ascending index order.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Raw little-endian bytes of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }
}

pub(crate) fn ensure_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// The broadcast patterns accepted by binary ops; anything else is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// `b` is `[1, C, 1, 1]`.
    PerChannel,
    /// `b` is `[N, 1, H, W]`, repeated over the channels of `a`.
    Spatial,
}

pub fn broadcast_rule(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if let ([n, c, h, w], [bn, bc, bh, bw]) = (a, b) {
        if *bn == 1 && bc == c && *bh == 1 && *bw == 1 {
            return Ok(Broadcast::PerChannel);
        }
        if bn == n && *bc == 1 && bh == h && bw == w {
            return Ok(Broadcast::Spatial);
        }
    }
    Err(Error::shape("elementwise_binary", format!("{a:?} vs {b:?}")))
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn elementwise_unary<T: Real>(kind: UnaryKind, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = match kind {
        UnaryKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        UnaryKind::Sigmoid => x.map(sigmoid),
        UnaryKind::Exp => x.map(|v| v.exp()),
        UnaryKind::Neg => x.map(|v| -v),
    };
    ensure_finite("elementwise_unary", &out)?;
    Ok(out)
}

pub fn elementwise_binary<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let rule = broadcast_rule(&a.shape, &b.shape)?;
    let f = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    let mut data = Vec::with_capacity(a.data.len());
    match rule {
        Broadcast::Same => {
            data.extend(a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
        Broadcast::PerChannel => {
            let (_, c, h, w) = a.dims4("elementwise_binary")?;
            let hw = h * w;
            for (i, &x) in a.data.iter().enumerate() {
                data.push(f(x, b.data[(i / hw) % c]));
            }
        }
        Broadcast::Spatial => {
            let (_, c, h, w) = a.dims4("elementwise_binary")?;
            let hw = h * w;
            for (i, &x) in a.data.iter().enumerate() {
                let n = i / (c * hw);
                data.push(f(x, b.data[n * hw + i % hw]));
            }
        }
    }
    let out = Tensor::from_parts(a.shape.clone(), data);
    ensure_finite("elementwise_binary", &out)?;
    Ok(out)
}

/// `c += a · b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
///
/// Every output element accumulates its products in ascending `k`.
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, k, n, &a.data, &b.data, &mut out);
    let out = Tensor::from_parts(vec![m, n], out);
    ensure_finite("matmul", &out)?;
    Ok(out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    Ok(Tensor::from_parts(vec![n, m], transpose_raw(m, n, &a.data)))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_rows")?;
    ensure_finite("softmax_rows", x)?;
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        let row = &x.data[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let dst = &mut out[r * n..(r + 1) * n];
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::arg("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total_c = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4("concat_channels")?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", first.shape, x.shape),
            ));
        }
        total_c += xc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for x in xs {
            let c = x.shape[1];
            data.extend_from_slice(&x.data[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total_c, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn create_fills() {
        let z = Tensor::<f64>::create(&[2, 2], Fill::Constant(0.0)).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let o = Tensor::<f64>::create(&[3], Fill::Constant(1.0)).unwrap();
        assert_eq!(o.data(), &[1.0; 3]);
        let a = Tensor::<f32>::uniform(&[4], 7, -1.0, 1.0).unwrap();
        let b = Tensor::<f32>::uniform(&[4], 7, -1.0, 1.0).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn create_rejects_zero_dims() {
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(Error::InvalidShape(_))));
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn unary_values() {
        let x = t(&[3], &[0.0, -3.0, 2.0]);
        let s = elementwise_unary(UnaryKind::Sigmoid, &x).unwrap();
        assert_eq!(s.data()[0], 0.5);
        // 1/(1+e^-2) evaluated to 20 digits: 0.88079707797788244406
        assert!((s.data()[2] - 0.880_797_077_977_882_4).abs() < 1e-15);
        let r = elementwise_unary(UnaryKind::Relu, &x).unwrap();
        assert_eq!(r.data()[1], 0.0);
        let big = t(&[1], &[1000.0]);
        assert!(matches!(
            elementwise_unary(UnaryKind::Exp, &big),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn sigmoid_stays_inside_open_interval_for_moderate_inputs() {
        for &v in &[-30.0f64, -5.0, 0.0, 5.0, 30.0] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn binary_rules() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(elementwise_binary(BinaryKind::Add, &a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(elementwise_binary(BinaryKind::Sub, &a, &a).unwrap().data(), &[0.0, 0.0]);

        let f = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let m = t(&[1, 1, 2, 2], &[0.5, 1.0, 2.0, 0.0]);
        let out = elementwise_binary(BinaryKind::Mul, &f, &m).unwrap();
        let mut expanded = Vec::new();
        for _ in 0..2 {
            expanded.extend_from_slice(m.data());
        }
        let expect: Vec<f64> = f.data().iter().zip(&expanded).map(|(a, b)| a * b).collect();
        assert_eq!(out.data(), &expect[..]);

        let pc = t(&[1, 2, 1, 1], &[10.0, 20.0]);
        let out = elementwise_binary(BinaryKind::Add, &f, &pc).unwrap();
        assert_eq!(out.data(), &[11.0, 12.0, 13.0, 14.0, 25.0, 26.0, 27.0, 28.0]);

        let bad = t(&[1, 2, 1, 2], &[0.0; 4]);
        assert!(elementwise_binary(BinaryKind::Add, &f, &bad).is_err());
    }

    #[test]
    fn matmul_cases() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&id, &a).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let z = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert_eq!(matmul(&z, &a).unwrap().data(), &[0.0; 4]);
        assert!(matmul(&t(&[1, 3], &[0.0; 3]), &a).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[1, 3], &[7.0, 7.0, 7.0])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // e/(e+e^2) = 1/(1+e) = 0.26894142136999512075
        let s = softmax_rows(&t(&[1, 2], &[1.0, 2.0])).unwrap();
        assert!((s.data()[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((s.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(softmax_rows(&t(&[1, 2], &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::<f64>::uniform(&[1, 2, 2, 2], 1, -1.0, 1.0).unwrap();
        let b = Tensor::<f64>::uniform(&[1, 3, 2, 2], 2, -1.0, 1.0).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert_eq!(&c.data()[8..12], &b.data()[0..4]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = Tensor::<f64>::zeros(&[1, 1, 3, 2]).unwrap();
        assert!(concat_channels(&[&a, &bad]).is_err());
    }
}
