//! Dense row-major tensors and the pure compute kernels used by the model.
//!
//! Everything is generic over [`Scalar`] so the same kernels run in f32 for
//! training and in f64 for finite-difference gradient verification.

use crate::{Error, Result};

/// Floating-point scalar the engine can compute with. Implemented for `f32`
/// (training) and `f64` (gradient checks).
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn abs(self) -> Self;
    fn max(self, o: Self) -> Self;
    fn min(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Gauss error function, used by the exact (CDF-form) GELU.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn powf(self, e: Self) -> Self {
        f32::powf(self, e)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn max(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn min(self, o: Self) -> Self {
        f32::min(self, o)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn max(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn min(self, o: Self) -> Self {
        f64::min(self, o)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense row-major tensor. All kernels in this crate operate on rank-2
/// tensors; rank-1 data is represented as a 1×n matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![F::ZERO; rows * cols],
        }
    }

    /// 1×n row vector.
    pub fn row(data: Vec<F>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// 1×1 scalar tensor.
    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Extract the single element of a 1×1 tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Lossy precision conversion (f32 ↔ f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {i} in tensor of shape {:?}",
                self.data[i], self.shape
            )));
        }
        Ok(())
    }

    fn require_rank2(&self, op: &str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "{op} requires a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

#[cfg(debug_assertions)]
fn debug_finite<F: Scalar>(t: &Tensor<F>, op: &str) {
    if let Err(e) = t.validate_finite() {
        panic!("{op} produced a non-finite value: {e}");
    }
}

#[cfg(not(debug_assertions))]
fn debug_finite<F: Scalar>(_t: &Tensor<F>, _op: &str) {}

/// Row-wise softmax, stabilized by subtracting each row's maximum before
/// exponentiation.
pub fn softmax_rows<F: Scalar>(m: &Tensor<F>) -> Result<Tensor<F>> {
    m.require_rank2("softmax_rows")?;
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let row = m.row_slice(r);
        let mut mx = row[0];
        for &x in &row[1..] {
            mx = mx.max(x);
        }
        let mut sum = F::ZERO;
        for c in 0..cols {
            let e = (row[c] - mx).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..cols {
            out.set(r, c, out.at(r, c) / sum);
        }
    }
    debug_finite(&out, "softmax_rows");
    Ok(out)
}

/// Standard normal CDF.
pub fn gauss_cdf<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * (F::ONE + (x / F::from_f64(std::f64::consts::SQRT_2)).erf())
}

/// Standard normal density.
pub fn gauss_pdf<F: Scalar>(x: F) -> F {
    let inv_sqrt_2pi = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-(x * x) * F::from_f64(0.5)).exp()
}

/// Elementwise GELU in its exact Gaussian-CDF form x·Φ(x).
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let out = x.map(|v| v * gauss_cdf(v));
    debug_finite(&out, "gelu");
    out
}

/// Derivative of the exact GELU: Φ(x) + x·φ(x).
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    gauss_cdf(x) + x * gauss_pdf(x)
}

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    a.require_rank2("matmul")?;
    b.require_rank2("matmul")?;
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul dimension mismatch: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let arow = a.row_slice(i);
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row_slice(p);
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    let _ = k;
    debug_finite(&out, "matmul");
    Ok(out)
}

pub fn transpose<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    a.require_rank2("transpose")?;
    let (n, m) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..n {
        for j in 0..m {
            out.set(j, i, a.at(i, j));
        }
    }
    Ok(out)
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &x) in out.data.iter_mut().zip(b.data.iter()) {
        *o = *o + x;
    }
    debug_finite(&out, "add");
    Ok(out)
}

/// Add a 1×d row vector to every row of an n×d matrix.
pub fn add_row_broadcast<F: Scalar>(a: &Tensor<F>, row: &Tensor<F>) -> Result<Tensor<F>> {
    a.require_rank2("add_row_broadcast")?;
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(Error::Shape(format!(
            "broadcast row {:?} does not match matrix {:?}",
            row.shape(),
            a.shape()
        )));
    }
    let mut out = a.clone();
    let d = a.cols();
    for r in 0..a.rows() {
        for c in 0..d {
            out.data[r * d + c] = out.data[r * d + c] + row.data[c];
        }
    }
    Ok(out)
}

pub fn scale<F: Scalar>(a: &Tensor<F>, s: F) -> Tensor<F> {
    a.map(|x| x * s)
}

/// Zero out every row whose mask entry is 0. `mask` has one entry per row.
pub fn mask_rows<F: Scalar>(a: &Tensor<F>, mask: &[u8]) -> Result<Tensor<F>> {
    a.require_rank2("mask_rows")?;
    if mask.len() != a.rows() {
        return Err(Error::Shape(format!(
            "row mask length {} != row count {}",
            mask.len(),
            a.rows()
        )));
    }
    let mut out = a.clone();
    let d = a.cols();
    for (r, &m) in mask.iter().enumerate() {
        if m == 0 {
            out.data[r * d..(r + 1) * d].fill(F::ZERO);
        }
    }
    Ok(out)
}

pub fn slice_cols<F: Scalar>(a: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    a.require_rank2("slice_cols")?;
    if start + len > a.cols() {
        return Err(Error::Shape(format!(
            "column slice {start}..{} out of bounds for {:?}",
            start + len,
            a.shape()
        )));
    }
    let mut out = Tensor::zeros(a.rows(), len);
    for r in 0..a.rows() {
        let src = &a.row_slice(r)[start..start + len];
        out.data[r * len..(r + 1) * len].copy_from_slice(src);
    }
    Ok(out)
}

pub fn concat_cols<F: Scalar>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat_cols of zero tensors".into()));
    }
    let rows = parts[0].rows();
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(Error::Shape("concat_cols row count mismatch".into()));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(rows, total);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            let c = p.cols();
            out.data[r * total + off..r * total + off + c].copy_from_slice(p.row_slice(r));
            off += c;
        }
    }
    Ok(out)
}

/// Column-wise mean over rows: n×d → 1×d.
pub fn mean_rows<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    a.require_rank2("mean_rows")?;
    let (n, d) = (a.rows(), a.cols());
    let inv = F::ONE / F::from_f64(n as f64);
    let mut out = Tensor::zeros(1, d);
    for r in 0..n {
        for c in 0..d {
            out.data[c] += a.at(r, c);
        }
    }
    for c in 0..d {
        out.data[c] = out.data[c] * inv;
    }
    Ok(out)
}

pub fn sum_all<F: Scalar>(a: &Tensor<F>) -> Tensor<F> {
    Tensor::scalar(a.data.iter().copied().sum())
}

pub fn sigmoid<F: Scalar>(a: &Tensor<F>) -> Tensor<F> {
    a.map(|x| F::ONE / (F::ONE + (-x).exp()))
}

/// Row-wise layer normalization with learned gain/bias:
/// out = gain ⊙ (x − μ_row)/√(σ²_row + eps) + bias.
/// Variance is the biased (population) estimate.
pub fn layer_norm_rows<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    x.require_rank2("layer_norm_rows")?;
    let d = x.cols();
    if gain.cols() != d || gain.rows() != 1 || bias.cols() != d || bias.rows() != 1 {
        return Err(Error::Shape(format!(
            "layer norm params {:?}/{:?} do not match input {:?}",
            gain.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    let inv_d = F::ONE / F::from_f64(d as f64);
    let mut out = Tensor::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let mu: F = row.iter().copied().sum::<F>() * inv_d;
        let var: F = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
        let inv_std = F::ONE / (var + eps).sqrt();
        for c in 0..d {
            let xhat = (row[c] - mu) * inv_std;
            out.set(r, c, gain.data[c] * xhat + bias.data[c]);
        }
    }
    debug_finite(&out, "layer_norm_rows");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let m = Tensor::matrix(1, 2, vec![0.0f64, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_suppressed_key_is_uniform_over_rest() {
        let m = Tensor::matrix(1, 3, vec![-1e9f64, 0.0, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!(s.at(0, 0) < 1e-12);
        assert!((s.at(0, 1) - 0.5).abs() < 1e-12);
        assert!((s.at(0, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_scalar_evaluation() {
        let m = Tensor::matrix(1, 3, vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        // Independent route: plain exp/sum without stabilization.
        let z: f64 = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (c, &e) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!((s.at(0, c) - f64::exp(e) / z).abs() < 1e-12);
        }
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for c in 0..3 {
            assert!((s.at(0, c) - expect[c]).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rejects_non_rank2() {
        let t = Tensor::new(vec![2, 2, 2], vec![0.0f64; 8]).unwrap();
        assert!(matches!(softmax_rows(&t), Err(Error::Shape(_))));
    }

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        let x = Tensor::row(vec![0.0f64, 30.0, -30.0, 1.0]);
        let g = gelu(&x);
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 30.0).abs() < 1e-12);
        assert!(g.data()[2].abs() < 1e-12);
        // x·Φ(x) at x = 1 with Φ(1) = 0.8413447.
        assert!((g.data()[3] - 0.8413447).abs() < 1e-7);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn layer_norm_zero_row_yields_bias() {
        let x = Tensor::matrix(1, 4, vec![0.0f64; 4]).unwrap();
        let gain = Tensor::row(vec![1.0; 4]);
        let bias = Tensor::row(vec![0.25, -0.5, 0.0, 1.0]);
        let out = layer_norm_rows(&x, &gain, &bias, 1e-5).unwrap();
        assert_eq!(out.data(), bias.data());
    }

    #[test]
    fn kernels_are_bitwise_deterministic() {
        let m = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = softmax_rows(&m).unwrap();
        let b = softmax_rows(&m).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(matmul(&m, &m).unwrap(), matmul(&m, &m).unwrap());
    }
}
