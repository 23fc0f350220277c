//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! Values are plain [`Tensor`]s. Differentiable computation goes through a
//! [`Graph`], which records each op with its vector-Jacobian rule and replays
//! them in reverse on [`Graph::backward`].

mod gradcheck;
mod graph;
pub mod kernels;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{grad_check, weighted_sum, GradCheckReport};
pub use graph::{Graph, Var, VjpFn};

/// Floating point element type. Implemented for `f32` (training and benching)
/// and `f64` (gradient checks).
pub trait Real:
    Float + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from an `f64` literal.
    fn c(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn c(x: f64) -> Self {
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
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn c(x: f64) -> Self {
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
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: division by zero (zero-variance row with eps = 0)")]
    DivisionByZero { op: &'static str },
    #[error("backward already ran on this graph; call zero_grad before running it again")]
    DoubleBackward,
    #[error("index {index} out of range for {op} with bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("gradient check failed at input {input}, coordinate {coord}: {reason}")]
    GradCheck {
        input: usize,
        coord: usize,
        reason: String,
    },
}

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::c(x))).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.iter().map(|&x| T::c(x)).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::c(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::c(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Stack equal-width rows from several matrices.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self, TensorError> {
        let width = match parts.iter().find(|p| p.rows() > 0) {
            Some(p) => p.cols(),
            None => return Err(TensorError::Invalid("concat of nothing".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != width {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, width],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data,
        })
    }
}

/// Row-wise softmax with max subtraction; the plain-value form of the graph op.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data.chunks_mut(cols) {
        kernels::softmax_in_place(row);
    }
    out
}

/// Population-variance layer normalization of each row.
pub fn layernorm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let gv = g.constant(gamma.clone());
    let bv = g.constant(beta.clone());
    let y = g.layernorm(xv, gv, bv, eps)?;
    Ok(g.take(y))
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = (a.rows(), a.cols());
    if a.shape.len() != 2 || b.shape.len() != 2 || b.rows() != k {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let n = b.cols();
    Ok(Tensor {
        shape: vec![m, n],
        data: kernels::matmul(&a.data, &b.data, m, k, n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::<f64>::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
    }

    #[test]
    fn matmul_permutation() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = Tensor::<f64>::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let expected = Tensor::<f64>::from_rows(&[&[2.0, 1.0], &[4.0, 3.0]]);
        assert_eq!(matmul(&a, &p).unwrap(), expected);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::<f64>::zeros(&[3, 2]);
        let b = Tensor::<f64>::from_rows(&[&[1.5, -2.0, 7.0], &[0.25, 9.0, -1.0]]);
        let c = matmul(&z, &b).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));
        assert_eq!(c.shape(), &[3, 3]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[&[0.0, 0.0, 0.0]]));
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[&[1e9, 0.0, 0.0]]));
        assert!((s.data()[0] - 1.0).abs() < 1e-9);
        assert!(s.data()[1].abs() < 1e-9);

        // exp(k) / (e + e^2 + e^3) computed independently
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]));
        for (got, (want, frozen)) in s
            .data()
            .iter()
            .zip(oracle.iter().zip([0.09003, 0.24473, 0.66524]))
        {
            assert!((got - want).abs() < 1e-12);
            assert!((got - frozen).abs() < 1e-5);
        }
    }

    #[test]
    fn layernorm_examples() {
        let one = Tensor::<f64>::vector(&[1.0, 1.0, 1.0]);
        let zero = Tensor::<f64>::vector(&[0.0, 0.0, 0.0]);

        let c = Tensor::<f64>::from_rows(&[&[4.0, 4.0, 4.0]]);
        let y = layernorm(&c, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // mean 2, population variance 2/3
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]);
        let y = layernorm(&x, &one, &zero, 1e-12).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        for (got, want) in y.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert!((y.data()[2] - 1.2247).abs() < 1e-4);

        let b = Tensor::<f64>::vector(&[0.5, -1.0, 2.0]);
        let x = Tensor::<f64>::from_rows(&[&[1.0, 7.0, 3.0], &[-2.0, 0.5, 9.0]]);
        let y = layernorm(&x, &zero, &b, 1e-5).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), b.data());
        }
    }

    #[test]
    fn layernorm_zero_variance_without_eps_is_error() {
        let x = Tensor::<f64>::from_rows(&[&[2.0], &[3.0]]);
        let one = Tensor::<f64>::vector(&[1.0]);
        let zero = Tensor::<f64>::vector(&[0.0]);
        assert!(matches!(
            layernorm(&x, &one, &zero, 0.0),
            Err(TensorError::DivisionByZero { .. })
        ));
    }
}
