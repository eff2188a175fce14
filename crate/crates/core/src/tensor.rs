//! Dense row-major `f64` tensors.
//!
//! Every value flowing through the layers, the optimizers and the feature
//! extractors is a [`Tensor`]. Storage is a flat `Vec<f64>` in row-major order
//! plus a shape; a rank-0 tensor (empty shape) holds a single scalar.
//!
//! Only scalar broadcasting is supported. Reductions sum left-to-right over
//! the flat index so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape extents must be at least 1, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("division by zero at flat index {0}")]
    DivisionByZero(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Binary elementwise operations accepted by [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl<'a> From<&'a Tensor> for Operand<'a> {
    fn from(t: &'a Tensor) -> Self {
        Operand::Tensor(t)
    }
}

impl From<f64> for Operand<'_> {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Max,
    /// Index of the maximum; ties resolve to the lowest index.
    ArgMax,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if values.len() != n {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: n,
                actual: values.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: values,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat offset of a multi-index, or `None` if it is out of range.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Option<()> {
        let o = self.offset(index)?;
        self.data[o] = value;
        Some(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: n,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Rows of a rank-2 tensor as slices.
    pub fn rows(&self) -> Result<std::slice::ChunksExact<'_, f64>> {
        let [_, cols] = self.dims2()?;
        Ok(self.data.chunks_exact(cols))
    }

    pub(crate) fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(TensorError::RankMismatch {
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2()?;
        let [k2, n] = other.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::from_values(&[m, n], out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let [k, m] = self.dims2()?;
        let [k2, n] = other.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, true, &other.data, false, &mut out, false);
        Tensor::from_values(&[m, n], out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2()?;
        let [n, k2] = other.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, true, &mut out, false);
        Tensor::from_values(&[m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let [r, c] = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_values(&[c, r], out)
    }

    pub fn elementwise<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        let apply = |a: f64, b: f64, i: usize| -> Result<f64> {
            Ok(match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b == 0.0 {
                        return Err(TensorError::DivisionByZero(i));
                    }
                    a / b
                }
                BinaryOp::Max => a.max(b),
            })
        };
        let data = match rhs.into() {
            Operand::Scalar(s) => self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| apply(a, s, i))
                .collect::<Result<Vec<_>>>()?,
            Operand::Tensor(t) => {
                if t.shape != self.shape {
                    return Err(TensorError::ShapeMismatch {
                        left: self.shape.clone(),
                        right: t.shape.clone(),
                    });
                }
                self.data
                    .iter()
                    .zip(&t.data)
                    .enumerate()
                    .map(|(i, (&a, &b))| apply(a, b, i))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.elementwise(BinaryOp::Add, rhs)
    }

    pub fn sub<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.elementwise(BinaryOp::Sub, rhs)
    }

    pub fn mul<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.elementwise(BinaryOp::Mul, rhs)
    }

    pub fn div<'a>(&self, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        self.elementwise(BinaryOp::Div, rhs)
    }

    /// Reduce along `axis`, or over every element when `axis` is `None`.
    ///
    /// The reduced axis is removed from the shape. `ArgMax` stores indices as
    /// `f64`.
    pub fn reduce(&self, op: Reduction, axis: Option<usize>) -> Result<Tensor> {
        let Some(axis) = axis else {
            return Ok(Tensor::scalar(fold(op, self.data.iter().copied())));
        };
        if axis >= self.shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                out.push(fold(
                    op,
                    (0..extent).map(|e| self.data[base + e * inner]),
                ));
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

fn fold(op: Reduction, values: impl Iterator<Item = f64>) -> f64 {
    match op {
        Reduction::Sum => values.fold(0.0, |acc, v| acc + v),
        Reduction::Max => values.fold(f64::NEG_INFINITY, f64::max),
        Reduction::ArgMax => {
            let mut best = f64::NEG_INFINITY;
            let mut idx = 0usize;
            for (i, v) in values.enumerate() {
                if i == 0 || v > best {
                    best = v;
                    idx = i;
                }
            }
            idx as f64
        }
    }
}

/// Lowest index of the maximum of a slice. Returns 0 for an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    fold(Reduction::ArgMax, values.iter().copied()) as usize
}

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`) on row-major buffers,
/// where `a` is `m×k` and `b` is `k×n` after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let [m, k] = a.dims2().unwrap();
        let [_, n] = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data[i * k + p] * b.data[p * n + j];
                }
            }
        }
        Tensor::from_values(&[m, n], out).unwrap()
    }

    #[test]
    fn constructors() {
        assert!(Tensor::zeros(&[2, 2]).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(Tensor::ones(&[3]).unwrap().data(), &[1.0, 1.0, 1.0]);
        let t = Tensor::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]), Some(3.0));
        assert_eq!(t.get(&[2, 0]), None);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            Tensor::from_values(&[2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(TensorError::ZeroExtent(_))));
    }

    #[test]
    fn matmul_hand_values() {
        let a = Tensor::from_values(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_values(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);

        let eye = Tensor::from_values(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_values(&[2, 3], vec![0.3, -1.5, 2.0, 7.25, 1e-9, -3.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);

        let z = Tensor::zeros(&[3, 2]).unwrap();
        assert!(z.matmul(&b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&a), Err(TensorError::ShapeMismatch { .. })));
        let v = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(a.matmul(&v), Err(TensorError::RankMismatch { .. })));
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = Tensor::from_values(&[3, 2], (0..6).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let b = Tensor::from_values(&[3, 4], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let tn = a.matmul_tn(&b).unwrap();
        let expect = naive_matmul(&a.transpose2().unwrap(), &b);
        for (x, y) in tn.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = Tensor::from_values(&[4, 2], (0..8).map(|v| (v as f64).cos()).collect()).unwrap();
        let nt = a.matmul_nt(&c).unwrap();
        let expect = naive_matmul(&a, &c.transpose2().unwrap());
        for (x, y) in nt.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_and_reduce() {
        let a = Tensor::from_values(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_values(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.elementwise(BinaryOp::Max, 1.5).unwrap().data(), &[1.5, 2.0]);
        assert!(matches!(
            a.div(&Tensor::from_values(&[2], vec![1.0, 0.0]).unwrap()),
            Err(TensorError::DivisionByZero(1))
        ));
        assert!(matches!(a.div(0.0), Err(TensorError::DivisionByZero(0))));

        let v = Tensor::from_values(&[3], vec![0.2, 0.5, 0.5]).unwrap();
        assert_eq!(v.reduce(Reduction::ArgMax, Some(0)).unwrap().data(), &[1.0]);

        let m = Tensor::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = m.reduce(Reduction::Sum, Some(0)).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[4.0, 6.0]);
        assert_eq!(m.reduce(Reduction::Sum, Some(1)).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(m.reduce(Reduction::Max, None).unwrap().data(), &[4.0]);
        assert!(matches!(
            m.reduce(Reduction::Sum, Some(2)),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |v| Tensor::from_values(&[rows, cols], v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in small_matrix(3, 4),
            b in small_matrix(4, 2),
            c in small_matrix(2, 5),
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().chain(right.data()).fold(1.0f64, |m, v| m.max(v.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn identity_is_exact(b in small_matrix(3, 3)) {
            let mut eye = Tensor::zeros(&[3, 3]).unwrap();
            for i in 0..3 { eye.set(&[i, i], 1.0).unwrap(); }
            prop_assert_eq!(eye.matmul(&b).unwrap(), b.clone());
            prop_assert_eq!(b.matmul(&eye).unwrap(), b);
        }

        #[test]
        fn full_sum_is_left_to_right(values in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let n = values.len();
            let t = Tensor::from_values(&[n], values.clone()).unwrap();
            let mut acc = 0.0;
            for v in &values { acc += v; }
            prop_assert_eq!(t.reduce(Reduction::Sum, None).unwrap().data()[0].to_bits(), acc.to_bits());
        }
    }
}
