//! Dense row-major tensors and the forward kernels for every supported op.
//!
//! Tensors are immutable after creation and cheap to reason about: a shape
//! and a flat `Vec` of reals. The kernels here are shared by the tape (which
//! adds backward bookkeeping) and by the value-only inference paths in
//! `stream`, so forward arithmetic exists exactly once.

use crate::error::{PtmaError, Result};
use num_traits::Float;

/// Additive-mask sentinel standing in for negative infinity. Large enough
/// that `exp(x + NEG_MASK - rowmax)` underflows to exactly 0, small enough
/// to stay finite in single precision and avoid inf - inf in the softmax
/// shift.
pub const NEG_MASK: f64 = -1e30;

/// Scalar element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Converts an `f64` constant into the working precision.
pub fn real<T: Scalar>(v: f64) -> T {
    T::from(v).expect("constant representable in working precision")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn shape_err(op: &'static str, shapes: String) -> PtmaError {
    PtmaError::Shape { op, shapes }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor::new",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
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

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("tensor::from_rows", "ragged rows".into()));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element (i, j) of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row i of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| real::<U>(x.to_f64()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Forward kernels. Each checks shapes and returns a descriptive error naming
// the op; the tape reuses these verbatim.
// ---------------------------------------------------------------------------

fn want_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 2 {
        return Err(shape_err(op, format!("expected rank 2, got {:?}", t.shape)));
    }
    Ok(())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    want_2d("matmul", a)?;
    want_2d("matmul", b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = T::zero();
            for (kk, &av) in arow.iter().enumerate() {
                acc = acc + av * b.data[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    want_2d("transpose", a)?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Broadcast plan for elementwise binary ops. Shapes must be identical, or
/// one side is a single row `[1, n]` combined with `[m, n]`; anything fancier
/// is rejected so the backward rules stay auditable.
enum Broadcast {
    None,
    LeftRow,
    RightRow,
}

fn broadcast_plan<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Broadcast> {
    if a.shape == b.shape {
        return Ok(Broadcast::None);
    }
    if a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[1] {
        if a.shape[0] == 1 {
            return Ok(Broadcast::LeftRow);
        }
        if b.shape[0] == 1 {
            return Ok(Broadcast::RightRow);
        }
    }
    Err(shape_err(op, format!("{:?} vs {:?}", a.shape, b.shape)))
}

fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    match broadcast_plan(op, a, b)? {
        Broadcast::None => Ok(Tensor {
            shape: a.shape.clone(),
            data: a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }),
        Broadcast::LeftRow => {
            let n = a.shape[1];
            let data = b
                .data
                .chunks(n)
                .flat_map(|row| row.iter().zip(&a.data).map(|(&y, &x)| f(x, y)))
                .collect();
            Tensor::new(b.shape.clone(), data)
        }
        Broadcast::RightRow => {
            let n = b.shape[1];
            let data = a
                .data
                .chunks(n)
                .flat_map(|row| row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.shape.clone(), data)
        }
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| T::one() / (T::one() + (-x).exp()))
}

pub fn tanh<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.tanh())
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn exp<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.exp())
}

pub fn log<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.ln())
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x * c)
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x + c)
}

/// Row-wise softmax of `x + mask` over the last axis of a 2-D tensor.
/// Masked entries (mask at the [`NEG_MASK`] sentinel) come out exactly 0;
/// every row must keep at least one unmasked entry.
pub fn softmax_masked<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    want_2d("softmax_masked", x)?;
    if x.shape != mask.shape {
        return Err(shape_err(
            "softmax_masked",
            format!("{:?} vs mask {:?}", x.shape, mask.shape),
        ));
    }
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mrow = &mask.data[i * n..(i + 1) * n];
        let mut hi = T::neg_infinity();
        for j in 0..n {
            let v = row[j] + mrow[j];
            if v > hi {
                hi = v;
            }
        }
        let mut denom = T::zero();
        for j in 0..n {
            let e = (row[j] + mrow[j] - hi).exp();
            out[i * n + j] = e;
            denom = denom + e;
        }
        for j in 0..n {
            out[i * n + j] = out[i * n + j] / denom;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise log-softmax over the last axis of a 2-D tensor.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    want_2d("log_softmax", x)?;
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let hi = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - hi).exp();
        }
        let lse = hi + denom.ln();
        for j in 0..n {
            out[i * n + j] = row[j] - lse;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Concatenates 2-D tensors along axis 0 (rows).
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
    want_2d("concat", first)?;
    let cols = first.shape[1];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        want_2d("concat", p)?;
        if p.shape[1] != cols {
            return Err(shape_err(
                "concat",
                format!("column mismatch: {} vs {}", cols, p.shape[1]),
            ));
        }
        rows += p.shape[0];
        data.extend_from_slice(&p.data);
    }
    Tensor::new(vec![rows, cols], data)
}

/// Rows `[start, start + len)` of a 2-D tensor.
pub fn slice_rows<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    want_2d("slice", a)?;
    let (m, n) = (a.shape[0], a.shape[1]);
    if start + len > m {
        return Err(shape_err(
            "slice",
            format!("rows {}..{} of {:?}", start, start + len, a.shape),
        ));
    }
    Tensor::new(
        vec![len, n],
        a.data[start * n..(start + len) * n].to_vec(),
    )
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(a.data.iter().fold(T::zero(), |acc, &x| acc + x))
}

/// Mean of all elements, as a `[1]` tensor.
pub fn mean_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = real::<T>(a.numel() as f64);
    Tensor::scalar(sum_all(a).item() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_contract() {
        // 2x3 times 3x4 gives 2x4.
        let a = Tensor::<f64>::filled(&[2, 3], 1.0);
        let b = Tensor::<f64>::filled(&[3, 4], 1.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn matmul_rejects_mismatch_naming_op() {
        let a = Tensor::<f64>::filled(&[2, 3], 1.0);
        let b = Tensor::<f64>::filled(&[4, 2], 1.0);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn masked_softmax_symmetry_and_zero() {
        let x = Tensor::new(vec![1, 3], vec![1.0_f64, 1.0, 5.0]).unwrap();
        let m = Tensor::new(vec![1, 3], vec![0.0, 0.0, NEG_MASK]).unwrap();
        let s = softmax_masked(&x, &m).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] - 0.5).abs() < 1e-12);
        assert_eq!(s.data()[2], 0.0); // exactly zero, not just small
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Rng::from_seed(9);
        for _ in 0..50 {
            let x: Tensor<f64> = rng.normal_tensor(&[4, 6]);
            let mut mdata = vec![0.0; 24];
            for (i, row) in mdata.chunks_mut(6).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if rng.uniform() < 0.4 && j != i % 6 {
                        *v = NEG_MASK; // keep entry i%6 unmasked
                    }
                }
            }
            let m = Tensor::new(vec![4, 6], mdata).unwrap();
            let s = softmax_masked(&x, &m).unwrap();
            for i in 0..4 {
                let rowsum: f64 = s.row(i).iter().sum();
                assert!((rowsum - 1.0).abs() < 1e-12);
                for j in 0..6 {
                    if m.at(i, j) == NEG_MASK {
                        assert_eq!(s.at(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let t = sigmoid(&Tensor::<f64>::zeros(&[1]));
        assert_eq!(t.item(), 0.5);
    }

    #[test]
    fn row_broadcast_add() {
        let a = Tensor::new(vec![2, 3], vec![1.0_f64; 6]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![1.0_f64, 2.0, 3.0]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        // column broadcasting is rejected
        let col = Tensor::new(vec![2, 1], vec![1.0_f64, 2.0]).unwrap();
        assert!(add(&a, &col).is_err());
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let a = Tensor::new(vec![3, 2], (0..6).map(|x| x as f64).collect()).unwrap();
        let r0 = slice_rows(&a, 0, 1).unwrap();
        let r12 = slice_rows(&a, 1, 2).unwrap();
        let back = concat_rows(&[&r0, &r12]).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::new(vec![2, 3], vec![0.3_f64, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let zeros = Tensor::zeros(&[2, 3]);
        let ls = log_softmax(&x).unwrap();
        let s = softmax_masked(&x, &zeros).unwrap();
        for (a, b) in ls.data().iter().zip(s.data()) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_determinism_bitwise() {
        let mut rng = crate::rng::Rng::from_seed(123);
        let a: Tensor<f32> = rng.normal_tensor(&[5, 5]);
        let b: Tensor<f32> = rng.normal_tensor(&[5, 5]);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());
        let s1 = sigmoid(&c1);
        let s2 = sigmoid(&c2);
        assert_eq!(s1.data(), s2.data());
    }
}
