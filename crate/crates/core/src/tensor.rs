//! Dense row-major `f64` tensors and the forward kernels shared with the
//! autodiff graph.

use std::fmt;

use crate::error::{Error, Result};

/// Columns whose population standard deviation is at or below this value are
/// treated as degenerate by [`Tensor::batch_standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a 3-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, 0.0, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Arithmetic mean along `axis`, removing that axis.
    pub fn reduce_mean(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            let scale = 1.0 / len as f64;
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Standardizes along the leading (batch) axis with population
    /// statistics and no affine transform. Every trailing position is its own
    /// column. Degenerate columns (std <= `eps`) become zeros.
    pub fn batch_standardize(&self, eps: f64) -> Result<Tensor> {
        Ok(standardize_with_stats(self, eps)?.0)
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax_over_time(&self) -> Result<Tensor> {
        let t = *self
            .shape
            .last()
            .ok_or_else(|| Error::InvalidArgument("softmax of a scalar".into()))?;
        if t == 0 {
            return Err(Error::InvalidArgument("softmax over zero time steps".into()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(t) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Column statistics retained for the backward pass: per column the inverse
/// std, or 0 for degenerate columns.
pub(crate) fn standardize_with_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let b = *x.shape.first().unwrap_or(&0);
    if x.rank() < 2 || b < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch standardization needs a batch of at least 2, got shape {:?}",
            x.shape
        )));
    }
    let cols = x.numel() / b;
    let mut mean = vec![0.0; cols];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(&x.data[r * cols..(r + 1) * cols]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; cols];
    for r in 0..b {
        for ((s, v), m) in var.iter_mut().zip(&x.data[r * cols..(r + 1) * cols]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|s| {
            let std = (s / b as f64).sqrt();
            if std > eps {
                1.0 / std
            } else {
                0.0
            }
        })
        .collect();
    let mut out = vec![0.0; x.numel()];
    for r in 0..b {
        let src = &x.data[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dst[c] = (src[c] - mean[c]) * inv_std[c];
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        inv_std,
    ))
}

/// `c = a·b + beta·c` for row-major operands; `a_t`/`b_t` read the stored
/// matrix as its transpose. `a` is m×k after transposition, `b` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every operand length to the extents and
    // strides handed to the kernel, so all accesses stay in bounds.
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

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let b = t2(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), t2(&[&[2.0], &[4.0]]));
        let z = Tensor::zeros(&[3, 2]);
        assert!(z.matmul(&a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn gemm_transposed_operands() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let at = a.transpose().unwrap();
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, at.data(), true, at.data(), false, 0.0, &mut c);
        assert_eq!(c, a.matmul(&at).unwrap().into_data());
    }

    #[test]
    fn standardize_examples() {
        let x = t2(&[&[1.0, 3.0, 2.0], &[-1.0, 5.0, 2.0]]);
        let y = x.batch_standardize(STANDARDIZE_EPS).unwrap();
        assert_eq!(y, t2(&[&[1.0, -1.0, 0.0], &[-1.0, 1.0, 0.0]]));
        assert!(Tensor::zeros(&[1, 3]).batch_standardize(STANDARDIZE_EPS).is_err());
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Tensor::zeros(&[2, 2]).frobenius_sq(), 0.0);
        assert_eq!(Tensor::full(&[2, 2], 1.0).frobenius_sq(), 4.0);
        assert_eq!(Tensor::eye(3).frobenius_sq(), 3.0);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::vector(vec![0.7; 4]).softmax_over_time().unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
        assert_eq!(Tensor::vector(vec![-3.0]).softmax_over_time().unwrap().data(), &[1.0]);
        let s = Tensor::vector(vec![0.0, 3f64.ln()]).softmax_over_time().unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn reduce_mean_examples() {
        assert_eq!(Tensor::vector(vec![1.0, 2.0, 3.0]).reduce_mean(0).unwrap().item(), 2.0);
        let slice = [0.5, -1.0, 2.0];
        let x = Tensor::new(vec![3, 3], [slice, slice, slice].concat()).unwrap();
        assert_eq!(x.reduce_mean(0).unwrap().data(), &slice);
        let single = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(single.reduce_mean(1).unwrap().data(), single.data());
        assert!(single.reduce_mean(3).is_err());
    }
}
