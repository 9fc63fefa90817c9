//! Dense row-major `f64` matrices and the forward kernels shared by the
//! gradient tape and the tape-free prediction path.
//!
//! Every kernel here is a plain function of its inputs, so running the same
//! computation through the tape or directly yields bit-identical values.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dim(
            "matmul_tn",
            format!("{:?}ᵀ · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut out = Matrix::zeros(m, n);
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim(
            "matmul_nt",
            format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let (m, n) = (a.rows, b.rows);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            out.data[i * n + j] = a_row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// `input · weights + bias`, bias broadcast over rows.
pub fn affine(input: &Matrix, weights: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows != 1 || bias.cols != weights.cols {
        return Err(Error::dim(
            "affine",
            format!(
                "bias {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            ),
        ));
    }
    if input.cols != weights.rows {
        return Err(Error::dim(
            "affine",
            format!("input {:?} · weights {:?}", input.shape(), weights.shape()),
        ));
    }
    let mut out = matmul(input, weights)?;
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu(input: &Matrix) -> Matrix {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.same_shape(b, "add")?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Numerically stable `ln Σ exp(values)`.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Column-wise log-softmax: each column is normalized over the rows (sites).
pub fn log_softmax_cols(logits: &Matrix) -> Result<Matrix> {
    if logits.rows < 2 {
        return Err(Error::DegenerateBatch(format!(
            "normalization over {} site(s) needs at least 2",
            logits.rows
        )));
    }
    let mut out = logits.clone();
    for c in 0..logits.cols {
        let lse = logsumexp((0..logits.rows).map(|r| logits.get(r, c)));
        for r in 0..logits.rows {
            out.data[r * logits.cols + c] -= lse;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax: each row is normalized over the columns (species).
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..logits.rows {
        let lse = logsumexp(logits.row(r).iter().copied());
        for v in out.row_mut(r) {
            *v -= lse;
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let out = affine(
            &m(&[&[1.0, 2.0]]),
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &Matrix::row_vector(&[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(out, m(&[&[1.0, 2.0]]));

        let out = affine(
            &m(&[&[1.0, 1.0]]),
            &m(&[&[2.0], &[3.0]]),
            &Matrix::row_vector(&[1.0]),
        )
        .unwrap();
        assert_eq!(out, m(&[&[6.0]]));

        let out = affine(
            &m(&[&[0.0, 0.0]]),
            &m(&[&[0.3, -7.0], &[2.5, 1.0]]),
            &Matrix::row_vector(&[5.0, 5.0]),
        )
        .unwrap();
        assert_eq!(out, m(&[&[5.0, 5.0]]));
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let err = affine(
            &m(&[&[1.0, 2.0, 3.0]]),
            &m(&[&[1.0], &[1.0]]),
            &Matrix::row_vector(&[0.0]),
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let err = affine(
            &m(&[&[1.0, 2.0]]),
            &m(&[&[1.0], &[1.0]]),
            &Matrix::row_vector(&[0.0, 0.0]),
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&m(&[&[-1.0, 2.0]])), m(&[&[0.0, 2.0]]));
        assert_eq!(relu(&m(&[&[0.0]])), m(&[&[0.0]]));
    }

    #[test]
    fn add_examples() {
        let a = m(&[&[1.0, 2.0]]);
        assert_eq!(add(&a, &m(&[&[3.0, 4.0]])).unwrap(), m(&[&[4.0, 6.0]]));
        assert_eq!(add(&a, &Matrix::zeros(1, 2)).unwrap(), a);
        assert!(add(&a, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn log_softmax_cols_examples() {
        let out = log_softmax_cols(&m(&[&[0.0], &[0.0]])).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((out.get(0, 0) + ln2).abs() < 1e-15);
        assert!((out.get(1, 0) + ln2).abs() < 1e-15);

        for c in [-40.0, 0.0, 3.5, 700.0] {
            let out = log_softmax_cols(&m(&[&[c], &[c + 3f64.ln()]])).unwrap();
            assert!((out.get(0, 0).exp() - 0.25).abs() < 1e-12);
            assert!((out.get(1, 0).exp() - 0.75).abs() < 1e-12);
        }

        assert!(matches!(
            log_softmax_cols(&m(&[&[1.0, 2.0]])),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn log_softmax_cols_shift_invariant() {
        let a = m(&[&[0.3, -1.0], &[2.0, 0.5], &[-0.7, 0.1]]);
        let mut shifted = a.clone();
        for r in 0..3 {
            let v = shifted.get(r, 1) + 1000.0;
            shifted.set(r, 1, v);
        }
        let x = log_softmax_cols(&a).unwrap();
        let y = log_softmax_cols(&shifted).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[1.0, -1.0], &[0.5, 2.0], &[-3.0, 1.0]]);
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab, m(&[&[-7.0, 6.0], &[-11.5, 12.0]]));
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap(), ab);
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), ab);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert_eq!(softplus(800.0), 800.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
