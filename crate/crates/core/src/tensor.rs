//! Dense row-major `f32` matrices and the handful of kernels the rest of the
//! crate is built on.
//!
//! Every reduction accumulates in `f64` and stores the result as `f32`.

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Default epsilon for the parameterless layer norm.
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Gathers the given rows into a new matrix.
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first row holding a NaN or infinity.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        self.iter_rows()
            .position(|r| r.iter().any(|v| !v.is_finite()))
    }

    /// L2-normalizes every row in place.
    pub fn normalize_rows(&mut self) -> Result<()> {
        for i in 0..self.rows {
            let n = l2_normalize(self.row(i))?;
            self.row_mut(i).copy_from_slice(&n);
        }
        Ok(())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n.is_nan() || n < MIN_NORM {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Parameterless layer norm with population variance.
pub fn layer_norm(v: &[f32], eps: f32) -> Vec<f32> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v
        .iter()
        .map(|&x| {
            let d = f64::from(x) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + f64::from(eps)).sqrt();
    v.iter()
        .map(|&x| ((f64::from(x) - mean) * inv) as f32)
        .collect()
}

fn check_cols(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols != b.cols {
        return Err(Error::DimMismatch(format!(
            "left has {} columns, right has {}",
            a.cols, b.cols
        )));
    }
    Ok(())
}

/// Dot products of every row of `a` with every row of `b`, clamped to [-1, 1].
///
/// Rows are expected to be unit norm, in which case this is the cosine matrix.
pub fn pairwise_cosine(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_cols(a, b)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.set(i, j, dot(a.row(i), b.row(j)).clamp(-1.0, 1.0) as f32);
        }
    }
    Ok(out)
}

pub fn pairwise_euclidean(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_cols(a, b)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let d2: f64 = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(&x, &y)| {
                    let d = f64::from(x) - f64::from(y);
                    d * d
                })
                .sum();
            out.set(i, j, d2.sqrt() as f32);
        }
    }
    Ok(out)
}

/// `max(v) + ln(sum(exp(v - max(v))))`; negative infinity for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn l2_normalize_examples() {
        assert!(close(
            &l2_normalize(&[3.0, 4.0]).unwrap(),
            &[0.6, 0.8],
            1e-7
        ));
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        assert!(close(&layer_norm(&[2.0, 4.0], 1e-5), &[-1.0, 1.0], 1e-4));
        assert!(close(&layer_norm(&[7.5; 4], 1e-5), &[0.0; 4], 1e-7));
        // population std of [1,2,3] is sqrt(2/3)
        let s = (2.0f64 / 3.0 + 1e-5).sqrt();
        let expected = [(-1.0 / s) as f32, 0.0, (1.0 / s) as f32];
        let got = layer_norm(&[1.0, 2.0, 3.0], 1e-5);
        assert!(close(&got, &expected, 1e-6));
        assert!((got[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn cosine_examples() {
        let a = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0f32, 0.0], [-1.0, 0.0]]).unwrap();
        let c = pairwise_cosine(&a, &b).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(1, 0), 0.0);
        assert_eq!(c.get(0, 1), -1.0);
        let wide = Matrix::zeros(1, 3);
        assert!(matches!(
            pairwise_cosine(&a, &wide),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn euclidean_examples() {
        let z = Matrix::from_rows(&[[0.0f32, 0.0]]).unwrap();
        let p = Matrix::from_rows(&[[3.0f32, 4.0]]).unwrap();
        assert_eq!(pairwise_euclidean(&z, &p).unwrap().get(0, 0), 5.0);
        assert_eq!(pairwise_euclidean(&p, &p).unwrap().get(0, 0), 0.0);
        let e = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let d = pairwise_euclidean(&e, &e).unwrap();
        assert!((d.get(0, 1) - 2f32.sqrt()).abs() < 1e-7);
        assert!(pairwise_euclidean(&e, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_eq!(log_sum_exp(&[-3.25]), -3.25);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]);
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    fn unit_rows(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-1.0f32..1.0, rows * cols).prop_filter_map(
            "degenerate row",
            move |data| {
                let mut m = Matrix::from_vec(rows, cols, data).ok()?;
                m.normalize_rows().ok()?;
                Some(m)
            },
        )
    }

    proptest! {
        #[test]
        fn euclidean_cosine_identity(a in unit_rows(4, 6), b in unit_rows(5, 6)) {
            let e = pairwise_euclidean(&a, &b).unwrap();
            let c = pairwise_cosine(&a, &b).unwrap();
            for i in 0..4 {
                for j in 0..5 {
                    let lhs = f64::from(e.get(i, j)).powi(2);
                    let rhs = 2.0 - 2.0 * f64::from(c.get(i, j));
                    prop_assert!((lhs - rhs).abs() <= 1e-4);
                }
            }
        }

        #[test]
        fn l2_normalize_idempotent(v in proptest::collection::vec(-10.0f32..10.0, 1..32)) {
            prop_assume!(norm(&v) > 1e-3);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!(close(&once, &twice, 1e-6));
            prop_assert!((norm(&once) - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn log_sum_exp_shift(v in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let c = 1e4;
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((log_sum_exp(&shifted) - (log_sum_exp(&v) + c)).abs() <= 1e-9);
        }

        #[test]
        fn layer_norm_zero_mean(v in proptest::collection::vec(-100.0f32..100.0, 2..64)) {
            let out = layer_norm(&v, LAYER_NORM_EPS);
            let mean = out.iter().map(|&x| f64::from(x)).sum::<f64>() / out.len() as f64;
            prop_assert!(mean.abs() <= 1e-5);
        }
    }
}
