//! Dense row-major matrices, permutations and vector norms.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_cols(cols: &[Vec<T>]) -> Result<Self> {
        let rows = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != rows) {
            return Err(Error::dim("Matrix::from_cols", "ragged columns"));
        }
        let mut m = Self::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m.data[i * m.cols + j] = v;
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_cols"));
        }
        Ok(m)
    }

    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Self { rows, cols, data: rng.sample_gaussian(rows * cols) }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// Panics if `v` is not finite.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        assert!(v.is_finite(), "Matrix::set with non-finite value");
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, n, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let out_row = &mut out[i * p..(i + 1) * p];
            for l in 0..n {
                let a = self.data[i * n + l];
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[l * p..(l + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matmul"));
        }
        Ok(Self { rows: m, cols: p, data: out })
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::dim(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data: Vec<T> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Element-wise map; panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "Matrix::map produced non-finite value");
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> T {
        l2_norm(&self.data)
    }

    /// Largest absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Row `i` of the result is row `p.mapping[i]` of `self`.
    pub fn apply_row_permutation(&self, p: &Permutation) -> Result<Self> {
        if p.len() != self.rows {
            return Err(Error::dim(
                "apply_row_permutation",
                format!("permutation of length {} on {} rows", p.len(), self.rows),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &src in p.mapping() {
            data.extend_from_slice(self.row(src));
        }
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Column `j` of the result is column `p.mapping[j]` of `self`.
    pub fn apply_col_permutation(&self, p: &Permutation) -> Result<Self> {
        if p.len() != self.cols {
            return Err(Error::dim(
                "apply_col_permutation",
                format!("permutation of length {} on {} columns", p.len(), self.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, &src) in p.mapping().iter().enumerate() {
                out.data[i * self.cols + j] = self.data[i * self.cols + src];
            }
        }
        Ok(out)
    }

    /// Solves `self · X = rhs` for square `self` by Gaussian elimination with
    /// partial pivoting.
    pub fn solve(&self, rhs: &Self) -> Result<Self> {
        let n = self.rows;
        if self.cols != n || rhs.rows != n {
            return Err(Error::dim(
                "solve",
                format!("{:?} system with {:?} right-hand side", self.shape(), rhs.shape()),
            ));
        }
        let m = rhs.cols;
        let mut a = self.data.clone();
        let mut x = rhs.data.clone();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap()
                })
                .unwrap();
            if a[pivot * n + col] == T::zero() {
                return Err(Error::Domain("singular system in solve".into()));
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                for j in 0..m {
                    x.swap(col * m + j, pivot * m + j);
                }
            }
            let d = a[col * n + col];
            for i in col + 1..n {
                let f = a[i * n + col] / d;
                if f == T::zero() {
                    continue;
                }
                for j in col..n {
                    let v = a[col * n + j];
                    a[i * n + j] -= f * v;
                }
                for j in 0..m {
                    let v = x[col * m + j];
                    x[i * m + j] -= f * v;
                }
            }
        }
        for col in (0..n).rev() {
            let d = a[col * n + col];
            for j in 0..m {
                let mut acc = x[col * m + j];
                for k in col + 1..n {
                    acc -= a[col * n + k] * x[k * m + j];
                }
                x[col * m + j] = acc / d;
            }
        }
        Self::new(n, m, x)
    }
}

/// Bijection on `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::Domain(format!("{mapping:?} is not a permutation of 0..{n}")));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self { mapping: (0..n).collect() }
    }

    pub fn random(n: usize, rng: &mut Rng) -> Self {
        Self { mapping: rng.shuffled_indices(n) }
    }

    /// Uniformly random among the non-identity permutations (n ≥ 2).
    pub fn random_non_identity(n: usize, rng: &mut Rng) -> Self {
        loop {
            let p = Self::random(n, rng);
            if n < 2 || !p.is_identity() {
                return p;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// Permutation equal to applying `self` first, then `then`, as row
    /// permutations: `apply(apply(m, self), then) == apply(m, self.then(then))`.
    pub fn then(&self, then: &Self) -> Result<Self> {
        if self.len() != then.len() {
            return Err(Error::dim("Permutation::then", "length mismatch"));
        }
        Ok(Self { mapping: then.mapping.iter().map(|&j| self.mapping[j]).collect() })
    }

    /// The matrix `P` with `P · M == M.apply_row_permutation(self)`.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &src) in self.mapping.iter().enumerate() {
            m.set(i, src, T::one());
        }
        m
    }
}

/// Max absolute value. Errors on an empty slice.
pub fn inf_norm<T: Scalar>(v: &[T]) -> Result<T> {
    if v.is_empty() {
        return Err(Error::Domain("infinity norm of an empty vector".into()));
    }
    Ok(v.iter().fold(T::zero(), |m, x| m.max(x.abs())))
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}
