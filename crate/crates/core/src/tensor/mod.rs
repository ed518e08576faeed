//! Dense row-major `f64` matrices and the seeded random source used by every
//! generator in the crate.

mod rng;

pub use rng::Rng;

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{dim_err, Error, Result};

/// A dense matrix of `f64` stored in row-major order.
///
/// Column vectors are `n × 1` tensors and scalars are `1 × 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}) ", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{}, {}, ... ]", self.data[0], self.data[1])
        }
    }
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err!(
                "{} values cannot fill a {}x{} tensor",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(dim_err!(
                    "row {} has {} columns, expected {}",
                    i,
                    r.len(),
                    cols
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// `n` evenly spaced points from `lo` to `hi` inclusive, as a column.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Self {
        let values = match n {
            0 => Vec::new(),
            1 => vec![lo],
            _ => {
                let step = (hi - lo) / (n - 1) as f64;
                (0..n)
                    .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                    .collect()
            }
        };
        Self::column(values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(dim_err!("item() on a {}x{} tensor", self.rows, self.cols));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.data[i * self.cols + j]);
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Tensor> {
        Tensor::from_vec(rows, cols, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "elementwise op")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(dim_err!("dot of {} and {} values", self.len(), other.len()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Column-wise means as a `1 × cols` row.
    pub fn column_means(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Tensor {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Gathers the listed rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Gathers the square sub-matrix `self[idx, idx]`.
    pub fn select_square(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * idx.len());
        for &i in idx {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor {
            rows: idx.len(),
            cols: idx.len(),
            data,
        }
    }

    /// Concatenates tensors with equal row counts side by side.
    pub fn hstack(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(dim_err!("hstack of {} and {} rows", rows, p.rows));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        gemm(self, false, other, true)
    }

    fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err!(
                "{what}: {}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }
}

fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != k2 {
        return Err(dim_err!("matmul of {m}x{k} by {k2}x{n}"));
    }
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        });
    }
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides describe exactly the buffers of `a`, `b` and `out`, whose
    // lengths were checked against (m, k, n) above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

impl Index<(usize, usize)> for Tensor {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Tensor {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Draws an `rows × cols` tensor of i.i.d. `N(mean, std²)` values.
pub fn normal(rng: &mut Rng, mean: f64, std: f64, rows: usize, cols: usize) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Domain(format!(
            "normal: std must be finite and >= 0, got {std}"
        )));
    }
    let mut data = vec![0.0; rows * cols];
    rng.fill_normal(&mut data);
    for v in &mut data {
        *v = mean + std * *v;
    }
    Ok(Tensor { rows, cols, data })
}

/// Draws an `rows × cols` tensor of i.i.d. values uniform on `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64, rows: usize, cols: usize) -> Result<Tensor> {
    if !(lo <= hi) {
        return Err(Error::Domain(format!("uniform: lo {lo} exceeds hi {hi}")));
    }
    let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
    Ok(Tensor { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        uniform(rng, -1.0, 1.0, r, c).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_rows(&[[0.3, -1.2], [4.0, 2.5]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);

        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::ones(2, 1);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::zeros(2, 3).matmul(&Tensor::ones(3, 1)).unwrap();
        assert_eq!(z, Tensor::zeros(2, 1));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = Tensor::zeros(2, 3)
            .matmul(&Tensor::zeros(2, 3))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 5, 4);
        let c = random(&mut rng, 2, 3);
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn normal_examples() {
        let mut rng = Rng::new(1);
        let t = normal(&mut rng, 2.5, 0.0, 3, 3).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));

        let a = normal(&mut Rng::new(42), 0.0, 1.0, 10, 7).unwrap();
        let b = normal(&mut Rng::new(42), 0.0, 1.0, 10, 7).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            normal(&mut rng, 0.0, -1.0, 1, 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn normal_sample_mean() {
        let n = 1_000_000;
        let t = normal(&mut Rng::new(9), 3.0, 2.0, n, 1).unwrap();
        let tol = 4.0 * 2.0 / (n as f64).sqrt();
        assert!((t.mean() - 3.0).abs() < tol, "mean {}", t.mean());
    }

    #[test]
    fn uniform_examples() {
        let mut rng = Rng::new(5);
        let c = uniform(&mut rng, 1.5, 1.5, 4, 1).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.5));

        let t = uniform(&mut rng, -2.0, 3.0, 10_000, 1).unwrap();
        assert!(t.data().iter().all(|&v| (-2.0..3.0).contains(&v)));

        let big = uniform(&mut Rng::new(11), 0.0, 10.0, 1_000_000, 1).unwrap();
        assert!((big.mean() - 5.0).abs() < 0.05);

        assert!(matches!(
            uniform(&mut rng, 1.0, 0.0, 1, 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn linspace_is_inclusive() {
        let g = Tensor::linspace(10.0, 30.0, 10);
        assert_eq!(g.len(), 10);
        assert_eq!(g.data()[0], 10.0);
        assert_eq!(g.data()[9], 30.0);
        assert!((g.data()[1] - (10.0 + 20.0 / 9.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, l);
            let c = random(&mut rng, l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().chain(right.data()).fold(1.0f64, |s, v| s.max(v.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn transpose_is_an_involution(seed in any::<u64>(), r in 0usize..7, c in 0usize..7) {
            let t = random(&mut Rng::new(seed), r, c);
            prop_assert_eq!(t.transpose().transpose(), t);
        }

        #[test]
        fn generators_are_reproducible(seed in any::<u64>()) {
            let a = normal(&mut Rng::new(seed), 0.0, 1.0, 5, 3).unwrap();
            let b = normal(&mut Rng::new(seed), 0.0, 1.0, 5, 3).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            let u1 = uniform(&mut Rng::new(seed), 0.0, 1.0, 9, 1).unwrap();
            let u2 = uniform(&mut Rng::new(seed), 0.0, 1.0, 9, 1).unwrap();
            prop_assert_eq!(u1, u2);
        }
    }
}
