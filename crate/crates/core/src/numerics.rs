//! Dense linear algebra, seeded random streams and small statistics helpers.
//!
//! Everything that needs randomness takes an [`RngStream`]. A stream is a
//! ChaCha8 keystream keyed by the master seed and selected by a 64-bit stream
//! id, so two objects drawn from different ids are independent and a single
//! object can be regenerated without replaying anything else.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * y`, accumulated row by row.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), orow);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self += alpha * x y^T`.
    pub fn rank1_update(&mut self, alpha: f64, x: &[f64], y: &[f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            let c = alpha * xi;
            if c != 0.0 {
                axpy(c, y, self.row_mut(i));
            }
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        norm_sq(&self.data)
    }

    /// Power iteration on `A^T A`; a deterministic start vector keeps the
    /// estimate reproducible.
    pub fn spectral_norm_estimate(&self, iters: usize) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let mut v: Vec<f64> = (0..self.cols).map(|j| 1.0 + (j as f64) * 1e-3).collect();
        let mut sigma = 0.0;
        for _ in 0..iters.max(1) {
            let n = norm_sq(&v).sqrt();
            if n == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|x| *x /= n);
            let av = self.matvec(&v);
            sigma = norm_sq(&av).sqrt();
            v = self.matvec_t(&av);
        }
        sigma
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Eigen-decomposition of a symmetric matrix. Eigenvalues ascend; the
/// eigenvectors are the columns of the returned matrix.
pub fn sym_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(m.rows, m.cols);
    let eig = SymmetricEigen::new(m.to_nalgebra());
    let n = m.rows;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Distribution of i.i.d. initial entries; all have mean zero, variance one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    #[default]
    Gaussian,
    Rademacher,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    Uniform,
}

impl Dist {
    pub fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            Dist::Gaussian => rng.sample(StandardNormal),
            Dist::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Dist::Uniform => {
                let s = 3f64.sqrt();
                rng.random_range(-s..s)
            }
        }
    }
}

/// A reproducible source of randomness addressed by `(seed, stream id)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Stream for one object of one repetition of one experiment. The three
    /// coordinates are packed into disjoint bit ranges so distinct triples
    /// never share a keystream.
    pub fn for_object(seed: u64, experiment: u16, repetition: u32, object: u16) -> Self {
        let stream = ((experiment as u64) << 48) | ((repetition as u64) << 16) | object as u64;
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }

    pub fn vector(&self, n: usize, dist: Dist) -> Vec<f64> {
        let mut r = self.rng();
        (0..n).map(|_| dist.sample(&mut r)).collect()
    }

    pub fn matrix(&self, rows: usize, cols: usize, dist: Dist) -> Matrix {
        Matrix { rows, cols, data: self.vector(rows * cols, dist) }
    }
}

/// The streams of one repetition of one experiment; objects are addressed
/// by small integer ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunStreams {
    pub seed: u64,
    pub experiment: u16,
    pub repetition: u32,
}

impl RunStreams {
    pub fn new(seed: u64, experiment: u16, repetition: u32) -> Self {
        Self { seed, experiment, repetition }
    }

    pub fn object(&self, object: u16) -> RngStream {
        RngStream::for_object(self.seed, self.experiment, self.repetition, object)
    }
}

/// Size the global worker pool. Only the first call has an effect; without
/// the `parallel` feature this is a no-op.
pub fn configure_threads(n: usize) -> crate::Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

/// Map `f` over `0..n`, in parallel when the `parallel` feature is on.
/// Results keep their index order either way.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let mu = mean(x);
    x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

/// Sample excess kurtosis `m4 / m2^2 - 3` with central moments.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let mu = mean(x);
    let n = x.len() as f64;
    let m2 = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mu).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Weighted least-squares line `y ~ intercept + slope x`. Weights default
/// to one; `r2` is the weighted coefficient of determination.
pub fn fit_line(x: &[f64], y: &[f64], w: Option<&[f64]>) -> Option<LineFit> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let ones = vec![1.0; x.len()];
    let w = w.unwrap_or(&ones);
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * dy;
        syy += w[i] * dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit { slope, intercept, r2 })
}

/// Resample a polyline to `n` points equally spaced in arc length.
pub fn resample_by_arclength(path: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    if path.len() < 2 || n < 2 {
        return path.to_vec();
    }
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        let seg = norm_sq(&sub(&w[1], &w[0])).sqrt();
        cum.push(cum.last().unwrap() + seg);
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![path[0].clone(); n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let target = total * k as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(path[seg].iter().zip(&path[seg + 1]).map(|(a, b)| a + t * (b - a)).collect());
    }
    out
}

/// Discrete Fréchet distance between two point sequences.
pub fn discrete_frechet(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    if p.is_empty() || q.is_empty() {
        return f64::NAN;
    }
    let dist = |i: usize, j: usize| norm_sq(&sub(&p[i], &q[j])).sqrt();
    let mut prev = vec![0.0f64; q.len()];
    let mut cur = vec![0.0f64; q.len()];
    for i in 0..p.len() {
        for j in 0..q.len() {
            let d = dist(i, j);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[q.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(a.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.transpose().matvec(&[1.0, 1.0]), a.matvec_t(&[1.0, 1.0]));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0]]);
        assert!((a.spectral_norm_estimate(100) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn eigen_ascending() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let (vals, vecs) = sym_eigen(&a);
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
        let v = [vecs.get(0, 1), vecs.get(1, 1)];
        assert!((v[0] - v[1]).abs() < 1e-12);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = RngStream::for_object(7, 1, 2, 3);
        assert_eq!(s.vector(5, Dist::Gaussian), s.vector(5, Dist::Gaussian));
        let t = RngStream::for_object(7, 1, 2, 4);
        assert_ne!(s.vector(5, Dist::Gaussian), t.vector(5, Dist::Gaussian));
    }

    #[test]
    fn distributions_have_unit_variance() {
        for dist in [Dist::Gaussian, Dist::Rademacher, Dist::Uniform] {
            let x = RngStream::new(1, 0).vector(200_000, dist);
            assert!(mean(&x).abs() < 0.01, "{dist:?}");
            assert!((variance(&x) - 1.0).abs() < 0.02, "{dist:?}");
        }
        let u = RngStream::new(2, 0).vector(200_000, Dist::Uniform);
        assert!((excess_kurtosis(&u) + 1.2).abs() < 0.03);
        let r = RngStream::new(2, 0).vector(1000, Dist::Rademacher);
        assert!(r.iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = fit_line(&x, &y, None).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_of_parallel_segments() {
        let p = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        let q = vec![vec![0.0, 1.0], vec![2.0, 1.0]];
        assert!((discrete_frechet(&p, &q) - 2f64.sqrt()).abs() < 1e-12);
        let r = resample_by_arclength(&p, 5);
        assert_eq!(r.len(), 5);
        assert!((r[1][0] - 0.5).abs() < 1e-12);
    }
}
