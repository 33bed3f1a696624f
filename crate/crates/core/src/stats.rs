//! Covariance estimation, symmetric eigendecomposition and the
//! Karhunen–Loève transform built from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{mat_t_vec, mat_vec, Real};

/// Relative diagonal ridge added before eigendecomposition.
pub const RIDGE: f64 = 1e-8;
/// Cyclic Jacobi sweep limit.
pub const MAX_SWEEPS: usize = 100;
/// Convergence threshold on the largest off-diagonal, relative to ‖Σ‖_F.
pub const JACOBI_TOL: f64 = 1e-12;
const PSD_SLACK: f64 = 1e-9;
const CHUNK: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("spectrum has zero total energy")]
    ZeroSpectrum,
    #[error("energy fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("non-finite value in input")]
    NonFinite,
}

/// Running mean and covariance over `n`-dimensional samples.
///
/// Accumulation keeps a mean vector and the comoment matrix
/// `Σ_k (x_k − μ)(x_k − μ)ᵀ`; the covariance uses the population (1/N)
/// convention. Chunks are reduced two-pass and folded in with the pairwise
/// merge rule, so accumulating `A ∪ B` matches `merge(A, B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel<T> {
    n: usize,
    mean: Vec<T>,
    comoment: Vec<T>,
    count: u64,
}

impl<T: Real> CovarianceModel<T> {
    pub fn new(n: usize) -> Self {
        Self { n, mean: vec![T::zero(); n], comoment: vec![T::zero(); n * n], count: 0 }
    }

    /// Model with a prescribed mean and covariance, as if estimated from
    /// `sample_count` samples.
    pub fn from_covariance(mean: Vec<T>, cov: Vec<T>, sample_count: u64) -> Result<Self, StatsError> {
        let n = mean.len();
        if cov.len() != n * n {
            return Err(StatsError::DimensionMismatch { expected: n * n, got: cov.len() });
        }
        check_symmetric(&cov, n)?;
        let count = sample_count.max(1);
        let scale = T::of(count as f64);
        Ok(Self { n, mean, comoment: cov.into_iter().map(|v| v * scale).collect(), count })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn sample_count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Population covariance, row-major `n×n`.
    pub fn covariance(&self) -> Vec<T> {
        if self.count == 0 {
            return vec![T::zero(); self.n * self.n];
        }
        let inv = T::one() / T::of(self.count as f64);
        self.comoment.iter().map(|&v| v * inv).collect()
    }

    pub fn trace(&self) -> T {
        let cov = self.covariance();
        (0..self.n).map(|i| cov[i * self.n + i]).sum()
    }

    pub fn push(&mut self, x: &[T]) -> Result<(), StatsError> {
        self.extend_flat(x)
    }

    /// Accumulates samples laid out back to back, `n` values each.
    pub fn extend_flat<S: Copy + Into<T>>(&mut self, data: &[S]) -> Result<(), StatsError> {
        if self.n == 0 || data.len() % self.n != 0 {
            return Err(StatsError::DimensionMismatch { expected: self.n, got: data.len() % self.n.max(1) });
        }
        for chunk in data.chunks(CHUNK * self.n) {
            let part = Self::from_chunk(self.n, chunk)?;
            self.merge_in(&part);
        }
        Ok(())
    }

    /// Accumulates a stream of sample vectors.
    pub fn accumulate<I, V>(&mut self, samples: I) -> Result<(), StatsError>
    where
        I: IntoIterator<Item = V>,
        V: AsRef<[T]>,
    {
        let mut buf = Vec::with_capacity(CHUNK * self.n);
        for v in samples {
            let v = v.as_ref();
            if v.len() != self.n {
                return Err(StatsError::DimensionMismatch { expected: self.n, got: v.len() });
            }
            buf.extend_from_slice(v);
            if buf.len() == CHUNK * self.n {
                self.extend_flat(&buf)?;
                buf.clear();
            }
        }
        if !buf.is_empty() {
            self.extend_flat(&buf)?;
        }
        Ok(())
    }

    fn from_chunk<S: Copy + Into<T>>(n: usize, data: &[S]) -> Result<Self, StatsError> {
        let m = data.len() / n;
        let mut mean = vec![T::zero(); n];
        for x in data.chunks_exact(n) {
            for (mu, &v) in mean.iter_mut().zip(x) {
                let v: T = v.into();
                if !v.is_finite() {
                    return Err(StatsError::NonFinite);
                }
                *mu += v;
            }
        }
        let inv = T::one() / T::of(m as f64);
        mean.iter_mut().for_each(|v| *v *= inv);
        let mut comoment = vec![T::zero(); n * n];
        let mut d = vec![T::zero(); n];
        for x in data.chunks_exact(n) {
            for ((di, &v), &mu) in d.iter_mut().zip(x).zip(&mean) {
                *di = v.into() - mu;
            }
            for i in 0..n {
                let di = d[i];
                let row = &mut comoment[i * n + i..(i + 1) * n];
                for (c, &dj) in row.iter_mut().zip(&d[i..]) {
                    *c += di * dj;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                comoment[i * n + j] = comoment[j * n + i];
            }
        }
        Ok(Self { n, mean, comoment, count: m as u64 })
    }

    fn merge_in(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = T::of(self.count as f64);
        let nb = T::of(other.count as f64);
        let total = na + nb;
        let delta: Vec<T> = other.mean.iter().zip(&self.mean).map(|(&b, &a)| b - a).collect();
        let w = na * nb / total;
        for i in 0..self.n {
            for j in 0..self.n {
                let k = i * self.n + j;
                self.comoment[k] += other.comoment[k] + delta[i] * delta[j] * w;
            }
        }
        for (m, &d) in self.mean.iter_mut().zip(&delta) {
            *m += d * nb / total;
        }
        self.count += other.count;
    }

    /// Combines two independently accumulated models.
    pub fn merge(&self, other: &Self) -> Result<Self, StatsError> {
        if self.n != other.n {
            return Err(StatsError::DimensionMismatch { expected: self.n, got: other.n });
        }
        let mut out = self.clone();
        out.merge_in(other);
        Ok(out)
    }
}

fn check_symmetric<T: Real>(m: &[T], n: usize) -> Result<(), StatsError> {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.wide().abs()));
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            let a = m[i * n + j].wide();
            let b = m[j * n + i].wide();
            if !a.is_finite() || !b.is_finite() {
                return Err(StatsError::NonFinite);
            }
            worst = worst.max((a - b).abs());
        }
    }
    let tol = T::resolution(1e-12).wide() * scale;
    if worst > tol {
        return Err(StatsError::NotSymmetric(worst));
    }
    Ok(())
}

/// Eigenpairs sorted by descending eigenvalue; row `i` of `vectors` pairs
/// with `values[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition<T> {
    pub values: Vec<T>,
    pub vectors: Vec<T>,
    pub sweeps: usize,
}

impl<T: Real> EigenDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, i: usize) -> &[T] {
        let n = self.dim();
        &self.vectors[i * n..(i + 1) * n]
    }

    /// `Vᵀ Λ V`, the matrix the decomposition represents.
    pub fn reconstruct(&self) -> Vec<T> {
        let n = self.dim();
        let mut out = vec![T::zero(); n * n];
        for (k, &lam) in self.values.iter().enumerate() {
            let v = self.vector(k);
            for i in 0..n {
                let s = lam * v[i];
                for j in 0..n {
                    out[i * n + j] += s * v[j];
                }
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric row-major matrix.
///
/// Stops once the largest off-diagonal entry falls below
/// `1e-12·‖A‖_F` (or the scalar's epsilon, if coarser) or after
/// [`MAX_SWEEPS`] sweeps. Equal eigenvalues keep their input order and each
/// eigenvector's first largest-magnitude component is made positive.
pub fn eigendecompose_symmetric<T: Real>(
    matrix: &[T],
    n: usize,
) -> Result<EigenDecomposition<T>, StatsError> {
    if matrix.len() != n * n {
        return Err(StatsError::DimensionMismatch { expected: n * n, got: matrix.len() });
    }
    check_symmetric(matrix, n)?;
    let mut a = matrix.to_vec();
    // symmetrize exactly so both triangles evolve identically
    for i in 0..n {
        for j in 0..i {
            let m = (a[i * n + j] + a[j * n + i]) * T::of(0.5);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let frob = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol = T::resolution(JACOBI_TOL) * frob;
    let off_max = |a: &[T]| {
        let mut m = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                m = m.max(a[i * n + j].abs());
            }
        }
        m
    };

    let mut sweeps = 0;
    loop {
        let off = off_max(&a);
        if off <= tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(StatsError::NoConvergence { sweeps, residual: off.wide() });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (apq + apq);
                let t = if theta.abs() > T::of(1e150) {
                    T::one() / (theta + theta)
                } else {
                    let t = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    if theta < T::zero() { -t } else { t }
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let np = c * akp - s * akq;
                    let nq = s * akp + c * akq;
                    a[k * n + p] = np;
                    a[p * n + k] = np;
                    a[k * n + q] = nq;
                    a[q * n + k] = nq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep input order
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).expect("finite eigenvalues"));
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n * n);
    for &col in &order {
        values.push(a[col * n + col]);
        let mut vec: Vec<T> = (0..n).map(|k| v[k * n + col]).collect();
        let peak = vec.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let cut = peak * (T::one() - T::resolution(1e-9));
        if let Some(lead) = vec.iter().find(|x| x.abs() >= cut) {
            if *lead < T::zero() {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
        }
        vectors.extend(vec);
    }
    Ok(EigenDecomposition { values, vectors, sweeps })
}

/// Eigendecomposition of a model's covariance; negative eigenvalues within
/// the numerical PSD slack are clamped to zero.
pub fn eigendecompose<T: Real>(model: &CovarianceModel<T>) -> Result<EigenDecomposition<T>, StatsError> {
    let mut eig = eigendecompose_symmetric(&model.covariance(), model.dim())?;
    clamp_psd(&mut eig.values)?;
    Ok(eig)
}

fn clamp_psd<T: Real>(values: &mut [T]) -> Result<(), StatsError> {
    let peak = values.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let slack = T::resolution(PSD_SLACK) * peak;
    for v in values.iter_mut() {
        if *v < -slack {
            return Err(StatsError::NotPositiveSemidefinite(v.wide()));
        }
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    Ok(())
}

/// Orthonormal decorrelating transform: `y = T(x − μ)`, `x = Tᵀy + μ`.
/// Rows are principal directions in order of descending variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLTransform<T> {
    n: usize,
    matrix: Vec<T>,
    mean: Vec<T>,
    spectrum: Vec<T>,
}

impl<T: Real> KLTransform<T> {
    pub fn from_parts(matrix: Vec<T>, mean: Vec<T>, spectrum: Vec<T>) -> Result<Self, StatsError> {
        let n = mean.len();
        if matrix.len() != n * n {
            return Err(StatsError::DimensionMismatch { expected: n * n, got: matrix.len() });
        }
        if spectrum.len() != n {
            return Err(StatsError::DimensionMismatch { expected: n, got: spectrum.len() });
        }
        Ok(Self { n, matrix, mean, spectrum })
    }

    pub fn identity(n: usize) -> Self {
        let mut matrix = vec![T::zero(); n * n];
        for i in 0..n {
            matrix[i * n + i] = T::one();
        }
        Self { n, matrix, mean: vec![T::zero(); n], spectrum: vec![T::one(); n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[T] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.matrix[i * self.n..(i + 1) * self.n]
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn spectrum(&self) -> &[T] {
        &self.spectrum
    }

    /// Replaces the matrix, keeping mean and spectrum.
    pub fn with_matrix(&self, matrix: Vec<T>) -> Result<Self, StatsError> {
        Self::from_parts(matrix, self.mean.clone(), self.spectrum.clone())
    }

    fn check(&self, len: usize) -> Result<(), StatsError> {
        if len != self.n {
            return Err(StatsError::DimensionMismatch { expected: self.n, got: len });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, StatsError> {
        let mut y = vec![T::zero(); self.n];
        self.forward_into(x, &mut y)?;
        Ok(y)
    }

    /// Writes the leading `out.len()` coefficients of `T(x − μ)`.
    pub fn forward_into(&self, x: &[T], out: &mut [T]) -> Result<(), StatsError> {
        self.check(x.len())?;
        if out.len() > self.n {
            return Err(StatsError::DimensionMismatch { expected: self.n, got: out.len() });
        }
        let centered: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        mat_vec(&self.matrix[..out.len() * self.n], self.n, &centered, out);
        Ok(())
    }

    pub fn inverse(&self, y: &[T]) -> Result<Vec<T>, StatsError> {
        let mut x = vec![T::zero(); self.n];
        self.inverse_into(y, &mut x)?;
        Ok(x)
    }

    /// `Tᵀy + μ` where `y` holds the leading coefficients; missing
    /// trailing coefficients are taken as zero.
    pub fn inverse_into(&self, y: &[T], out: &mut [T]) -> Result<(), StatsError> {
        self.check(out.len())?;
        if y.len() > self.n {
            return Err(StatsError::DimensionMismatch { expected: self.n, got: y.len() });
        }
        mat_t_vec(&self.matrix[..y.len() * self.n], self.n, y, out);
        for (o, &m) in out.iter_mut().zip(&self.mean) {
            *o += m;
        }
        Ok(())
    }

    /// Largest `|(T Tᵀ − I)_ij|`.
    pub fn orthonormality_error(&self) -> T {
        let n = self.n;
        let mut worst = T::zero();
        for i in 0..n {
            for j in 0..n {
                let dot: T = self.row(i).iter().zip(self.row(j)).map(|(&a, &b)| a * b).sum();
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// `T Σ Tᵀ` for an arbitrary covariance.
    pub fn conjugate(&self, cov: &[T]) -> Vec<T> {
        let n = self.n;
        let mut tmp = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                tmp[i * n + j] = (0..n).map(|k| self.matrix[i * n + k] * cov[k * n + j]).sum();
            }
        }
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| tmp[i * n + k] * self.matrix[j * n + k]).sum();
            }
        }
        out
    }
}

/// Builds the KLT of a model. A ridge of `1e-8·trace(Σ)/n` is added before
/// the eigensolve and removed from the reported spectrum.
pub fn make_klt<T: Real>(model: &CovarianceModel<T>) -> Result<KLTransform<T>, StatsError> {
    let n = model.dim();
    let mut cov = model.covariance();
    let trace: T = (0..n).map(|i| cov[i * n + i]).sum();
    let ridge = T::of(RIDGE) * trace / T::of(n.max(1) as f64);
    for i in 0..n {
        cov[i * n + i] += ridge;
    }
    let mut eig = eigendecompose_symmetric(&cov, n)?;
    clamp_psd(&mut eig.values)?;
    let spectrum = eig.values.iter().map(|&v| (v - ridge).max(T::zero())).collect();
    Ok(KLTransform { n, matrix: eig.vectors, mean: model.mean().to_vec(), spectrum })
}

/// Smallest `k` whose leading eigenvalues carry at least `fraction` of the
/// total energy.
pub fn energy_ratio<T: Real>(spectrum: &[T], fraction: f64) -> Result<usize, StatsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StatsError::BadFraction(fraction));
    }
    let total: f64 = spectrum.iter().map(|v| v.wide()).sum();
    if !(total > 0.0) {
        return Err(StatsError::ZeroSpectrum);
    }
    let mut acc = 0.0;
    for (k, v) in spectrum.iter().enumerate() {
        acc += v.wide();
        if acc / total >= fraction - 1e-12 {
            return Ok(k + 1);
        }
    }
    Ok(spectrum.len())
}

/// Spectrum with cumulative energy fractions, for export to plotting tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumExport {
    pub eigenvalues: Vec<f64>,
    pub cumulative_fraction: Vec<f64>,
}

impl SpectrumExport {
    pub fn new<T: Real>(spectrum: &[T]) -> Self {
        let eigenvalues: Vec<f64> = spectrum.iter().map(|v| v.wide()).collect();
        let total: f64 = eigenvalues.iter().sum();
        let mut acc = 0.0;
        let cumulative_fraction = eigenvalues
            .iter()
            .map(|v| {
                acc += v;
                if total > 0.0 { acc / total } else { 0.0 }
            })
            .collect();
        Self { eigenvalues, cumulative_fraction }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(samples: &[[f64; 2]]) -> CovarianceModel<f64> {
        let mut m = CovarianceModel::new(2);
        m.accumulate(samples.iter()).unwrap();
        m
    }

    #[test]
    fn population_covariance_by_hand() {
        let m = model(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
        assert_eq!(m.mean(), &[0.0, 0.0]);
        assert_eq!(m.covariance(), vec![0.5, 0.0, 0.0, 0.5]);
        assert_eq!(m.sample_count(), 4);
    }

    #[test]
    fn single_sample_has_zero_covariance() {
        let m = model(&[[3.0, -2.0]]);
        assert_eq!(m.covariance(), vec![0.0; 4]);
        assert_eq!(m.mean(), &[3.0, -2.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut m = CovarianceModel::<f64>::new(3);
        assert_eq!(
            m.push(&[1.0, 2.0]),
            Err(StatsError::DimensionMismatch { expected: 3, got: 2 })
        );
        let other = CovarianceModel::<f64>::new(2);
        assert!(m.merge(&other).is_err());
    }

    #[test]
    fn identity_eigendecomposition() {
        let m = CovarianceModel::<f64>::from_covariance(vec![0.0; 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 1)
            .unwrap();
        let e = eigendecompose(&m).unwrap();
        assert_eq!(e.values, vec![1.0; 3]);
        assert_eq!(e.vectors, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn analytic_two_by_two() {
        let m = CovarianceModel::<f64>::from_covariance(vec![0.0; 2], vec![1.0, 0.9, 0.9, 1.0], 1).unwrap();
        let e = eigendecompose(&m).unwrap();
        assert!((e.values[0] - 1.9).abs() < 1e-12);
        assert!((e.values[1] - 0.1).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in e.vectors.iter().zip([h, h, h, -h]) {
            assert!((got - want).abs() < 1e-12, "{:?}", e.vectors);
        }
    }

    #[test]
    fn indefinite_model_is_rejected() {
        let m = CovarianceModel::<f64>::from_covariance(vec![0.0; 2], vec![0.0, 1.0, 1.0, 0.0], 1).unwrap();
        assert!(matches!(eigendecompose(&m), Err(StatsError::NotPositiveSemidefinite(_))));
        assert!(eigendecompose_symmetric(&[0.0, 1.0, 1.0, 0.0], 2).is_ok());
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        assert!(matches!(
            eigendecompose_symmetric(&[1.0, 0.5, 0.2, 1.0], 2),
            Err(StatsError::NotSymmetric(_))
        ));
    }

    #[test]
    fn diagonal_klt_is_identity() {
        let m = CovarianceModel::<f64>::from_covariance(vec![0.0; 2], vec![4.0, 0.0, 0.0, 1.0], 1).unwrap();
        let t = make_klt(&m).unwrap();
        assert_eq!(t.matrix(), &[1.0, 0.0, 0.0, 1.0]);
        assert!((t.spectrum()[0] - 4.0).abs() < 1e-12);
        assert!((t.spectrum()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlated_klt_spectrum() {
        let m = CovarianceModel::<f64>::from_covariance(vec![0.0; 2], vec![1.0, 0.9, 0.9, 1.0], 1).unwrap();
        let t = make_klt(&m).unwrap();
        assert!((t.spectrum()[0] - 1.9).abs() < 1e-12);
        assert!((t.spectrum()[1] - 0.1).abs() < 1e-12);
        assert!(t.orthonormality_error() < 1e-15);
    }

    #[test]
    fn zero_covariance_gives_identity_transform() {
        let m = model(&[[2.0, 2.0], [2.0, 2.0]]);
        let t = make_klt(&m).unwrap();
        assert_eq!(t.matrix(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.spectrum(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_and_inverse() {
        let t = KLTransform::from_parts(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(t.forward(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);

        let m = CovarianceModel::<f64>::from_covariance(vec![1.0, 2.0], vec![1.0, 0.9, 0.9, 1.0], 1).unwrap();
        let t = make_klt(&m).unwrap();
        assert_eq!(t.forward(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let x = [0.3, -1.7];
        let back = t.inverse(&t.forward(&x).unwrap()).unwrap();
        for (a, b) in back.iter().zip(x) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(t.forward(&[1.0]).is_err());
        assert!(t.inverse(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn energy_ratio_examples() {
        assert_eq!(energy_ratio(&[3.0, 1.0, 0.0], 0.75).unwrap(), 1);
        assert_eq!(energy_ratio(&[1.0, 1.0, 1.0, 1.0], 1.0).unwrap(), 4);
        assert_eq!(energy_ratio(&[1.9, 0.1], 0.9).unwrap(), 1);
        assert_eq!(energy_ratio(&[0.0, 0.0], 0.5), Err(StatsError::ZeroSpectrum));
        assert!(energy_ratio(&[1.0], 0.0).is_err());
        assert!(energy_ratio(&[1.0], 1.5).is_err());
    }

    #[test]
    fn f32_instantiation_works() {
        let m = CovarianceModel::<f32>::from_covariance(vec![0.0; 2], vec![1.0, 0.9, 0.9, 1.0], 1).unwrap();
        let t = make_klt(&m).unwrap();
        assert!((t.spectrum()[0] - 1.9).abs() < 1e-5);
        assert!(t.orthonormality_error() < 1e-6);
    }

    #[test]
    fn spectrum_export_cumulates() {
        let e = SpectrumExport::new(&[3.0f64, 1.0]);
        assert_eq!(e.cumulative_fraction, vec![0.75, 1.0]);
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("cumulative_fraction"));
    }
}
