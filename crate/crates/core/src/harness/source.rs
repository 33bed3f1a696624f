//! Seeded Gaussian sources and covariance constructions.
//!
//! Uniforms come from SplitMix64 (a Weyl counter passed through a 64-bit
//! mixer, state initialised to the seed). Normals use the Box–Muller pair
//! `√(−2 ln u₁)·(cos 2πu₂, sin 2πu₂)` with `u = (⌊x/2¹¹⌋ + 1)·2⁻⁵³`.

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;

use crate::tensor::{reassemble, ActivationTensor, BlockSequence, BlockShape};

use super::HarnessError;

/// Samples per independently seeded chunk in [`SyntheticSource::generate`].
pub const SAMPLE_CHUNK: usize = 1024;

/// Derived seed for worker or chunk `index`.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

#[derive(Debug, Clone)]
pub struct GaussianRng {
    inner: SplitMix64,
    spare: Option<f64>,
}

impl GaussianRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: SplitMix64::seed_from_u64(seed), spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform().ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * self.uniform()).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}

/// Lower Cholesky factor of a PSD matrix. Pivots at or below
/// `1e-12·max diag` are treated as zero and their column left empty, so
/// rank-deficient matrices factor exactly.
pub fn cholesky_psd(cov: &[f64], n: usize) -> Result<Vec<f64>, HarnessError> {
    if cov.len() != n * n {
        return Err(HarnessError::Spec(format!("covariance has {} entries, expected {}", cov.len(), n * n)));
    }
    let scale = (0..n).map(|i| cov[i * n + i]).fold(0.0f64, f64::max);
    let tol = 1e-12 * scale;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let d = cov[j * n + j] - (0..j).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
        if d < -1e-9 * scale.max(f64::MIN_POSITIVE) || !d.is_finite() {
            return Err(HarnessError::NotPositiveSemidefinite(d));
        }
        if d <= tol {
            continue;
        }
        let p = d.sqrt();
        l[j * n + j] = p;
        for i in j + 1..n {
            let s = cov[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = s / p;
        }
    }
    Ok(l)
}

/// Correlated Gaussian vectors `x = μ + Lz`.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    n: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
    factor: Vec<f64>,
    seed: u64,
}

impl SyntheticSource {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, seed: u64) -> Result<Self, HarnessError> {
        let n = mean.len();
        let factor = cholesky_psd(&cov, n)?;
        Ok(Self { n, mean, cov, factor, seed })
    }

    pub fn zero_mean(cov: Vec<f64>, n: usize, seed: u64) -> Result<Self, HarnessError> {
        Self::new(vec![0.0; n], cov, seed)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same distribution, different stream.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// `count` samples, flat. Chunk `k` of [`SAMPLE_CHUNK`] samples draws
    /// from its own generator seeded with `seed ⊕ k`.
    pub fn generate(&self, count: usize) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; count * n];
        out.par_chunks_mut(SAMPLE_CHUNK * n).enumerate().for_each(|(k, chunk)| {
            let mut rng = GaussianRng::new(sub_seed(self.seed, k as u64));
            let mut z = vec![0.0; n];
            for x in chunk.chunks_exact_mut(n) {
                rng.fill_normal(&mut z);
                for (i, xi) in x.iter_mut().enumerate() {
                    let row = &self.factor[i * n..i * n + i + 1];
                    *xi = self.mean[i] + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        });
        out
    }

    /// Tensor whose `shape` blocks are independent draws from the source.
    pub fn generate_tensor(&self, height: usize, width: usize, channels: usize, shape: BlockShape) -> Result<ActivationTensor, HarnessError> {
        if shape.n() != self.n {
            return Err(HarnessError::Spec(format!("block {shape} holds {} values, source is {}-dim", shape.n(), self.n)));
        }
        shape.check_against(channels)?;
        let count = shape.block_count(height, width, channels);
        let data = self.generate(count).into_iter().map(|v| v as f32).collect();
        let blocks = BlockSequence::from_blocks(data, (height, width, channels), shape)?;
        Ok(reassemble(&blocks)?)
    }
}

pub fn identity_cov(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        c[i * n + i] = 1.0;
    }
    c
}

/// Unit variances, correlation `rho` between every pair.
pub fn equicorrelated(n: usize, rho: f64) -> Vec<f64> {
    (0..n * n).map(|k| if k / n == k % n { 1.0 } else { rho }).collect()
}

/// Haar-ish random orthogonal matrix: Gram–Schmidt on Gaussian rows.
pub fn random_orthogonal(n: usize, rng: &mut GaussianRng) -> Vec<f64> {
    let mut q = vec![0.0; n * n];
    let mut i = 0;
    while i < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for j in 0..i {
                let d: f64 = v.iter().zip(&q[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(&q[j * n..(j + 1) * n]) {
                    *a -= d * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for (dst, a) in q[i * n..(i + 1) * n].iter_mut().zip(&v) {
            *dst = a / norm;
        }
        i += 1;
    }
    q
}

/// `Qᵀ diag(eigenvalues) Q` for an orthogonal `Q` (rows are eigenvectors).
pub fn with_spectrum(eigenvalues: &[f64], q: &[f64]) -> Vec<f64> {
    let n = eigenvalues.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n).map(|k| q[k * n + i] * eigenvalues[k] * q[k * n + j]).sum();
            c[i * n + j] = v;
            c[j * n + i] = v;
        }
    }
    c
}

/// Random PSD matrix with log-uniform eigenvalues over four decades.
pub fn random_psd(n: usize, rng: &mut GaussianRng) -> Vec<f64> {
    let eig: Vec<f64> = (0..n).map(|_| 10f64.powf(4.0 * rng.uniform() - 2.0)).collect();
    with_spectrum(&eig, &random_orthogonal(n, rng))
}

/// Rate saving at equal distortion from decorrelation,
/// `(1/2n)·log2(Π σᵢ² / det Σ)`. Singular matrices give `+∞`.
pub fn coding_gain(cov: &[f64], n: usize) -> Result<f64, HarnessError> {
    let l = cholesky_psd(cov, n)?;
    let mut log_ratio = 0.0;
    for i in 0..n {
        let (var, pivot) = (cov[i * n + i], l[i * n + i]);
        if var <= 0.0 {
            return Err(HarnessError::Spec(format!("component {i} has zero variance")));
        }
        if pivot == 0.0 {
            return Ok(f64::INFINITY);
        }
        log_ratio += var.log2() - 2.0 * pivot.log2();
    }
    Ok(log_ratio / (2.0 * n as f64))
}
