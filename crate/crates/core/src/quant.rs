//! Uniform scalar quantization, step/rate laws for Gaussian sources,
//! rate allocation across components, and high-rate distortion prediction.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};
use thiserror::Error;

use crate::scalar::Real;

/// Empirical constant relating the step of an entropy-`R` quantizer of a
/// unit Gaussian to `2^-R`, valid for `R ≥ 2`.
pub const STEP_RATE_CONSTANT: f64 = 4.2184;
/// Tail mass below which Gaussian bin probabilities are no longer summed.
pub const TAIL_MASS: f64 = 1e-12;
/// Entropy tolerance (bits) for the numeric step solver.
pub const RATE_TOL: f64 = 1e-4;
/// Highest rate the numeric solver accepts.
pub const MAX_SOLVER_RATE: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("invalid quantizer: step {step}, clip {clip}")]
    InvalidSpec { step: f64, clip: f64 },
    #[error("rate {0} outside the solver's range (0, {MAX_SOLVER_RATE}]")]
    RateOutOfRange(f64),
    #[error("standard deviation must be positive, got {0}")]
    BadSigma(f64),
    #[error("could not bracket a step for rate {rate}; best entropy {entropy}")]
    NotBracketed { rate: f64, entropy: f64 },
    #[error("all variances are zero")]
    AllVariancesZero,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Mid-tread uniform quantizer: reconstruction levels `k·step`, inputs
/// clamped to `[−clip, clip]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec<T> {
    step: T,
    clip: T,
}

impl<T: Real> QuantizerSpec<T> {
    pub fn new(step: T, clip: T) -> Result<Self, QuantError> {
        if !(step > T::zero() && step.is_finite() && clip.is_finite() && clip >= step / T::of(2.0)) {
            return Err(QuantError::InvalidSpec { step: step.wide(), clip: clip.wide() });
        }
        Ok(Self { step, clip })
    }

    pub fn step(&self) -> T {
        self.step
    }

    pub fn clip(&self) -> T {
        self.clip
    }

    /// Largest representable `|k|`.
    pub fn max_index(&self) -> i64 {
        (self.clip / self.step).floor().to_i64().unwrap_or(i64::MAX)
    }

    pub fn level_count(&self) -> u64 {
        2 * self.max_index() as u64 + 1
    }

    /// Bits needed to address every level with a fixed-width code.
    pub fn fixed_width_bits(&self) -> u32 {
        let levels = self.level_count();
        64 - (levels - 1).leading_zeros()
    }

    #[inline]
    pub fn index(&self, x: T) -> i32 {
        let clamped = x.max(-self.clip).min(self.clip);
        // `round` is half-away-from-zero
        let k = (clamped / self.step).round().to_i64().unwrap_or(0);
        let m = self.max_index();
        k.clamp(-m, m) as i32
    }

    #[inline]
    pub fn level(&self, k: i32) -> T {
        T::of(k as f64) * self.step
    }
}

pub fn quantize<T: Real>(x: &[T], spec: &QuantizerSpec<T>) -> Vec<i32> {
    x.iter().map(|&v| spec.index(v)).collect()
}

pub fn dequantize<T: Real>(k: &[i32], spec: &QuantizerSpec<T>) -> Vec<T> {
    k.iter().map(|&i| spec.level(i)).collect()
}

/// `4.2184·2^-R`.
pub fn step_for_rate_approx<T: Real>(rate: T) -> T {
    T::of(STEP_RATE_CONSTANT) * T::of(2.0).powf(-rate)
}

/// Upper Gaussian tail `P(Z > x)`.
fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Entropy (bits) of the mid-tread bin indices of `N(0, 1)` quantized with
/// the given step.
pub fn gaussian_bin_entropy(step: f64) -> f64 {
    let p0 = erf(step / (2.0 * std::f64::consts::SQRT_2));
    let mut h = if p0 > 0.0 { -p0 * p0.log2() } else { 0.0 };
    let mut k = 1.0f64;
    loop {
        let upper = upper_tail((k - 0.5) * step);
        let lower = upper_tail((k + 0.5) * step);
        let p = upper - lower;
        if p > 0.0 {
            h -= 2.0 * p * p.log2();
        }
        if 2.0 * lower < TAIL_MASS {
            break;
        }
        k += 1.0;
    }
    h
}

fn unit_step_for_rate(rate: f64) -> Result<f64, QuantError> {
    if !(rate > 0.0 && rate <= MAX_SOLVER_RATE) {
        return Err(QuantError::RateOutOfRange(rate));
    }
    let start = STEP_RATE_CONSTANT * (-rate).exp2();
    let not_bracketed = |d: f64| QuantError::NotBracketed { rate, entropy: gaussian_bin_entropy(d) };

    let mut hi = start;
    let mut tries = 0;
    while gaussian_bin_entropy(hi) > rate {
        hi *= 2.0;
        tries += 1;
        if tries > 64 {
            return Err(not_bracketed(hi));
        }
    }
    let mut lo = start;
    tries = 0;
    while gaussian_bin_entropy(lo) < rate {
        lo *= 0.5;
        tries += 1;
        if tries > 64 {
            return Err(not_bracketed(lo));
        }
    }
    // entropy decreases in the step: H(lo) ≥ rate ≥ H(hi)
    for _ in 0..200 {
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
        let mid = (lo * hi).sqrt();
        if gaussian_bin_entropy(mid) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let step = (lo * hi).sqrt();
    let h = gaussian_bin_entropy(step);
    if (h - rate).abs() > RATE_TOL {
        return Err(QuantError::NotBracketed { rate, entropy: h });
    }
    Ok(step)
}

/// Step whose bin-index entropy on `N(0, σ²)` equals `rate` bits, solved by
/// bisection. Scales exactly with `σ`.
pub fn step_for_rate_exact<T: Real>(rate: T, sigma: T) -> Result<T, QuantError> {
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(QuantError::BadSigma(sigma.wide()));
    }
    Ok(sigma * T::of(unit_step_for_rate(rate.wide())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMode {
    /// Closed form followed by a zero clamp; may exceed the budget.
    ClosedFormClamp,
    /// Reverse water-filling: re-solves on the active set until every
    /// active rate is nonnegative, preserving the mean rate.
    #[default]
    Waterfill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAllocation<T> {
    pub rates: Vec<T>,
    pub target: T,
    pub active_set: Vec<usize>,
}

impl<T: Real> RateAllocation<T> {
    pub fn mean_rate(&self) -> T {
        if self.rates.is_empty() {
            return T::zero();
        }
        self.rates.iter().copied().sum::<T>() / T::of(self.rates.len() as f64)
    }
}

/// Closed-form rates on `active` with `budget` total bits.
fn closed_form<T: Real>(variances: &[T], active: &[usize], budget: T) -> Vec<(usize, T)> {
    let half = T::of(0.5);
    let m = T::of(active.len() as f64);
    let mean_log = active.iter().map(|&i| half * variances[i].log2()).sum::<T>() / m;
    active
        .iter()
        .map(|&i| (i, budget / m + half * variances[i].log2() - mean_log))
        .collect()
}

/// Splits an average rate `target` across components with the given
/// variances. Zero-variance components receive no bits and are left out of
/// the geometric mean.
pub fn allocate_rates<T: Real>(
    variances: &[T],
    target: T,
    mode: AllocationMode,
) -> Result<RateAllocation<T>, QuantError> {
    if variances.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
        return Err(QuantError::Invalid("variances must be finite and nonnegative".into()));
    }
    if !(target >= T::zero()) || !target.is_finite() {
        return Err(QuantError::Invalid(format!("target rate {target} must be nonnegative")));
    }
    let mut active: Vec<usize> = (0..variances.len()).filter(|&i| variances[i] > T::zero()).collect();
    if active.is_empty() {
        return Err(QuantError::AllVariancesZero);
    }
    let n = T::of(variances.len() as f64);
    let mut rates = vec![T::zero(); variances.len()];
    match mode {
        AllocationMode::ClosedFormClamp => {
            for (i, r) in closed_form(variances, &active, target * T::of(active.len() as f64)) {
                rates[i] = r.max(T::zero());
            }
        }
        AllocationMode::Waterfill => {
            let budget = target * n;
            loop {
                let sol = closed_form(variances, &active, budget);
                if sol.iter().all(|&(_, r)| r >= T::zero()) {
                    for (i, r) in sol {
                        rates[i] = r;
                    }
                    break;
                }
                active = sol.into_iter().filter(|&(_, r)| r >= T::zero()).map(|(i, _)| i).collect();
                if active.is_empty() {
                    break;
                }
            }
        }
    }
    let active_set = (0..rates.len()).filter(|&i| rates[i] > T::zero()).collect();
    Ok(RateAllocation { rates, target, active_set })
}

/// `πe/6`, the high-rate distortion factor of an entropy-coded uniform
/// quantizer on a Gaussian source.
pub fn distortion_factor<T: Real>() -> T {
    T::of(std::f64::consts::PI * std::f64::consts::E / 6.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionPrediction<T> {
    pub per_index: Vec<T>,
    /// Mean over components.
    pub total: T,
}

/// `D_i = (πe/6)·σ_i²·2^(−2R_i)` per component and their mean.
pub fn predict_distortion<T: Real>(variances: &[T], rates: &[T]) -> Result<DistortionPrediction<T>, QuantError> {
    if variances.len() != rates.len() || variances.is_empty() {
        return Err(QuantError::Invalid(format!(
            "{} variances vs {} rates",
            variances.len(),
            rates.len()
        )));
    }
    let c = distortion_factor::<T>();
    let per_index: Vec<T> = variances
        .iter()
        .zip(rates)
        .map(|(&v, &r)| c * v * T::of(2.0).powf(-(r + r)))
        .collect();
    let total = per_index.iter().copied().sum::<T>() / T::of(per_index.len() as f64);
    Ok(DistortionPrediction { per_index, total })
}

/// Minimum mean distortion at average rate `rate` under optimal
/// allocation with every component active:
/// `(πe/6)·(Πσ_i²)^(1/n)·2^(−2R)`.
pub fn optimal_distortion<T: Real>(variances: &[T], rate: T) -> T {
    let n = T::of(variances.len() as f64);
    let log_geo = variances.iter().map(|v| v.log2()).sum::<T>() / n;
    distortion_factor::<T>() * T::of(2.0).powf(log_geo - (rate + rate))
}
