//! Score computations: MSE score, NMSE, per-island min-max normalisation,
//! the annealed constraint penalty, cluster softmax with a temperature
//! schedule, and an empirical Rademacher estimator.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seeds;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("target variance is zero")]
    ZeroVariance,
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
}

/// Shrink-and-shift penalty parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaceParams {
    /// Half-width of the reward range around 1.
    pub beta: f64,
    /// Maximum downward shift for invalid candidates.
    pub alpha: f64,
    /// Maximum shrinkage ratio for invalid candidates.
    pub eta: f64,
    /// Exponential base controlling annealing speed.
    pub base: f64,
}

impl Default for PaceParams {
    fn default() -> Self {
        PaceParams { beta: 0.6, alpha: 1.2, eta: 1.0, base: 60.0 }
    }
}

impl PaceParams {
    pub fn validate(&self) -> Result<(), ScoringError> {
        let ok = self.beta > 0.0
            && self.beta < 1.0
            && self.alpha >= 0.0
            && (0.0..=1.0).contains(&self.eta)
            && self.base > 1.0
            && self.alpha.is_finite()
            && self.base.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ScoringError::OutOfRange(format!("{self:?}")))
        }
    }

    /// `(B^t - 1)/(B - 1)`: 0 at `t = 0`, 1 at `t = 1`.
    pub fn phi(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t == 0.0 {
            0.0
        } else if t == 1.0 {
            1.0
        } else {
            (self.base.powf(t) - 1.0) / (self.base - 1.0)
        }
    }

    pub fn shrink(&self, t: f64) -> f64 {
        (1.0 - self.eta * self.phi(t)).max(0.0)
    }

    pub fn shift(&self, t: f64) -> f64 {
        self.alpha * self.phi(t)
    }
}

/// Sampling budget progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetState {
    pub n_curr: u64,
    pub n_max: u64,
}

impl BudgetState {
    pub fn new(n_curr: u64, n_max: u64) -> Self {
        BudgetState { n_curr, n_max }
    }

    /// Progress `t` in `[0, 1]`.
    pub fn t(&self) -> f64 {
        if self.n_max == 0 {
            1.0
        } else {
            (self.n_curr as f64 / self.n_max as f64).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_init: f64,
    pub period: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { tau_init: 0.1, period: 30_000 }
    }
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<(), ScoringError> {
    if pred.len() != target.len() {
        return Err(ScoringError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(ScoringError::Empty);
    }
    for (i, (p, y)) in pred.iter().zip(target).enumerate() {
        if !p.is_finite() || !y.is_finite() {
            return Err(ScoringError::NonFinite(i));
        }
    }
    Ok(())
}

fn mse_unchecked(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / pred.len() as f64
}

/// Negative mean squared error; 0 means an exact fit.
pub fn s_mse(pred: &[f64], target: &[f64]) -> Result<f64, ScoringError> {
    check_pair(pred, target)?;
    Ok(-mse_unchecked(pred, target))
}

/// MSE divided by the population variance of `target`.
pub fn nmse(pred: &[f64], target: &[f64]) -> Result<f64, ScoringError> {
    check_pair(pred, target)?;
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let var = target.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(ScoringError::ZeroVariance);
    }
    Ok(mse_unchecked(pred, target) / var)
}

/// Min-max normalisation into `[0, 1]`. All-equal input maps to 0.5.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>, ScoringError> {
    if scores.is_empty() {
        return Err(ScoringError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(ScoringError::NonFinite(i));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![0.5; scores.len()]);
    }
    Ok(scores.iter().map(|s| ((s - lo) / span).clamp(0.0, 1.0)).collect())
}

/// Annealed score of a candidate with normalised score `s_norm`.
pub fn pace_score(s_norm: f64, valid: bool, budget: BudgetState, pp: &PaceParams) -> f64 {
    let base = (1.0 - pp.beta) + 2.0 * pp.beta * s_norm;
    if valid {
        base
    } else {
        let t = budget.t();
        pp.shrink(t) * base - pp.shift(t)
    }
}

/// Softmax of `scores / tau`, computed after subtracting the maximum.
pub fn cluster_distribution(scores: &[f64], tau: f64) -> Result<Vec<f64>, ScoringError> {
    if scores.is_empty() {
        return Err(ScoringError::Empty);
    }
    if !(tau > 0.0) {
        return Err(ScoringError::OutOfRange(format!("tau = {tau}")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(ScoringError::NonFinite(i));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Sawtooth linear decay from `tau_init`, restarting every `period` samples
/// and floored at `tau_init / 100`.
pub fn temperature(n_samples: u64, sched: &TemperatureSchedule) -> f64 {
    let floor = sched.tau_init / 100.0;
    if sched.period == 0 {
        return sched.tau_init;
    }
    let phase = (n_samples % sched.period) as f64 / sched.period as f64;
    (sched.tau_init * (1.0 - phase)).max(floor)
}

fn check_outputs(outputs: &[Vec<f64>]) -> Result<usize, ScoringError> {
    let first = outputs.first().ok_or(ScoringError::Empty)?;
    let n = first.len();
    if n == 0 {
        return Err(ScoringError::Empty);
    }
    for o in outputs {
        if o.len() != n {
            return Err(ScoringError::LengthMismatch(o.len(), n));
        }
    }
    Ok(n)
}

fn sup_correlation(outputs: &[Vec<f64>], signs: &[f64]) -> f64 {
    let n = signs.len() as f64;
    outputs.iter().map(|f| f.iter().zip(signs).map(|(a, s)| a * s).sum::<f64>() / n).fold(f64::NEG_INFINITY, f64::max)
}

/// Monte-Carlo estimate of `E_sigma[sup_f (1/N) sum sigma_i f(x_i)]`.
///
/// Sign vectors depend only on `seed`, `trials` and `N`, so estimates over
/// a subset of candidates never exceed the estimate over the full set.
pub fn empirical_rademacher(outputs: &[Vec<f64>], trials: usize, seed: u64) -> Result<f64, ScoringError> {
    let n = check_outputs(outputs)?;
    if trials == 0 {
        return Err(ScoringError::OutOfRange("trials = 0".into()));
    }
    let mut signs = vec![0.0; n];
    let mut total = 0.0;
    for k in 0..trials {
        let mut rng = seeds::rng(seeds::derive(seed, 0x7261_6465, k as u64));
        for s in signs.iter_mut() {
            *s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        total += sup_correlation(outputs, &signs);
    }
    Ok(total / trials as f64)
}

/// Exact expectation over all `2^N` sign vectors. Limited to `N <= 20`.
pub fn empirical_rademacher_exhaustive(outputs: &[Vec<f64>]) -> Result<f64, ScoringError> {
    let n = check_outputs(outputs)?;
    if n > 20 {
        return Err(ScoringError::OutOfRange(format!("N = {n} too large for enumeration")));
    }
    let mut signs = vec![0.0; n];
    let mut total = 0.0;
    for mask in 0u32..(1 << n) {
        for (i, s) in signs.iter_mut().enumerate() {
            *s = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        total += sup_correlation(outputs, &signs);
    }
    Ok(total / f64::from(1u32 << n))
}
