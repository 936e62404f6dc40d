//! Parameter-update machinery: Ornstein-Uhlenbeck exploration noise,
//! polynomial potential surrogates fitted by ordinary least squares,
//! the Stackelberg leader gradient, leader/follower update rules, and
//! the follower multi-step schedulers.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::maps::PerformanceMap;

/// Mean-reversion rate of the exploration noise.
pub const DEFAULT_OU_THETA: f64 = 0.15;
/// Long-run mean of the exploration noise.
pub const DEFAULT_OU_MU: f64 = 0.0;
/// Discretization step of the exploration noise.
pub const DEFAULT_OU_DT: f64 = 1.0;
/// Initial exploration volatility.
pub const DEFAULT_SIGMA0: f64 = 0.2;
/// Per-episode exploration decay.
pub const DEFAULT_SIGMA_DECAY: f64 = 0.99;
/// Exploration volatility floor.
pub const DEFAULT_SIGMA_FLOOR: f64 = 0.01;
/// Curvature magnitude below which the leader gradient falls back to the
/// partial derivative.
pub const DEFAULT_EPS_HESS: f64 = 1e-6;
/// Design-matrix condition estimate above which a fit is rejected.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub enum LearnError {
    InsufficientSamples { needed: usize, got: usize },
    IllConditioned { condition: f64 },
    NotFitted,
    NonFiniteGradient,
}

impl fmt::Display for LearnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnError::InsufficientSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            LearnError::IllConditioned { condition } => {
                write!(f, "design matrix condition estimate {condition:.3e} over limit")
            }
            LearnError::NotFitted => write!(f, "model queried before a successful fit"),
            LearnError::NonFiniteGradient => write!(f, "update gradient is not finite"),
        }
    }
}

impl std::error::Error for LearnError {}

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck exploration noise
// ---------------------------------------------------------------------------

/// Euler-Maruyama discretization of a mean-reverting noise process with a
/// private seeded generator. Every `step` consumes exactly one Gaussian
/// draw, so streams stay aligned across configurations.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub theta: f64,
    pub mu: f64,
    pub dt: f64,
    sigma: f64,
    x: f64,
    rng: ChaCha12Rng,
    draws: u64,
}

impl OuNoise {
    pub fn new(theta: f64, mu: f64, sigma: f64, dt: f64, seed: u64, stream: u64) -> Self {
        assert!(theta >= 0.0 && sigma >= 0.0 && dt > 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        OuNoise { theta, mu, dt, sigma, x: mu, rng, draws: 0 }
    }

    pub fn with_defaults(sigma: f64, seed: u64, stream: u64) -> Self {
        Self::new(DEFAULT_OU_THETA, DEFAULT_OU_MU, sigma, DEFAULT_OU_DT, seed, stream)
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        assert!(sigma >= 0.0);
        self.sigma = sigma;
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn value(&self) -> f64 {
        self.x
    }

    pub fn set_value(&mut self, x: f64) {
        self.x = x;
    }

    /// Number of Gaussian draws consumed so far.
    pub fn draw_count(&self) -> u64 {
        self.draws
    }

    /// Advance the process one step and return the new value.
    pub fn step(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.draws += 1;
        self.x += self.theta * (self.mu - self.x) * self.dt + self.sigma * self.dt.sqrt() * z;
        self.x
    }
}

/// Exponential exploration decay with a floor, evaluated per episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub sigma0: f64,
    pub decay: f64,
    pub floor: f64,
}

impl ExplorationSchedule {
    pub fn new(sigma0: f64, decay: f64, floor: f64) -> Self {
        assert!(sigma0 >= 0.0 && decay > 0.0 && decay <= 1.0 && floor >= 0.0);
        ExplorationSchedule { sigma0, decay, floor }
    }

    pub fn sigma_at(&self, episode: u64) -> f64 {
        (self.sigma0 * self.decay.powf(episode as f64)).max(self.floor)
    }
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule::new(DEFAULT_SIGMA0, DEFAULT_SIGMA_DECAY, DEFAULT_SIGMA_FLOOR)
    }
}

// ---------------------------------------------------------------------------
// Polynomial potential surrogate
// ---------------------------------------------------------------------------

/// Monomial exponents (i, j) for x1^i * x2^j in the documented coefficient
/// order: per total degree d, first (d, 0), then (0, d), then the mixed
/// terms (d-1, 1) .. (1, d-1). For degree 2 this is
/// {1, x1, x2, x1^2, x2^2, x1*x2}.
pub fn basis_exponents(degree: usize) -> Vec<(u32, u32)> {
    let mut out = vec![(0, 0)];
    for d in 1..=degree as u32 {
        out.push((d, 0));
        out.push((0, d));
        for i in (1..d).rev() {
            out.push((i, d - i));
        }
    }
    out
}

/// Number of coefficients of the degree-n basis: (n+1)(n+2)/2.
pub fn coefficient_count(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

/// Evaluation of a fitted surrogate and the partial derivatives needed by
/// the update rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyQuery {
    pub value: f64,
    pub d_x1: f64,
    pub d_x2: f64,
    pub d2_x2x2: f64,
    pub d2_x1x2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub residual_norm: f64,
    pub condition: f64,
}

/// Bivariate polynomial surrogate of a role potential over
/// (own action, other coalition summary), fitted by least squares through
/// an orthogonal (QR) factorization. A fit that fails validation leaves
/// any previously fitted coefficients in place.
#[derive(Debug, Clone)]
pub struct PolyModel {
    degree: usize,
    exponents: Vec<(u32, u32)>,
    coeffs: Option<DVector<f64>>,
    condition_limit: f64,
}

impl PolyModel {
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1);
        PolyModel {
            degree,
            exponents: basis_exponents(degree),
            coeffs: None,
            condition_limit: DEFAULT_CONDITION_LIMIT,
        }
    }

    pub fn with_condition_limit(mut self, limit: f64) -> Self {
        self.condition_limit = limit;
        self
    }

    /// Construct directly from a coefficient vector in basis order.
    pub fn from_coefficients(degree: usize, beta: &[f64]) -> Self {
        let mut m = PolyModel::new(degree);
        assert_eq!(beta.len(), m.coefficient_count());
        m.coeffs = Some(DVector::from_column_slice(beta));
        m
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coefficient_count(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_fitted(&self) -> bool {
        self.coeffs.is_some()
    }

    pub fn coefficients(&self) -> Option<&[f64]> {
        self.coeffs.as_ref().map(|c| c.as_slice())
    }

    /// Least-squares fit of the coefficients to `(x1, x2, y)` samples.
    /// The design matrix is factorized as QR; the condition estimate is
    /// the ratio of extreme |R| diagonal magnitudes.
    pub fn fit(&mut self, samples: &[(f64, f64, f64)]) -> Result<FitReport, LearnError> {
        let k = self.coefficient_count();
        let m = samples.len();
        if m < k {
            return Err(LearnError::InsufficientSamples { needed: k, got: m });
        }
        let mut design = DMatrix::zeros(m, k);
        let mut target = DVector::zeros(m);
        for (row, &(x1, x2, y)) in samples.iter().enumerate() {
            for (col, &(i, j)) in self.exponents.iter().enumerate() {
                design[(row, col)] = x1.powi(i as i32) * x2.powi(j as i32);
            }
            target[row] = y;
        }
        let qr = design.clone().qr();
        let r = qr.r();
        let mut dmin = f64::INFINITY;
        let mut dmax = 0.0f64;
        for i in 0..k {
            let d = r[(i, i)].abs();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
        if !condition.is_finite() || condition > self.condition_limit {
            return Err(LearnError::IllConditioned { condition });
        }
        let qtb = qr.q().transpose() * &target;
        let beta = r
            .solve_upper_triangular(&qtb)
            .ok_or(LearnError::IllConditioned { condition })?;
        let residual_norm = (&design * &beta - &target).norm();
        self.coeffs = Some(beta);
        Ok(FitReport { residual_norm, condition })
    }

    /// Analytic evaluation of the polynomial and its partial derivatives.
    pub fn query(&self, x1: f64, x2: f64) -> Result<PolyQuery, LearnError> {
        let coeffs = self.coeffs.as_ref().ok_or(LearnError::NotFitted)?;
        let mut q = PolyQuery { value: 0.0, d_x1: 0.0, d_x2: 0.0, d2_x2x2: 0.0, d2_x1x2: 0.0 };
        for (col, &(i, j)) in self.exponents.iter().enumerate() {
            let c = coeffs[col];
            let (i, j) = (i as i32, j as i32);
            let p1 = x1.powi(i);
            let p2 = x2.powi(j);
            q.value += c * p1 * p2;
            if i >= 1 {
                q.d_x1 += c * i as f64 * x1.powi(i - 1) * p2;
            }
            if j >= 1 {
                q.d_x2 += c * j as f64 * p1 * x2.powi(j - 1);
            }
            if j >= 2 {
                q.d2_x2x2 += c * (j * (j - 1)) as f64 * p1 * x2.powi(j - 2);
            }
            if i >= 1 && j >= 1 {
                q.d2_x1x2 += c * (i * j) as f64 * x1.powi(i - 1) * x2.powi(j - 1);
            }
        }
        Ok(q)
    }
}

// ---------------------------------------------------------------------------
// Stackelberg leader gradient
// ---------------------------------------------------------------------------

/// Leader gradient with its degeneracy flag. When the follower-coalition
/// curvature magnitude falls below `eps_hess`, the implicit-response term
/// is dropped and `degenerate` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderGradient {
    pub omega: f64,
    pub degenerate: bool,
}

/// Total-derivative gradient for a leader: the partial effect of its own
/// action plus the anticipated follower-coalition response.
///
/// Both surrogates take regressors (x1 = leader action, x2 = follower
/// coalition summary).
pub fn stackelberg_leader_gradient(
    phi_l: &PolyModel,
    phi_f: &PolyModel,
    a_l: f64,
    af_summary: f64,
    eps_hess: f64,
) -> Result<LeaderGradient, LearnError> {
    let ql = phi_l.query(a_l, af_summary)?;
    let qf = phi_f.query(a_l, af_summary)?;
    let hess = qf.d2_x2x2;
    if hess.abs() < eps_hess {
        return Ok(LeaderGradient { omega: ql.d_x1, degenerate: true });
    }
    let omega = ql.d_x1 - qf.d2_x1x2 / hess * ql.d_x2;
    Ok(LeaderGradient { omega, degenerate: false })
}

// ---------------------------------------------------------------------------
// Update rules
// ---------------------------------------------------------------------------

/// One leader update: a + alpha * omega + gamma, clamped to [0, 1].
pub fn leader_step(action: f64, omega: f64, alpha: f64, noise: f64) -> Result<f64, LearnError> {
    if !omega.is_finite() || !noise.is_finite() {
        return Err(LearnError::NonFiniteGradient);
    }
    Ok((action + alpha * omega + noise).clamp(0.0, 1.0))
}

/// One follower update: a + alpha * grad + gamma, clamped to [0, 1].
pub fn follower_step(action: f64, grad: f64, alpha: f64, noise: f64) -> Result<f64, LearnError> {
    if !grad.is_finite() || !noise.is_finite() {
        return Err(LearnError::NonFiniteGradient);
    }
    Ok((action + alpha * grad + noise).clamp(0.0, 1.0))
}

/// Largest stored-action increment a single applied update may make;
/// keeps a bad surrogate fit from catapulting an action across the
/// space.
pub const DEFAULT_MAX_STEP: f64 = 0.2;

fn clip_increment(increment: f64, max_step: f64) -> f64 {
    increment.clamp(-max_step, max_step)
}

/// Apply a leader update to the stored action of a visited map cell.
/// The gradient increment is trust-region clipped to `max_step`.
pub fn apply_leader_update(
    map: &mut PerformanceMap,
    cell: usize,
    omega: f64,
    alpha: f64,
    max_step: f64,
    noise: Option<&mut OuNoise>,
) -> Result<f64, LearnError> {
    let current = map.cell_action(cell).unwrap_or(0.5);
    let gamma = noise.map(|n| n.step()).unwrap_or(0.0);
    let next = leader_step(current, clip_increment(alpha * omega, max_step), 1.0, gamma)?;
    map.set_cell_action(cell, next);
    Ok(next)
}

/// Apply a follower update to the stored action of a visited map cell.
/// `model` is the fitted follower-coalition surrogate with regressors
/// (x1 = leader coalition summary, x2 = follower action); when absent the
/// update degrades to a pure exploration perturbation. The gradient
/// increment is trust-region clipped to `max_step`. Returns the new
/// action and the gradient magnitude used.
pub fn apply_follower_update(
    map: &mut PerformanceMap,
    cell: usize,
    model: Option<&PolyModel>,
    al_summary: f64,
    alpha: f64,
    max_step: f64,
    noise: Option<&mut OuNoise>,
) -> Result<(f64, f64), LearnError> {
    let current = map.cell_action(cell).unwrap_or(0.5);
    let grad = match model {
        Some(m) => m.query(al_summary, current)?.d_x2,
        None => 0.0,
    };
    let gamma = noise.map(|n| n.step()).unwrap_or(0.0);
    let next = follower_step(current, clip_increment(alpha * grad, max_step), 1.0, gamma)?;
    map.set_cell_action(cell, next);
    Ok((next, grad.abs()))
}

// ---------------------------------------------------------------------------
// Follower multi-step schedulers
// ---------------------------------------------------------------------------

/// Multi-step policy for follower updates within one training cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SchedulerSpec {
    /// Fixed number of update steps per cycle.
    Static { steps: usize },
    /// Update until the gradient magnitude falls below a decaying
    /// threshold, capped at `max_steps`.
    GradThreshold { theta0: f64, decay: f64, max_steps: usize },
    /// Budget of ceil(theta0 * decay^t) steps, never below one.
    GradualReduction { theta0: f64, decay: f64 },
}

impl SchedulerSpec {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            SchedulerSpec::Static { steps } => {
                if steps < 1 {
                    return Err("static step count must be >= 1".into());
                }
            }
            SchedulerSpec::GradThreshold { theta0, decay, max_steps } => {
                if theta0 <= 0.0 {
                    return Err("threshold must be > 0".into());
                }
                if !(decay > 0.0 && decay <= 1.0) {
                    return Err("decay must be in (0, 1]".into());
                }
                if max_steps < 1 {
                    return Err("max_steps must be >= 1".into());
                }
            }
            SchedulerSpec::GradualReduction { theta0, decay } => {
                if theta0 <= 0.0 {
                    return Err("initial budget must be > 0".into());
                }
                if !(decay > 0.0 && decay <= 1.0) {
                    return Err("decay must be in (0, 1]".into());
                }
            }
        }
        Ok(())
    }

    /// Fixed step budget at clock `t`, if this variant has one.
    pub fn budget(&self, t: u64) -> Option<usize> {
        match *self {
            SchedulerSpec::Static { steps } => Some(steps),
            SchedulerSpec::GradualReduction { theta0, decay } => {
                let raw = theta0 * decay.powf(t as f64);
                Some((raw.ceil() as usize).max(1))
            }
            SchedulerSpec::GradThreshold { .. } => None,
        }
    }

    /// Gradient threshold at clock `t` for the thresholding variant.
    pub fn threshold(&self, t: u64) -> Option<f64> {
        match *self {
            SchedulerSpec::GradThreshold { theta0, decay, .. } => {
                Some(theta0 * decay.powf(t as f64))
            }
            _ => None,
        }
    }

    /// Upper bound on steps per cycle for any clock value.
    pub fn max_steps(&self) -> usize {
        match *self {
            SchedulerSpec::Static { steps } => steps,
            SchedulerSpec::GradualReduction { theta0, .. } => (theta0.ceil() as usize).max(1),
            SchedulerSpec::GradThreshold { max_steps, .. } => max_steps,
        }
    }
}

/// Execute follower updates under a scheduler at clock `t`. `step` runs
/// one update and returns the gradient magnitude at the post-update
/// point. Returns the number of steps executed (always >= 1).
pub fn run_multi_step(
    spec: &SchedulerSpec,
    t: u64,
    mut step: impl FnMut() -> f64,
) -> usize {
    match *spec {
        SchedulerSpec::Static { .. } | SchedulerSpec::GradualReduction { .. } => {
            let n = spec.budget(t).unwrap();
            for _ in 0..n {
                step();
            }
            n
        }
        SchedulerSpec::GradThreshold { max_steps, .. } => {
            let threshold = spec.threshold(t).unwrap();
            let mut count = 0;
            loop {
                let g = step();
                count += 1;
                if count >= max_steps || g < threshold {
                    break;
                }
            }
            count
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn ou_fixed_point_without_volatility() {
        let mut n = OuNoise::new(0.15, 0.3, 0.0, 1.0, 1, 0);
        n.set_value(0.3);
        for _ in 0..100 {
            assert_eq!(n.step(), 0.3);
        }
    }

    #[test]
    fn ou_deterministic_drift() {
        let mut n = OuNoise::new(0.15, 0.0, 0.0, 1.0, 1, 0);
        n.set_value(1.0);
        assert!((n.step() - 0.85).abs() < 1e-15);
    }

    #[test]
    fn ou_seeded_stream_mean_matches_stationary_bound() {
        let sigma = 0.2;
        let theta = 0.15;
        let mut n = OuNoise::new(theta, 0.0, sigma, 1.0, 58, 0);
        let steps = 100_000;
        let mut sum = 0.0;
        for _ in 0..steps {
            sum += n.step();
        }
        let mean = sum / steps as f64;
        let sigma_stationary = sigma / (2.0 * theta).sqrt();
        let bound = 3.0 * sigma_stationary / (steps as f64).sqrt();
        assert!(
            mean.abs() <= bound,
            "stream mean {mean} exceeds bound {bound}"
        );
        assert_eq!(n.draw_count(), steps as u64);
    }

    #[test]
    fn exploration_schedule_cases() {
        let s = ExplorationSchedule::new(0.2, 0.99, 0.01);
        assert_eq!(s.sigma_at(0), 0.2);
        let flat = ExplorationSchedule::new(0.2, 1.0, 0.01);
        assert_eq!(flat.sigma_at(500), 0.2);
        let expect = (0.2 * 0.99f64.powi(200)).max(0.01);
        assert!((s.sigma_at(200) - expect).abs() < 1e-15);
        // Deep into the schedule the floor binds.
        assert_eq!(s.sigma_at(100_000), 0.01);
    }

    #[test]
    fn basis_layout_for_degree_two() {
        assert_eq!(basis_exponents(2), vec![(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]);
        assert_eq!(coefficient_count(2), 6);
        assert_eq!(coefficient_count(3), 10);
    }

    #[test]
    fn fit_reproduces_linear_targets() {
        let mut model = PolyModel::new(2);
        let mut samples = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                let x1 = i as f64 / 4.0;
                let x2 = j as f64 / 4.0;
                samples.push((x1, x2, 1.0 + 2.0 * x1 + 3.0 * x2));
            }
        }
        model.fit(&samples).unwrap();
        for &(x1, x2, y) in &samples {
            assert!((model.query(x1, x2).unwrap().value - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_recovers_quadratic_gradient() {
        let mut model = PolyModel::new(2);
        let mut samples = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let x1 = i as f64 / 5.0;
                let x2 = j as f64 / 5.0;
                samples.push((x1, x2, x1 * x1 - x1 * x2 + x2 * x2));
            }
        }
        model.fit(&samples).unwrap();
        let q = model.query(0.5, 0.5).unwrap();
        // d/dx1 of x1^2 - x1*x2 + x2^2 at (0.5, 0.5) is 0.5.
        assert!((q.d_x1 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_too_few_samples() {
        let mut model = PolyModel::new(2);
        let samples = vec![(0.0, 0.0, 1.0), (0.5, 0.5, 2.0), (1.0, 1.0, 3.0)];
        assert!(matches!(
            model.fit(&samples),
            Err(LearnError::InsufficientSamples { needed: 6, got: 3 })
        ));
    }

    #[test]
    fn fit_rejects_rank_deficient_designs() {
        let mut model = PolyModel::new(2);
        // All samples at one point: the design has no rank.
        let samples = vec![(0.5, 0.5, 1.0); 10];
        assert!(matches!(model.fit(&samples), Err(LearnError::IllConditioned { .. })));
        assert!(!model.is_fitted());
    }

    #[test]
    fn failed_fit_keeps_previous_coefficients() {
        let mut model = PolyModel::from_coefficients(2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let bad = vec![(0.5, 0.5, 7.0); 10];
        assert!(model.fit(&bad).is_err());
        assert!((model.query(0.3, 0.9).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn query_constant_model() {
        let model = PolyModel::from_coefficients(2, &[2.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = model.query(0.3, 0.7).unwrap();
        assert_eq!(q.value, 2.5);
        assert_eq!(q.d_x1, 0.0);
        assert_eq!(q.d_x2, 0.0);
        assert_eq!(q.d2_x2x2, 0.0);
        assert_eq!(q.d2_x1x2, 0.0);
    }

    #[test]
    fn query_cross_term_second_derivative() {
        // phi = x1 * x2
        let model = PolyModel::from_coefficients(2, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        for (x1, x2) in [(0.0, 0.0), (0.3, 0.9), (1.0, 1.0)] {
            assert_eq!(model.query(x1, x2).unwrap().d2_x1x2, 1.0);
        }
    }

    #[test]
    fn query_unfitted_fails() {
        let model = PolyModel::new(2);
        assert!(matches!(model.query(0.5, 0.5), Err(LearnError::NotFitted)));
    }

    /// Central finite differences of the evaluated polynomial value as an
    /// independent check of the analytic derivatives.
    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let rel = |fd: f64, an: f64| (fd - an).abs() / an.abs().max(1.0);
        for trial in 0..1000 {
            let degree = if trial % 2 == 0 { 2 } else { 3 };
            let beta: Vec<f64> =
                (0..coefficient_count(degree)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let model = PolyModel::from_coefficients(degree, &beta);
            let x1 = rng.gen_range(0.05..0.95);
            let x2 = rng.gen_range(0.05..0.95);
            let q = model.query(x1, x2).unwrap();
            let f = |a: f64, b: f64| model.query(a, b).unwrap().value;

            let h = 1e-5;
            let fd_x1 = (f(x1 + h, x2) - f(x1 - h, x2)) / (2.0 * h);
            let fd_x2 = (f(x1, x2 + h) - f(x1, x2 - h)) / (2.0 * h);
            assert!(rel(fd_x1, q.d_x1) < 1e-4);
            assert!(rel(fd_x2, q.d_x2) < 1e-4);

            let h2 = 1e-4;
            let fd_x2x2 = (f(x1, x2 + h2) - 2.0 * f(x1, x2) + f(x1, x2 - h2)) / (h2 * h2);
            let fd_x1x2 = (f(x1 + h2, x2 + h2) - f(x1 + h2, x2 - h2) - f(x1 - h2, x2 + h2)
                + f(x1 - h2, x2 - h2))
                / (4.0 * h2 * h2);
            assert!(rel(fd_x2x2, q.d2_x2x2) < 1e-4);
            assert!(rel(fd_x1x2, q.d2_x1x2) < 1e-4);
        }
    }

    #[test]
    fn leader_gradient_reduces_without_cross_term() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let beta_l: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Follower surrogate with zero cross coefficient but real
            // curvature in x2.
            let mut beta_f: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            beta_f[5] = 0.0;
            beta_f[4] = rng.gen_range(0.5..1.5);
            let phi_l = PolyModel::from_coefficients(2, &beta_l);
            let phi_f = PolyModel::from_coefficients(2, &beta_f);
            let a = rng.gen::<f64>();
            let s = rng.gen::<f64>();
            let g = stackelberg_leader_gradient(&phi_l, &phi_f, a, s, DEFAULT_EPS_HESS).unwrap();
            let expect = phi_l.query(a, s).unwrap().d_x1;
            assert!(!g.degenerate);
            assert!((g.omega - expect).abs() <= 1e-15);
        }
    }

    /// Symbolically derived total-derivative oracle on the quadratic game
    /// phi_L = -(a-1)^2 - 0.5 (F - a)^2, phi_F = -(F - 0.5 a)^2:
    /// omega(a, F) = -2 (a - 1) + 0.5 (F - a).
    #[test]
    fn leader_gradient_matches_quadratic_game_oracle() {
        let mut samples_l = Vec::new();
        let mut samples_f = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                let a = i as f64 / 7.0;
                let f = j as f64 / 7.0;
                samples_l.push((a, f, -(a - 1.0).powi(2) - 0.5 * (f - a).powi(2)));
                samples_f.push((a, f, -(f - 0.5 * a).powi(2)));
            }
        }
        let mut phi_l = PolyModel::new(2);
        let mut phi_f = PolyModel::new(2);
        phi_l.fit(&samples_l).unwrap();
        phi_f.fit(&samples_f).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a = rng.gen::<f64>();
            let f = rng.gen::<f64>();
            let g = stackelberg_leader_gradient(&phi_l, &phi_f, a, f, DEFAULT_EPS_HESS).unwrap();
            let oracle = -2.0 * (a - 1.0) + 0.5 * (f - a);
            assert!(!g.degenerate);
            assert!((g.omega - oracle).abs() < 1e-6, "omega {} oracle {oracle}", g.omega);
        }
    }

    #[test]
    fn leader_gradient_flags_degenerate_curvature() {
        let phi_l = PolyModel::from_coefficients(2, &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        // Follower surrogate linear in x2: zero second derivative.
        let phi_f = PolyModel::from_coefficients(2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.5]);
        let g = stackelberg_leader_gradient(&phi_l, &phi_f, 0.5, 0.5, DEFAULT_EPS_HESS).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.omega, 1.0);
    }

    #[test]
    fn update_arithmetic_and_clamping() {
        assert_eq!(leader_step(0.5, 1.0, 0.0, 0.0).unwrap(), 0.5);
        assert!((leader_step(0.5, 1.0, 0.1, 0.0).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(leader_step(0.95, 1.0, 0.1, 0.0).unwrap(), 1.0);
        assert_eq!(follower_step(0.05, -1.0, 0.1, 0.0).unwrap(), 0.0);
        assert!((follower_step(0.3, -2.0 * (0.3 - 0.5), 0.1, 0.0).unwrap() - 0.34).abs() < 1e-15);
        assert!(leader_step(0.5, f64::NAN, 0.1, 0.0).is_err());
    }

    #[test]
    fn follower_updates_converge_on_quadratic() {
        // phi_F(x1, x2) = -(x2 - 0.5)^2, independent of x1.
        let model =
            PolyModel::from_coefficients(2, &[-0.25, 0.0, 1.0, 0.0, -1.0, 0.0]);
        let mut a: f64 = 0.05;
        let mut steps = 0;
        while (a - 0.5).abs() > 1e-3 && steps < 200 {
            let g = model.query(0.0, a).unwrap().d_x2;
            a = follower_step(a, g, 0.1, 0.0).unwrap();
            steps += 1;
        }
        assert!((a - 0.5).abs() <= 1e-3, "stalled at {a} after {steps} steps");
        assert!(steps <= 200);
    }

    #[test]
    fn map_updates_honor_bounds_and_trust_region() {
        let mut map = PerformanceMap::new(GridSpec::new(2, 5), 0.01);
        map.record_sample(&[0.5, 0.5], 0.9, 0.0, 1.0, 0.0).unwrap();
        let cell = map.locate_cell(&[0.5, 0.5]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut prev = map.cell_action(cell).unwrap();
        for _ in 0..500 {
            let omega = rng.gen_range(-50.0..50.0);
            let a =
                apply_leader_update(&mut map, cell, omega, 0.1, DEFAULT_MAX_STEP, None).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert!((a - prev).abs() <= DEFAULT_MAX_STEP + 1e-12);
            prev = a;
        }
    }

    #[test]
    fn scheduler_static_runs_exact_count() {
        let spec = SchedulerSpec::Static { steps: 75 };
        for t in [0u64, 10, 100_000] {
            let mut ran = 0;
            let n = run_multi_step(&spec, t, || {
                ran += 1;
                1.0
            });
            assert_eq!(n, 75);
            assert_eq!(ran, 75);
        }
    }

    #[test]
    fn scheduler_gradual_reduction_budgets() {
        let spec = SchedulerSpec::GradualReduction { theta0: 100.0, decay: 0.999975 };
        assert_eq!(spec.budget(0), Some(100));
        // Once theta0 * decay^t < 1 the budget is exactly one step.
        let spec_small = SchedulerSpec::GradualReduction { theta0: 0.5, decay: 0.9 };
        assert_eq!(spec_small.budget(0), Some(1));
        let mut prev = usize::MAX;
        for t in (0..400_000u64).step_by(10_000) {
            let b = spec.budget(t).unwrap();
            assert!(b >= 1 && b <= spec.max_steps());
            assert!(b <= prev);
            prev = b;
        }
        // Deep in training the budget has collapsed to one.
        assert_eq!(spec.budget(400_000), Some(1));
    }

    #[test]
    fn scheduler_threshold_stops_on_small_gradient() {
        let spec = SchedulerSpec::GradThreshold { theta0: 0.5, decay: 0.99995, max_steps: 100 };
        let n = run_multi_step(&spec, 0, || 0.0);
        assert_eq!(n, 1);
        // A gradient that never shrinks is cut off by the cap.
        let n = run_multi_step(&spec, 0, || 10.0);
        assert_eq!(n, 100);
        // Thresholds are non-increasing in t.
        let mut prev = f64::INFINITY;
        for t in (0..1_000_000u64).step_by(50_000) {
            let th = spec.threshold(t).unwrap();
            assert!(th <= prev);
            prev = th;
        }
    }
}
