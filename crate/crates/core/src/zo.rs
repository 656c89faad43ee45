//! Two-point zeroth-order gradient estimation.
//!
//! Directions live on the sphere of radius `sqrt(d)`, so `E[u u^T] = I` and the
//! symmetric difference
//!
//! ```text
//! g(x) = (f(x + lambda u) - f(x - lambda u)) / (2 lambda) * u
//! ```
//!
//! is an unbiased estimate of the gradient of the ball-smoothed surrogate
//! `f_lambda(x) = E_v[f(x + lambda v)]`, `v` uniform in the ball of radius `sqrt(d)`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative tolerance on `||u|| = sqrt(d)` accepted by [`Direction::from_values`].
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZoError {
    #[error("invalid dimension {0}: must be at least 1")]
    InvalidDimension(usize),
    #[error("smoothing scale must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("number of perturbations must be at least 1")]
    InvalidPerturbationCount,
    #[error("non-finite loss {value} at the {side} perturbation")]
    NonFiniteLoss { side: Side, value: f64 },
    #[error("empty direction list")]
    EmptyDirections,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("direction norm {norm} is not sqrt({dim})")]
    NotOnSphere { dim: usize, norm: f64 },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
}

/// Which of the two loss evaluations failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Plus,
    Minus,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Plus => "x + lambda*u",
            Side::Minus => "x - lambda*u",
        })
    }
}

/// A perturbation direction on the sphere of radius `sqrt(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction(Vec<f64>);

impl Direction {
    /// Wraps explicit values, checking that they lie on the `sqrt(d)` sphere.
    pub fn from_values(values: Vec<f64>) -> Result<Self, ZoError> {
        let d = values.len();
        if d == 0 {
            return Err(ZoError::InvalidDimension(0));
        }
        let norm = l2_norm(&values);
        let radius = (d as f64).sqrt();
        if (norm - radius).abs() > NORM_TOLERANCE * radius || !norm.is_finite() {
            return Err(ZoError::NotOnSphere { dim: d, norm });
        }
        Ok(Direction(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn negated(&self) -> Direction {
        Direction(self.0.iter().map(|v| -v).collect())
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

/// Draws a direction uniformly from the sphere of radius `sqrt(d)`.
///
/// A standard Gaussian vector is normalised and rescaled, which is exactly
/// uniform on the sphere.
pub fn sample_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Direction, ZoError> {
    if d == 0 {
        return Err(ZoError::InvalidDimension(0));
    }
    loop {
        let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2_norm(&raw);
        // a zero (or denormal) draw has probability zero; resample rather than divide by it
        if norm > f64::MIN_POSITIVE {
            let radius = (d as f64).sqrt();
            return Ok(Direction(raw.into_iter().map(|v| v * radius / norm).collect()));
        }
    }
}

/// Smoothing scale and number of averaged perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub lambda: f64,
    pub num_perturbations: usize,
}

impl SmoothingConfig {
    pub const DEFAULT_LAMBDA: f64 = 0.005;

    pub fn new(lambda: f64, num_perturbations: usize) -> Result<Self, ZoError> {
        check_lambda(lambda)?;
        if num_perturbations == 0 {
            return Err(ZoError::InvalidPerturbationCount);
        }
        Ok(SmoothingConfig { lambda, num_perturbations })
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { lambda: Self::DEFAULT_LAMBDA, num_perturbations: 1 }
    }
}

/// Result of one (or an average of several) two-point estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoEstimate {
    pub gradient: Vec<f64>,
    pub loss_plus: f64,
    pub loss_minus: f64,
    /// `loss_plus - loss_minus`
    pub delta: f64,
}

/// Scalar coefficient multiplying the direction: `delta / (2 lambda)`.
#[inline]
pub fn estimate_coefficient(delta: f64, lambda: f64) -> f64 {
    delta / (2.0 * lambda)
}

/// Two-point estimate of the gradient of `loss_at` at `x` along `u`.
///
/// Exactly two evaluations are made, on a scratch copy of `x`; `x` itself is
/// never touched.
pub fn zo_estimate<F>(mut loss_at: F, x: &[f64], u: &Direction, lambda: f64) -> Result<ZoEstimate, ZoError>
where
    F: FnMut(&[f64]) -> f64,
{
    check_lambda(lambda)?;
    if u.dim() != x.len() {
        return Err(ZoError::DimensionMismatch { expected: x.len(), found: u.dim() });
    }
    let mut scratch = x.to_vec();
    perturb_into(&mut scratch, x, u, lambda);
    let loss_plus = loss_at(&scratch);
    if !loss_plus.is_finite() {
        return Err(ZoError::NonFiniteLoss { side: Side::Plus, value: loss_plus });
    }
    perturb_into(&mut scratch, x, u, -lambda);
    let loss_minus = loss_at(&scratch);
    if !loss_minus.is_finite() {
        return Err(ZoError::NonFiniteLoss { side: Side::Minus, value: loss_minus });
    }
    let delta = loss_plus - loss_minus;
    let coef = estimate_coefficient(delta, lambda);
    Ok(ZoEstimate {
        gradient: u.values().iter().map(|&ui| coef * ui).collect(),
        loss_plus,
        loss_minus,
        delta,
    })
}

/// Average of [`zo_estimate`] over several directions. With a single direction
/// the result is bit-identical to `zo_estimate`.
pub fn zo_estimate_averaged<F>(
    mut loss_at: F,
    x: &[f64],
    directions: &[Direction],
    lambda: f64,
) -> Result<ZoEstimate, ZoError>
where
    F: FnMut(&[f64]) -> f64,
{
    let first = directions.first().ok_or(ZoError::EmptyDirections)?;
    if let Some(bad) = directions.iter().find(|u| u.dim() != first.dim()) {
        return Err(ZoError::DimensionMismatch { expected: first.dim(), found: bad.dim() });
    }
    let mut acc = zo_estimate(&mut loss_at, x, first, lambda)?;
    for u in &directions[1..] {
        let next = zo_estimate(&mut loss_at, x, u, lambda)?;
        for (a, g) in acc.gradient.iter_mut().zip(&next.gradient) {
            *a += g;
        }
        acc.loss_plus += next.loss_plus;
        acc.loss_minus += next.loss_minus;
        acc.delta += next.delta;
    }
    if directions.len() > 1 {
        let p = directions.len() as f64;
        acc.gradient.iter_mut().for_each(|g| *g /= p);
        acc.loss_plus /= p;
        acc.loss_minus /= p;
        acc.delta /= p;
    }
    Ok(acc)
}

/// `dst = x + step * u`
pub(crate) fn perturb_into(dst: &mut [f64], x: &[f64], u: &Direction, step: f64) {
    for ((d, &xi), &ui) in dst.iter_mut().zip(x).zip(u.values()) {
        *d = xi + step * ui;
    }
}

fn check_lambda(lambda: f64) -> Result<(), ZoError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(ZoError::InvalidLambda(lambda))
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Quadratic `f(x) = 1/2 x^T A x + b^T x` with symmetric `A`.
///
/// Ball smoothing only adds a constant to a quadratic, so its smoothed
/// gradient is known in closed form and serves as a test oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    dim: usize,
    /// row-major `dim x dim`
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Quadratic {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self, ZoError> {
        let dim = b.len();
        if dim == 0 {
            return Err(ZoError::InvalidDimension(0));
        }
        if a.len() != dim * dim {
            return Err(ZoError::DimensionMismatch { expected: dim * dim, found: a.len() });
        }
        for row in 0..dim {
            for col in row + 1..dim {
                if a[row * dim + col] != a[col * dim + row] {
                    return Err(ZoError::NotSymmetric { row, col });
                }
            }
        }
        Ok(Quadratic { dim, a, b })
    }

    pub fn diagonal(diag: &[f64], b: Vec<f64>) -> Result<Self, ZoError> {
        let n = diag.len();
        let mut a = vec![0.0; n * n];
        for (i, &v) in diag.iter().enumerate() {
            a[i * n + i] = v;
        }
        Quadratic::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let ax = self.mat_vec(x);
        0.5 * dot(x, &ax) + dot(&self.b, x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.mat_vec(x);
        for (gi, bi) in g.iter_mut().zip(&self.b) {
            *gi += bi;
        }
        g
    }

    /// Upper bound on the smoothness constant: the largest absolute row sum of `A`,
    /// which dominates the spectral norm of a symmetric matrix.
    pub fn smoothness_bound(&self) -> f64 {
        self.a
            .chunks(self.dim)
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        self.a.chunks(self.dim).map(|row| dot(row, x)).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of the ball-smoothed quadratic, `A x + b`, for any `lambda > 0`.
pub fn smoothed_gradient_oracle(q: &Quadratic, x: &[f64], lambda: f64) -> Result<Vec<f64>, ZoError> {
    check_lambda(lambda)?;
    if x.len() != q.dim() {
        return Err(ZoError::DimensionMismatch { expected: q.dim(), found: x.len() });
    }
    Ok(q.gradient(x))
}
