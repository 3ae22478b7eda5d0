//! Score-aware loss mathematics.
//!
//! For a datapoint `x` and its quantization `x̃`, the residual `x - x̃` splits
//! into a component parallel to `x` and one orthogonal to it. Averaged over
//! queries drawn uniformly from the unit sphere and weighted by a function
//! `w(<q, x>)` of the true score, the expected squared score error is
//! `h_par * |r_par|^2 + h_perp * |r_perp|^2`. This module computes the
//! decomposition, the two weights, and `eta = h_par / h_perp` both exactly (for
//! an indicator weight) and through its large-dimension limit.

mod quadrature;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
pub use quadrature::Quadrature;

/// Weight applied to a query as a function of its true score `t = <q, x>`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightFunction {
    /// `w(t) = 1` when `t >= threshold`, else 0.
    Indicator { threshold: f64 },
    /// `w(t) = 1` everywhere; recovers the plain reconstruction loss.
    Constant,
    /// Non-decreasing step function on `t >= 0`, zero for `t < 0`.
    Tabulated(StepWeights),
}

/// A non-decreasing step function: `w(t)` is the value of the last knot whose
/// position is `<= t`, or 0 before the first knot.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWeights {
    knots: Vec<(f64, f64)>,
}

impl StepWeights {
    /// Knots are `(position, value)` pairs. Positions must be non-negative and
    /// strictly increasing; values non-negative and non-decreasing.
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        let mut prev: Option<(f64, f64)> = None;
        for &(t, v) in &knots {
            if !t.is_finite() || !v.is_finite() || t < 0.0 || v < 0.0 {
                return Err(Error::InvalidWeightFunction(format!(
                    "knot ({t}, {v}) must be finite and non-negative"
                )));
            }
            if let Some((pt, pv)) = prev {
                if t <= pt || v < pv {
                    return Err(Error::InvalidWeightFunction(
                        "knot positions must increase and values must not decrease".into(),
                    ));
                }
            }
            prev = Some((t, v));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Decomposes the step function into `(threshold, increment)` indicator terms.
    fn increments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mut prev = 0.0;
        self.knots.iter().map(move |&(t, v)| {
            let inc = v - prev;
            prev = v;
            (t, inc)
        })
    }
}

impl WeightFunction {
    pub fn indicator(threshold: f64) -> Result<Self> {
        let w = WeightFunction::Indicator { threshold };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightFunction::Indicator { threshold } if !(*threshold >= 0.0) => Err(
                Error::InvalidWeightFunction(format!("indicator threshold {threshold} < 0")),
            ),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            WeightFunction::Indicator { threshold } => {
                if t >= *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            WeightFunction::Constant => 1.0,
            WeightFunction::Tabulated(steps) => steps
                .knots
                .iter()
                .take_while(|(pos, _)| *pos <= t)
                .last()
                .map_or(0.0, |&(_, v)| v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDecomposition {
    pub parallel: Vec<f64>,
    pub perpendicular: Vec<f64>,
}

/// Per-datapoint loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisotropicWeights {
    pub h_parallel: f64,
    pub h_perpendicular: f64,
}

impl AnisotropicWeights {
    pub const ISOTROPIC: Self = Self {
        h_parallel: 1.0,
        h_perpendicular: 1.0,
    };

    pub fn new(h_parallel: f64, h_perpendicular: f64) -> Result<Self> {
        if !(h_parallel >= 0.0 && h_perpendicular >= 0.0)
            || !h_parallel.is_finite()
            || !h_perpendicular.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite and non-negative, got ({h_parallel}, {h_perpendicular})"
            )));
        }
        Ok(Self {
            h_parallel,
            h_perpendicular,
        })
    }

    /// `h_perp` normalized to 1. An infinite `eta` keeps only the parallel term.
    pub fn from_eta(eta: f64) -> Result<Self> {
        if eta == f64::INFINITY {
            return Ok(Self {
                h_parallel: 1.0,
                h_perpendicular: 0.0,
            });
        }
        Self::new(eta, 1.0)
    }

    pub fn eta(&self) -> f64 {
        if self.h_perpendicular > 0.0 {
            self.h_parallel / self.h_perpendicular
        } else if self.h_parallel > 0.0 {
            f64::INFINITY
        } else {
            f64::NAN
        }
    }

    #[inline]
    pub fn is_isotropic(&self) -> bool {
        self.h_parallel == self.h_perpendicular
    }

    /// Loss from the residual `r = x - x̃` summarized as `|r|^2` and `<r, x>`.
    #[inline]
    pub fn loss_from_stats(&self, residual_sq: f64, residual_dot_x: f64, x_norm_sq: f64) -> f64 {
        if self.is_isotropic() {
            return self.h_perpendicular * residual_sq;
        }
        let parallel = residual_dot_x * residual_dot_x / x_norm_sq;
        let perpendicular = (residual_sq - parallel).max(0.0);
        self.h_parallel * parallel + self.h_perpendicular * perpendicular
    }

    /// Ordering key for picking the best codeword. For isotropic weights this
    /// is the squared residual itself, so the choice is exactly the
    /// Euclidean-nearest one.
    #[inline]
    pub(crate) fn rank_key(&self, residual_sq: f64, residual_dot_x: f64, x_norm_sq: f64) -> f64 {
        if self.is_isotropic() {
            residual_sq
        } else {
            self.loss_from_stats(residual_sq, residual_dot_x, x_norm_sq)
        }
    }
}

/// `(|x - c|^2, <x - c, x>)`, accumulated in component order.
#[inline]
pub(crate) fn residual_stats(x: &[f64], c: &[f64]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut dot = 0.0;
    for (&xi, &ci) in x.iter().zip(c) {
        let r = xi - ci;
        sq += r * r;
        dot += r * xi;
    }
    (sq, dot)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn residual_decompose(x: &[f64], x_quant: &[f64]) -> Result<ResidualDecomposition> {
    check_same_dim(x, x_quant)?;
    let nsq = norm_sq(x);
    if nsq == 0.0 {
        return Err(Error::ZeroNormDatapoint { index: None });
    }
    let residual: Vec<f64> = x.iter().zip(x_quant).map(|(a, b)| a - b).collect();
    let scale = dot(&residual, x) / nsq;
    let parallel: Vec<f64> = x.iter().map(|xi| scale * xi).collect();
    let perpendicular = residual.iter().zip(&parallel).map(|(r, p)| r - p).collect();
    Ok(ResidualDecomposition {
        parallel,
        perpendicular,
    })
}

pub fn anisotropic_loss(x: &[f64], x_quant: &[f64], weights: &AnisotropicWeights) -> Result<f64> {
    let dec = residual_decompose(x, x_quant)?;
    if weights.is_isotropic() {
        let sq: f64 = x.iter().zip(x_quant).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(weights.h_perpendicular * sq);
    }
    Ok(weights.h_parallel * norm_sq(&dec.parallel)
        + weights.h_perpendicular * norm_sq(&dec.perpendicular))
}

/// Weights for a datapoint of norm `norm` in dimension `d`, by quadrature over
/// the angle between query and datapoint:
///
/// `h_par = int w(|x| cos t) sin^(d-2) t cos^2 t dt`,
/// `h_perp = 1/(d-1) int w(|x| cos t) sin^d t dt`, both over `[0, pi]`.
pub fn h_coefficients(w: &WeightFunction, norm: f64, d: usize) -> Result<AnisotropicWeights> {
    h_coefficients_with(w, norm, d, &Quadrature::default())
}

pub fn h_coefficients_with(
    w: &WeightFunction,
    norm: f64,
    d: usize,
    quad: &Quadrature,
) -> Result<AnisotropicWeights> {
    if d < 2 {
        return Err(Error::InvalidDimension(d, "need d >= 2"));
    }
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroNormDatapoint { index: None });
    }
    w.validate()?;
    let (par, perp) = match w {
        WeightFunction::Constant => truncated_integrals(PI, d, quad)?,
        WeightFunction::Indicator { threshold } => indicator_integrals(*threshold, norm, d, quad)?,
        WeightFunction::Tabulated(steps) => {
            let mut par = 0.0;
            let mut perp = 0.0;
            for (t, inc) in steps.increments() {
                if inc == 0.0 {
                    continue;
                }
                let (p, q) = indicator_integrals(t, norm, d, quad)?;
                par += inc * p;
                perp += inc * q;
            }
            (par, perp)
        }
    };
    Ok(AnisotropicWeights {
        h_parallel: par,
        h_perpendicular: perp / (d as f64 - 1.0),
    })
}

fn indicator_integrals(threshold: f64, norm: f64, d: usize, quad: &Quadrature) -> Result<(f64, f64)> {
    let ratio = threshold / norm;
    if ratio >= 1.0 {
        return Ok((0.0, 0.0));
    }
    truncated_integrals(ratio.max(-1.0).acos(), d, quad)
}

/// `(int_0^upper sin^(d-2) cos^2, int_0^upper sin^d)`.
fn truncated_integrals(upper: f64, d: usize, quad: &Quadrature) -> Result<(f64, f64)> {
    let lo = d as i32 - 2;
    let par = quad.integrate(
        |t: f64| {
            let c = t.cos();
            t.sin().powi(lo) * c * c
        },
        0.0,
        upper,
    )?;
    let perp = quad.integrate(|t: f64| t.sin().powi(d as i32), 0.0, upper)?;
    Ok((par, perp))
}

fn check_threshold(threshold: f64, norm: f64) -> Result<f64> {
    if !(norm > 0.0) || !(threshold >= 0.0) || threshold >= norm {
        return Err(Error::InvalidThreshold { threshold, norm });
    }
    Ok(threshold / norm)
}

/// Exact `eta` for the indicator weight `I(t >= threshold)`.
///
/// With `a = arccos(T/|x|)` and `I_d = int_0^a sin^d`, integration by parts gives
/// `d I_d = (d-1) I_(d-2) - cos a sin^(d-1) a`, and
/// `eta = (d-1)(I_(d-2)/I_d - 1) = 1 + cos a sin^(d-1) a / I_d`.
///
/// The forward recurrence amplifies relative error by roughly `1/sin^2 a` per
/// step, so once `sin^-d a` gets large the ratio `cos a sin^(d-1) a / I_d` is
/// instead obtained by running the recurrence downward from a dimension far
/// enough above `d` that the starting guess has decayed away. That form works
/// with ratios only and never underflows.
pub fn eta_exact(threshold: f64, norm: f64, d: usize) -> Result<f64> {
    let c = check_threshold(threshold, norm)?;
    if d < 3 {
        return Err(Error::InvalidDimension(d, "exact eta needs d >= 3"));
    }
    if c == 0.0 {
        return Ok(1.0);
    }
    let s2 = (1.0 - c * c).max(0.0);
    let s = s2.sqrt();
    let log_inv_s = -s.ln();
    const FORWARD_GROWTH_LIMIT: f64 = 13.815_510_557_964_274; // ln(1e6)
    if d as f64 * log_inv_s < FORWARD_GROWTH_LIMIT {
        Ok(1.0 + eta_tail_forward(c, s, d))
    } else {
        Ok(1.0 + eta_tail_backward(c, s2, log_inv_s, d))
    }
}

fn eta_tail_forward(c: f64, s: f64, d: usize) -> f64 {
    let alpha = c.acos();
    let (mut k, mut integral) = if d.is_multiple_of(2) { (0, alpha) } else { (1, 1.0 - c) };
    while k < d {
        k += 2;
        let kf = k as f64;
        integral = ((kf - 1.0) * integral - c * s.powi(k as i32 - 1)) / kf;
    }
    c * s.powi(d as i32 - 1) / integral
}

fn eta_tail_backward(c: f64, s2: f64, log_inv_s: f64, d: usize) -> f64 {
    debug_assert!(c > 0.0);
    // Each downward step contracts the error in the tail ratio by about sin^2 a.
    let steps = (39.2 / (2.0 * log_inv_s)).ceil() as usize + 2;
    let top = d + 2 * steps;
    let topf = top as f64;
    let mut tail = (topf - 1.0) / s2 - topf;
    let mut k = top;
    while k > d {
        let kf = k as f64;
        tail = tail * (kf - 1.0) / (s2 * (kf + tail));
        k -= 2;
    }
    tail
}

/// Large-dimension proxy `(d-1) (T/|x|)^2 / (1 - (T/|x|)^2)`.
pub fn eta_limit(threshold: f64, norm: f64, d: usize) -> Result<f64> {
    let c = check_threshold(threshold, norm)?;
    if d < 2 {
        return Err(Error::InvalidDimension(d, "need d >= 2"));
    }
    let c2 = c * c;
    Ok((d as f64 - 1.0) * c2 / (1.0 - c2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

/// Direct sampling of `E_q[w(<q, x>) <q, x - x̃>^2]` with `q` uniform on the
/// unit sphere.
pub fn monte_carlo_loss(
    x: &[f64],
    x_quant: &[f64],
    w: &WeightFunction,
    num_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    check_same_dim(x, x_quant)?;
    if num_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "monte carlo needs at least 1000 samples, got {num_samples}"
        )));
    }
    if norm_sq(x) == 0.0 {
        return Err(Error::ZeroNormDatapoint { index: None });
    }
    w.validate()?;
    let d = x.len();
    let residual: Vec<f64> = x.iter().zip(x_quant).map(|(a, b)| a - b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = vec![0.0; d];
    // Welford accumulation.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..num_samples {
        let mut nsq = 0.0;
        for v in q.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = g;
            nsq += g * g;
        }
        let inv = nsq.sqrt().recip();
        let score = dot(&q, x) * inv;
        let err = dot(&q, &residual) * inv;
        let sample = w.eval(score) * err * err;
        let delta = sample - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (sample - mean);
    }
    let n = num_samples as f64;
    let variance = m2 / (n - 1.0);
    Ok(MonteCarloEstimate {
        estimate: mean,
        standard_error: (variance / n).sqrt(),
    })
}

/// How per-point weights are derived for training and encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Plain squared reconstruction error.
    Reconstruction,
    /// Indicator weight `I(t >= threshold)`.
    ScoreAware { threshold: f64, method: EtaMethod },
    /// Fixed `eta` with `h_perp = 1` for every point.
    Eta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EtaMethod {
    /// Large-dimension proxy, clamped below at 1.
    #[default]
    Limit,
    /// Exact recurrence.
    Exact,
    /// Unnormalized `(h_par, h_perp)` by quadrature.
    Integral,
}

impl LossKind {
    pub fn weights_for_norm(&self, norm: f64, d: usize) -> Result<AnisotropicWeights> {
        match self {
            LossKind::Reconstruction => Ok(AnisotropicWeights::ISOTROPIC),
            LossKind::Eta(eta) => AnisotropicWeights::from_eta(*eta),
            LossKind::ScoreAware { threshold, method } => {
                if !(*threshold >= 0.0) {
                    return Err(Error::InvalidThreshold {
                        threshold: *threshold,
                        norm,
                    });
                }
                if *method == EtaMethod::Integral {
                    return h_coefficients(&WeightFunction::Indicator { threshold: *threshold }, norm, d);
                }
                if *threshold >= norm {
                    return AnisotropicWeights::from_eta(f64::INFINITY);
                }
                let eta = match method {
                    EtaMethod::Limit if *threshold == 0.0 => 1.0,
                    EtaMethod::Limit => eta_limit(*threshold, norm, d)?.max(1.0),
                    EtaMethod::Exact => eta_exact(*threshold, norm, d)?,
                    EtaMethod::Integral => unreachable!(),
                };
                AnisotropicWeights::from_eta(eta)
            }
        }
    }

    pub fn is_reconstruction(&self) -> bool {
        matches!(self, LossKind::Reconstruction)
    }
}

/// Per-point weights for a dataset. Points sharing a norm share weights, so
/// unit-normalized data costs a single evaluation.
pub fn dataset_weights(dataset: &Dataset, loss: &LossKind) -> Result<Vec<AnisotropicWeights>> {
    let d = dataset.dim();
    let mut cache: Option<(f64, AnisotropicWeights)> = None;
    dataset
        .norms()
        .iter()
        .map(|&norm| match cache {
            Some((n, w)) if n == norm => Ok(w),
            _ => {
                let w = loss.weights_for_norm(norm, d)?;
                cache = Some((norm, w));
                Ok(w)
            }
        })
        .collect()
}

fn check_same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}
