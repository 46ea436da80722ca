//! Simulation models with known conditional quantiles, and the special
//! functions they need.
//!
//! Every model is location-scale: Q(x, tau) = m(x) + s(x) * F^{-1}(tau) with
//! s(x) >= 0 and noise F either standard normal or Student t with 2 degrees
//! of freedom. Data are drawn by inverse transform, Y = Q(X, U) with
//! U ~ Unif(0,1), so the sampled conditional law matches `true_quantile` by
//! construction.
//!
//! The normal quantile is computed from scratch: an Acklam-style rational
//! initial estimate polished by Newton steps against an own CDF built on an
//! error-function power series (small arguments) and continued fraction
//! (tails). The t2 quantile has a closed form. Both are cross-checked in the
//! tests against quadrature and bisection oracles that share no code with the
//! implementations.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

const SQRT_2PI: f64 = 2.506628274631000502415765284811;

/// erf(x) for 0 <= x < 3 by the all-positive power series
/// erf(x) = (2x/sqrt(pi)) e^{-x^2} sum_n (2x^2)^n / (2n+1)!!.
fn erf_series(x: f64) -> f64 {
    debug_assert!((0.0..3.0).contains(&x));
    let x2 = 2.0 * x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0u32;
    while term > sum * 1e-18 {
        n += 1;
        term *= x2 / (2 * n + 1) as f64;
        sum += term;
    }
    std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp() * sum
}

/// erfc(x) for x >= 3 by the Laplace continued fraction
/// erfc(x) = e^{-x^2}/(x sqrt(pi)) / (1 + q_1/(1 + q_2/(1 + ...))),
/// q_n = n/(2x^2), evaluated by backward recurrence.
fn erfc_cf(x: f64) -> f64 {
    debug_assert!(x >= 3.0);
    let inv = 0.5 / (x * x);
    let mut t = 1.0;
    for n in (1..=64u32).rev() {
        t = 1.0 + n as f64 * inv / t;
    }
    (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) / t
}

/// erfc(t) for t >= 0.
fn erfc_nonneg(t: f64) -> f64 {
    if t < 3.0 {
        1.0 - erf_series(t)
    } else {
        erfc_cf(t)
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    if t >= 0.0 {
        1.0 - 0.5 * erfc_nonneg(t)
    } else {
        0.5 * erfc_nonneg(-t)
    }
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Rational initial estimate of the normal quantile (Acklam's coefficients);
/// relative error ~1e-9, fixed up by Newton in `std_normal_quantile`.
fn normal_quantile_estimate(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

/// Standard normal quantile: Acklam estimate plus Newton refinement against
/// `std_normal_cdf`. The result q satisfies |Phi(q) - p| < 1e-10 over (0,1).
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie in (0,1), got {p}"
        )));
    }
    let mut x = normal_quantile_estimate(p);
    for _ in 0..3 {
        let err = std_normal_cdf(x) - p;
        let d = std_normal_pdf(x);
        if d <= 0.0 {
            break;
        }
        let step = err / d;
        x -= step;
        if step.abs() < 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    Ok(x)
}

/// Student t (2 degrees of freedom) quantile, closed form
/// (2p - 1) sqrt(2 / (4 p (1 - p))).
pub fn student_t2_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie in (0,1), got {p}"
        )));
    }
    Ok((2.0 * p - 1.0) * (2.0 / (4.0 * p * (1.0 - p))).sqrt())
}

/// Student t (2 degrees of freedom) CDF, 1/2 + x / (2 sqrt(2 + x^2)).
pub fn student_t2_cdf(x: f64) -> f64 {
    0.5 + x / (2.0 * (2.0 + x * x).sqrt())
}

/// Noise family of a simulation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    StdNormal,
    StudentT2,
}

impl NoiseKind {
    pub fn quantile(self, p: f64) -> Result<f64> {
        match self {
            NoiseKind::StdNormal => std_normal_quantile(p),
            NoiseKind::StudentT2 => student_t2_quantile(p),
        }
    }

    pub fn cdf(self, x: f64) -> f64 {
        match self {
            NoiseKind::StdNormal => std_normal_cdf(x),
            NoiseKind::StudentT2 => student_t2_cdf(x),
        }
    }
}

/// Index coefficients shared by the multivariate models.
pub const COEF_A: [f64; 8] = [1.012, -0.965, -0.785, 1.336, 0.0, 0.378, 0.599, 1.292];
pub const COEF_B: [f64; 8] = [1.002, 0.0, -0.497, 3.993, 0.0, 0.0, 0.0, 0.0];

/// Benchmark regression models with closed-form conditional quantiles.
/// Covariates live on [0,1]^d with d = 1 or 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimModel {
    /// Y = 2x + t2 noise.
    Linear1d,
    /// Y = 2x sin(4 pi x) + exp(4x - 2) * N(0,1).
    Wave,
    /// Y = 4(1 - |x - 0.5|) + |sin(pi x)| * N(0,1).
    Angle,
    /// Y = 2 A'x + t2 noise.
    MvLinear,
    /// Y = exp(0.1 A'x) + |sin(pi B'x)| * N(0,1).
    SingleIndex,
    /// Y = 3x1 + 4(x2-0.5)^2 + 2 sin(pi x3) - 5|x4-0.5| + exp(0.1(B'x-0.5)) * N(0,1).
    Additive,
}

impl SimModel {
    pub const ALL: [SimModel; 6] = [
        SimModel::Linear1d,
        SimModel::Wave,
        SimModel::Angle,
        SimModel::MvLinear,
        SimModel::SingleIndex,
        SimModel::Additive,
    ];

    pub fn input_dim(self) -> usize {
        match self {
            SimModel::Linear1d | SimModel::Wave | SimModel::Angle => 1,
            SimModel::MvLinear | SimModel::SingleIndex | SimModel::Additive => 8,
        }
    }

    pub fn noise(self) -> NoiseKind {
        match self {
            SimModel::Linear1d | SimModel::MvLinear => NoiseKind::StudentT2,
            _ => NoiseKind::StdNormal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SimModel::Linear1d => "linear1d",
            SimModel::Wave => "wave",
            SimModel::Angle => "angle",
            SimModel::MvLinear => "mvlinear",
            SimModel::SingleIndex => "sindex",
            SimModel::Additive => "additive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear1d" | "linear" => Ok(SimModel::Linear1d),
            "wave" => Ok(SimModel::Wave),
            "angle" => Ok(SimModel::Angle),
            "mvlinear" => Ok(SimModel::MvLinear),
            "sindex" | "single_index" => Ok(SimModel::SingleIndex),
            "additive" => Ok(SimModel::Additive),
            other => Err(Error::InvalidArgument(format!(
                "unknown model '{other}' (expected linear1d, wave, angle, mvlinear, sindex, or additive)"
            ))),
        }
    }

    fn check_x(self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "model {self} expects {} covariates, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if !x.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "covariates must lie in [0,1], got {x:?}"
            )));
        }
        Ok(())
    }

    /// Location m(x) and scale s(x) >= 0 of the conditional law.
    pub fn location_scale(self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_x(x)?;
        use std::f64::consts::PI;
        let dot = |c: &[f64; 8]| -> f64 { c.iter().zip(x).map(|(a, b)| a * b).sum() };
        Ok(match self {
            SimModel::Linear1d => (2.0 * x[0], 1.0),
            SimModel::Wave => (2.0 * x[0] * (4.0 * PI * x[0]).sin(), (4.0 * x[0] - 2.0).exp()),
            SimModel::Angle => (4.0 * (1.0 - (x[0] - 0.5).abs()), (PI * x[0]).sin().abs()),
            SimModel::MvLinear => (2.0 * dot(&COEF_A), 1.0),
            SimModel::SingleIndex => {
                ((0.1 * dot(&COEF_A)).exp(), (PI * dot(&COEF_B)).sin().abs())
            }
            SimModel::Additive => {
                let m = 3.0 * x[0] + 4.0 * (x[1] - 0.5).powi(2) + 2.0 * (PI * x[2]).sin()
                    - 5.0 * (x[3] - 0.5).abs();
                (m, (0.1 * (dot(&COEF_B) - 0.5)).exp())
            }
        })
    }

    /// Conditional quantile Q(x, tau) = m(x) + s(x) F^{-1}(tau).
    pub fn true_quantile(self, x: &[f64], tau: f64) -> Result<f64> {
        let (m, s) = self.location_scale(x)?;
        Ok(m + s * self.noise().quantile(tau)?)
    }
}

impl std::fmt::Display for SimModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sampled regression dataset: covariate rows and responses, plus the
/// recipe (model, seed) that regenerates it bit-identically.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub model: SimModel,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    /// Draws n rows: per row, d covariates from Unif[0,1] then one latent
    /// level from Unif(0,1), in that order, from the data stream of `seed`;
    /// Y is the true conditional quantile at the latent level.
    pub fn sample(model: SimModel, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one row".into()));
        }
        let d = model.input_dim();
        let mut rng = rng::substream(seed, Domain::Data, 0);
        let mut x = Array2::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        let mut row = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let v: f64 = rng.random_range(0.0..1.0);
                x[[i, j]] = v;
                row[j] = v;
            }
            let u = loop {
                let u: f64 = rng.random::<f64>();
                if u > 0.0 && u < 1.0 {
                    break u;
                }
            };
            y.push(model.true_quantile(&row, u)?);
        }
        Ok(Dataset { model, x, y, seed })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Writes columns x_1..x_d,y with full round-trip precision.
    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.x.ncols();
        let header: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
        writeln!(w, "{},y", header.join(","))?;
        for (row, &y) in self.x.rows().into_iter().zip(&self.y) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{y}", cells.join(","))?;
        }
        Ok(())
    }
}
