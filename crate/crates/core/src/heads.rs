//! Quantile heads: maps from a raw network output vector to K conditional
//! quantile estimates.
//!
//! The non-crossing (NQ) head reparameterizes the quantile vector through a
//! mean anchor v and K positive gaps:
//!
//! ```text
//! f_k = v - gbar + sum_{i<=k} sigma(g_i),   gbar = (1/K) sum_j (K+1-j) sigma(g_j)
//! ```
//!
//! with sigma(x) = ELU(x) + 1 > 0. Two identities follow and are tested as
//! invariants: mean_k f_k = v, and f_{k+1} - f_k = sigma(g_{k+1}) > 0, so the
//! estimates never cross. Baseline heads from the same literature (DQR, DQR*,
//! NC-QR-DQN, and the ReLU-gap NQ variant) share the `QuantileFan` output type
//! so trainers can swap heads freely.
//!
//! Floating point caveat: when sigma(g) is many orders of magnitude below
//! |f_k|, `f_k + sigma` rounds back to `f_k`. The NQ_ELU head bumps such a
//! collapsed value to the next representable float, which keeps the
//! non-crossing invariant strict in f64 at a cost of at most one ulp.

use crate::error::{Error, Result};

/// Head architecture tag. Decides how a raw network output vector is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Mean anchor + ELU(x)+1 gaps; strictly increasing output.
    NqElu,
    /// Mean anchor + ReLU gaps; non-decreasing output.
    NqRelu,
    /// Identity head; K unconstrained outputs, crossings possible.
    Dqr,
    /// First quantile + softplus increments; non-decreasing output.
    DqrStar,
    /// Scale-factor head: beta + relu(alpha) * cumulative softmax weights.
    NcQrDqn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] =
        [HeadKind::NqElu, HeadKind::NqRelu, HeadKind::Dqr, HeadKind::DqrStar, HeadKind::NcQrDqn];

    /// Raw vector length this head consumes for K quantile levels.
    pub fn raw_len(self, k: usize) -> usize {
        match self {
            HeadKind::NqElu | HeadKind::NqRelu => k + 1,
            HeadKind::Dqr | HeadKind::DqrStar => k,
            HeadKind::NcQrDqn => k + 2,
        }
    }

    /// Number of quantile levels a raw vector of `len` entries encodes.
    pub fn levels_for_raw_len(self, len: usize) -> Result<usize> {
        let k = match self {
            HeadKind::NqElu | HeadKind::NqRelu => len.checked_sub(1),
            HeadKind::Dqr | HeadKind::DqrStar => Some(len),
            HeadKind::NcQrDqn => len.checked_sub(2),
        };
        match k {
            Some(k) if k >= 1 => Ok(k),
            _ => Err(Error::InvalidArgument(format!(
                "raw vector of length {len} is too short for head {self}"
            ))),
        }
    }

    /// Whether the head guarantees a non-decreasing quantile vector.
    pub fn is_monotone(self) -> bool {
        !matches!(self, HeadKind::Dqr)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::NqElu => "nq",
            HeadKind::NqRelu => "nq_relu",
            HeadKind::Dqr => "dqr",
            HeadKind::DqrStar => "dqr_star",
            HeadKind::NcQrDqn => "ncqrdqn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nq" | "nq_elu" => Ok(HeadKind::NqElu),
            "nq_relu" => Ok(HeadKind::NqRelu),
            "dqr" => Ok(HeadKind::Dqr),
            "dqr_star" | "dqr*" => Ok(HeadKind::DqrStar),
            "ncqrdqn" | "nc_qr_dqn" => Ok(HeadKind::NcQrDqn),
            other => Err(Error::InvalidArgument(format!(
                "unknown head '{other}' (expected nq, nq_relu, dqr, dqr_star, or ncqrdqn)"
            ))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Strictly increasing quantile levels in (0,1).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::InvalidArgument("need at least one quantile level".into()));
        }
        for pair in taus.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::InvalidArgument(format!(
                    "levels must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if !taus.iter().all(|&t| t > 0.0 && t < 1.0) {
            return Err(Error::InvalidArgument("levels must lie strictly inside (0,1)".into()));
        }
        Ok(QuantileLevels(taus))
    }

    /// The equispaced grid tau_k = k/(K+1), k = 1..K.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("need at least one quantile level".into()));
        }
        let denom = (k + 1) as f64;
        QuantileLevels::new((1..=k).map(|i| i as f64 / denom).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for QuantileLevels {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One head evaluation: the raw input vector and the K quantile estimates it
/// produced. Construction goes through `forward` / `nq_forward`, which
/// validate the raw length and enforce each head's ordering guarantee.
#[derive(Debug, Clone)]
pub struct QuantileFan {
    kind: HeadKind,
    raw: Vec<f64>,
    f: Vec<f64>,
}

impl QuantileFan {
    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.f.len()
    }

    /// Quantile estimates f_1..f_K in level order.
    pub fn quantiles(&self) -> &[f64] {
        &self.f
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Mean anchor v for NQ heads; None for the baselines.
    pub fn v(&self) -> Option<f64> {
        match self.kind {
            HeadKind::NqElu | HeadKind::NqRelu => Some(self.raw[0]),
            _ => None,
        }
    }

    /// Pre-gap values g_1..g_K for NQ heads; None for the baselines.
    pub fn pre_gaps(&self) -> Option<&[f64]> {
        match self.kind {
            HeadKind::NqElu | HeadKind::NqRelu => Some(&self.raw[1..]),
            _ => None,
        }
    }

    /// Number of adjacent pairs with f_{k+1} < f_k.
    pub fn crossings(&self) -> usize {
        self.f.windows(2).filter(|p| p[1] < p[0]).count()
    }
}

/// sigma(x) = ELU(x) + 1: exp(x) for x < 0, x + 1 for x >= 0. Positive
/// everywhere and continuously differentiable.
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// d/dx of `elu_plus_one`.
pub fn elu_plus_one_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Overflow-safe log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// ReLU subgradient with the value 0 at the kink.
fn relu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} contains NaN or infinity")))
    }
}

/// Neumaier compensated sum; keeps the mean identity tight for large K.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn nq_fan(kind: HeadKind, raw: Vec<f64>) -> QuantileFan {
    let strict = kind == HeadKind::NqElu;
    let gap = |x: f64| -> f64 {
        match kind {
            HeadKind::NqElu => elu_plus_one(x),
            HeadKind::NqRelu => relu(x),
            _ => unreachable!("nq_fan only handles NQ kinds"),
        }
    };
    let v = raw[0];
    let g = &raw[1..];
    let k = g.len();
    let sigma: Vec<f64> = g.iter().map(|&x| gap(x)).collect();
    let gbar = compensated_sum(
        sigma.iter().enumerate().map(|(j, &s)| (k - j) as f64 * s),
    ) / k as f64;
    let mut f = Vec::with_capacity(k);
    let mut cur = v - gbar + sigma[0];
    f.push(cur);
    for &s in &sigma[1..] {
        let mut next = cur + s;
        // Strict heads may not collapse a positive gap to zero width.
        if strict && next <= cur {
            next = cur.next_up();
        }
        f.push(next);
        cur = next;
    }
    QuantileFan { kind, raw, f }
}

/// NQ head with ELU(x)+1 gaps: raw layout (v, g_1..g_K).
pub fn nq_forward(v: f64, g: &[f64]) -> Result<QuantileFan> {
    let mut raw = Vec::with_capacity(g.len() + 1);
    raw.push(v);
    raw.extend_from_slice(g);
    forward(HeadKind::NqElu, raw)
}

/// Evaluates any head on its raw vector. The raw length fixes K (see
/// `HeadKind::raw_len`).
pub fn forward(kind: HeadKind, raw: Vec<f64>) -> Result<QuantileFan> {
    check_finite("raw head input", &raw)?;
    let k = kind.levels_for_raw_len(raw.len())?;
    let fan = match kind {
        HeadKind::NqElu | HeadKind::NqRelu => nq_fan(kind, raw),
        HeadKind::Dqr => {
            let f = raw.clone();
            QuantileFan { kind, raw, f }
        }
        HeadKind::DqrStar => {
            let mut f = Vec::with_capacity(k);
            let mut cur = raw[0];
            f.push(cur);
            for &r in &raw[1..] {
                cur += softplus(r);
                f.push(cur);
            }
            QuantileFan { kind, raw, f }
        }
        HeadKind::NcQrDqn => {
            let scale = relu(raw[0]);
            let beta = raw[1];
            let p = softmax(&raw[2..]);
            let mut f = Vec::with_capacity(k);
            let mut cum = 0.0;
            for &pt in &p {
                cum += pt;
                f.push(beta + scale * cum);
            }
            QuantileFan { kind, raw, f }
        }
    };
    debug_assert_eq!(fan.f.len(), k);
    Ok(fan)
}

fn softmax(phi: &[f64]) -> Vec<f64> {
    let m = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = phi.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Gradients of a loss through the NQ head: given dL/df, returns
/// (dL/dv, dL/dg). Works for both NQ gap functions.
///
/// Note d f_k / d sigma_1 = 1 - (K+1-1)/K = 0 for every k: the first gap
/// enters each prefix sum and gbar with the same unit coefficient, so the
/// output is independent of g_1 and dL/dg_1 is exactly zero. The raw vector
/// carries one slack direction.
pub fn nq_backward(fan: &QuantileFan, dl_df: &[f64]) -> Result<(f64, Vec<f64>)> {
    let g = fan.pre_gaps().ok_or_else(|| {
        Error::InvalidArgument(format!("nq_backward needs an NQ head, got {}", fan.kind))
    })?;
    let k = fan.k();
    if dl_df.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "dL/df has {} entries, head has K={k}",
            dl_df.len()
        )));
    }
    check_finite("dL/df", dl_df)?;
    let gap_deriv = match fan.kind {
        HeadKind::NqElu => elu_plus_one_deriv,
        HeadKind::NqRelu => relu_deriv,
        _ => unreachable!(),
    };
    // f_k = v - gbar + sum_{i<=k} sigma_i with gbar = (1/K) sum_i (K+1-i) sigma_i,
    // so d f_k / d sigma_i = [i <= k] - (K+1-i)/K. Summing against dL/df gives
    // suffix sums minus a total-weighted term.
    let total: f64 = dl_df.iter().sum();
    let mut dl_dg = vec![0.0; k];
    let mut suffix = 0.0;
    for i in (0..k).rev() {
        suffix += dl_df[i];
        let dl_dsigma = suffix - total * (k - i) as f64 / k as f64;
        dl_dg[i] = dl_dsigma * gap_deriv(g[i]);
    }
    Ok((total, dl_dg))
}

/// Gradients of a loss through any head: given dL/df, returns dL/draw with
/// the head's raw layout. Kinks (ReLU gaps, the NC-QR-DQN scale) use
/// subgradient 0 at the kink.
pub fn backward(fan: &QuantileFan, dl_df: &[f64]) -> Result<Vec<f64>> {
    let k = fan.k();
    if dl_df.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "dL/df has {} entries, head has K={k}",
            dl_df.len()
        )));
    }
    check_finite("dL/df", dl_df)?;
    match fan.kind {
        HeadKind::NqElu | HeadKind::NqRelu => {
            let (dv, dg) = nq_backward(fan, dl_df)?;
            let mut out = Vec::with_capacity(k + 1);
            out.push(dv);
            out.extend(dg);
            Ok(out)
        }
        HeadKind::Dqr => Ok(dl_df.to_vec()),
        HeadKind::DqrStar => {
            // f_j = raw_1 + sum_{2<=i<=j} softplus(raw_i): raw_1 moves every
            // level, raw_i moves levels i and above.
            let mut out = vec![0.0; k];
            let mut suffix = 0.0;
            for i in (1..k).rev() {
                suffix += dl_df[i];
                out[i] = sigmoid(fan.raw[i]) * suffix;
            }
            out[0] = suffix + dl_df[0];
            Ok(out)
        }
        HeadKind::NcQrDqn => {
            let alpha = fan.raw[0];
            let scale = relu(alpha);
            let p = softmax(&fan.raw[2..]);
            let total: f64 = dl_df.iter().sum();
            // d f_k / d alpha = relu'(alpha) * cum_k.
            let mut d_alpha = 0.0;
            let mut cum = 0.0;
            for (i, &pt) in p.iter().enumerate() {
                cum += pt;
                d_alpha += dl_df[i] * cum;
            }
            d_alpha *= relu_deriv(alpha);
            // d f_k / d p_t = scale for t <= k, then softmax Jacobian.
            let mut dl_dp = vec![0.0; k];
            let mut suffix = 0.0;
            for t in (0..k).rev() {
                suffix += dl_df[t];
                dl_dp[t] = scale * suffix;
            }
            let inner: f64 = p.iter().zip(&dl_dp).map(|(&pt, &d)| pt * d).sum();
            let mut out = Vec::with_capacity(k + 2);
            out.push(d_alpha);
            out.push(total);
            out.extend(p.iter().zip(&dl_dp).map(|(&pt, &d)| pt * (d - inner)));
            Ok(out)
        }
    }
}
