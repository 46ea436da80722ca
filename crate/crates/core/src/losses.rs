//! Pinball (check) and quantile-Huber losses, plus the empirical risk that
//! trainers minimize.
//!
//! The check loss is rho_tau(u) = u * (tau - 1{u < 0}). Its subgradient at
//! u = 0 is taken as the right derivative tau. The quantile-Huber variant
//! replaces the absolute kink with a Huber zone of width kappa:
//! |tau - 1{u < 0}| * L_kappa(u) / kappa, where L_kappa is quadratic inside
//! [-kappa, kappa] and linear outside; as kappa -> 0 it recovers the check
//! loss.

use crate::error::{Error, Result};
use crate::heads::{QuantileFan, QuantileLevels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Check,
    QuantileHuber,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Check => "check",
            LossKind::QuantileHuber => "qhuber",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which pointwise loss to apply at each quantile level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Huber zone width; ignored by the check loss.
    pub kappa: f64,
}

impl LossSpec {
    pub fn check() -> Self {
        LossSpec { kind: LossKind::Check, kappa: 1.0 }
    }

    pub fn quantile_huber(kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "huber width must be positive, got {kappa}"
            )));
        }
        Ok(LossSpec { kind: LossKind::QuantileHuber, kappa })
    }

    pub fn parse(name: &str, kappa: f64) -> Result<Self> {
        match name {
            "check" | "pinball" => Ok(LossSpec::check()),
            "qhuber" | "quantile_huber" => LossSpec::quantile_huber(kappa),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss '{other}' (expected check or qhuber)"
            ))),
        }
    }

    /// Loss value at residual u = y - f for level tau.
    pub fn value(&self, tau: f64, u: f64) -> Result<f64> {
        match self.kind {
            LossKind::Check => check_loss(tau, u),
            LossKind::QuantileHuber => qhuber_loss(tau, u, self.kappa),
        }
    }

    /// d/du of the loss; the check loss uses its right derivative at u = 0.
    pub fn deriv(&self, tau: f64, u: f64) -> Result<f64> {
        check_tau(tau)?;
        let d = match self.kind {
            LossKind::Check => {
                if u >= 0.0 {
                    tau
                } else {
                    tau - 1.0
                }
            }
            LossKind::QuantileHuber => {
                let w = if u < 0.0 { 1.0 - tau } else { tau };
                let core = if u.abs() <= self.kappa { u } else { self.kappa * u.signum() };
                w * core / self.kappa
            }
        };
        Ok(d)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("quantile level must lie in (0,1), got {tau}")))
    }
}

/// Check loss rho_tau(u) = u * (tau - 1{u < 0}).
pub fn check_loss(tau: f64, u: f64) -> Result<f64> {
    check_tau(tau)?;
    if !u.is_finite() {
        return Err(Error::NonFinite("check loss residual".into()));
    }
    Ok(if u >= 0.0 { tau * u } else { (tau - 1.0) * u })
}

/// Quantile-Huber loss |tau - 1{u<0}| * L_kappa(u) / kappa with
/// L_kappa(u) = u^2/2 inside the zone and kappa(|u| - kappa/2) outside.
pub fn qhuber_loss(tau: f64, u: f64, kappa: f64) -> Result<f64> {
    check_tau(tau)?;
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("huber width must be positive, got {kappa}")));
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("quantile-Huber residual".into()));
    }
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    let huber = if u.abs() <= kappa { 0.5 * u * u } else { kappa * (u.abs() - 0.5 * kappa) };
    Ok(w * huber / kappa)
}

/// Average loss over samples and levels,
/// risk = (1/(N K)) sum_i sum_k loss(tau_k, y_i - f_k(x_i)),
/// together with d risk / d f_k(x_i) = -loss'(tau_k, u_ik) / (N K) for every
/// sample and level, ready to feed a head backward pass.
pub fn empirical_risk(
    levels: &QuantileLevels,
    fans: &[QuantileFan],
    targets: &[f64],
    spec: &LossSpec,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if fans.is_empty() {
        return Err(Error::InvalidArgument("empirical risk needs at least one sample".into()));
    }
    if fans.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions but {} targets",
            fans.len(),
            targets.len()
        )));
    }
    let k = levels.len();
    let n = fans.len();
    let scale = 1.0 / (n as f64 * k as f64);
    let mut risk = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (fan, &y) in fans.iter().zip(targets) {
        if fan.k() != k {
            return Err(Error::ShapeMismatch(format!(
                "prediction has {} levels, expected {k}",
                fan.k()
            )));
        }
        if !y.is_finite() {
            return Err(Error::NonFinite("target".into()));
        }
        let mut row = Vec::with_capacity(k);
        for (idx, &f) in fan.quantiles().iter().enumerate() {
            let tau = levels[idx];
            let u = y - f;
            risk += spec.value(tau, u)?;
            row.push(-spec.deriv(tau, u)? * scale);
        }
        grads.push(row);
    }
    Ok((risk * scale, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{forward, HeadKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn check_loss_hand_values() {
        assert_relative_eq!(check_loss(0.5, 2.0).unwrap(), 1.0);
        assert_relative_eq!(check_loss(0.5, -2.0).unwrap(), 1.0);
        assert_relative_eq!(check_loss(0.9, 1.0).unwrap(), 0.9);
        assert_relative_eq!(check_loss(0.9, -1.0).unwrap(), 0.1, max_relative = 1e-12);
        assert_relative_eq!(check_loss(0.3, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn check_loss_rejects_bad_inputs() {
        assert!(check_loss(0.0, 1.0).is_err());
        assert!(check_loss(1.0, 1.0).is_err());
        assert!(check_loss(0.5, f64::INFINITY).is_err());
        assert!(qhuber_loss(0.5, 1.0, 0.0).is_err());
        assert!(LossSpec::quantile_huber(-1.0).is_err());
    }

    #[test]
    fn check_subgradient_at_zero_is_right_derivative() {
        let spec = LossSpec::check();
        assert_relative_eq!(spec.deriv(0.3, 0.0).unwrap(), 0.3);
        assert_relative_eq!(spec.deriv(0.3, 1e-9).unwrap(), 0.3);
        assert_relative_eq!(spec.deriv(0.3, -1e-9).unwrap(), -0.7);
    }

    #[test]
    fn qhuber_is_quadratic_inside_linear_outside() {
        // Inside the zone: w * u^2 / (2 kappa).
        assert_relative_eq!(qhuber_loss(0.7, 0.5, 1.0).unwrap(), 0.7 * 0.125);
        assert_relative_eq!(qhuber_loss(0.7, -0.5, 1.0).unwrap(), 0.3 * 0.125);
        // Outside: w * (|u| - kappa/2).
        assert_relative_eq!(qhuber_loss(0.7, 3.0, 1.0).unwrap(), 0.7 * 2.5);
        assert_relative_eq!(qhuber_loss(0.7, -3.0, 1.0).unwrap(), 0.3 * 2.5, max_relative = 1e-12);
        // Continuity at the zone edge.
        let eps = 1e-9;
        let inside = qhuber_loss(0.4, 1.0 - eps, 1.0).unwrap();
        let outside = qhuber_loss(0.4, 1.0 + eps, 1.0).unwrap();
        assert!((inside - outside).abs() < 1e-8);
    }

    #[test]
    fn qhuber_approaches_check_loss_as_kappa_shrinks() {
        for &u in &[-2.0, -0.3, 0.4, 1.7] {
            for &tau in &[0.1, 0.5, 0.9] {
                let q = qhuber_loss(tau, u, 1e-9).unwrap();
                let c = check_loss(tau, u).unwrap();
                assert_relative_eq!(q, c, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences_away_from_kinks() {
        let specs = [LossSpec::check(), LossSpec::quantile_huber(1.0).unwrap()];
        let mut rng = crate::rng::substream(31, crate::rng::Domain::Eval, 0);
        for spec in specs {
            for _ in 0..200 {
                let tau = rng.random_range(0.05..0.95);
                let mut u: f64 = rng.random_range(-3.0..3.0);
                // Keep away from the kinks at 0 and +-kappa.
                if u.abs() < 1e-3 || (u.abs() - spec.kappa).abs() < 1e-3 {
                    u += 0.01;
                }
                let h = 1e-7;
                let fd = (spec.value(tau, u + h).unwrap() - spec.value(tau, u - h).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(spec.deriv(tau, u).unwrap(), fd, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn empirical_risk_matches_brute_force_double_loop() {
        let levels = QuantileLevels::uniform(7).unwrap();
        let mut rng = crate::rng::substream(37, crate::rng::Domain::Eval, 0);
        let n = 64;
        let mut fans = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            fans.push(forward(HeadKind::NqElu, raw).unwrap());
            ys.push(rng.random_range(-5.0..5.0));
        }
        let spec = LossSpec::check();
        let (risk, grads) = empirical_risk(&levels, &fans, &ys, &spec).unwrap();

        // Oracle: literal double loop with the check loss written out inline.
        let mut total = 0.0;
        for i in 0..n {
            for k in 0..7 {
                let tau = levels[k];
                let u = ys[i] - fans[i].quantiles()[k];
                total += if u >= 0.0 { tau * u } else { (tau - 1.0) * u };
            }
        }
        let oracle = total / (n as f64 * 7.0);
        assert_relative_eq!(risk, oracle, max_relative = 1e-12);
        assert_eq!(grads.len(), n);
        assert!(grads.iter().all(|row| row.len() == 7));
    }

    #[test]
    fn empirical_risk_gradient_matches_finite_differences() {
        let levels = QuantileLevels::new(vec![0.2, 0.5, 0.8]).unwrap();
        let mut rng = crate::rng::substream(41, crate::rng::Domain::Eval, 0);
        for spec in [LossSpec::check(), LossSpec::quantile_huber(0.7).unwrap()] {
            let raws: Vec<Vec<f64>> =
                (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let build = |raws: &[Vec<f64>]| -> Vec<QuantileFan> {
                raws.iter().map(|r| forward(HeadKind::Dqr, r.clone()).unwrap()).collect()
            };
            let fans = build(&raws);
            let (_, grads) = empirical_risk(&levels, &fans, &ys, &spec).unwrap();
            for i in 0..5 {
                for k in 0..3 {
                    let h = 1e-7;
                    let mut plus = raws.clone();
                    plus[i][k] += h;
                    let mut minus = raws.clone();
                    minus[i][k] -= h;
                    let (rp, _) = empirical_risk(&levels, &build(&plus), &ys, &spec).unwrap();
                    let (rm, _) = empirical_risk(&levels, &build(&minus), &ys, &spec).unwrap();
                    let fd = (rp - rm) / (2.0 * h);
                    // DQR passes raw through, so d risk/d raw = d risk/d f.
                    assert_relative_eq!(grads[i][k], fd, max_relative = 1e-5, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn empirical_risk_validates_shapes() {
        let levels = QuantileLevels::uniform(3).unwrap();
        let fan = forward(HeadKind::Dqr, vec![0.0, 0.0, 0.0]).unwrap();
        assert!(empirical_risk(&levels, &[], &[], &LossSpec::check()).is_err());
        assert!(empirical_risk(&levels, &[fan.clone()], &[1.0, 2.0], &LossSpec::check()).is_err());
        let wrong = forward(HeadKind::Dqr, vec![0.0, 0.0]).unwrap();
        assert!(empirical_risk(&levels, &[wrong], &[1.0], &LossSpec::check()).is_err());
        assert!(empirical_risk(&levels, &[fan], &[f64::NAN], &LossSpec::check()).is_err());
    }

    /// The empirical check risk at one level is minimized near the sample
    /// tau-quantile; with many standard normal draws the minimizer must land
    /// near the population quantile. Ternary search exploits convexity.
    #[test]
    fn check_risk_minimizer_recovers_population_quantile() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::substream(43, crate::rng::Domain::Eval, 0);
        let ys: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let tau = 0.8;
        let risk = |c: f64| -> f64 {
            ys.iter().map(|&y| check_loss(tau, y - c).unwrap()).sum::<f64>() / ys.len() as f64
        };
        let (mut lo, mut hi) = (-3.0, 3.0);
        for _ in 0..100 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if risk(m1) < risk(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let minimizer = 0.5 * (lo + hi);
        // Phi^{-1}(0.8) = 0.8416...
        assert!((minimizer - 0.8416).abs() < 0.02, "minimizer {minimizer}");
    }

    proptest! {
        #[test]
        fn check_loss_is_nonnegative_convex_homogeneous(
            tau in 0.01f64..0.99,
            u1 in -10.0f64..10.0,
            u2 in -10.0f64..10.0,
            lambda in 0.0f64..1.0,
            c in 0.01f64..100.0,
        ) {
            let r = |u: f64| check_loss(tau, u).unwrap();
            prop_assert!(r(u1) >= 0.0);
            // Zero exactly at zero residual.
            prop_assert_eq!(r(0.0), 0.0);
            let mix = lambda * u1 + (1.0 - lambda) * u2;
            prop_assert!(r(mix) <= lambda * r(u1) + (1.0 - lambda) * r(u2) + 1e-12);
            // Positive homogeneity of degree one.
            prop_assert!((r(c * u1) - c * r(u1)).abs() <= 1e-9 * (1.0 + c * r(u1)));
        }

        #[test]
        fn qhuber_is_nonnegative_and_zero_at_zero(
            tau in 0.01f64..0.99,
            u in -10.0f64..10.0,
            kappa in 0.01f64..5.0,
        ) {
            prop_assert!(qhuber_loss(tau, u, kappa).unwrap() >= 0.0);
            prop_assert_eq!(qhuber_loss(tau, 0.0, kappa).unwrap(), 0.0);
        }
    }
}
