//! Closed-form error bounds for exact and approximate uniformly ergodic chains.
//!
//! Everything here is a pure function of a few reals. Bounds are returned raw
//! (they can exceed 1); use [`clamp_unit`] when reporting a TV value.

use crate::error::{ensure, Result};

/// Doeblin constant of the exact kernel and the uniform TV error of the
/// approximating kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErgodicityParams {
    alpha: f64,
    epsilon: f64,
}

impl ErgodicityParams {
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        check_alpha(alpha)?;
        ensure!(
            epsilon >= 0.0 && epsilon < alpha / 2.0,
            Domain,
            "epsilon {epsilon} must lie in [0, alpha/2) with alpha {alpha}"
        );
        Ok(Self { alpha, epsilon })
    }

    pub fn exact(alpha: f64) -> Result<Self> {
        Self::new(alpha, 0.0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Doeblin constant guaranteed for the approximate kernel.
    pub fn alpha_eps(&self) -> f64 {
        self.alpha - 2.0 * self.epsilon
    }
}

/// Path length, initial TV distance and oscillation seminorm of f.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub t: u64,
    pub tv0: f64,
    pub fstar: f64,
}

impl BoundInputs {
    pub fn new(t: u64, tv0: f64, fstar: f64) -> Result<Self> {
        let b = Self { t, tv0, fstar };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.t >= 1, Domain, "path length must be at least 1");
        check_tv(self.tv0)?;
        ensure!(self.fstar >= 0.0 && self.fstar.is_finite(), Domain, "fstar {} must be >= 0", self.fstar);
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    ensure!(alpha > 0.0 && alpha < 1.0, Domain, "alpha {alpha} must lie in (0,1)");
    Ok(())
}

fn check_tv(tv: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&tv), Domain, "initial TV {tv} must lie in [0,1]");
    Ok(())
}

/// 1 − (1−α)^t without cancellation or underflow.
pub fn decay_complement(t: u64, alpha: f64) -> f64 {
    if t == 1 {
        return alpha;
    }
    -(t as f64 * (-alpha).ln_1p()).exp_m1()
}

/// Σ_{d=1}^{t−1} (t−d)(1−α)^d.
fn lag_weight_sum(t: u64, alpha: f64) -> f64 {
    let tf = t as f64;
    if tf * alpha > 1.0 {
        let tail = ((tf + 1.0) * (-alpha).ln_1p()).exp_m1();
        return (tf * alpha * (1.0 - alpha) + alpha + tail) / (alpha * alpha);
    }
    // Binomial expansion of (1−α)^{t+1}; the leading terms cancel exactly.
    let mut sum = tf * (tf - 1.0) / 2.0;
    let mut term = -(tf + 1.0) * tf * (tf - 1.0) / 6.0 * alpha;
    let mut k = 3.0;
    while k <= tf + 1.0 {
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
        term *= -alpha * (tf + 1.0 - k) / (k + 1.0);
        k += 1.0;
    }
    sum
}

/// Normalized double sum t⁻² Σ_{j,k<t} (1−α)^{|j−k|}.
pub fn variance_factor(t: u64, alpha: f64) -> Result<f64> {
    ensure!(t >= 1, Domain, "path length must be at least 1");
    check_alpha(alpha)?;
    let tf = t as f64;
    Ok((tf + 2.0 * lag_weight_sum(t, alpha)) / (tf * tf))
}

fn cesaro_term(t: u64, alpha: f64, tv0: f64) -> f64 {
    if t == 1 {
        return tv0;
    }
    decay_complement(t, alpha) * tv0 / (alpha * t as f64)
}

fn tv_bound(alpha: f64, epsilon: f64, t: u64, tv0: f64) -> f64 {
    epsilon / alpha + cesaro_term(t, alpha - 2.0 * epsilon, tv0)
}

fn l2_bound(alpha: f64, epsilon: f64, t: u64, tv0: f64, fstar: f64) -> Result<f64> {
    let ae = alpha - 2.0 * epsilon;
    let f2 = fstar * fstar;
    let tf = t as f64;
    let decay = decay_complement(t, ae);
    let burn = 4.0 * f2 * decay * tv0 / (tf * ae);
    let var = f2 * variance_factor(t, ae)?;
    let cross = 8.0 * f2 * epsilon * decay / (tf * alpha * ae);
    let bias = 4.0 * epsilon * epsilon * f2 / (alpha * alpha);
    Ok(burn + var + cross + bias)
}

/// TV between the stationary law and the Cesàro average of an exact chain.
pub fn tv_bound_exact(alpha: f64, inputs: BoundInputs) -> Result<f64> {
    check_alpha(alpha)?;
    inputs.validate()?;
    Ok(tv_bound(alpha, 0.0, inputs.t, inputs.tv0))
}

/// As [`tv_bound_exact`] for the approximate chain; `tv0_eps` is the initial
/// distance to the approximate chain's own stationary law.
pub fn tv_bound_approx(params: ErgodicityParams, t: u64, tv0_eps: f64) -> Result<f64> {
    ensure!(t >= 1, Domain, "path length must be at least 1");
    check_tv(tv0_eps)?;
    Ok(tv_bound(params.alpha, params.epsilon, t, tv0_eps))
}

/// Mean squared error bound for the ergodic average of the exact chain.
pub fn l2_bound_exact(alpha: f64, inputs: BoundInputs) -> Result<f64> {
    check_alpha(alpha)?;
    inputs.validate()?;
    l2_bound(alpha, 0.0, inputs.t, inputs.tv0, inputs.fstar)
}

pub fn l2_bound_approx(params: ErgodicityParams, t: u64, tv0_eps: f64, fstar: f64) -> Result<f64> {
    BoundInputs::new(t, tv0_eps, fstar)?;
    l2_bound(params.alpha, params.epsilon, t, tv0_eps, fstar)
}

/// Upper bound ε/α on the TV distance between the two stationary laws.
pub fn stationary_bias_bound(params: ErgodicityParams) -> f64 {
    params.epsilon / params.alpha
}

/// Number of steps after which the worst-case TV to stationarity is below δ.
pub fn mixing_time_bound(alpha: f64, delta: f64) -> Result<f64> {
    check_alpha(alpha)?;
    ensure!(delta > 0.0 && delta < 1.0, Domain, "delta {delta} must lie in (0,1)");
    Ok(delta.ln() / (-alpha).ln_1p())
}

/// Clamp a raw TV bound to [0, 1] for display.
pub fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_variance_factor(t: u64, alpha: f64) -> f64 {
        let r = 1.0 - alpha;
        let n = t as usize;
        let pow: Vec<f64> = (0..n).map(|d| r.powi(d as i32)).collect();
        let mut total = 0.0;
        for j in 0..n {
            let mut row = 0.0;
            for k in 0..n {
                row += pow[j.abs_diff(k)];
            }
            total += row;
        }
        total / (t * t) as f64
    }

    fn paper_closed_form(t: u64, a: f64) -> f64 {
        let t = t as f64;
        2.0 / (a * t) + 2.0 / (a * t * t) + 2.0 * (1.0 - a).powf(t + 1.0) / (a * a * t * t)
            - 1.0 / t
            - 2.0 / (a * a * t * t)
    }

    #[test]
    fn variance_factor_examples() {
        assert_eq!(variance_factor(1, 0.3).unwrap(), 1.0);
        assert!((variance_factor(2, 0.5).unwrap() - 0.75).abs() < 1e-15);
        assert!(variance_factor(0, 0.5).is_err());
        assert!(variance_factor(3, 1.0).is_err());
        assert!(variance_factor(1_000_000, 0.5).unwrap() < 3e-6);
    }

    #[test]
    fn variance_factor_matches_double_sum() {
        for &a in &[0.9, 0.5, 0.1, 1e-2, 1e-4] {
            for t in 1..=500u64 {
                let s = variance_factor(t, a).unwrap();
                let b = brute_variance_factor(t, a);
                assert!((s - b).abs() <= 1e-12, "t={t} a={a}: {s} vs {b}");
            }
        }
    }

    #[test]
    fn variance_factor_matches_printed_form_where_stable() {
        for &(t, a) in &[(10u64, 0.5), (100, 0.1), (37, 0.9)] {
            assert!((variance_factor(t, a).unwrap() - paper_closed_form(t, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_examples() {
        let b = |t, tv0| BoundInputs::new(t, tv0, 1.0).unwrap();
        assert_eq!(tv_bound_exact(0.37, b(1, 0.8)).unwrap(), 0.8);
        assert!((tv_bound_exact(0.5, b(2, 0.5)).unwrap() - 0.375).abs() < 1e-15);
        assert_eq!(tv_bound_exact(0.5, b(9, 0.0)).unwrap(), 0.0);
        let p = ErgodicityParams::new(0.5, 0.1).unwrap();
        assert!((tv_bound_approx(p, 1, 1.0).unwrap() - 1.2).abs() < 1e-15);
        assert!((tv_bound_approx(p, 10_000_000, 1.0).unwrap() - 0.2).abs() < 1e-6);
        assert!(ErgodicityParams::new(0.5, 0.25).is_err());
    }

    #[test]
    fn l2_examples() {
        let p = ErgodicityParams::new(0.5, 0.1).unwrap();
        assert!((l2_bound_approx(p, 1, 1.0, 1.0).unwrap() - 6.76).abs() < 1e-12);
        let e = BoundInputs::new(1, 0.5, 1.0).unwrap();
        assert!((l2_bound_exact(0.5, e).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(l2_bound_exact(0.5, BoundInputs::new(5, 0.5, 0.0).unwrap()).unwrap(), 0.0);
        let z = BoundInputs::new(7, 0.0, 1.0).unwrap();
        assert_eq!(l2_bound_exact(0.2, z).unwrap(), variance_factor(7, 0.2).unwrap());
        let limit = 4.0 * 0.01 / 0.25;
        let far = l2_bound_approx(p, 10_000_000, 1.0, 1.0).unwrap();
        assert!((far - limit).abs() / limit < 1e-4);
    }

    #[test]
    fn bias_and_mixing_time() {
        assert_eq!(stationary_bias_bound(ErgodicityParams::exact(0.3).unwrap()), 0.0);
        assert!((stationary_bias_bound(ErgodicityParams::new(0.5, 0.1).unwrap()) - 0.2).abs() < 1e-15);
        assert!((stationary_bias_bound(ErgodicityParams::new(0.1, 0.049).unwrap()) - 0.49).abs() < 1e-14);
        assert!((mixing_time_bound(0.1, 0.01).unwrap() - 43.7).abs() < 0.05);
        assert!((mixing_time_bound(1e-4, 1e-4).unwrap() - 92_099.0).abs() < 1.0);
        assert_eq!(mixing_time_bound(0.5, 0.5).unwrap(), 1.0);
        assert!(mixing_time_bound(0.0, 0.5).is_err());
        assert!(mixing_time_bound(1.0, 0.5).is_err());
    }
}
