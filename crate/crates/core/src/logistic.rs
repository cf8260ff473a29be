//! Pólya-Gamma Gibbs sampler for Bayesian logistic regression and its
//! random-subset approximation, with a KL/Pinsker audit of the β update.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::budget::Deadline;
use crate::diagnostics::Trace;
use crate::distributions::{pg_tail_mean, sample_polya_gamma_with_tail, standard_normal};
use crate::error::{ensure, Error, Result};
use crate::par::Exec;
use crate::rng::{fill_streams, SeededRng, STREAM_CHUNK};

/// Design matrix, binary response and κ = y − ½.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticData {
    x: DMatrix<f64>,
    y: Vec<u8>,
    xt_kappa: DVector<f64>,
}

impl LogisticData {
    pub fn new(x: DMatrix<f64>, y: Vec<u8>) -> Result<Self> {
        ensure!(x.nrows() == y.len(), Dimension, "{} rows but {} responses", x.nrows(), y.len());
        ensure!(x.nrows() >= 1 && x.ncols() >= 1, Dimension, "empty design");
        ensure!(y.iter().all(|&v| v <= 1), Data, "responses must be 0 or 1");
        ensure!(x.iter().all(|v| v.is_finite()), Data, "design has non-finite entries");
        let kappa = DVector::from_iterator(y.len(), y.iter().map(|&v| v as f64 - 0.5));
        let xt_kappa = x.tr_mul(&kappa);
        Ok(Self { x, y, xt_kappa })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    /// X'κ over all observations.
    pub fn xt_kappa(&self) -> &DVector<f64> {
        &self.xt_kappa
    }

    /// Synthetic data: standardized Gaussian design and logistic responses.
    pub fn synthetic(rng: &mut SeededRng, n: usize, beta: &[f64]) -> Result<Self> {
        let p = beta.len();
        ensure!(n >= 2 && p >= 1, Domain, "need n >= 2 and p >= 1");
        let mut x = DMatrix::from_fn(n, p, |_, _| standard_normal(rng));
        standardize_columns(&mut x)?;
        let b = DVector::from_column_slice(beta);
        let eta = &x * b;
        let y = eta
            .iter()
            .map(|&e| u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-e).exp())))
            .collect();
        Self::new(x, y)
    }
}

/// Center each column and scale it to unit variance.
pub fn standardize_columns(x: &mut DMatrix<f64>) -> Result<()> {
    let n = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let m = col.sum() / n;
        col.add_scalar_mut(-m);
        let sd = (col.norm_squared() / n).sqrt();
        ensure!(sd > 0.0, Data, "constant design column");
        col /= sd;
    }
    Ok(())
}

/// Gaussian prior N(b, B) stored as (b, B⁻¹).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    precision_mean: DVector<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        ensure!(
            cov.is_square() && cov.nrows() == mean.len(),
            Dimension,
            "prior covariance must be {0}x{0}",
            mean.len()
        );
        let precision = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("prior covariance is not positive definite".into()))?
            .inverse();
        let precision = (&precision + precision.transpose()) * 0.5;
        let precision_mean = &precision * &mean;
        Ok(Self {
            mean,
            precision,
            precision_mean,
        })
    }

    /// N(0, η I).
    pub fn isotropic(p: usize, variance: f64) -> Result<Self> {
        ensure!(variance > 0.0, Domain, "prior variance must be positive");
        Self::new(DVector::zeros(p), DMatrix::identity(p, p) * variance)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PGState {
    pub beta: DVector<f64>,
    /// Weights for the indices in `subset`, in the same order.
    pub omega: Vec<f64>,
    pub subset: Vec<usize>,
    /// Extreme eigenvalues of (1/|V|) X_V'Ω_V X_V from the last step.
    pub curvature_eigs: Option<(f64, f64)>,
}

impl PGState {
    pub fn at(beta: DVector<f64>) -> Self {
        Self {
            beta,
            omega: Vec::new(),
            subset: Vec::new(),
            curvature_eigs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConstants {
    pub c: f64,
    pub m: f64,
}

impl Default for AdaptiveConstants {
    fn default() -> Self {
        Self { c: 1.0, m: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubsetPolicy {
    Fixed(usize),
    /// Size from the curvature spectrum of the previous step; `initial` is
    /// used until one is available.
    Adaptive {
        epsilon: f64,
        constants: AdaptiveConstants,
        initial: usize,
    },
}

/// Σ_i ω_i x_i x_i' over `rows`, summed in fixed blocks so every execution
/// mode returns the same bits.
fn weighted_gram(x: &DMatrix<f64>, rows: &[usize], omega: &[f64], exec: Exec) -> DMatrix<f64> {
    let p = x.ncols();
    let blocks = rows.len().div_ceil(STREAM_CHUNK);
    let partial = exec.map_range(blocks, |b| {
        let mut g = DMatrix::<f64>::zeros(p, p);
        let end = ((b + 1) * STREAM_CHUNK).min(rows.len());
        for k in b * STREAM_CHUNK..end {
            let i = rows[k];
            let w = omega[k];
            for c in 0..p {
                let xc = w * x[(i, c)];
                for r in c..p {
                    g[(r, c)] += xc * x[(i, r)];
                }
            }
        }
        g
    });
    let mut g = DMatrix::<f64>::zeros(p, p);
    for part in partial {
        g += part;
    }
    g.fill_upper_triangle_with_lower_triangle();
    g
}

/// Precision (N/|V|) X_V'Ω_V X_V + B⁻¹ of the β full conditional.
fn conditional_precision(
    data: &LogisticData,
    prior: &GaussianPrior,
    rows: &[usize],
    omega: &[f64],
    exec: Exec,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let gram = weighted_gram(&data.x, rows, omega, exec);
    let scale = data.n() as f64 / rows.len() as f64;
    (&gram * scale + &prior.precision, gram)
}

fn factor(precision: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    precision.clone().cholesky().ok_or_else(|| {
        Error::Numerical(format!("conditional precision is not positive definite: {precision:.6}"))
    })
}

/// Mean S(X'κ + B⁻¹b) and covariance S of the β full conditional.
pub fn conditional_moments(
    data: &LogisticData,
    prior: &GaussianPrior,
    rows: &[usize],
    omega: &[f64],
    exec: Exec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (prec, _) = conditional_precision(data, prior, rows, omega, exec);
    let ch = factor(&prec)?;
    let mean = ch.solve(&(data.xt_kappa.clone() + &prior.precision_mean));
    Ok((mean, ch.inverse()))
}

fn draw_omegas(rng: &mut SeededRng, data: &LogisticData, beta: &DVector<f64>, rows: &[usize], exec: Exec) -> Vec<f64> {
    let mut omega = vec![0.0; rows.len()];
    fill_streams(exec, rng, &mut omega, |r, k| {
        let i = rows[k];
        let c = data.x.row(i).dot(&beta.transpose());
        sample_polya_gamma_with_tail(r, c, pg_tail_mean(c))
    });
    omega
}

fn extreme_eigs(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let sym = (m + m.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    ensure!(lo > 0.0, Numerical, "curvature matrix has eigenvalue {lo:e}");
    Ok((lo, hi))
}

/// ω on `rows`, then β from its Gaussian full conditional.
fn step_on_rows(
    rng: &mut SeededRng,
    state: &PGState,
    data: &LogisticData,
    prior: &GaussianPrior,
    rows: Vec<usize>,
    exec: Exec,
) -> Result<PGState> {
    let omega = draw_omegas(rng, data, &state.beta, &rows, exec);
    let (prec, gram) = conditional_precision(data, prior, &rows, &omega, exec);
    let ch = factor(&prec)?;
    let mean = ch.solve(&(data.xt_kappa.clone() + &prior.precision_mean));
    let z = DVector::from_fn(data.p(), |_, _| standard_normal(rng));
    let noise = ch
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let curvature = gram / rows.len() as f64;
    Ok(PGState {
        beta: mean + noise,
        omega,
        subset: rows,
        curvature_eigs: extreme_eigs(&curvature).ok(),
    })
}

pub fn gibbs_step_exact(
    rng: &mut SeededRng,
    state: &PGState,
    data: &LogisticData,
    prior: &GaussianPrior,
    exec: Exec,
) -> Result<PGState> {
    step_on_rows(rng, state, data, prior, (0..data.n()).collect(), exec)
}

/// Subset size the policy asks for at `state`.
pub fn policy_size(policy: &SubsetPolicy, state: &PGState, data: &LogisticData) -> Result<usize> {
    match *policy {
        SubsetPolicy::Fixed(m) => Ok(m),
        SubsetPolicy::Adaptive {
            epsilon,
            constants,
            initial,
        } => match state.curvature_eigs {
            Some((lo, hi)) => adaptive_subset_size(lo, hi, data.p(), data.n(), epsilon, constants),
            None => Ok(initial),
        },
    }
}

/// Draw V uniformly without replacement, ω on V, then β with the rescaled
/// subset curvature. The full subset V = {0..N} consumes no randomness.
pub fn gibbs_step_subset(
    rng: &mut SeededRng,
    state: &PGState,
    data: &LogisticData,
    prior: &GaussianPrior,
    policy: &SubsetPolicy,
    exec: Exec,
) -> Result<PGState> {
    let n = data.n();
    let m = policy_size(policy, state, data)?;
    ensure!(m > data.p() && m <= n, Domain, "subset size {m} must lie in [p+1, N] = [{}, {n}]", data.p() + 1);
    let rows = if m == n {
        (0..n).collect()
    } else {
        let mut v = sample_indices(rng, n, m).into_vec();
        v.sort_unstable();
        v
    };
    step_on_rows(rng, state, data, prior, rows, exec)
}

/// KL(N(m1, S1) ‖ N(m2, S2)).
pub fn gaussian_kl(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let p = m1.len();
    ensure!(
        m2.len() == p && s1.shape() == (p, p) && s2.shape() == (p, p),
        Dimension,
        "Gaussian dimensions disagree"
    );
    if m1 == m2 && s1 == s2 {
        return Ok(0.0);
    }
    let c1 = s1.clone().cholesky().ok_or_else(|| Error::Numerical("S1 is not positive definite".into()))?;
    let c2 = s2.clone().cholesky().ok_or_else(|| Error::Numerical("S2 is not positive definite".into()))?;
    let trace = c2.solve(s1).trace();
    let d = m2 - m1;
    let quad = d.dot(&c2.solve(&d));
    let logdet = |c: &Cholesky<f64, Dyn>| 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((0.5 * (trace + quad - p as f64 + logdet(&c2) - logdet(&c1))).max(0.0))
}

/// TV bound sqrt(KL/2), capped at 1.
pub fn pinsker_tv(kl: f64) -> f64 {
    (kl / 2.0).sqrt().min(1.0)
}

/// Subset size from the curvature spectrum and a target kernel error.
pub fn adaptive_subset_size(
    lambda_min: f64,
    lambda_max: f64,
    p: usize,
    n: usize,
    epsilon: f64,
    constants: AdaptiveConstants,
) -> Result<usize> {
    ensure!(lambda_min > 0.0 && lambda_max >= lambda_min, Numerical, "degenerate spectrum ({lambda_min}, {lambda_max})");
    ensure!(epsilon > 0.0, Domain, "epsilon must be positive");
    ensure!(constants.c > 0.0 && constants.m > 0.0, Domain, "constants must be positive");
    let pf = p as f64;
    let half = lambda_min / 2.0;
    let d1 = 2.0 * 2f64.sqrt() * epsilon / pf.sqrt() * half * half / (lambda_max + half).powf(1.5);
    let d2 = epsilon * epsilon * half / (pf * (lambda_max + half));
    let d3 = epsilon / pf.sqrt() * lambda_min / (lambda_min + lambda_max);
    let delta = d1.min(d2).min(d3);
    let m = constants.m;
    let ln = (2.0 * m * m / (delta * delta)).ln();
    let size = pf * constants.c * m.powi(4) / (delta * delta) * ln * ln;
    let lo = (p + 1) as f64;
    Ok(size.ceil().clamp(lo, n.max(p + 1) as f64) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticRunConfig {
    pub burn_in: usize,
    pub samples: usize,
    /// Audit every this many steps; `None` disables the audit.
    pub audit_every: Option<usize>,
    /// Stop early once this many wall seconds have passed.
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LogisticRun {
    /// Retained β draws.
    pub trace: Trace,
    /// Pinsker TV bound at each audited step.
    pub epsilon_trace: Vec<f64>,
    pub subset_sizes: Vec<usize>,
}

/// Compare the β full conditional built from the subset curvature with the
/// one built from all N observations, using one fresh full ω draw.
fn audit(
    rng: &mut SeededRng,
    beta: &DVector<f64>,
    subset: &[usize],
    data: &LogisticData,
    prior: &GaussianPrior,
    exec: Exec,
) -> Result<f64> {
    let all: Vec<usize> = (0..data.n()).collect();
    let omega = draw_omegas(rng, data, beta, &all, exec);
    let sub_omega: Vec<f64> = subset.iter().map(|&i| omega[i]).collect();
    let (m_v, s_v) = conditional_moments(data, prior, subset, &sub_omega, exec)?;
    let (m_n, s_n) = conditional_moments(data, prior, &all, &omega, exec)?;
    Ok(pinsker_tv(gaussian_kl(&m_v, &s_v, &m_n, &s_n)?))
}

/// Audit generators use this stream so that auditing never changes the chain.
pub const AUDIT_STREAM: u64 = 0xA0D1;

pub fn run_chain(
    rng: &mut SeededRng,
    data: &LogisticData,
    prior: &GaussianPrior,
    policy: &SubsetPolicy,
    cfg: &LogisticRunConfig,
    exec: Exec,
) -> Result<LogisticRun> {
    ensure!(cfg.samples >= 2, Domain, "need at least 2 retained samples");
    let mut audit_rng = SeededRng::new(rng.seed(), rng.stream() ^ AUDIT_STREAM);
    let mut state = PGState::at(DVector::zeros(data.p()));
    let mut rows = Vec::with_capacity(cfg.samples * data.p());
    let mut secs = Vec::with_capacity(cfg.samples);
    let mut eps = Vec::new();
    let mut sizes = Vec::with_capacity(cfg.burn_in + cfg.samples);
    let deadline = Deadline::new(cfg.max_seconds);
    for it in 0..cfg.burn_in + cfg.samples {
        if secs.len() >= 2 && deadline.expired() {
            break;
        }
        let start = std::time::Instant::now();
        let prev_beta = state.beta.clone();
        state = gibbs_step_subset(rng, &state, data, prior, policy, exec)?;
        let elapsed = start.elapsed().as_secs_f64();
        sizes.push(state.subset.len());
        if let Some(every) = cfg.audit_every {
            if every > 0 && it % every == 0 {
                eps.push(audit(&mut audit_rng, &prev_beta, &state.subset, data, prior, exec)?);
            }
        }
        if it >= cfg.burn_in {
            rows.extend(state.beta.iter().copied());
            secs.push(elapsed);
        }
    }
    let names = (0..data.p()).map(|j| format!("beta{j}")).collect();
    let trace = Trace::new(names, rows, rng.seed())?.with_step_seconds(secs)?;
    Ok(LogisticRun {
        trace,
        epsilon_trace: eps,
        subset_sizes: sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gauss_legendre, integrate, normal_pdf};

    fn small_data(seed: u64) -> LogisticData {
        let mut r = SeededRng::new(seed, 0);
        LogisticData::synthetic(&mut r, 300, &[1.0, -0.5, 0.25]).unwrap()
    }

    #[test]
    fn data_validation() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(LogisticData::new(x.clone(), vec![0, 2]).is_err());
        assert!(LogisticData::new(x, vec![0]).is_err());
        let d = small_data(1);
        let col = d.x().column(1);
        assert!(col.sum().abs() < 1e-10);
        assert!((col.norm_squared() / 300.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_subset_matches_exact_bitwise() {
        let d = small_data(2);
        let prior = GaussianPrior::isotropic(3, 100.0).unwrap();
        let mut a = SeededRng::new(5, 0);
        let mut b = SeededRng::new(5, 0);
        let mut sa = PGState::at(DVector::zeros(3));
        let mut sb = sa.clone();
        for _ in 0..20 {
            sa = gibbs_step_exact(&mut a, &sa, &d, &prior, Exec::Parallel).unwrap();
            sb = gibbs_step_subset(&mut b, &sb, &d, &prior, &SubsetPolicy::Fixed(300), Exec::Sequential).unwrap();
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn subset_size_precondition() {
        let d = small_data(3);
        let prior = GaussianPrior::isotropic(3, 1.0).unwrap();
        let mut r = SeededRng::new(1, 0);
        let s = PGState::at(DVector::zeros(3));
        assert!(gibbs_step_subset(&mut r, &s, &d, &prior, &SubsetPolicy::Fixed(3), Exec::Sequential).is_err());
        let out = gibbs_step_subset(&mut r, &s, &d, &prior, &SubsetPolicy::Fixed(4), Exec::Sequential).unwrap();
        assert_eq!(out.subset.len(), 4);
        assert!(out.subset.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tiny_prior_variance_pins_beta() {
        let d = small_data(4);
        let prior = GaussianPrior::isotropic(3, 1e-12).unwrap();
        let mut r = SeededRng::new(2, 0);
        let s = gibbs_step_exact(&mut r, &PGState::at(DVector::zeros(3)), &d, &prior, Exec::Sequential).unwrap();
        assert!(s.beta.amax() < 1e-4);
    }

    #[test]
    fn single_observation_weight_mean() {
        let x = DMatrix::from_row_slice(1, 1, &[1.7]);
        let d = LogisticData::new(x, vec![1]).unwrap();
        let mut r = SeededRng::new(6, 0);
        let beta = DVector::zeros(1);
        let reps = 100_000;
        let m: f64 = (0..reps)
            .map(|_| {
                let w = draw_omegas(&mut r, &d, &beta, &[0], Exec::Sequential)[0];
                1.7 * 1.7 * w
            })
            .sum::<f64>()
            / reps as f64;
        assert!((m / (1.7 * 1.7 / 4.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn kl_examples() {
        let m = DVector::from_vec(vec![0.3]);
        let s = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(gaussian_kl(&m, &s, &m, &s).unwrap(), 0.0);
        assert_eq!(pinsker_tv(0.0), 0.0);
        let m2 = DVector::from_vec(vec![1.3]);
        assert!((gaussian_kl(&m, &s, &m2, &s).unwrap() - 1.0 / 4.0).abs() < 1e-14);
        let s1 = DMatrix::from_element(1, 1, 1.0);
        let s2 = DMatrix::from_element(1, 1, 2.0);
        let kl = gaussian_kl(&m, &s1, &m, &s2).unwrap();
        assert!((kl - 0.5 * (0.5 - 1.0 + 2f64.ln())).abs() < 1e-14);
        // Numerical integration of p log(p/q).
        let rule = gauss_legendre(20);
        let oracle = integrate(
            |x| {
                let p = normal_pdf(x);
                let q = normal_pdf(x / 2f64.sqrt()) / 2f64.sqrt();
                p * (p / q).ln()
            },
            -12.0,
            12.0,
            48,
            &rule,
        );
        assert!((kl - oracle).abs() < 1e-10);
        assert!(pinsker_tv(100.0) == 1.0);
    }

    #[test]
    fn adaptive_size_monotone_and_clamped() {
        let c = AdaptiveConstants::default();
        let a = adaptive_subset_size(1.0, 2.0, 5, usize::MAX / 4, 0.1, c).unwrap();
        let b = adaptive_subset_size(1.0, 2.0, 5, usize::MAX / 4, 0.05, c).unwrap();
        assert!(b > a);
        let well = adaptive_subset_size(1.0, 1.0, 5, usize::MAX / 4, 0.1, c).unwrap();
        let ill = adaptive_subset_size(1.0, 100.0, 5, usize::MAX / 4, 0.1, c).unwrap();
        assert!(well < ill);
        assert_eq!(adaptive_subset_size(1.0, 2.0, 5, 2000, 0.1, c).unwrap(), 2000);
        assert!(adaptive_subset_size(0.0, 2.0, 5, 2000, 0.1, c).is_err());
    }

    #[test]
    fn audit_zero_for_full_subset() {
        let d = small_data(7);
        let prior = GaussianPrior::isotropic(3, 10.0).unwrap();
        let mut r = SeededRng::new(8, 0);
        let cfg = LogisticRunConfig {
            burn_in: 5,
            samples: 20,
            audit_every: Some(5),
            max_seconds: None,
        };
        let run = run_chain(&mut r, &d, &prior, &SubsetPolicy::Fixed(300), &cfg, Exec::Sequential).unwrap();
        assert_eq!(run.epsilon_trace.len(), 5);
        assert!(run.epsilon_trace.iter().all(|&e| e == 0.0));
        let mut r = SeededRng::new(8, 0);
        let sub = run_chain(&mut r, &d, &prior, &SubsetPolicy::Fixed(30), &cfg, Exec::Sequential).unwrap();
        assert!(sub.epsilon_trace.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn audit_does_not_change_chain() {
        let d = small_data(9);
        let prior = GaussianPrior::isotropic(3, 10.0).unwrap();
        let with = LogisticRunConfig {
            burn_in: 2,
            samples: 10,
            audit_every: Some(1),
            max_seconds: None,
        };
        let without = LogisticRunConfig { audit_every: None, ..with };
        let mut a = SeededRng::new(3, 0);
        let mut b = SeededRng::new(3, 0);
        let ra = run_chain(&mut a, &d, &prior, &SubsetPolicy::Fixed(50), &with, Exec::Sequential).unwrap();
        let rb = run_chain(&mut b, &d, &prior, &SubsetPolicy::Fixed(50), &without, Exec::Sequential).unwrap();
        assert_eq!(ra.trace.rows(), rb.trace.rows());
    }
}
