//! Gaussian-process regression with a squared-exponential kernel, sampled by
//! a marginal Metropolis/griddy-Gibbs chain on top of randomized low-rank
//! eigendecompositions of the correlation matrix.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::budget::Deadline;
use crate::diagnostics::Trace;
use crate::distributions::{sample_discrete_log, standard_normal};
use crate::error::{ensure, Error, Result};
use crate::par::Exec;
use crate::rng::SeededRng;

pub const BLOCK_SIZE: usize = 8;
pub const OVERSAMPLING: usize = 10;
pub const ERROR_PROBES: usize = 10;
pub const DEFAULT_D_PROB: u32 = 3;

/// Σ_ij = exp(−φ‖x_i − x_j‖²) for the rows of `x`.
pub fn se_covariance(x: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let mut s = DMatrix::from_element(n, n, 1.0);
    for j in 0..n {
        for i in j + 1..n {
            let v = (-phi * sq_dist(x, i, x, j)).exp();
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Cross-correlation between the rows of `a` and the rows of `b`.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| (-phi * sq_dist(a, i, b, j)).exp())
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

pub fn max_sq_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut m = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            m = m.max(sq_dist(x, i, x, j));
        }
    }
    m
}

/// `d` evenly spaced decay values whose correlation at the largest pairwise
/// distance runs from 0.99 down to 0.01.
pub fn phi_grid(x: &DMatrix<f64>, d: usize) -> Result<Vec<f64>> {
    ensure!(d >= 1, Domain, "grid needs at least one point");
    let dmax = max_sq_distance(x);
    ensure!(dmax > 0.0, Data, "inputs are all identical");
    let lo = -(0.99f64).ln() / dmax;
    let hi = -(0.01f64).ln() / dmax;
    if d == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..d).map(|k| lo + (hi - lo) * k as f64 / (d - 1) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    /// Evenly spaced on [0.001, 1].
    Grid,
    Uniform,
    Gamma,
    /// Standard normal in `dim` dimensions.
    Normal(usize),
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Self::Grid),
            "uniform" => Ok(Self::Uniform),
            "gamma" => Ok(Self::Gamma),
            "normal" => Ok(Self::Normal(5)),
            _ => s
                .strip_prefix("normal")
                .and_then(|d| d.parse().ok())
                .filter(|&d| d >= 1)
                .map(Self::Normal)
                .ok_or_else(|| Error::Config(format!("unknown design {s:?}"))),
        }
    }
}

pub fn design_points(rng: &mut SeededRng, design: Design, n: usize) -> DMatrix<f64> {
    match design {
        Design::Grid => DMatrix::from_fn(n, 1, |i, _| {
            if n == 1 {
                0.001
            } else {
                0.001 + 0.999 * i as f64 / (n - 1) as f64
            }
        }),
        Design::Uniform => DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>()),
        Design::Gamma => DMatrix::from_fn(n, 1, |_, _| -(1.0 - rng.random::<f64>()).ln()),
        Design::Normal(q) => DMatrix::from_fn(n, q, |_, _| standard_normal(rng)),
    }
}

/// Σ ≈ U Λ U' with orthonormal U and descending nonnegative Λ.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    u: DMatrix<f64>,
    lambda: Vec<f64>,
    delta: f64,
    d_prob: u32,
    /// Probe estimate of ‖Σ − UΛU'‖_F, inflated to the requested confidence.
    estimate: f64,
    residual: Option<f64>,
    full_rank: bool,
}

impl LowRankFactor {
    /// Factor from known eigenpairs; columns are reordered by descending value.
    pub fn from_eigenpairs(u: DMatrix<f64>, lambda: Vec<f64>) -> Result<Self> {
        ensure!(u.ncols() == lambda.len(), Dimension, "{} columns but {} eigenvalues", u.ncols(), lambda.len());
        let (u, lambda) = sort_desc(u, lambda);
        let full_rank = u.ncols() == u.nrows();
        Ok(Self {
            u,
            lambda,
            delta: 0.0,
            d_prob: 0,
            estimate: 0.0,
            residual: None,
            full_rank,
        })
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn d_prob(&self) -> u32 {
        self.d_prob
    }

    pub fn estimate(&self) -> f64 {
        self.estimate
    }

    /// Measured ‖Σ − UΛU'‖_F, when it was computed.
    pub fn residual(&self) -> Option<f64> {
        self.residual
    }

    /// True when the range finder exhausted all n directions.
    pub fn full_rank(&self) -> bool {
        self.full_rank
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.first().copied().unwrap_or(0.0)
    }

    /// Leading `r` eigenpairs.
    pub fn truncate(&self, r: usize) -> Self {
        let r = r.min(self.rank());
        Self {
            u: self.u.columns(0, r).into_owned(),
            lambda: self.lambda[..r].to_vec(),
            residual: None,
            full_rank: r == self.n(),
            ..self.clone()
        }
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.n(), self.rank(), |i, j| self.u[(i, j)] * self.lambda[j]);
        scaled * self.u.transpose()
    }

    /// ‖Σ − UΛU'‖_F computed densely.
    pub fn measure_residual(&mut self, sigma: &DMatrix<f64>) -> f64 {
        let r = (sigma - self.reconstruct()).norm();
        self.residual = Some(r);
        r
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.u.tr_mul(&self.u) - DMatrix::identity(self.rank(), self.rank())).amax()
    }
}

fn sort_desc(u: DMatrix<f64>, lambda: Vec<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..lambda.len()).collect();
    idx.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]));
    let su = DMatrix::from_fn(u.nrows(), idx.len(), |i, j| u[(i, idx[j])]);
    let sl = idx.iter().map(|&k| lambda[k].max(0.0)).collect();
    (su, sl)
}

/// Full eigendecomposition with eigenvalues in descending order.
pub fn full_eigen(sigma: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let sym = (sigma + sigma.transpose()) * 0.5;
    let e = sym.symmetric_eigen();
    let mut idx: Vec<usize> = (0..e.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let u = DMatrix::from_fn(sigma.nrows(), idx.len(), |i, j| e.eigenvectors[(i, idx[j])]);
    (u, idx.iter().map(|&k| e.eigenvalues[k]).collect())
}

/// Multiplier turning the root-mean-square probe norm into a Frobenius bound
/// that holds with probability 1 − 10^{−d}.
pub fn probe_safety_factor(probes: usize, d_prob: u32) -> Result<f64> {
    let chi = ChiSquared::new(probes as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let q = chi.inverse_cdf(10f64.powi(-(d_prob as i32)));
    Ok((probes as f64 / q).sqrt())
}

fn gaussian_matrix(rng: &mut SeededRng, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| standard_normal(rng))
}

/// Orthogonalize `v` against `basis` twice and normalize; `None` when nothing
/// above `tol` survives.
fn orthonormalize(basis: &[DVector<f64>], mut v: DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
    }
    let norm = v.norm();
    (norm > tol).then(|| v / norm)
}

/// Adaptive randomized range finder followed by a Nyström eigendecomposition.
/// The basis grows in blocks until a probe-based estimate certifies
/// ‖(I − QQ')Σ‖_F ≤ δ with confidence 1 − 10^{−d_prob}; a final oversampling
/// block is added before the Nyström step, whose output is then cut back to
/// the smallest rank still certified at δ.
pub fn randomized_partial_eig(rng: &mut SeededRng, sigma: &DMatrix<f64>, delta: f64, d_prob: u32) -> Result<LowRankFactor> {
    let n = sigma.nrows();
    ensure!(sigma.is_square() && n >= 1, Dimension, "matrix must be square and nonempty");
    ensure!(delta > 0.0, Domain, "delta must be positive");
    ensure!(d_prob >= 1, Domain, "d_prob must be at least 1");
    let scale = sigma.norm();
    ensure!(
        (sigma - sigma.transpose()).amax() <= 1e-10 * scale.max(1.0),
        Domain,
        "matrix is not symmetric"
    );
    let c = probe_safety_factor(ERROR_PROBES, d_prob)?;
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut probes = sigma * gaussian_matrix(rng, n, ERROR_PROBES);
    let mut q: Vec<DVector<f64>> = Vec::new();
    let estimate_of = |p: &DMatrix<f64>| c * (p.norm_squared() / ERROR_PROBES as f64).sqrt();
    let mut estimate = estimate_of(&probes);
    let grow = |q: &mut Vec<DVector<f64>>, rng: &mut SeededRng, k: usize, probes: &mut DMatrix<f64>| {
        let y = sigma * gaussian_matrix(rng, n, k);
        let mut added = 0;
        for col in y.column_iter() {
            if q.len() == n {
                break;
            }
            if let Some(v) = orthonormalize(q, col.into_owned(), tol) {
                let coef = v.transpose() * &*probes;
                *probes -= &v * coef;
                q.push(v);
                added += 1;
            }
        }
        added
    };
    while estimate > delta && q.len() < n {
        let k = BLOCK_SIZE.min(n - q.len());
        if grow(&mut q, rng, k, &mut probes) == 0 {
            break;
        }
        estimate = estimate_of(&probes);
    }
    if q.len() < n {
        let k = OVERSAMPLING.min(n - q.len());
        grow(&mut q, rng, k, &mut probes);
    }
    let full_rank = q.len() == n;
    if q.is_empty() {
        return Ok(LowRankFactor {
            u: DMatrix::zeros(n, 0),
            lambda: Vec::new(),
            delta,
            d_prob,
            estimate,
            residual: None,
            full_rank: false,
        });
    }
    let qm = DMatrix::from_columns(&q);
    let (u, lambda) = nystrom(sigma, &qm)?;
    let (keep, estimate) = certified_rank(rng, sigma, &u, &lambda, delta, c);
    Ok(LowRankFactor {
        u: u.columns(0, keep).into_owned(),
        lambda: lambda[..keep].to_vec(),
        delta,
        d_prob,
        estimate,
        residual: None,
        full_rank: full_rank && keep == n,
    })
}

/// Smallest leading rank whose residual ‖Σ − U_kΛ_kU_k'‖_F is certified
/// below δ by fresh probes, with the estimate at that rank. Falls back to
/// the full factor when no rank certifies.
fn certified_rank(
    rng: &mut SeededRng,
    sigma: &DMatrix<f64>,
    u: &DMatrix<f64>,
    lambda: &[f64],
    delta: f64,
    c: f64,
) -> (usize, f64) {
    let omega = gaussian_matrix(rng, sigma.nrows(), ERROR_PROBES);
    let mut resid = sigma * &omega;
    let coef = u.tr_mul(&omega);
    let est = |r: &DMatrix<f64>| c * (r.norm_squared() / ERROR_PROBES as f64).sqrt();
    let mut best = (lambda.len(), f64::INFINITY);
    let mut found = false;
    for k in 0..=lambda.len() {
        let e = est(&resid);
        if e <= delta && !found {
            best = (k, e);
            found = true;
        }
        if k == lambda.len() {
            if !found {
                best = (k, e);
            }
            break;
        }
        let row = coef.row(k) * lambda[k];
        resid -= u.column(k) * row;
    }
    best
}

/// Σ ≈ (ΣQ)(Q'ΣQ)^+(ΣQ)' via an eigendecomposition of the core and a thin SVD.
fn nystrom(sigma: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let aq = sigma * q;
    let core = q.tr_mul(&aq);
    let core = (&core + core.transpose()) * 0.5;
    let k = core.nrows();
    let e = core.symmetric_eigen();
    let top = e.eigenvalues.max();
    ensure!(top > 0.0, Numerical, "projected matrix has no positive eigenvalue");
    let keep: Vec<usize> = (0..e.eigenvalues.len())
        .filter(|&i| e.eigenvalues[i] > top * 1e-14)
        .collect();
    let w = DMatrix::from_fn(k, keep.len(), |i, j| {
        e.eigenvectors[(i, keep[j])] / e.eigenvalues[keep[j]].sqrt()
    });
    let f = aq * w;
    let svd = f.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let lambda: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    Ok(sort_desc(u, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigAccuracy {
    /// Euclidean error of the leading eigenvalues.
    pub r: f64,
    /// ‖I − U_ε'U*‖_F / √n after sign alignment.
    pub f: f64,
    /// Correlation between y = U*β and its projection on span(U_ε).
    pub c: f64,
}

/// Compare a factor with the leading eigenpairs of a full decomposition.
pub fn eig_accuracy_metrics(
    rng: &mut SeededRng,
    full: &(DMatrix<f64>, Vec<f64>),
    factor: &LowRankFactor,
) -> Result<EigAccuracy> {
    let (ufull, lfull) = full;
    let n = ufull.nrows();
    let m = factor.rank();
    ensure!(m >= 1 && m <= lfull.len(), Dimension, "factor rank {m} outside 1..={}", lfull.len());
    ensure!(factor.n() == n, Dimension, "factor has {} rows, expected {n}", factor.n());
    let ustar = ufull.columns(0, m);
    let r = (0..m)
        .map(|i| (lfull[i] - factor.lambda[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut ue = factor.u.clone();
    for j in 0..m {
        if ue.column(j).dot(&ustar.column(j)) < 0.0 {
            ue.column_mut(j).neg_mut();
        }
    }
    let f = (DMatrix::identity(m, m) - ue.tr_mul(&ustar)).norm() / (n as f64).sqrt();
    let beta = DVector::from_fn(m, |_, _| standard_normal(rng));
    let y = ustar * beta;
    let gram = ue.tr_mul(&ue);
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("factor columns are dependent".into()))?
        .solve(&ue.tr_mul(&y));
    let proj = &ue * coef;
    Ok(EigAccuracy { r, f, c: correlation(y.as_slice(), proj.as_slice()) })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Projections of y on a factor, reused by every likelihood evaluation.
#[derive(Debug, Clone)]
pub struct FactorCache {
    factor: LowRankFactor,
    y_proj: DVector<f64>,
    resid: DVector<f64>,
    resid_norm2: f64,
}

impl FactorCache {
    pub fn new(factor: LowRankFactor, y: &DVector<f64>) -> Result<Self> {
        ensure!(factor.n() == y.len(), Dimension, "factor has {} rows but y has {}", factor.n(), y.len());
        let y_proj = factor.u.tr_mul(y);
        let resid = y - &factor.u * &y_proj;
        let resid_norm2 = resid.norm_squared();
        Ok(Self {
            factor,
            y_proj,
            resid,
            resid_norm2,
        })
    }

    pub fn factor(&self) -> &LowRankFactor {
        &self.factor
    }

    /// log N(y; 0, τ²Σ_ε + σ²I) in O(r).
    pub fn loglik(&self, sigma2: f64, tau2: f64) -> Result<f64> {
        ensure!(sigma2 > 0.0, Domain, "sigma2 must be positive, got {sigma2}");
        ensure!(tau2 >= 0.0, Domain, "tau2 must be nonnegative, got {tau2}");
        let n = self.factor.n() as f64;
        let r = self.factor.rank() as f64;
        let mut logdet = (n - r) * sigma2.ln();
        let mut quad = self.resid_norm2 / sigma2;
        for (l, yu) in self.factor.lambda.iter().zip(self.y_proj.iter()) {
            let e = tau2 * l + sigma2;
            logdet += e.ln();
            quad += yu * yu / e;
        }
        Ok(-0.5 * (n * (2.0 * PI).ln() + logdet + quad))
    }

    /// Ψ_ε y with Ψ_ε = (τ²Σ_ε + σ²I)^{-1}.
    pub fn psi_y(&self, sigma2: f64, tau2: f64) -> DVector<f64> {
        let w = DVector::from_fn(self.factor.rank(), |i, _| {
            self.y_proj[i] / (tau2 * self.factor.lambda[i] + sigma2)
        });
        &self.factor.u * w + &self.resid / sigma2
    }
}

/// Marginal log-likelihood of y under τ²Σ_ε + σ²I.
pub fn marginal_loglik(y: &DVector<f64>, factor: &LowRankFactor, sigma2: f64, tau2: f64) -> Result<f64> {
    FactorCache::new(factor.clone(), y)?.loglik(sigma2, tau2)
}

/// Draw f from N(Ψ_ε y, Ψ_ε).
pub fn predictive_f_draw<R: Rng + ?Sized>(
    rng: &mut R,
    cache: &FactorCache,
    sigma2: f64,
    tau2: f64,
) -> Result<DVector<f64>> {
    ensure!(sigma2 > 0.0 && tau2 >= 0.0, Domain, "variances must be positive");
    let f = &cache.factor;
    let z = DVector::from_fn(f.n(), |_, _| standard_normal(rng));
    let zu = f.u.tr_mul(&z);
    let z_perp = &z - &f.u * &zu;
    let scaled = DVector::from_fn(f.rank(), |i, _| zu[i] / (tau2 * f.lambda[i] + sigma2).sqrt());
    Ok(cache.psi_y(sigma2, tau2) + &f.u * scaled + z_perp / sigma2.sqrt())
}

/// Kriging mean τ² K* Ψ_ε y at new inputs.
pub fn predict_mean(kstar: &DMatrix<f64>, cache: &FactorCache, sigma2: f64, tau2: f64) -> DVector<f64> {
    kstar * cache.psi_y(sigma2, tau2) * tau2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaBranch {
    /// Second branch ε²σ²/τ².
    Remark,
    /// Second branch ε²σ²/(nτ²).
    #[default]
    Appendix,
}

impl std::str::FromStr for DeltaBranch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remark" => Ok(Self::Remark),
            "appendix" => Ok(Self::Appendix),
            _ => Err(Error::Config(format!("unknown delta branch {s:?}"))),
        }
    }
}

/// Frobenius accuracy target that keeps the predictive law within ε in TV.
pub fn delta_for_epsilon(sigma2: f64, tau2: f64, lambda_max: f64, epsilon: f64, n: usize, branch: DeltaBranch) -> Result<f64> {
    ensure!(sigma2 > 0.0 && tau2 > 0.0, Domain, "variances must be positive");
    ensure!(epsilon > 0.0 && n >= 1 && lambda_max >= 0.0, Domain, "invalid epsilon, n or lambda_max");
    let nf = n as f64;
    let e2 = epsilon * epsilon;
    let first = e2 * sigma2 * sigma2 / (tau2 * (nf * (tau2 * lambda_max + sigma2)).sqrt());
    let second = match branch {
        DeltaBranch::Remark => e2 * sigma2 / tau2,
        DeltaBranch::Appendix => e2 * sigma2 / (nf * tau2),
    };
    Ok(first.min(second))
}

/// Gamma(a, b) priors on the precisions 1/τ² and 1/σ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GPPriors {
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl Default for GPPriors {
    fn default() -> Self {
        Self {
            a_tau: 1.0,
            b_tau: 1.0,
            a_sigma: 1.0,
            b_sigma: 1.0,
        }
    }
}

impl GPPriors {
    /// Log density of (log σ², log τ²), Jacobian included.
    pub fn log_density(&self, log_sigma2: f64, log_tau2: f64) -> f64 {
        -self.a_sigma * log_sigma2 - self.b_sigma * (-log_sigma2).exp() - self.a_tau * log_tau2
            - self.b_tau * (-log_tau2).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GPModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    phi_grid: Vec<f64>,
    priors: GPPriors,
}

impl GPModel {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, phi_grid: Vec<f64>, priors: GPPriors) -> Result<Self> {
        ensure!(x.nrows() >= 2, Size, "need at least two observations");
        ensure!(x.nrows() == y.len(), Dimension, "{} inputs but {} responses", x.nrows(), y.len());
        ensure!(!phi_grid.is_empty(), Domain, "empty phi grid");
        ensure!(
            phi_grid[0] > 0.0 && phi_grid.windows(2).all(|w| w[0] < w[1]),
            Domain,
            "phi grid must be positive and strictly increasing"
        );
        ensure!(
            [priors.a_tau, priors.b_tau, priors.a_sigma, priors.b_sigma].iter().all(|v| *v > 0.0),
            Domain,
            "prior parameters must be positive"
        );
        ensure!(y.iter().chain(x.iter()).all(|v| v.is_finite()), Data, "non-finite data");
        Ok(Self { x, y, phi_grid, priors })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn phi_grid(&self) -> &[f64] {
        &self.phi_grid
    }

    pub fn priors(&self) -> &GPPriors {
        &self.priors
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GPState {
    pub sigma2: f64,
    pub tau2: f64,
    pub phi_index: usize,
}

/// A model with one cached factor per grid value of φ.
#[derive(Debug, Clone)]
pub struct GPSampler {
    model: GPModel,
    caches: Vec<FactorCache>,
}

impl GPSampler {
    /// Factorize Σ(φ_l) for every grid point at accuracy `delta`.
    pub fn new(rng: &mut SeededRng, model: GPModel, delta: f64, d_prob: u32, exec: Exec) -> Result<Self> {
        let key = rng.fork_key();
        let factors = exec.map_range(model.phi_grid.len(), |l| {
            let mut r = SeededRng::derived(key, l as u64);
            let sigma = se_covariance(&model.x, model.phi_grid[l]);
            let mut f = randomized_partial_eig(&mut r, &sigma, delta, d_prob)?;
            f.measure_residual(&sigma);
            Ok(f)
        });
        let caches = factors
            .into_iter()
            .map(|f| f.and_then(|f| FactorCache::new(f, &model.y)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, caches })
    }

    pub fn from_factors(model: GPModel, factors: Vec<LowRankFactor>) -> Result<Self> {
        ensure!(factors.len() == model.phi_grid.len(), Dimension, "one factor per grid point is required");
        let caches = factors
            .into_iter()
            .map(|f| FactorCache::new(f, &model.y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, caches })
    }

    pub fn model(&self) -> &GPModel {
        &self.model
    }

    pub fn cache(&self, l: usize) -> &FactorCache {
        &self.caches[l]
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.caches.iter().map(|c| c.factor.rank()).collect()
    }

    /// Joint random-walk update of (log σ², log τ²), then a griddy-Gibbs draw of φ.
    /// Returns the new state and whether the proposal was accepted.
    pub fn mh_griddy_step(&self, rng: &mut SeededRng, state: &GPState, scale: f64) -> Result<(GPState, bool)> {
        ensure!(state.sigma2 > 0.0 && state.tau2 > 0.0, Domain, "state variances must be positive");
        ensure!(state.phi_index < self.caches.len(), Domain, "phi index out of range");
        ensure!(scale >= 0.0, Domain, "proposal scale must be nonnegative");
        let (ls, lt) = (state.sigma2.ln(), state.tau2.ln());
        let (ps, pt) = (ls + scale * standard_normal(rng), lt + scale * standard_normal(rng));
        let cache = &self.caches[state.phi_index];
        let pri = &self.model.priors;
        let cur = cache.loglik(state.sigma2, state.tau2)? + pri.log_density(ls, lt);
        let prop = cache.loglik(ps.exp(), pt.exp())? + pri.log_density(ps, pt);
        let accept = rng.random::<f64>().ln() < prop - cur;
        let (sigma2, tau2) = if accept { (ps.exp(), pt.exp()) } else { (state.sigma2, state.tau2) };
        let logp = self
            .caches
            .iter()
            .map(|c| c.loglik(sigma2, tau2))
            .collect::<Result<Vec<_>>>()?;
        let phi_index = sample_discrete_log(rng, &logp)?;
        Ok((GPState { sigma2, tau2, phi_index }, accept))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GPRunConfig {
    pub burn_in: usize,
    pub samples: usize,
    /// Random-walk scale on the log variances.
    pub proposal_scale: f64,
    /// Robbins-Monro target during burn-in; `None` keeps the scale fixed.
    pub target_accept: Option<f64>,
    pub init: GPState,
    /// Stop early once this many wall seconds have passed.
    pub max_seconds: Option<f64>,
}

impl GPRunConfig {
    pub fn new(burn_in: usize, samples: usize, init: GPState) -> Self {
        Self {
            burn_in,
            samples,
            proposal_scale: 0.2,
            target_accept: Some(0.3),
            init,
            max_seconds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GPRun {
    /// Retained (σ², τ², φ) draws.
    pub trace: Trace,
    /// Acceptance rate over retained steps.
    pub acceptance: f64,
    pub final_scale: f64,
    /// Cumulative work n·r after every step, burn-in included.
    pub work: Vec<f64>,
    /// Kriging means at the test inputs after every step, burn-in included.
    pub predictions: Vec<DVector<f64>>,
}

pub fn run_chain(
    rng: &mut SeededRng,
    sampler: &GPSampler,
    cfg: &GPRunConfig,
    test_x: Option<&DMatrix<f64>>,
) -> Result<GPRun> {
    ensure!(cfg.samples >= 2, Domain, "need at least 2 retained samples");
    ensure!(cfg.proposal_scale >= 0.0, Domain, "proposal scale must be nonnegative");
    let model = &sampler.model;
    let kstar: Vec<DMatrix<f64>> = match test_x {
        Some(t) => {
            ensure!(t.ncols() == model.x.ncols(), Dimension, "test inputs have wrong dimension");
            model.phi_grid.iter().map(|&p| cross_covariance(t, &model.x, p)).collect()
        }
        None => Vec::new(),
    };
    let n = model.n() as f64;
    let mut state = cfg.init;
    let mut log_scale = cfg.proposal_scale.ln();
    let mut rows = Vec::with_capacity(cfg.samples * 3);
    let mut secs = Vec::with_capacity(cfg.samples);
    let mut work = Vec::with_capacity(cfg.burn_in + cfg.samples);
    let mut predictions = Vec::new();
    let mut accepted = 0usize;
    let mut total = 0.0;
    let deadline = Deadline::new(cfg.max_seconds);
    for it in 0..cfg.burn_in + cfg.samples {
        if secs.len() >= 2 && deadline.expired() {
            break;
        }
        let start = std::time::Instant::now();
        let scale = if cfg.proposal_scale == 0.0 { 0.0 } else { log_scale.exp() };
        let (next, acc) = sampler.mh_griddy_step(rng, &state, scale)?;
        state = next;
        let cache = &sampler.caches[state.phi_index];
        if !kstar.is_empty() {
            predictions.push(predict_mean(&kstar[state.phi_index], cache, state.sigma2, state.tau2));
        }
        total += n * cache.factor.rank().max(1) as f64;
        work.push(total);
        let elapsed = start.elapsed().as_secs_f64();
        if it < cfg.burn_in {
            if let Some(target) = cfg.target_accept {
                log_scale += (f64::from(u8::from(acc)) - target) / ((it + 1) as f64).powf(0.6);
            }
        } else {
            accepted += usize::from(acc);
            rows.extend([state.sigma2, state.tau2, model.phi_grid[state.phi_index]]);
            secs.push(elapsed);
        }
    }
    let secs_len = secs.len();
    let names = ["sigma2", "tau2", "phi"].map(String::from).to_vec();
    let trace = Trace::new(names, rows, rng.seed())?.with_step_seconds(secs)?;
    Ok(GPRun {
        trace,
        acceptance: accepted as f64 / secs_len as f64,
        final_scale: if cfg.proposal_scale == 0.0 { 0.0 } else { log_scale.exp() },
        work,
        predictions,
    })
}

/// RMSE against `truth` of the running mean of predictions, evaluated at the
/// last step whose cumulative work fits each budget. `None` marks budgets
/// smaller than one step.
pub fn rmse_at_budgets(run: &GPRun, truth: &DVector<f64>, budgets: &[f64]) -> Result<Vec<Option<f64>>> {
    ensure!(!run.predictions.is_empty(), Domain, "run has no predictions");
    ensure!(run.predictions[0].len() == truth.len(), Dimension, "truth has wrong length");
    let mut running = DVector::zeros(truth.len());
    let mut rmse = Vec::with_capacity(run.predictions.len());
    for (k, p) in run.predictions.iter().enumerate() {
        running += (p - &running) / (k + 1) as f64;
        rmse.push(((&running - truth).norm_squared() / truth.len() as f64).sqrt());
    }
    Ok(budgets
        .iter()
        .map(|&b| {
            let k = run.work.partition_point(|&w| w <= b);
            (k > 0).then(|| rmse[k - 1])
        })
        .collect())
}

/// Draw inputs, a latent f ~ N(0, τ²Σ(φ)) and y = f + noise; returns
/// (inputs, f, y).
pub fn synthetic_gp(
    rng: &mut SeededRng,
    x: &DMatrix<f64>,
    sigma2: f64,
    tau2: f64,
    phi: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    ensure!(sigma2 >= 0.0 && tau2 >= 0.0 && phi >= 0.0, Domain, "parameters must be nonnegative");
    let (u, l) = full_eigen(&se_covariance(x, phi));
    let z = DVector::from_fn(l.len(), |i, _| (tau2 * l[i].max(0.0)).sqrt() * standard_normal(rng));
    let f = u * z;
    let y = DVector::from_fn(f.len(), |i, _| f[i] + sigma2.sqrt() * standard_normal(rng));
    Ok((f, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_x(n: usize) -> DMatrix<f64> {
        let mut r = SeededRng::new(0, 0);
        design_points(&mut r, Design::Grid, n)
    }

    #[test]
    fn covariance_examples() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let s = se_covariance(&x, 2f64.ln());
        assert!((s[(0, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(se_covariance(&x, 0.0), DMatrix::from_element(2, 2, 1.0));
        let big = se_covariance(&x, 1e6);
        assert_eq!(big, DMatrix::identity(2, 2));
        let g = phi_grid(&grid_x(10), 5).unwrap();
        let dmax = 0.999f64 * 0.999;
        assert!(((-g[0] * dmax).exp() - 0.99).abs() < 1e-12);
        assert!(((-g[4] * dmax).exp() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn rank_one_recovery() {
        let v = DVector::from_fn(30, |i, _| (i as f64 * 0.3).sin() + 0.5);
        let sigma = &v * v.transpose();
        let mut r = SeededRng::new(3, 0);
        let mut f = randomized_partial_eig(&mut r, &sigma, 1e-8, 3).unwrap();
        assert_eq!(f.rank(), 1);
        assert!((f.lambda()[0] - v.norm_squared()).abs() < 1e-10 * v.norm_squared());
        assert!(f.measure_residual(&sigma) < 1e-10);
        assert!(!f.full_rank());
    }

    #[test]
    fn factor_invariants_and_residual() {
        let x = grid_x(200);
        let sigma = se_covariance(&x, phi_grid(&x, 20).unwrap()[10]);
        let mut r = SeededRng::new(4, 0);
        let mut f = randomized_partial_eig(&mut r, &sigma, 1e-3, 3).unwrap();
        assert!(f.orthonormality_error() <= 1e-10);
        assert!(f.lambda().windows(2).all(|w| w[0] >= w[1]));
        assert!(f.measure_residual(&sigma) <= 1e-3);
        assert!(f.rank() < 200);
    }

    #[test]
    fn identity_needs_full_rank() {
        let sigma = DMatrix::<f64>::identity(12, 12);
        let mut r = SeededRng::new(1, 0);
        let f = randomized_partial_eig(&mut r, &sigma, 1e-6, 3).unwrap();
        assert!(f.full_rank());
        assert_eq!(f.rank(), 12);
    }

    #[test]
    fn slow_spectrum_needs_more_rank() {
        let mut r = SeededRng::new(5, 0);
        let grid = grid_x(150);
        let normal = design_points(&mut r, Design::Normal(5), 150);
        let pg = phi_grid(&grid, 3).unwrap()[1];
        let pn = phi_grid(&normal, 3).unwrap()[1];
        let fg = randomized_partial_eig(&mut r, &se_covariance(&grid, pg), 1e-3, 3).unwrap();
        let fn_ = randomized_partial_eig(&mut r, &se_covariance(&normal, pn), 1e-3, 3).unwrap();
        assert!(fn_.rank() > 3 * fg.rank(), "{} vs {}", fn_.rank(), fg.rank());
    }

    #[test]
    fn exact_factor_metrics() {
        let x = grid_x(60);
        let sigma = se_covariance(&x, 5.0);
        let full = full_eigen(&sigma);
        let f = LowRankFactor::from_eigenpairs(full.0.columns(0, 10).into_owned(), full.1[..10].to_vec()).unwrap();
        let mut r = SeededRng::new(2, 0);
        let m = eig_accuracy_metrics(&mut r, &full, &f).unwrap();
        assert_eq!(m.r, 0.0);
        assert!(m.f < 1e-14);
        assert!((m.c - 1.0).abs() < 1e-12);
    }

    fn dense_loglik(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let ch = cov.clone().cholesky().unwrap();
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = y.dot(&ch.solve(y));
        -0.5 * (y.len() as f64 * (2.0 * PI).ln() + logdet + quad)
    }

    #[test]
    fn loglik_matches_dense_oracle() {
        let mut r = SeededRng::new(9, 0);
        let x = design_points(&mut r, Design::Uniform, 100);
        let sigma = se_covariance(&x, 3.0);
        let (u, l) = full_eigen(&sigma);
        let f = LowRankFactor::from_eigenpairs(u, l).unwrap();
        let (_, y) = synthetic_gp(&mut r, &x, 0.3, 1.5, 3.0).unwrap();
        let cov = &sigma * 1.5 + DMatrix::identity(100, 100) * 0.3;
        let got = marginal_loglik(&y, &f, 0.3, 1.5).unwrap();
        assert!((got - dense_loglik(&y, &cov)).abs() < 1e-8);
        let iid = -0.5 * (100.0 * (2.0 * PI * 0.3).ln() + y.norm_squared() / 0.3);
        assert!((marginal_loglik(&y, &f, 0.3, 0.0).unwrap() - iid).abs() < 1e-9);
        assert!(marginal_loglik(&(&y * 2.0), &f, 0.3, 1.5).unwrap() < got);
        assert!(marginal_loglik(&y, &f, 0.0, 1.5).is_err());
    }

    #[test]
    fn predictive_mean_matches_dense_oracle() {
        let mut r = SeededRng::new(10, 0);
        let x = design_points(&mut r, Design::Uniform, 100);
        let sigma = se_covariance(&x, 3.0);
        let (u, l) = full_eigen(&sigma);
        let (_, y) = synthetic_gp(&mut r, &x, 0.3, 1.5, 3.0).unwrap();
        let cache = FactorCache::new(LowRankFactor::from_eigenpairs(u, l).unwrap(), &y).unwrap();
        let cov = &sigma * 1.5 + DMatrix::identity(100, 100) * 0.3;
        let dense = cov.cholesky().unwrap().solve(&y);
        assert!((cache.psi_y(0.3, 1.5) - dense).amax() < 1e-8);
        let degenerate = cache.psi_y(0.3, 0.0);
        assert!((degenerate - &y / 0.3).amax() < 1e-10);
    }

    #[test]
    fn predictive_draw_covariance() {
        let x = grid_x(5);
        let sigma = se_covariance(&x, 2.0);
        let (u, l) = full_eigen(&sigma);
        let y = DVector::from_vec(vec![0.3, -0.2, 0.5, 1.0, 0.1]);
        let cache = FactorCache::new(LowRankFactor::from_eigenpairs(u, l).unwrap(), &y).unwrap();
        let psi = (&sigma * 2.0 + DMatrix::identity(5, 5) * 0.5).try_inverse().unwrap();
        let mean = &psi * &y;
        let mut r = SeededRng::new(11, 0);
        let reps = 100_000;
        let mut acc = DMatrix::zeros(5, 5);
        for _ in 0..reps {
            let d = predictive_f_draw(&mut r, &cache, 0.5, 2.0).unwrap() - &mean;
            acc += &d * d.transpose();
        }
        acc /= reps as f64;
        assert!((acc - &psi).norm() / psi.norm() < 0.1);
    }

    #[test]
    fn delta_examples() {
        let b = DeltaBranch::default();
        let d1 = delta_for_epsilon(1.0, 1.0, 10.0, 0.2, 100, b).unwrap();
        let d2 = delta_for_epsilon(1.0, 1.0, 10.0, 0.1, 100, b).unwrap();
        assert!((d1 / d2 - 4.0).abs() < 1e-12);
        assert!(delta_for_epsilon(1.0, 4.0, 10.0, 0.1, 100, b).unwrap() < d2);
        assert!(delta_for_epsilon(1.0, 1.0, 10.0, 0.1, 400, b).unwrap() < d2);
        let r = delta_for_epsilon(1.0, 1.0, 10.0, 0.1, 100, DeltaBranch::Remark).unwrap();
        assert!(r >= d2);
    }

    #[test]
    fn zero_scale_keeps_variances() {
        let mut r = SeededRng::new(12, 0);
        let x = design_points(&mut r, Design::Uniform, 40);
        let (_, y) = synthetic_gp(&mut r, &x, 0.1, 1.0, 2.0).unwrap();
        let grid = phi_grid(&x, 4).unwrap();
        let model = GPModel::new(x, y, grid, GPPriors::default()).unwrap();
        let s = GPSampler::new(&mut r, model, 1e-3, 3, Exec::Sequential).unwrap();
        let init = GPState { sigma2: 0.2, tau2: 0.7, phi_index: 1 };
        let (next, acc) = s.mh_griddy_step(&mut r, &init, 0.0).unwrap();
        assert!(acc);
        assert_eq!((next.sigma2, next.tau2), (0.2, 0.7));
    }

    #[test]
    fn sampler_factors_identical_across_modes() {
        let mut r = SeededRng::new(13, 0);
        let x = design_points(&mut r, Design::Uniform, 50);
        let (_, y) = synthetic_gp(&mut r, &x, 0.1, 1.0, 2.0).unwrap();
        let grid = phi_grid(&x, 6).unwrap();
        let model = GPModel::new(x, y, grid, GPPriors::default()).unwrap();
        let a = GPSampler::new(&mut SeededRng::new(1, 0), model.clone(), 1e-3, 3, Exec::Sequential).unwrap();
        let b = GPSampler::new(&mut SeededRng::new(1, 0), model, 1e-3, 3, Exec::Parallel).unwrap();
        for l in 0..6 {
            assert_eq!(a.cache(l).factor(), b.cache(l).factor());
        }
    }
}
