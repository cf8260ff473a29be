//! Random variates shared by the samplers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, Gamma, StandardNormal};

use crate::error::{ensure, Error, Result};

/// Number of exponential terms kept in the Pólya-Gamma series.
pub const PG_TERMS: usize = 200;

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma variate with the given shape and rate (mean `shape / rate`).
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    ensure!(
        shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite(),
        Domain,
        "gamma shape {shape} and rate {rate} must be positive and finite"
    );
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(g.sample(rng))
}

pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64]) -> Result<Vec<f64>> {
    ensure!(!concentration.is_empty(), Domain, "empty Dirichlet concentration");
    ensure!(
        concentration.iter().all(|&a| a > 0.0 && a.is_finite()),
        Domain,
        "Dirichlet concentrations must be positive"
    );
    if concentration.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut g = Vec::with_capacity(concentration.len());
    for &a in concentration {
        g.push(sample_gamma(rng, a, 1.0)?);
    }
    let total: f64 = g.iter().sum();
    ensure!(
        total > 0.0 && total.is_finite(),
        Numerical,
        "Dirichlet gamma draws underflowed"
    );
    g.iter_mut().for_each(|x| *x /= total);
    Ok(g)
}

/// Multinomial counts by sequential binomial splitting.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64]) -> Result<Vec<u64>> {
    ensure!(!probs.is_empty(), Domain, "empty probability vector");
    ensure!(
        probs.iter().all(|&p| p >= 0.0 && p.is_finite()),
        Domain,
        "multinomial probabilities must be nonnegative"
    );
    let mut mass: f64 = probs.iter().sum();
    ensure!(mass > 0.0, Domain, "multinomial probabilities sum to zero");
    let k = probs.len();
    let mut out = vec![0u64; k];
    let mut left = n;
    for (h, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if h == k - 1 {
            out[h] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = if q >= 1.0 {
            left
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(left, q)
                .map_err(|e| Error::Domain(e.to_string()))?
                .sample(rng)
        };
        out[h] = draw;
        left -= draw;
        mass -= p;
    }
    Ok(out)
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_discrete<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Result<usize> {
    ensure!(!weights.is_empty(), Domain, "empty weight vector");
    ensure!(
        weights.iter().all(|&w| w >= 0.0 && w.is_finite()),
        Domain,
        "discrete weights must be nonnegative and finite"
    );
    let total: f64 = weights.iter().sum();
    ensure!(total > 0.0, Domain, "discrete weights sum to zero");
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            acc += w;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Index drawn with probability proportional to `exp(log_weights)`.
pub fn sample_discrete_log<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> Result<usize> {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(m.is_finite(), Domain, "log weights have no finite maximum");
    let w: Vec<f64> = log_weights.iter().map(|&l| (l - m).exp()).collect();
    sample_discrete(rng, &w)
}

/// Symmetric square root used to draw from N(0, cov).
#[derive(Debug, Clone)]
pub struct GaussianRoot {
    root: DMatrix<f64>,
}

impl GaussianRoot {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        ensure!(cov.is_square(), Dimension, "covariance is {}x{}", cov.nrows(), cov.ncols());
        let scale = cov.amax().max(1.0);
        let asym = (cov - cov.transpose()).amax();
        ensure!(asym <= 1e-8 * scale, Domain, "covariance asymmetric by {asym:e}");
        let sym = (cov + cov.transpose()) * 0.5;
        if let Some(ch) = sym.clone().cholesky() {
            return Ok(Self { root: ch.l() });
        }
        let eig = sym.symmetric_eigen();
        let min = eig.eigenvalues.min();
        ensure!(min >= -1e-8 * scale, Domain, "covariance has eigenvalue {min:e}");
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
        Ok(Self { root })
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, mean: &DVector<f64>) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| standard_normal(rng));
        mean + &self.root * z
    }
}

pub fn sample_mvn<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let root = GaussianRoot::new(cov)?;
    ensure!(
        root.dim() == mean.len(),
        Dimension,
        "mean length {} vs covariance {}",
        mean.len(),
        root.dim()
    );
    Ok(root.draw(rng, mean))
}

/// Σ_{k≥1} 1/((k−½)² + (c/2π)²), which equals π²·tanh(c/2)/c.
fn pg_series_total(c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-4 {
        PI * PI * (0.5 - c * c / 24.0)
    } else {
        PI * PI * (c / 2.0).tanh() / c
    }
}

fn pg_denominators(c: f64) -> impl Iterator<Item = f64> {
    let shift = c * c / (4.0 * PI * PI);
    (1..=PG_TERMS).map(move |k| {
        let h = k as f64 - 0.5;
        h * h + shift
    })
}

/// Mean of the discarded terms of the truncated Pólya-Gamma series.
pub fn pg_tail_mean(c: f64) -> f64 {
    let kept: f64 = pg_denominators(c).map(|d| 1.0 / d).sum();
    ((pg_series_total(c) - kept) / (2.0 * PI * PI)).max(0.0)
}

/// Exact mean of PG(1, c).
pub fn pg_mean(c: f64) -> f64 {
    pg_series_total(c) / (2.0 * PI * PI)
}

/// PG(1, c) variate from the truncated sum of weighted exponentials.
pub fn sample_polya_gamma<R: Rng + ?Sized>(rng: &mut R, c: f64) -> f64 {
    sample_polya_gamma_with_tail(rng, c, pg_tail_mean(c))
}

/// As [`sample_polya_gamma`] with a precomputed tail correction.
pub fn sample_polya_gamma_with_tail<R: Rng + ?Sized>(rng: &mut R, c: f64, tail: f64) -> f64 {
    let mut acc = 0.0;
    for d in pg_denominators(c) {
        let g: f64 = Exp1.sample(rng);
        acc += g / d;
    }
    acc / (2.0 * PI * PI) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn dirichlet_single_and_concentrated() {
        let mut r = SeededRng::new(1, 0);
        assert_eq!(sample_dirichlet(&mut r, &[3.0]).unwrap(), vec![1.0]);
        let x = sample_dirichlet(&mut r, &[1e6, 1e6]).unwrap();
        assert!(x[0] > 0.49 && x[0] < 0.51);
        assert!(sample_dirichlet(&mut r, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dirichlet_mean() {
        let mut r = SeededRng::new(2, 0);
        let mut m = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let x = sample_dirichlet(&mut r, &[2.0, 1.0, 1.0]).unwrap();
            for i in 0..3 {
                m[i] += x[i] / n as f64;
            }
        }
        assert!((m[0] - 0.5).abs() < 0.01 && (m[1] - 0.25).abs() < 0.01 && (m[2] - 0.25).abs() < 0.01);
    }

    #[test]
    fn multinomial_edges_and_moments() {
        let mut r = SeededRng::new(3, 0);
        assert_eq!(sample_multinomial(&mut r, 0, &[0.2, 0.8]).unwrap(), vec![0, 0]);
        assert_eq!(sample_multinomial(&mut r, 17, &[0.0, 1.0, 0.0]).unwrap(), vec![0, 17, 0]);
        let probs = [0.5, 0.3, 0.2];
        let n = 50u64;
        let reps = 100_000;
        let mut m = [0.0; 3];
        for _ in 0..reps {
            let x = sample_multinomial(&mut r, n, &probs).unwrap();
            assert_eq!(x.iter().sum::<u64>(), n);
            for i in 0..3 {
                m[i] += x[i] as f64 / reps as f64;
            }
        }
        for i in 0..3 {
            let sd = (n as f64 * probs[i] * (1.0 - probs[i]) / reps as f64).sqrt();
            assert!((m[i] - n as f64 * probs[i]).abs() < 3.0 * sd, "cell {i}: {}", m[i]);
        }
    }

    #[test]
    fn mvn_zero_covariance_is_mean() {
        let mut r = SeededRng::new(4, 0);
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let x = sample_mvn(&mut r, &mean, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(x, mean);
    }

    #[test]
    fn mvn_rejects_bad_covariance() {
        let mut r = SeededRng::new(4, 0);
        let mean = DVector::zeros(2);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(sample_mvn(&mut r, &mean, &asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sample_mvn(&mut r, &mean, &indef).is_err());
    }

    #[test]
    fn mvn_sample_covariance() {
        let mut r = SeededRng::new(5, 0);
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, -0.3, 0.1, -0.3, 0.5]);
        let mean = DVector::zeros(3);
        let root = GaussianRoot::new(&cov).unwrap();
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let x = root.draw(&mut r, &mean);
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        assert!((acc - &cov).norm() / cov.norm() < 0.05);
    }

    #[test]
    fn polya_gamma_mean_formula() {
        assert!((pg_mean(0.0) - 0.25).abs() < 1e-12);
        assert!((pg_mean(2.0) - 1f64.tanh() / 4.0).abs() < 1e-12);
        assert!((pg_mean(1e-5) - pg_mean(2e-5)).abs() < 1e-9);
    }

    #[test]
    fn polya_gamma_positive() {
        let mut r = SeededRng::new(6, 0);
        for i in 0..1000 {
            assert!(sample_polya_gamma(&mut r, (i % 20) as f64 - 10.0) > 0.0);
        }
    }

    #[test]
    fn gamma_and_discrete() {
        let mut r = SeededRng::new(7, 0);
        let n = 100_000;
        let m: f64 = (0..n).map(|_| sample_gamma(&mut r, 1.0, 4.0).unwrap()).sum::<f64>() / n as f64;
        assert!((m - 0.25).abs() < 0.0025);
        assert_eq!(sample_discrete(&mut r, &[2.5]).unwrap(), 0);
        let d = 5;
        let mut counts = vec![0usize; d];
        for _ in 0..n {
            counts[sample_discrete(&mut r, &vec![1.0; d]).unwrap()] += 1;
        }
        let sd = (n as f64 * 0.2 * 0.8).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / d as f64).abs() < 3.0 * sd);
        }
        assert!(sample_discrete_log(&mut r, &[-1e6, 0.0]).unwrap() == 1);
    }
}
