//! Empirical convergence and discrepancy estimators for sampled traces.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, Result};
use crate::par::Exec;

/// Ordered draws from one chain: `len × dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    names: Vec<String>,
    data: Vec<f64>,
    seed: u64,
    step_seconds: Option<Vec<f64>>,
}

impl Trace {
    pub fn new(names: Vec<String>, data: Vec<f64>, seed: u64) -> Result<Self> {
        let p = names.len();
        ensure!(p >= 1, Dimension, "trace needs at least one coordinate");
        ensure!(data.len().is_multiple_of(p), Dimension, "{} values do not fill rows of {p}", data.len());
        ensure!(data.len() / p >= 2, Data, "trace needs at least 2 rows");
        ensure!(data.iter().all(|x| x.is_finite()), Data, "trace contains non-finite values");
        Ok(Self {
            names,
            data,
            seed,
            step_seconds: None,
        })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>], seed: u64) -> Result<Self> {
        let p = names.len();
        ensure!(rows.iter().all(|r| r.len() == p), Dimension, "every row must have {p} entries");
        Self::new(names, rows.concat(), seed)
    }

    /// Default names `x0, x1, …`.
    pub fn default_names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    pub fn with_step_seconds(mut self, secs: Vec<f64>) -> Result<Self> {
        ensure!(secs.len() == self.len(), Dimension, "{} timings for {} rows", secs.len(), self.len());
        self.step_seconds = Some(secs);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_seconds(&self) -> Option<&[f64]> {
        self.step_seconds.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.dim();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.iter().skip(j).step_by(self.dim()).copied().collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.column(j).iter().sum::<f64>() / self.len() as f64)
            .collect()
    }

    /// Rows `from..` as a new trace.
    pub fn tail(&self, from: usize) -> Result<Trace> {
        let p = self.dim();
        let mut t = Trace::new(self.names.clone(), self.data[from.min(self.len()) * p..].to_vec(), self.seed)?;
        if let Some(s) = &self.step_seconds {
            t.step_seconds = Some(s[from..].to_vec());
        }
        Ok(t)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Biased sample autocovariances γ̂_0..γ̂_max_lag.
fn autocovariances(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..=max_lag.min(n - 1))
        .map(|k| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiMaxReport {
    pub phi_max: Option<f64>,
    /// Lag-1..k_max autocorrelations per coordinate; `None` for excluded coordinates.
    pub autocorrelations: Vec<Option<Vec<f64>>>,
    /// Coordinates dropped for having zero variance.
    pub excluded: Vec<usize>,
    pub threshold: f64,
}

/// Largest k-th root of the significant lag-k autocorrelations, a lower
/// estimate of the geometric convergence rate.
pub fn phi_max(trace: &Trace, k_max: usize) -> Result<PhiMaxReport> {
    let t = trace.len();
    ensure!(k_max >= 1, Domain, "k_max must be at least 1");
    ensure!(k_max * 10 <= t, Domain, "k_max {k_max} must not exceed t/10 = {}", t / 10);
    let z = Normal::standard().inverse_cdf(0.95f64.powf(1.0 / k_max as f64));
    let threshold = z / ((t - k_max) as f64).sqrt();
    let mut best: Option<f64> = None;
    let mut excluded = Vec::new();
    let mut table = Vec::with_capacity(trace.dim());
    for j in 0..trace.dim() {
        let x = trace.column(j);
        let g = autocovariances(&x, k_max);
        if g[0] <= 0.0 || is_constant(&x) {
            excluded.push(j);
            table.push(None);
            continue;
        }
        let rho: Vec<f64> = g[1..].iter().map(|v| v / g[0]).collect();
        for (i, &r) in rho.iter().enumerate() {
            if r > threshold {
                let v = r.powf(1.0 / (i + 1) as f64);
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        table.push(Some(rho));
    }
    Ok(PhiMaxReport {
        phi_max: best,
        autocorrelations: table,
        excluded,
        threshold,
    })
}

/// Distance between kernel mean embeddings of two sample sets under
/// K(u,v) = exp(−φ‖u−v‖²)/σ (V-statistic).
pub fn w1_kernel_distance(xs: &[Vec<f64>], ys: &[Vec<f64>], phi: f64, sigma: f64, exec: Exec) -> Result<f64> {
    ensure!(!xs.is_empty() && !ys.is_empty(), Dimension, "sample sets must be nonempty");
    let d = xs[0].len();
    ensure!(
        xs.iter().chain(ys).all(|v| v.len() == d),
        Dimension,
        "all samples must have dimension {d}"
    );
    ensure!(phi >= 0.0 && sigma > 0.0, Domain, "need phi >= 0 and sigma > 0");
    let kernel = |u: &[f64], v: &[f64]| {
        let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        (-phi * d2).exp()
    };
    let block = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        exec.map_range(a.len(), |i| b.iter().map(|v| kernel(&a[i], v)).sum::<f64>())
            .into_iter()
            .sum::<f64>()
    };
    let (m, n) = (xs.len() as f64, ys.len() as f64);
    let kxx = block(xs, xs) / (m * m);
    let kyy = block(ys, ys) / (n * n);
    let kxy = 2.0 * block(xs, ys) / (m * n);
    Ok(((kxx + kyy - kxy) / sigma).max(0.0).sqrt())
}

fn newey_west_variance(x: &[f64]) -> f64 {
    let n = x.len();
    let bw = (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize;
    let g = autocovariances(x, bw.min(n - 1));
    let l = g.len() - 1;
    g[0] + 2.0
        * g[1..]
            .iter()
            .enumerate()
            .map(|(i, v)| (1.0 - (i + 1) as f64 / (l + 1) as f64) * v)
            .sum::<f64>()
}

/// Geweke z-score per coordinate comparing the first and last windows.
pub fn geweke_z(trace: &Trace, first_frac: f64, last_frac: f64) -> Result<Vec<f64>> {
    ensure!(
        first_frac > 0.0 && last_frac > 0.0 && first_frac + last_frac <= 1.0,
        Domain,
        "window fractions {first_frac}, {last_frac} must be positive and non-overlapping"
    );
    let t = trace.len();
    let na = (first_frac * t as f64).floor() as usize;
    let nb = (last_frac * t as f64).floor() as usize;
    ensure!(na >= 10 && nb >= 10, Size, "trace of length {t} too short for Geweke windows");
    (0..trace.dim())
        .map(|j| {
            let x = trace.column(j);
            let a = &x[..na];
            let b = &x[t - nb..];
            ensure!(!is_constant(a) && !is_constant(b), Data, "coordinate {j} is constant within a window");
            let va = newey_west_variance(a).max(0.0) / na as f64;
            let vb = newey_west_variance(b).max(0.0) / nb as f64;
            ensure!(va + vb > 0.0, Data, "coordinate {j} has zero spectral variance");
            Ok((mean(a) - mean(b)) / (va + vb).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssReport {
    pub ess: Vec<f64>,
    /// Coordinates that never move; their ESS is reported as the trace length.
    pub constant: Vec<bool>,
}

/// Effective sample size with Geyer's initial positive sequence truncation.
pub fn effective_sample_size(trace: &Trace) -> EssReport {
    let t = trace.len();
    let mut ess = Vec::with_capacity(trace.dim());
    let mut constant = Vec::with_capacity(trace.dim());
    for j in 0..trace.dim() {
        let x = trace.column(j);
        if is_constant(&x) {
            ess.push(t as f64);
            constant.push(true);
            continue;
        }
        let m = mean(&x);
        let c: Vec<f64> = x.iter().map(|v| v - m).collect();
        let acov = |k: usize| c[..t - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / t as f64;
        let g0 = acov(0);
        let mut tau = -1.0;
        let mut k = 0;
        while k + 1 < t {
            let pair = (acov(k) + acov(k + 1)) / g0;
            if pair <= 0.0 {
                break;
            }
            tau += 2.0 * pair;
            k += 2;
        }
        ess.push(t as f64 / tau.max(1e-12));
        constant.push(false);
    }
    EssReport { ess, constant }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::standard_normal;
    use crate::rng::SeededRng;
    use rand::Rng;

    fn iid_trace(seed: u64, t: usize, p: usize) -> Trace {
        let mut r = SeededRng::new(seed, 0);
        let data = (0..t * p).map(|_| standard_normal(&mut r)).collect();
        Trace::new(Trace::default_names(p), data, seed).unwrap()
    }

    fn two_state_trace(seed: u64, a: f64, t: usize) -> Trace {
        let mut r = SeededRng::new(seed, 0);
        let mut s = 0usize;
        let mut data = Vec::with_capacity(t);
        for _ in 0..t {
            data.push(s as f64);
            if r.random::<f64>() < a {
                s = 1 - s;
            }
        }
        Trace::new(vec!["state".into()], data, seed).unwrap()
    }

    #[test]
    fn trace_validation() {
        assert!(Trace::new(vec!["a".into()], vec![1.0], 0).is_err());
        assert!(Trace::new(vec!["a".into()], vec![1.0, f64::NAN], 0).is_err());
        let t = Trace::new(vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert_eq!(t.column(1), vec![2.0, 4.0]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn phi_max_two_state() {
        let tr = two_state_trace(1, 0.25, 100_000);
        let r = phi_max(&tr, 5).unwrap();
        assert!((r.phi_max.unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn phi_max_constant_and_precondition() {
        let tr = Trace::new(vec!["c".into()], vec![2.0; 100], 0).unwrap();
        let r = phi_max(&tr, 5).unwrap();
        assert_eq!(r.phi_max, None);
        assert_eq!(r.excluded, vec![0]);
        assert!(phi_max(&tr, 11).is_err());
    }

    #[test]
    fn phi_max_iid_mostly_absent() {
        let absent = (0..100).filter(|&s| phi_max(&iid_trace(s, 2_000, 1), 5).unwrap().phi_max.is_none()).count();
        assert!(absent >= 88, "{absent}/100 absent");
    }

    #[test]
    fn w1_closed_forms() {
        let x = vec![vec![0.0, 0.0]];
        let y = vec![vec![3.0, 4.0]];
        assert_eq!(w1_kernel_distance(&x, &x, 1.0, 1.0, Exec::Sequential).unwrap(), 0.0);
        let d: f64 = 0.7;
        let z = vec![vec![0.0, d]];
        let want = (2.0 / 2.0 * (1.0 - (-0.5 * d * d).exp())).sqrt();
        assert!((w1_kernel_distance(&x, &z, 0.5, 2.0, Exec::Sequential).unwrap() - want).abs() < 1e-12);
        assert!((w1_kernel_distance(&x, &y, 1.0, 1.0, Exec::Sequential).unwrap() - 2f64.sqrt()).abs() < 1e-9);
        assert!(w1_kernel_distance(&x, &[vec![1.0]], 1.0, 1.0, Exec::Sequential).is_err());
    }

    #[test]
    fn geweke_behaviour() {
        let tr = iid_trace(3, 10_000, 20);
        let z = geweke_z(&tr, 0.1, 0.5).unwrap();
        let big = z.iter().filter(|v| v.abs() > 1.96).count();
        assert!(big <= 5, "{big} of 20 exceed 1.96");
        let trend: Vec<f64> = (0..1000).map(|i| i as f64 * 0.01).collect();
        let tr = Trace::new(vec!["x".into()], trend, 0).unwrap();
        assert!(geweke_z(&tr, 0.1, 0.5).unwrap()[0].abs() > 10.0);
        let short = Trace::new(vec!["x".into()], vec![1.0, 2.0, 3.0], 0).unwrap();
        assert!(geweke_z(&short, 0.1, 0.5).is_err());
    }

    #[test]
    fn ess_behaviour() {
        let e = effective_sample_size(&iid_trace(4, 20_000, 1));
        let r = e.ess[0] / 20_000.0;
        assert!((0.9..=1.1).contains(&r), "{r}");
        let e = effective_sample_size(&two_state_trace(5, 0.25, 100_000));
        assert!((e.ess[0] / 100_000.0 - 1.0 / 3.0).abs() < 0.05);
        let c = Trace::new(vec!["c".into()], vec![1.0; 50], 0).unwrap();
        let e = effective_sample_size(&c);
        assert!(e.constant[0] && e.ess[0] == 50.0);
    }
}
