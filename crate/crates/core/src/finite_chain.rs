//! Exact computations on small finite-state kernels.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{ensure, Error, Result};

pub const MAX_STATES: usize = 16;
pub const MAX_DP_STEPS: usize = 64;
const MAX_DP_ENTRIES: usize = 4_000_000;
const ROW_TOL: f64 = 1e-12;
const UNIQUE_TOL: f64 = 1e-10;

/// Row-stochastic transition matrix on at most [`MAX_STATES`] states.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteKernel {
    m: DMatrix<f64>,
}

impl FiniteKernel {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let k = m.nrows();
        ensure!(m.is_square() && k >= 1, Dimension, "kernel must be square, got {}x{}", k, m.ncols());
        ensure!(k <= MAX_STATES, Size, "{k} states exceeds cap {MAX_STATES}");
        ensure!(
            m.iter().all(|&x| (0.0..=1.0).contains(&x)),
            Domain,
            "kernel entries must lie in [0,1]"
        );
        for (i, row) in m.row_iter().enumerate() {
            let s = row.sum();
            ensure!((s - 1.0).abs() <= ROW_TOL, Domain, "row {i} sums to {s}");
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        ensure!(rows.iter().all(|r| r.len() == k), Dimension, "kernel rows must all have length {k}");
        Self::new(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
    }

    /// Whitespace-separated rows, one per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::Data(format!("line {}: bad number '{tok}'", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        ensure!(!rows.is_empty(), Data, "kernel file has no rows");
        Self::from_rows(&rows)
    }

    /// Symmetric two-state chain with switching probability `a`.
    pub fn two_state(a: f64) -> Result<Self> {
        Self::from_rows(&[vec![1.0 - a, a], vec![a, 1.0 - a]])
    }

    /// Two-state chain whose rows are moved by ±`eps` in opposite directions.
    pub fn two_state_tilted(a: f64, eps: f64) -> Result<Self> {
        Self::from_rows(&[vec![1.0 - (a - eps), a - eps], vec![a + eps, 1.0 - (a + eps)]])
    }

    /// Random kernel with Dirichlet(1,…,1) rows.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<Self> {
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            let row = crate::distributions::sample_dirichlet(rng, &vec![1.0; k])?;
            for j in 0..k {
                m[(i, j)] = row[j];
            }
            let s: f64 = (0..k).map(|j| m[(i, j)]).sum();
            m[(i, k - 1)] += 1.0 - s;
            m[(i, k - 1)] = m[(i, k - 1)].clamp(0.0, 1.0);
        }
        Self::new(m)
    }

    pub fn states(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.m.row(i).iter().copied().collect()
    }

    /// One step of a row vector: μ ↦ μP.
    pub fn push(&self, mu: &[f64]) -> Vec<f64> {
        let k = self.states();
        (0..k).map(|j| (0..k).map(|i| mu[i] * self.m[(i, j)]).sum()).collect()
    }

    /// One step of a function: f ↦ Pf.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let k = self.states();
        (0..k).map(|i| (0..k).map(|j| self.m[(i, j)] * f[j]).sum()).collect()
    }
}

/// Probability vector over the states of a [`FiniteKernel`].
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMeasure {
    w: Vec<f64>,
}

impl FiniteMeasure {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        ensure!(!w.is_empty(), Dimension, "empty measure");
        ensure!(w.iter().all(|&x| x >= 0.0), Domain, "measure has negative weight");
        let s: f64 = w.iter().sum();
        ensure!((s - 1.0).abs() <= ROW_TOL, Domain, "measure sums to {s}");
        Ok(Self { w })
    }

    pub fn point(k: usize, state: usize) -> Self {
        let mut w = vec![0.0; k];
        w[state] = 1.0;
        Self { w }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.w.iter().zip(f).map(|(p, x)| p * x).sum()
    }
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Oscillation seminorm inf_c ‖f − c‖_∞.
pub fn oscillation(f: &[f64]) -> f64 {
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo) / 2.0
}

pub fn doeblin_alpha(p: &FiniteKernel) -> f64 {
    let k = p.states();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            worst = worst.max(tv_distance(&p.row(i), &p.row(j)));
        }
    }
    1.0 - worst
}

pub fn kernel_tv_sup(p: &FiniteKernel, q: &FiniteKernel) -> Result<f64> {
    ensure!(p.states() == q.states(), Dimension, "kernels have {} and {} states", p.states(), q.states());
    Ok((0..p.states())
        .map(|i| tv_distance(&p.row(i), &q.row(i)))
        .fold(0.0, f64::max))
}

fn normalize_nonneg(v: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = v.iter().sum();
    if s == 0.0 || !s.is_finite() {
        return None;
    }
    let w: Vec<f64> = v.iter().map(|x| x / s).collect();
    if w.iter().any(|&x| x < -1e-12) {
        return None;
    }
    let w: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let s: f64 = w.iter().sum();
    Some(w.into_iter().map(|x| x / s).collect())
}

fn power_iteration(p: &FiniteKernel) -> Result<Vec<f64>> {
    let k = p.states();
    // Lazy version shares the stationary law and cannot oscillate.
    let mut mu = vec![1.0 / k as f64; k];
    for _ in 0..1_000_000 {
        let step = p.push(&mu);
        let next: Vec<f64> = mu.iter().zip(&step).map(|(a, b)| 0.5 * (a + b)).collect();
        let diff = tv_distance(&mu, &next);
        mu = next;
        if diff < 1e-14 {
            return Ok(mu);
        }
    }
    Err(Error::Numerical("power iteration did not converge".into()))
}

/// Stationary law π = πP, required to be unique.
pub fn invariant_measure(p: &FiniteKernel) -> Result<FiniteMeasure> {
    let k = p.states();
    if k == 1 {
        return Ok(FiniteMeasure { w: vec![1.0] });
    }
    let a = p.matrix().transpose() - DMatrix::identity(k, k);
    let svd = a.svd(false, true);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let second = svd.singular_values[order[1]];
    ensure!(
        second > UNIQUE_TOL,
        Numerical,
        "stationary law is not unique (second singular value {second:e})"
    );
    let vt = svd.v_t.as_ref().expect("requested right singular vectors");
    let v: Vec<f64> = vt.row(order[0]).iter().copied().collect();
    let w = match normalize_nonneg(&v) {
        Some(w) => w,
        None => power_iteration(p)?,
    };
    Ok(FiniteMeasure { w })
}

/// TV between π and the Cesàro average (1/t) Σ_{k<t} νP^k.
pub fn cesaro_tv(nu: &FiniteMeasure, p: &FiniteKernel, t: usize) -> Result<f64> {
    ensure!(t >= 1, Domain, "path length must be at least 1");
    ensure!(nu.w.len() == p.states(), Dimension, "measure and kernel sizes differ");
    let pi = invariant_measure(p)?;
    Ok(tv_distance(&pi.w, &cesaro_average(nu, p, t)))
}

pub fn cesaro_average(nu: &FiniteMeasure, p: &FiniteKernel, t: usize) -> Vec<f64> {
    let mut mu = nu.w.clone();
    let mut acc = vec![0.0; mu.len()];
    for k in 0..t {
        if k > 0 {
            mu = p.push(&mu);
        }
        acc.iter_mut().zip(&mu).for_each(|(a, m)| *a += m);
    }
    acc.iter().map(|a| a / t as f64).collect()
}

/// Law of the ergodic average (1/t) Σ_{k<t} f(θ_k) with θ_0 ∼ ν.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageLaw {
    /// (value, probability), sorted by value.
    pub support: Vec<(f64, f64)>,
}

impl AverageLaw {
    pub fn total_mass(&self) -> f64 {
        self.support.iter().map(|s| s.1).sum()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().map(|(v, p)| v * p).sum()
    }

    /// E[(target − average)²].
    pub fn mse(&self, target: f64) -> f64 {
        self.support.iter().map(|(v, p)| p * (target - v) * (target - v)).sum()
    }
}

pub fn ergodic_average_law(p: &FiniteKernel, f: &[f64], nu: &FiniteMeasure, t: usize) -> Result<AverageLaw> {
    let k = p.states();
    ensure!(f.len() == k && nu.w.len() == k, Dimension, "f, nu and kernel sizes differ");
    ensure!((1..=MAX_DP_STEPS).contains(&t), Size, "path length {t} outside 1..={MAX_DP_STEPS}");
    let mut levels: Vec<f64> = f.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let level_of: Vec<usize> = f
        .iter()
        .map(|x| levels.iter().position(|l| l == x).expect("level present"))
        .collect();

    let mut table: BTreeMap<(usize, Vec<u16>), f64> = BTreeMap::new();
    for s in 0..k {
        if nu.w[s] > 0.0 {
            let mut c = vec![0u16; levels.len()];
            c[level_of[s]] += 1;
            *table.entry((s, c)).or_default() += nu.w[s];
        }
    }
    for _ in 1..t {
        let mut next: BTreeMap<(usize, Vec<u16>), f64> = BTreeMap::new();
        for ((s, counts), mass) in &table {
            for s2 in 0..k {
                let q = p.m[(*s, s2)];
                if q == 0.0 {
                    continue;
                }
                let mut c = counts.clone();
                c[level_of[s2]] += 1;
                *next.entry((s2, c)).or_default() += mass * q;
            }
        }
        ensure!(next.len() <= MAX_DP_ENTRIES, Size, "ergodic-average table exceeds {MAX_DP_ENTRIES} entries");
        table = next;
    }

    let mut by_counts: BTreeMap<Vec<u16>, f64> = BTreeMap::new();
    for ((_, c), mass) in table {
        *by_counts.entry(c).or_default() += mass;
    }
    let mut support: Vec<(f64, f64)> = by_counts
        .into_iter()
        .map(|(c, mass)| {
            let v = c.iter().zip(&levels).map(|(&n, l)| n as f64 * l).sum::<f64>() / t as f64;
            (v, mass)
        })
        .collect();
    support.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(support.len());
    for (v, m) in support {
        match merged.last_mut() {
            Some(last) if last.0 == v => last.1 += m,
            _ => merged.push((v, m)),
        }
    }
    Ok(AverageLaw { support: merged })
}

/// Stationary covariance of f(θ_0) and f(θ_k).
pub fn exact_autocovariance(p: &FiniteKernel, f: &[f64], pi: &FiniteMeasure, k: usize) -> Result<f64> {
    ensure!(f.len() == p.states() && pi.w.len() == p.states(), Dimension, "f, pi and kernel sizes differ");
    let mut g = f.to_vec();
    for _ in 0..k {
        g = p.apply(&g);
    }
    let mean = pi.expect(f);
    let cross: f64 = pi.w.iter().zip(f).zip(&g).map(|((w, a), b)| w * a * b).sum();
    Ok(cross - mean * mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{tv_bound_exact, BoundInputs};
    use crate::rng::SeededRng;

    #[test]
    fn kernel_validation_and_parse() {
        assert!(FiniteKernel::from_rows(&[vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(FiniteKernel::new(DMatrix::identity(17, 17)).is_err());
        let k = FiniteKernel::parse("# two state\n0.75 0.25\n\n0.25 0.75\n").unwrap();
        assert_eq!(k, FiniteKernel::two_state(0.25).unwrap());
        assert!(FiniteKernel::parse("0.5 x\n0.5 0.5").is_err());
    }

    #[test]
    fn doeblin_examples() {
        assert!((doeblin_alpha(&FiniteKernel::two_state(0.25).unwrap()) - 0.5).abs() < 1e-15);
        assert_eq!(doeblin_alpha(&FiniteKernel::new(DMatrix::identity(3, 3)).unwrap()), 0.0);
        let same = FiniteKernel::from_rows(&vec![vec![0.2, 0.8]; 2]).unwrap();
        assert_eq!(doeblin_alpha(&same), 1.0);
    }

    #[test]
    fn invariant_examples() {
        let pi = invariant_measure(&FiniteKernel::two_state(0.25).unwrap()).unwrap();
        assert!((pi.w[0] - 0.5).abs() < 1e-14);
        let pe = invariant_measure(&FiniteKernel::two_state_tilted(0.25, 0.1).unwrap()).unwrap();
        assert!((pe.w[0] - 0.7).abs() < 1e-14 && (pe.w[1] - 0.3).abs() < 1e-14);
        let ds = FiniteKernel::from_rows(&[vec![0.1, 0.3, 0.6], vec![0.6, 0.1, 0.3], vec![0.3, 0.6, 0.1]]).unwrap();
        let u = invariant_measure(&ds).unwrap();
        assert!(u.w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-14));
        assert!(invariant_measure(&FiniteKernel::new(DMatrix::identity(2, 2)).unwrap()).is_err());
    }

    #[test]
    fn power_iteration_agrees() {
        let mut r = SeededRng::new(9, 0);
        for k in 2..6 {
            let p = FiniteKernel::random(&mut r, k).unwrap();
            let a = invariant_measure(&p).unwrap();
            let b = power_iteration(&p).unwrap();
            assert!(tv_distance(&a.w, &b) < 1e-12);
        }
    }

    #[test]
    fn cesaro_examples() {
        let p = FiniteKernel::two_state(0.25).unwrap();
        let nu = FiniteMeasure::point(2, 1);
        let v = cesaro_tv(&nu, &p, 2).unwrap();
        assert!((v - 0.375).abs() < 1e-15);
        let b = tv_bound_exact(0.5, BoundInputs::new(2, 0.5, 1.0).unwrap()).unwrap();
        assert!((v - b).abs() < 1e-15);
        let pi = invariant_measure(&p).unwrap();
        assert!(cesaro_tv(&pi, &p, 17).unwrap() < 1e-15);
        assert!(cesaro_tv(&nu, &p, 10_000).unwrap() < 1e-4);
    }

    #[test]
    fn kernel_tv_examples() {
        let p = FiniteKernel::two_state(0.25).unwrap();
        assert_eq!(kernel_tv_sup(&p, &p).unwrap(), 0.0);
        let q = FiniteKernel::two_state_tilted(0.25, 0.1).unwrap();
        assert!((kernel_tv_sup(&p, &q).unwrap() - 0.1).abs() < 1e-15);
        let s = FiniteKernel::two_state(0.15).unwrap();
        assert!((kernel_tv_sup(&p, &s).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn average_law_basics() {
        let p = FiniteKernel::two_state(0.25).unwrap();
        let nu = FiniteMeasure::point(2, 1);
        let f = [-1.0, 1.0];
        let law = ergodic_average_law(&p, &f, &nu, 1).unwrap();
        assert_eq!(law.support, vec![(1.0, 1.0)]);
        let law = ergodic_average_law(&p, &f, &nu, 40).unwrap();
        assert!((law.total_mass() - 1.0).abs() < 1e-12);
        assert!(ergodic_average_law(&p, &f, &nu, 65).is_err());
        // Mean of the law equals the Cesàro average of f.
        let c = FiniteMeasure::new(cesaro_average(&nu, &p, 40)).unwrap();
        assert!((law.mean() - c.expect(&f)).abs() < 1e-12);
    }

    #[test]
    fn autocovariance_examples() {
        let p = FiniteKernel::two_state(0.25).unwrap();
        let pi = invariant_measure(&p).unwrap();
        let f = [-1.0, 1.0];
        for k in 0..20 {
            let c = exact_autocovariance(&p, &f, &pi, k).unwrap();
            assert!((c - 0.5f64.powi(k as i32)).abs() < 1e-14);
        }
        assert!(exact_autocovariance(&p, &[3.0, 3.0], &pi, 4).unwrap().abs() < 1e-14);
    }
}
