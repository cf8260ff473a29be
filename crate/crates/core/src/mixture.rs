//! Latent-class model for sparse contingency tables: exact Gibbs sampler and
//! the thresholded Gaussian approximation to the multinomial Z update.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::factorial::ln_factorial;

use crate::budget::Deadline;
use crate::diagnostics::Trace;
use crate::distributions::{sample_dirichlet, sample_multinomial, GaussianRoot};
use crate::error::{ensure, Error, Result};
use crate::numeric::{gauss_legendre, integrate, normal_interval, normal_pdf};
use crate::par::Exec;
use crate::rng::{fill_streams, SeededRng};

/// Observed cells of a `d^p` table with their positive counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyData {
    pub p: usize,
    pub d: usize,
    pub cells: Vec<Vec<u32>>,
    pub counts: Vec<u64>,
}

impl ContingencyData {
    pub fn new(p: usize, d: usize, cells: Vec<Vec<u32>>, counts: Vec<u64>) -> Result<Self> {
        ensure!(p >= 1 && d >= 1, Domain, "need p >= 1 and d >= 1");
        ensure!(cells.len() == counts.len(), Dimension, "{} cells but {} counts", cells.len(), counts.len());
        ensure!(counts.iter().all(|&n| n > 0), Data, "cell counts must be positive");
        ensure!(
            cells.iter().all(|c| c.len() == p && c.iter().all(|&v| (v as usize) < d)),
            Data,
            "cell indices must have length {p} with entries below {d}"
        );
        Ok(Self { p, d, cells, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Indices of the `m` most populated cells (ties by cell order).
    pub fn largest_cells(&self, m: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        idx.truncate(m);
        idx
    }
}

/// Dirichlet concentrations: `lambda` for every category of every λ vector,
/// `nu` for every class weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixturePriors {
    pub lambda: f64,
    pub nu: f64,
}

impl MixturePriors {
    fn validate(&self) -> Result<()> {
        ensure!(self.lambda > 0.0 && self.nu > 0.0, Domain, "prior concentrations must be positive");
        Ok(())
    }
}

/// Class weights and per-variable category probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub nu: Vec<f64>,
    /// `lambda[j][h][c]`: probability of category c for variable j in class h.
    pub lambda: Vec<Vec<Vec<f64>>>,
}

impl MixtureParams {
    pub fn classes(&self) -> usize {
        self.nu.len()
    }

    /// Cell probability π_c.
    pub fn cell_prob(&self, cell: &[u32]) -> f64 {
        (0..self.classes())
            .map(|h| {
                self.nu[h]
                    * cell
                        .iter()
                        .enumerate()
                        .map(|(j, &c)| self.lambda[j][h][c as usize])
                        .product::<f64>()
            })
            .sum()
    }

    pub fn draw_prior<R: Rng + ?Sized>(rng: &mut R, p: usize, d: usize, k: usize, priors: MixturePriors) -> Result<Self> {
        priors.validate()?;
        let nu = sample_dirichlet(rng, &vec![priors.nu; k])?;
        let mut lambda = Vec::with_capacity(p);
        for _ in 0..p {
            let mut per = Vec::with_capacity(k);
            for _ in 0..k {
                per.push(sample_dirichlet(rng, &vec![priors.lambda; d])?);
            }
            lambda.push(per);
        }
        Ok(Self { nu, lambda })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub params: MixtureParams,
    /// Latent class counts per observed cell.
    pub z: Vec<Vec<u64>>,
}

impl MixtureState {
    pub fn initial<R: Rng + ?Sized>(rng: &mut R, data: &ContingencyData, k: usize, priors: MixturePriors) -> Result<Self> {
        ensure!(k >= 1, Domain, "need at least one latent class");
        let params = MixtureParams::draw_prior(rng, data.p, data.d, k, priors)?;
        Ok(Self {
            params,
            z: vec![vec![0; k]; data.len()],
        })
    }
}

/// Posterior class-membership probabilities for one cell.
pub fn latent_class_probs(params: &MixtureParams, cell: &[u32]) -> Result<Vec<f64>> {
    let logs: Vec<f64> = (0..params.classes())
        .map(|h| {
            params.nu[h].ln()
                + cell
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| params.lambda[j][h][c as usize].ln())
                    .sum::<f64>()
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(m.is_finite(), Numerical, "all class weights vanish for cell {cell:?}");
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

/// Remove `excess` units, always from the currently largest entry.
fn trim_largest(z: &mut [i64], idx: &[usize], mut excess: i64) {
    while excess > 0 {
        let &top = idx.iter().max_by_key(|&&i| (z[i], std::cmp::Reverse(i))).expect("nonempty");
        let cut = excess.min(z[top]);
        if cut == 0 {
            break;
        }
        z[top] -= cut;
        excess -= cut;
    }
}

/// Class counts for one cell: rounded Gaussian on classes with expected count
/// above `n_min`, exact multinomial on the rest.
pub fn approx_multinomial_draw<R: Rng + ?Sized>(rng: &mut R, n_c: u64, nu_tilde: &[f64], n_min: f64) -> Result<Vec<u64>> {
    ensure!(n_min >= 0.0, Domain, "n_min must be nonnegative");
    let k = nu_tilde.len();
    let n = n_c as f64;
    let h: Vec<usize> = (0..k).filter(|&i| n * nu_tilde[i] > n_min).collect();
    if h.is_empty() {
        return sample_multinomial(rng, n_c, nu_tilde);
    }
    let complement: Vec<usize> = (0..k).filter(|i| !h.contains(i)).collect();
    // With no complement the last class in H is fixed by the total.
    let gauss: &[usize] = if complement.is_empty() { &h[..h.len() - 1] } else { &h };
    let mut z = vec![0i64; k];
    if !gauss.is_empty() {
        let g = gauss.len();
        let mean = DVector::from_fn(g, |i, _| n * nu_tilde[gauss[i]]);
        let cov = DMatrix::from_fn(g, g, |i, j| {
            let (a, b) = (nu_tilde[gauss[i]], nu_tilde[gauss[j]]);
            n * (if i == j { a } else { 0.0 } - a * b)
        });
        let w = GaussianRoot::new(&cov)?.draw(rng, &mean);
        for (i, &cls) in gauss.iter().enumerate() {
            z[cls] = (w[i].round() as i64).max(0);
        }
    }
    let total = n_c as i64;
    let used: i64 = gauss.iter().map(|&i| z[i]).sum();
    if used > total {
        trim_largest(&mut z, gauss, used - total);
    }
    let used: i64 = gauss.iter().map(|&i| z[i]).sum();
    let rest = (total - used) as u64;
    if complement.is_empty() {
        z[*h.last().expect("nonempty")] = rest as i64;
    } else {
        let probs: Vec<f64> = complement.iter().map(|&i| nu_tilde[i]).collect();
        let draw = if probs.iter().sum::<f64>() > 0.0 {
            sample_multinomial(rng, rest, &probs)?
        } else {
            let mut v = vec![0; probs.len()];
            v[0] = rest;
            v
        };
        for (j, &cls) in complement.iter().enumerate() {
            z[cls] = draw[j] as i64;
        }
    }
    Ok(z.into_iter().map(|v| v as u64).collect())
}

/// One Gibbs sweep (Z, then λ, then ν). `n_min = ∞` is the exact sampler.
///
/// `counts` overrides the data counts (used to ramp data in during burn-in);
/// cells with zero count get all-zero Z.
pub fn gibbs_step(
    rng: &mut SeededRng,
    state: &MixtureState,
    data: &ContingencyData,
    counts: &[u64],
    priors: MixturePriors,
    n_min: f64,
    exec: Exec,
) -> Result<MixtureState> {
    priors.validate()?;
    let k = state.params.classes();
    ensure!(counts.len() == data.len(), Dimension, "count override has wrong length");
    let mut draws: Vec<Result<Vec<u64>>> = (0..data.len()).map(|_| Ok(Vec::new())).collect();
    fill_streams(exec, rng, &mut draws, |r, c| {
        if counts[c] == 0 {
            return Ok(vec![0; k]);
        }
        let probs = latent_class_probs(&state.params, &data.cells[c])?;
        approx_multinomial_draw(r, counts[c], &probs, n_min)
    });
    let z: Vec<Vec<u64>> = draws.into_iter().collect::<Result<_>>()?;

    let mut lambda = Vec::with_capacity(data.p);
    for j in 0..data.p {
        let mut conc = vec![vec![priors.lambda; data.d]; k];
        for (cell, zc) in data.cells.iter().zip(&z) {
            for h in 0..k {
                conc[h][cell[j] as usize] += zc[h] as f64;
            }
        }
        let mut per = Vec::with_capacity(k);
        for row in &conc {
            per.push(sample_dirichlet(rng, row)?);
        }
        lambda.push(per);
    }
    let mut conc_nu = vec![priors.nu; k];
    for zc in &z {
        for h in 0..k {
            conc_nu[h] += zc[h] as f64;
        }
    }
    let nu = sample_dirichlet(rng, &conc_nu)?;
    Ok(MixtureState {
        params: MixtureParams { nu, lambda },
        z,
    })
}

pub fn gibbs_step_exact(
    rng: &mut SeededRng,
    state: &MixtureState,
    data: &ContingencyData,
    priors: MixturePriors,
    exec: Exec,
) -> Result<MixtureState> {
    gibbs_step(rng, state, data, &data.counts, priors, f64::INFINITY, exec)
}

/// Multinomial log-pmf.
fn ln_multinomial(n: u64, z: &[u64], probs: &[f64]) -> f64 {
    let mut v = ln_factorial(n);
    for (&zi, &p) in z.iter().zip(probs) {
        v -= ln_factorial(zi);
        if zi > 0 {
            v += zi as f64 * p.ln();
        }
    }
    v
}

/// Exact TV between Multinomial(n, probs) and the law obtained by rounding the
/// first K−1 coordinates of its Gaussian approximation (the last coordinate
/// closes the sum).
pub fn tv_multinomial_vs_rounded_gaussian(n: u64, probs: &[f64]) -> Result<f64> {
    let k = probs.len();
    ensure!((2..=3).contains(&k), Size, "enumeration supports K in 2..=3, got {k}");
    ensure!((1..=200).contains(&n), Size, "enumeration supports n in 1..=200, got {n}");
    ensure!(probs.iter().all(|&p| p > 0.0 && p < 1.0), Domain, "probabilities must lie in (0,1)");
    ensure!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12, Domain, "probabilities must sum to 1");
    let nf = n as f64;
    let mu1 = nf * probs[0];
    let s1 = (nf * probs[0] * (1.0 - probs[0])).sqrt();
    let span = |mu: f64, s: f64| {
        let lo = ((mu - 12.0 * s).floor() as i64).min(0);
        let hi = ((mu + 12.0 * s).ceil() as i64).max(n as i64);
        (lo, hi)
    };
    let (lo1, hi1) = span(mu1, s1);
    let mut abs_diff = 0.0;
    let mut gauss_mass = 0.0;
    if k == 2 {
        for z in lo1..=hi1 {
            let g = normal_interval((z as f64 - 0.5 - mu1) / s1, (z as f64 + 0.5 - mu1) / s1);
            let m = if (0..=n as i64).contains(&z) {
                ln_multinomial(n, &[z as u64, n - z as u64], probs).exp()
            } else {
                0.0
            };
            abs_diff += (g - m).abs();
            gauss_mass += g;
        }
    } else {
        let mu2 = nf * probs[1];
        let s2 = (nf * probs[1] * (1.0 - probs[1])).sqrt();
        let rho = -nf * probs[0] * probs[1] / (s1 * s2);
        let cond_sd = s2 * (1.0 - rho * rho).sqrt();
        let (lo2, hi2) = span(mu2, s2);
        let rule = gauss_legendre(16);
        for z1 in lo1..=hi1 {
            let a1 = z1 as f64 - 0.5;
            for z2 in lo2..=hi2 {
                let a2 = z2 as f64 - 0.5;
                let g = integrate(
                    |w| {
                        let cm = mu2 + rho * s2 / s1 * (w - mu1);
                        normal_pdf((w - mu1) / s1) / s1 * normal_interval((a2 - cm) / cond_sd, (a2 + 1.0 - cm) / cond_sd)
                    },
                    a1,
                    a1 + 1.0,
                    2,
                    &rule,
                );
                let inside = z1 >= 0 && z2 >= 0 && z1 + z2 <= n as i64;
                let m = if inside {
                    let z3 = n - (z1 + z2) as u64;
                    ln_multinomial(n, &[z1 as u64, z2 as u64, z3], probs).exp()
                } else {
                    0.0
                };
                abs_diff += (g - m).abs();
                gauss_mass += g;
            }
        }
    }
    Ok(0.5 * (abs_diff + (1.0 - gauss_mass).max(0.0)))
}

/// Advisory per-cell sample size above which the Gaussian approximation on
/// the classes in `h_set` attains kernel error `epsilon`.
pub fn gaussnmin_threshold(nu_tilde: &[f64], h_set: &[usize], epsilon: f64, n_cells: usize, c_const: f64) -> Result<f64> {
    ensure!(
        nu_tilde.iter().all(|&v| v > 0.0 && v < 1.0),
        Domain,
        "class probabilities must lie strictly inside (0,1)"
    );
    ensure!(epsilon > 0.0 && n_cells >= 1 && c_const > 0.0, Domain, "need epsilon > 0, cells >= 1, C > 0");
    ensure!(h_set.iter().all(|&h| h < nu_tilde.len()), Dimension, "class index out of range");
    let last = *nu_tilde.last().expect("nonempty");
    let sum: f64 = h_set
        .iter()
        .map(|&h| {
            let v = nu_tilde[h];
            let larger = nu_tilde.iter().filter(|&&o| o > v).count() as f64;
            let p_h = larger * v;
            (1.0 - v) * (1.0 - 2.0 * v + 2.0 * v * v) * (1.0 + p_h / last) / (v * (1.0 - v)).sqrt()
        })
        .sum();
    Ok(c_const * c_const / (n_cells as f64 * epsilon * epsilon) * sum * sum)
}

/// Table drawn from the model together with the generating parameters.
#[derive(Debug, Clone)]
pub struct SimulatedTable {
    pub data: ContingencyData,
    pub truth: MixtureParams,
}

pub fn simulate_contingency(
    rng: &mut SeededRng,
    p: usize,
    d: usize,
    k: usize,
    n_obs: u64,
    priors: MixturePriors,
) -> Result<SimulatedTable> {
    ensure!(k >= 1, Domain, "need at least one latent class");
    ensure!(d >= 1 && d <= u32::MAX as usize, Domain, "bad category count {d}");
    let truth = MixtureParams::draw_prior(rng, p, d, k, priors)?;
    let per_class = sample_multinomial(rng, n_obs, &truth.nu)?;
    let cdfs: Vec<Vec<Vec<f64>>> = truth
        .lambda
        .iter()
        .map(|per| {
            per.iter()
                .map(|probs| {
                    probs
                        .iter()
                        .scan(0.0, |acc, &x| {
                            *acc += x;
                            Some(*acc)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut table: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    for (h, &count) in per_class.iter().enumerate() {
        for _ in 0..count {
            let cell: Vec<u32> = (0..p)
                .map(|j| {
                    let cdf = &cdfs[j][h];
                    let u = rng.random::<f64>() * cdf[d - 1];
                    cdf.partition_point(|&c| c <= u).min(d - 1) as u32
                })
                .collect();
            *table.entry(cell).or_default() += 1;
        }
    }
    let (cells, counts) = table.into_iter().unzip();
    Ok(SimulatedTable {
        data: ContingencyData::new(p, d, cells, counts)?,
        truth,
    })
}

/// Counts in effect at burn-in iteration `iter`: a tenth more data per tenth
/// of burn-in.
pub fn ramped_counts(data: &ContingencyData, iter: usize, burn_in: usize) -> Vec<u64> {
    if burn_in == 0 || iter >= burn_in {
        return data.counts.clone();
    }
    let phase = (10 * iter / burn_in) as u64;
    data.counts.iter().map(|&n| (phase + 1) * n / 10).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureRunConfig {
    pub k: usize,
    pub priors: MixturePriors,
    pub n_min: f64,
    pub burn_in: usize,
    pub samples: usize,
    /// Stop early once this many wall seconds have passed.
    pub max_seconds: Option<f64>,
}

/// Run a chain and record π at the tracked cells after burn-in.
pub fn run_chain(
    rng: &mut SeededRng,
    data: &ContingencyData,
    tracked: &[usize],
    cfg: &MixtureRunConfig,
    exec: Exec,
) -> Result<Trace> {
    ensure!(!tracked.is_empty(), Domain, "no cells tracked");
    ensure!(tracked.iter().all(|&c| c < data.len()), Dimension, "tracked cell out of range");
    ensure!(cfg.samples >= 2, Domain, "need at least 2 retained samples");
    let mut state = MixtureState::initial(rng, data, cfg.k, cfg.priors)?;
    let mut rows = Vec::with_capacity(cfg.samples * tracked.len());
    let mut secs = Vec::with_capacity(cfg.samples);
    let deadline = Deadline::new(cfg.max_seconds);
    for it in 0..cfg.burn_in + cfg.samples {
        if secs.len() >= 2 && deadline.expired() {
            break;
        }
        let start = std::time::Instant::now();
        let counts = ramped_counts(data, it, cfg.burn_in);
        state = gibbs_step(rng, &state, data, &counts, cfg.priors, cfg.n_min, exec)?;
        if it >= cfg.burn_in {
            rows.extend(tracked.iter().map(|&c| state.params.cell_prob(&data.cells[c])));
            secs.push(start.elapsed().as_secs_f64());
        }
    }
    let names = tracked.iter().map(|&c| cell_name(&data.cells[c])).collect();
    Trace::new(names, rows, rng.seed())?.with_step_seconds(secs)
}

pub fn cell_name(cell: &[u32]) -> String {
    let parts: Vec<String> = cell.iter().map(|c| c.to_string()).collect();
    format!("pi_{}", parts.join("_"))
}

impl std::str::FromStr for ContingencyData {
    type Err = Error;

    /// Parses `c_1,…,c_p,count` rows after a header line; `d` is one more
    /// than the largest category seen.
    fn from_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut cells = Vec::new();
        let mut counts = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            ensure!(rec.len() >= 2, Data, "contingency rows need at least one index and a count");
            let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| Error::Data(format!("bad integer '{s}'")));
            let cell = rec.iter().take(rec.len() - 1).map(|s| parse(s).map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
            let n = parse(&rec[rec.len() - 1])?;
            if n > 0 {
                cells.push(cell);
                counts.push(n);
            }
        }
        ensure!(!cells.is_empty(), Data, "no positive cells");
        let p = cells[0].len();
        let d = cells.iter().flatten().copied().max().unwrap_or(0) as usize + 1;
        ContingencyData::new(p, d, cells, counts)
    }
}
