//! Experiment configuration and runners behind the command-line front end.
//! Every runner is a pure function of its configuration and seed; it returns
//! named CSV tables plus a separate timing table.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{
    l2_bound_approx, l2_bound_exact, mixing_time_bound, stationary_bias_bound, tv_bound_approx, tv_bound_exact,
    BoundInputs, ErgodicityParams,
};
use crate::compminimax::{curve_epsilon_vs_budget, log_tau_grid, CompminimaxProblem, CurveRow, Discrepancy, SpeedupFn};
use crate::diagnostics::{effective_sample_size, geweke_z, phi_max, w1_kernel_distance, Trace};
use crate::error::{ensure, Error, Result};
use crate::finite_chain::{
    cesaro_tv, doeblin_alpha, ergodic_average_law, exact_autocovariance, invariant_measure, kernel_tv_sup,
    oscillation, tv_distance, FiniteKernel, FiniteMeasure,
};
use crate::io::{fmt_f64, read_xy, trace_from_table, trace_table, Table};
use crate::par::Exec;
use crate::rng::{SeededRng, ALGORITHM};
use crate::{gp, logistic, mixture};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub threads: Option<usize>,
    /// Overrides the retained-sample count of every chain.
    pub budget_steps: Option<usize>,
    /// Wall-clock limit per chain.
    pub budget_seconds: Option<f64>,
    pub bounds: BoundsConfig,
    pub mixtimes: MixtimesConfig,
    pub compminimax: CompminimaxConfig,
    pub verify_finite: FiniteConfig,
    pub mixture: MixtureConfig,
    pub logistic: LogisticConfig,
    pub gp: GpConfig,
    pub diagnose: DiagnoseConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory
    /// and thread count since neither changes the results.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self {
            out: None,
            threads: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex(&Sha256::digest(&json)))
    }

    fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required for stochastic experiments".into()))
    }

    fn samples(&self, default: usize) -> usize {
        self.budget_steps.unwrap_or(default)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub tv0: f64,
    pub fstar: f64,
    pub t_max: u64,
    pub per_decade: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon: 0.01,
            tv0: 1.0,
            fstar: 1.0,
            t_max: 10_000,
            per_decade: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtimesConfig {
    pub alphas: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl Default for MixtimesConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.01, 0.001, 1e-4],
            deltas: vec![1e-2, 1e-3, 1e-4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompminimaxConfig {
    pub discrepancy: String,
    pub alphas: Vec<f64>,
    pub forms: Vec<String>,
    pub tau_max: u64,
    pub per_decade: usize,
    pub grid: usize,
    /// Defaults to 1 for TV and 1e-4 for L2.
    pub tv0: Option<f64>,
    pub fstar: f64,
}

impl Default for CompminimaxConfig {
    fn default() -> Self {
        Self {
            discrepancy: "tv".into(),
            alphas: vec![0.1],
            forms: ["logarithmic", "linear", "quadratic", "exponential"].map(String::from).to_vec(),
            tau_max: 100_000,
            per_decade: 10,
            grid: crate::compminimax::DEFAULT_GRID,
            tv0: None,
            fstar: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiniteConfig {
    /// Extra kernel checked against the exact TV bound.
    pub kernel_file: Option<String>,
    pub t_max: usize,
    pub random_kernels: usize,
}

impl Default for FiniteConfig {
    fn default() -> Self {
        Self {
            kernel_file: None,
            t_max: 200,
            random_kernels: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    /// CSV of `c1,…,cp,count` rows; simulated when absent.
    pub data_file: Option<String>,
    pub p: usize,
    pub d: usize,
    pub true_classes: usize,
    pub n_obs: u64,
    pub classes: usize,
    pub prior_lambda: f64,
    pub prior_nu: f64,
    pub n_min: Vec<f64>,
    pub tracked: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub k_max: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            data_file: None,
            p: 8,
            d: 3,
            true_classes: 3,
            n_obs: 100_000,
            classes: 3,
            prior_lambda: 1.0,
            prior_nu: 1.0,
            n_min: vec![1000.0, 100.0],
            tracked: 20,
            burn_in: 100,
            samples: 500,
            k_max: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    /// CSV of features with the 0/1 response last; simulated when absent.
    pub data_file: Option<String>,
    pub n: usize,
    pub beta: Vec<f64>,
    pub prior_variance: f64,
    pub subset_sizes: Vec<usize>,
    /// Adds an adaptive chain targeting this kernel error.
    pub adaptive_epsilon: Option<f64>,
    pub adaptive_c: f64,
    pub adaptive_m: f64,
    pub burn_in: usize,
    pub samples: usize,
    pub audit_every: usize,
    pub k_max: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            data_file: None,
            n: 2000,
            beta: vec![1.0, -0.5, 0.25, 0.75, -1.0],
            prior_variance: 100.0,
            subset_sizes: vec![200, 1000, 2000],
            adaptive_epsilon: None,
            adaptive_c: 1.0,
            adaptive_m: 2.0,
            burn_in: 200,
            samples: 1000,
            audit_every: 10,
            k_max: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    /// CSV of inputs with the response last; the final `n_test` rows are held
    /// out. Simulated when absent.
    pub data_file: Option<String>,
    pub design: String,
    pub n: usize,
    pub n_test: usize,
    pub sigma2: f64,
    pub tau2: f64,
    /// Index into the φ grid used to simulate data.
    pub true_phi_index: usize,
    pub grid_size: usize,
    pub deltas: Vec<f64>,
    pub d_prob: u32,
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub burn_in: usize,
    pub samples: usize,
    pub proposal_scale: f64,
    pub adapt: bool,
    pub init_sigma2: f64,
    pub init_tau2: f64,
    pub init_phi_index: usize,
    pub budgets: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            data_file: None,
            design: "normal3".into(),
            n: 200,
            n_test: 100,
            sigma2: 1e-4,
            tau2: 1.0,
            true_phi_index: 3,
            grid_size: 10,
            deltas: vec![0.05, 0.001],
            d_prob: gp::DEFAULT_D_PROB,
            a_tau: 1.0,
            b_tau: 1e-4,
            a_sigma: 1.0,
            b_sigma: 1e-4,
            burn_in: 0,
            samples: 4000,
            proposal_scale: 0.2,
            adapt: false,
            init_sigma2: 5.0,
            init_tau2: 0.2,
            init_phi_index: 0,
            budgets: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub trace_file: Option<String>,
    /// Second trace for the kernel distance.
    pub reference_file: Option<String>,
    pub k_max: usize,
    pub first_frac: f64,
    pub last_frac: f64,
    pub phi: f64,
    pub sigma: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            trace_file: None,
            reference_file: None,
            k_max: 20,
            first_frac: 0.1,
            last_frac: 0.5,
            phi: 1.0,
            sigma: 1.0,
        }
    }
}

/// Output of one experiment.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub tables: Vec<(String, Table)>,
    pub timing: Table,
    /// False when a verification suite found a violation.
    pub passed: bool,
}

impl Artifacts {
    fn new() -> Self {
        Self {
            tables: Vec::new(),
            timing: Table::new(&["cell", "seconds"]),
            passed: true,
        }
    }

    fn time(&mut self, cell: &str, start: Instant) {
        self.record(cell, start.elapsed().as_secs_f64());
    }

    fn record(&mut self, cell: &str, seconds: f64) {
        let _ = self.timing.push(vec![cell.to_string(), fmt_f64(seconds)]);
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Manifest with the configuration hash, seed, versions and payload digests.
pub fn manifest(experiment: &str, cfg: &ExperimentConfig, art: &Artifacts) -> Result<serde_json::Value> {
    let mut files = Vec::new();
    for (name, t) in &art.tables {
        files.push(serde_json::json!({
            "name": name,
            "sha256": hex(&Sha256::digest(t.to_csv_string()?.as_bytes())),
        }));
    }
    Ok(serde_json::json!({
        "experiment": experiment,
        "seed": cfg.seed,
        "config_sha256": cfg.hash()?,
        "versions": {
            "amcmc": env!("CARGO_PKG_VERSION"),
            "rng": ALGORITHM,
        },
        "passed": art.passed,
        "files": files,
    }))
}

pub fn run_bounds(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let b = &cfg.bounds;
    let start = Instant::now();
    let params = ErgodicityParams::new(b.alpha, b.epsilon)?;
    let mut t = Table::new(&["t", "tv_exact", "tv_approx", "l2_exact", "l2_approx", "stationary_bias"]);
    for step in log_tau_grid(b.t_max, b.per_decade) {
        let inputs = BoundInputs::new(step, b.tv0, b.fstar)?;
        t.push(vec![
            step.to_string(),
            fmt_f64(tv_bound_exact(b.alpha, inputs)?),
            fmt_f64(tv_bound_approx(params, step, b.tv0)?),
            fmt_f64(l2_bound_exact(b.alpha, inputs)?),
            fmt_f64(l2_bound_approx(params, step, b.tv0, b.fstar)?),
            fmt_f64(stationary_bias_bound(params)),
        ])?;
    }
    let mut art = Artifacts::new();
    art.tables.push(("bounds.csv".into(), t));
    art.time("bounds", start);
    Ok(art)
}

pub fn run_mixtimes(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let start = Instant::now();
    let mut t = Table::new(&["alpha", "delta", "mixing_time"]);
    for &a in &cfg.mixtimes.alphas {
        for &d in &cfg.mixtimes.deltas {
            t.push_f64(&[a, d, mixing_time_bound(a, d)?])?;
        }
    }
    let mut art = Artifacts::new();
    art.tables.push(("mixtimes.csv".into(), t));
    art.time("mixtimes", start);
    Ok(art)
}

pub fn run_compminimax(cfg: &ExperimentConfig, exec: Exec) -> Result<Artifacts> {
    let c = &cfg.compminimax;
    let disc: Discrepancy = c.discrepancy.parse()?;
    let taus = log_tau_grid(c.tau_max, c.per_decade);
    let mut art = Artifacts::new();
    let mut t = Table::new(&CurveRow::HEADER);
    for &alpha in &c.alphas {
        let mut problem = CompminimaxProblem::with_defaults(disc, alpha, c.tau_max);
        problem.grid = c.grid;
        problem.fstar = c.fstar;
        if let Some(tv0) = c.tv0 {
            problem.tv0 = tv0;
        }
        for form in &c.forms {
            let start = Instant::now();
            let speedup = SpeedupFn::new(form.parse()?, alpha)?;
            for row in curve_epsilon_vs_budget(&problem, &speedup, &taus, exec)? {
                t.push(vec![
                    row.tau_max.to_string(),
                    row.form.name().to_string(),
                    fmt_f64(row.alpha),
                    fmt_f64(row.eps_c),
                    row.t_opt.to_string(),
                    fmt_f64(row.bound_at_opt),
                ])?;
            }
            art.time(&format!("{form}@{alpha}"), start);
        }
    }
    art.tables.push(("compminimax.csv".into(), t));
    Ok(art)
}

/// One line of the finite-chain verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest violation measure observed (error or ratio, see `detail`).
    pub worst: f64,
    pub detail: String,
}

fn check(name: &str, worst: f64, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        worst,
        detail: detail.into(),
    }
}

/// Exact checks of the TV/L2/covariance bounds on small kernels.
pub fn finite_suite(cfg: &FiniteConfig, seed: u64, extra: Option<&FiniteKernel>) -> Result<Vec<Check>> {
    let t_max = cfg.t_max.max(1);
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for a in [0.05, 0.25, 0.45] {
        let p = FiniteKernel::two_state(a)?;
        for gamma in [0.0, 0.2] {
            let nu = FiniteMeasure::new(vec![gamma, 1.0 - gamma])?;
            let tv0 = (0.5f64 - gamma).abs();
            for t in 1..=t_max {
                let bound = tv_bound_exact(2.0 * a, BoundInputs::new(t as u64, tv0, 1.0)?)?;
                worst = worst.max((cesaro_tv(&nu, &p, t)? - bound).abs());
            }
        }
    }
    out.push(check("tv_sharpness_two_state", worst, worst <= 1e-12, "max |cesaro_tv - tv_bound_exact|"));

    let a = 0.25;
    let mut worst_gap: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    let mut worst_alpha: f64 = 0.0;
    let mut worst_sup: f64 = 0.0;
    let pi = invariant_measure(&FiniteKernel::two_state(a)?)?;
    for eps in [0.01, 0.05, 0.1] {
        let tilted = FiniteKernel::two_state_tilted(a, eps)?;
        let pi_eps = invariant_measure(&tilted)?;
        worst_gap = worst_gap.max((tv_distance(pi.weights(), pi_eps.weights()) - eps / (2.0 * a)).abs());
        worst_sup = worst_sup.max((kernel_tv_sup(&FiniteKernel::two_state(a)?, &tilted)? - eps).abs());
        let shifted = FiniteKernel::two_state(a - eps)?;
        let alpha_eps = 2.0 * a - 2.0 * eps;
        worst_alpha = worst_alpha.max((doeblin_alpha(&shifted) - alpha_eps).abs());
        let nu = FiniteMeasure::point(2, 1);
        for t in 1..=t_max {
            let term = tv_bound_exact(alpha_eps, BoundInputs::new(t as u64, 0.5, 1.0)?)?;
            worst_shift = worst_shift.max((cesaro_tv(&nu, &shifted, t)? - term).abs());
        }
    }
    out.push(check("stationary_gap", worst_gap, worst_gap <= 1e-12, "max |TV(pi, pi_eps) - eps/(2a)|"));
    out.push(check("perturbation_sup_tv", worst_sup, worst_sup <= 1e-12, "max |sup row TV - eps|"));
    out.push(check("shifted_doeblin", worst_alpha, worst_alpha <= 1e-12, "max |alpha(shifted) - (alpha - 2 eps)|"));
    out.push(check("shifted_cesaro_term", worst_shift, worst_shift <= 1e-12, "max |cesaro_tv - Cesaro term at alpha - 2 eps|"));

    let p = FiniteKernel::two_state(a)?;
    let f = [-1.0, 1.0];
    let nu = FiniteMeasure::point(2, 1);
    let mut worst_ratio: f64 = 0.0;
    for t in 1..=t_max.min(crate::finite_chain::MAX_DP_STEPS) {
        let mse = ergodic_average_law(&p, &f, &nu, t)?.mse(pi.expect(&f));
        let bound = l2_bound_exact(2.0 * a, BoundInputs::new(t as u64, 0.5, 1.0)?)?;
        worst_ratio = worst_ratio.max(mse / bound);
    }
    out.push(check("l2_bound_dominates_dp", worst_ratio, worst_ratio <= 1.0 + 1e-12, "max exact MSE / l2_bound_exact"));

    let mut worst_eq: f64 = 0.0;
    for k in 0..=20 {
        let c = exact_autocovariance(&p, &f, &pi, k)?;
        worst_eq = worst_eq.max((c - (1.0 - 2.0 * a).powi(k as i32)).abs());
    }
    out.push(check("covariance_equality_two_state", worst_eq, worst_eq <= 1e-12, "max |cov_k - (1-alpha)^k|"));

    let mut rng = SeededRng::new(seed, 0xF1);
    let mut worst_cov: f64 = 0.0;
    for _ in 0..cfg.random_kernels {
        let k = 3 + (rand::Rng::random::<u32>(&mut rng) % 3) as usize;
        let q = FiniteKernel::random(&mut rng, k)?;
        let alpha = doeblin_alpha(&q);
        let pi_q = invariant_measure(&q)?;
        let g: Vec<f64> = (0..k).map(|_| crate::distributions::standard_normal(&mut rng)).collect();
        let osc = oscillation(&g);
        for lag in 0..=10 {
            let c = exact_autocovariance(&q, &g, &pi_q, lag)?.abs();
            let bound = (1.0 - alpha).powi(lag as i32) * osc * osc;
            if bound > 0.0 {
                worst_cov = worst_cov.max(c / bound);
            }
        }
    }
    out.push(check(
        "covariance_bound_random_kernels",
        worst_cov,
        worst_cov <= 1.0 + 1e-12,
        "max |cov_k| / ((1-alpha)^k osc(f)^2)",
    ));

    if let Some(q) = extra {
        let alpha = doeblin_alpha(q);
        let pi_q = invariant_measure(q)?;
        let mut worst_x: f64 = 0.0;
        for s in 0..q.states() {
            let nu = FiniteMeasure::point(q.states(), s);
            let tv0 = tv_distance(nu.weights(), pi_q.weights());
            for t in 1..=t_max {
                let excess = cesaro_tv(&nu, q, t)? - tv_bound_exact(alpha, BoundInputs::new(t as u64, tv0, 1.0)?)?;
                worst_x = worst_x.max(excess);
            }
        }
        out.push(check("kernel_file_tv_bound", worst_x, worst_x <= 1e-12, "max cesaro_tv - tv_bound_exact"));
    }
    Ok(out)
}

pub fn run_verify_finite(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let start = Instant::now();
    let extra = match &cfg.verify_finite.kernel_file {
        Some(path) => Some(FiniteKernel::parse(&std::fs::read_to_string(path)?)?),
        None => None,
    };
    let checks = finite_suite(&cfg.verify_finite, cfg.seed.unwrap_or(0), extra.as_ref())?;
    let mut t = Table::new(&["check", "passed", "worst", "detail"]);
    let mut art = Artifacts::new();
    for c in &checks {
        art.passed &= c.passed;
        t.push(vec![c.name.clone(), c.passed.to_string(), fmt_f64(c.worst), c.detail.clone()])?;
    }
    art.tables.push(("verify_finite.csv".into(), t));
    art.time("verify-finite", start);
    Ok(art)
}

fn summarize(trace: &Trace, k_max: usize) -> Result<(Option<f64>, f64)> {
    let phi = phi_max(trace, k_max)?.phi_max;
    let ess = effective_sample_size(trace).ess;
    Ok((phi, ess.iter().sum::<f64>() / ess.len() as f64))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn mean_step_seconds(trace: &Trace) -> f64 {
    trace
        .step_seconds()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .unwrap_or(f64::NAN)
}

pub fn run_mixture(cfg: &ExperimentConfig, exec: Exec) -> Result<Artifacts> {
    let seed = cfg.require_seed()?;
    let m = &cfg.mixture;
    let priors = mixture::MixturePriors {
        lambda: m.prior_lambda,
        nu: m.prior_nu,
    };
    let start = Instant::now();
    let data = match &m.data_file {
        Some(path) => std::fs::read_to_string(path)?.parse::<mixture::ContingencyData>()?,
        None => {
            let mut r = SeededRng::new(seed, 0);
            mixture::simulate_contingency(&mut r, m.p, m.d, m.true_classes, m.n_obs, priors)?.data
        }
    };
    let tracked = data.largest_cells(m.tracked);
    let mut levels = vec![f64::INFINITY];
    levels.extend(m.n_min.iter().copied());
    let samples = cfg.samples(m.samples);
    let runs = exec.map_slice(&levels, |&n_min| {
        let run_cfg = mixture::MixtureRunConfig {
            k: m.classes,
            priors,
            n_min,
            burn_in: m.burn_in,
            samples,
            max_seconds: cfg.budget_seconds,
        };
        let mut r = SeededRng::new(seed, 1);
        mixture::run_chain(&mut r, &data, &tracked, &run_cfg, Exec::Sequential)
    });
    let mut art = Artifacts::new();
    art.time("simulate", start);
    let traces = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let exact_rows = traces[0].rows();
    let mut summary = Table::new(&["n_min", "phi_max", "mean_ess", "w1_vs_exact"]);
    for (n_min, tr) in levels.iter().zip(&traces) {
        let (phi, ess) = summarize(tr, m.k_max)?;
        let w1 = w1_kernel_distance(&tr.rows(), &exact_rows, 1.0, 1.0, exec)?;
        let label = label_n_min(*n_min);
        summary.push(vec![label.clone(), opt(phi), fmt_f64(ess), fmt_f64(w1)])?;
        art.record(&format!("step:{label}"), mean_step_seconds(tr));
        art.tables.push((format!("mixture_trace_{label}.csv"), trace_table(tr)?));
    }
    art.tables.insert(0, ("mixture_summary.csv".into(), summary));
    art.time("chains", start);
    Ok(art)
}

fn label_n_min(v: f64) -> String {
    if v.is_infinite() {
        "exact".into()
    } else {
        fmt_f64(v)
    }
}

/// Logistic data from the configured file or the seeded simulator.
pub fn logistic_data(cfg: &LogisticConfig, seed: u64) -> Result<logistic::LogisticData> {
    match &cfg.data_file {
        Some(path) => {
            let (xs, ys) = read_xy(&std::fs::read_to_string(path)?)?;
            let p = xs[0].len();
            let mut x = DMatrix::from_fn(xs.len(), p, |i, j| xs[i][j]);
            logistic::standardize_columns(&mut x)?;
            let y = ys
                .iter()
                .map(|&v| match v {
                    0.0 => Ok(0u8),
                    1.0 => Ok(1u8),
                    _ => Err(Error::Data(format!("response {v} is not 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            logistic::LogisticData::new(x, y)
        }
        None => logistic::LogisticData::synthetic(&mut SeededRng::new(seed, 0), cfg.n, &cfg.beta),
    }
}

pub fn run_logistic(cfg: &ExperimentConfig, exec: Exec) -> Result<Artifacts> {
    let seed = cfg.require_seed()?;
    let l = &cfg.logistic;
    let start = Instant::now();
    let data = logistic_data(l, seed)?;
    let prior = logistic::GaussianPrior::isotropic(data.p(), l.prior_variance)?;
    let n = data.n();
    let mut policies: Vec<(String, logistic::SubsetPolicy)> =
        vec![("exact".into(), logistic::SubsetPolicy::Fixed(n))];
    for &m in &l.subset_sizes {
        ensure!(m <= n, Config, "subset size {m} exceeds N = {n}");
        policies.push((m.to_string(), logistic::SubsetPolicy::Fixed(m)));
    }
    if let Some(eps) = l.adaptive_epsilon {
        policies.push((
            "adaptive".into(),
            logistic::SubsetPolicy::Adaptive {
                epsilon: eps,
                constants: logistic::AdaptiveConstants {
                    c: l.adaptive_c,
                    m: l.adaptive_m,
                },
                initial: n,
            },
        ));
    }
    let run_cfg = logistic::LogisticRunConfig {
        burn_in: l.burn_in,
        samples: cfg.samples(l.samples),
        audit_every: (l.audit_every > 0).then_some(l.audit_every),
        max_seconds: cfg.budget_seconds,
    };
    let runs = exec.map_slice(&policies, |(_, policy)| {
        let mut r = SeededRng::new(seed, 1);
        logistic::run_chain(&mut r, &data, &prior, policy, &run_cfg, Exec::Sequential)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut art = Artifacts::new();
    art.time("chains", start);
    let exact = &runs[0].trace;
    let exact_mean = exact.column_means();
    let exact_rows = exact.rows();
    let mut summary = Table::new(&[
        "subset",
        "rmse_vs_exact",
        "w1_vs_exact",
        "phi_max",
        "mean_ess",
        "median_tv_bound",
        "mean_subset_size",
    ]);
    let mut eps_table = Table::new(&["subset", "audit", "tv_bound"]);
    for ((label, _), run) in policies.iter().zip(&runs) {
        let mean = run.trace.column_means();
        let rmse = (mean.iter().zip(&exact_mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / mean.len() as f64).sqrt();
        let w1 = w1_kernel_distance(&run.trace.rows(), &exact_rows, 1.0, 1.0, exec)?;
        let (phi, ess) = summarize(&run.trace, l.k_max)?;
        let mut sorted = run.epsilon_trace.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted.get(sorted.len() / 2).copied();
        let size = run.subset_sizes.iter().sum::<usize>() as f64 / run.subset_sizes.len() as f64;
        summary.push(vec![
            label.clone(),
            fmt_f64(rmse),
            fmt_f64(w1),
            opt(phi),
            fmt_f64(ess),
            opt(median),
            fmt_f64(size),
        ])?;
        art.record(&format!("step:{label}"), mean_step_seconds(&run.trace));
        for (i, e) in run.epsilon_trace.iter().enumerate() {
            eps_table.push(vec![label.clone(), i.to_string(), fmt_f64(*e)])?;
        }
        art.tables.push((format!("logistic_trace_{label}.csv"), trace_table(&run.trace)?));
    }
    art.tables.insert(0, ("logistic_epsilon.csv".into(), eps_table));
    art.tables.insert(0, ("logistic_summary.csv".into(), summary));
    Ok(art)
}

/// Training model, held-out inputs and held-out truth.
pub struct GpProblem {
    pub model: gp::GPModel,
    pub test_x: DMatrix<f64>,
    pub test_truth: DVector<f64>,
}

pub fn gp_problem(cfg: &GpConfig, seed: u64) -> Result<GpProblem> {
    let priors = gp::GPPriors {
        a_tau: cfg.a_tau,
        b_tau: cfg.b_tau,
        a_sigma: cfg.a_sigma,
        b_sigma: cfg.b_sigma,
    };
    let (x, y, test_x, test_truth) = match &cfg.data_file {
        Some(path) => {
            let (xs, ys) = read_xy(&std::fs::read_to_string(path)?)?;
            ensure!(xs.len() > cfg.n_test + 1, Data, "not enough rows for {} held-out points", cfg.n_test);
            let n = xs.len() - cfg.n_test;
            let q = xs[0].len();
            let x = DMatrix::from_fn(n, q, |i, j| xs[i][j]);
            let tx = DMatrix::from_fn(cfg.n_test, q, |i, j| xs[n + i][j]);
            (x, DVector::from_column_slice(&ys[..n]), tx, DVector::from_column_slice(&ys[n..]))
        }
        None => {
            let mut r = SeededRng::new(seed, 0);
            let design: gp::Design = cfg.design.parse()?;
            let all = gp::design_points(&mut r, design, cfg.n + cfg.n_test);
            let grid = gp::phi_grid(&all, cfg.grid_size)?;
            ensure!(cfg.true_phi_index < grid.len(), Config, "true_phi_index out of range");
            let (f, y) = gp::synthetic_gp(&mut r, &all, cfg.sigma2, cfg.tau2, grid[cfg.true_phi_index])?;
            (
                all.rows(0, cfg.n).into_owned(),
                y.rows(0, cfg.n).into_owned(),
                all.rows(cfg.n, cfg.n_test).into_owned(),
                f.rows(cfg.n, cfg.n_test).into_owned(),
            )
        }
    };
    let grid = gp::phi_grid(&x, cfg.grid_size)?;
    Ok(GpProblem {
        model: gp::GPModel::new(x, y, grid, priors)?,
        test_x,
        test_truth,
    })
}

/// Chains at each δ from a shared start; returns the samplers and runs.
pub fn gp_chains(
    cfg: &GpConfig,
    problem: &GpProblem,
    seed: u64,
    samples: usize,
    max_seconds: Option<f64>,
    exec: Exec,
) -> Result<Vec<(gp::GPSampler, gp::GPRun)>> {
    ensure!(cfg.init_phi_index < problem.model.phi_grid().len(), Config, "init_phi_index out of range");
    let init = gp::GPState {
        sigma2: cfg.init_sigma2,
        tau2: cfg.init_tau2,
        phi_index: cfg.init_phi_index,
    };
    let run_cfg = gp::GPRunConfig {
        burn_in: cfg.burn_in,
        samples,
        proposal_scale: cfg.proposal_scale,
        target_accept: cfg.adapt.then_some(0.3),
        init,
        max_seconds,
    };
    let indices: Vec<usize> = (0..cfg.deltas.len()).collect();
    exec.map_slice(&indices, |&k| {
        let mut fr = SeededRng::new(seed, 100 + k as u64);
        let sampler = gp::GPSampler::new(&mut fr, problem.model.clone(), cfg.deltas[k], cfg.d_prob, Exec::Sequential)?;
        let mut r = SeededRng::new(seed, 200);
        let run = gp::run_chain(&mut r, &sampler, &run_cfg, Some(&problem.test_x))?;
        Ok((sampler, run))
    })
    .into_iter()
    .collect()
}

/// Log-spaced budgets over three decades ending at `max`.
pub fn budget_grid(max: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count)
        .map(|i| max * 10f64.powf(-3.0 + 3.0 * i as f64 / (count - 1) as f64))
        .collect()
}

pub fn run_gp(cfg: &ExperimentConfig, exec: Exec) -> Result<Artifacts> {
    let seed = cfg.require_seed()?;
    let g = &cfg.gp;
    ensure!(!g.deltas.is_empty(), Config, "no deltas given");
    let start = Instant::now();
    let problem = gp_problem(g, seed)?;
    let mut art = Artifacts::new();
    art.time("simulate", start);
    let start = Instant::now();
    let chains = gp_chains(g, &problem, seed, cfg.samples(g.samples), cfg.budget_seconds, exec)?;
    art.time("chains", start);
    let max_work = chains
        .iter()
        .map(|(_, r)| r.work.last().copied().unwrap_or(0.0))
        .fold(0.0, f64::max);
    let budgets = budget_grid(max_work, g.budgets);
    let mut rmse = Table::new(&["delta", "budget", "rmse"]);
    let mut factors = Table::new(&["delta", "phi", "rank", "residual", "estimate"]);
    let mut summary = Table::new(&["delta", "acceptance", "mean_sigma2", "mean_tau2", "mean_phi", "final_rmse"]);
    for (&delta, (sampler, run)) in g.deltas.iter().zip(&chains) {
        for (b, v) in budgets.iter().zip(gp::rmse_at_budgets(run, &problem.test_truth, &budgets)?) {
            rmse.push(vec![fmt_f64(delta), fmt_f64(*b), opt(v)])?;
        }
        for (l, phi) in problem.model.phi_grid().iter().enumerate() {
            let f = sampler.cache(l).factor();
            factors.push(vec![
                fmt_f64(delta),
                fmt_f64(*phi),
                f.rank().to_string(),
                opt(f.residual()),
                fmt_f64(f.estimate()),
            ])?;
        }
        let means = run.trace.column_means();
        let last = gp::rmse_at_budgets(run, &problem.test_truth, &[f64::INFINITY])?[0];
        summary.push(vec![
            fmt_f64(delta),
            fmt_f64(run.acceptance),
            fmt_f64(means[0]),
            fmt_f64(means[1]),
            fmt_f64(means[2]),
            opt(last),
        ])?;
        art.tables.push((format!("gp_trace_{}.csv", fmt_f64(delta)), trace_table(&run.trace)?));
    }
    art.tables.insert(0, ("gp_factors.csv".into(), factors));
    art.tables.insert(0, ("gp_rmse.csv".into(), rmse));
    art.tables.insert(0, ("gp_summary.csv".into(), summary));
    Ok(art)
}

pub fn run_diagnose(cfg: &ExperimentConfig, exec: Exec) -> Result<Artifacts> {
    let d = &cfg.diagnose;
    let path = d
        .trace_file
        .as_ref()
        .ok_or_else(|| Error::Config("diagnose needs a trace file".into()))?;
    let start = Instant::now();
    let trace = trace_from_table(&Table::read(std::path::Path::new(path))?, cfg.seed.unwrap_or(0))?;
    let phi = phi_max(&trace, d.k_max)?;
    let ess = effective_sample_size(&trace);
    let z = geweke_z(&trace, d.first_frac, d.last_frac)?;
    let means = trace.column_means();
    let mut t = Table::new(&["coordinate", "mean", "ess", "ess_constant", "geweke_z"]);
    for j in 0..trace.dim() {
        t.push(vec![
            trace.names()[j].clone(),
            fmt_f64(means[j]),
            fmt_f64(ess.ess[j]),
            ess.constant[j].to_string(),
            fmt_f64(z[j]),
        ])?;
    }
    let mut overall = Table::new(&["statistic", "value"]);
    overall.push(vec!["phi_max".into(), opt(phi.phi_max)])?;
    overall.push(vec!["phi_threshold".into(), fmt_f64(phi.threshold)])?;
    overall.push(vec!["samples".into(), trace.len().to_string()])?;
    if let Some(r) = &d.reference_file {
        let other = trace_from_table(&Table::read(std::path::Path::new(r))?, 0)?;
        let w1 = w1_kernel_distance(&trace.rows(), &other.rows(), d.phi, d.sigma, exec)?;
        overall.push(vec!["w1_kernel_distance".into(), fmt_f64(w1)])?;
    }
    let mut art = Artifacts::new();
    art.tables.push(("diagnose_coordinates.csv".into(), t));
    art.tables.push(("diagnose_summary.csv".into(), overall));
    art.time("diagnose", start);
    Ok(art)
}
