//! Budget-optimal approximation error.
//!
//! Given a budget of `tau_max` exact-kernel steps, an approximate kernel with
//! error ε runs `floor(s(ε)·tau_max)` steps. The optimal ε minimizes the
//! resulting error bound; it is found by grid search.

use std::fmt;
use std::str::FromStr;

use crate::bounds::{l2_bound_approx, tv_bound_approx, ErgodicityParams};
use crate::error::{ensure, Error, Result};
use crate::par::Exec;

/// Shape of the speedup curve between s(0)=1 and s(α/2)=100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeedupForm {
    /// s ≡ 1: approximation buys nothing.
    Constant,
    Logarithmic,
    Linear,
    /// Concave quadratic 1 + 99·u(2−u).
    Quadratic,
    Exponential,
}

impl SpeedupForm {
    pub const PAPER_FORMS: [SpeedupForm; 4] = [
        SpeedupForm::Logarithmic,
        SpeedupForm::Linear,
        SpeedupForm::Quadratic,
        SpeedupForm::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpeedupForm::Constant => "constant",
            SpeedupForm::Logarithmic => "logarithmic",
            SpeedupForm::Linear => "linear",
            SpeedupForm::Quadratic => "quadratic",
            SpeedupForm::Exponential => "exponential",
        }
    }
}

impl fmt::Display for SpeedupForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpeedupForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => SpeedupForm::Constant,
            "logarithmic" | "log" => SpeedupForm::Logarithmic,
            "linear" => SpeedupForm::Linear,
            "quadratic" => SpeedupForm::Quadratic,
            "exponential" | "exp" => SpeedupForm::Exponential,
            other => return Err(Error::Config(format!("unknown speedup form '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupFn {
    pub form: SpeedupForm,
    alpha: f64,
}

impl SpeedupFn {
    pub fn new(form: SpeedupForm, alpha: f64) -> Result<Self> {
        ensure!(alpha > 0.0 && alpha < 1.0, Domain, "alpha {alpha} must lie in (0,1)");
        Ok(Self { form, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, eps: f64) -> Result<f64> {
        let half = self.alpha / 2.0;
        ensure!((0.0..=half).contains(&eps), Domain, "eps {eps} outside [0, {half}]");
        let u = 2.0 * eps / self.alpha;
        Ok(match self.form {
            SpeedupForm::Constant => 1.0,
            SpeedupForm::Logarithmic => 1.0 + 99.0 * u.ln_1p() / std::f64::consts::LN_2,
            SpeedupForm::Linear => 1.0 + 99.0 * u,
            SpeedupForm::Quadratic => 1.0 + 99.0 * u * (2.0 - u),
            SpeedupForm::Exponential => 100f64.powf(u),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Discrepancy {
    Tv,
    L2,
}

impl Discrepancy {
    pub fn name(self) -> &'static str {
        match self {
            Discrepancy::Tv => "tv",
            Discrepancy::L2 => "l2",
        }
    }
}

impl FromStr for Discrepancy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" | "TV" => Ok(Discrepancy::Tv),
            "l2" | "L2" => Ok(Discrepancy::L2),
            other => Err(Error::Config(format!("unknown discrepancy '{other}'"))),
        }
    }
}

pub const DEFAULT_GRID: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompminimaxProblem {
    pub discrepancy: Discrepancy,
    pub alpha: f64,
    pub tau_max: u64,
    /// Initial TV distance of both chains to their stationary laws.
    pub tv0: f64,
    pub fstar: f64,
    pub grid: usize,
}

impl CompminimaxProblem {
    /// Worst-case start for TV, burned-in start (1e-4) for L2.
    pub fn with_defaults(discrepancy: Discrepancy, alpha: f64, tau_max: u64) -> Self {
        let tv0 = match discrepancy {
            Discrepancy::Tv => 1.0,
            Discrepancy::L2 => 1e-4,
        };
        Self {
            discrepancy,
            alpha,
            tau_max,
            tv0,
            fstar: 1.0,
            grid: DEFAULT_GRID,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.alpha > 0.0 && self.alpha < 1.0, Domain, "alpha {} must lie in (0,1)", self.alpha);
        ensure!(self.tau_max >= 1, Domain, "tau_max must be at least 1");
        ensure!(self.grid >= 2, Domain, "epsilon grid needs at least 2 points");
        ensure!((0.0..=1.0).contains(&self.tv0), Domain, "tv0 {} outside [0,1]", self.tv0);
        ensure!(self.fstar >= 0.0, Domain, "fstar must be nonnegative");
        Ok(())
    }

    /// The ε grid: evenly spaced on [0, α/2·(1−1e-9)].
    pub fn eps_grid(&self) -> Vec<f64> {
        let top = self.alpha / 2.0 * (1.0 - 1e-9);
        let last = (self.grid - 1) as f64;
        (0..self.grid).map(|i| top * i as f64 / last).collect()
    }

    /// Path length affordable at speedup `s`.
    pub fn path_length(&self, s: f64) -> u64 {
        ((s * self.tau_max as f64).floor() as u64).max(1)
    }

    /// Bound for error level `eps` at path length `t`.
    pub fn bound(&self, eps: f64, t: u64) -> Result<f64> {
        let params = ErgodicityParams::new(self.alpha, eps)?;
        match self.discrepancy {
            Discrepancy::Tv => tv_bound_approx(params, t, self.tv0),
            Discrepancy::L2 => l2_bound_approx(params, t, self.tv0, self.fstar),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    pub eps_c: f64,
    pub t_opt: u64,
    pub bound_at_opt: f64,
    /// Bound for the exact chain at the same budget.
    pub bound_exact: f64,
}

pub fn epsilon_compminimax(problem: &CompminimaxProblem, speedup: &SpeedupFn) -> Result<Optimum> {
    problem.validate()?;
    ensure!(
        speedup.alpha() == problem.alpha,
        Domain,
        "speedup alpha {} differs from problem alpha {}",
        speedup.alpha(),
        problem.alpha
    );
    let mut best: Option<Optimum> = None;
    let mut exact = f64::NAN;
    for eps in problem.eps_grid() {
        let t = problem.path_length(speedup.eval(eps)?);
        let b = problem.bound(eps, t)?;
        if eps == 0.0 {
            exact = b;
        }
        if best.is_none_or(|o| b < o.bound_at_opt) {
            best = Some(Optimum {
                eps_c: eps,
                t_opt: t,
                bound_at_opt: b,
                bound_exact: f64::NAN,
            });
        }
    }
    let mut best = best.expect("grid is nonempty");
    best.bound_exact = exact;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub tau_max: u64,
    pub form: SpeedupForm,
    pub alpha: f64,
    pub eps_c: f64,
    pub t_opt: u64,
    pub bound_at_opt: f64,
}

impl CurveRow {
    pub const HEADER: [&'static str; 6] = ["tau_max", "form", "alpha", "eps_c", "t_opt", "bound_at_opt"];
}

/// One optimum per budget in `tau_grid` (which must be ascending).
pub fn curve_epsilon_vs_budget(
    template: &CompminimaxProblem,
    speedup: &SpeedupFn,
    tau_grid: &[u64],
    exec: Exec,
) -> Result<Vec<CurveRow>> {
    ensure!(
        tau_grid.windows(2).all(|w| w[0] <= w[1]),
        Domain,
        "tau grid must be sorted ascending"
    );
    exec.map_slice(tau_grid, |&tau_max| {
        let problem = CompminimaxProblem { tau_max, ..*template };
        epsilon_compminimax(&problem, speedup).map(|o| CurveRow {
            tau_max,
            form: speedup.form,
            alpha: template.alpha,
            eps_c: o.eps_c,
            t_opt: o.t_opt,
            bound_at_opt: o.bound_at_opt,
        })
    })
    .into_iter()
    .collect()
}

/// Log-spaced integer budgets from 1 to `max`, `per_decade` points per decade.
pub fn log_tau_grid(max: u64, per_decade: usize) -> Vec<u64> {
    let decades = (max as f64).log10();
    let n = (decades * per_decade as f64).ceil() as usize;
    let mut out: Vec<u64> = (0..=n)
        .map(|i| 10f64.powf(decades * i as f64 / n.max(1) as f64).round() as u64)
        .map(|v| v.clamp(1, max))
        .collect();
    out.dedup();
    out
}
