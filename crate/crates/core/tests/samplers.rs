use std::time::Instant;

use amcmc::diagnostics::{phi_max, w1_kernel_distance};
use amcmc::distributions::sample_gamma;
use amcmc::experiments::{gp_chains, gp_problem, GpConfig};
use amcmc::gp::{
    design_points, full_eigen, phi_grid, predictive_f_draw, rmse_at_budgets, se_covariance, synthetic_gp, Design,
    GPModel, GPPriors, GPRunConfig, GPSampler, GPState, LowRankFactor,
};
use amcmc::logistic::{run_chain, GaussianPrior, LogisticData, LogisticRunConfig, SubsetPolicy};
use amcmc::mixture::{self, MixturePriors, MixtureRunConfig};
use amcmc::{Exec, SeededRng};
use rand::Rng;

const BETA: [f64; 5] = [1.0, -0.5, 0.25, 0.75, -1.0];

fn logistic_cfg(burn_in: usize, samples: usize, audit: Option<usize>) -> LogisticRunConfig {
    LogisticRunConfig {
        burn_in,
        samples,
        audit_every: audit,
        max_seconds: None,
    }
}

fn quantile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn logistic_intervals_cover_truth() {
    let prior = GaussianPrior::isotropic(5, 100.0).unwrap();
    let mut covered = [0usize; 5];
    for rep in 0..20u64 {
        let data = LogisticData::synthetic(&mut SeededRng::new(100 + rep, 0), 2000, &BETA).unwrap();
        let run = run_chain(
            &mut SeededRng::new(100 + rep, 1),
            &data,
            &prior,
            &SubsetPolicy::Fixed(2000),
            &logistic_cfg(100, 500, None),
            Exec::default(),
        )
        .unwrap();
        for (j, &b) in BETA.iter().enumerate() {
            let mut col = run.trace.column(j);
            if quantile(&mut col, 0.025) <= b && b <= quantile(&mut col, 0.975) {
                covered[j] += 1;
            }
        }
    }
    let total: usize = covered.iter().sum();
    assert!(total >= 90, "{covered:?}");
    assert!(covered.iter().all(|&c| c >= 16), "{covered:?}");
}

#[test]
fn logistic_rate_and_audit_across_subset_sizes() {
    let data = LogisticData::synthetic(&mut SeededRng::new(11, 0), 2000, &BETA).unwrap();
    let prior = GaussianPrior::isotropic(5, 100.0).unwrap();
    let mut rates = Vec::new();
    let mut medians = Vec::new();
    for m in [200, 1000, 2000] {
        let run = run_chain(
            &mut SeededRng::new(42, 1),
            &data,
            &prior,
            &SubsetPolicy::Fixed(m),
            &logistic_cfg(200, 10_000, Some(50)),
            Exec::default(),
        )
        .unwrap();
        rates.push(phi_max(&run.trace, 5).unwrap().phi_max.unwrap());
        let mut eps = run.epsilon_trace.clone();
        assert_eq!(eps.len(), 10_200 / 50);
        medians.push(quantile(&mut eps, 0.5));
    }
    for r in &rates[..2] {
        assert!((r - rates[2]).abs() <= 0.1, "{rates:?}");
    }
    assert_eq!(medians[2], 0.0);
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

const CALIBRATION_PRIORS: GPPriors = GPPriors {
    a_tau: 10.0,
    b_tau: 10.0,
    a_sigma: 10.0,
    b_sigma: 1.0,
};

/// Variances drawn from the prior, data drawn given them.
fn gp_calibration_problem(seed: u64) -> (GPSampler, [f64; 2]) {
    let mut r = SeededRng::new(seed, 0);
    let sigma2 = 1.0 / sample_gamma(&mut r, CALIBRATION_PRIORS.a_sigma, CALIBRATION_PRIORS.b_sigma).unwrap();
    let tau2 = 1.0 / sample_gamma(&mut r, CALIBRATION_PRIORS.a_tau, CALIBRATION_PRIORS.b_tau).unwrap();
    let x = design_points(&mut r, Design::Uniform, 200);
    let grid = phi_grid(&x, 10).unwrap();
    let phi = grid[r.random_range(0..grid.len())];
    let (_, y) = synthetic_gp(&mut r, &x, sigma2, tau2, phi).unwrap();
    let model = GPModel::new(x, y, grid, CALIBRATION_PRIORS).unwrap();
    let sampler = GPSampler::new(&mut SeededRng::new(seed, 1), model, 1e-3, 3, Exec::default()).unwrap();
    (sampler, [sigma2, tau2])
}

#[test]
fn gp_sampler_calibration_and_acceptance() {
    let mut covered = [0usize; 2];
    let init = GPState { sigma2: 0.1, tau2: 1.0, phi_index: 0 };
    let mut cfg = GPRunConfig::new(500, 4000, init);
    cfg.target_accept = None;
    for seed in 0..20u64 {
        let (sampler, truth) = gp_calibration_problem(seed);
        let run = amcmc::gp::run_chain(&mut SeededRng::new(seed, 2), &sampler, &cfg, None).unwrap();
        assert!(run.acceptance > 0.1 && run.acceptance < 0.7, "acceptance {}", run.acceptance);
        for (j, t) in truth.into_iter().enumerate() {
            let mut col = run.trace.column(j);
            if quantile(&mut col, 0.025) <= t && t <= quantile(&mut col, 0.975) {
                covered[j] += 1;
            }
        }
    }
    assert!(covered.iter().all(|&c| c >= 18), "{covered:?}");
}

#[test]
fn gp_step_cost_grows_with_rank() {
    let n = 400;
    let mut r = SeededRng::new(1, 0);
    let x = design_points(&mut r, Design::Uniform, n);
    let grid = phi_grid(&x, 4).unwrap();
    let (_, y) = synthetic_gp(&mut r, &x, 0.1, 1.0, grid[2]).unwrap();
    let model = GPModel::new(x.clone(), y, grid.clone(), GPPriors::default()).unwrap();
    let full: Vec<_> = grid.iter().map(|&p| full_eigen(&se_covariance(&x, p))).collect();
    let ranks = [10usize, 20, 40, 80];
    let mut times = Vec::new();
    for &rank in &ranks {
        let factors = full
            .iter()
            .map(|(u, l)| LowRankFactor::from_eigenpairs(u.columns(0, rank).into_owned(), l[..rank].to_vec()).unwrap())
            .collect();
        let sampler = GPSampler::from_factors(model.clone(), factors).unwrap();
        let mut state = GPState { sigma2: 0.1, tau2: 1.0, phi_index: 2 };
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            for _ in 0..200 {
                state = sampler.mh_griddy_step(&mut r, &state, 0.2).unwrap().0;
                predictive_f_draw(&mut r, sampler.cache(state.phi_index), state.sigma2, state.tau2).unwrap();
            }
            best = best.min(start.elapsed().as_secs_f64());
        }
        times.push(best);
    }
    let lx: Vec<f64> = ranks.iter().map(|&r| (r as f64).ln()).collect();
    let ly: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 4.0, ly.iter().sum::<f64>() / 4.0);
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!(slope > 0.5 && slope < 1.3, "log-log slope {slope}, times {times:?}");
}

#[test]
fn gp_rmse_nonincreasing_as_delta_shrinks() {
    let cfg = GpConfig {
        deltas: vec![0.05, 0.01, 0.001],
        ..GpConfig::default()
    };
    for seed in 0..5u64 {
        let problem = gp_problem(&cfg, seed).unwrap();
        let chains = gp_chains(&cfg, &problem, seed, 8000, None, Exec::default()).unwrap();
        let finals: Vec<f64> = chains
            .iter()
            .map(|(_, run)| rmse_at_budgets(run, &problem.test_truth, &[f64::INFINITY]).unwrap()[0].unwrap())
            .collect();
        assert!(finals.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {finals:?}");
    }
}

#[test]
fn mixture_discrepancy_shrinks_with_threshold() {
    let priors = MixturePriors { lambda: 1.0, nu: 1.0 };
    let levels = [0.0, 2.0, 10.0];
    let mut mean_w = [0.0; 3];
    for seed in 0..6u64 {
        let sim = mixture::simulate_contingency(&mut SeededRng::new(seed, 0), 6, 3, 3, 3000, priors).unwrap();
        let tracked = sim.data.largest_cells(10);
        let run = |n_min: f64| {
            let cfg = MixtureRunConfig {
                k: 3,
                priors,
                n_min,
                burn_in: 200,
                samples: 2000,
                max_seconds: None,
            };
            mixture::run_chain(&mut SeededRng::new(seed, 1), &sim.data, &tracked, &cfg, Exec::default())
                .unwrap()
                .rows()
        };
        let exact = run(f64::INFINITY);
        for (w, &n) in mean_w.iter_mut().zip(&levels) {
            *w += w1_kernel_distance(&run(n), &exact, 1.0, 1.0, Exec::default()).unwrap() / 6.0;
        }
    }
    assert!(mean_w[0] > mean_w[1] && mean_w[1] > mean_w[2], "{mean_w:?}");
}
