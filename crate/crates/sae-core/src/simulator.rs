//! Scenario generators, the Huber contamination model, the Monte Carlo
//! driver, and the separability diagnostic.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::estimator::{fit_gamma_with_ml, SolverConfig};
use crate::inference::{analyze, GammaGrid};
use crate::model::{validate_dataset, AreaDataset, ModelParams};
use crate::objective::CompensatedSum;
use crate::quadrature::{adaptive_gauss_legendre, QuadratureError};
use crate::rng::{replication_seed, CounterRng, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScenarioId {
    /// u ~ N(0, 1): correctly specified.
    I,
    /// u ~ log-normal(0, 1).
    II,
    /// u ~ standard Cauchy.
    III,
    /// u ~ 0.95 N(0,1) + 0.05 N(10,1).
    IV,
    /// u ~ 0.9 N(0,1) + 0.1 N(10,1).
    V,
}

impl ScenarioId {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioId::I => "i",
            ScenarioId::II => "ii",
            ScenarioId::III => "iii",
            ScenarioId::IV => "iv",
            ScenarioId::V => "v",
        }
    }
}

/// Huber contamination mixture on the u scale: with probability `omega`
/// the random effect is drawn from N(delta_mean, delta_var).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Contamination {
    pub omega: f64,
    pub delta_mean: f64,
    pub delta_var: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("m = {m} is not divisible by the number of D groups ({groups})")]
    UnevenGroups { m: usize, groups: usize },
    #[error("invalid scenario parameter: {0}")]
    InvalidParameter(String),
    #[error("too many non-converged replications: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub id: ScenarioId,
    pub a: f64,
    pub m: usize,
    pub beta: [f64; 3],
    pub d_pattern: Vec<f64>,
    pub contamination: Option<Contamination>,
}

impl SimScenario {
    /// Simulation-study preset for one scenario and one value of A.
    pub fn preset(id: ScenarioId, a: f64) -> Self {
        let contamination = match id {
            ScenarioId::IV => Some(Contamination {
                omega: 0.05,
                delta_mean: 10.0,
                delta_var: 1.0,
            }),
            ScenarioId::V => Some(Contamination {
                omega: 0.10,
                delta_mean: 10.0,
                delta_var: 1.0,
            }),
            _ => None,
        };
        Self {
            id,
            a,
            m: 100,
            beta: [0.0, -1.0, 1.0],
            d_pattern: vec![0.2, 0.6, 1.0, 1.4, 2.0],
            contamination,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.d_pattern.is_empty() || self.m % self.d_pattern.len() != 0 {
            return Err(SimError::UnevenGroups {
                m: self.m,
                groups: self.d_pattern.len().max(1),
            });
        }
        if !(self.a > 0.0) {
            return Err(SimError::InvalidParameter("A must be positive".into()));
        }
        if self.d_pattern.iter().any(|&d| !(d > 0.0)) {
            return Err(SimError::InvalidParameter(
                "D pattern must be positive".into(),
            ));
        }
        if let Some(c) = &self.contamination {
            if !(0.0..0.5).contains(&c.omega) || !(c.delta_var > 0.0) {
                return Err(SimError::InvalidParameter(
                    "contamination must have omega in [0, 1/2) and positive variance".into(),
                ));
            }
        }
        match self.id {
            ScenarioId::IV | ScenarioId::V => {
                if self.contamination.is_none() {
                    return Err(SimError::InvalidParameter(
                        "scenarios iv and v require a contamination mixture".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn true_params(&self) -> ModelParams {
        ModelParams::new(DVector::from_row_slice(&self.beta), self.a)
    }
}

/// One simulated dataset together with the latent truth.
#[derive(Debug, Clone)]
pub struct Replication {
    pub data: AreaDataset,
    pub theta_true: Vec<f64>,
    /// Areas redrawn because a draw produced a non-finite value.
    pub redraws: usize,
}

fn draw_u(scenario: &SimScenario, rng: &CounterRng, area: u64, attempt: u64) -> f64 {
    match (scenario.id, &scenario.contamination) {
        (ScenarioId::I, _) => rng.normal(area, Role::RandomEffect, 2 * attempt),
        (ScenarioId::II, _) => rng.normal(area, Role::RandomEffect, 2 * attempt).exp(),
        (ScenarioId::III, _) => {
            let u = rng.uniform(area, Role::RandomEffect, 4 * attempt);
            (std::f64::consts::PI * (u - 0.5)).tan()
        }
        (_, Some(c)) => {
            if rng.uniform(area, Role::MixtureSelect, attempt) < c.omega {
                c.delta_mean
                    + c.delta_var.sqrt() * rng.normal(area, Role::RandomEffect, 2 * attempt + 1)
            } else {
                rng.normal(area, Role::RandomEffect, 2 * attempt)
            }
        }
        (id, None) => unreachable!("scenario {id:?} requires contamination"),
    }
}

/// Draws one dataset. Deterministic given (scenario, seed); per-area
/// counter substreams keep the draws independent of evaluation order.
pub fn generate_replication(scenario: &SimScenario, seed: u64) -> Replication {
    scenario.validate().expect("valid scenario");
    let m = scenario.m;
    let rng = CounterRng::new(seed);
    let group_size = m / scenario.d_pattern.len();
    let mut x = DMatrix::zeros(m, 3);
    let mut y = Vec::with_capacity(m);
    let mut d = Vec::with_capacity(m);
    let mut theta_true = Vec::with_capacity(m);
    let mut redraws = 0usize;
    for i in 0..m {
        let ai = i as u64;
        let x1 = rng.normal(ai, Role::CovariateNormal, 0);
        let x2 = if rng.uniform(ai, Role::CovariateBernoulli, 0) < 0.5 {
            1.0
        } else {
            0.0
        };
        x[(i, 0)] = 1.0;
        x[(i, 1)] = x1;
        x[(i, 2)] = x2;
        let di = scenario.d_pattern[i / group_size];
        let mean = scenario.beta[0] + scenario.beta[1] * x1 + scenario.beta[2] * x2;
        let mut attempt = 0u64;
        let (theta, yi) = loop {
            let u = draw_u(scenario, &rng, ai, attempt);
            let z = rng.normal(ai, Role::SamplingNoise, attempt);
            let theta = mean + scenario.a.sqrt() * u;
            let yi = theta + di.sqrt() * z;
            if yi.is_finite() && theta.is_finite() {
                break (theta, yi);
            }
            redraws += 1;
            attempt += 1;
            assert!(attempt < 1000, "runaway redraw loop");
        };
        theta_true.push(theta);
        y.push(yi);
        d.push(di);
    }
    let ids = (1..=m).map(|i| format!("area{i:04}")).collect();
    let data = validate_dataset(AreaDataset::new(ids, y, d, x)).expect("generated dataset");
    Replication {
        data,
        theta_true,
        redraws,
    }
}

/// MSE, coverage (percent), and average interval length for one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodStats {
    pub mse: f64,
    pub cp: f64,
    pub al: f64,
}

/// Aggregated Monte Carlo results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub scenario: String,
    pub a: f64,
    pub m: usize,
    pub alpha: f64,
    pub base_seed: u64,
    pub n_replications: usize,
    pub eb: MethodStats,
    pub gd: MethodStats,
    pub dr: MethodStats,
    pub gamma_mean: f64,
    pub gamma_median: f64,
    pub gamma_zero_fraction: f64,
    pub n_nonconverged: usize,
    pub n_redraws: usize,
}

struct RepPartial {
    sq: [f64; 3],
    cover: [u64; 3],
    len: [f64; 3],
    gamma_op: f64,
    failed: bool,
    redraws: usize,
}

fn accumulate_method(
    partial_sq: &mut f64,
    partial_cover: &mut u64,
    partial_len: &mut f64,
    inf: &crate::model::AreaInference,
    theta: f64,
) {
    let e = inf.theta_hat - theta;
    *partial_sq += e * e;
    if inf.lower <= theta && theta <= inf.upper {
        *partial_cover += 1;
    }
    *partial_len += inf.upper - inf.lower;
}

fn fold_report(
    scenario: &SimScenario,
    alpha: f64,
    base_seed: u64,
    partials: Vec<RepPartial>,
) -> Result<SimReport, SimError> {
    let r = partials.len();
    let m = scenario.m;
    let failed = partials.iter().filter(|p| p.failed).count();
    if failed * 20 > r {
        return Err(SimError::TooManyFailures { failed, total: r });
    }
    let mut sq = [CompensatedSum::default(); 3];
    let mut len = [CompensatedSum::default(); 3];
    let mut cover = [0u64; 3];
    let mut gamma_sum = CompensatedSum::default();
    let mut gammas = Vec::with_capacity(r);
    let mut zero = 0usize;
    let mut redraws = 0usize;
    for p in &partials {
        for k in 0..3 {
            sq[k].add(p.sq[k]);
            len[k].add(p.len[k]);
            cover[k] += p.cover[k];
        }
        gamma_sum.add(p.gamma_op);
        gammas.push(p.gamma_op);
        if p.gamma_op == 0.0 {
            zero += 1;
        }
        redraws += p.redraws;
    }
    gammas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let gamma_median = if r == 0 {
        0.0
    } else if r % 2 == 1 {
        gammas[r / 2]
    } else {
        0.5 * (gammas[r / 2 - 1] + gammas[r / 2])
    };
    let denom = (m * r) as f64;
    let stats = |k: usize| MethodStats {
        mse: sq[k].value() / denom,
        cp: 100.0 * cover[k] as f64 / denom,
        al: len[k].value() / denom,
    };
    Ok(SimReport {
        scenario: scenario.id.label().to_string(),
        a: scenario.a,
        m,
        alpha,
        base_seed,
        n_replications: r,
        eb: stats(0),
        gd: stats(1),
        dr: stats(2),
        gamma_mean: gamma_sum.value() / r as f64,
        gamma_median,
        gamma_zero_fraction: zero as f64 / r as f64,
        n_nonconverged: failed,
        n_redraws: redraws,
    })
}

/// Full Monte Carlo run with data-driven gamma selection in every
/// replication. Replications run in parallel; the reduction folds
/// per-replication partials in ascending replication order, so the report
/// is bit-identical for any worker count.
pub fn run_monte_carlo(
    scenario: &SimScenario,
    r: usize,
    grid: &GammaGrid,
    alpha: f64,
    base_seed: u64,
    config: &SolverConfig,
) -> Result<SimReport, SimError> {
    scenario.validate()?;
    let partials: Vec<RepPartial> = (0..r)
        .into_par_iter()
        .map(|rep| {
            let seed = replication_seed(base_seed, rep as u64);
            let repl = generate_replication(scenario, seed);
            let analysis = analyze(&repl.data, grid, alpha, config);
            let mut p = RepPartial {
                sq: [0.0; 3],
                cover: [0; 3],
                len: [0.0; 3],
                gamma_op: analysis.selection.gamma_op,
                failed: !analysis.ml_fit.converged || !analysis.gd_fit.converged,
                redraws: repl.redraws,
            };
            for i in 0..scenario.m {
                let t = repl.theta_true[i];
                accumulate_method(&mut p.sq[0], &mut p.cover[0], &mut p.len[0], &analysis.eb[i], t);
                accumulate_method(&mut p.sq[1], &mut p.cover[1], &mut p.len[1], &analysis.gd[i], t);
                accumulate_method(&mut p.sq[2], &mut p.cover[2], &mut p.len[2], &analysis.dr[i], t);
            }
            p
        })
        .collect();
    fold_report(scenario, alpha, base_seed, partials)
}

/// Fixed-gamma study: the same pipeline with gamma held fixed (no
/// selection), one report per supplied gamma.
pub fn run_fixed_gamma_study(
    scenario: &SimScenario,
    gammas: &[f64],
    r: usize,
    alpha: f64,
    base_seed: u64,
    config: &SolverConfig,
) -> Result<Vec<SimReport>, SimError> {
    scenario.validate()?;
    let per_rep: Vec<Vec<RepPartial>> = (0..r)
        .into_par_iter()
        .map(|rep| {
            let seed = replication_seed(base_seed, rep as u64);
            let repl = generate_replication(scenario, seed);
            let ml = crate::estimator::fit_ml(&repl.data, config);
            let mut warm = Some(ml.params.clone());
            let mut out = Vec::with_capacity(gammas.len());
            for &gamma in gammas {
                let fit = if gamma == 0.0 {
                    ml.clone()
                } else {
                    fit_gamma_with_ml(&repl.data, gamma, config, warm.as_ref(), &ml)
                };
                if fit.converged {
                    warm = Some(fit.params.clone());
                }
                let mut p = RepPartial {
                    sq: [0.0; 3],
                    cover: [0; 3],
                    len: [0.0; 3],
                    gamma_op: gamma,
                    failed: !ml.converged || !fit.converged,
                    redraws: repl.redraws,
                };
                for i in 0..scenario.m {
                    let t = repl.theta_true[i];
                    let x = repl.data.x_row(i);
                    let (y, d) = (repl.data.y[i], repl.data.d[i]);
                    let eb = crate::inference::robust_posterior_moments(y, &x, d, &ml.params, 0.0);
                    let (lo, hi) = crate::inference::make_interval(eb.theta, eb.s2, alpha);
                    p.sq[0] += (eb.theta - t) * (eb.theta - t);
                    p.cover[0] += (lo <= t && t <= hi) as u64;
                    p.len[0] += hi - lo;
                    let gd =
                        crate::inference::robust_posterior_moments(y, &x, d, &fit.params, gamma);
                    let (lo, hi) = crate::inference::make_interval(gd.theta, gd.s2, alpha);
                    p.sq[1] += (gd.theta - t) * (gd.theta - t);
                    p.cover[1] += (lo <= t && t <= hi) as u64;
                    p.len[1] += hi - lo;
                    let (lo, hi) = crate::inference::direct_interval(y, d, alpha);
                    p.sq[2] += (y - t) * (y - t);
                    p.cover[2] += (lo <= t && t <= hi) as u64;
                    p.len[2] += hi - lo;
                }
                out.push(p);
            }
            out
        })
        .collect();

    let mut reports = Vec::with_capacity(gammas.len());
    for (k, _gamma) in gammas.iter().enumerate() {
        let partials: Vec<RepPartial> = per_rep
            .iter()
            .map(|reps| {
                let p = &reps[k];
                RepPartial {
                    sq: p.sq,
                    cover: p.cover,
                    len: p.len,
                    gamma_op: p.gamma_op,
                    failed: p.failed,
                    redraws: p.redraws,
                }
            })
            .collect();
        reports.push(fold_report(scenario, alpha, base_seed, partials)?);
    }
    Ok(reports)
}

/// Overlap functional between the contamination marginal and a
/// gamma-power of the genuine marginal, for one moment order `k`.
pub fn rho_integral(
    a_star: f64,
    mu: f64,
    d: f64,
    delta_mean: f64,
    delta_var: f64,
    gamma: f64,
    k: u32,
) -> Result<f64, QuadratureError> {
    assert!(gamma > 0.0 && delta_var > 0.0 && d > 0.0);
    let var_delta = delta_var + d;
    let var_phi = a_star + d;
    let sd_delta = var_delta.sqrt();
    let sd_phi = var_phi.sqrt();
    let lo = (delta_mean - 12.0 * sd_delta).min(mu - 12.0 * sd_phi);
    let hi = (delta_mean + 12.0 * sd_delta).max(mu + 12.0 * sd_phi);
    let ln_norm_delta = -0.5 * (2.0 * std::f64::consts::PI * var_delta).ln();
    let ln_norm_phi = -0.5 * (2.0 * std::f64::consts::PI * var_phi).ln();
    let f = move |y: f64| {
        let ld = ln_norm_delta - (y - delta_mean) * (y - delta_mean) / (2.0 * var_delta);
        let lp = ln_norm_phi - (y - mu) * (y - mu) / (2.0 * var_phi);
        (ld + gamma * lp).exp() * (y - mu).abs().powi(k as i32)
    };
    adaptive_gauss_legendre(f, lo, hi, 1e-10)
}

/// Separability diagnostic: the maximum of [`rho_integral`] over
/// `k in {0, 1, 2}`, a 7-point D grid spanning `d_range` (endpoints plus
/// 5 interior points), and the supplied grid of x'beta values.
pub fn separability_rho(
    params: &ModelParams,
    delta_mean: f64,
    delta_var: f64,
    d_range: (f64, f64),
    x_grid: &[f64],
    gamma: f64,
) -> Result<f64, QuadratureError> {
    let (d_lo, d_hi) = d_range;
    let mut rho: f64 = 0.0;
    for j in 0..7 {
        let d = d_lo + (d_hi - d_lo) * j as f64 / 6.0;
        for &mu in x_grid {
            for k in 0..=2 {
                rho = rho.max(rho_integral(
                    params.a, mu, d, delta_mean, delta_var, gamma, k,
                )?);
            }
        }
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replication_is_deterministic() {
        let sc = SimScenario::preset(ScenarioId::IV, 1.0);
        let a = generate_replication(&sc, 12345);
        let b = generate_replication(&sc, 12345);
        assert_eq!(a.data, b.data);
        for (x, y) in a.theta_true.iter().zip(&b.theta_true) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn replication_centered_noise() {
        let mut sc = SimScenario::preset(ScenarioId::I, 1.0);
        sc.m = 1_000_000;
        sc.d_pattern = vec![0.2, 0.6, 1.0, 1.4, 2.0];
        let repl = generate_replication(&sc, 9);
        let truth = sc.true_params();
        let mut sum = 0.0;
        for i in 0..sc.m {
            sum += repl.theta_true[i] - truth.predict(&repl.data.x_row(i));
        }
        let mean = sum / sc.m as f64;
        assert!(mean.abs() < 3.0 * (sc.a / sc.m as f64).sqrt());
    }

    #[test]
    fn mixture_weight_matches_preset() {
        let mut sc = SimScenario::preset(ScenarioId::IV, 1.0);
        sc.m = 1_000_000;
        let repl = generate_replication(&sc, 21);
        let truth = sc.true_params();
        let mut big = 0usize;
        for i in 0..sc.m {
            let u = (repl.theta_true[i] - truth.predict(&repl.data.x_row(i))) / sc.a.sqrt();
            if u > 5.0 {
                big += 1;
            }
        }
        let frac = big as f64 / sc.m as f64;
        assert!((frac - 0.05).abs() < 0.001, "contaminated fraction {frac}");
    }

    #[test]
    fn d_pattern_assigned_in_group_blocks() {
        let sc = SimScenario::preset(ScenarioId::I, 1.0);
        let repl = generate_replication(&sc, 4);
        assert_eq!(repl.data.d[0], 0.2);
        assert_eq!(repl.data.d[19], 0.2);
        assert_eq!(repl.data.d[20], 0.6);
        assert_eq!(repl.data.d[99], 2.0);
    }

    #[test]
    fn uneven_groups_rejected() {
        let mut sc = SimScenario::preset(ScenarioId::I, 1.0);
        sc.m = 101;
        assert!(matches!(sc.validate(), Err(SimError::UnevenGroups { .. })));
    }

    #[test]
    fn rho_closed_form_gaussian_product() {
        // delta equals the genuine marginal, k = 0, A* + D = 1, gamma = 1:
        // integral of phi^2 = 1 / (2 sqrt(pi))
        let got = rho_integral(0.5, 0.3, 0.5, 0.3, 0.5, 1.0, 0).unwrap();
        assert!((got - 0.28209479177387814).abs() < 1e-6);
    }

    #[test]
    fn rho_well_separated_limit() {
        let params = ModelParams::new(DVector::from_element(1, 0.0), 1.0);
        // delta mean 50 prior sds away from x'beta = 0
        let sep = 50.0 * (1.0 + 1.0f64).sqrt();
        let rho =
            separability_rho(&params, sep, 1.0, (0.5, 1.5), &[0.0], 0.5).unwrap();
        assert!(rho <= 1e-20, "rho = {rho}");
    }

    #[test]
    fn rho_decays_at_large_separation() {
        // the moment factors make rho non-monotone at small shifts, but the
        // Gaussian tail dominates once the contamination is well outside
        // the genuine marginal
        let params = ModelParams::new(DVector::from_element(1, 0.0), 1.0);
        let mut prev = f64::INFINITY;
        for shift in [6.0, 10.0, 14.0, 18.0] {
            let rho =
                separability_rho(&params, shift, 1.0, (0.5, 1.5), &[0.0], 0.5).unwrap();
            assert!(rho < prev, "shift {shift}: {rho} >= {prev}");
            prev = rho;
        }
        assert!(prev < 1e-6, "rho at shift 18 is {prev}");
    }
}
