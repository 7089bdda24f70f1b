//! Posterior moments (standard and robust), interval constructions, the
//! data-driven selection of gamma, and closed-form population diagnostics.

use nalgebra::DVector;
use thiserror::Error;

use crate::estimator::{fit_gamma_with_ml, fit_ml, SolverConfig};
use crate::model::{
    normal_quantile, AreaDataset, AreaInference, GammaFit, Method, ModelParams,
};
use crate::objective::log_weight;

/// Relative floor on the robust posterior variance: `s2 >= S2_FLOOR * D`.
pub const S2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum WeightsMode {
    /// a_i = 1
    Unit,
    /// a_i = 1 / D_i
    InvD,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("gamma grid must start at exactly 0")]
    MissingZero,
    #[error("gamma grid must be strictly ascending")]
    NotAscending,
    #[error("gamma grid values must lie in [0, 1]")]
    OutOfRange,
    #[error("gamma grid must be non-empty")]
    Empty,
}

/// Candidate gamma values, ascending, starting at exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaGrid {
    values: Vec<f64>,
    pub weights_mode: WeightsMode,
}

impl GammaGrid {
    pub fn new(values: Vec<f64>, weights_mode: WeightsMode) -> Result<Self, GridError> {
        if values.is_empty() {
            return Err(GridError::Empty);
        }
        if values[0] != 0.0 {
            return Err(GridError::MissingZero);
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GridError::NotAscending);
        }
        if *values.last().unwrap() > 1.0 {
            return Err(GridError::OutOfRange);
        }
        Ok(Self { values, weights_mode })
    }

    /// Library default: {0, 0.01, ..., 1.00}.
    pub fn default_grid(weights_mode: WeightsMode) -> Self {
        let values = (0..=100).map(|k| k as f64 / 100.0).collect();
        Self { values, weights_mode }
    }

    /// Application preset: {0, 0.005, ..., 0.300}.
    pub fn app_grid(weights_mode: WeightsMode) -> Self {
        let values = (0..=60).map(|k| k as f64 * 0.005).collect();
        Self { values, weights_mode }
    }

    /// Coarse preset: {0, 0.1, 0.2, 0.3}.
    pub fn coarse_grid(weights_mode: WeightsMode) -> Self {
        Self {
            values: vec![0.0, 0.1, 0.2, 0.3],
            weights_mode,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Result of the gamma selection sweep.
#[derive(Debug, Clone)]
pub struct GammaSelection {
    pub gamma_op: f64,
    pub gamma_op_index: usize,
    /// Weighted total robust variance per grid point.
    pub criterion: Vec<f64>,
    pub fits: Vec<GammaFit>,
}

/// Standard posterior mean and variance under the Fay-Herriot model.
pub fn posterior_moments(y: f64, x: &DVector<f64>, d: f64, params: &ModelParams) -> (f64, f64) {
    let v = params.a + d;
    let theta = y - d / v * (y - params.predict(x));
    let s2 = params.a * d / v;
    (theta, s2)
}

#[derive(Debug, Clone, Copy)]
pub struct RobustMoments {
    pub theta: f64,
    pub s2_raw: f64,
    /// `max(s2_raw, S2_FLOOR * D)`
    pub s2: f64,
    pub floored: bool,
}

/// Robust posterior mean and variance obtained by plugging the
/// gamma-divergence pseudo-likelihood into Tweedie's formula.
pub fn robust_posterior_moments(
    y: f64,
    x: &DVector<f64>,
    d: f64,
    params: &ModelParams,
    gamma: f64,
) -> RobustMoments {
    let (theta, s2_raw) = if gamma == 0.0 {
        posterior_moments(y, x, d, params)
    } else {
        let v = params.a + d;
        let r = y - params.predict(x);
        let w = log_weight(r * r, v, gamma).exp();
        let theta = y - w * d / v * r;
        let s2_raw = d + w * d * d / (v * v) * (gamma * r * r - v);
        (theta, s2_raw)
    };
    let floor = S2_FLOOR * d;
    if s2_raw < floor {
        RobustMoments {
            theta,
            s2_raw,
            s2: floor,
            floored: true,
        }
    } else {
        RobustMoments {
            theta,
            s2_raw,
            s2: s2_raw,
            floored: false,
        }
    }
}

/// Discrepancy between the closed-form robust moments and Tweedie's
/// formula evaluated by central finite differences in y. Test oracle.
pub fn tweedie_check(
    y: f64,
    x: &DVector<f64>,
    d: f64,
    params: &ModelParams,
    gamma: f64,
) -> (f64, f64) {
    assert!(gamma > 0.0);
    // eps^(1/4)-scale step balances truncation against cancellation in the
    // second difference
    let h = 1e-4 * (1.0 + y.abs());
    let term = |yy: f64| crate::objective::gamma_term(yy, x, d, params, gamma);
    let (fm, f0, fp) = (term(y - h), term(y), term(y + h));
    let d1 = (fp - fm) / (2.0 * h);
    let d2 = (fp - 2.0 * f0 + fm) / (h * h);
    let mom = robust_posterior_moments(y, x, d, params, gamma);
    let err_theta = mom.theta - (y + d * d1);
    let err_s2 = mom.s2_raw - (d + d * d * d2);
    (err_theta, err_s2)
}

/// Symmetric interval `theta +/- z_{alpha/2} sqrt(s2)`.
pub fn make_interval(theta: f64, s2: f64, alpha: f64) -> (f64, f64) {
    assert!(s2 >= 0.0);
    let z = normal_quantile(1.0 - alpha / 2.0).expect("alpha in (0,1)");
    let half = z * s2.sqrt();
    (theta - half, theta + half)
}

/// Direct interval `y +/- z_{alpha/2} sqrt(D)`; valid without the
/// second-stage model.
pub fn direct_interval(y: f64, d: f64, alpha: f64) -> (f64, f64) {
    assert!(d > 0.0);
    make_interval(y, d, alpha)
}

/// Fits every grid point (warm-started in ascending gamma order) and picks
/// the gamma minimizing the weighted total robust variance. Ties and
/// non-converged grid points resolve toward the smallest gamma.
pub fn select_gamma(
    data: &AreaDataset,
    grid: &GammaGrid,
    config: &SolverConfig,
) -> GammaSelection {
    let mut fits: Vec<GammaFit> = Vec::with_capacity(grid.values().len());
    let mut criterion = Vec::with_capacity(grid.values().len());
    let mut warm: Option<ModelParams> = None;
    let ml = fit_ml(data, config);
    for &gamma in grid.values() {
        let fit = if gamma == 0.0 {
            ml.clone()
        } else {
            fit_gamma_with_ml(data, gamma, config, warm.as_ref(), &ml)
        };
        if fit.converged {
            warm = Some(fit.params.clone());
        }
        criterion.push(total_robust_variance(data, grid, &fit.params, gamma));
        fits.push(fit);
    }
    let pick = |converged_only: bool| {
        let mut best: Option<usize> = None;
        for (k, fit) in fits.iter().enumerate() {
            if converged_only && !fit.converged {
                continue;
            }
            match best {
                None => best = Some(k),
                Some(b) if criterion[k] < criterion[b] => best = Some(k),
                _ => {}
            }
        }
        best
    };
    let idx = pick(true).or_else(|| pick(false)).expect("non-empty grid");
    GammaSelection {
        gamma_op: grid.values()[idx],
        gamma_op_index: idx,
        criterion,
        fits,
    }
}

/// Weighted total robust variance: the gamma-selection criterion at one
/// grid point.
pub fn total_robust_variance(
    data: &AreaDataset,
    grid: &GammaGrid,
    params: &ModelParams,
    gamma: f64,
) -> f64 {
    let mut acc = crate::objective::CompensatedSum::default();
    for i in 0..data.m() {
        let mom = robust_posterior_moments(data.y[i], &data.x_row(i), data.d[i], params, gamma);
        let a_i = match grid.weights_mode {
            WeightsMode::Unit => 1.0,
            WeightsMode::InvD => 1.0 / data.d[i],
        };
        acc.add(a_i * mom.s2);
    }
    acc.value()
}

/// Full per-area analysis: EB, GD at the selected gamma, and DR.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub selection: GammaSelection,
    pub ml_fit: GammaFit,
    /// Fit backing the GD column (the grid fit at gamma_op).
    pub gd_fit: GammaFit,
    pub eb: Vec<AreaInference>,
    pub gd: Vec<AreaInference>,
    pub dr: Vec<AreaInference>,
}

/// One pass producing the three methods' point estimates and intervals for
/// every area.
pub fn analyze(
    data: &AreaDataset,
    grid: &GammaGrid,
    alpha: f64,
    config: &SolverConfig,
) -> Analysis {
    let selection = select_gamma(data, grid, config);
    let ml_fit = selection.fits[0].clone();
    let gd_fit = selection.fits[selection.gamma_op_index].clone();

    let mut eb = Vec::with_capacity(data.m());
    let mut gd = Vec::with_capacity(data.m());
    let mut dr = Vec::with_capacity(data.m());
    for i in 0..data.m() {
        let x = data.x_row(i);
        let (y, d) = (data.y[i], data.d[i]);
        eb.push(area_inference(y, &x, d, &ml_fit.params, 0.0, alpha, Method::Eb));
        // when gamma_op = 0 the GD column shares the EB path bit for bit
        let g = if selection.gamma_op == 0.0 {
            AreaInference {
                method: Method::Gd,
                ..eb[i].clone()
            }
        } else {
            area_inference(
                y,
                &x,
                d,
                &gd_fit.params,
                selection.gamma_op,
                alpha,
                Method::Gd,
            )
        };
        gd.push(g);
        let (lo, hi) = direct_interval(y, d, alpha);
        dr.push(AreaInference {
            theta_hat: y,
            s2: d,
            lower: lo,
            upper: hi,
            method: Method::Dr,
            gamma: 0.0,
            s2_floored: false,
        });
    }
    Analysis {
        selection,
        ml_fit,
        gd_fit,
        eb,
        gd,
        dr,
    }
}

fn area_inference(
    y: f64,
    x: &DVector<f64>,
    d: f64,
    params: &ModelParams,
    gamma: f64,
    alpha: f64,
    method: Method,
) -> AreaInference {
    let mom = robust_posterior_moments(y, x, d, params, gamma);
    let (lower, upper) = make_interval(mom.theta, mom.s2, alpha);
    AreaInference {
        theta_hat: mom.theta,
        s2: mom.s2,
        lower,
        upper,
        method,
        gamma,
        s2_floored: mom.floored,
    }
}

/// Closed-form expectation of `s2_raw - D` at the true parameters under
/// correct specification, averaged over the supplied D values.
pub fn population_q(params: &ModelParams, d_values: &[f64], gamma: f64) -> f64 {
    assert!((0.0..=1.0).contains(&gamma));
    let mut acc = 0.0;
    for &d in d_values {
        let v = params.a + d;
        acc += d * d / v
            * (2.0 * std::f64::consts::PI * v).powf(-gamma / (2.0 * (1.0 + gamma)))
            * (1.0 + gamma).powf(-1.5);
    }
    -acc / d_values.len() as f64
}
