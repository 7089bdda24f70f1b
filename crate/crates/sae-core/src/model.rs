//! Domain types, dataset validation and Gaussian primitives shared by the
//! rest of the crate.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Lower bound for the random-effect variance `A`. Keeps every division by
/// `A + D_i` finite; fits that hit the bound are flagged via `a_floored`.
pub const A_MIN: f64 = 1e-8;

/// Relative tolerance on the smallest singular value in the design-matrix
/// rank check.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("sampling variance D[{0}] is not strictly positive")]
    NonPositiveVariance(usize),
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("too few areas: m = {m} but need at least p + 2 = {min}")]
    TooFewAreas { m: usize, min: usize },
    #[error("non-finite value in field `{field}` at area {area}")]
    NonFinite { area: usize, field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("variance must be strictly positive")]
    NonPositiveVariance,
    #[error("probability must lie in the open interval (0, 1)")]
    OutOfRange,
}

/// Area-level dataset: direct estimates `y_i`, known sampling variances
/// `D_i`, and covariate rows `x_i` (the intercept, when present, is an
/// explicit column of `x`).
#[derive(Debug, Clone, PartialEq)]
pub struct AreaDataset {
    pub area_id: Vec<String>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub x: DMatrix<f64>,
}

impl AreaDataset {
    pub fn new(area_id: Vec<String>, y: Vec<f64>, d: Vec<f64>, x: DMatrix<f64>) -> Self {
        assert_eq!(y.len(), d.len());
        assert_eq!(y.len(), x.nrows());
        assert_eq!(y.len(), area_id.len());
        Self { area_id, y, d, x }
    }

    /// Number of areas.
    pub fn m(&self) -> usize {
        self.y.len()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Covariate row for area `i`.
    pub fn x_row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    /// Returns a copy with area `i` removed. Panics if `i >= m`.
    pub fn without_area(&self, i: usize) -> Self {
        let keep: Vec<usize> = (0..self.m()).filter(|&j| j != i).collect();
        let x = DMatrix::from_fn(keep.len(), self.p(), |r, c| self.x[(keep[r], c)]);
        Self {
            area_id: keep.iter().map(|&j| self.area_id[j].clone()).collect(),
            y: keep.iter().map(|&j| self.y[j]).collect(),
            d: keep.iter().map(|&j| self.d[j]).collect(),
            x,
        }
    }
}

/// Checks all `AreaDataset` invariants and returns the dataset unchanged.
/// Idempotent: a validated dataset passes again bit-identically.
pub fn validate_dataset(raw: AreaDataset) -> Result<AreaDataset, DataError> {
    let m = raw.m();
    let p = raw.p();
    if m < p + 2 {
        return Err(DataError::TooFewAreas { m, min: p + 2 });
    }
    for i in 0..m {
        if !raw.y[i].is_finite() {
            return Err(DataError::NonFinite { area: i, field: "y" });
        }
        if !raw.d[i].is_finite() {
            return Err(DataError::NonFinite { area: i, field: "D" });
        }
        if raw.d[i] <= 0.0 {
            return Err(DataError::NonPositiveVariance(i));
        }
        for j in 0..p {
            if !raw.x[(i, j)].is_finite() {
                return Err(DataError::NonFinite { area: i, field: "x" });
            }
        }
    }
    let sv = raw.x.clone().singular_values();
    let s_max = sv.max();
    let s_min = sv.min();
    if s_max <= 0.0 || s_min <= RANK_TOL * s_max {
        return Err(DataError::RankDeficient);
    }
    Ok(raw)
}

/// Model parameters psi = (beta, A).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub a: f64,
}

impl ModelParams {
    pub fn new(beta: DVector<f64>, a: f64) -> Self {
        Self { beta, a }
    }

    /// Linear predictor x_i' beta.
    pub fn predict(&self, x: &DVector<f64>) -> f64 {
        self.beta.dot(x)
    }
}

/// One fitted parameter vector for a single value of gamma (gamma = 0 is
/// the maximum likelihood fit).
#[derive(Debug, Clone)]
pub struct GammaFit {
    pub gamma: f64,
    pub params: ModelParams,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub objective_value: f64,
    pub a_floored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Eb,
    Gd,
    Dr,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Eb => "EB",
            Method::Gd => "GD",
            Method::Dr => "DR",
        }
    }
}

/// Per-area point estimate and interval for one method.
#[derive(Debug, Clone, Serialize)]
pub struct AreaInference {
    pub theta_hat: f64,
    pub s2: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: Method,
    pub gamma: f64,
    pub s2_floored: bool,
}

/// Normal density at `y` with mean `mu` and variance `var`.
pub fn normal_pdf(y: f64, mu: f64, var: f64) -> Result<f64, DistError> {
    if var <= 0.0 {
        return Err(DistError::NonPositiveVariance);
    }
    let z = (y - mu) * (y - mu) / (2.0 * var);
    Ok((2.0 * std::f64::consts::PI * var).sqrt().recip() * (-z).exp())
}

/// Standard normal cumulative distribution function.
///
/// Hart-style rational approximation (double precision, ~1e-15).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x.abs();
    let c = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.071_067_811_865_47 {
            let mut n = 3.526_249_659_989_11e-2 * z + 0.700_383_064_443_688;
            n = n * z + 6.373_962_203_531_65;
            n = n * z + 33.912_866_078_383;
            n = n * z + 112.079_291_497_871;
            n = n * z + 221.213_596_169_931;
            n = n * z + 220.206_867_912_376;
            let mut d = 8.838_834_764_831_84e-2 * z + 1.755_667_163_182_64;
            d = d * z + 16.064_177_579_207;
            d = d * z + 86.780_732_202_946_1;
            d = d * z + 296.564_248_779_674;
            d = d * z + 637.333_633_378_831;
            d = d * z + 793.826_512_519_948;
            d = d * z + 440.413_735_824_752;
            e * n / d
        } else {
            let mut b = z + 0.65;
            b = z + 4.0 / b;
            b = z + 3.0 / b;
            b = z + 2.0 / b;
            b = z + 1.0 / b;
            e / (b * 2.506_628_274_631_000_5)
        }
    };
    if x <= 0.0 {
        c
    } else {
        1.0 - c
    }
}

/// Standard normal quantile: the z with `Phi(z) = prob`.
///
/// Acklam's rational approximation followed by one Newton step against the
/// implemented CDF.
pub fn normal_quantile(prob: f64) -> Result<f64, DistError> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(DistError::OutOfRange);
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut z = if prob < P_LOW {
        let q = (-2.0 * prob.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if prob <= 1.0 - P_LOW {
        let q = prob - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - prob).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Newton polish step.
    let pdf = normal_pdf(z, 0.0, 1.0).expect("unit variance");
    if pdf > 0.0 {
        z -= (normal_cdf(z) - prob) / pdf;
    }
    Ok(z)
}
