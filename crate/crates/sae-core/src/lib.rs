//! Robust empirical Bayes small area estimation under the area-level
//! random effects model.
//!
//! The crate provides:
//! - the model layer ([`model`]): datasets, parameters, validation, and
//!   normal distribution helpers;
//! - fitting objectives ([`objective`]): the marginal log-likelihood and
//!   the gamma-divergence objective with analytic gradients;
//! - solvers ([`estimator`]): maximum likelihood and gamma-divergence
//!   fits;
//! - inference ([`inference`]): robust posterior moments, three interval
//!   families, and data-driven selection of gamma;
//! - a Monte Carlo harness ([`simulator`]) with counter-based,
//!   order-independent random number generation ([`rng`]) and adaptive
//!   quadrature ([`quadrature`]) for the separability diagnostic.

pub mod estimator;
pub mod inference;
pub mod model;
pub mod objective;
pub mod quadrature;
pub mod rng;
pub mod simulator;

pub use estimator::{fit_gamma, fit_gamma_warm, fit_gamma_with_ml, fit_ml, SolverConfig};
pub use inference::{
    analyze, direct_interval, make_interval, population_q, posterior_moments,
    robust_posterior_moments, select_gamma, total_robust_variance, Analysis, GammaGrid,
    GammaSelection, RobustMoments, WeightsMode, S2_FLOOR,
};
pub use model::{
    normal_cdf, normal_pdf, normal_quantile, validate_dataset, AreaDataset, AreaInference,
    DataError, GammaFit, Method, ModelParams, A_MIN,
};
pub use simulator::{
    generate_replication, run_fixed_gamma_study, run_monte_carlo, separability_rho, Contamination,
    MethodStats, Replication, ScenarioId, SimError, SimReport, SimScenario,
};
