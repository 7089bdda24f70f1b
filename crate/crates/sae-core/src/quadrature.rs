//! Adaptive Gauss-Legendre quadrature for the Gaussian overlap integrals
//! behind the separability diagnostic.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QuadratureError {
    #[error("adaptive quadrature refinement exceeded depth {0}")]
    NotConverged(usize),
}

pub const MAX_DEPTH: usize = 30;

/// Bisect at least this deep before trusting the error estimate, so narrow
/// features between the coarse panel nodes cannot be silently skipped.
const MIN_DEPTH: usize = 10;

// 10-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.148_874_338_981_631_2,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_9,
    0.269_266_719_309_996_3,
    0.219_086_362_515_982_0,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_1,
];

fn gl10(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut sum = 0.0;
    for k in 0..5 {
        let dx = h * GL_NODES[k];
        sum += GL_WEIGHTS[k] * (f(c - dx) + f(c + dx));
    }
    sum * h
}

fn refine(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64, QuadratureError> {
    let mid = 0.5 * (a + b);
    let left = gl10(f, a, mid);
    let right = gl10(f, mid, b);
    let sum = left + right;
    // the relative branch stops refinement once the difference sits at the
    // roundoff floor of the panel values
    let close = (sum - whole).abs() <= tol
        || (sum - whole).abs() <= 4e-15 * sum.abs().max(whole.abs());
    if depth >= MIN_DEPTH && close {
        return Ok(sum);
    }
    if depth >= MAX_DEPTH {
        return Err(QuadratureError::NotConverged(MAX_DEPTH));
    }
    Ok(refine(f, a, mid, left, 0.5 * tol, depth + 1)?
        + refine(f, mid, b, right, 0.5 * tol, depth + 1)?)
}

/// Integrates `f` over `[a, b]` to absolute tolerance `abs_tol` by
/// bisection refinement of 10-point Gauss-Legendre panels.
pub fn adaptive_gauss_legendre(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    abs_tol: f64,
) -> Result<f64, QuadratureError> {
    if a == b {
        return Ok(0.0);
    }
    let whole = gl10(&f, a, b);
    refine(&f, a, b, whole, abs_tol, 0)
}
