//! Small GLM fitters: weighted least squares and Fisher-scoring IRLS for
//! Poisson (log link) and probit regression. Used by the per-edge baseline
//! and by basis-size tuning.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

pub const MAX_ITERS: usize = 50;
pub const TOL: f64 = 1e-8;

#[derive(Error, Debug)]
pub enum GlmError {
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("IRLS did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty design")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    /// Maximized log-likelihood (Gaussian: error variance profiled out).
    pub loglik: f64,
    /// sigma^2 estimate for Gaussian fits, 1 otherwise.
    pub dispersion: f64,
    pub iters: usize,
}

/// Solve (X'WX) b = X'Wy given the assembled normal equations.
pub fn solve_normal(xtwx: DMatrix<f64>, xtwy: DVector<f64>) -> Result<Vec<f64>, GlmError> {
    let chol = Cholesky::new(xtwx).ok_or(GlmError::RankDeficient)?;
    Ok(chol.solve(&xtwy).as_slice().to_vec())
}

fn check_dims(rows: &[Vec<f64>], y_len: usize) -> Result<usize, GlmError> {
    if rows.is_empty() {
        return Err(GlmError::Empty);
    }
    let p = rows[0].len();
    if rows.len() != y_len {
        return Err(GlmError::Dimension(format!(
            "{} rows vs {} responses",
            rows.len(),
            y_len
        )));
    }
    if rows.iter().any(|r| r.len() != p) {
        return Err(GlmError::Dimension("ragged design".into()));
    }
    Ok(p)
}

fn assemble(
    rows: &[Vec<f64>],
    w: impl Fn(usize) -> f64,
    z: impl Fn(usize) -> f64,
    p: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for (i, row) in rows.iter().enumerate() {
        let wi = w(i);
        let zi = z(i);
        for a in 0..p {
            let wa = wi * row[a];
            xtwy[a] += wa * zi;
            for b in a..p {
                xtwx[(a, b)] += wa * row[b];
            }
        }
    }
    // mirror the upper triangle
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    (xtwx, xtwy)
}

/// Weighted least squares for y_i ~ N(x_i'b, sigma^2 / w_i).
pub fn wls(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<GlmFit, GlmError> {
    let p = check_dims(rows, y.len())?;
    if w.len() != y.len() {
        return Err(GlmError::Dimension("weight length".into()));
    }
    let (xtwx, xtwy) = assemble(rows, |i| w[i], |i| y[i], p);
    let coef = solve_normal(xtwx, xtwy)?;
    let n = y.len() as f64;
    let mut wrss = 0.0;
    let mut sum_ln_w = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let fit: f64 = row.iter().zip(&coef).map(|(x, b)| x * b).sum();
        let r = y[i] - fit;
        wrss += w[i] * r * r;
        sum_ln_w += w[i].ln();
    }
    let sigma2 = (wrss / n).max(f64::MIN_POSITIVE);
    let loglik =
        -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + 0.5 * sum_ln_w;
    Ok(GlmFit {
        coef,
        loglik,
        dispersion: sigma2,
        iters: 1,
    })
}

fn poisson_loglik(rows: &[Vec<f64>], y: &[f64], coef: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let eta: f64 = row.iter().zip(coef).map(|(x, b)| x * b).sum();
            yi * eta - eta.exp() - crate::stats::ln_factorial(yi as u64)
        })
        .sum()
}

/// Poisson regression with log link via Fisher scoring.
pub fn irls_poisson(rows: &[Vec<f64>], y: &[f64]) -> Result<GlmFit, GlmError> {
    let p = check_dims(rows, y.len())?;
    let mut coef = vec![0.0; p];
    // start from a flat intercept-free fit at the mean rate
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let eta0 = (ybar.max(1e-8)).ln();
    let mut eta: Vec<f64> = vec![eta0; y.len()];
    for iter in 1..=MAX_ITERS {
        let (xtwx, xtwy) = assemble(
            rows,
            |i| eta[i].clamp(-30.0, 30.0).exp(),
            |i| {
                let m = eta[i].clamp(-30.0, 30.0).exp();
                eta[i] + (y[i] - m) / m
            },
            p,
        );
        let new = solve_normal(xtwx, xtwy)?;
        let delta = new
            .iter()
            .zip(&coef)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        coef = new;
        for (i, row) in rows.iter().enumerate() {
            eta[i] = row.iter().zip(&coef).map(|(x, b)| x * b).sum();
        }
        if delta < TOL * (1.0 + coef.iter().fold(0.0f64, |m, c| m.max(c.abs()))) {
            return Ok(GlmFit {
                loglik: poisson_loglik(rows, y, &coef),
                coef,
                dispersion: 1.0,
                iters: iter,
            });
        }
    }
    Err(GlmError::NonConvergence(MAX_ITERS))
}

fn probit_loglik(rows: &[Vec<f64>], y: &[f64], coef: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let eta: f64 = row.iter().zip(coef).map(|(x, b)| x * b).sum();
            if yi > 0.5 {
                crate::stats::log_normal_cdf(eta)
            } else {
                crate::stats::log_normal_cdf(-eta)
            }
        })
        .sum()
}

/// Probit regression (y in {0,1}) via Fisher scoring.
pub fn irls_probit(rows: &[Vec<f64>], y: &[f64]) -> Result<GlmFit, GlmError> {
    let p = check_dims(rows, y.len())?;
    let mut coef = vec![0.0; p];
    let mut eta: Vec<f64> = vec![0.0; y.len()];
    for iter in 1..=MAX_ITERS {
        let stats: Vec<(f64, f64)> = eta
            .iter()
            .zip(y)
            .map(|(&e, &yi)| {
                // clamp only the weight pieces; the working response keeps
                // the true eta so separated data drifts instead of settling
                let ec = e.clamp(-8.0, 8.0);
                let phi = crate::stats::normal_pdf(ec);
                let cap = crate::stats::normal_cdf(ec);
                let var = (cap * (1.0 - cap)).max(1e-12);
                let w = phi * phi / var;
                let z = e + (yi - cap) / phi;
                (w, z)
            })
            .collect();
        let (xtwx, xtwy) = assemble(rows, |i| stats[i].0, |i| stats[i].1, p);
        let new = solve_normal(xtwx, xtwy)?;
        let delta = new
            .iter()
            .zip(&coef)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        coef = new;
        for (i, row) in rows.iter().enumerate() {
            eta[i] = row.iter().zip(&coef).map(|(x, b)| x * b).sum();
        }
        if delta < TOL * (1.0 + coef.iter().fold(0.0f64, |m, c| m.max(c.abs()))) {
            return Ok(GlmFit {
                loglik: probit_loglik(rows, y, &coef),
                coef,
                dispersion: 1.0,
                iters: iter,
            });
        }
    }
    Err(GlmError::NonConvergence(MAX_ITERS))
}
