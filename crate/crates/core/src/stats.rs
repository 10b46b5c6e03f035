//! Shared numerics: robust normal tail functions, the zero-count mixture
//! terms of the zero-inflated likelihood, truncated-normal draws, and small
//! statistical utilities used across the samplers and tests.

use rand::Rng;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;

#[inline]
pub fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// log Phi(x), accurate far into the lower tail.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > -20.0 {
        // erfc is accurate here and 0.5*erfc does not underflow
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // asymptotic expansion of Mills ratio
        let x2 = x * x;
        let correction = (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln();
        -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + correction
    }
}

#[inline]
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
pub fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// log density of Gamma(shape, rate) at x > 0.
pub fn gamma_lpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// log density of InverseGamma(shape, scale) at x > 0.
pub fn inv_gamma_lpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// log density of Beta(a, b) at x in (0,1).
pub fn beta_lpdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return f64::NEG_INFINITY;
    }
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

/// Terms of the marginalized zero-count edge contribution.
///
/// For an edge with N = 0 the likelihood factor is
/// `D = (1 - Phi(pi)) + Phi(pi) * exp(-exp(lam))`. This returns log D, the
/// partials of log D in pi and lam, and P(Xi = 1 | N = 0).
#[derive(Debug, Clone, Copy)]
pub struct ZeroCountTerms {
    pub log_mix: f64,
    pub d_pi: f64,
    pub d_lam: f64,
    pub p_xi1: f64,
}

pub fn zero_count_terms(pi: f64, lam: f64) -> ZeroCountTerms {
    let elam = lam.exp(); // may be +inf; handled below
    let log_phi_neg = log_normal_cdf(-pi); // log(1 - Phi(pi))
    let log_phi_pos = log_normal_cdf(pi);
    let v = log_phi_pos - elam;
    let log_mix = logsumexp2(log_phi_neg, v);
    let ln_pdf = -0.5 * pi * pi - LN_SQRT_2PI;
    // phi/D is bounded because D >= max(1 - Phi, Phi e^{-e^lam})
    let d_pi = (-elam).exp_m1() * (ln_pdf - log_mix).exp();
    let d_lam = if v == f64::NEG_INFINITY {
        0.0
    } else {
        -(v + lam - log_mix).exp()
    };
    let p_xi1 = if v == f64::NEG_INFINITY {
        0.0
    } else {
        (v - log_mix).exp()
    };
    ZeroCountTerms {
        log_mix,
        d_pi,
        d_lam,
        p_xi1,
    }
}

/// Draw from N(mean, 1) truncated to (0, inf) if `positive`, else (-inf, 0].
///
/// Robert's exponential-rejection scheme keeps the far tail (|mean| up to
/// ~30) exact and finite.
pub fn truncated_normal<R: Rng + ?Sized>(positive: bool, mean: f64, rng: &mut R) -> f64 {
    // standardized lower bound for a positive draw
    let a = if positive { -mean } else { mean };
    let z = if a <= 0.45 {
        // plain rejection from the normal
        loop {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            if x >= a {
                break x;
            }
        }
    } else {
        // shifted-exponential proposal
        let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let u: f64 = rng.gen::<f64>();
            let x = a - u.ln() / alpha;
            let d = x - alpha;
            let accept: f64 = rng.gen();
            if accept <= (-0.5 * d * d).exp() {
                break x;
            }
        }
    };
    if positive {
        mean + z
    } else {
        mean - z
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// One-sample Kolmogorov–Smirnov test against a CDF; returns (statistic, p).
pub fn ks_test<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        let upper = (i as f64 + 1.0) / n - c;
        let lower = c - i as f64 / n;
        d = d.max(upper).max(lower);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        p += term;
    }
    (d, p.clamp(0.0, 1.0))
}

/// Batch-means standard error of a (possibly autocorrelated) chain mean.
pub fn batch_means_se(chain: &[f64]) -> f64 {
    let n = chain.len();
    let b = (n as f64).sqrt().floor() as usize;
    let nb = n / b;
    let used = nb * b;
    let mean = chain[..used].iter().sum::<f64>() / used as f64;
    let mut var = 0.0;
    for block in chain[..used].chunks(b) {
        let bm = block.iter().sum::<f64>() / b as f64;
        var += (bm - mean).powi(2);
    }
    var /= (nb - 1) as f64;
    (var / nb as f64).sqrt()
}
