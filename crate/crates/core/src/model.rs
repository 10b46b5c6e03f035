//! Parameter state and joint log-posterior of the graphon-regularized
//! regression model: a probit layer for edge presence, a zero-inflated
//! Poisson layer for edge counts, and a heteroscedastic Gaussian layer for
//! log mean edge length, tied together by tensor-product graphon functions
//! of per-node latents and subject random effects.

use crate::data::ConnectomeDataset;
use crate::splines::{triangle_len, BasisConfig, SymmetricCoeffMatrix};
use crate::stats::{
    beta_lpdf, gamma_lpdf, inv_gamma_lpdf, ln_factorial, log_normal_cdf, logit, normal_lpdf,
    sigmoid, zero_count_terms, LN_SQRT_2PI,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Indices of the three regression layers.
pub const LENGTH: usize = 0;
pub const PRESENCE: usize = 1;
pub const COUNT: usize = 2;
pub const NUM_LAYERS: usize = 3;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("non-finite value in block {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Spline(#[from] crate::splines::SplineError),
}

/// Prior on the delta latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPrior {
    /// Two-component mixture: uniform with weight q, Beta(M, M) otherwise,
    /// with an explicit per-node indicator.
    BetaMixture,
    /// Same logit-normal law as the xi latents.
    LogitNormal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Prior sd of graphon coefficients and latent logits.
    pub a: f64,
    /// Beta shape of the delta mixture component.
    pub m_shape: f64,
    /// Mixture weight of the uniform component for delta.
    pub q: f64,
    /// Inverse-gamma base measure of the DP scale mixture.
    pub b1: f64,
    pub b2: f64,
    /// Gamma prior on the DP precision.
    pub c1: f64,
    pub c2: f64,
    /// Gamma prior on the error precision 1/sigma^2.
    pub d1: f64,
    pub d2: f64,
    pub latent_prior: LatentPrior,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a: 10.0,
            m_shape: 10.0,
            q: 0.5,
            b1: 0.1,
            b2: 0.1,
            c1: 10.0,
            c2: 10.0,
            d1: 0.1,
            d2: 0.1,
            latent_prior: LatentPrior::BetaMixture,
        }
    }
}

/// Full parameter state of the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    /// Baseline graphon coefficients, one per layer.
    pub theta: Vec<SymmetricCoeffMatrix>,
    /// Covariate-effect graphon coefficients, `gamma[layer][covariate]`.
    pub gamma: Vec<Vec<SymmetricCoeffMatrix>>,
    /// Node latents for the baselines, in (0,1).
    pub xi: Vec<f64>,
    /// Node latents for the covariate effects, in (0,1).
    pub delta: Vec<f64>,
    /// Mixture-component indicators for delta.
    pub ind: Vec<bool>,
    /// Subject random effects, `eta[layer][subject]`.
    pub eta: Vec<Vec<f64>>,
    /// Per-subject random-effect scales, `tau2[layer][subject]`.
    pub tau2: Vec<Vec<f64>>,
    /// DP precision per layer.
    pub alpha: Vec<f64>,
    /// Error variance of the log-length layer.
    pub sigma2: f64,
    /// Zero-inflation indicators, `[subject][edge]`; forced 1 where N >= 1.
    pub xi_zero: Vec<Vec<bool>>,
}

impl ModelState {
    /// Neutral starting state: zero coefficients, evenly spread latents,
    /// unit scales, indicators on where counts force them.
    pub fn neutral(data: &ConnectomeDataset, num_basis: usize) -> Self {
        let j = data.num_regions();
        let n = data.num_subjects();
        let d = data.num_covariates();
        let latents: Vec<f64> = (0..j).map(|r| (r as f64 + 1.0) / (j as f64 + 1.0)).collect();
        let xi_zero = data
            .counts
            .iter()
            .map(|row| row.iter().map(|&c| c >= 1).collect())
            .collect();
        ModelState {
            theta: (0..NUM_LAYERS).map(|_| SymmetricCoeffMatrix::zeros(num_basis)).collect(),
            gamma: (0..NUM_LAYERS)
                .map(|_| (0..d).map(|_| SymmetricCoeffMatrix::zeros(num_basis)).collect())
                .collect(),
            xi: latents.clone(),
            delta: latents,
            ind: vec![true; j],
            eta: vec![vec![0.0; n]; NUM_LAYERS],
            tau2: vec![vec![1.0; n]; NUM_LAYERS],
            alpha: vec![1.0; NUM_LAYERS],
            sigma2: 1.0,
            xi_zero,
        }
    }

    pub fn num_basis(&self) -> usize {
        self.theta[0].dim()
    }

    pub fn num_covariates(&self) -> usize {
        self.gamma[0].len()
    }

    /// Check every block for NaN/inf, naming the offender.
    pub fn check_finite(&self) -> Result<(), ModelError> {
        let bad = |name: &str| ModelError::NonFinite(name.to_string());
        for (t, th) in self.theta.iter().enumerate() {
            if th.upper().iter().any(|v| !v.is_finite()) {
                return Err(bad(&format!("theta{}", t + 1)));
            }
        }
        for (t, gs) in self.gamma.iter().enumerate() {
            for (l, g) in gs.iter().enumerate() {
                if g.upper().iter().any(|v| !v.is_finite()) {
                    return Err(bad(&format!("gamma{}[{}]", t + 1, l)));
                }
            }
        }
        if self.xi.iter().any(|v| !v.is_finite()) {
            return Err(bad("xi"));
        }
        if self.delta.iter().any(|v| !v.is_finite()) {
            return Err(bad("delta"));
        }
        for (t, e) in self.eta.iter().enumerate() {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(bad(&format!("eta{}", t + 1)));
            }
        }
        for (t, tau) in self.tau2.iter().enumerate() {
            if tau.iter().any(|v| !v.is_finite()) {
                return Err(bad(&format!("tau2[{}]", t + 1)));
            }
        }
        if self.alpha.iter().any(|v| !v.is_finite()) || !self.sigma2.is_finite() {
            return Err(bad("scales"));
        }
        Ok(())
    }
}

/// Per-node basis evaluations for the current latents.
pub struct BasisCache {
    pub b_xi: Vec<Vec<f64>>,
    pub db_xi: Vec<Vec<f64>>,
    pub b_delta: Vec<Vec<f64>>,
    pub db_delta: Vec<Vec<f64>>,
}

impl BasisCache {
    pub fn compute(state: &ModelState, cfg: &BasisConfig) -> Result<Self, ModelError> {
        let mut b_xi = Vec::with_capacity(state.xi.len());
        let mut db_xi = Vec::with_capacity(state.xi.len());
        for &x in &state.xi {
            let (b, db) = cfg.eval_with_deriv(x)?;
            b_xi.push(b);
            db_xi.push(db);
        }
        let mut b_delta = Vec::with_capacity(state.delta.len());
        let mut db_delta = Vec::with_capacity(state.delta.len());
        for &x in &state.delta {
            let (b, db) = cfg.eval_with_deriv(x)?;
            b_delta.push(b);
            db_delta.push(db);
        }
        Ok(Self {
            b_xi,
            db_xi,
            b_delta,
            db_delta,
        })
    }
}

/// Per-edge graphon values: baselines and covariate effects.
pub struct EdgeEffects {
    /// `base[layer][edge]`
    pub base: Vec<Vec<f64>>,
    /// `effect[layer][covariate][edge]`
    pub effect: Vec<Vec<Vec<f64>>>,
}

impl EdgeEffects {
    pub fn compute(state: &ModelState, data: &ConnectomeDataset, basis: &BasisCache) -> Self {
        let ne = data.num_edges();
        let d = state.num_covariates();
        let mut base = vec![vec![0.0; ne]; NUM_LAYERS];
        let mut effect = vec![vec![vec![0.0; ne]; d]; NUM_LAYERS];
        for (e, &(j, k)) in data.edges.iter().enumerate() {
            for t in 0..NUM_LAYERS {
                base[t][e] = state.theta[t].quad_form(&basis.b_xi[j], &basis.b_xi[k]);
                for l in 0..d {
                    effect[t][l][e] =
                        state.gamma[t][l].quad_form(&basis.b_delta[j], &basis.b_delta[k]);
                }
            }
        }
        Self { base, effect }
    }
}

/// Materialized linear predictors, flat `[subject * num_edges + edge]`.
pub struct Predictors {
    pub mu: Vec<f64>,
    pub pi: Vec<f64>,
    pub lam: Vec<f64>,
    pub num_edges: usize,
}

impl Predictors {
    pub fn compute(state: &ModelState, data: &ConnectomeDataset, cfg: &BasisConfig) -> Result<Self, ModelError> {
        let basis = BasisCache::compute(state, cfg)?;
        let effects = EdgeEffects::compute(state, data, &basis);
        Ok(Self::from_effects(state, data, &effects))
    }

    pub fn from_effects(state: &ModelState, data: &ConnectomeDataset, effects: &EdgeEffects) -> Self {
        let n = data.num_subjects();
        let ne = data.num_edges();
        let d = state.num_covariates();
        let mut out = Self {
            mu: vec![0.0; n * ne],
            pi: vec![0.0; n * ne],
            lam: vec![0.0; n * ne],
            num_edges: ne,
        };
        for i in 0..n {
            let z = &data.covariates[i];
            for (t, dest) in [&mut out.mu, &mut out.pi, &mut out.lam].into_iter().enumerate() {
                let eta = state.eta[t][i];
                let row = &mut dest[i * ne..(i + 1) * ne];
                row.copy_from_slice(&effects.base[t]);
                for l in 0..d {
                    let zl = z[l];
                    if zl != 0.0 {
                        for (v, g) in row.iter_mut().zip(&effects.effect[t][l]) {
                            *v += zl * g;
                        }
                    }
                }
                for v in row.iter_mut() {
                    *v += eta;
                }
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, i: usize, e: usize) -> (f64, f64, f64) {
        let idx = i * self.num_edges + e;
        (self.mu[idx], self.pi[idx], self.lam[idx])
    }
}

/// Linear predictors (mu, pi, lambda) for one subject/edge cell.
pub fn linear_predictors(
    state: &ModelState,
    data: &ConnectomeDataset,
    cfg: &BasisConfig,
    subject: usize,
    j: usize,
    k: usize,
) -> Result<(f64, f64, f64), ModelError> {
    if subject >= data.num_subjects() {
        return Err(ModelError::IndexOutOfRange(format!("subject {subject}")));
    }
    let (j, k) = if j <= k { (j, k) } else { (k, j) };
    if k >= data.num_regions() || (j == k && !data.self_edges) {
        return Err(ModelError::IndexOutOfRange(format!("edge ({j},{k})")));
    }
    let bj = cfg.eval(state.xi[j])?;
    let bk = cfg.eval(state.xi[k])?;
    let dj = cfg.eval(state.delta[j])?;
    let dk = cfg.eval(state.delta[k])?;
    let z = &data.covariates[subject];
    let mut vals = [0.0; NUM_LAYERS];
    for (t, v) in vals.iter_mut().enumerate() {
        *v = state.theta[t].quad_form(&bj, &bk);
        for (l, &zl) in z.iter().enumerate() {
            *v += zl * state.gamma[t][l].quad_form(&dj, &dk);
        }
        *v += state.eta[t][subject];
    }
    Ok((vals[LENGTH], vals[PRESENCE], vals[COUNT]))
}

/// Per-cell derivatives of the log-likelihood in (mu, pi, lambda).
pub struct LikelihoodWeights {
    pub d_mu: Vec<f64>,
    pub d_pi: Vec<f64>,
    pub d_lam: Vec<f64>,
}

/// One pass over all (subject, edge) cells of the Xi-marginalized
/// log-likelihood; optionally collects per-cell weights for gradients.
pub fn likelihood_pass(
    data: &ConnectomeDataset,
    preds: &Predictors,
    sigma2: f64,
    want_weights: bool,
) -> (f64, Option<LikelihoodWeights>) {
    let n = data.num_subjects();
    let ne = data.num_edges();
    let mut total = 0.0;
    let mut weights = if want_weights {
        Some(LikelihoodWeights {
            d_mu: vec![0.0; n * ne],
            d_pi: vec![0.0; n * ne],
            d_lam: vec![0.0; n * ne],
        })
    } else {
        None
    };
    for i in 0..n {
        for e in 0..ne {
            let idx = i * ne + e;
            let count = data.counts[i][e];
            let (mu, pi, lam) = (preds.mu[idx], preds.pi[idx], preds.lam[idx]);
            if count >= 1 {
                let nf = count as f64;
                let log_l = data.lengths[i][e].expect("length present where N >= 1").ln();
                let resid = log_l - mu;
                let lphi = log_normal_cdf(pi);
                total += lphi + nf * lam - lam.exp() - ln_factorial(count);
                total += -nf * resid * resid / (2.0 * sigma2)
                    - 0.5 * ((2.0 * std::f64::consts::PI * sigma2 / nf).ln());
                if let Some(w) = weights.as_mut() {
                    w.d_mu[idx] = nf * resid / sigma2;
                    w.d_pi[idx] = (-0.5 * pi * pi - LN_SQRT_2PI - lphi).exp();
                    w.d_lam[idx] = nf - lam.exp();
                }
            } else {
                let t = zero_count_terms(pi, lam);
                total += t.log_mix;
                if let Some(w) = weights.as_mut() {
                    w.d_pi[idx] = t.d_pi;
                    w.d_lam[idx] = t.d_lam;
                }
            }
        }
    }
    (total, weights)
}

/// Xi-marginalized log-likelihood (the density targeted by the HMC blocks).
pub fn log_likelihood(
    state: &ModelState,
    data: &ConnectomeDataset,
    cfg: &BasisConfig,
) -> Result<f64, ModelError> {
    state.check_finite()?;
    let preds = Predictors::compute(state, data, cfg)?;
    Ok(likelihood_pass(data, &preds, state.sigma2, false).0)
}

/// Log-likelihood conditional on the explicit zero-inflation indicators.
pub fn log_likelihood_given_xi(
    state: &ModelState,
    data: &ConnectomeDataset,
    cfg: &BasisConfig,
) -> Result<f64, ModelError> {
    state.check_finite()?;
    let preds = Predictors::compute(state, data, cfg)?;
    let ne = data.num_edges();
    let mut total = 0.0;
    for i in 0..data.num_subjects() {
        for e in 0..ne {
            let idx = i * ne + e;
            let count = data.counts[i][e];
            let (mu, pi, lam) = (preds.mu[idx], preds.pi[idx], preds.lam[idx]);
            if count >= 1 {
                let nf = count as f64;
                let log_l = data.lengths[i][e].unwrap().ln();
                let resid = log_l - mu;
                total += log_normal_cdf(pi) + nf * lam - lam.exp() - ln_factorial(count);
                total += -nf * resid * resid / (2.0 * sigma_term(state.sigma2, nf).0)
                    - sigma_term(state.sigma2, nf).1;
            } else if state.xi_zero[i][e] {
                total += log_normal_cdf(pi) - lam.exp();
            } else {
                total += log_normal_cdf(-pi);
            }
        }
    }
    Ok(total)
}

#[inline]
fn sigma_term(sigma2: f64, nf: f64) -> (f64, f64) {
    (sigma2, 0.5 * (2.0 * std::f64::consts::PI * sigma2 / nf).ln())
}

/// Joint log-prior of the state. Off-support states yield -inf (never NaN).
pub fn log_prior(state: &ModelState, hyper: &Hyperparams) -> Result<f64, ModelError> {
    state.check_finite()?;
    let a = hyper.a;
    let mut total = 0.0;
    for th in &state.theta {
        for &v in th.upper() {
            total += normal_lpdf(v, 0.0, a);
        }
    }
    for gs in &state.gamma {
        for g in gs {
            for &v in g.upper() {
                total += normal_lpdf(v, 0.0, a);
            }
        }
    }
    for &x in &state.xi {
        if !(0.0 < x && x < 1.0) {
            return Ok(f64::NEG_INFINITY);
        }
        // logit-normal density over xi itself (Jacobian included)
        total += normal_lpdf(logit(x), 0.0, a) - (x * (1.0 - x)).ln();
    }
    match hyper.latent_prior {
        LatentPrior::BetaMixture => {
            let m = hyper.m_shape;
            for (jdx, &d) in state.delta.iter().enumerate() {
                if !(0.0 < d && d < 1.0) {
                    return Ok(f64::NEG_INFINITY);
                }
                let ind = state.ind[jdx];
                if ind {
                    total += hyper.q.ln(); // uniform component has density 1
                } else {
                    total += (1.0 - hyper.q).ln() + beta_lpdf(d, m, m);
                }
            }
        }
        LatentPrior::LogitNormal => {
            for &d in &state.delta {
                if !(0.0 < d && d < 1.0) {
                    return Ok(f64::NEG_INFINITY);
                }
                total += normal_lpdf(logit(d), 0.0, a) - (d * (1.0 - d)).ln();
            }
        }
    }
    for t in 0..NUM_LAYERS {
        for i in 0..state.eta[t].len() {
            let tau2 = state.tau2[t][i];
            if tau2 <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            total += normal_lpdf(state.eta[t][i], 0.0, tau2.sqrt());
            total += inv_gamma_lpdf(tau2, hyper.b1, hyper.b2);
        }
        if state.alpha[t] <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += gamma_lpdf(state.alpha[t], hyper.c1, hyper.c2);
    }
    if state.sigma2 <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    total += inv_gamma_lpdf(state.sigma2, hyper.d1, hyper.d2);
    Ok(total)
}

/// Parameter blocks updated by gradient-based proposals. Latents are
/// parameterized on the logit scale so trajectories stay in-support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmcBlock {
    Theta3,
    /// All count-layer covariate-effect matrices jointly.
    Gamma3,
    Eta3,
    Xi,
    Delta,
}

pub const HMC_BLOCKS: [HmcBlock; 5] = [
    HmcBlock::Theta3,
    HmcBlock::Gamma3,
    HmcBlock::Eta3,
    HmcBlock::Xi,
    HmcBlock::Delta,
];

impl HmcBlock {
    pub fn name(self) -> &'static str {
        match self {
            HmcBlock::Theta3 => "theta3",
            HmcBlock::Gamma3 => "gamma3",
            HmcBlock::Eta3 => "eta3",
            HmcBlock::Xi => "xi",
            HmcBlock::Delta => "delta",
        }
    }

    pub fn dim(self, state: &ModelState) -> usize {
        let p = triangle_len(state.num_basis());
        match self {
            HmcBlock::Theta3 => p,
            HmcBlock::Gamma3 => p * state.num_covariates(),
            HmcBlock::Eta3 => state.eta[COUNT].len(),
            HmcBlock::Xi => state.xi.len(),
            HmcBlock::Delta => state.delta.len(),
        }
    }
}

/// Extract the block coordinates (latents on the logit scale).
pub fn pack_block(state: &ModelState, block: HmcBlock) -> Vec<f64> {
    match block {
        HmcBlock::Theta3 => state.theta[COUNT].upper().to_vec(),
        HmcBlock::Gamma3 => state.gamma[COUNT]
            .iter()
            .flat_map(|g| g.upper().iter().copied())
            .collect(),
        HmcBlock::Eta3 => state.eta[COUNT].clone(),
        HmcBlock::Xi => state.xi.iter().map(|&x| logit(x)).collect(),
        HmcBlock::Delta => state.delta.iter().map(|&x| logit(x)).collect(),
    }
}

/// Write block coordinates back into the state.
pub fn set_block(state: &mut ModelState, block: HmcBlock, coords: &[f64]) {
    match block {
        HmcBlock::Theta3 => state.theta[COUNT].upper_mut().copy_from_slice(coords),
        HmcBlock::Gamma3 => {
            let p = triangle_len(state.num_basis());
            for (l, chunk) in coords.chunks(p).enumerate() {
                state.gamma[COUNT][l].upper_mut().copy_from_slice(chunk);
            }
        }
        HmcBlock::Eta3 => state.eta[COUNT].copy_from_slice(coords),
        HmcBlock::Xi => {
            for (x, &c) in state.xi.iter_mut().zip(coords) {
                *x = sigmoid(c);
            }
        }
        HmcBlock::Delta => {
            for (x, &c) in state.delta.iter_mut().zip(coords) {
                *x = sigmoid(c);
            }
        }
    }
}

/// Log-prior restricted to a block, in the block's own coordinates.
pub fn block_log_prior(state: &ModelState, hyper: &Hyperparams, block: HmcBlock) -> f64 {
    let a2 = hyper.a * hyper.a;
    match block {
        HmcBlock::Theta3 => -state.theta[COUNT].upper().iter().map(|v| v * v).sum::<f64>() / (2.0 * a2),
        HmcBlock::Gamma3 => {
            -state.gamma[COUNT]
                .iter()
                .flat_map(|g| g.upper().iter())
                .map(|v| v * v)
                .sum::<f64>()
                / (2.0 * a2)
        }
        HmcBlock::Eta3 => state.eta[COUNT]
            .iter()
            .zip(&state.tau2[COUNT])
            .map(|(&e, &t2)| -e * e / (2.0 * t2))
            .sum(),
        HmcBlock::Xi => state.xi.iter().map(|&x| -logit(x).powi(2) / (2.0 * a2)).sum(),
        HmcBlock::Delta => match hyper.latent_prior {
            LatentPrior::LogitNormal => {
                state.delta.iter().map(|&x| -logit(x).powi(2) / (2.0 * a2)).sum()
            }
            LatentPrior::BetaMixture => {
                // density over the logit coordinate: mixture density times
                // the Jacobian delta(1-delta)
                let m = hyper.m_shape;
                state
                    .delta
                    .iter()
                    .zip(&state.ind)
                    .map(|(&d, &ind)| {
                        let mix = if ind { 0.0 } else { beta_lpdf(d, m, m) };
                        mix + (d * (1.0 - d)).ln()
                    })
                    .sum()
            }
        },
    }
}

/// Add the block prior's gradient (in block coordinates) into `grad`.
pub fn block_prior_grad(state: &ModelState, hyper: &Hyperparams, block: HmcBlock, grad: &mut [f64]) {
    let a2 = hyper.a * hyper.a;
    match block {
        HmcBlock::Theta3 => {
            for (g, &v) in grad.iter_mut().zip(state.theta[COUNT].upper()) {
                *g -= v / a2;
            }
        }
        HmcBlock::Gamma3 => {
            for (g, &v) in grad
                .iter_mut()
                .zip(state.gamma[COUNT].iter().flat_map(|g| g.upper().iter()))
            {
                *g -= v / a2;
            }
        }
        HmcBlock::Eta3 => {
            for ((g, &e), &t2) in grad.iter_mut().zip(&state.eta[COUNT]).zip(&state.tau2[COUNT]) {
                *g -= e / t2;
            }
        }
        HmcBlock::Xi => {
            for (g, &x) in grad.iter_mut().zip(&state.xi) {
                *g -= logit(x) / a2;
            }
        }
        HmcBlock::Delta => match hyper.latent_prior {
            LatentPrior::LogitNormal => {
                for (g, &x) in grad.iter_mut().zip(&state.delta) {
                    *g -= logit(x) / a2;
                }
            }
            LatentPrior::BetaMixture => {
                let m = hyper.m_shape;
                for ((g, &d), &ind) in grad.iter_mut().zip(&state.delta).zip(&state.ind) {
                    // Jacobian part: d/dy log(delta(1-delta)) = 1 - 2 delta
                    let mut gp = 1.0 - 2.0 * d;
                    if !ind {
                        gp += (m - 1.0) * (1.0 - 2.0 * d);
                    }
                    *g += gp;
                }
            }
        },
    }
}

/// Gradient of log-likelihood + block log-prior for one HMC block, in the
/// block's coordinates.
pub fn grad_log_posterior(
    state: &ModelState,
    data: &ConnectomeDataset,
    cfg: &BasisConfig,
    hyper: &Hyperparams,
    block: HmcBlock,
) -> Result<Vec<f64>, ModelError> {
    state.check_finite()?;
    let basis = BasisCache::compute(state, cfg)?;
    let effects = EdgeEffects::compute(state, data, &basis);
    let preds = Predictors::from_effects(state, data, &effects);
    let (_, weights) = likelihood_pass(data, &preds, state.sigma2, true);
    let w = weights.unwrap();
    let mut grad = vec![0.0; block.dim(state)];
    accumulate_likelihood_grad(state, data, &basis, &w, block, &mut grad);
    block_prior_grad(state, hyper, block, &mut grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFinite(format!("gradient of {}", block.name())));
    }
    Ok(grad)
}

/// Likelihood part of the block gradient given precomputed per-cell weights.
pub fn accumulate_likelihood_grad(
    state: &ModelState,
    data: &ConnectomeDataset,
    basis: &BasisCache,
    w: &LikelihoodWeights,
    block: HmcBlock,
    grad: &mut [f64],
) {
    let n = data.num_subjects();
    let ne = data.num_edges();
    let d = state.num_covariates();
    let kdim = state.num_basis();
    match block {
        HmcBlock::Theta3 => {
            for (e, &(j, k)) in data.edges.iter().enumerate() {
                let mut wsum = 0.0;
                for i in 0..n {
                    wsum += w.d_lam[i * ne + e];
                }
                SymmetricCoeffMatrix::accumulate_quad_form_grad(
                    kdim,
                    &basis.b_xi[j],
                    &basis.b_xi[k],
                    wsum,
                    grad,
                );
            }
        }
        HmcBlock::Gamma3 => {
            let p = triangle_len(kdim);
            for (e, &(j, k)) in data.edges.iter().enumerate() {
                let mut wsum = vec![0.0; d];
                for i in 0..n {
                    let wl = w.d_lam[i * ne + e];
                    for (l, ws) in wsum.iter_mut().enumerate() {
                        *ws += wl * data.covariates[i][l];
                    }
                }
                for (l, &ws) in wsum.iter().enumerate() {
                    SymmetricCoeffMatrix::accumulate_quad_form_grad(
                        kdim,
                        &basis.b_delta[j],
                        &basis.b_delta[k],
                        ws,
                        &mut grad[l * p..(l + 1) * p],
                    );
                }
            }
        }
        HmcBlock::Eta3 => {
            for (i, g) in grad.iter_mut().enumerate() {
                for e in 0..ne {
                    *g += w.d_lam[i * ne + e];
                }
            }
        }
        HmcBlock::Xi => {
            for (e, &(j, k)) in data.edges.iter().enumerate() {
                let (mut wmu, mut wpi, mut wlam) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let idx = i * ne + e;
                    wmu += w.d_mu[idx];
                    wpi += w.d_pi[idx];
                    wlam += w.d_lam[idx];
                }
                for (node, other) in [(j, k), (k, j)] {
                    if j == k && node == k {
                        continue; // self-edge: derivative handled once below
                    }
                    let mut dval = wmu
                        * state.theta[LENGTH].quad_form_du(&basis.db_xi[node], &basis.b_xi[other]);
                    dval += wpi
                        * state.theta[PRESENCE].quad_form_du(&basis.db_xi[node], &basis.b_xi[other]);
                    dval += wlam
                        * state.theta[COUNT].quad_form_du(&basis.db_xi[node], &basis.b_xi[other]);
                    let scale = if j == k { 2.0 } else { 1.0 };
                    grad[node] += scale * dval;
                }
            }
            // chain rule to the logit coordinate
            for (g, &x) in grad.iter_mut().zip(&state.xi) {
                *g *= x * (1.0 - x);
            }
        }
        HmcBlock::Delta => {
            for (e, &(j, k)) in data.edges.iter().enumerate() {
                let mut wmu = vec![0.0; d];
                let mut wpi = vec![0.0; d];
                let mut wlam = vec![0.0; d];
                for i in 0..n {
                    let idx = i * ne + e;
                    let z = &data.covariates[i];
                    for l in 0..d {
                        wmu[l] += w.d_mu[idx] * z[l];
                        wpi[l] += w.d_pi[idx] * z[l];
                        wlam[l] += w.d_lam[idx] * z[l];
                    }
                }
                for (node, other) in [(j, k), (k, j)] {
                    if j == k && node == k {
                        continue;
                    }
                    let scale = if j == k { 2.0 } else { 1.0 };
                    let mut dval = 0.0;
                    for l in 0..d {
                        dval += wmu[l]
                            * state.gamma[LENGTH][l]
                                .quad_form_du(&basis.db_delta[node], &basis.b_delta[other]);
                        dval += wpi[l]
                            * state.gamma[PRESENCE][l]
                                .quad_form_du(&basis.db_delta[node], &basis.b_delta[other]);
                        dval += wlam[l]
                            * state.gamma[COUNT][l]
                                .quad_form_du(&basis.db_delta[node], &basis.b_delta[other]);
                    }
                    grad[node] += scale * dval;
                }
            }
            for (g, &x) in grad.iter_mut().zip(&state.delta) {
                *g *= x * (1.0 - x);
            }
        }
    }
}

/// The 15 effect families (3 baselines + 3 layers x covariates).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectFamily {
    pub layer: usize,
    /// None for a baseline, Some(l) for covariate l.
    pub covariate: Option<usize>,
    pub label: String,
}

pub fn effect_families(covariate_names: &[String]) -> Vec<EffectFamily> {
    let mut fams = vec![
        EffectFamily {
            layer: LENGTH,
            covariate: None,
            label: "mu0".into(),
        },
        EffectFamily {
            layer: PRESENCE,
            covariate: None,
            label: "pi0".into(),
        },
        EffectFamily {
            layer: COUNT,
            covariate: None,
            label: "lambda0".into(),
        },
    ];
    let prefixes = ["chi", "beta", "nu"];
    for (t, prefix) in prefixes.iter().enumerate() {
        for (l, name) in covariate_names.iter().enumerate() {
            fams.push(EffectFamily {
                layer: t,
                covariate: Some(l),
                label: format!("{prefix}_{name}"),
            });
        }
    }
    fams
}

/// Reconstruct all effect matrices at the current latents. Each matrix is
/// J x J, stored row-major, and exactly symmetric.
pub fn reconstruct_effect_matrices(
    state: &ModelState,
    cfg: &BasisConfig,
    num_regions: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    state.check_finite()?;
    let basis = BasisCache::compute(state, cfg)?;
    let d = state.num_covariates();
    let nfam = NUM_LAYERS + NUM_LAYERS * d;
    let jn = num_regions;
    let mut mats = vec![vec![0.0; jn * jn]; nfam];
    for j in 0..jn {
        for k in j..jn {
            for t in 0..NUM_LAYERS {
                let v = state.theta[t].quad_form(&basis.b_xi[j], &basis.b_xi[k]);
                mats[t][j * jn + k] = v;
                mats[t][k * jn + j] = v;
                for l in 0..d {
                    let g = state.gamma[t][l].quad_form(&basis.b_delta[j], &basis.b_delta[k]);
                    let fam = NUM_LAYERS + t * d + l;
                    mats[fam][j * jn + k] = g;
                    mats[fam][k * jn + j] = g;
                }
            }
        }
    }
    Ok(mats)
}
