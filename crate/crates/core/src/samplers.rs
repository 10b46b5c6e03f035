//! Hybrid MCMC for the three-layer network model: conjugate Gibbs blocks for
//! the Gaussian and probit layers (via latent-utility augmentation), HMC for
//! the count-layer blocks and the node latents, exact flips for the mixture
//! indicators, a collapsed Dirichlet-process update for the random-effect
//! scales, and inverse-gamma updates for the error variance.

use crate::data::ConnectomeDataset;
use crate::model::{
    self, accumulate_likelihood_grad, block_log_prior, block_prior_grad, likelihood_pass,
    pack_block, set_block, BasisCache, EdgeEffects, HmcBlock, Hyperparams, LatentPrior,
    ModelState, Predictors, COUNT, LENGTH, NUM_LAYERS, PRESENCE,
};
use crate::splines::{triangle_len, BasisConfig, SymmetricCoeffMatrix};
use crate::stats::{
    beta_lpdf, log_normal_cdf, logsumexp2, normal_lpdf, truncated_normal, zero_count_terms,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Generic HMC

pub trait HmcTarget {
    fn dim(&self) -> usize;
    /// Log-density and gradient at `x`; gradient written into `grad`.
    fn logp_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// One HMC transition with `leapfrog` steps of size `step`; returns whether
/// the proposal was accepted. Non-finite Hamiltonians auto-reject.
pub fn hmc_update<T: HmcTarget, R: Rng + ?Sized>(
    target: &mut T,
    x: &mut [f64],
    step: f64,
    leapfrog: usize,
    rng: &mut R,
) -> bool {
    let d = x.len();
    let mut q = x.to_vec();
    let mut grad = vec![0.0; d];
    let lp0 = target.logp_grad(&q, &mut grad);
    let mut p: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let k0: f64 = 0.5 * p.iter().map(|v| v * v).sum::<f64>();
    if !lp0.is_finite() {
        return false;
    }
    let h0 = lp0 - k0;
    let mut lp = lp0;
    for (pi, g) in p.iter_mut().zip(&grad) {
        *pi += 0.5 * step * g;
    }
    for l in 1..=leapfrog {
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += step * pi;
        }
        lp = target.logp_grad(&q, &mut grad);
        if !lp.is_finite() && l < leapfrog {
            // trajectory already diverged; no way back to finite energy
            return false;
        }
        let factor = if l < leapfrog { step } else { 0.5 * step };
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += factor * g;
        }
    }
    let k1: f64 = 0.5 * p.iter().map(|v| v * v).sum::<f64>();
    let h1 = lp - k1;
    if !h1.is_finite() {
        return false;
    }
    let accept = (h1 - h0) >= 0.0 || rng.gen::<f64>().ln() < h1 - h0;
    if accept {
        x.copy_from_slice(&q);
    }
    accept
}

pub const ACCEPT_LOW: f64 = 0.55;
pub const ACCEPT_HIGH: f64 = 0.90;

/// Multiplicative step-size adaptation toward the acceptance band.
pub fn adapt_step_size(step: &mut f64, accept_rate: f64) {
    if accept_rate < ACCEPT_LOW {
        // far below the band means the step is off by orders of magnitude;
        // crawling down by 0.8 per window would never catch up
        *step *= if accept_rate < 0.1 { 0.4 } else { 0.8 };
    } else if accept_rate > ACCEPT_HIGH {
        *step *= if accept_rate > 0.99 { 2.0 } else { 1.25 };
    }
}

// ---------------------------------------------------------------------------
// HMC targets

/// Count-layer coefficient blocks (baseline or covariate effects): the
/// log-intensity is `fixed + sum_l mult[i][l] * rows[e] . x_l`, with the
/// presence-layer log-CDF pair cached per zero-count cell.
struct CountCoefTarget<'a> {
    counts: &'a [Vec<u64>],
    rows: &'a [Vec<f64>],
    mult: &'a [Vec<f64>],
    fixed: &'a [f64],
    log_absent: &'a [f64],
    log_present: &'a [f64],
    prior_prec: f64,
    nl: usize,
    scratch_s: Vec<f64>,
    scratch_w: Vec<f64>,
}

impl HmcTarget for CountCoefTarget<'_> {
    fn dim(&self) -> usize {
        self.nl * self.rows[0].len()
    }

    fn logp_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let ne = self.rows.len();
        let p0 = self.rows[0].len();
        let nl = self.nl;
        for e in 0..ne {
            let row = &self.rows[e];
            for l in 0..nl {
                let xs = &x[l * p0..(l + 1) * p0];
                self.scratch_s[e * nl + l] = row.iter().zip(xs).map(|(r, c)| r * c).sum();
            }
        }
        self.scratch_w.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for (i, counts) in self.counts.iter().enumerate() {
            let m = &self.mult[i];
            for (e, &count) in counts.iter().enumerate() {
                let idx = i * ne + e;
                let mut lam = self.fixed[idx];
                for l in 0..nl {
                    lam += m[l] * self.scratch_s[e * nl + l];
                }
                let elam = lam.exp();
                let w;
                if count >= 1 {
                    total += count as f64 * lam - elam;
                    w = count as f64 - elam;
                } else {
                    let present = self.log_present[idx] - elam;
                    let log_mix = logsumexp2(self.log_absent[idx], present);
                    total += log_mix;
                    let lw = present + lam - log_mix;
                    w = if lw == f64::NEG_INFINITY { 0.0 } else { -lw.exp() };
                }
                for l in 0..nl {
                    self.scratch_w[e * nl + l] += w * m[l];
                }
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for e in 0..ne {
            let row = &self.rows[e];
            for l in 0..nl {
                let ws = self.scratch_w[e * nl + l];
                if ws != 0.0 {
                    let gs = &mut grad[l * p0..(l + 1) * p0];
                    for (g, r) in gs.iter_mut().zip(row) {
                        *g += ws * r;
                    }
                }
            }
        }
        for (g, &c) in grad.iter_mut().zip(x) {
            *g -= self.prior_prec * c;
            total -= 0.5 * self.prior_prec * c * c;
        }
        total
    }
}

/// Count-layer random effects: one additive coordinate per subject.
struct CountEtaTarget<'a> {
    counts: &'a [Vec<u64>],
    fixed: &'a [f64],
    log_absent: &'a [f64],
    log_present: &'a [f64],
    tau2: &'a [f64],
}

impl HmcTarget for CountEtaTarget<'_> {
    fn dim(&self) -> usize {
        self.counts.len()
    }

    fn logp_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let ne = self.counts[0].len();
        let mut total = 0.0;
        for (i, counts) in self.counts.iter().enumerate() {
            let mut gi = 0.0;
            for (e, &count) in counts.iter().enumerate() {
                let idx = i * ne + e;
                let lam = self.fixed[idx] + x[i];
                let elam = lam.exp();
                if count >= 1 {
                    total += count as f64 * lam - elam;
                    gi += count as f64 - elam;
                } else {
                    let present = self.log_present[idx] - elam;
                    let log_mix = logsumexp2(self.log_absent[idx], present);
                    total += log_mix;
                    let lw = present + lam - log_mix;
                    if lw != f64::NEG_INFINITY {
                        gi -= lw.exp();
                    }
                }
            }
            grad[i] = gi - x[i] / self.tau2[i];
            total -= 0.5 * x[i] * x[i] / self.tau2[i];
        }
        total
    }
}

/// Node latents (xi or delta) on the logit scale: full posterior recompute.
struct LatentTarget<'a> {
    block: HmcBlock,
    state: ModelState,
    data: &'a ConnectomeDataset,
    cfg: &'a BasisConfig,
    hyper: &'a Hyperparams,
}

impl HmcTarget for LatentTarget<'_> {
    fn dim(&self) -> usize {
        self.block.dim(&self.state)
    }

    fn logp_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        set_block(&mut self.state, self.block, x);
        // sigmoid saturation to exactly 0/1 leaves the support; reject
        let latents = match self.block {
            HmcBlock::Xi => &self.state.xi,
            _ => &self.state.delta,
        };
        if latents.iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return f64::NEG_INFINITY;
        }
        let basis = BasisCache::compute(&self.state, self.cfg).expect("latents in (0,1)");
        let effects = EdgeEffects::compute(&self.state, self.data, &basis);
        let preds = Predictors::from_effects(&self.state, self.data, &effects);
        let (ll, w) = likelihood_pass(self.data, &preds, self.state.sigma2, true);
        grad.iter_mut().for_each(|g| *g = 0.0);
        accumulate_likelihood_grad(&self.state, self.data, &basis, &w.unwrap(), self.block, grad);
        block_prior_grad(&self.state, self.hyper, self.block, grad);
        ll + block_log_prior(&self.state, self.hyper, self.block)
    }
}

// ---------------------------------------------------------------------------
// Conjugate draws

/// Draw from N(P^{-1} b, P^{-1}) given precision P and linear term b.
pub fn draw_gaussian<R: Rng + ?Sized>(
    prec: nalgebra::DMatrix<f64>,
    b: nalgebra::DVector<f64>,
    rng: &mut R,
) -> Vec<f64> {
    let chol = nalgebra::Cholesky::new(prec).expect("conjugate precision must be PD");
    let mean = chol.solve(&b);
    let z = nalgebra::DVector::from_iterator(
        mean.len(),
        (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    // solve L' s = z so that s has covariance P^{-1}
    let s = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("triangular solve");
    (mean + s).as_slice().to_vec()
}

// ---------------------------------------------------------------------------
// Sampler

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    pub leapfrog: usize,
    /// Adaptation window length (burn-in only).
    pub adapt_interval: usize,
    pub random_effects: bool,
    /// Initial HMC step sizes per block (theta3, gamma3, eta3, xi, delta).
    pub init_steps: [f64; 5],
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            burn_in: 1000,
            samples: 1000,
            thin: 1,
            seed: 1,
            leapfrog: 10,
            adapt_interval: 100,
            random_effects: true,
            init_steps: [0.02, 0.02, 0.05, 0.02, 0.02],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub log_likelihood: f64,
    pub sigma2: f64,
    pub alpha: [f64; 3],
    pub num_clusters: [usize; 3],
    pub accept: [f64; 5],
    pub step: [f64; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcRun {
    pub draws: Vec<ModelState>,
    pub trace: Vec<TraceRow>,
    pub step_sizes: [f64; 5],
    pub accept_rates: [f64; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sampler {
    pub data: ConnectomeDataset,
    pub cfg: BasisConfig,
    pub hyper: Hyperparams,
    pub opts: SamplerOptions,
    pub state: ModelState,
    pub steps: [f64; 5],
    pub iter: usize,
    accept_window: [u64; 5],
    attempt_window: [u64; 5],
    accept_total: [u64; 5],
    attempt_total: [u64; 5],
    rng: ChaCha8Rng,
    /// Latent probit utilities per (subject, edge) cell.
    #[serde(skip)]
    w_latent: Vec<f64>,
}

impl Sampler {
    pub fn new(
        data: ConnectomeDataset,
        cfg: BasisConfig,
        hyper: Hyperparams,
        opts: SamplerOptions,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut state = ModelState::neutral(&data, cfg.num_basis());
        // Rank-based warm start for the node latents. The latent HMC moves
        // nodes locally and cannot relabel many coupled coordinates across
        // likelihood barriers, so the initial ordering largely decides which
        // mode the chain refines. Node-level presence statistics order the
        // nodes along each latent axis: overall presence rate for the
        // baseline latents, covariate-presence association for the
        // covariate-effect latents. Spreading the starts over (0,1) also
        // avoids the near-symmetric saddle of a shared tight cluster.
        let jn = state.xi.len();
        let n = data.num_subjects();
        let nf = (n as f64).max(1.0);
        let mut deg = vec![0usize; jn];
        for &(j, k) in &data.edges {
            deg[j] += 1;
            if k != j {
                deg[k] += 1;
            }
        }
        // per (subject, node) presence rate over the node's incident edges
        let mut rate = vec![0.0f64; n * jn];
        for i in 0..n {
            let row = &mut rate[i * jn..(i + 1) * jn];
            for (e, &(j, k)) in data.edges.iter().enumerate() {
                if data.counts[i][e] >= 1 {
                    row[j] += 1.0;
                    if k != j {
                        row[k] += 1.0;
                    }
                }
            }
            for (r, &dg) in row.iter_mut().zip(&deg) {
                if dg > 0 {
                    *r /= dg as f64;
                }
            }
        }
        let mut presence = vec![0.0f64; jn];
        for (j, p) in presence.iter_mut().enumerate() {
            *p = (0..n).map(|i| rate[i * jn + j]).sum::<f64>() / nf;
        }
        let mut assoc = vec![0.0f64; jn];
        for l in 0..data.num_covariates() {
            let mean_z = data.covariates.iter().map(|z| z[l]).sum::<f64>() / nf;
            let var_z = data
                .covariates
                .iter()
                .map(|z| (z[l] - mean_z) * (z[l] - mean_z))
                .sum::<f64>()
                / nf;
            if var_z <= 1e-12 {
                continue;
            }
            let sd = var_z.sqrt();
            for (j, a) in assoc.iter_mut().enumerate() {
                let mut cov = 0.0;
                for i in 0..n {
                    cov += (data.covariates[i][l] - mean_z) * (rate[i * jn + j] - presence[j]);
                }
                *a += cov / (nf * sd);
            }
        }
        let mut rank_init = |score: &[f64], lat: &mut [f64]| {
            let mut order: Vec<usize> = (0..jn).collect();
            order.sort_by(|&a, &b| {
                score[b]
                    .partial_cmp(&score[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for (r, &j) in order.iter().enumerate() {
                lat[j] = ((r as f64 + 0.5) / jn as f64 + 0.02 * (rng.gen::<f64>() - 0.5))
                    .clamp(0.02, 0.98);
            }
        };
        rank_init(&presence, &mut state.xi);
        rank_init(&assoc, &mut state.delta);
        let ncells = data.num_subjects() * data.num_edges();
        Self {
            steps: opts.init_steps,
            state,
            w_latent: vec![0.0; ncells],
            accept_window: [0; 5],
            attempt_window: [0; 5],
            accept_total: [0; 5],
            attempt_total: [0; 5],
            iter: 0,
            rng,
            data,
            cfg,
            hyper,
            opts,
        }
    }

    /// Start from a caller-provided state (used by the prior-consistency
    /// checks, which begin chains at a forward draw).
    pub fn with_state(mut self, state: ModelState) -> Self {
        self.state = state;
        self
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Current Albert-Chib probit utilities, `[subject * num_edges + edge]`.
    /// Valid after `draw_probit_utilities` (or a sweep) has run.
    pub fn probit_utilities(&self) -> &[f64] {
        &self.w_latent
    }

    fn layer_predictors(&self, effects: &EdgeEffects, t: usize) -> Vec<f64> {
        let n = self.data.num_subjects();
        let ne = self.data.num_edges();
        let d = self.data.num_covariates();
        let mut out = vec![0.0; n * ne];
        for i in 0..n {
            let row = &mut out[i * ne..(i + 1) * ne];
            row.copy_from_slice(&effects.base[t]);
            for l in 0..d {
                let zl = self.data.covariates[i][l];
                if zl != 0.0 {
                    for (v, g) in row.iter_mut().zip(&effects.effect[t][l]) {
                        *v += zl * g;
                    }
                }
            }
            let eta = self.state.eta[t][i];
            for v in row.iter_mut() {
                *v += eta;
            }
        }
        out
    }

    /// Per-edge gradient rows of the quadratic form, for the coefficient
    /// blocks: one row of length K(K+1)/2 per edge.
    fn coef_rows(&self, basis_nodes: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = self.cfg.num_basis();
        let p0 = triangle_len(k);
        self.data
            .edges
            .iter()
            .map(|&(j, kk)| {
                let mut row = vec![0.0; p0];
                SymmetricCoeffMatrix::accumulate_quad_form_grad(
                    k,
                    &basis_nodes[j],
                    &basis_nodes[kk],
                    1.0,
                    &mut row,
                );
                row
            })
            .collect()
    }

    // -- zero inflation ------------------------------------------------------

    pub fn draw_zero_inflation(&mut self, pi: &[f64], lam: &[f64]) {
        let ne = self.data.num_edges();
        for i in 0..self.data.num_subjects() {
            for e in 0..ne {
                if self.data.counts[i][e] >= 1 {
                    self.state.xi_zero[i][e] = true;
                } else {
                    let idx = i * ne + e;
                    let p1 = zero_count_terms(pi[idx], lam[idx]).p_xi1;
                    self.state.xi_zero[i][e] = self.rng.gen::<f64>() < p1;
                }
            }
        }
    }

    pub fn draw_probit_utilities(&mut self, pi: &[f64]) {
        let ne = self.data.num_edges();
        for i in 0..self.data.num_subjects() {
            for e in 0..ne {
                let idx = i * ne + e;
                self.w_latent[idx] =
                    truncated_normal(self.state.xi_zero[i][e], pi[idx], &mut self.rng);
            }
        }
    }

    // -- conjugate Gaussian-type blocks --------------------------------------

    /// Update the baseline coefficients of a Gaussian-type layer.
    /// `resp[idx]` is the response with the baseline part removed and
    /// `prec[idx]` its precision (0 to skip the cell).
    fn draw_theta_conjugate(&mut self, t: usize, rows: &[Vec<f64>], resp: &[f64], prec: &[f64]) {
        let ne = self.data.num_edges();
        let n = self.data.num_subjects();
        let p0 = rows[0].len();
        let mut xtwx = nalgebra::DMatrix::zeros(p0, p0);
        let mut xtwy = nalgebra::DVector::zeros(p0);
        for (e, row) in rows.iter().enumerate() {
            let mut wsum = 0.0;
            let mut bsum = 0.0;
            for i in 0..n {
                let idx = i * ne + e;
                wsum += prec[idx];
                bsum += prec[idx] * resp[idx];
            }
            if wsum == 0.0 {
                continue;
            }
            for a in 0..p0 {
                xtwy[a] += bsum * row[a];
                let wa = wsum * row[a];
                for b in a..p0 {
                    xtwx[(a, b)] += wa * row[b];
                }
            }
        }
        let prior = 1.0 / (self.hyper.a * self.hyper.a);
        for a in 0..p0 {
            xtwx[(a, a)] += prior;
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let draw = draw_gaussian(xtwx, xtwy, &mut self.rng);
        self.state.theta[t].upper_mut().copy_from_slice(&draw);
    }

    /// Joint update of all covariate-effect coefficients of a layer.
    fn draw_gamma_conjugate(&mut self, t: usize, rows: &[Vec<f64>], resp: &[f64], prec: &[f64]) {
        let ne = self.data.num_edges();
        let n = self.data.num_subjects();
        let d = self.data.num_covariates();
        let p0 = rows[0].len();
        let p = d * p0;
        let mut xtwx = nalgebra::DMatrix::zeros(p, p);
        let mut xtwy = nalgebra::DVector::zeros(p);
        let mut m = vec![0.0; d * d];
        let mut c = vec![0.0; d];
        for (e, row) in rows.iter().enumerate() {
            m.iter_mut().for_each(|v| *v = 0.0);
            c.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for i in 0..n {
                let idx = i * ne + e;
                let w = prec[idx];
                if w == 0.0 {
                    continue;
                }
                any = true;
                let z = &self.data.covariates[i];
                for l in 0..d {
                    c[l] += w * resp[idx] * z[l];
                    for lp in l..d {
                        m[l * d + lp] += w * z[l] * z[lp];
                    }
                }
            }
            if !any {
                continue;
            }
            for l in 0..d {
                for a in 0..p0 {
                    xtwy[l * p0 + a] += c[l] * row[a];
                }
                for lp in l..d {
                    let mll = m[l * d + lp];
                    if mll == 0.0 {
                        continue;
                    }
                    for a in 0..p0 {
                        let base = mll * row[a];
                        for b in 0..p0 {
                            xtwx[(l * p0 + a, lp * p0 + b)] += base * row[b];
                        }
                    }
                }
            }
        }
        let prior = 1.0 / (self.hyper.a * self.hyper.a);
        for a in 0..p {
            xtwx[(a, a)] += prior;
        }
        // mirror the block-upper triangle
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let draw = draw_gaussian(xtwx, xtwy, &mut self.rng);
        for l in 0..d {
            self.state.gamma[t][l]
                .upper_mut()
                .copy_from_slice(&draw[l * p0..(l + 1) * p0]);
        }
    }

    /// Per-subject random-effect update for a Gaussian-type layer.
    fn draw_eta_conjugate(&mut self, t: usize, resp: &[f64], prec: &[f64]) {
        let ne = self.data.num_edges();
        for i in 0..self.data.num_subjects() {
            let mut wsum = 1.0 / self.state.tau2[t][i];
            let mut bsum = 0.0;
            for e in 0..ne {
                let idx = i * ne + e;
                wsum += prec[idx];
                bsum += prec[idx] * resp[idx];
            }
            let mean = bsum / wsum;
            let sd = (1.0 / wsum).sqrt();
            self.state.eta[t][i] = mean + sd * self.rng.sample::<f64, _>(StandardNormal);
        }
    }

    // -- scale updates --------------------------------------------------------

    pub fn draw_sigma2(&mut self, mu: &[f64]) {
        let ne = self.data.num_edges();
        let mut shape = self.hyper.d1;
        let mut rate = self.hyper.d2;
        for i in 0..self.data.num_subjects() {
            for e in 0..ne {
                let count = self.data.counts[i][e];
                if count >= 1 {
                    let r = self.data.lengths[i][e].unwrap().ln() - mu[i * ne + e];
                    shape += 0.5;
                    rate += 0.5 * count as f64 * r * r;
                }
            }
        }
        let g = GammaDist::new(shape, 1.0 / rate).unwrap().sample(&mut self.rng);
        self.state.sigma2 = 1.0 / g;
    }

    pub fn draw_indicators(&mut self) {
        if self.hyper.latent_prior != LatentPrior::BetaMixture {
            return;
        }
        let m = self.hyper.m_shape;
        let q = self.hyper.q;
        for (jdx, &d) in self.state.delta.iter().enumerate() {
            let p_unif = q; // uniform density is 1
            let p_beta = (1.0 - q) * beta_lpdf(d, m, m).exp();
            let p1 = p_unif / (p_unif + p_beta);
            self.state.ind[jdx] = self.rng.gen::<f64>() < p1;
        }
    }

    /// Collapsed Dirichlet-process update of the random-effect scales for one
    /// layer, followed by a cluster-value redraw and the precision update.
    pub fn dp_update(&mut self, t: usize) {
        let n = self.data.num_subjects();
        let eta = self.state.eta[t].clone();
        let (b1, b2) = (self.hyper.b1, self.hyper.b2);
        // reconstruct clusters from exact value ties
        let mut values: Vec<f64> = Vec::new();
        let mut assign: Vec<usize> = vec![0; n];
        for i in 0..n {
            let v = self.state.tau2[t][i];
            match values.iter().position(|&x| x == v) {
                Some(c) => assign[i] = c,
                None => {
                    assign[i] = values.len();
                    values.push(v);
                }
            }
        }
        let mut counts: Vec<usize> = vec![0; values.len()];
        for &c in &assign {
            counts[c] += 1;
        }
        let lmarg = |e: f64| -> f64 {
            // integral of N(e; 0, tau2) against IG(tau2; b1, b2)
            b1 * b2.ln() - statrs::function::gamma::ln_gamma(b1)
                + statrs::function::gamma::ln_gamma(b1 + 0.5)
                - 0.5 * (2.0 * std::f64::consts::PI).ln()
                - (b1 + 0.5) * (b2 + 0.5 * e * e).ln()
        };
        for i in 0..n {
            // remove subject i
            let c = assign[i];
            counts[c] -= 1;
            if counts[c] == 0 {
                counts.swap_remove(c);
                values.swap_remove(c);
                for a in assign.iter_mut() {
                    if *a == counts.len() {
                        // index that was moved into slot c
                        *a = c;
                    }
                }
            }
            // membership weights
            let mut logw: Vec<f64> = values
                .iter()
                .zip(&counts)
                .map(|(&v, &cnt)| (cnt as f64).ln() + normal_lpdf(eta[i], 0.0, v.sqrt()))
                .collect();
            logw.push(self.state.alpha[t].ln() + lmarg(eta[i]));
            let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = logw.iter().map(|&l| (l - mx).exp()).collect();
            let tot: f64 = probs.iter().sum();
            let mut u = self.rng.gen::<f64>() * tot;
            let mut pick = probs.len() - 1;
            for (idx, &p) in probs.iter().enumerate() {
                if u < p {
                    pick = idx;
                    break;
                }
                u -= p;
            }
            if pick == values.len() {
                // open a new cluster from the single-observation posterior
                let shape = b1 + 0.5;
                let rate = b2 + 0.5 * eta[i] * eta[i];
                let g = GammaDist::new(shape, 1.0 / rate).unwrap().sample(&mut self.rng);
                values.push(1.0 / g);
                counts.push(1);
                assign[i] = values.len() - 1;
            } else {
                counts[pick] += 1;
                assign[i] = pick;
            }
        }
        // redraw each cluster's scale from its conditional
        for c in 0..values.len() {
            let mut shape = b1;
            let mut rate = b2;
            for i in 0..n {
                if assign[i] == c {
                    shape += 0.5;
                    rate += 0.5 * eta[i] * eta[i];
                }
            }
            let g = GammaDist::new(shape, 1.0 / rate).unwrap().sample(&mut self.rng);
            values[c] = 1.0 / g;
        }
        for i in 0..n {
            self.state.tau2[t][i] = values[assign[i]];
        }
        self.draw_alpha(t, values.len());
    }

    /// Two-step precision update for the DP concentration.
    pub fn draw_alpha(&mut self, t: usize, num_clusters: usize) {
        let n = self.data.num_subjects() as f64;
        let k = num_clusters as f64;
        let (c1, c2) = (self.hyper.c1, self.hyper.c2);
        let alpha = self.state.alpha[t];
        let x = BetaDist::new(alpha + 1.0, n).unwrap().sample(&mut self.rng);
        let odds = (c1 + k - 1.0) / (n * (c2 - x.ln()));
        let shape = if self.rng.gen::<f64>() < odds / (1.0 + odds) {
            c1 + k
        } else {
            c1 + k - 1.0
        };
        let rate = c2 - x.ln();
        self.state.alpha[t] = GammaDist::new(shape, 1.0 / rate)
            .unwrap()
            .sample(&mut self.rng);
    }

    pub fn num_clusters(&self, t: usize) -> usize {
        let mut values: Vec<f64> = Vec::new();
        for &v in &self.state.tau2[t] {
            if !values.iter().any(|&x| x == v) {
                values.push(v);
            }
        }
        values.len()
    }

    // -- one full sweep --------------------------------------------------------

    pub fn sweep(&mut self) {
        let n = self.data.num_subjects();
        let ne = self.data.num_edges();
        if self.w_latent.len() != n * ne {
            self.w_latent = vec![0.0; n * ne];
        }
        let basis = BasisCache::compute(&self.state, &self.cfg).expect("latents in (0,1)");
        let mut effects = EdgeEffects::compute(&self.state, &self.data, &basis);
        let xi_rows = self.coef_rows(&basis.b_xi);
        let delta_rows = self.coef_rows(&basis.b_delta);

        // layer-2/3 predictors for the augmentation draws
        let pi = self.layer_predictors(&effects, PRESENCE);
        let lam = self.layer_predictors(&effects, COUNT);
        self.draw_zero_inflation(&pi, &lam);
        self.draw_probit_utilities(&pi);

        // ---- Gaussian layer (log lengths), conjugate ----
        {
            let mut prec = vec![0.0; n * ne];
            let mut log_l = vec![0.0; n * ne];
            for i in 0..n {
                for e in 0..ne {
                    let c = self.data.counts[i][e];
                    if c >= 1 {
                        let idx = i * ne + e;
                        prec[idx] = c as f64 / self.state.sigma2;
                        log_l[idx] = self.data.lengths[i][e].unwrap().ln();
                    }
                }
            }
            // theta1 | rest
            let resp = self.residual(LENGTH, &effects, &log_l, true, false, false);
            self.draw_theta_conjugate(LENGTH, &xi_rows, &resp, &prec);
            self.refresh_base(&basis, &mut effects, LENGTH);
            // gamma1 | rest (joint over covariates)
            let resp = self.residual(LENGTH, &effects, &log_l, false, true, false);
            self.draw_gamma_conjugate(LENGTH, &delta_rows, &resp, &prec);
            self.refresh_effects(&basis, &mut effects, LENGTH);
            // eta1 | rest
            if self.opts.random_effects {
                let resp = self.residual(LENGTH, &effects, &log_l, false, false, true);
                self.draw_eta_conjugate(LENGTH, &resp, &prec);
            }
        }

        // ---- probit layer (presence), conjugate via utilities ----
        {
            let prec = vec![1.0; n * ne];
            let w = self.w_latent.clone();
            let resp = self.residual(PRESENCE, &effects, &w, true, false, false);
            self.draw_theta_conjugate(PRESENCE, &xi_rows, &resp, &prec);
            self.refresh_base(&basis, &mut effects, PRESENCE);
            let resp = self.residual(PRESENCE, &effects, &w, false, true, false);
            self.draw_gamma_conjugate(PRESENCE, &delta_rows, &resp, &prec);
            self.refresh_effects(&basis, &mut effects, PRESENCE);
            if self.opts.random_effects {
                let resp = self.residual(PRESENCE, &effects, &w, false, false, true);
                self.draw_eta_conjugate(PRESENCE, &resp, &prec);
            }
        }

        // ---- count layer, HMC with the zero-inflation marginalized ----
        {
            // presence log-CDF pair, cached for the whole count-layer pass
            let pi = self.layer_predictors(&effects, PRESENCE);
            let log_absent: Vec<f64> = pi.iter().map(|&v| log_normal_cdf(-v)).collect();
            let log_present: Vec<f64> = pi.iter().map(|&v| log_normal_cdf(v)).collect();
            let ones = vec![vec![1.0]; n];
            let prior_prec = 1.0 / (self.hyper.a * self.hyper.a);

            // theta3
            let fixed = self.count_fixed(&effects, false, true, true);
            let mut target = CountCoefTarget {
                counts: &self.data.counts,
                rows: &xi_rows,
                mult: &ones,
                fixed: &fixed,
                log_absent: &log_absent,
                log_present: &log_present,
                prior_prec,
                nl: 1,
                scratch_s: vec![0.0; ne],
                scratch_w: vec![0.0; ne],
            };
            let mut x = pack_block(&self.state, HmcBlock::Theta3);
            let acc = hmc_update(&mut target, &mut x, self.steps[0], self.opts.leapfrog, &mut self.rng);
            self.record(0, acc);
            set_block(&mut self.state, HmcBlock::Theta3, &x);
            self.refresh_base(&basis, &mut effects, COUNT);

            // gamma3 (joint over covariates)
            let d = self.data.num_covariates();
            let fixed = self.count_fixed(&effects, true, false, true);
            let mut target = CountCoefTarget {
                counts: &self.data.counts,
                rows: &delta_rows,
                mult: &self.data.covariates,
                fixed: &fixed,
                log_absent: &log_absent,
                log_present: &log_present,
                prior_prec,
                nl: d,
                scratch_s: vec![0.0; ne * d],
                scratch_w: vec![0.0; ne * d],
            };
            let mut x = pack_block(&self.state, HmcBlock::Gamma3);
            let acc = hmc_update(&mut target, &mut x, self.steps[1], self.opts.leapfrog, &mut self.rng);
            self.record(1, acc);
            set_block(&mut self.state, HmcBlock::Gamma3, &x);
            self.refresh_effects(&basis, &mut effects, COUNT);

            // eta3
            if self.opts.random_effects {
                let fixed = self.count_fixed(&effects, true, true, false);
                let mut target = CountEtaTarget {
                    counts: &self.data.counts,
                    fixed: &fixed,
                    log_absent: &log_absent,
                    log_present: &log_present,
                    tau2: &self.state.tau2[COUNT],
                };
                let mut x = pack_block(&self.state, HmcBlock::Eta3);
                let acc =
                    hmc_update(&mut target, &mut x, self.steps[2], self.opts.leapfrog, &mut self.rng);
                self.record(2, acc);
                set_block(&mut self.state, HmcBlock::Eta3, &x);
            }
        }

        // ---- node latents, HMC on the logit scale ----
        for (slot, block) in [(3usize, HmcBlock::Xi), (4usize, HmcBlock::Delta)] {
            let mut target = LatentTarget {
                block,
                state: self.state.clone(),
                data: &self.data,
                cfg: &self.cfg,
                hyper: &self.hyper,
            };
            let mut x = pack_block(&self.state, block);
            let acc = hmc_update(&mut target, &mut x, self.steps[slot], self.opts.leapfrog, &mut self.rng);
            self.record(slot, acc);
            set_block(&mut self.state, block, &x);
        }

        // ---- indicators, DP scales, error variance ----
        self.draw_indicators();
        if self.opts.random_effects {
            for t in 0..NUM_LAYERS {
                self.dp_update(t);
            }
        }
        {
            let basis = BasisCache::compute(&self.state, &self.cfg).expect("latents in (0,1)");
            let effects = EdgeEffects::compute(&self.state, &self.data, &basis);
            let mu = self.layer_predictors(&effects, LENGTH);
            self.draw_sigma2(&mu);
        }
        self.iter += 1;
    }

    /// Response with selected parts of the linear predictor subtracted. The
    /// part being redrawn must be kept out of the subtraction; everything
    /// else is conditioned on and removed.
    fn residual(
        &self,
        t: usize,
        effects: &EdgeEffects,
        y: &[f64],
        keep_base_out: bool,
        keep_gamma_out: bool,
        keep_eta_out: bool,
    ) -> Vec<f64> {
        let n = self.data.num_subjects();
        let ne = self.data.num_edges();
        let d = self.data.num_covariates();
        let mut out = vec![0.0; n * ne];
        for i in 0..n {
            let z = &self.data.covariates[i];
            let eta = self.state.eta[t][i];
            for e in 0..ne {
                let idx = i * ne + e;
                let mut r = y[idx];
                if !keep_eta_out {
                    r -= eta;
                }
                if !keep_base_out {
                    r -= effects.base[t][e];
                }
                if !keep_gamma_out {
                    for l in 0..d {
                        r -= z[l] * effects.effect[t][l][e];
                    }
                }
                out[idx] = r;
            }
        }
        out
    }

    /// Count-layer linear predictor with selected parts included.
    fn count_fixed(
        &self,
        effects: &EdgeEffects,
        with_base: bool,
        with_gamma: bool,
        with_eta: bool,
    ) -> Vec<f64> {
        let n = self.data.num_subjects();
        let ne = self.data.num_edges();
        let d = self.data.num_covariates();
        let mut out = vec![0.0; n * ne];
        for i in 0..n {
            let z = &self.data.covariates[i];
            for e in 0..ne {
                let idx = i * ne + e;
                let mut v = 0.0;
                if with_base {
                    v += effects.base[COUNT][e];
                }
                if with_gamma {
                    for l in 0..d {
                        v += z[l] * effects.effect[COUNT][l][e];
                    }
                }
                if with_eta {
                    v += self.state.eta[COUNT][i];
                }
                out[idx] = v;
            }
        }
        out
    }

    fn refresh_base(&self, basis: &BasisCache, effects: &mut EdgeEffects, t: usize) {
        for (e, &(j, k)) in self.data.edges.iter().enumerate() {
            effects.base[t][e] = self.state.theta[t].quad_form(&basis.b_xi[j], &basis.b_xi[k]);
        }
    }

    fn refresh_effects(&self, basis: &BasisCache, effects: &mut EdgeEffects, t: usize) {
        for (e, &(j, k)) in self.data.edges.iter().enumerate() {
            for l in 0..self.data.num_covariates() {
                effects.effect[t][l][e] =
                    self.state.gamma[t][l].quad_form(&basis.b_delta[j], &basis.b_delta[k]);
            }
        }
    }

    fn record(&mut self, slot: usize, accepted: bool) {
        self.attempt_window[slot] += 1;
        self.attempt_total[slot] += 1;
        if accepted {
            self.accept_window[slot] += 1;
            self.accept_total[slot] += 1;
        }
    }

    fn window_rates(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        for s in 0..5 {
            out[s] = if self.attempt_window[s] > 0 {
                self.accept_window[s] as f64 / self.attempt_window[s] as f64
            } else {
                f64::NAN
            };
        }
        out
    }

    pub fn accept_rates(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        for s in 0..5 {
            out[s] = if self.attempt_total[s] > 0 {
                self.accept_total[s] as f64 / self.attempt_total[s] as f64
            } else {
                f64::NAN
            };
        }
        out
    }

    fn adapt_all(&mut self) {
        let rates = self.window_rates();
        for s in 0..5 {
            if rates[s].is_finite() {
                adapt_step_size(&mut self.steps[s], rates[s]);
            }
            self.accept_window[s] = 0;
            self.attempt_window[s] = 0;
        }
    }

    fn trace_row(&self) -> TraceRow {
        let ll = model::log_likelihood(&self.state, &self.data, &self.cfg).unwrap_or(f64::NAN);
        TraceRow {
            iter: self.iter,
            log_likelihood: ll,
            sigma2: self.state.sigma2,
            alpha: [self.state.alpha[0], self.state.alpha[1], self.state.alpha[2]],
            num_clusters: [self.num_clusters(0), self.num_clusters(1), self.num_clusters(2)],
            accept: self.accept_rates(),
            step: self.steps,
        }
    }

    /// Run the configured schedule from the current position. `already_done`
    /// supports resuming: iterations before it are assumed complete.
    pub fn run(&mut self) -> McmcRun {
        let mut run = McmcRun {
            draws: Vec::with_capacity(self.opts.samples),
            trace: Vec::new(),
            step_sizes: self.steps,
            accept_rates: [0.0; 5],
        };
        self.run_into(&mut run);
        run
    }

    /// Advance the chain to the end of the schedule, appending to `run`.
    /// Safe to call again after deserializing a checkpointed sampler.
    pub fn run_into(&mut self, run: &mut McmcRun) {
        self.advance(run, usize::MAX);
    }

    /// Total sweeps in the configured schedule.
    pub fn target_iters(&self) -> usize {
        self.opts.burn_in + self.opts.samples * self.opts.thin
    }

    /// Advance by at most `max_sweeps` sweeps, appending to `run`; returns
    /// true once the schedule is complete. Lets callers checkpoint mid-run.
    pub fn advance(&mut self, run: &mut McmcRun, max_sweeps: usize) -> bool {
        let total = self.target_iters();
        let mut done = 0usize;
        while self.iter < total && done < max_sweeps {
            done += 1;
            self.sweep();
            let it = self.iter; // sweep() already incremented
            if it <= self.opts.burn_in {
                if it % self.opts.adapt_interval == 0 {
                    self.adapt_all();
                }
            } else {
                let post = it - self.opts.burn_in;
                if post % self.opts.thin == 0 {
                    let mut draw = self.state.clone();
                    draw.xi_zero.clear();
                    run.draws.push(draw);
                }
            }
            if it % 10 == 0 || it == total {
                run.trace.push(self.trace_row());
            }
        }
        run.step_sizes = self.steps;
        run.accept_rates = self.accept_rates();
        self.iter >= total
    }
}
