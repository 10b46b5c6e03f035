//! Posterior summarization: effect reconstruction with credible intervals
//! and significance ranking, AIC-based selection of the basis size, and
//! posterior predictive evaluation on held-out subjects.

use crate::data::ConnectomeDataset;
use crate::glm::{solve_normal, GlmError, MAX_ITERS, TOL};
use crate::metrics::{poisson_cell_loglik, zip_cell_loglik, MetricsError, PredictionMetrics};
use crate::model::{
    effect_families, reconstruct_effect_matrices, Hyperparams, ModelState, LENGTH,
    NUM_LAYERS,
};
use crate::splines::{triangle_len, BasisConfig, SymmetricCoeffMatrix};
use crate::stats::{log_normal_cdf, normal_cdf, normal_pdf, quantile};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum InferenceError {
    #[error("run has no post-burn draws")]
    EmptyRun,
    #[error("tuning grid is empty")]
    EmptyGrid,
    #[error("held-out regions do not match the fitted model")]
    RegionMismatch,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

// ---------------------------------------------------------------------------
// Effect summaries

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSummaryRow {
    pub family: String,
    pub region_a: String,
    pub region_b: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// max(P(effect > 0), P(effect < 0)) over posterior draws.
    pub tail_prob: f64,
    pub interval_len: f64,
    pub significant: bool,
    /// Rank within the family: 1 = most significant.
    pub rank: usize,
}

/// Per-family ranked effect summaries over all region pairs (j <= k).
///
/// Ranking: tail probability descending, ties broken by shorter credible
/// interval, then by edge index for a total order.
pub fn summarize_effects(
    draws: &[ModelState],
    cfg: &BasisConfig,
    region_names: &[String],
) -> Result<Vec<EffectSummaryRow>, InferenceError> {
    if draws.len() < 2 {
        return Err(InferenceError::EmptyRun);
    }
    let jn = region_names.len();
    let d = draws[0].num_covariates();
    let families = effect_families(&covariate_labels(&draws[0], d));
    let nfam = families.len();
    // values[fam][pair][draw]
    let npairs = jn * (jn + 1) / 2;
    let mut values = vec![vec![Vec::with_capacity(draws.len()); npairs]; nfam];
    for st in draws {
        let mats = reconstruct_effect_matrices(st, cfg, jn)?;
        for (f, m) in mats.iter().enumerate() {
            let mut p = 0;
            for j in 0..jn {
                for k in j..jn {
                    values[f][p].push(m[j * jn + k]);
                    p += 1;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(nfam * npairs);
    for (f, fam) in families.iter().enumerate() {
        let mut rows: Vec<(usize, EffectSummaryRow)> = Vec::with_capacity(npairs);
        let mut p = 0;
        for j in 0..jn {
            for k in j..jn {
                let mut v = values[f][p].clone();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let lo = quantile(&v, 0.025);
                let hi = quantile(&v, 0.975);
                let p_pos = v.iter().filter(|&&x| x > 0.0).count() as f64 / n;
                let p_neg = v.iter().filter(|&&x| x < 0.0).count() as f64 / n;
                rows.push((
                    p,
                    EffectSummaryRow {
                        family: fam.label.clone(),
                        region_a: region_names[j].clone(),
                        region_b: region_names[k].clone(),
                        mean,
                        lo,
                        hi,
                        tail_prob: p_pos.max(p_neg),
                        interval_len: hi - lo,
                        significant: lo > 0.0 || hi < 0.0,
                        rank: 0,
                    },
                ));
                p += 1;
            }
        }
        // rank: larger tail prob first, then shorter interval, then index
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = &rows[a].1;
            let rb = &rows[b].1;
            rb.tail_prob
                .partial_cmp(&ra.tail_prob)
                .unwrap()
                .then(ra.interval_len.partial_cmp(&rb.interval_len).unwrap())
                .then(rows[a].0.cmp(&rows[b].0))
        });
        for (rank, &idx) in order.iter().enumerate() {
            rows[idx].1.rank = rank + 1;
        }
        out.extend(rows.into_iter().map(|(_, r)| r));
    }
    Ok(out)
}

fn covariate_labels(state: &ModelState, d: usize) -> Vec<String> {
    let _ = state;
    crate::data::COVARIATE_NAMES
        .iter()
        .take(d)
        .map(|s| s.to_string())
        .collect()
}

/// Node ring layout plus the significant edges of each family, for external
/// edge-bundle plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgePlotData {
    pub regions: Vec<String>,
    /// Unit-circle coordinates in region order.
    pub layout: Vec<(f64, f64)>,
    pub families: Vec<EdgePlotFamily>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgePlotFamily {
    pub family: String,
    /// (region_a index, region_b index, posterior mean) of significant edges.
    pub edges: Vec<(usize, usize, f64)>,
}

pub fn edge_plot_data(rows: &[EffectSummaryRow], region_names: &[String]) -> EdgePlotData {
    let jn = region_names.len();
    let layout = (0..jn)
        .map(|j| {
            let ang = 2.0 * std::f64::consts::PI * j as f64 / jn as f64;
            (ang.cos(), ang.sin())
        })
        .collect();
    let index = |name: &str| region_names.iter().position(|r| r == name).unwrap();
    let mut families: Vec<EdgePlotFamily> = Vec::new();
    for row in rows {
        if families.last().map(|f| f.family != row.family).unwrap_or(true) {
            families.push(EdgePlotFamily {
                family: row.family.clone(),
                edges: Vec::new(),
            });
        }
        if row.significant {
            families
                .last_mut()
                .unwrap()
                .edges
                .push((index(&row.region_a), index(&row.region_b), row.mean));
        }
    }
    EdgePlotData {
        regions: region_names.to_vec(),
        layout,
        families,
    }
}

/// Posterior-mean effect matrices (15 of them, J x J row-major, NaN-free).
pub fn posterior_mean_matrices(
    draws: &[ModelState],
    cfg: &BasisConfig,
    num_regions: usize,
) -> Result<Vec<Vec<f64>>, InferenceError> {
    if draws.is_empty() {
        return Err(InferenceError::EmptyRun);
    }
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for st in draws {
        let mats = reconstruct_effect_matrices(st, cfg, num_regions)?;
        match acc.as_mut() {
            None => acc = Some(mats),
            Some(a) => {
                for (am, m) in a.iter_mut().zip(&mats) {
                    for (av, v) in am.iter_mut().zip(m) {
                        *av += v;
                    }
                }
            }
        }
    }
    let mut mats = acc.unwrap();
    let s = draws.len() as f64;
    for m in &mut mats {
        for v in m.iter_mut() {
            *v /= s;
        }
    }
    Ok(mats)
}

// ---------------------------------------------------------------------------
// Basis-size tuning

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRow {
    pub k: usize,
    /// AICs averaged over the latent draws that converged.
    pub aic_length: f64,
    pub aic_presence: f64,
    pub aic_count: f64,
    pub aic_total: f64,
    pub failed_draws: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    pub rows: Vec<TuneRow>,
    pub chosen: usize,
    /// True when the knee rule picked a smaller K than the arg-min.
    pub knee_applied: bool,
}

/// Precomputed per-edge structures for one latent draw: basis gradient rows
/// for the baseline and covariate-effect parts of the design, stored sparse
/// (cubic splines leave at most 4 basis functions active per latent, so each
/// row has at most 16 nonzero tensor entries out of K(K+1)/2).
struct TuneDesign {
    p0: usize,
    t_rows: Vec<Vec<(usize, f64)>>,
    td_rows: Vec<Vec<(usize, f64)>>,
}

impl TuneDesign {
    fn build(cfg: &BasisConfig, data: &ConnectomeDataset, xi: &[f64], delta: &[f64]) -> Self {
        let k = cfg.num_basis();
        let p0 = triangle_len(k);
        let bx: Vec<Vec<f64>> = xi.iter().map(|&x| cfg.eval(x).unwrap()).collect();
        let bd: Vec<Vec<f64>> = delta.iter().map(|&x| cfg.eval(x).unwrap()).collect();
        let rows = |basis: &[Vec<f64>]| -> Vec<Vec<(usize, f64)>> {
            data.edges
                .iter()
                .map(|&(j, kk)| {
                    let mut row = vec![0.0; p0];
                    SymmetricCoeffMatrix::accumulate_quad_form_grad(
                        k,
                        &basis[j],
                        &basis[kk],
                        1.0,
                        &mut row,
                    );
                    row.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(u, &v)| (u, v))
                        .collect()
                })
                .collect()
        };
        Self {
            p0,
            t_rows: rows(&bx),
            td_rows: rows(&bd),
        }
    }

    /// Full design row groups: group 0 is the baseline part, groups 1..=d
    /// are the covariate-effect part scaled by z_l.
    fn num_groups(&self, d: usize) -> usize {
        1 + d
    }
}

/// Weighted normal equations over all cells, exploiting the block structure
/// of the design: per edge the row is [T_e | z_1 T'_e | ... | z_d T'_e].
/// `cell` yields (weight, working response) or None to skip the cell.
fn assemble_blocks(
    design: &TuneDesign,
    data: &ConnectomeDataset,
    mut cell: impl FnMut(usize, usize) -> Option<(f64, f64)>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.num_subjects();
    let ne = data.num_edges();
    let d = data.num_covariates();
    let p0 = design.p0;
    let g = design.num_groups(d);
    let p = g * p0;
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    // per-edge weight sums: s[a][b] = sum_i w * za * zb (z0 = 1), and
    // response sums r[a] = sum_i w * y * za
    let mut s = vec![0.0; g * g];
    let mut r = vec![0.0; g];
    for e in 0..ne {
        s.iter_mut().for_each(|v| *v = 0.0);
        r.iter_mut().for_each(|v| *v = 0.0);
        let mut any = false;
        for i in 0..n {
            if let Some((w, y)) = cell(i, e) {
                any = true;
                let z = &data.covariates[i];
                for a in 0..g {
                    let za = if a == 0 { 1.0 } else { z[a - 1] };
                    r[a] += w * y * za;
                    for b in a..g {
                        let zb = if b == 0 { 1.0 } else { z[b - 1] };
                        s[a * g + b] += w * za * zb;
                    }
                }
            }
        }
        if !any {
            continue;
        }
        for a in 0..g {
            let rowa = if a == 0 { &design.t_rows[e] } else { &design.td_rows[e] };
            for &(u, ra) in rowa {
                xtwy[a * p0 + u] += r[a] * ra;
            }
            for b in a..g {
                let sab = s[a * g + b];
                if sab == 0.0 {
                    continue;
                }
                let rowb = if b == 0 { &design.t_rows[e] } else { &design.td_rows[e] };
                for &(u, ra) in rowa {
                    let base = sab * ra;
                    for &(v, rb) in rowb {
                        xtwx[(a * p0 + u, b * p0 + v)] += base * rb;
                    }
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    (xtwx, xtwy)
}

fn eta_cell(design: &TuneDesign, data: &ConnectomeDataset, coef: &[f64], i: usize, e: usize) -> f64 {
    let p0 = design.p0;
    let d = data.num_covariates();
    let mut eta: f64 = design.t_rows[e].iter().map(|&(u, x)| x * coef[u]).sum();
    for l in 0..d {
        let zl = data.covariates[i][l];
        if zl != 0.0 {
            let cs = &coef[(l + 1) * p0..(l + 2) * p0];
            let dot: f64 = design.td_rows[e].iter().map(|&(u, x)| x * cs[u]).sum();
            eta += zl * dot;
        }
    }
    eta
}

/// Gaussian AIC for the length model on one latent draw.
fn tune_length_aic(design: &TuneDesign, data: &ConnectomeDataset) -> Result<f64, GlmError> {
    let (xtwx, xtwy) = assemble_blocks(design, data, |i, e| {
        let c = data.counts[i][e];
        if c >= 1 {
            Some((c as f64, data.lengths[i][e].unwrap().ln()))
        } else {
            None
        }
    });
    let p = xtwy.len();
    let mut reg = xtwx;
    // tiny ridge: clamped-spline designs are near-singular when few basis
    // functions receive support
    for a in 0..p {
        reg[(a, a)] += 1e-8;
    }
    let coef = solve_normal(reg, xtwy)?;
    let mut wrss = 0.0;
    let mut sum_ln_w = 0.0;
    let mut cells = 0.0;
    for i in 0..data.num_subjects() {
        for e in 0..data.num_edges() {
            let c = data.counts[i][e];
            if c >= 1 {
                let w = c as f64;
                let resid = data.lengths[i][e].unwrap().ln() - eta_cell(design, data, &coef, i, e);
                wrss += w * resid * resid;
                sum_ln_w += w.ln();
                cells += 1.0;
            }
        }
    }
    let sigma2 = (wrss / cells).max(f64::MIN_POSITIVE);
    let loglik = -0.5 * cells * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + 0.5 * sum_ln_w;
    Ok(2.0 * p as f64 - 2.0 * loglik)
}

fn tune_glm_aic(
    design: &TuneDesign,
    data: &ConnectomeDataset,
    poisson: bool,
) -> Result<f64, GlmError> {
    let d = data.num_covariates();
    let p0 = design.p0;
    let p = (1 + d) * p0;
    let mut coef = vec![0.0; p];
    for iter in 1..=MAX_ITERS {
        let (mut xtwx, xtwy) = assemble_blocks(design, data, |i, e| {
            let c = data.counts[i][e];
            let eta = eta_cell(design, data, &coef, i, e);
            if poisson {
                if c >= 1 {
                    let m = eta.clamp(-30.0, 30.0).exp();
                    Some((m, eta + (c as f64 - m) / m))
                } else {
                    None
                }
            } else {
                let y = if c >= 1 { 1.0 } else { 0.0 };
                let ec = eta.clamp(-8.0, 8.0);
                let phi = normal_pdf(ec);
                let cap = normal_cdf(ec);
                let var = (cap * (1.0 - cap)).max(1e-12);
                Some((phi * phi / var, eta + (y - cap) / phi))
            }
        });
        for a in 0..p {
            xtwx[(a, a)] += 1e-8;
        }
        let new = solve_normal(xtwx, xtwy)?;
        let magnitude = new.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        // diverging coefficients (probit separation / Poisson blow-up) never
        // come back; bail instead of burning the full iteration budget
        if !magnitude.is_finite() || magnitude > 1e4 {
            return Err(GlmError::NonConvergence(iter));
        }
        let delta = new
            .iter()
            .zip(&coef)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let scale = 1.0 + magnitude;
        coef = new;
        if delta < TOL * scale {
            let mut loglik = 0.0;
            for i in 0..data.num_subjects() {
                for e in 0..data.num_edges() {
                    let c = data.counts[i][e];
                    let eta = eta_cell(design, data, &coef, i, e);
                    if poisson {
                        if c >= 1 {
                            loglik += poisson_cell_loglik(eta, c);
                        }
                    } else if c >= 1 {
                        loglik += log_normal_cdf(eta);
                    } else {
                        loglik += log_normal_cdf(-eta);
                    }
                }
            }
            return Ok(2.0 * p as f64 - 2.0 * loglik);
        }
        let _ = iter;
    }
    Err(GlmError::NonConvergence(MAX_ITERS))
}

/// Grid search over the basis size: for each K, average the AICs of the
/// three per-layer regressions over independently drawn latent sets, then
/// pick the smallest K whose average is within 1% of the minimum.
pub fn tune_basis_size<R: Rng + ?Sized>(
    data: &ConnectomeDataset,
    grid: &[usize],
    latent_draws: usize,
    rng: &mut R,
) -> Result<TuneReport, InferenceError> {
    if grid.is_empty() {
        return Err(InferenceError::EmptyGrid);
    }
    let jn = data.num_regions();
    // latent draws are shared across the grid so K is the only difference
    let latents: Vec<(Vec<f64>, Vec<f64>)> = (0..latent_draws)
        .map(|_| {
            let xi: Vec<f64> = (0..jn).map(|_| rng.gen::<f64>()).collect();
            let delta: Vec<f64> = (0..jn).map(|_| rng.gen::<f64>()).collect();
            (xi, delta)
        })
        .collect();
    let mut rows = Vec::with_capacity(grid.len());
    for &k in grid {
        let cfg = BasisConfig::cubic(k).expect("grid K >= 4");
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        let mut failed = 0usize;
        for (xi, delta) in &latents {
            let design = TuneDesign::build(&cfg, data, xi, delta);
            let mut draw_failed = false;
            match tune_length_aic(&design, data) {
                Ok(a) => {
                    sums[0] += a;
                    counts[0] += 1;
                }
                Err(_) => draw_failed = true,
            }
            match tune_glm_aic(&design, data, false) {
                Ok(a) => {
                    sums[1] += a;
                    counts[1] += 1;
                }
                Err(_) => draw_failed = true,
            }
            match tune_glm_aic(&design, data, true) {
                Ok(a) => {
                    sums[2] += a;
                    counts[2] += 1;
                }
                Err(_) => draw_failed = true,
            }
            if draw_failed {
                failed += 1;
            }
        }
        let avg = |s: f64, c: usize| if c > 0 { s / c as f64 } else { f64::NAN };
        let al = avg(sums[0], counts[0]);
        let ap = avg(sums[1], counts[1]);
        let ac = avg(sums[2], counts[2]);
        rows.push(TuneRow {
            k,
            aic_length: al,
            aic_presence: ap,
            aic_count: ac,
            aic_total: al + ap + ac,
            failed_draws: failed,
        });
    }
    // an average over fewer than half the draws is too noisy to compare
    // across the grid; prefer rows where most draws converged, falling back
    // to any finite row when the whole grid is failure-prone
    let reliable: Vec<&TuneRow> = rows
        .iter()
        .filter(|r| r.aic_total.is_finite() && 2 * r.failed_draws <= latent_draws)
        .collect();
    let finite: Vec<&TuneRow> = if reliable.is_empty() {
        rows.iter().filter(|r| r.aic_total.is_finite()).collect()
    } else {
        reliable
    };
    if finite.is_empty() {
        return Err(InferenceError::EmptyGrid);
    }
    // knee rule: smallest K whose total AIC is within 1% of the minimum
    let min_aic = finite
        .iter()
        .map(|r| r.aic_total)
        .fold(f64::INFINITY, f64::min);
    let argmin_k = finite
        .iter()
        .find(|r| r.aic_total == min_aic)
        .map(|r| r.k)
        .unwrap();
    let mut sorted: Vec<&&TuneRow> = finite.iter().collect();
    sorted.sort_by_key(|r| r.k);
    let chosen = sorted
        .iter()
        .find(|r| (r.aic_total - min_aic).abs() < 0.01 * min_aic.abs())
        .map(|r| r.k)
        .unwrap_or(argmin_k);
    Ok(TuneReport {
        rows,
        knee_applied: chosen != argmin_k,
        chosen,
    })
}

// ---------------------------------------------------------------------------
// Posterior prediction

/// Per-cell posterior predictive quantities on held-out subjects: the
/// posterior-mean log length and the log predictive probability of the
/// observed count, both indexed `subject * num_edges + edge`.
pub struct PredictiveCells {
    pub mu_pred: Vec<f64>,
    pub count_logpred: Vec<f64>,
}

/// Average the plug-in predictive over posterior draws. Random effects for
/// unseen subjects are drawn per draw from the fitted DP mixture (including
/// the new-cluster rule); with `random_effects` off they are zero.
#[allow(clippy::too_many_arguments)]
pub fn posterior_predictive_cells<R: Rng + ?Sized>(
    draws: &[ModelState],
    cfg: &BasisConfig,
    hyper: &Hyperparams,
    heldout: &ConnectomeDataset,
    random_effects: bool,
    rng: &mut R,
) -> Result<PredictiveCells, InferenceError> {
    if draws.is_empty() {
        return Err(InferenceError::EmptyRun);
    }
    let jn = heldout.num_regions();
    if draws[0].xi.len() != jn {
        return Err(InferenceError::RegionMismatch);
    }
    let n = heldout.num_subjects();
    let ne = heldout.num_edges();
    let d = heldout.num_covariates();
    let mut mu_sum = vec![0.0; n * ne];
    // online logsumexp accumulators for the count predictive
    let mut lmax = vec![f64::NEG_INFINITY; n * ne];
    let mut lsum = vec![0.0; n * ne];
    for st in draws {
        let mats = reconstruct_effect_matrices(st, cfg, jn)?;
        // per-subject random effects for this draw
        let mut eta = vec![[0.0f64; NUM_LAYERS]; n];
        if random_effects {
            for row in eta.iter_mut() {
                for (t, slot) in row.iter_mut().enumerate() {
                    let tau2 = draw_mixture_scale(&st.tau2[t], st.alpha[t], hyper, rng);
                    *slot = tau2.sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for i in 0..n {
            let z = &heldout.covariates[i];
            for (e, &(j, k)) in heldout.edges.iter().enumerate() {
                let idx = i * ne + e;
                let mut pred = [0.0f64; NUM_LAYERS];
                for (t, pv) in pred.iter_mut().enumerate() {
                    *pv = mats[t][j * jn + k];
                    for l in 0..d {
                        *pv += z[l] * mats[NUM_LAYERS + t * d + l][j * jn + k];
                    }
                    if t != LENGTH {
                        *pv += eta[i][t];
                    }
                }
                // eta is zero-mean and symmetric, so the squared-error
                // optimal point prediction of the log length omits it; the
                // count predictive keeps its draw (a wild one only makes
                // that draw's term vanish in the logsumexp average)
                mu_sum[idx] += pred[0];
                let lp = zip_cell_loglik(pred[1], pred[2], heldout.counts[i][e]);
                // online logsumexp
                if lp > lmax[idx] {
                    if lmax[idx] == f64::NEG_INFINITY {
                        lsum[idx] = 1.0;
                    } else {
                        lsum[idx] = lsum[idx] * (lmax[idx] - lp).exp() + 1.0;
                    }
                    lmax[idx] = lp;
                } else if lp != f64::NEG_INFINITY {
                    lsum[idx] += (lp - lmax[idx]).exp();
                }
            }
        }
    }
    let s = draws.len() as f64;
    let mu_pred: Vec<f64> = mu_sum.iter().map(|v| v / s).collect();
    let count_logpred: Vec<f64> = lmax
        .iter()
        .zip(&lsum)
        .map(|(&m, &sum)| if m == f64::NEG_INFINITY { m } else { m + sum.ln() - s.ln() })
        .collect();
    Ok(PredictiveCells {
        mu_pred,
        count_logpred,
    })
}

/// One draw from the DP posterior mixture over random-effect scales: an
/// existing cluster with probability proportional to its size, or a fresh
/// scale from the base measure with probability proportional to alpha.
fn draw_mixture_scale<R: Rng + ?Sized>(
    tau2: &[f64],
    alpha: f64,
    hyper: &Hyperparams,
    rng: &mut R,
) -> f64 {
    let n = tau2.len() as f64;
    let u = rng.gen::<f64>() * (n + alpha);
    if u < n {
        tau2[u as usize]
    } else {
        let g = GammaDist::new(hyper.b1, 1.0 / hyper.b2)
            .unwrap()
            .sample(rng);
        1.0 / g
    }
}

/// Held-out prediction metrics from posterior draws.
pub fn posterior_predict<R: Rng + ?Sized>(
    draws: &[ModelState],
    cfg: &BasisConfig,
    hyper: &Hyperparams,
    heldout: &ConnectomeDataset,
    random_effects: bool,
    rng: &mut R,
) -> Result<PredictionMetrics, InferenceError> {
    let cells = posterior_predictive_cells(draws, cfg, hyper, heldout, random_effects, rng)?;
    Ok(crate::metrics::prediction_metrics(
        heldout,
        &cells.mu_pred,
        &cells.count_logpred,
    )?)
}
