//! Synthetic-data generation from known graphon truths, the per-edge ANCOVA
//! baseline, and the replication study comparing it with the Bayesian fit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ConnectomeDataset, COVARIATE_NAMES};
use crate::glm::{irls_poisson, irls_probit, wls};
use crate::inference::{
    posterior_mean_matrices, posterior_predictive_cells, InferenceError, PredictiveCells,
};
use crate::metrics::{accuracy, poisson_cell_loglik, AccuracyRow, MetricsError, PredictionMetrics};
use crate::model::{
    effect_families, Hyperparams, ModelError, ModelState, Predictors, COUNT, LENGTH, NUM_LAYERS,
    PRESENCE,
};
use crate::samplers::{Sampler, SamplerOptions};
use crate::splines::BasisConfig;
use crate::stats::normal_cdf;

/// Symmetrized perturbation noise sd added to every truth matrix entry.
const TRUTH_NOISE_SD: f64 = 0.223_606_797_749_978_97; // sqrt(0.05)

/// Cap on the Poisson mean when forward-sampling counts; keeps pathological
/// predictor values from requesting astronomically large draws.
const MAX_COUNT_MEAN: f64 = 1.0e9;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("study cell n={n}, replication {rep}: {message}")]
    Cell {
        n: usize,
        rep: usize,
        message: String,
    },
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
}

// ---------------------------------------------------------------------------
// Ground truth

/// Ground-truth effect matrices and the latents they were built from.
///
/// `matrices` holds the 15 J x J row-major effect matrices in the same family
/// order as `effect_families`: baselines (mu0, pi0, lambda0) then covariate
/// effects grouped by layer (length, presence, count) and covariate
/// (MCI, AD, M, Age).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSpec {
    pub num_regions: usize,
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
    pub matrices: Vec<Vec<f64>>,
    /// Error sd of the log-length layer.
    pub sigma: f64,
}

/// Noise-free truth surface for one effect family at latent values (aj, ak):
/// a symmetrized cubic for the baselines and exp/sin/cos/identity for the
/// MCI/AD/M/Age effects, with steeper coefficients on the presence layer.
pub fn family_mean(fam: usize, aj: f64, ak: f64) -> f64 {
    let (c1, c2, f): (f64, f64, fn(f64) -> f64) = if fam < NUM_LAYERS {
        match fam {
            1 => (0.7, 1.0, |x| x * x * x),
            _ => (0.5, 0.4, |x| x * x * x),
        }
    } else {
        let t = (fam - NUM_LAYERS) / 4;
        let l = (fam - NUM_LAYERS) % 4;
        let (c1, c2) = if t == PRESENCE { (0.7, 1.0) } else { (0.5, 0.4) };
        let f: fn(f64) -> f64 = match l {
            0 => f64::exp,
            1 => f64::sin,
            2 => f64::cos,
            _ => |x| x,
        };
        (c1, c2, f)
    };
    (f(-c1 * aj - c2 * ak) + f(-c1 * ak - c2 * aj)) / 2.0
}

/// Build the 15 effect matrices at the given latents; with a generator,
/// symmetrized N(0, 0.05) perturbations are added, otherwise the smooth
/// surfaces are returned.
fn build_truth_matrices<R: Rng + ?Sized>(
    jn: usize,
    xi: &[f64],
    delta: &[f64],
    mut rng: Option<&mut R>,
) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, TRUTH_NOISE_SD).unwrap();
    let nfam = NUM_LAYERS * (1 + 4);
    let mut matrices = Vec::with_capacity(nfam);
    for fam in 0..nfam {
        let lat = if fam < NUM_LAYERS { xi } else { delta };
        let raw: Vec<f64> = match rng.as_deref_mut() {
            Some(r) => (0..jn * jn).map(|_| noise.sample(r)).collect(),
            None => vec![0.0; jn * jn],
        };
        let mut m = vec![0.0; jn * jn];
        for j in 0..jn {
            for k in j..jn {
                let eps = (raw[j * jn + k] + raw[k * jn + j]) / 2.0;
                let v = family_mean(fam, lat[j], lat[k]) + eps;
                m[j * jn + k] = v;
                m[k * jn + j] = v;
            }
        }
        matrices.push(m);
    }
    matrices
}

impl TruthSpec {
    /// Draw the latents uniformly and build the 15 truth matrices with
    /// symmetrized N(0, 0.05) perturbations.
    pub fn sample<R: Rng + ?Sized>(num_regions: usize, sigma: f64, rng: &mut R) -> Self {
        let jn = num_regions;
        let xi: Vec<f64> = (0..jn).map(|_| rng.gen::<f64>()).collect();
        let delta: Vec<f64> = (0..jn).map(|_| rng.gen::<f64>()).collect();
        let matrices = build_truth_matrices(jn, &xi, &delta, Some(rng));
        Self {
            num_regions,
            xi,
            delta,
            matrices,
            sigma,
        }
    }

    /// Same latents and smooth surfaces, freshly drawn entry perturbations.
    pub fn resample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        Self {
            matrices: build_truth_matrices(self.num_regions, &self.xi, &self.delta, Some(rng)),
            xi: self.xi.clone(),
            delta: self.delta.clone(),
            ..*self
        }
    }

    /// Noise-free effect surfaces evaluated at the latents; the estimand the
    /// graphon model targets (the per-entry perturbations are generation
    /// noise that averages out across replications).
    pub fn smooth_matrices(&self) -> Vec<Vec<f64>> {
        build_truth_matrices::<ChaCha8Rng>(self.num_regions, &self.xi, &self.delta, None)
    }

    /// Linear predictors (mu, pi, lambda) of edge (j, k) for covariates `z`.
    pub fn predictors(&self, j: usize, k: usize, z: &[f64]) -> (f64, f64, f64) {
        let jn = self.num_regions;
        let idx = j * jn + k;
        let mut out = [0.0; NUM_LAYERS];
        for (t, o) in out.iter_mut().enumerate() {
            *o = self.matrices[t][idx];
            for (l, &zl) in z.iter().enumerate() {
                *o += zl * self.matrices[NUM_LAYERS + t * 4 + l][idx];
            }
        }
        (out[LENGTH], out[PRESENCE], out[COUNT])
    }
}

// ---------------------------------------------------------------------------
// Data generation

/// Covariate sampling law for synthetic subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateLaw {
    /// Sd of the (centered) age covariate. The default keeps age on the same
    /// scale as the unit-order truth effects; larger values push the count
    /// predictor into extreme Poisson means.
    pub age_sd: f64,
}

impl Default for CovariateLaw {
    fn default() -> Self {
        Self { age_sd: 1.0 }
    }
}

fn sample_count<R: Rng + ?Sized>(lam: f64, rng: &mut R) -> u64 {
    let mean = lam.exp().min(MAX_COUNT_MEAN);
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

/// Draw an n-subject dataset from the truth: disease uniform over
/// {NC, MCI, AD}, male ~ Bernoulli(1/2), age normal and centered; then
/// Xi ~ Bernoulli(Phi(pi)), N | Xi=1 ~ Poisson(e^lambda), and
/// log L ~ N(mu, sigma^2/N) whenever N >= 1.
pub fn generate_dataset<R: Rng + ?Sized>(
    truth: &TruthSpec,
    num_subjects: usize,
    law: &CovariateLaw,
    rng: &mut R,
) -> ConnectomeDataset {
    let jn = truth.num_regions;
    let edges = ConnectomeDataset::edge_list(jn, false);
    let age = Normal::new(0.0, law.age_sd).unwrap();
    let mut covariates: Vec<Vec<f64>> = (0..num_subjects)
        .map(|_| {
            let disease = rng.gen_range(0..3u8);
            let mci = f64::from(disease == 1);
            let ad = f64::from(disease == 2);
            let male = f64::from(rng.gen::<f64>() < 0.5);
            vec![mci, ad, male, age.sample(rng)]
        })
        .collect();
    let mean_age = covariates.iter().map(|z| z[3]).sum::<f64>() / num_subjects as f64;
    for z in covariates.iter_mut() {
        z[3] -= mean_age;
    }

    let mut counts = Vec::with_capacity(num_subjects);
    let mut lengths = Vec::with_capacity(num_subjects);
    for z in &covariates {
        let mut crow = Vec::with_capacity(edges.len());
        let mut lrow = Vec::with_capacity(edges.len());
        for &(j, k) in &edges {
            let (mu, pi, lam) = truth.predictors(j, k, z);
            let connected = rng.gen::<f64>() < normal_cdf(pi);
            let n = if connected { sample_count(lam, rng) } else { 0 };
            let length = if n >= 1 {
                let sd = (truth.sigma * truth.sigma / n as f64).sqrt();
                let eps = if sd > 0.0 {
                    Normal::new(0.0, sd).unwrap().sample(rng)
                } else {
                    0.0
                };
                Some((mu + eps).exp())
            } else {
                None
            };
            crow.push(n);
            lrow.push(length);
        }
        counts.push(crow);
        lengths.push(lrow);
    }

    ConnectomeDataset {
        region_names: (0..jn).map(|j| format!("r{j:02}")).collect(),
        subject_ids: (0..num_subjects).map(|i| format!("s{i:04}")).collect(),
        covariates,
        covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        edges,
        counts,
        lengths,
        self_edges: false,
    }
}

/// Forward-simulate observations from the model at `state`, overwriting the
/// counts and lengths in `data` and the zero-inflation indicators in `state`.
/// Used by prior-consistency checks that alternate parameter and data draws.
pub fn simulate_observations<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &mut ConnectomeDataset,
    cfg: &BasisConfig,
    rng: &mut R,
) -> Result<(), ModelError> {
    let preds = Predictors::compute(state, data, cfg)?;
    let ne = data.num_edges();
    for i in 0..data.num_subjects() {
        for e in 0..ne {
            let (mu, pi, lam) = preds.at(i, e);
            let connected = rng.gen::<f64>() < normal_cdf(pi);
            let n = if connected { sample_count(lam, rng) } else { 0 };
            state.xi_zero[i][e] = connected || n >= 1;
            data.counts[i][e] = n;
            data.lengths[i][e] = if n >= 1 {
                let sd = (state.sigma2 / n as f64).sqrt();
                let eps = Normal::new(0.0, sd).unwrap().sample(rng);
                Some((mu + eps).exp())
            } else {
                None
            };
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ANCOVA baseline

/// Per-edge regression fits, `None` where the fit failed or the data were
/// insufficient. Coefficient vectors are `[intercept, z...]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AncovaFit {
    /// WLS of log length on (1, Z) with weights N, over subjects with N >= 1.
    pub length: Vec<Option<Vec<f64>>>,
    /// Probit GLM of the presence indicator on (1, Z), over all subjects.
    pub presence: Vec<Option<Vec<f64>>>,
    /// Poisson GLM of N on (1, Z), over subjects with N >= 1.
    pub count: Vec<Option<Vec<f64>>>,
}

/// Fit every edge independently with the three per-edge regressions,
/// ignoring zero inflation and random effects.
pub fn ancova_fit(data: &ConnectomeDataset) -> AncovaFit {
    let n = data.num_subjects();
    let ne = data.num_edges();
    let mut fit = AncovaFit {
        length: Vec::with_capacity(ne),
        presence: Vec::with_capacity(ne),
        count: Vec::with_capacity(ne),
    };
    let design_row = |i: usize| {
        let mut row = Vec::with_capacity(1 + data.num_covariates());
        row.push(1.0);
        row.extend_from_slice(&data.covariates[i]);
        row
    };
    for e in 0..ne {
        let mut len_rows = Vec::new();
        let mut len_y = Vec::new();
        let mut len_w = Vec::new();
        let mut pres_rows = Vec::with_capacity(n);
        let mut pres_y = Vec::with_capacity(n);
        let mut cnt_rows = Vec::new();
        let mut cnt_y = Vec::new();
        for i in 0..n {
            let c = data.counts[i][e];
            pres_rows.push(design_row(i));
            pres_y.push(f64::from(c >= 1));
            if c >= 1 {
                cnt_rows.push(design_row(i));
                cnt_y.push(c as f64);
                if let Some(l) = data.lengths[i][e] {
                    len_rows.push(design_row(i));
                    len_y.push(l.ln());
                    len_w.push(c as f64);
                }
            }
        }
        fit.length
            .push(wls(&len_rows, &len_y, &len_w).ok().map(|f| f.coef));
        fit.presence
            .push(irls_probit(&pres_rows, &pres_y).ok().map(|f| f.coef));
        fit.count
            .push(irls_poisson(&cnt_rows, &cnt_y).ok().map(|f| f.coef));
    }
    fit
}

/// Arrange the per-edge ANCOVA coefficients as 15 J x J effect matrices in
/// the shared family order; entries without an estimate (including the
/// diagonal) are NaN.
pub fn ancova_matrices(
    fit: &AncovaFit,
    num_regions: usize,
    edges: &[(usize, usize)],
) -> Vec<Vec<f64>> {
    let jn = num_regions;
    let nfam = NUM_LAYERS * (1 + 4);
    let mut mats = vec![vec![f64::NAN; jn * jn]; nfam];
    let mut place = |fam: usize, j: usize, k: usize, v: f64| {
        mats[fam][j * jn + k] = v;
        mats[fam][k * jn + j] = v;
    };
    let layers: [(&Vec<Option<Vec<f64>>>, usize); 3] = [
        (&fit.length, LENGTH),
        (&fit.presence, PRESENCE),
        (&fit.count, COUNT),
    ];
    for (coefs, t) in layers {
        for (e, &(j, k)) in edges.iter().enumerate() {
            if let Some(c) = &coefs[e] {
                place(t, j, k, c[0]);
                for l in 0..c.len() - 1 {
                    place(NUM_LAYERS + t * 4 + l, j, k, c[1 + l]);
                }
            }
        }
    }
    mats
}

/// Plug-in held-out predictions from the ANCOVA fit: fitted log length and
/// a plain (not zero-inflated) Poisson log probability of the observed
/// count. Cells on edges without an estimate are NaN.
pub fn ancova_predictive_cells(fit: &AncovaFit, heldout: &ConnectomeDataset) -> PredictiveCells {
    let n = heldout.num_subjects();
    let ne = heldout.num_edges();
    let mut mu_pred = vec![f64::NAN; n * ne];
    let mut count_logpred = vec![f64::NAN; n * ne];
    let lin = |c: &[f64], z: &[f64]| c[0] + c[1..].iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    for i in 0..n {
        let z = &heldout.covariates[i];
        for e in 0..ne {
            if let Some(c) = &fit.length[e] {
                mu_pred[i * ne + e] = lin(c, z);
            }
            if let Some(c) = &fit.count[e] {
                count_logpred[i * ne + e] = poisson_cell_loglik(lin(c, z), heldout.counts[i][e]);
            }
        }
    }
    PredictiveCells {
        mu_pred,
        count_logpred,
    }
}

/// Restrict two prediction-cell sets to the cells where both are defined, so
/// competing methods are scored on a common denominator.
pub fn mask_common_cells(a: &mut PredictiveCells, b: &mut PredictiveCells) {
    for (x, y) in a.mu_pred.iter_mut().zip(b.mu_pred.iter_mut()) {
        if !x.is_finite() || !y.is_finite() {
            *x = f64::NAN;
            *y = f64::NAN;
        }
    }
    for (x, y) in a.count_logpred.iter_mut().zip(b.count_logpred.iter_mut()) {
        if !x.is_finite() || !y.is_finite() {
            *x = f64::NAN;
            *y = f64::NAN;
        }
    }
}

// ---------------------------------------------------------------------------
// Replication study

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bayes,
    Ancova,
}

impl Method {
    fn label(self) -> &'static str {
        match self {
            Method::Bayes => "bayes",
            Method::Ancova => "ancova",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub num_regions: usize,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub num_basis: usize,
    pub sigma_true: f64,
    pub covariates: CovariateLaw,
    /// Fit each replication on the full sample and score estimation accuracy.
    pub estimation: bool,
    /// Fit on the first half of each replication and score held-out
    /// prediction on the second half.
    pub prediction: bool,
    /// MCMC settings for the Bayesian fits; the seed and data are overridden
    /// per replication.
    pub sampler: SamplerOptions,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            num_regions: 20,
            sample_sizes: vec![500],
            replications: 5,
            seed: 1,
            methods: vec![Method::Bayes, Method::Ancova],
            num_basis: 7,
            sigma_true: 0.5,
            covariates: CovariateLaw::default(),
            estimation: true,
            prediction: false,
            sampler: SamplerOptions {
                random_effects: false,
                ..SamplerOptions::default()
            },
        }
    }
}

/// One held-out prediction result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_size: usize,
    pub method: String,
    pub replication: usize,
    pub length_mse: f64,
    pub n_length_cells: usize,
    pub count_mean_loglik: f64,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StudyReport {
    pub accuracy: Vec<AccuracyRow>,
    pub prediction: Vec<PredictionRow>,
}

#[derive(Default)]
struct RepOutcome {
    bayes_mats: Option<Vec<Vec<f64>>>,
    ancova_mats: Option<Vec<Vec<f64>>>,
    bayes_pred: Option<PredictionMetrics>,
    ancova_pred: Option<PredictionMetrics>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent, reproducible RNG stream per (study seed, sample size,
/// replication); replication 0 is reserved for the truth draw.
fn stream_seed(seed: u64, n: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(n as u64)) ^ rep as u64)
}

fn fit_bayes_draws(
    data: &ConnectomeDataset,
    cfg: &BasisConfig,
    opts: &SamplerOptions,
    seed: u64,
) -> Vec<ModelState> {
    let opts = SamplerOptions {
        seed,
        ..opts.clone()
    };
    Sampler::new(data.clone(), cfg.clone(), Hyperparams::default(), opts)
        .run()
        .draws
}

fn run_replication(
    config: &StudyConfig,
    truth: &TruthSpec,
    cfg: &BasisConfig,
    n: usize,
    rep: usize,
) -> Result<RepOutcome, SimulateError> {
    let cell_err = |s: String| SimulateError::Cell {
        n,
        rep,
        message: s,
    };
    let base_seed = stream_seed(config.seed, n, rep + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    // Each replication draws fresh entry perturbations around the shared
    // smooth surfaces, so the replication noise covers the whole generator.
    let rep_truth = truth.resample_noise(&mut rng);
    let data = generate_dataset(&rep_truth, n, &config.covariates, &mut rng);
    let want = |m: Method| config.methods.contains(&m);
    let mut out = RepOutcome::default();

    if config.estimation {
        if want(Method::Ancova) {
            let fit = ancova_fit(&data);
            out.ancova_mats = Some(ancova_matrices(&fit, truth.num_regions, &data.edges));
        }
        if want(Method::Bayes) {
            let draws = fit_bayes_draws(&data, cfg, &config.sampler, splitmix64(base_seed));
            out.bayes_mats = Some(
                posterior_mean_matrices(&draws, cfg, truth.num_regions)
                    .map_err(|e| cell_err(e.to_string()))?,
            );
        }
    }

    if config.prediction {
        let (train, test) = data.split_half();
        let mut bayes_cells = if want(Method::Bayes) {
            let draws = fit_bayes_draws(&train, cfg, &config.sampler, splitmix64(base_seed ^ 1));
            let mut pred_rng = ChaCha8Rng::seed_from_u64(splitmix64(base_seed ^ 2));
            Some(
                posterior_predictive_cells(
                    &draws,
                    cfg,
                    &Hyperparams::default(),
                    &test,
                    config.sampler.random_effects,
                    &mut pred_rng,
                )
                .map_err(|e| cell_err(e.to_string()))?,
            )
        } else {
            None
        };
        let mut ancova_cells = if want(Method::Ancova) {
            Some(ancova_predictive_cells(&ancova_fit(&train), &test))
        } else {
            None
        };
        if let (Some(b), Some(a)) = (bayes_cells.as_mut(), ancova_cells.as_mut()) {
            mask_common_cells(b, a);
        }
        let score = |cells: &PredictiveCells| {
            crate::metrics::prediction_metrics(&test, &cells.mu_pred, &cells.count_logpred)
                .map_err(|e| cell_err(e.to_string()))
        };
        if let Some(c) = &bayes_cells {
            out.bayes_pred = Some(score(c)?);
        }
        if let Some(c) = &ancova_cells {
            out.ancova_pred = Some(score(c)?);
        }
    }
    Ok(out)
}

/// Run the full replication study: per sample size, one set of latents and
/// smooth surfaces shared by all replications; each replication redraws the
/// entry perturbations and the data, fits the requested methods, and accuracy
/// is scored against the shared smooth surfaces.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport, SimulateError> {
    let cfg = BasisConfig::cubic(config.num_basis).expect("valid basis size");
    let families = effect_families(
        &COVARIATE_NAMES
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>(),
    );
    let mut report = StudyReport::default();

    for &n in &config.sample_sizes {
        let mut truth_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, n, 0));
        let truth = TruthSpec::sample(config.num_regions, config.sigma_true, &mut truth_rng);
        let smooth_truth = truth.smooth_matrices();
        let outcomes: Vec<Result<RepOutcome, SimulateError>> = (0..config.replications)
            .into_par_iter()
            .map(|rep| run_replication(config, &truth, &cfg, n, rep))
            .collect();
        let outcomes: Vec<RepOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

        if config.estimation {
            let sets: [(Method, Vec<&Vec<Vec<f64>>>); 2] = [
                (
                    Method::Bayes,
                    outcomes.iter().filter_map(|o| o.bayes_mats.as_ref()).collect(),
                ),
                (
                    Method::Ancova,
                    outcomes.iter().filter_map(|o| o.ancova_mats.as_ref()).collect(),
                ),
            ];
            for (method, mats) in sets {
                if mats.is_empty() {
                    continue;
                }
                for (fam_idx, fam) in families.iter().enumerate() {
                    let estimates: Vec<Vec<f64>> =
                        mats.iter().map(|m| m[fam_idx].clone()).collect();
                    let cell = accuracy(&estimates, &smooth_truth[fam_idx])?;
                    report.accuracy.push(AccuracyRow {
                        sample_size: n,
                        family: fam.label.clone(),
                        method: method.label().to_string(),
                        bias2: cell.bias2,
                        variance: cell.variance,
                        mse: cell.mse,
                        n_entries: cell.n_entries,
                    });
                }
            }
        }

        if config.prediction {
            for (rep, o) in outcomes.iter().enumerate() {
                let pairs = [
                    (Method::Bayes, o.bayes_pred.as_ref()),
                    (Method::Ancova, o.ancova_pred.as_ref()),
                ];
                for (method, pred) in pairs {
                    if let Some(p) = pred {
                        report.prediction.push(PredictionRow {
                            sample_size: n,
                            method: method.label().to_string(),
                            replication: rep,
                            length_mse: p.length_mse,
                            n_length_cells: p.n_length_cells,
                            count_mean_loglik: p.count_mean_loglik,
                            n_subjects: p.n_subjects,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}

impl StudyReport {
    pub fn accuracy_csv(&self) -> String {
        rows_to_csv(&self.accuracy)
    }

    pub fn prediction_csv(&self) -> String {
        rows_to_csv(&self.prediction)
    }

    /// Markdown table of per-family bias^2 / variance / MSE, one section per
    /// sample size, methods side by side.
    pub fn accuracy_markdown(&self) -> String {
        let mut out = String::new();
        let mut sizes: Vec<usize> = self.accuracy.iter().map(|r| r.sample_size).collect();
        sizes.dedup();
        for n in sizes {
            let rows: Vec<&AccuracyRow> = self
                .accuracy
                .iter()
                .filter(|r| r.sample_size == n)
                .collect();
            let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
            methods.dedup();
            out.push_str(&format!("## Estimation accuracy, n = {n}\n\n| family |"));
            for m in &methods {
                out.push_str(&format!(" {m} bias^2 | {m} variance | {m} MSE |"));
            }
            out.push_str("\n|---|");
            out.push_str(&"---|---|---|".repeat(methods.len()));
            out.push('\n');
            let mut families: Vec<&str> = rows.iter().map(|r| r.family.as_str()).collect();
            families.dedup();
            for fam in families {
                out.push_str(&format!("| {fam} |"));
                for m in &methods {
                    match rows.iter().find(|r| r.family == fam && r.method == *m) {
                        Some(r) => out.push_str(&format!(
                            " {:.4e} | {:.4e} | {:.4e} |",
                            r.bias2, r.variance, r.mse
                        )),
                        None => out.push_str(" - | - | - |"),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// Markdown table of held-out prediction scores averaged over
    /// replications, one row per (sample size, method).
    pub fn prediction_markdown(&self) -> String {
        let mut out = String::from(
            "## Held-out prediction (half/half split)\n\n\
             | n | method | length MSE | count mean log-lik | replications |\n\
             |---|---|---|---|---|\n",
        );
        let mut keys: Vec<(usize, String)> = self
            .prediction
            .iter()
            .map(|r| (r.sample_size, r.method.clone()))
            .collect();
        keys.dedup();
        for (n, m) in keys {
            let rows: Vec<&PredictionRow> = self
                .prediction
                .iter()
                .filter(|r| r.sample_size == n && r.method == m)
                .collect();
            let k = rows.len() as f64;
            let mse = rows.iter().map(|r| r.length_mse).sum::<f64>() / k;
            let ll = rows.iter().map(|r| r.count_mean_loglik).sum::<f64>() / k;
            out.push_str(&format!(
                "| {n} | {m} | {mse:.4} | {ll:.4} | {} |\n",
                rows.len()
            ));
        }
        out
    }
}

fn rows_to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("csv serialization");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn family_means_match_hand_values() {
        // mu0: symmetrized cubic with coefficients (0.5, 0.4)
        let a: f64 = -0.5 * 0.2 - 0.4 * 0.5;
        let b: f64 = -0.5 * 0.5 - 0.4 * 0.2;
        assert_abs_diff_eq!(
            family_mean(0, 0.2, 0.5),
            (a.powi(3) + b.powi(3)) / 2.0,
            epsilon = 1e-15
        );
        // pi0 uses the steeper (0.7, 1.0) coefficients
        let a: f64 = -0.7 * 0.2 - 1.0 * 0.5;
        let b: f64 = -0.7 * 0.5 - 1.0 * 0.2;
        assert_abs_diff_eq!(
            family_mean(1, 0.2, 0.5),
            (a.powi(3) + b.powi(3)) / 2.0,
            epsilon = 1e-15
        );
        // chi_mci (length layer, MCI): exp with (0.5, 0.4)
        let a = (-0.5 * 0.3 - 0.4 * 0.8f64).exp();
        let b = (-0.5 * 0.8 - 0.4 * 0.3f64).exp();
        assert_abs_diff_eq!(family_mean(3, 0.3, 0.8), (a + b) / 2.0, epsilon = 1e-15);
        // beta_ad (presence, AD): sin with (0.7, 1.0)
        let a = (-0.7 * 0.3 - 1.0 * 0.8f64).sin();
        let b = (-0.7 * 0.8 - 1.0 * 0.3f64).sin();
        assert_abs_diff_eq!(
            family_mean(3 + PRESENCE * 4 + 1, 0.3, 0.8),
            (a + b) / 2.0,
            epsilon = 1e-15
        );
        // nu_m (count, male): cos with (0.5, 0.4)
        let a = (-0.5 * 0.3 - 0.4 * 0.8f64).cos();
        let b = (-0.5 * 0.8 - 0.4 * 0.3f64).cos();
        assert_abs_diff_eq!(
            family_mean(3 + COUNT * 4 + 2, 0.3, 0.8),
            (a + b) / 2.0,
            epsilon = 1e-15
        );
        // chi_age (length, age): identity
        let v = (-0.5 * 0.3 - 0.4 * 0.8 + (-0.5 * 0.8 - 0.4 * 0.3)) / 2.0;
        assert_abs_diff_eq!(family_mean(3 + LENGTH * 4 + 3, 0.3, 0.8), v, epsilon = 1e-15);
    }

    #[test]
    fn truth_matrices_symmetric_and_near_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = TruthSpec::sample(12, 0.5, &mut rng);
        assert_eq!(truth.matrices.len(), 15);
        let jn = 12;
        let mut max_dev = 0.0f64;
        for (fam, m) in truth.matrices.iter().enumerate() {
            let lat = if fam < 3 { &truth.xi } else { &truth.delta };
            for j in 0..jn {
                for k in 0..jn {
                    assert_eq!(m[j * jn + k].to_bits(), m[k * jn + j].to_bits());
                    let dev = (m[j * jn + k] - family_mean(fam, lat[j], lat[k])).abs();
                    max_dev = max_dev.max(dev);
                    // symmetrized noise has sd sqrt(0.05/2) ~ 0.158
                    assert!(dev < 1.0, "noise deviation too large: {dev}");
                }
            }
        }
        assert!(max_dev > 1e-3, "noise missing from truth matrices");
    }

    fn flat_truth(jn: usize, mu0: f64, pi0: f64, lam0: f64, sigma: f64) -> TruthSpec {
        let mut matrices = vec![vec![0.0; jn * jn]; 15];
        matrices[LENGTH] = vec![mu0; jn * jn];
        matrices[PRESENCE] = vec![pi0; jn * jn];
        matrices[COUNT] = vec![lam0; jn * jn];
        TruthSpec {
            num_regions: jn,
            xi: vec![0.5; jn],
            delta: vec![0.5; jn],
            matrices,
            sigma,
        }
    }

    #[test]
    fn saturated_inflation_disconnects_everything() {
        let truth = flat_truth(10, 3.0, -10.0, 1.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = generate_dataset(&truth, 50, &CovariateLaw::default(), &mut rng);
        let total: u64 = data.counts.iter().flatten().sum();
        assert_eq!(total, 0);
        assert!(data.lengths.iter().flatten().all(|l| l.is_none()));
    }

    #[test]
    fn noiseless_lengths_equal_the_predictor() {
        let truth = flat_truth(6, 3.0, 2.0, 1.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = generate_dataset(&truth, 20, &CovariateLaw::default(), &mut rng);
        data.validate().unwrap();
        let mut seen = 0;
        for i in 0..data.num_subjects() {
            for e in 0..data.num_edges() {
                assert_eq!(data.lengths[i][e].is_some(), data.counts[i][e] >= 1);
                if let Some(l) = data.lengths[i][e] {
                    let (j, k) = data.edges[e];
                    let (mu, _, _) = truth.predictors(j, k, &data.covariates[i]);
                    assert_abs_diff_eq!(l.ln(), mu, epsilon = 1e-12);
                    seen += 1;
                }
            }
        }
        assert!(seen > 50);
    }

    #[test]
    fn generated_dataset_is_valid_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = TruthSpec::sample(8, 0.5, &mut rng);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let d1 = generate_dataset(&truth, 25, &CovariateLaw::default(), &mut r1);
        let d2 = generate_dataset(&truth, 25, &CovariateLaw::default(), &mut r2);
        d1.validate().unwrap();
        assert_eq!(d1.counts, d2.counts);
        assert_eq!(
            serde_json::to_string(&d1.covariates).unwrap(),
            serde_json::to_string(&d2.covariates).unwrap()
        );
        // ages are centered
        let mean_age: f64 = d1.covariates.iter().map(|z| z[3]).sum::<f64>() / 25.0;
        assert_abs_diff_eq!(mean_age, 0.0, epsilon = 1e-12);
    }

    /// Fully connected dataset with constant counts and noiseless lengths:
    /// WLS recovers the length truth exactly, the constant-count Poisson fit
    /// has zero covariate effects, and the all-present probit separates.
    #[test]
    fn ancova_on_noiseless_effect_free_data() {
        let jn = 4;
        let n = 30;
        let edges = ConnectomeDataset::edge_list(jn, false);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let covariates: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                vec![
                    f64::from(rng.gen::<f64>() < 0.3),
                    f64::from(rng.gen::<f64>() < 0.3),
                    f64::from(rng.gen::<f64>() < 0.5),
                    rng.gen::<f64>() - 0.5,
                ]
            })
            .collect();
        let data = ConnectomeDataset {
            region_names: (0..jn).map(|j| format!("r{j}")).collect(),
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            covariates,
            covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
            edges: edges.clone(),
            counts: vec![vec![5; edges.len()]; n],
            lengths: vec![vec![Some(3.0f64.exp()); edges.len()]; n],
            self_edges: false,
        };
        let fit = ancova_fit(&data);
        for e in 0..edges.len() {
            let c = fit.length[e].as_ref().unwrap();
            assert_abs_diff_eq!(c[0], 3.0, epsilon = 1e-8);
            for l in 1..5 {
                assert_abs_diff_eq!(c[l], 0.0, epsilon = 1e-6);
            }
            let c = fit.count[e].as_ref().unwrap();
            assert_abs_diff_eq!(c[0], 5.0f64.ln(), epsilon = 1e-6);
            for l in 1..5 {
                assert_abs_diff_eq!(c[l], 0.0, epsilon = 1e-6);
            }
            // every subject connected: probit separation, no estimate
            assert!(fit.presence[e].is_none());
        }
    }

    #[test]
    fn underdetermined_edges_get_missing_markers() {
        let jn = 3;
        let n = 10;
        let edges = ConnectomeDataset::edge_list(jn, false);
        let mut counts = vec![vec![4u64; edges.len()]; n];
        let mut lengths = vec![vec![Some(10.0); edges.len()]; n];
        // edge 0 observed for only two subjects: fewer rows than the five
        // coefficients of (1, Z)
        for i in 2..n {
            counts[i][0] = 0;
            lengths[i][0] = None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let covariates: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                vec![
                    f64::from(rng.gen::<f64>() < 0.4),
                    f64::from(rng.gen::<f64>() < 0.4),
                    f64::from(rng.gen::<f64>() < 0.5),
                    rng.gen::<f64>(),
                ]
            })
            .collect();
        let data = ConnectomeDataset {
            region_names: (0..jn).map(|j| format!("r{j}")).collect(),
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            covariates,
            covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
            edges,
            counts,
            lengths,
            self_edges: false,
        };
        let fit = ancova_fit(&data);
        assert!(fit.length[0].is_none());
        assert!(fit.count[0].is_none());
    }

    #[test]
    fn ancova_matrices_place_families_and_nan_diagonal() {
        let jn = 3;
        let edges = ConnectomeDataset::edge_list(jn, false); // (0,1),(0,2),(1,2)
        let mut fit = AncovaFit {
            length: vec![None; 3],
            presence: vec![None; 3],
            count: vec![None; 3],
        };
        fit.length[0] = Some(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        fit.count[2] = Some(vec![-1.0, -2.0, -3.0, -4.0, -5.0]);
        let mats = ancova_matrices(&fit, jn, &edges);
        assert_eq!(mats.len(), 15);
        // mu0 at (0,1) symmetric
        assert_eq!(mats[LENGTH][1], 1.0);
        assert_eq!(mats[LENGTH][jn], 1.0);
        // chi_age (length covariate 3) carries coefficient 5
        assert_eq!(mats[3 + LENGTH * 4 + 3][1], 5.0);
        // lambda0 and nu_mci at (1,2)
        assert_eq!(mats[COUNT][jn + 2], -1.0);
        assert_eq!(mats[3 + COUNT * 4][jn + 2], -2.0);
        // unfitted edges and diagonal are NaN
        assert!(mats[LENGTH][2].is_nan());
        assert!(mats[PRESENCE][1].is_nan());
        for j in 0..jn {
            assert!(mats[LENGTH][j * jn + j].is_nan());
        }
    }

    #[test]
    fn common_cell_mask_synchronizes_nans() {
        let mut a = PredictiveCells {
            mu_pred: vec![1.0, f64::NAN, 2.0],
            count_logpred: vec![f64::NAN, -1.0, -2.0],
        };
        let mut b = PredictiveCells {
            mu_pred: vec![f64::NAN, 1.0, 3.0],
            count_logpred: vec![-3.0, -4.0, f64::NAN],
        };
        mask_common_cells(&mut a, &mut b);
        assert!(a.mu_pred[0].is_nan() && b.mu_pred[0].is_nan());
        assert!(a.mu_pred[1].is_nan() && b.mu_pred[1].is_nan());
        assert_eq!((a.mu_pred[2], b.mu_pred[2]), (2.0, 3.0));
        assert!(a.count_logpred[0].is_nan() && b.count_logpred[0].is_nan());
        assert_eq!((a.count_logpred[1], b.count_logpred[1]), (-1.0, -4.0));
        assert!(a.count_logpred[2].is_nan() && b.count_logpred[2].is_nan());
    }

    #[test]
    fn forward_simulation_respects_support() {
        let edges = ConnectomeDataset::edge_list(4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truth = TruthSpec::sample(4, 0.4, &mut rng);
        let mut data = generate_dataset(&truth, 6, &CovariateLaw::default(), &mut rng);
        assert_eq!(data.edges, edges);
        let cfg = BasisConfig::cubic(4).unwrap();
        let mut state = ModelState::neutral(&data, 4);
        state.sigma2 = 0.3;
        simulate_observations(&mut state, &mut data, &cfg, &mut rng).unwrap();
        data.validate().unwrap();
        for i in 0..6 {
            for e in 0..edges.len() {
                if data.counts[i][e] >= 1 {
                    assert!(state.xi_zero[i][e]);
                    assert!(data.lengths[i][e].is_some());
                } else {
                    assert!(data.lengths[i][e].is_none());
                }
            }
        }
    }

    #[test]
    fn study_smoke_run_is_deterministic() {
        let config = StudyConfig {
            num_regions: 6,
            sample_sizes: vec![20],
            replications: 2,
            seed: 42,
            num_basis: 5,
            estimation: true,
            prediction: true,
            sampler: SamplerOptions {
                burn_in: 20,
                samples: 20,
                random_effects: false,
                ..SamplerOptions::default()
            },
            ..StudyConfig::default()
        };
        let r1 = run_study(&config).unwrap();
        let r2 = run_study(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        // 15 families for each of the two methods
        assert_eq!(r1.accuracy.len(), 30);
        assert!(r1.accuracy.iter().all(|r| r.sample_size == 20));
        assert!(r1
            .accuracy
            .iter()
            .filter(|r| r.method == "bayes")
            .all(|r| r.n_entries == 36 && r.mse.is_finite()));
        // two replications, two methods
        assert_eq!(r1.prediction.len(), 4);
        let csv = r1.accuracy_csv();
        assert!(csv.starts_with("sample_size,family,method"));
        assert!(csv.contains("chi_mci"));
        let md = r1.accuracy_markdown();
        assert!(md.contains("| mu0 |"));
        let md = r1.prediction_markdown();
        assert!(md.contains("| 20 | bayes |"));
    }

    #[test]
    fn ancova_only_study_has_no_bayes_rows() {
        let config = StudyConfig {
            num_regions: 5,
            sample_sizes: vec![30],
            replications: 2,
            seed: 3,
            methods: vec![Method::Ancova],
            num_basis: 4,
            ..StudyConfig::default()
        };
        let report = run_study(&config).unwrap();
        assert_eq!(report.accuracy.len(), 15);
        assert!(report.accuracy.iter().all(|r| r.method == "ancova"));
    }
}
