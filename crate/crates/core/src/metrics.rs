//! Estimation-accuracy and prediction metrics with missingness-aware
//! aggregation. Matrix estimates use NaN for missing entries; an entry
//! enters the aggregate only where at least two replications observed it.

use crate::data::ConnectomeDataset;
use crate::stats::{ln_factorial, log_normal_cdf, zero_count_terms};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("matrix dimension mismatch: {0}")]
    Dimension(String),
    #[error("no entry has two or more present replications")]
    NoEntries,
    #[error("held-out set is empty")]
    EmptyHeldOut,
}

/// Entrywise bias^2 / variance / MSE summary for one effect family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub bias2: f64,
    pub variance: f64,
    pub mse: f64,
    pub n_entries: usize,
}

/// Accuracy of replicated matrix estimates against a fixed truth.
///
/// Per entry: bias = mean(estimates) - truth over present replications,
/// sample variance with n-1 denominator, MSE = bias^2 + variance; the cell
/// averages these over entries with >= 2 present replications.
pub fn accuracy(estimates: &[Vec<f64>], truth: &[f64]) -> Result<AccuracyCell, MetricsError> {
    if estimates.iter().any(|m| m.len() != truth.len()) {
        return Err(MetricsError::Dimension(format!(
            "truth has {} entries",
            truth.len()
        )));
    }
    let mut bias2_sum = 0.0;
    let mut var_sum = 0.0;
    let mut n_entries = 0usize;
    for (idx, &t) in truth.iter().enumerate() {
        let present: Vec<f64> = estimates
            .iter()
            .map(|m| m[idx])
            .filter(|v| v.is_finite())
            .collect();
        if present.len() < 2 {
            continue;
        }
        let r = present.len() as f64;
        let mean = present.iter().sum::<f64>() / r;
        let bias = mean - t;
        let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        bias2_sum += bias * bias;
        var_sum += var;
        n_entries += 1;
    }
    if n_entries == 0 {
        return Err(MetricsError::NoEntries);
    }
    let bias2 = bias2_sum / n_entries as f64;
    let variance = var_sum / n_entries as f64;
    Ok(AccuracyCell {
        bias2,
        variance,
        mse: bias2 + variance,
        n_entries,
    })
}

/// CSV row of the study's accuracy table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub sample_size: usize,
    pub family: String,
    pub method: String,
    pub bias2: f64,
    pub variance: f64,
    pub mse: f64,
    pub n_entries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionMetrics {
    /// Mean squared error of predicted vs observed log length over held-out
    /// cells with an observed length.
    pub length_mse: f64,
    pub n_length_cells: usize,
    /// Mean over held-out subjects of their total count log-likelihood.
    pub count_mean_loglik: f64,
    pub n_subjects: usize,
}

/// Zero-inflated count log-likelihood of one cell under plug-in (pi, lambda).
pub fn zip_cell_loglik(pi: f64, lam: f64, count: u64) -> f64 {
    if count >= 1 {
        log_normal_cdf(pi) + count as f64 * lam - lam.exp() - ln_factorial(count)
    } else {
        zero_count_terms(pi, lam).log_mix
    }
}

/// Plain Poisson cell log-likelihood (the baseline's count model).
pub fn poisson_cell_loglik(lam: f64, count: u64) -> f64 {
    count as f64 * lam - lam.exp() - ln_factorial(count)
}

/// Assemble held-out prediction metrics from per-cell predictions.
///
/// `mu_pred[idx]` is the predicted log length (NaN to skip the cell) and
/// `count_logpred[idx]` the log predictive probability of the observed count
/// (NaN to skip), both indexed `subject * num_edges + edge` over `heldout`.
pub fn prediction_metrics(
    heldout: &ConnectomeDataset,
    mu_pred: &[f64],
    count_logpred: &[f64],
) -> Result<PredictionMetrics, MetricsError> {
    let n = heldout.num_subjects();
    let ne = heldout.num_edges();
    if mu_pred.len() != n * ne || count_logpred.len() != n * ne {
        return Err(MetricsError::Dimension("prediction arrays".into()));
    }
    if n == 0 {
        return Err(MetricsError::EmptyHeldOut);
    }
    let mut sse = 0.0;
    let mut n_len = 0usize;
    let mut loglik_total = 0.0;
    for i in 0..n {
        for e in 0..ne {
            let idx = i * ne + e;
            if let Some(l) = heldout.lengths[i][e] {
                if mu_pred[idx].is_finite() {
                    let r = l.ln() - mu_pred[idx];
                    sse += r * r;
                    n_len += 1;
                }
            }
            if count_logpred[idx].is_finite() {
                loglik_total += count_logpred[idx];
            }
        }
    }
    if n_len == 0 {
        return Err(MetricsError::EmptyHeldOut);
    }
    Ok(PredictionMetrics {
        length_mse: sse / n_len as f64,
        n_length_cells: n_len,
        count_mean_loglik: loglik_total / n as f64,
        n_subjects: n,
    })
}
