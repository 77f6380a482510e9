//! Bias measures against ground truth.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::frf::FrfEstimate;
use crate::graybox::{normalize_weights, LineWeights};
use crate::{Error, Result};

/// Weighted amplitude bias of one method over a set of configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub method_tag: String,
    pub per_configuration: Vec<f64>,
    pub mean: f64,
    pub lines_used: usize,
    pub lines_excluded: usize,
}

/// `(1/N_f) sum_l ||W^T (|G| - |G_hat|)||_2` for one configuration, with
/// each line's `W` scaled to unit 2-norm. Lines invalid in either input are
/// excluded. Returns the bias and the number of lines used.
pub fn line_amplitude_bias(truth: &FrfEstimate, estimate: &FrfEstimate, weights: &LineWeights) -> Result<(f64, usize)> {
    if !truth.same_grid(estimate) {
        return Err(Error::Dimension(format!(
            "frequency grids of '{}' and '{}' differ",
            truth.method_tag, estimate.method_tag
        )));
    }
    if truth.n_y() != estimate.n_y() || truth.n_u() != estimate.n_u() {
        return Err(Error::Dimension("truth and estimate dimensions differ".into()));
    }
    let nq = truth.n_y() * truth.n_u();
    if weights.len() != truth.n_lines() || weights.iter().any(|w| w.len() != nq) {
        return Err(Error::Dimension("weights do not match the lines".into()));
    }
    let w = normalize_weights(weights);
    let mut sum = 0.0;
    let mut used = 0;
    for (l, (t, e)) in truth.lines.iter().zip(&estimate.lines).enumerate() {
        if !(t.is_valid() && e.is_valid()) {
            continue;
        }
        let norm2: f64 = (0..nq)
            .map(|k| (w[l][k] * (t.g[k].norm() - e.g[k].norm())).powi(2))
            .sum();
        sum += norm2.sqrt();
        used += 1;
    }
    if used == 0 {
        return Ok((f64::NAN, 0));
    }
    Ok((sum / used as f64, used))
}

/// Averages [`line_amplitude_bias`] over configurations.
pub fn frf_amplitude_bias(truths: &[FrfEstimate], estimates: &[FrfEstimate], weights: &[LineWeights]) -> Result<BiasReport> {
    if truths.is_empty() || truths.len() != estimates.len() || truths.len() != weights.len() {
        return Err(Error::Dimension("need one truth, estimate and weight set per configuration".into()));
    }
    let mut per_configuration = Vec::with_capacity(truths.len());
    let mut lines_used = 0;
    let mut lines_excluded = 0;
    for ((t, e), w) in truths.iter().zip(estimates).zip(weights) {
        let (b, used) = line_amplitude_bias(t, e, w)?;
        per_configuration.push(b);
        lines_used += used;
        lines_excluded += t.n_lines() - used;
    }
    if lines_excluded > 0 {
        warn!("{lines_excluded} invalid lines excluded from the amplitude bias");
    }
    let mean = per_configuration.iter().sum::<f64>() / per_configuration.len() as f64;
    Ok(BiasReport {
        method_tag: estimates[0].method_tag.clone(),
        per_configuration,
        mean,
        lines_used,
        lines_excluded,
    })
}

/// Mean relative parameter deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBias {
    /// Mean of the defined per-parameter values.
    pub mean: f64,
    /// `|theta0 - theta_hat| / theta0`; `None` where `theta0` is zero.
    pub per_parameter: Vec<Option<f64>>,
}

pub fn parameter_bias(theta0: &[f64], theta_hat: &[f64]) -> Result<ParameterBias> {
    if theta0.len() != theta_hat.len() || theta0.is_empty() {
        return Err(Error::Dimension(format!(
            "parameter vectors have lengths {} and {}",
            theta0.len(),
            theta_hat.len()
        )));
    }
    let per_parameter: Vec<Option<f64>> = theta0
        .iter()
        .zip(theta_hat)
        .map(|(&t0, &t)| (t0 != 0.0).then(|| (t0 - t).abs() / t0.abs()))
        .collect();
    let defined: Vec<f64> = per_parameter.iter().flatten().copied().collect();
    if defined.len() < per_parameter.len() {
        warn!("{} zero reference parameters excluded from the mean bias", per_parameter.len() - defined.len());
    }
    let mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(ParameterBias { mean, per_parameter })
}
