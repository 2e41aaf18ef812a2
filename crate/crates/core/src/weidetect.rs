//! Validation-score filtering of client models.
//!
//! Every client model is scored by its macro-F1 on the server's auxiliary
//! dataset. A two-parameter Weibull distribution (with a fixed location) is
//! fitted to the scores by maximum likelihood, each score is mapped through
//! the fitted CDF, and the `top_t` clients with the highest CDF values are
//! averaged into the next global model.

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::fedavg;
use crate::data::AuxiliaryDataset;
use crate::metrics::ConfusionMatrix;
use crate::nn::{predict, ParamVector};
use crate::{Error, Result};

/// Scores at or below the location are clamped to `floc + SCORE_FLOOR`.
pub const SCORE_FLOOR: f64 = 1e-6;
const SHAPE_MIN: f64 = 1e-3;
const SHAPE_MAX: f64 = 1e3;
const SHAPE_TOL: f64 = 1e-10;
const MIN_DISPERSION: f64 = 1e-9;
const MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub client_id: usize,
    pub params: ParamVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientScore {
    pub client_id: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationScores {
    pub entries: Vec<ClientScore>,
}

impl ValidationScores {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(client_id, f1)| ClientScore { client_id, f1 })
                .collect(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.f1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeibullFit {
    /// Shape; NaN when the fit did not converge.
    pub shape: f64,
    /// Scale; NaN when the fit did not converge.
    pub scale: f64,
    pub floc: f64,
    pub converged: bool,
    /// CDF of each input score, in input order (empty when not converged).
    pub cdf_values: Vec<f64>,
}

impl WeibullFit {
    fn degenerate(floc: f64) -> Self {
        Self {
            shape: f64::NAN,
            scale: f64::NAN,
            floc,
            converged: false,
            cdf_values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Admitted clients, best first.
    pub benign_ids: Vec<usize>,
    /// Remaining clients, best first.
    pub rejected_ids: Vec<usize>,
    pub top_t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseOutcome {
    pub scores: ValidationScores,
    pub fit: WeibullFit,
    pub selection: SelectionResult,
}

/// Default number of admitted models: keep the two-thirds honest majority.
pub fn default_top_t(n: usize) -> usize {
    n - n / 3
}

fn macro_f1_on(params: &ParamVector, aux: &AuxiliaryDataset) -> Result<f64> {
    let predicted = predict(params, &aux.data.batch())?;
    let cm = ConfusionMatrix::from_predictions(aux.data.labels(), &predicted, aux.data.class_count());
    Ok(cm.macro_f1())
}

/// Macro-F1 of every model on the auxiliary dataset.
pub fn validate_models(models: &[ClientModel], aux: &AuxiliaryDataset) -> Result<ValidationScores> {
    if aux.is_empty() {
        return Err(Error::EmptyAuxiliary);
    }
    let f1s: Vec<f64> = models
        .par_iter()
        .map(|m| macro_f1_on(&m.params, aux))
        .collect::<Result<_>>()?;
    Ok(ValidationScores::from_pairs(
        models.iter().map(|m| m.client_id).zip(f1s),
    ))
}

/// Log-likelihood of shifted samples `xs` (already minus the location).
pub fn weibull_log_likelihood(xs: &[f64], shape: f64, scale: f64) -> f64 {
    let n = xs.len() as f64;
    let sum_ln: f64 = xs.iter().map(|x| x.ln()).sum();
    let sum_pow: f64 = xs.iter().map(|x| (x / scale).powf(shape)).sum();
    n * shape.ln() - n * shape * scale.ln() + (shape - 1.0) * sum_ln - sum_pow
}

/// Derivative of [`weibull_log_likelihood`] with respect to the shape.
pub fn weibull_shape_score(xs: &[f64], shape: f64, scale: f64) -> f64 {
    let n = xs.len() as f64;
    xs.iter()
        .map(|x| {
            let l = (x / scale).ln();
            l - (x / scale).powf(shape) * l
        })
        .sum::<f64>()
        + n / shape
}

pub fn shifted_scores(scores: &[f64], floc: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| if s - floc > 0.0 { s - floc } else { SCORE_FLOOR })
        .collect()
}

/// Profile-likelihood equation for the shape on normalised data
/// `t = x / max(x)`: `g(b) = sum(t^b ln t) / sum(t^b) - 1/b - mean(ln t)`,
/// with its derivative. `g` is increasing in `b`.
fn profile_equation(ln_t: &[f64], mean_ln: f64, b: f64) -> (f64, f64) {
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for &l in ln_t {
        let w = (b * l).exp();
        s0 += w;
        s1 += w * l;
        s2 += w * l * l;
    }
    let g = s1 / s0 - 1.0 / b - mean_ln;
    let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (b * b);
    (g, dg)
}

/// Maximum-likelihood Weibull fit with a fixed location.
///
/// The shape solves the profile equation by Newton steps safeguarded with
/// bisection on `[1e-3, 1e3]`; the scale follows in closed form as
/// `(mean(x^shape))^(1/shape)`. Scores whose spread is below `1e-9`, or
/// whose root lies outside the bracket, yield `converged = false`.
pub fn fit_weibull(scores: &[f64], floc: f64) -> Result<WeibullFit> {
    if scores.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "weibull fit needs at least 3 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) || !floc.is_finite() {
        return Err(Error::NonFinite("weibull fit input"));
    }
    let xs = shifted_scores(scores, floc);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    if x_max - x_min < MIN_DISPERSION {
        return Ok(WeibullFit::degenerate(floc));
    }

    let ln_t: Vec<f64> = xs.iter().map(|x| (x / x_max).ln()).collect();
    let mean_ln = ln_t.iter().sum::<f64>() / ln_t.len() as f64;

    let (mut lo, mut hi) = (SHAPE_MIN, SHAPE_MAX);
    let (g_lo, _) = profile_equation(&ln_t, mean_ln, lo);
    let (g_hi, _) = profile_equation(&ln_t, mean_ln, hi);
    if !(g_lo < 0.0 && g_hi > 0.0) {
        return Ok(WeibullFit::degenerate(floc));
    }

    let mut b = 1.0;
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let (g, dg) = profile_equation(&ln_t, mean_ln, b);
        if g == 0.0 {
            converged = true;
            break;
        }
        if g < 0.0 {
            lo = b;
        } else {
            hi = b;
        }
        let newton = b - g / dg;
        let next = if dg > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            (lo * hi).sqrt()
        };
        let step = (next - b).abs();
        b = next;
        if step <= SHAPE_TOL * b.max(1.0) || hi - lo <= SHAPE_TOL * b.max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Ok(WeibullFit::degenerate(floc));
    }

    let mean_pow = ln_t.iter().map(|l| (b * l).exp()).sum::<f64>() / ln_t.len() as f64;
    let scale = x_max * mean_pow.powf(1.0 / b);
    if !(scale.is_finite() && scale > 0.0) {
        return Ok(WeibullFit::degenerate(floc));
    }
    let mut fit = WeibullFit {
        shape: b,
        scale,
        floc,
        converged: true,
        cdf_values: Vec::new(),
    };
    fit.cdf_values = xs.iter().map(|&x| cdf_shifted(x, &fit)).collect();
    Ok(fit)
}

fn cdf_shifted(x: f64, fit: &WeibullFit) -> f64 {
    -(-(x / fit.scale).powf(fit.shape)).exp_m1()
}

/// `F(x) = 1 - exp(-((x - floc) / scale)^shape)` for `x >= floc`.
pub fn weibull_cdf(x: f64, fit: &WeibullFit) -> Result<f64> {
    if !fit.converged {
        return Err(Error::FitNotConverged);
    }
    if x.is_nan() || x < fit.floc {
        return Err(Error::InvalidParameter(format!(
            "cdf argument {x} is below the location {}",
            fit.floc
        )));
    }
    Ok(cdf_shifted(x - fit.floc, fit))
}

/// Fits the scores and keeps the `top_t` clients with the highest CDF
/// values. Ties fall back to the higher raw score, then the lower client id.
/// Without a converged fit the ranking uses raw scores directly.
pub fn select_by_weibull(
    scores: &ValidationScores,
    top_t: usize,
    floc: f64,
) -> Result<(WeibullFit, SelectionResult)> {
    if top_t == 0 {
        return Err(Error::InvalidParameter("top_t must be >= 1".into()));
    }
    let raw = scores.values();
    let fit = if raw.len() >= 3 {
        fit_weibull(&raw, floc)?
    } else {
        WeibullFit::degenerate(floc)
    };

    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let by_cdf = if fit.converged {
            fit.cdf_values[b].total_cmp(&fit.cdf_values[a])
        } else {
            std::cmp::Ordering::Equal
        };
        by_cdf
            .then(raw[b].total_cmp(&raw[a]))
            .then(scores.entries[a].client_id.cmp(&scores.entries[b].client_id))
    });
    let keep = top_t.min(order.len());
    let ids: Vec<usize> = order.iter().map(|&i| scores.entries[i].client_id).collect();
    let selection = SelectionResult {
        benign_ids: ids[..keep].to_vec(),
        rejected_ids: ids[keep..].to_vec(),
        top_t: keep,
    };
    Ok((fit, selection))
}

/// Validation phase followed by Weibull-ranked selection.
pub fn weibull_filter(
    models: &[ClientModel],
    aux: &AuxiliaryDataset,
    top_t: usize,
    floc: f64,
) -> Result<DefenseOutcome> {
    let scores = validate_models(models, aux)?;
    let (fit, selection) = select_by_weibull(&scores, top_t, floc)?;
    Ok(DefenseOutcome {
        scores,
        fit,
        selection,
    })
}

/// FedAvg over the admitted models, in the order they appear in `models`.
pub fn aggregate_selected(models: &[ClientModel], selection: &SelectionResult) -> Result<ParamVector> {
    let picked: Vec<ParamVector> = models
        .iter()
        .filter(|m| selection.benign_ids.contains(&m.client_id))
        .map(|m| m.params.clone())
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptySelection);
    }
    fedavg(&picked)
}
