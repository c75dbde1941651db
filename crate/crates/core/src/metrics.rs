//! Feature-change statistics, Fisher discriminant ratio, calibration errors
//! and temperature scaling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::checks::CheckReport;
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax};
use crate::model::ModelState;

pub const DEFAULT_BINS: usize = 15;
pub const PROB_SUM_TOL: f64 = 1e-9;

pub const TS_LEARNING_RATE: f64 = 1e-3;
pub const TS_MAX_STEPS: usize = 100_000;
pub const TS_PATIENCE: usize = 10;
/// Lower projection bound keeping the temperature positive.
pub const TS_MIN_TEMPERATURE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureChangeStats {
    pub mean_cosine_similarity: f64,
    pub mean_diff_norm: f64,
    pub fdr: f64,
    /// Rows left out of the cosine mean because one side had zero norm.
    pub excluded_rows: usize,
    pub fdr_infinite: bool,
}

pub fn feature_change_stats(before: &DMatrix<f64>, after: &DMatrix<f64>, labels: &[usize]) -> Result<FeatureChangeStats> {
    if before.shape() != after.shape() {
        return Err(Error::Dimension { what: "feature rows", expected: before.nrows(), got: after.nrows() });
    }
    if labels.len() != before.nrows() {
        return Err(Error::Dimension { what: "labels", expected: before.nrows(), got: labels.len() });
    }
    let n = before.nrows();
    let mut cos_sum = 0.0;
    let mut used = 0;
    let mut diff_sum = 0.0;
    for i in 0..n {
        let (a, b) = (before.row(i), after.row(i));
        diff_sum += (b - a).norm();
        let (na, nb) = (a.norm(), b.norm());
        if na > 0.0 && nb > 0.0 {
            cos_sum += a.dot(&b) / (na * nb);
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every feature row has zero norm".into()));
    }
    let fdr = fdr(after, labels)?;
    Ok(FeatureChangeStats {
        mean_cosine_similarity: cos_sum / used as f64,
        mean_diff_norm: diff_sum / n as f64,
        fdr,
        excluded_rows: n - used,
        fdr_infinite: fdr.is_infinite(),
    })
}

/// `trace(S_B) / trace(S_W)`, with `S_B` weighted by class counts. Returns
/// infinity when the within-class scatter vanishes.
pub fn fdr(features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != features.nrows() {
        return Err(Error::Dimension { what: "labels", expected: features.nrows(), got: labels.len() });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let h = features.ncols();
    let mut counts = vec![0usize; classes];
    let mut sums = vec![DVector::<f64>::zeros(h); classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        sums[y] += features.row(i).transpose();
    }
    let present: Vec<usize> = (0..classes).filter(|&k| counts[k] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Precondition("FDR needs at least 2 classes".into()));
    }
    if let Some(&k) = present.iter().find(|&&k| counts[k] < 2) {
        return Err(Error::Precondition(format!("class {k} has fewer than 2 samples")));
    }
    let n = labels.len() as f64;
    let global = sums.iter().fold(DVector::zeros(h), |a, s| a + s) / n;
    let means: Vec<DVector<f64>> = (0..classes)
        .map(|k| if counts[k] > 0 { &sums[k] / counts[k] as f64 } else { DVector::zeros(h) })
        .collect();
    let between: f64 = present.iter().map(|&k| counts[k] as f64 * (&means[k] - &global).norm_squared()).sum();
    let within: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (features.row(i).transpose() - &means[y]).norm_squared())
        .sum();
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(between / within)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub confidence_mean: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub temperature: Option<f64>,
    pub n_bins: usize,
    pub bins: Vec<CalibrationBin>,
}

/// Equal-width confidence bins on `(0, 1]`. A confidence on a boundary falls
/// in the upper bin, and 1.0 falls in the last bin.
pub fn ece_mce(probabilities: &DMatrix<f64>, labels: &[usize], n_bins: usize) -> Result<CalibrationReport> {
    let (n, c) = probabilities.shape();
    if n_bins == 0 {
        return Err(Error::Parameter("n_bins must be >= 1".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("no samples".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension { what: "labels", expected: n, got: labels.len() });
    }
    let mut bins: Vec<(f64, usize, usize)> = vec![(0.0, 0, 0); n_bins];
    let mut nll = 0.0;
    let mut correct_total = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = probabilities.row(i).transpose();
        if y >= c {
            return Err(Error::Parameter(format!("label {y} out of range for {c} classes")));
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.sum() - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Parameter(format!("row {i} is not a probability vector")));
        }
        let pred = argmax(&row);
        let conf = row[pred];
        let b = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        bins[b].0 += conf;
        bins[b].1 += 1;
        if pred == y {
            bins[b].2 += 1;
            correct_total += 1;
        }
        nll -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    let out: Vec<CalibrationBin> = bins
        .iter()
        .enumerate()
        .map(|(b, &(conf_sum, count, correct))| {
            let (confidence_mean, accuracy) = if count > 0 {
                (conf_sum / count as f64, correct as f64 / count as f64)
            } else {
                (0.0, 0.0)
            };
            if count > 0 {
                let gap = (accuracy - confidence_mean).abs();
                ece += count as f64 / n as f64 * gap;
                mce = mce.max(gap);
            }
            CalibrationBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                confidence_mean,
                accuracy,
                count,
            }
        })
        .collect();
    Ok(CalibrationReport {
        ece,
        mce,
        nll: nll / n as f64,
        accuracy: correct_total as f64 / n as f64,
        temperature: None,
        n_bins,
        bins: out,
    })
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be finite and > 0, got {t}")));
    }
    Ok(())
}

/// Row-wise `softmax(logits / T)`.
pub fn apply_temperature(logits: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_temperature(t)?;
    let mut out = DMatrix::zeros(logits.nrows(), logits.ncols());
    for i in 0..logits.nrows() {
        let p = softmax(&(logits.row(i).transpose() / t));
        out.set_row(i, &p.transpose());
    }
    Ok(out)
}

/// Mean NLL of `softmax(logits / T)` and its derivative in `T`.
pub fn temperature_nll(logits: &DMatrix<f64>, labels: &[usize], t: f64) -> (f64, f64) {
    let n = labels.len() as f64;
    let c = logits.ncols();
    let mut nll = 0.0;
    let mut grad = 0.0;
    let mut row = vec![0.0; c];
    for (i, &y) in labels.iter().enumerate() {
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = logits[(i, k)];
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut norm = 0.0;
        let mut weighted = 0.0;
        for &z in &row {
            let e = ((z - max) / t).exp();
            norm += e;
            weighted += e * z;
        }
        nll += (max - row[y]) / t + norm.ln();
        grad += (row[y] - weighted / norm) / (t * t);
    }
    (nll / n, grad / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_initial: f64,
    pub nll_final: f64,
    pub steps: usize,
}

/// Adam on `T` from `T = 1` (learning rate 1e-3, at most 1e5 steps), stopped
/// after 10 steps without NLL improvement. Returns the best `T` seen.
pub fn fit_temperature(logits: &DMatrix<f64>, labels: &[usize]) -> Result<TemperatureFit> {
    if logits.nrows() == 0 {
        return Err(Error::Parameter("temperature fitting needs at least one sample".into()));
    }
    if labels.len() != logits.nrows() {
        return Err(Error::Dimension { what: "labels", expected: logits.nrows(), got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.ncols()) {
        return Err(Error::Parameter(format!("label {bad} out of range")));
    }
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut t: f64 = 1.0;
    let (nll0, mut grad) = temperature_nll(logits, labels, t);
    if !nll0.is_finite() {
        return Err(Error::Degenerate("non-finite NLL at T = 1".into()));
    }
    let (mut best_t, mut best_nll) = (t, nll0);
    let (mut m, mut v) = (0.0, 0.0);
    let mut stale = 0;
    let mut steps = 0;
    for step in 1..=TS_MAX_STEPS {
        steps = step;
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad * grad;
        let m_hat = m / (1.0 - beta1.powi(step as i32));
        let v_hat = v / (1.0 - beta2.powi(step as i32));
        t = (t - TS_LEARNING_RATE * m_hat / (v_hat.sqrt() + eps)).max(TS_MIN_TEMPERATURE);
        let (nll, g) = temperature_nll(logits, labels, t);
        if !nll.is_finite() {
            return Err(Error::Degenerate(format!("non-finite NLL at T = {t}")));
        }
        grad = g;
        if nll < best_nll {
            best_nll = nll;
            best_t = t;
            stale = 0;
        } else {
            stale += 1;
            if stale >= TS_PATIENCE {
                break;
            }
        }
    }
    Ok(TemperatureFit { temperature: best_t, nll_initial: nll0, nll_final: best_nll, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScalingSummary {
    pub temperature: f64,
    pub without: CalibrationReport,
    pub with: CalibrationReport,
    pub ece_improvement: f64,
    pub mce_improvement: f64,
}

/// Fits `T` on validation logits and reports test calibration before and after.
pub fn temperature_scaling_summary(
    val_logits: &DMatrix<f64>,
    val_labels: &[usize],
    test_logits: &DMatrix<f64>,
    test_labels: &[usize],
    n_bins: usize,
) -> Result<TemperatureScalingSummary> {
    let fit = fit_temperature(val_logits, val_labels)?;
    let mut without = ece_mce(&apply_temperature(test_logits, 1.0)?, test_labels, n_bins)?;
    without.temperature = Some(1.0);
    let mut with = ece_mce(&apply_temperature(test_logits, fit.temperature)?, test_labels, n_bins)?;
    with.temperature = Some(fit.temperature);
    Ok(TemperatureScalingSummary {
        temperature: fit.temperature,
        ece_improvement: without.ece - with.ece,
        mce_improvement: without.mce - with.mce,
        without,
        with,
    })
}

/// `softmax(f(x) / T)` against the forward pass of the model with head
/// `(V / T, b / T)`, plus argmax agreement with the unscaled logits.
pub fn head_scaling_equivalence(model: &ModelState, t: f64, inputs: &DMatrix<f64>) -> Result<CheckReport> {
    check_temperature(t)?;
    let logits = model.logit_matrix(inputs)?;
    let tempered = apply_temperature(&logits, t)?;
    let scaled = model.with_scaled_head(1.0 / t);
    let scaled_probs = apply_temperature(&scaled.logit_matrix(inputs)?, 1.0)?;
    let dev = crate::linalg::max_abs(&(&tempered - &scaled_probs));
    let argmax_same = (0..logits.nrows()).all(|i| {
        let a = argmax(&logits.row(i).transpose());
        a == argmax(&tempered.row(i).transpose()) && a == argmax(&scaled_probs.row(i).transpose())
    });
    let mut r = CheckReport::new("head_scaling_equivalence");
    r.measure("temperature", t);
    r.measure("max_abs_deviation", dev);
    r.measure("argmax_identical", if argmax_same { 1.0 } else { 0.0 });
    r.tolerance("max_abs_deviation", 1e-12);
    r.pass = dev <= 1e-12 && argmax_same;
    Ok(r)
}
