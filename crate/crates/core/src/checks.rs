//! Executable verifications of the kernel decomposition, the orthogonal
//! invariance of linear features, LoRA/FT kernel equivalence, the JL
//! concentration bound, the classifier-norm derivatives, norm growth and the
//! order of the one-step linearization.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{perceptron_separable, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, max_abs, rng_for, softmax};
use crate::model::{attach_lora, FeatureExtractor, ModelState};
use crate::ntk::{compute_decomposition, empirical_ntk, KernelDecomposition};
use crate::train::{gd_step, linearized_one_epoch, linearized_with_residuals, residuals, train, Mode, TrainConfig, Trainable};

pub const DECOMPOSITION_TOL: f64 = 1e-10;
pub const EXACT_TOL: f64 = 1e-14;
pub const PROBE_DRIFT_REL_TOL: f64 = 1e-12;
pub const CONTROL_DRIFT_MIN: f64 = 1e-3;
pub const DERIVATIVE_REL_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;
pub const SLOPE_RANGE: (f64, f64) = (0.8, 1.2);
pub const WILSON_Z: f64 = 1.96;
pub const SLACK_WIDTHS: f64 = 3.0;
pub const MIN_TRIALS: usize = 100;
pub const PERCEPTRON_BUDGET: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub measured: BTreeMap<String, f64>,
    pub tolerances: BTreeMap<String, f64>,
    pub trials: Option<usize>,
    pub violation_rate: Option<f64>,
    pub seed: Option<u64>,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub(crate) fn new(name: &str) -> Self {
        CheckReport {
            name: name.to_string(),
            pass: false,
            measured: BTreeMap::new(),
            tolerances: BTreeMap::new(),
            trials: None,
            violation_rate: None,
            seed: None,
            notes: Vec::new(),
        }
    }

    pub(crate) fn measure(&mut self, key: &str, value: f64) {
        self.measured.insert(key.to_string(), value);
    }

    pub(crate) fn tolerance(&mut self, key: &str, value: f64) {
        self.tolerances.insert(key.to_string(), value);
    }

    /// Merges per-fixture reports into one that passes iff every part passes.
    /// Keys are prefixed with the part label; notes likewise.
    pub fn combine(name: &str, parts: &[(String, CheckReport)]) -> Self {
        let mut out = CheckReport::new(name);
        out.pass = !parts.is_empty() && parts.iter().all(|(_, r)| r.pass);
        for (label, r) in parts {
            out.measure(&format!("{label}.pass"), if r.pass { 1.0 } else { 0.0 });
            for (k, v) in &r.measured {
                out.measure(&format!("{label}.{k}"), *v);
            }
            for (k, v) in &r.tolerances {
                out.tolerance(&format!("{label}.{k}"), *v);
            }
            if let Some(rate) = r.violation_rate {
                out.measure(&format!("{label}.violation_rate"), rate);
            }
            if let Some(t) = r.trials {
                out.measure(&format!("{label}.trials"), t as f64);
            }
            out.notes.extend(r.notes.iter().map(|n| format!("{label}: {n}")));
        }
        out.seed = parts.first().and_then(|(_, r)| r.seed);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line: `PASS name` or `FAIL name`, followed by the measured values.
    pub fn summary(&self) -> String {
        let vals: Vec<String> = self.measured.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
        format!("{} {} {}", if self.pass { "PASS" } else { "FAIL" }, self.name, vals.join(" "))
    }
}

/// Half-width of the Wilson score interval for a rate `p` over `n` trials.
pub fn wilson_half_width(p: f64, n: usize, z: f64) -> f64 {
    let n = n as f64;
    let z2 = z * z;
    z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()
}

/// `4 exp(-(eps^2 - eps^3) k / 4)`
pub fn jl_bound(epsilon: f64, k: usize) -> f64 {
    4.0 * (-(epsilon.powi(2) - epsilon.powi(3)) * k as f64 / 4.0).exp()
}

fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Parameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    Ok(())
}

pub fn check_decomposition(model: &ModelState, samples: &DMatrix<f64>, tol: f64) -> Result<CheckReport> {
    let decomp = compute_decomposition(model, samples)?;
    check_given_decomposition(&decomp, model, samples, tol)
}

/// Compares a supplied decomposition against brute-force `J J^T`.
pub fn check_given_decomposition(
    decomp: &KernelDecomposition,
    model: &ModelState,
    samples: &DMatrix<f64>,
    tol: f64,
) -> Result<CheckReport> {
    let jjt = empirical_ntk(model, samples)?;
    if jjt.shape() != decomp.pre_train.shape() {
        return Err(Error::Dimension { what: "kernel rows", expected: jjt.nrows(), got: decomp.pre_train.nrows() });
    }
    let err = max_abs(&(decomp.ntk() - &jjt));
    let mut r = CheckReport::new("decomposition");
    r.measure("max_abs_error", err);
    r.measure("ntk_max_abs", max_abs(&jjt));
    r.tolerance("max_abs_error", tol);
    r.pass = err <= tol;
    r.notes.push(format!("architecture {}", model.arch_name()));
    Ok(r)
}

/// Drift of linear features at orthogonal-complement probes under full-batch FT.
pub fn check_orthogonal_invariance(
    model: &ModelState,
    dataset: &Dataset,
    probes: &DMatrix<f64>,
    steps: usize,
    eta: f64,
) -> Result<CheckReport> {
    if !matches!(model.feature, FeatureExtractor::Linear { .. }) {
        return Err(Error::Unsupported("orthogonal invariance needs the linear feature extractor".into()));
    }
    let pred = linearized_one_epoch(model, dataset, eta, probes)?;
    let predicted = max_abs(&pred.feature_delta);

    let mut trained = model.clone();
    for step in 0..steps {
        trained = gd_step(&trained, dataset, eta, Trainable::ALL).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step: step + 1, reason },
            other => other,
        })?;
    }
    let drift_ratio = |x: DVector<f64>| -> f64 {
        let d = (trained.features_unchecked(&x) - model.features_unchecked(&x)).norm();
        d / x.norm().max(f64::MIN_POSITIVE)
    };
    let probe_drift = (0..probes.nrows())
        .map(|m| drift_ratio(probes.row(m).transpose()))
        .fold(0.0, f64::max);
    let control = dataset.sample(0);
    let control_drift = (trained.features_unchecked(&control) - model.features_unchecked(&control)).norm();

    let mut r = CheckReport::new("orthogonal_invariance");
    r.measure("predicted_feature_delta_max_abs", predicted);
    r.measure("probe_drift_over_norm_max", probe_drift);
    r.measure("control_drift", control_drift);
    r.measure("steps", steps as f64);
    r.tolerance("predicted_feature_delta_max_abs", EXACT_TOL);
    r.tolerance("probe_drift_over_norm_max", PROBE_DRIFT_REL_TOL);
    r.tolerance("control_drift_min", CONTROL_DRIFT_MIN);
    r.pass = predicted <= EXACT_TOL && probe_drift <= PROBE_DRIFT_REL_TOL && control_drift > CONTROL_DRIFT_MIN;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraCheckConfig {
    pub rank: usize,
    pub variance: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    /// Input norm bound; defaults to the dataset's max sample norm.
    pub norm_bound: Option<f64>,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().iter().fold(0.0, |a: f64, &b| a.max(b))
}

/// Exact `P` equality at LoRA init and Monte-Carlo violation rate of
/// `||F_lora - s^2 r F_ft|| <= c s^2 r eps ||V0 V0^T||` over fresh adapters.
pub fn check_lora_equivalence(base: &ModelState, dataset: &Dataset, cfg: &LoraCheckConfig) -> Result<CheckReport> {
    if !matches!(base.feature, FeatureExtractor::Linear { .. }) {
        return Err(Error::Unsupported("LoRA equivalence needs the linear feature extractor".into()));
    }
    if cfg.trials < MIN_TRIALS {
        return Err(Error::Parameter(format!("trials must be >= {MIN_TRIALS}, got {}", cfg.trials)));
    }
    validate_epsilon(cfg.epsilon)?;
    let samples = dataset.samples();
    let ft = compute_decomposition(base, samples)?;
    let c = cfg.norm_bound.unwrap_or_else(|| dataset.input_norm_bound());
    let v = &base.head.weight;
    let vv_norm = spectral_norm(&(v * v.transpose()));
    let scale = cfg.variance * cfg.rank as f64;
    let proof_bound = c * scale * cfg.epsilon * vv_norm;
    let statement_bound = c * cfg.epsilon * vv_norm;
    let n = dataset.len();
    let nc = base.num_classes();

    struct Trial {
        p_err: f64,
        pairs: usize,
        proof_violations: usize,
        statement_violations: usize,
        any_violation: bool,
    }
    let trials: Vec<Trial> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<Trial> {
            let lora = attach_lora(base, cfg.rank, cfg.variance, cfg.seed, 1_000 + t as u64)?;
            let dec = compute_decomposition(&lora, samples)?;
            let p_err = max_abs(&(&dec.pre_train - &ft.pre_train));
            let (mut pv, mut sv, mut pairs) = (0, 0, 0);
            for i in 0..n {
                for j in i..n {
                    let (ri, rj) = (i * nc..(i + 1) * nc, j * nc..(j + 1) * nc);
                    let diff = dec.ft.view((ri.start, rj.start), (nc, nc)) - ft.ft.view((ri.start, rj.start), (nc, nc)) * scale;
                    let norm = spectral_norm(&diff);
                    pairs += 1;
                    if norm > proof_bound {
                        pv += 1;
                    }
                    if norm > statement_bound {
                        sv += 1;
                    }
                }
            }
            Ok(Trial { p_err, pairs, proof_violations: pv, statement_violations: sv, any_violation: pv > 0 })
        })
        .collect::<Result<_>>()?;

    let p_err = trials.iter().map(|t| t.p_err).fold(0.0, f64::max);
    let total_pairs: usize = trials.iter().map(|t| t.pairs).sum();
    let rate = trials.iter().map(|t| t.proof_violations).sum::<usize>() as f64 / total_pairs as f64;
    let statement_rate = trials.iter().map(|t| t.statement_violations).sum::<usize>() as f64 / total_pairs as f64;
    let trial_rate = trials.iter().filter(|t| t.any_violation).count() as f64 / cfg.trials as f64;
    let bound = jl_bound(cfg.epsilon, cfg.rank);
    let slack = SLACK_WIDTHS * wilson_half_width(rate, cfg.trials, WILSON_Z);

    let mut r = CheckReport::new("lora_equivalence");
    r.seed = Some(cfg.seed);
    r.trials = Some(cfg.trials);
    r.violation_rate = Some(rate);
    r.measure("p_max_abs_diff", p_err);
    r.measure("pair_violation_rate", rate);
    r.measure("statement_bound_violation_rate", statement_rate);
    r.measure("trial_any_pair_violation_rate", trial_rate);
    r.measure("norm_bound_c", c);
    r.measure("vvt_spectral_norm", vv_norm);
    r.tolerance("p_max_abs_diff", EXACT_TOL);
    r.tolerance("violation_bound", bound);
    r.tolerance("violation_slack", slack);
    r.pass = p_err <= EXACT_TOL && rate <= bound + slack;
    r.notes.push("violation counted per (trial, sample pair) against c*sigma^2*r*eps*||V0 V0^T||".into());
    r.notes.push("Wilson half-width uses the trial count, since pairs within a trial share one adapter".into());
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlCheckConfig {
    pub k: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub seed: u64,
    /// Deviation scale; defaults to `max(|u|, |v|)`.
    pub norm_bound: Option<f64>,
}

/// Deviations `(Au)^T(Av)/k - u^T v` for Gaussian `A` with unit-variance
/// entries. Rows of `A` enter only through `(a.u, a.v)`, which is drawn from
/// the matching bivariate normal.
pub fn jl_deviations(u: &[f64], v: &[f64], k: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::Dimension { what: "vector length", expected: u.len(), got: v.len() });
    }
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    // (a.u, a.v) = (l11 z1, l21 z1 + l22 z2)
    let l11 = uu.sqrt();
    let (l21, l22) = if l11 > 0.0 {
        let l21 = uv / l11;
        (l21, (vv - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, vv.sqrt())
    };
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, t as u64);
            let mut acc = 0.0;
            for _ in 0..k {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                acc += (l11 * z1) * (l21 * z1 + l22 * z2);
            }
            acc / k as f64 - uv
        })
        .collect())
}

pub fn check_jl_lemma(cfg: &JlCheckConfig) -> Result<CheckReport> {
    validate_epsilon(cfg.epsilon)?;
    if cfg.trials < MIN_TRIALS {
        return Err(Error::Parameter(format!("trials must be >= {MIN_TRIALS}, got {}", cfg.trials)));
    }
    let c = cfg.norm_bound.unwrap_or_else(|| {
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        n(&cfg.u).max(n(&cfg.v))
    });
    let devs = jl_deviations(&cfg.u, &cfg.v, cfg.k, cfg.trials, cfg.seed)?;
    let threshold = c * cfg.epsilon;
    let violations = devs.iter().filter(|d| d.abs() >= threshold && threshold > 0.0).count();
    let rate = violations as f64 / cfg.trials as f64;
    let bound = jl_bound(cfg.epsilon, cfg.k);
    let slack = SLACK_WIDTHS * wilson_half_width(rate, cfg.trials, WILSON_Z);
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;

    let mut r = CheckReport::new("jl_lemma");
    r.seed = Some(cfg.seed);
    r.trials = Some(cfg.trials);
    r.violation_rate = Some(rate);
    r.measure("violation_rate", rate);
    r.measure("mean_deviation", mean);
    r.measure("k", cfg.k as f64);
    r.measure("epsilon", cfg.epsilon);
    r.tolerance("violation_bound", bound);
    r.tolerance("violation_slack", slack);
    r.pass = rate <= bound + slack;
    r.notes.push("inner products normalized by 1/k".into());
    Ok(r)
}

fn sum_cross_entropy(model: &ModelState, dataset: &Dataset) -> Result<f64> {
    let logits = model.logit_matrix(dataset.samples())?;
    Ok(dataset
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = logits.row(i).transpose();
            log_sum_exp(&z) - z[y]
        })
        .sum())
}

/// Per-class derivative of the summed risk along `v_k / |v_k|`:
/// `sum_i (softmax_k(f(x_i)) - 1{k = y_i}) |phi(x_i)| cos(tau_ik)`.
pub fn norm_derivatives(model: &ModelState, dataset: &Dataset) -> Result<Vec<f64>> {
    let feats = model.feature_matrix(dataset.samples())?;
    let logits = model.logit_matrix(dataset.samples())?;
    let c = model.num_classes();
    let mut out = vec![0.0; c];
    for (k, slot) in out.iter_mut().enumerate() {
        let vk = model.head.weight.row(k).transpose();
        let vn = vk.norm();
        if vn <= 1e-12 {
            return Err(Error::Degenerate(format!("classifier row {k} has zero norm; angles are undefined")));
        }
        for (i, &y) in dataset.labels().iter().enumerate() {
            let phi = feats.row(i).transpose();
            let pn = phi.norm();
            if pn == 0.0 {
                continue;
            }
            let cos = vk.dot(&phi) / (vn * pn);
            let sigma = softmax(&logits.row(i).transpose())[k];
            *slot += (sigma - if k == y { 1.0 } else { 0.0 }) * pn * cos;
        }
    }
    Ok(out)
}

pub fn check_norm_derivatives(model: &ModelState, dataset: &Dataset) -> Result<CheckReport> {
    let analytic = norm_derivatives(model, dataset)?;
    let h = model.feature_dim();
    let delta = residuals(model, dataset)?;

    let mut max_rel: f64 = 0.0;
    let mut max_identity: f64 = 0.0;
    for (k, &an) in analytic.iter().enumerate() {
        let u = model.head.weight.row(k).transpose().normalize();
        let shifted = |t: f64| {
            let mut m = model.clone();
            let row = m.head.weight.row(k).transpose() + &u * t;
            m.head.weight.set_row(k, &row.transpose());
            m
        };
        let fd = (sum_cross_entropy(&shifted(FD_STEP), dataset)? - sum_cross_entropy(&shifted(-FD_STEP), dataset)?)
            / (2.0 * FD_STEP);
        let denom = if an.abs() > 1e-8 { an.abs() } else { 1.0 };
        max_rel = max_rel.max((fd - an).abs() / denom);

        // per-sample gradient w.r.t. v_k from the full Jacobian, projected on u
        let mut summed = 0.0;
        for i in 0..dataset.len() {
            let j = model.full_jacobian(&dataset.sample(i))?;
            let g: DVector<f64> = -(j.transpose() * delta.row(i).transpose());
            let gk = g.rows(k * h, h);
            summed += gk.dot(&u);
        }
        max_identity = max_identity.max((summed - an).abs() / denom);
    }

    let mut r = CheckReport::new("norm_derivatives");
    r.measure("max_relative_error_fd", max_rel);
    r.measure("max_relative_error_chain_rule", max_identity);
    r.tolerance("relative_error", DERIVATIVE_REL_TOL);
    r.pass = max_rel <= DERIVATIVE_REL_TOL && max_identity <= DERIVATIVE_REL_TOL;
    r.notes.push("risk is the summed cross-entropy; central difference with step 1e-6".into());
    r.notes.push("relative error falls back to absolute when the analytic value is below 1e-8".into());
    for (k, an) in analytic.iter().enumerate() {
        r.measure(&format!("derivative_class_{k}"), *an);
    }
    Ok(r)
}

/// LP (gradient descent, head only) versus FT from the same initial model.
pub fn check_norm_growth(
    model: &ModelState,
    dataset: &Dataset,
    lp_eta: f64,
    ft_eta: f64,
    steps: usize,
) -> Result<CheckReport> {
    let feats = model.feature_matrix(dataset.samples())?;
    if perceptron_separable(&feats, dataset.labels(), dataset.num_classes(), PERCEPTRON_BUDGET) {
        return Err(Error::Precondition("dataset is linearly separable in the initial features".into()));
    }
    let mut r = CheckReport::new("norm_growth");
    if lp_eta == 0.0 || steps == 0 {
        r.notes.push("degenerate: no training signal".into());
        r.measure("lp_norm_increase", 0.0);
        return Ok(r);
    }
    let mut lp_cfg = TrainConfig::new(Mode::Lp, lp_eta, steps);
    lp_cfg.lp_solver = crate::train::LpSolver::GradientDescent;
    let ft_cfg = TrainConfig::new(Mode::Ft, ft_eta, steps);
    let lp = train(model, dataset, &lp_cfg)?;
    let ft = train(model, dataset, &ft_cfg)?;
    let lp_norms: Vec<f64> = lp.records.iter().map(|s| s.v_norm).collect();
    let ft_norms: Vec<f64> = ft.records.iter().map(|s| s.v_norm).collect();
    let v0 = lp_norms[0];
    let lp_inc = lp_norms[lp_norms.len() - 1] - v0;
    let ft_inc = ft_norms[ft_norms.len() - 1] - v0;
    // last 80% of the steps, measured on the steps after init
    let start = 1 + steps / 5;
    let worst_drop = lp_norms[start..]
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    let monotone = worst_drop <= 0.0;

    r.measure("lp_norm_increase", lp_inc);
    r.measure("ft_norm_increase", ft_inc);
    r.measure("lp_worst_late_drop", worst_drop.max(0.0));
    r.measure("initial_v_norm", v0);
    r.tolerance("lp_worst_late_drop", 0.0);
    r.pass = monotone && lp_inc > ft_inc;
    Ok(r)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn relative_error(actual: &DMatrix<f64>, predicted: &DMatrix<f64>) -> f64 {
    (actual - predicted).norm() / actual.norm().max(f64::MIN_POSITIVE)
}

/// Roundoff floor below which a relative prediction error carries no slope information.
pub const ROUNDOFF_REL_ERROR: f64 = 1e-10;

/// Slope of the relative one-step prediction error versus the learning rate,
/// for logits and features at the training samples.
pub fn check_linearization_order(model: &ModelState, dataset: &Dataset, etas: &[f64]) -> Result<CheckReport> {
    if etas.len() < 3 {
        return Err(Error::Precondition("learning-rate grid needs at least 3 points".into()));
    }
    if etas.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::Precondition("learning rates must be finite and > 0".into()));
    }
    if etas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Precondition("learning-rate grid must be strictly decreasing".into()));
    }
    let x = dataset.samples();
    let logits0 = model.logit_matrix(x)?;
    let feats0 = model.feature_matrix(x)?;
    let mut logit_err = Vec::new();
    let mut feat_err = Vec::new();
    for &eta in etas {
        let pred = linearized_one_epoch(model, dataset, eta, x)?;
        let next = gd_step(model, dataset, eta, Trainable::ALL)?;
        let dl = next.logit_matrix(x)? - &logits0;
        let df = next.feature_matrix(x)? - &feats0;
        logit_err.push(relative_error(&dl, &pred.logit_delta()));
        feat_err.push(relative_error(&df, &pred.feature_delta));
    }
    let logit_slope = log_log_slope(etas, &logit_err);
    let feat_slope = log_log_slope(etas, &feat_err);
    let in_range = |s: f64| s >= SLOPE_RANGE.0 && s <= SLOPE_RANGE.1;

    let mut r = CheckReport::new("linearization_order");
    r.measure("logit_slope", logit_slope);
    r.measure("feature_slope", feat_slope);
    for (i, (&e, (&a, &b))) in etas.iter().zip(logit_err.iter().zip(&feat_err)).enumerate() {
        r.measure(&format!("eta_{i}"), e);
        r.measure(&format!("logit_rel_error_{i}"), a);
        r.measure(&format!("feature_rel_error_{i}"), b);
    }
    r.tolerance("slope_min", SLOPE_RANGE.0);
    r.tolerance("slope_max", SLOPE_RANGE.1);
    r.pass = in_range(logit_slope) && in_range(feat_slope);
    if feat_err.iter().all(|&e| e < ROUNDOFF_REL_ERROR) {
        r.notes.push("feature prediction is exact up to roundoff (features are linear in their parameters); its slope reflects roundoff only".into());
    }
    r.notes.push(format!("architecture {}", model.arch_name()));
    Ok(r)
}

/// Scaling `V0` by `s`: `F` scales by `s^2`, `P` is unchanged, and the
/// predicted feature delta (residuals held fixed) scales by `s`.
pub fn check_head_scaling(model: &ModelState, dataset: &Dataset, s: f64, eta: f64) -> Result<CheckReport> {
    if !(s > 0.0) {
        return Err(Error::Parameter("scale must be > 0".into()));
    }
    let x = dataset.samples();
    let scaled = model.with_scaled_head(s);
    let d0 = compute_decomposition(model, x)?;
    let d1 = compute_decomposition(&scaled, x)?;
    let f_err = max_abs(&(&d1.ft - &d0.ft * (s * s))) / max_abs(&d0.ft).max(f64::MIN_POSITIVE) / (s * s);
    let p_identical = d0.pre_train.as_slice().iter().zip(d1.pre_train.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    let delta = residuals(model, dataset)?;
    let p0 = linearized_with_residuals(model, x, &delta, eta, x)?;
    let p1 = linearized_with_residuals(&scaled, x, &delta, eta, x)?;
    let feat_err = max_abs(&(&p1.feature_delta - &p0.feature_delta * s)) / max_abs(&p0.feature_delta).max(f64::MIN_POSITIVE) / s;

    let mut r = CheckReport::new("head_scaling");
    r.measure("scale", s);
    r.measure("f_relative_error", f_err);
    r.measure("p_bit_identical", if p_identical { 1.0 } else { 0.0 });
    r.measure("feature_delta_relative_error", feat_err);
    r.tolerance("f_relative_error", 1e-12);
    r.tolerance("feature_delta_relative_error", 1e-12);
    r.pass = f_err <= 1e-12 && p_identical && feat_err <= 1e-12;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_half_width_at_zero_rate_is_positive() {
        let w = wilson_half_width(0.0, 1000, 1.96);
        assert!(w > 0.0 && w < 0.01);
    }

    #[test]
    fn jl_bound_values() {
        assert!((jl_bound(0.3, 100) - 4.0 * (-(0.09f64 - 0.027) * 25.0).exp()).abs() < 1e-15);
        assert!((jl_bound(0.2, 1000) - 4.0 * (-8.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_vectors_never_deviate() {
        let d = jl_deviations(&[0.0; 3], &[0.0; 3], 10, 50, 1).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 0.5, 0.25, 0.125];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((log_log_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut r = CheckReport::new("x");
        r.measure("a", 1.5);
        r.pass = true;
        let back: CheckReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
