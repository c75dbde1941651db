//! Full-batch gradient-descent trainers (LP, FT, LoRA, LP-FT, LP-LoRA) under
//! cross-entropy, residuals, and the one-step linearized predictors.
//!
//! A gradient step aggregates per-sample gradients by *sum*:
//! `theta <- theta + eta * sum_i J(x_i)^T delta_i`. The reported loss is the
//! mean cross-entropy.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{argmax, log_sum_exp, rng_for, softmax};
use crate::logistic;
use crate::model::{attach_lora, FeatureExtractor, Head, ModelState};
use crate::ntk::{compute_cross_decomposition, compute_phi_kernel_matrix};

/// Abort when the mean loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Default lambda grid for cross-validated ridge solvers.
pub const LAMBDA_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2];
pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "lp")]
    Lp,
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "lp-ft")]
    LpFt,
    #[serde(rename = "lp-lora")]
    LpLora,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lp => "lp",
            Mode::Ft => "ft",
            Mode::Lora => "lora",
            Mode::LpFt => "lp-ft",
            Mode::LpLora => "lp-lora",
        }
    }

    pub fn has_lp_stage(self) -> bool {
        matches!(self, Mode::Lp | Mode::LpFt | Mode::LpLora)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LpSolver {
    GradientDescent,
    /// `lambda: None` selects lambda by 5-fold cross-validation over `LAMBDA_GRID`.
    RidgeLogistic { lambda: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    /// Full-batch steps of the FT / LoRA stage (or of LP in `Mode::Lp`).
    pub epochs: usize,
    pub lp_solver: LpSolver,
    /// Gradient-descent LP steps for two-stage modes.
    pub lp_epochs: usize,
    /// Learning rate of gradient-descent LP; falls back to `learning_rate`.
    pub lp_learning_rate: Option<f64>,
    pub lora_rank: usize,
    pub lora_variance: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: Mode, learning_rate: f64, epochs: usize) -> Self {
        TrainConfig {
            mode,
            learning_rate,
            epochs,
            lp_solver: LpSolver::RidgeLogistic { lambda: None },
            lp_epochs: 0,
            lp_learning_rate: None,
            lora_rank: 4,
            lora_variance: 0.25,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter("learning rate must be finite and > 0".into()));
        }
        if let Some(lr) = self.lp_learning_rate {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Parameter("LP learning rate must be finite and > 0".into()));
            }
        }
        if let LpSolver::RidgeLogistic { lambda: Some(l) } = self.lp_solver {
            if !(l >= 0.0) {
                return Err(Error::Parameter("ridge lambda must be >= 0".into()));
            }
        }
        if matches!(self.mode, Mode::LpFt | Mode::LpLora)
            && self.lp_solver == LpSolver::GradientDescent
            && self.lp_epochs == 0
        {
            return Err(Error::Parameter("two-stage mode with gradient-descent LP needs lp_epochs > 0".into()));
        }
        Ok(())
    }
}

/// Which parameter views a step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub head_weight: bool,
    pub head_bias: bool,
    pub feature: bool,
}

impl Trainable {
    pub const HEAD: Trainable = Trainable { head_weight: true, head_bias: true, feature: false };
    pub const ALL: Trainable = Trainable { head_weight: true, head_bias: true, feature: true };

    fn any(self) -> bool {
        self.head_weight || self.head_bias || self.feature
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Lp,
    Ft,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub v_norm: f64,
    pub b_norm: f64,
    pub mean_logit_norm: f64,
    pub mean_feature_drift: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub records: Vec<StepRecord>,
    pub final_model: ModelState,
    /// Model at the end of the LP stage, for two-stage modes.
    pub lp_model: Option<ModelState>,
    /// Ridge strength used by a ridge-logistic LP stage.
    pub lp_lambda: Option<f64>,
}

pub const TRACE_CSV_HEADER: &str =
    "step,phase,loss,accuracy,v_norm,b_norm,mean_logit_norm,mean_feature_drift";

impl TrainingTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let phase = match r.phase {
                Phase::Init => "init",
                Phase::Lp => "lp",
                Phase::Ft => "ft",
                Phase::Lora => "lora",
            };
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.step, phase, r.loss, r.accuracy, r.v_norm, r.b_norm, r.mean_logit_norm, r.mean_feature_drift
            ));
        }
        out
    }

    pub fn v_norms(&self, phase: Phase) -> Vec<f64> {
        self.records.iter().filter(|r| r.phase == phase).map(|r| r.v_norm).collect()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: Error,
    pub partial: TrainingTrace,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// `delta_i = e_{y_i} - softmax(f(x_i))`, one row per sample.
pub fn residuals(model: &ModelState, dataset: &Dataset) -> Result<DMatrix<f64>> {
    let logits = model.logit_matrix(dataset.samples())?;
    if logits.ncols() != dataset.num_classes() {
        return Err(Error::Dimension { what: "classes", expected: dataset.num_classes(), got: logits.ncols() });
    }
    Ok(residuals_from_logits(&logits, dataset.labels()))
}

pub fn residuals_from_logits(logits: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(logits.nrows(), logits.ncols());
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(&logits.row(i).transpose());
        for k in 0..logits.ncols() {
            out[(i, k)] = if k == y { 1.0 - p[k] } else { -p[k] };
        }
    }
    out
}

/// Mean cross-entropy and accuracy.
pub fn loss_and_accuracy(model: &ModelState, dataset: &Dataset) -> Result<(f64, f64)> {
    let logits = model.logit_matrix(dataset.samples())?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &y) in dataset.labels().iter().enumerate() {
        let z = logits.row(i).transpose();
        loss += log_sum_exp(&z) - z[y];
        if argmax(&z) == y {
            correct += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Sum-aggregated negative gradient `sum_i J(x_i)^T delta_i`, split by view.
pub struct Ascent {
    pub head_weight: DMatrix<f64>,
    pub head_bias: DVector<f64>,
    pub feature: DVector<f64>,
}

pub fn ascent_direction(model: &ModelState, dataset: &Dataset, want_feature: bool) -> Result<Ascent> {
    let delta = residuals(model, dataset)?;
    let (c, h) = model.head.weight.shape();
    let mut gv = DMatrix::zeros(c, h);
    let mut gb = DVector::zeros(c);
    let mut gf = DVector::zeros(model.num_feature_params());
    for i in 0..dataset.len() {
        let x = dataset.sample(i);
        let d = delta.row(i).transpose();
        let phi = model.features_unchecked(&x);
        gv += &d * phi.transpose();
        gb += &d;
        if want_feature {
            let upstream = model.head.weight.transpose() * &d;
            gf += model.feature_vjp(&x, &upstream);
        }
    }
    Ok(Ascent { head_weight: gv, head_bias: gb, feature: gf })
}

/// One full-batch gradient step on the summed cross-entropy.
pub fn gd_step(model: &ModelState, dataset: &Dataset, eta: f64, trainable: Trainable) -> Result<ModelState> {
    if !trainable.any() {
        return Err(Error::Parameter("no trainable parameters".into()));
    }
    let g = ascent_direction(model, dataset, trainable.feature)?;
    let finite = g.head_weight.iter().chain(g.head_bias.iter()).chain(g.feature.iter()).all(|v| v.is_finite());
    if !finite {
        return Err(Error::Divergence { step: 0, reason: "non-finite gradient".into() });
    }
    let mut next = model.clone();
    if trainable.head_weight {
        next.head.weight += &g.head_weight * eta;
    }
    if trainable.head_bias {
        next.head.bias += &g.head_bias * eta;
    }
    if trainable.feature {
        let theta = model.feature_params() + &g.feature * eta;
        let head = next.head.clone();
        next = model.with_feature_params(theta.as_slice())?;
        next.head = head;
    }
    Ok(next)
}

fn record(model: &ModelState, dataset: &Dataset, phi0: &DMatrix<f64>, step: usize, phase: Phase) -> Result<StepRecord> {
    let (loss, accuracy) = loss_and_accuracy(model, dataset)?;
    let feats = model.feature_matrix(dataset.samples())?;
    let logits = model.logit_matrix(dataset.samples())?;
    let n = dataset.len() as f64;
    let drift = (0..dataset.len()).map(|i| (feats.row(i) - phi0.row(i)).norm()).sum::<f64>() / n;
    let logit_norm = (0..dataset.len()).map(|i| logits.row(i).norm()).sum::<f64>() / n;
    Ok(StepRecord {
        step,
        phase,
        loss,
        accuracy,
        v_norm: model.head.weight.norm(),
        b_norm: model.head.bias.norm(),
        mean_logit_norm: logit_norm,
        mean_feature_drift: drift,
    })
}

fn diverged(rec: &StepRecord, model: &ModelState) -> Option<String> {
    if !rec.loss.is_finite() || rec.loss > DIVERGENCE_LOSS {
        Some(format!("loss {} exceeds the divergence threshold", rec.loss))
    } else if !model.is_finite() {
        Some("non-finite parameter".into())
    } else {
        None
    }
}

struct Runner<'a> {
    dataset: &'a Dataset,
    phi0: DMatrix<f64>,
    trace: TrainingTrace,
    step: usize,
}

impl Runner<'_> {
    fn fail(self, error: Error) -> TrainFailure {
        TrainFailure { error, partial: self.trace }
    }

    fn push(&mut self, model: &ModelState, phase: Phase) -> std::result::Result<(), Error> {
        let rec = record(model, self.dataset, &self.phi0, self.step, phase)?;
        let bad = diverged(&rec, model);
        self.trace.records.push(rec);
        self.trace.final_model = model.clone();
        match bad {
            Some(reason) => Err(Error::Divergence { step: self.step, reason }),
            None => Ok(()),
        }
    }

    fn run_gd(&mut self, mut model: ModelState, eta: f64, steps: usize, trainable: Trainable, phase: Phase) -> Result<ModelState> {
        for _ in 0..steps {
            model = gd_step(&model, self.dataset, eta, trainable).map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence { step: self.step + 1, reason },
                other => other,
            })?;
            self.step += 1;
            self.push(&model, phase)?;
        }
        Ok(model)
    }
}

/// Runs the configured schedule. Step 0 records the initial model.
pub fn train(model: &ModelState, dataset: &Dataset, config: &TrainConfig) -> std::result::Result<TrainingTrace, TrainFailure> {
    let phi0 = match model.feature_matrix(dataset.samples()) {
        Ok(p) => p,
        Err(error) => {
            return Err(TrainFailure {
                error,
                partial: TrainingTrace { records: vec![], final_model: model.clone(), lp_model: None, lp_lambda: None },
            })
        }
    };
    let mut runner = Runner {
        dataset,
        phi0,
        trace: TrainingTrace { records: vec![], final_model: model.clone(), lp_model: None, lp_lambda: None },
        step: 0,
    };
    if let Err(e) = config.validate() {
        return Err(runner.fail(e));
    }
    if let Err(e) = runner.push(model, Phase::Init) {
        return Err(runner.fail(e));
    }
    match run_schedule(&mut runner, model, config) {
        Ok(()) => Ok(runner.trace),
        Err(e) => Err(runner.fail(e)),
    }
}

fn run_schedule(runner: &mut Runner<'_>, model: &ModelState, config: &TrainConfig) -> Result<()> {
    let lp_eta = config.lp_learning_rate.unwrap_or(config.learning_rate);
    let mut current = model.clone();
    if config.mode.has_lp_stage() {
        current = match config.lp_solver {
            LpSolver::GradientDescent => {
                let steps = if config.mode == Mode::Lp { config.epochs } else { config.lp_epochs };
                runner.run_gd(current, lp_eta, steps, Trainable::HEAD, Phase::Lp)?
            }
            LpSolver::RidgeLogistic { lambda } => {
                let (fitted, lam) = fit_linear_probe(&current, runner.dataset, lambda, config.seed)?;
                runner.trace.lp_lambda = Some(lam);
                runner.step += 1;
                runner.push(&fitted, Phase::Lp)?;
                fitted
            }
        };
        runner.trace.lp_model = Some(current.clone());
    }
    match config.mode {
        Mode::Lp => {}
        Mode::Ft | Mode::LpFt => {
            runner.run_gd(current, config.learning_rate, config.epochs, Trainable::ALL, Phase::Ft)?;
        }
        Mode::Lora | Mode::LpLora => {
            let adapted = match current.feature {
                FeatureExtractor::Lora(_) => current,
                _ => attach_lora(&current, config.lora_rank, config.lora_variance, config.seed, 300)?,
            };
            runner.run_gd(adapted, config.learning_rate, config.epochs, Trainable::ALL, Phase::Lora)?;
        }
    }
    Ok(())
}

/// Ridge-logistic linear probe on frozen features. Returns the model with the
/// fitted head and the ridge strength used.
pub fn fit_linear_probe(model: &ModelState, dataset: &Dataset, lambda: Option<f64>, seed: u64) -> Result<(ModelState, f64)> {
    let feats = model.feature_matrix(dataset.samples())?;
    let c = dataset.num_classes();
    let feats_ref = &feats;
    let lam = match lambda {
        Some(l) => l,
        None => select_lambda_cv(dataset.labels(), seed, |train_idx, lam| {
            let feats = feats_ref;
            let sub = feats.select_rows(train_idx.iter());
            let labels: Vec<usize> = train_idx.iter().map(|&i| dataset.labels()[i]).collect();
            let head = solve_probe(&sub, &labels, c, lam)?;
            Ok(Box::new(move |i: usize| &head.weight * feats.row(i).transpose() + &head.bias) as Predictor<'_>)
        })?,
    };
    let head = solve_probe(&feats, dataset.labels(), c, lam)?;
    Ok((ModelState { head, feature: model.feature.clone() }, lam))
}

fn solve_probe(feats: &DMatrix<f64>, labels: &[usize], c: usize, lambda: f64) -> Result<Head> {
    let (n, h) = feats.shape();
    let mut design = DMatrix::zeros(n * c, c * h);
    for i in 0..n {
        for k in 0..c {
            for j in 0..h {
                design[(i * c + k, k * h + j)] = feats[(i, j)];
            }
        }
    }
    let penalty = DMatrix::identity(c * h, c * h);
    let sol = logistic::Problem { design: &design, penalty: &penalty, labels, num_classes: c, lambda, fit_intercept: true }.solve()?;
    Ok(Head {
        weight: DMatrix::from_row_slice(c, h, sol.weights.as_slice()),
        bias: sol.intercepts,
    })
}

pub type Predictor<'a> = Box<dyn Fn(usize) -> DVector<f64> + 'a>;

/// K-fold selection over `LAMBDA_GRID` by held-out mean NLL. `fit` trains on
/// the given indices and returns a logit predictor for any sample index.
/// Ties keep the larger lambda.
pub fn select_lambda_cv<'a, F>(labels: &[usize], seed: u64, fit: F) -> Result<f64>
where
    F: Fn(&[usize], f64) -> Result<Predictor<'a>>,
{
    let n = labels.len();
    let folds = CV_FOLDS.min(n);
    if folds < 2 {
        return Err(Error::Parameter("cross-validation needs at least 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 500));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            f[i] = rank % folds;
        }
        f
    };
    let mut best = (f64::INFINITY, LAMBDA_GRID[0]);
    for &lam in LAMBDA_GRID.iter() {
        let mut nll = 0.0;
        for fold in 0..folds {
            let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let predict = fit(&train_idx, lam)?;
            for i in (0..n).filter(|&i| fold_of[i] == fold) {
                let z = predict(i);
                nll += log_sum_exp(&z) - z[labels[i]];
            }
        }
        if nll <= best.0 {
            best = (nll, lam);
        }
    }
    Ok(best.1)
}

/// One row of a head-norm sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    /// Mean `|phi_after(x) - phi_start(x)|` over the dataset; NaN if training diverged.
    pub feature_diff: f64,
    pub diverged: bool,
    pub baseline: bool,
}

/// For each scale `s`, multiplies the head by `s` at the start of the FT (or
/// LoRA) stage, trains per `config`, and records the mean feature change over
/// that stage.
pub fn head_norm_sweep(model: &ModelState, dataset: &Dataset, scales: &[f64], config: &TrainConfig) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = scales.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Parameter(format!("sweep scales must be finite and > 0, got {bad}")));
    }
    if config.mode == Mode::Lp {
        return Err(Error::Parameter("a head-norm sweep needs a mode with a fine-tuning stage".into()));
    }
    config.validate()?;
    let start = if config.mode.has_lp_stage() {
        let mut lp_cfg = config.clone();
        lp_cfg.mode = Mode::Lp;
        if lp_cfg.lp_solver == LpSolver::GradientDescent {
            lp_cfg.epochs = config.lp_epochs;
        }
        train(model, dataset, &lp_cfg)?.final_model
    } else {
        model.clone()
    };
    let second = match config.mode {
        Mode::LpFt | Mode::Ft => Mode::Ft,
        _ => Mode::Lora,
    };
    let phi_start = start.feature_matrix(dataset.samples())?;
    scales
        .iter()
        .map(|&s| {
            let mut cfg = config.clone();
            cfg.mode = second;
            let scaled = start.with_scaled_head(s);
            let (feature_diff, diverged) = match train(&scaled, dataset, &cfg) {
                Ok(trace) => {
                    let after = trace.final_model.feature_matrix(dataset.samples())?;
                    let n = dataset.len() as f64;
                    ((0..dataset.len()).map(|i| (after.row(i) - phi_start.row(i)).norm()).sum::<f64>() / n, false)
                }
                Err(f) if matches!(f.error, Error::Divergence { .. }) => (f64::NAN, true),
                Err(f) => return Err(f.error),
            };
            Ok(SweepRow { scale: s, feature_diff, diverged, baseline: s == 1.0 })
        })
        .collect()
}

/// Right-hand sides of the one-step linearized predictions at `probes`:
/// logit change `eta sum_i (P + F)(x, x_i) delta_i` and feature change
/// `eta sum_i Theta_phi(x, x_i) V0^T delta_i`.
#[derive(Debug, Clone)]
pub struct LinearizedPrediction {
    /// M x C, the `P` part of the logit change.
    pub logit_p_term: DMatrix<f64>,
    /// M x C, the `F` part of the logit change.
    pub logit_f_term: DMatrix<f64>,
    /// M x h
    pub feature_delta: DMatrix<f64>,
}

impl LinearizedPrediction {
    pub fn logit_delta(&self) -> DMatrix<f64> {
        &self.logit_p_term + &self.logit_f_term
    }
}

pub fn linearized_one_epoch(
    model: &ModelState,
    dataset: &Dataset,
    eta: f64,
    probes: &DMatrix<f64>,
) -> Result<LinearizedPrediction> {
    let delta = residuals(model, dataset)?;
    linearized_with_residuals(model, dataset.samples(), &delta, eta, probes)
}

/// As [`linearized_one_epoch`] with caller-supplied residuals.
pub fn linearized_with_residuals(
    model: &ModelState,
    train: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    eta: f64,
    probes: &DMatrix<f64>,
) -> Result<LinearizedPrediction> {
    let c = model.num_classes();
    let h = model.feature_dim();
    let n = train.nrows();
    if residuals.shape() != (n, c) {
        return Err(Error::Dimension { what: "residual rows", expected: n, got: residuals.nrows() });
    }
    let m = probes.nrows();
    let decomp = compute_cross_decomposition(model, probes, train)?;
    let flat = DVector::from_iterator(n * c, (0..n).flat_map(|i| (0..c).map(move |k| residuals[(i, k)])));
    let p_term = &decomp.pre_train * &flat * eta;
    let f_term = &decomp.ft * &flat * eta;

    let theta = compute_phi_kernel_matrix(model, probes, train)?;
    let vt = model.head.weight.transpose();
    let mut upstream = DVector::zeros(n * h);
    for i in 0..n {
        upstream.rows_mut(i * h, h).copy_from(&(&vt * residuals.row(i).transpose()));
    }
    let feat = theta * upstream * eta;

    let reshape = |v: &DVector<f64>, cols: usize| DMatrix::from_fn(m, cols, |r, k| v[r * cols + k]);
    Ok(LinearizedPrediction {
        logit_p_term: reshape(&p_term, c),
        logit_f_term: reshape(&f_term, c),
        feature_delta: reshape(&feat, h),
    })
}
