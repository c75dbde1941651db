//! Datasets and models built from a config, and the named check fixtures.

use nalgebra::DMatrix;
use ntk_lab::data::{gen_gaussian_clusters, gen_orthogonal_probe, load_dataset};
use ntk_lab::model::{init_model, load_model};
use ntk_lab::train::LpSolver;
use ntk_lab::{Architecture, Dataset, HeadInit, ModelState, Split, TrainConfig};

use crate::config::{Aggregation, ArchKind, ExperimentConfig, HeadInitKind, LoraFixtureConfig, LpSolverKind, NormGrowthConfig, OrthogonalCheckConfig};
use crate::error::CliError;

/// Dataset from `[data]`: loaded from `path` or generated with the global seed.
/// Split fractions are applied only to a dataset whose samples are all `train`.
pub fn dataset(c: &ExperimentConfig) -> Result<Dataset, CliError> {
    let d = &c.data;
    let mut ds = match &d.path {
        Some(p) => load_dataset(p)?,
        None => gen_gaussian_clusters(d.n_per_class, d.num_classes, d.dim, d.separation, d.noise, c.seed)?,
    };
    if (d.val_fraction > 0.0 || d.test_fraction > 0.0) && ds.splits().iter().all(|&s| s == Split::Train) {
        ds.assign_splits(d.val_fraction, d.test_fraction, c.seed)?;
    }
    Ok(ds)
}

/// Dataset with fresh split tags, replacing whatever `[data]` assigned.
pub fn dataset_with_splits(c: &ExperimentConfig, val: f64, test: f64) -> Result<Dataset, CliError> {
    let mut inner = c.clone();
    inner.data.val_fraction = 0.0;
    inner.data.test_fraction = 0.0;
    let mut ds = dataset(&inner)?;
    ds.assign_splits(val, test, c.seed)?;
    Ok(ds)
}

pub fn split(ds: &Dataset, which: Split) -> Result<Dataset, CliError> {
    ds.subset(which)
        .ok_or_else(|| CliError::Runtime(ntk_lab::Error::Precondition(format!("dataset has no `{}` samples", which.as_str()))))
}

pub fn architecture(c: &ExperimentConfig) -> Architecture {
    match c.model.arch {
        ArchKind::Linear => Architecture::Linear,
        ArchKind::Mlp => Architecture::Mlp { hidden: c.model.hidden.clone() },
    }
}

/// Model from `[model]`: loaded from `path` or initialized with seed `seed + seed_offset`.
pub fn model(c: &ExperimentConfig, ds: &Dataset) -> Result<ModelState, CliError> {
    let m = &c.model;
    let model = match &m.path {
        Some(p) => load_model(p)?,
        None => {
            let head = match m.head_init {
                HeadInitKind::Zeros => HeadInit::Zeros,
                HeadInitKind::Gaussian => HeadInit::Gaussian {
                    scale: m.head_scale.unwrap_or(1.0 / (m.feature_dim as f64).sqrt()),
                },
            };
            init_model(&architecture(c), ds.dim(), m.feature_dim, ds.num_classes(), head, c.seed.wrapping_add(m.seed_offset))?
        }
    };
    if model.input_dim() != ds.dim() || model.num_classes() != ds.num_classes() {
        return Err(CliError::Runtime(ntk_lab::Error::Dimension {
            what: "model input dimension",
            expected: ds.dim(),
            got: model.input_dim(),
        }));
    }
    Ok(model)
}

/// Trainer settings from `[training]`; mean aggregation divides the learning
/// rates by the number of training samples.
pub fn train_config(c: &ExperimentConfig, mode: ntk_lab::Mode, n_train: usize) -> TrainConfig {
    let t = &c.training;
    let scale = match t.aggregation {
        Aggregation::Sum => 1.0,
        Aggregation::Mean => 1.0 / n_train.max(1) as f64,
    };
    let mut cfg = TrainConfig::new(mode, t.learning_rate * scale, t.epochs);
    cfg.lp_solver = match t.lp_solver {
        LpSolverKind::Ridge => LpSolver::RidgeLogistic { lambda: t.lp_lambda },
        LpSolverKind::Gd => LpSolver::GradientDescent,
    };
    cfg.lp_epochs = t.lp_epochs;
    cfg.lp_learning_rate = t.lp_learning_rate.map(|lr| lr * scale);
    cfg.lora_rank = t.lora_rank;
    cfg.lora_variance = t.lora_variance;
    cfg.seed = c.seed;
    cfg
}

/// The standard fixture: defaults of `[data]` and `[model]` at `seed`.
pub fn standard(seed: u64) -> Result<(Dataset, ModelState), CliError> {
    let c = ExperimentConfig { seed, ..ExperimentConfig::default() };
    let ds = dataset(&c)?;
    let m = model(&c, &ds)?;
    Ok((ds, m))
}

/// The first `n` samples of a draw with `ceil(n / classes)` per class.
fn first_samples(n: usize, classes: usize, dim: usize, separation: f64, noise: f64, seed: u64) -> Result<Dataset, CliError> {
    let per_class = n.div_ceil(classes);
    let ds = gen_gaussian_clusters(per_class, classes, dim, separation, noise, seed)?;
    let idx: Vec<usize> = (0..n).collect();
    Ok(ds.select(&idx))
}

/// Small fixture: N = 20, d = 8, h = 16, C = 3, head scale `1/sqrt(h)`.
/// `hidden = None` gives the linear model.
pub fn small(hidden: Option<Vec<usize>>, seed: u64) -> Result<(Dataset, ModelState), CliError> {
    let ds = first_samples(20, 3, 8, 2.0, 1.0, seed)?;
    let arch = match hidden {
        None => Architecture::Linear,
        Some(h) => Architecture::Mlp { hidden: h },
    };
    let m = init_model(&arch, 8, 16, 3, HeadInit::Gaussian { scale: 0.25 }, seed.wrapping_add(100))?;
    Ok((ds, m))
}

/// Linear model with probes orthogonal to every training sample.
pub fn orthogonal(c: &OrthogonalCheckConfig, seed: u64) -> Result<(Dataset, ModelState, DMatrix<f64>), CliError> {
    let ds = gen_gaussian_clusters(c.n_per_class, 3, c.dim, 1.0, 1.0, seed)?;
    let m = init_model(&Architecture::Linear, c.dim, c.feature_dim, 3, HeadInit::Gaussian { scale: 1.0 }, seed.wrapping_add(100))?;
    let probes = gen_orthogonal_probe(&ds, c.probes, seed.wrapping_add(200))?;
    Ok((ds, m, probes))
}

/// Linear base for the LoRA check, inputs rescaled to unit max norm.
pub fn lora(c: &LoraFixtureConfig, seed: u64) -> Result<(Dataset, ModelState), CliError> {
    let ds = first_samples(c.samples, 3, c.dim, 2.0, 1.0, seed)?.rescaled_to_norm_bound(1.0)?;
    let m = init_model(&Architecture::Linear, c.dim, c.dim, 3, HeadInit::Gaussian { scale: 1.0 }, seed.wrapping_add(100))?;
    Ok((ds, m))
}

/// Overlapping clusters and a linear model with a small head.
pub fn norm_growth(c: &NormGrowthConfig, seed: u64) -> Result<(Dataset, ModelState), CliError> {
    let ds = gen_gaussian_clusters(c.n_per_class, 3, c.dim, c.separation, c.noise, seed)?;
    let m = init_model(&Architecture::Linear, c.dim, c.feature_dim, 3, HeadInit::Gaussian { scale: c.head_scale }, seed.wrapping_add(100))?;
    Ok((ds, m))
}
