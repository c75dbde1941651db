//! Experiment configuration: TOML file, environment overrides, `--set` overrides.
//!
//! Precedence, lowest first: built-in defaults, the config file,
//! `NTKLAB__section__key=value` environment variables, `--set section.key=value`.
//! Override values are parsed as TOML values and fall back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "NTKLAB__";

/// The sweep grid of head-norm scales.
pub const SWEEP_SCALES: [f64; 8] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub checks: ChecksConfig,
    pub kernel: KernelConfig,
    pub calibration: CalibrationConfig,
    pub reproduce: ReproduceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("ntklab-out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            checks: ChecksConfig::default(),
            kernel: KernelConfig::default(),
            calibration: CalibrationConfig::default(),
            reproduce: ReproduceConfig::default(),
        }
    }
}

/// Gaussian-cluster dataset, or a dataset file when `path` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_per_class: 20,
            num_classes: 3,
            dim: 16,
            separation: 2.0,
            noise: 1.0,
            val_fraction: 0.0,
            test_fraction: 0.0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInitKind {
    Zeros,
    Gaussian,
}

/// Model seed is `seed + seed_offset`. `head_scale` defaults to `1/sqrt(feature_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_init: HeadInitKind,
    pub head_scale: Option<f64>,
    pub seed_offset: u64,
    pub path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::Mlp,
            hidden: vec![32],
            feature_dim: 32,
            head_init: HeadInitKind::Gaussian,
            head_scale: None,
            seed_offset: 100,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpSolverKind {
    Ridge,
    Gd,
}

/// `sum` adds per-sample gradients; `mean` averages them, i.e. divides the
/// learning rates by the number of training samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: ntk_lab::Mode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub aggregation: Aggregation,
    pub lp_solver: LpSolverKind,
    pub lp_lambda: Option<f64>,
    pub lp_epochs: usize,
    pub lp_learning_rate: Option<f64>,
    pub lora_rank: usize,
    pub lora_variance: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: ntk_lab::Mode::Ft,
            learning_rate: 1e-4,
            epochs: 1000,
            aggregation: Aggregation::Sum,
            lp_solver: LpSolverKind::Ridge,
            lp_lambda: None,
            lp_epochs: 0,
            lp_learning_rate: None,
            lora_rank: 4,
            lora_variance: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Decomposition,
    LinearizationOrder,
    OrthogonalInvariance,
    LoraEquivalence,
    JlLemma,
    NormDerivatives,
    NormGrowth,
}

impl CheckName {
    pub const ALL: [CheckName; 7] = [
        CheckName::Decomposition,
        CheckName::LinearizationOrder,
        CheckName::OrthogonalInvariance,
        CheckName::LoraEquivalence,
        CheckName::JlLemma,
        CheckName::NormDerivatives,
        CheckName::NormGrowth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckName::Decomposition => "decomposition",
            CheckName::LinearizationOrder => "linearization_order",
            CheckName::OrthogonalInvariance => "orthogonal_invariance",
            CheckName::LoraEquivalence => "lora_equivalence",
            CheckName::JlLemma => "jl_lemma",
            CheckName::NormDerivatives => "norm_derivatives",
            CheckName::NormGrowth => "norm_growth",
        }
    }

    pub fn parse(s: &str) -> Option<CheckName> {
        CheckName::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

/// Check suite. Decomposition, linearization order and the norm derivatives
/// run on the main data/model fixture; the others carry their own fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    pub suite: Vec<CheckName>,
    pub decomposition_tol: f64,
    pub linearization_etas: Vec<f64>,
    pub derivative_fixtures: usize,
    pub orthogonal: OrthogonalCheckConfig,
    pub lora: LoraFixtureConfig,
    pub jl: JlSuiteConfig,
    pub norm_growth: NormGrowthConfig,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        ChecksConfig {
            suite: CheckName::ALL.to_vec(),
            decomposition_tol: ntk_lab::checks::DECOMPOSITION_TOL,
            linearization_etas: vec![1e-2, 5e-3, 2.5e-3, 1.25e-3],
            derivative_fixtures: 5,
            orthogonal: OrthogonalCheckConfig::default(),
            lora: LoraFixtureConfig::default(),
            jl: JlSuiteConfig::default(),
            norm_growth: NormGrowthConfig::default(),
        }
    }
}

/// Linear model on few samples in a larger input space, so that an
/// orthogonal complement exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthogonalCheckConfig {
    pub n_per_class: usize,
    pub dim: usize,
    pub feature_dim: usize,
    pub probes: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for OrthogonalCheckConfig {
    fn default() -> Self {
        OrthogonalCheckConfig { n_per_class: 2, dim: 8, feature_dim: 8, probes: 4, steps: 100, learning_rate: 0.1 }
    }
}

/// Linear base model with `dim = feature_dim`; inputs rescaled to unit max norm.
/// `variance` defaults to `1/rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraFixtureConfig {
    pub samples: usize,
    pub dim: usize,
    pub rank: usize,
    pub variance: Option<f64>,
    pub epsilon: f64,
    pub trials: usize,
}

impl Default for LoraFixtureConfig {
    fn default() -> Self {
        LoraFixtureConfig { samples: 20, dim: 256, rank: 256, variance: None, epsilon: 0.25, trials: 1000 }
    }
}

/// Every `(k, epsilon)` combination is run on the pair `(u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JlSuiteConfig {
    pub k: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub trials: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Default for JlSuiteConfig {
    fn default() -> Self {
        JlSuiteConfig { k: vec![100, 1000], epsilon: vec![0.2, 0.3], trials: 100_000, u: vec![1.0, 0.0], v: vec![0.6, 0.8] }
    }
}

/// Overlapping clusters and a linear model, one run per seed in
/// `seed .. seed + seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormGrowthConfig {
    pub n_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub feature_dim: usize,
    pub head_scale: f64,
    pub lp_learning_rate: f64,
    pub ft_learning_rate: f64,
    pub steps: usize,
    pub seeds: usize,
}

impl Default for NormGrowthConfig {
    fn default() -> Self {
        NormGrowthConfig {
            n_per_class: 50,
            dim: 8,
            separation: 0.5,
            noise: 1.0,
            feature_dim: 8,
            head_scale: 0.1,
            lp_learning_rate: 1e-3,
            ft_learning_rate: 1e-3,
            steps: 500,
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelComponent {
    Ntk,
    PreTrain,
    Ft,
}

impl KernelComponent {
    pub const ALL: [KernelComponent; 3] = [KernelComponent::Ntk, KernelComponent::PreTrain, KernelComponent::Ft];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelComponent::Ntk => "ntk",
            KernelComponent::PreTrain => "pre_train",
            KernelComponent::Ft => "ft",
        }
    }
}

/// Kernel statistics and kernel regression. `lambda = None` selects it by
/// cross-validation. When `train_kernel` is set, `kernel-reg` reads kernels
/// from CSV instead of computing them; labels come from the dataset splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub rank_rel_tol: f64,
    pub components: Vec<KernelComponent>,
    pub lambda: Option<f64>,
    pub test_fraction: f64,
    pub train_kernel: Option<PathBuf>,
    pub test_kernel: Option<PathBuf>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            rank_rel_tol: ntk_lab::ntk::DEFAULT_RANK_REL_TOL,
            components: KernelComponent::ALL.to_vec(),
            lambda: None,
            test_fraction: 0.25,
            train_kernel: None,
            test_kernel: None,
        }
    }
}

/// Temperature scaling. Without `logits`, the model is trained per
/// `[training]` on the train split and evaluated on val/test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_bins: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub logits: Option<PathBuf>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { n_bins: ntk_lab::metrics::DEFAULT_BINS, val_fraction: 0.25, test_fraction: 0.25, logits: None }
    }
}

/// Settings for the `reproduce` targets. Table targets iterate `modes`;
/// per-seed targets use seeds `seed .. seed + seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    pub modes: Vec<ntk_lab::Mode>,
    pub sweep_scales: Vec<f64>,
    pub sweep_modes: Vec<ntk_lab::Mode>,
    pub seeds: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        use ntk_lab::Mode;
        ReproduceConfig {
            modes: vec![Mode::Lp, Mode::Ft, Mode::LpFt],
            sweep_scales: SWEEP_SCALES.to_vec(),
            sweep_modes: vec![Mode::Ft, Mode::LpFt],
            seeds: 3,
        }
    }
}

/// A resolved configuration plus the canonical text used for hashing.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub canonical: String,
}

/// Loads `path` (or defaults when `None`) and applies overrides. `env` is the
/// process environment in production and a fixed list in tests.
pub fn load<I>(path: Option<&Path>, env: I, sets: &[String]) -> Result<Loaded, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let (text, origin) = match path {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".to_string()),
    };
    // Deserializing the raw text first keeps line numbers in schema errors.
    toml::from_str::<ExperimentConfig>(&text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;

    let mut overrides: Vec<(String, Vec<String>, String)> = Vec::new();
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, value) in env {
        let parts = key[ENV_PREFIX.len()..].split("__").map(|p| p.to_ascii_lowercase()).collect();
        overrides.push((format!("environment variable {key}"), parts, value));
    }
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set {s}: expected section.key=value")))?;
        overrides.push((format!("--set {key}"), key.trim().split('.').map(str::to_string).collect(), value.to_string()));
    }
    for (origin, parts, value) in &overrides {
        apply_override(&mut table, parts, value).map_err(|m| CliError::Config(format!("{origin}: {m}")))?;
        let check = toml::Value::Table(table.clone());
        check
            .try_into::<ExperimentConfig>()
            .map_err(|e| CliError::Config(format!("{origin}: {}", e.message())))?;
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{origin}: {}", e.message())))?;
    validate(&config)?;
    // The output location is not part of the experiment identity.
    let identity = ExperimentConfig { output_dir: PathBuf::new(), ..config.clone() };
    let canonical = toml::to_string(&identity).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
    Ok(Loaded { config, canonical })
}

fn apply_override(table: &mut toml::Table, parts: &[String], raw: &str) -> Result<(), String> {
    let (last, parents) = parts.split_last().ok_or("empty key")?;
    if parts.iter().any(|p| p.is_empty()) {
        return Err("empty key segment".into());
    }
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` is not a section"))?;
    }
    cur.insert(last.clone(), parse_value(raw));
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn fraction(name: &str, v: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must lie in [0, 1), got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be >= {min}, got {v}")))
    }
}

/// Range checks that serde cannot express.
pub fn validate(c: &ExperimentConfig) -> Result<(), CliError> {
    let d = &c.data;
    at_least("data.n_per_class", d.n_per_class, 1)?;
    at_least("data.num_classes", d.num_classes, 2)?;
    at_least("data.dim", d.dim, 2)?;
    positive("data.noise", d.noise)?;
    fraction("data.val_fraction", d.val_fraction)?;
    fraction("data.test_fraction", d.test_fraction)?;
    if d.val_fraction + d.test_fraction >= 1.0 {
        return Err(CliError::Config("data.val_fraction + data.test_fraction must be < 1".into()));
    }
    let m = &c.model;
    at_least("model.feature_dim", m.feature_dim, 1)?;
    if m.arch == ArchKind::Mlp && (m.hidden.is_empty() || m.hidden.contains(&0)) {
        return Err(CliError::Config("model.hidden must be non-empty with positive widths for arch = \"mlp\"".into()));
    }
    if let Some(s) = m.head_scale {
        positive("model.head_scale", s)?;
    }
    let t = &c.training;
    positive("training.learning_rate", t.learning_rate)?;
    if let Some(lr) = t.lp_learning_rate {
        positive("training.lp_learning_rate", lr)?;
    }
    if let Some(l) = t.lp_lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(CliError::Config(format!("training.lp_lambda must be finite and >= 0, got {l}")));
        }
    }
    at_least("training.lora_rank", t.lora_rank, 1)?;
    positive("training.lora_variance", t.lora_variance)?;
    let k = &c.checks;
    positive("checks.decomposition_tol", k.decomposition_tol)?;
    at_least("checks.derivative_fixtures", k.derivative_fixtures, 1)?;
    at_least("checks.orthogonal.probes", k.orthogonal.probes, 1)?;
    positive("checks.orthogonal.learning_rate", k.orthogonal.learning_rate)?;
    at_least("checks.lora.trials", k.lora.trials, ntk_lab::checks::MIN_TRIALS)?;
    at_least("checks.lora.rank", k.lora.rank, 1)?;
    at_least("checks.lora.samples", k.lora.samples, 1)?;
    if k.lora.rank > k.lora.dim {
        return Err(CliError::Config("checks.lora.rank must not exceed checks.lora.dim".into()));
    }
    at_least("checks.jl.trials", k.jl.trials, ntk_lab::checks::MIN_TRIALS)?;
    if k.jl.k.is_empty() || k.jl.epsilon.is_empty() {
        return Err(CliError::Config("checks.jl.k and checks.jl.epsilon must be non-empty".into()));
    }
    if k.jl.u.len() != k.jl.v.len() || k.jl.u.is_empty() {
        return Err(CliError::Config("checks.jl.u and checks.jl.v must be non-empty and of equal length".into()));
    }
    at_least("checks.norm_growth.seeds", k.norm_growth.seeds, 1)?;
    at_least("checks.norm_growth.steps", k.norm_growth.steps, 1)?;
    positive("kernel.rank_rel_tol", c.kernel.rank_rel_tol)?;
    fraction("kernel.test_fraction", c.kernel.test_fraction)?;
    if c.kernel.components.is_empty() {
        return Err(CliError::Config("kernel.components must be non-empty".into()));
    }
    at_least("calibration.n_bins", c.calibration.n_bins, 1)?;
    fraction("calibration.val_fraction", c.calibration.val_fraction)?;
    fraction("calibration.test_fraction", c.calibration.test_fraction)?;
    if c.calibration.val_fraction <= 0.0 || c.calibration.test_fraction <= 0.0 {
        return Err(CliError::Config("calibration.val_fraction and calibration.test_fraction must be > 0".into()));
    }
    if c.calibration.val_fraction + c.calibration.test_fraction >= 1.0 {
        return Err(CliError::Config("calibration split fractions must sum below 1".into()));
    }
    at_least("reproduce.seeds", c.reproduce.seeds, 1)?;
    let lora = |m: &ntk_lab::Mode| matches!(m, ntk_lab::Mode::Lora | ntk_lab::Mode::LpLora);
    if m.arch != ArchKind::Linear && m.path.is_none() {
        let modes = std::iter::once(&t.mode).chain(&c.reproduce.modes).chain(&c.reproduce.sweep_modes);
        if let Some(bad) = modes.into_iter().find(|m| lora(m)) {
            return Err(CliError::Config(format!("mode \"{}\" needs model.arch = \"linear\"", bad.as_str())));
        }
    }
    if let Some(&s) = c.reproduce.sweep_scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(CliError::Config(format!("reproduce.sweep_scales must be finite and > 0, got {s}")));
    }
    if c.reproduce.sweep_modes.contains(&ntk_lab::Mode::Lp) {
        return Err(CliError::Config("reproduce.sweep_modes cannot contain \"lp\"".into()));
    }
    Ok(())
}
