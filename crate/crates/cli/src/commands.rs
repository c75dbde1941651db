//! Subcommand implementations. Each writes into an artifact directory and
//! returns the lines to print.

use std::path::Path;

use nalgebra::DMatrix;
use ntk_lab::checks::{
    check_decomposition, check_jl_lemma, check_linearization_order, check_lora_equivalence, check_norm_derivatives,
    check_norm_growth, check_orthogonal_invariance, CheckReport, JlCheckConfig, LoraCheckConfig,
};
use ntk_lab::data::dataset_to_string;
use ntk_lab::kernel_reg::{self, KernelRegressionResult};
use ntk_lab::metrics::{feature_change_stats, fdr, temperature_scaling_summary, FeatureChangeStats};
use ntk_lab::model::model_to_string;
use ntk_lab::ntk::{compute_cross_decomposition, compute_decomposition, ft_ratio, kernel_stats, min_eigenvalue, KernelStats};
use ntk_lab::train::{fit_linear_probe, head_norm_sweep, residuals, train, LpSolver};
use ntk_lab::{Dataset, Mode, ModelState, Split, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{fmt_f64, parse_f64, read_csv, read_matrix_csv, ArtifactDir, Manifest};
use crate::config::{CheckName, ExperimentConfig, KernelComponent, Loaded};
use crate::error::CliError;
use crate::fixtures;

pub const ANALOG_NOTE: &str =
    "desk-scale property analog on synthetic data; values are not comparable to large-model benchmark numbers";

/// Result of a subcommand: printed lines, the manifest, and the check verdicts.
#[derive(Debug)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub manifest: Manifest,
    pub failed_checks: usize,
    pub total_checks: usize,
}

/// Runs `body` against a fresh artifact directory. On error the manifest is
/// still written, marked incomplete.
fn with_dir<F>(loaded: &Loaded, out: &Path, name: &str, body: F) -> Result<Outcome, CliError>
where
    F: FnOnce(&ExperimentConfig, &mut ArtifactDir, &mut Vec<String>) -> Result<(usize, usize), CliError>,
{
    let mut dir = ArtifactDir::create(out, name, loaded.config.seed, &loaded.canonical)?;
    let mut lines = Vec::new();
    match body(&loaded.config, &mut dir, &mut lines) {
        Ok((failed, total)) => {
            let manifest = dir.finish(true)?;
            Ok(Outcome { lines, manifest, failed_checks: failed, total_checks: total })
        }
        Err(e) => {
            dir.finish(false)?;
            Err(e)
        }
    }
}

fn kernel_of(decomp: &ntk_lab::KernelDecomposition, which: KernelComponent) -> DMatrix<f64> {
    match which {
        KernelComponent::Ntk => decomp.ntk(),
        KernelComponent::PreTrain => decomp.pre_train.clone(),
        KernelComponent::Ft => decomp.ft.clone(),
    }
}

fn csv_comments(title: &str) -> Vec<String> {
    vec![format!("ntklab {title}"), ANALOG_NOTE.to_string()]
}

// ---- gen-data

pub fn gen_data(loaded: &Loaded, out: &Path) -> Result<Outcome, CliError> {
    with_dir(loaded, out, "gen-data", |c, dir, lines| {
        let ds = fixtures::dataset(c)?;
        dir.write("dataset.txt", dataset_to_string(&ds).as_bytes())?;
        lines.push(format!("dataset: {} samples, d = {}, C = {}", ds.len(), ds.dim(), ds.num_classes()));
        Ok((0, 0))
    })
}

// ---- train

#[derive(Serialize)]
struct TrainSummary {
    mode: Mode,
    steps: usize,
    final_loss: f64,
    final_accuracy: f64,
    lp_lambda: Option<f64>,
    v_norm_init: f64,
    v_norm_final: f64,
    feature_change: FeatureChangeStats,
    fdr_init: f64,
    error: Option<String>,
}

pub fn train_cmd(loaded: &Loaded, out: &Path) -> Result<Outcome, CliError> {
    with_dir(loaded, out, "train", |c, dir, lines| {
        let ds = fixtures::dataset(c)?;
        let tr = fixtures::split(&ds, Split::Train)?;
        let model = fixtures::model(c, &ds)?;
        let cfg = fixtures::train_config(c, c.training.mode, tr.len());
        dir.write("model_init.txt", model_to_string(&model).as_bytes())?;
        let (trace, error) = match train(&model, &tr, &cfg) {
            Ok(t) => (t, None),
            Err(f) => (f.partial, Some(f.error)),
        };
        dir.write("trace.csv", trace.to_csv().as_bytes())?;
        dir.write("model_final.txt", model_to_string(&trace.final_model).as_bytes())?;
        if let Some(lp) = &trace.lp_model {
            dir.write("model_lp.txt", model_to_string(lp).as_bytes())?;
        }
        let before = model.feature_matrix(tr.samples())?;
        let after = trace.final_model.feature_matrix(tr.samples())?;
        let last = trace.records.last();
        let summary = TrainSummary {
            mode: cfg.mode,
            steps: last.map_or(0, |r| r.step),
            final_loss: last.map_or(f64::NAN, |r| r.loss),
            final_accuracy: last.map_or(f64::NAN, |r| r.accuracy),
            lp_lambda: trace.lp_lambda,
            v_norm_init: model.head.weight.norm(),
            v_norm_final: trace.final_model.head.weight.norm(),
            feature_change: feature_change_stats(&before, &after, tr.labels())?,
            fdr_init: fdr(&before, tr.labels())?,
            error: error.as_ref().map(|e| e.to_string()),
        };
        dir.write_json("summary.json", &summary)?;
        if let Some(e) = error {
            return Err(e.into());
        }
        lines.push(format!(
            "{}: loss {:.6} accuracy {:.4} |V| {:.4} -> {:.4}",
            cfg.mode.as_str(),
            summary.final_loss,
            summary.final_accuracy,
            summary.v_norm_init,
            summary.v_norm_final
        ));
        Ok((0, 0))
    })
}

// ---- ntk

#[derive(Serialize)]
struct ComponentStats {
    component: KernelComponent,
    stats: KernelStats,
}

#[derive(Serialize)]
struct NtkSummary {
    anchor: String,
    samples: usize,
    num_classes: usize,
    components: Vec<ComponentStats>,
    ft_ratio: f64,
    min_eigenvalue_ntk: f64,
}

pub fn ntk_cmd(loaded: &Loaded, out: &Path) -> Result<Outcome, CliError> {
    with_dir(loaded, out, "ntk", |c, dir, lines| {
        let ds = fixtures::dataset(c)?;
        let tr = fixtures::split(&ds, Split::Train)?;
        let model = fixtures::model(c, &ds)?;
        let decomp = compute_decomposition(&model, tr.samples())?;
        let mut components = Vec::new();
        for &which in &c.kernel.components {
            let k = kernel_of(&decomp, which);
            let comments = vec![
                format!("ntklab kernel {} over train samples; row i*C + k is sample i, output k", which.as_str()),
                format!("anchor {}", decomp.anchor),
            ];
            dir.write_matrix_csv(&format!("kernel_{}.csv", which.as_str()), &comments, &k)?;
            let stats = kernel_stats(&k, c.kernel.rank_rel_tol)?;
            lines.push(format!("{}: rank {} frobenius {:.6e}", which.as_str(), stats.rank, stats.frobenius_norm));
            components.push(ComponentStats { component: which, stats });
        }
        let ratio = ft_ratio(&decomp, &residuals(&model, &tr)?)?;
        lines.push(format!("ft_ratio {:.6}", ratio.value));
        let summary = NtkSummary {
            anchor: decomp.anchor.clone(),
            samples: tr.len(),
            num_classes: tr.num_classes(),
            components,
            ft_ratio: ratio.value,
            min_eigenvalue_ntk: min_eigenvalue(&decomp.ntk()),
        };
        dir.write_json("stats.json", &summary)?;
        Ok((0, 0))
    })
}

// ---- check

/// Runs one named check with its configured fixture.
pub fn run_check(c: &ExperimentConfig, name: CheckName) -> Result<CheckReport, CliError> {
    let k = &c.checks;
    let report = match name {
        CheckName::Decomposition => {
            let ds = fixtures::dataset(c)?;
            let tr = fixtures::split(&ds, Split::Train)?;
            check_decomposition(&fixtures::model(c, &ds)?, tr.samples(), k.decomposition_tol)?
        }
        CheckName::LinearizationOrder => {
            let ds = fixtures::dataset(c)?;
            let tr = fixtures::split(&ds, Split::Train)?;
            check_linearization_order(&fixtures::model(c, &ds)?, &tr, &k.linearization_etas)?
        }
        CheckName::NormDerivatives => {
            let parts = (0..k.derivative_fixtures as u64)
                .map(|i| {
                    let ci = ExperimentConfig { seed: c.seed + i, ..c.clone() };
                    let ds = fixtures::dataset(&ci)?;
                    let tr = fixtures::split(&ds, Split::Train)?;
                    Ok((format!("seed{}", ci.seed), check_norm_derivatives(&fixtures::model(&ci, &ds)?, &tr)?))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            CheckReport::combine("norm_derivatives", &parts)
        }
        CheckName::OrthogonalInvariance => {
            let o = &k.orthogonal;
            let (ds, m, probes) = fixtures::orthogonal(o, c.seed)?;
            check_orthogonal_invariance(&m, &ds, &probes, o.steps, o.learning_rate)?
        }
        CheckName::LoraEquivalence => {
            let l = &k.lora;
            let (ds, base) = fixtures::lora(l, c.seed)?;
            let cfg = LoraCheckConfig {
                rank: l.rank,
                variance: l.variance.unwrap_or(1.0 / l.rank as f64),
                epsilon: l.epsilon,
                trials: l.trials,
                seed: c.seed,
                norm_bound: None,
            };
            check_lora_equivalence(&base, &ds, &cfg)?
        }
        CheckName::JlLemma => {
            let j = &k.jl;
            let combos: Vec<(usize, f64)> = j.k.iter().flat_map(|&kk| j.epsilon.iter().map(move |&e| (kk, e))).collect();
            let parts = combos
                .par_iter()
                .map(|&(kk, eps)| {
                    let cfg = JlCheckConfig { k: kk, epsilon: eps, trials: j.trials, u: j.u.clone(), v: j.v.clone(), seed: c.seed, norm_bound: None };
                    Ok((format!("k{kk}_eps{eps}"), check_jl_lemma(&cfg)?))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            CheckReport::combine("jl_lemma", &parts)
        }
        CheckName::NormGrowth => {
            let g = &k.norm_growth;
            let parts = (0..g.seeds as u64)
                .into_par_iter()
                .map(|i| {
                    let seed = c.seed + i;
                    let (ds, m) = fixtures::norm_growth(g, seed)?;
                    Ok((format!("seed{seed}"), check_norm_growth(&m, &ds, g.lp_learning_rate, g.ft_learning_rate, g.steps)?))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            CheckReport::combine("norm_growth", &parts)
        }
    };
    Ok(report)
}

pub fn check_cmd(loaded: &Loaded, out: &Path, only: Option<&[CheckName]>) -> Result<Outcome, CliError> {
    let names: Vec<CheckName> = only.map_or_else(|| loaded.config.checks.suite.clone(), <[CheckName]>::to_vec);
    if names.is_empty() {
        return Err(CliError::Config("no checks selected".into()));
    }
    with_dir(loaded, out, "check", |c, dir, lines| {
        let mut failed = 0;
        for &name in &names {
            let report = run_check(c, name)?;
            if !report.pass {
                failed += 1;
            }
            dir.write(&format!("check_{}.json", name.as_str()), format!("{}\n", report.to_json()).as_bytes())?;
            lines.push(format!("{} {}", if report.pass { "PASS" } else { "FAIL" }, name.as_str()));
        }
        Ok((failed, names.len()))
    })
}

// ---- kernel-reg

#[derive(Serialize)]
struct KernelRegEntry {
    component: String,
    result: KernelRegressionResult,
    train_stats: KernelStats,
}

fn fit_kernel(k_train: &DMatrix<f64>, labels: &[usize], classes: usize, lambda: Option<f64>, seed: u64) -> Result<KernelRegressionResult, CliError> {
    Ok(match lambda {
        Some(l) => kernel_reg::fit(k_train, labels, classes, l)?,
        None => kernel_reg::fit_cv(k_train, labels, classes, seed)?,
    })
}

/// Train/test kernels of every configured component at `model`.
fn kernel_regressions(c: &ExperimentConfig, model: &ModelState, tr: &Dataset, te: &Dataset) -> Result<Vec<KernelRegEntry>, CliError> {
    let train_d = compute_decomposition(model, tr.samples())?;
    let test_d = compute_cross_decomposition(model, te.samples(), tr.samples())?;
    c.kernel
        .components
        .par_iter()
        .map(|&which| {
            let k_train = kernel_of(&train_d, which);
            let mut result = fit_kernel(&k_train, tr.labels(), tr.num_classes(), c.kernel.lambda, c.seed)?;
            kernel_reg::evaluate(&kernel_of(&test_d, which), te.labels(), &mut result)?;
            Ok(KernelRegEntry { component: which.as_str().into(), train_stats: kernel_stats(&k_train, c.kernel.rank_rel_tol)?, result })
        })
        .collect()
}

/// Train and test splits, assigning `kernel.test_fraction` when `[data]` gave none.
fn kernel_splits(c: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset), CliError> {
    let mut ds = fixtures::dataset(c)?;
    if ds.subset(Split::Test).is_none() {
        ds = fixtures::dataset_with_splits(c, 0.0, c.kernel.test_fraction)?;
    }
    let tr = fixtures::split(&ds, Split::Train)?;
    let te = fixtures::split(&ds, Split::Test)?;
    Ok((ds, tr, te))
}

pub fn kernel_reg_cmd(loaded: &Loaded, out: &Path) -> Result<Outcome, CliError> {
    with_dir(loaded, out, "kernel-reg", |c, dir, lines| {
        let (ds, tr, te) = kernel_splits(c)?;
        let entries = match &c.kernel.train_kernel {
            Some(path) => {
                let k_train = read_matrix_csv(path)?;
                let mut result = fit_kernel(&k_train, tr.labels(), tr.num_classes(), c.kernel.lambda, c.seed)?;
                if let Some(tp) = &c.kernel.test_kernel {
                    kernel_reg::evaluate(&read_matrix_csv(tp)?, te.labels(), &mut result)?;
                }
                vec![KernelRegEntry { component: "file".into(), train_stats: kernel_stats(&k_train, c.kernel.rank_rel_tol)?, result }]
            }
            None => kernel_regressions(c, &fixtures::model(c, &ds)?, &tr, &te)?,
        };
        for e in &entries {
            lines.push(format!(
                "{}: lambda {} train {:.4} test {}",
                e.component,
                fmt_f64(e.result.lambda),
                e.result.train_accuracy,
                e.result.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
            ));
        }
        dir.write_json("kernel_reg.json", &entries)?;
        Ok((0, 0))
    })
}

// ---- calibrate

fn logits_rows(ds: &Dataset, logits: &DMatrix<f64>) -> Vec<Vec<String>> {
    (0..ds.len())
        .map(|i| {
            let mut row = vec![ds.splits()[i].as_str().to_string(), ds.labels()[i].to_string()];
            row.extend(logits.row(i).iter().map(|&v| fmt_f64(v)));
            row
        })
        .collect()
}

type Block = (DMatrix<f64>, Vec<usize>);

/// Reads `split,label,logit_0..` rows and returns the val and test blocks.
fn read_logits(path: &Path) -> Result<(Block, Block), CliError> {
    let (header, rows) = read_csv(path)?;
    if header.len() < 4 || header[0] != "split" || header[1] != "label" {
        return Err(CliError::Io(format!("{}: expected header split,label,logit_0,logit_1,...", path.display())));
    }
    let c = header.len() - 2;
    let mut blocks: [(Vec<f64>, Vec<usize>); 2] = Default::default();
    for (i, r) in rows.iter().enumerate() {
        let slot = match r[0].as_str() {
            "val" => 0,
            "test" => 1,
            _ => continue,
        };
        let label: usize = r[1]
            .trim()
            .parse()
            .map_err(|_| CliError::Io(format!("{}: data row {}: bad label `{}`", path.display(), i + 1, r[1])))?;
        blocks[slot].1.push(label);
        for f in &r[2..] {
            blocks[slot].0.push(parse_f64(path, i, f)?);
        }
    }
    let [(vl, vy), (tl, ty)] = blocks;
    if vy.is_empty() || ty.is_empty() {
        return Err(CliError::Io(format!("{}: needs both val and test rows", path.display())));
    }
    Ok(((DMatrix::from_row_slice(vy.len(), c, &vl), vy), (DMatrix::from_row_slice(ty.len(), c, &tl), ty)))
}

/// Trains per `[training]` on a fresh train/val/test split and returns the
/// dataset and the logits of every sample.
fn trained_logits(c: &ExperimentConfig, mode: Mode) -> Result<(Dataset, DMatrix<f64>), CliError> {
    let ds = fixtures::dataset_with_splits(c, c.calibration.val_fraction, c.calibration.test_fraction)?;
    let tr = fixtures::split(&ds, Split::Train)?;
    let model = fixtures::model(c, &ds)?;
    let trace = train(&model, &tr, &fixtures::train_config(c, mode, tr.len())).map_err(ntk_lab::Error::from)?;
    let logits = trace.final_model.logit_matrix(ds.samples())?;
    Ok((ds, logits))
}

fn blocks_of(ds: &Dataset, logits: &DMatrix<f64>) -> Result<(Block, Block), CliError> {
    let pick = |s: Split| -> Result<Block, CliError> {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.splits()[i] == s).collect();
        if idx.is_empty() {
            return Err(CliError::Runtime(ntk_lab::Error::Precondition(format!("no `{}` samples", s.as_str()))));
        }
        Ok((logits.select_rows(idx.iter()), idx.iter().map(|&i| ds.labels()[i]).collect()))
    };
    Ok((pick(Split::Val)?, pick(Split::Test)?))
}

pub fn calibrate_cmd(loaded: &Loaded, out: &Path) -> Result<Outcome, CliError> {
    with_dir(loaded, out, "calibrate", |c, dir, lines| {
        let ((vl, vy), (tl, ty)) = match &c.calibration.logits {
            Some(p) => read_logits(p)?,
            None => {
                let (ds, logits) = trained_logits(c, c.training.mode)?;
                let header: Vec<String> = ["split".to_string(), "label".to_string()]
                    .into_iter()
                    .chain((0..logits.ncols()).map(|k| format!("logit_{k}")))
                    .collect();
                let header: Vec<&str> = header.iter().map(String::as_str).collect();
                dir.write_csv("logits.csv", &csv_comments("logits of the trained model"), &header, &logits_rows(&ds, &logits))?;
                blocks_of(&ds, &logits)?
            }
        };
        let s = temperature_scaling_summary(&vl, &vy, &tl, &ty, c.calibration.n_bins)?;
        lines.push(format!(
            "T {:.4}: ECE {:.4} -> {:.4}, MCE {:.4} -> {:.4}",
            s.temperature, s.without.ece, s.with.ece, s.without.mce, s.with.mce
        ));
        dir.write_json("calibration.json", &s)?;
        Ok((0, 0))
    })
}

// ---- reproduce

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Target {
    NormGrowth,
    Spectra,
    NormSweep,
    FeatureTable,
    KernelTable,
    CalibrationTable,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::NormGrowth => "norm-growth",
            Target::Spectra => "spectra",
            Target::NormSweep => "norm-sweep",
            Target::FeatureTable => "feature-table",
            Target::KernelTable => "kernel-table",
            Target::CalibrationTable => "calibration-table",
        }
    }

    fn file(self) -> String {
        format!("{}.csv", self.as_str().replace('-', "_"))
    }
}

fn seeds(c: &ExperimentConfig) -> Vec<u64> {
    (0..c.reproduce.seeds as u64).map(|i| c.seed + i).collect()
}

fn at_seed(c: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, ..c.clone() }
}

fn f(v: f64) -> String {
    fmt_f64(v)
}

/// LP (gradient descent) and FT head-norm trajectories on the norm-growth fixture.
fn norm_growth_rows(c: &ExperimentConfig) -> Result<Vec<Vec<String>>, CliError> {
    let g = &c.checks.norm_growth;
    let per_seed = seeds(c)
        .into_par_iter()
        .map(|seed| {
            let (ds, m) = fixtures::norm_growth(g, seed)?;
            let mut lp = TrainConfig::new(Mode::Lp, g.lp_learning_rate, g.steps);
            lp.lp_solver = LpSolver::GradientDescent;
            lp.seed = seed;
            let mut ft = TrainConfig::new(Mode::Ft, g.ft_learning_rate, g.steps);
            ft.seed = seed;
            let lp_trace = train(&m, &ds, &lp).map_err(ntk_lab::Error::from)?;
            let ft_trace = train(&m, &ds, &ft).map_err(ntk_lab::Error::from)?;
            let lp_norms: Vec<f64> = lp_trace.records.iter().map(|r| r.v_norm).collect();
            let ft_norms: Vec<f64> = ft_trace.records.iter().map(|r| r.v_norm).collect();
            Ok(lp_norms
                .iter()
                .zip(&ft_norms)
                .enumerate()
                .map(|(step, (a, b))| vec![seed.to_string(), step.to_string(), f(*a), f(*b)])
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Initial model (FT anchor) and the model after ridge LP (LP-FT anchor).
fn anchors(c: &ExperimentConfig, model: &ModelState, tr: &Dataset) -> Result<Vec<(&'static str, ModelState)>, CliError> {
    let (lp, _) = fit_linear_probe(model, tr, c.training.lp_lambda, c.seed)?;
    Ok(vec![("ft", model.clone()), ("lp-ft", lp)])
}

fn spectra_rows(c: &ExperimentConfig) -> Result<Vec<Vec<String>>, CliError> {
    let ds = fixtures::dataset(c)?;
    let tr = fixtures::split(&ds, Split::Train)?;
    let model = fixtures::model(c, &ds)?;
    let mut rows = Vec::new();
    for (anchor, m) in anchors(c, &model, &tr)? {
        let decomp = compute_decomposition(&m, tr.samples())?;
        for which in KernelComponent::ALL {
            let stats = kernel_stats(&kernel_of(&decomp, which), c.kernel.rank_rel_tol)?;
            for (i, v) in stats.normalized_singular_values.iter().enumerate() {
                rows.push(vec![anchor.to_string(), which.as_str().to_string(), i.to_string(), f(*v)]);
            }
        }
    }
    Ok(rows)
}

fn norm_sweep_rows(c: &ExperimentConfig) -> Result<Vec<Vec<String>>, CliError> {
    let ds = fixtures::dataset(c)?;
    let tr = fixtures::split(&ds, Split::Train)?;
    let model = fixtures::model(c, &ds)?;
    let per_mode = c
        .reproduce
        .sweep_modes
        .par_iter()
        .map(|&mode| {
            let cfg = fixtures::train_config(c, mode, tr.len());
            let rows = head_norm_sweep(&model, &tr, &c.reproduce.sweep_scales, &cfg)?;
            Ok(rows
                .into_iter()
                .map(|r| vec![mode.as_str().to_string(), f(r.scale), f(r.feature_diff), r.diverged.to_string(), r.baseline.to_string()])
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(per_mode.into_iter().flatten().collect())
}

fn feature_table_rows(c: &ExperimentConfig) -> Result<Vec<Vec<String>>, CliError> {
    let per_seed = seeds(c)
        .into_par_iter()
        .map(|seed| {
            let cs = at_seed(c, seed);
            let ds = fixtures::dataset(&cs)?;
            let tr = fixtures::split(&ds, Split::Train)?;
            let model = fixtures::model(&cs, &ds)?;
            let before = model.feature_matrix(tr.samples())?;
            let fdr_before = fdr(&before, tr.labels())?;
            cs.reproduce
                .modes
                .iter()
                .map(|&mode| {
                    let trace = train(&model, &tr, &fixtures::train_config(&cs, mode, tr.len())).map_err(ntk_lab::Error::from)?;
                    let after = trace.final_model.feature_matrix(tr.samples())?;
                    let s = feature_change_stats(&before, &after, tr.labels())?;
                    let last = trace.records.last().expect("trace has the initial record");
                    Ok(vec![
                        seed.to_string(),
                        mode.as_str().to_string(),
                        f(s.mean_cosine_similarity),
                        f(s.mean_diff_norm),
                        f(fdr_before),
                        f(s.fdr),
                        f(model.head.weight.norm()),
                        f(trace.final_model.head.weight.norm()),
                        f(last.accuracy),
                    ])
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn kernel_table_rows(c: &ExperimentConfig) -> Result<Vec<Vec<String>>, CliError> {
    let per_seed = seeds(c)
        .into_par_iter()
        .map(|seed| {
            let cs = at_seed(c, seed);
            let (ds, tr, te) = kernel_splits(&cs)?;
            let model = fixtures::model(&cs, &ds)?;
            let mut rows = Vec::new();
            for (anchor, m) in anchors(&cs, &model, &tr)? {
                let ratio = ft_ratio(&compute_decomposition(&m, tr.samples())?, &residuals(&m, &tr)?)?;
                for e in kernel_regressions(&cs, &m, &tr, &te)? {
                    rows.push(vec![
                        seed.to_string(),
                        anchor.to_string(),
                        e.component.clone(),
                        e.train_stats.rank.to_string(),
                        f(e.train_stats.frobenius_norm),
                        f(e.result.lambda),
                        f(e.result.train_accuracy),
                        f(e.result.test_accuracy.unwrap_or(f64::NAN)),
                        f(ratio.value),
                    ]);
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn calibration_table_rows(c: &ExperimentConfig) -> Result<Vec<Vec<String>>, CliError> {
    let per_seed = seeds(c)
        .into_par_iter()
        .map(|seed| {
            let cs = at_seed(c, seed);
            cs.reproduce
                .modes
                .iter()
                .map(|&mode| {
                    let (ds, logits) = trained_logits(&cs, mode)?;
                    let ((vl, vy), (tl, ty)) = blocks_of(&ds, &logits)?;
                    let s = temperature_scaling_summary(&vl, &vy, &tl, &ty, cs.calibration.n_bins)?;
                    Ok(vec![
                        seed.to_string(),
                        mode.as_str().to_string(),
                        f(s.temperature),
                        f(s.without.ece),
                        f(s.with.ece),
                        f(s.ece_improvement),
                        f(s.without.mce),
                        f(s.with.mce),
                        f(s.mce_improvement),
                        f(s.with.accuracy),
                    ])
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Column names of each reproduce table.
pub fn target_header(t: Target) -> &'static [&'static str] {
    match t {
        Target::NormGrowth => &["seed", "step", "lp_v_norm", "ft_v_norm"],
        Target::Spectra => &["anchor", "component", "index", "normalized_singular_value"],
        Target::NormSweep => &["mode", "scale", "feature_diff", "diverged", "baseline"],
        Target::FeatureTable => &[
            "seed",
            "mode",
            "cosine_similarity",
            "diff_norm",
            "fdr_before",
            "fdr_after",
            "v_norm_init",
            "v_norm_final",
            "train_accuracy",
        ],
        Target::KernelTable => &[
            "seed",
            "anchor",
            "component",
            "rank",
            "frobenius_norm",
            "lambda",
            "train_accuracy",
            "test_accuracy",
            "ft_ratio",
        ],
        Target::CalibrationTable => &[
            "seed",
            "mode",
            "temperature",
            "ece_without",
            "ece_with",
            "ece_improvement",
            "mce_without",
            "mce_with",
            "mce_improvement",
            "test_accuracy",
        ],
    }
}

pub fn reproduce_cmd(loaded: &Loaded, out: &Path, target: Target) -> Result<Outcome, CliError> {
    let name = format!("reproduce {}", target.as_str());
    with_dir(loaded, out, &name, |c, dir, lines| {
        let rows = match target {
            Target::NormGrowth => norm_growth_rows(c)?,
            Target::Spectra => spectra_rows(c)?,
            Target::NormSweep => norm_sweep_rows(c)?,
            Target::FeatureTable => feature_table_rows(c)?,
            Target::KernelTable => kernel_table_rows(c)?,
            Target::CalibrationTable => calibration_table_rows(c)?,
        };
        let path = dir.write_csv(&target.file(), &csv_comments(&name), target_header(target), &rows)?;
        lines.push(format!("{}: {} rows -> {}", target.as_str(), rows.len(), path.display()));
        Ok((0, 0))
    })
}

