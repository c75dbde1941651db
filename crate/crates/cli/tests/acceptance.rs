//! Acceptance criteria 1-14. Each test prints one `PASS`/`FAIL` line to the
//! real stderr (bypassing output capture) and then asserts its verdict.
//! Tests are serialized so that the wall-clock budgets measure one criterion
//! at a time.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ntk_lab::checks::{check_decomposition, check_head_scaling, check_linearization_order, check_orthogonal_invariance};
use ntk_lab::kernel_reg;
use ntk_lab::linalg::{argmax, max_abs, rng_for, softmax};
use ntk_lab::metrics::{apply_temperature, ece_mce, fit_temperature, head_scaling_equivalence};
use ntk_lab::model::attach_lora;
use ntk_lab::ntk::{compute_decomposition, ft_ratio};
use ntk_lab::train::{fit_linear_probe, head_norm_sweep, residuals};
use ntk_lab::Mode;
use ntklab_cli::commands::run_check;
use ntklab_cli::{fixtures, CheckName, ExperimentConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!("{} criterion {n:02} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    assert!(pass, "{line}");
}

fn within(t: Instant, budget: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < budget, format!("{:.2}s of {}s", e.as_secs_f64(), budget.as_secs()))
}

const ETAS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];

#[test]
fn criterion_01_decomposition_exactness() {
    let _g = serial();
    let t = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, hidden) in [("linear", None), ("mlp", Some(vec![16]))] {
        let (ds, m) = fixtures::small(hidden, 0).unwrap();
        let r = check_decomposition(&m, ds.samples(), 1e-10).unwrap();
        pass &= r.pass && r.measured["max_abs_error"] <= 1e-10;
        detail.push(format!("{name} max|P+F-JJ^T| {:.2e}", r.measured["max_abs_error"]));
    }
    let (ok, time) = within(t, Duration::from_secs(5));
    verdict(1, "decomposition exactness", pass && ok, &format!("{}; {time}", detail.join(", ")));
}

#[test]
fn criterion_02_linearization_order() {
    let _g = serial();
    let t = Instant::now();
    let (ds, m) = fixtures::small(None, 0).unwrap();
    let r = check_linearization_order(&m, &ds, &ETAS).unwrap();
    let (lo, hi) = ntk_lab::checks::SLOPE_RANGE;
    let (ls, fs) = (r.measured["logit_slope"], r.measured["feature_slope"]);
    let in_range = |s: f64| (lo..=hi).contains(&s);
    let (ok, time) = within(t, Duration::from_secs(10));
    verdict(
        2,
        "linearization order (linear fixture)",
        in_range(ls) && in_range(fs) && ok,
        &format!("logit slope {ls:.3}, feature slope {fs:.3}, window [{lo}, {hi}]; {time}"),
    );
}

#[test]
fn criterion_03_orthogonal_invariance() {
    let _g = serial();
    let t = Instant::now();
    let c = ExperimentConfig::default();
    let o = &c.checks.orthogonal;
    assert_eq!(o.steps, 100);
    let (ds, m, probes) = fixtures::orthogonal(o, 0).unwrap();
    let r = check_orthogonal_invariance(&m, &ds, &probes, o.steps, o.learning_rate).unwrap();
    let drift = r.measured["probe_drift_over_norm_max"];
    let control = r.measured["control_drift"];
    let pass = r.pass && drift <= 1e-12 && control > 1e-3;
    let (ok, time) = within(t, Duration::from_secs(5));
    verdict(
        3,
        "orthogonal-complement invariance",
        pass && ok,
        &format!("probe drift/|x| {drift:.2e}, control drift {control:.3e}, 100 steps; {time}"),
    );
}

#[test]
fn criterion_04_lora_pre_train_component_identical() {
    let _g = serial();
    let mut worst: f64 = 0.0;
    let (ds, base) = fixtures::small(None, 0).unwrap();
    let (big_ds, big_base) = fixtures::lora(&ExperimentConfig::default().checks.lora, 0).unwrap();
    for (ds, base, ranks) in [(&ds, &base, vec![1, 4, 8]), (&big_ds, &big_base, vec![256])] {
        let p_ft = compute_decomposition(base, ds.samples()).unwrap().pre_train;
        for (i, &r) in ranks.iter().enumerate() {
            let lora = attach_lora(base, r, 1.0 / r as f64, 7, i as u64).unwrap();
            let p_lora = compute_decomposition(&lora, ds.samples()).unwrap().pre_train;
            worst = worst.max(max_abs(&(p_lora - &p_ft)));
        }
    }
    verdict(4, "LoRA pre-train component identical", worst <= 1e-14, &format!("max|P_lora - P_ft| {worst:.2e}"));
}

#[test]
fn criterion_05_lora_ft_component_concentration() {
    let _g = serial();
    let t = Instant::now();
    let c = ExperimentConfig::default();
    let l = &c.checks.lora;
    assert_eq!((l.rank, l.epsilon, l.trials), (256, 0.25, 1000));
    let r = run_check(&c, CheckName::LoraEquivalence).unwrap();
    let rate = r.violation_rate.unwrap();
    let (ok, time) = within(t, Duration::from_secs(60));
    verdict(
        5,
        "LoRA FT-component bound",
        r.pass && ok,
        &format!("violation rate {rate:.2e} vs bound {:.3}; {time}", ntk_lab::checks::jl_bound(0.25, 256)),
    );
}

#[test]
fn criterion_06_jl_lemma() {
    let _g = serial();
    let t = Instant::now();
    let c = ExperimentConfig::default();
    assert_eq!((c.checks.jl.k.clone(), c.checks.jl.epsilon.clone(), c.checks.jl.trials), (vec![100, 1000], vec![0.2, 0.3], 100_000));
    let r = run_check(&c, CheckName::JlLemma).unwrap();
    let rates: Vec<String> = r
        .measured
        .iter()
        .filter(|(k, _)| k.ends_with(".violation_rate") && !k.contains("statement"))
        .map(|(k, v)| format!("{}={v:.2e}", k.trim_end_matches(".violation_rate")))
        .collect();
    let (ok, time) = within(t, Duration::from_secs(60));
    verdict(6, "JL deviation probability", r.pass && ok, &format!("{}; {time}", rates.join(" ")));
}

#[test]
fn criterion_07_norm_derivative_identity() {
    let _g = serial();
    let c = ExperimentConfig::default();
    assert_eq!(c.checks.derivative_fixtures, 5);
    let r = run_check(&c, CheckName::NormDerivatives).unwrap();
    let worst = r
        .measured
        .iter()
        .filter(|(k, _)| k.ends_with("max_relative_error_fd"))
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    verdict(7, "norm-derivative identity", r.pass && worst <= 1e-6, &format!("max relative error {worst:.2e} over 5 fixtures"));
}

#[test]
fn criterion_08_norm_growth() {
    let _g = serial();
    let c = ExperimentConfig::default();
    assert_eq!(c.checks.norm_growth.seeds, 3);
    let r = run_check(&c, CheckName::NormGrowth).unwrap();
    let incs: Vec<String> = (0..3)
        .map(|s| format!("seed{s} LP +{:.3} FT +{:.3}", r.measured[&format!("seed{s}.lp_norm_increase")], r.measured[&format!("seed{s}.ft_norm_increase")]))
        .collect();
    verdict(8, "LP head-norm growth exceeds FT", r.pass, &incs.join(", "));
}

#[test]
fn criterion_09_head_scaling_laws() {
    let _g = serial();
    let mut pass = true;
    let (mut f_err, mut d_err): (f64, f64) = (0.0, 0.0);
    for hidden in [None, Some(vec![16])] {
        let (ds, m) = fixtures::small(hidden, 0).unwrap();
        for s in [0.1, 0.5, 3.0, 50.0] {
            let r = check_head_scaling(&m, &ds, s, 1e-2).unwrap();
            pass &= r.pass && r.measured["p_bit_identical"] == 1.0;
            f_err = f_err.max(r.measured["f_relative_error"]);
            d_err = d_err.max(r.measured["feature_delta_relative_error"]);
        }
    }
    pass &= f_err <= 1e-12 && d_err <= 1e-12;
    verdict(9, "head-scaling laws", pass, &format!("F rel err {f_err:.2e}, feature-delta rel err {d_err:.2e}, P bit-identical"));
}

#[test]
fn criterion_10_head_norm_sweep() {
    let _g = serial();
    let c = ExperimentConfig::default();
    let (ds, m) = fixtures::standard(0).unwrap();
    let scales = &c.reproduce.sweep_scales;
    let sweep = |mode| head_norm_sweep(&m, &ds, scales, &fixtures::train_config(&c, mode, ds.len())).unwrap();
    let ft = sweep(Mode::Ft);
    let lpft = sweep(Mode::LpFt);
    let at = |rows: &[ntk_lab::train::SweepRow], s: f64| rows.iter().find(|r| r.scale == s).unwrap().feature_diff;
    let directional = at(&ft, 50.0) < at(&ft, 0.1);
    let dominated = scales.iter().filter(|&&s| s >= 1.0).all(|&s| at(&lpft, s) <= at(&ft, s));
    let rows: Vec<String> = scales.iter().map(|&s| format!("{s}:{:.3}/{:.3}", at(&ft, s), at(&lpft, s))).collect();
    verdict(10, "head-norm sweep", directional && dominated, &format!("scale:FT/LP-FT diff {}", rows.join(" ")));
}

#[test]
fn criterion_11_ft_ratio_ordering() {
    let _g = serial();
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let (ds, m) = fixtures::standard(seed).unwrap();
        let ft = ft_ratio(&compute_decomposition(&m, ds.samples()).unwrap(), &residuals(&m, &ds).unwrap()).unwrap().value;
        let (lp, _) = fit_linear_probe(&m, &ds, None, seed).unwrap();
        let lpft = ft_ratio(&compute_decomposition(&lp, ds.samples()).unwrap(), &residuals(&lp, &ds).unwrap()).unwrap().value;
        pass &= lpft > ft;
        detail.push(format!("seed{seed} FT {ft:.3} LP-FT {lpft:.3}"));
    }
    verdict(11, "FT-ratio ordering", pass, &detail.join(", "));
}

/// Logits with N(0, 2^2) entries and labels drawn from `softmax(z)`.
fn generative(m: usize, c: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = rng_for(seed, 0);
    let z = DMatrix::from_fn(m, c, |_, _| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    let labels = (0..m)
        .map(|i| {
            let p = softmax(&z.row(i).transpose());
            let u: f64 = rng.random();
            let mut acc = 0.0;
            (0..c).find(|&k| {
                acc += p[k];
                u < acc
            })
            .unwrap_or(c - 1)
        })
        .collect();
    (z, labels)
}

#[test]
fn criterion_12_calibration() {
    let _g = serial();
    let p1 = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    let r1 = ece_mce(&p1, &[0, 1, 1, 0], 15).unwrap();
    let p2 = DMatrix::from_row_slice(4, 3, &[0.4, 0.3, 0.3, 0.45, 0.3, 0.25, 0.1, 0.7, 0.2, 0.05, 0.05, 0.9]);
    let r2 = ece_mce(&p2, &[0, 1, 1, 0], 2).unwrap();
    let hand_err = [(r1.ece, 0.5), (r1.mce, 0.5), (r2.ece, 0.1875), (r2.mce, 0.3)]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let (z1, y1) = generative(10_000, 4, 1);
    let t1 = fit_temperature(&z1, &y1).unwrap().temperature;
    let (z2, y2) = generative(10_000, 4, 2);
    let t2 = fit_temperature(&(z2 * 2.0), &y2).unwrap().temperature;

    let (ds, m) = fixtures::small(Some(vec![16]), 0).unwrap();
    let temps = [1e-3, 0.1, 0.5, 1.0, 2.0, 10.0, 1e3];
    let mut equiv: f64 = 0.0;
    let mut argmax_ok = true;
    let logits = m.logit_matrix(ds.samples()).unwrap();
    for &t in &temps {
        let r = head_scaling_equivalence(&m, t, ds.samples()).unwrap();
        equiv = equiv.max(r.measured["max_abs_deviation"]);
        let p = apply_temperature(&logits, t).unwrap();
        argmax_ok &= (0..ds.len()).all(|i| argmax(&p.row(i).transpose()) == argmax(&logits.row(i).transpose()));
    }
    let pass = hand_err <= 1e-12 && (t1 - 1.0).abs() <= 0.05 && (t2 - 2.0).abs() <= 0.05 && equiv <= 1e-12 && argmax_ok;
    verdict(
        12,
        "calibration",
        pass,
        &format!("hand err {hand_err:.1e}, T fits {t1:.4}/{t2:.4}, head-scaling dev {equiv:.1e}, argmax invariant {argmax_ok}"),
    );
}

#[test]
fn criterion_13_kernel_regression() {
    let _g = serial();
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.8, 0.3, -0.2, 1.0, -1.0, -0.5]);
    let g = &x * x.transpose() + DMatrix::from_element(4, 4, 1.0);
    let k = g.kronecker(&DMatrix::<f64>::identity(2, 2)) + DMatrix::identity(8, 8) * 0.1;
    let labels = [0, 0, 1, 1];
    // independent convex solve (quasi-Newton polished by exact Newton, gradient 5e-17)
    let oracle = DVector::from_vec(vec![
        0.29232934408855027,
        -0.29232934408855005,
        0.4685378841471514,
        -0.46853788414715103,
        -0.5579421554262978,
        0.5579421554262972,
        -0.2823207448330945,
        0.2823207448330948,
    ]);
    let res = kernel_reg::fit(&k, &labels, 2, 0.1).unwrap();
    let alpha_err = res.alpha.iter().zip(oracle.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let z = &k * &oracle;
    let oracle_labels: Vec<usize> = (0..4).map(|i| argmax(&z.rows(2 * i, 2).into_owned())).collect();
    let labels_match = kernel_reg::predict(&k, &res).unwrap() == oracle_labels;
    let base = kernel_reg::predict(&k, &res).unwrap();
    let invariant = [1e-3, 0.1, 2.0, 37.0, 1e3].iter().all(|&s| {
        let scaled = kernel_reg::fit(&(&k * s), &labels, 2, 0.1 * s).unwrap();
        kernel_reg::predict(&(&k * s), &scaled).unwrap() == base
    });
    verdict(
        13,
        "kernel regression",
        alpha_err <= 1e-6 && labels_match && invariant,
        &format!("max|alpha - oracle| {alpha_err:.1e}, labels match {labels_match}, scaling-invariant {invariant}"),
    );
}

const LIGHT_CONFIG: &str = r#"
seed = 3

[training]
epochs = 40

[checks]
derivative_fixtures = 2

[checks.lora]
samples = 6
dim = 24
rank = 16
trials = 100

[checks.jl]
k = [50]
epsilon = [0.3]
trials = 2000

[checks.norm_growth]
steps = 60
seeds = 1

[reproduce]
seeds = 1
sweep_scales = [0.5, 1.0, 4.0]
"#;

fn run_cli(args: &[&str], config: &Path, out: &Path) -> (i32, Vec<u8>) {
    let o = Command::new(env!("CARGO_BIN_EXE_ntklab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("NTKLAB__SEED")
        .output()
        .unwrap();
    (o.status.code().unwrap_or(-1), o.stdout)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_14_reproducibility() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("light.toml");
    std::fs::write(&config, LIGHT_CONFIG).unwrap();
    let runs: Vec<Vec<&str>> = vec![
        vec!["gen-data"],
        vec!["train"],
        vec!["ntk"],
        vec!["check"],
        vec!["kernel-reg"],
        vec!["calibrate"],
        vec!["reproduce", "norm-growth"],
        vec!["reproduce", "spectra"],
        vec!["reproduce", "norm-sweep"],
        vec!["reproduce", "feature-table"],
        vec!["reproduce", "kernel-table"],
        vec!["reproduce", "calibration-table"],
        vec!["schema"],
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (i, args) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("a{i}"));
        let b = tmp.path().join(format!("b{i}"));
        let (code_a, out_a) = run_cli(args, &config, &a);
        let (code_b, out_b) = run_cli(args, &config, &b);
        let same = if args[0] == "schema" {
            code_a == 0 && out_a == out_b
        } else {
            let (da, db) = (dir_bytes(&a), dir_bytes(&b));
            files += da.len();
            (code_a == 0 || code_a == 1) && code_a == code_b && da == db && da.iter().any(|(n, _)| n == "manifest.json")
        };
        if !same {
            differing.push(args.join(" "));
        }
    }
    verdict(
        14,
        "byte-identical reruns",
        differing.is_empty(),
        &format!("{} subcommands, {files} artifacts compared; differing: [{}]", runs.len(), differing.join(", ")),
    );
}
