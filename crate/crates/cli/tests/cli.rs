use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "data.n_per_class=6",
    "--set",
    "data.dim=4",
    "--set",
    "model.hidden=[6]",
    "--set",
    "model.feature_dim=5",
    "--set",
    "training.epochs=20",
];

fn ntklab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ntklab"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn run_in(out: &Path, sub: &[&str], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = sub.to_vec();
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    ntklab(&args, &[])
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn unknown_config_key_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[training]\nepochz = 3\n").unwrap();
    let out = tmp.path().join("out");
    let o = ntklab(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("epochz"));
    assert!(!out.exists());
}

#[test]
fn bad_env_override_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = ntklab(&["gen-data", "--out", out.to_str().unwrap()], &[("NTKLAB__data__bogus", "1")]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("NTKLAB__data__bogus"));
    assert!(!out.exists());
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(code(&ntklab(&["check", "--only", "nonsense"], &[])), 2);
    assert_eq!(code(&ntklab(&["frobnicate"], &[])), 2);
}

#[test]
fn schema_is_json_and_closed() {
    let o = ntklab(&["schema"], &[]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["additionalProperties"], Value::Bool(false));
    for section in ["data", "model", "training", "checks", "kernel", "calibration", "reproduce"] {
        assert!(v["properties"][section].is_object(), "missing {section}");
    }
}

#[test]
fn gen_data_manifest_lists_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), &["gen-data"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(tmp.path());
    assert_eq!(m["complete"], Value::Bool(true));
    assert_eq!(m["subcommand"], "gen-data");
    let files = m["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"dataset.txt") && names.contains(&"config.toml"), "{names:?}");
    for f in files {
        let bytes = fs::read(tmp.path().join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
        assert_eq!(f["sha256"].as_str().unwrap(), ntklab_cli::artifacts::sha256_hex(&bytes));
    }
    let ds = fs::read_to_string(tmp.path().join("dataset.txt")).unwrap();
    assert_eq!(ds.lines().filter(|l| l.split_whitespace().nth(1) == Some("train")).count(), 18);
}

#[test]
fn passing_and_failing_checks_set_the_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = tmp.path().join("ok");
    let o = run_in(&ok, &["check", "--only", "decomposition"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ok.join("check_decomposition.json").exists());
    assert!(!ok.join("check_jl_lemma.json").exists());

    let bad = tmp.path().join("bad");
    let o = run_in(&bad, &["check", "--only", "decomposition"], &["--set", "checks.decomposition_tol=1e-300"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(bad.join("check_decomposition.json")).unwrap()).unwrap();
    assert_eq!(r["pass"], Value::Bool(false));
    assert_eq!(manifest(&bad)["complete"], Value::Bool(true));
}

#[test]
fn train_then_ntk_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let tr = tmp.path().join("train");
    let o = run_in(&tr, &["train"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["model_init.txt", "model_final.txt", "trace.csv", "summary.json"] {
        assert!(tr.join(f).exists(), "missing {f}");
    }
    let trace = fs::read_to_string(tr.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,phase,loss"));
    assert_eq!(trace.lines().count(), 22);

    let nk = tmp.path().join("ntk");
    let ckpt = format!("model.path=\"{}\"", tr.join("model_final.txt").display());
    let o = run_in(&nk, &["ntk"], &["--set", &ckpt]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(nk.join("stats.json").exists());
}

#[test]
fn kernel_reg_reads_kernel_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let split = ["--set", "data.n_per_class=4", "--set", "data.test_fraction=0.25"];
    let g = tmp.path().join("gen");
    let o = run_in(&g, &["gen-data"], &split);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = fs::read_to_string(g.join("dataset.txt")).unwrap();
    let count = |split: &str| ds.lines().filter(|l| l.split_whitespace().nth(1) == Some(split)).count();
    // Kernel rows and columns run over (sample, class) pairs.
    let (n_train, n_test) = (3 * count("train"), 3 * count("test"));
    assert!(n_test > 0 && n_train > 0, "{ds}");

    let header = |n: usize| (0..n).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",");
    let mut ktr = format!("{}\n", header(n_train));
    for i in 0..n_train {
        let row: Vec<String> = (0..n_train).map(|j| if i == j { "100.0".into() } else { "0.0".into() }).collect();
        ktr.push_str(&format!("{}\n", row.join(",")));
    }
    let mut kte = format!("{}\n", header(n_train));
    for _ in 0..n_test {
        kte.push_str(&format!("{}\n", vec!["0.0"; n_train].join(",")));
    }
    fs::write(tmp.path().join("ktr.csv"), ktr).unwrap();
    fs::write(tmp.path().join("kte.csv"), kte).unwrap();

    let out = tmp.path().join("kr");
    let a = format!("kernel.train_kernel=\"{}\"", tmp.path().join("ktr.csv").display());
    let b = format!("kernel.test_kernel=\"{}\"", tmp.path().join("kte.csv").display());
    let o = run_in(&out, &["kernel-reg"], &[split[0], split[1], split[2], split[3], "--set", &a, "--set", &b, "--set", "kernel.lambda=1e-6"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("kernel_reg.json")).unwrap()).unwrap();
    let e = &v[0];
    assert_eq!(e["component"], "file");
    assert_eq!(e["result"]["train_accuracy"].as_f64().unwrap(), 1.0);
}

#[test]
fn calibrate_reads_logits_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("# hand-made\nsplit,label,logit_0,logit_1\n");
    for (split, label, a, b) in [
        ("val", 0, 2.0, 0.0),
        ("val", 1, 0.0, 1.5),
        ("val", 0, 0.3, 0.1),
        ("val", 1, 1.0, 0.0),
        ("test", 0, 1.0, -1.0),
        ("test", 1, -0.5, 0.5),
        ("train", 1, 9.0, 9.0),
    ] {
        csv.push_str(&format!("{split},{label},{a},{b}\n"));
    }
    let path = tmp.path().join("logits.csv");
    fs::write(&path, csv).unwrap();
    let out = tmp.path().join("cal");
    let set = format!("calibration.logits=\"{}\"", path.display());
    let o = run_in(&out, &["calibrate"], &["--set", &set]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    let text = v.to_string();
    assert!(text.contains("temperature"), "{text}");

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "split,label,logit_0,logit_1\nval,0,1.0,x\ntest,0,1,1\n").unwrap();
    let set = format!("calibration.logits=\"{}\"", bad.display());
    let o = run_in(&tmp.path().join("cal2"), &["calibrate"], &["--set", &set]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(manifest(&tmp.path().join("cal2"))["complete"], Value::Bool(false));
}

#[test]
fn reruns_into_different_dirs_match() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run_in(&a, &["ntk"], &[])), 0);
    assert_eq!(code(&run_in(&b, &["ntk"], &[])), 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}
