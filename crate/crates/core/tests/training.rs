use ntk_lab::data::{gen_gaussian_clusters, perceptron_separable};
use ntk_lab::model::{init_model, Architecture, HeadInit};
use ntk_lab::train::*;
use ntk_lab::Error;

#[test]
fn ridge_probe_separates_separable_data() {
    let ds = gen_gaussian_clusters(15, 3, 6, 6.0, 0.5, 1).unwrap();
    let m = init_model(&Architecture::Linear, 6, 6, 3, HeadInit::Gaussian { scale: 0.3 }, 2).unwrap();
    let feats = m.feature_matrix(ds.samples()).unwrap();
    assert!(perceptron_separable(&feats, ds.labels(), 3, 1000));
    let trace = train(&m, &ds, &TrainConfig::new(Mode::Lp, 0.1, 0)).unwrap();
    assert_eq!(trace.records.last().unwrap().accuracy, 1.0);
    assert!(trace.lp_lambda.is_some());
}

#[test]
fn lp_ft_with_no_ft_steps_equals_lp() {
    let ds = gen_gaussian_clusters(6, 2, 4, 1.0, 1.0, 3).unwrap();
    let m = init_model(&Architecture::default_mlp(), 4, 5, 2, HeadInit::Gaussian { scale: 0.3 }, 4).unwrap();
    let lp = train(&m, &ds, &TrainConfig::new(Mode::Lp, 0.1, 0)).unwrap();
    let lpft = train(&m, &ds, &TrainConfig::new(Mode::LpFt, 0.1, 0)).unwrap();
    assert_eq!(lp.final_model, lpft.final_model);
}

#[test]
fn small_step_ft_descends() {
    let ds = gen_gaussian_clusters(10, 2, 4, 1.0, 1.0, 5).unwrap();
    let m = init_model(&Architecture::default_mlp(), 4, 8, 2, HeadInit::Gaussian { scale: 0.5 }, 6).unwrap();
    let trace = train(&m, &ds, &TrainConfig::new(Mode::Ft, 1e-3, 10)).unwrap();
    for w in trace.records.windows(2) {
        assert!(w[1].loss < w[0].loss);
    }
}

#[test]
fn lp_trace_never_touches_features() {
    let ds = gen_gaussian_clusters(6, 2, 4, 1.0, 1.0, 3).unwrap();
    let m = init_model(&Architecture::Linear, 4, 5, 2, HeadInit::Gaussian { scale: 0.3 }, 4).unwrap();
    let mut cfg = TrainConfig::new(Mode::Lp, 0.05, 20);
    cfg.lp_solver = LpSolver::GradientDescent;
    let trace = train(&m, &ds, &cfg).unwrap();
    assert_eq!(trace.final_model.feature, m.feature);
    assert!(trace.records.iter().all(|r| r.mean_feature_drift == 0.0));
    assert_eq!(trace.records.len(), 21);
}

#[test]
fn lora_mode_trains_adapter_and_head_only() {
    let ds = gen_gaussian_clusters(6, 2, 4, 1.0, 1.0, 3).unwrap();
    let m = init_model(&Architecture::Linear, 4, 5, 2, HeadInit::Gaussian { scale: 0.3 }, 4).unwrap();
    let mut cfg = TrainConfig::new(Mode::Lora, 0.05, 5);
    cfg.lora_rank = 2;
    let trace = train(&m, &ds, &cfg).unwrap();
    let ntk_lab::FeatureExtractor::Lora(l) = &trace.final_model.feature else { panic!("expected an adapter") };
    let ntk_lab::FeatureExtractor::Linear { weight } = &m.feature else { unreachable!() };
    assert_eq!(&l.base, weight);
    assert!(l.up.amax() > 0.0);
}

#[test]
fn two_stage_gd_lp_requires_steps() {
    let mut cfg = TrainConfig::new(Mode::LpFt, 0.1, 3);
    cfg.lp_solver = LpSolver::GradientDescent;
    assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    cfg.lp_epochs = 2;
    assert!(cfg.validate().is_ok());
}

#[test]
fn residual_rows_sum_to_zero() {
    let ds = gen_gaussian_clusters(5, 4, 6, 2.0, 1.0, 7).unwrap();
    let m = init_model(&Architecture::default_mlp(), 6, 5, 4, HeadInit::Gaussian { scale: 3.0 }, 8).unwrap();
    let d = residuals(&m, &ds).unwrap();
    for i in 0..d.nrows() {
        assert!(d.row(i).sum().abs() <= 1e-14);
        assert!(d.row(i).iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn trace_csv_has_header_and_one_row_per_step() {
    let ds = gen_gaussian_clusters(4, 2, 3, 1.0, 1.0, 3).unwrap();
    let m = init_model(&Architecture::Linear, 3, 3, 2, HeadInit::Zeros, 4).unwrap();
    let trace = train(&m, &ds, &TrainConfig::new(Mode::Ft, 0.01, 4)).unwrap();
    let csv = trace.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], TRACE_CSV_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,init,"));
}

#[test]
fn sweep_unit_scale_matches_plain_training() {
    let ds = gen_gaussian_clusters(5, 3, 6, 2.0, 1.0, 0).unwrap();
    let m = init_model(&Architecture::Mlp { hidden: vec![8] }, 6, 8, 3, HeadInit::Gaussian { scale: 0.35 }, 1).unwrap();
    for mode in [Mode::Ft, Mode::LpFt] {
        let cfg = TrainConfig::new(mode, 1e-3, 20);
        let rows = head_norm_sweep(&m, &ds, &[0.5, 1.0], &cfg).unwrap();
        assert!(rows[1].baseline && !rows[0].baseline);
        let trace = train(&m, &ds, &cfg).unwrap();
        let start = trace.lp_model.clone().unwrap_or_else(|| m.clone());
        let before = start.feature_matrix(ds.samples()).unwrap();
        let after = trace.final_model.feature_matrix(ds.samples()).unwrap();
        let diff = (0..ds.len()).map(|i| (after.row(i) - before.row(i)).norm()).sum::<f64>() / ds.len() as f64;
        assert_eq!(rows[1].feature_diff, diff);
    }
}

#[test]
fn sweep_marks_divergence_instead_of_failing() {
    let ds = gen_gaussian_clusters(5, 2, 4, 3.0, 1.0, 0).unwrap();
    let m = init_model(&Architecture::Linear, 4, 4, 2, HeadInit::Gaussian { scale: 1.0 }, 1).unwrap();
    let rows = head_norm_sweep(&m, &ds, &[1.0, 1e6], &TrainConfig::new(Mode::Ft, 10.0, 30)).unwrap();
    assert!(rows[1].diverged && rows[1].feature_diff.is_nan());
}

#[test]
fn sweep_rejects_nonpositive_scales() {
    let ds = gen_gaussian_clusters(2, 2, 3, 1.0, 1.0, 0).unwrap();
    let m = init_model(&Architecture::Linear, 3, 3, 2, HeadInit::Zeros, 1).unwrap();
    assert!(head_norm_sweep(&m, &ds, &[0.0], &TrainConfig::new(Mode::Ft, 0.1, 1)).is_err());
}
