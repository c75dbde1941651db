use ntk_lab::data::{gen_gaussian_clusters, load_dataset, save_dataset};
use ntk_lab::model::{attach_lora, init_model, load_model, model_to_string, parse_model, save_model, Architecture, HeadInit};
use ntk_lab::Error;
use std::path::Path;

#[test]
fn dataset_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    let mut ds = gen_gaussian_clusters(7, 3, 5, 1.3, 0.9, 21).unwrap();
    ds.assign_splits(0.2, 0.2, 3).unwrap();
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), ntk_lab::data::dataset_to_string(&back));
}

#[test]
fn checkpoint_round_trip_for_each_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let base = init_model(&Architecture::Linear, 4, 5, 3, HeadInit::Gaussian { scale: 0.3 }, 1).unwrap();
    let models = [
        base.clone(),
        init_model(&Architecture::Mlp { hidden: vec![6, 3] }, 4, 5, 3, HeadInit::Gaussian { scale: 0.3 }, 2).unwrap(),
        attach_lora(&base, 2, 0.25, 3, 4).unwrap(),
    ];
    for (i, m) in models.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.txt"));
        save_model(m, &path).unwrap();
        assert_eq!(&load_model(&path).unwrap(), m);
    }
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(load_dataset(Path::new("/nonexistent/ds.txt")), Err(Error::Io { .. })));
}

#[test]
fn truncated_checkpoint_names_the_problem() {
    let m = init_model(&Architecture::Linear, 2, 2, 2, HeadInit::Zeros, 0).unwrap();
    let text = model_to_string(&m);
    let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
    let err = parse_model(&cut, Path::new("m.txt")).unwrap_err();
    assert!(err.to_string().contains("m.txt"), "{err}");
}

#[test]
fn unknown_architecture_is_rejected_at_its_line() {
    let m = init_model(&Architecture::Linear, 2, 2, 2, HeadInit::Zeros, 0).unwrap();
    let text = model_to_string(&m).replace("arch linear", "arch transformer");
    match parse_model(&text, Path::new("m.txt")) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn inconsistent_shapes_are_rejected() {
    let m = init_model(&Architecture::Linear, 2, 3, 2, HeadInit::Zeros, 0).unwrap();
    let text = model_to_string(&m).replace("matrix feature_weight 3 2", "matrix feature_weight 2 3");
    let lines: Vec<&str> = text.lines().collect();
    // keep the body consistent with the new header: two rows of three
    let head_end = lines.iter().position(|l| l.starts_with("matrix feature_weight")).unwrap();
    let mut fixed: Vec<String> = lines[..=head_end].iter().map(|s| s.to_string()).collect();
    fixed.push("0.0 0.0 0.0".into());
    fixed.push("0.0 0.0 0.0".into());
    assert!(parse_model(&fixed.join("\n"), Path::new("m.txt")).is_err());
}
