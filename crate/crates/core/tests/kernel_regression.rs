use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use ntk_lab::kernel_reg::{evaluate, fit, fit_cv, predict};
use ntk_lab::Error;

fn toy_kernel() -> DMatrix<f64> {
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.8, 0.3, -0.2, 1.0, -1.0, -0.5]);
    let g = &x * x.transpose() + DMatrix::from_element(4, 4, 1.0);
    g.kronecker(&DMatrix::<f64>::identity(2, 2)) + DMatrix::identity(8, 8) * 0.1
}

#[test]
fn scaled_identity_kernel_memorizes() {
    let labels = [0, 2, 1, 1, 0, 2];
    let k = DMatrix::identity(18, 18) * 1e3;
    let res = fit(&k, &labels, 3, 1e-2).unwrap();
    assert_eq!(res.train_accuracy, 1.0);
}

#[test]
fn heavy_regularization_shrinks_to_majority() {
    let labels = [0, 0, 1, 1];
    let res = fit(&toy_kernel(), &labels, 2, 1e8).unwrap();
    for a in &res.alpha {
        assert_abs_diff_eq!(*a, 0.0, epsilon = 1e-6);
    }
    let unbalanced = [0, 0, 0, 1];
    let res = fit(&toy_kernel(), &unbalanced, 2, 1e8).unwrap();
    assert_abs_diff_eq!(res.train_accuracy, 0.75, epsilon = 1e-12);
}

#[test]
fn predicting_on_train_reproduces_train_accuracy() {
    let k = toy_kernel();
    let labels = [0, 1, 1, 0];
    let mut res = fit(&k, &labels, 2, 0.05).unwrap();
    evaluate(&k, &labels, &mut res).unwrap();
    assert_eq!(res.test_accuracy, Some(res.train_accuracy));
}

#[test]
fn fit_is_bitwise_deterministic() {
    let k = toy_kernel();
    let a = fit(&k, &[0, 0, 1, 1], 2, 0.1).unwrap();
    let b = fit(&k, &[0, 0, 1, 1], 2, 0.1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cross_validation_picks_a_grid_value() {
    let mut x = DMatrix::zeros(10, 2);
    let mut labels = Vec::new();
    for i in 0..10 {
        let y = i % 2;
        x[(i, 0)] = if y == 0 { 1.0 } else { -1.0 } + 0.05 * i as f64;
        x[(i, 1)] = 0.1 * (i as f64).sin();
        labels.push(y);
    }
    let g = &x * x.transpose() + DMatrix::from_element(10, 10, 1.0);
    let k = g.kronecker(&DMatrix::<f64>::identity(2, 2));
    let res = fit_cv(&k, &labels, 2, 7).unwrap();
    assert!(ntk_lab::train::LAMBDA_GRID.contains(&res.lambda));
    assert_eq!(res.train_accuracy, 1.0);
    assert_eq!(fit_cv(&k, &labels, 2, 7).unwrap(), res);
}

#[test]
fn layout_errors() {
    let k = toy_kernel();
    assert!(matches!(fit(&k, &[0, 1, 0], 2, 0.1), Err(Error::Dimension { .. })));
    assert!(matches!(fit(&k, &[0, 1, 2, 0], 2, 0.1), Err(Error::Parameter(_))));
    assert!(matches!(fit(&k, &[0, 1, 1, 0], 2, -1.0), Err(Error::Parameter(_))));
    let res = fit(&k, &[0, 1, 1, 0], 2, 0.1).unwrap();
    assert!(predict(&DMatrix::zeros(3, 8), &res).is_err());
}
