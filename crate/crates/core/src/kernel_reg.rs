//! Kernel logistic regression over a sample-by-class kernel.
//!
//! Row `i*C + k` of an `NC x NC` kernel belongs to sample `i`, output `k`.
//! Logits are `z = K alpha` read in the same layout, and `alpha` minimizes
//! `mean_i CE(z_i, y_i) + lambda/2 alpha^T K alpha`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, max_abs, symmetrize};
use crate::logistic;
use crate::train::{select_lambda_cv, Predictor};

pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRegressionResult {
    pub alpha: Vec<f64>,
    pub num_classes: usize,
    pub lambda: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub clipped_eigenvalues: usize,
}

/// Symmetrizes `kernel` and clips eigenvalues in `[-tol, 0)` to zero. Both
/// tolerances scale with `max(1, max|K|)`.
pub fn validate_psd(kernel: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    if !kernel.is_square() {
        return Err(Error::Dimension { what: "kernel columns", expected: kernel.nrows(), got: kernel.ncols() });
    }
    if kernel.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd("kernel has non-finite entries".into()));
    }
    let tol = PSD_TOL * max_abs(kernel).max(1.0);
    let asym = max_abs(&(kernel - kernel.transpose()));
    if asym > tol {
        return Err(Error::NotPsd(format!("kernel asymmetry {asym:e} exceeds {tol:e}")));
    }
    let sym = symmetrize(kernel);
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::NotPsd(format!("kernel eigenvalue {min:e} below -{tol:e}")));
    }
    let clipped = eig.eigenvalues.iter().filter(|&&v| v < 0.0).count();
    if clipped == 0 {
        return Ok((sym, 0));
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok((symmetrize(&rebuilt), clipped))
}

fn check_layout(kernel_cols: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Parameter("need at least 2 classes".into()));
    }
    if kernel_cols != labels.len() * num_classes {
        return Err(Error::Dimension { what: "kernel columns", expected: labels.len() * num_classes, got: kernel_cols });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Parameter(format!("label {bad} out of range for {num_classes} classes")));
    }
    Ok(())
}

pub fn fit(kernel: &DMatrix<f64>, labels: &[usize], num_classes: usize, lambda: f64) -> Result<KernelRegressionResult> {
    check_layout(kernel.ncols(), labels, num_classes)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter("lambda must be finite and >= 0".into()));
    }
    let (k, clipped) = validate_psd(kernel)?;
    let sol = logistic::Problem { design: &k, penalty: &k, labels, num_classes, lambda, fit_intercept: false }.solve()?;
    let alpha = sol.weights;
    let train_pred = labels_from_logits(&(&k * &alpha), num_classes);
    Ok(KernelRegressionResult {
        alpha: alpha.as_slice().to_vec(),
        num_classes,
        lambda,
        train_accuracy: accuracy(&train_pred, labels),
        test_accuracy: None,
        iterations: sol.iterations,
        grad_norm: sol.grad_norm,
        clipped_eigenvalues: clipped,
    })
}

/// Selects lambda by cross-validation over the LP grid, then refits on all samples.
pub fn fit_cv(kernel: &DMatrix<f64>, labels: &[usize], num_classes: usize, seed: u64) -> Result<KernelRegressionResult> {
    check_layout(kernel.ncols(), labels, num_classes)?;
    let (k, _) = validate_psd(kernel)?;
    let c = num_classes;
    let expand = |idx: &[usize]| -> Vec<usize> { idx.iter().flat_map(|&i| (0..c).map(move |j| i * c + j)).collect() };
    let k_ref = &k;
    let lam = select_lambda_cv(labels, seed, |train_idx, lam| {
        let cols = expand(train_idx);
        let sub = k_ref.select_rows(cols.iter()).select_columns(cols.iter());
        let sub_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
        let res = fit(&sub, &sub_labels, c, lam)?;
        let alpha = DVector::from_vec(res.alpha);
        let cross = k_ref.select_columns(cols.iter());
        Ok(Box::new(move |i: usize| cross.rows(i * c, c) * &alpha) as Predictor<'_>)
    })?;
    fit(kernel, labels, num_classes, lam)
}

fn labels_from_logits(flat: &DVector<f64>, c: usize) -> Vec<usize> {
    (0..flat.len() / c).map(|i| argmax(&flat.rows(i * c, c).into_owned())).collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Predicted labels for the rows of a `MC x NC` test-train kernel. Ties go to
/// the lowest class index.
pub fn predict(kernel_test_train: &DMatrix<f64>, result: &KernelRegressionResult) -> Result<Vec<usize>> {
    let c = result.num_classes;
    if kernel_test_train.ncols() != result.alpha.len() {
        return Err(Error::Dimension { what: "kernel columns", expected: result.alpha.len(), got: kernel_test_train.ncols() });
    }
    if kernel_test_train.nrows() % c != 0 {
        return Err(Error::Dimension { what: "kernel rows (multiple of classes)", expected: c, got: kernel_test_train.nrows() });
    }
    let alpha = DVector::from_column_slice(&result.alpha);
    Ok(labels_from_logits(&(kernel_test_train * alpha), c))
}

/// Predicts and records the test accuracy on `result`.
pub fn evaluate(kernel_test_train: &DMatrix<f64>, labels: &[usize], result: &mut KernelRegressionResult) -> Result<Vec<usize>> {
    let pred = predict(kernel_test_train, result)?;
    if pred.len() != labels.len() {
        return Err(Error::Dimension { what: "test labels", expected: pred.len(), got: labels.len() });
    }
    result.test_accuracy = Some(accuracy(&pred, labels));
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_test_kernel_predicts_first_class() {
        let k = DMatrix::identity(4, 4) * 10.0;
        let res = fit(&k, &[0, 1], 2, 1e-3).unwrap();
        let pred = predict(&DMatrix::zeros(6, 4), &res).unwrap();
        assert_eq!(pred, vec![0, 0, 0]);
    }

    #[test]
    fn negative_kernel_is_rejected() {
        let k = DMatrix::identity(4, 4) * -1.0;
        assert!(matches!(fit(&k, &[0, 1], 2, 1.0), Err(Error::NotPsd(_))));
    }

    #[test]
    fn tiny_negative_eigenvalues_are_clipped() {
        let mut k = DMatrix::identity(4, 4);
        k[(3, 3)] = -1e-10;
        let res = fit(&k, &[0, 1], 2, 1.0).unwrap();
        assert_eq!(res.clipped_eigenvalues, 1);
    }

    #[test]
    fn column_mismatch_is_an_error() {
        let res = fit(&DMatrix::identity(4, 4), &[0, 1], 2, 1.0).unwrap();
        assert!(predict(&DMatrix::zeros(2, 3), &res).is_err());
    }
}
