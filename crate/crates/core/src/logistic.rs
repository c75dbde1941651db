//! L2-regularized multinomial logistic regression with per-class intercepts,
//! solved by damped Newton with backtracking.
//!
//! Logits are `z[i, k] = design[i*C + k, :] . w + c[k]` and the objective is
//! `mean_i CE(z_i, y_i) + lambda/2 * w^T R w` with a PSD penalty matrix `R`.
//! Intercepts are unpenalized and can be switched off.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, max_abs, softmax};

pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 100_000;
const STALL_LIMIT: usize = 20;

pub struct Problem<'a> {
    /// NC x p
    pub design: &'a DMatrix<f64>,
    /// p x p
    pub penalty: &'a DMatrix<f64>,
    pub labels: &'a [usize],
    pub num_classes: usize,
    pub lambda: f64,
    pub fit_intercept: bool,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub weights: DVector<f64>,
    pub intercepts: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.labels.len()
    }

    fn logits(&self, w: &DVector<f64>, c: &DVector<f64>) -> DMatrix<f64> {
        let flat = self.design * w;
        let k = self.num_classes;
        DMatrix::from_fn(self.n(), k, |i, j| flat[i * k + j] + c[j])
    }

    fn objective(&self, w: &DVector<f64>, c: &DVector<f64>) -> f64 {
        let z = self.logits(w, c);
        let mut ce = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            let zi = z.row(i).transpose();
            ce += log_sum_exp(&zi) - zi[y];
        }
        ce / self.n() as f64 + 0.5 * self.lambda * w.dot(&(self.penalty * w))
    }

    /// Gradient and Hessian over the stacked `(w, c)`.
    fn derivatives(&self, w: &DVector<f64>, c: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.num_classes;
        let p = w.len();
        let n = self.n();
        let inv_n = 1.0 / n as f64;
        let z = self.logits(w, c);
        let mut grad = DVector::zeros(p + k);
        let mut hess = DMatrix::zeros(p + k, p + k);
        let mut resid = DVector::zeros(n * k);
        // W_i D_i for every sample, stacked (NC x p)
        let mut wd = DMatrix::zeros(n * k, p);
        for i in 0..n {
            let prob = softmax(&z.row(i).transpose());
            let mut wi = DMatrix::from_diagonal(&prob) - &prob * prob.transpose();
            wi *= inv_n;
            for j in 0..k {
                resid[i * k + j] = prob[j] - if j == self.labels[i] { 1.0 } else { 0.0 };
            }
            let di = self.design.rows(i * k, k);
            wd.rows_mut(i * k, k).copy_from(&(&wi * di));
            let mut hcc = hess.view_mut((p, p), (k, k));
            hcc += &wi;
        }
        resid *= inv_n;
        let gw = self.design.transpose() * &resid + self.penalty * w * self.lambda;
        grad.rows_mut(0, p).copy_from(&gw);
        for j in 0..k {
            grad[p + j] = (0..n).map(|i| resid[i * k + j]).sum();
        }
        let hww = self.design.transpose() * &wd + self.penalty * self.lambda;
        hess.view_mut((0, 0), (p, p)).copy_from(&hww);
        // H_cw = sum_i W_i D_i, summed over samples per class row
        let mut hcw = DMatrix::zeros(k, p);
        for i in 0..n {
            hcw += wd.rows(i * k, k);
        }
        hess.view_mut((p, 0), (k, p)).copy_from(&hcw);
        hess.view_mut((0, p), (p, k)).copy_from(&hcw.transpose());
        (grad, hess)
    }

    pub fn solve(&self) -> Result<Solution> {
        let p = self.design.ncols();
        let k = self.num_classes;
        if self.design.nrows() != self.n() * k {
            return Err(Error::Dimension { what: "design rows", expected: self.n() * k, got: self.design.nrows() });
        }
        if self.penalty.shape() != (p, p) {
            return Err(Error::Dimension { what: "penalty size", expected: p, got: self.penalty.nrows() });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter("lambda must be >= 0".into()));
        }
        let mut w = DVector::zeros(p);
        let mut c = DVector::zeros(k);
        let mut obj = self.objective(&w, &c);
        let mut grad_norm = f64::INFINITY;
        // gradient magnitudes scale with the design and the penalty
        let tol = GRAD_TOL * max_abs(self.design).max(self.lambda * max_abs(self.penalty)).max(1.0);
        let mut stalled = 0;
        for it in 0..MAX_ITER {
            let (mut grad, mut hess) = self.derivatives(&w, &c);
            if !self.fit_intercept {
                grad = grad.rows(0, p).into_owned();
                hess = hess.view((0, 0), (p, p)).into_owned();
            }
            grad_norm = grad.norm();
            if grad_norm <= tol {
                return Ok(Solution { weights: w, intercepts: c, iterations: it, grad_norm, objective: obj });
            }
            let mut step = damped_newton_step(&hess, &grad)?;
            let slope = grad.dot(&step);
            if !self.fit_intercept {
                step = step.resize_vertically(p + k, 0.0);
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-20 {
                let w_new = &w + step.rows(0, p) * t;
                let c_new = &c + step.rows(p, k) * t;
                let obj_new = self.objective(&w_new, &c_new);
                if obj_new <= obj + 1e-4 * t * slope {
                    stalled = if obj_new < obj { 0 } else { stalled + 1 };
                    w = w_new;
                    c = c_new;
                    obj = obj_new;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || stalled >= STALL_LIMIT {
                // no representable descent left: accept if the gradient is at roundoff level
                if grad_norm <= 1e3 * tol {
                    return Ok(Solution { weights: w, intercepts: c, iterations: it, grad_norm, objective: obj });
                }
                return Err(Error::NonConvergence { iterations: it, grad_norm });
            }
        }
        Err(Error::NonConvergence { iterations: MAX_ITER, grad_norm })
    }
}

fn damped_newton_step(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = hess.diagonal().iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let mut mu = 1e-12 * scale;
    for _ in 0..30 {
        let damped = hess + DMatrix::identity(hess.nrows(), hess.ncols()) * mu;
        if let Some(chol) = damped.cholesky() {
            return Ok(-chol.solve(grad));
        }
        mu *= 10.0;
    }
    Err(Error::NotPsd("logistic Hessian could not be factorized".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_recovers_class_priors() {
        // with a zero design the intercepts must match log class frequencies
        let design = DMatrix::zeros(4 * 2, 1);
        let penalty = DMatrix::identity(1, 1);
        let labels = [0, 0, 0, 1];
        let sol = Problem { design: &design, penalty: &penalty, labels: &labels, num_classes: 2, lambda: 1.0, fit_intercept: true }
            .solve()
            .unwrap();
        let p = softmax(&sol.intercepts);
        assert!((p[0] - 0.75).abs() < 1e-8);
    }
}
