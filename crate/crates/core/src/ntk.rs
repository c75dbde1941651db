//! Empirical NTK of `f(x) = V phi(x) + b`, split into the pre-train-effective
//! part `P(x, x') = (<phi0(x), phi0(x')> + 1) I_C` and the FT-effective part
//! `F(x, x') = V0 Theta_phi(x, x') V0^T`.
//!
//! Kernels over sample sets are laid out with row `i * C + k` for sample `i`,
//! output `k`. The linear and LoRA branches use closed forms for `Theta_phi`;
//! the MLP branch multiplies explicit Jacobians.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, symmetrize};
use crate::model::{FeatureExtractor, ModelState};

/// Kernels are materialized densely up to this many rows.
pub const MAX_KERNEL_ROWS: usize = 2048;

pub const DEFAULT_RANK_REL_TOL: f64 = 1e-10;

/// `P` and `F` between a left and a right sample set (square when both are
/// the training set).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDecomposition {
    pub pre_train: DMatrix<f64>,
    pub ft: DMatrix<f64>,
    pub num_classes: usize,
    pub left_samples: usize,
    pub right_samples: usize,
    /// Fingerprint of the anchor model's parameters.
    pub anchor: String,
}

impl KernelDecomposition {
    pub fn ntk(&self) -> DMatrix<f64> {
        &self.pre_train + &self.ft
    }

    /// Row/column range of the C x C block for samples `(i, j)`.
    pub fn block_index(&self, i: usize, j: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let c = self.num_classes;
        (i * c..(i + 1) * c, j * c..(j + 1) * c)
    }

    pub fn p_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let c = self.num_classes;
        self.pre_train.view((i * c, j * c), (c, c)).into_owned()
    }

    pub fn f_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let c = self.num_classes;
        self.ft.view((i * c, j * c), (c, c)).into_owned()
    }
}

/// FNV-1a over the parameter bits.
pub fn model_fingerprint(model: &ModelState) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(model.arch_name().as_bytes());
    for v in model.flatten().iter() {
        eat(&v.to_bits().to_le_bytes());
    }
    if let FeatureExtractor::Lora(l) = &model.feature {
        for v in l.base.iter() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    format!("{h:016x}")
}

fn rows(samples: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..samples.nrows()).map(|i| samples.row(i).transpose()).collect()
}

fn check_dims(model: &ModelState, samples: &DMatrix<f64>) -> Result<()> {
    if samples.ncols() != model.input_dim() {
        return Err(Error::Dimension { what: "sample columns", expected: model.input_dim(), got: samples.ncols() });
    }
    let rows = samples.nrows() * model.num_classes();
    if rows > MAX_KERNEL_ROWS {
        return Err(Error::Parameter(format!(
            "kernel would have {rows} rows; the dense limit is {MAX_KERNEL_ROWS}"
        )));
    }
    Ok(())
}

/// Per-sample-pair `Theta_phi` summary used to build `F`. For the linear and
/// LoRA branches `Theta_phi(x, x') = s(x, x') I_h + t(x, x') M` with scalar
/// `s`, `t` and a fixed h x h matrix `M`, which keeps `F` cheap.
enum PhiStructure {
    /// `<x, x'> I_h`
    Linear,
    /// `<A x, A x'> I_h + <x, x'> B B^T`
    Lora { down: DMatrix<f64>, up_gram: DMatrix<f64> },
    /// explicit `V0 J_phi(x)` per sample
    Jacobian,
}

fn phi_structure(model: &ModelState) -> PhiStructure {
    match &model.feature {
        FeatureExtractor::Linear { .. } => PhiStructure::Linear,
        FeatureExtractor::Lora(l) => PhiStructure::Lora {
            down: l.down.clone(),
            up_gram: &l.up * l.up.transpose(),
        },
        FeatureExtractor::Mlp { .. } => PhiStructure::Jacobian,
    }
}

/// `P` and `F` between `left` and `right` (rows are samples).
pub fn compute_cross_decomposition(
    model: &ModelState,
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
) -> Result<KernelDecomposition> {
    check_dims(model, left)?;
    check_dims(model, right)?;
    let c = model.num_classes();
    let (nl, nr) = (left.nrows(), right.nrows());
    let xl = rows(left);
    let xr = rows(right);

    let phi_l: Vec<DVector<f64>> = xl.iter().map(|x| model.features_unchecked(x)).collect();
    let phi_r: Vec<DVector<f64>> = xr.iter().map(|x| model.features_unchecked(x)).collect();
    let mut p = DMatrix::zeros(nl * c, nr * c);
    for i in 0..nl {
        for j in 0..nr {
            let s = phi_l[i].dot(&phi_r[j]) + 1.0;
            for k in 0..c {
                p[(i * c + k, j * c + k)] = s;
            }
        }
    }

    let v = &model.head.weight;
    let mut f = DMatrix::zeros(nl * c, nr * c);
    match phi_structure(model) {
        PhiStructure::Linear => {
            let vvt = v * v.transpose();
            for i in 0..nl {
                for j in 0..nr {
                    let s = xl[i].dot(&xr[j]);
                    f.view_mut((i * c, j * c), (c, c)).copy_from(&(&vvt * s));
                }
            }
        }
        PhiStructure::Lora { down, up_gram } => {
            let vvt = v * v.transpose();
            let vbbv = v * &up_gram * v.transpose();
            let al: Vec<DVector<f64>> = xl.iter().map(|x| &down * x).collect();
            let ar: Vec<DVector<f64>> = xr.iter().map(|x| &down * x).collect();
            for i in 0..nl {
                for j in 0..nr {
                    let block = &vvt * al[i].dot(&ar[j]) + &vbbv * xl[i].dot(&xr[j]);
                    f.view_mut((i * c, j * c), (c, c)).copy_from(&block);
                }
            }
        }
        PhiStructure::Jacobian => {
            let stack = |xs: &[DVector<f64>]| -> DMatrix<f64> {
                let blocks: Vec<DMatrix<f64>> = xs
                    .par_iter()
                    .map(|x| v * model.feature_jacobian_unchecked(x))
                    .collect();
                let p_phi = model.num_feature_params();
                let mut m = DMatrix::zeros(xs.len() * c, p_phi);
                for (i, b) in blocks.iter().enumerate() {
                    m.view_mut((i * c, 0), (c, p_phi)).copy_from(b);
                }
                m
            };
            let ml = stack(&xl);
            let mr = if std::ptr::eq(left, right) { ml.clone() } else { stack(&xr) };
            f = &ml * mr.transpose();
        }
    }

    Ok(KernelDecomposition {
        pre_train: p,
        ft: f,
        num_classes: c,
        left_samples: nl,
        right_samples: nr,
        anchor: model_fingerprint(model),
    })
}

/// Train-train decomposition with both parts symmetrized.
pub fn compute_decomposition(model: &ModelState, samples: &DMatrix<f64>) -> Result<KernelDecomposition> {
    let mut d = compute_cross_decomposition(model, samples, samples)?;
    d.pre_train = symmetrize(&d.pre_train);
    d.ft = symmetrize(&d.ft);
    Ok(d)
}

/// `J J^T` from the full parameter Jacobian, without the P/F split.
pub fn empirical_ntk(model: &ModelState, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(model, samples)?;
    let c = model.num_classes();
    let xs = rows(samples);
    let jacs: Vec<DMatrix<f64>> = xs
        .par_iter()
        .map(|x| model.full_jacobian(x))
        .collect::<Result<_>>()?;
    let p = model.layout().total();
    let mut j = DMatrix::zeros(xs.len() * c, p);
    for (i, b) in jacs.iter().enumerate() {
        j.view_mut((i * c, 0), (c, p)).copy_from(b);
    }
    Ok(&j * j.transpose())
}

/// `Theta_phi(x, x') = J_phi(x) J_phi(x')^T` for each pair.
pub fn compute_phi_kernel(
    model: &ModelState,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> Result<Vec<DMatrix<f64>>> {
    let d = model.input_dim();
    let h = model.feature_dim();
    for (x, y) in pairs {
        for v in [x, y] {
            if v.len() != d {
                return Err(Error::Dimension { what: "input vector", expected: d, got: v.len() });
            }
        }
    }
    let structure = phi_structure(model);
    Ok(pairs
        .iter()
        .map(|(x, y)| match &structure {
            PhiStructure::Linear => DMatrix::identity(h, h) * x.dot(y),
            PhiStructure::Lora { down, up_gram } => {
                DMatrix::identity(h, h) * (down * x).dot(&(down * y)) + up_gram * x.dot(y)
            }
            PhiStructure::Jacobian => {
                model.feature_jacobian_unchecked(x) * model.feature_jacobian_unchecked(y).transpose()
            }
        })
        .collect())
}

/// Cross `Theta_phi` as one (M h) x (N h) matrix; block `(m, i)` is
/// `Theta_phi(left_m, right_i)`.
pub fn compute_phi_kernel_matrix(
    model: &ModelState,
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    for s in [left, right] {
        if s.ncols() != model.input_dim() {
            return Err(Error::Dimension { what: "sample columns", expected: model.input_dim(), got: s.ncols() });
        }
    }
    let h = model.feature_dim();
    let xl = rows(left);
    let xr = rows(right);
    let mut out = DMatrix::zeros(xl.len() * h, xr.len() * h);
    match phi_structure(model) {
        PhiStructure::Linear => {
            for (m, x) in xl.iter().enumerate() {
                for (i, y) in xr.iter().enumerate() {
                    out.view_mut((m * h, i * h), (h, h)).fill_diagonal(x.dot(y));
                }
            }
        }
        PhiStructure::Lora { down, up_gram } => {
            for (m, x) in xl.iter().enumerate() {
                for (i, y) in xr.iter().enumerate() {
                    let block = DMatrix::identity(h, h) * (&down * x).dot(&(&down * y)) + &up_gram * x.dot(y);
                    out.view_mut((m * h, i * h), (h, h)).copy_from(&block);
                }
            }
        }
        PhiStructure::Jacobian => {
            let jl: Vec<DMatrix<f64>> = xl.par_iter().map(|x| model.feature_jacobian_unchecked(x)).collect();
            let jr: Vec<DMatrix<f64>> = xr.par_iter().map(|x| model.feature_jacobian_unchecked(x)).collect();
            for (m, a) in jl.iter().enumerate() {
                for (i, b) in jr.iter().enumerate() {
                    out.view_mut((m * h, i * h), (h, h)).copy_from(&(a * b.transpose()));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtRatio {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Mean over training samples of `|sum_i F(x, x_i) d_i| / |sum_i (P+F)(x, x_i) d_i|`.
/// Samples whose denominator is below 1e-15 are skipped.
pub fn ft_ratio(decomp: &KernelDecomposition, residuals: &DMatrix<f64>) -> Result<FtRatio> {
    let c = decomp.num_classes;
    if residuals.ncols() != c || residuals.nrows() != decomp.right_samples {
        return Err(Error::Dimension {
            what: "residual rows",
            expected: decomp.right_samples,
            got: residuals.nrows(),
        });
    }
    let flat = DVector::from_iterator(residuals.len(), (0..residuals.nrows()).flat_map(|i| (0..c).map(move |k| residuals[(i, k)])));
    let f_term = &decomp.ft * &flat;
    let total = &decomp.pre_train * &flat + &f_term;
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for i in 0..decomp.left_samples {
        let den = total.rows(i * c, c).norm();
        if den < 1e-15 {
            skipped += 1;
            continue;
        }
        sum += f_term.rows(i * c, c).norm() / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate("degenerate residuals: every kernel update vanishes".into()));
    }
    Ok(FtRatio { value: sum / used as f64, used, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub rank: usize,
    pub frobenius_norm: f64,
    /// `sigma_i / sigma_max` for every strictly positive singular value, descending.
    pub normalized_singular_values: Vec<f64>,
    pub rank_rel_tol: f64,
}

pub fn kernel_stats(matrix: &DMatrix<f64>, rank_rel_tol: f64) -> Result<KernelStats> {
    if !matrix.is_square() {
        return Err(Error::Parameter("kernel must be square".into()));
    }
    let asym = max_abs(&(matrix - matrix.transpose()));
    if asym > 1e-10 * max_abs(matrix).max(1.0) {
        return Err(Error::Parameter(format!("kernel is not symmetric (max |K - K^T| = {asym:e})")));
    }
    let eig = SymmetricEigen::new(symmetrize(matrix));
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > rank_rel_tol * smax && s > 0.0).count();
    let normalized = if smax > 0.0 {
        sv.iter().filter(|&&s| s > 0.0).map(|s| s / smax).collect()
    } else {
        Vec::new()
    };
    Ok(KernelStats {
        rank,
        frobenius_norm: matrix.norm(),
        normalized_singular_values: normalized,
        rank_rel_tol,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(matrix: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(matrix)).eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Architecture, Head, HeadInit};

    #[test]
    fn identity_stats() {
        let s = kernel_stats(&DMatrix::identity(6, 6), DEFAULT_RANK_REL_TOL).unwrap();
        assert_eq!(s.rank, 6);
        assert!((s.frobenius_norm - 6f64.sqrt()).abs() < 1e-15);
        assert!(s.normalized_singular_values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rank_one_stats() {
        let u = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let s = kernel_stats(&(&u * u.transpose()), DEFAULT_RANK_REL_TOL).unwrap();
        assert_eq!(s.rank, 1);
        assert!((s.frobenius_norm - 4.0).abs() < 1e-15);
        assert_eq!(s.normalized_singular_values[0], 1.0);
    }

    #[test]
    fn asymmetric_kernel_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(kernel_stats(&m, DEFAULT_RANK_REL_TOL).is_err());
    }

    #[test]
    fn zero_head_gives_zero_ft_component() {
        let m = init_model(&Architecture::default_mlp(), 3, 4, 2, HeadInit::Zeros, 1).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let d = compute_decomposition(&m, &x).unwrap();
        assert_eq!(max_abs(&d.ft), 0.0);
    }

    #[test]
    fn orthogonal_samples_have_zero_ft_block() {
        let m = ModelState {
            head: Head { weight: DMatrix::identity(2, 2), bias: DVector::zeros(2) },
            feature: FeatureExtractor::Linear { weight: DMatrix::identity(2, 2) },
        };
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let d = compute_decomposition(&m, &x).unwrap();
        assert_eq!(d.f_block(0, 1), DMatrix::zeros(2, 2));
        assert_eq!(d.f_block(0, 0), DMatrix::identity(2, 2));
    }

    #[test]
    fn linear_phi_kernel_closed_form() {
        let m = init_model(&Architecture::Linear, 2, 3, 2, HeadInit::Zeros, 0).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let y = DVector::from_vec(vec![-2.0, 1.0]);
        let k = compute_phi_kernel(&m, &[(x.clone(), x.clone()), (x, y)]).unwrap();
        assert_eq!(k[0], DMatrix::identity(3, 3) * 5.0);
        assert_eq!(k[1], DMatrix::zeros(3, 3));
    }

    #[test]
    fn oversized_kernel_is_refused() {
        let m = init_model(&Architecture::Linear, 2, 2, 3, HeadInit::Zeros, 0).unwrap();
        let x = DMatrix::zeros(700, 2);
        assert!(matches!(compute_decomposition(&m, &x), Err(Error::Parameter(_))));
    }
}
