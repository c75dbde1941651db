//! Finite-difference oracles for the analytic Jacobians, and the kernel
//! decomposition against brute-force J J^T.

use nalgebra::{DMatrix, DVector};
use ntk_lab::checks::{check_decomposition, check_given_decomposition};
use ntk_lab::data::gen_gaussian_clusters;
use ntk_lab::model::{attach_lora, init_model, Architecture, FeatureExtractor, HeadInit, ModelState};
use ntk_lab::ntk::{compute_decomposition, compute_phi_kernel, compute_phi_kernel_matrix, empirical_ntk};
use ntk_lab::train::{gd_step, residuals, Trainable};

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;

fn lora_with_trained_up(seed: u64) -> ModelState {
    let base = init_model(&Architecture::Linear, 5, 6, 3, HeadInit::Gaussian { scale: 0.7 }, seed).unwrap();
    let mut m = attach_lora(&base, 2, 0.5, seed, 9).unwrap();
    if let FeatureExtractor::Lora(l) = &mut m.feature {
        l.up = DMatrix::from_fn(6, 2, |i, j| 0.1 * (i as f64 + 1.0) - 0.2 * j as f64);
    }
    m
}

fn models() -> Vec<ModelState> {
    vec![
        init_model(&Architecture::Linear, 5, 6, 3, HeadInit::Gaussian { scale: 0.7 }, 1).unwrap(),
        init_model(&Architecture::Mlp { hidden: vec![7] }, 5, 6, 3, HeadInit::Gaussian { scale: 0.7 }, 2).unwrap(),
        init_model(&Architecture::Mlp { hidden: vec![7, 4] }, 5, 6, 3, HeadInit::Gaussian { scale: 0.7 }, 3).unwrap(),
        lora_with_trained_up(4),
    ]
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn full_jacobian_matches_central_differences() {
    let x = DVector::from_vec(vec![0.3, -1.2, 0.5, 0.9, -0.4]);
    for m in models() {
        let theta = m.flatten();
        let j = m.full_jacobian(&x).unwrap();
        let mut fd = DMatrix::zeros(j.nrows(), j.ncols());
        for p in 0..theta.len() {
            let mut up = theta.clone();
            up[p] += STEP;
            let mut dn = theta.clone();
            dn[p] -= STEP;
            let d = (m.with_params(&up).unwrap().forward(&x).unwrap().logits
                - m.with_params(&dn).unwrap().forward(&x).unwrap().logits)
                / (2.0 * STEP);
            fd.set_column(p, &d);
        }
        assert!(rel_err(&j, &fd) < REL_TOL, "{}: {}", m.arch_name(), rel_err(&j, &fd));
    }
}

#[test]
fn feature_jacobian_matches_central_differences() {
    let x = DVector::from_vec(vec![-0.7, 0.1, 1.5, 0.2, 0.0]);
    for m in models() {
        let theta = m.feature_params();
        let j = m.feature_jacobian(&x).unwrap();
        let mut fd = DMatrix::zeros(j.nrows(), j.ncols());
        for p in 0..theta.len() {
            let mut up = theta.clone();
            up[p] += STEP;
            let mut dn = theta.clone();
            dn[p] -= STEP;
            let d = (m.with_feature_params(up.as_slice()).unwrap().features(&x).unwrap()
                - m.with_feature_params(dn.as_slice()).unwrap().features(&x).unwrap())
                / (2.0 * STEP);
            fd.set_column(p, &d);
        }
        assert!(rel_err(&j, &fd) < REL_TOL, "{}: {}", m.arch_name(), rel_err(&j, &fd));
    }
}

#[test]
fn decomposition_equals_brute_force_for_every_architecture() {
    let ds = gen_gaussian_clusters(4, 3, 5, 1.5, 1.0, 11).unwrap();
    for m in models() {
        let r = check_decomposition(&m, ds.samples(), 1e-10).unwrap();
        assert!(r.pass, "{}", r.summary());
    }
}

#[test]
fn zeroed_ft_block_is_detected_with_its_own_size() {
    let ds = gen_gaussian_clusters(3, 3, 5, 1.5, 1.0, 12).unwrap();
    let m = init_model(&Architecture::Mlp { hidden: vec![8] }, 5, 6, 3, HeadInit::Gaussian { scale: 1.0 }, 5).unwrap();
    let mut d = compute_decomposition(&m, ds.samples()).unwrap();
    let (rows, cols) = d.block_index(1, 2);
    let block_max = d.ft.view((rows.start, cols.start), (3, 3)).amax();
    d.ft.view_mut((rows.start, cols.start), (3, 3)).fill(0.0);
    let r = check_given_decomposition(&d, &m, ds.samples(), 1e-10).unwrap();
    assert!(!r.pass);
    assert!((r.measured["max_abs_error"] - block_max).abs() <= 1e-10 * block_max.max(1.0));
}

#[test]
fn phi_kernel_routes_agree() {
    let ds = gen_gaussian_clusters(2, 2, 5, 1.0, 1.0, 13).unwrap();
    for m in models() {
        let k = compute_phi_kernel_matrix(&m, ds.samples(), ds.samples()).unwrap();
        let h = m.feature_dim();
        for a in 0..ds.len() {
            for b in 0..ds.len() {
                let pair = vec![(ds.sample(a), ds.sample(b))];
                let one = &compute_phi_kernel(&m, &pair).unwrap()[0];
                let ja = m.feature_jacobian(&ds.sample(a)).unwrap();
                let jb = m.feature_jacobian(&ds.sample(b)).unwrap();
                let brute = &ja * jb.transpose();
                assert!((one - &brute).amax() < 1e-10);
                assert!((k.view((a * h, b * h), (h, h)) - &brute).amax() < 1e-10);
            }
        }
    }
}

#[test]
fn gd_step_is_the_summed_jacobian_transpose_residual() {
    let ds = gen_gaussian_clusters(3, 3, 5, 1.0, 1.0, 14).unwrap();
    for m in models() {
        let delta = residuals(&m, &ds).unwrap();
        let mut g = DVector::zeros(m.flatten().len());
        for i in 0..ds.len() {
            g += m.full_jacobian(&ds.sample(i)).unwrap().transpose() * delta.row(i).transpose();
        }
        let eta = 0.05;
        let expected = m.flatten() + g * eta;
        let got = gd_step(&m, &ds, eta, Trainable::ALL).unwrap().flatten();
        assert!((got - expected).amax() < 1e-12, "{}", m.arch_name());
    }
}

#[test]
fn ntk_is_symmetric_psd() {
    let ds = gen_gaussian_clusters(3, 3, 5, 1.0, 1.0, 15).unwrap();
    for m in models() {
        let k = empirical_ntk(&m, ds.samples()).unwrap();
        assert!((&k - k.transpose()).amax() < 1e-10);
        assert!(ntk_lab::ntk::min_eigenvalue(&k) > -1e-8 * k.amax());
    }
}
