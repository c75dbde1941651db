//! Small dense helpers shared by the other modules.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Relative tolerance below which a Gram–Schmidt residual counts as dependent.
pub const GS_REL_TOL: f64 = 1e-12;

/// Seeded generator for a given stream. Streams are independent, so per-trial
/// randomness does not depend on evaluation order.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_matrix<R: rand::Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> DMatrix<f64> {
    // row-major fill so the draw order matches the documented flattening order
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = scale * z;
        }
    }
    m
}

pub fn gaussian_vector<R: rand::Rng + ?Sized>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        len,
        (0..len).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        }),
    )
}

/// Orthonormal basis (as columns) of the span of `vectors`, by modified
/// Gram–Schmidt with one re-orthogonalization pass. Vectors whose residual
/// falls below `GS_REL_TOL` of their original norm are dropped.
pub fn orthonormal_basis<'a, I>(vectors: I, dim: usize) -> Vec<DVector<f64>>
where
    I: IntoIterator<Item = DVector<f64>>,
{
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        debug_assert_eq!(v.len(), dim);
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut w = v;
        for _pass in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let n = w.norm();
        if n > GS_REL_TOL * norm0 {
            basis.push(w / n);
        }
        if basis.len() == dim {
            break;
        }
    }
    basis
}

/// Removes the components of `v` along the orthonormal `basis` (two passes).
pub fn project_out(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _pass in 0..2 {
        for q in basis {
            let c = q.dot(v);
            v.axpy(-c, q, 1.0);
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exps = logits.map(|z| (z - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// `log(sum(exp(z)))`, overflow-safe.
pub fn log_sum_exp(logits: &DVector<f64>) -> f64 {
    let max = logits.max();
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-major flattening of a matrix.
pub fn flatten_row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    debug_assert_eq!(data.len(), rows * cols);
    DMatrix::from_row_slice(rows, cols, data)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// `(K + K^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
