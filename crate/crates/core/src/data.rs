//! Seeded synthetic classification data, orthogonal-complement probes, and the
//! on-disk dataset container.
//!
//! Labels are held 0-based in memory (`0..num_classes`) and written 1-based on
//! disk, so a file label of `0` is always out of range.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, gaussian_vector, orthonormal_basis, project_out, rng_for};

const FILE_MAGIC: &str = "ntk-lab dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

/// A labelled sample matrix (one sample per row).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: DMatrix<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
    seed: Option<u64>,
}

impl Dataset {
    pub fn new(
        samples: DMatrix<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
        seed: Option<u64>,
    ) -> Result<Self> {
        let n = samples.nrows();
        if n == 0 || samples.ncols() == 0 {
            return Err(Error::Parameter("dataset needs N >= 1 and d >= 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::Parameter(format!("need C >= 2, got {num_classes}")));
        }
        if labels.len() != n {
            return Err(Error::Dimension { what: "labels", expected: n, got: labels.len() });
        }
        if splits.len() != n {
            return Err(Error::Dimension { what: "split tags", expected: n, got: splits.len() });
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::Parameter(format!(
                "row {i}: label {} outside 1..={num_classes}",
                labels[i] + 1
            )));
        }
        if let Some(i) = (0..n).find(|&i| samples.row(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::Parameter(format!("row {i}: non-finite sample entry")));
        }
        Ok(Dataset { samples, labels, splits, num_classes, seed })
    }

    /// All rows tagged `train`.
    pub fn from_train(samples: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = samples.nrows();
        Self::new(samples, labels, vec![Split::Train; n], num_classes, None)
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.samples.row(i).transpose()
    }

    /// Maximum Euclidean row norm, recomputed on every call.
    pub fn input_norm_bound(&self) -> f64 {
        (0..self.len())
            .map(|i| self.samples.row(i).norm())
            .fold(0.0, f64::max)
    }

    /// Rows carrying the given tag, or `None` when no row does.
    pub fn subset(&self, split: Split) -> Option<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        if idx.is_empty() {
            return None;
        }
        Some(self.select(&idx))
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let samples = self.samples.select_rows(idx.iter());
        Dataset {
            samples,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }

    /// Stratified, seeded assignment of split tags. Within each class the
    /// first `val` fraction goes to `val`, the next `test` fraction to `test`
    /// (after a seeded shuffle), the rest to `train`.
    pub fn assign_splits(&mut self, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<()> {
        use rand::seq::SliceRandom;
        if !(0.0..1.0).contains(&val_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || val_fraction + test_fraction >= 1.0
        {
            return Err(Error::Parameter("split fractions must be in [0,1) and sum below 1".into()));
        }
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            let mut rng = rng_for(seed, 1000 + class as u64);
            idx.shuffle(&mut rng);
            let n_val = (val_fraction * idx.len() as f64).round() as usize;
            let n_test = (test_fraction * idx.len() as f64).round() as usize;
            for (rank, &i) in idx.iter().enumerate() {
                self.splits[i] = if rank < n_val {
                    Split::Val
                } else if rank < n_val + n_test {
                    Split::Test
                } else {
                    Split::Train
                };
            }
        }
        Ok(())
    }

    /// Scales every row so that the maximum row norm equals `bound`.
    pub fn rescaled_to_norm_bound(&self, bound: f64) -> Result<Dataset> {
        let c = self.input_norm_bound();
        if c == 0.0 || !(bound > 0.0) {
            return Err(Error::Parameter("cannot rescale an all-zero dataset".into()));
        }
        let mut out = self.clone();
        out.samples *= bound / c;
        Ok(out)
    }
}

/// Isotropic Gaussian clusters around `separation * mu_k`, where the `mu_k`
/// are the first `C` columns of a seeded random orthogonal matrix.
pub fn gen_gaussian_clusters(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Parameter("n_per_class must be >= 1".into()));
    }
    if num_classes < 2 {
        return Err(Error::Parameter("need at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(Error::Parameter("need d >= 2".into()));
    }
    if num_classes > dim {
        return Err(Error::Parameter(format!(
            "{num_classes} orthogonal class means do not fit in R^{dim}"
        )));
    }
    if !(noise_scale > 0.0) || !separation.is_finite() {
        return Err(Error::Parameter("noise_scale must be > 0 and separation finite".into()));
    }

    let mut mean_rng = rng_for(seed, 0);
    let raw = gaussian_matrix(&mut mean_rng, dim, dim, 1.0);
    let basis = orthonormal_basis(raw.column_iter().map(|c| c.into_owned()), dim);
    if basis.len() < num_classes {
        return Err(Error::Degenerate("random orthogonal draw lost rank".into()));
    }

    let mut noise_rng = rng_for(seed, 1);
    let n = n_per_class * num_classes;
    let mut samples = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let mean = &basis[k] * separation;
        for s in 0..n_per_class {
            let row = &mean + gaussian_vector(&mut noise_rng, dim, noise_scale);
            samples.set_row(k * n_per_class + s, &row.transpose());
            labels.push(k);
        }
    }
    Dataset::new(samples, labels, vec![Split::Train; n], num_classes, Some(seed))
}

/// `m` unit-norm points orthogonal to every sample of `dataset`.
pub fn gen_orthogonal_probe(dataset: &Dataset, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let d = dataset.dim();
    let basis = orthonormal_basis((0..dataset.len()).map(|i| dataset.sample(i)), d);
    if basis.len() >= d {
        return Err(Error::EmptyComplement(d));
    }
    let mut rng = rng_for(seed, 7);
    let mut probes = DMatrix::zeros(m, d);
    let mut row = 0;
    while row < m {
        let mut v = gaussian_vector(&mut rng, d, 1.0);
        let n0 = v.norm();
        project_out(&mut v, &basis);
        let n = v.norm();
        // a draw almost inside the span loses too many digits; redraw
        if n <= 1e-6 * n0 {
            continue;
        }
        v /= n;
        probes.set_row(row, &v.transpose());
        row += 1;
    }
    Ok(probes)
}

/// Multi-class perceptron (Kesler construction with a bias column). Returns
/// `true` iff it reaches zero training errors within `max_epochs` passes.
pub fn perceptron_separable(
    features: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    max_epochs: usize,
) -> bool {
    let (n, p) = features.shape();
    let mut w = DMatrix::<f64>::zeros(num_classes, p + 1);
    let scale = (0..n).map(|i| features.row(i).norm()).fold(0.0, f64::max).max(1e-300);
    for _ in 0..max_epochs {
        let mut mistakes = 0;
        for i in 0..n {
            let mut x = DVector::zeros(p + 1);
            for j in 0..p {
                x[j] = features[(i, j)] / scale;
            }
            x[p] = 1.0;
            let scores = &w * &x;
            let y = labels[i];
            // strict margin against every other class, ties count as mistakes
            let worst = (0..num_classes)
                .filter(|&k| k != y)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .unwrap_or(y);
            if scores[y] <= scores[worst] {
                mistakes += 1;
                let mut ry = w.row_mut(y);
                ry += x.transpose();
                let mut rk = w.row_mut(worst);
                rk -= x.transpose();
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_string(dataset)).map_err(|e| Error::io(path, e))
}

pub fn dataset_to_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FILE_MAGIC}");
    let _ = writeln!(out, "samples {}", dataset.len());
    let _ = writeln!(out, "dim {}", dataset.dim());
    let _ = writeln!(out, "classes {}", dataset.num_classes);
    match dataset.seed {
        Some(s) => {
            let _ = writeln!(out, "seed {s}");
        }
        None => {
            let _ = writeln!(out, "seed none");
        }
    }
    let _ = writeln!(out, "# label split x_1 .. x_d");
    for i in 0..dataset.len() {
        let _ = write!(out, "{} {}", dataset.labels[i] + 1, dataset.splits[i].as_str());
        for v in dataset.samples.row(i).iter() {
            // `{:?}` prints the shortest string that round-trips exactly
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let fail = |line: usize, msg: String| Error::format(path, line, msg);

    let (ln, magic) = lines.next().ok_or_else(|| fail(1, "empty file".into()))?;
    if magic.trim() != FILE_MAGIC {
        return Err(fail(ln, format!("expected header {FILE_MAGIC:?}")));
    }
    let mut header = |key: &str| -> Result<(usize, String)> {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| fail(0, format!("missing {key:?} header")))?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(v), None) if k == key => Ok((ln, v.to_string())),
            _ => Err(fail(ln, format!("expected `{key} <value>`"))),
        }
    };
    let parse_count = |(ln, v): (usize, String)| -> Result<usize> {
        v.parse::<usize>().map_err(|_| fail(ln, format!("not a count: {v:?}")))
    };
    let n = parse_count(header("samples")?)?;
    let d = parse_count(header("dim")?)?;
    let c = parse_count(header("classes")?)?;
    let (seed_ln, seed_str) = header("seed")?;
    let seed = if seed_str == "none" {
        None
    } else {
        Some(seed_str.parse::<u64>().map_err(|_| fail(seed_ln, "bad seed".into()))?)
    };
    if n == 0 || d == 0 || c < 2 {
        return Err(fail(seed_ln, "need samples >= 1, dim >= 1, classes >= 2".into()));
    }

    let mut samples = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut row = 0;
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if row == n {
            return Err(fail(ln, format!("more than {n} sample rows")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != d + 2 {
            return Err(fail(ln, format!("row {}: expected {} fields, got {}", row + 1, d + 2, fields.len())));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| fail(ln, format!("row {}: bad label {:?}", row + 1, fields[0])))?;
        if label == 0 || label > c {
            return Err(fail(ln, format!("row {}: label {label} outside 1..={c}", row + 1)));
        }
        let split: Split = fields[1].parse().map_err(|e| fail(ln, format!("row {}: {e}", row + 1)))?;
        for j in 0..d {
            let v: f64 = fields[j + 2]
                .parse()
                .map_err(|_| fail(ln, format!("row {}: bad number {:?}", row + 1, fields[j + 2])))?;
            if !v.is_finite() {
                return Err(fail(ln, format!("row {}: non-finite entry {:?}", row + 1, fields[j + 2])));
            }
            samples[(row, j)] = v;
        }
        labels.push(label - 1);
        splits.push(split);
        row += 1;
    }
    if row != n {
        return Err(fail(text.lines().count(), format!("expected {n} sample rows, found {row}")));
    }
    Dataset::new(samples, labels, splits, c, seed)
}
