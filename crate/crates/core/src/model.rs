//! Models under study: a linear head `f(x) = V phi(x) + b` on top of a linear,
//! tanh-MLP, or LoRA-adapted linear feature extractor.
//!
//! Flattened parameter order is fixed: head weight `V` row-major, then `b`,
//! then the feature parameters layer by layer (each weight row-major followed
//! by its bias). For the LoRA branch the feature parameters are `B_lora`
//! (h x r) row-major followed by `A_lora` (r x d) row-major; the base matrix
//! is frozen and not part of the parameter vector.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{flatten_row_major, from_row_major, gaussian_matrix, rng_for};

const MODEL_MAGIC: &str = "ntk-lab model v1";

/// Classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `V`, C x h.
    pub weight: DMatrix<f64>,
    /// `b`, length C.
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Low-rank adapter on a frozen base matrix: `phi(x) = (B0 + B_lora A_lora) x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub base: DMatrix<f64>,
    /// `A_lora`, r x d.
    pub down: DMatrix<f64>,
    /// `B_lora`, h x r.
    pub up: DMatrix<f64>,
    pub init_variance: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.down.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    /// `phi(x) = B x`.
    Linear { weight: DMatrix<f64> },
    /// tanh after every layer except the last, which is a plain affine map.
    Mlp { layers: Vec<DenseLayer> },
    Lora(LoraAdapter),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
    Lora { rank: usize, variance: f64 },
}

impl Architecture {
    /// Two tanh hidden layers of width 32.
    pub fn default_mlp() -> Self {
        Architecture::Mlp { hidden: vec![32, 32] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadInit {
    Zeros,
    Gaussian { scale: f64 },
}

/// Disjoint, exhaustive ranges of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub head_weight: Range<usize>,
    pub head_bias: Range<usize>,
    pub feature: Range<usize>,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.feature.end
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub features: DVector<f64>,
    pub logits: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub head: Head,
    pub feature: FeatureExtractor,
}

pub fn init_model(
    arch: &Architecture,
    input_dim: usize,
    feature_dim: usize,
    num_classes: usize,
    head_init: HeadInit,
    seed: u64,
) -> Result<ModelState> {
    if input_dim == 0 || feature_dim == 0 || num_classes == 0 {
        return Err(Error::Parameter("dimensions must be positive".into()));
    }
    let mut feat_rng = rng_for(seed, 100);
    let feature = match arch {
        Architecture::Linear => FeatureExtractor::Linear {
            weight: gaussian_matrix(&mut feat_rng, feature_dim, input_dim, (input_dim as f64).recip().sqrt()),
        },
        Architecture::Mlp { hidden } => {
            if hidden.iter().any(|&w| w == 0) {
                return Err(Error::Parameter("hidden widths must be positive".into()));
            }
            let mut dims = vec![input_dim];
            dims.extend(hidden.iter().copied());
            dims.push(feature_dim);
            let layers = dims
                .windows(2)
                .map(|w| DenseLayer {
                    weight: gaussian_matrix(&mut feat_rng, w[1], w[0], (w[0] as f64).recip().sqrt()),
                    bias: DVector::zeros(w[1]),
                })
                .collect();
            FeatureExtractor::Mlp { layers }
        }
        Architecture::Lora { rank, variance } => {
            if *rank == 0 || *rank > input_dim.min(feature_dim) {
                return Err(Error::Parameter(format!(
                    "LoRA rank {rank} must lie in 1..={}",
                    input_dim.min(feature_dim)
                )));
            }
            if !(*variance > 0.0) {
                return Err(Error::Parameter("LoRA init variance must be > 0".into()));
            }
            let base = gaussian_matrix(&mut feat_rng, feature_dim, input_dim, (input_dim as f64).recip().sqrt());
            let mut lora_rng = rng_for(seed, 300);
            FeatureExtractor::Lora(LoraAdapter {
                base,
                down: gaussian_matrix(&mut lora_rng, *rank, input_dim, variance.sqrt()),
                up: DMatrix::zeros(feature_dim, *rank),
                init_variance: *variance,
            })
        }
    };
    let head = match head_init {
        HeadInit::Zeros => Head {
            weight: DMatrix::zeros(num_classes, feature_dim),
            bias: DVector::zeros(num_classes),
        },
        HeadInit::Gaussian { scale } => {
            if !(scale > 0.0) {
                return Err(Error::Parameter("head init scale must be > 0".into()));
            }
            let mut head_rng = rng_for(seed, 200);
            let weight = gaussian_matrix(&mut head_rng, num_classes, feature_dim, scale);
            let bias = gaussian_matrix(&mut head_rng, num_classes, 1, scale).column(0).into_owned();
            Head { weight, bias }
        }
    };
    Ok(ModelState { head, feature })
}

/// Fresh LoRA adapter on `base` (a linear model), keeping the head. `B_lora`
/// starts at zero and `A_lora` is drawn with the given variance.
pub fn attach_lora(base: &ModelState, rank: usize, variance: f64, seed: u64, stream: u64) -> Result<ModelState> {
    let FeatureExtractor::Linear { weight } = &base.feature else {
        return Err(Error::Unsupported("LoRA attaches only to the linear feature extractor".into()));
    };
    let (h, d) = weight.shape();
    if rank == 0 || rank > h.min(d) {
        return Err(Error::Parameter(format!("LoRA rank {rank} must lie in 1..={}", h.min(d))));
    }
    if !(variance > 0.0) {
        return Err(Error::Parameter("LoRA init variance must be > 0".into()));
    }
    let mut rng = rng_for(seed, stream);
    Ok(ModelState {
        head: base.head.clone(),
        feature: FeatureExtractor::Lora(LoraAdapter {
            base: weight.clone(),
            down: gaussian_matrix(&mut rng, rank, d, variance.sqrt()),
            up: DMatrix::zeros(h, rank),
            init_variance: variance,
        }),
    })
}

struct MlpTape {
    /// activations a_0 = x, a_1, ..., a_L
    acts: Vec<DVector<f64>>,
}

impl ModelState {
    pub fn num_classes(&self) -> usize {
        self.head.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.weight.ncols()
    }

    pub fn input_dim(&self) -> usize {
        match &self.feature {
            FeatureExtractor::Linear { weight } => weight.ncols(),
            FeatureExtractor::Mlp { layers } => layers[0].weight.ncols(),
            FeatureExtractor::Lora(l) => l.base.ncols(),
        }
    }

    pub fn arch_name(&self) -> &'static str {
        match &self.feature {
            FeatureExtractor::Linear { .. } => "linear",
            FeatureExtractor::Mlp { .. } => "mlp",
            FeatureExtractor::Lora(_) => "lora",
        }
    }

    pub fn num_feature_params(&self) -> usize {
        match &self.feature {
            FeatureExtractor::Linear { weight } => weight.len(),
            FeatureExtractor::Mlp { layers } => layers.iter().map(|l| l.weight.len() + l.bias.len()).sum(),
            FeatureExtractor::Lora(l) => l.up.len() + l.down.len(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        let vw = self.head.weight.len();
        let c = self.num_classes();
        ParamLayout {
            head_weight: 0..vw,
            head_bias: vw..vw + c,
            feature: vw + c..vw + c + self.num_feature_params(),
        }
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension { what: "input vector", expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    /// `phi(x)` without a dimension check.
    pub(crate) fn features_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.feature {
            FeatureExtractor::Linear { weight } => weight * x,
            FeatureExtractor::Mlp { .. } => self.mlp_tape(x).acts.pop().expect("non-empty tape"),
            FeatureExtractor::Lora(l) => &l.base * x + &l.up * (&l.down * x),
        }
    }

    pub fn features(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.features_unchecked(x))
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<Forward> {
        let features = self.features(x)?;
        let logits = &self.head.weight * &features + &self.head.bias;
        Ok(Forward { features, logits })
    }

    /// Features of every row of `samples`, as an N x h matrix.
    pub fn feature_matrix(&self, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if samples.ncols() != self.input_dim() {
            return Err(Error::Dimension { what: "sample columns", expected: self.input_dim(), got: samples.ncols() });
        }
        let mut out = DMatrix::zeros(samples.nrows(), self.feature_dim());
        for i in 0..samples.nrows() {
            let x = samples.row(i).transpose();
            out.set_row(i, &self.features_unchecked(&x).transpose());
        }
        Ok(out)
    }

    /// Logits of every row of `samples`, as an N x C matrix.
    pub fn logit_matrix(&self, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let feats = self.feature_matrix(samples)?;
        let mut out = feats * self.head.weight.transpose();
        for mut row in out.row_iter_mut() {
            row += self.head.bias.transpose();
        }
        Ok(out)
    }

    fn mlp_tape(&self, x: &DVector<f64>) -> MlpTape {
        let FeatureExtractor::Mlp { layers } = &self.feature else {
            unreachable!("mlp_tape on a non-MLP model")
        };
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.clone());
        for (l, layer) in layers.iter().enumerate() {
            let z = &layer.weight * acts.last().expect("non-empty") + &layer.bias;
            let a = if l + 1 < layers.len() { z.map(f64::tanh) } else { z };
            acts.push(a);
        }
        MlpTape { acts }
    }

    /// `d phi(x) / d theta_phi`, h x p_phi.
    pub fn feature_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.feature_jacobian_unchecked(x))
    }

    pub(crate) fn feature_jacobian_unchecked(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let h = self.feature_dim();
        let p = self.num_feature_params();
        let mut jac = DMatrix::zeros(h, p);
        match &self.feature {
            FeatureExtractor::Linear { weight } => {
                let d = weight.ncols();
                for a in 0..h {
                    for c in 0..d {
                        jac[(a, a * d + c)] = x[c];
                    }
                }
            }
            FeatureExtractor::Lora(l) => {
                let r = l.rank();
                let d = l.base.ncols();
                let ax = &l.down * x;
                // B_lora block: d phi_a / d B[a', s] = delta_{a a'} (A x)_s
                for a in 0..h {
                    for s in 0..r {
                        jac[(a, a * r + s)] = ax[s];
                    }
                }
                // A_lora block: d phi_a / d A[s, c] = B[a, s] x_c
                let off = h * r;
                for a in 0..h {
                    for s in 0..r {
                        let bas = l.up[(a, s)];
                        for c in 0..d {
                            jac[(a, off + s * d + c)] = bas * x[c];
                        }
                    }
                }
            }
            FeatureExtractor::Mlp { layers } => {
                let tape = self.mlp_tape(x);
                let offsets = mlp_offsets(layers);
                // sensitivity of phi w.r.t. the current layer's pre-activation
                let mut sens = DMatrix::<f64>::identity(h, h);
                for l in (0..layers.len()).rev() {
                    let layer = &layers[l];
                    let input = &tape.acts[l];
                    let (out_dim, in_dim) = layer.weight.shape();
                    let w_off = offsets[l];
                    let b_off = w_off + out_dim * in_dim;
                    for a in 0..h {
                        for o in 0..out_dim {
                            let g = sens[(a, o)];
                            if g == 0.0 {
                                continue;
                            }
                            for j in 0..in_dim {
                                jac[(a, w_off + o * in_dim + j)] = g * input[j];
                            }
                            jac[(a, b_off + o)] = g;
                        }
                    }
                    if l > 0 {
                        let mut next = &sens * &layer.weight;
                        for j in 0..in_dim {
                            let t = input[j];
                            next.column_mut(j).scale_mut(1.0 - t * t);
                        }
                        sens = next;
                    }
                }
            }
        }
        jac
    }

    /// `J_phi(x)^T g` without materializing the Jacobian.
    pub(crate) fn feature_vjp(&self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_feature_params());
        match &self.feature {
            FeatureExtractor::Linear { weight } => {
                let d = weight.ncols();
                for a in 0..g.len() {
                    for c in 0..d {
                        out[a * d + c] = g[a] * x[c];
                    }
                }
            }
            FeatureExtractor::Lora(l) => {
                let (h, r, d) = (l.up.nrows(), l.rank(), l.base.ncols());
                let ax = &l.down * x;
                for a in 0..h {
                    for s in 0..r {
                        out[a * r + s] = g[a] * ax[s];
                    }
                }
                let btg = l.up.transpose() * g;
                let off = h * r;
                for s in 0..r {
                    for c in 0..d {
                        out[off + s * d + c] = btg[s] * x[c];
                    }
                }
            }
            FeatureExtractor::Mlp { layers } => {
                let tape = self.mlp_tape(x);
                let offsets = mlp_offsets(layers);
                let mut sens = g.clone();
                for l in (0..layers.len()).rev() {
                    let layer = &layers[l];
                    let input = &tape.acts[l];
                    let (out_dim, in_dim) = layer.weight.shape();
                    let w_off = offsets[l];
                    let b_off = w_off + out_dim * in_dim;
                    for o in 0..out_dim {
                        for j in 0..in_dim {
                            out[w_off + o * in_dim + j] = sens[o] * input[j];
                        }
                        out[b_off + o] = sens[o];
                    }
                    if l > 0 {
                        let mut next = layer.weight.transpose() * &sens;
                        for j in 0..in_dim {
                            let t = input[j];
                            next[j] *= 1.0 - t * t;
                        }
                        sens = next;
                    }
                }
            }
        }
        out
    }

    /// `d f(x) / d theta` over all parameters, C x p, in the documented order.
    pub fn full_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let layout = self.layout();
        let (c, h) = self.head.weight.shape();
        let phi = self.features_unchecked(x);
        let mut jac = DMatrix::zeros(c, layout.total());
        for k in 0..c {
            for j in 0..h {
                jac[(k, layout.head_weight.start + k * h + j)] = phi[j];
            }
            jac[(k, layout.head_bias.start + k)] = 1.0;
        }
        let feat_block = &self.head.weight * self.feature_jacobian_unchecked(x);
        jac.view_mut((0, layout.feature.start), (c, layout.feature.len()))
            .copy_from(&feat_block);
        Ok(jac)
    }

    pub fn feature_params(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.num_feature_params());
        match &self.feature {
            FeatureExtractor::Linear { weight } => v.extend(flatten_row_major(weight)),
            FeatureExtractor::Mlp { layers } => {
                for l in layers {
                    v.extend(flatten_row_major(&l.weight));
                    v.extend(l.bias.iter().copied());
                }
            }
            FeatureExtractor::Lora(l) => {
                v.extend(flatten_row_major(&l.up));
                v.extend(flatten_row_major(&l.down));
            }
        }
        DVector::from_vec(v)
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut v: Vec<f64> = flatten_row_major(&self.head.weight).collect();
        v.extend(self.head.bias.iter().copied());
        v.extend(self.feature_params().iter().copied());
        DVector::from_vec(v)
    }

    /// Same architecture with every parameter replaced from `theta`.
    pub fn with_params(&self, theta: &DVector<f64>) -> Result<ModelState> {
        let layout = self.layout();
        if theta.len() != layout.total() {
            return Err(Error::Dimension { what: "parameter vector", expected: layout.total(), got: theta.len() });
        }
        let (c, h) = self.head.weight.shape();
        let s = theta.as_slice();
        let head = Head {
            weight: from_row_major(c, h, &s[layout.head_weight.clone()]),
            bias: DVector::from_column_slice(&s[layout.head_bias.clone()]),
        };
        let mut out = self.with_feature_params(&s[layout.feature])?;
        out.head = head;
        Ok(out)
    }

    pub fn with_feature_params(&self, s: &[f64]) -> Result<ModelState> {
        if s.len() != self.num_feature_params() {
            return Err(Error::Dimension { what: "feature parameters", expected: self.num_feature_params(), got: s.len() });
        }
        let feature = match &self.feature {
            FeatureExtractor::Linear { weight } => FeatureExtractor::Linear {
                weight: from_row_major(weight.nrows(), weight.ncols(), s),
            },
            FeatureExtractor::Mlp { layers } => {
                let mut off = 0;
                let layers = layers
                    .iter()
                    .map(|l| {
                        let (o, i) = l.weight.shape();
                        let weight = from_row_major(o, i, &s[off..off + o * i]);
                        off += o * i;
                        let bias = DVector::from_column_slice(&s[off..off + o]);
                        off += o;
                        DenseLayer { weight, bias }
                    })
                    .collect();
                FeatureExtractor::Mlp { layers }
            }
            FeatureExtractor::Lora(l) => {
                let (h, r) = l.up.shape();
                let d = l.down.ncols();
                FeatureExtractor::Lora(LoraAdapter {
                    base: l.base.clone(),
                    up: from_row_major(h, r, &s[..h * r]),
                    down: from_row_major(r, d, &s[h * r..h * r + r * d]),
                    init_variance: l.init_variance,
                })
            }
        };
        Ok(ModelState { head: self.head.clone(), feature })
    }

    /// Head `(s V, s b)` with the same feature extractor.
    pub fn with_scaled_head(&self, s: f64) -> ModelState {
        ModelState {
            head: Head { weight: &self.head.weight * s, bias: &self.head.bias * s },
            feature: self.feature.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

fn mlp_offsets(layers: &[DenseLayer]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in layers {
        offs.push(off);
        off += l.weight.len() + l.bias.len();
    }
    offs
}

// ---------------------------------------------------------------------------
// checkpoints

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn model_to_string(model: &ModelState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC}");
    let _ = writeln!(out, "arch {}", model.arch_name());
    write_matrix(&mut out, "head_weight", &model.head.weight);
    write_matrix(&mut out, "head_bias", &DMatrix::from_column_slice(1, model.head.bias.len(), model.head.bias.as_slice()));
    match &model.feature {
        FeatureExtractor::Linear { weight } => write_matrix(&mut out, "feature_weight", weight),
        FeatureExtractor::Mlp { layers } => {
            for (l, layer) in layers.iter().enumerate() {
                write_matrix(&mut out, &format!("layer{l}_weight"), &layer.weight);
                let b = &layer.bias;
                write_matrix(&mut out, &format!("layer{l}_bias"), &DMatrix::from_column_slice(1, b.len(), b.as_slice()));
            }
        }
        FeatureExtractor::Lora(l) => {
            let _ = writeln!(out, "lora_variance {:?}", l.init_variance);
            write_matrix(&mut out, "lora_base", &l.base);
            write_matrix(&mut out, "lora_up", &l.up);
            write_matrix(&mut out, "lora_down", &l.down);
        }
    }
    out
}

pub fn save_model(model: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, path)
}

struct Cursor<'t> {
    lines: Vec<(usize, &'t str)>,
    pos: usize,
    path: &'t Path,
}

impl<'t> Cursor<'t> {
    fn fail(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::format(self.path, line, msg)
    }

    fn peek(&self) -> Option<&'t str> {
        self.lines.get(self.pos).map(|&(_, l)| l)
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'t str)> {
        let item = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.fail(0, format!("unexpected end of file, wanted {what}")))?;
        self.pos += 1;
        Ok(item)
    }

    fn read_matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let (ln, head) = self.next(name)?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "matrix" || parts[1] != name {
            return Err(self.fail(ln, format!("expected `matrix {name} <rows> <cols>`")));
        }
        let rows: usize = parts[2].parse().map_err(|_| self.fail(ln, "bad row count"))?;
        let cols: usize = parts[3].parse().map_err(|_| self.fail(ln, "bad column count"))?;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let (ln, row) = self.next(name)?;
            let vals: Vec<&str> = row.split_whitespace().collect();
            if vals.len() != cols {
                return Err(self.fail(ln, format!("{name} row {}: expected {cols} values", i + 1)));
            }
            for (j, v) in vals.iter().enumerate() {
                let x: f64 = v.parse().map_err(|_| self.fail(ln, format!("{name} row {}: bad number {v:?}", i + 1)))?;
                if !x.is_finite() {
                    return Err(self.fail(ln, format!("{name} row {}: non-finite entry", i + 1)));
                }
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }

    fn read_vector(&mut self, name: &str) -> Result<DVector<f64>> {
        let m = self.read_matrix(name)?;
        Ok(DVector::from_iterator(m.len(), m.iter().copied()))
    }
}

pub fn parse_model(text: &str, path: &Path) -> Result<ModelState> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let mut cur = Cursor { lines, pos: 0, path };
    let (ln, magic) = cur.next("header")?;
    if magic != MODEL_MAGIC {
        return Err(cur.fail(ln, format!("expected header {MODEL_MAGIC:?}")));
    }
    let (arch_ln, arch_line) = cur.next("arch")?;
    let arch = arch_line
        .strip_prefix("arch ")
        .ok_or_else(|| cur.fail(arch_ln, "expected `arch <name>`"))?;

    let weight = cur.read_matrix("head_weight")?;
    let bias = cur.read_vector("head_bias")?;
    let feature = match arch {
        "linear" => FeatureExtractor::Linear { weight: cur.read_matrix("feature_weight")? },
        "mlp" => {
            let mut layers = Vec::new();
            loop {
                let l = layers.len();
                let Some(peek) = cur.peek() else { break };
                if !peek.starts_with(&format!("matrix layer{l}_weight ")) {
                    break;
                }
                let w = cur.read_matrix(&format!("layer{l}_weight"))?;
                let b = cur.read_vector(&format!("layer{l}_bias"))?;
                layers.push(DenseLayer { weight: w, bias: b });
            }
            if layers.is_empty() {
                return Err(cur.fail(0, "MLP checkpoint without layers"));
            }
            FeatureExtractor::Mlp { layers }
        }
        "lora" => {
            let (ln, var_line) = cur.next("lora_variance")?;
            let init_variance: f64 = var_line
                .strip_prefix("lora_variance ")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| cur.fail(ln, "expected `lora_variance <value>`"))?;
            FeatureExtractor::Lora(LoraAdapter {
                base: cur.read_matrix("lora_base")?,
                up: cur.read_matrix("lora_up")?,
                down: cur.read_matrix("lora_down")?,
                init_variance,
            })
        }
        other => return Err(cur.fail(arch_ln, format!("unknown architecture {other:?}"))),
    };
    if let Some((ln, _)) = cur.lines.get(cur.pos) {
        return Err(cur.fail(*ln, "trailing content after the last block"));
    }
    let model = ModelState { head: Head { weight, bias }, feature };
    validate_shapes(&model).map_err(|msg| cur.fail(0, msg))?;
    Ok(model)
}

fn validate_shapes(m: &ModelState) -> std::result::Result<(), String> {
    let (c, h) = m.head.weight.shape();
    if m.head.bias.len() != c {
        return Err("head bias length differs from class count".into());
    }
    match &m.feature {
        FeatureExtractor::Linear { weight } if weight.nrows() != h => Err("feature weight rows != head columns".into()),
        FeatureExtractor::Mlp { layers } => {
            for w in layers.windows(2) {
                if w[1].weight.ncols() != w[0].weight.nrows() {
                    return Err("MLP layer dimensions do not chain".into());
                }
            }
            for l in layers {
                if l.bias.len() != l.weight.nrows() {
                    return Err("MLP bias length mismatch".into());
                }
            }
            if layers.last().map(|l| l.weight.nrows()) != Some(h) {
                return Err("MLP output width != head columns".into());
            }
            Ok(())
        }
        FeatureExtractor::Lora(l) => {
            let (bh, d) = l.base.shape();
            let r = l.down.nrows();
            if bh != h || l.up.shape() != (h, r) || l.down.ncols() != d {
                Err("LoRA matrix shapes inconsistent".into())
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}
