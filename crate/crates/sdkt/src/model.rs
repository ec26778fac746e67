//! Two-layer tanh encoder with L2-normalized output features, a frozen
//! prototype classifier, and the cross-entropy objective with its analytic
//! gradient.
//!
//! Feature vectors live on the unit sphere, so cosine similarity between a
//! feature and a prototype row is a plain dot product.

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dot, norm, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabelId = u32;

/// Raw encoder outputs with norm below this are rejected as degenerate.
pub const DEGENERATE_NORM_MIN: f64 = 1e-12;
/// Tolerance for the unit-norm invariant of features and prototypes.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Weights of the encoder `x -> normalize(W2 tanh(W1 x + b1) + b2)`.
///
/// Three snapshots of this type coexist during a stage: the pre-trained
/// teacher, the most recent fine-tuned teacher, and the student. Gradients
/// and optimizer moments reuse the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// hidden_dim x input_dim, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// feature_dim x hidden_dim, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderParams {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || feature_dim == 0 {
            return Err(Error::param("encoder dimensions must be positive"));
        }
        if w1.len() != hidden_dim * input_dim
            || b1.len() != hidden_dim
            || w2.len() != feature_dim * hidden_dim
            || b2.len() != feature_dim
        {
            return Err(Error::shape(
                "encoder tensor lengths inconsistent with declared dimensions",
            ));
        }
        let params = EncoderParams {
            input_dim,
            hidden_dim,
            feature_dim,
            w1,
            b1,
            w2,
            b2,
        };
        if !params.all_finite() {
            return Err(Error::Numeric("encoder weights contain non-finite entries".into()));
        }
        Ok(params)
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, feature_dim: usize) -> Self {
        EncoderParams {
            input_dim,
            hidden_dim,
            feature_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; feature_dim * hidden_dim],
            b2: vec![0.0; feature_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(self.input_dim, self.hidden_dim, self.feature_dim)
    }

    /// Fresh random weights: fan-in scaled Gaussians for the two weight
    /// matrices, zero first bias, and a small random output bias so the raw
    /// feature is never the zero vector.
    pub fn random_init(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut normal = |scale: f64| -> f64 {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        };
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let w1: Vec<f64> = (0..hidden_dim * input_dim).map(|_| normal(s1)).collect();
        let b1 = vec![0.0; hidden_dim];
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        let w2: Vec<f64> = (0..feature_dim * hidden_dim).map(|_| normal(s2)).collect();
        let b2: Vec<f64> = (0..feature_dim).map(|_| normal(0.1)).collect();
        EncoderParams {
            input_dim,
            hidden_dim,
            feature_dim,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.input_dim == other.input_dim
            && self.hidden_dim == other.hidden_dim
            && self.feature_dim == other.feature_dim
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.w1) && all_finite(&self.b1) && all_finite(&self.w2) && all_finite(&self.b2)
    }

    /// Total number of scalar entries, flat order `w1, b1, w2, b2`.
    pub fn num_entries(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn entry(&self, idx: usize) -> f64 {
        let (t, i) = self.locate(idx);
        match t {
            0 => self.w1[i],
            1 => self.b1[i],
            2 => self.w2[i],
            _ => self.b2[i],
        }
    }

    pub fn set_entry(&mut self, idx: usize, value: f64) {
        let (t, i) = self.locate(idx);
        match t {
            0 => self.w1[i] = value,
            1 => self.b1[i] = value,
            2 => self.w2[i] = value,
            _ => self.b2[i] = value,
        }
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (t, len) in [self.w1.len(), self.b1.len(), self.w2.len(), self.b2.len()]
            .into_iter()
            .enumerate()
        {
            if idx < len {
                return (t, idx);
            }
            idx -= len;
        }
        panic!("entry index out of range");
    }

    /// Largest absolute entrywise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &EncoderParams) -> f64 {
        assert!(self.same_shape(other));
        let mut m: f64 = 0.0;
        for i in 0..self.num_entries() {
            m = m.max((self.entry(i) - other.entry(i)).abs());
        }
        m
    }
}

/// Unit-norm embedding in the encoder's feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec(Vec<f64>);

impl FeatureVec {
    /// Wraps an already-normalized vector, checking the unit-norm invariant.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        if !all_finite(&values) {
            return Err(Error::Numeric("feature vector has non-finite entries".into()));
        }
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::param(format!(
                "feature vector norm {n} outside unit tolerance"
            )));
        }
        Ok(FeatureVec(values))
    }

    /// Internal constructor for vectors normalized by `forward`.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        FeatureVec(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One unit-norm row per class label; stands in for a frozen text tower.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: Matrix,
    label_ids: Vec<LabelId>,
}

impl PrototypeSet {
    pub fn new(prototypes: Matrix, label_ids: Vec<LabelId>) -> Result<Self> {
        if prototypes.rows() == 0 {
            return Err(Error::EmptyInput("prototype set needs at least one class".into()));
        }
        if prototypes.rows() != label_ids.len() {
            return Err(Error::shape(format!(
                "{} prototype rows vs {} label ids",
                prototypes.rows(),
                label_ids.len()
            )));
        }
        for i in 0..prototypes.rows() {
            let n = norm(prototypes.row(i));
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::param(format!(
                    "prototype row {i} has norm {n}, expected unit"
                )));
            }
        }
        let mut seen = label_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != label_ids.len() {
            return Err(Error::param("duplicate label ids in prototype set"));
        }
        Ok(PrototypeSet {
            prototypes,
            label_ids,
        })
    }

    /// Fixed random unit rows, one per label, drawn once per experiment seed.
    pub fn random(label_ids: Vec<LabelId>, feature_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut rows = Vec::with_capacity(label_ids.len());
        for _ in 0..label_ids.len() {
            loop {
                let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = norm(&v);
                if n > DEGENERATE_NORM_MIN {
                    v.iter_mut().for_each(|x| *x /= n);
                    rows.push(v);
                    break;
                }
            }
        }
        PrototypeSet::new(Matrix::from_rows(&rows)?, label_ids)
    }

    pub fn len(&self) -> usize {
        self.label_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn label_ids(&self) -> &[LabelId] {
        &self.label_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.prototypes.row(i)
    }

    pub fn index_of(&self, label: LabelId) -> Option<usize> {
        self.label_ids.iter().position(|&l| l == label)
    }

    /// Restriction to the given labels, kept in the given order.
    pub fn subset(&self, labels: &[LabelId]) -> Result<PrototypeSet> {
        let mut rows = Vec::with_capacity(labels.len());
        for &l in labels {
            let i = self
                .index_of(l)
                .ok_or(Error::UnknownLabel(l))?;
            rows.push(self.prototypes.row(i).to_vec());
        }
        PrototypeSet::new(Matrix::from_rows(&rows)?, labels.to_vec())
    }
}

/// A batch of labeled inputs from one task.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<LabelId>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<LabelId>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyInput("batch must contain at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} input rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct ForwardCache {
    /// tanh layer output, length hidden_dim.
    pub hidden: Vec<f64>,
    /// normalized feature, length feature_dim.
    pub feature: Vec<f64>,
    /// norm of the raw (pre-normalization) feature.
    pub raw_norm: f64,
}

pub(crate) fn forward(params: &EncoderParams, x: &[f64]) -> Result<ForwardCache> {
    if x.len() != params.input_dim {
        return Err(Error::shape(format!(
            "input length {} vs encoder input_dim {}",
            x.len(),
            params.input_dim
        )));
    }
    if !all_finite(x) {
        return Err(Error::Numeric("encoder input has non-finite entries".into()));
    }
    let h_dim = params.hidden_dim;
    let f_dim = params.feature_dim;
    let mut hidden = vec![0.0; h_dim];
    for i in 0..h_dim {
        let row = &params.w1[i * params.input_dim..(i + 1) * params.input_dim];
        hidden[i] = (params.b1[i] + dot(row, x)).tanh();
    }
    let mut raw = vec![0.0; f_dim];
    for i in 0..f_dim {
        let row = &params.w2[i * h_dim..(i + 1) * h_dim];
        raw[i] = params.b2[i] + dot(row, &hidden);
    }
    let raw_norm = norm(&raw);
    if !raw_norm.is_finite() {
        return Err(Error::Numeric("encoder output is non-finite".into()));
    }
    if raw_norm < DEGENERATE_NORM_MIN {
        return Err(Error::DegenerateFeature {
            norm: raw_norm,
            min: DEGENERATE_NORM_MIN,
        });
    }
    let feature: Vec<f64> = raw.iter().map(|v| v / raw_norm).collect();
    Ok(ForwardCache {
        hidden,
        feature,
        raw_norm,
    })
}

/// Encodes one input to a unit-norm feature vector.
pub fn encode(params: &EncoderParams, x: &[f64]) -> Result<FeatureVec> {
    let cache = forward(params, x)?;
    Ok(FeatureVec::from_normalized(cache.feature))
}

/// Accumulates the gradient of `scale * (dldf . f(theta))` into `grad`,
/// where `dldf` is the loss gradient with respect to the normalized feature.
pub(crate) fn backprop_feature_grad(
    params: &EncoderParams,
    x: &[f64],
    cache: &ForwardCache,
    dldf: &[f64],
    scale: f64,
    grad: &mut EncoderParams,
) {
    let d_dim = params.input_dim;
    let h_dim = params.hidden_dim;
    let f_dim = params.feature_dim;
    let f = &cache.feature;
    let h = &cache.hidden;

    // Through the normalization f = r / |r|.
    let mut scaled = vec![0.0; f_dim];
    for i in 0..f_dim {
        scaled[i] = scale * dldf[i];
    }
    let f_dot = dot(f, &scaled);
    let mut dldr = vec![0.0; f_dim];
    for i in 0..f_dim {
        dldr[i] = (scaled[i] - f[i] * f_dot) / cache.raw_norm;
    }

    // Second affine layer.
    for i in 0..f_dim {
        grad.b2[i] += dldr[i];
        let row = &mut grad.w2[i * h_dim..(i + 1) * h_dim];
        for k in 0..h_dim {
            row[k] += dldr[i] * h[k];
        }
    }
    let mut dldh = vec![0.0; h_dim];
    for k in 0..h_dim {
        let mut acc = 0.0;
        for i in 0..f_dim {
            acc += params.w2[i * h_dim + k] * dldr[i];
        }
        dldh[k] = acc;
    }

    // tanh and first affine layer.
    for i in 0..h_dim {
        let dldz = dldh[i] * (1.0 - h[i] * h[i]);
        grad.b1[i] += dldz;
        let row = &mut grad.w1[i * d_dim..(i + 1) * d_dim];
        for j in 0..d_dim {
            row[j] += dldz * x[j];
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

/// Class probabilities `softmax_j(cos(f, w_j) / tau)` over the prototype set.
pub fn class_probs(f: &FeatureVec, protos: &PrototypeSet, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if f.dim() != protos.feature_dim() {
        return Err(Error::shape(format!(
            "feature dim {} vs prototype dim {}",
            f.dim(),
            protos.feature_dim()
        )));
    }
    let logits: Vec<f64> = (0..protos.len())
        .map(|j| dot(f.values(), protos.row(j)) / tau)
        .collect();
    Ok(softmax(&logits))
}

/// Mean cross-entropy over the batch plus its exact analytic gradient,
/// accumulated into `grad` (one `1/B`-scaled contribution per sample).
pub(crate) fn ce_accumulate(
    params: &EncoderParams,
    batch: &LabeledBatch,
    protos: &PrototypeSet,
    tau: f64,
    grad: &mut EncoderParams,
) -> Result<f64> {
    check_tau(tau)?;
    if batch.inputs.cols() != params.input_dim {
        return Err(Error::shape(format!(
            "batch input dim {} vs encoder input_dim {}",
            batch.inputs.cols(),
            params.input_dim
        )));
    }
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let f_dim = params.feature_dim;
    let l = protos.len();
    let mut loss_sum = 0.0;
    for i in 0..b {
        let x = batch.inputs.row(i);
        let cache = forward(params, x)?;
        let y = protos
            .index_of(batch.labels[i])
            .ok_or(Error::UnknownLabel(batch.labels[i]))?;
        let logits: Vec<f64> = (0..l)
            .map(|j| dot(&cache.feature, protos.row(j)) / tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let lse = m + z.ln();
        loss_sum += lse - logits[y];

        // dL/df = sum_j (q_j - [j == y]) w_j / tau
        let mut dldf = vec![0.0; f_dim];
        for j in 0..l {
            let q = exps[j] / z;
            let coef = (q - if j == y { 1.0 } else { 0.0 }) / tau;
            let proto = protos.row(j);
            for k in 0..f_dim {
                dldf[k] += coef * proto[k];
            }
        }
        backprop_feature_grad(params, x, &cache, &dldf, inv_b, grad);
    }
    Ok(loss_sum * inv_b)
}

/// Mean cross-entropy of the batch under the prototype classifier, with the
/// exact analytic gradient with respect to every encoder parameter.
pub fn ce_loss_and_grad(
    params: &EncoderParams,
    batch: &LabeledBatch,
    protos: &PrototypeSet,
    tau: f64,
) -> Result<(f64, EncoderParams)> {
    let mut grad = params.zeros_like();
    let loss = ce_accumulate(params, batch, protos, tau, &mut grad)?;
    Ok((loss, grad))
}
