//! Two-branch convolutional classifier.
//!
//! ```text
//! ids -> X -> conv banks -> windowed max-pool -> m
//! m  -> z1 = relu(V1 m)
//! z1 -> z2 = relu(V2 z1)                       supervised branch
//! z1 -> z3 = relu(V3 z1) -> z4 = relu(V4 z3)   context branch
//! p(y | t) = softmax(W [z2; z4])               (softmax(W z2) when supervised)
//! ```
//!
//! The context branch is also trained to score graph/label context nodes:
//! the loss for a sample `(i, j, gamma)` is `-log sigmoid(gamma * c_j . z3(i))`
//! where `c_j` is a free per-node vector. Those vectors exist only for
//! training nodes and are never used at inference.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nn::{
    conv1d, conv1d_backward, dense_backward, dense_forward, dropout, embedding_lookup, log_sigmoid, maxpool_backward,
    maxpool_columns, sigmoid, softmax, Activation, Checkpoint, DenseLayer, FilterBank, Mode, Tensor,
};
use crate::rng::Rng;
use crate::sampler::ContextSample;

/// Floor applied to probabilities inside `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Classify from `z2` only; the context branch is unused.
    Supervised,
    /// Classify from `[z2; z4]` and train the context branch.
    Semi,
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainingMode::Supervised => "supervised",
            TrainingMode::Semi => "semi",
        })
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TrainingMode::Supervised),
            "semi" => Ok(TrainingMode::Semi),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?} (expected supervised|semi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub width: usize,
    pub count: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub max_len: usize,
    pub filters: Vec<FilterSpec>,
    /// Widths of z1, z2, z3, z4.
    pub hidden: [usize; 4],
    pub num_classes: usize,
    /// Weight of the context loss.
    pub lambda: f64,
    pub dropout: f64,
    pub mode: TrainingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 30,
            filters: vec![
                FilterSpec {
                    width: 2,
                    count: 100,
                    pool: 2,
                },
                FilterSpec {
                    width: 3,
                    count: 150,
                    pool: 3,
                },
                FilterSpec {
                    width: 4,
                    count: 200,
                    pool: 4,
                },
            ],
            hidden: [100; 4],
            num_classes: 2,
            lambda: 1.0,
            dropout: 0.02,
            mode: TrainingMode::Semi,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::Invalid("at least one filter bank is required".into()));
        }
        for f in &self.filters {
            if f.width == 0 || f.count == 0 || f.pool == 0 {
                return Err(Error::Invalid(format!("filter sizes must be >= 1: {f:?}")));
            }
        }
        let widest = self.filters.iter().map(|f| f.width).max().unwrap_or(1);
        if self.max_len < widest {
            return Err(Error::Invalid(format!(
                "max_len {} is shorter than the widest filter ({widest})",
                self.max_len
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden sizes must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Invalid("at least 2 classes are required".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Length of each bank's flattened pooled output.
    pub fn pooled_sizes(&self) -> Vec<usize> {
        self.filters
            .iter()
            .map(|f| (self.max_len - f.width + 1).div_ceil(f.pool) * f.count)
            .collect()
    }

    /// Dimension of the pooled vector `m`.
    pub fn pooled_dim(&self) -> usize {
        self.pooled_sizes().iter().sum()
    }

    /// Input width of the softmax layer.
    pub fn classifier_dim(&self) -> usize {
        match self.mode {
            TrainingMode::Supervised => self.hidden[1],
            TrainingMode::Semi => self.hidden[1] + self.hidden[3],
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// All trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub banks: Vec<FilterBank>,
    pub v1: DenseLayer,
    pub v2: DenseLayer,
    pub v3: DenseLayer,
    pub v4: DenseLayer,
    /// `K x classifier_dim`, no bias.
    pub class_weight: Tensor,
    /// One row per training node, `n x hidden[2]`.
    pub context_weight: Tensor,
}

fn glorot(t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-limit..limit));
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig, embed_dim: usize, nodes: usize) -> Self {
        let [h1, h2, h3, h4] = config.hidden;
        Self {
            banks: config
                .filters
                .iter()
                .map(|f| FilterBank::zeros(f.width, f.count, embed_dim))
                .collect(),
            v1: DenseLayer::zeros(config.pooled_dim(), h1, Activation::Relu),
            v2: DenseLayer::zeros(h1, h2, Activation::Relu),
            v3: DenseLayer::zeros(h1, h3, Activation::Relu),
            v4: DenseLayer::zeros(h3, h4, Activation::Relu),
            class_weight: Tensor::zeros(&[config.num_classes, config.classifier_dim()]),
            context_weight: Tensor::zeros(&[nodes, h3]),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &ModelConfig, embed_dim: usize, nodes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config, embed_dim, nodes);
        for bank in &mut p.banks {
            let fan_in = bank.weight.cols();
            glorot(&mut bank.weight, fan_in, bank.count, rng);
        }
        for layer in [&mut p.v1, &mut p.v2, &mut p.v3, &mut p.v4] {
            let (i, o) = (layer.input_dim(), layer.output_dim());
            glorot(&mut layer.weight, i, o, rng);
        }
        let (k, f) = (p.class_weight.rows(), p.class_weight.cols());
        glorot(&mut p.class_weight, f, k, rng);
        let h3 = p.context_weight.cols();
        glorot(&mut p.context_weight, h3, 1, rng);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn embed_dim(&self) -> usize {
        self.banks[0].input_dim()
    }

    pub fn node_count(&self) -> usize {
        self.context_weight.rows()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.banks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &b.weight));
            out.push((format!("conv{i}.bias"), &b.bias));
        }
        for (name, l) in [("v1", &self.v1), ("v2", &self.v2), ("v3", &self.v3), ("v4", &self.v4)] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out.push(("class.weight".into(), &self.class_weight));
        out.push(("context.weight".into(), &self.context_weight));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.banks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for l in [&mut self.v1, &mut self.v2, &mut self.v3, &mut self.v4] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.class_weight);
        out.push(&mut self.context_weight);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Every tensor except `context_weight`, in [`Self::tensors`] order.
    pub fn shared_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut all = self.tensors_mut();
        all.pop();
        all
    }

    pub fn shared_tensors(&self) -> Vec<&Tensor> {
        let mut all = self.tensors();
        all.pop();
        all
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn to_checkpoint(
        &self,
        config: &ModelConfig,
        vocab_hash: &str,
        config_digest: &str,
        mut sections: BTreeMap<String, serde_json::Value>,
    ) -> Checkpoint {
        sections.insert(
            "model_config".into(),
            serde_json::to_value(config).expect("config serializes"),
        );
        Checkpoint {
            vocab_hash: vocab_hash.to_owned(),
            config_digest: config_digest.to_owned(),
            sections,
            tensors: self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    /// Restores parameters and the model configuration stored alongside them.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ModelConfig, Self)> {
        let config: ModelConfig = ck
            .sections
            .get("model_config")
            .cloned()
            .ok_or_else(|| Error::Incompatible("checkpoint has no model_config section".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Incompatible(e.to_string())))?;
        config.validate()?;
        let bank0 = ck
            .tensor("conv0.weight")
            .ok_or_else(|| Error::Incompatible("missing conv0.weight".into()))?;
        let embed_dim = bank0.cols() / config.filters[0].width;
        let nodes = ck
            .tensor("context.weight")
            .ok_or_else(|| Error::Incompatible("missing context.weight".into()))?
            .rows();
        let mut params = Self::zeros(&config, embed_dim, nodes);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = ck
                .tensor(name)
                .ok_or_else(|| Error::Incompatible(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok((config, params))
    }
}

/// Every intermediate of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub x: Tensor,
    pub feature_maps: Vec<Tensor>,
    pool_argmax: Vec<Vec<usize>>,
    /// Pooled vector `m` before dropout.
    pub pooled: Vec<f64>,
    m_mask: Vec<f64>,
    m_in: Vec<f64>,
    pub z1: Vec<f64>,
    z1_mask: Vec<f64>,
    z1_in: Vec<f64>,
    pub z2: Vec<f64>,
    pub z3: Option<Vec<f64>>,
    z3_mask: Vec<f64>,
    z3_in: Vec<f64>,
    pub z4: Option<Vec<f64>>,
    /// Classifier input, `[z2; z4]` or `z2`.
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Runs the network on padded token ids. Dropout is active only when a
/// random stream is supplied.
pub fn forward(
    ids: &[usize],
    table: &EmbeddingTable,
    params: &ModelParams,
    config: &ModelConfig,
    rng: Option<&mut Rng>,
) -> Result<ForwardTrace> {
    if ids.len() != config.max_len {
        return Err(Error::Shape(format!(
            "expected {} token ids, got {}",
            config.max_len,
            ids.len()
        )));
    }
    let x = embedding_lookup(ids, table)?;
    forward_embedded(x, params, config, rng)
}

/// Forward pass from an already embedded `max_len x d` input.
pub fn forward_embedded(
    x: Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    mut rng: Option<&mut Rng>,
) -> Result<ForwardTrace> {
    if params.banks.len() != config.filters.len() {
        return Err(Error::Shape("parameter banks do not match the configuration".into()));
    }
    if x.rows() != config.max_len {
        return Err(Error::Shape(format!(
            "input has {} rows, expected {}",
            x.rows(),
            config.max_len
        )));
    }
    let mut feature_maps = Vec::with_capacity(params.banks.len());
    let mut pool_argmax = Vec::with_capacity(params.banks.len());
    let mut pooled = Vec::with_capacity(config.pooled_dim());
    for (bank, spec) in params.banks.iter().zip(&config.filters) {
        let h = conv1d(&x, bank)?;
        let (p, arg) = maxpool_columns(&h, spec.pool);
        pooled.extend_from_slice(p.data());
        feature_maps.push(h);
        pool_argmax.push(arg);
    }

    let (mode, rate) = match rng {
        Some(_) => (Mode::Train, config.dropout),
        None => (Mode::Eval, 0.0),
    };
    let mut drop = |v: &[f64]| match rng.as_deref_mut() {
        Some(r) => dropout(v, rate, mode, r),
        None => (v.to_vec(), vec![1.0; v.len()]),
    };

    let (m_in, m_mask) = drop(&pooled);
    let z1 = dense_forward(&m_in, &params.v1)?;
    let (z1_in, z1_mask) = drop(&z1);
    let z2 = dense_forward(&z1_in, &params.v2)?;

    let (z3, z3_in, z3_mask, z4) = match config.mode {
        TrainingMode::Supervised => (None, Vec::new(), Vec::new(), None),
        TrainingMode::Semi => {
            let z3 = dense_forward(&z1_in, &params.v3)?;
            let (z3_in, z3_mask) = drop(&z3);
            let z4 = dense_forward(&z3_in, &params.v4)?;
            (Some(z3), z3_in, z3_mask, Some(z4))
        }
    };

    let mut features = z2.clone();
    if let Some(z4) = &z4 {
        features.extend_from_slice(z4);
    }
    if features.len() != params.class_weight.cols() {
        return Err(Error::Shape(format!(
            "classifier expects {} features, got {}",
            params.class_weight.cols(),
            features.len()
        )));
    }
    let logits: Vec<f64> = (0..params.class_weight.rows())
        .map(|k| {
            params
                .class_weight
                .row(k)
                .iter()
                .zip(&features)
                .map(|(w, f)| w * f)
                .sum()
        })
        .collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let probabilities = softmax(&logits);

    Ok(ForwardTrace {
        x,
        feature_maps,
        pool_argmax,
        pooled,
        m_mask,
        m_in,
        z1,
        z1_mask,
        z1_in,
        z2,
        z3,
        z3_mask,
        z3_in,
        z4,
        features,
        logits,
        probabilities,
    })
}

/// Backpropagates upstream gradients on the logits and/or on `z3` (from the
/// context loss), accumulating parameter gradients into `grads`. Returns the
/// gradient with respect to the embedded input when `want_input_grad`.
pub fn backward(
    trace: &ForwardTrace,
    params: &ModelParams,
    config: &ModelConfig,
    grad_logits: Option<&[f64]>,
    grad_z3: Option<&[f64]>,
    grads: &mut ModelParams,
    want_input_grad: bool,
) -> Option<Tensor> {
    let [h1, h2, h3, _] = config.hidden;
    let mut g_z2 = vec![0.0; h2];
    let mut g_z4 = vec![0.0; trace.z4.as_ref().map_or(0, Vec::len)];

    if let Some(gl) = grad_logits {
        let cols = params.class_weight.cols();
        let mut g_feat = vec![0.0; cols];
        for (k, &g) in gl.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (gw, f) in grads.class_weight.row_mut(k).iter_mut().zip(&trace.features) {
                *gw += g * f;
            }
            for (gf, w) in g_feat.iter_mut().zip(params.class_weight.row(k)) {
                *gf += g * w;
            }
        }
        g_z2.copy_from_slice(&g_feat[..h2]);
        if !g_z4.is_empty() {
            g_z4.copy_from_slice(&g_feat[h2..]);
        }
    }

    // gradient w.r.t. z1 after dropout, fed by both branches
    let mut g_z1_in = vec![0.0; h1];
    dense_backward(
        &params.v2,
        &trace.z1_in,
        &trace.z2,
        &g_z2,
        &mut grads.v2,
        Some(&mut g_z1_in),
    );

    if let (TrainingMode::Semi, Some(z3), Some(z4)) = (config.mode, &trace.z3, &trace.z4) {
        let mut g_z3_in = vec![0.0; h3];
        dense_backward(&params.v4, &trace.z3_in, z4, &g_z4, &mut grads.v4, Some(&mut g_z3_in));
        let mut g_z3: Vec<f64> = g_z3_in.iter().zip(&trace.z3_mask).map(|(g, m)| g * m).collect();
        if let Some(extra) = grad_z3 {
            for (a, b) in g_z3.iter_mut().zip(extra) {
                *a += b;
            }
        }
        dense_backward(&params.v3, &trace.z1_in, z3, &g_z3, &mut grads.v3, Some(&mut g_z1_in));
    }

    let g_z1: Vec<f64> = g_z1_in.iter().zip(&trace.z1_mask).map(|(g, m)| g * m).collect();
    let mut g_m_in = vec![0.0; trace.pooled.len()];
    dense_backward(
        &params.v1,
        &trace.m_in,
        &trace.z1,
        &g_z1,
        &mut grads.v1,
        Some(&mut g_m_in),
    );
    let g_m: Vec<f64> = g_m_in.iter().zip(&trace.m_mask).map(|(g, m)| g * m).collect();

    let mut g_x = want_input_grad.then(|| Tensor::zeros(trace.x.shape()));
    let mut offset = 0;
    for (b, bank) in params.banks.iter().enumerate() {
        let h = &trace.feature_maps[b];
        let size = trace.pool_argmax[b].len();
        let mut g_h = Tensor::zeros(h.shape());
        maxpool_backward(&g_m[offset..offset + size], &trace.pool_argmax[b], &mut g_h);
        offset += size;
        conv1d_backward(&trace.x, bank, h, &g_h, &mut grads.banks[b], g_x.as_mut());
    }
    g_x
}

/// Negative log-probability of `label`, floored.
pub fn example_class_loss(trace: &ForwardTrace, label: usize) -> f64 {
    -trace.probabilities[label].max(PROB_FLOOR).ln()
}

/// Mean negative log-likelihood of the true classes.
pub fn classification_loss(traces: &[ForwardTrace], labels: &[usize]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    let total: f64 = traces.iter().zip(labels).map(|(t, &y)| example_class_loss(t, y)).sum();
    total / traces.len() as f64
}

fn context_score(trace: &ForwardTrace, sample: &ContextSample, params: &ModelParams) -> Result<f64> {
    let z3 = trace
        .z3
        .as_ref()
        .ok_or_else(|| Error::Invalid("context loss needs the semi-supervised branch".into()))?;
    if sample.j >= params.node_count() {
        return Err(Error::Invalid(format!(
            "context node {} out of range ({} nodes)",
            sample.j,
            params.node_count()
        )));
    }
    Ok(params
        .context_weight
        .row(sample.j)
        .iter()
        .zip(z3)
        .map(|(w, z)| w * z)
        .sum())
}

/// `-log sigmoid(gamma * c_j . z3(i))` for one context sample.
pub fn context_loss(trace: &ForwardTrace, sample: &ContextSample, params: &ModelParams) -> Result<f64> {
    let s = context_score(trace, sample, params)?;
    Ok(-log_sigmoid(sample.gamma() * s))
}

pub fn combined_loss(class_loss: f64, context_loss: f64, lambda: f64) -> f64 {
    class_loss + lambda * context_loss
}

/// Adds `weight * d(class loss)/d(params)` for one example; returns its loss.
pub fn accumulate_class_gradient(
    trace: &ForwardTrace,
    label: usize,
    params: &ModelParams,
    config: &ModelConfig,
    grads: &mut ModelParams,
    weight: f64,
) -> f64 {
    let mut g: Vec<f64> = trace.probabilities.iter().map(|p| p * weight).collect();
    g[label] -= weight;
    backward(trace, params, config, Some(&g), None, grads, false);
    example_class_loss(trace, label)
}

/// Adds `weight * d(context loss)/d(params)` for one sample drawn for the
/// node `trace` was computed on; returns the sample's loss.
pub fn accumulate_context_gradient(
    trace: &ForwardTrace,
    sample: &ContextSample,
    params: &ModelParams,
    config: &ModelConfig,
    grads: &mut ModelParams,
    weight: f64,
) -> Result<f64> {
    let s = context_score(trace, sample, params)?;
    let gamma = sample.gamma();
    // d/ds of -log sigmoid(gamma s)
    let ds = -gamma * sigmoid(-gamma * s) * weight;
    let z3 = trace.z3.as_ref().expect("checked by context_score");
    for (gw, z) in grads.context_weight.row_mut(sample.j).iter_mut().zip(z3) {
        *gw += ds * z;
    }
    let g_z3: Vec<f64> = params.context_weight.row(sample.j).iter().map(|w| ds * w).collect();
    backward(trace, params, config, None, Some(&g_z3), grads, false);
    Ok(-log_sigmoid(gamma * s))
}

/// Most probable class (lowest id on ties) and the class distribution.
/// Needs no graph: any document can be classified.
pub fn predict(
    ids: &[usize],
    table: &EmbeddingTable,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(usize, Vec<f64>)> {
    let trace = forward(ids, table, params, config, None)?;
    let best = argmax(&trace.probabilities);
    Ok((best, trace.probabilities))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
