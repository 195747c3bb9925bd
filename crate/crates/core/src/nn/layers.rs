use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `count` filters of `width` consecutive embedding rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub width: usize,
    pub count: usize,
    /// `count x (width * d)`
    pub weight: Tensor,
    /// `count`
    pub bias: Tensor,
}

impl FilterBank {
    pub fn zeros(width: usize, count: usize, dim: usize) -> Self {
        Self {
            width,
            count,
            weight: Tensor::zeros(&[count, width * dim]),
            bias: Tensor::zeros(&[count]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols() / self.width
    }
}

/// Fully connected layer `activation(V x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Stacks the embedding rows of `ids` into an `n x d` matrix.
pub fn embedding_lookup(ids: &[usize], table: &EmbeddingTable) -> Result<Tensor> {
    let d = table.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= table.len() {
            return Err(Error::Invalid(format!(
                "embedding index {id} out of range ({} rows)",
                table.len()
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(&[ids.len(), d], data)
}

/// Valid, stride-1 convolution followed by ReLU.
///
/// Output entry `(t, j)` is `relu(u_j . [x_t; ...; x_{t+k-1}] + b_j)`. The
/// window is contiguous in row-major `x`, so each entry is a single dot
/// product.
pub fn conv1d(x: &Tensor, bank: &FilterBank) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let k = bank.width;
    if bank.input_dim() != d {
        return Err(Error::Shape(format!(
            "filter bank expects dimension {}, input has {d}",
            bank.input_dim()
        )));
    }
    if n < k {
        return Err(Error::Shape(format!(
            "sequence length {n} shorter than filter width {k}"
        )));
    }
    let steps = n - k + 1;
    let mut out = Tensor::zeros(&[steps, bank.count]);
    let xs = x.data();
    for t in 0..steps {
        let window = &xs[t * d..(t + k) * d];
        let row = out.row_mut(t);
        for (j, o) in row.iter_mut().enumerate() {
            let w = bank.weight.row(j);
            *o = (dot(w, window) + bank.bias.data()[j]).max(0.0);
        }
    }
    Ok(out)
}

/// Accumulates gradients of [`conv1d`] into `grad` (and `grad_x` if given).
/// `out` is the forward output; `grad_out` the upstream gradient.
pub fn conv1d_backward(
    x: &Tensor,
    bank: &FilterBank,
    out: &Tensor,
    grad_out: &Tensor,
    grad: &mut FilterBank,
    mut grad_x: Option<&mut Tensor>,
) {
    let d = x.cols();
    let k = bank.width;
    let xs = x.data();
    for t in 0..out.rows() {
        let span = t * d..(t + k) * d;
        for j in 0..bank.count {
            if out.row(t)[j] <= 0.0 {
                continue;
            }
            let g = grad_out.row(t)[j];
            if g == 0.0 {
                continue;
            }
            grad.bias.data_mut()[j] += g;
            for (gw, xv) in grad.weight.row_mut(j).iter_mut().zip(&xs[span.clone()]) {
                *gw += g * xv;
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                for (gxv, w) in gx.data_mut()[span.clone()].iter_mut().zip(bank.weight.row(j)) {
                    *gxv += g * w;
                }
            }
        }
    }
}

/// Max over consecutive non-overlapping windows of `p` entries. A trailing
/// short window still emits its max. Returns the pooled values and the index
/// of the first maximal entry of each window.
pub fn maxpool_windowed(h: &[f64], p: usize) -> (Vec<f64>, Vec<usize>) {
    let p = p.max(1);
    let mut values = Vec::with_capacity(h.len().div_ceil(p));
    let mut argmax = Vec::with_capacity(values.capacity());
    for (w, chunk) in h.chunks(p).enumerate() {
        let mut best = 0;
        for (i, v) in chunk.iter().enumerate() {
            if *v > chunk[best] {
                best = i;
            }
        }
        values.push(chunk[best]);
        argmax.push(w * p + best);
    }
    (values, argmax)
}

/// Applies [`maxpool_windowed`] down every column of an `m x N` feature map.
/// Output is `ceil(m/p) x N`; `argmax` holds the source row for each output
/// entry in the same row-major order.
pub fn maxpool_columns(h: &Tensor, p: usize) -> (Tensor, Vec<usize>) {
    let (m, cols) = (h.rows(), h.cols());
    let p = p.max(1);
    let windows = m.div_ceil(p);
    let mut out = Tensor::zeros(&[windows, cols]);
    let mut argmax = vec![0usize; windows * cols];
    for w in 0..windows {
        let lo = w * p;
        let hi = (lo + p).min(m);
        for j in 0..cols {
            let mut best = lo;
            for r in lo + 1..hi {
                if h.row(r)[j] > h.row(best)[j] {
                    best = r;
                }
            }
            out.row_mut(w)[j] = h.row(best)[j];
            argmax[w * cols + j] = best;
        }
    }
    (out, argmax)
}

/// Routes pooled gradients back to the winning rows.
pub fn maxpool_backward(grad_pooled: &[f64], argmax: &[usize], grad_h: &mut Tensor) {
    let cols = grad_h.cols();
    for (idx, (&g, &row)) in grad_pooled.iter().zip(argmax).enumerate() {
        grad_h.row_mut(row)[idx % cols] += g;
    }
}

pub fn dense_forward(x: &[f64], layer: &DenseLayer) -> Result<Vec<f64>> {
    if x.len() != layer.input_dim() {
        return Err(Error::Shape(format!(
            "dense layer expects {} inputs, got {}",
            layer.input_dim(),
            x.len()
        )));
    }
    let bias = layer.bias.data();
    Ok((0..layer.output_dim())
        .map(|o| layer.activation.apply(dot(layer.weight.row(o), x) + bias[o]))
        .collect())
}

/// Accumulates gradients of [`dense_forward`] into `grad`, and into
/// `grad_x` when requested. `out` is the forward output.
pub fn dense_backward(
    layer: &DenseLayer,
    x: &[f64],
    out: &[f64],
    grad_out: &[f64],
    grad: &mut DenseLayer,
    mut grad_x: Option<&mut [f64]>,
) {
    for o in 0..layer.output_dim() {
        let g = grad_out[o] * layer.activation.grad_from_output(out[o]);
        if g == 0.0 {
            continue;
        }
        grad.bias.data_mut()[o] += g;
        for (gw, xv) in grad.weight.row_mut(o).iter_mut().zip(x) {
            *gw += g * xv;
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            for (gxv, w) in gx.iter_mut().zip(layer.weight.row(o)) {
                *gxv += g * w;
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow or cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inverted dropout. Returns the output and the per-unit multiplier applied
/// (0 or `1/(1-rate)` in training, 1 in evaluation).
pub fn dropout(x: &[f64], rate: f64, mode: Mode, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    if mode == Mode::Eval || rate <= 0.0 {
        return (x.to_vec(), vec![1.0; x.len()]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = x
        .iter()
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
    (out, mask)
}
