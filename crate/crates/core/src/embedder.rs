//! Feed-forward PReLU embedding network, its Adam optimizer, and the EMB1
//! checkpoint format.
//!
//! Each layer computes `PReLU(x W + b)` with `W` stored input-major
//! (`in_dim x out_dim`), so sparse inputs only touch the rows of their
//! nonzero coordinates. The last layer maps to the digest dimension; its
//! output is left unnormalized (normalization belongs to the loss and store).

use serde::{Deserialize, Serialize};

use crate::codec::{checked_u32, put_f64s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::losses::{compute_logits, loss_backward, Batch, ClassHead, LossConfig};
use crate::numeric::{argmax, axpy, derive_seed, dot, l2_normalize, Matrix, SeededRng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMB1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Width of the featurized input; the pipeline fills this in from data.
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub emb_dim: usize,
    pub prelu_init: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden_dims: vec![256],
            emb_dim: 512,
            prelu_init: 0.25,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.emb_dim < 2 {
            return Err(Error::InvalidConfig(format!("emb_dim must be >= 2, got {}", self.emb_dim)));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        if !self.prelu_init.is_finite() {
            return Err(Error::InvalidConfig("prelu_init must be finite".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.emb_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    /// Stop after this many epochs without a lower mean loss. `None` trains
    /// for the full epoch count.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            shuffle_seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One `PReLU(x W + b)` layer with per-channel slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in_dim x out_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub slope: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
            slope: vec![0.0; out_dim],
        }
    }

    /// Pre-activation `x W + b`, skipping zero inputs.
    fn pre_activation(&self, input: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, &xi) in input.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.weight.row(i), &mut z);
            }
        }
        z
    }
}

#[inline]
fn prelu(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

/// Network layers plus the class head used during training. Also serves as
/// the gradient container (same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub layers: Vec<DenseLayer>,
    pub head: ClassHead,
}

impl EmbedderParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn emb_dim(&self) -> usize {
        self.layers.last().map(DenseLayer::out_dim).unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            head: ClassHead {
                weight: Matrix::zeros(self.head.weight.rows(), self.head.weight.cols()),
                bias: vec![0.0; self.head.bias.len()],
            },
        }
    }

    /// Parameter tensors in a fixed order: per layer weight, bias, slope;
    /// then head weight and head bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 3 + 2);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias[..]);
            out.push(&l.slope[..]);
        }
        out.push(self.head.weight.as_slice());
        out.push(&self.head.bias[..]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 3 + 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias[..]);
            out.push(&mut l.slope[..]);
        }
        out.push(self.head.weight.as_mut_slice());
        out.push(&mut self.head.bias[..]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// FNV-1a over the EMB1 encoding; a cheap identity check for frozen params.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// He-normal weights, zero biases, constant PReLU slopes.
pub fn init_params(cfg: &EmbedderConfig, num_classes: usize) -> Result<EmbedderParams> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let layers = cfg
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
            DenseLayer {
                weight: Matrix::from_vec(fan_in, fan_out, w).expect("shape by construction"),
                bias: vec![0.0; fan_out],
                slope: vec![cfg.prelu_init; fan_out],
            }
        })
        .collect();
    let std = (2.0 / cfg.emb_dim as f64).sqrt();
    let w: Vec<f64> = (0..num_classes * cfg.emb_dim).map(|_| std * rng.normal()).collect();
    let head = ClassHead::new(Matrix::from_vec(num_classes, cfg.emb_dim, w)?, vec![0.0; num_classes])?;
    Ok(EmbedderParams { layers, head })
}

/// Raw (unnormalized) embedding of one feature vector.
pub fn forward(params: &EmbedderParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    let mut h = x.to_vec();
    for layer in &params.layers {
        let mut z = layer.pre_activation(&h);
        for (v, a) in z.iter_mut().zip(&layer.slope) {
            *v = prelu(*v, *a);
        }
        h = z;
    }
    Ok(h)
}

/// Unit-norm digests, one per input, in input order.
pub fn embed_all<X: AsRef<[f64]>>(params: &EmbedderParams, samples: &[X]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|x| l2_normalize(&forward(params, x.as_ref())?))
        .collect()
}

struct Trace {
    /// Layer inputs; `inputs[0]` is the sample itself.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn forward_trace(params: &EmbedderParams, x: &[f64]) -> (Trace, Vec<f64>) {
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.to_vec();
    for layer in &params.layers {
        let z = layer.pre_activation(&h);
        let out: Vec<f64> = z.iter().zip(&layer.slope).map(|(v, a)| prelu(*v, *a)).collect();
        inputs.push(std::mem::replace(&mut h, out));
        pre.push(z);
    }
    (Trace { inputs, pre }, h)
}

/// Result of a backward pass over one minibatch.
#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub grads: EmbedderParams,
    /// Margin-free predictions of the class head, one per sample.
    pub predictions: Vec<usize>,
}

/// Mean loss over the batch and its exact gradient with respect to every
/// layer weight, bias, PReLU slope and the class head.
pub fn backward<X: AsRef<[f64]>>(
    params: &EmbedderParams,
    inputs: &[X],
    labels: &[usize],
    loss_cfg: &LossConfig,
) -> Result<BackwardOutput> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: labels.len(),
        });
    }
    let emb_dim = params.emb_dim();
    let mut traces = Vec::with_capacity(inputs.len());
    let mut emb = Matrix::zeros(inputs.len(), emb_dim);
    for (i, x) in inputs.iter().enumerate() {
        let x = x.as_ref();
        if x.len() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                got: x.len(),
            });
        }
        let (trace, out) = forward_trace(params, x);
        emb.row_mut(i).copy_from_slice(&out);
        traces.push(trace);
    }

    let batch = Batch::new(&emb, labels)?;
    let out = loss_backward(&params.head, batch, loss_cfg)?;
    let loss_grads = out.grads.expect("backward requested gradients");
    let predictions = compute_logits(&params.head, batch, loss_cfg, false)?
        .iter_rows()
        .map(argmax)
        .collect();

    let mut grads = params.zeros_like();
    grads.head.weight = loss_grads.weight;
    grads.head.bias = loss_grads.bias;

    for (i, trace) in traces.iter().enumerate() {
        let mut upstream = loss_grads.features.row(i).to_vec();
        for (l, layer) in params.layers.iter().enumerate().rev() {
            let g = &mut grads.layers[l];
            let z = &trace.pre[l];
            let mut dz = upstream;
            for j in 0..dz.len() {
                if z[j] <= 0.0 {
                    g.slope[j] += z[j] * dz[j];
                    dz[j] *= layer.slope[j];
                }
            }
            axpy(1.0, &dz, &mut g.bias);
            let input = &trace.inputs[l];
            for (k, &xk) in input.iter().enumerate() {
                if xk != 0.0 {
                    axpy(xk, &dz, g.weight.row_mut(k));
                }
            }
            upstream = if l > 0 {
                (0..layer.in_dim()).map(|k| dot(layer.weight.row(k), &dz)).collect()
            } else {
                Vec::new()
            };
        }
    }

    Ok(BackwardOutput {
        loss: out.value,
        grads,
        predictions,
    })
}

/// Bias-corrected Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &EmbedderParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adam_step(params: &mut EmbedderParams, grads: &EmbedderParams, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::ShapeMismatch("gradient shapes differ from parameters".into()));
    }
    let shapes_ok = state.m.len() == params.tensors().len()
        && state.m.iter().zip(params.tensors()).all(|(m, p)| m.len() == p.len());
    if !shapes_ok {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(state.t as f64);
    let bc2 = 1.0 - b2.powf(state.t as f64);
    let (lr, eps) = (state.lr, state.eps);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A featurized training sample with its class index.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub samples: usize,
}

/// One pass over `labeled` followed by `pseudo`, shuffled together with a
/// stream derived from `(shuffle_seed, epoch)`, one Adam step per minibatch.
pub fn train_epoch(
    params: &mut EmbedderParams,
    state: &mut AdamState,
    labeled: &[Example<'_>],
    pseudo: &[Example<'_>],
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    train_cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<&Example<'_>> = labeled.iter().chain(pseudo).collect();
    let mut rng = SeededRng::new(derive_seed(train_cfg.shuffle_seed, epoch as u64));
    rng.shuffle(&mut order);

    let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    for chunk in order.chunks(train_cfg.batch_size) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|e| e.features).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let out = backward(params, &inputs, &labels, loss_cfg)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss became {} at epoch {epoch}, step {steps}", out.loss)));
        }
        loss_sum += out.loss * chunk.len() as f64;
        correct += out.predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
        adam_step(params, &out.grads, state)?;
        steps += 1;
    }
    let n = order.len() as f64;
    Ok(EpochStats {
        mean_loss: loss_sum / n,
        accuracy: correct as f64 / n,
        steps,
        samples: order.len(),
    })
}

impl EmbedderParams {
    /// EMB1 encoding. Layer blocks store the conventional `out x in` weight
    /// (`rows = out_dim`, `cols = in_dim`), then bias and slopes of length
    /// `rows`. The head block is `rows = classes`, `cols = emb_dim`, weights
    /// and bias; it has no activation and so no slopes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.parameter_count() * 8);
        self.write_to(&mut out).expect("in-memory params fit EMB1 limits");
        out
    }

    pub(crate) fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(out, CHECKPOINT_VERSION);
        put_u32(out, checked_u32(self.layers.len(), "layer count")?);
        for layer in &self.layers {
            let (rows, cols) = (layer.out_dim(), layer.in_dim());
            put_u32(out, checked_u32(rows, "rows")?);
            put_u32(out, checked_u32(cols, "cols")?);
            out.reserve(rows * cols * 8);
            for r in 0..rows {
                for c in 0..cols {
                    out.extend_from_slice(&layer.weight.get(c, r).to_le_bytes());
                }
            }
            put_f64s(out, &layer.bias);
            put_f64s(out, &layer.slope);
        }
        put_u32(out, checked_u32(self.head.weight.rows(), "rows")?);
        put_u32(out, checked_u32(self.head.weight.cols(), "cols")?);
        put_f64s(out, self.head.weight.as_slice());
        put_f64s(out, &self.head.bias);
        Ok(())
    }

    /// Decodes an EMB1 buffer; trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let params = Self::read_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after EMB1 payload", r.remaining())));
        }
        Ok(params)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported EMB1 version {version}")));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(Error::Format("checkpoint has no layers".into()));
        }
        let mut layers: Vec<DenseLayer> = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::Format("empty layer".into()));
            }
            if let Some(prev) = layers.last() {
                if prev.out_dim() != cols {
                    return Err(Error::Format(format!(
                        "layer input {cols} does not chain from previous output {}",
                        prev.out_dim()
                    )));
                }
            }
            let flat = r.f64_vec(rows.checked_mul(cols).ok_or_else(|| Error::Format("layer too large".into()))?)?;
            let mut weight = Matrix::zeros(cols, rows);
            for (k, v) in flat.into_iter().enumerate() {
                weight.set(k % cols, k / cols, v);
            }
            let bias = r.f64_vec(rows)?;
            let slope = r.f64_vec(rows)?;
            layers.push(DenseLayer { weight, bias, slope });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let emb_dim = layers.last().map(DenseLayer::out_dim).unwrap_or(0);
        if cols != emb_dim {
            return Err(Error::Format(format!("head width {cols} does not match embedding {emb_dim}")));
        }
        if rows < 2 {
            return Err(Error::Format(format!("head needs >= 2 classes, found {rows}")));
        }
        let w = r.f64_vec(rows.checked_mul(cols).ok_or_else(|| Error::Format("head too large".into()))?)?;
        let bias = r.f64_vec(rows)?;
        let head = ClassHead::new(Matrix::from_vec(rows, cols, w)?, bias)?;
        let params = Self { layers, head };
        if !params.is_finite() {
            return Err(Error::Format("checkpoint contains non-finite values".into()));
        }
        Ok(params)
    }
}
