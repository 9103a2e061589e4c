//! Multilayer perceptrons with hand-written backpropagation.
//!
//! Parameters live in a [`ParameterSet`] with entries `W0, b0, W1, b1, …`.
//! `Wl` has shape `[dims[l+1], dims[l]]` and `bl` has shape `[dims[l+1]]`.
//! The activation is applied on hidden layers only; the last layer is affine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Matrix};
use crate::params::{DType, ParameterSet, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, loss: Loss) -> Result<Self, ModelError> {
        let spec = Self { layer_dims, activation, loss };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("need at least two positive dims, got {:?}", self.layer_dims)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Uniform `[-1/√fan_in, 1/√fan_in]` initialization.
pub fn init_params(spec: &ModelSpec, dtype: DType, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for (l, w) in spec.layer_dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        set.push(format!("W{l}"), Tensor::from_values(dtype, vec![fan_out, fan_in], weights).expect("shape"))
            .expect("unique");
        set.push(format!("b{l}"), Tensor::from_values(dtype, vec![fan_out], bias).expect("shape")).expect("unique");
    }
    set
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

fn unpack(spec: &ModelSpec, params: &ParameterSet) -> Result<Vec<Layer>, ModelError> {
    spec.validate()?;
    if params.len() != 2 * spec.num_layers() {
        return Err(ModelError::ShapeMismatch(format!(
            "expected {} tensors, got {}",
            2 * spec.num_layers(),
            params.len()
        )));
    }
    spec.layer_dims
        .windows(2)
        .enumerate()
        .map(|(l, d)| {
            let (fan_in, fan_out) = (d[0], d[1]);
            let w = params.get(&format!("W{l}"));
            let b = params.get(&format!("b{l}"));
            match (w, b) {
                (Some(w), Some(b)) if w.shape() == [fan_out, fan_in] && b.shape() == [fan_out] => {
                    Ok(Layer { w: w.to_f64_vec(), b: b.to_f64_vec(), fan_in, fan_out })
                }
                _ => Err(ModelError::ShapeMismatch(format!(
                    "layer {l} expects W{l}:[{fan_out}, {fan_in}] and b{l}:[{fan_out}]"
                ))),
            }
        })
        .collect()
}

struct Trace {
    /// Layer inputs `h_0..h_{L-1}` followed by the final output.
    acts: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
}

fn run_forward(spec: &ModelSpec, layers: &[Layer], x: &Matrix) -> Trace {
    let mut acts = vec![x.clone()];
    let mut pre = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = acts.last().expect("non-empty");
        let mut z = Matrix::zeros(input.rows, layer.fan_out);
        for r in 0..input.rows {
            let xin = input.row(r);
            let zr = z.row_mut(r);
            for (o, zo) in zr.iter_mut().enumerate() {
                let wrow = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                *zo = layer.b[o] + wrow.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let hidden = l + 1 < layers.len();
        let h = if hidden && spec.activation == Activation::Relu {
            Matrix::new(z.rows, z.cols, z.data.iter().map(|&v| v.max(0.0)).collect())
        } else {
            z.clone()
        };
        pre.push(z);
        acts.push(h);
    }
    Trace { acts, pre }
}

/// Backpropagates `dout` (gradient w.r.t. the outputs) and returns per-layer
/// `(dW, db)` along with the gradient w.r.t. the inputs.
fn run_backward(
    spec: &ModelSpec,
    layers: &[Layer],
    trace: &Trace,
    dout: Matrix,
) -> (Vec<(Vec<f64>, Vec<f64>)>, Matrix) {
    let mut grads = Vec::with_capacity(layers.len());
    let mut delta = dout;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        if l + 1 < layers.len() && spec.activation == Activation::Relu {
            for (d, &z) in delta.data.iter_mut().zip(&trace.pre[l].data) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let input = &trace.acts[l];
        let mut dw = vec![0.0; layer.fan_out * layer.fan_in];
        let mut db = vec![0.0; layer.fan_out];
        let mut dx = Matrix::zeros(input.rows, layer.fan_in);
        for r in 0..input.rows {
            let xin = input.row(r);
            let dr = delta.row(r);
            let dxr = dx.row_mut(r);
            for (o, &g) in dr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let wrow = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let dwrow = &mut dw[o * layer.fan_in..(o + 1) * layer.fan_in];
                for i in 0..layer.fan_in {
                    dwrow[i] += g * xin[i];
                    dxr[i] += g * wrow[i];
                }
            }
        }
        grads.push((dw, db));
        delta = dx;
    }
    grads.reverse();
    (grads, delta)
}

fn pack_grads(params: &ParameterSet, grads: Vec<(Vec<f64>, Vec<f64>)>) -> ParameterSet {
    let mut out = ParameterSet::new();
    for (l, (dw, db)) in grads.into_iter().enumerate() {
        for (name, values) in [(format!("W{l}"), dw), (format!("b{l}"), db)] {
            let t = params.get(&name).expect("validated");
            out.push(name, Tensor::from_values(t.dtype(), t.shape().to_vec(), values).expect("same layout"))
                .expect("unique");
        }
    }
    out
}

fn target(loss: Loss, ds_labels: &[f64], r: usize, k: usize, out_dim: usize) -> f64 {
    match loss {
        Loss::Mse if out_dim == 1 => ds_labels[r],
        _ => f64::from(ds_labels[r] as usize == k),
    }
}

/// Mean loss over the batch and its gradient w.r.t. the outputs.
pub fn loss_and_output_grad(loss: Loss, outputs: &Matrix, labels: &[f64]) -> (f64, Matrix) {
    let n = outputs.rows as f64;
    let mut grad = Matrix::zeros(outputs.rows, outputs.cols);
    let mut total = 0.0;
    match loss {
        Loss::Mse => {
            for r in 0..outputs.rows {
                for (k, &o) in outputs.row(r).iter().enumerate() {
                    let diff = o - target(loss, labels, r, k, outputs.cols);
                    total += diff * diff;
                    grad.row_mut(r)[k] = 2.0 * diff / n;
                }
            }
        }
        Loss::SoftmaxCrossEntropy => {
            for r in 0..outputs.rows {
                let row = outputs.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let y = labels[r] as usize;
                total += -((exps[y] / sum).ln());
                for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
                    *g = (exps[k] / sum - f64::from(k == y)) / n;
                }
            }
        }
    }
    (total / n, grad)
}

fn check_batch(spec: &ModelSpec, x: &Matrix) -> Result<(), ModelError> {
    if x.rows == 0 {
        return Err(ModelError::EmptyDataset);
    }
    if x.cols != spec.input_dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "batch has {} features, model expects {}",
            x.cols,
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Network outputs for raw inputs, no loss.
pub fn predict(spec: &ModelSpec, params: &ParameterSet, x: &Matrix) -> Result<Matrix, ModelError> {
    check_batch(spec, x)?;
    let layers = unpack(spec, params)?;
    let mut trace = run_forward(spec, &layers, x);
    Ok(trace.acts.pop().expect("output"))
}

pub fn forward(spec: &ModelSpec, params: &ParameterSet, batch: &Dataset) -> Result<(Matrix, f64), ModelError> {
    let outputs = predict(spec, params, &batch.features)?;
    let (loss, _) = loss_and_output_grad(spec.loss, &outputs, &batch.labels);
    Ok((outputs, loss))
}

/// Mean loss and its gradient w.r.t. every parameter.
pub fn backward(spec: &ModelSpec, params: &ParameterSet, batch: &Dataset) -> Result<(f64, ParameterSet), ModelError> {
    check_batch(spec, &batch.features)?;
    let layers = unpack(spec, params)?;
    let trace = run_forward(spec, &layers, &batch.features);
    let (loss, dout) = loss_and_output_grad(spec.loss, trace.acts.last().expect("output"), &batch.labels);
    let (grads, _) = run_backward(spec, &layers, &trace, dout);
    Ok((loss, pack_grads(params, grads)))
}

/// Chains an upstream output gradient through the network; returns parameter
/// gradients and the gradient w.r.t. `x`. The spec's loss is not used.
pub fn backward_from_output(
    spec: &ModelSpec,
    params: &ParameterSet,
    x: &Matrix,
    dout: &Matrix,
) -> Result<(ParameterSet, Matrix), ModelError> {
    check_batch(spec, x)?;
    if dout.rows != x.rows || dout.cols != spec.output_dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "output gradient is {}x{}, expected {}x{}",
            dout.rows,
            dout.cols,
            x.rows,
            spec.output_dim()
        )));
    }
    let layers = unpack(spec, params)?;
    let trace = run_forward(spec, &layers, x);
    let (grads, dx) = run_backward(spec, &layers, &trace, dout.clone());
    Ok((pack_grads(params, grads), dx))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}
