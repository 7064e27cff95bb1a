//! Minimal feedforward network with exact reverse-mode gradients for every
//! base weight matrix. This is the substrate the adapter machinery runs on.
//!
//! Conventions that the rest of the crate depends on:
//! - forward is x * W with W shaped (in_dim x out_dim), so adapter chains
//!   A (m x r), B (r x n) compose without transposes;
//! - the loss is the mean over the batch of per-sample losses, so gradient
//!   magnitudes are stable in batch size.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::error::{GoraError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Whether this layer is a target for a low-rank adapter.
    pub adapt: bool,
}

/// A layer: spec, frozen base weight, optional bias. Biases never receive
/// adapters and never train.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub loss: Loss,
}

/// Regression targets are a matrix, classification targets a label vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, loss: Loss) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].spec.out_dim != pair[1].spec.in_dim {
                return Err(GoraError::Config(format!(
                    "layer chain broken: out_dim {} does not feed in_dim {}",
                    pair[0].spec.out_dim, pair[1].spec.in_dim
                )));
            }
        }
        for l in &layers {
            if l.weight.shape() != (l.spec.in_dim, l.spec.out_dim) {
                return Err(GoraError::Config(format!(
                    "weight shape {:?} does not match spec ({}, {})",
                    l.weight.shape(),
                    l.spec.in_dim,
                    l.spec.out_dim
                )));
            }
        }
        Ok(Network { layers, loss })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().spec.out_dim
    }

    /// Indices of layers flagged for adaptation.
    pub fn target_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.adapt)
            .map(|(i, _)| i)
            .collect()
    }

    /// Combined bit hash of all base weights; probing and adapter training
    /// must never change it.
    pub fn weight_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for l in &self.layers {
            h ^= l.weight.bit_hash();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.cols() != self.in_dim() {
            return Err(GoraError::ShapeMismatch {
                op: "forward",
                left: batch.inputs.shape(),
                right: (batch.inputs.rows(), self.in_dim()),
            });
        }
        match &batch.targets {
            Targets::Regression(y) => {
                if y.shape() != (batch.inputs.rows(), self.out_dim()) {
                    return Err(GoraError::ShapeMismatch {
                        op: "targets",
                        left: y.shape(),
                        right: (batch.inputs.rows(), self.out_dim()),
                    });
                }
                if self.loss != Loss::Mse {
                    return Err(GoraError::Config(
                        "regression targets require mse loss".into(),
                    ));
                }
            }
            Targets::Labels(v) => {
                if v.len() != batch.inputs.rows() {
                    return Err(GoraError::Config(format!(
                        "label count {} does not match batch size {}",
                        v.len(),
                        batch.inputs.rows()
                    )));
                }
                if self.loss != Loss::SoftmaxCrossEntropy {
                    return Err(GoraError::Config(
                        "label targets require softmax_cross_entropy loss".into(),
                    ));
                }
                if let Some(&bad) = v.iter().find(|&&c| c >= self.out_dim()) {
                    return Err(GoraError::Config(format!(
                        "label {bad} out of range for {} classes",
                        self.out_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    fn layer_forward(&self, idx: usize, x: &Matrix, adapters: &AdapterSet) -> Result<Matrix> {
        let layer = &self.layers[idx];
        let mut z = x.matmul(&layer.weight)?;
        if let Some(ad) = adapters.get(&idx) {
            z.axpy(1.0, &ad.forward_delta(x)?)?;
        }
        if let Some(bias) = &layer.bias {
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    z[(i, j)] += bias[j];
                }
            }
        }
        Ok(z)
    }

    /// Forward pass returning the network output (post-activation of the
    /// last layer).
    pub fn forward(&self, adapters: &AdapterSet, inputs: &Matrix) -> Result<Matrix> {
        let mut h = inputs.clone();
        for idx in 0..self.layers.len() {
            let z = self.layer_forward(idx, &h, adapters)?;
            let act = self.layers[idx].spec.activation;
            h = z;
            for v in h.as_mut_slice() {
                *v = act.apply(*v);
            }
        }
        Ok(h)
    }

    /// Loss only, no gradients; used by the scaling-factor search.
    pub fn forward_loss(&self, adapters: &AdapterSet, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let out = self.forward(adapters, &batch.inputs)?;
        let (loss, _) = loss_and_delta(self.loss, &out, &batch.targets);
        if !loss.is_finite() {
            return Err(GoraError::NonFinite("loss".into()));
        }
        Ok(loss)
    }

    /// Forward and reverse pass. Returns the scalar mean loss over the batch
    /// and the exact gradient of it w.r.t. each layer's effective weight
    /// (same shape as the base weight; for adapted layers the gradient of
    /// W0 and of the effective weight coincide).
    pub fn forward_backward(
        &self,
        adapters: &AdapterSet,
        batch: &Batch,
    ) -> Result<(f64, Vec<Matrix>)> {
        self.check_batch(batch)?;
        let num_layers = self.layers.len();
        let mut activations: Vec<Matrix> = Vec::with_capacity(num_layers + 1);
        let mut preacts: Vec<Matrix> = Vec::with_capacity(num_layers);
        activations.push(batch.inputs.clone());

        for idx in 0..num_layers {
            let z = self.layer_forward(idx, &activations[idx], adapters)?;
            let act = self.layers[idx].spec.activation;
            let mut h = z.clone();
            for v in h.as_mut_slice() {
                *v = act.apply(*v);
            }
            preacts.push(z);
            activations.push(h);
        }

        let output = activations.last().unwrap();
        let (loss, mut delta) = loss_and_delta(self.loss, output, &batch.targets);
        if !loss.is_finite() {
            return Err(GoraError::NonFinite("loss".into()));
        }

        // delta currently holds dL/d(output); fold in the last activation,
        // then walk the layers backwards.
        let mut grads: Vec<Matrix> = (0..num_layers).map(|_| Matrix::zeros(1, 1)).collect();
        for idx in (0..num_layers).rev() {
            let act = self.layers[idx].spec.activation;
            let z = &preacts[idx];
            for (d, zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= act.derivative(*zv);
            }
            grads[idx] = activations[idx].transpose().matmul(&delta)?;
            if idx > 0 {
                // d(previous activation) = delta * W_eff^T, factored so the
                // merged matrix never exists.
                let layer = &self.layers[idx];
                let mut prev = delta.matmul(&layer.weight.transpose())?;
                if let Some(ad) = adapters.get(&idx) {
                    let dbt = delta.matmul(&ad.b.transpose())?;
                    prev.axpy(ad.scale(), &dbt.matmul(&ad.a.transpose())?)?;
                }
                delta = prev;
            }
        }
        Ok((loss, grads))
    }

    /// Loss plus accuracy (for classification) on a batch.
    pub fn evaluate(&self, adapters: &AdapterSet, batch: &Batch) -> Result<EvalMetrics> {
        self.check_batch(batch)?;
        let out = self.forward(adapters, &batch.inputs)?;
        let (loss, _) = loss_and_delta(self.loss, &out, &batch.targets);
        let accuracy = match &batch.targets {
            Targets::Labels(labels) => {
                let mut correct = 0usize;
                for (i, &label) in labels.iter().enumerate() {
                    let row = out.row(i);
                    let mut best = 0usize;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = j;
                        }
                    }
                    if best == label {
                        correct += 1;
                    }
                }
                Some(correct as f64 / labels.len() as f64)
            }
            Targets::Regression(_) => None,
        };
        Ok(EvalMetrics { loss, accuracy })
    }
}

/// Mean loss over the batch and its gradient w.r.t. the network output.
/// MSE sums over output dimensions; cross entropy is per-sample.
fn loss_and_delta(loss: Loss, output: &Matrix, targets: &Targets) -> (f64, Matrix) {
    let batch = output.rows() as f64;
    match (loss, targets) {
        (Loss::Mse, Targets::Regression(y)) => {
            let mut delta = output.sub(y).expect("checked shapes");
            let total: f64 = delta.as_slice().iter().map(|d| d * d).sum();
            delta.scale_in_place(2.0 / batch);
            (total / batch, delta)
        }
        (Loss::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
            let mut delta = Matrix::zeros(output.rows(), output.cols());
            let mut total = 0.0;
            for i in 0..output.rows() {
                let row = output.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut zsum = 0.0;
                for &v in row {
                    zsum += (v - max).exp();
                }
                let log_zsum = zsum.ln() + max;
                total += log_zsum - row[labels[i]];
                for j in 0..output.cols() {
                    let p = (row[j] - log_zsum).exp();
                    delta[(i, j)] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / batch;
                }
            }
            (total / batch, delta)
        }
        _ => unreachable!("loss/target combination checked upstream"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterSet;
    use crate::numerics::Rng;

    fn single_linear(m: usize, n: usize, w: Matrix) -> Network {
        Network::new(
            vec![Layer {
                spec: LayerSpec { in_dim: m, out_dim: n, activation: Activation::Linear, adapt: true },
                weight: w,
                bias: None,
            }],
            Loss::Mse,
        )
        .unwrap()
    }

    #[test]
    fn linear_mse_gradient_matches_closed_form() {
        let mut rng = Rng::new(1);
        let (m, n, bs) = (5, 4, 7);
        let w = rng.sample_gaussian(m, n);
        let x = rng.sample_gaussian(bs, m);
        let y = rng.sample_gaussian(bs, n);
        let net = single_linear(m, n, w.clone());
        let batch = Batch { inputs: x.clone(), targets: Targets::Regression(y.clone()) };
        let (_, grads) = net.forward_backward(&AdapterSet::new(), &batch).unwrap();
        // grad = (2/batch) x^T (xW - y)
        let resid = x.matmul(&w).unwrap().sub(&y).unwrap();
        let expect = x.transpose().matmul(&resid).unwrap().scale(2.0 / bs as f64);
        assert!(grads[0].sub(&expect).unwrap().frobenius() < 1e-12 * expect.frobenius());
    }

    #[test]
    fn zero_inputs_give_zero_gradients() {
        let mut rng = Rng::new(2);
        let net = Network::new(
            vec![
                Layer {
                    spec: LayerSpec { in_dim: 3, out_dim: 4, activation: Activation::Tanh, adapt: true },
                    weight: rng.sample_gaussian(3, 4),
                    bias: None,
                },
                Layer {
                    spec: LayerSpec { in_dim: 4, out_dim: 2, activation: Activation::Linear, adapt: true },
                    weight: rng.sample_gaussian(4, 2),
                    bias: None,
                },
            ],
            Loss::Mse,
        )
        .unwrap();
        let batch = Batch {
            inputs: Matrix::zeros(5, 3),
            targets: Targets::Regression(Matrix::zeros(5, 2)),
        };
        let (loss, grads) = net.forward_backward(&AdapterSet::new(), &batch).unwrap();
        assert_eq!(loss, 0.0);
        for g in grads {
            assert_eq!(g.frobenius(), 0.0);
        }
    }

    #[test]
    fn batch_shape_mismatch_is_rejected() {
        let mut rng = Rng::new(3);
        let net = single_linear(5, 4, rng.sample_gaussian(5, 4));
        let batch = Batch {
            inputs: rng.sample_gaussian(2, 3),
            targets: Targets::Regression(rng.sample_gaussian(2, 4)),
        };
        assert!(net.forward_backward(&AdapterSet::new(), &batch).is_err());
    }

    #[test]
    fn softmax_loss_at_uniform_logits_is_ln_classes() {
        let net = Network::new(
            vec![Layer {
                spec: LayerSpec { in_dim: 3, out_dim: 4, activation: Activation::Linear, adapt: false },
                weight: Matrix::zeros(3, 4),
                bias: None,
            }],
            Loss::SoftmaxCrossEntropy,
        )
        .unwrap();
        let batch = Batch {
            inputs: Rng::new(4).sample_gaussian(6, 3),
            targets: Targets::Labels(vec![0, 1, 2, 3, 0, 1]),
        };
        let loss = net.forward_loss(&AdapterSet::new(), &batch).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }
}
