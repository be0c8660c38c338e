//! Fixed-topology MLP with hand-written backprop in FP32.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::data::{rng_for, Samples, Targets, STREAM_INIT};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    MeanSquared,
}

/// Layer widths from input to output; every hidden layer uses `activation`,
/// the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "mlp needs at least two non-zero layer widths, got {:?}",
                self.dims
            )));
        }
        if self.loss == LossKind::MeanSquared && *self.dims.last().unwrap() != 1 {
            return Err(Error::InvalidConfig(
                "mean-squared loss needs a single output".into(),
            ));
        }
        if self.loss == LossKind::CrossEntropy && *self.dims.last().unwrap() < 2 {
            return Err(Error::InvalidConfig(
                "cross-entropy needs at least two outputs".into(),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(name, element count)` for every parameter tensor, weight then bias
    /// per layer.
    pub fn param_shapes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::with_capacity(2 * self.layers());
        for l in 0..self.layers() {
            out.push((format!("layer{l}.weight"), self.dims[l + 1] * self.dims[l]));
            out.push((format!("layer{l}.bias"), self.dims[l + 1]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, n)| n).sum()
    }

    /// Glorot-uniform weights (He-uniform for ReLU), zero biases.
    pub fn init(&self, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = rng_for(seed, STREAM_INIT);
        let mut params = Vec::with_capacity(2 * self.layers());
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let limit = match self.activation {
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f32).sqrt(),
                Activation::Relu => (6.0 / fan_in as f32).sqrt(),
            };
            params.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect(),
            );
            params.push(vec![0.0; fan_out]);
        }
        params
    }
}

/// Activations saved by the forward pass.
pub struct ForwardCache {
    batch: usize,
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the batch itself.
    inputs: Vec<Vec<f32>>,
    pub output: Vec<f32>,
}

fn dense(weight: &[f32], bias: &[f32], x: &[f32], batch: usize, n_in: usize, n_out: usize) -> Vec<f32> {
    let mut out = vec![0.0_f32; batch * n_out];
    for b in 0..batch {
        let row = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let w = &weight[o * n_in..(o + 1) * n_in];
            let mut acc = bias[o];
            for (wi, xi) in w.iter().zip(row) {
                acc += wi * xi;
            }
            out[b * n_out + o] = acc;
        }
    }
    out
}

pub fn forward(spec: &MlpSpec, params: &[Vec<f32>], x: &[f32], batch: usize) -> ForwardCache {
    let mut inputs = Vec::with_capacity(spec.layers());
    let mut current = x.to_vec();
    for l in 0..spec.layers() {
        let (n_in, n_out) = (spec.dims[l], spec.dims[l + 1]);
        let mut z = dense(&params[2 * l], &params[2 * l + 1], &current, batch, n_in, n_out);
        if l + 1 < spec.layers() {
            match spec.activation {
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        inputs.push(std::mem::replace(&mut current, z));
    }
    ForwardCache {
        batch,
        inputs,
        output: current,
    }
}

/// Mean loss over the batch and its gradient with respect to the outputs.
pub fn loss_and_output_grad(spec: &MlpSpec, output: &[f32], targets: &Targets) -> (f32, Vec<f32>) {
    let n_out = *spec.dims.last().unwrap();
    let batch = targets.len();
    let inv = 1.0 / batch as f32;
    let mut grad = vec![0.0_f32; output.len()];
    let mut total = 0.0_f64;
    match (spec.loss, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            for (b, &label) in labels.iter().enumerate() {
                let logits = &output[b * n_out..(b + 1) * n_out];
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let sum: f32 = logits.iter().map(|z| (z - max).exp()).sum();
                let lse = max + sum.ln();
                total += (lse - logits[label as usize]) as f64;
                for (o, z) in logits.iter().enumerate() {
                    let p = (z - lse).exp();
                    let onehot = if o == label as usize { 1.0 } else { 0.0 };
                    grad[b * n_out + o] = (p - onehot) * inv;
                }
            }
        }
        (LossKind::MeanSquared, Targets::Values(values)) => {
            for (b, &y) in values.iter().enumerate() {
                let d = output[b] - y;
                total += (d * d) as f64;
                grad[b] = 2.0 * d * inv;
            }
        }
        _ => panic!("loss kind does not match target kind"),
    }
    ((total / batch as f64) as f32, grad)
}

/// Backpropagates `output_grad`, handing each parameter gradient to `sink`
/// as soon as it is complete (last layer first, weight before bias). The
/// gradient flowing to the previous layer is computed before `sink` sees the
/// current layer, so `sink` may update that layer's optimizer state eagerly.
pub fn backward(
    spec: &MlpSpec,
    params: &[Vec<f32>],
    cache: &ForwardCache,
    output_grad: Vec<f32>,
    mut sink: impl FnMut(usize, Vec<f32>),
) {
    let batch = cache.batch;
    let mut delta = output_grad;
    for l in (0..spec.layers()).rev() {
        let (n_in, n_out) = (spec.dims[l], spec.dims[l + 1]);
        let input = &cache.inputs[l];
        let weight = &params[2 * l];

        let mut dw = vec![0.0_f32; n_out * n_in];
        let mut db = vec![0.0_f32; n_out];
        for b in 0..batch {
            let row = &input[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let d = delta[b * n_out + o];
                db[o] += d;
                for (g, x) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(row) {
                    *g += d * x;
                }
            }
        }

        let prev = (l > 0).then(|| {
            let mut prev = vec![0.0_f32; batch * n_in];
            for b in 0..batch {
                let p = &mut prev[b * n_in..(b + 1) * n_in];
                for o in 0..n_out {
                    let d = delta[b * n_out + o];
                    for (pi, w) in p.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                        *pi += d * w;
                    }
                }
                // `input` holds the activated outputs of layer l-1.
                for (pi, a) in p.iter_mut().zip(&input[b * n_in..(b + 1) * n_in]) {
                    *pi *= match spec.activation {
                        Activation::Tanh => 1.0 - a * a,
                        Activation::Relu => {
                            if *a > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            prev
        });

        sink(2 * l, dw);
        sink(2 * l + 1, db);
        if let Some(p) = prev {
            delta = p;
        }
    }
}

/// Batch loss and all parameter gradients.
pub fn loss_and_grads(spec: &MlpSpec, params: &[Vec<f32>], samples: &Samples) -> (f32, Vec<Vec<f32>>) {
    let cache = forward(spec, params, &samples.inputs, samples.len());
    let (loss, dout) = loss_and_output_grad(spec, &cache.output, &samples.targets);
    let mut grads = vec![Vec::new(); params.len()];
    backward(spec, params, &cache, dout, |i, g| grads[i] = g);
    (loss, grads)
}

/// Mean loss and, for classification, accuracy in `[0, 1]`.
pub fn evaluate(spec: &MlpSpec, params: &[Vec<f32>], samples: &Samples) -> (f32, Option<f32>) {
    let cache = forward(spec, params, &samples.inputs, samples.len());
    let (loss, _) = loss_and_output_grad(spec, &cache.output, &samples.targets);
    let accuracy = match &samples.targets {
        Targets::Classes(labels) => {
            let n_out = *spec.dims.last().unwrap();
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(b, &label)| {
                    let logits = &cache.output[b * n_out..(b + 1) * n_out];
                    let best = logits
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &z)| if z > logits[best] { i } else { best });
                    best == label as usize
                })
                .count();
            Some(correct as f32 / labels.len() as f32)
        }
        Targets::Values(_) => None,
    };
    (loss, accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MlpSpec {
        MlpSpec {
            dims: vec![3, 4, 2],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
        }
    }

    #[test]
    fn shapes_and_init() {
        let s = spec();
        assert_eq!(s.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        let p = s.init(0);
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].len(), 12);
        assert!(p[1].iter().all(|&b| b == 0.0));
        assert_eq!(p, s.init(0));
        assert_ne!(p, s.init(1));
    }

    #[test]
    fn validate_rejects_bad_topologies() {
        let mut s = spec();
        s.dims = vec![3];
        assert!(s.validate().is_err());
        let s = MlpSpec {
            dims: vec![3, 2],
            activation: Activation::Relu,
            loss: LossKind::MeanSquared,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn uniform_logits_give_log2_loss() {
        let s = spec();
        let params = vec![vec![0.0; 12], vec![0.0; 4], vec![0.0; 8], vec![0.0; 2]];
        let x = Samples {
            inputs: vec![1.0, 2.0, 3.0],
            targets: Targets::Classes(vec![1]),
            n_features: 3,
        };
        let (loss, acc) = evaluate(&s, &params, &x);
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        // Ties resolve to class 0.
        assert_eq!(acc, Some(0.0));
    }

    #[test]
    fn backward_emits_last_layer_first() {
        let s = spec();
        let params = s.init(4);
        let x = Samples {
            inputs: vec![0.1, -0.2, 0.3, 0.5, 0.5, -1.0],
            targets: Targets::Classes(vec![0, 1]),
            n_features: 3,
        };
        let cache = forward(&s, &params, &x.inputs, 2);
        let (_, dout) = loss_and_output_grad(&s, &cache.output, &x.targets);
        let mut order = Vec::new();
        backward(&s, &params, &cache, dout, |i, g| order.push((i, g.len())));
        assert_eq!(order, vec![(2, 8), (3, 2), (0, 12), (1, 4)]);
    }
}
