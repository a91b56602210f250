//! Toy training loop: SGD with momentum, weight decay and step learning-rate
//! drops, under a fixed mask. Masked positions have their gradients zeroed
//! every step so they stay exactly zero.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward, loss_and_grad, LayerGrads, LossKind, Mode};
use crate::error::Result;
use crate::harness::dataset::Dataset;
use crate::netgraph::{apply_mask, LayerParams, Mask, NetworkSpec, ParamSet};
use crate::tensor::Tensor;

/// Momentum used for batch-norm running-buffer updates.
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "default_drop_factor")]
    pub lr_drop_factor: f64,
    /// Global L2 gradient-norm clip; None disables clipping. One clipped
    /// recipe can serve both the dense network and its extremely sparse
    /// subnetworks, whose usable learning rates otherwise differ by orders
    /// of magnitude.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    pub loss: LossSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_drop_factor() -> f64 {
    0.1
}

/// Serializable loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    Mse,
}

impl From<LossSpec> for LossKind {
    fn from(l: LossSpec) -> LossKind {
        match l {
            LossSpec::CrossEntropy => LossKind::CrossEntropy,
            LossSpec::Mse => LossKind::Mse,
        }
    }
}

/// Per-epoch metrics of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Training hit a non-finite loss and stopped early.
    pub diverged: bool,
}

/// Train the masked network; returns the trained parameters and metric
/// history. Deterministic for fixed (hyperparams, seed).
pub fn train(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    dataset: &Dataset,
    hyper: &Hyperparams,
) -> Result<(ParamSet, TrainHistory)> {
    let mut current = apply_mask(params, mask)?;
    let mut velocity: Vec<LayerGrads> = current
        .layers
        .iter()
        .map(|lp| match lp {
            LayerParams::None => LayerGrads::None,
            LayerParams::Weighted { weight, bias } => LayerGrads::Weighted {
                weight: Tensor::zeros_like(weight),
                bias: Tensor::zeros_like(bias),
            },
            LayerParams::BatchNorm { scale, shift, .. } => LayerGrads::BatchNorm {
                scale: Tensor::zeros_like(scale),
                shift: Tensor::zeros_like(shift),
            },
        })
        .collect();

    let loss_kind: LossKind = hyper.loss.into();
    let mut lr = hyper.lr;
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(hyper.epochs),
        test_accuracy: Vec::with_capacity(hyper.epochs),
        diverged: false,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(hyper.seed);
    let n = dataset.train_len();
    let batch_size = hyper.batch_size.max(1).min(n);

    'epochs: for epoch in 0..hyper.epochs {
        if hyper.lr_drop_epochs.contains(&epoch) {
            lr *= hyper.lr_drop_factor;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let batch = dataset.train_batch(chunk, &spec.input_shape)?;
            // An exploding forward pass is divergence, not a crash.
            let (loss, grads) =
                match loss_and_grad(spec, &current, mask, &batch, loss_kind, Mode::Train) {
                    Ok(pair) => pair,
                    Err(crate::error::Error::Numeric { .. }) => {
                        history.diverged = true;
                        break 'epochs;
                    }
                    Err(other) => return Err(other),
                };
            if !loss.is_finite() {
                history.diverged = true;
                break 'epochs;
            }
            epoch_loss += loss;
            batches += 1.0;

            if has_batchnorm(spec) {
                update_bn_buffers(spec, &mut current, &batch, mask)?;
            }

            let clip = clip_factor(&grads, mask, hyper.grad_clip_norm);

            for (idx, lg) in grads.layers.iter().enumerate() {
                match (lg, &mut velocity[idx], &mut current.layers[idx]) {
                    (
                        LayerGrads::Weighted { weight: gw, bias: gb },
                        LayerGrads::Weighted { weight: vw, bias: vb },
                        LayerParams::Weighted { weight, bias },
                    ) => {
                        let mu = mask.layer(idx);
                        step_masked(weight, vw, gw, mu, lr, hyper.momentum, hyper.weight_decay, clip);
                        step_masked(bias, vb, gb, None, lr, hyper.momentum, hyper.weight_decay, clip);
                    }
                    (
                        LayerGrads::BatchNorm { scale: gs, shift: gh },
                        LayerGrads::BatchNorm { scale: vs, shift: vh },
                        LayerParams::BatchNorm { scale, shift, .. },
                    ) => {
                        step_masked(scale, vs, gs, None, lr, hyper.momentum, hyper.weight_decay, clip);
                        step_masked(shift, vh, gh, None, lr, hyper.momentum, hyper.weight_decay, clip);
                    }
                    _ => {}
                }
            }
        }
        if history.diverged {
            break;
        }
        history.epoch_loss.push(epoch_loss / batches.max(1.0));
        match evaluate_accuracy(spec, &current, mask, dataset) {
            Ok(acc) => history.test_accuracy.push(acc),
            Err(crate::error::Error::Numeric { .. }) => {
                history.diverged = true;
                break;
            }
            Err(other) => return Err(other),
        }
    }

    Ok((current, history))
}

fn has_batchnorm(spec: &NetworkSpec) -> bool {
    spec.first_batchnorm_layer().is_some()
}

/// One forward pass in train mode to refresh batch-norm running buffers.
fn update_bn_buffers(
    spec: &NetworkSpec,
    params: &mut ParamSet,
    batch: &crate::autodiff::Batch,
    mask: &Mask,
) -> Result<()> {
    let trace = forward(spec, params, mask, &batch.inputs, Mode::Train)?;
    for (idx, lp) in params.layers.iter_mut().enumerate() {
        if let LayerParams::BatchNorm { running_mean, running_var, .. } = lp {
            if let Some((mean, var)) = trace.bn_batch_stats(idx) {
                let rm = running_mean.data_mut();
                let rv = running_var.data_mut();
                for c in 0..rm.len() {
                    rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
                    rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c];
                }
            }
        }
    }
    Ok(())
}

/// Global gradient-norm clip factor over unmasked gradients.
fn clip_factor(grads: &crate::autodiff::GradientSet, mask: &Mask, clip: Option<f64>) -> f64 {
    let Some(c) = clip else { return 1.0 };
    let mut sq = 0.0;
    for (idx, lg) in grads.layers.iter().enumerate() {
        match lg {
            LayerGrads::Weighted { weight, bias } => {
                match mask.layer(idx) {
                    Some(mu) => {
                        for (g, m) in weight.data().iter().zip(mu.data()) {
                            if *m != 0.0 {
                                sq += g * g;
                            }
                        }
                    }
                    None => sq += weight.frob_sq(),
                }
                sq += bias.frob_sq();
            }
            LayerGrads::BatchNorm { scale, shift } => {
                sq += scale.frob_sq() + shift.frob_sq();
            }
            LayerGrads::None => {}
        }
    }
    let norm = sq.sqrt();
    if norm > c {
        c / norm
    } else {
        1.0
    }
}

/// SGD step with momentum and weight decay folded into the gradient.
/// Gradients at masked positions are zeroed first; `clip` scales the raw
/// gradient before the update.
#[allow(clippy::too_many_arguments)]
fn step_masked(
    param: &mut Tensor,
    vel: &mut Tensor,
    grad: &Tensor,
    mask: Option<&Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    clip: f64,
) {
    let pd = param.data_mut();
    let vd = vel.data_mut();
    let gd = grad.data();
    for i in 0..pd.len() {
        let alive = mask.map(|m| m.get(i) != 0.0).unwrap_or(true);
        let g = if alive { clip * gd[i] + weight_decay * pd[i] } else { 0.0 };
        vd[i] = momentum * vd[i] - lr * g;
        pd[i] += vd[i];
    }
}

/// Top-1 accuracy on the test split (eval mode), argmax tie to the first
/// maximal logit.
pub fn evaluate_accuracy(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    dataset: &Dataset,
) -> Result<f64> {
    let batch = dataset.test_batch(&spec.input_shape)?;
    let trace = forward(spec, params, mask, &batch.inputs, Mode::Eval)?;
    let classes = spec.output_dim();
    let y = trace.output().data();
    let mut correct = 0usize;
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = &y[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.labels.len().max(1) as f64)
}
