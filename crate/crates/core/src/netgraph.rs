//! Feedforward architecture descriptions, parameter storage, masking and
//! the structural quantities (parameter counts, max compression) the rest
//! of the engine consumes.
//!
//! A network is an ordered list of layers plus optional residual edges.
//! Prunable parameters are the weights of dense and conv layers; biases and
//! batch-norm parameters are never masked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a residual edge taps its activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    /// The network input.
    Input,
    /// The output of the layer at this index.
    Layer(usize),
}

/// One layer of a feedforward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { out_dim: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool { kernel: usize, stride: usize },
    Relu,
    BatchNorm,
    Flatten,
    /// Adds the activation at `source` to this layer's input. Carries no
    /// parameters, so layer cuts spanned by the edge are not separating.
    ResidualAdd { source: ResidualSource },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd { .. } => "residual_add",
        }
    }

    /// True for layers whose weight tensor participates in masking.
    pub fn has_prunable_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

/// A layer together with its resolved input/output shapes (batch dim excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl LayerSpec {
    /// Number of prunable weight elements in this layer (0 if none).
    pub fn weight_count(&self) -> usize {
        self.weight_shape().map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Shape of the prunable weight tensor, if the layer has one.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match &self.kind {
            LayerKind::Dense { out_dim } => {
                let in_dim = self.input_shape.iter().product();
                Some(vec![*out_dim, in_dim])
            }
            LayerKind::Conv2d { out_channels, kernel, .. } => {
                let in_ch = self.input_shape[0];
                Some(vec![*out_channels, in_ch, *kernel, *kernel])
            }
            _ => None,
        }
    }
}

/// A validated feedforward architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Resolve per-layer shapes for a chain of layer kinds and validate the
    /// result. `input_shape` excludes the batch dimension: `[dim]` for flat
    /// inputs, `[channels, height, width]` for images.
    pub fn new(input_shape: Vec<usize>, kinds: Vec<LayerKind>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::structural(None, "input shape must be non-empty and positive"));
        }
        let mut layers = Vec::with_capacity(kinds.len());
        let mut shape = input_shape.clone();
        for (idx, kind) in kinds.into_iter().enumerate() {
            let out = Self::infer_output(&kind, &shape, idx, &input_shape, &layers)?;
            layers.push(LayerSpec { kind, input_shape: shape.clone(), output_shape: out.clone() });
            shape = out;
        }
        let spec = NetworkSpec { input_shape, layers };
        spec.validate()?;
        Ok(spec)
    }

    fn infer_output(
        kind: &LayerKind,
        input: &[usize],
        idx: usize,
        net_input: &[usize],
        built: &[LayerSpec],
    ) -> Result<Vec<usize>> {
        match kind {
            LayerKind::Dense { out_dim } => {
                if *out_dim == 0 {
                    return Err(Error::structural(idx, "dense layer with zero outputs"));
                }
                if input.len() != 1 {
                    return Err(Error::structural(
                        idx,
                        format!("dense layer expects flat input, got shape {input:?} (flatten first)"),
                    ));
                }
                Ok(vec![*out_dim])
            }
            LayerKind::Conv2d { out_channels, kernel, stride, padding } => {
                if input.len() != 3 {
                    return Err(Error::structural(
                        idx,
                        format!("conv2d expects [channels, h, w] input, got {input:?}"),
                    ));
                }
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(Error::structural(idx, "conv2d needs positive channels/kernel/stride"));
                }
                let (h, w) = (input[1], input[2]);
                let span = |d: usize| {
                    (d + 2 * padding)
                        .checked_sub(*kernel)
                        .map(|v| v / stride + 1)
                        .filter(|&v| v > 0)
                };
                match (span(h), span(w)) {
                    (Some(oh), Some(ow)) => Ok(vec![*out_channels, oh, ow]),
                    _ => Err(Error::structural(
                        idx,
                        format!("conv2d kernel {kernel} does not fit input {h}x{w} with padding {padding}"),
                    )),
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                if input.len() != 3 {
                    return Err(Error::structural(
                        idx,
                        format!("maxpool expects [channels, h, w] input, got {input:?}"),
                    ));
                }
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::structural(idx, "maxpool needs positive kernel/stride"));
                }
                let span = |d: usize| d.checked_sub(*kernel).map(|v| v / stride + 1).filter(|&v| v > 0);
                match (span(input[1]), span(input[2])) {
                    (Some(oh), Some(ow)) => Ok(vec![input[0], oh, ow]),
                    _ => Err(Error::structural(
                        idx,
                        format!("maxpool kernel {kernel} does not fit input {input:?}"),
                    )),
                }
            }
            LayerKind::Relu | LayerKind::BatchNorm => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::ResidualAdd { source } => {
                let src_shape = match source {
                    ResidualSource::Input => net_input.to_vec(),
                    ResidualSource::Layer(s) => {
                        if *s >= idx {
                            return Err(Error::structural(
                                idx,
                                format!("residual source {s} must precede the add point {idx}"),
                            ));
                        }
                        built[*s].output_shape.clone()
                    }
                };
                if src_shape != input {
                    return Err(Error::structural(
                        idx,
                        format!("residual add: source shape {src_shape:?} vs input {input:?}"),
                    ));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Re-check the chained-shape invariants. `new` establishes them; this
    /// guards specs deserialized from config files.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::structural(None, "network has no layers"));
        }
        let mut shape = self.input_shape.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.input_shape != shape {
                return Err(Error::structural(
                    idx,
                    format!("layer input shape {:?} does not chain from {:?}", layer.input_shape, shape),
                ));
            }
            let expect =
                Self::infer_output(&layer.kind, &shape, idx, &self.input_shape, &self.layers[..idx])?;
            if layer.output_shape != expect {
                return Err(Error::structural(
                    idx,
                    format!("layer output shape {:?}, expected {:?}", layer.output_shape, expect),
                ));
            }
            shape = layer.output_shape.clone();
        }
        Ok(())
    }

    /// Flat output dimension of the final layer.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_shape.iter().product()).unwrap_or(0)
    }

    /// Indices of layers with prunable weights, in order.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.has_prunable_weights())
            .map(|(i, _)| i)
            .collect()
    }

    /// Total number of prunable weight elements.
    pub fn prunable_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    /// Residual edges as (source, add-point) pairs.
    pub fn residual_edges(&self) -> Vec<(ResidualSource, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l.kind {
                LayerKind::ResidualAdd { source } => Some((source, i)),
                _ => None,
            })
            .collect()
    }

    /// Index of the first batch-norm layer, if any. Every other layer kind
    /// here is homogeneous (relu, maxpool, linear maps, flatten, adds);
    /// batch-norm is the one that breaks the conservation premise.
    pub fn first_batchnorm_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l.kind, LayerKind::BatchNorm))
    }
}

/// Per-layer parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    /// Layer carries no parameters.
    None,
    /// Dense or conv weights plus bias.
    Weighted { weight: Tensor, bias: Tensor },
    /// Batch-norm affine parameters and running buffers.
    BatchNorm { scale: Tensor, shift: Tensor, running_mean: Tensor, running_var: Tensor },
}

/// All parameter tensors of a network, aligned with its layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        match &self.layers[layer] {
            LayerParams::Weighted { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self, layer: usize) -> Option<&Tensor> {
        match &self.layers[layer] {
            LayerParams::Weighted { bias, .. } => Some(bias),
            _ => None,
        }
    }

    /// Element-wise |θ| on every parameter tensor (running buffers untouched).
    pub fn abs(&self) -> ParamSet {
        let layers = self
            .layers
            .iter()
            .map(|lp| match lp {
                LayerParams::None => LayerParams::None,
                LayerParams::Weighted { weight, bias } => {
                    LayerParams::Weighted { weight: weight.abs(), bias: bias.abs() }
                }
                LayerParams::BatchNorm { scale, shift, running_mean, running_var } => {
                    LayerParams::BatchNorm {
                        scale: scale.abs(),
                        shift: shift.abs(),
                        running_mean: running_mean.clone(),
                        running_var: running_var.clone(),
                    }
                }
            })
            .collect();
        ParamSet { layers }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|lp| match lp {
            LayerParams::None => true,
            LayerParams::Weighted { weight, bias } => weight.all_finite() && bias.all_finite(),
            LayerParams::BatchNorm { scale, shift, running_mean, running_var } => {
                scale.all_finite()
                    && shift.all_finite()
                    && running_mean.all_finite()
                    && running_var.all_finite()
            }
        })
    }
}

/// Binary masks congruent with the prunable weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    /// One entry per layer; `Some` only at prunable layers.
    pub weights: Vec<Option<Tensor>>,
}

impl Mask {
    /// All-ones mask for a spec.
    pub fn full(spec: &NetworkSpec) -> Mask {
        let weights = spec
            .layers
            .iter()
            .map(|l| l.weight_shape().map(Tensor::ones))
            .collect();
        Mask { weights }
    }

    pub fn layer(&self, layer: usize) -> Option<&Tensor> {
        self.weights.get(layer).and_then(|m| m.as_ref())
    }

    /// Count of kept (μ=1) entries across all layers.
    pub fn remaining(&self) -> usize {
        self.weights
            .iter()
            .flatten()
            .map(|t| t.data().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }

    /// Verify shape congruence against a spec and 0/1-ness of entries.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.weights.len() != spec.layers.len() {
            return Err(Error::structural(None, "mask layer count mismatch"));
        }
        for (idx, (m, l)) in self.weights.iter().zip(&spec.layers).enumerate() {
            match (m, l.weight_shape()) {
                (Some(t), Some(shape)) => {
                    if t.shape() != shape.as_slice() {
                        return Err(Error::structural(
                            idx,
                            format!("mask shape {:?} vs weight shape {:?}", t.shape(), shape),
                        ));
                    }
                    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Err(Error::structural(idx, "mask entries must be 0 or 1"));
                    }
                }
                (None, None) => {}
                _ => return Err(Error::structural(idx, "mask/prunable-layer mismatch")),
            }
        }
        Ok(())
    }
}

/// Kaiming-normal initialization: weights ~ N(0, 2/fan_in), biases zero,
/// batch-norm scale 1 / shift 0 with unit running variance. Deterministic
/// for a fixed seed.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_distr::StandardNormal;

    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let lp = match &layer.kind {
            LayerKind::Dense { out_dim } => {
                let in_dim: usize = layer.input_shape.iter().product();
                let std = (2.0 / in_dim as f64).sqrt();
                let data: Vec<f64> = (0..out_dim * in_dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * std
                    })
                    .collect();
                LayerParams::Weighted {
                    weight: Tensor::new(vec![*out_dim, in_dim], data)?,
                    bias: Tensor::zeros(vec![*out_dim]),
                }
            }
            LayerKind::Conv2d { out_channels, kernel, .. } => {
                let in_ch = layer.input_shape[0];
                let fan_in = in_ch * kernel * kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let data: Vec<f64> = (0..out_channels * fan_in)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * std
                    })
                    .collect();
                LayerParams::Weighted {
                    weight: Tensor::new(vec![*out_channels, in_ch, *kernel, *kernel], data)?,
                    bias: Tensor::zeros(vec![*out_channels]),
                }
            }
            LayerKind::BatchNorm => {
                let ch = layer.input_shape[0];
                LayerParams::BatchNorm {
                    scale: Tensor::ones(vec![ch]),
                    shift: Tensor::zeros(vec![ch]),
                    running_mean: Tensor::zeros(vec![ch]),
                    running_var: Tensor::ones(vec![ch]),
                }
            }
            _ => LayerParams::None,
        };
        layers.push(lp);
    }
    let params = ParamSet { layers };
    debug_assert!(params.all_finite());
    Ok(params)
}

/// θ_μ ← μ ⊙ θ on prunable tensors; biases and batch-norm returned unchanged.
pub fn apply_mask(params: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    if params.layers.len() != mask.weights.len() {
        return Err(Error::structural(None, "mask layer count mismatch"));
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for (idx, (lp, m)) in params.layers.iter().zip(&mask.weights).enumerate() {
        let masked = match (lp, m) {
            (LayerParams::Weighted { weight, bias }, Some(mu)) => LayerParams::Weighted {
                weight: weight.hadamard(mu).map_err(|_| {
                    Error::structural(
                        idx,
                        format!("mask shape {:?} vs weight shape {:?}", mu.shape(), weight.shape()),
                    )
                })?,
                bias: bias.clone(),
            },
            (LayerParams::Weighted { .. }, None) => {
                return Err(Error::structural(idx, "missing mask for prunable layer"))
            }
            (other, _) => other.clone(),
        };
        layers.push(masked);
    }
    Ok(ParamSet { layers })
}

/// ρ_max = N / L: prune everything but one parameter per prunable layer.
pub fn max_compression(spec: &NetworkSpec) -> Result<f64> {
    let prunable = spec.prunable_layers();
    if prunable.is_empty() {
        return Err(Error::domain("network has no prunable layers"));
    }
    let n = spec.prunable_param_count() as f64;
    Ok(n / prunable.len() as f64)
}

/// Per prunable layer: (layer index, total weights, weights with μ=1).
pub fn layer_param_counts(spec: &NetworkSpec, mask: &Mask) -> Vec<(usize, usize, usize)> {
    spec.prunable_layers()
        .into_iter()
        .map(|idx| {
            let total = spec.layers[idx].weight_count();
            let remaining = mask
                .layer(idx)
                .map(|t| t.data().iter().filter(|&&v| v != 0.0).count())
                .unwrap_or(0);
            (idx, total, remaining)
        })
        .collect()
}
