//! Forward evaluation and reverse-mode gradients for the layer kinds in
//! [`NetworkSpec`], plus a finite-difference Hessian-vector product.
//!
//! Gradients are exact reverse-mode for objectives of the form
//! ⟨output_grad, y⟩; every layer backward is gated by a central
//! finite-difference oracle in the tests. All evaluation is sequential with
//! a fixed reduction order, so traces and gradients are bit-deterministic.

use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, LayerParams, Mask, NetworkSpec, ParamSet, ResidualSource};
use crate::tensor::Tensor;

/// Batch-norm variance epsilon used by training and plain evaluation.
pub const BN_EPS: f64 = 1e-5;

/// Whether batch-norm uses batch statistics (train) or running buffers (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A labelled mini-batch: inputs with leading batch dimension, one integer
/// label per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Scalar training losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone)]
pub(crate) struct BnBatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Everything recorded during a forward pass; replaying it is bit-exact
/// because evaluation is deterministic.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    /// Network input including batch dimension.
    pub input: Tensor,
    /// Output of every layer, in order.
    pub outputs: Vec<Tensor>,
    /// The masked parameters the pass actually used.
    pub masked: ParamSet,
    /// Per pool layer: flat input index chosen for each output element
    /// (first maximal element on ties).
    pool_argmax: Vec<Option<Vec<usize>>>,
    /// Per batch-norm layer in train mode: the batch statistics used.
    bn_stats: Vec<Option<BnBatchStats>>,
    bn_eps: f64,
}

impl ForwardTrace {
    /// Final network output (with batch dimension).
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("trace has at least one layer")
    }

    fn input_of(&self, layer: usize) -> &Tensor {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }

    /// Batch statistics (mean, biased variance) recorded for a train-mode
    /// batch-norm layer; used to update running buffers during training.
    pub(crate) fn bn_batch_stats(&self, layer: usize) -> Option<(&[f64], &[f64])> {
        self.bn_stats[layer].as_ref().map(|s| (s.mean.as_slice(), s.var.as_slice()))
    }
}

/// Gradients congruent with a [`ParamSet`]'s trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Weighted { weight: Tensor, bias: Tensor },
    BatchNorm { scale: Tensor, shift: Tensor },
}

/// ∂R/∂θ for every trainable tensor plus ∂R/∂x.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
    pub input: Tensor,
}

impl GradientSet {
    pub fn zeros_like(params: &ParamSet, input: &Tensor) -> GradientSet {
        let layers = params
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
        GradientSet { layers, input: Tensor::zeros_like(input) }
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        match &self.layers[layer] {
            LayerGrads::Weighted { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self, layer: usize) -> Option<&Tensor> {
        match &self.layers[layer] {
            LayerGrads::Weighted { bias, .. } => Some(bias),
            _ => None,
        }
    }

    /// Accumulate `other` into `self`; structures must match.
    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::structural(None, "gradient set layer count mismatch"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerGrads::None, LayerGrads::None) => {}
                (
                    LayerGrads::Weighted { weight: wa, bias: ba },
                    LayerGrads::Weighted { weight: wb, bias: bb },
                ) => {
                    wa.add_assign(wb)?;
                    ba.add_assign(bb)?;
                }
                (
                    LayerGrads::BatchNorm { scale: sa, shift: ha },
                    LayerGrads::BatchNorm { scale: sb, shift: hb },
                ) => {
                    sa.add_assign(sb)?;
                    ha.add_assign(hb)?;
                }
                _ => return Err(Error::structural(None, "gradient set structure mismatch")),
            }
        }
        self.input.add_assign(&other.input)
    }

    /// Trainable tensors flattened in layer order (weight, bias | scale, shift).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for lg in &self.layers {
            match lg {
                LayerGrads::None => {}
                LayerGrads::Weighted { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias.data());
                }
                LayerGrads::BatchNorm { scale, shift } => {
                    out.extend_from_slice(scale.data());
                    out.extend_from_slice(shift.data());
                }
            }
        }
        out
    }

    /// Rebuild a gradient set from flat values laid out as [`flatten`] does.
    pub fn from_flat(params: &ParamSet, input_shape: &[usize], flat: &[f64]) -> Result<GradientSet> {
        let mut pos = 0;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if pos + n > flat.len() {
                return Err(Error::structural(None, "flat gradient vector too short"));
            }
            let t = Tensor::new(shape.to_vec(), flat[pos..pos + n].to_vec())?;
            pos += n;
            Ok(t)
        };
        let mut layers = Vec::with_capacity(params.layers.len());
        for lp in &params.layers {
            layers.push(match lp {
                LayerParams::None => LayerGrads::None,
                LayerParams::Weighted { weight, bias } => LayerGrads::Weighted {
                    weight: take(weight.shape())?,
                    bias: take(bias.shape())?,
                },
                LayerParams::BatchNorm { scale, shift, .. } => LayerGrads::BatchNorm {
                    scale: take(scale.shape())?,
                    shift: take(shift.shape())?,
                },
            });
        }
        if pos != flat.len() {
            return Err(Error::structural(None, "flat gradient vector too long"));
        }
        Ok(GradientSet { layers, input: Tensor::zeros(input_shape.to_vec()) })
    }
}

impl ParamSet {
    /// Trainable tensors flattened in the same order as [`GradientSet::flatten`].
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for lp in &self.layers {
            match lp {
                LayerParams::None => {}
                LayerParams::Weighted { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias.data());
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.extend_from_slice(scale.data());
                    out.extend_from_slice(shift.data());
                }
            }
        }
        out
    }

    /// New parameter set with trainable values replaced from a flat vector;
    /// running buffers are carried over unchanged.
    pub fn with_trainable(&self, flat: &[f64]) -> Result<ParamSet> {
        let mut pos = 0;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if pos + n > flat.len() {
                return Err(Error::structural(None, "flat parameter vector too short"));
            }
            let t = Tensor::new(shape.to_vec(), flat[pos..pos + n].to_vec())?;
            pos += n;
            Ok(t)
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            layers.push(match lp {
                LayerParams::None => LayerParams::None,
                LayerParams::Weighted { weight, bias } => LayerParams::Weighted {
                    weight: take(weight.shape())?,
                    bias: take(bias.shape())?,
                },
                LayerParams::BatchNorm { scale, shift, running_mean, running_var } => {
                    LayerParams::BatchNorm {
                        scale: take(scale.shape())?,
                        shift: take(shift.shape())?,
                        running_mean: running_mean.clone(),
                        running_var: running_var.clone(),
                    }
                }
            });
        }
        if pos != flat.len() {
            return Err(Error::structural(None, "flat parameter vector too long"));
        }
        Ok(ParamSet { layers })
    }
}

/// Masked forward pass. Eval mode reads batch-norm running buffers; train
/// mode uses biased batch statistics.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    input: &Tensor,
    mode: Mode,
) -> Result<ForwardTrace> {
    forward_with_eps(spec, params, mask, input, mode, BN_EPS)
}

/// Forward pass with an explicit batch-norm epsilon. The saliency zero-sum
/// law for batch-norm is exact only at eps = 0, so the conservation module
/// calls this directly.
pub fn forward_with_eps(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    input: &Tensor,
    mode: Mode,
    bn_eps: f64,
) -> Result<ForwardTrace> {
    let masked = crate::netgraph::apply_mask(params, mask)?;
    let batch = check_input_shape(spec, input)?;

    let mut outputs: Vec<Tensor> = Vec::with_capacity(spec.layers.len());
    let mut pool_argmax: Vec<Option<Vec<usize>>> = Vec::with_capacity(spec.layers.len());
    let mut bn_stats: Vec<Option<BnBatchStats>> = Vec::with_capacity(spec.layers.len());

    for (idx, layer) in spec.layers.iter().enumerate() {
        let x = if idx == 0 { input } else { &outputs[idx - 1] };
        let mut argmax = None;
        let mut stats = None;
        let out = match &layer.kind {
            LayerKind::Dense { out_dim } => {
                let (w, b) = weighted(&masked, idx)?;
                dense_forward(x, w, b, batch, *out_dim)
            }
            LayerKind::Conv2d { out_channels, kernel, stride, padding } => {
                let (w, b) = weighted(&masked, idx)?;
                conv_forward(x, w, b, &layer.input_shape, batch, *out_channels, *kernel, *stride, *padding)
            }
            LayerKind::MaxPool { kernel, stride } => {
                let (out, arg) = pool_forward(x, &layer.input_shape, batch, *kernel, *stride);
                argmax = Some(arg);
                out
            }
            LayerKind::Relu => x.map(|v| v.max(0.0)),
            LayerKind::BatchNorm => match &masked.layers[idx] {
                LayerParams::BatchNorm { scale, shift, running_mean, running_var } => match mode {
                    Mode::Eval => {
                        bn_eval_forward(x, &layer.input_shape, batch, scale, shift, running_mean, running_var, bn_eps)
                    }
                    Mode::Train => {
                        let (out, st) = bn_train_forward(x, &layer.input_shape, batch, scale, shift, bn_eps);
                        stats = Some(st);
                        out
                    }
                },
                _ => return Err(Error::structural(idx, "batch-norm layer without parameters")),
            },
            LayerKind::Flatten => x.reshape(vec![batch, layer.output_shape[0]])?,
            LayerKind::ResidualAdd { source } => {
                let src = match source {
                    ResidualSource::Input => input,
                    ResidualSource::Layer(s) => &outputs[*s],
                };
                let mut out = x.clone();
                out.add_assign(src)?;
                out
            }
        };
        if !out.all_finite() {
            return Err(Error::numeric(
                idx,
                format!("non-finite activation after {} layer", layer.kind.name()),
            ));
        }
        outputs.push(out);
        pool_argmax.push(argmax);
        bn_stats.push(stats);
    }

    Ok(ForwardTrace {
        mode,
        input: input.clone(),
        outputs,
        masked,
        pool_argmax,
        bn_stats,
        bn_eps,
    })
}

fn check_input_shape(spec: &NetworkSpec, input: &Tensor) -> Result<usize> {
    let dims = input.shape();
    if dims.len() != spec.input_shape.len() + 1 || dims[1..] != spec.input_shape[..] {
        return Err(Error::structural(
            None,
            format!("input shape {:?} does not match network input {:?} (plus batch dim)", dims, spec.input_shape),
        ));
    }
    Ok(dims[0])
}

fn weighted<'p>(params: &'p ParamSet, idx: usize) -> Result<(&'p Tensor, &'p Tensor)> {
    match &params.layers[idx] {
        LayerParams::Weighted { weight, bias } => Ok((weight, bias)),
        _ => Err(Error::structural(idx, "layer is missing weight parameters")),
    }
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, batch: usize, out_dim: usize) -> Tensor {
    let in_dim = w.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; batch * out_dim];
    for bi in 0..batch {
        for o in 0..out_dim {
            let mut acc = bd[o];
            let row = &wd[o * in_dim..(o + 1) * in_dim];
            let xs = &xd[bi * in_dim..(bi + 1) * in_dim];
            for i in 0..in_dim {
                acc += row[i] * xs[i];
            }
            out[bi * out_dim + o] = acc;
        }
    }
    Tensor::new(vec![batch, out_dim], out).expect("dense output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    in_shape: &[usize],
    batch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (c_in, h, wdt) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (wdt + 2 * padding - kernel) / stride + 1;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; batch * out_ch * oh * ow];
    for bi in 0..batch {
        let xb = &xd[bi * c_in * h * wdt..(bi + 1) * c_in * h * wdt];
        for o in 0..out_ch {
            for py in 0..oh {
                for px in 0..ow {
                    let mut acc = bd[o];
                    for c in 0..c_in {
                        for u in 0..kernel {
                            let iy = (py * stride + u) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..kernel {
                                let ix = (px * stride + v) as isize - padding as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                acc += wd[((o * c_in + c) * kernel + u) * kernel + v]
                                    * xb[(c * h + iy as usize) * wdt + ix as usize];
                            }
                        }
                    }
                    out[((bi * out_ch + o) * oh + py) * ow + px] = acc;
                }
            }
        }
    }
    Tensor::new(vec![batch, out_ch, oh, ow], out).expect("conv output shape")
}

fn pool_forward(
    x: &Tensor,
    in_shape: &[usize],
    batch: usize,
    kernel: usize,
    stride: usize,
) -> (Tensor, Vec<usize>) {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let xd = x.data();
    let mut out = vec![0.0; batch * c_in * oh * ow];
    let mut arg = vec![0usize; batch * c_in * oh * ow];
    for bi in 0..batch {
        for c in 0..c_in {
            let base = (bi * c_in + c) * h * w;
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for u in 0..kernel {
                        for v in 0..kernel {
                            let idx = base + (py * stride + u) * w + (px * stride + v);
                            // Strict > keeps the first maximal element on ties.
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let opos = ((bi * c_in + c) * oh + py) * ow + px;
                    out[opos] = best;
                    arg[opos] = best_idx;
                }
            }
        }
    }
    (Tensor::new(vec![batch, c_in, oh, ow], out).expect("pool output shape"), arg)
}

/// (channel count, elements per channel position) for 2-d or 4-d activations.
fn bn_geometry(in_shape: &[usize], batch: usize) -> (usize, usize) {
    if in_shape.len() == 1 {
        (in_shape[0], batch)
    } else {
        (in_shape[0], batch * in_shape[1] * in_shape[2])
    }
}

/// Iterate (channel, flat index) pairs of a batched activation tensor.
fn bn_positions(in_shape: &[usize], batch: usize) -> impl Iterator<Item = (usize, usize)> {
    let per_sample: usize = in_shape.iter().product();
    let channels = in_shape[0];
    let spatial = per_sample / channels;
    (0..batch).flat_map(move |b| {
        (0..channels).flat_map(move |c| {
            (0..spatial).map(move |s| (c, (b * channels + c) * spatial + s))
        })
    })
}

#[allow(clippy::too_many_arguments)]
fn bn_eval_forward(
    x: &Tensor,
    in_shape: &[usize],
    batch: usize,
    scale: &Tensor,
    shift: &Tensor,
    rmean: &Tensor,
    rvar: &Tensor,
    eps: f64,
) -> Tensor {
    let mut out = x.clone();
    let od = out.data_mut();
    for (c, idx) in bn_positions(in_shape, batch) {
        let inv = 1.0 / (rvar.get(c) + eps).sqrt();
        od[idx] = scale.get(c) * (od[idx] - rmean.get(c)) * inv + shift.get(c);
    }
    out
}

fn bn_train_forward(
    x: &Tensor,
    in_shape: &[usize],
    batch: usize,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> (Tensor, BnBatchStats) {
    let (channels, count) = bn_geometry(in_shape, batch);
    let xd = x.data();
    let mut mean = vec![0.0; channels];
    for (c, idx) in bn_positions(in_shape, batch) {
        mean[c] += xd[idx];
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; channels];
    for (c, idx) in bn_positions(in_shape, batch) {
        let d = xd[idx] - mean[c];
        var[c] += d * d;
    }
    for v in &mut var {
        *v /= count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    let od = out.data_mut();
    for (c, idx) in bn_positions(in_shape, batch) {
        od[idx] = scale.get(c) * (od[idx] - mean[c]) * inv_std[c] + shift.get(c);
    }
    (out, BnBatchStats { mean, var, inv_std })
}

/// Reverse-mode gradients of ⟨output_grad, y⟩ through a recorded trace.
/// Returns gradients with respect to the masked parameters and the input.
pub fn backward(spec: &NetworkSpec, trace: &ForwardTrace, output_grad: &Tensor) -> Result<GradientSet> {
    if output_grad.shape() != trace.output().shape() {
        return Err(Error::structural(
            None,
            format!(
                "output grad shape {:?} vs network output {:?}",
                output_grad.shape(),
                trace.output().shape()
            ),
        ));
    }
    if spec.layers.len() != trace.outputs.len() {
        return Err(Error::structural(None, "trace does not match network spec"));
    }
    let batch = trace.input.shape()[0];
    let mut grads = GradientSet::zeros_like(&trace.masked, &trace.input);
    // Gradient w.r.t. each layer's output, accumulated as consumers run.
    let mut out_grads: Vec<Option<Tensor>> = vec![None; spec.layers.len()];
    out_grads[spec.layers.len() - 1] = Some(output_grad.clone());

    for idx in (0..spec.layers.len()).rev() {
        let g = match out_grads[idx].take() {
            Some(g) => g,
            None => continue, // layer output unused (can't happen in a chain)
        };
        let layer = &spec.layers[idx];
        let x = trace.input_of(idx);
        let input_grad: Tensor = match &layer.kind {
            LayerKind::Dense { out_dim } => {
                let (w, _) = weighted(&trace.masked, idx)?;
                let (dw, db, dx) = dense_backward(x, w, &g, batch, *out_dim);
                store_weighted(&mut grads, idx, dw, db)?;
                dx
            }
            LayerKind::Conv2d { out_channels, kernel, stride, padding } => {
                let (w, _) = weighted(&trace.masked, idx)?;
                let (dw, db, dx) = conv_backward(
                    x, w, &g, &layer.input_shape, batch, *out_channels, *kernel, *stride, *padding,
                );
                store_weighted(&mut grads, idx, dw, db)?;
                dx
            }
            LayerKind::MaxPool { .. } => {
                let arg = trace.pool_argmax[idx].as_ref().expect("pool trace recorded");
                let mut dx = Tensor::zeros_like(x);
                let dxd = dx.data_mut();
                for (opos, &ipos) in arg.iter().enumerate() {
                    dxd[ipos] += g.data()[opos];
                }
                dx
            }
            LayerKind::Relu => {
                let mut dx = g.clone();
                for (dv, &zv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if zv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                dx
            }
            LayerKind::BatchNorm => {
                let (scale, rmean, rvar) = match &trace.masked.layers[idx] {
                    LayerParams::BatchNorm { scale, running_mean, running_var, .. } => {
                        (scale, running_mean, running_var)
                    }
                    _ => return Err(Error::structural(idx, "batch-norm layer without parameters")),
                };
                match trace.mode {
                    Mode::Eval => bn_eval_backward(
                        x, &g, &layer.input_shape, batch, scale, rmean, rvar, trace.bn_eps, &mut grads, idx,
                    )?,
                    Mode::Train => {
                        let stats = trace.bn_stats[idx].as_ref().expect("bn stats recorded");
                        bn_train_backward(x, &g, &layer.input_shape, batch, scale, stats, &mut grads, idx)?
                    }
                }
            }
            LayerKind::Flatten => g.reshape(x.shape().to_vec())?,
            LayerKind::ResidualAdd { source } => {
                match source {
                    ResidualSource::Input => grads.input.add_assign(&g)?,
                    ResidualSource::Layer(s) => accumulate(&mut out_grads[*s], &g)?,
                }
                g.clone()
            }
        };
        if idx == 0 {
            grads.input.add_assign(&input_grad)?;
        } else {
            accumulate(&mut out_grads[idx - 1], &input_grad)?;
        }
    }
    Ok(grads)
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

fn store_weighted(grads: &mut GradientSet, idx: usize, dw: Tensor, db: Tensor) -> Result<()> {
    match &mut grads.layers[idx] {
        LayerGrads::Weighted { weight, bias } => {
            weight.add_assign(&dw)?;
            bias.add_assign(&db)?;
            Ok(())
        }
        _ => Err(Error::structural(idx, "gradient slot is not a weighted layer")),
    }
}

fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    batch: usize,
    out_dim: usize,
) -> (Tensor, Tensor, Tensor) {
    let in_dim = w.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    let mut dx = vec![0.0; batch * in_dim];
    // Batch-outer accumulation keeps the example reduction order fixed.
    for bi in 0..batch {
        let xs = &xd[bi * in_dim..(bi + 1) * in_dim];
        let gs = &gd[bi * out_dim..(bi + 1) * out_dim];
        for o in 0..out_dim {
            let go = gs[o];
            db[o] += go;
            let row = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                row[i] += go * xs[i];
            }
        }
        let dxs = &mut dx[bi * in_dim..(bi + 1) * in_dim];
        for o in 0..out_dim {
            let go = gs[o];
            let row = &wd[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxs[i] += go * row[i];
            }
        }
    }
    (
        Tensor::new(vec![out_dim, in_dim], dw).expect("dw shape"),
        Tensor::new(vec![out_dim], db).expect("db shape"),
        Tensor::new(vec![batch, in_dim], dx).expect("dx shape"),
    )
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    in_shape: &[usize],
    batch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, wdt) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (wdt + 2 * padding - kernel) / stride + 1;
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut dw = vec![0.0; out_ch * c_in * kernel * kernel];
    let mut db = vec![0.0; out_ch];
    let mut dx = vec![0.0; batch * c_in * h * wdt];
    for bi in 0..batch {
        let xb = &xd[bi * c_in * h * wdt..(bi + 1) * c_in * h * wdt];
        let dxb = &mut dx[bi * c_in * h * wdt..(bi + 1) * c_in * h * wdt];
        for o in 0..out_ch {
            for py in 0..oh {
                for px in 0..ow {
                    let go = gd[((bi * out_ch + o) * oh + py) * ow + px];
                    if go == 0.0 {
                        continue;
                    }
                    db[o] += go;
                    for c in 0..c_in {
                        for u in 0..kernel {
                            let iy = (py * stride + u) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..kernel {
                                let ix = (px * stride + v) as isize - padding as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                let widx = ((o * c_in + c) * kernel + u) * kernel + v;
                                let xidx = (c * h + iy as usize) * wdt + ix as usize;
                                dw[widx] += go * xb[xidx];
                                dxb[xidx] += go * wd[widx];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![out_ch, c_in, kernel, kernel], dw).expect("dw shape"),
        Tensor::new(vec![out_ch], db).expect("db shape"),
        Tensor::new(vec![batch, c_in, h, wdt], dx).expect("dx shape"),
    )
}

#[allow(clippy::too_many_arguments)]
fn bn_eval_backward(
    x: &Tensor,
    g: &Tensor,
    in_shape: &[usize],
    batch: usize,
    scale: &Tensor,
    rmean: &Tensor,
    rvar: &Tensor,
    eps: f64,
    grads: &mut GradientSet,
    idx: usize,
) -> Result<Tensor> {
    let channels = in_shape[0];
    let mut dscale = vec![0.0; channels];
    let mut dshift = vec![0.0; channels];
    let mut dx = Tensor::zeros_like(x);
    let xd = x.data();
    let gd = g.data();
    let dxd = dx.data_mut();
    for (c, i) in bn_positions(in_shape, batch) {
        let inv = 1.0 / (rvar.get(c) + eps).sqrt();
        let xhat = (xd[i] - rmean.get(c)) * inv;
        dscale[c] += gd[i] * xhat;
        dshift[c] += gd[i];
        dxd[i] = gd[i] * scale.get(c) * inv;
    }
    store_bn(grads, idx, dscale, dshift, channels)?;
    Ok(dx)
}

#[allow(clippy::too_many_arguments)]
fn bn_train_backward(
    x: &Tensor,
    g: &Tensor,
    in_shape: &[usize],
    batch: usize,
    scale: &Tensor,
    stats: &BnBatchStats,
    grads: &mut GradientSet,
    idx: usize,
) -> Result<Tensor> {
    let (channels, count) = bn_geometry(in_shape, batch);
    let n = count as f64;
    let xd = x.data();
    let gd = g.data();
    let mut dscale = vec![0.0; channels];
    let mut dshift = vec![0.0; channels];
    let mut sum_dxhat = vec![0.0; channels];
    let mut sum_dxhat_xhat = vec![0.0; channels];
    for (c, i) in bn_positions(in_shape, batch) {
        let xhat = (xd[i] - stats.mean[c]) * stats.inv_std[c];
        let dxhat = gd[i] * scale.get(c);
        dscale[c] += gd[i] * xhat;
        dshift[c] += gd[i];
        sum_dxhat[c] += dxhat;
        sum_dxhat_xhat[c] += dxhat * xhat;
    }
    let mut dx = Tensor::zeros_like(x);
    let dxd = dx.data_mut();
    for (c, i) in bn_positions(in_shape, batch) {
        let xhat = (xd[i] - stats.mean[c]) * stats.inv_std[c];
        let dxhat = gd[i] * scale.get(c);
        dxd[i] = stats.inv_std[c] / n * (n * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c]);
    }
    store_bn(grads, idx, dscale, dshift, channels)?;
    Ok(dx)
}

fn store_bn(
    grads: &mut GradientSet,
    idx: usize,
    dscale: Vec<f64>,
    dshift: Vec<f64>,
    channels: usize,
) -> Result<()> {
    match &mut grads.layers[idx] {
        LayerGrads::BatchNorm { scale, shift } => {
            scale.add_assign(&Tensor::new(vec![channels], dscale)?)?;
            shift.add_assign(&Tensor::new(vec![channels], dshift)?)?;
            Ok(())
        }
        _ => Err(Error::structural(idx, "gradient slot is not a batch-norm layer")),
    }
}

/// Mean loss over the batch and its gradient with respect to masked
/// parameters. Cross-entropy uses max-subtracted softmax.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    batch: &Batch,
    kind: LossKind,
    mode: Mode,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let classes = spec.output_dim();
    for &label in &batch.labels {
        if label >= classes {
            return Err(Error::domain(format!("label {label} out of range for {classes} classes")));
        }
    }
    let trace = forward(spec, params, mask, &batch.inputs, mode)?;
    let (loss, dy) = loss_gradient(trace.output(), &batch.labels, classes, kind)?;
    let grads = backward(spec, &trace, &dy)?;
    Ok((loss, grads))
}

/// Loss value and ∂L/∂y for a batch of logits.
pub fn loss_gradient(
    output: &Tensor,
    labels: &[usize],
    classes: usize,
    kind: LossKind,
) -> Result<(f64, Tensor)> {
    let b = labels.len();
    if output.shape() != [b, classes] {
        return Err(Error::structural(
            None,
            format!("output shape {:?} vs expected [{b}, {classes}]", output.shape()),
        ));
    }
    let yd = output.data();
    let mut dy = vec![0.0; b * classes];
    let mut loss = 0.0;
    match kind {
        LossKind::CrossEntropy => {
            for (bi, &label) in labels.iter().enumerate() {
                let row = &yd[bi * classes..(bi + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                loss += z.ln() - (row[label] - max);
                for c in 0..classes {
                    let p = exps[c] / z;
                    dy[bi * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / b as f64;
                }
            }
        }
        LossKind::Mse => {
            // Squared error against one-hot targets, halved.
            for (bi, &label) in labels.iter().enumerate() {
                for c in 0..classes {
                    let t = if c == label { 1.0 } else { 0.0 };
                    let d = yd[bi * classes + c] - t;
                    loss += 0.5 * d * d;
                    dy[bi * classes + c] = d / b as f64;
                }
            }
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, classes], dy)?))
}

/// Central-difference Hessian-vector product of a gradient function:
/// (∇f(θ+εv) − ∇f(θ−εv)) / 2ε with ε = δ / max(1, ‖v‖∞).
pub fn finite_diff_hvp(
    grad_fn: impl Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    v: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    if theta.len() != v.len() {
        return Err(Error::structural(None, "hvp direction length mismatch"));
    }
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let eps = delta / vmax.max(1.0);
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = grad_fn(&plus)?;
    let gm = grad_fn(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Step size used by the network-level HVP.
pub const HVP_DELTA: f64 = 1e-4;

/// H·v for the mean batch loss, by central differences of the gradient.
pub fn hvp(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    batch: &Batch,
    kind: LossKind,
    mode: Mode,
    v: &GradientSet,
) -> Result<GradientSet> {
    let theta = params.flatten_trainable();
    let direction = v.flatten();
    let grad_fn = |flat: &[f64]| -> Result<Vec<f64>> {
        let p = params.with_trainable(flat)?;
        let (_, g) = loss_and_grad(spec, &p, mask, batch, kind, mode)?;
        Ok(g.flatten())
    };
    let hv = finite_diff_hvp(grad_fn, &theta, &direction, HVP_DELTA)?;
    let out = GradientSet::from_flat(params, &spec.input_shape, &hv)?;
    for (idx, lg) in out.layers.iter().enumerate() {
        let finite = match lg {
            LayerGrads::None => true,
            LayerGrads::Weighted { weight, bias } => weight.all_finite() && bias.all_finite(),
            LayerGrads::BatchNorm { scale, shift } => scale.all_finite() && shift.all_finite(),
        };
        if !finite {
            return Err(Error::numeric(idx, "non-finite Hessian-vector product"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_network, LayerKind, Mask, NetworkSpec, ResidualSource};
    use crate::testsupport::{dense_hessian, finite_diff_grad, lcg_tensor, max_rel_err};

    fn set_weight(params: &mut ParamSet, layer: usize, data: Vec<f64>) {
        if let LayerParams::Weighted { weight, .. } = &mut params.layers[layer] {
            *weight = Tensor::new(weight.shape().to_vec(), data).unwrap();
        } else {
            panic!("layer {layer} is not weighted");
        }
    }

    /// FD-vs-backward check of ⟨1, y⟩ gradients over all trainable tensors.
    fn gradcheck(spec: &NetworkSpec, params: &ParamSet, input: &Tensor, mode: Mode, tol: f64) {
        let mask = Mask::full(spec);
        let trace = forward(spec, params, &mask, input, mode).unwrap();
        let ones = Tensor::ones(trace.output().shape().to_vec());
        let grads = backward(spec, &trace, &ones).unwrap();

        let theta = params.flatten_trainable();
        let fd = finite_diff_grad(
            |flat| {
                let p = params.with_trainable(flat).unwrap();
                forward(spec, &p, &mask, input, mode).unwrap().output().sum()
            },
            &theta,
            1e-5,
        );
        let err = max_rel_err(&grads.flatten(), &fd, 1e-3);
        assert!(err <= tol, "gradient mismatch: {err:.3e}");
    }

    #[test]
    fn identity_dense_forwards_input() {
        let spec = NetworkSpec::new(vec![2], vec![LayerKind::Dense { out_dim: 2 }]).unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let trace = forward(&spec, &params, &Mask::full(&spec), &x, Mode::Eval).unwrap();
        assert_eq!(trace.output().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative() {
        let spec = NetworkSpec::new(vec![2], vec![LayerKind::Relu]).unwrap();
        let params = build_network(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        let trace = forward(&spec, &params, &Mask::full(&spec), &x, Mode::Eval).unwrap();
        assert_eq!(trace.output().data(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_matches_hand_matmul() {
        // W1=[[1,2],[3,4]], W2=[[1,1]], x=[1,1]: oracle below is an
        // independent matrix product.
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 2 }, LayerKind::Dense { out_dim: 1 }],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![1.0, 2.0, 3.0, 4.0]);
        set_weight(&mut params, 1, vec![1.0, 1.0]);
        let x = vec![1.0, 1.0];

        // Oracle: plain nested-loop matrix-vector products.
        let w1 = [[1.0, 2.0], [3.0, 4.0]];
        let w2 = [[1.0, 1.0]];
        let mut h = [0.0; 2];
        for o in 0..2 {
            for i in 0..2 {
                h[o] += w1[o][i] * x[i];
            }
        }
        let mut y = 0.0;
        for i in 0..2 {
            y += w2[0][i] * h[i];
        }
        assert_eq!(y, 10.0);

        let input = Tensor::new(vec![1, 2], x).unwrap();
        let trace = forward(&spec, &params, &Mask::full(&spec), &input, Mode::Eval).unwrap();
        assert_eq!(trace.output().data(), &[y]);
    }

    #[test]
    fn linear_weight_gradient() {
        let spec = NetworkSpec::new(vec![1], vec![LayerKind::Dense { out_dim: 1 }]).unwrap();
        let params = build_network(&spec, 3).unwrap();
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let trace = forward(&spec, &params, &Mask::full(&spec), &x, Mode::Eval).unwrap();
        let grads = backward(&spec, &trace, &Tensor::ones(vec![1, 1])).unwrap();
        assert_eq!(grads.weight(0).unwrap().data(), &[3.0]);
        assert_eq!(grads.bias(0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn dead_relu_kills_gradients() {
        let spec = NetworkSpec::new(
            vec![1],
            vec![LayerKind::Dense { out_dim: 1 }, LayerKind::Relu],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![2.0]);
        let x = Tensor::new(vec![1, 1], vec![-1.0]).unwrap(); // w*x = -2 < 0
        let trace = forward(&spec, &params, &Mask::full(&spec), &x, Mode::Eval).unwrap();
        let grads = backward(&spec, &trace, &Tensor::ones(vec![1, 1])).unwrap();
        assert_eq!(grads.weight(0).unwrap().data(), &[0.0]);
        assert_eq!(grads.bias(0).unwrap().data(), &[0.0]);
    }

    #[test]
    fn gradcheck_three_layer_mlp() {
        let spec = NetworkSpec::new(
            vec![6],
            vec![
                LayerKind::Dense { out_dim: 8 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 5 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 21).unwrap();
        let input = lcg_tensor(vec![2, 6], 77, 0.9);
        gradcheck(&spec, &params, &input, Mode::Eval, 1e-6);
    }

    #[test]
    fn gradcheck_conv_net() {
        let spec = NetworkSpec::new(
            vec![2, 5, 5],
            vec![
                LayerKind::Conv2d { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::Conv2d { out_channels: 4, kernel: 3, stride: 2, padding: 0 },
                LayerKind::Relu,
                LayerKind::Flatten,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 5).unwrap();
        let input = lcg_tensor(vec![2, 2, 5, 5], 13, 0.8);
        gradcheck(&spec, &params, &input, Mode::Eval, 1e-6);
    }

    #[test]
    fn gradcheck_pool_net() {
        let spec = NetworkSpec::new(
            vec![1, 6, 6],
            vec![
                LayerKind::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                LayerKind::Flatten,
                LayerKind::Dense { out_dim: 4 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 9).unwrap();
        let input = lcg_tensor(vec![2, 1, 6, 6], 31, 0.7);
        gradcheck(&spec, &params, &input, Mode::Eval, 1e-6);
    }

    #[test]
    fn gradcheck_batchnorm_train_and_eval() {
        let spec = NetworkSpec::new(
            vec![5],
            vec![
                LayerKind::Dense { out_dim: 4 },
                LayerKind::BatchNorm,
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .unwrap();
        let mut params = build_network(&spec, 17).unwrap();
        let input = lcg_tensor(vec![4, 5], 55, 1.0);
        gradcheck(&spec, &params, &input, Mode::Train, 1e-6);

        // Eval with non-trivial running buffers.
        if let LayerParams::BatchNorm { running_mean, running_var, scale, shift } =
            &mut params.layers[1]
        {
            *running_mean = Tensor::new(vec![4], vec![0.1, -0.2, 0.05, 0.3]).unwrap();
            *running_var = Tensor::new(vec![4], vec![0.5, 1.5, 0.9, 2.0]).unwrap();
            *scale = Tensor::new(vec![4], vec![1.2, 0.8, -0.5, 1.0]).unwrap();
            *shift = Tensor::new(vec![4], vec![0.1, 0.0, -0.3, 0.2]).unwrap();
        }
        gradcheck(&spec, &params, &input, Mode::Eval, 1e-6);
    }

    /// Zero biases leave dead relu rows exactly on the next relu's kink,
    /// where central differences straddle the corner; nudge them off it.
    fn randomize_biases(params: &mut ParamSet, seed: u64) {
        for (i, lp) in params.layers.iter_mut().enumerate() {
            if let LayerParams::Weighted { bias, .. } = lp {
                *bias = lcg_tensor(bias.shape().to_vec(), seed + i as u64, 0.2);
            }
        }
    }

    #[test]
    fn gradcheck_residual_net() {
        let spec = NetworkSpec::new(
            vec![4],
            vec![
                LayerKind::Dense { out_dim: 4 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 4 },
                LayerKind::ResidualAdd { source: ResidualSource::Layer(1) },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 2 },
            ],
        )
        .unwrap();
        let mut params = build_network(&spec, 41).unwrap();
        randomize_biases(&mut params, 300);
        let input = lcg_tensor(vec![3, 4], 99, 0.8);
        gradcheck(&spec, &params, &input, Mode::Eval, 1e-6);

        let spec = NetworkSpec::new(
            vec![4],
            vec![
                LayerKind::Dense { out_dim: 4 },
                LayerKind::Relu,
                LayerKind::ResidualAdd { source: ResidualSource::Input },
                LayerKind::Dense { out_dim: 2 },
            ],
        )
        .unwrap();
        let mut params = build_network(&spec, 42).unwrap();
        randomize_biases(&mut params, 310);
        let input = lcg_tensor(vec![3, 4], 98, 0.8);
        gradcheck(&spec, &params, &input, Mode::Eval, 1e-6);
    }

    #[test]
    fn input_gradient_matches_fd() {
        let spec = NetworkSpec::new(
            vec![5],
            vec![LayerKind::Dense { out_dim: 4 }, LayerKind::Relu, LayerKind::Dense { out_dim: 3 }],
        )
        .unwrap();
        let params = build_network(&spec, 61).unwrap();
        let mask = Mask::full(&spec);
        let input = lcg_tensor(vec![2, 5], 7, 0.9);
        let trace = forward(&spec, &params, &mask, &input, Mode::Eval).unwrap();
        let grads = backward(&spec, &trace, &Tensor::ones(vec![2, 3])).unwrap();
        let fd = finite_diff_grad(
            |flat| {
                let x = Tensor::new(vec![2, 5], flat.to_vec()).unwrap();
                forward(&spec, &params, &mask, &x, Mode::Eval).unwrap().output().sum()
            },
            input.data(),
            1e-5,
        );
        assert!(max_rel_err(grads.input.data(), &fd, 1e-3) <= 1e-6);
    }

    #[test]
    fn pool_tie_routes_to_first_max() {
        let spec = NetworkSpec::new(
            vec![1, 2, 2],
            vec![LayerKind::MaxPool { kernel: 2, stride: 2 }],
        )
        .unwrap();
        let params = build_network(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let trace = forward(&spec, &params, &Mask::full(&spec), &x, Mode::Eval).unwrap();
        let grads = backward(&spec, &trace, &Tensor::ones(vec![1, 1, 1, 1])).unwrap();
        assert_eq!(grads.input.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let spec = NetworkSpec::new(vec![3], vec![LayerKind::Dense { out_dim: 4 }]).unwrap();
        let params = build_network(&spec, 1).unwrap();
        // All-zero mask zeroes the weights; biases are zero, so logits are
        // uniform.
        let mut mask = Mask::full(&spec);
        mask.weights[0] = Some(Tensor::zeros(vec![4, 3]));
        let batch = Batch { inputs: lcg_tensor(vec![5, 3], 3, 1.0), labels: vec![0, 1, 2, 3, 0] };
        let (loss, _) =
            loss_and_grad(&spec, &params, &mask, &batch, LossKind::CrossEntropy, Mode::Eval).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_perfect_fit_is_zero() {
        let spec = NetworkSpec::new(vec![3], vec![LayerKind::Dense { out_dim: 3 }]).unwrap();
        let mut params = build_network(&spec, 1).unwrap();
        set_weight(&mut params, 0, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        // One-hot inputs equal the one-hot targets through the identity map.
        let inputs = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = Batch { inputs, labels: vec![0, 2] };
        let (loss, grads) =
            loss_and_grad(&spec, &params, &Mask::full(&spec), &batch, LossKind::Mse, Mode::Eval)
                .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_gradients_match_fd() {
        let spec = NetworkSpec::new(
            vec![4],
            vec![LayerKind::Dense { out_dim: 5 }, LayerKind::Relu, LayerKind::Dense { out_dim: 3 }],
        )
        .unwrap();
        let params = build_network(&spec, 8).unwrap();
        let mask = Mask::full(&spec);
        let batch = Batch { inputs: lcg_tensor(vec![4, 4], 19, 1.0), labels: vec![0, 2, 1, 1] };
        for kind in [LossKind::CrossEntropy, LossKind::Mse] {
            let (_, grads) = loss_and_grad(&spec, &params, &mask, &batch, kind, Mode::Eval).unwrap();
            let theta = params.flatten_trainable();
            let fd = finite_diff_grad(
                |flat| {
                    let p = params.with_trainable(flat).unwrap();
                    loss_and_grad(&spec, &p, &mask, &batch, kind, Mode::Eval).unwrap().0
                },
                &theta,
                1e-5,
            );
            assert!(max_rel_err(&grads.flatten(), &fd, 1e-3) <= 1e-6);
        }
    }

    #[test]
    fn label_out_of_range_is_domain_error() {
        let spec = NetworkSpec::new(vec![2], vec![LayerKind::Dense { out_dim: 2 }]).unwrap();
        let params = build_network(&spec, 0).unwrap();
        let batch = Batch { inputs: lcg_tensor(vec![1, 2], 1, 1.0), labels: vec![2] };
        let err = loss_and_grad(&spec, &params, &Mask::full(&spec), &batch, LossKind::Mse, Mode::Eval)
            .unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn hvp_exact_on_quadratic() {
        // L = theta' diag(2,4) theta / 2: gradient [2a, 4b], Hv = [2, 4].
        let grad_fn = |t: &[f64]| Ok(vec![2.0 * t[0], 4.0 * t[1]]);
        let hv = finite_diff_hvp(grad_fn, &[1.0, 1.0], &[1.0, 1.0], 1e-4).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-10);
        assert!((hv[1] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn hvp_zero_direction_is_zero() {
        let grad_fn = |t: &[f64]| Ok(vec![t[0].sin(), t[1].cos()]);
        let hv = finite_diff_hvp(grad_fn, &[0.3, 0.7], &[0.0, 0.0], 1e-4).unwrap();
        assert_eq!(hv, vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_matches_dense_hessian_oracle() {
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 3 }, LayerKind::Relu, LayerKind::Dense { out_dim: 2 }],
        )
        .unwrap();
        let params = build_network(&spec, 29).unwrap();
        let mask = Mask::full(&spec);
        let batch = Batch { inputs: lcg_tensor(vec![3, 2], 23, 1.0), labels: vec![0, 1, 0] };
        assert!(params.flatten_trainable().len() <= 50);

        let (_, g) = loss_and_grad(&spec, &params, &mask, &batch, LossKind::Mse, Mode::Eval).unwrap();
        let hv = hvp(&spec, &params, &mask, &batch, LossKind::Mse, Mode::Eval, &g).unwrap();

        let theta = params.flatten_trainable();
        let h = dense_hessian(
            |flat| {
                let p = params.with_trainable(flat).unwrap();
                loss_and_grad(&spec, &p, &mask, &batch, LossKind::Mse, Mode::Eval).unwrap().1.flatten()
            },
            &theta,
            1e-5,
        );
        let v = g.flatten();
        let oracle: Vec<f64> =
            h.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let err = max_rel_err(&hv.flatten(), &oracle, 1e-3);
        assert!(err <= 1e-3, "hvp vs dense hessian: {err:.3e}");
    }

    #[test]
    fn one_layer_homogeneity_scales_output() {
        // Zero-bias ReLU net in eval mode: scaling one layer's weights by a
        // scales the output by a.
        let spec = NetworkSpec::new(
            vec![4],
            vec![
                LayerKind::Dense { out_dim: 5 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 12).unwrap();
        let mask = Mask::full(&spec);
        let input = lcg_tensor(vec![2, 4], 5, 1.0);
        let base = forward(&spec, &params, &mask, &input, Mode::Eval).unwrap();

        let alpha = 3.5;
        let mut scaled = params.clone();
        if let LayerParams::Weighted { weight, .. } = &mut scaled.layers[0] {
            *weight = weight.scale(alpha);
        }
        let out = forward(&spec, &scaled, &mask, &input, Mode::Eval).unwrap();
        for (a, b) in out.output().data().iter().zip(base.output().data()) {
            assert!((a - alpha * b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn traces_are_bit_identical() {
        let spec = NetworkSpec::new(
            vec![1, 4, 4],
            vec![
                LayerKind::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                LayerKind::Flatten,
                LayerKind::Dense { out_dim: 2 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 2).unwrap();
        let mask = Mask::full(&spec);
        let input = lcg_tensor(vec![2, 1, 4, 4], 44, 1.0);
        let a = forward(&spec, &params, &mask, &input, Mode::Eval).unwrap();
        let b = forward(&spec, &params, &mask, &input, Mode::Eval).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn overflow_reports_numeric_error_with_layer() {
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 2 }, LayerKind::Dense { out_dim: 2 }],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![1e200, 1e200, 1e200, 1e200]);
        set_weight(&mut params, 1, vec![1e200, 1e200, 1e200, 1e200]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let err = forward(&spec, &params, &Mask::full(&spec), &x, Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: Some(1), .. }));
    }

    #[test]
    fn input_shape_mismatch_is_structural() {
        let spec = NetworkSpec::new(vec![3], vec![LayerKind::Dense { out_dim: 2 }]).unwrap();
        let params = build_network(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let err = forward(&spec, &params, &Mask::full(&spec), &x, Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Structural { .. }));
    }
}
