//! Per-parameter pruning scores: generic synaptic saliency plus the five
//! concrete metrics (random, magnitude, SNIP, GraSP, SynFlow) and a
//! closed-form synaptic-flow computation used as an independent oracle.
//!
//! Scores are only defined at unmasked positions; already-pruned entries are
//! recorded as absent and never ranked.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::StandardNormal;

use crate::autodiff::{
    backward, finite_diff_hvp, forward, forward_with_eps, loss_gradient, Batch, ForwardTrace,
    GradientSet, LossKind, Mode, BN_EPS, HVP_DELTA,
};
use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, LayerParams, Mask, NetworkSpec, ParamSet};
use crate::tensor::Tensor;

/// Scores for one prunable layer: values congruent with the weight tensor,
/// plus the activity mask telling which entries exist.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLayer {
    pub values: Tensor,
    pub active: Tensor,
}

/// Per-parameter scores over all prunable layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub layers: Vec<Option<ScoreLayer>>,
}

impl ScoreMap {
    /// Iterate (layer index, flat element index, score) over active entries.
    pub fn iter_active(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.layers.iter().enumerate().flat_map(|(layer, sl)| {
            sl.iter().flat_map(move |sl| {
                sl.active
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a != 0.0)
                    .map(move |(idx, _)| (layer, idx, sl.values.get(idx)))
            })
        })
    }

    pub fn active_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|sl| sl.active.data().iter().filter(|&&a| a != 0.0).count())
            .sum()
    }

    /// Sum of active scores in one layer.
    pub fn layer_total(&self, layer: usize) -> f64 {
        match &self.layers[layer] {
            Some(sl) => sl
                .active
                .data()
                .iter()
                .zip(sl.values.data())
                .filter(|(&a, _)| a != 0.0)
                .map(|(_, &v)| v)
                .sum(),
            None => 0.0,
        }
    }

    pub fn get(&self, layer: usize, idx: usize) -> Option<f64> {
        self.layers[layer]
            .as_ref()
            .filter(|sl| sl.active.get(idx) != 0.0)
            .map(|sl| sl.values.get(idx))
    }

    pub fn all_finite(&self) -> bool {
        self.iter_active().all(|(_, _, s)| s.is_finite())
    }
}

/// Which scoring metric to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Random,
    Magnitude,
    Snip,
    Grasp,
    SynFlow,
}

impl ScorerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScorerKind::Random => "random",
            ScorerKind::Magnitude => "magnitude",
            ScorerKind::Snip => "snip",
            ScorerKind::Grasp => "grasp",
            ScorerKind::SynFlow => "synflow",
        }
    }

    /// SNIP and GraSP need data; the others must not receive any.
    pub fn is_data_dependent(&self) -> bool {
        matches!(self, ScorerKind::Snip | ScorerKind::Grasp)
    }
}

/// Everything a scorer invocation depends on.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    pub kind: ScorerKind,
    /// Scoring examples for SNIP/GraSP; must be None for data-free scorers.
    pub batch: Option<Batch>,
    pub loss: Option<LossKind>,
    /// Batch-norm mode while scoring. SNIP/GraSP score in train mode;
    /// SynFlow must score in eval mode.
    pub mode: Mode,
    /// Seed for the random scorer.
    pub seed: u64,
    /// Gradient accumulation sub-batch size for SNIP/GraSP.
    pub sub_batch: usize,
}

impl ScoringContext {
    pub fn data_free(kind: ScorerKind, seed: u64) -> Self {
        ScoringContext { kind, batch: None, loss: None, mode: Mode::Eval, seed, sub_batch: 0 }
    }

    pub fn with_data(kind: ScorerKind, batch: Batch, loss: LossKind, sub_batch: usize) -> Self {
        ScoringContext {
            kind,
            batch: Some(batch),
            loss: Some(loss),
            mode: Mode::Train,
            seed: 0,
            sub_batch: sub_batch.max(1),
        }
    }
}

/// A score map plus the number of per-example forward/backward passes the
/// scorer actually ran.
#[derive(Debug, Clone)]
pub struct Scored {
    pub map: ScoreMap,
    pub example_passes: u64,
}

/// A scalar objective R of the network output.
#[derive(Debug, Clone)]
pub enum Objective {
    /// R = ⟨1, y(x)⟩ for a fixed input.
    OutputSum { input: Tensor, mode: Mode },
    /// The synaptic-flow objective: all-ones input through |θ|.
    SynFlow { mode: Mode },
    /// R = mean training loss over a batch.
    Loss { batch: Batch, kind: LossKind, mode: Mode },
}

/// The pieces needed to form saliencies: the differentiated parameters, the
/// trace, the gradients, R itself and ∂R/∂y.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub trace: ForwardTrace,
    pub grads: GradientSet,
    pub value: f64,
    pub output_grad: Tensor,
}

/// Evaluate an objective and its reverse-mode gradients.
pub fn eval_objective(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    objective: &Objective,
) -> Result<ObjectiveEval> {
    eval_objective_with_eps(spec, params, mask, objective, BN_EPS)
}

/// As [`eval_objective`] with an explicit batch-norm epsilon (the batch-norm
/// saliency law is exact only at eps = 0).
pub fn eval_objective_with_eps(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    objective: &Objective,
    bn_eps: f64,
) -> Result<ObjectiveEval> {
    match objective {
        Objective::OutputSum { input, mode } => {
            let trace = forward_with_eps(spec, params, mask, input, *mode, bn_eps)?;
            let og = Tensor::ones(trace.output().shape().to_vec());
            let grads = backward(spec, &trace, &og)?;
            let value = trace.output().sum();
            Ok(ObjectiveEval { trace, grads, value, output_grad: og })
        }
        Objective::SynFlow { mode } => {
            let abs = params.abs();
            let mut shape = vec![1usize];
            shape.extend_from_slice(&spec.input_shape);
            let input = Tensor::ones(shape);
            let trace = forward_with_eps(spec, &abs, mask, &input, *mode, bn_eps)?;
            let og = Tensor::ones(trace.output().shape().to_vec());
            let grads = backward(spec, &trace, &og)?;
            let value = trace.output().sum();
            Ok(ObjectiveEval { trace, grads, value, output_grad: og })
        }
        Objective::Loss { batch, kind, mode } => {
            if batch.is_empty() {
                return Err(Error::domain("empty batch"));
            }
            let trace = forward_with_eps(spec, params, mask, &batch.inputs, *mode, bn_eps)?;
            let (value, og) = loss_gradient(trace.output(), &batch.labels, spec.output_dim(), *kind)?;
            let grads = backward(spec, &trace, &og)?;
            Ok(ObjectiveEval { trace, grads, value, output_grad: og })
        }
    }
}

/// Build a score map S = g ⊙ θ_eff over active weight positions. θ_eff is
/// whatever the objective differentiated (masked θ, or |θ| for synflow).
fn saliency_from(
    spec: &NetworkSpec,
    effective: &ParamSet,
    grads: &GradientSet,
    mask: &Mask,
) -> Result<ScoreMap> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (idx, layer) in spec.layers.iter().enumerate() {
        if !layer.kind.has_prunable_weights() {
            layers.push(None);
            continue;
        }
        let w = effective.weight(idx).ok_or_else(|| Error::structural(idx, "missing weights"))?;
        let g = grads.weight(idx).ok_or_else(|| Error::structural(idx, "missing weight grads"))?;
        let mu = mask.layer(idx).ok_or_else(|| Error::structural(idx, "missing mask"))?;
        let values = g.hadamard(w)?;
        if values
            .data()
            .iter()
            .zip(mu.data())
            .any(|(v, &a)| a != 0.0 && !v.is_finite())
        {
            return Err(Error::numeric(idx, "non-finite saliency score"));
        }
        layers.push(Some(ScoreLayer { values, active: mu.clone() }));
    }
    Ok(ScoreMap { layers })
}

/// Synaptic saliency S = ∂R/∂θ ⊙ θ on the masked parameters.
pub fn saliency(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    objective: &Objective,
) -> Result<ScoreMap> {
    let eval = eval_objective(spec, params, mask, objective)?;
    saliency_from(spec, &eval.trace.masked, &eval.grads, mask)
}

/// I.i.d. standard-normal scores at unmasked positions; deterministic per seed.
pub fn score_random(spec: &NetworkSpec, mask: &Mask, seed: u64) -> Result<Scored> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (idx, layer) in spec.layers.iter().enumerate() {
        if !layer.kind.has_prunable_weights() {
            layers.push(None);
            continue;
        }
        let mu = mask.layer(idx).ok_or_else(|| Error::structural(idx, "missing mask"))?;
        let mut values = Tensor::zeros_like(mu);
        for (i, &a) in mu.data().iter().enumerate() {
            if a != 0.0 {
                values.set(i, rng.sample(StandardNormal));
            }
        }
        layers.push(Some(ScoreLayer { values, active: mu.clone() }));
    }
    Ok(Scored { map: ScoreMap { layers }, example_passes: 0 })
}

/// S = |θ| at unmasked positions.
pub fn score_magnitude(spec: &NetworkSpec, params: &ParamSet, mask: &Mask) -> Result<Scored> {
    let masked = crate::netgraph::apply_mask(params, mask)?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (idx, layer) in spec.layers.iter().enumerate() {
        if !layer.kind.has_prunable_weights() {
            layers.push(None);
            continue;
        }
        let w = masked.weight(idx).ok_or_else(|| Error::structural(idx, "missing weights"))?;
        let mu = mask.layer(idx).ok_or_else(|| Error::structural(idx, "missing mask"))?;
        layers.push(Some(ScoreLayer { values: w.abs(), active: mu.clone() }));
    }
    Ok(Scored { map: ScoreMap { layers }, example_passes: 0 })
}

/// Example-sum gradient accumulated over sub-batches. Splitting the batch
/// differently changes only floating-point grouping, not the math.
fn accumulate_gradient(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    batch: &Batch,
    kind: LossKind,
    mode: Mode,
    sub_batch: usize,
) -> Result<(GradientSet, u64)> {
    if batch.is_empty() {
        return Err(Error::domain("empty scoring batch"));
    }
    let n = batch.len();
    let chunk = sub_batch.max(1).min(n);
    let per_sample: usize = spec.input_shape.iter().product();
    let mut total: Option<GradientSet> = None;
    let mut passes = 0u64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows = end - start;
        let inputs = Tensor::new(
            {
                let mut s = vec![rows];
                s.extend_from_slice(&spec.input_shape);
                s
            },
            batch.inputs.data()[start * per_sample..end * per_sample].to_vec(),
        )?;
        let sub = Batch { inputs, labels: batch.labels[start..end].to_vec() };
        let trace = forward(spec, params, mask, &sub.inputs, mode)?;
        let (_, og) = loss_gradient(trace.output(), &sub.labels, spec.output_dim(), kind)?;
        // Per-example sums: undo the mean reduction before accumulating.
        let og = og.scale(rows as f64);
        let mut grads = backward(spec, &trace, &og)?;
        // Input gradients are per-example and cannot aggregate across
        // sub-batches of different sizes; scoring only needs the parameter
        // gradients.
        let mut canonical = vec![1usize];
        canonical.extend_from_slice(&spec.input_shape);
        grads.input = Tensor::zeros(canonical);
        passes += rows as u64;
        match &mut total {
            Some(t) => t.add_assign(&grads)?,
            None => total = Some(grads),
        }
        start = end;
    }
    Ok((total.expect("non-empty batch"), passes))
}

/// SNIP: S = |g ⊙ θ| with g accumulated over sub-batches in train mode.
pub fn score_snip(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    batch: &Batch,
    kind: LossKind,
    mode: Mode,
    sub_batch: usize,
) -> Result<Scored> {
    let (g, passes) = accumulate_gradient(spec, params, mask, batch, kind, mode, sub_batch)?;
    let masked = crate::netgraph::apply_mask(params, mask)?;
    let map = saliency_from(spec, &masked, &g, mask)?;
    let map = ScoreMap {
        layers: map
            .layers
            .into_iter()
            .map(|sl| sl.map(|sl| ScoreLayer { values: sl.values.abs(), active: sl.active }))
            .collect(),
    };
    Ok(Scored { map, example_passes: passes })
}

/// GraSP: S = −(Hg) ⊙ θ with g the accumulated gradient and H applied by
/// central finite differences. Scores keep their sign; global masking
/// removes the lowest.
pub fn score_grasp(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    batch: &Batch,
    kind: LossKind,
    mode: Mode,
    sub_batch: usize,
) -> Result<Scored> {
    let (g, mut passes) = accumulate_gradient(spec, params, mask, batch, kind, mode, sub_batch)?;
    let theta = params.flatten_trainable();
    let direction = g.flatten();
    let pass_cell = std::cell::Cell::new(0u64);
    let grad_fn = |flat: &[f64]| -> Result<Vec<f64>> {
        let p = params.with_trainable(flat)?;
        let (acc, n) = accumulate_gradient(spec, &p, mask, batch, kind, mode, sub_batch)?;
        pass_cell.set(pass_cell.get() + n);
        Ok(acc.flatten())
    };
    let hg = finite_diff_hvp(grad_fn, &theta, &direction, HVP_DELTA)?;
    passes += pass_cell.get();
    let hg = GradientSet::from_flat(params, &spec.input_shape, &hg)?;
    let masked = crate::netgraph::apply_mask(params, mask)?;
    let map = saliency_from(spec, &masked, &hg, mask)?;
    let map = ScoreMap {
        layers: map
            .layers
            .into_iter()
            .map(|sl| sl.map(|sl| ScoreLayer { values: sl.values.scale(-1.0), active: sl.active }))
            .collect(),
    };
    Ok(Scored { map, example_passes: passes })
}

/// SynFlow: one all-ones example through |θ| in eval mode; S = ∂R/∂|θ| ⊙ |θ|.
/// Non-finite objectives trigger per-layer rescaling by 1/max|θ| before
/// scoring, which leaves the score ordering unchanged on chain networks.
pub fn score_synflow(spec: &NetworkSpec, params: &ParamSet, mask: &Mask) -> Result<Scored> {
    score_synflow_in_mode(spec, params, mask, Mode::Eval)
}

/// SynFlow scoring with an explicit batch-norm mode. Train mode is only
/// useful as a diagnostic: batch statistics zero the scores.
pub fn score_synflow_in_mode(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    mode: Mode,
) -> Result<Scored> {
    let objective = Objective::SynFlow { mode };
    match eval_objective(spec, params, mask, &objective) {
        Ok(eval) => {
            let map = saliency_from(spec, &eval.trace.masked, &eval.grads, mask)?;
            Ok(Scored { map, example_passes: 1 })
        }
        Err(Error::Numeric { .. }) => {
            // Per-layer rescaling keeps the objective finite without
            // disturbing the within-network ordering.
            let scaled = rescale_per_layer(spec, params, mask)?;
            let eval = eval_objective(spec, &scaled, mask, &objective).map_err(|e| match e {
                Error::Numeric { layer, .. } => Error::Numeric {
                    layer,
                    message: "synaptic-flow objective is non-finite even after per-layer rescaling; \
                              rescale the parameters"
                        .to_string(),
                },
                other => other,
            })?;
            let map = saliency_from(spec, &eval.trace.masked, &eval.grads, mask)?;
            Ok(Scored { map, example_passes: 1 })
        }
        Err(other) => Err(other),
    }
}

fn rescale_per_layer(spec: &NetworkSpec, params: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    let masked = crate::netgraph::apply_mask(params, mask)?;
    let mut out = params.clone();
    for idx in spec.prunable_layers() {
        let max = masked.weight(idx).map(|w| w.max_abs()).unwrap_or(0.0);
        if max > 0.0 && max.is_finite() {
            if let LayerParams::Weighted { weight, .. } = &mut out.layers[idx] {
                *weight = weight.scale(1.0 / max);
            }
        }
    }
    Ok(out)
}

/// Closed-form synaptic-flow scores for fully-connected bias-free networks:
/// S(w_ij) = [1ᵀ ∏_{k>l} |W_k|]_i · |w_ij| · [∏_{k<l} |W_k| 1]_j.
/// Serves as the independent oracle for [`score_synflow`].
pub fn synflow_closed_form(spec: &NetworkSpec, params: &ParamSet, mask: &Mask) -> Result<ScoreMap> {
    // Dense layers interleaved with relu/flatten only, and all biases zero.
    let mut dense = Vec::new();
    for (idx, layer) in spec.layers.iter().enumerate() {
        match &layer.kind {
            LayerKind::Dense { .. } => dense.push(idx),
            LayerKind::Relu | LayerKind::Flatten => {}
            other => {
                return Err(Error::unsupported(format!(
                    "closed-form synaptic flow requires a dense chain, found {} at layer {idx}",
                    other.name()
                )))
            }
        }
    }
    for &idx in &dense {
        if let Some(bias) = params.bias(idx) {
            if bias.data().iter().any(|&b| b != 0.0) {
                return Err(Error::unsupported("closed-form synaptic flow requires zero biases"));
            }
        }
    }
    let masked = crate::netgraph::apply_mask(params, mask)?;
    let mats: Vec<Tensor> = dense
        .iter()
        .map(|&idx| masked.weight(idx).expect("dense layer has weights").abs())
        .collect();

    // left[l][j] = (∏_{k<l} A_k · 1)_j ; right[l][i] = (1ᵀ ∏_{k>l} A_k)_i.
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(mats.len());
    let mut cur = vec![1.0; mats[0].shape()[1]];
    for m in &mats {
        left.push(cur.clone());
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let mut next = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                next[r] += m.get(r * cols + c) * cur[c];
            }
        }
        cur = next;
    }
    let mut right: Vec<Vec<f64>> = vec![Vec::new(); mats.len()];
    let mut cur = vec![1.0; mats.last().expect("non-empty chain").shape()[0]];
    for (l, m) in mats.iter().enumerate().rev() {
        right[l] = cur.clone();
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let mut prev = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                prev[c] += m.get(r * cols + c) * cur[r];
            }
        }
        cur = prev;
    }

    let mut layers = vec![None; spec.layers.len()];
    for (l, &idx) in dense.iter().enumerate() {
        let m = &mats[l];
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let mut values = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            for c in 0..cols {
                values.set(r * cols + c, right[l][r] * m.get(r * cols + c) * left[l][c]);
            }
        }
        let mu = mask.layer(idx).ok_or_else(|| Error::structural(idx, "missing mask"))?;
        layers[idx] = Some(ScoreLayer { values, active: mu.clone() });
    }
    Ok(ScoreMap { layers })
}

/// Dispatch a scorer through its context, enforcing the data contract.
pub fn score(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    ctx: &ScoringContext,
) -> Result<Scored> {
    if ctx.kind.is_data_dependent() {
        let batch = ctx
            .batch
            .as_ref()
            .ok_or_else(|| Error::domain(format!("{} scoring requires a data batch", ctx.kind.name())))?;
        let loss = ctx
            .loss
            .ok_or_else(|| Error::domain(format!("{} scoring requires a loss kind", ctx.kind.name())))?;
        match ctx.kind {
            ScorerKind::Snip => score_snip(spec, params, mask, batch, loss, ctx.mode, ctx.sub_batch),
            ScorerKind::Grasp => score_grasp(spec, params, mask, batch, loss, ctx.mode, ctx.sub_batch),
            _ => unreachable!(),
        }
    } else {
        if ctx.batch.is_some() {
            return Err(Error::domain(format!(
                "{} scoring is data-agnostic and rejects a batch",
                ctx.kind.name()
            )));
        }
        match ctx.kind {
            ScorerKind::Random => score_random(spec, mask, ctx.seed),
            ScorerKind::Magnitude => score_magnitude(spec, params, mask),
            ScorerKind::SynFlow => score_synflow_in_mode(spec, params, mask, ctx.mode),
            _ => unreachable!(),
        }
    }
}
