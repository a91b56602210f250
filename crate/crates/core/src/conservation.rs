//! Numerical verifiers for the synaptic-saliency conservation laws.
//!
//! Two identities hold exactly (up to rounding) on networks whose
//! nonlinearities are homogeneous: per hidden unit, the summed saliency of
//! incoming parameters equals that of outgoing parameters; and per
//! layer-aligned cut, the summed saliency of the cut weights plus all
//! downstream biases equals ⟨∂R/∂y, y⟩. Both are checked against a 1e-8
//! relative tolerance since the only error source is 64-bit rounding.

use crate::autodiff::{forward_with_eps, loss_and_grad, Batch, GradientSet, LossKind, Mode};
use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, LayerParams, Mask, NetworkSpec, ParamSet, ResidualSource};
use crate::scoring::{eval_objective, eval_objective_with_eps, Objective, ObjectiveEval, ScoreMap};
use crate::tensor::rel_residual;

/// Relative tolerance for the algebraic identities.
pub const CONSERVATION_TOL: f64 = 1e-8;

/// One hidden unit's incoming/outgoing saliency totals.
#[derive(Debug, Clone)]
pub struct UnitRecord {
    /// Parameterized layer whose output defines the unit.
    pub layer: usize,
    /// Neuron index (dense) or channel index (conv).
    pub unit: usize,
    pub s_in: f64,
    pub s_out: f64,
    pub residual: f64,
    /// True when a parameter-free residual edge taps or merges into the
    /// unit's path, so its flow is not captured by parameters alone.
    pub excluded: bool,
}

/// One layer-aligned cut: the layer's weight saliency plus all downstream
/// bias saliency.
#[derive(Debug, Clone)]
pub struct CutRecord {
    pub layer: usize,
    pub cut_total: f64,
    /// False when a residual edge bypasses this layer, in which case the
    /// layer's parameters do not separate input from output.
    pub separating: bool,
    pub residual_vs_output: f64,
}

/// Per-layer score statistics for the size law.
#[derive(Debug, Clone)]
pub struct LayerStat {
    pub layer: usize,
    pub size: usize,
    pub total: f64,
    pub average: f64,
    pub inv_size: f64,
}

/// Conservation diagnostics for one (network, objective) pair.
#[derive(Debug, Clone)]
pub struct ConservationReport {
    pub units: Vec<UnitRecord>,
    pub cuts: Vec<CutRecord>,
    /// ⟨∂R/∂y, y⟩.
    pub output_flow: f64,
    /// ⟨∂R/∂x, x⟩.
    pub input_flow: f64,
    /// Σ over all layers of ⟨∂R/∂b, b⟩.
    pub total_bias_saliency: f64,
    /// Largest residual over non-excluded units.
    pub max_unit_residual: f64,
    /// Largest residual over separating cuts, including the input-side
    /// identity input_flow + total_bias_saliency = output_flow.
    pub max_cut_residual: f64,
}

impl ConservationReport {
    pub fn unit_pass(&self) -> bool {
        self.max_unit_residual <= CONSERVATION_TOL
    }

    pub fn cut_pass(&self) -> bool {
        self.max_cut_residual <= CONSERVATION_TOL
    }
}

fn require_homogeneous(spec: &NetworkSpec) -> Result<()> {
    if let Some(idx) = spec.first_batchnorm_layer() {
        return Err(Error::unsupported(format!(
            "conservation checks need homogeneous activations; layer {idx} is batch-norm"
        )));
    }
    Ok(())
}

/// Where a unit's activation is consumed.
enum Consumer {
    /// Dense layer; unit u owns flat input columns [u*block, (u+1)*block).
    DenseBlock { layer: usize, block: usize },
    /// Conv layer; unit u is input channel u.
    ConvChannel { layer: usize },
    /// No parameterized consumer captures the unit's flow: either the walk
    /// reached the network output, or a residual edge taps/merges the path.
    None,
}

/// Follow a parameterized layer's output through parameter-free layers to
/// the next parameterized consumer.
fn walk_downstream(spec: &NetworkSpec, from: usize) -> Consumer {
    let edges = spec.residual_edges();
    let mut block = 1usize;
    let mut saw_flatten = false;
    for j in from + 1..spec.layers.len() {
        // A residual tap of any activation between `from` and the consumer
        // means parameters alone no longer capture the unit's flow.
        if edges.iter().any(|&(src, _)| src == ResidualSource::Layer(j - 1) && j - 1 >= from) {
            return Consumer::None;
        }
        match &spec.layers[j].kind {
            LayerKind::Dense { .. } => {
                return Consumer::DenseBlock { layer: j, block: if saw_flatten { block } else { 1 } }
            }
            LayerKind::Conv2d { .. } => return Consumer::ConvChannel { layer: j },
            LayerKind::Relu | LayerKind::MaxPool { .. } => {}
            LayerKind::Flatten => {
                let shape = &spec.layers[j].input_shape;
                block = shape[1] * shape[2];
                saw_flatten = true;
            }
            LayerKind::ResidualAdd { .. } => return Consumer::None,
            LayerKind::BatchNorm => unreachable!("homogeneity checked"),
        }
    }
    Consumer::None
}

/// Sum of g ⊙ w over one unit's incoming parameters (weight row plus bias).
fn unit_in_saliency(params: &ParamSet, grads: &GradientSet, layer: usize, unit: usize) -> f64 {
    let w = params.weight(layer).expect("weighted layer");
    let g = grads.weight(layer).expect("weighted layer grads");
    let per_unit = w.len() / w.shape()[0];
    let mut acc = 0.0;
    for i in unit * per_unit..(unit + 1) * per_unit {
        acc += g.get(i) * w.get(i);
    }
    let b = params.bias(layer).expect("weighted layer bias");
    let gb = grads.bias(layer).expect("weighted layer bias grads");
    acc + gb.get(unit) * b.get(unit)
}

fn unit_out_saliency(
    params: &ParamSet,
    grads: &GradientSet,
    consumer: &Consumer,
    unit: usize,
) -> Option<f64> {
    match consumer {
        Consumer::DenseBlock { layer, block } => {
            let w = params.weight(*layer).expect("dense consumer");
            let g = grads.weight(*layer).expect("dense consumer grads");
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut acc = 0.0;
            for r in 0..rows {
                for c in unit * block..(unit + 1) * block {
                    acc += g.get(r * cols + c) * w.get(r * cols + c);
                }
            }
            Some(acc)
        }
        Consumer::ConvChannel { layer } => {
            let w = params.weight(*layer).expect("conv consumer");
            let g = grads.weight(*layer).expect("conv consumer grads");
            let (out_ch, in_ch, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let kk = k * k;
            let mut acc = 0.0;
            for o in 0..out_ch {
                let base = (o * in_ch + unit) * kk;
                for i in base..base + kk {
                    acc += g.get(i) * w.get(i);
                }
            }
            Some(acc)
        }
        Consumer::None => None,
    }
}

fn bias_saliency(params: &ParamSet, grads: &GradientSet, layer: usize) -> f64 {
    match (params.bias(layer), grads.bias(layer)) {
        (Some(b), Some(gb)) => b.dot(gb).expect("congruent bias tensors"),
        _ => 0.0,
    }
}

fn build_report(spec: &NetworkSpec, eval: &ObjectiveEval) -> ConservationReport {
    let params = &eval.trace.masked;
    let grads = &eval.grads;
    let prunable = spec.prunable_layers();

    // Per hidden unit: every parameterized layer except the last one.
    let mut units = Vec::new();
    for (pos, &layer) in prunable.iter().enumerate() {
        if pos + 1 == prunable.len() {
            break; // output neurons are not hidden units
        }
        let consumer = walk_downstream(spec, layer);
        let n_units = params.weight(layer).expect("weighted layer").shape()[0];
        for unit in 0..n_units {
            let s_in = unit_in_saliency(params, grads, layer, unit);
            match unit_out_saliency(params, grads, &consumer, unit) {
                Some(s_out) => units.push(UnitRecord {
                    layer,
                    unit,
                    s_in,
                    s_out,
                    residual: rel_residual(s_in, s_out),
                    excluded: false,
                }),
                None => units.push(UnitRecord {
                    layer,
                    unit,
                    s_in,
                    s_out: f64::NAN,
                    residual: f64::NAN,
                    excluded: true,
                }),
            }
        }
    }

    let output_flow = eval.output_grad.dot(eval.trace.output()).expect("output shapes match");
    let input_flow = grads.input.dot(&eval.trace.input).expect("input shapes match");
    let total_bias_saliency: f64 = prunable.iter().map(|&l| bias_saliency(params, grads, l)).sum();

    // Layer-aligned cuts: weights of layer l plus every downstream bias.
    let edges = spec.residual_edges();
    let mut cuts = Vec::new();
    for &layer in &prunable {
        let w = params.weight(layer).expect("weighted layer");
        let g = grads.weight(layer).expect("weighted layer grads");
        let weight_total = w.dot(g).expect("congruent tensors");
        let downstream_bias: f64 =
            prunable.iter().filter(|&&i| i >= layer).map(|&i| bias_saliency(params, grads, i)).sum();
        let cut_total = weight_total + downstream_bias;
        let separating = !edges.iter().any(|&(src, add_at)| {
            let src_pos = match src {
                ResidualSource::Input => -1isize,
                ResidualSource::Layer(s) => s as isize,
            };
            src_pos < layer as isize && layer < add_at
        });
        cuts.push(CutRecord {
            layer,
            cut_total,
            separating,
            residual_vs_output: rel_residual(cut_total, output_flow),
        });
    }

    let max_unit_residual = units
        .iter()
        .filter(|u| !u.excluded)
        .map(|u| u.residual)
        .fold(0.0, f64::max);
    let input_side = rel_residual(input_flow + total_bias_saliency, output_flow);
    let max_cut_residual = cuts
        .iter()
        .filter(|c| c.separating)
        .map(|c| c.residual_vs_output)
        .fold(input_side, f64::max);

    ConservationReport {
        units,
        cuts,
        output_flow,
        input_flow,
        total_bias_saliency,
        max_unit_residual,
        max_cut_residual,
    }
}

/// Per-hidden-unit conservation check (incoming vs outgoing saliency).
pub fn check_neuron_conservation(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    objective: &Objective,
) -> Result<ConservationReport> {
    require_homogeneous(spec)?;
    let eval = eval_objective(spec, params, mask, objective)?;
    Ok(build_report(spec, &eval))
}

/// Layer-aligned cut conservation check (cut totals vs ⟨∂R/∂y, y⟩ and the
/// input-side identity).
pub fn check_network_conservation(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    objective: &Objective,
) -> Result<ConservationReport> {
    // Same evaluation; both views live in the report.
    check_neuron_conservation(spec, params, mask, objective)
}

/// Per-layer (average score, 1/size) pairs for any score map.
pub fn layer_score_size_law(spec: &NetworkSpec, scores: &ScoreMap) -> Vec<LayerStat> {
    spec.prunable_layers()
        .into_iter()
        .map(|layer| {
            let size = spec.layers[layer].weight_count();
            let total = scores.layer_total(layer);
            LayerStat {
                layer,
                size,
                total,
                average: total / size as f64,
                inv_size: 1.0 / size as f64,
            }
        })
        .collect()
}

/// Squared Frobenius norms per prunable layer over plain gradient-descent
/// training of a bias-free dense network.
#[derive(Debug, Clone)]
pub struct FlowConservationTrace {
    /// Prunable layer indices the series refer to.
    pub layers: Vec<usize>,
    /// sq_norms[t][i] = ‖W_{layers[i]}‖²_F after t recorded steps.
    pub sq_norms: Vec<Vec<f64>>,
    pub lr: f64,
    pub steps: usize,
}

impl FlowConservationTrace {
    /// Largest drift over layer pairs of (‖W_l‖² − ‖W_k‖²) from its initial
    /// value.
    pub fn max_pairwise_drift(&self) -> f64 {
        let n = self.layers.len();
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in a + 1..n {
                let d0 = self.sq_norms[0][a] - self.sq_norms[0][b];
                for row in &self.sq_norms {
                    worst = worst.max(((row[a] - row[b]) - d0).abs());
                }
            }
        }
        worst
    }
}

/// Train a bias-free dense network with plain full-batch gradient descent,
/// recording per-layer squared weight norms each step. Pairwise norm
/// differences drift O(lr) per unit time under the gradient-flow law.
pub fn gradient_flow_conservation(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    loss: LossKind,
    steps: usize,
    lr: f64,
) -> Result<FlowConservationTrace> {
    require_homogeneous(spec)?;
    for (idx, layer) in spec.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Dense { .. } | LayerKind::Relu | LayerKind::Flatten => {}
            _ => {
                return Err(Error::unsupported(format!(
                    "gradient-flow check needs a dense chain; layer {idx} is {}",
                    layer.kind.name()
                )))
            }
        }
    }
    for (idx, lp) in params.layers.iter().enumerate() {
        if let LayerParams::Weighted { bias, .. } = lp {
            if bias.data().iter().any(|&b| b != 0.0) {
                return Err(Error::unsupported(format!(
                    "gradient-flow check needs a bias-free network; layer {idx} has nonzero bias"
                )));
            }
        }
    }

    let prunable = spec.prunable_layers();
    let mask = Mask::full(spec);
    let mut current = params.clone();
    let record = |p: &ParamSet| -> Vec<f64> {
        prunable.iter().map(|&l| p.weight(l).expect("dense layer").frob_sq()).collect()
    };
    let mut sq_norms = vec![record(&current)];

    for step in 0..steps {
        let (loss_value, grads) = loss_and_grad(spec, &current, &mask, batch, loss, Mode::Eval)?;
        if !loss_value.is_finite() {
            return Err(Error::numeric(None, format!("training diverged at step {step}")));
        }
        for &l in &prunable {
            let gw = grads.weight(l).expect("dense layer grads").clone();
            if let LayerParams::Weighted { weight, .. } = &mut current.layers[l] {
                let wd = weight.data_mut();
                for (w, g) in wd.iter_mut().zip(gw.data()) {
                    *w -= lr * g;
                }
            }
            // Biases stay frozen at zero: the network is bias-free.
        }
        sq_norms.push(record(&current));
    }

    Ok(FlowConservationTrace { layers: prunable, sq_norms, lr, steps })
}

/// Per batch-norm channel residual of the zero-sum saliency law.
#[derive(Debug, Clone)]
pub struct BnNeuronResidual {
    /// The batch-norm layer.
    pub bn_layer: usize,
    /// The upstream parameterized layer providing the incoming parameters.
    pub source_layer: usize,
    pub channel: usize,
    /// ⟨∂R/∂θ_in, θ_in⟩ for the channel.
    pub saliency_sum: f64,
    /// Σ|∂R/∂θ_in ⊙ θ_in| — the scale of the individual terms.
    pub term_scale: f64,
}

impl BnNeuronResidual {
    /// |sum| ≤ tol × scale of individual terms (trivially true when the
    /// terms themselves vanish).
    pub fn passes(&self, tol: f64) -> bool {
        self.saliency_sum.abs() <= tol * self.term_scale.max(1e-30)
    }
}

/// Train-mode saliency sums into batch-norm channels. Exact only with the
/// normalization epsilon at zero, so the forward runs with eps = 0 and a
/// zero-variance batch surfaces as a numeric error.
pub fn bn_saliency_zero(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    batch: &Batch,
    loss: LossKind,
) -> Result<Vec<BnNeuronResidual>> {
    // Map each batch-norm layer to its nearest upstream parameterized layer;
    // relu/pool between them preserve both channels and the scaling
    // invariance the law rests on.
    let mut pairs = Vec::new();
    for (idx, layer) in spec.layers.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::BatchNorm) {
            continue;
        }
        let mut src = None;
        for j in (0..idx).rev() {
            match &spec.layers[j].kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    src = Some(j);
                    break;
                }
                LayerKind::Relu | LayerKind::MaxPool { .. } => {}
                other => {
                    return Err(Error::unsupported(format!(
                        "batch-norm at layer {idx} is separated from its source by {}",
                        other.name()
                    )))
                }
            }
        }
        let src = src.ok_or_else(|| {
            Error::unsupported(format!("batch-norm at layer {idx} has no upstream parameters"))
        })?;
        pairs.push((idx, src));
    }
    if pairs.is_empty() {
        return Err(Error::unsupported("network has no batch-norm layers"));
    }

    let objective = Objective::Loss { batch: batch.clone(), kind: loss, mode: Mode::Train };
    let eval = eval_objective_with_eps(spec, params, mask, &objective, 0.0)?;
    let masked = &eval.trace.masked;

    let mut out = Vec::new();
    for (bn_layer, source_layer) in pairs {
        let w = masked.weight(source_layer).expect("weighted source");
        let g = eval.grads.weight(source_layer).expect("weighted source grads");
        let b = masked.bias(source_layer).expect("weighted source bias");
        let gb = eval.grads.bias(source_layer).expect("weighted source bias grads");
        let units = w.shape()[0];
        let per_unit = w.len() / units;
        for c in 0..units {
            let mut sum = 0.0;
            let mut scale = 0.0;
            for i in c * per_unit..(c + 1) * per_unit {
                let term = g.get(i) * w.get(i);
                sum += term;
                scale += term.abs();
            }
            let bias_term = gb.get(c) * b.get(c);
            sum += bias_term;
            scale += bias_term.abs();
            out.push(BnNeuronResidual { bn_layer, source_layer, channel: c, saliency_sum: sum, term_scale: scale });
        }
    }
    Ok(out)
}

/// Train-mode output invariance under scaling of a batch-norm channel's
/// incoming parameters (the identity behind the zero-sum law). Exposed for
/// the verification suite.
pub fn bn_scaling_invariance_residual(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    batch: &Batch,
    source_layer: usize,
    channel: usize,
    alpha: f64,
) -> Result<f64> {
    let base = forward_with_eps(spec, params, mask, &batch.inputs, Mode::Train, 0.0)?;
    let mut scaled = params.clone();
    if let LayerParams::Weighted { weight, bias } = &mut scaled.layers[source_layer] {
        let units = weight.shape()[0];
        let per_unit = weight.len() / units;
        let wd = weight.data_mut();
        for i in channel * per_unit..(channel + 1) * per_unit {
            wd[i] *= alpha;
        }
        let bd = bias.data_mut();
        bd[channel] *= alpha;
    }
    let after = forward_with_eps(spec, &scaled, mask, &batch.inputs, Mode::Train, 0.0)?;
    let mut worst = 0.0f64;
    for (a, b) in base.output().data().iter().zip(after.output().data()) {
        worst = worst.max(rel_residual(*a, *b));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::build_network;
    use crate::tensor::Tensor;
    use crate::testsupport::lcg_tensor;

    fn set_weight(params: &mut ParamSet, layer: usize, data: Vec<f64>) {
        if let LayerParams::Weighted { weight, .. } = &mut params.layers[layer] {
            *weight = Tensor::new(weight.shape().to_vec(), data).unwrap();
        }
    }

    fn sum_objective(input: Tensor) -> Objective {
        Objective::OutputSum { input, mode: Mode::Eval }
    }

    #[test]
    fn single_hidden_unit_chain() {
        // w_in=2, w_out=3, x=1, R=y: S_in = S_out = 6.
        let spec = NetworkSpec::new(
            vec![1],
            vec![
                LayerKind::Dense { out_dim: 1 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 1 },
            ],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![2.0]);
        set_weight(&mut params, 2, vec![3.0]);
        let obj = sum_objective(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let report =
            check_neuron_conservation(&spec, &params, &Mask::full(&spec), &obj).unwrap();
        assert_eq!(report.units.len(), 1);
        assert_eq!(report.units[0].s_in, 6.0);
        assert_eq!(report.units[0].s_out, 6.0);
        assert!(report.unit_pass());
    }

    #[test]
    fn dead_unit_conserves_trivially() {
        let spec = NetworkSpec::new(
            vec![1],
            vec![
                LayerKind::Dense { out_dim: 1 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 1 },
            ],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![2.0]);
        set_weight(&mut params, 2, vec![3.0]);
        let obj = sum_objective(Tensor::new(vec![1, 1], vec![-1.0]).unwrap());
        let report =
            check_neuron_conservation(&spec, &params, &Mask::full(&spec), &obj).unwrap();
        assert_eq!(report.units[0].s_in, 0.0);
        assert_eq!(report.units[0].s_out, 0.0);
    }

    #[test]
    fn conv_pool_dense_units_conserve_under_synflow() {
        let spec = NetworkSpec::new(
            vec![1, 6, 6],
            vec![
                LayerKind::Conv2d { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                LayerKind::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::Flatten,
                LayerKind::Dense { out_dim: 5 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 7).unwrap();
        let report = check_neuron_conservation(
            &spec,
            &params,
            &Mask::full(&spec),
            &Objective::SynFlow { mode: Mode::Eval },
        )
        .unwrap();
        // Hidden units: 3 conv channels + 4 conv channels.
        assert_eq!(report.units.len(), 7);
        assert!(report.units.iter().all(|u| !u.excluded));
        assert!(report.unit_pass(), "max residual {}", report.max_unit_residual);
    }

    #[test]
    fn residual_tap_units_are_excluded() {
        let spec = NetworkSpec::new(
            vec![4],
            vec![
                LayerKind::Dense { out_dim: 4 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 4 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 4 },
                LayerKind::ResidualAdd { source: ResidualSource::Layer(1) },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 2 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 19).unwrap();
        let obj = sum_objective(lcg_tensor(vec![2, 4], 3, 0.9));
        let report =
            check_neuron_conservation(&spec, &params, &Mask::full(&spec), &obj).unwrap();
        // Layer 0 feeds the skip, layer 4 merges at the add: both excluded.
        // Layer 2's units sit strictly inside the block and must conserve.
        for u in &report.units {
            match u.layer {
                0 | 4 => assert!(u.excluded, "layer {} unit {}", u.layer, u.unit),
                2 => {
                    assert!(!u.excluded);
                    assert!(u.residual <= CONSERVATION_TOL, "residual {}", u.residual);
                }
                other => panic!("unexpected unit layer {other}"),
            }
        }
        assert!(report.unit_pass());
    }

    #[test]
    fn hand_example_cut_totals() {
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 2 }, LayerKind::Dense { out_dim: 1 }],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![1.0, 2.0, 3.0, 4.0]);
        set_weight(&mut params, 1, vec![1.0, 1.0]);
        let report = check_network_conservation(
            &spec,
            &params,
            &Mask::full(&spec),
            &Objective::SynFlow { mode: Mode::Eval },
        )
        .unwrap();
        assert_eq!(report.output_flow, 10.0);
        for cut in &report.cuts {
            assert!(cut.separating);
            assert_eq!(cut.cut_total, 10.0);
        }
        assert!(report.cut_pass());
    }

    #[test]
    fn zero_bias_net_input_flow_equals_output_flow() {
        let spec = NetworkSpec::new(
            vec![5],
            vec![
                LayerKind::Dense { out_dim: 6 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 23).unwrap();
        let obj = sum_objective(lcg_tensor(vec![3, 5], 17, 1.0));
        let report =
            check_network_conservation(&spec, &params, &Mask::full(&spec), &obj).unwrap();
        assert!(rel_residual(report.input_flow, report.output_flow) <= CONSERVATION_TOL);
    }

    #[test]
    fn five_layer_mlp_with_biases_cuts_agree() {
        let spec = NetworkSpec::new(
            vec![4],
            vec![
                LayerKind::Dense { out_dim: 6 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 6 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 5 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 5 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .unwrap();
        let mut params = build_network(&spec, 37).unwrap();
        // Give every bias a nonzero value so the downstream-bias terms in the
        // cut identity actually matter.
        for lp in &mut params.layers {
            if let LayerParams::Weighted { bias, .. } = lp {
                let n = bias.len();
                *bias = lcg_tensor(vec![n], n as u64 + 101, 0.3);
            }
        }
        let obj = sum_objective(lcg_tensor(vec![2, 4], 29, 1.0));
        let report =
            check_network_conservation(&spec, &params, &Mask::full(&spec), &obj).unwrap();
        assert_eq!(report.cuts.len(), 5);
        for cut in &report.cuts {
            assert!(
                cut.residual_vs_output <= CONSERVATION_TOL,
                "cut at layer {}: residual {}",
                cut.layer,
                cut.residual_vs_output
            );
        }
        // Input-side identity includes every bias term.
        assert!(report.cut_pass(), "max cut residual {}", report.max_cut_residual);
        assert!(report.total_bias_saliency != 0.0);
    }

    #[test]
    fn batchnorm_is_rejected_by_name() {
        let spec = NetworkSpec::new(
            vec![3],
            vec![LayerKind::Dense { out_dim: 3 }, LayerKind::BatchNorm, LayerKind::Dense { out_dim: 2 }],
        )
        .unwrap();
        let params = build_network(&spec, 0).unwrap();
        let obj = sum_objective(lcg_tensor(vec![1, 3], 1, 1.0));
        let err = check_neuron_conservation(&spec, &params, &Mask::full(&spec), &obj).unwrap_err();
        match err {
            Error::Unsupported { message } => assert!(message.contains("layer 1")),
            other => panic!("expected unsupported, got {other:?}"),
        }
    }

    #[test]
    fn size_law_on_hand_example() {
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 2 }, LayerKind::Dense { out_dim: 1 }],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![1.0, 2.0, 3.0, 4.0]);
        set_weight(&mut params, 1, vec![1.0, 1.0]);
        let scores = crate::scoring::score_synflow(&spec, &params, &Mask::full(&spec))
            .unwrap()
            .map;
        let stats = layer_score_size_law(&spec, &scores);
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].average, 2.5);
        assert_eq!(stats[1].average, 5.0);
        // avg x size identical across layers.
        assert_eq!(stats[0].average * stats[0].size as f64, stats[1].average * stats[1].size as f64);
    }

    #[test]
    fn size_law_single_layer_trivial() {
        let spec = NetworkSpec::new(vec![3], vec![LayerKind::Dense { out_dim: 2 }]).unwrap();
        let params = build_network(&spec, 4).unwrap();
        let scores = crate::scoring::score_magnitude(&spec, &params, &Mask::full(&spec))
            .unwrap()
            .map;
        let stats = layer_score_size_law(&spec, &scores);
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].size, 6);
    }

    #[test]
    fn scalar_chain_saliency_identity() {
        // y = w2 w1 x: w1 dL/dw1 = w2 dL/dw2 exactly, for any loss.
        let spec = NetworkSpec::new(
            vec![1],
            vec![LayerKind::Dense { out_dim: 1 }, LayerKind::Dense { out_dim: 1 }],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        set_weight(&mut params, 0, vec![0.8]);
        set_weight(&mut params, 1, vec![-1.3]);
        let batch = Batch { inputs: lcg_tensor(vec![4, 1], 9, 2.0), labels: vec![0, 0, 0, 0] };
        let (_, grads) = loss_and_grad(
            &spec,
            &params,
            &Mask::full(&spec),
            &batch,
            LossKind::Mse,
            Mode::Eval,
        )
        .unwrap();
        let s1 = grads.weight(0).unwrap().get(0) * 0.8;
        let s2 = grads.weight(1).unwrap().get(0) * -1.3;
        assert!(rel_residual(s1, s2) <= 1e-12, "{s1} vs {s2}");
    }

    #[test]
    fn zero_lr_freezes_norms() {
        let spec = NetworkSpec::new(
            vec![3],
            vec![LayerKind::Dense { out_dim: 4 }, LayerKind::Relu, LayerKind::Dense { out_dim: 2 }],
        )
        .unwrap();
        let params = build_network(&spec, 6).unwrap();
        let batch = Batch { inputs: lcg_tensor(vec![6, 3], 2, 1.0), labels: vec![0, 1, 0, 1, 0, 1] };
        let trace =
            gradient_flow_conservation(&spec, &params, &batch, LossKind::Mse, 20, 0.0).unwrap();
        for row in &trace.sq_norms {
            assert_eq!(row, &trace.sq_norms[0]);
        }
        assert_eq!(trace.max_pairwise_drift(), 0.0);
    }

    #[test]
    fn drift_scales_linearly_with_lr() {
        // Linear 2-layer net trained to convergence inside the window: the
        // accumulated drift of the norm difference is first-order in lr.
        let spec = NetworkSpec::new(
            vec![4],
            vec![LayerKind::Dense { out_dim: 6 }, LayerKind::Dense { out_dim: 3 }],
        )
        .unwrap();
        let params = build_network(&spec, 15).unwrap();
        let batch = Batch {
            inputs: lcg_tensor(vec![12, 4], 12, 1.0),
            labels: vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2],
        };
        let drift = |lr: f64| {
            gradient_flow_conservation(&spec, &params, &batch, LossKind::Mse, 1000, lr)
                .unwrap()
                .max_pairwise_drift()
        };
        let d1 = drift(1e-3);
        let d2 = drift(5e-4);
        assert!(d1 > 0.0);
        let ratio = d1 / d2;
        assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "halving lr gave drift ratio {ratio}");
    }

    #[test]
    fn gradient_flow_rejects_biased_or_conv_nets() {
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 2 }],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        if let LayerParams::Weighted { bias, .. } = &mut params.layers[0] {
            *bias = Tensor::new(vec![2], vec![0.1, 0.0]).unwrap();
        }
        let batch = Batch { inputs: lcg_tensor(vec![2, 2], 1, 1.0), labels: vec![0, 1] };
        assert!(matches!(
            gradient_flow_conservation(&spec, &params, &batch, LossKind::Mse, 1, 0.1),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn bn_saliency_sums_vanish_in_train_mode() {
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
        let params = build_network(&spec, 33).unwrap();
        let batch = Batch { inputs: lcg_tensor(vec![6, 5], 27, 1.0), labels: vec![0, 1, 2, 0, 1, 2] };
        let residuals =
            bn_saliency_zero(&spec, &params, &Mask::full(&spec), &batch, LossKind::CrossEntropy)
                .unwrap();
        assert_eq!(residuals.len(), 4);
        for r in &residuals {
            assert!(r.term_scale > 0.0);
            assert!(
                r.passes(CONSERVATION_TOL),
                "channel {} sum {} scale {}",
                r.channel,
                r.saliency_sum,
                r.term_scale
            );
        }
    }

    #[test]
    fn bn_eval_mode_sums_do_not_vanish() {
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
        let params = build_network(&spec, 33).unwrap();
        let mask = Mask::full(&spec);
        let batch = Batch { inputs: lcg_tensor(vec![6, 5], 27, 1.0), labels: vec![0, 1, 2, 0, 1, 2] };
        // Unit buffers make eval-mode batch-norm an identity-like affine map,
        // so the incoming saliency sums behave like an ordinary layer.
        let objective =
            Objective::Loss { batch: batch.clone(), kind: LossKind::CrossEntropy, mode: Mode::Eval };
        let eval = eval_objective(&spec, &params, &mask, &objective).unwrap();
        let w = eval.trace.masked.weight(0).unwrap();
        let g = eval.grads.weight(0).unwrap();
        let mut any_nonzero = false;
        for c in 0..4 {
            let mut sum = 0.0;
            let mut scale = 0.0;
            for i in c * 5..(c + 1) * 5 {
                sum += g.get(i) * w.get(i);
                scale += (g.get(i) * w.get(i)).abs();
            }
            if sum.abs() > 1e-4 * scale.max(1e-30) {
                any_nonzero = true;
            }
        }
        assert!(any_nonzero, "eval-mode saliency sums should not vanish");
    }

    #[test]
    fn bn_scaling_invariance_in_train_mode() {
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
        let params = build_network(&spec, 33).unwrap();
        let batch = Batch { inputs: lcg_tensor(vec![6, 5], 27, 1.0), labels: vec![0, 1, 2, 0, 1, 2] };
        let worst = bn_scaling_invariance_residual(
            &spec,
            &params,
            &Mask::full(&spec),
            &batch,
            0,
            2,
            3.7,
        )
        .unwrap();
        assert!(worst <= 1e-12, "train-mode output moved by {worst}");
    }

    #[test]
    fn bn_zero_variance_is_numeric_error() {
        let spec = NetworkSpec::new(
            vec![3],
            vec![LayerKind::Dense { out_dim: 2 }, LayerKind::BatchNorm, LayerKind::Dense { out_dim: 2 }],
        )
        .unwrap();
        let params = build_network(&spec, 0).unwrap();
        // Identical rows give zero batch variance.
        let inputs = Tensor::new(vec![2, 3], vec![0.5, 0.2, 0.1, 0.5, 0.2, 0.1]).unwrap();
        let batch = Batch { inputs, labels: vec![0, 1] };
        let err = bn_saliency_zero(&spec, &params, &Mask::full(&spec), &batch, LossKind::Mse)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
