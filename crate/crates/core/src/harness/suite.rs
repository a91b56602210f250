//! The built-in verification battery: named toy architectures plus the
//! conservation / oracle / gradient checks the `verify` subcommand runs.
//! Each check prints as one pass/fail line and the whole battery gates the
//! process exit code.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    backward, forward, hvp, loss_and_grad, Batch, LossKind, Mode,
};
use crate::conservation::{
    bn_saliency_zero, check_neuron_conservation, layer_score_size_law, ConservationReport,
    CONSERVATION_TOL,
};
use crate::error::Result;
use crate::netgraph::{
    build_network, LayerKind, LayerParams, Mask, NetworkSpec, ParamSet, ResidualSource,
};
use crate::scoring::{
    saliency, score_synflow, score_synflow_in_mode, synflow_closed_form, Objective,
};
use crate::tensor::Tensor;

/// A named architecture with parameters ready for checking.
pub struct NamedNet {
    pub name: &'static str,
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

fn lcg(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
            (2.0 * u - 1.0) * scale
        })
        .collect();
    Tensor::new(shape, data).expect("lcg shape")
}

/// The five homogeneous architectures the conservation criteria run on:
/// dense, dense with nonzero biases, conv, conv+pool, residual.
pub fn conservation_architectures(seed: u64) -> Vec<NamedNet> {
    let dense_spec = NetworkSpec::new(
        vec![8],
        vec![
            LayerKind::Dense { out_dim: 16 },
            LayerKind::Relu,
            LayerKind::Dense { out_dim: 12 },
            LayerKind::Relu,
            LayerKind::Dense { out_dim: 5 },
        ],
    )
    .expect("dense arch");
    let dense = NamedNet {
        name: "dense",
        params: build_network(&dense_spec, seed).expect("init"),
        spec: dense_spec.clone(),
    };

    // Same topology with every bias made nonzero, so the bias terms in the
    // identities are exercised for real.
    let mut bias_params = build_network(&dense_spec, seed ^ 0xB1A5).expect("init");
    for (i, lp) in bias_params.layers.iter_mut().enumerate() {
        if let LayerParams::Weighted { bias, .. } = lp {
            *bias = lcg(bias.shape().to_vec(), seed + 7 + i as u64, 0.3);
        }
    }
    let dense_bias = NamedNet { name: "dense_bias", spec: dense_spec, params: bias_params };

    let conv_spec = NetworkSpec::new(
        vec![2, 8, 8],
        vec![
            LayerKind::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::Conv2d { out_channels: 6, kernel: 3, stride: 2, padding: 1 },
            LayerKind::Relu,
            LayerKind::Flatten,
            LayerKind::Dense { out_dim: 5 },
        ],
    )
    .expect("conv arch");
    let conv = NamedNet {
        name: "conv",
        params: build_network(&conv_spec, seed + 1).expect("init"),
        spec: conv_spec,
    };

    let pool_spec = NetworkSpec::new(
        vec![1, 8, 8],
        vec![
            LayerKind::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Flatten,
            LayerKind::Dense { out_dim: 5 },
        ],
    )
    .expect("conv+pool arch");
    let conv_pool = NamedNet {
        name: "conv_pool",
        params: build_network(&pool_spec, seed + 2).expect("init"),
        spec: pool_spec,
    };

    let residual_spec = NetworkSpec::new(
        vec![6],
        vec![
            LayerKind::Dense { out_dim: 6 },
            LayerKind::Relu,
            LayerKind::Dense { out_dim: 6 },
            LayerKind::Relu,
            LayerKind::Dense { out_dim: 6 },
            LayerKind::ResidualAdd { source: ResidualSource::Layer(1) },
            LayerKind::Relu,
            LayerKind::Dense { out_dim: 4 },
        ],
    )
    .expect("residual arch");
    let residual = NamedNet {
        name: "residual",
        params: build_network(&residual_spec, seed + 3).expect("init"),
        spec: residual_spec,
    };

    vec![dense, dense_bias, conv, conv_pool, residual]
}

/// Objectives every conservation criterion is checked under.
pub fn conservation_objectives(spec: &NetworkSpec, seed: u64) -> Vec<(&'static str, Objective)> {
    let mut shape = vec![2usize];
    shape.extend_from_slice(&spec.input_shape);
    vec![
        ("output_sum", Objective::OutputSum { input: lcg(shape, seed + 17, 0.9), mode: Mode::Eval }),
        ("synflow", Objective::SynFlow { mode: Mode::Eval }),
    ]
}

/// Whether the parameters carry any nonzero bias (changes the input-side
/// conservation identity).
pub fn has_nonzero_bias(params: &ParamSet) -> bool {
    params.layers.iter().any(|lp| match lp {
        LayerParams::Weighted { bias, .. } => bias.data().iter().any(|&b| b != 0.0),
        _ => false,
    })
}

/// True when no relu input sits within `margin` of its kink and no pool
/// window is decided by less than `margin`. Finite-difference oracles are
/// only trustworthy on such inputs; the conservation identities themselves
/// hold at kinks regardless.
pub fn kink_safe(spec: &NetworkSpec, trace: &crate::autodiff::ForwardTrace, margin: f64) -> bool {
    let batch = trace.input.shape()[0];
    for (idx, layer) in spec.layers.iter().enumerate() {
        let x = if idx == 0 { &trace.input } else { &trace.outputs[idx - 1] };
        match &layer.kind {
            LayerKind::Relu => {
                if x.data().iter().any(|v| v.abs() < margin) {
                    return false;
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                let (c_in, h, w) = (
                    layer.input_shape[0],
                    layer.input_shape[1],
                    layer.input_shape[2],
                );
                let oh = (h - kernel) / stride + 1;
                let ow = (w - kernel) / stride + 1;
                let xd = x.data();
                for bi in 0..batch {
                    for c in 0..c_in {
                        let base = (bi * c_in + c) * h * w;
                        for py in 0..oh {
                            for px in 0..ow {
                                let mut top = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for u in 0..*kernel {
                                    for v in 0..*kernel {
                                        let val = xd[base + (py * stride + u) * w + (px * stride + v)];
                                        if val > top {
                                            second = top;
                                            top = val;
                                        } else if val > second {
                                            second = val;
                                        }
                                    }
                                }
                                if kernel * kernel > 1 && top - second < margin {
                                    return false;
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    true
}

/// Deterministically search for an input batch whose trace stays clear of
/// relu kinks and pool ties.
pub fn kink_safe_input(
    spec: &NetworkSpec,
    params: &ParamSet,
    mask: &Mask,
    base_seed: u64,
    scale: f64,
) -> Result<Tensor> {
    let mut shape = vec![2usize];
    shape.extend_from_slice(&spec.input_shape);
    let mut last = lcg(shape.clone(), base_seed, scale);
    for attempt in 0..200u64 {
        let input = lcg(shape.clone(), base_seed.wrapping_add(attempt * 7919), scale);
        let trace = forward(spec, params, mask, &input, Mode::Eval)?;
        if kink_safe(spec, &trace, 1e-4) {
            return Ok(input);
        }
        last = input;
    }
    Ok(last)
}

/// One verifier outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub items: Vec<VerifyItem>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.items.push(VerifyItem { name: name.into(), passed, detail: detail.into() });
    }
}

fn unit_check(report: &ConservationReport) -> (bool, String) {
    let checked = report.units.iter().filter(|u| !u.excluded).count();
    let excluded = report.units.len() - checked;
    (
        report.unit_pass() && checked > 0,
        format!(
            "max residual {:.2e} over {checked} units ({excluded} residual-adjacent excluded)",
            report.max_unit_residual
        ),
    )
}

fn cut_check(report: &ConservationReport) -> (bool, String) {
    let separating = report.cuts.iter().filter(|c| c.separating).count();
    (
        report.cut_pass() && separating > 0,
        format!("max residual {:.2e} over {separating} separating cuts", report.max_cut_residual),
    )
}

/// Run the full verification battery. Deterministic per seed.
pub fn run_verifiers(seed: u64) -> Result<VerifyReport> {
    let mut out = VerifyReport::default();

    // Neuron-wise and cut conservation across architectures and objectives.
    for net in conservation_architectures(seed) {
        let mask = Mask::full(&net.spec);
        for (obj_name, objective) in conservation_objectives(&net.spec, seed) {
            let report = check_neuron_conservation(&net.spec, &net.params, &mask, &objective)?;
            let (ok, detail) = unit_check(&report);
            out.push(format!("neuron_conservation/{}/{}", net.name, obj_name), ok, detail);
            let (ok, detail) = cut_check(&report);
            out.push(format!("cut_conservation/{}/{}", net.name, obj_name), ok, detail);
        }
    }

    // Closed-form synaptic flow as an independent oracle, 20 random dense
    // bias-free nets of 2..=5 layers.
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let depth = 2 + (i % 4) as usize;
        let mut dims = Vec::new();
        let mut width = 4 + (i % 3) as usize;
        for _ in 0..depth {
            dims.push(width);
            width = 3 + ((width + i as usize) % 4);
        }
        let mut kinds = Vec::new();
        for (j, &d) in dims.iter().enumerate() {
            kinds.push(LayerKind::Dense { out_dim: d });
            if j + 1 < dims.len() {
                kinds.push(LayerKind::Relu);
            }
        }
        let spec = NetworkSpec::new(vec![5], kinds).expect("oracle net");
        let params = build_network(&spec, seed + 100 + i)?;
        let mask = Mask::full(&spec);
        let flow = score_synflow(&spec, &params, &mask)?;
        let closed = synflow_closed_form(&spec, &params, &mask)?;
        for (layer, idx, s) in flow.map.iter_active() {
            let c = closed.get(layer, idx).expect("closed form covers active entries");
            worst = worst.max((s - c).abs() / s.abs().max(c.abs()).max(1e-30));
        }
    }
    out.push(
        "synflow_closed_form_oracle",
        worst <= 1e-10,
        format!("max relative error {worst:.2e} over 20 nets"),
    );

    // Exact inverse size law for saliency scores on a dense net.
    {
        let spec = NetworkSpec::new(
            vec![10],
            vec![
                LayerKind::Dense { out_dim: 10 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 40 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 4 },
            ],
        )
        .expect("size-law net");
        let params = build_network(&spec, seed + 400)?;
        let mask = Mask::full(&spec);
        let mut shape = vec![2usize];
        shape.extend_from_slice(&spec.input_shape);
        let objective =
            Objective::OutputSum { input: lcg(shape, seed + 401, 1.0), mode: Mode::Eval };
        let scores = saliency(&spec, &params, &mask, &objective)?;
        let stats = layer_score_size_law(&spec, &scores);
        let products: Vec<f64> = stats.iter().map(|s| s.average * s.size as f64).collect();
        let mut worst = 0.0f64;
        for w in products.windows(2) {
            worst = worst.max((w[0] - w[1]).abs() / w[0].abs().max(w[1].abs()).max(1e-30));
        }
        out.push(
            "inverse_size_score_law",
            worst <= CONSERVATION_TOL,
            format!("avg x size constant to {worst:.2e} across {} layers", stats.len()),
        );
    }

    // Batch-norm: train-mode saliency sums vanish; synflow needs eval mode.
    {
        let spec = NetworkSpec::new(
            vec![6],
            vec![
                LayerKind::Dense { out_dim: 8 },
                LayerKind::BatchNorm,
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .expect("bn net");
        let params = build_network(&spec, seed + 500)?;
        let mask = Mask::full(&spec);
        let batch = Batch {
            inputs: lcg(vec![8, 6], seed + 501, 1.0),
            labels: vec![0, 1, 2, 0, 1, 2, 0, 1],
        };
        let residuals = bn_saliency_zero(&spec, &params, &mask, &batch, LossKind::CrossEntropy)?;
        let ok = residuals.iter().all(|r| r.passes(CONSERVATION_TOL));
        let worst = residuals
            .iter()
            .map(|r| r.saliency_sum.abs() / r.term_scale.max(1e-30))
            .fold(0.0, f64::max);
        out.push(
            "batchnorm_saliency_zero_sum",
            ok,
            format!("max |sum|/scale {worst:.2e} over {} channels", residuals.len()),
        );

        let train_scores = score_synflow_in_mode(&spec, &params, &mask, Mode::Train)?;
        let eval_scores = score_synflow(&spec, &params, &mask)?;
        let train_max = train_scores.map.iter_active().map(|(_, _, s)| s.abs()).fold(0.0, f64::max);
        let eval_min = eval_scores
            .map
            .iter_active()
            .map(|(_, _, s)| s)
            .fold(f64::INFINITY, f64::min);
        out.push(
            "synflow_needs_eval_mode_with_batchnorm",
            train_max <= 1e-12 && eval_min > 0.0,
            format!("train-mode max score {train_max:.2e}, eval-mode min score {eval_min:.2e}"),
        );
    }

    // Backward vs central finite differences of the forward pass. The
    // difference quotient is only meaningful away from relu kinks and pool
    // ties, so inputs are drawn until the trace is clear of both.
    {
        let nets = conservation_architectures(seed ^ 0xF00D);
        let mut worst = 0.0f64;
        for net in &nets {
            let mask = Mask::full(&net.spec);
            let input = kink_safe_input(&net.spec, &net.params, &mask, seed + 600, 0.9)?;
            let trace = forward(&net.spec, &net.params, &mask, &input, Mode::Eval)?;
            let ones = Tensor::ones(trace.output().shape().to_vec());
            let grads = backward(&net.spec, &trace, &ones)?;
            let theta = net.params.flatten_trainable();
            let ad = grads.flatten();
            let f = |flat: &[f64]| -> Result<f64> {
                let p = net.params.with_trainable(flat)?;
                Ok(forward(&net.spec, &p, &mask, &input, Mode::Eval)?.output().sum())
            };
            let step = 1e-5;
            let mut work = theta.clone();
            for i in 0..theta.len() {
                work[i] = theta[i] + step;
                let fp = f(&work)?;
                work[i] = theta[i] - step;
                let fm = f(&work)?;
                work[i] = theta[i];
                let fd = (fp - fm) / (2.0 * step);
                worst = worst.max((ad[i] - fd).abs() / ad[i].abs().max(fd.abs()).max(1e-3));
            }
        }
        out.push(
            "backward_vs_finite_differences",
            worst <= 1e-6,
            format!("max relative error {worst:.2e} across architectures"),
        );
    }

    // Network-level HVP vs a dense Hessian assembled from backward.
    {
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 3 }, LayerKind::Relu, LayerKind::Dense { out_dim: 2 }],
        )
        .expect("hvp net");
        let params = build_network(&spec, seed + 700)?;
        let mask = Mask::full(&spec);
        let batch = Batch { inputs: lcg(vec![3, 2], seed + 701, 1.0), labels: vec![0, 1, 0] };
        let (_, g) = loss_and_grad(&spec, &params, &mask, &batch, LossKind::Mse, Mode::Eval)?;
        let hv = hvp(&spec, &params, &mask, &batch, LossKind::Mse, Mode::Eval, &g)?;
        let theta = params.flatten_trainable();
        let n = theta.len();
        let grad_at = |flat: &[f64]| -> Result<Vec<f64>> {
            let p = params.with_trainable(flat)?;
            Ok(loss_and_grad(&spec, &p, &mask, &batch, LossKind::Mse, Mode::Eval)?.1.flatten())
        };
        let step = 1e-5;
        let mut hessian = vec![vec![0.0; n]; n];
        let mut work = theta.clone();
        for i in 0..n {
            work[i] = theta[i] + step;
            let gp = grad_at(&work)?;
            work[i] = theta[i] - step;
            let gm = grad_at(&work)?;
            work[i] = theta[i];
            for j in 0..n {
                hessian[i][j] = (gp[j] - gm[j]) / (2.0 * step);
            }
        }
        let v = g.flatten();
        let hv_fd = hv.flatten();
        let mut worst = 0.0f64;
        for i in 0..n {
            let oracle: f64 = hessian[i].iter().zip(&v).map(|(a, b)| a * b).sum();
            worst = worst.max((hv_fd[i] - oracle).abs() / hv_fd[i].abs().max(oracle.abs()).max(1e-6));
        }
        out.push(
            "hvp_vs_dense_hessian",
            worst <= 1e-3,
            format!("max relative error {worst:.2e} on {n} parameters"),
        );
    }

    Ok(out)
}
