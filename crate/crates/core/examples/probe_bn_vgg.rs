use synflow_core::autodiff::LossKind;
use synflow_core::harness::dataset::{gen_synthetic, Dataset};
use synflow_core::harness::train::{train, Hyperparams, LossSpec};
use synflow_core::netgraph::{build_network, max_compression, LayerKind, Mask, NetworkSpec};
use synflow_core::pruner::{default_rho_grid, prune, CompressionSchedule, ScheduleKind};
use synflow_core::scoring::{ScorerKind, ScoringContext};

fn vgg_bn() -> NetworkSpec {
    NetworkSpec::new(
        vec![1, 8, 8],
        vec![
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::BatchNorm,
            LayerKind::Relu,
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::BatchNorm,
            LayerKind::Relu,
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::BatchNorm,
            LayerKind::Relu,
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::BatchNorm,
            LayerKind::Relu,
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Flatten,
            LayerKind::Dense { out_dim: 32 },
            LayerKind::Relu,
            LayerKind::Dense { out_dim: 10 },
        ],
    )
    .unwrap()
}

fn main() {
    let spec = vgg_bn();
    let rho_max = max_compression(&spec).unwrap();
    println!("bn vgg: {} params, rho_max {rho_max}", spec.prunable_param_count());
    let hyper = Hyperparams {
        epochs: 25,
        batch_size: 32,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        lr_drop_epochs: vec![18],
        lr_drop_factor: 0.1,
        grad_clip_norm: Some(1.0),
        loss: LossSpec::CrossEntropy,
        seed: 11,
    };

    let _ = (&hyper, train as fn(_,_,_,_,_) -> _);

    // Cliffs.
    let grid = default_rho_grid(rho_max);
    let mk_snip = |data: &Dataset| {
        let batch = data.scoring_batch(100, &spec.input_shape).unwrap();
        ScoringContext::with_data(ScorerKind::Snip, batch, LossKind::CrossEntropy, 100)
    };
    for seed in [0u64, 1, 2] {
        let params = build_network(&spec, seed).unwrap();
        let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
        for (name, iters) in [("snip n=1", 1usize), ("snip n=100", 100)] {
            let ctx = mk_snip(&data);
            let mut cliff = None;
            for &rho in &grid {
                let schedule = CompressionSchedule::new(rho, iters, ScheduleKind::Exponential).unwrap();
                let report = prune(&spec, &params, &ctx, &schedule).unwrap();
                if report.collapsed {
                    cliff = Some(rho);
                    break;
                }
            }
            println!("seed {seed} {name}: cliff {:?}", cliff);
        }
        for (name, kind) in [("magnitude", ScorerKind::Magnitude), ("random", ScorerKind::Random)] {
            let ctx = ScoringContext::data_free(kind, 7);
            let mut cliff = None;
            for &rho in &grid {
                let schedule = CompressionSchedule::new(rho, 1, ScheduleKind::Exponential).unwrap();
                let report = prune(&spec, &params, &ctx, &schedule).unwrap();
                if report.collapsed {
                    cliff = Some(rho);
                    break;
                }
            }
            println!("seed {seed} {name} n=1: cliff {:?}", cliff);
        }
    }
}

enum ScorerCtx { SynFlow }
