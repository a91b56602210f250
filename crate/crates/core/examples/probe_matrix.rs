use synflow_core::autodiff::LossKind;
use synflow_core::harness::dataset::gen_synthetic;
use synflow_core::netgraph::{build_network, max_compression, LayerKind, NetworkSpec};
use synflow_core::pruner::{default_rho_grid, prune, CompressionSchedule, ScheduleKind};
use synflow_core::scoring::{ScorerKind, ScoringContext};

fn vgg_bn() -> NetworkSpec {
    NetworkSpec::new(
        vec![1, 8, 8],
        vec![
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
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
    let grid = default_rho_grid(rho_max);
    for (examples, sub) in [(100usize, 100usize)] {
        println!("scoring set {examples}, sub-batch {sub}:");
        for seed in [0u64, 1, 2] {
            let params = build_network(&spec, seed).unwrap();
            let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
            let mut cliffs = Vec::new();
            for iters in [1usize, 100] {
                let batch = data.scoring_batch(examples, &spec.input_shape).unwrap();
                let ctx =
                    ScoringContext::with_data(ScorerKind::Snip, batch, LossKind::CrossEntropy, sub);
                let mut cliff = None;
                for &rho in &grid {
                    let schedule =
                        CompressionSchedule::new(rho, iters, ScheduleKind::Exponential).unwrap();
                    let report = prune(&spec, &params, &ctx, &schedule).unwrap();
                    if report.collapsed {
                        cliff = Some(rho);
                        break;
                    }
                }
                cliffs.push(cliff);
            }
            let ok = match (cliffs[0], cliffs[1]) {
                (Some(a), Some(b)) => b > a && b < rho_max,
                (Some(_), None) => false,
                _ => false,
            };
            println!("  seed {seed}: n=1 {:?}  n=100 {:?}  clause-ok {ok}", cliffs[0], cliffs[1]);
        }
    }
}
