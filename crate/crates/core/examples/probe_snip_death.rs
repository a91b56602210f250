use synflow_core::autodiff::LossKind;
use synflow_core::harness::dataset::gen_synthetic;
use synflow_core::netgraph::{build_network, LayerKind, NetworkSpec};
use synflow_core::pruner::{prune, CompressionSchedule, ScheduleKind};
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
    let seed = 1u64;
    let params = build_network(&spec, seed).unwrap();
    let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
    let batch = data.scoring_batch(100, &spec.input_shape).unwrap();
    let ctx = ScoringContext::with_data(ScorerKind::Snip, batch, LossKind::CrossEntropy, 100);
    let schedule = CompressionSchedule::new(17.78, 100, ScheduleKind::Exponential).unwrap();
    let report = prune(&spec, &params, &ctx, &schedule).unwrap();
    println!("collapsed: {:?} {:?}", report.collapsed, report.collapsed_layers);
    for it in report.iterations.iter() {
        if it.iteration % 10 == 0 || it.iteration > 90 || it.iteration < 12 {
            let counts: Vec<usize> = it.per_layer_remaining.iter().map(|&(_, _, r)| r).collect();
            println!(
                "iter {:3}: keep {:5} layers {:?} prune_size {:.3e} min_cut {:.3e}",
                it.iteration, it.keep_count, counts, it.prune_size, it.min_cut_size
            );
        }
    }
}
