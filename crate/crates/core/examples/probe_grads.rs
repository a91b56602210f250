use synflow_core::autodiff::{loss_and_grad, LossKind, Mode};
use synflow_core::harness::dataset::gen_synthetic;
use synflow_core::harness::train::{train, Hyperparams, LossSpec};
use synflow_core::netgraph::{build_network, max_compression, LayerKind, NetworkSpec};
use synflow_core::pruner::{prune, CompressionSchedule, ScheduleKind};
use synflow_core::scoring::{ScorerKind, ScoringContext};

fn vgg_toy() -> NetworkSpec {
    NetworkSpec::new(
        vec![1, 8, 8],
        vec![
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Flatten,
            LayerKind::Dense { out_dim: 32 },
            LayerKind::Dense { out_dim: 10 },
        ],
    )
    .unwrap()
}

fn main() {
    let spec = vgg_toy();
    let rho_max = max_compression(&spec).unwrap();
    let ctx = ScoringContext::data_free(ScorerKind::SynFlow, 0);
    let seed = 0u64;
    let params = build_network(&spec, seed).unwrap();
    let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
    let schedule = CompressionSchedule::new(rho_max, 100, ScheduleKind::Exponential).unwrap();
    let report = prune(&spec, &params, &ctx, &schedule).unwrap();
    let mask = report.final_mask.clone();

    let survivors: Vec<(usize, usize)> = mask
        .weights
        .iter()
        .enumerate()
        .filter_map(|(l, m)| m.as_ref().map(|t| (l, t)))
        .flat_map(|(l, t)| {
            t.data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(move |(i, _)| (l, i))
                .collect::<Vec<_>>()
        })
        .collect();

    let full = data.scoring_batch(1200, &spec.input_shape).unwrap();
    let dump = |tag: &str, p: &synflow_core::netgraph::ParamSet| {
        let (loss, grads) =
            loss_and_grad(&spec, p, &mask, &full, LossKind::CrossEntropy, Mode::Train).unwrap();
        print!("{tag}: loss {loss:.4} ");
        for &(l, i) in &survivors {
            let w = p.weight(l).unwrap().get(i);
            let g = grads.weight(l).unwrap().get(i);
            print!("L{l}[{i}] w={w:+.3} g={g:+.2e}  ");
        }
        println!();
    };
    dump("init", &params);

    // Short trainings, inspecting the path afterwards.
    for (epochs, lr) in [(5usize, 0.01), (25, 0.01), (25, 0.05), (25, 0.2)] {
        let hyper = Hyperparams {
            epochs,
            batch_size: 32,
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_drop_epochs: vec![],
            lr_drop_factor: 0.1,
            grad_clip_norm: None,
            loss: LossSpec::CrossEntropy,
            seed: 11,
        };
        let (trained, hist) = train(&spec, &params, &mask, &data, &hyper).unwrap();
        print!("epochs {epochs} lr {lr}: acc {:?} ", hist.test_accuracy.last());
        dump("after", &trained);
    }
}
