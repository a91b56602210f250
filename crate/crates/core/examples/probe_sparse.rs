use synflow_core::harness::dataset::gen_synthetic;
use synflow_core::harness::train::{train, Hyperparams, LossSpec};
use synflow_core::netgraph::{build_network, max_compression, LayerKind, NetworkSpec};
use synflow_core::pruner::{prune, CompressionSchedule, ScheduleKind};
use synflow_core::scoring::{ScorerKind, ScoringContext};
use synflow_core::autodiff::{forward, Mode};

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
    for seed in [0u64, 1, 2] {
        let params = build_network(&spec, seed).unwrap();
        let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
        let schedule = CompressionSchedule::new(rho_max, 100, ScheduleKind::Exponential).unwrap();
        let report = prune(&spec, &params, &ctx, &schedule).unwrap();
        // Surviving weights
        for (l, m) in report.final_mask.weights.iter().enumerate() {
            if let Some(t) = m {
                for (i, &v) in t.data().iter().enumerate() {
                    if v != 0.0 {
                        let w = params.weight(l).unwrap().get(i);
                        print!("L{l}[{i}]={w:+.3} ");
                    }
                }
            }
        }
        println!();
        for (epochs, lr) in [(15usize, 0.005), (15, 0.01), (25, 0.01), (25, 0.02), (40, 0.01)] {
            let hyper = Hyperparams {
                epochs, batch_size: 32, lr, momentum: 0.9, weight_decay: 0.0,
                lr_drop_epochs: vec![(epochs * 7) / 10], lr_drop_factor: 0.1,
                grad_clip_norm: None,
                loss: LossSpec::CrossEntropy, seed: 11,
            };
            let (trained, hist) = train(&spec, &params, &report.final_mask, &data, &hyper).unwrap();
            // logit spread on test set
            let batch = data.test_batch(&spec.input_shape).unwrap();
            let tr = forward(&spec, &trained, &report.final_mask, &batch.inputs, Mode::Eval).unwrap();
            let y = tr.output().data();
            let mut spread = 0.0f64;
            for row in y.chunks(10) {
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                let mn = row.iter().cloned().fold(f64::MAX, f64::min);
                spread = spread.max(mx - mn);
            }
            println!(
                "  seed {seed} epochs {epochs} lr {lr}: acc {:?} diverged={} max logit spread {spread:.4}",
                hist.test_accuracy.last(), hist.diverged
            );
        }
    }
}
