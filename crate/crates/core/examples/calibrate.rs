use std::time::Instant;
use synflow_core::harness::dataset::gen_synthetic;
use synflow_core::harness::train::{evaluate_accuracy, train, Hyperparams, LossSpec};
use synflow_core::netgraph::{build_network, max_compression, LayerKind, Mask, NetworkSpec};
use synflow_core::pruner::{default_rho_grid, prune, CompressionSchedule, ScheduleKind};
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
    let n = spec.prunable_param_count();
    let rho_max = max_compression(&spec).unwrap();
    println!("vgg toy: {n} params, rho_max {rho_max}");
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

    for (lr, clip) in [(0.05, 1.0), (0.05, 5.0), (0.1, 1.0), (0.05, 0.5)] {
        let mut h2 = hyper.clone();
        h2.lr = lr;
        h2.grad_clip_norm = Some(clip);
        for seed in [0u64, 1, 2] {
            let params = build_network(&spec, seed).unwrap();
            let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
            let (_, hist) = train(&spec, &params, &Mask::full(&spec), &data, &h2).unwrap();
            println!("lr {lr} clip {clip} seed {seed}: dense acc {:?} diverged={}", hist.test_accuracy.last(), hist.diverged);
        }
    }

    // SynFlow cells at increasing rho incl rho_max.
    let ctx = ScoringContext::data_free(ScorerKind::SynFlow, 0);
    for rho in default_rho_grid(rho_max) { let rho = rho; if rho <= 1.0 { continue; }
        let mut accs = Vec::new();
        let mut rem = 0;
        let t0 = Instant::now();
        for seed in [0u64, 1, 2] {
            let params = build_network(&spec, seed).unwrap();
            let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
            let schedule = CompressionSchedule::new(rho, 100, ScheduleKind::Exponential).unwrap();
            let report = prune(&spec, &params, &ctx, &schedule).unwrap();
            assert!(!report.collapsed, "synflow collapsed at rho {rho}");
            rem = report.final_remaining;
            let (_, hist) = train(&spec, &params, &report.final_mask, &data, &hyper).unwrap();
            accs.push(*hist.test_accuracy.last().unwrap());
        }
        let mean = accs.iter().sum::<f64>() / 3.0;
        println!(
            "synflow rho {rho:8.1}: remaining {rem:5}, accs {accs:?}, mean {mean:.3} ({:?})",
            t0.elapsed()
        );
    }

    // Collapse cliffs of single-shot scorers (masks only).
    let grid = default_rho_grid(rho_max);
    for kind in [ScorerKind::Magnitude, ScorerKind::Random] {
        let ctx = ScoringContext::data_free(kind, 7);
        let mut cliff = None;
        for &rho in &grid {
            let params = build_network(&spec, 0).unwrap();
            let schedule = CompressionSchedule::new(rho, 1, ScheduleKind::Exponential).unwrap();
            let report = prune(&spec, &params, &ctx, &schedule).unwrap();
            if report.collapsed {
                cliff = Some(rho);
                break;
            }
        }
        println!("{:?} single-shot cliff at rho {:?} (rho_max {rho_max})", kind, cliff);
    }

    use synflow_core::autodiff::LossKind;
    use synflow_core::harness::dataset::Dataset;
    let snip_ctx = |data: &Dataset| {
        let batch = data.scoring_batch(100, &spec.input_shape).unwrap();
        ScoringContext::with_data(ScorerKind::Snip, batch, LossKind::CrossEntropy, 32)
    };
    let grasp_ctx = |data: &Dataset| {
        let batch = data.scoring_batch(100, &spec.input_shape).unwrap();
        ScoringContext::with_data(ScorerKind::Grasp, batch, LossKind::CrossEntropy, 32)
    };
    for seed in [0u64, 1, 2] {
        let params = build_network(&spec, seed).unwrap();
        let data = gen_synthetic(10, 64, 1600, 100 + seed).unwrap();
        for (name, ctx, iters) in [
            ("snip n=1", snip_ctx(&data), 1usize),
            ("grasp n=1", grasp_ctx(&data), 1),
            ("snip n=100", snip_ctx(&data), 100),
        ] {
            let mut cliff = None;
            for &rho in &grid {
                let schedule = CompressionSchedule::new(rho, iters, ScheduleKind::Exponential).unwrap();
                let report = prune(&spec, &params, &ctx, &schedule).unwrap();
                if report.collapsed {
                    cliff = Some(rho);
                    break;
                }
            }
            println!("seed {seed} {name}: cliff at {:?}", cliff);
        }
    }
}
