//! Compression sweeps, toy iterative magnitude pruning, and pass-count
//! accounting.

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{gen_synthetic, Dataset};
use crate::harness::report::{SweepCell, SweepReport};
use crate::harness::train::{evaluate_accuracy, train, Hyperparams};
use crate::netgraph::{
    apply_mask, build_network, layer_param_counts, max_compression, Mask, NetworkSpec, ParamSet,
};
use crate::pruner::{
    default_rho_grid, detect_layer_collapse, prune, select_mask_count, CompressionSchedule,
};
use crate::scoring::{score_magnitude, ScorerKind, ScoringContext};

/// GraSP's finite-difference HVP costs one gradient accumulation plus two
/// shifted evaluations per iteration.
pub const GRASP_PASS_MULTIPLIER: u64 = 3;

/// Forward/backward example passes a scorer spends: iterations times
/// examples per iteration. SynFlow always scores one all-ones example, so
/// its cost is the iteration count alone, independent of any dataset.
pub fn pass_count(kind: ScorerKind, iterations: usize, scoring_examples: usize) -> u64 {
    let iters = iterations as u64;
    match kind {
        ScorerKind::Random | ScorerKind::Magnitude => 0,
        ScorerKind::SynFlow => iters,
        ScorerKind::Snip => iters * scoring_examples as u64,
        ScorerKind::Grasp => iters * GRASP_PASS_MULTIPLIER * scoring_examples as u64,
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scoring context for one sweep cell.
pub fn make_context(
    kind: ScorerKind,
    config: &ExperimentConfig,
    dataset: &Dataset,
    spec: &NetworkSpec,
    run_seed: u64,
) -> Result<ScoringContext> {
    if kind.is_data_dependent() {
        let batch = dataset.scoring_batch(config.scoring_examples(), &spec.input_shape)?;
        Ok(ScoringContext::with_data(
            kind,
            batch,
            config.train.loss.into(),
            config.prune.sub_batch,
        ))
    } else {
        Ok(ScoringContext::data_free(kind, mix(run_seed, 0xC0FFEE)))
    }
}

/// Run one (scorer, ρ, seed) cell: prune at initialization, train, measure.
fn run_cell(
    config: &ExperimentConfig,
    spec: &NetworkSpec,
    kind: ScorerKind,
    rho: f64,
    seed: u64,
    iterations: usize,
) -> Result<SweepCell> {
    let params = build_network(spec, seed)?;
    let dataset = gen_synthetic(
        config.data.classes,
        config.data.dim,
        config.data.samples,
        mix(config.data.seed, seed),
    )?;

    let (mask, collapsed, collapsed_layers, passes) = if rho <= 1.0 {
        (Mask::full(spec), false, Vec::new(), 0)
    } else {
        let ctx = make_context(kind, config, &dataset, spec, seed)?;
        let schedule = CompressionSchedule::new(rho, iterations, config.prune.schedule.into())?;
        let report = prune(spec, &params, &ctx, &schedule)?;
        (report.final_mask, report.collapsed, report.collapsed_layers, report.example_passes)
    };

    let mut hyper: Hyperparams = config.train.clone();
    hyper.seed = mix(config.train.seed, seed);
    let (_, history) = train(spec, &params, &mask, &dataset, &hyper)?;
    let accuracy = match history.test_accuracy.last() {
        Some(&acc) => acc,
        // Diverged before the first epoch finished: measure the untouched
        // masked network instead.
        None => evaluate_accuracy(spec, &apply_mask(&params, &mask)?, &mask, &dataset)?,
    };

    Ok(SweepCell {
        scorer: kind.name().to_string(),
        rho,
        seed,
        collapsed,
        collapsed_layers,
        accuracy: Some(accuracy),
        remaining: mask.remaining(),
        total: spec.prunable_param_count(),
        per_layer_remaining: layer_param_counts(spec, &mask),
        example_passes: passes,
        diverged: history.diverged,
        error: None,
    })
}

/// Sweep scorers × ρ grid × seeds. Cell failures are recorded in the report
/// rather than aborting the sweep.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("config has no [sweep] section"))?;
    let spec = config.network.to_spec()?;
    let rho_max = max_compression(&spec)?;
    let grid: Vec<f64> = if sweep.rho_values.is_empty() {
        let mut g = vec![1.0];
        g.extend(grid_with_step(rho_max, sweep.rho_exponent_step));
        g.dedup();
        g
    } else {
        sweep.rho_values.clone()
    };

    let mut cells = Vec::new();
    for &scorer in &sweep.scorers {
        let kind: ScorerKind = scorer.into();
        // Paper convention unless overridden: synflow iterates, everything
        // else is single-shot.
        let iterations = sweep.iterations.unwrap_or(if kind == ScorerKind::SynFlow {
            config.prune.iterations
        } else {
            1
        });
        for &rho in &grid {
            for &seed in &sweep.seeds {
                let cell = match run_cell(config, &spec, kind, rho, seed, iterations) {
                    Ok(cell) => cell,
                    Err(e) => SweepCell {
                        scorer: kind.name().to_string(),
                        rho,
                        seed,
                        collapsed: false,
                        collapsed_layers: Vec::new(),
                        accuracy: None,
                        remaining: 0,
                        total: spec.prunable_param_count(),
                        per_layer_remaining: Vec::new(),
                        example_passes: 0,
                        diverged: false,
                        error: Some(e.to_string()),
                    },
                };
                cells.push(cell);
            }
        }
    }
    Ok(SweepReport { cells }.sorted())
}

fn grid_with_step(rho_max: f64, step: f64) -> Vec<f64> {
    if (step - 0.25).abs() < 1e-12 {
        return default_rho_grid(rho_max);
    }
    let mut grid = Vec::new();
    let mut exp = 0.0;
    loop {
        let rho = 10f64.powf(exp);
        if rho >= rho_max {
            break;
        }
        grid.push(rho);
        exp += step;
    }
    grid.push(rho_max);
    grid
}

/// One train → magnitude-prune → rewind cycle record.
#[derive(Debug, Clone)]
pub struct ImpCycle {
    pub cycle: usize,
    /// Cumulative compression after this cycle.
    pub rho: f64,
    pub remaining: usize,
    pub collapsed: bool,
    /// Test accuracy of the trained network that was pruned this cycle.
    pub trained_accuracy: f64,
}

/// Outcome of toy iterative magnitude pruning.
#[derive(Debug, Clone)]
pub struct ImpReport {
    pub cycles: Vec<ImpCycle>,
    pub final_mask: Mask,
    /// Unpruned weights restored bit-exactly to their initialization.
    pub rewound: ParamSet,
    /// Accuracy of the final rewound ticket after training.
    pub final_accuracy: f64,
}

/// Iterative magnitude pruning at toy scale: train, prune the smallest
/// magnitudes globally, rewind survivors to initialization, repeat. The
/// cumulative compression after cycle c is `per_cycle_ratio`^c.
pub fn imp_toy(
    spec: &NetworkSpec,
    init: &ParamSet,
    dataset: &Dataset,
    cycles: usize,
    per_cycle_ratio: f64,
    hyper: &Hyperparams,
) -> Result<ImpReport> {
    if cycles == 0 {
        return Err(Error::domain("iterative magnitude pruning needs at least one cycle"));
    }
    if per_cycle_ratio <= 1.0 {
        return Err(Error::domain("per-cycle ratio must exceed 1"));
    }
    let total = spec.prunable_param_count();
    let mut mask = Mask::full(spec);
    let mut records = Vec::with_capacity(cycles);

    for cycle in 1..=cycles {
        let (trained, history) = train(spec, init, &mask, dataset, hyper)?;
        let trained_accuracy = *history.test_accuracy.last().unwrap_or(&0.0);
        let rho = per_cycle_ratio.powi(cycle as i32);
        let keep = ((total as f64 / rho).ceil() as usize).max(1);
        let scored = score_magnitude(spec, &trained, &mask)?;
        mask = select_mask_count(spec, &scored.map, keep)?;
        let (collapsed, _) = detect_layer_collapse(spec, &mask);
        records.push(ImpCycle {
            cycle,
            rho,
            remaining: mask.remaining(),
            collapsed,
            trained_accuracy,
        });
    }

    let rewound = apply_mask(init, &mask)?;
    let (_, history) = train(spec, init, &mask, dataset, hyper)?;
    Ok(ImpReport {
        cycles: records,
        final_mask: mask,
        rewound,
        final_accuracy: *history.test_accuracy.last().unwrap_or(&0.0),
    })
}

/// Largest grid ρ the IMP procedure reaches without layer-collapse, holding
/// the total cycle count fixed and splitting ρ evenly (in the exponent)
/// across cycles.
pub fn imp_critical_compression(
    spec: &NetworkSpec,
    init: &ParamSet,
    dataset: &Dataset,
    cycles: usize,
    hyper: &Hyperparams,
    grid: &[f64],
) -> Result<f64> {
    let mut best = None;
    for &rho in grid {
        if rho <= 1.0 {
            best = Some(best.map_or(rho, |b: f64| b.max(rho)));
            continue;
        }
        let per_cycle = rho.powf(1.0 / cycles as f64);
        let report = imp_toy(spec, init, dataset, cycles, per_cycle, hyper)?;
        if !report.cycles.last().expect("at least one cycle").collapsed {
            best = Some(best.map_or(rho, |b: f64| b.max(rho)));
        }
    }
    best.ok_or_else(|| Error::domain("every swept ratio collapsed"))
}
