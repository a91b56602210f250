//! Global masking and the iterative pruning loop: compression schedules,
//! top-k mask selection with a deterministic tie order, layer-collapse
//! detection and critical-compression measurement.

use crate::error::{Error, Result};
use crate::netgraph::{layer_param_counts, Mask, NetworkSpec, ParamSet};
use crate::scoring::{score, ScoreMap, ScorerKind, ScoringContext};
use crate::tensor::Tensor;

/// Shape of the per-iteration compression schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Exponential,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Exponential => "exponential",
        }
    }
}

/// Target compression ratio, iteration count and schedule kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionSchedule {
    pub rho: f64,
    pub iterations: usize,
    pub kind: ScheduleKind,
}

impl CompressionSchedule {
    pub fn new(rho: f64, iterations: usize, kind: ScheduleKind) -> Result<Self> {
        if !(rho >= 1.0) || !rho.is_finite() {
            return Err(Error::domain(format!("compression ratio must be >= 1, got {rho}")));
        }
        if iterations == 0 {
            return Err(Error::domain("schedule needs at least one iteration"));
        }
        Ok(CompressionSchedule { rho, iterations, kind })
    }

    /// Fraction of the original parameters kept after iteration k (1-based).
    /// Exponential: ρ^(−k/n); linear: 1 − (k/n)(1 − 1/ρ). Ends at 1/ρ.
    pub fn keep_fraction(&self, k: usize) -> f64 {
        let t = k as f64 / self.iterations as f64;
        match self.kind {
            ScheduleKind::Exponential => self.rho.powf(-t),
            ScheduleKind::Linear => 1.0 - t * (1.0 - 1.0 / self.rho),
        }
    }
}

/// One iteration of the prune loop.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub keep_fraction: f64,
    pub keep_count: usize,
    /// Score of the lowest surviving parameter.
    pub threshold: f64,
    /// Total score removed this iteration.
    pub prune_size: f64,
    /// Smallest per-layer total of the scores in play this iteration.
    pub min_cut_size: f64,
    /// prune_size / min_cut_size (0 when nothing was pruned).
    pub prune_cut_ratio: f64,
    /// (layer, total, remaining) after this iteration.
    pub per_layer_remaining: Vec<(usize, usize, usize)>,
    pub example_passes: u64,
}

/// Outcome of a full prune run.
#[derive(Debug, Clone)]
pub struct PruneReport {
    pub scorer: &'static str,
    pub rho: f64,
    pub schedule: ScheduleKind,
    pub total_params: usize,
    pub final_remaining: usize,
    pub iterations: Vec<IterationRecord>,
    pub final_mask: Mask,
    pub collapsed: bool,
    pub collapsed_layers: Vec<usize>,
    pub example_passes: u64,
}

/// Keep the `keep_count` highest-scoring active parameters. Ties at the
/// threshold are resolved by pruning the lowest (layer, index) positions
/// first, so selection is a total order.
pub fn select_mask_count(spec: &NetworkSpec, scores: &ScoreMap, keep_count: usize) -> Result<Mask> {
    let mut entries: Vec<(usize, usize, f64)> = scores.iter_active().collect();
    if entries.is_empty() {
        return Err(Error::domain("empty score map"));
    }
    for (layer, idx, s) in &entries {
        if !s.is_finite() {
            return Err(Error::numeric(*layer, format!("non-finite score at element {idx}")));
        }
    }
    let keep = keep_count.min(entries.len());
    // Prune order: lowest score first, then (layer, index).
    entries.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .expect("scores are finite")
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    let mut weights: Vec<Option<Tensor>> = spec
        .layers
        .iter()
        .map(|l| l.weight_shape().map(Tensor::zeros))
        .collect();
    for &(layer, idx, _) in entries.iter().skip(entries.len() - keep) {
        weights[layer]
            .as_mut()
            .expect("scored layer is prunable")
            .set(idx, 1.0);
    }
    Ok(Mask { weights })
}

/// Keep ⌈keep_fraction × active⌉ highest-scoring parameters.
pub fn select_mask(spec: &NetworkSpec, scores: &ScoreMap, keep_fraction: f64) -> Result<Mask> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::domain(format!("keep fraction must be in (0, 1], got {keep_fraction}")));
    }
    let active = scores.active_count();
    if active == 0 {
        return Err(Error::domain("empty score map"));
    }
    let keep = (keep_fraction * active as f64).ceil() as usize;
    select_mask_count(spec, scores, keep.max(1))
}

/// (total score pruned between the masks) / (smallest per-layer total of the
/// scores still in play under `old_mask`).
pub fn prune_cut_ratio(
    scores: &ScoreMap,
    old_mask: &Mask,
    new_mask: &Mask,
    spec: &NetworkSpec,
) -> f64 {
    let mut pruned = 0.0;
    for (layer, idx, s) in scores.iter_active() {
        let was = old_mask.layer(layer).map(|t| t.get(idx)).unwrap_or(0.0);
        let now = new_mask.layer(layer).map(|t| t.get(idx)).unwrap_or(0.0);
        debug_assert!(now <= was, "monotone masks");
        if was != 0.0 && now == 0.0 {
            pruned += s;
        }
    }
    if pruned == 0.0 {
        return 0.0;
    }
    let min_cut = min_layer_total(scores, spec);
    pruned / min_cut
}

fn min_layer_total(scores: &ScoreMap, spec: &NetworkSpec) -> f64 {
    spec.prunable_layers()
        .into_iter()
        .map(|l| scores.layer_total(l))
        .fold(f64::INFINITY, f64::min)
}

/// Splitmix-style mix so the random scorer gets a fresh stream per iteration.
fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Iterative global-masking prune loop: re-score the masked network each
/// iteration and keep the schedule's share of the original parameter count.
/// With the synflow scorer, n = 100 and an exponential schedule this is the
/// iterative synaptic-flow algorithm.
pub fn prune(
    spec: &NetworkSpec,
    params: &ParamSet,
    ctx: &ScoringContext,
    schedule: &CompressionSchedule,
) -> Result<PruneReport> {
    let total = spec.prunable_param_count();
    if total == 0 {
        return Err(Error::domain("network has no prunable parameters"));
    }
    if schedule.rho > total as f64 {
        return Err(Error::domain(format!(
            "compression ratio {} exceeds prunable parameter count {total}",
            schedule.rho
        )));
    }
    let mut mask = Mask::full(spec);
    let mut iterations = Vec::with_capacity(schedule.iterations);
    let mut total_passes = 0u64;

    for k in 1..=schedule.iterations {
        let mut iter_ctx = ctx.clone();
        if iter_ctx.kind == ScorerKind::Random {
            iter_ctx.seed = mix_seed(ctx.seed, k as u64);
        }
        let scored = score(spec, params, &mask, &iter_ctx).map_err(|e| {
            Error::domain(format!("scoring failed at iteration {k}: {e}"))
        })?;
        total_passes += scored.example_passes;

        let keep_fraction = schedule.keep_fraction(k);
        let keep_count = ((keep_fraction * total as f64).ceil() as usize).max(1);
        let active = scored.map.active_count();
        let new_mask = if keep_count >= active {
            // Schedule rounding produced the same count: nothing to remove.
            mask.clone()
        } else {
            select_mask_count(spec, &scored.map, keep_count)?
        };

        let prune_size: f64 = scored
            .map
            .iter_active()
            .filter(|&(layer, idx, _)| new_mask.layer(layer).map(|t| t.get(idx)) == Some(0.0))
            .map(|(_, _, s)| s)
            .sum();
        let min_cut_size = min_layer_total(&scored.map, spec);
        let threshold = scored
            .map
            .iter_active()
            .filter(|&(layer, idx, _)| new_mask.layer(layer).map(|t| t.get(idx)) == Some(1.0))
            .map(|(_, _, s)| s)
            .fold(f64::INFINITY, f64::min);

        mask = new_mask;
        iterations.push(IterationRecord {
            iteration: k,
            keep_fraction,
            keep_count,
            threshold,
            prune_size,
            min_cut_size,
            prune_cut_ratio: if prune_size == 0.0 { 0.0 } else { prune_size / min_cut_size },
            per_layer_remaining: layer_param_counts(spec, &mask),
            example_passes: scored.example_passes,
        });
    }

    let (collapsed, collapsed_layers) = detect_layer_collapse(spec, &mask);
    Ok(PruneReport {
        scorer: ctx.kind.name(),
        rho: schedule.rho,
        schedule: schedule.kind,
        total_params: total,
        final_remaining: mask.remaining(),
        iterations,
        final_mask: mask,
        collapsed,
        collapsed_layers,
        example_passes: total_passes,
    })
}

/// True when some prunable layer is empty while prunable parameters remain
/// elsewhere (another layer still holds more than one).
pub fn detect_layer_collapse(spec: &NetworkSpec, mask: &Mask) -> (bool, Vec<usize>) {
    let counts = layer_param_counts(spec, mask);
    let empty: Vec<usize> =
        counts.iter().filter(|&&(_, _, rem)| rem == 0).map(|&(l, _, _)| l).collect();
    let elsewhere = counts.iter().any(|&(_, _, rem)| rem > 1);
    if !empty.is_empty() && elsewhere {
        (true, empty)
    } else {
        (false, Vec::new())
    }
}

/// ρ grid 10^{0, 0.25, 0.5, ...} capped at and including ρ_max.
pub fn default_rho_grid(rho_max: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut exp = 0.0;
    loop {
        let rho = 10f64.powf(exp);
        if rho >= rho_max {
            break;
        }
        grid.push(rho);
        exp += 0.25;
    }
    grid.push(rho_max);
    grid
}

/// Largest swept ρ for which the scorer induces no layer-collapse.
pub fn critical_compression(
    spec: &NetworkSpec,
    params: &ParamSet,
    ctx: &ScoringContext,
    iterations: usize,
    kind: ScheduleKind,
    grid: &[f64],
) -> Result<f64> {
    let mut best = None;
    for &rho in grid {
        let schedule = CompressionSchedule::new(rho, iterations, kind)?;
        let report = prune(spec, params, ctx, &schedule)?;
        if !report.collapsed {
            best = Some(best.map_or(rho, |b: f64| b.max(rho)));
        }
    }
    best.ok_or_else(|| Error::domain("every swept ratio collapsed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_network, LayerKind, LayerParams};
    use crate::scoring::{score_synflow, ScoreLayer};
    use proptest::prelude::*;

    fn two_layer_example() -> (NetworkSpec, ParamSet) {
        let spec = NetworkSpec::new(
            vec![2],
            vec![LayerKind::Dense { out_dim: 2 }, LayerKind::Dense { out_dim: 1 }],
        )
        .unwrap();
        let mut params = build_network(&spec, 0).unwrap();
        if let LayerParams::Weighted { weight, .. } = &mut params.layers[0] {
            *weight = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        }
        if let LayerParams::Weighted { weight, .. } = &mut params.layers[1] {
            *weight = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        }
        (spec, params)
    }

    fn single_layer_scores(spec: &NetworkSpec, values: Vec<f64>) -> ScoreMap {
        let shape = spec.layers[0].weight_shape().unwrap();
        let n = values.len();
        let mut layers = vec![None; spec.layers.len()];
        layers[0] = Some(ScoreLayer {
            values: Tensor::new(shape.clone(), values).unwrap(),
            active: Tensor::ones(shape),
        });
        let _ = n;
        ScoreMap { layers }
    }

    #[test]
    fn schedule_fractions() {
        let s = CompressionSchedule::new(100.0, 2, ScheduleKind::Exponential).unwrap();
        assert!((s.keep_fraction(1) - 0.1).abs() < 1e-12);
        assert!((s.keep_fraction(2) - 0.01).abs() < 1e-12);

        let s = CompressionSchedule::new(4.0, 4, ScheduleKind::Linear).unwrap();
        assert!((s.keep_fraction(4) - 0.25).abs() < 1e-12);
        for k in 1..4 {
            assert!(s.keep_fraction(k) > s.keep_fraction(k + 1));
        }
    }

    #[test]
    fn select_keeps_top_half() {
        let spec = NetworkSpec::new(vec![4], vec![LayerKind::Dense { out_dim: 1 }]).unwrap();
        let scores = single_layer_scores(&spec, vec![1.0, 2.0, 3.0, 4.0]);
        let mask = select_mask(&spec, &scores, 0.5).unwrap();
        assert_eq!(mask.layer(0).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn select_full_fraction_keeps_everything() {
        let spec = NetworkSpec::new(vec![4], vec![LayerKind::Dense { out_dim: 1 }]).unwrap();
        let scores = single_layer_scores(&spec, vec![4.0, 1.0, 3.0, 2.0]);
        let mask = select_mask(&spec, &scores, 1.0).unwrap();
        assert_eq!(mask.layer(0).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn select_breaks_ties_by_position() {
        // All-equal scores: the two lowest (layer, index) positions go.
        let spec = NetworkSpec::new(vec![4], vec![LayerKind::Dense { out_dim: 1 }]).unwrap();
        let scores = single_layer_scores(&spec, vec![2.0, 2.0, 2.0, 2.0]);
        let mask = select_mask(&spec, &scores, 0.5).unwrap();
        assert_eq!(mask.layer(0).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn select_rejects_empty_scores() {
        let spec = NetworkSpec::new(vec![4], vec![LayerKind::Dense { out_dim: 1 }]).unwrap();
        let shape = spec.layers[0].weight_shape().unwrap();
        let scores = ScoreMap {
            layers: vec![Some(ScoreLayer {
                values: Tensor::zeros(shape.clone()),
                active: Tensor::zeros(shape),
            })],
        };
        assert!(matches!(select_mask(&spec, &scores, 0.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn synflow_hand_run_keeps_one_per_layer() {
        // rho=3, n=2 on the {1,2,3,4}/{3,7} example. Hand enumeration:
        // k=1 keeps 4 of 6 (drops scores 1 and 2), k=2 keeps 2. Rescoring the
        // masked net gives layer-0 {3,4} and layer-1 {0,7}, so the survivors
        // are W1[1][1] and W2[0][1] - one per layer.
        let (spec, params) = two_layer_example();
        let ctx = ScoringContext::data_free(ScorerKind::SynFlow, 0);
        let schedule = CompressionSchedule::new(3.0, 2, ScheduleKind::Exponential).unwrap();
        let report = prune(&spec, &params, &ctx, &schedule).unwrap();

        assert_eq!(report.final_remaining, 2);
        assert!(!report.collapsed);
        assert_eq!(report.final_mask.layer(0).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(report.final_mask.layer(1).unwrap().data(), &[0.0, 1.0]);

        // First iteration kept ceil(6 * 3^-0.5) = 4.
        assert_eq!(report.iterations[0].keep_count, 4);
        assert_eq!(report.iterations[1].keep_count, 2);
    }

    #[test]
    fn single_iteration_is_single_shot() {
        let (spec, params) = two_layer_example();
        let ctx = ScoringContext::data_free(ScorerKind::SynFlow, 0);
        let schedule = CompressionSchedule::new(2.0, 1, ScheduleKind::Exponential).unwrap();
        let report = prune(&spec, &params, &ctx, &schedule).unwrap();
        assert_eq!(report.iterations.len(), 1);
        assert_eq!(report.final_remaining, 3); // ceil(6/2)

        // Same survivors as a direct top-3 selection of the dense scores.
        let scored = score_synflow(&spec, &params, &Mask::full(&spec)).unwrap();
        let direct = select_mask_count(&spec, &scored.map, 3).unwrap();
        assert_eq!(report.final_mask, direct);
    }

    #[test]
    fn masks_are_monotone_and_budget_exact() {
        let spec = NetworkSpec::new(
            vec![6],
            vec![
                LayerKind::Dense { out_dim: 8 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 4 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 11).unwrap();
        let ctx = ScoringContext::data_free(ScorerKind::SynFlow, 0);
        let schedule = CompressionSchedule::new(10.0, 7, ScheduleKind::Exponential).unwrap();
        let report = prune(&spec, &params, &ctx, &schedule).unwrap();

        let total = spec.prunable_param_count();
        assert_eq!(report.final_remaining, (total as f64 / 10.0).ceil() as usize);
        let mut last = total;
        for rec in &report.iterations {
            let remaining: usize = rec.per_layer_remaining.iter().map(|&(_, _, r)| r).sum();
            assert!(remaining <= last, "masks must be monotone");
            assert_eq!(remaining, rec.keep_count.min(last));
            last = remaining;
        }
    }

    #[test]
    fn noop_iterations_leave_mask_unchanged() {
        // Tiny net, many iterations: consecutive keep counts collide and the
        // colliding iterations must not alter the mask.
        let spec = NetworkSpec::new(vec![2], vec![LayerKind::Dense { out_dim: 2 }]).unwrap();
        let params = build_network(&spec, 1).unwrap();
        let ctx = ScoringContext::data_free(ScorerKind::SynFlow, 0);
        let schedule = CompressionSchedule::new(2.0, 10, ScheduleKind::Exponential).unwrap();
        let report = prune(&spec, &params, &ctx, &schedule).unwrap();
        assert_eq!(report.final_remaining, 2);
        assert_eq!(report.iterations.len(), 10);
    }

    #[test]
    fn collapse_detection_cases() {
        let spec = NetworkSpec::new(
            vec![3],
            vec![
                LayerKind::Dense { out_dim: 3 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 2 },
            ],
        )
        .unwrap();
        let full = Mask::full(&spec);
        assert_eq!(detect_layer_collapse(&spec, &full), (false, vec![]));

        let mut one_dead = full.clone();
        one_dead.weights[0] = Some(Tensor::zeros(vec![3, 3]));
        let (collapsed, layers) = detect_layer_collapse(&spec, &one_dead);
        assert!(collapsed);
        assert_eq!(layers, vec![0]);

        // One survivor per layer (the rho_max mask) is not collapse.
        let mut minimal = full;
        let mut m0 = vec![0.0; 9];
        m0[4] = 1.0;
        minimal.weights[0] = Some(Tensor::new(vec![3, 3], m0).unwrap());
        let mut m2 = vec![0.0; 6];
        m2[1] = 1.0;
        minimal.weights[2] = Some(Tensor::new(vec![3, 2], m2).unwrap());
        assert_eq!(detect_layer_collapse(&spec, &minimal), (false, vec![]));
    }

    #[test]
    fn prune_cut_ratio_cases() {
        let spec = NetworkSpec::new(
            vec![2],
            vec![
                LayerKind::Dense { out_dim: 2 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 2 },
            ],
        )
        .unwrap();
        let shape0 = vec![2usize, 2];
        let shape2 = vec![2usize, 2];
        let mut layers = vec![None, None, None];
        layers[0] = Some(ScoreLayer {
            values: Tensor::new(shape0.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            active: Tensor::ones(shape0),
        });
        layers[2] = Some(ScoreLayer {
            values: Tensor::new(shape2.clone(), vec![10.0, 20.0, 30.0, 40.0]).unwrap(),
            active: Tensor::ones(shape2),
        });
        let scores = ScoreMap { layers };
        let full = Mask::full(&spec);

        // Nothing pruned: ratio 0.
        assert_eq!(prune_cut_ratio(&scores, &full, &full, &spec), 0.0);

        // Prune the whole smallest-score layer: ratio >= 1.
        let mut killed = full.clone();
        killed.weights[0] = Some(Tensor::zeros(vec![2, 2]));
        let r = prune_cut_ratio(&scores, &full, &killed, &spec);
        assert!(r >= 1.0, "ratio {r}");

        // Prune one small parameter: ratio < 1.
        let mut nibble = full.clone();
        nibble.weights[0] = Some(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap());
        let r = prune_cut_ratio(&scores, &full, &nibble, &spec);
        assert!((r - 0.1).abs() < 1e-12, "1/10 of the min layer total, got {r}");
    }

    #[test]
    fn synflow_reaches_max_compression_on_small_net() {
        let spec = NetworkSpec::new(
            vec![4],
            vec![
                LayerKind::Dense { out_dim: 6 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 5 },
                LayerKind::Relu,
                LayerKind::Dense { out_dim: 3 },
            ],
        )
        .unwrap();
        let params = build_network(&spec, 3).unwrap();
        let rho_max = crate::netgraph::max_compression(&spec).unwrap();
        let ctx = ScoringContext::data_free(ScorerKind::SynFlow, 0);
        let grid = default_rho_grid(rho_max);
        let cc =
            critical_compression(&spec, &params, &ctx, 100, ScheduleKind::Exponential, &grid)
                .unwrap();
        assert_eq!(cc, rho_max);

        // At rho_max exactly one parameter survives per layer.
        let schedule = CompressionSchedule::new(rho_max, 100, ScheduleKind::Exponential).unwrap();
        let report = prune(&spec, &params, &ctx, &schedule).unwrap();
        for (_, _, rem) in layer_param_counts(&spec, &report.final_mask) {
            assert_eq!(rem, 1);
        }
    }

    #[test]
    fn random_seed_varies_per_iteration() {
        let spec = NetworkSpec::new(vec![8], vec![LayerKind::Dense { out_dim: 8 }]).unwrap();
        let params = build_network(&spec, 0).unwrap();
        let ctx = ScoringContext::data_free(ScorerKind::Random, 5);
        let schedule = CompressionSchedule::new(4.0, 3, ScheduleKind::Exponential).unwrap();
        let a = prune(&spec, &params, &ctx, &schedule).unwrap();
        let b = prune(&spec, &params, &ctx, &schedule).unwrap();
        // Deterministic per seed.
        assert_eq!(a.final_mask, b.final_mask);
        // Different seed, different outcome (64 params, overwhelmingly likely).
        let ctx2 = ScoringContext::data_free(ScorerKind::Random, 6);
        let c = prune(&spec, &params, &ctx2, &schedule).unwrap();
        assert_ne!(a.final_mask, c.final_mask);
    }

    proptest! {
        #[test]
        fn select_mask_keeps_exact_count(values in proptest::collection::vec(-10.0f64..10.0, 12), keep in 1usize..12) {
            let spec = NetworkSpec::new(vec![3], vec![LayerKind::Dense { out_dim: 4 }]).unwrap();
            let scores = single_layer_scores(&spec, values);
            let mask = select_mask_count(&spec, &scores, keep).unwrap();
            prop_assert_eq!(mask.remaining(), keep);
        }

        #[test]
        fn iterated_masks_nest(seed in 0u64..500, rho in 1.5f64..12.0, iters in 1usize..6) {
            let spec = NetworkSpec::new(
                vec![4],
                vec![LayerKind::Dense { out_dim: 5 }, LayerKind::Relu, LayerKind::Dense { out_dim: 3 }],
            ).unwrap();
            let params = build_network(&spec, seed).unwrap();
            let ctx = ScoringContext::data_free(ScorerKind::Random, seed);
            let schedule = CompressionSchedule::new(rho, iters, ScheduleKind::Exponential).unwrap();
            let report = prune(&spec, &params, &ctx, &schedule).unwrap();
            let mut prev = spec.prunable_param_count();
            for rec in &report.iterations {
                let rem: usize = rec.per_layer_remaining.iter().map(|&(_, _, r)| r).sum();
                prop_assert!(rem <= prev);
                prev = rem;
            }
            prop_assert_eq!(report.final_remaining, (spec.prunable_param_count() as f64 / rho).ceil() as usize);
        }
    }
}
