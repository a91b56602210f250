//! Report emission: JSON documents and CSV tables with stable field and
//! column ordering, written deterministically so identical runs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conservation::{ConservationReport, FlowConservationTrace, LayerStat};
use crate::error::{Error, Result};
use crate::harness::config::OutputFormat;
use crate::netgraph::Mask;
use crate::pruner::PruneReport;

/// JSON mirror of a prune run. The mask is stored as kept flat indices per
/// prunable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReportDoc {
    pub scorer: String,
    pub rho: f64,
    pub schedule: String,
    pub total_params: usize,
    pub final_remaining: usize,
    pub collapsed: bool,
    pub collapsed_layers: Vec<usize>,
    pub example_passes: u64,
    pub iterations: Vec<IterationDoc>,
    pub kept: Vec<LayerKept>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDoc {
    pub iteration: usize,
    pub keep_fraction: f64,
    pub keep_count: usize,
    pub threshold: f64,
    pub prune_size: f64,
    pub min_cut_size: f64,
    /// None when the ratio is not finite (a layer total reached zero).
    pub prune_cut_ratio: Option<f64>,
    pub per_layer_remaining: Vec<(usize, usize, usize)>,
    pub example_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKept {
    pub layer: usize,
    pub indices: Vec<usize>,
}

impl PruneReportDoc {
    pub fn from_report(report: &PruneReport) -> Self {
        let kept = mask_to_kept(&report.final_mask);
        PruneReportDoc {
            scorer: report.scorer.to_string(),
            rho: report.rho,
            schedule: report.schedule.name().to_string(),
            total_params: report.total_params,
            final_remaining: report.final_remaining,
            collapsed: report.collapsed,
            collapsed_layers: report.collapsed_layers.clone(),
            example_passes: report.example_passes,
            iterations: report
                .iterations
                .iter()
                .map(|it| IterationDoc {
                    iteration: it.iteration,
                    keep_fraction: it.keep_fraction,
                    keep_count: it.keep_count,
                    threshold: it.threshold,
                    prune_size: it.prune_size,
                    min_cut_size: it.min_cut_size,
                    prune_cut_ratio: Some(it.prune_cut_ratio).filter(|r| r.is_finite()),
                    per_layer_remaining: it.per_layer_remaining.clone(),
                    example_passes: it.example_passes,
                })
                .collect(),
            kept,
        }
    }
}

fn mask_to_kept(mask: &Mask) -> Vec<LayerKept> {
    mask.weights
        .iter()
        .enumerate()
        .filter_map(|(layer, m)| {
            m.as_ref().map(|t| LayerKept {
                layer,
                indices: t
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, _)| i)
                    .collect(),
            })
        })
        .collect()
}

/// Per-layer trajectory CSV: iteration,layer,remaining,total,prune_size,min_cut_size.
pub fn prune_trajectory_csv(report: &PruneReport) -> String {
    let mut out = String::from("iteration,layer,remaining,total,prune_size,min_cut_size\n");
    for it in &report.iterations {
        for &(layer, total, remaining) in &it.per_layer_remaining {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                it.iteration, layer, remaining, total, it.prune_size, it.min_cut_size
            );
        }
    }
    out
}

/// One sweep cell: (scorer, ρ, seed) with its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub scorer: String,
    pub rho: f64,
    pub seed: u64,
    pub collapsed: bool,
    pub collapsed_layers: Vec<usize>,
    /// Test accuracy after training; None when the run failed outright.
    pub accuracy: Option<f64>,
    pub remaining: usize,
    pub total: usize,
    pub per_layer_remaining: Vec<(usize, usize, usize)>,
    pub example_passes: u64,
    pub diverged: bool,
    /// Failure message when the cell crashed instead of completing.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    /// Cells sorted by (scorer, ρ, seed) for stable emission.
    pub fn sorted(&self) -> SweepReport {
        let mut cells = self.cells.clone();
        cells.sort_by(|a, b| {
            a.scorer
                .cmp(&b.scorer)
                .then(a.rho.partial_cmp(&b.rho).expect("finite rho"))
                .then(a.seed.cmp(&b.seed))
        });
        SweepReport { cells }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scorer,rho,seed,collapsed,collapsed_layers,accuracy,remaining,total,example_passes,diverged,error\n",
        );
        for c in &self.sorted().cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.scorer,
                c.rho,
                c.seed,
                c.collapsed,
                join_usize(&c.collapsed_layers),
                c.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                c.remaining,
                c.total,
                c.example_passes,
                c.diverged,
                c.error.clone().unwrap_or_default()
            );
        }
        out
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Unit-conservation CSV matching the (S_in, S_out) scatter axes.
pub fn conservation_units_csv(report: &ConservationReport) -> String {
    let mut out = String::from("layer,unit,s_in,s_out,residual,excluded\n");
    for u in &report.units {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            u.layer, u.unit, u.s_in, u.s_out, u.residual, u.excluded
        );
    }
    out
}

/// Cut-conservation CSV: one row per layer-aligned cut.
pub fn conservation_cuts_csv(report: &ConservationReport) -> String {
    let mut out = String::from("layer,cut_total,separating,residual_vs_output\n");
    for c in &report.cuts {
        let _ = writeln!(out, "{},{},{},{}", c.layer, c.cut_total, c.separating, c.residual_vs_output);
    }
    out
}

/// Size-law CSV matching the (average score, 1/size) axes.
pub fn size_law_csv(stats: &[LayerStat]) -> String {
    let mut out = String::from("layer,size,total_score,average_score,inv_size\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{},{},{}", s.layer, s.size, s.total, s.average, s.inv_size);
    }
    out
}

/// Gradient-flow trace CSV: step,layer,sq_norm.
pub fn flow_trace_csv(trace: &FlowConservationTrace) -> String {
    let mut out = String::from("step,layer,sq_norm\n");
    for (step, row) in trace.sq_norms.iter().enumerate() {
        for (i, &layer) in trace.layers.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", step, layer, row[i]);
        }
    }
    out
}

/// Write a string to `dir/name`, creating the directory tree.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(path)
}

/// Pretty JSON with a trailing newline. Field order follows the struct
/// definitions, so the bytes are stable across runs.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("json serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Emit a prune report as `prune.json` or `prune.csv` under `dir`.
pub fn emit_prune(report: &PruneReport, format: OutputFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    match format {
        OutputFormat::Json => {
            let doc = PruneReportDoc::from_report(report);
            Ok(vec![write_file(dir, "prune.json", &to_json_string(&doc)?)?])
        }
        OutputFormat::Csv => {
            Ok(vec![write_file(dir, "prune.csv", &prune_trajectory_csv(report))?])
        }
    }
}

/// Emit a sweep report as `sweep.json` or `sweep.csv` under `dir`.
pub fn emit_sweep(report: &SweepReport, format: OutputFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    match format {
        OutputFormat::Json => {
            Ok(vec![write_file(dir, "sweep.json", &to_json_string(&report.sorted())?)?])
        }
        OutputFormat::Csv => Ok(vec![write_file(dir, "sweep.csv", &report.to_csv())?]),
    }
}

/// Parse a sweep report back from its JSON emission.
pub fn parse_sweep_json(text: &str) -> Result<SweepReport> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("sweep json parse failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_sweep() -> SweepReport {
        SweepReport {
            cells: vec![
                SweepCell {
                    scorer: "synflow".into(),
                    rho: 10.0,
                    seed: 1,
                    collapsed: false,
                    collapsed_layers: vec![],
                    accuracy: Some(0.85),
                    remaining: 100,
                    total: 1000,
                    per_layer_remaining: vec![(0, 600, 70), (2, 400, 30)],
                    example_passes: 100,
                    diverged: false,
                    error: None,
                },
                SweepCell {
                    scorer: "magnitude".into(),
                    rho: 10.0,
                    seed: 1,
                    collapsed: true,
                    collapsed_layers: vec![2],
                    accuracy: Some(0.1),
                    remaining: 100,
                    total: 1000,
                    per_layer_remaining: vec![(0, 600, 100), (2, 400, 0)],
                    example_passes: 0,
                    diverged: false,
                    error: None,
                },
            ],
        }
    }

    #[test]
    fn sweep_json_roundtrip() {
        let report = sample_sweep().sorted();
        let text = to_json_string(&report).unwrap();
        let back = parse_sweep_json(&text).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn csv_has_documented_header_and_sorted_rows() {
        let csv = sample_sweep().to_csv();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("scorer,rho,seed,"));
        // magnitude sorts before synflow.
        assert!(lines.next().unwrap().starts_with("magnitude,"));
        assert!(lines.next().unwrap().starts_with("synflow,"));
    }

    #[test]
    fn emission_is_byte_deterministic() {
        let dir = std::env::temp_dir().join(format!("synflow-report-test-{}", std::process::id()));
        let report = sample_sweep();
        let paths = emit_sweep(&report, OutputFormat::Json, &dir).unwrap();
        let first = std::fs::read(&paths[0]).unwrap();
        let paths = emit_sweep(&report, OutputFormat::Json, &dir).unwrap();
        let second = std::fs::read(&paths[0]).unwrap();
        assert_eq!(first, second);
        std::fs::remove_dir_all(&dir).ok();
    }
}
