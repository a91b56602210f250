//! Command-line interface for the pruning and verification engine.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use synflow_core::autodiff::LossKind;
use synflow_core::conservation::{
    check_neuron_conservation, gradient_flow_conservation, layer_score_size_law,
};
use synflow_core::harness::config::{ExperimentConfig, OutputFormat, ScheduleSpec, ScorerSpec};
use synflow_core::harness::dataset::gen_synthetic;
use synflow_core::harness::report::{
    conservation_cuts_csv, conservation_units_csv, emit_prune, emit_sweep, flow_trace_csv,
    prune_trajectory_csv, size_law_csv, to_json_string, write_file, PruneReportDoc,
};
use synflow_core::harness::suite::{
    conservation_architectures, conservation_objectives, run_verifiers,
};
use synflow_core::harness::sweep::{imp_toy, make_context, pass_count, run_sweep};
use synflow_core::harness::train::Hyperparams;
use synflow_core::netgraph::{build_network, layer_param_counts, LayerKind, Mask, NetworkSpec};
use synflow_core::pruner::{prune, CompressionSchedule};
use synflow_core::scoring::saliency;
use synflow_core::Result;

#[derive(Parser)]
#[command(
    name = "synflow",
    about = "Pruning at initialization: synflow, snip, grasp, magnitude, random",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: csv or json.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one prune-at-initialization pass and report its trajectory.
    Prune {
        #[command(flatten)]
        common: CommonArgs,
        /// Scorer: random | magnitude | snip | grasp | synflow.
        #[arg(long)]
        scorer: Option<String>,
        /// Target compression ratio.
        #[arg(long)]
        rho: Option<f64>,
        /// Prune-loop iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Schedule: linear | exponential.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Sweep scorers x compression grid x seeds, training each cell.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the conservation and oracle verification battery.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Toy iterative magnitude pruning (train, prune, rewind).
    Imp {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of train-prune-rewind cycles.
        #[arg(long, default_value_t = 3)]
        cycles: usize,
        /// Total compression ratio across all cycles.
        #[arg(long)]
        rho: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prune { common, scorer, rho, iterations, schedule } => {
            cmd_prune(common, scorer, rho, iterations, schedule)
        }
        Command::Sweep { common } => cmd_sweep(common),
        Command::Verify { common } => cmd_verify(common),
        Command::Imp { common, cycles, rho } => cmd_imp(common, cycles, rho),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| synflow_core::Error::config("this command needs --config <path>"))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    if let Some(format) = &common.format {
        config.format = format.parse()?;
    }
    Ok(config)
}

fn cmd_prune(
    common: CommonArgs,
    scorer: Option<String>,
    rho: Option<f64>,
    iterations: Option<usize>,
    schedule: Option<String>,
) -> Result<bool> {
    let mut config = load_config(&common)?;
    if let Some(s) = scorer {
        config.prune.scorer = s.parse::<ScorerSpec>()?;
    }
    if let Some(r) = rho {
        config.prune.rho = r;
    }
    if let Some(n) = iterations {
        config.prune.iterations = n;
    }
    if let Some(s) = schedule {
        config.prune.schedule = s.parse::<ScheduleSpec>()?;
    }
    config.validate()?;

    let spec = config.network.to_spec()?;
    let params = build_network(&spec, config.seed)?;
    let dataset =
        gen_synthetic(config.data.classes, config.data.dim, config.data.samples, config.data.seed)?;
    let kind = config.prune.scorer.into();
    let ctx = make_context(kind, &config, &dataset, &spec, config.seed)?;
    let sched = CompressionSchedule::new(
        config.prune.rho,
        config.prune.iterations,
        config.prune.schedule.into(),
    )?;
    let report = prune(&spec, &params, &ctx, &sched)?;

    println!(
        "pruned {} -> {} parameters (rho {}, {} iterations, {} scorer)",
        report.total_params,
        report.final_remaining,
        report.rho,
        config.prune.iterations,
        report.scorer
    );
    println!(
        "collapsed: {}{}",
        report.collapsed,
        if report.collapsed {
            format!(" (layers {:?})", report.collapsed_layers)
        } else {
            String::new()
        }
    );
    println!(
        "example passes: {} (convention: {})",
        report.example_passes,
        pass_count(kind, config.prune.iterations, config.scoring_examples())
    );
    for (layer, total, remaining) in layer_param_counts(&spec, &report.final_mask) {
        println!("  layer {layer}: {remaining}/{total}");
    }

    if let Some(dir) = &config.out_dir {
        let mut paths = emit_prune(&report, config.format, dir)?;
        // Keep both views around: the CSV trajectory and the JSON document
        // with the kept-index mask.
        match config.format {
            OutputFormat::Csv => {
                let doc = PruneReportDoc::from_report(&report);
                paths.push(write_file(dir, "prune.json", &to_json_string(&doc)?)?);
            }
            OutputFormat::Json => {
                paths.push(write_file(dir, "prune.csv", &prune_trajectory_csv(&report))?);
            }
        }
        for p in paths {
            println!("wrote {}", p.display());
        }
    }
    Ok(true)
}

fn cmd_sweep(common: CommonArgs) -> Result<bool> {
    let config = load_config(&common)?;
    config.validate()?;
    let report = run_sweep(&config)?;
    let failures = report.cells.iter().filter(|c| c.error.is_some()).count();
    let collapsed = report.cells.iter().filter(|c| c.collapsed).count();
    println!(
        "sweep complete: {} cells, {} collapsed, {} failed",
        report.cells.len(),
        collapsed,
        failures
    );
    if let Some(dir) = &config.out_dir {
        for p in emit_sweep(&report, config.format, dir)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(failures == 0)
}

fn cmd_verify(common: CommonArgs) -> Result<bool> {
    let seed = common.seed.unwrap_or(0);
    let report = run_verifiers(seed)?;
    for item in &report.items {
        println!(
            "{} {:<55} {}",
            if item.passed { "PASS" } else { "FAIL" },
            item.name,
            item.detail
        );
    }

    if let Some(dir) = &common.out {
        write_file(dir, "verify.json", &to_json_string(&report)?)?;
        // Figure-style CSV exports from a representative architecture.
        let nets = conservation_architectures(seed);
        let net = &nets[3]; // conv+pool
        let mask = Mask::full(&net.spec);
        let (_, objective) = conservation_objectives(&net.spec, seed)
            .into_iter()
            .nth(1)
            .expect("synflow objective");
        let conservation = check_neuron_conservation(&net.spec, &net.params, &mask, &objective)?;
        write_file(dir, "units.csv", &conservation_units_csv(&conservation))?;
        write_file(dir, "cuts.csv", &conservation_cuts_csv(&conservation))?;
        let scores = saliency(&net.spec, &net.params, &mask, &objective)?;
        write_file(dir, "size_law.csv", &size_law_csv(&layer_score_size_law(&net.spec, &scores)))?;

        let flow_spec = NetworkSpec::new(
            vec![4],
            vec![LayerKind::Dense { out_dim: 6 }, LayerKind::Dense { out_dim: 3 }],
        )?;
        let flow_params = build_network(&flow_spec, seed + 11)?;
        let data = gen_synthetic(3, 4, 48, seed + 12)?;
        let batch = data.scoring_batch(48, &flow_spec.input_shape)?;
        let trace =
            gradient_flow_conservation(&flow_spec, &flow_params, &batch, LossKind::Mse, 500, 1e-3)?;
        write_file(dir, "flow_trace.csv", &flow_trace_csv(&trace))?;
        println!("wrote reports to {}", dir.display());
    }

    println!(
        "{} of {} verifiers passed",
        report.items.iter().filter(|i| i.passed).count(),
        report.items.len()
    );
    Ok(report.all_passed())
}

fn cmd_imp(common: CommonArgs, cycles: usize, rho: Option<f64>) -> Result<bool> {
    let config = load_config(&common)?;
    config.validate()?;
    let spec = config.network.to_spec()?;
    let params = build_network(&spec, config.seed)?;
    let dataset =
        gen_synthetic(config.data.classes, config.data.dim, config.data.samples, config.data.seed)?;
    let total_rho = rho.unwrap_or(config.prune.rho);
    if total_rho <= 1.0 {
        return Err(synflow_core::Error::domain("imp needs a compression ratio above 1"));
    }
    let per_cycle = total_rho.powf(1.0 / cycles as f64);
    let hyper: Hyperparams = config.train.clone();
    let report = imp_toy(&spec, &params, &dataset, cycles, per_cycle, &hyper)?;
    for c in &report.cycles {
        println!(
            "cycle {}: rho {:.3}, remaining {}, collapsed {}, trained accuracy {:.4}",
            c.cycle, c.rho, c.remaining, c.collapsed, c.trained_accuracy
        );
    }
    println!("final ticket accuracy: {:.4}", report.final_accuracy);

    if let Some(dir) = &config.out_dir {
        let mut csv = String::from("cycle,rho,remaining,collapsed,trained_accuracy\n");
        for c in &report.cycles {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                c.cycle, c.rho, c.remaining, c.collapsed, c.trained_accuracy
            ));
        }
        write_file(dir, "imp.csv", &csv)?;
        println!("wrote {}", dir.join("imp.csv").display());
    }
    let final_collapsed = report.cycles.last().map(|c| c.collapsed).unwrap_or(false);
    Ok(!final_collapsed)
}
