use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use synthsight_core::evaluation::ReportLayout;
use synthsight_core::generation::CostMode;
use synthsight_core::orchestrator::{
    apply_override, parse_config_table, read_config_table, report_cli, run_experiment, run_sweep,
    sweep_preset, RunOptions, RunOutcome, Stage, StageStatus, SweepAxis, SWEEP_PRESETS,
};

#[derive(Parser)]
#[command(
    name = "synthsight",
    version,
    about = "Text classification with generated-image features"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (sweep: sweep directory; report: where to write the tables).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Train and evaluate a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Refuse remote providers.
    #[arg(long, global = true)]
    offline: bool,
    /// How ledger costs are totalled: measured or estimated.
    #[arg(long, global = true)]
    cost_mode: Option<CostMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Build prompts.
    Prompt,
    /// Build prompts and generate images.
    Generate,
    /// Run every stage through embeddings.
    Embed,
    /// Run every stage through training.
    Train,
    /// Run every stage through evaluation and print the report.
    Eval,
    /// Run all stages and print the report.
    Run,
    /// Run a grid of experiments over config axes.
    Sweep {
        /// Named grid.
        #[arg(long, conflicts_with = "axis")]
        preset: Option<String>,
        /// Axis as key=v1,v2,... (repeatable).
        #[arg(long)]
        axis: Vec<String>,
        /// Table layout for the combined report.
        #[arg(long)]
        layout: Option<ReportLayout>,
        /// Cells run at once.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Consolidate finished run or sweep directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        layout: Option<ReportLayout>,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

fn toml_string(p: &Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

/// Reads the config and applies the global flags on top of it.
fn load_table(g: &Global, with_out: bool) -> Result<(toml::Table, PathBuf)> {
    let path = g.config.as_deref().context("--config is required")?;
    let mut table = read_config_table(path)?;
    if with_out {
        if let Some(out) = &g.out {
            apply_override(&mut table, "output_dir", toml_string(&absolute(out)?))?;
        }
    }
    if let Some(seed) = g.seed {
        apply_override(
            &mut table,
            "seeds",
            toml::Value::Array(vec![toml::Value::Integer(seed as i64)]),
        )?;
    }
    if let Some(mode) = g.cost_mode {
        apply_override(
            &mut table,
            "evaluation.cost_mode",
            toml::Value::String(mode.to_string()),
        )?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((table, absolute(&base)?))
}

fn print_outcome(o: &RunOutcome) {
    println!("run: {}", o.run_dir.display());
    for stage in Stage::ALL {
        let Some(status) = o.manifest.stages.get(&stage) else {
            continue;
        };
        let how = if o.executed.contains(&stage) {
            "executed"
        } else {
            "verified"
        };
        let state = match status {
            StageStatus::Pending => continue,
            StageStatus::Done { .. } => how,
            StageStatus::Failed { .. } => "failed",
        };
        println!("  {stage:<11} {state}");
    }
    let c = &o.calls;
    println!(
        "  calls: generation {}, text embedding {}, image embedding {}, rewrites {}",
        c.generation, c.text_embedding, c.image_embedding, c.rewrites
    );
}

fn stage_command(g: &Global, stop_after: Option<Stage>, show_report: bool) -> Result<()> {
    let (table, base) = load_table(g, true)?;
    let cfg = parse_config_table(table, &base)?;
    let outcome = run_experiment(
        &cfg,
        &RunOptions {
            offline: g.offline,
            stop_after,
        },
    )?;
    print_outcome(&outcome);
    if show_report {
        let report = std::fs::read_to_string(outcome.run_dir.join("report.txt"))?;
        print!("\n{report}");
    }
    Ok(())
}

fn sweep(
    g: &Global,
    preset: Option<&str>,
    axis: &[String],
    layout: Option<ReportLayout>,
    workers: usize,
) -> Result<()> {
    let (table, base) = load_table(g, false)?;
    let (axes, default_layout) = match preset {
        Some(name) => {
            let Some((axes, l)) = sweep_preset(name) else {
                bail!(
                    "unknown sweep preset `{name}` (expected one of {})",
                    SWEEP_PRESETS.join(", ")
                );
            };
            (axes, Some(l))
        }
        None if axis.is_empty() => bail!("give --preset or at least one --axis"),
        None => (
            axis.iter()
                .map(|a| SweepAxis::parse(a))
                .collect::<Result<Vec<_>, _>>()?,
            None,
        ),
    };
    let layout = layout
        .or(default_layout)
        .context("--layout is required with custom axes")?;
    let out = match &g.out {
        Some(o) => absolute(o)?,
        None => {
            let cfg = parse_config_table(table.clone(), &base)?;
            let dir = cfg.output_dir();
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            dir.with_file_name(format!("{name}-sweep"))
        }
    };
    let opts = RunOptions {
        offline: g.offline,
        stop_after: None,
    };
    let result = run_sweep(&table, &base, &axes, layout, &out, &opts, workers)?;
    println!("sweep: {}", result.out_dir.display());
    for c in &result.cells {
        match &c.error {
            Some(e) => println!("  {:<40} FAILED {e}", c.id),
            None if c.executed.is_empty() => println!("  {:<40} up to date", c.id),
            None => println!(
                "  {:<40} ran {} ({} calls)",
                c.id,
                c.executed.join(","),
                c.calls
            ),
        }
    }
    if let Some(r) = &result.report {
        print!("\n{}", r.text);
    }
    if let Some(e) = &result.report_error {
        println!("combined table unavailable: {e}");
    }
    if !result.failed().is_empty() {
        bail!(
            "{} of {} cells failed",
            result.failed().len(),
            result.cells.len()
        );
    }
    Ok(())
}

fn report(g: &Global, dirs: &[PathBuf], layout: Option<ReportLayout>) -> Result<()> {
    let consolidated = report_cli(dirs, layout)?;
    print!("{}", consolidated.text());
    for run in &consolidated.runs {
        for h in &run.heatmaps {
            println!("heatmap {}: {}", run.experiment_id, h.display());
        }
    }
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.txt"), consolidated.text())?;
        std::fs::write(out.join("report.tsv"), &consolidated.rendered.tsv)?;
        std::fs::write(
            out.join("records.jsonl"),
            consolidated.rendered.records_jsonl(),
        )?;
    }
    if consolidated.runs.is_empty() {
        bail!("no finished runs among the given directories");
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Prompt => stage_command(g, Some(Stage::Prompts), false),
        Command::Generate => stage_command(g, Some(Stage::Images), false),
        Command::Embed => stage_command(g, Some(Stage::Embeddings), false),
        Command::Train => stage_command(g, Some(Stage::Training), false),
        Command::Eval => stage_command(g, Some(Stage::Evaluation), true),
        Command::Run => stage_command(g, None, true),
        Command::Sweep {
            preset,
            axis,
            layout,
            workers,
        } => sweep(g, preset.as_deref(), axis, *layout, *workers),
        Command::Report { dirs, layout } => report(g, dirs, *layout),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
