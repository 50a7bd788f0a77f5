//! Command-line front end: single runs, sweep grids, report regeneration,
//! and fixture rebuilding.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ecdnn::config::ExperimentSpec;
use ecdnn::experiment;
use ecdnn::harness::Strategy;
use ecdnn::metrics::Variant;

#[derive(Parser)]
#[command(
    name = "ecdnn",
    version,
    about = "Compare parallel neural-net training strategies: sequential, \
             independent ensembles, model averaging, and ensemble-compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration from an experiment file.
    ///
    /// Sweep axes with a single value are used directly; wider axes must be
    /// pinned with --strategy / --tau / --workers / --seed.
    Run {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Strategy to run (s-dnn, e-dnn, ma-dnn, ec-dnn).
        #[arg(long)]
        strategy: Option<String>,
        /// Communication period.
        #[arg(long)]
        tau: Option<u64>,
        /// Worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root (overrides ECDNN_OUT and the spec's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every strategy over the full sweep grid and write the summary,
    /// table and charts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate tables and charts of an existing sweep directory from its
    /// stored files.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Sweep directory; defaults to `<output root>/<experiment name>`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Rebuild the mirror-basin counterexample fixture.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "kind": e.kind(),
                "error": e.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> ecdnn::Result<()> {
    match command {
        Command::Run {
            config,
            strategy,
            tau,
            workers,
            seed,
            out,
        } => run_one(&config, strategy, tau, workers, seed, out),
        Command::Sweep { config, out } => {
            let spec = ExperimentSpec::from_path(&config)?;
            let root = experiment::resolve_output_root(out.as_deref(), &spec);
            let summary = experiment::run_experiment(&spec, &root)?;
            print!("{}", experiment::render_table(&summary));
            println!("wrote {}", root.join(&spec.name).display());
            Ok(())
        }
        Command::Report { config, dir } => {
            let spec = ExperimentSpec::from_path(&config)?;
            let sweep_dir = dir.unwrap_or_else(|| {
                experiment::resolve_output_root(None, &spec).join(&spec.name)
            });
            let summary = experiment::report(&spec, &sweep_dir)?;
            print!("{}", experiment::render_table(&summary));
            println!("regenerated {}", sweep_dir.display());
            Ok(())
        }
        Command::Fixtures { out } => {
            let fixture = ecdnn::fixtures::build_mirror_fixture(&out)?;
            println!(
                "mirror fixture written to {}: averaged-model loss {:.4}, member mean {:.4} \
                 (margin {:.4} nats)",
                out.display(),
                fixture.averaged_loss,
                fixture.mean_member_loss,
                fixture.averaged_loss - fixture.mean_member_loss
            );
            Ok(())
        }
    }
}

fn run_one(
    config: &std::path::Path,
    strategy: Option<String>,
    tau: Option<u64>,
    workers: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> ecdnn::Result<()> {
    let spec = ExperimentSpec::from_path(config)?;
    let strategy: Strategy = match strategy {
        Some(s) => s.parse()?,
        None => pin("train.strategies", &spec.train.strategies)?,
    };
    let tau = match tau {
        Some(t) => t,
        None => pin("sweep.taus", &spec.sweep.taus)?,
    };
    let workers = match workers {
        Some(w) => w,
        None => pin("sweep.workers", &spec.sweep.workers)?,
    };
    let seed = match seed {
        Some(s) => s,
        None => pin("sweep.seeds", &spec.sweep.seeds)?,
    };

    let cfg = spec.to_train_config(strategy, tau, workers, seed)?;
    let data = spec.dataset.load()?;
    let root = experiment::resolve_output_root(out.as_deref(), &spec).join(&spec.name);
    let (record, dir) = experiment::run_single(&cfg, &data, &root)?;
    println!(
        "{}: global error {:.4}, best-local error {:.4} (worker {}), simulated time {}, \
         host {:.2}s",
        record.run_id,
        record.final_error(Variant::Global),
        record.final_error(Variant::BestLocal),
        record.final_report.best_worker,
        record.final_report.sim_time,
        record.final_report.host_seconds,
    );
    println!("wrote {}", dir.display());
    Ok(())
}

/// Use the sole value of a sweep axis, or ask for an explicit flag.
fn pin<T: Copy>(what: &str, values: &[T]) -> ecdnn::Result<T> {
    if values.len() == 1 {
        Ok(values[0])
    } else {
        Err(ecdnn::Error::Config(format!(
            "{what} has {} entries; pin one with the matching command-line flag",
            values.len()
        )))
    }
}
