use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ugmm_nn::cli::{self, InspectArgs};
use ugmm_nn::data::DatasetName;
use ugmm_nn::Error;

#[derive(Parser)]
#[command(name = "ugmm-nn", version, about = "Gaussian-mixture neuron networks: train, evaluate, audit, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Write artifacts here instead of the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Test accuracy of a saved checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset name: iris or mnist.
        #[arg(long)]
        data: DatasetName,
        /// Dataset location, when not the one recorded in the checkpoint.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Finite-difference audit of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest layer audit shape as BATCHxINPUTSxNEURONS.
        #[arg(long, default_value = "3x4x5", value_parser = parse_sizes)]
        sizes: (usize, usize, usize),
        /// Random instances per audit family.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Export one neuron's mixture density as CSV and SVG.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        neuron: usize,
        #[arg(long, allow_negative_numbers = true)]
        min: f64,
        #[arg(long, allow_negative_numbers = true)]
        max: f64,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train two configs on the same dataset and tabulate their accuracy.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, short)]
        quiet: bool,
    },
}

fn parse_sizes(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [b, n, m] => Ok((b, n, m)),
        _ => Err(format!("expected BATCHxINPUTSxNEURONS, got `{s}`")),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out, quiet } => {
            let run = cli::cmd_train(&config, out.as_deref(), !quiet)?;
            eprintln!("wrote {} and {}", run.checkpoint.display(), run.report.display());
            println!("test_accuracy={}", run.final_accuracy);
        }
        Command::Eval { ckpt, data, path } => {
            let acc = cli::cmd_eval(&ckpt, data, path.as_deref())?;
            println!("test_accuracy={acc}");
        }
        Command::Gradcheck { seed, sizes, instances } => {
            let report = cli::cmd_gradcheck(seed, sizes, instances)?;
            println!(
                "layer audits:   {} instances, {} entries, max error {:.3e}",
                report.layer_instances, report.layer.entries, report.layer.max_error
            );
            println!(
                "network audits: {} instances, {} entries, max error {:.3e}",
                report.network_instances, report.network.entries, report.network.max_error
            );
            if report.passed() {
                println!("PASS max_rel_error={:e}", report.max_error());
            } else {
                let worst = if report.layer.max_error >= report.network.max_error {
                    &report.layer.worst
                } else {
                    &report.network.worst
                };
                println!("FAIL max_rel_error={:e} at {worst}", report.max_error());
                return Err(Error::Numerical("gradient audit failed".into()));
            }
        }
        Command::Inspect { ckpt, layer, neuron, min, max, points, out } => {
            let args = InspectArgs { layer, neuron, min, max, points };
            let written = cli::cmd_inspect(&ckpt, args, out.as_deref())?;
            println!("{}", written.csv.display());
            println!("{}", written.svg.display());
        }
        Command::Compare { a, b, quiet } => {
            print!("{}", cli::cmd_compare(&a, &b, !quiet)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's usage errors would otherwise exit 2, which means a data error here.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
