use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use salora_cli::config::ExperimentConfig;
use salora_cli::{cmd_analyze, cmd_finetune, cmd_gen_world, cmd_infer, cmd_selftest};
use salora_core::error::{Error, Result};
use salora_core::train::{fmt_sig6, Method};

/// Safety-alignment preserved low-rank adaptation, desk scale.
#[derive(Parser)]
#[command(name = "salora", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, clap::Args)]
struct CommonArgs {
    /// Experiment config file (key = value sections); defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the fine-tuning method (lora | pissa | salora | salora_no_init).
    #[arg(long)]
    method: Option<String>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the command's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world: model, datasets, planted ground truth.
    GenWorld(CommonArgs),
    /// Fine-tune on the stored world and save the adapter checkpoint.
    Finetune(CommonArgs),
    /// Assemble effective weights from a saved adapter and run a batch.
    Infer(CommonArgs),
    /// Probe-drift and gradient-overlap reports for a finished run.
    Analyze(CommonArgs),
    /// Run the built-in verification battery.
    Selftest,
}

fn load_config(args: &CommonArgs, out_is_world: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(method) = &args.method {
        cfg.method = Method::parse(method)?;
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &args.out {
        if out_is_world {
            cfg.set_world_dir(out.clone());
        } else {
            cfg.set_run_dir(out.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenWorld(args) => {
            let cfg = load_config(&args, true)?;
            let summary = cmd_gen_world(&cfg)?;
            println!(
                "world written to {} (gamma = {})",
                summary.world_dir.display(),
                fmt_sig6(summary.gamma)
            );
            Ok(true)
        }
        Command::Finetune(args) => {
            let cfg = load_config(&args, false)?;
            let summary = cmd_finetune(&cfg)?;
            println!(
                "{}: loss {} -> {} over {} steps",
                summary.method.name(),
                fmt_sig6(summary.initial_loss),
                fmt_sig6(summary.final_loss),
                summary.steps
            );
            println!("adapter checkpoint: {}", summary.adapter_dir.display());
            println!("loss curve: {}", summary.loss_csv.display());
            Ok(true)
        }
        Command::Infer(args) => {
            let cfg = load_config(&args, false)?;
            let summary = cmd_infer(&cfg)?;
            println!(
                "wrote outputs for {} inputs to {}",
                summary.batch,
                summary.outputs.display()
            );
            Ok(true)
        }
        Command::Analyze(args) => {
            let cfg = load_config(&args, false)?;
            let summary = cmd_analyze(&cfg)?;
            print!("{}", summary.render());
            println!("drift report: {}", summary.drift_csv.display());
            println!("bound report: {}", summary.prop1_csv.display());
            Ok(true)
        }
        Command::Selftest => {
            let mut all_ok = true;
            for line in cmd_selftest() {
                let status = if line.pass { "PASS" } else { "FAIL" };
                println!("{status}  {}  ({})", line.name, line.detail);
                all_ok &= line.pass;
            }
            Ok(all_ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn error_line(e: &Error) -> String {
    // Single machine-parsable line: `<category>: <message>`.
    e.to_string().replace('\n', " ")
}
