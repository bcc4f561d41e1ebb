//! `prospect`: the full pipeline on the synthetic domain — generate data,
//! train the diffusion model, sample with per-stage conditions, invert
//! images into prompt spectra, mix attribute bands, analyze trajectory
//! spectra, and evaluate against configured thresholds.

mod cmds;
mod errors;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "prospect", version, about = "Per-stage prompt conditioning lab")]
struct Cli {
    /// Worker threads for parallel trials (default: all cores, or the
    /// PROSPECT_LAB_THREADS environment variable).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic dataset (PGM files plus manifest.csv).
    GenData(cmds::gen_data::Args),
    /// Train the conditional denoiser on a generated dataset.
    Train(cmds::train::Args),
    /// Sample an image with a label, plan, or spectrum condition.
    Sample(cmds::sample::Args),
    /// Invert an image into a prompt spectrum against a frozen model.
    Invert(cmds::invert::Args),
    /// Assemble a spectrum from per-attribute source spectra.
    Mix(cmds::mix::Args),
    /// Compute the frequency-progression curve of a recorded trajectory.
    Analyze(cmds::analyze::Args),
    /// Run an evaluation suite and check configured thresholds.
    Evaluate(cmds::evaluate::Args),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let jobs = cli.jobs.or_else(|| {
        std::env::var("PROSPECT_LAB_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(jobs) = jobs {
        prospect_core::parallel::set_jobs(jobs);
    }

    let result = match cli.command {
        Command::GenData(args) => cmds::gen_data::run(args),
        Command::Train(args) => cmds::train::run(args),
        Command::Sample(args) => cmds::sample::run(args),
        Command::Invert(args) => cmds::invert::run(args),
        Command::Mix(args) => cmds::mix::run(args),
        Command::Analyze(args) => cmds::analyze::run(args),
        Command::Evaluate(args) => cmds::evaluate::run(args),
    };

    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
