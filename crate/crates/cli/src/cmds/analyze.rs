use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use prospect_core::fileio::pgm::{read_pgm, write_pgm};
use prospect_core::spectral::{dft2, hf_ratio, log_magnitude_image};

use crate::errors::{CmdError, CmdResult};

#[derive(Parser)]
pub struct Args {
    /// Trajectory directory written by `sample --record-trajectory`.
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Radial cutoff as a fraction of the max radius.
    #[arg(long, default_value_t = 0.25)]
    pub cutoff: f32,
    /// Output CSV (step,t,hf_ratio).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a centered log-magnitude spectrum PGM per step.
    #[arg(long)]
    pub spectra: bool,
}

pub fn run(args: Args) -> CmdResult {
    let manifest = args.trajectory.join("trajectory.csv");
    if !manifest.exists() {
        return Err(CmdError::Runtime(prospect_core::Error::invalid(format!(
            "no trajectory.csv in `{}`",
            args.trajectory.display()
        ))));
    }
    let text = std::fs::read_to_string(&manifest)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CmdError::Runtime(prospect_core::Error::format(
                "trajectory",
                format!("bad row at line {}", ln + 1),
            )));
        }
        let step: usize = parts[0].parse().map_err(|_| {
            CmdError::Runtime(prospect_core::Error::format("trajectory", "bad step index"))
        })?;
        let t: usize = parts[1].parse().map_err(|_| {
            CmdError::Runtime(prospect_core::Error::format("trajectory", "bad timestep"))
        })?;
        rows.push((step, t, parts[2].trim().to_string()));
    }
    if rows.is_empty() {
        return Err(CmdError::Runtime(prospect_core::Error::EmptyData));
    }

    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&args.out)?,
    );
    writeln!(out, "step,t,hf_ratio")?;
    let mut missing = 0usize;
    for (step, t, file) in &rows {
        let img = read_pgm(args.trajectory.join(file))?;
        let spec = dft2(&img);
        match hf_ratio(&spec, args.cutoff) {
            Ok(r) => writeln!(out, "{step},{t},{r}")?,
            Err(_) => {
                // zero-energy entries are reported as missing values
                missing += 1;
                writeln!(out, "{step},{t},")?;
            }
        }
        if args.spectra {
            let name = format!("spectrum_{step:03}.pgm");
            write_pgm(args.trajectory.join(name), &log_magnitude_image(&spec))?;
        }
    }
    out.flush()?;
    println!("analyzed {} steps ({missing} zero-energy), wrote {}", rows.len(), args.out.display());
    Ok(())
}
