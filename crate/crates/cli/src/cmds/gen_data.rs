use std::path::PathBuf;

use clap::Parser;
use prospect_core::rng::RngStream;
use prospect_core::synth::{export_dataset, sample_dataset};

use crate::errors::{CmdError, CmdResult};

#[derive(Parser)]
pub struct Args {
    /// Output directory for PGM files and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cycle the 48 label combos exactly (count must be a multiple of 48).
    #[arg(long)]
    pub stratified: bool,
}

pub fn run(args: Args) -> CmdResult {
    if args.count < 1 {
        return Err(CmdError::usage("--count must be at least 1"));
    }
    let mut rng = RngStream::new(args.seed, 0);
    let items = sample_dataset(args.count, &mut rng, args.stratified)?;
    export_dataset(&args.out, &items)?;
    println!("wrote {} images + manifest to {}", items.len(), args.out.display());
    Ok(())
}
