use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use prospect_core::model::{save_checkpoint, ModelConfig};
use prospect_core::rng::RngStream;
use prospect_core::schedule::make_schedule;
use prospect_core::synth::load_dataset;
use prospect_core::train::{train, TrainConfig};

use crate::cmds::load_config;
use crate::errors::{CmdError, CmdResult};

#[derive(Parser)]
pub struct Args {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run config file (`key = value`); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint output path (.psar); a loss CSV lands next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Progress print interval in steps (0 = silent).
    #[arg(long, default_value_t = 500)]
    pub log_every: usize,
}

pub fn run(args: Args) -> CmdResult {
    let cfg = load_config(&args.config)?;
    if !args.data.exists() {
        return Err(CmdError::Runtime(prospect_core::Error::invalid(format!(
            "data directory `{}` does not exist",
            args.data.display()
        ))));
    }
    let data = load_dataset(&args.data)?;
    let sched = make_schedule(cfg.t_steps, cfg.beta_min, cfg.beta_max)?;
    let model_cfg = ModelConfig { d_embed: cfg.embed_dim, ..ModelConfig::default() };
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        steps: cfg.train_steps,
        cond_dropout: cfg.cond_dropout,
        momentum: cfg.momentum,
    };

    let seed_rng = RngStream::new(args.seed, 0);
    let started = std::time::Instant::now();
    let log_every = args.log_every;
    let result = train(&data, &train_cfg, model_cfg, &sched, &seed_rng, |step, loss, ema| {
        if log_every > 0 && (step + 1) % log_every == 0 {
            eprintln!(
                "step {:>6}/{}  loss {loss:.4}  ema {ema:.4}  [{:.0}s]",
                step + 1,
                train_cfg.steps,
                started.elapsed().as_secs_f64()
            );
        }
    })?;

    save_checkpoint(&result.model, &sched, &args.out)?;
    let loss_path = args.out.with_extension("loss.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&loss_path)?);
    writeln!(w, "step,loss,ema_loss")?;
    for (i, (l, e)) in result.losses.iter().zip(&result.ema_losses).enumerate() {
        writeln!(w, "{i},{l},{e}")?;
    }
    w.flush()?;

    let final_ema = result.ema_losses.last().copied().unwrap_or(f32::NAN);
    println!("final EMA loss: {final_ema:.4}");
    println!("checkpoint: {}", args.out.display());
    Ok(())
}
