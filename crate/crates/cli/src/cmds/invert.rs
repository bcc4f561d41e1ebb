use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use prospect_core::fileio::pgm::read_pgm;
use prospect_core::invert::{prospect_invert, ti_invert, InitMode, InversionConfig, InversionMode};
use prospect_core::spectrum::StageSchedule;

use crate::cmds::{load_config, load_model};
use crate::errors::{CmdError, CmdResult};

#[derive(Parser)]
pub struct Args {
    #[arg(long)]
    pub model: PathBuf,
    /// Image to invert (PGM, sized to the model input).
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// ti = one embedding for all stages; prospect = one per stage.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output spectrum (.psar); a loss CSV lands next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: Args) -> CmdResult {
    if args.image.is_empty() {
        return Err(CmdError::usage("at least one --image is required"));
    }
    let cfg = load_config(&args.config)?;
    let (model, sched) = load_model(&args.model)?;

    let mut images = Vec::with_capacity(args.image.len());
    for path in &args.image {
        let img = read_pgm(path)?;
        if img.shape() != [model.cfg.img, model.cfg.img] {
            return Err(CmdError::Runtime(prospect_core::Error::invalid(format!(
                "image `{}` is {:?}, model expects {0:?}x{0:?} pixels of side {}",
                path.display(),
                img.shape(),
                model.cfg.img
            ))));
        }
        images.push(img);
    }

    let mode = match &args.mode {
        Some(m) => InversionMode::parse(m)?,
        None => InversionMode::parse(&cfg.invert_mode)?,
    };
    let inv_cfg = InversionConfig {
        mode,
        iterations: cfg.invert_iters,
        lr: cfg.invert_lr,
        dropout: cfg.invert_dropout,
        init: InitMode::parse(&cfg.invert_init)?,
        seed: args.seed,
        ..Default::default()
    };
    let stage_sched = StageSchedule::new(sched.t_steps, cfg.stages)?;

    let result = match mode {
        InversionMode::Ti => ti_invert(&model, &sched, stage_sched, &images, &inv_cfg)?,
        InversionMode::Prospect => prospect_invert(&model, &sched, stage_sched, &images, &inv_cfg)?,
    };

    result.spectrum.save(&stage_sched, &args.out)?;
    let loss_path = args.out.with_extension("loss.csv");
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&loss_path)?,
    );
    writeln!(w, "iter,raw_loss,ema_loss,stage")?;
    for i in 0..result.losses.len() {
        writeln!(w, "{i},{},{},{}", result.losses[i], result.ema_losses[i], result.stages[i])
            ?;
    }
    w.flush()?;

    println!(
        "inverted {} image(s), final EMA loss {:.4}, spectrum: {}",
        images.len(),
        result.ema_losses.last().copied().unwrap_or(f32::NAN),
        args.out.display()
    );
    Ok(())
}
