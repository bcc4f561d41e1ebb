use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use prospect_core::fileio::pgm::write_pgm;
use prospect_core::rng::RngStream;
use prospect_core::sampler::{ddim_sample, SamplerConfig};
use prospect_core::spectrum::{parse_plan, PromptSpectrum, StageConditions};
use prospect_core::synth::AttributeLabel;

use crate::cmds::{load_config, load_model, stage_schedule};
use crate::errors::{CmdError, CmdResult};

#[derive(Parser)]
pub struct Args {
    /// Model checkpoint (.psar).
    #[arg(long)]
    pub model: PathBuf,
    /// DDIM step count S.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale.
    #[arg(long)]
    pub w: Option<f32>,
    /// DDIM stochasticity in [0,1].
    #[arg(long)]
    pub eta: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output image (PGM).
    #[arg(long)]
    pub out: PathBuf,
    /// Condition: label tuple `layout=TL,content=circle,material=checker`.
    #[arg(long)]
    pub label: Option<String>,
    /// Condition: stage plan, e.g. `1-2:label(...);3-10:null`.
    #[arg(long)]
    pub plan: Option<String>,
    /// Condition: spectrum file (.psar).
    #[arg(long)]
    pub spectrum: Option<PathBuf>,
    /// Record the per-step predicted-x0 trajectory into this directory.
    #[arg(long)]
    pub record_trajectory: Option<PathBuf>,
    /// Run config file (stage count, defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: Args) -> CmdResult {
    let sources = args.label.is_some() as u8 + args.plan.is_some() as u8 + args.spectrum.is_some() as u8;
    if sources != 1 {
        return Err(CmdError::usage(
            "exactly one of --label, --plan, --spectrum must be given",
        ));
    }
    let cfg = load_config(&args.config)?;
    let (model, sched) = load_model(&args.model)?;

    let cond = if let Some(label) = &args.label {
        let label = AttributeLabel::parse_kv(label)?;
        let ss = stage_schedule(&cfg, &sched)?;
        StageConditions::constant(ss, model.label_embedding(label))
    } else if let Some(plan) = &args.plan {
        let plan = parse_plan(plan)?;
        let ss = stage_schedule(&cfg, &sched)?;
        StageConditions::from_plan(ss, &plan, &model)?
    } else {
        let path = args.spectrum.as_ref().expect("spectrum source");
        let (spec, ss) = PromptSpectrum::load(path)?;
        if ss.t_steps != sched.t_steps {
            return Err(CmdError::Runtime(prospect_core::Error::invalid(format!(
                "spectrum `{}` was built for T={}, model uses T={}",
                path.display(),
                ss.t_steps,
                sched.t_steps
            ))));
        }
        StageConditions::from_spectrum(ss, &spec)?
    };

    let sampler_cfg = SamplerConfig {
        steps: args.steps.unwrap_or(cfg.ddim_steps),
        guidance_w: args.w.unwrap_or(cfg.guidance_w),
        eta: args.eta.unwrap_or(cfg.eta),
        record_trajectory: args.record_trajectory.is_some(),
    };
    let mut rng = RngStream::new(args.seed, 0);
    let (image, trajectory) = ddim_sample(&model, &sched, &cond, &sampler_cfg, &mut rng)?;
    write_pgm(&args.out, &image.clamped(-1.0, 1.0))?;

    if let Some(dir) = &args.record_trajectory {
        let rec = trajectory.expect("trajectory requested");
        std::fs::create_dir_all(dir)?;
        let mut csv = std::io::BufWriter::new(
            std::fs::File::create(dir.join("trajectory.csv"))?,
        );
        writeln!(csv, "step,t,file")?;
        for (i, (t, img)) in rec.entries.iter().enumerate() {
            let name = format!("step_{i:03}.pgm");
            write_pgm(dir.join(&name), img)?;
            writeln!(csv, "{i},{t},{name}")?;
        }
        csv.flush()?;
        println!("trajectory: {} steps in {}", rec.len(), dir.display());
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
