use std::path::PathBuf;

use clap::Parser;
use prospect_core::spectrum::{assemble, AttributeBands, PromptSpectrum, StageSchedule};

use crate::cmds::load_config;
use crate::errors::{CmdError, CmdResult};

#[derive(Parser)]
pub struct Args {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub c: Option<PathBuf>,
    /// Which source feeds each band, e.g. `layout=a,content=b,material=c`.
    #[arg(long)]
    pub bands: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Run config (band boundaries, stage count).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn load_spectrum(path: &PathBuf) -> Result<(PromptSpectrum, StageSchedule), CmdError> {
    PromptSpectrum::load(path).map_err(|e| {
        CmdError::Runtime(prospect_core::Error::invalid(format!("{}: {e}", path.display())))
    })
}

pub fn run(args: Args) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let (spec_a, ss_a) = load_spectrum(&args.a)?;
    let (spec_b, ss_b) = load_spectrum(&args.b)?;
    if ss_a != ss_b || spec_a.d() != spec_b.d() {
        return Err(CmdError::Runtime(prospect_core::Error::invalid(format!(
            "`{}` does not match `{}` (n/d/T differ)",
            args.b.display(),
            args.a.display()
        ))));
    }
    let spec_c = match &args.c {
        Some(path) => {
            let (s, ss) = load_spectrum(path)?;
            if ss != ss_a || s.d() != spec_a.d() {
                return Err(CmdError::Runtime(prospect_core::Error::invalid(format!(
                    "`{}` does not match `{}` (n/d/T differ)",
                    path.display(),
                    args.a.display()
                ))));
            }
            Some(s)
        }
        None => None,
    };

    // parse the band-to-source assignment
    let mut by_factor = [None::<char>; 3];
    for part in args.bands.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CmdError::usage(format!("expected key=value in --bands, got `{part}`")))?;
        let idx = match k.trim() {
            "layout" => 0,
            "content" => 1,
            "material" => 2,
            other => return Err(CmdError::usage(format!("unknown band `{other}`"))),
        };
        let src = match v.trim() {
            "a" => 'a',
            "b" => 'b',
            "c" => 'c',
            other => return Err(CmdError::usage(format!("band source must be a|b|c, got `{other}`"))),
        };
        by_factor[idx] = Some(src);
    }
    let pick = |slot: Option<char>, name: &str| -> Result<&PromptSpectrum, CmdError> {
        match slot {
            Some('a') => Ok(&spec_a),
            Some('b') => Ok(&spec_b),
            Some('c') => spec_c
                .as_ref()
                .ok_or_else(|| CmdError::usage("--bands references `c` but --c was not given")),
            Some(_) => unreachable!(),
            None => Err(CmdError::usage(format!("--bands must assign `{name}`"))),
        }
    };
    let layout_src = pick(by_factor[0], "layout")?;
    let content_src = pick(by_factor[1], "content")?;
    let material_src = pick(by_factor[2], "material")?;

    let n = ss_a.n;
    let bands = AttributeBands::new(cfg.layout_band, cfg.content_band, cfg.material_band, n)?;
    let mixed = assemble(&bands, layout_src, content_src, material_src)?;
    mixed.save(&ss_a, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
