pub mod analyze;
pub mod evaluate;
pub mod gen_data;
pub mod invert;
pub mod mix;
pub mod sample;
pub mod train;

use std::path::Path;

use prospect_core::fileio::config::Config;
use prospect_core::model::Denoiser;
use prospect_core::schedule::NoiseSchedule;
use prospect_core::spectrum::StageSchedule;

use crate::errors::CmdError;

/// Load the run config, or defaults when no file is given.
pub fn load_config(path: &Option<std::path::PathBuf>) -> Result<Config, CmdError> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

pub fn load_model(path: &Path) -> Result<(Denoiser<f32>, NoiseSchedule), CmdError> {
    if !path.exists() {
        return Err(CmdError::Runtime(prospect_core::Error::invalid(format!(
            "model file `{}` does not exist",
            path.display()
        ))));
    }
    Ok(prospect_core::model::load_checkpoint(path)?)
}

pub fn stage_schedule(cfg: &Config, sched: &NoiseSchedule) -> Result<StageSchedule, CmdError> {
    Ok(StageSchedule::new(sched.t_steps, cfg.stages)?)
}
